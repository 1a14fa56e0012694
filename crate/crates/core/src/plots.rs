//! Static SVG comparison plots.

use std::collections::BTreeMap;
use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::eval::DiceReport;

const SIZE: (u32, u32) = (640, 420);
const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Format(format!("plot: {e}"))
}

fn by_run(reports: &[DiceReport]) -> BTreeMap<&str, Vec<&DiceReport>> {
    let mut runs: BTreeMap<&str, Vec<&DiceReport>> = BTreeMap::new();
    for r in reports {
        runs.entry(r.run.as_str()).or_default().push(r);
    }
    for v in runs.values_mut() {
        v.sort_by_key(|r| r.step);
    }
    runs
}

/// Old-class and all-class mean Dice after each step, one pair of lines
/// per run.
pub fn forgetting_curve(reports: &[DiceReport], path: &Path) -> Result<()> {
    let runs = by_run(reports);
    let max_step = reports.iter().map(|r| r.step).max().unwrap_or(1).max(2);
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Dice after each step", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d(0.75f64..max_step as f64 + 0.25, 0f64..100f64)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("step")
        .y_desc("Dice (%)")
        .x_labels(max_step as usize)
        .x_label_formatter(&|x| format!("{x:.0}"))
        .draw()
        .map_err(plot_err)?;
    for (k, (run, rs)) in runs.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let all: Vec<(f64, f64)> = rs.iter().map(|r| (r.step as f64, r.summary.all_mean)).collect();
        chart
            .draw_series(LineSeries::new(all.clone(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(format!("{run} all"))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        chart.draw_series(all.iter().map(|&p| Circle::new(p, 3, color.filled()))).map_err(plot_err)?;
        let old: Vec<(f64, f64)> =
            rs.iter().filter_map(|r| r.summary.old_mean.map(|m| (r.step as f64, m))).collect();
        if !old.is_empty() {
            chart
                .draw_series(old.iter().map(|&p| TriangleMarker::new(p, 5, color.filled())))
                .map_err(plot_err)?
                .label(format!("{run} old"))
                .legend(move |(x, y)| TriangleMarker::new((x + 8, y), 5, color.filled()));
        }
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Old / new / all bars of each run's final report.
pub fn split_bars(reports: &[DiceReport], path: &Path) -> Result<()> {
    let runs = by_run(reports);
    let finals: Vec<(&str, &DiceReport)> = runs.iter().filter_map(|(k, v)| v.last().map(|r| (*k, *r))).collect();
    let n = finals.len().max(1);
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Old / new / all mean Dice", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d(0f64..3.0 * n as f64, 0f64..100f64)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(3 * n)
        .x_label_formatter(&|x| match (x.floor() as usize) % 3 {
            0 => "old".into(),
            1 => "new".into(),
            _ => "all".into(),
        })
        .y_desc("Dice (%)")
        .draw()
        .map_err(plot_err)?;
    for (k, (run, r)) in finals.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let vals = [r.summary.old_mean, r.summary.new_mean, Some(r.summary.all_mean)];
        let bars: Vec<Rectangle<(f64, f64)>> = vals
            .iter()
            .enumerate()
            .filter_map(|(j, v)| {
                v.map(|v| {
                    let x0 = (3 * k + j) as f64 + 0.15;
                    Rectangle::new([(x0, 0.0), (x0 + 0.7, v)], color.filled())
                })
            })
            .collect();
        chart
            .draw_series(bars)
            .map_err(plot_err)?
            .label(run.to_string())
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 12, y + 5)], color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}
