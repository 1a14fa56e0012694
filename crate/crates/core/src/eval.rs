//! Evaluation: hard Dice per class, old/new/all aggregation, paired
//! significance tests and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use irs_autodiff::Tensor;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::dataset::{read_json, write_file, write_json, LabeledSample};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::relation::ClassRegistry;

pub const EVAL_BATCH: usize = 16;
pub const METRICS_FILE: &str = "metrics.json";
pub const PER_CLASS_FILE: &str = "per_class.csv";
pub const METRICS_VERSION: u32 = 1;

/// Hard Dice in percent. Two empty masks score 100.
pub fn hard_dice(pred: &[bool], label: &[bool]) -> Result<f64> {
    if pred.len() != label.len() {
        return Err(Error::LengthMismatch(pred.len(), label.len()));
    }
    let (mut inter, mut sp, mut sl) = (0usize, 0usize, 0usize);
    for (&p, &l) in pred.iter().zip(label) {
        inter += usize::from(p && l);
        sp += usize::from(p);
        sl += usize::from(l);
    }
    if sp + sl == 0 {
        return Ok(100.0);
    }
    Ok(200.0 * inter as f64 / (sp + sl) as f64)
}

/// Binary prediction: foreground probability strictly above 0.5.
pub fn threshold(prob: &[f64]) -> Vec<bool> {
    prob.iter().map(|&p| p > 0.5).collect()
}

pub fn samples_to_tensor(samples: &[&LabeledSample]) -> Tensor {
    let (h, w) = (samples[0].height, samples[0].width);
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    for s in samples {
        data.extend(s.image.iter().map(|&v| v as f64));
    }
    Tensor::new(&[samples.len(), 3, h, w], data)
}

/// Per-image Dice for every class present in `samples`, in sample order.
pub fn dice_per_class(model: &Model, samples: &[LabeledSample]) -> Result<BTreeMap<usize, Vec<f64>>> {
    let canvas = model.cfg.backbone.canvas;
    let mut out: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for s in samples {
        model.registry.get(s.class_id)?;
        if s.height != canvas || s.width != canvas {
            return Err(Error::Shape(format!("sample is {}x{}, model canvas is {canvas}", s.height, s.width)));
        }
    }
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&LabeledSample> = chunk.iter().collect();
        let x = samples_to_tensor(&refs);
        let classes: Vec<usize> = chunk.iter().map(|s| s.class_id).collect();
        let scales: Vec<usize> = chunk.iter().map(|s| s.scale_id).collect();
        let prob = model.predict(&x, &classes, &scales)?;
        let plane = canvas * canvas;
        for (i, s) in chunk.iter().enumerate() {
            let pred = threshold(&prob.data()[i * plane..(i + 1) * plane]);
            let label: Vec<bool> = s.label.iter().map(|&v| v != 0).collect();
            out.entry(s.class_id).or_default().push(hard_dice(&pred, &label)?);
        }
    }
    Ok(out)
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unweighted class means of the old and new splits plus the mean over all
/// classes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub old_mean: Option<f64>,
    pub new_mean: Option<f64>,
    pub all_mean: f64,
    pub n_old: usize,
    pub n_new: usize,
}

/// `classes` holds `(class mean Dice, is_old)` pairs.
pub fn aggregate(classes: &[(f64, bool)]) -> Result<Aggregate> {
    if classes.is_empty() {
        return Err(Error::EmptySplit("all"));
    }
    let pick = |old: bool| -> Vec<f64> { classes.iter().filter(|c| c.1 == old).map(|c| c.0).collect() };
    let (old, new) = (pick(true), pick(false));
    let all: Vec<f64> = classes.iter().map(|c| c.0).collect();
    Ok(Aggregate {
        old_mean: (!old.is_empty()).then(|| mean(&old)),
        new_mean: (!new.is_empty()).then(|| mean(&new)),
        all_mean: mean(&all),
        n_old: old.len(),
        n_new: new.len(),
    })
}

/// All-class mean from split means, weighted by class counts.
pub fn combine_split_means(old: (f64, usize), new: (f64, usize)) -> Result<f64> {
    let n = old.1 + new.1;
    if n == 0 {
        return Err(Error::EmptySplit("all"));
    }
    Ok((old.0 * old.1 as f64 + new.0 * new.1 as f64) / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDice {
    pub id: usize,
    pub name: String,
    pub group: String,
    pub scale: String,
    pub step: u32,
    pub mean: f64,
    pub per_image: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub run: String,
    /// Step the evaluated model was trained through.
    pub step: u32,
    pub per_class: Vec<ClassDice>,
    pub groups: BTreeMap<String, f64>,
    pub summary: Aggregate,
}

impl DiceReport {
    /// Builds the report for a model trained through `step`: classes
    /// introduced before `step` are old, those introduced at `step` new.
    pub fn build(run: &str, step: u32, registry: &ClassRegistry, dice: &BTreeMap<usize, Vec<f64>>) -> Result<Self> {
        let mut per_class = Vec::new();
        for (&id, scores) in dice {
            let c = registry.get(id)?;
            if c.step_introduced > step {
                continue;
            }
            per_class.push(ClassDice {
                id,
                name: c.name.clone(),
                group: c.group.as_str().to_string(),
                scale: c.scale.as_str().to_string(),
                step: c.step_introduced,
                mean: mean(scores),
                per_image: scores.clone(),
            });
        }
        let summary = aggregate(&per_class.iter().map(|c| (c.mean, c.step < step)).collect::<Vec<_>>())?;
        let mut by_group: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for c in &per_class {
            by_group.entry(c.group.clone()).or_default().push(c.mean);
        }
        let groups = by_group.into_iter().map(|(k, v)| (k, mean(&v))).collect();
        Ok(Self { run: run.to_string(), step, per_class, groups, summary })
    }

    /// Per-image Dice of every class in this report, concatenated in class
    /// order; `old` selects old (`Some(true)`), new (`Some(false)`) or all
    /// (`None`) classes.
    pub fn per_image(&self, old: Option<bool>) -> Vec<f64> {
        self.per_class
            .iter()
            .filter(|c| old.is_none_or(|o| (c.step < self.step) == o))
            .flat_map(|c| c.per_image.iter().copied())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestKind {
    /// Wilcoxon signed-rank when paired, Mann-Whitney U otherwise.
    #[default]
    Rank,
    /// Paired t-test when paired, Welch's t-test otherwise.
    T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub method_a: String,
    pub method_b: String,
    pub test: String,
    pub n: usize,
    pub statistic: f64,
    pub p_value: f64,
}

pub const MIN_SIGNIFICANCE_N: usize = 6;

/// Two-sided test of `a` against `b`.
pub fn significance(a: &[f64], b: &[f64], paired: bool, kind: TestKind) -> Result<(String, f64, f64)> {
    if paired && a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len().min(b.len());
    if n < MIN_SIGNIFICANCE_N {
        return Err(Error::InsufficientData { need: MIN_SIGNIFICANCE_N, got: n });
    }
    let (name, stat, p) = match (paired, kind) {
        (true, TestKind::Rank) => {
            let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            let (w, p) = wilcoxon_signed_rank(&d);
            ("wilcoxon_signed_rank", w, p)
        }
        (true, TestKind::T) => {
            let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            let (t, p) = one_sample_t(&d);
            ("paired_t", t, p)
        }
        (false, TestKind::Rank) => {
            let (u, p) = mann_whitney(a, b);
            ("mann_whitney_u", u, p)
        }
        (false, TestKind::T) => {
            let (t, p) = welch_t(a, b);
            ("welch_t", t, p)
        }
    };
    Ok((name.to_string(), stat, p.clamp(0.0, 1.0)))
}

/// Average ranks (1-based) with ties sharing their mean rank; also returns
/// the tie-group sizes.
fn ranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut r = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (r, ties)
}

pub const EXACT_WILCOXON_MAX_N: usize = 50;

/// Two-sided Wilcoxon signed-rank test on paired differences. Zero
/// differences are dropped; if none remain the p-value is 1. Small samples
/// without ties use the exact null distribution, the rest the normal
/// approximation with tie and continuity correction. Returns `(W+, p)`.
pub fn wilcoxon_signed_rank(d: &[f64]) -> (f64, f64) {
    let nz: Vec<f64> = d.iter().copied().filter(|&x| x != 0.0).collect();
    let n = nz.len();
    if n == 0 {
        return (0.0, 1.0);
    }
    let abs: Vec<f64> = nz.iter().map(|x| x.abs()).collect();
    let (r, ties) = ranks(&abs);
    let w_plus: f64 = nz.iter().zip(&r).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let has_ties = ties.iter().any(|&t| t > 1);
    if n <= EXACT_WILCOXON_MAX_N && !has_ties {
        // counts[s] = number of sign assignments with W+ = s
        let max = n * (n + 1) / 2;
        let mut counts = vec![0f64; max + 1];
        counts[0] = 1.0;
        for k in 1..=n {
            for s in (k..=max).rev() {
                counts[s] += counts[s - k];
            }
        }
        let w = w_plus.round() as usize;
        let lo = w.min(max - w);
        let tail: f64 = counts[..=lo].iter().sum();
        let p = 2.0 * tail / 2f64.powi(n as i32);
        return (w_plus, p.min(1.0));
    }
    let mu = total / 2.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
    let var = (n * (n + 1) * (2 * n + 1)) as f64 / 24.0 - tie_term;
    if var <= 0.0 {
        return (w_plus, 1.0);
    }
    let z = ((w_plus - mu).abs() - 0.5).max(0.0) / var.sqrt();
    (w_plus, 2.0 * (1.0 - std_normal_cdf(z)))
}

fn std_normal_cdf(z: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").cdf(z)
}

fn students_two_sided(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return if t.is_nan() { 1.0 } else { 0.0 };
    }
    let dist = StudentsT::new(0.0, 1.0, df).expect("valid dof");
    2.0 * (1.0 - dist.cdf(t.abs()))
}

fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

fn one_sample_t(d: &[f64]) -> (f64, f64) {
    let n = d.len() as f64;
    let (m, v) = (mean(d), variance(d));
    if v == 0.0 {
        return if m == 0.0 { (0.0, 1.0) } else { (f64::INFINITY.copysign(m), 0.0) };
    }
    let t = m / (v / n).sqrt();
    (t, students_two_sided(t, n - 1.0))
}

fn welch_t(a: &[f64], b: &[f64]) -> (f64, f64) {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (va, vb) = (variance(a) / na, variance(b) / nb);
    let diff = mean(a) - mean(b);
    if va + vb == 0.0 {
        return if diff == 0.0 { (0.0, 1.0) } else { (f64::INFINITY.copysign(diff), 0.0) };
    }
    let t = diff / (va + vb).sqrt();
    let df = (va + vb).powi(2) / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    (t, students_two_sided(t, df))
}

fn mann_whitney(a: &[f64], b: &[f64]) -> (f64, f64) {
    let (na, nb) = (a.len(), b.len());
    let all: Vec<f64> = a.iter().chain(b).copied().collect();
    let (r, ties) = ranks(&all);
    let ra: f64 = r[..na].iter().sum();
    let u = ra - (na * (na + 1)) as f64 / 2.0;
    let n = (na + nb) as f64;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (n * (n - 1.0));
    let var = (na * nb) as f64 / 12.0 * ((n + 1.0) - tie_term);
    if var <= 0.0 {
        return (u, 1.0);
    }
    let mu = (na * nb) as f64 / 2.0;
    let z = ((u - mu).abs() - 0.5).max(0.0) / var.sqrt();
    (u, 2.0 * (1.0 - std_normal_cdf(z)))
}

/// Everything `metrics.json` holds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub format_version: u32,
    pub reports: Vec<DiceReport>,
    pub comparisons: Vec<SignificanceResult>,
}

impl Metrics {
    pub fn read(dir: &Path) -> Result<Self> {
        read_json(&dir.join(METRICS_FILE))
    }
}

/// `per_class.csv` for one report, two decimals.
pub fn per_class_csv(report: &DiceReport) -> String {
    let mut s = String::from("id,name,group,scale,step,dice\n");
    for c in &report.per_class {
        let _ = writeln!(s, "{},{},{},{},{},{:.2}", c.id, c.name, c.group, c.scale, c.step, c.mean);
    }
    s
}

/// Writes `metrics.json`, `per_class.csv` (for the last report) and SVG
/// plots into `dir`.
pub fn emit_report(reports: &[DiceReport], comparisons: &[SignificanceResult], dir: &Path) -> Result<()> {
    let last = reports.last().ok_or(Error::EmptySplit("reports"))?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let metrics = Metrics { format_version: METRICS_VERSION, reports: reports.to_vec(), comparisons: comparisons.to_vec() };
    write_json(&dir.join(METRICS_FILE), &metrics)?;
    write_file(&dir.join(PER_CLASS_FILE), per_class_csv(last).as_bytes())?;
    crate::plots::forgetting_curve(reports, &dir.join("forgetting.svg"))?;
    crate::plots::split_bars(reports, &dir.join("old_new_all.svg"))?;
    Ok(())
}
