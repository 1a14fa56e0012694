//! Fast invariant suite behind `irs selfcheck`.

use std::fmt;
use std::time::Instant;

use irs_autodiff::{Graph, Tensor};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::BackboneConfig;
use crate::dataset::step_matrix;
use crate::error::Result;
use crate::eval::{combine_split_means, hard_dice};
use crate::head::param_layout;
use crate::losses::{anatomy_loss, semi_loss, soft_dice, SemiToggles, SubsetMode};
use crate::model::{Model, ModelConfig};
use crate::nn::Ctx;
use crate::phantom::{observe_relation, PhantomSpec};
use crate::relation::{PropositionMatrix, RelationKind};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn outcome(name: &'static str, r: Result<(bool, String)>) -> CheckResult {
    match r {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult { name, passed: false, detail: format!("error: {e}") },
    }
}

/// The head must carry 162 parameters laid out as (72, 72, 18).
pub fn check_head_layout(layout: (usize, usize, usize)) -> CheckResult {
    let total = layout.0 + layout.1 + layout.2;
    CheckResult {
        name: "head-162-params",
        passed: layout == (72, 72, 18) && total == 162,
        detail: format!("layout {layout:?}, total {total}"),
    }
}

fn check_anatomy_identities() -> Result<(bool, String)> {
    let mut g = Graph::new();
    let n = 16;
    let y = g.constant(Tensor::from_fn(&[4, 4], |i| if i < 8 { 1.0 } else { 0.0 }));
    let inside = g.constant(Tensor::from_fn(&[4, 4], |i| if i < 4 { 0.9 } else { 0.0 }));
    let outside = g.constant(Tensor::from_fn(&[4, 4], |i| if i >= 8 { 0.7 } else { 0.0 }));
    let cover = g.constant(Tensor::from_fn(&[4, 4], |i| if i < 12 { 1.0 } else { 0.0 }));
    let random = g.constant(Tensor::from_fn(&[4, 4], |i| (i as f64 * 0.37).sin().abs()));
    let mut values = Vec::new();
    for (p, rel, mode) in [
        (random, RelationKind::Unrelated, SubsetMode::Literal),
        (outside, RelationKind::MutuallyExclusive, SubsetMode::Literal),
        (inside, RelationKind::NewSupersetOfOld, SubsetMode::Literal),
        (cover, RelationKind::NewSubsetOfOld, SubsetMode::Prose),
    ] {
        let v = anatomy_loss(&mut g, y, p, rel, mode)?;
        values.push(g.value(v).data()[0]);
    }
    let ok = values[0] == 0.0 && values[1].abs() < 1e-12 && values[2].abs() <= 1e-4 && values[3].abs() < 1e-6;
    Ok((ok, format!("{n}-pixel cases give {values:?}")))
}

fn check_semi_identity() -> Result<(bool, String)> {
    let cfg = ModelConfig { backbone: BackboneConfig { canvas: 16, ..BackboneConfig::default() }, ..ModelConfig::default() };
    let mut teacher = Model::new(cfg)?;
    let spec = PhantomSpec::default_kidney(16);
    teacher.register_classes(step_matrix(&spec, 1)?.new_classes())?;
    teacher.step = 1;
    let mut student = teacher.clone();
    student.step = 2;
    let images = Tensor::from_fn(&[2, 3, 16, 16], |i| ((i * 7919) % 101) as f64 / 101.0);
    let prompts = vec![(0, 0), (1, 3)];
    let mut ctx = Ctx::new(&student.store, false, 0);
    let (terms, _) = semi_loss(&mut ctx, &teacher, &student, &images, &prompts, 1.0, &SemiToggles::default())?;
    let total = terms.total(&mut ctx.g);
    let v = ctx.g.value(total).data()[0];
    Ok((v.abs() <= 1e-9, format!("semi loss of a copied teacher = {v:e}")))
}

fn check_aggregation() -> Result<(bool, String)> {
    let all = combine_split_means((58.13, 8), (63.44, 16))?;
    Ok(((all - 61.67).abs() <= 0.01, format!("(58.13 x 8, 63.44 x 16) -> {all:.4}")))
}

fn check_matrix_round_trip() -> Result<(bool, String)> {
    let spec = PhantomSpec::default_kidney(64);
    let m = step_matrix(&spec, 2)?;
    let back = PropositionMatrix::from_json(&m.to_json())?;
    Ok((back == m, format!("{}x{} step-2 matrix", m.dims().0, m.dims().1)))
}

fn check_dice_oracle() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0f64;
    for _ in 0..20 {
        let a: Vec<f64> = (0..64).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..64).map(|_| rng.random::<f64>()).collect();
        let mut g = Graph::new();
        let va = g.constant(Tensor::new(&[8, 8], a.clone()));
        let vb = g.constant(Tensor::new(&[8, 8], b.clone()));
        let d = soft_dice(&mut g, va, vb)?;
        let (mut inter, mut sa, mut sb) = (0.0, 0.0, 0.0);
        for i in 0..64 {
            inter += a[i] * b[i];
            sa += a[i];
            sb += b[i];
        }
        let oracle = 2.0 * inter / (sa + sb + crate::losses::DICE_EPS);
        worst = worst.max((g.value(d).data()[0] - oracle).abs());
        let pa: Vec<bool> = a.iter().map(|&v| v > 0.5).collect();
        let pb: Vec<bool> = b.iter().map(|&v| v > 0.5).collect();
        let both = pa.iter().zip(&pb).filter(|(x, y)| **x && **y).count() as f64;
        let sizes = (pa.iter().filter(|x| **x).count() + pb.iter().filter(|x| **x).count()) as f64;
        worst = worst.max((hard_dice(&pa, &pb)? / 100.0 - 2.0 * both / sizes).abs());
    }
    Ok((worst <= 1e-6, format!("max deviation {worst:e} over 20 instances")))
}

fn check_phantom_relations() -> Result<(bool, String)> {
    let spec = PhantomSpec::default_kidney(64);
    let (mut pairs, mut bad) = (0, 0);
    for seed in 0..5 {
        let scene = spec.generate_scene(seed)?;
        for (&old, a) in &scene.masks {
            for (&new, b) in &scene.masks {
                if old == new || a.count() == 0 || b.count() == 0 {
                    continue;
                }
                let declared = spec.declared_relation(old, new)?;
                if declared == RelationKind::Unrelated {
                    continue;
                }
                pairs += 1;
                if observe_relation(a, b)? != declared {
                    bad += 1;
                }
            }
        }
    }
    Ok((bad == 0, format!("{bad} of {pairs} declared pairs violated over 5 scenes")))
}

fn check_checkpoint_round_trip() -> Result<(bool, String)> {
    let cfg = ModelConfig { backbone: BackboneConfig { canvas: 16, ..BackboneConfig::default() }, ..ModelConfig::default() };
    let mut m = Model::new(cfg)?;
    m.register_classes(step_matrix(&PhantomSpec::default_kidney(16), 1)?.new_classes())?;
    let bytes = m.to_bytes();
    let back = Model::from_bytes(&bytes)?;
    Ok((back.to_bytes() == bytes, format!("{} bytes", bytes.len())))
}

/// Runs every check; the summary is in run order.
pub fn run_all() -> Vec<CheckResult> {
    let started = Instant::now();
    let mut out = vec![check_head_layout(param_layout())];
    let checks: [(&'static str, fn() -> Result<(bool, String)>); 7] = [
        ("anatomy-identities", check_anatomy_identities),
        ("semi-identity", check_semi_identity),
        ("aggregation-arithmetic", check_aggregation),
        ("matrix-json-round-trip", check_matrix_round_trip),
        ("dice-oracle", check_dice_oracle),
        ("phantom-relations", check_phantom_relations),
        ("checkpoint-round-trip", check_checkpoint_round_trip),
    ];
    for (name, f) in checks {
        out.push(outcome(name, f()));
    }
    out.push(CheckResult {
        name: "runtime",
        passed: started.elapsed().as_secs_f64() < 60.0,
        detail: format!("{:.2}s", started.elapsed().as_secs_f64()),
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupted_layout_fails_by_name() {
        let r = check_head_layout((72, 72, 16));
        assert!(!r.passed);
        assert_eq!(r.name, "head-162-params");
    }

    #[test]
    fn all_checks_pass() {
        for r in run_all() {
            assert!(r.passed, "{r}");
        }
    }
}
