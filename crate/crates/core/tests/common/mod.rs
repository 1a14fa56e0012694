//! Scalar-loop reference implementations and small fixtures shared by the
//! integration tests and the acceptance suite.
#![allow(dead_code)]

use irs_core::losses::DICE_EPS;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>()).collect()
}

pub fn normal_ish(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale).collect()
}

pub fn binary(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<f64> {
    (0..n).map(|_| if rng.random::<f64>() < p { 1.0 } else { 0.0 }).collect()
}

pub fn soft_dice_ref(a: &[f64], b: &[f64]) -> f64 {
    let mut inter = 0.0;
    let mut sa = 0.0;
    let mut sb = 0.0;
    for i in 0..a.len() {
        inter += a[i] * b[i];
        sa += a[i];
        sb += b[i];
    }
    2.0 * inter / (sa + sb + DICE_EPS)
}

/// `logits` is `[B, 2, H, W]` row-major, `labels` `[B, H, W]`.
pub fn supervised_ref(logits: &[f64], labels: &[f64], batch: usize, plane: usize) -> f64 {
    let mut dice_sum = 0.0;
    let mut ce_sum = 0.0;
    for b in 0..batch {
        let mut fg = Vec::with_capacity(plane);
        for k in 0..plane {
            let z0 = logits[b * 2 * plane + k];
            let z1 = logits[b * 2 * plane + plane + k];
            let m = z0.max(z1);
            let lse = m + ((z0 - m).exp() + (z1 - m).exp()).ln();
            let (lp0, lp1) = (z0 - lse, z1 - lse);
            let y = labels[b * plane + k];
            ce_sum -= y * lp1 + (1.0 - y) * lp0;
            fg.push(lp1.exp());
        }
        dice_sum += soft_dice_ref(&fg, &labels[b * plane..(b + 1) * plane]);
    }
    1.0 - dice_sum / batch as f64 + ce_sum / (batch * plane) as f64
}

/// KL(softmax(s) ‖ softmax(t)) over `axis` averaged over positions, plus
/// the mean squared difference.
pub fn consistency_ref(t: &[f64], s: &[f64], shape: &[usize], axis: usize) -> f64 {
    let outer: usize = shape[..axis].iter().product();
    let c = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut kl = 0.0;
    for o in 0..outer {
        for i in 0..inner {
            let at = |v: &[f64], k: usize| v[(o * c + k) * inner + i];
            let lse = |v: &[f64]| {
                let m = (0..c).map(|k| at(v, k)).fold(f64::NEG_INFINITY, f64::max);
                m + (0..c).map(|k| (at(v, k) - m).exp()).sum::<f64>().ln()
            };
            let (ls, lt) = (lse(s), lse(t));
            for k in 0..c {
                let lps = at(s, k) - ls;
                let lpt = at(t, k) - lt;
                kl += lps.exp() * (lps - lpt);
            }
        }
    }
    let mse = t.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / t.len() as f64;
    kl / (outer * inner) as f64 + mse
}

pub fn hard_dice_ref(pred: &[bool], label: &[bool]) -> f64 {
    let mut inter = 0.0;
    let mut total = 0.0;
    for i in 0..pred.len() {
        if pred[i] && label[i] {
            inter += 1.0;
        }
        if pred[i] {
            total += 1.0;
        }
        if label[i] {
            total += 1.0;
        }
    }
    if total == 0.0 {
        100.0
    } else {
        200.0 * inter / total
    }
}
