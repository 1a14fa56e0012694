//! Training-time augmentation: random affine warps applied identically to
//! image and mask, contrast jitter and Gaussian noise on the image, and
//! crop/pad to the training canvas.

use rand::{Rng, RngExt};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledSample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub affine: bool,
    pub contrast: bool,
    pub noise: bool,
    pub max_rotation_deg: f64,
    /// Zoom factor drawn from `1 ± scale_jitter`.
    pub scale_jitter: f64,
    pub max_shift: f64,
    /// Contrast factor drawn from `1 ± contrast_jitter`.
    pub contrast_jitter: f64,
    /// Noise std drawn uniformly from `[0, noise_std]`.
    pub noise_std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            affine: true,
            contrast: true,
            noise: true,
            max_rotation_deg: 15.0,
            scale_jitter: 0.1,
            max_shift: 3.0,
            contrast_jitter: 0.2,
            noise_std: 0.03,
        }
    }
}

impl AugmentConfig {
    pub fn off() -> Self {
        Self { affine: false, contrast: false, noise: false, ..Self::default() }
    }
}

/// Rotation about the image centre, then isotropic zoom, then shift.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub angle_deg: f64,
    pub scale: f64,
    pub shift_x: f64,
    pub shift_y: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine { angle_deg: 0.0, scale: 1.0, shift_x: 0.0, shift_y: 0.0 };

    /// Source coordinates for output pixel `(x, y)`.
    fn source(&self, x: f64, y: f64, cx: f64, cy: f64) -> (f64, f64) {
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let (dx, dy) = ((x - cx - self.shift_x) / self.scale, (y - cy - self.shift_y) / self.scale);
        (c * dx + s * dy + cx, -s * dx + c * dy + cy)
    }
}

/// Warps image (bilinear) and mask (nearest) with `a`; outside pixels
/// become 0.
pub fn apply_affine(sample: &LabeledSample, a: &Affine) -> LabeledSample {
    let (h, w) = (sample.height, sample.width);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let plane = h * w;
    let mut image = vec![0f32; sample.image.len()];
    let mut label = vec![0u8; plane];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = a.source(x as f64, y as f64, cx, cy);
            let (nx, ny) = (sx.round(), sy.round());
            if nx >= 0.0 && ny >= 0.0 && (nx as usize) < w && (ny as usize) < h {
                label[y * w + x] = sample.label[ny as usize * w + nx as usize];
            }
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            for c in 0..sample.image.len() / plane {
                let src = &sample.image[c * plane..(c + 1) * plane];
                let at = |xx: f64, yy: f64| -> f64 {
                    if xx < 0.0 || yy < 0.0 || xx as usize >= w || yy as usize >= h {
                        0.0
                    } else {
                        src[yy as usize * w + xx as usize] as f64
                    }
                };
                let v = (1.0 - fx) * (1.0 - fy) * at(x0, y0)
                    + fx * (1.0 - fy) * at(x0 + 1.0, y0)
                    + (1.0 - fx) * fy * at(x0, y0 + 1.0)
                    + fx * fy * at(x0 + 1.0, y0 + 1.0);
                image[c * plane + y * w + x] = v as f32;
            }
        }
    }
    LabeledSample { image, label, ..sample.clone() }
}

/// Crops or zero-pads to `size x size`. `offset` in `[0, 1]` picks the
/// window position along each axis (0.5 = centred).
pub fn crop_or_pad(sample: &LabeledSample, size: usize, offset: (f64, f64)) -> LabeledSample {
    let (h, w) = (sample.height, sample.width);
    if h == size && w == size {
        return sample.clone();
    }
    let channels = sample.image.len() / (h * w);
    // signed start of the window in source coordinates
    let start = |len: usize, t: f64| -> isize { ((len as f64 - size as f64) * t).round() as isize };
    let (oy, ox) = (start(h, offset.1), start(w, offset.0));
    let mut image = vec![0f32; channels * size * size];
    let mut label = vec![0u8; size * size];
    for y in 0..size {
        let sy = y as isize + oy;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for x in 0..size {
            let sx = x as isize + ox;
            if sx < 0 || sx >= w as isize {
                continue;
            }
            let (si, di) = (sy as usize * w + sx as usize, y * size + x);
            label[di] = sample.label[si];
            for c in 0..channels {
                image[c * size * size + di] = sample.image[c * h * w + si];
            }
        }
    }
    LabeledSample { height: size, width: size, image, label, ..sample.clone() }
}

/// One random augmentation of `sample` at `size x size`.
pub fn augment<R: Rng>(sample: &LabeledSample, cfg: &AugmentConfig, size: usize, rng: &mut R) -> LabeledSample {
    let offset = if sample.height == size && sample.width == size {
        (0.5, 0.5)
    } else {
        (rng.random::<f64>(), rng.random::<f64>())
    };
    let mut out = crop_or_pad(sample, size, offset);
    if cfg.affine {
        let a = Affine {
            angle_deg: rng.random_range(-1.0..=1.0) * cfg.max_rotation_deg,
            scale: 1.0 + rng.random_range(-1.0..=1.0) * cfg.scale_jitter,
            shift_x: rng.random_range(-1.0..=1.0) * cfg.max_shift,
            shift_y: rng.random_range(-1.0..=1.0) * cfg.max_shift,
        };
        out = apply_affine(&out, &a);
    }
    if cfg.contrast {
        let factor = 1.0 + rng.random_range(-1.0..=1.0) * cfg.contrast_jitter;
        let mean = out.image.iter().map(|&v| v as f64).sum::<f64>() / out.image.len().max(1) as f64;
        for v in &mut out.image {
            *v = ((*v as f64 - mean) * factor + mean).clamp(0.0, 1.0) as f32;
        }
    }
    if cfg.noise && cfg.noise_std > 0.0 {
        let std = rng.random_range(0.0..=cfg.noise_std);
        if std > 0.0 {
            let dist = Normal::new(0.0, std).expect("valid std");
            for v in &mut out.image {
                *v = (*v as f64 + dist.sample(rng)).clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(h: usize, w: usize) -> LabeledSample {
        LabeledSample {
            height: h,
            width: w,
            image: (0..3 * h * w).map(|i| (i % 11) as f32 / 11.0).collect(),
            label: (0..h * w).map(|i| u8::from(i % w < 2 && i / w < 3)).collect(),
            class_id: 0,
            scale_id: 0,
            scene_seed: 0,
        }
    }

    #[test]
    fn all_off_is_identity() {
        let s = sample(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(augment(&s, &AugmentConfig::off(), 8, &mut rng), s);
    }

    #[test]
    fn identity_affine_is_identity() {
        let s = sample(6, 6);
        assert_eq!(apply_affine(&s, &Affine::IDENTITY), s);
    }

    #[test]
    fn mask_stays_binary() {
        let s = sample(16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a = augment(&s, &AugmentConfig::default(), 16, &mut rng);
            assert!(a.label.iter().all(|&v| v <= 1));
            assert!(a.image.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn pad_then_crop_back_round_trips() {
        let s = sample(6, 6);
        let padded = crop_or_pad(&s, 10, (0.5, 0.5));
        assert_eq!(padded.height, 10);
        assert_eq!(crop_or_pad(&padded, 6, (0.5, 0.5)), s);
    }

    #[test]
    fn same_rng_state_same_output() {
        let s = sample(12, 12);
        let a = augment(&s, &AugmentConfig::default(), 12, &mut ChaCha8Rng::seed_from_u64(3));
        let b = augment(&s, &AugmentConfig::default(), 12, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }

    #[test]
    fn quarter_turn_permutes_pixels() {
        let s = sample(7, 7);
        let r = apply_affine(&s, &Affine { angle_deg: 90.0, ..Affine::IDENTITY });
        let n = 7;
        for y in 0..n {
            for x in 0..n {
                let (sy, sx) = (n - 1 - x, y);
                assert_eq!(r.label[y * n + x], s.label[sy * n + sx]);
                for c in 0..3 {
                    let (got, want) = (r.image[c * n * n + y * n + x], s.image[c * n * n + sy * n + sx]);
                    assert!((got - want).abs() < 1e-6, "({x}, {y}) channel {c}");
                }
            }
        }
    }
}
