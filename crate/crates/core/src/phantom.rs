//! Synthetic multi-scale phantoms whose containment and exclusion structure
//! matches a declared layout, so every relation in a proposition matrix can
//! be checked pixel by pixel.

use std::collections::BTreeMap;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relation::{Assignments, ClassGroup, ClassInfo, RelationKind, Scale};

/// Binary mask, row-major `H x W`, values 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("{} values for a {height}x{width} mask", data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidMask);
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = f(y, x) as u8;
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn intersection_count(&self, other: &Mask) -> usize {
        self.data.iter().zip(&other.data).filter(|(a, b)| **a != 0 && **b != 0).count()
    }

    pub fn union_with(&mut self, other: &Mask) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a |= *b;
        }
    }

    fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    y0 = y0.min(y);
                    x0 = x0.min(x);
                    y1 = y1.max(y);
                    x1 = x1.max(x);
                }
            }
        }
        (y0 != usize::MAX).then_some((y0, x0, y1, x1))
    }

    /// Foreground pixels with at least one 4-neighbour in the background.
    fn boundary(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(y, x) {
                    continue;
                }
                let edge = y == 0
                    || x == 0
                    || y + 1 == self.height
                    || x + 1 == self.width
                    || !self.get(y - 1, x)
                    || !self.get(y + 1, x)
                    || !self.get(y, x - 1)
                    || !self.get(y, x + 1);
                if edge {
                    out.push((y, x));
                }
            }
        }
        out
    }
}

/// Relation between an old-class mask `old` and a new-class mask `new`.
/// Equal masks count as containment (`NewSubsetOfOld`); the superset case
/// is strict.
pub fn observe_relation(old: &Mask, new: &Mask) -> Result<RelationKind> {
    if old.height != new.height || old.width != new.width {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            old.height, old.width, new.height, new.width
        )));
    }
    let (a, b) = (old.count(), new.count());
    if a == 0 || b == 0 {
        return Err(Error::EmptyMask);
    }
    let inter = old.intersection_count(new);
    Ok(if inter == b {
        RelationKind::NewSubsetOfOld
    } else if inter == a {
        RelationKind::NewSupersetOfOld
    } else if inter == 0 {
        RelationKind::MutuallyExclusive
    } else {
        RelationKind::Unrelated
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Ellipse,
    Rectangle,
    DotCluster,
    Crescent,
}

/// Placement rule for one class. Sizes are fractions of the canvas side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub class: ClassInfo,
    pub shape: ShapeFamily,
    pub parent: Option<usize>,
    pub exclusion_group: Option<u32>,
    /// Class whose boundary this shape is centred on (forced partial overlap).
    #[serde(default)]
    pub straddles: Option<usize>,
    /// `[min, max]` radius / half-extent along x.
    pub size_x: [f64; 2],
    /// `[min, max]` radius / half-extent along y.
    pub size_y: [f64; 2],
    /// Number of dots for [`ShapeFamily::DotCluster`].
    #[serde(default)]
    pub dots: usize,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub canvas_size: usize,
    pub layout: Vec<LayoutEntry>,
    pub texture_seed: u64,
    pub samples_per_class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomScene {
    pub height: usize,
    pub width: usize,
    /// `3 x H x W`, values in `[0, 1]`.
    pub image: Vec<f32>,
    pub masks: BTreeMap<usize, Mask>,
    pub scene_seed: u64,
}

const PLACEMENT_TRIES: usize = 400;
const SCENE_TRIES: usize = 40;
const NOISE_STD: f64 = 0.05;

impl PhantomSpec {
    /// The 12-class kidney-like layout used by the default benchmark.
    /// Classes 0-5 are introduced at step 1 and 6-11 at step 2.
    pub fn default_kidney(canvas_size: usize) -> Self {
        use ClassGroup::*;
        use Scale::*;
        use ShapeFamily::*;
        let e = |id: usize,
                 name: &str,
                 group: ClassGroup,
                 scale: Scale,
                 shape: ShapeFamily,
                 parent: Option<usize>,
                 excl: Option<u32>,
                 size_x: [f64; 2],
                 size_y: [f64; 2],
                 color: [f64; 3]| LayoutEntry {
            class: ClassInfo {
                id,
                name: name.to_string(),
                group,
                scale,
                step_introduced: if id < 6 { 1 } else { 2 },
            },
            shape,
            parent,
            exclusion_group: excl,
            straddles: None,
            size_x,
            size_y,
            dots: if shape == DotCluster { 3 } else { 0 },
            color,
        };
        let dot = [0.02, 0.03];
        let mut layout = vec![
            e(0, "cortex", Region, X5, Rectangle, None, Some(0), [0.26, 0.32], [0.40, 0.46], [0.85, 0.55, 0.60]),
            e(1, "medulla", Region, X5, Rectangle, None, Some(0), [0.10, 0.14], [0.30, 0.42], [0.55, 0.35, 0.65]),
            e(2, "capsule", Unit, X10, Ellipse, Some(0), Some(1), [0.14, 0.17], [0.14, 0.17], [0.95, 0.90, 0.80]),
            e(3, "proximal_tubule", Unit, X10, Ellipse, Some(0), Some(1), [0.06, 0.09], [0.06, 0.09], [0.80, 0.30, 0.30]),
            e(4, "distal_tubule", Unit, X10, Ellipse, Some(1), Some(2), [0.06, 0.08], [0.06, 0.08], [0.35, 0.55, 0.85]),
            e(5, "podocyte", Cell, X40, DotCluster, Some(6), Some(3), dot, dot, [0.20, 0.20, 0.60]),
            e(6, "glomerular_tuft", Unit, X20, Ellipse, Some(2), Some(4), [0.08, 0.10], [0.08, 0.10], [0.90, 0.70, 0.90]),
            e(7, "artery", Unit, X10, Ellipse, Some(0), Some(1), [0.07, 0.09], [0.07, 0.09], [0.95, 0.45, 0.05]),
            e(8, "mesangial", Cell, X40, DotCluster, Some(6), Some(3), dot, dot, [0.15, 0.50, 0.25]),
            e(9, "endothelial", Cell, X40, DotCluster, Some(7), Some(5), dot, dot, [0.95, 0.85, 0.30]),
            e(10, "crescent", Lesion, X20, Crescent, Some(0), Some(1), [0.06, 0.08], [0.06, 0.08], [0.50, 0.75, 0.75]),
            e(11, "fibrosis", Lesion, X5, Crescent, Some(1), Some(2), [0.05, 0.07], [0.05, 0.07], [0.40, 0.80, 0.40]),
        ];
        layout[10].straddles = Some(2);
        Self { canvas_size, layout, texture_seed: 17, samples_per_class: 1 }
    }

    pub fn class(&self, id: usize) -> Result<&ClassInfo> {
        self.layout.get(id).map(|e| &e.class).ok_or(Error::UnknownClass(id))
    }

    fn ancestors_or_self(&self, id: usize) -> Vec<usize> {
        let mut out = vec![id];
        let mut cur = id;
        while let Some(p) = self.layout[cur].parent {
            out.push(p);
            cur = p;
            if out.len() > self.layout.len() {
                break;
            }
        }
        out
    }

    fn is_ancestor(&self, anc: usize, of: usize) -> bool {
        anc != of && self.ancestors_or_self(of).contains(&anc)
    }

    /// The relation the generator guarantees between `old` and `new`.
    pub fn declared_relation(&self, old: usize, new: usize) -> Result<RelationKind> {
        self.class(old)?;
        self.class(new)?;
        if old == new {
            return Err(Error::DuplicateClass(old));
        }
        if self.is_ancestor(old, new) {
            return Ok(RelationKind::NewSubsetOfOld);
        }
        if self.is_ancestor(new, old) {
            return Ok(RelationKind::NewSupersetOfOld);
        }
        if self.layout[old].straddles == Some(new) || self.layout[new].straddles == Some(old) {
            return Ok(RelationKind::Unrelated);
        }
        let (ao, an) = (self.ancestors_or_self(old), self.ancestors_or_self(new));
        for &x in &ao {
            for &y in &an {
                if x != y {
                    if let (Some(gx), Some(gy)) = (self.layout[x].exclusion_group, self.layout[y].exclusion_group) {
                        if gx == gy {
                            return Ok(RelationKind::MutuallyExclusive);
                        }
                    }
                }
            }
        }
        Err(Error::Layout(format!("relation between classes {old} and {new} is not determined by the layout")))
    }

    /// Declared relations for every `(old, new)` pair.
    pub fn assignments(&self, old: &[usize], new: &[usize]) -> Result<Assignments> {
        let mut out = Assignments::new();
        for &o in old {
            for &n in new {
                out.insert((o, n), self.declared_relation(o, n)?);
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.canvas_size < 8 {
            return Err(Error::Layout(format!("canvas {} is too small", self.canvas_size)));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Layout("samples_per_class must be at least 1".into()));
        }
        for (i, e) in self.layout.iter().enumerate() {
            if e.class.id != i {
                return Err(Error::Layout(format!("layout entry {i} carries class id {}", e.class.id)));
            }
            for r in [e.parent, e.straddles].into_iter().flatten() {
                if r >= self.layout.len() || r == i {
                    return Err(Error::Layout(format!("class {i} references invalid class {r}")));
                }
            }
            if self.ancestors_or_self(i).len() > self.layout.len() {
                return Err(Error::Layout(format!("nesting cycle through class {i}")));
            }
            if e.shape == ShapeFamily::DotCluster && e.dots == 0 {
                return Err(Error::Layout(format!("dot cluster {i} has no dots")));
            }
            if !(e.size_x[0] > 0.0 && e.size_x[0] <= e.size_x[1] && e.size_y[0] > 0.0 && e.size_y[0] <= e.size_y[1]) {
                return Err(Error::Layout(format!("class {i} has an invalid size range")));
            }
        }
        for a in 0..self.layout.len() {
            for b in 0..self.layout.len() {
                if a == b {
                    continue;
                }
                if let (Some(ga), Some(gb)) = (self.layout[a].exclusion_group, self.layout[b].exclusion_group) {
                    if ga == gb && (self.is_ancestor(a, b) || self.is_ancestor(b, a)) {
                        return Err(Error::Layout(format!(
                            "classes {a} and {b} share exclusion group {ga} but are nested"
                        )));
                    }
                }
                self.declared_relation(a, b)?;
            }
        }
        self.placement_order().map(|_| ())
    }

    /// Parents and straddle anchors are placed before their dependents.
    fn placement_order(&self) -> Result<Vec<usize>> {
        let n = self.layout.len();
        let mut placed = vec![false; n];
        let mut order = Vec::with_capacity(n);
        while order.len() < n {
            let next = (0..n).find(|&i| {
                !placed[i]
                    && [self.layout[i].parent, self.layout[i].straddles].into_iter().flatten().all(|d| placed[d])
            });
            match next {
                Some(i) => {
                    placed[i] = true;
                    order.push(i);
                }
                None => return Err(Error::Layout("cyclic parent/straddle dependencies".into())),
            }
        }
        Ok(order)
    }

    /// Deterministic scene for `(self, scene_seed)`.
    pub fn generate_scene(&self, scene_seed: u64) -> Result<PhantomScene> {
        self.validate()?;
        let order = self.placement_order()?;
        let base = self.texture_seed ^ scene_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        for attempt in 0..SCENE_TRIES as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(base.wrapping_add(attempt.wrapping_mul(0xD1B5_4A32_D192_ED03)));
            if let Some(masks) = self.try_place(&order, &mut rng) {
                let image = self.render(&order, &masks, &mut rng);
                let n = self.canvas_size;
                return Ok(PhantomScene { height: n, width: n, image, masks, scene_seed });
            }
        }
        Err(Error::Layout(format!("no valid placement for scene seed {scene_seed} after {SCENE_TRIES} attempts")))
    }

    fn try_place(&self, order: &[usize], rng: &mut ChaCha8Rng) -> Option<BTreeMap<usize, Mask>> {
        let n = self.canvas_size;
        let mut masks: BTreeMap<usize, Mask> = BTreeMap::new();
        for &c in order {
            let entry = &self.layout[c];
            let region = match entry.parent {
                Some(p) => masks[&p].clone(),
                None => Mask::from_fn(n, n, |_, _| true),
            };
            let mut accepted = None;
            for _ in 0..PLACEMENT_TRIES {
                let Some(candidate) = self.sample_shape(c, &region, &masks, rng) else { continue };
                if candidate.count() == 0 {
                    continue;
                }
                if self.consistent(c, &candidate, &masks) {
                    accepted = Some(candidate);
                    break;
                }
            }
            masks.insert(c, accepted?);
        }
        Some(masks)
    }

    fn consistent(&self, c: usize, candidate: &Mask, placed: &BTreeMap<usize, Mask>) -> bool {
        placed.iter().all(|(&d, m)| {
            let (Ok(want_fwd), Ok(want_back)) = (self.declared_relation(d, c), self.declared_relation(c, d)) else {
                return false;
            };
            observe_relation(m, candidate).ok() == Some(want_fwd) && observe_relation(candidate, m).ok() == Some(want_back)
        })
    }

    fn sample_shape(&self, c: usize, region: &Mask, placed: &BTreeMap<usize, Mask>, rng: &mut ChaCha8Rng) -> Option<Mask> {
        let entry = &self.layout[c];
        let n = self.canvas_size as f64;
        let (y0, x0, y1, x1) = region.bbox()?;
        let rx = rng.random_range(entry.size_x[0]..=entry.size_x[1]) * n;
        let ry = rng.random_range(entry.size_y[0]..=entry.size_y[1]) * n;
        let center = |rng: &mut ChaCha8Rng| -> (f64, f64) {
            if let Some(anchor) = entry.straddles {
                let edge = placed[&anchor].boundary();
                let (y, x) = edge[rng.random_range(0..edge.len())];
                (y as f64, x as f64)
            } else {
                // keep the whole shape inside the region's box when it fits
                let span = |lo: usize, hi: usize, r: f64| {
                    let (lo, hi) = (lo as f64 + r, hi as f64 - r);
                    if lo <= hi { (lo, hi) } else { let m = 0.5 * (lo + hi); (m, m) }
                };
                let ((ya, yb), (xa, xb)) = (span(y0, y1, ry), span(x0, x1, rx));
                (rng.random_range(ya..=yb), rng.random_range(xa..=xb))
            }
        };
        let size = self.canvas_size;
        Some(match entry.shape {
            ShapeFamily::Ellipse => {
                let (cy, cx) = center(rng);
                Mask::from_fn(size, size, |y, x| {
                    let (dy, dx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                    dy * dy + dx * dx <= 1.0
                })
            }
            ShapeFamily::Rectangle => {
                let (cy, cx) = center(rng);
                Mask::from_fn(size, size, |y, x| (y as f64 - cy).abs() <= ry && (x as f64 - cx).abs() <= rx)
            }
            ShapeFamily::Crescent => {
                let (cy, cx) = center(rng);
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let (oy, ox) = (cy + 0.5 * ry * theta.sin(), cx + 0.5 * rx * theta.cos());
                Mask::from_fn(size, size, |y, x| {
                    let (yf, xf) = (y as f64, x as f64);
                    let outer = ((yf - cy) / ry).powi(2) + ((xf - cx) / rx).powi(2) <= 1.0;
                    let inner = ((yf - oy) / (0.8 * ry)).powi(2) + ((xf - ox) / (0.8 * rx)).powi(2) <= 1.0;
                    outer && !inner
                })
            }
            ShapeFamily::DotCluster => {
                // Place dots one by one: each must sit inside the parent and
                // clear of every class this one must not touch.
                let avoid: Vec<&Mask> = placed
                    .iter()
                    .filter(|(&d, _)| self.declared_relation(d, c).ok() == Some(RelationKind::MutuallyExclusive))
                    .map(|(_, m)| m)
                    .collect();
                let mut cluster = Mask::zeros(size, size);
                for _ in 0..entry.dots {
                    let mut ok = false;
                    for _ in 0..PLACEMENT_TRIES {
                        let (cy, cx) = center(rng);
                        let dot = Mask::from_fn(size, size, |y, x| {
                            let (dy, dx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                            dy * dy + dx * dx <= 1.0
                        });
                        let k = dot.count();
                        if k == 0 || dot.intersection_count(region) != k {
                            continue;
                        }
                        if avoid.iter().any(|m| m.intersection_count(&dot) > 0) {
                            continue;
                        }
                        cluster.union_with(&dot);
                        ok = true;
                        break;
                    }
                    if !ok {
                        return None;
                    }
                }
                cluster
            }
        })
    }

    fn render(&self, order: &[usize], masks: &BTreeMap<usize, Mask>, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let n = self.canvas_size;
        let plane = n * n;
        let mut img = vec![0.05f64; 3 * plane];
        let mut texture = ChaCha8Rng::seed_from_u64(self.texture_seed);
        let stripes: Vec<(f64, f64)> = (0..self.layout.len())
            .map(|_| (texture.random_range(0.3..1.2), texture.random_range(0.0..std::f64::consts::PI)))
            .collect();
        for &c in order {
            let (freq, angle) = stripes[c];
            let color = self.layout[c].color;
            let m = &masks[&c];
            for y in 0..n {
                for x in 0..n {
                    if !m.get(y, x) {
                        continue;
                    }
                    let phase = freq * (x as f64 * angle.cos() + y as f64 * angle.sin());
                    let stripe = 0.04 * phase.sin();
                    for ch in 0..3 {
                        img[ch * plane + y * n + x] = color[ch] + stripe;
                    }
                }
            }
        }
        let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
        img.iter().map(|&v| (v + noise.sample(rng)).clamp(0.0, 1.0) as f32).collect()
    }
}
