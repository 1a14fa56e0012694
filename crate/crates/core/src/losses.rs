//! Training objectives: soft Dice and cross-entropy supervision, the
//! relation-branching anatomy penalty, KL + MSE consistency terms for
//! distillation, and the weighted total.
//!
//! Every function records its computation on a [`Graph`] so gradients flow
//! back to the model. Masks are `[B, H, W]`; logits are `[B, 2, H, W]`.

use irs_autodiff::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Forward, Model};
use crate::nn::Ctx;
use crate::relation::RelationKind;

pub const DICE_EPS: f64 = 1e-6;
/// Teacher foreground probabilities strictly above this become pseudo labels.
pub const PSEUDO_LABEL_THRESHOLD: f64 = 0.5;

/// How the subset branch of the anatomy loss is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubsetMode {
    /// `-Dice(Y, Y ∪ P)`.
    #[default]
    Literal,
    /// `1 - Σ(Y·P) / ΣY`, a soft recall penalty.
    Prose,
}

fn same_shape(g: &Graph, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    Ok(())
}

/// `[B, ...] -> [B]`, summing everything but the leading axis.
fn per_sample_sum(g: &mut Graph, x: Var) -> Var {
    let s = g.shape(x).to_vec();
    let b = s.first().copied().unwrap_or(1);
    let rest = s.iter().skip(1).product();
    let flat = g.reshape(x, &[b, rest]);
    let sums = g.sum_axis(flat, 1);
    g.reshape(sums, &[b])
}

/// Soft Dice similarity `2Σab / (Σa + Σb + ε)` of each sample, `[B]`.
pub fn soft_dice_per_sample(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    same_shape(g, a, b, "soft dice")?;
    if g.shape(a).is_empty() {
        return Err(Error::Shape("soft dice needs a leading batch axis".into()));
    }
    let ab = g.mul(a, b);
    let inter = per_sample_sum(g, ab);
    let sa = per_sample_sum(g, a);
    let sb = per_sample_sum(g, b);
    let denom = g.add(sa, sb);
    let denom = g.add_scalar(denom, DICE_EPS);
    let num = g.scale(inter, 2.0);
    Ok(g.div(num, denom))
}

/// Soft Dice similarity over the whole array, as a scalar.
pub fn soft_dice(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    same_shape(g, a, b, "soft dice")?;
    let n = irs_autodiff::numel(g.shape(a));
    let a = g.reshape(a, &[1, n]);
    let b = g.reshape(b, &[1, n]);
    let d = soft_dice_per_sample(g, a, b)?;
    Ok(g.reshape(d, &[]))
}

fn check_logits(g: &Graph, logits: Var) -> Result<()> {
    let s = g.shape(logits);
    if s.len() != 4 || s[1] != 2 {
        return Err(Error::Shape(format!("logits must be [B, 2, H, W], got {s:?}")));
    }
    Ok(())
}

/// Per-channel log-probabilities `(log p0, log p1)`, each `[B, H, W]`.
fn log_probs(g: &mut Graph, logits: Var) -> Result<(Var, Var)> {
    check_logits(g, logits)?;
    let s = g.shape(logits).to_vec();
    let ls = g.log_softmax(logits, 1);
    let l0 = g.narrow(ls, 1, 0, 1);
    let l1 = g.narrow(ls, 1, 1, 1);
    Ok((g.reshape(l0, &[s[0], s[2], s[3]]), g.reshape(l1, &[s[0], s[2], s[3]])))
}

/// Foreground probability (softmax channel 1), `[B, H, W]`.
pub fn foreground(g: &mut Graph, logits: Var) -> Result<Var> {
    let (_, l1) = log_probs(g, logits)?;
    Ok(g.exp(l1))
}

/// Mean over the batch of `1 - softDice(fg, Y)` plus mean per-pixel
/// two-class cross-entropy.
pub fn supervised_loss(g: &mut Graph, logits: Var, labels: Var) -> Result<Var> {
    let (l0, l1) = log_probs(g, logits)?;
    same_shape(g, l1, labels, "supervised loss labels")?;
    let fg = g.exp(l1);
    let dice = soft_dice_per_sample(g, fg, labels)?;
    let dice = g.mean(dice);
    let dice_loss = g.rsub_scalar(1.0, dice);
    let pos = g.mul(labels, l1);
    let not_y = g.rsub_scalar(1.0, labels);
    let neg = g.mul(not_y, l0);
    let ll = g.add(pos, neg);
    let ce = g.mean(ll);
    Ok(g.sub(dice_loss, ce))
}

fn check_binary(t: &Tensor) -> Result<()> {
    if t.data().iter().all(|&v| v == 0.0 || v == 1.0) {
        Ok(())
    } else {
        Err(Error::InvalidMask)
    }
}

/// Anatomy penalty of old-class prediction `p` against new-class label `y`,
/// per sample (`[B]`).
pub fn anatomy_loss_per_sample(g: &mut Graph, y: Var, p: Var, relation: RelationKind, mode: SubsetMode) -> Result<Var> {
    same_shape(g, y, p, "anatomy loss")?;
    if g.shape(y).is_empty() {
        return Err(Error::Shape("anatomy loss needs a leading batch axis".into()));
    }
    check_binary(g.value(y))?;
    let b = g.shape(y)[0];
    match relation {
        RelationKind::NewSupersetOfOld => {
            let outside = g.rsub_scalar(1.0, y);
            soft_dice_per_sample(g, outside, p)
        }
        RelationKind::NewSubsetOfOld => match mode {
            SubsetMode::Literal => {
                let yp = g.mul(y, p);
                let sum = g.add(y, p);
                let union = g.sub(sum, yp);
                let d = soft_dice_per_sample(g, y, union)?;
                Ok(g.neg(d))
            }
            SubsetMode::Prose => {
                let yp = g.mul(y, p);
                let hit = per_sample_sum(g, yp);
                let total = per_sample_sum(g, y);
                let total = g.add_scalar(total, DICE_EPS);
                let recall = g.div(hit, total);
                Ok(g.rsub_scalar(1.0, recall))
            }
        },
        RelationKind::MutuallyExclusive => soft_dice_per_sample(g, y, p),
        RelationKind::Unrelated => Ok(g.constant(Tensor::zeros(&[b]))),
    }
}

/// Scalar anatomy penalty for one `(Y_j, P_i)` pair of `[H, W]` masks.
pub fn anatomy_loss(g: &mut Graph, y: Var, p: Var, relation: RelationKind, mode: SubsetMode) -> Result<Var> {
    same_shape(g, y, p, "anatomy loss")?;
    let mut s = vec![1];
    s.extend_from_slice(g.shape(y));
    let y = g.reshape(y, &s);
    let p = g.reshape(p, &s);
    let l = anatomy_loss_per_sample(g, y, p, relation, mode)?;
    Ok(g.reshape(l, &[]))
}

/// `KL(softmax(student) ‖ softmax(teacher))` over `axis`, averaged over the
/// remaining positions, plus the mean squared error of the raw values. The
/// teacher receives no gradient.
pub fn consistency_loss(g: &mut Graph, teacher: Var, student: Var, axis: usize) -> Result<Var> {
    same_shape(g, teacher, student, "consistency loss")?;
    let shape = g.shape(student).to_vec();
    if axis >= shape.len() {
        return Err(Error::Shape(format!("axis {axis} out of range for {shape:?}")));
    }
    let t = g.detach(teacher);
    let ls = g.log_softmax(student, axis);
    let lt = g.log_softmax(t, axis);
    let ps = g.exp(ls);
    let diff = g.sub(ls, lt);
    let kl = g.mul(ps, diff);
    let kl = g.sum(kl);
    let positions = irs_autodiff::numel(&shape) / shape[axis];
    let kl = g.scale(kl, 1.0 / positions as f64);
    let d = g.sub(student, t);
    let sq = g.square(d);
    let mse = g.mean(sq);
    Ok(g.add(kl, mse))
}

/// Which distillation terms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SemiToggles {
    pub token: bool,
    pub latent: bool,
    pub decoder: bool,
    pub logits: bool,
    /// Replace the logits term by supervision on thresholded teacher output.
    pub pseudo_labels: bool,
}

impl Default for SemiToggles {
    fn default() -> Self {
        Self { token: true, latent: true, decoder: true, logits: true, pseudo_labels: false }
    }
}

impl SemiToggles {
    pub fn any(&self) -> bool {
        self.token || self.latent || self.decoder || self.logits
    }
}

/// Teacher outputs for a batch, detached from any graph.
#[derive(Clone, Debug)]
pub struct TeacherOutputs {
    pub class_tokens: Tensor,
    pub fused: Tensor,
    pub decoded: Tensor,
    pub logits: Tensor,
}

impl TeacherOutputs {
    pub fn capture(g: &Graph, f: &Forward) -> Self {
        Self {
            class_tokens: g.value(f.class_tokens).clone(),
            fused: g.value(f.fused).clone(),
            decoded: g.value(f.decoded).clone(),
            logits: g.value(f.logits).clone(),
        }
    }
}

/// The four distillation terms; `None` when toggled off.
#[derive(Clone, Copy, Debug, Default)]
pub struct SemiTerms {
    pub token: Option<Var>,
    pub latent: Option<Var>,
    pub decoder: Option<Var>,
    pub logits: Option<Var>,
}

impl SemiTerms {
    pub fn parts(&self) -> [Option<Var>; 4] {
        [self.token, self.latent, self.decoder, self.logits]
    }

    /// Sum of the active terms (a zero scalar when none is active).
    pub fn total(&self, g: &mut Graph) -> Var {
        let mut acc: Option<Var> = None;
        for v in self.parts().into_iter().flatten() {
            acc = Some(match acc {
                Some(a) => g.add(a, v),
                None => v,
            });
        }
        acc.unwrap_or_else(|| g.constant(Tensor::scalar(0.0)))
    }
}

/// Distillation terms for a student forward over a batch of old-class
/// prompts. Each term is the mean consistency over prompts times `weight`;
/// with every old class prompted on every image, `weight` equal to the
/// number of old classes gives the sum over classes averaged over images.
pub fn semi_terms(g: &mut Graph, teacher: &TeacherOutputs, student: &Forward, weight: f64, toggles: &SemiToggles) -> Result<SemiTerms> {
    let term = |g: &mut Graph, on: bool, t: &Tensor, s: Var, axis: usize| -> Result<Option<Var>> {
        if !on {
            return Ok(None);
        }
        let t = g.constant(t.clone());
        let c = consistency_loss(g, t, s, axis)?;
        Ok(Some(g.scale(c, weight)))
    };
    let token = term(g, toggles.token, &teacher.class_tokens, student.class_tokens, 1)?;
    let latent = term(g, toggles.latent, &teacher.fused, student.fused, 2)?;
    let decoder = term(g, toggles.decoder, &teacher.decoded, student.decoded, 1)?;
    let logits = if toggles.logits && toggles.pseudo_labels {
        let pseudo = pseudo_labels(&teacher.logits);
        let y = g.constant(pseudo);
        let l = supervised_loss(g, student.logits, y)?;
        Some(g.scale(l, weight))
    } else {
        term(g, toggles.logits, &teacher.logits, student.logits, 1)?
    };
    Ok(SemiTerms { token, latent, decoder, logits })
}

/// `1` where the teacher's foreground probability is strictly above 0.5.
pub fn pseudo_labels(teacher_logits: &Tensor) -> Tensor {
    let fg = crate::model::foreground(teacher_logits);
    let data = fg.data().iter().map(|&p| if p > PSEUDO_LABEL_THRESHOLD { 1.0 } else { 0.0 }).collect();
    Tensor::new(fg.shape(), data)
}

/// `(image index, class id)` for every image and every class, image major.
pub fn all_prompts(images: usize, class_ids: &[usize]) -> Vec<(usize, usize)> {
    (0..images).flat_map(|b| class_ids.iter().map(move |&c| (b, c))).collect()
}

/// Stacks `images[b]` for every prompt `(b, _)`: `[B, ...]` → `[P, ...]`.
pub fn gather_images(images: &Tensor, prompts: &[(usize, usize)]) -> Tensor {
    let s = images.shape();
    let per = irs_autodiff::numel(&s[1..]);
    let mut data = Vec::with_capacity(per * prompts.len());
    for &(b, _) in prompts {
        data.extend_from_slice(&images.data()[b * per..(b + 1) * per]);
    }
    let mut shape = s.to_vec();
    shape[0] = prompts.len();
    Tensor::new(&shape, data)
}

/// Student forward on `prompts` over `images`, each class prompted with its
/// registered scale.
pub fn prompted_forward(ctx: &mut Ctx, model: &Model, images: &Tensor, prompts: &[(usize, usize)]) -> Result<Forward> {
    let class_ids: Vec<usize> = prompts.iter().map(|p| p.1).collect();
    let scale_ids = class_ids.iter().map(|&c| model.registry.get(c).map(|c| c.scale.index())).collect::<Result<Vec<_>>>()?;
    let x = ctx.g.constant(gather_images(images, prompts));
    model.forward(ctx, x, &class_ids, &scale_ids)
}

/// Student and frozen-teacher forwards on old-class `prompts` over
/// `images`, and the distillation terms between them (see [`semi_terms`]).
/// The student forward is returned so callers can reuse its old-class
/// predictions.
pub fn semi_loss(
    ctx: &mut Ctx,
    teacher: &Model,
    student: &Model,
    images: &Tensor,
    prompts: &[(usize, usize)],
    weight: f64,
    toggles: &SemiToggles,
) -> Result<(SemiTerms, Forward)> {
    if teacher.step >= student.step {
        return Err(Error::StepMismatch(format!(
            "teacher is at step {} but the student is at step {}",
            teacher.step, student.step
        )));
    }
    let teacher_out = {
        let mut tctx = Ctx::inference(&teacher.store);
        let f = prompted_forward(&mut tctx, teacher, images, prompts)?;
        TeacherOutputs::capture(&tctx.g, &f)
    };
    let student_out = prompted_forward(ctx, student, images, prompts)?;
    let terms = semi_terms(&mut ctx.g, &teacher_out, &student_out, weight, toggles)?;
    Ok((terms, student_out))
}

/// Scalar loss components of one batch, with the weights that combined them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub supervised: f64,
    pub anatomy: f64,
    pub semi: f64,
    pub token: f64,
    pub latent: f64,
    pub decoder: f64,
    pub logits: f64,
    pub lambda_anatomy: f64,
    pub lambda_semi: f64,
    pub total: f64,
}

/// `supervised + λa·anatomy + λs·semi`, rejecting non-finite components.
pub fn total_loss(g: &mut Graph, supervised: Var, anatomy: Var, semi: Var, lambda_a: f64, lambda_s: f64) -> Result<Var> {
    for (v, name) in [(supervised, "supervised loss"), (anatomy, "anatomy loss"), (semi, "semi loss")] {
        if !g.value(v).data().iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite(name));
        }
    }
    let a = g.scale(anatomy, lambda_a);
    let s = g.scale(semi, lambda_s);
    let t = g.add(supervised, a);
    Ok(g.add(t, s))
}

/// Reads the recorded components back as plain numbers.
pub fn report(g: &Graph, supervised: Var, anatomy: Var, terms: &SemiTerms, total: Var, lambda_a: f64, lambda_s: f64) -> LossReport {
    let v = |x: Option<Var>| x.map_or(0.0, |x| g.value(x).data()[0]);
    let [token, latent, decoder, logits] = terms.parts().map(v);
    LossReport {
        supervised: v(Some(supervised)),
        anatomy: v(Some(anatomy)),
        semi: token + latent + decoder + logits,
        token,
        latent,
        decoder,
        logits,
        lambda_anatomy: lambda_a,
        lambda_semi: lambda_s,
        total: v(Some(total)),
    }
}
