//! Two-phase continual training: supervised training on the first step,
//! then one incremental stage per later step, distilling from a frozen
//! snapshot of the previous model.

use std::collections::BTreeMap;

use irs_autodiff::{Adam, ParamId, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentConfig};
use crate::dataset::{mix_seed, LabeledSample};
use crate::error::{Error, Result};
use crate::eval::{dice_per_class, mean};
use crate::losses::{
    all_prompts, anatomy_loss_per_sample, foreground, prompted_forward, report, semi_loss, supervised_loss, total_loss, LossReport,
    SemiTerms, SemiToggles, SubsetMode,
};
use crate::model::{Model, ModelConfig};
use crate::nn::Ctx;
use crate::relation::{ClassInfo, PropositionMatrix, RelationKind};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FreezeMode {
    #[default]
    None,
    /// Only the token bank and the controller are trained.
    Fully,
    /// Expert encoders are frozen.
    Encoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    /// Multiplies the learning rate after every epoch.
    pub lr_decay: f64,
    pub phase1_epochs: usize,
    /// Passes over each incremental step's data; `None` means one per new
    /// class.
    pub epochs_per_step: Option<usize>,
    pub batch_size: usize,
    /// Training crop size; `None` uses the model canvas.
    pub crop_size: Option<usize>,
    pub augment: AugmentConfig,
    pub lambda_anatomy: f64,
    pub lambda_semi: f64,
    pub subset_mode: SubsetMode,
    pub semi: SemiToggles,
    pub freeze: FreezeMode,
    /// Keep the phase-1 epoch with the best mean validation Dice.
    pub select_best: bool,
    /// Old classes prompted per image for the anatomy and distillation
    /// terms, drawn at random each batch; `None` prompts all of them.
    pub old_prompts_per_image: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lr: 1e-3,
            lr_decay: 0.99,
            phase1_epochs: 30,
            epochs_per_step: None,
            batch_size: 8,
            crop_size: None,
            augment: AugmentConfig::default(),
            lambda_anatomy: 1.0,
            lambda_semi: 1.0,
            subset_mode: SubsetMode::Literal,
            semi: SemiToggles::default(),
            freeze: FreezeMode::None,
            select_best: true,
            old_prompts_per_image: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Data(format!("invalid training config: {m}")));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {}", self.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr decay {} outside (0, 1]", self.lr_decay));
        }
        if self.old_prompts_per_image == Some(0) {
            return bad("zero old-class prompts per image".into());
        }
        if self.batch_size == 0 {
            return bad("batch size 0".into());
        }
        if !self.lambda_anatomy.is_finite() || !self.lambda_semi.is_finite() {
            return bad("non-finite loss weight".into());
        }
        if self.crop_size.is_some_and(|c| c != self.model.backbone.canvas) {
            return bad("crop size must equal the model canvas".into());
        }
        self.model.backbone.validate()
    }

    fn canvas(&self) -> usize {
        self.crop_size.unwrap_or(self.model.backbone.canvas)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Supervised,
    Increment,
    Joint,
}

/// One line of `losses.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub phase: Phase,
    pub step: u32,
    pub epoch: usize,
    pub batch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub epochs: usize,
    pub batches: usize,
    /// Mean validation Dice after each epoch (empty when not evaluated).
    pub val_dice: Vec<f64>,
    /// Epoch (1-based) whose weights were kept; 0 = initial weights.
    pub selected_epoch: usize,
}

/// Parameters that `mode` keeps fixed.
pub fn frozen_params(model: &Model, mode: FreezeMode) -> Vec<ParamId> {
    match mode {
        FreezeMode::None => Vec::new(),
        FreezeMode::Fully => {
            let keep = model.params_with_prefix(&["tokens.", "controller."]);
            model.store.ids().filter(|id| !keep.contains(id)).collect()
        }
        FreezeMode::Encoder => model.store.ids().filter(|&id| model.store.name(id).contains(".enc.")).collect(),
    }
}

/// Images `[B, 3, H, W]`, labels `[B, H, W]`, class and scale ids.
pub struct Batch {
    pub images: Tensor,
    pub labels: Tensor,
    pub class_ids: Vec<usize>,
    pub scale_ids: Vec<usize>,
}

impl Batch {
    pub fn from_samples(samples: &[LabeledSample]) -> Self {
        let (h, w) = (samples[0].height, samples[0].width);
        let b = samples.len();
        let mut images = Vec::with_capacity(b * 3 * h * w);
        let mut labels = Vec::with_capacity(b * h * w);
        for s in samples {
            images.extend(s.image.iter().map(|&v| v as f64));
            labels.extend(s.label.iter().map(|&v| v as f64));
        }
        Self {
            images: Tensor::new(&[b, 3, h, w], images),
            labels: Tensor::new(&[b, h, w], labels),
            class_ids: samples.iter().map(|s| s.class_id).collect(),
            scale_ids: samples.iter().map(|s| s.scale_id).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }
}

/// Mean over classes of the per-class mean Dice on `samples`.
pub fn mean_class_dice(model: &Model, samples: &[LabeledSample]) -> Result<f64> {
    let per = dice_per_class(model, samples)?;
    Ok(mean(&per.values().map(|v| mean(v)).collect::<Vec<_>>()))
}

fn check_finite(model: &Model) -> Result<()> {
    if model.store.entries().iter().all(|e| e.value.data().iter().all(|v| v.is_finite())) {
        Ok(())
    } else {
        Err(Error::NonFinite("model parameters"))
    }
}

/// Shared epoch/batch loop state.
struct Loop<'a> {
    cfg: &'a TrainConfig,
    phase: Phase,
    step: u32,
    rng: ChaCha8Rng,
    adam: Adam,
    frozen: Vec<ParamId>,
}

impl Loop<'_> {
    fn epoch_batches(&mut self, train: &[LabeledSample]) -> Vec<Vec<LabeledSample>> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let canvas = self.cfg.canvas();
        order
            .chunks(self.cfg.batch_size)
            .map(|idx| idx.iter().map(|&i| augment(&train[i], &self.cfg.augment, canvas, &mut self.rng)).collect())
            .collect()
    }

    fn run_batch<F>(&mut self, model: &mut Model, samples: &[LabeledSample], epoch: usize, index: usize, loss_fn: &mut F) -> Result<LogRecord>
    where
        F: FnMut(&mut Ctx, &Model, &Batch) -> Result<(Var, LossReport)>,
    {
        let batch = Batch::from_samples(samples);
        let seed = self.rng.next_u64();
        let (grads, bn, losses) = {
            let mut ctx = Ctx::new(&model.store, true, seed);
            ctx.g.freeze(self.frozen.iter().copied());
            let (total, losses) = loss_fn(&mut ctx, model, &batch)?;
            if !losses.total.is_finite() {
                return Err(Error::NonFinite("total loss"));
            }
            let grads = ctx.g.backward(total);
            (grads, std::mem::take(&mut ctx.bn_updates), losses)
        };
        self.adam.step(&mut model.store, &grads);
        for (id, value) in bn {
            if !self.frozen.contains(&id) {
                model.store.set(id, value);
            }
        }
        Ok(LogRecord { phase: self.phase, step: self.step, epoch, batch: index, lr: self.adam.lr, losses })
    }
}

fn supervised_batch(ctx: &mut Ctx, model: &Model, batch: &Batch) -> Result<(Var, LossReport)> {
    let x = ctx.g.constant(batch.images.clone());
    let y = ctx.g.constant(batch.labels.clone());
    let out = model.forward(ctx, x, &batch.class_ids, &batch.scale_ids)?;
    let sup = supervised_loss(&mut ctx.g, out.logits, y)?;
    let zero = ctx.g.constant(Tensor::scalar(0.0));
    let total = total_loss(&mut ctx.g, sup, zero, zero, 0.0, 0.0)?;
    let rep = report(&ctx.g, sup, zero, &SemiTerms::default(), total, 0.0, 0.0);
    Ok((total, rep))
}

fn check_samples(samples: &[LabeledSample], allowed: &[usize], canvas: usize, what: &str) -> Result<()> {
    for s in samples {
        if !allowed.contains(&s.class_id) {
            return Err(Error::Data(format!("{what} sample labels class {} outside {allowed:?}", s.class_id)));
        }
        if s.image.len() != 3 * s.height * s.width || s.label.len() != s.height * s.width {
            return Err(Error::Data(format!("{what} sample has inconsistent buffer sizes")));
        }
        if s.height > canvas * 4 || s.width > canvas * 4 {
            return Err(Error::Data(format!("{what} sample of {}x{} is far larger than the canvas", s.height, s.width)));
        }
    }
    Ok(())
}

/// Supervised training of `model` on `train`, keeping the epoch with the
/// best mean validation Dice when `cfg.select_best` is set.
pub fn train_supervised(
    cfg: &TrainConfig,
    model: &mut Model,
    train: &[LabeledSample],
    val: &[LabeledSample],
    epochs: usize,
    phase: Phase,
    log: &mut Vec<LogRecord>,
) -> Result<StageSummary> {
    cfg.validate()?;
    let step = model.step.max(1);
    let mut lp = Loop {
        cfg,
        phase,
        step,
        rng: ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0x5059, step as u64])),
        adam: Adam::new(cfg.lr),
        frozen: Vec::new(),
    };
    let mut summary = StageSummary { epochs, ..Default::default() };
    let select = cfg.select_best && !val.is_empty() && epochs > 0;
    let mut best = if select { Some((mean_class_dice(model, val)?, model.store.clone())) } else { None };
    for epoch in 0..epochs {
        for (i, b) in lp.epoch_batches(train).iter().enumerate() {
            log.push(lp.run_batch(model, b, epoch, i, &mut supervised_batch)?);
            summary.batches += 1;
        }
        lp.adam.lr *= cfg.lr_decay;
        check_finite(model)?;
        if let Some((best_dice, best_store)) = best.as_mut() {
            let d = mean_class_dice(model, val)?;
            summary.val_dice.push(d);
            if d > *best_dice {
                *best_dice = d;
                *best_store = model.store.clone();
                summary.selected_epoch = epoch + 1;
            }
        }
    }
    match best {
        Some((_, store)) => model.store = store,
        None => summary.selected_epoch = epochs,
    }
    Ok(summary)
}

/// Phase one: a fresh model trained with supervision on the first step.
pub fn train_phase1(cfg: &TrainConfig, classes: &[ClassInfo], train: &[LabeledSample], val: &[LabeledSample], log: &mut Vec<LogRecord>) -> Result<(Model, StageSummary)> {
    if let Some(c) = classes.iter().find(|c| c.step_introduced != 1) {
        return Err(Error::Data(format!("class {} belongs to step {}, not step 1", c.name, c.step_introduced)));
    }
    let ids: Vec<usize> = classes.iter().map(|c| c.id).collect();
    check_samples(train, &ids, cfg.canvas(), "phase-1 training")?;
    check_samples(val, &ids, cfg.canvas(), "phase-1 validation")?;
    let mut model = Model::new(ModelConfig { init_seed: cfg.seed, ..cfg.model.clone() })?;
    model.register_classes(classes)?;
    model.step = 1;
    let summary = train_supervised(cfg, &mut model, train, val, cfg.phase1_epochs, Phase::Supervised, log)?;
    Ok((model, summary))
}

/// Joint upper bound: one supervised run over every class at once.
pub fn train_joint(cfg: &TrainConfig, classes: &[ClassInfo], train: &[LabeledSample], val: &[LabeledSample], log: &mut Vec<LogRecord>) -> Result<(Model, StageSummary)> {
    let ids: Vec<usize> = classes.iter().map(|c| c.id).collect();
    check_samples(train, &ids, cfg.canvas(), "joint training")?;
    check_samples(val, &ids, cfg.canvas(), "joint validation")?;
    let mut model = Model::new(ModelConfig { init_seed: cfg.seed, ..cfg.model.clone() })?;
    model.register_classes(classes)?;
    model.step = classes.iter().map(|c| c.step_introduced).max().unwrap_or(1);
    let summary = train_supervised(cfg, &mut model, train, val, cfg.phase1_epochs, Phase::Joint, log)?;
    Ok((model, summary))
}

/// Anatomy penalty of one batch: for every prompt `(b, i)` whose old class
/// `i` is related to the new class labeled on image `b`, the penalty of the
/// student's old-class prediction against that label. Pair values are
/// summed, scaled by `pair_weight` and averaged over images. `old_fg` is
/// `[P, H, W]`, aligned with `prompts`.
pub fn anatomy_term(
    ctx: &mut Ctx,
    matrix: &PropositionMatrix,
    batch: &Batch,
    prompts: &[(usize, usize)],
    old_fg: Var,
    pair_weight: f64,
    mode: SubsetMode,
) -> Result<Var> {
    let plane = batch.labels.numel() / batch.len().max(1);
    let dims = batch.labels.shape()[1..].to_vec();
    let mut groups: BTreeMap<usize, (RelationKind, Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (row, &(b, i)) in prompts.iter().enumerate() {
        let rel = matrix.lookup(i, batch.class_ids[b])?;
        if rel == RelationKind::Unrelated {
            continue;
        }
        let key = RelationKind::ALL.iter().position(|r| *r == rel).expect("listed");
        let e = groups.entry(key).or_insert_with(|| (rel, Vec::new(), Vec::new()));
        e.1.push(row);
        e.2.push(b);
    }
    let mut acc = ctx.g.constant(Tensor::scalar(0.0));
    for (rel, rows, images) in groups.into_values() {
        let p = ctx.g.index_rows(old_fg, &rows);
        let mut y = Vec::with_capacity(images.len() * plane);
        for &b in &images {
            y.extend_from_slice(&batch.labels.data()[b * plane..(b + 1) * plane]);
        }
        let mut shape = vec![images.len()];
        shape.extend_from_slice(&dims);
        let y = ctx.g.constant(Tensor::new(&shape, y));
        let per = anatomy_loss_per_sample(&mut ctx.g, y, p, rel, mode)?;
        let s = ctx.g.sum(per);
        acc = ctx.g.add(acc, s);
    }
    Ok(ctx.g.scale(acc, pair_weight / batch.len().max(1) as f64))
}

/// Old-class prompts for a batch of `images`: all of `old_ids` per image,
/// or `per_image` of them drawn without replacement. Also returns the
/// weight that turns a mean over prompts into an estimate of the sum over
/// old classes.
pub fn draw_prompts<R: Rng>(images: usize, old_ids: &[usize], per_image: Option<usize>, rng: &mut R) -> (Vec<(usize, usize)>, f64) {
    let m = old_ids.len();
    match per_image {
        Some(r) if r < m => {
            let mut prompts = Vec::with_capacity(images * r);
            for b in 0..images {
                let picked = rand::seq::index::sample(rng, m, r);
                let mut picked: Vec<usize> = picked.into_iter().collect();
                picked.sort_unstable();
                prompts.extend(picked.into_iter().map(|k| (b, old_ids[k])));
            }
            (prompts, m as f64)
        }
        _ => (all_prompts(images, old_ids), m as f64),
    }
}

/// One incremental stage. The student starts from `teacher`, grows its
/// token bank for the matrix's new classes and trains on `train`, which
/// must label only those classes.
pub fn train_increment(
    teacher: &Model,
    cfg: &TrainConfig,
    matrix: &PropositionMatrix,
    train: &[LabeledSample],
    log: &mut Vec<LogRecord>,
) -> Result<(Model, StageSummary)> {
    cfg.validate()?;
    let step = matrix.step();
    if teacher.step + 1 != step {
        return Err(Error::StepMismatch(format!("teacher trained through step {} cannot start step {step}", teacher.step)));
    }
    let old_ids: Vec<usize> = matrix.old_classes().iter().map(|c| c.id).collect();
    for &i in &old_ids {
        teacher.registry.get(i)?;
    }
    let new_ids: Vec<usize> = matrix.new_classes().iter().map(|c| c.id).collect();
    if let Some(s) = train.iter().find(|s| !new_ids.contains(&s.class_id)) {
        return Err(Error::UnknownClass(s.class_id));
    }
    check_samples(train, &new_ids, cfg.canvas(), "incremental training")?;
    let mut student = teacher.clone();
    student.step = step;
    student.register_classes(matrix.new_classes())?;
    let epochs = cfg.epochs_per_step.unwrap_or(new_ids.len());
    let mut lp = Loop {
        cfg,
        phase: Phase::Increment,
        step,
        rng: ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0x1AC, step as u64])),
        adam: Adam::new(cfg.lr),
        frozen: frozen_params(&student, cfg.freeze),
    };
    let use_semi = cfg.lambda_semi != 0.0 && cfg.semi.any() && !old_ids.is_empty();
    let use_anatomy = cfg.lambda_anatomy != 0.0 && !old_ids.is_empty();
    let mut prompt_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0x0D0, step as u64]));
    let mut loss_fn = |ctx: &mut Ctx, student: &Model, batch: &Batch| -> Result<(Var, LossReport)> {
        let x = ctx.g.constant(batch.images.clone());
        let y = ctx.g.constant(batch.labels.clone());
        let out = student.forward(ctx, x, &batch.class_ids, &batch.scale_ids)?;
        let sup = supervised_loss(&mut ctx.g, out.logits, y)?;
        let (prompts, weight) = if use_semi || use_anatomy {
            draw_prompts(batch.len(), &old_ids, cfg.old_prompts_per_image, &mut prompt_rng)
        } else {
            (Vec::new(), 0.0)
        };
        let (terms, old_fwd) = if use_semi {
            let (t, f) = semi_loss(ctx, teacher, student, &batch.images, &prompts, weight, &cfg.semi)?;
            (t, Some(f))
        } else if use_anatomy {
            (SemiTerms::default(), Some(prompted_forward(ctx, student, &batch.images, &prompts)?))
        } else {
            (SemiTerms::default(), None)
        };
        let anatomy = match (use_anatomy, old_fwd) {
            (true, Some(f)) => {
                let fg = foreground(&mut ctx.g, f.logits)?;
                let per_image = prompts.len() as f64 / batch.len() as f64;
                anatomy_term(ctx, matrix, batch, &prompts, fg, weight / per_image, cfg.subset_mode)?
            }
            _ => ctx.g.constant(Tensor::scalar(0.0)),
        };
        let semi = terms.total(&mut ctx.g);
        let total = total_loss(&mut ctx.g, sup, anatomy, semi, cfg.lambda_anatomy, cfg.lambda_semi)?;
        Ok((total, report(&ctx.g, sup, anatomy, &terms, total, cfg.lambda_anatomy, cfg.lambda_semi)))
    };
    let mut summary = StageSummary { epochs, selected_epoch: epochs, ..Default::default() };
    for epoch in 0..epochs {
        for (i, b) in lp.epoch_batches(train).iter().enumerate() {
            log.push(lp.run_batch(&mut student, b, epoch, i, &mut loss_fn)?);
            summary.batches += 1;
        }
        lp.adam.lr *= cfg.lr_decay;
        check_finite(&student)?;
    }
    Ok((student, summary))
}
