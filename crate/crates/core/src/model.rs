//! Full segmentation model: token bank, experts, fusion, controller and
//! dynamic head, plus the checkpoint container.

use std::path::Path;

use irs_autodiff::{ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::dataset::{mix_seed, read_file, write_file};
use crate::error::{Error, Result};
use crate::head::{apply_head, Controller};
use crate::nn::{Ctx, Init};
use crate::relation::{ClassInfo, ClassRegistry, Scale};

pub const TOKEN_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(flatten)]
    pub backbone: BackboneConfig,
    /// Feed `T_c[i]` to the encoders and controller (zeros otherwise).
    pub class_tokens: bool,
    /// Feed `T_s[m]` to the encoders and controller (zeros otherwise).
    pub scale_tokens: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { backbone: BackboneConfig::default(), class_tokens: true, scale_tokens: true, init_seed: 0 }
    }
}

/// Learnable class tokens `T_c: [k, d]` and scale tokens `T_s: [4, d]`.
#[derive(Clone, Copy, Debug)]
pub struct TokenBank {
    pub class: ParamId,
    pub scale: ParamId,
}

/// Graph handles for every intermediate the losses need.
#[derive(Clone, Debug)]
pub struct Forward {
    pub latents: Vec<Var>,
    /// `[B, L, d]`
    pub fused: Var,
    /// `[B, 8, H, W]`
    pub decoded: Var,
    /// `[B, 162]`
    pub omega: Var,
    /// `[B, 2, H, W]`
    pub logits: Var,
    /// `[B, d]` class-token rows used for this batch.
    pub class_tokens: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub controller: Controller,
    pub tokens: TokenBank,
    /// Last step this model was trained through (0 = untrained).
    pub step: u32,
    pub registry: ClassRegistry,
}

impl Model {
    /// Fresh model with an empty class-token bank.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let d = cfg.backbone.d;
        let (backbone, controller, tokens) = {
            let mut init = Init::new(&mut store, cfg.init_seed);
            let tokens = init.scope("tokens", |i| TokenBank {
                class: i.normal("class", &[0, d], TOKEN_INIT_STD),
                scale: i.normal("scale", &[Scale::COUNT, d], TOKEN_INIT_STD),
            });
            let backbone = Backbone::new(&mut init, &cfg.backbone)?;
            let controller = Controller::new(&mut init, d);
            (backbone, controller, tokens)
        };
        Ok(Self { cfg, store, backbone, controller, tokens, step: 0, registry: ClassRegistry::new() })
    }

    pub fn num_class_tokens(&self) -> usize {
        self.store.get(self.tokens.class).shape()[0]
    }

    /// Appends `new_classes` rows to `T_c`; existing rows are untouched.
    pub fn grow_token_bank(&mut self, new_classes: usize) {
        if new_classes == 0 {
            return;
        }
        let old = self.store.get(self.tokens.class).clone();
        let (k, d) = (old.shape()[0], old.shape()[1]);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.cfg.init_seed, 0x70CE, k as u64]));
        let dist = Normal::new(0.0, TOKEN_INIT_STD).expect("valid std");
        let mut data = old.into_data();
        data.extend((0..new_classes * d).map(|_| dist.sample(&mut rng)));
        self.store.set(self.tokens.class, Tensor::new(&[k + new_classes, d], data));
    }

    /// Registers classes and grows the token bank to match.
    pub fn register_classes(&mut self, classes: &[ClassInfo]) -> Result<()> {
        for c in classes {
            self.registry.register(c.clone())?;
        }
        let missing = self.registry.len().saturating_sub(self.num_class_tokens());
        self.grow_token_bank(missing);
        Ok(())
    }

    fn token_rows(&self, ctx: &mut Ctx, table: ParamId, rows: &[usize], enabled: bool) -> Result<Var> {
        let t = ctx.g.param(table);
        let n = ctx.g.shape(t)[0];
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::UnknownClass(bad));
        }
        let picked = ctx.g.index_rows(t, rows);
        Ok(if enabled {
            picked
        } else {
            ctx.g.scale(picked, 0.0)
        })
    }

    /// Forward pass for `images: [B, 3, H, W]`, one `(class, scale)` prompt
    /// per image. `ctx` must be built over `self.store`.
    pub fn forward(&self, ctx: &mut Ctx, images: Var, class_ids: &[usize], scale_ids: &[usize]) -> Result<Forward> {
        let s = ctx.g.shape(images).to_vec();
        let canvas = self.cfg.backbone.canvas;
        if s.len() != 4 || s[1] != 3 || s[2] != canvas || s[3] != canvas {
            return Err(Error::Shape(format!("images must be [B, 3, {canvas}, {canvas}], got {s:?}")));
        }
        let b = s[0];
        if class_ids.len() != b || scale_ids.len() != b {
            return Err(Error::Shape(format!("{b} images but {} class / {} scale prompts", class_ids.len(), scale_ids.len())));
        }
        if let Some(&bad) = scale_ids.iter().find(|&&m| m >= Scale::COUNT) {
            return Err(Error::Shape(format!("scale id {bad} out of range")));
        }
        let d = self.cfg.backbone.d;
        let class_tokens = self.token_rows(ctx, self.tokens.class, class_ids, self.cfg.class_tokens)?;
        let scale_tokens = self.token_rows(ctx, self.tokens.scale, scale_ids, self.cfg.scale_tokens)?;
        let prompt = ctx.g.concat(&[class_tokens, scale_tokens], 1);
        let prompt = ctx.g.reshape(prompt, &[b, 2, d]);
        let encoded = self.backbone.encode_all(ctx, images, prompt);
        let latents: Vec<Var> = encoded.iter().map(|e| e.latent).collect();
        let fused = self.backbone.fuse(ctx, &latents)?;
        let decoded = self.backbone.decode(ctx, fused, &encoded);
        let omega = self.controller.forward(ctx, fused, class_tokens, scale_tokens)?;
        let logits = apply_head(&mut ctx.g, decoded, omega)?;
        Ok(Forward { latents, fused, decoded, omega, logits, class_tokens })
    }

    /// Foreground probabilities `[B, H, W]` in evaluation mode.
    pub fn predict(&self, images: &Tensor, class_ids: &[usize], scale_ids: &[usize]) -> Result<Tensor> {
        let mut ctx = Ctx::inference(&self.store);
        let x = ctx.g.constant(images.clone());
        let out = self.forward(&mut ctx, x, class_ids, scale_ids)?;
        Ok(foreground(ctx.g.value(out.logits)))
    }

    /// Parameters whose names start with any of `prefixes`.
    pub fn params_with_prefix(&self, prefixes: &[&str]) -> Vec<ParamId> {
        self.store.ids().filter(|&id| prefixes.iter().any(|p| self.store.name(id).starts_with(p))).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::with_capacity(self.store.len());
        let mut offset = 0usize;
        for e in self.store.entries() {
            tensors.push(TensorRecord {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                buffer: e.is_buffer,
                offset,
            });
            offset += e.value.numel();
        }
        let header = CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            step: self.step,
            config: self.cfg.clone(),
            registry: self.registry.classes().to_vec(),
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + offset * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for e in self.store.entries() {
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing magic"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(bad("unsupported version"));
        }
        let data = &bytes[16 + len..];
        let mut model = Model::new(header.config)?;
        model.registry = ClassRegistry::from_classes(header.registry)?;
        model.step = header.step;
        if header.tensors.len() != model.store.len() {
            return Err(bad("tensor count does not match the configured architecture"));
        }
        for rec in header.tensors {
            let id = model.store.find(&rec.name).ok_or_else(|| bad(&format!("unexpected tensor {}", rec.name)))?;
            let n: usize = rec.shape.iter().product();
            if id != model.tokens.class && model.store.get(id).shape() != rec.shape.as_slice() {
                return Err(bad(&format!("tensor {} has shape {:?}", rec.name, rec.shape)));
            }
            if model.store.entry(id).is_buffer != rec.buffer {
                return Err(bad(&format!("tensor {} buffer flag differs", rec.name)));
            }
            let raw = data.get(rec.offset * 8..(rec.offset + n) * 8).ok_or_else(|| bad("truncated tensor data"))?;
            let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            model.store.set(id, Tensor::new(&rec.shape, values));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"IRSCKPT1";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    buffer: bool,
    /// In f64 elements from the start of the data section.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    step: u32,
    config: ModelConfig,
    registry: Vec<ClassInfo>,
    tensors: Vec<TensorRecord>,
}

/// Softmax channel 1 of `[B, 2, H, W]` logits → `[B, H, W]`.
pub fn foreground(logits: &Tensor) -> Tensor {
    let s = logits.shape();
    let (b, plane) = (s[0], s[2] * s[3]);
    let d = logits.data();
    let mut out = Vec::with_capacity(b * plane);
    for i in 0..b {
        for p in 0..plane {
            let (l0, l1) = (d[i * 2 * plane + p], d[i * 2 * plane + plane + p]);
            out.push(irs_autodiff::sigmoid(l1 - l0));
        }
    }
    Tensor::new(&[b, s[2], s[3]], out)
}
