//! Prompt-driven mixture of experts: three heterogeneous encoder/decoder
//! pairs that share a `[B, L, d]` latent interface (`L = (canvas/8)^2`),
//! attention fusion of their latents, and summed 8-channel decoders.
//!
//! Every encoder receives the class and scale tokens as a `[B, 2, d]`
//! prompt. The attention experts prepend it to their patch sequence; the
//! convolutional expert adds a learned projection of it as a channel bias.

use irs_autodiff::Var;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv, Ctx, FeedForward, Init, Linear, MultiHeadAttention, TransformerBlock};

pub const DECODER_CHANNELS: usize = 8;
pub const MAX_EXPERTS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Multi-head attention with `q = f1, k = f2, v = f3`, residuals and
    /// batch norms.
    Attention,
    /// Element-wise mean of the latents.
    Mean,
}

/// Architecture hyperparameters shared by the experts and the fusion block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub canvas: usize,
    pub d: usize,
    pub heads: usize,
    pub num_experts: usize,
    pub fusion: Fusion,
    /// Re-inject the prompt before every encoder stage instead of only at
    /// the input.
    pub token_reinjection: bool,
    pub dropout: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { canvas: 64, d: 32, heads: 4, num_experts: 3, fusion: Fusion::Attention, token_reinjection: false, dropout: 0.1 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.canvas == 0 || self.canvas % 16 != 0 {
            return Err(Error::Shape(format!("canvas {} must be a positive multiple of 16", self.canvas)));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Shape(format!("width {} not divisible by {} heads", self.d, self.heads)));
        }
        if !(1..=MAX_EXPERTS).contains(&self.num_experts) {
            return Err(Error::Shape(format!(
                "{} experts requested; between 1 and {MAX_EXPERTS} are implemented",
                self.num_experts
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Shape(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn latent_side(&self) -> usize {
        self.canvas / 8
    }

    pub fn latent_len(&self) -> usize {
        self.latent_side() * self.latent_side()
    }
}

/// Encoder output: the latent plus whatever skip features the expert's own
/// decoder consumes.
pub struct Encoded {
    pub latent: Var,
    pub skips: Vec<Var>,
}

/// `[B, d, h, w]` feature map to `[B, h*w, d]` tokens.
fn map_to_tokens(ctx: &mut Ctx, x: Var) -> Var {
    let s = ctx.g.shape(x).to_vec();
    let r = ctx.g.reshape(x, &[s[0], s[1], s[2] * s[3]]);
    ctx.g.permute(r, &[0, 2, 1])
}

fn tokens_to_map(ctx: &mut Ctx, x: Var, side: usize) -> Var {
    let s = ctx.g.shape(x).to_vec();
    let p = ctx.g.permute(x, &[0, 2, 1]);
    ctx.g.reshape(p, &[s[0], s[2], side, side])
}

/// Projects the `[B, 2, d]` prompt to a `[B, c, 1, 1]` channel bias.
fn prompt_bias(ctx: &mut Ctx, proj: &Linear, prompt: Var) -> Var {
    let s = ctx.g.shape(prompt).to_vec();
    let flat = ctx.g.reshape(prompt, &[s[0], s[1] * s[2]]);
    let b = proj.forward(ctx, flat);
    let c = ctx.g.shape(b)[1];
    ctx.g.reshape(b, &[s[0], c, 1, 1])
}

/// Small convolutional U-Net.
#[derive(Clone, Debug)]
pub struct ConvExpert {
    stem: Conv,
    down: [Conv; 3],
    prompt_proj: Vec<Linear>,
    up: [Conv; 3],
}

impl ConvExpert {
    fn new(init: &mut Init, cfg: &BackboneConfig) -> Self {
        let d = cfg.d;
        let widths = [8, 16, d];
        let [c1, c2, c3] = widths;
        let stages = if cfg.token_reinjection { 3 } else { 1 };
        let (stem, down, prompt_proj) = init.scope("enc", |i| {
            let stem = Conv::new(i, "stem", 3, c1, 3, 1, 1);
            let down = [
                Conv::new(i, "down1", c1, c2, 3, 2, 1),
                Conv::new(i, "down2", c2, c3, 3, 2, 1),
                Conv::new(i, "down3", c3, d, 3, 2, 1),
            ];
            let proj = (0..stages)
                .map(|s| Linear::new(i, &format!("prompt{s}"), 2 * d, widths[s]))
                .collect();
            (stem, down, proj)
        });
        let up = init.scope("dec", |i| {
            [
                Conv::new(i, "up1", d, c2, 3, 1, 1),
                Conv::new(i, "up2", c2, c1, 3, 1, 1),
                Conv::new(i, "out", c1, DECODER_CHANNELS, 1, 1, 0),
            ]
        });
        Self { stem, down, prompt_proj, up }
    }

    fn encode(&self, ctx: &mut Ctx, image: Var, prompt: Var) -> Encoded {
        let mut skips = Vec::with_capacity(3);
        let mut x = self.stem.forward(ctx, image);
        for level in 0..3 {
            if let Some(proj) = self.prompt_proj.get(level) {
                let b = prompt_bias(ctx, proj, prompt);
                x = ctx.g.add(x, b);
            }
            x = ctx.g.relu(x);
            skips.push(x);
            x = self.down[level].forward(ctx, x);
        }
        Encoded { latent: map_to_tokens(ctx, x), skips }
    }

    fn decode(&self, ctx: &mut Ctx, fused: Var, skips: &[Var], side: usize) -> Var {
        // skips hold [full, 1/2, 1/4] resolution maps with 8, 16, d channels
        let x = tokens_to_map(ctx, fused, side);
        let x = ctx.g.upsample2x(x);
        let x = ctx.g.add(x, skips[2]);
        let x = self.up[0].forward(ctx, x);
        let x = ctx.g.relu(x);
        let x = ctx.g.upsample2x(x);
        let x = ctx.g.add(x, skips[1]);
        let x = self.up[1].forward(ctx, x);
        let x = ctx.g.relu(x);
        let x = ctx.g.upsample2x(x);
        let x = ctx.g.add(x, skips[0]);
        self.up[2].forward(ctx, x)
    }
}

/// Non-shifted windowed attention over 4x4-pixel patches, followed by 2x2
/// patch merging down to the latent grid.
#[derive(Clone, Debug)]
pub struct WindowExpert {
    patch: Conv,
    pos: irs_autodiff::ParamId,
    block: TransformerBlock,
    merge: Linear,
    up: Conv,
    out: Conv,
}

const WINDOW: usize = 4;

impl WindowExpert {
    fn new(init: &mut Init, cfg: &BackboneConfig) -> Self {
        let d = cfg.d;
        let grid = cfg.canvas / 4;
        let (patch, pos, block, merge) = init.scope("enc", |i| {
            (
                Conv::new(i, "patch", 3, d, 4, 4, 0),
                i.normal("pos", &[grid * grid, d], 0.02),
                TransformerBlock::new(i, "block", d, cfg.heads),
                Linear::new(i, "merge", 4 * d, d),
            )
        });
        let (up, out) = init.scope("dec", |i| {
            (Conv::new(i, "up", d, DECODER_CHANNELS, 3, 1, 1), Conv::new(i, "out", DECODER_CHANNELS, DECODER_CHANNELS, 1, 1, 0))
        });
        Self { patch, pos, block, merge, up, out }
    }

    fn encode(&self, ctx: &mut Ctx, image: Var, prompt: Var) -> Encoded {
        let x = self.patch.forward(ctx, image);
        let s = ctx.g.shape(x).to_vec();
        let (b, d, grid) = (s[0], s[1], s[2]);
        let pos = ctx.g.param(self.pos);
        let tokens = map_to_tokens(ctx, x);
        let tokens = ctx.g.add(tokens, pos);
        let map = tokens_to_map(ctx, tokens, grid);
        // [B, d, gh, gw] -> [B * windows, WINDOW^2, d]
        let nw = grid / WINDOW;
        let g = &mut ctx.g;
        let w = g.reshape(map, &[b, d, nw, WINDOW, nw, WINDOW]);
        let w = g.permute(w, &[0, 2, 4, 3, 5, 1]);
        let w = g.reshape(w, &[b * nw * nw, WINDOW * WINDOW, d]);
        let p = g.reshape(prompt, &[b, 1, 2, d]);
        let p = g.expand(p, &[b, nw * nw, 2, d]);
        let p = g.reshape(p, &[b * nw * nw, 2, d]);
        let seq = g.concat(&[p, w], 1);
        let seq = self.block.forward(ctx, seq);
        let g = &mut ctx.g;
        let w = g.narrow(seq, 1, 2, WINDOW * WINDOW);
        let w = g.reshape(w, &[b, nw, nw, WINDOW, WINDOW, d]);
        let w = g.permute(w, &[0, 5, 1, 3, 2, 4]);
        let skip = g.reshape(w, &[b, d, grid, grid]);
        // 2x2 merge to the latent grid
        let half = grid / 2;
        let m = g.reshape(skip, &[b, d, half, 2, half, 2]);
        let m = g.permute(m, &[0, 2, 4, 3, 5, 1]);
        let m = g.reshape(m, &[b, half * half, 4 * d]);
        let latent = self.merge.forward(ctx, m);
        Encoded { latent, skips: vec![skip] }
    }

    fn decode(&self, ctx: &mut Ctx, fused: Var, skips: &[Var], side: usize) -> Var {
        let x = tokens_to_map(ctx, fused, side);
        let x = ctx.g.upsample2x(x);
        let x = ctx.g.add(x, skips[0]);
        let x = self.up.forward(ctx, x);
        let x = ctx.g.relu(x);
        let x = ctx.g.upsample2x(x);
        let x = ctx.g.upsample2x(x);
        self.out.forward(ctx, x)
    }
}

/// Plain ViT encoder on 8x8 patches with a pixel-shuffle convolutional
/// decoder.
#[derive(Clone, Debug)]
pub struct VitExpert {
    patch: Conv,
    pos: irs_autodiff::ParamId,
    blocks: [TransformerBlock; 2],
    expand: Linear,
    out: Conv,
    reinject: bool,
}

const VIT_PATCH: usize = 8;

impl VitExpert {
    fn new(init: &mut Init, cfg: &BackboneConfig) -> Self {
        let d = cfg.d;
        let (patch, pos, blocks) = init.scope("enc", |i| {
            (
                Conv::new(i, "patch", 3, d, VIT_PATCH, VIT_PATCH, 0),
                i.normal("pos", &[cfg.latent_len(), d], 0.02),
                [TransformerBlock::new(i, "block1", d, cfg.heads), TransformerBlock::new(i, "block2", d, cfg.heads)],
            )
        });
        let (expand, out) = init.scope("dec", |i| {
            (
                Linear::new(i, "expand", d, DECODER_CHANNELS * VIT_PATCH * VIT_PATCH),
                Conv::new(i, "out", DECODER_CHANNELS, DECODER_CHANNELS, 1, 1, 0),
            )
        });
        Self { patch, pos, blocks, expand, out, reinject: cfg.token_reinjection }
    }

    fn encode(&self, ctx: &mut Ctx, image: Var, prompt: Var) -> Encoded {
        let x = self.patch.forward(ctx, image);
        let tokens = map_to_tokens(ctx, x);
        let pos = ctx.g.param(self.pos);
        let tokens = ctx.g.add(tokens, pos);
        let len = ctx.g.shape(tokens)[1];
        let mut seq = ctx.g.concat(&[prompt, tokens], 1);
        for (i, block) in self.blocks.iter().enumerate() {
            if i > 0 && self.reinject {
                let body = ctx.g.narrow(seq, 1, 2, len);
                seq = ctx.g.concat(&[prompt, body], 1);
            }
            seq = block.forward(ctx, seq);
        }
        let latent = ctx.g.narrow(seq, 1, 2, len);
        Encoded { latent, skips: Vec::new() }
    }

    fn decode(&self, ctx: &mut Ctx, fused: Var, side: usize) -> Var {
        let b = ctx.g.shape(fused)[0];
        let x = self.expand.forward(ctx, fused);
        let g = &mut ctx.g;
        let x = g.reshape(x, &[b, side, side, DECODER_CHANNELS, VIT_PATCH, VIT_PATCH]);
        let x = g.permute(x, &[0, 3, 1, 4, 2, 5]);
        let x = g.reshape(x, &[b, DECODER_CHANNELS, side * VIT_PATCH, side * VIT_PATCH]);
        let x = g.relu(x);
        self.out.forward(ctx, x)
    }
}

#[derive(Clone, Debug)]
pub enum Expert {
    Conv(ConvExpert),
    Window(WindowExpert),
    Vit(VitExpert),
}

impl Expert {
    pub fn encode(&self, ctx: &mut Ctx, image: Var, prompt: Var) -> Encoded {
        match self {
            Expert::Conv(e) => e.encode(ctx, image, prompt),
            Expert::Window(e) => e.encode(ctx, image, prompt),
            Expert::Vit(e) => e.encode(ctx, image, prompt),
        }
    }

    pub fn decode(&self, ctx: &mut Ctx, fused: Var, skips: &[Var], side: usize) -> Var {
        match self {
            Expert::Conv(e) => e.decode(ctx, fused, skips, side),
            Expert::Window(e) => e.decode(ctx, fused, skips, side),
            Expert::Vit(e) => e.decode(ctx, fused, side),
        }
    }
}

/// Attention fusion block. The query stream `f1` is also the residual
/// stream, so permuting the inputs changes the output.
#[derive(Clone, Debug)]
pub struct FusionBlock {
    attn: MultiHeadAttention,
    bn1: BatchNorm,
    ff: FeedForward,
    bn2: BatchNorm,
    dropout: f64,
}

impl FusionBlock {
    fn new(init: &mut Init, cfg: &BackboneConfig) -> Self {
        init.scope("fusion", |i| Self {
            attn: MultiHeadAttention::new(i, "attn", cfg.d, cfg.heads),
            bn1: BatchNorm::new(i, "bn1", cfg.d),
            ff: FeedForward::new(i, "ff", cfg.d, 2 * cfg.d),
            bn2: BatchNorm::new(i, "bn2", cfg.d),
            dropout: cfg.dropout,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, f1: Var, f2: Var, f3: Var) -> Var {
        let a = self.attn.forward(ctx, f1, f2, f3);
        let a = ctx.dropout(a, self.dropout);
        let x1 = ctx.g.add(f1, a);
        let x2 = self.bn1.forward(ctx, x1);
        let f = self.ff.forward(ctx, x2);
        let f = ctx.dropout(f, self.dropout);
        let x3 = ctx.g.add(x2, f);
        self.bn2.forward(ctx, x3)
    }
}

/// The experts plus fusion.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub experts: Vec<Expert>,
    pub fusion: Option<FusionBlock>,
}

impl Backbone {
    pub fn new(init: &mut Init, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut experts = Vec::with_capacity(cfg.num_experts);
        for n in 0..cfg.num_experts {
            let name = format!("expert{}", n + 1);
            experts.push(init.scope(&name, |i| match n {
                0 => Expert::Conv(ConvExpert::new(i, cfg)),
                1 => Expert::Window(WindowExpert::new(i, cfg)),
                _ => Expert::Vit(VitExpert::new(i, cfg)),
            }));
        }
        let fusion = (cfg.fusion == Fusion::Attention).then(|| FusionBlock::new(init, cfg));
        Ok(Self { cfg: cfg.clone(), experts, fusion })
    }

    /// Latent of every active expert.
    pub fn encode_all(&self, ctx: &mut Ctx, image: Var, prompt: Var) -> Vec<Encoded> {
        self.experts.iter().map(|e| e.encode(ctx, image, prompt)).collect()
    }

    /// With fewer than three experts the key and value roles fall back to
    /// the last available latent.
    pub fn fuse(&self, ctx: &mut Ctx, latents: &[Var]) -> Result<Var> {
        let first = ctx.g.shape(latents[0]).to_vec();
        if latents.iter().any(|&l| ctx.g.shape(l) != first.as_slice()) {
            return Err(Error::Shape("expert latents differ in shape".into()));
        }
        match &self.fusion {
            Some(block) => {
                let pick = |i: usize| latents[i.min(latents.len() - 1)];
                Ok(block.forward(ctx, pick(0), pick(1), pick(2)))
            }
            None => {
                let mut acc = latents[0];
                for &l in &latents[1..] {
                    acc = ctx.g.add(acc, l);
                }
                Ok(ctx.g.scale(acc, 1.0 / latents.len() as f64))
            }
        }
    }

    /// Sum of every expert decoder applied to the fused latent.
    pub fn decode(&self, ctx: &mut Ctx, fused: Var, encoded: &[Encoded]) -> Var {
        let side = self.cfg.latent_side();
        let mut out: Option<Var> = None;
        for (e, enc) in self.experts.iter().zip(encoded) {
            let y = e.decode(ctx, fused, &enc.skips, side);
            out = Some(match out {
                Some(acc) => ctx.g.add(acc, y),
                None => y,
            });
        }
        out.expect("at least one expert")
    }
}
