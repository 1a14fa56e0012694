//! Dynamic segmentation head: a controller maps the fused feature and the
//! prompt tokens to the 162 weights of three 1x1 convolutions, which are
//! then applied to the decoder features.

use irs_autodiff::{Graph, Var};

use crate::backbone::DECODER_CHANNELS;
use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, Linear};

pub const OUT_CHANNELS: usize = 2;
const C: usize = DECODER_CHANNELS;

/// Lengths of the three layer blocks of ω: 8→8, 8→8, 8→2, each as a
/// row-major `out x in` weight matrix followed by `out` biases.
pub const fn param_layout() -> (usize, usize, usize) {
    (C * C + C, C * C + C, C * OUT_CHANNELS + OUT_CHANNELS)
}

pub const NUM_PARAMS: usize = {
    let (a, b, c) = param_layout();
    a + b + c
};

pub const CONTROLLER_HIDDEN: usize = 128;

/// `ω = φ(GAP(f_MoE) ‖ t_c ‖ t_s)` with one hidden ReLU layer.
#[derive(Clone, Debug)]
pub struct Controller {
    pub hidden: Linear,
    pub out: Linear,
}

impl Controller {
    pub fn new(init: &mut Init, d: usize) -> Self {
        init.scope("controller", |i| Self {
            hidden: Linear::new(i, "hidden", 3 * d, CONTROLLER_HIDDEN),
            out: Linear::new(i, "out", CONTROLLER_HIDDEN, NUM_PARAMS),
        })
    }

    /// `fused: [B, L, d]`, tokens `[B, d]` → ω `[B, 162]`.
    pub fn forward(&self, ctx: &mut Ctx, fused: Var, class_token: Var, scale_token: Var) -> Result<Var> {
        let fs = ctx.g.shape(fused).to_vec();
        if fs.len() != 3 {
            return Err(Error::Shape(format!("fused feature must be [B, L, d], got {fs:?}")));
        }
        let (b, d) = (fs[0], fs[2]);
        for t in [class_token, scale_token] {
            if ctx.g.shape(t) != [b, d] {
                return Err(Error::Shape(format!("token of shape {:?}, expected [{b}, {d}]", ctx.g.shape(t))));
            }
        }
        let pooled = ctx.g.mean_axis(fused, 1);
        let pooled = ctx.g.reshape(pooled, &[b, d]);
        let x = ctx.g.concat(&[pooled, class_token, scale_token], 1);
        let h = self.hidden.forward(ctx, x);
        let h = ctx.g.relu(h);
        Ok(self.out.forward(ctx, h))
    }
}

/// One 1x1 layer: `x: [B, cin, P]`, weights and biases read from ω at
/// `offset`.
fn layer(g: &mut Graph, x: Var, omega: Var, offset: usize, cin: usize, cout: usize) -> Var {
    let b = g.shape(omega)[0];
    let w = g.narrow(omega, 1, offset, cout * cin);
    let w = g.reshape(w, &[b, cout, cin]);
    let bias = g.narrow(omega, 1, offset + cout * cin, cout);
    let bias = g.reshape(bias, &[b, cout, 1]);
    let y = g.matmul(w, x);
    g.add(y, bias)
}

/// `f_d: [B, 8, H, W]`, `omega: [B, 162]` → logits `[B, 2, H, W]`.
pub fn apply_head(g: &mut Graph, f_d: Var, omega: Var) -> Result<Var> {
    let s = g.shape(f_d).to_vec();
    if s.len() != 4 || s[1] != C {
        return Err(Error::Shape(format!("decoder features must be [B, {C}, H, W], got {s:?}")));
    }
    if g.shape(omega) != [s[0], NUM_PARAMS] {
        return Err(Error::Shape(format!("ω must be [{}, {NUM_PARAMS}], got {:?}", s[0], g.shape(omega))));
    }
    let (l1, l2, _) = param_layout();
    let x = g.reshape(f_d, &[s[0], C, s[2] * s[3]]);
    let h = layer(g, x, omega, 0, C, C);
    let h = g.relu(h);
    let h = layer(g, h, omega, l1, C, C);
    let h = g.relu(h);
    let y = layer(g, h, omega, l1 + l2, C, OUT_CHANNELS);
    Ok(g.reshape(y, &[s[0], OUT_CHANNELS, s[2], s[3]]))
}
