use deer_tensor::{Float, Tensor, Var};
use rand::Rng;

use super::ModelConfig;
use crate::error::{DeerError, Result};
use crate::nn::MultiScaleValue;
use crate::params::{init, Ctx, ParamId, ParamStore};

/// One upsampling branch: tconv(x2) → GN → ReLU → tconv(x2) → 1x1 conv.
/// Produces a single-channel logit map.
#[derive(Clone, Debug)]
struct Branch {
    up1_w: ParamId,
    up1_b: ParamId,
    gamma: ParamId,
    beta: ParamId,
    up2_w: ParamId,
    up2_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
}

impl Branch {
    fn new<F: Float, R: Rng>(store: &mut ParamStore<F>, rng: &mut R, name: &str, d: usize, c: [usize; 2]) -> Self {
        Self {
            up1_w: store.add(format!("{name}.up1.w"), init::kaiming(rng, &[d, c[0], 2, 2], d)),
            up1_b: store.add(format!("{name}.up1.b"), Tensor::zeros(&[c[0]])),
            gamma: store.add(format!("{name}.gn.gamma"), Tensor::ones(&[c[0]])),
            beta: store.add(format!("{name}.gn.beta"), Tensor::zeros(&[c[0]])),
            up2_w: store.add(format!("{name}.up2.w"), init::kaiming(rng, &[c[0], c[1], 2, 2], c[0])),
            up2_b: store.add(format!("{name}.up2.b"), Tensor::zeros(&[c[1]])),
            proj_w: store.add(format!("{name}.proj.w"), init::xavier(rng, &[1, c[1], 1, 1], c[1], 1)),
            proj_b: store.add(format!("{name}.proj.b"), Tensor::zeros(&[1])),
        }
    }

    fn forward<F: Float>(&self, ctx: &mut Ctx<F>, x: Var, groups: usize) -> Result<Var> {
        let (w, b) = (ctx.p(self.up1_w), ctx.p(self.up1_b));
        let y = ctx.g.conv_transpose2d(x, w, Some(b), 2, 0)?;
        let (gamma, beta) = (ctx.p(self.gamma), ctx.p(self.beta));
        let y = ctx.g.group_norm(y, groups, gamma, beta, F::from_f64c(1e-5))?;
        let y = ctx.g.relu(y);
        let (w, b) = (ctx.p(self.up2_w), ctx.p(self.up2_b));
        let y = ctx.g.conv_transpose2d(y, w, Some(b), 2, 0)?;
        let (w, b) = (ctx.p(self.proj_w), ctx.p(self.proj_b));
        Ok(ctx.g.conv2d(y, w, Some(b), 1, 0)?)
    }
}

/// Differentiable-binarization head on the finest token level.
#[derive(Clone, Debug)]
pub struct LocationHead {
    prob: Branch,
    thresh: Branch,
    groups: usize,
    k: f64,
}

/// Recorded head outputs, each `[1, H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct ScoreMapVars {
    /// Pre-sigmoid probability logits (used by the BCE loss).
    pub prob_logits: Var,
    pub prob: Var,
    pub thresh: Var,
    pub binary: Var,
}

/// Plain score maps, row-major `h * w`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMaps {
    pub h: usize,
    pub w: usize,
    pub probability: Vec<f64>,
    pub threshold: Vec<f64>,
    pub approx_binary: Vec<f64>,
}

impl ScoreMaps {
    pub fn from_vars<F: Float>(ctx: &Ctx<F>, v: &ScoreMapVars) -> Self {
        let s = ctx.g.shape(v.prob);
        let read = |x: Var| ctx.g.value(x).to_f64_vec();
        Self {
            h: s[1],
            w: s[2],
            probability: read(v.prob),
            threshold: read(v.thresh),
            approx_binary: read(v.binary),
        }
    }
}

impl LocationHead {
    pub fn new<F: Float, R: Rng>(store: &mut ParamStore<F>, rng: &mut R, cfg: &ModelConfig) -> Self {
        let prob = Branch::new(store, rng, "head.prob", cfg.d_model, cfg.head_channels);
        let thresh = Branch::new(store, rng, "head.thresh", cfg.d_model, cfg.head_channels);
        Self {
            prob,
            thresh,
            groups: cfg.gn_groups,
            k: cfg.db_k,
        }
    }

    pub fn forward<F: Float>(&self, ctx: &mut Ctx<F>, tokens: &MultiScaleValue) -> Result<ScoreMapVars> {
        let Some(&(h, w)) = tokens.layout.shapes.first() else {
            return Err(DeerError::Input("location head needs at least one token level".into()));
        };
        let d = ctx.g.shape(tokens.tokens)[1];
        let fine = ctx.g.slice_rows(tokens.tokens, 0, h * w)?;
        let chw = ctx.g.transpose(fine)?;
        let x = ctx.g.reshape(chw, &[d, h, w])?;
        let prob_logits = self.prob.forward(ctx, x, self.groups)?;
        let prob = ctx.g.sigmoid(prob_logits);
        let t = self.thresh.forward(ctx, x, self.groups)?;
        let thresh = ctx.g.sigmoid(t);
        let binary = Self::binarize(ctx, prob, thresh, self.k)?;
        Ok(ScoreMapVars {
            prob_logits,
            prob,
            thresh,
            binary,
        })
    }

    /// `sigmoid(k (P - T))`.
    pub fn binarize<F: Float>(ctx: &mut Ctx<F>, prob: Var, thresh: Var, k: f64) -> Result<Var> {
        let diff = ctx.g.sub(prob, thresh)?;
        let z = ctx.g.scale(diff, F::from_f64c(k));
        Ok(ctx.g.sigmoid(z))
    }

    /// Zeroes the probability branch's final projection and sets its bias to
    /// `bias`, making the probability map constant `sigmoid(bias)`.
    pub fn set_constant_probability<F: Float>(&self, store: &mut ParamStore<F>, bias: f64) {
        store.get_mut(self.prob.proj_w).data_mut().fill(F::zero());
        store.get_mut(self.prob.proj_b).data_mut().fill(F::from_f64c(bias));
    }
}
