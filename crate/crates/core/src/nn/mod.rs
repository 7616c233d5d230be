//! Neural building blocks: dense layers, plain and deformable attention,
//! positional encodings.

mod attention;
mod deform;
mod encoding;

pub use attention::{causal_block_mask, MultiHeadAttention};
pub use attention::HeadKv;
pub use deform::{DeformAttn, DeformTrace, LevelLayout, MultiScaleValue};
pub use encoding::{sinusoidal_point_encoding, POINT_ENCODING_SCALE};

use deer_tensor::{Float, Tensor, Var};
use rand::Rng;

use crate::error::Result;
use crate::params::{init, Ctx, ParamId, ParamStore};

/// `y = x W + b` with `W[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Float, R: Rng>(store: &mut ParamStore<F>, rng: &mut R, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = store.add(format!("{name}.w"), init::xavier(rng, &[in_dim, out_dim], in_dim, out_dim));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_dim]));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward<F: Float>(&self, ctx: &mut Ctx<F>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.p(self.w), ctx.p(self.b));
        let y = ctx.g.matmul(x, w)?;
        Ok(ctx.g.add_row(y, b)?)
    }

    /// Sets weight and bias to zero (used to make a residual branch vanish).
    pub fn zero<F: Float>(&self, store: &mut ParamStore<F>) {
        store.get_mut(self.w).data_mut().fill(F::zero());
        store.get_mut(self.b).data_mut().fill(F::zero());
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Float>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<F: Float>(&self, ctx: &mut Ctx<F>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.p(self.gamma), ctx.p(self.beta));
        Ok(ctx.g.layer_norm(x, g, b, F::from_f64c(1e-5))?)
    }
}

/// Two-layer ReLU feed-forward block.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<F: Float, R: Rng>(store: &mut ParamStore<F>, rng: &mut R, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, hidden),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, dim),
        }
    }

    pub fn forward<F: Float>(&self, ctx: &mut Ctx<F>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(ctx, x)?;
        let h = ctx.g.relu(h);
        self.fc2.forward(ctx, h)
    }
}
