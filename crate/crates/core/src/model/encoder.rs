use deer_tensor::{Float, Tensor, Var};
use rand::Rng;

use super::ModelConfig;
use crate::error::{DeerError, Result};
use crate::nn::{DeformAttn, FeedForward, LayerNorm, LevelLayout, MultiScaleValue};
use crate::params::{init, Ctx, ParamId, ParamStore};

/// Per-level 1x1 projection to `d_model` plus group norm, flattened
/// row-major and concatenated from the finest level to the coarsest.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    levels: Vec<LevelProj>,
    groups: usize,
}

#[derive(Clone, Debug)]
struct LevelProj {
    w: ParamId,
    b: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

impl Tokenizer {
    pub fn new<F: Float, R: Rng>(store: &mut ParamStore<F>, rng: &mut R, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let levels = cfg
            .backbone_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let name = format!("tokenizer.l{}", i + 2);
                LevelProj {
                    w: store.add(format!("{name}.w"), init::xavier(rng, &[d, c, 1, 1], c, d)),
                    b: store.add(format!("{name}.b"), Tensor::zeros(&[d])),
                    gamma: store.add(format!("{name}.gn.gamma"), Tensor::ones(&[d])),
                    beta: store.add(format!("{name}.gn.beta"), Tensor::zeros(&[d])),
                }
            })
            .collect();
        Self { levels, groups: cfg.gn_groups }
    }

    pub fn forward<F: Float>(&self, ctx: &mut Ctx<F>, feats: &[Var]) -> Result<MultiScaleValue> {
        if feats.len() != self.levels.len() {
            return Err(DeerError::Input(format!("{} feature maps for {} levels", feats.len(), self.levels.len())));
        }
        let mut shapes = Vec::new();
        let mut parts = Vec::new();
        for (f, lp) in feats.iter().zip(&self.levels) {
            let (w, b) = (ctx.p(lp.w), ctx.p(lp.b));
            let y = ctx.g.conv2d(*f, w, Some(b), 1, 0)?;
            let (gamma, beta) = (ctx.p(lp.gamma), ctx.p(lp.beta));
            let y = ctx.g.group_norm(y, self.groups, gamma, beta, F::from_f64c(1e-5))?;
            let s = ctx.g.shape(y).to_vec();
            shapes.push((s[1], s[2]));
            let flat = ctx.g.reshape(y, &[s[0], s[1] * s[2]])?;
            parts.push(ctx.g.transpose(flat)?);
        }
        let tokens = ctx.g.concat(&parts)?;
        Ok(MultiScaleValue {
            tokens,
            layout: LevelLayout::new(shapes),
        })
    }
}

/// Pre-norm encoder layer: deformable self-attention (each token's
/// reference is its own pixel centre) and a feed-forward block.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: DeformAttn,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub fn new<F: Float, R: Rng>(store: &mut ParamStore<F>, rng: &mut R, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        let layers = (0..cfg.enc_layers)
            .map(|i| {
                let name = format!("encoder.{i}");
                Ok(EncoderLayer {
                    norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
                    attn: DeformAttn::new(store, rng, &format!("{name}.attn"), d, cfg.heads, 4, cfg.points)?,
                    norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
                    ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d, cfg.ffn_dim),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// `pos` is the `[tokens, d]` positional signal added to the queries.
    pub fn forward<F: Float>(&self, ctx: &mut Ctx<F>, input: &MultiScaleValue, pos: Var) -> Result<MultiScaleValue> {
        let refs = input.layout.reference_points();
        let mut x = input.tokens;
        for layer in &self.layers {
            let h = layer.norm1.forward(ctx, x)?;
            let q = ctx.g.add(h, pos)?;
            let value = MultiScaleValue {
                tokens: h,
                layout: input.layout.clone(),
            };
            let a = layer.attn.forward(ctx, q, &refs, &value)?;
            x = ctx.g.add(x, a)?;
            let h = layer.norm2.forward(ctx, x)?;
            let f = layer.ffn.forward(ctx, h)?;
            x = ctx.g.add(x, f)?;
        }
        Ok(MultiScaleValue {
            tokens: x,
            layout: input.layout.clone(),
        })
    }

    /// Zeroes every residual branch's output projection, turning the encoder
    /// into the identity.
    pub fn zero_output_projections<F: Float>(&self, store: &mut ParamStore<F>) {
        for l in &self.layers {
            l.attn.out.zero(store);
            l.ffn.fc2.zero(store);
        }
    }
}
