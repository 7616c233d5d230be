use deer_tensor::{Float, Tensor, Var};
use rand::Rng;

use super::Linear;
use crate::error::{DeerError, Result};
use crate::params::{Ctx, ParamStore};

/// Scaled dot-product attention with `heads` heads and separate
/// query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub d_model: usize,
}

/// Keys and values already projected and split into heads (`[H, T, dh]`).
#[derive(Clone, Copy, Debug)]
pub struct HeadKv {
    pub k: Var,
    pub v: Var,
}

impl MultiHeadAttention {
    pub fn new<F: Float, R: Rng>(store: &mut ParamStore<F>, rng: &mut R, name: &str, d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(DeerError::Config(format!("d_model {d_model} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, rng, &format!("{name}.q"), d_model, d_model),
            k: Linear::new(store, rng, &format!("{name}.k"), d_model, d_model),
            v: Linear::new(store, rng, &format!("{name}.v"), d_model, d_model),
            out: Linear::new(store, rng, &format!("{name}.out"), d_model, d_model),
            heads,
            d_model,
        })
    }

    fn split_heads<F: Float>(&self, ctx: &mut Ctx<F>, x: Var) -> Result<Var> {
        let t = ctx.g.shape(x)[0];
        let r = ctx.g.reshape(x, &[t, self.heads, self.d_model / self.heads])?;
        Ok(ctx.g.permute(r, &[1, 0, 2])?)
    }

    pub fn project_kv<F: Float>(&self, ctx: &mut Ctx<F>, key: Var, value: Var) -> Result<HeadKv> {
        if ctx.g.shape(key).last() != Some(&self.d_model) || ctx.g.shape(value).last() != Some(&self.d_model) {
            return Err(DeerError::Input(format!(
                "attention expects width {}, got key {:?} value {:?}",
                self.d_model,
                ctx.g.shape(key),
                ctx.g.shape(value)
            )));
        }
        let k = self.k.forward(ctx, key)?;
        let k = self.split_heads(ctx, k)?;
        let v = self.v.forward(ctx, value)?;
        let v = self.split_heads(ctx, v)?;
        Ok(HeadKv { k, v })
    }

    /// Attends `query[Tq, d]` over pre-projected keys/values. `mask` is an
    /// additive `[Tq, Tk]` bias (0 or -inf). Returns the output and the
    /// attention probabilities `[H, Tq, Tk]`.
    pub fn attend<F: Float>(&self, ctx: &mut Ctx<F>, query: Var, kv: HeadKv, mask: Option<&Tensor<F>>) -> Result<(Var, Var)> {
        if ctx.g.shape(query).len() != 2 || ctx.g.shape(query)[1] != self.d_model {
            return Err(DeerError::Input(format!(
                "attention expects width {}, got query {:?}",
                self.d_model,
                ctx.g.shape(query)
            )));
        }
        let tq = ctx.g.shape(query)[0];
        let tk = ctx.g.shape(kv.k)[1];
        let q = self.q.forward(ctx, query)?;
        let q = self.split_heads(ctx, q)?;
        let scores = ctx.g.matmul_ext(q, kv.k, true)?;
        let dh = (self.d_model / self.heads) as f64;
        let mut scores = ctx.g.scale(scores, F::from_f64c(1.0 / dh.sqrt()));
        if let Some(m) = mask {
            if m.shape() != [tq, tk] {
                return Err(DeerError::Input(format!("mask {:?} for scores {tq}x{tk}", m.shape())));
            }
            let rep: Vec<F> = (0..self.heads).flat_map(|_| m.data().iter().copied()).collect();
            let mv = ctx.g.constant(Tensor::new(&[self.heads, tq, tk], rep)?);
            scores = ctx.g.add(scores, mv)?;
        }
        let probs = ctx.g.softmax(scores, 2)?;
        let o = ctx.g.matmul(probs, kv.v)?;
        let o = ctx.g.permute(o, &[1, 0, 2])?;
        let o = ctx.g.reshape(o, &[tq, self.d_model])?;
        Ok((self.out.forward(ctx, o)?, probs))
    }

    pub fn forward<F: Float>(&self, ctx: &mut Ctx<F>, query: Var, key: Var, value: Var, mask: Option<&Tensor<F>>) -> Result<Var> {
        let kv = self.project_kv(ctx, key, value)?;
        Ok(self.attend(ctx, query, kv, mask)?.0)
    }
}

/// Additive mask for `groups` independent sequences of length `len` packed
/// into one `[groups*len, groups*len]` score matrix: position `i` may see `j`
/// iff both belong to the same sequence and `j <= i`.
pub fn causal_block_mask<F: Float>(groups: usize, len: usize) -> Tensor<F> {
    let n = groups * len;
    Tensor::from_fn(&[n, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        if i / len == j / len && j <= i {
            F::zero()
        } else {
            F::neg_infinity()
        }
    })
}
