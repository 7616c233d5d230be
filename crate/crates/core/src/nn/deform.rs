use std::f64::consts::PI;

use deer_tensor::{DeformLayout, Float, Var};
use rand::Rng;

use super::Linear;
use crate::error::{DeerError, Result};
use crate::params::{Ctx, ParamStore};

/// Level geometry of concatenated multi-scale tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelLayout {
    /// `(height, width)` per level, finest first.
    pub shapes: Vec<(usize, usize)>,
    /// Flat index of each level's first token.
    pub starts: Vec<usize>,
}

impl LevelLayout {
    pub fn new(shapes: Vec<(usize, usize)>) -> Self {
        let mut starts = Vec::with_capacity(shapes.len());
        let mut at = 0;
        for &(h, w) in &shapes {
            starts.push(at);
            at += h * w;
        }
        Self { shapes, starts }
    }

    pub fn levels(&self) -> usize {
        self.shapes.len()
    }

    pub fn total_len(&self) -> usize {
        self.shapes.iter().map(|(h, w)| h * w).sum()
    }

    pub fn flat_index(&self, level: usize, y: usize, x: usize) -> usize {
        let (h, w) = self.shapes[level];
        assert!(y < h && x < w, "({y}, {x}) outside level {level} of {h}x{w}");
        self.starts[level] + y * w + x
    }

    /// Inverse of [`flat_index`](Self::flat_index).
    pub fn locate(&self, flat: usize) -> (usize, usize, usize) {
        assert!(flat < self.total_len(), "flat index {flat} out of range");
        let level = self.starts.iter().rposition(|&s| s <= flat).unwrap();
        let w = self.shapes[level].1;
        let r = flat - self.starts[level];
        (level, r / w, r % w)
    }

    /// Pixel-centre normalised coordinate `((x+0.5)/w, (y+0.5)/h)` of every
    /// token, in flat order.
    pub fn reference_points(&self) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(self.total_len());
        for &(h, w) in &self.shapes {
            for y in 0..h {
                for x in 0..w {
                    out.push([(x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64]);
                }
            }
        }
        out
    }

    pub fn level_of_each_token(&self) -> Vec<usize> {
        self.shapes
            .iter()
            .enumerate()
            .flat_map(|(l, (h, w))| std::iter::repeat_n(l, h * w))
            .collect()
    }

    pub fn deform_layout(&self, heads: usize, points: usize) -> DeformLayout {
        DeformLayout {
            heads,
            points,
            level_shapes: self.shapes.clone(),
            level_starts: self.starts.clone(),
        }
    }
}

/// Multi-scale feature tokens `[total_len, d_model]` on a recording.
#[derive(Clone, Debug)]
pub struct MultiScaleValue {
    pub tokens: Var,
    pub layout: LevelLayout,
}

/// Multi-scale deformable attention.
///
/// Per head `h`, each query samples `points` locations on every level at
/// `p_ref + Δp / (w_l, h_l)`, where `Δp` comes from `offset` (one raw unit is
/// one pixel of that level). Samples are combined with weights from `weight`
/// softmaxed over the `levels * points` samples of the head, and the heads
/// are merged by `out`.
#[derive(Clone, Debug)]
pub struct DeformAttn {
    pub value: Linear,
    pub offset: Linear,
    pub weight: Linear,
    pub out: Linear,
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
    pub d_model: usize,
}

/// Intermediate values of one deformable attention call, kept for
/// inspection.
#[derive(Clone, Copy, Debug)]
pub struct DeformTrace {
    /// `[Q, H*L*K*2]` raw offsets.
    pub offsets: Var,
    /// `[Q, H*L*K]` normalised weights.
    pub weights: Var,
}

impl DeformAttn {
    pub fn new<F: Float, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        d_model: usize,
        heads: usize,
        levels: usize,
        points: usize,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(DeerError::Config(format!("d_model {d_model} not divisible by {heads} heads")));
        }
        let hlk = heads * levels * points;
        let value = Linear::new(store, rng, &format!("{name}.value"), d_model, d_model);
        let offset = Linear::new(store, rng, &format!("{name}.offset"), d_model, hlk * 2);
        let weight = Linear::new(store, rng, &format!("{name}.weight"), d_model, hlk);
        let out = Linear::new(store, rng, &format!("{name}.out"), d_model, d_model);
        // start from a one-pixel star around the reference with uniform weights
        store.get_mut(offset.w).data_mut().fill(F::zero());
        store.get_mut(weight.w).data_mut().fill(F::zero());
        let bias = store.get_mut(offset.b).data_mut();
        for h in 0..heads {
            for l in 0..levels {
                for k in 0..points {
                    let theta = 2.0 * PI * (h * points + k) as f64 / (heads * points) as f64;
                    let j = ((h * levels + l) * points + k) * 2;
                    bias[j] = F::from_f64c(theta.cos());
                    bias[j + 1] = F::from_f64c(theta.sin());
                }
            }
        }
        Ok(Self {
            value,
            offset,
            weight,
            out,
            heads,
            levels,
            points,
            d_model,
        })
    }

    pub fn project_value<F: Float>(&self, ctx: &mut Ctx<F>, value: &MultiScaleValue) -> Result<Var> {
        self.check_width(ctx, value.tokens, "value")?;
        if value.layout.levels() != self.levels {
            return Err(DeerError::Input(format!(
                "deformable attention built for {} levels, value has {}",
                self.levels,
                value.layout.levels()
            )));
        }
        self.value.forward(ctx, value.tokens)
    }

    fn check_width<F: Float>(&self, ctx: &Ctx<F>, x: Var, what: &str) -> Result<()> {
        let s = ctx.g.shape(x);
        if s.len() != 2 || s[1] != self.d_model {
            return Err(DeerError::Input(format!(
                "deformable attention {what} must be [n, {}], got {s:?}",
                self.d_model
            )));
        }
        Ok(())
    }

    /// Attends with an already projected value (see
    /// [`project_value`](Self::project_value)).
    pub fn attend<F: Float>(
        &self,
        ctx: &mut Ctx<F>,
        query: Var,
        refs: &[[f64; 2]],
        projected: Var,
        layout: &LevelLayout,
    ) -> Result<(Var, DeformTrace)> {
        self.check_width(ctx, query, "query")?;
        let q = ctx.g.shape(query)[0];
        if refs.len() != q {
            return Err(DeerError::Input(format!("{} reference points for {q} queries", refs.len())));
        }
        let offsets = self.offset.forward(ctx, query)?;
        let logits = self.weight.forward(ctx, query)?;
        let lk = self.levels * self.points;
        let logits = ctx.g.reshape(logits, &[q * self.heads, lk])?;
        let weights = ctx.g.softmax(logits, 1)?;
        let weights = ctx.g.reshape(weights, &[q, self.heads * lk])?;
        let refs_f: Vec<[F; 2]> = refs.iter().map(|p| [F::from_f64c(p[0]), F::from_f64c(p[1])]).collect();
        let sampled = ctx
            .g
            .deform_sample(projected, offsets, weights, &refs_f, &layout.deform_layout(self.heads, self.points))?;
        let out = self.out.forward(ctx, sampled)?;
        Ok((out, DeformTrace { offsets, weights }))
    }

    pub fn forward<F: Float>(&self, ctx: &mut Ctx<F>, query: Var, refs: &[[f64; 2]], value: &MultiScaleValue) -> Result<Var> {
        let projected = self.project_value(ctx, value)?;
        Ok(self.attend(ctx, query, refs, projected, &value.layout)?.0)
    }
}
