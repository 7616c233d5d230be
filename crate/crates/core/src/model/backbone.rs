use deer_tensor::{Float, Tensor, Var};
use rand::Rng;

use super::ModelConfig;
use crate::error::{DeerError, Result};
use crate::params::{init, Ctx, ParamId, ParamStore};

/// 3x3 convolution followed by group norm and ReLU.
#[derive(Clone, Debug)]
struct ConvGnRelu {
    w: ParamId,
    gamma: ParamId,
    beta: ParamId,
    stride: usize,
    groups: usize,
}

impl ConvGnRelu {
    fn new<F: Float, R: Rng>(store: &mut ParamStore<F>, rng: &mut R, name: &str, cin: usize, cout: usize, stride: usize, groups: usize) -> Self {
        Self {
            w: store.add(format!("{name}.w"), init::kaiming(rng, &[cout, cin, 3, 3], cin * 9)),
            gamma: store.add(format!("{name}.gn.gamma"), Tensor::ones(&[cout])),
            beta: store.add(format!("{name}.gn.beta"), Tensor::zeros(&[cout])),
            stride,
            groups,
        }
    }

    fn forward<F: Float>(&self, ctx: &mut Ctx<F>, x: Var) -> Result<Var> {
        let w = ctx.p(self.w);
        let y = ctx.g.conv2d(x, w, None, self.stride, 1)?;
        let (gamma, beta) = (ctx.p(self.gamma), ctx.p(self.beta));
        let y = ctx.g.group_norm(y, self.groups, gamma, beta, F::from_f64c(1e-5))?;
        Ok(ctx.g.relu(y))
    }
}

/// Stride-4 stem and four stages of two conv blocks; the first block of each
/// stage halves the resolution, giving maps at 1/4, 1/8, 1/16 and 1/32.
#[derive(Clone, Debug)]
pub struct Backbone {
    stem: ConvGnRelu,
    stages: Vec<[ConvGnRelu; 2]>,
}

impl Backbone {
    pub fn new<F: Float, R: Rng>(store: &mut ParamStore<F>, rng: &mut R, cfg: &ModelConfig) -> Result<Self> {
        let g = cfg.gn_groups;
        let stem_ch = cfg.backbone_channels[0] / 2;
        let stem = ConvGnRelu::new(store, rng, "backbone.stem", 3, stem_ch, 2, g);
        let mut stages = Vec::new();
        let mut cin = stem_ch;
        for (i, &c) in cfg.backbone_channels.iter().enumerate() {
            let a = ConvGnRelu::new(store, rng, &format!("backbone.s{}.0", i + 2), cin, c, 2, g);
            let b = ConvGnRelu::new(store, rng, &format!("backbone.s{}.1", i + 2), c, c, 1, g);
            stages.push([a, b]);
            cin = c;
        }
        Ok(Self { stem, stages })
    }

    /// `image[3, H, W]` to the four feature maps `[C_i, H/s, W/s]`.
    pub fn forward<F: Float>(&self, ctx: &mut Ctx<F>, image: Var) -> Result<Vec<Var>> {
        let s = ctx.g.shape(image).to_vec();
        if s.len() != 3 || s[0] != 3 {
            return Err(DeerError::Input(format!("image must be [3, H, W], got {s:?}")));
        }
        if s[1] % 32 != 0 || s[2] % 32 != 0 || s[1] == 0 || s[2] == 0 {
            return Err(DeerError::Config(format!(
                "image size {}x{} must be a positive multiple of 32 (pad the input)",
                s[1], s[2]
            )));
        }
        let mut x = self.stem.forward(ctx, image)?;
        let mut out = Vec::with_capacity(4);
        for [a, b] in &self.stages {
            x = a.forward(ctx, x)?;
            x = b.forward(ctx, x)?;
            out.push(x);
        }
        Ok(out)
    }
}
