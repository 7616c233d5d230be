//! The DEER network: backbone, multi-scale tokenizer, deformable encoder,
//! location head and reference-point-conditioned text decoder.

mod backbone;
mod decode;
mod decoder;
mod encoder;
mod head;
mod vocab;

pub use backbone::Backbone;
pub use decode::{beam_search, greedy_decode, greedy_decode_batch, Decoded, ModelScorer, StepScorer};
pub use decoder::{CrossKind, DecoderMemory, DecoderTrace, LayerTrace, TextDecoder};
pub use encoder::{Encoder, Tokenizer};
pub use head::{LocationHead, ScoreMapVars, ScoreMaps};
pub use vocab::{Vocab, BOS, EOS, PAD};

use deer_tensor::{Float, Tensor, Var};
use rand::Rng;

use crate::error::{DeerError, Result};
use crate::nn::{sinusoidal_point_encoding, LevelLayout, MultiScaleValue};
use crate::params::{init, Ctx, ParamId, ParamStore};

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    /// Sampling points per head per level.
    pub points: usize,
    pub ffn_dim: usize,
    pub vocab: Vocab,
    pub max_text_len: usize,
    /// Channels of the four backbone stages (C2..C5).
    pub backbone_channels: [usize; 4],
    /// Channels after the two upsampling steps of each location-head branch.
    pub head_channels: [usize; 2],
    pub gn_groups: usize,
    /// Steepness of the differentiable binarization.
    pub db_k: f64,
    /// Alternate deformable (odd layers) and plain (even layers) cross
    /// attention in the decoder; otherwise every layer is deformable.
    pub alternate_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            enc_layers: 2,
            dec_layers: 6,
            heads: 4,
            points: 4,
            ffn_dim: 128,
            vocab: Vocab::default(),
            max_text_len: 25,
            backbone_channels: [32, 64, 128, 256],
            head_channels: [32, 16],
            gn_groups: 8,
            db_k: 50.0,
            alternate_attention: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(DeerError::Config(m));
        if self.d_model % 4 != 0 || self.d_model == 0 {
            return err(format!("model.d_model {} must be a positive multiple of 4", self.d_model));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return err(format!("model.d_model {} not divisible by model.heads {}", self.d_model, self.heads));
        }
        if self.points == 0 || self.dec_layers == 0 || self.ffn_dim == 0 {
            return err("model.points, model.dec_layers and model.ffn_dim must be positive".into());
        }
        if self.alternate_attention && self.dec_layers % 2 != 0 {
            return err(format!("model.dec_layers {} must be even with alternating attention", self.dec_layers));
        }
        let groups = self.gn_groups;
        let mut chans: Vec<usize> = self.backbone_channels.to_vec();
        chans.push(self.d_model);
        chans.push(self.head_channels[0]);
        chans.push(self.backbone_channels[0] / 2);
        if groups == 0 || chans.iter().any(|c| *c == 0 || c % groups != 0) {
            return err(format!("model.gn_groups {groups} must divide every normalised channel count {chans:?}"));
        }
        if self.max_text_len == 0 {
            return err("model.max_text_len must be positive".into());
        }
        Ok(())
    }

    /// Cross-attention kind of decoder layer `i` (0-based).
    pub fn cross_kind(&self, layer: usize) -> CrossKind {
        if !self.alternate_attention || layer % 2 == 0 {
            CrossKind::Deformable
        } else {
            CrossKind::Plain
        }
    }
}

/// The full network. Holds parameter ids only; values live in a
/// [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Deer {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub tokenizer: Tokenizer,
    pub level_embed: ParamId,
    pub encoder: Encoder,
    pub head: LocationHead,
    pub decoder: TextDecoder,
}

/// Parameter-name prefix of the location head.
pub const HEAD_PREFIX: &str = "head.";

impl Deer {
    pub fn new<F: Float, R: Rng>(config: ModelConfig, store: &mut ParamStore<F>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(store, rng, &config)?;
        let tokenizer = Tokenizer::new(store, rng, &config);
        let level_embed = store.add("level_embed", init::uniform(rng, &[4, config.d_model], 0.1));
        let encoder = Encoder::new(store, rng, &config)?;
        let head = LocationHead::new(store, rng, &config);
        let decoder = TextDecoder::new(store, rng, &config)?;
        Ok(Self {
            config,
            backbone,
            tokenizer,
            level_embed,
            encoder,
            head,
            decoder,
        })
    }

    /// Backbone + tokenizer + encoder on a `[3, H, W]` image.
    pub fn encode_image<F: Float>(&self, ctx: &mut Ctx<F>, image: &Tensor<F>) -> Result<(MultiScaleValue, Var)> {
        let x = ctx.g.constant(image.clone());
        let feats = self.backbone.forward(ctx, x)?;
        let tokens = self.tokenizer.forward(ctx, &feats)?;
        let pos = self.token_positions(ctx, &tokens.layout)?;
        let encoded = self.encoder.forward(ctx, &tokens, pos)?;
        Ok((encoded, pos))
    }

    /// Positional signal of every token: sinusoidal encoding of its pixel
    /// centre plus a learned per-level embedding.
    pub fn token_positions<F: Float>(&self, ctx: &mut Ctx<F>, layout: &LevelLayout) -> Result<Var> {
        let d = self.config.d_model;
        let data: Vec<F> = layout
            .reference_points()
            .into_iter()
            .flat_map(|p| sinusoidal_point_encoding(p, d))
            .map(F::from_f64c)
            .collect();
        let pe = ctx.g.constant(Tensor::new(&[layout.total_len(), d], data)?);
        let table = ctx.p(self.level_embed);
        let lvl = ctx.g.embedding(table, &layout.level_of_each_token())?;
        Ok(ctx.g.add(pe, lvl)?)
    }
}
