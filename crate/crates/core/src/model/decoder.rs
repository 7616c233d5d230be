use deer_tensor::{Float, Tensor, Var};
use rand::Rng;

use super::vocab::BOS;
use super::ModelConfig;
use crate::error::{DeerError, Result};
use crate::nn::{
    causal_block_mask, sinusoidal_point_encoding, DeformAttn, DeformTrace, FeedForward, HeadKv, LayerNorm, Linear,
    LevelLayout, MultiHeadAttention, MultiScaleValue,
};
use crate::params::{init, Ctx, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrossKind {
    /// Sparse sampling around the instance reference point.
    Deformable,
    /// Dense attention over every token.
    Plain,
}

impl CrossKind {
    pub fn name(self) -> &'static str {
        match self {
            CrossKind::Deformable => "deformable",
            CrossKind::Plain => "plain",
        }
    }
}

#[derive(Clone, Debug)]
pub enum CrossAttn {
    Deformable(DeformAttn),
    Plain(MultiHeadAttention),
}

impl CrossAttn {
    pub fn kind(&self) -> CrossKind {
        match self {
            CrossAttn::Deformable(_) => CrossKind::Deformable,
            CrossAttn::Plain(_) => CrossKind::Plain,
        }
    }

    fn out(&self) -> &Linear {
        match self {
            CrossAttn::Deformable(a) => &a.out,
            CrossAttn::Plain(a) => &a.out,
        }
    }
}

/// Pre-norm decoder layer: causal self-attention, cross-attention to the
/// image tokens, feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub cross: CrossAttn,
    pub norm3: LayerNorm,
    pub ffn: FeedForward,
}

/// Per-layer image-side tensors, computed once per image and shared by every
/// instance and decoding step.
#[derive(Clone, Debug)]
pub struct DecoderMemory {
    entries: Vec<MemoryEntry>,
    layout: LevelLayout,
}

#[derive(Clone, Debug)]
enum MemoryEntry {
    Deformable(Var),
    Plain(HeadKv),
}

impl DecoderMemory {
    pub fn layout(&self) -> &LevelLayout {
        &self.layout
    }
}

/// What each cross-attention layer looked at.
#[derive(Clone, Debug)]
pub enum LayerTrace {
    Deformable(DeformTrace),
    /// `[H, Tq, Tk]` attention probabilities.
    Plain(Var),
}

#[derive(Clone, Debug, Default)]
pub struct DecoderTrace {
    pub layers: Vec<LayerTrace>,
}

/// Uniform bound giving unit-variance embeddings.
const EMBED_BOUND: f64 = 1.732_050_807_568_877_2;

/// Autoregressive character decoder conditioned on one reference point per
/// instance.
#[derive(Clone, Debug)]
pub struct TextDecoder {
    pub char_embed: ParamId,
    pub pos_embed: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub final_norm: LayerNorm,
    pub classifier: Linear,
    d_model: usize,
    vocab_size: usize,
    max_positions: usize,
}

impl TextDecoder {
    pub fn new<F: Float, R: Rng>(store: &mut ParamStore<F>, rng: &mut R, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        let v = cfg.vocab.size();
        let max_positions = cfg.max_text_len + 1;
        // unit variance, on the scale of the point encoding
        let char_embed = store.add("decoder.char_embed", init::uniform(rng, &[v, d], EMBED_BOUND));
        let pos_embed = store.add("decoder.pos_embed", init::uniform(rng, &[max_positions, d], EMBED_BOUND));
        let layers = (0..cfg.dec_layers)
            .map(|i| {
                let name = format!("decoder.{i}");
                let cross = match cfg.cross_kind(i) {
                    CrossKind::Deformable => CrossAttn::Deformable(DeformAttn::new(
                        store,
                        rng,
                        &format!("{name}.cross"),
                        d,
                        cfg.heads,
                        4,
                        cfg.points,
                    )?),
                    CrossKind::Plain => {
                        CrossAttn::Plain(MultiHeadAttention::new(store, rng, &format!("{name}.cross"), d, cfg.heads)?)
                    }
                };
                Ok(DecoderLayer {
                    norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
                    self_attn: MultiHeadAttention::new(store, rng, &format!("{name}.self"), d, cfg.heads)?,
                    norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
                    cross,
                    norm3: LayerNorm::new(store, &format!("{name}.norm3"), d),
                    ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d, cfg.ffn_dim),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            char_embed,
            pos_embed,
            layers,
            final_norm: LayerNorm::new(store, "decoder.norm", d),
            classifier: Linear::new(store, rng, "decoder.classifier", d, v),
            d_model: d,
            vocab_size: v,
            max_positions,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Longest accepted input sequence (BOS plus `max_text_len` characters).
    pub fn max_positions(&self) -> usize {
        self.max_positions
    }

    pub fn cross_kinds(&self) -> Vec<CrossKind> {
        self.layers.iter().map(|l| l.cross.kind()).collect()
    }

    /// Projects the encoder tokens for every layer. `pos` is the token
    /// positional signal, added to plain-attention keys.
    pub fn memory<F: Float>(&self, ctx: &mut Ctx<F>, tokens: &MultiScaleValue, pos: Var) -> Result<DecoderMemory> {
        let keys = ctx.g.add(tokens.tokens, pos)?;
        let entries = self
            .layers
            .iter()
            .map(|l| match &l.cross {
                CrossAttn::Deformable(a) => a.project_value(ctx, tokens).map(MemoryEntry::Deformable),
                CrossAttn::Plain(a) => a.project_kv(ctx, keys, tokens.tokens).map(MemoryEntry::Plain),
            })
            .collect::<Result<_>>()?;
        Ok(DecoderMemory {
            entries,
            layout: tokens.layout.clone(),
        })
    }

    /// Teacher-forced logits for `seqs.len()` instances decoded together.
    /// Every sequence starts with BOS and all have the same length `T`;
    /// returns `[N*T, V]` logits, instance-major.
    pub fn forward<F: Float>(
        &self,
        ctx: &mut Ctx<F>,
        mem: &DecoderMemory,
        refs: &[[f64; 2]],
        seqs: &[Vec<usize>],
    ) -> Result<(Var, DecoderTrace)> {
        let n = seqs.len();
        if n == 0 || refs.len() != n {
            return Err(DeerError::Input(format!("{} reference points for {n} sequences", refs.len())));
        }
        let t = seqs[0].len();
        if t == 0 || t > self.max_positions {
            return Err(DeerError::Input(format!(
                "sequence length {t} outside 1..={}",
                self.max_positions
            )));
        }
        for s in seqs {
            if s.len() != t {
                return Err(DeerError::Input("sequences in one batch must share a length".into()));
            }
            if s[0] != BOS {
                return Err(DeerError::Input("decoder input must start with BOS".into()));
            }
            if let Some(&bad) = s.iter().find(|&&c| c >= self.vocab_size) {
                return Err(DeerError::Input(format!("character id {bad} outside vocabulary of {}", self.vocab_size)));
            }
        }
        let d = self.d_model;
        let ids: Vec<usize> = seqs.iter().flatten().copied().collect();
        let positions: Vec<usize> = (0..n).flat_map(|_| 0..t).collect();
        let row_refs: Vec<[f64; 2]> = refs.iter().flat_map(|r| std::iter::repeat_n(*r, t)).collect();
        let ref_enc: Vec<F> = refs
            .iter()
            .flat_map(|r| {
                let e = sinusoidal_point_encoding(*r, d);
                std::iter::repeat_n(e, t).flatten()
            })
            .map(F::from_f64c)
            .collect();

        let table = ctx.p(self.char_embed);
        let chars = ctx.g.embedding(table, &ids)?;
        let table = ctx.p(self.pos_embed);
        let pos = ctx.g.embedding(table, &positions)?;
        let enc = ctx.g.constant(Tensor::new(&[n * t, d], ref_enc)?);
        let x = ctx.g.add(chars, pos)?;
        let mut x = ctx.g.add(x, enc)?;

        let mask = causal_block_mask::<F>(n, t);
        let mut trace = DecoderTrace::default();
        for (layer, entry) in self.layers.iter().zip(&mem.entries) {
            let h = layer.norm1.forward(ctx, x)?;
            let a = layer.self_attn.forward(ctx, h, h, h, Some(&mask))?;
            x = ctx.g.add(x, a)?;
            let h = layer.norm2.forward(ctx, x)?;
            let c = match (&layer.cross, entry) {
                (CrossAttn::Deformable(attn), MemoryEntry::Deformable(value)) => {
                    let (out, tr) = attn.attend(ctx, h, &row_refs, *value, &mem.layout)?;
                    trace.layers.push(LayerTrace::Deformable(tr));
                    out
                }
                (CrossAttn::Plain(attn), MemoryEntry::Plain(kv)) => {
                    let (out, probs) = attn.attend(ctx, h, *kv, None)?;
                    trace.layers.push(LayerTrace::Plain(probs));
                    out
                }
                _ => return Err(DeerError::Input("decoder memory built for a different model".into())),
            };
            x = ctx.g.add(x, c)?;
            let h = layer.norm3.forward(ctx, x)?;
            let f = layer.ffn.forward(ctx, h)?;
            x = ctx.g.add(x, f)?;
        }
        let h = self.final_norm.forward(ctx, x)?;
        Ok((self.classifier.forward(ctx, h)?, trace))
    }

    pub fn zero_output_projections<F: Float>(&self, store: &mut ParamStore<F>) {
        for l in &self.layers {
            l.self_attn.out.zero(store);
            l.cross.out().zero(store);
            l.ffn.fc2.zero(store);
        }
    }
}
