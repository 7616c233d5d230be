use deer_tensor::Float;

use super::decoder::DecoderMemory;
use super::vocab::{BOS, EOS};
use super::Deer;
use crate::error::{DeerError, Result};
use crate::params::Ctx;

/// Source of next-token logits for a set of `(item, prefix)` queries. Each
/// prefix starts with BOS.
pub trait StepScorer {
    fn next_logits(&mut self, queries: &[(usize, Vec<usize>)]) -> Result<Vec<Vec<f64>>>;
}

/// A decoded character-id sequence (specials removed) and its confidence.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub ids: Vec<usize>,
    pub confidence: f64,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Index of the maximum; the lowest index wins ties.
fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding of `items` sequences in lockstep. Each stops at EOS or
/// after `max_len` characters; confidence is the mean of the per-step
/// maximum softmax probability.
pub fn greedy_decode_batch<S: StepScorer>(scorer: &mut S, items: usize, max_len: usize) -> Result<Vec<Decoded>> {
    let mut prefixes: Vec<Vec<usize>> = vec![vec![BOS]; items];
    let mut probs: Vec<Vec<f64>> = vec![Vec::new(); items];
    let mut active: Vec<usize> = (0..items).collect();
    while !active.is_empty() {
        let queries: Vec<(usize, Vec<usize>)> = active.iter().map(|&i| (i, prefixes[i].clone())).collect();
        let logits = scorer.next_logits(&queries)?;
        if logits.len() != queries.len() {
            return Err(DeerError::Input("scorer returned the wrong number of rows".into()));
        }
        let mut still = Vec::new();
        for (&i, row) in active.iter().zip(&logits) {
            let p = softmax(row);
            let c = argmax(row);
            probs[i].push(p[c]);
            if c != EOS {
                prefixes[i].push(c);
                if prefixes[i].len() <= max_len {
                    still.push(i);
                }
            }
        }
        active = still;
    }
    Ok(prefixes
        .into_iter()
        .zip(probs)
        .map(|(p, pr)| Decoded {
            ids: p[1..].to_vec(),
            confidence: pr.iter().sum::<f64>() / pr.len() as f64,
        })
        .collect())
}

pub fn greedy_decode<S: StepScorer>(scorer: &mut S, max_len: usize) -> Result<Decoded> {
    Ok(greedy_decode_batch(scorer, 1, max_len)?.remove(0))
}

#[derive(Clone, Debug)]
struct Beam {
    prefix: Vec<usize>,
    log_prob: f64,
    probs: Vec<f64>,
    done: bool,
}

/// Beam search for item `item`. Candidates are ranked by summed log
/// probability; ties keep the earlier beam and then the lower token id.
/// The confidence is the mean probability of the chosen tokens.
pub fn beam_search<S: StepScorer>(scorer: &mut S, item: usize, width: usize, max_len: usize) -> Result<Decoded> {
    if width == 0 {
        return Err(DeerError::Config("beam width must be positive".into()));
    }
    let mut beams = vec![Beam {
        prefix: vec![BOS],
        log_prob: 0.0,
        probs: Vec::new(),
        done: false,
    }];
    while beams.iter().any(|b| !b.done) {
        let open: Vec<usize> = (0..beams.len()).filter(|&i| !beams[i].done).collect();
        let queries: Vec<(usize, Vec<usize>)> = open.iter().map(|&i| (item, beams[i].prefix.clone())).collect();
        let logits = scorer.next_logits(&queries)?;
        let mut cands: Vec<(f64, usize, usize, Beam)> = Vec::new();
        for (bi, b) in beams.iter().enumerate() {
            if b.done {
                cands.push((b.log_prob, bi, 0, b.clone()));
            }
        }
        for (&bi, row) in open.iter().zip(&logits) {
            let p = softmax(row);
            for (tok, &pt) in p.iter().enumerate() {
                let mut nb = beams[bi].clone();
                nb.log_prob += pt.ln();
                nb.probs.push(pt);
                if tok == EOS {
                    nb.done = true;
                } else {
                    nb.prefix.push(tok);
                    nb.done = nb.prefix.len() > max_len;
                }
                cands.push((nb.log_prob, bi, tok, nb));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        beams = cands.into_iter().take(width).map(|c| c.3).collect();
    }
    let best = beams.remove(0);
    Ok(Decoded {
        ids: best.prefix[1..].to_vec(),
        confidence: best.probs.iter().sum::<f64>() / best.probs.len() as f64,
    })
}

/// Scores prefixes with the network for a fixed set of reference points
/// (item `i` uses `refs[i]`).
pub struct ModelScorer<'m, 'c, 's, F: Float> {
    pub model: &'m Deer,
    pub ctx: &'c mut Ctx<'s, F>,
    pub memory: &'m DecoderMemory,
    pub refs: Vec<[f64; 2]>,
}

impl<F: Float> StepScorer for ModelScorer<'_, '_, '_, F> {
    fn next_logits(&mut self, queries: &[(usize, Vec<usize>)]) -> Result<Vec<Vec<f64>>> {
        let v = self.model.decoder.vocab_size();
        let mut out = vec![Vec::new(); queries.len()];
        let mut lengths: Vec<usize> = queries.iter().map(|q| q.1.len()).collect();
        lengths.sort_unstable();
        lengths.dedup();
        for len in lengths {
            let group: Vec<usize> = (0..queries.len()).filter(|&i| queries[i].1.len() == len).collect();
            let refs = group
                .iter()
                .map(|&i| {
                    self.refs
                        .get(queries[i].0)
                        .copied()
                        .ok_or_else(|| DeerError::Input(format!("no reference point for item {}", queries[i].0)))
                })
                .collect::<Result<Vec<_>>>()?;
            let seqs: Vec<Vec<usize>> = group.iter().map(|&i| queries[i].1.clone()).collect();
            let (logits, _) = self.model.decoder.forward(self.ctx, self.memory, &refs, &seqs)?;
            let data = self.ctx.g.value(logits).data();
            for (j, &qi) in group.iter().enumerate() {
                let row = (j * len + len - 1) * v;
                out[qi] = data[row..row + v].iter().map(|x| x.as_f64()).collect();
            }
        }
        Ok(out)
    }
}
