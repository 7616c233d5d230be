use deer_tensor::{Float, Tensor, Var};

use crate::data::Targets;
use crate::error::{DeerError, Result};
use crate::model::{ScoreMapVars, PAD};
use crate::params::Ctx;

/// Negatives kept per positive by hard negative mining.
pub const NEGATIVE_RATIO: usize = 3;
const DICE_EPS: f64 = 1e-6;
const BCE_EPS: f64 = 1e-6;

/// Mean cross-entropy of `[N, V]` logits against `targets`, skipping PAD.
pub fn recognition_loss<F: Float>(ctx: &mut Ctx<F>, logits: Var, targets: &[usize]) -> Result<Var> {
    Ok(ctx.g.cross_entropy(logits, targets, PAD)?)
}

/// Indices kept by hard negative mining: every valid positive plus the
/// `3 * positives` valid negatives with the largest loss (ties by index).
pub fn mine_pixels(loss: &[f64], gt: &[f64], valid: &[bool]) -> Vec<bool> {
    let mut keep = vec![false; loss.len()];
    let mut negatives = Vec::new();
    let mut positives = 0;
    for i in 0..loss.len() {
        if !valid[i] {
            continue;
        }
        if gt[i] > 0.5 {
            keep[i] = true;
            positives += 1;
        } else {
            negatives.push(i);
        }
    }
    let k = (positives * NEGATIVE_RATIO).min(negatives.len());
    negatives.sort_by(|&a, &b| loss[b].total_cmp(&loss[a]).then(a.cmp(&b)));
    for &i in &negatives[..k] {
        keep[i] = true;
    }
    keep
}

/// The three detection losses `(L_s, L_b, L_t)`: balanced BCE with hard
/// negative mining on the probability map, dice on the approximate binary
/// map over the same pixels, and L1 on the threshold map inside the band.
pub fn db_losses<F: Float>(ctx: &mut Ctx<F>, maps: &ScoreMapVars, targets: &Targets) -> Result<(Var, Var, Var)> {
    let n = targets.h * targets.w;
    if ctx.g.value(maps.prob).numel() != n {
        return Err(DeerError::Input(format!(
            "score maps {:?} do not match targets {}x{}",
            ctx.g.shape(maps.prob),
            targets.h,
            targets.w
        )));
    }
    let shape = ctx.g.shape(maps.prob).to_vec();
    let gt: Vec<F> = targets.prob.iter().map(|&v| F::from_f64c(v)).collect();
    let bce = ctx.g.bce_with_logits(maps.prob_logits, &gt)?;
    let losses = ctx.g.value(bce).to_f64_vec();
    let keep = mine_pixels(&losses, &targets.prob, &targets.valid.bits);
    let count = keep.iter().filter(|&&k| k).count() as f64;
    let w = 1.0 / (count + BCE_EPS);
    let weights = Tensor::new(&shape, keep.iter().map(|&k| F::from_f64c(if k { w } else { 0.0 })).collect())?;
    let weights = ctx.g.constant(weights);
    let weighted = ctx.g.mul(bce, weights)?;
    let ls = ctx.g.sum(weighted);

    let sel = Tensor::new(&shape, keep.iter().map(|&k| F::from_f64c(if k { 1.0 } else { 0.0 })).collect())?;
    let gt_sel = Tensor::new(
        &shape,
        keep.iter().zip(&targets.prob).map(|(&k, &g)| F::from_f64c(if k { g } else { 0.0 })).collect(),
    )?;
    let gt_sum: f64 = gt_sel.to_f64_vec().iter().sum();
    let sel = ctx.g.constant(sel);
    let gt_sel = ctx.g.constant(gt_sel);
    let inter = ctx.g.mul(maps.binary, gt_sel)?;
    let inter = ctx.g.sum(inter);
    let pred = ctx.g.mul(maps.binary, sel)?;
    let pred = ctx.g.sum(pred);
    let rest = ctx.g.constant(Tensor::scalar(F::from_f64c(gt_sum + DICE_EPS)));
    let union = ctx.g.add(pred, rest)?;
    let ratio = ctx.g.div(inter, union)?;
    let ratio = ctx.g.scale(ratio, F::from_f64c(-2.0));
    let one = ctx.g.constant(Tensor::scalar(F::one()));
    let lb = ctx.g.add(one, ratio)?;

    let band = targets.thresh_mask.count();
    let lt = if band == 0 {
        ctx.g.constant(Tensor::scalar(F::zero()))
    } else {
        let tt = Tensor::new(&shape, targets.thresh.iter().map(|&v| F::from_f64c(v)).collect())?;
        let tt = ctx.g.constant(tt);
        let diff = ctx.g.sub(maps.thresh, tt)?;
        let diff = ctx.g.abs(diff);
        let m = 1.0 / band as f64;
        let bm = Tensor::new(
            &shape,
            targets.thresh_mask.bits.iter().map(|&b| F::from_f64c(if b { m } else { 0.0 })).collect(),
        )?;
        let bm = ctx.g.constant(bm);
        let d = ctx.g.mul(diff, bm)?;
        ctx.g.sum(d)
    };
    Ok((ls, lb, lt))
}

/// Loss weights and the detection switch used by [`total_loss`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_b: f64,
    pub lambda_t: f64,
    pub detection_supervision: bool,
}

/// `L_r + λ_s L_s + λ_b L_b + λ_t L_t`; without detection supervision the
/// detection terms are left out of the graph.
pub fn total_loss<F: Float>(ctx: &mut Ctx<F>, lr: Var, det: Option<(Var, Var, Var)>, w: &LossWeights) -> Result<Var> {
    let mut total = lr;
    if let (true, Some((ls, lb, lt))) = (w.detection_supervision, det) {
        for (v, lambda) in [(ls, w.lambda_s), (lb, w.lambda_b), (lt, w.lambda_t)] {
            let term = ctx.g.scale(v, F::from_f64c(lambda));
            total = ctx.g.add(total, term)?;
        }
    }
    Ok(total)
}
