//! Losses, optimiser and the training loop.

mod losses;
mod optim;

pub use losses::{db_losses, mine_pixels, recognition_loss, total_loss, LossWeights, NEGATIVE_RATIO};
pub use optim::{clip_grad_norm, lr_at_step, Adam, Schedule};

use deer_tensor::{Float, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{augment, sample_at, AugmentConfig, DataConfig, Sample};
use crate::error::{DeerError, Result};
use crate::geometry::{centroid, inner_reference, normalize_point, perturb_reference, Point, PointMode, Polygon};
use crate::model::{Deer, ModelConfig, PAD};
use crate::params::{Ctx, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda_s: f64,
    pub lambda_b: f64,
    pub lambda_t: f64,
    pub lr_base: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    /// Text instances sampled per image for the recognition loss.
    pub n_instances: usize,
    pub perturb: bool,
    pub detection_supervision: bool,
    pub point_mode: PointMode,
    pub augment: bool,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Checkpoint interval in steps (0 keeps only the final checkpoint).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_s: 1.0,
            lambda_b: 1.0,
            lambda_t: 10.0,
            lr_base: 1e-3,
            lr_min: 1e-6,
            warmup_steps: 200,
            total_steps: 5000,
            batch_size: 8,
            n_instances: 2,
            perturb: true,
            detection_supervision: true,
            point_mode: PointMode::Center,
            augment: false,
            weight_decay: 1e-6,
            grad_clip: 5.0,
            checkpoint_every: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(DeerError::Config(m.to_string()));
        if self.warmup_steps >= self.total_steps {
            return err("train.warmup_steps must be below train.total_steps");
        }
        if [self.lambda_s, self.lambda_b, self.lambda_t].iter().any(|l| !(*l >= 0.0)) {
            return err("loss weights must be non-negative");
        }
        if self.batch_size == 0 {
            return err("train.batch_size must be positive");
        }
        if !(self.lr_base >= 0.0 && self.lr_min >= 0.0) || !(self.grad_clip > 0.0) || !(self.weight_decay >= 0.0) {
            return err("learning rates and weight decay must be non-negative, grad_clip positive");
        }
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            base: self.lr_base,
            min: self.lr_min,
            warmup: self.warmup_steps,
            total: self.total_steps,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_s: self.lambda_s,
            lambda_b: self.lambda_b,
            lambda_t: self.lambda_t,
            detection_supervision: self.detection_supervision,
        }
    }
}

/// Batch-averaged loss terms of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub step: usize,
    pub total: f64,
    pub recognition: f64,
    pub shrink: f64,
    pub binary: f64,
    pub thresh: f64,
    pub lr: f64,
}

impl LossBreakdown {
    /// Tab-separated `step L L_r L_s L_b L_t lr`.
    pub fn tsv(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.8}",
            self.step, self.total, self.recognition, self.shrink, self.binary, self.thresh, self.lr
        )
    }
}

pub const METRICS_HEADER: &str = "step\tL\tL_r\tL_s\tL_b\tL_t\tlr";

/// Reference point used to train on `poly`, normalised by the image size.
pub fn training_reference<R: Rng>(poly: &Polygon, mode: PointMode, perturb: bool, rng: &mut R, w: usize, h: usize) -> Result<Point> {
    let p = match (mode, perturb) {
        (PointMode::Center, false) => centroid(poly)?,
        (PointMode::Center, true) => perturb_reference(poly, rng)?,
        (PointMode::Inner, false) => inner_reference(poly, true, rng)?,
        (PointMode::Inner, true) => {
            let base = inner_reference(poly, true, rng)?;
            let c = centroid(poly)?;
            let q = perturb_reference(poly, rng)?;
            [base[0] + q[0] - c[0], base[1] + q[1] - c[1]]
        }
    };
    Ok(normalize_point(p, w, h))
}

/// Seeded stream for `(seed, step, slot)`.
fn stream(seed: u64, step: usize, slot: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    rng.set_stream(((step as u64) << 16) | slot);
    rng
}

/// Gradients and loss terms of one image.
struct ImageResult {
    grads: Vec<(ParamId, Vec<f32>)>,
    terms: [f64; 5],
}

/// Owns the model, its parameters and optimiser state.
pub struct Trainer {
    pub model: Deer,
    pub store: ParamStore<f32>,
    pub adam: Adam<f32>,
    pub cfg: TrainConfig,
    pub data: DataConfig,
    pub aug: AugmentConfig,
    /// Completed steps.
    pub step: usize,
}

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";
const ADAM_T: &str = "adam.t";
const STEP: &str = "train.step";

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig, data: DataConfig, aug: AugmentConfig) -> Result<Self> {
        cfg.validate()?;
        data.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = Deer::new(model_cfg, &mut store, &mut rng)?;
        let adam = Adam::new(&store, cfg.weight_decay);
        Ok(Self {
            model,
            store,
            adam,
            cfg,
            data,
            aug,
            step: 0,
        })
    }

    /// The synthetic batch for `step` (deterministic in the seed).
    pub fn batch(&self, step: usize) -> Result<Vec<Sample>> {
        let bs = self.cfg.batch_size;
        (0..bs)
            .into_par_iter()
            .map(|b| {
                let s = sample_at(self.cfg.seed, (step * bs + b) as u64, &self.data)?;
                if self.cfg.augment {
                    augment(&s, &mut stream(self.cfg.seed, step, 0x8000 | b as u64), &self.aug, &self.data)
                } else {
                    Ok(s)
                }
            })
            .collect()
    }

    fn image_pass(&self, sample: &Sample, rng: &mut ChaCha8Rng) -> Result<ImageResult> {
        let vocab = &self.model.config.vocab;
        let max_len = self.model.config.max_text_len;
        let mut ctx = Ctx::new(&self.store, true);
        let image = sample.image.to_tensor::<f32>();
        let (tokens, pos) = self.model.encode_image(&mut ctx, &image)?;
        let det = if self.cfg.detection_supervision {
            let maps = self.model.head.forward(&mut ctx, &tokens)?;
            Some(db_losses(&mut ctx, &maps, &sample.targets)?)
        } else {
            None
        };
        // instances usable for recognition, then N_t of them uniformly
        let mut pool: Vec<usize> = (0..sample.instances.len())
            .filter(|&i| {
                let inst = &sample.instances[i];
                !inst.ignore
                    && !inst.text.is_empty()
                    && inst.text.chars().count() <= max_len
                    && vocab.encode(&inst.text).is_ok()
            })
            .collect();
        let mut chosen = Vec::new();
        while chosen.len() < self.cfg.n_instances && !pool.is_empty() {
            chosen.push(pool.swap_remove(rng.random_range(0..pool.len())));
        }
        chosen.sort_unstable();
        let rec = if chosen.is_empty() {
            ctx.g.constant(Tensor::scalar(0.0))
        } else {
            let (w, h) = (sample.image.w, sample.image.h);
            let mut refs = Vec::new();
            let mut pairs = Vec::new();
            for &i in &chosen {
                let inst = &sample.instances[i];
                refs.push(training_reference(&inst.polygon, self.cfg.point_mode, self.cfg.perturb, rng, w, h)?);
                pairs.push(vocab.teacher_pair(&inst.text)?);
            }
            let t = pairs.iter().map(|p| p.0.len()).max().unwrap_or(1);
            let mut inputs = Vec::new();
            let mut targets = Vec::new();
            for (mut input, mut target) in pairs {
                input.resize(t, PAD);
                target.resize(t, PAD);
                inputs.push(input);
                targets.extend(target);
            }
            let mem = self.model.decoder.memory(&mut ctx, &tokens, pos)?;
            let (logits, _) = self.model.decoder.forward(&mut ctx, &mem, &refs, &inputs)?;
            recognition_loss(&mut ctx, logits, &targets)?
        };
        let loss = total_loss(&mut ctx, rec, det, &self.cfg.weights())?;
        let value = |v| ctx.g.value(v).item().as_f64();
        let terms = match det {
            Some((ls, lb, lt)) => [value(loss), value(rec), value(ls), value(lb), value(lt)],
            None => [value(loss), value(rec), 0.0, 0.0, 0.0],
        };
        if !terms.iter().all(|t| t.is_finite()) {
            return Err(DeerError::NonFinite(format!("loss terms {terms:?} at step {}", self.step + 1)));
        }
        let grads = ctx.g.backward(loss)?;
        Ok(ImageResult {
            grads: ctx.param_grads(&grads),
            terms,
        })
    }

    /// One optimisation step on `batch`.
    pub fn train_step(&mut self, batch: &[Sample]) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(DeerError::Input("empty batch".into()));
        }
        let step = self.step + 1;
        let results: Vec<ImageResult> = batch
            .par_iter()
            .enumerate()
            .map(|(b, s)| self.image_pass(s, &mut stream(self.cfg.seed, step, b as u64)))
            .collect::<Result<_>>()?;
        let n = batch.len() as f32;
        let mut acc: Vec<Option<Vec<f32>>> = vec![None; self.store.len()];
        let mut terms = [0.0; 5];
        for r in &results {
            for (t, v) in terms.iter_mut().zip(r.terms) {
                *t += v / batch.len() as f64;
            }
            for (id, g) in &r.grads {
                match &mut acc[id.index()] {
                    Some(a) => a.iter_mut().zip(g).for_each(|(a, g)| *a += g),
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        let mut grads: Vec<(ParamId, Vec<f32>)> = self
            .store
            .ids()
            .zip(acc)
            .filter_map(|(id, g)| g.map(|g| (id, g.into_iter().map(|x| x / n).collect())))
            .collect();
        clip_grad_norm(&mut grads, self.cfg.grad_clip);
        if grads.iter().any(|(_, g)| g.iter().any(|x| !x.is_finite())) {
            return Err(DeerError::NonFinite(format!("gradient at step {step}")));
        }
        let lr = lr_at_step(step, &self.cfg.schedule());
        self.adam.step(&mut self.store, &grads, lr);
        self.step = step;
        Ok(LossBreakdown {
            step,
            total: terms[0],
            recognition: terms[1],
            shrink: terms[2],
            binary: terms[3],
            thresh: terms[4],
            lr,
        })
    }

    /// Generates the next synthetic batch and trains on it.
    pub fn step_synthetic(&mut self) -> Result<LossBreakdown> {
        let batch = self.batch(self.step)?;
        self.train_step(&batch)
    }

    /// Parameters, optimiser moments and the step counter as named
    /// tensors.
    pub fn checkpoint(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = self.store.named();
        for id in self.store.ids() {
            let name = self.store.name(id);
            let shape = self.store.get(id).shape().to_vec();
            let i = id.index();
            out.push((format!("{ADAM_M}{name}"), Tensor::new(&shape, self.adam.m[i].clone()).expect("moment shape")));
            out.push((format!("{ADAM_V}{name}"), Tensor::new(&shape, self.adam.v[i].clone()).expect("moment shape")));
        }
        out.push((ADAM_T.into(), Tensor::scalar(self.adam.t as f32)));
        out.push((STEP.into(), Tensor::scalar(self.step as f32)));
        out
    }

    /// Restores parameters and, when present, optimiser state.
    pub fn restore(&mut self, named: &[(String, Tensor<f32>)]) -> Result<()> {
        self.store.load_named(named, true)?;
        let find = |n: &str| named.iter().find(|(k, _)| k == n).map(|(_, t)| t);
        if let (Some(t), Some(s)) = (find(ADAM_T), find(STEP)) {
            for id in self.store.ids().collect::<Vec<_>>() {
                let name = self.store.name(id).to_string();
                let (m, v) = (find(&format!("{ADAM_M}{name}")), find(&format!("{ADAM_V}{name}")));
                let (Some(m), Some(v)) = (m, v) else {
                    return Err(DeerError::Input(format!("checkpoint lacks optimiser state for {name}")));
                };
                self.adam.m[id.index()] = m.data().to_vec();
                self.adam.v[id.index()] = v.data().to_vec();
            }
            self.adam.t = t.item() as u64;
            self.step = s.item() as usize;
        }
        Ok(())
    }
}

/// Parameters of `store` whose names start with `prefix`, flattened; used
/// to compare branches before and after training.
pub fn snapshot<F: Float>(store: &ParamStore<F>, prefix: &str) -> Vec<F> {
    store.with_prefix(prefix).flat_map(|id| store.get(id).data().to_vec()).collect()
}
