use deer_tensor::Float;

use crate::params::{ParamId, ParamStore};

/// Learning-rate schedule: linear warmup to `base`, then cosine decay to
/// `min` at `total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base: f64,
    pub min: f64,
    pub warmup: usize,
    pub total: usize,
}

pub fn lr_at_step(step: usize, s: &Schedule) -> f64 {
    if step < s.warmup {
        return s.base * step as f64 / s.warmup as f64;
    }
    if step >= s.total {
        return s.min;
    }
    let progress = (step - s.warmup) as f64 / (s.total - s.warmup) as f64;
    s.min + (s.base - s.min) * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0
}

/// Adam with bias correction and decoupled weight decay. Parameters that
/// receive no gradient in a step are left untouched.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Completed updates.
    pub t: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

impl<F: Float> Adam<F> {
    pub fn new(store: &ParamStore<F>, weight_decay: f64) -> Self {
        let zeros = |id: ParamId| vec![F::zero(); store.get(id).numel()];
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: store.ids().map(zeros).collect(),
            v: store.ids().map(zeros).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[(ParamId, Vec<F>)], lr: f64) {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (F::from_f64c(self.beta1), F::from_f64c(self.beta2));
        let (one, eps) = (F::one(), F::from_f64c(self.eps));
        let (c1, c2) = (F::from_f64c(c1), F::from_f64c(c2));
        let (lr, wd) = (F::from_f64c(lr), F::from_f64c(self.weight_decay));
        for (id, g) in grads {
            let i = id.index();
            let p = store.get_mut(*id).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] = p[j] - lr * (mh / (vh.sqrt() + eps) + wd * p[j]);
            }
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<F: Float>(grads: &mut [(ParamId, Vec<F>)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = F::from_f64c(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            for x in g.iter_mut() {
                *x = *x * s;
            }
        }
    }
    norm
}
