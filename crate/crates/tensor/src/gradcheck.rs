//! Central finite-difference verification of recorded gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of [`check_gradients`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error per input tensor.
    pub max_rel_error: Vec<f64>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error.iter().all(|&e| e <= self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }

    /// Indices of inputs above tolerance.
    pub fn failures(&self) -> Vec<usize> {
        self.max_rel_error
            .iter()
            .enumerate()
            .filter(|(_, &e)| e > self.tolerance)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Fixed projection weights in [-1, 1] used to reduce non-scalar outputs.
fn projection(n: usize) -> Vec<f64> {
    let mut s: u64 = 0x9E37_79B9_7F4A_7C15;
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect()
}

fn scalar_output<Func>(f: &Func, inputs: &[Tensor<f64>]) -> Result<(Graph<f64>, Var, Vec<Var>)>
where
    Func: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let n = g.value(out).numel();
    let loss = if n == 1 {
        out
    } else {
        let shape = g.shape(out).to_vec();
        let r = g.constant(Tensor::new(&shape, projection(n))?);
        let prod = g.mul(out, r)?;
        g.sum(prod)
    };
    Ok((g, loss, vars))
}

/// Compares reverse-mode gradients of `f` at `inputs` against central finite
/// differences with step `h = 1e-6 * (1 + |x|)`.
///
/// Non-scalar outputs are reduced with a fixed pseudo-random projection. The
/// per-element error is `|a - n| / max(|a|, |n|, 1e-2 * max|n|, 1e-6)`, i.e.
/// relative for entries of significant magnitude and absolute (scaled by the
/// largest entry) for near-zero ones.
pub fn check_gradients<Func>(f: Func, inputs: &[Tensor<f64>], tol: f64) -> Result<GradCheckReport>
where
    Func: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (g, loss, vars) = scalar_output(&f, inputs)?;
    let grads = g.backward(loss)?;
    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let (g, loss, _) = scalar_output(&f, ins)?;
        Ok(g.value(loss).item())
    };
    let mut max_rel_error = Vec::with_capacity(inputs.len());
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .data(*v)
            .map(|d| d.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        let mut probe = inputs.to_vec();
        for j in 0..inputs[i].numel() {
            let x = inputs[i].data()[j];
            let h = 1e-6 * (1.0 + x.abs());
            probe[i].data_mut()[j] = x + h;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = x - h;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = x;
            numeric.push((up - down) / (2.0 * h));
        }
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let worst = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| {
                let denom = a.abs().max(n.abs()).max(1e-2 * scale).max(1e-6);
                (a - n).abs() / denom
            })
            .fold(0.0, f64::max);
        max_rel_error.push(worst);
    }
    Ok(GradCheckReport { max_rel_error, tolerance: tol })
}
