#![allow(dead_code)]

use deer_core::params::{Ctx, ParamId, ParamStore};
use deer_tensor::gradcheck::{check_gradients, GradCheckReport};
use deer_tensor::{Graph, Tensor, TensorError, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

pub fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, bound: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        for x in store.get_mut(id).data_mut() {
            *x = rng.random_range(-bound..bound);
        }
    }
}

pub fn linear_apply(x: &[f64], w: &[f64], b: &[f64], n_in: usize, n_out: usize) -> Vec<f64> {
    let rows = x.len() / n_in;
    let mut y = vec![0.0; rows * n_out];
    for r in 0..rows {
        for o in 0..n_out {
            let mut s = b[o];
            for i in 0..n_in {
                s += x[r * n_in + i] * w[i * n_out + o];
            }
            y[r * n_out + o] = s;
        }
    }
    y
}

/// Gradient check with every parameter plus `extra` tensors as inputs.
pub fn param_gradcheck(
    store: &ParamStore<f64>,
    extra: Vec<Tensor<f64>>,
    tol: f64,
    f: impl Fn(&mut Ctx<f64>, &[Var]) -> deer_core::Result<Var>,
) -> GradCheckReport {
    param_gradcheck_where(store, |_| true, extra, tol, f)
}

/// Gradient check over the parameters whose name passes `checked` (the
/// others enter as constants) plus `extra` tensors.
pub fn param_gradcheck_where(
    store: &ParamStore<f64>,
    checked: impl Fn(&str) -> bool,
    extra: Vec<Tensor<f64>>,
    tol: f64,
    f: impl Fn(&mut Ctx<f64>, &[Var]) -> deer_core::Result<Var>,
) -> GradCheckReport {
    let ids: Vec<ParamId> = store.ids().filter(|&id| checked(store.name(id))).collect();
    let n = ids.len();
    let mut inputs: Vec<Tensor<f64>> = ids.iter().map(|&id| store.get(id).clone()).collect();
    inputs.extend(extra);
    check_gradients(
        |g, v| {
            let mut local = store.clone();
            for (&id, var) in ids.iter().zip(&v[..n]) {
                *local.get_mut(id) = g.value(*var).clone();
            }
            let mut bound = Vec::with_capacity(store.len());
            let mut next = 0;
            for id in store.ids() {
                if next < n && ids[next] == id {
                    bound.push(v[next]);
                    next += 1;
                } else {
                    bound.push(g.constant(store.get(id).clone()));
                }
            }
            let graph = std::mem::replace(g, Graph::new());
            let mut ctx = Ctx::on_graph(&local, graph, &bound).map_err(|e| TensorError::Usage(e.to_string()))?;
            let out = f(&mut ctx, &v[n..]).map_err(|e| TensorError::Usage(e.to_string()))?;
            *g = ctx.g;
            Ok(out)
        },
        &inputs,
        tol,
    )
    .unwrap()
}
