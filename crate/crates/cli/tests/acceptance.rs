//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any fails.
//!
//! The two toy training runs take over an hour each on one core. They are
//! cached under `target/acceptance/` and reused while their resolved config
//! is unchanged.

use std::collections::{BTreeSet, VecDeque};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use deer_cli::commands::{
    cmd_eval, cmd_train, eval_config, load_model, synthetic_dataset, ConfigArgs, EvalArgs, TrainArgs, CONFIG_FILE,
    FINAL_CHECKPOINT, METRICS_FILE,
};
use deer_cli::config::RunConfig;
use deer_core::data::Targets;
use deer_core::evaluation::{edit_distance, evaluate, ic15_filter, lexicon_correct, run_beta_ablation, DEFAULT_BETAS};
use deer_core::geometry::{
    centroid, connected_components, dilation_offset, offset_polygon, perturb_reference, reference_corners, Mask, Polygon,
};
use deer_core::model::{
    CrossKind, Deer, LayerTrace, LocationHead, ModelConfig, ScoreMapVars, Vocab, BOS, HEAD_PREFIX, PAD,
};
use deer_core::nn::{DeformAttn, LevelLayout, MultiHeadAttention, MultiScaleValue};
use deer_core::params::{Ctx, ParamId, ParamStore};
use deer_core::training::{
    db_losses, lr_at_step, recognition_loss, snapshot, total_loss, Adam, LossWeights, Schedule,
};
use deer_tensor::gradcheck::{check_gradients, GradCheckReport};
use deer_tensor::{Graph, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, bound: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        for x in store.get_mut(id).data_mut() {
            *x = rng.random_range(-bound..bound);
        }
    }
}

// ---------- criterion 1: gradients ----------

const TOL_SMOOTH: f64 = 1e-4;
const TOL_SAMPLING: f64 = 1e-3;
const GRID_MARGIN: f64 = 1e-3;

/// Gradient check over the parameters named by `checked` plus `extra`
/// inputs; other parameters enter as constants.
fn param_check(
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
            let mut next = 0;
            let mut bound = Vec::with_capacity(store.len());
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
    .expect("gradient check ran")
}

/// Normalised coordinate at least `margin` pixels from the grid lines
/// through the pixel centres of an `n`-cell axis.
fn off_grid(rng: &mut ChaCha8Rng, n: usize, margin: f64) -> f64 {
    loop {
        let p: f64 = rng.random_range(-0.2..1.2);
        let f = p * n as f64 - 0.5;
        if (f - f.round()).abs() > margin {
            return p;
        }
    }
}

/// Smallest distance, in level pixels, of any deformable sampling location
/// to the grid lines.
fn grid_margin(offsets: &[f64], refs: &[[f64; 2]], layout: &LevelLayout, heads: usize, points: usize) -> f64 {
    let dl = layout.deform_layout(heads, points);
    let per_q = offsets.len() / refs.len();
    let mut m = f64::INFINITY;
    for (q, r) in refs.iter().enumerate() {
        let row = &offsets[q * per_q..(q + 1) * per_q];
        for h in 0..heads {
            for l in 0..layout.levels() {
                let (lh, lw) = layout.shapes[l];
                for k in 0..points {
                    let p = dl.location(*r, row, h, l, k);
                    for (c, n) in [(p[0], lw), (p[1], lh)] {
                        let f = c * n as f64 - 0.5;
                        m = m.min((f - f.round()).abs());
                    }
                }
            }
        }
    }
    m
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        enc_layers: 1,
        dec_layers: 2,
        heads: 2,
        points: 1,
        ffn_dim: 8,
        max_text_len: 3,
        vocab: Vocab::new("AB").unwrap(),
        backbone_channels: [8, 8, 16, 16],
        head_channels: [8, 4],
        gn_groups: 4,
        ..ModelConfig::default()
    }
}

fn grad_layout() -> LevelLayout {
    LevelLayout::new(vec![(3, 3), (2, 2), (1, 2), (1, 1)])
}

struct DetCase {
    h: usize,
    w: usize,
    logits: Vec<f64>,
    thresh: Vec<f64>,
    targets: Targets,
}

fn det_case(seed: u64) -> DetCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (5, 6);
    let n = h * w;
    let mask = |rng: &mut ChaCha8Rng, p: f64| Mask {
        h,
        w,
        bits: (0..n).map(|_| rng.random_bool(p)).collect(),
    };
    let prob = (0..n).map(|_| if rng.random_bool(0.25) { 1.0 } else { 0.0 }).collect();
    let valid = mask(&mut rng, 0.9);
    let band = mask(&mut rng, 0.4);
    DetCase {
        h,
        w,
        logits: rand_vec(&mut rng, n, 3.0),
        thresh: (0..n).map(|_| rng.random_range(0.05..0.95)).collect(),
        targets: Targets {
            h,
            w,
            prob,
            valid,
            thresh: (0..n).map(|_| rng.random_range(0.3..0.7)).collect(),
            thresh_mask: band,
        },
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: Vec<(&str, f64, f64)> = Vec::new();
    let mut record = |name: &'static str, r: GradCheckReport| -> Result<(), String> {
        worst.push((name, r.worst(), r.tolerance));
        ensure(r.passed(), format!("{name}: worst relative error {:.2e} above {:.0e} {:?}", r.worst(), r.tolerance, r.max_rel_error))
    };

    let ins = [rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[4, 5])];
    record("matmul", check_gradients(|g, v| g.matmul(v[0], v[1]), &ins, TOL_SMOOTH).unwrap())?;
    let ins = [rand_tensor(&mut rng, &[2, 6, 5]), rand_tensor(&mut rng, &[3, 2, 3, 3]), rand_tensor(&mut rng, &[3])];
    record("conv2d", check_gradients(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1), &ins, TOL_SMOOTH).unwrap())?;
    let ins = [rand_tensor(&mut rng, &[2, 3, 3]), rand_tensor(&mut rng, &[2, 3, 2, 2]), rand_tensor(&mut rng, &[3])];
    record(
        "transposed conv",
        check_gradients(|g, v| g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 0), &ins, TOL_SMOOTH).unwrap(),
    )?;
    let ins = [rand_tensor(&mut rng, &[4, 3, 3]), rand_tensor(&mut rng, &[4]), rand_tensor(&mut rng, &[4])];
    record(
        "group norm",
        check_gradients(|g, v| g.group_norm(v[0], 2, v[1], v[2], 1e-5), &ins, TOL_SMOOTH).unwrap(),
    )?;
    let ins = [rand_tensor(&mut rng, &[3, 7])];
    record("softmax", check_gradients(|g, v| g.softmax(v[0], 1), &ins, TOL_SMOOTH).unwrap())?;

    let value = rand_tensor(&mut rng, &[4, 5, 3]);
    let pts: Vec<f64> = (0..6).flat_map(|_| [off_grid(&mut rng, 5, GRID_MARGIN), off_grid(&mut rng, 4, GRID_MARGIN)]).collect();
    let ins = [value, Tensor::new(&[6, 2], pts).unwrap()];
    record(
        "bilinear sampling",
        check_gradients(|g, v| g.bilinear_sample(v[0], v[1]), &ins, TOL_SAMPLING).unwrap(),
    )?;

    // deformable attention with all projections as inputs
    let layout = LevelLayout::new(vec![(4, 4), (2, 3)]);
    let (d, heads, points, nq) = (4, 2, 2, 3);
    let (store, attn, query, value, refs) = (0..)
        .find_map(|seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let attn = DeformAttn::new(&mut store, &mut r, "a", d, heads, 2, points).unwrap();
            randomize(&mut store, &mut r, 0.5);
            let query = rand_vec(&mut r, nq * d, 1.0);
            let value = rand_vec(&mut r, layout.total_len() * d, 1.0);
            let refs: Vec<[f64; 2]> = (0..nq).map(|_| [r.random_range(0.1..0.9), r.random_range(0.1..0.9)]).collect();
            let mut ctx = Ctx::new(&store, false);
            let q = ctx.g.constant(Tensor::new(&[nq, d], query.clone()).unwrap());
            let off = attn.offset.forward(&mut ctx, q).unwrap();
            let off = ctx.g.value(off).data().to_vec();
            (grid_margin(&off, &refs, &layout, heads, points) >= GRID_MARGIN).then_some((store, attn, query, value, refs))
        })
        .unwrap();
    let extra = vec![Tensor::new(&[nq, d], query).unwrap(), Tensor::new(&[layout.total_len(), d], value).unwrap()];
    record(
        "deformable attention",
        param_check(&store, |_| true, extra, TOL_SAMPLING, |ctx, v| {
            let msv = MultiScaleValue {
                tokens: v[1],
                layout: layout.clone(),
            };
            attn.forward(ctx, v[0], &refs, &msv)
        }),
    )?;

    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, &mut rng, "m", 6, 2).unwrap();
    randomize(&mut store, &mut rng, 0.8);
    let extra = vec![rand_tensor(&mut rng, &[3, 6]), rand_tensor(&mut rng, &[5, 6])];
    // the key bias shifts every logit of a query equally, so softmax makes
    // its gradient exactly zero and a relative check only sees rounding noise
    let k_bias = mha.k.b;
    {
        let mut ctx = Ctx::new(&store, true);
        let q = ctx.g.constant(extra[0].clone());
        let kv = ctx.g.constant(extra[1].clone());
        let out = mha.forward(&mut ctx, q, kv, kv, None).map_err(|e| e.to_string())?;
        let w = ctx.g.constant(rand_tensor(&mut rng, &[3, 6]));
        let prod = ctx.g.mul(out, w).map_err(|e| e.to_string())?;
        let loss = ctx.g.sum(prod);
        let grads = ctx.g.backward(loss).map_err(|e| e.to_string())?;
        let kb = ctx.param_grads(&grads).into_iter().find(|(id, _)| *id == k_bias).map(|(_, g)| g);
        let largest = kb.unwrap_or_default().iter().fold(0.0f64, |m, x| m.max(x.abs()));
        ensure(largest < 1e-12, format!("key bias gradient {largest:.1e} should vanish"))?;
    }
    record(
        "plain attention",
        param_check(
            &store,
            |name| name != "m.k.b",
            extra,
            TOL_SMOOTH,
            |ctx, v| mha.forward(ctx, v[0], v[1], v[1], None),
        ),
    )?;

    // one encoder layer and one decoder layer of each cross-attention kind
    let glayout = grad_layout();
    let n = glayout.total_len();
    let (m, store, tokens) = (0..)
        .find_map(|seed| {
            let mut store = ParamStore::new();
            let m = Deer::new(tiny_model_config(), &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let mut r = ChaCha8Rng::seed_from_u64(seed + 100);
            randomize(&mut store, &mut r, 0.5);
            let tokens = rand_vec(&mut r, n * 8, 1.0);
            let mut ctx = Ctx::new(&store, false);
            let x = ctx.g.constant(Tensor::new(&[n, 8], tokens.clone()).unwrap());
            let pos = m.token_positions(&mut ctx, &glayout).unwrap();
            let layer = &m.encoder.layers[0];
            let h = layer.norm1.forward(&mut ctx, x).unwrap();
            let q = ctx.g.add(h, pos).unwrap();
            let off = layer.attn.offset.forward(&mut ctx, q).unwrap();
            let off = ctx.g.value(off).data().to_vec();
            (grid_margin(&off, &glayout.reference_points(), &glayout, 2, 1) >= GRID_MARGIN).then_some((m, store, tokens))
        })
        .unwrap();
    record(
        "encoder layer",
        param_check(
            &store,
            |name| name.starts_with("encoder.") || name == "level_embed",
            vec![Tensor::new(&[n, 8], tokens).unwrap()],
            TOL_SAMPLING,
            |ctx, v| {
                let input = MultiScaleValue {
                    tokens: v[0],
                    layout: glayout.clone(),
                };
                let pos = m.token_positions(ctx, &glayout)?;
                Ok(m.encoder.forward(ctx, &input, pos)?.tokens)
            },
        ),
    )?;

    let drefs = [[0.31, 0.62], [0.77, 0.18]];
    let seqs = vec![vec![BOS, 3, 4], vec![BOS, 4, 4]];
    let run = |m: &Deer, ctx: &mut Ctx<f64>, tokens: Var| -> deer_core::Result<(Var, Vec<f64>)> {
        let input = MultiScaleValue {
            tokens,
            layout: glayout.clone(),
        };
        let pos = m.token_positions(ctx, &glayout)?;
        let mem = m.decoder.memory(ctx, &input, pos)?;
        let (logits, trace) = m.decoder.forward(ctx, &mem, &drefs, &seqs)?;
        let off = match &trace.layers[0] {
            LayerTrace::Deformable(t) => ctx.g.value(t.offsets).data().to_vec(),
            LayerTrace::Plain(_) => Vec::new(),
        };
        Ok((logits, off))
    };
    let row_refs: Vec<[f64; 2]> = drefs.iter().flat_map(|r| [*r; 3]).collect();
    let (m, store, tokens) = (0..)
        .find_map(|seed| {
            let mut store = ParamStore::new();
            let m = Deer::new(tiny_model_config(), &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let mut r = ChaCha8Rng::seed_from_u64(seed + 200);
            randomize(&mut store, &mut r, 0.5);
            let tokens = rand_vec(&mut r, n * 8, 1.0);
            let mut ctx = Ctx::new(&store, false);
            let x = ctx.g.constant(Tensor::new(&[n, 8], tokens.clone()).unwrap());
            let (_, off) = run(&m, &mut ctx, x).unwrap();
            (grid_margin(&off, &row_refs, &glayout, 2, 1) >= GRID_MARGIN).then_some((m, store, tokens))
        })
        .unwrap();
    ensure(
        m.decoder.cross_kinds() == [CrossKind::Deformable, CrossKind::Plain],
        "decoder layers do not alternate",
    )?;
    record(
        "decoder layer",
        param_check(
            &store,
            |name| name.starts_with("decoder.") || name == "level_embed",
            vec![Tensor::new(&[n, 8], tokens).unwrap()],
            TOL_SAMPLING,
            |ctx, v| Ok(run(&m, ctx, v[0])?.0),
        ),
    )?;

    let c = det_case(7);
    let empty = ParamStore::<f64>::new();
    for (which, name) in [(0, "shrink loss"), (1, "binary loss"), (2, "threshold loss")] {
        let extra = vec![
            Tensor::new(&[1, c.h, c.w], c.logits.clone()).unwrap(),
            Tensor::new(&[1, c.h, c.w], c.thresh.clone()).unwrap(),
        ];
        record(
            name,
            param_check(&empty, |_| true, extra, TOL_SMOOTH, |ctx, v| {
                let prob = ctx.g.sigmoid(v[0]);
                let binary = LocationHead::binarize(ctx, prob, v[1], 50.0)?;
                let maps = ScoreMapVars {
                    prob_logits: v[0],
                    prob,
                    thresh: v[1],
                    binary,
                };
                let l = db_losses(ctx, &maps, &c.targets)?;
                Ok([l.0, l.1, l.2][which])
            }),
        )?;
    }
    let targets = vec![3, 6, 2, PAD];
    let logits = rand_tensor(&mut rng, &[4, 7]);
    record(
        "recognition loss",
        param_check(&empty, |_| true, vec![logits], TOL_SMOOTH, |ctx, v| recognition_loss(ctx, v[0], &targets)),
    )?;

    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 300.0, format!("took {secs:.0} s"))?;
    let (name, err, tol) = worst.iter().copied().max_by(|a, b| (a.1 / a.2).total_cmp(&(b.1 / b.2))).unwrap();
    Ok(format!("{} checks in {secs:.1} s, tightest {name} {err:.1e} (tol {tol:.0e})", worst.len()))
}

// ---------- criterion 2: deformable attention oracle ----------

fn linear_apply(x: &[f64], w: &[f64], b: &[f64], n_in: usize, n_out: usize) -> Vec<f64> {
    let rows = x.len() / n_in;
    let mut y = vec![0.0; rows * n_out];
    for r in 0..rows {
        for o in 0..n_out {
            y[r * n_out + o] = b[o] + (0..n_in).map(|i| x[r * n_in + i] * w[i * n_out + o]).sum::<f64>();
        }
    }
    y
}

fn naive_bilinear(grid: &dyn Fn(usize, usize) -> f64, h: usize, w: usize, x: f64, y: f64) -> f64 {
    let px = x * w as f64 - 0.5;
    let py = y * h as f64 - 0.5;
    let (x0, y0) = (px.floor(), py.floor());
    let (fx, fy) = (px - x0, py - y0);
    let mut acc = 0.0;
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let (xi, yi) = (x0 + dx, y0 + dy);
            if xi >= 0.0 && yi >= 0.0 && (xi as usize) < w && (yi as usize) < h {
                acc += wx * wy * grid(yi as usize, xi as usize);
            }
        }
    }
    acc
}

struct DeformCase {
    store: ParamStore<f64>,
    attn: DeformAttn,
    layout: LevelLayout,
    value: Vec<f64>,
    query: Vec<f64>,
    refs: Vec<[f64; 2]>,
    d: usize,
}

fn run_deform(c: &DeformCase) -> Vec<f64> {
    let mut ctx = Ctx::new(&c.store, false);
    let q = ctx.g.constant(Tensor::new(&[c.refs.len(), c.d], c.query.clone()).unwrap());
    let v = ctx.g.constant(Tensor::new(&[c.layout.total_len(), c.d], c.value.clone()).unwrap());
    let msv = MultiScaleValue {
        tokens: v,
        layout: c.layout.clone(),
    };
    let out = c.attn.forward(&mut ctx, q, &c.refs, &msv).unwrap();
    ctx.g.value(out).data().to_vec()
}

/// Deformable attention written loop by loop from its definition.
fn naive_deform(c: &DeformCase) -> Vec<f64> {
    let a = &c.attn;
    let d = c.d;
    let (hh, ll, kk) = (a.heads, a.levels, a.points);
    let dh = d / hh;
    let get = |id| c.store.get(id).data().to_vec();
    let v = linear_apply(&c.value, &get(a.value.w), &get(a.value.b), d, d);
    let off = linear_apply(&c.query, &get(a.offset.w), &get(a.offset.b), d, hh * ll * kk * 2);
    let logit = linear_apply(&c.query, &get(a.weight.w), &get(a.weight.b), d, hh * ll * kk);
    let nq = c.refs.len();
    let mut merged = vec![0.0; nq * d];
    for q in 0..nq {
        for h in 0..hh {
            let row = &logit[(q * hh + h) * ll * kk..(q * hh + h + 1) * ll * kk];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            for l in 0..ll {
                let (lh, lw) = c.layout.shapes[l];
                let start = c.layout.starts[l];
                for k in 0..kk {
                    let j = (h * ll + l) * kk + k;
                    let weight = (row[l * kk + k] - m).exp() / z;
                    let x = c.refs[q][0] + off[q * hh * ll * kk * 2 + j * 2] / lw as f64;
                    let y = c.refs[q][1] + off[q * hh * ll * kk * 2 + j * 2 + 1] / lh as f64;
                    for ch in 0..dh {
                        let col = h * dh + ch;
                        let grid = |yy: usize, xx: usize| v[(start + yy * lw + xx) * d + col];
                        merged[q * d + col] += weight * naive_bilinear(&grid, lh, lw, x, y);
                    }
                }
            }
        }
    }
    linear_apply(&merged, &get(a.out.w), &get(a.out.b), d, d)
}

fn random_deform_case(seed: u64) -> DeformCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = rng.random_range(1..=3);
    let d = heads * rng.random_range(1..=3);
    let levels = rng.random_range(1..=4);
    let points = rng.random_range(1..=4);
    let shapes: Vec<(usize, usize)> = (0..levels).map(|_| (rng.random_range(1..=6), rng.random_range(1..=6))).collect();
    let layout = LevelLayout::new(shapes);
    let mut store = ParamStore::new();
    let attn = DeformAttn::new(&mut store, &mut rng, "a", d, heads, levels, points).unwrap();
    randomize(&mut store, &mut rng, 1.0);
    let nq = rng.random_range(1..=4);
    DeformCase {
        value: rand_vec(&mut rng, layout.total_len() * d, 1.0),
        query: rand_vec(&mut rng, nq * d, 1.0),
        refs: (0..nq).map(|_| [rng.random_range(-0.1..1.1), rng.random_range(-0.1..1.1)]).collect(),
        store,
        attn,
        layout,
        d,
    }
}

fn criterion_2() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        let c = random_deform_case(seed);
        for (a, b) in run_deform(&c).iter().zip(naive_deform(&c)) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst < 1e-10, format!("oracle mismatch {worst:.2e}"))?;
    // one head, level and point; identity projections; zero offsets
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (h, w) = (4, 5);
    let map = rand_vec(&mut rng, h * w, 2.0);
    let refs: Vec<[f64; 2]> = (0..20).map(|_| [rng.random_range(-0.2..1.2), rng.random_range(-0.2..1.2)]).collect();
    let mut store = ParamStore::new();
    let attn = DeformAttn::new(&mut store, &mut rng, "a", 1, 1, 1, 1).unwrap();
    for (id, v) in [(attn.value.w, 1.0), (attn.value.b, 0.0), (attn.out.w, 1.0), (attn.out.b, 0.0)] {
        store.get_mut(id).data_mut().fill(v);
    }
    store.get_mut(attn.offset.b).data_mut().fill(0.0);
    let c = DeformCase {
        store,
        attn,
        layout: LevelLayout::new(vec![(h, w)]),
        value: map.clone(),
        query: vec![0.3; refs.len()],
        refs: refs.clone(),
        d: 1,
    };
    let mut g = Graph::new();
    let v = g.constant(Tensor::new(&[h, w, 1], map).unwrap());
    let p = g.constant(Tensor::new(&[refs.len(), 2], refs.iter().flat_map(|r| [r[0], r[1]]).collect()).unwrap());
    let s = g.bilinear_sample(v, p).unwrap();
    ensure(run_deform(&c) == g.value(s).data(), "identity case differs from bilinear sampling")?;
    Ok(format!("50 configs, max deviation {worst:.1e}; identity case equals bilinear sampling"))
}

// ---------- criterion 3: geometry ----------

fn flood_components(m: &Mask) -> BTreeSet<BTreeSet<(usize, usize)>> {
    let mut seen = vec![false; m.h * m.w];
    let mut out = BTreeSet::new();
    for y in 0..m.h {
        for x in 0..m.w {
            if !m.get(x, y) || seen[y * m.w + x] {
                continue;
            }
            let mut comp = BTreeSet::new();
            let mut queue = VecDeque::from([(x, y)]);
            seen[y * m.w + x] = true;
            while let Some((cx, cy)) = queue.pop_front() {
                comp.insert((cx, cy));
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nx, ny) = (cx as i64 + dx, cy as i64 + dy);
                        if m.at(nx, ny) && !seen[ny as usize * m.w + nx as usize] {
                            seen[ny as usize * m.w + nx as usize] = true;
                            queue.push_back((nx as usize, ny as usize));
                        }
                    }
                }
            }
            out.insert(comp);
        }
    }
    out
}

fn ks_p_value(d: f64, n: usize) -> f64 {
    let t = (n as f64).sqrt() * d;
    let p: f64 = (1..100)
        .map(|k| {
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            sign * (-2.0 * (k * k) as f64 * t * t).exp()
        })
        .sum();
    (2.0 * p).clamp(0.0, 1.0)
}

/// KS statistic against Uniform(-1, 1).
fn ks_uniform(mut samples: Vec<f64>) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = ((x + 1.0) / 2.0).clamp(0.0, 1.0);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

fn random_convex(rng: &mut ChaCha8Rng) -> Polygon {
    let n = rng.random_range(3..9);
    let mut angles: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    angles.sort_by(f64::total_cmp);
    let (cx, cy, r) = (rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(1.0..15.0));
    Polygon::new(angles.iter().map(|a| [cx + r * a.cos(), cy + r * a.sin()]).collect()).unwrap()
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..100 {
        let density = [0.2, 0.4, 0.5, 0.6][i % 4];
        let mut m = Mask::new(32, 32);
        for y in 0..32 {
            for x in 0..32 {
                m.set(x, y, rng.random_bool(density));
            }
        }
        let got: BTreeSet<BTreeSet<(usize, usize)>> =
            connected_components(&m).iter().map(|c| c.iter().copied().collect()).collect();
        ensure(got == flood_components(&m), format!("components differ from flood fill on mask {i}"))?;
    }
    let square = Polygon::rect(0.0, 0.0, 1.0, 1.0).unwrap();
    let d = dilation_offset(&square, 1.5).map_err(|e| e.to_string())?;
    ensure(d == 0.375, format!("unit-square dilation {d}"))?;
    for _ in 0..50 {
        let p = loop {
            let p = random_convex(&mut rng);
            if p.area() > 1e-3 {
                break p;
            }
        };
        let s = rng.random_range(0.1..10.0);
        let a = dilation_offset(&p, 1.5).unwrap();
        let b = dilation_offset(&p.scale(s, s).unwrap(), 1.5).unwrap();
        ensure((b - s * a).abs() <= 1e-12 * b.abs().max(1.0), "dilation is not scale covariant")?;
    }
    let area = offset_polygon(&square, 0.375).map_err(|e| e.to_string())?.area();
    ensure((area - 3.0625).abs() < 1e-9, format!("offset area {area}"))?;

    let poly = Polygon::new(vec![[10.0, 10.0], [40.0, 16.0], [38.0, 26.0], [8.0, 20.0]]).unwrap();
    let c = centroid(&poly).unwrap();
    let (tl, tr, bl) = reference_corners(&poly).unwrap();
    let side = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).hypot(a[1] - b[1]);
    let half = side(tl, tr).min(side(tl, bl)) / 2.0;
    let n = 10_000;
    let (mut xs, mut ys) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let mut prng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..n {
        let p = perturb_reference(&poly, &mut prng).unwrap();
        let (ex, ey) = ((p[0] - c[0]) / half, (p[1] - c[1]) / half);
        ensure(ex.abs() <= 1.0 && ey.abs() <= 1.0, "perturbed point outside its bounds")?;
        xs.push(ex);
        ys.push(ey);
    }
    let px = ks_p_value(ks_uniform(xs), n);
    let py = ks_p_value(ks_uniform(ys), n);
    ensure(px > 0.01 && py > 0.01, format!("KS p-values {px:.3} {py:.3}"))?;
    Ok(format!("100 masks match flood fill; D = 0.375; area 3.0625; KS p = {px:.2}, {py:.2}"))
}

// ---------- criterion 4: loss and optimiser identities ----------

fn scalar_total(rec: f64, det: (f64, f64, f64), w: &LossWeights) -> f64 {
    let store = ParamStore::<f64>::new();
    let mut ctx = Ctx::new(&store, false);
    let mut c = |v: f64| ctx.g.constant(Tensor::scalar(v));
    let (r, d) = (c(rec), (c(det.0), c(det.1), c(det.2)));
    let t = total_loss(&mut ctx, r, Some(d), w).unwrap();
    ctx.g.value(t).item()
}

fn criterion_4() -> Outcome {
    let det = (0.37, 0.81, 0.093);
    let w = |s, b, t, on| LossWeights {
        lambda_s: s,
        lambda_b: b,
        lambda_t: t,
        detection_supervision: on,
    };
    ensure(scalar_total(1.25, det, &w(0.0, 0.0, 0.0, true)) == 1.25, "zero lambdas keep detection terms")?;
    ensure(scalar_total(0.0, det, &w(1.0, 0.0, 0.0, true)) == det.0, "lambda_s isolation")?;
    ensure(scalar_total(0.0, det, &w(0.0, 1.0, 0.0, true)) == det.1, "lambda_b isolation")?;
    ensure(scalar_total(0.0, det, &w(0.0, 0.0, 1.0, true)) == det.2, "lambda_t isolation")?;
    ensure(scalar_total(1.25, det, &w(1.0, 1.0, 10.0, false)) == 1.25, "supervision off keeps detection terms")?;

    let s = Schedule {
        base: 1e-3,
        min: 1e-6,
        warmup: 200,
        total: 5000,
    };
    ensure(lr_at_step(0, &s) == 0.0, "lr at step 0")?;
    ensure(lr_at_step(200, &s) == 1e-3, "lr at end of warmup")?;
    ensure(lr_at_step(5000, &s) == 1e-6, "lr at total")?;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", Tensor::new(&[3, 2], rand_vec(&mut rng, 6, 1.0)).unwrap());
    let mut adam = Adam::new(&store, 0.01);
    let mut p = store.get(a).data().to_vec();
    let (mut m, mut v) = (vec![0.0; 6], vec![0.0; 6]);
    let mut worst: f64 = 0.0;
    for t in 1..=10 {
        let g = rand_vec(&mut rng, 6, 2.0);
        let lr = 1e-2 * t as f64;
        adam.step(&mut store, &[(a, g.clone())], lr);
        for i in 0..6 {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
            let mh = m[i] / (1.0 - 0.9f64.powi(t));
            let vh = v[i] / (1.0 - 0.999f64.powi(t));
            p[i] -= lr * (mh / (vh.sqrt() + 1e-8) + 0.01 * p[i]);
            worst = worst.max((store.get(a).data()[i] - p[i]).abs());
        }
    }
    ensure(worst < 1e-10, format!("Adam deviates by {worst:.2e}"))?;

    let vsize = 13;
    let store = ParamStore::<f64>::new();
    let mut ctx = Ctx::new(&store, false);
    let logits = ctx.g.constant(Tensor::new(&[4, vsize], vec![0.4; 4 * vsize]).unwrap());
    let l = recognition_loss(&mut ctx, logits, &[3, 7, 2, PAD]).unwrap();
    let err = (ctx.g.value(l).item() - (vsize as f64).ln()).abs();
    ensure(err < 1e-10, format!("uniform logits miss ln V by {err:.2e}"))?;
    Ok(format!("lambda and lr identities exact; Adam within {worst:.1e}; ln V within {err:.1e}"))
}

// ---------- shared run helpers ----------

fn acceptance_dir() -> PathBuf {
    let target = std::env::var_os("CARGO_TARGET_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target"));
    target.join("acceptance")
}

/// A finished default-config run at `target/acceptance/<name>`, trained
/// now unless a run with the same resolved config is cached.
fn cached_run(name: &str, extra: &[&str], cfg: &RunConfig) -> Result<PathBuf, String> {
    let dir = acceptance_dir().join(name);
    let ckpt = dir.join("checkpoints").join(FINAL_CHECKPOINT);
    let fresh = fs::read_to_string(dir.join(CONFIG_FILE)).is_ok_and(|c| c == cfg.render()) && ckpt.exists();
    if !fresh {
        eprintln!("training {name} into {} (long)", dir.display());
        let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).to_string();
        let status = Command::new(env!("CARGO_BIN_EXE_deer"))
            .args(["--threads", &threads, "train", "--out"])
            .arg(&dir)
            .args(["--log-every", "500"])
            .args(extra)
            .status()
            .map_err(|e| e.to_string())?;
        ensure(status.success(), format!("training {name} failed"))?;
    }
    Ok(ckpt)
}

fn default_run() -> Result<PathBuf, String> {
    cached_run("default", &[], &RunConfig::default())
}

fn no_perturb_run() -> Result<PathBuf, String> {
    let mut cfg = RunConfig::default();
    cfg.train.perturb = false;
    cached_run("no_perturb", &["--perturb", "false"], &cfg)
}

fn load(ckpt: &Path) -> Result<(RunConfig, Deer, ParamStore<f32>), String> {
    let dir = ckpt.parent().and_then(Path::parent).ok_or("bad checkpoint path")?;
    let cfg = RunConfig::load(&dir.join(CONFIG_FILE)).map_err(|e| e.to_string())?;
    let (model, store) = load_model(&cfg, ckpt).map_err(|e| e.to_string())?;
    Ok((cfg, model, store))
}

// ---------- criterion 5: toy training ----------

const DETECTION_F_MIN: f64 = 0.85;
const E2E_F_MIN: f64 = 0.70;

fn criterion_5() -> Outcome {
    let ckpt = default_run()?;
    let (cfg, model, store) = load(&ckpt)?;
    let data = synthetic_dataset(&cfg).map_err(|e| e.to_string())?;
    let ecfg = eval_config(&cfg, &EvalArgs::default()).map_err(|e| e.to_string())?;
    let r = evaluate(&model, &store, &data, &ecfg).map_err(|e| e.to_string())?;
    let det = r.detection.ok_or("no detection section")?.f_measure();
    let e2e = r.e2e.f_measure();
    let msg = format!("{} images: detection F {det:.3} (min {DETECTION_F_MIN}), E2E F {e2e:.3} (min {E2E_F_MIN})", r.images);
    ensure(r.images == 200 && det >= DETECTION_F_MIN && e2e >= E2E_F_MIN, msg.clone())?;
    Ok(msg)
}

// ---------- criterion 6: perturbation ablation ----------

fn beta_drop(ckpt: &Path) -> Result<(f64, f64), String> {
    let (cfg, model, store) = load(ckpt)?;
    let data = synthetic_dataset(&cfg).map_err(|e| e.to_string())?;
    let ecfg = eval_config(&cfg, &EvalArgs::default()).map_err(|e| e.to_string())?;
    let rows = run_beta_ablation(&model, &store, &data, &DEFAULT_BETAS, &ecfg).map_err(|e| e.to_string())?;
    let f = |b: f64| rows.iter().find(|r| r.0 == b).map(|r| r.1.e2e.f_measure()).unwrap();
    Ok((f(0.0), f(0.3)))
}

fn criterion_6() -> Outcome {
    let (with0, with3) = beta_drop(&default_run()?)?;
    let (without0, without3) = beta_drop(&no_perturb_run()?)?;
    let (dw, dn) = (with3 - with0, without3 - without0);
    let msg = format!(
        "E2E F beta 0 -> 0.3: with perturbation {with0:.3} -> {with3:.3} ({dw:+.3}), without {without0:.3} -> {without3:.3} ({dn:+.3})"
    );
    ensure(dw > dn, msg.clone())?;
    Ok(msg)
}

// ---------- criteria 7 and 8: harness checks on short runs ----------

fn short_run(dir: &Path, name: &str, detection: bool) -> Result<PathBuf, String> {
    let out = dir.join(name);
    cmd_train(&TrainArgs {
        config: ConfigArgs::default(),
        out: out.clone(),
        steps: Some(10),
        detection_supervision: Some(detection),
        ..TrainArgs::default()
    })
    .map_err(|e| e.to_string())?;
    Ok(out)
}

fn short_eval(run: &Path, gt_points: bool) -> Result<String, String> {
    Ok(cmd_eval(&EvalArgs {
        config: ConfigArgs {
            config: None,
            sets: vec!["eval.dataset_size=20".into()],
        },
        checkpoint: run.join("checkpoints").join(FINAL_CHECKPOINT),
        gt_points,
        ..EvalArgs::default()
    })
    .map_err(|e| e.to_string())?
    .report)
}

fn criterion_7() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = short_run(dir.path(), "nodet", false)?;
    let (cfg, _, trained) = load(&run.join("checkpoints").join(FINAL_CHECKPOINT))?;
    let mut init = ParamStore::<f32>::new();
    Deer::new(cfg.model.clone(), &mut init, &mut ChaCha8Rng::seed_from_u64(cfg.train.seed)).map_err(|e| e.to_string())?;
    let (a, b) = (snapshot(&init, HEAD_PREFIX), snapshot(&trained, HEAD_PREFIX));
    ensure(!a.is_empty() && a.len() == b.len(), "no location-head parameters")?;
    ensure(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()), "location head changed")?;
    ensure(snapshot(&init, "decoder.") != snapshot(&trained, "decoder."), "decoder did not train")?;
    let report = short_eval(&run, true)?;
    let valid = report.contains("mode: gt_points") && report.contains("[e2e]") && report.contains("f_measure:");
    ensure(valid, "gt-points report is malformed")?;
    Ok(format!("10 steps; {} head scalars bit-identical; gt-points report written", a.len()))
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = short_run(dir.path(), "a", true)?;
    let b = short_run(dir.path(), "b", true)?;
    let ma = fs::read(a.join(METRICS_FILE)).map_err(|e| e.to_string())?;
    let mb = fs::read(b.join(METRICS_FILE)).map_err(|e| e.to_string())?;
    ensure(ma == mb, "metrics.tsv differs between identical runs")?;
    let (ea, eb) = (short_eval(&a, false)?, short_eval(&a, false)?);
    ensure(ea == eb, "evaluation report differs between runs")?;
    ensure(ea == short_eval(&b, false)?, "evaluation differs across identical checkpoints")?;
    Ok(format!("metrics.tsv ({} bytes) and eval report byte-identical", ma.len()))
}

// ---------- criterion 9: text protocol ----------

fn criterion_9() -> Outcome {
    for (word, want) in [("hello!", ("hello", false)), ("(CAT).", ("CAT", false)), ("##", ("", true)), ("ab.", ("ab", true))] {
        let got = ic15_filter(word);
        ensure(got == (want.0.to_string(), want.1), format!("ic15_filter({word:?}) = {got:?}"))?;
    }
    let lexicon: Vec<String> = ["CAT", "DOG", "EEL"].iter().map(|s| s.to_string()).collect();
    let fixed = lexicon_correct("CVT", &lexicon);
    ensure(fixed == Some("CAT"), format!("CVT corrected to {fixed:?}"))?;
    let d = edit_distance("kitten", "sitting");
    ensure(d == 3, format!("edit distance {d}"))?;
    Ok("IC15 filter examples, CVT -> CAT, kitten/sitting = 3".into())
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient checks", criterion_1),
        ("deformable attention oracle", criterion_2),
        ("geometry oracles", criterion_3),
        ("loss and optimiser identities", criterion_4),
        ("toy end-to-end training", criterion_5),
        ("perturbation ablation", criterion_6),
        ("detection-supervision ablation", criterion_7),
        ("determinism", criterion_8),
        ("text protocol", criterion_9),
    ];
    let only: Option<Vec<usize>> = std::env::var("DEER_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("criterion {id} PASS {name}: {msg} [{secs:.0} s]"),
            Err(msg) => {
                failed += 1;
                println!("criterion {id} FAIL {name}: {msg} [{secs:.0} s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
