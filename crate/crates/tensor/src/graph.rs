//! The recording tape and every differentiable operator.

use crate::error::{shape_err, Result, TensorError};
use crate::float::Float;
use crate::kernels::{self, bilinear_weights, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Level layout of a multi-scale value for [`Graph::deform_sample`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeformLayout {
    pub heads: usize,
    pub points: usize,
    /// `(height, width)` per level.
    pub level_shapes: Vec<(usize, usize)>,
    /// First token row of each level.
    pub level_starts: Vec<usize>,
}

impl DeformLayout {
    pub fn levels(&self) -> usize {
        self.level_shapes.len()
    }

    /// Samples per query per head.
    pub fn samples_per_head(&self) -> usize {
        self.levels() * self.points
    }

    pub fn total_tokens(&self) -> usize {
        self.level_shapes.iter().map(|(h, w)| h * w).sum()
    }

    /// Normalised sampling location of `(query ref, head, level, point)` given
    /// the raw offset row of one query (`heads * levels * points * 2` values).
    pub fn location<F: Float>(
        &self,
        reference: [F; 2],
        offsets: &[F],
        head: usize,
        level: usize,
        point: usize,
    ) -> [F; 2] {
        let (h, w) = self.level_shapes[level];
        let j = ((head * self.levels() + level) * self.points + point) * 2;
        [
            reference[0] + offsets[j] / F::from_usize(w).unwrap(),
            reference[1] + offsets[j + 1] / F::from_usize(h).unwrap(),
        ]
    }
}

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, F),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        shared_b: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>),
    SliceRows(Var, usize),
    Softmax(Var, usize),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Exp(Var),
    Log(Var),
    BceWithLogits(Var, Vec<F>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: usize,
        count: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<F>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Embedding(Var, Vec<usize>),
    Bilinear(Var, Var),
    Deform {
        value: Var,
        offsets: Var,
        weights: Var,
        layout: DeformLayout,
        refs: Vec<[F; 2]>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Append-only tape of tensor operations.
///
/// Nodes are only ever appended, so every node's inputs precede it and the
/// reverse of insertion order is a valid reverse topological order.
pub struct Graph<F: Float> {
    nodes: Vec<Node<F>>,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<F> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Float> Grads<F> {
    pub fn data(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn get(&self, v: Var) -> Option<Tensor<F>> {
        self.data(v)
            .map(|d| Tensor::new(&self.shapes[v.0], d.to_vec()).expect("grad shape"))
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(shape_err(op, a, b))
    }
}

fn permute_buf<F: Float>(data: &[F], shape: &[usize], axes: &[usize]) -> (Vec<F>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Vec<F> {
        self.value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    fn unary(&mut self, a: Var, op: Op<F>, f: impl Fn(F) -> F) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(t.shape(), data).unwrap();
        self.push(out, op, &[a])
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op<F>, f: impl Fn(F, F) -> F) -> Result<Var> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let data = self.zip_map(a, b, f);
        let out = Tensor::new(self.shape(a), data)?;
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// `x[..., n] + bias[n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&1);
        if self.shape(bias) != [n] {
            return Err(shape_err("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let t = self.value(x);
        let data = t
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(&b).map(|(&v, &c)| v + c))
            .collect();
        let out = Tensor::new(t.shape(), data)?;
        Ok(self.push(out, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > F::zero() { x } else { F::zero() })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |x| F::one() / (F::one() + (-x).exp()))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), |x| x.abs())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), |x| x.ln())
    }

    /// Elementwise binary cross-entropy of `sigmoid(logits)` against fixed
    /// targets, computed in the overflow-safe form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[F]) -> Result<Var> {
        if self.value(logits).numel() != targets.len() {
            return Err(shape_err("bce_with_logits", self.shape(logits), &[targets.len()]));
        }
        let t = self.value(logits);
        let data = t
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(F::zero()) - z * y + (F::one() + (-z.abs()).exp()).ln())
            .collect();
        let out = Tensor::new(t.shape(), data)?;
        Ok(self.push(out, Op::BceWithLogits(logits, targets.to_vec()), &[logits]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = F::from_usize(t.numel().max(1)).unwrap();
        let s = t.data().iter().copied().sum::<F>() / n;
        self.push(Tensor::scalar(s), Op::MeanAll(a), &[a])
    }

    /// Matrix product over the last two axes. Leading axes of `a` are batch
    /// axes; `b` is either rank 2 (shared across the batch) or carries the
    /// same batch axes. With `trans_b`, `b` is read as `[.., n, k]`.
    pub fn matmul_ext(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        let shared_b = sb.len() == 2;
        if k != kb || (!shared_b && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![F::zero(); batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..batch {
                let bs = if shared_b { 0 } else { i * k * n };
                F::gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[bs..bs + k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    F::zero(),
                );
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let op = Op::MatMul {
            a,
            b,
            trans_b,
            batch,
            shared_b,
            m,
            k,
            n,
        };
        Ok(self.push(Tensor::new(&shape, out)?, op, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(shape_err("permute", &shape, axes));
        }
        let (data, out_shape) = permute_buf(self.value(a).data(), &shape, axes);
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::Permute(a, axes.to_vec()), &[a]))
    }

    /// Swaps the two axes of a rank-2 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.permute(a, &[1, 0])
    }

    /// Concatenates along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Usage("concat of zero tensors".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(shape_err("concat", self.shape(*first), s));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat(parts.to_vec()), parts))
    }

    /// Rows `start .. start + len` along axis 0.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.is_empty() || start + len > s[0] {
            return Err(shape_err("slice_rows", &s, &[start, len]));
        }
        let row: usize = s[1..].iter().product();
        let data = self.value(a).data()[start * row..(start + len) * row].to_vec();
        let mut shape = s.clone();
        shape[0] = len;
        Ok(self.push(Tensor::new(&shape, data)?, Op::SliceRows(a, start), &[a]))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(TensorError::Usage(format!("softmax axis {axis} out of range for {s:?}")));
        }
        let (outer, n, inner) = kernels::split_axis(&s, axis);
        let y = kernels::softmax_forward(self.value(a).data(), outer, n, inner);
        Ok(self.push(Tensor::new(&s, y)?, Op::Softmax(a, axis), &[a]))
    }

    /// Mean softmax cross-entropy of `logits[N, V]` over rows whose target is
    /// not `ignore`. Zero when every row is ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(shape_err("cross_entropy", &s, &[targets.len()]));
        }
        let v = s[1];
        let x = self.value(logits).data();
        let mut total = F::zero();
        let mut count = 0;
        for (row, &t) in x.chunks(v).zip(targets) {
            if t == ignore {
                continue;
            }
            if t >= v {
                return Err(TensorError::Usage(format!("target {t} outside vocabulary of {v}")));
            }
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<F>().ln();
            total += lse - row[t];
            count += 1;
        }
        let loss = if count == 0 {
            F::zero()
        } else {
            total / F::from_usize(count).unwrap()
        };
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            ignore,
            count,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Layer normalisation over the last axis with per-feature affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s.last().ok_or_else(|| shape_err("layer_norm", &s, &[]))?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(shape_err("layer_norm", &s, self.shape(gamma)));
        }
        let (xhat, rstd) = normalize_groups(self.value(x).data(), n, eps);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let y = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| v * g[i % n] + b[i % n])
            .collect();
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        Ok(self.push(Tensor::new(&s, y)?, op, &[x, gamma, beta]))
    }

    /// Group normalisation of a channel-first tensor `[C, ...]`: statistics are
    /// taken per group of `C / groups` channels over all trailing positions.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(shape_err("group_norm", &s, &[groups]));
        }
        let c = s[0];
        if groups == 0 || c % groups != 0 {
            return Err(TensorError::Config(format!(
                "group_norm: {c} channels not divisible into {groups} groups"
            )));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("group_norm", &s, self.shape(gamma)));
        }
        let spatial: usize = s[1..].iter().product();
        let group_len = c / groups * spatial;
        let (xhat, rstd) = normalize_groups(self.value(x).data(), group_len, eps);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let y = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| v * g[i / spatial] + b[i / spatial])
            .collect();
        let op = Op::GroupNorm {
            x,
            gamma,
            beta,
            groups,
            xhat,
            rstd,
        };
        Ok(self.push(Tensor::new(&s, y)?, op, &[x, gamma, beta]))
    }

    /// 2-D convolution of `x[Cin, H, W]` with `w[Cout, Cin, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || stride == 0 {
            return Err(shape_err("conv2d", &sx, &sw));
        }
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        if sx[1] + 2 * pad < kh || sx[2] + 2 * pad < kw {
            return Err(shape_err("conv2d", &sx, &sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err("conv2d bias", &sw, self.shape(b)));
            }
        }
        let geom = ConvGeom {
            channels: sx[0],
            h: sx[1],
            w: sx[2],
            kh,
            kw,
            stride,
            pad,
            oh: (sx[1] + 2 * pad - kh) / stride + 1,
            ow: (sx[2] + 2 * pad - kw) / stride + 1,
        };
        let cols = geom.im2col(self.value(x).data());
        let ck = sx[0] * kh * kw;
        let p = geom.oh * geom.ow;
        let mut out = vec![F::zero(); cout * p];
        F::gemm(cout, ck, p, self.value(w).data(), false, &cols, false, &mut out, F::zero());
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), p);
        }
        let t = Tensor::new(&[cout, geom.oh, geom.ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(t, Op::Conv2d { x, w, b, geom, cols }, &inputs))
    }

    /// Transposed convolution of `x[Cin, H, W]` with `w[Cin, Cout, kh, kw]`;
    /// output side is `(H - 1) * stride - 2 * pad + kh`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 4 || sw[0] != sx[0] || stride == 0 || sx[1] == 0 || sx[2] == 0 {
            return Err(shape_err("conv_transpose2d", &sx, &sw));
        }
        let (cin, cout, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        let oh = ((sx[1] - 1) * stride + kh)
            .checked_sub(2 * pad)
            .ok_or_else(|| shape_err("conv_transpose2d", &sx, &sw))?;
        let ow = ((sx[2] - 1) * stride + kw)
            .checked_sub(2 * pad)
            .ok_or_else(|| shape_err("conv_transpose2d", &sx, &sw))?;
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err("conv_transpose2d bias", &sw, self.shape(b)));
            }
        }
        let geom = ConvGeom {
            channels: cout,
            h: oh,
            w: ow,
            kh,
            kw,
            stride,
            pad,
            oh: sx[1],
            ow: sx[2],
        };
        let ck = cout * kh * kw;
        let hw = sx[1] * sx[2];
        let mut cols = vec![F::zero(); ck * hw];
        F::gemm(ck, cin, hw, self.value(w).data(), true, self.value(x).data(), false, &mut cols, F::zero());
        let mut out = geom.col2im(&cols);
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), oh * ow);
        }
        let t = Tensor::new(&[cout, oh, ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(t, Op::ConvTranspose2d { x, w, b, geom }, &inputs))
    }

    /// Rows of `table[V, d]` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(shape_err("embedding", &s, &[ids.len()]));
        }
        let d = s[1];
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= s[0] {
                return Err(TensorError::Usage(format!("embedding id {id} outside table of {} rows", s[0])));
            }
            data.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        Ok(self.push(Tensor::new(&[ids.len(), d], data)?, Op::Embedding(table, ids.to_vec()), &[table]))
    }

    /// Bilinear lookup of `value[h, w, d]` at normalised `points[n, 2]`
    /// (`x, y` order), zero outside the map.
    pub fn bilinear_sample(&mut self, value: Var, points: Var) -> Result<Var> {
        let sv = self.shape(value).to_vec();
        let sp = self.shape(points).to_vec();
        if sv.len() != 3 || sp.len() != 2 || sp[1] != 2 {
            return Err(shape_err("bilinear_sample", &sv, &sp));
        }
        let (h, w, d) = (sv[0], sv[1], sv[2]);
        let mut out = vec![F::zero(); sp[0] * d];
        {
            let v = self.value(value).data();
            let p = self.value(points).data();
            for (i, o) in out.chunks_mut(d.max(1)).enumerate().take(sp[0]) {
                kernels::bilinear_sample_into(v, d, 0, h, w, 0, p[2 * i], p[2 * i + 1], F::one(), o);
            }
        }
        Ok(self.push(Tensor::new(&[sp[0], d], out)?, Op::Bilinear(value, points), &[value, points]))
    }

    /// Multi-scale deformable sampling.
    ///
    /// `value[Lv, D]` holds the (already projected) tokens of every level,
    /// `D = heads * head_dim`. For each query `q`, head `h`, level `l` and
    /// point `k`, the location `refs[q] + offset / (w_l, h_l)` is sampled from
    /// head `h`'s channel slice of level `l` and accumulated with weight
    /// `weights[q, (h * L + l) * K + k]`. Output is `[Q, D]`.
    pub fn deform_sample(
        &mut self,
        value: Var,
        offsets: Var,
        weights: Var,
        refs: &[[F; 2]],
        layout: &DeformLayout,
    ) -> Result<Var> {
        let sv = self.shape(value).to_vec();
        let q = refs.len();
        let hlk = layout.heads * layout.samples_per_head();
        if sv.len() != 2
            || sv[0] != layout.total_tokens()
            || layout.heads == 0
            || sv[1] % layout.heads != 0
            || layout.level_starts.len() != layout.levels()
        {
            return Err(shape_err("deform_sample value", &sv, &[layout.total_tokens()]));
        }
        if self.shape(offsets) != [q, hlk * 2] {
            return Err(shape_err("deform_sample offsets", self.shape(offsets), &[q, hlk * 2]));
        }
        if self.shape(weights) != [q, hlk] {
            return Err(shape_err("deform_sample weights", self.shape(weights), &[q, hlk]));
        }
        let d = sv[1];
        let dh = d / layout.heads;
        let mut out = vec![F::zero(); q * d];
        {
            let v = self.value(value).data();
            let off = self.value(offsets).data();
            let wts = self.value(weights).data();
            for (qi, r) in refs.iter().enumerate() {
                let off_q = &off[qi * hlk * 2..(qi + 1) * hlk * 2];
                for h in 0..layout.heads {
                    let o = &mut out[qi * d + h * dh..qi * d + (h + 1) * dh];
                    for (l, &(lh, lw)) in layout.level_shapes.iter().enumerate() {
                        for k in 0..layout.points {
                            let a = wts[qi * hlk + (h * layout.levels() + l) * layout.points + k];
                            let [px, py] = layout.location(*r, off_q, h, l, k);
                            kernels::bilinear_sample_into(v, d, layout.level_starts[l], lh, lw, h * dh, px, py, a, o);
                        }
                    }
                }
            }
        }
        let op = Op::Deform {
            value,
            offsets,
            weights,
            layout: layout.clone(),
            refs: refs.to_vec(),
        };
        Ok(self.push(Tensor::new(&[q, d], out)?, op, &[value, offsets, weights]))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<F>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.backward_node(i, &g, &mut grads);
            }
            // only leaf gradients are kept
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Grads { grads, shapes })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<F>>], v: Var) -> Option<&'a mut Vec<F>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); n]))
    }

    fn accumulate(&self, grads: &mut [Option<Vec<F>>], v: Var, f: impl Fn(usize) -> F) {
        if let Some(buf) = self.slot(grads, v) {
            for (i, x) in buf.iter_mut().enumerate() {
                *x += f(i);
            }
        }
    }

    fn backward_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |j| g[j]);
                self.accumulate(grads, *b, |j| g[j]);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |j| g[j]);
                self.accumulate(grads, *b, |j| -g[j]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.accumulate(grads, *a, |j| g[j] * bv[j]);
                self.accumulate(grads, *b, |j| g[j] * av[j]);
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.accumulate(grads, *a, |j| g[j] / bv[j]);
                self.accumulate(grads, *b, |j| -g[j] * av[j] / (bv[j] * bv[j]));
            }
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, |j| g[j]);
                if let Some(buf) = self.slot(grads, *bias) {
                    let n = buf.len();
                    for row in g.chunks(n) {
                        for (o, &v) in buf.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, |j| g[j] * *s),
            Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                shared_b,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (val(*a), val(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for bi in 0..*batch {
                        let bs = if *shared_b { 0 } else { bi * k * n };
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        // dA = dC * op(B)^T
                        F::gemm(m, n, k, gc, false, &bv[bs..bs + k * n], !*trans_b, &mut ga[bi * m * k..(bi + 1) * m * k], F::one());
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for bi in 0..*batch {
                        let bs = if *shared_b { 0 } else { bi * k * n };
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        let ab = &av[bi * m * k..(bi + 1) * m * k];
                        if *trans_b {
                            F::gemm(n, m, k, gc, true, ab, false, &mut gb[bs..bs + k * n], F::one());
                        } else {
                            F::gemm(k, m, n, ab, true, gc, false, &mut gb[bs..bs + k * n], F::one());
                        }
                    }
                }
            }
            Op::Reshape(a) => self.accumulate(grads, *a, |j| g[j]),
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                let (back, _) = permute_buf(g, node.value.shape(), &inv);
                self.accumulate(grads, *a, |j| back[j]);
            }
            Op::Concat(parts) => {
                let mut at = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.numel();
                    self.accumulate(grads, p, |j| g[at + j]);
                    at += len;
                }
            }
            Op::SliceRows(a, start) => {
                let row = g.len() / node.value.shape()[0].max(1);
                let off = start * row;
                if let Some(buf) = self.slot(grads, *a) {
                    for (o, &v) in buf[off..off + g.len()].iter_mut().zip(g) {
                        *o += v;
                    }
                }
            }
            Op::Softmax(a, axis) => {
                let (outer, n, inner) = kernels::split_axis(node.value.shape(), *axis);
                let mut dx = vec![F::zero(); y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + ii;
                        let dot: F = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, |j| dx[j]);
            }
            Op::Relu(a) => {
                let av = val(*a);
                self.accumulate(grads, *a, |j| if av[j] > F::zero() { g[j] } else { F::zero() });
            }
            Op::Sigmoid(a) => self.accumulate(grads, *a, |j| g[j] * y[j] * (F::one() - y[j])),
            Op::Abs(a) => {
                let av = val(*a);
                self.accumulate(grads, *a, |j| {
                    if av[j] > F::zero() {
                        g[j]
                    } else if av[j] < F::zero() {
                        -g[j]
                    } else {
                        F::zero()
                    }
                });
            }
            Op::Exp(a) => self.accumulate(grads, *a, |j| g[j] * y[j]),
            Op::Log(a) => {
                let av = val(*a);
                self.accumulate(grads, *a, |j| g[j] / av[j]);
            }
            Op::BceWithLogits(z, t) => {
                let zv = val(*z);
                self.accumulate(grads, *z, |j| g[j] * (F::one() / (F::one() + (-zv[j]).exp()) - t[j]));
            }
            Op::SumAll(a) => self.accumulate(grads, *a, |_| g[0]),
            Op::MeanAll(a) => {
                let n = F::from_usize(self.nodes[a.0].value.numel().max(1)).unwrap();
                self.accumulate(grads, *a, |_| g[0] / n);
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let x = val(*logits);
                let v = x.len() / targets.len().max(1);
                let scale = g[0] / F::from_usize(*count).unwrap();
                if let Some(buf) = self.slot(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore {
                            continue;
                        }
                        let row = &x[r * v..(r + 1) * v];
                        let m = row.iter().copied().fold(F::neg_infinity(), F::max);
                        let s: F = row.iter().map(|&z| (z - m).exp()).sum();
                        for (c, o) in buf[r * v..(r + 1) * v].iter_mut().enumerate() {
                            let p = (row[c] - m).exp() / s;
                            let onehot = if c == t { F::one() } else { F::zero() };
                            *o += scale * (p - onehot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = val(*gamma).len();
                self.norm_backward(grads, g, *x, *gamma, *beta, xhat, rstd, n, |j| j % n);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let c = val(*gamma).len();
                let spatial = xhat.len() / c;
                let group_len = xhat.len() / groups;
                self.norm_backward(grads, g, *x, *gamma, *beta, xhat, rstd, group_len, |j| j / spatial);
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let cout = node.value.shape()[0];
                let p = geom.oh * geom.ow;
                let ck = geom.channels * geom.kh * geom.kw;
                if let Some(gw) = self.slot(grads, *w) {
                    F::gemm(cout, p, ck, g, false, cols, true, gw, F::one());
                }
                if self.nodes[x.0].requires_grad {
                    let mut dcols = vec![F::zero(); ck * p];
                    F::gemm(ck, cout, p, val(*w), true, g, false, &mut dcols, F::zero());
                    let dx = geom.col2im(&dcols);
                    self.accumulate(grads, *x, |j| dx[j]);
                }
                if let Some(b) = b {
                    self.channel_bias_backward(grads, *b, g, p);
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let cin = self.nodes[x.0].value.shape()[0];
                let ck = geom.channels * geom.kh * geom.kw;
                let hw = geom.oh * geom.ow;
                let dcols = geom.im2col(g);
                if let Some(gx) = self.slot(grads, *x) {
                    F::gemm(cin, ck, hw, val(*w), false, &dcols, false, gx, F::one());
                }
                if let Some(gw) = self.slot(grads, *w) {
                    F::gemm(cin, hw, ck, val(*x), false, &dcols, true, gw, F::one());
                }
                if let Some(b) = b {
                    self.channel_bias_backward(grads, *b, g, geom.h * geom.w);
                }
            }
            Op::Embedding(table, ids) => {
                let d = node.value.shape()[1];
                if let Some(buf) = self.slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            buf[id * d + c] += g[r * d + c];
                        }
                    }
                }
            }
            Op::Bilinear(value, points) => {
                let sv = self.nodes[value.0].value.shape();
                let (h, w, d) = (sv[0], sv[1], sv[2]);
                let v = val(*value);
                let p = val(*points);
                let npts = p.len() / 2;
                let mut dv = vec![F::zero(); v.len()];
                let mut dp = vec![F::zero(); p.len()];
                for i in 0..npts {
                    let taps = bilinear_weights(h, w, p[2 * i], p[2 * i + 1]);
                    let gi = &g[i * d..(i + 1) * d];
                    for t in 0..4 {
                        if let Some(idx) = taps.index[t] {
                            let row = &v[idx * d..(idx + 1) * d];
                            let dot: F = row.iter().zip(gi).map(|(&a, &b)| a * b).sum();
                            dp[2 * i] += taps.dx[t] * dot;
                            dp[2 * i + 1] += taps.dy[t] * dot;
                            for c in 0..d {
                                dv[idx * d + c] += taps.weight[t] * gi[c];
                            }
                        }
                    }
                }
                self.accumulate(grads, *value, |j| dv[j]);
                self.accumulate(grads, *points, |j| dp[j]);
            }
            Op::Deform {
                value,
                offsets,
                weights,
                layout,
                refs,
            } => self.deform_backward(grads, g, *value, *offsets, *weights, layout, refs),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn norm_backward(
        &self,
        grads: &mut [Option<Vec<F>>],
        g: &[F],
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: &[F],
        rstd: &[F],
        group_len: usize,
        channel: impl Fn(usize) -> usize,
    ) {
        let gm = self.nodes[gamma.0].value.data();
        if let Some(buf) = self.slot(grads, gamma) {
            for j in 0..g.len() {
                buf[channel(j)] += g[j] * xhat[j];
            }
        }
        if let Some(buf) = self.slot(grads, beta) {
            for j in 0..g.len() {
                buf[channel(j)] += g[j];
            }
        }
        if let Some(buf) = self.slot(grads, x) {
            let n = F::from_usize(group_len).unwrap();
            for (gi, r) in rstd.iter().enumerate() {
                let range = gi * group_len..(gi + 1) * group_len;
                let mut mean_d = F::zero();
                let mut mean_dx = F::zero();
                for j in range.clone() {
                    let d = g[j] * gm[channel(j)];
                    mean_d += d;
                    mean_dx += d * xhat[j];
                }
                mean_d /= n;
                mean_dx /= n;
                for j in range {
                    let d = g[j] * gm[channel(j)];
                    buf[j] += *r * (d - mean_d - xhat[j] * mean_dx);
                }
            }
        }
    }

    fn channel_bias_backward(&self, grads: &mut [Option<Vec<F>>], b: Var, g: &[F], plane: usize) {
        if let Some(buf) = self.slot(grads, b) {
            for (c, o) in buf.iter_mut().enumerate() {
                *o += g[c * plane..(c + 1) * plane].iter().copied().sum::<F>();
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn deform_backward(
        &self,
        grads: &mut [Option<Vec<F>>],
        g: &[F],
        value: Var,
        offsets: Var,
        weights: Var,
        layout: &DeformLayout,
        refs: &[[F; 2]],
    ) {
        let v = self.nodes[value.0].value.data();
        let off = self.nodes[offsets.0].value.data();
        let wts = self.nodes[weights.0].value.data();
        let d = self.nodes[value.0].value.shape()[1];
        let dh = d / layout.heads;
        let hlk = layout.heads * layout.samples_per_head();
        let need_v = self.nodes[value.0].requires_grad;
        let need_o = self.nodes[offsets.0].requires_grad;
        let need_w = self.nodes[weights.0].requires_grad;
        let mut dv = if need_v { vec![F::zero(); v.len()] } else { Vec::new() };
        let mut doff = vec![F::zero(); if need_o { off.len() } else { 0 }];
        let mut dw = vec![F::zero(); if need_w { wts.len() } else { 0 }];
        for (qi, r) in refs.iter().enumerate() {
            let off_q = &off[qi * hlk * 2..(qi + 1) * hlk * 2];
            for h in 0..layout.heads {
                let gq = &g[qi * d + h * dh..qi * d + (h + 1) * dh];
                for (l, &(lh, lw)) in layout.level_shapes.iter().enumerate() {
                    let start = layout.level_starts[l];
                    for k in 0..layout.points {
                        let j = (h * layout.levels() + l) * layout.points + k;
                        let a = wts[qi * hlk + j];
                        let [px, py] = layout.location(*r, off_q, h, l, k);
                        let taps = bilinear_weights(lh, lw, px, py);
                        let mut sample_dot = F::zero();
                        let mut dlx = F::zero();
                        let mut dly = F::zero();
                        for t in 0..4 {
                            let Some(idx) = taps.index[t] else {
                                continue;
                            };
                            let base = (start + idx) * d + h * dh;
                            let row = &v[base..base + dh];
                            let dot: F = row.iter().zip(gq).map(|(&x, &y)| x * y).sum();
                            sample_dot += taps.weight[t] * dot;
                            dlx += taps.dx[t] * dot;
                            dly += taps.dy[t] * dot;
                            if need_v {
                                let s = a * taps.weight[t];
                                for (o, &gv) in dv[base..base + dh].iter_mut().zip(gq) {
                                    *o += s * gv;
                                }
                            }
                        }
                        if need_w {
                            dw[qi * hlk + j] += sample_dot;
                        }
                        if need_o {
                            let o = qi * hlk * 2 + j * 2;
                            doff[o] += a * dlx / F::from_usize(lw).unwrap();
                            doff[o + 1] += a * dly / F::from_usize(lh).unwrap();
                        }
                    }
                }
            }
        }
        if need_v {
            self.accumulate(grads, value, |j| dv[j]);
        }
        if need_o {
            self.accumulate(grads, offsets, |j| doff[j]);
        }
        if need_w {
            self.accumulate(grads, weights, |j| dw[j]);
        }
    }
}

fn add_channel_bias<F: Float>(out: &mut [F], bias: &[F], plane: usize) {
    for (c, &b) in bias.iter().enumerate() {
        for v in &mut out[c * plane..(c + 1) * plane] {
            *v += b;
        }
    }
}

/// Normalises consecutive chunks of `group_len` values to zero mean and unit
/// variance (biased estimator). Returns the normalised values and `1/std`
/// per chunk.
fn normalize_groups<F: Float>(x: &[F], group_len: usize, eps: F) -> (Vec<F>, Vec<F>) {
    let n = F::from_usize(group_len.max(1)).unwrap();
    let mut xhat = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(x.len() / group_len.max(1));
    for chunk in x.chunks(group_len.max(1)) {
        let mean = chunk.iter().copied().sum::<F>() / n;
        let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let r = F::one() / (var + eps).sqrt();
        xhat.extend(chunk.iter().map(|&v| (v - mean) * r));
        rstd.push(r);
    }
    (xhat, rstd)
}
