//! Raw loops shared by the graph operators.

use crate::float::Float;

/// The four taps of a bilinear lookup at normalised point `(px, py)` on an
/// `h x w` grid whose pixel centre `i` sits at `(i + 0.5) / n`.
///
/// Taps that fall outside the grid have `index == None` (zero padding).
#[derive(Clone, Copy, Debug)]
pub struct BilinearTaps<F> {
    pub index: [Option<usize>; 4],
    pub weight: [F; 4],
    /// d weight / d px for each tap
    pub dx: [F; 4],
    /// d weight / d py for each tap
    pub dy: [F; 4],
}

pub fn bilinear_weights<F: Float>(h: usize, w: usize, px: F, py: F) -> BilinearTaps<F> {
    let half = F::from_f64c(0.5);
    let fw = F::from_usize(w).unwrap();
    let fh = F::from_usize(h).unwrap();
    let fx = px * fw - half;
    let fy = py * fh - half;
    let x0f = fx.floor();
    let y0f = fy.floor();
    let ax = fx - x0f;
    let ay = fy - y0f;
    let one = F::one();
    let (x0, y0) = (x0f.to_i64().unwrap_or(i64::MIN / 2), y0f.to_i64().unwrap_or(i64::MIN / 2));
    let idx = |x: i64, y: i64| -> Option<usize> {
        if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
            Some(y as usize * w + x as usize)
        } else {
            None
        }
    };
    BilinearTaps {
        index: [idx(x0, y0), idx(x0 + 1, y0), idx(x0, y0 + 1), idx(x0 + 1, y0 + 1)],
        weight: [(one - ax) * (one - ay), ax * (one - ay), (one - ax) * ay, ax * ay],
        dx: [-(one - ay) * fw, (one - ay) * fw, -ay * fw, ay * fw],
        dy: [-(one - ax) * fh, -ax * fh, (one - ax) * fh, ax * fh],
    }
}

/// Accumulates `scale * x(v, p)` into `out`, where the map is a block of
/// `h * w` rows of `stride` channels starting at row `start`, and only
/// channels `c0 .. c0 + out.len()` are read.
#[allow(clippy::too_many_arguments)]
pub fn bilinear_sample_into<F: Float>(
    value: &[F],
    stride: usize,
    start: usize,
    h: usize,
    w: usize,
    c0: usize,
    px: F,
    py: F,
    scale: F,
    out: &mut [F],
) {
    let taps = bilinear_weights(h, w, px, py);
    for t in 0..4 {
        if let Some(i) = taps.index[t] {
            let wt = taps.weight[t] * scale;
            if wt == F::zero() {
                continue;
            }
            let row = &value[(start + i) * stride + c0..(start + i) * stride + c0 + out.len()];
            for (o, &v) in out.iter_mut().zip(row) {
                *o += wt * v;
            }
        }
    }
}

/// Geometry of a 2-D convolution window sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn source(&self, o: usize, k: usize, n: usize) -> Option<usize> {
        let v = (o * self.stride + k) as isize - self.pad as isize;
        (v >= 0 && (v as usize) < n).then_some(v as usize)
    }

    /// `[C, H, W]` image to `[C*kh*kw, oh*ow]` columns.
    pub fn im2col<F: Float>(&self, x: &[F]) -> Vec<F> {
        let cols = self.oh * self.ow;
        let mut out = vec![F::zero(); self.channels * self.kh * self.kw * cols];
        for c in 0..self.channels {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut out[row * cols..(row + 1) * cols];
                    for oy in 0..self.oh {
                        let Some(iy) = self.source(oy, ky, self.h) else {
                            continue;
                        };
                        let src = &x[(c * self.h + iy) * self.w..(c * self.h + iy + 1) * self.w];
                        for ox in 0..self.ow {
                            if let Some(ix) = self.source(ox, kx, self.w) {
                                dst[oy * self.ow + ox] = src[ix];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`im2col`](Self::im2col): scatter-adds columns back into an image.
    pub fn col2im<F: Float>(&self, cols_buf: &[F]) -> Vec<F> {
        let cols = self.oh * self.ow;
        let mut out = vec![F::zero(); self.channels * self.h * self.w];
        for c in 0..self.channels {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols_buf[row * cols..(row + 1) * cols];
                    for oy in 0..self.oh {
                        let Some(iy) = self.source(oy, ky, self.h) else {
                            continue;
                        };
                        let dst = &mut out[(c * self.h + iy) * self.w..(c * self.h + iy + 1) * self.w];
                        for ox in 0..self.ow {
                            if let Some(ix) = self.source(ox, kx, self.w) {
                                dst[ix] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// (outer, axis, inner) split of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_forward<F: Float>(x: &[F], outer: usize, n: usize, inner: usize) -> Vec<F> {
    let mut y = vec![F::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let mut m = F::neg_infinity();
            for j in 0..n {
                m = m.max(x[at(j)]);
            }
            if m == F::neg_infinity() {
                // fully masked row: defined as uniform zeros
                continue;
            }
            let mut s = F::zero();
            for j in 0..n {
                let e = (x[at(j)] - m).exp();
                y[at(j)] = e;
                s += e;
            }
            for j in 0..n {
                y[at(j)] /= s;
            }
        }
    }
    y
}
