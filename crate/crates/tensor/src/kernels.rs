//! Slice-level numeric kernels used by the tape's forward and backward rules.
//!
//! Accumulations always run from `0` in a fixed index order so that results are
//! reproducible bit-for-bit, independent of parallel scheduling.

use crate::par;
use crate::tensor::Real;

/// Row-major `m×n` product of `a` (`m×k`, or `k×m` when `trans_a`) and `b`
/// (`k×n`, or `n×k` when `trans_b`).
pub fn gemm<T: Real>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
) -> Vec<T> {
    let a_owned;
    let a = if trans_a {
        a_owned = transpose2(a, k, m);
        &a_owned[..]
    } else {
        a
    };
    let b_owned;
    let b = if trans_b {
        b_owned = transpose2(b, n, k);
        &b_owned[..]
    } else {
        b
    };
    let mut c = vec![T::zero(); m * n];
    par::for_each_chunk(&mut c, n, m * k * n, |i, row| {
        gemm_row(&a[i * k..(i + 1) * k], b, n, row);
    });
    c
}

#[inline]
fn gemm_row<T: Real>(a_row: &[T], b: &[T], n: usize, out: &mut [T]) {
    for (p, &ap) in a_row.iter().enumerate() {
        let b_row = &b[p * n..(p + 1) * n];
        for (o, &bv) in out.iter_mut().zip(b_row) {
            *o += ap * bv;
        }
    }
}

/// Sequential `m×k · k×n` product written into `out`.
pub fn gemm_into<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        gemm_row(&a[i * k..(i + 1) * k], b, n, &mut out[i * n..(i + 1) * n]);
    }
}

/// Transpose of a row-major `rows×cols` matrix.
pub fn transpose2<T: Copy>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for c in 0..cols {
        for r in 0..rows {
            out.push(x[r * cols + c]);
        }
    }
    out
}

/// Batched product: `batch` independent `m×k · k×n` products.
pub fn bmm<T: Real>(
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
) -> Vec<T> {
    let mut c = vec![T::zero(); batch * m * n];
    par::for_each_chunk(&mut c, m * n, batch * m * k * n, |bi, out| {
        let a_blk = &a[bi * m * k..(bi + 1) * m * k];
        let b_blk = &b[bi * k * n..(bi + 1) * k * n];
        let at;
        let a_blk = if trans_a {
            at = transpose2(a_blk, k, m);
            &at[..]
        } else {
            a_blk
        };
        let bt;
        let b_blk = if trans_b {
            bt = transpose2(b_blk, n, k);
            &bt[..]
        } else {
            b_blk
        };
        gemm_into(a_blk, b_blk, m, k, n, out);
    });
    c
}

/// Geometry of a 2-D convolution over a `C×H×W` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    /// Output extents per the usual formula; `None` if either would be < 1.
    pub fn new(
        cin: usize,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Option<Self> {
        let out = |len: usize| -> Option<usize> {
            let span = dilation * (k - 1) + 1;
            let padded = len + 2 * padding;
            if stride == 0 || padded < span {
                None
            } else {
                Some((padded - span) / stride + 1)
            }
        };
        Some(Self {
            cin,
            h,
            w,
            k,
            stride,
            dilation,
            padding,
            ho: out(h)?,
            wo: out(w)?,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Input coordinate read by output `o` through kernel tap `tap`, if inside.
    #[inline]
    fn source(&self, o: usize, tap: usize, len: usize) -> Option<usize> {
        (o * self.stride + tap * self.dilation)
            .checked_sub(self.padding)
            .filter(|&p| p < len)
    }
}

/// Unfolds `x` into a `(cin·k·k) × (ho·wo)` matrix; row index is `(ci·k + ky)·k + kx`.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let cols = g.col_cols();
    let mut col = vec![T::zero(); g.col_rows() * cols];
    par::for_each_chunk(&mut col, cols, g.col_rows() * cols, |row, out| {
        let ci = row / (g.k * g.k);
        let ky = (row / g.k) % g.k;
        let kx = row % g.k;
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for oy in 0..g.ho {
            let Some(sy) = g.source(oy, ky, g.h) else {
                continue;
            };
            for ox in 0..g.wo {
                if let Some(sx) = g.source(ox, kx, g.w) {
                    out[oy * g.wo + ox] = plane[sy * g.w + sx];
                }
            }
        }
    });
    col
}

/// Adjoint of [`im2col`]: scatter-adds a column matrix back into `C×H×W`.
pub fn col2im<T: Real>(col: &[T], g: &ConvGeometry) -> Vec<T> {
    let cols = g.col_cols();
    let kk = g.k * g.k;
    let mut x = vec![T::zero(); g.cin * g.h * g.w];
    par::for_each_chunk(&mut x, g.h * g.w, col.len(), |ci, plane| {
        for tap in 0..kk {
            let ky = tap / g.k;
            let kx = tap % g.k;
            let src = &col[(ci * kk + tap) * cols..(ci * kk + tap + 1) * cols];
            for oy in 0..g.ho {
                let Some(sy) = g.source(oy, ky, g.h) else {
                    continue;
                };
                for ox in 0..g.wo {
                    if let Some(sx) = g.source(ox, kx, g.w) {
                        plane[sy * g.w + sx] += src[oy * g.wo + ox];
                    }
                }
            }
        }
    });
    x
}

/// Adds `bias[c]` to every element of channel `c` of a `C×N` buffer.
pub fn add_channel_bias<T: Real>(x: &mut [T], bias: &[T]) {
    let n = x.len() / bias.len();
    for (c, &b) in bias.iter().enumerate() {
        for v in &mut x[c * n..(c + 1) * n] {
            *v = *v + b;
        }
    }
}

/// Per-axis interpolation table for align-corners=false bilinear resizing.
struct AxisTable<T> {
    lo: Vec<usize>,
    hi: Vec<usize>,
    w_lo: Vec<T>,
    w_hi: Vec<T>,
}

fn axis_table<T: Real>(in_len: usize, out_len: usize) -> AxisTable<T> {
    let scale = in_len as f64 / out_len as f64;
    let mut t = AxisTable {
        lo: Vec::with_capacity(out_len),
        hi: Vec::with_capacity(out_len),
        w_lo: Vec::with_capacity(out_len),
        w_hi: Vec::with_capacity(out_len),
    };
    for d in 0..out_len {
        let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(in_len - 1);
        let hi = (lo + 1).min(in_len - 1);
        let frac = src - lo as f64;
        t.lo.push(lo);
        t.hi.push(hi);
        t.w_lo.push(T::lit(1.0 - frac));
        t.w_hi.push(T::lit(frac));
    }
    t
}

/// Bilinear resize of a `C×H×W` buffer (align-corners=false, edge clamped).
pub fn resize<T: Real>(x: &[T], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    if oh == h && ow == w {
        return x.to_vec();
    }
    let ty = axis_table::<T>(h, oh);
    let tx = axis_table::<T>(w, ow);
    let mut out = vec![T::zero(); c * oh * ow];
    par::for_each_chunk(&mut out, oh * ow, c * oh * ow * 4, |ci, plane| {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for y in 0..oh {
            let (r0, r1) = (ty.lo[y] * w, ty.hi[y] * w);
            for xx in 0..ow {
                let (c0, c1) = (tx.lo[xx], tx.hi[xx]);
                let top = tx.w_lo[xx] * src[r0 + c0] + tx.w_hi[xx] * src[r0 + c1];
                let bot = tx.w_lo[xx] * src[r1 + c0] + tx.w_hi[xx] * src[r1 + c1];
                plane[y * ow + xx] = ty.w_lo[y] * top + ty.w_hi[y] * bot;
            }
        }
    });
    out
}

/// Adjoint of [`resize`].
pub fn resize_backward<T: Real>(
    grad: &[T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    if oh == h && ow == w {
        return grad.to_vec();
    }
    let ty = axis_table::<T>(h, oh);
    let tx = axis_table::<T>(w, ow);
    let mut out = vec![T::zero(); c * h * w];
    par::for_each_chunk(&mut out, h * w, c * oh * ow * 4, |ci, plane| {
        let g = &grad[ci * oh * ow..(ci + 1) * oh * ow];
        for y in 0..oh {
            let (r0, r1) = (ty.lo[y] * w, ty.hi[y] * w);
            for xx in 0..ow {
                let (c0, c1) = (tx.lo[xx], tx.hi[xx]);
                let gv = g[y * ow + xx];
                let gt = ty.w_lo[y] * gv;
                let gb = ty.w_hi[y] * gv;
                plane[r0 + c0] += tx.w_lo[xx] * gt;
                plane[r0 + c1] += tx.w_hi[xx] * gt;
                plane[r1 + c0] += tx.w_lo[xx] * gb;
                plane[r1 + c1] += tx.w_hi[xx] * gb;
            }
        }
    });
    out
}

/// The four taps of a bilinear sample; out-of-bounds taps have `index == None`.
#[derive(Clone, Copy, Debug)]
pub struct SampleTaps<T> {
    pub index: [Option<usize>; 4],
    pub weight: [T; 4],
    pub frac_row: T,
    pub frac_col: T,
}

pub fn sample_taps<T: Real>(h: usize, w: usize, row: T, col: T) -> SampleTaps<T> {
    let r0 = row.floor();
    let c0 = col.floor();
    let fr = row - r0;
    let fc = col - c0;
    let one = T::one();
    let at = |r: T, c: T| -> Option<usize> {
        let (r, c) = (r.to_i64()?, c.to_i64()?);
        if r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w {
            Some(r as usize * w + c as usize)
        } else {
            None
        }
    };
    SampleTaps {
        index: [at(r0, c0), at(r0, c0 + one), at(r0 + one, c0), at(r0 + one, c0 + one)],
        weight: [
            (one - fr) * (one - fc),
            (one - fr) * fc,
            fr * (one - fc),
            fr * fc,
        ],
        frac_row: fr,
        frac_col: fc,
    }
}

#[inline]
fn tap_value<T: Real>(plane: &[T], idx: Option<usize>) -> T {
    idx.map_or(T::zero(), |i| plane[i])
}

/// Samples a `C×H×W` buffer at `P` `(row, col)` points; returns `C×P`.
pub fn sample<T: Real>(x: &[T], c: usize, h: usize, w: usize, points: &[T]) -> Vec<T> {
    let taps: Vec<SampleTaps<T>> = points
        .chunks_exact(2)
        .map(|p| sample_taps(h, w, p[0], p[1]))
        .collect();
    let np = taps.len();
    let mut out = vec![T::zero(); c * np];
    par::for_each_chunk(&mut out, np, c * np * 4, |ci, row| {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for (o, t) in row.iter_mut().zip(&taps) {
            *o = t.weight[0] * tap_value(plane, t.index[0])
                + t.weight[1] * tap_value(plane, t.index[1])
                + t.weight[2] * tap_value(plane, t.index[2])
                + t.weight[3] * tap_value(plane, t.index[3]);
        }
    });
    out
}

/// Gradients of [`sample`] w.r.t. the input buffer and the points.
pub fn sample_backward<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    points: &[T],
    grad: &[T],
) -> (Vec<T>, Vec<T>) {
    let taps: Vec<SampleTaps<T>> = points
        .chunks_exact(2)
        .map(|p| sample_taps(h, w, p[0], p[1]))
        .collect();
    let np = taps.len();
    let mut dx = vec![T::zero(); c * h * w];
    par::for_each_chunk(&mut dx, h * w, c * np * 4, |ci, plane| {
        let g = &grad[ci * np..(ci + 1) * np];
        for (gv, t) in g.iter().zip(&taps) {
            for k in 0..4 {
                if let Some(i) = t.index[k] {
                    plane[i] += t.weight[k] * *gv;
                }
            }
        }
    });
    let mut dp = vec![T::zero(); np * 2];
    par::for_each_chunk(&mut dp, 2, c * np * 4, |pi, d| {
        let t = &taps[pi];
        let one = T::one();
        for ci in 0..c {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            let v = [
                tap_value(plane, t.index[0]),
                tap_value(plane, t.index[1]),
                tap_value(plane, t.index[2]),
                tap_value(plane, t.index[3]),
            ];
            let gv = grad[ci * np + pi];
            let d_row = (one - t.frac_col) * (v[2] - v[0]) + t.frac_col * (v[3] - v[1]);
            let d_col = (one - t.frac_row) * (v[1] - v[0]) + t.frac_row * (v[3] - v[2]);
            d[0] += gv * d_row;
            d[1] += gv * d_col;
        }
    });
    (dx, dp)
}

/// Splits a shape around `axis` into `(outer, axis_len, inner)`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Softmax along the middle extent of an `(outer, len, inner)` layout.
pub fn softmax<T: Real>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(x[at(j)]);
            }
            let mut sum = T::zero();
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                out[at(j)] = e;
                sum += e;
            }
            for j in 0..len {
                out[at(j)] = out[at(j)] / sum;
            }
        }
    }
    out
}

pub fn softmax_backward<T: Real>(
    y: &[T],
    grad: &[T],
    outer: usize,
    len: usize,
    inner: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let dot: T = (0..len).map(|j| y[at(j)] * grad[at(j)]).sum();
            for j in 0..len {
                dx[at(j)] = y[at(j)] * (grad[at(j)] - dot);
            }
        }
    }
    dx
}

/// Layer norm over rows of length `d`. Returns `(y, mean, rstd)`.
pub fn layer_norm<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    d: usize,
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    let inv_d = T::one() / T::lit(d as f64);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rstd = T::one() / (var + eps).sqrt();
        for j in 0..d {
            y[r * d + j] = (xr[j] - mean) * rstd * gamma[j] + beta[j];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (y, means, rstds)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Real>(
    x: &[T],
    gamma: &[T],
    means: &[T],
    rstds: &[T],
    grad: &[T],
    d: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    let inv_d = T::one() / T::lit(d as f64);
    for r in 0..rows {
        let (mean, rstd) = (means[r], rstds[r]);
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for j in 0..d {
            let i = r * d + j;
            let xhat = (x[i] - mean) * rstd;
            let dxhat = grad[i] * gamma[j];
            dgamma[j] += grad[i] * xhat;
            dbeta[j] += grad[i];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        for j in 0..d {
            let i = r * d + j;
            let xhat = (x[i] - mean) * rstd;
            let dxhat = grad[i] * gamma[j];
            dx[i] = rstd * (dxhat - sum_dxhat * inv_d - xhat * sum_dxhat_xhat * inv_d);
        }
    }
    (dx, dgamma, dbeta)
}

/// Mean softmax cross-entropy over the non-ignored pixels of a `Cls×N` logit
/// buffer. Returns `(loss, dlogits)` with the gradient already divided by the
/// number of valid pixels, or `None` if every pixel is ignored.
pub fn cross_entropy<T: Real>(
    logits: &[T],
    labels: &[u32],
    classes: usize,
    ignore: u32,
) -> Option<(T, Vec<T>)> {
    let n = labels.len();
    let valid = labels.iter().filter(|&&l| l != ignore).count();
    if valid == 0 {
        return None;
    }
    let probs = softmax(logits, 1, classes, n);
    let scale = T::one() / T::lit(valid as f64);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); logits.len()];
    for (p, &label) in labels.iter().enumerate() {
        if label == ignore {
            continue;
        }
        let label = label as usize;
        let mut max = T::neg_infinity();
        for j in 0..classes {
            max = max.max(logits[j * n + p]);
        }
        let lse = (0..classes)
            .map(|j| (logits[j * n + p] - max).exp())
            .sum::<T>()
            .ln()
            + max;
        loss += lse - logits[label * n + p];
        for j in 0..classes {
            let onehot = if j == label { T::one() } else { T::zero() };
            grad[j * n + p] = (probs[j * n + p] - onehot) * scale;
        }
    }
    Some((loss * scale, grad))
}

/// Axis permutation of a row-major buffer: output axis `i` is input axis `axes[i]`.
pub fn permute<T: Copy + Default>(x: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..x.len() {
        out.push(x[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}
