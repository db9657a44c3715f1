//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation in execution order, so the node list is
//! topologically sorted by construction. [`Tape::backward`] walks it in reverse,
//! summing gradients over fan-out. A tape is single-threaded; independent tapes
//! may be driven from different threads.

use std::sync::Arc;

use crate::error::{dim_err, param_err, Result};
use crate::kernels::{self, ConvGeometry};
use crate::mac;
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A user-defined differentiable operation.
pub trait CustomOp<T: Real>: Send + Sync {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;
    /// One gradient per input, shaped like that input.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Tensor<T>>;
}

/// Stride, dilation and zero padding of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    /// Stride 1 with the padding that preserves spatial size for an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            dilation,
            padding: dilation * (kernel - 1) / 2,
        }
    }
}

enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias { x: Var, bias: Var },
    AddChannelBias { x: Var, bias: Var },
    Relu(Var),
    Matmul(Var, Var),
    Bmm(Var, Var),
    Permute { x: Var, axes: Vec<usize> },
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, means: Vec<T>, rstds: Vec<T> },
    Resize(Var),
    Sample { x: Var, points: Var },
    Conv2d { x: Var, w: Var, bias: Option<Var>, geom: ConvGeometry },
    CrossEntropy { logits: Var, grad: Vec<T> },
    Sum(Var),
    WeightedPool { weights: Var, feats: Var, denom: Vec<T>, fallback: Vec<bool> },
    L2NormalizeRows { x: Var, norms: Vec<T>, eps: T },
    Custom { inputs: Vec<Var>, op: Arc<dyn CustomOp<T>> },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Softmax weights below this total fall back to an unweighted mean.
pub const POOL_DEGENERATE_SUM: f64 = 1e-8;

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input (parameter or checked input).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_vec(va.shape(), data).expect("same shape");
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, c), rg)
    }

    /// Adds `bias` (length = last extent of `x`) to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&1);
        if self.shape(bias) != [d] {
            return dim_err(format!(
                "add_bias: bias {:?} does not match last axis of {:?}",
                self.shape(bias),
                self.shape(x)
            ));
        }
        let b = self.value(bias).data().to_vec();
        let xv = self.value(x);
        let data = xv
            .data()
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(&b).map(|(&v, &bb)| v + bb))
            .collect();
        let value = Tensor::from_vec(xv.shape(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddBias { x, bias }, rg))
    }

    /// Adds `bias[c]` to channel `c` of a channel-first tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.shape(x).first().copied().unwrap_or(1);
        if self.shape(bias) != [c] {
            return dim_err(format!(
                "add_channel_bias: bias {:?} does not match channels of {:?}",
                self.shape(bias),
                self.shape(x)
            ));
        }
        let xv = self.value(x);
        let mut data = xv.data().to_vec();
        kernels::add_channel_bias(&mut data, self.value(bias).data());
        let value = Tensor::from_vec(xv.shape(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddChannelBias { x, bias }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        // NaN passes through so divergence surfaces in the loss.
        let value = self.value(x).map(|v| if v < T::zero() { T::zero() } else { v });
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err(format!("matmul: incompatible shapes {sa:?} and {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        mac::record((m * k * n) as u64);
        let data = kernels::gemm(self.value(a).data(), self.value(b).data(), m, k, n, false, false);
        let value = Tensor::from_vec(&[m, n], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Matmul(a, b), rg))
    }

    /// Batched matmul: `[B, M, K] × [B, K, N] → [B, M, N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return dim_err(format!("bmm: incompatible shapes {sa:?} and {sb:?}"));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        mac::record((bs * m * k * n) as u64);
        let data = kernels::bmm(
            self.value(a).data(),
            self.value(b).data(),
            bs,
            m,
            k,
            n,
            false,
            false,
        );
        let value = Tensor::from_vec(&[bs, m, n], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Bmm(a, b), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return dim_err(format!("permute: {axes:?} is not a permutation of rank {}", shape.len()));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let data = kernels::permute(self.value(x).data(), &shape, axes);
        let value = Tensor::from_vec(&out_shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Permute { x, axes: axes.to_vec() }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return dim_err("transpose needs rank >= 2");
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return param_err("concat of zero tensors");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return dim_err(format!("concat axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return dim_err(format!("concat: {s:?} incompatible with {base:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::from_vec(&shape, data)?;
        let rg = self.rg(inputs);
        Ok(self.push(value, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    /// `len` entries of `x` starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return dim_err(format!("slice [{start}, {}) on axis {axis} of {shape:?}", start + len));
        }
        let (outer, full, inner) = kernels::axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::from_vec(&out_shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Slice { x, axis, start }, rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return dim_err(format!("softmax axis {axis} out of range for {shape:?}"));
        }
        let (o, l, i) = kernels::axis_split(&shape, axis);
        let value = Tensor::from_vec(&shape, kernels::softmax(self.value(x).data(), o, l, i))?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return param_err(format!("layer_norm eps must be positive, got {eps}"));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&1);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return dim_err(format!(
                "layer_norm: gamma {:?} / beta {:?} must be [{d}]",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let (y, means, rstds) = kernels::layer_norm(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            d,
            T::lit(eps),
        );
        let value = Tensor::from_vec(&shape, y)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, means, rstds }, rg))
    }

    /// Bilinear resize of a `C×H×W` tensor (align-corners=false).
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return param_err(format!("resize to zero extent {out_h}x{out_w}"));
        }
        let [c, h, w] = chw(self.shape(x), "bilinear_resize")?;
        let data = kernels::resize(self.value(x).data(), c, h, w, out_h, out_w);
        let value = Tensor::from_vec(&[c, out_h, out_w], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Resize(x), rg))
    }

    /// Samples `x: C×H×W` at `points: P×2` (row, col); zero outside the map.
    pub fn bilinear_sample(&mut self, x: Var, points: Var) -> Result<Var> {
        let [c, h, w] = chw(self.shape(x), "bilinear_sample")?;
        let ps = self.shape(points);
        if ps.len() != 2 || ps[1] != 2 {
            return dim_err(format!("bilinear_sample: points must be P×2, got {ps:?}"));
        }
        let np = ps[0];
        mac::record((4 * c * np) as u64);
        let data = kernels::sample(self.value(x).data(), c, h, w, self.value(points).data());
        let value = Tensor::from_vec(&[c, np], data)?;
        let rg = self.rg(&[x, points]);
        Ok(self.push(value, Op::Sample { x, points }, rg))
    }

    /// Cross-correlation of `x: Cin×H×W` with `w: Cout×Cin×K×K`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let [cin, h, wd] = chw(self.shape(x), "conv2d input")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != cin || ws[2] != ws[3] {
            return dim_err(format!("conv2d: weight {ws:?} does not fit input {:?}", self.shape(x)));
        }
        let (cout, k) = (ws[0], ws[2]);
        if k % 2 == 0 {
            return param_err(format!("conv2d kernel size must be odd, got {k}"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return dim_err(format!("conv2d: bias {:?} must be [{cout}]", self.shape(b)));
            }
        }
        let Some(geom) = ConvGeometry::new(cin, h, wd, k, spec.stride, spec.dilation, spec.padding)
        else {
            return dim_err(format!(
                "conv2d: output extent < 1 for input {h}x{wd}, kernel {k}, {spec:?}"
            ));
        };
        mac::record((cout * geom.col_rows() * geom.col_cols()) as u64);
        let col = kernels::im2col(self.value(x).data(), &geom);
        let mut out = kernels::gemm(
            self.value(w).data(),
            &col,
            cout,
            geom.col_rows(),
            geom.col_cols(),
            false,
            false,
        );
        if let Some(b) = bias {
            kernels::add_channel_bias(&mut out, self.value(b).data());
        }
        let value = Tensor::from_vec(&[cout, geom.ho, geom.wo], out)?;
        let mut ins = vec![x, w];
        ins.extend(bias);
        let rg = self.rg(&ins);
        Ok(self.push(value, Op::Conv2d { x, w, bias, geom }, rg))
    }

    /// Mean softmax cross-entropy of `logits: Cls×…` against labels shaped like
    /// the trailing axes, skipping pixels labelled `ignore`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &Tensor<u32>, ignore: u32) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() < 2 || ls[1..] != *labels.shape() {
            return dim_err(format!(
                "cross_entropy: logits {ls:?} vs labels {:?}",
                labels.shape()
            ));
        }
        let classes = ls[0];
        if let Some(&bad) = labels.data().iter().find(|&&l| l != ignore && l as usize >= classes) {
            return param_err(format!("label {bad} outside [0, {classes})"));
        }
        let Some((loss, grad)) =
            kernels::cross_entropy(self.value(logits).data(), labels.data(), classes, ignore)
        else {
            return param_err("cross_entropy: every pixel is ignored");
        };
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, grad }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Normalized weighted pooling: `out[n, c] = Σ_p w[n,p]·f[c,p] / Σ_p w[n,p]`.
    ///
    /// `weights: N×P`, `feats: C×P`, output `N×C`. Rows whose weight sum is below
    /// [`POOL_DEGENERATE_SUM`] use the unweighted mean of `feats` instead.
    pub fn weighted_pool(&mut self, weights: Var, feats: Var) -> Result<Var> {
        let (ws, fs) = (self.shape(weights), self.shape(feats));
        if ws.len() != 2 || fs.len() != 2 || ws[1] != fs[1] {
            return dim_err(format!("weighted_pool: weights {ws:?} vs features {fs:?}"));
        }
        let (n, p, c) = (ws[0], ws[1], fs[0]);
        let (wv, fv) = (self.value(weights).data(), self.value(feats).data());
        mac::record((n * p * c) as u64);
        let num = kernels::gemm(wv, fv, n, p, c, false, true);
        let mut out = vec![T::zero(); n * c];
        let mut denom = Vec::with_capacity(n);
        let mut fallback = Vec::with_capacity(n);
        let inv_p = T::one() / T::lit(p as f64);
        for r in 0..n {
            let s: T = wv[r * p..(r + 1) * p].iter().copied().sum();
            let degenerate = s.abs().as_f64() < POOL_DEGENERATE_SUM;
            for ch in 0..c {
                out[r * c + ch] = if degenerate {
                    fv[ch * p..(ch + 1) * p].iter().copied().sum::<T>() * inv_p
                } else {
                    num[r * c + ch] / s
                };
            }
            denom.push(s);
            fallback.push(degenerate);
        }
        let value = Tensor::from_vec(&[n, c], out)?;
        let rg = self.rg(&[weights, feats]);
        Ok(self.push(value, Op::WeightedPool { weights, feats, denom, fallback }, rg))
    }

    /// Scales every row of an `N×D` tensor to unit L2 norm (norms floored at `eps`).
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return dim_err(format!("l2_normalize_rows needs a matrix, got {s:?}"));
        }
        let eps = T::lit(eps);
        let d = s[1];
        let mut norms = Vec::with_capacity(s[0]);
        let mut data = Vec::with_capacity(s[0] * d);
        for row in self.value(x).data().chunks_exact(d) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
            norms.push(norm);
            data.extend(row.iter().map(|&v| v / norm));
        }
        let value = Tensor::from_vec(&s, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::L2NormalizeRows { x, norms, eps }, rg))
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp<T>>, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let value = op.forward(&values)?;
        let rg = self.rg(inputs);
        Ok(self.push(value, Op::Custom { inputs: inputs.to_vec(), op }, rg))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return param_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                g.filter(|_| node.requires_grad)
                    .map(|g| Tensor::from_vec(node.value.shape(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, d: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(d).for_each(|(e, x)| *e += x),
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    acc(*a, g.iter().zip(vb).map(|(&g, &y)| g * y).collect());
                }
                if self.wants(*b) {
                    acc(*b, g.iter().zip(va).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|&v| v * *c).collect()),
            Op::AddBias { x, bias } => {
                acc(*x, g.to_vec());
                if self.wants(*bias) {
                    let d = self.value(*bias).len();
                    let mut db = vec![T::zero(); d];
                    for row in g.chunks_exact(d) {
                        db.iter_mut().zip(row).for_each(|(s, &v)| *s += v);
                    }
                    acc(*bias, db);
                }
            }
            Op::AddChannelBias { x, bias } => {
                acc(*x, g.to_vec());
                if self.wants(*bias) {
                    let c = self.value(*bias).len();
                    let n = g.len() / c;
                    acc(*bias, g.chunks_exact(n).map(|ch| ch.iter().copied().sum()).collect());
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect(),
                );
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    acc(*a, kernels::gemm(g, self.value(*b).data(), m, n, k, false, true));
                }
                if self.wants(*b) {
                    acc(*b, kernels::gemm(self.value(*a).data(), g, k, m, n, true, false));
                }
            }
            Op::Bmm(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                if self.wants(*a) {
                    acc(*a, kernels::bmm(g, self.value(*b).data(), bs, m, n, k, false, true));
                }
                if self.wants(*b) {
                    acc(*b, kernels::bmm(self.value(*a).data(), g, bs, k, m, n, true, false));
                }
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                acc(*x, kernels::permute(g, node.value.shape(), &inverse));
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, _, inner) = kernels::axis_split(shape, *axis);
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    if self.wants(v) {
                        let mut d = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * total + offset..o * total + offset + len]);
                        }
                        acc(v, d);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let in_shape = self.shape(*x);
                let (outer, full, inner) = kernels::axis_split(in_shape, *axis);
                let len = node.value.shape()[*axis];
                let mut d = vec![T::zero(); self.value(*x).len()];
                for o in 0..outer {
                    let dst = o * full * inner + start * inner;
                    d[dst..dst + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, d);
            }
            Op::Softmax { x, axis } => {
                let (o, l, inner) = kernels::axis_split(node.value.shape(), *axis);
                acc(*x, kernels::softmax_backward(node.value.data(), g, o, l, inner));
            }
            Op::LayerNorm { x, gamma, beta, means, rstds } => {
                let d = self.value(*gamma).len();
                let (dx, dgamma, dbeta) = kernels::layer_norm_backward(
                    self.value(*x).data(),
                    self.value(*gamma).data(),
                    means,
                    rstds,
                    g,
                    d,
                );
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::Resize(x) => {
                let s = self.shape(*x);
                let o = node.value.shape();
                acc(*x, kernels::resize_backward(g, s[0], s[1], s[2], o[1], o[2]));
            }
            Op::Sample { x, points } => {
                let s = self.shape(*x);
                let (dx, dp) = kernels::sample_backward(
                    self.value(*x).data(),
                    s[0],
                    s[1],
                    s[2],
                    self.value(*points).data(),
                    g,
                );
                acc(*x, dx);
                acc(*points, dp);
            }
            Op::Conv2d { x, w, bias, geom } => {
                let cout = self.shape(*w)[0];
                let (rows, cols) = (geom.col_rows(), geom.col_cols());
                if self.wants(*w) {
                    let col = kernels::im2col(self.value(*x).data(), geom);
                    acc(*w, kernels::gemm(g, &col, cout, cols, rows, false, true));
                }
                if self.wants(*x) {
                    let dcol = kernels::gemm(self.value(*w).data(), g, rows, cout, cols, true, false);
                    acc(*x, kernels::col2im(&dcol, geom));
                }
                if let Some(b) = bias {
                    acc(*b, g.chunks_exact(cols).map(|ch| ch.iter().copied().sum()).collect());
                }
            }
            Op::CrossEntropy { logits, grad } => {
                let s = g[0];
                acc(*logits, grad.iter().map(|&v| v * s).collect());
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).len()]),
            Op::WeightedPool { weights, feats, denom, fallback } => {
                let (n, p) = (self.shape(*weights)[0], self.shape(*weights)[1]);
                let c = self.shape(*feats)[0];
                let (wv, fv) = (self.value(*weights).data(), self.value(*feats).data());
                let out = node.value.data();
                let inv_p = T::one() / T::lit(p as f64);
                if self.wants(*feats) {
                    let mut df = vec![T::zero(); c * p];
                    for r in 0..n {
                        for ch in 0..c {
                            let go = g[r * c + ch];
                            let row = &mut df[ch * p..(ch + 1) * p];
                            if fallback[r] {
                                row.iter_mut().for_each(|d| *d += go * inv_p);
                            } else {
                                let s = go / denom[r];
                                row.iter_mut()
                                    .zip(&wv[r * p..(r + 1) * p])
                                    .for_each(|(d, &w)| *d += s * w);
                            }
                        }
                    }
                    acc(*feats, df);
                }
                if self.wants(*weights) {
                    let mut dw = vec![T::zero(); n * p];
                    for r in 0..n {
                        if fallback[r] {
                            continue;
                        }
                        let inv_s = T::one() / denom[r];
                        for ch in 0..c {
                            let go = g[r * c + ch] * inv_s;
                            let o = out[r * c + ch];
                            for q in 0..p {
                                dw[r * p + q] += go * (fv[ch * p + q] - o);
                            }
                        }
                    }
                    acc(*weights, dw);
                }
            }
            Op::L2NormalizeRows { x, norms, eps } => {
                let d = node.value.shape()[1];
                let y = node.value.data();
                let mut dx = Vec::with_capacity(y.len());
                for (r, &norm) in norms.iter().enumerate() {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    if norm > *eps {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        dx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| (gv - yv * dot) / norm));
                    } else {
                        dx.extend(gr.iter().map(|&gv| gv / norm));
                    }
                }
                acc(*x, dx);
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let gt = Tensor::from_vec(node.value.shape(), g.to_vec()).expect("grad shape");
                for (v, d) in inputs.iter().zip(op.backward(&values, &node.value, &gt)) {
                    acc(*v, d.into_vec());
                }
            }
        }
    }
}

fn chw(shape: &[usize], what: &str) -> Result<[usize; 3]> {
    match shape {
        &[c, h, w] => Ok([c, h, w]),
        _ => dim_err(format!("{what} must be C×H×W, got {shape:?}")),
    }
}
