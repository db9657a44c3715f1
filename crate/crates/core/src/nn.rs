//! Neural building blocks: convolution layers, multi-head self-attention, the
//! pre-norm attention/MLP residual block, and deformable convolution.
//!
//! Blocks own [`ParamId`]s only; values live in a [`ParamStore`] and are put on
//! a tape with [`ParamStore::bind`], so a block's forward pass is a pure
//! function of (tape, bound parameters, inputs).

use rand::Rng;
use vidseg_tensor::{mac, Conv2dSpec, Real, Tape, Tensor, Var};

use crate::error::{dim_err, param_err, Result};
use crate::params::{glorot, he, Bound, ParamId, ParamStore};

/// A square-kernel convolution with bias.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: Conv2dSpec,
}

impl ConvLayer {
    /// He-initialized weights, zero bias.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: Conv2dSpec,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        Self {
            weight: store.add(format!("{name}.w"), he(&[cout, cin, kernel, kernel], fan_in, rng), true),
            bias: store.add(format!("{name}.b"), Tensor::zeros(&[cout]), false),
            spec,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(tape.conv2d(x, p[self.weight], Some(p[self.bias]), self.spec)?)
    }
}

/// `C×h×w → [1, h·w, C]`: one token per spatial position.
pub fn to_tokens<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let flat = tape.reshape(x, &[s[0], s[1] * s[2]])?;
    let t = tape.transpose(flat)?;
    Ok(tape.reshape(t, &[1, s[1] * s[2], s[0]])?)
}

/// Inverse of [`to_tokens`].
pub fn from_tokens<T: Real>(tape: &mut Tape<T>, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let c = *tape.shape(tokens).last().unwrap();
    let flat = tape.reshape(tokens, &[h * w, c])?;
    let t = tape.transpose(flat)?;
    Ok(tape.reshape(t, &[c, h, w])?)
}

/// Stacks `S` maps of shape `C×h×w` into per-position sequences `[h·w, S, C]`.
pub fn stack_positions<T: Real>(tape: &mut Tape<T>, maps: &[Var]) -> Result<Var> {
    let s = tape.shape(maps[0]).to_vec();
    let (c, n) = (s[0], s[1] * s[2]);
    let flat: Vec<Var> = maps
        .iter()
        .map(|&m| tape.reshape(m, &[1, c, n]))
        .collect::<vidseg_tensor::Result<_>>()?;
    let stacked = tape.concat(&flat, 0)?;
    Ok(tape.permute(stacked, &[2, 0, 1])?)
}

/// Inverse of [`stack_positions`]: `[h·w, S, C]` back to `S` maps `C×h×w`.
pub fn unstack_positions<T: Real>(
    tape: &mut Tape<T>,
    seq: Var,
    h: usize,
    w: usize,
) -> Result<Vec<Var>> {
    let s = tape.shape(seq).to_vec();
    let (slots, c) = (s[1], s[2]);
    let by_slot = tape.permute(seq, &[1, 2, 0])?;
    (0..slots)
        .map(|i| {
            let one = tape.slice(by_slot, 0, i, 1)?;
            Ok(tape.reshape(one, &[c, h, w])?)
        })
        .collect()
}

/// Projection weights of a multi-head attention layer (no biases).
#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub dim: usize,
    pub heads: usize,
}

pub struct AttentionOutput {
    /// `[B, S, D]`
    pub out: Var,
    /// Softmax weights, `[B·heads, S, S′]`.
    pub weights: Var,
}

impl Attention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return param_err(format!("model dim {dim} is not divisible by {heads} heads"));
        }
        let mut proj = |suffix: &str| {
            store.add(format!("{name}.{suffix}"), glorot(&[dim, dim], dim, dim, rng), true)
        };
        Ok(Self {
            wq: proj("wq"),
            wk: proj("wk"),
            wv: proj("wv"),
            wo: proj("wo"),
            dim,
            heads,
        })
    }

    fn split_heads<T: Real>(&self, tape: &mut Tape<T>, x: Var, w: ParamId, p: &Bound) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (b, n, d) = (s[0], s[1], s[2]);
        let dh = d / self.heads;
        let flat = tape.reshape(x, &[b * n, d])?;
        let proj = tape.matmul(flat, p[w])?;
        let split = tape.reshape(proj, &[b, n, self.heads, dh])?;
        let heads_first = tape.permute(split, &[0, 2, 1, 3])?;
        Ok(tape.reshape(heads_first, &[b * self.heads, n, dh])?)
    }

    /// Scaled dot-product attention of queries `q: [B, S, D]` over
    /// keys/values `kv: [B, S′, D]`, heads concatenated then output-projected.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        q_in: Var,
        kv_in: Var,
    ) -> Result<AttentionOutput> {
        let (qs, ks) = (tape.shape(q_in).to_vec(), tape.shape(kv_in).to_vec());
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != self.dim || ks[2] != self.dim {
            return dim_err(format!(
                "attention over dim {}: queries {qs:?}, keys {ks:?}",
                self.dim
            ));
        }
        let (b, s) = (qs[0], qs[1]);
        let dh = self.dim / self.heads;
        let (q, k, v) = mac::section("projection", || -> Result<_> {
            Ok((
                self.split_heads(tape, q_in, self.wq, p)?,
                self.split_heads(tape, kv_in, self.wk, p)?,
                self.split_heads(tape, kv_in, self.wv, p)?,
            ))
        })?;
        let (weights, ctx) = mac::section("attention", || -> Result<_> {
            let kt = tape.transpose(k)?;
            let scores = tape.bmm(q, kt)?;
            let scaled = tape.scale(scores, T::lit(1.0 / (dh as f64).sqrt()));
            let weights = tape.softmax(scaled, 2)?;
            let ctx = tape.bmm(weights, v)?;
            Ok((weights, ctx))
        })?;
        let out = mac::section("projection", || -> Result<_> {
            let split = tape.reshape(ctx, &[b, self.heads, s, dh])?;
            let merged = tape.permute(split, &[0, 2, 1, 3])?;
            let flat = tape.reshape(merged, &[b * s, self.dim])?;
            let proj = tape.matmul(flat, p[self.wo])?;
            Ok(tape.reshape(proj, &[b, s, self.dim])?)
        })?;
        Ok(AttentionOutput { out, weights })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MhsaConfig {
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub ln_eps: f64,
}

impl MhsaConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            heads: 2,
            mlp_ratio: 2,
            ln_eps: 1e-5,
        }
    }
}

/// Pre-norm residual block: `x′ = Attn(LN(x)) + x`, `y = MLP(LN(x′)) + x′`.
#[derive(Clone, Debug)]
pub struct MhsaBlock {
    pub cfg: MhsaConfig,
    pub ln1: (ParamId, ParamId),
    pub attn: Attention,
    pub ln2: (ParamId, ParamId),
    pub fc1: (ParamId, ParamId),
    pub fc2: (ParamId, ParamId),
}

pub struct BlockOutput {
    pub out: Var,
    pub weights: Var,
}

impl MhsaBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: MhsaConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if cfg.mlp_ratio == 0 {
            return param_err("MLP expansion ratio must be at least 1");
        }
        let d = cfg.dim;
        let hidden = d * cfg.mlp_ratio;
        let ln = |tag: &str, store: &mut ParamStore<T>| {
            (
                store.add(format!("{name}.{tag}.g"), Tensor::ones(&[d]), false),
                store.add(format!("{name}.{tag}.b"), Tensor::zeros(&[d]), false),
            )
        };
        let ln1 = ln("ln1", store);
        let attn = Attention::new(store, &format!("{name}.attn"), d, cfg.heads, rng)?;
        let ln2 = ln("ln2", store);
        let fc1 = (
            store.add(format!("{name}.fc1.w"), he(&[d, hidden], d, rng), true),
            store.add(format!("{name}.fc1.b"), Tensor::zeros(&[hidden]), false),
        );
        let fc2 = (
            store.add(format!("{name}.fc2.w"), glorot(&[hidden, d], hidden, d, rng), true),
            store.add(format!("{name}.fc2.b"), Tensor::zeros(&[d]), false),
        );
        Ok(Self { cfg, ln1, attn, ln2, fc1, fc2 })
    }

    /// Parameters of the attention and MLP branches (everything except LN).
    pub fn branch_params(&self) -> [ParamId; 8] {
        [
            self.attn.wq,
            self.attn.wk,
            self.attn.wv,
            self.attn.wo,
            self.fc1.0,
            self.fc1.1,
            self.fc2.0,
            self.fc2.1,
        ]
    }

    /// Zeroes both residual branches, turning the block into the identity.
    pub fn zero_branches<T: Real>(&self, store: &mut ParamStore<T>) {
        for id in self.branch_params() {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).expect("same shape");
        }
    }

    /// `x: [B, S, D]` → `[B, S, D]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(tape, p, x)?.out)
    }

    pub fn forward_with_weights<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
    ) -> Result<BlockOutput> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.cfg.dim {
            return dim_err(format!(
                "block expects [B, S, {}], got {s:?}",
                self.cfg.dim
            ));
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        let eps = self.cfg.ln_eps;
        let normed = tape.layer_norm(x, p[self.ln1.0], p[self.ln1.1], eps)?;
        let attn = self.attn.forward(tape, p, normed, normed)?;
        let x1 = tape.add(attn.out, x)?;
        let normed = tape.layer_norm(x1, p[self.ln2.0], p[self.ln2.1], eps)?;
        let mlp = mac::section("mlp", || -> Result<_> {
            let flat = tape.reshape(normed, &[b * n, d])?;
            let h = tape.matmul(flat, p[self.fc1.0])?;
            let h = tape.add_bias(h, p[self.fc1.1])?;
            let h = tape.relu(h);
            let o = tape.matmul(h, p[self.fc2.0])?;
            let o = tape.add_bias(o, p[self.fc2.1])?;
            Ok(tape.reshape(o, &[b, n, d])?)
        })?;
        let out = tape.add(mlp, x1)?;
        Ok(BlockOutput { out, weights: attn.weights })
    }
}

/// How a deformable convolution's main kernel starts out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelInit {
    /// He-uniform random weights.
    Random,
    /// Centre tap of channel `c` to output `c` is 1, everything else 0;
    /// requires `cin == cout`.
    Identity,
}

/// Deformable convolution: `Y(p) = Σ_k w_k · X(p + p_k + Δp_k(p))` with offsets
/// predicted from `X` by a zero-initialized `K×K` convolution (`2K²` channels,
/// ordered `(Δrow, Δcol)` per tap, shared across input channels).
#[derive(Clone, Debug)]
pub struct DeformableConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub offset_weight: ParamId,
    pub offset_bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

pub struct DeformOutput {
    pub out: Var,
    /// `[2K², H, W]`
    pub offsets: Var,
}

impl DeformableConv {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        init: KernelInit,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return param_err(format!("deformable kernel must be odd, got {kernel}"));
        }
        let kk = kernel * kernel;
        let w = match init {
            KernelInit::Random => he(&[cout, cin, kernel, kernel], cin * kk, rng),
            KernelInit::Identity => {
                if cin != cout {
                    return param_err("identity kernel needs cin == cout");
                }
                let centre = kk / 2;
                Tensor::from_fn(&[cout, cin, kernel, kernel], |i| {
                    let (co, ci, tap) = (i / (cin * kk), (i / kk) % cin, i % kk);
                    if co == ci && tap == centre {
                        T::one()
                    } else {
                        T::zero()
                    }
                })
            }
        };
        Ok(Self {
            weight: store.add(format!("{name}.w"), w, true),
            bias: store.add(format!("{name}.b"), Tensor::zeros(&[cout]), false),
            offset_weight: store.add(
                format!("{name}.offset.w"),
                Tensor::zeros(&[2 * kk, cin, kernel, kernel]),
                true,
            ),
            offset_bias: store.add(format!("{name}.offset.b"), Tensor::zeros(&[2 * kk]), false),
            cin,
            cout,
            kernel,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward_with_offsets(tape, p, x)?.out)
    }

    pub fn forward_with_offsets<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
    ) -> Result<DeformOutput> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[0] != self.cin {
            return dim_err(format!(
                "deformable conv expects {}×H×W, got {s:?}",
                self.cin
            ));
        }
        let w = s[2];
        let (k, kk, n) = (self.kernel, self.kernel * self.kernel, s[1] * s[2]);
        let pad = (k - 1) / 2;
        let offsets = tape.conv2d(
            x,
            p[self.offset_weight],
            Some(p[self.offset_bias]),
            Conv2dSpec::same(k, 1),
        )?;
        // [2K², H, W] → [K²·HW, 2], point index = tap·HW + position
        let per_tap = tape.reshape(offsets, &[kk, 2, n])?;
        let per_tap = tape.permute(per_tap, &[0, 2, 1])?;
        let deltas = tape.reshape(per_tap, &[kk * n, 2])?;
        let base = Tensor::from_fn(&[kk * n, 2], |i| {
            let (point, axis) = (i / 2, i % 2);
            let (tap, pos) = (point / n, point % n);
            let v = if axis == 0 {
                pos / w + tap / k
            } else {
                pos % w + tap % k
            };
            T::lit(v as f64 - pad as f64)
        });
        let base = tape.constant(base);
        let points = tape.add(base, deltas)?;
        let sampled = tape.bilinear_sample(x, points)?;
        let cols = tape.reshape(sampled, &[self.cin * kk, n])?;
        let wmat = tape.reshape(p[self.weight], &[self.cout, self.cin * kk])?;
        let out = tape.matmul(wmat, cols)?;
        let out = tape.add_channel_bias(out, p[self.bias])?;
        let out = tape.reshape(out, &[self.cout, s[1], s[2]])?;
        Ok(DeformOutput { out, offsets })
    }
}
