//! Decoupled spatio-temporal transformer: a pyramid of per-frame spatial
//! attention branches followed by deformable alignment of the two previous
//! frames and per-position attention over the three frames.

use rand::Rng;
use vidseg_tensor::{mac, Real, Tape, Var};

use crate::error::{dim_err, param_err, Result};
use crate::nn::{self, DeformableConv, KernelInit, MhsaBlock, MhsaConfig};
use crate::params::{Bound, ParamStore};

/// Spatial downsampling before attention for frames `t−2`, `t−1`, `t`.
pub const DOWNSAMPLE: [usize; 3] = [4, 2, 1];

#[derive(Clone, Debug)]
pub struct MotionAlign {
    pub spatial: [MhsaBlock; 3],
    pub aligners: [DeformableConv; 2],
    pub temporal: MhsaBlock,
}

/// Motion features for frames `t−2`, `t−1`, `t`, each shaped like the input.
#[derive(Clone, Copy, Debug)]
pub struct MotionOutput {
    pub frames: [Var; 3],
    /// Per-position temporal attention, `[positions·heads, 3, 3]`.
    pub temporal_weights: Var,
}

impl MotionOutput {
    pub fn current(&self) -> Var {
        self.frames[2]
    }
}

impl MotionAlign {
    pub fn new<T: Real>(store: &mut ParamStore<T>, block: MhsaConfig, rng: &mut impl Rng) -> Result<Self> {
        let c = block.dim;
        let mut spatial = Vec::with_capacity(3);
        for (i, ds) in DOWNSAMPLE.iter().enumerate() {
            spatial.push(MhsaBlock::new(store, &format!("motion.spatial{i}.ds{ds}"), block, rng)?);
        }
        let mut aligners = Vec::with_capacity(2);
        for i in 0..2 {
            aligners.push(DeformableConv::new(
                store,
                &format!("motion.align{i}"),
                c,
                c,
                3,
                KernelInit::Identity,
                rng,
            )?);
        }
        let temporal = MhsaBlock::new(store, "motion.temporal", block, rng)?;
        Ok(Self {
            spatial: spatial.try_into().expect("three branches"),
            aligners: aligners.try_into().expect("two aligners"),
            temporal,
        })
    }

    /// Zeroes every attention/MLP branch and offset predictor, leaving the
    /// resampling paths and identity alignment.
    pub fn zero_init<T: Real>(&self, store: &mut ParamStore<T>) {
        for block in self.spatial.iter().chain([&self.temporal]) {
            block.zero_branches(store);
        }
        for a in &self.aligners {
            for id in [a.offset_weight, a.offset_bias] {
                let shape = store.get(id).shape().to_vec();
                store.set(id, vidseg_tensor::Tensor::zeros(&shape)).expect("same shape");
            }
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, f5: [Var; 3]) -> Result<MotionOutput> {
        let shape = tape.shape(f5[2]).to_vec();
        for &f in &f5 {
            if tape.shape(f) != shape.as_slice() {
                return dim_err(format!(
                    "motion frames must share a shape, got {:?} and {shape:?}",
                    tape.shape(f)
                ));
            }
        }
        let pst = mac::section("pst", || -> Result<_> {
            let mut out = [f5[0]; 3];
            for i in 0..3 {
                out[i] = pst_branch(tape, p, f5[i], DOWNSAMPLE[i], &self.spatial[i])?;
            }
            Ok(out)
        })?;
        mac::section("att", || self.att_fuse(tape, p, pst))
    }

    /// Aligns the two previous frames with deformable convolution, then runs
    /// the temporal block on each position's three-token sequence.
    pub fn att_fuse<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, pst: [Var; 3]) -> Result<MotionOutput> {
        let shape = tape.shape(pst[2]).to_vec();
        if shape.len() != 3 || pst.iter().any(|&v| tape.shape(v) != shape.as_slice()) {
            return dim_err(format!("temporal fusion inputs must share a C×h×w shape, got {shape:?}"));
        }
        let (h, w) = (shape[1], shape[2]);
        let a2 = self.aligners[0].forward(tape, p, pst[0])?;
        let a1 = self.aligners[1].forward(tape, p, pst[1])?;
        let seq = nn::stack_positions(tape, &[a2, a1, pst[2]])?;
        let fused = self.temporal.forward_with_weights(tape, p, seq)?;
        let frames = nn::unstack_positions(tape, fused.out, h, w)?;
        Ok(MotionOutput {
            frames: [frames[0], frames[1], frames[2]],
            temporal_weights: fused.weights,
        })
    }
}

/// Extent after downsampling by `factor`, rounded up.
pub fn reduced(extent: usize, factor: usize) -> usize {
    extent.div_ceil(factor)
}

/// Downsample by `factor`, spatial self-attention over all positions, and
/// upsample back to the input extents. Resizes are skipped for factor 1.
/// Maps smaller than the factor shrink to a single position.
pub fn pst_branch<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    f: Var,
    factor: usize,
    block: &MhsaBlock,
) -> Result<Var> {
    let s = tape.shape(f).to_vec();
    if !matches!(factor, 1 | 2 | 4) {
        return param_err(format!("downsample factor must be 1, 2 or 4, got {factor}"));
    }
    if s.len() != 3 {
        return dim_err(format!("spatial branch expects C×h×w, got {s:?}"));
    }
    let (h, w) = (s[1], s[2]);
    let (sh, sw) = (reduced(h, factor), reduced(w, factor));
    let small = if factor == 1 { f } else { tape.bilinear_resize(f, sh, sw)? };
    let tokens = nn::to_tokens(tape, small)?;
    let attended = block.forward(tape, p, tokens)?;
    let map = nn::from_tokens(tape, attended, sh, sw)?;
    if factor == 1 {
        Ok(map)
    } else {
        Ok(tape.bilinear_resize(map, h, w)?)
    }
}
