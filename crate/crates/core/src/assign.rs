//! Region descriptors pooled from motion features, cosine partition of pixel
//! descriptors against them, and the three-term objective.

use rand::Rng;
use vidseg_tensor::{Conv2dSpec, Real, Tape, Tensor, Var};

use crate::error::{dim_err, param_err, Result};
use crate::nn::ConvLayer;
use crate::params::{Bound, ParamStore};

pub const IGNORE_LABEL: u32 = 255;
/// Norm floor when normalizing region descriptors.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct SemanticAssign {
    pub mask_conv: ConvLayer,
    pub mask_out: ConvLayer,
    pub classes: usize,
}

/// Unit-norm region descriptors `[Cls, C]` and the soft mask logits
/// `[Cls, h, w]` that weighted them.
#[derive(Clone, Copy, Debug)]
pub struct RegionDescriptors {
    pub descriptors: Var,
    pub soft_mask_logits: Var,
}

impl SemanticAssign {
    pub fn new<T: Real>(store: &mut ParamStore<T>, channels: usize, classes: usize, rng: &mut impl Rng) -> Result<Self> {
        if classes < 2 {
            return param_err(format!("need at least 2 classes, got {classes}"));
        }
        Ok(Self {
            mask_conv: ConvLayer::new(store, "assign.mask0", channels, channels, 3, Conv2dSpec::same(3, 1), rng),
            mask_out: ConvLayer::new(store, "assign.mask1", channels, classes, 1, Conv2dSpec::same(1, 1), rng),
            classes,
        })
    }

    pub fn region_descriptors<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, motion: Var) -> Result<RegionDescriptors> {
        let h = self.mask_conv.forward(tape, p, motion)?;
        let h = tape.relu(h);
        let logits = self.mask_out.forward(tape, p, h)?;
        let weights = tape.softmax(logits, 0)?;
        let descriptors = pool_descriptors(tape, weights, motion)?;
        Ok(RegionDescriptors {
            descriptors,
            soft_mask_logits: logits,
        })
    }
}

/// `r_j = normalize(Σ_p a_j(p)·M(:, p) / Σ_p a_j(p))` for class weight maps
/// `weights: [Cls, h, w]` and features `feats: [C, h, w]`.
pub fn pool_descriptors<T: Real>(tape: &mut Tape<T>, weights: Var, feats: Var) -> Result<Var> {
    let (ws, fs) = (tape.shape(weights).to_vec(), tape.shape(feats).to_vec());
    if ws.len() != 3 || fs.len() != 3 || ws[1..] != fs[1..] {
        return dim_err(format!("pooling weights {ws:?} do not match features {fs:?}"));
    }
    let n = fs[1] * fs[2];
    let wf = tape.reshape(weights, &[ws[0], n])?;
    let ff = tape.reshape(feats, &[fs[0], n])?;
    let pooled = tape.weighted_pool(wf, ff)?;
    Ok(tape.l2_normalize_rows(pooled, NORM_EPS)?)
}

/// Similarity logits `[Cls, h, w]`: dot products of each region descriptor
/// with each pixel descriptor of `desc: [C, h, w]`.
pub fn similarity<T: Real>(tape: &mut Tape<T>, desc: Var, regions: Var) -> Result<Var> {
    let (ds, rs) = (tape.shape(desc).to_vec(), tape.shape(regions).to_vec());
    if ds.len() != 3 || rs.len() != 2 || rs[1] != ds[0] {
        return dim_err(format!("descriptors {ds:?} do not match regions {rs:?}"));
    }
    let flat = tape.reshape(desc, &[ds[0], ds[1] * ds[2]])?;
    let sim = tape.matmul(regions, flat)?;
    Ok(tape.reshape(sim, &[rs[0], ds[1], ds[2]])?)
}

/// Per-pixel argmax over the class axis of `[Cls, h, w]` scores; the lowest
/// class index wins ties.
pub fn argmax_classes<T: Real>(scores: &Tensor<T>) -> Result<Tensor<u32>> {
    let s = scores.shape();
    if s.len() != 3 {
        return dim_err(format!("class scores must be Cls×h×w, got {s:?}"));
    }
    let (cls, n) = (s[0], s[1] * s[2]);
    let d = scores.data();
    let labels = (0..n)
        .map(|px| {
            let mut best = 0;
            for j in 1..cls {
                if d[j * n + px] > d[best * n + px] {
                    best = j;
                }
            }
            best as u32
        })
        .collect();
    Ok(Tensor::from_vec(&[s[1], s[2]], labels)?)
}

/// Assigns each pixel of `desc: [C, h, w]` to its most similar row of
/// `regions: [Cls, C]`. Returns the class map and the similarity logits.
pub fn semantic_partition<T: Real>(desc: &Tensor<T>, regions: &Tensor<T>) -> Result<(Tensor<u32>, Tensor<T>)> {
    let mut tape = Tape::new();
    let d = tape.constant(desc.clone());
    let r = tape.constant(regions.clone());
    let sim = similarity(&mut tape, d, r)?;
    let sim = tape.value(sim).clone();
    Ok((argmax_classes(&sim)?, sim))
}

/// Cross-entropy of `[Cls, h, w]` logits against labels at `H×W`; logits are
/// bilinearly upsampled when the resolutions differ.
pub fn segmentation_loss<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &Tensor<u32>) -> Result<Var> {
    let ls = tape.shape(logits).to_vec();
    let gs = labels.shape();
    if ls.len() != 3 || gs.len() != 2 {
        return dim_err(format!("logits {ls:?} and labels {gs:?}"));
    }
    let full = if ls[1..] == gs[..] {
        logits
    } else {
        tape.bilinear_resize(logits, gs[0], gs[1])?
    };
    Ok(tape.cross_entropy(full, labels, IGNORE_LABEL)?)
}

/// The three loss terms and their unweighted sum.
#[derive(Clone, Copy, Debug)]
pub struct Losses {
    pub pixel: Var,
    pub region: Var,
    pub mask: Var,
    pub total: Var,
}

pub fn total_loss<T: Real>(tape: &mut Tape<T>, pixel: Var, region: Var, mask: Var) -> Result<Losses> {
    let sum = tape.add(pixel, region)?;
    let total = tape.add(sum, mask)?;
    Ok(Losses {
        pixel,
        region,
        mask,
        total,
    })
}
