//! The full segmentation network: shared backbone over three frames, motion
//! alignment, stage alignment and semantic assignment.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vidseg_tensor::{mac, Real, Tape, Tensor, Var};

use crate::assign::{self, Losses, RegionDescriptors, SemanticAssign};
use crate::backbone::{Backbone, BackboneConfig, FramePyramid};
use crate::error::{dim_err, param_err, Result};
use crate::motion::{MotionAlign, MotionOutput};
use crate::nn::MhsaConfig;
use crate::params::{Bound, ParamStore};
use crate::state::{OutputSlot, StateAlign};

/// Number of frames per sample: `t−2`, `t−1`, `t`.
pub const FRAMES: usize = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Variant {
    #[default]
    Full,
    /// Ablation without motion alignment: only the current frame is used and
    /// its F5 features stand in for the motion feature.
    NoMotion,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub classes: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub slot: OutputSlot,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            classes: 4,
            heads: 2,
            mlp_ratio: 2,
            slot: OutputSlot::F5,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    fn block(&self) -> MhsaConfig {
        MhsaConfig {
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            ..MhsaConfig::new(self.backbone.widths[4])
        }
    }
}

#[derive(Clone, Debug)]
pub struct Msaf {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub motion: Option<MotionAlign>,
    pub state: StateAlign,
    pub assign: SemanticAssign,
}

#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub pyramid: FramePyramid,
    pub motion: Option<MotionOutput>,
    /// Motion feature of the current frame (F5 for the ablation).
    pub motion_current: Var,
    /// Pixel descriptors `[C, h, w]`.
    pub descriptors: Var,
    pub pixel_logits: Var,
    pub regions: RegionDescriptors,
    /// `[Cls, h, w]`
    pub sim_logits: Var,
}

impl Msaf {
    /// Builds the network and its parameters, initialized from `seed`.
    pub fn new<T: Real>(cfg: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        if cfg.classes < 2 {
            return param_err(format!("need at least 2 classes, got {}", cfg.classes));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let block = cfg.block();
        let backbone = Backbone::new(&mut store, cfg.backbone, &mut rng)?;
        let motion = match cfg.variant {
            Variant::Full => Some(MotionAlign::new(&mut store, block, &mut rng)?),
            Variant::NoMotion => None,
        };
        let w = cfg.backbone.widths;
        let state = StateAlign::new(&mut store, w[2], w[3], block, cfg.classes, cfg.slot, &mut rng)?;
        let assign = SemanticAssign::new(&mut store, w[4], cfg.classes, &mut rng)?;
        if state.descriptor_dim != w[4] {
            return param_err("pixel and region descriptor widths differ");
        }
        Ok((
            Self {
                cfg,
                backbone,
                motion,
                state,
                assign,
            },
            store,
        ))
    }

    /// `frames` are `t−2`, `t−1`, `t`, each `3×H×W`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, frames: [Var; FRAMES]) -> Result<Outputs> {
        let s = tape.shape(frames[2]).to_vec();
        if frames.iter().any(|&f| tape.shape(f) != s.as_slice()) {
            return dim_err("frames must share a shape");
        }
        let (pyramid, motion) = match &self.motion {
            Some(m) => {
                let pyrs = mac::section("backbone", || -> Result<_> {
                    let mut out = Vec::with_capacity(FRAMES);
                    for &f in &frames {
                        out.push(self.backbone.forward(tape, p, f)?);
                    }
                    Ok(out)
                })?;
                let out = m.forward(tape, p, [pyrs[0].f5, pyrs[1].f5, pyrs[2].f5])?;
                (pyrs[2], Some(out))
            }
            None => {
                let pyr = mac::section("backbone", || self.backbone.forward(tape, p, frames[2]))?;
                (pyr, None)
            }
        };
        let motion_current = motion.map_or(pyramid.f5, |m| m.current());
        let (descriptors, pixel_logits) = mac::section("state", || -> Result<_> {
            let fused = self
                .state
                .stage_transform(tape, p, pyramid.f3, pyramid.f4, pyramid.f5, motion_current)?;
            self.state.pixel_descriptors(tape, p, fused.fused)
        })?;
        let (regions, sim_logits) = mac::section("assign", || -> Result<_> {
            let regions = self.assign.region_descriptors(tape, p, motion_current)?;
            let sim = assign::similarity(tape, descriptors, regions.descriptors)?;
            Ok((regions, sim))
        })?;
        Ok(Outputs {
            pyramid,
            motion,
            motion_current,
            descriptors,
            pixel_logits,
            regions,
            sim_logits,
        })
    }

    pub fn losses<T: Real>(&self, tape: &mut Tape<T>, out: &Outputs, labels: &Tensor<u32>) -> Result<Losses> {
        let pixel = assign::segmentation_loss(tape, out.pixel_logits, labels)?;
        let region = assign::segmentation_loss(tape, out.regions.soft_mask_logits, labels)?;
        let mask = assign::segmentation_loss(tape, out.sim_logits, labels)?;
        assign::total_loss(tape, pixel, region, mask)
    }

    /// Full-resolution class map for one sample.
    pub fn predict<T: Real>(&self, store: &ParamStore<T>, frames: &[Tensor<T>; FRAMES]) -> Result<Tensor<u32>> {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let vars = [0, 1, 2].map(|i| tape.constant(frames[i].clone()));
        let out = self.forward(&mut tape, &p, vars)?;
        let s = frames[2].shape();
        let full = tape.bilinear_resize(out.sim_logits, s[1], s[2])?;
        assign::argmax_classes(tape.value(full))
    }
}
