//! Stage transformer over the current frame's backbone stages and motion
//! feature, plus the pixel-descriptor head.

use rand::Rng;
use vidseg_tensor::{Conv2dSpec, Real, Tape, Var};

use crate::error::{dim_err, param_err, Result};
use crate::nn::{self, ConvLayer, MhsaBlock, MhsaConfig};
use crate::params::{Bound, ParamStore};

/// Stage token order in each per-position sequence.
pub const STAGE_TOKENS: usize = 4;
const F5_SLOT: usize = 2;

/// Which attended stage token becomes the fused feature.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OutputSlot {
    #[default]
    F5,
    Mean,
}

#[derive(Clone, Debug)]
pub struct StateAlign {
    pub proj3: ConvLayer,
    pub proj4: ConvLayer,
    pub block: MhsaBlock,
    pub head_conv: ConvLayer,
    pub head_out: ConvLayer,
    pub classifier: ConvLayer,
    pub slot: OutputSlot,
    pub descriptor_dim: usize,
}

pub struct StageOutput {
    pub fused: Var,
    /// `[positions·heads, 4, 4]`
    pub weights: Var,
}

impl StateAlign {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        c3: usize,
        c4: usize,
        block: MhsaConfig,
        classes: usize,
        slot: OutputSlot,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if classes < 2 {
            return param_err(format!("need at least 2 classes, got {classes}"));
        }
        let c5 = block.dim;
        let one = Conv2dSpec::same(1, 1);
        Ok(Self {
            proj3: ConvLayer::new(store, "state.proj3", c3, c5, 1, one, rng),
            proj4: ConvLayer::new(store, "state.proj4", c4, c5, 1, one, rng),
            block: MhsaBlock::new(store, "state.stage", block, rng)?,
            head_conv: ConvLayer::new(store, "state.head0", c5, c5, 3, Conv2dSpec::same(3, 1), rng),
            head_out: ConvLayer::new(store, "state.head1", c5, c5, 1, one, rng),
            classifier: ConvLayer::new(store, "state.classifier", c5, classes, 1, one, rng),
            slot,
            descriptor_dim: c5,
        })
    }

    /// Per-position attention over the tokens `(F3, F4, F5, M)`.
    pub fn stage_transform<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        f3: Var,
        f4: Var,
        f5: Var,
        motion: Var,
    ) -> Result<StageOutput> {
        let s5 = tape.shape(f5).to_vec();
        for (name, v) in [("F3", f3), ("F4", f4), ("M", motion)] {
            let s = tape.shape(v);
            if s.len() != 3 || s[1..] != s5[1..] {
                return dim_err(format!("stage {name} has shape {s:?}, F5 has {s5:?}"));
            }
        }
        if tape.shape(motion)[0] != self.descriptor_dim || s5[0] != self.descriptor_dim {
            return dim_err(format!(
                "F5 and motion features need {} channels",
                self.descriptor_dim
            ));
        }
        let (h, w) = (s5[1], s5[2]);
        let t3 = self.proj3.forward(tape, p, f3)?;
        let t4 = self.proj4.forward(tape, p, f4)?;
        let seq = nn::stack_positions(tape, &[t3, t4, f5, motion])?;
        let attended = self.block.forward_with_weights(tape, p, seq)?;
        let fused = match self.slot {
            OutputSlot::F5 => {
                let tok = tape.slice(attended.out, 1, F5_SLOT, 1)?;
                nn::from_tokens(tape, tok, h, w)?
            }
            OutputSlot::Mean => {
                let maps = nn::unstack_positions(tape, attended.out, h, w)?;
                let mut acc = maps[0];
                for &m in &maps[1..] {
                    acc = tape.add(acc, m)?;
                }
                tape.scale(acc, T::lit(1.0 / STAGE_TOKENS as f64))
            }
        };
        Ok(StageOutput {
            fused,
            weights: attended.weights,
        })
    }

    /// Returns the descriptor map `P` and the classification logits used to
    /// supervise it.
    pub fn pixel_descriptors<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, s: Var) -> Result<(Var, Var)> {
        let h = self.head_conv.forward(tape, p, s)?;
        let h = tape.relu(h);
        let desc = self.head_out.forward(tape, p, h)?;
        let logits = self.classifier.forward(tape, p, desc)?;
        Ok((desc, logits))
    }
}
