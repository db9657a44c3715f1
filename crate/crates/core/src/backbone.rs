//! Five-stage convolutional backbone with output stride 8: three stride-2
//! stages, then two stride-1 stages dilated by 2 and 4.

use rand::Rng;
use vidseg_tensor::{Conv2dSpec, Real, Tape, Var};

use crate::error::{param_err, Result};
use crate::nn::ConvLayer;
use crate::params::{Bound, ParamStore};

pub const STAGE_STRIDES: [usize; 5] = [2, 2, 2, 1, 1];
pub const STAGE_DILATIONS: [usize; 5] = [1, 1, 1, 2, 4];
pub const OUTPUT_STRIDE: usize = 8;
const KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub widths: [usize; 5],
    pub blocks_per_stage: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            widths: [8, 16, 32, 32, 32],
            blocks_per_stage: 1,
        }
    }
}

/// Stage 3–5 features of one frame, all at stride 8.
#[derive(Clone, Copy, Debug)]
pub struct FramePyramid {
    pub f3: Var,
    pub f4: Var,
    pub f5: Var,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    stages: Vec<Vec<ConvLayer>>,
}

impl Backbone {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.blocks_per_stage == 0 || cfg.widths.contains(&0) {
            return param_err(format!("invalid backbone config {cfg:?}"));
        }
        let mut cin = 3;
        let mut stages = Vec::with_capacity(5);
        for (s, &cout) in cfg.widths.iter().enumerate() {
            let dilation = STAGE_DILATIONS[s];
            let layers = (0..cfg.blocks_per_stage)
                .map(|b| {
                    let spec = Conv2dSpec {
                        stride: if b == 0 { STAGE_STRIDES[s] } else { 1 },
                        dilation,
                        padding: dilation,
                    };
                    let layer_in = if b == 0 { cin } else { cout };
                    ConvLayer::new(store, &format!("backbone.s{}.{b}", s + 1), layer_in, cout, KERNEL, spec, rng)
                })
                .collect();
            stages.push(layers);
            cin = cout;
        }
        Ok(Self { cfg, stages })
    }

    /// `frame: 3×H×W` with `H`, `W` divisible by 8.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, frame: Var) -> Result<FramePyramid> {
        let s = tape.shape(frame);
        if s.len() != 3 || s[0] != 3 || s[1] % OUTPUT_STRIDE != 0 || s[2] % OUTPUT_STRIDE != 0 {
            return param_err(format!("frame must be 3×H×W with H, W divisible by 8, got {s:?}"));
        }
        let mut x = frame;
        let mut outs = Vec::with_capacity(3);
        for (i, stage) in self.stages.iter().enumerate() {
            for layer in stage {
                let y = layer.forward(tape, p, x)?;
                x = tape.relu(y);
            }
            if i >= 2 {
                outs.push(x);
            }
        }
        Ok(FramePyramid {
            f3: outs[0],
            f4: outs[1],
            f5: outs[2],
        })
    }
}

/// Receptive field (in input pixels) of one unit after `stages` stages with
/// one block each.
pub fn receptive_field(stages: usize) -> usize {
    let (mut field, mut jump) = (1, 1);
    for s in 0..stages {
        field += (KERNEL - 1) * STAGE_DILATIONS[s] * jump;
        jump *= STAGE_STRIDES[s];
    }
    field
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use vidseg_tensor::Tensor;

    fn build(cfg: BackboneConfig) -> (Backbone, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let net = Backbone::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        (net, store)
    }

    #[test]
    fn closed_form_receptive_fields() {
        assert_eq!(receptive_field(3), 15);
        assert_eq!(receptive_field(4), 47);
        assert_eq!(receptive_field(5), 111);
        assert_eq!(STAGE_STRIDES.iter().product::<usize>(), OUTPUT_STRIDE);
    }

    #[test]
    fn pyramid_shapes_at_stride_eight() {
        let (net, store) = build(BackboneConfig::default());
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::uniform(&[3, 32, 32], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
        let pyr = net.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(pyr.f3), &[32, 4, 4]);
        assert_eq!(tape.shape(pyr.f4), &[32, 4, 4]);
        assert_eq!(tape.shape(pyr.f5), &[32, 4, 4]);
    }

    #[test]
    fn zero_input_gives_zero_pyramid() {
        let (net, store) = build(BackboneConfig::default());
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[3, 16, 24]));
        let pyr = net.forward(&mut tape, &p, x).unwrap();
        for v in [pyr.f3, pyr.f4, pyr.f5] {
            assert!(tape.value(v).data().iter().all(|&a| a == 0.0));
        }
    }

    #[test]
    fn shared_parameters_are_deterministic_across_frames() {
        let (net, store) = build(BackboneConfig::default());
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let frame = Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        let a = tape.constant(frame.clone());
        let b = tape.constant(frame);
        let pa = net.forward(&mut tape, &p, a).unwrap();
        let pb = net.forward(&mut tape, &p, b).unwrap();
        assert_eq!(tape.value(pa.f5).data(), tape.value(pb.f5).data());
    }

    #[test]
    fn rejects_indivisible_frames() {
        let (net, store) = build(BackboneConfig::default());
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[3, 12, 16]));
        assert!(matches!(net.forward(&mut tape, &p, x), Err(crate::Error::Parameter(_))));
    }

    #[test]
    fn stage_one_receives_gradient_from_f5() {
        let (net, store) = build(BackboneConfig::default());
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(5)));
        let pyr = net.forward(&mut tape, &p, x).unwrap();
        let loss = tape.sum(pyr.f5);
        let grads = tape.backward(loss).unwrap();
        let first = p[net.stages[0][0].weight];
        assert!(grads.get(first).unwrap().data().iter().any(|&g| g != 0.0));
    }

    /// Brute-force receptive field: the input rows/columns that receive
    /// gradient from the centre unit, with all weights positive so no ReLU
    /// ever gates a path.
    fn measured_field(stages: usize) -> usize {
        let cfg = BackboneConfig {
            widths: [1; 5],
            blocks_per_stage: 1,
        };
        let (net, mut store) = build(cfg);
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::full(&shape, 0.1)).unwrap();
        }
        let size = 256;
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.leaf(Tensor::ones(&[3, size, size]));
        let pyr = net.forward(&mut tape, &p, x).unwrap();
        let feat = match stages {
            3 => pyr.f3,
            4 => pyr.f4,
            _ => pyr.f5,
        };
        let side = size / 8;
        let centre = tape.slice(feat, 1, side / 2, 1).unwrap();
        let centre = tape.slice(centre, 2, side / 2, 1).unwrap();
        let loss = tape.sum(centre);
        let g = tape.backward(loss).unwrap();
        let g = g.get(x).unwrap();
        let rows: Vec<usize> = (0..size)
            .filter(|&r| (0..size).any(|c| g.at(&[0, r, c]) != 0.0))
            .collect();
        rows.last().unwrap() - rows[0] + 1
    }

    #[test]
    fn receptive_field_matches_gradient_support() {
        for stages in 3..=5 {
            assert_eq!(measured_field(stages), receptive_field(stages), "stage {stages}");
        }
        assert!(receptive_field(5) > receptive_field(4));
    }
}
