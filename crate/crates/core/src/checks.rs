//! Gradient-check suite over every differentiable op and composed block.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use vidseg_tensor::{grad_check, Conv2dSpec, GradCheckConfig, GradCheckReport, Tape, Tensor, Var};

use crate::assign::{self, SemanticAssign};
use crate::backbone::BackboneConfig;
use crate::error::Result;
use crate::model::{ModelConfig, Msaf};
use crate::motion::{self, MotionAlign};
use crate::nn::{Attention, DeformableConv, KernelInit, MhsaBlock, MhsaConfig};
use crate::params::{Bound, ParamStore};
use crate::report::sig6;
use crate::state::{OutputSlot, StateAlign};

/// Relative-error tolerance for single ops and blocks.
pub const BLOCK_TOL: f64 = 1e-4;
/// Relative-error tolerance for the whole network.
pub const PIPELINE_TOL: f64 = 1e-3;

#[derive(Clone, Debug, Serialize)]
pub struct CheckSummary {
    pub name: &'static str,
    pub seeds: usize,
    pub coordinates: usize,
    #[serde(serialize_with = "sig6")]
    pub tol: f64,
    #[serde(serialize_with = "sig6")]
    pub max_rel_error: f64,
    #[serde(serialize_with = "sig6")]
    pub max_kink_fraction: f64,
    pub passed: bool,
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `Σ v ⊙ R` for a fixed random `R`.
fn project(tape: &mut Tape<f64>, v: Var, seed: u64) -> vidseg_tensor::Result<Var> {
    let r = tape.constant(random(tape.shape(v), seed ^ 0x5eed));
    let m = tape.mul(v, r)?;
    Ok(tape.sum(m))
}

type Check = fn(u64, &GradCheckConfig) -> Result<GradCheckReport>;

fn cfg_for(seed: u64, tol: f64, coords: Option<usize>) -> GradCheckConfig {
    GradCheckConfig {
        tol,
        seed,
        max_coords_per_input: coords,
        ..GradCheckConfig::default()
    }
}

/// Checks `f(params, data)` with both parameters and data as inputs.
fn check_with_params(
    store: &ParamStore<f64>,
    data: Vec<Tensor<f64>>,
    cfg: &GradCheckConfig,
    f: impl Fn(&mut Tape<f64>, &Bound, &[Var]) -> Result<Var> + Sync,
) -> Result<GradCheckReport> {
    let n = store.len();
    let mut inputs = store.values().to_vec();
    inputs.extend(data);
    Ok(grad_check(
        |tape, vars| {
            let p = Bound::from_vars(&vars[..n]);
            Ok(f(tape, &p, &vars[n..])?)
        },
        &inputs,
        cfg,
    )?)
}

fn op_matmul(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    Ok(grad_check(
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, seed)
        },
        &[random(&[3, 4], seed), random(&[4, 5], seed + 1)],
        cfg,
    )?)
}

fn op_bmm(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    Ok(grad_check(
        |t, v| {
            let bt = t.transpose(v[1])?;
            let y = t.bmm(v[0], bt)?;
            project(t, y, seed)
        },
        &[random(&[2, 3, 4], seed), random(&[2, 5, 4], seed + 1)],
        cfg,
    )?)
}

fn op_softmax(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    Ok(grad_check(
        |t, v| {
            let y = t.softmax(v[0], (seed % 3) as usize)?;
            project(t, y, seed)
        },
        &[random(&[3, 4, 5], seed)],
        cfg,
    )?)
}

fn op_layer_norm(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    Ok(grad_check(
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(t, y, seed)
        },
        &[random(&[4, 6], seed), random(&[6], seed + 1), random(&[6], seed + 2)],
        cfg,
    )?)
}

fn op_resize(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    Ok(grad_check(
        |t, v| {
            let down = t.bilinear_resize(v[0], 3, 2)?;
            let up = t.bilinear_resize(down, 7, 9)?;
            project(t, up, seed)
        },
        &[random(&[2, 5, 6], seed)],
        cfg,
    )?)
}

fn op_sample(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let points = Tensor::uniform(&[6, 2], -0.7, 4.6, &mut ChaCha8Rng::seed_from_u64(seed + 1));
    Ok(grad_check(
        |t, v| {
            let y = t.bilinear_sample(v[0], v[1])?;
            project(t, y, seed)
        },
        &[random(&[2, 4, 5], seed), points],
        cfg,
    )?)
}

fn op_conv2d(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let spec = match seed % 3 {
        0 => Conv2dSpec::same(3, 1),
        1 => Conv2dSpec { stride: 2, dilation: 1, padding: 1 },
        _ => Conv2dSpec { stride: 1, dilation: 2, padding: 2 },
    };
    Ok(grad_check(
        |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), spec)?;
            project(t, y, seed)
        },
        &[random(&[2, 6, 5], seed), random(&[3, 2, 3, 3], seed + 1), random(&[3], seed + 2)],
        cfg,
    )?)
}

fn op_cross_entropy(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let labels = Tensor::from_fn(&[3, 4], |i| if i == 5 { assign::IGNORE_LABEL } else { ((i as u64 * 7 + seed) % 4) as u32 });
    Ok(grad_check(
        |t, v| Ok(t.cross_entropy(v[0], &labels, assign::IGNORE_LABEL)?),
        &[random(&[4, 3, 4], seed).map(|x| 3.0 * x)],
        cfg,
    )?)
}

fn op_pool_normalize(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    Ok(grad_check(
        |t, v| {
            let w = t.softmax(v[0], 0)?;
            let r = t.weighted_pool(w, v[1])?;
            let n = t.l2_normalize_rows(r, 1e-12)?;
            project(t, n, seed)
        },
        &[random(&[3, 10], seed), random(&[5, 10], seed + 1)],
        cfg,
    )?)
}

fn block_attention(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let attn = Attention::new(&mut store, "a", 8, 2, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let data = vec![random(&[1, 5, 8], seed + 1), random(&[1, 7, 8], seed + 2)];
    check_with_params(&store, data, cfg, |t, p, x| {
        let out = attn.forward(t, p, x[0], x[1])?;
        Ok(project(t, out.out, seed)?)
    })
}

fn block_mhsa(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let block = MhsaBlock::new(&mut store, "b", MhsaConfig::new(8), &mut ChaCha8Rng::seed_from_u64(seed))?;
    check_with_params(&store, vec![random(&[1, 16, 8], seed + 1)], cfg, |t, p, x| {
        let y = block.forward(t, p, x[0])?;
        Ok(project(t, y, seed)?)
    })
}

fn block_deformable(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let dcn = DeformableConv::new(&mut store, "d", 3, 4, 3, KernelInit::Random, &mut ChaCha8Rng::seed_from_u64(seed))?;
    store.set(dcn.offset_weight, random(&[18, 3, 3, 3], seed + 3).map(|v| 0.3 * v))?;
    store.set(dcn.offset_bias, random(&[18], seed + 4).map(|v| 0.4 * v))?;
    check_with_params(&store, vec![random(&[3, 5, 6], seed + 1)], cfg, |t, p, x| {
        let y = dcn.forward(t, p, x[0])?;
        Ok(project(t, y, seed)?)
    })
}

fn motion_store(seed: u64) -> Result<(MotionAlign, ParamStore<f64>)> {
    let mut store = ParamStore::new();
    let m = MotionAlign::new(&mut store, MhsaConfig::new(8), &mut ChaCha8Rng::seed_from_u64(seed))?;
    for (i, a) in m.aligners.iter().enumerate() {
        store.set(a.offset_weight, random(&[18, 8, 3, 3], seed + 10 + i as u64).map(|v| 0.1 * v))?;
    }
    Ok((m, store))
}

fn block_pst(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (m, store) = motion_store(seed)?;
    let branch = (seed % 3) as usize;
    let factor = motion::DOWNSAMPLE[branch];
    check_with_params(&store, vec![random(&[8, 8, 8], seed + 1)], cfg, |t, p, x| {
        let y = motion::pst_branch(t, p, x[0], factor, &m.spatial[branch])?;
        Ok(project(t, y, seed)?)
    })
}

fn block_att_fuse(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (m, store) = motion_store(seed)?;
    let data = (0..3).map(|i| random(&[8, 4, 4], seed + 1 + i)).collect();
    check_with_params(&store, data, cfg, |t, p, x| {
        let out = m.att_fuse(t, p, [x[0], x[1], x[2]])?;
        let mut acc = project(t, out.frames[0], seed)?;
        for (i, &f) in out.frames[1..].iter().enumerate() {
            let l = project(t, f, seed + 1 + i as u64)?;
            acc = t.add(acc, l)?;
        }
        Ok(acc)
    })
}

fn block_stage(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let slot = if seed % 2 == 0 { OutputSlot::F5 } else { OutputSlot::Mean };
    let s = StateAlign::new(&mut store, 4, 6, MhsaConfig::new(8), 4, slot, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let data = vec![
        random(&[4, 3, 3], seed + 1),
        random(&[6, 3, 3], seed + 2),
        random(&[8, 3, 3], seed + 3),
        random(&[8, 3, 3], seed + 4),
    ];
    check_with_params(&store, data, cfg, |t, p, x| {
        let out = s.stage_transform(t, p, x[0], x[1], x[2], x[3])?;
        Ok(project(t, out.fused, seed)?)
    })
}

fn block_heads(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = StateAlign::new(&mut store, 4, 4, MhsaConfig::new(8), 3, OutputSlot::F5, &mut rng)?;
    let a = SemanticAssign::new(&mut store, 8, 3, &mut rng)?;
    let labels = Tensor::from_fn(&[8, 8], |i| ((i / 8 / 3 + i % 8 / 4 + seed as usize) % 3) as u32);
    let data = vec![random(&[8, 4, 4], seed + 1), random(&[8, 4, 4], seed + 2)];
    check_with_params(&store, data, cfg, |t, p, x| {
        let (desc, pixel_logits) = s.pixel_descriptors(t, p, x[0])?;
        let regions = a.region_descriptors(t, p, x[1])?;
        let sim = assign::similarity(t, desc, regions.descriptors)?;
        let l1 = assign::segmentation_loss(t, pixel_logits, &labels)?;
        let l2 = assign::segmentation_loss(t, regions.soft_mask_logits, &labels)?;
        let l3 = assign::segmentation_loss(t, sim, &labels)?;
        Ok(assign::total_loss(t, l1, l2, l3)?.total)
    })
}

/// Zero-initialized biases put ReLUs fed by all-zero inputs exactly at their
/// kink; random biases move the check to a generic point.
fn randomize_biases(store: &mut ParamStore<f64>, seed: u64) {
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).ends_with(".b")).collect();
    for (k, id) in ids.into_iter().enumerate() {
        let shape = store.get(id).shape().to_vec();
        store
            .set(id, random(&shape, seed ^ (0xb1a5 + k as u64)).map(|v| 0.1 * v))
            .expect("same shape");
    }
}

/// Small-width network used for the end-to-end check.
pub fn pipeline_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            widths: [4, 4, 8, 8, 8],
            blocks_per_stage: 1,
        },
        ..ModelConfig::default()
    }
}

pub fn full_pipeline(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (net, mut store) = Msaf::new::<f64>(pipeline_config(), seed)?;
    randomize_biases(&mut store, seed);
    if let Some(m) = &net.motion {
        for (i, a) in m.aligners.iter().enumerate() {
            store.set(a.offset_weight, random(&[18, 8, 3, 3], seed + 10 + i as u64).map(|v| 0.1 * v))?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let frames: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng)).collect();
    let labels = Tensor::from_fn(&[16, 16], |i| ((i / 16 / 5 + i % 16 / 6) % 4) as u32);
    check_with_params(&store, frames, cfg, |t, p, x| {
        let out = net.forward(t, p, [x[0], x[1], x[2]])?;
        Ok(net.losses(t, &out, &labels)?.total)
    })
}

struct Entry {
    name: &'static str,
    check: Check,
    pipeline: bool,
    coords: Option<usize>,
}

fn entries() -> Vec<Entry> {
    let e = |name, check, coords| Entry {
        name,
        check,
        pipeline: false,
        coords,
    };
    vec![
        e("matmul", op_matmul as Check, None),
        e("bmm", op_bmm, None),
        e("softmax", op_softmax, None),
        e("layer_norm", op_layer_norm, None),
        e("bilinear_resize", op_resize, None),
        e("bilinear_sample", op_sample, None),
        e("conv2d", op_conv2d, None),
        e("cross_entropy", op_cross_entropy, None),
        e("weighted_pool+l2_normalize", op_pool_normalize, None),
        e("attention", block_attention, Some(16)),
        e("mhsa_block", block_mhsa, Some(16)),
        e("deformable_conv", block_deformable, Some(24)),
        e("pst_branch", block_pst, Some(8)),
        e("att_fuse", block_att_fuse, Some(6)),
        e("stage_transform", block_stage, Some(8)),
        e("descriptor_heads+losses", block_heads, Some(8)),
        Entry {
            name: "full_pipeline",
            check: full_pipeline,
            pipeline: true,
            coords: Some(3),
        },
    ]
}

/// Runs every check over `seeds` consecutive seeds starting at `base_seed`.
/// `block_tol` applies to ops and blocks, `pipeline_tol` to the full network.
pub fn run_suite(seeds: usize, base_seed: u64, block_tol: f64, pipeline_tol: f64) -> Result<Vec<CheckSummary>> {
    let mut out = Vec::new();
    for e in entries() {
        let tol = if e.pipeline { pipeline_tol } else { block_tol };
        let mut summary = CheckSummary {
            name: e.name,
            seeds,
            coordinates: 0,
            tol,
            max_rel_error: 0.0,
            max_kink_fraction: 0.0,
            passed: true,
        };
        for s in 0..seeds as u64 {
            let seed = base_seed.wrapping_mul(1000).wrapping_add(s);
            let report = (e.check)(seed, &cfg_for(seed, tol, e.coords))?;
            summary.coordinates += report.checked;
            summary.max_rel_error = summary.max_rel_error.max(report.max_rel_error);
            summary.max_kink_fraction = summary.max_kink_fraction.max(report.kink_fraction());
            summary.passed &= report.passed();
        }
        out.push(summary);
    }
    Ok(out)
}
