//! Acceptance suite. Each test prints one `PASS`/`FAIL` line for its
//! criterion; run with `--nocapture` to see them.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vidseg_core::assign::semantic_partition;
use vidseg_core::checkpoint;
use vidseg_core::checks::{run_suite, BLOCK_TOL, PIPELINE_TOL};
use vidseg_core::config::TrainConfig;
use vidseg_core::cost::{cost_decoupled, cost_vanilla, count_macs, crossover_closed_form, crossover_root, CostReport};
use vidseg_core::data::gen_dataset;
use vidseg_core::model::Variant;
use vidseg_core::motion::{reduced, MotionAlign};
use vidseg_core::nn::{DeformableConv, KernelInit, MhsaBlock, MhsaConfig};
use vidseg_core::train::{evaluate, train, training_data};
use vidseg_core::ParamStore;
use vidseg_tensor::{msat, AnyTensor, Conv2dSpec, Tape, Tensor};

fn verdict(id: u32, name: &str, passed: bool, detail: String) {
    println!("criterion {id} {name}: {} ({detail})", if passed { "PASS" } else { "FAIL" });
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn criterion_1_gradient_integrity() {
    let start = Instant::now();
    let summaries = run_suite(20, 1, BLOCK_TOL, PIPELINE_TOL).unwrap();
    let secs = start.elapsed().as_secs_f64();
    for s in &summaries {
        println!(
            "  {:<16} seeds {} coords {:>5} max rel {:.2e} (tol {:.0e}) kinks {:.1}%",
            s.name,
            s.seeds,
            s.coordinates,
            s.max_rel_error,
            s.tol,
            100.0 * s.max_kink_fraction
        );
    }
    let passed = summaries.iter().all(|s| s.passed && s.seeds >= 20) && secs < 120.0;
    let worst = summaries.iter().map(|s| s.max_rel_error / s.tol).fold(0.0, f64::max);
    verdict(
        1,
        "gradient integrity",
        passed,
        format!("{} checks x 20 seeds, worst error/tol {worst:.3}, {secs:.1}s", summaries.len()),
    );
    assert!(passed);
}

#[test]
fn criterion_2_cost_model() {
    let start = Instant::now();
    let mut exact = true;
    let mut increasing = true;
    let mut prev_gap: Option<i128> = None;
    for n in 1..=10_000u64 {
        let n128 = n as u128;
        let v = cost_vanilla(n).unwrap();
        let d = cost_decoupled(n).unwrap();
        exact &= v == 3 * n128 * n128 * n128 && d.total == 3 * n128 * n128 + 24 * n128;
        if n >= 4 {
            let gap = v as i128 - d.total as i128;
            increasing &= gap > 0 && prev_gap.map_or(true, |p| gap > p);
            prev_gap = Some(gap);
        }
    }
    let root_err = (crossover_root() - (1.0 + 33f64.sqrt()) / 2.0).abs();
    let closed_err = (crossover_closed_form() - (1.0 + 33f64.sqrt()) / 2.0).abs();
    let limit = CostReport::new(10_000).unwrap().ratio_over_n;
    let secs = start.elapsed().as_secs_f64();
    let passed =
        exact && increasing && root_err < 1e-9 && closed_err < 1e-9 && (0.99..=1.0).contains(&limit) && secs < 1.0;
    verdict(
        2,
        "cost model",
        passed,
        format!("exact {exact}, gap increasing {increasing}, root err {root_err:.1e}, ratio/n@1e4 {limit:.6}, {secs:.3}s"),
    );
    assert!(passed);
}

#[test]
fn criterion_3_mac_scaling() {
    let start = Instant::now();
    let r = count_macs(&[16, 64, 256], 16, false).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let passed = (r.spatial_slope - 2.0).abs() <= 0.1 && (r.temporal_slope - 1.0).abs() <= 0.1 && secs < 60.0;
    verdict(
        3,
        "empirical scaling",
        passed,
        format!("spatial slope {:.4}, temporal slope {:.4}, {secs:.2}s", r.spatial_slope, r.temporal_slope),
    );
    assert!(passed);
}

/// Per-pixel argmin of `1 − cos`, ties to the lowest class. Expects unit rows.
fn brute_force_partition(desc: &Tensor<f64>, regions: &Tensor<f64>) -> Vec<u32> {
    let (c, h, w) = (desc.shape()[0], desc.shape()[1], desc.shape()[2]);
    let classes = regions.shape()[0];
    let mut out = Vec::with_capacity(h * w);
    for px in 0..h * w {
        let d: Vec<f64> = (0..c).map(|k| desc.data()[k * h * w + px]).collect();
        let dn = d.iter().map(|a| a * a).sum::<f64>().sqrt();
        let mut best = (f64::INFINITY, 0u32);
        for j in 0..classes {
            let r = &regions.data()[j * c..(j + 1) * c];
            let rn = r.iter().map(|a| a * a).sum::<f64>().sqrt();
            let dot: f64 = d.iter().zip(r).map(|(a, b)| a * b).sum();
            let dist = 1.0 - dot / (dn * rn);
            if dist < best.0 {
                best = (dist, j as u32);
            }
        }
        out.push(best.1);
    }
    out
}

#[test]
fn criterion_4_partition_oracle() {
    let start = Instant::now();
    let mut agree = 0;
    for i in 0..100u64 {
        let classes = 2 + (i as usize % 7);
        let c = 3 + (i as usize % 5);
        let (h, w) = (1 + (i as usize % 8), 8 - (i as usize % 4));
        let desc = random(&[c, h, w], 1000 + i);
        let mut regions = random(&[classes, c], 2000 + i).into_vec();
        if i % 4 == 0 {
            // Exact duplicate rows force ties.
            let row = regions[..c].to_vec();
            regions[(classes - 1) * c..].copy_from_slice(&row);
        }
        for row in regions.chunks_mut(c) {
            let n = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            row.iter_mut().for_each(|a| *a /= n);
        }
        let regions = Tensor::from_vec(&[classes, c], regions).unwrap();
        let (labels, _) = semantic_partition(&desc, &regions).unwrap();
        if labels.data() == brute_force_partition(&desc, &regions).as_slice() {
            agree += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let passed = agree == 100 && secs < 5.0;
    verdict(4, "oracle equivalence", passed, format!("{agree}/100 instances exact, {secs:.3}s"));
    assert!(passed);
}

#[test]
fn criterion_5_reduction_identities() {
    // Deformable convolution with zero offsets against plain convolution.
    let mut deform_exact = true;
    for (cin, cout, h, w) in [(1, 1, 1, 1), (3, 4, 5, 7), (8, 8, 8, 8)] {
        let mut store = ParamStore::<f64>::new();
        let dcn = DeformableConv::new(&mut store, "d", cin, cout, 3, KernelInit::Random, &mut rng(3)).unwrap();
        store.set(dcn.bias, random(&[cout], 4)).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(random(&[cin, h, w], 5));
        let y = dcn.forward(&mut tape, &p, x).unwrap();
        let reference = tape.conv2d(x, p[dcn.weight], Some(p[dcn.bias]), Conv2dSpec::same(3, 1)).unwrap();
        deform_exact &= tape.value(y).data() == tape.value(reference).data();
    }

    // Zero-initialized motion alignment on identical frames.
    let mut store = ParamStore::<f64>::new();
    let motion = MotionAlign::new(&mut store, MhsaConfig::new(8), &mut rng(6)).unwrap();
    motion.zero_init(&mut store);
    let input = random(&[8, 8, 8], 7);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let x = tape.constant(input.clone());
    let out = motion.forward(&mut tape, &p, [x, x, x]).unwrap();
    let resampled = |factor: usize| {
        let mut t = Tape::<f64>::new();
        let v = t.constant(input.clone());
        let small = t.bilinear_resize(v, reduced(8, factor), reduced(8, factor)).unwrap();
        let back = t.bilinear_resize(small, 8, 8).unwrap();
        t.value(back).clone()
    };
    let expected = [resampled(4), resampled(2), input.clone()];
    let motion_err = out
        .frames
        .iter()
        .zip(&expected)
        .map(|(v, e)| tape.value(*v).max_abs_diff(e))
        .fold(0.0, f64::max);

    // Token permutation commutes with a self-attention block.
    let mut store = ParamStore::<f64>::new();
    let block = MhsaBlock::new(&mut store, "b", MhsaConfig::new(8), &mut rng(8)).unwrap();
    let (s, d) = (7, 8);
    let tokens = random(&[1, s, d], 9);
    let perm = [3usize, 0, 6, 1, 5, 2, 4];
    let permuted = Tensor::from_fn(&[1, s, d], |i| tokens.data()[perm[i / d] * d + i % d]);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let a = tape.constant(tokens);
    let b = tape.constant(permuted);
    let ya = block.forward(&mut tape, &p, a).unwrap();
    let yb = block.forward(&mut tape, &p, b).unwrap();
    let ya_perm = Tensor::from_fn(&[1, s, d], |i| tape.value(ya).data()[perm[i / d] * d + i % d]);
    let perm_err = tape.value(yb).max_abs_diff(&ya_perm);

    let passed = deform_exact && motion_err <= 1e-10 && perm_err <= 1e-10;
    verdict(
        5,
        "reduction identities",
        passed,
        format!("deformable bit-exact {deform_exact}, motion err {motion_err:.1e}, permutation err {perm_err:.1e}"),
    );
    assert!(passed);
}

#[test]
fn criterion_6_toy_overfit_and_ablation() {
    let start = Instant::now();
    let cfg = TrainConfig::default();
    assert_eq!((cfg.samples, cfg.data.height, cfg.data.width, cfg.data.classes), (8, 64, 64, 4));
    assert!(cfg.iterations <= 2000);
    let data = training_data(&cfg).unwrap();
    let overfit = train(&cfg, &data, |_, _| {}).unwrap();
    let overfit_ok = overfit.metrics.miou >= 0.95 && overfit.final_loss < overfit.initial_loss;
    println!(
        "  overfit: mIoU {:.4}, loss {:.4} -> {:.4}",
        overfit.metrics.miou, overfit.initial_loss, overfit.final_loss
    );

    let mut motion_cfg = cfg.clone();
    motion_cfg.data.motion_coded = true;
    motion_cfg.data.max_shift = 6;
    let motion_data = training_data(&motion_cfg).unwrap();
    let held_out = gen_dataset(999, 16, &motion_cfg.data).unwrap();
    let mut held_miou = Vec::new();
    for variant in [Variant::Full, Variant::NoMotion] {
        let mut c = motion_cfg.clone();
        c.model.variant = variant;
        let run = train(&c, &motion_data, |_, _| {}).unwrap();
        let m = evaluate(&run.model, &run.store, &held_out).unwrap();
        println!("  {variant:?}: train mIoU {:.4}, held-out mIoU {:.4}", run.metrics.miou, m.miou);
        held_miou.push(m.miou);
    }
    let gap = held_miou[0] - held_miou[1];
    let secs = start.elapsed().as_secs_f64();
    let passed = overfit_ok && gap >= 0.02 && secs < 900.0;
    verdict(
        6,
        "toy overfit + ablation",
        passed,
        format!("train mIoU {:.4}, ablation gap {gap:.4}, {secs:.0}s", overfit.metrics.miou),
    );
    assert!(passed);
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn criterion_7_determinism() {
    let mut cfg = TrainConfig::default();
    cfg.iterations = 30;
    cfg.warmup = 5;
    let tmp = tempfile::tempdir().unwrap();
    let mut dirs = Vec::new();
    for run in 0..2 {
        let data = training_data(&cfg).unwrap();
        let out = train(&cfg, &data, |_, _| {}).unwrap();
        let dir = tmp.path().join(format!("run{run}"));
        checkpoint::save(&dir, &cfg, &out.store).unwrap();
        dirs.push(dir_bytes(&dir));
    }
    let checkpoints_equal = dirs[0] == dirs[1] && !dirs[0].is_empty();

    let mut cases = 0;
    let mut round_trips = true;
    for rank in 0..=4usize {
        let shape: Vec<usize> = (0..rank).map(|i| 1 + (i * 2 + rank) % 4).collect();
        let t = random(&shape, rank as u64);
        let tensors = [
            AnyTensor::F64(t.clone()),
            AnyTensor::F32(t.cast()),
            AnyTensor::U32(t.map(|v| (v.abs() * 1e9) as u32)),
        ];
        for any in tensors {
            let bytes = msat::encode(&any);
            let back = msat::decode(&bytes).unwrap();
            round_trips &= msat::encode(&back) == bytes && back == any;
            cases += 1;
        }
    }

    let passed = checkpoints_equal && round_trips;
    verdict(
        7,
        "determinism",
        passed,
        format!("checkpoints byte-equal {checkpoints_equal}, MSAT round trips {cases} exact {round_trips}"),
    );
    assert!(passed);
}
