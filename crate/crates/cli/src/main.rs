use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use vidseg_core::assign::IGNORE_LABEL;
use vidseg_core::checks::{run_suite, PIPELINE_TOL};
use vidseg_core::config::TrainConfig;
use vidseg_core::cost::{cost_analysis, count_macs};
use vidseg_core::data::gen_synthetic_video;
use vidseg_core::metrics::eval_miou;
use vidseg_core::report::to_json;
use vidseg_core::tensor::{msat, AnyTensor, Tensor};
use vidseg_core::train::{train, training_data};
use vidseg_core::{checkpoint, Error};

#[derive(Parser)]
#[command(name = "vidseg", version, about = "Video segmentation toy model: checks, cost model, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference gradient checks of every op and block.
    Gradcheck {
        /// Relative-error tolerance for ops and blocks.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Tolerance for the end-to-end network.
        #[arg(long, default_value_t = PIPELINE_TOL)]
        pipeline_tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
    /// Analytic attention cost of the vanilla and decoupled designs.
    Cost {
        #[arg(long, value_delimiter = ',', required = true)]
        n: Vec<u64>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Times spatial and temporal attention over token counts.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "16,64,256")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        channels: usize,
        /// Also report instrumented MAC counts and their log-log slopes.
        #[arg(long)]
        count_macs: bool,
    },
    /// Writes one synthetic clip (three frames and labels).
    Gen {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Config override, e.g. `--set objects=4`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Trains on the synthetic clips described by a config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Predicts a label map for the last of three frames.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// Frames t-2, t-1, t as MSAT files.
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        frames: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-class IoU, mIoU and pixel accuracy of a prediction.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for unreadable or malformed input, 1 for everything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(err) if err.is_format() || matches!(err, Error::Io { .. }) => 2,
        _ => 1,
    }
}

fn write_json(path: &Path, json: &str) -> Result<()> {
    std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))
}

fn read_f32(path: &Path) -> Result<Tensor<f32>> {
    match msat::read(path).map_err(Error::from)? {
        AnyTensor::F32(t) => Ok(t),
        AnyTensor::F64(t) => Ok(t.cast()),
        other => Err(Error::Checkpoint(format!("{}: expected a float tensor, got {:?}", path.display(), other.dtype())).into()),
    }
}

fn read_labels(path: &Path) -> Result<Tensor<u32>> {
    match msat::read(path).map_err(Error::from)? {
        AnyTensor::U32(t) => Ok(t),
        other => Err(Error::Checkpoint(format!("{}: expected u32 labels, got {:?}", path.display(), other.dtype())).into()),
    }
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.to_path_buf(), source: e })?;
            TrainConfig::parse(&text)?
        }
        None => TrainConfig::default(),
    };
    for kv in overrides {
        cfg.apply_override(kv)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(command: Command) -> Result<bool> {
    match command {
        Command::Gradcheck { tol, pipeline_tol, seed, seeds } => {
            let start = Instant::now();
            let summaries = run_suite(seeds, seed, tol, pipeline_tol)?;
            println!("{:<28} {:>6} {:>8} {:>10} {:>8} {:>7}  result", "check", "seeds", "coords", "max rel", "tol", "kinks");
            for s in &summaries {
                println!(
                    "{:<28} {:>6} {:>8} {:>10.2e} {:>8.0e} {:>6.1}%  {}",
                    s.name,
                    s.seeds,
                    s.coordinates,
                    s.max_rel_error,
                    s.tol,
                    100.0 * s.max_kink_fraction,
                    if s.passed { "ok" } else { "FAIL" }
                );
            }
            let passed = summaries.iter().all(|s| s.passed);
            println!("{} in {:.1}s", if passed { "all checks passed" } else { "some checks FAILED" }, start.elapsed().as_secs_f64());
            Ok(passed)
        }
        Command::Cost { n, json } => {
            let analysis = cost_analysis(&n)?;
            println!("{:>8} {:>16} {:>14} {:>12} {:>9}", "n", "vanilla", "decoupled", "ratio", "ratio/n");
            for r in &analysis.reports {
                println!("{:>8} {:>16} {:>14} {:>12.4} {:>9.6}", r.n, r.vanilla, r.decoupled, r.ratio, r.ratio_over_n);
            }
            println!("crossover n = {:.12}", analysis.crossover);
            println!("advantage increasing from n=4: {}", analysis.advantage_increasing);
            if let Some(path) = json {
                write_json(&path, &to_json(&analysis))?;
            }
            Ok(true)
        }
        Command::Bench { sizes, channels, count_macs: macs } => {
            let report = count_macs(&sizes, channels, true)?;
            if macs {
                println!("{:>8} {:>14} {:>14} {:>10}", "tokens", "spatial MACs", "temporal MACs", "seconds");
            } else {
                println!("{:>8} {:>10}", "tokens", "seconds");
            }
            for s in &report.samples {
                let secs = s.seconds.unwrap_or(f64::NAN);
                if macs {
                    println!("{:>8} {:>14} {:>14} {:>10.4}", s.tokens, s.spatial_attention, s.temporal_stage, secs);
                } else {
                    println!("{:>8} {:>10.4}", s.tokens, secs);
                }
            }
            if macs && sizes.len() >= 2 {
                println!("log-log slope: spatial {:.4}, temporal {:.4}", report.spatial_slope, report.temporal_slope);
            }
            Ok(true)
        }
        Command::Gen { seed, out, overrides } => {
            let cfg = load_config(None, &overrides)?;
            let clip = gen_synthetic_video(seed, &cfg.data)?;
            clip.write(&out)?;
            println!("wrote clip {seed} ({} objects) to {}", clip.objects.len(), out.display());
            Ok(true)
        }
        Command::Train { config, out, overrides } => {
            let cfg = load_config(config.as_deref(), &overrides)?;
            let data = training_data(&cfg)?;
            let every = (cfg.iterations / 20).max(1);
            let start = Instant::now();
            let outcome = train(&cfg, &data, |i, loss| {
                if i % every == 0 || i + 1 == cfg.iterations {
                    println!("iter {i:>6}  loss {loss:.5}  {:.1}s", start.elapsed().as_secs_f64());
                }
            })?;
            println!(
                "loss {:.5} -> {:.5}, training mIoU {:.4}, pixel accuracy {:.4}",
                outcome.initial_loss, outcome.final_loss, outcome.metrics.miou, outcome.metrics.pixel_accuracy
            );
            if let Some(dir) = out {
                checkpoint::save(&dir, &cfg, &outcome.store)?;
                write_json(&dir.join("metrics.json"), &to_json(&outcome.metrics))?;
                println!("checkpoint written to {}", dir.display());
            }
            Ok(true)
        }
        Command::Infer { ckpt, frames, out } => {
            if frames.len() != 3 {
                bail!(Error::Config(format!("--frames needs exactly 3 files, got {}", frames.len())));
            }
            let (_, model, store) = checkpoint::load(&ckpt)?;
            let loaded = [read_f32(&frames[0])?, read_f32(&frames[1])?, read_f32(&frames[2])?];
            let mask = model.predict(&store, &loaded)?;
            msat::write(&out, &AnyTensor::from(mask)).map_err(Error::from)?;
            println!("wrote prediction to {}", out.display());
            Ok(true)
        }
        Command::Eval { pred, gt, classes, json } => {
            let report = eval_miou(&read_labels(&pred)?, &read_labels(&gt)?, classes, IGNORE_LABEL)?;
            for (j, iou) in report.per_class_iou.iter().enumerate() {
                match iou {
                    Some(v) => println!("class {j}: IoU {v:.4}"),
                    None => println!("class {j}: absent"),
                }
            }
            println!("mIoU {:.4}, pixel accuracy {:.4}", report.miou, report.pixel_accuracy);
            if let Some(path) = json {
                write_json(&path, &to_json(&report))?;
            }
            Ok(true)
        }
    }
}
