//! Analytic cost of vanilla vs decoupled spatio-temporal attention, and an
//! empirical MAC counter over the real kernels.
//!
//! The analytic model counts in units of `n`, the number of feature-map
//! elements. The empirical counter uses actual token counts and channel
//! widths, so the two agree on scaling exponents, not absolute values.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use vidseg_tensor::{mac, Tape, Tensor};

use crate::error::{param_err, Error, Result};
use crate::motion::{self, MotionAlign};
use crate::nn::MhsaConfig;
use crate::params::ParamStore;
use crate::report::{exact_u128, sig6, sig6_opt, sig6_vec};

fn check_n(n: u64) -> Result<u128> {
    if n == 0 {
        return param_err("cost model needs n >= 1");
    }
    Ok(n as u128)
}

/// `3n³`
pub fn cost_vanilla(n: u64) -> Result<u128> {
    let n = check_n(n)?;
    Ok(3 * n * n * n)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct DecoupledCost {
    #[serde(serialize_with = "exact_u128")]
    pub pst: u128,
    #[serde(serialize_with = "exact_u128")]
    pub att: u128,
    #[serde(serialize_with = "exact_u128")]
    pub total: u128,
}

/// `(3n², 2·3n + 2·9n, sum)`
pub fn cost_decoupled(n: u64) -> Result<DecoupledCost> {
    let n = check_n(n)?;
    let pst = 3 * n * n;
    let att = 2 * 3 * n + 2 * 9 * n;
    Ok(DecoupledCost {
        pst,
        att,
        total: pst + att,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub n: u64,
    #[serde(serialize_with = "exact_u128")]
    pub vanilla: u128,
    #[serde(serialize_with = "exact_u128")]
    pub pst: u128,
    #[serde(serialize_with = "exact_u128")]
    pub att: u128,
    #[serde(serialize_with = "exact_u128")]
    pub decoupled: u128,
    #[serde(serialize_with = "sig6")]
    pub ratio: f64,
    #[serde(serialize_with = "sig6")]
    pub ratio_over_n: f64,
}

impl CostReport {
    pub fn new(n: u64) -> Result<Self> {
        let vanilla = cost_vanilla(n)?;
        let d = cost_decoupled(n)?;
        let ratio = vanilla as f64 / d.total as f64;
        Ok(Self {
            n,
            vanilla,
            pst: d.pst,
            att: d.att,
            decoupled: d.total,
            ratio,
            ratio_over_n: ratio / n as f64,
        })
    }
}

/// Closed-form positive root of `3n³ = 3n² + 24n`, i.e. of `n² − n − 8`.
pub fn crossover_closed_form() -> f64 {
    (1.0 + 33f64.sqrt()) / 2.0
}

/// The same root found numerically by bisection on `3n³ − (3n² + 24n)`.
pub fn crossover_root() -> f64 {
    let f = |x: f64| 3.0 * x * x * x - (3.0 * x * x + 24.0 * x);
    let (mut lo, mut hi) = (1.0f64, 10.0f64);
    debug_assert!(f(lo) < 0.0 && f(hi) > 0.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Clone, Debug, Serialize)]
pub struct CostAnalysis {
    pub reports: Vec<CostReport>,
    #[serde(serialize_with = "sig6")]
    pub crossover: f64,
    /// `vanilla − decoupled` is positive and strictly increasing for every
    /// integer from 4 up to the largest requested n.
    pub advantage_increasing: bool,
    /// `ratio / n` is non-decreasing across the requested n (in sorted order).
    pub ratio_over_n_increasing: bool,
}

pub fn cost_analysis(ns: &[u64]) -> Result<CostAnalysis> {
    if ns.is_empty() {
        return param_err("cost analysis needs at least one n");
    }
    let reports = ns.iter().map(|&n| CostReport::new(n)).collect::<Result<Vec<_>>>()?;
    let max = ns.iter().copied().max().unwrap_or(4).max(4);
    let diff = |n: u64| -> Result<i128> { Ok(cost_vanilla(n)? as i128 - cost_decoupled(n)?.total as i128) };
    let mut advantage_increasing = true;
    let mut prev = diff(4)?;
    if prev <= 0 {
        advantage_increasing = false;
    }
    for n in 5..=max {
        let d = diff(n)?;
        if d <= prev {
            advantage_increasing = false;
            break;
        }
        prev = d;
    }
    let mut sorted: Vec<&CostReport> = reports.iter().collect();
    sorted.sort_by_key(|r| r.n);
    let ratio_over_n_increasing = sorted.windows(2).all(|w| w[1].ratio_over_n >= w[0].ratio_over_n);
    Ok(CostAnalysis {
        reports,
        crossover: crossover_root(),
        advantage_increasing,
        ratio_over_n_increasing,
    })
}

/// Measured MACs at one token count.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MacSample {
    pub tokens: usize,
    /// Score and weighted-sum products of one full-resolution spatial branch.
    pub spatial_attention: u64,
    /// Everything in the aligned temporal stage: deformable alignment of two
    /// frames plus per-position temporal attention.
    pub temporal_stage: u64,
    #[serde(serialize_with = "sig6_opt")]
    pub seconds: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScalingReport {
    pub samples: Vec<MacSample>,
    #[serde(serialize_with = "sig6")]
    pub spatial_slope: f64,
    #[serde(serialize_with = "sig6")]
    pub temporal_slope: f64,
    #[serde(serialize_with = "sig6_vec")]
    pub token_counts: Vec<f64>,
}

/// Spatial layout `h×w` with `h·w = tokens`, as square as possible.
fn layout(tokens: usize) -> (usize, usize) {
    let mut h = (tokens as f64).sqrt() as usize;
    while h > 1 && tokens % h != 0 {
        h -= 1;
    }
    (h.max(1), tokens / h.max(1))
}

/// Runs one spatial branch (no downsampling) and one temporal stage on
/// random `channels×h×w` features for each token count, counting MACs.
pub fn count_macs(token_counts: &[usize], channels: usize, timed: bool) -> Result<ScalingReport> {
    if token_counts.is_empty() || token_counts.contains(&0) {
        return param_err("token counts must be non-empty and positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f32>::new();
    let m = MotionAlign::new(&mut store, MhsaConfig::new(channels), &mut rng)?;
    let mut samples = Vec::with_capacity(token_counts.len());
    for &t in token_counts {
        let (h, w) = layout(t);
        let maps: Vec<Tensor<f32>> = (0..3).map(|_| Tensor::uniform(&[channels, h, w], -1.0, 1.0, &mut rng)).collect();
        let start = std::time::Instant::now();
        let (res, counts) = mac::counted(|| -> Result<()> {
            let mut tape = Tape::new();
            let p = store.bind_frozen(&mut tape);
            let v: Vec<_> = maps.iter().map(|x| tape.constant(x.clone())).collect();
            mac::section("spatial", || motion::pst_branch(&mut tape, &p, v[2], 1, &m.spatial[2]))?;
            mac::section("temporal", || m.att_fuse(&mut tape, &p, [v[0], v[1], v[2]]))?;
            Ok(())
        })
        .map_err(|e| Error::Parameter(e.to_string()))?;
        res?;
        samples.push(MacSample {
            tokens: t,
            spatial_attention: counts.under("spatial/attention"),
            temporal_stage: counts.under("temporal"),
            seconds: timed.then(|| start.elapsed().as_secs_f64()),
        });
    }
    let xs: Vec<f64> = samples.iter().map(|s| s.tokens as f64).collect();
    let spatial: Vec<f64> = samples.iter().map(|s| s.spatial_attention as f64).collect();
    let temporal: Vec<f64> = samples.iter().map(|s| s.temporal_stage as f64).collect();
    Ok(ScalingReport {
        spatial_slope: loglog_slope(&xs, &spatial)?,
        temporal_slope: loglog_slope(&xs, &temporal)?,
        token_counts: xs,
        samples,
    })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 || xs.iter().chain(ys).any(|&v| v <= 0.0) {
        return param_err("slope fit needs at least two positive (x, y) pairs");
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let k = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / k, ly.iter().sum::<f64>() / k);
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return param_err("slope fit needs distinct x values");
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}
