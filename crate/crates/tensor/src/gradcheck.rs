//! Central finite-difference checks of tape gradients.
//!
//! Each checked coordinate is perturbed by `±h` and the central difference is
//! compared with the analytic gradient. Functions built from ReLU or bilinear
//! sampling are only piecewise smooth, so a coordinate whose `±h` interval
//! straddles a kink can disagree without any bug. Such coordinates are detected
//! from the one-sided differences (at a kink `|fwd − bwd|` is twice the central
//! error, on a smooth stretch it is `O(h)`), reported separately, and capped by
//! `max_kink_fraction`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::par;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub h: f64,
    pub tol: f64,
    /// Floor of the relative-error denominator.
    pub denom_floor: f64,
    /// Check at most this many coordinates per input (sampled by `seed`).
    pub max_coords_per_input: Option<usize>,
    pub max_kink_fraction: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            denom_floor: 1e-6,
            max_coords_per_input: None,
            max_kink_fraction: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordCheck {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Largest relative error over coordinates not classified as kinks.
    pub max_rel_error: f64,
    pub failures: Vec<CoordCheck>,
    pub kinks: Vec<CoordCheck>,
    pub tol: f64,
    pub max_kink_fraction: f64,
}

impl GradCheckReport {
    pub fn kink_fraction(&self) -> f64 {
        if self.checked == 0 {
            0.0
        } else {
            self.kinks.len() as f64 / self.checked as f64
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.kink_fraction() <= self.max_kink_fraction
    }
}

enum Verdict {
    Ok,
    Kink,
    Fail,
}

/// Compares the tape gradient of scalar `f(inputs)` with central differences.
///
/// `f` receives a fresh tape and one leaf per input, in order.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Sync,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let f0 = tape.value(out).item();
    let grads = tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut coords = Vec::new();
    for (i, x) in inputs.iter().enumerate() {
        match cfg.max_coords_per_input {
            Some(k) if k < x.len() => {
                let mut picked = sample(&mut rng, x.len(), k).into_vec();
                picked.sort_unstable();
                coords.extend(picked.into_iter().map(|j| (i, j)));
            }
            _ => coords.extend((0..x.len()).map(|j| (i, j))),
        }
    }

    let results = par::map_indexed(coords.len(), |c| -> Result<(Verdict, CoordCheck)> {
        let (i, j) = coords[c];
        let shifted = |delta: f64| {
            let mut xs = inputs.to_vec();
            let mut data = xs[i].data().to_vec();
            data[j] += delta;
            xs[i] = Tensor::from_vec(xs[i].shape(), data).expect("same shape");
            eval(&xs)
        };
        let f_plus = shifted(cfg.h)?;
        let f_minus = shifted(-cfg.h)?;
        let numeric = (f_plus - f_minus) / (2.0 * cfg.h);
        let analytic = grads.get(vars[i]).map_or(0.0, |g| g.data()[j]);
        let err = (analytic - numeric).abs();
        let rel_error = err / analytic.abs().max(numeric.abs()).max(cfg.denom_floor);
        let one_sided_gap = ((f_plus - f0) / cfg.h - (f0 - f_minus) / cfg.h).abs();
        let verdict = if rel_error <= cfg.tol {
            Verdict::Ok
        } else if one_sided_gap >= err {
            Verdict::Kink
        } else {
            Verdict::Fail
        };
        Ok((verdict, CoordCheck { input: i, index: j, analytic, numeric, rel_error }))
    });

    let mut report = GradCheckReport {
        tol: cfg.tol,
        max_kink_fraction: cfg.max_kink_fraction,
        ..Default::default()
    };
    for r in results {
        let (verdict, check) = r?;
        report.checked += 1;
        match verdict {
            Verdict::Kink => report.kinks.push(check),
            Verdict::Ok | Verdict::Fail => {
                report.max_rel_error = report.max_rel_error.max(check.rel_error);
                if matches!(verdict, Verdict::Fail) {
                    report.failures.push(check);
                }
            }
        }
    }
    Ok(report)
}
