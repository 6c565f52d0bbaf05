//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{Bound, ParamStore};
use super::tape::{Tape, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Scalar parameters compared; all of them when the model is smaller.
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-6,
            samples: 256,
            seed: 0,
        }
    }
}

/// Multiple of `ε·max(|f(θ+h)|, |f(θ−h)|, 1)/h` taken as the rounding noise
/// of a central difference.
pub const ROUNDING_FACTOR: f64 = 8.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GradSample {
    pub param: String,
    pub offset: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Rounding noise bound of `numeric`.
    pub rounding_bound: f64,
}

impl GradSample {
    pub fn relative_error(&self) -> f64 {
        relative_error(self.analytic, self.numeric)
    }

    /// Whether the discrepancy exceeds what rounding alone can explain.
    pub fn resolved(&self) -> bool {
        (self.analytic - self.numeric).abs() > self.rounding_bound
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// `(parameter name, flat offset, analytic, numeric)` at the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
    pub samples: Vec<GradSample>,
}

impl GradCheckReport {
    /// Largest relative error among samples whose discrepancy exceeds the
    /// rounding bound; entries whose analytic and numeric values agree to
    /// within rounding noise count as 0.
    pub fn max_resolved_error(&self) -> f64 {
        self.samples
            .iter()
            .filter(|s| s.resolved())
            .map(GradSample::relative_error)
            .fold(0.0, f64::max)
    }

    /// Samples with `|analytic| > rounding_bound`, i.e. gradients large
    /// enough for the difference quotient to measure.
    pub fn measurable(&self) -> usize {
        self.samples
            .iter()
            .filter(|s| s.analytic.abs() > s.rounding_bound)
            .count()
    }
}

/// Relative error with the `max(|a|, |n|, 1e-8)` denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares tape gradients of `loss_fn` with `(f(θ+h) − f(θ−h)) / 2h`
/// on a seeded random subset of scalar parameters.
///
/// `loss_fn` must be deterministic for fixed parameter values. Parameters
/// are restored exactly after each probe.
pub fn finite_diff_check<F>(params: &mut ParamStore, opts: GradCheckOptions, loss_fn: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>>,
{
    let total = params.scalar_count();
    if total == 0 {
        return Ok(GradCheckReport {
            max_relative_error: 0.0,
            checked: 0,
            worst: None,
            samples: Vec::new(),
        });
    }

    let analytic = {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let loss = loss_fn(&tape, &bound)?;
        tape.backward(loss)?.param_grads(&params.shapes())
    };

    let eval = |params: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        Ok(loss_fn(&tape, &bound)?.item())
    };

    // Flat index → (param, offset).
    let offsets: Vec<usize> = params
        .iter()
        .scan(0, |acc, (_, t)| {
            let start = *acc;
            *acc += t.len();
            Some(start)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut picks = sample(&mut rng, total, opts.samples.min(total)).into_vec();
    picks.sort_unstable();

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        worst: None,
        samples: Vec::with_capacity(picks.len()),
    };
    for flat in picks {
        let p = offsets.partition_point(|&o| o <= flat) - 1;
        let off = flat - offsets[p];
        let original = params.by_index(p).1.data()[off];

        params.by_index_mut(p).data_mut()[off] = original + opts.h;
        let plus = eval(params);
        params.by_index_mut(p).data_mut()[off] = original - opts.h;
        let minus = eval(params);
        params.by_index_mut(p).data_mut()[off] = original;

        let (plus, minus) = (plus?, minus?);
        let numeric = (plus - minus) / (2.0 * opts.h);
        let a = analytic[p].data()[off];
        let err = relative_error(a, numeric);
        report.checked += 1;
        report.samples.push(GradSample {
            param: params.by_index(p).0.to_string(),
            offset: off,
            analytic: a,
            numeric,
            rounding_bound: ROUNDING_FACTOR * f64::EPSILON * plus.abs().max(minus.abs()).max(1.0) / opts.h,
        });
        if err > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = err.max(report.max_relative_error);
            report.worst = Some((params.by_index(p).0.to_string(), off, a, numeric));
        }
    }
    Ok(report)
}
