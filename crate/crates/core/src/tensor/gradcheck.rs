//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{NodeId, ParamId, ParamStore, Tape};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Parameters with more coordinates than this are sub-sampled.
    pub max_coords_per_param: usize,
    /// Seed for coordinate sub-sampling.
    pub seed: u64,
    /// Test hook: multiplies every analytic gradient by this factor before
    /// comparing. `1.0` for a real check.
    pub analytic_scale: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords_per_param: 200,
            seed: 0,
            analytic_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CoordinateError {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<CoordinateError>,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Compares the tape gradient of the scalar built by `f` with central
/// differences, for every coordinate of every parameter in `params` (or a
/// seeded subset of `max_coords_per_param` coordinates when a parameter is
/// larger, always including coordinates with a nonzero analytic gradient
/// first). `f` must rebuild the whole forward pass from the store and
/// return the loss node; it must be deterministic.
pub fn finite_difference_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(Tape, NodeId)>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let (tape, out) = f(store)?;
        Ok(tape.scalar(out))
    };

    let first = eval(store)?;
    let second = eval(store)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    store.zero_grad();
    let (tape, out) = f(store)?;
    tape.backward(out, store)?;
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };

    for &pid in params {
        let analytic_all: Vec<f64> = store
            .grad(pid)
            .as_slice()
            .iter()
            .map(|g| g * opts.analytic_scale)
            .collect();
        let coords = choose_coordinates(&analytic_all, opts.max_coords_per_param, &mut rng);
        for c in coords {
            let orig = store.value(pid).as_slice()[c];
            store.value_mut(pid).as_mut_slice()[c] = orig + opts.eps;
            let plus = eval(store)?;
            store.value_mut(pid).as_mut_slice()[c] = orig - opts.eps;
            let minus = eval(store)?;
            store.value_mut(pid).as_mut_slice()[c] = orig;

            let numeric = (plus - minus) / (2.0 * opts.eps);
            let analytic = analytic_all[c];
            let rel = relative_error(analytic, numeric);
            report.coords_checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some(CoordinateError {
                    param: store.name(pid).to_string(),
                    index: c,
                    analytic,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}

fn choose_coordinates(analytic: &[f64], budget: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if analytic.len() <= budget {
        return (0..analytic.len()).collect();
    }
    let nonzero: Vec<usize> = (0..analytic.len()).filter(|&i| analytic[i] != 0.0).collect();
    let zero: Vec<usize> = (0..analytic.len()).filter(|&i| analytic[i] == 0.0).collect();
    // Three quarters of the budget on active coordinates, the rest on
    // coordinates the tape claims are untouched.
    let active_budget = (budget * 3 / 4).min(nonzero.len());
    let zero_budget = (budget - active_budget).min(zero.len());
    let mut out: Vec<usize> = sample(rng, nonzero.len(), active_budget)
        .into_iter()
        .map(|i| nonzero[i])
        .collect();
    out.extend(sample(rng, zero.len(), zero_budget).into_iter().map(|i| zero[i]));
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::new();
        let theta = store.register("theta", Matrix::filled(1, 1, 3.0)).unwrap();
        let report = finite_difference_check(
            &mut store,
            &[theta],
            |s| {
                let mut tape = Tape::new();
                let x = tape.param(s, theta)?;
                let y = tape.row_dot(x, x)?;
                Ok((tape, y))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(store.grad(theta).as_slice()[0], 6.0);
        assert!(report.max_rel_error < 1e-10, "{report:?}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut store = ParamStore::new();
        let theta = store.register("theta", Matrix::filled(1, 3, 0.7)).unwrap();
        let report = finite_difference_check(
            &mut store,
            &[theta],
            |_| {
                let mut tape = Tape::new();
                let c = tape.input(Matrix::filled(1, 1, 2.5))?;
                Ok((tape, c))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert_eq!(report.coords_checked, 3);
    }

    #[test]
    fn non_deterministic_function_is_rejected() {
        use std::cell::Cell;
        let mut store = ParamStore::new();
        let theta = store.register("theta", Matrix::filled(1, 1, 1.0)).unwrap();
        let calls = Cell::new(0.0);
        let err = finite_difference_check(
            &mut store,
            &[theta],
            |_| {
                calls.set(calls.get() + 1.0);
                let mut tape = Tape::new();
                let c = tape.input(Matrix::filled(1, 1, calls.get()))?;
                Ok((tape, c))
            },
            &GradCheckOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }

    #[test]
    fn injected_error_is_detected() {
        let mut store = ParamStore::new();
        let theta = store.register("theta", Matrix::filled(1, 1, 3.0)).unwrap();
        let opts = GradCheckOptions {
            analytic_scale: 1.5,
            ..Default::default()
        };
        let report = finite_difference_check(
            &mut store,
            &[theta],
            |s| {
                let mut tape = Tape::new();
                let x = tape.param(s, theta)?;
                let y = tape.row_dot(x, x)?;
                Ok((tape, y))
            },
            &opts,
        )
        .unwrap();
        assert!(!report.passes(1e-4));
    }
}
