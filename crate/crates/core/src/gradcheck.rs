//! Central-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::params::{Gradients, ParameterStore};

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates checked per parameter; `None` checks all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient returned by `eval` against central
/// differences `(f(x+h) - f(x-h)) / 2h`. `eval` must be deterministic.
pub fn finite_diff_gradcheck<F>(
    store: &ParameterStore,
    eval: F,
    opts: &GradcheckOptions,
) -> GradcheckReport
where
    F: Fn(&ParameterStore) -> (f64, Gradients),
{
    let (_, analytic) = eval(store);
    let mut work = store.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut params = Vec::with_capacity(store.len());

    for idx in 0..store.len() {
        let n = store.value(idx).len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut max_rel: f64 = 0.0;
        for &c in &coords {
            let orig = work.value(idx).data()[c];
            work.value_mut(idx).data_mut()[c] = orig + opts.step;
            let plus = eval(&work).0;
            work.value_mut(idx).data_mut()[c] = orig - opts.step;
            let minus = eval(&work).0;
            work.value_mut(idx).data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(analytic.0[idx].data()[c], numeric);
            max_rel = max_rel.max(if err.is_nan() { f64::INFINITY } else { err });
        }
        params.push(ParamCheck {
            name: store.name(idx).to_string(),
            checked: coords.len(),
            max_rel_error: max_rel,
            passed: max_rel < opts.tolerance,
        });
    }

    let max_rel_error = params.iter().fold(0.0f64, |m, p| m.max(p.max_rel_error));
    GradcheckReport {
        passed: params.iter().all(|p| p.passed),
        params,
        max_rel_error,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use std::collections::BTreeMap;

    fn scalar_store(v: f64) -> ParameterStore {
        let mut m = BTreeMap::new();
        m.insert("theta".to_string(), Tensor::filled(1, 1, v));
        ParameterStore::new(m)
    }

    #[test]
    fn quadratic_passes() {
        let store = scalar_store(3.0);
        let opts = GradcheckOptions {
            step: 1e-3,
            ..Default::default()
        };
        let report = finite_diff_gradcheck(
            &store,
            |s| {
                let t = s.value(0).data()[0];
                (t * t, Gradients(vec![Tensor::filled(1, 1, 2.0 * t)]))
            },
            &opts,
        );
        assert!(report.passed);
        assert!(report.max_rel_error < 1e-6);
    }

    #[test]
    fn planted_fault_is_detected() {
        let store = scalar_store(3.0);
        let report = finite_diff_gradcheck(
            &store,
            |s| {
                let t = s.value(0).data()[0];
                (t * t, Gradients(vec![Tensor::filled(1, 1, 3.0 * t)]))
            },
            &GradcheckOptions {
                step: 1e-3,
                tolerance: 1e-4,
                ..Default::default()
            },
        );
        assert!(!report.passed);
        assert_eq!(report.params[0].name, "theta");
    }
}
