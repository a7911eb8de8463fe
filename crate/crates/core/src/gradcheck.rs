//! Central finite-difference check of the analytic gradients.

use serde::Serialize;

use crate::corpus::ClozeInstance;
use crate::error::Result;
use crate::exec::Executor;
use crate::params::ParamSet;
use crate::sker_model::{Mode, SkerModel};
use crate::synonym_graph::GraphSet;

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor for the relative error, so entries whose true gradient is
/// zero are judged on absolute error.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub checked: usize,
    pub max_relative_error: f64,
    pub worst_tensor: String,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

/// Compares every analytic gradient entry with `(L(θ+ε) − L(θ−ε)) / 2ε`.
/// Training mode with a fixed `dropout_seed` replays identical masks on every
/// evaluation.
pub fn check(
    model: &SkerModel,
    instance: &ClozeInstance,
    graphs: &GraphSet,
    dropout_seed: u64,
    epsilon: f64,
    exec: &Executor,
) -> Result<GradCheckReport> {
    let mode = Mode::Train { seed: dropout_seed };
    let trace = model.forward(instance, graphs, mode)?;
    let analytic = model.gradients(&trace)?;

    let entries: Vec<(usize, usize)> = analytic
        .tensors()
        .iter()
        .enumerate()
        .flat_map(|(t, (_, tensor))| (0..tensor.len()).map(move |i| (t, i)))
        .collect();

    let parts = exec.fold_chunks(
        &entries,
        || (model.clone(), Vec::new()),
        |(local, out): &mut (SkerModel, Vec<Result<f64>>), _, &(t, i)| {
            let mut probe = |delta: f64| -> Result<f64> {
                let original = {
                    let mut ts = local.tensors_mut();
                    let x = &mut ts[t].1.data[i];
                    let original = *x;
                    *x = original + delta;
                    original
                };
                let loss = local.forward(instance, graphs, mode).map(|tr| tr.loss);
                local.tensors_mut()[t].1.data[i] = original;
                loss
            };
            let numeric = probe(epsilon).and_then(|plus| probe(-epsilon).map(|minus| (plus - minus) / (2.0 * epsilon)));
            out.push(numeric);
        },
    );
    let numeric: Vec<f64> = parts
        .into_iter()
        .flat_map(|(_, values)| values)
        .collect::<Result<_>>()?;

    let mut tensors: Vec<TensorCheck> = analytic
        .tensors()
        .iter()
        .map(|(name, t)| TensorCheck {
            name: name.clone(),
            entries: t.len(),
            max_relative_error: 0.0,
            max_absolute_error: 0.0,
        })
        .collect();
    let analytic_tensors = analytic.tensors();
    for (&(t, i), &n) in entries.iter().zip(&numeric) {
        let a = analytic_tensors[t].1.data[i];
        let check = &mut tensors[t];
        check.max_relative_error = check.max_relative_error.max(relative_error(a, n));
        check.max_absolute_error = check.max_absolute_error.max((a - n).abs());
    }
    let worst = tensors
        .iter()
        .max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error))
        .expect("model has tensors");
    Ok(GradCheckReport {
        epsilon,
        checked: entries.len(),
        max_relative_error: worst.max_relative_error,
        worst_tensor: worst.name.clone(),
        tensors,
    })
}
