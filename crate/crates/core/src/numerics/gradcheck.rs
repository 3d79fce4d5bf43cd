//! Central-difference gradient checking in f64.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use super::params::ParamStore;
use crate::error::Result;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates left out because `θ ± h` changed a discrete branch (a
    /// ReLU sign, a max index), where central differences are meaningless.
    pub skipped: usize,
    pub max_rel_error: f64,
    /// `(parameter, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Checks the gradient of the scalar built by `f` against
/// `(f(θ+h) - f(θ-h)) / 2h`.
///
/// With `samples = None` every coordinate is checked; otherwise that many
/// coordinates are drawn without replacement using `seed`. A coordinate is
/// skipped when either perturbed pass takes a different branch than the
/// unperturbed one (see [`Graph::branch_signature`]).
pub fn finite_difference_check<F>(
    params: &mut ParamStore<f64>,
    f: F,
    h: f64,
    samples: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>, &mut Graph<f64>) -> Result<NodeId>,
{
    params.zero_grads();
    let mut graph = Graph::new();
    let loss = f(params, &mut graph)?;
    graph.backward(loss, params)?;
    let base = graph.branch_signature();

    let mut coords = Vec::new();
    for id in params.ids().collect::<Vec<_>>() {
        for k in 0..params.value(id).len() {
            coords.push((id, k));
        }
    }
    if let Some(n) = samples {
        if n < coords.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked: Vec<usize> = sample(&mut rng, coords.len(), n).into_vec();
            picked.sort_unstable();
            coords = picked.into_iter().map(|i| coords[i]).collect();
        }
    }

    let eval = |p: &ParamStore<f64>| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let node = f(p, &mut g)?;
        Ok((g.value(node).data()[0], g.branch_signature()))
    };

    let mut report = GradCheckReport {
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for (id, k) in coords {
        let original = params.value(id).data()[k];
        params.value_mut(id).data_mut()[k] = original + h;
        let (plus, plus_branch) = eval(params)?;
        params.value_mut(id).data_mut()[k] = original - h;
        let (minus, minus_branch) = eval(params)?;
        params.value_mut(id).data_mut()[k] = original;
        if plus_branch != base || minus_branch != base {
            report.skipped += 1;
            continue;
        }

        let numeric = (plus - minus) / (2.0 * h);
        let analytic = params.grad(id).data()[k];
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((params.get(id).name.clone(), k, analytic, numeric));
        }
    }
    Ok(report)
}
