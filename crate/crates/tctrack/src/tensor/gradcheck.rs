//! Finite-difference verification of analytic gradients.
//!
//! [`check_gradients`] rebuilds a scalar loss from a closure while
//! perturbing one parameter entry at a time, and compares the central
//! difference `(f(x + h) - f(x - h)) / 2h` against the gradient the
//! backward sweep produced. Perturbations run in parallel over parameter
//! entries; every evaluation uses its own thread-local copy of the store,
//! so results do not depend on scheduling.
//!
//! The error reported per entry is relative with a guarded denominator:
//! `|a - n| / max(GUARD, |a|, |n|)`. The guard (`1e-3`) makes the
//! comparison absolute for entries whose gradient is tiny, where the
//! `O(h^2)` truncation noise of the central difference would otherwise
//! dominate a pure ratio.

use rayon::prelude::*;

use crate::error::Result;
use crate::tensor::graph::{Graph, Var};
use crate::tensor::params::ParamStore;

/// Denominator floor for the relative error; see the module docs.
pub const REL_ERR_GUARD: f64 = 1e-3;

/// Worst-offending entry found by a gradient check.
#[derive(Clone, Debug)]
pub struct WorstEntry {
    /// Parameter name.
    pub name: String,
    /// Flat index within the parameter.
    pub index: usize,
    /// Gradient from the backward sweep.
    pub analytic: f64,
    /// Central-difference estimate.
    pub numeric: f64,
}

/// Outcome of [`check_gradients`].
#[derive(Clone, Debug)]
pub struct GradReport {
    /// Number of scalar entries checked.
    pub checked: usize,
    /// Largest guarded relative error observed.
    pub max_rel_err: f64,
    /// The entry attaining `max_rel_err`, if any entries were checked.
    pub worst: Option<WorstEntry>,
}

impl GradReport {
    /// True when every entry matched within `tol`.
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Guarded relative error between an analytic and a numeric derivative.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / REL_ERR_GUARD.max(analytic.abs()).max(numeric.abs())
}

/// Checks the gradient of `build`'s scalar output with respect to every
/// entry of every parameter in `store`, including parameters the loss
/// turns out not to depend on (their analytic gradient must then match a
/// near-zero central difference).
///
/// `build` must be deterministic: it is re-run two times per checked
/// entry with a perturbed store, plus once up front for the backward
/// sweep.
pub fn check_gradients<F>(store: &ParamStore, step: f64, build: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var> + Sync,
{
    // Analytic gradients from one backward sweep.
    let mut graph = Graph::new();
    let loss = build(&mut graph, store)?;
    graph.backward(loss)?;
    let mut analytic: Vec<(String, Vec<f64>)> = Vec::with_capacity(store.len());
    for p in store.iter() {
        analytic.push((p.name.clone(), vec![0.0; p.value.numel()]));
    }
    for (name, var) in graph.staged_params() {
        if let Some(g) = graph.grad(var) {
            let slot = analytic
                .iter_mut()
                .find(|(n, _)| n == name)
                .expect("staged parameter exists in store");
            slot.1.copy_from_slice(g);
        }
    }

    // One job per scalar entry.
    let jobs: Vec<(usize, usize)> = analytic
        .iter()
        .enumerate()
        .flat_map(|(pi, (_, g))| (0..g.len()).map(move |k| (pi, k)))
        .collect();

    let results: Vec<(f64, f64, f64)> = jobs
        .par_iter()
        .map_init(
            || store.clone(),
            |local, &(pi, k)| -> Result<(f64, f64, f64)> {
                let name = &analytic[pi].0;
                let a = analytic[pi].1[k];
                let original = local.get(name)?.value.data()[k];
                let eval = |local: &ParamStore| -> Result<f64> {
                    let mut g = Graph::new();
                    let loss = build(&mut g, local)?;
                    Ok(g.item(loss))
                };
                local.get_mut(name)?.value.data_mut()[k] = original + step;
                let plus = eval(local)?;
                local.get_mut(name)?.value.data_mut()[k] = original - step;
                let minus = eval(local)?;
                local.get_mut(name)?.value.data_mut()[k] = original;
                let numeric = (plus - minus) / (2.0 * step);
                Ok((a, numeric, rel_err(a, numeric)))
            },
        )
        .collect::<Result<Vec<_>>>()?;

    let mut report = GradReport { checked: results.len(), max_rel_err: 0.0, worst: None };
    for (&(pi, k), &(a, n, e)) in jobs.iter().zip(&results) {
        if e >= report.max_rel_err {
            report.max_rel_err = e;
            report.worst = Some(WorstEntry {
                name: analytic[pi].0.clone(),
                index: k,
                analytic: a,
                numeric: n,
            });
        }
    }
    Ok(report)
}
