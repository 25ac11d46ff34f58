//! Post-hoc measurements on converged runs: entropies, Fisher information,
//! plan entropy, kinetic energy and constraint violations.

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::functionals::{CostSchedule, CostSpec};
use crate::grid::Field;
use crate::scalar::{cast, Scalar};
use crate::sinkhorn::SolverState;

/// Entropy relative to Lebesgue: `sum f log f * cell_volume`, with
/// `0 log 0 = 0`. Zero for the uniform density on a unit-volume domain and
/// it converges to the continuous relative entropy under grid refinement.
pub fn entropy<S: Scalar>(f: &Field<S>) -> S {
    let vol = cast::<S>(f.spec().cell_volume());
    let mut acc = S::zero();
    for &v in f.values() {
        if v > S::zero() {
            acc = acc + v * v.ln();
        }
    }
    acc * vol
}

/// Fisher information result; `degenerate_support` is set when the density
/// has zero cells, in which case the sum runs over the positive set with
/// one-sided differences at its edges.
#[derive(Debug, Clone, Copy)]
pub struct FisherInfo<S> {
    pub value: S,
    pub degenerate_support: bool,
}

/// Discrete Fisher information `4 * sum |grad sqrt(f)|^2 * cell_volume` with
/// centered periodic differences; the square-root form is stable near zeros.
pub fn fisher_information<S: Scalar>(f: &Field<S>) -> FisherInfo<S> {
    let grid = *f.spec();
    let sqrt_f = f.map(|v| v.max(S::zero()).sqrt());
    let h = cast::<S>(grid.spacing());
    let two_h = h + h;
    let m = grid.points_per_dim;
    let total = grid.total_cells();
    let mut acc = S::zero();
    let mut degenerate = false;
    for flat in 0..total {
        let fv = f.values()[flat];
        if !(fv > S::zero()) {
            degenerate = true;
            continue;
        }
        for dim in 0..grid.dims {
            let stride = grid.stride(dim);
            let coord = (flat / stride) % m;
            let up = flat + ((coord + 1) % m) * stride - coord * stride;
            let down = flat + ((coord + m - 1) % m) * stride - coord * stride;
            let f_up = f.values()[up];
            let f_down = f.values()[down];
            let g = if f_up > S::zero() && f_down > S::zero() {
                (sqrt_f.values()[up] - sqrt_f.values()[down]) / two_h
            } else if f_up > S::zero() {
                (sqrt_f.values()[up] - sqrt_f.values()[flat]) / h
            } else if f_down > S::zero() {
                (sqrt_f.values()[flat] - sqrt_f.values()[down]) / h
            } else {
                S::zero()
            };
            acc = acc + g * g;
        }
    }
    FisherInfo {
        value: cast::<S>(4.0) * acc * cast::<S>(grid.cell_volume()),
        degenerate_support: degenerate,
    }
}

/// Plan entropy `H(gamma | R^N)` evaluated through the product form of the
/// optimizer: `sum_k sum_x u_k(x) mu_k(x) * cell_volume`, skipping cells
/// where the marginal vanishes. `marginals` must be the state's marginals.
pub fn plan_entropy<S: Scalar>(
    state: &SolverState<S>,
    marginals: &[Field<S>],
) -> Result<S, CoreError> {
    if marginals.len() != state.steps() + 1 {
        return Err(CoreError::InvalidSchedule(format!(
            "expected {} marginals, got {}",
            state.steps() + 1,
            marginals.len()
        )));
    }
    let vol = cast::<S>(state.grid().cell_volume());
    let mut acc = S::zero();
    for (k, mu) in marginals.iter().enumerate() {
        let u = state.log_scaling(k);
        for (&uv, &mv) in u.values().iter().zip(mu.values()) {
            if mv > S::zero() {
                acc = acc + uv * mv;
            }
        }
    }
    Ok(acc * vol)
}

/// The discrete kinetic-energy estimate `plan_entropy - entropy(mu_0)`.
/// Nonnegative for every converged feasible run.
pub fn kinetic_energy_estimate<S: Scalar>(
    state: &SolverState<S>,
    marginals: &[Field<S>],
) -> Result<S, CoreError> {
    Ok(plan_entropy(state, marginals)? - entropy(&marginals[0]))
}

/// Per-marginal Fisher information serialized into the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FisherEntry {
    pub value: f64,
    pub degenerate_support: bool,
}

/// Quantitative summary of a solved run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetrics {
    pub entropies: Vec<f64>,
    pub fisher_information: Vec<FisherEntry>,
    pub plan_entropy: f64,
    pub kinetic_energy: f64,
    pub duality_gap: f64,
    pub max_density: f64,
    /// Largest pointwise excess over a congestion cap, across all indices.
    pub congestion_violation: f64,
    /// Largest total mass sitting on obstacle cells, across all indices.
    pub obstacle_mass: f64,
}

/// Collects run metrics from a converged state and its marginals.
pub fn run_metrics<S: Scalar>(
    state: &SolverState<S>,
    schedule: &CostSchedule<S>,
    marginals: &[Field<S>],
    duality_gap: f64,
) -> Result<RunMetrics, CoreError> {
    let to_f64 = |v: S| v.to_f64().unwrap_or(f64::NAN);
    let vol = cast::<S>(state.grid().cell_volume());
    let mut congestion_violation = S::zero();
    let mut obstacle_mass = S::zero();
    let mut max_density = S::zero();
    for (k, mu) in marginals.iter().enumerate() {
        max_density = max_density.max(mu.max_value());
        let cost = schedule.cost_at(k);
        let cap = match cost {
            CostSpec::Congestion(cap) => Some(*cap),
            CostSpec::CongestionPlusPotential(cap, _) => Some(*cap),
            CostSpec::Nonlocal(spec) => spec.cap,
            _ => None,
        };
        if let Some(cap) = cap {
            for &v in mu.values() {
                congestion_violation = congestion_violation.max(v - cap);
            }
        }
        let potential = match cost {
            CostSpec::Potential(v) => Some(v),
            CostSpec::CongestionPlusPotential(_, v) => Some(v),
            _ => None,
        };
        if let Some(v) = potential {
            let mut inside = S::zero();
            for (&vi, &mv) in v.values().iter().zip(mu.values()) {
                if vi.is_infinite() {
                    inside = inside + mv;
                }
            }
            obstacle_mass = obstacle_mass.max(inside * vol);
        }
    }
    let plan_ent = plan_entropy(state, marginals)?;
    Ok(RunMetrics {
        entropies: marginals.iter().map(|m| to_f64(entropy(m))).collect(),
        fisher_information: marginals
            .iter()
            .map(|m| {
                let fi = fisher_information(m);
                FisherEntry {
                    value: to_f64(fi.value),
                    degenerate_support: fi.degenerate_support,
                }
            })
            .collect(),
        plan_entropy: to_f64(plan_ent),
        kinetic_energy: to_f64(plan_ent - entropy(&marginals[0])),
        duality_gap,
        max_density: to_f64(max_density),
        congestion_violation: to_f64(congestion_violation.max(S::zero())),
        obstacle_mass: to_f64(obstacle_mass),
    })
}
