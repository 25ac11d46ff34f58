//! Multi-marginal Sinkhorn iteration over the Markov chain of heat kernels:
//! message passing, Gauss-Seidel sweeps, convergence control and the outer
//! semi-implicit loop for nonlocal interactions.
//!
//! A sweep updates indices `k = 0..=N` in order. Forward messages
//! `alpha_k = K(a_{k-1} * alpha_{k-1})` are refreshed left-to-right with
//! current-sweep potentials; backward messages `beta_k = K(a_{k+1} * beta_{k+1})`
//! are rebuilt right-to-left at the end of the sweep, so between sweeps the
//! state is fully consistent and each update sees previous-sweep potentials
//! for the indices ahead of it. One sweep costs O(N) kernel applications.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics;
use crate::error::CoreError;
use crate::functionals::{
    conjugate_term, linearize_nonlocal, primal_cost, prox_update_log, CostSchedule, CostSpec,
};
use crate::grid::{Field, GridSpec, TimeAxis};
use crate::kernel::{build_heat_kernel, SeparableKernel, LINEAR_SAFE_MIN_ENTRY};
use crate::scalar::{cast, Scalar};

/// How kernel applications are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stabilization {
    /// Pick log-domain when the smallest kernel entry is below 1e-300.
    Auto,
    /// Always use log-domain convolutions (per-slice max shift).
    Log,
    /// Always exponentiate, convolve linearly and take logs again.
    Linear,
}

/// Solver tuning knobs. The joint stopping rule requires both the maximum L1
/// marginal residual on constrained indices and the maximum L-infinity change
/// of the log-scalings to fall below `marginal_tolerance`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_sweeps: usize,
    pub marginal_tolerance: f64,
    pub fixed_point_tolerance: f64,
    pub stabilization: Stabilization,
    pub outer_max_iters: usize,
    /// Relaxation factor for the semi-implicit potential replacement; 1.0 is
    /// plain replacement, smaller values damp non-symmetric fixed points.
    pub damping: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_sweeps: 2000,
            marginal_tolerance: 1e-8,
            fixed_point_tolerance: 1e-6,
            stabilization: Stabilization::Auto,
            outer_max_iters: 50,
            damping: 1.0,
        }
    }
}

/// Final residual of one constrained marginal index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarginalResidual {
    pub index: usize,
    pub residual: f64,
}

/// What happened during a solve: iteration counts, residuals and objective
/// traces, serialized into the run manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub converged: bool,
    pub sweeps: usize,
    pub outer_iterations: usize,
    pub stabilization_used: String,
    pub marginal_residuals: Vec<MarginalResidual>,
    pub dual_trace: Vec<f64>,
    pub duality_gap: f64,
    pub outer_residual_trace: Vec<f64>,
}

/// Per-sweep progress measures.
#[derive(Debug, Clone, Copy)]
pub struct SweepStats<S: Scalar> {
    /// Max L1 distance of pre-update marginals to their constraints.
    pub max_marginal_residual: S,
    /// Max L-infinity change of the log-scalings in this sweep.
    pub max_log_change: S,
    /// Max L1 deviation of fixed marginals immediately after their update
    /// (floating-point roundoff only; the projection is exact).
    pub post_update_fixed_error: S,
}

/// Log-domain scaling potentials `u_k = log a_k` plus cached forward and
/// backward chain messages.
#[derive(Debug, Clone)]
pub struct SolverState<S: Scalar> {
    grid: GridSpec,
    mode: Stabilization,
    log_a: Vec<Field<S>>,
    log_alpha: Vec<Field<S>>,
    log_beta: Vec<Field<S>>,
    valid: bool,
}

impl<S: Scalar> SolverState<S> {
    /// Fresh state with `u_k = 0` and messages computed for the flat start.
    /// `mode` must be `Log` or `Linear` (resolve `Auto` via [`resolve_mode`]).
    pub fn new(kernel: &SeparableKernel<S>, steps: usize, mode: Stabilization) -> Self {
        let grid = *kernel.grid();
        let zero = Field::zeros(grid);
        let mut state = Self {
            grid,
            mode,
            log_a: vec![zero.clone(); steps + 1],
            log_alpha: vec![zero.clone(); steps + 1],
            log_beta: vec![zero; steps + 1],
            valid: true,
        };
        state.refresh_alpha(kernel);
        state.refresh_beta(kernel);
        state
    }

    pub fn steps(&self) -> usize {
        self.log_a.len() - 1
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn mode(&self) -> Stabilization {
        self.mode
    }

    /// The log-scaling `u_k`.
    pub fn log_scaling(&self, k: usize) -> &Field<S> {
        &self.log_a[k]
    }

    /// `log(K exp(g))` in the active stabilization mode.
    fn apply_chain(&self, kernel: &SeparableKernel<S>, g: &Field<S>) -> Result<Field<S>, CoreError> {
        match self.mode {
            Stabilization::Log => kernel.apply_log(g),
            _ => Ok(kernel.apply(&g.exp())?.ln()),
        }
    }

    fn refresh_alpha(&mut self, kernel: &SeparableKernel<S>) {
        self.log_alpha[0] = Field::zeros(self.grid);
        for k in 1..=self.steps() {
            let prev = self.log_a[k - 1]
                .zip_with(&self.log_alpha[k - 1], |a, b| a + b)
                .expect("state fields share one grid");
            self.log_alpha[k] = self
                .apply_chain(kernel, &prev)
                .expect("state fields share the kernel grid");
        }
    }

    fn refresh_beta(&mut self, kernel: &SeparableKernel<S>) {
        let n = self.steps();
        self.log_beta[n] = Field::zeros(self.grid);
        for k in (0..n).rev() {
            let next = self.log_a[k + 1]
                .zip_with(&self.log_beta[k + 1], |a, b| a + b)
                .expect("state fields share one grid");
            self.log_beta[k] = self
                .apply_chain(kernel, &next)
                .expect("state fields share the kernel grid");
        }
    }

    /// The marginal `mu_k = a_k * alpha_k * beta_k`, assembled in log domain
    /// and exponentiated at the end.
    pub fn marginal_at(&self, k: usize) -> Result<Field<S>, CoreError> {
        if !self.valid {
            return Err(CoreError::StaleMessages);
        }
        Ok(Field::from_log_sum(&[
            &self.log_a[k],
            &self.log_alpha[k],
            &self.log_beta[k],
        ]))
    }

    /// Dense pair marginal of `(k, k+1)` as an `M x M` row-major matrix of
    /// densities. Test-scale helper; allocates `M^2` entries.
    pub fn pair_marginal(
        &self,
        kernel: &SeparableKernel<S>,
        k: usize,
    ) -> Result<Vec<S>, CoreError> {
        if !self.valid {
            return Err(CoreError::StaleMessages);
        }
        let total = self.grid.total_cells();
        let left = self.log_a[k]
            .zip_with(&self.log_alpha[k], |a, b| a + b)
            .expect("state fields share one grid");
        let right = self.log_a[k + 1]
            .zip_with(&self.log_beta[k + 1], |a, b| a + b)
            .expect("state fields share one grid");
        let mut out = vec![S::zero(); total * total];
        for i in 0..total {
            for j in 0..total {
                let log_val = left.values()[i] + right.values()[j];
                if log_val > S::neg_infinity() {
                    out[i * total + j] = log_val.exp() * kernel.dense_entry(j, i);
                }
            }
        }
        Ok(out)
    }
}

impl<S: Scalar> Field<S> {
    /// `exp(sum of log-fields)` per cell; any `-inf` yields an exact zero.
    fn from_log_sum(parts: &[&Field<S>]) -> Field<S> {
        let mut out = parts[0].clone();
        for part in &parts[1..] {
            out = out
                .zip_with(part, |a, b| a + b)
                .expect("log-sum fields share one grid");
        }
        out.exp()
    }
}

/// One Gauss-Seidel sweep over all marginal indices.
pub fn sweep<S: Scalar>(
    state: &mut SolverState<S>,
    schedule: &CostSchedule<S>,
    kernel: &SeparableKernel<S>,
    dt: f64,
) -> Result<SweepStats<S>, CoreError> {
    let n = state.steps();
    if schedule.steps() != n {
        return Err(CoreError::InvalidSchedule(format!(
            "schedule has {} steps, state has {n}",
            schedule.steps()
        )));
    }
    let vol = cast::<S>(state.grid.cell_volume());
    let mut stats = SweepStats {
        max_marginal_residual: S::zero(),
        max_log_change: S::zero(),
        post_update_fixed_error: S::zero(),
    };
    state.valid = false;
    for k in 0..=n {
        if k > 0 {
            let prev = state.log_a[k - 1].zip_with(&state.log_alpha[k - 1], |a, b| a + b)?;
            state.log_alpha[k] = state.apply_chain(kernel, &prev)?;
        }
        let log_c = state.log_alpha[k].zip_with(&state.log_beta[k], |a, b| a + b)?;
        let cost = schedule.cost_at(k);
        if cost.is_constrained() {
            let pre = state.log_a[k].zip_with(&log_c, |a, b| a + b)?.exp();
            let residual = constraint_residual(cost, &pre, vol);
            stats.max_marginal_residual = stats.max_marginal_residual.max(residual);
        }
        let new_log_a = prox_update_log(cost, &log_c, schedule.weight(k, dt))?;
        stats.max_log_change = stats.max_log_change.max(state.log_a[k].max_abs_diff(&new_log_a));
        if let CostSpec::FixedMarginal(target) = cost {
            let post = new_log_a.zip_with(&log_c, |a, b| a + b)?.exp();
            stats.post_update_fixed_error =
                stats.post_update_fixed_error.max(post.l1_distance(target)?);
        }
        state.log_a[k] = new_log_a;
    }
    state.refresh_beta(kernel);
    state.valid = true;
    Ok(stats)
}

/// L1 violation of a constrained cost by a candidate marginal.
fn constraint_residual<S: Scalar>(cost: &CostSpec<S>, marginal: &Field<S>, vol: S) -> S {
    match cost {
        CostSpec::FixedMarginal(target) => marginal
            .l1_distance(target)
            .expect("constraint target shares the state grid"),
        CostSpec::Congestion(cap) | CostSpec::CongestionPlusPotential(cap, _) => {
            let excess: S = marginal
                .values()
                .iter()
                .map(|&v| (v - *cap).max(S::zero()))
                .sum();
            excess * vol
        }
        _ => S::zero(),
    }
}

/// The dual objective
/// `-F~*(-u_0) - (T/N) sum F*(-u_k) - G*(-u_N) - (int exp(⊕u) dR^N - 1)`,
/// with the chain integral evaluated as `<a_N, alpha_N> * cell_volume`.
pub fn dual_objective<S: Scalar>(
    state: &SolverState<S>,
    schedule: &CostSchedule<S>,
    kernel: &SeparableKernel<S>,
    dt: f64,
) -> Result<S, CoreError> {
    if !state.valid {
        return Err(CoreError::StaleMessages);
    }
    if kernel.grid() != &state.grid {
        return Err(CoreError::GridMismatch(
            "kernel grid differs from state grid".into(),
        ));
    }
    let n = state.steps();
    let mut value = S::zero();
    for k in 0..=n {
        let term = conjugate_term(schedule.cost_at(k), &state.log_a[k], schedule.weight(k, dt))?;
        value = value - term;
    }
    let chain_mass = Field::from_log_sum(&[&state.log_a[n], &state.log_alpha[n]]).integrate();
    Ok(value + S::one() - chain_mass)
}

/// Everything a finished (or aborted) solve produces.
#[derive(Debug)]
pub struct SolveOutcome<S: Scalar> {
    pub state: SolverState<S>,
    pub report: ConvergenceReport,
    /// All `N + 1` marginal densities.
    pub marginals: Vec<Field<S>>,
}

#[derive(Debug, Error)]
pub enum SolveError<S: Scalar> {
    /// Sweep or outer-iteration budget exhausted; the partial outcome
    /// (state, report, marginals) is attached.
    #[error("iteration limit reached before convergence")]
    MaxIterations(Box<SolveOutcome<S>>),
    #[error(transparent)]
    Core(#[from] CoreError),
}

/// Resolves `Auto` stabilization against the built kernel.
pub fn resolve_mode<S: Scalar>(config: &SolverConfig, kernel: &SeparableKernel<S>) -> Stabilization {
    match config.stabilization {
        Stabilization::Auto => {
            if kernel.min_entry() < LINEAR_SAFE_MIN_ENTRY {
                Stabilization::Log
            } else {
                Stabilization::Linear
            }
        }
        other => other,
    }
}

/// Solves the scheduled problem: inner Sinkhorn sweeps until the joint
/// marginal-residual / potential-change criterion is met, wrapped in an
/// outer semi-implicit loop when the schedule carries nonlocal costs.
pub fn solve<S: Scalar>(
    schedule: &CostSchedule<S>,
    grid: &GridSpec,
    time: &TimeAxis,
    epsilon: f64,
    config: &SolverConfig,
) -> Result<SolveOutcome<S>, SolveError<S>> {
    if schedule.steps() != time.steps {
        return Err(CoreError::InvalidSchedule(format!(
            "schedule has {} steps, time axis has {}",
            schedule.steps(),
            time.steps
        ))
        .into());
    }
    let dt = time.dt();
    let kernel = build_heat_kernel::<S>(grid, dt, epsilon)?;
    let mode = resolve_mode(config, &kernel);
    let mut state = SolverState::new(&kernel, time.steps, mode);

    let nonlocal: Vec<usize> = (0..=schedule.steps())
        .filter(|&k| schedule.cost_at(k).is_nonlocal())
        .collect();

    let mut dual_trace: Vec<f64> = Vec::new();
    let mut outer_trace: Vec<f64> = Vec::new();
    let mut sweeps_total = 0usize;
    let mut outer_iterations = 0usize;

    let theta = cast::<S>(config.damping.clamp(0.0, 1.0));
    let mut potentials: Vec<Field<S>> = nonlocal.iter().map(|_| Field::zeros(*grid)).collect();
    let mut effective = if nonlocal.is_empty() {
        schedule.clone()
    } else {
        linearized_schedule(schedule, &nonlocal, &potentials)
    };

    let finish = |state: SolverState<S>,
                  effective: &CostSchedule<S>,
                  converged: bool,
                  sweeps_total: usize,
                  outer_iterations: usize,
                  dual_trace: Vec<f64>,
                  outer_trace: Vec<f64>,
                  kernel: &SeparableKernel<S>|
     -> Result<SolveOutcome<S>, CoreError> {
        let marginals: Result<Vec<_>, _> =
            (0..=state.steps()).map(|k| state.marginal_at(k)).collect();
        let marginals = marginals?;
        let vol = cast::<S>(grid.cell_volume());
        let mut residuals = Vec::new();
        for k in 0..=state.steps() {
            let cost = effective.cost_at(k);
            if cost.is_constrained() {
                let r = constraint_residual(cost, &marginals[k], vol);
                residuals.push(MarginalResidual {
                    index: k,
                    residual: r.to_f64().unwrap_or(f64::NAN),
                });
            }
        }
        let dual = dual_objective(&state, effective, kernel, dt)?;
        let mut primal = diagnostics::plan_entropy(&state, &marginals)?;
        for k in 0..=state.steps() {
            primal = primal + primal_cost(effective.cost_at(k), &marginals[k], effective.weight(k, dt));
        }
        let gap = (primal - dual).abs() / S::one().max(primal.abs());
        Ok(SolveOutcome {
            report: ConvergenceReport {
                converged,
                sweeps: sweeps_total,
                outer_iterations,
                stabilization_used: match state.mode {
                    Stabilization::Log => "log".into(),
                    _ => "linear".into(),
                },
                marginal_residuals: residuals,
                dual_trace,
                duality_gap: gap.to_f64().unwrap_or(f64::NAN),
                outer_residual_trace: outer_trace,
            },
            marginals,
            state,
        })
    };

    loop {
        outer_iterations += 1;
        // inner loop on the current (possibly linearized) schedule
        let tol = cast::<S>(config.marginal_tolerance);
        let mut inner_converged = false;
        while sweeps_total < config.max_sweeps {
            let stats = sweep(&mut state, &effective, &kernel, dt)?;
            sweeps_total += 1;
            let dual = dual_objective(&state, &effective, &kernel, dt)?;
            dual_trace.push(dual.to_f64().unwrap_or(f64::NAN));
            if stats.max_marginal_residual < tol && stats.max_log_change < tol {
                inner_converged = true;
                break;
            }
        }
        if !inner_converged {
            let outcome = finish(
                state,
                &effective,
                false,
                sweeps_total,
                outer_iterations,
                dual_trace,
                outer_trace,
                &kernel,
            )?;
            return Err(SolveError::MaxIterations(Box::new(outcome)));
        }
        if nonlocal.is_empty() {
            let outcome = finish(
                state,
                &effective,
                true,
                sweeps_total,
                outer_iterations,
                dual_trace,
                outer_trace,
                &kernel,
            )?;
            return Ok(outcome);
        }
        // outer fixed-point step: relinearize from the current marginals
        let mut residual = S::zero();
        let mut next_potentials = Vec::with_capacity(nonlocal.len());
        for (slot, &k) in nonlocal.iter().enumerate() {
            let spec = match schedule.cost_at(k) {
                CostSpec::Nonlocal(spec) => spec,
                _ => unreachable!("nonlocal index list is fixed"),
            };
            let marginal = state.marginal_at(k)?;
            let fresh = match linearize_nonlocal(spec, &marginal)? {
                CostSpec::Potential(f2) | CostSpec::CongestionPlusPotential(_, f2) => f2,
                _ => unreachable!("linearization yields a potential"),
            };
            let damped = fresh.zip_with(&potentials[slot], |new, old| {
                theta * new + (S::one() - theta) * old
            })?;
            residual = residual.max(damped.max_abs_diff(&potentials[slot]));
            next_potentials.push(damped);
        }
        potentials = next_potentials;
        outer_trace.push(residual.to_f64().unwrap_or(f64::NAN));
        effective = linearized_schedule(schedule, &nonlocal, &potentials);
        if residual < cast::<S>(config.fixed_point_tolerance) {
            let outcome = finish(
                state,
                &effective,
                true,
                sweeps_total,
                outer_iterations,
                dual_trace,
                outer_trace,
                &kernel,
            )?;
            return Ok(outcome);
        }
        if outer_iterations >= config.outer_max_iters {
            let outcome = finish(
                state,
                &effective,
                false,
                sweeps_total,
                outer_iterations,
                dual_trace,
                outer_trace,
                &kernel,
            )?;
            return Err(SolveError::MaxIterations(Box::new(outcome)));
        }
    }
}

fn linearized_schedule<S: Scalar>(
    schedule: &CostSchedule<S>,
    nonlocal: &[usize],
    potentials: &[Field<S>],
) -> CostSchedule<S> {
    let replacements: Vec<(usize, CostSpec<S>)> = nonlocal
        .iter()
        .zip(potentials)
        .map(|(&k, f2)| {
            let cost = match schedule.cost_at(k) {
                CostSpec::Nonlocal(spec) => match spec.cap {
                    Some(cap) => CostSpec::CongestionPlusPotential(cap, f2.clone()),
                    None => CostSpec::Potential(f2.clone()),
                },
                _ => unreachable!("nonlocal index list is fixed"),
            };
            (k, cost)
        })
        .collect();
    schedule.with_replacements(&replacements)
}
