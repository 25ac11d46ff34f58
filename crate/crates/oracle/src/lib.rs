//! Dense brute-force reference implementations at desk scale.
//!
//! Everything here works on the full coupling tensor over `(m^d)^(N+1)`
//! entries with explicit summation: no chain factorization, no message
//! passing, no code shared with the production kernel or solver beyond the
//! grid types and cost descriptors. The point is independence: these routines
//! establish expected values the factorized solver is tested against.
//!
//! Size bounds are enforced at construction so oracle runs stay sub-second.

use mmsb::error::CoreError;
use mmsb::functionals::{CostSchedule, CostSpec};
use mmsb::grid::{Boundary, Field, GridSpec, TimeAxis};

/// Tensor sizes accepted by [`dense_solve`]: at most `16^4` entries.
pub const MAX_TENSOR_ENTRIES: usize = 65536;
/// Maximum number of time steps for the dense plan.
pub const MAX_STEPS: usize = 3;
/// Maximum flat grid size for two-marginal (bridge) solves.
pub const MAX_BRIDGE_CELLS: usize = 256;

#[derive(Debug)]
pub enum OracleError {
    /// Instance exceeds the dense-tensor size bounds.
    SizeExceeded(String),
    /// Constraint structurally infeasible (target mass on unreachable cells).
    Infeasible(String),
    /// Iteration budget exhausted before reaching the tolerance.
    NoConvergence(String),
    Core(CoreError),
}

impl std::fmt::Display for OracleError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OracleError::SizeExceeded(s) => write!(f, "size exceeded: {s}"),
            OracleError::Infeasible(s) => write!(f, "infeasible: {s}"),
            OracleError::NoConvergence(s) => write!(f, "no convergence: {s}"),
            OracleError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for OracleError {}

impl From<CoreError> for OracleError {
    fn from(e: CoreError) -> Self {
        OracleError::Core(e)
    }
}

/// Dense one-step transition kernel: the full `M x M` density matrix, built
/// from its own 1-D image summation (periodic) or truncated Gaussian.
#[derive(Debug, Clone)]
pub struct DenseKernel {
    grid: GridSpec,
    entries: Vec<f64>,
}

impl DenseKernel {
    pub fn build(grid: &GridSpec, tau: f64, eps: f64) -> Self {
        let m = grid.points_per_dim;
        let h = grid.spacing();
        let q = 1.0 / (2.0 * eps * tau);
        // independent 1-D construction
        let mut one_d = vec![0.0f64; m * m];
        for i in 0..m {
            for j in 0..m {
                let delta = (i as f64 - j as f64) * h;
                let v = match grid.boundary {
                    Boundary::Periodic => {
                        let l = grid.side_length;
                        let mut sum = 0.0;
                        for w in -64i64..=64 {
                            let d = delta + w as f64 * l;
                            let term = (-q * d * d).exp();
                            sum += term;
                        }
                        sum
                    }
                    Boundary::Truncated => (-q * delta * delta).exp(),
                };
                one_d[i * m + j] = v;
            }
        }
        // column normalization: h * column_sum = 1
        for j in 0..m {
            let col: f64 = (0..m).map(|i| one_d[i * m + j]).sum();
            let norm = 1.0 / (h * col);
            for i in 0..m {
                one_d[i * m + j] *= norm;
            }
        }
        // dense d-dimensional product
        let total = grid.total_cells();
        let mut entries = vec![0.0f64; total * total];
        for to in 0..total {
            let mi = grid.multi_index(to);
            for from in 0..total {
                let mj = grid.multi_index(from);
                let mut prod = 1.0;
                for dim in 0..grid.dims {
                    prod *= one_d[mi[dim] * m + mj[dim]];
                }
                entries[to * total + from] = prod;
            }
        }
        Self {
            grid: *grid,
            entries,
        }
    }

    pub fn entry(&self, to: usize, from: usize) -> f64 {
        self.entries[to * self.grid.total_cells() + from]
    }

    /// `(K b)(i) = cell_volume * sum_j K[i, j] b[j]`.
    pub fn apply(&self, b: &[f64]) -> Vec<f64> {
        let total = self.grid.total_cells();
        let vol = self.grid.cell_volume();
        let mut out = vec![0.0f64; total];
        for (i, slot) in out.iter_mut().enumerate() {
            let row = &self.entries[i * total..(i + 1) * total];
            *slot = vol * row.iter().zip(b).map(|(k, v)| k * v).sum::<f64>();
        }
        out
    }
}

/// Visits every multi-index of the `(N+1)`-fold tensor in row-major order.
fn for_each_index(total: usize, slots: usize, mut visit: impl FnMut(&[usize])) {
    let mut idx = vec![0usize; slots];
    loop {
        visit(&idx);
        let mut slot = slots;
        loop {
            if slot == 0 {
                return;
            }
            slot -= 1;
            idx[slot] += 1;
            if idx[slot] < total {
                break;
            }
            idx[slot] = 0;
        }
    }
}

/// The full coupling tensor, represented by its scaling vectors and the dense
/// reference chain (the plan is `prod_k a_k(x_k)` times the chain density).
#[derive(Debug)]
pub struct DensePlan {
    pub grid: GridSpec,
    pub steps: usize,
    /// One scaling vector per marginal index.
    pub scalings: Vec<Vec<f64>>,
    pub kernel: DenseKernel,
}

impl DensePlan {
    fn chain_density(&self, idx: &[usize]) -> f64 {
        let mut r = 1.0;
        for k in 1..idx.len() {
            r *= self.kernel.entry(idx[k], idx[k - 1]);
        }
        r
    }

    /// Plan density at a multi-index.
    pub fn density(&self, idx: &[usize]) -> f64 {
        let mut g = self.chain_density(idx);
        for (k, &i) in idx.iter().enumerate() {
            g *= self.scalings[k][i];
        }
        g
    }

    /// Marginal density at index `k` by explicit summation.
    pub fn marginal(&self, k: usize) -> Field<f64> {
        let total = self.grid.total_cells();
        let voln = self.grid.cell_volume().powi(self.steps as i32);
        let mut out = vec![0.0f64; total];
        for_each_index(total, self.steps + 1, |idx| {
            out[idx[k]] += self.density(idx);
        });
        for v in &mut out {
            *v *= voln;
        }
        Field::new(self.grid, out).expect("marginal length matches grid")
    }

    /// Pair marginal density of `(k, k+1)` as a row-major `M x M` matrix.
    pub fn pair_marginal(&self, k: usize) -> Vec<f64> {
        let total = self.grid.total_cells();
        let voln = self.grid.cell_volume().powi(self.steps as i32 - 1);
        let mut out = vec![0.0f64; total * total];
        for_each_index(total, self.steps + 1, |idx| {
            out[idx[k] * total + idx[k + 1]] += self.density(idx);
        });
        for v in &mut out {
            *v *= voln;
        }
        out
    }

    /// `H(gamma | R^N)` by explicit summation over the full tensor.
    pub fn entropy_vs_reference(&self) -> f64 {
        let total = self.grid.total_cells();
        let voln1 = self.grid.cell_volume().powi(self.steps as i32 + 1);
        let mut acc = 0.0;
        for_each_index(total, self.steps + 1, |idx| {
            let g = self.density(idx);
            if g > 0.0 {
                let mut log_ratio = 0.0;
                for (k, &i) in idx.iter().enumerate() {
                    log_ratio += self.scalings[k][i].ln();
                }
                acc += g * log_ratio;
            }
        });
        acc * voln1
    }

    /// Total plan mass `int d(gamma)`.
    pub fn mass(&self) -> f64 {
        let total = self.grid.total_cells();
        let voln1 = self.grid.cell_volume().powi(self.steps as i32 + 1);
        let mut acc = 0.0;
        for_each_index(total, self.steps + 1, |idx| {
            acc += self.density(idx);
        });
        acc * voln1
    }

    /// Dual objective of the scaled plan under the given schedule.
    pub fn dual_objective(&self, schedule: &CostSchedule<f64>, dt: f64) -> f64 {
        let vol = self.grid.cell_volume();
        let mut value = 0.0;
        for k in 0..=self.steps {
            let u: Vec<f64> = self.scalings[k].iter().map(|a| a.ln()).collect();
            let w = schedule.weight(k, dt);
            value -= dense_conjugate(schedule.cost_at(k), &u, w, vol);
        }
        value + 1.0 - self.mass()
    }
}

fn dense_conjugate(cost: &CostSpec<f64>, u: &[f64], w: f64, vol: f64) -> f64 {
    match cost {
        CostSpec::Free => 0.0,
        CostSpec::FixedMarginal(target) => {
            let mut acc = 0.0;
            for (ui, rho) in u.iter().zip(target.values()) {
                if *rho > 0.0 {
                    acc += ui * rho;
                }
            }
            -acc * vol
        }
        CostSpec::Congestion(cap) => {
            cap * vol * u.iter().map(|ui| (-ui).max(0.0)).sum::<f64>()
        }
        CostSpec::Potential(_) => 0.0,
        CostSpec::CongestionPlusPotential(cap, v) => {
            let mut acc = 0.0;
            for (ui, vi) in u.iter().zip(v.values()) {
                if vi.is_finite() {
                    acc += (-ui - w * vi).max(0.0);
                }
            }
            cap * acc * vol
        }
        CostSpec::Nonlocal(_) => f64::NAN,
    }
}

/// Closed-form scaling update, reimplemented dense (explicit sums, no shared
/// code with the production prox).
fn dense_prox(
    cost: &CostSpec<f64>,
    c: &[f64],
    w: f64,
) -> Result<Vec<f64>, OracleError> {
    match cost {
        CostSpec::Free => Ok(vec![1.0; c.len()]),
        CostSpec::FixedMarginal(target) => {
            let mut a = vec![0.0; c.len()];
            for i in 0..c.len() {
                let rho = target.values()[i];
                if rho > 0.0 {
                    if !(c[i] > 0.0) {
                        return Err(OracleError::Infeasible(
                            "target mass on unreachable cell".into(),
                        ));
                    }
                    a[i] = rho / c[i];
                }
            }
            Ok(a)
        }
        CostSpec::Congestion(cap) => Ok(c
            .iter()
            .map(|&ci| if ci > 0.0 { (cap / ci).min(1.0) } else { 1.0 })
            .collect()),
        CostSpec::Potential(v) => Ok(v.values().iter().map(|&vi| (-w * vi).exp()).collect()),
        CostSpec::CongestionPlusPotential(cap, v) => Ok(v
            .values()
            .iter()
            .zip(c)
            .map(|(&vi, &ci)| {
                let pot = (-w * vi).exp();
                if ci > 0.0 {
                    pot.min(cap / ci)
                } else {
                    pot
                }
            })
            .collect()),
        CostSpec::Nonlocal(_) => Err(OracleError::Core(CoreError::NonConvexDirect)),
    }
}

/// Solves the scheduled problem on the full tensor by direct contractions:
/// the integral reducing each update is an explicit sum over every other
/// index. Gauss-Seidel order, unit initial scalings, same stopping rule as
/// the production solver.
pub fn dense_solve(
    schedule: &CostSchedule<f64>,
    grid: &GridSpec,
    time: &TimeAxis,
    epsilon: f64,
    tol: f64,
    max_iters: usize,
) -> Result<DensePlan, OracleError> {
    let n = time.steps;
    let total = grid.total_cells();
    if n > MAX_STEPS {
        return Err(OracleError::SizeExceeded(format!(
            "N = {n} exceeds the dense bound {MAX_STEPS}"
        )));
    }
    let entries = total.checked_pow(n as u32 + 1).unwrap_or(usize::MAX);
    if entries > MAX_TENSOR_ENTRIES {
        return Err(OracleError::SizeExceeded(format!(
            "tensor has {entries} entries, bound is {MAX_TENSOR_ENTRIES}"
        )));
    }
    if schedule.steps() != n {
        return Err(OracleError::Core(CoreError::InvalidSchedule(format!(
            "schedule has {} steps, time axis has {n}",
            schedule.steps()
        ))));
    }
    let dt = time.dt();
    let kernel = DenseKernel::build(grid, dt, epsilon);
    let voln = grid.cell_volume().powi(n as i32);
    let vol = grid.cell_volume();
    let mut plan = DensePlan {
        grid: *grid,
        steps: n,
        scalings: vec![vec![1.0; total]; n + 1],
        kernel,
    };
    for _ in 0..max_iters {
        let mut max_residual = 0.0f64;
        let mut max_change = 0.0f64;
        for k in 0..=n {
            // c_k by direct tensor contraction over all other indices
            let mut c = vec![0.0f64; total];
            for_each_index(total, n + 1, |idx| {
                let mut w = plan.chain_density(idx);
                for (j, &i) in idx.iter().enumerate() {
                    if j != k {
                        w *= plan.scalings[j][i];
                    }
                }
                c[idx[k]] += w;
            });
            for ci in &mut c {
                *ci *= voln;
            }
            let cost = schedule.cost_at(k);
            if let CostSpec::FixedMarginal(target) = cost {
                let res: f64 = c
                    .iter()
                    .zip(plan.scalings[k].iter())
                    .zip(target.values())
                    .map(|((ci, ai), rho)| (ci * ai - rho).abs())
                    .sum::<f64>()
                    * vol;
                max_residual = max_residual.max(res);
            }
            let a_new = dense_prox(cost, &c, schedule.weight(k, dt))?;
            for (new, old) in a_new.iter().zip(&plan.scalings[k]) {
                if new != old {
                    let change = if *old > 0.0 && *new > 0.0 {
                        (new.ln() - old.ln()).abs()
                    } else {
                        f64::INFINITY
                    };
                    max_change = max_change.max(change);
                }
            }
            plan.scalings[k] = a_new;
        }
        if max_residual < tol && max_change < tol {
            return Ok(plan);
        }
    }
    Err(OracleError::NoConvergence(format!(
        "dense solve did not reach {tol} in {max_iters} iterations"
    )))
}

/// A converged two-marginal bridge: the dense plan and its entropic cost.
#[derive(Debug)]
pub struct Bridge {
    /// Plan density, row-major `M x M` (first index is the earlier marginal).
    pub plan: Vec<f64>,
    /// `H(gamma | R_{0,h})`, the bridge cost `S_h(mu, nu)`.
    pub cost: f64,
}

/// Solves the two-marginal bridge between `mu` and `nu` over one step of
/// length `h` by dense Sinkhorn iteration.
pub fn dense_bridge(
    mu: &Field<f64>,
    nu: &Field<f64>,
    grid: &GridSpec,
    epsilon: f64,
    h: f64,
    tol: f64,
    max_iters: usize,
) -> Result<Bridge, OracleError> {
    let total = grid.total_cells();
    if total > MAX_BRIDGE_CELLS {
        return Err(OracleError::SizeExceeded(format!(
            "bridge grid has {total} cells, bound is {MAX_BRIDGE_CELLS}"
        )));
    }
    let kernel = DenseKernel::build(grid, h, epsilon);
    let vol = grid.cell_volume();
    let mut b0 = vec![1.0f64; total];
    let mut b1 = vec![1.0f64; total];
    let mut converged = false;
    for _ in 0..max_iters {
        let k_b1 = kernel.apply(&b1);
        let res: f64 = b0
            .iter()
            .zip(&k_b1)
            .zip(mu.values())
            .map(|((a, kb), rho)| (a * kb - rho).abs())
            .sum::<f64>()
            * vol;
        for i in 0..total {
            b0[i] = if mu.values()[i] > 0.0 {
                if !(k_b1[i] > 0.0) {
                    return Err(OracleError::Infeasible(
                        "bridge target mass on unreachable cell".into(),
                    ));
                }
                mu.values()[i] / k_b1[i]
            } else {
                0.0
            };
        }
        let k_b0 = kernel.apply(&b0);
        for i in 0..total {
            b1[i] = if nu.values()[i] > 0.0 {
                nu.values()[i] / k_b0[i]
            } else {
                0.0
            };
        }
        if res < tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(OracleError::NoConvergence(format!(
            "bridge did not reach {tol} in {max_iters} iterations"
        )));
    }
    // H(gamma | R) = int log(b0) d(mu) + int log(b1) d(nu)
    let mut cost = 0.0;
    for (b, rho) in b0.iter().zip(mu.values()) {
        if *rho > 0.0 {
            cost += rho * b.ln();
        }
    }
    for (b, rho) in b1.iter().zip(nu.values()) {
        if *rho > 0.0 {
            cost += rho * b.ln();
        }
    }
    cost *= vol;
    let mut plan = vec![0.0f64; total * total];
    for i in 0..total {
        for j in 0..total {
            plan[i * total + j] = b0[i] * kernel.entry(i, j) * b1[j];
        }
    }
    Ok(Bridge { plan, cost })
}

/// Entropy relative to Lebesgue, reimplemented locally.
pub fn dense_entropy(f: &Field<f64>) -> f64 {
    let vol = f.spec().cell_volume();
    f.values()
        .iter()
        .map(|&v| if v > 0.0 { v * v.ln() } else { 0.0 })
        .sum::<f64>()
        * vol
}

/// `sum_k S_{dt}(mu_k, mu_{k+1}) - sum_{k=1}^{N-1} Ent(mu_k)` by independent
/// two-marginal solves; equals the multi-marginal plan entropy when the same
/// marginals are all fixed.
pub fn pairwise_bridge_objective(
    marginals: &[Field<f64>],
    grid: &GridSpec,
    epsilon: f64,
    dt: f64,
    tol: f64,
) -> Result<f64, OracleError> {
    if marginals.len() < 2 {
        return Err(OracleError::SizeExceeded(
            "need at least two marginals".into(),
        ));
    }
    let mut value = 0.0;
    for pair in marginals.windows(2) {
        let bridge = dense_bridge(&pair[0], &pair[1], grid, epsilon, dt, tol, 100_000)?;
        value += bridge.cost;
    }
    for mu in &marginals[1..marginals.len() - 1] {
        value -= dense_entropy(mu);
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bump(grid: GridSpec, center: f64, sigma: f64) -> Field<f64> {
        Field::from_fn(grid, |mi| {
            let mut q = 0.0;
            for &c in mi {
                let mut d = (grid.coordinate(c) - center).abs();
                d = d.min(grid.side_length - d);
                q += d * d;
            }
            (-q / (2.0 * sigma * sigma)).exp()
        })
        .normalize_to_probability()
        .unwrap()
    }

    #[test]
    fn reference_chain_marginals_are_uniform() {
        let g = GridSpec::torus(1, 8).unwrap();
        let time = TimeAxis::new(1.0, 2).unwrap();
        let kernel = DenseKernel::build(&g, time.dt(), 0.5);
        let plan = DensePlan {
            grid: g,
            steps: 2,
            scalings: vec![vec![1.0; 8]; 3],
            kernel,
        };
        for k in 0..=2 {
            let mu = plan.marginal(k);
            for &v in mu.values() {
                assert!((v - 1.0).abs() < 1e-12, "marginal {k} value {v}");
            }
        }
    }

    #[test]
    fn fixed_endpoints_are_matched() {
        let g = GridSpec::torus(1, 8).unwrap();
        let time = TimeAxis::new(1.0, 1).unwrap();
        let rho0 = bump(g, 0.3, 0.1);
        let rho1 = bump(g, 0.7, 0.12);
        let schedule = CostSchedule::new(vec![
            CostSpec::FixedMarginal(rho0.clone()),
            CostSpec::FixedMarginal(rho1.clone()),
        ])
        .unwrap();
        let plan = dense_solve(&schedule, &g, &time, 0.4, 1e-13, 100_000).unwrap();
        let mu0 = plan.marginal(0);
        let mu1 = plan.marginal(1);
        for (got, want) in mu0.values().iter().zip(rho0.values()) {
            assert!((got - want).abs() < 1e-12);
        }
        for (got, want) in mu1.values().iter().zip(rho1.values()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn fully_constrained_plan_is_markov() {
        let g = GridSpec::torus(1, 8).unwrap();
        let time = TimeAxis::new(1.0, 2).unwrap();
        let mus: Vec<Field<f64>> = vec![bump(g, 0.2, 0.1), bump(g, 0.5, 0.12), bump(g, 0.8, 0.1)];
        let schedule =
            CostSchedule::new(mus.iter().cloned().map(CostSpec::FixedMarginal).collect()).unwrap();
        let plan = dense_solve(&schedule, &g, &time, 0.4, 1e-13, 100_000).unwrap();
        let mu1 = plan.marginal(1);
        let p01 = plan.pair_marginal(0);
        let p12 = plan.pair_marginal(1);
        // gamma(x0, x1, x2) * mu1(x1) == gamma01(x0, x1) * gamma12(x1, x2)
        for i0 in 0..8 {
            for i1 in 0..8 {
                for i2 in 0..8 {
                    let lhs = plan.density(&[i0, i1, i2]) * mu1.values()[i1];
                    let rhs = p01[i0 * 8 + i1] * p12[i1 * 8 + i2];
                    assert!(
                        (lhs - rhs).abs() <= 1e-10 * rhs.abs().max(1.0),
                        "({i0},{i1},{i2}): {lhs} vs {rhs}"
                    );
                }
            }
        }
    }

    #[test]
    fn size_bound_is_enforced() {
        let g = GridSpec::torus(2, 8).unwrap(); // 64 cells -> 64^3 entries
        let time = TimeAxis::new(1.0, 2).unwrap();
        let uniform = Field::constant(g, 1.0f64);
        let schedule = CostSchedule::new(vec![
            CostSpec::FixedMarginal(uniform.clone()),
            CostSpec::Free,
            CostSpec::FixedMarginal(uniform),
        ])
        .unwrap();
        assert!(matches!(
            dense_solve(&schedule, &g, &time, 0.5, 1e-10, 100),
            Err(OracleError::SizeExceeded(_))
        ));
    }

    #[test]
    fn pairwise_objective_of_identical_uniform_marginals_is_zero() {
        let g = GridSpec::torus(1, 16).unwrap();
        let uniform = Field::constant(g, 1.0f64);
        let mus = vec![uniform.clone(), uniform.clone(), uniform];
        let value = pairwise_bridge_objective(&mus, &g, 0.5, 0.5, 1e-12).unwrap();
        assert!(value.abs() < 1e-10, "value {value}");
    }

    #[test]
    fn single_step_pairwise_reduces_to_one_bridge() {
        let g = GridSpec::torus(1, 16).unwrap();
        let mu = bump(g, 0.3, 0.1);
        let nu = bump(g, 0.7, 0.1);
        let via_pairwise =
            pairwise_bridge_objective(&[mu.clone(), nu.clone()], &g, 0.6, 1.0, 1e-12).unwrap();
        let direct = dense_bridge(&mu, &nu, &g, 0.6, 1.0, 1e-12, 100_000).unwrap();
        assert!((via_pairwise - direct.cost).abs() < 1e-12);
    }

    #[test]
    fn bridge_plan_has_prescribed_marginals() {
        let g = GridSpec::torus(1, 12).unwrap();
        let mu = bump(g, 0.25, 0.09);
        let nu = bump(g, 0.75, 0.11);
        let bridge = dense_bridge(&mu, &nu, &g, 0.5, 0.5, 1e-13, 100_000).unwrap();
        let vol = g.cell_volume();
        for i in 0..12 {
            let row: f64 = (0..12).map(|j| bridge.plan[i * 12 + j]).sum::<f64>() * vol;
            assert!((row - mu.values()[i]).abs() < 1e-11);
            let col: f64 = (0..12).map(|j| bridge.plan[j * 12 + i]).sum::<f64>() * vol;
            assert!((col - nu.values()[i]).abs() < 1e-11);
        }
    }
}
