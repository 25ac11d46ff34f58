//! Per-marginal cost descriptors and their closed-form dual updates.
//!
//! The scaling update at a marginal maximizes the dual objective restricted
//! to that marginal's potential `u`, which reduces pointwise to maximizing
//! `-conjugate(-u) - c * exp(u)` given the chain message product `c`. Every
//! supported cost admits a closed-form maximizer.
//!
//! Weight convention: the running cost carries weight `w = dt` at interior
//! indices and the terminal cost weight `w = 1`; marginal constraints are
//! indicators, for which the weight is immaterial.

use crate::error::CoreError;
use crate::grid::Field;
use crate::scalar::{cast, Scalar};

/// Nonlocal interaction: the running cost `-int K(x-y) rho(y) rho(x) dy dx`
/// handled semi-implicitly, with an optional hard congestion cap.
#[derive(Debug, Clone)]
pub struct NonlocalSpec<S: Scalar> {
    /// Interaction kernel sampled on the displacement grid (periodic wrap).
    pub kernel: Field<S>,
    /// Whether `K(z) == K(-z)` holds; non-symmetric kernels make the game
    /// non-variational, so the solver only reports a fixed-point residual.
    pub symmetric: bool,
    /// Optional hard congestion cap applied alongside the interaction.
    pub cap: Option<S>,
}

/// The cost attached to one marginal index.
#[derive(Debug, Clone)]
pub enum CostSpec<S: Scalar> {
    /// No cost: the marginal is only coupled through the chain.
    Free,
    /// The marginal must equal this probability field.
    FixedMarginal(Field<S>),
    /// Hard congestion: density must stay below the cap.
    Congestion(S),
    /// Linear potential cost `w * int V d(mu)`; `+inf` flags obstacles.
    Potential(Field<S>),
    /// Congestion cap and potential combined.
    CongestionPlusPotential(S, Field<S>),
    /// Nonlocal interaction; must be linearized before a dual update.
    Nonlocal(NonlocalSpec<S>),
}

impl<S: Scalar> CostSpec<S> {
    pub fn is_nonlocal(&self) -> bool {
        matches!(self, CostSpec::Nonlocal(_))
    }

    /// Whether this cost constrains the marginal (used for residual tracking).
    pub fn is_constrained(&self) -> bool {
        matches!(
            self,
            CostSpec::FixedMarginal(_)
                | CostSpec::Congestion(_)
                | CostSpec::CongestionPlusPotential(..)
        )
    }
}

/// Per-index cost assignment for marginals `k = 0..=N`. Index 0 always pins
/// the initial density.
#[derive(Debug, Clone)]
pub struct CostSchedule<S: Scalar> {
    costs: Vec<CostSpec<S>>,
}

impl<S: Scalar> CostSchedule<S> {
    pub fn new(costs: Vec<CostSpec<S>>) -> Result<Self, CoreError> {
        if costs.len() < 2 {
            return Err(CoreError::InvalidSchedule(
                "schedule needs at least indices 0 and N".into(),
            ));
        }
        match &costs[0] {
            CostSpec::FixedMarginal(_) => {}
            _ => {
                return Err(CoreError::InvalidSchedule(
                    "index 0 must fix the initial density".into(),
                ))
            }
        }
        for (k, cost) in costs.iter().enumerate() {
            if let CostSpec::FixedMarginal(target) = cost {
                let mass = target.integrate().to_f64().unwrap_or(f64::NAN);
                let mass_tol = 1e-8f64.max(S::epsilon().to_f64().unwrap_or(0.0) * 1e3);
                if (mass - 1.0).abs() > mass_tol {
                    return Err(CoreError::InvalidSchedule(format!(
                        "fixed marginal at index {k} has mass {mass}, expected 1"
                    )));
                }
            }
            let cap = match cost {
                CostSpec::Congestion(cap) => Some(*cap),
                CostSpec::CongestionPlusPotential(cap, _) => Some(*cap),
                CostSpec::Nonlocal(spec) => spec.cap,
                _ => None,
            };
            if let Some(cap) = cap {
                if !(cap > S::zero()) {
                    return Err(CoreError::InvalidSchedule(format!(
                        "congestion cap at index {k} must be positive"
                    )));
                }
            }
        }
        Ok(Self { costs })
    }

    /// Number of time steps `N` (marginal indices run `0..=N`).
    pub fn steps(&self) -> usize {
        self.costs.len() - 1
    }

    pub fn cost_at(&self, k: usize) -> &CostSpec<S> {
        &self.costs[k]
    }

    pub fn costs(&self) -> &[CostSpec<S>] {
        &self.costs
    }

    /// Dual weight of index `k`: `dt` at interior indices, 1 at the terminal.
    pub fn weight(&self, k: usize, dt: f64) -> S {
        if k == self.steps() {
            S::one()
        } else {
            cast::<S>(dt)
        }
    }

    pub fn has_nonlocal(&self) -> bool {
        self.costs.iter().any(CostSpec::is_nonlocal)
    }

    /// Returns a copy with nonlocal costs replaced by the given linearized
    /// specs (index, replacement).
    pub fn with_replacements(&self, replacements: &[(usize, CostSpec<S>)]) -> Self {
        let mut costs = self.costs.clone();
        for (k, cost) in replacements {
            costs[*k] = cost.clone();
        }
        Self { costs }
    }
}

/// The scaling `a = exp(u)` maximizing the dual restricted to one marginal,
/// given the chain message product `c >= 0` and the index weight `w`.
///
/// Cells where `c = 0` and the fixed target is 0 return `a = 0`, keeping the
/// plan supported on the reachable set.
pub fn prox_update<S: Scalar>(
    cost: &CostSpec<S>,
    c: &Field<S>,
    w: S,
) -> Result<Field<S>, CoreError> {
    match cost {
        CostSpec::Free => Ok(Field::constant(*c.spec(), S::one())),
        CostSpec::FixedMarginal(target) => {
            if target.spec() != c.spec() {
                return Err(CoreError::GridMismatch(
                    "fixed-marginal target grid differs from message grid".into(),
                ));
            }
            let mut out = Field::zeros(*c.spec());
            for (i, slot) in out.values_mut().iter_mut().enumerate() {
                let rho = target.values()[i];
                let ci = c.values()[i];
                if rho > S::zero() {
                    if !(ci > S::zero()) {
                        return Err(CoreError::Infeasible(
                            "fixed marginal has mass where the chain message vanishes".into(),
                        ));
                    }
                    *slot = rho / ci;
                }
            }
            Ok(out)
        }
        CostSpec::Congestion(cap) => Ok(c.map(|ci| {
            if ci > S::zero() {
                (*cap / ci).min(S::one())
            } else {
                S::one()
            }
        })),
        CostSpec::Potential(v) => {
            if v.spec() != c.spec() {
                return Err(CoreError::GridMismatch(
                    "potential grid differs from message grid".into(),
                ));
            }
            Ok(v.map(|vi| (-w * vi).exp()))
        }
        CostSpec::CongestionPlusPotential(cap, v) => {
            if v.spec() != c.spec() {
                return Err(CoreError::GridMismatch(
                    "potential grid differs from message grid".into(),
                ));
            }
            Ok(v.zip_with(c, |vi, ci| {
                let pot = (-w * vi).exp();
                if ci > S::zero() {
                    pot.min(*cap / ci)
                } else {
                    pot
                }
            })?)
        }
        CostSpec::Nonlocal(_) => Err(CoreError::NonConvexDirect),
    }
}

/// Log-domain variant of [`prox_update`]: takes `log c` and returns
/// `u = log a`. Exact zeros are `-inf` on both sides.
pub fn prox_update_log<S: Scalar>(
    cost: &CostSpec<S>,
    log_c: &Field<S>,
    w: S,
) -> Result<Field<S>, CoreError> {
    match cost {
        CostSpec::Free => Ok(Field::zeros(*log_c.spec())),
        CostSpec::FixedMarginal(target) => {
            if target.spec() != log_c.spec() {
                return Err(CoreError::GridMismatch(
                    "fixed-marginal target grid differs from message grid".into(),
                ));
            }
            let mut out = Field::constant(*log_c.spec(), S::neg_infinity());
            for (i, slot) in out.values_mut().iter_mut().enumerate() {
                let rho = target.values()[i];
                let lc = log_c.values()[i];
                if rho > S::zero() {
                    if lc == S::neg_infinity() {
                        return Err(CoreError::Infeasible(
                            "fixed marginal has mass where the chain message vanishes".into(),
                        ));
                    }
                    *slot = rho.ln() - lc;
                }
            }
            Ok(out)
        }
        CostSpec::Congestion(cap) => {
            let log_cap = cap.ln();
            Ok(log_c.map(|lc| {
                if lc == S::neg_infinity() {
                    S::zero()
                } else {
                    (log_cap - lc).min(S::zero())
                }
            }))
        }
        CostSpec::Potential(v) => {
            if v.spec() != log_c.spec() {
                return Err(CoreError::GridMismatch(
                    "potential grid differs from message grid".into(),
                ));
            }
            Ok(v.map(|vi| -w * vi))
        }
        CostSpec::CongestionPlusPotential(cap, v) => {
            if v.spec() != log_c.spec() {
                return Err(CoreError::GridMismatch(
                    "potential grid differs from message grid".into(),
                ));
            }
            let log_cap = cap.ln();
            Ok(v.zip_with(log_c, |vi, lc| {
                let pot = -w * vi;
                if lc == S::neg_infinity() {
                    pot
                } else {
                    pot.min(log_cap - lc)
                }
            })?)
        }
        CostSpec::Nonlocal(_) => Err(CoreError::NonConvexDirect),
    }
}

/// Semi-implicit linearization of a nonlocal cost: replaces the interaction
/// by the potential `f2(x) = -sum_y K(x - y) rho(y) * cell_volume`, evaluated
/// by grid convolution with periodic wrap. Keeps the congestion cap if any.
pub fn linearize_nonlocal<S: Scalar>(
    spec: &NonlocalSpec<S>,
    rho_current: &Field<S>,
) -> Result<CostSpec<S>, CoreError> {
    let f2 = nonlocal_potential(&spec.kernel, rho_current)?;
    Ok(match spec.cap {
        Some(cap) => CostSpec::CongestionPlusPotential(cap, f2),
        None => CostSpec::Potential(f2),
    })
}

/// The induced potential `f2 = -(K * rho) * cell_volume` (periodic wrap).
pub fn nonlocal_potential<S: Scalar>(
    kernel: &Field<S>,
    rho: &Field<S>,
) -> Result<Field<S>, CoreError> {
    if kernel.spec() != rho.spec() {
        return Err(CoreError::GridMismatch(
            "interaction kernel grid differs from density grid".into(),
        ));
    }
    let grid = *rho.spec();
    let m = grid.points_per_dim as isize;
    let d = grid.dims;
    let vol = cast::<S>(grid.cell_volume());
    let total = grid.total_cells();
    let mut out = Field::zeros(grid);
    let mut x_multi = vec![0usize; d];
    let mut src = vec![0usize; d];
    for x in 0..total {
        let mut rem = x;
        for dim in (0..d).rev() {
            x_multi[dim] = rem % grid.points_per_dim;
            rem /= grid.points_per_dim;
        }
        let mut acc = S::zero();
        for z in 0..total {
            let mut rem_z = z;
            let mut idx = 0usize;
            for dim in (0..d).rev() {
                let zc = (rem_z % grid.points_per_dim) as isize;
                rem_z /= grid.points_per_dim;
                src[dim] = ((x_multi[dim] as isize - zc).rem_euclid(m)) as usize;
            }
            for dim in 0..d {
                idx = idx * grid.points_per_dim + src[dim];
            }
            acc = acc + kernel.values()[z] * rho.values()[idx];
        }
        out.values_mut()[x] = -acc * vol;
    }
    Ok(out)
}

/// `W*(-u)` for the weighted cost at one index: the conjugate term entering
/// the dual objective. Infinite when `u` is dual-infeasible.
pub fn conjugate_term<S: Scalar>(cost: &CostSpec<S>, u: &Field<S>, w: S) -> Result<S, CoreError> {
    let vol = cast::<S>(u.spec().cell_volume());
    match cost {
        CostSpec::Free => Ok(S::zero()),
        CostSpec::FixedMarginal(target) => {
            let mut acc = S::zero();
            for (ui, rho) in u.values().iter().zip(target.values()) {
                if *rho > S::zero() {
                    acc = acc + *ui * *rho;
                }
            }
            Ok(-acc * vol)
        }
        CostSpec::Congestion(cap) => {
            let mut acc = S::zero();
            for &ui in u.values() {
                acc = acc + (-ui).max(S::zero());
            }
            Ok(*cap * acc * vol)
        }
        CostSpec::Potential(v) => {
            // finite exactly when u >= -w V everywhere
            for (ui, vi) in u.values().iter().zip(v.values()) {
                if vi.is_infinite() {
                    continue;
                }
                if *ui + w * *vi < -cast::<S>(1e-9) {
                    return Ok(S::infinity());
                }
            }
            Ok(S::zero())
        }
        CostSpec::CongestionPlusPotential(cap, v) => {
            let mut acc = S::zero();
            for (ui, vi) in u.values().iter().zip(v.values()) {
                if vi.is_infinite() {
                    continue;
                }
                acc = acc + (-*ui - w * *vi).max(S::zero());
            }
            Ok(*cap * acc * vol)
        }
        CostSpec::Nonlocal(_) => Err(CoreError::NonConvexDirect),
    }
}

/// Primal cost value of one index evaluated at its marginal (hard
/// constraints contribute zero; violations are tracked separately).
pub fn primal_cost<S: Scalar>(cost: &CostSpec<S>, marginal: &Field<S>, w: S) -> S {
    let vol = cast::<S>(marginal.spec().cell_volume());
    match cost {
        CostSpec::Free | CostSpec::FixedMarginal(_) | CostSpec::Congestion(_) => S::zero(),
        CostSpec::Potential(v) | CostSpec::CongestionPlusPotential(_, v) => {
            let mut acc = S::zero();
            for (vi, mu) in v.values().iter().zip(marginal.values()) {
                if vi.is_finite() && *mu > S::zero() {
                    acc = acc + *vi * *mu;
                }
            }
            w * acc * vol
        }
        CostSpec::Nonlocal(_) => S::zero(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;

    fn grid(m: usize) -> GridSpec {
        GridSpec::torus(1, m).unwrap()
    }

    /// Scan of the pointwise restricted dual, the independent maximizer check.
    fn scan_best(cost_phi: impl Fn(f64) -> f64) -> f64 {
        let mut best = f64::NEG_INFINITY;
        let mut u = -30.0;
        while u <= 30.0 {
            best = best.max(cost_phi(u));
            u += 1e-3;
        }
        best
    }

    #[test]
    fn congestion_active_halves_scaling() {
        let g = grid(8);
        let c = Field::constant(g, 2.0f64);
        let a = prox_update(&CostSpec::Congestion(1.0), &c, 0.1f64).unwrap();
        for &v in a.values() {
            assert!((v - 0.5).abs() < 1e-15);
        }
        // independent grid scan of u -> -cap*max(-u,0) - c*exp(u)
        let phi = |u: f64| -1.0 * (-u).max(0.0) - 2.0 * u.exp();
        assert!(phi(0.5f64.ln()) >= scan_best(phi) - 1e-9);
    }

    #[test]
    fn congestion_inactive_returns_one() {
        let g = grid(8);
        let c = Field::constant(g, 0.7f64);
        let a = prox_update(&CostSpec::Congestion(1.0), &c, 0.1).unwrap();
        for &v in a.values() {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn fixed_marginal_already_matched() {
        let g = grid(16);
        let rho = Field::from_fn(g, |m| 1.0 + (m[0] as f64 / 5.0).sin().powi(2))
            .normalize_to_probability()
            .unwrap();
        let a = prox_update(&CostSpec::FixedMarginal(rho.clone()), &rho, 0.1).unwrap();
        for &v in a.values() {
            assert!((v - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn obstacle_cells_get_zero_scaling() {
        let g = grid(16);
        let v = Field::from_fn(g, |m| if m[0] >= 4 && m[0] < 8 { f64::INFINITY } else { 0.0 });
        let c = Field::constant(g, 1.3f64);
        let a = prox_update(&CostSpec::Potential(v.clone()), &c, 0.25).unwrap();
        for (i, &av) in a.values().iter().enumerate() {
            if (4..8).contains(&i) {
                assert_eq!(av, 0.0);
            } else {
                assert_eq!(av, 1.0); // exp(-w * 0)
            }
        }
        let u = prox_update_log(&CostSpec::Potential(v), &c.ln(), 0.25).unwrap();
        for (i, &uv) in u.values().iter().enumerate() {
            if (4..8).contains(&i) {
                assert_eq!(uv, f64::NEG_INFINITY);
            }
        }
    }

    #[test]
    fn fixed_marginal_infeasible_when_message_vanishes() {
        let g = grid(8);
        let rho = Field::constant(g, 1.0f64);
        let mut c = Field::constant(g, 1.0f64);
        c.values_mut()[3] = 0.0;
        let err = prox_update(&CostSpec::FixedMarginal(rho), &c, 0.1).unwrap_err();
        assert!(matches!(err, CoreError::Infeasible(_)));
    }

    #[test]
    fn nonlocal_direct_prox_is_rejected() {
        let g = grid(8);
        let spec = NonlocalSpec {
            kernel: Field::zeros(g),
            symmetric: true,
            cap: None,
        };
        let c = Field::constant(g, 1.0f64);
        assert!(matches!(
            prox_update(&CostSpec::Nonlocal(spec), &c, 0.1),
            Err(CoreError::NonConvexDirect)
        ));
    }

    #[test]
    fn congestion_scaling_equivariance() {
        let g = grid(8);
        let c = Field::from_fn(g, |m| 0.4 + 0.3 * m[0] as f64);
        for s in [0.5f64, 2.0] {
            let scaled = prox_update(&CostSpec::Congestion(1.0), &c.map(|v| s * v), 0.1).unwrap();
            let direct = c.map(|v| (1.0 / (s * v)).min(1.0));
            for (a, b) in scaled.values().iter().zip(direct.values()) {
                assert!((a - b).abs() <= 1e-14 * b.abs());
            }
        }
    }

    #[test]
    fn congestion_never_exceeds_one() {
        let g = grid(32);
        let c = Field::from_fn(g, |m| 1e-6 + (m[0] as f64).exp().min(1e12));
        let a = prox_update(&CostSpec::Congestion(2.5), &c, 0.1).unwrap();
        for &v in a.values() {
            assert!(v <= 1.0);
        }
    }

    #[test]
    fn linear_and_log_prox_agree() {
        let g = grid(16);
        let c = Field::from_fn(g, |m| 0.2 + 0.15 * m[0] as f64);
        let rho = Field::from_fn(g, |m| 1.0 + (m[0] as f64 * 0.3).cos())
            .normalize_to_probability()
            .unwrap();
        let v = Field::from_fn(g, |m| (m[0] as f64 * 0.2).sin());
        let specs: Vec<CostSpec<f64>> = vec![
            CostSpec::Free,
            CostSpec::FixedMarginal(rho),
            CostSpec::Congestion(0.8),
            CostSpec::Potential(v.clone()),
            CostSpec::CongestionPlusPotential(0.8, v),
        ];
        for spec in &specs {
            let lin = prox_update(spec, &c, 0.2).unwrap();
            let log = prox_update_log(spec, &c.ln(), 0.2).unwrap();
            for (a, u) in lin.values().iter().zip(log.values()) {
                assert!(
                    (a - u.exp()).abs() <= 1e-12 * a.abs().max(1e-300),
                    "{spec:?}: {a} vs {}",
                    u.exp()
                );
            }
        }
    }

    #[test]
    fn zero_interaction_kernel_gives_zero_potential() {
        let g = GridSpec::torus(2, 8).unwrap();
        let rho = Field::constant(g, 1.0f64);
        let spec = NonlocalSpec {
            kernel: Field::zeros(g),
            symmetric: true,
            cap: None,
        };
        match linearize_nonlocal(&spec, &rho).unwrap() {
            CostSpec::Potential(f2) => assert!(f2.values().iter().all(|&v| v == 0.0)),
            other => panic!("expected potential, got {other:?}"),
        }
    }

    #[test]
    fn delta_kernel_uniform_density_gives_constant_potential() {
        let g = GridSpec::torus(2, 8).unwrap();
        let mut kernel = Field::zeros(g);
        kernel.values_mut()[0] = 3.0; // weight at displacement 0
        let rho = Field::constant(g, 2.0f64);
        let spec = NonlocalSpec {
            kernel,
            symmetric: true,
            cap: Some(5.0),
        };
        match linearize_nonlocal(&spec, &rho).unwrap() {
            CostSpec::CongestionPlusPotential(cap, f2) => {
                assert_eq!(cap, 5.0);
                let expected = -3.0 * 2.0 * g.cell_volume();
                for &v in f2.values() {
                    assert!((v - expected).abs() < 1e-14);
                }
            }
            other => panic!("expected congestion+potential, got {other:?}"),
        }
    }

    #[test]
    fn nonlocal_potential_matches_double_loop_oracle() {
        let g = GridSpec::torus(2, 8).unwrap();
        let mut s = 77u64;
        let mut draw = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        };
        let kernel = Field::from_fn(g, |_| draw());
        let rho = Field::from_fn(g, |_| draw());
        let f2 = nonlocal_potential(&kernel, &rho).unwrap();
        // brute-force double sum over x and y with min-image displacement index
        let m = 8usize;
        for xi in 0..m {
            for xj in 0..m {
                let mut acc = 0.0;
                for yi in 0..m {
                    for yj in 0..m {
                        let zi = (xi + m - yi) % m;
                        let zj = (xj + m - yj) % m;
                        acc += kernel.values()[zi * m + zj] * rho.values()[yi * m + yj];
                    }
                }
                let expected = -acc * g.cell_volume();
                let got = f2.values()[xi * m + xj];
                assert!(
                    (got - expected).abs() <= 1e-12 * expected.abs().max(1.0),
                    "({xi},{xj}): {got} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn prox_maximizes_restricted_dual_spot_checks() {
        // randomized single-cell scans for each closed form
        let g = grid(2);
        let mut s = 12345u64;
        let mut draw = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..25 {
            let c = 10f64.powf(draw() * 4.0 - 2.0);
            let cap = 0.2 + 2.0 * draw();
            let rho = 10f64.powf(draw() * 2.0 - 1.0);
            let v = 4.0 * draw() - 2.0;
            let w = 0.05 + draw();
            let cf = Field::constant(g, c);

            let a = prox_update(&CostSpec::Congestion(cap), &cf, w).unwrap().values()[0];
            let phi = |u: f64| -cap * (-u).max(0.0) - c * u.exp();
            assert!(phi(a.ln()) >= scan_best(phi) - 1e-9);

            let target = Field::constant(g, rho);
            let a = prox_update(&CostSpec::FixedMarginal(target), &cf, w).unwrap().values()[0];
            let phi = |u: f64| u * rho - c * u.exp();
            assert!(phi(a.ln()) >= scan_best(phi) - 1e-9);

            let vf = Field::constant(g, v);
            let a = prox_update(&CostSpec::Potential(vf.clone()), &cf, w).unwrap().values()[0];
            let phi = |u: f64| if u >= -w * v - 1e-12 { -c * u.exp() } else { f64::NEG_INFINITY };
            assert!(phi(a.ln()) >= scan_best(phi) - 1e-9);

            let a = prox_update(&CostSpec::CongestionPlusPotential(cap, vf), &cf, w)
                .unwrap()
                .values()[0];
            let phi = |u: f64| -cap * (-u - w * v).max(0.0) - c * u.exp();
            assert!(phi(a.ln()) >= scan_best(phi) - 1e-9);
        }
    }

    #[test]
    fn schedule_requires_fixed_index_zero() {
        let g = grid(8);
        let err = CostSchedule::new(vec![CostSpec::<f64>::Free, CostSpec::Free]).unwrap_err();
        assert!(matches!(err, CoreError::InvalidSchedule(_)));
        let rho = Field::constant(g, 1.0f64);
        let ok = CostSchedule::new(vec![CostSpec::FixedMarginal(rho), CostSpec::Free]);
        assert!(ok.is_ok());
    }
}
