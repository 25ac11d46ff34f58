//! Discrete heat kernel `P_{eps*tau}` factorized into one-dimensional
//! kernels, one per dimension, applied as a sequence of 1-D convolutions.
//!
//! Periodic kernels sum Gaussian images until the added term falls below
//! 1e-18 relative, then each column is normalized so that
//! `spacing * column_sum = 1`. The discrete kernel is therefore exactly
//! mass-preserving, unlike the truncated continuous one.

use crate::error::CoreError;
use crate::grid::{Boundary, Field, GridSpec};
use crate::scalar::{cast, Scalar};

/// Relative cutoff for the periodic image summation.
const IMAGE_CUTOFF: f64 = 1e-18;

/// Below this smallest entry, linear-domain application is considered unsafe
/// and auto mode switches to log-domain convolutions.
pub const LINEAR_SAFE_MIN_ENTRY: f64 = 1e-300;

/// The transition kernel of one time step, stored as `d` one-dimensional
/// `m x m` matrices (identical on an isotropic grid, kept per dimension).
#[derive(Debug, Clone)]
pub struct SeparableKernel<S: Scalar> {
    grid: GridSpec,
    tau: f64,
    epsilon: f64,
    /// Row-major m*m density matrices; `spacing * column_sum == 1`.
    matrices: Vec<Vec<S>>,
    min_entry: f64,
}

impl<S: Scalar> SeparableKernel<S> {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// The 1-D kernel matrix of `dim`, row-major `m x m`.
    pub fn matrix(&self, dim: usize) -> &[S] {
        &self.matrices[dim]
    }

    /// Smallest entry across all 1-D matrices (in f64, before casting).
    pub fn min_entry(&self) -> f64 {
        self.min_entry
    }

    /// Entry of the assembled d-dimensional kernel between two flat cells,
    /// the product of the per-dimension 1-D entries. Test-scale helper.
    pub fn dense_entry(&self, to: usize, from: usize) -> S {
        let m = self.grid.points_per_dim;
        let mi = self.grid.multi_index(to);
        let mj = self.grid.multi_index(from);
        let mut prod = S::one();
        for dim in 0..self.grid.dims {
            prod = prod * self.matrices[dim][mi[dim] * m + mj[dim]];
        }
        prod
    }

    /// Applies the kernel: one 1-D convolution per dimension, in order.
    /// The result equals the full d-dimensional kernel application.
    pub fn apply(&self, f: &Field<S>) -> Result<Field<S>, CoreError> {
        if f.spec() != &self.grid {
            return Err(CoreError::GridMismatch(
                "field grid does not match kernel grid".into(),
            ));
        }
        let mut out = f.clone();
        for dim in 0..self.grid.dims {
            self.apply_dim_linear(&mut out, dim);
        }
        Ok(out)
    }

    /// Applies the kernel to `exp(log_f)` and returns the result in log
    /// domain. Each 1-D slice is shifted by its maximum before
    /// exponentiating, so intermediates stay in range.
    pub fn apply_log(&self, log_f: &Field<S>) -> Result<Field<S>, CoreError> {
        if log_f.spec() != &self.grid {
            return Err(CoreError::GridMismatch(
                "field grid does not match kernel grid".into(),
            ));
        }
        let mut out = log_f.clone();
        for dim in 0..self.grid.dims {
            self.apply_dim_log(&mut out, dim);
        }
        Ok(out)
    }

    fn apply_dim_linear(&self, f: &mut Field<S>, dim: usize) {
        let m = self.grid.points_per_dim;
        let stride = self.grid.stride(dim);
        let h = cast::<S>(self.grid.spacing());
        let mat = &self.matrices[dim];
        let mut line = vec![S::zero(); m];
        let mut result = vec![S::zero(); m];
        for_each_line(self.grid.total_cells(), m, stride, |base| {
            let vals = f.values_mut();
            for (t, slot) in line.iter_mut().enumerate() {
                *slot = vals[base + t * stride];
            }
            for (i, slot) in result.iter_mut().enumerate() {
                let row = &mat[i * m..(i + 1) * m];
                let mut acc = S::zero();
                for (p, v) in row.iter().zip(&line) {
                    acc = acc + *p * *v;
                }
                *slot = acc * h;
            }
            for (t, &v) in result.iter().enumerate() {
                vals[base + t * stride] = v;
            }
        });
    }

    fn apply_dim_log(&self, f: &mut Field<S>, dim: usize) {
        let m = self.grid.points_per_dim;
        let stride = self.grid.stride(dim);
        let h = cast::<S>(self.grid.spacing());
        let mat = &self.matrices[dim];
        let mut line = vec![S::zero(); m];
        let mut result = vec![S::zero(); m];
        for_each_line(self.grid.total_cells(), m, stride, |base| {
            let vals = f.values_mut();
            let mut shift = S::neg_infinity();
            for (t, slot) in line.iter_mut().enumerate() {
                let v = vals[base + t * stride];
                *slot = v;
                shift = shift.max(v);
            }
            if shift == S::neg_infinity() {
                return; // whole slice is an exact zero
            }
            for slot in line.iter_mut() {
                *slot = (*slot - shift).exp();
            }
            for (i, slot) in result.iter_mut().enumerate() {
                let row = &mat[i * m..(i + 1) * m];
                let mut acc = S::zero();
                for (p, v) in row.iter().zip(&line) {
                    acc = acc + *p * *v;
                }
                *slot = (acc * h).ln() + shift;
            }
            for (t, &v) in result.iter().enumerate() {
                vals[base + t * stride] = v;
            }
        });
    }
}

/// Visits the base offset of every 1-D line along a dimension with the given
/// stride, in a fixed deterministic order.
fn for_each_line(total: usize, m: usize, stride: usize, mut visit: impl FnMut(usize)) {
    let block = m * stride;
    let outer = total / block;
    for o in 0..outer {
        for inner in 0..stride {
            visit(o * block + inner);
        }
    }
}

/// Builds the one-step heat kernel of variance `epsilon * tau` on the grid.
///
/// Periodic grids sum Gaussian images with a 1e-18 relative cutoff, so the
/// kernel is correct at large `eps*tau` as well. Errors with
/// `DegenerateKernel` when every off-diagonal entry underflows in f64.
pub fn build_heat_kernel<S: Scalar>(
    grid: &GridSpec,
    tau: f64,
    epsilon: f64,
) -> Result<SeparableKernel<S>, CoreError> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(CoreError::InvalidDiscretization(format!(
            "tau must be positive, got {tau}"
        )));
    }
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(CoreError::InvalidDiscretization(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let variance = epsilon * tau;
    let mat64 = match grid.boundary {
        Boundary::Periodic => periodic_matrix(grid, variance),
        Boundary::Truncated => truncated_matrix(grid, variance),
    };
    let m = grid.points_per_dim;
    let mut min_entry = f64::INFINITY;
    let mut max_offdiag = 0.0f64;
    for i in 0..m {
        for j in 0..m {
            let v = mat64[i * m + j];
            min_entry = min_entry.min(v);
            if i != j {
                max_offdiag = max_offdiag.max(v);
            }
        }
    }
    if max_offdiag == 0.0 {
        return Err(CoreError::DegenerateKernel { eps_tau: variance });
    }
    let cast_mat: Vec<S> = mat64.iter().map(|&v| cast::<S>(v)).collect();
    let matrices = vec![cast_mat; grid.dims];
    Ok(SeparableKernel {
        grid: *grid,
        tau,
        epsilon,
        matrices,
        min_entry,
    })
}

/// Circulant 1-D kernel on the torus: profile over cell separations built by
/// image summation, mirrored so `prof[r] == prof[m - r]` bitwise, then
/// normalized by the (shared) column sum.
fn periodic_matrix(grid: &GridSpec, variance: f64) -> Vec<f64> {
    let m = grid.points_per_dim;
    let h = grid.spacing();
    let l = grid.side_length;
    let q = 1.0 / (2.0 * variance);
    let mut prof = vec![0.0f64; m];
    for r in 0..=m / 2 {
        let delta = r as f64 * h;
        let mut sum = image_series(delta, l, q);
        sum += image_series(l - delta, l, q);
        prof[r] = sum;
        if r > 0 && r < m {
            prof[m - r] = sum;
        }
    }
    let col_sum: f64 = prof.iter().sum();
    let norm = 1.0 / (h * col_sum);
    let mut mat = vec![0.0f64; m * m];
    for i in 0..m {
        for j in 0..m {
            let r = if i >= j { i - j } else { j - i };
            mat[i * m + j] = prof[r] * norm;
        }
    }
    mat
}

/// Sum of `exp(-q * (delta + w*L)^2)` over `w = 0, 1, 2, ...` with a relative
/// cutoff. One series per image direction.
fn image_series(delta: f64, l: f64, q: f64) -> f64 {
    let mut sum = 0.0;
    let mut w = 0usize;
    loop {
        let dist = delta + w as f64 * l;
        let term = (-q * dist * dist).exp();
        sum += term;
        if (term <= IMAGE_CUTOFF * sum && w > 0) || term == 0.0 || w > 100_000 {
            break;
        }
        w += 1;
    }
    sum
}

/// Truncated-box 1-D kernel: plain Gaussian restricted to the box, each
/// column renormalized (escaping mass is reflected back by the truncation).
fn truncated_matrix(grid: &GridSpec, variance: f64) -> Vec<f64> {
    let m = grid.points_per_dim;
    let h = grid.spacing();
    let q = 1.0 / (2.0 * variance);
    let mut mat = vec![0.0f64; m * m];
    for j in 0..m {
        let mut col_sum = 0.0;
        for i in 0..m {
            let delta = (i as f64 - j as f64) * h;
            let v = (-q * delta * delta).exp();
            mat[i * m + j] = v;
            col_sum += v;
        }
        let norm = 1.0 / (h * col_sum);
        for i in 0..m {
            mat[i * m + j] *= norm;
        }
    }
    mat
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn smooth_field(grid: GridSpec, seed: u64) -> Field<f64> {
        let mut s = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(11);
        Field::from_fn(grid, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            0.1 + (s >> 11) as f64 / (1u64 << 53) as f64
        })
    }

    #[test]
    fn large_eps_tau_approaches_uniform_columns() {
        let g = GridSpec::torus(1, 32).unwrap();
        let k = build_heat_kernel::<f64>(&g, 1.0, 1e3).unwrap();
        let m = 32;
        // uniform limit: every density entry is 1/L = 1
        for &v in k.matrix(0).iter().take(m * m) {
            assert!((v - 1.0).abs() < 1e-10, "entry {v} deviates from uniform");
        }
    }

    #[test]
    fn kernel_matrix_is_exactly_symmetric() {
        let g = GridSpec::torus(1, 17).unwrap();
        let k = build_heat_kernel::<f64>(&g, 0.05, 0.7).unwrap();
        let m = 17;
        let mat = k.matrix(0);
        for i in 0..m {
            for j in 0..m {
                assert_eq!(mat[i * m + j], mat[j * m + i]);
            }
        }
    }

    #[test]
    fn planning_regime_columns_strictly_positive() {
        // eps = 1, T = 1, 31 steps on m = 64
        let g = GridSpec::torus(2, 64).unwrap();
        let k = build_heat_kernel::<f64>(&g, 1.0 / 31.0, 1.0).unwrap();
        assert!(k.min_entry() > 0.0);
        for &v in k.matrix(0) {
            assert!(v > 0.0);
        }
    }

    #[test]
    fn columns_normalized_to_unit_mass() {
        for boundary in [Boundary::Periodic, Boundary::Truncated] {
            let g = GridSpec::new(1, 24, 1.5, boundary).unwrap();
            let k = build_heat_kernel::<f64>(&g, 0.1, 0.3).unwrap();
            let m = 24;
            let h = g.spacing();
            for j in 0..m {
                let col: f64 = (0..m).map(|i| k.matrix(0)[i * m + j]).sum();
                assert!((h * col - 1.0).abs() < 1e-12, "column {j} sums to {}", h * col);
            }
        }
    }

    #[test]
    fn delta_maps_to_kernel_column() {
        let g = GridSpec::torus(1, 16).unwrap();
        let k = build_heat_kernel::<f64>(&g, 0.1, 0.5).unwrap();
        let j = 5;
        let mut delta = Field::zeros(g);
        delta.values_mut()[j] = 1.0 / g.spacing(); // unit-mass delta
        let out = k.apply(&delta).unwrap();
        for i in 0..16 {
            let expect = k.matrix(0)[i * 16 + j];
            assert!((out.values()[i] - expect).abs() <= 1e-13 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn uniform_is_invariant_periodic() {
        let g = GridSpec::torus(2, 16).unwrap();
        let k = build_heat_kernel::<f64>(&g, 0.2, 0.8).unwrap();
        let f = Field::constant(g, 3.0f64);
        let out = k.apply(&f).unwrap();
        for &v in out.values() {
            assert!((v - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn separable_application_matches_dense_tensor_product() {
        let g = GridSpec::torus(2, 8).unwrap();
        let k = build_heat_kernel::<f64>(&g, 0.15, 0.4).unwrap();
        let f = smooth_field(g, 3);
        let out = k.apply(&f).unwrap();
        // dense M x M kernel application oracle
        let total = g.total_cells();
        let vol = g.cell_volume();
        for i in 0..total {
            let mut acc = 0.0;
            for j in 0..total {
                acc += k.dense_entry(i, j) * f.values()[j];
            }
            acc *= vol;
            assert!(
                (out.values()[i] - acc).abs() <= 1e-12 * acc.abs(),
                "cell {i}: separable {} vs dense {acc}",
                out.values()[i]
            );
        }
    }

    #[test]
    fn log_application_matches_linear_where_representable() {
        let g = GridSpec::torus(1, 16).unwrap();
        let k = build_heat_kernel::<f64>(&g, 0.1, 0.5).unwrap();
        let j = 7;
        let mut delta = Field::zeros(g);
        delta.values_mut()[j] = 1.0;
        let linear = k.apply(&delta).unwrap();
        let log_in = delta.map(|v| if v > 0.0 { v.ln() } else { f64::NEG_INFINITY });
        let log_out = k.apply_log(&log_in).unwrap();
        for i in 0..16 {
            let a = linear.values()[i];
            let b = log_out.values()[i].exp();
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-30));
        }
    }

    #[test]
    fn log_application_of_constant_is_constant() {
        let g = GridSpec::torus(2, 8).unwrap();
        let k = build_heat_kernel::<f64>(&g, 0.1, 0.5).unwrap();
        let c = -2.3f64;
        let out = k.apply_log(&Field::constant(g, c)).unwrap();
        for &v in out.values() {
            assert!((v - c).abs() < 1e-12);
        }
    }

    #[test]
    fn low_viscosity_log_mode_stays_finite() {
        // eps = 1e-3 regime on m = 64, 41 steps: no NaN, not all-zero
        let g = GridSpec::torus(2, 64).unwrap();
        let k = build_heat_kernel::<f64>(&g, 1.0 / 41.0, 1e-3).unwrap();
        assert!(k.min_entry() < LINEAR_SAFE_MIN_ENTRY);
        let bump = Field::from_fn(g, |mi| {
            let x = g.coordinate(mi[0]) - 0.5;
            let y = g.coordinate(mi[1]) - 0.5;
            -(x * x + y * y) / 0.01
        });
        let mut out = bump;
        for _ in 0..3 {
            out = k.apply_log(&out).unwrap();
        }
        assert!(out.values().iter().all(|v| !v.is_nan()));
        assert!(out.values().iter().any(|v| v.is_finite()));
    }

    #[test]
    fn degenerate_kernel_is_rejected() {
        let g = GridSpec::torus(1, 64).unwrap();
        // h^2 / (2 eps tau) ~ 1.2e5: every off-diagonal entry underflows
        let err = build_heat_kernel::<f64>(&g, 1e-9, 1.0).unwrap_err();
        assert!(matches!(err, CoreError::DegenerateKernel { .. }));
    }

    #[test]
    fn two_half_steps_match_one_full_step() {
        // recorded regression bound: max relative cell error <= 1e-3
        let g = GridSpec::torus(2, 64).unwrap();
        let eps = 1.0;
        let tau = 1e-2;
        let k1 = build_heat_kernel::<f64>(&g, tau, eps).unwrap();
        let k2 = build_heat_kernel::<f64>(&g, 2.0 * tau, eps).unwrap();
        let f = smooth_field(g, 9).normalize_to_probability().unwrap();
        let twice = k1.apply(&k1.apply(&f).unwrap()).unwrap();
        let once = k2.apply(&f).unwrap();
        let mut max_rel = 0.0f64;
        for (a, b) in twice.values().iter().zip(once.values()) {
            max_rel = max_rel.max((a - b).abs() / b);
        }
        assert!(max_rel <= 1e-3, "semigroup defect {max_rel}");
    }

    #[test]
    fn kernel_is_self_adjoint_periodic() {
        let g = GridSpec::torus(2, 12).unwrap();
        let k = build_heat_kernel::<f64>(&g, 0.07, 0.9).unwrap();
        let f = smooth_field(g, 21);
        let h = smooth_field(g, 22);
        let dot = |a: &Field<f64>, b: &Field<f64>| -> f64 {
            a.hadamard(b).unwrap().integrate()
        };
        let lhs = dot(&k.apply(&f).unwrap(), &h);
        let rhs = dot(&f, &k.apply(&h).unwrap());
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs());
    }

    #[test]
    fn dimension_order_does_not_matter() {
        let g = GridSpec::torus(2, 16).unwrap();
        let k = build_heat_kernel::<f64>(&g, 0.05, 0.6).unwrap();
        let f = smooth_field(g, 5);
        let mut fwd = f.clone();
        k.apply_dim_linear(&mut fwd, 0);
        k.apply_dim_linear(&mut fwd, 1);
        let mut rev = f;
        k.apply_dim_linear(&mut rev, 1);
        k.apply_dim_linear(&mut rev, 0);
        for (a, b) in fwd.values().iter().zip(rev.values()) {
            assert!((a - b).abs() <= 1e-13 * a.abs());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn mass_is_conserved(seed in 0u64..500, exp in -3.0f64..0.8) {
            let g = GridSpec::torus(2, 16).unwrap();
            let k = build_heat_kernel::<f64>(&g, 10f64.powf(exp), 1.0).unwrap();
            let f = smooth_field(g, seed);
            let before = f.integrate();
            let after = k.apply(&f).unwrap().integrate();
            prop_assert!((after - before).abs() <= 1e-12 * before);
        }
    }
}
