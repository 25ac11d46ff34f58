//! Spatial discretization of the d-dimensional torus (or truncated box) and
//! the arithmetic of density/potential fields living on it.
//!
//! Layout convention: fields are stored row-major with the **last dimension
//! fastest**, fixed so that frame files are bit-reproducible across runs.
//! Cell `i` along a dimension is centered at `(i + 0.5) * spacing`.

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::scalar::{cast, Scalar};

/// Boundary handling for the spatial domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Index arithmetic wraps modulo m in every dimension (flat torus).
    Periodic,
    /// Truncated box: the heat kernel is restricted to the box and
    /// renormalized, which reflects escaping mass back.
    Truncated,
}

/// The spatial discretization: `m` points per dimension on a box of side `L`,
/// `M = m^d` cells in total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: usize,
    pub points_per_dim: usize,
    pub side_length: f64,
    pub boundary: Boundary,
}

impl GridSpec {
    pub fn new(
        dims: usize,
        points_per_dim: usize,
        side_length: f64,
        boundary: Boundary,
    ) -> Result<Self, CoreError> {
        if dims == 0 || dims > 3 {
            return Err(CoreError::InvalidDiscretization(format!(
                "dims must be 1..=3, got {dims}"
            )));
        }
        if points_per_dim < 2 {
            return Err(CoreError::InvalidDiscretization(format!(
                "points_per_dim must be >= 2, got {points_per_dim}"
            )));
        }
        if !(side_length > 0.0) || !side_length.is_finite() {
            return Err(CoreError::InvalidDiscretization(format!(
                "side_length must be positive and finite, got {side_length}"
            )));
        }
        Ok(Self {
            dims,
            points_per_dim,
            side_length,
            boundary,
        })
    }

    /// Unit-side periodic torus, the default domain.
    pub fn torus(dims: usize, points_per_dim: usize) -> Result<Self, CoreError> {
        Self::new(dims, points_per_dim, 1.0, Boundary::Periodic)
    }

    /// Total number of cells `M = m^d`.
    pub fn total_cells(&self) -> usize {
        self.points_per_dim.pow(self.dims as u32)
    }

    /// Cell width `L / m` (identical in every dimension).
    pub fn spacing(&self) -> f64 {
        self.side_length / self.points_per_dim as f64
    }

    /// Cell volume `(L/m)^d`.
    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dims as i32)
    }

    /// Stride of dimension `dim` in the flat layout (last dimension fastest).
    pub fn stride(&self, dim: usize) -> usize {
        self.points_per_dim.pow((self.dims - 1 - dim) as u32)
    }

    /// Flat index of a multi-index (no wrapping applied).
    pub fn flat_index(&self, multi: &[usize]) -> usize {
        debug_assert_eq!(multi.len(), self.dims);
        let m = self.points_per_dim;
        multi.iter().fold(0, |acc, &c| {
            debug_assert!(c < m);
            acc * m + c
        })
    }

    /// Multi-index of a flat index.
    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let m = self.points_per_dim;
        let mut multi = vec![0usize; self.dims];
        for dim in (0..self.dims).rev() {
            multi[dim] = flat % m;
            flat /= m;
        }
        multi
    }

    /// Coordinate of the center of cell `i` along one dimension.
    pub fn coordinate(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.spacing()
    }

    /// Signed displacement between cell centers under the boundary rule:
    /// minimum-image on the torus, plain difference on the box.
    pub fn displacement(&self, from: usize, to: usize) -> f64 {
        let d = self.coordinate(to) - self.coordinate(from);
        match self.boundary {
            Boundary::Periodic => {
                let l = self.side_length;
                let mut w = d - (d / l).round() * l;
                if w <= -l / 2.0 {
                    w += l;
                }
                w
            }
            Boundary::Truncated => d,
        }
    }
}

/// The time axis: horizon `T` split into `N` steps; marginals are indexed
/// `k = 0..=N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeAxis {
    pub horizon: f64,
    pub steps: usize,
}

impl TimeAxis {
    pub fn new(horizon: f64, steps: usize) -> Result<Self, CoreError> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(CoreError::InvalidDiscretization(format!(
                "horizon must be positive and finite, got {horizon}"
            )));
        }
        if steps == 0 {
            return Err(CoreError::InvalidDiscretization(
                "time steps must be >= 1".into(),
            ));
        }
        Ok(Self { horizon, steps })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Time of marginal index `k`.
    pub fn time_at(&self, k: usize) -> f64 {
        self.horizon * k as f64 / self.steps as f64
    }
}

/// A scalar field on a grid: densities are nonnegative, potentials may be
/// signed or carry `+inf` as the obstacle flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Field<S: Scalar> {
    spec: GridSpec,
    values: Vec<S>,
}

impl<S: Scalar> Field<S> {
    pub fn new(spec: GridSpec, values: Vec<S>) -> Result<Self, CoreError> {
        if values.len() != spec.total_cells() {
            return Err(CoreError::GridMismatch(format!(
                "expected {} values, got {}",
                spec.total_cells(),
                values.len()
            )));
        }
        Ok(Self { spec, values })
    }

    pub fn constant(spec: GridSpec, value: S) -> Self {
        Self {
            values: vec![value; spec.total_cells()],
            spec,
        }
    }

    pub fn zeros(spec: GridSpec) -> Self {
        Self::constant(spec, S::zero())
    }

    /// Builds a field from a function of the multi-index.
    pub fn from_fn(spec: GridSpec, mut f: impl FnMut(&[usize]) -> S) -> Self {
        let mut values = Vec::with_capacity(spec.total_cells());
        let mut multi = vec![0usize; spec.dims];
        for flat in 0..spec.total_cells() {
            let mut rem = flat;
            for dim in (0..spec.dims).rev() {
                multi[dim] = rem % spec.points_per_dim;
                rem /= spec.points_per_dim;
            }
            values.push(f(&multi));
        }
        Self { spec, values }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `cell_volume * sum(values)`, the integral of the field over the domain.
    pub fn integrate(&self) -> S {
        let sum: S = self.values.iter().copied().sum();
        cast::<S>(self.spec.cell_volume()) * sum
    }

    /// Rescales so the field integrates to 1. Errors on zero or non-finite mass.
    pub fn normalize_to_probability(&self) -> Result<Self, CoreError> {
        let mass = self.integrate();
        if !(mass > S::zero()) || !mass.is_finite() {
            return Err(CoreError::ZeroMass);
        }
        Ok(self.map(|v| v / mass))
    }

    /// Pointwise product with another field on the same grid.
    pub fn hadamard(&self, other: &Self) -> Result<Self, CoreError> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            spec: self.spec,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self, CoreError> {
        if self.spec != other.spec {
            return Err(CoreError::GridMismatch(
                "fields live on different grids".into(),
            ));
        }
        Ok(Self {
            spec: self.spec,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Natural logarithm per cell; zeros map to `-inf`.
    pub fn ln(&self) -> Self {
        self.map(|v| v.ln())
    }

    /// Exponential per cell; `-inf` maps to zero.
    pub fn exp(&self) -> Self {
        self.map(|v| v.exp())
    }

    pub fn max_value(&self) -> S {
        self.values
            .iter()
            .copied()
            .fold(S::neg_infinity(), |a, b| a.max(b))
    }

    pub fn min_value(&self) -> S {
        self.values
            .iter()
            .copied()
            .fold(S::infinity(), |a, b| a.min(b))
    }

    /// `cell_volume * sum(|a - b|)`, the L1 distance between two fields.
    pub fn l1_distance(&self, other: &Self) -> Result<S, CoreError> {
        if self.spec != other.spec {
            return Err(CoreError::GridMismatch(
                "fields live on different grids".into(),
            ));
        }
        let sum: S = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| (a - b).abs())
            .sum();
        Ok(cast::<S>(self.spec.cell_volume()) * sum)
    }

    /// Maximum absolute cell difference, with `-inf` vs `-inf` counting as 0
    /// (both represent an exact zero scaling).
    pub fn max_abs_diff(&self, other: &Self) -> S {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| {
                if a == b {
                    S::zero()
                } else {
                    (a - b).abs()
                }
            })
            .fold(S::zero(), |acc, d| acc.max(d))
    }

    /// Cyclic shift by `offset` cells along `dim` (periodic index arithmetic).
    pub fn shift_cells(&self, dim: usize, offset: isize) -> Self {
        let m = self.spec.points_per_dim as isize;
        let stride = self.spec.stride(dim) as isize;
        let mut out = self.values.clone();
        let total = self.values.len() as isize;
        for flat in 0..total {
            let coord = (flat / stride).rem_euclid(m);
            let src = coord.rem_euclid(m);
            let dst = (coord + offset).rem_euclid(m);
            let target = flat + (dst - src) * stride;
            out[target as usize] = self.values[flat as usize];
        }
        Self {
            spec: self.spec,
            values: out,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid_1d(m: usize) -> GridSpec {
        GridSpec::torus(1, m).unwrap()
    }

    #[test]
    fn integrate_uniform_unit_torus_is_one() {
        let g = GridSpec::torus(2, 16).unwrap();
        let f = Field::constant(g, 1.0f64);
        assert!((f.integrate() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn integrate_zero_field_is_zero() {
        let g = grid_1d(32);
        assert_eq!(Field::<f64>::zeros(g).integrate(), 0.0);
    }

    #[test]
    fn integrate_matches_compensated_summation_oracle() {
        // Independent Kahan-compensated summation in the test.
        let g = GridSpec::torus(2, 32).unwrap();
        let mut state = 0x9e3779b97f4a7c15u64;
        let f = Field::from_fn(g, |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        });
        let mut sum = 0.0f64;
        let mut comp = 0.0f64;
        for &v in f.values() {
            let y = v - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        let oracle = g.cell_volume() * sum;
        let got = f.integrate();
        assert!(
            (got - oracle).abs() <= 1e-14 * oracle.abs(),
            "got {got}, oracle {oracle}"
        );
    }

    #[test]
    fn normalize_constant_field() {
        let g = GridSpec::new(2, 8, 2.0, Boundary::Periodic).unwrap();
        let f = Field::constant(g, 5.0f64);
        let p = f.normalize_to_probability().unwrap();
        let expected = 1.0 / (g.side_length * g.side_length);
        for &v in p.values() {
            assert!((v - expected).abs() < 1e-15);
        }
        assert!((p.integrate() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_is_idempotent() {
        let g = grid_1d(64);
        let f = Field::from_fn(g, |m| 1.0 + (m[0] as f64 * 0.37).sin().powi(2));
        let once = f.normalize_to_probability().unwrap();
        let twice = once.normalize_to_probability().unwrap();
        for (a, b) in once.values().iter().zip(twice.values()) {
            assert!((a - b).abs() <= 1e-15 * a.abs());
        }
    }

    #[test]
    fn normalize_preserves_two_bump_mass_ratio() {
        let g = grid_1d(64);
        let f = Field::from_fn(g, |m| {
            let x = g.coordinate(m[0]);
            let b1 = (-(x - 0.25f64).powi(2) / 0.002).exp();
            let b2 = 3.0 * (-(x - 0.75f64).powi(2) / 0.002).exp();
            b1 + b2
        });
        let half = g.total_cells() / 2;
        let mass = |f: &Field<f64>, lo: usize, hi: usize| -> f64 {
            f.values()[lo..hi].iter().sum::<f64>()
        };
        let ratio_before = mass(&f, 0, half) / mass(&f, half, g.total_cells());
        let p = f.normalize_to_probability().unwrap();
        let ratio_after = mass(&p, 0, half) / mass(&p, half, g.total_cells());
        assert!((ratio_before - ratio_after).abs() <= 1e-12 * ratio_before.abs());
    }

    #[test]
    fn normalize_zero_mass_errors() {
        let g = grid_1d(8);
        assert!(matches!(
            Field::<f64>::zeros(g).normalize_to_probability(),
            Err(CoreError::ZeroMass)
        ));
    }

    #[test]
    fn hadamard_identity_zero_commute() {
        let g = grid_1d(16);
        let a = Field::from_fn(g, |m| m[0] as f64 + 1.0);
        let ones = Field::constant(g, 1.0f64);
        let zeros = Field::zeros(g);
        assert_eq!(a.hadamard(&ones).unwrap().values(), a.values());
        assert_eq!(a.hadamard(&zeros).unwrap().values(), zeros.values());
        let b = Field::from_fn(g, |m| (m[0] as f64 * 0.1).cos());
        assert_eq!(
            a.hadamard(&b).unwrap().values(),
            b.hadamard(&a).unwrap().values()
        );
    }

    #[test]
    fn hadamard_grid_mismatch_errors() {
        let a = Field::<f64>::zeros(grid_1d(8));
        let b = Field::<f64>::zeros(grid_1d(16));
        assert!(matches!(a.hadamard(&b), Err(CoreError::GridMismatch(_))));
    }

    #[test]
    fn shift_by_full_period_is_identity() {
        let g = GridSpec::torus(2, 8).unwrap();
        let f = Field::from_fn(g, |m| (m[0] * 8 + m[1]) as f64);
        for dim in 0..2 {
            let shifted = f.shift_cells(dim, 8);
            assert_eq!(shifted.values(), f.values());
        }
    }

    #[test]
    fn flat_and_multi_index_roundtrip() {
        let g = GridSpec::torus(3, 4).unwrap();
        for flat in 0..g.total_cells() {
            assert_eq!(g.flat_index(&g.multi_index(flat)), flat);
        }
        // last dimension fastest
        assert_eq!(g.flat_index(&[0, 0, 1]), 1);
        assert_eq!(g.flat_index(&[0, 1, 0]), 4);
        assert_eq!(g.flat_index(&[1, 0, 0]), 16);
    }

    proptest! {
        #[test]
        fn integrate_is_linear(alpha in -5.0f64..5.0, beta in -5.0f64..5.0, seed in 0u64..1000) {
            let g = grid_1d(32);
            let mut s = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
            let mut draw = move || {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64
            };
            let f = Field::from_fn(g, |_| draw());
            let gfield = Field::from_fn(g, |_| draw());
            let combo = f.zip_with(&gfield, |a, b| alpha * a + beta * b).unwrap();
            let lhs = combo.integrate();
            let rhs = alpha * f.integrate() + beta * gfield.integrate();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs().max(rhs.abs())));
        }
    }
}
