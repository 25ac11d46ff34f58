//! Turns a parsed configuration into a solvable scenario: endpoint densities,
//! obstacle potential tracks sampled at the marginal times, rasterized
//! interaction kernels and the per-index cost schedule.

use std::path::Path;

use crate::config::{
    ConfigError, DensitySpec, FrameFormat, NonlocalKernelConfig, ObstacleConfig, ScenarioConfig,
};
use crate::functionals::{CostSchedule, CostSpec, NonlocalSpec};
use crate::grid::{Boundary, Field, GridSpec, TimeAxis};
use crate::output::read_csv_field;
use crate::sinkhorn::SolverConfig;

/// A resolved, solvable scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub grid: GridSpec,
    pub time: TimeAxis,
    pub epsilon: f64,
    pub schedule: CostSchedule<f64>,
    pub solver: SolverConfig,
    pub format: FrameFormat,
    /// The resolved configuration, echoed into the run manifest.
    pub config: ScenarioConfig,
}

/// Distance between a cell center and a point under the boundary rule.
fn distance(grid: &GridSpec, multi: &[usize], point: &[f64]) -> f64 {
    let mut q = 0.0;
    for (dim, &c) in multi.iter().enumerate() {
        let mut d = (grid.coordinate(c) - point[dim]).abs();
        if grid.boundary == Boundary::Periodic {
            d = d.min(grid.side_length - d);
        }
        q += d * d;
    }
    q.sqrt()
}

fn wrap_point(grid: &GridSpec, point: &[f64]) -> Vec<f64> {
    point
        .iter()
        .map(|&x| {
            if grid.boundary == Boundary::Periodic {
                x.rem_euclid(grid.side_length)
            } else {
                x
            }
        })
        .collect()
}

/// Builds a normalized density field from a named shape.
pub fn build_density(
    spec: &DensitySpec,
    grid: &GridSpec,
    base_dir: &Path,
) -> Result<Field<f64>, ConfigError> {
    let field = match spec {
        DensitySpec::Gaussian { center, sigma } => {
            let center = wrap_point(grid, center);
            let two_sigma2 = 2.0 * sigma * sigma;
            Field::from_fn(*grid, |multi| {
                let d = distance(grid, multi, &center);
                (-d * d / two_sigma2).exp()
            })
        }
        DensitySpec::GaussianMixture { components } => {
            // each component is a normalized Gaussian so weights are mass fractions
            let parts: Vec<(Vec<f64>, f64, f64)> = components
                .iter()
                .map(|c| {
                    let norm = (std::f64::consts::TAU.sqrt() * c.sigma).powi(grid.dims as i32);
                    (
                        wrap_point(grid, &c.center),
                        2.0 * c.sigma * c.sigma,
                        c.weight / norm,
                    )
                })
                .collect();
            Field::from_fn(*grid, |multi| {
                parts
                    .iter()
                    .map(|(center, two_sigma2, amp)| {
                        let d = distance(grid, multi, center);
                        amp * (-d * d / two_sigma2).exp()
                    })
                    .sum()
            })
        }
        DensitySpec::Uniform => Field::constant(*grid, 1.0),
        DensitySpec::Indicator { center, radius } => {
            let center = wrap_point(grid, center);
            Field::from_fn(*grid, |multi| {
                if distance(grid, multi, &center) < *radius {
                    1.0
                } else {
                    0.0
                }
            })
        }
        DensitySpec::File { path } => {
            let full = base_dir.join(path);
            read_csv_field(&full, grid)
                .map_err(|e| ConfigError::Validation(format!("density file {path}: {e}")))?
        }
        DensitySpec::Free => {
            return Err(ConfigError::Validation(
                "a free density cannot be rasterized".into(),
            ))
        }
    };
    field
        .normalize_to_probability()
        .map_err(|_| ConfigError::Validation("density shape has zero mass on this grid".into()))
}

/// Obstacle center at time `t`: uniform-speed piecewise-linear interpolation
/// along the waypoints over `[0, T]`.
pub fn obstacle_center(obstacle: &ObstacleConfig, t: f64, horizon: f64) -> Vec<f64> {
    let pts = &obstacle.waypoints;
    if pts.len() == 1 {
        return pts[0].clone();
    }
    let segments = (pts.len() - 1) as f64;
    let s = (t / horizon).clamp(0.0, 1.0) * segments;
    let seg = (s.floor() as usize).min(pts.len() - 2);
    let frac = s - seg as f64;
    pts[seg]
        .iter()
        .zip(&pts[seg + 1])
        .map(|(a, b)| a + (b - a) * frac)
        .collect()
}

/// The obstacle potential at time `t`: `+inf` on cells whose center lies
/// strictly inside any disk, `0` elsewhere (no anti-aliasing, so excluded
/// cells carry exactly zero mass).
pub fn sample_obstacles(
    obstacles: &[ObstacleConfig],
    grid: &GridSpec,
    t: f64,
    horizon: f64,
) -> Field<f64> {
    let centers: Vec<(Vec<f64>, f64)> = obstacles
        .iter()
        .map(|o| (wrap_point(grid, &obstacle_center(o, t, horizon)), o.radius))
        .collect();
    Field::from_fn(*grid, |multi| {
        for (center, radius) in &centers {
            if distance(grid, multi, center) < *radius {
                return f64::INFINITY;
            }
        }
        0.0
    })
}

/// Rasterizes the interaction kernel onto the displacement grid (index `z`
/// is the minimum-image displacement, periodic wrap).
pub fn build_interaction_kernel(
    spec: &NonlocalKernelConfig,
    grid: &GridSpec,
    base_dir: &Path,
) -> Result<Field<f64>, ConfigError> {
    let raw = match spec {
        NonlocalKernelConfig::PolarGaussian {
            sigma_r,
            sigma_theta,
            direction_deg,
            amplitude,
            ..
        } => {
            let theta0 = direction_deg.to_radians();
            let m = grid.points_per_dim as isize;
            let h = grid.spacing();
            Field::from_fn(*grid, |multi| {
                // signed minimum-image displacement of this index
                let z: Vec<f64> = multi
                    .iter()
                    .map(|&c| {
                        let c = c as isize;
                        let signed = if c <= m / 2 { c } else { c - m };
                        signed as f64 * h
                    })
                    .collect();
                let r = (z[0] * z[0] + z[1] * z[1]).sqrt();
                if r == 0.0 {
                    return *amplitude;
                }
                let mut dtheta = z[1].atan2(z[0]) - theta0;
                while dtheta > std::f64::consts::PI {
                    dtheta -= 2.0 * std::f64::consts::PI;
                }
                while dtheta <= -std::f64::consts::PI {
                    dtheta += 2.0 * std::f64::consts::PI;
                }
                amplitude
                    * (-r * r / (2.0 * sigma_r * sigma_r)).exp()
                    * (-dtheta * dtheta / (2.0 * sigma_theta * sigma_theta)).exp()
            })
        }
        NonlocalKernelConfig::File { path, .. } => {
            let full = base_dir.join(path);
            read_csv_field(&full, grid)
                .map_err(|e| ConfigError::Validation(format!("kernel file {path}: {e}")))?
        }
    };
    let symmetric = match spec {
        NonlocalKernelConfig::PolarGaussian { symmetric, .. } => *symmetric,
        NonlocalKernelConfig::File { symmetric, .. } => *symmetric,
    };
    if symmetric {
        Ok(symmetrize(&raw))
    } else {
        Ok(raw)
    }
}

/// `(K(z) + K(-z)) / 2`, which satisfies `K(z) == K(-z)` exactly.
fn symmetrize(kernel: &Field<f64>) -> Field<f64> {
    let grid = *kernel.spec();
    let m = grid.points_per_dim;
    Field::from_fn(grid, |multi| {
        let neg: Vec<usize> = multi.iter().map(|&c| (m - c) % m).collect();
        let a = kernel.values()[grid.flat_index(multi)];
        let b = kernel.values()[grid.flat_index(&neg)];
        (a + b) / 2.0
    })
}

/// Zeroes a fixed endpoint density inside obstacles active at its time and
/// renormalizes; agents cannot start or end inside an excluded region.
fn mask_endpoint(
    density: &Field<f64>,
    potential: &Field<f64>,
    what: &str,
) -> Result<Field<f64>, ConfigError> {
    let masked = density
        .zip_with(potential, |d, v| if v.is_infinite() { 0.0 } else { d })
        .expect("endpoint and potential share the grid");
    if masked == *density {
        return Ok(masked);
    }
    masked.normalize_to_probability().map_err(|_| {
        ConfigError::Validation(format!(
            "{what} density is entirely covered by obstacles at its time"
        ))
    })
}

/// Assembles the cost schedule and solver inputs from a validated config.
///
/// Obstacle tracks are sampled at the marginal times `k T / N`; the endpoint
/// densities are normalized (and masked against obstacles active at their
/// times).
pub fn build_scenario(cfg: &ScenarioConfig, base_dir: &Path) -> Result<Scenario, ConfigError> {
    let grid = GridSpec::new(
        cfg.grid.dims,
        cfg.grid.points,
        cfg.grid.length,
        cfg.grid.boundary,
    )
    .map_err(|e| ConfigError::Validation(e.to_string()))?;
    let time = TimeAxis::new(cfg.time.horizon, cfg.time.steps)
        .map_err(|e| ConfigError::Validation(e.to_string()))?;
    let n = time.steps;

    let initial_spec = cfg
        .initial
        .as_ref()
        .ok_or_else(|| ConfigError::Validation("missing [initial] density".into()))?;
    let terminal_spec = cfg
        .terminal
        .as_ref()
        .ok_or_else(|| ConfigError::Validation("missing [terminal] density".into()))?;

    let potentials: Vec<Field<f64>> = (0..=n)
        .map(|k| sample_obstacles(&cfg.obstacles, &grid, time.time_at(k), time.horizon))
        .collect();
    let has_obstacles = !cfg.obstacles.is_empty();

    let mut initial = build_density(initial_spec, &grid, base_dir)?;
    if has_obstacles {
        initial = mask_endpoint(&initial, &potentials[0], "initial")?;
    }

    let nonlocal_spec = match (&cfg.running.kind[..], &cfg.nonlocal) {
        ("nonlocal", Some(kernel_cfg)) => Some(NonlocalSpec {
            kernel: build_interaction_kernel(kernel_cfg, &grid, base_dir)?,
            symmetric: match kernel_cfg {
                NonlocalKernelConfig::PolarGaussian { symmetric, .. } => *symmetric,
                NonlocalKernelConfig::File { symmetric, .. } => *symmetric,
            },
            cap: cfg.running.cap,
        }),
        _ => None,
    };

    let interior_cost = |k: usize| -> CostSpec<f64> {
        match cfg.running.kind.as_str() {
            "congestion" => {
                let cap = cfg.running.cap.expect("validated");
                if has_obstacles {
                    CostSpec::CongestionPlusPotential(cap, potentials[k].clone())
                } else {
                    CostSpec::Congestion(cap)
                }
            }
            "nonlocal" => CostSpec::Nonlocal(nonlocal_spec.clone().expect("validated")),
            _ => {
                if has_obstacles {
                    CostSpec::Potential(potentials[k].clone())
                } else {
                    CostSpec::Free
                }
            }
        }
    };

    let mut costs = Vec::with_capacity(n + 1);
    costs.push(CostSpec::FixedMarginal(initial));
    for k in 1..n {
        costs.push(interior_cost(k));
    }
    let terminal = match terminal_spec {
        DensitySpec::Free => {
            if has_obstacles {
                CostSpec::Potential(potentials[n].clone())
            } else {
                CostSpec::Free
            }
        }
        other => {
            let mut density = build_density(other, &grid, base_dir)?;
            if has_obstacles {
                density = mask_endpoint(&density, &potentials[n], "terminal")?;
            }
            CostSpec::FixedMarginal(density)
        }
    };
    costs.push(terminal);

    let schedule =
        CostSchedule::new(costs).map_err(|e| ConfigError::Validation(e.to_string()))?;

    Ok(Scenario {
        grid,
        time,
        epsilon: cfg.epsilon,
        schedule,
        solver: cfg.solver.clone(),
        format: cfg.output.format,
        config: cfg.clone(),
    })
}
