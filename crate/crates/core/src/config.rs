//! Scenario configuration: a TOML key-value/table document parsed into a
//! fully resolved [`ScenarioConfig`] with documented defaults.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Boundary;
use crate::sinkhorn::SolverConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    /// Malformed document; the message carries the TOML line/key diagnostics.
    #[error("config parse error: {0}")]
    Parse(String),
    /// Structurally valid but semantically impossible configuration.
    #[error("config validation error: {0}")]
    Validation(String),
}

/// Spatial grid section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub dims: usize,
    pub points: usize,
    pub length: f64,
    pub boundary: Boundary,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            dims: 2,
            points: 64,
            length: 1.0,
            boundary: Boundary::Periodic,
        }
    }
}

/// Time axis section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeConfig {
    pub horizon: f64,
    pub steps: usize,
}

impl Default for TimeConfig {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            steps: 31,
        }
    }
}

/// One component of a Gaussian mixture density.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub center: Vec<f64>,
    pub sigma: f64,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

fn default_weight() -> f64 {
    1.0
}

/// Named density shapes for the initial and terminal marginals.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DensitySpec {
    /// Normalized Gaussian bump (minimum-image distance on the torus).
    Gaussian { center: Vec<f64>, sigma: f64 },
    /// Normalized weighted sum of Gaussian bumps.
    GaussianMixture { components: Vec<MixtureComponent> },
    /// The uniform probability density.
    Uniform,
    /// Normalized indicator of a disk.
    Indicator { center: Vec<f64>, radius: f64 },
    /// Row-major CSV file of cell values, normalized on load.
    File { path: String },
    /// No terminal constraint (terminal marginal only).
    Free,
}

/// Running-cost selector for the interior indices.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunningCostConfig {
    /// One of `none`, `congestion`, `nonlocal`.
    pub kind: String,
    /// Hard congestion cap (required for `congestion`, optional alongside
    /// `nonlocal`).
    pub cap: Option<f64>,
}

impl Default for RunningCostConfig {
    fn default() -> Self {
        Self {
            kind: "none".into(),
            cap: None,
        }
    }
}

/// A moving circular obstacle: the center follows the waypoint polyline at
/// uniform parameter speed over `[0, T]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleConfig {
    pub radius: f64,
    pub waypoints: Vec<Vec<f64>>,
}

/// Nonlocal interaction kernel section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NonlocalKernelConfig {
    /// Tensor product of Gaussians in radius and direction (polar
    /// coordinates of the displacement), scaled by `amplitude`.
    PolarGaussian {
        sigma_r: f64,
        sigma_theta: f64,
        direction_deg: f64,
        #[serde(default = "default_amplitude")]
        amplitude: f64,
        #[serde(default)]
        symmetric: bool,
    },
    /// Kernel sampled from a row-major CSV file over the displacement grid.
    File {
        path: String,
        #[serde(default)]
        symmetric: bool,
    },
}

fn default_amplitude() -> f64 {
    1.0
}

/// Frame output formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameFormat {
    Csv,
    Pgm,
    Both,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub format: FrameFormat,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            format: FrameFormat::Csv,
        }
    }
}

/// The fully resolved scenario description; serialized verbatim into the run
/// manifest so every default becomes part of the record.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub epsilon: f64,
    pub grid: GridConfig,
    pub time: TimeConfig,
    pub initial: Option<DensitySpec>,
    pub terminal: Option<DensitySpec>,
    pub running: RunningCostConfig,
    #[serde(rename = "obstacle")]
    pub obstacles: Vec<ObstacleConfig>,
    pub nonlocal: Option<NonlocalKernelConfig>,
    pub solver: SolverConfig,
    pub output: OutputConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            grid: GridConfig::default(),
            time: TimeConfig::default(),
            initial: None,
            terminal: None,
            running: RunningCostConfig::default(),
            obstacles: Vec::new(),
            nonlocal: None,
            solver: SolverConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

/// Parses and validates a scenario document.
pub fn parse_config(text: &str) -> Result<ScenarioConfig, ConfigError> {
    let cfg: ScenarioConfig =
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    validate(&cfg)?;
    Ok(cfg)
}

fn check_center(center: &[f64], dims: usize, what: &str) -> Result<(), ConfigError> {
    if center.len() != dims {
        return Err(ConfigError::Validation(format!(
            "{what}: center has {} coordinates, grid has {dims} dimensions",
            center.len()
        )));
    }
    Ok(())
}

fn validate(cfg: &ScenarioConfig) -> Result<(), ConfigError> {
    if !(cfg.epsilon > 0.0) || !cfg.epsilon.is_finite() {
        return Err(ConfigError::Validation(format!(
            "epsilon must be positive, got {}",
            cfg.epsilon
        )));
    }
    let dims = cfg.grid.dims;
    if dims == 0 || dims > 3 {
        return Err(ConfigError::Validation(format!(
            "grid.dims must be 1..=3, got {dims}"
        )));
    }
    if cfg.grid.points < 2 {
        return Err(ConfigError::Validation("grid.points must be >= 2".into()));
    }
    if !(cfg.grid.length > 0.0) {
        return Err(ConfigError::Validation("grid.length must be positive".into()));
    }
    if !(cfg.time.horizon > 0.0) || cfg.time.steps == 0 {
        return Err(ConfigError::Validation(
            "time.horizon must be positive and time.steps >= 1".into(),
        ));
    }
    let volume = cfg.grid.length.powi(dims as i32);

    let initial = cfg
        .initial
        .as_ref()
        .ok_or_else(|| ConfigError::Validation("missing [initial] density".into()))?;
    if matches!(initial, DensitySpec::Free) {
        return Err(ConfigError::Validation(
            "initial density cannot be free".into(),
        ));
    }
    let terminal = cfg
        .terminal
        .as_ref()
        .ok_or_else(|| ConfigError::Validation("missing [terminal] density".into()))?;
    for (spec, what) in [(initial, "initial"), (terminal, "terminal")] {
        match spec {
            DensitySpec::Gaussian { center, sigma } => {
                check_center(center, dims, what)?;
                if !(*sigma > 0.0) {
                    return Err(ConfigError::Validation(format!(
                        "{what}: sigma must be positive"
                    )));
                }
            }
            DensitySpec::GaussianMixture { components } => {
                if components.is_empty() {
                    return Err(ConfigError::Validation(format!(
                        "{what}: mixture needs at least one component"
                    )));
                }
                for comp in components {
                    check_center(&comp.center, dims, what)?;
                    if !(comp.sigma > 0.0) || !(comp.weight > 0.0) {
                        return Err(ConfigError::Validation(format!(
                            "{what}: mixture sigma and weight must be positive"
                        )));
                    }
                }
            }
            DensitySpec::Indicator { center, radius } => {
                check_center(center, dims, what)?;
                if !(*radius > 0.0) {
                    return Err(ConfigError::Validation(format!(
                        "{what}: radius must be positive"
                    )));
                }
            }
            _ => {}
        }
    }

    match cfg.running.kind.as_str() {
        "none" => {}
        "congestion" => {
            let cap = cfg.running.cap.ok_or_else(|| {
                ConfigError::Validation("running.kind = congestion requires running.cap".into())
            })?;
            if cap * volume < 1.0 {
                return Err(ConfigError::Validation(format!(
                    "congestion cap {cap} times domain volume {volume} is below 1; no probability density fits"
                )));
            }
        }
        "nonlocal" => {
            if cfg.nonlocal.is_none() {
                return Err(ConfigError::Validation(
                    "running.kind = nonlocal requires a [nonlocal] kernel section".into(),
                ));
            }
            if let Some(cap) = cfg.running.cap {
                if cap * volume < 1.0 {
                    return Err(ConfigError::Validation(format!(
                        "congestion cap {cap} times domain volume {volume} is below 1; no probability density fits"
                    )));
                }
            }
            if !cfg.obstacles.is_empty() {
                return Err(ConfigError::Validation(
                    "obstacles cannot be combined with a nonlocal running cost".into(),
                ));
            }
        }
        other => {
            return Err(ConfigError::Validation(format!(
                "unknown running.kind '{other}' (expected none, congestion or nonlocal)"
            )));
        }
    }
    if cfg.nonlocal.is_some() && cfg.running.kind != "nonlocal" {
        return Err(ConfigError::Validation(
            "[nonlocal] section given but running.kind is not 'nonlocal'".into(),
        ));
    }
    if let Some(NonlocalKernelConfig::PolarGaussian {
        sigma_r,
        sigma_theta,
        ..
    }) = &cfg.nonlocal
    {
        if dims != 2 {
            return Err(ConfigError::Validation(
                "polar_gaussian kernels need a 2-dimensional grid".into(),
            ));
        }
        if !(*sigma_r > 0.0) || !(*sigma_theta > 0.0) {
            return Err(ConfigError::Validation(
                "nonlocal sigma_r and sigma_theta must be positive".into(),
            ));
        }
    }

    for (i, obs) in cfg.obstacles.iter().enumerate() {
        if !(obs.radius > 0.0) {
            return Err(ConfigError::Validation(format!(
                "obstacle {i}: radius must be positive"
            )));
        }
        if obs.radius >= cfg.grid.length / 2.0 {
            return Err(ConfigError::Validation(format!(
                "obstacle {i}: radius {} does not fit the domain (side {})",
                obs.radius, cfg.grid.length
            )));
        }
        if obs.waypoints.is_empty() {
            return Err(ConfigError::Validation(format!(
                "obstacle {i}: needs at least one waypoint"
            )));
        }
        for wp in &obs.waypoints {
            check_center(wp, dims, &format!("obstacle {i}"))?;
        }
    }

    if !(cfg.solver.marginal_tolerance > 0.0)
        || !(cfg.solver.fixed_point_tolerance > 0.0)
        || cfg.solver.max_sweeps == 0
        || cfg.solver.outer_max_iters == 0
    {
        return Err(ConfigError::Validation(
            "solver tolerances must be positive and iteration limits >= 1".into(),
        ));
    }
    if !(cfg.solver.damping > 0.0) || cfg.solver.damping > 1.0 {
        return Err(ConfigError::Validation(
            "solver.damping must lie in (0, 1]".into(),
        ));
    }
    Ok(())
}
