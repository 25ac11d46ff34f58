use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mmsb::config::{parse_config, FrameFormat};
use mmsb::diagnostics::run_metrics;
use mmsb::output::write_run;
use mmsb::scenario::build_scenario;
use mmsb::sinkhorn::{solve, SolveError, SolveOutcome, Stabilization};

#[derive(Parser)]
#[command(name = "mmsb", version, about = "Entropic solver for second-order mean-field games on periodic grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a scenario config and write density frames plus a manifest.
    Solve {
        /// Scenario description (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output directory for frames and manifest.json.
        #[arg(long)]
        out: PathBuf,
        /// Frame format override.
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
        /// Kernel application domain override.
        #[arg(long = "log-domain", value_enum)]
        log_domain: Option<LogDomainArg>,
        /// Sweep budget override.
        #[arg(long = "max-sweeps")]
        max_sweeps: Option<usize>,
        /// Marginal tolerance override.
        #[arg(long)]
        tol: Option<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Pgm,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum LogDomainArg {
    Auto,
    On,
    Off,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Solve {
            config,
            out,
            format,
            log_domain,
            max_sweeps,
            tol,
        } => match run_solve(&config, &out, format, log_domain, max_sweeps, tol) {
            Ok(code) => code,
            Err(message) => {
                eprintln!("error: {message}");
                ExitCode::from(1)
            }
        },
    }
}

fn run_solve(
    config_path: &PathBuf,
    out_dir: &PathBuf,
    format: Option<FormatArg>,
    log_domain: Option<LogDomainArg>,
    max_sweeps: Option<usize>,
    tol: Option<f64>,
) -> Result<ExitCode, String> {
    let text = std::fs::read_to_string(config_path)
        .map_err(|e| format!("cannot read {}: {e}", config_path.display()))?;
    let mut cfg = parse_config(&text).map_err(|e| e.to_string())?;
    if let Some(fmt) = format {
        cfg.output.format = match fmt {
            FormatArg::Csv => FrameFormat::Csv,
            FormatArg::Pgm => FrameFormat::Pgm,
            FormatArg::Both => FrameFormat::Both,
        };
    }
    if let Some(mode) = log_domain {
        cfg.solver.stabilization = match mode {
            LogDomainArg::Auto => Stabilization::Auto,
            LogDomainArg::On => Stabilization::Log,
            LogDomainArg::Off => Stabilization::Linear,
        };
    }
    if let Some(sweeps) = max_sweeps {
        cfg.solver.max_sweeps = sweeps;
    }
    if let Some(tolerance) = tol {
        cfg.solver.marginal_tolerance = tolerance;
    }

    let base_dir = config_path
        .parent()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."));
    let scenario = build_scenario(&cfg, &base_dir).map_err(|e| e.to_string())?;

    let (outcome, exit): (SolveOutcome<f64>, ExitCode) = match solve(
        &scenario.schedule,
        &scenario.grid,
        &scenario.time,
        scenario.epsilon,
        &scenario.solver,
    ) {
        Ok(outcome) => (outcome, ExitCode::SUCCESS),
        Err(SolveError::MaxIterations(outcome)) => {
            eprintln!(
                "warning: iteration limit reached after {} sweeps; writing partial result",
                outcome.report.sweeps
            );
            (*outcome, ExitCode::from(2))
        }
        Err(SolveError::Core(e)) => return Err(e.to_string()),
    };

    let metrics = run_metrics(
        &outcome.state,
        &scenario.schedule,
        &outcome.marginals,
        outcome.report.duality_gap,
    )
    .map_err(|e| e.to_string())?;
    let manifest = write_run(
        out_dir,
        scenario.format,
        &scenario.config,
        &outcome.report,
        &metrics,
        &outcome.marginals,
    )
    .map_err(|e| e.to_string())?;

    println!(
        "{} after {} sweeps ({} outer), stabilization {}",
        if outcome.report.converged {
            "converged"
        } else {
            "stopped"
        },
        outcome.report.sweeps,
        outcome.report.outer_iterations,
        outcome.report.stabilization_used,
    );
    let worst = outcome
        .report
        .marginal_residuals
        .iter()
        .map(|r| r.residual)
        .fold(0.0f64, f64::max);
    println!(
        "max marginal residual {:.3e}, duality gap {:.3e}",
        worst, outcome.report.duality_gap
    );
    if let Some(last) = outcome.report.outer_residual_trace.last() {
        println!("outer fixed-point residual {last:.3e}");
    }
    println!(
        "plan entropy {:.6}, kinetic energy {:.6}, max density {:.6}",
        metrics.plan_entropy, metrics.kinetic_energy, metrics.max_density
    );
    println!(
        "wrote {} frame file(s) and manifest.json to {}",
        manifest.frames.len(),
        out_dir.display()
    );
    Ok(exit)
}
