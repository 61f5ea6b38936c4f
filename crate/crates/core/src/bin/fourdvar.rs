//! Command line driver for twin experiments.
//!
//! Errors are reported on stderr as a single JSON line
//! `{"kind": ..., "phase": ..., "message": ...}` with a nonzero exit code:
//! 2 for configuration problems, 3 for numerical failures, 4 for I/O, 1 for a
//! failed derivative check.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use fourdvar::config::{preset, ExperimentConfig};
use fourdvar::export::{self, Format};
use fourdvar::optimizer::{
    cone_kind, kkt_check, optimize, quadratic_growth_probe, recover_multiplier,
    sample_cone_directions, ssc_check,
};
use fourdvar::twin::{self, Experiment};
use fourdvar::Error;

#[derive(Parser)]
#[command(
    name = "fourdvar",
    version,
    about = "4D-Var twin experiments for parabolic equations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Forward-solve the configured truth and export the trajectory.
    Simulate(Common),
    /// Full twin experiment: data, optimization, KKT (and SSC) report.
    Assimilate(Common),
    /// Finite-difference check of gradient and Hessian at random points.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Number of random (u, h) pairs.
        #[arg(long, default_value_t = 20)]
        pairs: usize,
    },
    /// First-order optimality report for a saved control.
    Kkt {
        #[command(flatten)]
        common: Common,
        /// Control CSV (node index first, value last).
        #[arg(long)]
        control: PathBuf,
    },
    /// Second-order report at a saved control, or at the optimizer result.
    Ssc {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        control: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Config file, or the name of a built-in preset.
    #[arg(long)]
    config: String,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    format: FormatArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => Format::Csv,
            FormatArg::Json => Format::Json,
        }
    }
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    kind: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    phase: Option<&'a str>,
    message: String,
}

fn emit_error(kind: &str, phase: Option<&str>, message: String) {
    let line = ErrorLine {
        kind,
        phase,
        message,
    };
    eprintln!(
        "{}",
        serde_json::to_string(&line).expect("error line serializes")
    );
}

enum Failure {
    Error(Error),
    GradCheck(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf, Format), Error> {
        let path = Path::new(&self.config);
        let mut cfg = if path.exists() || preset(&self.config).is_none() {
            ExperimentConfig::load(path)?
        } else {
            ExperimentConfig::from_toml_str(preset(&self.config).unwrap_or_default())?
        };
        if let Some(seed) = self.seed {
            cfg.override_seed(seed);
        }
        let out = self.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
        Ok((cfg, out, self.format.into()))
    }
}

fn ext(format: Format) -> &'static str {
    match format {
        Format::Csv => "csv",
        Format::Json => "json",
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate(common) => {
            let (cfg, out, format) = common.load()?;
            let exp = Experiment::prepare(&cfg)?;
            let truth = exp.truth().map_err(|e| e.in_phase("simulate"))?;
            let traj = exp
                .propagator
                .solve_semilinear(&truth, &cfg.nonlinearity)
                .map_err(|e| e.in_phase("simulate"))?;
            std::fs::create_dir_all(&out).map_err(Error::from)?;
            let path = out.join(format!("trajectory.{}", ext(format)));
            export::write_trajectory(&path, &exp.grid, &exp.time, &traj, format)?;
            export::write_control(
                &out.join(format!("truth.{}", ext(format))),
                &exp.grid,
                &truth,
                format,
            )?;
            println!("wrote {}", path.display());
        }
        Command::Assimilate(common) => {
            let (cfg, out, format) = common.load()?;
            let result = twin::run_assimilation(&cfg)?;
            export::export_twin(&out, &cfg.grid()?, &cfg.time_grid()?, &result, format)?;
            println!(
                "converged={} iterations={} cost={:e} error_l2={:e} kkt_residual={:e} lambda={:e}",
                result.converged,
                result.iterations,
                result.cost.total,
                result.error_l2,
                result.kkt.grad_residual,
                result.kkt.lambda
            );
            if let Some(s) = &result.ssc {
                println!(
                    "ssc: certified={} min_quotient={:e} kappa_b={:e} margin={:e}",
                    s.certified, s.min_quotient, s.kappa_b, s.coercivity_margin
                );
            }
        }
        Command::Gradcheck { common, pairs } => {
            let (cfg, out, _) = common.load()?;
            let exp = Experiment::prepare(&cfg)?;
            let data = twin::generate_truth(&exp)?;
            let prob = twin::build_problem(&exp, &data)?;
            let rows = twin::derivative_check(&prob, &data.truth, pairs, cfg.ssc.seed)
                .map_err(|e| e.in_phase("gradcheck"))?;
            println!(
                "{:>4}  {:>14}  {:>14}  {:>9}  {:>14}  {:>14}  {:>9}",
                "pair", "grad.h", "fd", "rel.err", "hess[h,h]", "fd", "rel.err"
            );
            for r in &rows {
                println!(
                    "{:>4}  {:>14.6e}  {:>14.6e}  {:>9.2e}  {:>14.6e}  {:>14.6e}  {:>9.2e}",
                    r.pair,
                    r.directional,
                    r.fd_directional,
                    r.gradient_rel_error,
                    r.curvature,
                    r.fd_curvature,
                    r.hessian_rel_error
                );
            }
            std::fs::create_dir_all(&out).map_err(Error::from)?;
            export::write_json(&out.join("gradcheck.json"), &rows)?;
            let bad = rows
                .iter()
                .filter(|r| r.gradient_rel_error > 1e-5 || r.hessian_rel_error > 1e-4)
                .count();
            if bad > 0 {
                return Err(Failure::GradCheck(format!(
                    "{bad} of {} pairs exceed tolerance (gradient 1e-5, hessian 1e-4)",
                    rows.len()
                )));
            }
        }
        Command::Kkt { common, control } => {
            let (cfg, out, _) = common.load()?;
            let exp = Experiment::prepare(&cfg)?;
            let data = twin::generate_truth(&exp)?;
            let prob = twin::build_problem(&exp, &data)?;
            let u = export::read_control_csv(&control, &exp.grid).map_err(|e| e.in_phase("kkt"))?;
            let report = kkt_check(&prob, &u).map_err(|e| e.in_phase("kkt"))?;
            std::fs::create_dir_all(&out).map_err(Error::from)?;
            export::write_json(&out.join("kkt.json"), &report)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report).map_err(Error::from)?
            );
        }
        Command::Ssc { common, control } => {
            let (cfg, out, _) = common.load()?;
            let exp = Experiment::prepare(&cfg)?;
            let data = twin::generate_truth(&exp)?;
            let prob = twin::build_problem(&exp, &data)?;
            let u = match control {
                Some(path) => {
                    export::read_control_csv(&path, &exp.grid).map_err(|e| e.in_phase("ssc"))?
                }
                None => {
                    optimize(&prob, &cfg.optimizer, &twin::initial_control(&exp, &data))
                        .map_err(|e| e.in_phase("optimize"))?
                        .control
                }
            };
            let phase = |e: Error| e.in_phase("ssc");
            let lambda = recover_multiplier(&prob, &u).map_err(phase)?;
            let report = ssc_check(&prob, &u, lambda, &cfg.ssc.ssc_config()).map_err(phase)?;
            std::fs::create_dir_all(&out).map_err(Error::from)?;
            export::write_json(&out.join("ssc.json"), &report)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report).map_err(Error::from)?
            );
            if !cfg.ssc.growth_radii.is_empty() {
                let rep = prob.constraint_gradient(&u).map_err(phase)?;
                let psi = prob.constraint_value(&u).map_err(phase)?;
                let cone = cone_kind(prob.constraint(), psi, lambda);
                let dirs = sample_cone_directions(
                    &exp.grid,
                    cone,
                    &rep,
                    cfg.ssc.growth_directions,
                    cfg.ssc.seed.wrapping_add(1),
                );
                let growth = quadratic_growth_probe(
                    &prob,
                    &u,
                    &dirs,
                    &cfg.ssc.growth_radii,
                    report.growth_sigma(),
                )
                .map_err(phase)?;
                export::write_json(&out.join("growth.json"), &growth)?;
                println!(
                    "growth probe: passed={} sigma={:e}",
                    growth.passed, growth.sigma
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string();
            let first = message
                .lines()
                .next()
                .unwrap_or_default()
                .trim_start_matches("error: ");
            emit_error("usage", None, first.to_string());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Error(e)) => {
            emit_error(e.kind(), e.phase(), e.to_string());
            ExitCode::from(e.exit_code() as u8)
        }
        Err(Failure::GradCheck(message)) => {
            emit_error("gradcheck_failed", Some("gradcheck"), message);
            ExitCode::from(1)
        }
    }
}
