use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("config file not found: {}", .0.display())]
    ConfigNotFound(PathBuf),

    #[error("failed to parse config: {0}")]
    ConfigParse(String),

    #[error(
        "ellipticity violation: diffusion coefficient {value} at index {index} is not positive"
    )]
    Ellipticity { index: usize, value: f64 },

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error(
        "linear solver failed after {iterations} iterations (residual {residual:e}): {reason}"
    )]
    Solver {
        iterations: usize,
        residual: f64,
        reason: String,
    },

    #[error("nonlinearity returned a non-finite value at step {step}")]
    Nonlinearity { step: usize },

    #[error("problem too large for dense oracle: {nodes} nodes (limit {limit})")]
    Scale { nodes: usize, limit: usize },

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("Lagrange multiplier must be non-negative, got {0}")]
    MultiplierSign(f64),

    #[error("line search stagnated at iteration {iteration} after {shrinks} shrinks (f = {cost:e}, kkt residual = {residual:e})")]
    Stagnation {
        iteration: usize,
        shrinks: usize,
        cost: f64,
        residual: f64,
    },

    #[error("{phase}: {source}")]
    Phase {
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Machine-readable error class, stable across releases.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config_invalid",
            Error::ConfigNotFound(_) => "config_not_found",
            Error::ConfigParse(_) => "config_parse",
            Error::Ellipticity { .. } => "ellipticity_violation",
            Error::Dimension { .. } => "dimension_mismatch",
            Error::Solver { .. } => "solver_failure",
            Error::Nonlinearity { .. } => "nonlinearity_evaluation",
            Error::Scale { .. } => "oracle_scale",
            Error::Oracle(_) => "oracle_failure",
            Error::Degenerate(_) => "degenerate_input",
            Error::MultiplierSign(_) => "multiplier_sign",
            Error::Stagnation { .. } => "stagnation",
            Error::Phase { source, .. } => source.kind(),
            Error::Io(_) => "io",
            Error::Csv(_) => "io",
            Error::Json(_) => "io",
        }
    }

    pub fn phase(&self) -> Option<&'static str> {
        match self {
            Error::Phase { phase, .. } => Some(phase),
            _ => None,
        }
    }

    /// Process exit code used by the command line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Phase { source, .. } => source.exit_code(),
            Error::Config(_)
            | Error::ConfigNotFound(_)
            | Error::ConfigParse(_)
            | Error::Ellipticity { .. }
            | Error::Dimension { .. } => 2,
            Error::Io(_) | Error::Csv(_) | Error::Json(_) => 4,
            _ => 3,
        }
    }

    /// Tags the error with the pipeline phase it occurred in (outermost tag wins).
    pub fn in_phase(self, phase: &'static str) -> Error {
        match self {
            e @ Error::Phase { .. } => e,
            e => Error::Phase {
                phase,
                source: Box::new(e),
            },
        }
    }
}

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            what,
            expected,
            got,
        })
    }
}
