//! C interface to `fourdvar`.
//!
//! A problem is built from the text of a TOML experiment file and owned by an
//! opaque [`FdvProblem`] handle; the synthetic observations are generated at
//! construction. Every call returns an [`FdvStatus`]; on failure the message
//! is available from [`fdv_last_error_message`] on the same thread.
//!
//! Control vectors are nodal values on the interior grid, `node_count` long,
//! ordered with the first axis fastest.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use fourdvar::assimilation::AssimilationProblem;
use fourdvar::config::ExperimentConfig;
use fourdvar::optimizer::{kkt_check, optimize};
use fourdvar::twin::{self, Experiment, TwinData};
use fourdvar::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    ConfigParse = 3,
    ConfigInvalid = 4,
    DimensionMismatch = 5,
    EllipticityViolation = 6,
    SolverFailure = 7,
    Numerical = 8,
    Io = 9,
    Panic = 10,
}

impl FdvStatus {
    fn from_error(e: &Error) -> Self {
        match e.kind() {
            "config_parse" => FdvStatus::ConfigParse,
            "config_invalid" | "config_not_found" => FdvStatus::ConfigInvalid,
            "dimension_mismatch" => FdvStatus::DimensionMismatch,
            "ellipticity_violation" => FdvStatus::EllipticityViolation,
            "solver_failure" => FdvStatus::SolverFailure,
            "io" => FdvStatus::Io,
            _ => FdvStatus::Numerical,
        }
    }
}

/// First-order optimality report.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FdvKktReport {
    pub grad_residual: f64,
    pub grad_norm: f64,
    pub feasibility: f64,
    pub complementarity: f64,
    pub lambda: f64,
    pub cost: f64,
    /// 1 if the constraint is active
    pub active: i32,
    /// 1 if the control is feasible
    pub feasible: i32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FdvOptimizeSummary {
    pub iterations: usize,
    pub converged: i32,
    pub cost: f64,
}

/// Opaque problem handle.
pub struct FdvProblem {
    experiment: Experiment,
    data: TwinData,
    problem: AssimilationProblem,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), (FdvStatus, String)>) -> FdvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FdvStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            FdvStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (FdvStatus, String) {
    (FdvStatus::from_error(&e), e.to_string())
}

fn null(what: &str) -> (FdvStatus, String) {
    (FdvStatus::NullPointer, format!("{what} is null"))
}

unsafe fn problem_ref<'a>(p: *const FdvProblem) -> Result<&'a FdvProblem, (FdvStatus, String)> {
    p.as_ref().ok_or_else(|| null("problem"))
}

unsafe fn control<'a>(
    p: &FdvProblem,
    u: *const f64,
    len: usize,
) -> Result<&'a [f64], (FdvStatus, String)> {
    if u.is_null() {
        return Err(null("control"));
    }
    let n = p.problem.node_count();
    if len != n {
        return Err((
            FdvStatus::DimensionMismatch,
            format!("control has {len} values, the grid has {n} nodes"),
        ));
    }
    Ok(std::slice::from_raw_parts(u, len))
}

/// Builds a problem from the text of a TOML experiment file.
///
/// # Safety
/// `config_toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fdv_problem_from_config(
    config_toml: *const c_char,
    out: *mut *mut FdvProblem,
) -> FdvStatus {
    guard(|| {
        if config_toml.is_null() {
            return Err(null("config"));
        }
        if out.is_null() {
            return Err(null("output handle"));
        }
        *out = ptr::null_mut();
        let text = CStr::from_ptr(config_toml)
            .to_str()
            .map_err(|e| (FdvStatus::InvalidUtf8, e.to_string()))?;
        let cfg = ExperimentConfig::from_toml_str(text).map_err(lib_err)?;
        let experiment = Experiment::prepare(&cfg).map_err(lib_err)?;
        let data = twin::generate_truth(&experiment).map_err(lib_err)?;
        let problem = twin::build_problem(&experiment, &data).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(FdvProblem {
            experiment,
            data,
            problem,
        }));
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `problem` must come from [`fdv_problem_from_config`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fdv_problem_free(problem: *mut FdvProblem) {
    if !problem.is_null() {
        drop(Box::from_raw(problem));
    }
}

/// Number of grid nodes, or 0 for a null handle.
///
/// # Safety
/// `problem` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fdv_problem_node_count(problem: *const FdvProblem) -> usize {
    problem.as_ref().map_or(0, |p| p.problem.node_count())
}

/// Copies the true initial condition of the twin into `out`.
///
/// # Safety
/// `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fdv_truth(
    problem: *const FdvProblem,
    out: *mut f64,
    len: usize,
) -> FdvStatus {
    guard(|| {
        let p = problem_ref(problem)?;
        if out.is_null() {
            return Err(null("output"));
        }
        let truth = &p.data.truth;
        if len != truth.len() {
            return Err((
                FdvStatus::DimensionMismatch,
                format!("buffer has {len} slots, need {}", truth.len()),
            ));
        }
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(truth);
        Ok(())
    })
}

/// Reduced cost `f(u)`.
///
/// # Safety
/// `u` must hold `len` doubles; `cost` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fdv_evaluate_cost(
    problem: *const FdvProblem,
    u: *const f64,
    len: usize,
    cost: *mut f64,
) -> FdvStatus {
    guard(|| {
        let p = problem_ref(problem)?;
        let u = control(p, u, len)?;
        if cost.is_null() {
            return Err(null("cost"));
        }
        *cost = p.problem.evaluate_cost(u).map_err(lib_err)?;
        Ok(())
    })
}

/// Cost and L2 gradient representer; `cost` may be null.
///
/// # Safety
/// `u` and `grad` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fdv_evaluate_gradient(
    problem: *const FdvProblem,
    u: *const f64,
    len: usize,
    grad: *mut f64,
    cost: *mut f64,
) -> FdvStatus {
    guard(|| {
        let p = problem_ref(problem)?;
        let u = control(p, u, len)?;
        if grad.is_null() {
            return Err(null("gradient"));
        }
        let (eval, g) = p.problem.cost_and_gradient(u).map_err(lib_err)?;
        std::slice::from_raw_parts_mut(grad, len).copy_from_slice(&g);
        if !cost.is_null() {
            *cost = eval.cost.total;
        }
        Ok(())
    })
}

/// # Safety
/// `u` must hold `len` doubles; `report` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fdv_kkt_check(
    problem: *const FdvProblem,
    u: *const f64,
    len: usize,
    report: *mut FdvKktReport,
) -> FdvStatus {
    guard(|| {
        let p = problem_ref(problem)?;
        let u = control(p, u, len)?;
        if report.is_null() {
            return Err(null("report"));
        }
        let k = kkt_check(&p.problem, u).map_err(lib_err)?;
        *report = FdvKktReport {
            grad_residual: k.grad_residual,
            grad_norm: k.grad_norm,
            feasibility: k.feasibility,
            complementarity: k.complementarity,
            lambda: k.lambda,
            cost: k.cost,
            active: k.active as i32,
            feasible: k.feasible as i32,
        };
        Ok(())
    })
}

/// Runs the configured optimizer from `u_init` (or from the configured start
/// when `u_init` is null) and writes the result to `u_out`. `summary` may be
/// null.
///
/// # Safety
/// `u_init` (if not null) and `u_out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fdv_optimize(
    problem: *const FdvProblem,
    u_init: *const f64,
    u_out: *mut f64,
    len: usize,
    summary: *mut FdvOptimizeSummary,
) -> FdvStatus {
    guard(|| {
        let p = problem_ref(problem)?;
        if u_out.is_null() {
            return Err(null("output"));
        }
        let start = if u_init.is_null() {
            twin::initial_control(&p.experiment, &p.data)
        } else {
            control(p, u_init, len)?.to_vec()
        };
        let n = p.problem.node_count();
        if len != n {
            return Err((
                FdvStatus::DimensionMismatch,
                format!("buffer has {len} slots, need {n}"),
            ));
        }
        let res = optimize(&p.problem, &p.experiment.config.optimizer, &start).map_err(lib_err)?;
        std::slice::from_raw_parts_mut(u_out, len).copy_from_slice(&res.control);
        if !summary.is_null() {
            *summary = FdvOptimizeSummary {
                iterations: res.iterations,
                converged: res.converged as i32,
                cost: res.history.last().map_or(f64::NAN, |h| h.cost),
            };
        }
        Ok(())
    })
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fdv_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}
