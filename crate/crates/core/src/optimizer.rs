//! Minimization of the reduced cost over the `L^beta` ball and verification of
//! first- and second-order optimality.
//!
//! The optimizer is a gradient projection method for a single smooth
//! inequality constraint: in the interior (or when the negative gradient points
//! inward) it steps along `-grad f`; on the boundary with an outward gradient
//! it steps along the tangential part `-(grad f - lambda psi'(u))`. Trial points
//! are pulled back onto the ball by radial scaling and accepted by Armijo
//! backtracking.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assimilation::ConstraintSpec;
use crate::assimilation::{AssimilationProblem, MarginMode, SecondOrderPoint};
use crate::error::{check_len, Error, Result};
use crate::grid::Grid;

/// `|psi(u)| <= ACTIVATION_TOL * b` classifies the constraint as active.
pub const ACTIVATION_TOL: f64 = 1e-8;

/// Nodes above which the dense reduced Hessian is not assembled.
pub const DENSE_HESSIAN_LIMIT: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub max_iters: usize,
    /// Armijo sufficient-decrease constant.
    pub c1: f64,
    pub shrink: f64,
    pub init_step: f64,
    pub max_shrinks: usize,
    /// Relative KKT tolerance: stop when the gradient residual is below
    /// `kkt_tol * (1 + |grad f(u_init)|)`.
    pub kkt_tol: f64,
    /// Start each line search from the Barzilai-Borwein step.
    pub bb_step: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            max_iters: 5000,
            c1: 1e-4,
            shrink: 0.5,
            init_step: 1.0,
            max_shrinks: 60,
            kkt_tol: 1e-8,
            bb_step: true,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c1 > 0.0 && self.c1 < 1.0) {
            return Err(Error::Config(format!(
                "armijo c1 must lie in (0,1), got {}",
                self.c1
            )));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::Config(format!(
                "armijo shrink must lie in (0,1), got {}",
                self.shrink
            )));
        }
        if !(self.init_step > 0.0) || !(self.kkt_tol > 0.0) {
            return Err(Error::Config(
                "init_step and kkt_tol must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// First-order optimality residuals at a control.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    /// `|grad f(u) - lambda psi'(u)|_{L2}`
    pub grad_residual: f64,
    pub grad_norm: f64,
    /// `psi(u)`
    pub feasibility: f64,
    /// `lambda * psi(u)`
    pub complementarity: f64,
    pub lambda: f64,
    pub active: bool,
    /// `psi(u) >= -ACTIVATION_TOL * b`
    pub feasible: bool,
    pub cost: f64,
}

/// Which linearized cone the second-order check samples from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConeKind {
    /// Constraint inactive: all directions.
    Inactive,
    /// Active with zero multiplier: `psi'(u) h >= 0`.
    ActiveZeroMultiplier,
    /// Active with positive multiplier: `psi'(u) h = 0`.
    ActivePositiveMultiplier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SscReport {
    pub directions: usize,
    pub cone: ConeKind,
    pub lambda: f64,
    /// `min_h L_uu(u, lambda)[h, h] / |h|^2_{L2}` over the sampled directions.
    pub min_quotient: f64,
    pub max_quotient: f64,
    pub coercivity_margin: f64,
    pub margin_mode: MarginMode,
    pub kappa_b: f64,
    /// Minimum over the whole cone from the dense reduced Hessian, when computed.
    pub dense_min_quotient: Option<f64>,
    /// `min_quotient >= kappa_b - 1e-8` and `coercivity_margin >= 0`.
    pub certified: bool,
    /// `min_quotient >= -1e-8`.
    pub necessary: bool,
}

impl SscReport {
    /// Growth constant for [`quadratic_growth_probe`]: half the smallest
    /// measured quotient (the dense cone minimum when available), floored at 0.
    pub fn growth_sigma(&self) -> f64 {
        let q = self
            .dense_min_quotient
            .map_or(self.min_quotient, |d| d.min(self.min_quotient));
        0.5 * q.max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub cost: f64,
    pub step: f64,
    pub psi: f64,
    pub kkt_residual: f64,
    pub lambda: f64,
    /// Step accepted by the round-off branch of the line search.
    pub roundoff_accept: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub control: Vec<f64>,
    pub history: Vec<HistoryEntry>,
    pub converged: bool,
    pub iterations: usize,
    pub initial_grad_norm: f64,
    /// Absolute residual threshold used for termination.
    pub tolerance: f64,
}

/// Radial retraction onto `{int |u|^beta <= b}`. Feasible inputs are returned
/// unchanged; otherwise `u (b / int|u|^beta)^{1/beta}`, nudged inward by at most
/// a few ulps so that the result is feasible in floating point.
pub fn project_to_ball(spec: &ConstraintSpec, grid: &Grid, u: &[f64]) -> Result<Vec<f64>> {
    let integral = grid.lp_integral(u, spec.beta)?;
    if integral <= spec.b {
        return Ok(u.to_vec());
    }
    let mut scale = (spec.b / integral).powf(1.0 / spec.beta);
    let mut out: Vec<f64> = u.iter().map(|x| x * scale).collect();
    for _ in 0..16 {
        if grid.lp_integral(&out, spec.beta)? <= spec.b {
            break;
        }
        scale *= 1.0 - 4.0 * f64::EPSILON;
        out = u.iter().map(|x| x * scale).collect();
    }
    Ok(out)
}

fn is_active(spec: &ConstraintSpec, psi: f64) -> bool {
    psi <= ACTIVATION_TOL * spec.b
}

/// Least-squares multiplier `max(0, <g, r> / |r|^2)` with `r = psi'(u)`, when
/// the constraint is active; zero otherwise.
fn multiplier_from(
    spec: &ConstraintSpec,
    grid: &Grid,
    psi: f64,
    grad: &[f64],
    rep: &[f64],
) -> Result<f64> {
    if !is_active(spec, psi) {
        return Ok(0.0);
    }
    let rr = grid.ip(rep, rep);
    if rr == 0.0 {
        return Err(Error::Degenerate(
            "active constraint with vanishing derivative; multiplier undefined".into(),
        ));
    }
    Ok((grid.ip(grad, rep) / rr).max(0.0))
}

pub fn recover_multiplier(prob: &AssimilationProblem, u: &[f64]) -> Result<f64> {
    let grad = prob.evaluate_gradient(u)?;
    let rep = prob.constraint_gradient(u)?;
    let psi = prob.constraint_value(u)?;
    multiplier_from(prob.constraint(), prob.grid(), psi, &grad, &rep)
}

/// Multiplier fitted on test directions: minimizes
/// `sum_i (<grad f, h_i> - lambda <psi', h_i>)^2` and clamps at zero.
pub fn recover_multiplier_sampled(
    prob: &AssimilationProblem,
    u: &[f64],
    directions: &[Vec<f64>],
) -> Result<f64> {
    let psi = prob.constraint_value(u)?;
    if !is_active(prob.constraint(), psi) {
        return Ok(0.0);
    }
    let grad = prob.evaluate_gradient(u)?;
    let rep = prob.constraint_gradient(u)?;
    let grid = prob.grid();
    let (mut num, mut den) = (0.0, 0.0);
    for h in directions {
        check_len("direction", grid.node_count(), h.len())?;
        let a = grid.ip(&grad, h);
        let c = grid.ip(&rep, h);
        num += a * c;
        den += c * c;
    }
    if den == 0.0 {
        return Err(Error::Degenerate(
            "directions do not see the constraint derivative".into(),
        ));
    }
    Ok((num / den).max(0.0))
}

struct Stationarity {
    psi: f64,
    lambda: f64,
    /// `grad f - lambda psi'`
    residual: Vec<f64>,
    residual_norm: f64,
}

fn stationarity(prob: &AssimilationProblem, u: &[f64], grad: &[f64]) -> Result<Stationarity> {
    let grid = prob.grid();
    let psi = prob.constraint_value(u)?;
    let rep = prob.constraint_gradient(u)?;
    let lambda = multiplier_from(prob.constraint(), grid, psi, grad, &rep)?;
    let residual: Vec<f64> = grad.iter().zip(&rep).map(|(g, r)| g - lambda * r).collect();
    let residual_norm = grid.l2_norm(&residual);
    Ok(Stationarity {
        psi,
        lambda,
        residual,
        residual_norm,
    })
}

pub fn kkt_check(prob: &AssimilationProblem, u: &[f64]) -> Result<KktReport> {
    let (eval, grad) = prob.cost_and_gradient(u)?;
    let st = stationarity(prob, u, &grad)?;
    let spec = prob.constraint();
    Ok(KktReport {
        grad_residual: st.residual_norm,
        grad_norm: prob.grid().l2_norm(&grad),
        feasibility: st.psi,
        complementarity: st.lambda * st.psi,
        lambda: st.lambda,
        active: is_active(spec, st.psi),
        feasible: st.psi >= -ACTIVATION_TOL * spec.b,
        cost: eval.cost.total,
    })
}

/// Projected gradient with Armijo backtracking, starting from `u_init`
/// (projected onto the ball first if necessary).
pub fn optimize(
    prob: &AssimilationProblem,
    config: &OptimConfig,
    u_init: &[f64],
) -> Result<OptimResult> {
    config.validate()?;
    check_len("initial control", prob.node_count(), u_init.len())?;
    let grid = *prob.grid();
    let spec = *prob.constraint();

    let mut u = project_to_ball(&spec, &grid, u_init)?;
    let (eval, mut grad) = prob.cost_and_gradient(&u)?;
    let mut cost = eval.cost.total;
    let initial_grad_norm = grid.l2_norm(&grad);
    let tolerance = config.kkt_tol * (1.0 + initial_grad_norm);
    // resolution of cost differences in floating point
    let data_energy: f64 = 0.5
        * prob.propagator().time().dt()
        * prob
            .observations()
            .values
            .iter()
            .flatten()
            .map(|z| z * z)
            .sum::<f64>();

    let mut st = stationarity(prob, &u, &grad)?;
    let mut history = vec![HistoryEntry {
        iteration: 0,
        cost,
        step: 0.0,
        psi: st.psi,
        kkt_residual: st.residual_norm,
        lambda: st.lambda,
        roundoff_accept: false,
    }];
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;

    for iter in 1..=config.max_iters {
        if st.residual_norm <= tolerance {
            return Ok(OptimResult {
                control: u,
                history,
                converged: true,
                iterations: iter - 1,
                initial_grad_norm,
                tolerance,
            });
        }
        let direction: Vec<f64> = if st.lambda > 0.0 {
            st.residual.iter().map(|r| -r).collect()
        } else {
            grad.iter().map(|g| -g).collect()
        };
        let slope = grid.ip(&grad, &direction);

        let mut step = config.init_step;
        if config.bb_step {
            if let Some((u_prev, d_prev)) = &prev {
                let s: Vec<f64> = u.iter().zip(u_prev).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = d_prev.iter().zip(&direction).map(|(a, b)| a - b).collect();
                let sy = grid.ip(&s, &y);
                if sy > 0.0 {
                    let bb = grid.ip(&s, &s) / sy;
                    if bb.is_finite() && bb > 0.0 {
                        step = bb.clamp(1e-12, 1e12);
                    }
                }
            }
        }

        let noise = 1e-13 * (cost.abs() + data_energy) + f64::MIN_POSITIVE;
        let mut accepted = None;
        for _ in 0..=config.max_shrinks {
            let trial_raw: Vec<f64> = u
                .iter()
                .zip(&direction)
                .map(|(a, d)| a + step * d)
                .collect();
            let trial = project_to_ball(&spec, &grid, &trial_raw)?;
            let trial_cost = prob.evaluate_cost(&trial)?;
            if trial_cost <= cost + config.c1 * step * slope {
                accepted = Some((trial, trial_cost, false));
                break;
            }
            if (step * slope).abs() <= noise && trial_cost <= cost + noise {
                // decrease below cost resolution: accept on stationarity progress
                let trial_grad = prob.evaluate_gradient(&trial)?;
                let trial_st = stationarity(prob, &trial, &trial_grad)?;
                if trial_st.residual_norm < st.residual_norm {
                    accepted = Some((trial, trial_cost, true));
                    break;
                }
            }
            step *= config.shrink;
        }
        let Some((next, next_cost, roundoff)) = accepted else {
            return Err(Error::Stagnation {
                iteration: iter,
                shrinks: config.max_shrinks,
                cost,
                residual: st.residual_norm,
            });
        };

        prev = Some((std::mem::replace(&mut u, next), direction));
        cost = next_cost;
        grad = prob.evaluate_gradient(&u)?;
        st = stationarity(prob, &u, &grad)?;
        history.push(HistoryEntry {
            iteration: iter,
            cost,
            step,
            psi: st.psi,
            kkt_residual: st.residual_norm,
            lambda: st.lambda,
            roundoff_accept: roundoff,
        });
    }
    let converged = st.residual_norm <= tolerance;
    Ok(OptimResult {
        control: u,
        history,
        converged,
        iterations: config.max_iters,
        initial_grad_norm,
        tolerance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SscConfig {
    pub directions: usize,
    pub seed: u64,
    pub margin_mode: MarginMode,
    /// Also compute the exact cone minimum from the dense reduced Hessian
    /// (only for small grids).
    pub dense_check: bool,
}

impl Default for SscConfig {
    fn default() -> Self {
        Self {
            directions: 32,
            seed: 0,
            margin_mode: MarginMode::DeltaDensity,
            dense_check: false,
        }
    }
}

pub fn cone_kind(spec: &ConstraintSpec, psi: f64, lambda: f64) -> ConeKind {
    if !is_active(spec, psi) {
        ConeKind::Inactive
    } else if lambda > 0.0 {
        ConeKind::ActivePositiveMultiplier
    } else {
        ConeKind::ActiveZeroMultiplier
    }
}

/// Maps `h` into the linearized cone described by `cone` and `rep = psi'(u)`.
pub fn project_to_cone(grid: &Grid, cone: ConeKind, rep: &[f64], h: &mut [f64]) {
    match cone {
        ConeKind::Inactive => {}
        ConeKind::ActiveZeroMultiplier => {
            if grid.ip(rep, h) < 0.0 {
                h.iter_mut().for_each(|x| *x = -*x);
            }
        }
        ConeKind::ActivePositiveMultiplier => {
            let rr = grid.ip(rep, rep);
            if rr > 0.0 {
                let c = grid.ip(rep, h) / rr;
                h.iter_mut().zip(rep).for_each(|(x, r)| *x -= c * r);
            }
        }
    }
}

pub fn in_cone(grid: &Grid, cone: ConeKind, rep: &[f64], h: &[f64]) -> bool {
    let c = grid.ip(rep, h);
    let scale = grid.l2_norm(rep) * grid.l2_norm(h);
    match cone {
        ConeKind::Inactive => true,
        ConeKind::ActiveZeroMultiplier => c >= -1e-12 * scale,
        ConeKind::ActivePositiveMultiplier => c.abs() <= 1e-10 * scale,
    }
}

/// Seeded standard-normal directions mapped into the cone and normalized to
/// unit L2 norm.
pub fn sample_cone_directions(
    grid: &Grid,
    cone: ConeKind,
    rep: &[f64],
    count: usize,
    seed: u64,
) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut h: Vec<f64> = (0..grid.node_count())
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            project_to_cone(grid, cone, rep, &mut h);
            let norm = grid.l2_norm(&h);
            h.iter_mut().for_each(|x| *x /= norm);
            h
        })
        .collect()
}

/// Sampled second-order check at `u` with multiplier `lambda`.
pub fn ssc_check(
    prob: &AssimilationProblem,
    u: &[f64],
    lambda: f64,
    config: &SscConfig,
) -> Result<SscReport> {
    if config.directions < 1 {
        return Err(Error::Config("ssc needs at least one direction".into()));
    }
    if lambda < 0.0 {
        return Err(Error::MultiplierSign(lambda));
    }
    let grid = *prob.grid();
    let spec = prob.constraint();
    let point = prob.second_order_point(u)?;
    let psi = prob.constraint_value(u)?;
    let rep = prob.constraint_gradient(u)?;
    let cone = cone_kind(spec, psi, lambda);
    let dirs = sample_cone_directions(&grid, cone, &rep, config.directions, config.seed);
    if let Some(bad) = dirs.iter().position(|h| !in_cone(&grid, cone, &rep, h)) {
        return Err(Error::Degenerate(format!(
            "sampled direction {bad} left the cone"
        )));
    }
    let quotients: Vec<f64> = dirs
        .par_iter()
        .map(|h| Ok(prob.lagrangian_form_at(&point, lambda, h)? / grid.ip(h, h)))
        .collect::<Result<_>>()?;
    let min_quotient = quotients.iter().copied().fold(f64::INFINITY, f64::min);
    let max_quotient = quotients.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let margin = prob.coercivity_margin_at(&point, config.margin_mode);
    let kappa_b = prob.covariance().kappa();
    let dense_min_quotient = if config.dense_check {
        Some(dense_cone_min_quotient(prob, &point, lambda, cone, &rep)?)
    } else {
        None
    };
    Ok(SscReport {
        directions: dirs.len(),
        cone,
        lambda,
        min_quotient,
        max_quotient,
        coercivity_margin: margin,
        margin_mode: config.margin_mode,
        kappa_b,
        dense_min_quotient,
        certified: min_quotient >= kappa_b - 1e-8 && margin >= 0.0,
        necessary: min_quotient >= -1e-8,
    })
}

/// Assembles `L_uu(u, lambda)` in the nodal basis.
pub fn dense_lagrangian_hessian(
    prob: &AssimilationProblem,
    point: &SecondOrderPoint,
    lambda: f64,
) -> Result<DMatrix<f64>> {
    let n = prob.node_count();
    if n > DENSE_HESSIAN_LIMIT {
        return Err(Error::Scale {
            nodes: n,
            limit: DENSE_HESSIAN_LIMIT,
        });
    }
    let basis: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            e
        })
        .collect();
    let tangents = basis
        .par_iter()
        .map(|e| prob.tangent(point, e))
        .collect::<Result<Vec<_>>>()?;
    let mut h = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = prob.lagrangian_hessian_bilinear(
                point,
                lambda,
                (&basis[i], &tangents[i]),
                (&basis[j], &tangents[j]),
            );
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    Ok(h)
}

/// Exact minimum of the Rayleigh quotient over the cone. For the half-space
/// cone the quotient is even in `h`, so the minimum equals the global one.
pub fn dense_cone_min_quotient(
    prob: &AssimilationProblem,
    point: &SecondOrderPoint,
    lambda: f64,
    cone: ConeKind,
    rep: &[f64],
) -> Result<f64> {
    let hess = dense_lagrangian_hessian(prob, point, lambda)?;
    let w = prob.grid().quad_weight();
    let reduced = match cone {
        ConeKind::Inactive | ConeKind::ActiveZeroMultiplier => hess,
        ConeKind::ActivePositiveMultiplier => {
            let basis = orthogonal_complement(rep);
            basis.transpose() * hess * &basis
        }
    };
    let eig = SymmetricEigen::new(reduced);
    Ok(eig
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
        / w)
}

/// Orthonormal basis (columns) of the complement of `v`, from a Householder
/// reflection sending `v` to a multiple of `e_1`.
fn orthogonal_complement(v: &[f64]) -> DMatrix<f64> {
    let n = v.len();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut u: Vec<f64> = v.iter().map(|x| x / norm).collect();
    let sign = if u[0] >= 0.0 { 1.0 } else { -1.0 };
    u[0] += sign;
    let un = u.iter().map(|x| x * x).sum::<f64>();
    let mut q = DMatrix::identity(n, n);
    for i in 0..n {
        for j in 0..n {
            q[(i, j)] -= 2.0 * u[i] * u[j] / un;
        }
    }
    q.columns(1, n - 1).into_owned()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthSample {
    pub direction: usize,
    pub radius: f64,
    /// `f(u) - f(u*) - sigma |u - u*|^2` at `u = P(u* + radius h)`.
    pub excess: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthProbe {
    pub sigma: f64,
    pub samples: Vec<GrowthSample>,
    pub passed: bool,
}

/// Checks `f(u) >= f(u*) + sigma |u - u*|^2_{L2}` at feasible points
/// `u = P(u* + s h)` for unit cone directions `h` and radii `s`.
pub fn quadratic_growth_probe(
    prob: &AssimilationProblem,
    u_star: &[f64],
    directions: &[Vec<f64>],
    radii: &[f64],
    sigma: f64,
) -> Result<GrowthProbe> {
    let grid = *prob.grid();
    let spec = *prob.constraint();
    let f_star = prob.evaluate_cost(u_star)?;
    let jobs: Vec<(usize, f64)> = (0..directions.len())
        .flat_map(|d| radii.iter().map(move |&s| (d, s)))
        .collect();
    let samples = jobs
        .par_iter()
        .map(|&(d, s)| {
            let raw: Vec<f64> = u_star
                .iter()
                .zip(&directions[d])
                .map(|(a, h)| a + s * h)
                .collect();
            let u = project_to_ball(&spec, &grid, &raw)?;
            let diff: Vec<f64> = u.iter().zip(u_star).map(|(a, b)| a - b).collect();
            let dist2 = grid.ip(&diff, &diff);
            let excess = prob.evaluate_cost(&u)? - f_star - sigma * dist2;
            Ok(GrowthSample {
                direction: d,
                radius: s,
                excess,
                distance: dist2.sqrt(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let passed = samples.iter().all(|s| s.excess >= 0.0);
    Ok(GrowthProbe {
        sigma,
        samples,
        passed,
    })
}
