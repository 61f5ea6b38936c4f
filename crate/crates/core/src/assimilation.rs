//! The reduced 4D-Var functional
//!
//! `f(u) = 1/2 sum_i dt sum_k (y^{m_i}(x_k) - z_o(x_k, t_{m_i}))^2 + 1/2 <B^{-1}(u - u_b), u - u_b>`
//!
//! with `y = S(u)`, its adjoint gradient, the `L^beta` ball constraint
//! `psi(u) = b - int |u|^beta >= 0`, and the second-order forms used by the
//! optimality checks.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::forward::{Nonlinearity, Propagator, StateTrajectory};
use crate::grid::{DiscreteOperator, Grid};
use crate::tangent::{solve_adjoint, solve_tangent, AdjointSolution, ObservationSchedule};

/// Observation nodes, sampling stride and the observed values
/// `values[k][i] = z_o(x_k, t_{i*stride})`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub schedule: ObservationSchedule,
    pub values: Vec<Vec<f64>>,
    /// Standard deviation of the noise used when the data was generated.
    pub noise_sigma: f64,
}

impl ObservationSet {
    pub fn new(schedule: ObservationSchedule, values: Vec<Vec<f64>>, noise_sigma: f64) -> Self {
        Self {
            schedule,
            values,
            noise_sigma,
        }
    }

    fn validate(&self, n_steps: usize) -> Result<()> {
        self.schedule.check_series(&self.values, n_steps)?;
        if self.values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config(
                "observations contain non-finite values".into(),
            ));
        }
        Ok(())
    }
}

/// Inverse background covariance `B^{-1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Covariance {
    /// `B^{-1} v = alpha v`
    ScaledIdentity { alpha: f64 },
    /// `B^{-1} v = w * v` componentwise
    Diagonal { weights: Vec<f64> },
    /// `B^{-1} v = (I + gamma A_h) v`
    LaplacianForm { gamma: f64 },
}

impl Default for Covariance {
    fn default() -> Self {
        Covariance::ScaledIdentity { alpha: 1.0 }
    }
}

impl Covariance {
    pub fn validate(&self, grid: &Grid) -> Result<()> {
        match self {
            Covariance::ScaledIdentity { alpha } if !(*alpha > 0.0 && alpha.is_finite()) => Err(
                Error::Config(format!("covariance alpha must be positive, got {alpha}")),
            ),
            Covariance::Diagonal { weights } => {
                check_len("covariance weights", grid.node_count(), weights.len())?;
                if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
                    return Err(Error::Config("covariance weights must be positive".into()));
                }
                Ok(())
            }
            Covariance::LaplacianForm { gamma } if !(*gamma >= 0.0 && gamma.is_finite()) => {
                Err(Error::Config(format!(
                    "covariance gamma must be non-negative, got {gamma}"
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn apply_inverse(&self, op: &DiscreteOperator, v: &[f64]) -> Vec<f64> {
        match self {
            Covariance::ScaledIdentity { alpha } => v.iter().map(|x| alpha * x).collect(),
            Covariance::Diagonal { weights } => v.iter().zip(weights).map(|(x, w)| w * x).collect(),
            Covariance::LaplacianForm { gamma } => {
                let av = op.apply(v);
                v.iter().zip(av).map(|(x, a)| x + gamma * a).collect()
            }
        }
    }

    /// Coercivity constant: `<B^{-1} v, v> >= kappa |v|^2`.
    pub fn kappa(&self) -> f64 {
        match self {
            Covariance::ScaledIdentity { alpha } => *alpha,
            Covariance::Diagonal { weights } => {
                weights.iter().copied().fold(f64::INFINITY, f64::min)
            }
            Covariance::LaplacianForm { .. } => 1.0,
        }
    }
}

/// The admissible set `{u : int |u|^beta <= b}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub beta: f64,
    pub b: f64,
}

impl Default for ConstraintSpec {
    fn default() -> Self {
        Self { beta: 6.5, b: 1.0 }
    }
}

impl ConstraintSpec {
    pub fn new(beta: f64, b: f64) -> Result<Self> {
        let spec = Self { beta, b };
        spec.validate(1)?;
        Ok(spec)
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.beta > 4.0 && self.beta > dim as f64) || !self.beta.is_finite() {
            return Err(Error::Config(format!(
                "constraint exponent beta must exceed max(4, d), got {}",
                self.beta
            )));
        }
        if !(self.b > 0.0) || !self.b.is_finite() {
            return Err(Error::Config(format!(
                "ball radius b must be positive, got {}",
                self.b
            )));
        }
        Ok(())
    }

    /// `psi(u) = b - int |u|^beta`
    pub fn value(&self, grid: &Grid, u: &[f64]) -> Result<f64> {
        Ok(self.b - grid.lp_integral(u, self.beta)?)
    }

    /// L2 representer of `psi'(u)`: `-beta |u|^{beta-2} u`.
    pub fn gradient(&self, grid: &Grid, u: &[f64]) -> Result<Vec<f64>> {
        check_len("constraint gradient", grid.node_count(), u.len())?;
        if self.beta < 2.0 {
            return Err(Error::Config(format!(
                "exponent beta must be >= 2, got {}",
                self.beta
            )));
        }
        Ok(u.iter()
            .map(|&x| -self.beta * x.abs().powf(self.beta - 2.0) * x)
            .collect())
    }

    /// `-psi''(u)[h,h] = beta (beta-1) int |u|^{beta-2} h^2`.
    pub fn curvature(&self, grid: &Grid, u: &[f64], h: &[f64]) -> f64 {
        self.beta
            * (self.beta - 1.0)
            * grid.quad_weight()
            * u.iter()
                .zip(h)
                .map(|(&x, &d)| x.abs().powf(self.beta - 2.0) * d * d)
                .sum::<f64>()
    }
}

/// How the pointwise coercivity condition is read on the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginMode {
    /// `D(x) - nu g''(y)` with `D` the discrete delta density at sampled levels.
    #[default]
    DeltaDensity,
    /// Drop the delta term and require `-nu g''(y) >= 0` off observation nodes.
    Conservative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub misfit: f64,
    pub background: f64,
    pub total: f64,
}

/// State, residuals and cost at one control.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub state: StateTrajectory,
    /// `residuals[k][i] = y^{m_i}(x_k) - z_o(x_k, t_{m_i})`
    pub residuals: Vec<Vec<f64>>,
    pub cost: CostBreakdown,
}

/// Everything needed to evaluate second-order forms at a fixed control.
#[derive(Debug, Clone)]
pub struct SecondOrderPoint {
    pub control: Vec<f64>,
    pub evaluation: Evaluation,
    pub adjoint: AdjointSolution,
}

#[derive(Debug, Clone)]
pub struct AssimilationProblem {
    propagator: Propagator,
    nonlinearity: Nonlinearity,
    observations: ObservationSet,
    covariance: Covariance,
    background: Vec<f64>,
    constraint: ConstraintSpec,
}

impl AssimilationProblem {
    pub fn new(
        propagator: Propagator,
        nonlinearity: Nonlinearity,
        observations: ObservationSet,
        covariance: Covariance,
        background: Vec<f64>,
        constraint: ConstraintSpec,
    ) -> Result<Self> {
        let grid = *propagator.grid();
        nonlinearity.validate()?;
        observations.validate(propagator.time().n_steps())?;
        for &k in &observations.schedule.points {
            crate::tangent::PointSource::new(&grid, k)?;
        }
        covariance.validate(&grid)?;
        check_len("background", grid.node_count(), background.len())?;
        constraint.validate(grid.dim())?;
        Ok(Self {
            propagator,
            nonlinearity,
            observations,
            covariance,
            background,
            constraint,
        })
    }

    pub fn grid(&self) -> &Grid {
        self.propagator.grid()
    }

    pub fn propagator(&self) -> &Propagator {
        &self.propagator
    }

    pub fn nonlinearity(&self) -> &Nonlinearity {
        &self.nonlinearity
    }

    pub fn observations(&self) -> &ObservationSet {
        &self.observations
    }

    pub fn covariance(&self) -> &Covariance {
        &self.covariance
    }

    pub fn background(&self) -> &[f64] {
        &self.background
    }

    pub fn constraint(&self) -> &ConstraintSpec {
        &self.constraint
    }

    pub fn node_count(&self) -> usize {
        self.grid().node_count()
    }

    pub fn with_background(mut self, background: Vec<f64>) -> Result<Self> {
        check_len("background", self.node_count(), background.len())?;
        self.background = background;
        Ok(self)
    }

    pub fn with_constraint(mut self, constraint: ConstraintSpec) -> Result<Self> {
        constraint.validate(self.grid().dim())?;
        self.constraint = constraint;
        Ok(self)
    }

    pub fn with_observation_values(mut self, values: Vec<Vec<f64>>) -> Result<Self> {
        self.observations.values = values;
        self.observations
            .validate(self.propagator.time().n_steps())?;
        Ok(self)
    }

    fn n_steps(&self) -> usize {
        self.propagator.time().n_steps()
    }

    fn dt(&self) -> f64 {
        self.propagator.time().dt()
    }

    /// Forward solve plus cost terms.
    pub fn evaluate(&self, u: &[f64]) -> Result<Evaluation> {
        check_len("control", self.node_count(), u.len())?;
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate(
                "control contains non-finite values".into(),
            ));
        }
        let state = self.propagator.solve_semilinear(u, &self.nonlinearity)?;
        let sched = &self.observations.schedule;
        let observed = sched.observe(&state, self.n_steps());
        let residuals: Vec<Vec<f64>> = observed
            .iter()
            .zip(&self.observations.values)
            .map(|(y, z)| y.iter().zip(z).map(|(a, b)| a - b).collect())
            .collect();
        let dt = self.dt();
        let misfit = 0.5
            * (0..sched.n_samples(self.n_steps()))
                .map(|i| dt * residuals.iter().map(|r| r[i] * r[i]).sum::<f64>())
                .sum::<f64>();
        let background = 0.5 * self.background_form(u);
        Ok(Evaluation {
            state,
            residuals,
            cost: CostBreakdown {
                misfit,
                background,
                total: misfit + background,
            },
        })
    }

    fn background_form(&self, u: &[f64]) -> f64 {
        let d: Vec<f64> = u.iter().zip(&self.background).map(|(a, b)| a - b).collect();
        let bd = self
            .covariance
            .apply_inverse(self.propagator.operator(), &d);
        self.grid().ip(&bd, &d)
    }

    pub fn evaluate_cost(&self, u: &[f64]) -> Result<f64> {
        Ok(self.evaluate(u)?.cost.total)
    }

    pub fn cost_breakdown(&self, u: &[f64]) -> Result<CostBreakdown> {
        Ok(self.evaluate(u)?.cost)
    }

    pub fn adjoint(&self, eval: &Evaluation) -> Result<AdjointSolution> {
        solve_adjoint(
            &self.propagator,
            &eval.state,
            &self.nonlinearity,
            &self.observations.schedule,
            &eval.residuals,
        )
    }

    /// `grad f(u) = p^0 + B^{-1}(u - u_b)` together with the evaluation it used.
    pub fn cost_and_gradient(&self, u: &[f64]) -> Result<(Evaluation, Vec<f64>)> {
        let eval = self.evaluate(u)?;
        let adj = self.adjoint(&eval)?;
        let grad = self.gradient_from_adjoint(u, &adj);
        Ok((eval, grad))
    }

    fn gradient_from_adjoint(&self, u: &[f64], adj: &AdjointSolution) -> Vec<f64> {
        let d: Vec<f64> = u.iter().zip(&self.background).map(|(a, b)| a - b).collect();
        let bd = self
            .covariance
            .apply_inverse(self.propagator.operator(), &d);
        adj.p.initial().iter().zip(bd).map(|(p, b)| p + b).collect()
    }

    /// L2 representer of `f'(u)`.
    pub fn evaluate_gradient(&self, u: &[f64]) -> Result<Vec<f64>> {
        Ok(self.cost_and_gradient(u)?.1)
    }

    pub fn constraint_value(&self, u: &[f64]) -> Result<f64> {
        self.constraint.value(self.grid(), u)
    }

    pub fn constraint_gradient(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.constraint.gradient(self.grid(), u)
    }

    /// Solves the state and adjoint once so that many directions can be tested.
    pub fn second_order_point(&self, u: &[f64]) -> Result<SecondOrderPoint> {
        let evaluation = self.evaluate(u)?;
        let adjoint = self.adjoint(&evaluation)?;
        Ok(SecondOrderPoint {
            control: u.to_vec(),
            evaluation,
            adjoint,
        })
    }

    pub fn tangent(&self, point: &SecondOrderPoint, h: &[f64]) -> Result<StateTrajectory> {
        solve_tangent(
            &self.propagator,
            &point.evaluation.state,
            &self.nonlinearity,
            h,
        )
    }

    /// Symmetric bilinear form of `L_uu(u, lambda)` for two directions with
    /// precomputed tangents.
    pub fn lagrangian_hessian_bilinear(
        &self,
        point: &SecondOrderPoint,
        lambda: f64,
        (h1, eta1): (&[f64], &StateTrajectory),
        (h2, eta2): (&[f64], &StateTrajectory),
    ) -> f64 {
        let grid = self.grid();
        let dt = self.dt();
        let steps = self.n_steps();
        let sched = &self.observations.schedule;

        let mut obs = 0.0;
        for m in sched.sampled_steps(steps) {
            let (a, b) = (eta1.snapshot(m), eta2.snapshot(m));
            obs += dt * sched.points.iter().map(|&k| a[k] * b[k]).sum::<f64>();
        }
        let bh = self
            .covariance
            .apply_inverse(self.propagator.operator(), h2);
        let background = grid.ip(h1, &bh);

        let mut curvature = 0.0;
        if !self.nonlinearity.is_zero() {
            let y = &point.evaluation.state;
            let nu = &point.adjoint.nu;
            for m in 0..steps {
                let s: f64 = (0..grid.node_count())
                    .map(|j| {
                        nu.snapshot(m)[j]
                            * self.nonlinearity.g_yy(y.snapshot(m)[j])
                            * eta1.snapshot(m)[j]
                            * eta2.snapshot(m)[j]
                    })
                    .sum();
                curvature += dt * grid.quad_weight() * s;
            }
        }

        let penalty = if lambda != 0.0 {
            let beta = self.constraint.beta;
            lambda
                * beta
                * (beta - 1.0)
                * grid.quad_weight()
                * point
                    .control
                    .iter()
                    .zip(h1.iter().zip(h2))
                    .map(|(&x, (&a, &b))| x.abs().powf(beta - 2.0) * a * b)
                    .sum::<f64>()
        } else {
            0.0
        };
        obs + background - curvature + penalty
    }

    /// `L_uu(u, lambda)[h, h]` at a prepared point.
    pub fn lagrangian_form_at(
        &self,
        point: &SecondOrderPoint,
        lambda: f64,
        h: &[f64],
    ) -> Result<f64> {
        if lambda < 0.0 {
            return Err(Error::MultiplierSign(lambda));
        }
        let eta = self.tangent(point, h)?;
        Ok(self.lagrangian_hessian_bilinear(point, lambda, (h, &eta), (h, &eta)))
    }

    /// `f''(u)[h, h]`.
    pub fn hessian_quadratic_form(&self, u: &[f64], h: &[f64]) -> Result<f64> {
        let point = self.second_order_point(u)?;
        self.lagrangian_form_at(&point, 0.0, h)
    }

    /// `f''(u)[h, h] + lambda beta (beta-1) int |u|^{beta-2} h^2`.
    pub fn lagrangian_hessian_form(&self, u: &[f64], lambda: f64, h: &[f64]) -> Result<f64> {
        if lambda < 0.0 {
            return Err(Error::MultiplierSign(lambda));
        }
        let point = self.second_order_point(u)?;
        self.lagrangian_form_at(&point, lambda, h)
    }

    /// Pointwise coefficient of `(eta^m_j)^2` in `L_uu`, scaled by `1/(dt h^dim)`,
    /// for `m < n_steps`: `D_j [m sampled] - nu^m_j g''(y^m_j)`.
    pub fn coercivity_field(&self, point: &SecondOrderPoint) -> Vec<Vec<f64>> {
        let grid = self.grid();
        let steps = self.n_steps();
        let sched = &self.observations.schedule;
        let density = sched.density(grid);
        let y = &point.evaluation.state;
        let nu = &point.adjoint.nu;
        (0..steps)
            .map(|m| {
                let sampled = sched.is_sampled(m, steps);
                (0..grid.node_count())
                    .map(|j| {
                        let d = if sampled { density[j] } else { 0.0 };
                        d - nu.snapshot(m)[j] * self.nonlinearity.g_yy(y.snapshot(m)[j])
                    })
                    .collect()
            })
            .collect()
    }

    pub fn coercivity_margin_at(&self, point: &SecondOrderPoint, mode: MarginMode) -> f64 {
        match mode {
            MarginMode::DeltaDensity => self
                .coercivity_field(point)
                .iter()
                .flatten()
                .copied()
                .fold(f64::INFINITY, f64::min),
            MarginMode::Conservative => {
                let density = self.observations.schedule.density(self.grid());
                let y = &point.evaluation.state;
                let nu = &point.adjoint.nu;
                let mut min = f64::INFINITY;
                for m in 0..self.n_steps() {
                    for (j, &d) in density.iter().enumerate() {
                        if d == 0.0 {
                            let c = -nu.snapshot(m)[j] * self.nonlinearity.g_yy(y.snapshot(m)[j]);
                            min = min.min(c);
                        }
                    }
                }
                if min.is_finite() {
                    min
                } else {
                    0.0
                }
            }
        }
    }

    /// Smallest pointwise coefficient; non-negative means `L_uu >= kappa_B |h|^2`.
    pub fn coercivity_margin(&self, u: &[f64]) -> Result<f64> {
        Ok(self.coercivity_margin_at(&self.second_order_point(u)?, MarginMode::DeltaDensity))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::TimeGrid;
    use crate::grid::DiffusionField;
    use crate::sparse::SolverKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize, a: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-a..a)).collect()
    }

    fn problem(dim: usize, g: Nonlinearity, cov: Covariance, seed: u64) -> AssimilationProblem {
        let grid = Grid::new(dim, 6).unwrap();
        let op = DiscreteOperator::assemble(&grid, &DiffusionField::constant(1.0)).unwrap();
        let prop = Propagator::new(op, TimeGrid::new(0.1, 10).unwrap(), SolverKind::Auto).unwrap();
        let n = grid.node_count();
        let sched = ObservationSchedule::new(&grid, vec![1, n / 2, n - 2], 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..3).map(|_| rand_vec(&mut rng, 5, 1.0)).collect();
        let ub = rand_vec(&mut rng, n, 0.5);
        AssimilationProblem::new(
            prop,
            g,
            ObservationSet::new(sched, values, 0.0),
            cov,
            ub,
            ConstraintSpec::new(6.0, 10.0).unwrap(),
        )
        .unwrap()
    }

    fn covariances(n: usize) -> Vec<Covariance> {
        vec![
            Covariance::ScaledIdentity { alpha: 0.7 },
            Covariance::Diagonal {
                weights: (0..n).map(|i| 0.5 + 0.1 * i as f64).collect(),
            },
            Covariance::LaplacianForm { gamma: 0.01 },
        ]
    }

    #[test]
    fn cost_matches_independent_summation() {
        let p = problem(
            1,
            Nonlinearity::eps_sin(0.2),
            Covariance::ScaledIdentity { alpha: 0.3 },
            1,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let u = rand_vec(&mut rng, 6, 1.0);
        let y = p
            .propagator()
            .solve_semilinear(&u, p.nonlinearity())
            .unwrap();
        let dt = 0.01;
        let mut brute = 0.0;
        for (k, &node) in p.observations().schedule.points.iter().enumerate() {
            for i in 0..5 {
                let r = y.snapshot(2 * i)[node] - p.observations().values[k][i];
                brute += 0.5 * dt * r * r;
            }
        }
        let h = 1.0 / 7.0;
        for j in 0..6 {
            let d = u[j] - p.background()[j];
            brute += 0.5 * 0.3 * d * d * h;
        }
        let got = p.evaluate_cost(&u).unwrap();
        assert!((got - brute).abs() <= 1e-13 * brute);
    }

    #[test]
    fn perfect_fit_has_zero_cost_and_gradient() {
        let p = problem(
            2,
            Nonlinearity::eps_sin(0.1),
            Covariance::ScaledIdentity { alpha: 1.0 },
            2,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = rand_vec(&mut rng, 36, 1.0);
        let y = p
            .propagator()
            .solve_semilinear(&truth, p.nonlinearity())
            .unwrap();
        let z = p.observations().schedule.observe(&y, 10);
        let p = p
            .with_observation_values(z)
            .unwrap()
            .with_background(truth.clone())
            .unwrap();
        assert_eq!(p.evaluate_cost(&truth).unwrap(), 0.0);
        assert!(p
            .evaluate_gradient(&truth)
            .unwrap()
            .iter()
            .all(|&g| g == 0.0));
    }

    #[test]
    fn zero_data_zero_control() {
        let p = problem(
            1,
            Nonlinearity::Zero,
            Covariance::ScaledIdentity { alpha: 1.0 },
            2,
        )
        .with_observation_values(vec![vec![0.0; 5]; 3])
        .unwrap()
        .with_background(vec![0.0; 6])
        .unwrap();
        assert_eq!(p.evaluate_cost(&[0.0; 6]).unwrap(), 0.0);
    }

    #[test]
    fn covariance_symmetry_and_coercivity() {
        let grid = Grid::new(2, 5).unwrap();
        let op = DiscreteOperator::assemble(&grid, &DiffusionField::constant(1.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for cov in covariances(25) {
            cov.validate(&grid).unwrap();
            for _ in 0..50 {
                let v = rand_vec(&mut rng, 25, 1.0);
                let w = rand_vec(&mut rng, 25, 1.0);
                let a = grid.ip(&cov.apply_inverse(&op, &v), &w);
                let b = grid.ip(&v, &cov.apply_inverse(&op, &w));
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
                let q = grid.ip(&cov.apply_inverse(&op, &v), &v);
                assert!(q >= cov.kappa() * grid.ip(&v, &v) * (1.0 - 1e-12));
            }
        }
        assert!(Covariance::Diagonal {
            weights: vec![1.0; 3]
        }
        .validate(&grid)
        .is_err());
        assert!(Covariance::ScaledIdentity { alpha: 0.0 }
            .validate(&grid)
            .is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        for dim in [1, 2] {
            for g in [Nonlinearity::Zero, Nonlinearity::eps_sin(0.1)] {
                let n = if dim == 1 { 6 } else { 36 };
                for cov in covariances(n) {
                    let p = problem(dim, g, cov, 5);
                    let mut rng = ChaCha8Rng::seed_from_u64(6);
                    for _ in 0..3 {
                        let u = rand_vec(&mut rng, n, 2.0);
                        let h = rand_vec(&mut rng, n, 1.0);
                        let grad = p.evaluate_gradient(&u).unwrap();
                        let dd = p.grid().ip(&grad, &h);
                        let eps = 1e-5;
                        let up: Vec<f64> = u.iter().zip(&h).map(|(a, b)| a + eps * b).collect();
                        let um: Vec<f64> = u.iter().zip(&h).map(|(a, b)| a - eps * b).collect();
                        let fd = (p.evaluate_cost(&up).unwrap() - p.evaluate_cost(&um).unwrap())
                            / (2.0 * eps);
                        assert!((dd - fd).abs() <= 1e-5 * dd.abs(), "{dd} vs {fd}");
                    }
                }
            }
        }
    }

    #[test]
    fn linear_gradient_is_affine() {
        let p = problem(
            1,
            Nonlinearity::Zero,
            Covariance::LaplacianForm { gamma: 0.05 },
            7,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let u1 = rand_vec(&mut rng, 6, 1.0);
        let u2 = rand_vec(&mut rng, 6, 1.0);
        let s: Vec<f64> = u1.iter().zip(&u2).map(|(a, b)| a + b).collect();
        let g12 = p.evaluate_gradient(&s).unwrap();
        let g1 = p.evaluate_gradient(&u1).unwrap();
        let g2 = p.evaluate_gradient(&u2).unwrap();
        let g0 = p.evaluate_gradient(&[0.0; 6]).unwrap();
        for j in 0..6 {
            assert!((g12[j] - g1[j] - g2[j] + g0[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn constraint_calculus() {
        let grid = Grid::new(1, 10).unwrap();
        let spec = ConstraintSpec::new(6.0, 2.0).unwrap();
        assert_eq!(spec.value(&grid, &[0.0; 10]).unwrap(), 2.0);
        assert!(spec
            .gradient(&grid, &[0.0; 10])
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let u = rand_vec(&mut rng, 10, 1.5);
        let scale = (2.0 / grid.lp_integral(&u, 6.0).unwrap()).powf(1.0 / 6.0);
        let on_ball: Vec<f64> = u.iter().map(|x| x * scale).collect();
        assert!(spec.value(&grid, &on_ball).unwrap().abs() < 1e-13);

        let brute = 2.0 - grid.h() * u.iter().map(|x| x.abs().powi(6)).sum::<f64>();
        assert!((spec.value(&grid, &u).unwrap() - brute).abs() < 1e-13);

        let h = rand_vec(&mut rng, 10, 1.0);
        let rep = spec.gradient(&grid, &u).unwrap();
        let eps = 1e-6;
        let up: Vec<f64> = u.iter().zip(&h).map(|(a, b)| a + eps * b).collect();
        let um: Vec<f64> = u.iter().zip(&h).map(|(a, b)| a - eps * b).collect();
        let fd = (spec.value(&grid, &up).unwrap() - spec.value(&grid, &um).unwrap()) / (2.0 * eps);
        let an = grid.ip(&rep, &h);
        assert!((fd - an).abs() <= 1e-6 * an.abs());

        let neg: Vec<f64> = u.iter().map(|x| -x).collect();
        let rep_neg = spec.gradient(&grid, &neg).unwrap();
        for (a, b) in rep.iter().zip(&rep_neg) {
            assert_eq!(*a, -*b);
        }
        assert!(ConstraintSpec::new(3.0, 1.0).is_err());
        assert!(ConstraintSpec::new(6.0, 0.0).is_err());
    }

    #[test]
    fn hessian_form_matches_second_differences() {
        for g in [Nonlinearity::Zero, Nonlinearity::eps_sin(0.3)] {
            let p = problem(2, g, Covariance::ScaledIdentity { alpha: 0.5 }, 9);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            for _ in 0..3 {
                let u = rand_vec(&mut rng, 36, 3.0);
                let h = rand_vec(&mut rng, 36, 1.0);
                let q = p.hessian_quadratic_form(&u, &h).unwrap();
                let eps = 1e-3;
                let up: Vec<f64> = u.iter().zip(&h).map(|(a, b)| a + eps * b).collect();
                let um: Vec<f64> = u.iter().zip(&h).map(|(a, b)| a - eps * b).collect();
                let fd = (p.evaluate_cost(&up).unwrap() - 2.0 * p.evaluate_cost(&u).unwrap()
                    + p.evaluate_cost(&um).unwrap())
                    / (eps * eps);
                assert!((q - fd).abs() <= 1e-4 * q.abs(), "{q} vs {fd}");
            }
            assert_eq!(
                p.hessian_quadratic_form(&[0.5; 36], &[0.0; 36]).unwrap(),
                0.0
            );
        }
    }

    #[test]
    fn lagrangian_form_cases() {
        let p = problem(
            1,
            Nonlinearity::eps_sin(0.2),
            Covariance::ScaledIdentity { alpha: 1.0 },
            11,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u = rand_vec(&mut rng, 6, 1.0);
        let h = rand_vec(&mut rng, 6, 1.0);
        let f2 = p.hessian_quadratic_form(&u, &h).unwrap();
        assert_eq!(p.lagrangian_hessian_form(&u, 0.0, &h).unwrap(), f2);
        assert_eq!(
            p.lagrangian_hessian_form(&[0.0; 6], 1.0, &h).unwrap(),
            p.hessian_quadratic_form(&[0.0; 6], &h).unwrap()
        );
        assert!(matches!(
            p.lagrangian_hessian_form(&u, -1.0, &h),
            Err(Error::MultiplierSign(_))
        ));

        // finite differences of u -> f(u) - lambda psi(u)
        let lambda = 0.7;
        let lag = |v: &[f64]| p.evaluate_cost(v).unwrap() - lambda * p.constraint_value(v).unwrap();
        let eps = 1e-3;
        let up: Vec<f64> = u.iter().zip(&h).map(|(a, b)| a + eps * b).collect();
        let um: Vec<f64> = u.iter().zip(&h).map(|(a, b)| a - eps * b).collect();
        let fd = (lag(&up) - 2.0 * lag(&u) + lag(&um)) / (eps * eps);
        let q = p.lagrangian_hessian_form(&u, lambda, &h).unwrap();
        assert!((q - fd).abs() <= 1e-4 * q.abs());
    }

    #[test]
    fn coercivity_margin_cases() {
        let p = problem(
            1,
            Nonlinearity::Zero,
            Covariance::ScaledIdentity { alpha: 1.0 },
            12,
        );
        assert_eq!(p.coercivity_margin(&[0.3; 6]).unwrap(), 0.0);

        // zero residuals: p = 0 so the observed node carries exactly the delta density
        let truth = vec![0.2; 6];
        let g = Nonlinearity::eps_sin(0.1);
        let p = problem(1, g, Covariance::ScaledIdentity { alpha: 1.0 }, 12);
        let y = p.propagator().solve_semilinear(&truth, &g).unwrap();
        let z = p.observations().schedule.observe(&y, 10);
        let p = p.with_observation_values(z).unwrap();
        let point = p.second_order_point(&truth).unwrap();
        let field = p.coercivity_field(&point);
        let node = p.observations().schedule.points[0];
        assert_eq!(field[0][node], 7.0);

        // margin >= -eps max|nu| in general
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let u = rand_vec(&mut rng, 6, 2.0);
        let p = problem(1, g, Covariance::ScaledIdentity { alpha: 1.0 }, 13);
        let point = p.second_order_point(&u).unwrap();
        let numax = point
            .adjoint
            .nu
            .snapshots()
            .iter()
            .flatten()
            .fold(0.0f64, |a, b| a.max(b.abs()));
        assert!(p.coercivity_margin_at(&point, MarginMode::DeltaDensity) >= -0.1 * numax);
        assert!(p.coercivity_margin_at(&point, MarginMode::Conservative) >= -0.1 * numax);
    }

    #[test]
    fn linear_problem_is_uniformly_convex() {
        let p = problem(
            2,
            Nonlinearity::Zero,
            Covariance::Diagonal {
                weights: vec![0.4; 36],
            },
            14,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let u = rand_vec(&mut rng, 36, 1.0);
        for _ in 0..100 {
            let h = rand_vec(&mut rng, 36, 1.0);
            let q = p.hessian_quadratic_form(&u, &h).unwrap();
            assert!(q >= 0.4 * p.grid().ip(&h, &h) * (1.0 - 1e-12));
        }
    }

    #[test]
    fn polarization_is_symmetric() {
        let p = problem(
            1,
            Nonlinearity::Zero,
            Covariance::LaplacianForm { gamma: 0.1 },
            15,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let u = rand_vec(&mut rng, 6, 1.0);
        let q = |v: &[f64]| p.hessian_quadratic_form(&u, v).unwrap();
        for _ in 0..10 {
            let h = rand_vec(&mut rng, 6, 1.0);
            let k = rand_vec(&mut rng, 6, 1.0);
            let add = |a: &[f64], b: &[f64], s: f64| -> Vec<f64> {
                a.iter().zip(b).map(|(x, y)| x + s * y).collect()
            };
            let hk = 0.25 * (q(&add(&h, &k, 1.0)) - q(&add(&h, &k, -1.0)));
            let kh = 0.25 * (q(&add(&k, &h, 1.0)) - q(&add(&k, &h, -1.0)));
            assert!((hk - kh).abs() <= 1e-10 * hk.abs().max(1.0));
        }
    }
}
