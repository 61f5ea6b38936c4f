//! Time stepping of the state equation `y_t + A y + g(y) = 0`, `y(0) = u`.
//!
//! The linear part is implicit Euler, the nonlinearity is explicit:
//! `(I + dt A) y^{m+1} = y^m - dt g(y^m)`. The linear solver additionally
//! accepts a source `l` evaluated at the new time level.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::grid::{DiscreteOperator, Grid};
use crate::sparse::{SolverKind, SpdSolver};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    final_time: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(final_time: f64, n_steps: usize) -> Result<Self> {
        if !(final_time > 0.0) || !final_time.is_finite() {
            return Err(Error::Config(format!(
                "final time must be positive, got {final_time}"
            )));
        }
        if n_steps == 0 {
            return Err(Error::Config("need at least one time step".into()));
        }
        Ok(Self {
            final_time,
            n_steps,
        })
    }

    pub fn final_time(&self) -> f64 {
        self.final_time
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.final_time / self.n_steps as f64
    }

    pub fn time(&self, m: usize) -> f64 {
        m as f64 * self.dt()
    }
}

/// Pointwise nonlinearity `g` with its first two derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Nonlinearity {
    /// Linear state equation.
    #[default]
    Zero,
    /// `g(y) = epsilon * sin(y)`.
    EpsSin { epsilon: f64 },
}

impl Nonlinearity {
    pub fn eps_sin(epsilon: f64) -> Self {
        Nonlinearity::EpsSin { epsilon }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Nonlinearity::Zero)
    }

    pub fn g(&self, y: f64) -> f64 {
        match *self {
            Nonlinearity::Zero => 0.0,
            Nonlinearity::EpsSin { epsilon } => epsilon * y.sin(),
        }
    }

    pub fn g_y(&self, y: f64) -> f64 {
        match *self {
            Nonlinearity::Zero => 0.0,
            Nonlinearity::EpsSin { epsilon } => epsilon * y.cos(),
        }
    }

    pub fn g_yy(&self, y: f64) -> f64 {
        match *self {
            Nonlinearity::Zero => 0.0,
            Nonlinearity::EpsSin { epsilon } => -epsilon * y.sin(),
        }
    }

    /// Uniform bound on `|g|`.
    pub fn bound_g(&self) -> f64 {
        self.epsilon()
    }

    /// Uniform bound on `|g''|`.
    pub fn bound_gyy(&self) -> f64 {
        self.epsilon()
    }

    /// Lipschitz constant of `g''`.
    pub fn lipschitz_gyy(&self) -> f64 {
        self.epsilon()
    }

    /// Lipschitz constant of `g` itself.
    pub fn lipschitz_g(&self) -> f64 {
        self.epsilon()
    }

    fn epsilon(&self) -> f64 {
        match *self {
            Nonlinearity::Zero => 0.0,
            Nonlinearity::EpsSin { epsilon } => epsilon.abs(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Nonlinearity::EpsSin { epsilon } if !epsilon.is_finite() => Err(Error::Config(
                format!("epsilon must be finite, got {epsilon}"),
            )),
            _ => Ok(()),
        }
    }
}

/// Nodal values at every time level `0..=n_steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTrajectory {
    snapshots: Vec<Vec<f64>>,
}

impl StateTrajectory {
    pub fn new(snapshots: Vec<Vec<f64>>) -> Self {
        Self { snapshots }
    }

    pub fn zeros(n_levels: usize, node_count: usize) -> Self {
        Self {
            snapshots: vec![vec![0.0; node_count]; n_levels],
        }
    }

    pub fn n_levels(&self) -> usize {
        self.snapshots.len()
    }

    pub fn node_count(&self) -> usize {
        self.snapshots.first().map_or(0, Vec::len)
    }

    pub fn snapshot(&self, m: usize) -> &[f64] {
        &self.snapshots[m]
    }

    pub fn snapshots(&self) -> &[Vec<f64>] {
        &self.snapshots
    }

    pub fn initial(&self) -> &[f64] {
        &self.snapshots[0]
    }

    pub fn last(&self) -> &[f64] {
        self.snapshots.last().expect("empty trajectory")
    }

    pub fn into_snapshots(self) -> Vec<Vec<f64>> {
        self.snapshots
    }

    /// Largest nodal difference over all levels.
    pub fn max_abs_diff(&self, other: &StateTrajectory) -> f64 {
        self.snapshots
            .iter()
            .zip(&other.snapshots)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    pub(crate) fn check_shape(
        &self,
        what: &'static str,
        levels: usize,
        nodes: usize,
    ) -> Result<()> {
        check_len(what, levels, self.n_levels())?;
        check_len(what, nodes, self.node_count())
    }
}

/// Implicit Euler propagator with `I + dt A_h` factored once.
#[derive(Debug, Clone)]
pub struct Propagator {
    operator: DiscreteOperator,
    time: TimeGrid,
    solver: SpdSolver,
}

impl Propagator {
    pub fn new(operator: DiscreteOperator, time: TimeGrid, kind: SolverKind) -> Result<Self> {
        let step_matrix = operator.matrix().shifted(1.0, time.dt());
        let solver = SpdSolver::new(&step_matrix, kind)?;
        Ok(Self {
            operator,
            time,
            solver,
        })
    }

    pub fn grid(&self) -> &Grid {
        self.operator.grid()
    }

    pub fn operator(&self) -> &DiscreteOperator {
        &self.operator
    }

    pub fn time(&self) -> &TimeGrid {
        &self.time
    }

    pub fn node_count(&self) -> usize {
        self.grid().node_count()
    }

    /// `(I + dt A)^{-1} b`
    pub fn step(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.solver.solve(b)
    }

    /// `(I + dt A)^{-T} b`
    pub fn step_transpose(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.solver.solve_transpose(b)
    }

    /// `(I + dt A) y^{m+1} = y^m + dt l^{m+1}`, `y^0 = u0`.
    pub fn solve_linear(
        &self,
        u0: &[f64],
        source: Option<&StateTrajectory>,
    ) -> Result<StateTrajectory> {
        let n = self.node_count();
        let steps = self.time.n_steps();
        check_len("initial condition", n, u0.len())?;
        if let Some(s) = source {
            s.check_shape("source", steps + 1, n)?;
        }
        let dt = self.time.dt();
        let mut snaps = Vec::with_capacity(steps + 1);
        snaps.push(u0.to_vec());
        for m in 0..steps {
            let prev: &Vec<f64> = &snaps[m];
            let next = match source {
                Some(s) => {
                    let rhs: Vec<f64> = prev
                        .iter()
                        .zip(s.snapshot(m + 1))
                        .map(|(y, l)| y + dt * l)
                        .collect();
                    self.step(&rhs)?
                }
                None => self.step(prev)?,
            };
            snaps.push(next);
        }
        Ok(StateTrajectory::new(snaps))
    }

    /// IMEX scheme `(I + dt A) y^{m+1} = y^m - dt g(y^m)`.
    pub fn solve_semilinear(&self, u0: &[f64], g: &Nonlinearity) -> Result<StateTrajectory> {
        let n = self.node_count();
        check_len("initial condition", n, u0.len())?;
        let dt = self.time.dt();
        let steps = self.time.n_steps();
        let mut snaps = Vec::with_capacity(steps + 1);
        snaps.push(u0.to_vec());
        for m in 0..steps {
            let prev: &Vec<f64> = &snaps[m];
            let rhs: Vec<f64> = prev.iter().map(|&y| y - dt * g.g(y)).collect();
            if rhs.iter().any(|v| !v.is_finite()) {
                return Err(Error::Nonlinearity { step: m });
            }
            snaps.push(self.step(&rhs)?);
        }
        Ok(StateTrajectory::new(snaps))
    }

    /// `sup_m |S(u1)^m - S(u2)^m|_{L2} / |u1 - u2|_{L2}`.
    pub fn lipschitz_probe(&self, u1: &[f64], u2: &[f64], g: &Nonlinearity) -> Result<f64> {
        check_len("lipschitz probe", u1.len(), u2.len())?;
        let grid = self.grid();
        let diff: Vec<f64> = u1.iter().zip(u2).map(|(a, b)| a - b).collect();
        let denom = grid.l2_norm(&diff);
        if denom == 0.0 {
            return Err(Error::Degenerate("lipschitz probe needs u1 != u2".into()));
        }
        let y1 = self.solve_semilinear(u1, g)?;
        let y2 = self.solve_semilinear(u2, g)?;
        let sup = y1
            .snapshots()
            .iter()
            .zip(y2.snapshots())
            .map(|(a, b)| {
                let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
                grid.l2_norm(&d)
            })
            .fold(0.0, f64::max);
        Ok(sup / denom)
    }
}

/// Largest problem the dense oracle accepts.
pub const ORACLE_NODE_LIMIT: usize = 256;

#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub trajectory: StateTrajectory,
    /// Max-norm change between consecutive Picard sweeps.
    pub increments: Vec<f64>,
}

/// Picard iteration on the Duhamel form
/// `y(t) = e^{-tA} u0 - int_0^t e^{-(t-s)A} g(y(s)) ds`,
/// with exact exponentials (from a dense eigendecomposition of `A_h`) and
/// trapezoidal quadrature on the time grid.
pub fn mild_solution_oracle(
    operator: &DiscreteOperator,
    time: &TimeGrid,
    u0: &[f64],
    g: &Nonlinearity,
    picard_iters: usize,
) -> Result<OracleSolution> {
    let n = operator.grid().node_count();
    if n > ORACLE_NODE_LIMIT {
        return Err(Error::Scale {
            nodes: n,
            limit: ORACLE_NODE_LIMIT,
        });
    }
    check_len("initial condition", n, u0.len())?;
    let dense: DMatrix<f64> = operator.to_dense();
    let sym = (&dense + dense.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let basis = &eig.eigenvectors;
    let lambda = &eig.eigenvalues;
    let steps = time.n_steps();
    let dt = time.dt();

    let to_modal = |v: &[f64]| basis.tr_mul(&DVector::from_column_slice(v));
    let from_modal = |c: &DVector<f64>| (basis * c).as_slice().to_vec();
    let decay = |t: f64| DVector::from_iterator(n, lambda.iter().map(|l| (-l * t).exp()));

    let c0 = to_modal(u0);
    let free: Vec<DVector<f64>> = (0..=steps)
        .map(|m| c0.component_mul(&decay(time.time(m))))
        .collect();
    let one_step = decay(dt);

    let mut current: Vec<Vec<f64>> = free.iter().map(from_modal).collect();
    let mut increments = Vec::new();
    if g.is_zero() {
        return Ok(OracleSolution {
            trajectory: StateTrajectory::new(current),
            increments,
        });
    }

    for _ in 0..picard_iters.max(1) {
        let forcing: Vec<DVector<f64>> = current
            .iter()
            .map(|y| {
                let gy: Vec<f64> = y.iter().map(|&v| g.g(v)).collect();
                to_modal(&gy)
            })
            .collect();
        // running[m] = sum_{i<=m} dt e^{-(t_m - t_i)A} G_i; the trapezoid
        // halves the two endpoint contributions
        let mut running = forcing[0].clone() * dt;
        let mut next = Vec::with_capacity(steps + 1);
        next.push(current[0].clone());
        for m in 1..=steps {
            running = running.component_mul(&one_step) + &forcing[m] * dt;
            let endpoints = forcing[0].component_mul(&decay(time.time(m))) + &forcing[m];
            let integral = &running - endpoints * (0.5 * dt);
            next.push(from_modal(&(&free[m] - integral)));
        }
        let inc = next
            .iter()
            .zip(&current)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max);
        if !inc.is_finite() {
            return Err(Error::Oracle(
                "Picard iteration produced non-finite values".into(),
            ));
        }
        if increments.len() >= 3 && inc > 10.0 * increments[increments.len() - 1] {
            return Err(Error::Oracle(format!(
                "Picard iteration diverging (increment {inc:e})"
            )));
        }
        increments.push(inc);
        current = next;
        let scale = current
            .iter()
            .flat_map(|v| v.iter().map(|x| x.abs()))
            .fold(1.0, f64::max);
        if inc < 1e-12 * scale {
            break;
        }
    }
    Ok(OracleSolution {
        trajectory: StateTrajectory::new(current),
        increments,
    })
}
