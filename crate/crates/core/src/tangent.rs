//! First- and second-order tangent models of the IMEX scheme and its exact
//! discrete adjoint.
//!
//! Observations are taken at the time levels `0, stride, 2*stride, ... < n_steps`
//! (left rectangle rule, weight `dt` per sampled level). The adjoint injects the
//! same weights, so the duality
//! `sum_i dt sum_k eta^{m_i}(x_k) r_k^i = <h0, p^0>` holds to round-off.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::forward::{Nonlinearity, Propagator, StateTrajectory};
use crate::grid::Grid;

/// Discrete Dirac measure at a grid node: `e_k / h^dim`, so that
/// `<delta_k, v> = v_k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PointSource {
    pub node_index: usize,
}

impl PointSource {
    pub fn new(grid: &Grid, node_index: usize) -> Result<Self> {
        if node_index >= grid.node_count() {
            return Err(Error::Config(format!(
                "observation node {node_index} outside grid with {} nodes",
                grid.node_count()
            )));
        }
        Ok(Self { node_index })
    }

    pub fn density(&self, grid: &Grid) -> f64 {
        1.0 / grid.quad_weight()
    }

    pub fn to_vector(&self, grid: &Grid) -> Vec<f64> {
        let mut v = vec![0.0; grid.node_count()];
        v[self.node_index] = self.density(grid);
        v
    }
}

/// Observation nodes and the time stride at which they are sampled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationSchedule {
    pub points: Vec<usize>,
    pub stride: usize,
}

impl ObservationSchedule {
    pub fn new(grid: &Grid, points: Vec<usize>, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Config("observation stride must be positive".into()));
        }
        for &p in &points {
            PointSource::new(grid, p)?;
        }
        Ok(Self { points, stride })
    }

    /// Time levels carrying observations.
    pub fn sampled_steps(&self, n_steps: usize) -> impl Iterator<Item = usize> {
        (0..n_steps).step_by(self.stride)
    }

    pub fn n_samples(&self, n_steps: usize) -> usize {
        n_steps.div_ceil(self.stride)
    }

    pub fn is_sampled(&self, m: usize, n_steps: usize) -> bool {
        m < n_steps && m.is_multiple_of(self.stride)
    }

    /// `obs[k][i] = traj^{m_i}(x_k)`.
    pub fn observe(&self, traj: &StateTrajectory, n_steps: usize) -> Vec<Vec<f64>> {
        self.points
            .iter()
            .map(|&k| {
                self.sampled_steps(n_steps)
                    .map(|m| traj.snapshot(m)[k])
                    .collect()
            })
            .collect()
    }

    /// `sum_i dt sum_k traj^{m_i}(x_k) weights[k][i]`.
    pub fn pairing(
        &self,
        traj: &StateTrajectory,
        weights: &[Vec<f64>],
        dt: f64,
        n_steps: usize,
    ) -> f64 {
        let mut total = 0.0;
        for (i, m) in self.sampled_steps(n_steps).enumerate() {
            let snap = traj.snapshot(m);
            let mut s = 0.0;
            for (k, &node) in self.points.iter().enumerate() {
                s += snap[node] * weights[k][i];
            }
            total += dt * s;
        }
        total
    }

    /// Delta density per node (`count / h^dim` at observed nodes, 0 elsewhere).
    pub fn density(&self, grid: &Grid) -> Vec<f64> {
        let mut d = vec![0.0; grid.node_count()];
        for &k in &self.points {
            d[k] += 1.0 / grid.quad_weight();
        }
        d
    }

    pub(crate) fn check_series(&self, series: &[Vec<f64>], n_steps: usize) -> Result<()> {
        check_len("observation series count", self.points.len(), series.len())?;
        let samples = self.n_samples(n_steps);
        for s in series {
            check_len("observation series length", samples, s.len())?;
        }
        Ok(())
    }
}

/// `(I + dt A) eta^{m+1} = eta^m - dt g'(y^m) eta^m`, `eta^0 = h0`.
pub fn solve_tangent(
    prop: &Propagator,
    y: &StateTrajectory,
    g: &Nonlinearity,
    h0: &[f64],
) -> Result<StateTrajectory> {
    let n = prop.node_count();
    let steps = prop.time().n_steps();
    y.check_shape("state trajectory", steps + 1, n)?;
    check_len("tangent direction", n, h0.len())?;
    let dt = prop.time().dt();
    let mut snaps = Vec::with_capacity(steps + 1);
    snaps.push(h0.to_vec());
    for m in 0..steps {
        let eta: &Vec<f64> = &snaps[m];
        let rhs: Vec<f64> = eta
            .iter()
            .zip(y.snapshot(m))
            .map(|(&e, &ym)| e - dt * g.g_y(ym) * e)
            .collect();
        snaps.push(prop.step(&rhs)?);
    }
    Ok(StateTrajectory::new(snaps))
}

/// `(I + dt A) w^{m+1} = w^m - dt [g'(y^m) w^m + g''(y^m) (eta^m)^2]`, `w^0 = 0`.
pub fn solve_second_tangent(
    prop: &Propagator,
    y: &StateTrajectory,
    eta: &StateTrajectory,
    g: &Nonlinearity,
) -> Result<StateTrajectory> {
    let n = prop.node_count();
    let steps = prop.time().n_steps();
    y.check_shape("state trajectory", steps + 1, n)?;
    eta.check_shape("tangent trajectory", steps + 1, n)?;
    let dt = prop.time().dt();
    let mut snaps = Vec::with_capacity(steps + 1);
    snaps.push(vec![0.0; n]);
    for m in 0..steps {
        let w: &Vec<f64> = &snaps[m];
        let rhs: Vec<f64> = (0..n)
            .map(|j| {
                let ym = y.snapshot(m)[j];
                let e = eta.snapshot(m)[j];
                w[j] - dt * (g.g_y(ym) * w[j] + g.g_yy(ym) * e * e)
            })
            .collect();
        snaps.push(prop.step(&rhs)?);
    }
    Ok(StateTrajectory::new(snaps))
}

/// Output of the backward sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointSolution {
    /// Adjoint state; `p^0` is the L2 representer of the misfit gradient and
    /// `p^{n_steps} = 0`.
    pub p: StateTrajectory,
    /// `nu^m = (I + dt A)^{-T} p^{m+1}` for `m < n_steps`, `nu^{n_steps} = 0`.
    /// This is the multiplier that pairs with `g''(y^m)` in second derivatives.
    pub nu: StateTrajectory,
}

/// Exact transpose of [`solve_tangent`], marched backward:
/// `p^m = (I - dt g'(y^m)) (I + dt A)^{-T} p^{m+1} + dt sum_k r_k^m delta_k`
/// at sampled levels, `p^{n_steps} = 0`.
pub fn solve_adjoint(
    prop: &Propagator,
    y: &StateTrajectory,
    g: &Nonlinearity,
    schedule: &ObservationSchedule,
    residuals: &[Vec<f64>],
) -> Result<AdjointSolution> {
    let n = prop.node_count();
    let steps = prop.time().n_steps();
    y.check_shape("state trajectory", steps + 1, n)?;
    schedule.check_series(residuals, steps)?;
    let grid = prop.grid();
    let dt = prop.time().dt();
    let density = 1.0 / grid.quad_weight();

    let mut p = vec![vec![0.0; n]; steps + 1];
    let mut nu = vec![vec![0.0; n]; steps + 1];
    for m in (0..steps).rev() {
        let propagated = prop.step_transpose(&p[m + 1])?;
        let ym = y.snapshot(m);
        let mut pm: Vec<f64> = propagated
            .iter()
            .zip(ym)
            .map(|(&v, &yv)| v - dt * g.g_y(yv) * v)
            .collect();
        if schedule.is_sampled(m, steps) {
            let i = m / schedule.stride;
            for (k, &node) in schedule.points.iter().enumerate() {
                pm[node] += dt * residuals[k][i] * density;
            }
        }
        nu[m] = propagated;
        p[m] = pm;
    }
    Ok(AdjointSolution {
        p: StateTrajectory::new(p),
        nu: StateTrajectory::new(nu),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::TimeGrid;
    use crate::grid::{DiffusionField, DiscreteOperator};
    use crate::sparse::SolverKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(dim: usize, n: usize, steps: usize) -> Propagator {
        let grid = Grid::new(dim, n).unwrap();
        let k = DiffusionField::from_fn(&grid, |x| 1.0 + 0.5 * x[0]);
        let op = DiscreteOperator::assemble(&grid, &k).unwrap();
        Propagator::new(op, TimeGrid::new(0.2, steps).unwrap(), SolverKind::Auto).unwrap()
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize, a: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-a..a)).collect()
    }

    #[test]
    fn discrete_delta_identity() {
        let grid = Grid::new(2, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = rand_vec(&mut rng, 25, 1.0);
        for k in 0..25 {
            let d = PointSource::new(&grid, k).unwrap().to_vector(&grid);
            assert!((grid.inner_product(&d, &v).unwrap() - v[k]).abs() < 1e-14);
        }
        assert!(PointSource::new(&grid, 25).is_err());
    }

    #[test]
    fn tangent_linear_case_and_zero_direction() {
        let prop = setup(1, 10, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = rand_vec(&mut rng, 10, 1.0);
        let h = rand_vec(&mut rng, 10, 1.0);
        let y = prop.solve_linear(&u, None).unwrap();
        let eta = solve_tangent(&prop, &y, &Nonlinearity::Zero, &h).unwrap();
        assert_eq!(eta, prop.solve_linear(&h, None).unwrap());
        let g = Nonlinearity::eps_sin(0.3);
        let y = prop.solve_semilinear(&u, &g).unwrap();
        let eta0 = solve_tangent(&prop, &y, &g, &[0.0; 10]).unwrap();
        assert!(eta0.snapshots().iter().all(|s| s.iter().all(|&v| v == 0.0)));
        let omega = solve_second_tangent(&prop, &y, &eta, &Nonlinearity::Zero).unwrap();
        assert!(omega
            .snapshots()
            .iter()
            .all(|s| s.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn second_tangent_is_quadratic_in_direction() {
        let prop = setup(2, 5, 10);
        let g = Nonlinearity::eps_sin(0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = rand_vec(&mut rng, 25, 2.0);
        let h = rand_vec(&mut rng, 25, 1.0);
        let y = prop.solve_semilinear(&u, &g).unwrap();
        let c = 2.5;
        let hc: Vec<f64> = h.iter().map(|x| c * x).collect();
        let w1 = solve_second_tangent(&prop, &y, &solve_tangent(&prop, &y, &g, &h).unwrap(), &g)
            .unwrap();
        let w2 = solve_second_tangent(&prop, &y, &solve_tangent(&prop, &y, &g, &hc).unwrap(), &g)
            .unwrap();
        for m in 0..=10 {
            for j in 0..25 {
                let a = c * c * w1.snapshot(m)[j];
                assert!((a - w2.snapshot(m)[j]).abs() <= 1e-12 * a.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn zero_residuals_give_zero_adjoint() {
        let prop = setup(1, 8, 12);
        let sched = ObservationSchedule::new(prop.grid(), vec![1, 5], 3).unwrap();
        let y = prop.solve_linear(&[1.0; 8], None).unwrap();
        let r = vec![vec![0.0; 4]; 2];
        let adj = solve_adjoint(&prop, &y, &Nonlinearity::eps_sin(0.1), &sched, &r).unwrap();
        assert!(adj
            .p
            .snapshots()
            .iter()
            .all(|s| s.iter().all(|&v| v == 0.0)));
        assert!(matches!(
            solve_adjoint(
                &prop,
                &y,
                &Nonlinearity::Zero,
                &sched,
                &[vec![0.0; 3], vec![0.0; 4]]
            ),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn adjoint_duality() {
        for dim in [1, 2] {
            for g in [Nonlinearity::Zero, Nonlinearity::eps_sin(0.4)] {
                let prop = setup(dim, 6, 9);
                let n = prop.node_count();
                let mut rng = ChaCha8Rng::seed_from_u64(dim as u64);
                let sched = ObservationSchedule::new(prop.grid(), vec![0, 3, n - 2], 2).unwrap();
                let u = rand_vec(&mut rng, n, 2.0);
                let h = rand_vec(&mut rng, n, 1.0);
                let r: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut rng, 5, 1.0)).collect();
                let y = prop.solve_semilinear(&u, &g).unwrap();
                let eta = solve_tangent(&prop, &y, &g, &h).unwrap();
                let lhs = sched.pairing(&eta, &r, prop.time().dt(), 9);
                let adj = solve_adjoint(&prop, &y, &g, &sched, &r).unwrap();
                let rhs = prop.grid().inner_product(&h, adj.p.initial()).unwrap();
                assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs(), "{lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn zero_nonlinearity_adjoint_matches_linear_bitwise() {
        let prop = setup(2, 5, 6);
        let sched = ObservationSchedule::new(prop.grid(), vec![2, 12], 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let u = rand_vec(&mut rng, 25, 1.0);
        let r: Vec<Vec<f64>> = (0..2).map(|_| rand_vec(&mut rng, 6, 1.0)).collect();
        let y_lin = prop.solve_linear(&u, None).unwrap();
        let y_semi = prop.solve_semilinear(&u, &Nonlinearity::Zero).unwrap();
        let a = solve_adjoint(&prop, &y_lin, &Nonlinearity::Zero, &sched, &r).unwrap();
        let b = solve_adjoint(&prop, &y_semi, &Nonlinearity::Zero, &sched, &r).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adjoint_matches_dense_transpose() {
        // one observation point, one active level m*: p^0 = dt r (M^{-T})^{m*} delta_k
        let prop = setup(1, 8, 6);
        let sched = ObservationSchedule::new(prop.grid(), vec![3], 1).unwrap();
        let y = prop.solve_linear(&[0.0; 8], None).unwrap();
        let active = 4;
        let mut r = vec![vec![0.0; 6]];
        r[0][active] = 1.7;
        let adj = solve_adjoint(&prop, &y, &Nonlinearity::Zero, &sched, &r).unwrap();

        let dt = prop.time().dt();
        let step = prop.operator().matrix().shifted(1.0, dt).to_dense();
        let inv_t = step.try_inverse().unwrap().transpose();
        let mut v = nalgebra::DVector::from_vec(
            PointSource::new(prop.grid(), 3)
                .unwrap()
                .to_vector(prop.grid()),
        );
        v *= dt * 1.7;
        for _ in 0..active {
            v = &inv_t * v;
        }
        for (a, b) in adj.p.initial().iter().zip(v.iter()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }
}
