//! Twin experiments: a known initial condition is propagated, observed with
//! noise, and recovered by constrained 4D-Var.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::assimilation::{AssimilationProblem, CostBreakdown, ObservationSet};
use crate::config::{ControlSpec, ExperimentConfig, Placement, TruthSpec};
use crate::error::{Error, Result};
use crate::forward::{Propagator, StateTrajectory, TimeGrid};
use crate::grid::{DiscreteOperator, Grid};
use crate::optimizer::{
    cone_kind, kkt_check, optimize, quadratic_growth_probe, sample_cone_directions, ssc_check,
    GrowthProbe, HistoryEntry, KktReport, SscReport,
};
use crate::tangent::ObservationSchedule;

/// Where a requested observation point ended up on the grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SnapReport {
    pub requested: Vec<f64>,
    pub node: usize,
    pub node_coords: Vec<f64>,
    pub distance: f64,
}

/// A validated configuration with its grid, operator and factored propagator.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub grid: Grid,
    pub time: TimeGrid,
    pub propagator: Propagator,
    pub schedule: ObservationSchedule,
    pub snaps: Vec<SnapReport>,
}

impl Experiment {
    pub fn prepare(config: &ExperimentConfig) -> Result<Self> {
        config.validate().map_err(|e| e.in_phase("config"))?;
        let grid = config.grid()?;
        let time = config.time_grid()?;
        let (nodes, snaps) = place_observations(config, &grid).map_err(|e| e.in_phase("config"))?;
        let schedule = ObservationSchedule::new(&grid, nodes, config.observations.stride)
            .map_err(|e| e.in_phase("config"))?;
        let operator = DiscreteOperator::assemble(&grid, &config.diffusion)
            .map_err(|e| e.in_phase("config"))?;
        let propagator =
            Propagator::new(operator, time, config.time.solver).map_err(|e| e.in_phase("setup"))?;
        Ok(Self {
            config: config.clone(),
            grid,
            time,
            propagator,
            schedule,
            snaps,
        })
    }

    /// Nodal values of the configured true initial condition.
    pub fn truth(&self) -> Result<Vec<f64>> {
        let grid = &self.grid;
        match &self.config.truth {
            TruthSpec::SineModes { modes } => Ok(grid.sample(|x| {
                modes
                    .iter()
                    .map(|m| {
                        m.amplitude
                            * m.index
                                .iter()
                                .zip(x)
                                .map(|(&k, &xi)| (k as f64 * std::f64::consts::PI * xi).sin())
                                .product::<f64>()
                    })
                    .sum()
            })),
            TruthSpec::Gaussian { bumps } => Ok(grid.sample(|x| {
                bumps
                    .iter()
                    .map(|b| {
                        let r2: f64 = b.center.iter().zip(x).map(|(c, xi)| (xi - c).powi(2)).sum();
                        b.amplitude * (-r2 / (2.0 * b.width * b.width)).exp()
                    })
                    .sum()
            })),
            TruthSpec::File { path } => crate::export::read_control_csv(path, grid),
        }
    }

    fn control(&self, spec: &ControlSpec, truth: &[f64]) -> Vec<f64> {
        match spec {
            ControlSpec::Truth => truth.to_vec(),
            ControlSpec::Zero => vec![0.0; truth.len()],
            ControlSpec::Perturbed { sigma, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                truth
                    .iter()
                    .map(|&t| {
                        let xi: f64 = StandardNormal.sample(&mut rng);
                        t + sigma * xi
                    })
                    .collect()
            }
        }
    }
}

fn place_observations(
    config: &ExperimentConfig,
    grid: &Grid,
) -> Result<(Vec<usize>, Vec<SnapReport>)> {
    let snap = |p: Vec<f64>| -> Result<SnapReport> {
        let (node, distance) = grid.snap(&p)?;
        Ok(SnapReport {
            requested: p,
            node,
            node_coords: grid.coords(node),
            distance,
        })
    };
    let snaps: Vec<SnapReport> = match &config.observations.placement {
        Placement::Coordinates { points } => {
            points.iter().cloned().map(snap).collect::<Result<_>>()?
        }
        Placement::Uniform { per_axis } => {
            let axis: Vec<f64> = (1..=*per_axis)
                .map(|i| i as f64 / (*per_axis + 1) as f64)
                .collect();
            let points: Vec<Vec<f64>> = match grid.dim() {
                1 => axis.iter().map(|&a| vec![a]).collect(),
                _ => axis
                    .iter()
                    .flat_map(|&b| axis.iter().map(move |&a| vec![a, b]))
                    .collect(),
            };
            points.into_iter().map(snap).collect::<Result<_>>()?
        }
        Placement::All => (0..grid.node_count())
            .map(|j| snap(grid.coords(j)))
            .collect::<Result<_>>()?,
        Placement::Random { count } => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.observations.placement_seed);
            let mut nodes =
                rand::seq::index::sample(&mut rng, grid.node_count(), *count).into_vec();
            nodes.sort_unstable();
            nodes
                .into_iter()
                .map(|j| snap(grid.coords(j)))
                .collect::<Result<_>>()?
        }
    };
    // several requested points may share a node; it is observed once
    let mut nodes: Vec<usize> = Vec::with_capacity(snaps.len());
    for s in &snaps {
        if !nodes.contains(&s.node) {
            nodes.push(s.node);
        }
    }
    Ok((nodes, snaps))
}

/// Synthetic data of a twin experiment.
#[derive(Debug, Clone)]
pub struct TwinData {
    pub truth: Vec<f64>,
    pub trajectory: StateTrajectory,
    /// Noise-free samples `[point][sample]`.
    pub clean: Vec<Vec<f64>>,
    pub observations: ObservationSet,
}

/// Forward-solves the truth and samples it at the observation nodes, adding
/// seeded `N(0, sigma^2)` noise.
pub fn generate_truth(exp: &Experiment) -> Result<TwinData> {
    let phase = |e: Error| e.in_phase("generate");
    let truth = exp.truth().map_err(phase)?;
    let g = &exp.config.nonlinearity;
    let trajectory = exp.propagator.solve_semilinear(&truth, g).map_err(phase)?;
    let clean = exp.schedule.observe(&trajectory, exp.time.n_steps());
    let sigma = exp.config.observations.noise_sigma;
    let values = if sigma == 0.0 {
        clean.clone()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(exp.config.observations.seed);
        clean
            .iter()
            .map(|level| {
                level
                    .iter()
                    .map(|&z| {
                        let xi: f64 = StandardNormal.sample(&mut rng);
                        z + sigma * xi
                    })
                    .collect()
            })
            .collect()
    };
    Ok(TwinData {
        truth,
        trajectory,
        clean,
        observations: ObservationSet::new(exp.schedule.clone(), values, sigma),
    })
}

pub fn build_problem(exp: &Experiment, data: &TwinData) -> Result<AssimilationProblem> {
    let cfg = &exp.config;
    AssimilationProblem::new(
        exp.propagator.clone(),
        cfg.nonlinearity,
        data.observations.clone(),
        cfg.covariance.clone(),
        exp.control(&cfg.background, &data.truth),
        cfg.constraint,
    )
    .map_err(|e| e.in_phase("setup"))
}

/// Optimizer start before projection.
pub fn initial_control(exp: &Experiment, data: &TwinData) -> Vec<f64> {
    exp.control(&exp.config.start, &data.truth)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseTiming {
    pub phase: &'static str,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TwinResult {
    pub truth: Vec<f64>,
    pub recovered: Vec<f64>,
    pub recovered_state: StateTrajectory,
    /// `|u* - u_true|_{L2}`
    pub error_l2: f64,
    /// `|u* - u_true|_{L^beta}`
    pub error_lbeta: f64,
    pub truth_norm_l2: f64,
    pub cost: CostBreakdown,
    pub kkt: KktReport,
    pub ssc: Option<SscReport>,
    pub growth: Option<GrowthProbe>,
    pub history: Vec<HistoryEntry>,
    pub converged: bool,
    pub iterations: usize,
    pub snaps: Vec<SnapReport>,
    pub timings: Vec<PhaseTiming>,
}

/// Generate data, optimize, and check first- and (if enabled) second-order
/// conditions at the result.
pub fn run_assimilation(config: &ExperimentConfig) -> Result<TwinResult> {
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |phase: &'static str, timings: &mut Vec<PhaseTiming>| {
        timings.push(PhaseTiming {
            phase,
            seconds: clock.elapsed().as_secs_f64(),
        });
        clock = Instant::now();
    };

    let exp = Experiment::prepare(config)?;
    lap("setup", &mut timings);
    let data = generate_truth(&exp)?;
    let prob = build_problem(&exp, &data)?;
    lap("generate", &mut timings);

    let run = optimize(&prob, &config.optimizer, &initial_control(&exp, &data))
        .map_err(|e| e.in_phase("optimize"))?;
    lap("optimize", &mut timings);

    let kkt_phase = |e: Error| e.in_phase("kkt");
    let kkt = kkt_check(&prob, &run.control).map_err(kkt_phase)?;
    let evaluation = prob.evaluate(&run.control).map_err(kkt_phase)?;
    lap("kkt", &mut timings);

    let (ssc, growth) = if config.ssc.enabled {
        let ssc_phase = |e: Error| e.in_phase("ssc");
        let report = ssc_check(&prob, &run.control, kkt.lambda, &config.ssc.ssc_config())
            .map_err(ssc_phase)?;
        let growth = if config.ssc.growth_radii.is_empty() {
            None
        } else {
            let rep = prob.constraint_gradient(&run.control).map_err(ssc_phase)?;
            let cone = cone_kind(prob.constraint(), kkt.feasibility, kkt.lambda);
            let dirs = sample_cone_directions(
                &exp.grid,
                cone,
                &rep,
                config.ssc.growth_directions,
                config.ssc.seed.wrapping_add(1),
            );
            let sigma = report.growth_sigma();
            Some(
                quadratic_growth_probe(&prob, &run.control, &dirs, &config.ssc.growth_radii, sigma)
                    .map_err(ssc_phase)?,
            )
        };
        lap("ssc", &mut timings);
        (Some(report), growth)
    } else {
        (None, None)
    };

    let grid = exp.grid;
    let diff: Vec<f64> = run
        .control
        .iter()
        .zip(&data.truth)
        .map(|(a, b)| a - b)
        .collect();
    Ok(TwinResult {
        error_l2: grid.l2_norm(&diff),
        error_lbeta: grid.lp_norm(&diff, config.constraint.beta)?,
        truth_norm_l2: grid.l2_norm(&data.truth),
        truth: data.truth,
        recovered: run.control,
        recovered_state: evaluation.state,
        cost: evaluation.cost,
        kkt,
        ssc,
        growth,
        history: run.history,
        converged: run.converged,
        iterations: run.iterations,
        snaps: exp.snaps,
        timings,
    })
}

/// Central-difference check of the gradient and Hessian along one direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DerivativeCheckRow {
    pub pair: usize,
    pub directional: f64,
    pub fd_directional: f64,
    pub gradient_rel_error: f64,
    pub curvature: f64,
    pub fd_curvature: f64,
    pub hessian_rel_error: f64,
}

pub const GRADIENT_FD_STEP: f64 = 1e-5;
pub const HESSIAN_FD_STEP: f64 = 1e-3;

fn rel_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Compares `<grad f(u), h>` and `f''(u)[h, h]` with central differences at
/// `pairs` seeded random points `u = center + 0.3 xi` and unit directions `h`.
pub fn derivative_check(
    prob: &AssimilationProblem,
    center: &[f64],
    pairs: usize,
    seed: u64,
) -> Result<Vec<DerivativeCheckRow>> {
    let grid = *prob.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw =
        |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let mut rows = Vec::with_capacity(pairs);
    for pair in 0..pairs {
        let u: Vec<f64> = center
            .iter()
            .zip(draw(center.len()))
            .map(|(c, x)| c + 0.3 * x)
            .collect();
        let mut h = draw(center.len());
        let norm = grid.l2_norm(&h);
        h.iter_mut().for_each(|x| *x /= norm);
        let shifted = |t: f64| -> Vec<f64> { u.iter().zip(&h).map(|(a, b)| a + t * b).collect() };

        let grad = prob.evaluate_gradient(&u)?;
        let directional = grid.ip(&grad, &h);
        let e = GRADIENT_FD_STEP;
        let fd_directional =
            (prob.evaluate_cost(&shifted(e))? - prob.evaluate_cost(&shifted(-e))?) / (2.0 * e);

        let curvature = prob.hessian_quadratic_form(&u, &h)?;
        let e = HESSIAN_FD_STEP;
        let f0 = prob.evaluate_cost(&u)?;
        let fd_curvature = (prob.evaluate_cost(&shifted(e))? - 2.0 * f0
            + prob.evaluate_cost(&shifted(-e))?)
            / (e * e);
        rows.push(DerivativeCheckRow {
            pair,
            directional,
            fd_directional,
            gradient_rel_error: rel_error(directional, fd_directional),
            curvature,
            fd_curvature,
            hessian_rel_error: rel_error(curvature, fd_curvature),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset;

    fn cfg(name: &str) -> ExperimentConfig {
        ExperimentConfig::from_toml_str(preset(name).unwrap()).unwrap()
    }

    #[test]
    fn noiseless_data_equals_samples() {
        let mut c = cfg("small_semilinear");
        c.observations.noise_sigma = 0.0;
        let exp = Experiment::prepare(&c).unwrap();
        let data = generate_truth(&exp).unwrap();
        assert_eq!(data.observations.values, data.clean);
        let again = generate_truth(&exp).unwrap();
        assert_eq!(again.observations.values, data.observations.values);
    }

    #[test]
    fn noise_statistics() {
        let mut c = cfg("small_linear");
        c.grid.n = 50;
        c.time.n_steps = 200;
        c.observations.stride = 1;
        c.observations.placement = Placement::All;
        c.observations.noise_sigma = 0.2;
        let exp = Experiment::prepare(&c).unwrap();
        let data = generate_truth(&exp).unwrap();
        let resid: Vec<f64> = data
            .observations
            .values
            .iter()
            .flatten()
            .zip(data.clean.iter().flatten())
            .map(|(z, y)| z - y)
            .collect();
        assert!(resid.len() >= 10_000);
        let n = resid.len() as f64;
        let mean = resid.iter().sum::<f64>() / n;
        let std = (resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((std - 0.2).abs() <= 0.05 * 0.2, "std {std}");
    }

    #[test]
    fn snapping_is_reported() {
        let mut c = cfg("small_linear");
        c.observations.placement = Placement::Coordinates {
            points: vec![vec![0.3], vec![0.31]],
        };
        let exp = Experiment::prepare(&c).unwrap();
        let h = exp.grid.h();
        assert_eq!(exp.snaps.len(), 2);
        assert_eq!(exp.schedule.points.len(), 1);
        for s in &exp.snaps {
            assert!(s.distance <= 0.5 * h + 1e-15);
            assert!((s.node_coords[0] - s.requested[0]).abs() == s.distance);
        }
    }

    #[test]
    fn phase_tags() {
        let mut c = cfg("small_linear");
        c.grid.n = 1;
        let err = run_assimilation(&c).unwrap_err();
        assert_eq!(err.phase(), Some("config"));
        assert_eq!(err.kind(), "config_invalid");

        let mut c = cfg("small_linear");
        c.truth = TruthSpec::File {
            path: "/nonexistent/truth.csv".into(),
        };
        let err = run_assimilation(&c).unwrap_err();
        assert_eq!((err.phase(), err.kind()), (Some("generate"), "io"));
    }

    #[test]
    fn derivative_check_on_presets() {
        for name in ["small_linear", "small_semilinear"] {
            let exp = Experiment::prepare(&cfg(name)).unwrap();
            let data = generate_truth(&exp).unwrap();
            let prob = build_problem(&exp, &data).unwrap();
            for row in derivative_check(&prob, &data.truth, 5, 3).unwrap() {
                assert!(row.gradient_rel_error <= 1e-5, "{name}: {row:?}");
                assert!(row.hessian_rel_error <= 1e-4, "{name}: {row:?}");
            }
        }
    }

    #[test]
    fn convex_exact_recovery() {
        let mut c = cfg("small_linear");
        c.observations.noise_sigma = 0.0;
        c.background = ControlSpec::Truth;
        c.start = ControlSpec::Zero;
        c.covariance = crate::assimilation::Covariance::ScaledIdentity { alpha: 1.0 };
        let r = run_assimilation(&c).unwrap();
        assert!(r.converged);
        assert!(r.error_l2 <= 1e-6 * r.truth_norm_l2, "{}", r.error_l2);
        assert_eq!(r.kkt.lambda, 0.0);
    }
}
