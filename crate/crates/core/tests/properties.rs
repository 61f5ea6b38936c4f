use fourdvar::assimilation::ConstraintSpec;
use fourdvar::config::{preset, ExperimentConfig};
use fourdvar::grid::{DiffusionField, DiscreteOperator, Grid};
use fourdvar::optimizer::{in_cone, project_to_ball, project_to_cone, ConeKind};
use proptest::prelude::*;

fn grid_and_vec() -> impl Strategy<Value = (Grid, Vec<f64>)> {
    (1usize..=2, 2usize..=7).prop_flat_map(|(dim, n)| {
        let grid = Grid::new(dim, n).unwrap();
        (
            Just(grid),
            prop::collection::vec(-3.0f64..3.0, grid.node_count()),
        )
    })
}

proptest! {
    #[test]
    fn projection_is_feasible_and_idempotent((grid, u) in grid_and_vec(), b in 1e-3f64..10.0, beta in 4.5f64..9.0) {
        let spec = ConstraintSpec::new(beta, b).unwrap();
        let p = project_to_ball(&spec, &grid, &u).unwrap();
        prop_assert!(grid.lp_integral(&p, beta).unwrap() <= b);
        prop_assert_eq!(project_to_ball(&spec, &grid, &p).unwrap(), p.clone());
        // radial: p = s u with s in (0, 1]
        let i = u.iter().position(|x| x.abs() > 1e-3);
        if let Some(i) = i {
            let s = p[i] / u[i];
            prop_assert!(s > 0.0 && s <= 1.0);
            for (a, c) in p.iter().zip(&u) {
                prop_assert!((a - s * c).abs() <= 1e-12 * c.abs().max(1.0));
            }
        }
    }

    #[test]
    fn lp_integral_is_homogeneous((grid, u) in grid_and_vec(), t in 0.1f64..3.0, beta in 2.0f64..8.0) {
        let scaled: Vec<f64> = u.iter().map(|x| t * x).collect();
        let a = grid.lp_integral(&scaled, beta).unwrap();
        let b = t.powf(beta) * grid.lp_integral(&u, beta).unwrap();
        prop_assert!((a - b).abs() <= 1e-11 * b.max(1e-300));
    }

    #[test]
    fn cone_projection_lands_in_cone((grid, r) in grid_and_vec(), seed in any::<u64>()) {
        prop_assume!(grid.l2_norm(&r) > 1e-6);
        let mut h: Vec<f64> = (0..r.len()).map(|j| ((j as u64 ^ seed) as f64 * 0.618).sin()).collect();
        prop_assume!(grid.l2_norm(&h) > 1e-6);
        for cone in [ConeKind::Inactive, ConeKind::ActiveZeroMultiplier, ConeKind::ActivePositiveMultiplier] {
            project_to_cone(&grid, cone, &r, &mut h);
            prop_assert!(in_cone(&grid, cone, &r, &h));
        }
    }

    #[test]
    fn operator_is_symmetric_positive((grid, v) in grid_and_vec(), k in prop::collection::vec(0.1f64..5.0, 81)) {
        let field = DiffusionField::Nodal { values: k[..(grid.n() + 2).pow(grid.dim() as u32)].to_vec() };
        let op = DiscreteOperator::assemble(&grid, &field).unwrap();
        let w: Vec<f64> = v.iter().rev().copied().collect();
        let (av, aw) = (op.apply(&v), op.apply(&w));
        let lhs = grid.inner_product(&av, &w).unwrap();
        let rhs = grid.inner_product(&v, &aw).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (lhs.abs() + rhs.abs() + 1.0));
        if grid.l2_norm(&v) > 1e-6 {
            prop_assert!(grid.inner_product(&av, &v).unwrap() > 0.0);
        }
    }

    #[test]
    fn config_round_trip(n in 2usize..40, steps in 1usize..300, sigma in 0.0f64..1.0, b in 1e-3f64..1e3, seed in any::<u64>()) {
        let mut cfg = ExperimentConfig::from_toml_str(preset("small_semilinear").unwrap()).unwrap();
        cfg.grid.n = n;
        cfg.time.n_steps = steps;
        cfg.observations.noise_sigma = sigma;
        cfg.constraint.b = b;
        cfg.override_seed(seed);
        let text = cfg.to_toml_string().unwrap();
        prop_assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }
}
