use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use riskfb::fem::{assemble, ActuatorSet, Field, Mesh1D};
use riskfb::galerkin::{ControlTrajectory, GalerkinSystem};
use riskfb::grid::TimeGrid;
use riskfb::pce::{multiplication_matrix, GaussRule, TotalDegreeIndexSet};
use riskfb::risk::{entropic_risk_weighted, symmetrize_and_clip, tilt_weights};

fn actuators() -> ActuatorSet {
    ActuatorSet::new(vec![(0.1, 0.3), (0.4, 0.6), (0.7, 0.9)], 10f64.sqrt()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn multiplication_matrices_are_symmetric_and_bounded(s in 1usize..4, p in 0usize..5) {
        let set = TotalDegreeIndexSet::new(s, p);
        for j in 0..s {
            let m = multiplication_matrix(j, &set).unwrap();
            prop_assert!((&m - m.transpose()).amax() < 1e-14);
            // Multiplication by σ ∈ [-1, 1] has spectrum inside [-1, 1].
            let eig = m.symmetric_eigen().eigenvalues;
            prop_assert!(eig.amax() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn gauss_rules_integrate_polynomials(n in 1usize..12, k in 0usize..24) {
        prop_assume!(k < 2 * n);
        let rule = GaussRule::new(n);
        let q: f64 = rule.nodes.iter().zip(&rule.weights).map(|(x, w)| w * x.powi(k as i32)).sum();
        let exact = if k % 2 == 1 { 0.0 } else { 1.0 / (k as f64 + 1.0) };
        prop_assert!((q - exact).abs() < 1e-13);
    }

    #[test]
    fn fem_matrices_respect_constants(cells in 2usize..64) {
        let mesh = Mesh1D::uniform(cells).unwrap();
        let one = |_: f64| 1.0;
        let fem = assemble(&mesh, &one, &[], &actuators());
        let ones = DVector::from_element(mesh.len(), 1.0);
        prop_assert!((ones.dot(&(&fem.mass * &ones)) - 1.0).abs() < 1e-12);
        prop_assert!((&fem.stiffness * &ones).amax() < 1e-10);
        prop_assert!((&fem.reaction_mean - &fem.mass).amax() < 1e-14);
        let col_sums: Vec<f64> = fem.input.column_iter().map(|c| c.sum()).collect();
        for s in col_sums {
            prop_assert!((s - 0.2 * 10f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn tilt_weights_normalize_and_preserve_order(
        xs in prop::collection::vec(-4.0f64..4.0, 2..40),
        theta in 0.0f64..20.0,
    ) {
        let n = xs.len();
        let probs = vec![1.0 / n as f64; n];
        let w = tilt_weights(&xs, &probs, theta).unwrap();
        let total: f64 = w.iter().zip(&probs).map(|(a, b)| a * b).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        for i in 0..n {
            prop_assert!(w[i] >= 0.0);
            for j in 0..n {
                if xs[i] < xs[j] {
                    prop_assert!(w[i] <= w[j]);
                }
            }
        }
        let r = entropic_risk_weighted(&xs, &probs, theta).unwrap();
        let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = xs.iter().sum::<f64>() / n as f64;
        prop_assert!(r <= max + 1e-12 && r >= mean - 1e-12);
    }

    #[test]
    fn clipping_returns_a_psd_matrix(seed in 0u64..1000, n in 1usize..8) {
        let a = DMatrix::from_fn(n, n, |i, j| ((seed as f64 + 1.0) * (i * 7 + j * 3 + 1) as f64).sin());
        let mut q = &a * a.transpose();
        // A tiny negative perturbation inside the tolerance band.
        q[(0, 0)] -= 1e-12 * q.amax();
        let out = symmetrize_and_clip(q.clone()).unwrap();
        prop_assert!((&out - out.transpose()).amax() == 0.0);
        prop_assert!(out.clone().symmetric_eigen().eigenvalues.min() >= -1e-12 * q.amax().max(1.0));
        prop_assert!((&out - &q).amax() <= 1e-10 * q.amax().max(1.0));
    }

    #[test]
    fn reaction_free_dynamics_conserve_the_mean(
        amplitude in 0.0f64..2.0,
        offset in -3.0f64..3.0,
        s in 0usize..3,
    ) {
        let mesh = Mesh1D::uniform(8).unwrap();
        let zero = |_: f64| 0.0;
        let fields: Vec<&Field> = (0..s).map(|_| &zero as &Field).collect();
        let fem = Arc::new(assemble(&mesh, &zero, &fields, &actuators()));
        let mass = fem.mass.clone();
        let sys = GalerkinSystem::assemble(TotalDegreeIndexSet::new(s, 2), fem, 0.5).unwrap();
        let grid = TimeGrid::new(0.5, 20).unwrap();
        let y0 = mesh.interpolate(|x| offset - amplitude * (2.0 * PI * x).cos());
        let traj = sys.forward_solve(&ControlTrajectory::zeros(grid, 3), &y0).unwrap();
        let ones = DVector::from_element(mesh.len(), 1.0);
        let m0 = ones.dot(&(&mass * &y0));
        for k in 0..grid.len() {
            let mean = traj.mean(k);
            prop_assert!((ones.dot(&(&mass * &mean)) - m0).abs() < 1e-12);
            let y = traj.mode_matrix(k);
            for m in 1..y.ncols() {
                prop_assert!(y.column(m).amax() < 1e-14);
            }
        }
    }
}
