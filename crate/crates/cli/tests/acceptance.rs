//! Acceptance criteria, one PASS/FAIL line each.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use riskfb::dynamics::LinearSystem;
use riskfb::galerkin::ControlTrajectory;
use riskfb::grid::TimeGrid;
use riskfb::riccati::{solve_dre, QuadraticCost};
use riskfb::risk::{entropic_risk, tilt_weights, weighted_covariance_matrix};
use riskfb::sqp::{run_openloop_gd, run_sqp, run_sqp_with, SqpOptions, StepRule};
use riskfb_cli::artifacts::{percentile, read_matrix, sorted_column};
use riskfb_cli::commands::{self, RobustnessSummary};
use riskfb_cli::config::{CovarianceKind, ExperimentConfig};
use riskfb_cli::Experiment;

struct Outcome {
    pass: bool,
    detail: String,
}

type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_control(grid: TimeGrid, inputs: usize, rng: &mut ChaCha8Rng) -> ControlTrajectory {
    ControlTrajectory {
        grid,
        values: (0..grid.steps())
            .map(|_| DVector::from_fn(inputs, |_, _| rng.random_range(-1.0..1.0)))
            .collect(),
    }
}

fn reduced_config(theta: f64) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.discretization.mesh_width = 0.0625;
    c.discretization.time_steps = 100;
    c.risk.samples = 50;
    c.risk.theta = theta;
    c.validation.realizations = 500;
    c
}

const VALIDATION_N: usize = 500;
const VALIDATION_SEED: u64 = 7;

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let mut c = ExperimentConfig::default();
    c.discretization.mesh_width = 0.125;
    c.discretization.time_steps = 10;
    c.discretization.chaos_degree = 1;
    c.pde.parameters = 1;
    c.risk.samples = 20;
    c.risk.theta = 1.0;
    let exp = Experiment::build(&c).unwrap();
    let prob = &exp.problem;
    assert_eq!(prob.system.fem_nodes(), 9);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let u = random_control(prob.grid, 3, &mut rng);
    let grad = prob.reduced_gradient(&u).unwrap();
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let dir = random_control(prob.grid, 3, &mut rng);
        let fd = (prob.objective(&u.axpy(eps, &dir)).unwrap() - prob.objective(&u.axpy(-eps, &dir)).unwrap())
            / (2.0 * eps);
        let an = grad.inner(&dir);
        worst = worst.max((fd - an).abs() / an.abs());
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-5 && secs < 10.0,
        format!("max relative error {worst:.2e} (tol 1e-5), {secs:.2} s (limit 10 s)"),
    )
}

fn q_operator_oracle() -> Outcome {
    let mut c = ExperimentConfig::default();
    c.discretization.mesh_width = 0.5;
    c.discretization.chaos_degree = 1;
    c.discretization.time_steps = 4;
    c.pde.parameters = 1;
    c.risk.samples = 100;
    c.risk.theta = 5.0;
    let exp = Experiment::build(&c).unwrap();
    let risk = &exp.problem.risk;
    let d = exp.problem.system.fem_nodes();
    let modes = exp.problem.system.modes();
    assert_eq!((d, modes), (3, 2));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let coeffs = DVector::from_fn(d * modes, |_, _| rng.random_range(-1.0..1.0));
    let target = DVector::from_fn(d, |_, _| rng.random_range(-0.5..0.5));
    let w = risk.running_weight().clone();
    let stage = risk.stage(&coeffs, &target, &w, true).unwrap();
    let q = &stage.hessian;

    let basis = risk.basis();
    let n = basis.nrows();
    let nodal = |v: &DVector<f64>, i: usize| -> DVector<f64> {
        let mut out = DVector::zeros(d);
        for m in 0..modes {
            out += basis[(i, m)] * v.rows(m * d, d);
        }
        out
    };
    let errors: Vec<f64> = (0..n)
        .map(|i| {
            let e = nodal(&coeffs, i) - &target;
            e.dot(&(&w * &e))
        })
        .collect();
    let probs = vec![1.0 / n as f64; n];
    let omega = tilt_weights(&errors, &probs, c.risk.theta).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let d1 = DVector::from_fn(d * modes, |_, _| rng.random_range(-1.0..1.0));
        let d2 = DVector::from_fn(d * modes, |_, _| rng.random_range(-1.0..1.0));
        let assembled = d1.dot(&(q * &d2));
        let mut expect = 0.0;
        let (mut sa, mut sb, mut sab) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let e = nodal(&coeffs, i) - &target;
            let (x1, x2) = (nodal(&d1, i), nodal(&d2, i));
            expect += omega[i] * x1.dot(&(&w * &x2)) / n as f64;
            let a = e.dot(&(&w * &x1));
            let b = e.dot(&(&w * &x2));
            sa += omega[i] * a;
            sb += omega[i] * b;
            sab += omega[i] * a * b;
        }
        let nn = n as f64;
        expect += 2.0 * c.risk.theta * (nn * sab - sa * sb) / (nn * (nn - 1.0));
        worst = worst.max((assembled - expect).abs() / expect.abs().max(1.0));
    }
    let min_eig = q.clone().symmetric_eigen().eigenvalues.min();
    outcome(
        worst <= 1e-10 && min_eig >= 0.0,
        format!("max deviation {worst:.2e} (tol 1e-10), min eigenvalue {min_eig:.3e}"),
    )
}

fn covariance_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    let mut min_form = f64::INFINITY;
    for trial in 0..100 {
        let n = 2 + trial % 40;
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..5.0)).collect();
        let mean = raw.iter().sum::<f64>() / n as f64;
        let omega = DVector::from_iterator(n, raw.iter().map(|w| w / mean));
        let x = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
        let form = x.dot(&(weighted_covariance_matrix(&omega) * &x));
        let nn = n as f64;
        let s1: f64 = omega.iter().zip(x.iter()).map(|(w, v)| w * v).sum();
        let s2: f64 = omega.iter().zip(x.iter()).map(|(w, v)| w * v * v).sum();
        let expect = (nn * s2 - s1 * s1) / (nn * (nn - 1.0));
        worst = worst.max((form - expect).abs() / expect.abs().max(1.0));
        min_form = min_form.min(form);
    }
    let n = 25;
    let ones = DVector::from_element(n, 1.0);
    let x = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
    let m: f64 = x.mean();
    let sample_var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    let ones_dev = (x.dot(&(weighted_covariance_matrix(&ones) * &x)) - sample_var).abs();
    outcome(
        worst <= 1e-12 && min_form >= 0.0 && ones_dev <= 1e-12,
        format!("max deviation {worst:.2e}, min form {min_form:.3e}, unit-weight deviation {ones_dev:.2e} (tol 1e-12)"),
    )
}

fn entropic_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut cash, mut mono, mut constant, mut small) = (0.0f64, true, 0.0f64, true);
    for _ in 0..100 {
        let n = rng.random_range(2..60);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let theta = rng.random_range(0.01..10.0);
        let shift = rng.random_range(-10.0..10.0);
        let shifted: Vec<f64> = x.iter().map(|v| v + shift).collect();
        let r = entropic_risk(&x, theta).unwrap();
        cash = cash.max((entropic_risk(&shifted, theta).unwrap() - r - shift).abs());
        let theta2 = theta * rng.random_range(1.01..3.0);
        mono &= entropic_risk(&x, theta2).unwrap() >= r - 1e-12;
        let cst = vec![shift; n];
        constant = constant.max((entropic_risk(&cst, theta).unwrap() - shift).abs());
        let t_small = rng.random_range(1e-6..1e-3);
        let mean = x.iter().sum::<f64>() / n as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        small &= (entropic_risk(&x, t_small).unwrap() - mean).abs() <= t_small * var + 1e-12;
    }
    outcome(
        cash <= 1e-12 && mono && constant <= 1e-12 && small,
        format!(
            "cash invariance {cash:.2e}, monotone {mono}, constant {constant:.2e}, small-theta bound {small}"
        ),
    )
}

fn riccati_oracle() -> Outcome {
    let start = Instant::now();
    let system = LinearSystem::new(
        DMatrix::from_element(1, 1, 2.0),
        DMatrix::from_element(1, 1, -1.0),
        DMatrix::from_element(1, 1, 1.5),
    )
    .unwrap();
    let grid = TimeGrid::new(1.0, 200).unwrap();
    let cost = QuadraticCost {
        running: (0..grid.len())
            .map(|k| DMatrix::from_element(1, 1, 1.0 + grid.time(k)))
            .collect(),
        linear: (0..grid.len())
            .map(|k| DVector::from_element(1, (3.0 * grid.time(k)).sin()))
            .collect(),
        terminal: Some((DMatrix::from_element(1, 1, 0.5), DVector::from_element(1, -0.2))),
    };
    let coarse = solve_dre(&system, &grid, None, &cost, Some(1)).unwrap();
    let fine = solve_dre(&system, &grid, None, &cost, Some(100)).unwrap();
    let dre_dev = coarse
        .pi
        .iter()
        .zip(&fine.pi)
        .map(|(a, b)| (a[(0, 0)] - b[(0, 0)]).abs())
        .chain(coarse.h.iter().zip(&fine.h).map(|(a, b)| (a[0] - b[0]).abs()))
        .fold(0.0, f64::max);

    let mut c = ExperimentConfig::default();
    c.pde.parameters = 0;
    c.discretization.mesh_width = 0.0625;
    c.discretization.time_steps = 100;
    c.risk.theta = 0.0;
    c.risk.samples = 2;
    let exp = Experiment::build(&c).unwrap();
    let prob = &exp.problem;
    let (state, _, _) = run_sqp(
        prob,
        exp.initial_expansion().unwrap(),
        SqpOptions {
            tolerance: 1e-10,
            max_iterations: 3,
        },
    )
    .unwrap();
    let (ol, _) = run_openloop_gd(prob, prob.zero_control(), 200, StepRule::default(), 1e-10).unwrap();
    let rel = state.control.axpy(-1.0, &ol).norm() / ol.norm();
    let cl_cost = prob.objective(&state.control).unwrap();
    let ol_cost = prob.objective(&ol).unwrap();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        dre_dev <= 1e-8 && rel <= 1e-3 && cl_cost <= ol_cost + 1e-6 && secs < 30.0,
        format!(
            "scalar DRE deviation {dre_dev:.2e} (tol 1e-8); LQR control gap {rel:.2e} (tol 1e-3); \
             costs CL {cl_cost:.12e} OL {ol_cost:.12e}; {secs:.2} s (limit 30 s)"
        ),
    )
}

fn mean_abs_difference(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (ra, rb) in a.iter().zip(b) {
        for (x, y) in ra.iter().zip(rb) {
            sum += (x - y).abs();
            count += 1;
        }
    }
    sum / count as f64
}

fn terminal_mean(rows: &[Vec<f64>]) -> f64 {
    rows.iter().map(|r| r[r.len() - 1]).sum::<f64>() / rows.len() as f64
}

fn sqp_matches_openloop(root: &Path) -> Outcome {
    let start = Instant::now();
    let config = reduced_config(10.0);
    let cl = root.join("cl");
    let ol = root.join("ol");
    commands::solve(&config, &cl).unwrap();
    commands::openloop(&config, &ol, Some(200)).unwrap();
    commands::validate(&cl, VALIDATION_N, VALIDATION_SEED).unwrap();
    commands::validate(&ol, VALIDATION_N, VALIDATION_SEED).unwrap();
    let (_, sqp) = read_matrix(&cl.join("validation/errors_feedback.csv")).unwrap();
    let (_, gd) = read_matrix(&ol.join("validation/errors_controlled.csv")).unwrap();
    let (_, unc) = read_matrix(&cl.join("validation/errors_uncontrolled.csv")).unwrap();
    let diff = mean_abs_difference(&sqp, &gd);
    let scale = terminal_mean(&unc);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        diff <= 0.02 * scale && secs < 600.0,
        format!(
            "mean |SQP - GD| = {diff:.3e}, 2% of uncontrolled terminal mean = {:.3e}; {secs:.1} s",
            0.02 * scale
        ),
    )
}

fn risk_shift(root: &Path) -> Outcome {
    let out = root.join("compare");
    let summary = commands::compare(&reduced_config(10.0), &out, Some(VALIDATION_N), Some(VALIDATION_SEED)).unwrap();
    let (_, averse) = read_matrix(&out.join("errors_averse.csv")).unwrap();
    let (_, neutral) = read_matrix(&out.join("errors_neutral.csv")).unwrap();
    let last = averse[0].len() - 1;
    let p_averse = percentile(&sorted_column(&averse, last), 95.0);
    let p_neutral = percentile(&sorted_column(&neutral, last), 95.0);
    let deltas: Vec<String> = summary
        .percentile_deltas
        .iter()
        .map(|row| format!("{:.2e}", row[row.len() - 1]))
        .collect();
    outcome(
        p_averse < p_neutral,
        format!(
            "terminal 95th percentile theta=10 {p_averse:.6e} vs theta=0 {p_neutral:.6e}; terminal deltas [{}] at percentiles {:?}",
            deltas.join(", "),
            summary.percentiles
        ),
    )
}

fn robustness_factors(root: &Path) -> Outcome {
    let summary: RobustnessSummary = commands::robustness(
        &root.join("cl"),
        &root.join("ol"),
        Some(&[0.0, 2.0]),
        Some(VALIDATION_N),
        Some(VALIDATION_SEED),
        None,
    )
    .unwrap();
    let m = |level, dir, ctl| summary.median(level, dir, ctl).unwrap();
    let factor = |a: f64, b: f64| (a / b).max(b / a);
    let ol0 = m(0.0, "plus", "ol");
    let cl0 = m(0.0, "plus", "cl");
    let ol_plus = m(2.0, "plus", "ol") / ol0;
    let cl_plus = factor(m(2.0, "plus", "cl"), cl0);
    let ol_minus = factor(m(2.0, "minus", "ol"), ol0);
    let cl_minus = factor(m(2.0, "minus", "cl"), cl0);
    let agree = (cl0 - ol0).abs() / ol0;
    outcome(
        ol_plus >= 1.5 && cl_plus < ol_plus && agree <= 0.02,
        format!(
            "level 2 (+): OL factor {ol_plus:.3} (min 1.5), CL factor {cl_plus:.3}; \
             level 2 (-): OL factor {ol_minus:.3}, CL factor {cl_minus:.3}; level 0 CL/OL gap {agree:.2e} (tol 2e-2)"
        ),
    )
}

fn quadratic_convergence() -> Outcome {
    let mut c = ExperimentConfig::default();
    c.discretization.mesh_width = 0.125;
    c.discretization.time_steps = 40;
    c.risk.samples = 40;
    c.risk.theta = 30.0;
    c.risk.covariance = CovarianceKind::PlugIn;
    c.profiles.expansion_initial = riskfb_cli::config::Profile::Constant { value: -6.0 };
    let exp = Experiment::build(&c).unwrap();
    let mut iterates = Vec::new();
    let options = SqpOptions {
        tolerance: 1e-14,
        max_iterations: 30,
    };
    let (state, _, _) = run_sqp_with(&exp.problem, exp.initial_expansion().unwrap(), options, |_, u| {
        iterates.push(u.clone())
    })
    .unwrap();
    let reference = state.control;
    let scale = reference.norm();
    let floor = 1e-12 * scale.max(1.0);
    let errors: Vec<f64> = iterates.iter().map(|u| u.axpy(-1.0, &reference).norm()).collect();
    let pre_floor: Vec<f64> = errors.iter().copied().take_while(|&e| e > floor).collect();
    let shown: Vec<String> = errors.iter().map(|e| format!("{e:.2e}")).collect();
    if pre_floor.len() < 3 {
        return outcome(false, format!("fewer than three pre-floor errors: [{}]", shown.join(", ")));
    }
    let tail = &pre_floor[pre_floor.len() - 3..];
    let logs: Vec<f64> = tail.windows(2).map(|w| (w[1] / (w[0] * w[0])).ln()).collect();
    let log_k = logs.iter().sum::<f64>() / logs.len() as f64;
    let residual = logs.iter().map(|l| (l - log_k).abs()).fold(0.0, f64::max);
    let k_single = tail.windows(2).map(|w| w[1] / (w[0] * w[0])).fold(0.0, f64::max);
    let holds = tail.windows(2).all(|w| w[1] <= k_single * w[0] * w[0]);
    let contracting = k_single * tail[1] < 1.0 && tail.windows(2).all(|w| w[1] < w[0]);
    outcome(
        holds && contracting,
        format!(
            "errors [{}]; last three pre-floor {:?}; K = {k_single:.3e} (log-fit K {:.3e}, log residual {residual:.3})",
            shown.join(", "),
            tail.iter().map(|e| format!("{e:.3e}")).collect::<Vec<_>>(),
            log_k.exp()
        ),
    )
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = walk(dir)
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| {
            (
                p.strip_prefix(dir).unwrap().display().to_string(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out
}

fn determinism(root: &Path) -> Outcome {
    let mut config = reduced_config(10.0);
    config.validation.realizations = 100;
    let mut snapshots = Vec::new();
    for rep in 0..2 {
        let dir = root.join(format!("det{rep}"));
        commands::solve(&config, &dir.join("cl")).unwrap();
        commands::openloop(&config, &dir.join("ol"), Some(50)).unwrap();
        commands::validate(&dir.join("cl"), 100, 3).unwrap();
        commands::robustness(&dir.join("cl"), &dir.join("ol"), Some(&[0.0, 1.0]), Some(100), Some(3), None).unwrap();
        snapshots.push(csv_files(&dir));
    }
    let identical = snapshots[0] == snapshots[1];
    outcome(
        identical && !snapshots[0].is_empty(),
        format!("{} CSV files compared, byte-identical: {identical}", snapshots[0].len()),
    )
}

fn main() -> ExitCode {
    let root = tempfile::tempdir().unwrap();
    let criteria: Vec<Criterion> = vec![
        ("1 gradient oracle", Box::new(gradient_oracle)),
        ("2 Q-operator oracle", Box::new(q_operator_oracle)),
        ("3 weighted covariance identities", Box::new(covariance_identities)),
        ("4 entropic risk properties", Box::new(entropic_properties)),
        ("5 Riccati oracle", Box::new(riccati_oracle)),
        ("6 SQP matches open loop", Box::new(|| sqp_matches_openloop(root.path()))),
        ("7 risk-aversion shift", Box::new(|| risk_shift(root.path()))),
        ("8 robustness", Box::new(|| robustness_factors(root.path()))),
        ("9 local quadratic convergence", Box::new(quadratic_convergence)),
        ("10 determinism", Box::new(|| determinism(root.path()))),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        let result = check();
        let tag = if result.pass { "PASS" } else { "FAIL" };
        if !result.pass {
            failed += 1;
        }
        println!("criterion {name}: {tag} ({})", result.detail);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
