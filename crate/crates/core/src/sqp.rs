//! Outer SQP iteration with Riccati feedback subproblems, the adjoint
//! reduced gradient, and the open-loop gradient-descent baseline.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::dynamics::CrankNicolson;
use crate::error::{check_dim, Error, Result};
use crate::galerkin::{ControlTrajectory, GalerkinSystem, PceTrajectory};
use crate::grid::TimeGrid;
use crate::riccati::{closed_loop_solve, solve_discrete, solve_dre, QuadraticCost, RiccatiScheme, RiccatiSolution};
use crate::risk::RiskModel;

/// A fully specified discretized control problem.
#[derive(Debug)]
pub struct ControlProblem {
    pub system: GalerkinSystem,
    pub grid: TimeGrid,
    /// Deterministic initial condition (FEM nodal values).
    pub y0: DVector<f64>,
    pub risk: RiskModel,
    pub scheme: RiccatiScheme,
    cn: CrankNicolson,
    forcing: Option<Vec<DVector<f64>>>,
}

/// Objective, Riesz gradient and state at one control.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub objective: f64,
    pub gradient: ControlTrajectory,
    pub trajectory: PceTrajectory,
}

impl ControlProblem {
    pub fn new(
        system: GalerkinSystem,
        grid: TimeGrid,
        y0: DVector<f64>,
        risk: RiskModel,
        scheme: RiccatiScheme,
    ) -> Result<Self> {
        check_dim(system.fem_nodes(), y0.len(), "initial condition")?;
        check_dim(grid.len(), risk.target().grid.len(), "target grid")?;
        check_dim(system.modes(), risk.basis().ncols(), "risk basis modes")?;
        let cn = system.stepper(&grid)?;
        let forcing = system.forcing_nodes(&grid);
        Ok(Self {
            system,
            grid,
            y0,
            risk,
            scheme,
            cn,
            forcing,
        })
    }

    pub fn stepper(&self) -> &CrankNicolson {
        &self.cn
    }

    pub fn zero_control(&self) -> ControlTrajectory {
        ControlTrajectory::zeros(self.grid, self.system.inputs())
    }

    pub fn lifted_initial(&self) -> DVector<f64> {
        self.system
            .lift_initial(&self.y0)
            .expect("initial condition length checked at construction")
    }

    pub fn forward(&self, u: &ControlTrajectory) -> Result<PceTrajectory> {
        self.system.forward_solve_with(&self.cn, u, &self.lifted_initial())
    }

    /// Uncontrolled Galerkin solve from another deterministic initial state.
    pub fn uncontrolled_from(&self, initial: &DVector<f64>) -> Result<PceTrajectory> {
        let lifted = self.system.lift_initial(initial)?;
        self.system.forward_solve_with(&self.cn, &self.zero_control(), &lifted)
    }

    pub fn objective(&self, u: &ControlTrajectory) -> Result<f64> {
        self.risk.objective(&self.forward(u)?, u)
    }

    pub fn evaluate(&self, u: &ControlTrajectory) -> Result<Evaluation> {
        let trajectory = self.forward(u)?;
        self.evaluate_along(u, trajectory)
    }

    /// Gradient by the exact discrete adjoint of the Crank–Nicolson sweep;
    /// `trajectory` must be the state generated by `u`.
    pub fn evaluate_along(&self, u: &ControlTrajectory, trajectory: PceTrajectory) -> Result<Evaluation> {
        check_dim(self.grid.steps(), u.values.len(), "control steps")?;
        let objective = self.risk.objective(&trajectory, u)?;
        let weights = self.grid.trapezoid_weights();
        let n = self.grid.steps();
        let mut sources = (0..self.grid.len())
            .into_par_iter()
            .map(|k| {
                let stage = self.risk.running_stage(&trajectory, k, false)?;
                Ok(weights[k] * stage.gradient)
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(term) = self.risk.terminal_stage(&trajectory, false)? {
            sources[n] += term.gradient;
        }
        let input = self.system.input_block();
        let mut values = vec![DVector::zeros(self.system.inputs()); n];
        let mut mu = self.cn.solve_transpose(&sources[n])?;
        for k in (0..n).rev() {
            values[k] = &u.values[k] + input.tr_mul(&mu);
            if k > 0 {
                mu = self
                    .cn
                    .solve_transpose(&(self.cn.explicit_transpose_mul(&mu) + &sources[k]))?;
            }
        }
        let gradient = ControlTrajectory {
            grid: self.grid,
            values,
        };
        if !gradient.is_finite() {
            return Err(Error::NonFinite("reduced gradient"));
        }
        Ok(Evaluation {
            objective,
            gradient,
            trajectory,
        })
    }

    pub fn reduced_gradient(&self, u: &ControlTrajectory) -> Result<ControlTrajectory> {
        Ok(self.evaluate(u)?.gradient)
    }

    /// Riccati solution of the quadratic model expanded at `expansion`.
    pub fn subproblem(&self, expansion: &PceTrajectory) -> Result<RiccatiSolution> {
        let ops = self.risk.operators(expansion)?;
        let cost = QuadraticCost::from_operators(&ops, expansion)?;
        match self.scheme {
            RiccatiScheme::Discrete => solve_discrete(&self.cn, &self.grid, self.forcing.as_deref(), &cost),
            RiccatiScheme::Rk4 => solve_dre(
                &self.system.linear_system(),
                &self.grid,
                self.forcing.as_deref(),
                &cost,
                None,
            ),
        }
    }

    /// Closed loop from a full coefficient vector.
    pub fn closed_loop(
        &self,
        ric: &RiccatiSolution,
        y0: &DVector<f64>,
    ) -> Result<(PceTrajectory, ControlTrajectory)> {
        closed_loop_solve(
            &self.cn,
            &ric.law,
            y0,
            self.forcing.as_deref(),
            self.system.modes(),
            self.system.fem_nodes(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SqpOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SqpOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-6,
            max_iterations: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    pub gradient_norm: f64,
    /// `‖u^{(k)} − u^{(k−1)}‖` for SQP, the accepted step length for GD.
    pub step: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Tolerance,
    MaxIterations,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::Tolerance => "tolerance",
            Termination::MaxIterations => "max-iterations",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SqpReport {
    pub records: Vec<IterationRecord>,
    pub termination: Termination,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SqpState {
    pub k: usize,
    pub expansion: PceTrajectory,
    pub control: ControlTrajectory,
    pub objective_value: f64,
    pub gradient_norm: f64,
}

/// Number of consecutive non-decreasing objective values that triggers a warning.
const STALL_WARNING: usize = 3;

/// Runs the SQP loop from `initial_expansion`; `on_iteration` observes each
/// iterate's control (used for convergence studies).
pub fn run_sqp_with(
    problem: &ControlProblem,
    initial_expansion: PceTrajectory,
    options: SqpOptions,
    mut on_iteration: impl FnMut(&IterationRecord, &ControlTrajectory),
) -> Result<(SqpState, RiccatiSolution, SqpReport)> {
    if options.max_iterations == 0 {
        return Err(Error::InvalidArgument("SQP needs at least one iteration".into()));
    }
    let y0 = problem.lifted_initial();
    let mut expansion = initial_expansion;
    let mut previous = problem.zero_control();
    let mut records: Vec<IterationRecord> = Vec::new();
    let mut warnings = Vec::new();
    let mut stall = 0;
    let mut termination = Termination::MaxIterations;
    let mut last = None;

    for k in 1..=options.max_iterations {
        let ric = problem.subproblem(&expansion)?;
        let (state, control) = problem.closed_loop(&ric, &y0)?;
        let eval = problem.evaluate_along(&control, state)?;
        let gradient_norm = eval.gradient.norm();
        let record = IterationRecord {
            iteration: k,
            objective: eval.objective,
            gradient_norm,
            step: control.axpy(-1.0, &previous).norm(),
        };
        log::info!(
            "sqp iteration {k}: J = {:.12e}, |grad| = {:.3e}, |du| = {:.3e}",
            record.objective,
            record.gradient_norm,
            record.step
        );
        if let Some(prev) = records.last() {
            if record.objective >= prev.objective {
                stall += 1;
                if stall == STALL_WARNING {
                    let msg = format!(
                        "objective has not decreased for {STALL_WARNING} consecutive iterations (iteration {k}); \
                         the initial expansion may be too far from the minimizer"
                    );
                    log::warn!("{msg}");
                    warnings.push(msg);
                }
            } else {
                stall = 0;
            }
        }
        on_iteration(&record, &control);
        records.push(record);
        previous = control.clone();
        expansion = eval.trajectory;
        last = Some((control, eval.objective, gradient_norm, ric));
        if gradient_norm < options.tolerance {
            termination = Termination::Tolerance;
            break;
        }
    }

    let (control, objective_value, gradient_norm, ric) = last.expect("at least one iteration");
    Ok((
        SqpState {
            k: records.len(),
            expansion,
            control,
            objective_value,
            gradient_norm,
        },
        ric,
        SqpReport {
            records,
            termination,
            warnings,
        },
    ))
}

pub fn run_sqp(
    problem: &ControlProblem,
    initial_expansion: PceTrajectory,
    options: SqpOptions,
) -> Result<(SqpState, RiccatiSolution, SqpReport)> {
    run_sqp_with(problem, initial_expansion, options, |_, _| {})
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    Armijo {
        initial: f64,
        shrink: f64,
        sufficient_decrease: f64,
        max_shrinks: usize,
    },
    Fixed(f64),
}

impl Default for StepRule {
    fn default() -> Self {
        StepRule::Armijo {
            initial: 1.0,
            shrink: 0.5,
            sufficient_decrease: 1e-4,
            max_shrinks: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GdReport {
    pub records: Vec<IterationRecord>,
    pub final_objective: f64,
    pub final_gradient_norm: f64,
}

/// Open-loop gradient descent `u ← u − α∇J(u)`; stops early once the
/// gradient norm drops below `tolerance`.
pub fn run_openloop_gd(
    problem: &ControlProblem,
    start: ControlTrajectory,
    iterations: usize,
    rule: StepRule,
    tolerance: f64,
) -> Result<(ControlTrajectory, GdReport)> {
    let mut u = start;
    let mut eval = problem.evaluate(&u)?;
    let mut records = Vec::with_capacity(iterations);
    for it in 1..=iterations {
        let gnorm = eval.gradient.norm();
        if gnorm < tolerance {
            break;
        }
        let (next_u, next_eval, alpha) = match rule {
            StepRule::Fixed(alpha) => {
                let cand = u.axpy(-alpha, &eval.gradient);
                let e = problem.evaluate(&cand)?;
                (cand, e, alpha)
            }
            StepRule::Armijo {
                initial,
                shrink,
                sufficient_decrease,
                max_shrinks,
            } => {
                let mut alpha = initial;
                let mut accepted = None;
                for _ in 0..=max_shrinks {
                    let cand = u.axpy(-alpha, &eval.gradient);
                    let value = problem.objective(&cand)?;
                    if value <= eval.objective - sufficient_decrease * alpha * gnorm * gnorm {
                        accepted = Some(cand);
                        break;
                    }
                    alpha *= shrink;
                }
                let cand = accepted.ok_or(Error::LineSearch {
                    iteration: it,
                    shrinks: max_shrinks,
                })?;
                let e = problem.evaluate(&cand)?;
                (cand, e, alpha)
            }
        };
        u = next_u;
        eval = next_eval;
        let record = IterationRecord {
            iteration: it,
            objective: eval.objective,
            gradient_norm: eval.gradient.norm(),
            step: alpha,
        };
        log::debug!(
            "gd iteration {it}: J = {:.12e}, |grad| = {:.3e}, alpha = {alpha}",
            record.objective,
            record.gradient_norm
        );
        records.push(record);
    }
    let report = GdReport {
        records,
        final_objective: eval.objective,
        final_gradient_norm: eval.gradient.norm(),
    };
    Ok((u, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{assemble, ActuatorSet, Field, Mesh1D};
    use crate::galerkin::NodalTrajectory;
    use crate::pce::TotalDegreeIndexSet;
    use crate::risk::{CovarianceForm, SampleNodeSet};
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn problem(s: usize, p: usize, theta: f64, tracking: f64, cov: CovarianceForm) -> ControlProblem {
        let mesh = Mesh1D::uniform(8).unwrap();
        let act = ActuatorSet::new(vec![(0.1, 0.3), (0.4, 0.6), (0.7, 0.9)], 10f64.sqrt()).unwrap();
        let mean = |_: f64| 0.2;
        let psi = |x: f64| (PI * x).cos();
        let fields: Vec<&Field> = (0..s).map(|_| &psi as &Field).collect();
        let fem = assemble(&mesh, &mean, &fields, &act);
        let mass = fem.mass.clone();
        let sys = GalerkinSystem::assemble(TotalDegreeIndexSet::new(s, p), Arc::new(fem), 0.5).unwrap();
        let grid = TimeGrid::new(0.5, 10).unwrap();
        let g = NodalTrajectory {
            grid,
            values: (0..grid.len())
                .map(|k| mesh.interpolate(|x| 1.25 - (2.0 * PI * x).cos() * (1.0 - grid.time(k))))
                .collect(),
        };
        let nodes = SampleNodeSet::monte_carlo_seeded(s, 20, 4).unwrap();
        let risk = RiskModel::new(
            theta,
            nodes,
            cov,
            sys.index_set(),
            tracking * tracking * &mass,
            Some(0.25 * &mass),
            g,
            DVector::from_element(9, 1.0),
        )
        .unwrap();
        let y0 = mesh.interpolate(|x| 4.0 - (2.0 * PI * x).cos());
        ControlProblem::new(sys, grid, y0, risk, RiccatiScheme::Discrete).unwrap()
    }

    fn random_control(grid: TimeGrid, seed: u64) -> ControlTrajectory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ControlTrajectory {
            grid,
            values: (0..grid.steps())
                .map(|_| DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0)))
                .collect(),
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let prob = problem(1, 1, 1.0, 1.0, CovarianceForm::Unbiased);
        let u = random_control(prob.grid, 1);
        let grad = prob.reduced_gradient(&u).unwrap();
        for seed in 0..4 {
            let dir = random_control(prob.grid, 100 + seed);
            let eps = 1e-5;
            let fd = (prob.objective(&u.axpy(eps, &dir)).unwrap() - prob.objective(&u.axpy(-eps, &dir)).unwrap())
                / (2.0 * eps);
            let an = grad.inner(&dir);
            assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "{fd} vs {an}");
        }
    }

    #[test]
    fn untracked_gradient_is_the_control() {
        let mut prob = problem(1, 1, 1.0, 0.0, CovarianceForm::Unbiased);
        let grid = prob.grid;
        prob.risk = RiskModel::new(
            1.0,
            prob.risk.nodes.clone(),
            CovarianceForm::Unbiased,
            prob.system.index_set(),
            DMatrix::zeros(9, 9),
            None,
            prob.risk.target().clone(),
            DVector::zeros(9),
        )
        .unwrap();
        let u = random_control(grid, 5);
        let g = prob.reduced_gradient(&u).unwrap();
        assert!((g.axpy(-1.0, &u)).norm() < 1e-15);
        let (out, _) = run_openloop_gd(&prob, u, 1, StepRule::default(), 0.0).unwrap();
        assert!(out.norm() < 1e-15);
    }

    #[test]
    fn deterministic_lqr_converges_immediately() {
        let prob = problem(0, 2, 0.0, 1.0, CovarianceForm::Unbiased);
        let start = prob.uncontrolled_from(&prob.y0.map(|v| v - 3.0)).unwrap();
        let (state, _, report) = run_sqp(&prob, start, SqpOptions { tolerance: 1e-9, max_iterations: 5 }).unwrap();
        assert!(report.records[0].gradient_norm < 1e-9, "{:?}", report.records);
        assert_eq!(report.termination, Termination::Tolerance);
        assert_eq!(state.k, 1);
    }

    #[test]
    fn sqp_reaches_stationarity_and_beats_gd() {
        let prob = problem(1, 2, 2.0, 1.0, CovarianceForm::PlugIn);
        let start = prob.uncontrolled_from(&prob.y0.map(|v| v - 3.0)).unwrap();
        let (state, _, report) = run_sqp(&prob, start, SqpOptions { tolerance: 1e-9, max_iterations: 20 }).unwrap();
        assert_eq!(report.termination, Termination::Tolerance, "{:?}", report.records);
        assert!(state.gradient_norm < 1e-9);
        let (_, gd) = run_openloop_gd(&prob, prob.zero_control(), 30, StepRule::default(), 0.0).unwrap();
        assert!(state.objective_value <= gd.final_objective + 1e-12);
        let objs: Vec<f64> = gd.records.iter().map(|r| r.objective).collect();
        assert!(objs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn runs_are_deterministic() {
        let run = || {
            let prob = problem(1, 1, 5.0, 1.0, CovarianceForm::Unbiased);
            let start = prob.uncontrolled_from(&prob.y0.map(|v| v - 3.0)).unwrap();
            run_sqp(&prob, start, SqpOptions { tolerance: 1e-12, max_iterations: 4 }).unwrap().2
        };
        assert_eq!(run(), run());
    }
}
