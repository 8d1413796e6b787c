//! Builds the discretized control problem described by a configuration.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use riskfb::dynamics::{CrankNicolson, LinearSystem};
use riskfb::fem::{assemble, ActuatorSet, Field, Mesh1D};
use riskfb::galerkin::{GalerkinSystem, NodalTrajectory, PceTrajectory};
use riskfb::grid::TimeGrid;
use riskfb::pce::TotalDegreeIndexSet;
use riskfb::riccati::RiccatiScheme;
use riskfb::risk::{CovarianceForm, RiskModel, SampleNodeSet};
use riskfb::sqp::{ControlProblem, SqpOptions, StepRule};

use crate::config::{CovarianceKind, ExperimentConfig, NodeKind, RiccatiKind, StepKind};
use crate::error::CliError;

/// RNG stream of the risk sample nodes.
pub const NODE_STREAM: u64 = 1;
/// RNG stream of the validation parameter draws.
pub const VALIDATION_STREAM: u64 = 2;
/// RNG stream of the initial-condition noise.
pub const NOISE_STREAM: u64 = 3;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Parametric reaction field `ψ_j`, `j ≥ 1`.
pub fn reaction_field(j: usize, decay: f64) -> impl Fn(f64) -> f64 + Send + Sync {
    let scale = (j as f64).powf(-decay);
    let freq = j.div_ceil(2) as f64 * PI;
    let odd = j % 2 == 1;
    move |x: f64| {
        if odd {
            scale * (freq * x).cos()
        } else {
            scale * (freq * x).sin()
        }
    }
}

fn config_error(e: riskfb::Error) -> CliError {
    CliError::Config(e.to_string())
}

#[derive(Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub mesh: Mesh1D,
    pub problem: ControlProblem,
    /// `CᵀMC`, the weight of the reported tracking error.
    pub observed_mass: DMatrix<f64>,
    pub expansion_initial: DVector<f64>,
}

impl Experiment {
    pub fn build(config: &ExperimentConfig) -> Result<Self, CliError> {
        config.validate()?;
        let mesh = Mesh1D::from_width(config.discretization.mesh_width).map_err(config_error)?;
        let actuators = ActuatorSet::new(
            config.actuators.intervals.iter().map(|[a, b]| (*a, *b)).collect(),
            config.actuators.scaling,
        )
        .map_err(config_error)?;
        let reaction_mean = config.pde.reaction_mean;
        let mean = move |_: f64| reaction_mean;
        let fields: Vec<Box<Field>> = (1..=config.pde.parameters)
            .map(|j| Box::new(reaction_field(j, config.pde.decay)) as Box<Field>)
            .collect();
        let field_refs: Vec<&Field> = fields.iter().map(|f| f.as_ref()).collect();
        let fem = Arc::new(assemble(&mesh, &mean, &field_refs, &actuators));

        let index_set = TotalDegreeIndexSet::new(config.pde.parameters, config.discretization.chaos_degree);
        let system = GalerkinSystem::assemble(index_set, fem.clone(), config.pde.diffusion).map_err(config_error)?;
        let grid = TimeGrid::new(config.pde.horizon, config.discretization.time_steps).map_err(config_error)?;

        let target = reference_target(config, &mesh, &fem.mass, &fem.stiffness, &fem.input, grid)?;
        let terminal_target = match &config.profiles.terminal_target {
            Some(p) => mesh.interpolate(|x| p.eval(x)),
            None => target.values[grid.steps()].clone(),
        };

        let nodes = match config.risk.nodes {
            NodeKind::MonteCarlo => {
                let mut rng = stream_rng(config.risk.seed, NODE_STREAM);
                SampleNodeSet::monte_carlo(config.pde.parameters, config.risk.samples, &mut rng)
                    .map_err(config_error)?
            }
            NodeKind::TensorGauss => SampleNodeSet::tensor_gauss(config.pde.parameters, config.risk.gauss_points),
        };
        let covariance = match config.risk.covariance {
            CovarianceKind::Unbiased => CovarianceForm::Unbiased,
            CovarianceKind::PlugIn => CovarianceForm::PlugIn,
        };
        let c = config.observation.tracking;
        let observed_mass = c * c * &fem.mass;
        let p = config.observation.terminal;
        let terminal_weight = (p != 0.0).then(|| p * p * &fem.mass);
        let risk = RiskModel::new(
            config.risk.theta,
            nodes,
            covariance,
            system.index_set(),
            observed_mass.clone(),
            terminal_weight,
            target,
            terminal_target,
        )
        .map_err(config_error)?;

        let scheme = match config.solver.riccati {
            RiccatiKind::Discrete => RiccatiScheme::Discrete,
            RiccatiKind::Rk4 => RiccatiScheme::Rk4,
        };
        let y0 = mesh.interpolate(|x| config.profiles.initial.eval(x));
        let expansion_initial = mesh.interpolate(|x| config.profiles.expansion_initial.eval(x));
        let problem = ControlProblem::new(system, grid, y0, risk, scheme).map_err(config_error)?;
        Ok(Self {
            config: config.clone(),
            mesh,
            problem,
            observed_mass,
            expansion_initial,
        })
    }

    pub fn grid(&self) -> TimeGrid {
        self.problem.grid
    }

    pub fn target(&self) -> &NodalTrajectory {
        self.problem.risk.target()
    }

    /// Uncontrolled chaos trajectory from the expansion initial profile.
    pub fn initial_expansion(&self) -> Result<PceTrajectory, CliError> {
        self.problem
            .uncontrolled_from(&self.expansion_initial)
            .map_err(|e| CliError::Solver(e.to_string()))
    }

    pub fn sqp_options(&self) -> SqpOptions {
        SqpOptions {
            tolerance: self.config.solver.tolerance,
            max_iterations: self.config.solver.max_iterations,
        }
    }

    pub fn step_rule(&self) -> StepRule {
        match self.config.solver.gd_step {
            StepKind::Armijo => StepRule::Armijo {
                initial: self.config.solver.gd_step_length,
                shrink: 0.5,
                sufficient_decrease: 1e-4,
                max_shrinks: 40,
            },
            StepKind::Fixed => StepRule::Fixed(self.config.solver.gd_step_length),
        }
    }
}

/// Reaction-free uncontrolled solve from the target initial profile.
fn reference_target(
    config: &ExperimentConfig,
    mesh: &Mesh1D,
    mass: &DMatrix<f64>,
    stiffness: &DMatrix<f64>,
    input: &DMatrix<f64>,
    grid: TimeGrid,
) -> Result<NodalTrajectory, CliError> {
    let system = LinearSystem::new(mass.clone(), -config.pde.diffusion * stiffness, input.clone())
        .map_err(config_error)?;
    let cn = CrankNicolson::new(&system, grid.dt()).map_err(config_error)?;
    let zero = DVector::zeros(input.ncols());
    let mut values = Vec::with_capacity(grid.len());
    values.push(mesh.interpolate(|x| config.profiles.target_initial.eval(x)));
    for k in 0..grid.steps() {
        let next = cn.step(&values[k], &zero, None).map_err(config_error)?;
        values.push(next);
    }
    Ok(NodalTrajectory { grid, values })
}
