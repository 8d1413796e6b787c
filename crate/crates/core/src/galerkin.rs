//! Stochastic Galerkin discretization of the parametric reaction-diffusion
//! system in a total-degree Legendre chaos basis.
//!
//! Coefficient vectors are stored mode-major: block `m` (length `d`) holds
//! the FEM nodal vector of chaos mode `ν_m`, and block 0 is the mean mode.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::dynamics::{CrankNicolson, LinearSystem};
use crate::error::{check_dim, Error, Result};
use crate::fem::FemMatrices;
use crate::grid::TimeGrid;
use crate::pce::{multiplication_matrix, TotalDegreeIndexSet};

/// Deterministic forcing given as an FEM load vector at time `t`.
pub type Forcing = Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>;

/// Control signal, held constant on each step: `values[k]` acts on
/// `[t_k, t_{k+1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlTrajectory {
    pub grid: TimeGrid,
    pub values: Vec<DVector<f64>>,
}

impl ControlTrajectory {
    pub fn zeros(grid: TimeGrid, inputs: usize) -> Self {
        Self {
            grid,
            values: vec![DVector::zeros(inputs); grid.steps()],
        }
    }

    pub fn inputs(&self) -> usize {
        self.values.first().map_or(0, |v| v.len())
    }

    /// `⟨a, b⟩_{U_T} = Σ_k Δt a_k·b_k`.
    pub fn inner(&self, other: &Self) -> f64 {
        let dt = self.grid.dt();
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| dt * a.dot(b))
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.inner(self).max(0.0).sqrt()
    }

    /// `self + alpha * other`.
    pub fn axpy(&self, alpha: f64, other: &Self) -> Self {
        Self {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + alpha * b)
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Chaos coefficient trajectory `y(σ; t) ≈ Σ_ν y_ν(t) L_ν(σ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PceTrajectory {
    pub grid: TimeGrid,
    pub modes: usize,
    pub fem_nodes: usize,
    pub coeffs: Vec<DVector<f64>>,
}

impl PceTrajectory {
    /// Coefficients at node `k` viewed as a `d × (K+1)` matrix (columns are modes).
    pub fn mode_matrix(&self, k: usize) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.fem_nodes, self.modes, self.coeffs[k].as_slice())
    }

    pub fn mean(&self, k: usize) -> DVector<f64> {
        self.coeffs[k].rows(0, self.fem_nodes).into_owned()
    }

    /// States at node `k` for each row of a basis matrix (`d × N`).
    pub fn samples_at(&self, k: usize, basis: &DMatrix<f64>) -> DMatrix<f64> {
        self.mode_matrix(k) * basis.transpose()
    }

    /// Surrogate evaluation `Σ_ν y_ν(t) L_ν(σ)` at every time node.
    pub fn surrogate_eval(&self, set: &TotalDegreeIndexSet, sigma: &[f64]) -> Result<NodalTrajectory> {
        check_dim(self.modes, set.len(), "index set vs trajectory modes")?;
        let l = set.eval_all(sigma)?;
        Ok(NodalTrajectory {
            grid: self.grid,
            values: (0..self.grid.len()).map(|k| self.mode_matrix(k) * &l).collect(),
        })
    }
}

/// Deterministic FEM trajectory on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct NodalTrajectory {
    pub grid: TimeGrid,
    pub values: Vec<DVector<f64>>,
}

impl NodalTrajectory {
    pub fn at(&self, k: usize) -> &DVector<f64> {
        &self.values[k]
    }
}

/// `‖C(y(t_k) − g(t_k))‖_H` for every node, where `observed_mass = CᵀMC`.
pub fn tracking_error(
    path: &NodalTrajectory,
    target: &NodalTrajectory,
    observed_mass: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    check_dim(target.grid.len(), path.grid.len(), "target grid")?;
    if path.grid != target.grid {
        return Err(Error::InvalidArgument("trajectory and target grids differ".into()));
    }
    Ok(path
        .values
        .iter()
        .zip(&target.values)
        .map(|(y, g)| {
            let diff = y - g;
            diff.dot(&(observed_mass * &diff)).max(0.0).sqrt()
        })
        .collect())
}

#[derive(Clone)]
pub struct GalerkinSystem {
    index_set: TotalDegreeIndexSet,
    fem: Arc<FemMatrices>,
    diffusion: f64,
    /// `A_0 = −(diffusion·S + R̄)`.
    a0: DMatrix<f64>,
    /// `A_j = −R_j`.
    a_param: Vec<DMatrix<f64>>,
    multiplication: Vec<DMatrix<f64>>,
    operator: DMatrix<f64>,
    input_block: DMatrix<f64>,
    forcing: Option<Forcing>,
}

impl std::fmt::Debug for GalerkinSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GalerkinSystem")
            .field("modes", &self.modes())
            .field("fem_nodes", &self.fem_nodes())
            .field("diffusion", &self.diffusion)
            .field("forcing", &self.forcing.is_some())
            .finish()
    }
}

impl GalerkinSystem {
    pub fn assemble(index_set: TotalDegreeIndexSet, fem: Arc<FemMatrices>, diffusion: f64) -> Result<Self> {
        check_dim(index_set.dim(), fem.parameters(), "parametric fields vs index set")?;
        let d = fem.nodes();
        let modes = index_set.len();
        let a0 = -(diffusion * &fem.stiffness + &fem.reaction_mean);
        let a_param: Vec<DMatrix<f64>> = fem.reaction.iter().map(|r| -r).collect();
        let multiplication = (0..index_set.dim())
            .map(|j| multiplication_matrix(j, &index_set))
            .collect::<Result<Vec<_>>>()?;

        let n = modes * d;
        let mut operator = DMatrix::zeros(n, n);
        for m in 0..modes {
            let mut blk = operator.view_mut((m * d, m * d), (d, d));
            blk += &a0;
        }
        for (aj, mj) in a_param.iter().zip(&multiplication) {
            for r in 0..modes {
                for c in 0..modes {
                    let w = mj[(r, c)];
                    if w != 0.0 {
                        let mut blk = operator.view_mut((r * d, c * d), (d, d));
                        blk += w * aj;
                    }
                }
            }
        }
        let mut input_block = DMatrix::zeros(n, fem.actuators());
        input_block.view_mut((0, 0), (d, fem.actuators())).copy_from(&fem.input);

        Ok(Self {
            index_set,
            fem,
            diffusion,
            a0,
            a_param,
            multiplication,
            operator,
            input_block,
            forcing: None,
        })
    }

    pub fn with_forcing(mut self, forcing: Forcing) -> Self {
        self.forcing = Some(forcing);
        self
    }

    pub fn index_set(&self) -> &TotalDegreeIndexSet {
        &self.index_set
    }

    pub fn fem(&self) -> &FemMatrices {
        &self.fem
    }

    pub fn diffusion(&self) -> f64 {
        self.diffusion
    }

    pub fn modes(&self) -> usize {
        self.index_set.len()
    }

    pub fn fem_nodes(&self) -> usize {
        self.fem.nodes()
    }

    /// Total coefficient count `(K+1)·d`.
    pub fn dim(&self) -> usize {
        self.modes() * self.fem_nodes()
    }

    pub fn inputs(&self) -> usize {
        self.fem.actuators()
    }

    pub fn operator(&self) -> &DMatrix<f64> {
        &self.operator
    }

    pub fn input_block(&self) -> &DMatrix<f64> {
        &self.input_block
    }

    pub fn multiplication(&self) -> &[DMatrix<f64>] {
        &self.multiplication
    }

    /// Block-diagonal `I ⊗ M`.
    pub fn block_mass(&self) -> DMatrix<f64> {
        block_diagonal(&self.fem.mass, self.modes())
    }

    /// Structured apply `y ↦ (A_0 on each block) + Σ_j A_j (M_j mixing)`.
    pub fn apply_operator(&self, y: &DVector<f64>) -> DVector<f64> {
        let d = self.fem_nodes();
        let modes = self.modes();
        let ymat = DMatrix::from_column_slice(d, modes, y.as_slice());
        let mut out = &self.a0 * &ymat;
        for (aj, mj) in self.a_param.iter().zip(&self.multiplication) {
            // Block r of the result gathers Σ_c [M_j]_{rc} A_j y_c.
            out += aj * &ymat * mj.transpose();
        }
        DVector::from_column_slice(out.as_slice())
    }

    pub fn linear_system(&self) -> LinearSystem {
        LinearSystem {
            mass: self.block_mass(),
            operator: self.operator.clone(),
            input: self.input_block.clone(),
        }
    }

    pub fn stepper(&self, grid: &TimeGrid) -> Result<CrankNicolson> {
        CrankNicolson::new(&self.linear_system(), grid.dt())
    }

    /// Step-averaged forcing load for step `k`, injected in the mean mode.
    pub fn forcing_load(&self, grid: &TimeGrid, k: usize) -> Option<DVector<f64>> {
        let f = self.forcing.as_ref()?;
        let mid = 0.5 * (f(grid.time(k)) + f(grid.time(k + 1)));
        let mut out = DVector::zeros(self.dim());
        out.rows_mut(0, self.fem_nodes()).copy_from(&mid);
        Some(out)
    }

    /// Lifted forcing at every time node.
    pub fn forcing_nodes(&self, grid: &TimeGrid) -> Option<Vec<DVector<f64>>> {
        let f = self.forcing.as_ref()?;
        Some(
            grid.times()
                .into_iter()
                .map(|t| {
                    let mut out = DVector::zeros(self.dim());
                    out.rows_mut(0, self.fem_nodes()).copy_from(&f(t));
                    out
                })
                .collect(),
        )
    }

    fn sample_forcing_load(&self, grid: &TimeGrid, k: usize) -> Option<DVector<f64>> {
        let f = self.forcing.as_ref()?;
        Some(0.5 * (f(grid.time(k)) + f(grid.time(k + 1))))
    }

    /// Deterministic initial state placed in the mean mode.
    pub fn lift_initial(&self, y0: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.fem_nodes(), y0.len(), "initial condition")?;
        let mut out = DVector::zeros(self.dim());
        out.rows_mut(0, self.fem_nodes()).copy_from(y0);
        Ok(out)
    }

    pub fn forward_solve(&self, u: &ControlTrajectory, y0: &DVector<f64>) -> Result<PceTrajectory> {
        let cn = self.stepper(&u.grid)?;
        self.forward_solve_with(&cn, u, &self.lift_initial(y0)?)
    }

    /// Forward sweep from a full (possibly random) initial coefficient vector.
    pub fn forward_solve_with(
        &self,
        cn: &CrankNicolson,
        u: &ControlTrajectory,
        y0: &DVector<f64>,
    ) -> Result<PceTrajectory> {
        check_dim(u.grid.steps(), u.values.len(), "control steps")?;
        check_dim(self.dim(), y0.len(), "initial coefficients")?;
        let mut coeffs = Vec::with_capacity(u.grid.len());
        coeffs.push(y0.clone());
        for (k, uk) in u.values.iter().enumerate() {
            check_dim(self.inputs(), uk.len(), "control value")?;
            let load = self.forcing_load(&u.grid, k);
            let next = cn.step(&coeffs[k], uk, load.as_ref())?;
            coeffs.push(next);
        }
        Ok(PceTrajectory {
            grid: u.grid,
            modes: self.modes(),
            fem_nodes: self.fem_nodes(),
            coeffs,
        })
    }

    /// Deterministic system at a fixed parameter point.
    pub fn sample_system(&self, sigma: &[f64]) -> Result<LinearSystem> {
        for &s in sigma {
            if !(-1.0..=1.0).contains(&s) {
                return Err(Error::Domain { value: s });
            }
        }
        let reaction = self.fem.reaction_at(sigma)?;
        let operator = -(self.diffusion * &self.fem.stiffness + reaction);
        LinearSystem::new(self.fem.mass.clone(), operator, self.fem.input.clone())
    }

    pub fn sample_path_solve(
        &self,
        sigma: &[f64],
        u: &ControlTrajectory,
        y0: &DVector<f64>,
    ) -> Result<NodalTrajectory> {
        check_dim(self.fem_nodes(), y0.len(), "initial condition")?;
        let cn = CrankNicolson::new(&self.sample_system(sigma)?, u.grid.dt())?;
        let mut values = Vec::with_capacity(u.grid.len());
        values.push(y0.clone());
        for (k, uk) in u.values.iter().enumerate() {
            let load = self.sample_forcing_load(&u.grid, k);
            let next = cn.step(&values[k], uk, load.as_ref())?;
            values.push(next);
        }
        Ok(NodalTrajectory {
            grid: u.grid,
            values,
        })
    }

    /// Tracking errors of sample-path solves for many parameter points, in
    /// input order (computed in parallel).
    pub fn sample_tracking_errors(
        &self,
        sigmas: &[Vec<f64>],
        u: &ControlTrajectory,
        y0: &DVector<f64>,
        target: &NodalTrajectory,
        observed_mass: &DMatrix<f64>,
    ) -> Result<Vec<Vec<f64>>> {
        sigmas
            .par_iter()
            .map(|sigma| {
                let path = self.sample_path_solve(sigma, u, y0)?;
                tracking_error(&path, target, observed_mass)
            })
            .collect()
    }
}

pub fn block_diagonal(block: &DMatrix<f64>, copies: usize) -> DMatrix<f64> {
    let d = block.nrows();
    let mut out = DMatrix::zeros(d * copies, d * copies);
    for m in 0..copies {
        out.view_mut((m * d, m * d), (d, d)).copy_from(block);
    }
    out
}
