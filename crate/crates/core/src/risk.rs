//! Entropic risk, exponential-tilt weights, weighted covariances and the
//! risk-adjusted quadratic cost operators of the linear-quadratic subproblems.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::galerkin::{ControlTrajectory, NodalTrajectory, PceTrajectory};
use crate::pce::{GaussRule, TotalDegreeIndexSet};

/// Relative eigenvalue floor below which an assembled cost matrix is rejected.
pub const CLIP_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskParams {
    pub theta: f64,
    pub samples: usize,
    pub seed: u64,
}

impl RiskParams {
    pub fn new(theta: f64, samples: usize, seed: u64) -> Result<Self> {
        if !(theta.is_finite() && theta >= 0.0) {
            return Err(Error::InvalidArgument(format!("theta = {theta} must be finite and >= 0")));
        }
        if samples < 2 {
            return Err(Error::InvalidArgument(format!("sample count {samples} must be >= 2")));
        }
        Ok(Self { theta, samples, seed })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeRule {
    MonteCarlo,
    TensorGauss,
}

/// Form of the weighted empirical covariance entering the second-order term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovarianceForm {
    /// `(Nω_i − ω_i²)/(N(N−1))` diagonal, `−ω_iω_j/(N(N−1))` off-diagonal.
    Unbiased,
    /// `diag(πω) − (πω)(πω)ᵀ`; the exact second derivative of the sampled risk.
    PlugIn,
}

/// Fixed parameter nodes with probability weights `π_i` summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleNodeSet {
    pub nodes: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub rule: NodeRule,
}

impl SampleNodeSet {
    pub fn monte_carlo(dim: usize, count: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidArgument("node set needs at least one node".into()));
        }
        let nodes = (0..count)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect())
            .collect();
        Ok(Self {
            nodes,
            weights: vec![1.0 / count as f64; count],
            rule: NodeRule::MonteCarlo,
        })
    }

    pub fn monte_carlo_seeded(dim: usize, count: usize, seed: u64) -> Result<Self> {
        Self::monte_carlo(dim, count, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn tensor_gauss(dim: usize, points_per_dim: usize) -> Self {
        let (nodes, weights) = GaussRule::new(points_per_dim).tensor(dim);
        Self {
            nodes,
            weights,
            rule: NodeRule::TensorGauss,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn equal_weights(&self) -> bool {
        let w0 = self.weights[0];
        self.weights.iter().all(|&w| w == w0)
    }
}

/// `R_θ(X) = (1/θ) log mean exp(θX)`, or the sample mean for `θ = 0`.
pub fn entropic_risk(samples: &[f64], theta: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("entropic risk of an empty sample".into()));
    }
    let probs = vec![1.0 / samples.len() as f64; samples.len()];
    entropic_risk_weighted(samples, &probs, theta)
}

/// Entropic risk under probability weights `probs`.
pub fn entropic_risk_weighted(samples: &[f64], probs: &[f64], theta: f64) -> Result<f64> {
    check_dim(samples.len(), probs.len(), "risk sample weights")?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("entropic risk of an empty sample".into()));
    }
    if !(theta.is_finite() && theta >= 0.0) {
        return Err(Error::InvalidArgument(format!("theta = {theta} must be finite and >= 0")));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("entropic risk samples"));
    }
    if theta == 0.0 {
        return Ok(samples.iter().zip(probs).map(|(x, p)| p * x).sum());
    }
    let max = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = samples
        .iter()
        .zip(probs)
        .map(|(x, p)| p * (theta * (x - max)).exp())
        .sum();
    Ok(max + sum.ln() / theta)
}

/// Tilt weights `ω_i = exp(θX_i) / Σ_j π_j exp(θX_j)`, so that `Σ π_i ω_i = 1`.
pub fn tilt_weights(samples: &[f64], probs: &[f64], theta: f64) -> Result<DVector<f64>> {
    check_dim(samples.len(), probs.len(), "tilt weights")?;
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("tracking error"));
    }
    if theta == 0.0 {
        return Ok(DVector::from_element(samples.len(), 1.0));
    }
    let max = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = samples.iter().map(|x| (theta * (x - max)).exp()).collect();
    let norm: f64 = raw.iter().zip(probs).map(|(r, p)| r * p).sum();
    Ok(DVector::from_iterator(raw.len(), raw.iter().map(|r| r / norm)))
}

/// Unbiased weighted covariance matrix `𝔠(ω)` for equally weighted nodes.
pub fn weighted_covariance_matrix(omega: &DVector<f64>) -> DMatrix<f64> {
    let n = omega.len() as f64;
    let scale = 1.0 / (n * (n - 1.0));
    let mut c = -scale * omega * omega.transpose();
    for i in 0..omega.len() {
        c[(i, i)] += scale * n * omega[i];
    }
    c
}

/// Plug-in weighted covariance `diag(πω) − (πω)(πω)ᵀ`.
pub fn plug_in_covariance_matrix(omega: &DVector<f64>, probs: &[f64]) -> Result<DMatrix<f64>> {
    check_dim(omega.len(), probs.len(), "covariance weights")?;
    let pw = DVector::from_iterator(omega.len(), omega.iter().zip(probs).map(|(w, p)| w * p));
    let mut c = -&pw * pw.transpose();
    for i in 0..pw.len() {
        c[(i, i)] += pw[i];
    }
    Ok(c)
}

/// Per-node states `d × N` and weighted residuals `W(y_i − g)`.
fn residuals(
    coeffs: &DVector<f64>,
    fem_nodes: usize,
    basis: &DMatrix<f64>,
    target: &DVector<f64>,
    weight: &DMatrix<f64>,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let modes = basis.ncols();
    check_dim(modes * fem_nodes, coeffs.len(), "coefficient vector")?;
    check_dim(fem_nodes, target.len(), "target vector")?;
    let ymat = DMatrix::from_column_slice(fem_nodes, modes, coeffs.as_slice());
    let mut diff = ymat * basis.transpose();
    for mut col in diff.column_iter_mut() {
        col -= target;
    }
    let wd = weight * &diff;
    let errors = diff
        .column_iter()
        .zip(wd.column_iter())
        .map(|(a, b)| a.dot(&b))
        .collect();
    Ok((errors, wd))
}

/// `𝔐`: row `i`, block `m` equals `L_m(σ^{(i)}) · (W(ȳ(σ^{(i)}) − g))ᵀ`.
pub fn assemble_frak_m(
    coeffs: &DVector<f64>,
    target: &DVector<f64>,
    basis: &DMatrix<f64>,
    weight: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let d = target.len();
    let (_, wd) = residuals(coeffs, d, basis, target, weight)?;
    Ok(frak_m_from_residuals(&wd, basis))
}

fn frak_m_from_residuals(wd: &DMatrix<f64>, basis: &DMatrix<f64>) -> DMatrix<f64> {
    let (d, n) = wd.shape();
    let modes = basis.ncols();
    DMatrix::from_fn(n, modes * d, |i, col| basis[(i, col / d)] * wd[(col % d, i)])
}

/// Symmetrize and project onto the PSD cone, rejecting eigenvalues below
/// `−CLIP_FLOOR·‖Q‖₁`.
pub fn symmetrize_and_clip(q: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let q = 0.5 * (&q + q.transpose());
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("risk-adjusted operator"));
    }
    if q.clone().cholesky().is_some() {
        return Ok(q);
    }
    let norm1 = q
        .column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let eig = q.clone().symmetric_eigen();
    let min = eig.eigenvalues.min();
    if min >= 0.0 {
        return Ok(q);
    }
    let floor = -CLIP_FLOOR * norm1;
    if min < floor {
        return Err(Error::Indefinite {
            min_eigenvalue: min,
            floor,
        });
    }
    let clipped = eig.eigenvalues.map(|l| l.max(0.0));
    let v = &eig.eigenvectors;
    let out = v * DMatrix::from_diagonal(&clipped) * v.transpose();
    Ok(0.5 * (&out + out.transpose()))
}

/// Quadratic model of `½R_θ(‖W^{1/2}(y(σ) − g)‖²)` at one time node.
#[derive(Debug, Clone)]
pub struct StageModel {
    pub weights: DVector<f64>,
    pub errors: Vec<f64>,
    pub risk: f64,
    /// `q`: chaos projection of `ω·W(ȳ − g)`.
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

/// Per-node tilt weights; `terminal` is `None` when there is no terminal cost.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightField {
    pub values: DMatrix<f64>,
    pub terminal: Option<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct RiskAdjustedOperators {
    pub running: Vec<DMatrix<f64>>,
    pub affine_running: Vec<DVector<f64>>,
    pub terminal: Option<DMatrix<f64>>,
    pub affine_terminal: Option<DVector<f64>>,
}

/// Everything needed to evaluate the sampled entropic tracking cost of a
/// chaos trajectory.
#[derive(Debug, Clone)]
pub struct RiskModel {
    pub theta: f64,
    pub nodes: SampleNodeSet,
    pub covariance: CovarianceForm,
    basis: DMatrix<f64>,
    fem_nodes: usize,
    running_weight: DMatrix<f64>,
    terminal_weight: Option<DMatrix<f64>>,
    target: NodalTrajectory,
    terminal_target: DVector<f64>,
}

impl RiskModel {
    /// `running_weight = CᵀMC`; `terminal_weight = PᵀMP`, or `None` for `P = 0`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        theta: f64,
        nodes: SampleNodeSet,
        covariance: CovarianceForm,
        index_set: &TotalDegreeIndexSet,
        running_weight: DMatrix<f64>,
        terminal_weight: Option<DMatrix<f64>>,
        target: NodalTrajectory,
        terminal_target: DVector<f64>,
    ) -> Result<Self> {
        if !(theta.is_finite() && theta >= 0.0) {
            return Err(Error::InvalidArgument(format!("theta = {theta} must be finite and >= 0")));
        }
        if covariance == CovarianceForm::Unbiased && !(nodes.equal_weights() && nodes.len() >= 2) {
            return Err(Error::InvalidArgument(
                "unbiased covariance needs at least two equally weighted nodes".into(),
            ));
        }
        let fem_nodes = running_weight.nrows();
        check_dim(fem_nodes, terminal_target.len(), "terminal target")?;
        if let Some(w) = &terminal_weight {
            check_dim(fem_nodes, w.nrows(), "terminal weight")?;
        }
        for g in &target.values {
            check_dim(fem_nodes, g.len(), "running target")?;
        }
        let basis = index_set.basis_matrix(&nodes.nodes)?;
        Ok(Self {
            theta,
            nodes,
            covariance,
            basis,
            fem_nodes,
            running_weight,
            terminal_weight,
            target,
            terminal_target,
        })
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn target(&self) -> &NodalTrajectory {
        &self.target
    }

    pub fn terminal_target(&self) -> &DVector<f64> {
        &self.terminal_target
    }

    pub fn running_weight(&self) -> &DMatrix<f64> {
        &self.running_weight
    }

    pub fn terminal_weight(&self) -> Option<&DMatrix<f64>> {
        self.terminal_weight.as_ref()
    }

    pub fn has_terminal(&self) -> bool {
        self.terminal_weight.is_some()
    }

    /// Squared tracking errors of the surrogate at each node.
    pub fn node_errors(&self, coeffs: &DVector<f64>, target: &DVector<f64>, weight: &DMatrix<f64>) -> Result<Vec<f64>> {
        Ok(residuals(coeffs, self.fem_nodes, &self.basis, target, weight)?.0)
    }

    fn covariance_matrix(&self, omega: &DVector<f64>) -> Result<DMatrix<f64>> {
        match self.covariance {
            CovarianceForm::Unbiased => Ok(weighted_covariance_matrix(omega)),
            CovarianceForm::PlugIn => plug_in_covariance_matrix(omega, &self.nodes.weights),
        }
    }

    /// Value, gradient and (optionally) clipped second-order operator of
    /// `½R_θ` at a coefficient vector.
    pub fn stage(
        &self,
        coeffs: &DVector<f64>,
        target: &DVector<f64>,
        weight: &DMatrix<f64>,
        with_hessian: bool,
    ) -> Result<StageModel> {
        let (errors, wd) = residuals(coeffs, self.fem_nodes, &self.basis, target, weight)?;
        let probs = &self.nodes.weights;
        let risk = entropic_risk_weighted(&errors, probs, self.theta)?;
        let omega = tilt_weights(&errors, probs, self.theta)?;
        let pw = DVector::from_iterator(omega.len(), omega.iter().zip(probs).map(|(w, p)| w * p));
        // Scaling columns of basis by πω gives the weighted projection.
        let mut weighted_basis = self.basis.clone();
        for (i, mut row) in weighted_basis.row_iter_mut().enumerate() {
            row *= pw[i];
        }
        let grad = &wd * &weighted_basis;
        let gradient = DVector::from_column_slice(grad.as_slice());
        let hessian = if with_hessian {
            let gram = self.basis.transpose() * &weighted_basis;
            let mut q = gram.kronecker(weight);
            if self.theta > 0.0 {
                let fm = frak_m_from_residuals(&wd, &self.basis);
                let cov = self.covariance_matrix(&omega)?;
                q += (2.0 * self.theta) * fm.transpose() * cov * fm;
            }
            symmetrize_and_clip(q)?
        } else {
            DMatrix::zeros(0, 0)
        };
        Ok(StageModel {
            weights: omega,
            errors,
            risk,
            gradient,
            hessian,
        })
    }

    pub fn running_stage(&self, traj: &PceTrajectory, k: usize, with_hessian: bool) -> Result<StageModel> {
        self.stage(&traj.coeffs[k], &self.target.values[k], &self.running_weight, with_hessian)
    }

    pub fn terminal_stage(&self, traj: &PceTrajectory, with_hessian: bool) -> Result<Option<StageModel>> {
        match &self.terminal_weight {
            None => Ok(None),
            Some(w) => Ok(Some(self.stage(
                &traj.coeffs[traj.grid.steps()],
                &self.terminal_target,
                w,
                with_hessian,
            )?)),
        }
    }

    pub fn compute_weights(&self, traj: &PceTrajectory) -> Result<WeightField> {
        let n = self.nodes.len();
        let columns = (0..traj.grid.len())
            .into_par_iter()
            .map(|k| {
                let e = self.node_errors(&traj.coeffs[k], &self.target.values[k], &self.running_weight)?;
                tilt_weights(&e, &self.nodes.weights, self.theta)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut values = DMatrix::zeros(n, traj.grid.len());
        for (k, c) in columns.iter().enumerate() {
            values.set_column(k, c);
        }
        let terminal = self
            .terminal_stage(traj, false)?
            .map(|s| s.weights);
        Ok(WeightField { values, terminal })
    }

    /// Quadratic cost operators at the expansion trajectory (parallel over
    /// time nodes).
    pub fn operators(&self, traj: &PceTrajectory) -> Result<RiskAdjustedOperators> {
        check_dim(self.target.grid.len(), traj.grid.len(), "expansion trajectory grid")?;
        let stages = (0..traj.grid.len())
            .into_par_iter()
            .map(|k| self.running_stage(traj, k, true))
            .collect::<Result<Vec<_>>>()?;
        let terminal = self.terminal_stage(traj, true)?;
        let (running, affine_running) = stages.into_iter().map(|s| (s.hessian, s.gradient)).unzip();
        let (terminal, affine_terminal) = match terminal {
            Some(s) => (Some(s.hessian), Some(s.gradient)),
            None => (None, None),
        };
        Ok(RiskAdjustedOperators {
            running,
            affine_running,
            terminal,
            affine_terminal,
        })
    }

    /// `J = ½[Σ_k w_k R_θ(e(t_k)) + Σ_k Δt‖u_k‖² + R_θ(e_T)]`.
    pub fn objective(&self, traj: &PceTrajectory, u: &ControlTrajectory) -> Result<f64> {
        let weights = traj.grid.trapezoid_weights();
        let risks = (0..traj.grid.len())
            .into_par_iter()
            .map(|k| {
                let e = self.node_errors(&traj.coeffs[k], &self.target.values[k], &self.running_weight)?;
                entropic_risk_weighted(&e, &self.nodes.weights, self.theta)
            })
            .collect::<Result<Vec<_>>>()?;
        let running: f64 = weights.iter().zip(&risks).map(|(w, r)| w * r).sum();
        let terminal = match &self.terminal_weight {
            None => 0.0,
            Some(w) => {
                let e = self.node_errors(&traj.coeffs[traj.grid.steps()], &self.terminal_target, w)?;
                entropic_risk_weighted(&e, &self.nodes.weights, self.theta)?
            }
        };
        let value = 0.5 * (running + u.inner(u) + terminal);
        if !value.is_finite() {
            return Err(Error::NonFinite("objective"));
        }
        Ok(value)
    }
}
