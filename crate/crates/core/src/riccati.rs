//! Riccati feedback for the linear-quadratic subproblems.
//!
//! Two backward sweeps are available. The discrete recursion is the exact
//! dynamic-programming solution of the Crank–Nicolson discretized problem
//! (zero-order-hold controls, trapezoid stage weights). The RK4 sweep
//! integrates the continuous differential Riccati equation in mass-weighted
//! coordinates and closes the loop with the left-node gain.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{CrankNicolson, LinearSystem};
use crate::error::{check_dim, Error, Result};
use crate::galerkin::{ControlTrajectory, PceTrajectory};
use crate::grid::TimeGrid;
use crate::risk::RiskAdjustedOperators;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RiccatiScheme {
    #[default]
    Discrete,
    Rk4,
}

/// Stage cost `w_k(½yᵀQ_k y + r_kᵀy)` plus terminal `½yᵀQ_P y + r_Pᵀy`.
#[derive(Debug, Clone)]
pub struct QuadraticCost {
    pub running: Vec<DMatrix<f64>>,
    pub linear: Vec<DVector<f64>>,
    pub terminal: Option<(DMatrix<f64>, DVector<f64>)>,
}

impl QuadraticCost {
    /// Re-centres the risk-adjusted model at the expansion trajectory:
    /// `r_k = q_k − Q_k ȳ_k`.
    pub fn from_operators(ops: &RiskAdjustedOperators, expansion: &PceTrajectory) -> Result<Self> {
        check_dim(expansion.grid.len(), ops.running.len(), "operator count")?;
        let linear = ops
            .running
            .iter()
            .zip(&ops.affine_running)
            .zip(&expansion.coeffs)
            .map(|((q, a), y)| a - q * y)
            .collect();
        let terminal = match (&ops.terminal, &ops.affine_terminal) {
            (Some(q), Some(a)) => {
                let y = &expansion.coeffs[expansion.grid.steps()];
                Some((q.clone(), a - q * y))
            }
            _ => None,
        };
        Ok(Self {
            running: ops.running.clone(),
            linear,
            terminal,
        })
    }

    pub fn zero(dim: usize, nodes: usize) -> Self {
        Self {
            running: vec![DMatrix::zeros(dim, dim); nodes],
            linear: vec![DVector::zeros(dim); nodes],
            terminal: None,
        }
    }
}

/// Affine state feedback `u_k = −(K_k y_k + κ_k)` for `k < steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackLaw {
    pub grid: TimeGrid,
    pub gains: Vec<DMatrix<f64>>,
    pub offsets: Vec<DVector<f64>>,
}

impl FeedbackLaw {
    pub fn control(&self, k: usize, y: &DVector<f64>) -> DVector<f64> {
        -(&self.gains[k] * y + &self.offsets[k])
    }

    pub fn inputs(&self) -> usize {
        self.gains.first().map_or(0, |g| g.nrows())
    }

    pub fn state_dim(&self) -> usize {
        self.gains.first().map_or(0, |g| g.ncols())
    }
}

/// Tabulated value-function data `V_k(y) = ½yᵀΠ_k y + h_kᵀy` and the induced law.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub grid: TimeGrid,
    pub pi: Vec<DMatrix<f64>>,
    pub h: Vec<DVector<f64>>,
    pub law: FeedbackLaw,
}

impl RiccatiSolution {
    pub fn feedback_control(&self, k: usize, y: &DVector<f64>) -> DVector<f64> {
        self.law.control(k, y)
    }

    /// Largest relative asymmetry `‖Π − Πᵀ‖_∞ / max(1, ‖Π‖_∞)` over the sweep.
    pub fn max_asymmetry(&self) -> f64 {
        self.pi
            .iter()
            .map(|p| {
                let norm = inf_norm(p).max(1.0);
                inf_norm(&(p - p.transpose())) / norm
            })
            .fold(0.0, f64::max)
    }
}

fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

fn check_cost(cost: &QuadraticCost, dim: usize, grid: &TimeGrid) -> Result<()> {
    check_dim(grid.len(), cost.running.len(), "running cost nodes")?;
    check_dim(grid.len(), cost.linear.len(), "linear cost nodes")?;
    for (q, r) in cost.running.iter().zip(&cost.linear) {
        check_dim(dim, q.nrows(), "running cost rows")?;
        check_dim(dim, r.len(), "linear cost length")?;
    }
    Ok(())
}

fn check_finite(m: &DMatrix<f64>) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("Riccati sweep"))
    }
}

/// Exact backward recursion for the Crank–Nicolson discretized problem.
///
/// `forcing` holds the load at each time node; the step uses the average of
/// its two end points.
pub fn solve_discrete(
    cn: &CrankNicolson,
    grid: &TimeGrid,
    forcing: Option<&[DVector<f64>]>,
    cost: &QuadraticCost,
) -> Result<RiccatiSolution> {
    let dim = cn.dim();
    check_cost(cost, dim, grid)?;
    let n = grid.steps();
    let dt = grid.dt();
    let weights = grid.trapezoid_weights();
    let (phi, gamma) = cn.propagators()?;
    let inputs = gamma.ncols();

    let (mut p_next, mut h_next) = {
        let mut p = weights[n] * &cost.running[n];
        let mut h = weights[n] * &cost.linear[n];
        if let Some((qp, rp)) = &cost.terminal {
            p += qp;
            h += rp;
        }
        (p, h)
    };
    let mut pi = vec![DMatrix::zeros(0, 0); n + 1];
    let mut hs = vec![DVector::zeros(0); n + 1];
    let mut gains = vec![DMatrix::zeros(0, 0); n];
    let mut offsets = vec![DVector::zeros(0); n];

    for k in (0..n).rev() {
        let drift = match forcing {
            Some(f) => cn.solve(&(dt * 0.5 * (&f[k] + &f[k + 1])))?,
            None => DVector::zeros(dim),
        };
        let p_gamma = &p_next * &gamma;
        let mut s = gamma.tr_mul(&p_gamma);
        for i in 0..inputs {
            s[(i, i)] += dt;
        }
        let s = s.cholesky().ok_or(Error::Singular("Riccati input Gram matrix"))?;
        let gain = s.solve(&p_gamma.tr_mul(&phi));
        let offset = s.solve(&(p_gamma.tr_mul(&drift) + gamma.tr_mul(&h_next)));

        let closed = &phi - &gamma * &gain;
        let mut p = weights[k] * &cost.running[k] + phi.tr_mul(&(&p_next * closed));
        symmetrize(&mut p);
        check_finite(&p)?;
        let h = weights[k] * &cost.linear[k]
            + phi.tr_mul(&(&p_next * &drift - &p_gamma * &offset + &h_next));

        pi[k + 1] = p_next;
        hs[k + 1] = h_next;
        gains[k] = gain;
        offsets[k] = offset;
        p_next = p;
        h_next = h;
    }
    pi[0] = p_next;
    hs[0] = h_next;
    Ok(RiccatiSolution {
        grid: *grid,
        pi,
        h: hs,
        law: FeedbackLaw {
            grid: *grid,
            gains,
            offsets,
        },
    })
}

/// Spectral radius estimate of `A` by power iteration.
pub fn spectral_radius(a: &DMatrix<f64>, iterations: usize) -> f64 {
    let n = a.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut v = DVector::from_fn(n, |i, _| 1.0 + (i as f64 * 0.618_033_988_75).fract());
    v /= v.norm();
    let mut est: f64 = 0.0;
    for _ in 0..iterations {
        let w = a * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return est;
        }
        est = norm;
        v = w / norm;
    }
    est
}

/// Substeps per grid interval keeping RK4 well inside its stability region
/// for the Lyapunov part of the Riccati flow.
pub fn rk4_substeps(radius: f64, dt: f64) -> usize {
    ((2.4 * radius * dt) / 2.0).ceil().max(1.0) as usize
}

struct DreData<'a> {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    bbt: DMatrix<f64>,
    cost: &'a QuadraticCost,
    forcing: Option<Vec<DVector<f64>>>,
}

impl DreData<'_> {
    /// `(dΠ/dτ, dh/dτ)` with node data interpolated linearly between
    /// `t_k` (weight `1 − α`) and `t_{k+1}` (weight `α`).
    fn rhs(&self, p: &DMatrix<f64>, h: &DVector<f64>, k: usize, alpha: f64) -> (DMatrix<f64>, DVector<f64>) {
        let q = (1.0 - alpha) * &self.cost.running[k] + alpha * &self.cost.running[k + 1];
        let r = (1.0 - alpha) * &self.cost.linear[k] + alpha * &self.cost.linear[k + 1];
        let pa = p * &self.a;
        let pb = p * &self.b;
        let dp = pa.transpose() + pa - &pb * pb.transpose() + q;
        let closed = &self.a - &self.bbt * p;
        let mut dh = closed.tr_mul(h) + r;
        if let Some(f) = &self.forcing {
            dh += p * ((1.0 - alpha) * &f[k] + alpha * &f[k + 1]);
        }
        (dp, dh)
    }
}

/// Classical RK4 on the continuous differential Riccati equation in
/// `τ = T − t`, with `Ã = 𝐌⁻¹𝒦`, `B̃ = 𝐌⁻¹G`, per-stage symmetrization and
/// automatic substepping. `substeps = None` picks them from a spectral
/// radius estimate.
pub fn solve_dre(
    system: &LinearSystem,
    grid: &TimeGrid,
    forcing: Option<&[DVector<f64>]>,
    cost: &QuadraticCost,
    substeps: Option<usize>,
) -> Result<RiccatiSolution> {
    let dim = system.dim();
    check_cost(cost, dim, grid)?;
    let mass = system.mass.clone().lu();
    let a = mass
        .solve(&system.operator)
        .ok_or(Error::Singular("mass matrix"))?;
    let b = mass.solve(&system.input).ok_or(Error::Singular("mass matrix"))?;
    let forcing = match forcing {
        Some(f) => Some(
            f.iter()
                .map(|v| mass.solve(v).ok_or(Error::Singular("mass matrix")))
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    let m = substeps.unwrap_or_else(|| rk4_substeps(spectral_radius(&a, 200), grid.dt()));
    if m == 0 {
        return Err(Error::InvalidArgument("RK4 needs at least one substep".into()));
    }
    let data = DreData {
        bbt: &b * b.transpose(),
        a,
        b,
        cost,
        forcing,
    };
    let n = grid.steps();
    let tau = grid.dt() / m as f64;
    let frac = 1.0 / m as f64;

    let (mut p, mut h) = match &cost.terminal {
        Some((qp, rp)) => (qp.clone(), rp.clone()),
        None => (DMatrix::zeros(dim, dim), DVector::zeros(dim)),
    };
    let mut pi = vec![DMatrix::zeros(0, 0); n + 1];
    let mut hs = vec![DVector::zeros(0); n + 1];
    pi[n] = p.clone();
    hs[n] = h.clone();
    for k in (0..n).rev() {
        for s in 0..m {
            // α runs from 1 at t_{k+1} down to 0 at t_k.
            let a0 = 1.0 - s as f64 * frac;
            let amid = a0 - 0.5 * frac;
            let a1 = a0 - frac;
            let (k1p, k1h) = data.rhs(&p, &h, k, a0);
            let mut p2 = &p + 0.5 * tau * &k1p;
            symmetrize(&mut p2);
            let (k2p, k2h) = data.rhs(&p2, &(&h + 0.5 * tau * &k1h), k, amid);
            let mut p3 = &p + 0.5 * tau * &k2p;
            symmetrize(&mut p3);
            let (k3p, k3h) = data.rhs(&p3, &(&h + 0.5 * tau * &k2h), k, amid);
            let mut p4 = &p + tau * &k3p;
            symmetrize(&mut p4);
            let (k4p, k4h) = data.rhs(&p4, &(&h + tau * &k3h), k, a1.max(0.0));
            p += (tau / 6.0) * (k1p + 2.0 * k2p + 2.0 * k3p + k4p);
            h += (tau / 6.0) * (k1h + 2.0 * k2h + 2.0 * k3h + k4h);
            symmetrize(&mut p);
            check_finite(&p)?;
        }
        pi[k] = p.clone();
        hs[k] = h.clone();
    }
    let gains = (0..n).map(|k| data.b.tr_mul(&pi[k])).collect();
    let offsets = (0..n).map(|k| data.b.tr_mul(&hs[k])).collect();
    Ok(RiccatiSolution {
        grid: *grid,
        pi,
        h: hs,
        law: FeedbackLaw {
            grid: *grid,
            gains,
            offsets,
        },
    })
}

/// Crank–Nicolson sweep with the control of each step taken from the
/// left-node state.
pub fn closed_loop_solve(
    cn: &CrankNicolson,
    law: &FeedbackLaw,
    y0: &DVector<f64>,
    forcing: Option<&[DVector<f64>]>,
    modes: usize,
    fem_nodes: usize,
) -> Result<(PceTrajectory, ControlTrajectory)> {
    check_dim(cn.dim(), y0.len(), "closed-loop initial state")?;
    check_dim(cn.dim(), law.state_dim(), "feedback gain columns")?;
    check_dim(cn.dim(), modes * fem_nodes, "closed-loop layout")?;
    let grid = law.grid;
    let mut coeffs = Vec::with_capacity(grid.len());
    let mut values = Vec::with_capacity(grid.steps());
    coeffs.push(y0.clone());
    for k in 0..grid.steps() {
        let u = law.control(k, &coeffs[k]);
        let load = forcing.map(|f| 0.5 * (&f[k] + &f[k + 1]));
        let next = cn.step(&coeffs[k], &u, load.as_ref())?;
        values.push(u);
        coeffs.push(next);
    }
    Ok((
        PceTrajectory {
            grid,
            modes,
            fem_nodes,
            coeffs,
        },
        ControlTrajectory { grid, values },
    ))
}
