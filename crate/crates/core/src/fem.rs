//! Piecewise linear finite elements on the unit interval with natural
//! (Neumann) boundary conditions.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::pce::GaussRule;

/// Spatial coefficient field such as `c̄(x)` or `ψ_j(x)`.
pub type Field = dyn Fn(f64) -> f64 + Send + Sync;

/// Uniform mesh `0 = x_1 < … < x_d = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh1D {
    cells: usize,
    nodes: Vec<f64>,
}

impl Mesh1D {
    /// Mesh with `cells` elements of width `1/cells`.
    pub fn uniform(cells: usize) -> Result<Self> {
        if cells < 2 {
            return Err(Error::InvalidArgument(format!(
                "mesh needs at least 2 cells, got {cells}"
            )));
        }
        let h = 1.0 / cells as f64;
        let nodes = (0..=cells).map(|k| k as f64 * h).collect();
        Ok(Self { cells, nodes })
    }

    /// Mesh from a width `h`; `1/h` must be an integer ≥ 2.
    pub fn from_width(h: f64) -> Result<Self> {
        if !(h.is_finite() && h > 0.0) {
            return Err(Error::InvalidArgument(format!("mesh width {h} must be positive")));
        }
        let inv = 1.0 / h;
        let cells = inv.round();
        if (inv - cells).abs() > 1e-9 * inv.max(1.0) {
            return Err(Error::InvalidArgument(format!(
                "mesh width {h} is not the reciprocal of an integer"
            )));
        }
        Self::uniform(cells as usize)
    }

    pub fn width(&self) -> f64 {
        1.0 / self.cells as f64
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    /// Node count `d`.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Nodal interpolant of `f`.
    pub fn interpolate(&self, f: impl Fn(f64) -> f64) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.nodes.iter().map(|&x| f(x)))
    }
}

/// Actuator supports `O_i ⊂ (0, 1)` with a common gain.
#[derive(Debug, Clone, PartialEq)]
pub struct ActuatorSet {
    intervals: Vec<(f64, f64)>,
    scaling: f64,
}

impl ActuatorSet {
    pub fn new(intervals: Vec<(f64, f64)>, scaling: f64) -> Result<Self> {
        if !(scaling.is_finite() && scaling > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "actuator scaling {scaling} must be positive"
            )));
        }
        for &(a, b) in &intervals {
            if !(0.0 <= a && a < b && b <= 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "actuator interval [{a}, {b}] is not a subinterval of [0, 1]"
                )));
            }
        }
        let mut sorted = intervals.clone();
        sorted.sort_by(|x, y| x.0.total_cmp(&y.0));
        if sorted.windows(2).any(|w| w[1].0 < w[0].1) {
            return Err(Error::InvalidArgument("actuator intervals overlap".into()));
        }
        Ok(Self { intervals, scaling })
    }

    pub fn intervals(&self) -> &[(f64, f64)] {
        &self.intervals
    }

    pub fn scaling(&self) -> f64 {
        self.scaling
    }

    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }
}

/// Assembled P1 matrices.
#[derive(Debug, Clone)]
pub struct FemMatrices {
    pub mesh: Mesh1D,
    pub mass: DMatrix<f64>,
    pub stiffness: DMatrix<f64>,
    /// `∫ c̄ φ_k φ_l`.
    pub reaction_mean: DMatrix<f64>,
    /// `∫ ψ_j φ_k φ_l` for each parametric field.
    pub reaction: Vec<DMatrix<f64>>,
    /// Load matrix of the control operator, `d × N_a`.
    pub input: DMatrix<f64>,
}

const ELEMENT_QUADRATURE_POINTS: usize = 4;

pub fn assemble(
    mesh: &Mesh1D,
    reaction_mean: &Field,
    parametric: &[&Field],
    actuators: &ActuatorSet,
) -> FemMatrices {
    let d = mesh.len();
    let h = mesh.width();
    let mut mass = DMatrix::zeros(d, d);
    let mut stiffness = DMatrix::zeros(d, d);
    for e in 0..mesh.cells() {
        let idx = [e, e + 1];
        for a in 0..2 {
            for b in 0..2 {
                let same = a == b;
                mass[(idx[a], idx[b])] += if same { h / 3.0 } else { h / 6.0 };
                stiffness[(idx[a], idx[b])] += if same { 1.0 / h } else { -1.0 / h };
            }
        }
    }
    let rule = GaussRule::new(ELEMENT_QUADRATURE_POINTS);
    let weighted_mass = |f: &Field| {
        let mut m = DMatrix::zeros(d, d);
        for e in 0..mesh.cells() {
            let x0 = mesh.nodes()[e];
            for (xi, w) in rule.nodes.iter().zip(&rule.weights) {
                let t = 0.5 * (xi + 1.0);
                let x = x0 + t * h;
                let phi = [1.0 - t, t];
                let fx = f(x) * w * h;
                for a in 0..2 {
                    for b in 0..2 {
                        m[(e + a, e + b)] += fx * phi[a] * phi[b];
                    }
                }
            }
        }
        m
    };
    let reaction_mean_m = weighted_mass(reaction_mean);
    let reaction = parametric.iter().map(|&f| weighted_mass(f)).collect();

    let mut input = DMatrix::zeros(d, actuators.len());
    for (i, &(lo, hi)) in actuators.intervals().iter().enumerate() {
        for e in 0..mesh.cells() {
            let x0 = mesh.nodes()[e];
            let x1 = mesh.nodes()[e + 1];
            let a = lo.max(x0);
            let b = hi.min(x1);
            if b <= a {
                continue;
            }
            // Hat functions are linear on the element: midpoint rule is exact.
            let mid = 0.5 * (a + b);
            let t = (mid - x0) / h;
            input[(e, i)] += actuators.scaling() * (b - a) * (1.0 - t);
            input[(e + 1, i)] += actuators.scaling() * (b - a) * t;
        }
    }

    FemMatrices {
        mesh: mesh.clone(),
        mass,
        stiffness,
        reaction_mean: reaction_mean_m,
        reaction,
        input,
    }
}

impl FemMatrices {
    pub fn nodes(&self) -> usize {
        self.mesh.len()
    }

    pub fn actuators(&self) -> usize {
        self.input.ncols()
    }

    /// Number of parametric reaction fields `s`.
    pub fn parameters(&self) -> usize {
        self.reaction.len()
    }

    /// `c̄ + Σ σ_j ψ_j` reaction matrix at a parameter point.
    pub fn reaction_at(&self, sigma: &[f64]) -> Result<DMatrix<f64>> {
        check_dim(self.parameters(), sigma.len(), "parameter point")?;
        let mut r = self.reaction_mean.clone();
        for (s, rj) in sigma.iter().zip(&self.reaction) {
            r += *s * rj;
        }
        Ok(r)
    }
}

/// `‖v‖_H = √(vᵀ M v)`.
pub fn h_norm(v: &DVector<f64>, mass: &DMatrix<f64>) -> f64 {
    v.dot(&(mass * v)).max(0.0).sqrt()
}
