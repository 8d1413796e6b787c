//! Linear descriptor systems `M ẏ = K y + G u + f` and their Crank–Nicolson
//! propagation with zero-order-hold controls.

use nalgebra::{DMatrix, DVector, LU, Dyn};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone)]
pub struct LinearSystem {
    /// Symmetric positive definite mass (Gram) matrix of the state space.
    pub mass: DMatrix<f64>,
    pub operator: DMatrix<f64>,
    pub input: DMatrix<f64>,
}

impl LinearSystem {
    pub fn new(mass: DMatrix<f64>, operator: DMatrix<f64>, input: DMatrix<f64>) -> Result<Self> {
        let n = mass.nrows();
        check_dim(n, mass.ncols(), "mass matrix columns")?;
        check_dim(n, operator.nrows(), "operator rows")?;
        check_dim(n, operator.ncols(), "operator columns")?;
        check_dim(n, input.nrows(), "input rows")?;
        Ok(Self {
            mass,
            operator,
            input,
        })
    }

    pub fn dim(&self) -> usize {
        self.mass.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.input.ncols()
    }
}

/// Crank–Nicolson step `(M − Δt/2 K) y⁺ = (M + Δt/2 K) y + Δt G u + Δt f`,
/// with the implicit matrix factored once.
#[derive(Debug, Clone)]
pub struct CrankNicolson {
    dt: f64,
    implicit: LU<f64, Dyn, Dyn>,
    implicit_t: LU<f64, Dyn, Dyn>,
    explicit: DMatrix<f64>,
    input: DMatrix<f64>,
}

impl CrankNicolson {
    pub fn new(system: &LinearSystem, dt: f64) -> Result<Self> {
        let half = 0.5 * dt;
        let implicit = &system.mass - half * &system.operator;
        let explicit = &system.mass + half * &system.operator;
        let implicit_t = implicit.transpose().lu();
        let implicit = implicit.lu();
        if !implicit.is_invertible() {
            return Err(Error::Singular("Crank-Nicolson step matrix"));
        }
        Ok(Self {
            dt,
            implicit,
            implicit_t,
            explicit,
            input: &system.input * dt,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn dim(&self) -> usize {
        self.explicit.nrows()
    }

    /// One step; `load` is the step-averaged forcing load vector, if any.
    pub fn step(&self, y: &DVector<f64>, u: &DVector<f64>, load: Option<&DVector<f64>>) -> Result<DVector<f64>> {
        let mut rhs = &self.explicit * y + &self.input * u;
        if let Some(f) = load {
            rhs.axpy(self.dt, f, 1.0);
        }
        self.solve(&rhs)
    }

    /// `(M − Δt/2 K)⁻¹ b`.
    pub fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        let out = self
            .implicit
            .solve(rhs)
            .ok_or(Error::Singular("Crank-Nicolson solve"))?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Crank-Nicolson solve"));
        }
        Ok(out)
    }

    /// `(M − Δt/2 K)⁻ᵀ b`.
    pub fn solve_transpose(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        self.implicit_t
            .solve(rhs)
            .ok_or(Error::Singular("Crank-Nicolson adjoint solve"))
    }

    /// `(M + Δt/2 K)ᵀ b`.
    pub fn explicit_transpose_mul(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.explicit.tr_mul(rhs)
    }

    /// `Δt Gᵀ b`.
    pub fn input_transpose_mul(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.input.tr_mul(rhs)
    }

    /// Dense one-step maps `Φ = E⁻¹F` and `Γ = Δt E⁻¹G`.
    pub fn propagators(&self) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let phi = self
            .implicit
            .solve(&self.explicit)
            .ok_or(Error::Singular("state propagator"))?;
        let gamma = self
            .implicit
            .solve(&self.input)
            .ok_or(Error::Singular("input propagator"))?;
        Ok((phi, gamma))
    }
}
