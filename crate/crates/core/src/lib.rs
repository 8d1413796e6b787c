//! Risk-averse feedback control of linear parabolic equations with random
//! reaction coefficients, via stochastic Galerkin polynomial chaos, P1 finite
//! elements and Riccati feedback.

pub mod dynamics;
pub mod error;
pub mod fem;
pub mod galerkin;
pub mod grid;
pub mod pce;
pub mod riccati;
pub mod risk;
pub mod sqp;

pub use error::{Error, Result};
