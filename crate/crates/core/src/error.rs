use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point {value} lies outside [-1, 1]")]
    Domain { value: f64 },

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    Dimension {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("singular linear system in {0}")]
    Singular(&'static str),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("matrix has eigenvalue {min_eigenvalue:e} below the clipping floor {floor:e}")]
    Indefinite { min_eigenvalue: f64, floor: f64 },

    #[error("line search failed after {shrinks} step reductions at iteration {iteration}")]
    LineSearch { iteration: usize, shrinks: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize, context: &'static str) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension {
            expected,
            got,
            context,
        });
    }
    Ok(())
}
