use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParam { name: &'static str, reason: String },
    #[error("parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error("supremum of s^alpha * phi(s) on (0,1] is unbounded")]
    UnboundedSupremum,
    #[error("kernel is not Dini: {0}")]
    NotDini(String),
    #[error("resolvent series did not converge within {iterates} iterates (tail {tail:e})")]
    NoConvergence { iterates: usize, tail: f64 },
    #[error("matrix is singular or ill-conditioned: {0}")]
    Singular(String),
    #[error("time {t} is outside the path span [{start}, {end}]")]
    OutOfSpan { t: f64, start: f64, end: f64 },
    #[error("Cholesky factorization failed after jitter")]
    NotPositiveDefinite,
    #[error("grid resolution too coarse: sqrt(theta) = {sqrt_theta:e} < 2 * spacing = {two_h:e}")]
    Resolution { sqrt_theta: f64, two_h: f64 },
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("point lies outside the interpolation hull")]
    OutsideHull,
    #[error("contraction {0} too large to invert the transform (need < 1/2)")]
    NotContractive(f64),
    #[error("least-squares fit failed: {0}")]
    Fit(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
