use thiserror::Error;

/// Errors surfaced by the library. Numerical invariant violations that
/// indicate a bug (e.g. a non-PSD covariance past tolerance) panic instead.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    /// `beta` coincides with a critical inverse temperature 2/sigma_bar[j].
    #[error("beta = {beta} is critical (2/sigma_bar[{index}] = {critical})")]
    CriticalBeta {
        beta: f64,
        /// 1-based index of the offending effective variance.
        index: usize,
        critical: f64,
    },

    #[error("gamma = {gamma} outside [0, {gamma_star}]")]
    GammaOutOfRange { gamma: f64, gamma_star: f64 },

    #[error("lattice box has no interior vertices")]
    EmptyInterior,

    #[error("restricted set is empty for n = {n}, rho = {rho}")]
    EmptyRestriction { n: usize, rho: f64 },

    #[error("empty pair set")]
    EmptyPairSet,

    #[error("scales (alpha, alpha') = ({alpha}, {alpha_prime}) not admissible: {reason}")]
    BadScaleWindow {
        alpha: f64,
        alpha_prime: f64,
        reason: String,
    },

    #[error("overlap alphabet mismatch: {0}")]
    AlphabetMismatch(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
