use thiserror::Error;

/// Crate-wide error type.
///
/// Variants map onto the toolkit's failure surfaces: parameter and
/// configuration validation, divergence of an integration, spectral-gap
/// violations, scan inconsistencies and continuation breaks.
#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("range error: t = {t} outside [{lo}, {hi}]")]
    Range { t: f64, lo: f64, hi: f64 },

    #[error("solution diverged at t = {time}: |x_{component}| = {value:e} exceeds the guard")]
    Divergence {
        time: f64,
        component: usize,
        value: f64,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("transfer function pole at p = {re}+{im}i (|denominator| = {denom_abs:e})")]
    Pole { re: f64, im: f64, denom_abs: f64 },

    #[error(
        "spectral gap violation: characteristic root within {distance:e} of the line Re p = -{nu0} \
         (nearest root estimate {root_re}+{root_im}i)"
    )]
    GapViolation {
        nu0: f64,
        distance: f64,
        root_re: f64,
        root_im: f64,
    },

    #[error("incomplete root list: verified {verified} pairs, requested {requested}")]
    IncompleteRoots { verified: usize, requested: usize },

    #[error("scan inconsistency: predicate samples are non-monotone: {samples:?}")]
    ScanInconsistent { samples: Vec<(f64, bool)> },

    #[error("continuation break at epsilon = {eps}: orbit lost (converged to an equilibrium)")]
    ContinuationBreak { eps: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
