use crate::analysis::MetricsRecord;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("matrix not symmetric: relative asymmetry {asymmetry:.3e} exceeds {tolerance:.1e}")]
    Asymmetric { asymmetry: f64, tolerance: f64 },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("degenerate design: {0}")]
    DegenerateDesign(String),

    #[error("power iteration did not converge: TV gap {tv_gap:.3e} after {iterations} iterations")]
    Convergence { tv_gap: f64, iterations: usize },

    #[error("eigensolver did not converge: off-diagonal norm {off:.3e}")]
    Eigensolver { off: f64 },

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("training diverged at outer loop {t}, inner step {m}")]
    Divergence {
        t: usize,
        m: usize,
        /// Metrics recorded up to the last finite state.
        records: Vec<MetricsRecord>,
    },

    #[error("serialization: {0}")]
    Serialization(String),
}
