//! Error type shared by all laboratory modules.
//!
//! Errors fall into three classes that callers (notably the CLI) treat
//! differently: usage errors (bad arguments, incompatible shapes),
//! resolution errors (the requested scales cannot be represented on the
//! grid), and hypothesis errors (a mathematical precondition measurably
//! fails on the given data).

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum LabError {
    /// Mismatched dimensions or grid sizes between operands.
    ShapeMismatch { context: String },
    /// A parameter is outside its documented range.
    InvalidParameter { context: String },
    /// A set expression is inconsistent (dimension conflicts, empty mask, ...).
    BadSetSpec { context: String },
    /// Requested scale is below what the grid can resolve.
    Unresolvable { context: String },
    /// Grid resolution floor reached (fewer than the minimum cells per axis).
    ResolutionFloor { context: String },
    /// The scale list ran out before the construction terminated.
    ScalesExhausted { context: String },
    /// FFT size budget exceeded.
    FftBudget { d: usize, n: usize },
    /// Degenerate simplex (Gram matrix numerically singular).
    DegenerateSimplex { context: String },
    /// Anchor points do not realize the required distance pattern.
    InconsistentAnchors { context: String },
    /// A measured mathematical hypothesis fails on the given data.
    HypothesisFailure { context: String },
}

impl LabError {
    pub fn shape(context: impl Into<String>) -> Self {
        LabError::ShapeMismatch { context: context.into() }
    }

    pub fn param(context: impl Into<String>) -> Self {
        LabError::InvalidParameter { context: context.into() }
    }

    pub fn unresolvable(context: impl Into<String>) -> Self {
        LabError::Unresolvable { context: context.into() }
    }

    pub fn hypothesis(context: impl Into<String>) -> Self {
        LabError::HypothesisFailure { context: context.into() }
    }

    /// True when the failure is a grid-resolution limit rather than bad input.
    pub fn is_resolution_bound(&self) -> bool {
        matches!(
            self,
            LabError::Unresolvable { .. }
                | LabError::ResolutionFloor { .. }
                | LabError::ScalesExhausted { .. }
                | LabError::FftBudget { .. }
        )
    }

    /// True when a measured mathematical precondition failed.
    pub fn is_hypothesis_failure(&self) -> bool {
        matches!(
            self,
            LabError::HypothesisFailure { .. }
                | LabError::DegenerateSimplex { .. }
                | LabError::InconsistentAnchors { .. }
        )
    }
}

impl fmt::Display for LabError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabError::ShapeMismatch { context } => write!(f, "shape mismatch: {context}"),
            LabError::InvalidParameter { context } => write!(f, "invalid parameter: {context}"),
            LabError::BadSetSpec { context } => write!(f, "bad set spec: {context}"),
            LabError::Unresolvable { context } => {
                write!(f, "scale not resolvable on this grid: {context}")
            }
            LabError::ResolutionFloor { context } => {
                write!(f, "grid resolution floor reached: {context}")
            }
            LabError::ScalesExhausted { context } => {
                write!(f, "scale list exhausted: {context}")
            }
            LabError::FftBudget { d, n } => {
                write!(f, "fft size budget exceeded: d={d}, n={n} (d*log2(2n) > 24)")
            }
            LabError::DegenerateSimplex { context } => write!(f, "degenerate simplex: {context}"),
            LabError::InconsistentAnchors { context } => {
                write!(f, "inconsistent anchors: {context}")
            }
            LabError::HypothesisFailure { context } => {
                write!(f, "hypothesis failure: {context}")
            }
        }
    }
}

impl std::error::Error for LabError {}

pub type Result<T> = std::result::Result<T, LabError>;
