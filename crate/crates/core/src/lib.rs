//! Numerical laboratory for counting geometric configurations in dense
//! subsets of the unit cube and for the uniformity / density-increment
//! machinery that controls those counts.
//!
//! Modules
//! - `grid`: cell-averaged functions, set rasterization, window smoothing,
//!   FFT correlation fields.
//! - `measures`: simplex geometry, sphere quadratures, intersection
//!   spheres, Haar rotations, sphere Fourier transforms.
//! - `counting`: averaged counting operators for distances, simplices,
//!   rectangles and products of simplices, with error estimates.
//! - `norms`: window uniformity norms (`U^1`, box norm) and uniform
//!   distribution defects.
//! - `vonneumann`: inequality checkers that replay the proof chains
//!   step by step, separating exact steps from asymptotic envelopes.
//! - `increment`: scale partitions, energy increment regularization,
//!   inverse search, dichotomy and the full pipeline.
//!
//! All randomized operations take explicit seeds and are reproducible
//! bit for bit at fixed thread-independent reduction order.

pub mod counting;
pub mod error;
pub mod grid;
pub mod increment;
pub mod measures;
pub mod norms;
pub mod util;
pub mod vonneumann;

pub use error::{LabError, Result};
