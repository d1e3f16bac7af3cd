#![allow(dead_code)]

use denselab_core::grid::{make_grid_function, GridFunction, SetSpec};

pub fn full(d: usize, n: usize) -> GridFunction {
    GridFunction::constant(d, n, 1.0).unwrap()
}

pub fn random_set(d: usize, n: usize, p: f64, cellsize: f64, seed: u64) -> GridFunction {
    make_grid_function(&SetSpec::Random { dim: d, p, cellsize, seed }, d, n).unwrap()
}

/// Pair correlation of the full unit square at distance `l`:
/// the direction average of `(1 - l|cos t|)(1 - l|sin t|)`.
pub fn square_pair_factor(l: f64) -> f64 {
    1.0 - 4.0 * l / std::f64::consts::PI + l * l / std::f64::consts::PI
}

/// `+amp` / `-amp` stripes across axis 0 with the given half-period in cells.
pub fn stripes(n: usize, half_period: usize, amp: f64) -> GridFunction {
    GridFunction::from_fn(2, n, |idx| {
        if (idx[0] / half_period) % 2 == 0 {
            amp
        } else {
            -amp
        }
    })
    .unwrap()
}
