//! Small shared helpers: seed derivation, multi-index iteration, and
//! deterministic parallel reduction.

use rayon::prelude::*;

/// Derives an independent stream seed from a master seed and a stream tag.
///
/// splitmix64 finalizer; distinct tags give decorrelated streams so that
/// sub-operations can be reseeded reproducibly without sharing state.
pub fn derive_seed(master: u64, tag: u64) -> u64 {
    let mut z = master ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Iterates over all multi-indices in `[0, n)^d`, calling `f` with each.
///
/// Index order: axis 0 is the fastest-varying (matches the flat layout used
/// by `GridFunction`).
pub fn for_each_index(d: usize, n: usize, mut f: impl FnMut(&[usize])) {
    let mut idx = vec![0usize; d];
    loop {
        f(&idx);
        let mut axis = 0;
        loop {
            if axis == d {
                return;
            }
            idx[axis] += 1;
            if idx[axis] < n {
                break;
            }
            idx[axis] = 0;
            axis += 1;
        }
    }
}

/// Flat offset of a multi-index in `[0, n)^d` (axis 0 fastest).
pub fn flat_index(idx: &[usize], n: usize) -> usize {
    let mut off = 0usize;
    for &i in idx.iter().rev() {
        off = off * n + i;
    }
    off
}

/// Inverse of `flat_index`.
pub fn unflatten(mut off: usize, d: usize, n: usize) -> Vec<usize> {
    let mut idx = vec![0usize; d];
    for slot in idx.iter_mut() {
        *slot = off % n;
        off /= n;
    }
    idx
}

/// Deterministic parallel sum: maps chunks in parallel, folds partial sums
/// sequentially in chunk order so the float result does not depend on the
/// number of worker threads.
pub fn par_sum_chunks<T: Sync>(items: &[T], chunk: usize, f: impl Fn(&[T]) -> f64 + Sync) -> f64 {
    let chunk = chunk.max(1);
    let partials: Vec<f64> = items.par_chunks(chunk).map(|c| f(c)).collect();
    partials.iter().sum()
}

/// Deterministic parallel sum over an index range, chunked.
pub fn par_sum_range(len: usize, chunk: usize, f: impl Fn(usize, usize) -> f64 + Sync) -> f64 {
    let chunk = chunk.max(1);
    let bounds: Vec<(usize, usize)> = (0..len)
        .step_by(chunk)
        .map(|lo| (lo, (lo + chunk).min(len)))
        .collect();
    let partials: Vec<f64> = bounds.par_iter().map(|&(lo, hi)| f(lo, hi)).collect();
    partials.iter().sum()
}
