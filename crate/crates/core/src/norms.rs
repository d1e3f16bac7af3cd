//! Averaging norms and uniformity diagnostics.
//!
//! `u1_norm` is the L^2 size of sliding window averages at a single scale.
//! `box_norm` measures correlation across pairs of axis-aligned windows on a
//! product splitting of the coordinates; its fourth power is a mean of
//! squared window Gram entries and is nonnegative by construction.
//! `uniformity_defect` reports how evenly a set fills its domain (or a
//! sub-box) at a given window scale.
//!
//! All windows use zero extension: a window hanging over the boundary picks
//! up no mass from outside, and normalization stays by window volume.

use crate::counting::product_integral_raw;
use crate::error::{LabError, Result};
use crate::grid::{box_kernel_1d, filter_axis, GridFunction};
use serde::Serialize;

fn check_window_scale(n: usize, l: f64, what: &str) -> Result<()> {
    let h = 1.0 / n as f64;
    if l < h - 1e-12 {
        return Err(LabError::unresolvable(format!(
            "{what} window L={l:.6} below the cell size h={h:.6}"
        )));
    }
    if l > 0.25 + 1e-12 {
        return Err(LabError::param(format!("{what} window L={l} exceeds 1/4")));
    }
    Ok(())
}

/// Per-cell weights of the window `[center - l/2, center + l/2]` on one axis:
/// overlap length divided by `l`. Cells without overlap are omitted.
pub(crate) fn window_weights_1d(n: usize, center: f64, l: f64) -> Vec<(usize, f64)> {
    let h = 1.0 / n as f64;
    let lo = center - l / 2.0;
    let hi = center + l / 2.0;
    let first = (lo / h).floor().max(0.0) as usize;
    let mut out = Vec::new();
    for i in first..n {
        let c_lo = i as f64 * h;
        if c_lo >= hi {
            break;
        }
        let c_hi = c_lo + h;
        let overlap = (c_hi.min(hi) - c_lo.max(lo)).max(0.0);
        if overlap > 0.0 {
            out.push((i, overlap / l));
        }
    }
    out
}

/// Symmetric kernel of the window average centered at a cell center.
fn center_window_kernel(n: usize, l: f64) -> (Vec<f64>, isize) {
    let h = 1.0 / n as f64;
    let radius = (l / (2.0 * h) + 0.5).ceil() as isize;
    let mut kernel = vec![0.0f64; (2 * radius + 1) as usize];
    for r in -radius..=radius {
        let c_lo = r as f64 * h - h / 2.0;
        let c_hi = c_lo + h;
        let overlap = (c_hi.min(l / 2.0) - c_lo.max(-l / 2.0)).max(0.0);
        kernel[(r + radius) as usize] = overlap / l;
    }
    (kernel, radius)
}

/// Sliding window average of `f` over `t + [-L/2, L/2]^d`, sampled at every
/// cell center `t`, with zero extension past the boundary.
pub fn window_field(f: &GridFunction, l: f64) -> Result<GridFunction> {
    check_window_scale(f.n(), l, "window average")?;
    let (kernel, radius) = center_window_kernel(f.n(), l);
    let mut values = f.values().to_vec();
    for axis in 0..f.d() {
        values = filter_axis(&values, f.n(), axis, &kernel, radius);
    }
    GridFunction::new(f.d(), f.n(), values)
}

/// Root mean square of the window averages of `f` at scale `l`.
pub fn u1_norm(f: &GridFunction, l: f64) -> Result<f64> {
    let field = window_field(f, l)?;
    let m = field.values().len() as f64;
    let ss: f64 = field.values().iter().map(|v| v * v).sum();
    Ok((ss / m).sqrt())
}

/// Cells and product weights of the axis-aligned window with the given
/// per-axis centers, as flat offsets within a `dims`-dimensional factor.
fn product_window(n: usize, dims: usize, centers: &[f64], l: f64) -> (Vec<usize>, Vec<f64>) {
    let lists: Vec<Vec<(usize, f64)>> =
        centers.iter().map(|&c| window_weights_1d(n, c, l)).collect();
    if lists.iter().any(|list| list.is_empty()) {
        return (Vec::new(), Vec::new());
    }
    let mut flats = vec![0usize];
    let mut weights = vec![1.0f64];
    let mut stride = 1usize;
    for list in lists.iter().take(dims) {
        let mut next_flats = Vec::with_capacity(flats.len() * list.len());
        let mut next_weights = Vec::with_capacity(flats.len() * list.len());
        for (&flat, &w) in flats.iter().zip(weights.iter()) {
            for &(i, wi) in list {
                next_flats.push(flat + i * stride);
                next_weights.push(w * wi);
            }
        }
        flats = next_flats;
        weights = next_weights;
        stride *= n;
    }
    (flats, weights)
}

fn check_split(d: usize, split: usize) -> Result<(usize, usize)> {
    if split == 0 || split >= d {
        return Err(LabError::param(format!(
            "coordinate split {split} must leave both factors nonempty in dimension {d}"
        )));
    }
    Ok((split, d - split))
}

/// Window-pair norm over one window pair: fourth root of the weighted mean
/// of `M(y, y')^2` with `M(y, y') = sum_x w1(x) f(x, y) f(x, y')`.
fn box_norm_windowed(
    f: &GridFunction,
    split: usize,
    l: f64,
    t1: &[f64],
    t2: &[f64],
) -> Result<f64> {
    let (d1, d2) = check_split(f.d(), split)?;
    if t1.len() != d1 || t2.len() != d2 {
        return Err(LabError::shape(format!(
            "window centers ({}, {}) do not match the split ({d1}, {d2})",
            t1.len(),
            t2.len()
        )));
    }
    check_window_scale(f.n(), l, "window pair")?;
    let n = f.n();
    let nx = n.pow(d1 as u32);
    let (xs, wx) = product_window(n, d1, t1, l);
    let (ys, wy) = product_window(n, d2, t2, l);
    if xs.is_empty() || ys.is_empty() {
        return Ok(0.0);
    }
    let vals = f.values();
    // F[x][y] with the x weight folded into one copy.
    let row = ys.len();
    let mut fa = vec![0.0f64; xs.len() * row];
    let mut fb = vec![0.0f64; xs.len() * row];
    for (xi, (&xf, &w)) in xs.iter().zip(wx.iter()).enumerate() {
        for (yi, &yf) in ys.iter().enumerate() {
            let v = vals[xf + nx * yf];
            fa[xi * row + yi] = w * v;
            fb[xi * row + yi] = v;
        }
    }
    let mut fourth = 0.0f64;
    for yi in 0..row {
        for yj in 0..row {
            let mut m = 0.0f64;
            for xi in 0..xs.len() {
                m += fa[xi * row + yi] * fb[xi * row + yj];
            }
            fourth += wy[yi] * wy[yj] * m * m;
        }
    }
    Ok(fourth.max(0.0).powf(0.25))
}

/// Pair offsets in `[-band, band]^d2` covering each unordered pair once:
/// lexicographically positive offsets with multiplicity 2, zero with 1.
fn half_offsets(d2: usize, band: isize) -> Vec<(Vec<isize>, f64)> {
    let mut out = Vec::new();
    let width = (2 * band + 1) as usize;
    let total = width.pow(d2 as u32);
    for code in 0..total {
        let mut rem = code;
        let mut delta = vec![0isize; d2];
        for slot in delta.iter_mut() {
            *slot = (rem % width) as isize - band;
            rem /= width;
        }
        let first_nonzero = delta.iter().find(|&&x| x != 0);
        match first_nonzero {
            None => out.push((delta, 1.0)),
            Some(&x) if x > 0 => out.push((delta, 2.0)),
            _ => {}
        }
    }
    out
}

/// Global window-pair norm: the windowed fourth powers averaged over a
/// lattice of window centers with the given spacing in cells.
pub fn box_norm_strided(f: &GridFunction, split: usize, l: f64, stride: usize) -> Result<f64> {
    let (d1, d2) = check_split(f.d(), split)?;
    check_window_scale(f.n(), l, "window pair")?;
    if stride == 0 {
        return Err(LabError::param("window lattice stride must be positive"));
    }
    let n = f.n();
    let h = 1.0 / n as f64;
    let nx = n.pow(d1 as u32);
    let ny = n.pow(d2 as u32);
    let npos = n.div_ceil(stride);
    let centers: Vec<f64> =
        (0..npos).map(|p| (p * stride) as f64 * h + stride as f64 * h / 2.0).collect();
    let wlists: Vec<Vec<(usize, f64)>> =
        centers.iter().map(|&c| window_weights_1d(n, c, l)).collect();

    // Lattice-averaged pair weights kappa(u, u + delta) for one axis of the
    // second factor; product over axes gives the pair weight k2(y, y').
    let band = (l * n as f64).ceil() as isize + 1;
    let mut kappa = vec![vec![0.0f64; band as usize + 1]; n];
    for list in &wlists {
        for (ai, &(u, wu)) in list.iter().enumerate() {
            for &(v, wv) in &list[ai..] {
                let delta = v - u;
                if delta <= band as usize {
                    kappa[u][delta] += wu * wv;
                }
            }
        }
    }
    let pos_scale = 1.0 / npos as f64;
    for row in kappa.iter_mut() {
        for k in row.iter_mut() {
            *k *= pos_scale;
        }
    }
    let kap = |u: usize, delta: isize| -> f64 {
        if delta >= 0 {
            kappa[u][delta as usize]
        } else {
            kappa[(u as isize + delta) as usize][(-delta) as usize]
        }
    };

    // Per-offset tables: k2 factor per axis, flat jump, multiplicity.
    let mut plans = Vec::new();
    for (delta, mult) in half_offsets(d2, band) {
        if delta.iter().any(|&dl| dl.unsigned_abs() >= n) {
            continue;
        }
        let mut jump = 0isize;
        let mut stride_b = 1isize;
        for &dl in &delta {
            jump += dl * stride_b;
            stride_b *= n as isize;
        }
        let mut kb = Vec::with_capacity(d2);
        for &dl in &delta {
            let mut col = vec![0.0f64; n];
            let lo = (-dl).max(0) as usize;
            let hi = n - dl.max(0) as usize;
            for (u, slot) in col.iter_mut().enumerate().take(hi).skip(lo) {
                *slot = kap(u, dl);
            }
            kb.push(col);
        }
        plans.push(OffsetPlan { delta, jump, mult, kb });
    }

    // One x-window per lattice point of the first factor.
    let t1_count = npos.pow(d1 as u32);
    let vals = f.values();
    let partials: Vec<f64> = {
        use rayon::prelude::*;
        (0..t1_count)
            .into_par_iter()
            .map(|combo| {
                let mut rem = combo;
                let mut centers1 = Vec::with_capacity(d1);
                for _ in 0..d1 {
                    centers1.push(centers[rem % npos]);
                    rem /= npos;
                }
                let (xs, wx) = product_window(n, d1, &centers1, l);
                if xs.is_empty() {
                    return 0.0;
                }
                // Row-gathered slices: fa has the x weight folded in.
                let mut fa = vec![0.0f64; xs.len() * ny];
                let mut fb = vec![0.0f64; xs.len() * ny];
                for (xi, (&xf, &w)) in xs.iter().zip(wx.iter()).enumerate() {
                    for y in 0..ny {
                        let v = vals[xf + nx * y];
                        fa[xi * ny + y] = w * v;
                        fb[xi * ny + y] = v;
                    }
                }
                let mut acc = 0.0f64;
                for plan in &plans {
                    accumulate_pairs(&mut acc, plan, n, &fa, &fb, xs.len());
                }
                acc
            })
            .collect()
    };
    let fourth = partials.iter().sum::<f64>() / t1_count as f64;
    debug_assert!(fourth >= -1e-12, "window-pair fourth power {fourth} negative");
    Ok(fourth.max(0.0).powf(0.25))
}

/// One pair displacement of the second factor: the flat jump between paired
/// cells, the pair multiplicity, and the per-axis lattice-averaged weights.
struct OffsetPlan {
    delta: Vec<isize>,
    jump: isize,
    mult: f64,
    kb: Vec<Vec<f64>>,
}

fn accumulate_pairs(acc: &mut f64, plan: &OffsetPlan, n: usize, fa: &[f64], fb: &[f64], xlen: usize) {
    let lo: Vec<usize> = plan.delta.iter().map(|&dl| (-dl).max(0) as usize).collect();
    let hi: Vec<usize> = plan.delta.iter().map(|&dl| n - dl.max(0) as usize).collect();
    if lo.iter().zip(hi.iter()).any(|(&a, &b)| a >= b) {
        return;
    }
    let row = fa.len() / xlen;
    let mut idx: Vec<usize> = lo[1..].to_vec();
    loop {
        let mut base = 0usize;
        let mut kbase = 1.0f64;
        let mut stride = n;
        for (b, &i) in idx.iter().enumerate() {
            base += i * stride;
            kbase *= plan.kb[b + 1][i];
            stride *= n;
        }
        if kbase != 0.0 {
            for y0 in lo[0]..hi[0] {
                let k2 = kbase * plan.kb[0][y0];
                if k2 == 0.0 {
                    continue;
                }
                let y = base + y0;
                let yp = (y as isize + plan.jump) as usize;
                let mut m = 0.0f64;
                for xi in 0..xlen {
                    m += fa[xi * row + y] * fb[xi * row + yp];
                }
                *acc += plan.mult * k2 * m * m;
            }
        }
        // Odometer over the remaining axes of the second factor.
        let mut b = 0usize;
        loop {
            if b >= idx.len() {
                return;
            }
            idx[b] += 1;
            if idx[b] < hi[b + 1] {
                break;
            }
            idx[b] = lo[b + 1];
            b += 1;
        }
    }
}

/// Window-pair norm on a product splitting of the coordinates.
///
/// With a window pair `(t1, t2)` this is the single-window form; without one
/// it averages the fourth powers over a lattice of window centers spaced
/// `L/4` apart (clamped to the cell size).
pub fn box_norm(
    f: &GridFunction,
    split: usize,
    l: f64,
    window: Option<(&[f64], &[f64])>,
) -> Result<f64> {
    match window {
        Some((t1, t2)) => box_norm_windowed(f, split, l, t1, t2),
        None => {
            let stride = ((l * f.n() as f64 / 4.0).round() as usize).max(1);
            box_norm_strided(f, split, l, stride)
        }
    }
}

/// Window-pair norm through its smoothed two-shift form: pair displacements
/// weighted by tent kernels of width `2L` per factor. Agrees with `box_norm`
/// up to an O(L) smoothing error and is used for cross-checking bounds.
pub fn box_norm_psi_form(f: &GridFunction, split: usize, l: f64) -> Result<f64> {
    let (d1, d2) = check_split(f.d(), split)?;
    check_window_scale(f.n(), l, "window pair")?;
    let d = f.d();
    let n = f.n();
    let (kernel, radius) = box_kernel_1d(n, l)?;
    let tent_radius = 2 * radius;
    let mut tent = vec![0.0f64; (2 * tent_radius + 1) as usize];
    for (i, a) in kernel.iter().enumerate() {
        for (j, b) in kernel.iter().enumerate() {
            tent[i + j] += a * b;
        }
    }
    let shifts = |dims: usize| -> Vec<(Vec<isize>, f64)> {
        let width = tent.len();
        let mut out = Vec::new();
        for code in 0..width.pow(dims as u32) {
            let mut rem = code;
            let mut s = vec![0isize; dims];
            let mut w = 1.0f64;
            for slot in s.iter_mut() {
                let k = rem % width;
                rem /= width;
                *slot = k as isize - tent_radius;
                w *= tent[k];
            }
            if w != 0.0 {
                out.push((s, w));
            }
        }
        out
    };
    let s1s = shifts(d1);
    let s2s = shifts(d2);
    let vals = f.values();
    let zero = vec![0isize; d];
    let mut total = 0.0f64;
    for (s1, w1) in &s1s {
        let mut o1 = vec![0isize; d];
        o1[..d1].copy_from_slice(s1);
        for (s2, w2) in &s2s {
            let mut o2 = vec![0isize; d];
            o2[d1..].copy_from_slice(s2);
            let mut o3 = o1.clone();
            o3[d1..].copy_from_slice(s2);
            let q = product_integral_raw(
                d,
                n,
                &[(vals, &zero[..]), (vals, &o1[..]), (vals, &o2[..]), (vals, &o3[..])],
            );
            total += w1 * w2 * q;
        }
    }
    Ok(total.max(0.0).powf(0.25))
}

/// Summary of how evenly a set fills its domain at window scale `l`.
#[derive(Debug, Clone, Serialize)]
pub struct UniformityReport {
    /// Window scale in absolute units.
    pub l: f64,
    /// Density of the set within the examined region.
    pub density: f64,
    /// Window-average L^2 norm of the balanced part.
    pub norm: f64,
    /// Root mean square deviation of window density from the region density.
    pub eps_min: f64,
    /// Fraction of window positions whose density falls below
    /// `(1 - eps_min^2) * density`.
    pub bad_mass: f64,
}

/// Measures the uniformity of the set `a` (values in `[0, 1]`) at window
/// scale `l`, optionally restricted to the sub-box `(lo, side)` in cells.
/// The reported scale stays in absolute units; inside a sub-box the window
/// is rescaled accordingly.
pub fn uniformity_defect(
    a: &GridFunction,
    l: f64,
    window: Option<(&[usize], usize)>,
) -> Result<UniformityReport> {
    if a.min_value() < -1e-9 || a.max_value() > 1.0 + 1e-9 {
        return Err(LabError::param("uniformity_defect expects values in [0, 1]"));
    }
    let (local, l_rel) = match window {
        Some((lo, side)) => {
            let sub = a.extract_box(lo, side)?;
            let rel = l * a.n() as f64 / side as f64;
            (sub, rel)
        }
        None => (a.clone(), l),
    };
    check_window_scale(local.n(), l_rel, "uniformity")?;
    let alpha = local.density();
    let dmap = window_field(&local, l_rel)?;
    let m = dmap.values().len() as f64;
    let msd: f64 = dmap.values().iter().map(|v| (v - alpha) * (v - alpha)).sum::<f64>() / m;
    let eps_min = msd.sqrt();
    let thresh = (1.0 - eps_min * eps_min) * alpha;
    let bad = dmap.values().iter().filter(|&&v| v < thresh - 1e-12).count();
    let balanced = local.map(|v| v - alpha);
    let norm = u1_norm(&balanced, l_rel)?;
    Ok(UniformityReport { l, density: alpha, norm, eps_min, bad_mass: bad as f64 / m })
}
