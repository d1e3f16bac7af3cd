//! Grid representation of measurable subsets of the unit cube.
//!
//! A `GridFunction` stores cell averages of a function on `[0,1]^d` at
//! resolution `n` cells per axis (axis 0 is the fastest-varying index).
//! Indicator sets are rasterized so each cell holds the fraction of the
//! cell covered; densities, balanced parts, window smoothing and
//! correlation fields are all computed from that representation.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::util::{flat_index, for_each_index, par_sum_chunks, unflatten};

/// Hard cap on d*log2(2n) for FFT-backed correlation buffers.
const FFT_LOG_BUDGET: f64 = 24.0;

/// Cell-averaged function on `[0,1]^d`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction {
    d: usize,
    n: usize,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(d: usize, n: usize, values: Vec<f64>) -> Result<Self> {
        check_grid_shape(d, n)?;
        let want = n.pow(d as u32);
        if values.len() != want {
            return Err(LabError::shape(format!(
                "expected {want} values for d={d}, n={n}, got {}",
                values.len()
            )));
        }
        Ok(GridFunction { d, n, values })
    }

    pub fn constant(d: usize, n: usize, value: f64) -> Result<Self> {
        check_grid_shape(d, n)?;
        Ok(GridFunction { d, n, values: vec![value; n.pow(d as u32)] })
    }

    pub fn from_fn(d: usize, n: usize, mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        check_grid_shape(d, n)?;
        let mut values = vec![0.0; n.pow(d as u32)];
        for_each_index(d, n, |idx| {
            values[flat_index(idx, n)] = f(idx);
        });
        Ok(GridFunction { d, n, values })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Grid step 1/n.
    pub fn h(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.values[flat_index(idx, self.n)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let off = flat_index(idx, self.n);
        self.values[off] = v;
    }

    /// Center coordinates of a cell.
    pub fn cell_center(&self, idx: &[usize]) -> Vec<f64> {
        let h = self.h();
        idx.iter().map(|&i| (i as f64 + 0.5) * h).collect()
    }

    /// Mean value, i.e. the integral over `[0,1]^d`.
    ///
    /// For a rasterized indicator this is the measure of the set.
    pub fn density(&self) -> f64 {
        let sum = par_sum_chunks(&self.values, 1 << 14, |c| c.iter().sum());
        sum / self.values.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().fold(f64::INFINITY, |m, &v| m.min(v))
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> GridFunction {
        GridFunction {
            d: self.d,
            n: self.n,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_shape(&self, other: &GridFunction) -> bool {
        self.d == other.d && self.n == other.n
    }

    /// Pointwise product into self.
    pub fn mul_assign(&mut self, other: &GridFunction) -> Result<()> {
        if !self.same_shape(other) {
            return Err(LabError::shape("pointwise product on mismatched grids"));
        }
        for (a, b) in self.values.iter_mut().zip(other.values.iter()) {
            *a *= b;
        }
        Ok(())
    }

    /// L2 inner product with the Lebesgue cell weight h^d.
    pub fn inner(&self, other: &GridFunction) -> Result<f64> {
        use rayon::prelude::*;
        if !self.same_shape(other) {
            return Err(LabError::shape("inner product on mismatched grids"));
        }
        let hd = self.h().powi(self.d as i32);
        let chunk = 1 << 14;
        let partials: Vec<f64> = self
            .values
            .par_chunks(chunk)
            .zip(other.values.par_chunks(chunk))
            .map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>())
            .collect();
        Ok(partials.iter().sum::<f64>() * hd)
    }

    /// Extracts the sub-box `[lo, lo+side)^d` (in cells) rescaled to a unit
    /// cube of resolution `side`.
    pub fn extract_box(&self, lo: &[usize], side: usize) -> Result<GridFunction> {
        if lo.len() != self.d {
            return Err(LabError::shape("extract_box index dimension"));
        }
        if side == 0 || lo.iter().any(|&l| l + side > self.n) {
            return Err(LabError::param("extract_box out of range"));
        }
        let mut out = vec![0.0; side.pow(self.d as u32)];
        for_each_index(self.d, side, |idx| {
            let src: Vec<usize> = idx.iter().zip(lo.iter()).map(|(&i, &l)| i + l).collect();
            out[flat_index(idx, side)] = self.get(&src);
        });
        GridFunction::new(self.d, side, out)
    }

    /// Values of `x -> f(x - z)` with multilinear interpolation of the shift
    /// and zero extension outside the cube.
    ///
    /// The shift is decomposed into an integer lattice part and a fractional
    /// part; the output is the correspondingly weighted combination of
    /// integer-shifted copies, which keeps shifted products consistent with
    /// interpolated correlation fields.
    /// Value of the piecewise-constant extension at the point `p`
    /// (zero outside the unit cube).
    pub fn at_point(&self, p: &[f64]) -> f64 {
        debug_assert_eq!(p.len(), self.d);
        let mut flat = 0usize;
        let mut stride = 1usize;
        for a in 0..self.d {
            let c = (p[a] * self.n as f64).floor();
            if c < 0.0 || c >= self.n as f64 {
                return 0.0;
            }
            flat += (c as usize) * stride;
            stride *= self.n;
        }
        self.values[flat]
    }

    pub fn shifted(&self, z: &[f64]) -> Result<GridFunction> {
        if z.len() != self.d {
            return Err(LabError::shape("shift vector dimension"));
        }
        let mut out = vec![0.0; self.values.len()];
        self.shifted_into(z, &mut out)?;
        Ok(GridFunction { d: self.d, n: self.n, values: out })
    }

    pub fn shifted_into(&self, z: &[f64], out: &mut [f64]) -> Result<()> {
        if z.len() != self.d || out.len() != self.values.len() {
            return Err(LabError::shape("shifted_into operand shapes"));
        }
        let d = self.d;
        let n = self.n as isize;
        let mut base = vec![0isize; d];
        let mut frac = vec![0.0f64; d];
        for a in 0..d {
            let zc = z[a] * self.n as f64;
            let fl = zc.floor();
            base[a] = fl as isize;
            frac[a] = zc - fl;
        }
        // Corner weights and flat offsets for the 2^d gather.
        let corners = 1usize << d;
        let mut weights = vec![0.0f64; corners];
        let mut offsets = vec![0isize; corners];
        let mut strides = vec![0isize; d];
        let mut s = 1isize;
        for a in 0..d {
            strides[a] = s;
            s *= n;
        }
        for c in 0..corners {
            let mut w = 1.0;
            let mut off = 0isize;
            for a in 0..d {
                let bit = (c >> a) & 1;
                w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
                off += (base[a] + bit as isize) * strides[a];
            }
            weights[c] = w;
            offsets[c] = off;
        }
        let mut idx = vec![0usize; d];
        for (flat, slot) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for c in 0..corners {
                if weights[c] == 0.0 {
                    continue;
                }
                let mut ok = true;
                for a in 0..d {
                    let j = idx[a] as isize - base[a] - ((c >> a) & 1) as isize;
                    if j < 0 || j >= n {
                        ok = false;
                        break;
                    }
                }
                if ok {
                    acc += weights[c] * self.values[(flat as isize - offsets[c]) as usize];
                }
            }
            *slot = acc;
            let mut a = 0;
            while a < d {
                idx[a] += 1;
                if idx[a] < self.n {
                    break;
                }
                idx[a] = 0;
                a += 1;
            }
        }
        Ok(())
    }
}

fn check_grid_shape(d: usize, n: usize) -> Result<()> {
    if d == 0 || d > 6 {
        return Err(LabError::param(format!("dimension d={d} outside 1..=6")));
    }
    if n < 8 {
        return Err(LabError::param(format!("resolution n={n} below the floor of 8")));
    }
    let cells = (n as f64).powi(d as i32);
    if cells > 2.0e8 {
        return Err(LabError::param(format!("grid too large: n^d = {cells:.3e}")));
    }
    Ok(())
}

/// Tensor product: `(a x b)(x, y) = a(x) * b(y)` on the product grid.
///
/// Both factors must share the same per-axis resolution.
pub fn tensor(a: &GridFunction, b: &GridFunction) -> Result<GridFunction> {
    if a.n != b.n {
        return Err(LabError::shape("tensor factors must share n"));
    }
    let d = a.d + b.d;
    check_grid_shape(d, a.n)?;
    let n = a.n;
    let mut values = vec![0.0; n.pow(d as u32)];
    let block = n.pow(a.d as u32);
    for (jb, vb) in b.values.iter().enumerate() {
        let off = jb * block;
        for (ja, va) in a.values.iter().enumerate() {
            values[off + ja] = va * vb;
        }
    }
    GridFunction::new(d, n, values)
}

/// Set expression over the unit cube.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SetSpec {
    Cube { center: Vec<f64>, halfwidth: f64 },
    Ball { center: Vec<f64>, radius: f64 },
    Halfspace { normal: Vec<f64>, offset: f64 },
    Random { dim: usize, p: f64, cellsize: f64, seed: u64 },
    Product { a: Box<SetSpec>, b: Box<SetSpec> },
    Union { a: Box<SetSpec>, b: Box<SetSpec> },
    Intersect { a: Box<SetSpec>, b: Box<SetSpec> },
    Complement { a: Box<SetSpec> },
}

impl SetSpec {
    pub fn dim(&self) -> Result<usize> {
        match self {
            SetSpec::Cube { center, .. } | SetSpec::Ball { center, .. } => Ok(center.len()),
            SetSpec::Halfspace { normal, .. } => Ok(normal.len()),
            SetSpec::Random { dim, .. } => Ok(*dim),
            SetSpec::Product { a, b } => Ok(a.dim()? + b.dim()?),
            SetSpec::Union { a, b } | SetSpec::Intersect { a, b } => {
                let da = a.dim()?;
                let db = b.dim()?;
                if da != db {
                    return Err(LabError::BadSetSpec {
                        context: format!("union/intersect children of dims {da} and {db}"),
                    });
                }
                Ok(da)
            }
            SetSpec::Complement { a } => a.dim(),
        }
    }
}

/// Rasterizes a set expression to cell cover fractions.
///
/// Cubes and halfspaces are exact; balls use a 3^d supersample per cell;
/// `random` fills an aligned coarse lattice with Bernoulli(p) cells.
/// Boolean composition uses max/min/1-v on the cover fractions.
pub fn make_grid_function(spec: &SetSpec, d: usize, n: usize) -> Result<GridFunction> {
    let sd = spec.dim()?;
    if sd != d {
        return Err(LabError::BadSetSpec {
            context: format!("spec dimension {sd} does not match requested d={d}"),
        });
    }
    check_grid_shape(d, n)?;
    rasterize(spec, n)
}

fn rasterize(spec: &SetSpec, n: usize) -> Result<GridFunction> {
    let d = spec.dim()?;
    let h = 1.0 / n as f64;
    match spec {
        SetSpec::Cube { center, halfwidth } => {
            if *halfwidth <= 0.0 {
                return Err(LabError::BadSetSpec { context: "cube halfwidth <= 0".into() });
            }
            // Separable: per-axis overlap fraction of the cell with the slab.
            let mut per_axis: Vec<Vec<f64>> = Vec::with_capacity(d);
            for a in 0..d {
                let lo = center[a] - halfwidth;
                let hi = center[a] + halfwidth;
                let mut v = vec![0.0; n];
                for (i, slot) in v.iter_mut().enumerate() {
                    let c0 = i as f64 * h;
                    let c1 = c0 + h;
                    let ov = (c1.min(hi) - c0.max(lo)).max(0.0);
                    *slot = ov / h;
                }
                per_axis.push(v);
            }
            GridFunction::from_fn(d, n, |idx| {
                idx.iter().enumerate().map(|(a, &i)| per_axis[a][i]).product()
            })
        }
        SetSpec::Ball { center, radius } => {
            if *radius <= 0.0 {
                return Err(LabError::BadSetSpec { context: "ball radius <= 0".into() });
            }
            let offsets = [1.0 / 6.0, 0.5, 5.0 / 6.0];
            let samples = 3usize.pow(d as u32);
            let r2 = radius * radius;
            GridFunction::from_fn(d, n, |idx| {
                let mut inside = 0usize;
                for s in 0..samples {
                    let mut t = s;
                    let mut dist2 = 0.0;
                    for (a, &i) in idx.iter().enumerate() {
                        let x = (i as f64 + offsets[t % 3]) * h;
                        t /= 3;
                        let dx = x - center[a];
                        dist2 += dx * dx;
                        let _ = a;
                    }
                    if dist2 <= r2 {
                        inside += 1;
                    }
                }
                inside as f64 / samples as f64
            })
        }
        SetSpec::Halfspace { normal, offset } => {
            if normal.iter().all(|&a| a == 0.0) {
                return Err(LabError::BadSetSpec { context: "halfspace normal is zero".into() });
            }
            GridFunction::from_fn(d, n, |idx| {
                let lo: Vec<f64> = idx.iter().map(|&i| i as f64 * h).collect();
                halfspace_cell_fraction(normal, *offset, &lo, h)
            })
        }
        SetSpec::Random { dim, p, cellsize, seed } => {
            if !(0.0..=1.0).contains(p) {
                return Err(LabError::BadSetSpec { context: "random p outside [0,1]".into() });
            }
            let m = (1.0 / cellsize).round() as usize;
            if m == 0 || (m as f64 * cellsize - 1.0).abs() > 1e-9 {
                return Err(LabError::BadSetSpec {
                    context: format!("random cellsize {cellsize} does not divide 1"),
                });
            }
            if m > n || n % m != 0 {
                return Err(LabError::BadSetSpec {
                    context: format!("random cellsize 1/{m} incompatible with n={n}"),
                });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut bits = vec![0.0f64; m.pow(*dim as u32)];
            for slot in bits.iter_mut() {
                *slot = if rng.gen::<f64>() < *p { 1.0 } else { 0.0 };
            }
            let ratio = n / m;
            GridFunction::from_fn(*dim, n, |idx| {
                let coarse: Vec<usize> = idx.iter().map(|&i| i / ratio).collect();
                bits[flat_index(&coarse, m)]
            })
        }
        SetSpec::Product { a, b } => {
            let fa = rasterize(a, n)?;
            let fb = rasterize(b, n)?;
            tensor(&fa, &fb)
        }
        SetSpec::Union { a, b } => {
            let fa = rasterize(a, n)?;
            let fb = rasterize(b, n)?;
            let values =
                fa.values.iter().zip(fb.values.iter()).map(|(x, y)| x.max(*y)).collect();
            GridFunction::new(d, n, values)
        }
        SetSpec::Intersect { a, b } => {
            let fa = rasterize(a, n)?;
            let fb = rasterize(b, n)?;
            let values =
                fa.values.iter().zip(fb.values.iter()).map(|(x, y)| x.min(*y)).collect();
            GridFunction::new(d, n, values)
        }
        SetSpec::Complement { a } => {
            let fa = rasterize(a, n)?;
            Ok(fa.map(|v| 1.0 - v))
        }
    }
}

/// Exact volume fraction of the cell `[lo, lo+h]^d` lying in `a.x <= b`.
///
/// Corner-sum formula for the volume of a box clipped by a halfspace,
/// after reducing to positive coefficients on the active axes.
fn halfspace_cell_fraction(a: &[f64], b: f64, lo: &[f64], h: f64) -> f64 {
    let mut alphas: Vec<f64> = Vec::with_capacity(a.len());
    let mut t = b;
    for (ai, li) in a.iter().zip(lo.iter()) {
        if *ai == 0.0 {
            continue;
        }
        t -= ai * li;
        if *ai > 0.0 {
            alphas.push(ai * h);
        } else {
            // u -> 1-u flips the sign and shifts the threshold.
            t -= ai * h;
            alphas.push(-ai * h);
        }
    }
    let m = alphas.len();
    if m == 0 {
        return if 0.0 <= t { 1.0 } else { 0.0 };
    }
    let total: f64 = alphas.iter().sum();
    if t <= 0.0 {
        return 0.0;
    }
    if t >= total {
        return 1.0;
    }
    let mut factorial = 1.0;
    for k in 1..=m {
        factorial *= k as f64;
    }
    let denom = factorial * alphas.iter().product::<f64>();
    let mut vol = 0.0;
    for s in 0..(1usize << m) {
        let mut arg = t;
        let mut sign = 1.0;
        for (i, alpha) in alphas.iter().enumerate() {
            if (s >> i) & 1 == 1 {
                arg -= alpha;
                sign = -sign;
            }
        }
        if arg > 0.0 {
            vol += sign * arg.powi(m as i32);
        }
    }
    (vol / denom).clamp(0.0, 1.0)
}

/// Balanced part `f = a - alpha * mask` with `alpha = |a| / |mask|`.
///
/// With no mask the baseline is the full cube (`mask = 1`). Returns the
/// balanced function and alpha.
pub fn balanced_part(a: &GridFunction, mask: Option<&GridFunction>) -> Result<(GridFunction, f64)> {
    if let Some(m) = mask {
        if !a.same_shape(m) {
            return Err(LabError::shape("balanced_part mask grid mismatch"));
        }
        let viol = a
            .values
            .iter()
            .zip(m.values.iter())
            .map(|(x, y)| (x - y).max(0.0).max(-x.min(0.0)))
            .fold(0.0f64, f64::max);
        if viol > 1e-9 {
            return Err(LabError::param(format!(
                "balanced_part requires 0 <= a <= mask pointwise (violation {viol:.3e})"
            )));
        }
        let beta = m.density();
        if beta <= 0.0 {
            return Err(LabError::param("balanced_part mask has zero measure"));
        }
        let alpha = a.density() / beta;
        let values = a
            .values
            .iter()
            .zip(m.values.iter())
            .map(|(x, y)| x - alpha * y)
            .collect();
        Ok((GridFunction { d: a.d, n: a.n, values }, alpha))
    } else {
        let alpha = a.density();
        Ok((a.map(|v| v - alpha), alpha))
    }
}

/// Exact discrete kernel of a single width-L box average on cell data.
///
/// `kernel[r + radius]` is the weight of the cell at offset r; weights are
/// nonnegative and renormalized to sum to 1.
pub fn box_kernel_1d(n: usize, length: f64) -> Result<(Vec<f64>, isize)> {
    let h = 1.0 / n as f64;
    if length < h - 1e-12 || length > 1.0 + 1e-12 {
        return Err(LabError::unresolvable(format!(
            "box window L={length} outside [h, 1] at n={n}"
        )));
    }
    let radius = (length / (2.0 * h) + 1.0).ceil() as isize;
    let mut kernel = vec![0.0f64; (2 * radius + 1) as usize];
    for r in -radius..=radius {
        // (1/(h*L)) Int_0^h len([rh, rh+h] cap [x-L/2, x+L/2]) dx, exact by
        // integrating the piecewise-linear overlap between its breakpoints.
        let cell_lo = r as f64 * h;
        let cell_hi = cell_lo + h;
        let mut breaks = vec![0.0, h];
        for candidate in [
            cell_lo - length / 2.0,
            cell_lo + length / 2.0,
            cell_hi - length / 2.0,
            cell_hi + length / 2.0,
        ] {
            if candidate > 0.0 && candidate < h {
                breaks.push(candidate);
            }
        }
        breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let overlap = |x: f64| -> f64 {
            (cell_hi.min(x + length / 2.0) - cell_lo.max(x - length / 2.0)).max(0.0)
        };
        let mut integral = 0.0;
        for w in breaks.windows(2) {
            let mid = 0.5 * (w[0] + w[1]);
            integral += (w[1] - w[0]) * overlap(mid);
        }
        kernel[(r + radius) as usize] = integral / (h * length);
    }
    let total: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= total;
    }
    Ok((kernel, radius))
}

pub(crate) fn filter_axis(values: &[f64], n: usize, axis: usize, kernel: &[f64], radius: isize) -> Vec<f64> {
    use rayon::prelude::*;
    let stride: usize = n.pow(axis as u32);
    let len = values.len();
    (0..len)
        .into_par_iter()
        .map(|flat| {
            let j = (flat / stride) % n;
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                if *w == 0.0 {
                    continue;
                }
                let r = k as isize - radius;
                let src = j as isize - r;
                if src >= 0 && src < n as isize {
                    acc += w * values[(flat as isize - r * stride as isize) as usize];
                }
            }
            acc
        })
        .collect()
}

/// Single box average over the centered window `t + Q_L`, zero extension.
pub fn box_average(f: &GridFunction, length: f64) -> Result<GridFunction> {
    let (kernel, radius) = box_kernel_1d(f.n, length)?;
    let mut values = f.values.clone();
    for axis in 0..f.d {
        values = filter_axis(&values, f.n, axis, &kernel, radius);
    }
    Ok(GridFunction { d: f.d, n: f.n, values })
}

/// Smoothing by the tent kernel (two iterated width-L box averages per
/// axis), zero extension. Preserves total mass up to boundary truncation.
pub fn box_smooth(f: &GridFunction, length: f64) -> Result<GridFunction> {
    let (kernel, radius) = box_kernel_1d(f.n, length)?;
    // Tent kernel = discrete self-convolution of the box kernel.
    let tent_radius = 2 * radius;
    let mut tent = vec![0.0f64; (2 * tent_radius + 1) as usize];
    for (i, a) in kernel.iter().enumerate() {
        for (j, b) in kernel.iter().enumerate() {
            tent[i + j] += a * b;
        }
    }
    let mut values = f.values.clone();
    for axis in 0..f.d {
        values = filter_axis(&values, f.n, axis, &tent, tent_radius);
    }
    Ok(GridFunction { d: f.d, n: f.n, values })
}

/// Cross-correlation field `C(z) = Int f0(x) f1(x - z) dx` on the shift
/// lattice `{-n..n-1}^d / n`, computed with zero-padded FFTs.
#[derive(Clone, Debug)]
pub struct CorrelationField {
    d: usize,
    n: usize,
    m: usize,
    values: Vec<f64>,
}

impl CorrelationField {
    pub(crate) fn from_raw(d: usize, n: usize, values: Vec<f64>) -> CorrelationField {
        let m = 2 * n;
        debug_assert_eq!(values.len(), m.pow(d as u32));
        CorrelationField { d, n, m, values }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Value at an integer lattice shift (cells); zero outside `[-n, n-1]`.
    pub fn at_lattice(&self, shift: &[isize]) -> f64 {
        debug_assert_eq!(shift.len(), self.d);
        let mut flat = 0usize;
        for &s in shift.iter().rev() {
            if s < -(self.n as isize) || s >= self.n as isize {
                return 0.0;
            }
            let wrapped = s.rem_euclid(self.m as isize) as usize;
            flat = flat * self.m + wrapped;
        }
        self.values[flat]
    }

    /// Multilinear interpolation at a physical shift `z` in `[-1, 1]^d`.
    pub fn value_at(&self, z: &[f64]) -> f64 {
        debug_assert_eq!(z.len(), self.d);
        let nf = self.n as f64;
        let d = self.d;
        let mut base = vec![0isize; d];
        let mut frac = vec![0.0f64; d];
        for a in 0..d {
            let zc = z[a] * nf;
            let fl = zc.floor();
            base[a] = fl as isize;
            frac[a] = zc - fl;
        }
        let mut acc = 0.0;
        let mut shift = vec![0isize; d];
        for c in 0..(1usize << d) {
            let mut w = 1.0;
            for a in 0..d {
                let bit = (c >> a) & 1;
                w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
                shift[a] = base[a] + bit as isize;
            }
            if w != 0.0 {
                acc += w * self.at_lattice(&shift);
            }
        }
        acc
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Local gradient magnitude estimate (central differences, cell units)
    /// at a physical shift; used for interpolation error surfacing.
    pub fn gradient_norm_at(&self, z: &[f64]) -> f64 {
        let h = 1.0 / self.n as f64;
        let mut g2 = 0.0;
        let mut zp = z.to_vec();
        for a in 0..self.d {
            zp[a] = z[a] + h;
            let up = self.value_at(&zp);
            zp[a] = z[a] - h;
            let dn = self.value_at(&zp);
            zp[a] = z[a];
            let da = (up - dn) / (2.0 * h);
            g2 += da * da;
        }
        g2.sqrt()
    }
}

pub fn fft_budget_ok(d: usize, n: usize) -> bool {
    d as f64 * (2.0 * n as f64).log2() <= FFT_LOG_BUDGET
}

/// Forward DFT of a real array on the cyclic lattice `[0, m)^d`.
pub fn dft_forward(values: &[f64], d: usize, m: usize) -> Result<Vec<Complex64>> {
    if values.len() != m.pow(d as u32) {
        return Err(LabError::shape("dft_forward length"));
    }
    let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_nd(&mut buf, d, m, false);
    Ok(buf)
}

/// Inverse DFT (normalized by m^d), returning the real parts.
pub fn dft_inverse_real(mut buf: Vec<Complex64>, d: usize, m: usize) -> Result<Vec<f64>> {
    if buf.len() != m.pow(d as u32) {
        return Err(LabError::shape("dft_inverse length"));
    }
    fft_nd(&mut buf, d, m, true);
    let scale = 1.0 / buf.len() as f64;
    Ok(buf.iter().map(|c| c.re * scale).collect())
}

fn fft_nd(buf: &mut [Complex64], d: usize, m: usize, inverse: bool) {
    use rayon::prelude::*;
    let mut planner = FftPlanner::<f64>::new();
    let plan = if inverse { planner.plan_fft_inverse(m) } else { planner.plan_fft_forward(m) };
    // Axis 0: contiguous lanes, parallel.
    buf.par_chunks_mut(m).for_each_init(
        || vec![Complex64::new(0.0, 0.0); plan.get_inplace_scratch_len()],
        |scratch, lane| {
            plan.process_with_scratch(lane, scratch);
        },
    );
    // Higher axes: strided lanes gathered into scratch.
    let total = buf.len();
    let mut lane = vec![Complex64::new(0.0, 0.0); m];
    let mut scratch = vec![Complex64::new(0.0, 0.0); plan.get_inplace_scratch_len()];
    for axis in 1..d {
        let stride = m.pow(axis as u32);
        let block = stride * m;
        for block_start in (0..total).step_by(block) {
            for offset in 0..stride {
                let start = block_start + offset;
                for (k, slot) in lane.iter_mut().enumerate() {
                    *slot = buf[start + k * stride];
                }
                plan.process_with_scratch(&mut lane, &mut scratch);
                for (k, v) in lane.iter().enumerate() {
                    buf[start + k * stride] = *v;
                }
            }
        }
    }
}

/// Zero-padded spectrum of a grid function on the `(2n)^d` lattice.
pub fn padded_spectrum(f: &GridFunction) -> Result<Vec<Complex64>> {
    if !fft_budget_ok(f.d, f.n) {
        return Err(LabError::FftBudget { d: f.d, n: f.n });
    }
    let m = 2 * f.n;
    let mut padded = vec![0.0f64; m.pow(f.d as u32)];
    for_each_index(f.d, f.n, |idx| {
        padded[flat_index_m(idx, m)] = f.values[flat_index(idx, f.n)];
    });
    dft_forward(&padded, f.d, m)
}

fn flat_index_m(idx: &[usize], m: usize) -> usize {
    let mut off = 0usize;
    for &i in idx.iter().rev() {
        off = off * m + i;
    }
    off
}

/// Cross-correlation of two grid functions via zero-padded FFT.
pub fn correlate(f0: &GridFunction, f1: &GridFunction) -> Result<CorrelationField> {
    if !f0.same_shape(f1) {
        return Err(LabError::shape("correlate operands"));
    }
    if !fft_budget_ok(f0.d, f0.n) {
        return Err(LabError::FftBudget { d: f0.d, n: f0.n });
    }
    let m = 2 * f0.n;
    let sa = padded_spectrum(f0)?;
    let sb = padded_spectrum(f1)?;
    let spec: Vec<Complex64> = sa.iter().zip(sb.iter()).map(|(a, b)| a * b.conj()).collect();
    let raw = dft_inverse_real(spec, f0.d, m)?;
    let hd = f0.h().powi(f0.d as i32);
    let values = raw.iter().map(|v| v * hd).collect();
    Ok(CorrelationField { d: f0.d, n: f0.n, m, values })
}

/// Direct-summation reference correlation (no FFT); O(n^{2d}).
pub fn correlate_brute(f0: &GridFunction, f1: &GridFunction) -> Result<CorrelationField> {
    if !f0.same_shape(f1) {
        return Err(LabError::shape("correlate operands"));
    }
    if f0.n > 24 {
        return Err(LabError::param("brute correlation restricted to n <= 24"));
    }
    let d = f0.d;
    let n = f0.n;
    let m = 2 * n;
    let hd = f0.h().powi(d as i32);
    let mut values = vec![0.0f64; m.pow(d as u32)];
    let mut shift = vec![0isize; d];
    for flat in 0..values.len() {
        let midx = unflatten(flat, d, m);
        for (a, &i) in midx.iter().enumerate() {
            let s = i as isize;
            shift[a] = if s >= n as isize { s - m as isize } else { s };
        }
        let mut acc = 0.0;
        for_each_index(d, n, |x| {
            let mut ok = true;
            let mut src = 0usize;
            let mut stride = 1usize;
            for a in 0..d {
                let j = x[a] as isize - shift[a];
                if j < 0 || j >= n as isize {
                    ok = false;
                    break;
                }
                src += j as usize * stride;
                stride *= n;
            }
            if ok {
                acc += f0.values[flat_index(x, n)] * f1.values[src];
            }
        });
        values[flat] = acc * hd;
    }
    Ok(CorrelationField { d, n, m, values })
}
