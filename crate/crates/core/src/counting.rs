//! Configuration-counting operators: distance counts, simplex counts
//! (rotation-average and iterated-sphere forms), rectangle counts on
//! product grids, products of simplices, and the relative weights that
//! normalize counting against a background set.
//!
//! Two evaluation conventions coexist, chosen per method:
//!
//! * `fft` and `brute` average the correlation field with multilinear
//!   interpolation in the shift. The two must agree to 1e-10; they differ
//!   only in how the field is computed (FFT vs direct sums).
//! * `quadrature`, `rotation`, `iterated` and the product operator
//!   evaluate the piecewise-constant extension of the data exactly at
//!   shifted cell centers. A shift then acts as an integer translation of
//!   the data array, so pointwise identities (tensor factorization,
//!   indicator powers) survive discretization to machine precision.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::grid::{correlate, correlate_brute, dft_forward, dft_inverse_real, tensor, CorrelationField, GridFunction};
use crate::measures::{haar_rotations, sphere_quadrature, intersection_sphere, Quadrature, SimplexSpec};
use crate::util::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMethod {
    Fft,
    Quadrature,
    Brute,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimplexMethod {
    Rotation,
    Iterated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RectangleMethod {
    Fft,
    Quadrature,
    Brute,
}

/// Outcome of a counting operator.
#[derive(Clone, Debug, Serialize)]
pub struct CountResult {
    pub value: f64,
    /// Statistical spread plus discretization probes, combined additively.
    pub error_estimate: f64,
    pub method: String,
    pub nodes: usize,
    pub rotations: usize,
}

impl CountResult {
    fn new(value: f64, error_estimate: f64, method: &str, nodes: usize, rotations: usize) -> Self {
        CountResult {
            value,
            error_estimate: error_estimate.max(0.0),
            method: method.to_string(),
            nodes,
            rotations,
        }
    }
}

/// Integer data offset realizing a piecewise-constant gather: evaluating
/// `f(z_c - s)` at every cell center is the lookup `f[c + o]` with
/// `o_a = floor(1/2 - s_a n)`.
pub(crate) fn pwc_offsets(shift: &[f64], n: usize) -> Vec<isize> {
    shift.iter().map(|s| (0.5 - s * n as f64).floor() as isize).collect()
}

/// `h^d sum_c prod_s f_s[c + o_s]` over the cells where every lookup is
/// in range (the extension is zero elsewhere).
pub(crate) fn product_integral_raw(d: usize, n: usize, slots: &[(&[f64], &[isize])]) -> f64 {
    let ni = n as isize;
    let mut lo = vec![0isize; d];
    let mut hi = vec![ni - 1; d];
    for (_, off) in slots {
        for a in 0..d {
            lo[a] = lo[a].max(-off[a]);
            hi[a] = hi[a].min(ni - 1 - off[a]);
        }
    }
    if (0..d).any(|a| lo[a] > hi[a]) {
        return 0.0;
    }
    let mut strides = vec![1isize; d];
    for a in 1..d {
        strides[a] = strides[a - 1] * ni;
    }
    let run = (hi[0] - lo[0] + 1) as usize;
    let mut idx = lo.clone();
    let mut sum = 0.0f64;
    'outer: loop {
        let bases: Vec<isize> = slots
            .iter()
            .map(|(_, off)| (0..d).map(|a| (idx[a] + off[a]) * strides[a]).sum())
            .collect();
        for r in 0..run as isize {
            let mut p = 1.0;
            for (s, (vals, _)) in slots.iter().enumerate() {
                p *= vals[(bases[s] + r) as usize];
                if p == 0.0 {
                    break;
                }
            }
            sum += p;
        }
        let mut a = 1;
        loop {
            if a >= d {
                break 'outer;
            }
            idx[a] += 1;
            if idx[a] <= hi[a] {
                break;
            }
            idx[a] = lo[a];
            a += 1;
        }
    }
    sum * (1.0 / n as f64).powi(d as i32)
}

fn product_integral(fs: &[&GridFunction], offsets: &[Vec<isize>]) -> f64 {
    let slots: Vec<(&[f64], &[isize])> =
        fs.iter().zip(offsets.iter()).map(|(f, o)| (f.values(), o.as_slice())).collect();
    product_integral_raw(fs[0].d(), fs[0].n(), &slots)
}

/// Multilinear corner decomposition of a real lattice shift: pairs of
/// integer shifts (in cells) and convex weights.
fn corner_weights(z: &[f64], n: usize) -> Vec<(Vec<isize>, f64)> {
    let d = z.len();
    let mut base = vec![0isize; d];
    let mut frac = vec![0.0f64; d];
    for a in 0..d {
        let zc = z[a] * n as f64;
        let fl = zc.floor();
        base[a] = fl as isize;
        frac[a] = zc - fl;
    }
    let mut out = Vec::with_capacity(1 << d);
    for c in 0..(1usize << d) {
        let mut w = 1.0;
        let mut s = vec![0isize; d];
        for a in 0..d {
            let bit = (c >> a) & 1;
            w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
            s[a] = base[a] + bit as isize;
        }
        if w != 0.0 {
            out.push((s, w));
        }
    }
    out
}

fn check_resolvable(scale: f64, h: f64, what: &str) -> Result<()> {
    if scale < 2.0 * h {
        return Err(LabError::Unresolvable {
            context: format!("{what} = {scale:.6} below the resolution floor 2h = {:.6}", 2.0 * h),
        });
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(LabError::param(format!("lambda = {lambda} outside (0, 1]")));
    }
    Ok(())
}

/// `T(f0, f1)(lambda) = Int Int f0(x) f1(x - lambda x1) dsigma(x1) dx`.
pub fn count_distance(
    f0: &GridFunction,
    f1: &GridFunction,
    lambda: f64,
    method: DistanceMethod,
    budget: usize,
    seed: u64,
) -> Result<CountResult> {
    if !f0.same_shape(f1) {
        return Err(LabError::shape("distance count needs matching grids"));
    }
    check_lambda(lambda)?;
    check_resolvable(lambda, f0.h(), "lambda")?;
    distance_inner(f0, f1, lambda, method, budget, seed, true)
}

fn distance_inner(
    f0: &GridFunction,
    f1: &GridFunction,
    lambda: f64,
    method: DistanceMethod,
    budget: usize,
    seed: u64,
    with_error: bool,
) -> Result<CountResult> {
    let d = f0.d();
    let q = sphere_quadrature(d, lambda, &vec![0.0; d], budget, derive_seed(seed, 1))?;
    let (value, label) = match method {
        DistanceMethod::Fft => {
            let c = correlate(f0, f1)?;
            (q.integrate(|u| c.value_at(u)), "fft")
        }
        DistanceMethod::Brute => {
            if f0.n() > 24 {
                return Err(LabError::param("brute method limited to n <= 24"));
            }
            let c = correlate_brute(f0, f1)?;
            (q.integrate(|u| c.value_at(u)), "brute")
        }
        DistanceMethod::Quadrature => {
            let v = q.integrate(|u| {
                let off = pwc_offsets(u, f0.n());
                product_integral(&[f0, f1], &[vec![0; d], off])
            });
            (v, "quadrature")
        }
    };
    let mut err = 0.0;
    if with_error {
        // Node-set convergence probe: rerun at half budget.
        if budget >= 8 {
            let half = distance_inner(f0, f1, lambda, method, budget / 2, seed, false)?;
            err += (value - half.value).abs();
        }
        if matches!(method, DistanceMethod::Fft | DistanceMethod::Brute) {
            // Interpolation error surfaced as h * mean gradient of the field.
            let c = correlate(f0, f1)?;
            err += f0.h() * q.integrate(|u| c.gradient_norm_at(u));
        } else {
            // Piecewise-constant vs interpolated gather, probed on a few nodes.
            let probes = q.len().min(4);
            let mut diff = 0.0;
            for i in 0..probes {
                let u = q.node(i);
                let off = pwc_offsets(u, f0.n());
                let pwc = product_integral(&[f0, f1], &[vec![0; d], off]);
                let interp = f0.inner(&f1.shifted(u)?)?;
                diff += (pwc - interp).abs();
            }
            err += diff / probes.max(1) as f64;
        }
    }
    Ok(CountResult::new(value, err, label, q.len(), 0))
}

/// `T_Dk(f_0..f_k)(lambda)`: the simplex count, either as a Haar-rotation
/// average (`budget` rotations) or as the iterated intersection-sphere
/// integral (`budget` total nodes split evenly across levels).
///
/// Rotations draw from `derive_seed(seed, 1)`, so matched seeds give
/// matched rotation streams across operators.
pub fn count_simplex(
    fs: &[GridFunction],
    simplex: &SimplexSpec,
    lambda: f64,
    method: SimplexMethod,
    budget: usize,
    seed: u64,
) -> Result<CountResult> {
    let k = simplex.k();
    if fs.len() != k + 1 {
        return Err(LabError::shape(format!("simplex count needs {} slots, got {}", k + 1, fs.len())));
    }
    if fs.iter().skip(1).any(|f| !f.same_shape(&fs[0])) {
        return Err(LabError::shape("simplex slots on mismatched grids"));
    }
    let d = fs[0].d();
    let n = fs[0].n();
    if d < k + 1 {
        return Err(LabError::param(format!("simplex count needs d >= k+1 = {}", k + 1)));
    }
    check_lambda(lambda)?;
    check_resolvable(lambda * simplex.max_vertex_norm(), fs[0].h(), "lambda * max|v_i|")?;
    let refs: Vec<&GridFunction> = fs.iter().collect();
    match method {
        SimplexMethod::Rotation => {
            let m = budget.max(4);
            let rots = haar_rotations(d, m, derive_seed(seed, 1))?;
            let emb = simplex.embed(d)?;
            let mut samples = Vec::with_capacity(m);
            for rot in &rots {
                let mut offsets = vec![vec![0isize; d]];
                for v in &emb {
                    let shift: Vec<f64> = rot.apply(v).iter().map(|s| lambda * s).collect();
                    offsets.push(pwc_offsets(&shift, n));
                }
                samples.push(product_integral(&refs, &offsets));
            }
            let value = samples.iter().sum::<f64>() / m as f64;
            let var = samples.iter().map(|s| (s - value).powi(2)).sum::<f64>() / m as f64;
            let err = (var / m as f64).sqrt();
            Ok(CountResult::new(value, err, "rotation", 0, m))
        }
        SimplexMethod::Iterated => {
            let per_level = ((budget.max(8) as f64).powf(1.0 / k as f64).round() as usize).max(6);
            let mut chain = IteratedChain {
                fs: &refs,
                simplex,
                lambda,
                d,
                n,
                per_level,
                seed,
                quad_counter: 0,
            };
            let base = fs[0].values().to_vec();
            let top = intersection_sphere(d, &[], simplex, 1)?;
            let q = top.quadrature(per_level, chain.next_seed())?;
            let mut value = 0.0;
            let mut tops = Vec::with_capacity(q.len());
            for i in 0..q.len() {
                let x1 = q.node(i).to_vec();
                let sub = chain.descend(&base, &[x1])?;
                tops.push(sub);
                value += q.weight(i) * sub;
            }
            let var: f64 = (0..q.len()).map(|i| q.weight(i) * (tops[i] - value).powi(2)).sum();
            let err = (var / q.len() as f64).sqrt();
            Ok(CountResult::new(value, err, "iterated", chain.nodes_used(), 0))
        }
    }
}

struct IteratedChain<'a> {
    fs: &'a [&'a GridFunction],
    simplex: &'a SimplexSpec,
    lambda: f64,
    d: usize,
    n: usize,
    per_level: usize,
    seed: u64,
    quad_counter: u64,
}

impl IteratedChain<'_> {
    fn next_seed(&mut self) -> u64 {
        self.quad_counter += 1;
        derive_seed(self.seed, 0x100 + self.quad_counter)
    }

    fn nodes_used(&self) -> usize {
        self.per_level.pow(self.simplex.k() as u32)
    }

    /// Value of the subtree below the given anchors, conditioned on them:
    /// multiplies in the gather for the newest anchor, then either recurses
    /// over the next sphere or closes the integral.
    fn descend(&mut self, partial: &[f64], anchors: &[Vec<f64>]) -> Result<f64> {
        let j = anchors.len();
        let k = self.simplex.k();
        let newest = &anchors[j - 1];
        let shift: Vec<f64> = newest.iter().map(|s| self.lambda * s).collect();
        let off = pwc_offsets(&shift, self.n);
        if j == k {
            let zero = vec![0isize; self.d];
            let slots = [(partial, &zero[..]), (self.fs[j].values(), &off[..])];
            return Ok(product_integral_raw(self.d, self.n, &slots));
        }
        let merged = multiply_shifted(partial, self.fs[j], &off);
        let sphere = intersection_sphere(self.d, anchors, self.simplex, j + 1)?;
        let q = sphere.quadrature(self.per_level, self.next_seed())?;
        let mut acc = 0.0;
        let mut next_anchors = anchors.to_vec();
        for i in 0..q.len() {
            next_anchors.push(q.node(i).to_vec());
            acc += q.weight(i) * self.descend(&merged, &next_anchors)?;
            next_anchors.pop();
        }
        Ok(acc)
    }
}

/// Entrywise product `base[c] * f[c + off]` with zero extension.
pub(crate) fn multiply_shifted(base: &[f64], f: &GridFunction, off: &[isize]) -> Vec<f64> {
    let d = f.d();
    let ni = f.n() as isize;
    let mut out = vec![0.0; base.len()];
    let mut lo = vec![0isize; d];
    let mut hi = vec![ni - 1; d];
    for a in 0..d {
        lo[a] = lo[a].max(-off[a]);
        hi[a] = hi[a].min(ni - 1 - off[a]);
    }
    if (0..d).any(|a| lo[a] > hi[a]) {
        return out;
    }
    let mut strides = vec![1isize; d];
    for a in 1..d {
        strides[a] = strides[a - 1] * ni;
    }
    let mut idx = lo.clone();
    let run = (hi[0] - lo[0] + 1) as isize;
    'outer: loop {
        let base_flat: isize = (0..d).map(|a| idx[a] * strides[a]).sum();
        let shift_flat: isize = (0..d).map(|a| (idx[a] + off[a]) * strides[a]).sum();
        for r in 0..run {
            let c = (base_flat + r) as usize;
            out[c] = base[c] * f.values()[(shift_flat + r) as usize];
        }
        let mut a = 1;
        loop {
            if a >= d {
                break 'outer;
            }
            idx[a] += 1;
            if idx[a] <= hi[a] {
                break;
            }
            idx[a] = lo[a];
            a += 1;
        }
    }
    out
}

/// `T_box_c(f00, f10, f01, f11)(lambda)` on the product grid
/// `[0,1]^{d1} x [0,1]^{d2}` (`d1 = split`): slot `f10` is shifted by
/// `lambda x1` in the first factor, `f01` by `c lambda y1` in the second,
/// `f11` by both. Sphere nodes draw from `derive_seed(seed, 1)` (first
/// factor) and `derive_seed(seed, 2)` (second).
pub fn count_rectangle(
    f00: &GridFunction,
    f10: &GridFunction,
    f01: &GridFunction,
    f11: &GridFunction,
    lambda: f64,
    aspect: f64,
    split: usize,
    method: RectangleMethod,
    budget: usize,
    seed: u64,
) -> Result<CountResult> {
    let fs = [f00, f10, f01, f11];
    if fs.iter().skip(1).any(|f| !f.same_shape(f00)) {
        return Err(LabError::shape("rectangle slots on mismatched grids"));
    }
    let d = f00.d();
    if split < 2 || d < split + 2 {
        return Err(LabError::param("rectangle count needs a product grid with d1, d2 >= 2"));
    }
    check_lambda(lambda)?;
    if !(aspect > 0.0 && aspect <= 1.0) {
        return Err(LabError::param(format!("aspect = {aspect} outside (0, 1]")));
    }
    check_resolvable(lambda, f00.h(), "lambda")?;
    check_resolvable(aspect * lambda, f00.h(), "c * lambda")?;
    rectangle_inner(&fs, lambda, aspect, split, method, budget, seed, true)
}

#[allow(clippy::too_many_arguments)]
fn rectangle_inner(
    fs: &[&GridFunction; 4],
    lambda: f64,
    aspect: f64,
    split: usize,
    method: RectangleMethod,
    budget: usize,
    seed: u64,
    with_error: bool,
) -> Result<CountResult> {
    let d = fs[0].d();
    let n = fs[0].n();
    let d1 = split;
    let d2 = d - d1;
    let qx = sphere_quadrature(d1, lambda, &vec![0.0; d1], budget, derive_seed(seed, 1))?;
    let qy = sphere_quadrature(d2, aspect * lambda, &vec![0.0; d2], budget, derive_seed(seed, 2))?;
    let value = match method {
        RectangleMethod::Quadrature => {
            // Dedupe integer offsets on both factors; sums stay deterministic
            // through the ordered maps.
            let mut wx: BTreeMap<Vec<isize>, f64> = BTreeMap::new();
            for i in 0..qx.len() {
                *wx.entry(pwc_offsets(qx.node(i), n)).or_insert(0.0) += qx.weight(i);
            }
            let mut wy: BTreeMap<Vec<isize>, f64> = BTreeMap::new();
            for j in 0..qy.len() {
                *wy.entry(pwc_offsets(qy.node(j), n)).or_insert(0.0) += qy.weight(j);
            }
            let zero = vec![0isize; d];
            let mut acc = 0.0;
            for (ox, wxv) in &wx {
                let full_ox = embed_offset(ox, d1, d, false);
                let a = two_slot_product(fs[0], fs[1], &full_ox);
                let g = two_slot_product(fs[2], fs[3], &full_ox);
                for (oy, wyv) in &wy {
                    let full_oy = embed_offset(oy, d1, d, true);
                    let slots = [(a.as_slice(), &zero[..]), (g.as_slice(), &full_oy[..])];
                    acc += wxv * wyv * product_integral_raw(d, n, &slots);
                }
            }
            acc
        }
        RectangleMethod::Fft => {
            let wx = corner_map(&qx, n);
            let mut acc = 0.0;
            for (kx, wxv) in &wx {
                let full_kx = embed_offset(kx, d1, d, false);
                let a = two_slot_product(fs[0], fs[1], &full_kx);
                let g = two_slot_product(fs[2], fs[3], &full_kx);
                let field = partial_correlate(&a, &g, d, n, d1)?;
                acc += wxv * qy.integrate(|u| field.value_at(u));
            }
            acc
        }
        RectangleMethod::Brute => {
            let wx = corner_map(&qx, n);
            let wy = corner_map(&qy, n);
            let cells = n.pow(d as u32) as f64;
            let pairs = (wx.len() * wy.len()) as f64;
            if pairs * cells > 2.0e8 {
                return Err(LabError::param("brute rectangle too large for direct summation"));
            }
            let mut acc = 0.0;
            for (kx, wxv) in &wx {
                let full_kx = embed_offset(kx, d1, d, false);
                for (ky, wyv) in &wy {
                    let full_ky = embed_offset(ky, d1, d, true);
                    let both: Vec<isize> = full_kx.iter().zip(full_ky.iter()).map(|(a, b)| a + b).collect();
                    let zero = vec![0isize; d];
                    let slots = [
                        (fs[0].values(), &zero[..]),
                        (fs[1].values(), &full_kx[..]),
                        (fs[2].values(), &full_ky[..]),
                        (fs[3].values(), &both[..]),
                    ];
                    acc += wxv * wyv * product_integral_raw(d, n, &slots);
                }
            }
            acc
        }
    };
    let label = match method {
        RectangleMethod::Fft => "fft",
        RectangleMethod::Quadrature => "quadrature",
        RectangleMethod::Brute => "brute",
    };
    let mut err = 0.0;
    if with_error && budget >= 8 {
        let half = rectangle_inner(fs, lambda, aspect, split, method, budget / 2, seed, false)?;
        err = (value - half.value).abs();
    }
    Ok(CountResult::new(value, err, label, qx.len() + qy.len(), 0))
}

/// Integer-shift weights from the multilinear corner decomposition of
/// every quadrature node (deduped, deterministic order).
fn corner_map(q: &Quadrature, n: usize) -> BTreeMap<Vec<isize>, f64> {
    let mut map: BTreeMap<Vec<isize>, f64> = BTreeMap::new();
    for i in 0..q.len() {
        for (s, w) in corner_weights(q.node(i), n) {
            *map.entry(s).or_insert(0.0) += w * q.weight(i);
        }
    }
    map
}

/// Lifts a factor offset to the product grid: x-factor offsets occupy the
/// first `d1` axes, y-factor offsets the rest.
pub(crate) fn embed_offset(off: &[isize], d1: usize, d: usize, second_factor: bool) -> Vec<isize> {
    let mut full = vec![0isize; d];
    if second_factor {
        full[d1..d1 + off.len()].copy_from_slice(off);
    } else {
        full[..off.len()].copy_from_slice(off);
    }
    full
}

/// `out[c] = a[c] * b[c + off]` with zero extension (the unshifted slot
/// times its partner shifted on the first factor).
fn two_slot_product(a: &GridFunction, b: &GridFunction, off: &[isize]) -> Vec<f64> {
    multiply_shifted(a.values(), b, off)
}

/// Correlation over the trailing `d - d1` axes only, summed over the
/// leading axes: `C(s) = h^d sum_{x,y} a(x,y) g(x, y - s)`.
fn partial_correlate(a: &[f64], g: &[f64], d: usize, n: usize, d1: usize) -> Result<CorrelationField> {
    let d2 = d - d1;
    let m = 2 * n;
    let nx = n.pow(d1 as u32);
    let ny = n.pow(d2 as u32);
    let my = m.pow(d2 as u32);
    // Map a y-index (base n digits) into the zero-padded cube (base m).
    let mut pad_map = vec![0usize; ny];
    for (yflat, slot) in pad_map.iter_mut().enumerate() {
        let mut rest = yflat;
        let mut padded = 0usize;
        let mut stride = 1usize;
        for _ in 0..d2 {
            padded += (rest % n) * stride;
            rest /= n;
            stride *= m;
        }
        *slot = padded;
    }
    let mut spec_acc = vec![num_complex::Complex64::new(0.0, 0.0); my];
    let mut buf_a = vec![0.0f64; my];
    let mut buf_g = vec![0.0f64; my];
    for x in 0..nx {
        buf_a.iter_mut().for_each(|v| *v = 0.0);
        buf_g.iter_mut().for_each(|v| *v = 0.0);
        for y in 0..ny {
            let src = x + nx * y;
            buf_a[pad_map[y]] = a[src];
            buf_g[pad_map[y]] = g[src];
        }
        let fa = dft_forward(&buf_a, d2, m)?;
        let fg = dft_forward(&buf_g, d2, m)?;
        for ((acc, za), zg) in spec_acc.iter_mut().zip(fa.iter()).zip(fg.iter()) {
            *acc += za * zg.conj();
        }
    }
    let vals = dft_inverse_real(spec_acc, d2, m)?;
    let hd = (1.0 / n as f64).powi(d as i32);
    Ok(CorrelationField::from_raw(d2, n, vals.into_iter().map(|v| v * hd).collect()))
}

/// `T_{Dk1, Dk2}`: double rotation average of the `(k1+1)(k2+1)`-fold
/// product on the product grid; slot `(i, j)` (row-major, `i` indexing the
/// first simplex) is shifted by `lambda R1 v_i` on the first factor and
/// `lambda R2 w_j` on the second. Rotation streams match `count_simplex`
/// run with seeds `derive_seed(seed, 1)` and `derive_seed(seed, 2)`.
pub fn count_product_simplices(
    fs: &[GridFunction],
    s1: &SimplexSpec,
    s2: &SimplexSpec,
    lambda: f64,
    split: usize,
    budget: usize,
    seed: u64,
) -> Result<CountResult> {
    let k1 = s1.k();
    let k2 = s2.k();
    let slots = (k1 + 1) * (k2 + 1);
    if fs.len() != slots {
        return Err(LabError::shape(format!("product count needs {slots} slots, got {}", fs.len())));
    }
    if fs.iter().skip(1).any(|f| !f.same_shape(&fs[0])) {
        return Err(LabError::shape("product slots on mismatched grids"));
    }
    let d = fs[0].d();
    let n = fs[0].n();
    let d1 = split;
    if d1 < k1 + 1 || d < d1 || d - d1 < k2 + 1 {
        return Err(LabError::param("product count needs d1 >= k1+1 and d2 >= k2+1"));
    }
    let d2 = d - d1;
    check_lambda(lambda)?;
    check_resolvable(lambda * s1.max_vertex_norm(), fs[0].h(), "lambda * max|v1_i|")?;
    check_resolvable(lambda * s2.max_vertex_norm(), fs[0].h(), "lambda * max|v2_j|")?;
    let m = budget.max(2);
    let rots1 = haar_rotations(d1, m, derive_seed(derive_seed(seed, 1), 1))?;
    let rots2 = haar_rotations(d2, m, derive_seed(derive_seed(seed, 2), 1))?;
    let emb1 = s1.embed(d1)?;
    let emb2 = s2.embed(d2)?;
    let refs: Vec<&GridFunction> = fs.iter().collect();
    let mut samples = Vec::with_capacity(m * m);
    for r1 in &rots1 {
        let mut x_off = vec![vec![0isize; d1]];
        for v in &emb1 {
            let shift: Vec<f64> = r1.apply(v).iter().map(|s| lambda * s).collect();
            x_off.push(pwc_offsets(&shift, n));
        }
        for r2 in &rots2 {
            let mut y_off = vec![vec![0isize; d2]];
            for w in &emb2 {
                let shift: Vec<f64> = r2.apply(w).iter().map(|s| lambda * s).collect();
                y_off.push(pwc_offsets(&shift, n));
            }
            let mut offsets = Vec::with_capacity(slots);
            for xo in x_off.iter() {
                for yo in y_off.iter() {
                    let mut full = embed_offset(xo, d1, d, false);
                    full[d1..].copy_from_slice(yo);
                    offsets.push(full);
                }
            }
            samples.push(product_integral(&refs, &offsets));
        }
    }
    let value = samples.iter().sum::<f64>() / samples.len() as f64;
    let var = samples.iter().map(|s| (s - value).powi(2)).sum::<f64>() / samples.len() as f64;
    // Pairs share rotations, so only m of them are truly independent.
    let err = (var / m as f64).sqrt();
    Ok(CountResult::new(value, err, "product-rotation", 0, m * m))
}

/// Normalized weights relative to a product background `B1 x B2`.
#[derive(Clone, Debug)]
pub struct RelativeWeights {
    pub nu1: GridFunction,
    pub nu2: GridFunction,
    /// `nu1^{1/2} (x) nu2^{1/2}` on the product grid.
    pub nu: GridFunction,
    /// `nu1^{1/(k2+1)} (x) nu2^{1/(k1+1)}` on the product grid.
    pub nu_tilde: GridFunction,
    pub beta1: f64,
    pub beta2: f64,
}

pub fn make_relative_weights(
    b1: &GridFunction,
    b2: &GridFunction,
    k1: usize,
    k2: usize,
) -> Result<RelativeWeights> {
    if k1 == 0 || k2 == 0 {
        return Err(LabError::param("relative weights need k1, k2 >= 1"));
    }
    if b1.n() != b2.n() {
        return Err(LabError::shape("background factors need a common resolution"));
    }
    let beta1 = b1.density();
    let beta2 = b2.density();
    if beta1 <= 0.0 || beta2 <= 0.0 {
        return Err(LabError::BadSetSpec { context: "empty background factor".into() });
    }
    let nu1 = b1.map(|v| v / beta1);
    let nu2 = b2.map(|v| v / beta2);
    let nu = tensor(&nu1.map(|v| v.sqrt()), &nu2.map(|v| v.sqrt()))?;
    let e1 = 1.0 / (k2 as f64 + 1.0);
    let e2 = 1.0 / (k1 as f64 + 1.0);
    let nu_tilde = tensor(&nu1.map(|v| v.powf(e1)), &nu2.map(|v| v.powf(e2)))?;
    Ok(RelativeWeights { nu1, nu2, nu, nu_tilde, beta1, beta2 })
}

/// Operator kind for a packaged counting request.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CountKind {
    Distance,
    Simplex,
    Rectangle,
    ProductSimplex,
}

/// A fully specified counting job; the CLI builds these from configs.
#[derive(Clone, Debug)]
pub struct CountRequest {
    pub kind: CountKind,
    pub functions: Vec<GridFunction>,
    pub lambda: f64,
    pub aspect: f64,
    pub split: usize,
    pub simplex: Option<SimplexSpec>,
    pub simplex2: Option<SimplexSpec>,
    pub method: String,
    pub budget: usize,
    pub seed: u64,
}

impl CountRequest {
    pub fn run(&self) -> Result<CountResult> {
        match self.kind {
            CountKind::Distance => {
                if self.functions.len() != 2 {
                    return Err(LabError::shape("distance request needs 2 slots"));
                }
                let method = match self.method.as_str() {
                    "fft" => DistanceMethod::Fft,
                    "quadrature" => DistanceMethod::Quadrature,
                    "brute" => DistanceMethod::Brute,
                    other => return Err(LabError::param(format!("unknown distance method '{other}'"))),
                };
                count_distance(&self.functions[0], &self.functions[1], self.lambda, method, self.budget, self.seed)
            }
            CountKind::Simplex => {
                let simplex = self.simplex.as_ref().ok_or_else(|| LabError::param("simplex request needs a simplex"))?;
                let method = match self.method.as_str() {
                    "rotation" => SimplexMethod::Rotation,
                    "iterated" => SimplexMethod::Iterated,
                    other => return Err(LabError::param(format!("unknown simplex method '{other}'"))),
                };
                count_simplex(&self.functions, simplex, self.lambda, method, self.budget, self.seed)
            }
            CountKind::Rectangle => {
                if self.functions.len() != 4 {
                    return Err(LabError::shape("rectangle request needs 4 slots"));
                }
                let method = match self.method.as_str() {
                    "fft" => RectangleMethod::Fft,
                    "quadrature" => RectangleMethod::Quadrature,
                    "brute" => RectangleMethod::Brute,
                    other => return Err(LabError::param(format!("unknown rectangle method '{other}'"))),
                };
                count_rectangle(
                    &self.functions[0],
                    &self.functions[1],
                    &self.functions[2],
                    &self.functions[3],
                    self.lambda,
                    self.aspect,
                    self.split,
                    method,
                    self.budget,
                    self.seed,
                )
            }
            CountKind::ProductSimplex => {
                let s1 = self.simplex.as_ref().ok_or_else(|| LabError::param("product request needs two simplices"))?;
                let s2 = self.simplex2.as_ref().ok_or_else(|| LabError::param("product request needs two simplices"))?;
                count_product_simplices(&self.functions, s1, s2, self.lambda, self.split, self.budget, self.seed)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_grid_function, SetSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn full(d: usize, n: usize) -> GridFunction {
        GridFunction::constant(d, n, 1.0).unwrap()
    }

    fn random_set(d: usize, n: usize, cellsize: f64, seed: u64) -> GridFunction {
        make_grid_function(
            &SetSpec::Random { dim: d, p: 0.5, cellsize, seed },
            d,
            n,
        )
        .unwrap()
    }

    #[test]
    fn distance_full_cube_closed_form() {
        let f = full(2, 64);
        let lambda = 0.1;
        let r = count_distance(&f, &f, lambda, DistanceMethod::Fft, 4096, 7).unwrap();
        let want = 1.0 - 4.0 * lambda / std::f64::consts::PI
            + lambda * lambda / std::f64::consts::PI;
        assert!((r.value - want).abs() < 1e-4, "value {} vs {want}", r.value);
    }

    #[test]
    fn distance_zero_slot() {
        let f = full(2, 32);
        let z = GridFunction::constant(2, 32, 0.0).unwrap();
        for method in [DistanceMethod::Fft, DistanceMethod::Quadrature] {
            let r = count_distance(&z, &f, 0.3, method, 64, 1).unwrap();
            assert_eq!(r.value, 0.0);
        }
    }

    #[test]
    fn distance_fft_matches_brute() {
        let ball = make_grid_function(
            &SetSpec::Ball { center: vec![0.5, 0.5], radius: 0.25 },
            2,
            24,
        )
        .unwrap();
        for seed in 0..10 {
            let fft = count_distance(&ball, &ball, 0.3, DistanceMethod::Fft, 128, seed).unwrap();
            let brute = count_distance(&ball, &ball, 0.3, DistanceMethod::Brute, 128, seed).unwrap();
            assert!(fft.value > 1e-3, "seed {seed}: degenerate case {}", fft.value);
            let tol = 1e-10 * fft.value.abs().max(1.0);
            assert!(
                (fft.value - brute.value).abs() < tol,
                "seed {seed}: {} vs {}",
                fft.value,
                brute.value
            );
        }
    }

    #[test]
    fn distance_symmetry() {
        let a = random_set(2, 32, 1.0 / 8.0, 5);
        let b = make_grid_function(&SetSpec::Ball { center: vec![0.4, 0.6], radius: 0.3 }, 2, 32).unwrap();
        let ab = count_distance(&a, &b, 0.4, DistanceMethod::Fft, 256, 3).unwrap();
        let ba = count_distance(&b, &a, 0.4, DistanceMethod::Fft, 256, 3).unwrap();
        assert!((ab.value - ba.value).abs() < 1e-12, "{} vs {}", ab.value, ba.value);
    }

    #[test]
    fn distance_multilinear_in_slots() {
        let n = 32;
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let f0 = GridFunction::from_fn(2, n, |_| rng.gen::<f64>()).unwrap();
        let a = GridFunction::from_fn(2, n, |_| rng.gen::<f64>()).unwrap();
        let b = GridFunction::from_fn(2, n, |_| rng.gen::<f64>()).unwrap();
        let sum = GridFunction::from_fn(2, n, |idx| a.get(idx) + b.get(idx)).unwrap();
        let t_sum = count_distance(&f0, &sum, 0.3, DistanceMethod::Fft, 128, 2).unwrap();
        let t_a = count_distance(&f0, &a, 0.3, DistanceMethod::Fft, 128, 2).unwrap();
        let t_b = count_distance(&f0, &b, 0.3, DistanceMethod::Fft, 128, 2).unwrap();
        assert!((t_sum.value - t_a.value - t_b.value).abs() < 1e-11);
    }

    #[test]
    fn distance_translation_invariance() {
        let n = 32;
        let ball = make_grid_function(&SetSpec::Ball { center: vec![0.5, 0.5], radius: 0.15 }, 2, n).unwrap();
        let shifted = GridFunction::from_fn(2, n, |idx| {
            if idx[0] >= 3 {
                ball.get(&[idx[0] - 3, idx[1]])
            } else {
                0.0
            }
        })
        .unwrap();
        let t0 = count_distance(&ball, &ball, 0.3, DistanceMethod::Quadrature, 64, 9).unwrap();
        let t1 = count_distance(&shifted, &shifted, 0.3, DistanceMethod::Quadrature, 64, 9).unwrap();
        assert!((t0.value - t1.value).abs() < 1e-12);
    }

    #[test]
    fn distance_unresolvable_scale() {
        let f = full(2, 16);
        match count_distance(&f, &f, 0.05, DistanceMethod::Fft, 64, 0) {
            Err(e) => assert!(e.is_resolution_bound(), "unexpected {e:?}"),
            Ok(_) => panic!("expected resolution error"),
        }
    }

    #[test]
    fn distance_budget_monotone_error() {
        let ball = make_grid_function(&SetSpec::Ball { center: vec![0.5, 0.5], radius: 0.25 }, 2, 32).unwrap();
        let lo = count_distance(&ball, &ball, 0.4, DistanceMethod::Fft, 256, 1).unwrap();
        let hi = count_distance(&ball, &ball, 0.4, DistanceMethod::Fft, 512, 1).unwrap();
        assert!(hi.error_estimate <= lo.error_estimate + 1e-4);
    }

    #[test]
    fn simplex_full_cube_lower_bound() {
        let f = full(3, 64);
        let simplex = SimplexSpec::equilateral(2, 1.0).unwrap();
        let fs = vec![f.clone(), f.clone(), f];
        let lambda = 0.05;
        let r = count_simplex(&fs, &simplex, lambda, SimplexMethod::Rotation, 24, 3).unwrap();
        assert!(r.value >= 1.0 - 6.0 * lambda, "value {}", r.value);
        assert!(r.value <= 1.0 + 1e-12);
    }

    #[test]
    fn simplex_zero_slot() {
        let f = full(3, 16);
        let z = GridFunction::constant(3, 16, 0.0).unwrap();
        let simplex = SimplexSpec::equilateral(2, 1.0).unwrap();
        let r = count_simplex(
            &[f.clone(), z, f],
            &simplex,
            0.4,
            SimplexMethod::Rotation,
            8,
            1,
        )
        .unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn simplex_methods_cross_check() {
        let a = random_set(3, 32, 1.0 / 8.0, 11);
        let simplex = SimplexSpec::equilateral(2, 1.0).unwrap();
        let fs = vec![a.clone(), a.clone(), a];
        let rot = count_simplex(&fs, &simplex, 0.5, SimplexMethod::Rotation, 64, 5).unwrap();
        let iter = count_simplex(&fs, &simplex, 0.5, SimplexMethod::Iterated, 1024, 5).unwrap();
        let bar = 3.0 * (rot.error_estimate + iter.error_estimate);
        assert!(
            (rot.value - iter.value).abs() <= bar.max(1e-3),
            "rotation {} vs iterated {} (bar {bar})",
            rot.value,
            iter.value
        );
    }

    #[test]
    fn simplex_dimension_guard() {
        let f = full(2, 16);
        let simplex = SimplexSpec::equilateral(2, 1.0).unwrap();
        assert!(count_simplex(
            &[f.clone(), f.clone(), f],
            &simplex,
            0.4,
            SimplexMethod::Rotation,
            4,
            0
        )
        .is_err());
    }

    #[test]
    fn rectangle_full_cube_closed_form() {
        let f = full(4, 20);
        let lambda = 0.1;
        let factor = |l: f64| 1.0 - 4.0 * l / std::f64::consts::PI + l * l / std::f64::consts::PI;
        let r = count_rectangle(&f, &f, &f, &f, lambda, 1.0, 2, RectangleMethod::Fft, 256, 2).unwrap();
        let want = factor(lambda) * factor(lambda);
        assert!((r.value - want).abs() < 1e-2, "value {} vs {want}", r.value);
        // Distinct factor scales.
        let r2 = count_rectangle(&f, &f, &f, &f, 0.2, 0.5, 2, RectangleMethod::Fft, 256, 2).unwrap();
        let want2 = factor(0.2) * factor(0.1);
        assert!((r2.value - want2).abs() < 1e-2, "value {} vs {want2}", r2.value);
    }

    #[test]
    fn rectangle_zero_slot() {
        let f = full(4, 16);
        let z = GridFunction::constant(4, 16, 0.0).unwrap();
        let r = count_rectangle(&f, &z, &f, &f, 0.3, 0.5, 2, RectangleMethod::Quadrature, 32, 1).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn rectangle_factorizes_over_product_sets() {
        let n = 32;
        let b1 = random_set(2, n, 1.0 / 8.0, 3);
        // Indicator-valued ball: round off the supersampled boundary cells so the
        // slot powers collapse exactly.
        let b2 = make_grid_function(&SetSpec::Ball { center: vec![0.5, 0.5], radius: 0.35 }, 2, n)
            .unwrap()
            .map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        let prod = tensor(&b1, &b2).unwrap();
        let lambda = 0.25;
        let c = 0.5;
        let seed = 21;
        for (rect_m, dist_m) in [
            (RectangleMethod::Quadrature, DistanceMethod::Quadrature),
            (RectangleMethod::Fft, DistanceMethod::Fft),
        ] {
            let whole =
                count_rectangle(&prod, &prod, &prod, &prod, lambda, c, 2, rect_m, 128, seed).unwrap();
            let fx = count_distance(&b1, &b1, lambda, dist_m, 128, derive_seed(seed, 1)).unwrap();
            let fy = count_distance(&b2, &b2, c * lambda, dist_m, 128, derive_seed(seed, 2)).unwrap();
            let want = fx.value * fy.value;
            assert!(
                (whole.value - want).abs() < 1e-9,
                "{rect_m:?}: {} vs {}",
                whole.value,
                want
            );
        }
    }

    #[test]
    fn rectangle_fft_matches_brute() {
        let n = 12;
        let b1 = random_set(2, n, 1.0 / 4.0, 8);
        let b2 = random_set(2, n, 1.0 / 4.0, 9);
        let prod = tensor(&b1, &b2).unwrap();
        let f = full(4, n);
        let fft =
            count_rectangle(&prod, &f, &prod, &f, 0.4, 0.6, 2, RectangleMethod::Fft, 16, 4).unwrap();
        let brute =
            count_rectangle(&prod, &f, &prod, &f, 0.4, 0.6, 2, RectangleMethod::Brute, 16, 4).unwrap();
        let denom = fft.value.abs().max(1e-12);
        assert!(
            (fft.value - brute.value).abs() / denom < 1e-10,
            "{} vs {}",
            fft.value,
            brute.value
        );
    }

    #[test]
    fn product_simplices_factorize_on_tensors() {
        let n = 32;
        let g0 = random_set(2, n, 1.0 / 8.0, 14);
        let g1 = make_grid_function(&SetSpec::Ball { center: vec![0.5, 0.5], radius: 0.4 }, 2, n)
            .unwrap()
            .map(|v| if v > 0.5 { 1.0 } else { 0.0 });
        let h0 = random_set(2, n, 1.0 / 8.0, 15);
        let h1 = make_grid_function(&SetSpec::Cube { center: vec![0.5, 0.5], halfwidth: 0.3 }, 2, n)
            .unwrap()
            .map(|v| if v > 0.5 { 1.0 } else { 0.0 });
        let s1 = SimplexSpec::new(vec![vec![1.0]]).unwrap();
        let s2 = SimplexSpec::new(vec![vec![0.8]]).unwrap();
        let lambda = 0.3;
        let seed = 33;
        let m = 12;
        // Slot (i, j) = g_i tensor h_j.
        let slots: Vec<GridFunction> = [(&g0, &h0), (&g0, &h1), (&g1, &h0), (&g1, &h1)]
            .iter()
            .map(|(g, h)| tensor(g, h).unwrap())
            .collect();
        let whole = count_product_simplices(&slots, &s1, &s2, lambda, 2, m, seed).unwrap();
        // Indicator data squares to itself, so the powered factor counts are
        // plain simplex counts with matched rotation streams.
        let left = count_simplex(
            &[g0, g1],
            &s1,
            lambda,
            SimplexMethod::Rotation,
            m,
            derive_seed(seed, 1),
        )
        .unwrap();
        let right = count_simplex(
            &[h0, h1],
            &s2,
            lambda,
            SimplexMethod::Rotation,
            m,
            derive_seed(seed, 2),
        )
        .unwrap();
        let want = left.value * right.value;
        assert!(
            (whole.value - want).abs() < 1e-10,
            "product {} vs factor product {}",
            whole.value,
            want
        );
    }

    #[test]
    fn product_simplices_match_rectangle() {
        let n = 20;
        let f = full(4, n);
        let s1 = SimplexSpec::new(vec![vec![1.0]]).unwrap();
        let s2 = SimplexSpec::new(vec![vec![0.5]]).unwrap();
        let lambda = 0.2;
        let prod =
            count_product_simplices(&vec![f.clone(); 4], &s1, &s2, lambda, 2, 8, 6).unwrap();
        let rect = count_rectangle(&f, &f, &f, &f, lambda, 0.5, 2, RectangleMethod::Quadrature, 128, 6)
            .unwrap();
        let bar = 3.0 * (prod.error_estimate + rect.error_estimate) + 5e-3;
        assert!(
            (prod.value - rect.value).abs() <= bar,
            "product {} vs rectangle {} (bar {bar})",
            prod.value,
            rect.value
        );
    }

    #[test]
    fn product_simplices_zero_slot() {
        let n = 16;
        let f = full(4, n);
        let z = GridFunction::constant(4, n, 0.0).unwrap();
        let s = SimplexSpec::new(vec![vec![1.0]]).unwrap();
        let r = count_product_simplices(
            &[f.clone(), f.clone(), z, f],
            &s,
            &s,
            0.3,
            2,
            4,
            1,
        )
        .unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn relative_weights_shapes() {
        let n = 16;
        let b_full = full(2, n);
        let w = make_relative_weights(&b_full, &b_full, 2, 2).unwrap();
        assert!((w.nu.max_abs() - 1.0).abs() < 1e-12);
        assert!((w.nu_tilde.min_value() - 1.0).abs() < 1e-12);

        let left = GridFunction::from_fn(2, n, |idx| if idx[0] < n / 2 { 1.0 } else { 0.0 }).unwrap();
        let w2 = make_relative_weights(&left, &b_full, 1, 1).unwrap();
        assert!((w2.beta1 - 0.5).abs() < 1e-12);
        assert!((w2.nu1.max_value() - 2.0).abs() < 1e-12);
        assert!((w2.nu1.density() - 1.0).abs() < 1e-12);
        // k1 = k2 = 1 makes both tensor exponents 1/2.
        for (a, b) in w2.nu.values().iter().zip(w2.nu_tilde.values().iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn relative_weights_reject_empty() {
        let n = 16;
        let empty = GridFunction::constant(2, n, 0.0).unwrap();
        let b = full(2, n);
        assert!(make_relative_weights(&empty, &b, 1, 1).is_err());
    }

    #[test]
    fn count_request_dispatch() {
        let f = full(2, 32);
        let req = CountRequest {
            kind: CountKind::Distance,
            functions: vec![f.clone(), f],
            lambda: 0.2,
            aspect: 1.0,
            split: 0,
            simplex: None,
            simplex2: None,
            method: "fft".into(),
            budget: 64,
            seed: 5,
        };
        let r = req.run().unwrap();
        assert!(r.value > 0.5);
        let bad = CountRequest { method: "nope".into(), ..req };
        assert!(bad.run().is_err());
    }
}
