//! Simplex geometry and the measures used by the counting operators:
//! sphere quadratures, iterated intersection spheres, Haar rotations and
//! the Fourier transform of the normalized sphere measure.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{LabError, Result};

/// Nondegenerate simplex given by vertices `v_1..v_k` in `R^k`
/// (the origin `v_0 = 0` is implicit).
#[derive(Clone, Debug)]
pub struct SimplexSpec {
    vertices: Vec<Vec<f64>>,
}

impl SimplexSpec {
    pub fn new(vertices: Vec<Vec<f64>>) -> Result<Self> {
        let k = vertices.len();
        if k == 0 || k > 5 {
            return Err(LabError::param("simplex needs 1..=5 vertices"));
        }
        if vertices.iter().any(|v| v.len() != k) {
            return Err(LabError::shape("simplex vertices must live in R^k"));
        }
        let spec = SimplexSpec { vertices };
        let g = spec.gram();
        let scale: f64 = spec.vertices.iter().map(|v| norm2(v)).fold(0.0, f64::max);
        if scale <= 0.0 {
            return Err(LabError::DegenerateSimplex { context: "all vertices at origin".into() });
        }
        let det = g.determinant();
        if det <= 1e-12 * scale.powi(k as i32) {
            return Err(LabError::DegenerateSimplex {
                context: format!("gram determinant {det:.3e} below tolerance"),
            });
        }
        Ok(spec)
    }

    /// Equilateral simplex with k vertices at pairwise distance `side`
    /// (and distance `side` from the origin).
    pub fn equilateral(k: usize, side: f64) -> Result<Self> {
        if k == 0 || k > 5 {
            return Err(LabError::param("simplex needs 1..=5 vertices"));
        }
        // Gram matrix with |v_i| = side, v_i.v_j = side^2/2: Cholesky gives
        // explicit coordinates.
        let s2 = side * side;
        let g = DMatrix::from_fn(k, k, |i, j| if i == j { s2 } else { s2 / 2.0 });
        let chol = g
            .cholesky()
            .ok_or_else(|| LabError::DegenerateSimplex { context: "equilateral gram".into() })?;
        let l = chol.l();
        let vertices: Vec<Vec<f64>> =
            (0..k).map(|i| (0..k).map(|j| l[(i, j)]).collect()).collect();
        SimplexSpec::new(vertices)
    }

    pub fn k(&self) -> usize {
        self.vertices.len()
    }

    pub fn vertices(&self) -> &[Vec<f64>] {
        &self.vertices
    }

    pub fn vertex(&self, j: usize) -> &[f64] {
        &self.vertices[j]
    }

    pub fn gram(&self) -> DMatrix<f64> {
        let k = self.k();
        DMatrix::from_fn(k, k, |i, j| dot(&self.vertices[i], &self.vertices[j]))
    }

    /// Largest vertex norm (controls how far counting shifts reach).
    pub fn max_vertex_norm(&self) -> f64 {
        self.vertices.iter().map(|v| norm2(v).sqrt()).fold(0.0, f64::max)
    }

    /// Degeneracy scale: the least distance from a vertex to the affine
    /// span of the others (origin included as a spanning point).
    pub fn min_height(&self) -> f64 {
        let k = self.k();
        let mut best = f64::INFINITY;
        for j in 0..k {
            let others: Vec<&[f64]> = (0..k)
                .filter(|&i| i != j)
                .map(|i| self.vertices[i].as_slice())
                .collect();
            best = best.min(dist_to_span(&self.vertices[j], &others));
        }
        best
    }

    /// Points `x_1..x_k` in `R^d` realizing the pairwise geometry
    /// (Cholesky embedding padded with zeros).
    pub fn embed(&self, d: usize) -> Result<Vec<Vec<f64>>> {
        let k = self.k();
        if d < k {
            return Err(LabError::param(format!("cannot embed a {k}-simplex in R^{d}")));
        }
        let chol = self.gram().cholesky().ok_or_else(|| LabError::DegenerateSimplex {
            context: "gram not positive definite".into(),
        })?;
        let l = chol.l();
        Ok((0..k)
            .map(|i| {
                let mut row = vec![0.0; d];
                for j in 0..k {
                    row[j] = l[(i, j)];
                }
                row
            })
            .collect())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a)
}

/// Distance from `v` to the linear span of `basis` via Gram determinants.
fn dist_to_span(v: &[f64], basis: &[&[f64]]) -> f64 {
    if basis.is_empty() {
        return norm2(v).sqrt();
    }
    let m = basis.len();
    let g_small = DMatrix::from_fn(m, m, |i, j| dot(basis[i], basis[j]));
    let mut all: Vec<&[f64]> = basis.to_vec();
    all.push(v);
    let g_big = DMatrix::from_fn(m + 1, m + 1, |i, j| dot(all[i], all[j]));
    let ds = g_small.determinant();
    if ds <= 0.0 {
        return 0.0;
    }
    (g_big.determinant() / ds).max(0.0).sqrt()
}

/// Quadrature rule: nodes with nonnegative weights summing to one.
#[derive(Clone, Debug)]
pub struct Quadrature {
    dim: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl Quadrature {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.nodes[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn integrate(&self, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
        (0..self.len()).map(|i| self.weights[i] * f(self.node(i))).sum()
    }

    /// Weighted mean and a crude standard-error estimate of the node values
    /// (meaningful for equal-weight Monte Carlo rules).
    pub fn integrate_with_error(&self, mut f: impl FnMut(&[f64]) -> f64) -> (f64, f64) {
        let m = self.len();
        let vals: Vec<f64> = (0..m).map(|i| f(self.node(i))).collect();
        let mean: f64 = (0..m).map(|i| self.weights[i] * vals[i]).sum();
        let var: f64 = (0..m).map(|i| self.weights[i] * (vals[i] - mean).powi(2)).sum();
        (mean, (var / m.max(1) as f64).sqrt())
    }
}

/// Quadrature on the sphere of the given center and radius in `R^d`.
///
/// d=1 is the two-point set, d=2 equispaced angles, d=3 a Fibonacci spiral
/// symmetrized under x/y sign flips (first moments and mixed second moments
/// vanish to machine precision), d>=4 antipodal seeded Monte Carlo.
pub fn sphere_quadrature(
    d: usize,
    radius: f64,
    center: &[f64],
    budget: usize,
    seed: u64,
) -> Result<Quadrature> {
    if d == 0 || d > 6 {
        return Err(LabError::param("sphere dimension outside 1..=6"));
    }
    if center.len() != d {
        return Err(LabError::shape("sphere center dimension"));
    }
    if radius < 0.0 {
        return Err(LabError::param("negative sphere radius"));
    }
    if budget < 2 {
        return Err(LabError::param("sphere budget below 2"));
    }
    let mut units: Vec<f64> = Vec::new();
    match d {
        1 => {
            units.extend_from_slice(&[1.0, -1.0]);
        }
        2 => {
            let m = budget.next_multiple_of(2).max(4);
            for i in 0..m {
                let theta = 2.0 * std::f64::consts::PI * (i as f64 + 0.5) / m as f64;
                units.push(theta.cos());
                units.push(theta.sin());
            }
        }
        3 => {
            let m0 = budget.div_ceil(4).max(8);
            let golden = 2.0 * std::f64::consts::PI * (1.0 - 1.0 / ((1.0 + 5.0f64.sqrt()) / 2.0));
            for i in 0..m0 {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / m0 as f64;
                let rho = (1.0 - z * z).max(0.0).sqrt();
                let phi = golden * i as f64;
                let x = rho * phi.cos();
                let y = rho * phi.sin();
                for (sx, sy) in [(1.0, 1.0), (-1.0, 1.0), (1.0, -1.0), (-1.0, -1.0)] {
                    units.push(sx * x);
                    units.push(sy * y);
                    units.push(z);
                }
            }
        }
        _ => {
            let pairs = budget.div_ceil(2).max(8);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..pairs {
                let v = loop {
                    let g: Vec<f64> = (0..d).map(|_| gaussian(&mut rng)).collect();
                    let n = norm2(&g).sqrt();
                    if n > 1e-12 {
                        break g.iter().map(|x| x / n).collect::<Vec<f64>>();
                    }
                };
                units.extend_from_slice(&v);
                units.extend(v.iter().map(|x| -x));
            }
        }
    }
    let m = units.len() / d;
    let w = 1.0 / m as f64;
    let mut nodes = Vec::with_capacity(units.len());
    for i in 0..m {
        for a in 0..d {
            nodes.push(center[a] + radius * units[i * d + a]);
        }
    }
    Ok(Quadrature { dim: d, nodes, weights: vec![w; m] })
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u1 bounded away from zero.
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Sphere arising at step `j` of the iterated simplex integral: the set of
/// points at the prescribed vertex distances from the anchors `x_1..x_{j-1}`.
#[derive(Clone, Debug)]
pub struct SphereDescriptor {
    pub center: Vec<f64>,
    pub radius: f64,
    /// Orthonormal columns spanning the orthogonal complement of the
    /// anchor span; the sphere is `center + radius * frame * S^{c-1}`.
    pub frame: Vec<Vec<f64>>,
}

impl SphereDescriptor {
    /// Dimension of the ambient complement (the sphere is S^{cdim-1}).
    pub fn cdim(&self) -> usize {
        self.frame.len()
    }

    /// Quadrature on the described sphere.
    pub fn quadrature(&self, budget: usize, seed: u64) -> Result<Quadrature> {
        let c = self.cdim();
        let d = self.center.len();
        let unit = sphere_quadrature(c, 1.0, &vec![0.0; c], budget, seed)?;
        let m = unit.len();
        let mut nodes = Vec::with_capacity(m * d);
        for i in 0..m {
            let u = unit.node(i);
            for a in 0..d {
                let mut x = self.center[a];
                for (t, col) in self.frame.iter().enumerate() {
                    x += self.radius * u[t] * col[a];
                }
                nodes.push(x);
            }
        }
        Ok(Quadrature { dim: d, nodes, weights: (0..m).map(|i| unit.weight(i)).collect() })
    }
}

/// Sphere of points realizing vertex `j` (1-based) of the simplex given
/// anchors realizing vertices `1..j-1`: `|y| = |v_j|` and
/// `|y - x_i| = |v_j - v_i|` for each anchor.
///
/// The center is the Gram-system solution in the anchor span; the radius
/// comes from the Pythagorean split of `|v_j|^2`.
pub fn intersection_sphere(
    d: usize,
    anchors: &[Vec<f64>],
    simplex: &SimplexSpec,
    j: usize,
) -> Result<SphereDescriptor> {
    let k = simplex.k();
    if j == 0 || j > k {
        return Err(LabError::param(format!("vertex index {j} outside 1..={k}")));
    }
    if anchors.len() != j - 1 {
        return Err(LabError::param(format!(
            "expected {} anchors for vertex {j}, got {}",
            j - 1,
            anchors.len()
        )));
    }
    if d < j {
        return Err(LabError::param(format!("need d >= {j} for vertex {j} in R^{d}")));
    }
    if anchors.iter().any(|x| x.len() != d) {
        return Err(LabError::shape("anchor dimension"));
    }
    let scale = simplex.max_vertex_norm().max(1e-30);
    // Anchors must realize the sub-simplex distance pattern.
    for (i, x) in anchors.iter().enumerate() {
        let want = norm2(simplex.vertex(i)).sqrt();
        let got = norm2(x).sqrt();
        if (want - got).abs() > 1e-8 * scale.max(1.0) {
            return Err(LabError::InconsistentAnchors {
                context: format!("|x_{}| = {got:.12} but |v_{}| = {want:.12}", i + 1, i + 1),
            });
        }
        for (i2, x2) in anchors.iter().enumerate().take(i) {
            let want = dist(simplex.vertex(i), simplex.vertex(i2));
            let got = dist(x, x2);
            if (want - got).abs() > 1e-8 * scale.max(1.0) {
                return Err(LabError::InconsistentAnchors {
                    context: format!(
                        "|x_{} - x_{}| = {got:.12} but vertices give {want:.12}",
                        i + 1,
                        i2 + 1
                    ),
                });
            }
        }
    }
    let vj = simplex.vertex(j - 1);
    let m = anchors.len();
    let center = if m == 0 {
        vec![0.0; d]
    } else {
        let g = DMatrix::from_fn(m, m, |a, b| dot(&anchors[a], &anchors[b]));
        let rhs = nalgebra::DVector::from_fn(m, |a, _| dot(vj, simplex.vertex(a)));
        let lu = g.lu();
        let coeff = lu.solve(&rhs).ok_or_else(|| LabError::InconsistentAnchors {
            context: "anchor gram system singular".into(),
        })?;
        let mut c = vec![0.0; d];
        for (a, x) in anchors.iter().enumerate() {
            for t in 0..d {
                c[t] += coeff[a] * x[t];
            }
        }
        c
    };
    let r2 = norm2(vj) - norm2(&center);
    if r2 < -1e-8 * scale.max(1.0) {
        return Err(LabError::InconsistentAnchors {
            context: format!("negative squared radius {r2:.3e}"),
        });
    }
    let radius = r2.max(0.0).sqrt();
    let frame = complement_frame(d, anchors)?;
    Ok(SphereDescriptor { center, radius, frame })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Orthonormal basis of the orthogonal complement of `span(vectors)`,
/// by modified Gram-Schmidt extended with standard basis vectors.
fn complement_frame(d: usize, vectors: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in vectors {
        let mut w = v.clone();
        for b in &basis {
            let c = dot(&w, b);
            for t in 0..d {
                w[t] -= c * b[t];
            }
        }
        let n = norm2(&w).sqrt();
        if n > 1e-10 {
            for t in 0..d {
                w[t] /= n;
            }
            basis.push(w);
        }
    }
    let span_rank = basis.len();
    if span_rank != vectors.len() {
        return Err(LabError::InconsistentAnchors { context: "anchors linearly dependent".into() });
    }
    let mut frame = Vec::new();
    for e in 0..d {
        let mut w = vec![0.0; d];
        w[e] = 1.0;
        for b in basis.iter().chain(frame.iter()) {
            let c = dot(&w, b);
            for t in 0..d {
                w[t] -= c * b[t];
            }
        }
        let n = norm2(&w).sqrt();
        if n > 1e-8 {
            for t in 0..d {
                w[t] /= n;
            }
            frame.push(w);
        }
        if frame.len() == d - span_rank {
            break;
        }
    }
    if frame.len() != d - span_rank {
        return Err(LabError::InconsistentAnchors { context: "complement frame incomplete".into() });
    }
    Ok(frame)
}

/// Rotation matrix in `SO(d)`, row-major.
#[derive(Clone, Debug)]
pub struct Rotation {
    d: usize,
    mat: Vec<f64>,
}

impl Rotation {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.mat[i * self.d + j]
    }

    pub fn trace(&self) -> f64 {
        (0..self.d).map(|i| self.entry(i, i)).sum()
    }

    /// Applies the rotation to `v`, zero-padding `v` to length d.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        for (i, slot) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, &x) in v.iter().enumerate() {
                acc += self.entry(i, j) * x;
            }
            *slot = acc;
        }
        out
    }
}

/// Haar-distributed rotations: QR of Gaussian matrices with the triangular
/// factor's diagonal made positive, then one column flipped if det = -1.
pub fn haar_rotations(d: usize, count: usize, seed: u64) -> Result<Vec<Rotation>> {
    if d < 2 || d > 6 {
        return Err(LabError::param("rotation dimension outside 2..=6"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let g = DMatrix::from_fn(d, d, |_, _| gaussian(&mut rng));
        let qr = g.qr();
        let mut q = qr.q();
        let r = qr.r();
        for i in 0..d {
            if r[(i, i)] < 0.0 {
                for row in 0..d {
                    q[(row, i)] = -q[(row, i)];
                }
            }
        }
        if q.determinant() < 0.0 {
            for row in 0..d {
                q[(row, d - 1)] = -q[(row, d - 1)];
            }
        }
        // Internal consistency: orthogonality and unit determinant.
        let qtq = q.transpose() * &q;
        let mut resid = 0.0f64;
        for i in 0..d {
            for j in 0..d {
                let want = if i == j { 1.0 } else { 0.0 };
                resid = resid.max((qtq[(i, j)] - want).abs());
            }
        }
        if resid > 1e-12 || (q.determinant() - 1.0).abs() > 1e-12 {
            return Err(LabError::param("gaussian qr produced a non-rotation"));
        }
        let mut mat = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                mat[i * d + j] = q[(i, j)];
            }
        }
        out.push(Rotation { d, mat });
    }
    Ok(out)
}

/// Fourier transform of the normalized measure on the unit sphere of R^d,
/// evaluated at radial frequency `t = |xi|` (the transform is real and
/// radial). d=3 uses the closed form; other dimensions integrate the
/// latitude representation spectrally.
pub fn sphere_fourier(d: usize, t: f64) -> Result<f64> {
    if d == 0 || d > 6 {
        return Err(LabError::param("sphere dimension outside 1..=6"));
    }
    if t < 0.0 {
        return Err(LabError::param("negative frequency"));
    }
    if t == 0.0 {
        return Ok(1.0);
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    match d {
        1 => Ok((two_pi * t).cos()),
        3 => Ok((two_pi * t).sin() / (two_pi * t)),
        _ => Ok(latitude_integral(d, t)),
    }
}

/// Int_0^pi cos(2 pi t cos(theta)) sin(theta)^(d-2) dtheta, normalized.
///
/// Midpoint rule; the integrand extends to a smooth periodic function, so
/// the rule converges spectrally. Node count adapts by doubling.
fn latitude_integral(d: usize, t: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let p = (d - 2) as i32;
    let eval = |n: usize| -> (f64, f64) {
        let mut num = 0.0;
        let mut den = 0.0;
        let step = std::f64::consts::PI / n as f64;
        for i in 0..n {
            let theta = (i as f64 + 0.5) * step;
            let s = theta.sin().powi(p);
            num += (two_pi * t * theta.cos()).cos() * s;
            den += s;
        }
        (num, den)
    };
    let mut n = ((24.0 * (t + 1.0)) as usize).max(600);
    let (mut num, mut den) = eval(n);
    loop {
        let n2 = n * 2;
        let (num2, den2) = eval(n2);
        let a = num / den;
        let b = num2 / den2;
        if (a - b).abs() < 1e-12 || n2 > 400_000 {
            return b;
        }
        n = n2;
        num = num2;
        den = den2;
    }
}

/// Envelope fit of the sphere transform over dyadic shells `[R, 2R]`.
#[derive(Clone, Debug)]
pub struct DecayFit {
    /// Fitted slope of log(shell max) against log(R).
    pub exponent: f64,
    /// Largest `max |sigma_hat| * R^{(d-1)/2}` over the shells.
    pub constant: f64,
    /// (R, shell max) pairs used in the fit.
    pub shells: Vec<(f64, f64)>,
}

/// Measures shell maxima of `|sigma_hat|` on dyadic shells starting at
/// `r_lo` while `2R <= r_hi`, and fits the decay exponent.
pub fn sphere_decay_fit(d: usize, r_lo: f64, r_hi: f64, samples_per_shell: usize) -> Result<DecayFit> {
    if r_lo <= 0.0 || r_hi <= 2.0 * r_lo {
        return Err(LabError::param("decay fit needs 0 < r_lo and r_hi > 2 r_lo"));
    }
    let mut shells = Vec::new();
    let mut r = r_lo;
    while 2.0 * r <= r_hi + 1e-9 {
        let mut peak = 0.0f64;
        for i in 0..samples_per_shell {
            let t = r + (r * i as f64) / samples_per_shell as f64;
            peak = peak.max(sphere_fourier(d, t)?.abs());
        }
        shells.push((r, peak));
        r *= 2.0;
    }
    if shells.len() < 2 {
        return Err(LabError::param("decay fit needs at least two shells"));
    }
    let logs: Vec<(f64, f64)> = shells.iter().map(|&(r, m)| (r.ln(), m.ln())).collect();
    let n = logs.len() as f64;
    let sx: f64 = logs.iter().map(|p| p.0).sum();
    let sy: f64 = logs.iter().map(|p| p.1).sum();
    let sxx: f64 = logs.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = logs.iter().map(|p| p.0 * p.1).sum();
    let exponent = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let half = (d as f64 - 1.0) / 2.0;
    let constant =
        shells.iter().map(|&(r, m)| m * r.powf(half)).fold(0.0f64, f64::max);
    Ok(DecayFit { exponent, constant, shells })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moment(q: &Quadrature, f: impl Fn(&[f64]) -> f64) -> f64 {
        q.integrate(|x| f(x))
    }

    #[test]
    fn quadrature_weights_sum_to_one() {
        for (d, budget) in [(1, 2), (2, 64), (3, 256), (4, 512)] {
            let q = sphere_quadrature(d, 1.0, &vec![0.0; d], budget, 5).unwrap();
            let s: f64 = (0..q.len()).map(|i| q.weight(i)).sum();
            assert!((s - 1.0).abs() < 1e-12, "d={d}: weight sum {s}");
        }
    }

    #[test]
    fn quadrature_first_and_mixed_moments_d2_d3() {
        for d in [2usize, 3] {
            let q = sphere_quadrature(d, 1.0, &vec![0.0; d], 512, 1).unwrap();
            for a in 0..d {
                let m1 = moment(&q, |x| x[a]);
                assert!(m1.abs() < 1e-10, "d={d} first moment axis {a}: {m1}");
                for b in 0..a {
                    let m2 = moment(&q, |x| x[a] * x[b]);
                    assert!(m2.abs() < 1e-10, "d={d} mixed moment {a}{b}: {m2}");
                }
            }
        }
    }

    #[test]
    fn quadrature_mc_moments_d4() {
        let d = 4;
        let budget = 4096;
        let q = sphere_quadrature(d, 1.0, &vec![0.0; d], budget, 12).unwrap();
        let bound = 3.0 / (budget as f64).sqrt();
        for a in 0..d {
            assert!(moment(&q, |x| x[a]).abs() < 1e-12); // antipodal pairs
            for b in 0..a {
                let m2 = moment(&q, |x| x[a] * x[b]);
                assert!(m2.abs() < bound, "mixed moment {a}{b}: {m2} vs {bound}");
            }
        }
    }

    #[test]
    fn quadrature_second_moment_d3() {
        let q = sphere_quadrature(3, 1.0, &[0.0; 3], 4096, 1).unwrap();
        let m = moment(&q, |x| x[0] * x[0]);
        assert!((m - 1.0 / 3.0).abs() < 1e-3, "Int x1^2 = {m}");
    }

    #[test]
    fn quadrature_radius_and_center() {
        let q = sphere_quadrature(4, 2.0, &[0.0; 4], 2048, 3).unwrap();
        let m = moment(&q, |x| x.iter().map(|v| v * v).sum());
        assert!((m - 4.0).abs() < 3e-2);
        let qc = sphere_quadrature(2, 0.5, &[0.25, 0.75], 128, 0).unwrap();
        for i in 0..qc.len() {
            let x = qc.node(i);
            let r = ((x[0] - 0.25).powi(2) + (x[1] - 0.75).powi(2)).sqrt();
            assert!((r - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn equilateral_simplex_geometry() {
        let s = SimplexSpec::equilateral(2, 1.0).unwrap();
        let g = s.gram();
        assert!((g[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((g[(0, 1)] - 0.5).abs() < 1e-12);
        assert!((s.min_height() - 3.0f64.sqrt() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn intersection_sphere_equilateral() {
        let s = SimplexSpec::equilateral(2, 1.0).unwrap();
        let anchors = vec![vec![1.0, 0.0, 0.0]];
        let sph = intersection_sphere(3, &anchors, &s, 2).unwrap();
        assert!((sph.center[0] - 0.5).abs() < 1e-12);
        assert!(sph.center[1].abs() < 1e-12 && sph.center[2].abs() < 1e-12);
        assert!((sph.radius - 3.0f64.sqrt() / 2.0).abs() < 1e-12);
        // Every node satisfies both distance constraints.
        let q = sph.quadrature(128, 9).unwrap();
        for i in 0..q.len() {
            let y = q.node(i);
            let r0 = norm2(y).sqrt();
            let r1 = dist(y, &anchors[0]);
            assert!((r0 - 1.0).abs() < 1e-8, "|y| = {r0}");
            assert!((r1 - 1.0).abs() < 1e-8, "|y - x1| = {r1}");
        }
    }

    #[test]
    fn intersection_sphere_right_simplex() {
        // v1 = e1, v2 = e2: points at distance 1 from 0 and sqrt(2) from x1.
        let s = SimplexSpec::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let anchors = vec![vec![1.0, 0.0, 0.0]];
        let sph = intersection_sphere(3, &anchors, &s, 2).unwrap();
        assert!(sph.center.iter().all(|c| c.abs() < 1e-12));
        assert!((sph.radius - 1.0).abs() < 1e-12);
        let q = sph.quadrature(64, 2).unwrap();
        for i in 0..q.len() {
            let y = q.node(i);
            assert!((norm2(y).sqrt() - 1.0).abs() < 1e-8);
            assert!((dist(y, &anchors[0]) - 2.0f64.sqrt()).abs() < 1e-8);
        }
    }

    #[test]
    fn intersection_sphere_rejects_bad_anchors() {
        let s = SimplexSpec::equilateral(2, 1.0).unwrap();
        let anchors = vec![vec![0.7, 0.0, 0.0]]; // wrong norm
        match intersection_sphere(3, &anchors, &s, 2) {
            Err(LabError::InconsistentAnchors { .. }) => {}
            other => panic!("expected inconsistent anchors, got {other:?}"),
        }
    }

    #[test]
    fn haar_rotations_are_rotations() {
        let rots = haar_rotations(3, 50, 17).unwrap();
        assert_eq!(rots.len(), 50);
        for r in &rots {
            // Columns orthonormal.
            for i in 0..3 {
                for j in 0..3 {
                    let v: f64 = (0..3).map(|t| r.entry(t, i) * r.entry(t, j)).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((v - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn haar_trace_statistics_d3() {
        // E[tr] over SO(3) is 0: the angle density (1-cos)/pi integrates
        // (1 + 2 cos) to zero.
        let rots = haar_rotations(3, 8000, 23).unwrap();
        let mean: f64 = rots.iter().map(|r| r.trace()).sum::<f64>() / rots.len() as f64;
        assert!(mean.abs() < 0.05, "mean trace {mean}");
    }

    #[test]
    fn haar_angle_statistics_d2() {
        let rots = haar_rotations(2, 10000, 29).unwrap();
        // cos(angle) is the (0,0) entry.
        let mean: f64 = rots.iter().map(|r| r.entry(0, 0)).sum::<f64>() / rots.len() as f64;
        assert!(mean.abs() < 0.03, "mean cos angle {mean}");
    }

    #[test]
    fn sphere_fourier_basic_values() {
        assert!((sphere_fourier(3, 0.0).unwrap() - 1.0).abs() < 1e-15);
        let t = 0.73;
        let two_pi = 2.0 * std::f64::consts::PI;
        let want = (two_pi * t).sin() / (two_pi * t);
        assert!((sphere_fourier(3, t).unwrap() - want).abs() < 1e-15);
        // d=3 latitude integral agrees with the closed form.
        for t in [0.3, 1.7, 9.4] {
            let li = latitude_integral(3, t);
            let cf = sphere_fourier(3, t).unwrap();
            assert!((li - cf).abs() < 1e-10, "latitude vs closed form at t={t}");
        }
    }

    #[test]
    fn sphere_fourier_d2_matches_bessel_series() {
        // J0(x) = sum (-1)^m (x/2)^(2m) / (m!)^2 for moderate x.
        let j0 = |x: f64| -> f64 {
            let mut term = 1.0;
            let mut sum = 1.0;
            for m in 1..60 {
                term *= -(x * x) / (4.0 * (m * m) as f64);
                sum += term;
            }
            sum
        };
        for t in [0.1, 0.5, 1.0] {
            let want = j0(2.0 * std::f64::consts::PI * t);
            let got = sphere_fourier(2, t).unwrap();
            assert!((got - want).abs() < 1e-10, "t={t}: {got} vs {want}");
        }
    }

    #[test]
    fn sphere_fourier_bounded_by_one() {
        for d in [2, 3, 4, 5] {
            for i in 0..200 {
                let t = i as f64 * 0.37;
                let v = sphere_fourier(d, t).unwrap();
                assert!(v.abs() <= 1.0 + 1e-12, "d={d} t={t}: {v}");
            }
        }
    }

    #[test]
    fn decay_exponents_match_dimension() {
        for d in [2usize, 3] {
            let fit = sphere_decay_fit(d, 4.0, 64.0, 512).unwrap();
            let want = -((d as f64 - 1.0) / 2.0);
            assert!(
                (fit.exponent - want).abs() < 0.1,
                "d={d}: exponent {} vs {want}",
                fit.exponent
            );
            assert!(fit.constant <= 1.0, "d={d}: constant {}", fit.constant);
        }
    }

    #[test]
    fn embed_realizes_gram() {
        let s = SimplexSpec::equilateral(3, 0.8).unwrap();
        let x = s.embed(5).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = s.gram()[(i, j)];
                let got = dot(&x[i], &x[j]);
                assert!((want - got).abs() < 1e-12);
            }
        }
    }
}
