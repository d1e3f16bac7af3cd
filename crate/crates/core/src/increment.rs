//! Scale-adapted partitions of a product of conditioning sets, the energy
//! increment that refines them, and the density-increment pipeline built on
//! top: regularize, test the count, and either certify it or descend into a
//! denser sub-window.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::counting::{count_rectangle, RectangleMethod};
use crate::error::{LabError, Result};
use crate::grid::GridFunction;
use crate::norms::{box_norm_strided, uniformity_defect, UniformityReport};
use crate::util::derive_seed;

fn concat_idx(a: &[usize], b: &[usize]) -> Vec<usize> {
    a.iter().chain(b).copied().collect()
}

/// Sum of `f` over the axis-aligned box of cells at `lo` with extents `size`.
fn box_sum(f: &GridFunction, lo: &[usize], size: &[usize]) -> f64 {
    let d = f.d();
    let n = f.n();
    let v = f.values();
    let len0 = size[0];
    let mut t = vec![0usize; d.saturating_sub(1)];
    let mut acc = 0.0;
    'rows: loop {
        let mut base = 0usize;
        for a in (1..d).rev() {
            base = base * n + lo[a] + t[a - 1];
        }
        let off = base * n + lo[0];
        acc += v[off..off + len0].iter().sum::<f64>();
        let mut axis = 1;
        loop {
            if axis == d {
                break 'rows;
            }
            t[axis - 1] += 1;
            if t[axis - 1] < size[axis] {
                break;
            }
            t[axis - 1] = 0;
            axis += 1;
        }
    }
    acc
}

/// Densities of `b` over every side-`w` window whose corner keeps it fully
/// inside the side-`m` cube at `lo`. Layout follows the grid convention
/// (axis 0 fastest); the extent per axis is `m - w + 1`.
fn corner_field(b: &GridFunction, lo: &[usize], m: usize, w: usize) -> Vec<f64> {
    let d = b.d();
    let e = m - w + 1;
    let cells = (w as f64).powi(d as i32);
    let size = vec![w; d];
    let mut out = Vec::with_capacity(e.pow(d as u32));
    let mut t = vec![0usize; d];
    let mut abs = vec![0usize; d];
    'corners: loop {
        for a in 0..d {
            abs[a] = lo[a] + t[a];
        }
        out.push(box_sum(b, &abs, &size) / cells);
        let mut axis = 0;
        loop {
            if axis == d {
                break 'corners;
            }
            t[axis] += 1;
            if t[axis] < e {
                break;
            }
            t[axis] = 0;
            axis += 1;
        }
    }
    out
}

fn rms_dev(field: &[f64], delta: f64) -> f64 {
    if field.is_empty() {
        return 0.0;
    }
    let s: f64 = field.iter().map(|w| (w - delta) * (w - delta)).sum();
    (s / field.len() as f64).sqrt()
}

/// Lexicographically first shift in `[0, mc)^d` whose aligned corner grid
/// captures the most flagged positions of `mask` (extent `e` per axis).
/// Returns the shift and the captured fraction of the nominal `m^d` grid.
fn best_shift(mask: &[bool], d: usize, e: usize, mc: usize, m: usize) -> (Vec<usize>, f64) {
    let mut best_count = 0usize;
    let mut best_s = vec![0usize; d];
    let mut first = true;
    let mut s = vec![0usize; d];
    'shifts: loop {
        let lims: Vec<usize> = (0..d)
            .map(|a| if e > s[a] { (e - 1 - s[a]) / mc + 1 } else { 0 })
            .collect();
        let mut count = 0usize;
        if lims.iter().all(|&l| l > 0) {
            let mut k = vec![0usize; d];
            'grid: loop {
                let mut flat = 0usize;
                for a in (0..d).rev() {
                    flat = flat * e + (s[a] + mc * k[a]);
                }
                if mask[flat] {
                    count += 1;
                }
                let mut axis = 0;
                loop {
                    if axis == d {
                        break 'grid;
                    }
                    k[axis] += 1;
                    if k[axis] < lims[axis] {
                        break;
                    }
                    k[axis] = 0;
                    axis += 1;
                }
            }
        }
        if first || count > best_count {
            best_count = count;
            best_s = s.clone();
            first = false;
        }
        let mut axis = 0;
        loop {
            if axis == d {
                break 'shifts;
            }
            s[axis] += 1;
            if s[axis] < mc {
                break;
            }
            s[axis] = 0;
            axis += 1;
        }
    }
    (best_s, best_count as f64 / (m as f64).powi(d as i32))
}

/// How a partition cell behaves at the next finer scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellClass {
    Uniform,
    NonUniform,
    Rectangle,
}

/// One product cell `Q1 x Q2` of a scale-adapted partition.
#[derive(Clone, Debug, Serialize)]
pub struct PartitionCell {
    pub lo1: Vec<usize>,
    pub size1: Vec<usize>,
    pub lo2: Vec<usize>,
    pub size2: Vec<usize>,
    /// Index into the partition's scale sequence this cell was created at.
    pub scale_index: usize,
    pub class: CellClass,
    /// Density of the first conditioning set on `Q1`.
    pub delta1: f64,
    /// Density of the second conditioning set on `Q2`.
    pub delta2: f64,
    pub defect1: Option<f64>,
    pub defect2: Option<f64>,
}

impl PartitionCell {
    /// Fraction of the product domain this cell occupies.
    pub fn measure(&self, n: usize) -> f64 {
        let cells: f64 = self
            .size1
            .iter()
            .chain(self.size2.iter())
            .map(|&s| s as f64)
            .product();
        cells / (n as f64).powi((self.size1.len() + self.size2.len()) as i32)
    }

    fn cells1(&self) -> f64 {
        self.size1.iter().map(|&s| s as f64).product()
    }

    fn cells2(&self) -> f64 {
        self.size2.iter().map(|&s| s as f64).product()
    }
}

/// Telemetry for one refinement round.
#[derive(Clone, Debug, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub refined: usize,
    pub n_mass: f64,
    pub r_mass: f64,
    pub energy: f64,
    /// Captured fraction of the shifted corner grid, one entry per refined cell.
    pub captures: Vec<f64>,
}

/// Partition of the product domain into cubes and rectangles adapted to a
/// decreasing scale sequence. The implicit root scale 1 leads the stored
/// sequence, so cells at `scale_index` j live on cubes of `cell_sides[j]`
/// cells and are classified by windows at the following entry.
#[derive(Clone, Debug, Serialize)]
pub struct ScalePartition {
    pub n: usize,
    pub d1: usize,
    pub d2: usize,
    pub scales: Vec<f64>,
    pub cell_sides: Vec<usize>,
    pub eta: f64,
    pub level: usize,
    pub cells: Vec<PartitionCell>,
    pub energy: f64,
    pub trace: Vec<RoundRecord>,
}

fn partition_energy(cells: &[PartitionCell], n: usize) -> f64 {
    cells
        .iter()
        .map(|c| 0.5 * (c.delta1 * c.delta1 + c.delta2 * c.delta2) * c.measure(n))
        .sum()
}

impl ScalePartition {
    /// Builds the trivial partition and classifies the root cell with windows
    /// at the first proper scale.
    pub fn new(b1: &GridFunction, b2: &GridFunction, scales: &[f64], eta: f64) -> Result<Self> {
        if b1.n() != b2.n() {
            return Err(LabError::shape("conditioning factors live on different grids"));
        }
        for (name, b) in [("first", b1), ("second", b2)] {
            if b.min_value() < -1e-9 || b.max_value() > 1.0 + 1e-9 {
                return Err(LabError::param(format!(
                    "{name} conditioning factor must take values in [0, 1]"
                )));
            }
        }
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(LabError::param("eta must lie in (0, 1]"));
        }
        if scales.is_empty() {
            return Err(LabError::param("scale sequence must be non-empty"));
        }
        let n = b1.n();
        let d1 = b1.d();
        let d2 = b2.d();
        let mut full = Vec::with_capacity(scales.len() + 1);
        full.push(1.0);
        let mut sides = vec![n];
        for (j, &l) in scales.iter().enumerate() {
            if !(l > 0.0 && l < 1.0) {
                return Err(LabError::param(format!(
                    "scale {} must lie strictly between 0 and 1",
                    l
                )));
            }
            let prev = full[j];
            if l > 0.5 * prev + 1e-12 {
                return Err(LabError::param(format!(
                    "scale sequence must be lacunary, L_{{j+1}} < L_j / 2: {} follows {}",
                    l, prev
                )));
            }
            let c = (l * n as f64).round() as usize;
            if c < 1 {
                return Err(LabError::unresolvable(format!(
                    "scale {} maps to fewer than one cell on an n = {} grid",
                    l, n
                )));
            }
            if c >= *sides.last().unwrap() {
                return Err(LabError::unresolvable(format!(
                    "scales {} and {} realize the same cell count on an n = {} grid",
                    prev, l, n
                )));
            }
            full.push(l);
            sides.push(c);
        }
        let delta1 = b1.density();
        let delta2 = b2.density();
        let wc = sides[1];
        let def1 = rms_dev(&corner_field(b1, &vec![0; d1], n, wc), delta1);
        let def2 = rms_dev(&corner_field(b2, &vec![0; d2], n, wc), delta2);
        let class = if def1 <= eta && def2 <= eta {
            CellClass::Uniform
        } else {
            CellClass::NonUniform
        };
        let root = PartitionCell {
            lo1: vec![0; d1],
            size1: vec![n; d1],
            lo2: vec![0; d2],
            size2: vec![n; d2],
            scale_index: 0,
            class,
            delta1,
            delta2,
            defect1: Some(def1),
            defect2: Some(def2),
        };
        let energy = partition_energy(std::slice::from_ref(&root), n);
        let mut part = ScalePartition {
            n,
            d1,
            d2,
            scales: full,
            cell_sides: sides,
            eta,
            level: 0,
            cells: vec![root],
            energy,
            trace: Vec::new(),
        };
        let (nm, rm) = (part.n_mass(), part.r_mass());
        part.trace.push(RoundRecord {
            round: 0,
            refined: 0,
            n_mass: nm,
            r_mass: rm,
            energy,
            captures: Vec::new(),
        });
        Ok(part)
    }

    pub fn class_mass(&self, class: CellClass) -> f64 {
        self.cells
            .iter()
            .filter(|c| c.class == class)
            .map(|c| c.measure(self.n))
            .sum()
    }

    /// Total measure of cells still flagged as non-uniform.
    pub fn n_mass(&self) -> f64 {
        self.class_mass(CellClass::NonUniform)
    }

    /// Total measure of rectangle (shift-remainder) cells.
    pub fn r_mass(&self) -> f64 {
        self.class_mass(CellClass::Rectangle)
    }

    /// Consistency audit: the cells tile the domain, stored densities match
    /// the factors, and the stored energy matches a recomputation.
    pub fn validate(&self, b1: &GridFunction, b2: &GridFunction) -> Result<()> {
        if b1.n() != self.n || b2.n() != self.n || b1.d() != self.d1 || b2.d() != self.d2 {
            return Err(LabError::shape("partition does not match the given factors"));
        }
        let total: f64 = self.cells.iter().map(|c| c.measure(self.n)).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(LabError::hypothesis(format!(
                "partition cells tile measure {:.15} instead of 1",
                total
            )));
        }
        for cell in &self.cells {
            let m1 = box_sum(b1, &cell.lo1, &cell.size1) / cell.cells1();
            let m2 = box_sum(b2, &cell.lo2, &cell.size2) / cell.cells2();
            if (m1 - cell.delta1).abs() > 1e-12 || (m2 - cell.delta2).abs() > 1e-12 {
                return Err(LabError::hypothesis(
                    "stored cell density disagrees with the factors",
                ));
            }
        }
        let e = partition_energy(&self.cells, self.n);
        if (e - self.energy).abs() > 1e-12 {
            return Err(LabError::hypothesis(format!(
                "stored energy {:.15} disagrees with recomputed {:.15}",
                self.energy, e
            )));
        }
        Ok(())
    }
}

/// Energy of a partition against the conditioning factors: the weighted mean
/// of the squared cell densities, `1/2 sum (delta1^2 + delta2^2) |C|`.
pub fn energy(b1: &GridFunction, b2: &GridFunction, partition: &ScalePartition) -> Result<f64> {
    if b1.n() != partition.n
        || b2.n() != partition.n
        || b1.d() != partition.d1
        || b2.d() != partition.d2
    {
        return Err(LabError::shape("partition does not match the given factors"));
    }
    Ok(partition
        .cells
        .iter()
        .map(|c| {
            let m1 = box_sum(b1, &c.lo1, &c.size1) / c.cells1();
            let m2 = box_sum(b2, &c.lo2, &c.size2) / c.cells2();
            0.5 * (m1 * m1 + m2 * m2) * c.measure(partition.n)
        })
        .sum())
}

struct Piece {
    lo: Vec<usize>,
    size: Vec<usize>,
    full: bool,
    cells: f64,
    mass: f64,
    delta: f64,
    defect: Option<f64>,
}

/// Cuts one factor cube of side `big` at `cell_lo` into a shifted grid of
/// side-`mc` cubes plus boundary remainders; full cubes get an interior
/// defect at window `wc`.
fn factor_pieces(
    b: &GridFunction,
    cell_lo: &[usize],
    big: usize,
    mc: usize,
    shift: &[usize],
    wc: usize,
) -> Vec<Piece> {
    let d = b.d();
    let axis_runs = |s: usize| -> Vec<(usize, usize, bool)> {
        let mut runs = Vec::new();
        if s > 0 {
            runs.push((0, s, false));
        }
        let mut t = s;
        while t + mc <= big {
            runs.push((t, mc, true));
            t += mc;
        }
        if t < big {
            runs.push((t, big - t, false));
        }
        runs
    };
    let runs: Vec<Vec<(usize, usize, bool)>> = (0..d).map(|a| axis_runs(shift[a])).collect();
    let mut out = Vec::new();
    let mut ri = vec![0usize; d];
    'pieces: loop {
        let mut lo = Vec::with_capacity(d);
        let mut size = Vec::with_capacity(d);
        let mut full = true;
        for a in 0..d {
            let (st, len, fl) = runs[a][ri[a]];
            lo.push(cell_lo[a] + st);
            size.push(len);
            full &= fl;
        }
        let cells: f64 = size.iter().map(|&x| x as f64).product();
        let mass = box_sum(b, &lo, &size);
        let delta = mass / cells;
        let defect = if full {
            Some(rms_dev(&corner_field(b, &lo, mc, wc), delta))
        } else {
            None
        };
        out.push(Piece {
            lo,
            size,
            full,
            cells,
            mass,
            delta,
            defect,
        });
        let mut axis = 0;
        loop {
            if axis == d {
                break 'pieces;
            }
            ri[axis] += 1;
            if ri[axis] < runs[axis].len() {
                break;
            }
            ri[axis] = 0;
            axis += 1;
        }
    }
    out
}

/// Refines every non-uniform cell of `partition` to `next_scale`: the factor
/// with the larger windowed defect is cut along the aligned shift capturing
/// the most defective window corners, the other factor along the unshifted
/// grid. New full cubes are classified at the following scale; shift
/// remainders become rectangle cells. Each split is audited on the spot: the
/// energy decomposition must balance to 1e-12, the gain must reach
/// `eta^4/128` per unit cell measure, and remainder mass must stay below
/// `16 L_{j+1}/L_j` per cell.
pub fn refine_nonuniform(
    partition: &ScalePartition,
    b1: &GridFunction,
    b2: &GridFunction,
    eta: f64,
    next_scale: f64,
) -> Result<ScalePartition> {
    if b1.n() != partition.n
        || b2.n() != partition.n
        || b1.d() != partition.d1
        || b2.d() != partition.d2
    {
        return Err(LabError::shape("partition does not match the given factors"));
    }
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(LabError::param("eta must lie in (0, 1]"));
    }
    let j = partition.level;
    let has_n = partition.cells.iter().any(|c| c.class == CellClass::NonUniform);
    match partition.scales.get(j + 1) {
        Some(&expected) => {
            if (next_scale - expected).abs() > 1e-9 {
                return Err(LabError::param(format!(
                    "next scale {} does not match the stored sequence entry {}",
                    next_scale, expected
                )));
            }
        }
        None => {
            if !has_n {
                return Ok(partition.clone());
            }
            return Err(LabError::ScalesExhausted {
                context: format!("no scale after level {} in the stored sequence", j),
            });
        }
    }
    if !has_n {
        return Ok(partition.clone());
    }
    let wc = match partition.cell_sides.get(j + 2) {
        Some(&w) => w,
        None => {
            return Err(LabError::ScalesExhausted {
                context: format!(
                    "classifying cubes at scale index {} needs a scale at index {}",
                    j + 1,
                    j + 2
                ),
            })
        }
    };
    let mc = partition.cell_sides[j + 1];
    let big = partition.cell_sides[j];
    let n = partition.n;
    let d1 = partition.d1;
    let d2 = partition.d2;
    let h_pow = (n as f64).powi((d1 + d2) as i32);
    let m = big / mc;

    let mut cells_out: Vec<PartitionCell> = Vec::new();
    let mut captures = Vec::new();
    let mut refined = 0usize;
    for cell in &partition.cells {
        if cell.class != CellClass::NonUniform {
            cells_out.push(cell.clone());
            continue;
        }
        if cell.scale_index != j
            || cell.size1.iter().chain(cell.size2.iter()).any(|&s| s != big)
        {
            return Err(LabError::hypothesis(
                "non-uniform cell is not a cube at the current level",
            ));
        }
        refined += 1;
        let field1 = corner_field(b1, &cell.lo1, big, mc);
        let field2 = corner_field(b2, &cell.lo2, big, mc);
        let def1 = rms_dev(&field1, cell.delta1);
        let def2 = rms_dev(&field2, cell.delta2);
        let drive_first = def1 >= def2;
        let (field, delta, dd) = if drive_first {
            (&field1, cell.delta1, d1)
        } else {
            (&field2, cell.delta2, d2)
        };
        let e = big - mc + 1;
        let mask: Vec<bool> = field
            .iter()
            .map(|w| (w - delta).abs() >= eta / 2.0 - 1e-12)
            .collect();
        let (shift, capture) = best_shift(&mask, dd, e, mc, m);
        captures.push(capture);
        let zero1 = vec![0usize; d1];
        let zero2 = vec![0usize; d2];
        let (s1, s2) = if drive_first {
            (shift.as_slice(), zero2.as_slice())
        } else {
            (zero1.as_slice(), shift.as_slice())
        };
        let pieces1 = factor_pieces(b1, &cell.lo1, big, mc, s1, wc);
        let pieces2 = factor_pieces(b2, &cell.lo2, big, mc, s2, wc);
        let cells_c1 = (big as f64).powi(d1 as i32);
        let cells_c2 = (big as f64).powi(d2 as i32);
        let da = pieces1.iter().map(|p| p.mass).sum::<f64>() / cells_c1;
        let db = pieces2.iter().map(|p| p.mass).sum::<f64>() / cells_c2;
        let cell_measure = cells_c1 * cells_c2 / h_pow;
        let mut post = 0.0;
        let mut var = 0.0;
        let mut rect_mass = 0.0;
        let mut total_measure = 0.0;
        for p2 in &pieces2 {
            for p1 in &pieces1 {
                let meas = p1.cells * p2.cells / h_pow;
                total_measure += meas;
                post += (p1.delta * p1.delta + p2.delta * p2.delta) * meas;
                var += ((p1.delta - da).powi(2) + (p2.delta - db).powi(2)) * meas;
                let (class, df1, df2) = if p1.full && p2.full {
                    let r1 = p1.defect.unwrap();
                    let r2 = p2.defect.unwrap();
                    let c = if r1 <= eta && r2 <= eta {
                        CellClass::Uniform
                    } else {
                        CellClass::NonUniform
                    };
                    (c, Some(r1), Some(r2))
                } else {
                    rect_mass += meas;
                    (CellClass::Rectangle, None, None)
                };
                cells_out.push(PartitionCell {
                    lo1: p1.lo.clone(),
                    size1: p1.size.clone(),
                    lo2: p2.lo.clone(),
                    size2: p2.size.clone(),
                    scale_index: j + 1,
                    class,
                    delta1: p1.delta,
                    delta2: p2.delta,
                    defect1: df1,
                    defect2: df2,
                });
            }
        }
        let pre = (da * da + db * db) * cell_measure;
        if (post - pre - var).abs() > 1e-12 * (1.0 + post.abs() + pre.abs()) {
            return Err(LabError::hypothesis(format!(
                "refinement energy decomposition out of balance by {:.3e}",
                (post - pre - var).abs()
            )));
        }
        if (total_measure - cell_measure).abs() > 1e-12 * (1.0 + cell_measure) {
            return Err(LabError::hypothesis("refined pieces fail to tile their cell"));
        }
        if 0.5 * var < eta.powi(4) / 128.0 * cell_measure - 1e-12 {
            return Err(LabError::hypothesis(format!(
                "energy gain {:.3e} under the guaranteed eta^4/128 per unit measure",
                0.5 * var / cell_measure
            )));
        }
        if rect_mass > 16.0 * (mc as f64 / big as f64) * cell_measure + 1e-12 {
            return Err(LabError::hypothesis(format!(
                "remainder mass {:.3e} exceeds 16 L_{{j+1}}/L_j per cell",
                rect_mass / cell_measure
            )));
        }
    }
    let new_energy = partition_energy(&cells_out, n);
    if new_energy + 1e-12 < partition.energy {
        return Err(LabError::hypothesis("energy decreased across a refinement"));
    }
    let mut out = ScalePartition {
        n,
        d1,
        d2,
        scales: partition.scales.clone(),
        cell_sides: partition.cell_sides.clone(),
        eta: partition.eta,
        level: j + 1,
        cells: cells_out,
        energy: new_energy,
        trace: partition.trace.clone(),
    };
    let (nm, rm) = (out.n_mass(), out.r_mass());
    out.trace.push(RoundRecord {
        round: j + 1,
        refined,
        n_mass: nm,
        r_mass: rm,
        energy: new_energy,
        captures,
    });
    Ok(out)
}

fn trace_line(partition: &ScalePartition) -> String {
    let es: Vec<String> = partition
        .trace
        .iter()
        .map(|r| format!("{:.6}", r.energy))
        .collect();
    format!(
        "energy trace [{}], non-uniform mass {:.6}",
        es.join(", "),
        partition.n_mass()
    )
}

/// Runs refinement rounds until the non-uniform mass drops to `eta/2`,
/// verifying on exit that rectangle mass obeys the same bound. The round
/// budget `ceil(256 eta^-5)` is a hard cap; exhausting the scale sequence
/// first reports the energy trace gathered so far.
pub fn regularize(
    b1: &GridFunction,
    b2: &GridFunction,
    scales: &[f64],
    eta: f64,
) -> Result<ScalePartition> {
    let mut part = ScalePartition::new(b1, b2, scales, eta)?;
    let round_cap = (256.0 * eta.powi(-5)).ceil() as usize;
    loop {
        if part.n_mass() <= eta / 2.0 + 1e-12 {
            let rm = part.r_mass();
            if rm > eta / 2.0 + 1e-12 {
                return Err(LabError::ScalesExhausted {
                    context: format!(
                        "remainder mass {:.6} above eta/2 = {:.6} at termination; {}",
                        rm,
                        eta / 2.0,
                        trace_line(&part)
                    ),
                });
            }
            return Ok(part);
        }
        if part.level >= round_cap {
            return Err(LabError::hypothesis(format!(
                "refinement failed to terminate within {} rounds",
                round_cap
            )));
        }
        let next = match part.scales.get(part.level + 1) {
            Some(&l) => l,
            None => {
                return Err(LabError::ScalesExhausted {
                    context: format!("scale sequence exhausted; {}", trace_line(&part)),
                })
            }
        };
        let tl = trace_line(&part);
        part = refine_nonuniform(&part, b1, b2, eta, next).map_err(|e| match e {
            LabError::ScalesExhausted { context } => LabError::ScalesExhausted {
                context: format!("{}; {}", context, tl),
            },
            other => other,
        })?;
    }
}

/// Tuning knobs shared by the dichotomy test and the increment search.
#[derive(Clone, Debug, Serialize)]
pub struct DichotomyParams {
    /// The count is certified when the weighted window-pair norm stays below
    /// `threshold_coeff * alpha^4`.
    pub threshold_coeff: f64,
    /// Increment targets are `inverse_c * norm^8` with the measured norm.
    pub inverse_c: f64,
    /// Node budget handed to the counting quadrature.
    pub budget: usize,
    pub seed: u64,
    /// Cap on the number of windows scanned per sweep.
    pub max_scan: usize,
    /// Operation cap for the pair-norm lattice; the window stride doubles
    /// until the estimated cost fits.
    pub norm_cost_cap: f64,
}

impl Default for DichotomyParams {
    fn default() -> Self {
        DichotomyParams {
            threshold_coeff: 0.125,
            inverse_c: 2f64.powi(-16),
            budget: 16,
            seed: 0,
            max_scan: 200_000,
            norm_cost_cap: 3e9,
        }
    }
}

/// Pair-norm lattice stride whose estimated cost fits the cap, starting from
/// the operator's default `l n / 4` and doubling.
fn capped_norm_stride(n: usize, d1: usize, d2: usize, l: f64, cap: f64) -> usize {
    let w = (l * n as f64).round().max(1.0);
    let band = (l * n as f64).ceil() + 1.0;
    let mut stride = ((l * n as f64 / 4.0).round() as usize).max(1);
    loop {
        let npos = n.div_ceil(stride) as f64;
        let cost = npos.powi(d1 as i32)
            * (2.0 * band + 1.0).powi(d2 as i32)
            / 2.0
            * (n as f64).powi(d2 as i32)
            * w.powi(d1 as i32);
        if cost <= cap || stride >= n {
            return stride;
        }
        stride *= 2;
    }
}

fn measured_box_norm(g: &GridFunction, d1: usize, l: f64, cap: f64) -> Result<(f64, usize)> {
    let stride = capped_norm_stride(g.n(), d1, g.d() - d1, l, cap);
    let bn = box_norm_strided(g, d1, l, stride)?;
    Ok((bn, stride))
}

/// A window and a pair of cell sets on which the examined set is denser than
/// its ambient density by `delta`.
#[derive(Clone, Debug, Serialize)]
pub struct IncrementWitness {
    pub q1_lo: Vec<usize>,
    pub q2_lo: Vec<usize>,
    pub side: usize,
    /// Window-local flat cell indices of the first conditioning set.
    pub b1_cells: Vec<usize>,
    pub b2_cells: Vec<usize>,
    pub baseline: f64,
    pub achieved: f64,
    pub delta: f64,
    pub target: f64,
    pub box_norm: f64,
    pub window_mean: f64,
    /// Which sign quadrant of the level-set split carried the gain, if the
    /// direct window mean was not already enough.
    pub quadrant: Option<(usize, usize)>,
    pub split_integrals: Option<[f64; 4]>,
}

fn support_cells(mask: &[bool], n: usize, dd: usize, lo: &[usize], w: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut t = vec![0usize; dd];
    let mut local = 0usize;
    'all: loop {
        let mut gf = 0usize;
        for a in (0..dd).rev() {
            gf = gf * n + lo[a] + t[a];
        }
        if mask[gf] {
            out.push(local);
        }
        local += 1;
        let mut axis = 0;
        loop {
            if axis == dd {
                break 'all;
            }
            t[axis] += 1;
            if t[axis] < w {
                break;
            }
            t[axis] = 0;
            axis += 1;
        }
    }
    out
}

/// Copies the window at `(t1, t2)` into a dense matrix indexed `y * w1 + x`
/// with `x` running over the first-factor cells and `y` over the second.
fn local_matrix(
    f: &GridFunction,
    n: usize,
    d1: usize,
    d2: usize,
    t1: &[usize],
    t2: &[usize],
    w: usize,
) -> Vec<f64> {
    let w1 = w.pow(d1 as u32);
    let w2 = w.pow(d2 as u32);
    let fv = f.values();
    let mut out = vec![0.0; w1 * w2];
    let mut ty = vec![0usize; d2];
    for y in 0..w2 {
        let mut gy = 0usize;
        for a in (0..d2).rev() {
            gy = gy * n + t2[a] + ty[a];
        }
        let mut tx = vec![0usize; d1];
        for x in 0..w1 {
            let mut gx = gy;
            for a in (0..d1).rev() {
                gx = gx * n + t1[a] + tx[a];
            }
            out[y * w1 + x] = fv[gx];
            let mut axis = 0;
            while axis < d1 {
                tx[axis] += 1;
                if tx[axis] < w {
                    break;
                }
                tx[axis] = 0;
                axis += 1;
            }
        }
        let mut axis = 0;
        while axis < d2 {
            ty[axis] += 1;
            if ty[axis] < w {
                break;
            }
            ty[axis] = 0;
            axis += 1;
        }
    }
    out
}

fn level_thresholds(p: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = p.iter().copied().filter(|&x| x > 0.0).collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v.dedup_by(|a, b| (*a - *b).abs() <= 1e-12);
    if v.len() > 64 {
        let step = v.len() as f64 / 64.0;
        v = (0..64).map(|i| v[(i as f64 * step) as usize]).collect();
    }
    v
}

struct SearchContext {
    m1: Vec<bool>,
    m2: Vec<bool>,
    beta1: f64,
    beta2: f64,
}

fn search_validate(f: &GridFunction, nu1: &GridFunction, nu2: &GridFunction) -> Result<SearchContext> {
    let d1 = nu1.d();
    let d2 = nu2.d();
    if f.d() != d1 + d2 {
        return Err(LabError::shape("function does not split over the factors"));
    }
    let n = f.n();
    if nu1.n() != n || nu2.n() != n {
        return Err(LabError::shape("weights live on a different grid"));
    }
    let m1: Vec<bool> = nu1.values().iter().map(|&v| v > 1e-12).collect();
    let m2: Vec<bool> = nu2.values().iter().map(|&v| v > 1e-12).collect();
    let c1 = m1.iter().filter(|&&x| x).count();
    let c2 = m2.iter().filter(|&&x| x).count();
    if c1 == 0 || c2 == 0 {
        return Err(LabError::BadSetSpec {
            context: "conditioning weight has empty support".into(),
        });
    }
    let beta1 = c1 as f64 / m1.len() as f64;
    let beta2 = c2 as f64 / m2.len() as f64;
    for (nu, beta, name) in [(nu1, beta1, "first"), (nu2, beta2, "second")] {
        for (i, &v) in nu.values().iter().enumerate() {
            if v > 1e-12 && (v * beta - 1.0).abs() > 1e-6 {
                return Err(LabError::param(format!(
                    "{name} weight must be the indicator normalized by its density (cell {})",
                    i
                )));
            }
        }
    }
    let n1c = n.pow(d1 as u32);
    let mut bal = 0.0;
    for (i, &x) in f.values().iter().enumerate() {
        if !(m1[i % n1c] && m2[i / n1c]) {
            if x.abs() > 1e-9 {
                return Err(LabError::param(
                    "function must vanish outside the conditioning product",
                ));
            }
            continue;
        }
        bal += x;
    }
    let support = c1 as f64 * c2 as f64;
    if (bal / support).abs() > 1e-9 * (1.0 + f.max_abs()) {
        return Err(LabError::param(format!(
            "increment search needs a balanced input; weighted mean is {:.3e}",
            bal / support
        )));
    }
    Ok(SearchContext { m1, m2, beta1, beta2 })
}

/// Searches for a window and level-set pair on which the balanced function
/// `f` concentrates. `nu1` and `nu2` are the normalized conditioning weights
/// (indicator over its density); `f` must vanish off their product and have
/// zero mean against them. Returns `None` when the weighted window-pair norm
/// of `f` at window scale `l` is below `eta`; otherwise produces a witness
/// with density gain at least `inverse_c * norm^8`, first trying the raw
/// window mean and then the sign/level-set decomposition of a near-extremal
/// product slice.
pub fn inverse_search(
    f: &GridFunction,
    nu1: &GridFunction,
    nu2: &GridFunction,
    l: f64,
    eta: f64,
    baseline: f64,
    params: &DichotomyParams,
) -> Result<Option<IncrementWitness>> {
    if !(eta > 0.0) {
        return Err(LabError::param("norm floor eta must be positive"));
    }
    let ctx = search_validate(f, nu1, nu2)?;
    let d1 = nu1.d();
    let n = f.n();
    let n1c = n.pow(d1 as u32);
    let s1 = (1.0 / ctx.beta1).sqrt();
    let s2 = (1.0 / ctx.beta2).sqrt();
    let g: Vec<f64> = f
        .values()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            if ctx.m1[i % n1c] && ctx.m2[i / n1c] {
                x * s1 * s2
            } else {
                0.0
            }
        })
        .collect();
    let g = GridFunction::new(f.d(), n, g)?;
    let (bn, _) = measured_box_norm(&g, d1, l, params.norm_cost_cap)?;
    if bn < eta {
        return Ok(None);
    }
    search_stages(f, &ctx, d1, l, baseline, bn, params)
}

fn search_stages(
    f: &GridFunction,
    ctx: &SearchContext,
    d1: usize,
    l: f64,
    baseline: f64,
    bn: f64,
    params: &DichotomyParams,
) -> Result<Option<IncrementWitness>> {
    let d = f.d();
    let d2 = d - d1;
    let n = f.n();
    let (m1, m2) = (&ctx.m1, &ctx.m2);
    let (beta1, beta2) = (ctx.beta1, ctx.beta2);
    let target = params.inverse_c * bn.powi(8);
    let w = ((l * n as f64).round() as usize).clamp(1, n);
    let wd = (w as f64).powi(d as i32);
    let norm = beta1 * beta2 * wd;

    let mut stride = ((w as f64 / 4.0).round() as usize).max(1);
    let mut positions: Vec<usize>;
    loop {
        positions = (0..=n - w).step_by(stride).collect();
        if (positions.len() as f64).powi(d as i32) <= params.max_scan as f64 || stride >= n {
            break;
        }
        stride *= 2;
    }
    let p = positions.len();
    let p1n = p.pow(d1 as u32);
    let p2n = p.pow(d2 as u32);
    let corner = |k: usize, dd: usize| -> Vec<usize> {
        let mut out = Vec::with_capacity(dd);
        let mut kk = k;
        for _ in 0..dd {
            out.push(positions[kk % p]);
            kk /= p;
        }
        out
    };
    let size = vec![w; d];
    let sums: Vec<f64> = (0..p1n * p2n)
        .into_par_iter()
        .map(|i| {
            let lo = concat_idx(&corner(i % p1n, d1), &corner(i / p1n, d2));
            box_sum(f, &lo, &size)
        })
        .collect();
    let mut best = 0usize;
    for (i, &s) in sums.iter().enumerate() {
        if s > sums[best] {
            best = i;
        }
    }
    let t1 = corner(best % p1n, d1);
    let t2 = corner(best / p1n, d2);
    let best_mean = sums[best] / norm;
    if best_mean >= target {
        let bc1 = support_cells(m1, n, d1, &t1, w);
        let bc2 = support_cells(m2, n, d2, &t2, w);
        if !bc1.is_empty() && !bc2.is_empty() {
            let delta = sums[best] / (bc1.len() as f64 * bc2.len() as f64);
            if delta >= target {
                return Ok(Some(IncrementWitness {
                    q1_lo: t1,
                    q2_lo: t2,
                    side: w,
                    b1_cells: bc1,
                    b2_cells: bc2,
                    baseline,
                    achieved: baseline + delta,
                    delta,
                    target,
                    box_norm: bn,
                    window_mean: best_mean,
                    quadrant: None,
                    split_integrals: None,
                }));
            }
        }
    }

    // No single window mean carries the norm, so locate the window with the
    // largest local pair-correlation energy on a disjoint lattice and split
    // it by a near-extremal slice.
    let mut stride_b = w;
    let mut pos_b: Vec<usize>;
    loop {
        pos_b = (0..=n - w).step_by(stride_b).collect();
        if (pos_b.len() as f64).powi(d as i32) <= 256.0 || stride_b >= n {
            break;
        }
        stride_b *= 2;
    }
    let pb = pos_b.len();
    let b1n = pb.pow(d1 as u32);
    let b2n = pb.pow(d2 as u32);
    let corner_b = |k: usize, dd: usize| -> Vec<usize> {
        let mut out = Vec::with_capacity(dd);
        let mut kk = k;
        for _ in 0..dd {
            out.push(pos_b[kk % pb]);
            kk /= pb;
        }
        out
    };
    let w1 = w.pow(d1 as u32);
    let w2 = w.pow(d2 as u32);
    let scores: Vec<f64> = (0..b1n * b2n)
        .into_par_iter()
        .map(|i| {
            let fmat = local_matrix(f, n, d1, d2, &corner_b(i % b1n, d1), &corner_b(i / b1n, d2), w);
            let mut acc = 0.0;
            for y in 0..w2 {
                for yp in 0..w2 {
                    let mut mm = 0.0;
                    for x in 0..w1 {
                        mm += fmat[y * w1 + x] * fmat[yp * w1 + x];
                    }
                    mm /= w1 as f64;
                    acc += mm * mm;
                }
            }
            acc / (w2 as f64 * w2 as f64)
        })
        .collect();
    let mut bw = 0usize;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[bw] {
            bw = i;
        }
    }
    let t1 = corner_b(bw % b1n, d1);
    let t2 = corner_b(bw / b1n, d2);
    let fmat = local_matrix(f, n, d1, d2, &t1, &t2, w);

    let mut gram = vec![0.0; w1 * w1];
    for x2 in 0..w1 {
        for x1 in 0..w1 {
            let mut s = 0.0;
            for y in 0..w2 {
                s += fmat[y * w1 + x2] * fmat[y * w1 + x1];
            }
            gram[x2 * w1 + x1] = s;
        }
    }
    let mut b_x1 = 0usize;
    let mut b_y1 = 0usize;
    let mut b_abs = -1.0;
    for y1 in 0..w2 {
        for x1 in 0..w1 {
            let mut s = 0.0;
            for x2 in 0..w1 {
                s += fmat[y1 * w1 + x2] * gram[x2 * w1 + x1];
            }
            if s.abs() > b_abs {
                b_abs = s.abs();
                b_x1 = x1;
                b_y1 = y1;
            }
        }
    }
    let g1: Vec<f64> = (0..w1).map(|x| fmat[b_y1 * w1 + x]).collect();
    let g2: Vec<f64> = (0..w2).map(|y| fmat[y * w1 + b_x1]).collect();

    let mut best_masks: Option<(Vec<bool>, Vec<bool>)> = None;
    let mut best_val = -1.0;
    for sgn1 in [1.0, -1.0] {
        for sgn2 in [1.0, -1.0] {
            let p1: Vec<f64> = g1.iter().map(|&v| (sgn1 * v).max(0.0)).collect();
            let p2: Vec<f64> = g2.iter().map(|&v| (sgn2 * v).max(0.0)).collect();
            for &ta in &level_thresholds(&p1) {
                let u: Vec<bool> = p1.iter().map(|&v| v >= ta - 1e-15).collect();
                let rows: Vec<f64> = (0..w2)
                    .map(|y| {
                        let mut s = 0.0;
                        for x in 0..w1 {
                            if u[x] {
                                s += fmat[y * w1 + x];
                            }
                        }
                        s
                    })
                    .collect();
                for &tb in &level_thresholds(&p2) {
                    let mut val = 0.0;
                    for y in 0..w2 {
                        if p2[y] >= tb - 1e-15 {
                            val += rows[y];
                        }
                    }
                    if val.abs() > best_val {
                        best_val = val.abs();
                        let v: Vec<bool> = p2.iter().map(|&x| x >= tb - 1e-15).collect();
                        best_masks = Some((u.clone(), v));
                    }
                }
            }
        }
    }
    let (u1, v1) = best_masks
        .ok_or_else(|| LabError::hypothesis("level-set search found no candidate sets"))?;

    let sum_w: f64 = fmat.iter().sum();
    let mut s_q = [0.0f64; 4];
    for y in 0..w2 {
        for x in 0..w1 {
            let qi = match (u1[x], v1[y]) {
                (true, true) => 0,
                (true, false) => 1,
                (false, true) => 2,
                (false, false) => 3,
            };
            s_q[qi] += fmat[y * w1 + x];
        }
    }
    let tot: f64 = s_q.iter().sum();
    if (tot - sum_w).abs() > 1e-12 * (1.0 + sum_w.abs()) {
        return Err(LabError::hypothesis("sign-split partition identity violated"));
    }
    let bs1 = support_cells(m1, n, d1, &t1, w);
    let bs2 = support_cells(m2, n, d2, &t2, w);
    let mut pick: Option<(usize, f64, Vec<usize>, Vec<usize>)> = None;
    for qi in 0..4 {
        let take_u = qi < 2;
        let take_v = qi % 2 == 0;
        if s_q[qi] <= 0.0 {
            continue;
        }
        let cell1: Vec<usize> = bs1.iter().copied().filter(|&x| u1[x] == take_u).collect();
        let cell2: Vec<usize> = bs2.iter().copied().filter(|&y| v1[y] == take_v).collect();
        if cell1.is_empty() || cell2.is_empty() {
            continue;
        }
        let dq = s_q[qi] / (cell1.len() as f64 * cell2.len() as f64);
        if pick.as_ref().map_or(true, |p| dq > p.1) {
            pick = Some((qi, dq, cell1, cell2));
        }
    }
    let Some((qi, dq, cell1, cell2)) = pick else {
        return Err(LabError::hypothesis(
            "no sign quadrant carries positive density gain",
        ));
    };
    let quadrant = [(1, 1), (1, 2), (2, 1), (2, 2)][qi];
    Ok(Some(IncrementWitness {
        q1_lo: t1,
        q2_lo: t2,
        side: w,
        b1_cells: cell1,
        b2_cells: cell2,
        baseline,
        achieved: baseline + dq,
        delta: dq,
        target,
        box_norm: bn,
        window_mean: sum_w / norm,
        quadrant: Some(quadrant),
        split_integrals: Some([
            s_q[0] / norm,
            s_q[1] / norm,
            s_q[2] / norm,
            s_q[3] / norm,
        ]),
    }))
}

/// Verdict of the pair-count test on a weighted indicator.
#[derive(Clone, Debug, Serialize)]
pub struct CountCertificate {
    pub claim: f64,
    pub measured: f64,
    pub error_estimate: f64,
    pub satisfied: bool,
    pub alpha: f64,
    pub lambda: f64,
    pub aspect: f64,
    pub box_norm: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, Serialize)]
#[serde(tag = "branch", rename_all = "kebab-case")]
pub enum DichotomyOutcome {
    Certificate(CountCertificate),
    Witness(IncrementWitness),
}

#[derive(Clone, Debug, Serialize)]
pub struct DichotomyReport {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda: f64,
    pub aspect: f64,
    pub eps: f64,
    /// Window scale `eps^4 lambda` used for the norm and the defect audit.
    pub scale: f64,
    pub box_norm: f64,
    /// Stride of the pair-norm window lattice actually used.
    pub norm_stride: usize,
    pub threshold: f64,
    pub defect1: UniformityReport,
    pub defect2: UniformityReport,
    pub outcome: DichotomyOutcome,
}

/// Tests a set `a` inside the product of conditioning sets `b1 x b2`: either
/// the weighted window-pair norm of its balanced part is small and the
/// rectangle count is certified at the `alpha^4`-proportional claim, or the
/// increment search produces a denser window. The conditioning sets must
/// themselves pass the uniformity hypothesis at scale `eps^4 lambda`.
pub fn dichotomy_step(
    a: &GridFunction,
    b1: &GridFunction,
    b2: &GridFunction,
    lambda: f64,
    eps: f64,
    aspect: f64,
    params: &DichotomyParams,
) -> Result<DichotomyReport> {
    let d1 = b1.d();
    let d2 = b2.d();
    if a.d() != d1 + d2 {
        return Err(LabError::shape("set does not split over the factors"));
    }
    let n = a.n();
    if b1.n() != n || b2.n() != n {
        return Err(LabError::shape("factors live on a different grid"));
    }
    for (name, gfn) in [("a", a), ("b1", b1), ("b2", b2)] {
        if gfn
            .values()
            .iter()
            .any(|&v| (v - v.round()).abs() > 1e-9 || !(-1e-9..=1.0 + 1e-9).contains(&v))
        {
            return Err(LabError::param(format!("{name} must be a 0/1 indicator")));
        }
    }
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(LabError::param("eps must lie in (0, 1]"));
    }
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(LabError::param("lambda must lie in (0, 1)"));
    }
    let beta1 = b1.density();
    let beta2 = b2.density();
    if beta1 <= 0.0 || beta2 <= 0.0 {
        return Err(LabError::BadSetSpec {
            context: "conditioning set is empty".into(),
        });
    }
    let n1c = n.pow(d1 as u32);
    let av = a.values();
    let b1v = b1.values();
    let b2v = b2.values();
    for (i, &x) in av.iter().enumerate() {
        if x > 0.5 && (b1v[i % n1c] < 0.5 || b2v[i / n1c] < 0.5) {
            return Err(LabError::BadSetSpec {
                context: "a must lie inside the product of the conditioning sets".into(),
            });
        }
    }
    let alpha = a.density() / (beta1 * beta2);
    let scale = eps.powi(4) * lambda;
    let rep1 = uniformity_defect(b1, scale, None)?;
    let rep2 = uniformity_defect(b2, scale, None)?;
    if rep1.eps_min > eps + 1e-9 || rep2.eps_min > eps + 1e-9 {
        return Err(LabError::hypothesis(format!(
            "conditioning sets must be ({:.3}, {:.4})-uniform; measured defects {:.4} and {:.4}",
            eps, scale, rep1.eps_min, rep2.eps_min
        )));
    }
    let s1 = (1.0 / beta1).sqrt();
    let s2 = (1.0 / beta2).sqrt();
    let len = av.len();
    let mut fvals = vec![0.0; len];
    let mut gvals = vec![0.0; len];
    for i in 0..len {
        let w1 = b1v[i % n1c];
        let w2 = b2v[i / n1c];
        let fx = av[i] - alpha * w1 * w2;
        fvals[i] = fx;
        gvals[i] = fx * (s1 * w1) * (s2 * w2);
    }
    let f_a = GridFunction::new(d1 + d2, n, fvals)?;
    let g = GridFunction::new(d1 + d2, n, gvals)?;
    let (bn, norm_stride) = measured_box_norm(&g, d1, scale, params.norm_cost_cap)?;
    let threshold = params.threshold_coeff * alpha.powi(4);
    let outcome = if bn <= threshold + 1e-12 {
        let gav: Vec<f64> = (0..len)
            .map(|i| av[i] * (s1 * b1v[i % n1c]) * (s2 * b2v[i / n1c]))
            .collect();
        let ga = GridFunction::new(d1 + d2, n, gav)?;
        let count = count_rectangle(
            &ga,
            &ga,
            &ga,
            &ga,
            lambda,
            aspect,
            d1,
            RectangleMethod::Quadrature,
            params.budget,
            params.seed,
        )?;
        let claim = 0.5 * alpha.powi(4);
        DichotomyOutcome::Certificate(CountCertificate {
            claim,
            measured: count.value,
            error_estimate: count.error_estimate,
            satisfied: count.value + count.error_estimate >= claim - 1e-12,
            alpha,
            lambda,
            aspect,
            box_norm: bn,
            threshold,
        })
    } else {
        let nu1 = b1.map(|v| v / beta1);
        let nu2 = b2.map(|v| v / beta2);
        let ctx = search_validate(&f_a, &nu1, &nu2)?;
        match search_stages(&f_a, &ctx, d1, scale, alpha, bn, params)? {
            Some(wit) => DichotomyOutcome::Witness(wit),
            None => {
                return Err(LabError::hypothesis(
                    "window-pair norm above threshold yet the increment search found nothing",
                ))
            }
        }
    };
    Ok(DichotomyReport {
        alpha,
        beta1,
        beta2,
        lambda,
        aspect,
        eps,
        scale,
        box_norm: bn,
        norm_stride,
        threshold,
        defect1: rep1,
        defect2: rep2,
        outcome,
    })
}

/// Settings for the full certify-or-descend pipeline.
#[derive(Clone, Debug, Serialize)]
pub struct PipelineConfig {
    /// Shift scale tried at each iteration, lacunary.
    pub lambda_scales: Vec<f64>,
    /// Scale sequence handed to the regularization, trimmed per grid.
    pub partition_scales: Vec<f64>,
    pub eps: f64,
    pub aspect: f64,
    /// The density margin is `tau = tau_fraction * alpha`.
    pub tau_fraction: f64,
    /// Regularization eta; derived from eps, the densities and tau when unset.
    pub eta_override: Option<f64>,
    pub threshold_coeff: f64,
    pub inverse_c: f64,
    /// Constant in the iteration budget `1 + (1 - alpha) / (c' alpha^32)`.
    pub c_prime: f64,
    pub budget: usize,
    pub seed: u64,
    pub max_iterations: usize,
    /// Draw budget for quadruple extraction after a certificate; 0 disables.
    pub extract_budget: usize,
    pub max_scan: usize,
    pub norm_cost_cap: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            lambda_scales: vec![0.125, 0.0625, 0.03125],
            partition_scales: vec![0.25, 0.0625, 0.015625],
            eps: 1.0,
            aspect: 1.0,
            tau_fraction: 0.3,
            eta_override: None,
            threshold_coeff: 0.125,
            inverse_c: 2f64.powi(-16),
            c_prime: 2f64.powi(-40),
            budget: 16,
            seed: 0,
            max_iterations: 8,
            extract_budget: 100_000,
            max_scan: 200_000,
            norm_cost_cap: 3e9,
        }
    }
}

fn validate_pipeline_config(config: &PipelineConfig) -> Result<()> {
    if config.lambda_scales.is_empty() {
        return Err(LabError::param("at least one shift scale is required"));
    }
    let mut prev = f64::INFINITY;
    for &l in &config.lambda_scales {
        if !(l > 0.0 && l < 1.0) {
            return Err(LabError::param("shift scales must lie in (0, 1)"));
        }
        if prev.is_finite() && l > 0.5 * prev + 1e-12 {
            return Err(LabError::param(format!(
                "shift scales must be lacunary, L_{{j+1}} < L_j / 2: {} follows {}",
                l, prev
            )));
        }
        prev = l;
    }
    if config.partition_scales.is_empty() {
        return Err(LabError::param("at least one partition scale is required"));
    }
    for &l in &config.partition_scales {
        if !(l > 0.0 && l < 1.0) {
            return Err(LabError::param("partition scales must lie in (0, 1)"));
        }
    }
    if !(config.eps > 0.0 && config.eps <= 1.0) {
        return Err(LabError::param("eps must lie in (0, 1]"));
    }
    if !(config.aspect > 0.0 && config.aspect <= 1.0) {
        return Err(LabError::param("aspect must lie in (0, 1]"));
    }
    if !(config.tau_fraction > 0.0 && config.tau_fraction < 1.0) {
        return Err(LabError::param("tau_fraction must lie in (0, 1)"));
    }
    if !(config.threshold_coeff > 0.0 && config.inverse_c > 0.0 && config.c_prime > 0.0) {
        return Err(LabError::param("coefficients must be positive"));
    }
    if config.budget == 0 || config.max_iterations == 0 {
        return Err(LabError::param("budget and max_iterations must be at least 1"));
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct SelectedCell {
    pub lo1: Vec<usize>,
    pub lo2: Vec<usize>,
    pub side: usize,
    pub density: f64,
}

/// One pipeline iteration: the grid it ran on, the regularization outcome,
/// the selected cell and the branch taken.
#[derive(Clone, Debug, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub lambda: f64,
    /// Cumulative side of the working grid relative to the original domain.
    pub absolute_scale: f64,
    pub grid_n: usize,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub tau: f64,
    pub eta: f64,
    pub rounds: usize,
    pub energy: f64,
    pub cell: Option<SelectedCell>,
    pub branch: String,
    pub box_norm: Option<f64>,
    pub threshold: Option<f64>,
    pub achieved: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PipelineOutcome {
    Certificate { certificate: CountCertificate },
    ResolutionBound { reason: String },
}

#[derive(Clone, Debug, Serialize)]
pub struct PipelineReport {
    pub alpha0: f64,
    /// Worst-case iteration count for the starting density.
    pub iteration_budget: f64,
    pub iterations: Vec<IterationRecord>,
    pub outcome: PipelineOutcome,
    pub quadruple: Option<PointQuadruple>,
}

fn mask_grid(d: usize, n: usize, cells: &[usize]) -> Result<GridFunction> {
    let mut v = vec![0.0; n.pow(d as u32)];
    for &c in cells {
        v[c] = 1.0;
    }
    GridFunction::new(d, n, v)
}

/// Runs the certify-or-descend loop: regularize the conditioning sets, pick
/// the densest non-sparse uniform cube, rescale it to the unit cube and run
/// the dichotomy there. A witness restricts to its window and level sets and
/// iterates with the next shift scale; a certificate ends the run, followed
/// by an optional quadruple extraction. Descending below 8 cells per axis
/// stops with a resolution bound instead.
pub fn run_pipeline(
    a: &GridFunction,
    b1: &GridFunction,
    b2: &GridFunction,
    config: &PipelineConfig,
) -> Result<PipelineReport> {
    validate_pipeline_config(config)?;
    let d1 = b1.d();
    let d2 = b2.d();
    if a.d() != d1 + d2 {
        return Err(LabError::shape("set does not split over the factors"));
    }
    if a.n() != b1.n() || b1.n() != b2.n() {
        return Err(LabError::shape("set and factors live on different grids"));
    }
    let beta1_0 = b1.density();
    let beta2_0 = b2.density();
    if beta1_0 <= 0.0 || beta2_0 <= 0.0 {
        return Err(LabError::BadSetSpec {
            context: "conditioning set is empty".into(),
        });
    }
    let alpha0 = a.density() / (beta1_0 * beta2_0);
    if alpha0 <= 0.0 {
        return Err(LabError::BadSetSpec {
            context: "the examined set is empty".into(),
        });
    }
    let iteration_budget = 1.0 + ((1.0 - alpha0) / (config.c_prime * alpha0.powi(32))).ceil();

    let mut cur_a = a.clone();
    let mut cur_b1 = b1.clone();
    let mut cur_b2 = b2.clone();
    let mut absolute_scale = 1.0f64;
    let mut records: Vec<IterationRecord> = Vec::new();
    let mut quadruple = None;

    let outcome = loop {
        let iter = records.len();
        if iter >= config.max_iterations {
            break PipelineOutcome::ResolutionBound {
                reason: format!("iteration cap {} reached", config.max_iterations),
            };
        }
        let Some(&lambda) = config.lambda_scales.get(iter) else {
            break PipelineOutcome::ResolutionBound {
                reason: "shift scale list exhausted".into(),
            };
        };
        let n = cur_a.n();
        let beta1 = cur_b1.density();
        let beta2 = cur_b2.density();
        if beta1 <= 0.0 || beta2 <= 0.0 {
            break PipelineOutcome::ResolutionBound {
                reason: "conditioning support vanished".into(),
            };
        }
        let alpha_bar = cur_a.density() / (beta1 * beta2);
        let tau = config.tau_fraction * alpha_bar;
        let eta = config
            .eta_override
            .unwrap_or(config.eps * beta1 * beta2 * tau / 3.0)
            .clamp(1e-4, 0.9);
        let usable: Vec<f64> = {
            let mut u = Vec::new();
            let mut last = n;
            for &l in &config.partition_scales {
                let c = (l * n as f64).round() as usize;
                if c >= 1 && c < last {
                    u.push(l);
                    last = c;
                }
            }
            u
        };
        if usable.is_empty() {
            break PipelineOutcome::ResolutionBound {
                reason: format!("no partition scale is representable on an n = {} grid", n),
            };
        }
        let part = match regularize(&cur_b1, &cur_b2, &usable, eta) {
            Ok(p) => p,
            Err(e) if e.is_resolution_bound() => {
                break PipelineOutcome::ResolutionBound { reason: e.to_string() }
            }
            Err(e) => return Err(e),
        };
        let mut best: Option<(f64, usize)> = None;
        for (ci, cell) in part.cells.iter().enumerate() {
            if cell.class != CellClass::Uniform {
                continue;
            }
            if cell.delta1 * cell.delta2 < beta1 * beta2 * tau / 3.0 - 1e-12 {
                continue;
            }
            let m1 = box_sum(&cur_b1, &cell.lo1, &cell.size1);
            let m2 = box_sum(&cur_b2, &cell.lo2, &cell.size2);
            if m1 <= 0.0 || m2 <= 0.0 {
                continue;
            }
            let lo = concat_idx(&cell.lo1, &cell.lo2);
            let sz: Vec<usize> = cell.size1.iter().chain(cell.size2.iter()).copied().collect();
            let dens = box_sum(&cur_a, &lo, &sz) / (m1 * m2);
            if best.as_ref().map_or(true, |b| dens > b.0) {
                best = Some((dens, ci));
            }
        }
        let Some((dens, ci)) = best else {
            return Err(LabError::hypothesis(
                "regularization produced no non-sparse uniform cell",
            ));
        };
        if dens < alpha_bar - 2.0 * tau / 3.0 - 1e-9 {
            return Err(LabError::hypothesis(format!(
                "densest admissible cell reaches {:.4}, below alpha - 2 tau / 3 = {:.4}",
                dens,
                alpha_bar - 2.0 * tau / 3.0
            )));
        }
        let cell = part.cells[ci].clone();
        let side = cell.size1[0];
        let selected = SelectedCell {
            lo1: cell.lo1.clone(),
            lo2: cell.lo2.clone(),
            side,
            density: dens,
        };
        let base_record = |branch: &str,
                           bn: Option<f64>,
                           thr: Option<f64>,
                           achieved: Option<f64>| IterationRecord {
            iteration: iter,
            lambda,
            absolute_scale,
            grid_n: n,
            alpha: alpha_bar,
            beta1,
            beta2,
            tau,
            eta,
            rounds: part.level,
            energy: part.energy,
            cell: Some(selected.clone()),
            branch: branch.into(),
            box_norm: bn,
            threshold: thr,
            achieved,
        };
        if side < 8 {
            records.push(base_record("resolution-floor", None, None, None));
            break PipelineOutcome::ResolutionBound {
                reason: format!("selected cell side {} cells is below the 8-cell floor", side),
            };
        }
        let lo_prod = concat_idx(&cell.lo1, &cell.lo2);
        let sub_a = cur_a.extract_box(&lo_prod, side)?;
        let sub_b1 = cur_b1.extract_box(&cell.lo1, side)?;
        let sub_b2 = cur_b2.extract_box(&cell.lo2, side)?;
        let dparams = DichotomyParams {
            threshold_coeff: config.threshold_coeff,
            inverse_c: config.inverse_c,
            budget: config.budget,
            seed: derive_seed(config.seed, iter as u64 + 1),
            max_scan: config.max_scan,
            norm_cost_cap: config.norm_cost_cap,
        };
        let report = match dichotomy_step(
            &sub_a,
            &sub_b1,
            &sub_b2,
            lambda,
            config.eps,
            config.aspect,
            &dparams,
        ) {
            Ok(r) => r,
            Err(e) if e.is_resolution_bound() => {
                records.push(base_record("unresolvable", None, None, None));
                break PipelineOutcome::ResolutionBound { reason: e.to_string() };
            }
            Err(e) => return Err(e),
        };
        match report.outcome {
            DichotomyOutcome::Certificate(cert) => {
                records.push(base_record(
                    "certificate",
                    Some(report.box_norm),
                    Some(report.threshold),
                    None,
                ));
                if config.extract_budget > 0 && cert.measured > 0.0 {
                    quadruple = extract_witness(
                        &sub_a,
                        d1,
                        lambda,
                        config.aspect,
                        config.extract_budget,
                        derive_seed(config.seed, 0x7000 + iter as u64),
                    )?;
                }
                break PipelineOutcome::Certificate { certificate: cert };
            }
            DichotomyOutcome::Witness(wit) => {
                if wit.achieved <= alpha_bar + 1e-12 {
                    return Err(LabError::hypothesis(format!(
                        "witness density {:.4} does not improve on {:.4}",
                        wit.achieved, alpha_bar
                    )));
                }
                records.push(base_record(
                    "witness",
                    Some(report.box_norm),
                    Some(report.threshold),
                    Some(wit.achieved),
                ));
                if wit.side < 8 {
                    break PipelineOutcome::ResolutionBound {
                        reason: format!(
                            "witness window side {} cells is below the 8-cell floor",
                            wit.side
                        ),
                    };
                }
                let wlo = concat_idx(&wit.q1_lo, &wit.q2_lo);
                let win_a = sub_a.extract_box(&wlo, wit.side)?;
                let wb1 = mask_grid(d1, wit.side, &wit.b1_cells)?;
                let wb2 = mask_grid(d2, wit.side, &wit.b2_cells)?;
                let w1c = wit.side.pow(d1 as u32);
                let mut masked = win_a;
                for (i, v) in masked.values_mut().iter_mut().enumerate() {
                    *v *= wb1.values()[i % w1c] * wb2.values()[i / w1c];
                }
                absolute_scale *= (side as f64 / n as f64) * (wit.side as f64 / side as f64);
                cur_a = masked;
                cur_b1 = wb1;
                cur_b2 = wb2;
            }
        }
    };
    Ok(PipelineReport {
        alpha0,
        iteration_budget,
        iterations: records,
        outcome,
        quadruple,
    })
}

/// A sampled configuration: two corners per factor at the prescribed
/// separation, all four products landing in the set.
#[derive(Clone, Debug, Serialize)]
pub struct PointQuadruple {
    pub x: Vec<f64>,
    pub x_prime: Vec<f64>,
    pub y: Vec<f64>,
    pub y_prime: Vec<f64>,
    /// Cell coordinates of the four corners in slot order.
    pub cells: [Vec<usize>; 4],
    pub draws: usize,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Rejection-samples a configuration witnessing a positive count: a base
/// point per factor and a partner at distance `lambda` (scaled by `aspect`
/// in the second factor), accepted when the set covers all four corners.
pub fn extract_witness(
    a: &GridFunction,
    split: usize,
    lambda: f64,
    aspect: f64,
    budget: usize,
    seed: u64,
) -> Result<Option<PointQuadruple>> {
    let d = a.d();
    if split == 0 || split >= d {
        return Err(LabError::param("split must leave both factors non-empty"));
    }
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(LabError::param("lambda must lie in (0, 1]"));
    }
    if !(aspect > 0.0 && aspect <= 1.0) {
        return Err(LabError::param("aspect must lie in (0, 1]"));
    }
    if budget == 0 {
        return Err(LabError::param("draw budget must be positive"));
    }
    let d1 = split;
    let d2 = d - split;
    let n = a.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for draw in 1..=budget {
        let x: Vec<f64> = (0..d1).map(|_| rng.gen::<f64>()).collect();
        let y: Vec<f64> = (0..d2).map(|_| rng.gen::<f64>()).collect();
        let u = random_unit(&mut rng, d1);
        let v = random_unit(&mut rng, d2);
        let xp: Vec<f64> = x.iter().zip(&u).map(|(c, dir)| c + lambda * dir).collect();
        let yp: Vec<f64> = y
            .iter()
            .zip(&v)
            .map(|(c, dir)| c + aspect * lambda * dir)
            .collect();
        if xp.iter().chain(yp.iter()).any(|&t| !(0.0..1.0).contains(&t)) {
            continue;
        }
        let corners = [
            (x.as_slice(), y.as_slice()),
            (xp.as_slice(), y.as_slice()),
            (x.as_slice(), yp.as_slice()),
            (xp.as_slice(), yp.as_slice()),
        ];
        let mut ok = true;
        let mut cells: Vec<Vec<usize>> = Vec::with_capacity(4);
        for (cx, cy) in &corners {
            let p: Vec<f64> = cx.iter().chain(cy.iter()).copied().collect();
            if a.at_point(&p) <= 0.5 {
                ok = false;
                break;
            }
            cells.push(
                p.iter()
                    .map(|&t| ((t * n as f64).floor() as usize).min(n - 1))
                    .collect(),
            );
        }
        if ok {
            let cells: [Vec<usize>; 4] = cells.try_into().unwrap();
            return Ok(Some(PointQuadruple {
                x,
                x_prime: xp,
                y,
                y_prime: yp,
                cells,
                draws: draw,
            }));
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_indicator(d: usize, n: usize, p: f64, seed: u64) -> GridFunction {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GridFunction::from_fn(d, n, |_| if rng.gen::<f64>() < p { 1.0 } else { 0.0 }).unwrap()
    }

    fn left_half(d: usize, n: usize) -> GridFunction {
        GridFunction::from_fn(d, n, |idx| if idx[0] < n / 2 { 1.0 } else { 0.0 }).unwrap()
    }

    #[test]
    fn energy_single_cell_matches_densities() {
        let b1 = left_half(1, 32);
        let b2 = GridFunction::constant(1, 32, 1.0).unwrap();
        let part = ScalePartition::new(&b1, &b2, &[0.25], 0.9).unwrap();
        assert_eq!(part.cells.len(), 1);
        assert!((part.energy - 0.5 * (0.25 + 1.0)).abs() < 1e-12);
        let e = energy(&b1, &b2, &part).unwrap();
        assert!((e - part.energy).abs() < 1e-12);
    }

    #[test]
    fn energy_of_full_factors_is_one() {
        let b = GridFunction::constant(2, 16, 1.0).unwrap();
        let part = ScalePartition::new(&b, &b, &[0.25], 0.5).unwrap();
        assert!((part.energy - 1.0).abs() < 1e-12);
    }

    #[test]
    fn refine_without_nonuniform_cells_is_identity() {
        let b1 = random_indicator(1, 64, 0.5, 40);
        let b2 = random_indicator(1, 64, 0.5, 41);
        let part = ScalePartition::new(&b1, &b2, &[0.25, 0.0625], 0.9).unwrap();
        assert_eq!(part.cells[0].class, CellClass::Uniform);
        let refined = refine_nonuniform(&part, &b1, &b2, 0.9, 0.25).unwrap();
        assert_eq!(refined.level, part.level);
        assert_eq!(refined.cells.len(), 1);
        assert!((refined.energy - part.energy).abs() < 1e-15);
    }

    #[test]
    fn refine_halfspace_captures_and_gains() {
        let b1 = left_half(1, 64);
        let b2 = GridFunction::constant(1, 64, 1.0).unwrap();
        let part = ScalePartition::new(&b1, &b2, &[0.25, 0.0625], 0.2).unwrap();
        assert_eq!(part.cells[0].class, CellClass::NonUniform);
        let refined = refine_nonuniform(&part, &b1, &b2, 0.2, 0.25).unwrap();
        assert_eq!(refined.level, 1);
        assert!(refined.trace.last().unwrap().captures[0] > 0.9);
        assert!(refined.n_mass() < 1e-12);
        assert!(refined.r_mass() < 1e-12);
        let gain = refined.energy - part.energy;
        assert!((gain - 0.125).abs() < 1e-12);
        let direct = energy(&b1, &b2, &refined).unwrap() - energy(&b1, &b2, &part).unwrap();
        assert!((direct - 0.125).abs() < 1e-12);
        refined.validate(&b1, &b2).unwrap();
    }

    #[test]
    fn refine_misaligned_boundary_leaves_rectangles() {
        let b1 = GridFunction::from_fn(1, 60, |idx| if idx[0] < 30 { 1.0 } else { 0.0 }).unwrap();
        let b2 = GridFunction::constant(1, 60, 1.0).unwrap();
        let part = ScalePartition::new(&b1, &b2, &[0.22, 0.05], 0.2).unwrap();
        assert_eq!(part.cells[0].class, CellClass::NonUniform);
        let refined = refine_nonuniform(&part, &b1, &b2, 0.2, 0.22).unwrap();
        let rm = refined.r_mass();
        assert!(rm > 0.0);
        assert!(rm <= 16.0 * (13.0 / 60.0) + 1e-12);
        refined.validate(&b1, &b2).unwrap();
        assert!(refined.energy >= part.energy);
    }

    #[test]
    fn partition_rejects_non_lacunary_scales() {
        let b = GridFunction::constant(1, 64, 1.0).unwrap();
        let err = ScalePartition::new(&b, &b, &[0.25, 0.2], 0.5).unwrap_err();
        assert!(err.to_string().contains("L_j / 2"), "{err}");
        let err = ScalePartition::new(&b, &b, &[0.6], 0.5).unwrap_err();
        assert!(err.to_string().contains("L_j / 2"), "{err}");
    }

    #[test]
    fn partition_rejects_sub_cell_scale() {
        let b = GridFunction::constant(1, 16, 1.0).unwrap();
        let err = ScalePartition::new(&b, &b, &[1.0 / 64.0], 0.5).unwrap_err();
        assert!(matches!(err, LabError::Unresolvable { .. }), "{err}");
    }

    #[test]
    fn regularize_random_factors_stop_at_root() {
        let b1 = random_indicator(2, 64, 0.5, 50);
        let b2 = random_indicator(2, 64, 0.5, 51);
        let part = regularize(&b1, &b2, &[0.25, 0.0625], 0.25).unwrap();
        assert_eq!(part.level, 0);
        assert_eq!(part.trace.len(), 1);
        assert!(part.n_mass() <= 0.125 + 1e-12);
    }

    #[test]
    fn regularize_block_structure_terminates_with_uniform_audit() {
        let b1 = GridFunction::from_fn(1, 64, |idx| {
            let x = idx[0];
            if x < 16 {
                1.0
            } else if x < 32 {
                if x % 2 == 0 {
                    1.0
                } else {
                    0.0
                }
            } else if x < 48 {
                if x % 4 == 0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                0.0
            }
        }).unwrap();
        let b2 = GridFunction::constant(1, 64, 1.0).unwrap();
        let eta = 0.2;
        let part = regularize(&b1, &b2, &[0.25, 0.0625], eta).unwrap();
        assert!(part.n_mass() <= eta / 2.0 + 1e-12);
        let wc = part.cell_sides[part.level + 1];
        for cell in &part.cells {
            if cell.class != CellClass::Uniform {
                continue;
            }
            let side = cell.size1[0];
            let f1 = corner_field(&b1, &cell.lo1, side, wc);
            assert!(rms_dev(&f1, cell.delta1) <= eta + 1e-12);
            let f2 = corner_field(&b2, &cell.lo2, side, wc);
            assert!(rms_dev(&f2, cell.delta2) <= eta + 1e-12);
        }
        for pair in part.trace.windows(2) {
            assert!(pair[1].energy >= pair[0].energy - 1e-12);
        }
        part.validate(&b1, &b2).unwrap();
    }

    #[test]
    fn regularize_reports_exhausted_scales_with_trace() {
        let b1 = random_indicator(1, 64, 0.5, 11);
        let b2 = random_indicator(1, 64, 0.5, 12);
        let err = regularize(&b1, &b2, &[0.25, 0.0625], 0.05).unwrap_err();
        match err {
            LabError::ScalesExhausted { context } => {
                assert!(context.contains("energy trace"), "{context}");
            }
            other => panic!("expected exhausted scales, got {other}"),
        }
    }

    #[test]
    fn increment_search_none_below_norm_floor() {
        let f = GridFunction::constant(2, 32, 0.0).unwrap();
        let nu = GridFunction::constant(1, 32, 1.0).unwrap();
        let got = inverse_search(&f, &nu, &nu, 0.25, 0.05, 0.5, &DichotomyParams::default())
            .unwrap();
        assert!(got.is_none());
    }

    #[test]
    fn increment_search_rejects_unbalanced_input() {
        let f = GridFunction::constant(2, 32, 0.1).unwrap();
        let nu = GridFunction::constant(1, 32, 1.0).unwrap();
        let err = inverse_search(&f, &nu, &nu, 0.25, 0.05, 0.5, &DichotomyParams::default())
            .unwrap_err();
        assert!(matches!(err, LabError::InvalidParameter { .. }), "{err}");
    }

    #[test]
    fn increment_search_finds_direct_window() {
        let n = 32;
        let alpha = 1.0 / 16.0;
        let f = GridFunction::from_fn(2, n, |idx| {
            let inside = idx[0] < 8 && idx[1] < 8;
            if inside {
                1.0 - alpha
            } else {
                -alpha
            }
        }).unwrap();
        let nu = GridFunction::constant(1, n, 1.0).unwrap();
        let wit = inverse_search(&f, &nu, &nu, 0.25, 0.05, alpha, &DichotomyParams::default())
            .unwrap()
            .expect("expected a witness");
        assert!(wit.quadrant.is_none());
        assert_eq!(wit.side, 8);
        assert_eq!(wit.b1_cells.len(), 8);
        assert_eq!(wit.b2_cells.len(), 8);
        assert!((wit.achieved - 1.0).abs() < 1e-9, "achieved {}", wit.achieved);
        assert!(wit.delta >= wit.target);
    }

    #[test]
    fn increment_search_level_set_route_on_checkerboard() {
        let n = 32;
        let sign = |c: usize| if (c / 4) % 2 == 0 { 1.0 } else { -1.0 };
        let f = GridFunction::from_fn(2, n, |idx| 0.5 * sign(idx[0]) * sign(idx[1])).unwrap();
        let nu = GridFunction::constant(1, n, 1.0).unwrap();
        let wit = inverse_search(&f, &nu, &nu, 0.25, 0.3, 0.5, &DichotomyParams::default())
            .unwrap()
            .expect("expected a witness");
        assert!((wit.box_norm - 0.5).abs() < 0.05, "norm {}", wit.box_norm);
        assert!(wit.quadrant.is_some());
        assert!((wit.delta - 0.5).abs() < 1e-9, "delta {}", wit.delta);
        assert!((wit.achieved - 1.0).abs() < 1e-9);
        let splits = wit.split_integrals.unwrap();
        let total: f64 = splits.iter().sum();
        assert!((total - wit.window_mean).abs() < 1e-12);
        assert!(wit.delta >= 2f64.powi(-16) * wit.box_norm.powi(8));
    }

    #[test]
    fn dichotomy_certifies_uniform_product() {
        let a = GridFunction::constant(4, 16, 1.0).unwrap();
        let b = GridFunction::constant(2, 16, 1.0).unwrap();
        let report =
            dichotomy_step(&a, &b, &b, 0.125, 1.0, 1.0, &DichotomyParams::default()).unwrap();
        assert!(report.box_norm < 1e-9);
        match report.outcome {
            DichotomyOutcome::Certificate(cert) => {
                assert!(cert.satisfied);
                assert!((cert.claim - 0.5).abs() < 1e-12);
                assert!(cert.measured > 0.6 && cert.measured < 0.8, "{}", cert.measured);
            }
            DichotomyOutcome::Witness(_) => panic!("expected a certificate"),
        }
    }

    #[test]
    fn dichotomy_certifies_random_set_in_random_product() {
        let n = 32;
        let b1 = random_indicator(2, n, 0.75, 21);
        let b2 = random_indicator(2, n, 0.75, 22);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let n2 = n * n;
        let a = GridFunction::from_fn(4, n, |idx| {
            let i1 = idx[0] + n * idx[1];
            let i2 = idx[2] + n * idx[3];
            let thin = if rng.gen::<f64>() < 0.5 { 1.0 } else { 0.0 };
            assert!(i1 < n2 && i2 < n2);
            b1.values()[i1] * b2.values()[i2] * thin
        }).unwrap();
        let params = DichotomyParams {
            threshold_coeff: 25.0,
            ..DichotomyParams::default()
        };
        let report = dichotomy_step(&a, &b1, &b2, 0.125, 1.0, 1.0, &params).unwrap();
        match report.outcome {
            DichotomyOutcome::Certificate(cert) => {
                assert!(cert.satisfied, "measured {} claim {}", cert.measured, cert.claim);
                assert!(cert.measured > cert.claim);
            }
            DichotomyOutcome::Witness(_) => panic!("expected a certificate"),
        }
    }

    #[test]
    fn dichotomy_concentrated_set_yields_witness() {
        let n = 32;
        let a = GridFunction::from_fn(4, n, |idx| {
            if idx.iter().all(|&c| c < 16) {
                1.0
            } else {
                0.0
            }
        }).unwrap();
        let b = GridFunction::constant(2, n, 1.0).unwrap();
        let report =
            dichotomy_step(&a, &b, &b, 0.25, 1.0, 1.0, &DichotomyParams::default()).unwrap();
        match report.outcome {
            DichotomyOutcome::Witness(wit) => {
                assert!(wit.delta >= 2f64.powi(-16) * wit.box_norm.powi(8));
                assert!((wit.achieved - 1.0).abs() < 1e-9, "achieved {}", wit.achieved);
            }
            DichotomyOutcome::Certificate(_) => panic!("expected a witness"),
        }
    }

    #[test]
    fn dichotomy_report_serializes_deterministically() {
        let a = GridFunction::constant(4, 16, 1.0).unwrap();
        let b = GridFunction::constant(2, 16, 1.0).unwrap();
        let params = DichotomyParams::default();
        let r1 = dichotomy_step(&a, &b, &b, 0.125, 1.0, 1.0, &params).unwrap();
        let r2 = dichotomy_step(&a, &b, &b, 0.125, 1.0, 1.0, &params).unwrap();
        let s1 = serde_json::to_string(&r1).unwrap();
        let s2 = serde_json::to_string(&r2).unwrap();
        assert_eq!(s1, s2);
        assert!(s1.contains("\"branch\":\"certificate\""));
    }

    #[test]
    fn pipeline_certifies_full_cube_and_extracts_quadruple() {
        let a = GridFunction::constant(4, 16, 1.0).unwrap();
        let b = GridFunction::constant(2, 16, 1.0).unwrap();
        let config = PipelineConfig {
            lambda_scales: vec![0.125],
            partition_scales: vec![0.25],
            extract_budget: 2000,
            seed: 4,
            ..PipelineConfig::default()
        };
        let report = run_pipeline(&a, &b, &b, &config).unwrap();
        assert!((report.alpha0 - 1.0).abs() < 1e-12);
        assert!((report.iteration_budget - 1.0).abs() < 1e-12);
        assert_eq!(report.iterations.len(), 1);
        assert_eq!(report.iterations[0].branch, "certificate");
        match &report.outcome {
            PipelineOutcome::Certificate { certificate } => assert!(certificate.satisfied),
            other => panic!("expected a certificate, got {other:?}"),
        }
        let quad = report.quadruple.expect("expected a quadruple");
        assert!(quad.draws <= 100, "draws {}", quad.draws);
    }

    #[test]
    fn pipeline_two_blocks_increment_then_certificate() {
        let n = 64;
        let a = GridFunction::from_fn(4, n, |idx| {
            if idx.iter().all(|&c| c < 24) || idx.iter().all(|&c| c >= 32) {
                1.0
            } else {
                0.0
            }
        }).unwrap();
        let b = GridFunction::constant(2, n, 1.0).unwrap();
        let config = PipelineConfig {
            lambda_scales: vec![0.25, 0.125],
            partition_scales: vec![0.25, 0.0625],
            extract_budget: 500,
            seed: 9,
            ..PipelineConfig::default()
        };
        let report = run_pipeline(&a, &b, &b, &config).unwrap();
        assert_eq!(report.iterations.len(), 2);
        assert_eq!(report.iterations[0].branch, "witness");
        assert!(report.iterations[0].achieved.unwrap() > 0.9);
        assert_eq!(report.iterations[1].branch, "certificate");
        assert!(report.iterations[1].alpha > report.iterations[0].alpha);
        assert!((report.iterations[1].absolute_scale - 0.25).abs() < 1e-12);
        match &report.outcome {
            PipelineOutcome::Certificate { certificate } => {
                assert!(certificate.satisfied);
                assert!(certificate.measured > 0.6);
            }
            other => panic!("expected a certificate, got {other:?}"),
        }
        assert!(report.quadruple.is_some());
    }

    #[test]
    fn pipeline_selects_dense_half_before_certifying() {
        let n = 64;
        let b1 = GridFunction::from_fn(2, n, |idx| if idx[0] < 32 { 1.0 } else { 0.0 }).unwrap();
        let b2 = GridFunction::constant(2, n, 1.0).unwrap();
        let n2 = n * n;
        let a = GridFunction::from_fn(4, n, |idx| {
            let i1 = idx[0] + n * idx[1];
            assert!(i1 < n2);
            b1.values()[i1]
        }).unwrap();
        let config = PipelineConfig {
            lambda_scales: vec![0.125],
            partition_scales: vec![0.25, 0.0625],
            extract_budget: 0,
            seed: 2,
            ..PipelineConfig::default()
        };
        let report = run_pipeline(&a, &b1, &b2, &config).unwrap();
        assert_eq!(report.iterations.len(), 1);
        let rec = &report.iterations[0];
        assert_eq!(rec.branch, "certificate");
        assert_eq!(rec.rounds, 1);
        let cell = rec.cell.as_ref().unwrap();
        assert_eq!(cell.side, 16);
        assert!(cell.lo1[0] <= 16);
        assert!((cell.density - 1.0).abs() < 1e-12);
        match &report.outcome {
            PipelineOutcome::Certificate { certificate } => assert!(certificate.satisfied),
            other => panic!("expected a certificate, got {other:?}"),
        }
    }

    #[test]
    fn pipeline_rejects_bad_scale_lists() {
        let a = GridFunction::constant(2, 16, 1.0).unwrap();
        let b = GridFunction::constant(1, 16, 1.0).unwrap();
        let config = PipelineConfig {
            lambda_scales: vec![0.25, 0.2],
            ..PipelineConfig::default()
        };
        let err = run_pipeline(&a, &b, &b, &config).unwrap_err();
        assert!(err.to_string().contains("lacunary"), "{err}");
        let config = PipelineConfig {
            partition_scales: vec![],
            ..PipelineConfig::default()
        };
        assert!(run_pipeline(&a, &b, &b, &config).is_err());
    }

    #[test]
    fn quadruple_extraction_on_full_grid_is_deterministic() {
        let a = GridFunction::constant(2, 16, 1.0).unwrap();
        let q1 = extract_witness(&a, 1, 0.25, 1.0, 200, 5).unwrap().unwrap();
        let q2 = extract_witness(&a, 1, 0.25, 1.0, 200, 5).unwrap().unwrap();
        assert_eq!(q1.draws, q2.draws);
        assert_eq!(q1.x, q2.x);
        let dx: f64 = q1
            .x
            .iter()
            .zip(&q1.x_prime)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!((dx - 0.25).abs() < 1e-12);
        let dy: f64 = q1
            .y
            .iter()
            .zip(&q1.y_prime)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!((dy - 0.25).abs() < 1e-12);
    }

    #[test]
    fn quadruple_extraction_respects_the_set() {
        let a = random_indicator(2, 32, 0.6, 7);
        let quad = extract_witness(&a, 1, 0.125, 1.0, 20_000, 8)
            .unwrap()
            .expect("expected a quadruple");
        for cell in &quad.cells {
            assert_eq!(a.get(cell), 1.0);
        }
    }
}
