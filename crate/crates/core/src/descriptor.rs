//! ESF-640 global shape descriptor and Pearson similarity.
//!
//! The descriptor concatenates ten 64-bin histograms built from randomly
//! sampled point triples: point-pair distances split by surface occupancy
//! (in/out/mixed), the occupied fraction of each sampled segment, triangle
//! areas (in/out/mixed), and triangle angles (in/out/mixed). Occupancy is
//! judged against a 64x64x64 voxel grid over the patch bounding cube.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud::{Point3, PointCloud3};
use crate::error::{Error, Result};
use crate::grid::PatchId;
use crate::scalar::Scalar;

pub const BIN_COUNT: usize = 640;
const HIST_BINS: usize = 64;
const GRID_RES: usize = 64;

// sub-histogram layout
const H_D2_IN: usize = 0;
const H_D2_OUT: usize = 1;
const H_D2_MIXED: usize = 2;
const H_D2_RATIO: usize = 3;
const H_D3_IN: usize = 4;
const H_D3_OUT: usize = 5;
const H_D3_MIXED: usize = 6;
const H_A3_IN: usize = 7;
const H_A3_OUT: usize = 8;
const H_A3_MIXED: usize = 9;

#[derive(Clone, Copy, PartialEq, Eq)]
enum SegmentClass {
    In,
    Out,
    Mixed,
}

/// 640-bin normalized shape histogram with Pearson terms precomputed.
#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor640<T> {
    bins: Vec<T>,
    sample_count: usize,
    // mean-centered bins and their norm, computed once so repeated Pearson
    // comparisons cost one dot product
    centered: Vec<T>,
    norm: T,
}

impl<T: Scalar> Descriptor640<T> {
    /// Wraps a raw 640-bin vector. Used for comparison experiments and
    /// tests; `compute_esf` is the production constructor.
    pub fn from_bins(bins: Vec<T>) -> Result<Self> {
        if bins.len() != BIN_COUNT {
            return Err(Error::Parameter(format!(
                "descriptor needs {BIN_COUNT} bins, got {}",
                bins.len()
            )));
        }
        Ok(Self::finish(bins, 0))
    }

    fn finish(bins: Vec<T>, sample_count: usize) -> Self {
        let mean = bins.iter().fold(T::zero(), |a, &b| a + b) / T::of_usize(BIN_COUNT);
        let centered: Vec<T> = bins.iter().map(|&b| b - mean).collect();
        let norm = centered.iter().fold(T::zero(), |a, &c| a + c * c).sqrt();
        Descriptor640 {
            bins,
            sample_count,
            centered,
            norm,
        }
    }

    pub fn bins(&self) -> &[T] {
        &self.bins
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }
}

/// Pearson correlation coefficient between two descriptors.
///
/// Symmetric, in [-1, 1] up to rounding, and invariant to positive affine
/// rescaling of either argument.
pub fn pearson<T: Scalar>(x: &Descriptor640<T>, y: &Descriptor640<T>) -> Result<T> {
    if x.norm == T::zero() || y.norm == T::zero() {
        return Err(Error::ZeroVariance);
    }
    let mut dot = T::zero();
    for (a, b) in x.centered.iter().zip(y.centered.iter()) {
        dot += *a * *b;
    }
    Ok(dot / (x.norm * y.norm))
}

/// Deterministic per-patch sampling seed: base seed mixed with the patch id
/// and a caller-chosen salt (one salt per cloud keeps the two grids'
/// samplers decorrelated).
pub fn patch_seed(base: u64, id: PatchId, salt: u64) -> u64 {
    let id_bits = ((id.0 as u32 as u64) << 32) | (id.1 as u32 as u64);
    // splitmix64 finalizer
    let mut z = base ^ id_bits.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// 64x64x64 boolean occupancy grid over a patch bounding cube.
pub struct OccupancyGrid<T> {
    bits: Vec<u64>,
    origin: Vector3<T>,
    cell: T,
}

impl<T: Scalar> OccupancyGrid<T> {
    pub fn build(cloud: &PointCloud3<T>) -> Option<Self> {
        let (lo, hi) = cloud.bounds()?;
        let extent = (hi.x - lo.x).max(hi.y - lo.y).max(hi.z - lo.z);
        // degenerate clouds still get a valid cube
        let side = if extent > T::zero() { extent } else { T::one() };
        let cell = side / T::of_usize(GRID_RES);
        let mut grid = OccupancyGrid {
            bits: vec![0u64; GRID_RES * GRID_RES * GRID_RES / 64],
            origin: lo.to_vector(),
            cell,
        };
        for p in cloud.iter() {
            let v = grid.voxel_of(p.to_vector());
            grid.set(v);
        }
        Some(grid)
    }

    fn voxel_of(&self, p: Vector3<T>) -> [i32; 3] {
        let mut out = [0i32; 3];
        for a in 0..3 {
            let idx = ((p[a] - self.origin[a]) / self.cell).floor().as_f64() as i32;
            out[a] = idx.clamp(0, GRID_RES as i32 - 1);
        }
        out
    }

    fn bit_index(v: [i32; 3]) -> usize {
        (v[0] as usize * GRID_RES + v[1] as usize) * GRID_RES + v[2] as usize
    }

    fn set(&mut self, v: [i32; 3]) {
        let i = Self::bit_index(v);
        self.bits[i / 64] |= 1 << (i % 64);
    }

    pub fn occupied(&self, v: [i32; 3]) -> bool {
        let i = Self::bit_index(v);
        self.bits[i / 64] & (1 << (i % 64)) != 0
    }

    /// Counts voxels strictly between the endpoints' voxels along a segment
    /// (3D-DDA traversal). Returns (occupied, total).
    fn interior_occupancy(&self, p: Vector3<T>, q: Vector3<T>) -> (usize, usize) {
        let start = self.voxel_of(p);
        let end = self.voxel_of(q);
        if start == end {
            return (0, 0);
        }
        let d = q - p;
        let mut voxel = start;
        let mut step = [0i32; 3];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for a in 0..3 {
            let da = d[a].as_f64();
            if da > 0.0 {
                step[a] = 1;
                let boundary = self.origin[a] + self.cell * T::of(voxel[a] as f64 + 1.0);
                t_max[a] = (boundary - p[a]).as_f64() / da;
                t_delta[a] = self.cell.as_f64() / da;
            } else if da < 0.0 {
                step[a] = -1;
                let boundary = self.origin[a] + self.cell * T::of(voxel[a] as f64);
                t_max[a] = (boundary - p[a]).as_f64() / da;
                t_delta[a] = self.cell.as_f64() / -da;
            }
        }
        let mut occupied = 0usize;
        let mut total = 0usize;
        // segment crosses at most 3*GRID_RES voxel boundaries
        for _ in 0..(3 * GRID_RES) {
            let axis = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
                0
            } else if t_max[1] <= t_max[2] {
                1
            } else {
                2
            };
            voxel[axis] += step[axis];
            t_max[axis] += t_delta[axis];
            if voxel == end {
                break;
            }
            if voxel[axis] < 0 || voxel[axis] >= GRID_RES as i32 {
                break;
            }
            total += 1;
            if self.occupied(voxel) {
                occupied += 1;
            }
        }
        (occupied, total)
    }

    fn classify(&self, p: Vector3<T>, q: Vector3<T>) -> (SegmentClass, f64) {
        let (occ, total) = self.interior_occupancy(p, q);
        if total == 0 {
            // endpoints in the same or adjacent voxels: fully on surface
            return (SegmentClass::In, 1.0);
        }
        let ratio = occ as f64 / total as f64;
        let class = if occ == total {
            SegmentClass::In
        } else if occ == 0 {
            SegmentClass::Out
        } else {
            SegmentClass::Mixed
        };
        (class, ratio)
    }
}

fn combine_triangle(classes: [SegmentClass; 3]) -> SegmentClass {
    if classes.iter().all(|&c| c == SegmentClass::In) {
        SegmentClass::In
    } else if classes.iter().all(|&c| c == SegmentClass::Out) {
        SegmentClass::Out
    } else {
        SegmentClass::Mixed
    }
}

fn d2_hist(class: SegmentClass) -> usize {
    match class {
        SegmentClass::In => H_D2_IN,
        SegmentClass::Out => H_D2_OUT,
        SegmentClass::Mixed => H_D2_MIXED,
    }
}

fn d3_hist(class: SegmentClass) -> usize {
    match class {
        SegmentClass::In => H_D3_IN,
        SegmentClass::Out => H_D3_OUT,
        SegmentClass::Mixed => H_D3_MIXED,
    }
}

fn a3_hist(class: SegmentClass) -> usize {
    match class {
        SegmentClass::In => H_A3_IN,
        SegmentClass::Out => H_A3_OUT,
        SegmentClass::Mixed => H_A3_MIXED,
    }
}

fn bin_of(value: f64, range: f64) -> usize {
    if range <= 0.0 || !value.is_finite() {
        return 0;
    }
    ((value / range * HIST_BINS as f64) as usize).min(HIST_BINS - 1)
}

/// Computes the ESF-640 descriptor of a patch by sampling `n_samples` point
/// triples with the given seed. Deterministic for a fixed seed.
pub fn compute_esf<T: Scalar>(
    patch: &PointCloud3<T>,
    n_samples: usize,
    seed: u64,
) -> Result<Descriptor640<T>> {
    let n = patch.len();
    if n < 3 {
        return Err(Error::Descriptor(n));
    }
    let n_samples = n_samples.max(1);
    let grid = OccupancyGrid::build(patch).expect("nonempty patch");
    let (lo, hi) = patch.bounds().expect("nonempty patch");
    let side = (hi.x - lo.x).max(hi.y - lo.y).max(hi.z - lo.z).as_f64();
    let diag = if side > 0.0 { side * 3.0f64.sqrt() } else { 1.0 };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d2: Vec<(f64, SegmentClass)> = Vec::with_capacity(n_samples * 3);
    let mut ratios: Vec<f64> = Vec::with_capacity(n_samples * 3);
    let mut d3: Vec<(f64, SegmentClass)> = Vec::with_capacity(n_samples);
    let mut a3: Vec<(f64, SegmentClass)> = Vec::with_capacity(n_samples * 3);

    for _ in 0..n_samples {
        let (i, j, k) = loop {
            let i = rng.gen_range(0..n);
            let j = rng.gen_range(0..n);
            let k = rng.gen_range(0..n);
            if i != j && j != k && i != k {
                break (i, j, k);
            }
        };
        let pa = patch.points[i].to_vector();
        let pb = patch.points[j].to_vector();
        let pc = patch.points[k].to_vector();

        let edges = [(pa, pb), (pb, pc), (pa, pc)];
        let mut classes = [SegmentClass::Mixed; 3];
        for (e, &(u, v)) in edges.iter().enumerate() {
            let (class, ratio) = grid.classify(u, v);
            classes[e] = class;
            d2.push(((u - v).norm().as_f64(), class));
            ratios.push(ratio);
        }

        let area = (pb - pa).cross(&(pc - pa)).norm().as_f64() * 0.5;
        d3.push((area.sqrt(), combine_triangle(classes)));

        // angle at each vertex, classified by the opposite edge
        a3.push((angle_at(pa, pb, pc), classes[1]));
        a3.push((angle_at(pb, pa, pc), classes[2]));
        a3.push((angle_at(pc, pa, pb), classes[0]));
    }

    let max_sqrt_area = d3.iter().fold(0.0f64, |m, &(v, _)| m.max(v));

    let mut bins = vec![T::zero(); BIN_COUNT];
    let mut add = |hist: usize, bin: usize| {
        bins[hist * HIST_BINS + bin] += T::one();
    };
    for &(v, c) in &d2 {
        add(d2_hist(c), bin_of(v, diag));
    }
    for &r in &ratios {
        add(H_D2_RATIO, bin_of(r, 1.0));
    }
    for &(v, c) in &d3 {
        add(d3_hist(c), bin_of(v, max_sqrt_area));
    }
    for &(v, c) in &a3 {
        add(a3_hist(c), bin_of(v, std::f64::consts::PI));
    }

    // normalize each sub-histogram to unit mass (all-zero stays all-zero)
    for h in 0..BIN_COUNT / HIST_BINS {
        let slice = &mut bins[h * HIST_BINS..(h + 1) * HIST_BINS];
        let total = slice.iter().fold(T::zero(), |a, &b| a + b);
        if total > T::zero() {
            for b in slice.iter_mut() {
                *b /= total;
            }
        }
    }

    Ok(Descriptor640::finish(bins, n_samples))
}

/// Angle at `apex` formed by the segments to `u` and `v`, in [0, pi].
fn angle_at<T: Scalar>(apex: Vector3<T>, u: Vector3<T>, v: Vector3<T>) -> f64 {
    let a = u - apex;
    let b = v - apex;
    let na = a.norm().as_f64();
    let nb = b.norm().as_f64();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let cos = (a.dot(&b).as_f64() / (na * nb)).clamp(-1.0, 1.0);
    cos.acos()
}
