//! Normal Distributions Transform registration in 2D and 3D.
//!
//! The target cloud is voxelized into per-cell Gaussians; registration runs
//! Newton iterations on the pose that minimizes the summed negative Gaussian
//! score of the transformed source points, with analytic gradient and
//! Hessian.

use std::collections::HashMap;

use nalgebra::allocator::Allocator;
use nalgebra::{DefaultAllocator, DimDiff, DimName, DimSub, OMatrix, OVector, SMatrix, SVector, U1, U2, U3};

use crate::boundary::Point2;
use crate::cloud::PointCloud3;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::transform::{RigidTransform2, RigidTransform3};

/// Ratio of the smallest to largest covariance eigenvalue enforced per cell.
/// Keeps every cell comfortably above the 1e-3 positive-definiteness floor.
const EIGEN_RATIO_FLOOR: f64 = 0.15;
/// Heavier flattening for the coarse search stage: wide, nearly isotropic
/// Gaussians give the first iterations a smooth long-range pull.
const COARSE_RATIO_FLOOR: f64 = 0.5;
/// Largest rotation step per Newton iteration, radians.
const MAX_ROT_STEP: f64 = 0.35;

#[derive(Clone, Copy, Debug)]
pub struct NdtParams<T> {
    pub cell_size: T,
    pub max_iterations: usize,
    /// Newton step norm below which the iteration stops (meters and radians).
    pub step_epsilon: T,
    /// Score contributed by a source point that falls in an empty cell.
    pub outlier_floor: T,
    pub min_points_per_cell: usize,
}

impl<T: Scalar> Default for NdtParams<T> {
    fn default() -> Self {
        NdtParams {
            cell_size: T::of(2.0),
            max_iterations: 60,
            step_epsilon: T::of(1e-4),
            outlier_floor: T::of(0.05),
            min_points_per_cell: 5,
        }
    }
}

impl<T: Scalar> NdtParams<T> {
    pub fn validate(&self) -> Result<()> {
        if self.cell_size <= T::zero() {
            return Err(Error::Parameter("NDT cell size must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Parameter("NDT needs at least one iteration".into()));
        }
        Ok(())
    }

    pub fn with_cell_size(self, cell_size: T) -> Self {
        NdtParams { cell_size, ..self }
    }
}

#[derive(Clone, Debug)]
pub struct NdtCell<T: Scalar, D: DimName>
where
    DefaultAllocator: Allocator<D> + Allocator<D, D>,
{
    pub mean: OVector<T, D>,
    pub covariance: OMatrix<T, D, D>,
    pub inverse_covariance: OMatrix<T, D, D>,
    pub count: usize,
}

/// Voxelized Gaussian field over a target point set.
pub struct NdtGrid<T: Scalar, D: DimName>
where
    DefaultAllocator: Allocator<D> + Allocator<D, D>,
{
    cell_size: T,
    cells: HashMap<[i64; 3], NdtCell<T, D>>,
    // world-to-lattice motion for grids produced by `transformed`; lookups
    // map the query back into the lattice frame so cell association moves
    // rigidly with the Gaussians
    query_rot: Option<OMatrix<T, D, D>>,
    query_trans: OVector<T, D>,
}

pub type NdtGrid2<T> = NdtGrid<T, U2>;
pub type NdtGrid3<T> = NdtGrid<T, U3>;

impl<T: Scalar, D: DimName> NdtGrid<T, D>
where
    D: DimSub<U1>,
    DefaultAllocator:
        Allocator<D> + Allocator<D, D> + Allocator<U1, D> + Allocator<DimDiff<D, U1>>,
{
    /// Builds the Gaussian field: per-cell mean and covariance over member
    /// points, dropping cells with fewer than `min_points_per_cell` members.
    pub fn build(
        points: &[OVector<T, D>],
        cell_size: T,
        min_points_per_cell: usize,
    ) -> Result<Self> {
        Self::build_with_floor(points, cell_size, min_points_per_cell, T::of(EIGEN_RATIO_FLOOR))
    }

    /// `build` with an explicit eigenvalue-ratio floor for the covariance
    /// regularization (higher floors give smoother, more isotropic fields).
    pub fn build_with_floor(
        points: &[OVector<T, D>],
        cell_size: T,
        min_points_per_cell: usize,
        ratio_floor: T,
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud("NDT target"));
        }
        if cell_size <= T::zero() {
            return Err(Error::Parameter("NDT cell size must be positive".into()));
        }
        let min_count = min_points_per_cell.max(1);

        let mut sums: HashMap<[i64; 3], (OVector<T, D>, usize)> = HashMap::new();
        for p in points {
            let key = cell_key(p, cell_size);
            let entry = sums
                .entry(key)
                .or_insert_with(|| (OVector::<T, D>::zeros(), 0));
            entry.0 += p;
            entry.1 += 1;
        }

        let means: HashMap<[i64; 3], (OVector<T, D>, usize)> = sums
            .into_iter()
            .filter(|(_, (_, n))| *n >= min_count)
            .map(|(k, (s, n))| (k, (s / T::of_usize(n), n)))
            .collect();
        if means.is_empty() {
            return Err(Error::Grid);
        }

        // second pass: centered outer products
        let mut scatter: HashMap<[i64; 3], OMatrix<T, D, D>> = HashMap::new();
        for p in points {
            let key = cell_key(p, cell_size);
            if let Some((mean, _)) = means.get(&key) {
                let q = p - mean;
                *scatter.entry(key).or_insert_with(OMatrix::<T, D, D>::zeros) += &q * q.transpose();
            }
        }

        let mut cells = HashMap::new();
        for (key, (mean, count)) in means {
            let cov = scatter[&key].clone() / T::of_usize(count);
            let (covariance, inverse_covariance) = regularize(cov, cell_size, ratio_floor);
            cells.insert(
                key,
                NdtCell {
                    mean,
                    covariance,
                    inverse_covariance,
                    count,
                },
            );
        }

        Ok(NdtGrid {
            cell_size,
            cells,
            query_rot: None,
            query_trans: OVector::<T, D>::zeros(),
        })
    }

    pub fn cell_size(&self) -> T {
        self.cell_size
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cell_at(&self, key: [i64; 3]) -> Option<&NdtCell<T, D>> {
        self.cells.get(&key)
    }

    /// The Gaussian scoring a query point, honoring any lattice motion.
    pub fn lookup(&self, p: &OVector<T, D>) -> Option<&NdtCell<T, D>> {
        let key = match &self.query_rot {
            None => cell_key(p, self.cell_size),
            Some(inv_rot) => {
                let lattice = inv_rot * (p - &self.query_trans);
                cell_key(&lattice, self.cell_size)
            }
        };
        self.cells.get(&key)
    }

    /// The grid's Gaussian field moved rigidly: means rotated and translated,
    /// covariances conjugated, cell association carried along.
    pub fn transformed(&self, rot: &OMatrix<T, D, D>, trans: &OVector<T, D>) -> Self {
        let cells = self
            .cells
            .iter()
            .map(|(k, c)| {
                (
                    *k,
                    NdtCell {
                        mean: rot * &c.mean + trans,
                        covariance: rot * &c.covariance * rot.transpose(),
                        inverse_covariance: rot * &c.inverse_covariance * rot.transpose(),
                        count: c.count,
                    },
                )
            })
            .collect();
        // compose the new motion with any existing lattice motion
        let prev_rot = self
            .query_rot
            .clone()
            .unwrap_or_else(OMatrix::<T, D, D>::identity);
        let inv = rot.transpose();
        NdtGrid {
            cell_size: self.cell_size,
            cells,
            query_rot: Some(prev_rot * inv),
            query_trans: rot * &self.query_trans + trans,
        }
    }

    /// Score of a single transformed point: `-exp(-0.5 q' Sigma^-1 q)` in an
    /// occupied cell, `-outlier_floor` otherwise. Also reports whether the
    /// point matched a cell.
    fn point_score(&self, p: &OVector<T, D>, outlier_floor: T) -> (T, bool) {
        match self.lookup(p) {
            Some(cell) => {
                let q = p - &cell.mean;
                let m = (q.transpose() * &cell.inverse_covariance * &q)[(0, 0)];
                (-((-m / T::of(2.0)).exp()), true)
            }
            None => (-outlier_floor, false),
        }
    }
}

fn cell_key<T: Scalar, D: DimName>(p: &OVector<T, D>, cell_size: T) -> [i64; 3]
where
    DefaultAllocator: Allocator<D>,
{
    let mut key = [0i64; 3];
    for a in 0..D::dim() {
        key[a] = (p[a] / cell_size).floor().as_f64() as i64;
    }
    key
}

/// Clamps covariance eigenvalues so the smallest is at least
/// `EIGEN_RATIO_FLOOR` times the largest, with an absolute floor for fully
/// degenerate cells. Returns the regularized matrix and its inverse.
fn regularize<T: Scalar, D: DimName>(
    cov: OMatrix<T, D, D>,
    cell_size: T,
    ratio_floor: T,
) -> (OMatrix<T, D, D>, OMatrix<T, D, D>)
where
    D: DimSub<U1>,
    DefaultAllocator:
        Allocator<D> + Allocator<D, D> + Allocator<U1, D> + Allocator<DimDiff<D, U1>>,
{
    let eig = cov.symmetric_eigen();
    let mut max_ev = T::zero();
    for i in 0..D::dim() {
        max_ev = max_ev.max(eig.eigenvalues[i]);
    }
    let degenerate_floor = (cell_size * T::of(1e-3)) * (cell_size * T::of(1e-3));
    if max_ev <= T::zero() {
        max_ev = degenerate_floor;
    }
    let floor = max_ev * ratio_floor;
    let mut vals = eig.eigenvalues.clone();
    let mut inv_vals = vals.clone();
    for i in 0..D::dim() {
        vals[i] = vals[i].max(floor);
        inv_vals[i] = T::one() / vals[i];
    }
    let v = &eig.eigenvectors;
    let cov = v * OMatrix::from_diagonal(&vals) * v.transpose();
    let inv = v * OMatrix::from_diagonal(&inv_vals) * v.transpose();
    (cov, inv)
}

/// Registration outcome; `transform` maps the source frame into the target
/// frame.
#[derive(Clone, Copy, Debug)]
pub struct RegistrationResult<X, T> {
    pub transform: X,
    pub final_score: T,
    pub converged: bool,
    pub iterations: usize,
}

pub type Registration2<T> = RegistrationResult<RigidTransform2<T>, T>;
pub type Registration3<T> = RegistrationResult<RigidTransform3<T>, T>;

/// NDT objective over a 2D point set at the given pose.
pub fn ndt_score_2d<T: Scalar>(
    grid: &NdtGrid<T, U2>,
    source: &[Point2<T>],
    pose: &RigidTransform2<T>,
    outlier_floor: T,
) -> T {
    let pose_vec = SVector::<T, 3>::new(pose.translation().x, pose.translation().y, pose.angle());
    let pts: Vec<SVector<T, 2>> = source.iter().map(|p| SVector::from(p.to_array())).collect();
    score_only_2d(grid, &pts, &pose_vec, outlier_floor).0
}

/// NDT objective over a 3D cloud at the given pose.
pub fn ndt_score_3d<T: Scalar>(
    grid: &NdtGrid<T, U3>,
    source: &PointCloud3<T>,
    pose: &RigidTransform3<T>,
    outlier_floor: T,
) -> T {
    let pose_vec = pose_to_vec6(pose);
    let pts: Vec<SVector<T, 3>> = source.iter().map(|p| p.to_vector()).collect();
    score_only_3d(grid, &pts, &pose_vec, outlier_floor).0
}

fn score_only_2d<T: Scalar>(
    grid: &NdtGrid<T, U2>,
    source: &[SVector<T, 2>],
    pose: &SVector<T, 3>,
    outlier_floor: T,
) -> (T, usize) {
    let (s, c) = pose[2].sin_cos();
    let rot = SMatrix::<T, 2, 2>::new(c, -s, s, c);
    let t = SVector::<T, 2>::new(pose[0], pose[1]);
    let mut score = T::zero();
    let mut matched = 0;
    for p in source {
        let x = rot * p + t;
        let (v, hit) = grid.point_score(&x, outlier_floor);
        score += v;
        matched += hit as usize;
    }
    (score, matched)
}

fn score_only_3d<T: Scalar>(
    grid: &NdtGrid<T, U3>,
    source: &[SVector<T, 3>],
    pose: &SVector<T, 6>,
    outlier_floor: T,
) -> (T, usize) {
    let rot = euler_zyx(pose[3], pose[4], pose[5]);
    let t = SVector::<T, 3>::new(pose[0], pose[1], pose[2]);
    let mut score = T::zero();
    let mut matched = 0;
    for p in source {
        let x = rot * p + t;
        let (v, hit) = grid.point_score(&x, outlier_floor);
        score += v;
        matched += hit as usize;
    }
    (score, matched)
}

/// Score, gradient, and Hessian of the 2D NDT objective over (x, y, yaw),
/// plus the number of source points that matched an occupied cell.
pub fn derivatives_2d<T: Scalar>(
    grid: &NdtGrid<T, U2>,
    source: &[SVector<T, 2>],
    pose: &SVector<T, 3>,
    outlier_floor: T,
) -> (T, SVector<T, 3>, SMatrix<T, 3, 3>, usize) {
    let (s, c) = pose[2].sin_cos();
    let rot = SMatrix::<T, 2, 2>::new(c, -s, s, c);
    let drot = SMatrix::<T, 2, 2>::new(-s, -c, c, -s);
    let t = SVector::<T, 2>::new(pose[0], pose[1]);

    let mut score = T::zero();
    let mut grad = SVector::<T, 3>::zeros();
    let mut hess = SMatrix::<T, 3, 3>::zeros();
    let mut matched = 0;

    for p in source {
        let x = rot * p + t;
        let cell = match grid.lookup(&x) {
            Some(cell) => cell,
            None => {
                score += -outlier_floor;
                continue;
            }
        };
        matched += 1;
        let q = x - cell.mean;
        let a = cell.inverse_covariance;
        let m = (q.transpose() * a * q)[(0, 0)];
        let e = (-m / T::of(2.0)).exp();
        score += -e;

        // jacobian columns of x' wrt (tx, ty, theta)
        let jt = drot * p;
        let mut j = SMatrix::<T, 2, 3>::zeros();
        j[(0, 0)] = T::one();
        j[(1, 1)] = T::one();
        j[(0, 2)] = jt[0];
        j[(1, 2)] = jt[1];

        let aq = a * q; // A q
        let qaj = j.transpose() * aq; // (q' A J_i) per column
        let jaj = j.transpose() * a * j;

        // second derivative of x' is nonzero only in the (theta, theta) slot
        let hx_tt = -(rot * p);
        let q_a_hx = aq.dot(&hx_tt);

        for i in 0..3 {
            grad[i] += e * qaj[i];
            for k in 0..3 {
                let mut h = jaj[(i, k)] - qaj[i] * qaj[k];
                if i == 2 && k == 2 {
                    h += q_a_hx;
                }
                hess[(i, k)] += e * h;
            }
        }
    }
    (score, grad, hess, matched)
}

/// Score, gradient, and Hessian of the 3D NDT objective over
/// (x, y, z, roll, pitch, yaw).
pub fn derivatives_3d<T: Scalar>(
    grid: &NdtGrid<T, U3>,
    source: &[SVector<T, 3>],
    pose: &SVector<T, 6>,
    outlier_floor: T,
) -> (T, SVector<T, 6>, SMatrix<T, 6, 6>, usize) {
    let (roll, pitch, yaw) = (pose[3], pose[4], pose[5]);
    let rx = rot_x(roll);
    let ry = rot_y(pitch);
    let rz = rot_z(yaw);
    let rx1 = rot_x_d1(roll);
    let ry1 = rot_y_d1(pitch);
    let rz1 = rot_z_d1(yaw);
    let rx2 = rot_x_d2(roll);
    let ry2 = rot_y_d2(pitch);
    let rz2 = rot_z_d2(yaw);

    let rot = rz * ry * rx;
    // first derivatives of R wrt (roll, pitch, yaw)
    let dr = [rz * ry * rx1, rz * ry1 * rx, rz1 * ry * rx];
    // upper-triangular second derivatives, indexed [roll..yaw][roll..yaw]
    let h_rr = rz * ry * rx2;
    let h_rp = rz * ry1 * rx1;
    let h_ry = rz1 * ry * rx1;
    let h_pp = rz * ry2 * rx;
    let h_py = rz1 * ry1 * rx;
    let h_yy = rz2 * ry * rx;
    let hr = [
        [h_rr, h_rp, h_ry],
        [h_rp, h_pp, h_py],
        [h_ry, h_py, h_yy],
    ];

    let t = SVector::<T, 3>::new(pose[0], pose[1], pose[2]);

    let mut score = T::zero();
    let mut grad = SVector::<T, 6>::zeros();
    let mut hess = SMatrix::<T, 6, 6>::zeros();
    let mut matched = 0;

    for p in source {
        let x = rot * p + t;
        let cell = match grid.lookup(&x) {
            Some(cell) => cell,
            None => {
                score += -outlier_floor;
                continue;
            }
        };
        matched += 1;
        let q = x - cell.mean;
        let a = cell.inverse_covariance;
        let m = (q.transpose() * a * q)[(0, 0)];
        let e = (-m / T::of(2.0)).exp();
        score += -e;

        // jacobian columns of x' wrt (tx, ty, tz, roll, pitch, yaw)
        let mut j = SMatrix::<T, 3, 6>::zeros();
        j[(0, 0)] = T::one();
        j[(1, 1)] = T::one();
        j[(2, 2)] = T::one();
        for (i, d) in dr.iter().enumerate() {
            j.set_column(3 + i, &(d * p));
        }

        let aq = a * q;
        let qaj = j.transpose() * aq;
        let jaj = j.transpose() * a * j;

        for i in 0..6 {
            grad[i] += e * qaj[i];
            for k in 0..6 {
                let mut h = jaj[(i, k)] - qaj[i] * qaj[k];
                if i >= 3 && k >= 3 {
                    h += aq.dot(&(hr[i - 3][k - 3] * p));
                }
                hess[(i, k)] += e * h;
            }
        }
    }
    (score, grad, hess, matched)
}

fn rot_x<T: Scalar>(a: T) -> SMatrix<T, 3, 3> {
    let (s, c) = a.sin_cos();
    let (z, o) = (T::zero(), T::one());
    SMatrix::<T, 3, 3>::new(o, z, z, z, c, -s, z, s, c)
}

fn rot_x_d1<T: Scalar>(a: T) -> SMatrix<T, 3, 3> {
    let (s, c) = a.sin_cos();
    let z = T::zero();
    SMatrix::<T, 3, 3>::new(z, z, z, z, -s, -c, z, c, -s)
}

fn rot_x_d2<T: Scalar>(a: T) -> SMatrix<T, 3, 3> {
    let (s, c) = a.sin_cos();
    let z = T::zero();
    SMatrix::<T, 3, 3>::new(z, z, z, z, -c, s, z, -s, -c)
}

fn rot_y<T: Scalar>(a: T) -> SMatrix<T, 3, 3> {
    let (s, c) = a.sin_cos();
    let (z, o) = (T::zero(), T::one());
    SMatrix::<T, 3, 3>::new(c, z, s, z, o, z, -s, z, c)
}

fn rot_y_d1<T: Scalar>(a: T) -> SMatrix<T, 3, 3> {
    let (s, c) = a.sin_cos();
    let z = T::zero();
    SMatrix::<T, 3, 3>::new(-s, z, c, z, z, z, -c, z, -s)
}

fn rot_y_d2<T: Scalar>(a: T) -> SMatrix<T, 3, 3> {
    let (s, c) = a.sin_cos();
    let z = T::zero();
    SMatrix::<T, 3, 3>::new(-c, z, -s, z, z, z, s, z, -c)
}

fn rot_z<T: Scalar>(a: T) -> SMatrix<T, 3, 3> {
    let (s, c) = a.sin_cos();
    let (z, o) = (T::zero(), T::one());
    SMatrix::<T, 3, 3>::new(c, -s, z, s, c, z, z, z, o)
}

fn rot_z_d1<T: Scalar>(a: T) -> SMatrix<T, 3, 3> {
    let (s, c) = a.sin_cos();
    let z = T::zero();
    SMatrix::<T, 3, 3>::new(-s, -c, z, c, -s, z, z, z, z)
}

fn rot_z_d2<T: Scalar>(a: T) -> SMatrix<T, 3, 3> {
    let (s, c) = a.sin_cos();
    let z = T::zero();
    SMatrix::<T, 3, 3>::new(-c, s, z, -s, -c, z, z, z, z)
}

/// `R = Rz(yaw) Ry(pitch) Rx(roll)`, matching the quaternion Euler order.
fn euler_zyx<T: Scalar>(roll: T, pitch: T, yaw: T) -> SMatrix<T, 3, 3> {
    rot_z(yaw) * rot_y(pitch) * rot_x(roll)
}

fn pose_to_vec6<T: Scalar>(pose: &RigidTransform3<T>) -> SVector<T, 6> {
    let (roll, pitch, yaw) = pose.euler_angles();
    let t = pose.translation();
    SVector::<T, 6>::new(t.x, t.y, t.z, roll, pitch, yaw)
}

fn vec6_to_pose<T: Scalar>(v: &SVector<T, 6>) -> RigidTransform3<T> {
    RigidTransform3::from_euler(v[3], v[4], v[5], nalgebra::Vector3::new(v[0], v[1], v[2]))
}

/// Newton minimization with positive-definiteness repair, step clamping, and
/// backtracking line search. `trans_dims` leading pose components are
/// translations (clamped to half a cell per step); the rest are angles.
fn newton_minimize<T: Scalar, const P: usize>(
    mut pose: SVector<T, P>,
    trans_dims: usize,
    max_trans_step: T,
    max_iterations: usize,
    step_epsilon: T,
    mut eval_full: impl FnMut(&SVector<T, P>) -> (T, SVector<T, P>, SMatrix<T, P, P>, usize),
    mut eval_score: impl FnMut(&SVector<T, P>) -> (T, usize),
) -> (SVector<T, P>, T, bool, usize) {
    let mut converged = false;
    let mut iterations = 0;
    let mut last_score = T::zero();
    let mut last_matched = 0;
    // Levenberg-Marquardt damping carried across iterations
    let mut lambda = T::zero();

    'outer: for _ in 0..max_iterations {
        iterations += 1;
        let (score, grad, hess, matched) = eval_full(&pose);
        last_score = score;
        last_matched = matched;
        if matched == 0 {
            break;
        }
        let trace = hess.trace().abs().max(T::of(1e-12));

        // escalate damping until some damped step improves the score
        for escalation in 0..8 {
            let mut step = None;
            let mut l = lambda;
            for _ in 0..16 {
                let damped = hess + SMatrix::<T, P, P>::identity() * l;
                if let Some(chol) = damped.cholesky() {
                    step = Some(chol.solve(&(-grad)));
                    break;
                }
                l = if l == T::zero() {
                    trace * T::of(1e-6)
                } else {
                    l * T::of(10.0)
                };
            }
            lambda = l;
            let mut delta = match step {
                Some(d) => d,
                None => break 'outer,
            };

            // clamp translation to half a cell and rotation to a fixed bound
            let mut t_norm2 = T::zero();
            for i in 0..trans_dims {
                t_norm2 += delta[i] * delta[i];
            }
            let t_norm = t_norm2.sqrt();
            if t_norm > max_trans_step {
                delta *= max_trans_step / t_norm;
            }
            let mut r_norm2 = T::zero();
            for i in trans_dims..P {
                r_norm2 += delta[i] * delta[i];
            }
            let r_norm = r_norm2.sqrt();
            if r_norm > T::of(MAX_ROT_STEP) {
                delta *= T::of(MAX_ROT_STEP) / r_norm;
            }

            if delta.norm() < step_epsilon {
                converged = true;
                break 'outer;
            }

            // accept the longest halved step that improves the score
            let mut alpha = T::one();
            let mut accepted = false;
            for _ in 0..4 {
                let cand = pose + delta * alpha;
                let (cand_score, cand_matched) = eval_score(&cand);
                if cand_score < score {
                    pose = cand;
                    last_score = cand_score;
                    last_matched = cand_matched;
                    accepted = true;
                    break;
                }
                alpha /= T::of(2.0);
            }
            if std::env::var("NDT_TRACE").is_ok() {
                eprintln!(
                    "it {iterations}.{escalation}: score {:.4} |g| {:.2e} |d| {:.2e} lam {:.2e} acc {accepted} m {last_matched} pose {:?}",
                    score.as_f64(), grad.norm().as_f64(), delta.norm().as_f64(), lambda.as_f64(),
                    pose.iter().map(|v| v.as_f64()).collect::<Vec<_>>()
                );
            }
            if accepted {
                // relax damping and take the next Newton iteration
                lambda /= T::of(4.0);
                if (delta * alpha).norm() < step_epsilon {
                    converged = true;
                    break 'outer;
                }
                continue 'outer;
            }
            lambda = if lambda == T::zero() {
                trace * T::of(1e-6)
            } else {
                lambda * T::of(10.0)
            };
        }
        // even heavily damped gradient steps cannot improve: local minimum
        converged = true;
        break;
    }
    // a pose that never matched a cell is a non-result
    if last_matched == 0 {
        converged = false;
    }
    (pose, last_score, converged, iterations)
}

/// Registers 2D boundary points onto a target set, starting from `init`.
///
/// Runs a short pass on a double-size grid first to widen the convergence
/// basin, then refines on the configured cell size.
pub fn register_2d<T: Scalar>(
    source: &[Point2<T>],
    target: &[Point2<T>],
    init: &RigidTransform2<T>,
    params: &NdtParams<T>,
) -> Result<Registration2<T>> {
    params.validate()?;
    if source.is_empty() {
        return Err(Error::EmptyCloud("2D registration source"));
    }
    if target.is_empty() {
        return Err(Error::EmptyCloud("2D registration target"));
    }
    let src: Vec<SVector<T, 2>> = source.iter().map(|p| SVector::from(p.to_array())).collect();
    let tgt: Vec<SVector<T, 2>> = target.iter().map(|p| SVector::from(p.to_array())).collect();

    let fine = NdtGrid::<T, U2>::build(&tgt, params.cell_size, params.min_points_per_cell)?;
    let coarse = NdtGrid::<T, U2>::build_with_floor(
        &tgt,
        params.cell_size * T::of(2.0),
        params.min_points_per_cell,
        T::of(COARSE_RATIO_FLOOR),
    )?;

    let init_pose = SVector::<T, 3>::new(
        init.translation().x,
        init.translation().y,
        init.angle(),
    );
    let coarse_iters = (params.max_iterations / 2).max(1);
    let (p1, _, _, it1) = newton_minimize(
        init_pose,
        2,
        params.cell_size,
        coarse_iters,
        params.step_epsilon,
        |pv| derivatives_2d(&coarse, &src, pv, params.outlier_floor),
        |pv| score_only_2d(&coarse, &src, pv, params.outlier_floor),
    );
    // the coarse field's optimum is biased; keep the coarse result only if
    // it actually beats the initial pose on the fine grid
    let pose = if score_only_2d(&fine, &src, &p1, params.outlier_floor).0
        < score_only_2d(&fine, &src, &init_pose, params.outlier_floor).0
    {
        p1
    } else {
        init_pose
    };
    let (p2, score, converged, it2) = newton_minimize(
        pose,
        2,
        params.cell_size / T::of(2.0),
        params.max_iterations,
        params.step_epsilon,
        |pv| derivatives_2d(&fine, &src, pv, params.outlier_floor),
        |pv| score_only_2d(&fine, &src, pv, params.outlier_floor),
    );

    Ok(RegistrationResult {
        transform: RigidTransform2::new(p2[2], nalgebra::Vector2::new(p2[0], p2[1])),
        final_score: score,
        converged,
        iterations: it1 + it2,
    })
}

/// Registers a 3D cloud onto a target cloud, starting from `init` (for the
/// pipeline, the lifted 2D result).
pub fn register_3d<T: Scalar>(
    source: &PointCloud3<T>,
    target: &PointCloud3<T>,
    init: &RigidTransform3<T>,
    params: &NdtParams<T>,
) -> Result<Registration3<T>> {
    params.validate()?;
    if source.is_empty() {
        return Err(Error::EmptyCloud("3D registration source"));
    }
    if target.is_empty() {
        return Err(Error::EmptyCloud("3D registration target"));
    }
    let src: Vec<SVector<T, 3>> = source.iter().map(|p| p.to_vector()).collect();
    let tgt: Vec<SVector<T, 3>> = target.iter().map(|p| p.to_vector()).collect();

    let fine = NdtGrid::<T, U3>::build(&tgt, params.cell_size, params.min_points_per_cell)?;
    let coarse = NdtGrid::<T, U3>::build_with_floor(
        &tgt,
        params.cell_size * T::of(2.0),
        params.min_points_per_cell,
        T::of(COARSE_RATIO_FLOOR),
    )?;

    let init_pose = pose_to_vec6(init);
    let coarse_iters = (params.max_iterations / 2).max(1);
    let (p1, _, _, it1) = newton_minimize(
        init_pose,
        3,
        params.cell_size,
        coarse_iters,
        params.step_epsilon,
        |pv| derivatives_3d(&coarse, &src, pv, params.outlier_floor),
        |pv| score_only_3d(&coarse, &src, pv, params.outlier_floor),
    );
    let pose = if score_only_3d(&fine, &src, &p1, params.outlier_floor).0
        < score_only_3d(&fine, &src, &init_pose, params.outlier_floor).0
    {
        p1
    } else {
        init_pose
    };
    let (p2, score, converged, it2) = newton_minimize(
        pose,
        3,
        params.cell_size / T::of(2.0),
        params.max_iterations,
        params.step_epsilon,
        |pv| derivatives_3d(&fine, &src, pv, params.outlier_floor),
        |pv| score_only_3d(&fine, &src, pv, params.outlier_floor),
    );

    Ok(RegistrationResult {
        transform: vec6_to_pose(&p2),
        final_score: score,
        converged,
        iterations: it1 + it2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::Point3;
    use nalgebra::{Vector2, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gaussian_points_3d(n: usize, seed: u64) -> Vec<SVector<f64, 3>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gauss = |rng: &mut ChaCha8Rng| {
            // Box-Muller
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        };
        (0..n)
            .map(|_| {
                SVector::<f64, 3>::new(
                    50.0 + 0.8 * gauss(&mut rng),
                    50.0 + 0.5 * gauss(&mut rng),
                    50.0 + 0.4 * gauss(&mut rng),
                )
            })
            .collect()
    }

    #[test]
    fn identical_points_make_isotropic_cell() {
        let pts = vec![SVector::<f64, 3>::new(1.0, 2.0, 3.0); 10];
        let grid = NdtGrid3::<f64>::build(&pts, 2.0, 5).unwrap();
        assert_eq!(grid.len(), 1);
        let cell = grid.lookup(&pts[0]).unwrap();
        assert!((cell.mean - pts[0]).norm() < 1e-12);
        let eig = cell.covariance.symmetric_eigen();
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        assert!(min > 0.0);
        assert!(min >= 1e-3 * max - 1e-18);
        // near-zero isotropic
        assert!(max < 1e-4);
    }

    #[test]
    fn two_clusters_two_cells() {
        let mut pts = Vec::new();
        for i in 0..6 {
            pts.push(SVector::<f64, 3>::new(0.5 + 0.01 * i as f64, 0.5, 0.5));
            pts.push(SVector::<f64, 3>::new(10.5 + 0.01 * i as f64, 0.5, 0.5));
        }
        let grid = NdtGrid3::<f64>::build(&pts, 2.0, 5).unwrap();
        assert_eq!(grid.len(), 2);
        let a = grid.lookup(&SVector::<f64, 3>::new(0.5, 0.5, 0.5)).unwrap();
        assert!((a.mean[0] - 0.525).abs() < 1e-12);
        assert!((a.mean[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cell_statistics_match_oracle() {
        let pts = gaussian_points_3d(5000, 17);
        // one giant cell
        let grid = NdtGrid3::<f64>::build(&pts, 1e6, 5).unwrap();
        assert_eq!(grid.len(), 1);
        let cell = grid.lookup(&pts[0]).unwrap();

        // independent two-pass statistics
        let n = pts.len() as f64;
        let mut mean = SVector::<f64, 3>::zeros();
        for p in &pts {
            mean += p;
        }
        mean /= n;
        let mut cov = SMatrix::<f64, 3, 3>::zeros();
        for p in &pts {
            let q = p - mean;
            cov += q * q.transpose();
        }
        cov /= n;

        assert!((cell.mean - mean).norm() < 1e-9);
        // covariance is far from degenerate here, so regularization is a no-op
        assert!((cell.covariance - cov).norm() < 1e-9);
        assert_eq!(cell.count, 5000);
    }

    #[test]
    fn min_points_filter_and_grid_error() {
        let pts = vec![
            SVector::<f64, 3>::new(0.5, 0.5, 0.5),
            SVector::<f64, 3>::new(0.6, 0.5, 0.5),
        ];
        assert!(matches!(
            NdtGrid3::<f64>::build(&pts, 2.0, 5),
            Err(Error::Grid)
        ));
    }

    #[test]
    fn score_prefers_alignment_over_half_cell_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Point2<f64>> = (0..400)
            .map(|_| Point2::new(rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0)))
            .collect();
        let tgt: Vec<SVector<f64, 2>> = pts.iter().map(|p| SVector::from(p.to_array())).collect();
        let grid = NdtGrid2::<f64>::build(&tgt, 2.0, 5).unwrap();
        let aligned = ndt_score_2d(&grid, &pts, &RigidTransform2::identity(), 0.05);
        let shifted = ndt_score_2d(
            &grid,
            &pts,
            &RigidTransform2::new(0.0, Vector2::new(1.0, 0.0)),
            0.05,
        );
        assert!(aligned < shifted, "aligned {aligned} vs shifted {shifted}");
    }

    #[test]
    fn score_outlier_floor_for_disjoint_sets() {
        let tgt: Vec<SVector<f64, 2>> = (0..20)
            .map(|i| SVector::<f64, 2>::new(i as f64 * 0.1, 0.0))
            .collect();
        let grid = NdtGrid2::<f64>::build(&tgt, 2.0, 5).unwrap();
        let src: Vec<Point2<f64>> = (0..37).map(|i| Point2::new(1e5 + i as f64, 1e5)).collect();
        let score = ndt_score_2d(&grid, &src, &RigidTransform2::identity(), 0.05);
        assert!((score - 37.0 * -0.05).abs() < 1e-12);
    }

    #[test]
    fn score_at_cell_mean_is_minus_one() {
        let pts = vec![SVector::<f64, 3>::new(1.0, 1.0, 1.0); 8];
        let grid = NdtGrid3::<f64>::build(&pts, 4.0, 5).unwrap();
        let cloud = PointCloud3::new(vec![Point3::new(1.0, 1.0, 1.0)]);
        let score = ndt_score_3d(&grid, &cloud, &RigidTransform3::identity(), 0.05);
        assert!((score + 1.0).abs() < 1e-12);
    }

    #[test]
    fn score_invariant_under_rigid_grid_motion() {
        let pts = gaussian_points_3d(600, 9);
        let grid = NdtGrid3::<f64>::build(&pts, 1.0, 5).unwrap();
        let cloud = PointCloud3::new(
            gaussian_points_3d(100, 10)
                .iter()
                .map(|v| Point3::from_vector(*v))
                .collect(),
        );
        let base = ndt_score_3d(&grid, &cloud, &RigidTransform3::identity(), 0.05);

        let motion = RigidTransform3::from_euler(0.3, -0.2, 1.1, Vector3::new(4.0, -7.0, 2.5));
        let rot = motion.rotation().to_rotation_matrix().into_inner();
        let moved_grid = grid.transformed(&rot, &motion.translation());
        let moved_cloud = motion.apply_cloud(&cloud);
        let moved = ndt_score_3d(&moved_grid, &moved_cloud, &RigidTransform3::identity(), 0.05);
        assert!(
            (base - moved).abs() < 1e-9,
            "base {base} vs moved {moved}"
        );
    }

    fn fd_check_2d(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tgt: Vec<SVector<f64, 2>> = (0..300)
            .map(|_| SVector::<f64, 2>::new(rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0)))
            .collect();
        let src: Vec<SVector<f64, 2>> = (0..150)
            .map(|_| SVector::<f64, 2>::new(rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0)))
            .collect();
        let grid = NdtGrid2::<f64>::build(&tgt, 2.0, 5).unwrap();
        for _ in 0..20 {
            let pose = SVector::<f64, 3>::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.3..0.3),
            );
            let (_, grad, _, _) = derivatives_2d(&grid, &src, &pose, 0.05);
            for i in 0..3 {
                let h = 1e-6;
                let mut hi = pose;
                let mut lo = pose;
                hi[i] += h;
                lo[i] -= h;
                let f_hi = score_only_2d(&grid, &src, &hi, 0.05).0;
                let f_lo = score_only_2d(&grid, &src, &lo, 0.05).0;
                let fd = (f_hi - f_lo) / (2.0 * h);
                let denom = grad[i].abs().max(fd.abs()).max(1e-4);
                assert!(
                    (grad[i] - fd).abs() / denom < 1e-5,
                    "2d component {i}: analytic {} fd {}",
                    grad[i],
                    fd
                );
            }
        }
    }

    fn fd_check_3d(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tgt = gaussian_points_3d(500, seed + 1);
        let src = gaussian_points_3d(120, seed + 2);
        let grid = NdtGrid3::<f64>::build(&tgt, 1.5, 5).unwrap();
        for _ in 0..20 {
            let pose = SVector::<f64, 6>::new(
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
            );
            let (_, grad, _, _) = derivatives_3d(&grid, &src, &pose, 0.05);
            for i in 0..6 {
                let h = 1e-6;
                let mut hi = pose;
                let mut lo = pose;
                hi[i] += h;
                lo[i] -= h;
                let f_hi = score_only_3d(&grid, &src, &hi, 0.05).0;
                let f_lo = score_only_3d(&grid, &src, &lo, 0.05).0;
                let fd = (f_hi - f_lo) / (2.0 * h);
                let denom = grad[i].abs().max(fd.abs()).max(1e-4);
                assert!(
                    (grad[i] - fd).abs() / denom < 1e-5,
                    "3d component {i}: analytic {} fd {}",
                    grad[i],
                    fd
                );
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        fd_check_2d(100);
        fd_check_3d(200);
    }

    fn l_shape(n_per_meter: usize) -> Vec<Point2<f64>> {
        // closed boundary of an L-shaped 20 x 20 footprint with an 8 m arm
        let verts: [(f64, f64); 7] = [
            (0.0, 0.0),
            (20.0, 0.0),
            (20.0, 8.0),
            (8.0, 8.0),
            (8.0, 20.0),
            (0.0, 20.0),
            (0.0, 0.0),
        ];
        let mut pts = Vec::new();
        for w in verts.windows(2) {
            let (x0, y0) = w[0];
            let (x1, y1) = w[1];
            let len = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
            let n = (len * n_per_meter as f64) as usize;
            for i in 0..n {
                let t = i as f64 / n as f64;
                pts.push(Point2::new(x0 + (x1 - x0) * t, y0 + (y1 - y0) * t));
            }
        }
        pts
    }

    #[test]
    fn register_2d_identity_case() {
        let pts = l_shape(12);
        let params = NdtParams {
            cell_size: 1.5,
            ..Default::default()
        };
        let res = register_2d(&pts, &pts, &RigidTransform2::identity(), &params).unwrap();
        assert!(res.converged);
        assert!(res.transform.translation().norm() < 1e-3);
        assert!(res.transform.angle().abs() < 1e-3);
    }

    #[test]
    fn register_2d_recovers_known_transform() {
        let pts = l_shape(5);
        let motion = RigidTransform2::new(10f64.to_radians(), Vector2::new(1.0, 0.5));
        let moved: Vec<Point2<f64>> = pts
            .iter()
            .map(|p| {
                let v = motion.apply(Vector2::new(p.x, p.y));
                Point2::new(v.x, v.y)
            })
            .collect();
        // register original onto moved copy: expect the motion itself
        let res = register_2d(
            &pts,
            &moved,
            &RigidTransform2::identity(),
            &NdtParams::default(),
        )
        .unwrap();
        assert!(res.converged);
        let t_err = (res.transform.translation() - motion.translation()).norm();
        let a_err = (res.transform.angle() - motion.angle()).abs();
        assert!(t_err < 0.1, "translation error {t_err}");
        assert!(a_err < 1f64.to_radians(), "angle error {a_err}");
    }

    #[test]
    fn register_2d_disjoint_sets_not_a_match() {
        let pts = l_shape(3);
        let far: Vec<Point2<f64>> = pts.iter().map(|p| Point2::new(p.x + 1e4, p.y)).collect();
        let res = register_2d(
            &far,
            &pts,
            &RigidTransform2::identity(),
            &NdtParams::default(),
        )
        .unwrap();
        assert!(!res.converged || (res.final_score + 0.05 * far.len() as f64).abs() < 1e-9);
    }

    fn building_patch(seed: u64) -> PointCloud3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = move |rng: &mut ChaCha8Rng| rng.gen_range(-0.05..0.05);
        let mut pts = Vec::new();
        for _ in 0..1500 {
            // two walls and a roof segment, with reconstruction-like jitter
            let p = match rng.gen_range(0..3) {
                0 => Point3::new(rng.gen_range(0.0..12.0), 0.0, rng.gen_range(0.0..9.0)),
                1 => Point3::new(0.0, rng.gen_range(0.0..10.0), rng.gen_range(0.0..9.0)),
                _ => Point3::new(rng.gen_range(0.0..12.0), rng.gen_range(0.0..10.0), 9.0),
            };
            pts.push(Point3::new(
                p.x + noise(&mut rng),
                p.y + noise(&mut rng),
                p.z + noise(&mut rng),
            ));
        }
        PointCloud3::new(pts)
    }

    #[test]
    fn register_3d_identity_case() {
        let cloud = building_patch(31);
        let params = NdtParams::default().with_cell_size(3.0);
        let res = register_3d(&cloud, &cloud, &RigidTransform3::identity(), &params).unwrap();
        assert!(res.converged);
        assert!(res.transform.translation().norm() < 1e-3);
        assert!(res.transform.rotation_angle() < 1e-3);
    }

    #[test]
    fn register_3d_recovers_z_shift() {
        let cloud = building_patch(32);
        let shifted = RigidTransform3::from_translation(Vector3::new(0.0, 0.0, 0.8))
            .apply_cloud(&cloud);
        let params = NdtParams::default().with_cell_size(3.0);
        let res = register_3d(&cloud, &shifted, &RigidTransform3::identity(), &params).unwrap();
        assert!(res.converged);
        let err = (res.transform.translation() - Vector3::new(0.0, 0.0, 0.8)).norm();
        assert!(err < 0.1, "z recovery error {err}");
    }

    #[test]
    fn register_never_returns_non_normalized_rotation() {
        let cloud = building_patch(33);
        let shifted = RigidTransform3::from_euler(0.02, -0.01, 0.05, Vector3::new(0.5, -0.3, 0.2))
            .apply_cloud(&cloud);
        let params = NdtParams::default().with_cell_size(3.0);
        let res = register_3d(&cloud, &shifted, &RigidTransform3::identity(), &params).unwrap();
        let q = res.transform.rotation();
        assert!((q.norm() - 1.0).abs() < 1e-9);
        assert!(q.w >= 0.0);
    }
}
