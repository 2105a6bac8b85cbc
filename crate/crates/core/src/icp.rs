//! Point-to-point ICP, the comparison baseline for the patch pipeline.

use nalgebra::{Matrix3, Vector3};

use crate::cloud::{PointCloud3, SpatialIndex};
use crate::error::{Error, Result};
use crate::ndt::Registration3;
use crate::scalar::Scalar;
use crate::transform::RigidTransform3;

/// Alternates nearest-neighbor correspondence with a closed-form rigid fit.
///
/// `max_corr_dist` gates correspondences; pass a large value to disable
/// gating (with gating off, the RMS residual is non-increasing across
/// iterations, since both the matching and the fit step reduce the summed
/// squared distance). The returned transform maps the source frame into the
/// target frame.
pub fn icp_register<T: Scalar>(
    source: &PointCloud3<T>,
    target: &PointCloud3<T>,
    init: &RigidTransform3<T>,
    max_iterations: usize,
    max_corr_dist: T,
) -> Result<Registration3<T>> {
    icp_register_with_history(source, target, init, max_iterations, max_corr_dist)
        .map(|(result, _)| result)
}

/// `icp_register`, also returning the RMS correspondence residual after
/// each iteration.
pub fn icp_register_with_history<T: Scalar>(
    source: &PointCloud3<T>,
    target: &PointCloud3<T>,
    init: &RigidTransform3<T>,
    max_iterations: usize,
    max_corr_dist: T,
) -> Result<(Registration3<T>, Vec<T>)> {
    if source.is_empty() {
        return Err(Error::EmptyCloud("ICP source"));
    }
    if target.is_empty() {
        return Err(Error::EmptyCloud("ICP target"));
    }
    if max_corr_dist <= T::zero() {
        return Err(Error::Parameter(
            "ICP correspondence distance must be positive".into(),
        ));
    }

    let index = SpatialIndex::build(target);
    let mut current = *init;
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..max_iterations {
        iterations += 1;
        let moved = current.apply_cloud(source);

        let mut src_pts: Vec<Vector3<T>> = Vec::new();
        let mut tgt_pts: Vec<Vector3<T>> = Vec::new();
        let mut residual = T::zero();
        for p in moved.iter() {
            let (idx, dist) = index.nearest(*p).expect("nonempty target");
            if dist <= max_corr_dist {
                src_pts.push(p.to_vector());
                tgt_pts.push(target.points[idx].to_vector());
                residual += dist * dist;
            }
        }
        if src_pts.is_empty() {
            return Ok((
                Registration3 {
                    transform: current,
                    final_score: T::max_value().unwrap(),
                    converged: false,
                    iterations,
                },
                history,
            ));
        }
        residual = (residual / T::of_usize(src_pts.len())).sqrt();

        if let Some(&prev) = history.last() {
            if (prev - residual).abs() < T::of(1e-9) {
                history.push(residual);
                converged = true;
                break;
            }
        }
        history.push(residual);

        let delta = rigid_fit(&src_pts, &tgt_pts);
        current = delta.compose(&current);
    }

    let final_score = history.last().copied().unwrap_or_else(T::zero);
    Ok((
        Registration3 {
            transform: current,
            final_score,
            converged,
            iterations,
        },
        history,
    ))
}

/// Least-squares rigid transform mapping `src` onto `tgt` (Umeyama closed
/// form without scale). Point lists must be index-aligned.
fn rigid_fit<T: Scalar>(src: &[Vector3<T>], tgt: &[Vector3<T>]) -> RigidTransform3<T> {
    let n = T::of_usize(src.len());
    let mut src_mean = Vector3::zeros();
    let mut tgt_mean = Vector3::zeros();
    for (s, t) in src.iter().zip(tgt) {
        src_mean += s;
        tgt_mean += t;
    }
    src_mean /= n;
    tgt_mean /= n;

    let mut h = Matrix3::zeros();
    for (s, t) in src.iter().zip(tgt) {
        h += (s - src_mean) * (t - tgt_mean).transpose();
    }

    let svd = h.svd(true, true);
    let u = svd.u.expect("svd with u");
    let vt = svd.v_t.expect("svd with v_t");
    let v = vt.transpose();
    let d = (v * u.transpose()).determinant();
    let sign = if d < T::zero() { -T::one() } else { T::one() };
    let correction = Matrix3::from_diagonal(&Vector3::new(T::one(), T::one(), sign));
    let rot_matrix = v * correction * u.transpose();

    let rotation = nalgebra::UnitQuaternion::from_matrix(&rot_matrix);
    let translation = tgt_mean - rot_matrix * src_mean;
    RigidTransform3::new(rotation, translation)
}
