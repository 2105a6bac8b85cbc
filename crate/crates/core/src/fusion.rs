//! Post-processing: clusters the per-patch transforms and averages the
//! largest cluster into the final pose.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::grid::PatchId;
use crate::scalar::Scalar;
use crate::transform::RigidTransform3;

#[derive(Clone, Copy, Debug)]
pub struct ClusterParams<T> {
    /// Translation distance below which two transforms can share a cluster.
    pub epsilon: T,
    /// Quaternion angle below which two transforms can share a cluster.
    pub omega: T,
}

impl<T: Scalar> Default for ClusterParams<T> {
    fn default() -> Self {
        ClusterParams {
            epsilon: T::of(2.0),
            omega: T::of(5f64.to_radians()),
        }
    }
}

impl<T: Scalar> ClusterParams<T> {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon <= T::zero() || self.omega <= T::zero() {
            return Err(Error::Parameter(
                "cluster thresholds must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One accepted patch registration: the transform mapping the (coarse
/// aligned) LiDAR patch into the visual frame, with its match quality.
#[derive(Clone, Copy, Debug)]
pub struct PatchTransform<T: Scalar> {
    pub lidar_patch_id: PatchId,
    pub matched_visual_patch_id: PatchId,
    pub transform: RigidTransform3<T>,
    /// Average nearest-point distance after registration, meters.
    pub match_score: T,
}

/// A group of mutually consistent patch transforms.
#[derive(Clone, Debug)]
pub struct TransformCluster<T: Scalar> {
    pub members: Vec<PatchTransform<T>>,
    pub representative: RigidTransform3<T>,
}

/// Angle between two unit quaternions in [0, pi]; sign-independent, so a
/// quaternion and its negation compare as equal rotations.
///
/// Evaluates 2*acos(|<a, b>|) in its atan2 form, which stays accurate for
/// near-identical rotations.
pub fn quaternion_angle<T: Scalar>(a: &UnitQuaternion<T>, b: &UnitQuaternion<T>) -> T {
    let rel = a.inverse() * b;
    let v = rel.vector().norm();
    let w = rel.w.abs();
    T::of(2.0) * v.atan2(w)
}

fn same_cluster<T: Scalar>(
    seed: &RigidTransform3<T>,
    other: &RigidTransform3<T>,
    params: &ClusterParams<T>,
) -> bool {
    let dt = (seed.translation() - other.translation()).norm();
    let da = quaternion_angle(&seed.rotation(), &other.rotation());
    dt < params.epsilon && da.abs() < params.omega
}

/// Greedy seeded clustering in input order: each transform joins the first
/// cluster whose seed it matches on both the translation and rotation
/// thresholds, otherwise it seeds a new cluster.
pub fn cluster_transforms<T: Scalar>(
    transforms: &[PatchTransform<T>],
    params: &ClusterParams<T>,
) -> Result<Vec<TransformCluster<T>>> {
    if transforms.is_empty() {
        return Err(Error::Fusion);
    }
    params.validate()?;

    let mut seeds: Vec<RigidTransform3<T>> = Vec::new();
    let mut groups: Vec<Vec<PatchTransform<T>>> = Vec::new();
    for pt in transforms {
        match seeds
            .iter()
            .position(|seed| same_cluster(seed, &pt.transform, params))
        {
            Some(i) => groups[i].push(*pt),
            None => {
                seeds.push(pt.transform);
                groups.push(vec![*pt]);
            }
        }
    }

    Ok(groups
        .into_iter()
        .map(|mut members| {
            members.sort_by_key(|m| m.lidar_patch_id);
            let representative = average_transforms(&members);
            TransformCluster {
                members,
                representative,
            }
        })
        .collect())
}

/// Mean of a cluster: arithmetic mean of translations and an incremental
/// slerp chain over the rotations, each quaternion sign-aligned to the
/// running mean. Member order is fixed by patch id for determinism.
fn average_transforms<T: Scalar>(members: &[PatchTransform<T>]) -> RigidTransform3<T> {
    let mut translation = Vector3::zeros();
    for m in members {
        translation += m.transform.translation();
    }
    translation /= T::of_usize(members.len());

    let mut mean_rot = members[0].transform.rotation();
    for (k, m) in members.iter().enumerate().skip(1) {
        let mut q = m.transform.rotation();
        if mean_rot.coords.dot(&q.coords) < T::zero() {
            q = UnitQuaternion::new_unchecked(Quaternion::from(-q.into_inner().coords));
        }
        let weight = T::one() / T::of_usize(k + 1);
        mean_rot = mean_rot
            .try_slerp(&q, weight, T::of(1e-12))
            .unwrap_or(mean_rot);
    }

    RigidTransform3::new(mean_rot, translation)
}

/// Fuses a transform set: clusters it, picks the largest cluster (ties
/// break to the smallest mean match score, then to the first in patch-id
/// order), and returns that cluster's average.
pub fn fuse<T: Scalar>(
    transforms: &[PatchTransform<T>],
    params: &ClusterParams<T>,
) -> Result<RigidTransform3<T>> {
    let clusters = cluster_transforms(transforms, params)?;
    let best = clusters
        .iter()
        .min_by(|a, b| {
            b.members
                .len()
                .cmp(&a.members.len())
                .then_with(|| {
                    mean_score(a)
                        .partial_cmp(&mean_score(b))
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
                .then_with(|| a.members[0].lidar_patch_id.cmp(&b.members[0].lidar_patch_id))
        })
        .expect("nonempty cluster list");
    Ok(best.representative)
}

fn mean_score<T: Scalar>(cluster: &TransformCluster<T>) -> T {
    let sum = cluster
        .members
        .iter()
        .fold(T::zero(), |a, m| a + m.match_score);
    sum / T::of_usize(cluster.members.len())
}
