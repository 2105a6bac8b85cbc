//! Ground removal, X-Y projection, and 2D boundary point extraction.

use crate::cloud::PointCloud3;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::spatial::KdTree;

/// A 2D point in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point2<T> {
    pub x: T,
    pub y: T,
}

impl<T: Scalar> Point2<T> {
    pub fn new(x: T, y: T) -> Self {
        Point2 { x, y }
    }

    pub fn to_array(self) -> [T; 2] {
        [self.x, self.y]
    }

    pub fn distance(self, other: Point2<T>) -> T {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        (dx * dx + dy * dy).sqrt()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundaryParams<T> {
    /// Height above the ground plane below which points are discarded.
    pub h: T,
    /// Neighborhood size for the angular-gap criterion.
    pub k: usize,
    /// A point is boundary when its largest angular gap exceeds this.
    pub gap_threshold: T,
    /// Quantile of z values taken as the ground height.
    pub ground_percentile: T,
}

impl<T: Scalar> Default for BoundaryParams<T> {
    fn default() -> Self {
        BoundaryParams {
            h: T::of(1.5),
            k: 20,
            gap_threshold: T::frac_pi_2(),
            ground_percentile: T::of(0.05),
        }
    }
}

impl<T: Scalar> BoundaryParams<T> {
    pub fn validate(&self) -> Result<()> {
        if self.h < T::zero() {
            return Err(Error::Parameter("height threshold must be >= 0".into()));
        }
        if self.k < 3 {
            return Err(Error::Parameter("neighborhood size must be >= 3".into()));
        }
        if self.gap_threshold <= T::zero() || self.gap_threshold > T::two_pi() {
            return Err(Error::Parameter(
                "gap threshold must be in (0, 2*pi]".into(),
            ));
        }
        if self.ground_percentile < T::zero() || self.ground_percentile > T::one() {
            return Err(Error::Parameter(
                "ground percentile must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Linearly interpolated quantile of a sample (same scheme as the common
/// "linear" definition: position q*(n-1) between order statistics).
fn quantile<T: Scalar>(values: &mut [T], q: T) -> T {
    let n = values.len();
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if n == 1 {
        return values[0];
    }
    let pos = q * T::of_usize(n - 1);
    let lo = pos.floor().as_f64() as usize;
    let lo = lo.min(n - 2);
    let frac = pos - T::of_usize(lo);
    values[lo] * (T::one() - frac) + values[lo + 1] * frac
}

/// Drops points at or below the ground plane: keeps exactly the points with
/// `z - z0 > h`, where `z0` is the configured quantile of the z values.
pub fn remove_ground<T: Scalar>(
    cloud: &PointCloud3<T>,
    params: &BoundaryParams<T>,
) -> Result<PointCloud3<T>> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud("remove_ground input"));
    }
    params.validate()?;
    let mut zs: Vec<T> = cloud.iter().map(|p| p.z).collect();
    let z0 = quantile(&mut zs, params.ground_percentile);
    let points: Vec<_> = cloud
        .iter()
        .filter(|p| p.z - z0 > params.h)
        .copied()
        .collect();
    if points.is_empty() {
        return Err(Error::EmptyResult("all points within ground band"));
    }
    Ok(PointCloud3 {
        points,
        georef_origin: cloud.georef_origin,
    })
}

/// X-Y projection, order preserved, duplicates kept.
pub fn project_xy<T: Scalar>(cloud: &PointCloud3<T>) -> Vec<Point2<T>> {
    cloud.iter().map(|p| Point2::new(p.x, p.y)).collect()
}

/// Extracts 2D boundary points by the angular-gap criterion: a point is
/// boundary iff the largest gap between the sorted direction angles to its
/// `k` nearest neighbors exceeds the gap threshold.
pub fn boundary_points_2d<T: Scalar>(
    points: &[Point2<T>],
    params: &BoundaryParams<T>,
) -> Result<Vec<Point2<T>>> {
    params.validate()?;
    if points.len() < params.k + 1 {
        return Err(Error::Boundary {
            needed: params.k + 1,
            got: points.len(),
        });
    }
    let tree = KdTree::build(points.iter().map(|p| p.to_array()).collect());
    let mut out = Vec::new();
    let mut angles: Vec<T> = Vec::with_capacity(params.k);
    for (i, p) in points.iter().enumerate() {
        // k+1 because the query point itself is among the results
        let neigh = tree.k_nearest(&p.to_array(), params.k + 1);
        angles.clear();
        for (j, _) in neigh {
            if j == i {
                continue;
            }
            let q = points[j];
            angles.push((q.y - p.y).atan2(q.x - p.x));
        }
        if max_angular_gap(&mut angles) > params.gap_threshold {
            out.push(*p);
        }
    }
    Ok(out)
}

/// Largest gap between circularly consecutive angles. Sorts in place.
fn max_angular_gap<T: Scalar>(angles: &mut [T]) -> T {
    if angles.is_empty() {
        return T::two_pi();
    }
    angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut max_gap = angles[0] + T::two_pi() - angles[angles.len() - 1];
    for w in angles.windows(2) {
        max_gap = max_gap.max(w[1] - w[0]);
    }
    max_gap
}
