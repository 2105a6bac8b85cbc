//! Point cloud container, voxel downsampling, and nearest-neighbor queries.

use std::collections::HashMap;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::spatial::KdTree;

/// A 3D point in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Scalar> Point3<T> {
    pub fn new(x: T, y: T, z: T) -> Self {
        Point3 { x, y, z }
    }

    pub fn to_vector(self) -> Vector3<T> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: Vector3<T>) -> Self {
        Point3 {
            x: v.x,
            y: v.y,
            z: v.z,
        }
    }

    pub fn to_array(self) -> [T; 3] {
        [self.x, self.y, self.z]
    }

    pub fn is_finite(self) -> bool {
        self.x.finite() && self.y.finite() && self.z.finite()
    }

    pub fn distance(self, other: Point3<T>) -> T {
        (self.to_vector() - other.to_vector()).norm()
    }

    /// Euclidean distance ignoring z.
    pub fn distance_xy(self, other: Point3<T>) -> T {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        (dx * dx + dy * dy).sqrt()
    }
}

/// Ordered list of 3D points, the universal currency of the pipeline.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud3<T> {
    pub points: Vec<Point3<T>>,
    /// GNSS-mapped origin when the cloud is georeferenced.
    pub georef_origin: Option<Point3<T>>,
}

impl<T: Scalar> PointCloud3<T> {
    pub fn new(points: Vec<Point3<T>>) -> Self {
        PointCloud3 {
            points,
            georef_origin: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Point3<T>> {
        self.points.iter()
    }

    pub fn validate_finite(&self) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if !p.is_finite() {
                return Err(Error::Parameter(format!(
                    "point {i} has a non-finite coordinate"
                )));
            }
        }
        Ok(())
    }

    /// Arithmetic mean of the points. `None` for an empty cloud.
    pub fn centroid(&self) -> Option<Point3<T>> {
        if self.points.is_empty() {
            return None;
        }
        let mut acc = Vector3::zeros();
        for p in &self.points {
            acc += p.to_vector();
        }
        Some(Point3::from_vector(acc / T::of_usize(self.points.len())))
    }

    /// Component-wise (min, max) corners. `None` for an empty cloud.
    pub fn bounds(&self) -> Option<(Point3<T>, Point3<T>)> {
        let first = *self.points.first()?;
        let mut lo = first;
        let mut hi = first;
        for p in &self.points[1..] {
            lo.x = lo.x.min(p.x);
            lo.y = lo.y.min(p.y);
            lo.z = lo.z.min(p.z);
            hi.x = hi.x.max(p.x);
            hi.y = hi.y.max(p.y);
            hi.z = hi.z.max(p.z);
        }
        Some((lo, hi))
    }

    pub fn extend(&mut self, other: &PointCloud3<T>) {
        self.points.extend_from_slice(&other.points);
    }
}

/// Kd-tree index over a cloud for nearest-neighbor queries.
pub struct SpatialIndex<T> {
    tree: KdTree<T, 3>,
}

impl<T: Scalar> SpatialIndex<T> {
    pub fn build(cloud: &PointCloud3<T>) -> Self {
        let pts = cloud.points.iter().map(|p| p.to_array()).collect();
        SpatialIndex {
            tree: KdTree::build(pts),
        }
    }

    pub fn len(&self) -> usize {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }

    /// Index and distance of the nearest indexed point.
    pub fn nearest(&self, p: Point3<T>) -> Option<(usize, T)> {
        self.tree.nearest(&p.to_array())
    }
}

/// Voxel-grid downsampling: each occupied voxel contributes the centroid of
/// its member points. Binning is `floor(coordinate / leaf)` per axis.
pub fn voxel_downsample<T: Scalar>(cloud: &PointCloud3<T>, leaf: T) -> Result<PointCloud3<T>> {
    if leaf <= T::zero() {
        return Err(Error::Parameter(format!(
            "voxel leaf must be positive, got {}",
            leaf.as_f64()
        )));
    }
    if cloud.is_empty() {
        return Ok(PointCloud3::new(Vec::new()));
    }
    let mut cells: HashMap<[i64; 3], (Vector3<T>, usize)> = HashMap::new();
    for p in &cloud.points {
        let key = voxel_key(*p, leaf);
        let entry = cells.entry(key).or_insert((Vector3::zeros(), 0));
        entry.0 += p.to_vector();
        entry.1 += 1;
    }
    let mut keyed: Vec<([i64; 3], (Vector3<T>, usize))> = cells.into_iter().collect();
    // deterministic output order regardless of hash state
    keyed.sort_unstable_by_key(|(k, _)| *k);
    let points = keyed
        .into_iter()
        .map(|(_, (sum, n))| Point3::from_vector(sum / T::of_usize(n)))
        .collect();
    Ok(PointCloud3 {
        points,
        georef_origin: cloud.georef_origin,
    })
}

pub(crate) fn voxel_key<T: Scalar>(p: Point3<T>, leaf: T) -> [i64; 3] {
    [
        (p.x / leaf).floor().as_f64() as i64,
        (p.y / leaf).floor().as_f64() as i64,
        (p.z / leaf).floor().as_f64() as i64,
    ]
}

/// Mean distance from each source point to its nearest target point.
pub fn avg_nearest_distance<T: Scalar>(
    source: &PointCloud3<T>,
    target: &SpatialIndex<T>,
) -> Result<T> {
    if source.is_empty() {
        return Err(Error::Metric("source cloud is empty"));
    }
    if target.is_empty() {
        return Err(Error::Metric("target index is empty"));
    }
    let mut acc = T::zero();
    for p in &source.points {
        let (_, d) = target.nearest(*p).expect("nonempty index");
        acc += d;
    }
    Ok(acc / T::of_usize(source.len()))
}
