//! X-Y grid partition of a cloud into patches with neighbor topology.

use std::collections::BTreeMap;

use crate::cloud::{Point3, PointCloud3};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// (row, col) grid coordinate of a patch; row indexes y, col indexes x.
pub type PatchId = (i32, i32);

/// The subset of a cloud falling in one X-Y grid cell.
#[derive(Clone, Debug)]
pub struct Patch<T> {
    pub id: PatchId,
    pub points: PointCloud3<T>,
    pub centroid: Point3<T>,
}

/// Grid of patches keyed by (row, col). Empty cells are absent.
#[derive(Clone, Debug)]
pub struct PatchGrid<T: Scalar> {
    step: T,
    origin: [T; 2],
    patches: BTreeMap<PatchId, Patch<T>>,
}

impl<T: Scalar> PatchGrid<T> {
    pub fn step(&self) -> T {
        self.step
    }

    pub fn origin(&self) -> [T; 2] {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn get(&self, id: PatchId) -> Option<&Patch<T>> {
        self.patches.get(&id)
    }

    /// Patches in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = &Patch<T>> {
        self.patches.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = PatchId> + '_ {
        self.patches.keys().copied()
    }

    /// The up-to-8 occupied cells adjacent to `id`, in id order.
    pub fn neighbors(&self, id: PatchId) -> Result<Vec<&Patch<T>>> {
        if !self.patches.contains_key(&id) {
            return Err(Error::PatchLookup(id.0, id.1));
        }
        let mut out = Vec::new();
        for dr in -1..=1 {
            for dc in -1..=1 {
                if dr == 0 && dc == 0 {
                    continue;
                }
                if let Some(p) = self.patches.get(&(id.0 + dr, id.1 + dc)) {
                    out.push(p);
                }
            }
        }
        Ok(out)
    }

    /// The patch's points concatenated with the points of every neighbor
    /// holding more than `min_neighbor_points` points.
    pub fn splice_with_neighbors(
        &self,
        id: PatchId,
        min_neighbor_points: usize,
    ) -> Result<PointCloud3<T>> {
        let patch = self
            .patches
            .get(&id)
            .ok_or(Error::PatchLookup(id.0, id.1))?;
        let mut out = patch.points.clone();
        for n in self.neighbors(id)? {
            if n.points.len() > min_neighbor_points {
                out.extend(&n.points);
            }
        }
        Ok(out)
    }
}

/// Step length of one tenth of the scene's larger X-Y extent.
pub fn default_step<T: Scalar>(cloud: &PointCloud3<T>, ratio: T) -> Option<T> {
    let (lo, hi) = cloud.bounds()?;
    let extent = (hi.x - lo.x).max(hi.y - lo.y);
    Some(extent * ratio)
}

/// Partitions a cloud into an X-Y grid with the given step. The grid origin
/// is the component-wise minimum of the cloud's X-Y so ids are non-negative.
pub fn partition<T: Scalar>(cloud: &PointCloud3<T>, step: T) -> Result<PatchGrid<T>> {
    if cloud.is_empty() {
        return Err(Error::Parameter("cannot partition an empty cloud".into()));
    }
    if step <= T::zero() {
        return Err(Error::Parameter(format!(
            "grid step must be positive, got {}",
            step.as_f64()
        )));
    }
    let (lo, _) = cloud.bounds().expect("nonempty cloud");
    let origin = [lo.x, lo.y];

    let mut bins: BTreeMap<PatchId, Vec<Point3<T>>> = BTreeMap::new();
    for p in cloud.iter() {
        let col = ((p.x - origin[0]) / step).floor().as_f64() as i32;
        let row = ((p.y - origin[1]) / step).floor().as_f64() as i32;
        bins.entry((row, col)).or_default().push(*p);
    }

    let patches = bins
        .into_iter()
        .map(|(id, points)| {
            let points = PointCloud3::new(points);
            let centroid = points.centroid().expect("bin is nonempty");
            (
                id,
                Patch {
                    id,
                    points,
                    centroid,
                },
            )
        })
        .collect();

    Ok(PatchGrid {
        step,
        origin,
        patches,
    })
}
