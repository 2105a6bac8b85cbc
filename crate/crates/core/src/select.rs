//! Coarse matching: salient patch selection, annulus candidate search, and
//! descriptor-based filtering.

use std::collections::BTreeMap;

use crate::cloud::Point3;
use crate::descriptor::{pearson, Descriptor640};
use crate::error::{Error, Result};
use crate::grid::{PatchGrid, PatchId};
use crate::scalar::Scalar;

/// Per-patch descriptors, keyed by patch id. Built once per grid and shared
/// read-only by all candidate queries.
pub type DescriptorCache<T> = BTreeMap<PatchId, Descriptor640<T>>;

#[derive(Clone, Copy, Debug)]
pub struct SelectionParams<T> {
    /// Minimum point count for a LiDAR patch to be considered salient.
    pub eta: usize,
    /// Annulus half-width ratio: the candidate ring is [(1-lambda)E, (1+lambda)E].
    pub lambda: T,
    /// Angular half-window around the origin-to-centroid direction.
    pub phi: T,
    /// Minimum descriptor correlation for a candidate to survive.
    pub rho_min: T,
    /// Minimum average neighbor correlation for a candidate to survive.
    pub neighbor_rho_min: T,
    /// Minimum point count for a neighbor patch to join the comparison.
    pub neighbor_min_points: usize,
}

impl<T: Scalar> Default for SelectionParams<T> {
    fn default() -> Self {
        SelectionParams {
            eta: 200,
            lambda: T::of(0.3),
            phi: T::of(std::f64::consts::FRAC_PI_3),
            rho_min: T::of(0.6),
            neighbor_rho_min: T::of(0.5),
            neighbor_min_points: 200,
        }
    }
}

impl<T: Scalar> SelectionParams<T> {
    pub fn validate(&self) -> Result<()> {
        if self.lambda <= T::zero() || self.lambda >= T::one() {
            return Err(Error::Parameter("lambda must be in (0, 1)".into()));
        }
        if self.phi <= T::zero() || self.phi > T::pi() {
            return Err(Error::Parameter("phi must be in (0, pi]".into()));
        }
        if self.rho_min < -T::one() || self.rho_min > T::one() {
            return Err(Error::Parameter("rho_min must be in [-1, 1]".into()));
        }
        Ok(())
    }
}

/// A visual candidate patch with its descriptor correlation to the LiDAR
/// patch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate<T> {
    pub id: PatchId,
    pub rho: T,
}

/// Candidate visual patches for one LiDAR patch, sorted by correlation
/// descending (ids break ties deterministically).
#[derive(Clone, Debug)]
pub struct CandidateSet<T> {
    pub lidar_patch_id: PatchId,
    pub candidates: Vec<Candidate<T>>,
}

impl<T: Scalar> CandidateSet<T> {
    fn sort(&mut self) {
        self.candidates.sort_by(|a, b| {
            b.rho
                .partial_cmp(&a.rho)
                .unwrap()
                .then_with(|| a.id.cmp(&b.id))
        });
    }
}

/// Patches with a point count strictly greater than `eta`, in id order.
pub fn select_salient<T: Scalar>(lidar_grid: &PatchGrid<T>, eta: usize) -> Vec<PatchId> {
    lidar_grid
        .iter()
        .filter(|p| p.points.len() > eta)
        .map(|p| p.id)
        .collect()
}

/// Visual patches whose points reach the ring [(1-lambda)E, (1+lambda)E]
/// around the GNSS origin and whose centroid direction lies within phi of
/// the origin-to-LiDAR-centroid direction. E is the X-Y distance between
/// the origin and the LiDAR patch centroid.
pub fn annulus_candidates<T: Scalar>(
    visual_grid: &PatchGrid<T>,
    gnss_origin: Point3<T>,
    lidar_centroid: Point3<T>,
    lambda: T,
    phi: T,
) -> Result<Vec<PatchId>> {
    let e = gnss_origin.distance_xy(lidar_centroid);
    if e <= T::zero() {
        return Err(Error::Geometry(
            "LiDAR patch centroid coincides with the GNSS origin",
        ));
    }
    let r_outer = (T::one() + lambda) * e;
    let r_inner = (T::one() - lambda) * e;
    let ref_dir = [
        lidar_centroid.x - gnss_origin.x,
        lidar_centroid.y - gnss_origin.y,
    ];

    let mut out = Vec::new();
    for patch in visual_grid.iter() {
        let in_ring = patch.points.iter().any(|p| {
            let d = gnss_origin.distance_xy(*p);
            d >= r_inner && d <= r_outer
        });
        if !in_ring {
            continue;
        }
        let cand_dir = [
            patch.centroid.x - gnss_origin.x,
            patch.centroid.y - gnss_origin.y,
        ];
        if angle_between(ref_dir, cand_dir) <= phi {
            out.push(patch.id);
        }
    }
    Ok(out)
}

/// Unsigned angle between two X-Y direction vectors, in [0, pi]. A zero
/// vector counts as aligned.
fn angle_between<T: Scalar>(a: [T; 2], b: [T; 2]) -> T {
    let na = (a[0] * a[0] + a[1] * a[1]).sqrt();
    let nb = (b[0] * b[0] + b[1] * b[1]).sqrt();
    if na == T::zero() || nb == T::zero() {
        return T::zero();
    }
    let cos = ((a[0] * b[0] + a[1] * b[1]) / (na * nb))
        .min(T::one())
        .max(-T::one());
    cos.acos()
}

/// Scores each candidate id against the LiDAR descriptor and keeps exactly
/// those with correlation strictly above `rho_min`. Candidates without a
/// cached descriptor (or with zero variance) are treated as non-matches.
pub fn descriptor_filter<T: Scalar>(
    lidar_patch_id: PatchId,
    lidar_desc: &Descriptor640<T>,
    candidate_ids: &[PatchId],
    visual_descriptors: &DescriptorCache<T>,
    rho_min: T,
) -> CandidateSet<T> {
    let mut set = CandidateSet {
        lidar_patch_id,
        candidates: Vec::new(),
    };
    for &id in candidate_ids {
        let Some(desc) = visual_descriptors.get(&id) else {
            continue;
        };
        let Ok(rho) = pearson(lidar_desc, desc) else {
            continue;
        };
        if rho > rho_min {
            set.candidates.push(Candidate { id, rho });
        }
    }
    set.sort();
    set
}

/// Compares the neighborhoods of the LiDAR patch and each candidate: for
/// every qualifying LiDAR-neighbor descriptor, takes its best correlation
/// against any qualifying candidate-neighbor descriptor (direction-free,
/// reuse allowed), and averages the maxima. Candidates below
/// `neighbor_rho_min` are dropped; candidates with no qualifying neighbors
/// on either side are retained unchanged.
#[allow(clippy::too_many_arguments)]
pub fn neighbor_filter<T: Scalar>(
    lidar_id: PatchId,
    candidates: CandidateSet<T>,
    lidar_grid: &PatchGrid<T>,
    visual_grid: &PatchGrid<T>,
    lidar_descriptors: &DescriptorCache<T>,
    visual_descriptors: &DescriptorCache<T>,
    params: &SelectionParams<T>,
) -> Result<CandidateSet<T>> {
    let lidar_neighbor_descs: Vec<&Descriptor640<T>> = lidar_grid
        .neighbors(lidar_id)?
        .into_iter()
        .filter(|p| p.points.len() > params.neighbor_min_points)
        .filter_map(|p| lidar_descriptors.get(&p.id))
        .collect();

    if lidar_neighbor_descs.is_empty() {
        return Ok(candidates);
    }

    let mut out = CandidateSet {
        lidar_patch_id: candidates.lidar_patch_id,
        candidates: Vec::new(),
    };
    for cand in candidates.candidates {
        let cand_neighbor_descs: Vec<&Descriptor640<T>> = visual_grid
            .neighbors(cand.id)?
            .into_iter()
            .filter(|p| p.points.len() > params.neighbor_min_points)
            .filter_map(|p| visual_descriptors.get(&p.id))
            .collect();
        if cand_neighbor_descs.is_empty() {
            out.candidates.push(cand);
            continue;
        }

        let mut sum = T::zero();
        for ld in &lidar_neighbor_descs {
            let mut best = -T::one();
            for cd in &cand_neighbor_descs {
                if let Ok(rho) = pearson(ld, cd) {
                    best = best.max(rho);
                }
            }
            sum += best;
        }
        let avg = sum / T::of_usize(lidar_neighbor_descs.len());
        if avg >= params.neighbor_rho_min {
            out.candidates.push(cand);
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::PointCloud3;
    use crate::descriptor::BIN_COUNT;
    use crate::grid::partition;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_with_patch_sizes(sizes: &[(PatchId, usize)]) -> PatchGrid<f64> {
        let mut pts = Vec::new();
        for &((row, col), n) in sizes {
            for k in 0..n {
                pts.push(Point3::new(
                    col as f64 * 10.0 + 1.0 + 0.001 * k as f64,
                    row as f64 * 10.0 + 1.0,
                    0.0,
                ));
            }
        }
        partition(&PointCloud3::new(pts), 10.0).unwrap()
    }

    #[test]
    fn salient_threshold_is_strict() {
        let grid = grid_with_patch_sizes(&[((0, 0), 5), ((0, 1), 50), ((0, 2), 500)]);
        assert_eq!(select_salient(&grid, 100), vec![(0, 2)]);
        assert_eq!(select_salient(&grid, 50), vec![(0, 2)]);
        assert_eq!(select_salient(&grid, 0).len(), 3);
    }

    #[test]
    fn salient_matches_brute_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let sizes: Vec<(PatchId, usize)> = (0..6)
            .flat_map(|r| (0..6).map(move |c| ((r, c), 0)))
            .map(|(id, _)| (id, rng.gen_range(1..100)))
            .collect();
        let grid = grid_with_patch_sizes(&sizes);
        let mut counts: Vec<usize> = sizes.iter().map(|&(_, n)| n).collect();
        counts.sort_unstable();
        let eta = counts[counts.len() / 2];
        let expect: Vec<PatchId> = {
            let mut v: Vec<PatchId> = sizes
                .iter()
                .filter(|&&(_, n)| n > eta)
                .map(|&(id, _)| id)
                .collect();
            v.sort_unstable();
            v
        };
        assert_eq!(select_salient(&grid, eta), expect);
    }

    #[test]
    fn annulus_ring_arithmetic() {
        // lambda 0.2, E = 10: ring is [8, 12]
        let mut pts: Vec<Point3<f64>> = vec![Point3::new(10.0, 0.0, 0.0)];
        // far patch entirely at radius 20
        pts.push(Point3::new(20.0, 0.0, 0.0));
        let grid = partition(&PointCloud3::new(pts), 4.0).unwrap();
        let origin = Point3::new(0.0, 0.0, 0.0);
        let lidar_centroid = Point3::new(10.0, 0.0, 0.0);
        let ids = annulus_candidates(&grid, origin, lidar_centroid, 0.2, 0.5).unwrap();
        // only the patch containing the radius-10 point qualifies
        assert_eq!(ids.len(), 1);
        let p = grid.get(ids[0]).unwrap();
        assert!((p.centroid.x - 10.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_origin_errors() {
        let grid = grid_with_patch_sizes(&[((0, 0), 5)]);
        let origin = Point3::new(1.0, 1.0, 0.0);
        assert!(matches!(
            annulus_candidates(&grid, origin, origin, 0.3, 1.0),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn annulus_matches_geometric_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cloud = PointCloud3::new(
            (0..4000)
                .map(|_| {
                    Point3::new(
                        rng.gen_range(-60.0..60.0),
                        rng.gen_range(-60.0..60.0),
                        rng.gen_range(0.0..5.0),
                    )
                })
                .collect(),
        );
        let grid = partition(&cloud, 8.0).unwrap();
        let origin = Point3::new(3.0, -2.0, 0.0);
        let lidar_centroid = Point3::new(25.0, 14.0, 0.0);
        let (lambda, phi) = (0.3, std::f64::consts::FRAC_PI_4);
        let got = annulus_candidates(&grid, origin, lidar_centroid, lambda, phi).unwrap();

        let e = ((25.0f64 - 3.0).powi(2) + (14.0f64 + 2.0).powi(2)).sqrt();
        let (r_in, r_out) = ((1.0 - lambda) * e, (1.0 + lambda) * e);
        let ref_angle = (14.0f64 + 2.0).atan2(25.0 - 3.0);
        let mut expect = Vec::new();
        for patch in grid.iter() {
            let hit = patch.points.iter().any(|p| {
                let d = ((p.x - 3.0).powi(2) + (p.y + 2.0).powi(2)).sqrt();
                (r_in..=r_out).contains(&d)
            });
            if !hit {
                continue;
            }
            let ang = (patch.centroid.y + 2.0).atan2(patch.centroid.x - 3.0);
            let mut diff = (ang - ref_angle).abs();
            if diff > std::f64::consts::PI {
                diff = std::f64::consts::TAU - diff;
            }
            if diff <= phi {
                expect.push(patch.id);
            }
        }
        assert_eq!(got, expect);
        assert!(!got.is_empty());
    }

    #[test]
    fn annulus_monotone_in_lambda_and_phi() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cloud = PointCloud3::new(
            (0..2000)
                .map(|_| {
                    Point3::new(rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0), 0.0)
                })
                .collect(),
        );
        let grid = partition(&cloud, 6.0).unwrap();
        let origin = Point3::new(0.0, 0.0, 0.0);
        let centroid = Point3::new(20.0, 5.0, 0.0);
        let base = annulus_candidates(&grid, origin, centroid, 0.2, 0.8).unwrap();
        let wider_ring = annulus_candidates(&grid, origin, centroid, 0.5, 0.8).unwrap();
        let wider_angle = annulus_candidates(&grid, origin, centroid, 0.2, 2.0).unwrap();
        assert!(base.iter().all(|id| wider_ring.contains(id)));
        assert!(base.iter().all(|id| wider_angle.contains(id)));
    }

    fn desc_from_profile(seed: u64) -> Descriptor640<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Descriptor640::from_bins((0..BIN_COUNT).map(|_| rng.gen_range(0.0..1.0)).collect())
            .unwrap()
    }

    /// Mix of `base` and an independent profile achieving a target-ish rho.
    fn correlated_with(base: &Descriptor640<f64>, weight: f64, seed: u64) -> Descriptor640<f64> {
        let other = desc_from_profile(seed);
        Descriptor640::from_bins(
            base.bins()
                .iter()
                .zip(other.bins())
                .map(|(a, b)| weight * a + (1.0 - weight) * b)
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn descriptor_filter_strict_threshold() {
        let lidar = desc_from_profile(1);
        let mut cache = DescriptorCache::new();
        cache.insert((0, 0), lidar.clone());
        cache.insert((0, 1), correlated_with(&lidar, 0.9, 2));
        cache.insert((0, 2), correlated_with(&lidar, 0.1, 3));
        cache.insert((0, 3), desc_from_profile(4));
        let ids = vec![(0, 0), (0, 1), (0, 2), (0, 3)];
        let set = descriptor_filter((5, 5), &lidar, &ids, &cache, 0.6);
        assert!(set.candidates.iter().any(|c| c.id == (0, 0) && c.rho > 0.999));
        assert!(set.candidates.iter().all(|c| c.rho > 0.6));
        // sorted descending
        for w in set.candidates.windows(2) {
            assert!(w[0].rho >= w[1].rho);
        }
        // exact-threshold candidates are removed: check with rho == rho_min
        let exact = set.candidates[0].rho;
        let set2 = descriptor_filter((5, 5), &lidar, &ids, &cache, exact);
        assert!(set2.candidates.iter().all(|c| c.rho > exact));
    }

    #[test]
    fn descriptor_filter_matches_formula_oracle() {
        let lidar = desc_from_profile(21);
        let mut cache = DescriptorCache::new();
        let ids: Vec<PatchId> = (0..8).map(|i| (0, i)).collect();
        for &id in &ids {
            cache.insert(id, correlated_with(&lidar, id.1 as f64 / 8.0, 100 + id.1 as u64));
        }
        let set = descriptor_filter((1, 1), &lidar, &ids, &cache, 0.3);
        // oracle: direct Pearson over the raw bins
        for cand in &set.candidates {
            let bins = cache[&cand.id].bins();
            let x = lidar.bins();
            let n = x.len() as f64;
            let mx = x.iter().sum::<f64>() / n;
            let my = bins.iter().sum::<f64>() / n;
            let num: f64 = x.iter().zip(bins).map(|(a, b)| (a - mx) * (b - my)).sum();
            let dx = x.iter().map(|a| (a - mx).powi(2)).sum::<f64>().sqrt();
            let dy = bins.iter().map(|b| (b - my).powi(2)).sum::<f64>().sqrt();
            let rho = num / (dx * dy);
            assert!((cand.rho - rho).abs() < 1e-12);
            assert!(rho > 0.3);
        }
        // contractive
        assert!(set.candidates.len() <= ids.len());
    }

    fn three_by_three(origin_col: i32) -> Vec<(PatchId, usize)> {
        let mut v = Vec::new();
        for r in 0..3 {
            for c in 0..3 {
                v.push(((r, c + origin_col), 300));
            }
        }
        v
    }

    #[test]
    fn neighbor_filter_keeps_permuted_match() {
        // lidar grid 3x3, candidate grid 3x3 with identical neighbor
        // descriptors assigned in a different arrangement
        let lidar_grid = grid_with_patch_sizes(&three_by_three(0));
        let visual_grid = grid_with_patch_sizes(&three_by_three(0));

        let mut lidar_cache = DescriptorCache::new();
        let mut visual_cache = DescriptorCache::new();
        let profiles: Vec<Descriptor640<f64>> = (0..9).map(|i| desc_from_profile(i)).collect();
        let mut k = 0;
        for r in 0..3 {
            for c in 0..3 {
                lidar_cache.insert((r, c), profiles[k].clone());
                // reversed assignment on the visual side keeps the same
                // neighbor profile multiset around the center
                visual_cache.insert((r, c), profiles[8 - k].clone());
                k += 1;
            }
        }

        let candidates = CandidateSet {
            lidar_patch_id: (1, 1),
            candidates: vec![Candidate { id: (1, 1), rho: 0.9 }],
        };
        let params = SelectionParams {
            neighbor_min_points: 100,
            neighbor_rho_min: 0.99,
            ..Default::default()
        };
        let out = neighbor_filter(
            (1, 1),
            candidates,
            &lidar_grid,
            &visual_grid,
            &lidar_cache,
            &visual_cache,
            &params,
        )
        .unwrap();
        // every lidar-neighbor profile exists somewhere among the candidate
        // neighbors, so the direction-free average is 1
        assert_eq!(out.candidates.len(), 1);
    }

    #[test]
    fn neighbor_filter_vacuous_without_neighbors() {
        let lidar_grid = grid_with_patch_sizes(&[((0, 0), 300)]);
        let visual_grid = grid_with_patch_sizes(&three_by_three(0));
        let visual_cache = DescriptorCache::new();
        let lidar_cache = DescriptorCache::new();
        let candidates = CandidateSet {
            lidar_patch_id: (0, 0),
            candidates: vec![
                Candidate { id: (1, 1), rho: 0.8 },
                Candidate { id: (0, 0), rho: 0.7 },
            ],
        };
        let out = neighbor_filter(
            (0, 0),
            candidates.clone(),
            &lidar_grid,
            &visual_grid,
            &lidar_cache,
            &visual_cache,
            &SelectionParams::default(),
        )
        .unwrap();
        assert_eq!(out.candidates.len(), candidates.candidates.len());
    }

    #[test]
    fn neighbor_filter_matches_assignment_oracle() {
        let lidar_grid = grid_with_patch_sizes(&three_by_three(0));
        let visual_grid = grid_with_patch_sizes(&three_by_three(0));
        let mut lidar_cache = DescriptorCache::new();
        let mut visual_cache = DescriptorCache::new();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for r in 0..3 {
            for c in 0..3 {
                lidar_cache.insert((r, c), desc_from_profile(rng.gen()));
                visual_cache.insert((r, c), desc_from_profile(rng.gen()));
            }
        }
        let candidates = CandidateSet {
            lidar_patch_id: (1, 1),
            candidates: vec![
                Candidate { id: (1, 1), rho: 0.9 },
                Candidate { id: (0, 0), rho: 0.8 },
                Candidate { id: (2, 2), rho: 0.7 },
            ],
        };
        let params = SelectionParams {
            neighbor_min_points: 100,
            neighbor_rho_min: 0.02,
            ..Default::default()
        };
        let out = neighbor_filter(
            (1, 1),
            candidates.clone(),
            &lidar_grid,
            &visual_grid,
            &lidar_cache,
            &visual_cache,
            &params,
        )
        .unwrap();

        // oracle: exhaustive max-per-lidar-neighbor average
        let mut expect = Vec::new();
        for cand in &candidates.candidates {
            let lids: Vec<PatchId> = lidar_grid
                .neighbors((1, 1))
                .unwrap()
                .iter()
                .map(|p| p.id)
                .collect();
            let cids: Vec<PatchId> = visual_grid
                .neighbors(cand.id)
                .unwrap()
                .iter()
                .map(|p| p.id)
                .collect();
            let mut sum = 0.0;
            for l in &lids {
                let mut best = -1.0f64;
                for c in &cids {
                    let rho = pearson(&lidar_cache[l], &visual_cache[c]).unwrap();
                    best = best.max(rho);
                }
                sum += best;
            }
            let avg = sum / lids.len() as f64;
            if avg >= params.neighbor_rho_min {
                expect.push(cand.id);
            }
        }
        let got: Vec<PatchId> = out.candidates.iter().map(|c| c.id).collect();
        let mut expect_sorted = expect.clone();
        expect_sorted.sort_unstable();
        let mut got_sorted = got.clone();
        got_sorted.sort_unstable();
        assert_eq!(got_sorted, expect_sorted);
        // contractive
        assert!(out.candidates.len() <= candidates.candidates.len());
    }
}
