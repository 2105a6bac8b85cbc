//! Balanced kd-tree for nearest-neighbor queries in 2 or 3 dimensions.

use crate::scalar::Scalar;

/// Balanced kd-tree over `[T; D]` points. Built once, queried read-only.
///
/// Nearest-neighbor results agree with brute force; ties may resolve to
/// either point but the returned distance is the true minimum.
pub struct KdTree<T, const D: usize> {
    points: Vec<[T; D]>,
    // index permutation arranged as an implicit median tree
    order: Vec<u32>,
}

trait NnSink<T> {
    fn offer(&mut self, idx: usize, d2: T);
    fn radius2(&self) -> T;
}

struct Best<T> {
    idx: usize,
    d2: T,
}

impl<T: Scalar> NnSink<T> for Best<T> {
    fn offer(&mut self, idx: usize, d2: T) {
        if d2 < self.d2 {
            self.idx = idx;
            self.d2 = d2;
        }
    }
    fn radius2(&self) -> T {
        self.d2
    }
}

struct KBest<T> {
    k: usize,
    // sorted ascending by squared distance
    entries: Vec<(T, usize)>,
}

impl<T: Scalar> NnSink<T> for KBest<T> {
    fn offer(&mut self, idx: usize, d2: T) {
        if self.entries.len() == self.k && d2 >= self.entries[self.k - 1].0 {
            return;
        }
        let pos = self
            .entries
            .partition_point(|&(e, _)| e <= d2);
        self.entries.insert(pos, (d2, idx));
        self.entries.truncate(self.k);
    }
    fn radius2(&self) -> T {
        if self.entries.len() < self.k {
            T::max_value().unwrap()
        } else {
            self.entries[self.k - 1].0
        }
    }
}

impl<T: Scalar, const D: usize> KdTree<T, D> {
    pub fn build(points: Vec<[T; D]>) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        if !points.is_empty() {
            build_recursive(&points, &mut order, 0);
        }
        KdTree { points, order }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, index: usize) -> [T; D] {
        self.points[index]
    }

    /// Index and Euclidean distance of the nearest stored point.
    pub fn nearest(&self, query: &[T; D]) -> Option<(usize, T)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = Best {
            idx: usize::MAX,
            d2: T::max_value().unwrap(),
        };
        self.search(&self.order, 0, query, &mut best);
        Some((best.idx, best.d2.sqrt()))
    }

    /// Up to `k` nearest stored points, closest first.
    pub fn k_nearest(&self, query: &[T; D], k: usize) -> Vec<(usize, T)> {
        let mut sink = KBest {
            k,
            entries: Vec::with_capacity(k + 1),
        };
        if k > 0 && !self.points.is_empty() {
            self.search(&self.order, 0, query, &mut sink);
        }
        sink.entries
            .into_iter()
            .map(|(d2, i)| (i, d2.sqrt()))
            .collect()
    }

    fn search(&self, slab: &[u32], axis: usize, query: &[T; D], sink: &mut impl NnSink<T>) {
        if slab.is_empty() {
            return;
        }
        let mid = slab.len() / 2;
        let idx = slab[mid] as usize;
        let p = &self.points[idx];
        sink.offer(idx, sq_dist(p, query));

        let delta = query[axis] - p[axis];
        let next_axis = (axis + 1) % D;
        let (near, far) = if delta < T::zero() {
            (&slab[..mid], &slab[mid + 1..])
        } else {
            (&slab[mid + 1..], &slab[..mid])
        };
        self.search(near, next_axis, query, sink);
        if delta * delta <= sink.radius2() {
            self.search(far, next_axis, query, sink);
        }
    }
}

fn build_recursive<T: Scalar, const D: usize>(points: &[[T; D]], slab: &mut [u32], axis: usize) {
    if slab.len() <= 1 {
        return;
    }
    let mid = slab.len() / 2;
    slab.select_nth_unstable_by(mid, |&a, &b| {
        points[a as usize][axis]
            .partial_cmp(&points[b as usize][axis])
            .unwrap()
    });
    let next_axis = (axis + 1) % D;
    let (lo, rest) = slab.split_at_mut(mid);
    build_recursive(points, lo, next_axis);
    build_recursive(points, &mut rest[1..], next_axis);
}

fn sq_dist<T: Scalar, const D: usize>(a: &[T; D], b: &[T; D]) -> T {
    let mut acc = T::zero();
    for i in 0..D {
        let d = a[i] - b[i];
        acc += d * d;
    }
    acc
}
