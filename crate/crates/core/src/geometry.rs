//! Point-cloud structuring: farthest point sampling, k-nearest-neighbour
//! patches, patch normalization and Gaussian distance weights.
//!
//! Every tie is resolved through the cloud's canonical order (lexicographic
//! on coordinates, then input index), so the patch layout depends only on
//! the set of points and not on the order they were supplied in.

use std::cmp::Ordering;

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

/// ε inside the square root of the patch scale.
pub const PATCH_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub label: Option<usize>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>, label: Option<usize>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("point cloud is empty".into()));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidInput(format!(
                "point {i} has a non-finite coordinate"
            )));
        }
        Ok(Self { points, label })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Applies `p ↦ s·p + t` to every point.
    pub fn scaled_translated(&self, s: f64, t: Point3) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|p| [s * p[0] + t[0], s * p[1] + t[1], s * p[2] + t[2]])
                .collect(),
            label: self.label,
        }
    }
}

/// Centers and their K nearest neighbours, in (distance, canonical order).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub center_idx: Vec<usize>,
    pub centers: Vec<Point3>,
    /// Row-major `L × K`.
    pub neighbor_idx: Vec<usize>,
    /// Row-major `L × K`.
    pub neighbor_points: Vec<Point3>,
    pub k: usize,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn neighbors(&self, patch: usize) -> &[usize] {
        &self.neighbor_idx[patch * self.k..][..self.k]
    }

    pub fn patch_points(&self, patch: usize) -> &[Point3] {
        &self.neighbor_points[patch * self.k..][..self.k]
    }
}

pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn lex(a: &Point3, b: &Point3) -> Ordering {
    a[0].total_cmp(&b[0])
        .then(a[1].total_cmp(&b[1]))
        .then(a[2].total_cmp(&b[2]))
}

/// `rank[i]` is the position of point `i` in the canonical order.
pub fn canonical_ranks(points: &[Point3]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| lex(&points[a], &points[b]).then(a.cmp(&b)));
    let mut rank = vec![0; points.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    rank
}

/// Greedy max-min selection of `count` points, returned in selection order.
/// The first pick is the canonically smallest point.
pub fn farthest_point_sampling(cloud: &PointCloud, count: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if count == 0 || count > n {
        return Err(Error::Capacity {
            what: "farthest point sampling",
            requested: count,
            available: n,
        });
    }
    let pts = &cloud.points;
    let rank = canonical_ranks(pts);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| rank[i]);

    let mut chosen = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut selected = Vec::with_capacity(count);
    let mut last = order[0];
    loop {
        chosen[last] = true;
        selected.push(last);
        if selected.len() == count {
            break;
        }
        let mut best: Option<usize> = None;
        for &i in &order {
            if chosen[i] {
                continue;
            }
            min_d[i] = min_d[i].min(dist2(&pts[i], &pts[last]));
            if best.is_none_or(|b| min_d[i] > min_d[b]) {
                best = Some(i);
            }
        }
        last = best.expect("count <= n leaves an unchosen point");
    }
    Ok(selected)
}

/// K nearest neighbours of each center (Euclidean), sorted by distance with
/// ties going to the canonically smaller point.
pub fn knn(cloud: &PointCloud, centers: &[usize], k: usize) -> Result<PatchSet> {
    let n = cloud.len();
    if k == 0 || k > n {
        return Err(Error::Capacity {
            what: "knn",
            requested: k,
            available: n,
        });
    }
    let pts = &cloud.points;
    let rank = canonical_ranks(pts);
    let mut neighbor_idx = Vec::with_capacity(centers.len() * k);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(n);
    for &c in centers {
        if c >= n {
            return Err(Error::InvalidInput(format!(
                "center index {c} out of range"
            )));
        }
        scratch.clear();
        scratch.extend((0..n).map(|i| (dist2(&pts[i], &pts[c]), i)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| {
            a.0.total_cmp(&b.0).then(rank[a.1].cmp(&rank[b.1]))
        };
        if k < n {
            scratch.select_nth_unstable_by(k - 1, cmp);
        }
        scratch[..k].sort_by(cmp);
        neighbor_idx.extend(scratch[..k].iter().map(|&(_, i)| i));
    }
    Ok(PatchSet {
        center_idx: centers.to_vec(),
        centers: centers.iter().map(|&c| pts[c]).collect(),
        neighbor_points: neighbor_idx.iter().map(|&i| pts[i]).collect(),
        neighbor_idx,
        k,
    })
}

/// FPS followed by KNN.
pub fn group(cloud: &PointCloud, num_groups: usize, group_size: usize) -> Result<PatchSet> {
    let centers = farthest_point_sampling(cloud, num_groups)?;
    knn(cloud, &centers, group_size)
}

/// Centroid and RMS spread `sqrt(mean ||p - μ||² + ε)` of a patch.
pub fn patch_stats(points: &[Point3]) -> (Point3, f64) {
    let m = points.len() as f64;
    let mut mu = [0.0; 3];
    for p in points {
        for d in 0..3 {
            mu[d] += p[d];
        }
    }
    mu.iter_mut().for_each(|v| *v /= m);
    let ms = points.iter().map(|p| dist2(p, &mu)).sum::<f64>() / m;
    (mu, (ms + PATCH_EPS).sqrt())
}

/// Centroid-relative coordinates divided by the patch RMS spread.
pub fn normalize_patch(points: &[Point3]) -> Vec<Point3> {
    assert!(!points.is_empty(), "normalize_patch on an empty patch");
    let (mu, sigma) = patch_stats(points);
    points
        .iter()
        .map(|p| {
            [
                (p[0] - mu[0]) / sigma,
                (p[1] - mu[1]) / sigma,
                (p[2] - mu[2]) / sigma,
            ]
        })
        .collect()
}

/// `exp(-||p_i - p_c||)` for each point.
pub fn gaussian_weights(points: &[Point3], center: &Point3) -> Vec<f64> {
    points
        .iter()
        .map(|p| (-dist2(p, center).sqrt()).exp())
        .collect()
}
