//! Point-set kernels: farthest point sampling, k-nearest neighbours and
//! patch grouping.
//!
//! All distances are squared Euclidean. Ties resolve to the lower point index
//! everywhere so every downstream selection is deterministic.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub type Point = [f64; 3];

#[inline]
pub fn squared_distance(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Unordered xyz points with an optional class label.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    pub label: Option<usize>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Contract("a point cloud needs at least one point".into()));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::Contract(alloc::format!(
                "point {i} has a non-finite coordinate"
            )));
        }
        Ok(Self {
            points,
            label: None,
        })
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Centered neighbourhoods around sampled centers.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub centers: Vec<Point>,
    /// `groups × group_size` neighbour coordinates with the center subtracted.
    pub offsets: Vec<Point>,
    /// Source point index of each entry in `offsets`.
    pub indices: Vec<usize>,
    pub group_size: usize,
}

impl PatchSet {
    pub fn groups(&self) -> usize {
        self.centers.len()
    }

    pub fn patch(&self, i: usize) -> &[Point] {
        &self.offsets[i * self.group_size..(i + 1) * self.group_size]
    }

    /// Adds each center back onto its offsets.
    pub fn uncentered(&self) -> Vec<Point> {
        self.offsets
            .iter()
            .enumerate()
            .map(|(n, o)| {
                let c = self.centers[n / self.group_size];
                [o[0] + c[0], o[1] + c[1], o[2] + c[2]]
            })
            .collect()
    }
}

/// Greedy max-min sampling of `groups` center indices starting at
/// `seed_index`, returned in selection order.
pub fn farthest_point_sampling(
    cloud: &PointCloud,
    groups: usize,
    seed_index: usize,
) -> Result<Vec<usize>> {
    let n = cloud.len();
    if groups == 0 || groups > n {
        return Err(Error::Range {
            what: "center count",
            value: groups,
            limit: n,
        });
    }
    if seed_index >= n {
        return Err(Error::Range {
            what: "seed index",
            value: seed_index,
            limit: n,
        });
    }
    let pts = cloud.points();
    let mut min_dist = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut chosen = Vec::with_capacity(groups);
    let mut current = seed_index;
    chosen.push(current);
    taken[current] = true;
    while chosen.len() < groups {
        let c = pts[current];
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in pts.iter().enumerate() {
            let d = squared_distance(p, &c);
            if d < min_dist[i] {
                min_dist[i] = d;
            }
            // already-selected points are never re-picked, even among duplicates
            if !taken[i] && min_dist[i] > best_d {
                best_d = min_dist[i];
                best = i;
            }
        }
        current = best;
        taken[current] = true;
        chosen.push(current);
    }
    Ok(chosen)
}

/// The `k` nearest points to each center, sorted by ascending distance.
/// The center itself is eligible.
pub fn k_nearest_neighbors(
    cloud: &PointCloud,
    centers: &[usize],
    k: usize,
) -> Result<Vec<Vec<usize>>> {
    let n = cloud.len();
    if k == 0 || k > n {
        return Err(Error::Range {
            what: "neighbour count",
            value: k,
            limit: n,
        });
    }
    let pts = cloud.points();
    let mut out = Vec::with_capacity(centers.len());
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(n);
    for &c in centers {
        if c >= n {
            return Err(Error::Range {
                what: "center index",
                value: c,
                limit: n,
            });
        }
        let cp = pts[c];
        keyed.clear();
        keyed.extend(pts.iter().enumerate().map(|(i, p)| (squared_distance(p, &cp), i)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < n {
            keyed.select_nth_unstable_by(k - 1, cmp);
        }
        let head = &mut keyed[..k];
        head.sort_unstable_by(cmp);
        out.push(head.iter().map(|&(_, i)| i).collect());
    }
    Ok(out)
}

/// Gathers each neighbourhood and subtracts its center.
pub fn group_and_center(
    cloud: &PointCloud,
    centers: &[usize],
    neighbors: &[Vec<usize>],
) -> Result<PatchSet> {
    if centers.len() != neighbors.len() {
        return Err(crate::error::shape_err(
            "group_and_center",
            &[centers.len()],
            &[neighbors.len()],
        ));
    }
    let n = cloud.len();
    let k = neighbors.first().map_or(0, Vec::len);
    let pts = cloud.points();
    let mut offsets = Vec::with_capacity(centers.len() * k);
    let mut indices = Vec::with_capacity(centers.len() * k);
    let mut center_pts = Vec::with_capacity(centers.len());
    for (&c, nb) in centers.iter().zip(neighbors) {
        if nb.len() != k {
            return Err(crate::error::shape_err("group_and_center", &[k], &[nb.len()]));
        }
        if c >= n {
            return Err(Error::Range {
                what: "center index",
                value: c,
                limit: n,
            });
        }
        let cp = pts[c];
        center_pts.push(cp);
        for &i in nb {
            let p = pts.get(i).ok_or(Error::Range {
                what: "neighbour index",
                value: i,
                limit: n,
            })?;
            offsets.push([p[0] - cp[0], p[1] - cp[1], p[2] - cp[2]]);
            indices.push(i);
        }
    }
    Ok(PatchSet {
        centers: center_pts,
        offsets,
        indices,
        group_size: k,
    })
}

/// FPS, k-NN and centering in one call.
pub fn make_patches(cloud: &PointCloud, groups: usize, group_size: usize) -> Result<PatchSet> {
    let centers = farthest_point_sampling(cloud, groups, 0)?;
    let nb = k_nearest_neighbors(cloud, &centers, group_size)?;
    group_and_center(cloud, &centers, &nb)
}
