//! Dissimilarities between point clouds.
//!
//! Chamfer distance is the sum, over both directions, of squared distances
//! to the nearest neighbour in the other cloud. [`Reduction::Mean`] divides
//! each direction by its cardinality, the usual convention for reported
//! numbers; training uses [`Reduction::Sum`].

use serde::{Deserialize, Serialize};

use crate::assignment;
use crate::cloud::{sq_dist, Point, PointCloud};
use crate::error::{Error, Result};
use crate::kdtree::KdTree;

/// Default cardinality cap for [`emd_exact`].
pub const EMD_EXACT_CAP: usize = 512;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Reduction::Sum),
            "mean" => Ok(Reduction::Mean),
            other => Err(Error::invalid(format!("unknown reduction {other:?}"))),
        }
    }
}

fn reduce(forward: f64, n_p: usize, backward: f64, n_q: usize, reduction: Reduction) -> f64 {
    match reduction {
        Reduction::Sum => forward + backward,
        Reduction::Mean => forward / n_p as f64 + backward / n_q as f64,
    }
}

/// Nearest neighbours in both directions by exhaustive search. Returns
/// `(p_to_q, q_to_p)` index vectors together with the per-direction sums of
/// squared distances. Ties go to the lowest index.
pub fn nearest_pairs(p: &[Point], q: &[Point]) -> (Vec<usize>, Vec<usize>, f64, f64) {
    let mut p_best = vec![(usize::MAX, f64::INFINITY); p.len()];
    let mut q_best = vec![(usize::MAX, f64::INFINITY); q.len()];
    for (i, a) in p.iter().enumerate() {
        for (j, b) in q.iter().enumerate() {
            let d = sq_dist(a, b);
            if d < p_best[i].1 {
                p_best[i] = (j, d);
            }
            if d < q_best[j].1 {
                q_best[j] = (i, d);
            }
        }
    }
    let fwd = p_best.iter().map(|b| b.1).sum();
    let bwd = q_best.iter().map(|b| b.1).sum();
    (
        p_best.into_iter().map(|b| b.0).collect(),
        q_best.into_iter().map(|b| b.0).collect(),
        fwd,
        bwd,
    )
}

/// Chamfer distance (sum reduction) by exhaustive search.
pub fn chamfer(p: &PointCloud, q: &PointCloud) -> f64 {
    chamfer_with(p, q, Reduction::Sum)
}

pub fn chamfer_with(p: &PointCloud, q: &PointCloud, reduction: Reduction) -> f64 {
    let (_, _, fwd, bwd) = nearest_pairs(p.points(), q.points());
    reduce(fwd, p.len(), bwd, q.len(), reduction)
}

/// Chamfer distance with nearest neighbours from a k-d tree.
pub fn chamfer_indexed(p: &PointCloud, q: &PointCloud) -> f64 {
    chamfer_indexed_with(p, q, Reduction::Sum)
}

pub fn chamfer_indexed_with(p: &PointCloud, q: &PointCloud, reduction: Reduction) -> f64 {
    let one_way = |from: &PointCloud, to: &PointCloud| {
        let tree = KdTree::build(to.points());
        from.points().iter().map(|x| tree.nearest(x).1).sum::<f64>()
    };
    reduce(one_way(p, q), p.len(), one_way(q, p), q.len(), reduction)
}

/// Exact Earth Mover's distance: the minimum over bijections of the mean
/// Euclidean distance between matched points.
pub fn emd_exact(p: &PointCloud, q: &PointCloud) -> Result<f64> {
    emd_exact_capped(p, q, EMD_EXACT_CAP)
}

pub fn emd_exact_capped(p: &PointCloud, q: &PointCloud, cap: usize) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::CardinalityMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    let n = p.len();
    if n > cap {
        return Err(Error::OverCap { cap, got: n });
    }
    let mut cost = Vec::with_capacity(n * n);
    for a in p.points() {
        for b in q.points() {
            cost.push(sq_dist(a, b).sqrt());
        }
    }
    let (_, total) = assignment::solve(&cost, n);
    Ok(total / n as f64)
}

/// Unidirectional Hausdorff distance from `partial` into `full`.
pub fn uhd(partial: &PointCloud, full: &PointCloud) -> f64 {
    let tree = KdTree::build(full.points());
    partial
        .points()
        .iter()
        .map(|x| tree.nearest(x).1)
        .fold(0.0, f64::max)
        .sqrt()
}
