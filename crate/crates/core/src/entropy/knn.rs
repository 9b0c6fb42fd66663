use std::cmp::Ordering;

use ndarray::{ArrayView1, ArrayView2};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub distance: f64,
    pub index: usize,
}

pub fn euclidean(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn by_distance_then_index(a: &Neighbor, b: &Neighbor) -> Ordering {
    a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index))
}

/// k-th nearest other point of each of `n` points under an arbitrary
/// distance. Brute force; ties go to the lower index.
pub fn knn_by(n: usize, k: usize, dist: impl Fn(usize, usize) -> f64) -> Result<Vec<Neighbor>> {
    if k == 0 || k >= n {
        return Err(Error::InvalidArgument(format!("k = {k} needs 1 <= k < {n} points")));
    }
    let mut scratch = Vec::with_capacity(n - 1);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        scratch.clear();
        scratch.extend((0..n).filter(|&j| j != i).map(|j| Neighbor { distance: dist(i, j), index: j }));
        let (_, kth, _) = scratch.select_nth_unstable_by(k - 1, by_distance_then_index);
        out.push(*kth);
    }
    Ok(out)
}

/// k-th nearest neighbour of every row under the Euclidean metric.
pub fn knn_query(points: ArrayView2<f64>, k: usize) -> Result<Vec<Neighbor>> {
    knn_by(points.nrows(), k, |i, j| euclidean(points.row(i), points.row(j)))
}
