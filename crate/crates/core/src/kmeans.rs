//! Lloyd's k-means with greedy farthest-point seeding.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{check_dims, sq_dist};
use crate::rng;

#[derive(Clone, Debug)]
pub struct KMeansResult {
    pub centers: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    /// Clusters left without members after the final assignment.
    pub empty_clusters: usize,
    pub iterations: usize,
}

/// First center uniformly at random, then repeatedly the point farthest from
/// all chosen centers (ties go to the lower index).
pub fn farthest_point_seeds<R: Rng + ?Sized>(
    data: &[Vec<f64>],
    k: usize,
    rng: &mut R,
) -> Vec<usize> {
    let n = data.len();
    let mut seeds = vec![rng.random_range(0..n)];
    let mut nearest: Vec<f64> = data.iter().map(|x| sq_dist(x, &data[seeds[0]])).collect();
    while seeds.len() < k {
        let mut best = 0;
        for i in 1..n {
            if nearest[i] > nearest[best] {
                best = i;
            }
        }
        seeds.push(best);
        for (i, x) in data.iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(x, &data[best]));
        }
    }
    seeds
}

fn nearest_center(x: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(x, center);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

pub fn kmeans(data: &[Vec<f64>], k: usize, seed: u64, max_iters: usize) -> Result<KMeansResult> {
    if k == 0 || data.len() < k {
        return Err(Error::InvalidArgument(format!(
            "k-means needs 1 <= k <= n (k = {k}, n = {})",
            data.len()
        )));
    }
    let d = data[0].len();
    check_dims(data, d)?;
    let mut rng = rng::seeded(seed);
    let mut centers: Vec<Vec<f64>> = farthest_point_seeds(data, k, &mut rng)
        .into_iter()
        .map(|i| data[i].clone())
        .collect();
    let mut assignment: Vec<usize> = data.iter().map(|x| nearest_center(x, &centers)).collect();
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (x, &a) in data.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(x) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let next: Vec<usize> = data.iter().map(|x| nearest_center(x, &centers)).collect();
        let changed = next != assignment;
        assignment = next;
        if !changed {
            break;
        }
    }
    let mut counts = vec![0usize; k];
    for &a in &assignment {
        counts[a] += 1;
    }
    Ok(KMeansResult {
        centers,
        assignment,
        empty_clusters: counts.iter().filter(|&&c| c == 0).count(),
        iterations,
    })
}
