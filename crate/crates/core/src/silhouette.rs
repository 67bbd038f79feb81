//! Silhouette scores over squared Euclidean distances and adaptive choice of
//! the number of mixture components.
//!
//! `C_i` below is the candidate cluster of sample `i` under a trial
//! partition of one class's features, not a class label.
//!
//! * cohesion `a(i)`: mean squared distance to the other members of `C_i`
//! * separation `b(i)`: smallest mean squared distance to another cluster
//! * `s(i) = (b − a) / max(a, b)`
//!
//! A singleton cluster has `a(i) = 0` and therefore `s(i) = 1`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{self, EmConfig};
use crate::kmeans;
use crate::linalg::{check_dims, sq_dist};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CandidateClusterer {
    #[default]
    Kmeans,
    /// Argmax of the responsibilities of a fitted K-component mixture.
    GmmMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KSelectConfig {
    pub k_max: usize,
    pub threshold: f64,
    pub candidate_clusterer: CandidateClusterer,
    pub seed: u64,
}

impl Default for KSelectConfig {
    fn default() -> Self {
        KSelectConfig {
            k_max: 5,
            threshold: 0.1,
            candidate_clusterer: CandidateClusterer::Kmeans,
            seed: 0,
        }
    }
}

impl KSelectConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_max < 2 {
            return Err(Error::config("memory.k_max", "must be >= 2"));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::config("memory.threshold", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Dense cluster indices for arbitrary labels, plus the members of each.
struct Partition {
    dense: Vec<usize>,
    sizes: Vec<usize>,
}

impl Partition {
    fn new(assignment: &[usize], n: usize) -> Result<Self> {
        if assignment.len() != n {
            return Err(Error::Dimension {
                expected: n,
                found: assignment.len(),
            });
        }
        let mut ids = BTreeMap::new();
        for &a in assignment {
            let next = ids.len();
            ids.entry(a).or_insert(next);
        }
        let dense: Vec<usize> = assignment.iter().map(|a| ids[a]).collect();
        let mut sizes = vec![0; ids.len()];
        for &c in &dense {
            sizes[c] += 1;
        }
        Ok(Partition { dense, sizes })
    }

    /// Sum of squared distances from `i` to every member of each cluster.
    fn sums_from(&self, i: usize, data: &[Vec<f64>]) -> Vec<f64> {
        let mut sums = vec![0.0; self.sizes.len()];
        for (j, x) in data.iter().enumerate() {
            if j != i {
                sums[self.dense[j]] += sq_dist(&data[i], x);
            }
        }
        sums
    }

    fn cohesion(&self, i: usize, sums: &[f64]) -> f64 {
        let own = self.dense[i];
        if self.sizes[own] < 2 {
            return 0.0;
        }
        sums[own] / (self.sizes[own] - 1) as f64
    }

    fn separation(&self, i: usize, sums: &[f64]) -> Result<f64> {
        let own = self.dense[i];
        (0..self.sizes.len())
            .filter(|&c| c != own)
            .map(|c| sums[c] / self.sizes[c] as f64)
            .min_by(f64::total_cmp)
            .ok_or_else(|| Error::InvalidArgument("b undefined: only one cluster".into()))
    }
}

fn check(i: usize, assignment: &[usize], data: &[Vec<f64>]) -> Result<Partition> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty data".into()));
    }
    check_dims(data, data[0].len())?;
    if i >= data.len() {
        return Err(Error::InvalidArgument(format!(
            "sample index {i} out of range"
        )));
    }
    Partition::new(assignment, data.len())
}

/// `a(i)`; zero for a singleton cluster (see [`is_singleton`]).
pub fn intra_cohesion(i: usize, assignment: &[usize], data: &[Vec<f64>]) -> Result<f64> {
    let p = check(i, assignment, data)?;
    Ok(p.cohesion(i, &p.sums_from(i, data)))
}

pub fn is_singleton(i: usize, assignment: &[usize]) -> bool {
    assignment.iter().filter(|&&a| a == assignment[i]).count() == 1
}

/// `b(i)`; errors when the partition has a single cluster.
pub fn inter_separation(i: usize, assignment: &[usize], data: &[Vec<f64>]) -> Result<f64> {
    let p = check(i, assignment, data)?;
    p.separation(i, &p.sums_from(i, data))
}

fn score(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == 0.0 {
        0.0
    } else {
        (b - a) / m
    }
}

/// Per-sample silhouette values.
pub fn silhouette_samples(assignment: &[usize], data: &[Vec<f64>]) -> Result<Vec<f64>> {
    let p = check(0, assignment, data)?;
    if p.sizes.len() < 2 {
        return Err(Error::InvalidArgument(
            "b undefined: only one cluster".into(),
        ));
    }
    (0..data.len())
        .map(|i| {
            let sums = p.sums_from(i, data);
            Ok(score(p.cohesion(i, &sums), p.separation(i, &sums)?))
        })
        .collect()
}

pub fn mean_silhouette(assignment: &[usize], data: &[Vec<f64>]) -> Result<f64> {
    let s = silhouette_samples(assignment, data)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KSelection {
    pub k: usize,
    /// Mean silhouette per trial K; `None` where the clusterer left a
    /// cluster empty.
    pub scores: Vec<(usize, Option<f64>)>,
}

/// Pick the component count for one class's features.
pub fn select_k(data: &[Vec<f64>], cfg: &KSelectConfig) -> Result<KSelection> {
    cfg.validate()?;
    if data.len() < 2 * cfg.k_max {
        return Err(Error::InvalidArgument(format!(
            "select_k needs n >= 2·k_max (n = {}, k_max = {})",
            data.len(),
            cfg.k_max
        )));
    }
    check_dims(data, data[0].len())?;
    let mut scores = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    for k in 2..=cfg.k_max {
        let assignment = match candidate_partition(data, k, cfg) {
            Ok(Some(a)) => a,
            Ok(None) => {
                scores.push((k, None));
                continue;
            }
            Err(Error::Numeric(_)) => {
                scores.push((k, None));
                continue;
            }
            Err(e) => return Err(e),
        };
        let s = mean_silhouette(&assignment, data)?;
        scores.push((k, Some(s)));
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((k, s));
        }
    }
    let k = match best {
        Some((k, s)) if s > cfg.threshold => k,
        _ => 1,
    };
    Ok(KSelection { k, scores })
}

fn candidate_partition(
    data: &[Vec<f64>],
    k: usize,
    cfg: &KSelectConfig,
) -> Result<Option<Vec<usize>>> {
    let seed = crate::rng::derive(cfg.seed, &[k as u64]);
    let assignment = match cfg.candidate_clusterer {
        CandidateClusterer::Kmeans => {
            let km = kmeans::kmeans(data, k, seed, 100)?;
            if km.empty_clusters > 0 {
                return Ok(None);
            }
            km.assignment
        }
        CandidateClusterer::GmmMap => {
            let em = EmConfig {
                seed,
                ..EmConfig::default()
            };
            let fit = gmm::fit_em(data, k, &em)?;
            let resp = gmm::e_step(&fit.model, data)?;
            resp.iter()
                .map(|row| {
                    (0..k)
                        .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                        .unwrap()
                })
                .collect()
        }
    };
    let mut used = vec![false; k];
    assignment.iter().for_each(|&a| used[a] = true);
    Ok(used.iter().all(|&u| u).then_some(assignment))
}
