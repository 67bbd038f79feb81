//! Unbiased squared maximum mean discrepancy with a Gaussian kernel.
//!
//! ```text
//! MMD² = 1/(n(n−1)) Σ_{i≠j} k(x_i, x_j) − 2/(nm) Σ_{i,j} k(x_i, y_j)
//!      + 1/(m(m−1)) Σ_{i≠j} k(y_i, y_j)
//! k(x, y) = exp(−‖x − y‖² / (2h²))
//! ```
//!
//! The estimator can go negative when the two sets are close.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::linalg::{check_dims, sq_dist};

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum Bandwidth {
    /// Median of all pairwise distances in the pooled sample.
    #[default]
    Median,
    Fixed(f64),
}

impl Serialize for Bandwidth {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Bandwidth::Median => s.serialize_str("median-heuristic"),
            Bandwidth::Fixed(h) => s.serialize_f64(*h),
        }
    }
}

impl<'de> Deserialize<'de> for Bandwidth {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Name(String),
            Value(f64),
        }
        match Raw::deserialize(d)? {
            Raw::Name(s) if s == "median-heuristic" || s == "median" => Ok(Bandwidth::Median),
            Raw::Name(s) => Err(serde::de::Error::custom(format!(
                "unknown bandwidth `{s}`, expected \"median-heuristic\" or a number"
            ))),
            Raw::Value(h) if h > 0.0 => Ok(Bandwidth::Fixed(h)),
            Raw::Value(h) => Err(serde::de::Error::custom(format!(
                "bandwidth {h} must be > 0"
            ))),
        }
    }
}

/// Median pairwise Euclidean distance over the union of both sets.
pub fn median_heuristic(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let pooled: Vec<&Vec<f64>> = x.iter().chain(y).collect();
    let mut dists = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in 0..i {
            dists.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    if dists.is_empty() {
        return 0.0;
    }
    let mid = dists.len() / 2;
    let (_, &mut hi, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    if dists.len() % 2 == 1 {
        hi
    } else {
        let lo = dists[..mid]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

fn kernel(a: &[f64], b: &[f64], inv_two_h2: f64) -> f64 {
    let d2 = sq_dist(a, b);
    if d2 == 0.0 {
        1.0
    } else {
        (-d2 * inv_two_h2).exp()
    }
}

/// Unbiased MMD² between pseudo-features and real features of one class.
pub fn mmd_to_truth(pseudo: &[Vec<f64>], real: &[Vec<f64>], bandwidth: Bandwidth) -> Result<f64> {
    let (n, m) = (pseudo.len(), real.len());
    if n < 2 || m < 2 {
        return Err(Error::InvalidArgument(
            "unbiased estimator undefined for fewer than 2 samples per set".into(),
        ));
    }
    let d = pseudo[0].len();
    check_dims(pseudo, d)?;
    check_dims(real, d)?;
    let h = match bandwidth {
        Bandwidth::Median => median_heuristic(pseudo, real),
        Bandwidth::Fixed(h) => h,
    };
    let inv = if h > 0.0 {
        1.0 / (2.0 * h * h)
    } else {
        f64::INFINITY
    };
    let within = |s: &[Vec<f64>]| {
        let mut acc = 0.0;
        for i in 0..s.len() {
            for j in 0..i {
                acc += kernel(&s[i], &s[j], inv);
            }
        }
        2.0 * acc / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for a in pseudo {
        for b in real {
            cross += kernel(a, b, inv);
        }
    }
    Ok(within(pseudo) + within(real) - 2.0 * cross / (n * m) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::{self, GaussianComponent, GmmModel};

    /// Straight transcription of the three double sums.
    fn naive(x: &[Vec<f64>], y: &[Vec<f64>], h: f64) -> f64 {
        let k = |a: &Vec<f64>, b: &Vec<f64>| {
            let d2: f64 = a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum();
            (-d2 / (2.0 * h * h)).exp()
        };
        let (n, m) = (x.len() as f64, y.len() as f64);
        let mut xx = 0.0;
        for i in 0..x.len() {
            for j in 0..x.len() {
                if i != j {
                    xx += k(&x[i], &x[j]);
                }
            }
        }
        let mut yy = 0.0;
        for i in 0..y.len() {
            for j in 0..y.len() {
                if i != j {
                    yy += k(&y[i], &y[j]);
                }
            }
        }
        let mut xy = 0.0;
        for a in x {
            for b in y {
                xy += k(a, b);
            }
        }
        xx / (n * (n - 1.0)) - 2.0 * xy / (n * m) + yy / (m * (m - 1.0))
    }

    #[test]
    fn identical_coincident_pairs_are_zero() {
        let x = vec![vec![1.0, 2.0], vec![1.0, 2.0]];
        assert_eq!(mmd_to_truth(&x, &x, Bandwidth::Median).unwrap(), 0.0);
        assert_eq!(mmd_to_truth(&x, &x, Bandwidth::Fixed(1.0)).unwrap(), 0.0);
    }

    #[test]
    fn identical_distinct_pairs_give_k_minus_one() {
        let x = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        let h = 1.3;
        let k12 = (-2.0f64 / (2.0 * h * h)).exp();
        let v = mmd_to_truth(&x, &x, Bandwidth::Fixed(h)).unwrap();
        assert!((v - (k12 - 1.0)).abs() < 1e-15);
        assert!(v <= 0.0);
    }

    #[test]
    fn shifted_gaussians_are_far_apart() {
        let a = GmmModel::new(vec![GaussianComponent::isotropic(vec![0.0, 0.0], 1.0)]).unwrap();
        let b = GmmModel::new(vec![GaussianComponent::isotropic(vec![3.0, 0.0], 1.0)]).unwrap();
        let x = gmm::sample(&a, 500, 1).unwrap();
        let y = gmm::sample(&b, 500, 2).unwrap();
        let v = mmd_to_truth(&x, &y, Bandwidth::Fixed(1.0)).unwrap();
        assert!((v - naive(&x, &y, 1.0)).abs() < 1e-10);
        assert!(v > 0.5, "{v}");
    }

    #[test]
    fn median_heuristic_small_case() {
        // distances: 1, 2, 1 -> median 1
        let x = vec![vec![0.0], vec![1.0]];
        let y = vec![vec![2.0]];
        assert_eq!(median_heuristic(&x, &y), 1.0);
        // distances 1,3,2,... even count averages the middle pair
        let y2 = vec![vec![3.0], vec![2.0]];
        let mut all = vec![1.0, 3.0, 2.0, 2.0, 1.0, 1.0];
        all.sort_by(f64::total_cmp);
        assert_eq!(median_heuristic(&x, &y2), 0.5 * (all[2] + all[3]));
    }

    #[test]
    fn undefined_for_singletons() {
        let x = vec![vec![0.0]];
        let y = vec![vec![0.0], vec![1.0]];
        assert!(mmd_to_truth(&x, &y, Bandwidth::Median).is_err());
    }

    #[test]
    fn bandwidth_serde() {
        let b: Bandwidth = serde_json::from_str("\"median-heuristic\"").unwrap();
        assert_eq!(b, Bandwidth::Median);
        let b: Bandwidth = serde_json::from_str("2.5").unwrap();
        assert_eq!(b, Bandwidth::Fixed(2.5));
        assert!(serde_json::from_str::<Bandwidth>("-1").is_err());
    }
}
