//! Small dense helpers shared by the statistical modules.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn mean(data: &[Vec<f64>]) -> Vec<f64> {
    let d = data[0].len();
    let mut m = vec![0.0; d];
    for x in data {
        for (mj, xj) in m.iter_mut().zip(x) {
            *mj += xj;
        }
    }
    let n = data.len() as f64;
    m.iter_mut().for_each(|v| *v /= n);
    m
}

/// Biased (1/n) covariance, row-major d×d.
#[cfg(test)]
pub fn covariance(data: &[Vec<f64>], mean: &[f64]) -> Vec<f64> {
    let d = mean.len();
    let mut c = vec![0.0; d * d];
    let mut diff = vec![0.0; d];
    for x in data {
        for j in 0..d {
            diff[j] = x[j] - mean[j];
        }
        for a in 0..d {
            let da = diff[a];
            let row = &mut c[a * d..a * d + d];
            for b in a..d {
                row[b] += da * diff[b];
            }
        }
    }
    let n = data.len() as f64;
    for a in 0..d {
        for b in a..d {
            let v = c[a * d + b] / n;
            c[a * d + b] = v;
            c[b * d + a] = v;
        }
    }
    c
}

/// Biased per-dimension variance.
pub fn variances(data: &[Vec<f64>], mean: &[f64]) -> Vec<f64> {
    let mut v = vec![0.0; mean.len()];
    for x in data {
        for j in 0..mean.len() {
            let t = x[j] - mean[j];
            v[j] += t * t;
        }
    }
    let n = data.len() as f64;
    v.iter_mut().for_each(|e| *e /= n);
    v
}

/// Lower Cholesky factor of a row-major symmetric matrix.
pub fn cholesky_lower(cov: &[f64], d: usize) -> Result<DMatrix<f64>> {
    if cov.len() != d * d {
        return Err(Error::Dimension {
            expected: d * d,
            found: cov.len(),
        });
    }
    DMatrix::from_row_slice(d, d, cov)
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::Numeric("covariance is not positive definite".into()))
}

/// Solve `L y = v` in place for lower-triangular `L`.
pub fn forward_substitute(l: &DMatrix<f64>, v: &mut [f64]) {
    let d = v.len();
    for i in 0..d {
        let mut s = v[i];
        for j in 0..i {
            s -= l[(i, j)] * v[j];
        }
        v[i] = s / l[(i, i)];
    }
}

/// `out = mean + L z` for lower-triangular `L`.
pub fn affine_lower(mean: &[f64], l: &DMatrix<f64>, z: &[f64], out: &mut [f64]) {
    let d = mean.len();
    for i in 0..d {
        let mut s = mean[i];
        for j in 0..=i {
            s += l[(i, j)] * z[j];
        }
        out[i] = s;
    }
}

pub fn check_dims(data: &[Vec<f64>], d: usize) -> Result<()> {
    for x in data {
        if x.len() != d {
            return Err(Error::Dimension {
                expected: d,
                found: x.len(),
            });
        }
    }
    Ok(())
}
