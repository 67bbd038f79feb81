//! Gaussian mixture models: log-domain densities, EM fitting and sampling.
//!
//! Covariances are full, row-major `d × d`. All density evaluation goes
//! through a lower Cholesky factor and stays in the log domain; with
//! embedding dimensions in the hundreds the linear-domain density underflows
//! for every point.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::kmeans;
use crate::linalg::{self, affine_lower, check_dims, cholesky_lower, forward_substitute};
use crate::rng::{self, DmrRng};

const WEIGHT_SUM_TOL: f64 = 1e-12;
/// Soft count below which a component is considered collapsed.
pub const DEGENERATE_MASS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Row-major `d × d`.
    pub covariance: Vec<f64>,
}

impl GaussianComponent {
    pub fn new(weight: f64, mean: Vec<f64>, covariance: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if covariance.len() != d * d {
            return Err(Error::Dimension {
                expected: d * d,
                found: covariance.len(),
            });
        }
        if !(weight > 0.0 && weight <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "component weight {weight} outside (0, 1]"
            )));
        }
        for a in 0..d {
            for b in 0..a {
                let (x, y) = (covariance[a * d + b], covariance[b * d + a]);
                if (x - y).abs() > 1e-9 * (1.0 + x.abs().max(y.abs())) {
                    return Err(Error::InvalidArgument(format!(
                        "covariance not symmetric at ({a}, {b})"
                    )));
                }
            }
        }
        Ok(GaussianComponent {
            weight,
            mean,
            covariance,
        })
    }

    /// Unit-weight isotropic component `N(mean, var·I)`.
    pub fn isotropic(mean: Vec<f64>, var: f64) -> Self {
        let d = mean.len();
        let mut covariance = vec![0.0; d * d];
        for j in 0..d {
            covariance[j * d + j] = var;
        }
        GaussianComponent {
            weight: 1.0,
            mean,
            covariance,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    components: Vec<GaussianComponent>,
    dim: usize,
}

impl GmmModel {
    pub fn new(components: Vec<GaussianComponent>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::InvalidArgument("mixture needs at least one component".into()))?;
        let dim = first.dim();
        for c in &components {
            if c.dim() != dim || c.covariance.len() != dim * dim {
                return Err(Error::Dimension {
                    expected: dim,
                    found: c.dim(),
                });
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidArgument(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        Ok(GmmModel { components, dim })
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    /// Mean of the mixture as a whole.
    pub fn mixture_mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for c in &self.components {
            for (mj, cj) in m.iter_mut().zip(&c.mean) {
                *mj += c.weight * cj;
            }
        }
        m
    }

    /// Covariance of the mixture as a whole (law of total covariance).
    pub fn mixture_covariance(&self) -> Vec<f64> {
        let d = self.dim;
        let mu = self.mixture_mean();
        let mut s = vec![0.0; d * d];
        for c in &self.components {
            for a in 0..d {
                for b in 0..d {
                    s[a * d + b] += c.weight
                        * (c.covariance[a * d + b] + (c.mean[a] - mu[a]) * (c.mean[b] - mu[b]));
                }
            }
        }
        s
    }

    pub fn factor(&self) -> Result<Vec<FactoredComponent>> {
        self.components.iter().map(FactoredComponent::new).collect()
    }

    /// "DMRG" packed binary encoding.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(b"DMRG");
        w.u32(GMM_FORMAT_VERSION);
        w.u32(self.dim as u32);
        w.u32(self.k() as u32);
        for c in &self.components {
            w.f64(c.weight);
            w.f64s(&c.mean);
            w.f64s(&c.covariance);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let model = Self::read(&mut r)?;
        if !r.is_empty() {
            return Err(r.corrupt("trailing bytes after mixture"));
        }
        Ok(model)
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        r.magic(b"DMRG")?;
        let version = r.u32()?;
        if version != GMM_FORMAT_VERSION {
            return Err(r.corrupt(format!("unsupported version {version}")));
        }
        let d = r.u32()? as usize;
        let k = r.u32()? as usize;
        if k == 0 {
            return Err(r.corrupt("mixture with zero components"));
        }
        let mut comps = Vec::with_capacity(k);
        for _ in 0..k {
            let weight = r.f64()?;
            let mean = r.f64s(d)?;
            let covariance = r.f64s(d * d)?;
            comps.push(GaussianComponent {
                weight,
                mean,
                covariance,
            });
        }
        let at = r.offset();
        GmmModel::new(comps).map_err(|e| Error::Corrupt {
            offset: at,
            msg: e.to_string(),
        })
    }
}

pub const GMM_FORMAT_VERSION: u32 = 1;

/// A component with its Cholesky factor and normalising constant cached.
#[derive(Clone, Debug)]
pub struct FactoredComponent {
    pub log_weight: f64,
    pub mean: Vec<f64>,
    pub chol: DMatrix<f64>,
    /// `-½ (d ln 2π + ln |Σ|)`
    log_norm: f64,
}

impl FactoredComponent {
    pub fn new(comp: &GaussianComponent) -> Result<Self> {
        let d = comp.dim();
        let chol = cholesky_lower(&comp.covariance, d)?;
        let log_det: f64 = 2.0 * (0..d).map(|i| chol[(i, i)].ln()).sum::<f64>();
        if !log_det.is_finite() {
            return Err(Error::Numeric(
                "covariance determinant is not finite".into(),
            ));
        }
        Ok(FactoredComponent {
            log_weight: comp.weight.ln(),
            mean: comp.mean.clone(),
            chol,
            log_norm: -0.5 * (d as f64 * (2.0 * PI).ln() + log_det),
        })
    }

    /// Log density of the (unweighted) component at `x`.
    pub fn logpdf(&self, x: &[f64]) -> f64 {
        let mut v: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        forward_substitute(&self.chol, &mut v);
        let maha: f64 = v.iter().map(|t| t * t).sum();
        self.log_norm - 0.5 * maha
    }
}

fn log_sum_exp(vals: &[f64]) -> f64 {
    let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn check_point(x: &[f64], d: usize) -> Result<()> {
    if x.len() != d {
        return Err(Error::Dimension {
            expected: d,
            found: x.len(),
        });
    }
    Ok(())
}

pub fn gaussian_logpdf(x: &[f64], comp: &GaussianComponent) -> Result<f64> {
    check_point(x, comp.dim())?;
    Ok(FactoredComponent::new(comp)?.logpdf(x))
}

fn mixture_logpdf_factored(x: &[f64], comps: &[FactoredComponent], buf: &mut Vec<f64>) -> f64 {
    buf.clear();
    buf.extend(comps.iter().map(|c| c.log_weight + c.logpdf(x)));
    log_sum_exp(buf)
}

pub fn mixture_logpdf(x: &[f64], model: &GmmModel) -> Result<f64> {
    check_point(x, model.dim())?;
    let comps = model.factor()?;
    Ok(mixture_logpdf_factored(x, &comps, &mut Vec::new()))
}

pub fn neg_log_likelihood(model: &GmmModel, data: &[Vec<f64>]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty data".into()));
    }
    check_dims(data, model.dim())?;
    let comps = model.factor()?;
    let mut buf = Vec::with_capacity(comps.len());
    Ok(-data
        .iter()
        .map(|x| mixture_logpdf_factored(x, &comps, &mut buf))
        .sum::<f64>())
}

/// Responsibilities (`n × K`) and the total log-likelihood.
fn e_step_factored(comps: &[FactoredComponent], data: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, f64)> {
    let mut ll = 0.0;
    let mut resp = Vec::with_capacity(data.len());
    for (i, x) in data.iter().enumerate() {
        let mut row: Vec<f64> = comps.iter().map(|c| c.log_weight + c.logpdf(x)).collect();
        let lse = log_sum_exp(&row);
        if !lse.is_finite() {
            return Err(Error::Numeric(format!(
                "all component densities vanish at sample {i}"
            )));
        }
        for r in row.iter_mut() {
            *r = (*r - lse).exp();
        }
        ll += lse;
        resp.push(row);
    }
    Ok((resp, ll))
}

pub fn e_step(model: &GmmModel, data: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    check_dims(data, model.dim())?;
    let comps = model.factor()?;
    Ok(e_step_factored(&comps, data)?.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EmInit {
    #[default]
    KmeansSeeded,
    RandomResponsibilities,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop once the relative log-likelihood improvement drops below this.
    pub rel_tol: f64,
    /// Diagonal regulariser added to every covariance in each M-step. Scaled
    /// by the mean diagonal of the data covariance unless `absolute_jitter`.
    pub cov_jitter: f64,
    pub absolute_jitter: bool,
    pub init: EmInit,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iters: 200,
            rel_tol: 1e-6,
            cov_jitter: 1e-6,
            absolute_jitter: false,
            init: EmInit::KmeansSeeded,
            seed: 0,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::config("em.max_iters", "must be >= 1"));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::config("em.rel_tol", "must be > 0"));
        }
        if !(self.cov_jitter >= 0.0) {
            return Err(Error::config("em.cov_jitter", "must be >= 0"));
        }
        Ok(())
    }

    fn resolve_jitter(&self, data: &[Vec<f64>]) -> f64 {
        if self.absolute_jitter {
            return self.cov_jitter;
        }
        let m = linalg::mean(data);
        let v = linalg::variances(data, &m);
        self.cov_jitter * v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Clone, Debug)]
pub struct EmFit {
    pub model: GmmModel,
    /// Log-likelihood of the data under each successive parameter set; the
    /// last entry belongs to `model`.
    pub ll_trace: Vec<f64>,
    /// Whether a collapsed component had to be reseeded.
    pub reseeded: bool,
}

/// Fit a `k`-component full-covariance mixture by EM.
pub fn fit_em(data: &[Vec<f64>], k: usize, cfg: &EmConfig) -> Result<EmFit> {
    validate_fit_input(data, k, cfg)?;
    let mut rng = rng::seeded(cfg.seed);
    let resp = match cfg.init {
        EmInit::KmeansSeeded => {
            let km = kmeans::kmeans(data, k, rng::derive(cfg.seed, &[0x6b6d]), 10)?;
            km.assignment
                .iter()
                .map(|&a| {
                    let mut row = vec![0.0; k];
                    row[a] = 1.0;
                    row
                })
                .collect()
        }
        EmInit::RandomResponsibilities => (0..data.len())
            .map(|_| {
                let row: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-3).collect();
                let s: f64 = row.iter().sum();
                row.into_iter().map(|v| v / s).collect()
            })
            .collect(),
    };
    fit_em_from(data, resp, cfg)
}

fn validate_fit_input(data: &[Vec<f64>], k: usize, cfg: &EmConfig) -> Result<()> {
    cfg.validate()?;
    if k == 0 {
        return Err(Error::InvalidArgument("K must be >= 1".into()));
    }
    if data.len() < 2 {
        return Err(Error::InvalidArgument("EM needs at least 2 samples".into()));
    }
    if data.len() < k {
        return Err(Error::InvalidArgument(
            "more components than samples".into(),
        ));
    }
    check_dims(data, data[0].len())
}

/// EM starting from an explicit `n × K` responsibility matrix.
pub fn fit_em_from(data: &[Vec<f64>], init_resp: Vec<Vec<f64>>, cfg: &EmConfig) -> Result<EmFit> {
    let k = init_resp.first().map_or(0, Vec::len);
    validate_fit_input(data, k, cfg)?;
    if init_resp.len() != data.len() || init_resp.iter().any(|r| r.len() != k) {
        return Err(Error::InvalidArgument(
            "responsibility matrix shape does not match data".into(),
        ));
    }
    let jitter = cfg.resolve_jitter(data);
    let mut reseeded = false;
    let mut model = m_step_or_reseed(data, &init_resp, jitter, None, &mut reseeded)?;
    let mut trace: Vec<f64> = Vec::new();
    let mut previous: Option<GmmModel> = None;
    for iter in 0..=cfg.max_iters {
        let comps = model.factor()?;
        let (resp, ll) = e_step_factored(&comps, data)?;
        if let Some(&prev) = trace.last() {
            if ll < prev {
                // The jittered M-step is not an exact maximiser; once the
                // ascent stalls, keep the better parameters.
                if let Some(p) = previous.take() {
                    model = p;
                }
                break;
            }
            trace.push(ll);
            if (ll - prev) / prev.abs().max(f64::MIN_POSITIVE) < cfg.rel_tol {
                break;
            }
        } else {
            trace.push(ll);
        }
        if iter == cfg.max_iters {
            break;
        }
        let before = reseeded;
        let next = m_step_or_reseed(data, &resp, jitter, Some(&comps), &mut reseeded)?;
        previous = Some(std::mem::replace(&mut model, next));
        if reseeded && !before {
            // The reseeded model starts a fresh ascent.
            trace.clear();
            previous = None;
        }
    }
    Ok(EmFit {
        model,
        ll_trace: trace,
        reseeded,
    })
}

fn m_step_or_reseed(
    data: &[Vec<f64>],
    resp: &[Vec<f64>],
    jitter: f64,
    current: Option<&[FactoredComponent]>,
    reseeded: &mut bool,
) -> Result<GmmModel> {
    match m_step(data, resp, jitter) {
        Ok(m) => Ok(m),
        Err(MStepError::Degenerate(k)) if !*reseeded => {
            *reseeded = true;
            let resp = reseed_responsibilities(data, resp, k, current);
            match m_step(data, &resp, jitter) {
                Ok(m) => Ok(m),
                Err(MStepError::Degenerate(k)) => Err(Error::Numeric(format!(
                    "component {k} collapsed again after reseeding"
                ))),
                Err(MStepError::Other(e)) => Err(e),
            }
        }
        Err(MStepError::Degenerate(k)) => Err(Error::Numeric(format!(
            "component {k} collapsed (responsibility mass < {DEGENERATE_MASS})"
        ))),
        Err(MStepError::Other(e)) => Err(e),
    }
}

/// Hand the collapsed component the worst-explained samples.
fn reseed_responsibilities(
    data: &[Vec<f64>],
    resp: &[Vec<f64>],
    dead: usize,
    current: Option<&[FactoredComponent]>,
) -> Vec<Vec<f64>> {
    let n = data.len();
    let k = resp[0].len();
    let score: Vec<f64> = match current {
        Some(comps) => {
            let mut buf = Vec::new();
            data.iter()
                .map(|x| mixture_logpdf_factored(x, comps, &mut buf))
                .collect()
        }
        None => {
            let m = linalg::mean(data);
            data.iter().map(|x| -linalg::sq_dist(x, &m)).collect()
        }
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| score[a].total_cmp(&score[b]).then(a.cmp(&b)));
    let take = (n / k).max(2).min(n - 1);
    let mut out = resp.to_vec();
    for &i in order.iter().take(take) {
        out[i] = vec![0.0; k];
        out[i][dead] = 1.0;
    }
    out
}

enum MStepError {
    Degenerate(usize),
    Other(Error),
}

fn m_step(
    data: &[Vec<f64>],
    resp: &[Vec<f64>],
    jitter: f64,
) -> std::result::Result<GmmModel, MStepError> {
    let d = data[0].len();
    let k = resp[0].len();
    let mut counts = vec![0.0; k];
    for row in resp {
        for (c, r) in counts.iter_mut().zip(row) {
            *c += r;
        }
    }
    if let Some(dead) = counts.iter().position(|&c| c < DEGENERATE_MASS) {
        return Err(MStepError::Degenerate(dead));
    }
    let total: f64 = counts.iter().sum();
    let mut comps = Vec::with_capacity(k);
    let mut diff = vec![0.0; d];
    for j in 0..k {
        let nk = counts[j];
        let mut mean = vec![0.0; d];
        for (x, row) in data.iter().zip(resp) {
            let r = row[j];
            for t in 0..d {
                mean[t] += r * x[t];
            }
        }
        mean.iter_mut().for_each(|v| *v /= nk);
        let mut cov = vec![0.0; d * d];
        for (x, row) in data.iter().zip(resp) {
            let r = row[j];
            if r == 0.0 {
                continue;
            }
            for t in 0..d {
                diff[t] = x[t] - mean[t];
            }
            for a in 0..d {
                let ra = r * diff[a];
                let line = &mut cov[a * d..a * d + d];
                for b in a..d {
                    line[b] += ra * diff[b];
                }
            }
        }
        for a in 0..d {
            for b in a..d {
                let v = cov[a * d + b] / nk;
                cov[a * d + b] = v;
                cov[b * d + a] = v;
            }
            cov[a * d + a] += jitter;
        }
        comps.push(GaussianComponent {
            weight: nk / total,
            mean,
            covariance: cov,
        });
    }
    GmmModel::new(comps).map_err(MStepError::Other)
}

/// Draws from a mixture with the component factors cached.
#[derive(Clone, Debug)]
pub struct GmmSampler {
    comps: Vec<FactoredComponent>,
    cumulative: Vec<f64>,
}

impl GmmSampler {
    pub fn new(model: &GmmModel) -> Result<Self> {
        let comps = model.factor()?;
        let mut acc = 0.0;
        let cumulative = model
            .components()
            .iter()
            .map(|c| {
                acc += c.weight;
                acc
            })
            .collect();
        Ok(GmmSampler { comps, cumulative })
    }

    pub fn dim(&self) -> usize {
        self.comps[0].mean.len()
    }

    /// One draw and the index of the component it came from.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, usize) {
        let k = pick_component(&self.cumulative, rng);
        let c = &self.comps[k];
        let z: Vec<f64> = (0..c.mean.len())
            .map(|_| StandardNormal.sample(rng))
            .collect();
        let mut out = vec![0.0; z.len()];
        affine_lower(&c.mean, &c.chol, &z, &mut out);
        (out, k)
    }
}

pub(crate) fn pick_component<R: Rng + ?Sized>(cumulative: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>() * cumulative[cumulative.len() - 1];
    cumulative
        .iter()
        .position(|&c| u < c)
        .unwrap_or(cumulative.len() - 1)
}

pub fn sample(model: &GmmModel, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = rng::seeded(seed);
    Ok(sample_with_components(model, n, &mut rng)?.0)
}

/// Samples plus the generating component of each one.
pub fn sample_with_components(
    model: &GmmModel,
    n: usize,
    rng: &mut DmrRng,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be >= 1".into()));
    }
    let sampler = GmmSampler::new(model)?;
    Ok((0..n).map(|_| sampler.draw(rng)).unzip())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn std_normal(d: usize) -> GmmModel {
        GmmModel::new(vec![GaussianComponent::isotropic(vec![0.0; d], 1.0)]).unwrap()
    }

    /// Dense Gauss-Jordan inverse and determinant, independent of Cholesky.
    fn dense_inverse(m: &[f64], d: usize) -> (Vec<f64>, f64) {
        let mut a = m.to_vec();
        let mut inv = vec![0.0; d * d];
        for i in 0..d {
            inv[i * d + i] = 1.0;
        }
        let mut det = 1.0;
        for col in 0..d {
            let piv = (col..d)
                .max_by(|&x, &y| a[x * d + col].abs().total_cmp(&a[y * d + col].abs()))
                .unwrap();
            if piv != col {
                for t in 0..d {
                    a.swap(piv * d + t, col * d + t);
                    inv.swap(piv * d + t, col * d + t);
                }
                det = -det;
            }
            let p = a[col * d + col];
            det *= p;
            for t in 0..d {
                a[col * d + t] /= p;
                inv[col * d + t] /= p;
            }
            for r in 0..d {
                if r != col {
                    let f = a[r * d + col];
                    for t in 0..d {
                        a[r * d + t] -= f * a[col * d + t];
                        inv[r * d + t] -= f * inv[col * d + t];
                    }
                }
            }
        }
        (inv, det)
    }

    fn dense_logpdf(x: &[f64], c: &GaussianComponent) -> f64 {
        let d = x.len();
        let (inv, det) = dense_inverse(&c.covariance, d);
        let diff: Vec<f64> = x.iter().zip(&c.mean).map(|(a, b)| a - b).collect();
        let mut q = 0.0;
        for a in 0..d {
            for b in 0..d {
                q += diff[a] * inv[a * d + b] * diff[b];
            }
        }
        (1.0 / ((2.0 * PI).powf(d as f64 / 2.0) * det.sqrt()) * (-0.5 * q).exp()).ln()
    }

    fn random_spd(d: usize, rng: &mut DmrRng) -> Vec<f64> {
        let a: Vec<f64> = (0..d * d).map(|_| rng.random::<f64>() - 0.5).collect();
        let mut s = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                s[i * d + j] = (0..d).map(|t| a[i * d + t] * a[j * d + t]).sum::<f64>();
            }
            s[i * d + i] += 0.5;
        }
        s
    }

    fn random_model(k: usize, d: usize, rng: &mut DmrRng) -> GmmModel {
        let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 0.2).collect();
        let s: f64 = raw.iter().sum();
        let mut comps: Vec<GaussianComponent> = raw
            .iter()
            .map(|w| GaussianComponent {
                weight: w / s,
                mean: (0..d).map(|_| 4.0 * rng.random::<f64>() - 2.0).collect(),
                covariance: random_spd(d, rng),
            })
            .collect();
        let total: f64 = comps.iter().map(|c| c.weight).sum();
        comps[0].weight += 1.0 - total;
        GmmModel::new(comps).unwrap()
    }

    #[test]
    fn standard_normal_at_mode() {
        let c = GaussianComponent::isotropic(vec![0.0], 1.0);
        let v = gaussian_logpdf(&[0.0], &c).unwrap();
        assert!((v + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
        assert!((v + 0.91894).abs() < 1e-5);
    }

    #[test]
    fn identity_2d_at_mean() {
        let c = GaussianComponent::isotropic(vec![1.0, 1.0], 1.0);
        let v = gaussian_logpdf(&[1.0, 1.0], &c).unwrap();
        assert!((v + (2.0 * PI).ln()).abs() < 1e-14);
        assert!((v + 1.83788).abs() < 1e-5);
    }

    #[test]
    fn logpdf_matches_dense_inverse() {
        let mut rng = rng::seeded(11);
        for _ in 0..50 {
            let cov = random_spd(3, &mut rng);
            let c = GaussianComponent::new(1.0, (0..3).map(|_| rng.random::<f64>()).collect(), cov)
                .unwrap();
            let x: Vec<f64> = (0..3).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
            let got = gaussian_logpdf(&x, &c).unwrap();
            assert!((got - dense_logpdf(&x, &c)).abs() < 1e-10, "{got}");
        }
    }

    #[test]
    fn non_pd_covariance_is_numeric_error() {
        let c = GaussianComponent::new(1.0, vec![0.0, 0.0], vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(matches!(
            gaussian_logpdf(&[0.0, 0.0], &c),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn mixture_single_and_duplicate_components() {
        let c = GaussianComponent::new(1.0, vec![0.5, -1.0], vec![2.0, 0.3, 0.3, 1.0]).unwrap();
        let x = [0.1, 0.7];
        let single = GmmModel::new(vec![c.clone()]).unwrap();
        assert_eq!(
            mixture_logpdf(&x, &single).unwrap(),
            gaussian_logpdf(&x, &c).unwrap()
        );
        let half = GaussianComponent {
            weight: 0.5,
            ..c.clone()
        };
        let dup = GmmModel::new(vec![half.clone(), half]).unwrap();
        assert!(
            (mixture_logpdf(&x, &dup).unwrap() - gaussian_logpdf(&x, &c).unwrap()).abs() < 1e-14
        );
    }

    #[test]
    fn mixture_matches_naive_sum() {
        let mut rng = rng::seeded(5);
        for _ in 0..20 {
            let m = random_model(3, 3, &mut rng);
            let x: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
            let naive: f64 = m
                .components()
                .iter()
                .map(|c| c.weight * dense_logpdf(&x, c).exp())
                .sum::<f64>()
                .ln();
            assert!((mixture_logpdf(&x, &m).unwrap() - naive).abs() < 1e-10);
        }
    }

    #[test]
    fn nll_cases() {
        let m = std_normal(1);
        let v = neg_log_likelihood(&m, &[vec![0.0]]).unwrap();
        assert!((v - 0.91894).abs() < 1e-5);
        assert!(neg_log_likelihood(&m, &[]).is_err());

        let mut rng = rng::seeded(2);
        let model = random_model(2, 2, &mut rng);
        let data: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..2).map(|_| 3.0 * rng.random::<f64>() - 1.5).collect())
            .collect();
        let once = neg_log_likelihood(&model, &data).unwrap();
        let doubled: Vec<Vec<f64>> = data.iter().chain(&data).cloned().collect();
        assert!(
            (neg_log_likelihood(&model, &doubled).unwrap() - 2.0 * once).abs() < 1e-9 * once.abs()
        );
        let oracle: f64 = -data
            .iter()
            .map(|x| {
                model
                    .components()
                    .iter()
                    .map(|c| c.weight * dense_logpdf(x, c).exp())
                    .sum::<f64>()
                    .ln()
            })
            .sum::<f64>();
        assert!((once - oracle).abs() <= 1e-8 * oracle.abs());
    }

    #[test]
    fn e_step_cases() {
        let data = vec![vec![0.0, 0.0], vec![5.0, 1.0]];
        let r = e_step(&std_normal(2), &data).unwrap();
        assert!(r.iter().all(|row| row == &vec![1.0]));

        let a = GaussianComponent {
            weight: 0.5,
            ..GaussianComponent::isotropic(vec![-10.0, 0.0], 1.0)
        };
        let b = GaussianComponent {
            weight: 0.5,
            ..GaussianComponent::isotropic(vec![10.0, 0.0], 1.0)
        };
        let m = GmmModel::new(vec![a, b]).unwrap();
        let r = e_step(&m, &[vec![-10.0, 0.0], vec![0.0, 3.0]]).unwrap();
        assert!(r[0][0] > 1.0 - 1e-6);
        assert!((r[1][0] - 0.5).abs() < 1e-12 && (r[1][1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn em_single_component_is_closed_form() {
        let mut rng = rng::seeded(9);
        let data: Vec<Vec<f64>> = (0..40)
            .map(|_| vec![rng.random::<f64>(), 2.0 * rng.random::<f64>()])
            .collect();
        let cfg = EmConfig {
            cov_jitter: 1e-3,
            absolute_jitter: true,
            ..EmConfig::default()
        };
        let fit = fit_em(&data, 1, &cfg).unwrap();
        let m = linalg::mean(&data);
        let mut cov = linalg::covariance(&data, &m);
        cov[0] += 1e-3;
        cov[3] += 1e-3;
        let c = &fit.model.components()[0];
        assert_eq!(c.weight, 1.0);
        for (a, b) in c.mean.iter().zip(&m) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in c.covariance.iter().zip(&cov) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(fit.ll_trace.len() <= 2);
    }

    #[test]
    fn em_rejects_too_many_components() {
        let data = vec![vec![0.0], vec![1.0]];
        let err = fit_em(&data, 3, &EmConfig::default()).unwrap_err();
        assert!(err.to_string().contains("more components than samples"));
    }

    #[test]
    fn em_recovers_two_separated_components() {
        let truth = GmmModel::new(vec![
            GaussianComponent {
                weight: 0.5,
                ..GaussianComponent::isotropic(vec![0.0, 0.0], 1.0)
            },
            GaussianComponent {
                weight: 0.5,
                ..GaussianComponent::isotropic(vec![8.0, 0.0], 1.0)
            },
        ])
        .unwrap();
        let data = sample(&truth, 2000, 3).unwrap();
        let fit = fit_em(&data, 2, &EmConfig::default()).unwrap();
        let mut means: Vec<&Vec<f64>> = fit.model.components().iter().map(|c| &c.mean).collect();
        means.sort_by(|a, b| a[0].total_cmp(&b[0]));
        for (got, want) in means.iter().zip(truth.components()) {
            for (g, w) in got.iter().zip(&want.mean) {
                assert!((g - w).abs() < 0.1, "{got:?}");
            }
        }
        for w in fit.ll_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9);
        }
    }

    #[test]
    fn em_trace_is_permutation_invariant_with_fixed_init() {
        let mut rng = rng::seeded(4);
        let truth = random_model(2, 2, &mut rng);
        let data = sample(&truth, 300, 8).unwrap();
        let init: Vec<Vec<f64>> = (0..data.len())
            .map(|i| {
                if i % 2 == 0 {
                    vec![0.8, 0.2]
                } else {
                    vec![0.3, 0.7]
                }
            })
            .collect();
        let a = fit_em_from(&data, init.clone(), &EmConfig::default()).unwrap();
        let mut perm: Vec<usize> = (0..data.len()).collect();
        perm.reverse();
        let pdata: Vec<Vec<f64>> = perm.iter().map(|&i| data[i].clone()).collect();
        let pinit: Vec<Vec<f64>> = perm.iter().map(|&i| init[i].clone()).collect();
        let b = fit_em_from(&pdata, pinit, &EmConfig::default()).unwrap();
        assert_eq!(a.ll_trace.len(), b.ll_trace.len());
        for (x, y) in a.ll_trace.iter().zip(&b.ll_trace) {
            assert!((x - y).abs() <= 1e-9 * x.abs());
        }
    }

    #[test]
    fn weights_sum_to_one_after_fit() {
        let mut rng = rng::seeded(21);
        let truth = random_model(3, 2, &mut rng);
        let data = sample(&truth, 500, 1).unwrap();
        let fit = fit_em(&data, 3, &EmConfig::default()).unwrap();
        assert!((fit.model.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sampler_moments_and_determinism() {
        let m = std_normal(2);
        let xs = sample(&m, 100_000, 17).unwrap();
        let mu = linalg::mean(&xs);
        let cov = linalg::covariance(&xs, &mu);
        assert!(mu.iter().all(|v| v.abs() < 0.02));
        for (i, v) in cov.iter().enumerate() {
            let want = if i % 3 == 0 { 1.0 } else { 0.0 };
            assert!((v - want).abs() < 0.02);
        }
        assert_eq!(xs[..10], sample(&m, 10, 17).unwrap()[..]);
    }

    #[test]
    fn diagonal_covariance_draws_are_uncorrelated() {
        let comp = GaussianComponent::new(1.0, vec![1.0, -2.0], vec![4.0, 0.0, 0.0, 0.25]).unwrap();
        let m = GmmModel::new(vec![comp]).unwrap();
        let n = 20_000;
        let xs = sample(&m, n, 99).unwrap();
        let mu = linalg::mean(&xs);
        let cov = linalg::covariance(&xs, &mu);
        let corr = cov[1] / (cov[0] * cov[3]).sqrt();
        assert!(corr.abs() < 3.0 / (n as f64).sqrt());
    }

    #[test]
    fn sample_nll_matches_entropy_estimate() {
        let mut rng = rng::seeded(31);
        let m = random_model(2, 3, &mut rng);
        let n = 10_000;
        let a = neg_log_likelihood(&m, &sample(&m, n, 1).unwrap()).unwrap() / n as f64;
        let entropy = neg_log_likelihood(&m, &sample(&m, n, 2).unwrap()).unwrap() / n as f64;
        assert!((a - entropy).abs() <= 0.05 * entropy.abs());
    }

    #[test]
    fn binary_round_trip_and_corruption() {
        let mut rng = rng::seeded(3);
        let m = random_model(2, 3, &mut rng);
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"DMRG");
        assert_eq!(GmmModel::from_bytes(&bytes).unwrap(), m);
        let err = GmmModel::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Corrupt { .. }));
    }
}
