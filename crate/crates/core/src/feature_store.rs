//! Labelled embeddings: file I/O, synthetic feature spaces and the
//! class-incremental task stream.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::gmm::{self, GaussianComponent, GmmModel};
use crate::rng::{self, DmrRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub vector: Vec<f64>,
    pub class_id: u32,
    /// Assigned when the dataset is split into a task stream.
    pub task_id: u32,
}

impl FeatureRecord {
    pub fn new(vector: Vec<f64>, class_id: u32) -> Self {
        FeatureRecord {
            vector,
            class_id,
            task_id: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    dim: usize,
    records: Vec<FeatureRecord>,
}

impl Dataset {
    pub fn new(records: Vec<FeatureRecord>) -> Result<Self> {
        let dim = records.first().ok_or(Error::NoRecords)?.vector.len();
        if dim == 0 {
            return Err(Error::InvalidArgument("zero-dimensional features".into()));
        }
        for r in &records {
            if r.vector.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    found: r.vector.len(),
                });
            }
        }
        Ok(Dataset { dim, records })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn class_counts(&self) -> BTreeMap<u32, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.class_id).or_insert(0) += 1;
        }
        counts
    }

    pub fn classes(&self) -> Vec<u32> {
        self.class_counts().into_keys().collect()
    }

    pub fn features_of(&self, class_id: u32) -> Vec<Vec<f64>> {
        self.records
            .iter()
            .filter(|r| r.class_id == class_id)
            .map(|r| r.vector.clone())
            .collect()
    }

    /// Per-class shuffle, then the first `round(n·test_fraction)` samples of
    /// each class go to the test side. Both sides keep file order.
    pub fn train_test_split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) || test_fraction == 0.0 {
            return Err(Error::config("data.test_fraction", "must lie in (0, 1)"));
        }
        let mut is_test = vec![false; self.records.len()];
        for (c, _) in self.class_counts() {
            let mut idx: Vec<usize> = (0..self.records.len())
                .filter(|&i| self.records[i].class_id == c)
                .collect();
            idx.shuffle(&mut rng::seeded(rng::derive(seed, &[u64::from(c)])));
            let n_test = ((idx.len() as f64 * test_fraction).round() as usize)
                .clamp(1, idx.len().saturating_sub(1).max(1));
            for &i in &idx[..n_test] {
                is_test[i] = true;
            }
        }
        let (test, train): (Vec<_>, Vec<_>) = self
            .records
            .iter()
            .cloned()
            .zip(is_test)
            .partition(|(_, t)| *t);
        Ok((
            Dataset::new(train.into_iter().map(|(r, _)| r).collect())?,
            Dataset::new(test.into_iter().map(|(r, _)| r).collect())?,
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FileFormat {
    Csv,
    PackedBinary,
}

impl FileFormat {
    /// `.csv` is CSV, anything else packed binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => FileFormat::Csv,
            _ => FileFormat::PackedBinary,
        }
    }
}

pub fn load_embeddings(path: &Path, format: FileFormat) -> Result<Dataset> {
    match format {
        FileFormat::Csv => parse_csv(&std::fs::read_to_string(path)?),
        FileFormat::PackedBinary => decode_binary(&std::fs::read(path)?),
    }
}

pub fn save_embeddings(dataset: &Dataset, path: &Path, format: FileFormat) -> Result<()> {
    match format {
        FileFormat::Csv => std::fs::write(path, to_csv(dataset))?,
        FileFormat::PackedBinary => std::fs::write(path, encode_binary(dataset))?,
    }
    Ok(())
}

/// `f_1,...,f_d,label` per line. A first line with a non-numeric field is
/// taken as a header. `row` in errors is the 1-based line number.
pub fn parse_csv(text: &str) -> Result<Dataset> {
    let mut records = Vec::new();
    let mut dim: Option<usize> = None;
    for (idx, line) in text.lines().enumerate() {
        let row = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        match parse_row(&fields) {
            Ok((vector, class_id)) => {
                match dim {
                    None => dim = Some(vector.len()),
                    Some(d) if d != vector.len() => {
                        return Err(Error::Dimension {
                            expected: d,
                            found: vector.len(),
                        })
                    }
                    _ => {}
                }
                records.push(FeatureRecord::new(vector, class_id));
            }
            Err(_)
                if idx == first_content_line(text)
                    && fields.iter().any(|f| f.parse::<f64>().is_err()) =>
            {
                // header
            }
            Err(msg) => return Err(Error::Parse { row, msg }),
        }
    }
    Dataset::new(records)
}

fn first_content_line(text: &str) -> usize {
    text.lines().position(|l| !l.trim().is_empty()).unwrap_or(0)
}

fn parse_row(fields: &[&str]) -> std::result::Result<(Vec<f64>, u32), String> {
    if fields.len() < 2 {
        return Err(format!(
            "expected at least 2 fields, found {}",
            fields.len()
        ));
    }
    let (label, feats) = fields.split_last().unwrap();
    let class_id = label
        .parse::<u32>()
        .map_err(|_| format!("label `{label}` is not a non-negative integer"))?;
    let vector = feats
        .iter()
        .enumerate()
        .map(|(j, f)| {
            f.parse::<f64>()
                .map_err(|_| format!("field {} (`{f}`) is not a number", j + 1))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((vector, class_id))
}

/// Rust's `Display` for `f64` is shortest-round-trip, so CSV written here
/// reloads bit-exactly.
pub fn to_csv(dataset: &Dataset) -> String {
    let mut out = String::new();
    for r in &dataset.records {
        for v in &r.vector {
            out.push_str(&v.to_string());
            out.push(',');
        }
        out.push_str(&r.class_id.to_string());
        out.push('\n');
    }
    out
}

pub const FEATURE_FORMAT_VERSION: u32 = 1;

/// "DMRF" packed binary.
pub fn encode_binary(dataset: &Dataset) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(b"DMRF");
    w.u32(FEATURE_FORMAT_VERSION);
    w.u32(dataset.dim as u32);
    w.u64(dataset.records.len() as u64);
    for r in &dataset.records {
        w.f64s(&r.vector);
        w.u32(r.class_id);
    }
    w.buf
}

pub fn decode_binary(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    r.magic(b"DMRF")?;
    let version = r.u32()?;
    if version != FEATURE_FORMAT_VERSION {
        return Err(r.corrupt(format!("unsupported version {version}")));
    }
    let d = r.u32()? as usize;
    let n = r.u64()?;
    let mut records = Vec::new();
    for _ in 0..n {
        let vector = r.f64s(d)?;
        let class_id = r.u32()?;
        records.push(FeatureRecord::new(vector, class_id));
    }
    if !r.is_empty() {
        return Err(r.corrupt("trailing bytes after records"));
    }
    Dataset::new(records)
}

/// Component count per class: a single integer or an inclusive `[min, max]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ComponentRange {
    Fixed(usize),
    Range([usize; 2]),
}

impl ComponentRange {
    pub fn bounds(&self) -> (usize, usize) {
        match *self {
            ComponentRange::Fixed(k) => (k, k),
            ComponentRange::Range([a, b]) => (a, b),
        }
    }
}

/// Recipe for a synthetic anisotropic feature space standing in for a
/// frozen encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub components_per_class: ComponentRange,
    /// Pairwise distance between class centers, in units of the mean
    /// component std.
    pub separation: f64,
    /// Ratio of largest to smallest covariance eigenvalue.
    pub anisotropy: f64,
    pub samples_per_class: usize,
    pub seed: u64,
    /// Distance between component centers within one class, same units as
    /// `separation`.
    #[serde(default = "default_lobe_separation")]
    pub lobe_separation: f64,
    /// Size of the diagonal rotation blocks used for covariance eigenvectors;
    /// 0 means one dense Haar rotation over all dimensions.
    #[serde(default)]
    pub rotation_block: usize,
}

fn default_lobe_separation() -> f64 {
    6.0
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let p = "data.synth_spec";
        if self.num_classes == 0 {
            return Err(Error::config(format!("{p}.num_classes"), "must be > 0"));
        }
        if self.dim == 0 {
            return Err(Error::config(format!("{p}.dim"), "must be > 0"));
        }
        let (lo, hi) = self.components_per_class.bounds();
        if lo < 1 || hi > 3 || lo > hi {
            return Err(Error::config(
                format!("{p}.components_per_class"),
                "must be within [1, 3] with min <= max",
            ));
        }
        if !(self.separation > 0.0) {
            return Err(Error::config(format!("{p}.separation"), "must be > 0"));
        }
        if !(self.anisotropy >= 1.0) {
            return Err(Error::config(format!("{p}.anisotropy"), "must be >= 1"));
        }
        if self.samples_per_class == 0 {
            return Err(Error::config(
                format!("{p}.samples_per_class"),
                "must be > 0",
            ));
        }
        if !(self.lobe_separation >= 0.0) {
            return Err(Error::config(
                format!("{p}.lobe_separation"),
                "must be >= 0",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub dataset: Dataset,
    /// The exact generating mixture of every class.
    pub truth: BTreeMap<u32, GmmModel>,
    /// Generating component of each record, aligned with `dataset.records()`.
    pub components: Vec<usize>,
}

/// Haar-distributed orthogonal matrix (QR of a Gaussian matrix with the
/// sign of R's diagonal folded into Q).
pub fn random_orthogonal(d: usize, rng: &mut DmrRng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Block-diagonal orthogonal matrix with Haar blocks of size `block` on a
/// random permutation of the axes. `block == 0` or `block >= d` gives a
/// dense Haar rotation.
pub fn random_block_orthogonal(d: usize, block: usize, rng: &mut DmrRng) -> DMatrix<f64> {
    if block == 0 || block >= d {
        return random_orthogonal(d, rng);
    }
    let mut axes: Vec<usize> = (0..d).collect();
    axes.shuffle(rng);
    let mut q = DMatrix::zeros(d, d);
    for chunk in axes.chunks(block) {
        let b = random_orthogonal(chunk.len(), rng);
        for (i, &ri) in chunk.iter().enumerate() {
            for (j, &cj) in chunk.iter().enumerate() {
                q[(ri, cj)] = b[(i, j)];
            }
        }
    }
    q
}

/// Eigenvalues log-uniform between `c` and `c·anisotropy` with both ends
/// attained, scaled to mean 1.
pub fn anisotropic_eigenvalues(d: usize, anisotropy: f64, rng: &mut DmrRng) -> Vec<f64> {
    let span = anisotropy.ln();
    let mut logs: Vec<f64> = (0..d)
        .map(|i| match i {
            0 => 0.0,
            1 => span,
            _ => rng.random::<f64>() * span,
        })
        .collect();
    if d == 1 {
        logs[0] = 0.0;
    }
    logs.shuffle(rng);
    let vals: Vec<f64> = logs.iter().map(|l| l.exp()).collect();
    let mean = vals.iter().sum::<f64>() / d as f64;
    vals.into_iter().map(|v| v / mean).collect()
}

/// `R diag(λ) Rᵀ`, row-major, with `trace / d = 1`.
pub fn anisotropic_covariance(
    d: usize,
    anisotropy: f64,
    block: usize,
    rng: &mut DmrRng,
) -> Vec<f64> {
    let lambda = anisotropic_eigenvalues(d, anisotropy, rng);
    let r = random_block_orthogonal(d, block, rng);
    let mut cov = vec![0.0; d * d];
    for a in 0..d {
        for b in a..d {
            let v: f64 = (0..d).map(|t| r[(a, t)] * lambda[t] * r[(b, t)]).sum();
            cov[a * d + b] = v;
            cov[b * d + a] = v;
        }
    }
    cov
}

/// `count` points with all pairwise distances equal to `distance` (exact
/// when `count <= dim`, approximate otherwise), centred on the origin.
fn spread_points(count: usize, dim: usize, distance: f64, rng: &mut DmrRng) -> Vec<Vec<f64>> {
    let scale = distance / std::f64::consts::SQRT_2;
    let mut pts: Vec<Vec<f64>> = if count <= dim {
        let q = random_orthogonal(dim, rng);
        (0..count)
            .map(|c| (0..dim).map(|j| scale * q[(j, c)]).collect())
            .collect()
    } else {
        (0..count)
            .map(|_| {
                let g: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
                let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                g.into_iter().map(|v| scale * v / norm).collect()
            })
            .collect()
    };
    let centroid: Vec<f64> = (0..dim)
        .map(|j| pts.iter().map(|p| p[j]).sum::<f64>() / count as f64)
        .collect();
    for p in &mut pts {
        for (v, c) in p.iter_mut().zip(&centroid) {
            *v -= c;
        }
    }
    pts
}

pub fn synth_generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let d = spec.dim;
    let mut rng = rng::seeded(spec.seed);
    let centers = spread_points(spec.num_classes, d, spec.separation, &mut rng);
    let (lo, hi) = spec.components_per_class.bounds();
    let mut truth = BTreeMap::new();
    let mut records = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    let mut components = Vec::with_capacity(records.capacity());
    for (c, center) in centers.iter().enumerate() {
        let k = rng.random_range(lo..=hi);
        let offsets = if k == 1 {
            vec![vec![0.0; d]]
        } else {
            spread_points(k, d, spec.lobe_separation, &mut rng)
        };
        let comps: Vec<GaussianComponent> = offsets
            .iter()
            .map(|off| GaussianComponent {
                weight: 1.0 / k as f64,
                mean: center.iter().zip(off).map(|(a, b)| a + b).collect(),
                covariance: anisotropic_covariance(
                    d,
                    spec.anisotropy,
                    spec.rotation_block,
                    &mut rng,
                ),
            })
            .collect();
        let model = GmmModel::new(comps)?;
        let mut class_rng = rng::seeded(rng::derive(spec.seed, &[c as u64, 0x5a]));
        let (xs, ks) = gmm::sample_with_components(&model, spec.samples_per_class, &mut class_rng)?;
        for x in xs {
            records.push(FeatureRecord::new(x, c as u32));
        }
        components.extend(ks);
        truth.insert(c as u32, model);
    }
    Ok(SynthOutput {
        dataset: Dataset::new(records)?,
        truth,
        components,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub task_id: u32,
    /// Sorted ascending.
    pub classes: Vec<u32>,
    pub records: Vec<FeatureRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub base_size: usize,
    pub increment_size: usize,
    /// Classes in the shuffled order used for assignment.
    pub class_order: Vec<u32>,
}

impl TaskStream {
    pub fn task_of_class(&self) -> BTreeMap<u32, u32> {
        self.tasks
            .iter()
            .flat_map(|t| t.classes.iter().map(move |&c| (c, t.task_id)))
            .collect()
    }

    pub fn num_classes(&self) -> usize {
        self.class_order.len()
    }
}

/// Number of tasks for `num_classes` split as `base + k·increment`.
pub fn task_count(num_classes: usize, base: usize, increment: usize) -> Result<usize> {
    if base == 0 || base > num_classes {
        return Err(Error::config(
            "stream.base",
            format!("base size {base} must lie in [1, {num_classes}]"),
        ));
    }
    let rest = num_classes - base;
    if rest == 0 {
        return Ok(1);
    }
    if increment == 0 || rest % increment != 0 {
        return Err(Error::config(
            "stream.increment",
            format!("{num_classes} classes are not {base} + k·{increment}"),
        ));
    }
    Ok(1 + rest / increment)
}

pub fn split_task_stream(
    dataset: &Dataset,
    base: usize,
    increment: usize,
    seed: u64,
) -> Result<TaskStream> {
    let mut classes = dataset.classes();
    let n_tasks = task_count(classes.len(), base, increment)?;
    classes.shuffle(&mut rng::seeded(seed));
    let mut tasks = Vec::with_capacity(n_tasks);
    let mut start = 0;
    for t in 0..n_tasks {
        let size = if t == 0 { base } else { increment };
        let mut set = classes[start..start + size].to_vec();
        set.sort_unstable();
        start += size;
        let records = dataset
            .records
            .iter()
            .filter(|r| set.binary_search(&r.class_id).is_ok())
            .map(|r| FeatureRecord {
                task_id: t as u32,
                ..r.clone()
            })
            .collect();
        tasks.push(Task {
            task_id: t as u32,
            classes: set,
            records,
        });
    }
    Ok(TaskStream {
        tasks,
        base_size: base,
        increment_size: increment,
        class_order: classes,
    })
}
