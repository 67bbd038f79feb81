//! Per-class distribution memories.
//!
//! A finished class is summarised as a weighted set of components whose
//! spread is stored at one of four fidelities, from richest to poorest:
//!
//! | fidelity   | spread per component            | stored floats   |
//! |------------|---------------------------------|-----------------|
//! | `dmr`      | full covariance `Σ`             | `K(d + d²)`     |
//! | `d-std`    | `sqrt(diag Σ)`                  | `K(d + d)`      |
//! | `dmr-lite` | `σ = sqrt(tr Σ / d)`            | `K(d + 1)`      |
//! | `prior`    | single component, scalar `σ`    | `d + 1`         |
//!
//! Degrading keeps means and weights untouched, except when a multi-component
//! memory is collapsed to `prior`, which moment-matches the mixture.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::gmm::{self, pick_component, EmConfig, GaussianComponent, GmmModel, GmmSampler};
use crate::linalg::{self, check_dims};
use crate::rng::{self, DmrRng};
use crate::silhouette::{self, KSelectConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fidelity {
    Prior,
    DStd,
    DmrLite,
    Dmr,
}

impl Fidelity {
    /// Information rank: prior < dmr-lite < d-std < dmr.
    pub fn rank(self) -> u8 {
        match self {
            Fidelity::Prior => 0,
            Fidelity::DmrLite => 1,
            Fidelity::DStd => 2,
            Fidelity::Dmr => 3,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Fidelity::Prior => 0,
            Fidelity::DStd => 1,
            Fidelity::DmrLite => 2,
            Fidelity::Dmr => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Fidelity::Prior,
            1 => Fidelity::DStd,
            2 => Fidelity::DmrLite,
            3 => Fidelity::Dmr,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Fidelity::Prior => "prior",
            Fidelity::DStd => "d-std",
            Fidelity::DmrLite => "dmr-lite",
            Fidelity::Dmr => "dmr",
        }
    }
}

impl fmt::Display for Fidelity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Spread {
    /// Row-major `d × d` covariance.
    Full(Vec<f64>),
    DiagStd(Vec<f64>),
    ScalarStd(f64),
}

impl Spread {
    fn expected_for(fidelity: Fidelity) -> &'static str {
        match fidelity {
            Fidelity::Dmr => "full",
            Fidelity::DStd => "diag-std",
            Fidelity::Prior | Fidelity::DmrLite => "scalar-std",
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Spread::Full(_) => "full",
            Spread::DiagStd(_) => "diag-std",
            Spread::ScalarStd(_) => "scalar-std",
        }
    }

    /// Per-dimension variances.
    fn diag_var(&self, d: usize) -> Vec<f64> {
        match self {
            Spread::Full(c) => (0..d).map(|j| c[j * d + j]).collect(),
            Spread::DiagStd(s) => s.iter().map(|v| v * v).collect(),
            Spread::ScalarStd(s) => vec![s * s; d],
        }
    }

    /// `tr Σ / d`.
    fn mean_var(&self, d: usize) -> f64 {
        match self {
            Spread::ScalarStd(s) => s * s,
            other => other.diag_var(d).iter().sum::<f64>() / d as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub spread: Spread,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMemory {
    pub class_id: u32,
    pub fidelity: Fidelity,
    pub components: Vec<MemoryComponent>,
}

impl ClassMemory {
    pub fn new(
        class_id: u32,
        fidelity: Fidelity,
        components: Vec<MemoryComponent>,
    ) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::InvalidArgument("class memory needs a component".into()))?;
        let d = first.mean.len();
        if fidelity == Fidelity::Prior && components.len() != 1 {
            return Err(Error::InvalidArgument(
                "prior memory holds exactly one component".into(),
            ));
        }
        for c in &components {
            if c.mean.len() != d {
                return Err(Error::Dimension {
                    expected: d,
                    found: c.mean.len(),
                });
            }
            if c.spread.kind() != Spread::expected_for(fidelity) {
                return Err(Error::InvalidArgument(format!(
                    "{fidelity} memory cannot hold a {} spread",
                    c.spread.kind()
                )));
            }
            let ok = match &c.spread {
                Spread::Full(cov) => cov.len() == d * d,
                Spread::DiagStd(s) => s.len() == d && s.iter().all(|v| *v >= 0.0),
                Spread::ScalarStd(s) => *s >= 0.0,
            };
            if !ok {
                return Err(Error::InvalidArgument("malformed component spread".into()));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "memory weights sum to {total}, expected 1"
            )));
        }
        Ok(ClassMemory {
            class_id,
            fidelity,
            components,
        })
    }

    pub fn from_gmm(class_id: u32, model: &GmmModel) -> Self {
        ClassMemory {
            class_id,
            fidelity: Fidelity::Dmr,
            components: model
                .components()
                .iter()
                .map(|c| MemoryComponent {
                    weight: c.weight,
                    mean: c.mean.clone(),
                    spread: Spread::Full(c.covariance.clone()),
                })
                .collect(),
        }
    }

    /// The memory as a full-covariance mixture.
    pub fn to_gmm(&self) -> Result<GmmModel> {
        let d = self.dim();
        GmmModel::new(
            self.components
                .iter()
                .map(|c| {
                    let cov = match &c.spread {
                        Spread::Full(cov) => cov.clone(),
                        other => {
                            let v = other.diag_var(d);
                            let mut cov = vec![0.0; d * d];
                            for j in 0..d {
                                cov[j * d + j] = v[j];
                            }
                            cov
                        }
                    };
                    GaussianComponent {
                        weight: c.weight,
                        mean: c.mean.clone(),
                        covariance: cov,
                    }
                })
                .collect(),
        )
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }
}

/// Lower a memory to `target`. Same-fidelity requests return a copy.
pub fn degrade(mem: &ClassMemory, target: Fidelity) -> Result<ClassMemory> {
    if target.rank() > mem.fidelity.rank() {
        return Err(Error::Upgrade {
            from: mem.fidelity.to_string(),
            to: target.to_string(),
        });
    }
    if target == mem.fidelity {
        return Ok(mem.clone());
    }
    let d = mem.dim();
    let components = match target {
        Fidelity::DStd => mem
            .components
            .iter()
            .map(|c| MemoryComponent {
                weight: c.weight,
                mean: c.mean.clone(),
                spread: Spread::DiagStd(c.spread.diag_var(d).into_iter().map(f64::sqrt).collect()),
            })
            .collect(),
        Fidelity::DmrLite => mem
            .components
            .iter()
            .map(|c| MemoryComponent {
                weight: c.weight,
                mean: c.mean.clone(),
                spread: Spread::ScalarStd(c.spread.mean_var(d).sqrt()),
            })
            .collect(),
        Fidelity::Prior if mem.k() == 1 => {
            let c = &mem.components[0];
            vec![MemoryComponent {
                weight: c.weight,
                mean: c.mean.clone(),
                spread: Spread::ScalarStd(c.spread.mean_var(d).sqrt()),
            }]
        }
        Fidelity::Prior => {
            let mut mu = vec![0.0; d];
            for c in &mem.components {
                for (m, v) in mu.iter_mut().zip(&c.mean) {
                    *m += c.weight * v;
                }
            }
            let var: f64 = mem
                .components
                .iter()
                .map(|c| {
                    c.weight * (c.spread.mean_var(d) + linalg::sq_dist(&c.mean, &mu) / d as f64)
                })
                .sum();
            vec![MemoryComponent {
                weight: 1.0,
                mean: mu,
                spread: Spread::ScalarStd(var.sqrt()),
            }]
        }
        Fidelity::Dmr => unreachable!("dmr is the top rank"),
    };
    ClassMemory::new(mem.class_id, target, components)
}

/// Stored floating-point numbers, following the per-fidelity formulas in
/// the module table (mixture weights not counted).
pub fn memory_footprint(mem: &ClassMemory) -> usize {
    let d = mem.dim();
    let k = mem.k();
    match mem.fidelity {
        Fidelity::Prior => d + 1,
        Fidelity::DStd => k * (d + d),
        Fidelity::DmrLite => k * (d + 1),
        Fidelity::Dmr => k * (d + d * d),
    }
}

/// [`memory_footprint`] plus one float per mixture weight.
pub fn memory_footprint_with_weights(mem: &ClassMemory) -> usize {
    memory_footprint(mem) + mem.k()
}

/// Fit the memory of one class: adaptive K, EM, then degrade. `prior`
/// skips the mixture entirely.
pub fn fit_class_memory(
    class_id: u32,
    features: &[Vec<f64>],
    fidelity: Fidelity,
    select_cfg: &KSelectConfig,
    em_cfg: &EmConfig,
) -> Result<ClassMemory> {
    if features.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "class {class_id} needs at least 2 features, found {}",
            features.len()
        )));
    }
    if fidelity == Fidelity::Prior {
        return crate::baselines::fit_prior(class_id, features);
    }
    check_dims(features, features[0].len())?;
    let k_max = select_cfg.k_max.min(features.len() / 2);
    let k = if k_max >= 2 {
        let cfg = KSelectConfig {
            k_max,
            ..select_cfg.clone()
        };
        silhouette::select_k(features, &cfg)?.k
    } else {
        1
    };
    let fit = gmm::fit_em(features, k, em_cfg)?;
    degrade(&ClassMemory::from_gmm(class_id, &fit.model), fidelity)
}

/// Draws pseudo-features from one class memory with its factors cached.
#[derive(Clone, Debug)]
pub enum PseudoSampler {
    Full(GmmSampler),
    Simple {
        comps: Vec<(Vec<f64>, Spread)>,
        cumulative: Vec<f64>,
    },
}

impl PseudoSampler {
    pub fn new(mem: &ClassMemory) -> Result<Self> {
        if mem.fidelity == Fidelity::Dmr {
            return Ok(PseudoSampler::Full(GmmSampler::new(&mem.to_gmm()?)?));
        }
        let mut acc = 0.0;
        let cumulative = mem
            .components
            .iter()
            .map(|c| {
                acc += c.weight;
                acc
            })
            .collect();
        Ok(PseudoSampler::Simple {
            comps: mem
                .components
                .iter()
                .map(|c| (c.mean.clone(), c.spread.clone()))
                .collect(),
            cumulative,
        })
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.draw_labelled(rng).0
    }

    pub fn draw_labelled<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, usize) {
        match self {
            PseudoSampler::Full(s) => s.draw(rng),
            PseudoSampler::Simple { comps, cumulative } => {
                let k = pick_component(cumulative, rng);
                let (mean, spread) = &comps[k];
                let x = mean
                    .iter()
                    .enumerate()
                    .map(|(j, m)| {
                        let z: f64 = StandardNormal.sample(rng);
                        let s = match spread {
                            Spread::DiagStd(s) => s[j],
                            Spread::ScalarStd(s) => *s,
                            Spread::Full(_) => unreachable!("full spreads use the mixture sampler"),
                        };
                        m + s * z
                    })
                    .collect();
                (x, k)
            }
        }
    }

    pub fn sample(&self, n: usize, rng: &mut DmrRng) -> Vec<Vec<f64>> {
        (0..n).map(|_| self.draw(rng)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct MemoryBank {
    dim: usize,
    entries: BTreeMap<u32, ClassMemory>,
}

impl MemoryBank {
    pub fn new(dim: usize) -> Self {
        MemoryBank {
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn classes(&self) -> Vec<u32> {
        self.entries.keys().copied().collect()
    }

    pub fn get(&self, class_id: u32) -> Option<&ClassMemory> {
        self.entries.get(&class_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ClassMemory> {
        self.entries.values()
    }

    /// Entries are write-once; a class can be added only once.
    pub fn insert(&mut self, mem: ClassMemory) -> Result<()> {
        if mem.dim() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                found: mem.dim(),
            });
        }
        if self.entries.contains_key(&mem.class_id) {
            return Err(Error::InvalidArgument(format!(
                "class {} already has a memory",
                mem.class_id
            )));
        }
        self.entries.insert(mem.class_id, mem);
        Ok(())
    }

    pub fn footprint(&self) -> usize {
        self.entries.values().map(memory_footprint).sum()
    }

    pub fn footprint_with_weights(&self) -> usize {
        self.entries
            .values()
            .map(memory_footprint_with_weights)
            .sum()
    }

    /// "DMRB" packed binary: header, then per class its id, a fidelity
    /// byte and the components in "DMRG" layout with the spread stored at
    /// its fidelity's size.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(b"DMRB");
        w.u32(BANK_FORMAT_VERSION);
        w.u32(self.dim as u32);
        w.u32(self.entries.len() as u32);
        for mem in self.entries.values() {
            w.u32(mem.class_id);
            w.u8(mem.fidelity.code());
            w.u32(mem.k() as u32);
            for c in &mem.components {
                w.f64(c.weight);
                w.f64s(&c.mean);
                match &c.spread {
                    Spread::Full(v) | Spread::DiagStd(v) => w.f64s(v),
                    Spread::ScalarStd(s) => w.f64(*s),
                }
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(b"DMRB")?;
        let version = r.u32()?;
        if version != BANK_FORMAT_VERSION {
            return Err(r.corrupt(format!("unsupported version {version}")));
        }
        let d = r.u32()? as usize;
        let count = r.u32()?;
        let mut bank = MemoryBank::new(d);
        for _ in 0..count {
            let start = r.offset();
            let class_id = r.u32()?;
            let code_at = r.offset();
            let fidelity = Fidelity::from_code(r.u8()?).ok_or(Error::Corrupt {
                offset: code_at,
                msg: "unknown fidelity byte".into(),
            })?;
            let k = r.u32()? as usize;
            if k == 0 {
                return Err(r.corrupt("class memory with zero components"));
            }
            let mut comps = Vec::with_capacity(k);
            for _ in 0..k {
                let weight = r.f64()?;
                let mean = r.f64s(d)?;
                let spread = match fidelity {
                    Fidelity::Dmr => Spread::Full(r.f64s(d * d)?),
                    Fidelity::DStd => Spread::DiagStd(r.f64s(d)?),
                    Fidelity::DmrLite | Fidelity::Prior => Spread::ScalarStd(r.f64()?),
                };
                comps.push(MemoryComponent {
                    weight,
                    mean,
                    spread,
                });
            }
            let mem = ClassMemory::new(class_id, fidelity, comps).map_err(|e| Error::Corrupt {
                offset: start,
                msg: e.to_string(),
            })?;
            bank.insert(mem).map_err(|e| Error::Corrupt {
                offset: start,
                msg: e.to_string(),
            })?;
        }
        if !r.is_empty() {
            return Err(r.corrupt("trailing bytes after bank"));
        }
        Ok(bank)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Inspection-oriented JSON: weights, means and a spread summary per
    /// component (full covariances are summarised by their diagonal std).
    pub fn to_json(&self) -> serde_json::Value {
        let d = self.dim;
        let classes: Vec<serde_json::Value> = self
            .entries
            .values()
            .map(|m| {
                let comps: Vec<serde_json::Value> = m
                    .components
                    .iter()
                    .map(|c| {
                        let spread = match &c.spread {
                            Spread::ScalarStd(s) => serde_json::json!({ "scalar_std": s }),
                            other => serde_json::json!({
                                "diag_std": other.diag_var(d).iter().map(|v| v.sqrt()).collect::<Vec<_>>(),
                                "rms_std": other.mean_var(d).sqrt(),
                            }),
                        };
                        serde_json::json!({ "weight": c.weight, "mean": c.mean, "spread": spread })
                    })
                    .collect();
                serde_json::json!({
                    "class_id": m.class_id,
                    "fidelity": m.fidelity,
                    "k": m.k(),
                    "footprint": memory_footprint(m),
                    "footprint_with_weights": memory_footprint_with_weights(m),
                    "components": comps,
                })
            })
            .collect();
        serde_json::json!({ "dim": d, "classes": classes })
    }

    /// One line per class: id, K, fidelity, footprint, weights.
    pub fn summary(&self) -> String {
        let mut out = format!("{} classes (d = {})\n", self.len(), self.dim);
        if self.is_empty() {
            return out;
        }
        out.push_str("class_id,k,fidelity,footprint,footprint_with_weights,weights\n");
        for m in self.entries.values() {
            let w: Vec<String> = m.weights().iter().map(|w| format!("{w:.4}")).collect();
            out.push_str(&format!(
                "{},{},{},{},{},[{}]\n",
                m.class_id,
                m.k(),
                m.fidelity,
                memory_footprint(m),
                memory_footprint_with_weights(m),
                w.join(" ")
            ));
        }
        out
    }
}

pub const BANK_FORMAT_VERSION: u32 = 1;

pub fn generate_pseudo(
    bank: &MemoryBank,
    class_id: u32,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "pseudo-feature count must be >= 1".into(),
        ));
    }
    let mem = bank.get(class_id).ok_or(Error::UnknownClass(class_id))?;
    Ok(PseudoSampler::new(mem)?.sample(n, &mut rng::seeded(seed)))
}
