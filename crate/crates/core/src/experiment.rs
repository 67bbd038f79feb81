//! Config-driven experiment runs, sweeps and report comparison.
//!
//! A run loads or synthesises a dataset, splits it into train and test
//! sides, slices the train side into a task stream and then, per stage,
//! trains the classifier, stores memories for the stage's classes and
//! evaluates on the test features of every class seen so far.
//!
//! Randomness comes from two seeds: `stream.seed` (class shuffle and
//! train/test split) and `train.seed` (minibatch order, replay draws and
//! memory fitting). A synthetic dataset is fixed by its own spec.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{finetune_stage, fit_dstd, fit_prior};
use crate::classifier::{train_stage, LinearClassifier, TrainConfig};
use crate::error::{Error, Result};
use crate::feature_store::{self, Dataset, FileFormat, SynthSpec};
use crate::gmm::EmConfig;
use crate::memory::{fit_class_memory, generate_pseudo, Fidelity, MemoryBank};
use crate::metrics::{self, CiPooling, RunReport, StageReport};
use crate::mmd::{mmd_to_truth, Bandwidth};
use crate::rng;
use crate::silhouette::{CandidateClusterer, KSelectConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Synth,
    Csv,
    Binary,
}

fn default_test_fraction() -> f64 {
    0.3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Separate held-out file; without it the data is split per class.
    #[serde(default)]
    pub test_path: Option<PathBuf>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub synth_spec: Option<SynthSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub base: usize,
    pub increment: usize,
    #[serde(default)]
    pub seed: u64,
}

/// How old classes are remembered.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// No memory, cross-entropy on new classes only.
    Finetune,
    Prior,
    /// Single component with per-dimension std.
    DStd,
    DmrLite,
    Dmr,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Finetune => "finetune",
            Strategy::Prior => "prior",
            Strategy::DStd => "d-std",
            Strategy::DmrLite => "dmr-lite",
            Strategy::Dmr => "dmr",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).ok()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryConfig {
    pub fidelity: Strategy,
    pub k_max: usize,
    pub threshold: f64,
    pub clusterer: CandidateClusterer,
    pub em: EmConfig,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        let k = KSelectConfig::default();
        MemoryConfig {
            fidelity: Strategy::Dmr,
            k_max: k.k_max,
            threshold: k.threshold,
            clusterer: k.candidate_clusterer,
            em: EmConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mmd_bandwidth: Bandwidth,
    pub ci_pooling: CiPooling,
    /// Pseudo and real features per class for the MMD check; 0 disables it.
    pub mmd_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mmd_bandwidth: Bandwidth::Median,
            ci_pooling: CiPooling::All,
            mmd_samples: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutConfig {
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub stream: StreamConfig,
    #[serde(default)]
    pub memory: MemoryConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub out: OutConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        match self.data.source {
            DataSource::Synth => match &self.data.synth_spec {
                Some(s) => s.validate()?,
                None => {
                    return Err(Error::config(
                        "data.synth_spec",
                        "required when source is synth",
                    ))
                }
            },
            DataSource::Csv | DataSource::Binary => {
                if self.data.path.is_none() {
                    return Err(Error::config("data.path", "required for file sources"));
                }
            }
        }
        if self.data.test_path.is_none()
            && !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0)
        {
            return Err(Error::config("data.test_fraction", "must lie in (0, 1)"));
        }
        self.select_config(0).validate()?;
        self.memory.em.validate().map_err(|e| match e {
            Error::Config { path, msg } => Error::config(format!("memory.{path}"), msg),
            e => e,
        })?;
        self.train.validate()
    }

    fn select_config(&self, seed: u64) -> KSelectConfig {
        KSelectConfig {
            k_max: self.memory.k_max,
            threshold: self.memory.threshold,
            candidate_clusterer: self.memory.clusterer,
            seed,
        }
    }

    /// Replace both run seeds.
    pub fn override_seeds(&mut self, seed: u64) {
        self.stream.seed = seed;
        self.train.seed = seed;
    }
}

/// Parse a config, reporting schema errors with the offending field path.
/// Returns the typed config and the raw JSON value for provenance.
pub fn parse_config(text: &str) -> Result<(ExperimentConfig, serde_json::Value)> {
    let raw: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::config("", e.to_string()))?;
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(&raw).map_err(|e| {
        let path = e.path().to_string();
        Error::config(
            if path == "." { String::new() } else { path },
            e.into_inner().to_string(),
        )
    })?;
    cfg.validate()?;
    Ok((cfg, raw))
}

pub fn load_config(path: &Path) -> Result<(ExperimentConfig, serde_json::Value)> {
    parse_config(&std::fs::read_to_string(path)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub stream: u64,
    pub train: u64,
}

/// Everything written to `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub config: serde_json::Value,
    pub strategy: Strategy,
    pub seeds: Seeds,
    pub class_order: Vec<u32>,
    pub report: RunReport,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: RunReport,
    pub bank: MemoryBank,
    pub classifier: LinearClassifier,
    pub class_order: Vec<u32>,
}

fn load_source(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let split_seed = rng::derive(cfg.stream.seed, &[0x7e57]);
    let load = |p: &Path| {
        let fmt = match cfg.data.source {
            DataSource::Csv => FileFormat::Csv,
            _ => FileFormat::PackedBinary,
        };
        feature_store::load_embeddings(p, fmt)
    };
    match cfg.data.source {
        DataSource::Synth => {
            let spec =
                cfg.data.synth_spec.as_ref().ok_or_else(|| {
                    Error::config("data.synth_spec", "required when source is synth")
                })?;
            feature_store::synth_generate(spec)?
                .dataset
                .train_test_split(cfg.data.test_fraction, split_seed)
        }
        DataSource::Csv | DataSource::Binary => {
            let path = cfg
                .data
                .path
                .as_deref()
                .ok_or_else(|| Error::config("data.path", "required for file sources"))?;
            let all = load(path)?;
            match &cfg.data.test_path {
                Some(t) => {
                    let test = load(t)?;
                    if test.dim() != all.dim() {
                        return Err(Error::Dimension {
                            expected: all.dim(),
                            found: test.dim(),
                        });
                    }
                    Ok((all, test))
                }
                None => all.train_test_split(cfg.data.test_fraction, split_seed),
            }
        }
    }
}

/// Store memories for `classes`, fitted on their training features.
fn remember(
    cfg: &ExperimentConfig,
    bank: &mut MemoryBank,
    records: &[feature_store::FeatureRecord],
    classes: &[u32],
) -> Result<()> {
    for &c in classes {
        let feats: Vec<Vec<f64>> = records
            .iter()
            .filter(|r| r.class_id == c)
            .map(|r| r.vector.clone())
            .collect();
        let seed = rng::derive(cfg.train.seed, &[0x3e3, u64::from(c)]);
        let mem = match cfg.memory.fidelity {
            Strategy::Finetune => return Ok(()),
            Strategy::Prior => fit_prior(c, &feats)?,
            Strategy::DStd => fit_dstd(c, &feats)?,
            Strategy::DmrLite | Strategy::Dmr => {
                let fidelity = if cfg.memory.fidelity == Strategy::Dmr {
                    Fidelity::Dmr
                } else {
                    Fidelity::DmrLite
                };
                let em = EmConfig {
                    seed: rng::derive(seed, &[1]),
                    ..cfg.memory.em.clone()
                };
                fit_class_memory(
                    c,
                    &feats,
                    fidelity,
                    &cfg.select_config(rng::derive(seed, &[2])),
                    &em,
                )?
            }
        };
        bank.insert(mem)?;
    }
    Ok(())
}

fn old_class_mmd(
    cfg: &ExperimentConfig,
    bank: &MemoryBank,
    old: &[u32],
    test: &Dataset,
    stage: u32,
) -> Result<BTreeMap<u32, f64>> {
    let n = cfg.eval.mmd_samples;
    let mut out = BTreeMap::new();
    if n < 2 {
        return Ok(out);
    }
    for &c in old {
        if bank.get(c).is_none() {
            continue;
        }
        let real: Vec<Vec<f64>> = test.features_of(c).into_iter().take(n).collect();
        if real.len() < 2 {
            continue;
        }
        let seed = rng::derive(cfg.train.seed, &[0x33d, u64::from(stage), u64::from(c)]);
        let pseudo = generate_pseudo(bank, c, n, seed)?;
        out.insert(c, mmd_to_truth(&pseudo, &real, cfg.eval.mmd_bandwidth)?);
    }
    Ok(out)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let (train, test) = load_source(cfg)?;
    let stream = feature_store::split_task_stream(
        &train,
        cfg.stream.base,
        cfg.stream.increment,
        cfg.stream.seed,
    )?;
    let task_of_class = stream.task_of_class();
    let d = train.dim();
    let mut clf = LinearClassifier::new(d);
    let mut bank = MemoryBank::new(d);
    let mut stages = Vec::with_capacity(stream.tasks.len());
    let mut seen: Vec<u32> = Vec::new();

    for task in &stream.tasks {
        let t = task.task_id;
        let mut stage = || -> Result<StageReport> {
            let stage_cfg = TrainConfig {
                seed: rng::derive(cfg.train.seed, &[u64::from(t)]),
                ..cfg.train.clone()
            };
            clf = match cfg.memory.fidelity {
                Strategy::Finetune => finetune_stage(&clf, &task.records, &stage_cfg)?,
                _ => train_stage(&clf, &task.records, &bank, &stage_cfg)?,
            };
            let old = seen.clone();
            remember(cfg, &mut bank, &task.records, &task.classes)?;
            seen.extend(&task.classes);
            seen.sort_unstable();

            let (feats, labels): (Vec<Vec<f64>>, Vec<u32>) = test
                .records()
                .iter()
                .filter(|r| seen.binary_search(&r.class_id).is_ok())
                .map(|r| (r.vector.clone(), r.class_id))
                .unzip();
            let preds = clf.predict(&feats)?;
            Ok(StageReport {
                task_id: t,
                seen_classes: seen.len(),
                accuracy: metrics::stage_accuracy(&preds, &labels)?,
                per_class_accuracy: metrics::per_class_accuracy(&preds, &labels),
                confusion: metrics::confusion_index(
                    &preds,
                    &labels,
                    &task_of_class,
                    t,
                    cfg.eval.ci_pooling,
                )?,
                mmd_per_old_class: old_class_mmd(cfg, &bank, &old, &test, t)?,
                footprint_floats: bank.footprint(),
                footprint_with_weights: bank.footprint_with_weights(),
            })
        };
        stages.push(stage().map_err(|e| e.at_stage(t as usize))?);
    }
    Ok(RunOutput {
        report: metrics::run_summary(stages)?,
        bank,
        classifier: clf,
        class_order: stream.class_order,
    })
}

impl RunOutput {
    pub fn document(&self, cfg: &ExperimentConfig, raw: &serde_json::Value) -> ReportDocument {
        ReportDocument {
            config: raw.clone(),
            strategy: cfg.memory.fidelity,
            seeds: Seeds {
                stream: cfg.stream.seed,
                train: cfg.train.seed,
            },
            class_order: self.class_order.clone(),
            report: self.report.clone(),
        }
    }

    /// Writes report.json, report.csv, memory_bank.bin, memory_bank.json
    /// and classifier.bin into `dir`.
    pub fn write(&self, dir: &Path, doc: &ReportDocument) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut json = serde_json::to_string_pretty(doc)?;
        json.push('\n');
        std::fs::write(dir.join("report.json"), json)?;
        std::fs::write(dir.join("report.csv"), self.report.to_csv())?;
        self.bank.save(&dir.join("memory_bank.bin"))?;
        let mut bank_json = serde_json::to_string_pretty(&self.bank.to_json())?;
        bank_json.push('\n');
        std::fs::write(dir.join("memory_bank.json"), bank_json)?;
        std::fs::write(dir.join("classifier.bin"), self.classifier.to_bytes())?;
        Ok(())
    }
}

/// A config parameter varied by [`sweep`].
#[derive(Clone, Debug, PartialEq)]
pub enum SweepAxis {
    Fidelity(Vec<Strategy>),
    Xi(Vec<f64>),
}

/// One config per sweep value, each with its raw JSON patched to match and
/// a short label (`fidelity-dmr`, `xi-0.5`).
pub fn sweep_variants(
    cfg: &ExperimentConfig,
    raw: &serde_json::Value,
    axis: &SweepAxis,
) -> Vec<(String, ExperimentConfig, serde_json::Value)> {
    let patch = |section: &str, key: &str, value: serde_json::Value| {
        let mut r = raw.clone();
        if let Some(obj) = r.as_object_mut() {
            let entry = obj
                .entry(section.to_string())
                .or_insert_with(|| serde_json::Value::Object(Default::default()));
            if let Some(o) = entry.as_object_mut() {
                o.insert(key.to_string(), value);
            }
        }
        r
    };
    match axis {
        SweepAxis::Fidelity(list) => list
            .iter()
            .map(|&s| {
                let mut c = cfg.clone();
                c.memory.fidelity = s;
                (
                    format!("fidelity-{}", s.name()),
                    c,
                    patch("memory", "fidelity", serde_json::json!(s)),
                )
            })
            .collect(),
        SweepAxis::Xi(list) => list
            .iter()
            .map(|&xi| {
                let mut c = cfg.clone();
                c.train.xi = xi;
                (
                    format!("xi-{xi}"),
                    c,
                    patch("train", "xi", serde_json::json!(xi)),
                )
            })
            .collect(),
    }
}

/// Side-by-side summary of at least two reports over the same stream shape,
/// as CSV.
pub fn compare(reports: &[(String, ReportDocument)]) -> Result<String> {
    if reports.len() < 2 {
        return Err(Error::InvalidArgument(
            "compare needs at least 2 reports".into(),
        ));
    }
    let shape = |d: &ReportDocument| {
        d.report
            .stages
            .iter()
            .map(|s| s.seen_classes)
            .collect::<Vec<_>>()
    };
    let reference = shape(&reports[0].1);
    for (name, doc) in &reports[1..] {
        if shape(doc) != reference {
            return Err(Error::InvalidArgument(format!(
                "stream shape of {name} ({:?}) differs from {} ({reference:?})",
                shape(doc),
                reports[0].0
            )));
        }
    }
    let mut out = String::from(
        "report,strategy,mean_accuracy,final_accuracy,performance_drop,ci_total,footprint\n",
    );
    for (name, doc) in reports {
        let r = &doc.report;
        out.push_str(&format!(
            "{name},{},{:.2},{:.2},{:.2},{:.4},{}\n",
            doc.strategy.name(),
            r.mean_accuracy,
            r.final_accuracy,
            r.performance_drop,
            r.ci_total,
            r.final_footprint()
        ));
    }
    Ok(out)
}

pub fn read_report(path: &Path) -> Result<ReportDocument> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
