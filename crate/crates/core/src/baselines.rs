//! Reference memory strategies for ablations: a class center with one
//! scalar deviation (`prior`), a center with per-dimension deviations
//! (`d-std`), and plain fine-tuning without replay.

use crate::classifier::{train_stage, LinearClassifier, TrainConfig};
use crate::error::{Error, Result};
use crate::feature_store::FeatureRecord;
use crate::linalg::{self, check_dims};
use crate::memory::{ClassMemory, Fidelity, MemoryBank, MemoryComponent, Spread};

fn moments(features: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    if features.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 features, found {}",
            features.len()
        )));
    }
    check_dims(features, features[0].len())?;
    let mu = linalg::mean(features);
    let var = linalg::variances(features, &mu);
    Ok((mu, var))
}

/// Class mean and `σ = sqrt(mean per-dimension variance)`.
pub fn fit_prior(class_id: u32, features: &[Vec<f64>]) -> Result<ClassMemory> {
    let (mean, var) = moments(features)?;
    let sigma = (var.iter().sum::<f64>() / var.len() as f64).sqrt();
    ClassMemory::new(
        class_id,
        Fidelity::Prior,
        vec![MemoryComponent {
            weight: 1.0,
            mean,
            spread: Spread::ScalarStd(sigma),
        }],
    )
}

/// Class mean and the standard deviation of every coordinate.
pub fn fit_dstd(class_id: u32, features: &[Vec<f64>]) -> Result<ClassMemory> {
    let (mean, var) = moments(features)?;
    ClassMemory::new(
        class_id,
        Fidelity::DStd,
        vec![MemoryComponent {
            weight: 1.0,
            mean,
            spread: Spread::DiagStd(var.into_iter().map(f64::sqrt).collect()),
        }],
    )
}

/// Train on the new task alone: no memory, cross-entropy on new labels only.
pub fn finetune_stage(
    classifier: &LinearClassifier,
    task_records: &[FeatureRecord],
    cfg: &TrainConfig,
) -> Result<LinearClassifier> {
    let cfg = TrainConfig {
        xi: 1.0,
        ..cfg.clone()
    };
    train_stage(
        classifier,
        task_records,
        &MemoryBank::new(classifier.dim()),
        &cfg,
    )
}
