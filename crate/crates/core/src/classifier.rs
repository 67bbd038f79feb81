//! Linear softmax classifier over frozen features, trained incrementally
//! with replayed pseudo-features and mixup between new and old classes.
//!
//! The stage objective is
//!
//! ```text
//! L = ξ (L_cls + L_p) + (1 − ξ) L_m
//! ```
//!
//! where every term is a mean cross-entropy: `L_cls` over new-task
//! features, `L_p` over pseudo-features with their old-class labels and
//! `L_m` over mixed features `λ e + (1 − λ) φ_p` labelled with the new
//! class of `e`. The first stage (no classes yet) trains on `L_cls` alone.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::feature_store::FeatureRecord;
use crate::linalg;
use crate::memory::{MemoryBank, PseudoSampler};
use crate::rng;

/// Weights are stored column-major: the column of class index `c` is
/// `weights[c·d .. (c+1)·d]`. `class_order` is kept ascending so the
/// lowest class id wins argmax ties.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    dim: usize,
    class_order: Vec<u32>,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl LinearClassifier {
    pub fn new(dim: usize) -> Self {
        LinearClassifier {
            dim,
            class_order: Vec::new(),
            weights: Vec::new(),
            bias: Vec::new(),
        }
    }

    pub fn from_parts(
        dim: usize,
        class_order: Vec<u32>,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if !class_order.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidArgument(
                "class order must be strictly ascending".into(),
            ));
        }
        let c = class_order.len();
        if weights.len() != dim * c {
            return Err(Error::Dimension {
                expected: dim * c,
                found: weights.len(),
            });
        }
        if bias.len() != c {
            return Err(Error::Dimension {
                expected: c,
                found: bias.len(),
            });
        }
        Ok(LinearClassifier {
            dim,
            class_order,
            weights,
            bias,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.class_order.len()
    }

    pub fn class_order(&self) -> &[u32] {
        &self.class_order
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn column(&self, idx: usize) -> &[f64] {
        &self.weights[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn index_of(&self, class_id: u32) -> Option<usize> {
        self.class_order.binary_search(&class_id).ok()
    }

    /// Add zero-initialised columns for `new_classes`; existing columns are
    /// copied bitwise.
    pub fn expand(&self, new_classes: &[u32]) -> Result<Self> {
        let mut order = self.class_order.clone();
        for &c in new_classes {
            if order.contains(&c) {
                return Err(Error::InvalidArgument(format!(
                    "class {c} already has a column"
                )));
            }
            order.push(c);
        }
        order.sort_unstable();
        order.dedup();
        let d = self.dim;
        let mut weights = vec![0.0; d * order.len()];
        let mut bias = vec![0.0; order.len()];
        for (new_idx, c) in order.iter().enumerate() {
            if let Some(old_idx) = self.index_of(*c) {
                weights[new_idx * d..(new_idx + 1) * d].copy_from_slice(self.column(old_idx));
                bias[new_idx] = self.bias[old_idx];
            }
        }
        Ok(LinearClassifier {
            dim: d,
            class_order: order,
            weights,
            bias,
        })
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_classes()];
        self.logits_into(x, &mut out);
        out
    }

    fn logits_into(&self, x: &[f64], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.bias[c] + linalg::dot(self.column(c), x);
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                found: x.len(),
            });
        }
        Ok(())
    }

    /// Argmax class per feature; ties go to the lower class id.
    pub fn predict(&self, features: &[Vec<f64>]) -> Result<Vec<u32>> {
        if self.num_classes() == 0 {
            return Err(Error::InvalidArgument("classifier has no classes".into()));
        }
        let mut z = vec![0.0; self.num_classes()];
        features
            .iter()
            .map(|x| {
                self.check_input(x)?;
                self.logits_into(x, &mut z);
                let mut best = 0;
                for c in 1..z.len() {
                    if z[c] > z[best] {
                        best = c;
                    }
                }
                Ok(self.class_order[best])
            })
            .collect()
    }

    /// "DMRC": u32 d, u32 C, C class ids, column-major weights, biases.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(b"DMRC");
        w.u32(self.dim as u32);
        w.u32(self.num_classes() as u32);
        for &c in &self.class_order {
            w.u32(c);
        }
        w.f64s(&self.weights);
        w.f64s(&self.bias);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(b"DMRC")?;
        let d = r.u32()? as usize;
        let c = r.u32()? as usize;
        let order = (0..c).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let weights = r.f64s(d * c)?;
        let bias = r.f64s(c)?;
        if !r.is_empty() {
            return Err(r.corrupt("trailing bytes after checkpoint"));
        }
        Self::from_parts(d, order, weights, bias).map_err(|e| Error::Corrupt {
            offset: 12,
            msg: e.to_string(),
        })
    }
}

/// `λ e + (1 − λ) φ`.
pub fn mixup_enhance(new_feat: &[f64], pseudo_feat: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!(
            "mixup weight {lambda} outside [0, 1]"
        )));
    }
    if new_feat.len() != pseudo_feat.len() {
        return Err(Error::Dimension {
            expected: new_feat.len(),
            found: pseudo_feat.len(),
        });
    }
    Ok(new_feat
        .iter()
        .zip(pseudo_feat)
        .map(|(e, p)| lambda * e + (1.0 - lambda) * p)
        .collect())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<u32>,
}

impl Batch {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<u32>) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::Dimension {
                expected: features.len(),
                found: labels.len(),
            });
        }
        Ok(Batch { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn push(&mut self, x: Vec<f64>, y: u32) {
        self.features.push(x);
        self.labels.push(y);
    }
}

/// Loss value with its gradients, laid out like the classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad_weights: Vec<f64>,
    pub grad_bias: Vec<f64>,
}

/// Adds `coef · mean CE(batch)` to `acc`, with gradients when asked.
fn accumulate_ce(
    clf: &LinearClassifier,
    batch: &Batch,
    coef: f64,
    acc: &mut LossGrad,
    with_grad: bool,
) -> Result<()> {
    if coef == 0.0 || batch.is_empty() {
        return Ok(());
    }
    let c = clf.num_classes();
    let d = clf.dim;
    let scale = coef / batch.len() as f64;
    let mut z = vec![0.0; c];
    let mut sum = 0.0;
    for (x, &y) in batch.features.iter().zip(&batch.labels) {
        clf.check_input(x)?;
        let target = clf.index_of(y).ok_or(Error::UnknownClass(y))?;
        clf.logits_into(x, &mut z);
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in z.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        sum += total.ln() + m - (z[target].ln() + m);
        if with_grad {
            for k in 0..c {
                let g = scale * (z[k] / total - if k == target { 1.0 } else { 0.0 });
                acc.grad_bias[k] += g;
                for (gw, v) in acc.grad_weights[k * d..(k + 1) * d].iter_mut().zip(x) {
                    *gw += g * v;
                }
            }
        }
    }
    acc.loss += scale * sum;
    Ok(())
}

fn composite(
    new: &Batch,
    pseudo: &Batch,
    mixed: &Batch,
    clf: &LinearClassifier,
    xi: f64,
    with_grad: bool,
) -> Result<LossGrad> {
    if !(0.0..=1.0).contains(&xi) {
        return Err(Error::InvalidArgument(format!("xi = {xi} outside [0, 1]")));
    }
    let mut acc = LossGrad {
        loss: 0.0,
        grad_weights: if with_grad {
            vec![0.0; clf.weights.len()]
        } else {
            Vec::new()
        },
        grad_bias: if with_grad {
            vec![0.0; clf.bias.len()]
        } else {
            Vec::new()
        },
    };
    accumulate_ce(clf, new, xi, &mut acc, with_grad)?;
    accumulate_ce(clf, pseudo, xi, &mut acc, with_grad)?;
    accumulate_ce(clf, mixed, 1.0 - xi, &mut acc, with_grad)?;
    Ok(acc)
}

/// `ξ (L_cls + L_p) + (1 − ξ) L_m`. Empty batches contribute nothing.
pub fn composite_loss(
    new: &Batch,
    pseudo: &Batch,
    mixed: &Batch,
    clf: &LinearClassifier,
    xi: f64,
) -> Result<f64> {
    Ok(composite(new, pseudo, mixed, clf, xi, false)?.loss)
}

/// [`composite_loss`] together with its analytic gradient.
pub fn composite_loss_grad(
    new: &Batch,
    pseudo: &Batch,
    mixed: &Batch,
    clf: &LinearClassifier,
    xi: f64,
) -> Result<LossGrad> {
    composite(new, pseudo, mixed, clf, xi, true)
}

fn default_epochs() -> usize {
    30
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    0.001
}
fn default_base_lr() -> f64 {
    0.01
}
fn default_momentum() -> f64 {
    0.9
}
fn default_xi() -> f64 {
    0.5
}
fn default_beta_alpha() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Epochs for the first stage; falls back to `epochs`.
    #[serde(default)]
    pub base_epochs: Option<usize>,
    #[serde(rename = "batch", alias = "batch_size", default = "default_batch")]
    pub batch_size: usize,
    #[serde(rename = "lr", alias = "learning_rate", default = "default_lr")]
    pub learning_rate: f64,
    #[serde(
        rename = "base_lr",
        alias = "base_learning_rate",
        default = "default_base_lr"
    )]
    pub base_learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_xi")]
    pub xi: f64,
    #[serde(default = "default_beta_alpha")]
    pub beta_alpha: f64,
    /// Pseudo-features drawn per old class for every minibatch. `None`
    /// matches the per-class share of the new-task batch.
    #[serde(default)]
    pub pseudo_per_class: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            base_epochs: None,
            batch_size: default_batch(),
            learning_rate: default_lr(),
            base_learning_rate: default_base_lr(),
            momentum: default_momentum(),
            xi: default_xi(),
            beta_alpha: default_beta_alpha(),
            pseudo_per_class: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::config(format!("train.{field}"), msg));
        if self.batch_size == 0 {
            return bad("batch", "must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad("lr", format!("{} must be > 0", self.learning_rate));
        }
        if !(self.base_learning_rate > 0.0) {
            return bad(
                "base_lr",
                format!("{} must be > 0", self.base_learning_rate),
            );
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", format!("{} outside [0, 1)", self.momentum));
        }
        if !(0.0..=1.0).contains(&self.xi) {
            return bad("xi", format!("{} outside [0, 1]", self.xi));
        }
        if !(self.beta_alpha > 0.0) {
            return bad("beta_alpha", format!("{} must be > 0", self.beta_alpha));
        }
        Ok(())
    }
}

/// One incremental stage: add columns for the classes in `task_records`,
/// then run momentum SGD on the composite objective. Pseudo and mixed
/// batches are redrawn from `bank` for every minibatch.
pub fn train_stage(
    classifier: &LinearClassifier,
    task_records: &[FeatureRecord],
    bank: &MemoryBank,
    cfg: &TrainConfig,
) -> Result<LinearClassifier> {
    cfg.validate()?;
    if task_records.is_empty() {
        return Err(Error::NoRecords);
    }
    for r in task_records {
        classifier.check_input(&r.vector)?;
    }
    let mut new_classes: Vec<u32> = task_records.iter().map(|r| r.class_id).collect();
    new_classes.sort_unstable();
    new_classes.dedup();
    let base = classifier.num_classes() == 0;
    let old_classes = classifier.class_order.clone();
    let mut clf = classifier.expand(&new_classes)?;

    let samplers: Vec<(u32, PseudoSampler)> = if base || bank.is_empty() {
        Vec::new()
    } else {
        old_classes
            .iter()
            .map(|&c| {
                Ok((
                    c,
                    PseudoSampler::new(bank.get(c).ok_or(Error::UnknownClass(c))?)?,
                ))
            })
            .collect::<Result<_>>()?
    };
    let replay = !samplers.is_empty();
    let xi = if base { 1.0 } else { cfg.xi };
    let (epochs, lr) = if base {
        (
            cfg.base_epochs.unwrap_or(cfg.epochs),
            cfg.base_learning_rate,
        )
    } else {
        (cfg.epochs, cfg.learning_rate)
    };
    let beta = Beta::new(cfg.beta_alpha, cfg.beta_alpha)
        .map_err(|e| Error::config("train.beta_alpha", e.to_string()))?;

    let mut order_rng = rng::seeded(rng::derive(cfg.seed, &[0]));
    let mut replay_rng = rng::seeded(rng::derive(cfg.seed, &[1]));
    let mut order: Vec<usize> = (0..task_records.len()).collect();
    let mut vel_w = vec![0.0; clf.weights.len()];
    let mut vel_b = vec![0.0; clf.bias.len()];
    let empty = Batch::default();

    for _ in 0..epochs {
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let new = Batch {
                features: chunk
                    .iter()
                    .map(|&i| task_records[i].vector.clone())
                    .collect(),
                labels: chunk.iter().map(|&i| task_records[i].class_id).collect(),
            };
            let mut pseudo = Batch::default();
            let mut mixed = Batch::default();
            if replay {
                if xi > 0.0 {
                    let per_class =
                        cfg.pseudo_per_class.unwrap_or(
                            ((new.len() as f64) / new_classes.len() as f64).round() as usize,
                        );
                    for (c, s) in &samplers {
                        for _ in 0..per_class {
                            pseudo.push(s.draw(&mut replay_rng), *c);
                        }
                    }
                }
                if xi < 1.0 {
                    for (e, &y) in new.features.iter().zip(&new.labels) {
                        let (_, s) = &samplers[replay_rng.random_range(0..samplers.len())];
                        let p = s.draw(&mut replay_rng);
                        let lambda: f64 = beta.sample(&mut replay_rng);
                        mixed.push(mixup_enhance(e, &p, lambda)?, y);
                    }
                }
            }
            let g = composite_loss_grad(
                &new,
                if replay { &pseudo } else { &empty },
                &mixed,
                &clf,
                xi,
            )?;
            if !g.loss.is_finite() {
                return Err(Error::Numeric("training loss diverged".into()));
            }
            for ((w, v), gw) in clf
                .weights
                .iter_mut()
                .zip(vel_w.iter_mut())
                .zip(&g.grad_weights)
            {
                *v = cfg.momentum * *v + gw;
                *w -= lr * *v;
            }
            for ((b, v), gb) in clf.bias.iter_mut().zip(vel_b.iter_mut()).zip(&g.grad_bias) {
                *v = cfg.momentum * *v + gb;
                *b -= lr * *v;
            }
        }
    }
    Ok(clf)
}
