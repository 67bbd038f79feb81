//! Stage-wise evaluation: top-1 accuracy, old/new confusion and run
//! summaries.
//!
//! The confusion index of a stage is
//!
//! ```text
//! C_I = M_new / O + M_old / N
//! ```
//!
//! with `M_new` the old-task samples predicted as a new-task class, `M_old`
//! the new-task samples predicted as an old-task class, `O` the number of
//! old-task samples and `N` the number of new-task samples. Each term is a
//! rate in `[0, 1]`, so `C_I ∈ [0, 2]`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};

/// Emitted accuracies carry two decimals.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn ser_round2<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(round2(*x))
}

fn ser_round2_map<S: Serializer>(
    m: &BTreeMap<u32, f64>,
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    s.collect_map(m.iter().map(|(k, v)| (k, round2(*v))))
}

/// `100 · correct / total`.
pub fn stage_accuracy(preds: &[u32], labels: &[u32]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::Dimension {
            expected: labels.len(),
            found: preds.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::NoRecords);
    }
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

/// Accuracy of every class present in `labels`.
pub fn per_class_accuracy(preds: &[u32], labels: &[u32]) -> BTreeMap<u32, f64> {
    let mut tally: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (p, l) in preds.iter().zip(labels) {
        let e = tally.entry(*l).or_default();
        e.1 += 1;
        if p == l {
            e.0 += 1;
        }
    }
    tally
        .into_iter()
        .map(|(c, (ok, n))| (c, 100.0 * ok as f64 / n as f64))
        .collect()
}

/// Which earlier tasks count as "old" at a stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CiPooling {
    /// Every task before the current one.
    #[default]
    All,
    /// Only the task immediately before the current one.
    Previous,
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub c_i: f64,
    pub m_new: usize,
    pub m_old: usize,
    /// New-task sample count.
    pub n: usize,
    /// Old-task sample count.
    pub o: usize,
}

#[derive(Clone, Copy, PartialEq)]
enum Group {
    Old,
    New,
    Ignored,
}

pub fn confusion_index(
    preds: &[u32],
    labels: &[u32],
    task_of_class: &BTreeMap<u32, u32>,
    current_task: u32,
    pooling: CiPooling,
) -> Result<Confusion> {
    if preds.len() != labels.len() {
        return Err(Error::Dimension {
            expected: labels.len(),
            found: preds.len(),
        });
    }
    let group = |class: u32| -> Result<Group> {
        let t = *task_of_class
            .get(&class)
            .ok_or(Error::UnknownClass(class))?;
        Ok(if t == current_task {
            Group::New
        } else if t < current_task && (pooling == CiPooling::All || t + 1 == current_task) {
            Group::Old
        } else {
            Group::Ignored
        })
    };
    let mut out = Confusion::default();
    for (&p, &l) in preds.iter().zip(labels) {
        let (truth, guess) = (group(l)?, group(p)?);
        match truth {
            Group::Old => {
                out.o += 1;
                if guess == Group::New {
                    out.m_new += 1;
                }
            }
            Group::New => {
                out.n += 1;
                if guess == Group::Old {
                    out.m_old += 1;
                }
            }
            Group::Ignored => {}
        }
    }
    let rate = |m: usize, total: usize| {
        if total == 0 {
            0.0
        } else {
            m as f64 / total as f64
        }
    };
    out.c_i = rate(out.m_new, out.o) + rate(out.m_old, out.n);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub task_id: u32,
    pub seen_classes: usize,
    #[serde(serialize_with = "ser_round2")]
    pub accuracy: f64,
    #[serde(serialize_with = "ser_round2_map")]
    pub per_class_accuracy: BTreeMap<u32, f64>,
    pub confusion: Confusion,
    pub mmd_per_old_class: BTreeMap<u32, f64>,
    pub footprint_floats: usize,
    pub footprint_with_weights: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub stages: Vec<StageReport>,
    /// Mean of the stage accuracies.
    #[serde(serialize_with = "ser_round2")]
    pub mean_accuracy: f64,
    #[serde(serialize_with = "ser_round2")]
    pub final_accuracy: f64,
    /// First-stage accuracy minus last-stage accuracy.
    #[serde(serialize_with = "ser_round2")]
    pub performance_drop: f64,
    pub ci_total: f64,
}

pub fn run_summary(stages: Vec<StageReport>) -> Result<RunReport> {
    let (first, last) = match (stages.first(), stages.last()) {
        (Some(f), Some(l)) => (f.accuracy, l.accuracy),
        _ => return Err(Error::NoRecords),
    };
    let mean_accuracy = stages.iter().map(|s| s.accuracy).sum::<f64>() / stages.len() as f64;
    let ci_total = stages.iter().map(|s| s.confusion.c_i).sum();
    Ok(RunReport {
        stages,
        mean_accuracy,
        final_accuracy: last,
        performance_drop: first - last,
        ci_total,
    })
}

impl RunReport {
    /// One row per stage: task_id, accuracy, C_I, M_new, M_old, footprint.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task_id,accuracy,c_i,m_new,m_old,footprint\n");
        for s in &self.stages {
            out.push_str(&format!(
                "{},{:.2},{},{},{},{}\n",
                s.task_id,
                s.accuracy,
                s.confusion.c_i,
                s.confusion.m_new,
                s.confusion.m_old,
                s.footprint_floats
            ));
        }
        out
    }

    pub fn final_footprint(&self) -> usize {
        self.stages.last().map_or(0, |s| s.footprint_floats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_tasks(old: u32, new: u32) -> BTreeMap<u32, u32> {
        BTreeMap::from([(old, 0), (new, 1)])
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(stage_accuracy(&[1, 2], &[1, 2]).unwrap(), 100.0);
        assert_eq!(stage_accuracy(&[1, 0], &[1, 2]).unwrap(), 50.0);
        assert!(stage_accuracy(&[], &[]).is_err());
    }

    #[test]
    fn confusion_worked_example() {
        // 10 old samples (class 0), 20 new (class 1); 2 old→new, 5 new→old
        let mut labels = vec![0u32; 10];
        labels.extend(vec![1u32; 20]);
        let mut preds = labels.clone();
        preds[0] = 1;
        preds[1] = 1;
        for p in preds.iter_mut().skip(10).take(5) {
            *p = 0;
        }
        let c = confusion_index(&preds, &labels, &two_tasks(0, 1), 1, CiPooling::All).unwrap();
        assert_eq!((c.m_new, c.m_old, c.o, c.n), (2, 5, 10, 20));
        assert!((c.c_i - 0.45).abs() < 1e-15);
    }

    #[test]
    fn confusion_extremes() {
        let labels = [0, 0, 1];
        let map = two_tasks(0, 1);
        assert_eq!(
            confusion_index(&labels, &labels, &map, 1, CiPooling::All)
                .unwrap()
                .c_i,
            0.0
        );
        let c = confusion_index(&[1, 1, 0], &labels, &map, 1, CiPooling::All).unwrap();
        assert_eq!(c.c_i, 2.0);
        assert!(matches!(
            confusion_index(&[7], &[0], &map, 1, CiPooling::All),
            Err(Error::UnknownClass(7))
        ));
    }

    #[test]
    fn previous_pooling_ignores_older_tasks() {
        let map = BTreeMap::from([(0, 0), (1, 1), (2, 2)]);
        let labels = [0, 1, 2];
        let preds = [2, 2, 2];
        let all = confusion_index(&preds, &labels, &map, 2, CiPooling::All).unwrap();
        assert_eq!((all.m_new, all.o), (2, 2));
        let prev = confusion_index(&preds, &labels, &map, 2, CiPooling::Previous).unwrap();
        assert_eq!((prev.m_new, prev.o), (1, 1));
    }

    fn stage(acc: f64, ci: f64) -> StageReport {
        StageReport {
            task_id: 0,
            seen_classes: 1,
            accuracy: acc,
            per_class_accuracy: BTreeMap::new(),
            confusion: Confusion {
                c_i: ci,
                ..Default::default()
            },
            mmd_per_old_class: BTreeMap::new(),
            footprint_floats: 0,
            footprint_with_weights: 0,
        }
    }

    #[test]
    fn summary_formulas() {
        let r = run_summary(vec![stage(50.0, 0.0), stage(60.0, 0.0)]).unwrap();
        assert_eq!(r.mean_accuracy, 55.0);
        assert_eq!(r.performance_drop, -10.0);
        let r = run_summary(vec![stage(70.0, 0.1), stage(40.0, 0.2), stage(70.0, 0.3)]).unwrap();
        assert_eq!(r.performance_drop, 0.0);
        assert!((r.ci_total - 0.6).abs() < 1e-15);
        assert!(run_summary(vec![]).is_err());
    }

    #[test]
    fn accuracies_serialize_with_two_decimals() {
        let s = serde_json::to_string(&stage(200.0 / 3.0, 0.0)).unwrap();
        assert!(s.contains("\"accuracy\":66.67"), "{s}");
    }
}
