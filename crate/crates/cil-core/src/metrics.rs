//! Per-class accuracy bookkeeping, average accuracy and average forgetting.

use crate::backbone::Backbone;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::protocol::{ClassId, TaskTimeline};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Accuracy matrix: `entry(time, class)` is the accuracy on the test data
/// of `class`, measured at `time`. An entry exists iff the class was seen
/// by that time.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AccuracyLedger {
    entries: BTreeMap<usize, BTreeMap<ClassId, f64>>,
    /// Task at which each class was introduced.
    origin: BTreeMap<ClassId, usize>,
}

impl AccuracyLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, time: usize, class: ClassId, origin_time: usize, accuracy: f64) {
        assert!(
            (0.0..=1.0).contains(&accuracy),
            "accuracy {accuracy} out of [0,1]"
        );
        self.entries.entry(time).or_default().insert(class, accuracy);
        self.origin.entry(class).or_insert(origin_time);
    }

    pub fn accuracy(&self, time: usize, class: ClassId) -> Option<f64> {
        self.entries.get(&time).and_then(|row| row.get(&class)).copied()
    }

    pub fn times(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    pub fn classes_at(&self, time: usize) -> Vec<ClassId> {
        self.entries
            .get(&time)
            .map(|row| row.keys().copied().collect())
            .unwrap_or_default()
    }

    pub fn origin_of(&self, class: ClassId) -> Option<usize> {
        self.origin.get(&class).copied()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Unweighted mean accuracy over all classes seen at `time`.
pub fn average_accuracy(ledger: &AccuracyLedger, time: usize) -> Result<f64> {
    let row = ledger
        .entries
        .get(&time)
        .ok_or_else(|| Error::Metric(format!("no accuracy row for time {time}")))?;
    if row.is_empty() {
        return Err(Error::Metric(format!("empty accuracy row at time {time}")));
    }
    Ok(row.values().sum::<f64>() / row.len() as f64)
}

/// Mean over old classes of (best past accuracy minus current accuracy).
///
/// For class `c` introduced at time `j`, the forgetting at time `i` is
/// `max_{j <= k <= i-1} A_k(c) - A_i(c)`. Negative values are kept.
pub fn average_forgetting(ledger: &AccuracyLedger, time: usize) -> Result<f64> {
    if time == 0 {
        return Err(Error::Metric(
            "forgetting is undefined at time 0 (no old classes)".into(),
        ));
    }
    if !ledger.entries.contains_key(&time) {
        return Err(Error::Metric(format!("no accuracy row for time {time}")));
    }
    let old_classes: Vec<ClassId> = ledger
        .entries
        .get(&(time - 1))
        .ok_or_else(|| Error::Metric(format!("no accuracy row for time {}", time - 1)))?
        .keys()
        .copied()
        .collect();
    if old_classes.is_empty() {
        return Err(Error::Metric("no old classes to measure".into()));
    }
    let mut total = 0.0;
    for class in &old_classes {
        let origin = ledger
            .origin_of(*class)
            .ok_or_else(|| Error::Metric(format!("class {class} has no origin time")))?;
        let mut best = f64::NEG_INFINITY;
        for k in origin..time {
            let a = ledger.accuracy(k, *class).ok_or_else(|| {
                Error::Metric(format!("missing accuracy for class {class} at time {k}"))
            })?;
            best = best.max(a);
        }
        let now = ledger.accuracy(time, *class).ok_or_else(|| {
            Error::Metric(format!("missing accuracy for class {class} at time {time}"))
        })?;
        total += best - now;
    }
    Ok(total / old_classes.len() as f64)
}

/// Top-1 accuracy per class on its test split at `time`, via argmax of the
/// scaled cosine logits. Evaluation is read-only.
pub fn evaluate_model<S: Scalar>(
    model: &Backbone<S>,
    dataset: &Dataset,
    timeline: &TaskTimeline,
    time: usize,
    eval_batch: usize,
) -> Result<Vec<(ClassId, f64)>> {
    let head_classes = model.head.class_ids();
    let mut out = Vec::new();
    for task in &timeline.tasks[..=time] {
        for (ci, &class) in task.classes.iter().enumerate() {
            let refs = &task.test_split[ci];
            if refs.is_empty() {
                return Err(Error::Metric(format!("class {class} has no test split")));
            }
            let mut correct = 0usize;
            for chunk in refs.chunks(eval_batch.max(1)) {
                let images = dataset.gather::<S>(chunk)?;
                let (_, logits) = model.infer(&images.view())?;
                for row in logits.rows() {
                    let mut best = 0usize;
                    let mut best_v = S::neg_infinity();
                    for (k, &v) in row.iter().enumerate() {
                        if v > best_v {
                            best_v = v;
                            best = k;
                        }
                    }
                    if head_classes[best] == class {
                        correct += 1;
                    }
                }
            }
            out.push((class, correct as f64 / refs.len() as f64));
        }
    }
    Ok(out)
}
