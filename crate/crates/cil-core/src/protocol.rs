//! Incremental task sequence, data partitions, exemplar reservation and
//! per-batch slot composition.

use crate::error::{Error, Result};
use crate::util::seeded_rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

pub type ClassId = usize;

/// Which split of the dataset a sample reference points into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

/// A sample is addressed by (split, index) so stores never copy pixel data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleRef {
    pub split: Split,
    pub index: usize,
}

/// One classification task: its time index, class set and data splits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub time_index: usize,
    pub classes: Vec<ClassId>,
    /// Training samples per class, aligned with `classes`.
    pub train_split: Vec<Vec<SampleRef>>,
    /// Test samples per class, aligned with `classes`.
    pub test_split: Vec<Vec<SampleRef>>,
}

/// Ordered class partition over all tasks of a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskTimeline {
    pub tasks: Vec<TaskSpec>,
    pub seed: u64,
}

impl TaskTimeline {
    /// All classes seen at or before `time_index`.
    pub fn seen_classes(&self, time_index: usize) -> Vec<ClassId> {
        self.tasks[..=time_index]
            .iter()
            .flat_map(|t| t.classes.iter().copied())
            .collect()
    }

    /// Classes introduced strictly before `time_index`.
    pub fn old_classes(&self, time_index: usize) -> Vec<ClassId> {
        if time_index == 0 {
            return Vec::new();
        }
        self.seen_classes(time_index - 1)
    }

    /// Task at which `class` was introduced.
    pub fn origin_time(&self, class: ClassId) -> Option<usize> {
        self.tasks
            .iter()
            .position(|t| t.classes.contains(&class))
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() || self.tasks[0].classes.is_empty() {
            return Err(Error::ClassSet("base task must be nonempty".into()));
        }
        let mut seen = BTreeSet::new();
        for (i, task) in self.tasks.iter().enumerate() {
            if task.classes.is_empty() {
                return Err(Error::ClassSet(format!("task {i} has no classes")));
            }
            if task.time_index != i {
                return Err(Error::ClassSet(format!(
                    "task at position {i} carries time index {}",
                    task.time_index
                )));
            }
            for &c in &task.classes {
                if !seen.insert(c) {
                    return Err(Error::ClassSet(format!(
                        "class {c} appears in more than one task"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let timeline: TaskTimeline = serde_json::from_str(&text)?;
        timeline.validate()?;
        Ok(timeline)
    }
}

/// Splits `class_ids` into a base task plus fixed-size increments after a
/// seeded shuffle. Rejects splits that leave a remainder.
pub fn build_timeline(
    class_ids: &[ClassId],
    base_count: usize,
    increment_size: usize,
    seed: u64,
) -> Result<TaskTimeline> {
    if base_count < 1 || increment_size < 1 {
        return Err(Error::InvalidConfig(
            "base_count and increment_size must be at least 1".into(),
        ));
    }
    if class_ids.len() < base_count {
        return Err(Error::TimelineSplit {
            total: class_ids.len(),
            base: base_count,
            increment: increment_size,
            remainder: class_ids.len(),
        });
    }
    let rest = class_ids.len() - base_count;
    let remainder = rest % increment_size;
    if remainder != 0 {
        return Err(Error::TimelineSplit {
            total: class_ids.len(),
            base: base_count,
            increment: increment_size,
            remainder,
        });
    }

    let mut order: Vec<ClassId> = class_ids.to_vec();
    let mut rng = seeded_rng(seed, &[0x7a5b]);
    order.shuffle(&mut rng);

    let mut tasks = Vec::new();
    let mut cursor = 0usize;
    let mut time_index = 0usize;
    while cursor < order.len() {
        let size = if time_index == 0 { base_count } else { increment_size };
        let classes = order[cursor..cursor + size].to_vec();
        tasks.push(TaskSpec {
            time_index,
            classes,
            train_split: Vec::new(),
            test_split: Vec::new(),
        });
        cursor += size;
        time_index += 1;
    }

    let timeline = TaskTimeline { tasks, seed };
    timeline.validate()?;
    Ok(timeline)
}

/// Reserved sample references per class.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ExemplarStore {
    pub capacity_per_class: usize,
    /// (class id, reserved references) in reservation order.
    pub reserved: Vec<(ClassId, Vec<SampleRef>)>,
}

impl ExemplarStore {
    pub fn new(capacity_per_class: usize) -> Self {
        Self {
            capacity_per_class,
            reserved: Vec::new(),
        }
    }

    pub fn class_refs(&self, class: ClassId) -> Option<&[SampleRef]> {
        self.reserved
            .iter()
            .find(|(c, _)| *c == class)
            .map(|(_, refs)| refs.as_slice())
    }

    pub fn classes(&self) -> Vec<ClassId> {
        self.reserved.iter().map(|(c, _)| *c).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.reserved.iter().all(|(_, refs)| refs.is_empty())
    }

    /// Flattened (class, reference) pairs in reservation order.
    pub fn all_refs(&self) -> Vec<(ClassId, SampleRef)> {
        self.reserved
            .iter()
            .flat_map(|(c, refs)| refs.iter().map(move |r| (*c, *r)))
            .collect()
    }

    pub fn reserve(&mut self, class: ClassId, refs: Vec<SampleRef>) -> Result<()> {
        if refs.len() > self.capacity_per_class {
            return Err(Error::ExemplarCount {
                requested: refs.len(),
                available: self.capacity_per_class,
            });
        }
        if self.reserved.iter().any(|(c, _)| *c == class) {
            return Err(Error::ClassSet(format!(
                "class {class} already has reserved exemplars"
            )));
        }
        self.reserved.push((class, refs));
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Seeded uniform subset without replacement from one class's sample pool.
pub fn select_exemplars(
    pool: &[SampleRef],
    count: usize,
    seed: u64,
) -> Result<Vec<SampleRef>> {
    if count > pool.len() {
        return Err(Error::ExemplarCount {
            requested: count,
            available: pool.len(),
        });
    }
    let mut rng = seeded_rng(seed, &[0x3e3a]);
    let picked = rand::seq::index::sample(&mut rng, pool.len(), count);
    Ok(picked.iter().map(|i| pool[i]).collect())
}

/// Per-batch slot counts for one incremental training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchComposition {
    pub new_original: usize,
    pub new_synthetic: usize,
    pub old_exemplar: usize,
    pub old_synthetic: usize,
}

impl BatchComposition {
    pub fn total(&self) -> usize {
        self.new_original + self.new_synthetic + self.old_exemplar + self.old_synthetic
    }
}

/// Slot distribution table for incremental batches.
///
/// Rows keyed by (exemplars reserved?, number of generators); every row sums
/// to the batch size `B`, which must be divisible by 4.
pub fn compose_batch(
    has_exemplars: bool,
    n_generators: usize,
    batch_size: usize,
) -> Result<BatchComposition> {
    if batch_size == 0 || batch_size % 4 != 0 {
        return Err(Error::InvalidConfig(format!(
            "batch size {batch_size} is not divisible by 4"
        )));
    }
    let b = batch_size;
    let (new_original, new_synthetic, old_exemplar, old_synthetic) =
        match (has_exemplars, n_generators) {
            (true, 0) => (b / 2, 0, b / 2, 0),
            (true, 1) => (b / 2, 0, b / 4, b / 4),
            (true, 2) => (b / 4, b / 4, b / 4, b / 4),
            (false, 0) => (b, 0, 0, 0),
            (false, 1) => (b / 2, 0, 0, b / 2),
            (false, 2) => (b / 4, b / 4, 0, b / 2),
            (_, n) => {
                return Err(Error::InvalidConfig(format!(
                    "number of generators must be 0, 1 or 2, got {n}"
                )))
            }
        };
    Ok(BatchComposition {
        new_original,
        new_synthetic,
        old_exemplar,
        old_synthetic,
    })
}
