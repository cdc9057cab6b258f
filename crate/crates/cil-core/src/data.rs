//! Procedurally generated desk-scale image dataset.
//!
//! Ten-ish classes of 32x32 RGB images; each class is a tinted oriented
//! grating with per-sample phase, amplitude and pixel noise. Classes differ
//! in orientation, spatial frequency and color, which makes them quickly
//! learnable by a small convnet while still exercising real image plumbing.
//! Pixel values live in [-1, 1] (the generator's squashing range).

use crate::error::{Error, Result};
use crate::protocol::{ClassId, SampleRef, Split, TaskTimeline};
use crate::scalar::Scalar;
use crate::util::seeded_rng;
use ndarray::Array4;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_hw: usize,
    pub channels: usize,
    /// Additive Gaussian pixel noise.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            train_per_class: 500,
            test_per_class: 100,
            image_hw: 32,
            channels: 3,
            noise_std: 0.08,
            seed: 0,
        }
    }
}

/// In-memory dataset; samples address into it via [`SampleRef`].
pub struct Dataset {
    pub config: DatasetConfig,
    train_images: Array4<f32>,
    train_labels: Vec<ClassId>,
    test_images: Array4<f32>,
    test_labels: Vec<ClassId>,
}

impl Dataset {
    pub fn synthesize(config: DatasetConfig) -> Self {
        let train = synth_split(&config, Split::Train, config.train_per_class);
        let test = synth_split(&config, Split::Test, config.test_per_class);
        Self {
            config,
            train_images: train.0,
            train_labels: train.1,
            test_images: test.0,
            test_labels: test.1,
        }
    }

    pub fn label_of(&self, r: SampleRef) -> ClassId {
        match r.split {
            Split::Train => self.train_labels[r.index],
            Split::Test => self.test_labels[r.index],
        }
    }

    /// Image batch for a list of references, converted to scalar type `S`.
    pub fn gather<S: Scalar>(&self, refs: &[SampleRef]) -> Result<Array4<S>> {
        let hw = self.config.image_hw;
        let c = self.config.channels;
        let mut out = Array4::<S>::zeros((refs.len(), c, hw, hw));
        for (i, r) in refs.iter().enumerate() {
            let (images, len) = match r.split {
                Split::Train => (&self.train_images, self.train_labels.len()),
                Split::Test => (&self.test_images, self.test_labels.len()),
            };
            if r.index >= len {
                return Err(Error::InvalidConfig(format!(
                    "sample reference {:?} out of range ({len} samples)",
                    r
                )));
            }
            out.index_axis_mut(ndarray::Axis(0), i)
                .assign(&images.index_axis(ndarray::Axis(0), r.index).mapv(|v| S::from_f(v as f64)));
        }
        Ok(out)
    }

    pub fn labels_of(&self, refs: &[SampleRef]) -> Vec<ClassId> {
        refs.iter().map(|r| self.label_of(*r)).collect()
    }

    /// All train references of one class, in index order.
    pub fn class_train_refs(&self, class: ClassId) -> Vec<SampleRef> {
        self.train_labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(index, _)| SampleRef {
                split: Split::Train,
                index,
            })
            .collect()
    }

    pub fn class_test_refs(&self, class: ClassId) -> Vec<SampleRef> {
        self.test_labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(index, _)| SampleRef {
                split: Split::Test,
                index,
            })
            .collect()
    }

    /// Fills a bare timeline's per-task train/test splits from this dataset.
    pub fn populate_timeline(&self, timeline: &mut TaskTimeline) -> Result<()> {
        for task in &mut timeline.tasks {
            task.train_split.clear();
            task.test_split.clear();
            for &class in &task.classes {
                if class >= self.config.classes {
                    return Err(Error::ClassSet(format!(
                        "timeline class {class} outside dataset with {} classes",
                        self.config.classes
                    )));
                }
                task.train_split.push(self.class_train_refs(class));
                task.test_split.push(self.class_test_refs(class));
            }
        }
        Ok(())
    }
}

fn synth_split(
    config: &DatasetConfig,
    split: Split,
    per_class: usize,
) -> (Array4<f32>, Vec<ClassId>) {
    let hw = config.image_hw;
    let ch = config.channels;
    let total = config.classes * per_class;
    let mut images = Array4::<f32>::zeros((total, ch, hw, hw));
    let mut labels = Vec::with_capacity(total);
    let split_tag = match split {
        Split::Train => 1u64,
        Split::Test => 2u64,
    };
    let mut i = 0usize;
    for class in 0..config.classes {
        for k in 0..per_class {
            let mut rng = seeded_rng(config.seed, &[split_tag, class as u64, k as u64]);
            render_sample(config, class, &mut rng, &mut images, i);
            labels.push(class);
            i += 1;
        }
    }
    (images, labels)
}

/// One tinted grating with random phase, amplitude and noise.
fn render_sample(
    config: &DatasetConfig,
    class: usize,
    rng: &mut impl Rng,
    images: &mut Array4<f32>,
    index: usize,
) {
    let hw = config.image_hw;
    let n_classes = config.classes as f64;
    let theta = std::f64::consts::PI * class as f64 / n_classes;
    let freq = 2.0 + (class % 3) as f64;
    let hue = 2.0 * std::f64::consts::PI * class as f64 / n_classes;

    // Per-channel tint and background offset, fixed per class.
    let tint = [
        0.45 * (hue).cos(),
        0.45 * (hue + 2.0 * std::f64::consts::PI / 3.0).cos(),
        0.45 * (hue + 4.0 * std::f64::consts::PI / 3.0).cos(),
    ];
    let background = [
        0.25 * (hue).sin(),
        0.25 * (hue + 2.0 * std::f64::consts::PI / 3.0).sin(),
        0.25 * (hue + 4.0 * std::f64::consts::PI / 3.0).sin(),
    ];

    let phase: f64 = rng.random_range(0.0..(2.0 * std::f64::consts::PI));
    let amplitude: f64 = rng.random_range(0.7..1.0);
    let (dir_x, dir_y) = (theta.cos(), theta.sin());
    let scale = 2.0 * std::f64::consts::PI * freq / hw as f64;

    for c in 0..config.channels {
        for y in 0..hw {
            for x in 0..hw {
                let wave = (scale * (dir_x * x as f64 + dir_y * y as f64) + phase).sin();
                let noise: f64 =
                    rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
                let v = background[c % 3]
                    + amplitude * tint[c % 3] * wave
                    + config.noise_std * noise;
                images[[index, c, y, x]] = v.clamp(-1.0, 1.0) as f32;
            }
        }
    }
}
