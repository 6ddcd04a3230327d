//! Parametric synthetic image classes and dataset splitting.

use std::f64::consts::PI;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::idx;
use crate::error::{invalid, Error, Result};
use crate::models::ImageBatch;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    SyntheticShapes,
    IdxFiles { images: PathBuf, labels: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub num_classes: usize,
    /// Examples generated per class (synthetic source only).
    pub per_class: usize,
    /// `(height, width)`; ignored for IDX files, which carry their own size.
    pub image_size: (usize, usize),
    pub noise_sigma: f64,
    pub seed: u64,
    pub train_fraction: f64,
}

impl DatasetSpec {
    pub fn synthetic(num_classes: usize, per_class: usize, image_size: (usize, usize), seed: u64) -> Self {
        Self {
            source: DataSource::SyntheticShapes,
            num_classes,
            per_class,
            image_size,
            noise_sigma: 0.1,
            seed,
            train_fraction: 0.7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "dataset.train_fraction must be in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("dataset.num_classes must be at least 2".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("dataset.noise_sigma must be finite and >= 0".into()));
        }
        if self.source == DataSource::SyntheticShapes {
            let (h, w) = self.image_size;
            if h < 4 || w < 4 || h * w < 4 * self.num_classes {
                return Err(Error::Config(format!(
                    "dataset.image_size {h}x{w} has too few pixels for {} classes",
                    self.num_classes
                )));
            }
            if self.per_class < 2 {
                return Err(Error::Config("dataset.per_class must be at least 2".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split<T> {
    pub train: ImageBatch<T>,
    pub test: ImageBatch<T>,
}

/// Geometry of one class: an oriented bar plus an offset blob.
#[derive(Clone, Copy, Debug)]
struct Template {
    angle: f64,
    bar_center: (f64, f64),
    blob_center: (f64, f64),
}

const BAR_HALF_LENGTH: f64 = 0.3;
const BAR_WIDTH: f64 = 0.55;
const BLOB_SIGMA: f64 = 0.8;
const OFFSET_RADIUS: f64 = 0.04;
const SHIFT_JITTER: f64 = 1.0;
const ANGLE_JITTER: f64 = 0.12;

fn template(class: usize, classes: usize, h: usize, w: usize) -> Template {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let size = h.min(w) as f64;
    let phase = 2.0 * PI * class as f64 / classes as f64;
    let r = OFFSET_RADIUS * size;
    Template {
        angle: PI * class as f64 / classes as f64,
        bar_center: (cy + r * phase.sin(), cx + r * phase.cos()),
        blob_center: (cy - 1.5 * r * phase.sin(), cx - 1.5 * r * phase.cos()),
    }
}

fn segment_distance(p: (f64, f64), center: (f64, f64), angle: f64, half: f64) -> f64 {
    let (dy, dx) = (p.0 - center.0, p.1 - center.1);
    let (uy, ux) = (angle.sin(), angle.cos());
    let along = (dy * uy + dx * ux).clamp(-half, half);
    let (ny, nx) = (dy - along * uy, dx - along * ux);
    (ny * ny + nx * nx).sqrt()
}

fn render(t: &Template, h: usize, w: usize, rng: &mut ChaCha8Rng, noise: Option<&Normal<f64>>) -> Vec<f64> {
    let shift = (
        rng.random_range(-SHIFT_JITTER..=SHIFT_JITTER),
        rng.random_range(-SHIFT_JITTER..=SHIFT_JITTER),
    );
    let angle = t.angle + rng.random_range(-ANGLE_JITTER..=ANGLE_JITTER);
    let gain = rng.random_range(0.8..=1.0);
    let bar = (t.bar_center.0 + shift.0, t.bar_center.1 + shift.1);
    let blob = (t.blob_center.0 + shift.0, t.blob_center.1 + shift.1);
    let half = BAR_HALF_LENGTH * h.min(w) as f64;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let p = (y as f64, x as f64);
            let d = segment_distance(p, bar, angle, half);
            let mut v = (-d * d / (2.0 * BAR_WIDTH * BAR_WIDTH)).exp();
            let (by, bx) = (p.0 - blob.0, p.1 - blob.1);
            v = v.max((-(by * by + bx * bx) / (2.0 * BLOB_SIGMA * BLOB_SIGMA)).exp());
            v *= gain;
            if let Some(n) = noise {
                v += n.sample(rng);
            }
            out.push(v.clamp(0.0, 1.0));
        }
    }
    out
}

/// Per-class seeded split: the first `round(n_c · train_fraction)` examples
/// of each shuffled class go to training, the rest to test.
pub fn split_indices(labels: &[usize], train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5911);
    let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for members in by_class.values_mut() {
        members.shuffle(&mut rng);
        let n_train = ((members.len() as f64 * train_fraction).round() as usize).clamp(1, members.len());
        train.extend_from_slice(&members[..n_train]);
        test.extend_from_slice(&members[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Renders `per_class` examples of every class and splits them.
pub fn generate_synthetic<T: Scalar>(spec: &DatasetSpec) -> Result<Split<T>> {
    spec.validate()?;
    if spec.source != DataSource::SyntheticShapes {
        return Err(invalid("generate_synthetic", "dataset source is not synthetic_shapes"));
    }
    let (h, w) = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = if spec.noise_sigma > 0.0 {
        Some(Normal::new(0.0, spec.noise_sigma).map_err(|e| invalid("generate_synthetic", e.to_string()))?)
    } else {
        None
    };
    let templates: Vec<Template> = (0..spec.num_classes).map(|c| template(c, spec.num_classes, h, w)).collect();
    let n = spec.num_classes * spec.per_class;
    let mut data = Vec::with_capacity(n * h * w);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..spec.per_class {
        for (c, t) in templates.iter().enumerate() {
            data.extend(render(t, h, w, &mut rng, noise.as_ref()).into_iter().map(T::of));
            labels.push(c);
        }
    }
    let all = ImageBatch::new(Tensor::new(vec![n, h, w, 1], data)?, labels)?;
    split(&all, spec.train_fraction, spec.seed)
}

pub fn split<T: Scalar>(all: &ImageBatch<T>, train_fraction: f64, seed: u64) -> Result<Split<T>> {
    let (train, test) = split_indices(all.labels(), train_fraction, seed);
    if test.is_empty() {
        return Err(invalid("split", "test split is empty"));
    }
    Ok(Split {
        train: all.select(&train),
        test: all.select(&test),
    })
}

/// Materializes the dataset described by `spec`.
pub fn load_dataset<T: Scalar>(spec: &DatasetSpec) -> Result<Split<T>> {
    match &spec.source {
        DataSource::SyntheticShapes => generate_synthetic(spec),
        DataSource::IdxFiles { images, labels } => {
            spec.validate()?;
            let all = idx::load_idx(images, labels)?;
            if let Some(&l) = all.labels().iter().find(|&&l| l >= spec.num_classes) {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    classes: spec.num_classes,
                });
            }
            split(&all, spec.train_fraction, spec.seed)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> DatasetSpec {
        DatasetSpec::synthetic(4, 10, (16, 16), 9)
    }

    #[test]
    fn same_seed_same_data() {
        let a: Split<f64> = generate_synthetic(&spec()).unwrap();
        let b: Split<f64> = generate_synthetic(&spec()).unwrap();
        assert_eq!(a, b);
        let c: Split<f64> = generate_synthetic(&DatasetSpec { seed: 10, ..spec() }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let (train, test) = split_indices(&labels, 0.7, 3);
        assert_eq!(train.len() + test.len(), 40);
        assert!(train.iter().all(|i| !test.contains(i)));
        assert_eq!(train.len(), 28);
        assert_eq!(split_indices(&labels, 0.7, 3), (train, test));
    }

    #[test]
    fn values_in_unit_range() {
        let s: Split<f64> = generate_synthetic(&DatasetSpec {
            noise_sigma: 0.5,
            ..spec()
        })
        .unwrap();
        assert!(s.train.images().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn too_small_images_rejected() {
        let bad = DatasetSpec {
            image_size: (4, 4),
            num_classes: 10,
            ..spec()
        };
        assert!(generate_synthetic::<f64>(&bad).is_err());
        let bad = DatasetSpec {
            train_fraction: 1.0,
            ..spec()
        };
        assert!(generate_synthetic::<f64>(&bad).is_err());
    }
}
