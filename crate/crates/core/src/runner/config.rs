use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DataSource, DatasetSpec};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::models::ModelSpec;
use crate::pipeline::TrainHyper;

/// Architecture of one network; input size and class count come from the
/// dataset and the seed from the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_layers: Vec<usize>,
    pub embedding_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "one")]
    pub ce_weight: f64,
}

fn one() -> f64 {
    1.0
}

impl StageConfig {
    pub fn hyper(&self, weights: LossWeights, seed: u64) -> TrainHyper {
        TrainHyper {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            ce_weight: self.ce_weight,
            weights,
            seed,
        }
    }
}

/// Which distillation terms a grid row keeps. The row uses the experiment
/// weights for every kept term and zero for the rest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSubset {
    pub name: String,
    #[serde(default)]
    pub l1: bool,
    #[serde(default)]
    pub l2: bool,
    #[serde(default)]
    pub l3: bool,
    #[serde(default)]
    pub lc: bool,
}

impl AblationSubset {
    fn new(name: &str, l1: bool, l2: bool, l3: bool, lc: bool) -> Self {
        Self {
            name: name.into(),
            l1,
            l2,
            l3,
            lc,
        }
    }

    pub fn weights(&self, base: &LossWeights) -> LossWeights {
        let keep = |on: bool, w: f64| if on { w } else { 0.0 };
        LossWeights {
            alpha: keep(self.l2, base.alpha),
            beta: keep(self.l3, base.beta),
            gamma: keep(self.lc, base.gamma),
            include_order1: self.l1,
            ..*base
        }
    }
}

pub fn default_ablation() -> Vec<AblationSubset> {
    vec![
        AblationSubset::new("L1", true, false, false, false),
        AblationSubset::new("L2", false, true, false, false),
        AblationSubset::new("L3", false, false, true, false),
        AblationSubset::new("LC", false, false, false, true),
        AblationSubset::new("L2+L3", false, true, true, false),
        AblationSubset::new("L2+L3+LC", false, true, true, true),
        AblationSubset::new("L1+L2+L3+LC", true, true, true, true),
    ]
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_factor() -> usize {
    2
}

fn default_temperature() -> f64 {
    4.0
}

fn default_pairs() -> usize {
    300
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run `s` generates its data with seed `dataset.seed + s`.
    pub dataset: DatasetSpec,
    pub teacher: ModelConfig,
    pub assistant: ModelConfig,
    pub student: ModelConfig,
    #[serde(default = "default_factor")]
    pub degrade_factor: usize,
    pub teacher_training: StageConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    /// Used by the direct single-stage and KD baselines; defaults to `stage2`.
    #[serde(default)]
    pub direct: Option<StageConfig>,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default = "default_temperature")]
    pub kd_temperature: f64,
    #[serde(default = "default_ablation")]
    pub ablation: Vec<AblationSubset>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Positive (and negative) verification pairs drawn from the test split.
    #[serde(default = "default_pairs")]
    pub verification_pairs: usize,
    pub output_dir: PathBuf,
}

fn cfg(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| cfg(format!("invalid config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| cfg(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn direct_stage(&self) -> &StageConfig {
        self.direct.as_ref().unwrap_or(&self.stage2)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.weights.validate()?;
        let (h, w) = self.dataset.image_size;
        if self.degrade_factor < 2 {
            return Err(cfg("degrade_factor must be at least 2"));
        }
        if self.dataset.source == DataSource::SyntheticShapes
            && (h % self.degrade_factor != 0 || w % self.degrade_factor != 0)
        {
            return Err(cfg(format!(
                "degrade_factor {} does not divide dataset.image_size {h}x{w}",
                self.degrade_factor
            )));
        }
        for (name, m) in [("teacher", &self.teacher), ("assistant", &self.assistant), ("student", &self.student)] {
            if m.hidden_layers.is_empty() || m.hidden_layers.contains(&0) || m.embedding_dim == 0 {
                return Err(cfg(format!("{name}: hidden_layers and embedding_dim must be non-empty and positive")));
            }
        }
        if self.assistant.embedding_dim != self.teacher.embedding_dim
            || self.student.embedding_dim != self.assistant.embedding_dim
        {
            return Err(cfg("teacher, assistant and student must share embedding_dim"));
        }
        if self.assistant != self.student {
            return Err(cfg("assistant must have the same structure as student"));
        }
        let mut stages = vec![
            ("teacher_training", &self.teacher_training),
            ("stage1", &self.stage1),
            ("stage2", &self.stage2),
        ];
        if let Some(d) = &self.direct {
            stages.push(("direct", d));
        }
        let need = self.weights.min_batch().max(3);
        for (name, s) in stages {
            if s.batch_size < need {
                return Err(cfg(format!("{name}.batch_size must be at least {need}, got {}", s.batch_size)));
            }
            s.hyper(LossWeights::none(), 0)
                .validate()
                .map_err(|e| cfg(format!("{name}: {e}")))?;
        }
        if !(self.kd_temperature > 0.0 && self.kd_temperature.is_finite()) {
            return Err(cfg("kd_temperature must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(cfg("seeds must not be empty"));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(cfg("seeds must be distinct"));
        }
        let mut names: Vec<&str> = self.ablation.iter().map(|a| a.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.ablation.len() {
            return Err(cfg("ablation names must be distinct"));
        }
        for a in &self.ablation {
            if a.name.is_empty() || a.name.contains(['/', '\\']) || a.name.starts_with('.') {
                return Err(cfg(format!("ablation name {:?} is not a valid directory name", a.name)));
            }
            if !a.weights(&self.weights).is_distilling() {
                return Err(cfg(format!("ablation {:?} enables no term", a.name)));
            }
        }
        if self.verification_pairs == 0 {
            return Err(cfg("verification_pairs must be positive"));
        }
        Ok(())
    }

    pub fn dataset_for(&self, seed: u64) -> DatasetSpec {
        DatasetSpec {
            seed: self.dataset.seed.wrapping_add(seed),
            ..self.dataset.clone()
        }
    }

    /// Specs of teacher, assistant and student for one run. `hr` is the
    /// full-resolution input shape.
    pub fn specs(&self, hr: (usize, usize, usize), seed: u64) -> (ModelSpec, ModelSpec, ModelSpec) {
        let make = |m: &ModelConfig, dims, salt: u64| ModelSpec {
            input_dims: dims,
            hidden_layers: m.hidden_layers.clone(),
            embedding_dim: m.embedding_dim,
            num_classes: self.dataset.num_classes,
            seed: seed.wrapping_mul(1000).wrapping_add(salt),
        };
        let f = self.degrade_factor;
        let lr = (hr.0 / f, hr.1 / f, hr.2);
        (
            make(&self.teacher, hr, 1),
            make(&self.assistant, hr, 2),
            make(&self.student, lr, 3),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample_json() -> String {
        r#"{
            "dataset": {"source": "synthetic_shapes", "num_classes": 4, "per_class": 10,
                        "image_size": [8, 8], "noise_sigma": 0.1, "seed": 1, "train_fraction": 0.7},
            "teacher": {"hidden_layers": [16], "embedding_dim": 4},
            "assistant": {"hidden_layers": [8], "embedding_dim": 4},
            "student": {"hidden_layers": [8], "embedding_dim": 4},
            "teacher_training": {"epochs": 1, "batch_size": 8, "learning_rate": 0.05},
            "stage1": {"epochs": 1, "batch_size": 8, "learning_rate": 0.05},
            "stage2": {"epochs": 1, "batch_size": 8, "learning_rate": 0.05},
            "seeds": [0],
            "output_dir": "out"
        }"#
        .to_string()
    }

    #[test]
    fn defaults_fill_in() {
        let c = ExperimentConfig::from_json(&sample_json()).unwrap();
        assert_eq!(c.ablation.len(), 7);
        assert_eq!(c.weights, LossWeights::default());
        assert_eq!(c.degrade_factor, 2);
        assert_eq!(c.stage1.ce_weight, 1.0);
    }

    #[test]
    fn unknown_key_is_a_config_error() {
        let text = sample_json().replace("\"seeds\"", "\"sedes\"");
        let err = ExperimentConfig::from_json(&text).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("sedes"), "{err}");
    }

    #[test]
    fn invalid_field_is_named() {
        let text = sample_json().replace("\"train_fraction\": 0.7", "\"train_fraction\": 1.5");
        let err = ExperimentConfig::from_json(&text).unwrap_err().to_string();
        assert!(err.contains("train_fraction"), "{err}");
        let text = sample_json().replace("\"hidden_layers\": [8], \"embedding_dim\": 4},\n            \"student\"", "x");
        assert!(ExperimentConfig::from_json(&text).is_err());
    }

    #[test]
    fn subsets_zero_disabled_terms() {
        let w = default_ablation()[5].weights(&LossWeights::default());
        assert_eq!((w.alpha, w.beta, w.gamma, w.include_order1), (0.02, 0.01, 1.0, false));
        let w = default_ablation()[0].weights(&LossWeights::default());
        assert_eq!((w.alpha, w.beta, w.gamma, w.include_order1), (0.0, 0.0, 0.0, true));
    }
}
