use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{accuracy, Split};
use crate::error::{invalid, Error, Result};
use crate::losses::{compute_class_centers, total_distill_loss, ClassCenters, FeatureBatch, LossWeights};
use crate::models::{degrade, ImageBatch, Model, ModelSpec};
use crate::pipeline::report::{EpochRecord, StepRecord, TrainReport};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Optimizer and objective settings of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub ce_weight: f64,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.05,
            ce_weight: 1.0,
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.ce_weight >= 0.0 && self.ce_weight.is_finite()) {
            return Err(Error::Config(format!("ce_weight must be >= 0, got {}", self.ce_weight)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    /// Large teacher to smaller assistant, both on full-resolution input.
    CrossStructure,
    /// Full-resolution teacher to a student that sees degraded input.
    CrossResolution,
}

/// One distillation stage.
#[derive(Clone, Debug)]
pub struct StagePlan<'a, T> {
    pub kind: StageKind,
    /// Frozen acting teacher; always fed full-resolution images.
    pub teacher: &'a Model<T>,
    pub student_spec: ModelSpec,
    /// Starting point of the student; built from `student_spec` when `None`.
    pub student_init: Option<Model<T>>,
    pub degrade_factor: usize,
    pub hyper: TrainHyper,
}

pub struct StageOutcome<T> {
    pub model: Model<T>,
    pub report: TrainReport,
    /// Teacher class centers used for the whole stage.
    pub centers: Option<ClassCenters<T>>,
}

/// Shuffled mini-batches of one epoch; the final ragged batch is dropped.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
        .chunks_exact(batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}

pub(crate) fn mix(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ salt.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

enum Objective<T> {
    Supervised,
    Relational {
        teacher_features: FeatureBatch<T>,
        centers: ClassCenters<T>,
        weights: LossWeights,
    },
    SoftTarget {
        teacher_logits: Tensor<T>,
        temperature: T,
    },
}

fn evaluate<T: Scalar>(model: &Model<T>, batch: &ImageBatch<T>) -> Result<f64> {
    let (_, logits) = model.infer(batch)?;
    accuracy(&logits, batch.labels())
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let collected: Option<Vec<f64>> = values.collect();
    collected.filter(|v| !v.is_empty()).map(|v| mean(v.into_iter()))
}

/// Shared SGD loop. `train` and `test` are already in the student's input
/// resolution and index-aligned with any teacher tensors in `objective`.
fn train_loop<T: Scalar>(
    mut student: Model<T>,
    train: &ImageBatch<T>,
    test: &ImageBatch<T>,
    objective: &Objective<T>,
    hyper: &TrainHyper,
) -> Result<(Model<T>, TrainReport)> {
    hyper.validate()?;
    let lr = T::of(hyper.learning_rate);
    let ce_weight = T::of(hyper.ce_weight);
    let mut report = TrainReport {
        initial_test_acc: evaluate(&student, test)?,
        ..Default::default()
    };
    let mut step = 0usize;
    for epoch in 0..hyper.epochs {
        let batches = epoch_batches(train.len(), hyper.batch_size, hyper.seed, epoch);
        let first_step = report.steps.len();
        for idx in &batches {
            let x = train.select(idx);
            let mut g = Graph::new();
            let out = student.forward_batch(&mut g, &x)?;
            let ce = g.softmax_cross_entropy(out.logits, x.labels())?;
            let mut record = StepRecord {
                epoch,
                step,
                ce: g.value(ce).item().as_f64(),
                l1: None,
                l2: None,
                l3: None,
                lc: None,
                kd: None,
                total: 0.0,
            };
            let weighted_ce = g.scale(ce, ce_weight);
            let total = match objective {
                Objective::Supervised => weighted_ce,
                Objective::Relational {
                    teacher_features,
                    centers,
                    weights,
                } => {
                    if !weights.is_distilling() {
                        weighted_ce
                    } else {
                        let f = teacher_features.select(idx);
                        let d = total_distill_loss(&mut g, &f, out.embeddings, centers, weights, mix(hyper.seed, step as u64))?;
                        let b = d.breakdown;
                        record.l1 = b.l1.map(Scalar::as_f64);
                        record.l2 = b.l2.map(Scalar::as_f64);
                        record.l3 = b.l3.map(Scalar::as_f64);
                        record.lc = b.lc.map(Scalar::as_f64);
                        g.add(weighted_ce, d.value)?
                    }
                }
                Objective::SoftTarget {
                    teacher_logits,
                    temperature,
                } => {
                    let t = teacher_logits.select_rows(idx);
                    let kl = g.soft_target_kl(out.logits, &t, *temperature)?;
                    let kd = g.scale(kl, *temperature * *temperature);
                    record.kd = Some(g.value(kd).item().as_f64());
                    g.add(weighted_ce, kd)?
                }
            };
            record.total = g.value(total).item().as_f64();
            if !record.total.is_finite() {
                return Err(invalid("train", format!("loss diverged at epoch {epoch}, step {step}")));
            }
            let parts = recombined_total(&record, hyper);
            if (record.total - parts).abs() > 1e-10 * record.total.abs().max(1.0) {
                return Err(invalid(
                    "train",
                    format!("step {step}: logged total {} differs from its parts {parts}", record.total),
                ));
            }
            g.backward(total)?;
            student.sgd_step(&g, &out, lr)?;
            report.steps.push(record);
            step += 1;
        }
        let steps = &report.steps[first_step..];
        report.epochs.push(EpochRecord {
            epoch,
            ce: mean(steps.iter().map(|s| s.ce)),
            l1: mean_opt(steps.iter().map(|s| s.l1)),
            l2: mean_opt(steps.iter().map(|s| s.l2)),
            l3: mean_opt(steps.iter().map(|s| s.l3)),
            lc: mean_opt(steps.iter().map(|s| s.lc)),
            total: mean(steps.iter().map(|s| s.total)),
            train_acc: evaluate(&student, train)?,
            test_acc: evaluate(&student, test)?,
        });
    }
    Ok((student, report))
}

/// `ce_weight·CE + [o1]·L1 + α·L2 + β·L3 + γ·LC (+ KD)` from a logged step.
pub fn recombined_total(step: &StepRecord, hyper: &TrainHyper) -> f64 {
    let w = &hyper.weights;
    let term = |v: Option<f64>, weight: f64| v.map_or(0.0, |x| weight * x);
    hyper.ce_weight * step.ce
        + term(step.l1, 1.0)
        + term(step.l2, w.alpha)
        + term(step.l3, w.beta)
        + term(step.lc, w.gamma)
        + step.kd.unwrap_or(0.0)
}

fn check_batch_size(hyper: &TrainHyper, n_train: usize) -> Result<()> {
    let need = hyper.weights.min_batch();
    if hyper.weights.is_distilling() && hyper.batch_size < need {
        return Err(Error::InsufficientBatch {
            what: "distillation mini-batch",
            needed: need,
            got: hyper.batch_size,
        });
    }
    if hyper.epochs > 0 && hyper.batch_size > n_train {
        return Err(invalid(
            "train",
            format!("batch size {} exceeds {n_train} training examples", hyper.batch_size),
        ));
    }
    Ok(())
}

fn degraded_split<T: Scalar>(data: &Split<T>, factor: usize) -> Result<(ImageBatch<T>, ImageBatch<T>)> {
    Ok((degrade(&data.train, factor)?, degrade(&data.test, factor)?))
}

fn check_input<T: Scalar>(spec: &ModelSpec, batch: &ImageBatch<T>, role: &str) -> Result<()> {
    if spec.input_dims != batch.dims() {
        return Err(invalid(
            "stage",
            format!(
                "{role} expects input {:?} but receives {:?}",
                spec.input_dims,
                batch.dims()
            ),
        ));
    }
    Ok(())
}

fn check_labels(spec: &ModelSpec, data: &Split<impl Scalar>) -> Result<()> {
    let c = spec.num_classes;
    for &l in data.train.labels().iter().chain(data.test.labels()) {
        if l >= c {
            return Err(Error::LabelOutOfRange { label: l, classes: c });
        }
    }
    Ok(())
}

/// Plain cross-entropy training on (optionally degraded) inputs.
pub fn train_supervised<T: Scalar>(
    spec: ModelSpec,
    degrade_factor: usize,
    data: &Split<T>,
    hyper: &TrainHyper,
) -> Result<(Model<T>, TrainReport)> {
    check_labels(&spec, data)?;
    let (train, test) = degraded_split(data, degrade_factor)?;
    check_input(&spec, &train, "model")?;
    let hyper = TrainHyper {
        weights: LossWeights::none(),
        ..hyper.clone()
    };
    check_batch_size(&hyper, train.len())?;
    train_loop(Model::build(spec)?, &train, &test, &Objective::Supervised, &hyper)
}

fn student_for<T: Scalar>(spec: &ModelSpec, init: &Option<Model<T>>) -> Result<Model<T>> {
    match init {
        Some(m) if m.spec() != spec => Err(invalid("stage", "student_init does not match student_spec")),
        Some(m) => {
            let mut m = m.clone();
            if m.is_frozen() {
                m = Model::from_params(m.spec().clone(), m.params().to_vec(), false)?;
            }
            Ok(m)
        }
        None => Model::build(spec.clone()),
    }
}

/// One distillation stage: teacher features and class centers over the full
/// training set are computed once up front, then the student is trained with
/// `ce_weight·CE + total_distill_loss` by plain SGD.
pub fn run_stage<T: Scalar>(plan: &StagePlan<'_, T>, data: &Split<T>) -> Result<StageOutcome<T>> {
    let hyper = &plan.hyper;
    match plan.kind {
        StageKind::CrossStructure if plan.degrade_factor != 1 => {
            return Err(invalid("stage", "cross-structure stages use degrade_factor 1"));
        }
        StageKind::CrossResolution if plan.degrade_factor < 2 => {
            return Err(invalid("stage", "cross-resolution stages need degrade_factor >= 2"));
        }
        _ => {}
    }
    if !plan.teacher.is_frozen() {
        return Err(invalid("stage", "teacher must be frozen"));
    }
    check_labels(&plan.student_spec, data)?;
    check_input(plan.teacher.spec(), &data.train, "teacher")?;
    let (train, test) = degraded_split(data, plan.degrade_factor)?;
    check_input(&plan.student_spec, &train, "student")?;
    check_batch_size(hyper, train.len())?;
    if hyper.weights.is_distilling() && plan.teacher.spec().embedding_dim != plan.student_spec.embedding_dim {
        return Err(invalid(
            "stage",
            format!(
                "teacher embedding dim {} differs from student {}",
                plan.teacher.spec().embedding_dim,
                plan.student_spec.embedding_dim
            ),
        ));
    }

    let (features, _) = plan.teacher.infer(&data.train)?;
    let teacher_features = FeatureBatch::new(features, data.train.labels().to_vec())?;
    let centers = compute_class_centers(&teacher_features, plan.student_spec.num_classes)?;
    let objective = Objective::Relational {
        teacher_features,
        centers,
        weights: hyper.weights,
    };
    let student = student_for(&plan.student_spec, &plan.student_init)?;
    let (model, report) = train_loop(student, &train, &test, &objective, hyper)?;
    let Objective::Relational { centers, .. } = objective else {
        unreachable!()
    };
    Ok(StageOutcome {
        model,
        report,
        centers: Some(centers),
    })
}

/// Soft-target distillation: `ce_weight·CE + T²·KL(teacher/T || student/T)`.
/// The teacher sees full-resolution images, the student degraded ones.
pub fn kd_soft_baseline<T: Scalar>(
    teacher: &Model<T>,
    student_spec: ModelSpec,
    temperature: f64,
    degrade_factor: usize,
    data: &Split<T>,
    hyper: &TrainHyper,
) -> Result<(Model<T>, TrainReport)> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(invalid("kd", format!("temperature must be positive, got {temperature}")));
    }
    check_labels(&student_spec, data)?;
    check_input(teacher.spec(), &data.train, "teacher")?;
    let (train, test) = degraded_split(data, degrade_factor)?;
    check_input(&student_spec, &train, "student")?;
    let hyper = TrainHyper {
        weights: LossWeights::none(),
        ..hyper.clone()
    };
    check_batch_size(&hyper, train.len())?;
    let (_, teacher_logits) = teacher.infer(&data.train)?;
    let objective = Objective::SoftTarget {
        teacher_logits,
        temperature: T::of(temperature),
    };
    train_loop(Model::build(student_spec)?, &train, &test, &objective, &hyper)
}

pub struct TwoStageOutcome<T> {
    pub assistant: Model<T>,
    pub student: Model<T>,
    pub assistant_report: TrainReport,
    pub student_report: TrainReport,
}

/// Teacher → assistant on full-resolution input, then the frozen assistant
/// → student on degraded input. Centers are recomputed from the assistant
/// for the second stage.
pub fn run_two_stage<T: Scalar>(
    teacher: &Model<T>,
    assistant_spec: ModelSpec,
    student_spec: ModelSpec,
    degrade_factor: usize,
    data: &Split<T>,
    stage1: &TrainHyper,
    stage2: &TrainHyper,
) -> Result<TwoStageOutcome<T>> {
    let first = run_stage(
        &StagePlan {
            kind: StageKind::CrossStructure,
            teacher,
            student_spec: assistant_spec,
            student_init: None,
            degrade_factor: 1,
            hyper: stage1.clone(),
        },
        data,
    )?;
    let assistant = first.model.frozen();
    let kind = if degrade_factor == 1 {
        StageKind::CrossStructure
    } else {
        StageKind::CrossResolution
    };
    let second = run_stage(
        &StagePlan {
            kind,
            teacher: &assistant,
            student_spec,
            student_init: None,
            degrade_factor,
            hyper: stage2.clone(),
        },
        data,
    )?;
    Ok(TwoStageOutcome {
        assistant,
        student: second.model,
        assistant_report: first.report,
        student_report: second.report,
    })
}

/// Embeddings of a batch as a [`FeatureBatch`].
pub fn embed<T: Scalar>(model: &Model<T>, batch: &ImageBatch<T>) -> Result<FeatureBatch<T>> {
    let (features, _) = model.infer(batch)?;
    FeatureBatch::new(features, batch.labels().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_drop_ragged_tail() {
        let b = epoch_batches(10, 3, 1, 0);
        assert_eq!(b.len(), 3);
        assert!(b.iter().all(|x| x.len() == 3));
        let mut seen: Vec<usize> = b.concat();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert_eq!(b, epoch_batches(10, 3, 1, 0));
        assert_ne!(b, epoch_batches(10, 3, 1, 1));
    }
}
