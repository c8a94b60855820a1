//! Training stages: generator pretraining, supervised teacher and student
//! baselines, plain distillation, and the selector-driven augmented
//! distillation loop.
//!
//! Every stage draws randomness from its own ChaCha stream derived from the
//! run seed, so stages can be rerun or skipped without perturbing the others.

mod distill_loop;
mod supervised;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use distill_loop::{
    generator_l2a_update, generator_log_likelihood, kd_step, normalized_weights, plain_kd,
    run_distill, weighted_mle_loss, DistillMode, DistillOutcome, GeneratorUpdateReport, StepRecord,
    TeacherCache,
};
pub use supervised::{
    mlm_loss, pretrain_generator, train_student_ft, train_supervised, train_teacher,
    GeneratorReport, SupervisedReport,
};

use crate::augment::{EncodedSet, SamplerConfig};
use crate::distill::{attach_projection, KDConfig};
use crate::eval::{accuracy, f1, pearson, spearman, MetricReport, MetricValue};
use crate::model::{Architecture, Encoder, HeadKind, ModelConfig};
use crate::numerics::AdamConfig;
use crate::selector::SelectorConfig;
use crate::text::{subsample_target, Dataset, TaskKind, Vocabulary};
use crate::{Error, Result};

/// Optimizer schedule of one stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_stage_optimizer")]
    pub optimizer: AdamConfig,
    /// Steps of linear learning-rate warmup.
    #[serde(default)]
    pub warmup_steps: usize,
}

fn default_stage_optimizer() -> AdamConfig {
    AdamConfig::with_lr(1e-3)
}

impl StageConfig {
    pub const fn new(epochs: usize, batch_size: usize, lr: f64) -> Self {
        StageConfig {
            epochs,
            batch_size,
            optimizer: AdamConfig {
                lr,
                beta1: 0.9,
                beta2: 0.998,
                eps: 1e-8,
            },
            warmup_steps: 0,
        }
    }

    pub const fn with_warmup(mut self, steps: usize) -> Self {
        self.warmup_steps = steps;
        self
    }

    /// Learning-rate multiplier for the 1-based `step`.
    pub fn lr_scale(&self, step: usize) -> f64 {
        if step >= self.warmup_steps {
            1.0
        } else {
            step as f64 / self.warmup_steps as f64
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config(format!(
                "{name}.batch_size must be at least 1"
            )));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config(format!(
                "{name}.optimizer.lr must be positive"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_len: usize,
    pub min_freq: usize,
    /// Labelled target examples kept per class (twice this many for
    /// regression).
    pub n_per_class: usize,
    pub teacher: Architecture,
    pub student: Architecture,
    pub generator: Architecture,
    pub teacher_train: StageConfig,
    /// Student-FT baseline.
    pub student_train: StageConfig,
    pub generator_train: StageConfig,
    pub mask_rate: f64,
    /// Plain and augmented distillation.
    pub distill: StageConfig,
    /// Optimizer of the reward-weighted generator update.
    pub generator_update: AdamConfig,
    pub kd: KDConfig,
    pub sampler: SamplerConfig,
    pub selector: SelectorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_len: 10,
            min_freq: 1,
            n_per_class: 40,
            teacher: Architecture::TEACHER,
            student: Architecture::STUDENT,
            generator: Architecture::GENERATOR,
            teacher_train: StageConfig::new(4, 16, 1e-3).with_warmup(40),
            student_train: StageConfig::new(30, 8, 1e-3),
            generator_train: StageConfig::new(8, 16, 1e-3),
            mask_rate: 0.15,
            distill: StageConfig::new(4, 16, 1e-3),
            generator_update: AdamConfig::with_lr(1e-4),
            kd: KDConfig::default(),
            sampler: SamplerConfig::default(),
            selector: SelectorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_len < 3 {
            return Err(Error::Config("max_len must be at least 3".into()));
        }
        if self.min_freq == 0 {
            return Err(Error::Config("min_freq must be at least 1".into()));
        }
        if self.n_per_class == 0 {
            return Err(Error::Config("n_per_class must be at least 1".into()));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate <= 1.0) {
            return Err(Error::Config("mask_rate must be in (0, 1]".into()));
        }
        self.teacher_train.validate("teacher_train")?;
        self.student_train.validate("student_train")?;
        self.generator_train.validate("generator_train")?;
        self.distill.validate("distill")?;
        self.kd.validate()?;
        self.sampler.validate()?;
        self.selector.validate()?;
        if self.kd.att && self.student.heads != self.teacher.heads {
            return Err(Error::Config(format!(
                "attention distillation pairs heads one to one: student has {} heads, teacher {}",
                self.student.heads, self.teacher.heads
            )));
        }
        for (name, a) in [
            ("teacher", self.teacher),
            ("student", self.student),
            ("generator", self.generator),
        ] {
            a.with(8, self.max_len, HeadKind::Mlm)
                .validate()
                .map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        Ok(())
    }
}

/// Independent random stream `stream` of run seed `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A derived `u64` seed, for initializers that take one.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    rng_stream(seed, stream).next_u64()
}

/// Stream ids. Plain and augmented distillation share `SHUFFLE_KD` so
/// their batch orders coincide on identical data.
pub mod streams {
    pub const GENERATOR_INIT: u64 = 10;
    pub const GENERATOR_MASK: u64 = 11;
    pub const TEACHER_INIT: u64 = 20;
    pub const TEACHER_SHUFFLE: u64 = 21;
    pub const STUDENT_INIT: u64 = 30;
    pub const STUDENT_FT_SHUFFLE: u64 = 31;
    pub const PROJECTION_INIT: u64 = 32;
    pub const SHUFFLE_KD: u64 = 40;
    pub const AUGMENT: u64 = 41;
    pub const ACTIONS: u64 = 42;
    pub const POLICY_INIT: u64 = 43;
    pub const SUBSAMPLE: u64 = 50;
}

/// Raw splits before encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct RawData {
    pub source: Dataset,
    /// Full target pool; students only ever see its subsample.
    pub target_pool: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

/// Encoded splits over one shared vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub vocab: Vocabulary,
    pub task: TaskKind,
    /// Classes, or 1 for regression.
    pub outputs: usize,
    pub source: EncodedSet,
    pub target_pool: EncodedSet,
    pub target_train: EncodedSet,
    pub validation: EncodedSet,
    pub test: EncodedSet,
}

/// Seeded data-scarce draw: `n_per_class` per class, or `2·n_per_class`
/// uniformly for regression.
pub fn subsample(pool: &Dataset, n_per_class: usize, seed: u64) -> Result<Dataset> {
    match pool.task() {
        TaskKind::Classification => subsample_target(pool, n_per_class, seed),
        TaskKind::Regression => {
            let n = 2 * n_per_class;
            if pool.len() < n {
                return Err(Error::Dataset(format!(
                    "target pool has {} examples, {n} requested",
                    pool.len()
                )));
            }
            let mut idx: Vec<usize> = (0..pool.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            idx.truncate(n);
            idx.sort_unstable();
            Dataset::new(
                idx.into_iter()
                    .map(|i| pool.examples()[i].clone())
                    .collect(),
                pool.split(),
            )
        }
    }
}

impl TaskData {
    /// Builds the vocabulary over source and target-pool text, subsamples
    /// the target pool and encodes every split.
    pub fn prepare(raw: &RawData, config: &TrainConfig, seed: u64) -> Result<Self> {
        let task = raw.source.task();
        for (name, ds) in [
            ("target", &raw.target_pool),
            ("validation", &raw.validation),
            ("test", &raw.test),
        ] {
            if ds.task() != task {
                return Err(Error::Dataset(format!(
                    "{name} split is {:?} but the source split is {task:?}",
                    ds.task()
                )));
            }
        }
        let vocab = Vocabulary::build(
            raw.source.texts().chain(raw.target_pool.texts()),
            config.min_freq,
        )?;
        let outputs = match task {
            TaskKind::Classification => raw
                .source
                .num_classes()
                .max(raw.target_pool.num_classes())
                .max(raw.validation.num_classes())
                .max(raw.test.num_classes()),
            TaskKind::Regression => 1,
        };
        let train = subsample(
            &raw.target_pool,
            config.n_per_class,
            sub_seed(seed, streams::SUBSAMPLE),
        )?;
        let enc = |ds: &Dataset| EncodedSet::new(ds, &vocab, config.max_len);
        Ok(TaskData {
            task,
            outputs,
            source: enc(&raw.source)?,
            target_pool: enc(&raw.target_pool)?,
            target_train: enc(&train)?,
            validation: enc(&raw.validation)?,
            test: enc(&raw.test)?,
            vocab,
        })
    }

    pub fn head(&self) -> HeadKind {
        match self.task {
            TaskKind::Classification => HeadKind::Classifier {
                classes: self.outputs,
            },
            TaskKind::Regression => HeadKind::Regressor,
        }
    }

    pub fn model_config(&self, arch: Architecture, max_len: usize, head: HeadKind) -> ModelConfig {
        arch.with(self.vocab.len(), max_len, head)
    }
}

/// Fresh student, with the hidden projection attached when the hidden loss
/// is enabled. Every student method starts from this same initialization.
pub fn init_student(data: &TaskData, config: &TrainConfig, seed: u64) -> Result<Encoder> {
    let mc = data.model_config(config.student, config.max_len, data.head());
    let mut student = Encoder::init(mc, sub_seed(seed, streams::STUDENT_INIT))?;
    if config.kd.hidden {
        attach_projection(
            student.params_mut(),
            config.student.hidden,
            config.teacher.hidden,
            sub_seed(seed, streams::PROJECTION_INIT),
        )?;
    }
    Ok(student)
}

/// Output logits for every item.
pub fn predict(model: &Encoder, set: &EncodedSet) -> Result<Vec<Vec<f64>>> {
    set.items.iter().map(|x| model.logits(x)).collect()
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(0, |b, (i, &x)| if x > v[b] { i } else { b })
}

fn class_labels(set: &EncodedSet) -> Result<Vec<usize>> {
    set.labels
        .iter()
        .map(|l| {
            l.class()
                .ok_or_else(|| Error::Dataset("regression label in a classification set".into()))
        })
        .collect()
}

/// Accuracy for classification, Pearson correlation for regression.
pub fn validation_metric(model: &Encoder, set: &EncodedSet, task: TaskKind) -> Result<MetricValue> {
    let logits = predict(model, set)?;
    match task {
        TaskKind::Classification => {
            let preds: Vec<usize> = logits.iter().map(|l| argmax(l)).collect();
            Ok(MetricValue {
                value: accuracy(&preds, &class_labels(set)?)?,
                undefined: false,
            })
        }
        TaskKind::Regression => {
            let preds: Vec<f64> = logits.iter().map(|l| l[0]).collect();
            let labels: Vec<f64> = set.labels.iter().map(|l| l.real()).collect();
            pearson(&preds, &labels)
        }
    }
}

/// Primary and secondary metrics: accuracy and F1, or Pearson and Spearman.
pub fn metric_reports(
    model: &Encoder,
    set: &EncodedSet,
    task: TaskKind,
    split: &str,
    classes: usize,
) -> Result<Vec<MetricReport>> {
    let logits = predict(model, set)?;
    let rep = |metric: &str, value: f64| MetricReport {
        metric: metric.to_string(),
        value,
        split: split.to_string(),
        n: set.len(),
    };
    Ok(match task {
        TaskKind::Classification => {
            let preds: Vec<usize> = logits.iter().map(|l| argmax(l)).collect();
            let labels = class_labels(set)?;
            vec![
                rep("accuracy", accuracy(&preds, &labels)?),
                rep("f1", f1(&preds, &labels, classes, 1)?.value),
            ]
        }
        TaskKind::Regression => {
            let preds: Vec<f64> = logits.iter().map(|l| l[0]).collect();
            let labels: Vec<f64> = set.labels.iter().map(|l| l.real()).collect();
            vec![
                rep("pearson", pearson(&preds, &labels)?.value),
                rep("spearman", spearman(&preds, &labels)?.value),
            ]
        }
    })
}

pub(crate) fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_ramps_linearly_then_holds() {
        let stage = StageConfig::new(1, 1, 1e-3).with_warmup(4);
        let scales: Vec<f64> = (1..=6).map(|s| stage.lr_scale(s)).collect();
        assert_eq!(scales, vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
        assert_eq!(StageConfig::new(1, 1, 1e-3).lr_scale(1), 1.0);
    }
    use crate::text::{synth_generate, SynthSpec};

    pub(crate) fn tiny_raw() -> RawData {
        let spec = SynthSpec {
            source_size: 60,
            target_size: 40,
            validation_size: 20,
            test_size: 20,
            ..SynthSpec::default()
        };
        let c = synth_generate(&spec, 1).unwrap();
        RawData {
            source: c.source,
            target_pool: c.target,
            validation: c.target_validation,
            test: c.target_test,
        }
    }

    #[test]
    fn prepare_subsamples_and_shares_vocabulary() {
        let cfg = TrainConfig {
            n_per_class: 5,
            ..TrainConfig::default()
        };
        let d = TaskData::prepare(&tiny_raw(), &cfg, 0).unwrap();
        assert_eq!(d.target_train.len(), 10);
        assert_eq!(d.outputs, 2);
        assert_eq!(d.source.vocab_size, d.test.vocab_size);
        assert_eq!(d, TaskData::prepare(&tiny_raw(), &cfg, 0).unwrap());
    }

    #[test]
    fn config_checks_head_pairing() {
        let mut cfg = TrainConfig::default();
        cfg.validate().unwrap();
        cfg.student.heads = 2;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.kd.att = false;
        cfg.validate().unwrap();
    }
}
