//! Experiment harness behind the command-line tool.
//!
//! Every command writes to `output_dir/<command>/<hash>/<seed>/`, where the
//! hash covers only the config fields that command (and the stages it
//! consumes) depends on. A student sweep therefore reuses one teacher, and
//! changing the selector learning rate never retrains the generator.
//! Each artifact directory ends with a `meta.json` written last, which marks
//! it complete.

mod config;
mod report;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

pub use config::{config_hash, DataConfig, JsonlData, RunConfig, SweepConfig, SynthData};
pub use report::{
    mean_stdev, primary_metric, report_aggregate, AggregateRow, AggregateTable, MethodMetrics,
    ParamCounts, Report,
};

use crate::augment::write_augmented_jsonl;
use crate::eval::MetricReport;
use crate::model::{Checkpoint, Encoder, HeadKind};
use crate::text::{load_jsonl, synth_generate, Split};
use crate::trainer::{
    metric_reports, plain_kd, pretrain_generator, run_distill, train_student_ft, train_teacher,
    DistillMode, DistillOutcome, RawData, StepRecord, SupervisedReport, TaskData, TrainConfig,
};
use crate::{Error, Result};

/// Command names, which double as artifact directory names.
pub mod commands {
    pub const SYNTH_DATA: &str = "synth-data";
    pub const PRETRAIN_GENERATOR: &str = "pretrain-generator";
    pub const TRAIN_TEACHER: &str = "train-teacher";
    pub const TRAIN_STUDENT: &str = "train-student";
    pub const DISTILL: &str = "distill";
    pub const DISTILL_L2A: &str = "distill-l2a";
    pub const EVALUATE: &str = "evaluate";
    pub const RUN: &str = "run";
    pub const SWEEP: &str = "sweep";
}
use commands as cmd;

/// Ablation flags of `distill-l2a`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub wo_src: bool,
    pub wo_tgt: bool,
    pub wo_att: bool,
    pub wo_hidden: bool,
    pub wo_dark: bool,
}

impl Ablation {
    pub const NONE: Ablation = Ablation {
        wo_src: false,
        wo_tgt: false,
        wo_att: false,
        wo_hidden: false,
        wo_dark: false,
    };

    fn flags(&self) -> Vec<&'static str> {
        [
            (self.wo_src, "wo-src"),
            (self.wo_tgt, "wo-tgt"),
            (self.wo_att, "wo-att"),
            (self.wo_hidden, "wo-hidden"),
            (self.wo_dark, "wo-dark"),
        ]
        .into_iter()
        .filter_map(|(on, f)| on.then_some(f))
        .collect()
    }

    /// `l2a`, or `l2a-wo-src`, `l2a-wo-att-wo-dark`, and so on.
    pub fn label(&self) -> String {
        let mut s = String::from("l2a");
        for f in self.flags() {
            s.push('-');
            s.push_str(f);
        }
        s
    }

    /// The command line that produces this variant.
    pub fn command(&self) -> String {
        let mut s = String::from(cmd::DISTILL_L2A);
        for f in self.flags() {
            let _ = write!(s, " --{f}");
        }
        s
    }

    /// The config of the ablated run. Flags act on the config before
    /// hashing, so `--wo-dark` and `"dark": false` share a run directory.
    pub fn apply(&self, base: &TrainConfig) -> Result<TrainConfig> {
        let mut c = base.clone();
        if self.wo_src {
            c.sampler.n_source = 0;
        }
        if self.wo_tgt {
            c.sampler.n_target = 0;
        }
        if self.wo_att {
            c.kd.att = false;
        }
        if self.wo_hidden {
            c.kd.hidden = false;
        }
        if self.wo_dark {
            c.kd.dark = false;
        }
        if c.sampler.n_source == 0 && c.sampler.n_target == 0 {
            return Err(Error::Config(format!(
                "{} leaves no augmented samples",
                self.command()
            )));
        }
        c.validate()?;
        Ok(c)
    }
}

/// A command together with the options that change its hash.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    SynthData,
    PretrainGenerator,
    TrainTeacher,
    TrainStudent,
    Distill { augment: bool },
    DistillL2a(Ablation),
    Evaluate(Ablation),
    Run(Ablation),
}

/// Contents of `meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    /// The hashed config fields.
    pub scope: serde_json::Value,
    pub summary: serde_json::Value,
}

/// A stage's hash together with the JSON it was computed from.
#[derive(Clone, Debug)]
struct Scope {
    command: &'static str,
    value: serde_json::Value,
    hash: String,
}

impl Scope {
    fn new(command: &'static str, value: serde_json::Value) -> Result<Scope> {
        let value = json!({ "command": command, "config": value });
        let hash = config_hash(&value)?;
        Ok(Scope {
            command,
            value,
            hash,
        })
    }
}

/// Sweep dimensions of the `sweep` command.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepKind {
    /// One report row per `sweep.n_per_class` entry.
    NPerClass,
    /// The `sweep.alpha` × `sweep.temperature` grid of sampler settings.
    AlphaTemperature,
}

impl SweepKind {
    fn name(self) -> &'static str {
        match self {
            SweepKind::NPerClass => "n-per-class",
            SweepKind::AlphaTemperature => "alpha-temperature",
        }
    }
}

/// One sweep point: its coordinates and the merged report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub params: Vec<(String, f64)>,
    pub report: Report,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub kind: String,
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    /// `<params>,method,metric,mean,stdev,n` with one row per point, method
    /// and metric.
    pub fn csv(&self) -> String {
        let mut out = String::new();
        if let Some(p) = self.points.first() {
            for (k, _) in &p.params {
                let _ = write!(out, "{k},");
            }
        }
        out.push_str("method,metric,mean,stdev,n\n");
        for p in &self.points {
            let prefix: String = p.params.iter().map(|(_, v)| format!("{v},")).collect();
            for (method, metrics) in p.report.methods() {
                for (metric, values) in metrics {
                    let (m, s) = mean_stdev(values);
                    let _ = writeln!(out, "{prefix}{method},{metric},{m},{s},{}", values.len());
                }
            }
        }
        out
    }

    /// Columns: sweep coordinates, then mean and stdev of the primary metric
    /// per method.
    pub fn plot_data(&self) -> String {
        let mut out = String::from("#");
        let Some(first) = self.points.first() else {
            return out + "\n";
        };
        for (k, _) in &first.params {
            let _ = write!(out, " {k}");
        }
        for (method, _) in first.report.methods() {
            let _ = write!(out, " {method}_mean {method}_stdev");
        }
        out.push('\n');
        for p in &self.points {
            let cols: Vec<String> = p.params.iter().map(|(_, v)| v.to_string()).collect();
            out.push_str(&cols.join(" "));
            for (method, _) in p.report.methods() {
                let (m, s) = mean_stdev(p.report.primary(method).unwrap_or(&[]));
                let _ = write!(out, " {m} {s}");
            }
            out.push('\n');
        }
        out
    }
}

/// Runs pipeline commands for one config.
#[derive(Clone, Debug)]
pub struct Harness {
    config: RunConfig,
}

fn write_meta(dir: &Path, meta: &ArtifactMeta) -> Result<()> {
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(meta)? + "\n")?;
    Ok(())
}

fn supervised_csv(r: &SupervisedReport) -> String {
    let mut out = String::from("epoch,loss,val_metric\n");
    for (i, (l, v)) in r.epoch_losses.iter().zip(&r.epoch_validation).enumerate() {
        let _ = writeln!(out, "{},{l},{v}", i + 1);
    }
    out
}

fn require(path: PathBuf, producer: impl Into<String>) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact {
            path,
            producer: producer.into(),
        })
    }
}

fn metrics_by_name(reports: &[MetricReport]) -> MethodMetrics {
    reports.iter().map(|r| (r.metric.clone(), vec![r.value])).collect()
}

impl Harness {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        Ok(Harness { config })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    /// `output_dir/<command>/<hash>/<seed>`.
    pub fn artifact_dir(&self, command: &str, hash: &str, seed: u64) -> PathBuf {
        self.config.output_dir.join(command).join(hash).join(seed.to_string())
    }

    fn dir(&self, scope: &Scope, seed: u64) -> PathBuf {
        self.artifact_dir(scope.command, &scope.hash, seed)
    }

    fn complete(&self, scope: &Scope, seed: u64) -> bool {
        self.dir(scope, seed).join("meta.json").is_file()
    }

    fn start(&self, scope: &Scope, seed: u64) -> Result<PathBuf> {
        let dir = self.dir(scope, seed);
        let _ = fs::remove_file(dir.join("meta.json"));
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn finish(&self, scope: &Scope, seed: u64, summary: serde_json::Value) -> Result<PathBuf> {
        let dir = self.dir(scope, seed);
        write_meta(
            &dir,
            &ArtifactMeta {
                command: scope.command.into(),
                config_hash: scope.hash.clone(),
                seed,
                scope: scope.value.clone(),
                summary,
            },
        )?;
        Ok(dir)
    }

    fn tags(scope: &Scope, seed: u64) -> serde_json::Value {
        json!({ "command": scope.command, "config_hash": scope.hash, "seed": seed })
    }

    // Hash scopes. Each lists exactly the fields its stage reads.

    fn prep_scope(&self, t: &TrainConfig) -> Result<serde_json::Value> {
        Ok(json!({
            "data": self.config.data_identity()?,
            "max_len": t.max_len,
            "min_freq": t.min_freq,
        }))
    }

    fn synth_scope(&self) -> Result<Scope> {
        Scope::new(cmd::SYNTH_DATA, self.config.data_identity()?)
    }

    fn generator_scope(&self, t: &TrainConfig) -> Result<Scope> {
        Scope::new(
            cmd::PRETRAIN_GENERATOR,
            json!({
                "prep": self.prep_scope(t)?,
                "generator": t.generator,
                "generator_train": t.generator_train,
                "mask_rate": t.mask_rate,
            }),
        )
    }

    fn teacher_scope(&self, t: &TrainConfig) -> Result<Scope> {
        Scope::new(
            cmd::TRAIN_TEACHER,
            json!({
                "prep": self.prep_scope(t)?,
                "teacher": t.teacher,
                "teacher_train": t.teacher_train,
            }),
        )
    }

    fn student_scope(&self, t: &TrainConfig) -> Result<Scope> {
        Scope::new(
            cmd::TRAIN_STUDENT,
            json!({
                "prep": self.prep_scope(t)?,
                "n_per_class": t.n_per_class,
                "student": t.student,
                "student_train": t.student_train,
            }),
        )
    }

    fn distill_scope(&self, t: &TrainConfig, augment: bool) -> Result<Scope> {
        let mut v = json!({
            "teacher": self.teacher_scope(t)?.hash,
            "n_per_class": t.n_per_class,
            "student": t.student,
            "distill": t.distill,
            "kd": t.kd,
            "augment": augment,
        });
        if augment {
            v["generator"] = self.generator_scope(t)?.hash.into();
            v["sampler"] = serde_json::to_value(t.sampler)?;
        }
        Scope::new(cmd::DISTILL, v)
    }

    fn l2a_scope(&self, t: &TrainConfig) -> Result<Scope> {
        Scope::new(
            cmd::DISTILL_L2A,
            json!({
                "teacher": self.teacher_scope(t)?.hash,
                "generator": self.generator_scope(t)?.hash,
                "n_per_class": t.n_per_class,
                "student": t.student,
                "distill": t.distill,
                "kd": t.kd,
                "sampler": t.sampler,
                "selector": t.selector,
                "generator_update": t.generator_update,
            }),
        )
    }

    fn comparison_scope(
        &self,
        command: &'static str,
        base: &TrainConfig,
        ablation: &Ablation,
    ) -> Result<Scope> {
        let variant = ablation.apply(base)?;
        Scope::new(
            command,
            json!({
                "teacher": self.teacher_scope(base)?.hash,
                "student": self.student_scope(base)?.hash,
                "kd_noaug": self.distill_scope(base, false)?.hash,
                "l2a": self.l2a_scope(&variant)?.hash,
                "variant": ablation.label(),
            }),
        )
    }

    /// Config hash of `stage` under `train`, as used in artifact paths.
    pub fn hash_of(&self, stage: Stage, train: &TrainConfig) -> Result<String> {
        Ok(match stage {
            Stage::SynthData => self.synth_scope()?,
            Stage::PretrainGenerator => self.generator_scope(train)?,
            Stage::TrainTeacher => self.teacher_scope(train)?,
            Stage::TrainStudent => self.student_scope(train)?,
            Stage::Distill { augment } => self.distill_scope(train, augment)?,
            Stage::DistillL2a(a) => self.l2a_scope(&a.apply(train)?)?,
            Stage::Evaluate(a) => self.comparison_scope(cmd::EVALUATE, train, &a)?,
            Stage::Run(a) => self.comparison_scope(cmd::RUN, train, &a)?,
        }
        .hash)
    }

    // Data.

    pub fn raw_data(&self) -> Result<RawData> {
        match &self.config.data {
            DataConfig::Synth(s) => {
                let c = synth_generate(&s.spec, s.seed)?;
                Ok(RawData {
                    source: c.source,
                    target_pool: c.target,
                    validation: c.target_validation,
                    test: c.target_test,
                })
            }
            DataConfig::Jsonl(j) => Ok(RawData {
                source: load_jsonl(&j.source, Split::Train)?,
                target_pool: load_jsonl(&j.target, Split::Train)?,
                validation: load_jsonl(&j.validation, Split::Validation)?,
                test: load_jsonl(&j.test, Split::Test)?,
            }),
        }
        .map_err(|e: Error| e.in_stage("load data"))
    }

    fn task_data(&self, train: &TrainConfig, seed: u64) -> Result<TaskData> {
        TaskData::prepare(&self.raw_data()?, train, seed).map_err(|e| e.in_stage("prepare data"))
    }

    // Commands. With `reuse`, a complete artifact directory is returned as is.

    /// Writes the synthetic splits as JSONL under the data seed.
    pub fn synth_data(&self) -> Result<PathBuf> {
        let DataConfig::Synth(s) = &self.config.data else {
            return Err(Error::Config(
                "synth-data needs a `data.synth` section, not `data.jsonl`".into(),
            ));
        };
        let scope = self.synth_scope()?;
        let dir = self.start(&scope, s.seed)?;
        let c = synth_generate(&s.spec, s.seed)?;
        for (name, ds) in [
            ("source", &c.source),
            ("target", &c.target),
            ("validation", &c.target_validation),
            ("test", &c.target_test),
        ] {
            ds.write_jsonl(&dir.join(format!("{name}.jsonl")))?;
        }
        fs::write(
            dir.join("keywords.json"),
            serde_json::to_string_pretty(&c.keywords)? + "\n",
        )?;
        self.finish(
            &scope,
            s.seed,
            json!({ "source": c.source.len(), "target": c.target.len(),
                    "validation": c.target_validation.len(), "test": c.target_test.len() }),
        )
    }

    pub fn pretrain_generator(&self, train: &TrainConfig, seed: u64, reuse: bool) -> Result<PathBuf> {
        let scope = self.generator_scope(train)?;
        if reuse && self.complete(&scope, seed) {
            return Ok(self.dir(&scope, seed));
        }
        let data = self.task_data(train, seed)?;
        let corpus: Vec<_> =
            data.source.items.iter().chain(&data.target_pool.items).cloned().collect();
        let mc = data.model_config(train.generator, train.max_len, HeadKind::Mlm);
        let (gen, report) =
            pretrain_generator(&corpus, &mc, &train.generator_train, train.mask_rate, seed)
                .map_err(|e| e.in_stage(cmd::PRETRAIN_GENERATOR))?;
        let dir = self.start(&scope, seed)?;
        gen.save(&dir.join("generator.ckpt"), Self::tags(&scope, seed))?;
        let mut csv = String::from("epoch,loss\n");
        for (i, l) in report.epoch_losses.iter().enumerate() {
            let _ = writeln!(csv, "{},{l}", i + 1);
        }
        fs::write(dir.join("metrics.csv"), csv)?;
        log::info!(
            "generator seed {seed}: held-out masked accuracy {:.4} (chance {:.4})",
            report.heldout_accuracy,
            report.chance
        );
        self.finish(&scope, seed, serde_json::to_value(&report)?)
    }

    pub fn train_teacher(&self, train: &TrainConfig, seed: u64, reuse: bool) -> Result<PathBuf> {
        let scope = self.teacher_scope(train)?;
        if reuse && self.complete(&scope, seed) {
            return Ok(self.dir(&scope, seed));
        }
        let data = self.task_data(train, seed)?;
        let (teacher, report) =
            train_teacher(&data, train, seed).map_err(|e| e.in_stage(cmd::TRAIN_TEACHER))?;
        let dir = self.start(&scope, seed)?;
        teacher.save(&dir.join("teacher.ckpt"), Self::tags(&scope, seed))?;
        fs::write(dir.join("metrics.csv"), supervised_csv(&report))?;
        log::info!("teacher seed {seed}: validation {:.4}", report.best_validation.value);
        self.finish(&scope, seed, serde_json::to_value(&report)?)
    }

    /// The Student-FT baseline.
    pub fn train_student(&self, train: &TrainConfig, seed: u64, reuse: bool) -> Result<PathBuf> {
        let scope = self.student_scope(train)?;
        if reuse && self.complete(&scope, seed) {
            return Ok(self.dir(&scope, seed));
        }
        let data = self.task_data(train, seed)?;
        let (student, report) =
            train_student_ft(&data, train, seed).map_err(|e| e.in_stage(cmd::TRAIN_STUDENT))?;
        let dir = self.start(&scope, seed)?;
        student.save(&dir.join("student.ckpt"), Self::tags(&scope, seed))?;
        fs::write(dir.join("metrics.csv"), supervised_csv(&report))?;
        log::info!("student-ft seed {seed}: validation {:.4}", report.best_validation.value);
        self.finish(&scope, seed, serde_json::to_value(&report)?)
    }

    fn load_teacher(&self, train: &TrainConfig, seed: u64) -> Result<Encoder> {
        let scope = self.teacher_scope(train)?;
        Encoder::load(&require(self.dir(&scope, seed).join("teacher.ckpt"), cmd::TRAIN_TEACHER)?)
    }

    fn load_generator(&self, train: &TrainConfig, seed: u64) -> Result<Encoder> {
        let scope = self.generator_scope(train)?;
        Encoder::load(&require(
            self.dir(&scope, seed).join("generator.ckpt"),
            cmd::PRETRAIN_GENERATOR,
        )?)
    }

    fn save_distilled(
        &self,
        scope: &Scope,
        seed: u64,
        outcome: &DistillOutcome,
        data: &TaskData,
    ) -> Result<PathBuf> {
        let dir = self.start(scope, seed)?;
        let tags = Self::tags(scope, seed);
        outcome.student.save(&dir.join("student.ckpt"), tags.clone())?;
        if let Some(g) = &outcome.generator {
            g.save(&dir.join("generator.ckpt"), tags.clone())?;
        }
        if let Some(p) = &outcome.policy {
            Checkpoint {
                meta: json!({ "policy": { "dim": p.dim() }, "tags": tags }),
                params: p.params().clone(),
            }
            .save(&dir.join("policy.ckpt"))?;
        }
        fs::write(dir.join("metrics.csv"), StepRecord::csv(&outcome.records))?;
        if self.config.dump_augmented && !outcome.first_corpus.is_empty() {
            write_augmented_jsonl(&dir.join("augmented.jsonl"), &outcome.first_corpus, &data.vocab)?;
        }
        log::info!(
            "{} seed {seed}: validation {:.4} at step {}",
            scope.command,
            outcome.best_validation.value,
            outcome.best_step
        );
        self.finish(
            scope,
            seed,
            json!({
                "best_validation": outcome.best_validation,
                "best_step": outcome.best_step,
                "initial_validation": outcome.initial_validation,
                "epoch_sizes": outcome.epoch_sizes,
                "policy_updates": outcome.policy_reports,
            }),
        )
    }

    /// Plain distillation, or with `augment` distillation on a sampled
    /// corpus with every sample kept and the generator frozen.
    pub fn distill(&self, train: &TrainConfig, seed: u64, augment: bool, reuse: bool) -> Result<PathBuf> {
        let scope = self.distill_scope(train, augment)?;
        if reuse && self.complete(&scope, seed) {
            return Ok(self.dir(&scope, seed));
        }
        let teacher = self.load_teacher(train, seed)?;
        let data = self.task_data(train, seed)?;
        let outcome = if augment {
            let generator = self.load_generator(train, seed)?;
            run_distill(&teacher, generator, &data, train, seed, DistillMode::FIXED_AUGMENT)
        } else {
            plain_kd(&teacher, &data, train, seed)
        }
        .map_err(|e| e.in_stage(cmd::DISTILL))?;
        self.save_distilled(&scope, seed, &outcome, &data)
    }

    pub fn distill_l2a(
        &self,
        train: &TrainConfig,
        ablation: &Ablation,
        seed: u64,
        reuse: bool,
    ) -> Result<PathBuf> {
        let variant = ablation.apply(train)?;
        let scope = self.l2a_scope(&variant)?;
        if reuse && self.complete(&scope, seed) {
            return Ok(self.dir(&scope, seed));
        }
        let teacher = self.load_teacher(&variant, seed)?;
        let generator = self.load_generator(&variant, seed)?;
        let data = self.task_data(&variant, seed)?;
        let outcome = run_distill(&teacher, generator, &data, &variant, seed, DistillMode::L2A)
            .map_err(|e| e.in_stage(cmd::DISTILL_L2A))?;
        self.save_distilled(&scope, seed, &outcome, &data)
    }

    /// Test-split metrics of Teacher-FT, Student-FT, plain KD and the
    /// `ablation` variant for one seed, from existing checkpoints.
    pub fn evaluate(
        &self,
        train: &TrainConfig,
        ablation: &Ablation,
        seed: u64,
    ) -> Result<(Report, PathBuf)> {
        let variant = ablation.apply(train)?;
        let student_path = require(
            self.dir(&self.student_scope(train)?, seed).join("student.ckpt"),
            cmd::TRAIN_STUDENT,
        )?;
        let kd_path = require(
            self.dir(&self.distill_scope(train, false)?, seed).join("student.ckpt"),
            "distill --no-aug",
        )?;
        let l2a_path = require(
            self.dir(&self.l2a_scope(&variant)?, seed).join("student.ckpt"),
            ablation.command(),
        )?;
        let teacher = self.load_teacher(train, seed)?;
        let data = self.task_data(train, seed)?;
        let test = |m: &Encoder| metric_reports(m, &data.test, data.task, "test", data.outputs);
        let student_ft = Encoder::load(&student_path)?;
        let student_params = Encoder::init(*student_ft.config(), 0)?.num_params();
        let scope = self.comparison_scope(cmd::EVALUATE, train, ablation)?;
        let report = Report {
            task: data.task,
            seeds: vec![seed],
            config_hash: scope.hash.clone(),
            variant: ablation.label(),
            student_ft: metrics_by_name(&test(&student_ft)?),
            kd_noaug: metrics_by_name(&test(&Encoder::load(&kd_path)?)?),
            l2a: metrics_by_name(&test(&Encoder::load(&l2a_path)?)?),
            teacher_ft: metrics_by_name(&test(&teacher)?),
            param_counts: ParamCounts {
                teacher: teacher.num_params(),
                student: student_params,
                ratio: teacher.num_params() as f64 / student_params as f64,
            },
        };
        let dir = self.start(&scope, seed)?;
        report.save(&dir.join("report.json"))?;
        let mut csv = String::from("method,metric,split,n,value\n");
        for (method, metrics) in report.methods() {
            for (metric, values) in metrics {
                let _ = writeln!(csv, "{method},{metric},test,{},{}", data.test.len(), values[0]);
            }
        }
        fs::write(dir.join("metrics.csv"), csv)?;
        let dir = self.finish(&scope, seed, serde_json::to_value(&report.param_counts)?)?;
        Ok((report, dir))
    }

    /// Every stage the comparison needs for one seed, reusing complete
    /// artifacts, then its evaluation.
    pub fn run_seed(&self, train: &TrainConfig, ablation: &Ablation, seed: u64) -> Result<Report> {
        self.pretrain_generator(train, seed, true)?;
        self.train_teacher(train, seed, true)?;
        self.train_student(train, seed, true)?;
        self.distill(train, seed, false, true)?;
        self.distill_l2a(train, ablation, seed, true)?;
        Ok(self.evaluate(train, ablation, seed)?.0)
    }

    /// The full comparison over every configured seed. The merged report is
    /// written to `output_dir/run/<hash>/report.json`.
    pub fn run(&self, train: &TrainConfig, ablation: &Ablation) -> Result<(Report, PathBuf)> {
        let reports: Vec<Report> = self
            .config
            .seeds
            .iter()
            .map(|&s| self.run_seed(train, ablation, s))
            .collect::<Result<_>>()?;
        let mut merged = Report::merge(&reports)?;
        let scope = self.comparison_scope(cmd::RUN, train, ablation)?;
        merged.config_hash = scope.hash.clone();
        let dir = self.config.output_dir.join(cmd::RUN).join(&scope.hash);
        fs::create_dir_all(&dir)?;
        merged.save(&dir.join("report.json"))?;
        Ok((merged, dir))
    }

    /// Runs the comparison at every point of a sweep grid. Stages shared by
    /// several points (the teacher and generator, and all baselines of the
    /// sampler grid) are trained once.
    pub fn sweep(&self, kind: SweepKind) -> Result<(SweepReport, PathBuf)> {
        let base = &self.config.train;
        let sw = &self.config.sweep;
        let mut points = Vec::new();
        let mut configs: Vec<(Vec<(String, f64)>, TrainConfig)> = Vec::new();
        match kind {
            SweepKind::NPerClass => {
                for &n in &sw.n_per_class {
                    let mut c = base.clone();
                    c.n_per_class = n;
                    configs.push((vec![("n_per_class".into(), n as f64)], c));
                }
            }
            SweepKind::AlphaTemperature => {
                for &a in &sw.alpha {
                    for &t in &sw.temperature {
                        let mut c = base.clone();
                        c.sampler.alpha = a;
                        c.sampler.temperature = t;
                        configs.push((
                            vec![("alpha".into(), a), ("temperature".into(), t)],
                            c,
                        ));
                    }
                }
            }
        }
        let mut hashes = Vec::new();
        for (params, c) in configs {
            c.validate()?;
            let (report, _) = self.run(&c, &Ablation::NONE)?;
            hashes.push(report.config_hash.clone());
            points.push(SweepPoint { params, report });
        }
        let hash = config_hash(&json!({ "kind": kind.name(), "points": hashes }))?;
        let out = SweepReport {
            kind: kind.name().into(),
            points,
        };
        let dir = self.config.output_dir.join(cmd::SWEEP).join(hash);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("sweep.csv"), out.csv())?;
        fs::write(dir.join("sweep.dat"), out.plot_data())?;
        fs::write(dir.join("sweep.json"), serde_json::to_string_pretty(&out)? + "\n")?;
        Ok((out, dir))
    }
}

/// Aggregates run directories and writes `aggregate.csv` and the plot-data
/// file `aggregate.dat` into `out`.
pub fn aggregate_to(dirs: &[PathBuf], out: &Path) -> Result<AggregateTable> {
    let table = report_aggregate(dirs)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("aggregate.csv"), table.csv())?;
    fs::write(out.join("aggregate.dat"), table.plot_data())?;
    Ok(table)
}
