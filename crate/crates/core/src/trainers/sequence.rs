//! Drives a method through a whole task sequence, evaluating after each task.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{evaluate_after_task, TaskRecord};
use crate::losses::inheritance::DistillConfig;
use crate::model::{ArchSpec, Classifier, Generator};
use crate::task_stream::{TaskSequence, TaskSpec};
use crate::trainers::baselines::{train_finetune, train_joint, train_lwf};
use crate::trainers::common::{sub_seed, ClassifierTrainConfig, StepLog};
use crate::trainers::inheritance::{inherit_knowledge, InheritanceConfig};
use crate::trainers::recording::{record_knowledge, RecordingConfig};
use crate::trainers::replay::{ReplayRatio, StarvationPolicy};

/// A row of the loss-ablation ladder, or a reference configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// New-task cross-entropy only.
    Finetune,
    /// Cross-entropy plus distillation on new images.
    Lwf,
    /// Generative replay. `bn`/`div` switch the recording terms, `nkd` the
    /// distillation on new images.
    Replay { bn: bool, div: bool, nkd: bool },
    /// Joint training on all seen data.
    Oracle,
}

impl Method {
    pub const OURS: Method = Method::Replay { bn: true, div: true, nkd: true };

    pub fn validate(&self) -> Result<()> {
        if let Method::Replay { bn: false, div: true, .. } = self {
            return Err(Error::Config(
                "the pair-diversity term requires the statistics-alignment term (ablation ladder: base, +bn, +bn+div)"
                    .into(),
            ));
        }
        Ok(())
    }

    pub fn uses_generator(&self) -> bool {
        matches!(self, Method::Replay { .. })
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match *self {
            Method::Finetune => "finetune",
            Method::Lwf => "lwf",
            Method::Oracle => "oracle",
            Method::Replay { bn: true, div: true, nkd: true } => "ours",
            Method::Replay { bn: false, div: false, nkd: true } => "lwf-g-base",
            Method::Replay { bn: false, div: false, nkd: false } => "g-base",
            Method::Replay { bn: true, div: false, nkd: true } => "lwf-g-bn",
            Method::Replay { bn: true, div: false, nkd: false } => "g-bn",
            Method::Replay { bn: true, div: true, nkd: false } => "g-bn-div",
            Method::Replay { bn: false, div: true, .. } => "invalid-div-without-bn",
        };
        f.write_str(s)
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let r = |bn, div, nkd| Method::Replay { bn, div, nkd };
        Ok(match s.trim() {
            "finetune" => Method::Finetune,
            "lwf" => Method::Lwf,
            "oracle" => Method::Oracle,
            "ours" | "lwf-g-bn-div" => Method::OURS,
            "lwf-g-base" => r(false, false, true),
            "g-base" => r(false, false, false),
            "lwf-g-bn" => r(true, false, true),
            "g-bn" => r(true, false, false),
            "g-bn-div" => r(true, true, false),
            other => return Err(Error::Config(format!("unknown method {other:?}"))),
        })
    }
}

/// Stage settings for one method over a whole sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceConfig {
    pub method: Method,
    pub arch: ArchSpec,
    pub initial: ClassifierTrainConfig,
    pub incremental: ClassifierTrainConfig,
    pub recording: RecordingConfig,
    pub replay_ratio: ReplayRatio,
    pub distill: DistillConfig,
    pub rejection_budget: usize,
    #[serde(default)]
    pub starvation: StarvationPolicy,
    pub seed: u64,
}

impl SequenceConfig {
    /// Inheritance settings for incremental step `t`, derived from the method.
    pub fn inheritance(&self, t: usize) -> InheritanceConfig {
        let (replay, use_nkd) = match self.method {
            Method::Replay { nkd, .. } => (true, nkd),
            Method::Lwf => (false, true),
            Method::Finetune | Method::Oracle => (false, false),
        };
        InheritanceConfig {
            train: ClassifierTrainConfig { seed: sub_seed(self.seed, &format!("inherit-{t}")), ..self.incremental.clone() },
            replay,
            use_nkd,
            replay_ratio: self.replay_ratio,
            distill: self.distill.clone(),
            rejection_budget: self.rejection_budget,
            starvation: self.starvation,
        }
    }

    /// Recording settings for incremental step `t`, with the method's term switches applied.
    pub fn recording_for(&self, t: usize) -> RecordingConfig {
        let mut r = self.recording.clone();
        r.seed = sub_seed(self.seed, &format!("record-{t}"));
        if let Method::Replay { bn, div, .. } = self.method {
            if !bn {
                r.weights.lambda2 = 0.0;
            }
            if !div {
                r.weights.lambda3 = 0.0;
            }
        }
        r
    }
}

/// What happened while learning one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub task: usize,
    pub recording_log: Option<StepLog>,
    pub training_log: StepLog,
    pub recording_seconds: f64,
    pub training_seconds: f64,
    pub classifier_digest: String,
    pub generator_digest: Option<String>,
    pub teacher_digest: Option<String>,
}

pub struct SequenceOutcome {
    /// Classifier after each task (the first is the initial model).
    pub checkpoints: Vec<Classifier>,
    /// Generator recorded before each incremental task.
    pub generators: Vec<Option<Generator>>,
    pub stages: Vec<StageReport>,
    pub records: Vec<TaskRecord>,
}

/// Trains the first-task model with cross-entropy over its single head.
pub fn train_initial(arch: &ArchSpec, task: &TaskSpec, cfg: &ClassifierTrainConfig) -> Result<(Classifier, StepLog)> {
    let model = Classifier::new(arch.clone(), task.num_classes(), sub_seed(cfg.seed, "initial-init"))?;
    let cols = crate::trainers::common::head_labels(task.train.labels(), &task.class_set)?;
    let out = train_joint(model, &task.train, &cols, cfg)?;
    Ok((out.model, out.log))
}

fn oracle_step(seq: &TaskSequence, upto: usize, cfg: &SequenceConfig) -> Result<Classifier> {
    let map = seq.label_map(upto)?;
    let widths: Vec<usize> = seq.tasks[..=upto].iter().map(TaskSpec::num_classes).collect();
    let init = sub_seed(cfg.seed, &format!("oracle-init-{upto}"));
    let mut model = Classifier::new(cfg.arch.clone(), widths[0], init)?;
    for (i, &w) in widths.iter().enumerate().skip(1) {
        model.expand_head(w, sub_seed(init, &format!("head-{i}")))?;
    }
    let parts: Vec<&crate::data::LabeledSet> = seq.tasks[..=upto].iter().map(|t| &t.train).collect();
    let train = crate::data::LabeledSet::concat(&parts)?;
    let cols = map.columns_of(train.labels())?;
    let tc = ClassifierTrainConfig { seed: sub_seed(cfg.seed, &format!("oracle-{upto}")), ..cfg.initial.clone() };
    Ok(train_joint(model, &train, &cols, &tc)?.model)
}

/// Result of learning one incremental task.
pub struct StepOutcome {
    pub model: Classifier,
    pub generator: Option<Generator>,
    pub record: TaskRecord,
    pub report: StageReport,
}

/// Learns incremental task `t` (≥ 1) starting from `current`, the model after task `t − 1`.
pub fn run_step(current: &Classifier, seq: &TaskSequence, t: usize, cfg: &SequenceConfig) -> Result<StepOutcome> {
    cfg.method.validate()?;
    if t == 0 || t >= seq.len() {
        return Err(Error::Config(format!("incremental step {t} outside 1..{}", seq.len())));
    }
    let task = &seq.tasks[t];
    let mut recording_log = None;
    let mut recording_seconds = 0.0;
    let mut generator = None;
    if cfg.method.uses_generator() {
        let started = Instant::now();
        let rec = record_knowledge(current, &cfg.recording_for(t))?;
        recording_seconds = started.elapsed().as_secs_f64();
        recording_log = Some(rec.log);
        generator = Some(rec.generator);
    }
    let started = Instant::now();
    let inherit = cfg.inheritance(t);
    let (model, log) = match cfg.method {
        Method::Finetune => {
            let o = train_finetune(current, task, &inherit.train)?;
            (o.model, o.log)
        }
        Method::Lwf => {
            let o = train_lwf(current, task, &inherit.train, &cfg.distill)?;
            (o.model, o.log)
        }
        Method::Replay { .. } => {
            let o = inherit_knowledge(current, generator.as_ref(), task, &inherit)?;
            (o.model, o.log)
        }
        Method::Oracle => (oracle_step(seq, t, cfg)?, StepLog::default()),
    };
    let training_seconds = started.elapsed().as_secs_f64();
    log::info!("{} task {}: trained in {:.1}s", cfg.method, t + 1, training_seconds);
    let record = evaluate_after_task(&model, seq, t)?;
    let report = StageReport {
        task: t,
        recording_log,
        training_log: log,
        recording_seconds,
        training_seconds,
        classifier_digest: model.digest(),
        generator_digest: generator.as_ref().map(Generator::digest),
        teacher_digest: Some(current.digest()),
    };
    Ok(StepOutcome { model, generator, record, report })
}

fn check_initial(initial: &Classifier, seq: &TaskSequence) -> Result<()> {
    if seq.is_empty() {
        return Err(Error::Config("empty task sequence".into()));
    }
    if initial.head_widths() != [seq.tasks[0].num_classes()] {
        return Err(Error::Config(format!(
            "initial model heads {:?} do not match the first task ({} classes)",
            initial.head_widths(),
            seq.tasks[0].num_classes()
        )));
    }
    Ok(())
}

/// Runs `cfg.method` over every task after the first, starting from the
/// shared `initial` model, and evaluates on all seen classes after each task.
pub fn run_sequence(initial: &Classifier, seq: &TaskSequence, cfg: &SequenceConfig) -> Result<SequenceOutcome> {
    cfg.method.validate()?;
    check_initial(initial, seq)?;
    let mut checkpoints = vec![initial.clone()];
    let mut generators = vec![None];
    let mut stages = vec![StageReport {
        task: 0,
        recording_log: None,
        training_log: StepLog::default(),
        recording_seconds: 0.0,
        training_seconds: 0.0,
        classifier_digest: initial.digest(),
        generator_digest: None,
        teacher_digest: None,
    }];
    let mut records = vec![evaluate_after_task(initial, seq, 0)?];
    for t in 1..seq.len() {
        let step = run_step(checkpoints.last().expect("initial model present"), seq, t, cfg)?;
        records.push(step.record);
        stages.push(step.report);
        checkpoints.push(step.model);
        generators.push(step.generator);
    }
    Ok(SequenceOutcome { checkpoints, generators, stages, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for name in ["finetune", "lwf", "oracle", "ours", "lwf-g-base", "g-base", "lwf-g-bn", "g-bn", "g-bn-div"] {
            let m: Method = name.parse().unwrap();
            assert_eq!(m.to_string(), name);
            m.validate().unwrap();
        }
        assert!("sgd".parse::<Method>().is_err());
        assert!(Method::Replay { bn: false, div: true, nkd: true }.validate().is_err());
    }
}
