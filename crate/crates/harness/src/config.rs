//! Experiment configuration: a flat TOML file of dotted keys with a version
//! header. Every key has a default per tier; unknown keys and bad values are
//! reported together.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use genreplay_core::data::SyntheticSpec;
use genreplay_core::losses::inheritance::Lambda4;
use genreplay_core::losses::recording::DivergenceSpace;
use genreplay_core::losses::{DistillConfig, RecordingLossWeights};
use genreplay_core::model::{ArchSpec, GeneratorArch};
use genreplay_core::optim::{OptimizerSpec, StepDecay};
use genreplay_core::task_stream::Protocol;
use genreplay_core::trainers::{
    Augment, ClassifierTrainConfig, Method, RecordingConfig, ReplayRatio, SequenceConfig, StarvationPolicy,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Value;

use crate::error::{HarnessError, Result};

pub const CONFIG_VERSION: i64 = 1;
/// Default for `output_dir` when the config does not set it.
pub const OUTPUT_ROOT_ENV: &str = "GENREPLAY_OUTPUT_ROOT";

/// Keys that switch individual replay terms; they have no default and are
/// only echoed when given.
const ABLATION_KEYS: [&str; 3] = ["ablation.bn", "ablation.div", "ablation.nkd"];

/// Keys left out of the config hash: where results go does not change them.
const UNHASHED: [&str; 1] = ["output_dir"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Desk,
    Paper,
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Desk => "desk",
            Tier::Paper => "paper",
        })
    }
}

impl FromStr for Tier {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "desk" => Ok(Tier::Desk),
            "paper" => Ok(Tier::Paper),
            other => Err(format!("tier must be desk or paper, got {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    /// Image-folder or binary layout on disk.
    Path(PathBuf),
}

#[derive(Clone, Copy)]
enum Kind {
    Str,
    /// Integer with a lower bound.
    Int(i64),
    Float,
    Bool,
    IntList,
    FloatList,
    PairList,
}

fn s(v: &str) -> Value {
    Value::String(v.to_string())
}

fn i(v: i64) -> Value {
    Value::Integer(v)
}

fn f(v: f64) -> Value {
    Value::Float(v)
}

fn ints(v: &[i64]) -> Value {
    Value::Array(v.iter().map(|&x| Value::Integer(x)).collect())
}

fn pairs(v: &[(i64, i64)]) -> Value {
    Value::Array(v.iter().map(|&(a, b)| ints(&[a, b])).collect())
}

/// `(key, kind, paper default, desk default)`.
fn key_table() -> Vec<(&'static str, Kind, Value, Value)> {
    use Kind::*;
    let same = |k: &'static str, kind: Kind, v: Value| (k, kind, v.clone(), v);
    let desk_pairs = pairs(&[(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)]);
    vec![
        same("method", Str, s("ours")),
        ("protocol", Str, s("equal-phase:5"), s("equal-phase:2")),
        same("seeds", IntList, ints(&[1, 2, 3])),
        same("dataset.source", Str, s("synthetic")),
        same("dataset.path", Str, s("")),
        ("dataset.classes", Int(2), i(100), i(10)),
        ("dataset.channels", Int(1), i(3), i(1)),
        ("dataset.side", Int(4), i(32), i(8)),
        ("dataset.train_per_class", Int(1), i(500), i(100)),
        ("dataset.eval_per_class", Int(1), i(100), i(50)),
        same("dataset.noise", Float, f(0.5)),
        ("dataset.confusable", PairList, pairs(&[]), desk_pairs),
        same("dataset.confusable_mix", Float, f(0.35)),
        same("dataset.seed", Int(0), i(7)),
        ("model.arch", Str, s("resnet34"), s("desk")),
        ("generator.arch", Str, s("dcgan"), s("desk")),
        ("initial.epochs", Int(1), i(150), i(15)),
        ("initial.batch_size", Int(2), i(128), i(32)),
        same("initial.learning_rate", Float, f(0.01)),
        same("initial.momentum", Float, f(0.9)),
        same("initial.weight_decay", Float, f(5e-4)),
        ("incremental.epochs", Int(1), i(150), i(20)),
        ("incremental.batch_size", Int(2), i(128), i(32)),
        same("incremental.learning_rate", Float, f(0.01)),
        same("incremental.momentum", Float, f(0.9)),
        same("incremental.weight_decay", Float, f(5e-4)),
        same("schedule.milestones", FloatList, Value::Array(vec![f(0.5), f(0.75)])),
        same("schedule.factor", Float, f(10.0)),
        ("augment.flip", Bool, Value::Boolean(true), Value::Boolean(false)),
        ("augment.crop_pad", Int(0), i(4), i(0)),
        ("recording.epochs", Int(1), i(500), i(5)),
        same("recording.steps_per_epoch", Int(1), i(100)),
        ("recording.batch_size", Int(2), i(512), i(128)),
        same("recording.learning_rate", Float, f(0.01)),
        same("recording.optimizer", Str, s("rmsprop")),
        same("recording.lambda1", Float, f(5.0)),
        same("recording.lambda2", Float, f(20.0)),
        same("recording.lambda3", Float, f(0.1)),
        same("recording.pair_count", Int(1), i(200)),
        same("recording.divergence", Str, s("output")),
        same("recording.recalibration_batches", Int(0), i(8)),
        same("replay.ratio", Str, s("1:1")),
        same("replay.rejection_budget", Int(1), i(50)),
        same("replay.on_starvation", Str, s("error")),
        same("distill.temperature", Float, f(2.0)),
        same("distill.lambda4", Str, s("schedule")),
    ]
}

/// Flattens nested tables into dotted keys.
fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

/// Parses config text into dotted keys.
pub fn parse_flat(text: &str) -> Result<BTreeMap<String, Value>> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| HarnessError::Config(vec![e.to_string()]))?;
    let mut out = BTreeMap::new();
    flatten("", &table, &mut out);
    Ok(out)
}

/// Parses one `key=value` override. The value is read as a TOML value and
/// falls back to a plain string, so `method=lwf` and `seeds=[1, 2]` both work.
pub fn parse_override(arg: &str) -> Result<(String, Value)> {
    let (k, v) = arg
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(vec![format!("override {arg:?} is not key=value")]))?;
    let key = k.trim().to_string();
    let raw = v.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((key, value))
}

fn type_name(v: &Value) -> &'static str {
    v.type_str()
}

/// Checks `v` against `kind` and returns its canonical form.
fn coerce(key: &str, kind: Kind, v: &Value) -> std::result::Result<Value, String> {
    let wrong = || format!("{key}: expected {}, got {} {v}", kind_name(kind), type_name(v));
    let as_float = |x: &Value| match x {
        Value::Float(f) if f.is_finite() => Some(*f),
        Value::Integer(n) => Some(*n as f64),
        _ => None,
    };
    match kind {
        Kind::Str => v.as_str().map(|x| s(x)).ok_or_else(wrong),
        Kind::Bool => v.as_bool().map(Value::Boolean).ok_or_else(wrong),
        Kind::Float => as_float(v).map(Value::Float).ok_or_else(wrong),
        Kind::Int(min) => match v.as_integer() {
            Some(n) if n >= min => Ok(Value::Integer(n)),
            Some(n) => Err(format!("{key}: must be at least {min}, got {n}")),
            None => Err(wrong()),
        },
        Kind::IntList => {
            let arr = v.as_array().ok_or_else(wrong)?;
            let mut out = Vec::with_capacity(arr.len());
            for x in arr {
                match x.as_integer() {
                    Some(n) if n >= 0 => out.push(Value::Integer(n)),
                    _ => return Err(wrong()),
                }
            }
            Ok(Value::Array(out))
        }
        Kind::FloatList => {
            let arr = v.as_array().ok_or_else(wrong)?;
            arr.iter()
                .map(|x| as_float(x).map(Value::Float).ok_or_else(wrong))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Value::Array)
        }
        Kind::PairList => {
            let arr = v.as_array().ok_or_else(wrong)?;
            let mut out = Vec::with_capacity(arr.len());
            for p in arr {
                let pair = p.as_array().filter(|p| p.len() == 2).ok_or_else(wrong)?;
                let a = pair[0].as_integer().filter(|&n| n >= 0).ok_or_else(wrong)?;
                let b = pair[1].as_integer().filter(|&n| n >= 0).ok_or_else(wrong)?;
                out.push(ints(&[a, b]));
            }
            Ok(Value::Array(out))
        }
    }
}

fn kind_name(kind: Kind) -> String {
    match kind {
        Kind::Str => "a string".into(),
        Kind::Int(min) => format!("an integer ≥ {min}"),
        Kind::Float => "a finite number".into(),
        Kind::Bool => "a boolean".into(),
        Kind::IntList => "a list of non-negative integers".into(),
        Kind::FloatList => "a list of numbers".into(),
        Kind::PairList => "a list of [a, b] integer pairs".into(),
    }
}

/// A validated configuration with every default filled in.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub tier: Tier,
    pub method: Method,
    pub protocol: Protocol,
    pub seeds: Vec<u64>,
    pub dataset: DatasetSource,
    /// Stage settings; the per-seed fields are set by [`ExperimentConfig::sequence_for`].
    pub sequence: SequenceConfig,
    pub output_dir: PathBuf,
    resolved: BTreeMap<String, Value>,
}

/// Validates config text; see [`validate_with_overrides`].
pub fn validate_config(text: &str) -> Result<ExperimentConfig> {
    validate_with_overrides(text, &[])
}

/// Validates config text with `key=value` overrides applied on top, filling
/// every unset key from the tier defaults.
pub fn validate_with_overrides(text: &str, overrides: &[(String, Value)]) -> Result<ExperimentConfig> {
    let mut raw = parse_flat(text)?;
    for (k, v) in overrides {
        raw.insert(k.clone(), v.clone());
    }
    resolve(raw)
}

fn resolve(mut raw: BTreeMap<String, Value>) -> Result<ExperimentConfig> {
    let mut errors = Vec::new();
    match raw.remove("version") {
        None => {}
        Some(Value::Integer(CONFIG_VERSION)) => {}
        Some(v) => errors.push(format!("version: this build reads config version {CONFIG_VERSION}, got {v}")),
    }
    let tier = match raw.remove("tier") {
        None => Tier::Paper,
        Some(v) => match v.as_str().map(Tier::from_str) {
            Some(Ok(t)) => t,
            Some(Err(e)) => {
                errors.push(e);
                Tier::Paper
            }
            None => {
                errors.push(format!("tier: expected a string, got {v}"));
                Tier::Paper
            }
        },
    };
    let output_dir = match raw.remove("output_dir") {
        None => std::env::var(OUTPUT_ROOT_ENV).unwrap_or_else(|_| "runs".to_string()),
        Some(Value::String(p)) => p,
        Some(v) => {
            errors.push(format!("output_dir: expected a string, got {v}"));
            String::new()
        }
    };

    let mut resolved = BTreeMap::new();
    resolved.insert("version".to_string(), Value::Integer(CONFIG_VERSION));
    resolved.insert("tier".to_string(), s(&tier.to_string()));
    resolved.insert("output_dir".to_string(), s(&output_dir));
    for (key, kind, paper, desk) in key_table() {
        let default = if tier == Tier::Desk { desk } else { paper };
        let v = raw.remove(key).unwrap_or(default);
        match coerce(key, kind, &v) {
            Ok(c) => {
                resolved.insert(key.to_string(), c);
            }
            Err(e) => errors.push(e),
        }
    }
    let mut ablation = BTreeMap::new();
    for key in ABLATION_KEYS {
        if let Some(v) = raw.remove(key) {
            match coerce(key, Kind::Bool, &v) {
                Ok(c) => {
                    ablation.insert(key, c.as_bool().expect("coerced to bool"));
                }
                Err(e) => errors.push(e),
            }
        }
    }
    for key in raw.keys() {
        errors.push(format!("unknown key {key:?}"));
    }
    if !errors.is_empty() {
        // Report a bad ablation combination alongside the other problems.
        if let Some(Ok(m)) = resolved.get("method").and_then(Value::as_str).map(str::parse::<Method>) {
            if let Err(e) = apply_ablation(m, &ablation) {
                errors.push(e);
            }
        }
        return Err(HarnessError::Config(errors));
    }

    let b = Builder { r: &resolved, errors: Vec::new() };
    let built = b.build(tier, &ablation);
    let (method, protocol, seeds, dataset, sequence) = match built {
        Ok(v) => v,
        Err(errors) => return Err(HarnessError::Config(errors)),
    };
    resolved.insert("method".to_string(), s(&method.to_string()));
    resolved.insert("protocol".to_string(), s(&protocol.to_string()));
    Ok(ExperimentConfig { tier, method, protocol, seeds, dataset, sequence, output_dir: output_dir.into(), resolved })
}

struct Builder<'a> {
    r: &'a BTreeMap<String, Value>,
    errors: Vec<String>,
}

type Built = (Method, Protocol, Vec<u64>, DatasetSource, SequenceConfig);

impl<'a> Builder<'a> {
    fn str(&self, k: &str) -> &'a str {
        self.r[k].as_str().expect("validated string")
    }

    fn int(&self, k: &str) -> usize {
        self.r[k].as_integer().expect("validated integer") as usize
    }

    fn float(&self, k: &str) -> f64 {
        self.r[k].as_float().expect("validated float")
    }

    fn bool(&self, k: &str) -> bool {
        self.r[k].as_bool().expect("validated bool")
    }

    fn check<T, E: fmt::Display>(&mut self, key: &str, v: std::result::Result<T, E>) -> Option<T> {
        v.map_err(|e| self.errors.push(format!("{key}: {e}"))).ok()
    }

    fn classifier(&mut self, stage: &str) -> ClassifierTrainConfig {
        let optimizer = OptimizerSpec::Sgd {
            momentum: self.float(&format!("{stage}.momentum")),
            weight_decay: self.float(&format!("{stage}.weight_decay")),
        };
        if let Err(e) = optimizer.validate() {
            self.errors.push(format!("{stage}: {e}"));
        }
        let lr = self.float(&format!("{stage}.learning_rate"));
        if lr <= 0.0 {
            self.errors.push(format!("{stage}.learning_rate: must be positive, got {lr}"));
        }
        ClassifierTrainConfig {
            epochs: self.int(&format!("{stage}.epochs")),
            batch_size: self.int(&format!("{stage}.batch_size")),
            learning_rate: lr,
            optimizer,
            schedule: StepDecay {
                milestones: self.r["schedule.milestones"]
                    .as_array()
                    .expect("validated list")
                    .iter()
                    .map(|v| v.as_float().expect("validated float"))
                    .collect(),
                factor: self.float("schedule.factor"),
            },
            augment: Augment { flip: self.bool("augment.flip"), crop_pad: self.int("augment.crop_pad") },
            seed: 0,
        }
    }

    fn build(mut self, tier: Tier, ablation: &BTreeMap<&str, bool>) -> std::result::Result<Built, Vec<String>> {
        let method = self.check("method", self.str("method").parse::<Method>());
        let method = method.and_then(|m| apply_ablation(m, ablation).map_err(|e| self.errors.push(e)).ok());
        let protocol = self.check("protocol", self.str("protocol").parse::<Protocol>());

        let seeds: Vec<u64> = self.r["seeds"]
            .as_array()
            .expect("validated list")
            .iter()
            .map(|v| v.as_integer().expect("validated integer") as u64)
            .collect();
        if seeds.is_empty() {
            self.errors.push("seeds: at least one seed is required".into());
        }
        let mut uniq = seeds.clone();
        uniq.sort_unstable();
        uniq.dedup();
        if uniq.len() != seeds.len() {
            self.errors.push("seeds: duplicates are not allowed".into());
        }

        let channels = self.int("dataset.channels");
        let side = self.int("dataset.side");
        let classes = self.int("dataset.classes");
        let dataset = match self.str("dataset.source") {
            "synthetic" => {
                let confusable: Vec<(usize, usize)> = self.r["dataset.confusable"]
                    .as_array()
                    .expect("validated list")
                    .iter()
                    .map(|p| {
                        let p = p.as_array().expect("validated pair");
                        (p[0].as_integer().expect("int") as usize, p[1].as_integer().expect("int") as usize)
                    })
                    .collect();
                if let Some(&(a, b)) = confusable.iter().find(|&&(a, b)| a >= classes || b >= classes || a == b) {
                    self.errors.push(format!("dataset.confusable: pair ({a}, {b}) invalid for {classes} classes"));
                }
                let mix = self.float("dataset.confusable_mix");
                if !(0.0..=1.0).contains(&mix) {
                    self.errors.push(format!("dataset.confusable_mix: must lie in [0, 1], got {mix}"));
                }
                if self.float("dataset.noise") < 0.0 {
                    self.errors.push("dataset.noise: must be non-negative".into());
                }
                Some(DatasetSource::Synthetic(SyntheticSpec {
                    num_classes: classes,
                    channels,
                    side,
                    train_per_class: self.int("dataset.train_per_class"),
                    eval_per_class: self.int("dataset.eval_per_class"),
                    noise: self.float("dataset.noise"),
                    confusable,
                    confusable_mix: mix,
                    seed: self.int("dataset.seed") as u64,
                }))
            }
            "path" => {
                let p = self.str("dataset.path");
                if p.is_empty() {
                    self.errors.push("dataset.path: required when dataset.source = \"path\"".into());
                }
                Some(DatasetSource::Path(PathBuf::from(p)))
            }
            other => {
                self.errors.push(format!("dataset.source: expected synthetic or path, got {other:?}"));
                None
            }
        };
        if let (Some(p), Some(DatasetSource::Synthetic(_))) = (protocol, &dataset) {
            if let Err(e) = p.sizes(classes) {
                self.errors.push(format!("protocol: {e}"));
            }
        }

        let arch = match self.str("model.arch") {
            "desk" => Some(ArchSpec::desk(channels, side)),
            "tiny" => Some(ArchSpec::tiny(channels, side)),
            "resnet18" => Some(ArchSpec::resnet18(channels, side)),
            "resnet34" => Some(ArchSpec::resnet34(channels, side)),
            other => {
                self.errors.push(format!("model.arch: expected desk, tiny, resnet18 or resnet34, got {other:?}"));
                None
            }
        };
        let generator = match self.str("generator.arch") {
            "desk" => Some(GeneratorArch::desk(channels, side)),
            "dcgan" => Some(GeneratorArch::dcgan(channels, side)),
            other => {
                self.errors.push(format!("generator.arch: expected desk or dcgan, got {other:?}"));
                None
            }
        };
        let initial = self.classifier("initial");
        let incremental = self.classifier("incremental");
        let gen_optimizer = match self.str("recording.optimizer") {
            "rmsprop" => Some(OptimizerSpec::generator_default()),
            "adam" => Some(OptimizerSpec::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }),
            "sgd" => Some(OptimizerSpec::Sgd { momentum: 0.9, weight_decay: 0.0 }),
            other => {
                self.errors.push(format!("recording.optimizer: expected rmsprop, adam or sgd, got {other:?}"));
                None
            }
        };
        let divergence = match self.str("recording.divergence") {
            "output" => Some(DivergenceSpace::Output),
            "pixel" => Some(DivergenceSpace::Pixel),
            other => {
                self.errors.push(format!("recording.divergence: expected output or pixel, got {other:?}"));
                None
            }
        };
        let weights = RecordingLossWeights {
            lambda1: self.float("recording.lambda1"),
            lambda2: self.float("recording.lambda2"),
            lambda3: self.float("recording.lambda3"),
            pair_count: self.int("recording.pair_count"),
            divergence: divergence.unwrap_or_default(),
        };
        if let Err(e) = weights.validate() {
            self.errors.push(format!("recording: {e}"));
        }
        let replay_ratio = self.check("replay.ratio", self.str("replay.ratio").parse::<ReplayRatio>());
        let starvation = self.check("replay.on_starvation", self.str("replay.on_starvation").parse::<StarvationPolicy>());
        let lambda4 = match self.str("distill.lambda4") {
            "schedule" => Some(Lambda4::TaskIndexSchedule),
            other => match other.parse::<f64>() {
                Ok(v) => Some(Lambda4::Fixed(v)),
                Err(_) => {
                    self.errors.push(format!("distill.lambda4: expected \"schedule\" or a number, got {other:?}"));
                    None
                }
            },
        };
        let distill = DistillConfig { temperature: self.float("distill.temperature"), lambda4: lambda4.unwrap_or(Lambda4::TaskIndexSchedule) };
        if let Err(e) = distill.validate() {
            self.errors.push(format!("distill: {e}"));
        }
        if tier == Tier::Desk && side > 32 {
            self.errors.push(format!("dataset.side: desk tier images are at most 32 pixels, got {side}"));
        }

        let recording = RecordingConfig {
            epochs: self.int("recording.epochs"),
            steps_per_epoch: self.int("recording.steps_per_epoch"),
            batch_size: self.int("recording.batch_size"),
            learning_rate: self.float("recording.learning_rate"),
            optimizer: gen_optimizer.clone().unwrap_or_else(OptimizerSpec::generator_default),
            schedule: StepDecay::none(),
            weights,
            generator: generator.clone().unwrap_or_else(|| GeneratorArch::desk(channels, side)),
            recalibration_batches: self.int("recording.recalibration_batches"),
            seed: 0,
        };
        if let Err(e) = recording.validate() {
            self.errors.push(format!("recording: {e}"));
        }
        if !self.errors.is_empty() {
            return Err(self.errors);
        }
        let (method, protocol, dataset, arch, replay_ratio) = (
            method.expect("no errors"),
            protocol.expect("no errors"),
            dataset.expect("no errors"),
            arch.expect("no errors"),
            replay_ratio.expect("no errors"),
        );
        let starvation = starvation.expect("no errors");
        let sequence = SequenceConfig {
            method,
            arch,
            initial,
            incremental,
            recording,
            replay_ratio,
            distill,
            rejection_budget: self.int("replay.rejection_budget"),
            starvation,
            seed: 0,
        };
        Ok((method, protocol, seeds, dataset, sequence))
    }
}

/// Applies `ablation.*` flags to a generative-replay method.
fn apply_ablation(method: Method, flags: &BTreeMap<&str, bool>) -> std::result::Result<Method, String> {
    if flags.is_empty() {
        return Ok(method);
    }
    let Method::Replay { bn, div, nkd } = method else {
        return Err(format!("ablation.*: flags apply to generative-replay methods, not {method}"));
    };
    let m = Method::Replay {
        bn: flags.get("ablation.bn").copied().unwrap_or(bn),
        div: flags.get("ablation.div").copied().unwrap_or(div),
        nkd: flags.get("ablation.nkd").copied().unwrap_or(nkd),
    };
    m.validate().map(|()| m).map_err(|e| format!("ablation: {e}"))
}

impl ExperimentConfig {
    /// Canonical values of every key, defaults included.
    pub fn resolved(&self) -> &BTreeMap<String, Value> {
        &self.resolved
    }

    /// Canonical values as strings, for manifests.
    pub fn resolved_strings(&self) -> BTreeMap<String, String> {
        self.resolved.iter().map(|(k, v)| (k.clone(), v.to_string())).collect()
    }

    /// The resolved config as config text that validates back to itself.
    pub fn to_text(&self) -> String {
        let mut out = format!("version = {CONFIG_VERSION}\n");
        for (k, v) in &self.resolved {
            if k != "version" {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }

    fn hash_except(&self, skip: &[&str]) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.resolved {
            if UNHASHED.contains(&k.as_str()) || skip.contains(&k.as_str()) {
                continue;
            }
            h.update(format!("{k}={v}\n").as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// SHA-256 over the sorted resolved keys, so key order in the file does not matter.
    pub fn config_hash(&self) -> String {
        self.hash_except(&[])
    }

    /// Hash of everything that shapes a single seed's trajectory.
    pub fn stage_basis(&self) -> String {
        self.hash_except(&["seeds"])
    }

    /// Stage settings for one seed.
    pub fn sequence_for(&self, seed: u64) -> SequenceConfig {
        let mut s = self.sequence.clone();
        s.seed = seed;
        s.initial.seed = seed;
        s.incremental.seed = seed;
        s
    }

    /// Directory holding this run's artifacts.
    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(format!("{}-{}", self.method, &self.config_hash()[..12]))
    }
}
