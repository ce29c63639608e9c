//! Executes a configuration over all its seeds and persists every artifact
//! under the run directory.
//!
//! Layout of a run directory:
//!
//! ```text
//! manifest.json              status, timings, artifact list
//! config.toml                resolved configuration
//! metrics.csv / .json        per-seed rows followed by mean rows
//! metrics-seed-<s>.csv
//! seed-<s>/sequence.json     class sets per task
//! seed-<s>/task-<t>.ckpt     classifier after task t (1-based)
//! seed-<s>/generator-<t>.ckpt, recording-<t>.csv, training-<t>.csv, stage-<t>.json
//! ```
//!
//! The first-task model lives in `<output_dir>/cache/initial/<key>.ckpt`,
//! keyed by the content of the data, class split, architecture and training
//! settings, so every method run on the same split starts from the same model.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use genreplay_core::checkpoint::{load_classifier, read_header, save_classifier, save_generator};
use genreplay_core::data::{load_dataset, synthetic, Dataset};
use genreplay_core::evaluation::{evaluate_after_task, MetricsTable, TaskRecord};
use genreplay_core::model::Classifier;
use genreplay_core::task_stream::{materialize_tasks, split_classes, SequenceSkeleton, TaskSequence};
use genreplay_core::trainers::{run_step, train_initial, SequenceConfig, StepLog};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{DatasetSource, ExperimentConfig};
use crate::error::{HarnessError, Result};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

impl std::fmt::Display for RunStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RunStatus::Running => "running",
            RunStatus::Complete => "complete",
            RunStatus::Failed => "failed",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub seed: u64,
    /// 1-based task number.
    pub task: usize,
    pub cache_hit: bool,
    pub recording_seconds: f64,
    pub training_seconds: f64,
    pub classifier_digest: String,
    pub generator_digest: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub metrics_schema_version: u32,
    pub status: RunStatus,
    pub config_hash: String,
    pub code_version: String,
    /// All training here is single-threaded and seeded, hence bitwise reproducible.
    pub execution_mode: String,
    pub method: String,
    pub protocol: String,
    pub dataset_name: String,
    pub dataset_digest: String,
    pub seeds: Vec<u64>,
    pub config: BTreeMap<String, String>,
    pub initial_checkpoints: BTreeMap<u64, String>,
    pub stages: Vec<StageEntry>,
    pub last_completed_stage: Option<String>,
    pub error: Option<String>,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| HarnessError::io(format!("reading {}", path.display()), e))?;
        let m: RunManifest = serde_json::from_str(&text)?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(HarnessError::Schema(format!(
                "{} has manifest schema {}, this build reads {MANIFEST_SCHEMA_VERSION}",
                path.display(),
                m.schema_version
            )));
        }
        Ok(m)
    }

    pub fn cache_hits(&self) -> usize {
        self.stages.iter().filter(|s| s.cache_hit).count()
    }
}

/// Per-stage summary written next to the stage's checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub seed: u64,
    pub task: usize,
    pub stage_key: String,
    pub method: String,
    pub recording_steps: usize,
    pub training_steps: usize,
    pub final_recording: Option<BTreeMap<String, f64>>,
    pub final_training: Option<BTreeMap<String, f64>>,
    pub recording_seconds: f64,
    pub training_seconds: f64,
    pub classifier_digest: String,
    pub generator_digest: Option<String>,
    pub teacher_digest: Option<String>,
    pub record: TaskRecord,
}

/// Writes through a temporary file and a rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(format!("creating {}", dir.display()), e))?;
    }
    let tmp = path.with_extension(format!("tmp-{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| HarnessError::io(format!("writing {}", tmp.display()), e))?;
    fs::rename(&tmp, path).map_err(|e| HarnessError::io(format!("renaming to {}", path.display()), e))
}

fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

pub fn load_experiment_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    Ok(match &cfg.dataset {
        DatasetSource::Synthetic(spec) => synthetic(spec)?,
        DatasetSource::Path(p) => load_dataset(p)?,
    })
}

/// Content key of a first-task model.
pub fn initial_cache_key(dataset_digest: &str, skeleton: &SequenceSkeleton, seq_cfg: &SequenceConfig) -> Result<String> {
    let first = serde_json::to_vec(&skeleton.class_sets[0])?;
    let arch = serde_json::to_vec(&seq_cfg.arch)?;
    let init = serde_json::to_vec(&seq_cfg.initial)?;
    Ok(sha256_hex(&[b"initial-v1", dataset_digest.as_bytes(), &first, &arch, &init]))
}

fn write_log(log: &StepLog, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&log.columns)?;
    for row in &log.rows {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::io("flushing log", e.into_error()))?;
    write_atomic(path, &bytes)
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    run_dir: PathBuf,
    manifest: RunManifest,
}

impl Runner<'_> {
    fn save_manifest(&self) -> Result<()> {
        write_atomic(&self.run_dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&self.manifest)?)
    }

    fn artifact(&mut self, path: &Path) {
        let rel = path.strip_prefix(&self.run_dir).unwrap_or(path).to_string_lossy().into_owned();
        if !self.manifest.artifacts.contains(&rel) {
            self.manifest.artifacts.push(rel);
        }
    }

    fn finish_stage(&mut self, entry: StageEntry) -> Result<()> {
        self.manifest.last_completed_stage = Some(format!("seed {} task {}", entry.seed, entry.task));
        self.manifest.stages.push(entry);
        self.save_manifest()
    }

    fn initial_model(&mut self, ds: &Dataset, seq: &TaskSequence, seq_cfg: &SequenceConfig, seed: u64) -> Result<(Classifier, bool)> {
        let key = initial_cache_key(&ds.digest(), &seq.skeleton(), seq_cfg)?;
        let path = self.cfg.output_dir.join("cache").join("initial").join(format!("{key}.ckpt"));
        if path.exists() {
            match load_classifier(&path) {
                Ok((model, header)) if header.config_hash == key => {
                    log::info!("seed {seed}: initial model cache hit {}", path.display());
                    return Ok((model, true));
                }
                Ok(_) => log::warn!("{} carries a different key; retraining", path.display()),
                Err(e) => log::warn!("unreadable cached model {}: {e}; retraining", path.display()),
            }
        }
        log::info!("seed {seed}: training initial model");
        let (model, _) = train_initial(&seq_cfg.arch, &seq.tasks[0], &seq_cfg.initial)?;
        save_classifier(&model, &key, &path)?;
        Ok((model, false))
    }

    fn cached_stage(&self, summary_path: &Path, ckpt: &Path, key: &str) -> Option<(Classifier, StageSummary)> {
        let text = fs::read_to_string(summary_path).ok()?;
        let summary: StageSummary = serde_json::from_str(&text).ok()?;
        if summary.stage_key != key || read_header(ckpt).ok()?.config_hash != key {
            return None;
        }
        let (model, _) = load_classifier(ckpt).ok()?;
        (model.digest() == summary.classifier_digest).then_some((model, summary))
    }

    fn run_seed(&mut self, ds: &Dataset, seed: u64) -> Result<Vec<TaskRecord>> {
        let skeleton = split_classes(ds.num_classes(), self.cfg.protocol, seed)?;
        let seq = materialize_tasks(ds, &skeleton)?;
        let seq_cfg = self.cfg.sequence_for(seed);
        let seed_dir = self.run_dir.join(format!("seed-{seed}"));
        let seq_path = seed_dir.join("sequence.json");
        write_atomic(&seq_path, skeleton.to_json()?.as_bytes())?;
        self.artifact(&seq_path);

        let (initial, hit) = self.initial_model(ds, &seq, &seq_cfg, seed)?;
        let init_digest = initial.digest();
        let first = seed_dir.join("task-1.ckpt");
        save_classifier(&initial, &initial_cache_key(&ds.digest(), &skeleton, &seq_cfg)?, &first)?;
        self.artifact(&first);
        self.manifest.initial_checkpoints.insert(seed, init_digest.clone());
        let mut records = vec![evaluate_after_task(&initial, &seq, 0)?];
        self.finish_stage(StageEntry {
            seed,
            task: 1,
            cache_hit: hit,
            recording_seconds: 0.0,
            training_seconds: 0.0,
            classifier_digest: init_digest,
            generator_digest: None,
        })?;

        let basis = self.cfg.stage_basis();
        let mut current = initial;
        for t in 1..seq.len() {
            let n = t + 1;
            let key = sha256_hex(&[b"stage-v1", basis.as_bytes(), &seed.to_le_bytes(), &(t as u64).to_le_bytes()]);
            let ckpt = seed_dir.join(format!("task-{n}.ckpt"));
            let summary_path = seed_dir.join(format!("stage-{n}.json"));
            let gen_path = seed_dir.join(format!("generator-{n}.ckpt"));
            let rec_log = seed_dir.join(format!("recording-{n}.csv"));
            let train_log = seed_dir.join(format!("training-{n}.csv"));
            if let Some((model, summary)) = self.cached_stage(&summary_path, &ckpt, &key) {
                log::info!("seed {seed} task {n}: cache hit");
                for p in [&ckpt, &summary_path, &train_log] {
                    self.artifact(p);
                }
                if summary.generator_digest.is_some() {
                    self.artifact(&gen_path);
                    self.artifact(&rec_log);
                }
                self.finish_stage(StageEntry {
                    seed,
                    task: n,
                    cache_hit: true,
                    recording_seconds: summary.recording_seconds,
                    training_seconds: summary.training_seconds,
                    classifier_digest: summary.classifier_digest.clone(),
                    generator_digest: summary.generator_digest.clone(),
                })?;
                records.push(summary.record);
                current = model;
                continue;
            }
            let step = run_step(&current, &seq, t, &seq_cfg)?;
            let report = &step.report;
            if let (Some(g), Some(log)) = (&step.generator, &report.recording_log) {
                save_generator(g, &key, &gen_path)?;
                write_log(log, &rec_log)?;
                self.artifact(&gen_path);
                self.artifact(&rec_log);
            }
            write_log(&report.training_log, &train_log)?;
            let summary = StageSummary {
                seed,
                task: n,
                stage_key: key.clone(),
                method: self.cfg.method.to_string(),
                recording_steps: report.recording_log.as_ref().map_or(0, StepLog::len),
                training_steps: report.training_log.len(),
                final_recording: report.recording_log.as_ref().and_then(StepLog::last),
                final_training: report.training_log.last(),
                recording_seconds: report.recording_seconds,
                training_seconds: report.training_seconds,
                classifier_digest: report.classifier_digest.clone(),
                generator_digest: report.generator_digest.clone(),
                teacher_digest: report.teacher_digest.clone(),
                record: step.record.clone(),
            };
            // The checkpoint goes last: its presence with a matching key marks the stage done.
            write_atomic(&summary_path, &serde_json::to_vec_pretty(&summary)?)?;
            save_classifier(&step.model, &key, &ckpt)?;
            for p in [&ckpt, &summary_path, &train_log] {
                self.artifact(p);
            }
            self.finish_stage(StageEntry {
                seed,
                task: n,
                cache_hit: false,
                recording_seconds: report.recording_seconds,
                training_seconds: report.training_seconds,
                classifier_digest: report.classifier_digest.clone(),
                generator_digest: report.generator_digest.clone(),
            })?;
            records.push(step.record);
            current = step.model;
        }
        Ok(records)
    }

    fn execute(&mut self, ds: &Dataset) -> Result<()> {
        let config_path = self.run_dir.join("config.toml");
        write_atomic(&config_path, self.cfg.to_text().as_bytes())?;
        self.artifact(&config_path);
        let mut runs = Vec::new();
        for &seed in &self.cfg.seeds {
            let started = Instant::now();
            runs.push(self.run_seed(ds, seed)?);
            log::info!("seed {seed} finished in {:.1}s", started.elapsed().as_secs_f64());
        }
        let table = MetricsTable::new(&self.cfg.method.to_string(), self.cfg.seeds.clone(), runs)?;
        for &seed in &self.cfg.seeds {
            let mut buf = Vec::new();
            table.write_seed_csv(seed, &mut buf)?;
            let p = self.run_dir.join(format!("metrics-seed-{seed}.csv"));
            write_atomic(&p, &buf)?;
            self.artifact(&p);
        }
        let mut buf = Vec::new();
        table.write_csv(&mut buf)?;
        let p = self.run_dir.join(METRICS_FILE);
        write_atomic(&p, &buf)?;
        self.artifact(&p);
        let p = self.run_dir.join("metrics.json");
        write_atomic(&p, &serde_json::to_vec_pretty(&table)?)?;
        self.artifact(&p);
        let missing: Vec<String> =
            self.manifest.artifacts.iter().filter(|a| !self.run_dir.join(a).exists()).cloned().collect();
        if !missing.is_empty() {
            return Err(HarnessError::io(
                format!("artifacts missing at completion: {missing:?}"),
                std::io::Error::from(std::io::ErrorKind::NotFound),
            ));
        }
        Ok(())
    }
}

/// Runs every seed of `cfg` and returns the completed manifest. On failure
/// the manifest is left with status `failed` and the last completed stage.
pub fn run(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let run_dir = cfg.run_dir();
    let ds = load_experiment_dataset(cfg)?;
    let manifest = RunManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        metrics_schema_version: genreplay_core::evaluation::METRICS_SCHEMA_VERSION,
        status: RunStatus::Running,
        config_hash: cfg.config_hash(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        execution_mode: "deterministic".to_string(),
        method: cfg.method.to_string(),
        protocol: cfg.protocol.to_string(),
        dataset_name: ds.name.clone(),
        dataset_digest: ds.digest(),
        seeds: cfg.seeds.clone(),
        config: cfg.resolved_strings(),
        initial_checkpoints: BTreeMap::new(),
        stages: Vec::new(),
        last_completed_stage: None,
        error: None,
        artifacts: Vec::new(),
    };
    let mut runner = Runner { cfg, run_dir, manifest };
    runner.save_manifest()?;
    match runner.execute(&ds) {
        Ok(()) => {
            runner.manifest.status = RunStatus::Complete;
            runner.save_manifest()?;
            Ok(runner.manifest)
        }
        Err(e) => {
            runner.manifest.status = RunStatus::Failed;
            runner.manifest.error = Some(json!({ "kind": e.kind(), "message": e.to_string() }).to_string());
            runner.save_manifest()?;
            Err(e)
        }
    }
}
