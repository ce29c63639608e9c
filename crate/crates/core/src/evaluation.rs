//! Top-1 accuracy over class scopes, per-class breakdowns, projected
//! probabilities of new images on old classes, forgetting reports and the
//! per-task metrics table.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::task_stream::{LabelMap, TaskSequence};
use crate::tensor::Tensor;

/// Version of the metrics CSV column set.
pub const METRICS_SCHEMA_VERSION: u32 = 1;
pub const METRICS_COLUMNS: [&str; 9] =
    ["schema_version", "method", "seed", "task", "all_seen", "old_only", "new_only", "examples", "correct"];

/// Correct/total counts of one class or scope.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    pub fn percent(&self) -> Option<f64> {
        (self.total > 0).then(|| 100.0 * self.correct as f64 / self.total as f64)
    }

    fn add(&mut self, hit: bool) {
        self.total += 1;
        self.correct += hit as usize;
    }
}

/// Predicted global class of every row, taking the argmax over the scope's
/// columns only (ties go to the lowest column).
pub fn predict_in_scope(logits: &Tensor, scope: &[usize], map: &LabelMap) -> Result<Vec<usize>> {
    let mut cols: Vec<(usize, usize)> = scope.iter().map(|&g| map.column(g).map(|c| (c, g))).collect::<Result<_>>()?;
    cols.sort_unstable();
    if cols.is_empty() {
        return Err(Error::UndefinedMetric("empty class scope".into()));
    }
    if let Some(&(c, _)) = cols.iter().find(|(c, _)| *c >= logits.row_len()) {
        return Err(Error::Dimension(format!("column {c} outside logits of width {}", logits.row_len())));
    }
    Ok((0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = cols[0];
            for &(c, g) in &cols[1..] {
                if row[c] > row[best.0] {
                    best = (c, g);
                }
            }
            best.1
        })
        .collect())
}

fn check_labels(labels: &[usize], scope: &[usize]) -> Result<()> {
    let s: BTreeSet<usize> = scope.iter().copied().collect();
    if let Some(l) = labels.iter().find(|l| !s.contains(l)) {
        return Err(Error::Config(format!("label {l} is outside the evaluation scope")));
    }
    Ok(())
}

/// Per-class tallies from precomputed logits.
pub fn tally_from_logits(
    logits: &Tensor,
    labels: &[usize],
    scope: &[usize],
    map: &LabelMap,
) -> Result<BTreeMap<usize, Tally>> {
    if labels.len() != logits.rows() {
        return Err(Error::Dimension(format!("{} labels for {} logit rows", labels.len(), logits.rows())));
    }
    check_labels(labels, scope)?;
    let pred = predict_in_scope(logits, scope, map)?;
    let mut t: BTreeMap<usize, Tally> = BTreeMap::new();
    for (p, &l) in pred.iter().zip(labels) {
        t.entry(l).or_default().add(*p == l);
    }
    Ok(t)
}

fn overall(t: &BTreeMap<usize, Tally>) -> Tally {
    t.values().fold(Tally::default(), |a, b| Tally { correct: a.correct + b.correct, total: a.total + b.total })
}

pub fn top1_from_logits(logits: &Tensor, labels: &[usize], scope: &[usize], map: &LabelMap) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::UndefinedMetric("top-1 of an empty evaluation set".into()));
    }
    overall(&tally_from_logits(logits, labels, scope, map)?)
        .percent()
        .ok_or_else(|| Error::UndefinedMetric("no examples".into()))
}

/// Percentage of `set` whose argmax over the scope columns is the true label.
pub fn top1(model: &Classifier, set: &LabeledSet, scope: &[usize], map: &LabelMap) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::UndefinedMetric("top-1 of an empty evaluation set".into()));
    }
    top1_from_logits(&model.logits(set.images())?, set.labels(), scope, map)
}

/// Per-class accuracy; scope classes without eval examples are listed in
/// `omitted` rather than reported.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PerClass {
    pub accuracy: BTreeMap<usize, f64>,
    pub tallies: BTreeMap<usize, Tally>,
    pub omitted: Vec<usize>,
}

pub fn per_class_from_logits(logits: &Tensor, labels: &[usize], scope: &[usize], map: &LabelMap) -> Result<PerClass> {
    let tallies = tally_from_logits(logits, labels, scope, map)?;
    let omitted: Vec<usize> = scope.iter().copied().filter(|c| !tallies.contains_key(c)).collect();
    for c in &omitted {
        log::warn!("class {c} has no evaluation examples; omitted from per-class accuracy");
    }
    let accuracy = tallies.iter().filter_map(|(&c, t)| t.percent().map(|p| (c, p))).collect();
    Ok(PerClass { accuracy, tallies, omitted })
}

pub fn per_class_accuracy(model: &Classifier, set: &LabeledSet, scope: &[usize], map: &LabelMap) -> Result<PerClass> {
    if set.is_empty() {
        return Ok(PerClass { omitted: scope.to_vec(), ..PerClass::default() });
    }
    per_class_from_logits(&model.logits(set.images())?, set.labels(), scope, map)
}

/// Mean over rows of the softmax restricted to (and renormalised over) `old_columns`.
pub fn projected_from_logits(logits: &Tensor, old_columns: &[usize]) -> Result<Vec<f64>> {
    if logits.rows() == 0 {
        return Err(Error::UndefinedMetric("projected probabilities of an empty image set".into()));
    }
    if let Some(&c) = old_columns.iter().find(|&&c| c >= logits.row_len()) {
        return Err(Error::Dimension(format!("column {c} outside logits of width {}", logits.row_len())));
    }
    let k = old_columns.len();
    let mut sub = Vec::with_capacity(logits.rows() * k);
    for r in 0..logits.rows() {
        let row = logits.row(r);
        sub.extend(old_columns.iter().map(|&c| row[c]));
    }
    let probs = Tensor::new(vec![logits.rows(), k], sub)?.softmax_rows();
    let n = logits.rows() as f64;
    Ok((0..k).map(|j| (0..logits.rows()).map(|r| probs.row(r)[j]).sum::<f64>() / n).collect())
}

pub fn projected_probabilities(model: &Classifier, images: &Tensor, old_columns: &[usize]) -> Result<Vec<f64>> {
    if images.rows() == 0 {
        return Err(Error::UndefinedMetric("projected probabilities of an empty image set".into()));
    }
    projected_from_logits(&model.logits(images)?, old_columns)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingRow {
    pub class: usize,
    pub before: f64,
    pub after: f64,
    pub delta: f64,
    pub group: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingReport {
    /// Sorted by delta, largest drop first.
    pub rows: Vec<ForgettingRow>,
    /// Mean delta of each group's members.
    pub groups: BTreeMap<String, f64>,
}

impl ForgettingReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["class", "before", "after", "delta", "group"]).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.class.to_string(),
                r.before.to_string(),
                r.after.to_string(),
                r.delta.to_string(),
                r.group.clone().unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Per-class `after − before`, sorted by drop, with optional group means.
pub fn forgetting_report(
    before: &BTreeMap<usize, f64>,
    after: &BTreeMap<usize, f64>,
    groups: Option<&BTreeMap<usize, String>>,
) -> Result<ForgettingReport> {
    let a: BTreeSet<usize> = before.keys().copied().collect();
    let b: BTreeSet<usize> = after.keys().copied().collect();
    let diff: Vec<usize> = a.symmetric_difference(&b).copied().collect();
    if !diff.is_empty() {
        return Err(Error::KeyMismatch(diff));
    }
    let mut rows: Vec<ForgettingRow> = before
        .iter()
        .map(|(&class, &bv)| {
            let av = after[&class];
            ForgettingRow {
                class,
                before: bv,
                after: av,
                delta: av - bv,
                group: groups.and_then(|g| g.get(&class).cloned()),
            }
        })
        .collect();
    rows.sort_by(|x, y| x.delta.total_cmp(&y.delta).then(x.class.cmp(&y.class)));
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in &rows {
        if let Some(g) = &r.group {
            let e = sums.entry(g.clone()).or_default();
            e.0 += r.delta;
            e.1 += 1;
        }
    }
    let groups = sums.into_iter().map(|(g, (s, n))| (g, s / n as f64)).collect();
    Ok(ForgettingReport { rows, groups })
}

/// Accuracy after learning task `task` (0-based).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task: usize,
    /// All seen classes, argmax over all seen columns.
    pub all_seen: f64,
    /// Classes of earlier tasks, argmax over all seen columns (absent for the first task).
    pub old_only: Option<f64>,
    /// Classes of the current task, argmax over all seen columns.
    pub new_only: f64,
    /// Per seen task, accuracy with the argmax restricted to that task's classes.
    pub own_scope: Vec<f64>,
    pub all_tally: Tally,
    pub old_tally: Tally,
    pub new_tally: Tally,
    pub per_class: BTreeMap<usize, f64>,
}

/// Evaluates `model` after task `upto` on the union of seen eval splits.
pub fn evaluate_after_task(model: &Classifier, seq: &TaskSequence, upto: usize) -> Result<TaskRecord> {
    let map = seq.label_map(upto)?;
    let scope: Vec<usize> = seq.tasks[..=upto].iter().flat_map(|t| t.class_set.iter().copied()).collect();
    let eval = seq.seen_eval(upto)?;
    if eval.is_empty() {
        return Err(Error::UndefinedMetric(format!("no eval examples for tasks 0..={upto}")));
    }
    let logits = model.logits(eval.images())?.slice_cols(0, map.num_classes());
    let pc = per_class_from_logits(&logits, eval.labels(), &scope, &map)?;
    let current: BTreeSet<usize> = seq.tasks[upto].class_set.iter().copied().collect();
    let mut old_tally = Tally::default();
    let mut new_tally = Tally::default();
    for (c, t) in &pc.tallies {
        let dst = if current.contains(c) { &mut new_tally } else { &mut old_tally };
        dst.correct += t.correct;
        dst.total += t.total;
    }
    let all_tally = overall(&pc.tallies);
    let mut own_scope = Vec::with_capacity(upto + 1);
    let mut start = 0;
    for t in &seq.tasks[..=upto] {
        let n = t.eval.len();
        let idx: Vec<usize> = (start..start + n).collect();
        start += n;
        let acc = if n == 0 {
            f64::NAN
        } else {
            top1_from_logits(&logits.select_rows(&idx), t.eval.labels(), &t.class_set, &map)?
        };
        own_scope.push(acc);
    }
    Ok(TaskRecord {
        task: upto,
        all_seen: all_tally.percent().expect("non-empty eval set"),
        old_only: old_tally.percent(),
        new_only: new_tally.percent().ok_or_else(|| Error::UndefinedMetric(format!("task {upto} has no eval examples")))?,
        own_scope,
        all_tally,
        old_tally,
        new_tally,
        per_class: pc.accuracy,
    })
}

/// Unweighted mean of per-class accuracies.
pub fn average_class_top1(per_class: &BTreeMap<usize, f64>) -> Option<f64> {
    (!per_class.is_empty()).then(|| per_class.values().sum::<f64>() / per_class.len() as f64)
}

/// Mean over tasks 2..N of `ours[t] − other[t]`; `None` with fewer than two tasks.
pub fn average_improvement(ours: &[f64], other: &[f64]) -> Option<f64> {
    let n = ours.len().min(other.len());
    if n < 2 {
        return None;
    }
    Some((1..n).map(|t| ours[t] - other[t]).sum::<f64>() / (n - 1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanRow {
    pub task: usize,
    pub all_seen: f64,
    pub old_only: Option<f64>,
    pub new_only: f64,
}

/// Per-seed task records of one method plus their mean over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub schema_version: u32,
    pub method: String,
    pub seeds: Vec<u64>,
    pub runs: Vec<Vec<TaskRecord>>,
    pub mean: Vec<MeanRow>,
}

impl MetricsTable {
    pub fn new(method: &str, seeds: Vec<u64>, runs: Vec<Vec<TaskRecord>>) -> Result<Self> {
        if seeds.len() != runs.len() || runs.is_empty() {
            return Err(Error::Config(format!("{} seeds for {} runs", seeds.len(), runs.len())));
        }
        let n = runs[0].len();
        if runs.iter().any(|r| r.len() != n) {
            return Err(Error::Config("runs cover different numbers of tasks".into()));
        }
        let k = runs.len() as f64;
        let mean = (0..n)
            .map(|t| {
                let olds: Vec<f64> = runs.iter().filter_map(|r| r[t].old_only).collect();
                MeanRow {
                    task: t,
                    all_seen: runs.iter().map(|r| r[t].all_seen).sum::<f64>() / k,
                    old_only: (olds.len() == runs.len()).then(|| olds.iter().sum::<f64>() / k),
                    new_only: runs.iter().map(|r| r[t].new_only).sum::<f64>() / k,
                }
            })
            .collect();
        Ok(Self { schema_version: METRICS_SCHEMA_VERSION, method: method.to_string(), seeds, runs, mean })
    }

    pub fn num_tasks(&self) -> usize {
        self.mean.len()
    }

    pub fn mean_all_seen(&self) -> Vec<f64> {
        self.mean.iter().map(|r| r.all_seen).collect()
    }

    fn opt(v: Option<f64>) -> String {
        v.map(|x| x.to_string()).unwrap_or_default()
    }

    /// One row per task per seed, then one `mean` row per task.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(METRICS_COLUMNS).map_err(csv_err)?;
        for (seed, run) in self.seeds.iter().zip(&self.runs) {
            for r in run {
                w.write_record([
                    self.schema_version.to_string(),
                    self.method.clone(),
                    seed.to_string(),
                    (r.task + 1).to_string(),
                    r.all_seen.to_string(),
                    Self::opt(r.old_only),
                    r.new_only.to_string(),
                    r.all_tally.total.to_string(),
                    r.all_tally.correct.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        for r in &self.mean {
            w.write_record([
                self.schema_version.to_string(),
                self.method.clone(),
                "mean".to_string(),
                (r.task + 1).to_string(),
                r.all_seen.to_string(),
                Self::opt(r.old_only),
                r.new_only.to_string(),
                String::new(),
                String::new(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Rows of one seed only, in the same format as [`MetricsTable::write_csv`].
    pub fn write_seed_csv<W: Write>(&self, seed: u64, out: W) -> Result<()> {
        let i = self
            .seeds
            .iter()
            .position(|&s| s == seed)
            .ok_or_else(|| Error::Config(format!("seed {seed} not in table")))?;
        let single = MetricsTable::new(&self.method, vec![seed], vec![self.runs[i].clone()])?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(METRICS_COLUMNS).map_err(csv_err)?;
        for r in &single.runs[0] {
            w.write_record([
                single.schema_version.to_string(),
                single.method.clone(),
                seed.to_string(),
                (r.task + 1).to_string(),
                r.all_seen.to_string(),
                Self::opt(r.old_only),
                r.new_only.to_string(),
                r.all_tally.total.to_string(),
                r.all_tally.correct.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}
