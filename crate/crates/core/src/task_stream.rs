//! Class partitioning into task sequences and the bookkeeping between global
//! class ids and per-head columns.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabeledSet};
use crate::error::{Error, Result};

/// How the class universe is cut into tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "parts", rename_all = "kebab-case")]
pub enum Protocol {
    /// `P` tasks of `num_classes / P` classes each.
    EqualPhase(usize),
    /// One task with half the classes, then `P` equal tasks over the rest.
    HalfThenEqual(usize),
}

impl Protocol {
    /// Number of tasks this protocol produces.
    pub fn phases(&self) -> usize {
        match *self {
            Protocol::EqualPhase(p) => p,
            Protocol::HalfThenEqual(p) => p + 1,
        }
    }

    pub fn sizes(&self, num_classes: usize) -> Result<Vec<usize>> {
        let bad = |why: &str| Error::Config(format!("protocol {self}: {why} (num_classes = {num_classes})"));
        match *self {
            Protocol::EqualPhase(p) => {
                if p < 2 {
                    return Err(bad("needs at least 2 phases"));
                }
                if num_classes == 0 || num_classes % p != 0 {
                    return Err(bad("class count not divisible by the phase count"));
                }
                Ok(vec![num_classes / p; p])
            }
            Protocol::HalfThenEqual(p) => {
                if p < 2 {
                    return Err(bad("needs at least 2 phases after the first half"));
                }
                if num_classes == 0 || num_classes % 2 != 0 || (num_classes / 2) % p != 0 {
                    return Err(bad("class count not divisible into a half plus equal phases"));
                }
                let mut v = vec![num_classes / 2];
                v.extend(std::iter::repeat_n(num_classes / 2 / p, p));
                Ok(v)
            }
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::EqualPhase(p) => write!(f, "equal-phase:{p}"),
            Protocol::HalfThenEqual(p) => write!(f, "half-then-equal:{p}"),
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;

    /// Accepts `equal-phase:P`, `half-then-equal:P` and bare `half-then-equal` (P = 5).
    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (s.trim(), None),
        };
        let parts = |default: Option<usize>| -> Result<usize> {
            match arg {
                Some(a) => a.parse().map_err(|_| Error::Config(format!("protocol {s:?}: bad phase count {a:?}"))),
                None => default.ok_or_else(|| Error::Config(format!("protocol {s:?} needs a phase count"))),
            }
        };
        match name {
            "equal-phase" => Ok(Protocol::EqualPhase(parts(None)?)),
            "half-then-equal" => Ok(Protocol::HalfThenEqual(parts(Some(5))?)),
            _ => Err(Error::Config(format!("unknown protocol {s:?}"))),
        }
    }
}

/// Ordered class sets, before any examples are attached.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceSkeleton {
    pub protocol_name: String,
    pub seed: u64,
    pub class_sets: Vec<Vec<usize>>,
}

impl SequenceSkeleton {
    /// A skeleton with hand-picked class sets, checked for emptiness and overlap.
    pub fn explicit(name: &str, seed: u64, class_sets: Vec<Vec<usize>>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for (t, set) in class_sets.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::Config(format!("task {t} has no classes")));
            }
            for &c in set {
                if !seen.insert(c) {
                    return Err(Error::Config(format!("class {c} appears in more than one task")));
                }
            }
        }
        if class_sets.is_empty() {
            return Err(Error::Config("a sequence needs at least one task".into()));
        }
        Ok(Self { protocol_name: name.to_string(), seed, class_sets })
    }

    pub fn num_tasks(&self) -> usize {
        self.class_sets.len()
    }

    pub fn all_classes(&self) -> Vec<usize> {
        self.class_sets.iter().flatten().copied().collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Shuffles `0..num_classes` with `seed` and cuts the result contiguously.
pub fn split_classes(num_classes: usize, protocol: Protocol, seed: u64) -> Result<SequenceSkeleton> {
    let sizes = protocol.sizes(num_classes)?;
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut class_sets = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for k in sizes {
        class_sets.push(order[start..start + k].to_vec());
        start += k;
    }
    Ok(SequenceSkeleton { protocol_name: protocol.to_string(), seed, class_sets })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub task_index: usize,
    pub class_set: Vec<usize>,
    pub train: LabeledSet,
    pub eval: LabeledSet,
}

impl TaskSpec {
    pub fn num_classes(&self) -> usize {
        self.class_set.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSequence {
    pub tasks: Vec<TaskSpec>,
    pub protocol_name: String,
    pub seed: u64,
}

impl TaskSequence {
    pub fn skeleton(&self) -> SequenceSkeleton {
        SequenceSkeleton {
            protocol_name: self.protocol_name.clone(),
            seed: self.seed,
            class_sets: self.tasks.iter().map(|t| t.class_set.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Label map covering tasks `0..=upto`.
    pub fn label_map(&self, upto: usize) -> Result<LabelMap> {
        let mut m = LabelMap::default();
        for t in self.tasks.iter().take(upto + 1) {
            m.register_task(&t.class_set)?;
        }
        Ok(m)
    }

    /// Union of eval splits of tasks `0..=upto`.
    pub fn seen_eval(&self, upto: usize) -> Result<LabeledSet> {
        let parts: Vec<&LabeledSet> = self.tasks.iter().take(upto + 1).map(|t| &t.eval).collect();
        LabeledSet::concat(&parts)
    }
}

/// Attaches to each task exactly the examples whose labels are in its class set.
pub fn materialize_tasks(dataset: &Dataset, skeleton: &SequenceSkeleton) -> Result<TaskSequence> {
    let train_counts = dataset.train.class_counts();
    let missing: Vec<usize> = skeleton
        .all_classes()
        .into_iter()
        .filter(|c| !train_counts.contains_key(c))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingClasses(missing));
    }
    let tasks = skeleton
        .class_sets
        .iter()
        .enumerate()
        .map(|(i, set)| {
            let classes: BTreeSet<usize> = set.iter().copied().collect();
            TaskSpec {
                task_index: i,
                class_set: set.clone(),
                train: dataset.train.filter_classes(&classes),
                eval: dataset.eval.filter_classes(&classes),
            }
        })
        .collect();
    Ok(TaskSequence { tasks, protocol_name: skeleton.protocol_name.clone(), seed: skeleton.seed })
}

/// Bijection between global class ids and `(task, offset within head)`,
/// following registration order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    global_to_head: BTreeMap<usize, (usize, usize)>,
    head_offsets: Vec<usize>,
    /// Global id of each classifier column.
    columns: Vec<usize>,
}

impl LabelMap {
    pub fn register_task(&mut self, class_set: &[usize]) -> Result<usize> {
        if class_set.is_empty() {
            return Err(Error::Config("cannot register an empty class set".into()));
        }
        if let Some(&c) = class_set.iter().find(|c| self.global_to_head.contains_key(c)) {
            return Err(Error::Config(format!("class {c} already registered")));
        }
        let task = self.head_offsets.len();
        self.head_offsets.push(self.columns.len());
        for (offset, &c) in class_set.iter().enumerate() {
            if self.global_to_head.insert(c, (task, offset)).is_some() {
                return Err(Error::Config(format!("class {c} repeated within a task")));
            }
            self.columns.push(c);
        }
        Ok(task)
    }

    /// `(task_index, offset within that task's head)`.
    pub fn map_label(&self, global: usize) -> Result<(usize, usize)> {
        self.global_to_head.get(&global).copied().ok_or(Error::UnknownClass(global))
    }

    /// Column of `global` in the concatenated logits.
    pub fn column(&self, global: usize) -> Result<usize> {
        let (t, o) = self.map_label(global)?;
        Ok(self.head_offsets[t] + o)
    }

    pub fn columns_of(&self, labels: &[usize]) -> Result<Vec<usize>> {
        labels.iter().map(|&l| self.column(l)).collect()
    }

    pub fn global_at(&self, column: usize) -> Option<usize> {
        self.columns.get(column).copied()
    }

    pub fn head_offsets(&self) -> &[usize] {
        &self.head_offsets
    }

    pub fn num_tasks(&self) -> usize {
        self.head_offsets.len()
    }

    pub fn num_classes(&self) -> usize {
        self.columns.len()
    }

    /// Column range `[start, end)` of task `t`'s head.
    pub fn head_range(&self, t: usize) -> std::ops::Range<usize> {
        let start = self.head_offsets[t];
        let end = self.head_offsets.get(t + 1).copied().unwrap_or(self.columns.len());
        start..end
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic, SyntheticSpec};

    #[test]
    fn protocol_sizes() {
        let s = split_classes(100, Protocol::EqualPhase(5), 3).unwrap();
        assert_eq!(s.class_sets.iter().map(Vec::len).collect::<Vec<_>>(), vec![20; 5]);
        let s = split_classes(100, Protocol::HalfThenEqual(5), 3).unwrap();
        assert_eq!(s.class_sets.iter().map(Vec::len).collect::<Vec<_>>(), vec![50, 10, 10, 10, 10, 10]);
        let s = split_classes(10, Protocol::EqualPhase(2), 0).unwrap();
        assert_eq!(s.class_sets.iter().map(Vec::len).collect::<Vec<_>>(), vec![5, 5]);
    }

    #[test]
    fn indivisible_names_protocol() {
        let err = split_classes(10, Protocol::EqualPhase(3), 0).unwrap_err();
        assert!(err.to_string().contains("equal-phase:3"), "{err}");
        assert!(split_classes(10, Protocol::EqualPhase(1), 0).is_err());
    }

    #[test]
    fn protocol_parsing() {
        assert_eq!("equal-phase:10".parse::<Protocol>().unwrap(), Protocol::EqualPhase(10));
        assert_eq!("half-then-equal".parse::<Protocol>().unwrap(), Protocol::HalfThenEqual(5));
        assert!("thirds".parse::<Protocol>().is_err());
        assert!("equal-phase".parse::<Protocol>().is_err());
    }

    #[test]
    fn materialize_filters_by_label() {
        let ds = synthetic(&SyntheticSpec { train_per_class: 50, eval_per_class: 5, ..SyntheticSpec::desk(2, 1) }).unwrap();
        let seq = materialize_tasks(&ds, &split_classes(2, Protocol::EqualPhase(2), 4).unwrap()).unwrap();
        for t in &seq.tasks {
            assert_eq!(t.train.len(), 50);
            assert!(t.train.labels().iter().all(|l| t.class_set.contains(l)));
        }
    }

    #[test]
    fn missing_class_is_named() {
        let ds = synthetic(&SyntheticSpec { train_per_class: 2, eval_per_class: 1, ..SyntheticSpec::desk(10, 1) }).unwrap();
        let keep: BTreeSet<usize> = (0..10).filter(|&c| c != 7).collect();
        let holed = Dataset { train: ds.train.filter_classes(&keep), ..ds };
        match materialize_tasks(&holed, &split_classes(10, Protocol::EqualPhase(2), 0).unwrap()) {
            Err(Error::MissingClasses(v)) => assert_eq!(v, vec![7]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn label_map_offsets_and_round_trip() {
        let skel = split_classes(100, Protocol::EqualPhase(5), 11).unwrap();
        let mut m = LabelMap::default();
        for set in &skel.class_sets {
            m.register_task(set).unwrap();
        }
        assert_eq!(m.map_label(skel.class_sets[0][0]).unwrap(), (0, 0));
        assert_eq!(m.map_label(skel.class_sets[1][0]).unwrap(), (1, 0));
        assert_eq!(m.head_offsets(), &[0, 20, 40, 60, 80]);
        for g in 0..100 {
            assert_eq!(m.global_at(m.column(g).unwrap()), Some(g));
        }
        assert!(matches!(m.map_label(100), Err(Error::UnknownClass(100))));
        assert!(m.register_task(&[skel.class_sets[0][3]]).is_err());
    }
}
