use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Var};
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::optim::{Optimizer, OptimizerSpec, StepDecay};
use crate::tensor::Tensor;

/// Independent 64-bit seed for a named sub-stream of `base`.
pub fn sub_seed(base: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Random horizontal flip and zero-padded random crop of real images.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Augment {
    pub flip: bool,
    pub crop_pad: usize,
}

impl Augment {
    pub fn is_identity(&self) -> bool {
        !self.flip && self.crop_pad == 0
    }

    pub fn apply<R: Rng + ?Sized>(&self, images: &Tensor, rng: &mut R) -> Tensor {
        if self.is_identity() {
            return images.clone();
        }
        let s = images.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let p = self.crop_pad as i64;
        let mut out = Tensor::zeros(s);
        for i in 0..n {
            let flip = self.flip && rng.random_bool(0.5);
            let (dy, dx) = if p > 0 { (rng.random_range(-p..=p), rng.random_range(-p..=p)) } else { (0, 0) };
            let src = images.row(i);
            let dst = &mut out.data_mut()[i * c * h * w..(i + 1) * c * h * w];
            for ch in 0..c {
                for y in 0..h {
                    let sy = y as i64 + dy;
                    if sy < 0 || sy >= h as i64 {
                        continue;
                    }
                    for x in 0..w {
                        let xx = if flip { w - 1 - x } else { x };
                        let sx = xx as i64 + dx;
                        if sx < 0 || sx >= w as i64 {
                            continue;
                        }
                        dst[(ch * h + y) * w + x] = src[(ch * h + sy as usize) * w + sx as usize];
                    }
                }
            }
        }
        out
    }
}

/// Settings shared by every classifier-training loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerSpec,
    pub schedule: StepDecay,
    pub augment: Augment,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 128,
            learning_rate: 0.01,
            optimizer: OptimizerSpec::classifier_default(),
            schedule: StepDecay::default(),
            augment: Augment::default(),
            seed: 0,
        }
    }
}

impl ClassifierTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        self.optimizer.validate()
    }
}

/// Shuffled mini-batches of `0..n`; a trailing batch of one example is folded
/// into its predecessor so every batch has usable batch statistics.
pub(crate) fn epoch_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

pub(crate) fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    let full = n.div_ceil(batch_size);
    if full > 1 && n % batch_size == 1 {
        full - 1
    } else {
        full
    }
}

/// Rows of named per-step values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl StepLog {
    pub fn new(columns: &[&str]) -> Self {
        Self { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn last(&self) -> Option<BTreeMap<String, f64>> {
        let r = self.rows.last()?;
        Some(self.columns.iter().cloned().zip(r.iter().copied()).collect())
    }
}

pub struct TrainOutcome {
    pub model: Classifier,
    pub log: StepLog,
}

/// The old classifier with a fresh head of `k_new` classes appended.
pub fn expanded_student(old: &Classifier, k_new: usize, seed: u64) -> Result<Classifier> {
    let mut s = old.clone();
    s.expand_head(k_new, sub_seed(seed, "head"))?;
    Ok(s)
}

pub(crate) fn collect_grads(grads: &Gradients, vars: &[Var], params: &[&Tensor]) -> Vec<Tensor> {
    vars.iter()
        .zip(params)
        .map(|(v, p)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect()
}

/// One optimizer update of `model` from tape gradients.
pub(crate) fn update_classifier(
    model: &mut Classifier,
    grads: &Gradients,
    vars: &[Var],
    opt: &mut Optimizer,
    lr: f64,
) -> Result<()> {
    let g = collect_grads(grads, vars, &model.params());
    let mut params = model.params_mut();
    opt.step(&mut params, &g, lr)
}

pub(crate) fn non_finite(step: usize, values: BTreeMap<String, f64>) -> Error {
    Error::NonFinite { step, breakdown: values }
}

/// Within-head labels for `labels` given the head's ordered class set.
pub(crate) fn head_labels(labels: &[usize], class_set: &[usize]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|l| class_set.iter().position(|c| c == l).ok_or(Error::UnknownClass(*l)))
        .collect()
}
