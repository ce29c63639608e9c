//! Straight-line reference implementations of the loss terms and the
//! closed-form examples checked against them. Shared by the loss-oracle tests
//! and the acceptance suite.
#![allow(dead_code)]

use genreplay_core::losses::recording::pair_diversity_with_pairs;
use genreplay_core::losses::{
    bn_alignment_loss, class_diversity_loss, cross_entropy_loss, inheritance_loss, kd_loss, lambda4, one_hot_loss,
    recording_loss, DistillConfig, GeneratedBatch, RecordingLossWeights,
};
use genreplay_core::model::BnStats;
use genreplay_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub mod reference {
    pub fn softmax(row: &[f64]) -> Vec<f64> {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|v| v / z).collect()
    }

    fn argmax(p: &[f64]) -> usize {
        let mut best = 0;
        for i in 1..p.len() {
            if p[i] > p[best] {
                best = i;
            }
        }
        best
    }

    pub fn one_hot(probs: &[Vec<f64>]) -> f64 {
        let mut total = 0.0;
        for p in probs {
            total += -p[argmax(p)].max(1e-12).ln();
        }
        total / probs.len() as f64
    }

    pub fn class_diversity(probs: &[Vec<f64>]) -> f64 {
        let k = probs[0].len();
        let mut mean = vec![0.0; k];
        for p in probs {
            for c in 0..k {
                mean[c] += p[c] / probs.len() as f64;
            }
        }
        let mut h = 0.0;
        for m in mean {
            if m > 0.0 {
                h -= m * m.ln();
            }
        }
        -h
    }

    pub fn bn_alignment(batch: &[(Vec<f64>, Vec<f64>)], stored: &[(Vec<f64>, Vec<f64>)]) -> f64 {
        let mut total = 0.0;
        for ((bm, bv), (sm, sv)) in batch.iter().zip(stored) {
            let dm: f64 = bm.iter().zip(sm).map(|(a, b)| (a - b) * (a - b)).sum();
            let dv: f64 = bv.iter().zip(sv).map(|(a, b)| (a - b) * (a - b)).sum();
            total += dm.sqrt() + dv.sqrt();
        }
        total
    }

    pub fn kl(p: &[f64], q: &[f64]) -> f64 {
        p.iter().zip(q).map(|(a, b)| if *a > 0.0 { a * (a / b).ln() } else { 0.0 }).sum()
    }

    pub fn pair_diversity(probs: &[Vec<f64>], pairs: &[(usize, usize)]) -> f64 {
        let mut total = 0.0;
        for &(i, j) in pairs {
            total += -0.5 * (kl(&probs[i], &probs[j]) + kl(&probs[j], &probs[i]));
        }
        total / pairs.len() as f64
    }

    pub fn cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
        let mut total = 0.0;
        for (row, &y) in logits.iter().zip(labels) {
            total -= softmax(row)[y].ln();
        }
        total / logits.len() as f64
    }

    pub fn kd(teacher: &[Vec<f64>], student: &[Vec<f64>], t: f64) -> f64 {
        let mut total = 0.0;
        for (a, b) in teacher.iter().zip(student) {
            let p = softmax(&a.iter().map(|v| v / t).collect::<Vec<_>>());
            let q = softmax(&b.iter().map(|v| v / t).collect::<Vec<_>>());
            for c in 0..p.len() {
                total -= p[c] * q[c].ln();
            }
        }
        total / teacher.len() as f64
    }

    pub fn entropy(p: &[f64]) -> f64 {
        -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
    }
}


pub fn tensor(rows: &[Vec<f64>]) -> Tensor {
    let cols = rows[0].len();
    Tensor::new(vec![rows.len(), cols], rows.concat()).unwrap()
}

pub fn probs_batch(rows: &[Vec<f64>]) -> GeneratedBatch {
    GeneratedBatch::from_probabilities(tensor(rows))
}

/// One closed-form value: the library result and the independent expectation.
pub struct Example {
    pub name: String,
    pub actual: f64,
    pub expected: f64,
}

impl Example {
    fn new(name: &str, actual: f64, expected: f64) -> Self {
        Self { name: name.to_string(), actual, expected }
    }

    /// Relative error, with an absolute floor of 1e-9 for zero expectations
    /// (probabilities are floored at 1e-12 before taking logs).
    pub fn holds(&self) -> bool {
        let diff = (self.actual - self.expected).abs();
        if self.expected == 0.0 {
            diff <= 1e-9
        } else {
            diff <= 1e-6 * self.expected.abs()
        }
    }
}

pub fn closed_form_examples() -> Vec<Example> {
    let mut out = Vec::new();
    let mut push = |name: &str, actual: f64, expected: f64| out.push(Example::new(name, actual, expected));

    let exact = vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]];
    push("one-hot: exact one-hot rows", one_hot_loss(&probs_batch(&exact)).unwrap(), reference::one_hot(&exact));
    let uniform20 = vec![vec![1.0 / 20.0; 20]; 3];
    push("one-hot: uniform over 20", one_hot_loss(&probs_batch(&uniform20)).unwrap(), reference::one_hot(&uniform20));
    push("one-hot reference: uniform over 20 is ln 20", reference::one_hot(&uniform20), 20f64.ln());
    let row = vec![vec![0.7, 0.2, 0.1]];
    push("one-hot: (0.7, 0.2, 0.1)", one_hot_loss(&probs_batch(&row)).unwrap(), -(0.7f64.ln()));

    push("class diversity: uniform over 20", class_diversity_loss(&probs_batch(&uniform20)).unwrap(), -(20f64.ln()));
    let same = vec![vec![0.0, 1.0, 0.0]; 5];
    push("class diversity: one class only", class_diversity_loss(&probs_batch(&same)).unwrap(), reference::class_diversity(&same));
    let two = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    push("class diversity: two balanced classes", class_diversity_loss(&probs_batch(&two)).unwrap(), -(2f64.ln()));

    let st = |m: Vec<f64>, v: Vec<f64>| BnStats { mean: m, var: v };
    let stored = vec![st(vec![0.5, -1.0], vec![1.0, 2.0])];
    push("bn alignment: identical statistics", bn_alignment_loss(&stored, &stored).unwrap(), 0.0);
    push(
        "bn alignment: unit mean shift",
        bn_alignment_loss(&[st(vec![1.0], vec![1.0])], &[st(vec![0.0], vec![1.0])]).unwrap(),
        reference::bn_alignment(&[(vec![1.0], vec![1.0])], &[(vec![0.0], vec![1.0])]),
    );
    push(
        "bn alignment: (3, 4) mean shift",
        bn_alignment_loss(&[st(vec![3.0, 4.0], vec![1.0, 1.0])], &[st(vec![0.0, 0.0], vec![1.0, 1.0])]).unwrap(),
        5.0,
    );

    let flat = vec![vec![0.3, 0.7]; 4];
    push("pair diversity: identical rows", pair_diversity_with_pairs(&probs_batch(&flat), &[(0, 1), (2, 3)]), 0.0);
    let opposed = vec![vec![0.9, 0.1], vec![0.1, 0.9]];
    push("pair diversity: (0.9, 0.1) vs (0.1, 0.9)", pair_diversity_with_pairs(&probs_batch(&opposed), &[(0, 1)]), reference::pair_diversity(&opposed, &[(0, 1)]));
    push("pair diversity reference: -0.8 ln 9", reference::pair_diversity(&opposed, &[(0, 1)]), -0.8 * 9f64.ln());

    let probs = vec![vec![0.6, 0.3, 0.1], vec![0.2, 0.5, 0.3], vec![0.1, 0.1, 0.8], vec![0.4, 0.4, 0.2]];
    let stats = vec![st(vec![0.2, -0.1], vec![1.3, 0.7])];
    let unit = vec![st(vec![0.0, 0.0], vec![1.0, 1.0])];
    let batch = GeneratedBatch::new(Tensor::zeros(&[4, 0]), tensor(&probs).map(f64::ln), stats);
    let w = RecordingLossWeights { pair_count: 6, ..RecordingLossWeights::default() };
    let b = recording_loss(&batch, &unit, &w, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    // All 6 pairs of 4 rows are drawn, so the pair term is deterministic.
    let pairs: Vec<(usize, usize)> = (0..4).flat_map(|i| (i + 1..4).map(move |j| (i, j))).collect();
    let a = reference::one_hot(&probs);
    let c = reference::class_diversity(&probs);
    let d = reference::bn_alignment(&[(vec![0.2, -0.1], vec![1.3, 0.7])], &[(vec![0.0, 0.0], vec![1.0, 1.0])]);
    let e = reference::pair_diversity(&probs, &pairs);
    push("recording total: weighted sum", b.total, a + 5.0 * c + 20.0 * d + 0.1 * e);
    let zero = RecordingLossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, ..w };
    let b0 = recording_loss(&batch, &unit, &zero, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    push("recording total: zero weights leave the one-hot term", b0.total, a);

    let uniform_logits = vec![vec![0.0; 20]; 2];
    push("cross-entropy: uniform over 20", cross_entropy_loss(&tensor(&uniform_logits), &[3, 17]).unwrap(), 20f64.ln());
    let lr = vec![vec![1.0, 0.0]];
    push("cross-entropy: logits (1, 0)", cross_entropy_loss(&tensor(&lr), &[0]).unwrap(), (1.0 + (-1f64).exp()).ln());

    let teacher = vec![vec![1.0, -0.5, 0.3], vec![0.0, 2.0, -1.0]];
    let soft_entropy: f64 = teacher
        .iter()
        .map(|r| reference::entropy(&reference::softmax(&r.iter().map(|v| v / 2.0).collect::<Vec<_>>())))
        .sum::<f64>()
        / 2.0;
    push("kd: student equals teacher", kd_loss(&tensor(&teacher), &tensor(&teacher), 2.0).unwrap(), soft_entropy);
    let t = vec![vec![2.0, 0.0]];
    let s = vec![vec![0.0, 2.0]];
    push("kd: logits (2, 0) vs (0, 2) at T = 1", kd_loss(&tensor(&t), &tensor(&s), 1.0).unwrap(), reference::kd(&t, &s, 1.0));
    // −(0.881·ln 0.119 + 0.119·ln 0.881)
    push("kd reference: 1.8885", reference::kd(&t, &s, 1.0), 1.888_522_166_998_736);

    let cfg = DistillConfig::default();
    for step in 1..=5 {
        push(&format!("lambda4 at step {step}"), lambda4(step, &cfg).unwrap(), step as f64 / (step as f64 + 1.0));
    }
    push("inheritance: (1, 0.4, 0.6) at 0.5", inheritance_loss(1.0, 0.4, 0.6, 0.5).unwrap().total, 1.0);
    push("inheritance: lambda4 = 0 keeps ce", inheritance_loss(1.3, 0.4, 0.6, 0.0).unwrap().total, 1.3);
    push("inheritance: lambda4 = 1 keeps distillation", inheritance_loss(1.3, 0.4, 0.6, 1.0).unwrap().total, 1.0);
    out
}
