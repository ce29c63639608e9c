//! Losses used to record a frozen classifier into a generator.
//!
//! Every term is written once as a tape expression; the plain-value functions
//! evaluate that expression on constants so training and reporting share one
//! definition.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::BnStats;
use crate::tensor::Tensor;

/// Lower bound applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Where the pairwise divergence of the diversity term is measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DivergenceSpace {
    /// Softmax outputs of the frozen classifier.
    #[default]
    Output,
    /// Soft pixel-intensity histograms of the images themselves.
    Pixel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordingLossWeights {
    /// Weight of the class-diversity term.
    pub lambda1: f64,
    /// Weight of the normalisation-statistics term.
    pub lambda2: f64,
    /// Weight of the pair-diversity term.
    pub lambda3: f64,
    pub pair_count: usize,
    pub divergence: DivergenceSpace,
}

impl Default for RecordingLossWeights {
    fn default() -> Self {
        Self {
            lambda1: 5.0,
            lambda2: 20.0,
            lambda3: 0.1,
            pair_count: 200,
            divergence: DivergenceSpace::Output,
        }
    }
}

impl RecordingLossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative weight, got {v}")));
            }
        }
        if self.pair_count == 0 {
            return Err(Error::Config("pair_count must be at least 1".into()));
        }
        Ok(())
    }
}

/// Generated images together with the frozen classifier's response to them.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedBatch {
    pub images: Tensor,
    pub logits: Tensor,
    pub softmax: Tensor,
    pub pseudo_labels: Vec<usize>,
    /// Per normalisation layer moments of the classifier activations on `images`.
    pub activation_stats: Vec<BnStats>,
}

impl GeneratedBatch {
    pub fn new(images: Tensor, logits: Tensor, activation_stats: Vec<BnStats>) -> Self {
        let softmax = logits.softmax_rows();
        let pseudo_labels = softmax.argmax_rows();
        Self { images, logits, softmax, pseudo_labels, activation_stats }
    }

    /// A batch described only by its softmax rows (logits are their logarithms).
    pub fn from_probabilities(probs: Tensor) -> Self {
        let n = probs.rows();
        let logits = probs.map(|p| p.max(PROB_FLOOR).ln());
        Self::new(Tensor::zeros(&[n, 0]), logits, Vec::new())
    }

    pub fn len(&self) -> usize {
        self.logits.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> usize {
        self.logits.row_len()
    }
}

/// Per-term values of the recording objective.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordingBreakdown {
    pub one_hot: f64,
    pub class_diversity: f64,
    pub bn_alignment: f64,
    pub pair_diversity: f64,
    pub total: f64,
}

impl RecordingBreakdown {
    pub fn as_map(&self) -> BTreeMap<String, f64> {
        BTreeMap::from([
            ("l_oh".to_string(), self.one_hot),
            ("l_cd".to_string(), self.class_diversity),
            ("l_bn".to_string(), self.bn_alignment),
            ("l_div".to_string(), self.pair_diversity),
            ("total".to_string(), self.total),
        ])
    }

    pub fn is_finite(&self) -> bool {
        [self.one_hot, self.class_diversity, self.bn_alignment, self.pair_diversity, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Tape handles of the recording objective and its terms.
pub struct RecordingTerms {
    pub total: Var,
    pub one_hot: Var,
    pub class_diversity: Var,
    pub bn_alignment: Var,
    pub pair_diversity: Var,
}

impl RecordingTerms {
    pub fn breakdown(&self, tape: &Tape) -> RecordingBreakdown {
        RecordingBreakdown {
            one_hot: tape.scalar(self.one_hot),
            class_diversity: tape.scalar(self.class_diversity),
            bn_alignment: tape.scalar(self.bn_alignment),
            pair_diversity: tape.scalar(self.pair_diversity),
            total: tape.scalar(self.total),
        }
    }
}

fn non_empty(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::DegenerateBatch("empty generated batch".into()));
    }
    Ok(())
}

/// Mean cross-entropy between each softmax row and the one-hot vector of its argmax.
pub fn one_hot_term(tape: &mut Tape, logits: Var) -> Var {
    let labels = tape.value(logits).argmax_rows();
    let (n, k) = (tape.shape(logits)[0], tape.shape(logits)[1]);
    let mut onehot = Tensor::zeros(&[n, k]);
    for (r, &l) in labels.iter().enumerate() {
        onehot.data_mut()[r * k + l] = 1.0;
    }
    let ls = tape.log_softmax(logits);
    let mask = tape.constant(onehot);
    let picked = tape.mul(ls, mask);
    let s = tape.sum(picked);
    tape.scale(s, -1.0 / n as f64)
}

/// Negative entropy of the batch-mean softmax vector.
pub fn class_diversity_term(tape: &mut Tape, logits: Var) -> Var {
    let ls = tape.log_softmax(logits);
    let p = tape.exp(ls);
    let mean = tape.mean_rows(p);
    let log_mean = tape.log(mean, PROB_FLOOR);
    let plogp = tape.mul(mean, log_mean);
    tape.sum(plogp)
}

/// `Σ_l ‖μ_l − μ_bn,l‖₂ + ‖σ²_l − σ²_bn,l‖₂` from per-layer moment variables.
pub fn bn_alignment_from_moments(
    tape: &mut Tape,
    means: &[Var],
    vars: &[Var],
    stored: &[BnStats],
) -> Result<Var> {
    if means.len() != stored.len() || vars.len() != stored.len() {
        return Err(Error::Config(format!(
            "normalisation layer count mismatch: batch has {}, stored has {}",
            means.len(),
            stored.len()
        )));
    }
    let mut total: Option<Var> = None;
    for ((&m, &v), st) in means.iter().zip(vars).zip(stored) {
        if tape.value(m).numel() != st.channel_count() || tape.value(v).numel() != st.channel_count() {
            return Err(Error::Config(format!(
                "channel count mismatch: batch has {}, stored has {}",
                tape.value(m).numel(),
                st.channel_count()
            )));
        }
        let target_mean = tape.constant(Tensor::from_parts(vec![st.mean.len()], st.mean.clone()));
        let target_var = tape.constant(Tensor::from_parts(vec![st.var.len()], st.var.clone()));
        let dm = tape.sub(m, target_mean);
        let dv = tape.sub(v, target_var);
        let nm = tape.norm2(dm);
        let nv = tape.norm2(dv);
        let layer = tape.add(nm, nv);
        total = Some(match total {
            Some(t) => tape.add(t, layer),
            None => layer,
        });
    }
    total.ok_or_else(|| Error::UnsupportedArchitecture("no normalisation layers to align".into()))
}

/// Alignment term from the inputs of every normalisation layer (biased batch variance).
pub fn bn_alignment_term(tape: &mut Tape, bn_inputs: &[Var], stored: &[BnStats]) -> Result<Var> {
    if let Some(&first) = bn_inputs.first() {
        if tape.shape(first)[0] < 2 {
            return Err(Error::DegenerateBatch("batch variance needs at least 2 samples".into()));
        }
    }
    let means: Vec<Var> = bn_inputs.iter().map(|&x| tape.channel_mean(x)).collect();
    let vars: Vec<Var> = bn_inputs.iter().map(|&x| tape.channel_var(x)).collect();
    bn_alignment_from_moments(tape, &means, &vars, stored)
}

/// Draws `pair_count` distinct unordered pairs `(i, j)`, `i < j`, uniformly
/// without replacement; capped at the number of available pairs.
pub fn sample_pairs<R: Rng + ?Sized>(n: usize, pair_count: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    if n < 2 {
        return Err(Error::DegenerateBatch(format!("pair sampling needs at least 2 samples, got {n}")));
    }
    let total = n * (n - 1) / 2;
    let k = pair_count.min(total);
    let mut out: Vec<(usize, usize)> = index::sample(rng, total, k)
        .into_iter()
        .map(|lin| decode_pair(lin, n))
        .collect();
    out.sort_unstable();
    Ok(out)
}

/// Maps a linear index in `0..n(n-1)/2` to the pair it enumerates (row-major, `i < j`).
fn decode_pair(mut lin: usize, n: usize) -> (usize, usize) {
    let mut i = 0;
    loop {
        let row = n - 1 - i;
        if lin < row {
            return (i, i + 1 + lin);
        }
        lin -= row;
        i += 1;
    }
}

/// `−½ mean_pairs [KL(p_i‖p_j) + KL(p_j‖p_i)] = −½ mean_pairs Σ (p_i − p_j)(log p_i − log p_j)`
/// over row distributions given as log-probabilities.
fn symmetric_kl_term(tape: &mut Tape, log_probs: Var, pairs: &[(usize, usize)]) -> Var {
    let p = tape.exp(log_probs);
    let left: Vec<usize> = pairs.iter().map(|&(i, _)| i).collect();
    let right: Vec<usize> = pairs.iter().map(|&(_, j)| j).collect();
    let pl = tape.gather_rows(p, &left);
    let pr = tape.gather_rows(p, &right);
    let ll = tape.gather_rows(log_probs, &left);
    let lr = tape.gather_rows(log_probs, &right);
    let dp = tape.sub(pl, pr);
    let dl = tape.sub(ll, lr);
    let prod = tape.mul(dp, dl);
    let s = tape.sum(prod);
    tape.scale(s, -0.5 / pairs.len() as f64)
}

/// Pair diversity in output space (softmax of the frozen classifier, temperature 1).
pub fn pair_diversity_term(tape: &mut Tape, logits: Var, pairs: &[(usize, usize)]) -> Var {
    let ls = tape.log_softmax(logits);
    symmetric_kl_term(tape, ls, pairs)
}

/// Bin centres and bandwidth of the pixel-space histogram.
pub const PIXEL_BINS: usize = 16;

/// Pair diversity in pixel space: symmetric KL between per-image soft intensity histograms.
pub fn pixel_pair_diversity_term(tape: &mut Tape, images: Var, pairs: &[(usize, usize)]) -> Var {
    let centers: Vec<f64> = (0..PIXEL_BINS)
        .map(|b| -1.0 + 2.0 * (b as f64 + 0.5) / PIXEL_BINS as f64)
        .collect();
    let bandwidth = 1.0 / PIXEL_BINS as f64;
    let h = tape.soft_histogram(images, &centers, bandwidth);
    let lh = tape.log(h, PROB_FLOOR);
    symmetric_kl_term(tape, lh, pairs)
}

/// Weighted recording objective `ℓ_oh + λ1·ℓ_cd + λ2·ℓ_bn + λ3·ℓ_div`.
pub fn recording_objective(
    tape: &mut Tape,
    images: Var,
    logits: Var,
    bn_inputs: &[Var],
    stored: &[BnStats],
    weights: &RecordingLossWeights,
    pairs: &[(usize, usize)],
) -> Result<RecordingTerms> {
    let one_hot = one_hot_term(tape, logits);
    let class_diversity = class_diversity_term(tape, logits);
    let bn_alignment = bn_alignment_term(tape, bn_inputs, stored)?;
    let pair_diversity = match weights.divergence {
        DivergenceSpace::Output => pair_diversity_term(tape, logits, pairs),
        DivergenceSpace::Pixel => pixel_pair_diversity_term(tape, images, pairs),
    };
    let total = combine(tape, one_hot, class_diversity, bn_alignment, pair_diversity, weights);
    Ok(RecordingTerms { total, one_hot, class_diversity, bn_alignment, pair_diversity })
}

fn combine(
    tape: &mut Tape,
    one_hot: Var,
    class_diversity: Var,
    bn_alignment: Var,
    pair_diversity: Var,
    w: &RecordingLossWeights,
) -> Var {
    let cd = tape.scale(class_diversity, w.lambda1);
    let base = tape.add(one_hot, cd);
    let bn = tape.scale(bn_alignment, w.lambda2);
    let div = tape.scale(pair_diversity, w.lambda3);
    let t = tape.add(base, bn);
    tape.add(t, div)
}

fn logits_on_tape(tape: &mut Tape, batch: &GeneratedBatch) -> Var {
    tape.constant(batch.logits.clone())
}

pub fn one_hot_loss(batch: &GeneratedBatch) -> Result<f64> {
    non_empty(batch.len())?;
    let mut tape = Tape::new();
    let l = logits_on_tape(&mut tape, batch);
    let v = one_hot_term(&mut tape, l);
    Ok(tape.scalar(v))
}

pub fn class_diversity_loss(batch: &GeneratedBatch) -> Result<f64> {
    non_empty(batch.len())?;
    let mut tape = Tape::new();
    let l = logits_on_tape(&mut tape, batch);
    let v = class_diversity_term(&mut tape, l);
    Ok(tape.scalar(v))
}

pub fn bn_alignment_loss(batch_stats: &[BnStats], stored: &[BnStats]) -> Result<f64> {
    let mut tape = Tape::new();
    let means: Vec<Var> = batch_stats
        .iter()
        .map(|s| tape.constant(Tensor::from_parts(vec![s.mean.len()], s.mean.clone())))
        .collect();
    let vars: Vec<Var> = batch_stats
        .iter()
        .map(|s| tape.constant(Tensor::from_parts(vec![s.var.len()], s.var.clone())))
        .collect();
    let v = bn_alignment_from_moments(&mut tape, &means, &vars, stored)?;
    Ok(tape.scalar(v))
}

pub fn pair_diversity_loss<R: Rng + ?Sized>(batch: &GeneratedBatch, pair_count: usize, rng: &mut R) -> Result<f64> {
    let pairs = sample_pairs(batch.len(), pair_count, rng)?;
    Ok(pair_diversity_with_pairs(batch, &pairs))
}

pub fn pair_diversity_with_pairs(batch: &GeneratedBatch, pairs: &[(usize, usize)]) -> f64 {
    let mut tape = Tape::new();
    let l = logits_on_tape(&mut tape, batch);
    let v = pair_diversity_term(&mut tape, l, pairs);
    tape.scalar(v)
}

/// Total recording objective with its per-term breakdown.
pub fn recording_loss<R: Rng + ?Sized>(
    batch: &GeneratedBatch,
    stored: &[BnStats],
    weights: &RecordingLossWeights,
    rng: &mut R,
) -> Result<RecordingBreakdown> {
    weights.validate()?;
    non_empty(batch.len())?;
    let pairs = sample_pairs(batch.len(), weights.pair_count, rng)?;
    let mut tape = Tape::new();
    let l = logits_on_tape(&mut tape, batch);
    let one_hot = one_hot_term(&mut tape, l);
    let class_diversity = class_diversity_term(&mut tape, l);
    let means: Vec<Var> = batch
        .activation_stats
        .iter()
        .map(|s| tape.constant(Tensor::from_parts(vec![s.mean.len()], s.mean.clone())))
        .collect();
    let vars: Vec<Var> = batch
        .activation_stats
        .iter()
        .map(|s| tape.constant(Tensor::from_parts(vec![s.var.len()], s.var.clone())))
        .collect();
    let bn_alignment = bn_alignment_from_moments(&mut tape, &means, &vars, stored)?;
    let pair_diversity = match weights.divergence {
        DivergenceSpace::Output => pair_diversity_term(&mut tape, l, &pairs),
        DivergenceSpace::Pixel => {
            let imgs = tape.constant(batch.images.clone());
            pixel_pair_diversity_term(&mut tape, imgs, &pairs)
        }
    };
    let total = combine(&mut tape, one_hot, class_diversity, bn_alignment, pair_diversity, weights);
    Ok(RecordingTerms { total, one_hot, class_diversity, bn_alignment, pair_diversity }.breakdown(&tape))
}
