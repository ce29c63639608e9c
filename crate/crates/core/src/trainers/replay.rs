//! Class-balanced mixing of generated old-class images with real new images.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::model::{Classifier, Generator};
use crate::tensor::Tensor;

/// Generated-to-real images per class, `generated:new`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayRatio {
    pub generated: usize,
    pub new: usize,
}

impl Default for ReplayRatio {
    fn default() -> Self {
        Self { generated: 1, new: 1 }
    }
}

impl ReplayRatio {
    pub fn validate(&self) -> Result<()> {
        if self.generated == 0 || self.new == 0 {
            return Err(Error::Config(format!("replay ratio terms must be at least 1, got {self}")));
        }
        Ok(())
    }

    /// Generated images per old class for a real batch of `new_len` images
    /// drawn from `k_new` classes.
    pub fn quota(&self, new_len: usize, k_new: usize) -> usize {
        let per_class = new_len as f64 / k_new.max(1) as f64;
        ((self.generated as f64 * per_class / self.new as f64).round() as usize).max(1)
    }
}

impl fmt::Display for ReplayRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.generated, self.new)
    }
}

impl FromStr for ReplayRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("replay ratio must look like 3:1, got {s:?}"));
        let (a, b) = s.split_once(':').ok_or_else(bad)?;
        let r = Self { generated: a.trim().parse().map_err(|_| bad())?, new: b.trim().parse().map_err(|_| bad())? };
        r.validate()?;
        Ok(r)
    }
}

/// What to do when a class quota cannot be filled within the rejection budget.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StarvationPolicy {
    #[default]
    Error,
    /// Fill the remaining quota of a starving class with the rejected
    /// candidates the teacher scored highest for that class.
    TopUp,
}

impl fmt::Display for StarvationPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Error => "error",
            Self::TopUp => "top-up",
        })
    }
}

impl FromStr for StarvationPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "error" => Ok(Self::Error),
            "top-up" => Ok(Self::TopUp),
            other => Err(Error::Config(format!("starvation policy must be error or top-up, got {other:?}"))),
        }
    }
}

/// Generated rows first, then real rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBatch {
    pub images: Tensor,
    /// Old-classifier logits on every row.
    pub teacher_logits: Tensor,
    /// Within-head labels of the real rows.
    pub labels: Vec<usize>,
    /// Teacher pseudo-label (old column) of each generated row.
    pub pseudo_labels: Vec<usize>,
    pub generated: Range<usize>,
    pub real: Range<usize>,
    /// Images generated while filling the quotas, accepted or not.
    pub attempts: usize,
    /// Generated rows placed by top-up rather than by their argmax.
    pub topped_up: usize,
}

impl ReplayBatch {
    /// Generated images per old column.
    pub fn generated_counts(&self, old_classes: usize) -> Vec<usize> {
        let mut c = vec![0; old_classes];
        for &p in &self.pseudo_labels {
            c[p] += 1;
        }
        c
    }
}

/// Fills a per-old-class quota with generated images by rejection on the
/// teacher's pseudo-labels, then appends the real batch.
///
/// `real_labels` are within-head labels of `real`; `k_new` is the width of the
/// new head. Starving classes in the error are old column indices. Under
/// [`StarvationPolicy::TopUp`] a starving class keeps its quota but some of
/// its rows carry a pseudo-label that is not the teacher's argmax.
#[allow(clippy::too_many_arguments)]
pub fn build_balanced_batch<R: Rng + ?Sized>(
    generator: &Generator,
    teacher: &Classifier,
    real: &LabeledSet,
    real_labels: &[usize],
    k_new: usize,
    ratio: ReplayRatio,
    budget_factor: usize,
    policy: StarvationPolicy,
    rng: &mut R,
) -> Result<ReplayBatch> {
    ratio.validate()?;
    let k_old = teacher.num_classes();
    if generator.covered_classes() != k_old {
        return Err(Error::Config(format!(
            "generator covers {} classes but the teacher has {k_old}",
            generator.covered_classes()
        )));
    }
    if real.is_empty() {
        return Err(Error::DegenerateBatch("empty real batch".into()));
    }
    if real_labels.len() != real.len() {
        return Err(Error::Dimension(format!("{} labels for {} real images", real_labels.len(), real.len())));
    }
    let quota = ratio.quota(real.len(), k_new);
    let wanted = quota * k_old;
    let budget = wanted * budget_factor.max(1);
    let mut filled = vec![0usize; k_old];
    let mut accepted: Vec<Tensor> = Vec::new();
    let mut pseudo = Vec::with_capacity(wanted);
    let mut rejected: Vec<(Tensor, Tensor, Vec<usize>)> = Vec::new();
    let mut attempts = 0;
    let chunk = wanted.max(2);
    while pseudo.len() < wanted && attempts < budget {
        let m = chunk.min(budget - attempts).max(1);
        let noise = Tensor::randn(&[m, generator.noise_dim()], 1.0, rng);
        let imgs = generator.generate(&noise)?;
        let logits = teacher.logits(&imgs)?;
        let labels = logits.argmax_rows();
        attempts += m;
        let mut keep = Vec::new();
        let mut drop = Vec::new();
        for (i, &l) in labels.iter().enumerate() {
            if filled[l] < quota {
                filled[l] += 1;
                keep.push(i);
                pseudo.push(l);
            } else {
                drop.push(i);
            }
        }
        if !keep.is_empty() {
            accepted.push(imgs.select_rows(&keep));
        }
        if policy == StarvationPolicy::TopUp && !drop.is_empty() {
            rejected.push((imgs.select_rows(&drop), logits.select_rows(&drop), drop));
        }
    }
    let mut topped_up = 0;
    if pseudo.len() < wanted {
        let starving: Vec<usize> = (0..k_old).filter(|&c| filled[c] < quota).collect();
        if policy == StarvationPolicy::Error {
            return Err(Error::BalanceFailure { starving, attempts });
        }
        let pool: Vec<(usize, usize)> =
            rejected.iter().enumerate().flat_map(|(b, (_, _, rows))| (0..rows.len()).map(move |r| (b, r))).collect();
        let mut taken = vec![false; pool.len()];
        for &c in &starving {
            let mut order: Vec<usize> = (0..pool.len()).filter(|&p| !taken[p]).collect();
            // Softmax probability of c is monotone in the logit margin over the row's log-sum-exp.
            let score = |p: usize| {
                let (b, r) = pool[p];
                let row = rejected[b].1.row(r);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row[c] - max - row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
            };
            order.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
            for p in order.into_iter().take(quota - filled[c]) {
                taken[p] = true;
                let (b, r) = pool[p];
                accepted.push(rejected[b].0.select_rows(&[r]));
                pseudo.push(c);
                filled[c] += 1;
                topped_up += 1;
            }
            if filled[c] < quota {
                return Err(Error::BalanceFailure { starving, attempts });
            }
        }
        log::warn!("topped up starving classes {starving:?} with {topped_up} low-confidence samples");
    }
    let mut parts: Vec<&Tensor> = accepted.iter().collect();
    parts.push(real.images());
    let images = Tensor::cat_rows(&parts)?;
    let teacher_logits = teacher.logits(&images)?;
    Ok(ReplayBatch {
        images,
        teacher_logits,
        labels: real_labels.to_vec(),
        pseudo_labels: pseudo,
        generated: 0..wanted,
        real: wanted..wanted + real.len(),
        attempts,
        topped_up,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quota_arithmetic() {
        assert_eq!(ReplayRatio::default().quota(20, 20), 1);
        assert_eq!("3:1".parse::<ReplayRatio>().unwrap().quota(20, 20), 3);
        assert_eq!(ReplayRatio::default().quota(64, 5), 13);
        assert_eq!(ReplayRatio { generated: 1, new: 4 }.quota(4, 4), 1);
        assert!("0:1".parse::<ReplayRatio>().is_err());
        assert!("x".parse::<ReplayRatio>().is_err());
    }

    #[test]
    fn starvation_policy_round_trips() {
        for p in [StarvationPolicy::Error, StarvationPolicy::TopUp] {
            assert_eq!(p.to_string().parse::<StarvationPolicy>().unwrap(), p);
        }
        assert!("fill".parse::<StarvationPolicy>().is_err());
    }
}
