//! Losses used while training the expanded classifier: cross-entropy on the
//! new head, temperature-softened distillation on the old heads, and the
//! task-dependent weight that balances them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "kebab-case")]
pub enum Lambda4 {
    /// `t / (t + 1)` for the 1-based incremental step `t`.
    TaskIndexSchedule,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub temperature: f64,
    pub lambda4: Lambda4,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { temperature: 2.0, lambda4: Lambda4::TaskIndexSchedule }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if let Lambda4::Fixed(v) = self.lambda4 {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("fixed lambda4 must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Weight of the distillation terms at incremental step `task_index` (1-based).
pub fn lambda4(task_index: usize, cfg: &DistillConfig) -> Result<f64> {
    if task_index == 0 {
        return Err(Error::Config("incremental step index is 1-based".into()));
    }
    Ok(match cfg.lambda4 {
        Lambda4::TaskIndexSchedule => task_index as f64 / (task_index as f64 + 1.0),
        Lambda4::Fixed(v) => v,
    })
}

fn check_labels(labels: &[usize], rows: usize, width: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Dimension(format!("{} labels for {} logit rows", labels.len(), rows)));
    }
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= width) {
        return Err(Error::Label { row, label, width });
    }
    Ok(())
}

/// Mean cross-entropy of `logits` (new-head columns only) against within-head labels.
pub fn cross_entropy_term(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, k) = (tape.shape(logits)[0], tape.shape(logits)[1]);
    check_labels(labels, n, k)?;
    let mut onehot = Tensor::zeros(&[n, k]);
    for (r, &l) in labels.iter().enumerate() {
        onehot.data_mut()[r * k + l] = 1.0;
    }
    let ls = tape.log_softmax(logits);
    let mask = tape.constant(onehot);
    let picked = tape.mul(ls, mask);
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0 / n as f64))
}

/// Mean `H(softmax(teacher/T), softmax(student/T))` with a constant teacher.
pub fn kd_term(tape: &mut Tape, teacher_logits: &Tensor, student_logits: Var, temperature: f64) -> Result<Var> {
    if teacher_logits.shape() != tape.shape(student_logits) {
        return Err(Error::Dimension(format!(
            "teacher logits {:?} vs student logits {:?}",
            teacher_logits.shape(),
            tape.shape(student_logits)
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let n = teacher_logits.rows();
    let soft_teacher = teacher_logits.map(|v| v / temperature).softmax_rows();
    let scaled = tape.scale(student_logits, 1.0 / temperature);
    let ls = tape.log_softmax(scaled);
    let p = tape.constant(soft_teacher);
    let prod = tape.mul(p, ls);
    let s = tape.sum(prod);
    Ok(tape.scale(s, -1.0 / n as f64))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InheritanceBreakdown {
    pub ce: f64,
    pub gkd: f64,
    pub nkd: f64,
    pub lambda4: f64,
    pub total: f64,
}

impl InheritanceBreakdown {
    pub fn as_map(&self) -> BTreeMap<String, f64> {
        BTreeMap::from([
            ("l_ce".to_string(), self.ce),
            ("l_gkd".to_string(), self.gkd),
            ("l_nkd".to_string(), self.nkd),
            ("lambda4".to_string(), self.lambda4),
            ("total".to_string(), self.total),
        ])
    }

    pub fn is_finite(&self) -> bool {
        [self.ce, self.gkd, self.nkd, self.total].iter().all(|v| v.is_finite())
    }
}

/// `(1 − λ4)·ce + λ4·(gkd + nkd)` on the tape; absent distillation terms are dropped.
pub fn inheritance_term(tape: &mut Tape, ce: Var, gkd: Option<Var>, nkd: Option<Var>, lam4: f64) -> Var {
    let ce_part = tape.scale(ce, 1.0 - lam4);
    let distill = match (gkd, nkd) {
        (Some(g), Some(n)) => Some(tape.add(g, n)),
        (Some(v), None) | (None, Some(v)) => Some(v),
        (None, None) => None,
    };
    match distill {
        Some(d) => {
            let d = tape.scale(d, lam4);
            tape.add(ce_part, d)
        }
        None => ce_part,
    }
}

pub fn cross_entropy_loss(new_logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(new_logits.clone());
    let v = cross_entropy_term(&mut tape, l, labels)?;
    Ok(tape.scalar(v))
}

pub fn kd_loss(teacher_logits: &Tensor, student_logits: &Tensor, temperature: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(student_logits.clone());
    let v = kd_term(&mut tape, teacher_logits, s, temperature)?;
    Ok(tape.scalar(v))
}

pub fn inheritance_loss(ce: f64, gkd: f64, nkd: f64, lam4: f64) -> Result<InheritanceBreakdown> {
    if !(0.0..=1.0).contains(&lam4) {
        return Err(Error::Config(format!("lambda4 must lie in [0, 1], got {lam4}")));
    }
    Ok(InheritanceBreakdown {
        ce,
        gkd,
        nkd,
        lambda4: lam4,
        total: (1.0 - lam4) * ce + lam4 * (gkd + nkd),
    })
}
