//! Knowledge inheritance: the expanded classifier learns the new task from
//! real images while distilling the frozen old classifier on generated and
//! real images.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::losses::inheritance::{cross_entropy_term, inheritance_term, kd_term, lambda4, DistillConfig};
use crate::model::{Classifier, Generator, Mode};
use crate::optim::Optimizer;
use crate::task_stream::TaskSpec;
use crate::trainers::common::{
    epoch_batches, expanded_student, head_labels, non_finite, steps_per_epoch, sub_seed, update_classifier,
    ClassifierTrainConfig, StepLog, TrainOutcome,
};
use crate::trainers::replay::{build_balanced_batch, ReplayRatio, StarvationPolicy};

pub const INHERITANCE_COLUMNS: [&str; 7] = ["step", "lr", "l_ce", "l_gkd", "l_nkd", "lambda4", "total"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InheritanceConfig {
    /// `train.batch_size` is the number of real new-task images per step.
    pub train: ClassifierTrainConfig,
    /// Mix generated old-class images into every batch.
    pub replay: bool,
    /// Distil the old classifier on the real new-task images.
    pub use_nkd: bool,
    pub replay_ratio: ReplayRatio,
    pub distill: DistillConfig,
    /// Generated images allowed per accepted image while filling quotas.
    pub rejection_budget: usize,
    #[serde(default)]
    pub starvation: StarvationPolicy,
}

impl Default for InheritanceConfig {
    fn default() -> Self {
        Self {
            train: ClassifierTrainConfig::default(),
            replay: true,
            use_nkd: true,
            replay_ratio: ReplayRatio::default(),
            distill: DistillConfig::default(),
            rejection_budget: 50,
            starvation: StarvationPolicy::Error,
        }
    }
}

impl InheritanceConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.replay_ratio.validate()?;
        self.distill.validate()?;
        if self.rejection_budget == 0 {
            return Err(Error::Config("rejection budget must be at least 1".into()));
        }
        Ok(())
    }
}

/// Trains `teacher` expanded by a head for `task` under `ℓ_KI`.
///
/// `task.task_index` doubles as the 1-based incremental step of the λ4 schedule.
pub fn inherit_knowledge(
    teacher: &Classifier,
    generator: Option<&Generator>,
    task: &TaskSpec,
    cfg: &InheritanceConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let generator = match (cfg.replay, generator) {
        (true, Some(g)) => {
            if g.covered_classes() != teacher.num_classes() {
                return Err(Error::Config(format!(
                    "generator covers {} classes, old classifier has {}",
                    g.covered_classes(),
                    teacher.num_classes()
                )));
            }
            Some(g)
        }
        (true, None) => return Err(Error::Config("replay enabled but no generator supplied".into())),
        (false, _) => None,
    };
    let lam4 = lambda4(task.task_index, &cfg.distill)?;
    let t = cfg.distill.temperature;
    let k_old = teacher.num_classes();
    let k_new = task.num_classes();
    let mut student = expanded_student(teacher, k_new, cfg.train.seed)?;
    let k_all = student.num_classes();
    let labels = head_labels(task.train.labels(), &task.class_set)?;
    let teacher_digest = teacher.digest();

    let mut batch_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.train.seed, "batches"));
    let mut aug_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.train.seed, "augment"));
    let mut replay_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.train.seed, "replay"));
    let mut opt = Optimizer::new(cfg.train.optimizer.clone());
    let total = cfg.train.epochs * steps_per_epoch(task.train.len(), cfg.train.batch_size);
    let mut log = StepLog::new(&INHERITANCE_COLUMNS);
    let mut step = 0;
    for _ in 0..cfg.train.epochs {
        for idx in epoch_batches(task.train.len(), cfg.train.batch_size, &mut batch_rng) {
            let real = task.train.subset(&idx);
            let real_images = cfg.train.augment.apply(real.images(), &mut aug_rng);
            let real_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (images, teacher_logits, gen_rows, real_rows) = match generator {
                Some(g) => {
                    let real_set = LabeledSet::new(real_images, real.labels().to_vec())?;
                    let rb = build_balanced_batch(
                        g,
                        teacher,
                        &real_set,
                        &real_labels,
                        k_new,
                        cfg.replay_ratio,
                        cfg.rejection_budget,
                        cfg.starvation,
                        &mut replay_rng,
                    )?;
                    let gen_rows: Vec<usize> = rb.generated.clone().collect();
                    let real_rows: Vec<usize> = rb.real.clone().collect();
                    (rb.images, Some(rb.teacher_logits), Some(gen_rows), Some(real_rows))
                }
                None => {
                    let tl = if cfg.use_nkd { Some(teacher.logits(&real_images)?) } else { None };
                    (real_images, tl, None, None)
                }
            };

            let mut tape = Tape::new();
            let vars = student.bind(&mut tape, true);
            let x = tape.constant(images);
            let out = student.forward_on(&mut tape, &vars, x, Mode::Train)?;
            let new_cols = tape.slice_cols(out.logits, k_old, k_all);
            let new_real = match &real_rows {
                Some(rows) => tape.gather_rows(new_cols, rows),
                None => new_cols,
            };
            let ce = cross_entropy_term(&mut tape, new_real, &real_labels)?;
            let old_cols = (cfg.use_nkd || gen_rows.is_some()).then(|| tape.slice_cols(out.logits, 0, k_old));
            let gkd = match (&gen_rows, &teacher_logits, old_cols) {
                (Some(rows), Some(tl), Some(oc)) => {
                    let s = tape.gather_rows(oc, rows);
                    Some(kd_term(&mut tape, &tl.select_rows(rows), s, t)?)
                }
                _ => None,
            };
            let nkd = match (cfg.use_nkd, &teacher_logits, old_cols) {
                (true, Some(tl), Some(oc)) => match &real_rows {
                    Some(rows) => {
                        let s = tape.gather_rows(oc, rows);
                        Some(kd_term(&mut tape, &tl.select_rows(rows), s, t)?)
                    }
                    None => Some(kd_term(&mut tape, tl, oc, t)?),
                },
                _ => None,
            };
            let loss = inheritance_term(&mut tape, ce, gkd, nkd, lam4);
            let lr = cfg.train.schedule.lr_at(cfg.train.learning_rate, step, total);
            let row = vec![
                step as f64,
                lr,
                tape.scalar(ce),
                gkd.map_or(0.0, |v| tape.scalar(v)),
                nkd.map_or(0.0, |v| tape.scalar(v)),
                lam4,
                tape.scalar(loss),
            ];
            if row.iter().any(|v| !v.is_finite()) {
                let map = INHERITANCE_COLUMNS.iter().map(|c| c.to_string()).zip(row.iter().copied()).collect();
                return Err(non_finite(step, map));
            }
            let grads = tape.backward(loss);
            update_classifier(&mut student, &grads, &vars, &mut opt, lr)?;
            student.update_running_stats(&out.batch_stats);
            log.push(row);
            step += 1;
        }
    }
    if teacher.digest() != teacher_digest {
        return Err(Error::Config("distillation teacher changed during inheritance".into()));
    }
    Ok(TrainOutcome { model: student, log })
}

