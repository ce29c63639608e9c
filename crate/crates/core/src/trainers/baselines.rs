//! Reference trainers: finetuning (new-task cross-entropy only), LwF
//! (cross-entropy plus distillation on new images) and joint training on
//! labelled data over all heads.
//!
//! These loops are deliberately written out on their own rather than as
//! switches of [`inherit_knowledge`](super::inherit_knowledge), so that the
//! equivalence between the two is a checked property.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::losses::inheritance::{cross_entropy_term, kd_term, lambda4, DistillConfig};
use crate::model::{Classifier, Mode};
use crate::optim::Optimizer;
use crate::task_stream::TaskSpec;
use crate::trainers::common::{
    epoch_batches, expanded_student, head_labels, non_finite, steps_per_epoch, sub_seed, update_classifier,
    ClassifierTrainConfig, StepLog, TrainOutcome,
};
use crate::trainers::inheritance::INHERITANCE_COLUMNS;

fn check_row(step: usize, row: &[f64]) -> Result<()> {
    if row.iter().all(|v| v.is_finite()) {
        return Ok(());
    }
    let map = INHERITANCE_COLUMNS.iter().map(|c| c.to_string()).zip(row.iter().copied()).collect();
    Err(non_finite(step, map))
}

/// Expanded old model trained with cross-entropy on the new head only.
pub fn train_finetune(old: &Classifier, task: &TaskSpec, cfg: &ClassifierTrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let k_old = old.num_classes();
    let mut model = expanded_student(old, task.num_classes(), cfg.seed)?;
    let k_all = model.num_classes();
    let labels = head_labels(task.train.labels(), &task.class_set)?;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "batches"));
    let mut aug_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "augment"));
    let mut opt = Optimizer::new(cfg.optimizer.clone());
    let total = cfg.epochs * steps_per_epoch(task.train.len(), cfg.batch_size);
    let mut log = StepLog::new(&INHERITANCE_COLUMNS);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        for idx in epoch_batches(task.train.len(), cfg.batch_size, &mut batch_rng) {
            let images = cfg.augment.apply(&task.train.images().select_rows(&idx), &mut aug_rng);
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, true);
            let x = tape.constant(images);
            let out = model.forward_on(&mut tape, &vars, x, Mode::Train)?;
            let new_logits = tape.slice_cols(out.logits, k_old, k_all);
            let ce = cross_entropy_term(&mut tape, new_logits, &y)?;
            let lr = cfg.schedule.lr_at(cfg.learning_rate, step, total);
            let ce_value = tape.scalar(ce);
            let row = vec![step as f64, lr, ce_value, 0.0, 0.0, 0.0, ce_value];
            check_row(step, &row)?;
            let grads = tape.backward(ce);
            update_classifier(&mut model, &grads, &vars, &mut opt, lr)?;
            model.update_running_stats(&out.batch_stats);
            log.push(row);
            step += 1;
        }
    }
    Ok(TrainOutcome { model, log })
}

/// Expanded old model trained with `(1 − λ4)·ℓ_ce + λ4·ℓ_nkd`.
pub fn train_lwf(
    old: &Classifier,
    task: &TaskSpec,
    cfg: &ClassifierTrainConfig,
    distill: &DistillConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    distill.validate()?;
    let lam4 = lambda4(task.task_index, distill)?;
    let k_old = old.num_classes();
    let mut model = expanded_student(old, task.num_classes(), cfg.seed)?;
    let k_all = model.num_classes();
    let labels = head_labels(task.train.labels(), &task.class_set)?;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "batches"));
    let mut aug_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "augment"));
    let mut opt = Optimizer::new(cfg.optimizer.clone());
    let total = cfg.epochs * steps_per_epoch(task.train.len(), cfg.batch_size);
    let mut log = StepLog::new(&INHERITANCE_COLUMNS);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        for idx in epoch_batches(task.train.len(), cfg.batch_size, &mut batch_rng) {
            let images = cfg.augment.apply(&task.train.images().select_rows(&idx), &mut aug_rng);
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let teacher = old.logits(&images)?;
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, true);
            let x = tape.constant(images);
            let out = model.forward_on(&mut tape, &vars, x, Mode::Train)?;
            let new_logits = tape.slice_cols(out.logits, k_old, k_all);
            let ce = cross_entropy_term(&mut tape, new_logits, &y)?;
            let old_logits = tape.slice_cols(out.logits, 0, k_old);
            let nkd = kd_term(&mut tape, &teacher, old_logits, distill.temperature)?;
            let a = tape.scale(ce, 1.0 - lam4);
            let b = tape.scale(nkd, lam4);
            let loss = tape.add(a, b);
            let lr = cfg.schedule.lr_at(cfg.learning_rate, step, total);
            let row = vec![step as f64, lr, tape.scalar(ce), 0.0, tape.scalar(nkd), lam4, tape.scalar(loss)];
            check_row(step, &row)?;
            let grads = tape.backward(loss);
            update_classifier(&mut model, &grads, &vars, &mut opt, lr)?;
            model.update_running_stats(&out.batch_stats);
            log.push(row);
            step += 1;
        }
    }
    Ok(TrainOutcome { model, log })
}

pub const JOINT_COLUMNS: [&str; 3] = ["step", "lr", "l_ce"];

/// Cross-entropy over all columns of `model`, with `columns[i]` the target
/// column of example `i`. Used for the initial model and the joint-training
/// reference.
pub fn train_joint(
    mut model: Classifier,
    set: &LabeledSet,
    columns: &[usize],
    cfg: &ClassifierTrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if columns.len() != set.len() {
        return Err(Error::Dimension(format!("{} targets for {} examples", columns.len(), set.len())));
    }
    if set.len() < 2 {
        return Err(Error::DegenerateBatch("joint training needs at least 2 examples".into()));
    }
    let mut batch_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "batches"));
    let mut aug_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "augment"));
    let mut opt = Optimizer::new(cfg.optimizer.clone());
    let total = cfg.epochs * steps_per_epoch(set.len(), cfg.batch_size);
    let mut log = StepLog::new(&JOINT_COLUMNS);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        for idx in epoch_batches(set.len(), cfg.batch_size, &mut batch_rng) {
            let images = cfg.augment.apply(&set.images().select_rows(&idx), &mut aug_rng);
            let y: Vec<usize> = idx.iter().map(|&i| columns[i]).collect();
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, true);
            let x = tape.constant(images);
            let out = model.forward_on(&mut tape, &vars, x, Mode::Train)?;
            let ce = cross_entropy_term(&mut tape, out.logits, &y)?;
            let lr = cfg.schedule.lr_at(cfg.learning_rate, step, total);
            let v = tape.scalar(ce);
            if !v.is_finite() {
                return Err(non_finite(step, [("l_ce".to_string(), v)].into()));
            }
            let grads = tape.backward(ce);
            update_classifier(&mut model, &grads, &vars, &mut opt, lr)?;
            model.update_running_stats(&out.batch_stats);
            log.push(vec![step as f64, lr, v]);
            step += 1;
        }
    }
    Ok(TrainOutcome { model, log })
}
