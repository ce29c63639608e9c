#![allow(dead_code)]

use genreplay_core::data::{synthetic, Dataset, SyntheticSpec};
use genreplay_core::model::{ArchSpec, Classifier, GeneratorArch};
use genreplay_core::optim::{OptimizerSpec, StepDecay};
use genreplay_core::task_stream::{materialize_tasks, SequenceSkeleton, TaskSequence};
use genreplay_core::trainers::{train_initial, Augment, ClassifierTrainConfig, RecordingConfig};
use genreplay_core::losses::RecordingLossWeights;

pub fn small_dataset(classes: usize, seed: u64) -> Dataset {
    synthetic(&SyntheticSpec { train_per_class: 24, eval_per_class: 8, ..SyntheticSpec::desk(classes, seed) }).unwrap()
}

pub fn sequence(ds: &Dataset, sets: Vec<Vec<usize>>) -> TaskSequence {
    materialize_tasks(ds, &SequenceSkeleton::explicit("fixture", 0, sets).unwrap()).unwrap()
}

pub fn train_cfg(epochs: usize, seed: u64) -> ClassifierTrainConfig {
    ClassifierTrainConfig {
        epochs,
        batch_size: 16,
        learning_rate: 0.01,
        optimizer: OptimizerSpec::classifier_default(),
        schedule: StepDecay::none(),
        augment: Augment::default(),
        seed,
    }
}

pub fn recording_cfg(steps: usize, batch: usize, seed: u64) -> RecordingConfig {
    RecordingConfig {
        epochs: 1,
        steps_per_epoch: steps,
        batch_size: batch,
        learning_rate: 0.01,
        optimizer: OptimizerSpec::generator_default(),
        schedule: StepDecay::none(),
        weights: RecordingLossWeights::default(),
        generator: GeneratorArch::desk(1, 8),
        recalibration_batches: 4,
        seed,
    }
}

/// Desk classifier trained briefly on the first task of `seq`.
pub fn teacher(seq: &TaskSequence, epochs: usize, seed: u64) -> Classifier {
    train_initial(&ArchSpec::desk(1, 8), &seq.tasks[0], &train_cfg(epochs, seed)).unwrap().0
}
