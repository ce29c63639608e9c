//! Training procedures: the initial model, knowledge recording (generator),
//! knowledge inheritance (expanded classifier), the finetune and LwF
//! baselines, joint training, and the task-sequence driver.

mod baselines;
mod common;
mod inheritance;
mod recording;
mod replay;
mod sequence;

pub use baselines::{train_finetune, train_joint, train_lwf};
pub use common::{expanded_student, sub_seed, Augment, ClassifierTrainConfig, StepLog, TrainOutcome};
pub use inheritance::{inherit_knowledge, InheritanceConfig};
pub use recording::{record_knowledge, RecordingConfig, RecordingOutcome};
pub use replay::{build_balanced_batch, ReplayBatch, ReplayRatio, StarvationPolicy};
pub use sequence::{
    run_sequence, run_step, train_initial, Method, SequenceConfig, SequenceOutcome, StageReport, StepOutcome,
};
