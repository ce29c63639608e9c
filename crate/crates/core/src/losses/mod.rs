//! Objectives for the recording and inheritance stages.

pub mod inheritance;
pub mod recording;

pub use inheritance::{
    cross_entropy_loss, inheritance_loss, kd_loss, lambda4, DistillConfig, InheritanceBreakdown, Lambda4,
};
pub use recording::{
    bn_alignment_loss, class_diversity_loss, one_hot_loss, pair_diversity_loss, recording_loss,
    DivergenceSpace, GeneratedBatch, RecordingBreakdown, RecordingLossWeights,
};
