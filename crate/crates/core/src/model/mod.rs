//! Expandable-head classifier, noise-to-image generator and their building blocks.

pub mod classifier;
pub mod generator;
pub mod layers;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::tensor::Tensor;

pub use classifier::{ArchSpec, Classifier, ClassifierOutput, TrunkArch};
pub use generator::{Generator, GeneratorArch};
pub use layers::BnStats;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Batch statistics; running statistics are returned for the caller to fold in.
    Train,
    /// Stored statistics.
    Eval,
}

/// Hands out bound parameter variables in canonical order.
pub(crate) struct ParamCursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl<'a> ParamCursor<'a> {
    pub(crate) fn new(vars: &'a [Var]) -> Self {
        Self { vars, pos: 0 }
    }

    pub(crate) fn next(&mut self) -> Var {
        let v = self.vars[self.pos];
        self.pos += 1;
        v
    }

    pub(crate) fn finish(&self) {
        debug_assert_eq!(self.pos, self.vars.len(), "parameter binding out of sync");
    }
}

/// Puts every tensor on the tape, as trainable leaves or as constants.
pub fn bind(tape: &mut Tape, params: &[&Tensor], trainable: bool) -> Vec<Var> {
    params
        .iter()
        .map(|&t| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect()
}

/// SHA-256 over shapes and little-endian bytes of the given tensors.
pub fn digest_tensors<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> String {
    let mut h = Sha256::new();
    for t in tensors {
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
