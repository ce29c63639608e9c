//! Knowledge recording: a generator is optimised so that the frozen old
//! classifier responds to its images confidently, evenly across classes,
//! with matching normalisation statistics and diverse outputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::losses::recording::{recording_objective, sample_pairs, RecordingBreakdown, RecordingLossWeights};
use crate::model::{Classifier, Generator, GeneratorArch, Mode};
use crate::optim::{Optimizer, OptimizerSpec, StepDecay};
use crate::tensor::Tensor;
use crate::trainers::common::{collect_grads, non_finite, sub_seed, StepLog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordingConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerSpec,
    pub schedule: StepDecay,
    pub weights: RecordingLossWeights,
    pub generator: GeneratorArch,
    /// Noise batches used to re-estimate the generator's normalisation
    /// statistics once training ends.
    pub recalibration_batches: usize,
    pub seed: u64,
}

impl RecordingConfig {
    /// Paper-scale schedule for a DCGAN generator producing `[c, side, side]` images.
    pub fn paper(channels: usize, side: usize) -> Self {
        Self {
            epochs: 500,
            steps_per_epoch: 100,
            batch_size: 512,
            learning_rate: 0.01,
            optimizer: OptimizerSpec::generator_default(),
            schedule: StepDecay::none(),
            weights: RecordingLossWeights::default(),
            generator: GeneratorArch::dcgan(channels, side),
            recalibration_batches: 8,
            seed: 0,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("recording batch size must be at least 2".into()));
        }
        if self.epochs == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config("recording needs at least one epoch of at least one step".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        self.optimizer.validate()?;
        self.weights.validate()
    }
}

pub struct RecordingOutcome {
    pub generator: Generator,
    /// Columns `step, l_oh, l_cd, l_bn, l_div, total`.
    pub log: StepLog,
    pub final_breakdown: RecordingBreakdown,
    pub teacher_digest: String,
}

pub const RECORDING_COLUMNS: [&str; 6] = ["step", "l_oh", "l_cd", "l_bn", "l_div", "total"];

/// Trains a fresh generator against the frozen `teacher`.
pub fn record_knowledge(teacher: &Classifier, cfg: &RecordingConfig) -> Result<RecordingOutcome> {
    cfg.validate()?;
    let stored = teacher.extract_bn_stats()?;
    if cfg.generator.out_shape != teacher.arch().input {
        return Err(Error::Config(format!(
            "generator emits {:?} but the classifier expects {:?}",
            cfg.generator.out_shape,
            teacher.arch().input
        )));
    }
    let digest_before = teacher.digest();
    let mut generator = Generator::new(cfg.generator.clone(), teacher.num_classes(), sub_seed(cfg.seed, "generator-init"))?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "recording-noise"));
    let pair_seed = sub_seed(cfg.seed, "recording-pairs");
    let mut opt = Optimizer::new(cfg.optimizer.clone());
    let mut log = StepLog::new(&RECORDING_COLUMNS);
    let total = cfg.total_steps();
    let mut last = RecordingBreakdown::default();
    for step in 0..total {
        let noise = Tensor::randn(&[cfg.batch_size, generator.noise_dim()], 1.0, &mut noise_rng);
        let mut tape = Tape::new();
        let gvars = generator.bind(&mut tape, true);
        let tvars = teacher.bind(&mut tape, false);
        let z = tape.constant(noise);
        let gen = generator.forward_on(&mut tape, &gvars, z, Mode::Train)?;
        let out = teacher.forward_on(&mut tape, &tvars, gen.images, Mode::Eval)?;
        let mut pair_rng = ChaCha8Rng::seed_from_u64(pair_seed ^ step as u64);
        let pairs = sample_pairs(cfg.batch_size, cfg.weights.pair_count, &mut pair_rng)?;
        let terms = recording_objective(
            &mut tape,
            gen.images,
            out.logits,
            &out.bn_inputs,
            &stored,
            &cfg.weights,
            &pairs,
        )?;
        let b = terms.breakdown(&tape);
        if !b.is_finite() {
            return Err(non_finite(step, b.as_map()));
        }
        let grads = tape.backward(terms.total);
        let g = collect_grads(&grads, &gvars, &generator.params());
        if g.iter().any(|t| !t.all_finite()) {
            return Err(non_finite(step, b.as_map()));
        }
        let lr = cfg.schedule.lr_at(cfg.learning_rate, step, total);
        opt.step(&mut generator.params_mut(), &g, lr)?;
        generator.update_running_stats(&gen.batch_stats);
        log.push(vec![step as f64, b.one_hot, b.class_diversity, b.bn_alignment, b.pair_diversity, b.total]);
        last = b;
    }
    let recal: Vec<Tensor> = (0..cfg.recalibration_batches)
        .map(|_| Tensor::randn(&[cfg.batch_size, generator.noise_dim()], 1.0, &mut noise_rng))
        .collect();
    generator.recalibrate(&recal)?;
    let digest_after = teacher.digest();
    if digest_after != digest_before {
        return Err(Error::Config("teacher parameters changed during recording".into()));
    }
    log::debug!("recording finished after {total} steps: {last:?}");
    Ok(RecordingOutcome { generator, log, final_breakdown: last, teacher_digest: digest_after })
}
