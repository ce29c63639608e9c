//! Analytic gradients of the recording and inheritance objectives against
//! central finite differences on desk networks. Shared by the gradient tests
//! and the acceptance suite.

use genreplay_core::autograd::Tape;
use genreplay_core::data::{synthetic, SyntheticSpec};
use genreplay_core::losses::inheritance::{cross_entropy_term, inheritance_term, kd_term};
use genreplay_core::losses::recording::{recording_objective, sample_pairs};
use genreplay_core::losses::RecordingLossWeights;
use genreplay_core::model::{ArchSpec, Classifier, Generator, GeneratorArch, Mode};
use genreplay_core::optim::{OptimizerSpec, StepDecay};
use genreplay_core::task_stream::{materialize_tasks, SequenceSkeleton, TaskSequence};
use genreplay_core::trainers::{expanded_student, train_initial, Augment, ClassifierTrainConfig};
use genreplay_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-3;
pub const PROBES: usize = 120;

#[derive(Debug, Default)]
pub struct GradSummary {
    pub checked: usize,
    /// Probes dropped because they straddle a ReLU kink.
    pub kinks: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

impl GradSummary {
    pub fn passed(&self) -> bool {
        self.checked >= 100 && self.failures.is_empty()
    }
}

fn sequence(classes: usize, seed: u64, sets: Vec<Vec<usize>>) -> TaskSequence {
    let ds = synthetic(&SyntheticSpec { train_per_class: 24, eval_per_class: 8, ..SyntheticSpec::desk(classes, seed) })
        .unwrap();
    materialize_tasks(&ds, &SequenceSkeleton::explicit("gradcheck", 0, sets).unwrap()).unwrap()
}

fn teacher(seq: &TaskSequence, seed: u64) -> Classifier {
    let cfg = ClassifierTrainConfig {
        epochs: 2,
        batch_size: 16,
        learning_rate: 0.01,
        optimizer: OptimizerSpec::classifier_default(),
        schedule: StepDecay::none(),
        augment: Augment::default(),
        seed,
    };
    train_initial(&ArchSpec::desk(1, 8), &seq.tasks[0], &cfg).unwrap().0
}

/// Draws parameter coordinates spread over every tensor, then compares the
/// analytic gradient with `(f(θ+h) − f(θ−h)) / 2h`. Coordinates where the one-sided
/// differences disagree sit on a ReLU kink and are replaced by fresh draws.
fn check_probes<F>(params: &[Tensor], analytic: &[Tensor], loss_at: F, seed: u64) -> GradSummary
where
    F: Fn(&[Tensor]) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = loss_at(params);
    let mut s = GradSummary::default();
    while s.checked < PROBES && s.kinks < PROBES {
        let tensor = s.checked % params.len();
        let elem = rng.random_range(0..params[tensor].numel());
        let at = |delta: f64| {
            let mut shifted = params.to_vec();
            shifted[tensor].data_mut()[elem] += delta;
            loss_at(&shifted)
        };
        let (up, down) = (at(H), at(-H));
        let fwd = (up - base) / H;
        let bwd = (base - down) / H;
        if (fwd - bwd).abs() > 1e-2 * fwd.abs().max(bwd.abs()).max(1e-3) {
            s.kinks += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * H);
        let a = analytic[tensor].data()[elem];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        if rel > TOL {
            s.failures.push(format!("tensor {tensor} elem {elem}: analytic {a:e} numeric {numeric:e} rel {rel:e}"));
        }
        s.worst = s.worst.max(rel);
        s.checked += 1;
    }
    s
}

fn with_params(gen: &Generator, params: &[Tensor]) -> Generator {
    let mut g = gen.clone();
    for (dst, src) in g.params_mut().into_iter().zip(params) {
        *dst = src.clone();
    }
    g
}

fn with_classifier_params(model: &Classifier, params: &[Tensor]) -> Classifier {
    let mut m = model.clone();
    for (dst, src) in m.params_mut().into_iter().zip(params) {
        *dst = src.clone();
    }
    m
}

fn recording_value(
    generator: &Generator,
    teacher: &Classifier,
    noise: &Tensor,
    weights: &RecordingLossWeights,
    pairs: &[(usize, usize)],
) -> (f64, Vec<Tensor>) {
    let stored = teacher.extract_bn_stats().unwrap();
    let mut tape = Tape::new();
    let gvars = generator.bind(&mut tape, true);
    let tvars = teacher.bind(&mut tape, false);
    let z = tape.constant(noise.clone());
    let gen = generator.forward_on(&mut tape, &gvars, z, Mode::Train).unwrap();
    let out = teacher.forward_on(&mut tape, &tvars, gen.images, Mode::Eval).unwrap();
    let terms =
        recording_objective(&mut tape, gen.images, out.logits, &out.bn_inputs, &stored, weights, pairs).unwrap();
    let value = tape.scalar(terms.total);
    let grads = tape.backward(terms.total);
    let g = gvars
        .iter()
        .zip(generator.params())
        .map(|(v, p)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    (value, g)
}

/// Gradient of the recording objective with respect to the generator, with a
/// briefly trained 2-class desk classifier as the frozen teacher.
pub fn recording_summary() -> GradSummary {
    let seq = sequence(2, 11, vec![vec![0, 1]]);
    let teacher = teacher(&seq, 3);
    let generator = Generator::new(GeneratorArch::desk(1, 8), 2, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let noise = Tensor::randn(&[12, generator.noise_dim()], 1.0, &mut rng);
    let weights = RecordingLossWeights::default();
    let pairs = sample_pairs(12, weights.pair_count, &mut rng).unwrap();

    let params: Vec<Tensor> = generator.params().into_iter().cloned().collect();
    let (_, analytic) = recording_value(&generator, &teacher, &noise, &weights, &pairs);
    check_probes(
        &params,
        &analytic,
        |p| recording_value(&with_params(&generator, p), &teacher, &noise, &weights, &pairs).0,
        23,
    )
}

fn inheritance_value(
    student: &Classifier,
    images: &Tensor,
    teacher_logits: &Tensor,
    gen_rows: &[usize],
    real_rows: &[usize],
    labels: &[usize],
    k_old: usize,
    lam4: f64,
) -> (f64, Vec<Tensor>) {
    let k_all = student.num_classes();
    let mut tape = Tape::new();
    let vars = student.bind(&mut tape, true);
    let x = tape.constant(images.clone());
    let out = student.forward_on(&mut tape, &vars, x, Mode::Train).unwrap();
    let new_cols = tape.slice_cols(out.logits, k_old, k_all);
    let new_real = tape.gather_rows(new_cols, real_rows);
    let ce = cross_entropy_term(&mut tape, new_real, labels).unwrap();
    let old_cols = tape.slice_cols(out.logits, 0, k_old);
    let g_student = tape.gather_rows(old_cols, gen_rows);
    let gkd = kd_term(&mut tape, &teacher_logits.select_rows(gen_rows), g_student, 2.0).unwrap();
    let n_student = tape.gather_rows(old_cols, real_rows);
    let nkd = kd_term(&mut tape, &teacher_logits.select_rows(real_rows), n_student, 2.0).unwrap();
    let loss = inheritance_term(&mut tape, ce, Some(gkd), Some(nkd), lam4);
    let value = tape.scalar(loss);
    let grads = tape.backward(loss);
    let g = vars
        .iter()
        .zip(student.params())
        .map(|(v, p)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    (value, g)
}

/// Gradient of the inheritance objective (ce, generated and new-image
/// distillation) with respect to the expanded student.
pub fn inheritance_summary() -> GradSummary {
    let seq = sequence(4, 13, vec![vec![0, 1], vec![2, 3]]);
    let teacher = teacher(&seq, 4);
    let student = expanded_student(&teacher, 2, 9).unwrap();
    let generator = Generator::new(GeneratorArch::desk(1, 8), 2, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let generated = generator.generate(&Tensor::randn(&[6, generator.noise_dim()], 1.0, &mut rng)).unwrap();
    let real_idx: Vec<usize> = (0..6).map(|_| rng.random_range(0..seq.tasks[1].train.len())).collect();
    let real = seq.tasks[1].train.subset(&real_idx);
    let labels: Vec<usize> = real.labels().iter().map(|&c| c - 2).collect();
    let images = Tensor::cat_rows(&[&generated, real.images()]).unwrap();
    let teacher_logits = teacher.logits(&images).unwrap();
    let gen_rows: Vec<usize> = (0..6).collect();
    let real_rows: Vec<usize> = (6..12).collect();
    let lam4 = 0.5;

    let params: Vec<Tensor> = student.params().into_iter().cloned().collect();
    let run = |m: &Classifier| inheritance_value(m, &images, &teacher_logits, &gen_rows, &real_rows, &labels, 2, lam4);
    let (_, analytic) = run(&student);
    check_probes(&params, &analytic, |p| run(&with_classifier_params(&student, p)).0, 31)
}
