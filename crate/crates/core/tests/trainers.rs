mod common;

use genreplay_core::losses::{DistillConfig, Lambda4};
use genreplay_core::trainers::{
    build_balanced_batch, inherit_knowledge, record_knowledge, run_sequence, train_finetune, train_lwf,
    InheritanceConfig, Method, ReplayRatio, SequenceConfig, StarvationPolicy,
};
use genreplay_core::model::{ArchSpec, Classifier, Generator};
use genreplay_core::data::LabeledSet;
use genreplay_core::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

struct Fixture {
    seq: genreplay_core::task_stream::TaskSequence,
    teacher: Classifier,
    generator: Generator,
}

/// Two 2-class tasks, a trained teacher on the first and a generator recorded from it.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let ds = common::small_dataset(4, 21);
        let seq = common::sequence(&ds, vec![vec![0, 1], vec![2, 3]]);
        let teacher = common::teacher(&seq, 6, 1);
        let generator = record_knowledge(&teacher, &common::recording_cfg(150, 64, 2)).unwrap().generator;
        Fixture { seq, teacher, generator }
    })
}

fn first_rows(rows: &[Vec<f64>], n: usize) -> Vec<Vec<f64>> {
    assert!(rows.len() >= n, "only {} steps logged", rows.len());
    rows[..n].to_vec()
}

#[test]
fn replay_off_with_zero_lambda4_reproduces_finetune() {
    let f = fixture();
    let task = &f.seq.tasks[1];
    let train = common::train_cfg(4, 7);
    let ft = train_finetune(&f.teacher, task, &train).unwrap();
    let cfg = InheritanceConfig {
        train: train.clone(),
        replay: false,
        use_nkd: false,
        distill: DistillConfig { lambda4: Lambda4::Fixed(0.0), ..DistillConfig::default() },
        ..InheritanceConfig::default()
    };
    let ki = inherit_knowledge(&f.teacher, None, task, &cfg).unwrap();
    assert_eq!(first_rows(&ki.log.rows, 10), first_rows(&ft.log.rows, 10));
    assert_eq!(ki.log.rows, ft.log.rows);
    assert_eq!(ki.model.digest(), ft.model.digest());
}

#[test]
fn replay_off_with_scheduled_lambda4_reproduces_lwf() {
    let f = fixture();
    let task = &f.seq.tasks[1];
    let train = common::train_cfg(4, 8);
    let lwf = train_lwf(&f.teacher, task, &train, &DistillConfig::default()).unwrap();
    let cfg = InheritanceConfig { train, replay: false, use_nkd: true, ..InheritanceConfig::default() };
    let ki = inherit_knowledge(&f.teacher, None, task, &cfg).unwrap();
    assert_eq!(first_rows(&ki.log.rows, 10), first_rows(&lwf.log.rows, 10));
    assert_eq!(ki.log.rows, lwf.log.rows);
    assert_eq!(ki.model.digest(), lwf.model.digest());
    assert!(ki.log.column("lambda4").unwrap().iter().all(|&l| l == 0.5));
}

fn real_batch(task: &genreplay_core::task_stream::TaskSpec, n: usize, rng: &mut ChaCha8Rng) -> (LabeledSet, Vec<usize>) {
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..task.train.len())).collect();
    let set = task.train.subset(&idx);
    let labels = set.labels().iter().map(|c| task.class_set.iter().position(|x| x == c).unwrap()).collect();
    (set, labels)
}

fn check_balance(ratio: ReplayRatio) {
    let f = fixture();
    let task = &f.seq.tasks[1];
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..100 {
        let (real, labels) = real_batch(task, 16, &mut rng);
        let rb = build_balanced_batch(&f.generator, &f.teacher, &real, &labels, 2, ratio, 50, StarvationPolicy::Error, &mut rng).unwrap();
        let quota = ratio.quota(16, 2);
        assert_eq!(rb.generated_counts(2), vec![quota; 2]);
        assert_eq!(rb.generated.len(), 2 * quota);
        assert_eq!(rb.real.len(), 16);
        assert_eq!(rb.images.rows(), 2 * quota + 16);
        assert_eq!(rb.teacher_logits.rows(), rb.images.rows());
        let pseudo = rb.teacher_logits.select_rows(&rb.generated.clone().collect::<Vec<_>>()).argmax_rows();
        assert_eq!(pseudo, rb.pseudo_labels);
    }
}

#[test]
fn balanced_batches_meet_quota_at_one_to_one() {
    check_balance(ReplayRatio::default());
}

#[test]
fn balanced_batches_meet_quota_at_three_to_one() {
    check_balance("3:1".parse().unwrap());
}

#[test]
fn starved_class_raises_balance_failure() {
    let f = fixture();
    let mut starved = f.teacher.clone();
    let bias = starved.params_mut().pop().unwrap();
    bias.data_mut()[1] = -1e6;
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let (real, labels) = real_batch(&f.seq.tasks[1], 16, &mut rng);
    let err = build_balanced_batch(&f.generator, &starved, &real, &labels, 2, ReplayRatio::default(), 5, StarvationPolicy::Error, &mut rng)
        .unwrap_err();
    match err {
        Error::BalanceFailure { starving, attempts } => {
            assert_eq!(starving, vec![1]);
            assert_eq!(attempts, 2 * ReplayRatio::default().quota(16, 2) * 5);
        }
        other => panic!("expected a balance failure, got {other:?}"),
    }
}

#[test]
fn top_up_fills_a_starved_class_with_its_best_candidates() {
    let f = fixture();
    let mut starved = f.teacher.clone();
    let bias = starved.params_mut().pop().unwrap();
    bias.data_mut()[1] = -1e6;
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let (real, labels) = real_batch(&f.seq.tasks[1], 16, &mut rng);
    let quota = ReplayRatio::default().quota(16, 2);
    let rb = build_balanced_batch(&f.generator, &starved, &real, &labels, 2, ReplayRatio::default(), 5, StarvationPolicy::TopUp, &mut rng)
        .unwrap();
    assert_eq!(rb.generated_counts(2), vec![quota, quota]);
    assert_eq!(rb.topped_up, quota);
    let accepted = rb.teacher_logits.select_rows(&rb.generated.clone().collect::<Vec<_>>());
    let top_up_rows: Vec<usize> = (0..rb.pseudo_labels.len()).filter(|&i| rb.pseudo_labels[i] == 1).collect();
    assert!(top_up_rows.iter().all(|&i| accepted.row(i)[0] > accepted.row(i)[1]));
}

#[test]
fn teacher_is_untouched_by_recording_and_inheritance() {
    let f = fixture();
    let before = f.teacher.clone();
    let rec = record_knowledge(&f.teacher, &common::recording_cfg(5, 16, 3)).unwrap();
    assert_eq!(rec.teacher_digest, before.digest());
    let cfg = InheritanceConfig { train: common::train_cfg(1, 3), ..InheritanceConfig::default() };
    inherit_knowledge(&f.teacher, Some(&rec.generator), &f.seq.tasks[1], &cfg).unwrap();
    assert_eq!(f.teacher, before);
}

#[test]
fn recording_spreads_generated_images_over_both_classes() {
    let f = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let noise = Tensor::randn(&[2048, f.generator.noise_dim()], 1.0, &mut rng);
    let probs = f.teacher.logits(&f.generator.generate(&noise).unwrap()).unwrap().softmax_rows();
    let mut mean = [0.0; 2];
    for i in 0..probs.rows() {
        for (m, p) in mean.iter_mut().zip(probs.row(i)) {
            *m += p / probs.rows() as f64;
        }
    }
    let neg_entropy: f64 = mean.iter().map(|p| p * p.ln()).sum();
    let target = -(2f64).ln();
    assert!((neg_entropy - target).abs() <= 0.1 * target.abs(), "class-diversity term {neg_entropy} vs {target}");
}

#[test]
fn recording_and_inheritance_are_deterministic() {
    let f = fixture();
    let a = record_knowledge(&f.teacher, &common::recording_cfg(4, 16, 9)).unwrap();
    let b = record_knowledge(&f.teacher, &common::recording_cfg(4, 16, 9)).unwrap();
    assert_eq!(a.generator.digest(), b.generator.digest());
    assert_eq!(a.log.rows, b.log.rows);
    let c = record_knowledge(&f.teacher, &common::recording_cfg(4, 16, 10)).unwrap();
    assert_ne!(a.generator.digest(), c.generator.digest());

    let cfg = InheritanceConfig { train: common::train_cfg(1, 5), ..InheritanceConfig::default() };
    let x = inherit_knowledge(&f.teacher, Some(&a.generator), &f.seq.tasks[1], &cfg).unwrap();
    let y = inherit_knowledge(&f.teacher, Some(&a.generator), &f.seq.tasks[1], &cfg).unwrap();
    assert_eq!(x.model.digest(), y.model.digest());
    assert_eq!(x.log.rows, y.log.rows);
}

#[test]
fn replay_requires_a_matching_generator() {
    let f = fixture();
    let cfg = InheritanceConfig { train: common::train_cfg(1, 5), ..InheritanceConfig::default() };
    assert!(matches!(inherit_knowledge(&f.teacher, None, &f.seq.tasks[1], &cfg), Err(Error::Config(_))));
    let wide = Generator::new(f.generator.arch().clone(), 3, 0).unwrap();
    assert!(matches!(inherit_knowledge(&f.teacher, Some(&wide), &f.seq.tasks[1], &cfg), Err(Error::Config(_))));
}

#[test]
fn sequence_runs_every_method_with_the_same_initial_model() {
    let f = fixture();
    for method in [Method::Finetune, Method::Lwf, Method::OURS, Method::Oracle] {
        let cfg = SequenceConfig {
            method,
            arch: ArchSpec::desk(1, 8),
            initial: common::train_cfg(6, 1),
            incremental: common::train_cfg(1, 2),
            recording: common::recording_cfg(100, 64, 0),
            replay_ratio: ReplayRatio::default(),
            distill: DistillConfig::default(),
            rejection_budget: 50,
            starvation: StarvationPolicy::Error,
            seed: 4,
        };
        let out = run_sequence(&f.teacher, &f.seq, &cfg).unwrap();
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.checkpoints[0].digest(), f.teacher.digest());
        assert_eq!(out.checkpoints[1].num_classes(), 4);
        assert_eq!(out.generators[1].is_some(), method.uses_generator());
        assert!(out.records[0].old_only.is_none());
        assert!(out.records[1].old_only.is_some());
    }
}
