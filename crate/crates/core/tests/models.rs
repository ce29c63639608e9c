use genreplay_core::autograd::Tape;
use genreplay_core::model::layers::BN_MOMENTUM;
use genreplay_core::model::{ArchSpec, Classifier, Generator, GeneratorArch, Mode};
use genreplay_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn train_forward(model: &Classifier, images: &Tensor) -> Vec<genreplay_core::model::BnStats> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let x = tape.constant(images.clone());
    model.forward_on(&mut tape, &vars, x, Mode::Train).unwrap().batch_stats
}

#[test]
fn running_mean_tracks_an_exponential_average() {
    let mut model = Classifier::new(ArchSpec::desk(1, 8), 3, 1).unwrap();
    let images = Tensor::full(&[4, 1, 8, 8], 0.7);
    let mut oracle: Vec<Vec<f64>> = model.extract_bn_stats().unwrap().iter().map(|s| s.mean.clone()).collect();
    let mut batch_means = Vec::new();
    for _ in 0..200 {
        let stats = train_forward(&model, &images);
        for (o, s) in oracle.iter_mut().zip(&stats) {
            for (m, b) in o.iter_mut().zip(&s.mean) {
                *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * b;
            }
        }
        batch_means = stats.iter().map(|s| s.mean.clone()).collect();
        model.update_running_stats(&stats);
    }
    let stored = model.extract_bn_stats().unwrap();
    for (layer, (o, s)) in oracle.iter().zip(&stored).enumerate() {
        for (c, (a, b)) in o.iter().zip(&s.mean).enumerate() {
            assert!((a - b).abs() < 1e-9, "layer {layer} channel {c}: oracle {a} stored {b}");
        }
    }
    // The parameters never change here, so the batch mean is constant and the
    // running mean converges to it.
    for (s, b) in stored.iter().zip(&batch_means) {
        for (a, c) in s.mean.iter().zip(b) {
            assert!((a - c).abs() < 1e-6 * c.abs().max(1.0));
        }
    }
}

#[test]
fn head_expansion_keeps_old_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let images = Tensor::randn(&[5, 1, 8, 8], 1.0, &mut rng);
    let mut model = Classifier::new(ArchSpec::desk(1, 8), 4, 2).unwrap();
    let before = model.logits(&images).unwrap();
    model.expand_head(3, 9).unwrap();
    let after = model.logits(&images).unwrap();
    assert_eq!(after.row_len(), 7);
    assert_eq!(after.slice_cols(0, 4), before);
    assert_eq!(model.head_widths(), vec![4, 3]);
}

#[test]
fn eval_forward_is_deterministic_and_batch_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let images = Tensor::randn(&[6, 1, 8, 8], 1.0, &mut rng);
    let model = Classifier::new(ArchSpec::desk(1, 8), 3, 5).unwrap();
    let all = model.logits(&images).unwrap();
    assert_eq!(all, model.logits(&images).unwrap());
    let tail = model.logits(&images.select_rows(&[3, 4, 5])).unwrap();
    for (i, r) in [3, 4, 5].into_iter().enumerate() {
        for (a, b) in all.row(r).iter().zip(tail.row(i)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn generator_is_seeded_and_matches_its_output_shape() {
    let arch = GeneratorArch::desk(1, 8);
    let a = Generator::new(arch.clone(), 4, 7).unwrap();
    let b = Generator::new(arch.clone(), 4, 7).unwrap();
    let c = Generator::new(arch, 4, 8).unwrap();
    assert_eq!(a.digest(), b.digest());
    assert_ne!(a.digest(), c.digest());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let out = a.generate(&Tensor::randn(&[3, a.noise_dim()], 1.0, &mut rng)).unwrap();
    assert_eq!(out.shape(), &[3, 1, 8, 8]);
}
