//! Linear probe behaviour on constructed embeddings and on a frozen
//! encoder.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slicer_autodiff::Tensor;
use slicer_core::audio::LogMelSpectrogram;
use slicer_core::eval::{embed_dataset, linear_probe, ProbeConfig};
use slicer_core::model::{EncoderConfig, EncoderParams};

/// Box-Muller standard normal.
fn normal(rng: &mut impl Rng) -> f64 {
    let u: f64 = 1.0 - rng.gen::<f64>();
    let v: f64 = rng.gen();
    (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
}

fn gaussian(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(vec![n, d], (0..n * d).map(|_| normal(rng)).collect()).unwrap()
}

#[test]
fn shuffled_labels_stay_near_chance() {
    let mut accs = Vec::new();
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = gaussian(400, 16, &mut rng);
        let mut labels: Vec<usize> = (0..400).map(|i| i % 4).collect();
        labels.shuffle(&mut rng);
        let r = linear_probe(&x, &labels, seed, &ProbeConfig::default()).unwrap();
        assert_eq!(r.n_test(), 80);
        accs.push(r.accuracy);
    }
    println!("shuffled-label accuracies {accs:?}");
    assert!(accs.iter().all(|&a| (0.10..=0.45).contains(&a)), "{accs:?}");
}

#[test]
fn accuracy_is_invariant_to_relabelling() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let centres: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..6).map(|_| normal(&mut rng)).collect())
        .collect();
    let labels: Vec<usize> = (0..120).map(|i| i % 4).collect();
    let data: Vec<f64> = labels
        .iter()
        .flat_map(|&c| {
            centres[c]
                .iter()
                .map(|v| v + 1.2 * normal(&mut rng))
                .collect::<Vec<_>>()
        })
        .collect();
    let x = Tensor::new(vec![120, 6], data).unwrap();
    let base = linear_probe(&x, &labels, 8, &ProbeConfig::default()).unwrap();
    assert!(
        base.accuracy > 0.25 && base.accuracy < 1.0,
        "{}",
        base.accuracy
    );
    let perm = [2, 0, 3, 1];
    let relabelled: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
    let r = linear_probe(&x, &relabelled, 8, &ProbeConfig::default()).unwrap();
    assert_eq!(r.accuracy, base.accuracy);
    for c in 0..4 {
        assert_eq!(r.per_class_accuracy[perm[c]], base.per_class_accuracy[c]);
    }
}

#[test]
fn embedding_is_frozen_and_deterministic() {
    let cfg = EncoderConfig {
        n_mels: 16,
        n_frames: 16,
        channels: [2, 4],
        conv_stride: 2,
        hidden: 8,
        embed_dim: 4,
    };
    let enc = EncoderParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let snapshot = enc.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut data: Vec<Arc<LogMelSpectrogram>> = (0..40)
        .map(|_| {
            Arc::new(
                LogMelSpectrogram::new(
                    16,
                    16,
                    (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
                .unwrap(),
            )
        })
        .collect();
    data.push(Arc::clone(&data[0]));
    let labels: Vec<usize> = (0..41).map(|i| i % 2).collect();

    let before = embed_dataset(&enc, &data).unwrap();
    assert_eq!(before.shape(), &[41, 4]);
    assert_eq!(before.row(0), before.row(40));
    linear_probe(&before, &labels, 0, &ProbeConfig::default()).unwrap();
    let after = embed_dataset(&enc, &data).unwrap();
    assert_eq!(before, after);
    assert_eq!(enc, snapshot);
    assert!(embed_dataset(&enc, &[]).is_err());
}
