//! Sampling statistics of the k-mix window and of plain FIFO mixing.

use std::collections::HashSet;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slicer_core::audio::LogMelSpectrogram;
use slicer_core::augment::{
    fifo_sample_counterpart, kmix_sample_counterpart, kmix_window, MixQueue,
};
use slicer_core::clustering::CentroidDistanceMatrix;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Centroids on a line at 0, 1 and 3.
fn line_distances() -> CentroidDistanceMatrix {
    CentroidDistanceMatrix::from_rows(&[
        vec![0.0, 1.0, 3.0],
        vec![1.0, 0.0, 2.0],
        vec![3.0, 2.0, 0.0],
    ])
    .unwrap()
}

/// 30 entries: centroid pattern 2,1,2,0,1,2 repeated, so 5 / 10 / 15.
fn queue() -> MixQueue {
    let mut q = MixQueue::new(30).unwrap();
    let pattern = [2, 1, 2, 0, 1, 2];
    for i in 0..30 {
        let s = LogMelSpectrogram::filled(2, 2, i as f64).unwrap();
        q.push(Arc::new(s), Some(pattern[i % 6]));
    }
    q
}

/// Expected window computed directly from the construction: all entries of
/// the farthest centroid oldest first, then the next farthest, and so on.
fn analytic_window(q: &MixQueue, order: &[usize], r: usize) -> Vec<u64> {
    let mut out = Vec::new();
    for &c in order {
        out.extend(
            q.entries()
                .filter(|e| e.centroid == Some(c))
                .map(|e| e.counter),
        );
    }
    out.truncate(r);
    out
}

#[test]
fn kmix_samples_stay_in_the_top_r_window() {
    let q = queue();
    let dist = line_distances();
    // (anchor centroid, farthest-first centroid order, r)
    for (x, order, r) in [
        (0, [2, 1, 0], 12),
        (0, [2, 1, 0], 20),
        (2, [0, 1, 2], 4),
        (1, [2, 0, 1], 17),
    ] {
        let expected = analytic_window(&q, &order, r);
        let window: Vec<u64> = kmix_window(&q, &dist, x, r)
            .unwrap()
            .into_iter()
            .map(|i| q.get(i).unwrap().counter)
            .collect();
        assert_eq!(window, expected, "anchor {x}, r {r}");
        let allowed: HashSet<u64> = expected.iter().copied().collect();
        let mut seen = HashSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(x as u64 * 100 + r as u64);
        for _ in 0..1000 {
            let e = kmix_sample_counterpart(&q, &dist, x, r, &mut rng).unwrap();
            assert!(
                allowed.contains(&e.counter),
                "counter {} outside window",
                e.counter
            );
            seen.insert(e.counter);
        }
        assert_eq!(
            seen, allowed,
            "uniform draws should reach every window slot"
        );
    }
}

fn chi_square_p(observed: &[f64], expected: &[f64]) -> f64 {
    let stat: f64 = observed
        .iter()
        .zip(expected)
        .map(|(o, e)| (o - e).powi(2) / e)
        .sum();
    1.0 - ChiSquared::new((observed.len() - 1) as f64)
        .unwrap()
        .cdf(stat)
}

#[test]
fn fifo_centroid_frequencies_match_queue_composition() {
    let q = queue();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut counts = [0.0; 3];
    for _ in 0..1000 {
        let e = fifo_sample_counterpart(&q, &mut rng).unwrap();
        counts[e.centroid.unwrap()] += 1.0;
    }
    let expected = [
        1000.0 * 5.0 / 30.0,
        1000.0 * 10.0 / 30.0,
        1000.0 * 15.0 / 30.0,
    ];
    let p = chi_square_p(&counts, &expected);
    println!("fifo centroid counts {counts:?}, chi-square p = {p:.4}");
    assert!(p > 0.01);
}

/// Under uniform draws the 20 p-values are themselves uniform, so more than
/// two below 0.01 would be a strong sign of bias.
#[test]
fn kmix_draws_are_uniform_within_the_window() {
    let q = queue();
    let dist = line_distances();
    let window = kmix_window(&q, &dist, 0, 8).unwrap();
    let mut small = 0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut counts = vec![0.0; 8];
        for _ in 0..4000 {
            let e = kmix_sample_counterpart(&q, &dist, 0, 8, &mut rng).unwrap();
            let slot = window
                .iter()
                .position(|&i| q.get(i).unwrap().counter == e.counter)
                .unwrap();
            counts[slot] += 1.0;
        }
        if chi_square_p(&counts, &[500.0; 8]) < 0.01 {
            small += 1;
        }
    }
    assert!(small <= 2, "{small}/20 seeds rejected uniformity");
}

#[test]
fn empty_queue_is_an_error() {
    let q = MixQueue::new(4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(kmix_sample_counterpart(&q, &line_distances(), 0, 2, &mut rng).is_err());
    assert!(fifo_sample_counterpart(&q, &mut rng).is_err());
}
