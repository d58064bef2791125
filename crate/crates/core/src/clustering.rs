//! k-means quantisation of time-pooled spectrograms.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::audio::LogMelSpectrogram;
use crate::error::{Result, SlicerError};
use crate::seed;

/// Mean over time of each frequency row.
pub fn pool_features(spec: &LogMelSpectrogram) -> Vec<f64> {
    let t = spec.n_frames() as f64;
    (0..spec.n_mels())
        .map(|f| spec.row(f).iter().sum::<f64>() / t)
        .collect()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansModel {
    k: usize,
    dim: usize,
    /// Row-major `[k][dim]`.
    centroids: Vec<f64>,
}

impl KMeansModel {
    pub fn new(k: usize, dim: usize, centroids: Vec<f64>) -> Result<Self> {
        if k == 0 || dim == 0 || centroids.len() != k * dim {
            return Err(SlicerError::Shape {
                context: "kmeans model",
                detail: format!("k={k} dim={dim} with {} values", centroids.len()),
            });
        }
        if centroids.iter().any(|c| !c.is_finite()) {
            return Err(SlicerError::InvalidInput("non-finite centroid".into()));
        }
        Ok(Self { k, dim, centroids })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }

    pub fn centroid(&self, i: usize) -> &[f64] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    /// Nearest centroid; ties go to the lowest index.
    pub fn assign(&self, v: &[f64]) -> usize {
        assert_eq!(v.len(), self.dim, "vector dimension mismatch");
        let mut best = (0, f64::INFINITY);
        for i in 0..self.k {
            let d = squared_distance(v, self.centroid(i));
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    pub fn assign_spectrogram(&self, spec: &LogMelSpectrogram) -> Result<usize> {
        if spec.n_mels() != self.dim {
            return Err(SlicerError::Shape {
                context: "assign_centroid",
                detail: format!("{} mel bins vs {}-d centroids", spec.n_mels(), self.dim),
            });
        }
        Ok(self.assign(&pool_features(spec)))
    }

    /// Sum of squared distances from each point to its nearest centroid.
    pub fn inertia(&self, points: &[Vec<f64>]) -> f64 {
        points
            .iter()
            .map(|p| squared_distance(p, self.centroid(self.assign(p))))
            .sum()
    }

    pub fn distance_matrix(&self) -> CentroidDistanceMatrix {
        let k = self.k;
        let mut values = vec![0.0; k * k];
        for i in 0..k {
            for j in i + 1..k {
                let d = squared_distance(self.centroid(i), self.centroid(j)).sqrt();
                values[i * k + j] = d;
                values[j * k + i] = d;
            }
        }
        CentroidDistanceMatrix { k, values }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentroidDistanceMatrix {
    k: usize,
    values: Vec<f64>,
}

impl CentroidDistanceMatrix {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.k + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.k..(i + 1) * self.k]
    }

    /// Builds a matrix directly from values, for constructed scenarios.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.len();
        if k == 0 || rows.iter().any(|r| r.len() != k) {
            return Err(SlicerError::Shape {
                context: "centroid distance matrix",
                detail: "rows must form a non-empty square matrix".into(),
            });
        }
        Ok(Self {
            k,
            values: rows.concat(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub model: KMeansModel,
    /// Within-cluster SSE after each assignment step.
    pub sse_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.gen_range(0.0..total);
            let mut pick = d2.iter().rposition(|&d| d > 0.0).expect("total > 0");
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.gen_range(0..points.len())
        };
        let c = points[next].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Independent k-means++ starts tried by [`kmeans_fit`].
pub const RESTARTS: usize = 10;

/// [`kmeans_fit_restarts`] with [`RESTARTS`] starts.
pub fn kmeans_fit(points: &[Vec<f64>], k: usize, seed: u64, max_iters: usize) -> Result<KMeansFit> {
    kmeans_fit_restarts(points, k, seed, max_iters, RESTARTS)
}

/// Runs Lloyd from `restarts` k-means++ seedings drawn in sequence from the
/// seed's stream and keeps the run with the lowest final SSE (earliest on
/// ties).
pub fn kmeans_fit_restarts(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iters: usize,
    restarts: usize,
) -> Result<KMeansFit> {
    if k == 0 {
        return Err(SlicerError::InvalidInput("k must be at least 1".into()));
    }
    if points.len() < k {
        return Err(SlicerError::InvalidInput(format!(
            "k-means needs at least k={k} points, got {}",
            points.len()
        )));
    }
    if max_iters == 0 || restarts == 0 {
        return Err(SlicerError::InvalidInput(
            "max_iters and restarts must be at least 1".into(),
        ));
    }
    let dim = points[0].len();
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(SlicerError::InvalidInput(
            "points must share a positive dimension".into(),
        ));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(SlicerError::InvalidInput(
            "non-finite point coordinate".into(),
        ));
    }

    let mut rng = seed::subsystem_rng(seed, seed::KMEANS);
    let mut best: Option<(f64, KMeansFit)> = None;
    for _ in 0..restarts {
        let fit = lloyd(points, k, max_iters, &mut rng)?;
        let sse = fit.model.inertia(points);
        if best.as_ref().map_or(true, |(b, _)| sse < *b) {
            best = Some((sse, fit));
        }
    }
    Ok(best.expect("at least one restart").1)
}

/// One Lloyd run from a k-means++ seeding.
///
/// A centroid left without points is moved onto the point farthest from its
/// own centroid; a centroid that coincides with an earlier one is treated the
/// same way, as long as a point at positive distance exists.
fn lloyd(
    points: &[Vec<f64>],
    k: usize,
    max_iters: usize,
    rng: &mut ChaCha8Rng,
) -> Result<KMeansFit> {
    let dim = points[0].len();
    let mut centroids = kmeans_pp(points, k, rng);
    let mut assignment: Vec<usize> = vec![usize::MAX; points.len()];
    let mut sse_history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    let nearest = |c: &[Vec<f64>], p: &[f64]| -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (i, ci) in c.iter().enumerate() {
            let d = squared_distance(p, ci);
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    };

    while iterations < max_iters {
        iterations += 1;
        let mut changed = false;
        let mut sse = 0.0;
        for (a, p) in assignment.iter_mut().zip(points) {
            let (i, d) = nearest(&centroids, p);
            sse += d;
            if *a != i {
                *a = i;
                changed = true;
            }
        }
        sse_history.push(sse);
        if !changed {
            converged = true;
            break;
        }

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assignment.iter().zip(points) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let mut taken = vec![false; points.len()];
        for c in 0..k {
            let duplicate = centroids[..c].iter().any(|o| *o == centroids[c]);
            if counts[c] == 0 || duplicate {
                // Farthest point from its currently assigned centroid.
                let far = points
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !taken[*i])
                    .map(|(i, p)| (i, squared_distance(p, &centroids[assignment[i]])))
                    .fold(
                        (0, -1.0),
                        |best, cur| if cur.1 > best.1 { cur } else { best },
                    );
                if far.1 > 0.0 {
                    centroids[c] = points[far.0].clone();
                    taken[far.0] = true;
                }
            }
        }
    }

    let model = KMeansModel::new(k, dim, centroids.concat())?;
    Ok(KMeansFit {
        model,
        sse_history,
        iterations,
        converged,
    })
}

/// Fits on the pooled features of every `stride`-th spectrogram, where the
/// stride is chosen so roughly `fraction` of the corpus is used (at least k
/// items).
pub fn fit_on_corpus(
    corpus: &[std::sync::Arc<LogMelSpectrogram>],
    fraction: f64,
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<KMeansFit> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(SlicerError::config("kmeans_fraction", "must lie in (0, 1]"));
    }
    let want = ((corpus.len() as f64 * fraction).round() as usize)
        .max(k)
        .min(corpus.len());
    let points: Vec<Vec<f64>> = (0..want)
        .map(|i| pool_features(&corpus[i * corpus.len() / want.max(1)]))
        .collect();
    kmeans_fit(&points, k, seed, max_iters)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn pooling_examples() {
        let c = LogMelSpectrogram::filled(3, 4, 2.5).unwrap();
        assert_eq!(pool_features(&c), vec![2.5; 3]);
        let one = LogMelSpectrogram::new(2, 1, vec![1.0, -3.0]).unwrap();
        assert_eq!(pool_features(&one), vec![1.0, -3.0]);
        let two = LogMelSpectrogram::new(2, 2, vec![1.0, 3.0, -2.0, 6.0]).unwrap();
        assert_eq!(pool_features(&two), vec![2.0, 2.0]);
    }

    #[test]
    fn two_points_two_clusters() {
        let pts = vec![vec![0.0; 128], vec![10.0; 128]];
        let fit = kmeans_fit(&pts, 2, 1, 100).unwrap();
        assert_eq!(fit.model.inertia(&pts), 0.0);
        let mut cs = vec![
            fit.model.centroid(0).to_vec(),
            fit.model.centroid(1).to_vec(),
        ];
        cs.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(cs, pts);
    }

    #[test]
    fn k_equals_n_gives_each_point_a_centroid() {
        let pts: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let fit = kmeans_fit(&pts, 5, 7, 100).unwrap();
        for p in &pts {
            assert_eq!(fit.model.centroid(fit.model.assign(p)), p.as_slice());
        }
    }

    #[test]
    fn too_few_points_is_an_error() {
        assert!(kmeans_fit(&[vec![1.0]], 2, 0, 10).is_err());
    }

    #[test]
    fn tie_goes_to_lowest_index() {
        let m = KMeansModel::new(
            5,
            2,
            vec![9.0, 9.0, 1.0, 0.0, 9.0, 8.0, 7.0, 9.0, -1.0, 0.0],
        )
        .unwrap();
        assert_eq!(m.assign(&[0.0, 0.0]), 1);
        assert_eq!(m.assign(&[7.0, 9.0]), 3);
    }

    #[test]
    fn assignment_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m =
            KMeansModel::new(7, 4, (0..28).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        for _ in 0..200 {
            let v: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let dists: Vec<f64> = (0..7)
                .map(|i| {
                    (0..4)
                        .map(|d| (v[d] - m.centroid(i)[d]).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            let mut best = 0;
            for i in 1..7 {
                if dists[i] < dists[best] {
                    best = i;
                }
            }
            assert_eq!(m.assign(&v), best);
        }
    }

    #[test]
    fn distance_matrix_examples() {
        let one = KMeansModel::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(one.distance_matrix().row(0), &[0.0]);
        let mut c = vec![0.0; 256];
        c[128] = 3.0;
        c[129] = 4.0;
        let two = KMeansModel::new(2, 128, c).unwrap();
        let d = two.distance_matrix();
        assert_eq!(d.row(0), &[0.0, 5.0]);
        assert_eq!(d.row(1), &[5.0, 0.0]);
    }

    #[test]
    fn distance_matrix_matches_independent_routine() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m =
            KMeansModel::new(6, 5, (0..30).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        let d = m.distance_matrix();
        for i in 0..6 {
            assert_eq!(d.get(i, i), 0.0);
            for j in 0..6 {
                let mut acc = 0.0f64;
                for t in 0..5 {
                    acc = acc.hypot(m.centroid(i)[t] - m.centroid(j)[t]);
                }
                assert!((d.get(i, j) - acc).abs() < 1e-12);
                assert!((d.get(i, j) - d.get(j, i)).abs() < 1e-12);
                for l in 0..6 {
                    assert!(d.get(i, j) <= d.get(i, l) + d.get(l, j) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn empty_cluster_is_reseeded_and_centroids_distinct() {
        // Many duplicates force reseeding.
        let mut pts = vec![vec![0.0, 0.0]; 6];
        pts.push(vec![5.0, 5.0]);
        pts.push(vec![5.0, 6.0]);
        pts.push(vec![-4.0, 1.0]);
        for seed in 0..20 {
            let fit = kmeans_fit(&pts, 3, seed, 100).unwrap();
            let m = &fit.model;
            for i in 0..3 {
                for j in 0..i {
                    assert_ne!(m.centroid(i), m.centroid(j), "seed {seed}");
                }
            }
            for w in fit.sse_history.windows(2) {
                assert!(w[1] <= w[0] + 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..3).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect();
        let a = kmeans_fit(&pts, 4, 2, 100).unwrap();
        let b = kmeans_fit(&pts, 4, 2, 100).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.sse_history, b.sse_history);
    }
}
