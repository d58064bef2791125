//! View generation: log-domain mixup against a queue of past inputs (plain
//! FIFO or k-mix), followed by random resized crop.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::LogMelSpectrogram;
use crate::clustering::{pool_features, CentroidDistanceMatrix, KMeansModel};
use crate::error::{Result, SlicerError};
use crate::model::InputNorm;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Upper bound of the mixing ratio; 0 disables mixing.
    pub alpha: f64,
    /// Size of the farthest-first sampling window.
    pub r: usize,
    pub rrc_freq_scale: [f64; 2],
    pub rrc_time_scale: [f64; 2],
    /// Side of the virtual canvas the crop is placed in, relative to the
    /// input; 1.0 keeps crops on the input.
    pub rrc_canvas: f64,
    pub kmix_enabled: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            r: 128,
            rrc_freq_scale: [0.6, 1.5],
            rrc_time_scale: [0.6, 1.5],
            rrc_canvas: 1.5,
            kmix_enabled: true,
        }
    }
}

impl AugmentConfig {
    /// No mixing and an identity crop.
    pub fn identity() -> Self {
        Self {
            alpha: 0.0,
            rrc_freq_scale: [1.0, 1.0],
            rrc_time_scale: [1.0, 1.0],
            rrc_canvas: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(SlicerError::config("augment.alpha", "must lie in [0, 1]"));
        }
        if self.r == 0 {
            return Err(SlicerError::config("augment.r", "must be at least 1"));
        }
        for (key, [lo, hi]) in [
            ("augment.rrc_freq_scale", self.rrc_freq_scale),
            ("augment.rrc_time_scale", self.rrc_time_scale),
        ] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(SlicerError::config(key, "need 0 < lo <= hi"));
            }
        }
        if !(self.rrc_canvas >= 1.0 && self.rrc_canvas.is_finite()) {
            return Err(SlicerError::config(
                "augment.rrc_canvas",
                "must be at least 1",
            ));
        }
        Ok(())
    }
}

/// `log((1 - lambda) exp(x) + lambda exp(c))` elementwise. The endpoints
/// return exact copies, and the result is kept between the two inputs.
pub fn mixup_mix(
    x: &LogMelSpectrogram,
    counterpart: &LogMelSpectrogram,
    lambda: f64,
) -> Result<LogMelSpectrogram> {
    if x.shape() != counterpart.shape() {
        return Err(SlicerError::Shape {
            context: "mixup",
            detail: format!("{:?} vs {:?}", x.shape(), counterpart.shape()),
        });
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(SlicerError::InvalidInput(format!(
            "mixing ratio {lambda} outside [0, 1]"
        )));
    }
    if lambda == 0.0 {
        return Ok(x.clone());
    }
    if lambda == 1.0 {
        return Ok(counterpart.clone());
    }
    let values = x
        .values()
        .iter()
        .zip(counterpart.values())
        .map(|(&a, &b)| {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let v = hi + ((1.0 - lambda) * (a - hi).exp() + lambda * (b - hi).exp()).ln();
            v.clamp(lo, hi)
        })
        .collect();
    LogMelSpectrogram::new(x.n_mels(), x.n_frames(), values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueueEntry {
    pub spectrogram: Arc<LogMelSpectrogram>,
    pub centroid: Option<usize>,
    pub counter: u64,
    /// Index of the spectrogram in its corpus, when known.
    pub source: Option<usize>,
}

/// Bounded FIFO of past inputs; the oldest entry is evicted first.
#[derive(Debug, Clone, PartialEq)]
pub struct MixQueue {
    capacity: usize,
    entries: VecDeque<QueueEntry>,
    next_counter: u64,
}

impl MixQueue {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(SlicerError::config("queue_capacity", "must be at least 1"));
        }
        Ok(Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
            next_counter: 0,
        })
    }

    /// Rebuilds a queue from saved entries (oldest first).
    pub fn restore(capacity: usize, entries: Vec<QueueEntry>, next_counter: u64) -> Result<Self> {
        let mut q = Self::new(capacity)?;
        if entries.len() > capacity {
            return Err(SlicerError::InvalidInput(
                "more queue entries than capacity".into(),
            ));
        }
        let increasing = entries.windows(2).all(|w| w[0].counter < w[1].counter);
        let below = entries.last().map_or(true, |e| e.counter < next_counter);
        if !increasing || !below {
            return Err(SlicerError::InvalidInput(
                "queue counters must be strictly increasing".into(),
            ));
        }
        q.entries = entries.into();
        q.next_counter = next_counter;
        Ok(q)
    }

    pub fn push(&mut self, spectrogram: Arc<LogMelSpectrogram>, centroid: Option<usize>) {
        self.push_from(spectrogram, centroid, None);
    }

    pub fn push_from(
        &mut self,
        spectrogram: Arc<LogMelSpectrogram>,
        centroid: Option<usize>,
        source: Option<usize>,
    ) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(QueueEntry {
            spectrogram,
            centroid,
            counter: self.next_counter,
            source,
        });
        self.next_counter += 1;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn next_counter(&self) -> u64 {
        self.next_counter
    }

    /// Oldest first.
    pub fn entries(&self) -> impl ExactSizeIterator<Item = &QueueEntry> {
        self.entries.iter()
    }

    pub fn get(&self, i: usize) -> Option<&QueueEntry> {
        self.entries.get(i)
    }
}

/// Queue positions ordered by centroid distance from `x_centroid`,
/// farthest first, ties oldest first, truncated to `r`.
pub fn kmix_window(
    q: &MixQueue,
    dist: &CentroidDistanceMatrix,
    x_centroid: usize,
    r: usize,
) -> Result<Vec<usize>> {
    if q.is_empty() {
        return Err(SlicerError::EmptyQueue);
    }
    if r == 0 {
        return Err(SlicerError::config("augment.r", "must be at least 1"));
    }
    if x_centroid >= dist.k() {
        return Err(SlicerError::InvalidInput(format!(
            "centroid {x_centroid} out of range for k={}",
            dist.k()
        )));
    }
    let row = dist.row(x_centroid);
    let keyed: Vec<(usize, f64)> = q
        .entries()
        .enumerate()
        .map(|(i, e)| match e.centroid {
            Some(c) if c < dist.k() => Ok((i, row[c])),
            Some(c) => Err(SlicerError::InvalidInput(format!(
                "queue entry centroid {c} out of range for k={}",
                dist.k()
            ))),
            None => Err(SlicerError::InvalidInput(
                "k-mix needs centroid-tagged queue entries".into(),
            )),
        })
        .collect::<Result<_>>()?;
    let mut order = keyed;
    // Entries are stored oldest first, so a stable sort keeps age order
    // among equal distances.
    order.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(order.into_iter().take(r).map(|(i, _)| i).collect())
}

/// Uniform draw from the k-mix window. The queue is not modified.
pub fn kmix_sample_counterpart<'q>(
    q: &'q MixQueue,
    dist: &CentroidDistanceMatrix,
    x_centroid: usize,
    r: usize,
    rng: &mut ChaCha8Rng,
) -> Result<&'q QueueEntry> {
    let window = kmix_window(q, dist, x_centroid, r)?;
    let pick = window[rng.gen_range(0..window.len())];
    Ok(q.get(pick).expect("window indexes the queue"))
}

/// Uniform draw from the whole queue.
pub fn fifo_sample_counterpart<'q>(
    q: &'q MixQueue,
    rng: &mut ChaCha8Rng,
) -> Result<&'q QueueEntry> {
    if q.is_empty() {
        return Err(SlicerError::EmptyQueue);
    }
    Ok(q.get(rng.gen_range(0..q.len())).expect("index in range"))
}

/// Crop rectangle in input pixel units; may extend past the input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropBox {
    pub top: f64,
    pub left: f64,
    pub height: f64,
    pub width: f64,
}

impl CropBox {
    pub fn full(n_mels: usize, n_frames: usize) -> Self {
        Self {
            top: 0.0,
            left: 0.0,
            height: n_mels as f64,
            width: n_frames as f64,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// Offset of a crop of length `len` on an axis of `extent` pixels, uniform
/// within a canvas of `canvas * extent` centred on the input.
fn place(rng: &mut ChaCha8Rng, extent: f64, len: f64, canvas: f64) -> f64 {
    let lo = -(canvas - 1.0) * extent / 2.0;
    let hi = (canvas + 1.0) * extent / 2.0 - len;
    if hi > lo {
        uniform(rng, lo, hi)
    } else {
        (extent - len) / 2.0
    }
}

pub fn sample_crop_box(
    n_mels: usize,
    n_frames: usize,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> CropBox {
    let (f, t) = (n_mels as f64, n_frames as f64);
    let u = uniform(rng, cfg.rrc_freq_scale[0], cfg.rrc_freq_scale[1]);
    let v = uniform(rng, cfg.rrc_time_scale[0], cfg.rrc_time_scale[1]);
    let (height, width) = (f * u, t * v);
    let top = place(rng, f, height, cfg.rrc_canvas);
    let left = place(rng, t, width, cfg.rrc_canvas);
    CropBox {
        top,
        left,
        height,
        width,
    }
}

/// Sample position along one axis: `None` when outside the input, otherwise
/// the lower index and the interpolation fraction.
fn axis_sample(pos: f64, extent: usize) -> Option<(usize, usize, f64)> {
    let max = extent as f64 - 0.5;
    if pos < -0.5 || pos > max {
        return None;
    }
    let p = pos.clamp(0.0, (extent - 1) as f64);
    let i0 = p.floor() as usize;
    let i1 = (i0 + 1).min(extent - 1);
    Some((i0, i1, p - i0 as f64))
}

/// Bilinearly resamples `crop` back to the input shape. Pixel centres map as
/// `src = start + (i + 0.5) * len / extent - 0.5`; samples outside the input
/// read zero.
pub fn resize_crop(x: &LogMelSpectrogram, crop: &CropBox) -> LogMelSpectrogram {
    let (f, t) = x.shape();
    let ys: Vec<_> = (0..f)
        .map(|i| {
            axis_sample(
                crop.top + (i as f64 + 0.5) * crop.height / f as f64 - 0.5,
                f,
            )
        })
        .collect();
    let xs: Vec<_> = (0..t)
        .map(|j| {
            axis_sample(
                crop.left + (j as f64 + 0.5) * crop.width / t as f64 - 0.5,
                t,
            )
        })
        .collect();
    let mut out = vec![0.0; f * t];
    for (i, y) in ys.iter().enumerate() {
        let Some((y0, y1, fy)) = *y else { continue };
        for (j, xx) in xs.iter().enumerate() {
            let Some((x0, x1, fx)) = *xx else { continue };
            let top = x.get(y0, x0) + fx * (x.get(y0, x1) - x.get(y0, x0));
            let bottom = x.get(y1, x0) + fx * (x.get(y1, x1) - x.get(y1, x0));
            out[i * t + j] = top + fy * (bottom - top);
        }
    }
    LogMelSpectrogram::new(f, t, out).expect("shape preserved")
}

pub fn random_resized_crop(
    x: &LogMelSpectrogram,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> (LogMelSpectrogram, CropBox) {
    let crop = sample_crop_box(x.n_mels(), x.n_frames(), cfg, rng);
    (resize_crop(x, &crop), crop)
}

/// A fitted quantiser and its centroid distances.
#[derive(Debug, Clone, PartialEq)]
pub struct KMixIndex {
    pub model: KMeansModel,
    pub dist: CentroidDistanceMatrix,
    /// Standardisation applied to inputs before augmentation; centroids live
    /// in the raw log-mel domain, so assignment undoes it.
    pub norm: InputNorm,
}

impl KMixIndex {
    /// Index for raw (unstandardised) inputs.
    pub fn new(model: KMeansModel) -> Self {
        Self::standardised(model, InputNorm::default())
    }

    /// Index for inputs standardised by `norm`.
    pub fn standardised(model: KMeansModel, norm: InputNorm) -> Self {
        let dist = model.distance_matrix();
        Self { model, dist, norm }
    }

    /// Nearest centroid of `x` after mapping its pooled features back to the
    /// raw domain.
    pub fn centroid_of(&self, x: &LogMelSpectrogram) -> Result<usize> {
        if x.n_mels() != self.model.dim() {
            return Err(SlicerError::Shape {
                context: "assign_centroid",
                detail: format!(
                    "{} mel bins vs {}-d centroids",
                    x.n_mels(),
                    self.model.dim()
                ),
            });
        }
        let mut v = pool_features(x);
        if self.norm != InputNorm::default() {
            for f in v.iter_mut() {
                *f = *f * self.norm.std + self.norm.mean;
            }
        }
        Ok(self.model.assign(&v))
    }
}

/// What happened while forming one view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewTrace {
    /// Queue counter of the mixing counterpart, `None` when the queue was
    /// empty.
    pub counterpart: Option<u64>,
    pub counterpart_centroid: Option<usize>,
    pub lambda: f64,
    pub crop: CropBox,
}

#[derive(Debug, Clone)]
pub struct Views {
    pub a: LogMelSpectrogram,
    pub b: LogMelSpectrogram,
    pub x_centroid: Option<usize>,
    pub trace: [ViewTrace; 2],
}

fn one_view(
    x: &LogMelSpectrogram,
    x_centroid: Option<usize>,
    q: &MixQueue,
    index: Option<&KMixIndex>,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(LogMelSpectrogram, ViewTrace)> {
    let counterpart = if q.is_empty() {
        None
    } else if cfg.kmix_enabled {
        let (index, c) = index.zip(x_centroid).expect("checked by make_views");
        Some(kmix_sample_counterpart(q, &index.dist, c, cfg.r, rng)?)
    } else {
        Some(fifo_sample_counterpart(q, rng)?)
    };
    let (mixed, lambda) = match counterpart {
        Some(entry) => {
            let lambda = cfg.alpha * rng.gen::<f64>();
            (mixup_mix(x, &entry.spectrogram, lambda)?, lambda)
        }
        None => (x.clone(), 0.0),
    };
    let (view, crop) = random_resized_crop(&mixed, cfg, rng);
    Ok((
        view,
        ViewTrace {
            counterpart: counterpart.map(|e| e.counter),
            counterpart_centroid: counterpart.and_then(|e| e.centroid),
            lambda,
            crop,
        },
    ))
}

/// Two independently augmented views of `x`; `x` is pushed onto the queue
/// afterwards, tagged with its centroid when an index is available.
pub fn make_views(
    x: &Arc<LogMelSpectrogram>,
    q: &mut MixQueue,
    index: Option<&KMixIndex>,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Views> {
    make_views_from(x, None, q, index, cfg, rng)
}

/// [`make_views`] recording the corpus index of `x` in the queue.
pub fn make_views_from(
    x: &Arc<LogMelSpectrogram>,
    source: Option<usize>,
    q: &mut MixQueue,
    index: Option<&KMixIndex>,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Views> {
    if cfg.kmix_enabled && index.is_none() {
        return Err(SlicerError::config(
            "augment.kmix_enabled",
            "k-mix needs a fitted k-means model",
        ));
    }
    let x_centroid = index.map(|i| i.centroid_of(x)).transpose()?;
    let (a, ta) = one_view(x, x_centroid, q, index, cfg, rng)?;
    let (b, tb) = one_view(x, x_centroid, q, index, cfg, rng)?;
    q.push_from(Arc::clone(x), x_centroid, source);
    Ok(Views {
        a,
        b,
        x_centroid,
        trace: [ta, tb],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn spec(f: usize, t: usize, seed: u64) -> LogMelSpectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LogMelSpectrogram::new(f, t, (0..f * t).map(|_| rng.gen_range(-5.0..2.0)).collect())
            .unwrap()
    }

    #[test]
    fn mixup_endpoints_are_exact() {
        let (x, c) = (spec(4, 5, 1), spec(4, 5, 2));
        assert_eq!(mixup_mix(&x, &c, 0.0).unwrap(), x);
        assert_eq!(mixup_mix(&x, &c, 1.0).unwrap(), c);
    }

    #[test]
    fn mixup_ln2_ln4_half_is_ln3() {
        let x = LogMelSpectrogram::filled(3, 2, 2f64.ln()).unwrap();
        let c = LogMelSpectrogram::filled(3, 2, 4f64.ln()).unwrap();
        let m = mixup_mix(&x, &c, 0.5).unwrap();
        for v in m.values() {
            assert!((v - 3f64.ln()).abs() < 1e-12);
        }
        assert!((3f64.ln() - 1.0986123).abs() < 1e-7);
    }

    #[test]
    fn mixup_rejects_bad_input() {
        assert!(mixup_mix(&spec(2, 2, 0), &spec(2, 3, 0), 0.5).is_err());
        assert!(mixup_mix(&spec(2, 2, 0), &spec(2, 2, 1), 1.5).is_err());
    }

    #[test]
    fn queue_evicts_oldest_first() {
        let mut q = MixQueue::new(3).unwrap();
        for i in 0..5 {
            q.push(
                Arc::new(LogMelSpectrogram::filled(1, 1, i as f64).unwrap()),
                None,
            );
        }
        let counters: Vec<u64> = q.entries().map(|e| e.counter).collect();
        assert_eq!(counters, vec![2, 3, 4]);
        assert_eq!(q.get(0).unwrap().spectrogram.get(0, 0), 2.0);
    }

    fn tagged_queue(centroids: &[usize]) -> MixQueue {
        let mut q = MixQueue::new(16).unwrap();
        for (i, &c) in centroids.iter().enumerate() {
            q.push(
                Arc::new(LogMelSpectrogram::filled(1, 1, i as f64).unwrap()),
                Some(c),
            );
        }
        q
    }

    #[test]
    fn worked_window_example() {
        let dist = CentroidDistanceMatrix::from_rows(&[
            vec![0.0, 5.0, 9.0],
            vec![5.0, 0.0, 4.0],
            vec![9.0, 4.0, 0.0],
        ])
        .unwrap();
        let q = tagged_queue(&[1, 2, 1, 0]);
        let full = kmix_window(&q, &dist, 0, 10).unwrap();
        let order: Vec<usize> = full
            .iter()
            .map(|&i| q.get(i).unwrap().centroid.unwrap())
            .collect();
        assert_eq!(order, vec![2, 1, 1, 0]);
        assert_eq!(kmix_window(&q, &dist, 0, 2).unwrap(), vec![1, 0]);
    }

    #[test]
    fn equal_distances_take_oldest() {
        let dist = CentroidDistanceMatrix::from_rows(&[vec![0.0]]).unwrap();
        let q = tagged_queue(&[0, 0, 0, 0, 0]);
        assert_eq!(kmix_window(&q, &dist, 0, 3).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn sampling_errors_on_empty_or_untagged_queue() {
        let dist = CentroidDistanceMatrix::from_rows(&[vec![0.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let empty = MixQueue::new(4).unwrap();
        assert!(matches!(
            kmix_sample_counterpart(&empty, &dist, 0, 1, &mut rng),
            Err(SlicerError::EmptyQueue)
        ));
        assert!(fifo_sample_counterpart(&empty, &mut rng).is_err());
        let mut untagged = MixQueue::new(4).unwrap();
        untagged.push(Arc::new(spec(1, 1, 0)), None);
        assert!(kmix_sample_counterpart(&untagged, &dist, 0, 1, &mut rng).is_err());
    }

    #[test]
    fn identity_crop_is_exact() {
        let x = spec(7, 9, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (y, crop) = random_resized_crop(&x, &AugmentConfig::identity(), &mut rng);
        assert_eq!(crop, CropBox::full(7, 9));
        for (a, b) in x.values().iter().zip(y.values()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_input_inside_bounds_stays_constant() {
        let x = LogMelSpectrogram::filled(10, 12, -3.7).unwrap();
        let crop = CropBox {
            top: 1.3,
            left: 2.1,
            height: 6.4,
            width: 7.7,
        };
        assert!(resize_crop(&x, &crop).values().iter().all(|&v| v == -3.7));
    }

    #[test]
    fn out_of_bounds_reads_zero() {
        let x = LogMelSpectrogram::filled(4, 4, 1.0).unwrap();
        let crop = CropBox {
            top: 10.0,
            left: 0.0,
            height: 4.0,
            width: 4.0,
        };
        assert!(resize_crop(&x, &crop).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn crops_keep_shape_and_stay_on_canvas() {
        let x = spec(8, 10, 4);
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let (y, c) = random_resized_crop(&x, &cfg, &mut rng);
            assert_eq!(y.shape(), (8, 10));
            assert!(c.height >= 8.0 * 0.6 && c.height <= 8.0 * 1.5);
            assert!(c.top >= -0.25 * 8.0 - 1e-12 || c.height > 8.0 * 1.5 - 1e-9);
            assert!(c.top + c.height <= 1.25 * 8.0 + 1e-9 || c.top == (8.0 - c.height) / 2.0);
        }
    }

    #[test]
    fn degenerate_config_gives_identical_views() {
        let x = Arc::new(spec(6, 5, 2));
        let mut q = MixQueue::new(4).unwrap();
        q.push(Arc::new(spec(6, 5, 3)), None);
        let cfg = AugmentConfig {
            kmix_enabled: false,
            ..AugmentConfig::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = make_views(&x, &mut q, None, &cfg, &mut rng).unwrap();
        assert_eq!(v.a, *x);
        assert_eq!(v.b, *x);
        assert_eq!(q.len(), 2);
        assert_eq!(q.get(1).unwrap().spectrogram, x);
    }

    #[test]
    fn views_are_seed_deterministic() {
        let x = Arc::new(spec(6, 5, 2));
        let run = |seed| {
            let mut q = MixQueue::new(4).unwrap();
            q.push(Arc::new(spec(6, 5, 3)), None);
            q.push(Arc::new(spec(6, 5, 4)), None);
            let cfg = AugmentConfig {
                kmix_enabled: false,
                ..AugmentConfig::default()
            };
            let v =
                make_views(&x, &mut q, None, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            (v.a, v.b)
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn kmix_without_model_is_a_config_error() {
        let x = Arc::new(spec(2, 2, 0));
        let mut q = MixQueue::new(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = make_views(&x, &mut q, None, &AugmentConfig::default(), &mut rng).unwrap_err();
        assert!(matches!(err, SlicerError::Config { .. }));
        assert!(q.is_empty());
    }
}
