//! Waveforms, STFT, log-mel features and the synthetic labelled corpus.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlicerError};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AudioConfig {
    pub sample_rate: u32,
    pub window: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub floor_epsilon: f64,
    pub clip_seconds: f64,
}

impl Default for AudioConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window: 1024,
            hop: 160,
            n_mels: 128,
            floor_epsilon: 1e-10,
            clip_seconds: 1.0,
        }
    }
}

impl AudioConfig {
    pub fn clip_samples(&self) -> usize {
        (self.clip_seconds * self.sample_rate as f64).round() as usize
    }

    pub fn frames(&self) -> usize {
        frame_count(self.clip_samples(), self.window, self.hop)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(SlicerError::config("audio.sample_rate", "must be positive"));
        }
        if !self.window.is_power_of_two() {
            return Err(SlicerError::config(
                "audio.window",
                "must be a power of two",
            ));
        }
        if self.hop == 0 {
            return Err(SlicerError::config("audio.hop", "must be at least 1"));
        }
        if self.n_mels == 0 {
            return Err(SlicerError::config("audio.n_mels", "must be at least 1"));
        }
        if !(self.floor_epsilon > 0.0) {
            return Err(SlicerError::config(
                "audio.floor_epsilon",
                "must be positive",
            ));
        }
        if self.clip_samples() < self.window {
            return Err(SlicerError::config(
                "audio.clip_seconds",
                "clip is shorter than one STFT window",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(SlicerError::InvalidInput(
                "sample rate must be positive".into(),
            ));
        }
        if let Some(bad) = samples.iter().find(|s| !(s.abs() <= 1.0)) {
            return Err(SlicerError::InvalidInput(format!(
                "sample {bad} outside [-1, 1]"
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }
}

/// Natural-log mel energies, frequency-major (`values[f * frames + t]`).
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpectrogram {
    n_mels: usize,
    n_frames: usize,
    values: Vec<f64>,
}

impl LogMelSpectrogram {
    pub fn new(n_mels: usize, n_frames: usize, values: Vec<f64>) -> Result<Self> {
        if n_mels == 0 || n_frames == 0 || values.len() != n_mels * n_frames {
            return Err(SlicerError::Shape {
                context: "spectrogram",
                detail: format!("{n_mels}x{n_frames} with {} values", values.len()),
            });
        }
        Ok(Self {
            n_mels,
            n_frames,
            values,
        })
    }

    pub fn filled(n_mels: usize, n_frames: usize, value: f64) -> Result<Self> {
        Self::new(n_mels, n_frames, vec![value; n_mels * n_frames])
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_mels, self.n_frames)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, f: usize, t: usize) -> f64 {
        self.values[f * self.n_frames + t]
    }

    pub fn row(&self, f: usize) -> &[f64] {
        &self.values[f * self.n_frames..(f + 1) * self.n_frames]
    }
}

pub fn frame_count(len: usize, window: usize, hop: usize) -> usize {
    if len < window || hop == 0 {
        0
    } else {
        (len - window) / hop + 1
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Short-time Fourier transform, `bins = window / 2 + 1` rows.
#[derive(Debug, Clone)]
pub struct Stft {
    pub bins: usize,
    pub frames: usize,
    /// `data[bin * frames + frame]`.
    pub data: Vec<Complex64>,
}

impl Stft {
    pub fn magnitudes(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm()).collect()
    }
}

pub fn stft(wave: &Waveform, window: usize, hop: usize) -> Result<Stft> {
    if !window.is_power_of_two() {
        return Err(SlicerError::InvalidInput(format!(
            "STFT window {window} is not a power of two"
        )));
    }
    if hop == 0 {
        return Err(SlicerError::InvalidInput(
            "STFT hop must be at least 1".into(),
        ));
    }
    let x = wave.samples();
    if x.len() < window {
        return Err(SlicerError::InvalidInput(format!(
            "waveform of {} samples is shorter than one {window}-sample window",
            x.len()
        )));
    }
    let frames = frame_count(x.len(), window, hop);
    let bins = window / 2 + 1;
    let w = hann(window);
    let fft = FftPlanner::new().plan_fft_forward(window);
    let mut buf = vec![Complex64::new(0.0, 0.0); window];
    let mut data = vec![Complex64::new(0.0, 0.0); bins * frames];
    for t in 0..frames {
        let frame = &x[t * hop..t * hop + window];
        for ((b, &s), &wi) in buf.iter_mut().zip(frame).zip(&w) {
            *b = Complex64::new(s * wi, 0.0);
        }
        fft.process(&mut buf);
        for (k, v) in buf[..bins].iter().enumerate() {
            data[k * frames + t] = *v;
        }
    }
    Ok(Stft { bins, frames, data })
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters on `bins` linear-frequency bins, centres equally
/// spaced in mel between 0 Hz and Nyquist. Row-major `[n_mels][bins]`.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub bins: usize,
    pub weights: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(sample_rate: u32, bins: usize, n_mels: usize) -> Result<Self> {
        if bins < 2 || n_mels == 0 || sample_rate == 0 {
            return Err(SlicerError::InvalidInput(format!(
                "filterbank needs bins >= 2, n_mels >= 1 (got {bins}, {n_mels})"
            )));
        }
        let nyquist = sample_rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = nyquist / (bins - 1) as f64;
        let mut weights = vec![0.0; n_mels * bins];
        for m in 0..n_mels {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..bins {
                let f = k as f64 * bin_hz;
                let rise = (f - lo) / (mid - lo);
                let fall = (hi - f) / (hi - mid);
                weights[m * bins + k] = rise.min(fall).max(0.0);
            }
        }
        Ok(Self {
            n_mels,
            bins,
            weights,
        })
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.bins..(m + 1) * self.bins]
    }
}

/// Applies the filterbank to a `[bins][frames]` magnitude matrix and takes
/// `ln(max(x, floor))`.
pub fn logmel(
    magnitudes: &[f64],
    bins: usize,
    frames: usize,
    bank: &MelFilterbank,
    floor_epsilon: f64,
) -> Result<LogMelSpectrogram> {
    if bank.bins != bins || magnitudes.len() != bins * frames || frames == 0 {
        return Err(SlicerError::Shape {
            context: "logmel",
            detail: format!(
                "{} magnitudes for {bins}x{frames}, filterbank expects {} bins",
                magnitudes.len(),
                bank.bins
            ),
        });
    }
    if magnitudes.iter().any(|m| !(*m >= 0.0)) {
        return Err(SlicerError::InvalidInput(
            "magnitudes must be non-negative".into(),
        ));
    }
    let mut values = vec![0.0; bank.n_mels * frames];
    for m in 0..bank.n_mels {
        let out = &mut values[m * frames..(m + 1) * frames];
        for (k, &w) in bank.row(m).iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let src = &magnitudes[k * frames..(k + 1) * frames];
            for (o, &s) in out.iter_mut().zip(src) {
                *o += w * s;
            }
        }
        for o in out.iter_mut() {
            *o = o.max(floor_epsilon).ln();
        }
    }
    LogMelSpectrogram::new(bank.n_mels, frames, values)
}

/// Reusable waveform-to-log-mel pipeline.
pub struct FeatureExtractor {
    cfg: AudioConfig,
    bank: MelFilterbank,
}

impl FeatureExtractor {
    pub fn new(cfg: AudioConfig) -> Result<Self> {
        cfg.validate()?;
        let bank = MelFilterbank::new(cfg.sample_rate, cfg.window / 2 + 1, cfg.n_mels)?;
        Ok(Self { cfg, bank })
    }

    pub fn config(&self) -> &AudioConfig {
        &self.cfg
    }

    pub fn extract(&self, wave: &Waveform) -> Result<LogMelSpectrogram> {
        let s = stft(wave, self.cfg.window, self.cfg.hop)?;
        logmel(
            &s.magnitudes(),
            s.bins,
            s.frames,
            &self.bank,
            self.cfg.floor_epsilon,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SynthClass {
    PureTone,
    Chirp,
    NoiseBand,
    AmTone,
}

impl SynthClass {
    pub const ALL: [SynthClass; 4] = [
        SynthClass::PureTone,
        SynthClass::Chirp,
        SynthClass::NoiseBand,
        SynthClass::AmTone,
    ];

    pub fn label(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            SynthClass::PureTone => "pure-tone",
            SynthClass::Chirp => "chirp",
            SynthClass::NoiseBand => "noise-band",
            SynthClass::AmTone => "am-tone",
        }
    }
}

const BACKGROUND_NOISE: f64 = 0.01;

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

fn synth_one(class: SynthClass, n: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let amp = rng.gen_range(0.3..0.8);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let t = |i: usize| i as f64 / sr;
    let mut x: Vec<f64> = match class {
        SynthClass::PureTone => {
            let f = log_uniform(rng, 150.0, 3000.0);
            (0..n)
                .map(|i| amp * (2.0 * PI * f * t(i) + phase).sin())
                .collect()
        }
        SynthClass::Chirp => {
            // Exponential sweep over 1 to 2.5 octaves, up or down.
            let f0 = log_uniform(rng, 200.0, 2500.0);
            let octaves = rng.gen_range(1.0..2.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let f1 = (f0 * 2f64.powf(octaves)).clamp(80.0, 7000.0);
            let dur = n as f64 / sr;
            let k = (f1 / f0).ln() / dur;
            (0..n)
                .map(|i| {
                    let ph = 2.0 * PI * f0 * ((k * t(i)).exp() - 1.0) / k;
                    amp * (ph + phase).sin()
                })
                .collect()
        }
        SynthClass::NoiseBand => {
            let centre = log_uniform(rng, 300.0, 3000.0);
            let width = centre * rng.gen_range(0.2..0.6);
            band_noise(n, sr, centre - width / 2.0, centre + width / 2.0, amp, rng)
        }
        SynthClass::AmTone => {
            let f = log_uniform(rng, 150.0, 3000.0);
            let rate = rng.gen_range(3.0..12.0);
            let depth = rng.gen_range(0.6..1.0);
            let mphase = rng.gen_range(0.0..2.0 * PI);
            (0..n)
                .map(|i| {
                    let env =
                        (1.0 + depth * (2.0 * PI * rate * t(i) + mphase).sin()) / (1.0 + depth);
                    amp * env * (2.0 * PI * f * t(i) + phase).sin()
                })
                .collect()
        }
    };
    for s in x.iter_mut() {
        *s = (*s + BACKGROUND_NOISE * rng.gen_range(-1.0..1.0)).clamp(-1.0, 1.0);
    }
    x
}

/// White noise restricted to `[lo, hi]` Hz by zeroing FFT bins, scaled to the
/// RMS of a sinusoid of amplitude `amp`.
fn band_noise(n: usize, sr: f64, lo: f64, hi: f64, amp: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut buf: Vec<Complex64> = (0..n)
        .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * sr / n as f64;
        if f < lo || f > hi {
            *c = Complex64::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let x: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let target = amp / 2f64.sqrt();
    x.iter()
        .map(|v| (v / rms.max(1e-300) * target).clamp(-0.95, 0.95))
        .collect()
}

/// Balanced synthetic corpus, classes interleaved
/// (`PureTone, Chirp, NoiseBand, AmTone, PureTone, ...`). Item `i` draws
/// from its own stream so it does not depend on the corpus size.
pub fn synth_corpus(
    n_per_class: usize,
    seed: u64,
    cfg: &AudioConfig,
) -> Result<Vec<(Waveform, SynthClass)>> {
    if n_per_class == 0 {
        return Err(SlicerError::InvalidInput(
            "n_per_class must be at least 1".into(),
        ));
    }
    cfg.validate()?;
    let n = cfg.clip_samples();
    let sr = cfg.sample_rate as f64;
    (0..n_per_class * SynthClass::ALL.len())
        .map(|i| {
            let class = SynthClass::ALL[i % SynthClass::ALL.len()];
            let mut rng = seed::indexed_rng(seed, seed::CORPUS, i as u64);
            let w = Waveform::new(synth_one(class, n, sr, &mut rng), cfg.sample_rate)?;
            Ok((w, class))
        })
        .collect()
}

/// A log-mel corpus with integer labels, spectrograms shared by reference.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub spectrograms: Vec<Arc<LogMelSpectrogram>>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Synthesises and featurises `n_per_class` clips per class.
pub fn synth_logmel_set(n_per_class: usize, seed: u64, cfg: &AudioConfig) -> Result<LabeledSet> {
    let fx = FeatureExtractor::new(*cfg)?;
    let corpus = synth_corpus(n_per_class, seed, cfg)?;
    let mut spectrograms = Vec::with_capacity(corpus.len());
    let mut labels = Vec::with_capacity(corpus.len());
    for (w, c) in &corpus {
        spectrograms.push(Arc::new(fx.extract(w)?));
        labels.push(c.label());
    }
    Ok(LabeledSet {
        spectrograms,
        labels,
    })
}
