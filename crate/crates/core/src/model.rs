//! Student/teacher CNN encoders producing the `N x C` output matrix.
//!
//! Each of the two blocks is a 3x3 convolution (zero padding 1) followed by
//! ReLU and 2x2 max pooling, then a two-layer MLP head. Max pooling
//! commutes with the monotone ReLU, so the fused convolution+pool primitive
//! is applied first and ReLU after it.

use rand::Rng;
use serde::{Deserialize, Serialize};
use slicer_autodiff::{Tape, Tensor, Var};

use crate::audio::LogMelSpectrogram;
use crate::error::{Result, SlicerError};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub n_mels: usize,
    pub n_frames: usize,
    pub channels: [usize; 2],
    pub conv_stride: usize,
    pub hidden: usize,
    /// Output width C.
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_mels: 128,
            n_frames: 94,
            channels: [32, 64],
            conv_stride: 2,
            hidden: 512,
            embed_dim: 256,
        }
    }
}

pub const KERNEL: usize = 3;
pub const PADDING: usize = 1;
pub const POOL: usize = 2;

pub const PARAM_NAMES: [&str; 8] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "fc1.weight",
    "fc1.bias",
    "fc2.weight",
    "fc2.bias",
];

impl EncoderConfig {
    /// Spatial extent after one conv+pool block.
    fn block_out(&self, n: usize) -> usize {
        let conv = (n + 2 * PADDING).saturating_sub(KERNEL) / self.conv_stride + 1;
        conv / POOL
    }

    /// `(height, width)` of the final feature maps.
    pub fn feature_map(&self) -> (usize, usize) {
        let h = self.block_out(self.block_out(self.n_mels));
        let w = self.block_out(self.block_out(self.n_frames));
        (h, w)
    }

    pub fn flat_dim(&self) -> usize {
        let (h, w) = self.feature_map();
        self.channels[1] * h * w
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let [c1, c2] = self.channels;
        vec![
            vec![c1, 1, KERNEL, KERNEL],
            vec![c1],
            vec![c2, c1, KERNEL, KERNEL],
            vec![c2],
            vec![self.flat_dim(), self.hidden],
            vec![self.hidden],
            vec![self.hidden, self.embed_dim],
            vec![self.embed_dim],
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("encoder.n_mels", self.n_mels),
            ("encoder.n_frames", self.n_frames),
            ("encoder.channels", self.channels[0].min(self.channels[1])),
            ("encoder.conv_stride", self.conv_stride),
            ("encoder.hidden", self.hidden),
            ("encoder.embed_dim", self.embed_dim),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(SlicerError::config(key, "must be at least 1"));
            }
        }
        let (h, w) = self.feature_map();
        if h == 0 || w == 0 {
            return Err(SlicerError::config(
                "encoder.n_mels",
                format!(
                    "input {}x{} is too small for two conv+pool blocks",
                    self.n_mels, self.n_frames
                ),
            ));
        }
        Ok(())
    }
}

/// Scalar standardisation applied to spectrograms before augmentation and
/// encoding, fitted on the pretraining corpus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputNorm {
    pub mean: f64,
    pub std: f64,
}

impl Default for InputNorm {
    fn default() -> Self {
        Self {
            mean: 0.0,
            std: 1.0,
        }
    }
}

impl InputNorm {
    pub fn fit<'a>(specs: impl IntoIterator<Item = &'a LogMelSpectrogram>) -> Result<Self> {
        let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
        for s in specs {
            for &v in s.values() {
                n += 1;
                sum += v;
                sq += v * v;
            }
        }
        if n == 0 {
            return Err(SlicerError::InvalidInput(
                "cannot fit normalisation on no data".into(),
            ));
        }
        let mean = sum / n as f64;
        let var = (sq / n as f64 - mean * mean).max(0.0);
        let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        Ok(Self { mean, std })
    }

    pub fn apply(&self, spec: &LogMelSpectrogram) -> LogMelSpectrogram {
        let values = spec
            .values()
            .iter()
            .map(|v| (v - self.mean) / self.std)
            .collect();
        LogMelSpectrogram::new(spec.n_mels(), spec.n_frames(), values).expect("shape preserved")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub norm: InputNorm,
    /// In [`PARAM_NAMES`] order.
    pub tensors: Vec<Tensor>,
}

/// Encoder parameters placed on a tape.
#[derive(Debug, Clone)]
pub struct BoundEncoder {
    pub config: EncoderConfig,
    pub vars: Vec<Var>,
}

impl EncoderParams {
    /// Fan-in scaled uniform initialisation, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// for weights and biases alike.
    pub fn init(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        let tensors = shapes
            .iter()
            .enumerate()
            .map(|(i, shape)| {
                let weight_shape = &shapes[i & !1];
                let fan_in: usize = if weight_shape.len() == 4 {
                    weight_shape[1..].iter().product()
                } else {
                    weight_shape[0]
                };
                let bound = 1.0 / (fan_in as f64).sqrt();
                let n: usize = shape.iter().product();
                Tensor::new(
                    shape.clone(),
                    (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
                )
                .map_err(SlicerError::from)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            norm: InputNorm::default(),
            tensors,
        })
    }

    pub fn from_tensors(
        config: EncoderConfig,
        norm: InputNorm,
        tensors: Vec<Tensor>,
    ) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if tensors.len() != shapes.len()
            || tensors
                .iter()
                .zip(&shapes)
                .any(|(t, s)| t.shape() != s.as_slice())
        {
            return Err(SlicerError::Shape {
                context: "encoder parameters",
                detail: format!(
                    "expected {:?}, got {:?}",
                    shapes,
                    tensors
                        .iter()
                        .map(|t| t.shape().to_vec())
                        .collect::<Vec<_>>()
                ),
            });
        }
        Ok(Self {
            config,
            norm,
            tensors,
        })
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        PARAM_NAMES.iter().copied().zip(&self.tensors)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Puts the parameters on `tape`, differentiable when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundEncoder {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), trainable))
            .collect();
        BoundEncoder {
            config: self.config,
            vars,
        }
    }

    /// Eager forward pass without recording, for frozen use.
    pub fn embed(&self, specs: &[&LogMelSpectrogram]) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(batch_tensor(&self.config, specs)?);
        let y = bound.forward(&mut tape, x)?;
        Ok(tape.take(y)?)
    }
}

impl BoundEncoder {
    /// `[N, 1, F, T]` input to `[N, C]` output.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let v = &self.vars;
        let s = self.config.conv_stride;
        let h = tape.conv_pool(x, v[0], v[1], s, PADDING, POOL)?;
        let h = tape.relu(h)?;
        let h = tape.conv_pool(h, v[2], v[3], s, PADDING, POOL)?;
        let h = tape.relu(h)?;
        let n = tape.value(h).shape()[0];
        let h = tape.reshape(h, &[n, self.config.flat_dim()])?;
        let h = tape.linear(h, v[4], v[5])?;
        let h = tape.relu(h)?;
        Ok(tape.linear(h, v[6], v[7])?)
    }
}

/// Stacks spectrograms into the `[N, 1, F, T]` encoder input.
pub fn batch_tensor(config: &EncoderConfig, specs: &[&LogMelSpectrogram]) -> Result<Tensor> {
    if specs.is_empty() {
        return Err(SlicerError::InvalidInput("empty batch".into()));
    }
    let (f, t) = (config.n_mels, config.n_frames);
    let mut data = Vec::with_capacity(specs.len() * f * t);
    for s in specs {
        if s.shape() != (f, t) {
            return Err(SlicerError::Shape {
                context: "encoder input",
                detail: format!("spectrogram {:?}, encoder expects ({f}, {t})", s.shape()),
            });
        }
        data.extend_from_slice(s.values());
    }
    Ok(Tensor::new(vec![specs.len(), 1, f, t], data)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentTeacher {
    pub student: EncoderParams,
    pub teacher: EncoderParams,
    pub momentum: f64,
}

/// Student from the `init` stream of `seed`; the teacher starts as an exact
/// copy.
pub fn init_student_teacher(
    seed: u64,
    config: EncoderConfig,
    momentum: f64,
) -> Result<StudentTeacher> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(SlicerError::config("momentum", "must lie in [0, 1]"));
    }
    let mut rng = seed::subsystem_rng(seed, seed::INIT);
    let student = EncoderParams::init(config, &mut rng)?;
    Ok(StudentTeacher {
        teacher: student.clone(),
        student,
        momentum,
    })
}

/// `m * t + (1 - m) * s` evaluated from the nearer endpoint, so `m = 0`,
/// `m = 1` and `t == s` are all exact.
#[inline]
pub fn ema_value(t: f64, s: f64, m: f64) -> f64 {
    if m < 0.5 {
        s + m * (t - s)
    } else {
        t + (1.0 - m) * (s - t)
    }
}

/// `teacher := m * teacher + (1 - m) * student` for every tensor.
pub fn ema_update(teacher: &mut EncoderParams, student: &EncoderParams, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(SlicerError::config("momentum", "must lie in [0, 1]"));
    }
    if teacher.tensors.len() != student.tensors.len()
        || teacher
            .tensors
            .iter()
            .zip(&student.tensors)
            .any(|(t, s)| t.shape() != s.shape())
    {
        return Err(SlicerError::Shape {
            context: "ema_update",
            detail: "teacher and student shapes differ".into(),
        });
    }
    for (t, s) in teacher.tensors.iter_mut().zip(&student.tensors) {
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = ema_value(*tv, sv, m);
        }
    }
    Ok(())
}

impl StudentTeacher {
    pub fn ema_update(&mut self) -> Result<()> {
        ema_update(&mut self.teacher, &self.student, self.momentum)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny() -> EncoderConfig {
        EncoderConfig {
            n_mels: 16,
            n_frames: 12,
            channels: [3, 4],
            conv_stride: 2,
            hidden: 6,
            embed_dim: 5,
        }
    }

    fn spec(seed: u64, c: &EncoderConfig) -> LogMelSpectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LogMelSpectrogram::new(
            c.n_mels,
            c.n_frames,
            (0..c.n_mels * c.n_frames)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn default_geometry() {
        let c = EncoderConfig::default();
        assert_eq!(c.feature_map(), (8, 6));
        assert_eq!(c.flat_dim(), 3072);
        let p = EncoderParams::init(c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = spec(1, &c);
        assert_eq!(p.embed(&[&x]).unwrap().shape(), &[1, 256]);
    }

    #[test]
    fn zero_head_gives_zero_rows() {
        let c = tiny();
        let mut p = EncoderParams::init(c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for t in &mut p.tensors[6..] {
            t.data_mut().fill(0.0);
        }
        let (a, b) = (spec(1, &c), spec(2, &c));
        assert!(p.embed(&[&a, &b]).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicate_sample_gives_duplicate_row() {
        let c = tiny();
        let p = EncoderParams::init(c, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let (a, b) = (spec(1, &c), spec(2, &c));
        let y = p.embed(&[&a, &b, &a]).unwrap();
        assert_eq!(y.row(0), y.row(2));
        assert_ne!(y.row(0), y.row(1));
        let alone = p.embed(&[&a]).unwrap();
        assert_eq!(alone.row(0), y.row(0));
    }

    #[test]
    fn wrong_input_shape_is_an_error() {
        let c = tiny();
        let p = EncoderParams::init(c, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let bad = LogMelSpectrogram::filled(16, 11, 0.0).unwrap();
        assert!(p.embed(&[&bad]).is_err());
    }

    #[test]
    fn init_copies_student_and_depends_on_seed() {
        let a = init_student_teacher(1, tiny(), 0.99).unwrap();
        assert_eq!(a.student, a.teacher);
        assert_eq!(a, init_student_teacher(1, tiny(), 0.99).unwrap());
        let b = init_student_teacher(2, tiny(), 0.99).unwrap();
        assert!(a
            .student
            .tensors
            .iter()
            .zip(&b.student.tensors)
            .any(|(x, y)| x != y));
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let p = EncoderParams::init(tiny(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let bounds = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 27f64.sqrt(), 1.0 / 27f64.sqrt()];
        for (t, b) in p.tensors.iter().zip(bounds) {
            assert!(t.data().iter().all(|v| v.abs() <= b));
        }
        let flat = tiny().flat_dim() as f64;
        assert!(p.tensors[4]
            .data()
            .iter()
            .all(|v| v.abs() <= 1.0 / flat.sqrt()));
    }

    #[test]
    fn ema_examples() {
        let scalar = |v: f64| EncoderParams {
            config: tiny(),
            norm: InputNorm::default(),
            tensors: vec![Tensor::scalar(v)],
        };
        let mut t = scalar(1.0);
        ema_update(&mut t, &scalar(0.0), 0.99).unwrap();
        assert_eq!(t.tensors[0].item(), 0.99);
        let mut t = scalar(1.0);
        ema_update(&mut t, &scalar(0.25), 1.0).unwrap();
        assert_eq!(t.tensors[0].item(), 1.0);
        ema_update(&mut t, &scalar(0.25), 0.0).unwrap();
        assert_eq!(t.tensors[0].item(), 0.25);
        assert!(ema_update(&mut t, &scalar(0.25), 1.5).is_err());
    }

    #[test]
    fn ema_contracts_distance() {
        let mut st = init_student_teacher(1, tiny(), 0.9).unwrap();
        st.student = EncoderParams::init(tiny(), &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        let gap = |st: &StudentTeacher| -> Vec<f64> {
            st.teacher
                .tensors
                .iter()
                .zip(&st.student.tensors)
                .map(|(t, s)| {
                    t.data()
                        .iter()
                        .zip(s.data())
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max)
                })
                .collect()
        };
        let before = gap(&st);
        st.ema_update().unwrap();
        for (b, a) in before.iter().zip(gap(&st)) {
            assert!(a <= 0.9 * b * (1.0 + 1e-12));
        }
    }

    #[test]
    fn input_norm_standardises() {
        let c = tiny();
        let specs = [spec(1, &c), spec(2, &c)];
        let norm = InputNorm::fit(specs.iter()).unwrap();
        let all: Vec<f64> = specs
            .iter()
            .flat_map(|s| norm.apply(s).values().to_vec())
            .collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-9);
    }
}
