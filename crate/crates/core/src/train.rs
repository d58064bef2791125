//! Pretraining: two augmented views per input, taped student passes,
//! tapeless teacher passes, the contrastive objective, Adam on the student
//! and an EMA step on the teacher.

use std::io::Write;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use slicer_autodiff::{Tape, Tensor};

use crate::audio::LogMelSpectrogram;
use crate::augment::{make_views_from, AugmentConfig, KMixIndex, MixQueue};
use crate::checkpoint::{Checkpoint, QueueSnapshot};
use crate::clustering::{fit_on_corpus, KMeansFit};
use crate::error::{Result, SlicerError};
use crate::losses::{total_loss, ContrastiveConfig};
use crate::model::{batch_tensor, init_student_teacher, EncoderConfig, InputNorm, StudentTeacher};
use crate::optim::{AdamConfig, AdamState};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Teacher EMA momentum.
    pub momentum: f64,
    pub kmeans_k: usize,
    pub kmeans_fraction: f64,
    pub kmeans_max_iters: usize,
    pub queue_capacity: usize,
    pub encoder: EncoderConfig,
    pub loss: ContrastiveConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    /// Desk-scale defaults: batch 64 and 30 epochs instead of the
    /// large-scale 1024 and 100 (see [`TrainConfig::large_scale`]).
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 64,
            epochs: 30,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.99,
            kmeans_k: 128,
            kmeans_fraction: 0.1,
            kmeans_max_iters: 100,
            queue_capacity: 2048,
            encoder: EncoderConfig::default(),
            loss: ContrastiveConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Batch size and epoch count of the original large-scale pretraining.
    pub fn large_scale() -> Self {
        Self {
            batch_size: 1024,
            epochs: 100,
            ..Self::default()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(SlicerError::config(
                "batch_size",
                "N >= 2 is required for in-batch negatives",
            ));
        }
        for (key, v) in [
            ("kmeans_k", self.kmeans_k),
            ("kmeans_max_iters", self.kmeans_max_iters),
            ("queue_capacity", self.queue_capacity),
        ] {
            if v == 0 {
                return Err(SlicerError::config(key, "must be at least 1"));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(SlicerError::config("lr", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(SlicerError::config("beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(SlicerError::config("beta2", "must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(SlicerError::config("eps", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(SlicerError::config("momentum", "must lie in [0, 1]"));
        }
        if !(self.kmeans_fraction > 0.0 && self.kmeans_fraction <= 1.0) {
            return Err(SlicerError::config("kmeans_fraction", "must lie in (0, 1]"));
        }
        self.encoder.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        if self.augment.r > self.queue_capacity {
            return Err(SlicerError::config(
                "augment.r",
                "must not exceed queue_capacity",
            ));
        }
        if self.loss.cluster_enabled() && self.encoder.embed_dim < 2 {
            return Err(SlicerError::config(
                "encoder.embed_dim",
                "cluster loss needs C >= 2",
            ));
        }
        if let crate::losses::Negatives::Count(k) = self.loss.num_negatives {
            if k >= self.batch_size {
                return Err(SlicerError::config(
                    "loss.num_negatives",
                    "K must be at most N - 1",
                ));
            }
            if self.loss.cluster_enabled() && k >= self.encoder.embed_dim {
                return Err(SlicerError::config(
                    "loss.num_negatives",
                    "K must be at most C - 1",
                ));
            }
        }
        Ok(())
    }
}

/// Result of one optimisation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub instance: f64,
    pub cluster: f64,
    /// Student tensors that received a gradient.
    pub student_grads: usize,
    /// Teacher tensors that received a gradient (always 0).
    pub teacher_grads: usize,
}

/// All mutable pretraining state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub models: StudentTeacher,
    pub adam: AdamState,
    pub queue: MixQueue,
    pub kmix: Option<KMixIndex>,
    pub aug_rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
}

impl Trainer {
    /// Fresh state for `config`, with inputs standardised by `norm`.
    pub fn new(config: TrainConfig, norm: InputNorm, kmix: Option<KMixIndex>) -> Result<Self> {
        config.validate()?;
        if config.augment.kmix_enabled && kmix.is_none() {
            return Err(SlicerError::config(
                "augment.kmix_enabled",
                "k-mix needs a fitted k-means model",
            ));
        }
        let mut models = init_student_teacher(config.seed, config.encoder, config.momentum)?;
        models.student.norm = norm;
        models.teacher.norm = norm;
        let adam = AdamState::new(config.adam(), &models.student.tensors);
        let queue = MixQueue::new(config.queue_capacity)?;
        let aug_rng = seed::subsystem_rng(config.seed, seed::AUGMENT);
        Ok(Self {
            config,
            models,
            adam,
            queue,
            kmix,
            aug_rng,
            epoch: 0,
            step: 0,
        })
    }

    /// Standardises `batch`-ready spectrograms with the encoder's norm.
    pub fn normalize_corpus(
        &self,
        corpus: &[Arc<LogMelSpectrogram>],
    ) -> Vec<Arc<LogMelSpectrogram>> {
        let norm = self.models.student.norm;
        corpus.iter().map(|s| Arc::new(norm.apply(s))).collect()
    }

    /// One step on already-standardised inputs; `sources` are their corpus
    /// indices.
    pub fn train_step(
        &mut self,
        batch: &[Arc<LogMelSpectrogram>],
        sources: &[usize],
    ) -> Result<StepStats> {
        if batch.len() < 2 {
            return Err(SlicerError::InvalidInput(format!(
                "train_step needs at least 2 inputs, got {}",
                batch.len()
            )));
        }
        let mut views_a = Vec::with_capacity(batch.len());
        let mut views_b = Vec::with_capacity(batch.len());
        for (i, x) in batch.iter().enumerate() {
            let v = make_views_from(
                x,
                sources.get(i).copied(),
                &mut self.queue,
                self.kmix.as_ref(),
                &self.config.augment,
                &mut self.aug_rng,
            )?;
            views_a.push(v.a);
            views_b.push(v.b);
        }
        let enc = &self.config.encoder;
        let xa = batch_tensor(enc, &views_a.iter().collect::<Vec<_>>())?;
        let xb = batch_tensor(enc, &views_b.iter().collect::<Vec<_>>())?;
        drop((views_a, views_b));

        let mut tape = Tape::new();
        let student = self.models.student.bind(&mut tape, true);
        let teacher = self.models.teacher.bind(&mut tape, false);
        let (xa, xb) = (tape.constant(xa), tape.constant(xb));
        // The single-direction instance loss reads only `sa` and `tb`;
        // forwards nothing reads are skipped and their slot reuses a
        // computed output.
        let loss_cfg = &self.config.loss;
        let need_sb =
            loss_cfg.symmetric || loss_cfg.cluster_enabled() || loss_cfg.entropy_weight > 0.0;
        let need_ta = loss_cfg.symmetric && loss_cfg.instance_enabled();
        let sa = student.forward(&mut tape, xa)?;
        let sb = if need_sb {
            student.forward(&mut tape, xb)?
        } else {
            sa
        };
        let tb = teacher.forward(&mut tape, xb)?;
        let ta = if need_ta {
            teacher.forward(&mut tape, xa)?
        } else {
            tb
        };
        let terms = total_loss(&mut tape, sa, sb, ta, tb, &self.config.loss)?;
        let loss = tape.value(terms.total).item();
        if !loss.is_finite() {
            return Err(SlicerError::InvalidInput(format!(
                "non-finite loss {loss} at step {}",
                self.step
            )));
        }
        let grads = tape.backward(terms.total)?;
        let teacher_grads = teacher.vars.iter().filter(|&&v| grads.contains(v)).count();
        let student_grads = student.vars.iter().filter(|&&v| grads.contains(v)).count();
        let g: Vec<Tensor> = student
            .vars
            .iter()
            .zip(&self.models.student.tensors)
            .map(|(&v, p)| grads.get_or_zeros(v, p))
            .collect();
        drop(tape);

        self.adam.step(&mut self.models.student.tensors, &g)?;
        self.models.ema_update()?;
        self.step += 1;
        Ok(StepStats {
            loss,
            instance: terms.instance,
            cluster: terms.cluster,
            student_grads,
            teacher_grads,
        })
    }

    /// Batches of epoch `epoch` (0-based): a Fisher-Yates shuffle drawn from
    /// the epoch's own stream, trailing partial batch dropped.
    pub fn epoch_batches(&self, corpus_len: usize, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..corpus_len).collect();
        order.shuffle(&mut seed::indexed_rng(
            self.config.seed,
            seed::SHUFFLE,
            epoch as u64,
        ));
        order
            .chunks_exact(self.config.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Runs one epoch over the standardised corpus and returns its mean
    /// step loss.
    pub fn run_epoch(&mut self, corpus: &[Arc<LogMelSpectrogram>]) -> Result<f64> {
        let batches = self.epoch_batches(corpus.len(), self.epoch);
        if batches.is_empty() {
            return Err(SlicerError::InvalidInput(format!(
                "corpus of {} is smaller than batch size {}",
                corpus.len(),
                self.config.batch_size
            )));
        }
        let mut total = 0.0;
        for idx in &batches {
            let batch: Vec<Arc<LogMelSpectrogram>> =
                idx.iter().map(|&i| Arc::clone(&corpus[i])).collect();
            total += self.train_step(&batch, idx)?.loss;
        }
        self.epoch += 1;
        Ok(total / batches.len() as f64)
    }

    /// Trains until `self.config.epochs` epochs are complete, writing one
    /// `epoch <n> loss <value> lr <value>` line per epoch.
    pub fn run(
        &mut self,
        corpus: &[Arc<LogMelSpectrogram>],
        log: &mut dyn Write,
    ) -> Result<Vec<f64>> {
        let mut losses = Vec::new();
        while self.epoch < self.config.epochs {
            let loss = self.run_epoch(corpus)?;
            writeln!(log, "{}", log_line(self.epoch, loss, self.config.lr))?;
            log.flush()?;
            losses.push(loss);
        }
        Ok(losses)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            config: self.config.clone(),
            student: self.models.student.clone(),
            teacher: self.models.teacher.clone(),
            adam: self.adam.clone(),
            rng: seed::RngState::capture(&self.aug_rng),
            epoch: self.epoch,
            step: self.step,
            queue: QueueSnapshot::capture(&self.queue)?,
            kmeans: self.kmix.as_ref().map(|k| k.model.clone()),
        })
    }

    /// Restores state from `ckpt`; queue entries are re-linked to `corpus`
    /// (the raw corpus the checkpoint was trained on).
    pub fn from_checkpoint(
        ckpt: Checkpoint,
        corpus: &[Arc<LogMelSpectrogram>],
    ) -> Result<(Self, Vec<Arc<LogMelSpectrogram>>)> {
        ckpt.config.validate()?;
        let norm = ckpt.student.norm;
        let normalized: Vec<Arc<LogMelSpectrogram>> =
            corpus.iter().map(|s| Arc::new(norm.apply(s))).collect();
        let queue = ckpt.queue.relink(&normalized)?;
        let trainer = Self {
            kmix: ckpt.kmeans.map(|m| KMixIndex::standardised(m, norm)),
            models: StudentTeacher {
                student: ckpt.student,
                teacher: ckpt.teacher,
                momentum: ckpt.config.momentum,
            },
            adam: ckpt.adam,
            queue,
            aug_rng: ckpt.rng.restore(),
            epoch: ckpt.epoch,
            step: ckpt.step,
            config: ckpt.config,
        };
        Ok((trainer, normalized))
    }
}

/// Output of [`pretrain`].
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub checkpoint: Checkpoint,
    pub epoch_losses: Vec<f64>,
    pub kmeans: Option<KMeansFit>,
}

/// One loss log line; `epoch` counts completed epochs from 1.
pub fn log_line(epoch: usize, loss: f64, lr: f64) -> String {
    format!("epoch {epoch} loss {loss} lr {lr}")
}

/// A trainer ready to run on its standardised corpus.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub trainer: Trainer,
    pub corpus: Vec<Arc<LogMelSpectrogram>>,
    pub kmeans: Option<KMeansFit>,
}

/// Fits the input standardisation and, with k-mix, k-means on the raw
/// pooled features of the corpus, then builds a fresh trainer.
pub fn prepare(corpus: &[Arc<LogMelSpectrogram>], cfg: &TrainConfig) -> Result<Prepared> {
    cfg.validate()?;
    if corpus.len() < cfg.batch_size {
        return Err(SlicerError::InvalidInput(format!(
            "corpus of {} clips is smaller than batch size {}",
            corpus.len(),
            cfg.batch_size
        )));
    }
    let norm = InputNorm::fit(corpus.iter().map(|s| s.as_ref()))?;
    let kmeans = if cfg.augment.kmix_enabled {
        Some(fit_on_corpus(
            corpus,
            cfg.kmeans_fraction,
            cfg.kmeans_k,
            cfg.seed,
            cfg.kmeans_max_iters,
        )?)
    } else {
        None
    };
    let index = kmeans
        .as_ref()
        .map(|f| KMixIndex::standardised(f.model.clone(), norm));
    let trainer = Trainer::new(cfg.clone(), norm, index)?;
    let corpus = trainer.normalize_corpus(corpus);
    Ok(Prepared {
        trainer,
        corpus,
        kmeans,
    })
}

/// [`prepare`] followed by `cfg.epochs` epochs.
pub fn pretrain(
    corpus: &[Arc<LogMelSpectrogram>],
    cfg: &TrainConfig,
    log: &mut dyn Write,
) -> Result<Pretrained> {
    let Prepared {
        mut trainer,
        corpus,
        kmeans,
    } = prepare(corpus, cfg)?;
    let epoch_losses = trainer.run(&corpus, log)?;
    Ok(Pretrained {
        checkpoint: trainer.checkpoint()?,
        epoch_losses,
        kmeans,
    })
}
