//! Frozen-encoder linear probe and the component ablation ladder.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use slicer_autodiff::{Tape, Tensor};

use crate::audio::{LabeledSet, LogMelSpectrogram};
use crate::error::{Result, SlicerError};
use crate::model::EncoderParams;
use crate::optim::{AdamConfig, AdamState};
use crate::seed;
use crate::train::{pretrain, TrainConfig};

const EMBED_CHUNK: usize = 64;

/// Standardises raw spectrograms with the encoder's input norm and embeds
/// them without recording gradients.
pub fn embed_dataset(encoder: &EncoderParams, data: &[Arc<LogMelSpectrogram>]) -> Result<Tensor> {
    if data.is_empty() {
        return Err(SlicerError::InvalidInput(
            "cannot embed an empty dataset".into(),
        ));
    }
    let c = encoder.config.embed_dim;
    let mut out = Vec::with_capacity(data.len() * c);
    for chunk in data.chunks(EMBED_CHUNK) {
        let normed: Vec<LogMelSpectrogram> = chunk.iter().map(|s| encoder.norm.apply(s)).collect();
        let y = encoder.embed(&normed.iter().collect::<Vec<_>>())?;
        out.extend_from_slice(y.data());
    }
    Ok(Tensor::new(vec![data.len(), c], out)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub test_fraction: f64,
    /// Share of the training split held back for early stopping.
    pub val_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            max_epochs: 500,
            patience: 10,
            test_fraction: 0.2,
            val_fraction: 0.2,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(SlicerError::config("probe.lr", "must be positive"));
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return Err(SlicerError::config(
                "probe.max_epochs",
                "epochs and patience must be at least 1",
            ));
        }
        for (key, f) in [
            ("probe.test_fraction", self.test_fraction),
            ("probe.val_fraction", self.val_fraction),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return Err(SlicerError::config(key, "must lie in (0, 1)"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDescriptor {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    /// `confusion[true][predicted]` over the test split.
    pub confusion: Vec<Vec<usize>>,
    pub split: SplitDescriptor,
    pub epochs: usize,
    pub best_val_loss: f64,
}

impl ProbeResult {
    pub fn n_test(&self) -> usize {
        self.split.n_test
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let k = self.confusion.len();
        let _ = writeln!(
            s,
            "accuracy {:.4}  (train {}, val {}, test {}, {} probe epochs)",
            self.accuracy, self.split.n_train, self.split.n_val, self.split.n_test, self.epochs
        );
        let _ = write!(s, "{:>8}", "class");
        for p in 0..k {
            let _ = write!(s, " {:>6}", format!("p{p}"));
        }
        let _ = writeln!(s, " {:>8}", "acc");
        for (t, row) in self.confusion.iter().enumerate() {
            let _ = write!(s, "{:>8}", t);
            for v in row {
                let _ = write!(s, " {v:>6}");
            }
            let _ = writeln!(s, " {:>8.4}", self.per_class_accuracy[t]);
        }
        s
    }
}

/// Per-class split of `indices` into (kept, held out). Each class is
/// shuffled with a stream keyed by its first member, so the split does not
/// depend on the numeric label ids.
fn stratify(
    indices: &[usize],
    labels: &[usize],
    fraction: f64,
    seed: u64,
    salt: &str,
) -> (Vec<usize>, Vec<usize>) {
    let mut classes: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for &i in indices {
        classes.entry(labels[i]).or_default().push(i);
    }
    let mut kept = Vec::new();
    let mut held = Vec::new();
    for members in classes.values() {
        let mut m = members.clone();
        let mut rng = seed::indexed_rng(seed, &format!("{}.{salt}", seed::PROBE), m[0] as u64);
        m.shuffle(&mut rng);
        let n_held = ((m.len() as f64 * fraction).round() as usize).clamp(1, m.len() - 1);
        held.extend_from_slice(&m[..n_held]);
        kept.extend_from_slice(&m[n_held..]);
    }
    kept.sort_unstable();
    held.sort_unstable();
    (kept, held)
}

fn gather(emb: &Tensor, idx: &[usize]) -> Vec<Vec<f64>> {
    idx.iter().map(|&i| emb.row(i).to_vec()).collect()
}

/// Mean softmax cross-entropy of `x W + b` and its tape handles.
fn probe_loss(
    tape: &mut Tape,
    x: &Tensor,
    y: &[usize],
    w: slicer_autodiff::Var,
    b: slicer_autodiff::Var,
) -> Result<slicer_autodiff::Var> {
    let xv = tape.constant(x.clone());
    let logits = tape.linear(xv, w, b)?;
    let logp = tape.log_softmax(logits, 1)?;
    let picked = tape.take_along_rows(logp, y.iter().map(|&c| vec![c]).collect())?;
    let s = tape.sum(picked)?;
    Ok(tape.scale(s, -1.0 / y.len() as f64)?)
}

fn predict(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<usize> {
    let (d, k) = (w.shape()[0], w.shape()[1]);
    (0..x.shape()[0])
        .map(|i| {
            let row = x.row(i);
            let scores: Vec<f64> = (0..k)
                .map(|c| b.data()[c] + (0..d).map(|j| row[j] * w.data()[j * k + c]).sum::<f64>())
                .collect();
            let mut best = 0;
            for c in 1..k {
                if scores[c] > scores[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Stratified test split, then a linear softmax classifier trained by
/// full-batch Adam on standardised features with early stopping on a
/// validation subset of the training split.
pub fn linear_probe(
    emb: &Tensor,
    labels: &[usize],
    split_seed: u64,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    cfg.validate()?;
    if emb.rank() != 2 || emb.shape()[0] != labels.len() {
        return Err(SlicerError::Shape {
            context: "linear_probe",
            detail: format!("embeddings {:?} for {} labels", emb.shape(), labels.len()),
        });
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count();
    if present < 2 {
        return Err(SlicerError::InvalidInput(
            "linear probe needs at least 2 classes".into(),
        ));
    }
    if let Some(c) = counts.iter().position(|&c| c > 0 && c < 4) {
        return Err(SlicerError::InvalidInput(format!(
            "class {c} has {} samples, the probe needs at least 4",
            counts[c]
        )));
    }

    let all: Vec<usize> = (0..labels.len()).collect();
    let (train, test) = stratify(&all, labels, cfg.test_fraction, split_seed, "test");
    let (fit, val) = stratify(&train, labels, cfg.val_fraction, split_seed, "val");

    // Standardise with statistics of the fitting subset.
    let d = emb.shape()[1];
    let fit_rows = gather(emb, &fit);
    let mut mean = vec![0.0; d];
    for r in &fit_rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / fit_rows.len() as f64;
        }
    }
    let mut std = vec![0.0; d];
    for r in &fit_rows {
        for ((s, v), m) in std.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m) / fit_rows.len() as f64;
        }
    }
    for s in std.iter_mut() {
        *s = if s.sqrt() > 1e-12 { s.sqrt() } else { 1.0 };
    }
    let design = |idx: &[usize]| -> Result<Tensor> {
        let data = idx
            .iter()
            .flat_map(|&i| {
                emb.row(i)
                    .iter()
                    .zip(&mean)
                    .zip(&std)
                    .map(|((v, m), s)| (v - m) / s)
            })
            .collect();
        Ok(Tensor::new(vec![idx.len(), d], data)?)
    };
    let (x_fit, x_val, x_test) = (design(&fit)?, design(&val)?, design(&test)?);
    let y_of = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
    let (y_fit, y_val, y_test) = (y_of(&fit), y_of(&val), y_of(&test));

    let mut params = vec![Tensor::zeros(&[d, k]), Tensor::zeros(&[k])];
    let mut adam = AdamState::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &params,
    );
    let val_loss = |p: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let w = tape.constant(p[0].clone());
        let b = tape.constant(p[1].clone());
        let l = probe_loss(&mut tape, &x_val, &y_val, w, b)?;
        Ok(tape.value(l).item())
    };
    let mut best = (val_loss(&params)?, params.clone());
    let mut since_best = 0;
    let mut epochs = 0;
    while epochs < cfg.max_epochs && since_best < cfg.patience {
        let mut tape = Tape::new();
        let w = tape.param(params[0].clone());
        let b = tape.param(params[1].clone());
        let l = probe_loss(&mut tape, &x_fit, &y_fit, w, b)?;
        let g = tape.backward(l)?;
        let grads = vec![g.get_or_zeros(w, &params[0]), g.get_or_zeros(b, &params[1])];
        adam.step(&mut params, &grads)?;
        epochs += 1;
        let v = val_loss(&params)?;
        if v < best.0 {
            best = (v, params.clone());
            since_best = 0;
        } else {
            since_best += 1;
        }
    }

    let pred = predict(&x_test, &best.1[0], &best.1[1]);
    let mut confusion = vec![vec![0usize; k]; k];
    for (&t, &p) in y_test.iter().zip(&pred) {
        confusion[t][p] += 1;
    }
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let n: usize = row.iter().sum();
            if n == 0 {
                0.0
            } else {
                row[c] as f64 / n as f64
            }
        })
        .collect();
    Ok(ProbeResult {
        accuracy: correct as f64 / y_test.len() as f64,
        per_class_accuracy,
        confusion,
        split: SplitDescriptor {
            seed: split_seed,
            n_train: fit.len(),
            n_val: val.len(),
            n_test: test.len(),
        },
        epochs,
        best_val_loss: best.0,
    })
}

/// First 16 hex digits of the SHA-256 of the config's TOML form.
pub fn config_hash(cfg: &TrainConfig) -> String {
    let text = toml::to_string(cfg).expect("config serialises");
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rung {
    pub label: &'static str,
    pub config: TrainConfig,
}

/// The four cumulative configurations: plain momentum contrast with FIFO
/// mixup, then the symmetric instance loss, the cluster loss and k-mix.
pub fn ablation_ladder(base: &TrainConfig) -> Vec<Rung> {
    let with = |symmetric: bool, cluster: bool, kmix: bool| {
        let mut c = base.clone();
        c.loss.symmetric = symmetric;
        c.loss.cluster_loss = cluster;
        c.augment.kmix_enabled = kmix;
        c
    };
    vec![
        Rung {
            label: "moco",
            config: with(false, false, false),
        },
        Rung {
            label: "+symmetric",
            config: with(true, false, false),
        },
        Rung {
            label: "+cluster",
            config: with(true, true, false),
        },
        Rung {
            label: "+kmix",
            config: with(true, true, true),
        },
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub config_hash: String,
    pub accuracy: f64,
    pub n_test: usize,
    pub epoch_losses: Vec<f64>,
}

impl AblationRow {
    pub fn machine_line(&self) -> String {
        format!(
            "config={} acc={} n_test={}",
            self.config_hash, self.accuracy, self.n_test
        )
    }
}

pub fn format_table(rows: &[AblationRow]) -> String {
    let mut s = format!(
        "{:<12} {:<16} {:>8} {:>6}\n",
        "rung", "config", "acc", "n_test"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<12} {:<16} {:>8.4} {:>6}",
            r.label, r.config_hash, r.accuracy, r.n_test
        );
    }
    s
}

/// Pretrains and probes every rung with the same seeds; `on_row` sees each
/// row as soon as it is complete.
pub fn ablation_report(
    corpus: &[Arc<LogMelSpectrogram>],
    probe_data: &LabeledSet,
    ladder: &[Rung],
    probe: &ProbeConfig,
    probe_seed: u64,
    on_row: &mut dyn FnMut(&AblationRow) -> Result<()>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for rung in ladder {
        let out = pretrain(corpus, &rung.config, &mut std::io::sink())?;
        let emb = embed_dataset(&out.checkpoint.student, &probe_data.spectrograms)?;
        let res = linear_probe(&emb, &probe_data.labels, probe_seed, probe)?;
        let row = AblationRow {
            label: rung.label.to_string(),
            config_hash: config_hash(&rung.config),
            accuracy: res.accuracy,
            n_test: res.n_test(),
            epoch_losses: out.epoch_losses,
        };
        on_row(&row)?;
        rows.push(row);
    }
    Ok(rows)
}
