//! SLK1 checkpoints.
//!
//! Layout (little-endian): magic `SLK1`, u32 version, u64 config length and
//! the UTF-8 TOML config, u32 record count, then records of
//! (u32 name length, name, u32 rank, u64 extents, f64 values), then a u32
//! length and the augmentation rng state blob.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use slicer_autodiff::Tensor;

use crate::audio::LogMelSpectrogram;
use crate::augment::{MixQueue, QueueEntry};
use crate::clustering::KMeansModel;
use crate::error::{Result, SlicerError};
use crate::formats::{put_f64s, put_u32, put_u64, Reader};
use crate::model::{EncoderParams, InputNorm, PARAM_NAMES};
use crate::optim::AdamState;
use crate::seed::RngState;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 4] = b"SLK1";
pub const VERSION: u32 = 1;
const FORMAT: &str = "SLK1";

/// Queue contents by corpus index, so a checkpoint does not duplicate the
/// corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueSnapshot {
    pub capacity: usize,
    pub next_counter: u64,
    /// `(source, centroid, counter)`, oldest first.
    pub entries: Vec<(usize, Option<usize>, u64)>,
}

impl QueueSnapshot {
    pub fn capture(q: &MixQueue) -> Result<Self> {
        let entries = q
            .entries()
            .map(|e| {
                e.source.map(|s| (s, e.centroid, e.counter)).ok_or_else(|| {
                    SlicerError::InvalidInput("queue entry without a corpus index".into())
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            capacity: q.capacity(),
            next_counter: q.next_counter(),
            entries,
        })
    }

    /// Rebuilds the queue over `corpus` (already standardised).
    pub fn relink(&self, corpus: &[Arc<LogMelSpectrogram>]) -> Result<MixQueue> {
        let entries = self
            .entries
            .iter()
            .map(|&(source, centroid, counter)| {
                let spectrogram = corpus.get(source).cloned().ok_or_else(|| {
                    SlicerError::InvalidInput(format!(
                        "queue refers to clip {source}, corpus has {}",
                        corpus.len()
                    ))
                })?;
                Ok(QueueEntry {
                    spectrogram,
                    centroid,
                    counter,
                    source: Some(source),
                })
            })
            .collect::<Result<_>>()?;
        MixQueue::restore(self.capacity, entries, self.next_counter)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub student: EncoderParams,
    pub teacher: EncoderParams,
    pub adam: AdamState,
    pub rng: RngState,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub queue: QueueSnapshot,
    pub kmeans: Option<KMeansModel>,
}

struct Record {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn rec(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Record {
    Record {
        name: name.into(),
        shape,
        data,
    }
}

fn tensor_rec(name: String, t: &Tensor) -> Record {
    rec(name, t.shape().to_vec(), t.data().to_vec())
}

/// Integers are stored as f64, exact below 2^53.
fn exact(v: u64) -> Result<f64> {
    if v > (1u64 << 53) {
        return Err(SlicerError::InvalidInput(format!(
            "{v} too large to store exactly"
        )));
    }
    Ok(v as f64)
}

impl Checkpoint {
    fn records(&self) -> Result<Vec<Record>> {
        let mut out = Vec::new();
        for (prefix, p) in [("student", &self.student), ("teacher", &self.teacher)] {
            for (name, t) in p.named() {
                out.push(tensor_rec(format!("{prefix}.{name}"), t));
            }
        }
        for (i, name) in PARAM_NAMES.iter().enumerate() {
            out.push(tensor_rec(format!("adam.m.{name}"), &self.adam.m[i]));
            out.push(tensor_rec(format!("adam.v.{name}"), &self.adam.v[i]));
        }
        out.push(rec("adam.step", vec![], vec![exact(self.adam.step)?]));
        out.push(rec(
            "input.norm",
            vec![2],
            vec![self.student.norm.mean, self.student.norm.std],
        ));
        out.push(rec("state.epoch", vec![], vec![exact(self.epoch as u64)?]));
        out.push(rec("state.step", vec![], vec![exact(self.step)?]));
        let q = &self.queue;
        out.push(rec(
            "queue.meta",
            vec![2],
            vec![exact(q.capacity as u64)?, exact(q.next_counter)?],
        ));
        let n = q.entries.len();
        let mut sources = Vec::with_capacity(n);
        let mut centroids = Vec::with_capacity(n);
        let mut counters = Vec::with_capacity(n);
        for &(s, c, k) in &q.entries {
            sources.push(exact(s as u64)?);
            centroids.push(match c {
                Some(c) => exact(c as u64)?,
                None => -1.0,
            });
            counters.push(exact(k)?);
        }
        out.push(rec("queue.sources", vec![n], sources));
        out.push(rec("queue.centroids", vec![n], centroids));
        out.push(rec("queue.counters", vec![n], counters));
        if let Some(k) = &self.kmeans {
            out.push(rec(
                "kmeans.centroids",
                vec![k.k(), k.dim()],
                k.centroids().to_vec(),
            ));
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = toml::to_string(&self.config)
            .map_err(|e| SlicerError::format(FORMAT, format!("config serialisation: {e}")))?;
        let records = self.records()?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u64(&mut out, config.len() as u64);
        out.extend_from_slice(config.as_bytes());
        put_u32(&mut out, records.len() as u32);
        for r in &records {
            put_u32(&mut out, r.name.len() as u32);
            out.extend_from_slice(r.name.as_bytes());
            put_u32(&mut out, r.shape.len() as u32);
            for &e in &r.shape {
                put_u64(&mut out, e as u64);
            }
            put_f64s(&mut out, &r.data);
        }
        let rng = self.rng.to_bytes();
        put_u32(&mut out, rng.len() as u32);
        out.extend_from_slice(&rng);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, FORMAT);
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(SlicerError::format(
                FORMAT,
                format!("unsupported version {version}, expected {VERSION}"),
            ));
        }
        let len = usize::try_from(r.u64()?)
            .map_err(|_| SlicerError::format(FORMAT, "config length overflows"))?;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|e| SlicerError::format(FORMAT, format!("config is not UTF-8: {e}")))?;
        let config: TrainConfig = toml::from_str(text)
            .map_err(|e| SlicerError::format(FORMAT, format!("config: {e}")))?;
        let count = r.u32()?;
        let mut records = std::collections::HashMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| SlicerError::format(FORMAT, "record name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .ok_or_else(|| SlicerError::format(FORMAT, format!("record {name} too large")))?;
            let data = r.f64s(n)?;
            if records.insert(name.clone(), (shape, data)).is_some() {
                return Err(SlicerError::format(
                    FORMAT,
                    format!("duplicate record {name}"),
                ));
            }
        }
        let rng_len = r.u32()? as usize;
        let rng = RngState::from_bytes(r.take(rng_len)?)
            .ok_or_else(|| SlicerError::format(FORMAT, "malformed rng state"))?;
        r.finish()?;

        let mut take = |name: &str| {
            records
                .remove(name)
                .ok_or_else(|| SlicerError::format(FORMAT, format!("missing record {name}")))
        };
        let mut tensor = |name: &str| -> Result<Tensor> {
            let (shape, data) = take(name)?;
            Tensor::new(shape, data)
                .map_err(|e| SlicerError::format(FORMAT, format!("{name}: {e}")))
        };
        let norm_t = tensor("input.norm")?;
        if norm_t.len() != 2 {
            return Err(SlicerError::format(FORMAT, "input.norm must hold 2 values"));
        }
        let norm = InputNorm {
            mean: norm_t.data()[0],
            std: norm_t.data()[1],
        };
        let mut params = |prefix: &str| -> Result<EncoderParams> {
            let ts = PARAM_NAMES
                .iter()
                .map(|n| tensor(&format!("{prefix}.{n}")))
                .collect::<Result<Vec<_>>>()?;
            EncoderParams::from_tensors(config.encoder, norm, ts)
        };
        let student = params("student")?;
        let teacher = params("teacher")?;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for n in PARAM_NAMES {
            m.push(tensor(&format!("adam.m.{n}"))?);
            v.push(tensor(&format!("adam.v.{n}"))?);
        }
        let mut int = |name: &str| -> Result<u64> {
            let t = tensor(name)?;
            let x = t.data()[0];
            if t.len() != 1 || x < 0.0 || x.fract() != 0.0 {
                return Err(SlicerError::format(
                    FORMAT,
                    format!("{name} is not a count"),
                ));
            }
            Ok(x as u64)
        };
        let adam_step = int("adam.step")?;
        let epoch = int("state.epoch")? as usize;
        let step = int("state.step")?;
        let (_, meta) = take("queue.meta")?;
        let (_, sources) = take("queue.sources")?;
        let (_, centroids) = take("queue.centroids")?;
        let (_, counters) = take("queue.counters")?;
        if meta.len() != 2 || sources.len() != centroids.len() || sources.len() != counters.len() {
            return Err(SlicerError::format(FORMAT, "inconsistent queue records"));
        }
        let queue = QueueSnapshot {
            capacity: meta[0] as usize,
            next_counter: meta[1] as u64,
            entries: sources
                .iter()
                .zip(&centroids)
                .zip(&counters)
                .map(|((&s, &c), &k)| (s as usize, (c >= 0.0).then_some(c as usize), k as u64))
                .collect(),
        };
        let kmeans = match records.remove("kmeans.centroids") {
            Some((shape, data)) if shape.len() == 2 => {
                Some(KMeansModel::new(shape[0], shape[1], data)?)
            }
            Some(_) => return Err(SlicerError::format(FORMAT, "kmeans.centroids must be 2-d")),
            None => None,
        };
        if let Some(extra) = records.keys().next() {
            return Err(SlicerError::format(
                FORMAT,
                format!("unknown record {extra}"),
            ));
        }
        let adam = AdamState {
            config: config.adam(),
            step: adam_step,
            m,
            v,
        };
        Ok(Self {
            config,
            student,
            teacher,
            adam,
            rng,
            epoch,
            step,
            queue,
            kmeans,
        })
    }

    /// Writes to a sibling temporary file first, so an interrupted save
    /// leaves any previous checkpoint intact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
