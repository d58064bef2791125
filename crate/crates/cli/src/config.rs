//! The run configuration file: every `TrainConfig` key at the top level plus
//! `[audio]`, `[data]`, `[probe]` and `[paths]` sections.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use slicer_core::audio::AudioConfig;
use slicer_core::eval::ProbeConfig;
use slicer_core::train::TrainConfig;
use toml::{Table, Value};

use crate::CliError;

/// Environment variable that replaces the root seed.
pub const SEED_ENV: &str = "SLICER_SEED";

/// Synthetic corpora used for pretraining and probing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub corpus_per_class: usize,
    pub corpus_seed: u64,
    pub probe_per_class: usize,
    /// Distinct from `corpus_seed` so probe clips are held out.
    pub probe_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus_per_class: 500,
            corpus_seed: 1,
            probe_per_class: 100,
            probe_seed: 2,
        }
    }
}

/// Output locations; relative paths resolve against `out_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
    /// SMF1 cache of synthesised spectrograms; empty disables caching.
    pub corpus_cache: PathBuf,
    pub checkpoint: PathBuf,
    pub kmeans: PathBuf,
    pub log: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            corpus_cache: PathBuf::new(),
            checkpoint: PathBuf::from("checkpoint.slk"),
            kmeans: PathBuf::from("kmeans.kmc"),
            log: PathBuf::from("loss.log"),
        }
    }
}

impl PathsConfig {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out_dir.join(p)
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.resolve(&self.checkpoint)
    }

    pub fn kmeans_path(&self) -> PathBuf {
        self.resolve(&self.kmeans)
    }

    pub fn log_path(&self) -> PathBuf {
        self.resolve(&self.log)
    }

    pub fn cache_dir(&self) -> Option<PathBuf> {
        (!self.corpus_cache.as_os_str().is_empty()).then(|| self.resolve(&self.corpus_cache))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub audio: AudioConfig,
    pub data: DataConfig,
    pub probe: ProbeConfig,
    pub paths: PathsConfig,
}

fn section<T: for<'de> Deserialize<'de> + Default>(
    table: &mut Table,
    name: &str,
) -> Result<T, CliError> {
    match table.remove(name) {
        None => Ok(T::default()),
        Some(v) => v.try_into().map_err(|e: toml::de::Error| {
            CliError::Usage(format!("config section [{name}]: {}", e.message()))
        }),
    }
}

impl RunConfig {
    pub fn from_table(mut table: Table) -> Result<Self, CliError> {
        let audio = section(&mut table, "audio")?;
        let data = section(&mut table, "data")?;
        let probe = section(&mut table, "probe")?;
        let paths = section(&mut table, "paths")?;
        let train = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("config: {}", e.message())))?;
        Ok(Self {
            train,
            audio,
            data,
            probe,
            paths,
        })
    }

    pub fn to_table(&self) -> Table {
        let mut t = match Value::try_from(&self.train).expect("config serialises") {
            Value::Table(t) => t,
            _ => unreachable!("structs serialise to tables"),
        };
        t.insert(
            "audio".into(),
            Value::try_from(self.audio).expect("serialises"),
        );
        t.insert(
            "data".into(),
            Value::try_from(self.data).expect("serialises"),
        );
        t.insert(
            "probe".into(),
            Value::try_from(self.probe).expect("serialises"),
        );
        t.insert(
            "paths".into(),
            Value::try_from(&self.paths).expect("serialises"),
        );
        t
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_table()).expect("config serialises")
    }

    /// Reads `path` (or defaults when `None`), then applies `SLICER_SEED` and
    /// the `key=value` overrides in order, and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            None => Table::new(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::Usage(format!("cannot read config {}: {e}", p.display()))
                })?;
                text.parse::<Table>().map_err(|e| {
                    CliError::Usage(format!("config {}: {}", p.display(), e.message()))
                })?
            }
        };
        if let Ok(s) = std::env::var(SEED_ENV) {
            let seed: i64 = s.trim().parse().ok().filter(|v| *v >= 0).ok_or_else(|| {
                CliError::Usage(format!("{SEED_ENV}={s:?} is not an integer in [0, 2^63)"))
            })?;
            table.insert("seed".into(), Value::Integer(seed));
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg = Self::from_table(table)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate()?;
        self.audio.validate()?;
        self.probe.validate()?;
        let enc = &self.train.encoder;
        if self.audio.n_mels != enc.n_mels || self.audio.frames() != enc.n_frames {
            return Err(CliError::Usage(format!(
                "invalid configuration `encoder`: audio produces {}x{} spectrograms, encoder expects {}x{}",
                self.audio.n_mels,
                self.audio.frames(),
                enc.n_mels,
                enc.n_frames
            )));
        }
        if self.data.corpus_per_class == 0 || self.data.probe_per_class == 0 {
            return Err(CliError::Usage(
                "invalid configuration `data`: clip counts must be at least 1".into(),
            ));
        }
        let corpus = self.data.corpus_per_class * slicer_core::audio::SynthClass::ALL.len();
        if corpus < self.train.batch_size {
            return Err(CliError::Usage(format!(
                "invalid configuration `batch_size`: {} exceeds the corpus of {corpus} clips",
                self.train.batch_size
            )));
        }
        Ok(())
    }
}

/// `dotted.key=value`; the value is read as a TOML literal and falls back to
/// a bare string.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override {spec:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!(
            "override key {key:?} is malformed"
        )));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        cur = match cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
        {
            Value::Table(t) => t,
            _ => {
                return Err(CliError::Usage(format!(
                    "override key {key:?}: `{p}` is not a section"
                )))
            }
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Documentation for each key of the reference file; `large scale:` gives
/// the value used for full-size pretraining where it differs or matters.
const KEY_DOCS: &[(&str, &str)] = &[
    ("seed", "Root seed; augmentation, init, shuffle, probe split and k-means streams are derived from it. SLICER_SEED overrides it."),
    ("batch_size", "Batch size N (>= 2). Desk-scale default; large scale: 1024."),
    ("epochs", "Pretraining epochs. Desk-scale default; large scale: 100."),
    ("lr", "Adam learning rate (large scale: 3e-4)."),
    ("beta1", "Adam first-moment decay."),
    ("beta2", "Adam second-moment decay."),
    ("eps", "Adam denominator epsilon."),
    ("momentum", "Teacher EMA momentum m: teacher = m*teacher + (1-m)*student."),
    ("kmeans_k", "Number of k-means centroids k (large scale: 128)."),
    ("kmeans_fraction", "Share of the corpus used to fit k-means (large scale: about 10%)."),
    ("kmeans_max_iters", "Lloyd iteration cap per k-means++ start."),
    ("queue_capacity", "Mix queue length (large scale: 2048)."),
    ("encoder.n_mels", "Input mel bins (large scale: 128)."),
    ("encoder.n_frames", "Input frames; must match the audio settings."),
    ("encoder.channels", "Output channels of the two conv blocks."),
    ("encoder.conv_stride", "Stride of both 3x3 convolutions."),
    ("encoder.hidden", "Width of the hidden fully connected layer."),
    ("encoder.embed_dim", "Output dimension C, also the number of soft clusters (large scale: 256)."),
    ("loss.tau", "InfoNCE temperature."),
    ("loss.num_negatives", "\"all\" or a count K of cyclic in-batch negatives."),
    ("loss.normalize_rows", "L2-normalise instance embeddings before similarities."),
    ("loss.cluster_softmax", "Row softmax before the cluster loss."),
    ("loss.normalize_cols", "L2-normalise cluster columns before similarities."),
    ("loss.symmetric", "Use both cross-view instance directions."),
    ("loss.cluster_loss", "Add the cluster-level contrastive term."),
    ("loss.w_instance", "Weight of the instance term."),
    ("loss.w_cluster", "Weight of the cluster term."),
    ("loss.entropy_weight", "Weight of the cluster-assignment entropy regulariser (0 = off)."),
    ("augment.alpha", "Upper bound of the mixing ratio lambda ~ U(0, alpha); 0 disables mixing."),
    ("augment.r", "k-mix window: sample from the r farthest queue entries (large scale: 128)."),
    ("augment.rrc_freq_scale", "Random resized crop frequency extent range (fraction of F)."),
    ("augment.rrc_time_scale", "Random resized crop time extent range (fraction of T)."),
    ("augment.rrc_canvas", "Crop placement canvas as a multiple of the input size; outside reads 0."),
    ("augment.kmix_enabled", "Choose mixing partners by centroid distance (k-mix) instead of uniformly."),
    ("audio.sample_rate", "Synthetic clip sample rate in Hz."),
    ("audio.window", "STFT window length (power of two)."),
    ("audio.hop", "STFT hop in samples."),
    ("audio.n_mels", "Mel filterbank size."),
    ("audio.floor_epsilon", "Floor applied before the log."),
    ("audio.clip_seconds", "Clip length in seconds."),
    ("data.corpus_per_class", "Pretraining clips per synthetic class (4 classes)."),
    ("data.corpus_seed", "Seed of the pretraining corpus."),
    ("data.probe_per_class", "Held-out probe clips per class."),
    ("data.probe_seed", "Seed of the probe set."),
    ("probe.lr", "Adam learning rate of the linear probe."),
    ("probe.max_epochs", "Full-batch probe epochs at most."),
    ("probe.patience", "Stop after this many epochs without validation improvement."),
    ("probe.test_fraction", "Stratified held-out test share."),
    ("probe.val_fraction", "Share of the training split used for early stopping."),
    ("paths.out_dir", "Directory for all outputs; relative paths below resolve against it."),
    ("paths.corpus_cache", "Directory caching synthesised spectrograms as SMF1 (empty = off)."),
    ("paths.checkpoint", "SLK1 checkpoint file."),
    ("paths.kmeans", "KMC1 centroid file."),
    ("paths.log", "Per-epoch loss log."),
];

/// The default configuration as TOML with a comment above every key.
pub fn reference() -> String {
    let text = RunConfig::default().to_toml();
    let mut out = String::from("# Default run configuration. Every key is optional.\n\n");
    let mut prefix = String::new();
    for line in text.lines() {
        let trimmed = line.trim();
        if let Some(name) = trimmed.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            prefix = format!("{name}.");
        } else if let Some((key, _)) = trimmed.split_once(" = ") {
            let full = format!("{prefix}{key}");
            if let Some((_, doc)) = KEY_DOCS.iter().find(|(k, _)| *k == full) {
                out.push_str(&format!("# {doc}\n"));
            }
        }
        out.push_str(line);
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let back = RunConfig::from_table(c.to_toml().parse().unwrap()).unwrap();
        assert_eq!(back, c);
        c.validate().unwrap();
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let mut t = Table::new();
        apply_override(&mut t, "epochs=3").unwrap();
        apply_override(&mut t, "loss.tau=0.5").unwrap();
        apply_override(&mut t, "loss.num_negatives=all").unwrap();
        apply_override(&mut t, "paths.out_dir=/tmp/x").unwrap();
        let c = RunConfig::from_table(t).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.loss.tau, 0.5);
        assert_eq!(c.paths.out_dir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn unknown_keys_are_named() {
        for o in ["epoch=3", "loss.temperature=1", "paths.bogus=1"] {
            let mut t = Table::new();
            apply_override(&mut t, o).unwrap();
            let err = RunConfig::from_table(t).unwrap_err().to_string();
            let key = o.split('=').next().unwrap().rsplit('.').next().unwrap();
            assert!(err.contains(key), "{err}");
        }
    }

    #[test]
    fn reference_documents_every_key() {
        let r = reference();
        let documented = r.lines().filter(|l| l.starts_with("# ")).count();
        assert_eq!(documented, KEY_DOCS.len() + 1);
        let back = RunConfig::from_table(r.parse().unwrap()).unwrap();
        assert_eq!(back, RunConfig::default());
    }
}
