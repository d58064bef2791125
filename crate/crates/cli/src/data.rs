//! Synthetic corpora, optionally cached on disk as SMF1 files.

use std::path::Path;
use std::sync::Arc;

use sha2::{Digest, Sha256};
use slicer_core::audio::{synth_logmel_set, AudioConfig, LabeledSet, SynthClass};
use slicer_core::formats::{read_smf1, write_smf1};

use crate::CliError;

/// Cache directory name for one corpus; changes with any audio setting.
fn cache_key(kind: &str, per_class: usize, seed: u64, audio: &AudioConfig) -> String {
    let text = toml::to_string(audio).expect("audio config serialises");
    let digest = Sha256::digest(text.as_bytes());
    let tag: String = digest.iter().take(4).map(|b| format!("{b:02x}")).collect();
    format!("{kind}-s{seed}-n{per_class}-{tag}")
}

fn labels(n: usize) -> Vec<usize> {
    (0..n)
        .map(|i| SynthClass::ALL[i % SynthClass::ALL.len()].label())
        .collect()
}

/// `per_class` clips of each class from `seed`, read from or written to
/// `cache` when given.
pub fn synth_set(
    kind: &str,
    per_class: usize,
    seed: u64,
    audio: &AudioConfig,
    cache: Option<&Path>,
) -> Result<LabeledSet, CliError> {
    let n = per_class * SynthClass::ALL.len();
    let Some(root) = cache else {
        return Ok(synth_logmel_set(per_class, seed, audio)?);
    };
    let dir = root.join(cache_key(kind, per_class, seed, audio));
    let file = |i: usize| dir.join(format!("{i:06}.smf"));
    if (0..n).all(|i| file(i).is_file()) {
        let spectrograms = (0..n)
            .map(|i| read_smf1(&file(i)).map(Arc::new))
            .collect::<Result<Vec<_>, _>>()?;
        return Ok(LabeledSet {
            spectrograms,
            labels: labels(n),
        });
    }
    let set = synth_logmel_set(per_class, seed, audio)?;
    std::fs::create_dir_all(&dir)?;
    for (i, s) in set.spectrograms.iter().enumerate() {
        write_smf1(&file(i), s)?;
    }
    Ok(set)
}
