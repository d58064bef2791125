//! Subcommand bodies.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use slicer_core::augment::{make_views, KMixIndex, MixQueue, ViewTrace};
use slicer_core::checkpoint::Checkpoint;
use slicer_core::diagnostics::run_suite;
use slicer_core::eval::{
    ablation_ladder, ablation_report, config_hash, embed_dataset, format_table, linear_probe,
};
use slicer_core::formats::{read_kmc1, read_smf1, write_kmc1, write_smf1};
use slicer_core::seed;
use slicer_core::train::{log_line, prepare, Trainer};

use crate::config::{reference as reference_text, RunConfig};
use crate::data::synth_set;
use crate::{CliError, ConfigArgs};

/// Gradient checks fail above this relative error.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn load(args: &ConfigArgs) -> Result<RunConfig, CliError> {
    RunConfig::load(args.config.as_deref(), &args.overrides)
}

/// Creates `dir` and records the fully resolved configuration in it.
fn write_resolved(dir: &Path, cfg: &RunConfig, name: &str) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), cfg.to_toml())?;
    Ok(())
}

fn corpus(cfg: &RunConfig) -> Result<slicer_core::audio::LabeledSet, CliError> {
    synth_set(
        "corpus",
        cfg.data.corpus_per_class,
        cfg.data.corpus_seed,
        &cfg.audio,
        cfg.paths.cache_dir().as_deref(),
    )
}

fn probe_set(cfg: &RunConfig) -> Result<slicer_core::audio::LabeledSet, CliError> {
    synth_set(
        "probe",
        cfg.data.probe_per_class,
        cfg.data.probe_seed,
        &cfg.audio,
        cfg.paths.cache_dir().as_deref(),
    )
}

pub fn pretrain(args: &ConfigArgs, resume: bool) -> Result<(), CliError> {
    let cfg = load(args)?;
    write_resolved(&cfg.paths.out_dir, &cfg, "config.toml")?;
    let raw = corpus(&cfg)?;
    let ckpt_path = cfg.paths.checkpoint_path();
    let log_path = cfg.paths.log_path();

    let (mut trainer, normalized, mut log) = if resume && ckpt_path.is_file() {
        let ckpt = Checkpoint::load(&ckpt_path)?;
        let mut saved = ckpt.config.clone();
        saved.epochs = cfg.train.epochs;
        if saved != cfg.train {
            return Err(CliError::Usage(format!(
                "checkpoint {} was trained with a different configuration (only `epochs` may change on resume)",
                ckpt_path.display()
            )));
        }
        let (mut t, normalized) = Trainer::from_checkpoint(ckpt, &raw.spectrograms)?;
        t.config.epochs = cfg.train.epochs;
        eprintln!("resuming from epoch {}", t.epoch);
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)?;
        (t, normalized, log)
    } else {
        let p = prepare(&raw.spectrograms, &cfg.train)?;
        if let Some(fit) = &p.kmeans {
            write_kmc1(&cfg.paths.kmeans_path(), &fit.model)?;
            eprintln!(
                "k-means: k={} iterations={} converged={}",
                fit.model.k(),
                fit.iterations,
                fit.converged
            );
        }
        (p.trainer, p.corpus, File::create(&log_path)?)
    };

    while trainer.epoch < trainer.config.epochs {
        let loss = trainer.run_epoch(&normalized)?;
        let line = log_line(trainer.epoch, loss, trainer.config.lr);
        writeln!(log, "{line}")?;
        log.flush()?;
        eprintln!("{line}");
        trainer.checkpoint()?.save(&ckpt_path)?;
    }
    trainer.checkpoint()?.save(&ckpt_path)?;
    println!("checkpoint {}", ckpt_path.display());
    Ok(())
}

pub fn eval(checkpoint: &Path, args: &ConfigArgs) -> Result<(), CliError> {
    let cfg = load(args)?;
    let ckpt = Checkpoint::load(checkpoint).map_err(|e| {
        CliError::Runtime(format!(
            "cannot load checkpoint {}: {e}",
            checkpoint.display()
        ))
    })?;
    let set = probe_set(&cfg)?;
    let emb = embed_dataset(&ckpt.student, &set.spectrograms)?;
    let result = linear_probe(&emb, &set.labels, cfg.train.seed, &cfg.probe)?;
    let report = format!(
        "checkpoint {} (epoch {})\n{}config={} acc={} n_test={}\n",
        checkpoint.display(),
        ckpt.epoch,
        result.table(),
        config_hash(&ckpt.config),
        result.accuracy,
        result.n_test()
    );
    print!("{report}");
    write_resolved(&cfg.paths.out_dir, &cfg, "eval-config.toml")?;
    fs::write(cfg.paths.out_dir.join("eval.txt"), report)?;
    Ok(())
}

pub struct AugmentArgs {
    pub input: PathBuf,
    pub out_dir: PathBuf,
    pub seed: Option<u64>,
    pub kmeans: Option<PathBuf>,
    pub queue: usize,
    pub repeat: usize,
    pub cfg: ConfigArgs,
}

fn trace_line(rep: usize, view: &str, x_centroid: Option<usize>, t: &ViewTrace) -> String {
    let opt = |v: Option<String>| v.unwrap_or_else(|| "-".into());
    format!(
        "rep={rep} view={view} x_centroid={} counterpart={} centroid={} lambda={} crop={},{},{},{}",
        opt(x_centroid.map(|c| c.to_string())),
        opt(t.counterpart.map(|c| c.to_string())),
        opt(t.counterpart_centroid.map(|c| c.to_string())),
        t.lambda,
        t.crop.top,
        t.crop.left,
        t.crop.height,
        t.crop.width
    )
}

/// Views are drawn on raw (unstandardised) log-mel values.
pub fn augment(a: &AugmentArgs) -> Result<(), CliError> {
    let mut overrides = a.cfg.overrides.clone();
    if let Some(s) = a.seed {
        overrides.push(format!("seed={s}"));
    }
    let cfg = RunConfig::load(a.cfg.config.as_deref(), &overrides)?;
    if a.repeat == 0 {
        return Err(CliError::Usage("--repeat must be at least 1".into()));
    }
    if a.queue > cfg.train.queue_capacity {
        return Err(CliError::Usage(format!(
            "--queue {} exceeds queue_capacity {}",
            a.queue, cfg.train.queue_capacity
        )));
    }
    let aug = &cfg.train.augment;
    let index = if aug.kmix_enabled {
        let path = a.kmeans.clone().unwrap_or_else(|| cfg.paths.kmeans_path());
        if !path.is_file() {
            return Err(CliError::Usage(format!(
                "k-mix is enabled but the k-means file {} does not exist (run pretrain or set augment.kmix_enabled=false)",
                path.display()
            )));
        }
        let model = read_kmc1(&path)?;
        if model.dim() != cfg.audio.n_mels {
            return Err(CliError::Usage(format!(
                "k-means file {} has {}-d centroids, spectrograms have {} mel bins",
                path.display(),
                model.dim(),
                cfg.audio.n_mels
            )));
        }
        Some(KMixIndex::new(model))
    } else {
        None
    };

    let x = Arc::new(read_smf1(&a.input)?);
    let mut q = MixQueue::new(cfg.train.queue_capacity)?;
    if a.queue > 0 {
        let per_class = a.queue.div_ceil(slicer_core::audio::SynthClass::ALL.len());
        let fill = synth_set("corpus", per_class, cfg.data.corpus_seed, &cfg.audio, None)?;
        for s in fill.spectrograms.into_iter().take(a.queue) {
            if s.shape() != x.shape() {
                return Err(CliError::Usage(format!(
                    "input is {:?} but the configured audio gives {:?}; use --queue 0 to preview without mixing",
                    x.shape(),
                    s.shape()
                )));
            }
            let c = index.as_ref().map(|i| i.centroid_of(&s)).transpose()?;
            q.push(s, c);
        }
    }

    write_resolved(&a.out_dir, &cfg, "config.toml")?;
    let mut rng = seed::subsystem_rng(cfg.train.seed, seed::AUGMENT);
    let mut trace = String::new();
    for rep in 0..a.repeat {
        let v = make_views(&x, &mut q, index.as_ref(), aug, &mut rng)?;
        trace.push_str(&trace_line(rep, "a", v.x_centroid, &v.trace[0]));
        trace.push('\n');
        trace.push_str(&trace_line(rep, "b", v.x_centroid, &v.trace[1]));
        trace.push('\n');
        if rep == 0 {
            write_smf1(&a.out_dir.join("view_a.smf"), &v.a)?;
            write_smf1(&a.out_dir.join("view_b.smf"), &v.b)?;
        }
    }
    fs::write(a.out_dir.join("trace.txt"), &trace)?;
    if a.repeat == 1 {
        print!("{trace}");
    }
    Ok(())
}

pub fn ablation(args: &ConfigArgs) -> Result<(), CliError> {
    let cfg = load(args)?;
    let out = &cfg.paths.out_dir;
    write_resolved(out, &cfg, "config.toml")?;
    let raw = corpus(&cfg)?;
    let probe = probe_set(&cfg)?;
    let ladder = ablation_ladder(&cfg.train);
    for rung in &ladder {
        rung.config.validate()?;
    }
    let lines_path = out.join("ablation.lines");
    let mut lines = File::create(&lines_path)?;
    let rows = ablation_report(
        &raw.spectrograms,
        &probe,
        &ladder,
        &cfg.probe,
        cfg.train.seed,
        &mut |row| {
            writeln!(lines, "{}", row.machine_line())?;
            lines.flush()?;
            eprintln!("{:<12} {}", row.label, row.machine_line());
            Ok(())
        },
    )?;
    let table = format_table(&rows);
    fs::write(out.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn gradcheck(seed: u64, points: usize) -> Result<(), CliError> {
    if points == 0 {
        return Err(CliError::Usage("--points must be at least 1".into()));
    }
    let rows = run_suite(seed, points)?;
    let mut worst: f64 = 0.0;
    for r in &rows {
        println!("{:<32} {:.3e}", r.name, r.max_rel_error);
        worst = worst.max(r.max_rel_error);
    }
    println!("max relative error {worst:.3e} over {} checks", rows.len());
    if worst < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradient check failed: {worst:.3e} >= {GRADCHECK_TOLERANCE:e}"
        )))
    }
}

pub fn reference(out: Option<&Path>) -> Result<(), CliError> {
    let text = reference_text();
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}
