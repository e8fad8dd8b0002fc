//! `fewshot`: dataset synthesis, stage-one training, episodic evaluation and
//! artifact inspection.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 divergence.

mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use fewshot::checkpoint::{self, TrainSummary};
use fewshot::data::{
    load_dataset, make_synthetic, save_dataset, DatasetContainer, Split, SynthSpec,
};
use fewshot::evaluation::{eval_protocol, EvalProtocol};
use fewshot::models::Model;
use fewshot::tensor::Similarity;
use fewshot::training::{self, EpochLog, Method, TrainData, TrainObserver};
use fewshot::{Error, Result};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "fewshot",
    version,
    about = "Few-shot classification with self-supervised auxiliary losses"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic glyph dataset.
    MakeSynth(MakeSynthArgs),
    /// Run first-stage training.
    Train(TrainArgs),
    /// Evaluate a checkpoint on few-shot episodes.
    Eval(EvalArgs),
    /// Summarize a checkpoint or a dataset.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct MakeSynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 24)]
    base: usize,
    #[arg(long, default_value_t = 8)]
    val: usize,
    #[arg(long, default_value_t = 8)]
    novel: usize,
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (JSON). Omitted sections take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `dataset.path`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Overrides `dataset.unlabeled`.
    #[arg(long)]
    unlabeled: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 5)]
    n_way: usize,
    #[arg(long, default_value_t = 1)]
    k_shot: usize,
    #[arg(long, default_value_t = 15)]
    m_query: usize,
    #[arg(long, default_value_t = 2000)]
    episodes: usize,
    /// Episode i uses seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "novel")]
    split: Split,
    /// cc or pn; defaults to the method the checkpoint was trained with.
    #[arg(long)]
    method: Option<String>,
    /// neg_sq_euclidean or cosine (PN only).
    #[arg(long, default_value = "neg_sq_euclidean")]
    similarity: String,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Report path; defaults to eval_<split>_<n>way_<k>shot.json in the checkpoint directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Capacity(_) => 2,
        Error::Divergence { .. } => 4,
        Error::Shape { .. } | Error::Contract(_) | Error::DegenerateBatch { .. } => 1,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::MakeSynth(a) => make_synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn split_summary(ds: &DatasetContainer) -> String {
    Split::ALL
        .iter()
        .map(|&s| {
            format!(
                "{}: {} classes, {} images",
                s.name(),
                ds.classes(s).len(),
                ds.split_images(s).len()
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn make_synth(a: MakeSynthArgs) -> Result<()> {
    let spec = SynthSpec {
        base: a.base,
        validation: a.val,
        novel: a.novel,
        per_class: a.per_class,
        size: a.size,
        seed: a.seed,
    };
    let ds = make_synthetic(&spec)?;
    save_dataset(&ds, &a.out)?;
    println!(
        "wrote {} ({} images of {}x{}x{})",
        a.out.display(),
        ds.len(),
        3,
        a.size,
        a.size
    );
    println!("{}", split_summary(&ds));
    Ok(())
}

fn parse_enum<T: serde::de::DeserializeOwned>(what: &str, s: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| Error::Config(format!("unknown {what} {s:?}")))
}

/// Appends one JSON line per epoch and saves a snapshot on divergence.
struct RunLog {
    out: PathBuf,
    log: BufWriter<File>,
    method: Method,
    digest: String,
    start: Instant,
}

impl TrainObserver for RunLog {
    fn epoch_end(&mut self, log: &EpochLog) -> Result<()> {
        serde_json::to_writer(&mut self.log, log)?;
        self.log.write_all(b"\n")?;
        self.log.flush()?;
        let val = log
            .val_acc
            .map(|v| format!(", val acc {:.2}%", 100.0 * v))
            .unwrap_or_default();
        eprintln!(
            "# [{:.0}s] epoch {} lr {} loss {:.4}{val}",
            self.start.elapsed().as_secs_f64(),
            log.epoch,
            log.lr,
            log.loss
        );
        Ok(())
    }

    fn diverged(&mut self, model: &Model<f32>, error: &Error) -> Result<()> {
        let epoch = match error {
            Error::Divergence { epoch, .. } => *epoch,
            _ => 0,
        };
        let dir = self.out.join("divergence");
        let summary = TrainSummary {
            method: self.method,
            train_config_sha256: self.digest.clone(),
            epoch,
            early_stopped: false,
            best_val_acc: None,
            val_history: Vec::new(),
            gamma_weight_decay: false,
        };
        checkpoint::save(&dir, model, summary)?;
        eprintln!("diagnostic snapshot written to {}", dir.display());
        Ok(())
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = a.dataset {
        cfg.dataset.path = Some(d);
    }
    if let Some(u) = a.unlabeled {
        cfg.dataset.unlabeled = Some(u);
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.train.validate()?;
    if cfg.dataset.unlabeled.is_some() && !cfg.train.semi_supervised {
        return Err(Error::Config(
            "an unlabeled dataset needs train.semi_supervised = true".into(),
        ));
    }
    let path =
        cfg.dataset.path.clone().ok_or_else(|| {
            Error::Config("no dataset: pass --dataset or set dataset.path".into())
        })?;
    let ds = load_dataset(&path)?;
    let unlabeled = cfg
        .dataset
        .unlabeled
        .as_ref()
        .map(load_dataset)
        .transpose()?;

    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("effective_config.json"), cfg.to_json())?;
    let mut log = RunLog {
        out: a.out.clone(),
        log: BufWriter::new(File::create(a.out.join("train_log.jsonl"))?),
        method: cfg.train.method,
        digest: checkpoint::config_digest(&cfg.train),
        start: Instant::now(),
    };
    let data = TrainData {
        dataset: &ds,
        unlabeled: unlabeled.as_ref(),
    };
    let outcome = training::train(&cfg.train, &cfg.model, data, cfg.seed, &mut log)?;
    let sha = checkpoint::save(&a.out, &outcome.model, outcome.summary.clone())?;
    println!(
        "checkpoint {} ({} parameters, epoch {}{})",
        a.out.display(),
        outcome.model.arch().num_parameters(),
        outcome.epoch,
        outcome
            .best_val_acc
            .map(|v| format!(", best validation accuracy {:.2}%", 100.0 * v))
            .unwrap_or_default()
    );
    if let Some(acc) = outcome.history.last().and_then(|l| l.train_acc) {
        println!("final-epoch train accuracy {:.2}%", 100.0 * acc);
    }
    println!("sha256 {sha}");
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let similarity: Similarity = parse_enum("similarity", &a.similarity)?;
    let method = a
        .method
        .as_deref()
        .map(|m| parse_enum::<Method>("method", m))
        .transpose()?;
    let ck = checkpoint::load(&a.checkpoint)?;
    let ds = load_dataset(&a.dataset)?;
    let protocol = EvalProtocol {
        n_way: a.n_way,
        k_shot: a.k_shot,
        m_query: a.m_query,
        episodes: a.episodes,
        base_seed: a.seed,
        method: method.unwrap_or(ck.manifest.train.method),
        similarity,
        split: a.split,
    };
    let start = Instant::now();
    let report = eval_protocol(&ck.model, &ds, &protocol, &ck.sha256, a.workers)?;
    eprintln!(
        "# evaluated {} episodes in {:.1}s",
        a.episodes,
        start.elapsed().as_secs_f64()
    );
    let json = serde_json::to_string_pretty(&report)? + "\n";
    let out = a.out.unwrap_or_else(|| {
        a.checkpoint.join(format!(
            "eval_{}_{}way_{}shot.json",
            a.split.name(),
            a.n_way,
            a.k_shot
        ))
    });
    fs::write(&out, &json)?;
    let flag = if report.ci95_defined {
        ""
    } else {
        " (interval undefined for one episode)"
    };
    println!(
        "{:.2}% ± {:.2}%{flag}  [{}-way {}-shot, {} episodes, {} split]",
        100.0 * report.mean,
        100.0 * report.ci95,
        a.n_way,
        a.k_shot,
        a.episodes,
        a.split.name()
    );
    print!("{json}");
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    if let Some(dir) = a.checkpoint {
        inspect_checkpoint(&dir)
    } else if let Some(path) = a.dataset {
        let ds = load_dataset(&path)?;
        let (c, h, w) = ds.image_shape();
        println!("dataset {}", path.display());
        println!(
            "{} images of {c}x{h}x{w}, {} classes",
            ds.len(),
            ds.num_classes()
        );
        println!("{}", split_summary(&ds));
        Ok(())
    } else {
        unreachable!("clap requires one of --checkpoint or --dataset")
    }
}

fn inspect_checkpoint(dir: &Path) -> Result<()> {
    let ck = checkpoint::load(dir)?;
    let m = &ck.manifest;
    let a = &m.architecture;
    println!("checkpoint {}", dir.display());
    println!(
        "extractor widths {:?}, input {}x{}x{}, feature dim {}",
        a.widths,
        a.in_channels,
        a.image_size,
        a.image_size,
        a.feature_dim()
    );
    let heads = [
        a.classifier_classes
            .map(|k| format!("cosine classifier ({k} classes)")),
        a.rotation_head.map(|w| format!("rotation head {w:?}")),
        a.location_hidden
            .map(|h| format!("location head (hidden {h})")),
        a.patch_aux_classes
            .map(|k| format!("patch classifier ({k} classes)")),
    ];
    let heads: Vec<String> = heads.into_iter().flatten().collect();
    println!(
        "heads: {}",
        if heads.is_empty() {
            "none".into()
        } else {
            heads.join(", ")
        }
    );
    println!(
        "parameters {} (layout predicts {}), {} tensors, {} payload bytes",
        m.num_parameters(),
        a.num_parameters(),
        m.tensors.len(),
        m.payload_bytes
    );
    let val = m
        .train
        .best_val_acc
        .map(|v| format!(", best validation accuracy {:.2}%", 100.0 * v))
        .unwrap_or_default();
    println!(
        "method {}, epoch {}{}{val}",
        serde_json::to_value(m.train.method)?
            .as_str()
            .unwrap_or("?"),
        m.train.epoch,
        if m.train.early_stopped {
            " (early stopped)"
        } else {
            ""
        }
    );
    println!("sha256 {}", ck.sha256);
    Ok(())
}
