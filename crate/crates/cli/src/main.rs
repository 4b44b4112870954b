//! Command-line front end: data generation, both training stages,
//! evaluation, prediction and ablation sweeps.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use emi_core::align::{pretrain_align, FrozenEncoders};
use emi_core::config::Config;
use emi_core::corpus::{
    annotate, degrade_random, read_annotations, read_features, write_annotations, write_features, CorpusConfig,
    SampleBundle,
};
use emi_core::eval::{load_checkpoint, run_ablation, save_checkpoint, AblationPlan, Checkpoint};
use emi_core::fusion::encode_corpus;
use emi_core::train::{split_holdout, train_stage2, TrainError};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "emi", version, about = "Two-stage multimodal emotional mimicry intensity estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic trimodal corpus.
    GenData(GenData),
    /// Stage I: contrastive alignment of the modality encoders.
    PretrainAlign(PretrainAlign),
    /// Stage II: train the fusion regressor on frozen encoders.
    Train(Train),
    /// Report Pearson correlations of a trained model on a corpus.
    Eval(Eval),
    /// Write per-sample predictions as JSON lines.
    Predict(Predict),
    /// Run an ablation sweep.
    Ablate(Ablate),
}

#[derive(Debug, Args)]
struct GenData {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, default_value_t = 50)]
    frames: usize,
    /// Visual, audio and text feature widths, comma separated.
    #[arg(long, default_value = "32,48,16", value_parser = parse_dims)]
    dims: (usize, usize, usize),
    /// Share of samples with one unreliable frame-level modality.
    #[arg(long, default_value_t = 0.0)]
    unreliable_fraction: f64,
    /// Share of samples given a random occlusion or frame dropout.
    #[arg(long, default_value_t = 0.0)]
    corrupt_fraction: f64,
    #[arg(long)]
    out: PathBuf,
    /// Also write synthetic annotation records (JSON lines).
    #[arg(long)]
    annotations: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PretrainAlign {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Annotation records; synthesised from the targets when omitted.
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
#[group(id = "encoder_source", required = true, multiple = false, args = ["encoders", "random_encoders"])]
struct EncoderSource {
    /// Checkpoint holding Stage-I encoders (align or fusion stage).
    #[arg(long)]
    encoders: Option<PathBuf>,
    /// Skip Stage I and use randomly initialised frozen encoders.
    #[arg(long)]
    random_encoders: bool,
}

#[derive(Debug, Args)]
struct Train {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    source: EncoderSource,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch training log (JSON lines).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Debug, Args)]
struct Predict {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct Ablate {
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    source: EncoderSource,
    /// JSON results table.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

fn parse_dims(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [v, a, t] => Ok((v, a, t)),
        _ => Err(format!("expected three comma-separated widths, got {}", parts.len())),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let numeric = e.chain().any(|c| {
        matches!(c.downcast_ref::<TrainError>(), Some(TrainError::NumericFailure { .. }))
            || matches!(
                c.downcast_ref::<emi_core::align::AlignError>(),
                Some(emi_core::align::AlignError::NumericFailure { .. })
            )
    });
    if numeric {
        EXIT_NUMERIC
    } else {
        EXIT_DATA
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::PretrainAlign(a) => pretrain(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(Config::default()),
    }
}

fn load_data(path: &Path) -> Result<Vec<SampleBundle>> {
    let data = read_features(path).with_context(|| format!("reading features {}", path.display()))?;
    if data.is_empty() {
        bail!("{} holds no samples", path.display());
    }
    Ok(data)
}

fn gen_data(a: GenData) -> Result<()> {
    let mut data = CorpusConfig::new(a.seed, a.count, a.frames, a.dims)
        .with_unreliable_fraction(a.unreliable_fraction)
        .generate()?;
    if a.corrupt_fraction > 0.0 {
        data = degrade_random(&data, a.corrupt_fraction, a.seed)?;
    }
    write_features(&a.out, &data).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(path) = &a.annotations {
        let recs: Vec<_> = data.iter().map(|s| annotate(s, a.seed)).collect();
        write_annotations(path, &recs).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("wrote {} samples to {}", data.len(), a.out.display());
    Ok(())
}

fn pretrain(a: PretrainAlign) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let data = load_data(&a.data)?;
    let annotations = match &a.annotations {
        Some(p) => read_annotations(p).with_context(|| format!("reading annotations {}", p.display()))?,
        None => data.iter().map(|s| annotate(s, cfg.seed)).collect(),
    };
    let out = pretrain_align(&data, &annotations, &cfg)?;
    save_checkpoint(&a.out, &Checkpoint::align(&cfg, &out.encoders))?;
    println!(
        "final loss visual {:.4} audio {:.4}; retrieval visual {:.3} audio {:.3}",
        out.final_loss_visual, out.final_loss_audio, out.retrieval_visual, out.retrieval_audio
    );
    Ok(())
}

fn encoders_for(source: &EncoderSource, cfg: &Config) -> Result<FrozenEncoders> {
    let enc = match &source.encoders {
        Some(path) => load_checkpoint(path)
            .and_then(|c| c.frozen_encoders())
            .with_context(|| format!("loading encoders from {}", path.display()))?,
        None => {
            log::warn!("Stage I bypassed: using random frozen encoders");
            FrozenEncoders::random(cfg, cfg.seed)
        }
    };
    if enc.embed_dim() != cfg.embed_dim {
        bail!(
            "encoders produce {}-wide embeddings but the config expects embed_dim = {}",
            enc.embed_dim(),
            cfg.embed_dim
        );
    }
    Ok(enc)
}

fn train(a: Train) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let data = load_data(&a.data)?;
    let encoders = encoders_for(&a.source, &cfg)?;
    let (train_set, val_set) = split_holdout(&data, cfg.val_fraction, cfg.seed);
    let train_enc = encode_corpus(&encoders, &train_set)?;
    let val_enc = encode_corpus(&encoders, &val_set)?;
    let mut log_file = match &a.log {
        Some(p) => Some(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => None,
    };
    let outcome = train_stage2(&train_enc, &val_enc, &cfg, log_file.as_mut().map(|w| w as &mut dyn Write))?;
    if let Some(mut w) = log_file {
        w.flush()?;
    }
    save_checkpoint(&a.out, &Checkpoint::fusion(&cfg, outcome.params, outcome.best, &encoders))?;
    let last = outcome.log.last().expect("at least one epoch");
    println!(
        "trained {} epochs on {} samples; best epoch {}; final train loss {:.5}; val ρ {}",
        outcome.log.len(),
        train_set.len(),
        outcome.best_epoch,
        last.train_loss,
        outcome.log[outcome.best_epoch]
            .val_rho_mean
            .map_or("n/a".into(), |r| format!("{r:.4}"))
    );
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let predictor = load_checkpoint(&a.checkpoint)
        .and_then(|c| c.predictor())
        .with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let report = predictor.evaluate(&load_data(&a.data)?)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn predict(a: Predict) -> Result<()> {
    let predictor = load_checkpoint(&a.checkpoint)
        .and_then(|c| c.predictor())
        .with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let data = load_data(&a.data)?;
    let preds = predictor.predict(&data)?;
    let mut w = BufWriter::new(File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    for (s, p) in data.iter().zip(&preds) {
        writeln!(w, "{}", serde_json::json!({ "id": s.id, "yhat": p }))?;
    }
    w.flush()?;
    println!("wrote {} predictions to {}", preds.len(), a.out.display());
    Ok(())
}

fn ablate(a: Ablate) -> Result<()> {
    let plan = AblationPlan::load(&a.plan).with_context(|| format!("loading plan {}", a.plan.display()))?;
    let cfg = load_config(a.config.as_deref())?;
    let data = load_data(&a.data)?;
    let encoders = encoders_for(&a.source, &cfg)?;
    let (train_set, val_set) = split_holdout(&data, cfg.val_fraction, cfg.seed);
    if val_set.len() < 2 {
        bail!("ablation needs at least two validation samples; raise val_fraction or add data");
    }
    let table = run_ablation(&plan, &train_set, &val_set, &cfg, &encoders, a.threads)?;
    std::fs::write(&a.out, table.to_json()).with_context(|| format!("writing {}", a.out.display()))?;
    print!("{}", table.to_text());
    Ok(())
}
