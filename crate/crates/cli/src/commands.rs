use std::io::{BufRead, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use seqchat_core::decode::{compare, evaluate, Evaluation, ReportRow, ReportTable};
use seqchat_core::model::{preset, preset_names, DataDims, Model, ModelConfig, COMPARISON_PRESETS};
use seqchat_core::tensor::{DType, Scalar};
use seqchat_core::text::{build_vocab, detokenize, load_dataset, split, DatasetFormat, QADataset, Vocabulary};
use seqchat_core::train::{peek_dtype, Checkpoint, Schedule, StepRecord, TrainConfig, Trainer};

use crate::engine::{ChatRequest, Engine};
use crate::server::{self, AppState};

#[derive(Debug, Parser)]
#[command(name = "seqchat", version, about = "Train, evaluate and serve a question-answering chatbot")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a preset on a TSV question/answer corpus and write a checkpoint.
    Train(TrainArgs),
    /// Greedy-decode a dataset with a checkpoint and report corpus BLEU.
    Evaluate(EvaluateArgs),
    /// Train and evaluate several presets under one training configuration.
    Compare(CompareArgs),
    /// Print dataset statistics.
    Stats(DataArgs),
    /// Interactive question/answer loop on the terminal.
    Chat(ChatArgs),
    /// Serve the HTTP JSON API and the web UI.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScheduleArg {
    Constant,
    Warmup,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Tab-separated `question<TAB>answer` file.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainingArgs {
    #[arg(long, default_value_t = 28)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 120)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.0014)]
    pub lr: f64,
    #[arg(long, value_enum, default_value_t = ScheduleArg::Warmup)]
    pub schedule: ScheduleArg,
    #[arg(long, default_value_t = 4000)]
    pub warmup_steps: usize,
    /// Global gradient-norm bound; 0 disables clipping.
    #[arg(long, default_value_t = 1.0)]
    pub clip_norm: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Hard cap on total optimisation steps.
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Fraction of pairs used for training; the rest is held out.
    #[arg(long, default_value_t = 1.0)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 1)]
    pub min_count: usize,
    #[arg(long, default_value_t = 15)]
    pub max_input_len: usize,
    #[arg(long, default_value_t = 10)]
    pub max_output_len: usize,
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    pub dtype: Precision,
}

impl TrainingArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            base_lr: self.lr,
            schedule: match self.schedule {
                ScheduleArg::Constant => Schedule::Constant,
                ScheduleArg::Warmup => Schedule::Warmup,
            },
            warmup_steps: self.warmup_steps,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            seed: self.seed,
            max_steps: self.max_steps,
            ..TrainConfig::default()
        }
    }

    fn dims(&self, vocab: &Vocabulary) -> DataDims {
        DataDims {
            vocab_size: vocab.len(),
            max_input_len: self.max_input_len,
            max_output_len: self.max_output_len,
        }
    }

    /// Train and held-out sets; the held-out set is empty at fraction 1.
    fn partition(&self, data: &QADataset) -> Result<(QADataset, Option<QADataset>)> {
        if !(0.0..=1.0).contains(&self.train_fraction) || self.train_fraction == 0.0 {
            bail!("--train-fraction must lie in (0, 1]");
        }
        if self.train_fraction == 1.0 {
            return Ok((data.clone(), None));
        }
        let (train, test) = split(data, self.train_fraction, self.seed)?;
        Ok((train, Some(test)))
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "transformer", value_parser = clap::builder::PossibleValuesParser::new(preset_names()))]
    pub preset: String,
    /// Output checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue the run stored in this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Steps between intermediate checkpoint writes.
    #[arg(long, default_value_t = 0)]
    pub checkpoint_interval: usize,
    /// Tab-separated metrics log (step, lr, loss).
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Where to write held-out pairs when --train-fraction < 1.
    #[arg(long)]
    pub test_out: Option<PathBuf>,
    #[command(flatten)]
    pub training: TrainingArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// JSON report path; defaults to `<checkpoint>.eval.json`, which `serve` reads.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Also print every question, reference and hypothesis.
    #[arg(long)]
    pub transcript: bool,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated preset names; defaults to the six comparison rows.
    #[arg(long, value_delimiter = ',')]
    pub presets: Vec<String>,
    #[arg(long, default_value = "compare.json")]
    pub report: PathBuf,
    #[command(flatten)]
    pub training: TrainingArgs,
}

#[derive(Debug, Args)]
pub struct ChatArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, env = "SEQCHAT_BIND", default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    /// Directory holding the built web UI.
    #[arg(long)]
    pub ui_dir: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => match a.training.dtype {
            Precision::F32 => train::<f32>(&a),
            Precision::F64 => train::<f64>(&a),
        },
        Command::Evaluate(a) => match peek_dtype(&a.checkpoint).with_context(|| a.checkpoint.display().to_string())? {
            DType::F32 => evaluate_cmd::<f32>(&a),
            DType::F64 => evaluate_cmd::<f64>(&a),
        },
        Command::Compare(a) => match a.training.dtype {
            Precision::F32 => compare_cmd::<f32>(&a),
            Precision::F64 => compare_cmd::<f64>(&a),
        },
        Command::Stats(a) => {
            let ds = load(&a.data)?;
            println!("{}", ds.stats());
            if ds.rejected() > 0 {
                println!("({} pairs rejected: empty question or answer)", ds.rejected());
            }
            Ok(())
        }
        Command::Chat(a) => chat(&a),
        Command::Serve(a) => serve(a),
    }
}

fn load(path: &Path) -> Result<QADataset> {
    let ds = load_dataset(path, DatasetFormat::Tsv)?;
    if ds.is_empty() {
        bail!("{}: no usable question/answer pairs", path.display());
    }
    Ok(ds)
}

fn progress(name: &str) -> impl FnMut(&StepRecord) + '_ {
    move |r: &StepRecord| {
        if r.step % 50 == 0 || r.step == 1 {
            tracing::info!(
                model = name,
                step = r.step,
                lr = format_args!("{:.3e}", r.lr),
                loss = format_args!("{:.5}", r.loss),
                grad_norm = format_args!("{:.3}", r.grad_norm),
                "train"
            );
        }
    }
}

fn write_tsv(path: &Path, ds: &QADataset) -> Result<()> {
    let mut out = String::new();
    for p in ds.pairs() {
        out.push_str(&format!("{}\t{}\n", detokenize(&p.question), detokenize(&p.answer)));
    }
    std::fs::write(path, out).with_context(|| path.display().to_string())
}

fn train<T: Scalar>(a: &TrainArgs) -> Result<()> {
    let data = load(&a.data.data)?;
    let (train_set, held_out) = a.training.partition(&data)?;
    if let (Some(test), Some(path)) = (&held_out, &a.test_out) {
        write_tsv(path, test)?;
    }
    let config = TrainConfig {
        checkpoint_path: Some(a.out.clone()),
        checkpoint_interval: a.checkpoint_interval,
        ..a.training.config()
    };
    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::<T>::load(path).with_context(|| format!("resuming from {}", path.display()))?;
            Trainer::resume(ckpt, &train_set, config)?
        }
        None => {
            let vocab = build_vocab(&train_set, a.training.min_count)?;
            let model_config = preset(&a.preset, a.training.dims(&vocab)).expect("preset names are validated by clap");
            println!("{}", model_config.summary());
            Trainer::new(Model::<T>::new(&model_config, a.training.seed)?, vocab, &train_set, config)?
        }
    };
    if let Some(m) = &a.metrics {
        trainer.log_metrics_to(m)?;
    }
    println!(
        "training on {} pairs: {} steps ({} per epoch), {} parameters",
        train_set.len(),
        trainer.total_steps(),
        trainer.steps_per_epoch(),
        trainer.model().params().count()
    );
    trainer.run(progress(&a.preset))?;
    let last = trainer.history().last().copied().unwrap_or(f64::NAN);
    println!("final loss {last:.5} after {} steps; checkpoint {}", trainer.step_count(), a.out.display());
    Ok(())
}

fn default_report(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".eval.json");
    PathBuf::from(name)
}

fn evaluate_cmd<T: Scalar>(a: &EvaluateArgs) -> Result<()> {
    let ckpt = Checkpoint::<T>::load(&a.checkpoint).with_context(|| a.checkpoint.display().to_string())?;
    let data = load(&a.data.data)?;
    let eval: Evaluation = evaluate(&ckpt.model, &ckpt.vocab, &data)?;
    if a.transcript {
        for t in &eval.transcripts {
            println!("{}\t{}\t{}", t.question, t.reference, t.hypothesis);
        }
    }
    let row = ReportRow::new(ckpt.model_tag(), &eval);
    print!("{}", ReportTable(std::slice::from_ref(&row)));
    let path = a.report.clone().unwrap_or_else(|| default_report(&a.checkpoint));
    let json = serde_json::to_string_pretty(&serde_json::json!({ "rows": [row], "evaluation": eval }))?;
    std::fs::write(&path, json).with_context(|| path.display().to_string())?;
    println!("report {}", path.display());
    Ok(())
}

fn compare_cmd<T: Scalar>(a: &CompareArgs) -> Result<()> {
    let data = load(&a.data.data)?;
    let (train_set, held_out) = a.training.partition(&data)?;
    let test_set = held_out.unwrap_or_else(|| train_set.clone());
    let vocab = build_vocab(&train_set, a.training.min_count)?;
    let dims = a.training.dims(&vocab);
    let names: Vec<String> = if a.presets.is_empty() {
        COMPARISON_PRESETS.iter().map(|s| s.to_string()).collect()
    } else {
        a.presets.clone()
    };
    let presets = names
        .iter()
        .map(|n| preset(n, dims).map(|c| (n.clone(), c)).with_context(|| format!("unknown preset {n:?}")))
        .collect::<Result<Vec<(String, ModelConfig)>>>()?;
    let rows = compare::<T>(&presets, &vocab, &train_set, &test_set, &a.training.config(), |name, r| {
        progress(name)(r)
    })?;
    print!("{}", ReportTable(&rows));
    std::fs::write(&a.report, serde_json::to_string_pretty(&rows)?).with_context(|| a.report.display().to_string())?;
    println!("report {}", a.report.display());
    Ok(())
}

fn chat(a: &ChatArgs) -> Result<()> {
    let engine = Engine::load(&a.checkpoint)?;
    eprintln!("model {} ready; empty line or ctrl-d quits", engine.tag());
    let stdin = std::io::stdin();
    let mut out = std::io::stdout();
    for line in stdin.lock().lines() {
        let question = line?;
        if question.trim().is_empty() {
            break;
        }
        let reply = engine.answer(&ChatRequest {
            question,
            max_steps: a.max_steps,
        })?;
        writeln!(out, "{}", reply.answer)?;
        out.flush()?;
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    if !a.checkpoint.exists() {
        bail!("checkpoint not found: {}", a.checkpoint.display());
    }
    let engine = Engine::load(&a.checkpoint)?;
    let bleu = std::fs::read(default_report(&a.checkpoint))
        .ok()
        .and_then(|b| serde_json::from_slice::<serde_json::Value>(&b).ok())
        .and_then(|v| v["rows"][0]["bleu"].as_f64());
    let state = Arc::new(AppState::new(engine, bleu));
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(server::serve(state, a.bind, a.ui_dir))
}
