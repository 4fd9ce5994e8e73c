//! Teacher-forced training for both model families: batching, the learning
//! rate schedule, Adam with global-norm clipping, metrics and checkpoints.

mod checkpoint;
mod optim;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Model, ModelError, SeqBatch, Session};
use crate::tensor::{Scalar, Tensor, TensorError};
use crate::text::{encode_counted, EncodeStats, QADataset, Vocabulary, PAD};

pub use checkpoint::{peek_dtype, Checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{adam_step, clip_global_norm, AdamConfig, AdamState};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Contract(String),
    #[error("non-finite gradient in parameter {param}")]
    NonFiniteGradient { param: String },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    /// Linear rise to `base_lr` at `warmup_steps`, then `1/√step` decay.
    Warmup,
}

impl std::str::FromStr for Schedule {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "warmup" => Ok(Schedule::Warmup),
            other => Err(TrainError::Config(format!("unknown schedule {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub schedule: Schedule,
    pub warmup_steps: usize,
    pub adam: AdamConfig,
    /// Global gradient norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub checkpoint_path: Option<PathBuf>,
    /// Steps between checkpoint writes; 0 writes only at the end of a run.
    pub checkpoint_interval: usize,
    /// Hard cap on the total step count, below `epochs × steps per epoch`.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 28,
            epochs: 120,
            base_lr: 0.0014,
            schedule: Schedule::Warmup,
            warmup_steps: 4000,
            adam: AdamConfig::default(),
            clip_norm: Some(1.0),
            seed: 0,
            checkpoint_path: None,
            checkpoint_interval: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 || self.epochs == 0 {
            return fail("batch_size and epochs must be at least 1");
        }
        let beta = 0.0..1.0;
        if !beta.contains(&self.adam.beta1) || !beta.contains(&self.adam.beta2) {
            return fail("Adam betas must lie in [0, 1)");
        }
        if self.adam.epsilon <= 0.0 {
            return fail("Adam epsilon must be positive");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return fail("base_lr must be positive");
        }
        if self.schedule == Schedule::Warmup && self.warmup_steps == 0 {
            return fail("warmup schedule needs warmup_steps ≥ 1");
        }
        if matches!(self.clip_norm, Some(c) if c <= 0.0) {
            return fail("clip_norm must be positive");
        }
        Ok(())
    }
}

/// Learning rate for the 1-based `step`.
pub fn lr_at(step: u64, config: &TrainConfig) -> f64 {
    assert!(step >= 1, "steps are 1-based");
    match config.schedule {
        Schedule::Constant => config.base_lr,
        Schedule::Warmup => {
            let (s, w) = (step as f64, config.warmup_steps as f64);
            config.base_lr * (s / w).min((w / s).sqrt())
        }
    }
}

/// Fixed-length id rows for one pair: the encoder input and the shifted
/// decoder input/target, all START/END framed and PAD-filled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub source: Vec<usize>,
    pub decoder_input: Vec<usize>,
    pub target: Vec<usize>,
}

pub fn encode_pairs(
    dataset: &QADataset,
    vocab: &Vocabulary,
    max_input_len: usize,
    max_output_len: usize,
) -> (Vec<Example>, EncodeStats) {
    let mut stats = EncodeStats::default();
    let examples = dataset
        .pairs()
        .iter()
        .map(|p| {
            let (source, s) = encode_counted(&p.question, vocab, max_input_len, true, true);
            stats += s;
            let (answer, s) = encode_counted(&p.answer, vocab, max_output_len, true, true);
            stats += s;
            Example {
                source,
                decoder_input: answer[..answer.len() - 1].to_vec(),
                target: answer[1..].to_vec(),
            }
        })
        .collect();
    (examples, stats)
}

/// Stacks examples into trimmed source, decoder-input and target batches.
/// The decoder side is cut to the last non-PAD target column.
pub fn collate(examples: &[&Example]) -> Result<(SeqBatch, SeqBatch, SeqBatch)> {
    let rows = |f: fn(&Example) -> &Vec<usize>| examples.iter().map(|e| f(e).clone()).collect::<Vec<_>>();
    let src = SeqBatch::from_rows(&rows(|e| &e.source))?.trimmed();
    let tgt = SeqBatch::from_rows(&rows(|e| &e.target))?.trimmed();
    let dec = SeqBatch::from_rows(&rows(|e| &e.decoder_input))?.narrow(tgt.len());
    Ok((src, dec, tgt))
}

/// Teacher-forced mean cross entropy over non-PAD targets, on a fresh session.
pub fn batch_loss<T: Scalar>(model: &Model<T>, session: &mut Session<T>, examples: &[&Example]) -> Result<crate::tensor::Var> {
    let (src, dec, tgt) = collate(examples)?;
    let logits = model.forward(session, &src, &dec)?;
    Ok(session.graph.cross_entropy(logits, tgt.ids(), PAD)?)
}

/// Gradients of `loss` for every model parameter, zeros where unused.
fn param_grads<T: Scalar>(model: &Model<T>, session: &Session<T>) -> Vec<Tensor<T>> {
    model
        .params()
        .tensors()
        .iter()
        .zip(session.params())
        .map(|(p, &v)| session.graph.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect()
}

/// Deterministic 64-bit mix of a seed with a stream tag and a counter.
fn derive_seed(seed: u64, stream: u64, counter: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ counter.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// 1-based index of the completed step.
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// Training state. Everything after construction is a pure function of the
/// seed and the step counter, so a run restored from a checkpoint continues
/// exactly as the uninterrupted one.
pub struct Trainer<T: Scalar> {
    model: Model<T>,
    vocab: Vocabulary,
    config: TrainConfig,
    examples: Vec<Example>,
    adam: AdamState<T>,
    step: u64,
    history: Vec<f64>,
    order: Option<(u64, Vec<usize>)>,
    metrics: Option<(PathBuf, BufWriter<File>)>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, vocab: Vocabulary, train: &QADataset, config: TrainConfig) -> Result<Self> {
        let adam = AdamState::new(model.params());
        Self::assemble(model, vocab, train, config, adam, 0, Vec::new())
    }

    /// Continues from a checkpoint carrying optimizer state.
    pub fn resume(checkpoint: Checkpoint<T>, train: &QADataset, config: TrainConfig) -> Result<Self> {
        let adam = checkpoint
            .adam
            .ok_or_else(|| TrainError::Contract("checkpoint holds no optimizer state".into()))?;
        Self::assemble(
            checkpoint.model,
            checkpoint.vocab,
            train,
            config,
            adam,
            checkpoint.step,
            checkpoint.history,
        )
    }

    fn assemble(
        model: Model<T>,
        vocab: Vocabulary,
        train: &QADataset,
        config: TrainConfig,
        adam: AdamState<T>,
        step: u64,
        history: Vec<f64>,
    ) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(TrainError::Contract("training set is empty".into()));
        }
        if vocab.len() != model.config().vocab_size() {
            return Err(TrainError::Contract(format!(
                "vocabulary of {} tokens for a model sized {}",
                vocab.len(),
                model.config().vocab_size()
            )));
        }
        let (max_in, max_out) = model.config().max_lengths();
        let (examples, _) = encode_pairs(train, &vocab, max_in, max_out);
        Ok(Trainer {
            model,
            vocab,
            config,
            examples,
            adam,
            step,
            history,
            order: None,
            metrics: None,
        })
    }

    /// Appends `step\tlr\tloss` lines to `path`, writing a header if new.
    pub fn log_metrics_to(&mut self, path: &Path) -> Result<()> {
        let io = |source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        };
        let fresh = !path.exists();
        let file = File::options().create(true).append(true).open(path).map_err(io)?;
        let mut w = BufWriter::new(file);
        if fresh {
            writeln!(w, "step\tlr\tloss").map_err(io)?;
        }
        self.metrics = Some((path.to_path_buf(), w));
        Ok(())
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn adam(&self) -> &AdamState<T> {
        &self.adam
    }

    /// Completed steps.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn history(&self) -> &[f64] {
        &self.history
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.examples.len().div_ceil(self.config.batch_size)
    }

    pub fn total_steps(&self) -> u64 {
        let planned = (self.config.epochs * self.steps_per_epoch()) as u64;
        self.config.max_steps.map_or(planned, |m| planned.min(m as u64))
    }

    fn epoch_order(&mut self, epoch: u64) -> &[usize] {
        if self.order.as_ref().map(|o| o.0) != Some(epoch) {
            let mut order: Vec<usize> = (0..self.examples.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, SHUFFLE_STREAM, epoch));
            order.shuffle(&mut rng);
            self.order = Some((epoch, order));
        }
        &self.order.as_ref().unwrap().1
    }

    /// Indices of the examples in the batch for the next step.
    pub fn next_batch(&mut self) -> Vec<usize> {
        let spe = self.steps_per_epoch() as u64;
        let (epoch, pos) = (self.step / spe, (self.step % spe) as usize);
        let bs = self.config.batch_size;
        let order = self.epoch_order(epoch);
        order[pos * bs..((pos + 1) * bs).min(order.len())].to_vec()
    }

    /// Runs one optimisation step. On error no state changes.
    pub fn step(&mut self) -> Result<StepRecord> {
        let batch = self.next_batch();
        let next = self.step + 1;
        let mut session = Session::train(self.model.params(), derive_seed(self.config.seed, DROPOUT_STREAM, next));
        let picked: Vec<&Example> = batch.iter().map(|&i| &self.examples[i]).collect();
        let loss = batch_loss(&self.model, &mut session, &picked)?;
        let loss_value = session.graph.value(loss).item().as_f64();
        if !loss_value.is_finite() {
            return Err(TrainError::NonFiniteLoss { step: next });
        }
        session.graph.backward(loss)?;
        let mut grads = param_grads(&self.model, &session);
        drop(session);
        let grad_norm = match self.config.clip_norm {
            Some(c) => clip_global_norm(&mut grads, c),
            None => clip_global_norm(&mut grads, f64::INFINITY),
        };
        let lr = lr_at(next, &self.config);
        adam_step(self.model.params_mut(), &grads, &mut self.adam, lr, &self.config.adam)?;
        self.step = next;
        self.history.push(loss_value);
        if let Some((path, w)) = self.metrics.as_mut() {
            writeln!(w, "{next}\t{lr:e}\t{loss_value}").map_err(|source| TrainError::Io {
                path: path.clone(),
                source,
            })?;
        }
        let interval = self.config.checkpoint_interval as u64;
        if interval > 0 && next % interval == 0 {
            self.save_configured()?;
        }
        Ok(StepRecord {
            step: next,
            lr,
            loss: loss_value,
            grad_norm,
        })
    }

    /// Steps until `total_steps`, then writes the configured checkpoint.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepRecord)) -> Result<()> {
        while self.step < self.total_steps() {
            let record = self.step()?;
            on_step(&record);
        }
        self.flush_metrics()?;
        self.save_configured()
    }

    fn flush_metrics(&mut self) -> Result<()> {
        if let Some((path, w)) = self.metrics.as_mut() {
            w.flush().map_err(|source| TrainError::Io {
                path: path.clone(),
                source,
            })?;
        }
        Ok(())
    }

    fn save_configured(&mut self) -> Result<()> {
        self.flush_metrics()?;
        if let Some(path) = self.config.checkpoint_path.clone() {
            self.checkpoint().save(&path)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            model: self.model.clone(),
            vocab: self.vocab.clone(),
            adam: Some(self.adam.clone()),
            step: self.step,
            history: self.history.clone(),
            train_config: Some(self.config.clone()),
        }
    }

    pub fn into_model(self) -> (Model<T>, Vocabulary) {
        (self.model, self.vocab)
    }
}
