//! One PASS/FAIL line per primary acceptance criterion. Exits non-zero if any fails.

use std::io::{BufRead, BufReader};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use seqchat_core::check::{attention_audit, causality_probe, gradient_check, padding_probe};
use seqchat_core::decode::{bleu, compare, evaluate};
use seqchat_core::model::{
    positional_encoding, preset, AttentionKind, CellKind, DataDims, Model, ModelConfig, RecurrentConfig, SeqBatch,
    TransformerConfig,
};
use seqchat_core::tensor::Tensor;
use seqchat_core::text::{build_vocab, demo_dataset, QADataset, Vocabulary, PAD};
use seqchat_core::train::{
    adam_step, collate, encode_pairs, AdamConfig, AdamState, Checkpoint, Example, Schedule, TrainConfig, Trainer,
};
use seqchat_core::Graph;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn demo() -> (QADataset, Vocabulary, Vec<Example>) {
    let ds = demo_dataset();
    let vocab = build_vocab(&ds, 1).unwrap();
    let (examples, _) = encode_pairs(&ds, &vocab, 15, 10);
    (ds, vocab, examples)
}

fn micro_transformer(vocab: usize) -> ModelConfig {
    ModelConfig::Transformer(TransformerConfig {
        num_layers: 2,
        d_model: 8,
        ffn_units: 16,
        num_heads: 2,
        dropout: 0.1,
        ..TransformerConfig::base(vocab, 15, 10)
    })
}

fn micro_recurrent(vocab: usize, cell: CellKind, bidirectional: bool, attention: AttentionKind) -> ModelConfig {
    ModelConfig::Recurrent(RecurrentConfig {
        cell,
        hidden_size: 8,
        embedding_size: 8,
        bidirectional_encoder: bidirectional,
        bidirectional_decoder: false,
        attention,
        vocab_size: vocab,
        max_encoder_len: 15,
        max_decoder_len: 10,
        dropout: 0.1,
    })
}

fn micro_family(vocab: usize) -> Vec<ModelConfig> {
    let mut out = vec![micro_transformer(vocab)];
    for cell in [CellKind::Rnn, CellKind::Gru, CellKind::Lstm] {
        for bi in [false, true] {
            for att in [AttentionKind::None, AttentionKind::Dot] {
                out.push(micro_recurrent(vocab, cell, bi, att));
            }
        }
    }
    out
}

/// A random-size batch of demo examples drawn without replacement.
fn random_batch(examples: &[Example], rng: &mut ChaCha8Rng) -> (SeqBatch, SeqBatch, SeqBatch) {
    let size = rng.gen_range(1..=5);
    let picked: Vec<&Example> = rand::seq::index::sample(rng, examples.len(), size)
        .into_iter()
        .map(|i| &examples[i])
        .collect();
    collate(&picked).unwrap()
}

fn gradients() -> Outcome {
    let (_, vocab, examples) = demo();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let mut worst = 0f64;
    let mut total = 0;
    for (k, config) in micro_family(vocab.len()).iter().enumerate() {
        let model = Model::<f64>::new(config, 100 + k as u64).map_err(|e| e.to_string())?;
        let (src, dec, tgt) = random_batch(&examples, &mut rng);
        let checks = gradient_check(&model, &src, &dec, tgt.ids(), 24, 1e-5, k as u64).map_err(|e| e.to_string())?;
        ensure!(checks.len() >= 20, "{}: only {} coordinates", config.summary(), checks.len());
        for c in &checks {
            ensure!(c.rel_error < 1e-3, "{}: {:?}", config.summary(), c);
            worst = worst.max(c.rel_error);
        }
        total += checks.len();
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1}s");
    Ok(format!("{total} coordinates over 13 micro variants, worst rel {worst:.2e}"))
}

fn attention_normalisation() -> Outcome {
    let (_, vocab, examples) = demo();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut row, mut masked, mut records) = (0f64, 0f64, 0);
    for trial in 0..4u64 {
        for config in micro_family(vocab.len()) {
            let model = Model::<f64>::new(&config, trial).map_err(|e| e.to_string())?;
            let (src, dec, _) = random_batch(&examples, &mut rng);
            let audit = attention_audit(&model, &src, &dec).map_err(|e| e.to_string())?;
            row = row.max(audit.max_row_error);
            masked = masked.max(audit.max_masked_weight);
            records += audit.records;
        }
    }
    ensure!(records > 0, "no attention recorded");
    ensure!(row < 1e-9, "row sum error {row:e}");
    ensure!(masked < 1e-12, "masked weight {masked:e}");
    Ok(format!("{records} attention maps, row error {row:.1e}, masked {masked:.1e}"))
}

fn causality_and_padding() -> Outcome {
    let (_, vocab, examples) = demo();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut future, mut pad) = (0f64, 0f64);
    for trial in 0..3u64 {
        for config in micro_family(vocab.len()) {
            let model = Model::<f64>::new(&config, trial).map_err(|e| e.to_string())?;
            let (src, dec, _) = random_batch(&examples, &mut rng);
            for t in 0..dec.len() {
                future = future.max(causality_probe(&model, &src, &dec, t, trial).map_err(|e| e.to_string())?);
            }
            pad = pad.max(padding_probe(&model, &src, &dec, trial).map_err(|e| e.to_string())?);
        }
    }
    ensure!(future < 1e-12, "future leak {future:e}");
    ensure!(pad < 1e-12, "padding leak {pad:e}");
    Ok(format!("max future diff {future:.1e}, max pad diff {pad:.1e}"))
}

fn positional() -> Outcome {
    let (n, d) = (64, 256);
    let pe = positional_encoding::<f64>(n, d).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0f64;
    for _ in 0..100 {
        let (pos, i) = (rng.gen_range(0..n), rng.gen_range(0..d));
        let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let want = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        worst = worst.max((pe.get(&[pos, i]) - want).abs());
    }
    ensure!(worst < 1e-12, "max deviation {worst:e}");
    for i in 0..d {
        ensure!(pe.get(&[0, i]) == if i % 2 == 0 { 0.0 } else { 1.0 }, "pos 0, dim {i}");
    }
    Ok(format!("100 points, max deviation {worst:.1e}; pos 0 row exact"))
}

fn bleu_fixture() -> Result<f64, String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/bleu.json");
    let cases: Vec<Value> = serde_json::from_str(&std::fs::read_to_string(&path).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let toks = |v: &Value| -> Vec<Vec<String>> {
        v.as_array()
            .unwrap()
            .iter()
            .map(|s| s.as_str().unwrap().split_whitespace().map(String::from).collect())
            .collect()
    };
    let mut worst = 0f64;
    for c in &cases {
        let got = bleu(&toks(&c["hypotheses"]), &toks(&c["references"]), 4).map_err(|e| e.to_string())?;
        let mut dev = (got.score - c["score"].as_f64().unwrap()).abs();
        dev = dev.max((got.brevity_penalty - c["brevity_penalty"].as_f64().unwrap()).abs());
        for (a, b) in got.precisions.iter().zip(c["precisions"].as_array().unwrap()) {
            dev = dev.max((a - b.as_f64().unwrap()).abs());
        }
        ensure!(dev < 1e-6, "{}: deviation {dev:e}", c["name"]);
        worst = worst.max(dev);
    }
    Ok(worst)
}

fn oracles() -> Outcome {
    let mut params = seqchat_core::model::ParamSet::<f64>::default();
    params.push("theta", Tensor::from_f64(&[1], &[1.0]).unwrap());
    let mut state = AdamState::new(&params);
    let grad = [Tensor::from_f64(&[1], &[0.5]).unwrap()];
    adam_step(&mut params, &grad, &mut state, 0.01, &AdamConfig::default()).map_err(|e| e.to_string())?;
    let theta = params.tensors()[0].item();
    let want = 1.0 - 0.01 * 0.5 / (0.5 + 1e-9);
    ensure!((theta - want).abs() < 1e-6, "adam {theta} vs {want}");

    let v = 37;
    let mut g = Graph::new();
    let logits = g.leaf(Tensor::zeros(&[3, v]));
    let loss = g.cross_entropy(logits, &[4, 9, 36], PAD).map_err(|e| e.to_string())?;
    let ce = g.value(loss).item();
    ensure!((ce - (v as f64).ln()).abs() < 1e-12, "uniform CE {ce} vs ln {v}");

    let worst = bleu_fixture()?;
    Ok(format!("adam θ'={theta:.9}, uniform CE = ln V, BLEU fixture max deviation {worst:.1e}"))
}

fn overfit() -> Outcome {
    let (ds, vocab, _) = demo();
    let config = preset("transformer", DataDims::with_vocab(vocab.len())).unwrap();
    let train = TrainConfig {
        epochs: 3000,
        max_steps: Some(3000),
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let mut t = Trainer::new(Model::<f64>::new(&config, 0).unwrap(), vocab, &ds, train).map_err(|e| e.to_string())?;
    let per_epoch = t.steps_per_epoch();
    let mut reached = None;
    while t.step_count() < t.total_steps() {
        t.step().map_err(|e| e.to_string())?;
        let done = t.step_count() as usize;
        if done % per_epoch == 0 {
            let h = &t.history()[done - per_epoch..];
            let mean = h.iter().sum::<f64>() / per_epoch as f64;
            if mean < 0.05 {
                reached = Some((done, mean));
                break;
            }
        }
    }
    let (steps, loss) = reached.ok_or("loss never fell below 0.05 within 3000 steps")?;
    let (model, vocab) = t.into_model();
    let eval = evaluate(&model, &vocab, &ds).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    ensure!(eval.exact_match >= 0.95, "exact match {:.3}", eval.exact_match);
    ensure!(eval.bleu.score >= 85.0, "BLEU {:.2}", eval.bleu.score);
    ensure!(secs < 600.0, "took {secs:.0}s");
    Ok(format!(
        "loss {loss:.4} at step {steps}, exact {:.1}%, BLEU {:.2}, {secs:.0}s",
        100.0 * eval.exact_match,
        eval.bleu.score
    ))
}

fn ordering() -> Outcome {
    let (ds, vocab, _) = demo();
    let dims = DataDims::with_vocab(vocab.len());
    let presets: Vec<(String, ModelConfig)> = ["transformer", "seq2seq-attention", "simple-rnn"]
        .iter()
        .map(|n| (n.to_string(), preset(n, dims).unwrap()))
        .collect();
    let shared = TrainConfig {
        schedule: Schedule::Constant,
        ..TrainConfig::default()
    };
    let rows = compare::<f64>(&presets, &vocab, &ds, &ds, &shared, |_, _| {}).map_err(|e| e.to_string())?;
    let (tr, att, rnn) = (rows[0].bleu, rows[1].bleu, rows[2].bleu);
    let detail = format!("transformer {tr:.2} ≥ seq2seq-attention {att:.2} ≥ simple-rnn {rnn:.2}");
    ensure!(tr >= att && att >= rnn, "violated: {detail}");
    Ok(detail)
}

fn resume() -> Outcome {
    let (ds, vocab, _) = demo();
    let run = TrainConfig {
        batch_size: 5,
        schedule: Schedule::Constant,
        base_lr: 3e-3,
        seed: 17,
        max_steps: Some(12),
        ..TrainConfig::default()
    };
    let mut worst = 0f64;
    for config in [
        micro_transformer(vocab.len()),
        micro_recurrent(vocab.len(), CellKind::Lstm, true, AttentionKind::Dot),
    ] {
        let model = Model::<f64>::new(&config, 4).map_err(|e| e.to_string())?;
        let mut straight = Trainer::new(model, vocab.clone(), &ds, run.clone()).map_err(|e| e.to_string())?;
        for _ in 0..6 {
            straight.step().map_err(|e| e.to_string())?;
        }
        let bytes = straight.checkpoint().to_bytes();
        let expected = straight.step().map_err(|e| e.to_string())?.loss;
        let restored = Checkpoint::<f64>::from_bytes(&bytes).map_err(|e| e.to_string())?;
        let mut resumed = Trainer::resume(restored, &ds, run.clone()).map_err(|e| e.to_string())?;
        let got = resumed.step().map_err(|e| e.to_string())?.loss;
        ensure!((got - expected).abs() < 1e-12, "{}: {got} vs {expected}", config.family());
        worst = worst.max((got - expected).abs());
    }
    Ok(format!("step 7 loss after reload matches, max diff {worst:.1e}"))
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn seqchat(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_seqchat"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        out.status.success(),
        "seqchat {} failed: {}",
        args[0],
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data: PathBuf = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data/demo.tsv");
    let data = data.to_str().unwrap();
    let ckpt = dir.path().join("demo.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    seqchat(&["train", "--data", data, "--out", ckpt, "--schedule", "constant", "--epochs", "60"])?;
    let report = seqchat(&["evaluate", "--checkpoint", ckpt, "--data", data])?;
    ensure!(report.contains("BLEU"), "evaluate printed no table");

    let mut child = Command::new(env!("CARGO_BIN_EXE_seqchat"))
        .args(["serve", "--checkpoint", ckpt, "--bind", "127.0.0.1:0"])
        .env("RUST_LOG", "warn")
        .stdout(Stdio::piped())
        .spawn()
        .map_err(|e| e.to_string())?;
    let stdout = child.stdout.take().unwrap();
    let _guard = Server(child);
    let mut line = String::new();
    BufReader::new(stdout).read_line(&mut line).map_err(|e| e.to_string())?;
    let base = line
        .trim()
        .strip_prefix("listening on ")
        .ok_or_else(|| format!("unexpected banner {line:?}"))?
        .to_string();

    let http = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(30))
        .build()
        .map_err(|e| e.to_string())?;
    let post = |body: String| {
        http.post(format!("{base}/chat"))
            .header("content-type", "application/json")
            .body(body)
            .send()
            .map_err(|e| e.to_string())
    };

    let health: Value = http
        .get(format!("{base}/health"))
        .send()
        .and_then(|r| r.json())
        .map_err(|e| e.to_string())?;
    ensure!(health["status"] == "ok", "health {health}");

    let question = "এশিয়ার ক্ষুদ্রতম দেশ কোনটি?";
    let reply = post(json!({ "question": question }).to_string())?;
    ensure!(reply.status() == 200, "status {}", reply.status());
    let reply: Value = reply.json().map_err(|e| e.to_string())?;
    ensure!(reply["answer"] == "মালদ্বীপ", "answer {reply}");

    let info: Value = http
        .get(format!("{base}/info"))
        .send()
        .and_then(|r| r.json())
        .map_err(|e| e.to_string())?;
    ensure!(info["bleu"].is_number(), "info carries no BLEU: {info}");

    let empty = post(json!({ "question": "" }).to_string())?;
    ensure!(empty.status() == 200, "empty question status {}", empty.status());
    let bad = post("{not json".into())?;
    ensure!(bad.status() == 400, "malformed JSON status {}", bad.status());
    let bad: Value = bad.json().map_err(|e| e.to_string())?;
    ensure!(bad["error"].is_string(), "400 body {bad}");
    let big = post(json!({ "question": "ক".repeat(10_000) }).to_string())?;
    ensure!(big.status() == 413, "oversized body status {}", big.status());

    Ok(format!("{question} → {}; health, info, 400 and 413 paths ok", reply["answer"]))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient correctness", gradients),
        ("attention normalisation", attention_normalisation),
        ("causality and padding probes", causality_and_padding),
        ("positional encoding closed form", positional),
        ("optimizer and loss oracles", oracles),
        ("overfit surrogate", overfit),
        ("preset ordering", ordering),
        ("checkpoint resume equivalence", resume),
        ("end-to-end CLI", end_to_end),
    ];
    let only = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (name, check) in criteria {
        if only.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name:<32} {detail} [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name:<32} {why} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
