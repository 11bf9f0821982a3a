//! Command-line entry points wiring the library into reproducible
//! experiments: dataset statistics, splitting, synthetic corpus generation,
//! training, evaluation, gradient checking, and the input-length ablation.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage/format error, 3 numeric
//! failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::chunker::Vocabulary;
use crate::config::RunConfig;
use crate::data::{self, LabeledCorpus, SplitCorpora};
use crate::embedder::load_external;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{
    model_grad_check, prepare_docs, prepare_external, ModelParams, PreparedDoc,
};
use crate::trainer::{
    evaluate, load_checkpoint, save_checkpoint, train, CheckpointConfig, EpochLog, EvalReport,
    TrainOptions,
};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

/// Pass threshold for the full-model gradient check.
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "hipool", version, about = "Hierarchical graph pooling for long-document classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Token-length statistics of a corpus file.
    Stats {
        corpus: PathBuf,
        /// Emit the machine-readable record instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Shuffle and cut a corpus into train/dev/test files.
    Split {
        corpus: PathBuf,
        #[arg(long, value_delimiter = ',', num_args = 3, default_value = "0.8,0.1,0.1")]
        ratios: Vec<f64>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Generate a synthetic long-range classification corpus.
    Synth {
        #[arg(long, default_value_t = 64)]
        docs: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = 4)]
        chunks_per_doc: usize,
        #[arg(long, default_value_t = 15)]
        chunk_len: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write checkpoint + per-epoch metrics.
    Train {
        /// TOML run configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// key=value config overrides.
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on a corpus file.
    Eval {
        checkpoint: PathBuf,
        corpus: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Finite-difference check of the full model's gradients.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set")]
        overrides: Vec<String>,
        /// Central-difference step size.
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Test hook: corrupt one analytic gradient to exercise the failure path.
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
    /// Retrain and evaluate at increasing input-length truncations.
    AblateLength {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set")]
        overrides: Vec<String>,
        /// Ascending truncation lengths, in tokens.
        #[arg(long, value_delimiter = ',', required = true)]
        lengths: Vec<usize>,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Dispatches a parsed invocation and maps errors onto exit codes.
pub fn run(cli: Cli) -> u8 {
    let outcome = match cli.command {
        Command::Stats { corpus, json } => cmd_stats(&corpus, json),
        Command::Split {
            corpus,
            ratios,
            seed,
            out_dir,
        } => cmd_split(&corpus, &ratios, seed, &out_dir),
        Command::Synth {
            docs,
            classes,
            chunks_per_doc,
            chunk_len,
            seed,
            out,
        } => cmd_synth(docs, classes, chunks_per_doc, chunk_len, seed, &out),
        Command::Train { config, overrides } => {
            load_run_config(config.as_deref(), &overrides).and_then(|cfg| {
                cmd_train(&cfg).map(|outcome| {
                    match outcome.final_dev_f1 {
                        Some(dev) => println!("final dev micro-F1: {dev:.4}"),
                        None => println!("final train micro-F1: {:.4}", outcome.final_train_f1),
                    }
                    println!("checkpoint: {}", outcome.checkpoint.display());
                    println!("metrics: {}", outcome.metrics.display());
                    EXIT_OK
                })
            })
        }
        Command::Eval {
            checkpoint,
            corpus,
            json,
        } => cmd_eval(&checkpoint, &corpus).map(|report| {
            if json {
                println!("{}", serde_json::to_string(&report).expect("report serializes"));
            } else {
                println!("micro-F1: {:.4}", report.micro_f1);
            }
            EXIT_OK
        }),
        Command::Gradcheck {
            config,
            overrides,
            eps,
            corrupt_backward,
        } => load_run_config(config.as_deref(), &overrides).and_then(|cfg| {
            cmd_gradcheck(&cfg, eps, corrupt_backward).map(|outcome| {
                println!(
                    "gradcheck: max relative error {:.3e} (eps {:.1e}, tolerance {:.1e})",
                    outcome.max_rel_error, outcome.eps, GRADCHECK_TOL
                );
                if outcome.passed {
                    println!("gradcheck: PASS");
                    EXIT_OK
                } else {
                    println!("gradcheck: FAIL");
                    EXIT_CHECK_FAILED
                }
            })
        }),
        Command::AblateLength {
            config,
            overrides,
            lengths,
            out,
        } => load_run_config(config.as_deref(), &overrides).and_then(|cfg| {
            cmd_ablate_length(&cfg, &lengths).and_then(|rows| {
                let mut table = String::from("length\tmicro_f1\n");
                for (len, f1) in &rows {
                    table.push_str(&format!("{len}\t{f1:.4}\n"));
                }
                print!("{table}");
                if let Some(path) = out {
                    fs::write(&path, table)?;
                }
                Ok(EXIT_OK)
            })
        }),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Numeric(_) => EXIT_NUMERIC,
                _ => EXIT_USAGE,
            }
        }
    }
}

fn load_run_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for assignment in overrides {
        cfg.apply_override(assignment)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_stats(corpus_path: &Path, json: bool) -> Result<u8> {
    let corpus = data::load_corpus(corpus_path, None)?;
    let stats = data::stats(&corpus)?;
    if json {
        println!("{}", serde_json::to_string(&stats).expect("stats serialize"));
    } else {
        println!("corpus: {} (unit: tokens)", corpus.name);
        println!("mean    {:.2}", stats.mean);
        println!("max     {}", stats.max);
        println!("min     {}", stats.min);
        println!("median  {}", stats.median);
        println!("p95     {}", stats.p95);
        println!("total   {}", stats.total);
        println!("classes {}", stats.classes);
    }
    Ok(EXIT_OK)
}

fn warn_empty_partitions(splits: &SplitCorpora) {
    for (name, part) in [
        ("train", &splits.train),
        ("dev", &splits.dev),
        ("test", &splits.test),
    ] {
        if part.is_empty() {
            eprintln!("warning: {name} partition is empty");
        }
    }
}

fn cmd_split(corpus_path: &Path, ratios: &[f64], seed: u64, out_dir: &Path) -> Result<u8> {
    let corpus = data::load_corpus(corpus_path, None)?;
    let ratios = [ratios[0], ratios[1], ratios[2]];
    let splits = data::split(&corpus, ratios, seed)?;
    warn_empty_partitions(&splits);
    fs::create_dir_all(out_dir)?;
    for (name, part) in [
        ("train", &splits.train),
        ("dev", &splits.dev),
        ("test", &splits.test),
    ] {
        data::save_corpus(&out_dir.join(format!("{name}.jsonl")), part)?;
    }
    println!(
        "split {} docs into {}/{}/{}",
        corpus.len(),
        splits.train.len(),
        splits.dev.len(),
        splits.test.len()
    );
    Ok(EXIT_OK)
}

fn cmd_synth(
    docs: usize,
    classes: usize,
    chunks_per_doc: usize,
    chunk_len: usize,
    seed: u64,
    out: &Path,
) -> Result<u8> {
    let corpus = data::synth_longrange(docs, classes, chunks_per_doc, chunk_len, seed)?;
    data::save_corpus(out, &corpus)?;
    println!(
        "wrote {} docs ({} classes, {} tokens each) to {}",
        corpus.len(),
        classes,
        chunks_per_doc * chunk_len,
        out.display()
    );
    Ok(EXIT_OK)
}

pub struct TrainOutcome {
    pub logs: Vec<EpochLog>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub final_train_f1: f64,
    pub final_dev_f1: Option<f64>,
}

/// Prepared splits plus everything the model needs to consume them.
struct PreparedData {
    train: Vec<PreparedDoc>,
    dev: Vec<PreparedDoc>,
    test: Vec<PreparedDoc>,
    vocab: Option<Vocabulary>,
    encoder: EncoderConfig,
    classes: usize,
    external_dim: Option<usize>,
}

/// Splits the corpus and prepares model inputs. The vocabulary (token mode)
/// is built from the training split only.
fn prepare_splits(cfg: &RunConfig, corpus: &LabeledCorpus) -> Result<PreparedData> {
    let splits = data::split(corpus, cfg.split, cfg.seed)?;
    warn_empty_partitions(&splits);
    if splits.train.is_empty() {
        return Err(Error::Domain("training partition is empty".into()));
    }
    match &cfg.external_embeddings {
        Some(path) => {
            let ext = load_external(path)?;
            let prep = |c: &LabeledCorpus| -> Result<Vec<PreparedDoc>> {
                prepare_external(c, &ext, cfg.max_node)
            };
            Ok(PreparedData {
                train: prep(&splits.train)?,
                dev: prep(&splits.dev)?,
                test: prep(&splits.test)?,
                vocab: None,
                encoder: cfg.encoder_config(ext.dim()),
                classes: corpus.class_count,
                external_dim: Some(ext.dim()),
            })
        }
        None => {
            let vocab = Vocabulary::build(splits.train.documents.iter().map(|d| d.text.as_str()));
            let opts = cfg.prep_options();
            let prep = |c: &LabeledCorpus| -> Result<Vec<PreparedDoc>> {
                prepare_docs(c, &vocab, &opts)
            };
            Ok(PreparedData {
                train: prep(&splits.train)?,
                dev: prep(&splits.dev)?,
                test: prep(&splits.test)?,
                vocab: Some(vocab),
                encoder: cfg.encoder_config(cfg.d),
                classes: corpus.class_count,
                external_dim: None,
            })
        }
    }
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let corpus_path = cfg
        .corpus
        .as_ref()
        .ok_or_else(|| Error::Config("train requires a corpus path".into()))?;
    let corpus = data::load_corpus(corpus_path, None)?;
    let out_dir = cfg
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("hipool_run"));
    fs::create_dir_all(&out_dir)?;

    let prepared = prepare_splits(cfg, &corpus)?;
    let splits = data::split(&corpus, cfg.split, cfg.seed)?;
    for (name, part) in [
        ("train", &splits.train),
        ("dev", &splits.dev),
        ("test", &splits.test),
    ] {
        data::save_corpus(&out_dir.join(format!("{name}.jsonl")), part)?;
    }
    let vocab_ref = match &prepared.vocab {
        Some(vocab) => {
            vocab.save(&out_dir.join("vocab.txt"))?;
            Some("vocab.txt".to_string())
        }
        None => None,
    };

    let vocab_size = prepared.vocab.as_ref().map(|v| v.size());
    let mut params = ModelParams::init(
        &prepared.encoder,
        vocab_size,
        prepared.classes,
        cfg.embed_ff,
        cfg.seed,
    )?;
    let opts = TrainOptions {
        lr: cfg.lr,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        patience: cfg.patience,
    };
    let dev: Option<&[PreparedDoc]> = if prepared.dev.is_empty() {
        None
    } else {
        Some(&prepared.dev)
    };
    let logs = train(&mut params, &prepared.encoder, &prepared.train, dev, &opts)?;

    let metrics = out_dir.join("metrics.jsonl");
    let mut file = fs::File::create(&metrics)?;
    for log in &logs {
        serde_json::to_writer(&mut file, log)
            .map_err(|e| Error::Schema(format!("metrics serialization failed: {e}")))?;
        file.write_all(b"\n")?;
    }

    let checkpoint = out_dir.join("checkpoint.json");
    let ccfg = CheckpointConfig {
        run: cfg.clone(),
        classes: prepared.classes,
        vocab_size,
        external_dim: prepared.external_dim,
    };
    save_checkpoint(&checkpoint, &params, &ccfg, vocab_ref)?;

    let last = logs.last().expect("at least one epoch");
    Ok(TrainOutcome {
        final_train_f1: last.train_f1,
        final_dev_f1: last.dev_f1,
        logs,
        checkpoint,
        metrics,
    })
}

pub fn cmd_eval(checkpoint_path: &Path, corpus_path: &Path) -> Result<EvalReport> {
    let (params, ccfg, vocab_ref) = load_checkpoint(checkpoint_path)?;
    let corpus = data::load_corpus(corpus_path, Some(ccfg.classes))?;
    let docs = match &ccfg.run.external_embeddings {
        Some(path) => {
            let ext = load_external(path)?;
            prepare_external(&corpus, &ext, ccfg.run.max_node)?
        }
        None => {
            let vocab_file = vocab_ref.ok_or_else(|| {
                Error::Schema("checkpoint has no vocab_ref but uses token input".into())
            })?;
            let base = checkpoint_path.parent().unwrap_or_else(|| Path::new("."));
            let vocab = Vocabulary::load(&base.join(vocab_file))?;
            prepare_docs(&corpus, &vocab, &ccfg.run.prep_options())?
        }
    };
    let encoder = ccfg.run.encoder_config(ccfg.effective_d());
    evaluate(&params, &encoder, &docs)
}

pub struct GradcheckOutcome {
    pub max_rel_error: f64,
    pub eps: f64,
    pub passed: bool,
}

/// Runs the finite-difference check through the full model on a small
/// deterministic synthetic input derived from the config seed.
pub fn cmd_gradcheck(cfg: &RunConfig, eps: f64, corrupt_backward: bool) -> Result<GradcheckOutcome> {
    cfg.validate()?;
    if cfg.max_node > 8 || cfg.d > 16 {
        eprintln!(
            "warning: gradcheck is intended for small models (max_node ≤ 8, d ≤ 16), got max_node = {}, d = {}",
            cfg.max_node, cfg.d
        );
    }
    // Two documents whose chunk count fills max_node exactly after capping.
    let chunks_per_doc = (cfg.max_node.div_ceil(2) + 1).max(2);
    let corpus = data::synth_longrange(2, 2, chunks_per_doc, cfg.chunk_len, cfg.seed)?;
    let vocab = Vocabulary::build(corpus.documents.iter().map(|d| d.text.as_str()));
    let docs = prepare_docs(&corpus, &vocab, &cfg.prep_options())?;
    let encoder = cfg.encoder_config(cfg.d);
    let params = ModelParams::init(&encoder, Some(vocab.size()), 2, cfg.embed_ff, cfg.seed)?;

    let mut report = model_grad_check(&params, &encoder, &docs, eps)?;
    if corrupt_backward {
        report.analytic[0][0] += 1.0;
        report.max_rel_error =
            crate::tensor::max_relative_error(&report.analytic, &report.numeric);
    }
    Ok(GradcheckOutcome {
        max_rel_error: report.max_rel_error,
        eps,
        passed: report.max_rel_error < GRADCHECK_TOL,
    })
}

/// Retrains per truncation length on the same seed and reports test micro-F1.
pub fn cmd_ablate_length(cfg: &RunConfig, lengths: &[usize]) -> Result<Vec<(usize, f64)>> {
    cfg.validate()?;
    if lengths.is_empty() {
        return Err(Error::Config("ablate-length needs at least one length".into()));
    }
    if lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("lengths must be ascending, got {lengths:?}")));
    }
    let corpus_path = cfg
        .corpus
        .as_ref()
        .ok_or_else(|| Error::Config("ablate-length requires a corpus path".into()))?;
    let corpus = data::load_corpus(corpus_path, None)?;
    let mut rows = Vec::with_capacity(lengths.len());
    for &length in lengths {
        let mut run = cfg.clone();
        run.max_tokens = Some(length);
        let prepared = prepare_splits(&run, &corpus)?;
        if prepared.test.is_empty() {
            return Err(Error::Domain(
                "ablate-length needs a non-empty test partition".into(),
            ));
        }
        let mut params = ModelParams::init(
            &prepared.encoder,
            prepared.vocab.as_ref().map(|v| v.size()),
            prepared.classes,
            run.embed_ff,
            run.seed,
        )?;
        let opts = TrainOptions {
            lr: run.lr,
            epochs: run.epochs,
            batch_size: run.batch_size,
            seed: run.seed,
            patience: run.patience,
        };
        let dev: Option<&[PreparedDoc]> = if prepared.dev.is_empty() {
            None
        } else {
            Some(&prepared.dev)
        };
        train(&mut params, &prepared.encoder, &prepared.train, dev, &opts)?;
        let f1 = evaluate(&params, &prepared.encoder, &prepared.test)?.micro_f1;
        rows.push((length, f1));
    }
    Ok(rows)
}
