//! Training loop, Adam optimizer, evaluation, and checkpoint persistence.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::encoder::{Aggregator, EncoderConfig, HiPoolLayerParams};
use crate::error::{Error, Result};
use crate::model::{batch_loss, forward_logits, FeedForward, ModelParams, ModelVars, PreparedDoc};
use crate::tensor::{Tape, Tensor};

pub const CHECKPOINT_FORMAT: &str = "hipool-checkpoint-v1";

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Debug, Clone)]
pub struct AdamState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &[&Tensor], lr: f64) -> Self {
        AdamState {
            first: params.iter().map(|t| vec![0.0; t.numel()]).collect(),
            second: params.iter().map(|t| vec![0.0; t.numel()]).collect(),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update using the gradients stored in each tensor's grad slot.
    /// A missing slot is treated as a zero gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::dimension(
                "adam_step parameter count",
                &[params.len()],
                &[self.first.len()],
            ));
        }
        for (i, t) in params.iter().enumerate() {
            if t.numel() != self.first[i].len() {
                return Err(Error::dimension("adam_step", t.shape(), &[self.first[i].len()]));
            }
        }
        self.step += 1;
        let bias1 = 1.0 - self.beta1.powi(self.step as i32);
        let bias2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, tensor) in params.iter_mut().enumerate() {
            let grad: Vec<f64> = match tensor.grad() {
                Some(g) => g.to_vec(),
                None => vec![0.0; tensor.numel()],
            };
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            let values = tensor.values_mut();
            for j in 0..grad.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * grad[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * grad[j] * grad[j];
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                values[j] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Early-stop patience on dev micro-F1. Training halts (without
    /// restoring earlier parameters) once dev F1 has not improved for this
    /// many consecutive epochs.
    pub patience: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub train_f1: f64,
    pub dev_f1: Option<f64>,
}

/// Pooled per-class counts from one evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassCounts {
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub micro_f1: f64,
    pub per_class: Vec<ClassCounts>,
    pub correct: usize,
    pub total: usize,
}

/// Argmax prediction for one document (first index wins ties).
pub fn predict(params: &ModelParams, cfg: &EncoderConfig, doc: &PreparedDoc) -> Result<usize> {
    let mut tape = Tape::new();
    let vars = ModelVars::register(&mut tape, params);
    let logits = forward_logits(&mut tape, &vars, cfg, &doc.input)?;
    let values = tape.values(logits);
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Micro-F1 over pooled TP/FP/FN counts, which for single-label
/// classification equals accuracy; the identity is asserted.
pub fn evaluate(
    params: &ModelParams,
    cfg: &EncoderConfig,
    docs: &[PreparedDoc],
) -> Result<EvalReport> {
    if docs.is_empty() {
        return Err(Error::Domain("evaluate over an empty dataset".into()));
    }
    let classes = params.classes();
    let mut per_class = vec![
        ClassCounts {
            true_pos: 0,
            false_pos: 0,
            false_neg: 0,
        };
        classes
    ];
    let mut correct = 0usize;
    for doc in docs {
        if doc.label >= classes {
            return Err(Error::Domain(format!(
                "label {} out of range for {} classes",
                doc.label, classes
            )));
        }
        let pred = predict(params, cfg, doc)?;
        if pred == doc.label {
            per_class[pred].true_pos += 1;
            correct += 1;
        } else {
            per_class[pred].false_pos += 1;
            per_class[doc.label].false_neg += 1;
        }
    }
    let tp: usize = per_class.iter().map(|c| c.true_pos).sum();
    let fp: usize = per_class.iter().map(|c| c.false_pos).sum();
    let fneg: usize = per_class.iter().map(|c| c.false_neg).sum();
    let micro_f1 = 2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fneg as f64);
    let accuracy = correct as f64 / docs.len() as f64;
    assert!(
        (micro_f1 - accuracy).abs() < 1e-12,
        "micro-F1 {micro_f1} must equal accuracy {accuracy} for single-label data"
    );
    Ok(EvalReport {
        micro_f1,
        per_class,
        correct,
        total: docs.len(),
    })
}

/// Seeded mini-batch loop: shuffle, batch, mean cross-entropy, backward,
/// Adam step; logs loss and micro-F1 per epoch.
pub fn train(
    params: &mut ModelParams,
    cfg: &EncoderConfig,
    train_docs: &[PreparedDoc],
    dev_docs: Option<&[PreparedDoc]>,
    opts: &TrainOptions,
) -> Result<Vec<EpochLog>> {
    if train_docs.is_empty() {
        return Err(Error::Domain("training set is empty".into()));
    }
    let mut adam = {
        let named = params.named_tensors();
        let refs: Vec<&Tensor> = named.iter().map(|(_, t)| *t).collect();
        AdamState::new(&refs, opts.lr)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..train_docs.len()).collect();
    let mut logs = Vec::with_capacity(opts.epochs);
    let mut best_dev = f64::NEG_INFINITY;
    let mut stale = 0usize;

    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(opts.batch_size) {
            params.zero_grads();
            let mut tape = Tape::new();
            let vars = ModelVars::register(&mut tape, params);
            let docs: Vec<&PreparedDoc> = batch.iter().map(|&i| &train_docs[i]).collect();
            let loss = batch_loss(&mut tape, &vars, cfg, &docs)?;
            tape.backward(loss)?;
            let flat = vars.flat();
            for (var, tensor) in flat.iter().zip(params.tensors_mut()) {
                tensor.accumulate_grad(tape.grad(*var))?;
            }
            adam.step(&mut params.tensors_mut())?;
            loss_sum += tape.scalar_value(loss)?;
            batches += 1;
        }
        let train_f1 = evaluate(params, cfg, train_docs)?.micro_f1;
        let dev_f1 = match dev_docs {
            Some(dev) if !dev.is_empty() => Some(evaluate(params, cfg, dev)?.micro_f1),
            _ => None,
        };
        logs.push(EpochLog {
            epoch,
            loss: loss_sum / batches as f64,
            train_f1,
            dev_f1,
        });
        if let (Some(patience), Some(dev)) = (opts.patience, dev_f1) {
            if dev > best_dev {
                best_dev = dev;
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    break;
                }
            }
        }
    }
    Ok(logs)
}

// ── Checkpoints ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Resolved settings a checkpoint needs to rebuild its model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub run: RunConfig,
    pub classes: usize,
    pub vocab_size: Option<usize>,
    pub external_dim: Option<usize>,
}

impl CheckpointConfig {
    pub fn effective_d(&self) -> usize {
        self.external_dim.unwrap_or(self.run.d)
    }

    /// Expected (name, shape) layout derived from the configuration.
    fn expected_tensors(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.effective_d();
        let mut out = Vec::new();
        if let Some(v) = self.vocab_size {
            out.push(("embedding".to_string(), vec![v, d]));
        }
        if self.run.embed_ff {
            out.push(("ff.w".to_string(), vec![d, d]));
            out.push(("ff.b".to_string(), vec![1, d]));
        }
        let layer_count = if self.run.aggregator == Aggregator::Simple {
            0
        } else {
            self.run.num_layers
        };
        for i in 0..layer_count {
            out.push((format!("layer{i}.w_atten"), vec![d, d]));
            out.push((format!("layer{i}.w_gcn"), vec![d, d]));
        }
        out.push(("head.w".to_string(), vec![d, self.classes]));
        out.push(("head.b".to_string(), vec![1, self.classes]));
        out
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: CheckpointConfig,
    pub vocab_ref: Option<String>,
    pub tensors: BTreeMap<String, TensorRecord>,
}

pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    config: &CheckpointConfig,
    vocab_ref: Option<String>,
) -> Result<()> {
    let tensors: BTreeMap<String, TensorRecord> = params
        .named_tensors()
        .into_iter()
        .map(|(name, t)| {
            (
                name,
                TensorRecord {
                    shape: t.shape().to_vec(),
                    values: t.values().to_vec(),
                },
            )
        })
        .collect();
    let checkpoint = Checkpoint {
        format: CHECKPOINT_FORMAT.to_string(),
        config: config.clone(),
        vocab_ref,
        tensors,
    };
    let json = serde_json::to_string(&checkpoint)
        .map_err(|e| Error::Schema(format!("checkpoint serialization failed: {e}")))?;
    fs::write(path, json)?;
    Ok(())
}

/// Loads and validates a checkpoint: format identifier, tensor presence,
/// and every shape against the embedded configuration.
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, CheckpointConfig, Option<String>)> {
    let content = fs::read_to_string(path)?;
    let checkpoint: Checkpoint = serde_json::from_str(&content).map_err(|e| Error::Format {
        line: e.line(),
        message: e.to_string(),
    })?;
    if checkpoint.format != CHECKPOINT_FORMAT {
        return Err(Error::Schema(format!(
            "unsupported checkpoint format {:?} (expected {CHECKPOINT_FORMAT:?})",
            checkpoint.format
        )));
    }
    let expected = checkpoint.config.expected_tensors();
    if checkpoint.tensors.len() != expected.len() {
        let got: Vec<&String> = checkpoint.tensors.keys().collect();
        return Err(Error::Schema(format!(
            "checkpoint has tensors {got:?} but the config expects {} entries",
            expected.len()
        )));
    }
    let mut loaded: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, shape) in &expected {
        let record = checkpoint
            .tensors
            .get(name)
            .ok_or_else(|| Error::Schema(format!("checkpoint is missing tensor {name:?}")))?;
        if &record.shape != shape {
            return Err(Error::Schema(format!(
                "tensor {name:?} has shape {:?} but the config requires {shape:?}",
                record.shape
            )));
        }
        let t = Tensor::new(record.shape.clone(), record.values.clone())?;
        if !t.is_finite() {
            return Err(Error::Numeric(format!("tensor {name:?} contains non-finite values")));
        }
        loaded.insert(name.clone(), t.trainable());
    }
    let mut take = |name: &str| loaded.remove(name).expect("validated above");
    let cfg = &checkpoint.config;
    let params = ModelParams {
        embedding: cfg.vocab_size.map(|_| take("embedding")),
        ff: cfg.run.embed_ff.then(|| FeedForward {
            w: take("ff.w"),
            b: take("ff.b"),
        }),
        layers: {
            let layer_count = if cfg.run.aggregator == Aggregator::Simple {
                0
            } else {
                cfg.run.num_layers
            };
            (0..layer_count)
                .map(|i| HiPoolLayerParams {
                    w_atten: take(&format!("layer{i}.w_atten")),
                    w_gcn: take(&format!("layer{i}.w_gcn")),
                })
                .collect()
        },
        head_w: take("head.w"),
        head_b: take("head.b"),
    };
    Ok((params, checkpoint.config, checkpoint.vocab_ref))
}
