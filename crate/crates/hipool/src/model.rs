//! Full classification model: chunk embedder (trainable table or imported
//! vectors), stacked pooling layers, and a linear head, with parameter
//! initialization, tape registration, and input preparation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chunker::{cap_chunks, chunk, tokenize, ChunkSequence, Vocabulary};
use crate::data::LabeledCorpus;
use crate::embedder::{embed_chunks, ExternalEmbeddings};
use crate::encoder::{encode, EncoderConfig, HiPoolLayerParams, LayerVars};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Optional feed-forward transform applied after the chunk mean.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub w: Tensor,
    pub b: Tensor,
}

/// Every trainable tensor of the model, each with its gradient slot.
#[derive(Debug, Clone)]
pub struct ModelParams {
    /// vocab_size × d table; absent when embeddings are imported.
    pub embedding: Option<Tensor>,
    pub ff: Option<FeedForward>,
    pub layers: Vec<HiPoolLayerParams>,
    /// d × classes.
    pub head_w: Tensor,
    /// 1 × classes.
    pub head_b: Tensor,
}

impl ModelParams {
    /// Seeded initialization: weights uniform in (−1/√d, 1/√d), biases zero.
    pub fn init(
        cfg: &EncoderConfig,
        vocab_size: Option<usize>,
        classes: usize,
        embed_ff: bool,
        seed: u64,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("classifier needs ≥ 2 classes, got {classes}")));
        }
        let d = cfg.d;
        let bound = 1.0 / (d as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |rows: usize, cols: usize| -> Tensor {
            let values: Vec<f64> = (0..rows * cols)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            Tensor::matrix(rows, cols, values).unwrap().trainable()
        };
        let embedding = vocab_size.map(|v| uniform(v, d));
        let ff = embed_ff.then(|| FeedForward {
            w: uniform(d, d),
            b: Tensor::zeros(1, d).trainable(),
        });
        let layer_count = if cfg.aggregator == crate::encoder::Aggregator::Simple {
            0
        } else {
            cfg.num_layers
        };
        let layers = (0..layer_count)
            .map(|_| HiPoolLayerParams {
                w_atten: uniform(d, d),
                w_gcn: uniform(d, d),
            })
            .collect();
        Ok(ModelParams {
            embedding,
            ff,
            layers,
            head_w: uniform(d, classes),
            head_b: Tensor::zeros(1, classes).trainable(),
        })
    }

    pub fn classes(&self) -> usize {
        self.head_b.cols()
    }

    /// Stable (name, tensor) listing; the order defines checkpoint layout,
    /// optimizer state alignment, and gradient-check parameter order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        if let Some(e) = &self.embedding {
            out.push(("embedding".to_string(), e));
        }
        if let Some(ff) = &self.ff {
            out.push(("ff.w".to_string(), &ff.w));
            out.push(("ff.b".to_string(), &ff.b));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.w_atten"), &layer.w_atten));
            out.push((format!("layer{i}.w_gcn"), &layer.w_gcn));
        }
        out.push(("head.w".to_string(), &self.head_w));
        out.push(("head.b".to_string(), &self.head_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        if let Some(e) = &mut self.embedding {
            out.push(e);
        }
        if let Some(ff) = &mut self.ff {
            out.push(&mut ff.w);
            out.push(&mut ff.b);
        }
        for layer in &mut self.layers {
            out.push(&mut layer.w_atten);
            out.push(&mut layer.w_gcn);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn zero_grads(&mut self) {
        for t in self.tensors_mut() {
            t.zero_grad();
        }
    }
}

/// Tape handles for one registration of the parameters.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub embedding: Option<Var>,
    pub ff: Option<(Var, Var)>,
    pub layers: Vec<LayerVars>,
    pub head_w: Var,
    pub head_b: Var,
}

impl ModelVars {
    /// Registers every parameter on the tape, in `named_tensors` order.
    pub fn register(tape: &mut Tape, params: &ModelParams) -> ModelVars {
        ModelVars {
            embedding: params.embedding.as_ref().map(|e| tape.leaf(e)),
            ff: params.ff.as_ref().map(|f| (tape.leaf(&f.w), tape.leaf(&f.b))),
            layers: params
                .layers
                .iter()
                .map(|l| LayerVars {
                    w_atten: tape.leaf(&l.w_atten),
                    w_gcn: tape.leaf(&l.w_gcn),
                })
                .collect(),
            head_w: tape.leaf(&params.head_w),
            head_b: tape.leaf(&params.head_b),
        }
    }

    /// Rebuilds the handle structure from a flat var slice laid out like
    /// `named_tensors` (used by the gradient checker).
    pub fn from_flat(template: &ModelParams, vars: &[Var]) -> ModelVars {
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("var slice shorter than parameter list");
        ModelVars {
            embedding: template.embedding.as_ref().map(|_| next()),
            ff: template.ff.as_ref().map(|_| (next(), next())),
            layers: template.layers.iter().map(|_| LayerVars {
                w_atten: next(),
                w_gcn: next(),
            }).collect(),
            head_w: next(),
            head_b: next(),
        }
    }

    /// Flat var listing in `named_tensors` order.
    pub fn flat(&self) -> Vec<Var> {
        let mut out = Vec::new();
        if let Some(e) = self.embedding {
            out.push(e);
        }
        if let Some((w, b)) = self.ff {
            out.push(w);
            out.push(b);
        }
        for l in &self.layers {
            out.push(l.w_atten);
            out.push(l.w_gcn);
        }
        out.push(self.head_w);
        out.push(self.head_b);
        out
    }
}

/// One document's model input.
#[derive(Debug, Clone)]
pub enum DocInput {
    Tokens(ChunkSequence),
    External(Tensor),
}

#[derive(Debug, Clone)]
pub struct PreparedDoc {
    pub id: String,
    pub input: DocInput,
    pub label: usize,
}

/// Chunking parameters for input preparation.
#[derive(Debug, Clone, Copy)]
pub struct PrepOptions {
    pub chunk_len: usize,
    pub overlap: usize,
    pub max_node: usize,
    /// Head truncation of the token stream before chunking.
    pub max_tokens: Option<usize>,
}

/// Tokenizes, optionally truncates, chunks, and pads every document to
/// exactly `max_node` chunks.
pub fn prepare_docs(
    corpus: &LabeledCorpus,
    vocab: &Vocabulary,
    opts: &PrepOptions,
) -> Result<Vec<PreparedDoc>> {
    corpus
        .documents
        .iter()
        .map(|doc| {
            let mut ids = tokenize(&doc.text, vocab);
            if let Some(cap) = opts.max_tokens {
                ids.truncate(cap);
            }
            let cs = chunk(&ids, opts.chunk_len, opts.overlap)?;
            let capped = cap_chunks(&cs, opts.max_node)?;
            Ok(PreparedDoc {
                id: doc.id.clone(),
                input: DocInput::Tokens(capped),
                label: doc.label,
            })
        })
        .collect()
}

/// Pairs each document with its imported chunk matrix, truncated or
/// zero-padded to exactly `max_node` rows.
pub fn prepare_external(
    corpus: &LabeledCorpus,
    embeddings: &ExternalEmbeddings,
    max_node: usize,
) -> Result<Vec<PreparedDoc>> {
    corpus
        .documents
        .iter()
        .map(|doc| {
            let m = embeddings.get(&doc.id).ok_or_else(|| {
                Error::Schema(format!("no external embeddings for doc {:?}", doc.id))
            })?;
            let d = m.cols();
            let rows = m.rows().min(max_node);
            let mut values = m.values()[..rows * d].to_vec();
            values.resize(max_node * d, 0.0);
            Ok(PreparedDoc {
                id: doc.id.clone(),
                input: DocInput::External(Tensor::matrix(max_node, d, values)?),
                label: doc.label,
            })
        })
        .collect()
}

/// Embeds the input, applies the optional feed-forward transform, encodes,
/// and projects to class logits (1 × classes).
pub fn forward_logits(
    tape: &mut Tape,
    vars: &ModelVars,
    cfg: &EncoderConfig,
    input: &DocInput,
) -> Result<Var> {
    let mut x = match input {
        DocInput::Tokens(cs) => {
            let table = vars.embedding.ok_or_else(|| {
                Error::Config("token input requires an embedding table".to_string())
            })?;
            embed_chunks(tape, table, cs)?
        }
        DocInput::External(m) => tape.constant(m),
    };
    if let Some((w, b)) = vars.ff {
        let n = tape.shape(x)[0];
        let ones = tape.constant(&Tensor::matrix(n, 1, vec![1.0; n])?);
        let bias = tape.matmul(ones, b)?;
        let lin = tape.matmul(x, w)?;
        let shifted = tape.add(lin, bias)?;
        x = tape.relu(shifted);
    }
    let doc_vec = encode(tape, x, cfg, &vars.layers)?;
    let proj = tape.matmul(doc_vec, vars.head_w)?;
    tape.add(proj, vars.head_b)
}

/// Mean cross-entropy over a batch of documents.
pub fn batch_loss(
    tape: &mut Tape,
    vars: &ModelVars,
    cfg: &EncoderConfig,
    docs: &[&PreparedDoc],
) -> Result<Var> {
    let mut losses = Vec::with_capacity(docs.len());
    for doc in docs {
        let logits = forward_logits(tape, vars, cfg, &doc.input)?;
        losses.push(tape.cross_entropy(logits, doc.label)?);
    }
    tape.mean_scalars(&losses)
}

/// Finite-difference check of the whole model's gradients on the given
/// documents. Returns the worst relative error over every parameter entry.
pub fn model_grad_check(
    params: &ModelParams,
    cfg: &EncoderConfig,
    docs: &[PreparedDoc],
    eps: f64,
) -> Result<crate::tensor::GradCheckReport> {
    let tensors: Vec<Tensor> = params
        .named_tensors()
        .into_iter()
        .map(|(_, t)| t.clone())
        .collect();
    let refs: Vec<&PreparedDoc> = docs.iter().collect();
    crate::tensor::grad_check_report(
        &tensors,
        |tape, vars| {
            let model_vars = ModelVars::from_flat(params, vars);
            batch_loss(tape, &model_vars, cfg, &refs)
        },
        eps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_longrange;
    use crate::encoder::Aggregator;

    fn small_setup() -> (EncoderConfig, Vocabulary, Vec<PreparedDoc>) {
        let cfg = EncoderConfig {
            d: 8,
            ..Default::default()
        };
        let corpus = synth_longrange(4, 2, 2, 6, 11).unwrap();
        let vocab = Vocabulary::build(corpus.documents.iter().map(|d| d.text.as_str()));
        let docs = prepare_docs(
            &corpus,
            &vocab,
            &PrepOptions {
                chunk_len: 6,
                overlap: 3,
                max_node: 4,
                max_tokens: None,
            },
        )
        .unwrap();
        (cfg, vocab, docs)
    }

    #[test]
    fn forward_produces_class_logits() {
        let (cfg, vocab, docs) = small_setup();
        let params = ModelParams::init(&cfg, Some(vocab.size()), 2, false, 3).unwrap();
        let mut tape = Tape::new();
        let vars = ModelVars::register(&mut tape, &params);
        let logits = forward_logits(&mut tape, &vars, &cfg, &docs[0].input).unwrap();
        assert_eq!(tape.shape(logits), &[1, 2]);
        assert!(tape.values(logits).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let (cfg, vocab, docs) = small_setup();
        let params = ModelParams::init(&cfg, Some(vocab.size()), 2, false, 5).unwrap();
        let report = model_grad_check(&params, &cfg, &docs[..2], 1e-5).unwrap();
        assert!(
            report.max_rel_error < 1e-4,
            "end-to-end grad error {}",
            report.max_rel_error
        );
    }

    #[test]
    fn feed_forward_path_also_differentiates() {
        let (cfg, vocab, docs) = small_setup();
        let params = ModelParams::init(&cfg, Some(vocab.size()), 2, true, 5).unwrap();
        assert!(params.ff.is_some());
        let report = model_grad_check(&params, &cfg, &docs[..1], 1e-5).unwrap();
        assert!(
            report.max_rel_error < 1e-4,
            "ff grad error {}",
            report.max_rel_error
        );
    }

    #[test]
    fn simple_mode_has_no_layer_parameters() {
        let cfg = EncoderConfig {
            d: 8,
            aggregator: Aggregator::Simple,
            ..Default::default()
        };
        let params = ModelParams::init(&cfg, Some(10), 2, false, 0).unwrap();
        assert!(params.layers.is_empty());
        let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["embedding", "head.w", "head.b"]);
    }

    #[test]
    fn external_inputs_are_padded_to_max_node() {
        use std::collections::BTreeMap;
        let corpus = crate::data::LabeledCorpus {
            documents: vec![crate::data::Document {
                id: "a".into(),
                text: String::new(),
                label: 0,
            }],
            class_count: 2,
            name: "ext".into(),
        };
        let mut docs = BTreeMap::new();
        docs.insert("a".to_string(), Tensor::from_rows(&vec![vec![1.0, 2.0]; 2]).unwrap());
        let ext = ExternalEmbeddings::from_docs(docs).unwrap();
        let prepared = prepare_external(&corpus, &ext, 4).unwrap();
        match &prepared[0].input {
            DocInput::External(m) => {
                assert_eq!(m.shape(), &[4, 2]);
                assert_eq!(&m.values()[4..], &[0.0, 0.0, 0.0, 0.0]);
            }
            other => panic!("expected external input, got {other:?}"),
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = EncoderConfig {
            d: 8,
            ..Default::default()
        };
        let a = ModelParams::init(&cfg, Some(12), 3, false, 42).unwrap();
        let b = ModelParams::init(&cfg, Some(12), 3, false, 42).unwrap();
        for ((_, x), (_, y)) in a.named_tensors().iter().zip(b.named_tensors()) {
            assert_eq!(x.values(), y.values());
        }
    }
}
