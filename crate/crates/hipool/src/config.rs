//! One record holding every tunable, loadable from TOML with `key=value`
//! overrides, validated against module preconditions before any work starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{Aggregator, EncoderConfig};
use crate::error::{Error, Result};
use crate::graph::LowAdjacency;
use crate::model::PrepOptions;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Chunk length in tokens.
    pub chunk_len: usize,
    /// Overlap between consecutive chunks, in tokens.
    pub overlap: usize,
    /// Cluster stride; each pooling window spans 2p nodes.
    pub p: usize,
    pub num_layers: usize,
    /// Feature dimension (ignored for imported embeddings, which carry their own).
    pub d: usize,
    /// Fixed chunk count every document is truncated or padded to.
    pub max_node: usize,
    pub aggregator: Aggregator,
    pub low_adjacency: LowAdjacency,
    pub attention_softmax: bool,
    /// Feed-forward transform after the chunk mean.
    pub embed_ff: bool,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Train/dev/test fractions.
    pub split: [f64; 3],
    /// Early-stop patience on dev micro-F1; absent = fixed epoch count.
    pub patience: Option<usize>,
    /// Head truncation of the token stream before chunking.
    pub max_tokens: Option<usize>,
    pub corpus: Option<PathBuf>,
    pub external_embeddings: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            chunk_len: 300,
            overlap: 150,
            p: 2,
            num_layers: 2,
            d: 32,
            max_node: 10,
            aggregator: Aggregator::Sum,
            low_adjacency: LowAdjacency::Chain,
            attention_softmax: false,
            embed_ff: false,
            lr: 0.01,
            epochs: 10,
            batch_size: 16,
            seed: 42,
            split: [0.8, 0.1, 0.1],
            patience: Some(3),
            max_tokens: None,
            corpus: None,
            external_embeddings: None,
            out_dir: None,
        }
    }
}

impl RunConfig {
    /// Small-model settings for gradient checking: 8 nodes, d = 8, short
    /// chunks, everything else at the standard defaults.
    pub fn small_gradcheck() -> Self {
        RunConfig {
            chunk_len: 8,
            overlap: 4,
            d: 8,
            max_node: 8,
            ..Default::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let content = std::fs::read_to_string(path)?;
        toml::from_str(&content)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment.split_once('=').ok_or_else(|| {
            Error::Config(format!("override {assignment:?} is not of the form key=value"))
        })?;
        let bad = |e: &dyn std::fmt::Display| Error::Config(format!("override {key}: {e}"));
        match key {
            "chunk_len" => self.chunk_len = value.parse().map_err(|e| bad(&e))?,
            "overlap" => self.overlap = value.parse().map_err(|e| bad(&e))?,
            "p" => self.p = value.parse().map_err(|e| bad(&e))?,
            "num_layers" => self.num_layers = value.parse().map_err(|e| bad(&e))?,
            "d" => self.d = value.parse().map_err(|e| bad(&e))?,
            "max_node" => self.max_node = value.parse().map_err(|e| bad(&e))?,
            "aggregator" => self.aggregator = value.parse()?,
            "low_adjacency" => {
                self.low_adjacency = match value {
                    "chain" => LowAdjacency::Chain,
                    "complete" => LowAdjacency::Complete,
                    other => {
                        return Err(Error::Config(format!(
                            "unknown low_adjacency {other:?} (expected chain|complete)"
                        )))
                    }
                }
            }
            "attention_softmax" => self.attention_softmax = value.parse().map_err(|e| bad(&e))?,
            "embed_ff" => self.embed_ff = value.parse().map_err(|e| bad(&e))?,
            "lr" => self.lr = value.parse().map_err(|e| bad(&e))?,
            "epochs" => self.epochs = value.parse().map_err(|e| bad(&e))?,
            "batch_size" => self.batch_size = value.parse().map_err(|e| bad(&e))?,
            "seed" => self.seed = value.parse().map_err(|e| bad(&e))?,
            "split" => {
                let parts: Vec<f64> = value
                    .split(',')
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| bad(&e))?;
                if parts.len() != 3 {
                    return Err(Error::Config("split needs three comma-separated ratios".into()));
                }
                self.split = [parts[0], parts[1], parts[2]];
            }
            "patience" => {
                self.patience = match value {
                    "none" => None,
                    v => Some(v.parse().map_err(|e| bad(&e))?),
                }
            }
            "max_tokens" => {
                self.max_tokens = match value {
                    "none" => None,
                    v => Some(v.parse().map_err(|e| bad(&e))?),
                }
            }
            "corpus" => self.corpus = Some(PathBuf::from(value)),
            "external_embeddings" => self.external_embeddings = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Checks every module precondition, listing all violated fields at once.
    pub fn validate(&self) -> Result<()> {
        let mut violations = Vec::new();
        if self.chunk_len < 1 {
            violations.push("chunk_len (must be ≥ 1)".to_string());
        }
        if self.chunk_len >= 1 && self.overlap >= self.chunk_len {
            violations.push(format!(
                "overlap (must be < chunk_len, got {} vs {})",
                self.overlap, self.chunk_len
            ));
        }
        if self.p < 1 {
            violations.push("p (must be ≥ 1)".to_string());
        }
        if self.num_layers < 1 {
            violations.push("num_layers (must be ≥ 1)".to_string());
        }
        if self.d < 1 {
            violations.push("d (must be ≥ 1)".to_string());
        }
        if self.max_node < 1 {
            violations.push("max_node (must be ≥ 1)".to_string());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            violations.push(format!("lr (must be finite and ≥ 0, got {})", self.lr));
        }
        if self.epochs < 1 {
            violations.push("epochs (must be ≥ 1)".to_string());
        }
        if self.batch_size < 1 {
            violations.push("batch_size (must be ≥ 1)".to_string());
        }
        let sum: f64 = self.split.iter().sum();
        if self.split.iter().any(|r| *r < 0.0) || (sum - 1.0).abs() > 1e-9 {
            violations.push(format!("split (ratios must be ≥ 0 and sum to 1, got {:?})", self.split));
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid fields: {}", violations.join(", "))))
        }
    }

    pub fn encoder_config(&self, effective_d: usize) -> EncoderConfig {
        EncoderConfig {
            p: self.p,
            num_layers: self.num_layers,
            d: effective_d,
            aggregator: self.aggregator,
            low_adjacency: self.low_adjacency,
            attention_softmax: self.attention_softmax,
        }
    }

    pub fn prep_options(&self) -> PrepOptions {
        PrepOptions {
            chunk_len: self.chunk_len,
            overlap: self.overlap,
            max_node: self.max_node,
            max_tokens: self.max_tokens,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_mirror_the_standard_setup() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.chunk_len, 300);
        assert_eq!(cfg.overlap, 150);
        assert_eq!(cfg.p, 2);
        assert_eq!(cfg.num_layers, 2);
        assert!(cfg.max_node >= 8 && cfg.max_node <= 15);
    }

    #[test]
    fn overrides_update_fields_and_reject_junk() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("d=8").unwrap();
        cfg.apply_override("aggregator=std").unwrap();
        cfg.apply_override("split=0.5,0.25,0.25").unwrap();
        cfg.apply_override("patience=none").unwrap();
        assert_eq!(cfg.d, 8);
        assert_eq!(cfg.aggregator, Aggregator::Std);
        assert_eq!(cfg.split, [0.5, 0.25, 0.25]);
        assert_eq!(cfg.patience, None);
        assert!(cfg.apply_override("nope=1").is_err());
        assert!(cfg.apply_override("d").is_err());
        assert!(cfg.apply_override("aggregator=median").is_err());
    }

    #[test]
    fn validation_lists_every_violated_field() {
        let mut cfg = RunConfig::default();
        cfg.overlap = 300;
        cfg.epochs = 0;
        cfg.lr = f64::NAN;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("overlap"), "{msg}");
        assert!(msg.contains("epochs"), "{msg}");
        assert!(msg.contains("lr"), "{msg}");
    }

    #[test]
    fn toml_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "d = 16\nepochs = 3\naggregator = \"mean\"\n").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.d, 16);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.aggregator, Aggregator::Mean);
        // Unknown keys are configuration errors.
        std::fs::write(&path, "unknown_key = 1\n").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(Error::Config(_))));
    }
}
