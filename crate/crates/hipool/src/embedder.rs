//! Chunk-embedding production: a trainable mean-of-token-embeddings encoder,
//! plus import of precomputed per-chunk vectors from disk.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::chunker::{ChunkSequence, PAD_ID};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Embeds each chunk as the mean of its non-PAD token embedding rows; an
/// all-PAD chunk maps to the PAD row itself. Fully differentiable into the
/// table, and exactly invariant under permutation of a chunk's tokens.
pub fn embed_chunks(tape: &mut Tape, table: Var, cs: &ChunkSequence) -> Result<Var> {
    let vocab_size = tape.shape(table)[0];
    let mut groups: Vec<Vec<usize>> = Vec::with_capacity(cs.len());
    for chunk in cs.chunks() {
        if let Some(&bad) = chunk.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::Domain(format!(
                "token id {bad} out of range for embedding table with {vocab_size} rows"
            )));
        }
        let real: Vec<usize> = chunk.iter().copied().filter(|&t| t != PAD_ID).collect();
        groups.push(if real.is_empty() { vec![PAD_ID] } else { real });
    }
    tape.gather_mean_rows(table, &groups)
}

/// Precomputed doc-id → (n_chunks × d) chunk-embedding matrices.
#[derive(Debug, Clone)]
pub struct ExternalEmbeddings {
    dim: usize,
    docs: BTreeMap<String, Tensor>,
}

impl ExternalEmbeddings {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Tensor> {
        self.docs.get(id)
    }

    pub fn from_docs(docs: BTreeMap<String, Tensor>) -> Result<Self> {
        let dim = match docs.values().next() {
            Some(t) => t.cols(),
            None => return Err(Error::Schema("external embeddings are empty".into())),
        };
        for (id, t) in &docs {
            if t.cols() != dim {
                return Err(Error::Schema(format!(
                    "doc {id:?} has dimension {} but the set declares {dim}",
                    t.cols()
                )));
            }
        }
        Ok(ExternalEmbeddings { dim, docs })
    }
}

#[derive(Serialize, Deserialize)]
struct ExternalRecord {
    id: String,
    chunks: Vec<Vec<f64>>,
}

/// Reads line-delimited records `{"id": …, "chunks": [[…], …]}`.
pub fn load_external(path: &Path) -> Result<ExternalEmbeddings> {
    let content = fs::read_to_string(path)?;
    let mut docs: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut dim: Option<usize> = None;
    for (idx, line) in content.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: ExternalRecord = serde_json::from_str(line).map_err(|e| Error::Format {
            line: line_no,
            message: e.to_string(),
        })?;
        if record.chunks.is_empty() {
            return Err(Error::Schema(format!("doc {:?} has no chunks", record.id)));
        }
        let d = record.chunks[0].len();
        if d == 0 {
            return Err(Error::Schema(format!("doc {:?} has zero-width rows", record.id)));
        }
        if record.chunks.iter().any(|row| row.len() != d) {
            return Err(Error::Schema(format!("ragged rows in doc {:?}", record.id)));
        }
        match dim {
            None => dim = Some(d),
            Some(expect) if expect != d => {
                return Err(Error::Schema(format!(
                    "doc {:?} has dimension {d} but earlier docs have {expect}",
                    record.id
                )));
            }
            _ => {}
        }
        if docs.contains_key(&record.id) {
            return Err(Error::Schema(format!("duplicate doc id {:?}", record.id)));
        }
        let rows = record.chunks.len();
        let values: Vec<f64> = record.chunks.into_iter().flatten().collect();
        docs.insert(record.id, Tensor::matrix(rows, d, values)?);
    }
    match dim {
        Some(dim) => Ok(ExternalEmbeddings { dim, docs }),
        None => Err(Error::Schema(format!("no records in {}", path.display()))),
    }
}

/// Writes records in sorted doc-id order, one JSON object per line.
pub fn save_external(path: &Path, embeddings: &ExternalEmbeddings) -> Result<()> {
    let mut file = fs::File::create(path)?;
    for (id, t) in &embeddings.docs {
        let chunks: Vec<Vec<f64>> = (0..t.rows())
            .map(|i| t.values()[i * t.cols()..(i + 1) * t.cols()].to_vec())
            .collect();
        let record = ExternalRecord {
            id: id.clone(),
            chunks,
        };
        serde_json::to_writer(&mut file, &record)
            .map_err(|e| Error::Schema(format!("serialization failed: {e}")))?;
        file.write_all(b"\n")?;
    }
    Ok(())
}
