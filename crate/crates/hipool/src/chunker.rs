//! Text to overlapping fixed-length token-id chunks.
//!
//! Tokens are lowercased maximal runs of alphanumeric characters; everything
//! else separates. Ids 0 and 1 are reserved for PAD and UNK.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const RESERVED_IDS: usize = 2;

/// Frozen token → id map with PAD = 0 and UNK = 1 always present.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    ids: HashMap<String, usize>,
    tokens: Vec<String>, // index = id − RESERVED_IDS
}

impl Vocabulary {
    /// Builds a vocabulary from texts, assigning ids in first-appearance order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut vocab = Vocabulary {
            ids: HashMap::new(),
            tokens: Vec::new(),
        };
        for text in texts {
            for word in words(text) {
                vocab.insert(word);
            }
        }
        vocab
    }

    fn insert(&mut self, token: String) {
        if !self.ids.contains_key(&token) {
            let id = RESERVED_IDS + self.tokens.len();
            self.ids.insert(token.clone(), id);
            self.tokens.push(token);
        }
    }

    /// Total id count including PAD and UNK.
    pub fn size(&self) -> usize {
        RESERVED_IDS + self.tokens.len()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        match id {
            PAD_ID => Some("<pad>"),
            UNK_ID => Some("<unk>"),
            _ => self.tokens.get(id - RESERVED_IDS).map(String::as_str),
        }
    }

    /// One token per line; line k (0-based) holds the token with id k + 2.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for token in &self.tokens {
            out.push_str(token);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let content = fs::read_to_string(path)?;
        let mut vocab = Vocabulary {
            ids: HashMap::new(),
            tokens: Vec::new(),
        };
        for (idx, line) in content.lines().enumerate() {
            if line.is_empty() {
                return Err(Error::Format {
                    line: idx + 1,
                    message: "empty vocabulary entry".into(),
                });
            }
            if vocab.ids.contains_key(line) {
                return Err(Error::Format {
                    line: idx + 1,
                    message: format!("duplicate vocabulary entry {line:?}"),
                });
            }
            vocab.insert(line.to_string());
        }
        Ok(vocab)
    }
}

/// Lowercased alphanumeric word split shared by tokenization and corpus
/// statistics. Punctuation is dropped, never emitted as a token.
pub fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Maps text to token ids; out-of-vocabulary words become UNK.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<usize> {
    words(text).iter().map(|w| vocab.id(w)).collect()
}

/// Ordered fixed-length chunks with a shared overlap window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkSequence {
    chunks: Vec<Vec<usize>>,
    chunk_len: usize,
    overlap: usize,
    n_real: usize,
}

impl ChunkSequence {
    pub fn chunks(&self) -> &[Vec<usize>] {
        &self.chunks
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn chunk_len(&self) -> usize {
        self.chunk_len
    }

    pub fn overlap(&self) -> usize {
        self.overlap
    }

    /// Count of source (non-PAD) token positions covered by the chunks.
    pub fn n_real(&self) -> usize {
        self.n_real
    }
}

/// Windows of length `chunk_len` starting at multiples of
/// `chunk_len − overlap`; generation stops once a window reaches the end of
/// the token sequence. The final window is PAD-completed. Empty input yields
/// a single all-PAD chunk.
pub fn chunk(tokens: &[usize], chunk_len: usize, overlap: usize) -> Result<ChunkSequence> {
    if chunk_len < 1 {
        return Err(Error::Config(format!("chunk length must be ≥ 1, got {chunk_len}")));
    }
    if overlap >= chunk_len {
        return Err(Error::Config(format!(
            "overlap ({overlap}) must be smaller than chunk length ({chunk_len})"
        )));
    }
    let mut chunks = Vec::new();
    if tokens.is_empty() {
        chunks.push(vec![PAD_ID; chunk_len]);
        return Ok(ChunkSequence {
            chunks,
            chunk_len,
            overlap,
            n_real: 0,
        });
    }
    let stride = chunk_len - overlap;
    let mut start = 0;
    loop {
        let mut window: Vec<usize> = tokens[start..tokens.len().min(start + chunk_len)].to_vec();
        window.resize(chunk_len, PAD_ID);
        chunks.push(window);
        if start + chunk_len >= tokens.len() {
            break;
        }
        start += stride;
    }
    Ok(ChunkSequence {
        chunks,
        chunk_len,
        overlap,
        n_real: tokens.len(),
    })
}

/// Keeps the first `max_node` chunks and pads with all-PAD chunks so the
/// output always has exactly `max_node` entries.
pub fn cap_chunks(cs: &ChunkSequence, max_node: usize) -> Result<ChunkSequence> {
    if max_node < 1 {
        return Err(Error::Config(format!("max_node must be ≥ 1, got {max_node}")));
    }
    let mut chunks: Vec<Vec<usize>> = cs.chunks.iter().take(max_node).cloned().collect();
    let kept = chunks.len();
    while chunks.len() < max_node {
        chunks.push(vec![PAD_ID; cs.chunk_len]);
    }
    let n_real = if kept < cs.chunks.len() {
        // Head truncation: only positions covered by the kept windows remain.
        let stride = cs.chunk_len - cs.overlap;
        cs.n_real.min((kept - 1) * stride + cs.chunk_len)
    } else {
        cs.n_real
    };
    Ok(ChunkSequence {
        chunks,
        chunk_len: cs.chunk_len,
        overlap: cs.overlap,
        n_real,
    })
}

/// Closed form for the number of windows over `n_tokens` tokens.
pub fn chunk_count(n_tokens: usize, chunk_len: usize, overlap: usize) -> usize {
    if n_tokens <= chunk_len {
        1
    } else {
        let stride = chunk_len - overlap;
        1 + (n_tokens - chunk_len).div_ceil(stride)
    }
}
