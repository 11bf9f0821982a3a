//! Corpus ingestion, statistics, length filtering, splits, and a synthetic
//! long-range benchmark generator.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chunker::words;
use crate::error::{Error, Result};

pub const SYNTH_FILLER_VOCAB: usize = 50;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledCorpus {
    pub documents: Vec<Document>,
    pub class_count: usize,
    pub name: String,
}

impl LabeledCorpus {
    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }
}

#[derive(Debug, Deserialize)]
struct RawDocument {
    id: Option<String>,
    text: String,
    label: u64,
}

#[derive(Serialize)]
struct RawDocumentOut<'a> {
    id: &'a str,
    text: &'a str,
    label: usize,
}

/// Reads line-delimited `{"id"?, "text", "label"}` records. Missing ids are
/// assigned from the (1-based) line number. When `declared_classes` is given,
/// labels are validated against it; otherwise the class count is inferred as
/// max label + 1.
pub fn load_corpus(path: &Path, declared_classes: Option<usize>) -> Result<LabeledCorpus> {
    let content = fs::read_to_string(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".to_string());
    let mut documents = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut max_label = 0usize;
    for (idx, line) in content.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawDocument = serde_json::from_str(line).map_err(|e| Error::Format {
            line: line_no,
            message: e.to_string(),
        })?;
        let label = raw.label as usize;
        if let Some(classes) = declared_classes {
            if label >= classes {
                return Err(Error::Schema(format!(
                    "label {label} at line {line_no} exceeds declared class count {classes}"
                )));
            }
        }
        max_label = max_label.max(label);
        let id = raw.id.unwrap_or_else(|| line_no.to_string());
        if !seen.insert(id.clone()) {
            return Err(Error::Schema(format!("duplicate doc id {id:?} at line {line_no}")));
        }
        documents.push(Document {
            id,
            text: raw.text,
            label,
        });
    }
    if documents.is_empty() {
        return Err(Error::Schema(format!("no documents in {}", path.display())));
    }
    Ok(LabeledCorpus {
        documents,
        class_count: declared_classes.unwrap_or(max_label + 1),
        name,
    })
}

pub fn save_corpus(path: &Path, corpus: &LabeledCorpus) -> Result<()> {
    let mut file = fs::File::create(path)?;
    for doc in &corpus.documents {
        let raw = RawDocumentOut {
            id: &doc.id,
            text: &doc.text,
            label: doc.label,
        };
        serde_json::to_writer(&mut file, &raw)
            .map_err(|e| Error::Schema(format!("serialization failed: {e}")))?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

/// Token-length summary over a corpus. Median is the lower-middle order
/// statistic; the 95th percentile is nearest-rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub mean: f64,
    pub max: usize,
    pub min: usize,
    pub median: usize,
    pub p95: usize,
    pub total: usize,
    pub classes: usize,
}

pub fn stats(corpus: &LabeledCorpus) -> Result<CorpusStats> {
    if corpus.is_empty() {
        return Err(Error::Domain("stats over an empty corpus".into()));
    }
    let mut lengths: Vec<usize> = corpus
        .documents
        .iter()
        .map(|d| words(&d.text).len())
        .collect();
    lengths.sort_unstable();
    let n = lengths.len();
    let mean = lengths.iter().sum::<usize>() as f64 / n as f64;
    let p95_rank = (0.95 * n as f64).ceil() as usize;
    Ok(CorpusStats {
        mean,
        max: lengths[n - 1],
        min: lengths[0],
        median: lengths[(n - 1) / 2],
        p95: lengths[p95_rank.max(1) - 1],
        total: n,
        classes: corpus.class_count,
    })
}

/// Keeps documents strictly longer than `min_tokens`.
pub fn filter_by_length(corpus: &LabeledCorpus, min_tokens: usize) -> LabeledCorpus {
    LabeledCorpus {
        documents: corpus
            .documents
            .iter()
            .filter(|d| words(&d.text).len() > min_tokens)
            .cloned()
            .collect(),
        class_count: corpus.class_count,
        name: corpus.name.clone(),
    }
}

#[derive(Debug, Clone)]
pub struct SplitCorpora {
    pub train: LabeledCorpus,
    pub dev: LabeledCorpus,
    pub test: LabeledCorpus,
}

/// Seeded shuffle then contiguous cut. Dev and test sizes are
/// round(N·ratio); the remainder goes to train. Empty partitions are legal —
/// callers may warn, not fail.
pub fn split(corpus: &LabeledCorpus, ratios: [f64; 3], seed: u64) -> Result<SplitCorpora> {
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios must sum to 1, got {ratios:?}")));
    }
    if ratios.iter().any(|r| *r < 0.0) {
        return Err(Error::Config(format!("split ratios must be non-negative, got {ratios:?}")));
    }
    let n = corpus.len();
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);

    let dev_n = ((n as f64 * ratios[1]).round() as usize).min(n);
    let test_n = ((n as f64 * ratios[2]).round() as usize).min(n - dev_n);
    let train_n = n - dev_n - test_n;

    let take = |range: std::ops::Range<usize>| -> LabeledCorpus {
        LabeledCorpus {
            documents: indices[range]
                .iter()
                .map(|&i| corpus.documents[i].clone())
                .collect(),
            class_count: corpus.class_count,
            name: corpus.name.clone(),
        }
    };
    Ok(SplitCorpora {
        train: take(0..train_n),
        dev: take(train_n..train_n + dev_n),
        test: take(train_n + dev_n..n),
    })
}

/// Generates documents whose label is decodable only by combining two marker
/// tokens planted far apart: label = (i + j) mod n_classes for markers
/// `mka<i>` (near the start) and `mkb<j>` (near the end). Marker positions
/// are at least 1.5 chunk-lengths apart, so no window of length `chunk_len`
/// ever contains both, and neither marker alone determines the label.
pub fn synth_longrange(
    n_docs: usize,
    n_classes: usize,
    chunks_per_doc: usize,
    chunk_len: usize,
    seed: u64,
) -> Result<LabeledCorpus> {
    if n_docs < 1 {
        return Err(Error::Domain(format!("need at least one document, got {n_docs}")));
    }
    if n_classes < 2 {
        return Err(Error::Domain(format!("need at least two classes, got {n_classes}")));
    }
    if chunks_per_doc < 2 {
        return Err(Error::Domain(format!(
            "need at least two chunks per document, got {chunks_per_doc}"
        )));
    }
    if chunk_len < 1 {
        return Err(Error::Domain(format!("chunk length must be ≥ 1, got {chunk_len}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = chunks_per_doc * chunk_len;
    let quarter = (chunk_len / 4).max(1);
    let mut documents = Vec::with_capacity(n_docs);
    for doc_idx in 0..n_docs {
        let label = doc_idx % n_classes;
        let mut tokens: Vec<String> = (0..len)
            .map(|_| format!("w{}", rng.gen_range(0..SYNTH_FILLER_VOCAB)))
            .collect();
        let first = rng.gen_range(0..n_classes);
        let second = (label + n_classes - first) % n_classes;
        let pos_first = rng.gen_range(0..quarter);
        let pos_second = len - 1 - rng.gen_range(0..quarter);
        tokens[pos_first] = format!("mka{first}");
        tokens[pos_second] = format!("mkb{second}");
        documents.push(Document {
            id: format!("synth{doc_idx:05}"),
            text: tokens.join(" "),
            label,
        });
    }
    Ok(LabeledCorpus {
        documents,
        class_count: n_classes,
        name: "synth-longrange".to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_corpus() -> LabeledCorpus {
        LabeledCorpus {
            documents: vec![
                Document {
                    id: "a".into(),
                    text: "one two three".into(),
                    label: 0,
                },
                Document {
                    id: "b".into(),
                    text: "four five".into(),
                    label: 1,
                },
            ],
            class_count: 2,
            name: "tiny".into(),
        }
    }

    #[test]
    fn load_two_valid_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        fs::write(
            &path,
            "{\"id\":\"x\",\"text\":\"hello there\",\"label\":0}\n{\"text\":\"bye\",\"label\":1}\n",
        )
        .unwrap();
        let corpus = load_corpus(&path, None).unwrap();
        assert_eq!(corpus.len(), 2);
        assert_eq!(corpus.class_count, 2);
        assert_eq!(corpus.documents[1].id, "2"); // auto-assigned line number
    }

    #[test]
    fn load_rejects_non_integer_label_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        fs::write(&path, "{\"text\":\"ok\",\"label\":0}\n{\"text\":\"no\",\"label\":\"x\"}\n").unwrap();
        match load_corpus(&path, None) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn load_rejects_label_beyond_declared_classes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        fs::write(&path, "{\"text\":\"ok\",\"label\":5}\n").unwrap();
        assert!(matches!(load_corpus(&path, Some(2)), Err(Error::Schema(_))));
    }

    #[test]
    fn corpus_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let corpus = tiny_corpus();
        save_corpus(&path, &corpus).unwrap();
        let loaded = load_corpus(&path, None).unwrap();
        assert_eq!(loaded.documents, corpus.documents);
        assert_eq!(loaded.class_count, corpus.class_count);
    }

    #[test]
    fn stats_single_document() {
        let corpus = LabeledCorpus {
            documents: vec![Document {
                id: "a".into(),
                text: "a b c d e".into(),
                label: 0,
            }],
            class_count: 1,
            name: "one".into(),
        };
        let s = stats(&corpus).unwrap();
        assert_eq!(s.mean, 5.0);
        assert_eq!((s.max, s.min, s.median, s.p95, s.total), (5, 5, 5, 5, 1));
    }

    #[test]
    fn stats_even_count_uses_lower_middle_and_nearest_rank() {
        let documents = [1usize, 2, 3, 4]
            .iter()
            .enumerate()
            .map(|(i, &len)| Document {
                id: format!("{i}"),
                text: vec!["tok"; len].join(" "),
                label: 0,
            })
            .collect();
        let corpus = LabeledCorpus {
            documents,
            class_count: 1,
            name: "four".into(),
        };
        let s = stats(&corpus).unwrap();
        assert_eq!(s.median, 2);
        assert_eq!(s.p95, 4);
        assert_eq!(s.mean, 2.5);
    }

    #[test]
    fn filter_is_strict_and_identity_at_zero() {
        let lengths = [100usize, 512, 600];
        let documents = lengths
            .iter()
            .enumerate()
            .map(|(i, &len)| Document {
                id: format!("{i}"),
                text: vec!["tok"; len].join(" "),
                label: 0,
            })
            .collect();
        let corpus = LabeledCorpus {
            documents,
            class_count: 1,
            name: "lens".into(),
        };
        assert_eq!(filter_by_length(&corpus, 0).len(), 3);
        let filtered = filter_by_length(&corpus, 512);
        assert_eq!(filtered.len(), 1);
        assert_eq!(words(&filtered.documents[0].text).len(), 600);
    }

    #[test]
    fn split_sizes_follow_the_rounding_rule() {
        let make = |n: usize| LabeledCorpus {
            documents: (0..n)
                .map(|i| Document {
                    id: format!("{i}"),
                    text: "x".into(),
                    label: 0,
                })
                .collect(),
            class_count: 1,
            name: "n".into(),
        };
        let s10 = split(&make(10), [0.8, 0.1, 0.1], 1).unwrap();
        assert_eq!((s10.train.len(), s10.dev.len(), s10.test.len()), (8, 1, 1));
        let s9 = split(&make(9), [0.8, 0.1, 0.1], 1).unwrap();
        assert_eq!((s9.train.len(), s9.dev.len(), s9.test.len()), (7, 1, 1));
    }

    #[test]
    fn split_rejects_bad_ratios() {
        assert!(matches!(
            split(&tiny_corpus(), [0.5, 0.1, 0.1], 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn synth_rejects_invalid_sizes() {
        assert!(synth_longrange(0, 2, 4, 10, 0).is_err());
        assert!(synth_longrange(8, 1, 4, 10, 0).is_err());
        assert!(synth_longrange(8, 2, 1, 10, 0).is_err());
    }

    #[test]
    fn synth_is_bitwise_reproducible() {
        let a = synth_longrange(16, 2, 3, 8, 99).unwrap();
        let b = synth_longrange(16, 2, 3, 8, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synth_labels_balanced_and_markers_distant() {
        let n_docs = 64;
        let chunk_len = 12;
        let corpus = synth_longrange(n_docs, 2, 4, chunk_len, 7).unwrap();
        assert_eq!(corpus.len(), n_docs);
        let class0 = corpus.documents.iter().filter(|d| d.label == 0).count();
        assert!((class0 as i64 - (n_docs as i64 - class0 as i64)).abs() <= 1);

        for doc in &corpus.documents {
            let toks = words(&doc.text);
            let pos_a = toks.iter().position(|t| t.starts_with("mka")).unwrap();
            let pos_b = toks.iter().position(|t| t.starts_with("mkb")).unwrap();
            // Post-check oracle: at least two default chunk-strides
            // (chunk_len/2 each) apart, hence never inside one window.
            assert!(pos_b - pos_a >= chunk_len, "markers too close: {pos_a} vs {pos_b}");
            // Label is the sum of marker indices mod class count.
            let i: usize = toks[pos_a][3..].parse().unwrap();
            let j: usize = toks[pos_b][3..].parse().unwrap();
            assert_eq!((i + j) % 2, doc.label);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn stats_ordering_invariants(lengths in prop::collection::vec(1usize..400, 1..40)) {
            let documents = lengths
                .iter()
                .enumerate()
                .map(|(i, &len)| Document {
                    id: format!("{i}"),
                    text: vec!["tok"; len].join(" "),
                    label: 0,
                })
                .collect();
            let corpus = LabeledCorpus { documents, class_count: 1, name: "p".into() };
            let s = stats(&corpus).unwrap();
            prop_assert!(s.min <= s.median);
            prop_assert!(s.median <= s.p95);
            prop_assert!(s.p95 <= s.max);
            prop_assert!(s.mean >= s.min as f64 && s.mean <= s.max as f64);
        }

        #[test]
        fn split_partitions_are_disjoint_exhaustive_and_deterministic(
            n in 1usize..60,
            seed in 0u64..500,
        ) {
            let corpus = LabeledCorpus {
                documents: (0..n)
                    .map(|i| Document { id: format!("{i}"), text: "x".into(), label: 0 })
                    .collect(),
                class_count: 1,
                name: "p".into(),
            };
            let s = split(&corpus, [0.8, 0.1, 0.1], seed).unwrap();
            let t = split(&corpus, [0.8, 0.1, 0.1], seed).unwrap();
            let collect_ids = |sc: &SplitCorpora| {
                let mut ids: Vec<String> = sc
                    .train
                    .documents
                    .iter()
                    .chain(&sc.dev.documents)
                    .chain(&sc.test.documents)
                    .map(|d| d.id.clone())
                    .collect();
                let total = ids.len();
                ids.sort();
                ids.dedup();
                (total, ids)
            };
            let (total, ids) = collect_ids(&s);
            prop_assert_eq!(total, n);
            prop_assert_eq!(ids.len(), n);
            // Same seed twice → identical partitions.
            prop_assert_eq!(s.train.documents, t.train.documents);
            prop_assert_eq!(s.dev.documents, t.dev.documents);
            prop_assert_eq!(s.test.documents, t.test.documents);
        }

        #[test]
        fn filter_and_complement_rebuild_the_corpus(
            lengths in prop::collection::vec(1usize..40, 1..30),
            cut in 0usize..40,
        ) {
            let documents: Vec<Document> = lengths
                .iter()
                .enumerate()
                .map(|(i, &len)| Document {
                    id: format!("{i}"),
                    text: vec!["tok"; len].join(" "),
                    label: 0,
                })
                .collect();
            let corpus = LabeledCorpus { documents, class_count: 1, name: "p".into() };
            let kept = filter_by_length(&corpus, cut);
            let dropped: Vec<&Document> = corpus
                .documents
                .iter()
                .filter(|d| words(&d.text).len() <= cut)
                .collect();
            prop_assert_eq!(kept.len() + dropped.len(), corpus.len());
        }
    }
}
