//! Corpus ingestion, tokenization, overlapping-group construction, and
//! dynamic masking.
//!
//! Corpus file format: UTF-8, LF line endings, one sentence per line, one
//! blank line between documents. Vocabulary file: one token per line, line
//! number = id. Tokenization is lowercased whitespace splitting.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus at {0} contains no documents")]
    EmptyCorpus(String),
    #[error("invalid corpus configuration: {0}")]
    Config(String),
}

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
/// Reserved token strings, in id order.
pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// A document before vocabulary mapping: ordered raw sentences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDocument {
    pub sentences: Vec<String>,
}

/// A document as ordered token-id lists. Every sentence is non-empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub sentences: Vec<Vec<u32>>,
}

/// Token string to id mapping with the five reserved specials at ids 0..4.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id for a token, falling back to `[UNK]`.
    pub fn id_of(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// One token per line, line number = id.
    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|source| CorpusError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path)
            .map_err(|source| CorpusError::Io { path: path.display().to_string(), source })?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < SPECIAL_TOKENS.len()
            || SPECIAL_TOKENS.iter().enumerate().any(|(i, s)| tokens[i] != *s)
        {
            return Err(CorpusError::Config(format!(
                "vocabulary at {} does not start with the reserved specials",
                path.display()
            )));
        }
        Ok(Self::from_tokens(tokens))
    }
}

/// One tokenized window of sentences, laid out as
/// `[CLS] s .. [SEP] s .. [SEP] [PAD]*` at fixed length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceGroup {
    pub token_ids: Vec<u32>,
    pub doc_id: usize,
    /// Temporal position of this group within its document.
    pub group_index: usize,
    /// Sentence index range the group covers.
    pub covered_sentences: Range<usize>,
}

/// A dynamically masked batch of groups. `groups[i].token_ids` hold the
/// corrupted inputs; originals at the masked positions are in `mlm_targets`.
#[derive(Debug, Clone)]
pub struct MaskedBatch {
    pub groups: Vec<SequenceGroup>,
    pub masked_positions: Vec<Vec<usize>>,
    pub mlm_targets: Vec<Vec<u32>>,
    pub rng_seed: u64,
}

impl MaskedBatch {
    pub fn total_masked(&self) -> usize {
        self.masked_positions.iter().map(Vec::len).sum()
    }
}

fn tokenize_line(line: &str) -> Vec<String> {
    line.split_whitespace().map(|t| t.to_lowercase()).collect()
}

/// Reads documents from the corpus file format. Empty lines at file
/// boundaries are ignored; zero documents is an error.
pub fn load_corpus(path: &Path) -> Result<Vec<RawDocument>, CorpusError> {
    let text = fs::read_to_string(path)
        .map_err(|source| CorpusError::Io { path: path.display().to_string(), source })?;
    let docs = parse_corpus(&text);
    if docs.is_empty() {
        return Err(CorpusError::EmptyCorpus(path.display().to_string()));
    }
    Ok(docs)
}

/// Same parse as [`load_corpus`] for in-memory text; may return zero documents.
pub fn parse_corpus(text: &str) -> Vec<RawDocument> {
    let mut docs = Vec::new();
    let mut current: Vec<String> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                docs.push(RawDocument { sentences: std::mem::take(&mut current) });
            }
        } else {
            current.push(line.to_string());
        }
    }
    if !current.is_empty() {
        docs.push(RawDocument { sentences: current });
    }
    docs
}

/// Builds a vocabulary: specials first, then tokens with count >= `min_count`
/// sorted by descending count and lexicographically within ties.
pub fn build_vocab(documents: &[RawDocument], min_count: usize) -> Vocab {
    assert!(min_count >= 1, "min_count must be at least 1");
    let mut counts: HashMap<String, usize> = HashMap::new();
    for doc in documents {
        for sentence in &doc.sentences {
            for token in tokenize_line(sentence) {
                *counts.entry(token).or_insert(0) += 1;
            }
        }
    }
    let mut kept: Vec<(String, usize)> =
        counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
    kept.sort_by(|(ta, ca), (tb, cb)| cb.cmp(ca).then_with(|| ta.cmp(tb)));

    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(kept.into_iter().map(|(t, _)| t));
    Vocab::from_tokens(tokens)
}

/// Maps raw sentences to token ids; unknown tokens become `[UNK]`.
pub fn tokenize_document(doc: &RawDocument, vocab: &Vocab) -> Document {
    Document {
        sentences: doc
            .sentences
            .iter()
            .map(|s| tokenize_line(s).iter().map(|t| vocab.id_of(t)).collect())
            .collect(),
    }
}

/// Sentence index spans of overlapping groups: group `t` covers
/// `[t*(group_size-1), t*(group_size-1)+group_size)`, so consecutive groups
/// share exactly one sentence. A final partial group is emitted iff it adds at
/// least one new sentence.
pub fn group_with_overlap(num_sentences: usize, group_size: usize) -> Vec<Range<usize>> {
    assert!(group_size >= 2, "group_size must be at least 2");
    let stride = group_size - 1;
    let mut spans = Vec::new();
    let mut prev_end = 0;
    let mut start = 0;
    while start < num_sentences {
        let end = (start + group_size).min(num_sentences);
        if end <= prev_end {
            break; // no new sentence beyond the previous group
        }
        spans.push(start..end);
        prev_end = end;
        start += stride;
    }
    spans
}

/// Lays out `[CLS] tokens([SEP]-joined sentences) [SEP]`, truncated to
/// `max_len` and padded with `[PAD]`.
pub fn tokenize_truncate_pad(sentences: &[&[u32]], max_len: usize) -> Vec<u32> {
    assert!(max_len >= 4, "max_len must be at least 4");
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    'outer: for sentence in sentences {
        for &tok in *sentence {
            if ids.len() == max_len {
                break 'outer;
            }
            ids.push(tok);
        }
        if ids.len() == max_len {
            break;
        }
        ids.push(SEP);
    }
    ids.resize(max_len, PAD);
    ids
}

/// All [`SequenceGroup`]s of one document under the overlap rule.
pub fn build_groups(
    doc: &Document,
    doc_id: usize,
    group_size: usize,
    max_len: usize,
) -> Vec<SequenceGroup> {
    group_with_overlap(doc.sentences.len(), group_size)
        .into_iter()
        .enumerate()
        .map(|(group_index, span)| {
            let slices: Vec<&[u32]> =
                doc.sentences[span.clone()].iter().map(Vec::as_slice).collect();
            SequenceGroup {
                token_ids: tokenize_truncate_pad(&slices, max_len),
                doc_id,
                group_index,
                covered_sentences: span,
            }
        })
        .collect()
}

fn maskable(token: u32) -> bool {
    token != CLS && token != SEP && token != PAD
}

/// Independently masks each maskable token with probability `mask_rate`;
/// selected tokens become `[MASK]` 80% of the time, a random non-special
/// vocabulary token 10%, and stay unchanged 10%. The pattern is drawn fresh
/// from `seed` on every call.
pub fn dynamic_mask(
    groups: &[SequenceGroup],
    mask_rate: f64,
    vocab_size: usize,
    seed: u64,
) -> MaskedBatch {
    assert!((0.0..=1.0).contains(&mask_rate), "mask_rate must lie in [0, 1]");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out_groups = Vec::with_capacity(groups.len());
    let mut masked_positions = Vec::with_capacity(groups.len());
    let mut mlm_targets = Vec::with_capacity(groups.len());

    for group in groups {
        let mut corrupted = group.clone();
        let mut positions = Vec::new();
        let mut targets = Vec::new();
        for (pos, tok) in group.token_ids.iter().enumerate() {
            if !maskable(*tok) || rng.random::<f64>() >= mask_rate {
                continue;
            }
            positions.push(pos);
            targets.push(*tok);
            let roll = rng.random::<f64>();
            corrupted.token_ids[pos] = if roll < 0.8 {
                MASK
            } else if roll < 0.9 && vocab_size > SPECIAL_TOKENS.len() {
                rng.random_range(SPECIAL_TOKENS.len() as u32..vocab_size as u32)
            } else {
                *tok
            };
        }
        out_groups.push(corrupted);
        masked_positions.push(positions);
        mlm_targets.push(targets);
    }

    MaskedBatch { groups: out_groups, masked_positions, mlm_targets, rng_seed: seed }
}
