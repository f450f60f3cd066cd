//! Token-to-index vocabulary and fixed-length padding.

use std::collections::HashMap;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::lexer::TokenStream;

pub const PAD_INDEX: u32 = 0;
pub const OOV_INDEX: u32 = 1;
pub const DEFAULT_SEQ_LEN: usize = 50;

#[derive(Debug, Error, PartialEq)]
pub enum SequenceError {
    #[error("cannot build a vocabulary from zero token streams")]
    EmptyCorpus,
    #[error("vocabulary format error on line {line}: {message}")]
    Format { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct VocabMap {
    /// Token at position `i` has index `i + 2`.
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl VocabMap {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32 + 2))
            .collect();
        Self { tokens, index }
    }

    /// Number of indices including the padding and out-of-vocabulary slots.
    pub fn vocab_size(&self) -> usize {
        self.tokens.len() + 2
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn lookup(&self, token: &str) -> u32 {
        self.get(token).unwrap_or(OOV_INDEX)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    fn body_text(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            out.push_str(t);
            out.push('\t');
            out.push_str(&(i + 2).to_string());
            out.push('\n');
        }
        out
    }

    /// `vocab_version=1<TAB>L=<L>` header then `token<TAB>index` lines in index order.
    pub fn to_text(&self, seq_len: usize) -> String {
        format!("vocab_version=1\tL={seq_len}\n{}", self.body_text())
    }

    pub fn from_text(text: &str) -> Result<(Self, usize), SequenceError> {
        let err = |line: usize, message: String| SequenceError::Format { line, message };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
        let seq_len = header
            .strip_prefix("vocab_version=1\tL=")
            .and_then(|l| l.parse::<usize>().ok())
            .ok_or_else(|| err(1, format!("bad header {header:?}")))?;
        let mut tokens = Vec::new();
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let (tok, idx) = line
                .rsplit_once('\t')
                .ok_or_else(|| err(line_no, "expected token<TAB>index".into()))?;
            let idx: usize = idx.parse().map_err(|_| err(line_no, format!("bad index {idx:?}")))?;
            if idx != tokens.len() + 2 {
                return Err(err(line_no, format!("index {idx} out of sequence")));
            }
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(err(line_no, format!("bad token {tok:?}")));
            }
            tokens.push(tok.to_string());
        }
        let vocab = Self::from_tokens(tokens);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(err(0, "duplicate tokens".into()));
        }
        Ok((vocab, seq_len))
    }

    /// SHA-256 over the token/index table; independent of the sequence length.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.body_text().as_bytes()))
    }
}

/// Indexes emitted tokens from 2 upward by descending frequency, ties broken
/// by first appearance.
pub fn build_vocab(streams: &[TokenStream]) -> Result<VocabMap, SequenceError> {
    if streams.is_empty() {
        return Err(SequenceError::EmptyCorpus);
    }
    // token -> (count, first seen)
    let mut stats: HashMap<&str, (usize, usize)> = HashMap::new();
    for (seen, tok) in streams.iter().flat_map(|s| s.emitted()).enumerate() {
        stats.entry(tok).or_insert((0, seen)).0 += 1;
    }
    let mut ordered: Vec<(&str, (usize, usize))> = stats.into_iter().collect();
    ordered.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));
    Ok(VocabMap::from_tokens(
        ordered.into_iter().map(|(t, _)| t.to_string()).collect(),
    ))
}

pub fn encode(stream: &TokenStream, vocab: &VocabMap) -> Vec<u32> {
    stream.emitted().map(|t| vocab.lookup(t)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PaddedSequence {
    pub values: Vec<f64>,
    pub true_length: usize,
    pub truncated: bool,
}

impl PaddedSequence {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Post-pads with zeros, or keeps the first `seq_len` indices.
pub fn pad_or_truncate(indices: &[u32], seq_len: usize) -> PaddedSequence {
    assert!(seq_len >= 1, "sequence length must be positive");
    let true_length = indices.len().min(seq_len);
    let mut values: Vec<f64> = indices[..true_length].iter().map(|&i| f64::from(i)).collect();
    values.resize(seq_len, f64::from(PAD_INDEX));
    PaddedSequence {
        values,
        true_length,
        truncated: indices.len() > seq_len,
    }
}

/// Optional min-max scaling of index values into `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum Scaling {
    #[default]
    None,
    MinMax,
}

impl Scaling {
    pub fn apply(self, mut seq: PaddedSequence, vocab_size: usize) -> PaddedSequence {
        if let Scaling::MinMax = self {
            let max = (vocab_size.max(2) - 1) as f64;
            for v in &mut seq.values {
                *v /= max;
            }
        }
        seq
    }
}
