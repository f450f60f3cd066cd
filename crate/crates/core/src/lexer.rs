//! Word/punctuation segmentation and character-class substitution.
//!
//! Words are maximal runs of ASCII letters and digits, punctuation tokens are
//! maximal runs of anything else that is not whitespace. Words that are not
//! on the keep-list are replaced by the label of their character class, so
//! variable values collapse onto a small alphabet while structural words such
//! as methods and parameter names survive verbatim.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{Label, LabeledCorpus, RawRequest};

#[derive(Debug, Error, PartialEq)]
pub enum LexError {
    #[error("cannot classify an empty token")]
    EmptyToken,
    #[error("keep-list format error on line {line}: {message}")]
    Format { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TokenClass {
    Numeric,
    LowerAlpha,
    UpperAlpha,
    CapitalLowerAlpha,
    AlphaNum,
    SpecialChar,
    MixedOther,
}

impl TokenClass {
    pub const ALL: [TokenClass; 7] = [
        TokenClass::Numeric,
        TokenClass::LowerAlpha,
        TokenClass::UpperAlpha,
        TokenClass::CapitalLowerAlpha,
        TokenClass::AlphaNum,
        TokenClass::SpecialChar,
        TokenClass::MixedOther,
    ];

    pub fn label(self) -> &'static str {
        match self {
            TokenClass::Numeric => "Numeric",
            TokenClass::LowerAlpha => "LowerAlpha",
            TokenClass::UpperAlpha => "UpperAlpha",
            TokenClass::CapitalLowerAlpha => "CapitalLowerAlpha",
            TokenClass::AlphaNum => "AlphaNum",
            TokenClass::SpecialChar => "SpecialChar",
            TokenClass::MixedOther => "MixedOther",
        }
    }
}

impl fmt::Display for TokenClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for TokenClass {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        TokenClass::ALL.into_iter().find(|c| c.label() == s).ok_or(())
    }
}

/// Classifies a token; the first matching rule wins:
/// digits, lowercase, uppercase, one capital then lowercase, letters and
/// digits mixed, no alphanumerics at all, anything else.
pub fn classify(token: &str) -> Result<TokenClass, LexError> {
    if token.is_empty() {
        return Err(LexError::EmptyToken);
    }
    let b = token.as_bytes();
    let class = if b.iter().all(u8::is_ascii_digit) {
        TokenClass::Numeric
    } else if b.iter().all(u8::is_ascii_lowercase) {
        TokenClass::LowerAlpha
    } else if b.iter().all(u8::is_ascii_uppercase) {
        TokenClass::UpperAlpha
    } else if b.len() >= 2 && b[0].is_ascii_uppercase() && b[1..].iter().all(u8::is_ascii_lowercase) {
        TokenClass::CapitalLowerAlpha
    } else if b.iter().all(u8::is_ascii_alphanumeric) {
        // Not all digits and not all letters of one case pattern above, but
        // it may still be letters only ("HeLLo"), which is not AlphaNum.
        if b.iter().any(u8::is_ascii_digit) {
            TokenClass::AlphaNum
        } else {
            TokenClass::MixedOther
        }
    } else if !b.iter().any(u8::is_ascii_alphanumeric) {
        TokenClass::SpecialChar
    } else {
        TokenClass::MixedOther
    };
    Ok(class)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Word,
    Punct,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub kind: TokenKind,
    /// What goes downstream: the text itself or a class label.
    pub emitted: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenStream {
    pub tokens: Vec<Token>,
    /// `gaps[i]` is the whitespace before token `i`; the last entry is the
    /// trailing whitespace, so `gaps.len() == tokens.len() + 1`.
    pub gaps: Vec<String>,
    pub origin: String,
}

impl TokenStream {
    pub fn emitted(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|t| t.emitted.as_str())
    }

    /// Rejoins token texts with the recorded whitespace.
    pub fn rejoin(&self) -> String {
        let mut out = String::new();
        for (gap, tok) in self.gaps.iter().zip(&self.tokens) {
            out.push_str(gap);
            out.push_str(&tok.text);
        }
        if let Some(last) = self.gaps.last() {
            out.push_str(last);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Copy, PartialEq)]
enum CharKind {
    Space,
    Alnum,
    Other,
}

fn char_kind(c: char) -> CharKind {
    if c.is_whitespace() {
        CharKind::Space
    } else if c.is_ascii_alphanumeric() {
        CharKind::Alnum
    } else {
        CharKind::Other
    }
}

pub fn segment(text: &str) -> TokenStream {
    let mut tokens = Vec::new();
    let mut gaps = Vec::new();
    let mut gap = String::new();
    let mut chars = text.char_indices().peekable();
    while let Some(&(start, c)) = chars.peek() {
        let kind = char_kind(c);
        let mut end = start;
        while let Some(&(i, c)) = chars.peek() {
            if char_kind(c) != kind {
                break;
            }
            end = i + c.len_utf8();
            chars.next();
        }
        let run = &text[start..end];
        match kind {
            CharKind::Space => gap.push_str(run),
            CharKind::Alnum | CharKind::Other => {
                gaps.push(std::mem::take(&mut gap));
                tokens.push(Token {
                    text: run.to_string(),
                    kind: if kind == CharKind::Alnum {
                        TokenKind::Word
                    } else {
                        TokenKind::Punct
                    },
                    emitted: run.to_string(),
                });
            }
        }
    }
    gaps.push(gap);
    TokenStream {
        tokens,
        gaps,
        origin: String::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LexerOptions {
    pub include_headers: bool,
}

/// The part of a request that is tokenized: method, target, optionally the
/// header lines, then the body, joined by newlines.
pub fn consumed_text(req: &RawRequest, opts: LexerOptions) -> String {
    let mut out = format!("{} {}", req.method, req.target);
    if opts.include_headers {
        for h in &req.headers {
            out.push('\n');
            out.push_str(&h.name);
            out.push_str(&h.separator);
            out.push_str(&h.value);
        }
    }
    if !req.body.is_empty() {
        out.push('\n');
        out.push_str(&req.body);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KeepList {
    verbatim: BTreeSet<String>,
    min_support: f64,
}

impl KeepList {
    pub fn new(words: impl IntoIterator<Item = String>, min_support: f64) -> Self {
        Self {
            verbatim: words.into_iter().collect(),
            min_support,
        }
    }

    pub fn contains(&self, word: &str) -> bool {
        self.verbatim.contains(word)
    }

    pub fn min_support(&self) -> f64 {
        self.min_support
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.verbatim.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.verbatim.len()
    }

    pub fn is_empty(&self) -> bool {
        self.verbatim.is_empty()
    }

    /// `min_support=<f>` header, then one word per line in sorted order.
    pub fn to_text(&self) -> String {
        let mut out = format!("min_support={}\n", self.min_support);
        for w in &self.verbatim {
            out.push_str(w);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, LexError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(LexError::Format {
            line: 1,
            message: "missing header".into(),
        })?;
        let min_support = header
            .strip_prefix("min_support=")
            .and_then(|v| v.parse::<f64>().ok())
            .ok_or_else(|| LexError::Format {
                line: 1,
                message: format!("bad header {header:?}"),
            })?;
        let mut verbatim = BTreeSet::new();
        for (i, w) in lines.enumerate() {
            if w.is_empty() || !w.bytes().all(|b| b.is_ascii_alphanumeric()) {
                return Err(LexError::Format {
                    line: i + 2,
                    message: format!("not a word token: {w:?}"),
                });
            }
            verbatim.insert(w.to_string());
        }
        Ok(Self { verbatim, min_support })
    }
}

/// A word enters the keep-list when it occurs in at least `min_support` of
/// the normal training requests (document frequency). Malicious entries are
/// ignored.
pub fn build_keep_list(train: &LabeledCorpus, min_support: f64, opts: LexerOptions) -> KeepList {
    let normals: Vec<&RawRequest> = train
        .entries
        .iter()
        .filter(|e| e.label == Label::Normal)
        .map(|e| &e.request)
        .collect();
    let n = normals.len();
    let mut doc_freq: std::collections::HashMap<String, usize> = Default::default();
    for req in normals {
        let stream = segment(&consumed_text(req, opts));
        let words: HashSet<&str> = stream
            .tokens
            .iter()
            .filter(|t| t.kind == TokenKind::Word)
            .map(|t| t.text.as_str())
            .collect();
        for w in words {
            *doc_freq.entry(w.to_string()).or_default() += 1;
        }
    }
    let words = doc_freq
        .into_iter()
        .filter(|&(_, df)| n > 0 && df as f64 >= min_support * n as f64)
        .map(|(w, _)| w);
    KeepList::new(words, min_support)
}

/// Applies keep-list substitution to an already segmented stream.
pub fn substitute(mut stream: TokenStream, keep: &KeepList) -> TokenStream {
    for tok in &mut stream.tokens {
        tok.emitted = match tok.kind {
            TokenKind::Punct => tok.text.clone(),
            TokenKind::Word if keep.contains(&tok.text) => tok.text.clone(),
            TokenKind::Word => classify(&tok.text)
                .expect("segmented tokens are non-empty")
                .label()
                .to_string(),
        };
    }
    stream
}

pub fn tokenize_request(req: &RawRequest, keep: &KeepList, opts: LexerOptions) -> TokenStream {
    let mut stream = substitute(segment(&consumed_text(req, opts)), keep);
    stream.origin = format!("{} {}", req.method, req.target);
    stream
}
