//! Loading, parsing, filtering, splitting and synthesizing labeled corpora of
//! raw HTTP requests.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use percent_encoding::percent_decode;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed request: {0}")]
    MalformedRequest(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Ground-truth label of a request, and also the verdict type of the detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Malicious,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Malicious => "malicious",
        }
    }

    /// Accepts the spellings found in common dataset distributions.
    pub fn parse(s: &str) -> Option<Label> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normal" | "benign" | "valid" | "0" => Some(Label::Normal),
            "malicious" | "anomalous" | "attack" | "anomaly" | "1" => Some(Label::Malicious),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub name: String,
    /// The colon plus any whitespace that followed it; empty for colon-less lines.
    pub separator: String,
    pub value: String,
    pub line_end: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
struct Layout {
    lead: String,
    after_method: String,
    after_target: String,
    request_line_end: String,
    head_end: String,
}

/// A parsed HTTP request that remembers every separator it was parsed with,
/// so [`RawRequest::serialize`] reproduces the original text byte for byte.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRequest {
    pub method: String,
    pub target: String,
    /// Remainder of the request line after the target (usually `HTTP/1.1`).
    pub version: String,
    pub headers: Vec<Header>,
    /// Body text. Input bytes are decoded as UTF-8, falling back to Latin-1.
    pub body: String,
    raw_text: String,
    layout: Layout,
}

impl RawRequest {
    pub fn raw_text(&self) -> &str {
        &self.raw_text
    }

    /// Rebuilds the request text from its fields and recorded separators.
    pub fn serialize(&self) -> String {
        let l = &self.layout;
        let mut out = String::with_capacity(self.raw_text.len());
        out.push_str(&l.lead);
        out.push_str(&self.method);
        out.push_str(&l.after_method);
        out.push_str(&self.target);
        out.push_str(&l.after_target);
        out.push_str(&self.version);
        out.push_str(&l.request_line_end);
        for h in &self.headers {
            out.push_str(&h.name);
            out.push_str(&h.separator);
            out.push_str(&h.value);
            out.push_str(&h.line_end);
        }
        out.push_str(&l.head_end);
        out.push_str(&self.body);
        out
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|h| h.name.eq_ignore_ascii_case(name))
            .map(|h| h.value.as_str())
    }
}

/// Splits off one line, returning (content, line ending, rest).
fn take_line(s: &str) -> (&str, &str, &str) {
    match s.find('\n') {
        Some(i) => {
            let (content, end_start) = if i > 0 && s.as_bytes()[i - 1] == b'\r' {
                (&s[..i - 1], i - 1)
            } else {
                (&s[..i], i)
            };
            (content, &s[end_start..=i], &s[i + 1..])
        }
        None => (s, "", ""),
    }
}

fn is_method_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '-' || c == '_'
}

fn split_run(s: &str, pred: impl Fn(char) -> bool) -> (&str, &str) {
    let end = s.find(|c: char| !pred(c)).unwrap_or(s.len());
    s.split_at(end)
}

/// Parses one request. The text must start (after optional whitespace) with a
/// request line `METHOD target [version]`.
pub fn parse_raw_http(text: &str) -> Result<RawRequest, IngestError> {
    let (lead, rest) = split_run(text, char::is_whitespace);
    let (line, request_line_end, mut rest) = take_line(rest);
    let (method, after) = split_run(line, |c| !c.is_whitespace());
    if method.is_empty() {
        return Err(IngestError::MalformedRequest("missing request line".into()));
    }
    if !method.chars().all(is_method_char) {
        return Err(IngestError::MalformedRequest(format!(
            "invalid method token {method:?}"
        )));
    }
    let (after_method, after) = split_run(after, |c| c == ' ' || c == '\t');
    let (target, after) = split_run(after, |c| !c.is_whitespace());
    if target.is_empty() {
        return Err(IngestError::MalformedRequest(format!(
            "request line {line:?} has no target"
        )));
    }
    let (after_target, version) = split_run(after, |c| c == ' ' || c == '\t');

    let mut headers = Vec::new();
    let mut head_end = "";
    while !rest.is_empty() {
        let (hline, eol, next) = take_line(rest);
        if hline.is_empty() {
            head_end = eol;
            rest = next;
            break;
        }
        let header = match hline.find(':') {
            Some(i) => {
                let value_start = i
                    + 1
                    + hline[i + 1..]
                        .find(|c: char| c != ' ' && c != '\t')
                        .unwrap_or(hline.len() - i - 1);
                Header {
                    name: hline[..i].to_string(),
                    separator: hline[i..value_start].to_string(),
                    value: hline[value_start..].to_string(),
                    line_end: eol.to_string(),
                }
            }
            None => Header {
                name: hline.to_string(),
                separator: String::new(),
                value: String::new(),
                line_end: eol.to_string(),
            },
        };
        headers.push(header);
        rest = next;
    }

    Ok(RawRequest {
        method: method.to_string(),
        target: target.to_string(),
        version: version.to_string(),
        headers,
        body: rest.to_string(),
        raw_text: text.to_string(),
        layout: Layout {
            lead: lead.to_string(),
            after_method: after_method.to_string(),
            after_target: after_target.to_string(),
            request_line_end: request_line_end.to_string(),
            head_end: head_end.to_string(),
        },
    })
}

/// Decodes bytes as UTF-8, or as Latin-1 when they are not valid UTF-8.
pub fn decode_text(bytes: &[u8]) -> String {
    match std::str::from_utf8(bytes) {
        Ok(s) => s.to_string(),
        Err(_) => bytes.iter().map(|&b| b as char).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorpusFormat {
    /// Raw requests separated by blank lines; a block that does not start
    /// with a request line is the body of the preceding request.
    BlankLineSeparated,
    /// One percent-encoded raw request per line.
    OnePerLineUrlEncoded,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledEntry {
    pub request: RawRequest,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabeledCorpus {
    pub entries: Vec<LabeledEntry>,
    pub source: String,
}

impl LabeledCorpus {
    pub fn new(source: impl Into<String>) -> Self {
        Self {
            entries: Vec::new(),
            source: source.into(),
        }
    }

    pub fn push(&mut self, request: RawRequest, label: Label) {
        self.entries.push(LabeledEntry { request, label });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }

    pub fn requests(&self) -> impl Iterator<Item = &RawRequest> {
        self.entries.iter().map(|e| &e.request)
    }
}

fn looks_like_request_line(line: &str) -> bool {
    let (method, rest) = split_run(line, |c| c.is_ascii_uppercase());
    if method.is_empty() {
        return false;
    }
    let (sep, rest) = split_run(rest, |c| c == ' ' || c == '\t');
    !sep.is_empty() && rest.chars().next().is_some_and(|c| !c.is_whitespace())
}

/// Splits a blank-line-separated file into (first line number, record text).
fn split_blank_line_records<'a>(text: &'a str, path: &Path) -> Result<Vec<(usize, &'a str)>, IngestError> {
    // (start byte, end byte of last non-blank content, start line)
    let mut records: Vec<(usize, usize, usize)> = Vec::new();
    let mut offset = 0;
    let mut line_no = 0;
    let mut in_block = false;
    let mut rest = text;
    while !rest.is_empty() {
        line_no += 1;
        let (content, eol, next) = take_line(rest);
        let line_start = offset;
        let content_end = offset + content.len();
        offset += content.len() + eol.len();
        rest = next;
        if content.trim().is_empty() {
            in_block = false;
            continue;
        }
        if !in_block {
            in_block = true;
            if looks_like_request_line(content) {
                records.push((line_start, content_end, line_no));
                continue;
            }
            if records.is_empty() {
                return Err(IngestError::Format {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: "content before the first request line".into(),
                });
            }
        }
        if let Some(last) = records.last_mut() {
            last.1 = content_end;
        }
    }
    Ok(records.into_iter().map(|(s, e, line)| (line, &text[s..e])).collect())
}

fn parse_records(text: &str, format: CorpusFormat, path: &Path) -> Result<Vec<RawRequest>, IngestError> {
    let fmt_err = |line: usize, e: IngestError| IngestError::Format {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    };
    match format {
        CorpusFormat::BlankLineSeparated => split_blank_line_records(text, path)?
            .into_iter()
            .map(|(line, rec)| parse_raw_http(rec).map_err(|e| fmt_err(line, e)))
            .collect(),
        CorpusFormat::OnePerLineUrlEncoded => text
            .lines()
            .enumerate()
            .map(|(i, l)| {
                let decoded = decode_text(&percent_decode(l.trim_end_matches('\r').as_bytes()).collect::<Vec<u8>>());
                (i, decoded)
            })
            .filter(|(_, d)| !d.trim().is_empty())
            .map(|(i, d)| parse_raw_http(&d).map_err(|e| fmt_err(i + 1, e)))
            .collect(),
    }
}

fn read_text(path: &Path) -> Result<String, IngestError> {
    Ok(decode_text(&fs::read(path).map_err(io_err(path))?))
}

/// Loads the requests of one file without labels.
pub fn load_requests(path: &Path, format: CorpusFormat) -> Result<Vec<RawRequest>, IngestError> {
    parse_records(&read_text(path)?, format, path)
}

fn sorted_files(dir: &Path) -> Result<Vec<PathBuf>, IngestError> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let p = entry.map_err(io_err(dir))?.path();
        if p.is_file() {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

/// Sidecar label file for a single corpus file: `<file>.labels.tsv`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".labels.tsv");
    path.with_file_name(name)
}

fn read_sidecar(path: &Path, n: usize) -> Result<Vec<Label>, IngestError> {
    let text = read_text(path)?;
    let mut labels: Vec<Option<Label>> = vec![None; n];
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| IngestError::Format {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let (idx, label) = line
            .split_once('\t')
            .ok_or_else(|| err("expected `index<TAB>label`".into()))?;
        let idx: usize = idx.trim().parse().map_err(|_| err(format!("bad index {idx:?}")))?;
        let label = Label::parse(label).ok_or_else(|| err(format!("unknown label {label:?}")))?;
        let slot = labels
            .get_mut(idx)
            .ok_or_else(|| err(format!("index {idx} out of range (file has {n} records)")))?;
        *slot = Some(label);
    }
    labels
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            l.ok_or_else(|| IngestError::Format {
                path: path.to_path_buf(),
                line: 0,
                message: format!("record {i} has no label"),
            })
        })
        .collect()
}

/// Loads a labeled corpus. A directory is read with the `normal/` and
/// `anomalous/` (or `malicious/`) convention; a single file needs a sidecar
/// `<file>.labels.tsv` with `index<TAB>label` lines.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<LabeledCorpus, IngestError> {
    let meta = fs::metadata(path).map_err(io_err(path))?;
    let mut corpus = LabeledCorpus::new(path.display().to_string());
    if meta.is_dir() {
        let mut found = false;
        for (sub, label) in [
            ("normal", Label::Normal),
            ("anomalous", Label::Malicious),
            ("malicious", Label::Malicious),
        ] {
            let dir = path.join(sub);
            if !dir.is_dir() {
                continue;
            }
            found = true;
            for file in sorted_files(&dir)? {
                for req in load_requests(&file, format)? {
                    corpus.push(req, label);
                }
            }
        }
        if !found {
            return Err(IngestError::Format {
                path: path.to_path_buf(),
                line: 0,
                message: "directory has neither normal/ nor anomalous/ subdirectory".into(),
            });
        }
    } else {
        let requests = load_requests(path, format)?;
        let labels = read_sidecar(&sidecar_path(path), requests.len())?;
        for (req, label) in requests.into_iter().zip(labels) {
            corpus.push(req, label);
        }
    }
    Ok(corpus)
}

pub const CACHE_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    format_version: u32,
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    raw_text: String,
    label: Label,
}

/// Writes the newline-delimited JSON corpus cache: a `{"format_version":1}`
/// header line followed by one `{"raw_text":..,"label":..}` object per entry.
pub fn write_cache(corpus: &LabeledCorpus) -> String {
    let mut out = serde_json::to_string(&CacheHeader {
        format_version: CACHE_FORMAT_VERSION,
    })
    .expect("header serializes");
    out.push('\n');
    for e in &corpus.entries {
        let rec = CacheRecord {
            raw_text: e.request.raw_text().to_string(),
            label: e.label,
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn read_cache(text: &str, path: &Path) -> Result<LabeledCorpus, IngestError> {
    let err = |line: usize, message: String| IngestError::Format {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| err(1, "empty cache file".into()))?;
    let header: CacheHeader = serde_json::from_str(header).map_err(|e| err(1, format!("bad header: {e}")))?;
    if header.format_version != CACHE_FORMAT_VERSION {
        return Err(err(1, format!("unsupported format_version {}", header.format_version)));
    }
    let mut corpus = LabeledCorpus::new(path.display().to_string());
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let rec: CacheRecord = serde_json::from_str(line).map_err(|e| err(i + 1, e.to_string()))?;
        let req = parse_raw_http(&rec.raw_text).map_err(|e| err(i + 1, e.to_string()))?;
        corpus.push(req, rec.label);
    }
    Ok(corpus)
}

/// A matcher for a known attack pattern, used to keep only unambiguous
/// malicious samples.
#[derive(Debug, Clone)]
pub enum AttackRule {
    Pattern {
        name: String,
        regex: Regex,
    },
    /// Any run of non-whitespace characters at least this long.
    LongRun {
        name: String,
        min_len: usize,
    },
}

impl AttackRule {
    pub fn pattern(name: &str, re: &str) -> Result<Self, regex::Error> {
        Ok(AttackRule::Pattern {
            name: name.to_string(),
            regex: Regex::new(re)?,
        })
    }

    pub fn name(&self) -> &str {
        match self {
            AttackRule::Pattern { name, .. } | AttackRule::LongRun { name, .. } => name,
        }
    }

    fn matches_text(&self, text: &str) -> bool {
        match self {
            AttackRule::Pattern { regex, .. } => regex.is_match(text),
            AttackRule::LongRun { min_len, .. } => text
                .split(char::is_whitespace)
                .any(|run| run.chars().count() >= *min_len),
        }
    }

    /// Matches against the raw text and its percent-decoded form.
    pub fn matches(&self, raw: &str) -> bool {
        if self.matches_text(raw) {
            return true;
        }
        let decoded = percent_decode(raw.replace('+', " ").as_bytes())
            .decode_utf8_lossy()
            .into_owned();
        matches!(self, AttackRule::Pattern { .. }) && self.matches_text(&decoded)
    }
}

/// SQL injection, cross-site scripting, path traversal and overflow-length rules.
pub fn default_rules() -> Vec<AttackRule> {
    let patterns = [
        (
            "sqli",
            r"(?i)('|\b)\s*(or|and)\s+'?\w+'?\s*=\s*'?\w+|union\s+(all\s+)?select|;\s*(drop|delete|insert|update)\s|'\s*--|select\s+.+\s+from\s",
        ),
        (
            "xss",
            r"(?i)<\s*script|javascript:|on(error|load|mouseover|click)\s*=|<\s*(img|iframe|svg|body)\b",
        ),
        ("path_traversal", r"(\.\./|\.\.\\|%2e%2e(/|%2f))"),
    ];
    let mut rules: Vec<AttackRule> = patterns
        .iter()
        .map(|(n, re)| AttackRule::pattern(n, re).expect("built-in rule compiles"))
        .collect();
    rules.push(AttackRule::LongRun {
        name: "overflow".into(),
        min_len: 512,
    });
    rules
}

#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub corpus: LabeledCorpus,
    pub removed: usize,
}

/// Drops malicious entries that match none of the rules. Normal entries pass
/// through untouched.
pub fn filter_ambiguous(corpus: &LabeledCorpus, rules: &[AttackRule]) -> FilterOutcome {
    let mut out = LabeledCorpus::new(corpus.source.clone());
    let mut removed = 0;
    for e in &corpus.entries {
        let keep = e.label == Label::Normal || rules.iter().any(|r| r.matches(e.request.raw_text()));
        if keep {
            out.entries.push(e.clone());
        } else {
            removed += 1;
        }
    }
    FilterOutcome { corpus: out, removed }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

/// Training set: `train_fraction` of the normal entries, picked by seeded
/// shuffle. Held-out set: the remaining normals plus every malicious entry.
/// Both keep the corpus order.
pub fn split_corpus(corpus: &LabeledCorpus, spec: &SplitSpec) -> Result<(LabeledCorpus, LabeledCorpus), IngestError> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(IngestError::InsufficientData(format!(
            "train_fraction {} outside (0,1)",
            spec.train_fraction
        )));
    }
    let mut normals: Vec<usize> = corpus
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.label == Label::Normal)
        .map(|(i, _)| i)
        .collect();
    if normals.len() < 2 {
        return Err(IngestError::InsufficientData(format!(
            "need at least 2 normal entries, found {}",
            normals.len()
        )));
    }
    let n_train = ((spec.train_fraction * normals.len() as f64).round() as usize).clamp(1, normals.len() - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    normals.shuffle(&mut rng);
    let chosen: BTreeSet<usize> = normals[..n_train].iter().copied().collect();

    let mut train = LabeledCorpus::new(format!("{} [train]", corpus.source));
    let mut held_out = LabeledCorpus::new(format!("{} [held-out]", corpus.source));
    for (i, e) in corpus.entries.iter().enumerate() {
        if chosen.contains(&i) {
            train.entries.push(e.clone());
        } else {
            held_out.entries.push(e.clone());
        }
    }
    Ok((train, held_out))
}

mod synth {
    use super::*;

    #[derive(Clone, Copy)]
    pub(super) enum Shape {
        Const(&'static str),
        Pick(&'static [&'static str]),
        Login,
        Password,
        Digits(u32, u32),
        Email,
        Dni,
    }

    pub(super) struct Template {
        pub method: &'static str,
        pub path: &'static str,
        pub params: &'static [(&'static str, Shape)],
    }

    const NAMES: &[&str] = &[
        "Maria", "Jose", "Antonio", "Carmen", "Lucia", "Pablo", "Elena", "Javier", "Rosa", "Miguel",
    ];
    const SURNAMES: &[&str] = &[
        "Garcia", "Lopez", "Martinez", "Sanchez", "Perez", "Gomez", "Ruiz", "Diaz", "Moreno", "Alonso",
    ];
    const CITIES: &[&str] = &[
        "Madrid", "Sevilla", "Toledo", "Valencia", "Bilbao", "Zaragoza", "Murcia", "Cadiz",
    ];
    const PRODUCTS: &[&str] = &[
        "Queso+Manchego",
        "Vino+Rioja",
        "Aceite+Oliva",
        "Jamon+Serrano",
        "Turron",
        "Chorizo",
    ];
    const WORDS: &[&str] = &[
        "alba", "monte", "sol", "rio", "luna", "campo", "mar", "pino", "roble", "nieve",
    ];

    pub(super) const TEMPLATES: &[Template] = &[
        Template {
            method: "POST",
            path: "/tienda1/publico/registro.jsp",
            params: &[
                ("modo", Shape::Const("registro")),
                ("login", Shape::Login),
                ("password", Shape::Password),
                ("nombre", Shape::Pick(NAMES)),
                ("apellidos", Shape::Pick(SURNAMES)),
                ("dni", Shape::Dni),
                ("ciudad", Shape::Pick(CITIES)),
                ("cp", Shape::Digits(10000, 52999)),
                ("B1", Shape::Const("Registrar")),
            ],
        },
        Template {
            method: "GET",
            path: "/tienda1/publico/autenticar.jsp",
            params: &[
                ("modo", Shape::Const("entrar")),
                ("login", Shape::Login),
                ("pwd", Shape::Password),
                ("remember", Shape::Pick(&["on", "off"])),
                ("B1", Shape::Const("Entrar")),
            ],
        },
        Template {
            method: "GET",
            path: "/tienda1/publico/anadir.jsp",
            params: &[
                ("id", Shape::Digits(1, 40)),
                ("nombre", Shape::Pick(PRODUCTS)),
                ("precio", Shape::Digits(5, 250)),
                ("cantidad", Shape::Digits(1, 99)),
                ("B1", Shape::Const("Anadir")),
            ],
        },
        Template {
            method: "POST",
            path: "/tienda1/publico/pagar.jsp",
            params: &[
                ("modo", Shape::Const("insertar")),
                ("precio", Shape::Digits(5, 2500)),
                ("email", Shape::Email),
                ("B1", Shape::Const("Confirmar")),
            ],
        },
        Template {
            method: "GET",
            path: "/tienda1/miembros/editar.jsp",
            params: &[
                ("modo", Shape::Const("registro")),
                ("login", Shape::Login),
                ("nombre", Shape::Pick(NAMES)),
                ("ciudad", Shape::Pick(CITIES)),
                ("B1", Shape::Const("Registrar")),
            ],
        },
        Template {
            method: "GET",
            path: "/tienda1/publico/vaciar.jsp",
            params: &[("B2", Shape::Const("Vaciar+carrito"))],
        },
    ];

    /// Payloads are already in URL form (`+` for spaces).
    pub const SQLI_PAYLOADS: &[&str] = &[
        "'+OR+'1'='1",
        "1'+UNION+SELECT+login,password+FROM+usuarios--",
        "x';+DROP+TABLE+usuarios;+--",
        "admin'+OR+1=1--",
    ];
    pub const XSS_PAYLOADS: &[&str] = &[
        "<script>alert(document.cookie)</script>",
        "\"><script>alert('xss')</script>",
        "<img+src=x+onerror=alert(1)>",
    ];
    /// Repeated units for overflow payloads; each is expanded past 512 chars.
    pub const OVERFLOW_UNITS: &[&str] = &["%90", "A%41", "%25n"];
    pub const OVERFLOW_MIN_LEN: usize = 600;

    fn value(shape: Shape, rng: &mut ChaCha8Rng) -> String {
        match shape {
            Shape::Const(s) => s.to_string(),
            Shape::Pick(list) => list[rng.gen_range(0..list.len())].to_string(),
            Shape::Login => {
                let w = WORDS[rng.gen_range(0..WORDS.len())];
                if rng.gen_bool(0.5) {
                    format!("{w}{}", rng.gen_range(1..100))
                } else {
                    w.to_string()
                }
            }
            Shape::Password => {
                let len = rng.gen_range(6..11);
                (0..len)
                    .map(|i| {
                        if i % 3 == 2 {
                            char::from(b'0' + rng.gen_range(0..10))
                        } else {
                            char::from(b'a' + rng.gen_range(0..26))
                        }
                    })
                    .collect()
            }
            Shape::Digits(lo, hi) => rng.gen_range(lo..=hi).to_string(),
            Shape::Email => format!(
                "{}%40{}.es",
                WORDS[rng.gen_range(0..WORDS.len())],
                WORDS[rng.gen_range(0..WORDS.len())]
            ),
            Shape::Dni => format!(
                "{:08}{}",
                rng.gen_range(0..100_000_000u32),
                char::from(b'A' + rng.gen_range(0..26))
            ),
        }
    }

    pub(super) fn payload(rng: &mut ChaCha8Rng) -> String {
        match rng.gen_range(0..3) {
            0 => SQLI_PAYLOADS[rng.gen_range(0..SQLI_PAYLOADS.len())].to_string(),
            1 => XSS_PAYLOADS[rng.gen_range(0..XSS_PAYLOADS.len())].to_string(),
            _ => {
                let unit = OVERFLOW_UNITS[rng.gen_range(0..OVERFLOW_UNITS.len())];
                unit.repeat(OVERFLOW_MIN_LEN.div_ceil(unit.len()))
            }
        }
    }

    pub(super) fn render(t: &Template, rng: &mut ChaCha8Rng, inject: Option<(usize, String)>) -> String {
        let query = t
            .params
            .iter()
            .enumerate()
            .map(|(i, (name, shape))| {
                let v = value(*shape, rng);
                match &inject {
                    Some((at, payload)) if *at == i => format!("{name}={payload}"),
                    _ => format!("{name}={v}"),
                }
            })
            .collect::<Vec<_>>()
            .join("&");
        let common = "Host: localhost:8080\r\nUser-Agent: Mozilla/5.0 (compatible; Konqueror/3.5; Linux)\r\nAccept: text/xml,text/html;q=0.9,*/*;q=0.5\r\nConnection: close\r\n";
        if t.method == "POST" {
            format!(
                "POST {} HTTP/1.1\r\n{common}Content-Type: application/x-www-form-urlencoded\r\nContent-Length: {}\r\n\r\n{query}",
                t.path,
                query.len()
            )
        } else {
            format!("GET {}?{query} HTTP/1.1\r\n{common}\r\n", t.path)
        }
    }
}

pub use synth::{OVERFLOW_MIN_LEN, OVERFLOW_UNITS, SQLI_PAYLOADS, XSS_PAYLOADS};

/// Generates a labeled corpus from a fixed shop-application grammar. Normal
/// entries come first; each attack is a normal request with one parameter
/// value replaced by an SQL injection, XSS or overflow payload.
pub fn synthesize_corpus(n_normal: usize, n_attack: usize, seed: u64) -> LabeledCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut corpus = LabeledCorpus::new(format!("synthetic(seed={seed})"));
    let templates = synth::TEMPLATES;
    for _ in 0..n_normal {
        let t = &templates[rng.gen_range(0..templates.len())];
        let text = synth::render(t, &mut rng, None);
        corpus.push(parse_raw_http(&text).expect("generated request parses"), Label::Normal);
    }
    for _ in 0..n_attack {
        let t = &templates[rng.gen_range(0..templates.len())];
        let at = rng.gen_range(0..t.params.len());
        let payload = synth::payload(&mut rng);
        let text = synth::render(t, &mut rng, Some((at, payload)));
        corpus.push(
            parse_raw_http(&text).expect("generated request parses"),
            Label::Malicious,
        );
    }
    corpus
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const REGISTRATION_REQUEST: &str = "POST /tienda1/publico/registro.jsp?modo=registro&login=m6&password=m6&nombre=m&apellidos=m&email=m&dni=mm&direccion=Calle+Salvatierra+196+%2C+&ciudad=m&provincia=31&cp=68970&ntc=6987987070987097&B1=Registrar";

    #[test]
    fn parses_shop_registration_request() {
        let r = parse_raw_http(REGISTRATION_REQUEST).unwrap();
        assert_eq!(r.method, "POST");
        assert!(r.target.starts_with("/tienda1/publico/registro.jsp?modo=registro"));
        assert!(r.headers.is_empty());
        assert_eq!(r.raw_text(), REGISTRATION_REQUEST);
    }

    #[test]
    fn parses_minimal_request() {
        let r = parse_raw_http("GET /").unwrap();
        assert_eq!(r.method, "GET");
        assert_eq!(r.target, "/");
        assert!(r.headers.is_empty());
        assert!(r.body.is_empty());
        assert_eq!(r.version, "");
    }

    #[test]
    fn rejects_empty_and_targetless() {
        assert!(matches!(parse_raw_http(""), Err(IngestError::MalformedRequest(_))));
        assert!(matches!(parse_raw_http("  \n"), Err(IngestError::MalformedRequest(_))));
        assert!(matches!(parse_raw_http("GET"), Err(IngestError::MalformedRequest(_))));
        assert!(matches!(
            parse_raw_http("<<< />"),
            Err(IngestError::MalformedRequest(_))
        ));
    }

    #[test]
    fn parses_headers_and_body() {
        let text = "POST /a HTTP/1.1\r\nHost:  x\r\nWeird\r\n\r\nk=v\r\n";
        let r = parse_raw_http(text).unwrap();
        assert_eq!(r.version, "HTTP/1.1");
        assert_eq!(r.header("host"), Some("x"));
        assert_eq!(r.headers[1].name, "Weird");
        assert_eq!(r.body, "k=v\r\n");
        assert_eq!(r.serialize(), text);
    }

    proptest! {
        #[test]
        fn parse_never_panics_and_roundtrips(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            let text = decode_text(&bytes);
            if let Ok(r) = parse_raw_http(&text) {
                prop_assert_eq!(r.serialize(), text);
                prop_assert!(!r.method.is_empty());
            }
        }

        #[test]
        fn structured_requests_roundtrip(
            method in "[A-Z]{1,7}",
            target in "/[a-z0-9/?&=%.]{0,30}",
            headers in proptest::collection::vec(("[A-Za-z-]{1,10}", "[ -~]{0,20}"), 0..4),
            body in "[ -~\r\n]{0,40}",
            crlf in any::<bool>(),
        ) {
            let eol = if crlf { "\r\n" } else { "\n" };
            let mut text = format!("{method} {target} HTTP/1.0{eol}");
            for (n, v) in &headers {
                text.push_str(&format!("{n}: {v}{eol}"));
            }
            text.push_str(eol);
            text.push_str(&body);
            let r = parse_raw_http(&text).unwrap();
            prop_assert_eq!(&r.method, &method);
            prop_assert_eq!(&r.target, &target);
            prop_assert_eq!(r.serialize(), text);
        }
    }

    #[test]
    fn latin1_fallback() {
        assert_eq!(decode_text(b"caf\xe9"), "café");
        assert_eq!(decode_text("café".as_bytes()), "café");
    }

    #[test]
    fn blank_line_records_attach_bodies() {
        let text = "GET /a HTTP/1.1\nHost: h\n\nPOST /b HTTP/1.1\nHost: h\n\nx=1&y=2\n\n\nGET /c\n";
        let recs = parse_records(text, CorpusFormat::BlankLineSeparated, Path::new("t")).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].raw_text(), "GET /a HTTP/1.1\nHost: h");
        assert_eq!(recs[1].body, "x=1&y=2");
        assert_eq!(recs[1].raw_text(), "POST /b HTTP/1.1\nHost: h\n\nx=1&y=2");
        assert_eq!(recs[2].target, "/c");
    }

    #[test]
    fn blank_line_format_error_has_line_number() {
        let err = parse_records("\n\nnot a request\n", CorpusFormat::BlankLineSeparated, Path::new("f")).unwrap_err();
        match err {
            IngestError::Format { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn url_encoded_lines() {
        let text = "GET%20%2Fa%3Fx%3D1%20HTTP%2F1.1\n\nPOST%20%2Fb%0D%0A%0D%0Ak%3Dv\n";
        let recs = parse_records(text, CorpusFormat::OnePerLineUrlEncoded, Path::new("f")).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].target, "/a?x=1");
        assert_eq!(recs[1].body, "k=v");
        let err = parse_records(
            "GET%20%2F\n%20\n%3C%3E\n",
            CorpusFormat::OnePerLineUrlEncoded,
            Path::new("f"),
        )
        .unwrap_err();
        assert!(matches!(err, IngestError::Format { line: 3, .. }), "{err}");
    }

    #[test]
    fn directory_convention() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("normal")).unwrap();
        fs::create_dir(dir.path().join("anomalous")).unwrap();
        for i in 0..3 {
            fs::write(dir.path().join(format!("normal/{i}.txt")), format!("GET /n{i}")).unwrap();
        }
        for i in 0..2 {
            fs::write(dir.path().join(format!("anomalous/{i}.txt")), format!("GET /a{i}?x='")).unwrap();
        }
        let c = load_corpus(dir.path(), CorpusFormat::BlankLineSeparated).unwrap();
        assert_eq!(c.len(), 5);
        assert_eq!(c.count(Label::Normal), 3);
        assert_eq!(c.count(Label::Normal) + c.count(Label::Malicious), c.len());
    }

    #[test]
    fn sidecar_labels() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("reqs.txt");
        fs::write(&f, "GET /a\n\nGET /b\n").unwrap();
        fs::write(sidecar_path(&f), "0\tnormal\n1\tanomalous\n").unwrap();
        let c = load_corpus(&f, CorpusFormat::BlankLineSeparated).unwrap();
        assert_eq!(c.entries[1].label, Label::Malicious);
        fs::write(sidecar_path(&f), "0\tnormal\n").unwrap();
        assert!(matches!(
            load_corpus(&f, CorpusFormat::BlankLineSeparated),
            Err(IngestError::Format { .. })
        ));
    }

    #[test]
    fn unreadable_path_is_io_error() {
        let e = load_corpus(
            Path::new("/nonexistent/definitely/not"),
            CorpusFormat::BlankLineSeparated,
        )
        .unwrap_err();
        assert!(matches!(e, IngestError::Io { .. }));
    }

    #[test]
    fn cache_roundtrip() {
        let c = synthesize_corpus(5, 3, 4);
        let text = write_cache(&c);
        assert!(text.starts_with("{\"format_version\":1}\n"));
        let back = read_cache(&text, Path::new("c")).unwrap();
        assert_eq!(back.entries, c.entries);
        assert!(read_cache("{\"format_version\":2}\n", Path::new("c")).is_err());
    }

    #[test]
    fn filter_keeps_matching_and_drops_ambiguous() {
        let rules = default_rules();
        let mut c = LabeledCorpus::new("t");
        c.push(parse_raw_http("GET /a?id=1'+OR+'1'='1").unwrap(), Label::Malicious);
        let out = filter_ambiguous(&c, &rules);
        assert_eq!(out.corpus.entries, c.entries);
        assert_eq!(out.removed, 0);

        let mut c = LabeledCorpus::new("t");
        c.push(parse_raw_http("GET /a?id=7").unwrap(), Label::Malicious);
        c.push(parse_raw_http("GET /a?id=1'+OR+'1'='1").unwrap(), Label::Normal);
        let out = filter_ambiguous(&c, &rules);
        assert_eq!(out.removed, 1);
        assert_eq!(out.corpus.len(), 1);
        assert_eq!(out.corpus.entries[0].label, Label::Normal);
    }

    #[test]
    fn rules_see_encoded_payloads() {
        let rules = default_rules();
        let hit = |s: &str| rules.iter().any(|r| r.matches(s));
        assert!(hit("GET /a?q=%3Cscript%3Ealert(1)%3C/script%3E"));
        assert!(hit("GET /a?f=../../etc/passwd"));
        assert!(hit(&format!("GET /a?b={}", "A".repeat(600))));
        assert!(!hit("GET /tienda1/publico/anadir.jsp?id=2&nombre=Vino+Rioja&precio=85"));
    }

    #[test]
    fn split_arithmetic_and_determinism() {
        let c = synthesize_corpus(10, 4, 3);
        let spec = SplitSpec {
            train_fraction: 0.8,
            seed: 7,
        };
        let (train, held) = split_corpus(&c, &spec).unwrap();
        assert_eq!(train.len(), 8);
        assert_eq!(train.count(Label::Malicious), 0);
        assert_eq!(held.count(Label::Normal), 2);
        assert_eq!(held.count(Label::Malicious), 4);
        let (train2, held2) = split_corpus(&c, &spec).unwrap();
        assert_eq!(train.entries, train2.entries);
        assert_eq!(held.entries, held2.entries);
    }

    #[test]
    fn split_needs_two_normals() {
        let c = synthesize_corpus(1, 5, 3);
        assert!(matches!(
            split_corpus(&c, &SplitSpec::default()),
            Err(IngestError::InsufficientData(_))
        ));
    }

    #[test]
    fn synth_counts() {
        let c = synthesize_corpus(100, 20, 1);
        assert_eq!(c.len(), 120);
        assert_eq!(c.count(Label::Normal), 100);
        let one = synthesize_corpus(1, 0, 99);
        assert_eq!(one.len(), 1);
        assert_eq!(one.entries[0].label, Label::Normal);
    }

    #[test]
    fn synth_is_pure() {
        assert_eq!(synthesize_corpus(30, 10, 5), synthesize_corpus(30, 10, 5));
        assert_ne!(synthesize_corpus(30, 10, 5), synthesize_corpus(30, 10, 6));
    }

    #[test]
    fn synth_attacks_carry_a_payload_marker_and_match_rules() {
        let c = synthesize_corpus(0, 200, 11);
        let rules = default_rules();
        for e in &c.entries {
            let raw = e.request.raw_text();
            let marker = raw.contains("'+OR+")
                || raw.contains("'1'='1")
                || raw.contains("UNION+SELECT")
                || raw.contains("DROP+TABLE")
                || raw.contains("<script>")
                || raw.contains("onerror=")
                || raw.split(char::is_whitespace).any(|r| r.len() > 512);
            assert!(marker, "{raw}");
            assert!(rules.iter().any(|r| r.matches(raw)), "{raw}");
        }
        assert_eq!(filter_ambiguous(&c, &rules).removed, 0);
    }

    #[test]
    fn synth_normals_are_not_flagged() {
        let c = synthesize_corpus(300, 0, 2);
        assert_eq!(filter_ambiguous(&c, &default_rules()).corpus.len(), 300);
        let rules = default_rules();
        for e in &c.entries {
            assert!(
                !rules.iter().any(|r| r.matches(e.request.raw_text())),
                "{}",
                e.request.raw_text()
            );
        }
    }
}
