//! Train, score and evaluate workflows over a persisted pipeline artifact.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use webguard_core::classify_score;
use webguard_core::detector::{
    confusion, histogram, metrics, resolve_threshold, scores_csv, MetricsReport, ScoreHistogram, ScoredRequest,
    ThresholdPolicy, ThresholdResolution,
};
use webguard_core::ensemble::{
    train_with_progress, Architecture, EnsembleError, EnsembleModel, ModelManifest, TrainConfig, TrainHistory,
    TrainMode,
};
use webguard_core::ingest::{
    default_rules, filter_ambiguous, load_corpus, load_requests, sidecar_path, split_corpus, synthesize_corpus,
    CorpusFormat, Label, LabeledCorpus, RawRequest, SplitSpec,
};
use webguard_core::lexer::{build_keep_list, tokenize_request, KeepList, LexerOptions};
use webguard_core::sequencer::{build_vocab, encode, pad_or_truncate, PaddedSequence, Scaling, VocabMap};

pub const ARTIFACT_FORMAT_VERSION: u32 = 1;

/// Process exit status for each failure class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Usage = 2,
    Data = 3,
    Artifact = 4,
    Numeric = 5,
}

/// Marker attached as context to every failure; carries the stage name and
/// the exit class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stage {
    pub name: &'static str,
    pub kind: ExitKind,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} failed", self.name)
    }
}

fn stage(name: &'static str, kind: ExitKind) -> Stage {
    Stage { name, kind }
}

/// Exit code for an error produced by this crate; 1 if it carries no stage.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    err.downcast_ref::<Stage>().map(|s| s.kind as i32).unwrap_or(1)
}

fn ensemble_kind(e: &EnsembleError) -> ExitKind {
    match e {
        EnsembleError::NonFiniteLoss { .. } | EnsembleError::Neural(_) => ExitKind::Numeric,
        EnsembleError::EmptyTrainingSet => ExitKind::Data,
        EnsembleError::InvalidConfig(_) => ExitKind::Usage,
        EnsembleError::Checkpoint(_) => ExitKind::Artifact,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    #[default]
    Raw,
    UrlLines,
}

impl DatasetFormat {
    fn corpus_format(self) -> CorpusFormat {
        match self {
            DatasetFormat::Raw => CorpusFormat::BlankLineSeparated,
            DatasetFormat::UrlLines => CorpusFormat::OnePerLineUrlEncoded,
        }
    }
}

/// Every tunable of a run. A run is reproducible from this and the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seq_len: usize,
    pub min_support: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub threshold: ThresholdPolicy,
    pub include_headers: bool,
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub encoder_widths: Vec<usize>,
    pub train_mode: TrainMode,
    pub scaling: Scaling,
    pub filter_ambiguous: bool,
    pub dataset_format: DatasetFormat,
    pub dataset: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seq_len: 50,
            min_support: 0.1,
            epochs: 90,
            batch_size: 32,
            learning_rate: 0.002,
            seed: 0,
            threshold: ThresholdPolicy::default(),
            include_headers: false,
            train_fraction: 0.8,
            validation_fraction: 0.2,
            encoder_widths: vec![50, 25],
            train_mode: TrainMode::Joint,
            scaling: Scaling::None,
            filter_ambiguous: false,
            dataset_format: DatasetFormat::Raw,
            dataset: None,
        }
    }
}

fn parse_bool(v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => bail!("expected a boolean, got {v:?}"),
    }
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "seq_len",
        "min_support",
        "epochs",
        "batch_size",
        "learning_rate",
        "seed",
        "threshold",
        "include_headers",
        "train_fraction",
        "validation_fraction",
        "encoder_widths",
        "train_mode",
        "scaling",
        "filter_ambiguous",
        "dataset_format",
        "dataset",
    ];

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let num_err = || format!("bad value {v:?} for {key}");
        match key.trim() {
            "seq_len" => self.seq_len = v.parse().with_context(num_err)?,
            "min_support" => self.min_support = v.parse().with_context(num_err)?,
            "epochs" => self.epochs = v.parse().with_context(num_err)?,
            "batch_size" => self.batch_size = v.parse().with_context(num_err)?,
            "learning_rate" => self.learning_rate = v.parse().with_context(num_err)?,
            "seed" => self.seed = v.parse().with_context(num_err)?,
            "threshold" => self.threshold = v.parse().map_err(|e| anyhow!("{e}"))?,
            "include_headers" => self.include_headers = parse_bool(v)?,
            "train_fraction" => self.train_fraction = v.parse().with_context(num_err)?,
            "validation_fraction" => self.validation_fraction = v.parse().with_context(num_err)?,
            "encoder_widths" => {
                self.encoder_widths = v
                    .split(',')
                    .map(|w| w.trim().parse::<usize>())
                    .collect::<Result<_, _>>()
                    .with_context(num_err)?
            }
            "train_mode" => {
                self.train_mode = match v {
                    "joint" => TrainMode::Joint,
                    "staged" => TrainMode::Staged,
                    _ => bail!("train_mode must be joint or staged, got {v:?}"),
                }
            }
            "scaling" => {
                self.scaling = match v {
                    "none" => Scaling::None,
                    "minmax" => Scaling::MinMax,
                    _ => bail!("scaling must be none or minmax, got {v:?}"),
                }
            }
            "filter_ambiguous" => self.filter_ambiguous = parse_bool(v)?,
            "dataset_format" => {
                self.dataset_format = match v {
                    "raw" => DatasetFormat::Raw,
                    "url-lines" | "url_lines" => DatasetFormat::UrlLines,
                    _ => bail!("dataset_format must be raw or url-lines, got {v:?}"),
                }
            }
            "dataset" => self.dataset = Some(PathBuf::from(v)),
            other => bail!("unknown config key {other:?}"),
        }
        Ok(())
    }

    /// Applies `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key=value", i + 1))?;
            self.set(k, v).with_context(|| format!("line {}", i + 1))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 {
            bail!("seq_len must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.min_support) {
            bail!("min_support must lie in [0,1]");
        }
        self.threshold.validate().map_err(|e| anyhow!("{e}"))?;
        Architecture::new(self.encoder_widths.clone()).map_err(|e| anyhow!("{e}"))?;
        Ok(())
    }

    pub fn lexer_options(&self) -> LexerOptions {
        LexerOptions {
            include_headers: self.include_headers,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: self.seed,
            validation_fraction: self.validation_fraction,
            mode: self.train_mode,
        }
    }
}

/// Writes via a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("temp file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .map_err(|e| e.error)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

const KEEP_FILE: &str = "keep_list.txt";
const VOCAB_FILE: &str = "vocab.tsv";
const MODEL_FILE: &str = "model.bin";
const THRESHOLD_FILE: &str = "threshold";
const HISTORY_FILE: &str = "history.csv";
const TRAIN_SCORES_FILE: &str = "train_scores.csv";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactManifest {
    pub format_version: u32,
    pub seq_len: usize,
    pub seed: u64,
    pub vocab_fingerprint: String,
    pub model: ModelManifest,
    pub threshold: ThresholdResolution,
    pub config: RunConfig,
    /// SHA-256 of each stage file, keyed by file name.
    pub hashes: std::collections::BTreeMap<String, String>,
}

/// Everything needed to score new requests exactly as during training.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineArtifact {
    pub config: RunConfig,
    pub keep_list: KeepList,
    pub vocab: VocabMap,
    pub model: EnsembleModel,
    pub threshold: ThresholdResolution,
}

fn threshold_text(t: &ThresholdResolution) -> String {
    let mut s = format!("policy={}\nvalue={}\n", t.policy, t.value);
    if let Some(f) = &t.fallback {
        s.push_str(&format!("fallback={f}\n"));
    }
    s
}

impl PipelineArtifact {
    pub fn seq_len(&self) -> usize {
        self.model.seq_len
    }

    pub fn sequence(&self, req: &RawRequest) -> PaddedSequence {
        let stream = tokenize_request(req, &self.keep_list, self.config.lexer_options());
        let seq = pad_or_truncate(&encode(&stream, &self.vocab), self.seq_len());
        self.config.scaling.apply(seq, self.vocab.vocab_size())
    }

    pub fn score(&self, req: &RawRequest) -> Result<f64> {
        self.model
            .score(&self.sequence(req))
            .map_err(|e| anyhow!(e))
            .context(stage("scoring", ExitKind::Numeric))
    }

    /// Scores every request, fanning out over `threads` workers.
    pub fn score_all(&self, requests: &[&RawRequest], threads: usize) -> Result<Vec<f64>> {
        let threads = threads.max(1).min(requests.len().max(1));
        if threads == 1 {
            return requests.iter().map(|r| self.score(r)).collect();
        }
        let chunk = requests.len().div_ceil(threads);
        let parts: Vec<Result<Vec<f64>>> = std::thread::scope(|s| {
            let handles: Vec<_> = requests
                .chunks(chunk)
                .map(|c| s.spawn(move || c.iter().map(|r| self.score(r)).collect::<Result<Vec<f64>>>()))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("scoring worker panicked"))
                .collect()
        });
        let mut out = Vec::with_capacity(requests.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    fn files(&self) -> Vec<(&'static str, Vec<u8>)> {
        vec![
            (KEEP_FILE, self.keep_list.to_text().into_bytes()),
            (VOCAB_FILE, self.vocab.to_text(self.seq_len()).into_bytes()),
            (MODEL_FILE, self.model.checkpoint_bytes()),
            (THRESHOLD_FILE, threshold_text(&self.threshold).into_bytes()),
        ]
    }

    pub fn manifest(&self) -> ArtifactManifest {
        ArtifactManifest {
            format_version: ARTIFACT_FORMAT_VERSION,
            seq_len: self.seq_len(),
            seed: self.config.seed,
            vocab_fingerprint: self.vocab.fingerprint(),
            model: self.model.manifest(),
            threshold: self.threshold.clone(),
            config: self.config.clone(),
            hashes: self
                .files()
                .into_iter()
                .map(|(n, b)| (n.to_string(), sha256_hex(&b)))
                .collect(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let inner = || -> Result<()> {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            for (name, bytes) in self.files() {
                write_atomic(&dir.join(name), &bytes)?;
            }
            let manifest = serde_json::to_string_pretty(&self.manifest())? + "\n";
            write_atomic(&dir.join(MANIFEST_FILE), manifest.as_bytes())
        };
        inner().context(stage("writing artifact", ExitKind::Data))
    }

    /// Loads and verifies every stage hash and the vocab/model pairing.
    pub fn load(dir: &Path) -> Result<Self> {
        Self::load_inner(dir).context(stage("loading artifact", ExitKind::Artifact))
    }

    fn load_inner(dir: &Path) -> Result<Self> {
        let read =
            |name: &str| fs::read(dir.join(name)).with_context(|| format!("reading {}", dir.join(name).display()));
        let manifest: ArtifactManifest =
            serde_json::from_slice(&read(MANIFEST_FILE)?).context("parsing manifest.json")?;
        if manifest.format_version != ARTIFACT_FORMAT_VERSION {
            bail!("unsupported artifact format_version {}", manifest.format_version);
        }
        let mut blobs = std::collections::BTreeMap::new();
        for name in [KEEP_FILE, VOCAB_FILE, MODEL_FILE, THRESHOLD_FILE] {
            let bytes = read(name)?;
            let want = manifest
                .hashes
                .get(name)
                .ok_or_else(|| anyhow!("manifest has no hash for {name}"))?;
            let got = sha256_hex(&bytes);
            if &got != want {
                bail!("hash mismatch for {name}: manifest {want}, file {got}");
            }
            blobs.insert(name, bytes);
        }
        let text = |name: &str| String::from_utf8(blobs[name].clone()).with_context(|| format!("{name} is not UTF-8"));
        let keep_list = KeepList::from_text(&text(KEEP_FILE)?).map_err(|e| anyhow!("{KEEP_FILE}: {e}"))?;
        let (vocab, seq_len) = VocabMap::from_text(&text(VOCAB_FILE)?).map_err(|e| anyhow!("{VOCAB_FILE}: {e}"))?;
        if vocab.fingerprint() != manifest.vocab_fingerprint || vocab.fingerprint() != manifest.model.vocab_fingerprint
        {
            bail!("vocabulary does not match the model it was trained with");
        }
        if seq_len != manifest.seq_len || seq_len != manifest.model.seq_len {
            bail!(
                "sequence length mismatch: vocab {seq_len}, manifest {}, model {}",
                manifest.seq_len,
                manifest.model.seq_len
            );
        }
        let model = EnsembleModel::from_checkpoint(&manifest.model, &blobs[MODEL_FILE]).map_err(|e| anyhow!(e))?;
        let threshold = manifest.threshold.clone();
        if !(threshold.value.is_finite() && threshold.value > 0.0) {
            bail!("threshold {} is not a positive finite value", threshold.value);
        }
        if text(THRESHOLD_FILE)? != threshold_text(&threshold) {
            bail!("threshold file disagrees with manifest");
        }
        Ok(Self {
            config: manifest.config,
            keep_list,
            vocab,
            model,
            threshold,
        })
    }
}

/// Loads a dataset with labels when available: a `normal/`/`anomalous/`
/// directory, or a file with a `.labels.tsv` sidecar. A plain file yields
/// unlabeled requests.
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<(Vec<RawRequest>, Option<Vec<Label>>)> {
    let inner = || -> Result<(Vec<RawRequest>, Option<Vec<Label>>)> {
        if path.is_dir() || sidecar_path(path).is_file() {
            let corpus = load_corpus(path, format.corpus_format())?;
            let labels = corpus.entries.iter().map(|e| e.label).collect();
            Ok((corpus.entries.into_iter().map(|e| e.request).collect(), Some(labels)))
        } else {
            Ok((load_requests(path, format.corpus_format())?, None))
        }
    };
    inner().context(stage("loading dataset", ExitKind::Data))
}

fn load_labeled(path: &Path, format: DatasetFormat) -> Result<LabeledCorpus> {
    load_corpus(path, format.corpus_format())
        .map_err(|e| anyhow!(e))
        .context(stage("loading dataset", ExitKind::Data))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub artifact: PipelineArtifact,
    pub history: TrainHistory,
    /// Training-set scores in training-corpus order, as used for the threshold.
    pub train_scores: Vec<f64>,
    pub n_train: usize,
    pub n_filtered: usize,
}

/// split → keep-list → vocab → pad → train → threshold, all in memory.
pub fn train_pipeline(
    config: &RunConfig,
    corpus: &LabeledCorpus,
    progress: impl FnMut(&webguard_core::ensemble::EpochStats),
) -> Result<TrainOutcome> {
    config.validate().context(stage("configuration", ExitKind::Usage))?;
    let (corpus, n_filtered) = if config.filter_ambiguous {
        let out = filter_ambiguous(corpus, &default_rules());
        (out.corpus, out.removed)
    } else {
        (corpus.clone(), 0)
    };
    let split = SplitSpec {
        train_fraction: config.train_fraction,
        seed: config.seed,
    };
    let (train, _held_out) = split_corpus(&corpus, &split)
        .map_err(|e| anyhow!(e))
        .context(stage("splitting", ExitKind::Data))?;
    let opts = config.lexer_options();
    let keep_list = build_keep_list(&train, config.min_support, opts);
    let streams: Vec<_> = train
        .requests()
        .map(|r| tokenize_request(r, &keep_list, opts))
        .collect();
    let vocab = build_vocab(&streams)
        .map_err(|e| anyhow!(e))
        .context(stage("vocabulary", ExitKind::Data))?;
    let seqs: Vec<PaddedSequence> = streams
        .iter()
        .map(|s| {
            config
                .scaling
                .apply(pad_or_truncate(&encode(s, &vocab), config.seq_len), vocab.vocab_size())
        })
        .collect();
    let arch = Architecture::new(config.encoder_widths.clone()).map_err(|e| anyhow!(e))?;
    let mut model = EnsembleModel::new(config.seq_len, vocab.fingerprint(), config.seed, &arch)
        .map_err(|e| anyhow!(e))
        .context(stage("model construction", ExitKind::Usage))?;
    let history = train_with_progress(&mut model, &seqs, &config.train_config(), progress).map_err(|e| {
        let kind = ensemble_kind(&e);
        anyhow!(e).context(stage("training", kind))
    })?;
    let train_scores = seqs
        .iter()
        .map(|s| model.score(s))
        .collect::<Result<Vec<f64>, _>>()
        .map_err(|e| anyhow!(e))
        .context(stage("scoring training set", ExitKind::Numeric))?;
    let threshold = resolve_threshold(&train_scores, config.threshold)
        .map_err(|e| anyhow!(e))
        .context(stage("threshold", ExitKind::Numeric))?;
    Ok(TrainOutcome {
        artifact: PipelineArtifact {
            config: config.clone(),
            keep_list,
            vocab,
            model,
            threshold,
        },
        history,
        train_scores,
        n_train: train.len(),
        n_filtered,
    })
}

/// Loads the dataset, trains, and writes the artifact directory.
pub fn cmd_train(
    config: &RunConfig,
    dataset: &Path,
    out_dir: &Path,
    progress: impl FnMut(&webguard_core::ensemble::EpochStats),
) -> Result<TrainOutcome> {
    let corpus = load_labeled(dataset, config.dataset_format)?;
    let mut config = config.clone();
    config.dataset = Some(dataset.to_path_buf());
    let outcome = train_pipeline(&config, &corpus, progress)?;
    outcome.artifact.save(out_dir)?;
    let mut scores = String::from("index,mae\n");
    for (i, s) in outcome.train_scores.iter().enumerate() {
        scores.push_str(&format!("{i},{s}\n"));
    }
    let extra = || -> Result<()> {
        write_atomic(&out_dir.join(HISTORY_FILE), outcome.history.to_csv().as_bytes())?;
        write_atomic(&out_dir.join(TRAIN_SCORES_FILE), scores.as_bytes())
    };
    extra().context(stage("writing artifact", ExitKind::Data))?;
    Ok(outcome)
}

/// Scores a dataset; the returned rows follow dataset order with ids `0..n`.
pub fn cmd_score(
    artifact: &PipelineArtifact,
    dataset: &Path,
    format: DatasetFormat,
    threads: usize,
) -> Result<Vec<ScoredRequest>> {
    let (requests, labels) = load_dataset(dataset, format)?;
    let refs: Vec<&RawRequest> = requests.iter().collect();
    let scores = artifact.score_all(&refs, threads)?;
    Ok(scores
        .into_iter()
        .enumerate()
        .map(|(i, mae)| ScoredRequest {
            request_id: i.to_string(),
            mae,
            label: labels.as_ref().map(|l| l[i]),
            verdict: classify_score(mae, artifact.threshold.value),
        })
        .collect())
}

pub fn write_scores(rows: &[ScoredRequest], path: &Path) -> Result<()> {
    write_atomic(path, scores_csv(rows).as_bytes()).context(stage("writing scores", ExitKind::Data))
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub scored: Vec<ScoredRequest>,
    pub metrics: MetricsReport,
    pub histogram_all: Option<ScoreHistogram>,
    pub histogram_normal: Option<ScoreHistogram>,
    pub histogram_malicious: Option<ScoreHistogram>,
    pub threshold: f64,
}

pub const DEFAULT_HISTOGRAM_BINS: usize = 50;

pub fn evaluate(rows: Vec<ScoredRequest>, threshold: f64, bins: usize) -> Result<EvalReport> {
    let labels: Vec<Label> = rows
        .iter()
        .map(|r| r.label.ok_or_else(|| anyhow!("request {} has no label", r.request_id)))
        .collect::<Result<_>>()
        .context(stage("evaluation", ExitKind::Data))?;
    let verdicts: Vec<Label> = rows.iter().map(|r| r.verdict).collect();
    let cm = confusion(&labels, &verdicts)
        .map_err(|e| anyhow!(e))
        .context(stage("evaluation", ExitKind::Data))?;
    let hist = |pick: Option<Label>| -> Result<Option<ScoreHistogram>> {
        let s: Vec<f64> = rows
            .iter()
            .filter(|r| pick.is_none() || r.label == pick)
            .map(|r| r.mae)
            .collect();
        if s.is_empty() {
            return Ok(None);
        }
        Ok(Some(
            histogram(&s, bins)
                .map_err(|e| anyhow!(e))
                .context(stage("histogram", ExitKind::Usage))?,
        ))
    };
    Ok(EvalReport {
        histogram_all: hist(None)?,
        histogram_normal: hist(Some(Label::Normal))?,
        histogram_malicious: hist(Some(Label::Malicious))?,
        metrics: metrics(&cm),
        scored: rows,
        threshold,
    })
}

/// Scores a labeled dataset and computes confusion counts, metrics and histograms.
pub fn cmd_eval(
    artifact: &PipelineArtifact,
    dataset: &Path,
    format: DatasetFormat,
    threads: usize,
    bins: usize,
) -> Result<EvalReport> {
    let rows = cmd_score(artifact, dataset, format, threads)?;
    if rows.iter().any(|r| r.label.is_none()) {
        return Err(anyhow!("dataset {} carries no labels", dataset.display()))
            .context(stage("evaluation", ExitKind::Data));
    }
    evaluate(rows, artifact.threshold.value, bins)
}

impl EvalReport {
    /// `metrics.txt`, `metrics.json`, `scores.csv` and the histogram CSVs.
    pub fn write(&self, out_dir: &Path) -> Result<Vec<PathBuf>> {
        let inner = || -> Result<Vec<PathBuf>> {
            let mut written = Vec::new();
            let mut put = |name: &str, body: String| -> Result<()> {
                let p = out_dir.join(name);
                write_atomic(&p, body.as_bytes())?;
                written.push(p);
                Ok(())
            };
            put(
                "metrics.txt",
                format!("threshold={}\n{}", self.threshold, self.metrics.to_key_value()),
            )?;
            let mut json = self.metrics.to_json();
            json["threshold"] = serde_json::json!(self.threshold);
            put("metrics.json", serde_json::to_string_pretty(&json)? + "\n")?;
            put("scores.csv", scores_csv(&self.scored))?;
            for (name, h) in [
                ("histogram.csv", &self.histogram_all),
                ("histogram_normal.csv", &self.histogram_normal),
                ("histogram_malicious.csv", &self.histogram_malicious),
            ] {
                if let Some(h) = h {
                    put(name, h.to_csv())?;
                }
            }
            Ok(written)
        };
        inner().context(stage("writing report", ExitKind::Data))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthSummary {
    pub normal_files: usize,
    pub attack_files: usize,
}

/// Writes a synthetic corpus as one raw request per file under `normal/` and `anomalous/`.
pub fn cmd_synth(n_normal: usize, n_attack: usize, seed: u64, out: &Path) -> Result<SynthSummary> {
    if n_normal == 0 {
        return Err(anyhow!("n_normal must be >= 1")).context(stage("synth", ExitKind::Usage));
    }
    let corpus = synthesize_corpus(n_normal, n_attack, seed);
    let inner = || -> Result<SynthSummary> {
        let mut summary = SynthSummary {
            normal_files: 0,
            attack_files: 0,
        };
        for (i, e) in corpus.entries.iter().enumerate() {
            let (sub, counter) = match e.label {
                Label::Normal => ("normal", &mut summary.normal_files),
                Label::Malicious => ("anomalous", &mut summary.attack_files),
            };
            let path = out.join(sub).join(format!("{i:06}.txt"));
            write_atomic(&path, e.request.raw_text().as_bytes())?;
            *counter += 1;
        }
        Ok(summary)
    };
    inner().context(stage("synth", ExitKind::Data))
}

/// Metrics for given confusion counts, without any scoring.
pub fn metrics_for_counts(tp: u64, tn: u64, fp: u64, fn_: u64) -> MetricsReport {
    metrics(&webguard_core::ConfusionMatrix::new(tp, tn, fp, fn_))
}
