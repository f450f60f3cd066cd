//! Detection of anomalous HTTP requests by reconstruction error.
//!
//! Requests are segmented into word and punctuation tokens, variable words
//! are replaced by character-class labels, the result is mapped to a padded
//! index sequence, and an ensemble of LSTM, GRU and dense autoencoders
//! trained on normal traffic reconstructs it. A request whose mean absolute
//! reconstruction error reaches the threshold is flagged as malicious.

pub mod detector;
pub mod ensemble;
pub mod ingest;
pub mod lexer;
pub mod neural;
pub mod sequencer;

pub use detector::{
    classify as classify_score, confusion, histogram, metrics, resolve_threshold, ConfusionMatrix, MetricValue,
    MetricsReport, ScoreHistogram, ThresholdPolicy, ThresholdResolution,
};
pub use ensemble::{build_ensemble, Architecture, EnsembleModel, TrainConfig, TrainHistory, TrainMode};
pub use ingest::{Label, LabeledCorpus, RawRequest, SplitSpec};
pub use lexer::{KeepList, LexerOptions, TokenClass, TokenStream};
pub use sequencer::{PaddedSequence, VocabMap};
