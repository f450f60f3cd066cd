//! The reconstruction ensemble: an LSTM autoencoder, a GRU autoencoder and a
//! stacked dense autoencoder run side by side on the same padded sequence.
//! Their three reconstructions are concatenated and a linear dense layer
//! compresses the `3L` values back to `L`.
//!
//! Recurrent autoencoders treat each padded position as one timestep with a
//! scalar input. Encoder and decoder layers all return full sequences and a
//! per-timestep linear projection maps the last decoder state back to one
//! value per position.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::neural::{
    mae_loss, read_tensors, write_tensors, Activation, CellKind, DenseLayer, Matrix, NadamConfig, NadamState,
    NeuralError, Parameters, RecurrentCache, RecurrentCell, Sequence,
};
use crate::sequencer::{PaddedSequence, VocabMap};

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("non-finite loss or parameters in epoch {epoch}; model restored to the last good state")]
    NonFiniteLoss { epoch: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Encoder widths of every sub-model; decoders mirror them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub encoder_widths: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            encoder_widths: vec![50, 25],
        }
    }
}

impl Architecture {
    pub fn new(encoder_widths: Vec<usize>) -> Result<Self, EnsembleError> {
        if encoder_widths.is_empty() || encoder_widths.contains(&0) {
            return Err(EnsembleError::InvalidConfig(format!(
                "encoder widths must be non-empty and positive, got {encoder_widths:?}"
            )));
        }
        Ok(Self { encoder_widths })
    }

    pub fn decoder_widths(&self) -> Vec<usize> {
        self.encoder_widths.iter().rev().copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AutoencoderKind {
    LstmAE,
    GruAE,
    StackedAE,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AutoencoderSpec {
    pub kind: AutoencoderKind,
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub activation: Activation,
}

impl AutoencoderSpec {
    pub fn new(kind: AutoencoderKind, arch: &Architecture) -> Self {
        Self {
            kind,
            encoder_widths: arch.encoder_widths.clone(),
            decoder_widths: arch.decoder_widths(),
            activation: match kind {
                AutoencoderKind::StackedAE => Activation::Linear,
                _ => Activation::Tanh,
            },
        }
    }
}

/// Recurrent encoder/decoder stack plus a per-timestep linear read-out.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentAutoencoder {
    name: &'static str,
    encoder_len: usize,
    layers: Vec<RecurrentCell>,
    readout: DenseLayer,
}

struct RecurrentAeCache {
    layers: Vec<RecurrentCache>,
}

impl RecurrentAutoencoder {
    fn new(kind: CellKind, arch: &Architecture, rng: &mut ChaCha8Rng) -> Self {
        let widths: Vec<usize> = arch
            .encoder_widths
            .iter()
            .chain(arch.decoder_widths().iter())
            .copied()
            .collect();
        let mut layers = Vec::with_capacity(widths.len());
        let mut input = 1;
        for &w in &widths {
            layers.push(RecurrentCell::new(kind, input, w, rng));
            input = w;
        }
        Self {
            name: match kind {
                CellKind::Lstm => "lstm",
                CellKind::Gru => "gru",
            },
            encoder_len: arch.encoder_widths.len(),
            layers,
            readout: DenseLayer::new(input, 1, Activation::Linear, rng),
        }
    }

    fn layer_name(&self, i: usize) -> String {
        if i < self.encoder_len {
            format!("{}_enc{}", self.name, i + 1)
        } else {
            format!("{}_dec{}", self.name, i - self.encoder_len + 1)
        }
    }

    /// Latent sequence produced by the encoder half.
    pub fn encode(&self, x: &[f64]) -> Result<Sequence, NeuralError> {
        let mut seq = Sequence::scalars(x);
        for cell in &self.layers[..self.encoder_len] {
            seq = cell.forward_seq(&seq)?.output().clone();
        }
        Ok(seq)
    }

    fn forward_cached(&self, x: &[f64]) -> Result<(Vec<f64>, RecurrentAeCache), NeuralError> {
        let mut caches: Vec<RecurrentCache> = Vec::with_capacity(self.layers.len());
        let first = self.layers[0].forward_seq(&Sequence::scalars(x))?;
        caches.push(first);
        for cell in &self.layers[1..] {
            let next = cell.forward_seq(caches.last().expect("non-empty").output())?;
            caches.push(next);
        }
        let top = caches.last().expect("non-empty").output();
        let w = self.readout.w.as_slice();
        let b = self.readout.b.as_slice()[0];
        let out = (0..top.steps).map(|t| crate::neural::dot(w, top.step(t)) + b).collect();
        Ok((out, RecurrentAeCache { layers: caches }))
    }

    fn backward(&self, cache: &RecurrentAeCache, d_out: &[f64], grad: &mut RecurrentAutoencoder) {
        let top = cache.layers.last().expect("non-empty").output();
        let w = self.readout.w.as_slice();
        let mut d_seq = Sequence::zeros(top.steps, top.width);
        let gw = grad.readout.w.as_mut_slice();
        let mut gb = 0.0;
        for (t, &d) in d_out.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            crate::neural::axpy(d, top.step(t), gw);
            gb += d;
            crate::neural::axpy(d, w, d_seq.step_mut(t));
        }
        grad.readout.b.as_mut_slice()[0] += gb;
        for i in (0..self.layers.len()).rev() {
            d_seq = self.layers[i].backward_seq(&cache.layers[i], &d_seq, &mut grad.layers[i]);
        }
    }
}

impl Parameters for RecurrentAutoencoder {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(crate::neural::prefixed(&self.layer_name(i), l.tensors()));
        }
        out.extend(crate::neural::prefixed(
            &format!("{}_out", self.name),
            self.readout.tensors(),
        ));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.extend(self.readout.tensors_mut());
        out
    }
}

/// Dense linear autoencoder over the whole sequence as one vector.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedAutoencoder {
    encoder_len: usize,
    layers: Vec<DenseLayer>,
}

impl StackedAutoencoder {
    fn new(seq_len: usize, arch: &Architecture, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::new();
        let mut input = seq_len;
        for &w in arch.encoder_widths.iter().chain(arch.decoder_widths().iter()) {
            layers.push(DenseLayer::new(input, w, Activation::Linear, rng));
            input = w;
        }
        if input != seq_len {
            layers.push(DenseLayer::new(input, seq_len, Activation::Linear, rng));
        }
        Self {
            encoder_len: arch.encoder_widths.len(),
            layers,
        }
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>, NeuralError> {
        let mut v = x.to_vec();
        for l in &self.layers[..self.encoder_len] {
            v = l.forward(&v)?;
        }
        Ok(v)
    }

    /// Returns every activation, input first.
    fn forward_cached(&self, x: &[f64]) -> Result<Vec<Vec<f64>>, NeuralError> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for l in &self.layers {
            let y = l.forward(acts.last().expect("non-empty"))?;
            acts.push(y);
        }
        Ok(acts)
    }

    fn backward(&self, acts: &[Vec<f64>], d_out: &[f64], grad: &mut StackedAutoencoder) {
        let mut d = d_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            d = self.layers[i].backward(&acts[i], &acts[i + 1], &d, &mut grad.layers[i]);
        }
    }
}

impl Parameters for StackedAutoencoder {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        let n_core = 2 * self.encoder_len;
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let name = if i < n_core {
                format!("stacked_dense{}", i + 1)
            } else {
                "stacked_proj".to_string()
            };
            out.extend(crate::neural::prefixed(&name, l.tensors()));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }
}

/// Output of a forward pass: the final reconstruction plus each sub-model's.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardParts {
    pub x_hat: Vec<f64>,
    pub lstm: Vec<f64>,
    pub gru: Vec<f64>,
    pub stacked: Vec<f64>,
}

impl ForwardParts {
    pub fn concatenated(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(3 * self.x_hat.len());
        v.extend_from_slice(&self.lstm);
        v.extend_from_slice(&self.gru);
        v.extend_from_slice(&self.stacked);
        v
    }
}

struct EnsembleCache {
    lstm: RecurrentAeCache,
    gru: RecurrentAeCache,
    stacked: Vec<Vec<f64>>,
    concat: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    pub lstm_ae: RecurrentAutoencoder,
    pub gru_ae: RecurrentAutoencoder,
    pub stacked_ae: StackedAutoencoder,
    /// Linear `L x 3L` compression of the concatenated reconstructions.
    pub compression: DenseLayer,
    pub seq_len: usize,
    pub seed: u64,
    pub vocab_fingerprint: String,
    pub architecture: Architecture,
}

pub fn build_ensemble(
    seq_len: usize,
    vocab: &VocabMap,
    seed: u64,
    architecture: &Architecture,
) -> Result<EnsembleModel, EnsembleError> {
    EnsembleModel::new(seq_len, vocab.fingerprint(), seed, architecture)
}

impl EnsembleModel {
    pub fn new(
        seq_len: usize,
        vocab_fingerprint: String,
        seed: u64,
        architecture: &Architecture,
    ) -> Result<Self, EnsembleError> {
        if seq_len == 0 {
            return Err(EnsembleError::InvalidConfig("sequence length must be positive".into()));
        }
        let architecture = Architecture::new(architecture.encoder_widths.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lstm_ae = RecurrentAutoencoder::new(CellKind::Lstm, &architecture, &mut rng);
        let gru_ae = RecurrentAutoencoder::new(CellKind::Gru, &architecture, &mut rng);
        let stacked_ae = StackedAutoencoder::new(seq_len, &architecture, &mut rng);
        let compression = DenseLayer::new(3 * seq_len, seq_len, Activation::Linear, &mut rng);
        Ok(Self {
            lstm_ae,
            gru_ae,
            stacked_ae,
            compression,
            seq_len,
            seed,
            vocab_fingerprint,
            architecture,
        })
    }

    pub fn specs(&self) -> [AutoencoderSpec; 3] {
        [
            AutoencoderSpec::new(AutoencoderKind::LstmAE, &self.architecture),
            AutoencoderSpec::new(AutoencoderKind::GruAE, &self.architecture),
            AutoencoderSpec::new(AutoencoderKind::StackedAE, &self.architecture),
        ]
    }

    fn check_input(&self, x: &[f64]) -> Result<(), NeuralError> {
        crate::neural::check_len("ensemble input", self.seq_len, x.len())
    }

    pub fn forward(&self, x: &PaddedSequence) -> Result<ForwardParts, EnsembleError> {
        Ok(self.forward_values(&x.values)?)
    }

    pub fn forward_values(&self, x: &[f64]) -> Result<ForwardParts, NeuralError> {
        Ok(self.forward_cached(x)?.0)
    }

    fn forward_cached(&self, x: &[f64]) -> Result<(ForwardParts, EnsembleCache), NeuralError> {
        self.check_input(x)?;
        let (lstm, lstm_cache) = self.lstm_ae.forward_cached(x)?;
        let (gru, gru_cache) = self.gru_ae.forward_cached(x)?;
        let stacked_acts = self.stacked_ae.forward_cached(x)?;
        let stacked = stacked_acts.last().expect("non-empty").clone();
        let mut parts = ForwardParts {
            x_hat: Vec::new(),
            lstm,
            gru,
            stacked,
        };
        let concat = parts.concatenated();
        parts.x_hat = self.compression.forward(&concat)?;
        Ok((
            parts,
            EnsembleCache {
                lstm: lstm_cache,
                gru: gru_cache,
                stacked: stacked_acts,
                concat,
            },
        ))
    }

    /// Gradient of the final-reconstruction loss `d_xhat` into `grad`.
    fn backward(&self, cache: &EnsembleCache, x_hat: &[f64], d_xhat: &[f64], grad: &mut EnsembleModel) {
        let d_concat = self
            .compression
            .backward(&cache.concat, x_hat, d_xhat, &mut grad.compression);
        let l = self.seq_len;
        self.lstm_ae.backward(&cache.lstm, &d_concat[..l], &mut grad.lstm_ae);
        self.gru_ae.backward(&cache.gru, &d_concat[l..2 * l], &mut grad.gru_ae);
        self.stacked_ae
            .backward(&cache.stacked, &d_concat[2 * l..], &mut grad.stacked_ae);
    }

    /// MAE of the final reconstruction and its gradient, accumulated into `grad`.
    pub fn loss_and_grad(&self, x: &[f64], grad: &mut EnsembleModel) -> Result<f64, NeuralError> {
        let (parts, cache) = self.forward_cached(x)?;
        let (loss, d) = mae_loss(&parts.x_hat, x)?;
        self.backward(&cache, &parts.x_hat, &d, grad);
        Ok(loss)
    }

    /// Sum of the three sub-model MAEs, with gradients into the sub-models only.
    fn submodel_loss_and_grad(&self, x: &[f64], grad: &mut EnsembleModel) -> Result<f64, NeuralError> {
        self.check_input(x)?;
        let (lstm, lc) = self.lstm_ae.forward_cached(x)?;
        let (gru, gc) = self.gru_ae.forward_cached(x)?;
        let acts = self.stacked_ae.forward_cached(x)?;
        let (l1, d1) = mae_loss(&lstm, x)?;
        let (l2, d2) = mae_loss(&gru, x)?;
        let (l3, d3) = mae_loss(acts.last().expect("non-empty"), x)?;
        self.lstm_ae.backward(&lc, &d1, &mut grad.lstm_ae);
        self.gru_ae.backward(&gc, &d2, &mut grad.gru_ae);
        self.stacked_ae.backward(&acts, &d3, &mut grad.stacked_ae);
        Ok(l1 + l2 + l3)
    }

    /// Per-request anomaly score: mean absolute reconstruction error.
    pub fn score(&self, x: &PaddedSequence) -> Result<f64, EnsembleError> {
        Ok(self.score_values(&x.values)?)
    }

    pub fn score_values(&self, x: &[f64]) -> Result<f64, NeuralError> {
        let parts = self.forward_values(x)?;
        Ok(mae_loss(&parts.x_hat, x)?.0)
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        write_tensors(&self.tensors())
    }

    /// SHA-256 of the checkpoint bytes.
    pub fn param_hash(&self) -> String {
        hex::encode(Sha256::digest(self.checkpoint_bytes()))
    }

    pub fn manifest(&self) -> ModelManifest {
        ModelManifest {
            format_version: MODEL_FORMAT_VERSION,
            seq_len: self.seq_len,
            encoder_widths: self.architecture.encoder_widths.clone(),
            seed: self.seed,
            vocab_fingerprint: self.vocab_fingerprint.clone(),
        }
    }

    pub fn from_checkpoint(manifest: &ModelManifest, bytes: &[u8]) -> Result<Self, EnsembleError> {
        if manifest.format_version != MODEL_FORMAT_VERSION {
            return Err(EnsembleError::Checkpoint(format!(
                "unsupported model format_version {}",
                manifest.format_version
            )));
        }
        let arch = Architecture::new(manifest.encoder_widths.clone())?;
        let mut model = Self::new(
            manifest.seq_len,
            manifest.vocab_fingerprint.clone(),
            manifest.seed,
            &arch,
        )?;
        crate::neural::load_tensors(&mut model, &read_tensors(bytes)?)?;
        if !model.all_finite() {
            return Err(EnsembleError::Checkpoint("non-finite parameters".into()));
        }
        Ok(model)
    }
}

impl Parameters for EnsembleModel {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = self.lstm_ae.tensors();
        out.extend(self.gru_ae.tensors());
        out.extend(self.stacked_ae.tensors());
        out.extend(crate::neural::prefixed("compression", self.compression.tensors()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.lstm_ae.tensors_mut();
        out.extend(self.gru_ae.tensors_mut());
        out.extend(self.stacked_ae.tensors_mut());
        out.extend(self.compression.tensors_mut());
        out
    }
}

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format_version: u32,
    pub seq_len: usize,
    pub encoder_widths: Vec<usize>,
    pub seed: u64,
    pub vocab_fingerprint: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TrainMode {
    /// All sub-models and the compression layer optimized together against
    /// the final reconstruction.
    #[default]
    Joint,
    /// Sub-models trained on their own reconstructions first, then the
    /// compression layer alone with the sub-models frozen.
    Staged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub validation_fraction: f64,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 90,
            batch_size: 32,
            learning_rate: 0.002,
            seed: 0,
            validation_fraction: 0.2,
            mode: TrainMode::Joint,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), EnsembleError> {
        if self.epochs == 0 {
            return Err(EnsembleError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(EnsembleError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(EnsembleError::InvalidConfig(format!(
                "validation_fraction {} outside [0,1)",
                self.validation_fraction
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(EnsembleError::InvalidConfig("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-sample loss over the epoch's batches, measured before each update.
    pub train_mae: f64,
    pub val_mae: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    /// Per-epoch summed sub-model losses of the first phase in staged mode.
    pub pretrain: Vec<EpochStats>,
}

impl TrainHistory {
    /// `epoch,train_mae,val_mae`; an empty `val_mae` means no validation split.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_mae,val_mae\n");
        for e in &self.epochs {
            let val = e.val_mae.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{}\n", e.epoch, e.train_mae, val));
        }
        out
    }

    pub fn first(&self) -> Option<&EpochStats> {
        self.epochs.first()
    }

    pub fn last(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }
}

#[derive(Clone, Copy)]
enum Objective {
    Final,
    SubModels,
}

/// Trains `model` on normal sequences. A seeded shuffle splits off the
/// validation part, and the training part is reshuffled every epoch.
pub fn train(
    model: &mut EnsembleModel,
    data: &[PaddedSequence],
    cfg: &TrainConfig,
) -> Result<TrainHistory, EnsembleError> {
    train_with_progress(model, data, cfg, |_| {})
}

pub fn train_with_progress(
    model: &mut EnsembleModel,
    data: &[PaddedSequence],
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochStats),
) -> Result<TrainHistory, EnsembleError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(EnsembleError::EmptyTrainingSet);
    }
    for x in data {
        crate::neural::check_len("training sequence", model.seq_len, x.values.len())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((cfg.validation_fraction * data.len() as f64).floor() as usize).min(data.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let val: Vec<&[f64]> = val_idx.iter().map(|&i| data[i].values.as_slice()).collect();
    let mut train_idx = train_idx.to_vec();

    let mut history = TrainHistory::default();
    let phases: &[Objective] = match cfg.mode {
        TrainMode::Joint => &[Objective::Final],
        TrainMode::Staged => &[Objective::SubModels, Objective::Final],
    };
    for (phase_no, &objective) in phases.iter().enumerate() {
        let frozen_submodels = matches!(cfg.mode, TrainMode::Staged) && phase_no == 1;
        let mut opt = NadamState::new(NadamConfig {
            learning_rate: cfg.learning_rate,
            ..NadamConfig::default()
        });
        let mut grad = model.zeros_like();
        for epoch in 1..=cfg.epochs {
            let last_good = model.clone();
            train_idx.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            for batch in train_idx.chunks(cfg.batch_size) {
                grad.zero();
                for &i in batch {
                    let x = &data[i].values;
                    let loss = match objective {
                        Objective::Final => model.loss_and_grad(x, &mut grad)?,
                        Objective::SubModels => model.submodel_loss_and_grad(x, &mut grad)?,
                    };
                    loss_sum += loss;
                }
                if frozen_submodels {
                    grad.lstm_ae.zero();
                    grad.gru_ae.zero();
                    grad.stacked_ae.zero();
                }
                grad.scale_all(1.0 / batch.len() as f64);
                opt.step(model, &grad)?;
                if !loss_sum.is_finite() || !model.all_finite() {
                    *model = last_good;
                    return Err(EnsembleError::NonFiniteLoss { epoch });
                }
            }
            let train_mae = loss_sum / train_idx.len() as f64;
            let val_mae = if val.is_empty() {
                None
            } else {
                let mut s = 0.0;
                for x in &val {
                    s += match objective {
                        Objective::Final => model.score_values(x)?,
                        Objective::SubModels => model.submodel_score(x)?,
                    };
                }
                Some(s / val.len() as f64)
            };
            let stats = EpochStats {
                epoch,
                train_mae,
                val_mae,
            };
            progress(&stats);
            match objective {
                Objective::Final => history.epochs.push(stats),
                Objective::SubModels => history.pretrain.push(stats),
            }
        }
    }
    Ok(history)
}

impl EnsembleModel {
    fn scale_all(&mut self, k: f64) {
        for m in self.tensors_mut() {
            m.scale(k);
        }
    }

    fn submodel_score(&self, x: &[f64]) -> Result<f64, NeuralError> {
        let p = self.forward_values(x)?;
        Ok(mae_loss(&p.lstm, x)?.0 + mae_loss(&p.gru, x)?.0 + mae_loss(&p.stacked, x)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{dense_forward, gradient_check, rnn_forward};
    use crate::sequencer::pad_or_truncate;
    use rand::Rng;

    fn small(seq_len: usize, seed: u64) -> EnsembleModel {
        EnsembleModel::new(seq_len, "v".into(), seed, &Architecture::new(vec![8, 4]).unwrap()).unwrap()
    }

    #[test]
    fn compression_shapes() {
        let m = EnsembleModel::new(50, "v".into(), 1, &Architecture::default()).unwrap();
        assert_eq!(m.compression.w.shape(), (50, 150));
        let m = small(6, 1);
        assert_eq!(m.compression.w.shape(), (6, 18));
    }

    #[test]
    fn same_seed_same_params() {
        assert_eq!(small(6, 3).param_hash(), small(6, 3).param_hash());
        assert_ne!(small(6, 3).param_hash(), small(6, 4).param_hash());
    }

    #[test]
    fn tensor_names_are_stable() {
        let m = small(6, 0);
        let names: Vec<String> = m.tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "lstm_enc1.W_i");
        assert!(names.contains(&"lstm_dec2.U_o".to_string()));
        assert!(names.contains(&"gru_enc2.b_r".to_string()));
        assert!(names.contains(&"lstm_out.W".to_string()));
        assert!(names.contains(&"stacked_dense4.W".to_string()));
        assert!(names.contains(&"stacked_proj.W".to_string()));
        assert_eq!(names.last().unwrap(), "compression.b");
        let m50 = EnsembleModel::new(50, "v".into(), 0, &Architecture::default()).unwrap();
        assert!(!m50.tensors().iter().any(|(n, _)| n.starts_with("stacked_proj")));
    }

    #[test]
    fn shapes_hold_for_several_lengths() {
        for l in [1, 6, 50] {
            let m = EnsembleModel::new(l, "v".into(), 2, &Architecture::new(vec![8, 4]).unwrap()).unwrap();
            let x = pad_or_truncate(&[3, 1, 4, 1, 5], l);
            let p = m.forward(&x).unwrap();
            assert_eq!(p.x_hat.len(), l);
            assert_eq!(p.concatenated().len(), 3 * l);
            assert_eq!(m.compression.input_size(), 3 * l);
            assert!(p.x_hat.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn wrong_length_is_rejected() {
        let m = small(6, 0);
        assert!(m.forward(&pad_or_truncate(&[1], 5)).is_err());
        assert!(m.score(&pad_or_truncate(&[1], 7)).is_err());
    }

    #[test]
    fn zero_compression_yields_bias() {
        let mut m = small(6, 0);
        m.compression.w.fill(0.0);
        m.compression.b = Matrix::column(vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0]);
        for x in [[1u32, 2, 3].as_slice(), &[9, 9, 9, 9, 9, 9, 9]] {
            let p = m.forward(&pad_or_truncate(x, 6)).unwrap();
            assert_eq!(p.x_hat, [0.5, 1.0, 1.5, 2.0, 2.5, 3.0]);
        }
    }

    /// Re-evaluates the ensemble through the public layer functions.
    fn oracle_forward(m: &EnsembleModel, x: &[f64]) -> Vec<f64> {
        let recurrent = |ae: &RecurrentAutoencoder| -> Vec<f64> {
            let mut seq: Vec<Vec<f64>> = x.iter().map(|v| vec![*v]).collect();
            for cell in &ae.layers {
                seq = rnn_forward(cell, &seq).unwrap().0;
            }
            seq.iter().map(|h| dense_forward(&ae.readout, h).unwrap()[0]).collect()
        };
        let mut concat = recurrent(&m.lstm_ae);
        concat.extend(recurrent(&m.gru_ae));
        let mut v = x.to_vec();
        for l in &m.stacked_ae.layers {
            v = dense_forward(l, &v).unwrap();
        }
        concat.extend(v);
        dense_forward(&m.compression, &concat).unwrap()
    }

    #[test]
    fn forward_matches_layerwise_oracle() {
        let m = small(6, 11);
        let x = pad_or_truncate(&[4, 2, 7, 1], 6);
        let got = m.forward(&x).unwrap().x_hat;
        let want = oracle_forward(&m, &x.values);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn score_examples() {
        let mut m = small(4, 0);
        m.compression.w.fill(0.0);
        let x = pad_or_truncate(&[1, 2, 3, 4], 4);
        m.compression.b = Matrix::column(x.values.clone());
        assert_eq!(m.score(&x).unwrap(), 0.0);
        m.compression.b = Matrix::column(x.values.iter().map(|v| v + 4.0).collect());
        assert_eq!(m.score(&x).unwrap(), 4.0);
    }

    /// Plain `f64` differences cannot resolve gradients much below 1e-8, so
    /// this is a coarse check; `tests/joint_gradient.rs` holds the tight one.
    #[test]
    fn joint_gradient_check_f64() {
        for seed in 0..5 {
            let m = small(6, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
            let x = loop {
                let len = rng.gen_range(2..=6);
                let idx: Vec<u32> = (0..len).map(|_| rng.gen_range(1..10)).collect();
                let x = pad_or_truncate(&idx, 6).values;
                let p = m.forward_values(&x).unwrap();
                if p.x_hat.iter().zip(&x).all(|(a, b)| (a - b).abs() >= 1e-3) {
                    break x;
                }
            };
            let mut grad = m.zeros_like();
            m.loss_and_grad(&x, &mut grad).unwrap();
            let r = gradient_check(&m, &grad, 3e-4, |mm| mm.score_values(&x)).unwrap();
            assert!(r.max_relative_error < 1e-3, "seed {seed}: {r:?}");
        }
    }

    fn corpus(n: usize, seq_len: usize, seed: u64) -> Vec<PaddedSequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let len = rng.gen_range(3..seq_len);
                let idx: Vec<u32> = (0..len).map(|i| (i as u32 % 5) + 2).collect();
                pad_or_truncate(&idx, seq_len)
            })
            .collect()
    }

    #[test]
    fn one_epoch_history() {
        let mut m = small(6, 0);
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let h = train(&mut m, &corpus(20, 6, 0), &cfg).unwrap();
        assert_eq!(h.epochs.len(), 1);
        assert!(h.epochs[0].val_mae.is_some());
        assert!(m.all_finite());
        assert!(h.to_csv().starts_with("epoch,train_mae,val_mae\n1,"));
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 8,
            learning_rate: 0.01,
            ..TrainConfig::default()
        };
        let data = corpus(40, 6, 1);
        let mut a = small(6, 5);
        let mut b = small(6, 5);
        let ha = train(&mut a, &data, &cfg).unwrap();
        let hb = train(&mut b, &data, &cfg).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a.param_hash(), b.param_hash());
        assert!(ha.last().unwrap().train_mae < 0.5 * ha.first().unwrap().train_mae);
    }

    #[test]
    fn staged_mode_runs_both_phases() {
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            mode: TrainMode::Staged,
            ..TrainConfig::default()
        };
        let mut m = small(6, 5);
        let before = m.clone();
        let h = train(&mut m, &corpus(16, 6, 2), &cfg).unwrap();
        assert_eq!(h.pretrain.len(), 3);
        assert_eq!(h.epochs.len(), 3);
        assert_ne!(m.lstm_ae, before.lstm_ae);
        assert_ne!(m.compression, before.compression);
    }

    #[test]
    fn training_errors() {
        let mut m = small(6, 0);
        assert!(matches!(
            train(&mut m, &[], &TrainConfig::default()),
            Err(EnsembleError::EmptyTrainingSet)
        ));
        let bad = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&mut m, &corpus(4, 6, 0), &bad),
            Err(EnsembleError::InvalidConfig(_))
        ));
    }

    #[test]
    fn non_finite_training_restores_model() {
        let mut m = small(6, 0);
        let before = m.clone();
        let cfg = TrainConfig {
            epochs: 2,
            learning_rate: 1e308,
            ..TrainConfig::default()
        };
        let data = vec![pad_or_truncate(&[u32::MAX, u32::MAX, 5], 6); 4];
        match train(&mut m, &data, &cfg) {
            Err(EnsembleError::NonFiniteLoss { epoch }) => {
                assert_eq!(epoch, 1);
                assert_eq!(m, before);
            }
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_roundtrip_scores_bit_exactly() {
        let m = small(6, 9);
        let bytes = m.checkpoint_bytes();
        let back = EnsembleModel::from_checkpoint(&m.manifest(), &bytes).unwrap();
        assert_eq!(back, m);
        let x = pad_or_truncate(&[3, 8, 2], 6);
        assert_eq!(m.score(&x).unwrap().to_bits(), back.score(&x).unwrap().to_bits());
        let mut wrong = m.manifest();
        wrong.seq_len = 7;
        assert!(EnsembleModel::from_checkpoint(&wrong, &bytes).is_err());
    }
}
