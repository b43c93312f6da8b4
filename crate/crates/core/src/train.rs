//! Training: Adam/AdamW with decoupled decay, warmup plus inverse-sqrt
//! learning-rate schedule, gradient clipping, teacher forcing, checkpoints.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{make_batches, Batch, CorpusError, ParallelCorpus};
use crate::model::{ModelConfig, ModelError, TransformerModel};
use crate::subword::{SubwordModel, PAD_ID};
use crate::tensor::{cross_entropy, Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MTFG";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss at epoch {epoch}, step {step}; last saved checkpoint is kept")]
    NonFiniteLoss { epoch: usize, step: u64 },
    #[error("optimizer state does not match parameter {0}")]
    StateMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    Format(String),
    #[error("checkpoint was trained with a different subword model (hash {expected} vs {got})")]
    SubwordMismatch { expected: String, got: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    AdamW,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    /// Peak learning rate (the constant rate when `constant_lr` is set).
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_len: usize,
    pub epochs: usize,
    pub warmup_steps: u64,
    pub constant_lr: bool,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::scratch()
    }
}

impl TrainConfig {
    /// From-scratch recipe: Adam, batch 32, sequences up to 256 tokens,
    /// inverse-sqrt schedule with 4000 warmup steps peaking at 5e-4.
    pub fn scratch() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 5e-4,
            weight_decay: 0.0,
            batch_size: 32,
            max_len: 256,
            epochs: 10,
            warmup_steps: 4000,
            constant_lr: false,
            clip_norm: 1.0,
            seed: 42,
        }
    }

    /// Continued-training recipe: AdamW at a constant 2e-5 with decay 0.01,
    /// batch 32, sequences capped at 128 tokens.
    pub fn continued() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::AdamW,
            learning_rate: 2e-5,
            weight_decay: 0.01,
            batch_size: 32,
            max_len: 128,
            epochs: 3,
            warmup_steps: 0,
            constant_lr: true,
            clip_norm: 1.0,
            seed: 42,
        }
    }

    /// Learning rate for a 1-based optimizer step.
    pub fn learning_rate_at(&self, step: u64) -> f64 {
        if self.constant_lr || self.warmup_steps == 0 {
            return self.learning_rate;
        }
        let step = step.max(1) as f64;
        let warmup = self.warmup_steps as f64;
        self.learning_rate * (step / warmup).min((warmup / step).sqrt())
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam moment estimates keyed by parameter name; AdamW is Adam plus
/// decoupled decay on the decay-eligible parameters, so zero decay gives
/// bit-identical updates.
pub struct Optimizer {
    kind: OptimizerKind,
    pub step: u64,
    first_moment: HashMap<String, Vec<f64>>,
    second_moment: HashMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Optimizer {
        Optimizer {
            kind,
            step: 0,
            first_moment: HashMap::new(),
            second_moment: HashMap::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Moment vectors for one parameter, if any update has touched it.
    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        Some((
            self.first_moment.get(name)?.as_slice(),
            self.second_moment.get(name)?.as_slice(),
        ))
    }

    /// Rebuild an optimizer from checkpointed state.
    pub fn from_state(
        kind: OptimizerKind,
        step: u64,
        moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
    ) -> Optimizer {
        let mut first_moment = HashMap::new();
        let mut second_moment = HashMap::new();
        for (name, (m, v)) in moments {
            first_moment.insert(name.clone(), m);
            second_moment.insert(name, v);
        }
        Optimizer {
            kind,
            step,
            first_moment,
            second_moment,
        }
    }

    /// One update over all parameters: global-norm clip, Adam moments with
    /// bias correction, then decoupled decay when running as AdamW.
    /// Parameters without a gradient are skipped.
    pub fn apply(
        &mut self,
        params: &[(String, Tensor)],
        lr: f64,
        weight_decay: f64,
        clip_norm: f64,
    ) -> Result<(), TrainError> {
        let mut grads: Vec<(usize, Vec<f64>)> = Vec::new();
        let mut sq_norms: Vec<f64> = Vec::new();
        for (i, (name, tensor)) in params.iter().enumerate() {
            if let Some(grad) = tensor.grad() {
                if grad.iter().any(|g| !g.is_finite()) {
                    return Err(TrainError::NonFiniteGradient(name.clone()));
                }
                sq_norms.push(grad.iter().map(|g| g * g).sum());
                grads.push((i, grad));
            }
        }
        sq_norms.sort_by(f64::total_cmp);
        let norm: f64 = sq_norms.iter().sum::<f64>().sqrt();
        let scale = if clip_norm > 0.0 && norm > clip_norm {
            clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for (i, grad) in grads {
            let (name, tensor) = &params[i];
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let v = self
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            if m.len() != grad.len() || v.len() != grad.len() {
                return Err(TrainError::StateMismatch(name.clone()));
            }
            let decay = self.kind == OptimizerKind::AdamW
                && weight_decay > 0.0
                && TransformerModel::is_decay_parameter(name);
            tensor.update_data(|data| {
                for j in 0..data.len() {
                    let g = grad[j] * scale;
                    m[j] = BETA1 * m[j] + (1.0 - BETA1) * g;
                    v[j] = BETA2 * v[j] + (1.0 - BETA2) * g * g;
                    let m_hat = m[j] / bc1;
                    let v_hat = v[j] / bc2;
                    if decay {
                        data[j] -= lr * weight_decay * data[j];
                    }
                    data[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            });
        }
        Ok(())
    }
}

/// One JSONL record of the loss history file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid_loss: Option<f64>,
    pub lr: f64,
    pub step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    kind: OptimizerKind,
    step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    step: u64,
    subword_hash: String,
    manifest: Vec<TensorManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    optimizer: Option<OptimizerHeader>,
}

/// Restored Adam state: per-parameter (first, second) moment vectors.
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    pub fn into_optimizer(self) -> Optimizer {
        Optimizer::from_state(self.kind, self.step, self.moments)
    }
}

/// On-disk model snapshot. Layout: magic, format version, header length,
/// JSON header (config, step, subword hash, tensor manifest, optimizer
/// kind/step if present), each tensor's data as little-endian f64 in
/// manifest order, then first and second moment vectors per tensor when
/// optimizer state is included.
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub subword_hash: String,
    pub parameters: HashMap<String, Vec<f64>>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    /// Atomic write: the bytes go to a temporary file in the target
    /// directory which is renamed over `path` only once complete.
    pub fn save(
        path: &Path,
        model: &TransformerModel,
        step: u64,
        subword_hash: &str,
        optimizer: Option<&Optimizer>,
    ) -> Result<(), TrainError> {
        let params = model.named_parameters();
        let header = CheckpointHeader {
            config: model.cfg.clone(),
            step,
            subword_hash: subword_hash.to_string(),
            manifest: params
                .iter()
                .map(|(name, t)| TensorManifestEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            optimizer: optimizer.map(|o| OptimizerHeader {
                kind: o.kind(),
                step: o.step,
            }),
        };
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| TrainError::Format(format!("header serialization: {e}")))?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(CHECKPOINT_MAGIC)?;
        tmp.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        tmp.write_all(&(header_json.len() as u32).to_le_bytes())?;
        tmp.write_all(&header_json)?;
        let write_slice = |tmp: &mut tempfile::NamedTempFile, data: &[f64]| {
            let mut bytes = Vec::with_capacity(data.len() * 8);
            for x in data {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
            tmp.write_all(&bytes)
        };
        for (_, tensor) in &params {
            tensor.with_data(|data| write_slice(&mut tmp, data))?;
        }
        if let Some(optimizer) = optimizer {
            for (name, tensor) in &params {
                // untouched parameters store zero moments
                match optimizer.moments(name) {
                    Some((m, v)) => {
                        write_slice(&mut tmp, m)?;
                        write_slice(&mut tmp, v)?;
                    }
                    None => {
                        let zeros = vec![0.0; tensor.numel()];
                        write_slice(&mut tmp, &zeros)?;
                        write_slice(&mut tmp, &zeros)?;
                    }
                }
            }
        }
        tmp.flush()?;
        tmp.persist(path)
            .map_err(|e| TrainError::Io(e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, TrainError> {
        let mut file = std::fs::File::open(path)?;
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic)
            .map_err(|_| TrainError::Format("file too short for magic".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(TrainError::Format("bad magic bytes".into()));
        }
        let mut word = [0u8; 4];
        file.read_exact(&mut word)
            .map_err(|_| TrainError::Format("missing version".into()))?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        file.read_exact(&mut word)
            .map_err(|_| TrainError::Format("missing header length".into()))?;
        let header_len = u32::from_le_bytes(word) as usize;
        let mut header_bytes = vec![0u8; header_len];
        file.read_exact(&mut header_bytes)
            .map_err(|_| TrainError::Format("truncated header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
            .map_err(|e| TrainError::Format(format!("header parse: {e}")))?;
        let mut read_slice = |numel: usize, what: &str| -> Result<Vec<f64>, TrainError> {
            let mut bytes = vec![0u8; numel * 8];
            file.read_exact(&mut bytes)
                .map_err(|_| TrainError::Format(format!("truncated payload for {what}")))?;
            Ok(bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let mut parameters = HashMap::new();
        for entry in &header.manifest {
            let numel: usize = entry.shape.iter().product();
            parameters.insert(entry.name.clone(), read_slice(numel, &entry.name)?);
        }
        let optimizer = match &header.optimizer {
            Some(opt) => {
                let mut moments = HashMap::new();
                for entry in &header.manifest {
                    let numel: usize = entry.shape.iter().product();
                    let m = read_slice(numel, &format!("{} first moment", entry.name))?;
                    let v = read_slice(numel, &format!("{} second moment", entry.name))?;
                    moments.insert(entry.name.clone(), (m, v));
                }
                Some(OptimizerState {
                    kind: opt.kind,
                    step: opt.step,
                    moments,
                })
            }
            None => None,
        };
        let mut trailing = [0u8; 1];
        if file.read(&mut trailing)? != 0 {
            return Err(TrainError::Format("trailing bytes after payload".into()));
        }
        Ok(Checkpoint {
            config: header.config,
            step: header.step,
            subword_hash: header.subword_hash,
            parameters,
            optimizer,
        })
    }

    pub fn verify_subword(&self, hash: &str) -> Result<(), TrainError> {
        if self.subword_hash != hash {
            return Err(TrainError::SubwordMismatch {
                expected: self.subword_hash.clone(),
                got: hash.to_string(),
            });
        }
        Ok(())
    }

    pub fn into_model(self) -> Result<TransformerModel, TrainError> {
        Ok(TransformerModel::from_parameters(
            self.config,
            self.parameters,
        )?)
    }
}

/// Split a padded target batch into teacher-forcing input (drop last column)
/// and next-token labels (drop first column).
fn shift_targets(batch: &Batch) -> (Vec<Vec<u32>>, Vec<Vec<bool>>, Vec<u32>) {
    let input: Vec<Vec<u32>> = batch
        .target_ids
        .iter()
        .map(|row| row[..row.len() - 1].to_vec())
        .collect();
    let input_mask: Vec<Vec<bool>> = batch
        .target_mask
        .iter()
        .map(|row| row[..row.len() - 1].to_vec())
        .collect();
    let labels: Vec<u32> = batch
        .target_ids
        .iter()
        .flat_map(|row| row[1..].iter().copied())
        .collect();
    (input, input_mask, labels)
}

fn label_count(labels: &[u32]) -> usize {
    labels.iter().filter(|&&id| id != PAD_ID).count()
}

/// Teacher-forced cross entropy on one batch, in training mode with a
/// deterministic dropout seed. Returns (loss tensor, non-pad label count).
fn batch_loss(
    model: &TransformerModel,
    batch: &Batch,
    dropout_seed: u64,
    training: bool,
) -> Result<(Tensor, usize), TrainError> {
    let (input, input_mask, labels) = shift_targets(batch);
    let logits = if training {
        model.forward_training(
            &batch.source_ids,
            &batch.source_mask,
            &input,
            &input_mask,
            dropout_seed,
        )?
    } else {
        model.forward(&batch.source_ids, &batch.source_mask, &input, &input_mask)?
    };
    let shape = logits.shape().to_vec();
    let flat = logits.reshape(&[shape[0] * shape[1], shape[2]])?;
    let loss = cross_entropy(&flat, &labels, model.cfg.label_smoothing, PAD_ID)?;
    Ok((loss, label_count(&labels)))
}

/// Token-weighted mean cross entropy over batches without dropout or
/// gradients.
pub fn evaluate_loss(model: &TransformerModel, batches: &[Batch]) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in batches {
        let (loss, n) = batch_loss(model, batch, 0, false)?;
        total += loss.item() * n as f64;
        count += n;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

pub struct Trainer<'a> {
    pub model: &'a TransformerModel,
    pub cfg: TrainConfig,
    pub optimizer: Optimizer,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a TransformerModel, cfg: TrainConfig) -> Trainer<'a> {
        let optimizer = Optimizer::new(cfg.optimizer);
        Trainer {
            model,
            cfg,
            optimizer,
        }
    }

    /// One optimizer step on one batch; returns the batch loss and the
    /// number of supervised tokens.
    pub fn step(&mut self, batch: &Batch, epoch: usize) -> Result<(f64, usize), TrainError> {
        let step = self.optimizer.step + 1;
        let dropout_seed = self
            .cfg
            .seed
            .wrapping_mul(0x2545_f491_4f6c_dd1d)
            .wrapping_add(step);
        let (loss, n) = batch_loss(self.model, batch, dropout_seed, true)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch, step });
        }
        let params = self.model.named_parameters();
        for (_, t) in &params {
            t.zero_grad();
        }
        loss.backward()?;
        self.optimizer.apply(
            &params,
            self.cfg.learning_rate_at(step),
            self.cfg.weight_decay,
            self.cfg.clip_norm,
        )?;
        Ok((value, n))
    }

    /// One pass over the batches; returns the token-weighted mean loss.
    pub fn run_epoch(&mut self, batches: &[Batch], epoch: usize) -> Result<f64, TrainError> {
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in batches {
            let (loss, n) = self.step(batch, epoch)?;
            total += loss * n as f64;
            count += n;
        }
        Ok(if count == 0 { 0.0 } else { total / count as f64 })
    }
}

pub struct FitOptions<'a> {
    pub checkpoint_path: Option<&'a Path>,
    pub history_path: Option<&'a Path>,
}

/// Full training run: per-epoch reshuffled batches (seed + epoch), optional
/// validation loss, a checkpoint rewritten after every epoch and a JSONL
/// history line per epoch. A non-finite loss aborts with an error while the
/// previous epoch's checkpoint stays on disk.
pub fn fit(
    model: &TransformerModel,
    subword: &SubwordModel,
    train: &ParallelCorpus,
    valid: Option<&ParallelCorpus>,
    cfg: &TrainConfig,
    options: &FitOptions,
) -> Result<Vec<EpochStats>, TrainError> {
    let subword_hash = subword.content_hash();
    let valid_batches = valid
        .map(|corpus| make_batches(corpus, subword, cfg.batch_size, cfg.max_len, None))
        .transpose()?;
    let mut trainer = Trainer::new(model, cfg.clone());
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let shuffle_seed = cfg.seed.wrapping_add(epoch as u64);
        let batches = make_batches(
            train,
            subword,
            cfg.batch_size,
            cfg.max_len,
            Some(shuffle_seed),
        )?;
        let train_loss = trainer.run_epoch(&batches, epoch)?;
        let valid_loss = valid_batches
            .as_deref()
            .map(|b| evaluate_loss(model, b))
            .transpose()?;
        let stats = EpochStats {
            epoch,
            train_loss,
            valid_loss,
            lr: cfg.learning_rate_at(trainer.optimizer.step.max(1)),
            step: trainer.optimizer.step,
        };
        if let Some(path) = options.checkpoint_path {
            Checkpoint::save(path, model, trainer.optimizer.step, &subword_hash, Some(&trainer.optimizer))?;
        }
        if let Some(path) = options.history_path {
            append_history(path, &stats)?;
        }
        history.push(stats);
    }
    Ok(history)
}

fn append_history(path: &Path, stats: &EpochStats) -> Result<(), TrainError> {
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    let line = serde_json::to_string(stats)
        .map_err(|e| TrainError::Format(format!("history serialization: {e}")))?;
    writeln!(file, "{line}")?;
    Ok(())
}
