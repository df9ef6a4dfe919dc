//! Two-stage training: stage one fits encoder, decoder and code book (and,
//! for Gaussian attention, its prior jointly); stage two fits the
//! categorical prior on the frozen posterior's latent sequences.

mod checkpoint;
mod config;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointError, FORMAT_VERSION, MAGIC};
pub use config::{anneal_beta, vae_kl_weight, TrainConfig};

use crate::autodiff::{AutodiffError, Graph, Tensor};
use crate::corpus::{make_batches, sequential_batches, Batch, CorpusError, CorpusSplits, Dataset, Vocab};
use crate::models::{ForwardOptions, Model, ModelError, ModelKind, QuantizeMode};
use crate::params::{self, Adam, Group, ParamError, Sgd};
use crate::prior::{self, PriorError};
use crate::quantizer::{self, QuantizerError, UsageWindow};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite loss at epoch {epoch}, step {step}; batch sentences {origin:?}; {detail}")]
    NonFinite {
        epoch: usize,
        step: usize,
        origin: Vec<usize>,
        detail: String,
    },
}

impl From<AutodiffError> for TrainError {
    fn from(e: AutodiffError) -> Self {
        TrainError::Model(e.into())
    }
}

impl From<QuantizerError> for TrainError {
    fn from(e: QuantizerError) -> Self {
        TrainError::Model(e.into())
    }
}

impl From<PriorError> for TrainError {
    fn from(e: PriorError) -> Self {
        TrainError::Model(e.into())
    }
}

impl From<ParamError> for TrainError {
    fn from(e: ParamError) -> Self {
        TrainError::Model(e.into())
    }
}

/// A corpus encoded against its vocabulary.
#[derive(Debug, Clone)]
pub struct EncodedCorpus {
    pub vocab: Vocab,
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

impl EncodedCorpus {
    /// Builds the vocabulary from the training split only.
    pub fn new(splits: &CorpusSplits, max_vocab: usize, max_words: usize) -> Result<Self, CorpusError> {
        let vocab = Vocab::build(splits.train.iter(), max_vocab)?;
        Ok(Self::with_vocab(splits, vocab, max_words))
    }

    pub fn with_vocab(splits: &CorpusSplits, vocab: Vocab, max_words: usize) -> Self {
        Self {
            train: Dataset::encode(&splits.train, &vocab, max_words),
            valid: Dataset::encode(&splits.valid, &vocab, max_words),
            test: Dataset::encode(&splits.test, &vocab, max_words),
            vocab,
        }
    }
}

/// One stage-one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub rec: f64,
    pub kl: f64,
    pub commit: f64,
    pub valid_rec: f64,
    pub valid_kl: f64,
    pub lr: f64,
    pub beta: f64,
    /// Entropy (nats) of code assignments over the epoch.
    pub usage_entropy: f64,
    pub restarts: usize,
    pub wall_ms: u64,
}

/// Append-only per-epoch records, serialized one JSON object per line.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self, TrainError> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| TrainError::Config(format!("bad log line: {e}"))))
            .collect::<Result<_, _>>()?;
        Ok(Self { records })
    }

    /// The log with wall-clock times zeroed: everything left is a pure
    /// function of seed, config and corpus.
    pub fn without_timing(&self) -> Self {
        let mut out = self.clone();
        out.records.iter_mut().for_each(|r| r.wall_ms = 0);
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        write_file(path, self.to_jsonl().as_bytes())
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), TrainError> {
    let io = |e| TrainError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(bytes).map_err(io)
}

/// Result of stage one.
#[derive(Debug, Clone)]
pub struct StageOne {
    /// Parameters at the best validation epoch.
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
    pub best_epoch: usize,
}

/// Per-sentence mean validation losses under deterministic inference.
fn validate(model: &Model<f32>, data: &Dataset, batch_size: usize) -> Result<(f64, f64), TrainError> {
    let mut rec = 0.0;
    let mut kl = 0.0;
    let mut n = 0usize;
    for batch in sequential_batches(data, batch_size)? {
        let g = Graph::new();
        let f = model.forward(&g, &batch, &ForwardOptions::default())?;
        rec += f.breakdown.per_sentence_rec.iter().sum::<f64>();
        kl += f.breakdown.per_sentence_kl.iter().sum::<f64>();
        n += batch.size();
    }
    Ok((rec / n as f64, kl / n as f64))
}

/// Learning-rate decay on validation plateaus.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub max_decays: usize,
    pub decays: usize,
    best: f64,
    bad_epochs: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, factor: f64, patience: usize, max_decays: usize) -> Self {
        Self {
            lr,
            factor,
            patience,
            max_decays,
            decays: 0,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Records a validation loss. Returns `(improved, keep_going)`.
    pub fn observe(&mut self, loss: f64) -> (bool, bool) {
        if loss < self.best {
            self.best = loss;
            self.bad_epochs = 0;
            return (true, true);
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            if self.decays >= self.max_decays {
                return (false, false);
            }
            self.lr *= self.factor;
            self.decays += 1;
            self.bad_epochs = 0;
        }
        (false, true)
    }
}

/// Stage one for any model kind.
///
/// Discrete kinds spend their first epoch unquantized while collecting
/// encoder states, then initialize the code book by K-means; from then on
/// every step quantizes, and the code book moves by EMA after the
/// optimizer step.
pub fn train_stage_one(corpus: &EncodedCorpus, cfg: &TrainConfig) -> Result<StageOne, TrainError> {
    cfg.validate()?;
    let mut model = Model::<f32>::new(cfg.model, cfg.dims(corpus.vocab.len()), cfg.seed);
    if let Some(b) = model.codebook.as_mut() {
        b.decay = cfg.ema_decay as f32;
    }
    let groups: &[Group] = if cfg.model == ModelKind::Gavam {
        &[Group::Phi, Group::Theta, Group::Psi]
    } else {
        &[Group::Phi, Group::Theta]
    };
    let discrete = cfg.model.is_discrete();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut schedule = PlateauSchedule::new(cfg.lr, cfg.lr_decay_factor, cfg.plateau_patience, cfg.max_decays);
    let mut log = TrainLog::default();
    let mut best: Option<(Model<f32>, usize)> = None;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let beta = anneal_beta(epoch, cfg);
        let kl_weight = vae_kl_weight(epoch, cfg);
        let bypass = discrete && epoch == 0;
        let batches = make_batches(&corpus.train, cfg.batch_size, cfg.shuffle_seed.wrapping_add(epoch as u64))?;
        let mut window = UsageWindow::<f32>::new(cfg.codes, 4096);
        let (mut rec, mut kl, mut commit, mut n) = (0.0, 0.0, 0.0, 0usize);
        let sgd = Sgd { lr: schedule.lr };

        for batch in &batches {
            let g = Graph::new();
            let opts = ForwardOptions {
                beta,
                kl_weight,
                quantize: if bypass { QuantizeMode::Bypass } else { QuantizeMode::Live },
                sample: true,
                noise_seed: cfg.noise_seed.wrapping_mul(1_000_003).wrapping_add(step as u64),
            };
            let f = model.forward(&g, batch, &opts)?;
            let loss = g.item(f.loss);
            if !loss.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    step,
                    origin: batch.origin.clone(),
                    detail: format!("breakdown {:?}", f.breakdown),
                });
            }
            g.backward(f.loss)?;
            let mut grads = params::restrict(g.param_grads(), groups);
            params::clip_global_norm(&mut grads, cfg.clip_norm);
            sgd.step(&mut model.params, &grads)?;

            if let Some(q) = &f.quant {
                if !bypass {
                    let book = model.codebook.as_mut().expect("discrete kinds have a code book");
                    quantizer::ema_update(book, &q.h, &q.z, Some(&q.valid))?;
                    window.observe(&q.h, &q.z, Some(&q.valid), &mut rng);
                }
            }
            let b = batch.size();
            rec += f.breakdown.rec * b as f64;
            kl += f.breakdown.kl * b as f64;
            commit += f.breakdown.commit * b as f64;
            n += b;
            step += 1;
        }

        let mut restarts = 0;
        if discrete {
            // K-means sees states from the end-of-epoch encoder, not the drifting one
            let collected = if bypass {
                encoder_state_rows(&model, &corpus.train, cfg.batch_size)?
            } else {
                Vec::new()
            };
            let book = model.codebook.as_mut().expect("discrete kinds have a code book");
            if bypass {
                let rows = collected.len();
                let samples = Tensor::from_rows(&collected)?;
                *book = quantizer::kmeans_init(&samples, cfg.codes.min(rows), cfg.kmeans_iters, cfg.seed, cfg.ema_decay)?;
                if book.size() < cfg.codes {
                    return Err(TrainError::Config(format!(
                        "only {rows} encoder states for {} codes",
                        cfg.codes
                    )));
                }
            } else if cfg.restart_fraction > 0.0 {
                restarts = quantizer::dead_code_restart(book, &window, cfg.restart_fraction, &mut rng);
            }
        }
        let (valid_rec, valid_kl) = validate(&model, &corpus.valid, cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            rec: rec / n as f64,
            kl: kl / n as f64,
            commit: commit / n as f64,
            valid_rec,
            valid_kl,
            lr: schedule.lr,
            beta,
            usage_entropy: window.entropy(),
            restarts,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        log::info!(
            "{} epoch {epoch}: rec {:.3} kl {:.3} commit {:.3} valid rec {:.3} kl {:.3} lr {} beta {:.2}",
            cfg.model,
            record.rec,
            record.kl,
            record.commit,
            valid_rec,
            valid_kl,
            record.lr,
            beta
        );
        log.records.push(record);
        if !valid_rec.is_finite() || !valid_kl.is_finite() {
            return Err(TrainError::NonFinite {
                epoch,
                step,
                origin: Vec::new(),
                detail: "validation loss".into(),
            });
        }
        if bypass {
            // the unquantized epoch is not comparable with later ones
            continue;
        }
        let weight = if cfg.model == ModelKind::Vae { kl_weight } else { 1.0 };
        let (improved, keep_going) = schedule.observe(valid_rec + weight * valid_kl);
        if improved || best.is_none() {
            best = Some((model.clone(), epoch));
        }
        if !keep_going {
            log::info!("stopping after {} learning-rate decays", schedule.decays);
            break;
        }
    }

    let (model, best_epoch) = best.unwrap_or((model, 0));
    Ok(StageOne {
        checkpoint: Checkpoint {
            model,
            vocab: corpus.vocab.clone(),
            config: cfg.clone(),
        },
        log,
        best_epoch,
    })
}

fn encoder_state_rows<S: Scalar>(model: &Model<S>, data: &Dataset, batch_size: usize) -> Result<Vec<Vec<S>>, TrainError> {
    let mut rows = Vec::new();
    for batch in sequential_batches(data, batch_size)? {
        let g = Graph::new();
        let (h, _, valid) = model.encoder_states(&g, &batch)?;
        let h = g.value(h);
        rows.extend((0..h.rows()).filter(|&r| valid[r]).map(|r| h.data()[r * h.cols()..(r + 1) * h.cols()].to_vec()));
    }
    Ok(rows)
}

/// Latent index sequence of every sentence under the model's posterior.
pub fn latent_sequences<S: Scalar>(model: &Model<S>, data: &Dataset, batch_size: usize) -> Result<Vec<Vec<usize>>, TrainError> {
    let book = model
        .codebook
        .as_ref()
        .ok_or_else(|| TrainError::Config(format!("{} has no discrete latents", model.kind)))?;
    let mut out = vec![Vec::new(); data.len()];
    for batch in sequential_batches(data, batch_size)? {
        let g = Graph::new();
        let (h, steps, valid) = model.encoder_states(&g, &batch)?;
        let z = quantizer::quantize_indices(&g.value(h), book)?;
        for (b, &origin) in batch.origin.iter().enumerate() {
            out[origin] = (0..steps)
                .map(|t| t * batch.size() + b)
                .filter(|&r| valid[r])
                .map(|r| z[r])
                .collect();
        }
    }
    Ok(out)
}

/// One stage-two epoch: mean per-sentence prior NLL on validation
/// sequences alongside the uniform bound `T·log K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorEpoch {
    pub epoch: usize,
    pub train_nll: f64,
    pub valid_nll: f64,
    pub uniform_nll: f64,
}

/// Mean per-sequence prior NLL.
pub fn prior_nll_mean<S: Scalar>(model: &Model<S>, seqs: &[Vec<usize>]) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for z in seqs {
        let gamma = prior::prior_forward(&model.params, z)?;
        total += prior::prior_nll(z, &gamma);
    }
    Ok(total / seqs.len().max(1) as f64)
}

/// Stage two: fits the prior (ψ) to latent sequences from the frozen
/// stage-one posterior. Encoder, decoder and code book are not touched.
pub fn train_stage_two(checkpoint: &mut Checkpoint, corpus: &EncodedCorpus) -> Result<Vec<PriorEpoch>, TrainError> {
    let cfg = checkpoint.config.clone();
    let model = &mut checkpoint.model;
    if !model.kind.is_discrete() {
        return Err(CheckpointError::KindMismatch {
            expected: ModelKind::Davam,
            found: model.kind,
        }
        .into());
    }
    let train_z = latent_sequences(model, &corpus.train, cfg.batch_size)?;
    let valid_z = latent_sequences(model, &corpus.valid, cfg.batch_size)?;
    fit_prior(model, train_z, &valid_z, &cfg)
}

/// Fits only the prior (ψ) of `model` to given code sequences, with the
/// stage-two settings of `cfg`. Marks the prior as trained.
pub fn fit_prior<S: Scalar>(
    model: &mut Model<S>,
    train_z: Vec<Vec<usize>>,
    valid_z: &[Vec<usize>],
    cfg: &TrainConfig,
) -> Result<Vec<PriorEpoch>, TrainError> {
    let k = model.dims.codes;
    if let Some(bad) = train_z.iter().chain(valid_z).flatten().find(|&&c| c >= k) {
        return Err(TrainError::Config(format!("code {bad} is outside the code book of {k}")));
    }
    if train_z.iter().any(Vec::is_empty) {
        return Err(TrainError::Config("empty latent sequence".into()));
    }
    let log_k = (k as f64).ln();
    let uniform_nll = valid_z.iter().map(|z| z.len() as f64).sum::<f64>() / valid_z.len().max(1) as f64 * log_k;
    let latent_data = Dataset { sentences: train_z };
    let mut adam = Adam::new(cfg.prior_lr);
    let sgd = Sgd { lr: cfg.prior_lr };
    let mut history = Vec::new();

    for epoch in 0..cfg.prior_epochs {
        let batches = make_batches(&latent_data, cfg.prior_batch_size, cfg.shuffle_seed.wrapping_add(1000 + epoch as u64))?;
        let (mut total, mut n) = (0.0, 0usize);
        for batch in &batches {
            let (loss_value, grads) = prior_step(model, batch)?;
            if !loss_value.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    step: n,
                    origin: batch.origin.clone(),
                    detail: "prior loss".into(),
                });
            }
            let mut grads = params::restrict(grads, &[Group::Psi]);
            params::clip_global_norm(&mut grads, cfg.clip_norm);
            if cfg.prior_optimizer == "sgd" {
                sgd.step(&mut model.params, &grads)?;
            } else {
                adam.step(&mut model.params, &grads)?;
            }
            total += loss_value * batch.size() as f64;
            n += batch.size();
        }
        let valid_nll = prior_nll_mean(model, valid_z)?;
        log::info!(
            "prior epoch {epoch}: train nll {:.3} valid nll {valid_nll:.3} (uniform {uniform_nll:.3})",
            total / n as f64
        );
        history.push(PriorEpoch {
            epoch,
            train_nll: total / n as f64,
            valid_nll,
            uniform_nll,
        });
    }
    model.prior_trained = true;
    Ok(history)
}

/// Mean per-sequence prior NLL of one batch of equal-layout latent
/// sequences, and its gradients.
fn prior_step<S: Scalar>(model: &Model<S>, batch: &Batch) -> Result<(f64, Vec<(String, Tensor<S>)>), TrainError> {
    let g = Graph::new();
    let bsz = batch.size();
    let mut z = Vec::with_capacity(batch.max_len * bsz);
    let mut w = Vec::with_capacity(z.capacity());
    let inv = S::lit(1.0 / bsz as f64);
    for t in 0..batch.max_len {
        for b in 0..bsz {
            let ok = batch.valid(b, t);
            z.push(if ok { batch.token(b, t) } else { 0 });
            w.push(if ok { inv } else { S::zero() });
        }
    }
    let logits = prior::prior_logits(&g, &model.params, &z, bsz)?;
    let loss = prior::prior_nll_graph(&g, logits, &z, &w)?;
    g.backward(loss)?;
    Ok((g.item(loss).as_f64(), g.param_grads()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_plateaus_quarter_then_eighth() {
        let mut s = PlateauSchedule::new(1.0, 0.5, 2, 5);
        assert_eq!(s.observe(1.0), (true, true));
        for _ in 0..6 {
            s.observe(2.0);
        }
        assert_eq!(s.lr, 0.125);
        assert_eq!(s.decays, 3);
    }

    #[test]
    fn stops_after_max_decays() {
        let mut s = PlateauSchedule::new(1.0, 0.5, 1, 2);
        s.observe(1.0);
        assert_eq!(s.observe(2.0), (false, true));
        assert_eq!(s.observe(2.0), (false, true));
        assert_eq!(s.observe(2.0), (false, false));
        assert_eq!(s.lr, 0.25);
    }
}
