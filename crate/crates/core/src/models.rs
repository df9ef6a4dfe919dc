//! Model assemblies and their losses.
//!
//! | kind      | latent                          | decoder conditioning           |
//! |-----------|---------------------------------|--------------------------------|
//! | `Davam`   | quantized state per position    | attention over code vectors    |
//! | `DavamQ`  | quantized last state            | initial state + per-step input |
//! | `Gavam`   | Gaussian per position           | attention over samples         |
//! | `Vae`     | Gaussian from last state        | initial state + per-step input |
//! | `LstmLm`  | none                            | none                           |
//!
//! All reported losses are means over sentences of per-sentence sums.

use std::fmt;
use std::str::FromStr;

use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::corpus::Batch;
use crate::params::{ParamError, ParamStore};
use crate::prior::{self, PriorError, PriorSpec};
use crate::quantizer::{self, CodeBook, LatentSequence, QuantizerError};
use crate::scalar::Scalar;
use crate::seqnet::{self, AttentionMemory, Conditioning, LstmState};

pub use crate::prior::prior_nll as discrete_kl;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Quantizer(#[from] QuantizerError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("non-positive standard deviation in Gaussian KL")]
    Domain,
    #[error("{0}")]
    State(String),
    #[error("{0}")]
    Contract(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Davam,
    DavamQ,
    Gavam,
    Vae,
    LstmLm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Davam,
        ModelKind::DavamQ,
        ModelKind::Gavam,
        ModelKind::Vae,
        ModelKind::LstmLm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Davam => "davam",
            ModelKind::DavamQ => "davam-q",
            ModelKind::Gavam => "gavam",
            ModelKind::Vae => "vae",
            ModelKind::LstmLm => "lstm-lm",
        }
    }

    /// Kinds with a code book and a separately trained categorical prior.
    pub fn is_discrete(self) -> bool {
        matches!(self, ModelKind::Davam | ModelKind::DavamQ)
    }

    pub fn uses_attention(self) -> bool {
        matches!(self, ModelKind::Davam | ModelKind::Gavam)
    }

    fn has_encoder(self) -> bool {
        self != ModelKind::LstmLm
    }

    fn latent_input(self) -> bool {
        self != ModelKind::LstmLm
    }

    fn init_from_latent(self) -> bool {
        matches!(self, ModelKind::DavamQ | ModelKind::Vae)
    }

    /// Numeric tag stored in checkpoints.
    pub fn tag(self) -> u32 {
        match self {
            ModelKind::Davam => 1,
            ModelKind::DavamQ => 2,
            ModelKind::Gavam => 3,
            ModelKind::Vae => 4,
            ModelKind::LstmLm => 5,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        ModelKind::ALL.into_iter().find(|k| k.tag() == tag)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == norm || k.name().replace('-', "") == norm)
            .ok_or_else(|| format!("unknown model kind {s:?}"))
    }
}

/// Layer sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub latent: usize,
    pub attn: usize,
    /// Code book size `K`.
    pub codes: usize,
    pub prior_channels: usize,
    pub prior_layers: usize,
    pub prior_kernel: usize,
}

impl ModelDims {
    pub fn prior_spec(&self, kind: ModelKind) -> PriorSpec {
        PriorSpec {
            codes: if kind.is_discrete() { self.codes } else { self.latent },
            channels: self.prior_channels,
            layers: self.prior_layers,
            kernel: self.prior_kernel,
        }
    }
}

/// How encoder states become latents on a forward pass.
#[derive(Debug, Clone)]
pub enum QuantizeMode<S> {
    /// Nearest-code lookup against the current book.
    Live,
    /// Fixed indices, with quantized values `h + offsets`. Taking offsets as
    /// `e_z − h` at a base point makes the loss a smooth function of the
    /// encoder whose gradient is the straight-through gradient.
    Frozen { indices: Vec<usize>, offsets: Tensor<S> },
    /// Encoder states pass through unquantized.
    Bypass,
}

#[derive(Debug, Clone)]
pub struct ForwardOptions<S> {
    /// Commitment weight.
    pub beta: f64,
    /// Weight on the KL term of the vanilla VAE.
    pub kl_weight: f64,
    pub quantize: QuantizeMode<S>,
    /// Draw Gaussian latents (training) or use their means (evaluation).
    pub sample: bool,
    pub noise_seed: u64,
}

impl<S> Default for ForwardOptions<S> {
    fn default() -> Self {
        Self {
            beta: 0.0,
            kl_weight: 1.0,
            quantize: QuantizeMode::Live,
            sample: false,
            noise_seed: 0,
        }
    }
}

/// Loss terms, each a mean over sentences of per-sentence sums.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub kl: f64,
    pub commit: f64,
    pub total: f64,
    pub per_sentence_rec: Vec<f64>,
    pub per_sentence_kl: Vec<f64>,
}

/// Encoder states and their code assignments, for EMA and K-means.
#[derive(Debug, Clone)]
pub struct QuantRecord<S> {
    /// Pre-quantization states, one row per latent position.
    pub h: Tensor<S>,
    /// Code indices; empty when quantization was bypassed.
    pub z: LatentSequence,
    pub valid: Vec<bool>,
    /// Time-major `steps × batch` layout of the rows.
    pub steps: usize,
    pub batch: usize,
}

impl<S: Scalar> QuantRecord<S> {
    /// Latent indices of sentence `b` at valid positions, in order.
    pub fn sentence(&self, b: usize) -> Vec<usize> {
        (0..self.steps)
            .map(|t| t * self.batch + b)
            .filter(|&r| self.valid[r])
            .map(|r| self.z[r])
            .collect()
    }

    pub fn valid_rows(&self) -> Vec<Vec<S>> {
        (0..self.h.rows())
            .filter(|&r| self.valid[r])
            .map(|r| self.h.row_slice(r).to_vec())
            .collect()
    }
}

#[derive(Debug)]
pub struct Forward<S> {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    pub quant: Option<QuantRecord<S>>,
    /// Time-major continuous latents (Gaussian kinds).
    pub latents: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<S> {
    pub kind: ModelKind,
    pub dims: ModelDims,
    pub params: ParamStore<S>,
    pub codebook: Option<CodeBook<S>>,
    /// Whether a stage-two prior has been fitted.
    pub prior_trained: bool,
}

fn time_major_valid(batch: &Batch) -> Vec<bool> {
    let mut v = Vec::with_capacity(batch.max_len * batch.size());
    for t in 0..batch.max_len {
        for b in 0..batch.size() {
            v.push(batch.valid(b, t));
        }
    }
    v
}

fn normal_noise<S: Scalar>(rows: usize, cols: usize, seed: u64) -> Tensor<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| {
            let e: f64 = StandardNormal.sample(&mut rng);
            S::lit(e)
        })
        .collect();
    Tensor::new(rows, cols, data).expect("noise shape")
}

/// Encoder-to-latent projection of the discrete kinds.
pub const PROJ: &str = "phi.proj.w";

impl<S: Scalar> Model<S> {
    pub fn new(kind: ModelKind, dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let d = dims;
        p.init_uniform(seqnet::EMBED, d.vocab, d.embed, 1.0, &mut rng);
        if kind.has_encoder() {
            seqnet::init_lstm(&mut p, seqnet::ENCODER, d.embed, d.hidden, &mut rng);
        }
        match kind {
            ModelKind::Davam | ModelKind::DavamQ => {
                // no bias: a shared offset would move every state at once and
                // outrun the EMA code book
                p.init_uniform(PROJ, d.hidden, d.latent, 1.0 / (d.hidden as f64).sqrt(), &mut rng);
            }
            ModelKind::Gavam | ModelKind::Vae => {
                seqnet::init_linear(&mut p, "phi.mu", d.hidden, d.latent, &mut rng);
                seqnet::init_linear(&mut p, "phi.sigma", d.hidden, d.latent, &mut rng);
            }
            ModelKind::LstmLm => {}
        }
        if kind.uses_attention() {
            seqnet::init_attention(&mut p, d.latent, d.hidden, d.attn, &mut rng);
        }
        let cond = if kind.latent_input() { d.latent } else { 0 };
        seqnet::init_lstm(&mut p, &format!("{}.lstm", seqnet::DECODER), d.embed + cond, d.hidden, &mut rng);
        seqnet::init_linear(&mut p, &format!("{}.out", seqnet::DECODER), d.hidden + cond, d.vocab, &mut rng);
        if kind.init_from_latent() {
            seqnet::init_linear(&mut p, &format!("{}.init", seqnet::DECODER), d.latent, d.hidden, &mut rng);
        }
        let spec = d.prior_spec(kind);
        let codebook = if kind.is_discrete() {
            prior::init_categorical(&mut p, &spec, &mut rng);
            let codes = Tensor::uniform(d.codes, d.latent, 1.0 / d.codes as f64, &mut rng);
            Some(CodeBook::from_codes(codes, quantizer::DEFAULT_EMA_DECAY))
        } else {
            if kind == ModelKind::Gavam {
                prior::init_gaussian(&mut p, &spec, &mut rng);
            }
            None
        };
        Self {
            kind,
            dims,
            params: p,
            codebook,
            prior_trained: false,
        }
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            kind: self.kind,
            dims: self.dims,
            params: self.params.cast(),
            codebook: self.codebook.as_ref().map(|b| CodeBook {
                codes: b.codes.cast(),
                ema_counts: b.ema_counts.iter().map(|&c| T::lit(c.as_f64())).collect(),
                ema_sums: b.ema_sums.cast(),
                decay: T::lit(b.decay.as_f64()),
                eps: T::lit(b.eps.as_f64()),
            }),
            prior_trained: self.prior_trained,
        }
    }

    fn book(&self) -> Result<&CodeBook<S>, ModelError> {
        self.codebook
            .as_ref()
            .ok_or_else(|| ModelError::State(format!("{} has no code book", self.kind)))
    }

    /// Continuous encoder output per latent position, before quantization
    /// or sampling. Returns `(rows, steps, valid)` in time-major layout.
    pub fn encoder_states(&self, g: &Graph<S>, batch: &Batch) -> Result<(Var, usize, Vec<bool>), ModelError> {
        let enc = seqnet::encode(g, &self.params, batch)?;
        match self.kind {
            ModelKind::Davam => {
                let h = g.matmul(enc.stacked, self.params.bind(g, PROJ))?;
                Ok((h, batch.max_len, time_major_valid(batch)))
            }
            ModelKind::DavamQ => {
                let last = seqnet::last_rows(g, enc.stacked, batch)?;
                let h = g.matmul(last, self.params.bind(g, PROJ))?;
                Ok((h, 1, vec![true; batch.size()]))
            }
            ModelKind::Gavam => Ok((enc.stacked, batch.max_len, time_major_valid(batch))),
            ModelKind::Vae => Ok((seqnet::last_rows(g, enc.stacked, batch)?, 1, vec![true; batch.size()])),
            ModelKind::LstmLm => Err(ModelError::State("the language model has no encoder".into())),
        }
    }

    /// Builds the stage-one loss graph for one batch.
    pub fn forward(&self, g: &Graph<S>, batch: &Batch, opts: &ForwardOptions<S>) -> Result<Forward<S>, ModelError> {
        let bsz = batch.size();
        let inv_b = S::lit(1.0 / bsz as f64);
        match self.kind {
            ModelKind::Davam | ModelKind::DavamQ => self.forward_discrete(g, batch, opts, inv_b),
            ModelKind::Gavam | ModelKind::Vae => self.forward_gaussian(g, batch, opts, inv_b),
            ModelKind::LstmLm => {
                let state = LstmState::zeros(g, bsz, self.dims.hidden);
                let logits = seqnet::decode_teacher_forced(g, &self.params, batch, &Conditioning::None, state)?;
                let nll = seqnet::token_nll(g, logits, batch, inv_b)?;
                let rec = mean(&nll.per_sentence);
                Ok(Forward {
                    loss: nll.total,
                    breakdown: LossBreakdown {
                        rec,
                        total: rec,
                        per_sentence_kl: vec![0.0; bsz],
                        per_sentence_rec: nll.per_sentence,
                        ..Default::default()
                    },
                    quant: None,
                    latents: None,
                })
            }
        }
    }

    /// Decoder conditioning and initial state for time-major latents
    /// `values` (`steps·B × D`); `valid` marks real positions.
    pub fn conditioning(&self, g: &Graph<S>, values: Option<Var>, steps: usize, bsz: usize, valid: &[bool]) -> Result<(Conditioning, LstmState), ModelError> {
        let Some(values) = values else {
            return Ok((Conditioning::None, LstmState::zeros(g, bsz, self.dims.hidden)));
        };
        if self.kind.uses_attention() {
            // B × T mask from the time-major validity
            let mut mask = vec![false; steps * bsz];
            for t in 0..steps {
                for b in 0..bsz {
                    mask[b * steps + t] = valid[t * bsz + b];
                }
            }
            let mem = AttentionMemory::new(g, &self.params, values, steps, bsz, mask)?;
            Ok((Conditioning::Attention(mem), LstmState::zeros(g, bsz, self.dims.hidden)))
        } else {
            let h0 = g.tanh(seqnet::linear(g, &self.params, &format!("{}.init", seqnet::DECODER), values)?);
            let c0 = g.constant(Tensor::zeros(bsz, self.dims.hidden));
            Ok((Conditioning::Constant(values), LstmState { h: h0, c: c0 }))
        }
    }

    fn decode_latents(&self, g: &Graph<S>, batch: &Batch, values: Var, steps: usize, valid: &[bool], inv_b: S) -> Result<seqnet::TokenNll, ModelError> {
        let (cond, init) = self.conditioning(g, Some(values), steps, batch.size(), valid)?;
        let logits = seqnet::decode_teacher_forced(g, &self.params, batch, &cond, init)?;
        Ok(seqnet::token_nll(g, logits, batch, inv_b)?)
    }

    fn forward_discrete(&self, g: &Graph<S>, batch: &Batch, opts: &ForwardOptions<S>, inv_b: S) -> Result<Forward<S>, ModelError> {
        let bsz = batch.size();
        let (h, steps, valid) = self.encoder_states(g, batch)?;
        let (q, z) = match &opts.quantize {
            QuantizeMode::Live => {
                let (z, q) = quantizer::quantize(g, h, self.book()?)?;
                (q, z)
            }
            QuantizeMode::Frozen { indices, offsets } => {
                if indices.len() != g.shape(h)[0] || offsets.shape() != g.shape(h) {
                    return Err(ModelError::Contract("frozen quantization does not match the batch".into()));
                }
                let q = g.add(h, g.constant(offsets.clone()))?;
                (q, indices.clone())
            }
            QuantizeMode::Bypass => (h, Vec::new()),
        };
        let nll = self.decode_latents(g, batch, q, steps, &valid, inv_b)?;
        let rec = mean(&nll.per_sentence);
        let (loss, commit) = if z.is_empty() || opts.beta == 0.0 {
            (nll.total, 0.0)
        } else {
            let w: Vec<S> = valid.iter().map(|&v| if v { inv_b } else { S::zero() }).collect();
            let c = quantizer::commitment_loss(g, h, self.book()?, &z, S::lit(opts.beta), &w)?;
            (g.add(nll.total, c)?, g.item(c).as_f64())
        };
        let quant = QuantRecord {
            h: g.value(h).clone(),
            z,
            valid,
            steps,
            batch: bsz,
        };
        Ok(Forward {
            loss,
            breakdown: LossBreakdown {
                rec,
                kl: 0.0,
                commit,
                total: rec + commit,
                per_sentence_kl: vec![0.0; bsz],
                per_sentence_rec: nll.per_sentence,
            },
            quant: Some(quant),
            latents: None,
        })
    }

    fn forward_gaussian(&self, g: &Graph<S>, batch: &Batch, opts: &ForwardOptions<S>, inv_b: S) -> Result<Forward<S>, ModelError> {
        let bsz = batch.size();
        let (h, steps, valid) = self.encoder_states(g, batch)?;
        let mu = seqnet::linear(g, &self.params, "phi.mu", h)?;
        let sigma = g.add_const(g.softplus(seqnet::linear(g, &self.params, "phi.sigma", h)?), S::lit(prior::SIGMA_FLOOR));
        let z = if opts.sample {
            let [r, c] = g.shape(mu);
            let eps = g.constant(normal_noise(r, c, opts.noise_seed));
            g.add(mu, g.mul(sigma, eps)?)?
        } else {
            mu
        };
        let (pmu, psigma) = if self.kind == ModelKind::Gavam {
            let out = prior::gaussian_prior(g, &self.params, z, bsz)?;
            (out.mu, out.sigma)
        } else {
            let [r, c] = g.shape(mu);
            (g.constant(Tensor::zeros(r, c)), g.constant(Tensor::full(r, c, S::one())))
        };
        let kl_elems = gaussian_kl_elements(g, mu, sigma, pmu, psigma)?;
        let w: Vec<S> = valid.iter().map(|&v| if v { inv_b } else { S::zero() }).collect();
        let kl_var = g.weighted_sum(kl_elems, &w)?;
        let mut per_sentence_kl = vec![0.0; bsz];
        {
            let kv = g.value(kl_elems);
            for r in 0..kv.rows() {
                if valid[r] {
                    per_sentence_kl[r % bsz] += kv.row_slice(r).iter().map(|v| v.as_f64()).sum::<f64>();
                }
            }
        }
        let nll = self.decode_latents(g, batch, z, steps, &valid, inv_b)?;
        let rec = mean(&nll.per_sentence);
        let kl = mean(&per_sentence_kl);
        let weight = if self.kind == ModelKind::Vae { opts.kl_weight } else { 1.0 };
        let loss = if weight == 0.0 {
            nll.total
        } else {
            g.add(nll.total, g.scale(kl_var, S::lit(weight)))?
        };
        Ok(Forward {
            loss,
            breakdown: LossBreakdown {
                rec,
                kl,
                commit: 0.0,
                total: rec + weight * kl,
                per_sentence_rec: nll.per_sentence,
                per_sentence_kl,
            },
            quant: None,
            latents: Some(z),
        })
    }

    /// Differentiable discrete KL `Σ_t −log γ_{t,z_t}` (mean over sentences)
    /// for time-major indices from a forward pass. The indices are integers,
    /// so nothing upstream of quantization can receive gradient from it.
    pub fn discrete_kl_graph(&self, g: &Graph<S>, quant: &QuantRecord<S>) -> Result<Var, ModelError> {
        let logits = prior::prior_logits(g, &self.params, &quant.z, quant.batch)?;
        let inv_b = S::lit(1.0 / quant.batch as f64);
        let w: Vec<S> = quant.valid.iter().map(|&v| if v { inv_b } else { S::zero() }).collect();
        Ok(prior::prior_nll_graph(g, logits, &quant.z, &w)?)
    }

    /// Per-sentence `Σ_t −log γ_{t,z_t}` under the trained prior, computed
    /// one sentence at a time.
    pub fn discrete_kl_per_sentence(&self, quant: &QuantRecord<S>) -> Result<Vec<f64>, ModelError> {
        (0..quant.batch)
            .map(|b| {
                let z = quant.sentence(b);
                let gamma = prior::prior_forward(&self.params, &z)?;
                Ok(discrete_kl(&z, &gamma))
            })
            .collect()
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Element-wise `½(log(σ̂²/σ²) − 1 + (σ² + (μ̂−μ)²)/σ̂²)`.
pub fn gaussian_kl_elements<S: Scalar>(g: &Graph<S>, mu: Var, sigma: Var, mu_hat: Var, sigma_hat: Var) -> Result<Var, AutodiffError> {
    let log_ratio = g.sub(g.log(sigma_hat)?, g.log(sigma)?)?;
    let num = g.add(g.square(sigma), g.square(g.sub(mu_hat, mu)?))?;
    let frac = g.div(num, g.scale(g.square(sigma_hat), S::lit(2.0)))?;
    Ok(g.add_const(g.add(log_ratio, frac)?, S::lit(-0.5)))
}

/// `Σ_t Σ_d ½(log(σ̂²/σ²) − 1 + (σ² + (μ̂−μ)²)/σ̂²)` between diagonal
/// Gaussians with standard deviations `sigma` and `sigma_hat`.
pub fn gaussian_kl(mu: &Tensor<f64>, sigma: &Tensor<f64>, mu_hat: &Tensor<f64>, sigma_hat: &Tensor<f64>) -> Result<f64, ModelError> {
    let shape = mu.shape();
    if [sigma.shape(), mu_hat.shape(), sigma_hat.shape()].iter().any(|s| *s != shape) {
        return Err(ModelError::Contract("Gaussian KL arguments differ in shape".into()));
    }
    let mut kl = 0.0;
    for i in 0..mu.len() {
        let (m, s, mh, sh) = (mu.data()[i], sigma.data()[i], mu_hat.data()[i], sigma_hat.data()[i]);
        if !(s > 0.0 && sh > 0.0) {
            return Err(ModelError::Domain);
        }
        kl += 0.5 * ((sh * sh / (s * s)).ln() - 1.0 + (s * s + (mh - m) * (mh - m)) / (sh * sh));
    }
    Ok(kl)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_kl_closed_forms() {
        let one = Tensor::from_f64(1, 1, &[1.0]).unwrap();
        let zero = Tensor::from_f64(1, 1, &[0.0]).unwrap();
        assert_eq!(gaussian_kl(&one, &one, &zero, &one).unwrap(), 0.5);
        assert_eq!(gaussian_kl(&one, &one, &one, &one).unwrap(), 0.0);
        assert!(matches!(gaussian_kl(&one, &zero, &one, &one), Err(ModelError::Domain)));
    }

    #[test]
    fn kind_names_round_trip() {
        for k in ModelKind::ALL {
            assert_eq!(k.name().parse::<ModelKind>().unwrap(), k);
            assert_eq!(ModelKind::from_tag(k.tag()), Some(k));
        }
        assert_eq!("DAVAM_Q".parse::<ModelKind>().unwrap(), ModelKind::DavamQ);
    }
}
