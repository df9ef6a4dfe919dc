//! Embeddings, LSTM cells, the left-to-right encoder, additive attention
//! and the decoder step.
//!
//! Sequences are batched time-major: row `t·B + b` of a stacked matrix is
//! step `t` of sentence `b`.

use rand::Rng;

use crate::autodiff::{AutodiffError, Graph, Var};
use crate::corpus::Batch;
use crate::params::ParamStore;
use crate::scalar::Scalar;

pub const EMBED: &str = "theta.embed";
pub const ENCODER: &str = "phi.enc";
pub const DECODER: &str = "theta.dec";
pub const ATTENTION: &str = "theta.attn";

/// Registers an LSTM cell under `prefix`: `w` of shape `(input + hidden) × 4·hidden`
/// with gate blocks `[input | forget | output | candidate]`, and `b` with the
/// forget block set to 1.
pub fn init_lstm<S: Scalar, R: Rng + ?Sized>(
    p: &mut ParamStore<S>,
    prefix: &str,
    input: usize,
    hidden: usize,
    rng: &mut R,
) {
    let scale = 1.0 / ((input + hidden) as f64).sqrt();
    p.init_uniform(&format!("{prefix}.w"), input + hidden, 4 * hidden, scale, rng);
    let mut b = crate::autodiff::Tensor::zeros(1, 4 * hidden);
    for j in hidden..2 * hidden {
        b.set(0, j, S::one());
    }
    p.insert(format!("{prefix}.b"), b).expect("prefixed name");
}

/// Registers a dense layer `x·w + b`.
pub fn init_linear<S: Scalar, R: Rng + ?Sized>(p: &mut ParamStore<S>, prefix: &str, input: usize, output: usize, rng: &mut R) {
    let scale = 1.0 / (input as f64).sqrt();
    p.init_uniform(&format!("{prefix}.w"), input, output, scale, rng);
    p.init_zeros(&format!("{prefix}.b"), 1, output);
}

pub fn linear<S: Scalar>(g: &Graph<S>, p: &ParamStore<S>, prefix: &str, x: Var) -> Result<Var, AutodiffError> {
    let w = p.bind(g, &format!("{prefix}.w"));
    let b = p.bind(g, &format!("{prefix}.b"));
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros<S: Scalar>(g: &Graph<S>, batch: usize, hidden: usize) -> Self {
        Self {
            h: g.constant(crate::autodiff::Tensor::zeros(batch, hidden)),
            c: g.constant(crate::autodiff::Tensor::zeros(batch, hidden)),
        }
    }
}

/// One LSTM step on a `B × input` input.
pub fn lstm_step<S: Scalar>(
    g: &Graph<S>,
    p: &ParamStore<S>,
    prefix: &str,
    x: Var,
    state: LstmState,
) -> Result<LstmState, AutodiffError> {
    let w = p.bind(g, &format!("{prefix}.w"));
    let b = p.bind(g, &format!("{prefix}.b"));
    let hidden = g.shape(state.h)[1];
    let xh = g.concat_cols(&[x, state.h])?;
    let z = g.matmul(xh, w)?;
    let z = g.add(z, b)?;
    let i = g.sigmoid(g.slice_cols(z, 0, hidden)?);
    let f = g.sigmoid(g.slice_cols(z, hidden, 2 * hidden)?);
    let o = g.sigmoid(g.slice_cols(z, 2 * hidden, 3 * hidden)?);
    let cand = g.tanh(g.slice_cols(z, 3 * hidden, 4 * hidden)?);
    let c = g.add(g.mul(f, state.c)?, g.mul(i, cand)?)?;
    let h = g.mul(o, g.tanh(c))?;
    Ok(LstmState { h, c })
}

/// Per-step encoder hidden states.
#[derive(Debug, Clone)]
pub struct EncoderStates {
    /// `B × H` state after each position, `T` entries.
    pub steps: Vec<Var>,
    /// The same states stacked time-major, `T·B × H`.
    pub stacked: Var,
    pub cell: Var,
}

/// Left-to-right pass producing one state per input position, BOS and EOS
/// included.
pub fn encode<S: Scalar>(g: &Graph<S>, p: &ParamStore<S>, batch: &Batch) -> Result<EncoderStates, AutodiffError> {
    if batch.max_len == 0 || batch.size() == 0 {
        return Err(AutodiffError::Contract("cannot encode an empty sequence".into()));
    }
    let emb = p.bind(g, EMBED);
    let hidden = p.get(&format!("{ENCODER}.b")).expect("encoder registered").cols() / 4;
    let mut state = LstmState::zeros(g, batch.size(), hidden);
    let mut steps = Vec::with_capacity(batch.max_len);
    for t in 0..batch.max_len {
        let x = g.gather_rows(emb, &batch.column(t))?;
        state = lstm_step(g, p, ENCODER, x, state)?;
        steps.push(state.h);
    }
    let stacked = g.concat_rows(&steps)?;
    Ok(EncoderStates {
        steps,
        stacked,
        cell: state.c,
    })
}

/// Rows `(len_b − 1)·B + b` of a time-major stack: each sentence's last
/// real position.
pub fn last_rows<S: Scalar>(g: &Graph<S>, stacked: Var, batch: &Batch) -> Result<Var, AutodiffError> {
    let b = batch.size();
    let idx: Vec<usize> = (0..b).map(|i| (batch.lengths[i] - 1) * b + i).collect();
    g.gather_rows(stacked, &idx)
}

/// Attention values with their precomputed key projections.
#[derive(Debug, Clone)]
pub struct AttentionMemory {
    /// `T·B × D`, time-major.
    pub values: Var,
    keys: Var,
    pub steps: usize,
    pub batch: usize,
    /// `B × T` row-major validity.
    pub mask: Vec<bool>,
}

impl AttentionMemory {
    pub fn new<S: Scalar>(
        g: &Graph<S>,
        p: &ParamStore<S>,
        values: Var,
        steps: usize,
        batch: usize,
        mask: Vec<bool>,
    ) -> Result<Self, AutodiffError> {
        if g.shape(values)[0] != steps * batch || mask.len() != steps * batch {
            return Err(AutodiffError::Contract(format!(
                "attention memory of {:?} does not match {steps} steps × {batch}",
                g.shape(values)
            )));
        }
        let we = p.bind(g, &format!("{ATTENTION}.we"));
        let keys = g.matmul(values, we)?;
        Ok(Self {
            values,
            keys,
            steps,
            batch,
            mask,
        })
    }

    pub fn from_batch<S: Scalar>(g: &Graph<S>, p: &ParamStore<S>, values: Var, batch: &Batch) -> Result<Self, AutodiffError> {
        Self::new(g, p, values, batch.max_len, batch.size(), batch.mask())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// `B × D` convex combination of the values.
    pub context: Var,
    /// `B × T`, zero at masked positions.
    pub weights: Var,
    /// `B × T` raw scores.
    pub scores: Var,
}

/// `α̃_t = vᵀ tanh(W_e·value_t + W_d·h_prev + b)`, softmax over valid `t`,
/// context `Σ_t α_t · value_t`.
pub fn attention<S: Scalar>(
    g: &Graph<S>,
    p: &ParamStore<S>,
    mem: &AttentionMemory,
    h_prev: Var,
) -> Result<AttentionOutput, AutodiffError> {
    let wd = p.bind(g, &format!("{ATTENTION}.wd"));
    let b = p.bind(g, &format!("{ATTENTION}.b"));
    let v = p.bind(g, &format!("{ATTENTION}.v"));
    let (t, bsz) = (mem.steps, mem.batch);
    let q = g.add(g.matmul(h_prev, wd)?, b)?;
    let pre = g.add(mem.keys, g.tile_rows(q, t))?;
    let s = g.matmul(g.tanh(pre), v)?;
    let scores = g.transpose(g.reshape(s, t, bsz)?);
    let weights = g.masked_softmax(scores, Some(&mem.mask))?;
    let col = g.reshape(g.transpose(weights), t * bsz, 1)?;
    let weighted = g.scale_rows(mem.values, col)?;
    let context = g.sum_blocks(weighted, t)?;
    Ok(AttentionOutput {
        context,
        weights,
        scores,
    })
}

pub fn init_attention<S: Scalar, R: Rng + ?Sized>(p: &mut ParamStore<S>, latent: usize, hidden: usize, attn: usize, rng: &mut R) {
    p.init_uniform(&format!("{ATTENTION}.we"), latent, attn, 1.0 / (latent as f64).sqrt(), rng);
    p.init_uniform(&format!("{ATTENTION}.wd"), hidden, attn, 1.0 / (hidden as f64).sqrt(), rng);
    p.init_zeros(&format!("{ATTENTION}.b"), 1, attn);
    p.init_uniform(&format!("{ATTENTION}.v"), attn, 1, 1.0 / (attn as f64).sqrt(), rng);
}

/// What the decoder conditions on besides the previous token.
#[derive(Debug, Clone)]
pub enum Conditioning {
    /// Fresh attention context per step.
    Attention(AttentionMemory),
    /// One `B × D` vector for every step.
    Constant(Var),
    None,
}

/// One decoder step. Input is `[embed(prev); c]`, output features are
/// `[h; c]`; returns `(features, state)`.
pub fn decode_features<S: Scalar>(
    g: &Graph<S>,
    p: &ParamStore<S>,
    prev: &[usize],
    cond: &Conditioning,
    state: LstmState,
) -> Result<(Var, LstmState), AutodiffError> {
    let emb = p.bind(g, EMBED);
    let x = g.gather_rows(emb, prev)?;
    let ctx = match cond {
        Conditioning::Attention(mem) => Some(attention(g, p, mem, state.h)?.context),
        Conditioning::Constant(c) => Some(*c),
        Conditioning::None => None,
    };
    let input = match ctx {
        Some(c) => g.concat_cols(&[x, c])?,
        None => x,
    };
    let next = lstm_step(g, p, &format!("{DECODER}.lstm"), input, state)?;
    let feat = match ctx {
        Some(c) => g.concat_cols(&[next.h, c])?,
        None => next.h,
    };
    Ok((feat, next))
}

/// Vocabulary logits from decoder features.
pub fn project<S: Scalar>(g: &Graph<S>, p: &ParamStore<S>, features: Var) -> Result<Var, AutodiffError> {
    linear(g, p, &format!("{DECODER}.out"), features)
}

/// `(logits, state')` for one step.
pub fn decode_step<S: Scalar>(
    g: &Graph<S>,
    p: &ParamStore<S>,
    prev: &[usize],
    cond: &Conditioning,
    state: LstmState,
) -> Result<(Var, LstmState), AutodiffError> {
    let (feat, next) = decode_features(g, p, prev, cond, state)?;
    Ok((project(g, p, feat)?, next))
}

/// Teacher-forced decoding of a whole batch: feeds tokens `0..T−1` and
/// returns logits for targets `1..T`, stacked time-major, `(T−1)·B × V`.
pub fn decode_teacher_forced<S: Scalar>(
    g: &Graph<S>,
    p: &ParamStore<S>,
    batch: &Batch,
    cond: &Conditioning,
    init: LstmState,
) -> Result<Var, AutodiffError> {
    if batch.max_len < 2 {
        return Err(AutodiffError::Contract("sentences need BOS and EOS".into()));
    }
    let mut state = init;
    let mut feats = Vec::with_capacity(batch.max_len - 1);
    for t in 0..batch.max_len - 1 {
        let (f, s) = decode_features(g, p, &batch.column(t), cond, state)?;
        feats.push(f);
        state = s;
    }
    let stacked = g.concat_rows(&feats)?;
    project(g, p, stacked)
}

/// Targets and weights matching [`decode_teacher_forced`] rows.
pub fn targets(batch: &Batch) -> (Vec<usize>, Vec<bool>) {
    let mut ids = Vec::with_capacity((batch.max_len - 1) * batch.size());
    let mut valid = Vec::with_capacity(ids.capacity());
    for t in 1..batch.max_len {
        for b in 0..batch.size() {
            ids.push(batch.token(b, t));
            valid.push(batch.valid(b, t));
        }
    }
    (ids, valid)
}

/// Token negative log-likelihoods.
#[derive(Debug, Clone)]
pub struct TokenNll {
    /// Sum over valid targets, weighted by `weight`.
    pub total: Var,
    /// Per-sentence summed NLL in nats.
    pub per_sentence: Vec<f64>,
}

/// Cross-entropy of stacked logits against `batch` targets. `weight` scales
/// the differentiable total (e.g. `1/B` for a per-sentence mean).
pub fn token_nll<S: Scalar>(g: &Graph<S>, logits: Var, batch: &Batch, weight: S) -> Result<TokenNll, AutodiffError> {
    let (ids, valid) = targets(batch);
    let logp = g.log_softmax(logits)?;
    let picked = g.gather_cols(logp, &ids)?;
    let w: Vec<S> = valid.iter().map(|&v| if v { -weight } else { S::zero() }).collect();
    let total = g.weighted_sum(picked, &w)?;
    let bsz = batch.size();
    let mut per_sentence = vec![0.0; bsz];
    {
        let pv = g.value(picked);
        for (r, &ok) in valid.iter().enumerate() {
            if ok {
                per_sentence[r % bsz] -= pv.data()[r].as_f64();
            }
        }
    }
    Ok(TokenNll { total, per_sentence })
}
