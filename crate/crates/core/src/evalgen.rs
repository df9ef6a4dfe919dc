//! Held-out evaluation, generation from scratch, diversity metrics and the
//! augmentation study.

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Tensor};
use crate::corpus::{sequential_batches, CorpusError, CorpusSplits, Dataset, LengthHistogram, Vocab, BOS, EOS, PAD};
use crate::models::{ForwardOptions, Model, ModelError, ModelKind};
use crate::prior;
use crate::scalar::Scalar;
use crate::seqnet;
use crate::train::{train_stage_one, Checkpoint, EncodedCorpus, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    /// The checkpoint has not been through a required training stage.
    #[error("{0}")]
    State(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

impl From<crate::autodiff::AutodiffError> for EvalError {
    fn from(e: crate::autodiff::AutodiffError) -> Self {
        EvalError::Model(e.into())
    }
}

impl From<prior::PriorError> for EvalError {
    fn from(e: prior::PriorError) -> Self {
        EvalError::Model(e.into())
    }
}

/// Held-out metrics, in the units of the usual language-modelling tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean per-sentence reconstruction NLL (nats).
    pub rec: f64,
    /// `exp(total NLL / predicted tokens)`; EOS counts, BOS does not.
    pub ppl: f64,
    /// Mean per-sentence KL: analytic for Gaussian latents, `Σ_t −log γ`
    /// under the prior for discrete ones, 0 for the language model.
    pub kl: f64,
    pub tokens: usize,
    pub sentences: usize,
}

/// Teacher-forced evaluation with deterministic latents (nearest codes, or
/// Gaussian means). Per-sentence values are accumulated in f64 in sentence
/// order, so the result does not depend on `batch_size`.
pub fn evaluate<S: Scalar>(model: &Model<S>, data: &Dataset, batch_size: usize) -> Result<EvalReport, EvalError> {
    if data.is_empty() {
        return Err(EvalError::Corpus(CorpusError::Empty));
    }
    let vocab = model.dims.vocab;
    if let Some(&bad) = data.sentences.iter().flatten().find(|&&id| id >= vocab) {
        return Err(EvalError::Config(format!(
            "token id {bad} is outside the model vocabulary of {vocab}"
        )));
    }
    let mut rec = vec![0.0; data.len()];
    let mut kl = vec![0.0; data.len()];
    for batch in sequential_batches(data, batch_size)? {
        let g = Graph::new();
        let f = model.forward(&g, &batch, &ForwardOptions::default())?;
        let batch_kl = match &f.quant {
            Some(q) => model.discrete_kl_per_sentence(q)?,
            None => f.breakdown.per_sentence_kl.clone(),
        };
        for (b, &origin) in batch.origin.iter().enumerate() {
            rec[origin] = f.breakdown.per_sentence_rec[b];
            kl[origin] = batch_kl[b];
        }
    }
    let tokens = data.predicted_token_count();
    let total: f64 = rec.iter().sum();
    let n = data.len() as f64;
    let report = EvalReport {
        rec: total / n,
        ppl: (total / tokens as f64).exp(),
        kl: kl.iter().sum::<f64>() / n,
        tokens,
        sentences: data.len(),
    };
    if !(report.rec.is_finite() && report.ppl.is_finite() && report.kl.is_finite()) {
        return Err(EvalError::Contract(format!("non-finite evaluation result {report:?}")));
    }
    Ok(report)
}

/// Evaluates raw tokenized sentences against the checkpoint's own vocabulary.
pub fn evaluate_checkpoint(ck: &Checkpoint, sentences: &[Vec<String>], batch_size: usize) -> Result<EvalReport, EvalError> {
    if ck.vocab.len() != ck.model.dims.vocab {
        return Err(EvalError::Config(format!(
            "checkpoint vocabulary has {} entries but the model expects {}",
            ck.vocab.len(),
            ck.model.dims.vocab
        )));
    }
    let data = Dataset::encode(sentences, &ck.vocab, ck.config.max_words);
    evaluate(&ck.model, &data, batch_size)
}

/// How generated sentences get their latent length.
#[derive(Debug, Clone, PartialEq)]
pub enum LengthMode {
    /// Framed length `T` drawn from a corpus histogram.
    Histogram(LengthHistogram),
    /// A fixed number of words; the latent sequence has `words + 2`
    /// positions to match BOS/EOS framing.
    Fixed(usize),
}

/// Samples `n` sentences with no source text: latents from the prior, then
/// tokens from the decoder's softmax until EOS or `2·T` tokens. Only the
/// prior sees `temperature`; tokens are drawn at temperature 1. Output
/// carries no BOS/EOS framing.
pub fn generate_from_scratch<S: Scalar>(
    model: &Model<S>,
    vocab: &Vocab,
    n: usize,
    length: &LengthMode,
    seed: u64,
    temperature: f64,
) -> Result<Vec<Vec<String>>, EvalError> {
    if model.kind == ModelKind::Davam && !model.prior_trained {
        return Err(EvalError::State(
            "DAVAM generation needs the stage-two prior; this checkpoint has only finished stage one".into(),
        ));
    }
    if vocab.len() != model.dims.vocab {
        return Err(EvalError::Config(format!(
            "vocabulary has {} entries but the model expects {}",
            vocab.len(),
            model.dims.vocab
        )));
    }
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(EvalError::Config(format!("temperature must be finite and non-negative, got {temperature}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lengths: Vec<usize> = (0..n)
        .map(|_| match length {
            LengthMode::Histogram(h) => h.sample(&mut rng).max(2),
            LengthMode::Fixed(words) => words + 2,
        })
        .collect();
    // equal lengths decode together; output keeps the draw order
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &t) in lengths.iter().enumerate() {
        groups.entry(t).or_default().push(i);
    }
    let mut out = vec![Vec::new(); n];
    for (t, members) in groups {
        let ids = generate_group(model, members.len(), t, temperature, &mut rng)?;
        for (i, s) in members.into_iter().zip(ids) {
            out[i] = vocab.decode(&s);
        }
    }
    Ok(out)
}

/// Token ids (no framing) for `n` sentences of latent length `t`.
fn generate_group<S: Scalar, R: Rng + ?Sized>(
    model: &Model<S>,
    n: usize,
    t: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>, EvalError> {
    let g = Graph::new();
    let d = model.dims.latent;
    let (values, steps) = match model.kind {
        ModelKind::Davam | ModelKind::DavamQ => {
            let book = model
                .codebook
                .as_ref()
                .ok_or_else(|| EvalError::State("discrete model without a code book".into()))?;
            let steps = if model.kind == ModelKind::Davam { t } else { 1 };
            let z = prior::sample_prior(&model.params, n, steps, temperature, rng)?;
            // time-major rows
            let mut idx = Vec::with_capacity(steps * n);
            for pos in 0..steps {
                idx.extend(z.iter().map(|s| s[pos]));
            }
            (Some(g.constant(book.lookup(&idx))), steps)
        }
        ModelKind::Gavam => (Some(g.constant(prior::sample_gaussian_prior(&model.params, n, t, temperature, rng)?)), t),
        ModelKind::Vae => {
            let data = (0..n * d)
                .map(|_| {
                    let e: f64 = StandardNormal.sample(rng);
                    S::lit(e)
                })
                .collect();
            (Some(g.constant(Tensor::new(n, d, data)?)), 1)
        }
        ModelKind::LstmLm => (None, 0),
    };
    let valid = vec![true; steps * n];
    let (cond, mut state) = model.conditioning(&g, values, steps, n, &valid)?;
    let cap = 2 * t;
    let mut seqs: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut done = vec![false; n];
    let mut prev = vec![BOS; n];
    for _ in 0..cap {
        let (logits, next) = seqnet::decode_step(&g, &model.params, &prev, &cond, state)?;
        state = next;
        let lv = g.value(logits);
        for b in 0..n {
            if done[b] {
                continue;
            }
            let tok = sample_token(lv.row_slice(b), rng);
            if tok == EOS {
                done[b] = true;
            } else {
                seqs[b].push(tok);
            }
            prev[b] = tok;
        }
        if done.iter().all(|&x| x) {
            break;
        }
    }
    Ok(seqs)
}

/// Draws from the softmax of `logits`, never PAD or BOS.
fn sample_token<S: Scalar, R: Rng + ?Sized>(logits: &[S], rng: &mut R) -> usize {
    let allowed = |k: usize| k != PAD && k != BOS;
    let mx = logits
        .iter()
        .enumerate()
        .filter(|&(k, _)| allowed(k))
        .map(|(_, v)| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(k, v)| if allowed(k) { (v.as_f64() - mx).exp() } else { 0.0 })
        .collect();
    let mut u = rng.random::<f64>() * w.iter().sum::<f64>();
    let mut last = EOS;
    for (k, &x) in w.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        if u < x {
            return k;
        }
        u -= x;
        last = k;
    }
    last
}

/// Unigram entropy and distinct-n ratios of a pooled set of sentences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub ent: f64,
    pub dist1: f64,
    /// 0 when no sentence has two tokens.
    pub dist2: f64,
}

pub fn diversity<T: AsRef<str>>(sentences: &[Vec<T>]) -> Result<DiversityReport, EvalError> {
    let total: usize = sentences.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(EvalError::Contract("diversity needs at least one token".into()));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut bigrams: HashSet<(&str, &str)> = HashSet::new();
    let mut n_bigrams = 0usize;
    for s in sentences {
        for w in s {
            *counts.entry(w.as_ref()).or_default() += 1;
        }
        for pair in s.windows(2) {
            bigrams.insert((pair[0].as_ref(), pair[1].as_ref()));
            n_bigrams += 1;
        }
    }
    let n = total as f64;
    let ent = -counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            p * p.ln()
        })
        .sum::<f64>();
    Ok(DiversityReport {
        ent: ent.max(0.0),
        dist1: counts.len() as f64 / n,
        dist2: if n_bigrams == 0 {
            0.0
        } else {
            bigrams.len() as f64 / n_bigrams as f64
        },
    })
}

/// Mean per-sentence perplexity under a reference language model; a
/// stand-in fluency score that is only comparable within one run.
pub fn fluency_proxy<T: AsRef<str>>(sentences: &[Vec<T>], reference: &Checkpoint) -> Result<f64, EvalError> {
    if reference.model.kind != ModelKind::LstmLm {
        return Err(EvalError::Config(format!(
            "the fluency reference must be an lstm-lm checkpoint, got {}",
            reference.model.kind
        )));
    }
    if sentences.is_empty() {
        return Err(EvalError::Contract("no sentences to score".into()));
    }
    let lines: Vec<Vec<String>> = sentences
        .iter()
        .map(|s| s.iter().map(|w| w.as_ref().to_string()).collect())
        .collect();
    let data = Dataset::encode(&lines, &reference.vocab, usize::MAX);
    let mut ppl = vec![0.0; data.len()];
    for batch in sequential_batches(&data, 32)? {
        let g = Graph::new();
        let f = reference.model.forward(&g, &batch, &ForwardOptions::default())?;
        for (b, &origin) in batch.origin.iter().enumerate() {
            let tokens = data.sentences[origin].len() - 1;
            ppl[origin] = (f.breakdown.per_sentence_rec[b] / tokens as f64).exp();
        }
    }
    Ok(ppl.iter().sum::<f64>() / ppl.len() as f64)
}

/// One row of the augmentation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentRow {
    pub base_size: usize,
    pub ratio: f64,
    pub ppl_base: f64,
    pub ppl_aug: f64,
}

/// Trains two language models with identical settings, one on the first
/// `base_size` training sentences and one on those plus
/// `round(ratio · base_size)` sentences generated by `generator`, and
/// reports both test perplexities. Both use the generator's vocabulary so
/// the perplexities are comparable.
pub fn augment(
    splits: &CorpusSplits,
    base_size: usize,
    ratio: f64,
    generator: &Checkpoint,
    lm_config: &TrainConfig,
    seed: u64,
) -> Result<AugmentRow, EvalError> {
    let mut rows = augment_table(splits, &[base_size], &[ratio], generator, lm_config, seed)?;
    Ok(rows.remove(0))
}

/// [`augment`] over a grid; each base model is trained once and shared by
/// its ratios. Rows come out base-size major.
pub fn augment_table(
    splits: &CorpusSplits,
    base_sizes: &[usize],
    ratios: &[f64],
    generator: &Checkpoint,
    lm_config: &TrainConfig,
    seed: u64,
) -> Result<Vec<AugmentRow>, EvalError> {
    if let Some(bad) = ratios.iter().find(|r| !(**r >= 0.0 && r.is_finite())) {
        return Err(EvalError::Config(format!("ratio must be finite and non-negative, got {bad}")));
    }
    if lm_config.model != ModelKind::LstmLm {
        return Err(EvalError::Config(format!("augmentation trains lstm-lm models, config says {}", lm_config.model)));
    }
    if splits.test.is_empty() || splits.valid.is_empty() {
        return Err(EvalError::Config("augmentation needs validation and test splits".into()));
    }
    let test_ppl = |train: Vec<Vec<String>>| -> Result<f64, EvalError> {
        let s = CorpusSplits {
            train,
            valid: splits.valid.clone(),
            test: splits.test.clone(),
        };
        let corpus = EncodedCorpus::with_vocab(&s, generator.vocab.clone(), lm_config.max_words);
        let trained = train_stage_one(&corpus, lm_config)?;
        Ok(evaluate(&trained.checkpoint.model, &corpus.test, lm_config.batch_size)?.ppl)
    };
    let mut rows = Vec::with_capacity(base_sizes.len() * ratios.len());
    for &base_size in base_sizes {
        if base_size == 0 || base_size > splits.train.len() {
            return Err(EvalError::Config(format!(
                "base size {base_size} must lie in 1..={} (the training split)",
                splits.train.len()
            )));
        }
        let base: Vec<Vec<String>> = splits.train[..base_size].to_vec();
        let base_data = Dataset::encode(&base, &generator.vocab, generator.config.max_words);
        let hist = crate::corpus::length_histogram(&base_data)?;
        let ppl_base = test_ppl(base.clone())?;
        for &ratio in ratios {
            let extra = (ratio * base_size as f64).round() as usize;
            let ppl_aug = if extra == 0 {
                ppl_base
            } else {
                let generated = generate_from_scratch(
                    &generator.model,
                    &generator.vocab,
                    extra,
                    &LengthMode::Histogram(hist.clone()),
                    seed,
                    1.0,
                )?;
                let mut augmented = base.clone();
                augmented.extend(generated.into_iter().filter(|s| !s.is_empty()));
                test_ppl(augmented)?
            };
            rows.push(AugmentRow {
                base_size,
                ratio,
                ppl_base,
                ppl_aug,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diversity_hand_counts() {
        let r = diversity(&[vec!["a", "a", "b"]]).unwrap();
        assert_eq!(r.dist1, 2.0 / 3.0);
        assert_eq!(r.dist2, 1.0);
        let want = -((2.0f64 / 3.0) * (2.0f64 / 3.0).ln() + (1.0f64 / 3.0) * (1.0f64 / 3.0).ln());
        assert!((r.ent - want).abs() < 1e-15);
    }

    #[test]
    fn diversity_degenerate_cases() {
        let same = diversity(&[vec!["x", "x"], vec!["x", "x"]]).unwrap();
        assert_eq!(same.ent, 0.0);
        assert_eq!(same.dist1, 0.25);
        let distinct = diversity(&[vec!["p", "q", "r"]]).unwrap();
        assert_eq!(distinct.dist1, 1.0);
        assert!(diversity::<&str>(&[]).is_err());
        assert!(diversity::<&str>(&[vec![]]).is_err());
    }
}
