//! Autoregressive priors over latent sequences: a residual causal 1-D
//! convolution stack with a categorical head over code indices, and the
//! same stack with a Gaussian head over continuous latents.
//!
//! Inputs are shifted one position right behind a learned start symbol, so
//! the output at position `t` depends on latents `0..t` only. Padding is on
//! the left, which keeps every position blind to its future.

use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::params::{ParamError, ParamStore};
use crate::scalar::Scalar;

pub const CATEGORICAL: &str = "psi.prior";
pub const GAUSSIAN: &str = "psi.gprior";
/// Floor on `γ_{t,z_t}` before taking logs.
pub const PROB_FLOOR: f64 = 1e-10;
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("latent index {index} out of range for {k} codes")]
    IndexRange { index: usize, k: usize },
    #[error("sequence length must be at least 1")]
    EmptySequence,
    #[error("prior network is not initialized")]
    Missing,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

/// Stack hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PriorSpec {
    pub codes: usize,
    pub channels: usize,
    pub layers: usize,
    pub kernel: usize,
}

impl PriorSpec {
    /// Number of latent positions visible to one output.
    pub fn receptive_field(&self) -> usize {
        self.layers * (self.kernel - 1) + 1
    }

    /// Reads the stack shape back from registered parameters.
    pub fn from_params<S: Scalar>(p: &ParamStore<S>, prefix: &str) -> Result<Self, PriorError> {
        let channels = p
            .get(&format!("{prefix}.conv0.b"))
            .map_err(|_| PriorError::Missing)?
            .cols();
        let kernel = p.get(&format!("{prefix}.conv0.w"))?.rows() / channels;
        let layers = (0..).take_while(|l| p.contains(&format!("{prefix}.conv{l}.w"))).count();
        let codes = if prefix == CATEGORICAL {
            p.get(&format!("{prefix}.out.b"))?.cols()
        } else {
            p.get(&format!("{prefix}.head.b"))?.cols() / 2
        };
        Ok(Self {
            codes,
            channels,
            layers,
            kernel,
        })
    }
}

fn init_stack<S: Scalar, R: Rng + ?Sized>(p: &mut ParamStore<S>, prefix: &str, spec: &PriorSpec, rng: &mut R) {
    let c = spec.channels;
    for l in 0..spec.layers {
        // small weights keep the residual stack near identity at init
        let scale = 0.5 / ((spec.kernel * c) as f64).sqrt();
        p.init_uniform(&format!("{prefix}.conv{l}.w"), spec.kernel * c, c, scale, rng);
        p.init_zeros(&format!("{prefix}.conv{l}.b"), 1, c);
    }
}

/// Registers the categorical prior; `spec.codes` is the code book size.
pub fn init_categorical<S: Scalar, R: Rng + ?Sized>(p: &mut ParamStore<S>, spec: &PriorSpec, rng: &mut R) {
    p.init_uniform(&format!("{CATEGORICAL}.embed"), spec.codes + 1, spec.channels, 1.0, rng);
    init_stack(p, CATEGORICAL, spec, rng);
    p.init_zeros(&format!("{CATEGORICAL}.out.w"), spec.channels, spec.codes);
    p.init_zeros(&format!("{CATEGORICAL}.out.b"), 1, spec.codes);
}

/// Registers the Gaussian prior; `spec.codes` is the latent dimension.
pub fn init_gaussian<S: Scalar, R: Rng + ?Sized>(p: &mut ParamStore<S>, spec: &PriorSpec, rng: &mut R) {
    let (c, d) = (spec.channels, spec.codes);
    p.init_uniform(&format!("{GAUSSIAN}.in.w"), d, c, 1.0 / (d as f64).sqrt(), rng);
    p.init_zeros(&format!("{GAUSSIAN}.in.b"), 1, c);
    p.init_uniform(&format!("{GAUSSIAN}.start"), 1, c, 1.0, rng);
    init_stack(p, GAUSSIAN, spec, rng);
    p.init_uniform(&format!("{GAUSSIAN}.head.w"), c, 2 * d, 0.1 / (c as f64).sqrt(), rng);
    // softplus(0.5413) ≈ 1: the untrained prior starts near N(0, I)
    let mut b = Tensor::zeros(1, 2 * d);
    for j in d..2 * d {
        b.set(0, j, S::lit(0.541_324_854_612_918));
    }
    p.insert(format!("{GAUSSIAN}.head.b"), b).expect("prefixed name");
}

/// Residual causal convolutions over a time-major `T·B × C` input.
fn stack<S: Scalar>(g: &Graph<S>, p: &ParamStore<S>, prefix: &str, spec: &PriorSpec, x: Var, batch: usize) -> Result<Var, AutodiffError> {
    let mut h = x;
    for l in 0..spec.layers {
        let w = p.bind(g, &format!("{prefix}.conv{l}.w"));
        let b = p.bind(g, &format!("{prefix}.conv{l}.b"));
        let cols = g.causal_unfold(h, batch, spec.kernel)?;
        let y = g.add(g.matmul(cols, w)?, b)?;
        h = g.add(h, g.tanh(y))?;
    }
    Ok(h)
}

/// Logits `T·B × K` for time-major indices `z` (`z[t·B + b]`).
pub fn prior_logits<S: Scalar>(g: &Graph<S>, p: &ParamStore<S>, z: &[usize], batch: usize) -> Result<Var, PriorError> {
    let spec = PriorSpec::from_params(p, CATEGORICAL)?;
    if z.is_empty() || batch == 0 || !z.len().is_multiple_of(batch) {
        return Err(PriorError::EmptySequence);
    }
    if let Some(&bad) = z.iter().find(|&&k| k >= spec.codes) {
        return Err(PriorError::IndexRange {
            index: bad,
            k: spec.codes,
        });
    }
    let mut shifted = vec![spec.codes; batch];
    shifted.extend_from_slice(&z[..z.len() - batch]);
    shifted_logits(g, p, &spec, &shifted, batch)
}

/// Logits from inputs that are already shifted (index `K` is the start symbol).
fn shifted_logits<S: Scalar>(
    g: &Graph<S>,
    p: &ParamStore<S>,
    spec: &PriorSpec,
    inputs: &[usize],
    batch: usize,
) -> Result<Var, PriorError> {
    let emb = p.bind(g, &format!("{CATEGORICAL}.embed"));
    let x = g.gather_rows(emb, inputs)?;
    let h = stack(g, p, CATEGORICAL, spec, x, batch)?;
    let w = p.bind(g, &format!("{CATEGORICAL}.out.w"));
    let b = p.bind(g, &format!("{CATEGORICAL}.out.b"));
    Ok(g.add(g.matmul(h, w)?, b)?)
}

/// `γ` of shape `T × K` for one sequence: row `t` is `p(z_t | z_{<t})`.
pub fn prior_forward<S: Scalar>(p: &ParamStore<S>, z: &[usize]) -> Result<Tensor<S>, PriorError> {
    let g = Graph::new();
    let logits = prior_logits(&g, p, z, 1)?;
    let gamma = g.softmax(logits)?;
    let out = g.value(gamma).clone();
    Ok(out)
}

/// `−Σ_t log max(γ_{t,z_t}, 1e-10)`. This one definition serves both as the
/// stage-two training loss and as the discrete KL term.
pub fn prior_nll<S: Scalar>(z: &[usize], gamma: &Tensor<S>) -> f64 {
    let mut clamped = 0;
    let mut nll = 0.0;
    for (t, &k) in z.iter().enumerate() {
        let g = gamma.get(t, k).as_f64();
        if g < PROB_FLOOR {
            clamped += 1;
        }
        nll -= g.max(PROB_FLOOR).ln();
    }
    if clamped > 0 {
        log::warn!("{clamped} latent probabilities clamped at {PROB_FLOOR}");
    }
    nll
}

/// Differentiable `Σ w_r · (−log γ_{r,z_r})` from prior logits.
pub fn prior_nll_graph<S: Scalar>(g: &Graph<S>, logits: Var, z: &[usize], weights: &[S]) -> Result<Var, AutodiffError> {
    let logp = g.log_softmax(logits)?;
    let picked = g.gather_cols(logp, z)?;
    let w: Vec<S> = weights.iter().map(|&w| -w).collect();
    g.weighted_sum(picked, &w)
}

/// Picks an index from logits at `temperature` (0 means argmax).
fn draw<S: Scalar, R: Rng + ?Sized>(logits: &[S], temperature: f64, rng: &mut R) -> usize {
    if temperature <= 0.0 {
        let mut best = 0;
        for (k, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = k;
            }
        }
        return best;
    }
    let mx = logits.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|v| ((v.as_f64() - mx) / temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (k, &x) in w.iter().enumerate() {
        if u < x {
            return k;
        }
        u -= x;
    }
    w.len() - 1
}

/// Ancestral sampling of `n` sequences of length `len`, left to right, from
/// `γ^{1/temperature}` renormalized. Each step reruns the stack on the last
/// receptive-field window only, which is exact.
pub fn sample_prior<S: Scalar, R: Rng + ?Sized>(
    p: &ParamStore<S>,
    n: usize,
    len: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>, PriorError> {
    if len < 1 {
        return Err(PriorError::EmptySequence);
    }
    let spec = PriorSpec::from_params(p, CATEGORICAL)?;
    let rf = spec.receptive_field();
    let mut seqs = vec![Vec::with_capacity(len); n];
    if n == 0 {
        return Ok(seqs);
    }
    for t in 0..len {
        // positions start..=t; the input at position `pos` is z_{pos-1}
        let start = (t + 1).saturating_sub(rf);
        let w = t + 1 - start;
        let mut inputs = Vec::with_capacity(w * n);
        for pos in start..=t {
            for s in &seqs {
                inputs.push(if pos == 0 { spec.codes } else { s[pos - 1] });
            }
        }
        let g = Graph::new();
        let logits = shifted_logits(&g, p, &spec, &inputs, n)?;
        let lv = g.value(logits);
        for (b, s) in seqs.iter_mut().enumerate() {
            s.push(draw(lv.row_slice((w - 1) * n + b), temperature, rng));
        }
    }
    Ok(seqs)
}

/// Parameters of `N(μ̂_t, σ̂_t)` for every position.
#[derive(Debug, Clone, Copy)]
pub struct GaussianPriorOutput {
    pub mu: Var,
    pub sigma: Var,
}

/// Gaussian prior over time-major continuous latents `z` (`T·B × D`),
/// teacher-forced on `z` itself.
pub fn gaussian_prior<S: Scalar>(g: &Graph<S>, p: &ParamStore<S>, z: Var, batch: usize) -> Result<GaussianPriorOutput, PriorError> {
    let spec = PriorSpec::from_params(p, GAUSSIAN)?;
    let rows = g.shape(z)[0];
    if rows == 0 || batch == 0 || !rows.is_multiple_of(batch) {
        return Err(PriorError::EmptySequence);
    }
    let start = g.tile_rows(p.bind(g, &format!("{GAUSSIAN}.start")), batch);
    let x = if rows > batch {
        let prev = g.slice_rows(z, 0, rows - batch)?;
        let proj = crate::seqnet::linear(g, p, &format!("{GAUSSIAN}.in"), prev)?;
        g.concat_rows(&[start, proj])?
    } else {
        start
    };
    let h = stack(g, p, GAUSSIAN, &spec, x, batch)?;
    let out = crate::seqnet::linear(g, p, &format!("{GAUSSIAN}.head"), h)?;
    let d = spec.codes;
    let mu = g.slice_cols(out, 0, d)?;
    let sigma = g.add_const(g.softplus(g.slice_cols(out, d, 2 * d)?), S::lit(SIGMA_FLOOR));
    Ok(GaussianPriorOutput { mu, sigma })
}

/// Ancestral sampling from the Gaussian prior; `temperature` scales σ̂.
pub fn sample_gaussian_prior<S: Scalar, R: Rng + ?Sized>(
    p: &ParamStore<S>,
    n: usize,
    len: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Tensor<S>, PriorError> {
    if len < 1 {
        return Err(PriorError::EmptySequence);
    }
    let spec = PriorSpec::from_params(p, GAUSSIAN)?;
    let d = spec.codes;
    let mut z = Tensor::<S>::zeros(len * n, d);
    for t in 0..len {
        let g = Graph::new();
        let prefix = Tensor::new((t + 1) * n, d, z.data()[..(t + 1) * n * d].to_vec())?;
        let zv = g.constant(prefix);
        let out = gaussian_prior(&g, p, zv, n)?;
        let (mu, sigma) = (g.value(out.mu), g.value(out.sigma));
        for b in 0..n {
            let r = t * n + b;
            for j in 0..d {
                let eps: f64 = StandardNormal.sample(rng);
                let v = mu.get(r, j).as_f64() + temperature * sigma.get(r, j).as_f64() * eps;
                z.set(r, j, S::lit(v));
            }
        }
    }
    Ok(z)
}
