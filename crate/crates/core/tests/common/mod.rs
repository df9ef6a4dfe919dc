//! Checks shared by the focused test files and the acceptance target. Each
//! returns `Ok(detail)` when its criterion holds and `Err(detail)` when not.

#![allow(dead_code)]

use std::collections::BTreeMap;

use davam::autodiff::{grad_check, AutodiffError, Graph, Tensor, Var};
use davam::corpus::{Batch, CorpusSplits, Dataset, Vocab};
use davam::evalgen::{diversity, evaluate};
use davam::models::{self, gaussian_kl, ForwardOptions, Model, ModelDims, ModelError, ModelKind, QuantizeMode};
use davam::params::{Group, ParamStore};
use davam::prior::{self, PriorSpec, CATEGORICAL};
use davam::quantizer::{ema_update, kmeans_init, kmeans_objective, quantize_indices, CodeBook};
use davam::synth::SyntheticGrammar;
use davam::train::{fit_prior, train_stage_one, train_stage_two, Checkpoint, EncodedCorpus, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Outcome = Result<String, String>;

pub fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

pub fn book_bits(b: &CodeBook<f32>) -> Vec<u32> {
    let mut out = bits(&b.codes);
    out.extend(bits(&b.ema_sums));
    out.extend(b.ema_counts.iter().map(|v| v.to_bits()));
    out
}

fn t1(v: f64) -> Tensor<f64> {
    Tensor::scalar(v)
}

// ------------------------------------------------------------------ 1

/// Closed forms, a Monte-Carlo estimate, and the discrete KL cases.
pub fn formula_fidelity() -> Outcome {
    let mut notes = Vec::new();
    let zero = gaussian_kl(&t1(0.0), &t1(1.0), &t1(0.0), &t1(1.0)).map_err(|e| e.to_string())?;
    let half = gaussian_kl(&t1(1.0), &t1(1.0), &t1(0.0), &t1(1.0)).map_err(|e| e.to_string())?;
    if zero.abs() > 1e-12 || (half - 0.5).abs() > 1e-12 {
        return Err(format!("closed forms: KL(N(0,1)‖N(0,1)) = {zero}, KL(N(1,1)‖N(0,1)) = {half}"));
    }
    notes.push(format!("closed forms {zero:e} / {half}"));

    // posterior vs learned prior, three dims, summed
    let mu = [0.3, -1.2, 0.8];
    let sigma = [0.7, 1.5, 0.4];
    let mu_hat = [-0.1, -0.5, 1.0];
    let sigma_hat = [1.1, 0.9, 0.6];
    let row = |v: &[f64]| Tensor::from_f64(1, 3, v).unwrap();
    let analytic = gaussian_kl(&row(&mu), &row(&sigma), &row(&mu_hat), &row(&sigma_hat)).map_err(|e| e.to_string())?;
    let g = Graph::<f64>::new();
    let elems = models::gaussian_kl_elements(
        &g,
        g.constant(row(&mu)),
        g.constant(row(&sigma)),
        g.constant(row(&mu_hat)),
        g.constant(row(&sigma_hat)),
    )
    .map_err(|e| e.to_string())?;
    let graph_kl = g.item(g.sum(elems));
    if (graph_kl - analytic).abs() > 1e-12 {
        return Err(format!("graph KL {graph_kl} vs closed form {analytic}"));
    }
    let n = 1_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n {
        let mut lr = 0.0;
        for d in 0..3 {
            let e: f64 = StandardNormal.sample(&mut rng);
            let x = mu[d] + sigma[d] * e;
            let lq = -0.5 * e * e - sigma[d].ln();
            let u = (x - mu_hat[d]) / sigma_hat[d];
            let lp = -0.5 * u * u - sigma_hat[d].ln();
            lr += lq - lp;
        }
        sum += lr;
        sum_sq += lr * lr;
    }
    let mean = sum / n as f64;
    let se = ((sum_sq / n as f64 - mean * mean) / n as f64).sqrt();
    if (mean - analytic).abs() > 3.0 * se {
        return Err(format!("Monte Carlo {mean} ± {se} vs closed form {analytic}"));
    }
    notes.push(format!("MC {mean:.5} ± {se:.5} vs {analytic:.5}"));

    let (t, k) = (7, 5);
    let z: Vec<usize> = (0..t).map(|i| (i * 3) % k).collect();
    let mut perfect = Tensor::<f64>::zeros(t, k);
    for (i, &zi) in z.iter().enumerate() {
        perfect.set(i, zi, 1.0);
    }
    let uniform = Tensor::<f64>::full(t, k, 1.0 / k as f64);
    let kl_perfect = models::discrete_kl(&z, &perfect);
    let kl_uniform = models::discrete_kl(&z, &uniform);
    let want = t as f64 * (k as f64).ln();
    if kl_perfect.abs() > 1e-12 || (kl_uniform - want).abs() > 1e-12 {
        return Err(format!("discrete KL: perfect {kl_perfect}, uniform {kl_uniform} vs {want}"));
    }
    notes.push(format!("discrete 0 / T·log K = {kl_uniform:.6}"));
    Ok(notes.join("; "))
}

// ------------------------------------------------------------------ 2

pub fn small_dims(vocab: usize) -> ModelDims {
    ModelDims {
        vocab,
        embed: 6,
        hidden: 7,
        latent: 4,
        attn: 5,
        codes: 6,
        prior_channels: 5,
        prior_layers: 3,
        prior_kernel: 3,
    }
}

pub fn toy_batch() -> Batch {
    let a: &[usize] = &[2, 5, 6, 7, 3];
    let b: &[usize] = &[2, 8, 3];
    let c: &[usize] = &[2, 4, 9, 5, 3];
    Batch::from_sentences(&[a, b, c], vec![0, 1, 2])
}

/// Gradient of the discrete KL with respect to every φ and θ tensor.
pub fn kl_gradient_is_zero() -> Outcome {
    let mut checked = 0;
    for kind in [ModelKind::Davam, ModelKind::DavamQ] {
        for seed in 0..3 {
            let mut model = Model::<f64>::new(kind, small_dims(10), seed);
            // a non-trivial prior head so the KL actually varies with ψ
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
            let head = format!("{CATEGORICAL}.out.w");
            let shape = model.params.get(&head).unwrap().shape();
            *model.params.get_mut(&head).unwrap() = Tensor::uniform(shape[0], shape[1], 1.0, &mut rng);
            let g = Graph::new();
            let f = model
                .forward(&g, &toy_batch(), &ForwardOptions::default())
                .map_err(|e| e.to_string())?;
            let quant = f.quant.ok_or("discrete forward without a quantization record")?;
            let kl = model.discrete_kl_graph(&g, &quant).map_err(|e| e.to_string())?;
            g.backward(kl).map_err(|e| e.to_string())?;
            let mut psi_moves = false;
            for (name, grad) in g.param_grads() {
                let group = Group::of(&name).ok_or(format!("ungrouped tensor {name}"))?;
                let nonzero = grad.data().iter().any(|v| *v != 0.0);
                match group {
                    Group::Psi => psi_moves |= nonzero,
                    _ if nonzero => return Err(format!("{kind} seed {seed}: KL gradient reaches {name}")),
                    _ => checked += 1,
                }
            }
            if !psi_moves {
                return Err(format!("{kind} seed {seed}: KL has no gradient on the prior either"));
            }
        }
    }
    Ok(format!("{checked} φ/θ gradients identically zero"))
}

pub fn tiny_config(kind: ModelKind) -> TrainConfig {
    TrainConfig {
        model: kind,
        codes: 8,
        latent_dim: 4,
        hidden_dim: 12,
        embed_dim: 8,
        max_vocab: 400,
        batch_size: 16,
        epochs: 2,
        warmup_epochs: 1,
        beta_max: 0.5,
        prior_channels: 8,
        prior_layers: 2,
        prior_epochs: 2,
        vae_anneal_epochs: 2,
        ..TrainConfig::default()
    }
}

pub fn tiny_splits() -> CorpusSplits {
    SyntheticGrammar::new(3).splits(120, 30, 30)
}

pub fn tiny_corpus() -> EncodedCorpus {
    EncodedCorpus::new(&tiny_splits(), 400, 40).unwrap()
}

/// Stage two leaves φ, θ and the code book bit-identical and moves ψ.
pub fn stage_two_freezes_stage_one() -> Outcome {
    let corpus = tiny_corpus();
    let mut ck = train_stage_one(&corpus, &tiny_config(ModelKind::Davam))
        .map_err(|e| e.to_string())?
        .checkpoint;
    let p = &ck.model.params;
    let before = (p.fingerprint(Group::Phi), p.fingerprint(Group::Theta), p.fingerprint(Group::Psi));
    let book_before = book_bits(ck.model.codebook.as_ref().unwrap());
    train_stage_two(&mut ck, &corpus).map_err(|e| e.to_string())?;
    let p = &ck.model.params;
    let after = (p.fingerprint(Group::Phi), p.fingerprint(Group::Theta), p.fingerprint(Group::Psi));
    let book_after = book_bits(ck.model.codebook.as_ref().unwrap());
    ensure(
        before.0 == after.0 && before.1 == after.1 && book_before == book_after && before.2 != after.2,
        format!(
            "φ {:016x}→{:016x}, θ {:016x}→{:016x}, book {}, ψ {:016x}→{:016x}",
            before.0,
            after.0,
            before.1,
            after.1,
            if book_before == book_after { "unchanged" } else { "CHANGED" },
            before.2,
            after.2
        ),
    )
}

// ------------------------------------------------------------------ 3

type Primitive = fn(&Graph<f64>, &Inputs) -> Result<Var, AutodiffError>;

/// Bound parameters for one primitive case.
pub struct Inputs {
    pub a: Var,
    pub b: Var,
    pub m: Var,
    pub row: Var,
    pub s: Var,
    pub pos: Var,
    pub col: Var,
}

fn random_params(seed: u64) -> Vec<(String, Tensor<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |r, c, lo: f64, hi: f64| {
        let data = (0..r * c).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::new(r, c, data).unwrap()
    };
    vec![
        ("a".into(), u(6, 4, -1.5, 1.5)),
        ("b".into(), u(6, 4, -1.5, 1.5)),
        ("m".into(), u(4, 3, -1.0, 1.0)),
        ("row".into(), u(1, 4, -1.0, 1.0)),
        ("s".into(), u(1, 1, -1.0, 1.0)),
        ("pos".into(), u(6, 4, 0.5, 2.0)),
        ("col".into(), u(6, 1, -1.0, 1.0)),
    ]
}

pub fn primitives() -> Vec<(&'static str, Primitive)> {
    vec![
        ("matmul", |g, x| g.matmul(x.a, x.m)),
        ("add", |g, x| g.add(x.a, x.b)),
        ("add_row_broadcast", |g, x| g.add(x.a, x.row)),
        ("add_scalar_broadcast", |g, x| g.add(x.a, x.s)),
        ("sub", |g, x| g.sub(x.a, x.b)),
        ("sub_row_broadcast", |g, x| g.sub(x.a, x.row)),
        ("mul", |g, x| g.mul(x.a, x.b)),
        ("mul_row_broadcast", |g, x| g.mul(x.a, x.row)),
        ("div", |g, x| g.div(x.a, x.pos)),
        ("scale_rows", |g, x| g.scale_rows(x.a, x.col)),
        ("scale", |g, x| Ok(g.scale(x.a, -1.7))),
        ("add_const", |g, x| Ok(g.add_const(x.a, 0.3))),
        ("neg", |g, x| Ok(g.neg(x.a))),
        ("tanh", |g, x| Ok(g.tanh(x.a))),
        ("sigmoid", |g, x| Ok(g.sigmoid(x.a))),
        ("exp", |g, x| Ok(g.exp(x.a))),
        ("log", |g, x| g.log(x.pos)),
        ("softplus", |g, x| Ok(g.softplus(x.a))),
        ("square", |g, x| Ok(g.square(x.a))),
        ("sum", |g, x| Ok(g.sum(x.a))),
        ("concat_cols", |g, x| g.concat_cols(&[x.a, x.col, x.b])),
        ("concat_rows", |g, x| g.concat_rows(&[x.a, x.row, x.b])),
        ("slice_cols", |g, x| g.slice_cols(x.a, 1, 3)),
        ("slice_rows", |g, x| g.slice_rows(x.a, 2, 5)),
        ("gather_rows", |g, x| g.gather_rows(x.a, &[5, 0, 0, 3, 5])),
        ("gather_cols", |g, x| g.gather_cols(x.a, &[0, 3, 1, 1, 2, 0])),
        ("softmax", |g, x| g.softmax(x.a)),
        ("masked_softmax", |g, x| {
            let mask: Vec<bool> = (0..24).map(|i| i % 4 != 2 || i % 3 == 0).collect();
            g.masked_softmax(x.a, Some(&mask))
        }),
        ("log_softmax", |g, x| g.log_softmax(x.a)),
        ("transpose", |g, x| Ok(g.transpose(x.a))),
        ("reshape", |g, x| g.reshape(x.a, 3, 8)),
        ("tile_rows", |g, x| Ok(g.tile_rows(x.row, 3))),
        ("sum_blocks", |g, x| g.sum_blocks(x.a, 3)),
        ("causal_unfold", |g, x| g.causal_unfold(x.a, 2, 3)),
        ("weighted_sum", |g, x| g.weighted_sum(x.a, &[0.5, -1.0, 0.0, 2.0, 1.5, -0.3])),
    ]
}

/// Reduces any output to a scalar with fixed, uneven weights.
fn reduce(g: &Graph<f64>, out: Var) -> Result<Var, AutodiffError> {
    let [r, c] = g.shape(out);
    let w: Vec<f64> = (0..r * c).map(|i| ((i * 37) % 11) as f64 / 5.0 - 0.9).collect();
    Ok(g.sum(g.mul(out, g.constant(Tensor::new(r, c, w)?))?))
}

/// Largest relative error of one primitive at one seed.
pub fn primitive_error(op: Primitive, seed: u64) -> Result<f64, AutodiffError> {
    let mut params = random_params(seed);
    let report = grad_check(
        |g: &Graph<f64>, p: &Vec<(String, Tensor<f64>)>| -> Result<Var, AutodiffError> {
            let bind = |name: &str| g.param(name, &p.iter().find(|(n, _)| n == name).unwrap().1);
            let x = Inputs {
                a: bind("a"),
                b: bind("b"),
                m: bind("m"),
                row: bind("row"),
                s: bind("s"),
                pos: bind("pos"),
                col: bind("col"),
            };
            reduce(g, op(g, &x)?)
        },
        &mut params,
        1e-5,
    )?;
    Ok(report.max_rel_error)
}

/// Worst error per primitive over `seeds`.
pub fn primitive_sweep(seeds: u64) -> Result<BTreeMap<&'static str, f64>, String> {
    let mut worst = BTreeMap::new();
    for (name, op) in primitives() {
        let mut w = 0.0f64;
        for seed in 0..seeds {
            let e = primitive_error(op, seed).map_err(|e| format!("{name} seed {seed}: {e}"))?;
            w = w.max(e);
        }
        worst.insert(name, w);
    }
    Ok(worst)
}

/// Stage-one loss of `kind` with indices and quantization offsets frozen at
/// the starting parameters.
pub fn composite_error(kind: ModelKind, seed: u64) -> Result<f64, ModelError> {
    let model = Model::<f64>::new(kind, small_dims(10), seed);
    let batch = toy_batch();
    let opts = if kind.is_discrete() {
        let g = Graph::new();
        let live = ForwardOptions {
            beta: 0.7,
            ..Default::default()
        };
        let q = model.forward(&g, &batch, &live)?.quant.expect("discrete record");
        let e = model.codebook.as_ref().expect("book").lookup(&q.z);
        let offsets = Tensor::new(
            q.h.rows(),
            q.h.cols(),
            e.data().iter().zip(q.h.data()).map(|(a, b)| a - b).collect(),
        )?;
        ForwardOptions {
            beta: 0.7,
            quantize: QuantizeMode::Frozen { indices: q.z, offsets },
            ..Default::default()
        }
    } else {
        ForwardOptions {
            sample: true,
            noise_seed: 11 + seed,
            kl_weight: 0.5,
            ..Default::default()
        }
    };
    let mut params: ParamStore<f64> = model.params.clone();
    let report = grad_check(
        |g: &Graph<f64>, p: &ParamStore<f64>| -> Result<Var, ModelError> {
            let mut m = model.clone();
            m.params = p.clone();
            Ok(m.forward(g, &batch, &opts)?.loss)
        },
        &mut params,
        1e-5,
    )?;
    Ok(report.max_rel_error)
}

pub fn gradient_correctness() -> Outcome {
    let worst = primitive_sweep(100)?;
    let (name, prim) = worst
        .iter()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(n, e)| (*n, *e))
        .unwrap();
    if prim >= 1e-6 {
        return Err(format!("primitive {name} reaches {prim:e}"));
    }
    let mut comp = 0.0f64;
    for kind in ModelKind::ALL {
        for seed in 0..3 {
            let e = composite_error(kind, seed).map_err(|e| format!("{kind}: {e}"))?;
            if e >= 1e-4 {
                return Err(format!("composite {kind} seed {seed}: {e:e}"));
            }
            comp = comp.max(e);
        }
    }
    Ok(format!(
        "{} primitives × 100 seeds, worst {prim:.2e} ({name}); composite 5 kinds × 3 seeds, worst {comp:.2e}",
        worst.len()
    ))
}

// ------------------------------------------------------------------ 4

pub fn brute_nearest(h: &[f64], codes: &Tensor<f64>) -> usize {
    let d: Vec<f64> = (0..codes.rows())
        .map(|k| h.iter().zip(codes.row_slice(k)).map(|(a, b)| (a - b).powi(2)).sum())
        .collect();
    let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
    d.iter().position(|&x| x == min).unwrap()
}

pub fn quantizer_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (t, k, d) = (8, 32, 8);
    for case in 0..1000 {
        let h = Tensor::<f64>::uniform(t, d, 1.0, &mut rng);
        let book = CodeBook::from_codes(Tensor::uniform(k, d, 1.0, &mut rng), 0.99);
        let z = quantize_indices(&h, &book).map_err(|e| e.to_string())?;
        for r in 0..t {
            if z[r] != brute_nearest(h.row_slice(r), &book.codes) {
                return Err(format!("nearest-code mismatch in case {case}, row {r}"));
            }
        }
    }
    for case in 0..50u64 {
        let samples = Tensor::<f64>::uniform(200, 4, 2.0, &mut rng);
        let mut prev = f64::INFINITY;
        for iters in 0..=10 {
            let book = kmeans_init(&samples, 8, iters, case, 0.99).map_err(|e| e.to_string())?;
            let obj = kmeans_objective(&samples, &book.codes);
            if obj > prev * (1.0 + 1e-12) {
                return Err(format!("k-means objective rose from {prev} to {obj} (case {case}, iteration {iters})"));
            }
            prev = obj;
        }
    }
    let ema = ema_unrolled_error()?;
    ensure(
        ema <= 1e-12,
        format!("1000 nearest-code cases exact; 50 k-means runs monotone; EMA vs unrolled {ema:.1e}"),
    )
}

/// Largest gap between repeated EMA updates and the closed-form sums
/// `N_T = γ^T N_0 + (1−γ) Σ_t γ^{T−t} n_t` (and likewise for `m`).
pub fn ema_unrolled_error() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (k, d, decay) = (4, 3, 0.9);
    let init = Tensor::<f64>::uniform(k, d, 1.0, &mut rng);
    let mut book = CodeBook::from_codes(init.clone(), decay);
    let (n0, m0) = (book.ema_counts.clone(), book.ema_sums.clone());
    let steps = 6;
    let mut batches = Vec::new();
    for _ in 0..steps {
        let h = Tensor::<f64>::uniform(10, d, 1.0, &mut rng);
        let z: Vec<usize> = (0..10).map(|_| rng.random_range(0..k)).collect();
        ema_update(&mut book, &h, &z, None).map_err(|e| e.to_string())?;
        batches.push((h, z));
    }
    let mut worst = 0.0f64;
    for j in 0..k {
        let mut n = decay.powi(steps) * n0[j];
        let mut m: Vec<f64> = (0..d).map(|c| decay.powi(steps) * m0.get(j, c)).collect();
        for (t, (h, z)) in batches.iter().enumerate() {
            let w = (1.0 - decay) * decay.powi(steps - 1 - t as i32);
            for (r, &zr) in z.iter().enumerate() {
                if zr == j {
                    n += w;
                    for (c, mc) in m.iter_mut().enumerate() {
                        *mc += w * h.get(r, c);
                    }
                }
            }
        }
        worst = worst.max((n - book.ema_counts[j]).abs());
        for c in 0..d {
            worst = worst.max((m[c] - book.ema_sums.get(j, c)).abs());
            worst = worst.max((m[c] / n.max(book.eps) - book.codes.get(j, c)).abs());
        }
    }
    Ok(worst)
}

// ------------------------------------------------------------------ 5

fn randomized_prior(layers: usize, kernel: usize, codes: usize, seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = PriorSpec {
        codes,
        channels: 4,
        layers,
        kernel,
    };
    let mut p = ParamStore::new();
    prior::init_categorical(&mut p, &spec, &mut rng);
    let names: Vec<String> = p.iter().map(|(n, _)| n.clone()).collect();
    for n in names {
        let shape = p.get(&n).unwrap().shape();
        *p.get_mut(&n).unwrap() = Tensor::uniform(shape[0], shape[1], 0.8, &mut rng);
    }
    p
}

/// Perturbs every position of a sequence and compares every `γ` row bit
/// for bit. No row before the perturbed position, or beyond the receptive
/// field after it, may change. Rows within `reach` positions after it must
/// change; deeper in the field the influence can fall below floating-point
/// resolution through saturated layers, so those are only counted.
pub fn causality_probe(layers: usize, reach: usize) -> Outcome {
    let (kernel, codes) = (3, 5);
    let p = randomized_prior(layers, kernel, codes, 31);
    let rf = PriorSpec::from_params(&p, CATEGORICAL).map_err(|e| e.to_string())?.receptive_field();
    let len = rf + 12;
    let base: Vec<usize> = (0..len).map(|i| (i * 7 + 1) % codes).collect();
    let g0 = prior::prior_forward(&p, &base).map_err(|e| e.to_string())?;
    let (mut in_field, mut moved) = (0, 0);
    for s in 0..len {
        let mut z = base.clone();
        z[s] = (z[s] + 2) % codes;
        let g1 = prior::prior_forward(&p, &z).map_err(|e| e.to_string())?;
        for t in 0..len {
            let same = g0
                .row_slice(t)
                .iter()
                .zip(g1.row_slice(t))
                .all(|(a, b)| a.to_bits() == b.to_bits());
            let inside = s < t && t - s <= rf;
            if !inside && !same {
                return Err(format!("perturbing z[{s}] changed γ[{t}] (receptive field {rf})"));
            }
            if inside {
                in_field += 1;
                moved += usize::from(!same);
                if same && t - s <= reach {
                    return Err(format!("perturbing z[{s}] left γ[{t}] unchanged"));
                }
            }
        }
    }
    Ok(format!(
        "{layers}-layer stack, receptive field {rf}: {len}×{len} probes, no leak; {moved}/{in_field} in-field rows moved"
    ))
}

pub const MARKOV: [[f64; 2]; 2] = [[0.85, 0.15], [0.3, 0.7]];

pub fn markov_sequences(n: usize, len: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut s = vec![usize::from(rng.random::<f64>() < 0.5)];
            while s.len() < len {
                let prev = *s.last().unwrap();
                s.push(usize::from(rng.random::<f64>() >= MARKOV[prev][0]));
            }
            s
        })
        .collect()
}

/// Largest per-row total variation between the transition matrix of
/// `seqs` and [`MARKOV`], with the number of transitions counted.
pub fn transition_tv(seqs: &[Vec<usize>]) -> (f64, usize) {
    let mut counts = [[0usize; 2]; 2];
    for s in seqs {
        for w in s.windows(2) {
            counts[w[0]][w[1]] += 1;
        }
    }
    let mut tv = 0.0f64;
    for (row, truth) in counts.iter().zip(MARKOV) {
        let n = (row[0] + row[1]).max(1) as f64;
        tv = tv.max(0.5 * ((row[0] as f64 / n - truth[0]).abs() + (row[1] as f64 / n - truth[1]).abs()));
    }
    (tv, counts.iter().flatten().sum())
}

/// Fits a categorical prior to a 2-state Markov source and samples from it.
pub fn markov_recovery() -> Outcome {
    let dims = ModelDims {
        vocab: 8,
        embed: 2,
        hidden: 2,
        latent: 2,
        attn: 2,
        codes: 2,
        prior_channels: 16,
        prior_layers: 2,
        prior_kernel: 2,
    };
    let mut model = Model::<f32>::new(ModelKind::Davam, dims, 5);
    let cfg = TrainConfig {
        prior_epochs: 12,
        prior_lr: 3e-3,
        prior_batch_size: 32,
        ..TrainConfig::default()
    };
    let train = markov_sequences(600, 20, 1);
    let valid = markov_sequences(50, 20, 2);
    fit_prior(&mut model, train, &valid, &cfg).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    // 500 sequences of 21 codes: 10⁴ sampled transitions
    let samples = prior::sample_prior(&model.params, 500, 21, 1.0, &mut rng).map_err(|e| e.to_string())?;
    let (tv, n) = transition_tv(&samples);
    ensure(tv < 0.05, format!("total variation {tv:.4} over {n} sampled transitions"))
}

pub fn prior_causality() -> Outcome {
    let probe = causality_probe(16, 8)?;
    let markov = markov_recovery()?;
    Ok(format!("{probe}; {markov}"))
}

// ------------------------------------------------------------------ 8

/// A language model whose output layer is zero predicts uniformly.
pub fn uniform_model(vocab: usize) -> Model<f64> {
    let mut m = Model::<f64>::new(ModelKind::LstmLm, small_dims(vocab), 0);
    for name in ["theta.dec.out.w", "theta.dec.out.b"] {
        let shape = m.params.get(name).unwrap().shape();
        *m.params.get_mut(name).unwrap() = Tensor::zeros(shape[0], shape[1]);
    }
    m
}

pub fn metrics_oracles() -> Outcome {
    let r = diversity(&[vec!["a", "a", "b"]]).map_err(|e| e.to_string())?;
    let ent = -((2.0f64 / 3.0) * (2.0f64 / 3.0).ln() + (1.0f64 / 3.0) * (1.0f64 / 3.0).ln());
    if r.dist1 != 2.0 / 3.0 || r.dist2 != 1.0 || (r.ent - ent).abs() > 1e-15 {
        return Err(format!("diversity of \"a a b\": {r:?}"));
    }
    let vocab = 17;
    let data = Dataset {
        sentences: vec![vec![2, 5, 9, 3], vec![2, 16, 3], vec![2, 4, 4, 4, 11, 3]],
    };
    let ppl = evaluate(&uniform_model(vocab), &data, 2).map_err(|e| e.to_string())?.ppl;
    // exp(n·ln V / n) loses only the final rounding
    if (ppl - vocab as f64).abs() > 1e-12 * vocab as f64 {
        return Err(format!("uniform model perplexity {ppl} vs vocabulary {vocab}"));
    }
    let inv = batch_invariance()?;
    Ok(format!("diversity exact; uniform PPL {ppl}; {inv}"))
}

/// Evaluates several kinds at batch sizes 1 and 32.
pub fn batch_invariance() -> Outcome {
    let corpus = tiny_corpus();
    let vocab = corpus.vocab.len();
    let mut worst = 0.0f64;
    for kind in ModelKind::ALL {
        let mut model = Model::<f64>::new(kind, small_dims(vocab), 3);
        if kind == ModelKind::Davam {
            model.prior_trained = true;
        }
        let a = evaluate(&model, &corpus.valid, 1).map_err(|e| e.to_string())?;
        let b = evaluate(&model, &corpus.valid, 32).map_err(|e| e.to_string())?;
        for (x, y) in [(a.rec, b.rec), (a.ppl, b.ppl), (a.kl, b.kl)] {
            worst = worst.max((x - y).abs());
        }
    }
    ensure(worst <= 1e-8, format!("batch 1 vs 32 differ by at most {worst:.1e}"))
}

// ------------------------------------------------------------------ 9

pub fn log_determinism() -> Outcome {
    let corpus = tiny_corpus();
    for kind in ModelKind::ALL {
        let cfg = tiny_config(kind);
        let a = train_stage_one(&corpus, &cfg).map_err(|e| e.to_string())?;
        let b = train_stage_one(&corpus, &cfg).map_err(|e| e.to_string())?;
        if a.log.without_timing().to_jsonl() != b.log.without_timing().to_jsonl() {
            return Err(format!("{kind}: training logs differ between identical runs"));
        }
        if a.checkpoint.to_bytes() != b.checkpoint.to_bytes() {
            return Err(format!("{kind}: checkpoints differ between identical runs"));
        }
    }
    Ok("5 kinds: logs and checkpoints bit-identical".into())
}

pub fn random_checkpoint(kind: ModelKind, seed: u64) -> Checkpoint {
    let splits = tiny_splits();
    let vocab = Vocab::build(splits.train.iter(), 400).unwrap();
    let cfg = tiny_config(kind);
    let mut model = Model::<f32>::new(kind, cfg.dims(vocab.len()), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.clone()).collect();
    for n in names {
        let shape = model.params.get(&n).unwrap().shape();
        *model.params.get_mut(&n).unwrap() = Tensor::uniform(shape[0], shape[1], 3.0, &mut rng);
    }
    if let Some(book) = model.codebook.as_mut() {
        *book = CodeBook::from_codes(Tensor::uniform(book.size(), book.dim(), 1.0, &mut rng), 0.99);
        book.ema_counts.iter_mut().for_each(|c| *c = rng.random_range(0.0..5.0));
    }
    model.prior_trained = kind.is_discrete();
    Checkpoint {
        model,
        vocab,
        config: cfg,
    }
}

pub fn persistence() -> Outcome {
    use davam::train::CheckpointError;
    for kind in ModelKind::ALL {
        let ck = random_checkpoint(kind, 9);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).map_err(|e| e.to_string())?;
        if back.to_bytes() != bytes || back.config != ck.config || back.vocab != ck.vocab {
            return Err(format!("{kind}: round trip is not exact"));
        }
        for (n, t) in ck.model.params.iter() {
            if bits(back.model.params.get(n).unwrap()) != bits(t) {
                return Err(format!("{kind}: tensor {n} changed in the round trip"));
            }
        }
        match Checkpoint::from_bytes(&bytes[..bytes.len() / 2]) {
            Err(CheckpointError::Corrupt(_)) => {}
            other => return Err(format!("{kind}: truncated file gave {other:?}")),
        }
    }
    let gavam = random_checkpoint(ModelKind::Gavam, 1);
    let mut as_stage_two = gavam.clone();
    match train_stage_two(&mut as_stage_two, &tiny_corpus()) {
        Err(davam::train::TrainError::Checkpoint(CheckpointError::KindMismatch { .. })) => {}
        other => return Err(format!("stage two on GAVAM gave {:?}", other.map(|_| ()))),
    }
    match gavam.expect_kind(ModelKind::Davam) {
        Err(CheckpointError::KindMismatch { .. }) => {}
        other => return Err(format!("kind check gave {other:?}")),
    }
    let mut stage_one = random_checkpoint(ModelKind::Davam, 2);
    stage_one.model.prior_trained = false;
    let gen = davam::evalgen::generate_from_scratch(
        &stage_one.model,
        &stage_one.vocab,
        1,
        &davam::evalgen::LengthMode::Fixed(3),
        0,
        1.0,
    );
    match gen {
        Err(davam::evalgen::EvalError::State(_)) => {}
        other => return Err(format!("generation without a prior gave {other:?}")),
    }
    let mut bytes = random_checkpoint(ModelKind::Davam, 3).to_bytes();
    bytes[9] = 99;
    match Checkpoint::from_bytes(&bytes) {
        Err(CheckpointError::VersionMismatch { .. }) => {}
        other => return Err(format!("wrong version gave {:?}", other.map(|_| ()))),
    }
    Ok("round trips bit-exact; truncation, version, kind and stage errors distinct".into())
}

pub fn determinism_and_persistence() -> Outcome {
    let a = log_determinism()?;
    let b = persistence()?;
    Ok(format!("{a}; {b}"))
}
