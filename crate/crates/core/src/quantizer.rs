//! Code book, nearest-code quantization, K-means initialization, EMA code
//! updates, commitment loss and dead-code restarts.
//!
//! The posterior over each latent index is one-hot, so it is represented by
//! the index alone and its entropy is identically zero.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::scalar::Scalar;

pub const DEFAULT_EMA_DECAY: f64 = 0.99;
pub const DEFAULT_EMA_EPS: f64 = 1e-5;
pub const DEFAULT_KMEANS_ITERS: usize = 10;
/// Restart codes whose window usage falls below this share of uniform usage.
pub const DEFAULT_RESTART_FRACTION: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum QuantizerError {
    #[error("code book is empty")]
    EmptyBook,
    #[error("dimension mismatch: codes have {book} dims, inputs have {input}")]
    Dim { book: usize, input: usize },
    #[error("K-means needs at least K samples ({samples} < {k})")]
    TooFewSamples { samples: usize, k: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Latent index sequence `z_{1:T}`, one code index per encoder step.
pub type LatentSequence = Vec<usize>;

/// `K` code vectors plus EMA cluster statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeBook<S> {
    pub codes: Tensor<S>,
    pub ema_counts: Vec<S>,
    pub ema_sums: Tensor<S>,
    pub decay: S,
    pub eps: S,
}

impl<S: Scalar> CodeBook<S> {
    /// Book whose EMA statistics are consistent with `codes` at unit counts.
    pub fn from_codes(codes: Tensor<S>, decay: f64) -> Self {
        let k = codes.rows();
        Self {
            ema_sums: codes.clone(),
            ema_counts: vec![S::one(); k],
            codes,
            decay: S::lit(decay),
            eps: S::lit(DEFAULT_EMA_EPS),
        }
    }

    pub fn size(&self) -> usize {
        self.codes.rows()
    }

    pub fn dim(&self) -> usize {
        self.codes.cols()
    }

    fn check(&self, dim: usize) -> Result<(), QuantizerError> {
        if self.size() == 0 {
            return Err(QuantizerError::EmptyBook);
        }
        if dim != self.dim() {
            return Err(QuantizerError::Dim {
                book: self.dim(),
                input: dim,
            });
        }
        Ok(())
    }

    /// Rows of `codes` at `z`.
    pub fn lookup(&self, z: &[usize]) -> Tensor<S> {
        let d = self.dim();
        let mut data = Vec::with_capacity(z.len() * d);
        for &k in z {
            data.extend_from_slice(self.codes.row_slice(k));
        }
        Tensor::new(z.len(), d, data).expect("lookup shape")
    }

    /// Scales EMA statistics without moving the codes.
    pub fn rescale_stats(&mut self, factor: S) {
        self.ema_counts.iter_mut().for_each(|c| *c *= factor);
        self.ema_sums.data_mut().iter_mut().for_each(|s| *s *= factor);
    }

    /// Recomputes codes from the EMA statistics.
    fn apply_stats(&mut self) {
        let d = self.dim();
        for k in 0..self.size() {
            let denom = self.ema_counts[k].max(self.eps);
            for j in 0..d {
                let v = self.ema_sums.get(k, j) / denom;
                self.codes.set(k, j, v);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.codes.all_finite() && self.ema_sums.all_finite() && self.ema_counts.iter().all(|c| c.is_finite())
    }
}

fn sq_dist<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Nearest code for one vector; ties go to the smallest index.
pub fn nearest<S: Scalar>(h: &[S], codes: &Tensor<S>) -> usize {
    let mut best = 0;
    let mut best_d = S::infinity();
    for k in 0..codes.rows() {
        let d = sq_dist(h, codes.row_slice(k));
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

/// `z_t = argmin_j ‖h_t − e_j‖₂` for every row of `h`.
pub fn quantize_indices<S: Scalar>(h: &Tensor<S>, book: &CodeBook<S>) -> Result<LatentSequence, QuantizerError> {
    book.check(h.cols())?;
    Ok((0..h.rows()).map(|t| nearest(h.row_slice(t), &book.codes)).collect())
}

/// Quantizes the rows of a graph node. The returned node carries the code
/// vectors forward and copies gradients straight through to `h`.
pub fn quantize<S: Scalar>(g: &Graph<S>, h: Var, book: &CodeBook<S>) -> Result<(LatentSequence, Var), QuantizerError> {
    let z = quantize_indices(&g.value(h), book)?;
    let e = g.constant(book.lookup(&z));
    let q = g.straight_through(h, e)?;
    Ok((z, q))
}

/// Lloyd's algorithm seeded from `k` distinct random rows. Empty clusters
/// are re-seeded from a random sample. EMA statistics hold the final
/// cluster counts and sums.
pub fn kmeans_init<S: Scalar>(
    samples: &Tensor<S>,
    k: usize,
    iters: usize,
    seed: u64,
    decay: f64,
) -> Result<CodeBook<S>, QuantizerError> {
    let n = samples.rows();
    if k == 0 {
        return Err(QuantizerError::EmptyBook);
    }
    if n < k {
        return Err(QuantizerError::TooFewSamples { samples: n, k });
    }
    let d = samples.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seeds: Vec<usize> = sample(&mut rng, n, k).into_vec();
    seeds.sort_unstable();
    let mut codes = Tensor::zeros(k, d);
    for (j, &i) in seeds.iter().enumerate() {
        codes.row_slice_mut(j).copy_from_slice(samples.row_slice(i));
    }
    for _ in 0..iters {
        let (counts, sums) = cluster_stats(samples, &codes);
        for j in 0..k {
            if counts[j] == 0 {
                let i = rng.random_range(0..n);
                codes.row_slice_mut(j).copy_from_slice(samples.row_slice(i));
            } else {
                let inv = S::one() / S::lit(counts[j] as f64);
                for c in 0..d {
                    codes.set(j, c, sums.get(j, c) * inv);
                }
            }
        }
    }
    let (counts, _) = cluster_stats(samples, &codes);
    let mut ema_counts = Vec::with_capacity(k);
    let mut ema_sums = Tensor::zeros(k, d);
    for j in 0..k {
        // an empty final cluster keeps its code through a unit pseudo-count
        let c = S::lit(counts[j].max(1) as f64);
        ema_counts.push(c);
        for col in 0..d {
            ema_sums.set(j, col, codes.get(j, col) * c);
        }
    }
    Ok(CodeBook {
        codes,
        ema_counts,
        ema_sums,
        decay: S::lit(decay),
        eps: S::lit(DEFAULT_EMA_EPS),
    })
}

fn cluster_stats<S: Scalar>(samples: &Tensor<S>, codes: &Tensor<S>) -> (Vec<usize>, Tensor<S>) {
    let mut counts = vec![0usize; codes.rows()];
    let mut sums = Tensor::zeros(codes.rows(), codes.cols());
    for i in 0..samples.rows() {
        let row = samples.row_slice(i);
        let j = nearest(row, codes);
        counts[j] += 1;
        for (s, &v) in sums.row_slice_mut(j).iter_mut().zip(row) {
            *s += v;
        }
    }
    (counts, sums)
}

/// Sum of squared distances from each sample to its nearest code.
pub fn kmeans_objective<S: Scalar>(samples: &Tensor<S>, codes: &Tensor<S>) -> f64 {
    (0..samples.rows())
        .map(|i| {
            let row = samples.row_slice(i);
            sq_dist(row, codes.row_slice(nearest(row, codes))).as_f64()
        })
        .sum()
}

/// EMA update from one batch; rows with `valid[t] == false` are ignored.
/// Codes move only here, never by gradient.
pub fn ema_update<S: Scalar>(
    book: &mut CodeBook<S>,
    h: &Tensor<S>,
    z: &[usize],
    valid: Option<&[bool]>,
) -> Result<(), QuantizerError> {
    book.check(h.cols())?;
    if z.len() != h.rows() {
        return Err(QuantizerError::Config(format!(
            "{} indices for {} rows",
            z.len(),
            h.rows()
        )));
    }
    let (k, d) = (book.size(), book.dim());
    let mut counts = vec![S::zero(); k];
    let mut sums = Tensor::zeros(k, d);
    for (t, &zt) in z.iter().enumerate() {
        if valid.is_some_and(|v| !v[t]) {
            continue;
        }
        counts[zt] += S::one();
        for (s, &v) in sums.row_slice_mut(zt).iter_mut().zip(h.row_slice(t)) {
            *s += v;
        }
    }
    let keep = book.decay;
    let take = S::one() - keep;
    for j in 0..k {
        book.ema_counts[j] = keep * book.ema_counts[j] + take * counts[j];
        for c in 0..d {
            let v = keep * book.ema_sums.get(j, c) + take * sums.get(j, c);
            book.ema_sums.set(j, c, v);
        }
    }
    book.apply_stats();
    Ok(())
}

/// `β · Σ_t w_t ‖h_t − sg(e_{z_t})‖²`. The code vectors enter as constants.
pub fn commitment_loss<S: Scalar>(
    g: &Graph<S>,
    h: Var,
    book: &CodeBook<S>,
    z: &[usize],
    beta: S,
    weights: &[S],
) -> Result<Var, QuantizerError> {
    if beta < S::zero() {
        return Err(QuantizerError::Config(format!("commitment weight {beta} is negative")));
    }
    let e = g.constant(book.lookup(z));
    let e = g.stop_gradient(e);
    let diff = g.sub(h, e)?;
    let sq = g.square(diff);
    let w: Vec<S> = weights.iter().map(|&w| w * beta).collect();
    Ok(g.weighted_sum(sq, &w)?)
}

/// Assignment counts over a window of recent batches plus a reservoir of
/// recent encoder states to restart dead codes from.
#[derive(Debug, Clone)]
pub struct UsageWindow<S> {
    pub counts: Vec<u64>,
    reservoir: Vec<Vec<S>>,
    capacity: usize,
    seen: u64,
}

impl<S: Scalar> UsageWindow<S> {
    pub fn new(k: usize, capacity: usize) -> Self {
        Self {
            counts: vec![0; k],
            reservoir: Vec::new(),
            capacity,
            seen: 0,
        }
    }

    /// Records one batch of assignments.
    pub fn observe<R: Rng + ?Sized>(&mut self, h: &Tensor<S>, z: &[usize], valid: Option<&[bool]>, rng: &mut R) {
        for (t, &zt) in z.iter().enumerate() {
            if valid.is_some_and(|v| !v[t]) {
                continue;
            }
            self.counts[zt] += 1;
            self.seen += 1;
            let row = h.row_slice(t).to_vec();
            if self.reservoir.len() < self.capacity {
                self.reservoir.push(row);
            } else {
                let j = rng.random_range(0..self.seen);
                if (j as usize) < self.capacity {
                    self.reservoir[j as usize] = row;
                }
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Codes whose usage share is below `fraction` of the uniform share.
    pub fn dead_codes(&self, fraction: f64) -> Vec<usize> {
        let uniform = self.total() as f64 / self.counts.len() as f64;
        let threshold = fraction * uniform;
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| (c as f64) < threshold)
            .map(|(k, _)| k)
            .collect()
    }

    /// Usage entropy in nats.
    pub fn entropy(&self) -> f64 {
        let total = self.total() as f64;
        if total == 0.0 {
            return 0.0;
        }
        self.counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total;
                -p * p.ln()
            })
            .sum()
    }

    pub fn reset(&mut self) {
        self.counts.iter_mut().for_each(|c| *c = 0);
        self.reservoir.clear();
        self.seen = 0;
    }
}

/// Re-seeds under-used codes from random recent encoder states. Returns the
/// number of codes restarted.
pub fn dead_code_restart<S: Scalar, R: Rng + ?Sized>(
    book: &mut CodeBook<S>,
    window: &UsageWindow<S>,
    fraction: f64,
    rng: &mut R,
) -> usize {
    if window.total() == 0 || window.reservoir.is_empty() {
        return 0;
    }
    let dead = window.dead_codes(fraction);
    for &k in &dead {
        let src = &window.reservoir[rng.random_range(0..window.reservoir.len())];
        book.codes.row_slice_mut(k).copy_from_slice(src);
        book.ema_sums.row_slice_mut(k).copy_from_slice(src);
        book.ema_counts[k] = S::one();
    }
    if !dead.is_empty() {
        log::debug!("restarted {} dead codes", dead.len());
    }
    dead.len()
}

/// Entropy of the one-hot posterior `q(z_t | x)`: the single index has
/// probability one, so the entropy is `-1·ln 1 = 0`.
pub fn posterior_entropy(_z: &[usize]) -> f64 {
    0.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn book(rows: &[[f64; 2]]) -> CodeBook<f64> {
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        CodeBook::from_codes(Tensor::new(rows.len(), 2, data).unwrap(), 0.99)
    }

    #[test]
    fn exact_match_and_single_code() {
        let b = book(&[[0.0, 0.0], [1.0, 1.0], [2.0, 0.0], [5.0, 5.0]]);
        let h = Tensor::from_f64(1, 2, &[5.0, 5.0]).unwrap();
        assert_eq!(quantize_indices(&h, &b).unwrap(), vec![3]);
        let one = book(&[[9.0, 9.0]]);
        let h = Tensor::from_f64(3, 2, &[0.0, 0.0, 1.0, 2.0, -4.0, 3.0]).unwrap();
        assert_eq!(quantize_indices(&h, &one).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn ties_go_to_smallest_index() {
        let b = book(&[[1.0, 0.0], [-1.0, 0.0]]);
        let h = Tensor::from_f64(1, 2, &[0.0, 0.0]).unwrap();
        assert_eq!(quantize_indices(&h, &b).unwrap(), vec![0]);
    }

    #[test]
    fn empty_book_and_dim_mismatch_are_errors() {
        let empty = CodeBook::from_codes(Tensor::<f64>::zeros(0, 2), 0.99);
        let h = Tensor::from_f64(1, 2, &[0.0, 0.0]).unwrap();
        assert!(matches!(quantize_indices(&h, &empty), Err(QuantizerError::EmptyBook)));
        let b = book(&[[0.0, 0.0]]);
        let h3 = Tensor::<f64>::zeros(1, 3);
        assert!(matches!(quantize_indices(&h3, &b), Err(QuantizerError::Dim { .. })));
    }

    #[test]
    fn kmeans_with_n_equal_k_returns_samples() {
        let s = Tensor::from_f64(3, 2, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let b = kmeans_init(&s, 3, 0, 7, 0.99).unwrap();
        let mut rows: Vec<Vec<f64>> = (0..3).map(|k| b.codes.row_slice(k).to_vec()).collect();
        rows.sort_by(|a, c| a[0].partial_cmp(&c[0]).unwrap());
        assert_eq!(rows, vec![vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, 5.0]]);
        assert!(matches!(kmeans_init(&s, 4, 1, 0, 0.99), Err(QuantizerError::TooFewSamples { .. })));
    }

    #[test]
    fn ema_with_zero_decay_is_batch_mean() {
        let mut b = book(&[[0.0, 0.0], [10.0, 10.0]]);
        b.decay = 0.0;
        let h = Tensor::from_f64(3, 2, &[1.0, 2.0, 3.0, 4.0, 11.0, 9.0]).unwrap();
        let z = quantize_indices(&h, &b).unwrap();
        ema_update(&mut b, &h, &z, None).unwrap();
        assert_eq!(b.codes.row_slice(0), &[2.0, 3.0]);
        assert_eq!(b.codes.row_slice(1), &[11.0, 9.0]);
    }

    #[test]
    fn unassigned_code_is_unchanged() {
        let mut b = book(&[[0.0, 0.0], [10.0, 10.0]]);
        b.ema_counts = vec![4.0, 4.0];
        b.ema_sums = Tensor::from_f64(2, 2, &[0.0, 0.0, 40.0, 40.0]).unwrap();
        let h = Tensor::from_f64(1, 2, &[0.5, 0.5]).unwrap();
        ema_update(&mut b, &h, &[0], None).unwrap();
        assert_abs_diff_eq!(b.codes.get(1, 0), 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b.ema_counts[1], 3.96, epsilon = 1e-12);
    }

    #[test]
    fn invalid_rows_are_ignored_by_ema() {
        let mut b = book(&[[0.0, 0.0]]);
        b.decay = 0.0;
        let h = Tensor::from_f64(2, 2, &[1.0, 1.0, 100.0, 100.0]).unwrap();
        ema_update(&mut b, &h, &[0, 0], Some(&[true, false])).unwrap();
        assert_eq!(b.codes.row_slice(0), &[1.0, 1.0]);
    }

    #[test]
    fn commitment_matches_hand_differentiation() {
        let b = book(&[[0.0, 0.0]]);
        let g = Graph::<f64>::new();
        let h = g.leaf(Tensor::from_f64(1, 2, &[1.0, 0.0]).unwrap());
        let loss = commitment_loss(&g, h, &b, &[0], 2.0, &[1.0]).unwrap();
        assert_eq!(g.item(loss), 2.0);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(h).unwrap().data(), &[4.0, 0.0]);
        assert!(commitment_loss(&g, h, &b, &[0], -1.0, &[1.0]).is_err());
    }

    #[test]
    fn commitment_is_zero_on_codes() {
        let b = book(&[[0.3, -0.2], [1.0, 1.0]]);
        let g = Graph::<f64>::new();
        let h = g.leaf(b.codes.clone());
        let loss = commitment_loss(&g, h, &b, &[0, 1], 5.0, &[1.0, 1.0]).unwrap();
        assert_eq!(g.item(loss), 0.0);
    }

    #[test]
    fn restart_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = Tensor::from_f64(4, 2, &[0.0, 0.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0]).unwrap();
        let mut b = book(&[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]);
        let mut w = UsageWindow::new(4, 16);
        w.observe(&h, &[0, 1, 2, 3], None, &mut rng);
        assert_eq!(dead_code_restart(&mut b, &w, DEFAULT_RESTART_FRACTION, &mut rng), 0);
        let mut w = UsageWindow::new(4, 16);
        w.observe(&h, &[0, 1, 2, 2], None, &mut rng);
        assert_eq!(dead_code_restart(&mut b, &w, DEFAULT_RESTART_FRACTION, &mut rng), 1);
    }

    #[test]
    fn one_hot_posterior_has_zero_entropy() {
        assert_eq!(posterior_entropy(&[0, 3, 1]), 0.0);
    }
}
