use std::fmt;

use rand::Rng;

use super::AutodiffError;
use crate::scalar::Scalar;

/// Dense row-major matrix. Vectors are `1 × n`, scalars `1 × 1`.
#[derive(Clone, PartialEq)]
pub struct Tensor<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(rows: usize, cols: usize, data: Vec<S>) -> Result<Self, AutodiffError> {
        if data.len() != rows * cols {
            return Err(AutodiffError::Contract(format!(
                "data length {} does not match shape {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize, value: S) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: S) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn row(data: Vec<S>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Result<Self, AutodiffError> {
        Self::new(rows, cols, data.iter().map(|&x| S::lit(x)).collect())
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self, AutodiffError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(AutodiffError::Contract("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Uniform initialization in `[-scale, scale]`.
    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| S::lit(rng.random_range(-scale..=scale)))
            .collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: S) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row_slice(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_slice_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a `1 × 1` tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                out.push(self.get(r, c));
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    /// Converts element type, e.g. `f64` oracles against `f32` models.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| T::lit(x.as_f64())).collect(),
        }
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn sq_norm(&self) -> S {
        self.data.iter().map(|&x| x * x).sum()
    }
}

impl<S: fmt::Debug> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor[{}x{}]", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

/// `out += a · b` for row-major `a: n×k`, `b: k×m`.
pub(crate) fn matmul_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a · bᵀ` for `a: n×m`, `b: k×m`, `out: n×k`.
pub(crate) fn matmul_bt_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], n: usize, m: usize, k: usize) {
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for j in 0..k {
            let brow = &b[j * m..(j + 1) * m];
            let mut s = S::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * k + j] += s;
        }
    }
}

/// `out += aᵀ · b` for `a: n×k`, `b: n×m`, `out: k×m`.
pub(crate) fn matmul_at_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Plain matrix product without graph bookkeeping.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, AutodiffError> {
    if a.cols != b.rows {
        return Err(AutodiffError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let mut out = Tensor::zeros(a.rows, b.cols);
    matmul_acc(&a.data, &b.data, &mut out.data, a.rows, a.cols, b.cols);
    Ok(out)
}
