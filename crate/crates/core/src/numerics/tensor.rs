use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::SeededRng;

/// Dense row-major FP32 array.
///
/// `data.len()` always equals the product of `shape`; every dimension is
/// positive. Operations never broadcast: mismatched shapes are errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape("tensor", shape, &[data.len()]));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "tensor dimensions must be positive: {shape:?}"
        );
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Format("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(&[rows.len(), cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Entries drawn i.i.d. from N(0, std²).
    pub fn randn(shape: &[usize], std: f32, rng: &mut SeededRng) -> Self {
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            *v = rng.normal() * std;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows when viewed as a matrix; a 1-D tensor is a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        self.same_shape("max_abs_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    pub(crate) fn same_shape(&self, op: &'static str, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(())
    }

    fn as_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.len() {
            1 => Ok((1, self.shape[0])),
            2 => Ok((self.shape[0], self.shape[1])),
            _ => Err(Error::shape(op, &self.shape, &[])),
        }
    }

    /// `self [m×k] · rhs [k×n]`. A 1-D right operand is treated as a column.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.as_matrix("matmul")?;
        if rhs.shape.len() == 1 {
            if rhs.shape[0] != k {
                return Err(Error::shape("matmul", &self.shape, &rhs.shape));
            }
            let mut out = vec![0.0; m];
            matmul_nt(&self.data, &rhs.data, &mut out, m, k, 1);
            return Tensor::new(&[m], out);
        }
        let (k2, n) = rhs.as_matrix("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &rhs.shape));
        }
        let mut out = vec![0.0; m * n];
        matmul_nn(&self.data, &rhs.data, &mut out, m, k, n);
        Tensor::new(&[m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.as_matrix("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(&[n, m], out)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    pub fn scale(&self, s: f32) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, op: &'static str, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.same_shape(op, other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.same_shape("add_assign", other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: f32) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().sum()
    }
}

/// Dot product with eight independent accumulators; fixed summation order.
#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let xa = &a[c * 8..c * 8 + 8];
        let xb = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
pub(crate) fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// out[m×n] = a[m×k] · b[k×n]
pub(crate) fn matmul_nn(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(av, &b[p * n..(p + 1) * n], orow);
            }
        }
    }
}

/// out[m×n] = a[m×k] · b[n×k]ᵀ
pub(crate) fn matmul_nt(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// out[m×n] += a[k×m]ᵀ · b[k×n]
pub(crate) fn matmul_tn_acc(a: &[f32], b: &[f32], out: &mut [f32], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av != 0.0 {
                axpy(av, brow, &mut out[i * n..(i + 1) * n]);
            }
        }
    }
}

/// Free-function form of [`Tensor::matmul`].
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.matmul(b)
}

/// Numerically stable softmax of a 1-D tensor.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 1 {
        return Err(Error::shape("softmax", x.shape(), &[]));
    }
    let mut out = x.data().to_vec();
    softmax_in_place(&mut out);
    Tensor::new(x.shape(), out)
}

pub(crate) fn softmax_in_place(v: &mut [f32]) {
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    let inv = 1.0 / total;
    v.iter_mut().for_each(|x| *x *= inv);
}

/// Mean over rows of `-log softmax(logits)[target]`.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f32> {
    if logits.shape().len() != 2 || logits.rows() != targets.len() {
        return Err(Error::shape("cross_entropy", logits.shape(), &[targets.len()]));
    }
    let c = logits.cols();
    let mut total = 0.0f64;
    for (i, &t) in targets.iter().enumerate() {
        if t >= c {
            return Err(Error::Index {
                op: "cross_entropy",
                index: t,
                len: c,
            });
        }
        total += row_nll(logits.row(i), t) as f64;
    }
    Ok((total / targets.len() as f64) as f32)
}

/// `-log softmax(row)[target]` via log-sum-exp.
pub(crate) fn row_nll(row: &[f32], target: usize) -> f32 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<f32>().ln() + max;
    lse - row[target]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.at(i, p) as f64 * b.at(p, j) as f64;
                }
            }
        }
        out
    }

    #[test]
    fn identity_matmul() {
        let mut rng = SeededRng::new(3);
        let m = Tensor::randn(&[3, 5], 1.0, &mut rng);
        assert_eq!(Tensor::eye(3).matmul(&m).unwrap(), m);
    }

    #[test]
    fn hand_matmul() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[&[1.0], &[1.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = SeededRng::new(11);
        let a = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let c = a.matmul(&b).unwrap();
        for (x, y) in c.data().iter().zip(triple_loop(&a, &b)) {
            assert!((*x as f64 - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn kernels_agree() {
        let mut rng = SeededRng::new(5);
        let a = Tensor::randn(&[7, 19], 1.0, &mut rng);
        let b = Tensor::randn(&[19, 6], 1.0, &mut rng);
        let nn = a.matmul(&b).unwrap();
        let bt = b.transpose().unwrap();
        let mut nt = vec![0.0; 42];
        matmul_nt(a.data(), bt.data(), &mut nt, 7, 19, 6);
        let at = a.transpose().unwrap();
        let mut tn = vec![0.0; 42];
        matmul_tn_acc(at.data(), b.data(), &mut tn, 19, 7, 6);
        for i in 0..42 {
            assert!((nn.data()[i] - nt[i]).abs() < 1e-5);
            assert!((nn.data()[i] - tn[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let s = softmax(&Tensor::zeros(&[4])).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
        let s = softmax(&Tensor::vector(vec![1000.0, 0.0])).unwrap();
        assert!((s.data()[0] - 1.0).abs() <= 1e-6 && s.data()[1].abs() <= 1e-6);
    }

    #[test]
    fn softmax_matches_f64() {
        let s = softmax(&Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        for (a, b) in s.data().iter().zip(&e) {
            assert!((*a as f64 - b / z).abs() <= 1e-6);
        }
        assert!((s.sum() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn empty_tensor_rejected() {
        assert!(Tensor::new(&[0], vec![]).is_err());
        assert!(Tensor::new(&[2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let mut logits = Tensor::zeros(&[2, 5]);
        logits.data_mut()[3] = 1e6;
        logits.data_mut()[5 + 1] = 1e6;
        assert!(cross_entropy(&logits, &[3, 1]).unwrap() <= 1e-4);

        let uniform = Tensor::zeros(&[3, 7]);
        let l = cross_entropy(&uniform, &[0, 4, 6]).unwrap();
        assert!((l - 7f32.ln()).abs() < 1e-6);

        assert!(matches!(
            cross_entropy(&uniform, &[0, 7, 1]),
            Err(Error::Index { index: 7, .. })
        ));
    }

    #[test]
    fn cross_entropy_matches_f64() {
        let mut rng = SeededRng::new(42);
        let logits = Tensor::randn(&[4, 7], 2.0, &mut rng);
        let targets = [0, 3, 6, 2];
        let mut oracle = 0.0f64;
        for (i, &t) in targets.iter().enumerate() {
            let row: Vec<f64> = logits.row(i).iter().map(|&v| v as f64).collect();
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            oracle -= (row[t].exp() / z).ln();
        }
        oracle /= 4.0;
        let got = cross_entropy(&logits, &targets).unwrap();
        assert!((got as f64 - oracle).abs() <= 1e-6, "{got} vs {oracle}");
    }
}
