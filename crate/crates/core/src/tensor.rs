//! Dense row-major `f64` tensors and the forward kernels shared by the
//! differentiable tape.
//!
//! Everything the model needs is at most two-dimensional. Rank-1 tensors are
//! treated as a single row (`1 × n`) by the matrix kernels, and a rank-0
//! tensor as `1 × 1`.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Column vector, `n × 1`.
    pub fn column(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len(), 1],
            data,
        }
    }

    /// Panics if `data.len() != rows * cols`; use [`Tensor::new`] for checked construction.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix {rows}x{cols}");
        Tensor {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(
                    "Tensor::from_rows",
                    format!("row {i} has {} values, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor::matrix(rows.len(), cols, data))
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!(
                "{what} (flat index {i}, value {})",
                self.data[i]
            ))),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, c: f64) {
        for a in &mut self.data {
            *a *= c;
        }
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::matrix(c, r, out)
    }
}

/// `op(a) · op(b)` where `op` optionally transposes. Shapes must agree; callers check.
pub(crate) fn gemm(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Tensor {
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k, k2, "gemm inner dimension");
    let mut out = vec![0.0; m * n];
    if m > 0 && n > 0 && k > 0 {
        let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
        let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
        // SAFETY: strides describe in-bounds views of `a`, `b` and `out` with the
        // logical shapes m×k, k×n and m×n computed above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Tensor::matrix(m, n, out)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_t(a, false, b, false)
}

/// Matrix product with optional transposition of either operand.
pub fn matmul_t(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Result<Tensor> {
    let k = if ta { a.rows() } else { a.cols() };
    let k2 = if tb { b.cols() } else { b.rows() };
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!(
                "{:?}{} x {:?}{}",
                a.shape(),
                if ta { "ᵀ" } else { "" },
                b.shape(),
                if tb { "ᵀ" } else { "" }
            ),
        ));
    }
    Ok(gemm(a, ta, b, tb))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.data.clone();
    if c == 0 {
        return Tensor {
            shape: x.shape.clone(),
            data: out,
        };
    }
    for row in out.chunks_mut(c) {
        softmax_in_place(row);
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

pub fn log_softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.data.clone();
    if c > 0 {
        for row in out.chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Normalized rows (before gain/bias) and the per-row `1/sqrt(var + eps)`.
pub(crate) fn layer_norm_parts(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let c = x.cols();
    let mut xhat = x.data.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for row in xhat.chunks_mut(c.max(1)) {
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * is;
        }
        inv_std.push(is);
    }
    (
        Tensor {
            shape: x.shape.clone(),
            data: xhat,
        },
        inv_std,
    )
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let c = x.cols();
    if c == 0 || gain.len() != c || bias.len() != c {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "x {:?}, gain {:?}, bias {:?}",
                x.shape(),
                gain.shape(),
                bias.shape()
            ),
        ));
    }
    let (mut y, _) = layer_norm_parts(x, eps);
    for row in y.data.chunks_mut(c) {
        for ((v, g), b) in row.iter_mut().zip(&gain.data).zip(&bias.data) {
            *v = *v * g + b;
        }
    }
    Ok(y)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// ELU with α = 1.
pub fn elu(x: &Tensor) -> Tensor {
    x.map(elu_scalar)
}

#[inline]
pub(crate) fn elu_scalar(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        v.exp_m1()
    }
}

/// Distinct names for stochastic training and Monte Carlo inference so call
/// sites state intent; both sample a fresh mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutMode {
    Train,
    McInfer,
    Off,
}

impl DropoutMode {
    pub fn is_stochastic(self) -> bool {
        !matches!(self, DropoutMode::Off)
    }
}

/// Inverted-dropout mask: 0 with probability `ratio`, otherwise `1/(1-ratio)`.
/// Returns `None` when dropout is a no-op.
pub fn dropout_mask<R: Rng + ?Sized>(
    len: usize,
    ratio: f64,
    mode: DropoutMode,
    rng: &mut R,
) -> Option<Vec<f64>> {
    if !mode.is_stochastic() || ratio <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - ratio);
    Some(
        (0..len)
            .map(|_| if rng.random::<f64>() < ratio { 0.0 } else { keep })
            .collect(),
    )
}

pub fn dropout<R: Rng + ?Sized>(
    x: &Tensor,
    ratio: f64,
    rng: &mut R,
    mode: DropoutMode,
) -> Result<Tensor> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!(
            "dropout ratio {ratio} outside [0, 1)"
        )));
    }
    Ok(match dropout_mask(x.len(), ratio, mode, rng) {
        None => x.clone(),
        Some(mask) => Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().zip(&mask).map(|(a, m)| a * m).collect(),
        },
    })
}

pub fn concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    concat_cols_many(&[a, b])
}

pub(crate) fn concat_cols_many(parts: &[&Tensor]) -> Result<Tensor> {
    let rows = parts.first().map_or(0, |t| t.rows());
    if parts.iter().any(|t| t.rows() != rows) {
        return Err(Error::shape(
            "concat_cols",
            format!(
                "row counts {:?}",
                parts.iter().map(|t| t.rows()).collect::<Vec<_>>()
            ),
        ));
    }
    let total: usize = parts.iter().map(|t| t.cols()).sum();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for t in parts {
            data.extend_from_slice(t.row(r));
        }
    }
    Ok(Tensor::matrix(rows, total, data))
}

/// `u vᵀ` for vectors `u` (length N) and `v` (length M).
pub fn outer(u: &Tensor, v: &Tensor) -> Tensor {
    let mut data = Vec::with_capacity(u.len() * v.len());
    for &a in &u.data {
        data.extend(v.data.iter().map(|b| a * b));
    }
    Tensor::matrix(u.len(), v.len(), data)
}

/// Frobenius inner product `Σᵢⱼ AᵢⱼBᵢⱼ`.
pub fn frobenius(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.len() != b.len() || a.rows() != b.rows() {
        return Err(Error::shape(
            "frobenius",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..rows * cols)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        Tensor::matrix(rows, cols, data)
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&Tensor::identity(2), &a).unwrap(), a);
        let ones = Tensor::column(vec![1.0, 1.0]);
        let p = matmul(&a, &ones).unwrap();
        assert_eq!(p.shape(), &[2, 1]);
        assert_eq!(p.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = randn(5, 4, &mut rng);
        let b = randn(4, 3, &mut rng);
        let p = matmul(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.get(i, k) * b.get(k, j);
                }
                assert_abs_diff_eq!(p.get(i, j), s, epsilon = 1e-12);
            }
        }
        // transposed variants agree with explicit transposes
        let pt = matmul_t(&a.transpose(), true, &b.transpose(), true).unwrap();
        for (x, y) in pt.data().iter().zip(p.data()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::matrix(1, 3, vec![1.0, 1.0, 1.0]));
        for v in s.data() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let s = softmax_rows(&Tensor::matrix(1, 2, vec![0.0, 2f64.ln()]));
        assert_abs_diff_eq!(s.data()[0], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.data()[1], 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn softmax_large_inputs_match_shifted_reference() {
        let s = softmax_rows(&Tensor::matrix(1, 2, vec![1000.0, 1000.1]));
        assert!(s.all_finite());
        // shifted reference: softmax([0, 0.1])
        let e = 0.1f64.exp();
        assert_abs_diff_eq!(s.data()[0], 1.0 / (1.0 + e), epsilon = 1e-14);
        assert_abs_diff_eq!(s.data()[1], e / (1.0 + e), epsilon = 1e-14);
    }

    #[test]
    fn layer_norm_examples() {
        let g = Tensor::filled(&[3], 1.0);
        let b = Tensor::zeros(&[3]);
        let y = layer_norm(&Tensor::matrix(1, 3, vec![4.0; 3]), &g, &b, LN_EPS).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));

        let g = Tensor::filled(&[2], 1.0);
        let b = Tensor::zeros(&[2]);
        let y = layer_norm(&Tensor::matrix(1, 2, vec![1.0, -1.0]), &g, &b, 1e-12).unwrap();
        assert_abs_diff_eq!(y.data()[0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(y.data()[1], -1.0, epsilon = 1e-9);
        // with the default eps the unit-variance row shrinks by 1/sqrt(1 + eps)
        let y = layer_norm(&Tensor::matrix(1, 2, vec![1.0, -1.0]), &g, &b, LN_EPS).unwrap();
        assert_abs_diff_eq!(y.data()[0], 1.0 / (1.0 + LN_EPS).sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn layer_norm_row_means_vanish() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = randn(4, 8, &mut rng);
        let y = layer_norm(&x, &Tensor::filled(&[8], 1.0), &Tensor::zeros(&[8]), LN_EPS).unwrap();
        for r in 0..4 {
            let mean: f64 = y.row(r).iter().sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-10);
        }
    }

    #[test]
    fn activations() {
        assert_eq!(elu_scalar(0.0), 0.0);
        assert_abs_diff_eq!(elu_scalar(-1.0), (-1f64).exp() - 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(elu_scalar(-1.0), -0.632121, epsilon = 1e-6);
        let r = relu(&Tensor::vector(vec![-3.0, 3.0]));
        assert_eq!(r.data(), &[0.0, 3.0]);
    }

    #[test]
    fn elu_is_c1_at_zero() {
        let h = 1e-7;
        // value continuity
        assert!((elu_scalar(h) - elu_scalar(-h)).abs() < 1e-6);
        // one-sided slopes both ≈ 1
        let right = (elu_scalar(h) - elu_scalar(0.0)) / h;
        let left = (elu_scalar(0.0) - elu_scalar(-h)) / h;
        assert!((right - left).abs() < 1e-6);
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = randn(3, 3, &mut rng);
        for mode in [DropoutMode::Train, DropoutMode::McInfer, DropoutMode::Off] {
            assert_eq!(dropout(&x, 0.0, &mut rng, mode).unwrap(), x);
        }
        assert_eq!(dropout(&x, 0.3, &mut rng, DropoutMode::Off).unwrap(), x);
        assert!(dropout(&x, 1.0, &mut rng, DropoutMode::Train).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::filled(&[100_000], 1.0);
        let y = dropout(&x, 0.5, &mut rng, DropoutMode::Train).unwrap();
        let mean = y.sum() / y.len() as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn dropout_deterministic_per_rng_state() {
        let x = Tensor::filled(&[64], 2.0);
        let a = dropout(&x, 0.3, &mut ChaCha8Rng::seed_from_u64(5), DropoutMode::McInfer).unwrap();
        let b = dropout(&x, 0.3, &mut ChaCha8Rng::seed_from_u64(5), DropoutMode::McInfer).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn outer_concat_frobenius() {
        let o = outer(&Tensor::vector(vec![1.0, 2.0]), &Tensor::vector(vec![3.0, 4.0]));
        assert_eq!(o.data(), &[3.0, 4.0, 6.0, 8.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = randn(3, 3, &mut rng);
        assert_eq!(frobenius(&a, &Tensor::zeros(&[3, 3])).unwrap(), 0.0);
        let mut s = 0.0;
        for v in a.data() {
            s += v * v;
        }
        assert_abs_diff_eq!(frobenius(&a, &a).unwrap(), s, epsilon = 1e-12);
        let c = concat_cols(&a, &Tensor::zeros(&[3, 2])).unwrap();
        assert_eq!(c.shape(), &[3, 5]);
        assert_eq!(&c.row(1)[..3], a.row(1));
        assert!(concat_cols(&a, &Tensor::zeros(&[2, 2])).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(vals in prop::collection::vec(-50.0f64..50.0, 1..24)) {
            let n = vals.len();
            let s = softmax_rows(&Tensor::matrix(1, n, vals));
            let total: f64 = s.data().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(s.data().iter().all(|&p| p > 0.0 && p <= 1.0));
        }

        #[test]
        fn layer_norm_ignores_row_shift(
            vals in prop::collection::vec(-5.0f64..5.0, 8),
            shift in -100.0f64..100.0,
        ) {
            let x = Tensor::matrix(1, 8, vals.clone());
            let xs = Tensor::matrix(1, 8, vals.iter().map(|v| v + shift).collect());
            let g = Tensor::filled(&[8], 1.0);
            let b = Tensor::zeros(&[8]);
            let y1 = layer_norm(&x, &g, &b, LN_EPS).unwrap();
            let y2 = layer_norm(&xs, &g, &b, LN_EPS).unwrap();
            for (p, q) in y1.data().iter().zip(y2.data()) {
                prop_assert!((p - q).abs() < 1e-10);
            }
        }
    }
}
