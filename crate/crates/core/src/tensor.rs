//! Dense row-major `f64` matrices and the handful of kernels the layers need.
//!
//! Public entry points validate shapes and reject non-finite results. The
//! `*_into`/`gemm_*` kernels used on the hot path only check shapes.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Dense vector; dereferences to `[f64]`.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl From<&[f64]> for Vector {
    fn from(v: &[f64]) -> Self {
        Vector(v.to_vec())
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. An empty slice gives a 0×0 matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::invalid(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// A single-row matrix.
    pub fn row_vector(v: &[f64]) -> Self {
        Matrix {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Rows in reverse order.
    pub fn reversed_rows(&self) -> Matrix {
        let mut out = Matrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            out.row_mut(self.rows - 1 - r).copy_from_slice(self.row(r));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub(crate) fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    /// `self · other`, validated and checked for finiteness.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        let out = gemm_nn(self, other)?;
        if !out.is_finite() {
            return Err(Error::NonFinite("matmul"));
        }
        Ok(out)
    }

    /// `self · v` for a column vector `v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vector> {
        if v.len() != self.cols {
            return Err(Error::Shape {
                op: "matvec",
                left: self.shape(),
                right: (v.len(), 1),
            });
        }
        Ok(Vector(
            (0..self.rows).map(|r| dot(self.row(r), v)).collect(),
        ))
    }
}

impl AsRef<Matrix> for Matrix {
    fn as_ref(&self) -> &Matrix {
        self
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `a · b` where `a` is m×k and `b` is k×n.
pub fn gemm_nn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik != 0.0 {
                axpy(aik, b.row(k), out_row);
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` where `a` is m×k and `b` is n×k.
pub fn gemm_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::Shape {
            op: "matmul_nt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(ar, b.row(j));
        }
    }
    Ok(out)
}

/// Accumulates `aᵀ · b` into `out`, where `a` is k×m, `b` is k×n and `out` is m×n.
pub fn gemm_tn_acc(a: &Matrix, b: &Matrix, out: &mut Matrix) -> Result<()> {
    if a.rows != b.rows || out.rows != a.cols || out.cols != b.cols {
        return Err(Error::Shape {
            op: "matmul_tn",
            left: a.shape(),
            right: b.shape(),
        });
    }
    for k in 0..a.rows {
        let brow = b.row(k);
        for i in 0..a.cols {
            let aki = a.data[k * a.cols + i];
            if aki != 0.0 {
                axpy(aki, brow, out.row_mut(i));
            }
        }
    }
    Ok(())
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(v: &[f64]) -> Result<Vector> {
    if v.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::NonFinite("softmax input"));
    }
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(Vector(exps.into_iter().map(|e| e / total).collect()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Relu => x.max(0.0),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn elementwise(op: Activation, m: &Matrix) -> Matrix {
    Matrix {
        rows: m.rows,
        cols: m.cols,
        data: m.data.iter().map(|&x| op.apply(x)).collect(),
    }
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], eps: f64) -> Result<Vector>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("eps must be positive, got {eps}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = f(&probe);
        probe[i] = orig - eps;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite("finite_diff_grad objective"));
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(Vector(grad))
}

/// `|a − n| / max(1e-8, |a| + |n|)`, the gradient-check error measure.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(a.matmul(&Matrix::identity(2)).unwrap(), a);
        let row = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let col = Matrix::from_rows(&[[3.0], [4.0]]).unwrap();
        assert_eq!(row.matmul(&col).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(5, 7, &mut rng);
        let b = random(7, 3, &mut rng);
        let got = a.matmul(&b).unwrap();
        let want = naive(&a, &b);
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12);
        }
        let nt = gemm_nt(&a, &b.transpose()).unwrap();
        for (g, w) in nt.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12);
        }
        let mut tn = Matrix::zeros(5, 3);
        gemm_tn_acc(&a.transpose(), &b, &mut tn).unwrap();
        for (g, w) in tn.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
    }

    #[test]
    fn matmul_rejects_overflow() {
        let a = Matrix::from_rows(&[[1e300, 1e300]]).unwrap();
        let b = Matrix::from_rows(&[[1e300], [1e300]]).unwrap();
        assert!(matches!(a.matmul(&b), Err(Error::NonFinite(_))));
    }

    #[test]
    fn softmax_cases() {
        let u = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for p in u.iter() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&[1000.0, 0.0]).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-15 && s[1] >= 0.0 && s[1] < 1e-300);
        let v = [1.0f64, 2.0, 3.0];
        let z: f64 = v.iter().map(|x| x.exp()).sum();
        let got = softmax(&v).unwrap();
        for (g, x) in got.iter().zip(v) {
            assert!((g - x.exp() / z).abs() < 1e-12);
        }
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn activations() {
        assert_eq!(Activation::Tanh.apply(0.0), 0.0);
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
        assert_eq!(Activation::Relu.apply(-3.0), 0.0);
        assert_eq!(Activation::Relu.apply(3.0), 3.0);
        assert!((Activation::Sigmoid.apply(2.0) - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-12);
        let m = Matrix::from_rows(&[[-50.0, 50.0, 0.3]]).unwrap();
        let s = elementwise(Activation::Sigmoid, &m);
        assert!(s.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert!(sigmoid(-800.0).is_finite());
    }

    #[test]
    fn finite_differences() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| 4.2, &[1.0, 2.0], 1e-5).unwrap();
        assert_eq!(&g[..], &[0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..10).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let g = finite_diff_grad(|x| x.iter().map(|v| v.sin()).sum(), &x, 1e-5).unwrap();
        for (gi, xi) in g.iter().zip(&x) {
            assert!((gi - xi.cos()).abs() < 1e-6);
        }
        assert!(finite_diff_grad(|x| x[0], &[1.0], 0.0).is_err());
        assert!(finite_diff_grad(|_| f64::NAN, &[1.0], 1e-3).is_err());
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in 0u64..1000, m in 1usize..6, k in 1usize..6, n in 1usize..6, p in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(m, k, &mut rng);
            let b = random(k, n, &mut rng);
            let c = random(n, p, &mut rng);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (l, r) in left.data().iter().zip(right.data()) {
                prop_assert!((l - r).abs() <= 1e-9 * l.abs().max(r.abs()).max(1.0));
            }
        }

        #[test]
        fn softmax_shift_invariant(v in proptest::collection::vec(-20.0f64..20.0, 1..10), c in -100.0f64..100.0) {
            let a = softmax(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let b = softmax(&shifted).unwrap();
            prop_assert!(((a.iter().sum::<f64>()) - 1.0).abs() < 1e-12);
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn kernels_are_deterministic(seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(4, 5, &mut rng);
            let b = random(5, 3, &mut rng);
            let x = a.matmul(&b).unwrap();
            let y = a.matmul(&b).unwrap();
            prop_assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
}
