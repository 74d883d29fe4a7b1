//! Dense row-major `f64` arrays and the raw math kernels shared by the
//! differentiable graph and the plain inference paths.

use crate::error::{DrlError, Result};

/// A dense row-major array of 64-bit floats. Rank is arbitrary; the
/// differentiable graph restricts itself to vectors and matrices, while
/// rank-3 tensors store per-head attention stacks.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, validating the shape/length contract and that all
    /// values are finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(DrlError::Config(format!(
                "tensor shape {shape:?} contains a zero dimension"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(DrlError::ShapeMismatch {
                op: "tensor::new",
                left: shape,
                right: vec![data.len()],
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(DrlError::NonFinite { op: "tensor::new" });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    /// Crate-internal constructor that skips the finite check; callers are
    /// expected to validate afterwards (the graph does, turning NaN into a
    /// named error instead of a panic).
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![v; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Row-major matrix from nested rows; all rows must agree in length.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != n) {
            return Err(DrlError::Config("ragged matrix rows".into()));
        }
        let mut data = Vec::with_capacity(m * n);
        for r in rows {
            data.extend_from_slice(r);
        }
        Tensor::new(vec![m, n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Scalar access for `[1]` tensors.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        let n = self.cols();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row_tensor(&self, i: usize) -> Tensor {
        Tensor::vector(self.row_slice(i).to_vec())
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(DrlError::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b * scale;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// FNV-1a hash over the IEEE-754 bit patterns; used for byte-level
    /// freeze and determinism checks.
    pub fn bit_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &d in &self.shape {
            h = fnv_step(h, d as u64);
        }
        for &v in &self.data {
            h = fnv_step(h, v.to_bits());
        }
        h
    }

    pub fn approx_eq(&self, other: &Tensor, tol: f64) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| (a - b).abs() <= tol)
    }

    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn fnv_step(mut h: u64, v: u64) -> u64 {
    for i in 0..8 {
        h ^= (v >> (8 * i)) & 0xff;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Combines a sequence of checksums into one (order-sensitive).
pub fn combine_checksums(parts: impl IntoIterator<Item = u64>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in parts {
        h = fnv_step(h, p);
    }
    h
}

// ---------------------------------------------------------------------------
// Raw kernels. The graph ops delegate here so the differentiable path and the
// plain inference path share one implementation of each formula.
// ---------------------------------------------------------------------------

/// `a[m,k] · b[k,n]`, naive loops with a fixed accumulation order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
        return Err(DrlError::ShapeMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = &a.data[i * k..(i + 1) * k];
        let or = &mut out[i * n..(i + 1) * n];
        for (p, &av) in ar.iter().enumerate() {
            let br = &b.data[p * n..(p + 1) * n];
            for j in 0..n {
                or[j] += av * br[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a[m,k] · b[n,k]ᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() {
        return Err(DrlError::ShapeMismatch {
            op: "matmul_nt",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b.data[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += ar[p] * br[p];
            }
            out[i * n + j] = s;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a[k,m]ᵀ · b[k,n]` without materializing the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.rows() != b.rows() {
        return Err(DrlError::ShapeMismatch {
            op: "matmul_tn",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let (k, m, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let ar = &a.data[p * m..(p + 1) * m];
        let br = &b.data[p * n..(p + 1) * n];
        for i in 0..m {
            let av = ar[i];
            let or = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                or[j] += av * br[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Row-wise softmax with row-max subtraction for stability. Rejects
/// non-finite input.
pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(DrlError::ShapeMismatch {
            op: "softmax_rows",
            left: a.shape.clone(),
            right: vec![],
        });
    }
    if !a.is_finite() {
        return Err(DrlError::NonFinite { op: "softmax_rows" });
    }
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = a.row_slice(i);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let or = &mut out[i * n..(i + 1) * n];
        let mut sum = 0.0;
        for j in 0..n {
            let e = (row[j] - mx).exp();
            or[j] = e;
            sum += e;
        }
        for v in or.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Cosine similarity of two equal-length vectors; errors on zero-norm
/// operands.
pub fn cosine_similarity(u: &Tensor, v: &Tensor) -> Result<f64> {
    if u.shape() != v.shape() || u.rank() != 1 {
        return Err(DrlError::ShapeMismatch {
            op: "cosine_similarity",
            left: u.shape.clone(),
            right: v.shape.clone(),
        });
    }
    let nu = u.l2_norm();
    let nv = v.l2_norm();
    if nu == 0.0 || nv == 0.0 {
        return Err(DrlError::DegenerateInput {
            op: "cosine_similarity",
            detail: "zero-norm operand".into(),
        });
    }
    let dot: f64 = u.data.iter().zip(v.data.iter()).map(|(a, b)| a * b).sum();
    Ok(dot / (nu * nv))
}

/// Checks that every row of `a` is a probability distribution: entries
/// nonnegative and summing to one within `tol`.
pub fn is_row_stochastic(a: &Tensor, tol: f64) -> bool {
    if a.rank() != 2 {
        return false;
    }
    (0..a.rows()).all(|i| {
        let row = a.row_slice(i);
        row.iter().all(|&v| v >= 0.0) && (row.iter().sum::<f64>() - 1.0).abs() <= tol
    })
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_A: f64 = 0.044715;

/// GELU, tanh form.
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Stabilized log-sum-exp of a slice.
pub fn logsumexp(v: &[f64]) -> f64 {
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = v.iter().map(|&x| (x - mx).exp()).sum();
    mx + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_passthrough() {
        let eye = Tensor::matrix(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let b = Tensor::matrix(&[vec![2.0, -1.0], vec![0.5, 3.0], vec![7.0, 0.0]]).unwrap();
        let c = matmul(&eye, &b).unwrap();
        assert!(c.bit_eq(&b));
    }

    #[test]
    fn matmul_zero_case() {
        let z = Tensor::zeros(vec![2, 3]);
        let b = Tensor::matrix(&[
            vec![1.0, 2.0, 3.0, 4.0],
            vec![5.0, 6.0, 7.0, 8.0],
            vec![9.0, 1.0, 2.0, 3.0],
        ])
        .unwrap();
        let c = matmul(&z, &b).unwrap();
        assert_eq!(c.shape(), &[2, 4]);
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_hand_computed() {
        let a = Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::matrix(&[vec![1.0], vec![1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![4, 2]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_symmetry_and_closed_form() {
        let a = Tensor::matrix(&[vec![0.0, 0.0]]).unwrap();
        let p = softmax_rows(&a).unwrap();
        assert!((p.data()[0] - 0.5).abs() < 1e-15);

        let b = Tensor::matrix(&[vec![2.0f64.ln(), 0.0]]).unwrap();
        let q = softmax_rows(&b).unwrap();
        assert!((q.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((q.data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_large_spread_is_stable() {
        let a = Tensor::matrix(&[vec![1000.0, 0.0]]).unwrap();
        let p = softmax_rows(&a).unwrap();
        assert!((p.data()[0] - 1.0).abs() < 1e-12);
        assert!(p.data()[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_nan() {
        let a = Tensor {
            shape: vec![1, 2],
            data: vec![f64::NAN, 0.0],
        };
        assert!(matches!(
            softmax_rows(&a),
            Err(DrlError::NonFinite { .. })
        ));
    }

    #[test]
    fn cosine_cases() {
        let v = Tensor::vector(vec![0.3, -1.2, 4.0]);
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-12);

        let e1 = Tensor::vector(vec![1.0, 0.0]);
        let e2 = Tensor::vector(vec![0.0, 1.0]);
        assert_eq!(cosine_similarity(&e1, &e2).unwrap(), 0.0);

        let d = Tensor::vector(vec![1.0, 1.0]);
        assert!((cosine_similarity(&e1, &d).unwrap() - 1.0 / 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_norm_errors() {
        let z = Tensor::vector(vec![0.0, 0.0]);
        let v = Tensor::vector(vec![1.0, 0.0]);
        assert!(matches!(
            cosine_similarity(&z, &v),
            Err(DrlError::DegenerateInput { .. })
        ));
    }

    #[test]
    fn new_validates_shape_product() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn checksum_sensitive_to_sign_bit() {
        let a = Tensor::vector(vec![0.0]);
        let b = Tensor::vector(vec![-0.0]);
        assert_ne!(a.bit_checksum(), b.bit_checksum());
    }
}
