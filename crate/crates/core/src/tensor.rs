//! Dense row-major `f64` arrays and the few kernels the attention layers need.
//!
//! Every reduction runs in a fixed order so that results are bit-reproducible.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::masks::AttentionMask;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 64 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(Error::shape("Tensor::new", format!("rank {} not in 1..=3", shape.len())));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {:?} needs {} elements, got {}", shape, n, data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Tensor::new"));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("Tensor::from_rows", "ragged rows"));
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    /// Entries drawn uniformly from `(-scale, scale)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], scale: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| rng.random_range(-scale..scale))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Glorot-uniform initialization for a `fan_in x fan_out` matrix.
    pub fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Tensor::uniform(&[fan_in, fan_out], s, rng)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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
        self.shape[0]
    }

    /// Trailing dimension; 1 for vectors.
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[self.shape.len() - 1]
        } else {
            1
        }
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() || shape.is_empty() || shape.len() > 3 {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }

    /// Columns `[start, start + width)` of a matrix.
    pub fn col_slice(&self, start: usize, width: usize) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        debug_assert!(start + width <= c);
        let mut out = Tensor::zeros(&[r, width]);
        for i in 0..r {
            out.data[i * width..(i + 1) * width]
                .copy_from_slice(&self.data[i * c + start..i * c + start + width]);
        }
        out
    }

    /// Writes `block` into columns starting at `start`.
    pub fn set_col_slice(&mut self, start: usize, block: &Tensor) {
        let (r, c) = (self.rows(), self.cols());
        let w = block.cols();
        debug_assert_eq!(block.rows(), r);
        for i in 0..r {
            self.data[i * c + start..i * c + start + w].copy_from_slice(block.row(i));
        }
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn hconcat(parts: &[Tensor]) -> Result<Tensor> {
        let r = parts.first().map_or(0, Tensor::rows);
        if parts.iter().any(|p| p.rows() != r) {
            return Err(Error::shape("hconcat", "row counts differ"));
        }
        let c = parts.iter().map(Tensor::cols).sum();
        let mut out = Tensor::zeros(&[r, c]);
        let mut at = 0;
        for p in parts {
            out.set_col_slice(at, p);
            at += p.cols();
        }
        Ok(out)
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// In-place `self += other`; shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows()).map(|i| self.row(i).iter().sum()).collect()
    }
}

fn check_matrix(t: &Tensor, op: &'static str) -> Result<()> {
    if t.is_matrix() {
        Ok(())
    } else {
        Err(Error::shape(op, format!("expected a matrix, got {:?}", t.shape())))
    }
}

/// `a · b`. Each output element accumulates over the inner index in ascending order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_matrix(a, "matmul")?;
    check_matrix(b, "matmul")?;
    let (r, s) = (a.rows(), a.cols());
    let c = b.cols();
    if b.rows() != s {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let orow = &mut out[i * c..(i + 1) * c];
        for k in 0..s {
            let aik = a.data[i * s + k];
            let brow = &b.data[k * c..(k + 1) * c];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    Ok(Tensor {
        shape: vec![r, c],
        data: out,
    })
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_matrix(a, "matmul_tn")?;
    check_matrix(b, "matmul_tn")?;
    let (s, r) = (a.rows(), a.cols());
    let c = b.cols();
    if b.rows() != s {
        return Err(Error::shape(
            "matmul_tn",
            format!("{:?}ᵀ x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![0.0; r * c];
    for k in 0..s {
        let brow = &b.data[k * c..(k + 1) * c];
        for i in 0..r {
            let aki = a.data[k * r + i];
            if aki == 0.0 {
                continue;
            }
            let orow = &mut out[i * c..(i + 1) * c];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aki * bkj;
            }
        }
    }
    Ok(Tensor {
        shape: vec![r, c],
        data: out,
    })
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_matrix(a, "matmul_nt")?;
    check_matrix(b, "matmul_nt")?;
    let (r, s) = (a.rows(), a.cols());
    let c = b.rows();
    if b.cols() != s {
        return Err(Error::shape(
            "matmul_nt",
            format!("{:?} x {:?}ᵀ", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let arow = &a.data[i * s..(i + 1) * s];
        for j in 0..c {
            let brow = &b.data[j * s..(j + 1) * s];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * c + j] = acc;
        }
    }
    Ok(Tensor {
        shape: vec![r, c],
        data: out,
    })
}

/// Row softmax of a square logit matrix. Forbidden entries are replaced by
/// `-inf` before normalization, so they come out as exact zeros.
pub fn masked_row_softmax(logits: &Tensor, mask: Option<&AttentionMask>) -> Result<Tensor> {
    check_matrix(logits, "masked_row_softmax")?;
    let (t, c) = (logits.rows(), logits.cols());
    if let Some(m) = mask {
        if m.size() != t || t != c {
            return Err(Error::shape(
                "masked_row_softmax",
                format!("mask of size {} for logits {:?}", m.size(), logits.shape()),
            ));
        }
    }
    let mut out = Tensor::zeros(&[t, c]);
    let mut filled = vec![0.0; c];
    for i in 0..t {
        let row = logits.row(i);
        for j in 0..c {
            let keep = mask.is_none_or(|m| m.keeps(i, j));
            filled[j] = if keep { row[j] } else { f64::NEG_INFINITY };
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("masked_row_softmax"));
        }
        let max = filled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::FullyMaskedRow { row: i });
        }
        let orow = out.row_mut(i);
        let mut z = 0.0;
        for j in 0..c {
            let e = (filled[j] - max).exp();
            orow[j] = e;
            z += e;
        }
        for v in orow.iter_mut() {
            *v /= z;
        }
    }
    Ok(out)
}

/// Vector-Jacobian product of the row softmax: given `p = softmax(s)` and
/// `dp`, returns `ds[i,j] = p[i,j] (dp[i,j] - Σ_k p[i,k] dp[i,k])`.
/// Masked entries have `p = 0` and so receive exactly zero gradient.
pub fn softmax_backward(p: &Tensor, dp: &Tensor) -> Tensor {
    let (t, c) = (p.rows(), p.cols());
    let mut ds = Tensor::zeros(&[t, c]);
    for i in 0..t {
        let pr = p.row(i);
        let dr = dp.row(i);
        let dot: f64 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
        let out = ds.row_mut(i);
        for j in 0..c {
            out[j] = pr[j] * (dr[j] - dot);
        }
    }
    ds
}

pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> f64,
{
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for idx in 0..x.len() {
        let orig = probe.data[idx];
        probe.data[idx] = orig + eps;
        let plus = f(&probe);
        probe.data[idx] = orig - eps;
        let minus = f(&probe);
        probe.data[idx] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite("finite_diff_grad"));
        }
        grad.data[idx] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{toeplitz_mask, AttentionMask};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (r, s, c) = (a.rows(), a.cols(), b.cols());
        let mut out = Tensor::zeros(&[r, c]);
        for i in 0..r {
            for j in 0..c {
                let mut acc = 0.0;
                for k in 0..s {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn identity_and_zero_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = Tensor::uniform(&[3, 5], 1.0, &mut rng);
        assert_eq!(matmul(&Tensor::identity(3), &b).unwrap(), b);
        let z = matmul(&b, &Tensor::zeros(&[5, 2])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::uniform(&[4, 3], 1.0, &mut rng);
        let b = Tensor::uniform(&[3, 2], 1.0, &mut rng);
        let got = matmul(&a, &b).unwrap();
        assert!(got.max_abs_diff(&naive_matmul(&a, &b)) < 1e-15);
        let tn = matmul_tn(&a.transpose(), &b).unwrap();
        assert!(tn.max_abs_diff(&got) < 1e-15);
        let nt = matmul_nt(&a, &b.transpose()).unwrap();
        assert!(nt.max_abs_diff(&got) < 1e-15);
    }

    #[test]
    fn matmul_rejects_bad_inner_dim() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn constructor_rejects_nan_and_bad_len() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn softmax_uniform_and_analytic() {
        let p = masked_row_softmax(&Tensor::filled(&[3, 3], 0.7), None).unwrap();
        for v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let l = Tensor::from_rows(&[vec![0.0, 2f64.ln()], vec![0.0, 0.0]]).unwrap();
        let p = masked_row_softmax(&l, None).unwrap();
        assert!((p.get(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((p.get(0, 1) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn diagonal_mask_gives_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = Tensor::uniform(&[5, 5], 3.0, &mut rng);
        let p = masked_row_softmax(&l, Some(&toeplitz_mask(5, 0))).unwrap();
        assert_eq!(p, Tensor::identity(5));
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let mut keep = vec![vec![true; 3]; 3];
        keep[1] = vec![false; 3];
        let m = AttentionMask::from_keep_unchecked(keep);
        let err = masked_row_softmax(&Tensor::zeros(&[3, 3]), Some(&m)).unwrap_err();
        assert!(matches!(err, Error::FullyMaskedRow { row: 1 }));
    }

    #[test]
    fn fd_grad_simple_cases() {
        let x = Tensor::vector(vec![0.3, -1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| t.sum(), &x, DEFAULT_FD_EPS).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
        let x = Tensor::vector(vec![3.0]).unwrap();
        let g = finite_diff_grad(|t| t.data()[0] * t.data()[0], &x, DEFAULT_FD_EPS).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn fd_grad_reports_non_finite() {
        let x = Tensor::vector(vec![0.0]).unwrap();
        assert!(finite_diff_grad(|t| 1.0 / t.data()[0].abs().min(0.0), &x, 1e-5).is_err());
    }

    // Analytic Jacobian of softmax: J[j,k] = p_j (δ_jk - p_k). For f = Σ p², df/ds_k
    // = Σ_j 2 p_j J[j,k] = 2 p_k (p_k - Σ_j p_j²).
    #[test]
    fn fd_grad_matches_softmax_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = Tensor::uniform(&[4, 4], 2.0, &mut rng);
        let mask = toeplitz_mask(4, 1);
        let f = |t: &Tensor| {
            let p = masked_row_softmax(t, Some(&mask)).unwrap();
            p.data().iter().map(|v| v * v).sum::<f64>()
        };
        let fd = finite_diff_grad(f, &s, DEFAULT_FD_EPS).unwrap();
        let p = masked_row_softmax(&s, Some(&mask)).unwrap();
        let mut analytic = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            let sq: f64 = p.row(i).iter().map(|v| v * v).sum();
            for k in 0..4 {
                let pk = p.get(i, k);
                analytic.set(i, k, 2.0 * pk * (pk - sq));
            }
        }
        for (a, b) in fd.data().iter().zip(analytic.data()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-3), "{a} vs {b}");
        }
        // Same thing through softmax_backward.
        let via_vjp = softmax_backward(&p, &p.scale(2.0));
        assert!(via_vjp.max_abs_diff(&analytic) < 1e-14);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!((sigmoid(800.0) - 1.0).abs() < 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn matmul_associative(seed in any::<u64>(), r in 1usize..6, s in 1usize..6, u in 1usize..6, c in 1usize..6) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = Tensor::uniform(&[r, s], 1.0, &mut rng);
                let b = Tensor::uniform(&[s, u], 1.0, &mut rng);
                let d = Tensor::uniform(&[u, c], 1.0, &mut rng);
                let left = matmul(&matmul(&a, &b).unwrap(), &d).unwrap();
                let right = matmul(&a, &matmul(&b, &d).unwrap()).unwrap();
                for (x, y) in left.data().iter().zip(right.data()) {
                    prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1.0));
                }
            }

            #[test]
            fn softmax_rows_normalized_and_shift_invariant(seed in any::<u64>(), t in 1usize..10, w in 0usize..4) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let l = Tensor::uniform(&[t, t], 5.0, &mut rng);
                let mask = toeplitz_mask(t, w);
                let p = masked_row_softmax(&l, Some(&mask)).unwrap();
                for s in p.row_sums() {
                    prop_assert!((s - 1.0).abs() < 1e-9);
                }
                let shifted = masked_row_softmax(&l.map(|v| v + 100.0), Some(&mask)).unwrap();
                prop_assert!(p.max_abs_diff(&shifted) < 1e-9);
                for i in 0..t {
                    for j in 0..t {
                        if !mask.keeps(i, j) {
                            prop_assert_eq!(p.get(i, j), 0.0);
                        }
                    }
                }
            }
        }
    }
}
