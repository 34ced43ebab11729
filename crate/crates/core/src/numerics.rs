//! Dense matrices, softmax / cross-entropy with analytic gradients, L2
//! normalization and a central-difference gradient checker.
//!
//! Everything here is 64-bit. Matrix products go through `matrixmultiply`,
//! which is single-threaded and therefore bit-reproducible.

use crate::error::{invalid, Error, Result};

/// Norms at or below this are treated as zero by [`l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

/// Default central-difference step for [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(format!(
                "matrix data length {} != {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(invalid(format!("row {i} has length {} != {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
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

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn add_scaled(&mut self, other: &Matrix, s: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(invalid(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(invalid(format!(
                "matmul {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(
            self.rows,
            self.cols,
            other.cols,
            (&self.data, self.cols as isize, 1),
            (&other.data, other.cols as isize, 1),
            &mut out,
        );
        Ok(out)
    }

    /// `selfᵀ · other`
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(invalid(format!(
                "matmul_tn {:?}ᵀ x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        gemm(
            self.cols,
            self.rows,
            other.cols,
            (&self.data, 1, self.cols as isize),
            (&other.data, other.cols as isize, 1),
            &mut out,
        );
        Ok(out)
    }

    /// `self · otherᵀ`
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(invalid(format!(
                "matmul_nt {:?} x {:?}ᵀ",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        gemm(
            self.rows,
            self.cols,
            other.rows,
            (&self.data, self.cols as isize, 1),
            (&other.data, 1, other.cols as isize),
            &mut out,
        );
        Ok(out)
    }
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    out: &mut Matrix,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (a, rsa, csa) = a;
    let (b, rsb, csb) = b;
    debug_assert!(out.data.len() == m * n);
    // SAFETY: strides describe in-bounds views of `a` (m x k), `b` (k x n)
    // and `out` (m x n); the shape checks in the callers guarantee this.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `ln Σ exp(v)`, computed as `max + ln_1p(Σ_{j≠argmax} exp(v_j − max))`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NEG_INFINITY;
    }
    let (max, rest) = lse_parts(v);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + rest.ln_1p()
}

/// `(max, Σ_{j≠argmax} exp(v_j − max))`
fn lse_parts(v: &[f64]) -> (f64, f64) {
    let (arg, max) = argmax(v);
    let rest = v
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != arg)
        .map(|(_, x)| (x - max).exp())
        .sum();
    (max, rest)
}

/// `ln(exp(a) + exp(b))`.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

fn argmax(v: &[f64]) -> (usize, f64) {
    let mut best = (0, v[0]);
    for (j, &x) in v.iter().enumerate().skip(1) {
        if x > best.1 {
            best = (j, x);
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(invalid("softmax of an empty vector"));
    }
    let (_, max) = argmax(logits);
    let mut out: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    Ok(out)
}

pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(invalid("log_softmax of an empty vector"));
    }
    let lse = log_sum_exp(logits);
    Ok(logits.iter().map(|x| x - lse).collect())
}

fn check_label(logits: &[f64], label: usize) -> Result<()> {
    if logits.is_empty() {
        return Err(invalid("cross-entropy over zero classes"));
    }
    if label >= logits.len() {
        return Err(invalid(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(())
}

/// `−ln softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    check_label(logits, label)?;
    let (max, rest) = lse_parts(logits);
    Ok(((max - logits[label]) + rest.ln_1p()).max(0.0))
}

/// `softmax(logits) − onehot(label)`.
pub fn ce_gradient(logits: &[f64], label: usize) -> Result<Vec<f64>> {
    check_label(logits, label)?;
    let mut g = softmax(logits)?;
    g[label] -= 1.0;
    Ok(g)
}

/// Cross-entropy value and gradient in one pass.
pub fn cross_entropy_with_grad(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    let value = cross_entropy(logits, label)?;
    let grad = ce_gradient(logits, label)?;
    Ok((value, grad))
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > NORM_EPS) {
        return Err(Error::DegenerateInput(format!(
            "cannot normalize vector with norm {n:e}"
        )));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Vector-Jacobian product of `v ↦ v/‖v‖` at `v`: `(g − y(y·g))/‖v‖`.
pub fn l2_normalize_backward(v: &[f64], grad_out: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > NORM_EPS) {
        return Err(Error::DegenerateInput(format!(
            "cannot differentiate normalization at norm {n:e}"
        )));
    }
    let y: Vec<f64> = v.iter().map(|x| x / n).collect();
    let yg = dot(&y, grad_out);
    Ok(grad_out
        .iter()
        .zip(&y)
        .map(|(g, yi)| (g - yi * yg) / n)
        .collect())
}

/// Maximum relative error between `analytic` and a central-difference
/// estimate of the gradient of `f` at `point`, step [`GRAD_CHECK_STEP`].
pub fn grad_check(
    f: impl FnMut(&[f64]) -> f64,
    point: &[f64],
    analytic: &[f64],
) -> Result<f64> {
    grad_check_with_step(f, point, analytic, GRAD_CHECK_STEP)
}

/// Relative error per coordinate is `|a − n| / max(1, |a|, |n|)`.
pub fn grad_check_with_step(
    mut f: impl FnMut(&[f64]) -> f64,
    point: &[f64],
    analytic: &[f64],
    step: f64,
) -> Result<f64> {
    if point.len() != analytic.len() {
        return Err(invalid(format!(
            "point has {} coordinates, gradient has {}",
            point.len(),
            analytic.len()
        )));
    }
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let up = f(&x);
        x[i] = orig - step;
        let down = f(&x);
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite { coordinate: i });
        }
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[i];
        let denom = 1.0f64.max(a.abs()).max(numeric.abs());
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        assert!(p.iter().all(|&x| close(x, 1.0 / 3.0, 1e-15)));

        let p = softmax(&[1f64.ln(), 2f64.ln(), 1f64.ln()]).unwrap();
        assert!(close(p[0], 0.25, 1e-15) && close(p[1], 0.5, 1e-15) && close(p[2], 0.25, 1e-15));

        let p = softmax(&[1000.0, 1000.0]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);

        assert!(matches!(softmax(&[]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        assert!(close(cross_entropy(&[0.0, 0.0], 0).unwrap(), 2f64.ln(), 1e-15));
        let exact = 2.0 * (-50f64).exp();
        let v = cross_entropy(&[50.0, 0.0, 0.0], 0).unwrap();
        assert!((v - exact).abs() < 1e-12 * exact);
        assert!(matches!(
            cross_entropy(&[0.0, 1.0], 2),
            Err(Error::InvalidArgument(_))
        ));
    }

    // Oracle: naive exp/sum/log with compensated summation.
    fn naive_ce(logits: &[f64], label: usize) -> f64 {
        let mut sum = 0.0f64;
        let mut comp = 0.0f64;
        for &x in logits {
            let y = x.exp() - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        -(logits[label].exp() / sum).ln()
    }

    #[test]
    fn cross_entropy_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let logits: Vec<f64> = (0..5).map(|_| rng.random_range(-4.0..4.0)).collect();
            let label = rng.random_range(0..5);
            let v = cross_entropy(&logits, label).unwrap();
            assert!(close(v, naive_ce(&logits, label), 1e-12));
        }
    }

    #[test]
    fn ce_gradient_examples() {
        let g = ce_gradient(&[0.0, 0.0, 0.0], 0).unwrap();
        assert!(close(g[0], -2.0 / 3.0, 1e-15));
        assert!(close(g[1], 1.0 / 3.0, 1e-15) && close(g[2], 1.0 / 3.0, 1e-15));

        let g = ce_gradient(&[60.0, 0.0, 0.0], 0).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-10));
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let k = rng.random_range(2..9);
            let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
            let label = rng.random_range(0..k);
            let g = ce_gradient(&logits, label).unwrap();
            let err = grad_check_with_step(
                |x| cross_entropy(x, label).unwrap(),
                &logits,
                &g,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-6, "rel err {err}");
        }
    }

    #[test]
    fn l2_normalize_examples() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        let u = l2_normalize(&[0.6, 0.8]).unwrap();
        assert!(close(u[0], 0.6, 1e-15) && close(u[1], 0.8, 1e-15));
        assert!(matches!(
            l2_normalize(&[0.0, 1e-13]),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn l2_normalize_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let d = rng.random_range(2..10);
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let probe: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let analytic = l2_normalize_backward(&v, &probe).unwrap();
            let err = grad_check_with_step(
                |x| dot(&l2_normalize(x).unwrap(), &probe),
                &v,
                &analytic,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-6, "rel err {err}");
        }
    }

    #[test]
    fn grad_check_examples() {
        let err = grad_check(|x| x[0] * x[0], &[3.0], &[6.0]).unwrap();
        assert!(err < 1e-9);
        let err = grad_check(|_| 7.0, &[1.0, 2.0], &[0.0, 0.0]).unwrap();
        assert_eq!(err, 0.0);
        let e = grad_check(|x| if x[1] > 2.0 { f64::NAN } else { 0.0 }, &[0.0, 2.0], &[0.0, 0.0]);
        assert!(matches!(e, Err(Error::NonFinite { coordinate: 1 })));
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Matrix::from_fn(5, 7, |_, _| rng.random_range(-1.0..1.0));
        let b = Matrix::from_fn(7, 3, |_, _| rng.random_range(-1.0..1.0));
        let naive = Matrix::from_fn(5, 3, |r, c| (0..7).map(|k| a.get(r, k) * b.get(k, c)).sum());
        let ab = a.matmul(&b).unwrap();
        let atb = a.transpose().matmul_tn(&b).unwrap();
        let abt = a.matmul_nt(&b.transpose()).unwrap();
        for m in [ab, atb, abt] {
            for (x, y) in m.as_slice().iter().zip(naive.as_slice()) {
                assert!(close(*x, *y, 1e-13));
            }
        }
        assert!(a.matmul(&a).is_err());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(v in prop::collection::vec(-300.0f64..300.0, 1..512)) {
            let p = softmax(&v).unwrap();
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&x| x >= 0.0 && x <= 1.0));
        }

        #[test]
        fn softmax_shift_invariant(v in prop::collection::vec(-50.0f64..50.0, 1..64), c in -500.0f64..500.0) {
            let p = softmax(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn ce_gradient_sums_to_zero(v in prop::collection::vec(-30.0f64..30.0, 1..64), l in 0usize..64) {
            let label = l % v.len();
            let g = ce_gradient(&v, label).unwrap();
            prop_assert!(g.iter().sum::<f64>().abs() < 1e-12);
        }
    }
}
