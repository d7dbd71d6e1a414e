//! Dense row-major matrices and the handful of kernels the model needs.
//!
//! Everything runs in `f64`. Matrix products go through `matrixmultiply`,
//! which is single-threaded and deterministic for a given machine.

use rand::Rng;

use crate::error::{GuimError, Result};

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
            return Err(GuimError::LengthMismatch {
                left: data.len(),
                right: rows * cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(GuimError::LengthMismatch {
                    left: r.len(),
                    right: cols,
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Uniform entries in `[-scale, scale)`.
    pub fn uniform<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-scale..scale))
            .collect();
        Self { rows, cols, data }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
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
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Copies the listed rows into a new matrix.
    pub fn gather_rows(&self, rows: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(rows.len(), self.cols);
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.row(r));
        }
        out
    }

    /// `self @ rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.rows, "matmul inner dimension");
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        gemm(
            self.rows, self.cols, rhs.cols, 1.0, &self.data, false, &rhs.data, false, 0.0,
            &mut out.data,
        );
        out
    }

    /// Adds `bias` (a single row) to every row.
    pub fn add_row_bias(&mut self, bias: &[f64]) {
        assert_eq!(bias.len(), self.cols);
        for r in 0..self.rows {
            add_assign(self.row_mut(r), bias);
        }
    }
}

/// `c = beta * c + alpha * op(a) @ op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
///
/// `a_t` / `b_t` mark operands stored transposed (row-major `k x m` / `n x k`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if a_t { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_t { (1, k) } else { (n, 1) };
    gemm_strided(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, n, 1);
}

/// Strided product over sub-views; every view must fit inside its slice.
#[allow(clippy::too_many_arguments)]
pub fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * rsc + j * csc] *= beta;
            }
        }
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: a view out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: b view out of bounds");
    assert!((m - 1) * rsc + (n - 1) * csc < c.len(), "gemm: c view out of bounds");
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn add_assign(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

#[inline]
pub fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += alpha * s);
}

/// Sums the rows of `m x n` `src` into `dst`.
pub fn add_column_sums(dst: &mut [f64], src: &[f64], n: usize) {
    for row in src.chunks_exact(n) {
        add_assign(dst, row);
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x * Phi(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// In-place softmax over `scores`, ignoring entries whose `valid` flag is false
/// (they get probability exactly 0).
pub fn masked_softmax(scores: &mut [f64], valid: Option<&[bool]>) {
    let ok = |i: usize| valid.map_or(true, |v| v[i]);
    let max = scores
        .iter()
        .enumerate()
        .filter(|(i, _)| ok(*i))
        .map(|(_, s)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (i, s) in scores.iter_mut().enumerate() {
        if ok(i) {
            *s = (*s - max).exp();
            sum += *s;
        } else {
            *s = 0.0;
        }
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Per-row statistics kept for the layer-norm backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub xhat: Matrix,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm(x: &Matrix, gamma: &[f64], beta: &[f64]) -> (Matrix, LayerNormCache) {
    let n = x.cols();
    let mut xhat = Matrix::zeros(x.rows(), n);
    let mut out = Matrix::zeros(x.rows(), n);
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(r);
        for (h, v) in xh.iter_mut().zip(row) {
            *h = (v - mean) * is;
        }
        let o = out.row_mut(r);
        for i in 0..n {
            o[i] = gamma[i] * xhat.get(r, i) + beta[i];
        }
    }
    (out, LayerNormCache { xhat, inv_std })
}

/// Returns `dx`; accumulates into `dgamma`, `dbeta`.
pub fn layer_norm_backward(
    dy: &Matrix,
    cache: &LayerNormCache,
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Matrix {
    let n = dy.cols();
    let mut dx = Matrix::zeros(dy.rows(), n);
    let mut dxhat = vec![0.0; n];
    for r in 0..dy.rows() {
        let g = dy.row(r);
        let xh = cache.xhat.row(r);
        for i in 0..n {
            dgamma[i] += g[i] * xh[i];
            dbeta[i] += g[i];
            dxhat[i] = g[i] * gamma[i];
        }
        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
        let mean_dx = dot(&dxhat, xh) / n as f64;
        let is = cache.inv_std[r];
        let out = dx.row_mut(r);
        for i in 0..n {
            out[i] = is * (dxhat[i] - mean_d - xh[i] * mean_dx);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn phi_cdf_reference(x: f64) -> f64 {
        // Trapezoid integration of the standard normal density from -12.
        let steps = 200_000;
        let lo = -12.0;
        let h = (x - lo) / steps as f64;
        let pdf = |t: f64| FRAC_1_SQRT_2PI * (-0.5 * t * t).exp();
        let mut acc = 0.5 * (pdf(lo) + pdf(x));
        for i in 1..steps {
            acc += pdf(lo + i as f64 * h);
        }
        acc * h
    }

    #[test]
    fn gelu_matches_gaussian_cdf_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let x: f64 = rng.gen_range(-6.0..6.0);
            let want = x * phi_cdf_reference(x);
            assert!((gelu(x) - want).abs() < 1e-6, "x={x}");
        }
        assert_eq!(gelu(0.0), 0.0);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for i in -40..40 {
            let x = i as f64 * 0.15 + 0.01;
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn gemm_transposed_variants_agree_with_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Matrix::uniform(3, 4, 1.0, &mut rng);
        let b = Matrix::uniform(4, 5, 1.0, &mut rng);
        let c = a.matmul(&b);
        for i in 0..3 {
            for j in 0..5 {
                let want: f64 = (0..4).map(|k| a.get(i, k) * b.get(k, j)).sum();
                assert!((c.get(i, j) - want).abs() < 1e-12);
            }
        }
        // a^T stored: transpose a into 4x3.
        let mut at = Matrix::zeros(4, 3);
        for i in 0..3 {
            for k in 0..4 {
                at.set(k, i, a.get(i, k));
            }
        }
        let mut c2 = Matrix::zeros(3, 5);
        gemm(3, 4, 5, 1.0, at.as_slice(), true, b.as_slice(), false, 0.0, c2.as_mut_slice());
        for (x, y) in c.as_slice().iter().zip(c2.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_zeroes_invalid_entries() {
        let mut s = vec![1.0, 2.0, 3.0];
        masked_softmax(&mut s, Some(&[true, false, true]));
        assert_eq!(s[1], 0.0);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_backward_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Matrix::uniform(2, 5, 1.0, &mut rng);
        let gamma: Vec<f64> = (0..5).map(|i| 1.0 + 0.1 * i as f64).collect();
        let beta = vec![0.3; 5];
        let w = Matrix::uniform(2, 5, 1.0, &mut rng);
        let f = |x: &Matrix| {
            let (y, _) = layer_norm(x, &gamma, &beta);
            dot(y.as_slice(), w.as_slice())
        };
        let (_, cache) = layer_norm(&x, &gamma, &beta);
        let mut dg = vec![0.0; 5];
        let mut db = vec![0.0; 5];
        let dx = layer_norm_backward(&w, &cache, &gamma, &mut dg, &mut db);
        for idx in 0..10 {
            let mut xp = x.clone();
            xp.as_mut_slice()[idx] += 1e-6;
            let mut xm = x.clone();
            xm.as_mut_slice()[idx] -= 1e-6;
            let fd = (f(&xp) - f(&xm)) / 2e-6;
            assert!((dx.as_slice()[idx] - fd).abs() < 1e-7);
        }
    }
}
