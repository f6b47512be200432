//! Dense linear algebra and randomness substrate.
//!
//! Everything here is deterministic: matmul accumulates row-major,
//! left-to-right, and the generator is a fixed splitmix64 recurrence,
//! so results are bit-stable across platforms.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{AstraeaError, Result};

thread_local! {
    static MATMUL_FLOPS: Cell<u128> = const { Cell::new(0) };
}

/// Multiply-add accounting for matmuls on this thread, counted as
/// `2 * m * n * k` per `m x k . k x n` product.  Used as the live oracle
/// for the analytic FLOPs model.
pub mod flop_counter {
    use super::MATMUL_FLOPS;

    pub fn reset() {
        MATMUL_FLOPS.with(|c| c.set(0));
    }

    pub fn total() -> u128 {
        MATMUL_FLOPS.with(|c| c.get())
    }

    pub(crate) fn record(m: usize, n: usize, k: usize) {
        MATMUL_FLOPS.with(|c| c.set(c.get() + 2 * (m as u128) * (n as u128) * (k as u128)));
    }
}

/// Row-major matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Build from row-major data. All entries must be finite.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(AstraeaError::shape(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AstraeaError::domain("matrix entries must be finite"));
        }
        Ok(Matrix { rows, cols, data })
    }

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

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Stack the given rows of `self` into a new matrix, in the order given.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
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

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Standard matrix product with deterministic accumulation order
/// (row-major output, inner sum left-to-right over `a`'s columns).
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(AstraeaError::shape(format!(
            "matmul {}x{} . {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    flop_counter::record(a.rows, b.cols, a.cols);
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &av) in arow.iter().enumerate() {
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// Row-wise softmax plus the per-row sum-exp score (the LSE byproduct).
///
/// Each row is shifted by its max before exponentiation; the score is kept
/// as `max + ln(sum)` internally and exposed as `exp` of that, i.e. the raw
/// sum of exponentials of the row.
pub fn softmax_rows_with_lse(a: &Matrix) -> (Matrix, Vec<f64>) {
    let mut probs = Matrix::zeros(a.rows, a.cols);
    let mut scores = Vec::with_capacity(a.rows);
    for i in 0..a.rows {
        let row = a.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let out = probs.row_mut(i);
        let mut sum = 0.0;
        for (o, &v) in out.iter_mut().zip(row.iter()) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
        scores.push((max + sum.ln()).exp());
    }
    (probs, scores)
}

const SPLITMIX64_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Seeded 64-bit generator (splitmix64).  Same seed, same stream, on every
/// platform.  Single-owner mutable state; give each thread its own.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// splitmix64 step: state += gamma; finalize with two xor-shift-multiplies.
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(SPLITMIX64_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        debug_assert!(lo <= hi);
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform index in [0, n).
    pub fn choice(&mut self, n: usize) -> Result<usize> {
        if n == 0 {
            return Err(AstraeaError::domain("choice over empty range"));
        }
        Ok((self.next_u64() % n as u64) as usize)
    }

    /// Standard normal via Box-Muller (two uniform draws per sample).
    pub fn gauss(&mut self) -> f64 {
        let mut u1 = self.next_f64();
        while u1 == 0.0 {
            u1 = self.next_f64();
        }
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
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
    fn matmul_identity() {
        let m = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let i = Matrix::identity(2);
        assert_eq!(matmul(&i, &m).unwrap(), m);
        assert_eq!(matmul(&m, &i).unwrap(), m);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Matrix::from_vec(2, 1, vec![0.0, 1.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_against_naive_oracle() {
        let mut rng = Rng::new(7);
        let a = Matrix::from_vec(5, 7, (0..35).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let b = Matrix::from_vec(7, 3, (0..21).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let got = matmul(&a, &b).unwrap();
        let want = naive_matmul(&a, &b);
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn softmax_uniform_row() {
        let a = Matrix::zeros(1, 4);
        let (p, s) = softmax_rows_with_lse(&a);
        for &v in p.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        assert!((s[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_ln3_row() {
        let a = Matrix::from_vec(1, 2, vec![0.0, 3.0f64.ln()]).unwrap();
        let (p, s) = softmax_rows_with_lse(&a);
        assert!((p.get(0, 0) - 0.25).abs() < 1e-12);
        assert!((p.get(0, 1) - 0.75).abs() < 1e-12);
        assert!((s[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_large_values_no_overflow() {
        let a = Matrix::from_vec(1, 2, vec![1000.0, 1000.0]).unwrap();
        let (p, _) = softmax_rows_with_lse(&a);
        assert!((p.get(0, 0) - 0.5).abs() < 1e-12);
        assert!((p.get(0, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = Rng::new(3);
        let a =
            Matrix::from_vec(6, 9, (0..54).map(|_| rng.uniform(-50.0, 50.0)).collect()).unwrap();
        let (p, s) = softmax_rows_with_lse(&a);
        for (i, &score) in s.iter().enumerate() {
            let sum: f64 = p.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            let brute: f64 = a.row(i).iter().map(|v| v.exp()).sum();
            assert!((score - brute).abs() / brute < 1e-9);
            assert!(score > 0.0);
        }
    }

    #[test]
    fn rng_determinism() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn rng_choice_singleton_and_empty() {
        let mut r = Rng::new(1);
        assert_eq!(r.choice(1).unwrap(), 0);
        assert!(r.choice(0).is_err());
    }

    #[test]
    fn rng_gauss_mean() {
        let mut r = Rng::new(42);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| r.gauss()).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn flop_counter_counts_matmul() {
        flop_counter::reset();
        let a = Matrix::zeros(3, 4);
        let b = Matrix::zeros(4, 5);
        matmul(&a, &b).unwrap();
        assert_eq!(flop_counter::total(), 2 * 3 * 5 * 4);
    }
}
