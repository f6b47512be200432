//! Grid comparison metrics: MSE, PSNR, Spearman rank correlation.

use crate::error::{AstraeaError, Result};
use crate::numerics::Matrix;

/// Mean of squared elementwise differences.
pub fn mse(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(AstraeaError::shape(format!(
            "mse over {}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let n = (a.rows() * a.cols()) as f64;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / n)
}

/// 10 * log10(peak^2 / mse); +inf when mse is 0.
pub fn psnr(mse_value: f64, peak: f64) -> Result<f64> {
    if peak <= 0.0 {
        return Err(AstraeaError::domain("psnr peak must be > 0"));
    }
    if mse_value < 0.0 {
        return Err(AstraeaError::domain("mse must be >= 0"));
    }
    if mse_value == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse_value).log10())
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // average rank over ties
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (tie-aware, via Pearson over ranks).
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(AstraeaError::domain(
            "spearman needs two equal-length series of length >= 2",
        ));
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..xs.len() {
        let dx = rx[i] - mx;
        let dy = ry[i] - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(AstraeaError::domain("spearman undefined for constant series"));
    }
    Ok(cov / (vx * vy).sqrt())
}
