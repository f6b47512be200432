//! Token importance scoring, per-block output caching, staleness tracking,
//! and top-k selection under a timestep budget.
//!
//! Score per token: `s_total = w_alpha * lse * delta + w_beta * e^n`, where
//! `delta` is the value change between the token's last two computed
//! timesteps and `n` counts consecutive non-selections.

use serde::{Deserialize, Serialize};

use crate::attention::SelectionMask;
use crate::error::{AstraeaError, Result};
use crate::numerics::Matrix;

/// How the per-token value difference is reduced over channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaMetric {
    /// Mean absolute channel-wise difference (default).
    #[default]
    MeanAbs,
    /// Mean squared channel-wise difference.
    MeanSquared,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub w_alpha: f64,
    pub w_beta: f64,
    pub delta_metric: DeltaMetric,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            w_alpha: 1.0,
            w_beta: 1.0,
            delta_metric: DeltaMetric::MeanAbs,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.w_alpha < 0.0 || self.w_beta < 0.0 {
            return Err(AstraeaError::config("score weights must be >= 0"));
        }
        if self.w_alpha == 0.0 && self.w_beta == 0.0 {
            return Err(AstraeaError::config("score weights cannot both be 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenScore {
    pub s_sig: f64,
    pub s_penalty: f64,
    pub s_total: f64,
}

/// Per-block store of the last computed outputs plus the bookkeeping needed
/// for scoring: last sum-exp scores, the last two computed token values,
/// and consecutive-skip counters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockCache {
    n_tokens: usize,
    channels: usize,
    last_output: Matrix,
    last_lse: Vec<f64>,
    curr_value: Matrix,
    prev_value: Matrix,
    n_skip: Vec<u32>,
    valid: Vec<bool>,
    computed_count: Vec<u32>,
}

impl BlockCache {
    pub fn new(n_tokens: usize, channels: usize) -> Self {
        BlockCache {
            n_tokens,
            channels,
            last_output: Matrix::zeros(n_tokens, channels),
            last_lse: vec![0.0; n_tokens],
            curr_value: Matrix::zeros(n_tokens, channels),
            prev_value: Matrix::zeros(n_tokens, channels),
            n_skip: vec![0; n_tokens],
            valid: vec![false; n_tokens],
            computed_count: vec![0; n_tokens],
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn skip_count(&self, token: usize) -> u32 {
        self.n_skip[token]
    }

    pub fn is_valid(&self, token: usize) -> bool {
        self.valid[token]
    }

    pub fn last_lse(&self, token: usize) -> f64 {
        self.last_lse[token]
    }

    /// Value change of a token between its last two computed timesteps.
    /// Tokens with fewer than two computed timesteps return +inf, which
    /// forces selection until history exists.
    pub fn compute_delta(&self, token: usize, metric: DeltaMetric) -> f64 {
        if self.computed_count[token] < 2 {
            return f64::INFINITY;
        }
        let curr = self.curr_value.row(token);
        let prev = self.prev_value.row(token);
        let sum: f64 = curr
            .iter()
            .zip(prev.iter())
            .map(|(c, p)| match metric {
                DeltaMetric::MeanAbs => (c - p).abs(),
                DeltaMetric::MeanSquared => (c - p) * (c - p),
            })
            .sum();
        sum / self.channels as f64
    }

    /// Score every token: significance = lse * delta, penalty = e^n.
    pub fn score_tokens(&self, cfg: &SelectionConfig) -> Vec<TokenScore> {
        (0..self.n_tokens)
            .map(|i| {
                let delta = self.compute_delta(i, cfg.delta_metric);
                let s_sig = if delta.is_infinite() {
                    f64::INFINITY
                } else {
                    self.last_lse[i] * delta
                };
                let s_penalty = (self.n_skip[i] as f64).exp();
                let s_total = if s_sig.is_infinite() && cfg.w_alpha > 0.0 {
                    f64::INFINITY
                } else {
                    cfg.w_alpha * s_sig + cfg.w_beta * s_penalty
                };
                TokenScore {
                    s_sig,
                    s_penalty,
                    s_total,
                }
            })
            .collect()
    }

    /// Record the newly computed rows and bump skip counters for the rest.
    pub fn update(
        &mut self,
        mask: &SelectionMask,
        new_outputs: &Matrix,
        new_lse: &[f64],
        new_token_values: &Matrix,
    ) -> Result<()> {
        if new_outputs.rows() != mask.len()
            || new_lse.len() != mask.len()
            || new_token_values.rows() != mask.len()
        {
            return Err(AstraeaError::shape(
                "cache update rows must align with mask",
            ));
        }
        if new_outputs.cols() != self.channels || new_token_values.cols() != self.channels {
            return Err(AstraeaError::shape("cache update channel mismatch"));
        }
        let mut iter = mask.indices().iter().copied().enumerate().peekable();
        for token in 0..self.n_tokens {
            if iter.peek().map(|&(_, t)| t) == Some(token) {
                let (j, _) = iter.next().unwrap();
                self.last_output
                    .row_mut(token)
                    .copy_from_slice(new_outputs.row(j));
                self.last_lse[token] = new_lse[j];
                let shifted: Vec<f64> = self.curr_value.row(token).to_vec();
                self.prev_value.row_mut(token).copy_from_slice(&shifted);
                self.curr_value
                    .row_mut(token)
                    .copy_from_slice(new_token_values.row(j));
                self.n_skip[token] = 0;
                self.valid[token] = true;
                self.computed_count[token] = self.computed_count[token].saturating_add(1);
            } else {
                self.n_skip[token] = self.n_skip[token].saturating_add(1);
            }
        }
        Ok(())
    }

    /// Stored last outputs for the given tokens, verbatim.
    pub fn read_cached(&self, tokens: &[usize]) -> Result<Matrix> {
        for &t in tokens {
            if t >= self.n_tokens {
                return Err(AstraeaError::domain(format!("token {t} out of range")));
            }
            if !self.valid[t] {
                return Err(AstraeaError::state(format!(
                    "token {t} queried before any computed result exists"
                )));
            }
        }
        Ok(self.last_output.select_rows(tokens))
    }

    /// Single cached row (token must be valid).
    pub fn cached_row(&self, token: usize) -> Result<&[f64]> {
        if !self.valid[token] {
            return Err(AstraeaError::state(format!(
                "token {token} queried before any computed result exists"
            )));
        }
        Ok(self.last_output.row(token))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("cache serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| AstraeaError::parse(format!("cache json: {e}")))
    }
}

/// Top-k selection under a fractional budget: k = max(1, round(theta * N))
/// for theta > 0, k = 0 only at theta = 0.  Ties break toward lower index.
pub fn select_top(scores: &[TokenScore], theta: f64, n_tokens: usize) -> Result<SelectionMask> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(AstraeaError::domain(format!("theta {theta} outside [0,1]")));
    }
    let k = if theta == 0.0 {
        0
    } else {
        ((theta * n_tokens as f64).round() as usize).max(1)
    };
    let k = k.min(n_tokens);
    let mut order: Vec<usize> = (0..scores.len().min(n_tokens)).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .s_total
            .total_cmp(&scores[a].s_total)
            .then(a.cmp(&b))
    });
    let mut picked: Vec<usize> = order.into_iter().take(k).collect();
    picked.sort_unstable();
    SelectionMask::new(picked, n_tokens)
}
