//! Analytic FLOP model for the vDiT operators, plus budget-scaled costs
//! for selective execution.
//!
//! Counts are exact integers.  The closed forms are checked against the
//! instrumented multiply-add counter in `numerics::flop_counter`, which
//! records 2mnk per m x k . k x n matmul.  Softmax cost is reported but
//! never folded into totals.

use serde::{Deserialize, Serialize};

use crate::diffusion::{ModelConfig, RunMode};
use crate::error::{AstraeaError, Result};
use crate::schedule::Schedule;

#[derive(Debug, Clone, Copy)]
pub struct FlopsConfig {
    pub batch: u128,
    pub n_tokens: u128,
    pub n_query: u128,
    pub n_context: u128,
    pub embed_dim: u128,
    pub n_heads: u128,
}

impl FlopsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0
            || self.n_tokens == 0
            || self.n_query == 0
            || self.n_context == 0
            || self.embed_dim == 0
            || self.n_heads == 0
        {
            return Err(AstraeaError::config("flops config fields must be >= 1"));
        }
        if !self.embed_dim.is_multiple_of(self.n_heads) {
            return Err(AstraeaError::config(
                "embed_dim must be divisible by n_heads",
            ));
        }
        Ok(())
    }
}

/// Per-operator FLOP counts.  `total` sums every field except `softmax`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub qkv_proj: u128,
    pub attn_scores: u128,
    pub softmax: u128,
    pub attn_output: u128,
    pub out_proj: u128,
    pub cross_attn: u128,
    pub mlp: u128,
    pub total: u128,
}

impl FlopsReport {
    fn finish(mut self) -> Self {
        self.total =
            self.qkv_proj + self.attn_scores + self.attn_output + self.out_proj + self.cross_attn + self.mlp;
        self
    }

    pub fn add(&mut self, other: &FlopsReport) {
        self.qkv_proj += other.qkv_proj;
        self.attn_scores += other.attn_scores;
        self.softmax += other.softmax;
        self.attn_output += other.attn_output;
        self.out_proj += other.out_proj;
        self.cross_attn += other.cross_attn;
        self.mlp += other.mlp;
        self.total += other.total;
    }
}

/// Dense self-attention: total closes to 8BNH^2 + 4BN^2H.
pub fn flops_self_attention(cfg: &FlopsConfig) -> Result<FlopsReport> {
    cfg.validate()?;
    let (b, n, h) = (cfg.batch, cfg.n_tokens, cfg.embed_dim);
    let d = h / cfg.n_heads;
    Ok(FlopsReport {
        qkv_proj: 6 * b * n * h * h,
        attn_scores: 2 * b * cfg.n_heads * n * n * d,
        softmax: b * cfg.n_heads * n * n,
        attn_output: 2 * b * cfg.n_heads * n * n * d,
        out_proj: 2 * b * n * h * h,
        cross_attn: 0,
        mlp: 0,
        total: 0,
    }
    .finish())
}

/// Cross-attention closed form: 4BN_qH^2 + 4BN_kvH^2 + 4BN_qN_kvH.
pub fn flops_cross_attention(cfg: &FlopsConfig) -> Result<u128> {
    cfg.validate()?;
    let (b, nq, nkv, h) = (cfg.batch, cfg.n_query, cfg.n_context, cfg.embed_dim);
    Ok(4 * b * nq * h * h + 4 * b * nkv * h * h + 4 * b * nq * nkv * h)
}

/// MLP closed form (activation excluded): 16BNH^2.
pub fn flops_mlp(cfg: &FlopsConfig) -> Result<u128> {
    cfg.validate()?;
    Ok(16 * cfg.batch * cfg.n_tokens * cfg.embed_dim * cfg.embed_dim)
}

/// Cost of one compute block at the given selected-token count.
///
/// Sparse self-attention keeps full K/V projections and pays only
/// |mask|-scaled query work: 2B|m|H^2 (Q) + 4BNH^2 (K,V) + 4B|m|NH
/// (scores + output) + 2B|m|H^2 (out proj).  Cross-attention and MLP
/// scale with |mask| directly.  `mask_len = 0` means the whole block was
/// served from cache and costs nothing.
pub fn flops_block(n_tokens: usize, context_tokens: usize, channels: usize, mask_len: usize) -> FlopsReport {
    if mask_len == 0 {
        return FlopsReport::default();
    }
    let b: u128 = 1;
    let n = n_tokens as u128;
    let m = mask_len as u128;
    let ctx = context_tokens as u128;
    let h = channels as u128;
    FlopsReport {
        qkv_proj: 2 * b * m * h * h + 4 * b * n * h * h,
        attn_scores: 2 * b * m * n * h,
        softmax: b * m * n,
        attn_output: 2 * b * m * n * h,
        out_proj: 2 * b * m * h * h,
        cross_attn: 4 * b * m * h * h + 4 * b * ctx * h * h + 4 * b * m * ctx * h,
        mlp: 16 * b * m * h * h,
        total: 0,
    }
    .finish()
}

/// Selected-token count for a grid fraction: max(1, round(theta*N)) above
/// zero, 0 at theta = 0.
pub fn mask_len_for_theta(theta: f64, n_tokens: usize) -> usize {
    if theta == 0.0 {
        0
    } else {
        (((theta * n_tokens as f64).round() as usize).max(1)).min(n_tokens)
    }
}

/// Analytic cost of a whole run under the given schedule and mode.
/// The first timestep always runs at full budget.
pub fn flops_sparse_run(cfg: &ModelConfig, schedule: &Schedule, mode: RunMode) -> Result<FlopsReport> {
    if schedule.len() != cfg.timesteps {
        return Err(AstraeaError::config(format!(
            "schedule length {} != timesteps {}",
            schedule.len(),
            cfg.timesteps
        )));
    }
    let mut report = FlopsReport::default();
    for step in 0..cfg.timesteps {
        let theta = if step == 0 { 1.0 } else { schedule.theta(step) };
        let mask_len = match mode {
            RunMode::Full => cfg.n_tokens,
            RunMode::Astraea | RunMode::FixedToken => mask_len_for_theta(theta, cfg.n_tokens),
            RunMode::TimestepLevel => {
                if theta >= 0.5 {
                    cfg.n_tokens
                } else {
                    0
                }
            }
        };
        let block = flops_block(cfg.n_tokens, cfg.context_tokens, cfg.channels, mask_len);
        for _ in 0..cfg.n_blocks {
            report.add(&block);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{
        cross_attention, mlp, self_attention_dense, AttentionWeights, MlpWeights, SelectionMask,
    };
    use crate::numerics::{flop_counter, Matrix, Rng};

    fn cfg(n: u128, h: u128) -> FlopsConfig {
        FlopsConfig {
            batch: 1,
            n_tokens: n,
            n_query: n,
            n_context: n,
            embed_dim: h,
            n_heads: 1,
        }
    }

    #[test]
    fn self_attention_closed_form_cases() {
        // B=1, N=2, H=4: 8*2*16 + 4*4*4 = 320
        let r = flops_self_attention(&cfg(2, 4)).unwrap();
        assert_eq!(r.total, 320);
        // B=1, N=1, H=1: 8 + 4 = 12
        let r = flops_self_attention(&cfg(1, 1)).unwrap();
        assert_eq!(r.total, 12);
    }

    #[test]
    fn cross_attention_closed_form_cases() {
        let c = FlopsConfig {
            batch: 1,
            n_tokens: 2,
            n_query: 2,
            n_context: 3,
            embed_dim: 4,
            n_heads: 1,
        };
        assert_eq!(flops_cross_attention(&c).unwrap(), 128 + 192 + 96);
        // N_q = N_kv = N collapses to the self-attention total
        for (n, h) in [(3u128, 2u128), (5, 4), (7, 8)] {
            let c = cfg(n, h);
            assert_eq!(
                flops_cross_attention(&c).unwrap(),
                flops_self_attention(&c).unwrap().total
            );
        }
    }

    #[test]
    fn mlp_closed_form_cases() {
        assert_eq!(flops_mlp(&cfg(2, 4)).unwrap(), 512);
        assert_eq!(
            flops_mlp(&cfg(10, 4)).unwrap(),
            2 * flops_mlp(&cfg(5, 4)).unwrap()
        );
    }

    #[test]
    fn mlp_budget_scaling_is_linear() {
        // half the tokens costs exactly half, mirroring the 0.4254/0.8508 split
        let full = flops_block(64, 8, 32, 64).mlp;
        let half = flops_block(64, 8, 32, 32).mlp;
        assert_eq!(2 * half, full);
    }

    #[test]
    fn counter_matches_self_attention_closed_form() {
        let mut rng = Rng::new(77);
        for (n, d) in [(2usize, 4usize), (3, 5), (7, 2), (5, 8), (9, 3)] {
            let x = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.uniform(-1.0, 1.0)).collect())
                .unwrap();
            let w = AttentionWeights::init(d, &mut rng);
            flop_counter::reset();
            self_attention_dense(&x, &w).unwrap();
            let counted = flop_counter::total();
            let want = flops_self_attention(&cfg(n as u128, d as u128)).unwrap().total;
            assert_eq!(counted, want, "N={n} d={d}");
        }
    }

    #[test]
    fn counter_matches_cross_attention_closed_form() {
        let mut rng = Rng::new(78);
        for (nq, nkv, d) in [(2usize, 3usize, 4usize), (4, 1, 3), (6, 6, 2)] {
            let x = Matrix::from_vec(nq, d, (0..nq * d).map(|_| rng.uniform(-1.0, 1.0)).collect())
                .unwrap();
            let ctx =
                Matrix::from_vec(nkv, d, (0..nkv * d).map(|_| rng.uniform(-1.0, 1.0)).collect())
                    .unwrap();
            let w = AttentionWeights::init(d, &mut rng);
            flop_counter::reset();
            cross_attention(&x, &ctx, &w, &SelectionMask::full(nq)).unwrap();
            let counted = flop_counter::total();
            let c = FlopsConfig {
                batch: 1,
                n_tokens: nq as u128,
                n_query: nq as u128,
                n_context: nkv as u128,
                embed_dim: d as u128,
                n_heads: 1,
            };
            assert_eq!(counted, flops_cross_attention(&c).unwrap());
        }
    }

    #[test]
    fn counter_matches_mlp_closed_form() {
        let mut rng = Rng::new(79);
        for (n, d) in [(3usize, 2usize), (5, 4), (2, 6)] {
            let x = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.uniform(-1.0, 1.0)).collect())
                .unwrap();
            let w = MlpWeights::init(d, &mut rng);
            flop_counter::reset();
            mlp(&x, &w, &SelectionMask::full(n)).unwrap();
            assert_eq!(flop_counter::total(), flops_mlp(&cfg(n as u128, d as u128)).unwrap());
        }
    }

    #[test]
    fn sparse_self_attention_affine_in_mask() {
        // slope 4BNH + 4BH^2, intercept 4BNH^2; fit two points, check a third
        let (n, ctx, h) = (16usize, 4usize, 8usize);
        let at = |m: usize| {
            let r = flops_block(n, ctx, h, m);
            r.qkv_proj + r.attn_scores + r.attn_output + r.out_proj
        };
        let f1 = at(1);
        let f5 = at(5);
        let slope = (f5 - f1) / 4;
        assert_eq!(slope, 4 * (n as u128) * (h as u128) + 4 * (h as u128) * (h as u128));
        let intercept = f1 - slope;
        assert_eq!(intercept, 4 * (n as u128) * (h as u128) * (h as u128));
        assert_eq!(at(11), intercept + 11 * slope);
    }

    #[test]
    fn full_mask_block_matches_dense_forms() {
        let (n, ctx, h) = (12usize, 5usize, 6usize);
        let r = flops_block(n, ctx, h, n);
        let dense = flops_self_attention(&cfg(n as u128, h as u128)).unwrap();
        let self_total = r.qkv_proj + r.attn_scores + r.attn_output + r.out_proj;
        assert_eq!(self_total, dense.total);
        let c = FlopsConfig {
            batch: 1,
            n_tokens: n as u128,
            n_query: n as u128,
            n_context: ctx as u128,
            embed_dim: h as u128,
            n_heads: 1,
        };
        assert_eq!(r.cross_attn, flops_cross_attention(&c).unwrap());
        assert_eq!(r.mlp, flops_mlp(&cfg(n as u128, h as u128)).unwrap());
    }

    #[test]
    fn sparse_run_monotone_in_theta() {
        let cfg = ModelConfig::default();
        let mut rng = Rng::new(99);
        for _ in 0..20 {
            let mut tenths: Vec<u8> = (0..cfg.timesteps).map(|_| (rng.next_u64() % 11) as u8).collect();
            let base = Schedule::new(tenths.clone()).unwrap();
            let f0 = flops_sparse_run(&cfg, &base, RunMode::Astraea).unwrap().total;
            // bump one searchable entry
            let idx = 1 + rng.choice(cfg.timesteps - 1).unwrap();
            if tenths[idx] < 10 {
                tenths[idx] += 1;
                let bumped = Schedule::new(tenths.clone()).unwrap();
                let f1 = flops_sparse_run(&cfg, &bumped, RunMode::Astraea).unwrap().total;
                assert!(f1 >= f0);
            }
        }
    }

    #[test]
    fn sparse_run_degenerate_budgets() {
        let cfg = ModelConfig::default();
        let full = Schedule::uniform(cfg.timesteps, 10).unwrap();
        let zero = Schedule::uniform(cfg.timesteps, 0).unwrap();
        let f_full = flops_sparse_run(&cfg, &full, RunMode::Astraea).unwrap();
        let f_dense = flops_sparse_run(&cfg, &full, RunMode::Full).unwrap();
        assert_eq!(f_full, f_dense);
        // all-zero after warm-up: only the first timestep costs anything
        let f_zero = flops_sparse_run(&cfg, &zero, RunMode::Astraea).unwrap();
        let one_step = flops_block(cfg.n_tokens, cfg.context_tokens, cfg.channels, cfg.n_tokens);
        assert_eq!(f_zero.total, one_step.total * cfg.n_blocks as u128);
    }
}
