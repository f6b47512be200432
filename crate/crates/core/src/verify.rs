//! Built-in self-checks: the fast subset of the acceptance properties,
//! runnable from the CLI as `astraea verify`.

use crate::attention::{self_attention_dense, self_attention_sparse, AttentionWeights, SelectionMask};
use crate::diffusion::{build_toy_model, run_inference, ModelConfig, NoiseSchedule, RunMode};
use crate::flops::{flops_cross_attention, flops_mlp, flops_self_attention, FlopsConfig};
use crate::numerics::{flop_counter, Matrix, Rng};
use crate::schedule::Schedule;
use crate::search::{mutation_probability, repair, SearchConfig};
use crate::selection::SelectionConfig;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, r: Result<String, String>) -> CheckResult {
    match r {
        Ok(detail) => CheckResult {
            name,
            passed: true,
            detail,
        },
        Err(detail) => CheckResult {
            name,
            passed: false,
            detail,
        },
    }
}

fn sparse_dense_equivalence() -> Result<String, String> {
    let mut rng = Rng::new(1001);
    for trial in 0..20 {
        let n = 2 + (rng.next_u64() % 15) as usize;
        let d = 1 + (rng.next_u64() % 8) as usize;
        let x = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .map_err(|e| e.to_string())?;
        let w = AttentionWeights::init(d, &mut rng);
        let k = 1 + (rng.next_u64() % n as u64) as usize;
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..idx.len()).rev() {
            let j = (rng.next_u64() % (i as u64 + 1)) as usize;
            idx.swap(i, j);
        }
        let mut picked: Vec<usize> = idx.into_iter().take(k).collect();
        picked.sort_unstable();
        let mask = SelectionMask::new(picked, n).map_err(|e| e.to_string())?;
        let (dense, _) = self_attention_dense(&x, &w).map_err(|e| e.to_string())?;
        let (sparse, _) = self_attention_sparse(&x, &w, &mask).map_err(|e| e.to_string())?;
        for (j, &i) in mask.indices().iter().enumerate() {
            for c in 0..d {
                let diff = (sparse.get(j, c) - dense.get(i, c)).abs();
                if diff > 1e-12 {
                    return Err(format!("trial {trial}: row {i} col {c} differs by {diff:e}"));
                }
            }
        }
    }
    Ok("20 random instances, all selected rows within 1e-12 of dense".into())
}

fn flops_counter_agreement() -> Result<String, String> {
    let mut rng = Rng::new(1002);
    for _ in 0..5 {
        let n = 2 + (rng.next_u64() % 10) as usize;
        let d = 1 + (rng.next_u64() % 8) as usize;
        let x = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .map_err(|e| e.to_string())?;
        let w = AttentionWeights::init(d, &mut rng);
        flop_counter::reset();
        self_attention_dense(&x, &w).map_err(|e| e.to_string())?;
        let counted = flop_counter::total();
        let cfg = FlopsConfig {
            batch: 1,
            n_tokens: n as u128,
            n_query: n as u128,
            n_context: n as u128,
            embed_dim: d as u128,
            n_heads: 1,
        };
        let want = flops_self_attention(&cfg).map_err(|e| e.to_string())?.total;
        if counted != want {
            return Err(format!("N={n} d={d}: counter {counted} != closed form {want}"));
        }
        let _ = flops_cross_attention(&cfg).map_err(|e| e.to_string())?;
        let _ = flops_mlp(&cfg).map_err(|e| e.to_string())?;
    }
    Ok("counter equals 8BNH^2+4BN^2H on 5 random configs".into())
}

fn repair_band() -> Result<String, String> {
    let mut rng = Rng::new(1003);
    let budget = 5.0;
    for trial in 0..200 {
        let tenths: Vec<u8> = (0..10).map(|_| (rng.next_u64() % 11) as u8).collect();
        let s = Schedule::new(tenths).map_err(|e| e.to_string())?;
        let r = repair(&s, budget, 0, &mut rng);
        let sum: f64 = r.tenths().iter().map(|&v| v as f64 / 10.0).sum();
        if !(0.9 * budget..=1.1 * budget).contains(&sum) {
            return Err(format!("trial {trial}: repaired sum {sum} outside band"));
        }
    }
    Ok("200 randomized repairs all inside [0.9, 1.1] x budget".into())
}

fn mutation_endpoints() -> Result<String, String> {
    let cfg = SearchConfig {
        max_generations: 30,
        budget: 5.0,
        ..SearchConfig::default()
    };
    let start = mutation_probability(0, &cfg);
    let end = mutation_probability(30, &cfg);
    if (start - 0.1).abs() > 1e-12 || (end - 0.01).abs() > 1e-12 {
        return Err(format!("endpoints {start}/{end}, expected 0.1/0.01"));
    }
    Ok("decay endpoints reproduce 0.1 and 0.01".into())
}

fn oracle_run_equivalence() -> Result<String, String> {
    let cfg = ModelConfig {
        n_tokens: 12,
        channels: 8,
        context_tokens: 4,
        n_blocks: 2,
        timesteps: 5,
        weight_seed: 21,
        noise_seed: 22,
    };
    let model = build_toy_model(&cfg).map_err(|e| e.to_string())?;
    let noise = NoiseSchedule::cosine(cfg.timesteps);
    let sel = SelectionConfig::default();
    let sched = Schedule::uniform(cfg.timesteps, 10).map_err(|e| e.to_string())?;
    let (full, _) = run_inference(&model, &sched, RunMode::Full, &noise, &sel, 5)
        .map_err(|e| e.to_string())?;
    for mode in [RunMode::Astraea, RunMode::FixedToken, RunMode::TimestepLevel] {
        let (out, _) =
            run_inference(&model, &sched, mode, &noise, &sel, 5).map_err(|e| e.to_string())?;
        for (a, b) in out.data().iter().zip(full.data()) {
            if (a - b).abs() > 1e-12 {
                return Err(format!("{mode} at full budget diverges from full mode"));
            }
        }
    }
    Ok("astraea/fixed/timestep at full budget all match full mode within 1e-12".into())
}

fn run_determinism() -> Result<String, String> {
    let cfg = ModelConfig {
        n_tokens: 10,
        channels: 6,
        context_tokens: 3,
        n_blocks: 2,
        timesteps: 5,
        weight_seed: 31,
        noise_seed: 32,
    };
    let model = build_toy_model(&cfg).map_err(|e| e.to_string())?;
    let noise = NoiseSchedule::cosine(cfg.timesteps);
    let sel = SelectionConfig::default();
    let sched = Schedule::new(vec![10, 3, 5, 2, 8]).map_err(|e| e.to_string())?;
    let (a, _) = run_inference(&model, &sched, RunMode::Astraea, &noise, &sel, 5)
        .map_err(|e| e.to_string())?;
    let (b, _) = run_inference(&model, &sched, RunMode::Astraea, &noise, &sel, 5)
        .map_err(|e| e.to_string())?;
    if a != b {
        return Err("identical inputs produced different outputs".into());
    }
    Ok("repeated run is bitwise identical".into())
}

fn schedule_round_trip() -> Result<String, String> {
    let s = Schedule::new(vec![10, 0, 3, 7, 10, 5]).map_err(|e| e.to_string())?;
    let back = Schedule::parse(&s.render()).map_err(|e| e.to_string())?;
    if back != s {
        return Err("parse(render(s)) != s".into());
    }
    Ok("schedule file round-trips".into())
}

/// Run every built-in check.
pub fn run_all() -> Vec<CheckResult> {
    vec![
        check("sparse_dense_equivalence", sparse_dense_equivalence()),
        check("flops_counter_agreement", flops_counter_agreement()),
        check("repair_band", repair_band()),
        check("mutation_endpoints", mutation_endpoints()),
        check("oracle_run_equivalence", oracle_run_equivalence()),
        check("run_determinism", run_determinism()),
        check("schedule_round_trip", schedule_round_trip()),
    ]
}
