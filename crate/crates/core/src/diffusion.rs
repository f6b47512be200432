//! Denoising loop over a toy stacked-block transformer.
//!
//! Each timestep runs the block stack under its budget fraction in one of
//! four modes: full compute, per-block token selection (astraea),
//! whole-timestep reuse (timestep_level), or one shared mask per timestep
//! (fixed_token).  Step index 0 is the first executed timestep (t = T) and
//! always runs at full budget so every cache slot is warm.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{
    cross_attention, mlp, self_attention_dense, self_attention_sparse, AttentionWeights,
    MlpWeights, SelectionMask,
};
use crate::error::{AstraeaError, Result};
use crate::flops::{flops_block, FlopsReport};
use crate::metrics::mse;
use crate::numerics::{Matrix, Rng};
use crate::schedule::Schedule;
use crate::selection::{select_top, BlockCache, SelectionConfig};

/// Scale applied to the cosine-derived noise-removal coefficients, keeping
/// the toy trajectory bounded.
const BETA_SCALE: f64 = 5e-4;

/// Standard deviation of the initial latent grid.  The norm-free residual
/// blocks roughly double row magnitudes per sublayer, so the starting scale
/// is kept below 1 to hold the deepest block's attention logits (and with
/// them the spread of sum-exp scores) within a few e-folds.
const INIT_SCALE: f64 = 0.25;

/// Per-timestep denoising coefficients, indexed by executed step
/// (0 = first, t = T).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(alpha: Vec<f64>, beta: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if alpha.len() != beta.len() || alpha.len() != sigma.len() || alpha.is_empty() {
            return Err(AstraeaError::config("noise schedule vectors must align"));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&alpha) || !finite(&beta) || !finite(&sigma) {
            return Err(AstraeaError::config("noise schedule must be finite"));
        }
        if sigma.iter().any(|&s| s < 0.0) {
            return Err(AstraeaError::config("sigma must be >= 0"));
        }
        Ok(NoiseSchedule { alpha, beta, sigma })
    }

    /// Deterministic default: alpha/beta follow a cosine signal-ratio curve,
    /// sigma = 0 so runs (and EA fitness) are exactly reproducible.
    pub fn cosine(timesteps: usize) -> Self {
        let signal = |v: f64| (v * 0.95 * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let t = timesteps as f64;
        let mut alpha = Vec::with_capacity(timesteps);
        let mut beta = Vec::with_capacity(timesteps);
        for step in 0..timesteps {
            let u0 = step as f64 / t;
            let u1 = (step + 1) as f64 / t;
            alpha.push((signal(u1) / signal(u0)).sqrt());
            beta.push(BETA_SCALE * (1.0 - signal(u1)));
        }
        NoiseSchedule {
            alpha,
            beta,
            sigma: vec![0.0; timesteps],
        }
    }

    /// Same curve with a renoising term of the given strength.
    pub fn cosine_stochastic(timesteps: usize, sigma: f64) -> Result<Self> {
        let mut s = NoiseSchedule::cosine(timesteps);
        if sigma < 0.0 {
            return Err(AstraeaError::config("sigma must be >= 0"));
        }
        s.sigma = vec![sigma; timesteps];
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Full,
    Astraea,
    TimestepLevel,
    FixedToken,
}

impl FromStr for RunMode {
    type Err = AstraeaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(RunMode::Full),
            "astraea" => Ok(RunMode::Astraea),
            "timestep" | "timestep_level" => Ok(RunMode::TimestepLevel),
            "fixed" | "fixed_token" => Ok(RunMode::FixedToken),
            other => Err(AstraeaError::config(format!(
                "unknown mode {other:?} (expected full|astraea|timestep|fixed)"
            ))),
        }
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RunMode::Full => "full",
            RunMode::Astraea => "astraea",
            RunMode::TimestepLevel => "timestep_level",
            RunMode::FixedToken => "fixed_token",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_tokens: usize,
    pub channels: usize,
    pub context_tokens: usize,
    pub n_blocks: usize,
    pub timesteps: usize,
    pub weight_seed: u64,
    pub noise_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_tokens: 64,
            channels: 32,
            context_tokens: 8,
            n_blocks: 4,
            timesteps: 20,
            weight_seed: 1,
            noise_seed: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tokens == 0
            || self.channels == 0
            || self.context_tokens == 0
            || self.n_blocks == 0
            || self.timesteps == 0
        {
            return Err(AstraeaError::config("model dimensions must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub attn: AttentionWeights,
    pub cross: AttentionWeights,
    pub mlp: MlpWeights,
}

/// Seeded stand-in for a pretrained denoiser: L compute blocks of random
/// weights scaled by 1/sqrt(d).
#[derive(Debug, Clone)]
pub struct ToyModel {
    pub cfg: ModelConfig,
    pub blocks: Vec<BlockWeights>,
}

pub fn build_toy_model(cfg: &ModelConfig) -> Result<ToyModel> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.weight_seed);
    let blocks = (0..cfg.n_blocks)
        .map(|_| BlockWeights {
            attn: AttentionWeights::init(cfg.channels, &mut rng),
            cross: AttentionWeights::init(cfg.channels, &mut rng),
            mlp: MlpWeights::init(cfg.channels, &mut rng),
        })
        .collect();
    Ok(ToyModel {
        cfg: *cfg,
        blocks,
    })
}

impl ToyModel {
    /// Synthetic context tokens; distinct prompts are distinct seeds.
    pub fn context(&self, prompt_seed: u64) -> Matrix {
        let mut rng = Rng::new(prompt_seed);
        gaussian_grid(self.cfg.context_tokens, self.cfg.channels, &mut rng)
    }
}

fn gaussian_grid(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gauss()).collect())
        .expect("gaussian draws are finite")
}

/// Seeded starting latent x_T.
pub fn initial_grid(cfg: &ModelConfig, rng: &mut Rng) -> Matrix {
    Matrix::from_vec(
        cfg.n_tokens,
        cfg.channels,
        (0..cfg.n_tokens * cfg.channels)
            .map(|_| rng.gauss() * INIT_SCALE)
            .collect(),
    )
    .expect("gaussian draws are finite")
}

/// One denoising update: x_{t-1} = alpha * (x_t - beta * z_t) + sigma * n_t.
pub fn denoise_step(
    x: &Matrix,
    step: usize,
    noise: &NoiseSchedule,
    z: &Matrix,
    rng: &mut Rng,
) -> Result<Matrix> {
    if x.rows() != z.rows() || x.cols() != z.cols() {
        return Err(AstraeaError::shape("denoise step grids must match"));
    }
    if step >= noise.len() {
        return Err(AstraeaError::domain(format!("step {step} outside schedule")));
    }
    let (a, b, s) = (noise.alpha[step], noise.beta[step], noise.sigma[step]);
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let xr = x.row(r);
        let zr = z.row(r);
        let or = out.row_mut(r);
        for c in 0..xr.len() {
            let mut v = a * (xr[c] - b * zr[c]);
            if s > 0.0 {
                v += s * rng.gauss();
            }
            or[c] = v;
        }
    }
    Ok(out)
}

/// Bookkeeping from one run: per-timestep per-block selected counts, the
/// analytic FLOP totals, and the largest consecutive-skip count each token
/// reached.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunStats {
    pub mode: RunMode,
    pub selected_per_step: Vec<Vec<usize>>,
    pub flops: FlopsReport,
    pub max_skip_per_token: Vec<u32>,
}

impl RunStats {
    fn new(mode: RunMode, n_tokens: usize) -> Self {
        RunStats {
            mode,
            selected_per_step: Vec::new(),
            flops: FlopsReport::default(),
            max_skip_per_token: vec![0; n_tokens],
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats serialize")
    }
}

/// Dense block stack, no caches.  This is the ground-truth route.
fn forward_full(model: &ToyModel, x: &Matrix, ctx: &Matrix) -> Result<Matrix> {
    let full = SelectionMask::full(x.rows());
    let mut h = x.clone();
    for block in &model.blocks {
        let (attn, _) = self_attention_dense(&h, &block.attn)?;
        let mut a = h.clone();
        for r in 0..a.rows() {
            for c in 0..a.cols() {
                a.set(r, c, h.get(r, c) + attn.get(r, c));
            }
        }
        let cross = cross_attention(&a, ctx, &block.cross, &full)?;
        let mut cgrid = a.clone();
        for r in 0..cgrid.rows() {
            for c in 0..cgrid.cols() {
                cgrid.set(r, c, a.get(r, c) + cross.get(r, c));
            }
        }
        let m = mlp(&cgrid, &block.mlp, &full)?;
        let mut out = cgrid.clone();
        for r in 0..out.rows() {
            for c in 0..out.cols() {
                out.set(r, c, cgrid.get(r, c) + m.get(r, c));
            }
        }
        h = out;
    }
    Ok(h)
}

/// One block under a selection mask: residual sublayers for the selected
/// rows, cached rows verbatim for the rest, cache updated afterwards.
fn block_selective(
    h: &Matrix,
    ctx: &Matrix,
    weights: &BlockWeights,
    mask: &SelectionMask,
    cache: &mut BlockCache,
) -> Result<Matrix> {
    let n = h.rows();
    let d = h.cols();
    if mask.is_empty() {
        let all: Vec<usize> = (0..n).collect();
        let out = cache.read_cached(&all)?;
        cache.update(mask, &Matrix::zeros(0, d), &[], &Matrix::zeros(0, d))?;
        return Ok(out);
    }
    let (attn_rows, lse) = self_attention_sparse(h, &weights.attn, mask)?;
    let mut scratch = h.clone();
    for (j, &i) in mask.indices().iter().enumerate() {
        for c in 0..d {
            scratch.set(i, c, h.get(i, c) + attn_rows.get(j, c));
        }
    }
    let cross_rows = cross_attention(&scratch, ctx, &weights.cross, mask)?;
    for (j, &i) in mask.indices().iter().enumerate() {
        for c in 0..d {
            scratch.set(i, c, scratch.get(i, c) + cross_rows.get(j, c));
        }
    }
    let mlp_rows = mlp(&scratch, &weights.mlp, mask)?;
    let mut computed = Matrix::zeros(mask.len(), d);
    for (j, &i) in mask.indices().iter().enumerate() {
        for c in 0..d {
            computed.set(j, c, scratch.get(i, c) + mlp_rows.get(j, c));
        }
    }
    // merge computed rows with cached rows
    let mut out = Matrix::zeros(n, d);
    let mut next = mask.indices().iter().copied().enumerate().peekable();
    for i in 0..n {
        if next.peek().map(|&(_, t)| t) == Some(i) {
            let (j, _) = next.next().unwrap();
            out.row_mut(i).copy_from_slice(computed.row(j));
        } else {
            out.row_mut(i).copy_from_slice(cache.cached_row(i)?);
        }
    }
    cache.update(mask, &computed, &lse, &computed)?;
    Ok(out)
}

/// Run the denoising loop and return the final grid plus run statistics.
pub fn run_inference(
    model: &ToyModel,
    schedule: &Schedule,
    mode: RunMode,
    noise: &NoiseSchedule,
    sel_cfg: &SelectionConfig,
    prompt_seed: u64,
) -> Result<(Matrix, RunStats)> {
    let cfg = &model.cfg;
    cfg.validate()?;
    sel_cfg.validate()?;
    if schedule.len() != cfg.timesteps {
        return Err(AstraeaError::config(format!(
            "schedule length {} != timesteps {}",
            schedule.len(),
            cfg.timesteps
        )));
    }
    if noise.len() != cfg.timesteps {
        return Err(AstraeaError::config(format!(
            "noise schedule length {} != timesteps {}",
            noise.len(),
            cfg.timesteps
        )));
    }
    let ctx = model.context(prompt_seed);
    let mut rng = Rng::new(cfg.noise_seed);
    let mut x = initial_grid(cfg, &mut rng);
    let mut caches: Vec<BlockCache> = (0..cfg.n_blocks)
        .map(|_| BlockCache::new(cfg.n_tokens, cfg.channels))
        .collect();
    let mut stats = RunStats::new(mode, cfg.n_tokens);
    let mut prev_stack: Option<Matrix> = None;

    for step in 0..cfg.timesteps {
        let theta = if step == 0 { 1.0 } else { schedule.theta(step) };
        let mut step_selected = Vec::with_capacity(cfg.n_blocks);
        let z = match mode {
            RunMode::Full => {
                for _ in 0..cfg.n_blocks {
                    step_selected.push(cfg.n_tokens);
                }
                forward_full(model, &x, &ctx)?
            }
            RunMode::TimestepLevel => {
                let run_it = theta >= 0.5;
                if run_it {
                    for _ in 0..cfg.n_blocks {
                        step_selected.push(cfg.n_tokens);
                    }
                    let z = forward_full(model, &x, &ctx)?;
                    prev_stack = Some(z.clone());
                    z
                } else {
                    step_selected.extend(std::iter::repeat_n(0, cfg.n_blocks));
                    prev_stack.clone().ok_or_else(|| {
                        AstraeaError::state("timestep reuse before any computed timestep")
                    })?
                }
            }
            RunMode::Astraea | RunMode::FixedToken => {
                let shared_mask = if mode == RunMode::FixedToken {
                    let scores = caches[0].score_tokens(sel_cfg);
                    Some(select_top(&scores, theta, cfg.n_tokens)?)
                } else {
                    None
                };
                let mut h = x.clone();
                for (b, block) in model.blocks.iter().enumerate() {
                    let mask = match &shared_mask {
                        Some(m) => m.clone(),
                        None => {
                            let scores = caches[b].score_tokens(sel_cfg);
                            select_top(&scores, theta, cfg.n_tokens)?
                        }
                    };
                    step_selected.push(mask.len());
                    h = block_selective(&h, &ctx, block, &mask, &mut caches[b])?;
                    for t in 0..cfg.n_tokens {
                        let s = caches[b].skip_count(t);
                        if s > stats.max_skip_per_token[t] {
                            stats.max_skip_per_token[t] = s;
                        }
                    }
                }
                h
            }
        };
        for &m in &step_selected {
            stats
                .flops
                .add(&flops_block(cfg.n_tokens, cfg.context_tokens, cfg.channels, m));
        }
        stats.selected_per_step.push(step_selected);
        x = denoise_step(&x, step, noise, &z, &mut rng)?;
    }
    Ok((x, stats))
}

/// Full-mode run where the model evaluation at `skip` is replaced by the
/// previous timestep's stack output (zero grid when the first timestep is
/// skipped).  The denoising arithmetic still runs at every step.
fn run_full_with_skip(
    model: &ToyModel,
    noise: &NoiseSchedule,
    prompt_seed: u64,
    skip: Option<usize>,
) -> Result<Matrix> {
    let cfg = &model.cfg;
    let ctx = model.context(prompt_seed);
    let mut rng = Rng::new(cfg.noise_seed);
    let mut x = initial_grid(cfg, &mut rng);
    let mut prev_z: Option<Matrix> = None;
    for step in 0..cfg.timesteps {
        let z = if skip == Some(step) {
            prev_z
                .clone()
                .unwrap_or_else(|| Matrix::zeros(cfg.n_tokens, cfg.channels))
        } else {
            forward_full(model, &x, &ctx)?
        };
        prev_z = Some(z.clone());
        x = denoise_step(&x, step, noise, &z, &mut rng)?;
    }
    Ok(x)
}

/// MSE against the unskipped run for each single-timestep skip.
pub fn skip_one_sweep(model: &ToyModel, noise: &NoiseSchedule, prompt_seed: u64) -> Result<Vec<f64>> {
    if model.cfg.timesteps < 2 {
        return Err(AstraeaError::config("sweep needs at least 2 timesteps"));
    }
    let reference = run_full_with_skip(model, noise, prompt_seed, None)?;
    (0..model.cfg.timesteps)
        .map(|s| {
            let skipped = run_full_with_skip(model, noise, prompt_seed, Some(s))?;
            mse(&reference, &skipped)
        })
        .collect()
}
