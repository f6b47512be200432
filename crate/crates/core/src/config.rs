//! Flat key=value run configuration with `[section]` headers.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::diffusion::{ModelConfig, NoiseSchedule, RunMode};
use crate::error::{AstraeaError, Result};
use crate::schedule::Schedule;
use crate::search::SearchConfig;
use crate::selection::{DeltaMetric, SelectionConfig};

/// Where the budget schedule comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleSpec {
    /// Same grid fraction everywhere (tenths).
    Uniform(u8),
    /// Explicit tenths, one per timestep.
    Inline(Vec<u8>),
    /// Schedule file in the `T=`/`t=... theta=n/10` format.
    File(PathBuf),
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub noise_sigma: f64,
    pub selection: SelectionConfig,
    pub mode: RunMode,
    pub schedule: ScheduleSpec,
    pub prompt_seed: u64,
    pub prompt_seeds: Vec<u64>,
    pub search: SearchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let search = SearchConfig {
            budget: 0.5 * (model.timesteps - 1) as f64,
            ..SearchConfig::default()
        };
        RunConfig {
            model,
            noise_sigma: 0.0,
            selection: SelectionConfig::default(),
            mode: RunMode::Astraea,
            schedule: ScheduleSpec::Uniform(10),
            prompt_seed: 101,
            prompt_seeds: vec![101, 202, 303, 404],
            search,
        }
    }
}

impl RunConfig {
    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        if self.noise_sigma == 0.0 {
            Ok(NoiseSchedule::cosine(self.model.timesteps))
        } else {
            NoiseSchedule::cosine_stochastic(self.model.timesteps, self.noise_sigma)
        }
    }

    /// Materialize the schedule, resolving file references.
    pub fn resolve_schedule(&self) -> Result<Schedule> {
        let s = match &self.schedule {
            ScheduleSpec::Uniform(tenths) => Schedule::uniform(self.model.timesteps, *tenths)?,
            ScheduleSpec::Inline(tenths) => Schedule::new(tenths.clone())?,
            ScheduleSpec::File(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    AstraeaError::config(format!("schedule_file {}: {e}", path.display()))
                })?;
                Schedule::parse(&text)?
            }
        };
        if s.len() != self.model.timesteps {
            return Err(AstraeaError::config(format!(
                "schedule length {} does not match model.timesteps {}",
                s.len(),
                self.model.timesteps
            )));
        }
        Ok(s)
    }
}

fn parse_sections(text: &str) -> Result<HashMap<String, HashMap<String, String>>> {
    let mut out: HashMap<String, HashMap<String, String>> = HashMap::new();
    let mut section = String::from("");
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            out.entry(section.clone()).or_default();
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            AstraeaError::parse(format!("line {}: expected key=value, got {line:?}", lineno + 1))
        })?;
        out.entry(section.clone())
            .or_default()
            .insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(out)
}

fn field<T: std::str::FromStr>(
    sections: &HashMap<String, HashMap<String, String>>,
    section: &str,
    key: &str,
    current: T,
) -> Result<T> {
    match sections.get(section).and_then(|s| s.get(key)) {
        Some(v) => v.parse().map_err(|_| {
            AstraeaError::config(format!("field [{section}] {key}={v} could not be parsed"))
        }),
        None => Ok(current),
    }
}

fn seed_list(raw: &str, section: &str, key: &str) -> Result<Vec<u64>> {
    raw.split(',')
        .map(|v| {
            v.trim().parse().map_err(|_| {
                AstraeaError::config(format!("field [{section}] {key}: bad entry {v:?}"))
            })
        })
        .collect()
}

/// Parse a config file; unset keys keep their defaults.
pub fn parse_run_config(text: &str, base_dir: &Path) -> Result<RunConfig> {
    let sections = parse_sections(text)?;
    let mut cfg = RunConfig::default();

    cfg.model.n_tokens = field(&sections, "model", "n_tokens", cfg.model.n_tokens)?;
    cfg.model.channels = field(&sections, "model", "channels", cfg.model.channels)?;
    cfg.model.context_tokens = field(&sections, "model", "context_tokens", cfg.model.context_tokens)?;
    cfg.model.n_blocks = field(&sections, "model", "n_blocks", cfg.model.n_blocks)?;
    cfg.model.timesteps = field(&sections, "model", "timesteps", cfg.model.timesteps)?;
    cfg.model.weight_seed = field(&sections, "model", "weight_seed", cfg.model.weight_seed)?;
    cfg.model.noise_seed = field(&sections, "model", "noise_seed", cfg.model.noise_seed)?;
    cfg.model.validate()?;

    cfg.noise_sigma = field(&sections, "noise", "sigma", cfg.noise_sigma)?;
    if cfg.noise_sigma < 0.0 {
        return Err(AstraeaError::config("field [noise] sigma must be >= 0"));
    }

    cfg.selection.w_alpha = field(&sections, "selection", "w_alpha", cfg.selection.w_alpha)?;
    cfg.selection.w_beta = field(&sections, "selection", "w_beta", cfg.selection.w_beta)?;
    if let Some(v) = sections.get("selection").and_then(|s| s.get("delta_metric")) {
        cfg.selection.delta_metric = match v.as_str() {
            "mean_abs" => DeltaMetric::MeanAbs,
            "mean_squared" => DeltaMetric::MeanSquared,
            other => {
                return Err(AstraeaError::config(format!(
                    "field [selection] delta_metric={other} (expected mean_abs|mean_squared)"
                )))
            }
        };
    }
    cfg.selection.validate()?;

    if let Some(v) = sections.get("run").and_then(|s| s.get("mode")) {
        cfg.mode = v.parse()?;
    }
    cfg.prompt_seed = field(&sections, "run", "prompt_seed", cfg.prompt_seed)?;
    let run = sections.get("run");
    let uniform = run.and_then(|s| s.get("schedule_uniform"));
    let inline = run.and_then(|s| s.get("schedule_inline"));
    let file = run.and_then(|s| s.get("schedule_file"));
    match (uniform, inline, file) {
        (Some(u), None, None) => {
            let tenths: u8 = u.parse().map_err(|_| {
                AstraeaError::config(format!("field [run] schedule_uniform={u} is not 0..=10"))
            })?;
            if tenths > 10 {
                return Err(AstraeaError::config(
                    "field [run] schedule_uniform must be 0..=10 tenths",
                ));
            }
            cfg.schedule = ScheduleSpec::Uniform(tenths);
        }
        (None, Some(i), None) => {
            let tenths: Vec<u8> = i
                .split(',')
                .map(|v| {
                    v.trim().parse().map_err(|_| {
                        AstraeaError::config(format!("field [run] schedule_inline: bad entry {v:?}"))
                    })
                })
                .collect::<Result<_>>()?;
            cfg.schedule = ScheduleSpec::Inline(tenths);
        }
        (None, None, Some(f)) => {
            cfg.schedule = ScheduleSpec::File(base_dir.join(f));
        }
        (None, None, None) => {}
        _ => {
            return Err(AstraeaError::config(
                "field [run] schedule_*: give at most one of schedule_uniform, schedule_inline, schedule_file",
            ))
        }
    }

    if let Some(v) = sections.get("run").and_then(|s| s.get("prompt_seeds")) {
        cfg.prompt_seeds = seed_list(v, "run", "prompt_seeds")?;
    }

    let s = &mut cfg.search;
    s.population_size = field(&sections, "search", "population_size", s.population_size)?;
    s.elite_count = field(&sections, "search", "elite_count", s.elite_count)?;
    s.offspring_per_gen = field(&sections, "search", "offspring_per_gen", s.offspring_per_gen)?;
    s.max_generations = field(&sections, "search", "max_generations", s.max_generations)?;
    s.p0 = field(&sections, "search", "p0", s.p0)?;
    s.p_final = field(&sections, "search", "p_final", s.p_final)?;
    s.seed = field(&sections, "search", "seed", s.seed)?;
    let default_budget = 0.5 * (cfg.model.timesteps.saturating_sub(1)) as f64;
    s.budget = field(&sections, "search", "budget", default_budget)?;
    if let Some(v) = sections.get("search").and_then(|sec| sec.get("prompt_seeds")) {
        s.prompt_seeds = seed_list(v, "search", "prompt_seeds")?;
    } else {
        s.prompt_seeds = cfg.prompt_seeds.clone();
    }

    Ok(cfg)
}
