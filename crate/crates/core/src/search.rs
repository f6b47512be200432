//! Evolutionary search over budget schedules under a total-budget band.
//!
//! Elitist loop: evaluate, keep the k lowest-MSE candidates, breed P
//! offspring from elite parent pairs via uniform/block crossover, mutate
//! with a generation-decaying probability, repair back into the band
//! [0.9*budget, 1.1*budget], dedupe, merge.  The first schedule entry is
//! the forced-full warm-up step: it stays pinned at 1.0 and is excluded
//! from the budget sum.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{run_inference, NoiseSchedule, RunMode, ToyModel};
use crate::error::{AstraeaError, Result};
use crate::metrics::mse;
use crate::numerics::{Matrix, Rng};
use crate::schedule::{Schedule, GRID_STEPS};
use crate::selection::SelectionConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchConfig {
    pub population_size: usize,
    pub elite_count: usize,
    pub offspring_per_gen: usize,
    pub max_generations: usize,
    pub p0: f64,
    pub p_final: f64,
    /// Target sum of budget fractions over the searchable timesteps.
    pub budget: f64,
    pub prompt_seeds: Vec<u64>,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            population_size: 50,
            elite_count: 10,
            offspring_per_gen: 50,
            max_generations: 10,
            p0: 0.1,
            p_final: 0.01,
            budget: 0.0, // caller sets; typically 0.5 * (T - 1)
            prompt_seeds: vec![101, 202, 303, 404],
            seed: 7,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self, timesteps: usize) -> Result<()> {
        if self.population_size == 0 || self.elite_count == 0 {
            return Err(AstraeaError::config("population and elite count must be >= 1"));
        }
        if self.elite_count > self.population_size {
            return Err(AstraeaError::config("elite_count must be <= population_size"));
        }
        if self.offspring_per_gen == 0 {
            return Err(AstraeaError::config("offspring_per_gen must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.p_final)
            || !(0.0..=1.0).contains(&self.p0)
            || self.p_final > self.p0
        {
            return Err(AstraeaError::config("need 0 <= p_final <= p0 <= 1"));
        }
        if self.prompt_seeds.is_empty() {
            return Err(AstraeaError::config("at least one prompt seed required"));
        }
        let searchable = timesteps.saturating_sub(1) as f64;
        if self.budget <= 0.0 || self.budget > searchable {
            return Err(AstraeaError::config(format!(
                "budget {} infeasible over {} searchable timesteps",
                self.budget, searchable
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Candidate {
    pub schedule: Schedule,
    pub fitness: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub best_mse: f64,
    pub mean_mse: f64,
    pub evals: usize,
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub best: Candidate,
    pub history: Vec<GenerationRecord>,
}

/// Eq-style decaying mutation probability: p0 - (g / g_max) * (p0 - p_final).
pub fn mutation_probability(generation: usize, cfg: &SearchConfig) -> f64 {
    if cfg.max_generations == 0 {
        return cfg.p0;
    }
    let frac = generation as f64 / cfg.max_generations as f64;
    cfg.p0 - frac * (cfg.p0 - cfg.p_final)
}

pub(crate) fn uniform_crossover_with(a: &Schedule, b: &Schedule, picks: &[bool]) -> Schedule {
    let tenths: Vec<u8> = picks
        .iter()
        .enumerate()
        .map(|(i, &p)| if p { a.tenths()[i] } else { b.tenths()[i] })
        .collect();
    Schedule::new(tenths).expect("parents are grid-valid")
}

pub fn uniform_crossover(a: &Schedule, b: &Schedule, rng: &mut Rng) -> Schedule {
    let picks: Vec<bool> = (0..a.len()).map(|_| rng.next_f64() < 0.5).collect();
    uniform_crossover_with(a, b, &picks)
}

pub(crate) fn block_crossover_with(a: &Schedule, b: &Schedule, start: usize, end: usize) -> Schedule {
    let tenths: Vec<u8> = (0..a.len())
        .map(|i| {
            if i >= start && i < end {
                a.tenths()[i]
            } else {
                b.tenths()[i]
            }
        })
        .collect();
    Schedule::new(tenths).expect("parents are grid-valid")
}

pub fn block_crossover(a: &Schedule, b: &Schedule, rng: &mut Rng) -> Schedule {
    let t = a.len();
    // contiguous window [start, end) with at least one index
    let start = rng.choice(t).expect("t >= 1");
    let end = start + 1 + rng.choice(t - start).expect("t > start");
    block_crossover_with(a, b, start, end)
}

/// Random pick between uniform and block crossover.
pub fn crossover(a: &Schedule, b: &Schedule, rng: &mut Rng) -> Result<Schedule> {
    if a.len() != b.len() {
        return Err(AstraeaError::domain("crossover parents must share length"));
    }
    if rng.next_f64() < 0.5 {
        Ok(uniform_crossover(a, b, rng))
    } else {
        Ok(block_crossover(a, b, rng))
    }
}

/// Independently mutate each entry with probability `p`; a mutation event
/// always re-draws to a *different* grid value.
pub fn mutate(s: &Schedule, p: f64, rng: &mut Rng) -> Result<Schedule> {
    if !(0.0..=1.0).contains(&p) {
        return Err(AstraeaError::domain(format!("mutation probability {p}")));
    }
    let mut tenths = s.tenths().to_vec();
    for v in tenths.iter_mut() {
        if rng.next_f64() < p {
            loop {
                let draw = (rng.next_u64() % (GRID_STEPS as u64 + 1)) as u8;
                if draw != *v {
                    *v = draw;
                    break;
                }
            }
        }
    }
    Schedule::new(tenths)
}

/// Step the schedule back into [0.9*budget, 1.1*budget] by unit grid moves
/// on uniformly chosen indices at or after `fixed_prefix`.
pub fn repair(s: &Schedule, budget: f64, fixed_prefix: usize, rng: &mut Rng) -> Schedule {
    let mut tenths = s.tenths().to_vec();
    let lo = 0.9 * budget;
    let hi = 1.1 * budget;
    let sum = |t: &[u8]| t[fixed_prefix..].iter().map(|&v| v as f64 / 10.0).sum::<f64>();
    let free = tenths.len() - fixed_prefix;
    loop {
        let total = sum(&tenths);
        if total > hi {
            loop {
                let i = fixed_prefix + rng.choice(free).expect("free > 0");
                if tenths[i] > 0 {
                    tenths[i] -= 1;
                    break;
                }
            }
        } else if total < lo {
            loop {
                let i = fixed_prefix + rng.choice(free).expect("free > 0");
                if tenths[i] < GRID_STEPS {
                    tenths[i] += 1;
                    break;
                }
            }
        } else {
            break;
        }
    }
    Schedule::new(tenths).expect("repair preserves grid validity")
}

fn random_schedule(timesteps: usize, budget: f64, rng: &mut Rng) -> Schedule {
    let mut tenths: Vec<u8> = (0..timesteps)
        .map(|_| (rng.next_u64() % (GRID_STEPS as u64 + 1)) as u8)
        .collect();
    tenths[0] = GRID_STEPS; // warm-up step is always full
    let s = Schedule::new(tenths).expect("grid draw is valid");
    repair(&s, budget, 1, rng)
}

/// W distinct, band-valid schedules.
pub fn init_population(cfg: &SearchConfig, timesteps: usize, rng: &mut Rng) -> Result<Vec<Candidate>> {
    cfg.validate(timesteps)?;
    let mut seen: Vec<Vec<u8>> = Vec::new();
    let mut pop = Vec::with_capacity(cfg.population_size);
    let mut attempts = 0usize;
    while pop.len() < cfg.population_size {
        let s = random_schedule(timesteps, cfg.budget, rng);
        if seen.contains(&s.tenths().to_vec()) {
            attempts += 1;
            if attempts > 1000 {
                return Err(AstraeaError::config(
                    "could not draw enough distinct schedules for the population",
                ));
            }
            continue;
        }
        seen.push(s.tenths().to_vec());
        pop.push(Candidate {
            schedule: s,
            fitness: None,
        });
    }
    Ok(pop)
}

/// Mean over prompts of MSE(full output, astraea output under the schedule).
pub fn evaluate_fitness(
    schedule: &Schedule,
    model: &ToyModel,
    noise: &NoiseSchedule,
    sel_cfg: &SelectionConfig,
    prompt_seeds: &[u64],
    references: &[Matrix],
) -> Result<f64> {
    let mut total = 0.0;
    for (seed, reference) in prompt_seeds.iter().zip(references) {
        let (out, _) = run_inference(model, schedule, RunMode::Astraea, noise, sel_cfg, *seed)?;
        total += mse(reference, &out)?;
    }
    Ok(total / prompt_seeds.len() as f64)
}

/// Ground-truth full-mode outputs, one per prompt seed.
pub fn reference_outputs(
    model: &ToyModel,
    noise: &NoiseSchedule,
    sel_cfg: &SelectionConfig,
    prompt_seeds: &[u64],
) -> Result<Vec<Matrix>> {
    let full = Schedule::uniform(model.cfg.timesteps, GRID_STEPS)?;
    prompt_seeds
        .iter()
        .map(|&seed| {
            run_inference(model, &full, RunMode::Full, noise, sel_cfg, seed).map(|(out, _)| out)
        })
        .collect()
}

struct Evaluator<'a> {
    model: &'a ToyModel,
    noise: &'a NoiseSchedule,
    sel_cfg: &'a SelectionConfig,
    prompt_seeds: &'a [u64],
    references: Vec<Matrix>,
    cache: HashMap<Vec<u8>, f64>,
    evals: usize,
}

impl<'a> Evaluator<'a> {
    /// Fill in fitness for every unevaluated candidate.  Evaluations are
    /// independent pure functions, so they fan out across the thread pool
    /// without affecting determinism.
    fn evaluate_all(&mut self, pop: &mut [Candidate]) -> Result<()> {
        let todo: Vec<usize> = pop
            .iter()
            .enumerate()
            .filter(|(_, c)| c.fitness.is_none())
            .map(|(i, _)| i)
            .collect();
        let mut fresh: Vec<(usize, Option<f64>)> = Vec::with_capacity(todo.len());
        let mut pending: Vec<usize> = Vec::new();
        for &i in &todo {
            match self.cache.get(pop[i].schedule.tenths()) {
                Some(&f) => fresh.push((i, Some(f))),
                None => pending.push(i),
            }
        }
        let computed: Vec<(usize, Result<f64>)> = pending
            .par_iter()
            .map(|&i| {
                let f = evaluate_fitness(
                    &pop[i].schedule,
                    self.model,
                    self.noise,
                    self.sel_cfg,
                    self.prompt_seeds,
                    &self.references,
                );
                (i, f)
            })
            .collect();
        for (i, f) in computed {
            let f = f?;
            self.cache.insert(pop[i].schedule.tenths().to_vec(), f);
            self.evals += 1;
            fresh.push((i, Some(f)));
        }
        for (i, f) in fresh {
            pop[i].fitness = f;
        }
        Ok(())
    }
}

fn record(pop: &[Candidate], generation: usize, evals: usize) -> GenerationRecord {
    let mut best = f64::INFINITY;
    let mut sum = 0.0;
    for c in pop {
        let f = c.fitness.expect("population evaluated");
        sum += f;
        if f < best {
            best = f;
        }
    }
    GenerationRecord {
        generation,
        best_mse: best,
        mean_mse: sum / pop.len() as f64,
        evals,
    }
}

/// Full elitist search loop.  Pure in (config, model, seeds): identical
/// inputs give identical history.
pub fn run_search(
    cfg: &SearchConfig,
    model: &ToyModel,
    noise: &NoiseSchedule,
    sel_cfg: &SelectionConfig,
) -> Result<SearchResult> {
    let timesteps = model.cfg.timesteps;
    cfg.validate(timesteps)?;
    let mut rng = Rng::new(cfg.seed);
    let mut evaluator = Evaluator {
        model,
        noise,
        sel_cfg,
        prompt_seeds: &cfg.prompt_seeds,
        references: reference_outputs(model, noise, sel_cfg, &cfg.prompt_seeds)?,
        cache: HashMap::new(),
        evals: 0,
    };

    let mut pop = init_population(cfg, timesteps, &mut rng)?;
    evaluator.evaluate_all(&mut pop)?;
    let mut history = vec![record(&pop, 0, evaluator.evals)];

    for generation in 1..=cfg.max_generations {
        // elites: lowest fitness, stable under ties
        let mut order: Vec<usize> = (0..pop.len()).collect();
        order.sort_by(|&a, &b| {
            pop[a]
                .fitness
                .unwrap()
                .total_cmp(&pop[b].fitness.unwrap())
                .then(a.cmp(&b))
        });
        let elites: Vec<Candidate> = order[..cfg.elite_count]
            .iter()
            .map(|&i| pop[i].clone())
            .collect();

        let p_mut = mutation_probability(generation - 1, cfg);
        let needed = cfg
            .offspring_per_gen
            .max(cfg.population_size.saturating_sub(cfg.elite_count));
        let mut next: Vec<Candidate> = elites.clone();
        let mut seen: Vec<Vec<u8>> = next
            .iter()
            .map(|c| c.schedule.tenths().to_vec())
            .collect();
        let mut produced = 0usize;
        let mut tries = 0usize;
        while produced < needed {
            let pa = rng.choice(cfg.elite_count)?;
            let pb = if cfg.elite_count > 1 {
                let mut j = rng.choice(cfg.elite_count - 1)?;
                if j >= pa {
                    j += 1;
                }
                j
            } else {
                pa
            };
            let child = crossover(&elites[pa].schedule, &elites[pb].schedule, &mut rng)?;
            let mut child = mutate(&child, p_mut, &mut rng)?;
            child.tenths_mut()[0] = GRID_STEPS; // keep the warm-up step pinned
            let child = repair(&child, cfg.budget, 1, &mut rng);
            let key = child.tenths().to_vec();
            if seen.contains(&key) {
                tries += 1;
                if tries > 50 * needed {
                    // search space exhausted around the elites; accept the
                    // duplicate so the loop terminates
                } else {
                    continue;
                }
            }
            seen.push(key);
            next.push(Candidate {
                schedule: child,
                fitness: None,
            });
            produced += 1;
        }
        next.truncate(cfg.population_size);
        pop = next;
        evaluator.evaluate_all(&mut pop)?;
        history.push(record(&pop, generation, evaluator.evals));
    }

    let best = pop
        .iter()
        .min_by(|a, b| a.fitness.unwrap().total_cmp(&b.fitness.unwrap()))
        .expect("population nonempty")
        .clone();
    Ok(SearchResult { best, history })
}
