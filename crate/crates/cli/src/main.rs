//! `astraea` CLI: generate / search / sweep / flops / verify.
//!
//! Every subcommand is deterministic given its config file and seeds;
//! artifacts under `--out` are byte-stable across reruns.  Wall-clock
//! timings go to the log (`ASTRAEA_LOG=info`), never into artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use astraea_core::config::{parse_run_config, RunConfig, ScheduleSpec};
use astraea_core::diffusion::{build_toy_model, run_inference, skip_one_sweep, RunMode};
use astraea_core::error::AstraeaError;
use astraea_core::flops::{flops_sparse_run, FlopsConfig, FlopsReport};
use astraea_core::metrics::{mse, psnr};
use astraea_core::schedule::Schedule;
use astraea_core::search::run_search;
use astraea_core::verify::run_all;
use astraea_core::{Matrix, Result};

#[derive(Parser)]
#[command(name = "astraea", version, about = "Token-selective sparse diffusion inference engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Run configuration file (key=value sections); defaults apply if omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the run mode from the config.
    #[arg(long)]
    mode: Option<String>,
    /// Override the budget: uniform fraction in [0,1] for generate/flops,
    /// total schedule budget for search.
    #[arg(long)]
    budget: Option<f64>,
    /// Override the primary seed (prompt seed for generate/sweep, search
    /// seed for search).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for fitness evaluations and sweeps (0 = all cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run inference and write the final grid plus metrics.
    Generate(CommonArgs),
    /// Evolutionary search for a budget schedule; writes history + best schedule.
    Search(CommonArgs),
    /// Skip-one-timestep MSE sweep across prompt seeds.
    Sweep(CommonArgs),
    /// Print the analytic FLOPs table for the configured model.
    Flops(CommonArgs),
    /// Run the built-in self-checks; optionally validate a schedule file.
    Verify {
        /// Schedule file to validate in addition to the built-in checks.
        #[arg(long)]
        schedule: Option<PathBuf>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter("ASTRAEA_LOG")).init();
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    };
    std::process::exit(code);
}

fn load_config(args: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| AstraeaError::config(format!("config {}: {e}", path.display())))?;
            let base = path.parent().unwrap_or(Path::new("."));
            parse_run_config(&text, base)?
        }
        None => RunConfig::default(),
    };
    if let Some(mode) = &args.mode {
        cfg.mode = mode.parse()?;
    }
    if let Some(seed) = args.seed {
        cfg.prompt_seed = seed;
        cfg.search.seed = seed;
    }
    Ok(cfg)
}

fn apply_uniform_budget(cfg: &mut RunConfig, budget: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&budget) {
        return Err(AstraeaError::config(format!(
            "--budget {budget} must be in [0,1] for this subcommand"
        )));
    }
    let tenths = (budget * 10.0).round() as u8;
    cfg.schedule = ScheduleSpec::Uniform(tenths);
    Ok(())
}

fn init_threads(jobs: usize) {
    if jobs > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
}

fn write_artifact(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, contents)?;
    Ok(path)
}

fn grid_csv(grid: &Matrix) -> String {
    let mut s = String::new();
    for c in 0..grid.cols() {
        if c > 0 {
            s.push(',');
        }
        let _ = write!(s, "c{c}");
    }
    s.push('\n');
    for r in 0..grid.rows() {
        for c in 0..grid.cols() {
            if c > 0 {
                s.push(',');
            }
            let _ = write!(s, "{}", grid.get(r, c));
        }
        s.push('\n');
    }
    s
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Search(args) => cmd_search(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Flops(args) => cmd_flops(args),
        Command::Verify { schedule } => cmd_verify(schedule),
    }
}

fn cmd_generate(args: CommonArgs) -> Result<i32> {
    init_threads(args.jobs);
    let mut cfg = load_config(&args)?;
    if let Some(b) = args.budget {
        apply_uniform_budget(&mut cfg, b)?;
    }
    let started = Instant::now();
    let model = build_toy_model(&cfg.model)?;
    let noise = cfg.noise_schedule()?;
    let schedule = cfg.resolve_schedule()?;
    let (out, stats) = run_inference(&model, &schedule, cfg.mode, &noise, &cfg.selection, cfg.prompt_seed)?;

    let mut metrics = String::from("{\n");
    let _ = writeln!(metrics, "  \"mode\": \"{}\",", cfg.mode);
    if cfg.mode == RunMode::Full {
        metrics.push_str("  \"mse\": null,\n  \"psnr_db\": null,\n");
    } else {
        let full_sched = Schedule::uniform(cfg.model.timesteps, 10)?;
        let (reference, _) = run_inference(
            &model,
            &full_sched,
            RunMode::Full,
            &noise,
            &cfg.selection,
            cfg.prompt_seed,
        )?;
        let m = mse(&reference, &out)?;
        let peak = reference.max_abs();
        let p = psnr(m, peak)?;
        let _ = writeln!(metrics, "  \"mse\": {m},");
        if p.is_infinite() {
            metrics.push_str("  \"psnr_db\": \"inf\",\n");
        } else {
            let _ = writeln!(metrics, "  \"psnr_db\": {p},");
        }
    }
    let _ = writeln!(metrics, "  \"flops_total\": {},", stats.flops.total);
    let per_step: Vec<usize> = stats.selected_per_step.iter().map(|b| b.iter().sum()).collect();
    let _ = write!(metrics, "  \"selected_tokens_per_timestep\": {per_step:?}\n}}\n");

    let grid_path = write_artifact(&args.out, "grid.csv", &grid_csv(&out))?;
    let metrics_path = write_artifact(&args.out, "metrics.json", &metrics)?;
    let stats_path = write_artifact(&args.out, "run_stats.json", &(stats.to_json() + "\n"))?;
    log::info!("generate finished in {:.3}s", started.elapsed().as_secs_f64());
    println!(
        "wrote {} {} {}",
        grid_path.display(),
        metrics_path.display(),
        stats_path.display()
    );
    Ok(0)
}

fn cmd_search(args: CommonArgs) -> Result<i32> {
    init_threads(args.jobs);
    let mut cfg = load_config(&args)?;
    if let Some(b) = args.budget {
        cfg.search.budget = b;
    }
    let started = Instant::now();
    let model = build_toy_model(&cfg.model)?;
    let noise = cfg.noise_schedule()?;
    let result = run_search(&cfg.search, &model, &noise, &cfg.selection)?;

    let mut csv = String::from("generation,best_mse,mean_mse,evals\n");
    for rec in &result.history {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            rec.generation, rec.best_mse, rec.mean_mse, rec.evals
        );
    }
    let history_path = write_artifact(&args.out, "history.csv", &csv)?;
    let sched_path = write_artifact(&args.out, "best_schedule.txt", &result.best.schedule.render())?;
    log::info!("search finished in {:.3}s", started.elapsed().as_secs_f64());
    println!(
        "best_mse={} wrote {} {}",
        result.best.fitness.unwrap_or(f64::NAN),
        history_path.display(),
        sched_path.display()
    );
    Ok(0)
}

fn cmd_sweep(args: CommonArgs) -> Result<i32> {
    init_threads(args.jobs);
    let cfg = load_config(&args)?;
    let started = Instant::now();
    let model = build_toy_model(&cfg.model)?;
    let noise = cfg.noise_schedule()?;
    let seeds = if let Some(seed) = args.seed {
        vec![seed]
    } else {
        cfg.prompt_seeds.clone()
    };
    use rayon::prelude::*;
    let columns: Vec<Vec<f64>> = seeds
        .par_iter()
        .map(|&s| skip_one_sweep(&model, &noise, s))
        .collect::<Result<_>>()?;

    let mut csv = String::from("timestep");
    for s in &seeds {
        let _ = write!(csv, ",seed_{s}");
    }
    csv.push('\n');
    for t in 0..cfg.model.timesteps {
        let _ = write!(csv, "{t}");
        for col in &columns {
            let _ = write!(csv, ",{}", col[t]);
        }
        csv.push('\n');
    }
    let path = write_artifact(&args.out, "sweep.csv", &csv)?;
    log::info!("sweep finished in {:.3}s", started.elapsed().as_secs_f64());
    println!("wrote {}", path.display());
    Ok(0)
}

fn flops_table(report: &FlopsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<14} {:>20}", "operator", "flops");
    let rows = [
        ("qkv_proj", report.qkv_proj),
        ("attn_scores", report.attn_scores),
        ("attn_output", report.attn_output),
        ("out_proj", report.out_proj),
        ("cross_attn", report.cross_attn),
        ("mlp", report.mlp),
        ("total", report.total),
        ("softmax*", report.softmax),
    ];
    for (name, v) in rows {
        let _ = writeln!(s, "{name:<14} {v:>20}");
    }
    s.push_str("(*softmax is reported separately and excluded from total)\n");
    s
}

fn cmd_flops(args: CommonArgs) -> Result<i32> {
    let mut cfg = load_config(&args)?;
    if let Some(b) = args.budget {
        apply_uniform_budget(&mut cfg, b)?;
    }
    let schedule = cfg.resolve_schedule()?;
    let run = flops_sparse_run(&cfg.model, &schedule, cfg.mode)?;
    let dense_cfg = FlopsConfig {
        batch: 1,
        n_tokens: cfg.model.n_tokens as u128,
        n_query: cfg.model.n_tokens as u128,
        n_context: cfg.model.context_tokens as u128,
        embed_dim: cfg.model.channels as u128,
        n_heads: 1,
    };
    let dense = astraea_core::flops::flops_self_attention(&dense_cfg)?;
    println!("dense self-attention, one block, one timestep:");
    print!("{}", flops_table(&dense));
    println!();
    println!(
        "run totals ({} mode, {} blocks x {} timesteps):",
        cfg.mode, cfg.model.n_blocks, cfg.model.timesteps
    );
    print!("{}", flops_table(&run));
    Ok(0)
}

fn cmd_verify(schedule: Option<PathBuf>) -> Result<i32> {
    let mut failures = 0usize;
    println!("{:<28} {:<6} detail", "check", "status");
    for c in run_all() {
        let status = if c.passed { "PASS" } else { "FAIL" };
        if !c.passed {
            failures += 1;
        }
        println!("{:<28} {:<6} {}", c.name, status, c.detail);
    }
    if let Some(path) = schedule {
        let outcome = fs::read_to_string(&path)
            .map_err(|e| AstraeaError::config(format!("schedule {}: {e}", path.display())))
            .and_then(|text| Schedule::parse(&text));
        match outcome {
            Ok(s) => println!(
                "{:<28} {:<6} {} steps, searchable sum {}",
                "schedule_file",
                "PASS",
                s.len(),
                s.searchable_sum()
            ),
            Err(e) => {
                failures += 1;
                println!("{:<28} {:<6} {}", "schedule_file", "FAIL", e);
            }
        }
    }
    if failures == 0 {
        println!("all checks passed");
        Ok(0)
    } else {
        println!("{failures} check(s) failed");
        Ok(1)
    }
}
