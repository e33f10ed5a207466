use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use cdetr::checkpoint::Checkpoint;
use cdetr::compare::{compare_convergence, variant_label, CompareSettings, MIN_SEEDS};
use cdetr::dump::dump_attention;
use cdetr::eval::evaluate;
use cdetr::scene::generate_scene;
use cdetr::train::{evaluation_scenes, metrics_csv, train_to_dir, Trainer, METRICS_HEADER};
use cdetr::verify::{gradient_checks, oracle_check, SuiteSize, MODULES};
use cdetr::TrainConfig;

#[derive(Parser)]
#[command(name = "cdetr", version, about = "Conditional cross-attention detector at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// 32px images, 4x4 key grid.
    Desk,
    /// 64px images, 8x8 key grid.
    Convergence,
}

#[derive(Subcommand)]
enum Command {
    /// Print a complete config as JSON.
    Config {
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
    },
    /// Train from a JSON config, writing config.json, metrics.csv and checkpoint.cdtr.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint (must carry the same config).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed iterations instead of the full budget.
        #[arg(long)]
        stop_at: Option<usize>,
    },
    /// AP50 and AP50:95 of a checkpoint on freshly generated scenes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write every decoder layer/head cross-attention map of one query as PGM and CSV.
    DumpAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scene seed.
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        query: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long)]
        module: Option<String>,
    },
    /// Hungarian matching against exhaustive search.
    OracleCheck {
        #[arg(long, default_value_t = 200)]
        matrices: usize,
        #[arg(long, default_value_t = 6)]
        max_rows: usize,
        #[arg(long, default_value_t = 8)]
        max_cols: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train conditional and additive variants per seed and compare convergence.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seeds, at least three.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        /// Interval-mean total loss that counts as converged.
        #[arg(long)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        eval_scenes: usize,
        #[arg(long, default_value_t = 0)]
        eval_seed: u64,
    },
}

fn read_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    TrainConfig::from_json(&text).with_context(|| format!("config {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn train(config: &Path, out: &Path, resume: Option<&Path>, stop_at: Option<usize>) -> Result<()> {
    let cfg = read_config(config)?;
    let ckpt = resume.map(load_checkpoint).transpose()?;
    let until = stop_at.unwrap_or(cfg.iterations);
    if until > cfg.iterations {
        bail!("--stop-at {until} exceeds the iteration budget {}", cfg.iterations);
    }
    if let Some(c) = &ckpt {
        if until < c.iteration as usize {
            bail!("--stop-at {until} is before the checkpoint iteration {}", c.iteration);
        }
    }
    println!("{METRICS_HEADER},seconds");
    train_to_dir(&cfg, out, ckpt.as_ref(), until, |r| {
        println!("{},{:.2}", r.csv_row(), r.wall_clock);
    })?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn eval(checkpoint: &Path, scenes: usize, seed: u64) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let t = Trainer::from_checkpoint(&ckpt)?;
    let set = evaluation_scenes(t.config(), seed, scenes)?;
    let r = evaluate(&t.model, &t.params, &set)?;
    println!("scenes {}", r.scenes);
    println!("ap50 {:.6}", r.ap50);
    println!("ap {:.6}", r.ap);
    Ok(())
}

fn dump(checkpoint: &Path, seed: u64, query: usize, out: &Path) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let t = Trainer::from_checkpoint(&ckpt)?;
    let scene = generate_scene(&t.config().scene, seed)?;
    let files = dump_attention(&t.model, &t.params, &scene.image, query, out)
        .with_context(|| format!("dumping maps into {}", out.display()))?;
    println!("{} files written to {}", files.len(), out.display());
    Ok(())
}

fn gradcheck(module: Option<&str>) -> Result<bool> {
    let start = Instant::now();
    let outcomes = gradient_checks(module, SuiteSize::default())
        .with_context(|| format!("modules: {}", MODULES.join(", ")))?;
    let mut ok = true;
    for o in &outcomes {
        println!(
            "{:<4} {}/{} cases={} coords={} refined={} max_rel_error={:.3e} tol={:.0e}",
            if o.passed() { "ok" } else { "FAIL" },
            o.module,
            o.name,
            o.cases,
            o.coordinates,
            o.refined,
            o.max_rel_error,
            o.tolerance
        );
        ok &= o.passed();
    }
    println!("{} checks in {:.1?}", outcomes.len(), start.elapsed());
    if !ok {
        eprintln!("violated: every checked gradient must match its central difference within tolerance");
    }
    Ok(ok)
}

fn oracle(matrices: usize, max_rows: usize, max_cols: usize, seed: u64) -> Result<bool> {
    if max_rows == 0 || max_cols < max_rows {
        bail!("need 1 <= max-rows <= max-cols, got {max_rows} and {max_cols}");
    }
    let start = Instant::now();
    let outcomes = oracle_check(matrices, max_rows, max_cols, seed)?;
    let mut total = 0;
    for o in &outcomes {
        println!("K={} N={} matrices={} mismatches={}", o.rows, o.cols, o.matrices, o.mismatches);
        total += o.mismatches;
    }
    println!("{} shapes, {total} mismatches, {:.2?}", outcomes.len(), start.elapsed());
    if total > 0 {
        eprintln!("violated: hungarian and exhaustive matching must agree exactly");
    }
    Ok(total == 0)
}

fn compare(config: &Path, seeds: Vec<u64>, threshold: f64, out: &Path, eval_scenes: usize, eval_seed: u64) -> Result<()> {
    let cfg = read_config(config)?;
    if seeds.len() < MIN_SEEDS {
        bail!("compare needs at least {MIN_SEEDS} seeds, got {}", seeds.len());
    }
    let settings = CompareSettings {
        seeds,
        threshold,
        eval_scenes,
        eval_seed,
    };
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let report = compare_convergence(&cfg, &settings, |r| {
        let reached = r
            .iterations_to_threshold
            .map_or_else(|| "not reached".to_string(), |i| format!("reached at {i}"));
        eprintln!(
            "{} seed {}: {reached}, final loss {:.4}, ap50 {:.4}",
            variant_label(r.variant),
            r.seed,
            r.final_loss,
            r.ap50
        );
        let name = format!("metrics_{}_seed{}.csv", variant_label(r.variant), r.seed);
        if let Err(e) = std::fs::write(out.join(&name), metrics_csv(&r.records)) {
            eprintln!("warning: could not write {name}: {e}");
        }
    })?;
    std::fs::write(out.join("compare.csv"), report.csv())?;
    let verdict = report.verdict();
    std::fs::write(out.join("verdict.txt"), format!("{verdict}\n"))?;
    print!("{}", report.csv());
    println!("{verdict}");
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Config { preset } => {
            let c = match preset {
                Preset::Desk => TrainConfig::desk(),
                Preset::Convergence => TrainConfig::convergence(),
            };
            println!("{}", c.to_json());
        }
        Command::Train {
            config,
            out,
            resume,
            stop_at,
        } => train(&config, &out, resume.as_deref(), stop_at)?,
        Command::Eval {
            checkpoint,
            scenes,
            seed,
        } => eval(&checkpoint, scenes, seed)?,
        Command::DumpAttn {
            checkpoint,
            seed,
            query,
            out,
        } => dump(&checkpoint, seed, query, &out)?,
        Command::Gradcheck { module } => return gradcheck(module.as_deref()),
        Command::OracleCheck {
            matrices,
            max_rows,
            max_cols,
            seed,
        } => return oracle(matrices, max_rows, max_cols, seed),
        Command::Compare {
            config,
            seeds,
            threshold,
            out,
            eval_scenes,
            eval_seed,
        } => compare(&config, seeds, threshold, &out, eval_scenes, eval_seed)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
