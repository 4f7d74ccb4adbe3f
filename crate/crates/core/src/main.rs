use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use rats::acquisition::Strategy;
use rats::bench_sinusoid::{self, SinusoidConfig};
use rats::bench_synthetic::{self, ComparisonConfig, ConcentrationConfig};
use rats::harness::{self, RunConfig};
use rats::metrics::{self, RiskSample};
use rats::subset::{self, ScoredCandidates};
use rats::{RatsError, Result};

#[derive(Parser)]
#[command(name = "rats", version, about = "Robust active task sampling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configured experiment, writing logs and checkpoints.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seeds; each runs into `<output_dir>/seed-<n>`.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Sinusoid meta-learning comparison across strategies and seeds.
    Sinusoid {
        #[arg(long, value_delimiter = ',', default_value = "erm,gdrm,drm,mpts_ucb,pdts")]
        strategies: Vec<Strategy>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5,6")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 2000)]
        iterations: usize,
        #[arg(long, default_value_t = 100)]
        validate_every: usize,
        #[arg(long, default_value_t = 12345)]
        validation_seed: u64,
        #[arg(long, default_value = "sinusoid")]
        output: PathBuf,
    },
    /// Top-B concentration study on a 1-D bump.
    Concentration {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "concentration.csv")]
        output: PathBuf,
    },
    /// Sampler comparison on the drifting synthetic landscape.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "compare.csv")]
        output: PathBuf,
    },
    /// Choose a subset from a scored candidate CSV (coordinates..., score).
    Select {
        csv: PathBuf,
        #[arg(long)]
        b: usize,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        /// Enumerate every subset instead of the greedy search.
        #[arg(long)]
        exact: bool,
        /// `lo:hi,...`; defaults to the bounding box of the candidates.
        #[arg(long)]
        bounds: Option<String>,
    },
    /// CVaR table of a risk column.
    Eval { csv: PathBuf },
    /// Long-format CSV of every run log under a directory.
    Plotdata { dir: PathBuf },
}

fn load_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    toml::from_str(&fs::read_to_string(path)?)
        .map_err(|e| RatsError::Config {
            field: path.display().to_string(),
            message: e.to_string().trim_end().to_string(),
        })
}

fn output_file(path: &Path) -> Result<PathBuf> {
    let path = harness::resolve_output_dir(path);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(path)
}

fn run_configured(config: PathBuf, seeds: Vec<u64>) -> Result<()> {
    let base = RunConfig::load(&config)?;
    if seeds.is_empty() {
        let s = harness::run(&base)?;
        println!("{} rounds written to {}", s.rounds, s.dir.display());
        return Ok(());
    }
    let results: Vec<Result<harness::RunSummary>> = seeds
        .par_iter()
        .map(|&seed| {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.output_dir = base.output_dir.join(format!("seed-{seed}"));
            harness::run(&cfg)
        })
        .collect();
    for r in results {
        let s = r?;
        println!("{} rounds written to {}", s.rounds, s.dir.display());
    }
    Ok(())
}

fn run_sinusoid(
    strategies: Vec<Strategy>,
    seeds: Vec<u64>,
    iterations: usize,
    validate_every: usize,
    validation_seed: u64,
    output: PathBuf,
) -> Result<()> {
    let root = harness::resolve_output_dir(&output);
    let jobs: Vec<(Strategy, u64)> = strategies
        .iter()
        .flat_map(|&s| seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let reports = jobs
        .par_iter()
        .map(|&(strategy, seed)| {
            let mut cfg = SinusoidConfig::new(strategy, seed);
            cfg.iterations = iterations;
            cfg.validate_every = validate_every;
            cfg.validation_seed = validation_seed;
            let report = bench_sinusoid::run_sinusoid_experiment(&cfg)?;
            let dir = root.join(strategy.as_str()).join(format!("seed-{seed}"));
            fs::create_dir_all(&dir)?;
            bench_sinusoid::write_validation_jsonl(&report.validation, &dir.join("validation.jsonl"))?;
            bench_sinusoid::write_test_table(&report.test, strategy, &dir.join("test_table.csv"))?;
            Ok((strategy, seed, report.test))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut w = csv::Writer::from_path(root.join("test_summary.csv"))?;
    w.write_record(["strategy", "seed", "alpha", "cvar_mse"])?;
    for (strategy, seed, rows) in &reports {
        for r in rows {
            w.write_record([
                strategy.as_str().to_string(),
                seed.to_string(),
                r.alpha.to_string(),
                r.cvar_mse.to_string(),
            ])?;
        }
    }
    w.flush()?;
    println!("wrote {}", root.join("test_summary.csv").display());
    Ok(())
}

fn select(csv: PathBuf, b: usize, gamma: f64, exact: bool, bounds: Option<String>) -> Result<()> {
    let (ids, scores) = harness::read_scored_csv(&csv)?;
    let space = match bounds {
        Some(text) => harness::parse_bounds(&text)?,
        None => harness::bounding_space(&ids)?,
    };
    let cands = ScoredCandidates::new(ids, scores)?;
    let (chosen, obj) = if exact {
        subset::brute_force_diverse(&space, &cands, b, gamma)?
    } else {
        let chosen = subset::greedy_diverse(&space, &cands, b, gamma)?;
        let obj = subset::objective(&space, &cands, &chosen, gamma);
        (chosen, obj)
    };
    println!("index,score");
    for &i in &chosen {
        println!("{i},{}", cands.scores()[i]);
    }
    eprintln!(
        "score_term={} diversity={} total={}",
        obj.score_term, obj.diversity, obj.total
    );
    Ok(())
}

fn eval(csv: PathBuf) -> Result<()> {
    let sample = RiskSample::new(harness::read_risks_csv(&csv)?)?;
    println!("alpha,cvar");
    for alpha in bench_sinusoid::TEST_ALPHAS {
        println!("{alpha},{}", metrics::cvar_tail_mean(&sample, alpha)?);
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, seeds } => run_configured(config, seeds),
        Command::Sinusoid {
            strategies,
            seeds,
            iterations,
            validate_every,
            validation_seed,
            output,
        } => run_sinusoid(strategies, seeds, iterations, validate_every, validation_seed, output),
        Command::Concentration { config, output } => {
            let cfg: ConcentrationConfig = match config {
                Some(p) => load_toml(&p)?,
                None => ConcentrationConfig::default_1d(),
            };
            let rows = bench_synthetic::run_concentration_experiment(&cfg)?;
            let path = output_file(&output)?;
            bench_synthetic::write_concentration_csv(&rows, &path)?;
            for r in &rows {
                eprintln!(
                    "b_hat={} p={:.4} (se {:.4}) entropy={:.3} implied_p_eps={:.4}",
                    r.b_hat, r.p_concentrate, r.stderr, r.entropy, r.implied_p_eps
                );
            }
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Compare { config, output } => {
            let cfg: ComparisonConfig = match config {
                Some(p) => load_toml(&p)?,
                None => ComparisonConfig::default_2d(),
            };
            let rows = bench_synthetic::run_sampler_comparison(&cfg)?;
            let path = output_file(&output)?;
            bench_synthetic::write_comparison_csv(&rows, &path)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Select {
            csv,
            b,
            gamma,
            exact,
            bounds,
        } => select(csv, b, gamma, exact, bounds),
        Command::Eval { csv } => eval(csv),
        Command::Plotdata { dir } => {
            let path = harness::emit_plotdata(&dir)?;
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
