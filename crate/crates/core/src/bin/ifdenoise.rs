//! Command-line front end: dataset generation, single denoising runs,
//! influence validation, relabel diagnostics, sweeps, and report
//! aggregation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use ifdenoise::config::Config;
use ifdenoise::dataset::{generate_synthetic, save_dataset, Dataset};
use ifdenoise::experiment::{aggregate, run_cell, run_sweep, write_report, CellSpec};
use ifdenoise::influence::Strategy;
use ifdenoise::oracle::{if_loo_correlation, relabel_retrain_delta};
use ifdenoise::{Error, Result};

#[derive(Parser)]
#[command(name = "ifdenoise", version, about = "Influence-based denoising of distantly labelled data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic noisy dataset as JSONL.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output file (or directory; then dataset.jsonl inside it).
        #[arg(long)]
        out: PathBuf,
        /// Overrides synthetic.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the bootstrap once and report the recovered set.
    Denoise {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides every seed in the config at once.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        strategy: Option<Strategy>,
    },
    /// Compare influence estimates against leave-one-out retraining.
    ValidateIf {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides validate.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare first-order relabel updates against retraining at two
    /// training-set sizes.
    LemmaCheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides lemma.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the full strategy × noise × seed-size grid.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Parallel cells; overrides experiment.jobs.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Aggregate a sweep directory into mean-over-seeds tables.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<Config> {
    match path {
        Some(p) => Config::from_file(p).map_err(|e| match e {
            Error::Io { path, source } => {
                Error::Config(format!("cannot read {}: {source}", path.display()))
            }
            other => other,
        }),
        None => Ok(Config::default()),
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Gen { config, out, seed } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.synthetic.seed = s;
            }
            let spec = cfg
                .synthetic
                .spec(cfg.synthetic.noise_ratio, cfg.synthetic.seed);
            let ds = generate_synthetic(&spec)?;
            let path = if out.extension().is_none() {
                std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
                out.join("dataset.jsonl")
            } else {
                out
            };
            save_dataset(&ds, &path)?;
            let noisy = ds.iter().filter(|e| !e.is_verified_clean()).count();
            println!(
                "wrote {} examples ({noisy} noisy) to {}",
                ds.len(),
                path.display()
            );
            Ok(ExitCode::SUCCESS)
        }

        Command::Denoise {
            config,
            out,
            seed,
            strategy,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.synthetic.seed = s;
                cfg.partition.seed = s;
                cfg.bootstrap.seed = s;
                cfg.bootstrap.train.seed = s;
            }
            if let Some(st) = strategy {
                cfg.bootstrap.selection.strategy = st;
            }
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let cell = CellSpec {
                strategy: cfg.bootstrap.selection.strategy,
                noise_ratio: cfg.synthetic.noise_ratio,
                seed_size: cfg.partition.seed_size,
                seed: 0,
            };
            let result = run_cell(&cfg, &cell, &out)?;
            write_json(&out.join("result.json"), &result)?;
            println!("strategy {}", cell.strategy.as_str());
            println!("recovered {} instances", result.recovered);
            if let Some(m) = &result.selection {
                println!(
                    "selection precision {:.4} recall {:.4} f1 {:.4}",
                    m.precision, m.recall, m.f1
                );
            }
            if let Some(m) = &result.downstream {
                println!("downstream f1 {:.4}", m.f1);
            }
            if let Some(m) = &result.baseline {
                println!("no-denoising baseline f1 {:.4}", m.f1);
            }
            Ok(ExitCode::SUCCESS)
        }

        Command::ValidateIf { config, out, seed } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.validate.seed = s;
            }
            let v = cfg.validate.clone();
            let train = generate_synthetic(
                &cfg.synthetic
                    .spec(0.0, v.seed)
                    .with_counts(v.train_per_class, v.train_per_class),
            )?;
            let test = test_points(&cfg, v.test_points, v.seed ^ 0x7465)?;
            let probe = if v.probe == 0 {
                train.len()
            } else {
                v.probe.min(train.len())
            };
            let report = if_loo_correlation(&train, &test, &cfg.bootstrap.train, probe)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write_json(&out.join("validation.json"), &report)?;
            let csv_path = out.join("validation_pairs.csv");
            let mut lines = String::from("example_id,estimated,actual\n");
            for (id, est, act) in &report.pairs {
                lines.push_str(&format!("{id},{est},{act}\n"));
            }
            std::fs::write(&csv_path, lines).map_err(|e| Error::io(&csv_path, e))?;
            println!(
                "pearson(all {} points): {}",
                report.pairs.len(),
                fmt_corr(report.pearson_all)
            );
            println!(
                "pearson(top {}): {}",
                report.k_top,
                fmt_corr(report.pearson_topk)
            );
            println!("sign agreement (top 10): {:.2}", report.sign_agreement_topk);
            Ok(ExitCode::SUCCESS)
        }

        Command::LemmaCheck { config, out, seed } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.lemma.seed = s;
            }
            let summary = lemma_check(&cfg)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write_json(&out.join("lemma.json"), &summary)?;
            println!(
                "relabel first-order update: median relative error {:.4} at n={} vs {:.4} at n={}",
                summary.median_error_large,
                2 * cfg.lemma.n_large,
                summary.median_error_small,
                2 * cfg.lemma.n_small
            );
            Ok(ExitCode::SUCCESS)
        }

        Command::Sweep { config, out, jobs } => {
            let cfg = load_config(&config)?;
            let jobs = jobs.unwrap_or(cfg.experiment.jobs);
            let summary = run_sweep(&cfg, &out, jobs)?;
            let ok = summary.cells.len() - summary.failures;
            println!(
                "{} cells completed, {} failed; summary in {}",
                ok,
                summary.failures,
                out.join("summary.json").display()
            );
            for cell in summary.cells.iter().filter(|c| c.error.is_some()) {
                eprintln!(
                    "cell {} failed: {}",
                    cell.cell.stem(),
                    cell.error.as_deref().unwrap_or("")
                );
            }
            if summary.failures > 0 {
                Ok(ExitCode::from(1))
            } else {
                Ok(ExitCode::SUCCESS)
            }
        }

        Command::Report { out } => {
            let rows = aggregate(&out)?;
            write_report(&rows, &out)?;
            println!("strategy  rho   |C0|  runs  sel-P   sel-R   sel-F1  down-F1 base-F1");
            for r in &rows {
                println!(
                    "{:<9} {:<5} {:<5} {:<5} {:.4}  {:.4}  {:.4}  {:.4}  {:.4}",
                    r.strategy.as_str(),
                    r.noise_ratio,
                    r.seed_size,
                    r.runs,
                    r.selection_precision,
                    r.selection_recall,
                    r.selection_f1,
                    r.downstream_f1,
                    r.baseline_f1
                );
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

/// A handful of clean evaluation points, half per class.
fn test_points(cfg: &Config, count: usize, seed: u64) -> Result<Dataset> {
    let count = count.max(2);
    let spec = cfg
        .synthetic
        .spec(0.0, seed)
        .with_counts(count - count / 2, count / 2);
    generate_synthetic(&spec)
}

#[derive(Debug, Serialize)]
struct LemmaRun {
    n_per_class: usize,
    seed: u64,
    relative_error: f64,
    encoder_norm: f64,
    class_embedding_gap: f64,
}

#[derive(Debug, Serialize)]
struct LemmaSummary {
    runs: Vec<LemmaRun>,
    median_error_large: f64,
    median_error_small: f64,
}

fn lemma_check(cfg: &Config) -> Result<LemmaSummary> {
    let l = &cfg.lemma;
    let mut runs = Vec::new();
    for s in 0..l.seeds {
        for n in [l.n_large, l.n_small] {
            let seed = l.seed ^ (s as u64).wrapping_mul(7919);
            let ds = generate_synthetic(&cfg.synthetic.spec(0.0, seed).with_counts(n, n))?;
            let z = ds.examples()[0].clone();
            let diag = relabel_retrain_delta(&ds, &z, &cfg.bootstrap.train)?;
            runs.push(LemmaRun {
                n_per_class: n,
                seed,
                relative_error: diag.relative_error,
                encoder_norm: diag.encoder_norm,
                class_embedding_gap: diag.class_embedding_gap,
            });
        }
    }
    let median = |n: usize| {
        let mut errs: Vec<f64> = runs
            .iter()
            .filter(|r| r.n_per_class == n)
            .map(|r| r.relative_error)
            .collect();
        errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if errs.is_empty() {
            f64::NAN
        } else {
            errs[errs.len() / 2]
        }
    };
    Ok(LemmaSummary {
        median_error_large: median(l.n_large),
        median_error_small: median(l.n_small),
        runs,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), value)?;
    Ok(())
}

fn fmt_corr(c: Option<f64>) -> String {
    c.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into())
}
