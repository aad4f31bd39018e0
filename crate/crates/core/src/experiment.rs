//! Sweep driver: runs the bootstrap over a grid of
//! strategy × noise ratio × seed-set size × seed, evaluates each cell,
//! and writes per-run artifacts plus a machine-readable summary.
//!
//! A failed cell is recorded (with its error) and the sweep continues;
//! the summary says how many cells failed so callers can decide the exit
//! status.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bootstrap::{run_bootstrap, BootstrapConfig, RunReport};
use crate::config::Config;
use crate::dataset::{generate_synthetic, inject_noise, load_dataset, partition_seed, Dataset};
use crate::error::{Error, Result};
use crate::influence::Strategy;
use crate::metrics::{downstream_eval_seeded, selection_metrics, Metrics};

/// One grid point of the sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub strategy: Strategy,
    pub noise_ratio: f64,
    pub seed_size: usize,
    pub seed: u64,
}

impl CellSpec {
    /// File stem shared by this cell's artifacts.
    pub fn stem(&self) -> String {
        format!(
            "{}_r{:03}_m{}_s{}",
            self.strategy.as_str(),
            (self.noise_ratio * 100.0).round() as u32,
            self.seed_size,
            self.seed
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: CellSpec,
    pub recovered: usize,
    /// Precision/recall/F1 of the recovered set against the truly clean
    /// positives of the dirty set.
    pub selection: Option<Metrics>,
    /// Test F1 of a classifier trained on recovered positives + dirty
    /// negatives.
    pub downstream: Option<Metrics>,
    /// Same classifier trained on the raw dirty set, as the no-denoising
    /// reference.
    pub baseline: Option<Metrics>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub cells: Vec<CellResult>,
    pub failures: usize,
}

/// Mean metrics over seeds for one (strategy, noise ratio, seed size)
/// group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub strategy: Strategy,
    pub noise_ratio: f64,
    pub seed_size: usize,
    pub runs: usize,
    pub selection_precision: f64,
    pub selection_recall: f64,
    pub selection_f1: f64,
    pub downstream_f1: f64,
    pub baseline_f1: f64,
}

/// The datasets one cell operates on.
struct CellData {
    seed_set: Dataset,
    dirty: Dataset,
    test: Dataset,
}

fn prepare_cell(config: &Config, cell: &CellSpec) -> Result<CellData> {
    let data_seed = config.synthetic.seed ^ cell.seed;
    let (base, test) = match &config.data.path {
        Some(path) => {
            let dim = config
                .data
                .feature_dim
                .unwrap_or(config.synthetic.feature_dim);
            let loaded = load_dataset(path, dim)?;
            // Hold out a clean test split before injecting noise.
            let clean = loaded.iter().filter(|e| e.is_verified_clean()).count();
            let want = 2 * config.experiment.test_per_class;
            let held = want.min(clean / 5);
            if held < 2 {
                return Err(Error::InvalidArgument(
                    "loaded dataset has too few verified-clean examples for a test split".into(),
                ));
            }
            let (test, rest) = partition_seed(&loaded, held, data_seed ^ 0x7473)?;
            let noisy = inject_noise(&rest, cell.noise_ratio, data_seed ^ 0x6e6f, None)?;
            (noisy, test)
        }
        None => {
            let spec = config.synthetic.spec(cell.noise_ratio, data_seed);
            let base = generate_synthetic(&spec)?;
            let mut test_spec = config.synthetic.spec(0.0, data_seed ^ 0x7465_7374);
            test_spec.n_pos = config.experiment.test_per_class;
            test_spec.n_neg = config.experiment.test_per_class;
            let test = generate_synthetic(&test_spec)?;
            (base, test)
        }
    };
    let (seed_set, dirty) = partition_seed(&base, cell.seed_size, config.partition.seed ^ cell.seed)?;
    Ok(CellData { seed_set, dirty, test })
}

fn cell_bootstrap_config(config: &Config, cell: &CellSpec) -> BootstrapConfig {
    let mut cfg = config.bootstrap_config();
    cfg.selection.strategy = cell.strategy;
    cfg.seed = config.bootstrap.seed ^ cell.seed.wrapping_mul(0x9e37_79b9);
    cfg.train.seed = config.bootstrap.train.seed ^ cell.seed;
    cfg
}

/// Run one cell end to end, writing its artifacts into `out_dir`.
pub fn run_cell(config: &Config, cell: &CellSpec, out_dir: &Path) -> Result<CellResult> {
    let data = prepare_cell(config, cell)?;
    let bcfg = cell_bootstrap_config(config, cell);
    let report = run_bootstrap(&data.seed_set, &data.dirty, &bcfg)?;

    let selection = selection_metrics(&report.recovered, &data.dirty).ok();
    let downstream = downstream_eval_seeded(
        &report.recovered,
        &data.dirty,
        &data.seed_set,
        &data.test,
        &bcfg.train,
    )
    .ok();
    let all_positives: BTreeSet<String> = data
        .dirty
        .positives()
        .iter()
        .map(|e| e.id.clone())
        .collect();
    // The raw baseline also keeps the seed set so the comparison isolates
    // the selection step.
    let baseline = downstream_eval_seeded(
        &all_positives,
        &data.dirty,
        &data.seed_set,
        &data.test,
        &bcfg.train,
    )
    .ok();

    write_run_artifacts(&report, out_dir, &cell.stem())?;
    Ok(CellResult {
        cell: *cell,
        recovered: report.recovered.len(),
        selection,
        downstream,
        baseline,
        error: None,
    })
}

/// JSON report plus history and score CSVs for one bootstrap run.
pub fn write_run_artifacts(report: &RunReport, out_dir: &Path, stem: &str) -> Result<()> {
    let json_path = out_dir.join(format!("{stem}.json"));
    let file = File::create(&json_path).map_err(|e| Error::io(&json_path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), report)?;

    let hist_path = out_dir.join(format!("{stem}.history.csv"));
    let mut w = csv_writer(&hist_path)?;
    writeln!(
        w,
        "iteration,clean_size,candidates,admitted,precision,recall,f1,noisy_admitted_fraction,seconds"
    )
    .map_err(|e| Error::io(&hist_path, e))?;
    for s in &report.history {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{:.6}",
            s.iteration,
            s.clean_size,
            s.candidates,
            s.admitted,
            opt(s.precision),
            opt(s.recall),
            opt(s.f1),
            opt(s.noisy_admitted_fraction),
            s.seconds
        )
        .map_err(|e| Error::io(&hist_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&hist_path, e))?;

    let scores_path = out_dir.join(format!("{stem}.scores.csv"));
    let mut w = csv_writer(&scores_path)?;
    writeln!(w, "example_id,iteration,strategy,score").map_err(|e| Error::io(&scores_path, e))?;
    for r in &report.scores {
        writeln!(
            w,
            "{},{},{},{}",
            r.example_id,
            r.iteration,
            r.strategy.as_str(),
            r.score
        )
        .map_err(|e| Error::io(&scores_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&scores_path, e))
}

fn csv_writer(path: &PathBuf) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// The full grid of cells implied by the experiment section.
pub fn grid(config: &Config) -> Vec<CellSpec> {
    let e = &config.experiment;
    let mut cells = Vec::new();
    for &strategy in &e.strategies {
        for &noise_ratio in &e.noise_ratios {
            for &seed_size in &e.seed_sizes {
                for &seed in &e.seeds {
                    cells.push(CellSpec {
                        strategy,
                        noise_ratio,
                        seed_size,
                        seed,
                    });
                }
            }
        }
    }
    cells
}

/// Run the whole grid, `jobs` cells at a time (0 = one per core).
/// Individual cell failures are recorded, not fatal.
pub fn run_sweep(config: &Config, out_dir: &Path, jobs: usize) -> Result<SweepSummary> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cells = grid(config);
    let run_all = || -> Vec<CellResult> {
        use rayon::prelude::*;
        cells
            .par_iter()
            .map(|cell| {
                run_cell(config, cell, out_dir).unwrap_or_else(|e| CellResult {
                    cell: *cell,
                    recovered: 0,
                    selection: None,
                    downstream: None,
                    baseline: None,
                    error: Some(e.to_string()),
                })
            })
            .collect()
    };
    let results = if jobs > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("cannot build thread pool: {e}")))?;
        pool.install(run_all)
    } else {
        run_all()
    };

    let failures = results.iter().filter(|r| r.error.is_some()).count();
    let summary = SweepSummary {
        cells: results,
        failures,
    };
    let path = out_dir.join("summary.json");
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &summary)?;
    write_summary_csv(&summary, out_dir)?;
    Ok(summary)
}

fn write_summary_csv(summary: &SweepSummary, out_dir: &Path) -> Result<()> {
    let path = out_dir.join("summary.csv");
    let mut w = csv_writer(&path)?;
    writeln!(
        w,
        "strategy,noise_ratio,seed_size,seed,recovered,selection_precision,selection_recall,selection_f1,downstream_f1,baseline_f1,error"
    )
    .map_err(|e| Error::io(&path, e))?;
    for r in &summary.cells {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.cell.strategy.as_str(),
            r.cell.noise_ratio,
            r.cell.seed_size,
            r.cell.seed,
            r.recovered,
            opt(r.selection.as_ref().map(|m| m.precision)),
            opt(r.selection.as_ref().map(|m| m.recall)),
            opt(r.selection.as_ref().map(|m| m.f1)),
            opt(r.downstream.as_ref().map(|m| m.f1)),
            opt(r.baseline.as_ref().map(|m| m.f1)),
            r.error.as_deref().unwrap_or("")
        )
        .map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Read a sweep's summary.json and average the per-cell metrics over
/// seeds. Failed cells are excluded.
pub fn aggregate(out_dir: &Path) -> Result<Vec<AggregateRow>> {
    let path = out_dir.join("summary.json");
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let summary: SweepSummary = serde_json::from_reader(std::io::BufReader::new(file))?;

    // Keyed by (strategy, rho in basis points, seed size) to keep f64 out
    // of the map key.
    let mut groups: BTreeMap<(String, u64, usize), Vec<&CellResult>> = BTreeMap::new();
    for r in summary.cells.iter().filter(|r| r.error.is_none()) {
        let key = (
            r.cell.strategy.as_str().to_string(),
            (r.cell.noise_ratio * 10_000.0).round() as u64,
            r.cell.seed_size,
        );
        groups.entry(key).or_default().push(r);
    }

    let mut rows = Vec::new();
    for ((_, rho_bp, seed_size), cells) in groups {
        let runs = cells.len();
        let mean = |f: &dyn Fn(&CellResult) -> f64| {
            cells.iter().map(|c| f(c)).sum::<f64>() / runs as f64
        };
        rows.push(AggregateRow {
            strategy: cells[0].cell.strategy,
            noise_ratio: rho_bp as f64 / 10_000.0,
            seed_size,
            runs,
            selection_precision: mean(&|c| c.selection.as_ref().map_or(0.0, |m| m.precision)),
            selection_recall: mean(&|c| c.selection.as_ref().map_or(0.0, |m| m.recall)),
            selection_f1: mean(&|c| c.selection.as_ref().map_or(0.0, |m| m.f1)),
            downstream_f1: mean(&|c| c.downstream.as_ref().map_or(0.0, |m| m.f1)),
            baseline_f1: mean(&|c| c.baseline.as_ref().map_or(0.0, |m| m.f1)),
        });
    }
    Ok(rows)
}

/// Write the aggregated table as report.csv + report.json in `out_dir`.
pub fn write_report(rows: &[AggregateRow], out_dir: &Path) -> Result<()> {
    let json_path = out_dir.join("report.json");
    let file = File::create(&json_path).map_err(|e| Error::io(&json_path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), rows)?;

    let path = out_dir.join("report.csv");
    let mut w = csv_writer(&path)?;
    writeln!(
        w,
        "strategy,noise_ratio,seed_size,runs,selection_precision,selection_recall,selection_f1,downstream_f1,baseline_f1"
    )
    .map_err(|e| Error::io(&path, e))?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.strategy.as_str(),
            r.noise_ratio,
            r.seed_size,
            r.runs,
            r.selection_precision,
            r.selection_recall,
            r.selection_f1,
            r.downstream_f1,
            r.baseline_f1
        )
        .map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_config() -> Config {
        let mut cfg = Config::default();
        cfg.synthetic.n_pos = 25;
        cfg.synthetic.n_neg = 25;
        cfg.experiment.noise_ratios = vec![0.3];
        cfg.experiment.seed_sizes = vec![10];
        cfg.experiment.seeds = vec![1, 2];
        cfg.experiment.test_per_class = 30;
        cfg.bootstrap.t_max = 4;
        cfg.bootstrap.sample_size = 40;
        cfg
    }

    #[test]
    fn grid_is_the_full_product() {
        let mut cfg = tiny_config();
        cfg.experiment.strategies = vec![Strategy::Cr2, Strategy::Conf];
        cfg.experiment.noise_ratios = vec![0.1, 0.5];
        let cells = grid(&cfg);
        assert_eq!(cells.len(), 2 * 2 * 1 * 2);
    }

    #[test]
    fn sweep_writes_artifacts_and_reports() {
        let cfg = tiny_config();
        let dir = tempdir().unwrap();
        let summary = run_sweep(&cfg, dir.path(), 2).unwrap();
        assert_eq!(summary.failures, 0);
        assert_eq!(summary.cells.len(), 2);
        for cell in &summary.cells {
            let stem = cell.cell.stem();
            assert!(dir.path().join(format!("{stem}.json")).exists());
            assert!(dir.path().join(format!("{stem}.history.csv")).exists());
            assert!(dir.path().join(format!("{stem}.scores.csv")).exists());
            assert!(cell.selection.is_some());
            assert!(cell.downstream.is_some());
            assert!(cell.baseline.is_some());
        }
        assert!(dir.path().join("summary.json").exists());
        assert!(dir.path().join("summary.csv").exists());

        let rows = aggregate(dir.path()).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].runs, 2);
        write_report(&rows, dir.path()).unwrap();
        assert!(dir.path().join("report.csv").exists());
    }

    #[test]
    fn sweep_cells_are_reproducible() {
        let cfg = tiny_config();
        let dir_a = tempdir().unwrap();
        let dir_b = tempdir().unwrap();
        let a = run_sweep(&cfg, dir_a.path(), 1).unwrap();
        let b = run_sweep(&cfg, dir_b.path(), 2).unwrap();
        assert_eq!(a, b);
        let stem = a.cells[0].cell.stem();
        let ja = std::fs::read_to_string(dir_a.path().join(format!("{stem}.json"))).unwrap();
        let jb = std::fs::read_to_string(dir_b.path().join(format!("{stem}.json"))).unwrap();
        assert_eq!(ja, jb);
    }

    #[test]
    fn failed_cell_is_recorded_not_fatal() {
        let mut cfg = tiny_config();
        // seed set larger than the verified-clean pool
        cfg.experiment.seed_sizes = vec![10_000];
        let dir = tempdir().unwrap();
        let summary = run_sweep(&cfg, dir.path(), 1).unwrap();
        assert_eq!(summary.failures, summary.cells.len());
        assert!(summary.cells.iter().all(|c| c.error.is_some()));
    }

    #[test]
    fn denoising_beats_no_denoising_at_high_noise() {
        let mut cfg = tiny_config();
        cfg.synthetic.n_pos = 60;
        cfg.synthetic.n_neg = 60;
        cfg.experiment.noise_ratios = vec![0.6];
        cfg.experiment.seeds = vec![3];
        cfg.bootstrap.t_max = 6;
        let dir = tempdir().unwrap();
        let summary = run_sweep(&cfg, dir.path(), 0).unwrap();
        let cell = &summary.cells[0];
        let sel = cell.selection.as_ref().unwrap();
        assert!(
            sel.precision > 0.6,
            "selection precision {} at rho=0.6",
            sel.precision
        );
    }
}
