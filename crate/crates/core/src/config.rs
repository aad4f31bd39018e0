//! Flat key=value configuration with dotted section prefixes, e.g.
//!
//! ```text
//! # two overlapping clusters, half the positives noisy
//! synthetic.n_pos = 150
//! synthetic.noise_ratio = 0.5
//! bootstrap.t_max = 8
//! selection.strategy = cr2
//! ```
//!
//! Every key has a default; unknown keys are hard errors so typos
//! surface immediately.

use std::path::{Path, PathBuf};

use crate::bootstrap::BootstrapConfig;
use crate::dataset::SyntheticSpec;
use crate::error::{Error, Result};
use crate::influence::{LissaConfig, Solver, Strategy};
use crate::model::Backend;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSection {
    pub n_pos: usize,
    pub n_neg: usize,
    pub noise_ratio: f64,
    pub feature_dim: usize,
    pub mean_offset: f64,
    pub std_dev: f64,
    pub seed: u64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        SyntheticSection {
            n_pos: 150,
            n_neg: 150,
            noise_ratio: 0.5,
            feature_dim: 10,
            mean_offset: 1.0,
            std_dev: 1.5,
            seed: 0,
        }
    }
}

impl SyntheticSection {
    pub fn spec(&self, noise_ratio: f64, seed: u64) -> SyntheticSpec {
        SyntheticSpec::two_cluster(
            self.n_pos,
            self.n_neg,
            noise_ratio,
            self.feature_dim,
            self.mean_offset,
            self.std_dev,
            seed,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DataSection {
    /// When set, datasets are loaded from this JSONL file instead of
    /// generated.
    pub path: Option<PathBuf>,
    pub feature_dim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSection {
    /// |C₀|: size of the initial clean seed set.
    pub seed_size: usize,
    pub seed: u64,
}

impl Default for PartitionSection {
    fn default() -> Self {
        PartitionSection { seed_size: 10, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSection {
    pub strategies: Vec<Strategy>,
    pub noise_ratios: Vec<f64>,
    pub seed_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Clean test examples per class for downstream evaluation.
    pub test_per_class: usize,
    /// Parallel sweep cells; 0 = one per logical core.
    pub jobs: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            strategies: vec![Strategy::Cr2],
            noise_ratios: vec![0.5],
            seed_sizes: vec![10],
            seeds: vec![0],
            test_per_class: 100,
            jobs: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidateSection {
    pub train_per_class: usize,
    pub test_points: usize,
    /// Number of most-influential points to retrain; 0 = all.
    pub probe: usize,
    pub seed: u64,
}

impl Default for ValidateSection {
    fn default() -> Self {
        ValidateSection {
            train_per_class: 250,
            test_points: 4,
            probe: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LemmaSection {
    /// Per-class sizes of the large and small training sets compared.
    pub n_large: usize,
    pub n_small: usize,
    /// Independent seeds to median over.
    pub seeds: usize,
    pub seed: u64,
}

impl Default for LemmaSection {
    fn default() -> Self {
        LemmaSection {
            n_large: 250,
            n_small: 25,
            seeds: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverChoice {
    Exact,
    Lissa,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub synthetic: SyntheticSection,
    pub data: DataSection,
    pub bootstrap: BootstrapConfig,
    pub lissa: LissaConfig,
    pub solver: SolverChoiceDefault,
    pub partition: PartitionSection,
    pub experiment: ExperimentSection,
    pub validate: ValidateSection,
    pub lemma: LemmaSection,
}

/// Newtype so Config can derive Default with Exact as the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SolverChoiceDefault(pub SolverChoice);

impl Default for SolverChoiceDefault {
    fn default() -> Self {
        SolverChoiceDefault(SolverChoice::Exact)
    }
}

impl Config {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Config> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got `{line}`", idx + 1))
            })?;
            cfg.apply(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", idx + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// The inverse-HVP backend implied by the config.
    pub fn solver(&self) -> Solver {
        match self.solver.0 {
            SolverChoice::Exact => Solver::Exact,
            SolverChoice::Lissa => Solver::Lissa(self.lissa.clone()),
        }
    }

    /// The bootstrap settings with the solver choice folded in.
    pub fn bootstrap_config(&self) -> BootstrapConfig {
        let mut cfg = self.bootstrap.clone();
        cfg.solver = self.solver();
        cfg
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "synthetic.n_pos" => self.synthetic.n_pos = parse(key, value)?,
            "synthetic.n_neg" => self.synthetic.n_neg = parse(key, value)?,
            "synthetic.noise_ratio" => self.synthetic.noise_ratio = parse(key, value)?,
            "synthetic.feature_dim" => self.synthetic.feature_dim = parse(key, value)?,
            "synthetic.mean_offset" => self.synthetic.mean_offset = parse(key, value)?,
            "synthetic.std_dev" => self.synthetic.std_dev = parse(key, value)?,
            "synthetic.seed" => self.synthetic.seed = parse(key, value)?,

            "data.path" => self.data.path = Some(PathBuf::from(value)),
            "data.feature_dim" => self.data.feature_dim = Some(parse(key, value)?),

            "train.damping" => self.bootstrap.train.damping = parse(key, value)?,
            "train.learning_rate" => self.bootstrap.train.learning_rate = parse(key, value)?,
            "train.max_iters" => self.bootstrap.train.max_iters = parse(key, value)?,
            "train.grad_tol" => self.bootstrap.train.grad_tol = parse(key, value)?,
            "train.seed" => self.bootstrap.train.seed = parse(key, value)?,
            "train.hidden_dim" => self.bootstrap.train.hidden_dim = parse(key, value)?,
            "train.backend" => {
                self.bootstrap.train.backend = match value.to_ascii_lowercase().as_str() {
                    "linear" => Backend::Linear,
                    "mlp1" => Backend::Mlp1,
                    other => {
                        return Err(Error::Config(format!("unknown backend `{other}`")));
                    }
                }
            }

            "consistency.alpha" => self.bootstrap.consistency.alpha = parse(key, value)?,
            "consistency.beta" => self.bootstrap.consistency.beta = parse(key, value)?,

            "selection.relaxation" => self.bootstrap.selection.relaxation = parse(key, value)?,
            "selection.vote_k" => self.bootstrap.selection.vote_k = parse(key, value)?,
            "selection.cap_fraction" => self.bootstrap.selection.cap_fraction = parse(key, value)?,
            "selection.strategy" => self.bootstrap.selection.strategy = value.parse()?,

            "bootstrap.t_max" => self.bootstrap.t_max = parse(key, value)?,
            "bootstrap.sample_size" => self.bootstrap.sample_size = parse(key, value)?,
            "bootstrap.seed" => self.bootstrap.seed = parse(key, value)?,

            "influence.solver" => {
                self.solver.0 = match value.to_ascii_lowercase().as_str() {
                    "exact" => SolverChoice::Exact,
                    "lissa" => SolverChoice::Lissa,
                    other => return Err(Error::Config(format!("unknown solver `{other}`"))),
                }
            }
            "lissa.depth" => self.lissa.depth = parse(key, value)?,
            "lissa.scale" => self.lissa.scale = parse(key, value)?,
            "lissa.repeats" => self.lissa.repeats = parse(key, value)?,
            "lissa.batch_size" => self.lissa.batch_size = parse(key, value)?,
            "lissa.seed" => self.lissa.seed = parse(key, value)?,

            "partition.seed_size" => self.partition.seed_size = parse(key, value)?,
            "partition.seed" => self.partition.seed = parse(key, value)?,

            "experiment.strategies" => {
                self.experiment.strategies = parse_list(key, value, str::parse::<Strategy>)?
            }
            "experiment.noise_ratios" => {
                self.experiment.noise_ratios = parse_list(key, value, |s| parse("noise_ratio", s))?
            }
            "experiment.seed_sizes" => {
                self.experiment.seed_sizes = parse_list(key, value, |s| parse("seed_size", s))?
            }
            "experiment.seeds" => {
                self.experiment.seeds = parse_list(key, value, |s| parse("seed", s))?
            }
            "experiment.test_per_class" => self.experiment.test_per_class = parse(key, value)?,
            "experiment.jobs" => self.experiment.jobs = parse(key, value)?,

            "validate.train_per_class" => self.validate.train_per_class = parse(key, value)?,
            "validate.test_points" => self.validate.test_points = parse(key, value)?,
            "validate.probe" => self.validate.probe = parse(key, value)?,
            "validate.seed" => self.validate.seed = parse(key, value)?,

            "lemma.n_large" => self.lemma.n_large = parse(key, value)?,
            "lemma.n_small" => self.lemma.n_small = parse(key, value)?,
            "lemma.seeds" => self.lemma.seeds = parse(key, value)?,
            "lemma.seed" => self.lemma.seed = parse(key, value)?,

            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.experiment.strategies.is_empty() {
            return Err(Error::Config("experiment.strategies must be nonempty".into()));
        }
        for r in &self.experiment.noise_ratios {
            if !(0.0..1.0).contains(r) {
                return Err(Error::Config(format!("noise ratio {r} outside [0,1)")));
            }
        }
        if !(0.0..1.0).contains(&self.synthetic.noise_ratio) {
            return Err(Error::Config(format!(
                "synthetic.noise_ratio {} outside [0,1)",
                self.synthetic.noise_ratio
            )));
        }
        self.bootstrap
            .selection
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("bad value for {key}: {e}")))
}

fn parse_list<T>(key: &str, value: &str, item: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    let items: Vec<T> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(&item)
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::Config(format!("{key} must list at least one value")));
    }
    Ok(items)
}
