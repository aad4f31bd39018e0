//! Instance representation, JSONL dataset I/O, synthetic data generation
//! and noise injection.
//!
//! Instances arrive pre-encoded as dense feature vectors; there is no
//! text processing anywhere in this crate. Noise is injected the way the
//! synthetic benchmark is built: negative-class instances relabelled as
//! positive and appended to the set.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One labelled instance. `label` is the observed (possibly noisy) label;
/// `true_label`, when present, is ground truth used only for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub features: Vec<f64>,
    pub label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_label: Option<u8>,
    #[serde(default = "default_weight", skip_serializing_if = "is_default_weight")]
    pub weight: f64,
}

fn default_weight() -> f64 {
    1.0
}

fn is_default_weight(w: &f64) -> bool {
    *w == 1.0
}

impl Example {
    pub fn new(id: impl Into<String>, features: Vec<f64>, label: u8, true_label: Option<u8>) -> Self {
        Example {
            id: id.into(),
            features,
            label,
            true_label,
            weight: 1.0,
        }
    }

    /// Observed label matches ground truth (and ground truth is known).
    pub fn is_verified_clean(&self) -> bool {
        self.true_label == Some(self.label)
    }

    fn validate(&self, feature_dim: usize) -> Result<()> {
        if self.features.len() != feature_dim {
            return Err(Error::DimensionMismatch {
                id: self.id.clone(),
                got: self.features.len(),
                expected: feature_dim,
            });
        }
        if self.label > 1 {
            return Err(Error::InvalidArgument(format!(
                "example `{}` has non-binary label {}",
                self.id, self.label
            )));
        }
        if let Some(t) = self.true_label {
            if t > 1 {
                return Err(Error::InvalidArgument(format!(
                    "example `{}` has non-binary true_label {}",
                    self.id, t
                )));
            }
        }
        Ok(())
    }
}

/// An ordered, immutable collection of examples with a fixed feature
/// dimension and unique ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub feature_dim: usize,
    examples: Vec<Example>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, feature_dim: usize, examples: Vec<Example>) -> Result<Self> {
        let mut seen = HashSet::new();
        for ex in &examples {
            ex.validate(feature_dim)?;
            if !seen.insert(ex.id.clone()) {
                return Err(Error::DuplicateId(ex.id.clone()));
            }
        }
        Ok(Dataset {
            name: name.into(),
            feature_dim,
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Example> {
        self.examples.iter()
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.examples.iter().find(|e| e.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.examples.iter().map(|e| e.id.as_str())
    }

    pub fn id_set(&self) -> HashSet<String> {
        self.examples.iter().map(|e| e.id.clone()).collect()
    }

    /// Examples with observed positive label, in dataset order.
    pub fn positives(&self) -> Vec<&Example> {
        self.examples.iter().filter(|e| e.label == 1).collect()
    }

    /// New dataset keeping only the examples whose id passes `keep`,
    /// preserving order.
    pub fn filtered(&self, name: impl Into<String>, keep: impl Fn(&Example) -> bool) -> Dataset {
        Dataset {
            name: name.into(),
            feature_dim: self.feature_dim,
            examples: self.examples.iter().filter(|e| keep(e)).cloned().collect(),
        }
    }

    /// Concatenate, revalidating id uniqueness.
    pub fn concat(&self, other: &Dataset, name: impl Into<String>) -> Result<Dataset> {
        if self.feature_dim != other.feature_dim {
            return Err(Error::InvalidArgument(format!(
                "cannot concat datasets with dims {} and {}",
                self.feature_dim, other.feature_dim
            )));
        }
        let mut examples = self.examples.clone();
        examples.extend(other.examples.iter().cloned());
        Dataset::new(name, self.feature_dim, examples)
    }
}

/// Isotropic Gaussian class-conditional generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianClass {
    pub mean: Vec<f64>,
    pub std_dev: f64,
}

impl GaussianClass {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.mean
            .iter()
            .map(|m| m + self.std_dev * standard_normal(rng))
            .collect()
    }
}

// Box-Muller; rand_distr would do, but two lines keep the dependency set
// down and the stream fully pinned to ChaCha8 draws.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Recipe for a synthetic two-cluster dataset with injected label noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_pos: usize,
    pub n_neg: usize,
    /// Target fraction of noisy (flipped-negative) instances in [0,1).
    pub noise_ratio: f64,
    pub feature_dim: usize,
    pub positive: GaussianClass,
    pub negative: GaussianClass,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Two overlapping clusters at ±offset·1 with shared isotropic spread.
    pub fn two_cluster(
        n_pos: usize,
        n_neg: usize,
        noise_ratio: f64,
        feature_dim: usize,
        mean_offset: f64,
        std_dev: f64,
        seed: u64,
    ) -> Self {
        SyntheticSpec {
            n_pos,
            n_neg,
            noise_ratio,
            feature_dim,
            positive: GaussianClass {
                mean: vec![mean_offset; feature_dim],
                std_dev,
            },
            negative: GaussianClass {
                mean: vec![-mean_offset; feature_dim],
                std_dev,
            },
            seed,
        }
    }

    /// Same generators, different class counts.
    pub fn with_counts(mut self, n_pos: usize, n_neg: usize) -> Self {
        self.n_pos = n_pos;
        self.n_neg = n_neg;
        self
    }

    /// Defaults: dim 10, means ±1·1, σ = 1.5.
    pub fn default_clusters(n_pos: usize, n_neg: usize, noise_ratio: f64, seed: u64) -> Self {
        Self::two_cluster(n_pos, n_neg, noise_ratio, 10, 1.0, 1.5, seed)
    }

    fn validate(&self) -> Result<()> {
        if self.n_pos == 0 || self.n_neg == 0 {
            return Err(Error::InvalidArgument(
                "synthetic spec needs n_pos > 0 and n_neg > 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.noise_ratio) {
            return Err(Error::InvalidArgument(format!(
                "noise_ratio must be in [0,1), got {}",
                self.noise_ratio
            )));
        }
        if self.positive.std_dev <= 0.0 || self.negative.std_dev <= 0.0 {
            return Err(Error::InvalidArgument("std_dev must be positive".into()));
        }
        if self.positive.mean.len() != self.feature_dim || self.negative.mean.len() != self.feature_dim {
            return Err(Error::InvalidArgument(
                "generator mean length must equal feature_dim".into(),
            ));
        }
        Ok(())
    }
}

/// Load a JSONL dataset (one object per line: id, features, label,
/// optional true_label). Errors name the offending line.
pub fn load_dataset(path: impl AsRef<Path>, feature_dim: usize) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut examples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        examples.push(ex);
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    Dataset::new(name, feature_dim, examples)
}

/// Write a dataset as JSONL. Features round-trip bit-exactly (shortest
/// round-trip float formatting).
pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in dataset.iter() {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Draw the base clusters and then inject noise at the requested ratio.
/// Fully deterministic given the seed.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut examples = Vec::with_capacity(spec.n_pos + spec.n_neg);
    for i in 0..spec.n_pos {
        examples.push(Example::new(
            format!("pos-{i:05}"),
            spec.positive.sample(&mut rng),
            1,
            Some(1),
        ));
    }
    for i in 0..spec.n_neg {
        examples.push(Example::new(
            format!("neg-{i:05}"),
            spec.negative.sample(&mut rng),
            0,
            Some(0),
        ));
    }
    let base = Dataset::new("synthetic", spec.feature_dim, examples)?;
    // Separate stream for the noise block so the base draw is unaffected
    // by the ratio.
    inject_noise(&base, spec.noise_ratio, spec.seed ^ 0x6e6f6973, Some(&spec.negative))
}

/// Append `m = ceil(rho·N/(1−rho))` negative-class instances relabelled
/// positive, so the noisy fraction of the result is ≈ rho. Fresh samples
/// come from `source`; without a generator, existing negatives are
/// resampled (with replacement).
pub fn inject_noise(
    dataset: &Dataset,
    rho: f64,
    seed: u64,
    source: Option<&GaussianClass>,
) -> Result<Dataset> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::InvalidArgument(format!(
            "noise ratio must be in [0,1), got {rho}"
        )));
    }
    let n = dataset.len();
    // Guard the ceiling against float noise pushing an exact integer up
    // (0.9·580/0.1 = 5220.000000000001).
    let raw = rho * n as f64 / (1.0 - rho);
    let m = if (raw - raw.round()).abs() < 1e-9 {
        raw.round() as usize
    } else {
        raw.ceil() as usize
    };
    if m == 0 {
        return Ok(dataset.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = dataset.examples.clone();
    match source {
        Some(class) => {
            for i in 0..m {
                examples.push(Example::new(
                    format!("noise-{i:05}"),
                    class.sample(&mut rng),
                    1,
                    Some(0),
                ));
            }
        }
        None => {
            let negatives: Vec<&Example> = dataset
                .iter()
                .filter(|e| e.true_label == Some(0))
                .collect();
            if negatives.is_empty() {
                return Err(Error::InvalidArgument(
                    "cannot resample noise: dataset has no true negatives".into(),
                ));
            }
            for i in 0..m {
                let pick = negatives[rng.gen_range(0..negatives.len())];
                let mut ex = pick.clone();
                ex.id = format!("noise-{i:05}");
                ex.label = 1;
                ex.true_label = Some(0);
                examples.push(ex);
            }
        }
    }
    Dataset::new(dataset.name.clone(), dataset.feature_dim, examples)
}

/// Split off a seed clean set of `m` uniformly sampled verifiably clean
/// examples; everything else becomes the dirty set. Both halves keep the
/// original example order.
pub fn partition_seed(dataset: &Dataset, m: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let eligible: Vec<usize> = dataset
        .iter()
        .enumerate()
        .filter(|(_, e)| e.is_verified_clean())
        .map(|(i, _)| i)
        .collect();
    if eligible.len() < m {
        return Err(Error::InvalidArgument(format!(
            "requested seed of {m} but only {} verifiably clean examples",
            eligible.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = eligible;
    // Fisher-Yates prefix of length m.
    for i in 0..m {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    let chosen: HashSet<usize> = pool[..m].iter().copied().collect();
    let mut clean = Vec::with_capacity(m);
    let mut dirty = Vec::with_capacity(dataset.len() - m);
    for (i, ex) in dataset.iter().enumerate() {
        if chosen.contains(&i) {
            clean.push(ex.clone());
        } else {
            dirty.push(ex.clone());
        }
    }
    Ok((
        Dataset::new(format!("{}-seed", dataset.name), dataset.feature_dim, clean)?,
        Dataset::new(format!("{}-dirty", dataset.name), dataset.feature_dim, dirty)?,
    ))
}
