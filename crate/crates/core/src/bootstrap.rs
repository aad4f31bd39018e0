//! The bootstrapping loop: sample a fixed-size clean batch, fit the
//! classifier (optionally with teacher-student consistency), score every
//! positive dirty instance, threshold + cap + majority-vote the
//! candidates, move the winners into the clean set, repeat. The output
//! is the recovered set: everything the loop promoted, minus the
//! original seeds.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::influence::{InfluenceEngine, ScoreRecord, Solver, Strategy};
use crate::metrics::selection_metrics;
use crate::model::{
    ema_update, fit, fit_consistency, predict_proba, ConsistencyConfig, ModelParams, TrainConfig,
};
use crate::selection::{
    apply_cap, confidence_select, record_and_vote, select_candidates, update_sets, SelectionConfig,
    VoteLedger,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub t_max: usize,
    /// |C̃|: clean instances sampled (with replacement) per iteration.
    pub sample_size: usize,
    pub selection: SelectionConfig,
    pub consistency: ConsistencyConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub solver: Solver,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            t_max: 8,
            sample_size: 200,
            selection: SelectionConfig::default(),
            consistency: ConsistencyConfig::default(),
            train: TrainConfig::default(),
            solver: Solver::Exact,
            seed: 0,
        }
    }
}

impl BootstrapConfig {
    fn validate(&self) -> Result<()> {
        if self.sample_size == 0 {
            return Err(Error::InvalidArgument("sample_size must be >= 1".into()));
        }
        self.selection.validate()
    }
}

/// Metrics recorded after each iteration. Precision/recall/F1 are for
/// the cumulative recovered set so far, against the truly clean
/// positives of the initial dirty set; absent when ground truth is
/// unavailable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub clean_size: usize,
    /// |D̃ᶜₜ|: capped candidates this iteration.
    pub candidates: usize,
    /// |Dᶜ|: instances admitted by the vote this iteration.
    pub admitted: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    /// Fraction of this iteration's admissions with true_label = 0.
    pub noisy_admitted_fraction: Option<f64>,
    /// Wall time; kept out of serialized reports so re-runs are
    /// byte-identical.
    #[serde(skip_serializing, default)]
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// Dʳ: promoted instances excluding the original seeds.
    pub recovered: BTreeSet<String>,
    pub history: Vec<IterationStats>,
    pub scores: Vec<ScoreRecord>,
    pub config: BootstrapConfig,
    pub seed_ids: Vec<String>,
}

/// Uniform sample of `size` instances from the clean set, with
/// replacement. Draw indices are appended to the ids so duplicates stay
/// distinct within the sample.
pub fn sample_clean(clean: &Dataset, size: usize, seed: u64) -> Result<Dataset> {
    if clean.is_empty() {
        return Err(Error::EmptySet("sample_clean from empty clean set".into()));
    }
    if size == 0 {
        return Err(Error::InvalidArgument("sample size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = clean.examples();
    let sampled = (0..size)
        .map(|i| {
            let mut ex = examples[rng.gen_range(0..examples.len())].clone();
            ex.id = format!("{}~{i}", ex.id);
            ex
        })
        .collect();
    Dataset::new("clean-sample", clean.feature_dim, sampled)
}

/// Run the full loop and return the recovered set with its history.
pub fn run_bootstrap(c0: &Dataset, d0: &Dataset, cfg: &BootstrapConfig) -> Result<RunReport> {
    cfg.validate()?;
    if c0.is_empty() {
        return Err(Error::EmptySet("initial clean set is empty".into()));
    }
    if c0.feature_dim != d0.feature_dim {
        return Err(Error::InvalidArgument(
            "clean and dirty sets have different feature dims".into(),
        ));
    }
    if !c0.id_set().is_disjoint(&d0.id_set()) {
        return Err(Error::InvalidArgument(
            "initial clean and dirty sets overlap".into(),
        ));
    }
    let has_truth = d0.iter().all(|e| e.true_label.is_some());
    let seed_ids: BTreeSet<String> = c0.ids().map(String::from).collect();
    let strategy = cfg.selection.strategy;

    let mut clean = c0.clone();
    let mut dirty = d0.clone();
    let mut ledger = VoteLedger::new();
    let mut student = init_student(cfg, c0.feature_dim);
    let mut teacher = student.clone();
    let mut history = Vec::with_capacity(cfg.t_max);
    let mut all_scores = Vec::new();

    for t in 0..cfg.t_max {
        let started = Instant::now();
        let iter_seed = cfg.seed ^ t as u64;
        let ctilde = sample_clean(&clean, cfg.sample_size, iter_seed)?;

        // Fit. The consistency term regularizes training only; influence
        // scoring below always uses the plain loss Hessian.
        let dirty_fit; // CR1's per-iteration fit on the dirty set
        let (score_params, score_train): (&ModelParams, &Dataset) = match strategy {
            Strategy::Cr2 | Strategy::Conf => {
                student = fit(&ctilde, &cfg.train)?.params;
                (&student, &ctilde)
            }
            Strategy::Cr2Ts => {
                if t == 0 {
                    // Warm start: the teacher is an EMA of past students,
                    // so the first iteration fits plainly and seeds the
                    // teacher with that solution rather than dragging the
                    // student toward the uninformative initial parameters.
                    student = fit(&ctilde, &cfg.train)?.params;
                    teacher = student.clone();
                } else {
                    // β is the per-optimizer-step decay of the teacher
                    // average; a whole inner fit therefore decays the old
                    // teacher by β^steps. Alternating fit and decay until
                    // the teacher has caught up reproduces the step-wise
                    // average, whose fixed point is self-consistent.
                    for _ in 0..8 {
                        let fitted = fit_consistency(
                            &ctilde,
                            &teacher,
                            cfg.consistency.alpha,
                            &cfg.train,
                        )?;
                        student = fitted.params;
                        let decay = cfg.consistency.beta.powi(fitted.iterations.max(1) as i32);
                        teacher = ema_update(&teacher, &student, decay)?;
                        let gap: f64 = teacher
                            .flatten()
                            .iter()
                            .zip(student.flatten())
                            .map(|(t, s)| (t - s).abs())
                            .fold(0.0, f64::max);
                        if gap <= 1e-8 {
                            break;
                        }
                    }
                }
                (&student, &ctilde)
            }
            Strategy::Cr1 => {
                dirty_fit = fit(&dirty, &cfg.train)?.params;
                (&dirty_fit, &dirty)
            }
        };

        // Score every positive dirty instance.
        let positives: Vec<&crate::dataset::Example> = dirty.positives();
        let records: Vec<ScoreRecord> = match strategy {
            Strategy::Cr2 | Strategy::Cr2Ts => {
                // For the teacher-student fit the teacher tracks the
                // student to self-consistency, so the consistency term is
                // second-order in the data perturbation and the plain
                // loss curvature is the right one here too.
                let engine = InfluenceEngine {
                    params: score_params,
                    train: score_train,
                    damping: cfg.train.damping,
                    solver: cfg.solver.clone(),
                };
                let scores = engine.marginal_scores_train(&positives)?;
                zip_records(&positives, scores, t, strategy)
            }
            Strategy::Cr1 => {
                let engine = InfluenceEngine {
                    params: score_params,
                    train: score_train,
                    damping: cfg.train.damping,
                    solver: cfg.solver.clone(),
                };
                let scores = engine.marginal_scores_test(&positives, &ctilde)?;
                zip_records(&positives, scores, t, strategy)
            }
            Strategy::Conf => positives
                .iter()
                .map(|z| {
                    let (p0, p1) = predict_proba(score_params, &z.features)?;
                    Ok(ScoreRecord {
                        example_id: z.id.clone(),
                        iteration: t,
                        score: if z.label == 0 { p0 } else { p1 },
                        strategy,
                    })
                })
                .collect::<Result<_>>()?,
        };

        // The cap and the majority vote are safeguards of the influence
        // strategies; the confidence baseline is classic self-training
        // and admits everything over threshold immediately.
        let cap = (cfg.selection.cap_fraction * dirty.len() as f64).ceil() as usize;
        let (candidates, voted) = match strategy {
            Strategy::Conf => {
                let positives_ds = dirty.filtered("positives", |e| e.label == 1);
                let picked = confidence_select(score_params, &positives_ds, usize::MAX)?;
                (picked.clone(), picked)
            }
            _ => {
                let passed = select_candidates(&records, cfg.selection.relaxation);
                let capped = apply_cap(&passed, &records, cap);
                let voted = record_and_vote(&mut ledger, &capped, cfg.selection.vote_k);
                (capped, voted)
            }
        };
        let dirty_ids = dirty.id_set();
        let admitted: BTreeSet<String> =
            voted.into_iter().filter(|id| dirty_ids.contains(id)).collect();

        let noisy_admitted_fraction = if has_truth && !admitted.is_empty() {
            let noisy = admitted
                .iter()
                .filter(|id| dirty.get(id).map(|e| e.true_label == Some(0)).unwrap_or(false))
                .count();
            Some(noisy as f64 / admitted.len() as f64)
        } else {
            None
        };

        let (next_clean, next_dirty) = update_sets(&clean, &dirty, &admitted)?;
        clean = next_clean;
        dirty = next_dirty;

        let (precision, recall, f1) = if has_truth {
            let cumulative: BTreeSet<String> = clean
                .ids()
                .filter(|id| !seed_ids.contains(*id))
                .map(String::from)
                .collect();
            let m = selection_metrics(&cumulative, d0)?;
            (Some(m.precision), Some(m.recall), Some(m.f1))
        } else {
            (None, None, None)
        };

        history.push(IterationStats {
            iteration: t,
            clean_size: clean.len(),
            candidates: candidates.len(),
            admitted: admitted.len(),
            precision,
            recall,
            f1,
            noisy_admitted_fraction,
            seconds: started.elapsed().as_secs_f64(),
        });
        all_scores.extend(records);
    }

    let recovered: BTreeSet<String> = clean
        .ids()
        .filter(|id| !seed_ids.contains(*id))
        .map(String::from)
        .collect();
    Ok(RunReport {
        recovered,
        history,
        scores: all_scores,
        config: cfg.clone(),
        seed_ids: seed_ids.into_iter().collect(),
    })
}

fn init_student(cfg: &BootstrapConfig, feature_dim: usize) -> ModelParams {
    // The Linear backend starts at zero every fit anyway; for Mlp1 the
    // teacher inherits the seeded random init.
    match cfg.train.backend {
        crate::model::Backend::Linear => {
            ModelParams::zeros(crate::model::Backend::Linear, feature_dim, 0)
        }
        crate::model::Backend::Mlp1 => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
            let proto =
                ModelParams::zeros(crate::model::Backend::Mlp1, feature_dim, cfg.train.hidden_dim);
            let flat: Vec<f64> = (0..proto.len()).map(|_| rng.gen_range(-0.1..0.1)).collect();
            proto.unflatten(&flat).expect("shape fixed")
        }
    }
}

fn zip_records(
    targets: &[&crate::dataset::Example],
    scores: Vec<f64>,
    iteration: usize,
    strategy: Strategy,
) -> Vec<ScoreRecord> {
    targets
        .iter()
        .zip(scores)
        .map(|(z, score)| ScoreRecord {
            example_id: z.id.clone(),
            iteration,
            score,
            strategy,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, partition_seed, Example, SyntheticSpec};

    fn quick_cfg(strategy: Strategy, seed: u64) -> BootstrapConfig {
        BootstrapConfig {
            t_max: 6,
            sample_size: 50,
            selection: SelectionConfig {
                strategy,
                ..SelectionConfig::default()
            },
            seed,
            ..BootstrapConfig::default()
        }
    }

    #[test]
    fn zero_iterations_recovers_nothing() {
        let ds = generate_synthetic(&SyntheticSpec::default_clusters(20, 20, 0.0, 1)).unwrap();
        let (c0, d0) = partition_seed(&ds, 10, 1).unwrap();
        let mut cfg = quick_cfg(Strategy::Cr2, 1);
        cfg.t_max = 0;
        let report = run_bootstrap(&c0, &d0, &cfg).unwrap();
        assert!(report.recovered.is_empty());
        assert!(report.history.is_empty());
    }

    #[test]
    fn rejects_empty_or_overlapping_inputs() {
        let ds = generate_synthetic(&SyntheticSpec::default_clusters(10, 10, 0.0, 2)).unwrap();
        let (c0, d0) = partition_seed(&ds, 5, 1).unwrap();
        let empty = Dataset::new("e", ds.feature_dim, vec![]).unwrap();
        let cfg = quick_cfg(Strategy::Cr2, 1);
        assert!(run_bootstrap(&empty, &d0, &cfg).is_err());
        assert!(run_bootstrap(&c0, &ds, &cfg).is_err());
    }

    #[test]
    fn sample_clean_single_instance_repeats_it() {
        let one = Dataset::new(
            "c",
            2,
            vec![Example::new("only", vec![1.0, 2.0], 1, Some(1))],
        )
        .unwrap();
        let s = sample_clean(&one, 200, 7).unwrap();
        assert_eq!(s.len(), 200);
        assert!(s.iter().all(|e| e.features == vec![1.0, 2.0]));
        assert!(sample_clean(&one, 0, 7).is_err());
    }

    #[test]
    fn sample_clean_is_roughly_uniform() {
        // Statistical oracle: each of 10 instances should be drawn
        // n·1/10 times within 3σ of the binomial spread.
        let ds = generate_synthetic(&SyntheticSpec::default_clusters(5, 5, 0.0, 3)).unwrap();
        let draws = 100_000;
        let s = sample_clean(&ds, draws, 11).unwrap();
        let mut counts = std::collections::HashMap::new();
        for ex in s.iter() {
            let orig = ex.id.split('~').next().unwrap().to_string();
            *counts.entry(orig).or_insert(0usize) += 1;
        }
        let p = 0.1;
        let mean = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for orig in ds.ids() {
            let c = *counts.get(orig).unwrap_or(&0) as f64;
            assert!(
                (c - mean).abs() <= 3.0 * sigma,
                "id {orig}: {c} draws vs mean {mean}"
            );
        }
    }

    /// Well-separated duplicates of the clean positives must all be
    /// recovered; flipped negatives must not.
    #[test]
    fn separable_duplicates_recovered_flips_rejected() {
        let spec = SyntheticSpec::two_cluster(10, 10, 0.0, 4, 3.0, 0.5, 13);
        let c0 = generate_synthetic(&spec).unwrap();
        let mut dirty = Vec::new();
        for (i, ex) in c0.iter().filter(|e| e.label == 1).enumerate() {
            for copy in 0..2 {
                let mut d = ex.clone();
                d.id = format!("dup-{i}-{copy}");
                dirty.push(d);
            }
        }
        // flipped: negative-cluster points labelled positive
        let negs = generate_synthetic(&SyntheticSpec::two_cluster(10, 20, 0.0, 4, 3.0, 0.5, 14)).unwrap();
        for (i, ex) in negs.iter().filter(|e| e.label == 0).enumerate() {
            let mut d = ex.clone();
            d.id = format!("flip-{i}");
            d.label = 1;
            d.true_label = Some(0);
            dirty.push(d);
        }
        let d0 = Dataset::new("d0", 4, dirty).unwrap();
        let cfg = BootstrapConfig {
            t_max: 6,
            sample_size: 50,
            selection: SelectionConfig {
                cap_fraction: 1.0,
                ..SelectionConfig::default()
            },
            seed: 5,
            ..BootstrapConfig::default()
        };
        let report = run_bootstrap(&c0, &d0, &cfg).unwrap();
        let dups: Vec<&String> = report.recovered.iter().filter(|id| id.starts_with("dup")).collect();
        let flips: Vec<&String> = report.recovered.iter().filter(|id| id.starts_with("flip")).collect();
        assert_eq!(dups.len(), 20, "recovered {report:?}");
        assert!(flips.is_empty(), "flips admitted: {flips:?}");
    }

    #[test]
    fn clean_dirty_set_gives_perfect_precision() {
        let ds = generate_synthetic(&SyntheticSpec::default_clusters(60, 60, 0.0, 17)).unwrap();
        let (c0, d0) = partition_seed(&ds, 20, 3).unwrap();
        let report = run_bootstrap(&c0, &d0, &quick_cfg(Strategy::Cr2, 3)).unwrap();
        for stats in &report.history {
            if let Some(p) = stats.precision {
                if stats.clean_size > c0.len() {
                    assert_eq!(p, 1.0, "iteration {}", stats.iteration);
                }
            }
        }
        assert!(!report.recovered.is_empty());
    }

    #[test]
    fn history_shape_and_monotone_clean_size() {
        let ds = generate_synthetic(&SyntheticSpec::default_clusters(40, 40, 0.3, 19)).unwrap();
        let (c0, d0) = partition_seed(&ds, 15, 4).unwrap();
        let cfg = quick_cfg(Strategy::Cr2, 4);
        let report = run_bootstrap(&c0, &d0, &cfg).unwrap();
        assert_eq!(report.history.len(), cfg.t_max);
        let mut prev = c0.len();
        for s in &report.history {
            assert!(s.clean_size >= prev);
            prev = s.clean_size;
        }
        for id in &report.recovered {
            assert!(!report.seed_ids.contains(id));
        }
    }

    #[test]
    fn replay_reproduces_the_run() {
        let ds = generate_synthetic(&SyntheticSpec::default_clusters(40, 40, 0.4, 23)).unwrap();
        let (c0, d0) = partition_seed(&ds, 15, 5).unwrap();
        let cfg = quick_cfg(Strategy::Cr2, 9);
        let a = run_bootstrap(&c0, &d0, &cfg).unwrap();
        let b = run_bootstrap(&c0, &d0, &cfg).unwrap();
        assert_eq!(a.recovered, b.recovered);
        assert_eq!(a.scores, b.scores);
    }

    #[test]
    fn cr2ts_with_zero_alpha_beta_matches_cr2() {
        let ds = generate_synthetic(&SyntheticSpec::default_clusters(40, 40, 0.4, 29)).unwrap();
        let (c0, d0) = partition_seed(&ds, 15, 6).unwrap();
        let cr2 = run_bootstrap(&c0, &d0, &quick_cfg(Strategy::Cr2, 11)).unwrap();
        let mut ts_cfg = quick_cfg(Strategy::Cr2Ts, 11);
        ts_cfg.consistency = ConsistencyConfig { alpha: 0.0, beta: 0.0 };
        let ts = run_bootstrap(&c0, &d0, &ts_cfg).unwrap();
        assert_eq!(cr2.recovered, ts.recovered);
        for (a, b) in cr2.history.iter().zip(&ts.history) {
            assert_eq!(a.admitted, b.admitted);
            assert_eq!(a.candidates, b.candidates);
        }
    }

    #[test]
    fn conf_strategy_runs() {
        let ds = generate_synthetic(&SyntheticSpec::default_clusters(40, 40, 0.3, 31)).unwrap();
        let (c0, d0) = partition_seed(&ds, 15, 7).unwrap();
        let report = run_bootstrap(&c0, &d0, &quick_cfg(Strategy::Conf, 13)).unwrap();
        assert_eq!(report.history.len(), 6);
    }

    #[test]
    fn cr1_strategy_runs() {
        let ds = generate_synthetic(&SyntheticSpec::default_clusters(30, 30, 0.3, 37)).unwrap();
        let (c0, d0) = partition_seed(&ds, 12, 8).unwrap();
        let mut cfg = quick_cfg(Strategy::Cr1, 15);
        cfg.t_max = 5;
        let report = run_bootstrap(&c0, &d0, &cfg).unwrap();
        assert_eq!(report.history.len(), 5);
    }
}
