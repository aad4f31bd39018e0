//! Micro-averaged instance-level precision / recall / F1, both for the
//! selection itself (against ground-truth labels) and for a downstream
//! classifier trained on the recovered set.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{fit, predict_proba, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// Set when a convention kicked in (empty selection, empty training
    /// set) instead of a real measurement.
    pub degenerate: bool,
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Metrics {
        let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
        let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Metrics {
            precision,
            recall,
            f1,
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
            degenerate: tp + fp == 0,
        }
    }
}

/// Quality of a selected id set against ground truth: precision over the
/// selection, recall over all truly clean positives of `dataset`.
/// Precision of an empty selection is 0, flagged degenerate.
pub fn selection_metrics(selected: &BTreeSet<String>, dataset: &Dataset) -> Result<Metrics> {
    let ids = dataset.id_set();
    for id in selected {
        if !ids.contains(id) {
            return Err(Error::UnknownId(id.clone()));
        }
    }
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    for ex in dataset.iter() {
        let truth = ex.true_label.ok_or_else(|| {
            Error::InvalidArgument(format!("example `{}` has no true_label", ex.id))
        })?;
        let clean_positive = ex.label == 1 && truth == 1;
        let picked = selected.contains(&ex.id);
        match (clean_positive, picked) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(Metrics::from_counts(tp, fp, fn_))
}

/// Train the built-in classifier on the recovered positives plus the
/// dirty set's negatives, then score positive-class prediction on the
/// test set (gold = true_label).
pub fn downstream_eval(
    recovered: &BTreeSet<String>,
    dirty: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<Metrics> {
    downstream_eval_impl(recovered, dirty, None, test, cfg)
}

/// Like [`downstream_eval`], but the denoised training set additionally
/// includes the verified-clean seed examples: the loop's output is the
/// seed set plus everything it promoted, and the downstream model should
/// see all of it.
pub fn downstream_eval_seeded(
    recovered: &BTreeSet<String>,
    dirty: &Dataset,
    seed: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<Metrics> {
    downstream_eval_impl(recovered, dirty, Some(seed), test, cfg)
}

fn downstream_eval_impl(
    recovered: &BTreeSet<String>,
    dirty: &Dataset,
    seed: Option<&Dataset>,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<Metrics> {
    for ex in test.iter() {
        if ex.true_label.is_none() {
            return Err(Error::InvalidArgument(format!(
                "test example `{}` has no true_label",
                ex.id
            )));
        }
    }
    if recovered.is_empty() && seed.is_none() {
        // Majority-class (negative) predictor.
        let pos = test.iter().filter(|e| e.true_label == Some(1)).count();
        let mut m = Metrics::from_counts(0, 0, pos);
        m.degenerate = true;
        return Ok(m);
    }
    let mut train = dirty.filtered("downstream-train", |e| {
        recovered.contains(&e.id) || e.label == 0
    });
    if let Some(seed) = seed {
        train = seed.concat(&train, "downstream-train")?;
    }
    let fitted = fit(&train, cfg)?;
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    for ex in test.iter() {
        let (p0, p1) = predict_proba(&fitted.params, &ex.features)?;
        let predicted_pos = p1 > p0;
        let actual_pos = ex.true_label == Some(1);
        match (actual_pos, predicted_pos) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(Metrics::from_counts(tp, fp, fn_))
}

/// Pearson correlation; `None` when either side has no variance or
/// fewer than two points.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}
