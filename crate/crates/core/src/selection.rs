//! Turning scores into candidate sets: threshold with relaxation,
//! selection cap, majority voting, the confidence baseline, and the
//! clean/dirty set update.
//!
//! Everything here is deterministic; ties anywhere are broken by
//! lexicographic id so that reruns reproduce selections exactly.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::influence::{ScoreRecord, Strategy};
use crate::model::{predict_proba, ModelParams};

/// Per-instance count of iterations in which it passed the selection
/// threshold.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VoteLedger {
    counts: BTreeMap<String, u32>,
    pub iteration: usize,
}

impl VoteLedger {
    pub fn new() -> Self {
        VoteLedger::default()
    }

    pub fn count(&self, id: &str) -> u32 {
        self.counts.get(id).copied().unwrap_or(0)
    }

    pub fn counts(&self) -> &BTreeMap<String, u32> {
        &self.counts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    /// Additive slack r on the score threshold.
    pub relaxation: f64,
    /// Majority-vote threshold k; selection requires strictly more than
    /// k passing iterations.
    pub vote_k: u32,
    /// Per-iteration cap as a fraction of |D_t|.
    pub cap_fraction: f64,
    pub strategy: Strategy,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            relaxation: 0.0,
            vote_k: 3,
            cap_fraction: 0.1,
            strategy: Strategy::Cr2,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.relaxation < 0.0 {
            return Err(Error::InvalidArgument("relaxation must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.cap_fraction) || self.cap_fraction == 0.0 {
            return Err(Error::InvalidArgument(
                "cap_fraction must be in (0,1]".into(),
            ));
        }
        Ok(())
    }
}

/// Instances whose score clears the relaxed threshold: { z : S + r > 0 }
/// (strict).
pub fn select_candidates(scores: &[ScoreRecord], relaxation: f64) -> BTreeSet<String> {
    scores
        .iter()
        .filter(|s| s.score + relaxation > 0.0)
        .map(|s| s.example_id.clone())
        .collect()
}

/// Keep at most `cap` candidates, preferring higher scores; equal scores
/// fall back to the lexicographically smaller id.
pub fn apply_cap(
    candidates: &BTreeSet<String>,
    scores: &[ScoreRecord],
    cap: usize,
) -> BTreeSet<String> {
    if candidates.len() <= cap {
        return candidates.clone();
    }
    let by_id: HashMap<&str, f64> = scores
        .iter()
        .map(|s| (s.example_id.as_str(), s.score))
        .collect();
    let mut ranked: Vec<&String> = candidates.iter().collect();
    ranked.sort_by(|a, b| {
        let sa = by_id.get(a.as_str()).copied().unwrap_or(f64::NEG_INFINITY);
        let sb = by_id.get(b.as_str()).copied().unwrap_or(f64::NEG_INFINITY);
        sb.partial_cmp(&sa).unwrap().then_with(|| a.cmp(b))
    });
    ranked.into_iter().take(cap).cloned().collect()
}

/// Record this iteration's candidate set in the ledger and return the
/// ids whose accumulated count strictly exceeds k.
pub fn record_and_vote(
    ledger: &mut VoteLedger,
    candidates: &BTreeSet<String>,
    k: u32,
) -> BTreeSet<String> {
    for id in candidates {
        *ledger.counts.entry(id.clone()).or_insert(0) += 1;
    }
    ledger.iteration += 1;
    ledger
        .counts
        .iter()
        .filter(|(_, &c)| c > k)
        .map(|(id, _)| id.clone())
        .collect()
}

/// Confidence baseline: instances whose predicted probability of their
/// own observed label exceeds 0.5, ranked by confidence and capped with
/// the shared tie-break.
pub fn confidence_select(
    params: &ModelParams,
    dirty: &Dataset,
    cap: usize,
) -> Result<BTreeSet<String>> {
    let mut scored: Vec<(String, f64)> = Vec::new();
    for z in dirty.iter() {
        let (p0, p1) = predict_proba(params, &z.features)?;
        let conf = if z.label == 0 { p0 } else { p1 };
        if conf > 0.5 {
            scored.push((z.id.clone(), conf));
        }
    }
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    Ok(scored.into_iter().take(cap).map(|(id, _)| id).collect())
}

/// Move the selected examples from the dirty set into the clean set.
pub fn update_sets(
    clean: &Dataset,
    dirty: &Dataset,
    selected: &BTreeSet<String>,
) -> Result<(Dataset, Dataset)> {
    let dirty_ids = dirty.id_set();
    for id in selected {
        if !dirty_ids.contains(id) {
            return Err(Error::UnknownId(id.clone()));
        }
    }
    let promoted = dirty.filtered("promoted", |e| selected.contains(&e.id));
    let next_clean = clean.concat(&promoted, clean.name.clone())?;
    let next_dirty = dirty.filtered(dirty.name.clone(), |e| !selected.contains(&e.id));
    Ok((next_clean, next_dirty))
}
