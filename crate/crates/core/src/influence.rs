//! Inverse Hessian-vector products and support scores.
//!
//! The support score S(z, z') = (1/n)·∇L(z',θ̂)ᵀ(H+λI)⁻¹∇L(z,θ̂) estimates
//! how much the test loss of z' would grow if training instance z were
//! removed. Both criteria reduce to marginals of S over a clean set, and
//! by bilinearity (plus Hessian symmetry) a whole batch of marginals
//! costs one inverse-HVP on a pooled gradient plus dot products.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Example};
use crate::error::{Error, Result};
use crate::linalg::{axpy, cg_solve, dot, norm, CgOutcome};
use crate::model::{grad, hvp, hvp_example, ModelParams};

/// Which scoring rule produced a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Classifier on the dirty set, clean set as test points.
    Cr1,
    /// Classifier on the (sampled) clean set, dirty instances as test
    /// points.
    Cr2,
    /// Cr2 with teacher-student consistency during fitting.
    Cr2Ts,
    /// Confidence baseline: rank by predicted probability of the
    /// observed label.
    Conf,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Cr1 => "cr1",
            Strategy::Cr2 => "cr2",
            Strategy::Cr2Ts => "cr2ts",
            Strategy::Conf => "conf",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cr1" => Ok(Strategy::Cr1),
            "cr2" => Ok(Strategy::Cr2),
            "cr2ts" => Ok(Strategy::Cr2Ts),
            "conf" => Ok(Strategy::Conf),
            other => Err(Error::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

/// Per-instance, per-iteration score. Influence scores are in nats of
/// estimated test-loss change; confidence scores are probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub example_id: String,
    pub iteration: usize,
    pub score: f64,
    pub strategy: Strategy,
}

/// Settings for the stochastic recursive inverse-HVP estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LissaConfig {
    pub depth: usize,
    /// Divisor bounding the damped Hessian spectrum.
    pub scale: f64,
    /// Independent estimates averaged together.
    pub repeats: usize,
    /// Examples sampled per recursion step.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for LissaConfig {
    fn default() -> Self {
        LissaConfig {
            depth: 1000,
            scale: 10.0,
            repeats: 8,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl LissaConfig {
    fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.repeats == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "lissa depth, repeats and batch_size must be >= 1".into(),
            ));
        }
        if self.scale <= 0.0 {
            return Err(Error::InvalidArgument("lissa scale must be > 0".into()));
        }
        Ok(())
    }
}

/// Exact damped inverse-HVP: solves (H+λI)u = v by conjugate gradient on
/// the Hessian-vector product and verifies the true residual.
pub fn inverse_hvp_exact(
    params: &ModelParams,
    train: &Dataset,
    v: &[f64],
    damping: f64,
) -> Result<Vec<f64>> {
    let vn = norm(v);
    if vn == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    let p = params.len();
    let matvec = |u: &[f64]| hvp(params, train, u, damping).expect("shapes checked");
    let (u, outcome) = cg_solve(&matvec, v, 1e-10 * vn, 20 * p + 50);
    if matches!(outcome, CgOutcome::NegativeCurvature) {
        return Err(Error::Solver(
            "damped Hessian is not positive definite; increase damping".into(),
        ));
    }
    let mut residual = matvec(&u);
    axpy(-1.0, v, &mut residual);
    let rel = norm(&residual) / vn;
    if rel > 1e-8 {
        return Err(Error::Solver(format!(
            "cg did not converge: relative residual {rel:.3e}"
        )));
    }
    Ok(u)
}

/// Stochastic recursive inverse-HVP estimate
/// u_{j+1} = v + (I − (H_batch+λI)/scale)·u_j, result u_depth/scale,
/// averaged over independent repeats. Deterministic given the seed.
pub fn inverse_hvp_lissa(
    params: &ModelParams,
    train: &Dataset,
    v: &[f64],
    damping: f64,
    cfg: &LissaConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let vn = norm(v);
    if vn == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    if train.is_empty() {
        return Err(Error::EmptySet("lissa over empty training set".into()));
    }
    let n = train.len();
    let examples = train.examples();
    let mut acc = vec![0.0; v.len()];
    for repeat in 0..cfg.repeats {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(repeat as u64));
        let mut u = v.to_vec();
        for _ in 0..cfg.depth {
            // (H_batch + λI) u on a fresh minibatch
            let mut hu = vec![0.0; v.len()];
            if cfg.batch_size >= n {
                hu = hvp(params, train, &u, damping)?;
            } else {
                for _ in 0..cfg.batch_size {
                    let z = &examples[rng.gen_range(0..n)];
                    let target = if z.label == 0 { [1.0, 0.0] } else { [0.0, 1.0] };
                    let hz = hvp_example(params, &z.features, target, &u)?;
                    axpy(z.weight / cfg.batch_size as f64, &hz, &mut hu);
                }
                axpy(damping, &u, &mut hu);
            }
            for ((ui, vi), hui) in u.iter_mut().zip(v).zip(&hu) {
                *ui = vi + *ui - hui / cfg.scale;
            }
            let un = norm(&u);
            if !un.is_finite() || un > 1e6 * vn {
                return Err(Error::Solver(format!(
                    "lissa diverged: |u| = {un:.3e} vs |v| = {vn:.3e}; scale too small"
                )));
            }
        }
        axpy(1.0 / cfg.scale, &u, &mut acc);
    }
    for a in acc.iter_mut() {
        *a /= cfg.repeats as f64;
    }
    Ok(acc)
}

/// Inverse-HVP backend selector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Solver {
    Exact,
    Lissa(LissaConfig),
}

impl Default for Solver {
    fn default() -> Self {
        Solver::Exact
    }
}

impl Solver {
    pub fn inverse_hvp(
        &self,
        params: &ModelParams,
        train: &Dataset,
        v: &[f64],
        damping: f64,
    ) -> Result<Vec<f64>> {
        match self {
            Solver::Exact => inverse_hvp_exact(params, train, v, damping),
            Solver::Lissa(cfg) => inverse_hvp_lissa(params, train, v, damping, cfg),
        }
    }
}

/// Scoring context: a fitted model, the training set behind its Hessian,
/// and the damping carried over from training.
pub struct InfluenceEngine<'a> {
    pub params: &'a ModelParams,
    pub train: &'a Dataset,
    pub damping: f64,
    pub solver: Solver,
}

impl<'a> InfluenceEngine<'a> {
    pub fn exact(params: &'a ModelParams, train: &'a Dataset, damping: f64) -> Self {
        InfluenceEngine {
            params,
            train,
            damping,
            solver: Solver::Exact,
        }
    }

    fn ihvp(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.solver.inverse_hvp(self.params, self.train, v, self.damping)
    }

    /// S(z_train, z_test) with n = |train|. Positive means removing
    /// z_train is estimated to increase z_test's loss.
    pub fn support_score(&self, z_train: &Example, z_test: &Example) -> Result<f64> {
        let n = self.train.len();
        if n == 0 {
            return Err(Error::EmptySet("support_score with empty training set".into()));
        }
        let g_train = grad(self.params, z_train)?;
        let u = self.ihvp(&g_train)?;
        let g_test = grad(self.params, z_test)?;
        Ok(dot(&g_test, &u) / n as f64)
    }

    /// Criterion 1 marginal S(z_d, ⋆): mean support of dirty instance
    /// z_d (a training point here) over the clean test set. One
    /// inverse-HVP on ∇L(z_d), then a dot with the pooled test gradient.
    pub fn marginal_score_test(&self, z_d: &Example, clean: &Dataset) -> Result<f64> {
        if clean.is_empty() {
            return Err(Error::EmptySet("marginal_score_test over empty clean set".into()));
        }
        let n = self.train.len();
        let g_d = grad(self.params, z_d)?;
        let u = self.ihvp(&g_d)?;
        let pooled = mean_gradient(self.params, clean)?;
        Ok(dot(&pooled, &u) / n as f64)
    }

    /// Batched Criterion 1 marginals. Uses Hessian symmetry to invert
    /// once on the pooled test gradient instead of once per instance.
    pub fn marginal_scores_test(&self, targets: &[&Example], clean: &Dataset) -> Result<Vec<f64>> {
        if clean.is_empty() {
            return Err(Error::EmptySet("marginal_score_test over empty clean set".into()));
        }
        let n = self.train.len() as f64;
        let pooled = mean_gradient(self.params, clean)?;
        let u = self.ihvp(&pooled)?;
        targets
            .par_iter()
            .map(|z| Ok(dot(&grad(self.params, z)?, &u) / n))
            .collect()
    }

    /// Criterion 2 marginal S(⋄, z_d): mean support that the clean
    /// training instances lend to z_d, with the model fitted on the
    /// clean sample itself (self.train).
    pub fn marginal_score_train(&self, z_d: &Example) -> Result<f64> {
        Ok(self.marginal_scores_train(&[z_d])?[0])
    }

    /// Batched Criterion 2 marginals: one inverse-HVP of the pooled
    /// clean gradient, reused across every target.
    pub fn marginal_scores_train(&self, targets: &[&Example]) -> Result<Vec<f64>> {
        if self.train.is_empty() {
            return Err(Error::EmptySet("marginal_score_train over empty clean set".into()));
        }
        let n = self.train.len() as f64;
        let pooled = mean_gradient(self.params, self.train)?;
        let u = self.ihvp(&pooled)?;
        targets
            .par_iter()
            .map(|z| Ok(dot(&grad(self.params, z)?, &u) / n))
            .collect()
    }
}

/// (1/|ds|) Σ ∇L(z,θ).
pub fn mean_gradient(params: &ModelParams, ds: &Dataset) -> Result<Vec<f64>> {
    if ds.is_empty() {
        return Err(Error::EmptySet("mean_gradient of empty dataset".into()));
    }
    let mut out = vec![0.0; params.len()];
    for z in ds.iter() {
        let g = grad(params, z)?;
        axpy(1.0, &g, &mut out);
    }
    let scale = 1.0 / ds.len() as f64;
    for o in out.iter_mut() {
        *o *= scale;
    }
    Ok(out)
}
