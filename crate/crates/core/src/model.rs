//! The binary softmax classifier p(y|x,θ) = softmax(w_yᵀ h(x,φ)) with two
//! encoder backends, its training, and first/second-order derivative
//! primitives.
//!
//! Backends:
//! - `Linear`: h(x,φ) = x, φ empty. Convex objective, so the optimum is
//!   unique and retraining oracles are exact ground truth.
//! - `Mlp1`: one tanh hidden layer, h(x,φ) = tanh(Wx + b).
//!
//! Per-example gradients and Hessian-vector products are analytic
//! (forward-over-reverse for the HVP); both accept a soft target
//! distribution so the hard-label loss and the teacher-student
//! consistency term share one code path. The training objective is
//! (1/n)Σ L(z,θ) + (λ/2)‖θ‖², whose Hessian is exactly the λ-damped
//! mean Hessian used by influence computations.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Example};
use crate::error::{Error, Result};
use crate::linalg::{axpy, cg_solve, dot, norm, CgOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Linear,
    Mlp1,
}

/// Classifier parameters θ = [w0, w1, φ]. `w0`/`w1` are the class label
/// embeddings over the encoder output; φ is empty for `Linear` and a
/// (hidden × feature) weight matrix plus bias for `Mlp1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "FlatParams", try_from = "FlatParams")]
pub struct ModelParams {
    pub backend: Backend,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub w0: Vec<f64>,
    pub w1: Vec<f64>,
    /// Row-major hidden_dim × feature_dim (empty for Linear).
    pub w_hidden: Vec<f64>,
    pub b_hidden: Vec<f64>,
}

/// Serialized form: backend, shapes, flattened values.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct FlatParams {
    backend: Backend,
    feature_dim: usize,
    hidden_dim: usize,
    values: Vec<f64>,
}

impl From<ModelParams> for FlatParams {
    fn from(p: ModelParams) -> Self {
        FlatParams {
            backend: p.backend,
            feature_dim: p.feature_dim,
            hidden_dim: p.hidden_dim,
            values: p.flatten(),
        }
    }
}

impl TryFrom<FlatParams> for ModelParams {
    type Error = Error;
    fn try_from(f: FlatParams) -> Result<Self> {
        let proto = ModelParams::zeros(f.backend, f.feature_dim, f.hidden_dim);
        proto.unflatten(&f.values)
    }
}

impl ModelParams {
    pub fn zeros(backend: Backend, feature_dim: usize, hidden_dim: usize) -> Self {
        let (enc, hid) = match backend {
            Backend::Linear => (feature_dim, 0),
            Backend::Mlp1 => (hidden_dim, hidden_dim),
        };
        ModelParams {
            backend,
            feature_dim,
            hidden_dim: hid,
            w0: vec![0.0; enc],
            w1: vec![0.0; enc],
            w_hidden: vec![0.0; hid * feature_dim],
            b_hidden: vec![0.0; hid],
        }
    }

    /// Encoder output dimension.
    pub fn encoder_dim(&self) -> usize {
        match self.backend {
            Backend::Linear => self.feature_dim,
            Backend::Mlp1 => self.hidden_dim,
        }
    }

    /// Total flattened parameter count p.
    pub fn len(&self) -> usize {
        2 * self.encoder_dim() + self.w_hidden.len() + self.b_hidden.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flatten as [w0, w1, W (row-major), b].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(&self.w0);
        out.extend_from_slice(&self.w1);
        out.extend_from_slice(&self.w_hidden);
        out.extend_from_slice(&self.b_hidden);
        out
    }

    /// Inverse of [`flatten`]; shapes are taken from `self`.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ModelParams> {
        if flat.len() != self.len() {
            return Err(Error::InvalidArgument(format!(
                "flat parameter length {} does not match shape {}",
                flat.len(),
                self.len()
            )));
        }
        let e = self.encoder_dim();
        let wl = self.w_hidden.len();
        Ok(ModelParams {
            backend: self.backend,
            feature_dim: self.feature_dim,
            hidden_dim: self.hidden_dim,
            w0: flat[..e].to_vec(),
            w1: flat[e..2 * e].to_vec(),
            w_hidden: flat[2 * e..2 * e + wl].to_vec(),
            b_hidden: flat[2 * e + wl..].to_vec(),
        })
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.feature_dim {
            return Err(Error::DimensionMismatch {
                id: "<input>".into(),
                got: x.len(),
                expected: self.feature_dim,
            });
        }
        Ok(())
    }

    fn same_shape(&self, other: &ModelParams) -> bool {
        self.backend == other.backend
            && self.feature_dim == other.feature_dim
            && self.hidden_dim == other.hidden_dim
    }
}

/// Forward-pass cache for one input.
struct Forward {
    /// Encoder output h(x,φ).
    h: Vec<f64>,
    /// Class probabilities.
    p: [f64; 2],
    /// log Z − a_c for each class, i.e. −log p_c without cancellation.
    nll: [f64; 2],
}

fn forward(params: &ModelParams, x: &[f64]) -> Forward {
    let h = match params.backend {
        Backend::Linear => x.to_vec(),
        Backend::Mlp1 => {
            let f = params.feature_dim;
            (0..params.hidden_dim)
                .map(|i| {
                    let row = &params.w_hidden[i * f..(i + 1) * f];
                    (dot(row, x) + params.b_hidden[i]).tanh()
                })
                .collect()
        }
    };
    let a0 = dot(&params.w0, &h);
    let a1 = dot(&params.w1, &h);
    let m = a0.max(a1);
    // log Z via log-sum-exp; stable for logits of any magnitude.
    let log_z = m + ((a0 - m).exp() + (a1 - m).exp()).ln();
    Forward {
        h,
        p: [(a0 - log_z).exp(), (a1 - log_z).exp()],
        nll: [log_z - a0, log_z - a1],
    }
}

/// Class probabilities (p0, p1), summing to 1 within 1e-12.
pub fn predict_proba(params: &ModelParams, x: &[f64]) -> Result<(f64, f64)> {
    params.check_input(x)?;
    let fw = forward(params, x);
    Ok((fw.p[0], fw.p[1]))
}

/// Per-example negative log-likelihood −log p(label|x,θ), without the L2
/// term.
pub fn loss(params: &ModelParams, z: &Example) -> Result<f64> {
    params.check_input(&z.features)?;
    let fw = forward(params, &z.features);
    Ok(fw.nll[z.label as usize])
}

/// Gradient of the unregularized per-example loss w.r.t. flattened θ.
pub fn grad(params: &ModelParams, z: &Example) -> Result<Vec<f64>> {
    let target = one_hot(z.label);
    grad_soft(params, &z.features, target)
}

/// Gradient of the soft-target cross entropy −Σ_c q_c log p_c. With a
/// one-hot q this is the hard-label loss gradient.
pub fn grad_soft(params: &ModelParams, x: &[f64], q: [f64; 2]) -> Result<Vec<f64>> {
    params.check_input(x)?;
    let fw = forward(params, x);
    let g = [fw.p[0] - q[0], fw.p[1] - q[1]];
    let e = params.encoder_dim();
    let mut out = vec![0.0; params.len()];
    for j in 0..e {
        out[j] = g[0] * fw.h[j];
        out[e + j] = g[1] * fw.h[j];
    }
    if params.backend == Backend::Mlp1 {
        let f = params.feature_dim;
        for i in 0..params.hidden_dim {
            // dL/dh_i backpropagated through tanh
            let dh = g[0] * params.w0[i] + g[1] * params.w1[i];
            let du = (1.0 - fw.h[i] * fw.h[i]) * dh;
            let row = 2 * e + i * f;
            for j in 0..f {
                out[row + j] = du * x[j];
            }
            out[2 * e + params.hidden_dim * f + i] = du;
        }
    }
    Ok(out)
}

fn one_hot(label: u8) -> [f64; 2] {
    if label == 0 {
        [1.0, 0.0]
    } else {
        [0.0, 1.0]
    }
}

/// Exact Hessian-vector product of the per-example soft-target loss, via
/// a forward (tangent) pass stacked on the reverse pass.
pub fn hvp_example(params: &ModelParams, x: &[f64], q: [f64; 2], v: &[f64]) -> Result<Vec<f64>> {
    params.check_input(x)?;
    if v.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "hvp direction length {} does not match parameter count {}",
            v.len(),
            params.len()
        )));
    }
    let fw = forward(params, x);
    let e = params.encoder_dim();
    let f = params.feature_dim;
    let hid = params.hidden_dim;
    let (vw0, vw1) = (&v[..e], &v[e..2 * e]);

    // Tangents of the hidden activations.
    let rh: Vec<f64> = match params.backend {
        Backend::Linear => vec![0.0; e],
        Backend::Mlp1 => {
            let vw = &v[2 * e..2 * e + hid * f];
            let vb = &v[2 * e + hid * f..];
            (0..hid)
                .map(|i| {
                    let ru = dot(&vw[i * f..(i + 1) * f], x) + vb[i];
                    (1.0 - fw.h[i] * fw.h[i]) * ru
                })
                .collect()
        }
    };

    let ra = [
        dot(vw0, &fw.h) + dot(&params.w0, &rh),
        dot(vw1, &fw.h) + dot(&params.w1, &rh),
    ];
    let mean_ra = fw.p[0] * ra[0] + fw.p[1] * ra[1];
    // Tangent of the softmax output; equals the tangent of g = p − q.
    let rg = [fw.p[0] * (ra[0] - mean_ra), fw.p[1] * (ra[1] - mean_ra)];
    let g = [fw.p[0] - q[0], fw.p[1] - q[1]];

    let mut out = vec![0.0; params.len()];
    for j in 0..e {
        out[j] = rg[0] * fw.h[j] + g[0] * rh[j];
        out[e + j] = rg[1] * fw.h[j] + g[1] * rh[j];
    }
    if params.backend == Backend::Mlp1 {
        for i in 0..hid {
            let dh = g[0] * params.w0[i] + g[1] * params.w1[i];
            let rdh = rg[0] * params.w0[i]
                + g[0] * vw0[i]
                + rg[1] * params.w1[i]
                + g[1] * vw1[i];
            let sech2 = 1.0 - fw.h[i] * fw.h[i];
            let rdu = sech2 * rdh - 2.0 * fw.h[i] * rh[i] * dh;
            let row = 2 * e + i * f;
            for j in 0..f {
                out[row + j] = rdu * x[j];
            }
            out[2 * e + hid * f + i] = rdu;
        }
    }
    Ok(out)
}

/// Damped empirical-mean Hessian-vector product: (H + λI)v with
/// H = (1/n) Σ wᵢ ∇²L(zᵢ,θ). An empty dataset contributes H = 0.
pub fn hvp(params: &ModelParams, train: &Dataset, v: &[f64], damping: f64) -> Result<Vec<f64>> {
    let mut out = vec![0.0; params.len()];
    if !train.is_empty() {
        for z in train.iter() {
            let hv = hvp_example(params, &z.features, one_hot(z.label), v)?;
            axpy(z.weight, &hv, &mut out);
        }
        let scale = 1.0 / train.len() as f64;
        for o in out.iter_mut() {
            *o *= scale;
        }
    }
    axpy(damping, v, &mut out);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// L2 coefficient; doubles as the Hessian damping in influence
    /// computations.
    pub damping: f64,
    /// Step-size cap for the line search.
    pub learning_rate: f64,
    pub max_iters: usize,
    /// Convergence threshold on the full-objective gradient norm.
    pub grad_tol: f64,
    pub seed: u64,
    pub backend: Backend,
    pub hidden_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            damping: 0.01,
            learning_rate: 1.0,
            max_iters: 200,
            grad_tol: 1e-7,
            seed: 0,
            backend: Backend::Linear,
            hidden_dim: 16,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.damping <= 0.0 {
            return Err(Error::InvalidArgument("damping must be > 0".into()));
        }
        if self.grad_tol <= 0.0 {
            return Err(Error::InvalidArgument("grad_tol must be > 0".into()));
        }
        Ok(())
    }
}

/// Teacher-student settings: consistency weight α and EMA decay β.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyConfig {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        ConsistencyConfig { alpha: 1.0, beta: 0.9 }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    /// False when max_iters ran out before grad_tol; params then hold
    /// the best iterate found.
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    /// The training set carried only one label value.
    pub single_class: bool,
}

fn init_params(cfg: &TrainConfig, feature_dim: usize) -> ModelParams {
    let mut params = ModelParams::zeros(cfg.backend, feature_dim, cfg.hidden_dim);
    if cfg.backend == Backend::Mlp1 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let flat: Vec<f64> = (0..params.len()).map(|_| rng.gen_range(-0.1..0.1)).collect();
        params = params.unflatten(&flat).expect("shape fixed");
    }
    params
}

/// Soft targets attached to each training example. Hard labels are the
/// degenerate case; the consistency fit adds teacher distributions.
struct Objective<'a> {
    train: &'a Dataset,
    damping: f64,
    /// (weight on the KL term per example, teacher distribution).
    teacher: Option<(f64, Vec<[f64; 2]>)>,
}

impl Objective<'_> {
    fn inv_n(&self) -> f64 {
        1.0 / self.train.len() as f64
    }

    fn value(&self, params: &ModelParams) -> Result<f64> {
        let mut total = 0.0;
        for z in self.train.iter() {
            total += self.inv_n() * z.weight * loss(params, z)?;
        }
        if let Some((w, qs)) = &self.teacher {
            for (z, q) in self.train.iter().zip(qs) {
                let fw = forward(params, &z.features);
                // KL(q‖p) = Σ q log q + Σ q (logZ − a_c)
                let mut kl = 0.0;
                for c in 0..2 {
                    if q[c] > 0.0 {
                        kl += q[c] * q[c].ln() + q[c] * fw.nll[c];
                    }
                }
                total += w * kl;
            }
        }
        let flat = params.flatten();
        Ok(total + 0.5 * self.damping * dot(&flat, &flat))
    }

    fn gradient(&self, params: &ModelParams) -> Result<Vec<f64>> {
        let mut g = vec![0.0; params.len()];
        for z in self.train.iter() {
            let gi = grad(params, z)?;
            axpy(self.inv_n() * z.weight, &gi, &mut g);
        }
        if let Some((w, qs)) = &self.teacher {
            for (z, q) in self.train.iter().zip(qs) {
                let gi = grad_soft(params, &z.features, *q)?;
                axpy(*w, &gi, &mut g);
            }
        }
        axpy(self.damping, &params.flatten(), &mut g);
        Ok(g)
    }

    fn hessian_vec(&self, params: &ModelParams, v: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; params.len()];
        for z in self.train.iter() {
            let hv = hvp_example(params, &z.features, one_hot(z.label), v)?;
            axpy(self.inv_n() * z.weight, &hv, &mut out);
        }
        if let Some((w, qs)) = &self.teacher {
            for (z, q) in self.train.iter().zip(qs) {
                let hv = hvp_example(params, &z.features, *q, v)?;
                axpy(*w, &hv, &mut out);
            }
        }
        axpy(self.damping, v, &mut out);
        Ok(out)
    }
}

fn minimize(obj: &Objective<'_>, mut params: ModelParams, cfg: &TrainConfig) -> Result<FitResult> {
    let single_class = {
        let mut labels: Vec<u8> = obj.train.iter().map(|z| z.label).collect();
        labels.dedup();
        labels.len() < 2
    };
    let p = params.len();
    let mut grad_norm = f64::INFINITY;
    let mut best = params.clone();
    let mut best_obj = obj.value(&params)?;
    let mut iterations = 0;

    for iter in 0..cfg.max_iters {
        iterations = iter;
        let g = obj.gradient(&params)?;
        grad_norm = norm(&g);
        if grad_norm <= cfg.grad_tol {
            return Ok(FitResult {
                params,
                converged: true,
                iterations,
                grad_norm,
                single_class,
            });
        }
        // Truncated Newton step: CG on the damped Hessian. The forcing
        // tolerance tightens as the gradient shrinks.
        let neg_g: Vec<f64> = g.iter().map(|x| -x).collect();
        let cg_tol = (grad_norm * grad_norm.sqrt().min(0.5)).max(0.1 * cfg.grad_tol);
        let (mut d, outcome) = cg_solve(
            |v| obj.hessian_vec(&params, v).expect("shapes fixed"),
            &neg_g,
            cg_tol,
            (2 * p + 30).min(500),
        );
        if matches!(outcome, CgOutcome::NegativeCurvature) && norm(&d) == 0.0 {
            d = neg_g.clone();
        }
        if dot(&d, &g) >= 0.0 {
            d = neg_g.clone();
        }
        // Backtracking Armijo line search, capped at learning_rate.
        let f0 = obj.value(&params)?;
        let slope = dot(&g, &d);
        let mut t = cfg.learning_rate.min(1.0);
        let flat = params.flatten();
        let mut accepted = false;
        for _ in 0..60 {
            let mut trial = flat.clone();
            axpy(t, &d, &mut trial);
            let cand = params.unflatten(&trial)?;
            let f1 = obj.value(&cand)?;
            if f1 <= f0 + 1e-4 * t * slope {
                params = cand;
                if f1 < best_obj {
                    best_obj = f1;
                    best = params.clone();
                }
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // Step collapsed below resolution; treat the current point as
            // the result rather than spinning.
            break;
        }
    }
    let g = obj.gradient(&params)?;
    let final_norm = norm(&g);
    if final_norm < grad_norm {
        best = params;
        grad_norm = final_norm;
    }
    Ok(FitResult {
        params: best,
        converged: grad_norm <= cfg.grad_tol,
        iterations: iterations + 1,
        grad_norm,
        single_class,
    })
}

/// Minimize (1/n)Σ L(z,θ) + (λ/2)‖θ‖², so the objective's curvature is
/// exactly the damped mean Hessian that [`crate::influence`] inverts.
/// Deterministic given the seed; the Linear backend starts from zero
/// (convex, init-independent).
pub fn fit(train: &Dataset, cfg: &TrainConfig) -> Result<FitResult> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySet("fit on empty dataset".into()));
    }
    let params = init_params(cfg, train.feature_dim);
    let obj = Objective {
        train,
        damping: cfg.damping,
        teacher: None,
    };
    minimize(&obj, params, cfg)
}

/// Minimize (1/n)Σ L(z,θ) + α·avg KL(q(·;teacher) ‖ p(·;θ)) +
/// (λ/2)‖θ‖², the teacher held fixed throughout.
pub fn fit_consistency(
    train: &Dataset,
    teacher: &ModelParams,
    alpha: f64,
    cfg: &TrainConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySet("fit on empty dataset".into()));
    }
    if alpha < 0.0 {
        return Err(Error::InvalidArgument("alpha must be >= 0".into()));
    }
    let params = init_params(cfg, train.feature_dim);
    if !teacher.same_shape(&params) {
        return Err(Error::InvalidArgument(
            "teacher shape does not match training configuration".into(),
        ));
    }
    let qs: Vec<[f64; 2]> = train
        .iter()
        .map(|z| {
            let (p0, p1) = predict_proba(teacher, &z.features)?;
            Ok([p0, p1])
        })
        .collect::<Result<_>>()?;
    let obj = Objective {
        train,
        damping: cfg.damping,
        teacher: Some((alpha / train.len() as f64, qs)),
    };
    minimize(&obj, params, cfg)
}

/// Objective value of the consistency fit (training loss + α·avg KL +
/// L2) at arbitrary parameters; used to compare optima.
pub fn consistency_objective(
    params: &ModelParams,
    train: &Dataset,
    teacher: &ModelParams,
    alpha: f64,
    damping: f64,
) -> Result<f64> {
    let qs: Vec<[f64; 2]> = train
        .iter()
        .map(|z| {
            let (p0, p1) = predict_proba(teacher, &z.features)?;
            Ok([p0, p1])
        })
        .collect::<Result<_>>()?;
    let obj = Objective {
        train,
        damping,
        teacher: Some((alpha / train.len() as f64, qs)),
    };
    obj.value(params)
}

/// θ̄ₜ = β·θ̄ₜ₋₁ + (1−β)·θ̂ₜ, elementwise on the flattened parameters.
pub fn ema_update(teacher: &ModelParams, student: &ModelParams, beta: f64) -> Result<ModelParams> {
    if !teacher.same_shape(student) {
        return Err(Error::InvalidArgument(
            "ema_update: teacher and student shapes differ".into(),
        ));
    }
    let t = teacher.flatten();
    let s = student.flatten();
    let mixed: Vec<f64> = t
        .iter()
        .zip(&s)
        .map(|(ti, si)| beta * ti + (1.0 - beta) * si)
        .collect();
    teacher.unflatten(&mixed)
}
