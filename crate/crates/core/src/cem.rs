//! Cross-entropy-method model-predictive control.
//!
//! A Gaussian over action sequences is refined by sampling candidates,
//! scoring them with mean-propagated rollouts of a [`LatentModel`], refitting
//! to the elites and smoothing the update. Only the first action is executed.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffnet::Mat;
use crate::error::{Error, Result};
use crate::world::LatentModel;

pub const STD_FLOOR: f64 = 1e-3;

/// Per-step Gaussian over actions; rows are time steps, columns action dims.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub mean: Mat,
    pub std: Mat,
}

impl PolicyParams {
    pub fn new(mean: Mat, std: Mat) -> Result<Self> {
        if mean.dim() != std.dim() {
            return Err(Error::Shape(format!("policy mean {:?} vs std {:?}", mean.dim(), std.dim())));
        }
        if std.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Domain("policy std must be nonnegative".into()));
        }
        Ok(Self { mean, std: std.mapv(|v| v.max(STD_FLOOR)) })
    }

    /// Zero mean (clipped into bounds) and half the bound width as std.
    pub fn initial(steps: usize, bounds: &ActionBounds) -> Self {
        let a = bounds.dim();
        Self {
            mean: Mat::from_shape_fn((steps, a), |(_, d)| 0.0f64.clamp(bounds.lo[d], bounds.hi[d])),
            std: Mat::from_shape_fn((steps, a), |(_, d)| (0.5 * (bounds.hi[d] - bounds.lo[d])).max(STD_FLOOR)),
        }
    }

    /// Drops the first step and appends an initial step; the std restarts
    /// from its initial value.
    pub fn shifted(&self, bounds: &ActionBounds) -> Self {
        let init = Self::initial(self.steps(), bounds);
        let mut mean = init.mean.clone();
        for t in 1..self.steps() {
            mean.row_mut(t - 1).assign(&self.mean.row(t));
        }
        Self { mean, std: init.std }
    }

    pub fn steps(&self) -> usize {
        self.mean.nrows()
    }

    pub fn action_dim(&self) -> usize {
        self.mean.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionBounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ActionBounds {
    pub fn symmetric(dim: usize, limit: f64) -> Self {
        Self { lo: vec![-limit; dim], hi: vec![limit; dim] }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    fn validate(&self) -> Result<()> {
        if self.lo.is_empty() || self.lo.len() != self.hi.len() || self.lo.iter().zip(&self.hi).any(|(l, h)| !(l < h)) {
            return Err(Error::Config(format!("invalid action bounds {:?} / {:?}", self.lo, self.hi)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CemConfig {
    pub candidates: usize,
    pub elite_ratio: f64,
    pub smoothing: f64,
    /// Scores sum rewards over steps `0..=horizon`, so sequences hold
    /// `horizon + 1` actions.
    pub horizon: usize,
    pub max_iters: usize,
    /// Wall-clock seconds per call to [`plan`]; `None` means unlimited.
    pub time_budget: Option<f64>,
    pub bounds: ActionBounds,
    /// Return the first action of the best candidate seen instead of the
    /// final policy mean.
    #[serde(default)]
    pub return_best: bool,
}

impl Default for CemConfig {
    fn default() -> Self {
        Self {
            candidates: 10_000,
            elite_ratio: 0.01,
            smoothing: 0.4,
            horizon: 5,
            max_iters: 10,
            time_budget: None,
            bounds: ActionBounds::symmetric(2, 1.0),
            return_best: false,
        }
    }
}

impl CemConfig {
    pub fn elite_count(&self) -> usize {
        elite_count(self.candidates, self.elite_ratio)
    }

    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        if !(self.elite_ratio > 0.0 && self.elite_ratio < 1.0) {
            return Err(Error::Config(format!("elite_ratio must lie in (0, 1), got {}", self.elite_ratio)));
        }
        if !(0.0..=1.0).contains(&self.smoothing) {
            return Err(Error::Config(format!("smoothing must lie in [0, 1], got {}", self.smoothing)));
        }
        if self.candidates == 0 || self.elite_count() < 1 || (self.elite_ratio * self.candidates as f64 + 1e-9).floor() < 1.0 {
            return Err(Error::Config(format!(
                "elite_ratio * candidates must be at least 1 ({} * {})",
                self.elite_ratio, self.candidates
            )));
        }
        if let Some(b) = self.time_budget {
            if !(b >= 0.0) {
                return Err(Error::Config(format!("time_budget must be nonnegative, got {b}")));
            }
        }
        Ok(())
    }
}

fn elite_count(k: usize, ratio: f64) -> usize {
    ((ratio * k as f64 + 1e-9).floor() as usize).clamp(1, k.max(1))
}

/// Candidate action sequences stored step-major: `steps[h]` is `K x action_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidates {
    pub steps: Vec<Mat>,
}

impl Candidates {
    pub fn len(&self) -> usize {
        self.steps.first().map_or(0, |m| m.nrows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Action sequence of candidate `k`.
    pub fn sequence(&self, k: usize) -> Vec<Vec<f64>> {
        self.steps.iter().map(|m| m.row(k).to_vec()).collect()
    }
}

/// `K` element-wise Gaussian draws from `policy`, clipped to `bounds`.
pub fn sample_candidates(policy: &PolicyParams, k: usize, bounds: &ActionBounds, rng: &mut impl Rng) -> Result<Candidates> {
    if bounds.dim() != policy.action_dim() {
        return Err(Error::Shape(format!("bounds cover {} dims, policy has {}", bounds.dim(), policy.action_dim())));
    }
    let mut steps: Vec<Mat> = (0..policy.steps()).map(|_| Mat::zeros((k, policy.action_dim()))).collect();
    for i in 0..k {
        for (h, m) in steps.iter_mut().enumerate() {
            for d in 0..policy.action_dim() {
                let e: f64 = rng.sample(StandardNormal);
                m[[i, d]] = (policy.mean[[h, d]] + policy.std[[h, d]] * e).clamp(bounds.lo[d], bounds.hi[d]);
            }
        }
    }
    Ok(Candidates { steps })
}

/// `R^k = sum_h r(s_h, a_h)` under mean propagation. Candidates whose
/// rollout produces a non-finite value score `-inf`.
pub fn score_candidates<M: LatentModel + ?Sized>(model: &M, s0: &[f64], cands: &Candidates) -> Result<Vec<f64>> {
    if s0.len() != model.state_dim() {
        return Err(Error::Shape(format!("initial state length {}, expected {}", s0.len(), model.state_dim())));
    }
    let k = cands.len();
    let mut s = Mat::from_shape_fn((k, s0.len()), |(_, j)| s0[j]);
    let mut scores = vec![0.0; k];
    for (h, a) in cands.steps.iter().enumerate() {
        if a.ncols() != model.action_dim() {
            return Err(Error::Shape(format!("candidate action width {}, expected {}", a.ncols(), model.action_dim())));
        }
        for (acc, r) in scores.iter_mut().zip(model.reward_mean(&s, a)?) {
            *acc += r;
        }
        if h + 1 < cands.steps.len() {
            s = model.transition(&s, a)?.0;
        }
        for (i, row) in s.rows().into_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                scores[i] = f64::NEG_INFINITY;
            }
        }
    }
    for v in &mut scores {
        if !v.is_finite() {
            *v = f64::NEG_INFINITY;
        }
    }
    Ok(scores)
}

/// Indices of the `max(1, floor(ratio K))` best scores, best first; ties go
/// to the lower index.
pub fn select_elites(scores: &[f64], ratio: f64) -> Vec<usize> {
    let n = elite_count(scores.len(), ratio).min(scores.len());
    let key = |v: f64| if v.is_nan() { f64::NEG_INFINITY } else { v };
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| key(scores[b]).total_cmp(&key(scores[a])).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

/// Maximum-likelihood Gaussian of the elites: per-entry mean and population
/// standard deviation, floored.
pub fn refit_policy(cands: &Candidates, elites: &[usize]) -> Result<PolicyParams> {
    if elites.is_empty() {
        return Err(Error::Domain("at least one elite is required".into()));
    }
    let n = elites.len() as f64;
    let steps = cands.steps.len();
    let a = cands.steps.first().map_or(0, |m| m.ncols());
    let mut mean = Mat::zeros((steps, a));
    let mut std = Mat::zeros((steps, a));
    for (h, m) in cands.steps.iter().enumerate() {
        for d in 0..a {
            let mu = elites.iter().map(|&i| m[[i, d]]).sum::<f64>() / n;
            let var = elites.iter().map(|&i| (m[[i, d]] - mu).powi(2)).sum::<f64>() / n;
            mean[[h, d]] = mu;
            std[[h, d]] = var.sqrt();
        }
    }
    PolicyParams::new(mean, std)
}

/// `eta * old + (1 - eta) * new`, separately for mean and std.
pub fn smooth_update(old: &PolicyParams, new: &PolicyParams, eta: f64) -> Result<PolicyParams> {
    if old.mean.dim() != new.mean.dim() {
        return Err(Error::Shape(format!("policy shapes {:?} vs {:?}", old.mean.dim(), new.mean.dim())));
    }
    PolicyParams::new(&old.mean * eta + &new.mean * (1.0 - eta), &old.std * eta + &new.std * (1.0 - eta))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanDiagnostics {
    pub iterations_completed: usize,
    pub best_score: f64,
    /// Set when the budget allowed no iteration; the action is then the
    /// initial policy mean.
    pub no_iterations: bool,
    pub wall_ms: f64,
}

impl PlanDiagnostics {
    pub fn log_line(&self, step: usize) -> String {
        format!(
            "step={step} iterations_completed={} best_score={} wall_ms={:.3}",
            self.iterations_completed, self.best_score, self.wall_ms
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanResult {
    pub action: Vec<f64>,
    pub policy: PolicyParams,
    pub diagnostics: PlanDiagnostics,
}

/// Runs CEM iterations until `max_iters` or the time budget. The budget is
/// checked between iterations: another iteration starts only if, at the mean
/// iteration time so far, it would end within the budget. `init` defaults to
/// [`PolicyParams::initial`].
pub fn plan<M: LatentModel + ?Sized>(
    model: &M,
    s0: &[f64],
    config: &CemConfig,
    seed: u64,
    init: Option<PolicyParams>,
) -> Result<PlanResult> {
    config.validate()?;
    if config.bounds.dim() != model.action_dim() {
        return Err(Error::Config(format!(
            "bounds cover {} action dims, model has {}",
            config.bounds.dim(),
            model.action_dim()
        )));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut policy = init.unwrap_or_else(|| PolicyParams::initial(config.horizon + 1, &config.bounds));
    if policy.steps() != config.horizon + 1 || policy.action_dim() != model.action_dim() {
        return Err(Error::Shape(format!(
            "initial policy {:?}, expected ({}, {})",
            policy.mean.dim(),
            config.horizon + 1,
            model.action_dim()
        )));
    }
    let mut best_score = f64::NEG_INFINITY;
    let mut best_action: Option<Vec<f64>> = None;
    let mut iterations = 0;
    while iterations < config.max_iters {
        if let Some(budget) = config.time_budget {
            // Only start an iteration expected to finish inside the control period.
            let elapsed = start.elapsed().as_secs_f64();
            let mean_iter = if iterations == 0 { 0.0 } else { elapsed / iterations as f64 };
            if elapsed >= budget || elapsed + mean_iter > budget {
                break;
            }
        }
        let cands = sample_candidates(&policy, config.candidates, &config.bounds, &mut rng)?;
        let scores = score_candidates(model, s0, &cands)?;
        let elites = select_elites(&scores, config.elite_ratio);
        if scores[elites[0]] > best_score || best_action.is_none() {
            best_score = scores[elites[0]];
            best_action = Some(cands.steps[0].row(elites[0]).to_vec());
        }
        let refit = refit_policy(&cands, &elites)?;
        policy = smooth_update(&policy, &refit, config.smoothing)?;
        iterations += 1;
    }
    let no_iterations = iterations == 0;
    if no_iterations {
        log::warn!("planner budget allowed no iteration; returning the initial policy mean");
    }
    let action = match (config.return_best, best_action) {
        (true, Some(a)) => a,
        _ => policy.mean.row(0).to_vec(),
    };
    Ok(PlanResult {
        action,
        policy,
        diagnostics: PlanDiagnostics {
            iterations_completed: iterations,
            best_score,
            no_iterations,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        },
    })
}
