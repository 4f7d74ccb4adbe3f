//! Task-sampling strategies. Each produces, per round, `B` tasks to train on
//! and a weight per task.
//!
//! * ERM draws `B` tasks uniformly.
//! * GDRM draws like ERM; the learner reweights per-task gradients with a
//!   softmax over the observed losses ([`gdrm_weights`]).
//! * DRM evaluates `B_hat` uniform tasks exactly and keeps the `B` worst.
//! * MPTS scores `B_hat` candidates with the risk model's UCB
//!   `gamma0 * mean + gamma1 * std` and keeps the Top-B, optionally mixing in
//!   uniformly drawn candidates.
//! * PDTS scores `B_hat` candidates with one posterior sample and keeps a
//!   diversity-regularized subset.
//!
//! DRM is the only strategy that touches the exact risk oracle at selection
//! time.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RatsError, Result};
use crate::risk_model::RiskModel;
use crate::subset::{self, ScoredCandidates};
use crate::task_space::{TaskId, TaskSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Erm,
    Gdrm,
    Drm,
    MptsUcb,
    Pdts,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Erm,
        Strategy::Gdrm,
        Strategy::Drm,
        Strategy::MptsUcb,
        Strategy::Pdts,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Erm => "erm",
            Strategy::Gdrm => "gdrm",
            Strategy::Drm => "drm",
            Strategy::MptsUcb => "mpts_ucb",
            Strategy::Pdts => "pdts",
        }
    }

    /// Whether the strategy scores candidates with the risk model.
    pub fn uses_model(self) -> bool {
        matches!(self, Strategy::MptsUcb | Strategy::Pdts)
    }

    /// Default candidate-pool size as a multiple of `B`.
    pub fn default_pseudo_batch_factor(self) -> f64 {
        match self {
            Strategy::Erm | Strategy::Gdrm => 1.0,
            Strategy::Drm | Strategy::MptsUcb => 2.0,
            Strategy::Pdts => 64.0,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = RatsError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| RatsError::config("strategy", format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionConfig {
    pub strategy: Strategy,
    /// `B`, tasks returned per round.
    pub batch_size: usize,
    /// `B_hat`, candidates scored per round.
    pub pseudo_batch: usize,
    /// UCB weight on the predicted mean.
    pub gamma0: f64,
    /// UCB weight on the predicted std.
    pub gamma1: f64,
    /// Diversity weight for PDTS.
    pub gamma_div: f64,
    /// GDRM softmax temperature.
    pub gdrm_eta: f64,
    /// Fraction of the MPTS batch drawn uniformly from the unselected candidates.
    pub mix_rho: f64,
}

impl AcquisitionConfig {
    /// Defaults for `strategy`: `gamma0 = gamma1 = gamma_div = 1`, `rho = 0.5`,
    /// `eta = 0.001` and the strategy's default pool size.
    pub fn new(strategy: Strategy, batch_size: usize) -> Self {
        let factor = strategy.default_pseudo_batch_factor();
        Self {
            strategy,
            batch_size,
            pseudo_batch: pool_size(batch_size, factor),
            gamma0: 1.0,
            gamma1: 1.0,
            gamma_div: 1.0,
            gdrm_eta: 1e-3,
            mix_rho: 0.5,
        }
    }

    pub fn with_pseudo_batch_factor(mut self, factor: f64) -> Self {
        self.pseudo_batch = pool_size(self.batch_size, factor);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(RatsError::config("batch_size", "must be positive"));
        }
        if self.pseudo_batch < self.batch_size {
            return Err(RatsError::config(
                "pseudo_batch_factor",
                format!(
                    "candidate pool {} is smaller than batch {}",
                    self.pseudo_batch, self.batch_size
                ),
            ));
        }
        for (field, v) in [
            ("gamma0", self.gamma0),
            ("gamma1", self.gamma1),
            ("gdrm_eta", self.gdrm_eta),
        ] {
            if !v.is_finite() {
                return Err(RatsError::config(field, "must be finite"));
            }
        }
        if !(self.gamma_div >= 0.0 && self.gamma_div.is_finite()) {
            return Err(RatsError::config("gamma_div", "must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.mix_rho) {
            return Err(RatsError::config("mix_rho", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn pool_size(batch: usize, factor: f64) -> usize {
    ((batch as f64) * factor).round().max(batch as f64) as usize
}

/// One round's selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub tasks: Vec<TaskId>,
    /// Per-task weights; non-negative, summing to one.
    pub weights: Vec<f64>,
    /// Indices of `tasks` within `candidates`, ascending.
    pub chosen: Vec<usize>,
    pub candidates: Vec<TaskId>,
    /// Per-candidate scores; empty when the strategy does not score.
    pub scores: Vec<f64>,
}

impl SelectionResult {
    fn from_indices(candidates: Vec<TaskId>, scores: Vec<f64>, chosen: Vec<usize>) -> Self {
        let tasks: Vec<TaskId> = chosen.iter().map(|&i| candidates[i].clone()).collect();
        let b = tasks.len() as f64;
        Self {
            weights: vec![1.0 / b; tasks.len()],
            tasks,
            chosen,
            candidates,
            scores,
        }
    }
}

pub fn select_erm<R: Rng + ?Sized>(
    space: &TaskSpace,
    config: &AcquisitionConfig,
    rng: &mut R,
) -> Result<SelectionResult> {
    config.validate()?;
    let candidates = space.sample_uniform(config.batch_size, rng);
    let chosen = (0..config.batch_size).collect();
    Ok(SelectionResult::from_indices(candidates, Vec::new(), chosen))
}

/// `w_i = exp(eta * l_i) / sum_b exp(eta * l_b)`, computed with the maximum subtracted.
pub fn gdrm_weights(losses: &[f64], eta: f64) -> Result<Vec<f64>> {
    if losses.is_empty() {
        return Err(RatsError::InvalidArgument("no losses to weight".into()));
    }
    if losses.iter().any(|l| !l.is_finite()) || !eta.is_finite() {
        return Err(RatsError::NonFinite("GDRM losses or temperature".into()));
    }
    let logits: Vec<f64> = losses.iter().map(|l| eta * l).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Evaluate `B_hat` uniform candidates exactly and keep the `B` riskiest.
pub fn select_drm<R, O>(
    space: &TaskSpace,
    config: &AcquisitionConfig,
    mut oracle: O,
    rng: &mut R,
) -> Result<SelectionResult>
where
    R: Rng + ?Sized,
    O: FnMut(&[TaskId]) -> Result<Vec<f64>>,
{
    config.validate()?;
    let candidates = space.sample_uniform(config.pseudo_batch, rng);
    let risks = oracle(&candidates)?;
    if risks.len() != candidates.len() {
        return Err(RatsError::DimensionMismatch {
            expected: candidates.len(),
            got: risks.len(),
        });
    }
    let chosen = subset::top_b(&risks, config.batch_size)?;
    Ok(SelectionResult::from_indices(candidates, risks, chosen))
}

/// UCB scores `gamma0 * mean + gamma1 * std`.
pub fn ucb_scores(means: &[f64], stds: &[f64], gamma0: f64, gamma1: f64) -> Vec<f64> {
    means
        .iter()
        .zip(stds)
        .map(|(m, s)| gamma0 * m + gamma1 * s)
        .collect()
}

/// Top-B by UCB for `ceil((1 - rho) B)` slots, the remaining `floor(rho B)`
/// drawn uniformly from the unselected candidates.
pub fn select_mpts_ucb<R: Rng + ?Sized>(
    space: &TaskSpace,
    config: &AcquisitionConfig,
    model: &RiskModel,
    passes: usize,
    rng: &mut R,
) -> Result<SelectionResult> {
    config.validate()?;
    let candidates = space.sample_uniform(config.pseudo_batch, rng);
    let est = model.predict_mc(&candidates, passes, rng)?;
    let means: Vec<f64> = est.iter().map(|e| e.mean).collect();
    let stds: Vec<f64> = est.iter().map(|e| e.std).collect();
    let scores = ucb_scores(&means, &stds, config.gamma0, config.gamma1);

    let b = config.batch_size;
    let n_random = ((config.mix_rho * b as f64) + 1e-9).floor() as usize;
    let n_top = b - n_random;
    let mut chosen = if n_top > 0 {
        subset::top_b(&scores, n_top)?
    } else {
        Vec::new()
    };
    if n_random > 0 {
        let rest: Vec<usize> = (0..candidates.len()).filter(|i| !chosen.contains(i)).collect();
        let picks = index::sample(rng, rest.len(), n_random);
        chosen.extend(picks.into_iter().map(|k| rest[k]));
        chosen.sort_unstable();
    }
    Ok(SelectionResult::from_indices(candidates, scores, chosen))
}

/// One posterior-sampling pass over `B_hat` candidates, then the greedy
/// diversity-regularized subset search.
pub fn select_pdts<R: Rng + ?Sized>(
    space: &TaskSpace,
    config: &AcquisitionConfig,
    model: &RiskModel,
    rng: &mut R,
) -> Result<SelectionResult> {
    config.validate()?;
    let candidates = space.sample_uniform(config.pseudo_batch, rng);
    let scores = model.predict_posterior_sample(&candidates, rng)?;
    let cands = ScoredCandidates::new(candidates, scores)?;
    let chosen = subset::greedy_diverse(space, &cands, config.batch_size, config.gamma_div)?;
    let (candidates, scores) = cands.into_parts();
    Ok(SelectionResult::from_indices(candidates, scores, chosen))
}
