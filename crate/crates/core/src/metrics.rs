//! Evaluation measures: empirical CVaR in primal and dual form, Pearson
//! correlation, sampling-histogram entropy and the Top-B concentration
//! probability.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RatsError, Result};
use crate::subset;
use crate::task_space::{TaskId, TaskSpace};

/// The confidence levels reported alongside the plain mean.
pub const CVAR_GRID: [f64; 3] = [0.9, 0.7, 0.5];

/// A non-empty sample of finite task risks.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskSample(Vec<f64>);

impl RiskSample {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(RatsError::InvalidArgument("risk sample is empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(RatsError::NonFinite("risk sample".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn mean(&self) -> f64 {
        self.0.iter().sum::<f64>() / self.0.len() as f64
    }

    fn sorted_desc(&self) -> Vec<f64> {
        let mut v = self.0.clone();
        v.sort_by(|a, b| b.total_cmp(a));
        v
    }
}

/// Size of the worst-`(1 - alpha)` tail, `ceil((1 - alpha) n)`.
///
/// A relative slack of 1e-9 absorbs representation error, so that
/// `alpha = 0.7, n = 10` gives 3 rather than 4.
pub fn tail_count(n: usize, alpha: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(RatsError::InvalidArgument(format!(
            "alpha must lie in [0, 1), got {alpha}"
        )));
    }
    let exact = (1.0 - alpha) * n as f64;
    let k = (exact - 1e-9 * exact.max(1.0)).ceil() as usize;
    Ok(k.clamp(1, n))
}

/// Mean of the worst `ceil((1 - alpha) n)` values.
pub fn cvar_tail_mean(sample: &RiskSample, alpha: f64) -> Result<f64> {
    let k = tail_count(sample.0.len(), alpha)?;
    let sorted = sample.sorted_desc();
    Ok(sorted[..k].iter().sum::<f64>() / k as f64)
}

/// Dual form `min_zeta zeta + 1/k * sum (l_i - zeta)^+`, with `k` the tail count.
///
/// The objective is piecewise linear and convex in `zeta` with breakpoints at
/// the sample values, so scanning every order statistic finds the minimum.
pub fn cvar_dual(sample: &RiskSample, alpha: f64) -> Result<f64> {
    let k = tail_count(sample.0.len(), alpha)? as f64;
    let sorted = sample.sorted_desc();
    let mut best = f64::INFINITY;
    // prefix = sum of values strictly ahead of position j in descending order.
    let mut prefix = 0.0;
    for (j, &zeta) in sorted.iter().enumerate() {
        let excess = prefix - j as f64 * zeta;
        let value = zeta + excess / k;
        if value < best {
            best = value;
        }
        prefix += zeta;
    }
    Ok(best)
}

/// Mean plus CVaR at each level of [`CVAR_GRID`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvarSummary {
    pub mean: f64,
    pub cvar90: f64,
    pub cvar70: f64,
    pub cvar50: f64,
}

impl CvarSummary {
    pub fn of(values: &[f64]) -> Result<Self> {
        let s = RiskSample::new(values.to_vec())?;
        Ok(Self {
            mean: s.mean(),
            cvar90: cvar_tail_mean(&s, 0.9)?,
            cvar70: cvar_tail_mean(&s, 0.7)?,
            cvar50: cvar_tail_mean(&s, 0.5)?,
        })
    }
}

pub fn pcc(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(RatsError::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(RatsError::UndefinedCorrelation("need at least two points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(RatsError::UndefinedCorrelation("zero variance"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Shannon entropy (nats) of the normalized-coordinate histogram with
/// `bins` cells per dimension.
pub fn histogram_entropy(selections: &[TaskId], space: &TaskSpace, bins: usize) -> Result<f64> {
    if selections.is_empty() {
        return Err(RatsError::InvalidArgument("no selections".into()));
    }
    if bins == 0 {
        return Err(RatsError::InvalidArgument("bins must be positive".into()));
    }
    let d = space.dim();
    let cells = bins
        .checked_pow(d as u32)
        .ok_or_else(|| RatsError::InvalidArgument("histogram too large".into()))?;
    let mut counts = vec![0usize; cells];
    for id in selections {
        let unit = space.normalize(id)?;
        let cell = unit.iter().fold(0usize, |acc, &u| {
            let b = ((u * bins as f64) as usize).min(bins - 1);
            acc * bins + b
        });
        counts[cell] += 1;
    }
    let n = selections.len() as f64;
    Ok(counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationSetup {
    pub p_eps: f64,
    pub b_hat: usize,
    pub b: usize,
    pub trials: usize,
}

impl ConcentrationSetup {
    pub fn new(p_eps: f64, b_hat: usize, b: usize, trials: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_eps) {
            return Err(RatsError::InvalidArgument(format!(
                "p_eps must lie in [0, 1], got {p_eps}"
            )));
        }
        if b == 0 || b > b_hat {
            return Err(RatsError::InvalidArgument(format!(
                "need 1 <= B <= B_hat, got B = {b}, B_hat = {b_hat}"
            )));
        }
        Ok(Self {
            p_eps,
            b_hat,
            b,
            trials,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationEstimate {
    /// Fraction of trials whose whole selection fell in the neighborhood.
    pub probability: f64,
    /// Binomial standard error of `probability`.
    pub stderr: f64,
    /// Fraction of all sampled candidates inside the neighborhood.
    pub implied_p_eps: f64,
    /// Every selected identifier, pooled over trials.
    pub selections: Vec<TaskId>,
}

/// Chooses `b` of the scored candidates.
pub trait SubsetRule {
    fn choose(&self, space: &TaskSpace, ids: &[TaskId], scores: &[f64], b: usize)
        -> Result<Vec<usize>>;
}

/// Plain Top-B by score.
#[derive(Debug, Clone, Copy, Default)]
pub struct TopB;

impl SubsetRule for TopB {
    fn choose(&self, _: &TaskSpace, _: &[TaskId], scores: &[f64], b: usize) -> Result<Vec<usize>> {
        subset::top_b(scores, b)
    }
}

/// Greedy diversity-regularized selection with weight `gamma`.
#[derive(Debug, Clone, Copy)]
pub struct GreedyDiverse {
    pub gamma: f64,
}

impl SubsetRule for GreedyDiverse {
    fn choose(
        &self,
        space: &TaskSpace,
        ids: &[TaskId],
        scores: &[f64],
        b: usize,
    ) -> Result<Vec<usize>> {
        let cands = subset::ScoredCandidates::new(ids.to_vec(), scores.to_vec())?;
        subset::greedy_diverse(space, &cands, b, self.gamma)
    }
}

/// Monte Carlo estimate of the probability that every selected candidate lies
/// in the `epsilon`-neighborhood of the landscape maximum `f_max`.
///
/// Draws for each trial depend only on `rng`, so two rules run with equally
/// seeded generators see identical candidate sets.
#[allow(clippy::too_many_arguments)]
pub fn concentration_mc<F, S, R>(
    setup: &ConcentrationSetup,
    space: &TaskSpace,
    f: F,
    f_max: f64,
    epsilon: f64,
    rule: &S,
    rng: &mut R,
) -> Result<ConcentrationEstimate>
where
    F: Fn(&TaskId) -> f64,
    S: SubsetRule + ?Sized,
    R: Rng + ?Sized,
{
    if setup.trials == 0 {
        return Err(RatsError::InvalidArgument("need at least one trial".into()));
    }
    let near = |v: f64| (v - f_max).abs() <= epsilon;
    let mut hits = 0usize;
    let mut inside = 0usize;
    let mut selections = Vec::with_capacity(setup.trials * setup.b);
    for _ in 0..setup.trials {
        let ids = space.sample_uniform(setup.b_hat, rng);
        let values: Vec<f64> = ids.iter().map(&f).collect();
        inside += values.iter().filter(|&&v| near(v)).count();
        let chosen = rule.choose(space, &ids, &values, setup.b)?;
        if chosen.iter().all(|&i| near(values[i])) {
            hits += 1;
        }
        selections.extend(chosen.into_iter().map(|i| ids[i].clone()));
    }
    let n = setup.trials as f64;
    let p = hits as f64 / n;
    Ok(ConcentrationEstimate {
        probability: p,
        stderr: (p * (1.0 - p) / n).sqrt(),
        implied_p_eps: inside as f64 / (n * setup.b_hat as f64),
        selections,
    })
}

fn ln_binomial(n: usize, k: usize) -> f64 {
    (1..=k)
        .map(|i| ((n - k + i) as f64).ln() - (i as f64).ln())
        .sum()
}

/// The closed-form expression
/// `1 - sum_{i=1}^{B} p^(B_hat - i + 1) (1 - p)^(i - 1) C(B_hat, i - 1)`,
/// evaluated as written. It disagrees with first-principles limits (it gives
/// `1 - p` at `B = B_hat = 1`), so treat it as a reference value and use
/// [`concentration_mc`] as ground truth.
pub fn concentration_closed_form(setup: &ConcentrationSetup) -> f64 {
    let p = setup.p_eps;
    let n = setup.b_hat;
    let term = |i: usize| -> f64 {
        let a = (n - i + 1) as i32;
        let b = (i - 1) as i32;
        let pa = p.powi(a);
        let qb = (1.0 - p).powi(b);
        if pa == 0.0 || qb == 0.0 {
            return 0.0;
        }
        (pa.ln() + qb.ln() + ln_binomial(n, i - 1)).exp()
    };
    1.0 - (1..=setup.b).map(term).sum::<f64>()
}
