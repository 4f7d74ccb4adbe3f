//! Synthetic risk landscapes, the Top-B concentration study and the
//! sampler comparison on a drifting landscape.
//!
//! The comparison replaces a real learner with [`ToyLearner`]: training on a
//! task multiplies the risk inside a fixed radius around it by a constant
//! factor below one. Selection therefore feeds back into where the risk is
//! highest next round, without any RL machinery.

use std::io::Write;
use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::acquisition::{AcquisitionConfig, Strategy};
use crate::error::{RatsError, Result};
use crate::metrics::{self, ConcentrationSetup, GreedyDiverse, SubsetRule, TopB};
use crate::risk_model::RiskModelConfig;
use crate::rounds::{Benchmark, IterationLog, RoundDriver};
use crate::seed;
use crate::task_space::{TaskId, TaskSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandscapeKind {
    /// `A exp(-r^2 / (2 w^2))`: unimodal and continuous.
    GaussianBump,
    /// A main bump plus a 0.6-height bump at the mirrored location.
    Multimodal,
    /// Flat top of radius `w`, Gaussian fall-off beyond it.
    Plateau,
}

/// Risk surface over normalized identifiers. `r` is the Euclidean distance
/// from the (drifting) peak in normalized coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Landscape {
    pub kind: LandscapeKind,
    /// Peak location in normalized coordinates at round 0.
    pub peak: Vec<f64>,
    pub width: f64,
    pub amplitude: f64,
    /// Peak displacement per round, normalized units; wraps around the box.
    pub drift: Vec<f64>,
}

impl Landscape {
    pub fn gaussian_bump(peak: Vec<f64>, width: f64, amplitude: f64) -> Self {
        let d = peak.len();
        Self {
            kind: LandscapeKind::GaussianBump,
            peak,
            width,
            amplitude,
            drift: vec![0.0; d],
        }
    }

    pub fn validate(&self, space: &TaskSpace) -> Result<()> {
        if self.peak.len() != space.dim() || self.drift.len() != space.dim() {
            return Err(RatsError::config(
                "landscape",
                "peak and drift must match the task-space dimension",
            ));
        }
        if !(self.width > 0.0 && self.width.is_finite()) {
            return Err(RatsError::config("landscape.width", "must be positive"));
        }
        if !(self.amplitude > 0.0 && self.amplitude.is_finite()) {
            return Err(RatsError::config("landscape.amplitude", "must be positive"));
        }
        if self.peak.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(RatsError::config("landscape.peak", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn peak_at(&self, round: usize) -> Vec<f64> {
        self.peak
            .iter()
            .zip(&self.drift)
            .map(|(p, v)| (p + v * round as f64).rem_euclid(1.0))
            .collect()
    }

    fn bump(&self, unit: &[f64], centre: &[f64]) -> f64 {
        let r2: f64 = unit.iter().zip(centre).map(|(u, c)| (u - c) * (u - c)).sum();
        (-r2 / (2.0 * self.width * self.width)).exp()
    }

    /// Value at a normalized point.
    pub fn eval_unit(&self, unit: &[f64], round: usize) -> f64 {
        let centre = self.peak_at(round);
        let a = self.amplitude;
        match self.kind {
            LandscapeKind::GaussianBump => a * self.bump(unit, &centre),
            LandscapeKind::Multimodal => {
                let mirror: Vec<f64> = centre.iter().map(|c| 1.0 - c).collect();
                a * self.bump(unit, &centre) + 0.6 * a * self.bump(unit, &mirror)
            }
            LandscapeKind::Plateau => {
                let r: f64 = unit
                    .iter()
                    .zip(&centre)
                    .map(|(u, c)| (u - c) * (u - c))
                    .sum::<f64>()
                    .sqrt();
                let excess = (r - self.width).max(0.0);
                a * (-excess * excess / (2.0 * self.width * self.width)).exp()
            }
        }
    }

    pub fn eval(&self, space: &TaskSpace, id: &TaskId, round: usize) -> Result<f64> {
        Ok(self.eval_unit(&space.normalize(id)?, round))
    }
}

/// Stand-in learner: risk is the landscape times the product of the
/// reduction factors of every past training task within `radius`.
#[derive(Debug, Clone)]
pub struct ToyLearner {
    space: TaskSpace,
    landscape: Landscape,
    radius: f64,
    reduction: f64,
    round: usize,
    /// Normalized location and multiplier of every past training task.
    dents: Vec<(Vec<f64>, f64)>,
}

impl ToyLearner {
    pub fn new(space: TaskSpace, landscape: Landscape, radius: f64, reduction: f64) -> Result<Self> {
        landscape.validate(&space)?;
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(RatsError::config("synthetic.radius", "must be positive"));
        }
        if !(0.0..1.0).contains(&reduction) {
            return Err(RatsError::config("synthetic.reduction", "must lie in [0, 1)"));
        }
        Ok(Self {
            space,
            landscape,
            radius,
            reduction,
            round: 0,
            dents: Vec::new(),
        })
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn risk(&self, id: &TaskId) -> Result<f64> {
        let unit = self.space.normalize(id)?;
        let base = self.landscape.eval_unit(&unit, self.round);
        let r2 = self.radius * self.radius;
        let factor: f64 = self
            .dents
            .iter()
            .filter(|(c, _)| unit.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() <= r2)
            .map(|(_, m)| m)
            .product();
        Ok(base * factor)
    }

    /// Train on a weighted batch: each task's neighborhood shrinks by
    /// `reduction * min(1, w * B)` and the landscape advances one round.
    pub fn improve(&mut self, tasks: &[TaskId], weights: &[f64]) -> Result<()> {
        let b = tasks.len() as f64;
        for (t, &w) in tasks.iter().zip(weights) {
            let strength = (w * b).clamp(0.0, 1.0);
            self.dents
                .push((self.space.normalize(t)?, 1.0 - self.reduction * strength));
        }
        self.round += 1;
        Ok(())
    }
}

impl Benchmark for ToyLearner {
    fn space(&self) -> &TaskSpace {
        &self.space
    }

    fn oracle(&mut self, tasks: &[TaskId], _: &mut dyn RngCore) -> Result<Vec<f64>> {
        tasks.iter().map(|t| self.risk(t)).collect()
    }

    fn train(
        &mut self,
        tasks: &[TaskId],
        weigh: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
        _: &mut dyn RngCore,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let risks = tasks.iter().map(|t| self.risk(t)).collect::<Result<Vec<_>>>()?;
        let weights = weigh(&risks)?;
        self.improve(tasks, &weights)?;
        Ok((risks, weights))
    }
}

// ---------------------------------------------------------------------------
// Concentration study

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConcentrationConfig {
    pub dims: TaskSpace,
    pub landscape: Landscape,
    pub batch_size: usize,
    pub b_hats: Vec<usize>,
    pub epsilon: f64,
    pub trials: usize,
    pub seed: u64,
    /// `None` for plain Top-B, otherwise the greedy diversity weight.
    #[serde(default)]
    pub gamma_div: Option<f64>,
    #[serde(default = "default_bins")]
    pub bins: usize,
}

fn default_bins() -> usize {
    20
}

impl ConcentrationConfig {
    /// 1-D bump centred at 0.5 with width 0.1, `B = 8`.
    pub fn default_1d() -> Self {
        Self {
            dims: TaskSpace::unit(1).expect("valid"),
            landscape: Landscape::gaussian_bump(vec![0.5], 0.1, 1.0),
            batch_size: 8,
            b_hats: vec![8, 32, 128, 512],
            epsilon: 1.0 - (-0.125f64).exp(),
            trials: 10_000,
            seed: 0,
            gamma_div: None,
            bins: default_bins(),
        }
    }

    /// [`Self::default_1d`] with the bump scaled to `amplitude`; the
    /// tolerance scales along, so the implied `p_eps` stays near 0.1.
    pub fn with_amplitude(amplitude: f64) -> Self {
        let mut c = Self::default_1d();
        c.landscape.amplitude = amplitude;
        c.epsilon = amplitude * (1.0 - (-0.125f64).exp());
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationRow {
    pub b_hat: usize,
    pub p_concentrate: f64,
    pub stderr: f64,
    pub entropy: f64,
    pub implied_p_eps: f64,
}

/// For every pool size, Monte Carlo concentration of the selection rule with
/// direct landscape evaluation. Every pool size reuses the same seed.
pub fn run_concentration_experiment(config: &ConcentrationConfig) -> Result<Vec<ConcentrationRow>> {
    if config.landscape.kind != LandscapeKind::GaussianBump {
        return Err(RatsError::config("landscape.kind", "concentration study needs gaussian_bump"));
    }
    config.landscape.validate(&config.dims)?;
    let space = &config.dims;
    let f = |t: &TaskId| config.landscape.eval_unit(&space.normalize_unchecked(t), 0);
    let f_max = config.landscape.amplitude;
    let rule: Box<dyn SubsetRule> = match config.gamma_div {
        None => Box::new(TopB),
        Some(gamma) => Box::new(GreedyDiverse { gamma }),
    };
    config
        .b_hats
        .iter()
        .map(|&b_hat| {
            let setup = ConcentrationSetup::new(1.0, b_hat, config.batch_size, config.trials)?;
            let mut rng = seed::stream(config.seed, "concentration", b_hat as u64);
            let est = metrics::concentration_mc(&setup, space, f, f_max, config.epsilon, rule.as_ref(), &mut rng)?;
            Ok(ConcentrationRow {
                b_hat,
                p_concentrate: est.probability,
                stderr: est.stderr,
                entropy: metrics::histogram_entropy(&est.selections, space, config.bins)?,
                implied_p_eps: est.implied_p_eps,
            })
        })
        .collect()
}

pub fn write_concentration_csv(rows: &[ConcentrationRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["b_hat", "p_concentrate", "stderr", "entropy"])?;
    for r in rows {
        w.write_record([
            r.b_hat.to_string(),
            r.p_concentrate.to_string(),
            r.stderr.to_string(),
            r.entropy.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Sampler comparison

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonConfig {
    pub dims: TaskSpace,
    pub landscape: Landscape,
    /// Neighborhood radius (normalized units) the toy learner improves per task.
    pub radius: f64,
    /// Risk multiplier reduction per training task.
    pub reduction: f64,
    pub rounds: usize,
    pub seeds: Vec<u64>,
    /// Each entry is run for every seed.
    pub samplers: Vec<AcquisitionConfig>,
    pub risk_model: RiskModelConfig,
    /// Probe grid points per dimension for the PCC.
    pub probe_per_dim: usize,
    /// Evaluation grid points per dimension for CVaR and mean risk.
    pub eval_per_dim: usize,
    /// Monte Carlo passes behind each probe-grid predicted mean.
    #[serde(default = "default_probe_passes")]
    pub probe_passes: usize,
}

fn default_probe_passes() -> usize {
    200
}

impl ComparisonConfig {
    /// 2-D drifting bump, `B = 8`, ERM / DRM / MPTS (rho 0 and 0.5, pool 64B) / PDTS.
    pub fn default_2d() -> Self {
        let b = 8;
        let mut mpts_pure = AcquisitionConfig::new(Strategy::MptsUcb, b).with_pseudo_batch_factor(64.0);
        mpts_pure.mix_rho = 0.0;
        let mut mpts_mix = mpts_pure;
        mpts_mix.mix_rho = 0.5;
        Self {
            dims: TaskSpace::unit(2).expect("valid"),
            landscape: Landscape {
                kind: LandscapeKind::GaussianBump,
                peak: vec![0.3, 0.4],
                width: 0.25,
                amplitude: 3.0,
                drift: vec![0.01, 0.005],
            },
            radius: 0.1,
            reduction: 0.03,
            rounds: 50,
            seeds: (0..7).collect(),
            samplers: vec![
                AcquisitionConfig::new(Strategy::Erm, b),
                AcquisitionConfig::new(Strategy::Drm, b),
                mpts_pure,
                mpts_mix,
                AcquisitionConfig::new(Strategy::Pdts, b),
            ],
            risk_model: RiskModelConfig {
                fit_steps: 100,
                lr: 5e-3,
                ..RiskModelConfig::default()
            },
            probe_per_dim: 8,
            eval_per_dim: 24,
            probe_passes: default_probe_passes(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.landscape.validate(&self.dims)?;
        if self.rounds == 0 {
            return Err(RatsError::config("rounds", "must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(RatsError::config("seeds", "need at least one seed"));
        }
        if self.probe_passes < 2 {
            return Err(RatsError::config("probe_passes", "need at least 2 passes"));
        }
        if self.probe_per_dim < 2 || self.eval_per_dim < 1 {
            return Err(RatsError::config("probe_per_dim", "probe grid needs at least 2 points per dimension"));
        }
        for s in &self.samplers {
            s.validate()?;
        }
        self.risk_model.validate()
    }
}

/// Cell-centre grid with `per_dim` points along each axis.
pub fn grid(space: &TaskSpace, per_dim: usize) -> Vec<TaskId> {
    let d = space.dim();
    let total = per_dim.pow(d as u32);
    (0..total)
        .map(|mut k| {
            let mut unit = vec![0.0; d];
            for u in unit.iter_mut().rev() {
                *u = ((k % per_dim) as f64 + 0.5) / per_dim as f64;
                k /= per_dim;
            }
            space.denormalize(&unit).expect("grid matches dimension")
        })
        .collect()
}

/// One row of the comparison CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub round: usize,
    pub strategy: String,
    pub seed: u64,
    /// Entropy of all selections up to and including this round.
    pub entropy: f64,
    /// Probe-grid PCC of predicted means against true risks; model-based
    /// strategies only.
    pub pcc: Option<f64>,
    pub cvar90: f64,
    pub cvar50: f64,
    pub mean_risk: f64,
}

/// Label used in outputs, distinguishing MPTS mix settings.
pub fn sampler_label(cfg: &AcquisitionConfig) -> String {
    match cfg.strategy {
        Strategy::MptsUcb => format!("mpts_ucb_rho{}", cfg.mix_rho),
        s => s.as_str().to_string(),
    }
}

/// Runs one sampler for one seed; returns the per-round rows and iteration logs.
pub fn run_sampler(
    config: &ComparisonConfig,
    sampler: &AcquisitionConfig,
    seed: u64,
) -> Result<(Vec<ComparisonRow>, Vec<IterationLog>)> {
    run_sampler_with(config, sampler, seed, |_, _, _| Ok(()))
}

/// As [`run_sampler`], calling `on_round` after every round.
pub fn run_sampler_with<F>(
    config: &ComparisonConfig,
    sampler: &AcquisitionConfig,
    seed: u64,
    mut on_round: F,
) -> Result<(Vec<ComparisonRow>, Vec<IterationLog>)>
where
    F: FnMut(&ComparisonRow, &IterationLog, &RoundDriver<ToyLearner>) -> Result<()>,
{
    config.validate()?;
    let space = config.dims.clone();
    let learner = ToyLearner::new(space.clone(), config.landscape.clone(), config.radius, config.reduction)?;
    let mut driver = RoundDriver::new(learner, *sampler, config.risk_model, seed)?;
    let probe = grid(&space, config.probe_per_dim);
    let eval = grid(&space, config.eval_per_dim);
    let label = sampler_label(sampler);
    let mut history: Vec<TaskId> = Vec::new();
    let mut rows = Vec::with_capacity(config.rounds);
    let mut logs = Vec::with_capacity(config.rounds);

    for _ in 0..config.rounds {
        let record = driver.step()?;
        history.extend(record.selection.tasks.iter().cloned());
        let t = record.round as u64;

        let probe_truth = driver.bench.oracle(&probe, &mut seed::stream(seed, "probe", t))?;
        let pcc = match &driver.model {
            Some(model) => {
                let mut rng = seed::stream(seed, "probe-predict", t);
                let est = model.predict_mc(&probe, config.probe_passes, &mut rng)?;
                let means: Vec<f64> = est.iter().map(|e| e.mean).collect();
                metrics::pcc(&means, &probe_truth).ok()
            }
            None => None,
        };
        let eval_risks = driver.bench.oracle(&eval, &mut seed::stream(seed, "eval", t))?;
        let summary = metrics::CvarSummary::of(&eval_risks)?;
        let row = ComparisonRow {
            round: record.round,
            strategy: label.clone(),
            seed,
            entropy: metrics::histogram_entropy(&history, &space, crate::rounds::ENTROPY_BINS)?,
            pcc,
            cvar90: summary.cvar90,
            cvar50: summary.cvar50,
            mean_risk: summary.mean,
        };
        let log = IterationLog::from_record(&record, &space, seed, sampler.strategy, pcc)?;
        on_round(&row, &log, &driver)?;
        rows.push(row);
        logs.push(log);
    }
    Ok((rows, logs))
}

/// Every sampler for every seed, in config order.
pub fn run_sampler_comparison(config: &ComparisonConfig) -> Result<Vec<ComparisonRow>> {
    use rayon::prelude::*;
    config.validate()?;
    let jobs: Vec<(&AcquisitionConfig, u64)> = config
        .samplers
        .iter()
        .flat_map(|s| config.seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(s, seed)| run_sampler(config, s, seed).map(|(rows, _)| rows))
        .collect::<Result<Vec<_>>>()?;
    Ok(results.into_iter().flatten().collect())
}

pub fn write_comparison_csv(rows: &[ComparisonRow], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "round,strategy,seed,entropy,pcc,cvar90,cvar50,mean_risk")?;
    for r in rows {
        let pcc = r.pcc.map(|p| p.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.round, r.strategy, r.seed, r.entropy, pcc, r.cvar90, r.cvar50, r.mean_risk
        )?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bump2d() -> Landscape {
        Landscape::gaussian_bump(vec![0.4, 0.6], 0.2, 2.0)
    }

    #[test]
    fn bump_peaks_at_amplitude_and_is_radially_symmetric() {
        let l = bump2d();
        assert_eq!(l.eval_unit(&[0.4, 0.6], 0), 2.0);
        let a = l.eval_unit(&[0.5, 0.6], 0);
        let b = l.eval_unit(&[0.3, 0.6], 0);
        let c = l.eval_unit(&[0.4, 0.7], 0);
        assert!((a - b).abs() < 1e-15 && (a - c).abs() < 1e-15);
        assert_eq!(l.eval_unit(&[0.1, 0.2], 0), l.eval_unit(&[0.1, 0.2], 37));
    }

    #[test]
    fn drift_moves_the_peak() {
        let mut l = bump2d();
        l.drift = vec![0.1, 0.0];
        assert_eq!(l.peak_at(2), vec![0.6000000000000001, 0.6]);
        assert!(l.eval_unit(&[0.6, 0.6], 2) > l.eval_unit(&[0.6, 0.6], 0));
        // Wraps around the unit box.
        assert!((l.peak_at(7)[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn other_kinds_evaluate() {
        let mut l = bump2d();
        l.kind = LandscapeKind::Plateau;
        assert_eq!(l.eval_unit(&[0.45, 0.6], 0), 2.0);
        assert!(l.eval_unit(&[0.9, 0.1], 0) < 2.0);
        l.kind = LandscapeKind::Multimodal;
        assert!(l.eval_unit(&[0.6, 0.4], 0) > 0.6 * 2.0);
    }

    #[test]
    fn toy_learner_never_increases_risk() {
        let space = TaskSpace::unit(2).unwrap();
        let mut learner = ToyLearner::new(space.clone(), bump2d(), 0.15, 0.3).unwrap();
        let probes = space.sample_uniform(200, &mut ChaCha8Rng::seed_from_u64(1));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let before: Vec<f64> = probes.iter().map(|p| learner.risk(p).unwrap()).collect();
            let tasks = space.sample_uniform(4, &mut rng);
            learner.improve(&tasks, &[0.25; 4]).unwrap();
            // No drift: the only change is the improvement.
            for (p, b) in probes.iter().zip(&before) {
                assert!(learner.risk(p).unwrap() <= *b);
            }
        }
    }

    #[test]
    fn toy_learner_reduces_near_selected_tasks() {
        let space = TaskSpace::unit(2).unwrap();
        let mut learner = ToyLearner::new(space, bump2d(), 0.1, 0.5).unwrap();
        let peak = TaskId(vec![0.4, 0.6]);
        learner.improve(std::slice::from_ref(&peak), &[1.0]).unwrap();
        assert!((learner.risk(&peak).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(learner.risk(&TaskId(vec![0.4, 0.9])).unwrap(), bump2d().eval_unit(&[0.4, 0.9], 0));
    }

    #[test]
    fn grid_covers_cell_centres() {
        let g = grid(&TaskSpace::unit(2).unwrap(), 2);
        assert_eq!(
            g,
            vec![
                TaskId(vec![0.25, 0.25]),
                TaskId(vec![0.25, 0.75]),
                TaskId(vec![0.75, 0.25]),
                TaskId(vec![0.75, 0.75])
            ]
        );
    }

    #[test]
    fn concentration_columns_behave() {
        let mut cfg = ConcentrationConfig::default_1d();
        cfg.trials = 2000;
        let rows = run_concentration_experiment(&cfg).unwrap();
        for pair in rows.windows(2) {
            let se = (pair[0].stderr.powi(2) + pair[1].stderr.powi(2)).sqrt();
            assert!(pair[1].p_concentrate + 3.0 * se >= pair[0].p_concentrate);
            assert!(pair[1].entropy <= pair[0].entropy + 1e-9);
        }
    }

    #[test]
    fn erm_cumulative_entropy_near_uniform() {
        let mut cfg = ComparisonConfig::default_2d();
        cfg.rounds = 40;
        let (rows, _) = run_sampler(&cfg, &AcquisitionConfig::new(Strategy::Erm, 8), 3).unwrap();
        // 320 uniform draws over 100 cells.
        let last = rows.last().unwrap();
        assert!(last.entropy > 0.9 * 100f64.ln(), "entropy {}", last.entropy);
        assert!(last.pcc.is_none());
    }
}
