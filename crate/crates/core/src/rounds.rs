//! The round loop shared by every benchmark: select, evaluate, update the
//! learner, fit the risk model.

use serde::{Deserialize, Serialize};

use crate::acquisition::{self, AcquisitionConfig, SelectionResult, Strategy};
use crate::error::Result;
use crate::metrics::{self, CvarSummary};
use crate::risk_model::{FitReport, HistoryBatch, RiskModel, RiskModelConfig};
use crate::seed;
use crate::task_space::{TaskId, TaskSpace};

/// Bins per dimension for the per-round selection histogram.
pub const ENTROPY_BINS: usize = 10;

/// A learner whose per-task risk can be evaluated exactly and that improves
/// when trained on a weighted task batch.
pub trait Benchmark {
    fn space(&self) -> &TaskSpace;

    /// Exact risks under the current learner, without changing it.
    fn oracle(&mut self, tasks: &[TaskId], rng: &mut dyn rand::RngCore) -> Result<Vec<f64>>;

    /// Evaluates the batch, turns its risks into weights with `weigh`, and
    /// applies one learner update. Returns the risks and the weights used.
    fn train(
        &mut self,
        tasks: &[TaskId],
        weigh: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
        rng: &mut dyn rand::RngCore,
    ) -> Result<(Vec<f64>, Vec<f64>)>;
}

/// Everything a round produced.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    pub selection: SelectionResult,
    pub risks: Vec<f64>,
    pub weights: Vec<f64>,
    /// Risk-model predicted means for the selected tasks, made before the
    /// round's fit.
    pub predicted: Option<Vec<f64>>,
    pub fit: Option<FitReport>,
}

/// Drives one strategy against one benchmark.
pub struct RoundDriver<B: Benchmark> {
    pub bench: B,
    pub acquisition: AcquisitionConfig,
    pub model_config: RiskModelConfig,
    pub model: Option<RiskModel>,
    seed: u64,
    round: usize,
}

impl<B: Benchmark> RoundDriver<B> {
    pub fn new(
        bench: B,
        acquisition: AcquisitionConfig,
        model_config: RiskModelConfig,
        seed: u64,
    ) -> Result<Self> {
        acquisition.validate()?;
        model_config.validate()?;
        let model = if acquisition.strategy.uses_model() {
            let mut rng = seed::stream(seed, "model-init", 0);
            Some(RiskModel::new(bench.space().clone(), &model_config, &mut rng)?)
        } else {
            None
        };
        Ok(Self {
            bench,
            acquisition,
            model_config,
            model,
            seed,
            round: 0,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn select(&mut self) -> Result<SelectionResult> {
        let t = self.round as u64;
        let mut rng = seed::stream(self.seed, "select", t);
        let space = self.bench.space().clone();
        let cfg = &self.acquisition;
        match cfg.strategy {
            Strategy::Erm | Strategy::Gdrm => acquisition::select_erm(&space, cfg, &mut rng),
            Strategy::Drm => {
                let mut oracle_rng = seed::stream(self.seed, "oracle", t);
                let bench = &mut self.bench;
                acquisition::select_drm(&space, cfg, |ids| bench.oracle(ids, &mut oracle_rng), &mut rng)
            }
            Strategy::MptsUcb => {
                let model = self.model.as_ref().expect("model-based strategy has a model");
                acquisition::select_mpts_ucb(&space, cfg, model, self.model_config.mc_passes, &mut rng)
            }
            Strategy::Pdts => {
                let model = self.model.as_ref().expect("model-based strategy has a model");
                acquisition::select_pdts(&space, cfg, model, &mut rng)
            }
        }
    }

    /// Runs one full round.
    pub fn step(&mut self) -> Result<RoundRecord> {
        let t = self.round as u64;
        let selection = self.select()?;

        let predicted = match &self.model {
            Some(model) => {
                let mut rng = seed::stream(self.seed, "predict-log", t);
                let est = model.predict_mc(&selection.tasks, self.model_config.mc_passes, &mut rng)?;
                Some(est.iter().map(|e| e.mean).collect())
            }
            None => None,
        };

        let strategy = self.acquisition.strategy;
        let eta = self.acquisition.gdrm_eta;
        let uniform = selection.weights.clone();
        let weigh = move |risks: &[f64]| -> Result<Vec<f64>> {
            if strategy == Strategy::Gdrm {
                acquisition::gdrm_weights(risks, eta)
            } else {
                Ok(uniform.clone())
            }
        };
        let mut bench_rng = seed::stream(self.seed, "bench", t);
        let (risks, weights) = self.bench.train(&selection.tasks, &weigh, &mut bench_rng)?;

        let fit = match self.model.as_mut() {
            Some(model) => {
                let batch = HistoryBatch::from_pairs(self.bench.space(), &selection.tasks, &risks, self.round)?;
                let mut rng = seed::stream(self.seed, "fit", t);
                Some(model.fit_round(&batch, self.model_config.fit_steps, self.model_config.lr, &mut rng)?)
            }
            None => None,
        };

        self.round += 1;
        Ok(RoundRecord {
            round: self.round - 1,
            selection,
            risks,
            weights,
            predicted,
            fit,
        })
    }
}

/// One JSONL row per round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub round: usize,
    pub seed: u64,
    pub strategy: Strategy,
    pub selected: Vec<TaskId>,
    pub weights: Vec<f64>,
    pub true_risks: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_risks: Option<Vec<f64>>,
    /// Mean and CVaR of `true_risks`.
    pub mean_risk: f64,
    pub cvar90: f64,
    pub cvar70: f64,
    pub cvar50: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pcc: Option<f64>,
    /// Histogram entropy of this round's selection.
    pub entropy: f64,
}

impl IterationLog {
    /// Builds the row from a round; `pcc` defaults to predicted-vs-true on
    /// the selected batch when not supplied.
    pub fn from_record(
        record: &RoundRecord,
        space: &TaskSpace,
        seed: u64,
        strategy: Strategy,
        pcc: Option<f64>,
    ) -> Result<Self> {
        let summary = CvarSummary::of(&record.risks)?;
        let pcc = pcc.or_else(|| {
            record
                .predicted
                .as_ref()
                .and_then(|p| metrics::pcc(p, &record.risks).ok())
        });
        Ok(Self {
            round: record.round,
            seed,
            strategy,
            selected: record.selection.tasks.clone(),
            weights: record.weights.clone(),
            true_risks: record.risks.clone(),
            predicted_risks: record.predicted.clone(),
            mean_risk: summary.mean,
            cvar90: summary.cvar90,
            cvar70: summary.cvar70,
            cvar50: summary.cvar50,
            pcc,
            entropy: metrics::histogram_entropy(&record.selection.tasks, space, ENTROPY_BINS)?,
        })
    }
}
