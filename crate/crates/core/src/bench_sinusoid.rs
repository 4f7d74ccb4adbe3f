//! Few-shot sinusoid regression with first-order MAML.
//!
//! Tasks are `y = a sin(x - b)` with `x ~ U[-5, 5]`. A task's risk is the
//! query MSE after adapting the meta-parameters on its support shots.

use std::io::Write;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::{AcquisitionConfig, Strategy};
use crate::error::{RatsError, Result};
use crate::metrics::{self, RiskSample};
use crate::nnet::{Activation, AdamState, DenseNet, Gradient};
use crate::risk_model::RiskModelConfig;
use crate::rounds::{Benchmark, IterationLog, RoundDriver};
use crate::seed;
use crate::task_space::{TaskId, TaskSpace};

pub const X_RANGE: (f64, f64) = (-5.0, 5.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinusoidTask {
    pub amplitude: f64,
    pub phase: f64,
}

impl SinusoidTask {
    pub fn new(amplitude: f64, phase: f64) -> Result<Self> {
        let t = Self { amplitude, phase };
        TaskSpace::sinusoid().check(&t.id())?;
        Ok(t)
    }

    pub fn from_id(id: &TaskId) -> Result<Self> {
        TaskSpace::sinusoid().check(id)?;
        Ok(Self {
            amplitude: id.0[0],
            phase: id.0[1],
        })
    }

    pub fn id(&self) -> TaskId {
        TaskId(vec![self.amplitude, self.phase])
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.amplitude * (x - self.phase).sin()
    }
}

/// `(x, y)` pairs.
pub type Shots = Vec<(f64, f64)>;

pub fn sample_shots<R: Rng + ?Sized>(task: &SinusoidTask, k: usize, rng: &mut R) -> Result<Shots> {
    if k == 0 {
        return Err(RatsError::InvalidArgument("need at least one shot".into()));
    }
    Ok((0..k)
        .map(|_| {
            let x = rng.random_range(X_RANGE.0..=X_RANGE.1);
            (x, task.eval(x))
        })
        .collect())
}

/// Mean squared error of a scalar regression net.
pub fn mse(net: &DenseNet, data: &[(f64, f64)]) -> Result<f64> {
    if data.is_empty() {
        return Err(RatsError::EmptyBatch);
    }
    let mut total = 0.0;
    for &(x, y) in data {
        let r = net.forward(&[x])?[0] - y;
        total += r * r;
    }
    Ok(total / data.len() as f64)
}

/// MSE and its gradient with respect to every parameter.
pub fn mse_grad(net: &DenseNet, data: &[(f64, f64)]) -> Result<(f64, Gradient)> {
    if data.is_empty() {
        return Err(RatsError::EmptyBatch);
    }
    let n = data.len() as f64;
    let mut grad = Gradient::zeros_like(net);
    let mut total = 0.0;
    for &(x, y) in data {
        let trace = net.forward_trace(&[x])?;
        let r = trace.output()[0] - y;
        total += r * r;
        net.accumulate_backward(&trace, &[2.0 * r / n], &mut grad)?;
    }
    Ok((total / n, grad))
}

fn sgd(net: &mut DenseNet, grad: &Gradient, lr: f64) {
    for (layer, g) in net.layers_mut().iter_mut().zip(&grad.layers) {
        for (w, d) in layer.weights_mut().iter_mut().zip(&g.weights) {
            *w -= lr * d;
        }
        for (b, d) in layer.biases_mut().iter_mut().zip(&g.biases) {
            *b -= lr * d;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MamlConfig {
    pub hidden: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub inner_steps: usize,
    /// Support shots per task.
    pub k_support: usize,
    pub n_query: usize,
}

impl Default for MamlConfig {
    fn default() -> Self {
        Self {
            hidden: 40,
            inner_lr: 1e-3,
            outer_lr: 1e-3,
            inner_steps: 1,
            k_support: 10,
            n_query: 10,
        }
    }
}

impl MamlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(RatsError::config("sinusoid.hidden", "must be positive"));
        }
        if !(self.inner_lr >= 0.0 && self.inner_lr.is_finite()) {
            return Err(RatsError::config("sinusoid.inner_lr", "must be finite and non-negative"));
        }
        if !(self.outer_lr > 0.0 && self.outer_lr.is_finite()) {
            return Err(RatsError::config("sinusoid.outer_lr", "must be positive"));
        }
        if self.k_support == 0 || self.n_query == 0 {
            return Err(RatsError::config("sinusoid.k_support", "support and query sizes must be positive"));
        }
        Ok(())
    }
}

/// Meta-parameters plus the outer optimizer.
#[derive(Debug, Clone)]
pub struct MamlLearner {
    pub net: DenseNet,
    pub config: MamlConfig,
    outer: AdamState,
}

/// Post-adaptation query loss of one task and its first-order meta-gradient.
#[derive(Debug, Clone)]
pub struct TaskGradient {
    pub risk: f64,
    pub gradient: Gradient,
}

impl MamlLearner {
    /// `1 -> hidden -> hidden -> 1` relu net with Glorot initialization.
    pub fn new<R: Rng + ?Sized>(config: MamlConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let net = DenseNet::glorot(
            &[1, config.hidden, config.hidden, 1],
            Activation::Relu,
            Activation::Identity,
            rng,
        );
        Self::from_net(net, config)
    }

    pub fn from_net(net: DenseNet, config: MamlConfig) -> Result<Self> {
        config.validate()?;
        if net.input_dim() != 1 || net.output_dim() != 1 {
            return Err(RatsError::ShapeMismatch("regression net must map 1 -> 1".into()));
        }
        let outer = AdamState::new(&net, config.outer_lr);
        Ok(Self { net, config, outer })
    }

    /// Full-batch gradient steps on the support MSE, starting from the
    /// meta-parameters, which are left untouched.
    pub fn adapt(&self, support: &[(f64, f64)], steps: usize) -> Result<DenseNet> {
        if support.is_empty() {
            return Err(RatsError::EmptyBatch);
        }
        let mut net = self.net.clone();
        for _ in 0..steps {
            let (_, g) = mse_grad(&net, support)?;
            sgd(&mut net, &g, self.config.inner_lr);
        }
        Ok(net)
    }

    /// Query MSE after adapting on freshly drawn support shots.
    pub fn adaptation_risk<R: Rng + ?Sized>(&self, task: &SinusoidTask, rng: &mut R) -> Result<f64> {
        let support = sample_shots(task, self.config.k_support, rng)?;
        let query = sample_shots(task, self.config.n_query, rng)?;
        mse(&self.adapt(&support, self.config.inner_steps)?, &query)
    }

    /// First-order MAML: the query-loss gradient evaluated at the adapted
    /// parameters, standing in for the gradient with respect to the
    /// meta-parameters.
    pub fn task_gradient(&self, support: &[(f64, f64)], query: &[(f64, f64)]) -> Result<TaskGradient> {
        let adapted = self.adapt(support, self.config.inner_steps)?;
        let (risk, gradient) = mse_grad(&adapted, query)?;
        Ok(TaskGradient { risk, gradient })
    }

    /// Applies the outer Adam step on `sum_i w_i g_i`.
    pub fn apply(&mut self, grads: &[TaskGradient], weights: &[f64]) -> Result<()> {
        if grads.len() != weights.len() {
            return Err(RatsError::DimensionMismatch {
                expected: grads.len(),
                got: weights.len(),
            });
        }
        if grads.is_empty() {
            return Err(RatsError::EmptyBatch);
        }
        let mut total = Gradient::zeros_like(&self.net);
        for (g, &w) in grads.iter().zip(weights) {
            if w != 0.0 {
                total.add_scaled(&g.gradient, w)?;
            }
        }
        self.outer.step(&mut self.net, &total)?;
        if !self.net.is_finite() {
            return Err(RatsError::NonFinite("meta-parameters after outer step".into()));
        }
        Ok(())
    }

    /// One outer update on a weighted task batch. Each task gets its own
    /// stream seeded from `rng`. Returns the per-task risks.
    pub fn meta_step<R: Rng + ?Sized>(
        &mut self,
        tasks: &[SinusoidTask],
        weights: &[f64],
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let grads = self.task_gradients(tasks, rng)?;
        self.apply(&grads, weights)?;
        Ok(grads.iter().map(|g| g.risk).collect())
    }

    fn task_gradients<R: Rng + ?Sized>(&self, tasks: &[SinusoidTask], rng: &mut R) -> Result<Vec<TaskGradient>> {
        let seeds: Vec<u64> = tasks.iter().map(|_| rng.next_u64()).collect();
        tasks
            .par_iter()
            .zip(&seeds)
            .map(|(task, &s)| {
                let mut r = ChaCha8Rng::seed_from_u64(s);
                let support = sample_shots(task, self.config.k_support, &mut r)?;
                let query = sample_shots(task, self.config.n_query, &mut r)?;
                self.task_gradient(&support, &query)
            })
            .collect()
    }

    /// Adaptation risks for fixed shot sets, in parallel.
    pub fn evaluate(&self, tasks: &[SinusoidTask], shots: &[(Shots, Shots)]) -> Result<Vec<f64>> {
        tasks
            .par_iter()
            .zip(shots)
            .map(|(_, (support, query))| mse(&self.adapt(support, self.config.inner_steps)?, query))
            .collect()
    }
}

/// Fixed evaluation set: tasks plus their support and query shots.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub tasks: Vec<SinusoidTask>,
    pub shots: Vec<(Shots, Shots)>,
}

impl EvalSet {
    /// Identical for every caller with the same `seed` and `label`.
    pub fn new(seed: u64, label: &str, count: usize, config: &MamlConfig) -> Result<Self> {
        let space = TaskSpace::sinusoid();
        let mut rng = seed::stream(seed, label, 0);
        let tasks = space
            .sample_uniform(count, &mut rng)
            .iter()
            .map(SinusoidTask::from_id)
            .collect::<Result<Vec<_>>>()?;
        let shots = tasks
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut r = seed::stream(seed, &format!("{label}-shots"), i as u64);
                Ok((
                    sample_shots(t, config.k_support, &mut r)?,
                    sample_shots(t, config.n_query, &mut r)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { tasks, shots })
    }

    pub fn risks(&self, learner: &MamlLearner) -> Result<Vec<f64>> {
        learner.evaluate(&self.tasks, &self.shots)
    }
}

/// The benchmark seen by the round driver.
#[derive(Debug, Clone)]
pub struct SinusoidBench {
    space: TaskSpace,
    pub learner: MamlLearner,
}

impl SinusoidBench {
    pub fn new(learner: MamlLearner) -> Self {
        Self {
            space: TaskSpace::sinusoid(),
            learner,
        }
    }
}

fn to_tasks(ids: &[TaskId]) -> Result<Vec<SinusoidTask>> {
    ids.iter().map(SinusoidTask::from_id).collect()
}

impl Benchmark for SinusoidBench {
    fn space(&self) -> &TaskSpace {
        &self.space
    }

    fn oracle(&mut self, tasks: &[TaskId], rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let tasks = to_tasks(tasks)?;
        let seeds: Vec<u64> = tasks.iter().map(|_| rng.next_u64()).collect();
        let learner = &self.learner;
        tasks
            .par_iter()
            .zip(&seeds)
            .map(|(t, &s)| learner.adaptation_risk(t, &mut ChaCha8Rng::seed_from_u64(s)))
            .collect()
    }

    fn train(
        &mut self,
        tasks: &[TaskId],
        weigh: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
        rng: &mut dyn RngCore,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let tasks = to_tasks(tasks)?;
        let grads = self.learner.task_gradients(&tasks, rng)?;
        let risks: Vec<f64> = grads.iter().map(|g| g.risk).collect();
        let weights = weigh(&risks)?;
        self.learner.apply(&grads, &weights)?;
        Ok((risks, weights))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinusoidConfig {
    pub acquisition: AcquisitionConfig,
    #[serde(default)]
    pub maml: MamlConfig,
    #[serde(default)]
    pub risk_model: RiskModelConfig,
    pub iterations: usize,
    /// Validate every this many iterations (and always after the last).
    pub validate_every: usize,
    pub validation_tasks: usize,
    pub test_tasks: usize,
    pub seed: u64,
    /// Shared by every strategy so all runs see the same validation and test tasks.
    pub validation_seed: u64,
}

impl SinusoidConfig {
    /// `B = 16`; PDTS scores 512 candidates, other strategies use their
    /// default pool size.
    pub fn new(strategy: Strategy, seed: u64) -> Self {
        let mut acquisition = AcquisitionConfig::new(strategy, 16);
        if strategy == Strategy::Pdts {
            acquisition.pseudo_batch = 512;
        }
        Self {
            acquisition,
            maml: MamlConfig::default(),
            risk_model: RiskModelConfig::default(),
            iterations: 2000,
            validate_every: 100,
            validation_tasks: 1000,
            test_tasks: 1000,
            seed,
            validation_seed: 12345,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.acquisition.validate()?;
        self.maml.validate()?;
        self.risk_model.validate()?;
        if self.iterations == 0 {
            return Err(RatsError::config("iterations", "must be at least 1"));
        }
        if self.validate_every == 0 {
            return Err(RatsError::config("validate_every", "must be at least 1"));
        }
        if self.validation_tasks == 0 || self.test_tasks == 0 {
            return Err(RatsError::config("validation_tasks", "evaluation sets must be non-empty"));
        }
        Ok(())
    }
}

/// One validation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRow {
    pub iter: usize,
    pub strategy: Strategy,
    pub mean_mse: f64,
    pub cvar90: f64,
    pub cvar70: f64,
    pub cvar50: f64,
    /// Tasks trained on at this iteration.
    pub selected_tasks: Vec<TaskId>,
}

/// Meta-test CVaR at one level; `alpha = 0` is the mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestRow {
    pub alpha: f64,
    pub cvar_mse: f64,
}

pub const TEST_ALPHAS: [f64; 4] = [0.9, 0.7, 0.5, 0.0];

#[derive(Debug, Clone)]
pub struct SinusoidReport {
    pub validation: Vec<ValidationRow>,
    pub test: Vec<TestRow>,
    pub iterations: Vec<IterationLog>,
}

pub fn cvar_table(risks: &[f64]) -> Result<Vec<TestRow>> {
    let sample = RiskSample::new(risks.to_vec())?;
    TEST_ALPHAS
        .iter()
        .map(|&alpha| {
            Ok(TestRow {
                alpha,
                cvar_mse: metrics::cvar_tail_mean(&sample, alpha)?,
            })
        })
        .collect()
}

pub fn run_sinusoid_experiment(config: &SinusoidConfig) -> Result<SinusoidReport> {
    run_sinusoid_with(config, |_, _| Ok(()))
}

/// As [`run_sinusoid_experiment`], calling `on_round` after every round.
pub fn run_sinusoid_with<F>(config: &SinusoidConfig, mut on_round: F) -> Result<SinusoidReport>
where
    F: FnMut(&IterationLog, &RoundDriver<SinusoidBench>) -> Result<()>,
{
    config.validate()?;
    let learner = MamlLearner::new(config.maml, &mut seed::stream(config.seed, "learner-init", 0))?;
    let mut driver = RoundDriver::new(
        SinusoidBench::new(learner),
        config.acquisition,
        config.risk_model,
        config.seed,
    )?;
    let validation = EvalSet::new(config.validation_seed, "validation", config.validation_tasks, &config.maml)?;
    let space = TaskSpace::sinusoid();
    let strategy = config.acquisition.strategy;
    let mut rows = Vec::new();
    let mut logs = Vec::with_capacity(config.iterations);

    for it in 1..=config.iterations {
        let record = driver.step()?;
        let log = IterationLog::from_record(&record, &space, config.seed, strategy, None)?;
        on_round(&log, &driver)?;
        if it % config.validate_every == 0 || it == config.iterations {
            let risks = validation.risks(&driver.bench.learner)?;
            let s = metrics::CvarSummary::of(&risks)?;
            rows.push(ValidationRow {
                iter: it,
                strategy,
                mean_mse: s.mean,
                cvar90: s.cvar90,
                cvar70: s.cvar70,
                cvar50: s.cvar50,
                selected_tasks: record.selection.tasks.clone(),
            });
        }
        logs.push(log);
    }

    let test = EvalSet::new(config.validation_seed, "test", config.test_tasks, &config.maml)?;
    Ok(SinusoidReport {
        validation: rows,
        test: cvar_table(&test.risks(&driver.bench.learner)?)?,
        iterations: logs,
    })
}

pub fn write_validation_jsonl(rows: &[ValidationRow], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_test_table(rows: &[TestRow], strategy: Strategy, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["strategy", "alpha", "cvar_mse"])?;
    for r in rows {
        w.write_record([strategy.as_str().to_string(), r.alpha.to_string(), r.cvar_mse.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn shots_follow_the_wave() {
        let t = SinusoidTask::new(0.1, 2.0).unwrap();
        let shots = sample_shots(&t, 500, &mut rng(1)).unwrap();
        assert!(shots.iter().all(|&(x, y)| (-5.0..=5.0).contains(&x) && y.abs() <= 0.1));
        let t0 = SinusoidTask::new(3.0, 0.0).unwrap();
        assert_eq!(t0.eval(0.0), 0.0);
        for (x, y) in sample_shots(&t0, 50, &mut rng(2)).unwrap() {
            assert!((y - 3.0 * x.sin()).abs() < 1e-12);
        }
        assert!(sample_shots(&t, 0, &mut rng(0)).is_err());
        assert!(SinusoidTask::new(6.0, 0.0).is_err());
    }

    #[test]
    fn adapt_leaves_meta_parameters_alone() {
        let learner = MamlLearner::new(MamlConfig::default(), &mut rng(3)).unwrap();
        let before = learner.net.params_flat();
        let t = SinusoidTask::new(2.0, 1.0).unwrap();
        let support = sample_shots(&t, 10, &mut rng(4)).unwrap();
        let adapted = learner.adapt(&support, 3).unwrap();
        assert_eq!(learner.net.params_flat(), before);
        assert_ne!(adapted.params_flat(), before);
        assert!(learner.adapt(&[], 1).is_err());
    }

    #[test]
    fn zero_inner_lr_is_identity() {
        let cfg = MamlConfig {
            inner_lr: 0.0,
            ..MamlConfig::default()
        };
        let learner = MamlLearner::new(cfg, &mut rng(5)).unwrap();
        let support = sample_shots(&SinusoidTask::new(1.0, 0.5).unwrap(), 10, &mut rng(6)).unwrap();
        assert_eq!(learner.adapt(&support, 5).unwrap().params_flat(), learner.net.params_flat());
    }

    #[test]
    fn zero_weight_tasks_contribute_nothing() {
        let mut a = MamlLearner::new(MamlConfig::default(), &mut rng(7)).unwrap();
        let mut b = a.clone();
        let t1 = SinusoidTask::new(1.0, 0.5).unwrap();
        let t2 = SinusoidTask::new(4.0, 2.5).unwrap();
        a.meta_step(&[t1, t2], &[1.0, 0.0], &mut rng(8)).unwrap();
        // Same stream: the first task sees the same shots in both runs.
        b.meta_step(&[t1], &[1.0], &mut rng(8)).unwrap();
        assert_eq!(a.net.params_flat(), b.net.params_flat());
    }

    #[test]
    fn eval_set_is_shared() {
        let cfg = MamlConfig::default();
        let a = EvalSet::new(9, "validation", 20, &cfg).unwrap();
        let b = EvalSet::new(9, "validation", 20, &cfg).unwrap();
        assert_eq!(a.tasks, b.tasks);
        assert_eq!(a.shots, b.shots);
        assert_ne!(a.tasks, EvalSet::new(9, "test", 20, &cfg).unwrap().tasks);
    }

    #[test]
    fn cvar_table_rows() {
        let rows = cvar_table(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0]).unwrap();
        let got: Vec<(f64, f64)> = rows.iter().map(|r| (r.alpha, r.cvar_mse)).collect();
        assert_eq!(got, vec![(0.9, 10.0), (0.7, 9.0), (0.5, 8.0), (0.0, 5.5)]);
    }
}
