//! Latent-variable risk predictive model.
//!
//! An encoder embeds each `(task, risk)` record of the latest history batch,
//! mean-pools the embeddings and maps the pooled vector to a diagonal
//! Gaussian over the latent `z`. The decoder maps `(task, z)` to a Gaussian
//! over the risk. Training maximizes a single-sample reparameterized ELBO
//! whose KL term is taken against the posterior frozen at the end of the
//! previous round, so older batches reach the model only through that prior.
//!
//! Tasks enter the networks in normalized `[0, 1]` coordinates and risks are
//! standardized with running statistics over all history; predictions are
//! returned in raw risk units.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{RatsError, Result};
use crate::nnet::{Activation, AdamState, DenseNet, Gradient, ParamSnapshot, Trace};
use crate::task_space::{TaskId, TaskSpace};

/// Added to every softplus standard-deviation output of the decoder.
pub const LIKELIHOOD_STD_FLOOR: f64 = 1e-3;
/// Added to every softplus standard-deviation output of the encoder.
pub const LATENT_STD_FLOOR: f64 = 1e-4;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskRecord {
    pub task: TaskId,
    pub risk: f64,
}

/// One round's evaluated tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryBatch {
    records: Vec<RiskRecord>,
    round: usize,
}

impl HistoryBatch {
    pub fn new(space: &TaskSpace, records: Vec<RiskRecord>, round: usize) -> Result<Self> {
        if records.is_empty() {
            return Err(RatsError::EmptyBatch);
        }
        for r in &records {
            space.check(&r.task)?;
            if !r.risk.is_finite() {
                return Err(RatsError::NonFinite(format!("risk label {}", r.risk)));
            }
        }
        Ok(Self { records, round })
    }

    pub fn from_pairs(
        space: &TaskSpace,
        tasks: &[TaskId],
        risks: &[f64],
        round: usize,
    ) -> Result<Self> {
        if tasks.len() != risks.len() {
            return Err(RatsError::DimensionMismatch {
                expected: tasks.len(),
                got: risks.len(),
            });
        }
        let records = tasks
            .iter()
            .zip(risks)
            .map(|(t, &r)| RiskRecord {
                task: t.clone(),
                risk: r,
            })
            .collect();
        Self::new(space, records, round)
    }

    pub fn records(&self) -> &[RiskRecord] {
        &self.records
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Diagonal Gaussian over the latent variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentPosterior {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentPosterior {
    pub fn standard_normal(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(RatsError::DimensionMismatch {
                expected: mean.len(),
                got: std.len(),
            });
        }
        if std.iter().any(|&s| !(s > 0.0 && s.is_finite())) || mean.iter().any(|m| !m.is_finite()) {
            return Err(RatsError::NonFinite("latent posterior parameters".into()));
        }
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `KL[self || prior]` for diagonal Gaussians.
    pub fn kl_divergence(&self, prior: &LatentPosterior) -> f64 {
        self.mean
            .iter()
            .zip(&self.std)
            .zip(prior.mean.iter().zip(&prior.std))
            .map(|((&mq, &sq), (&mp, &sp))| {
                let dm = mq - mp;
                (sp / sq).ln() + (sq * sq + dm * dm) / (2.0 * sp * sp) - 0.5
            })
            .sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let eps: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        self.reparameterize(&eps)
    }

    pub fn reparameterize(&self, eps: &[f64]) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.std)
            .zip(eps)
            .map(|((m, s), e)| m + s * e)
            .collect()
    }
}

/// Running mean and standard deviation of all risk labels seen so far.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelNormalizer {
    count: u64,
    mean: f64,
    m2: f64,
}

impl Default for LabelNormalizer {
    fn default() -> Self {
        Self {
            count: 0,
            mean: 0.0,
            m2: 0.0,
        }
    }
}

impl LabelNormalizer {
    pub fn update(&mut self, values: impl IntoIterator<Item = f64>) {
        for x in values {
            self.count += 1;
            let delta = x - self.mean;
            self.mean += delta / self.count as f64;
            self.m2 += delta * (x - self.mean);
        }
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Population standard deviation; 1 until it is meaningfully positive.
    pub fn std(&self) -> f64 {
        if self.count < 2 {
            return 1.0;
        }
        let s = (self.m2 / self.count as f64).sqrt();
        if s > 1e-12 {
            s
        } else {
            1.0
        }
    }

    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.mean) / self.std()
    }

    pub fn denormalize(&self, y: f64) -> f64 {
        y * self.std() + self.mean
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RiskModelConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    /// Hidden layers of the per-record embedding network.
    pub embed_layers: usize,
    /// KL weight.
    pub beta: f64,
    /// Adam steps per round.
    pub fit_steps: usize,
    pub lr: f64,
    pub mc_passes: usize,
}

impl Default for RiskModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 10,
            hidden: 10,
            embed_layers: 4,
            beta: 1.0,
            fit_steps: 20,
            lr: 5e-4,
            mc_passes: 10,
        }
    }
}

impl RiskModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_dim", self.latent_dim),
            ("hidden", self.hidden),
            ("embed_layers", self.embed_layers),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(RatsError::config(format!("risk_model.{field}"), "must be positive"));
            }
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(RatsError::config("risk_model.beta", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(RatsError::config("risk_model.lr", "must be positive"));
        }
        if self.mc_passes < 2 {
            return Err(RatsError::config("risk_model.mc_passes", "must be at least 2"));
        }
        Ok(())
    }
}

/// Gradient of the ELBO with respect to every sub-network.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskGradient {
    pub embed: Gradient,
    pub latent_mean: Gradient,
    pub latent_std: Gradient,
    pub trunk: Gradient,
    pub risk_mean: Gradient,
    pub risk_std: Gradient,
}

impl RiskGradient {
    fn zeros_like(m: &RiskModel) -> Self {
        Self {
            embed: Gradient::zeros_like(&m.embed),
            latent_mean: Gradient::zeros_like(&m.latent_mean),
            latent_std: Gradient::zeros_like(&m.latent_std),
            trunk: Gradient::zeros_like(&m.trunk),
            risk_mean: Gradient::zeros_like(&m.risk_mean),
            risk_std: Gradient::zeros_like(&m.risk_std),
        }
    }

    fn parts(&self) -> [&Gradient; 6] {
        [
            &self.embed,
            &self.latent_mean,
            &self.latent_std,
            &self.trunk,
            &self.risk_mean,
            &self.risk_std,
        ]
    }

    fn parts_mut(&mut self) -> [&mut Gradient; 6] {
        [
            &mut self.embed,
            &mut self.latent_mean,
            &mut self.latent_std,
            &mut self.trunk,
            &mut self.risk_mean,
            &mut self.risk_std,
        ]
    }

    /// Flattened in the same order as [`RiskModel::params_flat`].
    pub fn flat(&self) -> Vec<f64> {
        self.parts().iter().flat_map(|g| g.flat()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.parts().iter().all(|g| g.is_finite())
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.parts_mut() {
            g.scale(factor);
        }
    }
}

/// ELBO value split into its terms, with the gradient of `objective`.
#[derive(Debug, Clone)]
pub struct ElboEstimate {
    /// `reconstruction - beta * kl`.
    pub objective: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub gradient: RiskGradient,
}

/// Predicted risk for one candidate, in raw units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub mean: f64,
    pub std: f64,
    /// The first Monte Carlo pass's draw.
    pub draw: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Negative ELBO before the first step.
    pub initial_loss: f64,
    /// Negative ELBO at the last step.
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Optimizers {
    embed: AdamState,
    latent_mean: AdamState,
    latent_std: AdamState,
    trunk: AdamState,
    risk_mean: AdamState,
    risk_std: AdamState,
}

impl Optimizers {
    fn new(m: &RiskModel, lr: f64) -> Self {
        Self {
            embed: AdamState::new(&m.embed, lr),
            latent_mean: AdamState::new(&m.latent_mean, lr),
            latent_std: AdamState::new(&m.latent_std, lr),
            trunk: AdamState::new(&m.trunk, lr),
            risk_mean: AdamState::new(&m.risk_mean, lr),
            risk_std: AdamState::new(&m.risk_std, lr),
        }
    }

    fn set_lr(&mut self, lr: f64) {
        for s in [
            &mut self.embed,
            &mut self.latent_mean,
            &mut self.latent_std,
            &mut self.trunk,
            &mut self.risk_mean,
            &mut self.risk_std,
        ] {
            s.lr = lr;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskModel {
    space: TaskSpace,
    /// `(task, risk)` record to embedding.
    pub embed: DenseNet,
    /// Pooled embedding to latent mean.
    pub latent_mean: DenseNet,
    /// Pooled embedding to latent std (softplus).
    pub latent_std: DenseNet,
    /// `(task, z)` to decoder features.
    pub trunk: DenseNet,
    /// Decoder features to predictive risk mean.
    pub risk_mean: DenseNet,
    /// Decoder features to predictive risk std (softplus).
    pub risk_std: DenseNet,
    beta: f64,
    prior: LatentPosterior,
    normalizer: LabelNormalizer,
    optim: Option<Optimizers>,
}

struct DecodePass {
    trunk: Trace,
    mean: Trace,
    std: Trace,
}

impl DecodePass {
    fn mean(&self) -> f64 {
        self.mean.output()[0]
    }

    fn std(&self) -> f64 {
        self.std.output()[0] + LIKELIHOOD_STD_FLOOR
    }
}

impl RiskModel {
    pub fn new<R: Rng + ?Sized>(space: TaskSpace, config: &RiskModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = space.dim();
        let h = config.hidden;
        let l = config.latent_dim;
        let mut embed_sizes = vec![d + 1];
        embed_sizes.extend(std::iter::repeat_n(h, config.embed_layers + 1));
        Ok(Self {
            embed: DenseNet::glorot(&embed_sizes, Activation::Relu, Activation::Identity, rng),
            latent_mean: DenseNet::glorot(&[h, l], Activation::Identity, Activation::Identity, rng),
            latent_std: DenseNet::glorot(&[h, l], Activation::Identity, Activation::Softplus, rng),
            trunk: DenseNet::glorot(&[d + l, h, h], Activation::Relu, Activation::Relu, rng),
            risk_mean: DenseNet::glorot(&[h, 1], Activation::Identity, Activation::Identity, rng),
            risk_std: DenseNet::glorot(&[h, 1], Activation::Identity, Activation::Softplus, rng),
            beta: config.beta,
            prior: LatentPosterior::standard_normal(l),
            normalizer: LabelNormalizer::default(),
            optim: None,
            space,
        })
    }

    /// Assembles a model from explicit networks; the shapes must chain.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        space: TaskSpace,
        embed: DenseNet,
        latent_mean: DenseNet,
        latent_std: DenseNet,
        trunk: DenseNet,
        risk_mean: DenseNet,
        risk_std: DenseNet,
        beta: f64,
    ) -> Result<Self> {
        let d = space.dim();
        let l = latent_mean.output_dim();
        let h_enc = embed.output_dim();
        let h_dec = trunk.output_dim();
        let ok = embed.input_dim() == d + 1
            && latent_mean.input_dim() == h_enc
            && latent_std.input_dim() == h_enc
            && latent_std.output_dim() == l
            && trunk.input_dim() == d + l
            && risk_mean.input_dim() == h_dec
            && risk_std.input_dim() == h_dec
            && risk_mean.output_dim() == 1
            && risk_std.output_dim() == 1;
        if !ok {
            return Err(RatsError::ShapeMismatch("risk model networks do not chain".into()));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(RatsError::InvalidArgument("beta must be positive".into()));
        }
        Ok(Self {
            space,
            embed,
            latent_mean,
            latent_std,
            trunk,
            risk_mean,
            risk_std,
            beta,
            prior: LatentPosterior::standard_normal(l),
            normalizer: LabelNormalizer::default(),
            optim: None,
        })
    }

    pub fn space(&self) -> &TaskSpace {
        &self.space
    }

    pub fn latent_dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// The posterior frozen at the end of the last round; standard normal before any fit.
    pub fn prior(&self) -> &LatentPosterior {
        &self.prior
    }

    pub fn set_prior(&mut self, prior: LatentPosterior) -> Result<()> {
        if prior.dim() != self.latent_dim() {
            return Err(RatsError::DimensionMismatch {
                expected: self.latent_dim(),
                got: prior.dim(),
            });
        }
        self.prior = prior;
        Ok(())
    }

    pub fn normalizer(&self) -> &LabelNormalizer {
        &self.normalizer
    }

    pub fn normalizer_mut(&mut self) -> &mut LabelNormalizer {
        &mut self.normalizer
    }

    fn nets(&self) -> [&DenseNet; 6] {
        [
            &self.embed,
            &self.latent_mean,
            &self.latent_std,
            &self.trunk,
            &self.risk_mean,
            &self.risk_std,
        ]
    }

    fn nets_mut(&mut self) -> [&mut DenseNet; 6] {
        [
            &mut self.embed,
            &mut self.latent_mean,
            &mut self.latent_std,
            &mut self.trunk,
            &mut self.risk_mean,
            &mut self.risk_std,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.nets().iter().map(|n| n.num_params()).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.nets().iter().flat_map(|n| n.params_flat()).collect()
    }

    pub fn set_params_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(RatsError::DimensionMismatch {
                expected: self.num_params(),
                got: values.len(),
            });
        }
        let mut offset = 0;
        for net in self.nets_mut() {
            let n = net.num_params();
            net.set_params_flat(&values[offset..offset + n])?;
            offset += n;
        }
        Ok(())
    }

    fn record_input(&self, record: &RiskRecord) -> Vec<f64> {
        let mut x = self.space.normalize_unchecked(&record.task);
        x.push(self.normalizer.normalize(record.risk));
        x
    }

    fn embed_batch(&self, batch: &HistoryBatch) -> Result<(Vec<Trace>, Vec<f64>)> {
        if batch.is_empty() {
            return Err(RatsError::EmptyBatch);
        }
        let traces = batch
            .records()
            .iter()
            .map(|r| self.embed.forward_trace(&self.record_input(r)))
            .collect::<Result<Vec<_>>>()?;
        // Pool in a canonical order so the sum is bitwise permutation-invariant.
        let mut outs: Vec<&[f64]> = traces.iter().map(|t| t.output()).collect();
        outs.sort_by(|a, b| {
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let n = outs.len() as f64;
        let mut pooled = vec![0.0; self.embed.output_dim()];
        for o in outs {
            for (p, v) in pooled.iter_mut().zip(o) {
                *p += v;
            }
        }
        pooled.iter_mut().for_each(|p| *p /= n);
        Ok((traces, pooled))
    }

    /// `q(z | batch)`: embed every record, mean-pool, map to `(mean, std)`.
    pub fn encode(&self, batch: &HistoryBatch) -> Result<LatentPosterior> {
        let (_, pooled) = self.embed_batch(batch)?;
        let mean = self.latent_mean.forward(&pooled)?;
        let std = self
            .latent_std
            .forward(&pooled)?
            .into_iter()
            .map(|s| s + LATENT_STD_FLOOR)
            .collect();
        LatentPosterior::new(mean, std)
    }

    fn decode_pass(&self, unit_task: &[f64], z: &[f64]) -> Result<DecodePass> {
        let mut x = unit_task.to_vec();
        x.extend_from_slice(z);
        let trunk = self.trunk.forward_trace(&x)?;
        let mean = self.risk_mean.forward_trace(trunk.output())?;
        let std = self.risk_std.forward_trace(trunk.output())?;
        Ok(DecodePass { trunk, mean, std })
    }

    fn decode_normalized(&self, unit_task: &[f64], z: &[f64]) -> Result<(f64, f64)> {
        let mut x = unit_task.to_vec();
        x.extend_from_slice(z);
        let h = self.trunk.forward(&x)?;
        let m = self.risk_mean.forward(&h)?[0];
        let s = self.risk_std.forward(&h)?[0] + LIKELIHOOD_STD_FLOOR;
        Ok((m, s))
    }

    /// Predictive `(mean, std)` of the risk at `task` for a fixed latent, in raw units.
    pub fn decode(&self, task: &TaskId, z: &[f64]) -> Result<(f64, f64)> {
        if z.len() != self.latent_dim() {
            return Err(RatsError::DimensionMismatch {
                expected: self.latent_dim(),
                got: z.len(),
            });
        }
        let unit = self.space.normalize(task)?;
        let (m, s) = self.decode_normalized(&unit, z)?;
        Ok((self.normalizer.denormalize(m), s * self.normalizer.std()))
    }

    /// Reparameterized single-sample ELBO with latent noise `eps`, and its
    /// exact gradient with respect to every parameter.
    pub fn elbo_with_noise(&self, batch: &HistoryBatch, eps: &[f64]) -> Result<ElboEstimate> {
        let l = self.latent_dim();
        if eps.len() != l {
            return Err(RatsError::DimensionMismatch { expected: l, got: eps.len() });
        }
        let d = self.space.dim();
        let mut grad = RiskGradient::zeros_like(self);

        let (embed_traces, pooled) = self.embed_batch(batch)?;
        let mean_trace = self.latent_mean.forward_trace(&pooled)?;
        let std_trace = self.latent_std.forward_trace(&pooled)?;
        let q = LatentPosterior::new(
            mean_trace.output().to_vec(),
            std_trace.output().iter().map(|s| s + LATENT_STD_FLOOR).collect(),
        )?;
        let z = q.reparameterize(eps);

        let mut reconstruction = 0.0;
        let mut dz = vec![0.0; l];
        for record in batch.records() {
            let unit = self.space.normalize_unchecked(&record.task);
            let y = self.normalizer.normalize(record.risk);
            let pass = self.decode_pass(&unit, &z)?;
            let (m, s) = (pass.mean(), pass.std());
            let r = y - m;
            reconstruction += -0.5 * LN_2PI - s.ln() - r * r / (2.0 * s * s);
            let dm = r / (s * s);
            let ds = -1.0 / s + r * r / (s * s * s);
            let mut dh = self
                .risk_mean
                .accumulate_backward(&pass.mean, &[dm], &mut grad.risk_mean)?;
            let dh_std = self
                .risk_std
                .accumulate_backward(&pass.std, &[ds], &mut grad.risk_std)?;
            dh.iter_mut().zip(&dh_std).for_each(|(a, b)| *a += b);
            let dx = self.trunk.accumulate_backward(&pass.trunk, &dh, &mut grad.trunk)?;
            dz.iter_mut().zip(&dx[d..]).for_each(|(a, b)| *a += b);
        }

        let kl = q.kl_divergence(&self.prior);
        let mut d_mean = vec![0.0; l];
        let mut d_std = vec![0.0; l];
        for k in 0..l {
            let (mq, sq) = (q.mean[k], q.std[k]);
            let (mp, sp) = (self.prior.mean[k], self.prior.std[k]);
            let dkl_dm = (mq - mp) / (sp * sp);
            let dkl_ds = -1.0 / sq + sq / (sp * sp);
            d_mean[k] = dz[k] - self.beta * dkl_dm;
            d_std[k] = dz[k] * eps[k] - self.beta * dkl_ds;
        }
        let mut d_pooled = self
            .latent_mean
            .accumulate_backward(&mean_trace, &d_mean, &mut grad.latent_mean)?;
        let d_pooled_std = self
            .latent_std
            .accumulate_backward(&std_trace, &d_std, &mut grad.latent_std)?;
        let n = batch.len() as f64;
        d_pooled
            .iter_mut()
            .zip(&d_pooled_std)
            .for_each(|(a, b)| *a = (*a + b) / n);
        for trace in &embed_traces {
            self.embed.accumulate_backward(trace, &d_pooled, &mut grad.embed)?;
        }

        let objective = reconstruction - self.beta * kl;
        if !objective.is_finite() || !grad.is_finite() {
            return Err(RatsError::NonFinite(format!(
                "ELBO at round {}: reconstruction {reconstruction}, kl {kl}",
                batch.round()
            )));
        }
        Ok(ElboEstimate {
            objective,
            reconstruction,
            kl,
            gradient: grad,
        })
    }

    pub fn elbo<R: Rng + ?Sized>(&self, batch: &HistoryBatch, rng: &mut R) -> Result<ElboEstimate> {
        let eps: Vec<f64> = (0..self.latent_dim()).map(|_| rng.sample(StandardNormal)).collect();
        self.elbo_with_noise(batch, &eps)
    }

    /// One round of streaming variational training: fold the batch's labels
    /// into the normalizer, take `steps` Adam steps on the negative ELBO, then
    /// freeze `encode(batch)` as the prior for the next round.
    pub fn fit_round<R: Rng + ?Sized>(
        &mut self,
        batch: &HistoryBatch,
        steps: usize,
        lr: f64,
        rng: &mut R,
    ) -> Result<FitReport> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(RatsError::InvalidArgument(format!("learning rate {lr}")));
        }
        self.normalizer.update(batch.records().iter().map(|r| r.risk));
        let mut optim = match self.optim.take() {
            Some(o) => o,
            None => Optimizers::new(self, lr),
        };
        optim.set_lr(lr);
        let mut report = FitReport {
            initial_loss: f64::NAN,
            final_loss: f64::NAN,
        };
        for step in 0..steps {
            let est = match self.elbo(batch, rng) {
                Ok(e) => e,
                Err(e) => {
                    self.optim = Some(optim);
                    return Err(e);
                }
            };
            if step == 0 {
                report.initial_loss = -est.objective;
            }
            report.final_loss = -est.objective;
            let mut g = est.gradient;
            g.scale(-1.0);
            optim.embed.step(&mut self.embed, &g.embed)?;
            optim.latent_mean.step(&mut self.latent_mean, &g.latent_mean)?;
            optim.latent_std.step(&mut self.latent_std, &g.latent_std)?;
            optim.trunk.step(&mut self.trunk, &g.trunk)?;
            optim.risk_mean.step(&mut self.risk_mean, &g.risk_mean)?;
            optim.risk_std.step(&mut self.risk_std, &g.risk_std)?;
        }
        self.optim = Some(optim);
        self.prior = self.encode(batch)?;
        Ok(report)
    }

    /// Multi-pass Monte Carlo prediction: `passes` latent draws from the
    /// current posterior, one likelihood draw per candidate and pass.
    pub fn predict_mc<R: Rng + ?Sized>(
        &self,
        candidates: &[TaskId],
        passes: usize,
        rng: &mut R,
    ) -> Result<Vec<RiskEstimate>> {
        if passes < 2 {
            return Err(RatsError::InvalidArgument(format!(
                "need at least 2 passes for a std, got {passes}"
            )));
        }
        let units = candidates
            .iter()
            .map(|c| self.space.normalize(c))
            .collect::<Result<Vec<_>>>()?;
        let n = candidates.len();
        let mut sum = vec![0.0; n];
        let mut sum_sq = vec![0.0; n];
        let mut first = vec![0.0; n];
        for pass in 0..passes {
            let z = self.prior.sample(rng);
            for (i, unit) in units.iter().enumerate() {
                let (m, s) = self.decode_normalized(unit, &z)?;
                let xi: f64 = rng.sample(StandardNormal);
                let draw = m + s * xi;
                if pass == 0 {
                    first[i] = draw;
                }
                sum[i] += draw;
                sum_sq[i] += draw * draw;
            }
        }
        let p = passes as f64;
        let scale = self.normalizer.std();
        Ok((0..n)
            .map(|i| {
                let mean = sum[i] / p;
                let var = ((sum_sq[i] - p * mean * mean) / (p - 1.0)).max(0.0);
                RiskEstimate {
                    mean: self.normalizer.denormalize(mean),
                    std: var.sqrt() * scale,
                    draw: self.normalizer.denormalize(first[i]),
                }
            })
            .collect())
    }

    /// Posterior sampling with explicit noise: `z = mean + std * latent_noise`
    /// shared by every candidate, then `mean_i + std_i * likelihood_noise[i]`.
    pub fn posterior_sample_with_noise(
        &self,
        candidates: &[TaskId],
        latent_noise: &[f64],
        likelihood_noise: &[f64],
    ) -> Result<Vec<f64>> {
        if latent_noise.len() != self.latent_dim() {
            return Err(RatsError::DimensionMismatch {
                expected: self.latent_dim(),
                got: latent_noise.len(),
            });
        }
        if likelihood_noise.len() != candidates.len() {
            return Err(RatsError::DimensionMismatch {
                expected: candidates.len(),
                got: likelihood_noise.len(),
            });
        }
        let z = self.prior.reparameterize(latent_noise);
        candidates
            .iter()
            .zip(likelihood_noise)
            .map(|(c, &xi)| {
                let unit = self.space.normalize(c)?;
                let (m, s) = self.decode_normalized(&unit, &z)?;
                Ok(self.normalizer.denormalize(m + s * xi))
            })
            .collect()
    }

    /// One stochastic forward pass: a single latent draw for the whole
    /// candidate set and one likelihood draw per candidate.
    pub fn predict_posterior_sample<R: Rng + ?Sized>(
        &self,
        candidates: &[TaskId],
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let latent: Vec<f64> = (0..self.latent_dim()).map(|_| rng.sample(StandardNormal)).collect();
        let lik: Vec<f64> = (0..candidates.len()).map(|_| rng.sample(StandardNormal)).collect();
        self.posterior_sample_with_noise(candidates, &latent, &lik)
    }

    pub fn checkpoint(&self) -> RiskModelCheckpoint {
        RiskModelCheckpoint {
            space: self.space.clone(),
            embed: self.embed.snapshot(),
            latent_mean: self.latent_mean.snapshot(),
            latent_std: self.latent_std.snapshot(),
            trunk: self.trunk.snapshot(),
            risk_mean: self.risk_mean.snapshot(),
            risk_std: self.risk_std.snapshot(),
            beta: self.beta,
            prior: self.prior.clone(),
            normalizer: self.normalizer,
        }
    }

    /// Restores parameters, prior and normalizer; optimizer moments start fresh.
    pub fn from_checkpoint(ck: &RiskModelCheckpoint) -> Result<Self> {
        let mut m = Self::from_parts(
            ck.space.clone(),
            DenseNet::from_snapshot(&ck.embed)?,
            DenseNet::from_snapshot(&ck.latent_mean)?,
            DenseNet::from_snapshot(&ck.latent_std)?,
            DenseNet::from_snapshot(&ck.trunk)?,
            DenseNet::from_snapshot(&ck.risk_mean)?,
            DenseNet::from_snapshot(&ck.risk_std)?,
            ck.beta,
        )?;
        m.set_prior(ck.prior.clone())?;
        m.normalizer = ck.normalizer;
        Ok(m)
    }
}

/// Serialized model state: per-network parameter snapshots, normalizer and frozen prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskModelCheckpoint {
    pub space: TaskSpace,
    pub embed: ParamSnapshot,
    pub latent_mean: ParamSnapshot,
    pub latent_std: ParamSnapshot,
    pub trunk: ParamSnapshot,
    pub risk_mean: ParamSnapshot,
    pub risk_std: ParamSnapshot,
    pub beta: f64,
    pub prior: LatentPosterior,
    pub normalizer: LabelNormalizer,
}
