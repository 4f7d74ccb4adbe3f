//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

pub const FD_STEP: f64 = 1e-5;

/// Central finite differences of `f` at `x`, one coordinate at a time.
///
/// ReLU networks are piecewise smooth. When the forward and backward one-sided
/// slopes disagree, the stencil straddles a kink and the step is shrunk
/// (up to twice, by 100x each) until it sits on one smooth piece.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let f0 = f(&probe);
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            let mut step = h;
            let mut slope = 0.0;
            for attempt in 0..3 {
                probe[i] = orig + step;
                let up = f(&probe);
                probe[i] = orig - step;
                let down = f(&probe);
                probe[i] = orig;
                slope = (up - down) / (2.0 * step);
                let fwd = (up - f0) / step;
                let bwd = (f0 - down) / step;
                let smooth = (fwd - bwd).abs() <= 1e-3 * fwd.abs().max(bwd.abs()).max(1.0);
                if smooth || attempt == 2 {
                    break;
                }
                step /= 100.0;
            }
            slope
        })
        .collect()
}

/// Relative error with an absolute floor on the denominator, so coordinates
/// whose true partial is numerically zero are judged on absolute error.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n, floor))
        .fold(0.0, f64::max)
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub mod gradcheck {
    use super::{central_diff, max_rel_err, FD_STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rats::bench_sinusoid::{mse, sample_shots, MamlConfig, MamlLearner, SinusoidTask};
    use rats::nnet::{Activation, DenseNet};
    use rats::risk_model::{HistoryBatch, LatentPosterior, RiskModel, RiskModelConfig};
    use rats::task_space::TaskSpace;

    fn upstream_loss(net: &DenseNet, x: &[f64], g: &[f64]) -> f64 {
        net.forward(x).unwrap().iter().zip(g).map(|(a, b)| a * b).sum()
    }

    /// Worst relative error of parameter and input gradients over
    /// `instances` random networks.
    pub fn dense_net(instances: u64) -> f64 {
        let archs: [(&[usize], Activation, Activation); 4] = [
            (&[3, 7, 5, 2], Activation::Relu, Activation::Identity),
            (&[1, 40, 40, 1], Activation::Relu, Activation::Identity),
            (&[12, 10, 10], Activation::Relu, Activation::Relu),
            (&[10, 4], Activation::Identity, Activation::Softplus),
        ];
        let mut worst: f64 = 0.0;
        for seed in 0..instances {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (sizes, hidden, out) = archs[seed as usize % archs.len()];
            let mut net = DenseNet::glorot(sizes, hidden, out, &mut rng);
            for l in net.layers_mut() {
                for b in l.biases_mut() {
                    *b = rng.random_range(-0.5..0.5);
                }
            }
            let x: Vec<f64> = (0..sizes[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g: Vec<f64> = (0..net.output_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let bp = net.backward(&x, &g).unwrap();

            let params = net.params_flat();
            let mut probe = net.clone();
            let numeric = central_diff(
                |p| {
                    probe.set_params_flat(p).unwrap();
                    upstream_loss(&probe, &x, &g)
                },
                &params,
                FD_STEP,
            );
            worst = worst.max(max_rel_err(&bp.params.flat(), &numeric, 1e-6));
            let numeric_x = central_diff(|xi| upstream_loss(&net, xi, &g), &x, FD_STEP);
            worst = worst.max(max_rel_err(&bp.input, &numeric_x, 1e-6));
        }
        worst
    }

    /// Worst relative error of the ELBO gradient at frozen latent noise,
    /// against a random prior.
    pub fn elbo(instances: u64) -> f64 {
        let mut worst: f64 = 0.0;
        for seed in 0..instances {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let space = TaskSpace::unit(1 + (seed as usize % 2)).unwrap();
            let mut model = RiskModel::new(space.clone(), &RiskModelConfig::default(), &mut rng).unwrap();
            let tasks = space.sample_uniform(3 + (seed as usize % 6), &mut rng);
            let risks: Vec<f64> = tasks.iter().map(|_| rng.random_range(-2.0..3.0)).collect();
            let batch = HistoryBatch::from_pairs(&space, &tasks, &risks, 0).unwrap();
            model.normalizer_mut().update(risks.iter().copied());
            let l = model.latent_dim();
            let prior = LatentPosterior::new(
                (0..l).map(|_| rng.random_range(-1.0..1.0)).collect(),
                (0..l).map(|_| rng.random_range(0.3..2.0)).collect(),
            )
            .unwrap();
            model.set_prior(prior).unwrap();
            let eps: Vec<f64> = (0..l).map(|_| rng.random_range(-2.0..2.0)).collect();

            let est = model.elbo_with_noise(&batch, &eps).unwrap();
            let params = model.params_flat();
            let mut probe = model.clone();
            let numeric = central_diff(
                |p| {
                    probe.set_params_flat(p).unwrap();
                    probe.elbo_with_noise(&batch, &eps).unwrap().objective
                },
                &params,
                FD_STEP,
            );
            worst = worst.max(max_rel_err(&est.gradient.flat(), &numeric, 1e-6));
        }
        worst
    }

    /// Worst relative error of the first-order meta-gradient. Under the
    /// first-order approximation the adaptation displacement is a constant,
    /// so the oracle differentiates `theta -> L_query(theta + delta)` with
    /// `delta` frozen.
    pub fn maml(instances: u64) -> f64 {
        let mut worst: f64 = 0.0;
        for seed in 0..instances {
            let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
            let cfg = MamlConfig {
                hidden: [8, 20, 40][seed as usize % 3],
                inner_lr: [1e-3, 1e-2][seed as usize % 2],
                inner_steps: 1 + seed as usize % 2,
                ..MamlConfig::default()
            };
            let mut learner = MamlLearner::new(cfg, &mut rng).unwrap();
            for l in learner.net.layers_mut() {
                for b in l.biases_mut() {
                    *b = rng.random_range(-0.3..0.3);
                }
            }
            let task = SinusoidTask::new(rng.random_range(0.1..5.0), rng.random_range(0.0..std::f64::consts::PI)).unwrap();
            let support = sample_shots(&task, cfg.k_support, &mut rng).unwrap();
            let query = sample_shots(&task, cfg.n_query, &mut rng).unwrap();

            let analytic = learner.task_gradient(&support, &query).unwrap();
            let theta = learner.net.params_flat();
            let adapted = learner.adapt(&support, cfg.inner_steps).unwrap().params_flat();
            let delta: Vec<f64> = adapted.iter().zip(&theta).map(|(a, t)| a - t).collect();
            let mut probe = learner.net.clone();
            let numeric = central_diff(
                |p| {
                    let shifted: Vec<f64> = p.iter().zip(&delta).map(|(a, d)| a + d).collect();
                    probe.set_params_flat(&shifted).unwrap();
                    mse(&probe, &query).unwrap()
                },
                &theta,
                FD_STEP,
            );
            worst = worst.max(max_rel_err(&analytic.gradient.flat(), &numeric, 1e-6));
        }
        worst
    }
}
