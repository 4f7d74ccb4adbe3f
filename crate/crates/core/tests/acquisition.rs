mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rats::acquisition::{self, AcquisitionConfig, Strategy};
use rats::bench_synthetic::{self, ComparisonConfig, ToyLearner};
use rats::risk_model::{RiskModel, RiskModelConfig};
use rats::rounds::RoundDriver;
use rats::subset;
use rats::task_space::{TaskId, TaskSpace};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn drm_keeps_the_harder_half() {
    let space = TaskSpace::unit(3).unwrap();
    let cfg = AcquisitionConfig::new(Strategy::Drm, 6);
    assert_eq!(cfg.pseudo_batch, 12);
    let oracle_rng = std::cell::RefCell::new(rng(1));
    for round in 0..200 {
        let sel = acquisition::select_drm(
            &space,
            &cfg,
            |ids| {
                let mut r = oracle_rng.borrow_mut();
                Ok(ids.iter().map(|t| t.0[0] * t.0[1] + r.random_range(-0.1..0.1)).collect())
            },
            &mut rng(round),
        )
        .unwrap();
        let kept: Vec<f64> = sel.chosen.iter().map(|&i| sel.scores[i]).collect();
        let dropped: Vec<f64> = (0..sel.candidates.len())
            .filter(|i| !sel.chosen.contains(i))
            .map(|i| sel.scores[i])
            .collect();
        assert_eq!(kept.len(), 6);
        assert!(mean(&kept) >= mean(&dropped));
        assert!(kept.iter().cloned().fold(f64::INFINITY, f64::min) >= dropped.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    }
}

#[test]
fn full_random_mix_matches_uniform_sampling() {
    let space = TaskSpace::unit(1).unwrap();
    let model = RiskModel::new(space.clone(), &RiskModelConfig::default(), &mut rng(2)).unwrap();
    let mut cfg = AcquisitionConfig::new(Strategy::MptsUcb, 4).with_pseudo_batch_factor(8.0);
    cfg.mix_rho = 1.0;
    let mut counts = [0usize; 10];
    let rounds = 500;
    for round in 0..rounds {
        let sel = acquisition::select_mpts_ucb(&space, &cfg, &model, 2, &mut rng(100 + round)).unwrap();
        assert_eq!(sel.tasks.len(), 4);
        for t in &sel.tasks {
            counts[((t.0[0] * 10.0) as usize).min(9)] += 1;
        }
    }
    // Chi-square against uniform bins, 9 degrees of freedom; 27.9 is the 0.999 quantile.
    let expected = (rounds * 4) as f64 / 10.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    assert!(chi2 < 27.9, "chi2 {chi2}, counts {counts:?}");
}

#[test]
fn every_strategy_returns_b_distinct_tasks_deterministically() {
    let space = TaskSpace::unit(2).unwrap();
    let model = RiskModel::new(space.clone(), &RiskModelConfig::default(), &mut rng(3)).unwrap();
    for strategy in [Strategy::Erm, Strategy::Gdrm, Strategy::Drm, Strategy::MptsUcb, Strategy::Pdts] {
        let cfg = AcquisitionConfig::new(strategy, 5);
        let pick = |seed| match strategy {
            Strategy::Erm | Strategy::Gdrm => acquisition::select_erm(&space, &cfg, &mut rng(seed)),
            Strategy::Drm => acquisition::select_drm(&space, &cfg, |ids| Ok(ids.iter().map(|t| t.0[1]).collect()), &mut rng(seed)),
            Strategy::MptsUcb => acquisition::select_mpts_ucb(&space, &cfg, &model, 10, &mut rng(seed)),
            Strategy::Pdts => acquisition::select_pdts(&space, &cfg, &model, &mut rng(seed)),
        }
        .unwrap();
        let a = pick(9);
        assert_eq!(a, pick(9), "{strategy}");
        assert_eq!(a.tasks.len(), 5);
        let mut idx = a.chosen.clone();
        idx.dedup();
        assert_eq!(idx.len(), 5, "{strategy}");
        assert!(a.weights.iter().all(|&w| w == 0.2));
    }
}

#[test]
fn pdts_spreads_out_compared_with_top_b_on_the_same_draw() {
    let cfg = ComparisonConfig::default_2d();
    let sampler = AcquisitionConfig::new(Strategy::Pdts, 8);
    let learner = ToyLearner::new(cfg.dims.clone(), cfg.landscape.clone(), cfg.radius, cfg.reduction).unwrap();
    let mut driver = RoundDriver::new(learner, sampler, cfg.risk_model, 4).unwrap();
    let space = cfg.dims.clone();
    let (mut spread, mut strict) = (0.0, 0);
    for _ in 0..20 {
        let record = driver.step().unwrap();
        let sel = &record.selection;
        let top = subset::top_b(&sel.scores, 8).unwrap();
        let div = |idx: &[usize]| {
            let ids: Vec<&TaskId> = idx.iter().map(|&i| &sel.candidates[i]).collect();
            subset::diversity_score(&space, &ids)
        };
        let (d_pdts, d_top) = (div(&sel.chosen), div(&top));
        // Equal only when the top scorers already form the greedy optimum.
        assert!(d_pdts >= d_top, "round {}", record.round);
        spread += d_pdts - d_top;
        strict += usize::from(d_pdts > d_top);
    }
    assert!(spread > 0.0);
    assert!(strict >= 15, "strictly wider in {strict} of 20 rounds");
}

#[test]
fn pdts_covers_more_ground_than_pure_ucb() {
    let mut cfg = ComparisonConfig::default_2d();
    cfg.samplers.retain(|s| matches!(s.strategy, Strategy::Pdts) || (s.strategy == Strategy::MptsUcb && s.mix_rho == 0.0));
    assert_eq!(cfg.samplers.len(), 2);
    assert_eq!(cfg.samplers[0].pseudo_batch, 64 * 8);
    let rows = bench_synthetic::run_sampler_comparison(&cfg).unwrap();
    let final_entropy = |label: &str| {
        let mut v: Vec<f64> = rows
            .iter()
            .filter(|r| r.strategy == label && r.round + 1 == cfg.rounds)
            .map(|r| r.entropy)
            .collect();
        common::median(&mut v)
    };
    let pdts = final_entropy("pdts");
    let ucb = final_entropy("mpts_ucb_rho0");
    assert!(pdts > ucb, "pdts {pdts} vs ucb {ucb}");
}

fn concentration(p_eps: f64, b_hat: usize, b: usize, seed: u64) -> rats::metrics::ConcentrationEstimate {
    use rats::metrics::{concentration_mc, ConcentrationSetup, TopB};
    // f(t) = t on [0, 1] with max 1: the neighborhood has mass exactly p_eps.
    let space = TaskSpace::unit(1).unwrap();
    let setup = ConcentrationSetup::new(p_eps, b_hat, b, 10_000).unwrap();
    concentration_mc(&setup, &space, |t| t.0[0], 1.0, p_eps, &TopB, &mut rng(seed)).unwrap()
}

#[test]
fn concentration_with_no_surplus_is_p_to_the_b() {
    for (p, b) in [(0.3, 1), (0.5, 2), (0.7, 3)] {
        let est = concentration(p, b, b, 40 + b as u64);
        let want = f64::powi(p, b as i32);
        let se = (want * (1.0 - want) / 10_000.0).sqrt();
        assert!((est.probability - want).abs() < 3.0 * se, "p {p} B {b}: {} vs {want}", est.probability);
        assert!((est.implied_p_eps - p).abs() < 0.02);
    }
}

#[test]
fn closed_form_is_reported_beside_monte_carlo() {
    let (p, b_hat, b) = (0.3, 8, 2);
    let est = concentration(p, b_hat, b, 77);
    let setup = rats::metrics::ConcentrationSetup::new(p, b_hat, b, 10_000).unwrap();
    let closed = rats::metrics::concentration_closed_form(&setup);
    // Top-B lands entirely in the region iff at least B candidates do.
    let q: f64 = 1.0 - p;
    let binomial = 1.0 - q.powi(8) - 8.0 * p * q.powi(7);
    println!("p_eps={p} b_hat={b_hat} b={b}: mc={:.4} (se {:.4}) closed_form={closed:.4} binomial={binomial:.4}", est.probability, est.stderr);
    assert!((est.probability - binomial).abs() < 3.0 * est.stderr);
    assert!((0.0..=1.0).contains(&closed));
}
