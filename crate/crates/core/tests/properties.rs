use proptest::prelude::*;
use rats::metrics::{self, RiskSample};
use rats::subset::{self, ScoredCandidates};
use rats::task_space::{TaskId, TaskSpace};

fn values(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-100.0f64..100.0, 1..max_len)
}

fn space_and_points(max_n: usize) -> impl Strategy<Value = (TaskSpace, Vec<Vec<f64>>)> {
    (1usize..4).prop_flat_map(move |d| {
        let bounds = prop::collection::vec((-10.0f64..10.0, 0.1f64..5.0), d);
        let units = prop::collection::vec(prop::collection::vec(0.0f64..=1.0, d), 1..max_n);
        (bounds, units).prop_map(|(b, u)| {
            let space = TaskSpace::new(b.into_iter().map(|(lo, w)| (lo, lo + w)).collect()).unwrap();
            (space, u)
        })
    })
}

proptest! {
    #[test]
    fn cvar_is_monotone_in_alpha(v in values(60), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let s = RiskSample::new(v).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let c_lo = metrics::cvar_tail_mean(&s, lo).unwrap();
        let c_hi = metrics::cvar_tail_mean(&s, hi).unwrap();
        prop_assert!(c_hi >= c_lo - 1e-9 * c_lo.abs().max(1.0));
        prop_assert!(metrics::cvar_tail_mean(&s, 0.0).unwrap() >= s.mean() - 1e-9 * s.mean().abs().max(1.0));
    }

    #[test]
    fn cvar_is_translation_and_scale_equivariant(v in values(60), alpha in 0.0f64..1.0, shift in -50.0f64..50.0, scale in 0.01f64..20.0) {
        let base = metrics::cvar_tail_mean(&RiskSample::new(v.clone()).unwrap(), alpha).unwrap();
        let moved: Vec<f64> = v.iter().map(|x| scale * x + shift).collect();
        let got = metrics::cvar_tail_mean(&RiskSample::new(moved).unwrap(), alpha).unwrap();
        let want = scale * base + shift;
        prop_assert!((got - want).abs() <= 1e-7 * want.abs().max(1.0));
    }

    #[test]
    fn cvar_dual_agrees_with_tail_mean(v in values(80), alpha in 0.0f64..1.0) {
        let s = RiskSample::new(v).unwrap();
        let p = metrics::cvar_tail_mean(&s, alpha).unwrap();
        let d = metrics::cvar_dual(&s, alpha).unwrap();
        prop_assert!((p - d).abs() <= 1e-9 * p.abs().max(1.0));
    }

    #[test]
    fn pcc_is_affine_invariant(
        pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..40),
        a in 0.1f64..10.0, b in -5.0f64..5.0, c in 0.1f64..10.0, d in -5.0f64..5.0,
    ) {
        let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        if let Ok(r) = metrics::pcc(&x, &y) {
            let xs: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let ys: Vec<f64> = y.iter().map(|v| c * v + d).collect();
            let r2 = metrics::pcc(&xs, &ys).unwrap();
            prop_assert!((r - r2).abs() < 1e-9);
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
            let neg: Vec<f64> = y.iter().map(|v| -v).collect();
            prop_assert!((metrics::pcc(&x, &neg).unwrap() + r).abs() < 1e-9);
        }
    }

    #[test]
    fn greedy_without_diversity_is_top_b(scores in values(40), b_frac in 0.0f64..1.0) {
        let n = scores.len();
        let b = 1 + ((n - 1) as f64 * b_frac) as usize;
        let space = TaskSpace::unit(1).unwrap();
        let ids: Vec<TaskId> = (0..n).map(|i| TaskId(vec![i as f64 / n as f64])).collect();
        let cands = ScoredCandidates::new(ids, scores.clone()).unwrap();
        let mut g = subset::greedy_diverse(&space, &cands, b, 0.0).unwrap();
        let mut t = subset::top_b(&scores, b).unwrap();
        g.sort_unstable();
        t.sort_unstable();
        prop_assert_eq!(g, t);
    }

    #[test]
    fn distances_are_symmetric_and_bounded((space, units) in space_and_points(8)) {
        let ids: Vec<TaskId> = units.iter().map(|u| space.denormalize(u).unwrap()).collect();
        for a in &ids {
            prop_assert!(space.pairwise_sqdist(a, a).abs() < 1e-24);
            for b in &ids {
                let ab = space.pairwise_sqdist(a, b);
                prop_assert_eq!(ab, space.pairwise_sqdist(b, a));
                prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
            }
        }
    }

    #[test]
    fn normalize_inverts_denormalize((space, units) in space_and_points(8)) {
        for u in &units {
            let id = space.denormalize(u).unwrap();
            prop_assert!(space.contains(&id));
            let back = space.normalize(&id).unwrap();
            for (x, y) in u.iter().zip(&back) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let again = space.denormalize(&back).unwrap();
            for (x, y) in id.0.iter().zip(&again.0) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn diversity_score_lies_in_unit_interval((space, units) in space_and_points(10)) {
        let ids: Vec<TaskId> = units.iter().map(|u| space.denormalize(u).unwrap()).collect();
        let refs: Vec<&TaskId> = ids.iter().collect();
        let s = subset::diversity_score(&space, &refs);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&s));
    }

    #[test]
    fn gdrm_weights_form_a_distribution(losses in values(30), eta in 0.0f64..0.5) {
        let w = rats::acquisition::gdrm_weights(&losses, eta).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        // Larger loss, no smaller weight.
        for i in 0..losses.len() {
            for j in 0..losses.len() {
                if losses[i] > losses[j] {
                    prop_assert!(w[i] >= w[j]);
                }
            }
        }
    }
}
