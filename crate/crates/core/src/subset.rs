//! Cardinality-constrained subset selection over scored candidates.
//!
//! The diversity-regularized objective for a subset `S` of size `B` is
//!
//! ```text
//! total(S) = (1/B) * sum_{i in S} score_i + gamma * mean_{i<j in S} d(i, j)
//! ```
//!
//! where `d` is [`TaskSpace::pairwise_sqdist`]. With `gamma = 0` it reduces to
//! picking the `B` largest scores.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{RatsError, Result};
use crate::task_space::{TaskId, TaskSpace};

/// Exhaustive search refuses instances with more subsets than this.
pub const BRUTE_FORCE_LIMIT: u128 = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidates {
    ids: Vec<TaskId>,
    scores: Vec<f64>,
}

impl ScoredCandidates {
    pub fn new(ids: Vec<TaskId>, scores: Vec<f64>) -> Result<Self> {
        if ids.len() != scores.len() {
            return Err(RatsError::DimensionMismatch {
                expected: ids.len(),
                got: scores.len(),
            });
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(RatsError::NonFinite(format!("candidate score {i}")));
        }
        Ok(Self { ids, scores })
    }

    pub fn ids(&self) -> &[TaskId] {
        &self.ids
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn into_parts(self) -> (Vec<TaskId>, Vec<f64>) {
        (self.ids, self.scores)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsetObjective {
    /// Mean score over the subset.
    pub score_term: f64,
    pub diversity: f64,
    pub gamma: f64,
    pub total: f64,
}

fn check_size(n: usize, b: usize) -> Result<()> {
    if b == 0 || b > n {
        return Err(RatsError::InvalidArgument(format!(
            "subset size {b} must be in 1..={n}"
        )));
    }
    Ok(())
}

/// Larger score first, lower index on ties.
fn by_score_desc(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Indices of the `b` largest scores, ties to the lowest index, sorted ascending.
pub fn top_b(scores: &[f64], b: usize) -> Result<Vec<usize>> {
    check_size(scores.len(), b)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(by_score_desc(scores));
    order.truncate(b);
    order.sort_unstable();
    Ok(order)
}

/// Mean normalized squared distance over unordered pairs; 0 for fewer than two ids.
pub fn diversity_score(space: &TaskSpace, ids: &[&TaskId]) -> f64 {
    let n = ids.len();
    if n < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += space.pairwise_sqdist(ids[i], ids[j]);
        }
    }
    sum * 2.0 / (n * (n - 1)) as f64
}

pub fn objective(
    space: &TaskSpace,
    cands: &ScoredCandidates,
    subset: &[usize],
    gamma: f64,
) -> SubsetObjective {
    let b = subset.len().max(1) as f64;
    let score_term = subset.iter().map(|&i| cands.scores[i]).sum::<f64>() / b;
    let ids: Vec<&TaskId> = subset.iter().map(|&i| &cands.ids[i]).collect();
    let diversity = diversity_score(space, &ids);
    SubsetObjective {
        score_term,
        diversity,
        gamma,
        total: score_term + gamma * diversity,
    }
}

/// Marginal-gain greedy for the diversity-regularized objective.
///
/// Seeds with the best score, then repeatedly adds the candidate maximizing
/// `score_i + gamma * 2/(B-1) * sum_{j in S} d(i, j)` (the marginal gain
/// scaled by `B`). Ties go to the lowest index. Output is sorted ascending.
pub fn greedy_diverse(
    space: &TaskSpace,
    cands: &ScoredCandidates,
    b: usize,
    gamma: f64,
) -> Result<Vec<usize>> {
    check_size(cands.len(), b)?;
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(RatsError::InvalidArgument(format!(
            "diversity weight must be finite and non-negative, got {gamma}"
        )));
    }
    let n = cands.len();
    let pair_weight = if b > 1 { 2.0 / (b - 1) as f64 } else { 0.0 };
    let mut chosen = vec![false; n];
    // Running sum of distances from each candidate to the current selection.
    let mut dist_to_sel = vec![0.0; n];
    let mut selected = Vec::with_capacity(b);

    for _ in 0..b {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            if chosen[i] {
                continue;
            }
            let gain = cands.scores[i] + gamma * pair_weight * dist_to_sel[i];
            if best.is_none_or(|(_, g)| gain > g) {
                best = Some((i, gain));
            }
        }
        let (pick, _) = best.expect("b <= n leaves a candidate");
        chosen[pick] = true;
        selected.push(pick);
        if gamma > 0.0 {
            for i in 0..n {
                if !chosen[i] {
                    dist_to_sel[i] += space.pairwise_sqdist(&cands.ids[i], &cands.ids[pick]);
                }
            }
        }
    }
    selected.sort_unstable();
    Ok(selected)
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return u128::MAX;
        }
    }
    acc
}

/// Exhaustive maximization of the same objective as [`greedy_diverse`].
/// Ties go to the lexicographically smallest index set.
pub fn brute_force_diverse(
    space: &TaskSpace,
    cands: &ScoredCandidates,
    b: usize,
    gamma: f64,
) -> Result<(Vec<usize>, SubsetObjective)> {
    let n = cands.len();
    check_size(n, b)?;
    let needed = binomial(n, b);
    if needed > BRUTE_FORCE_LIMIT {
        return Err(RatsError::TooManyCombinations {
            needed,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let mut combo: Vec<usize> = (0..b).collect();
    let mut best = (combo.clone(), objective(space, cands, &combo, gamma));
    loop {
        // Advance to the next combination in lexicographic order.
        let mut i = b;
        while i > 0 && combo[i - 1] == n - b + i - 1 {
            i -= 1;
        }
        if i == 0 {
            break;
        }
        combo[i - 1] += 1;
        for j in i..b {
            combo[j] = combo[j - 1] + 1;
        }
        let obj = objective(space, cands, &combo, gamma);
        if obj.total > best.1.total {
            best = (combo.clone(), obj);
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(points: &[f64], scores: &[f64]) -> (TaskSpace, ScoredCandidates) {
        let space = TaskSpace::unit(1).unwrap();
        let ids = points.iter().map(|&p| TaskId(vec![p])).collect();
        (space, ScoredCandidates::new(ids, scores.to_vec()).unwrap())
    }

    #[test]
    fn top_b_orders_and_breaks_ties() {
        assert_eq!(top_b(&[3.0, 1.0, 2.0], 2).unwrap(), vec![0, 2]);
        assert_eq!(top_b(&[3.0, 1.0, 2.0], 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(top_b(&[5.0, 5.0, 5.0], 2).unwrap(), vec![0, 1]);
        assert!(top_b(&[1.0], 2).is_err());
    }

    #[test]
    fn diversity_score_cases() {
        let space = TaskSpace::unit(1).unwrap();
        let a = TaskId(vec![0.3]);
        assert_eq!(diversity_score(&space, &[&a, &a, &a]), 0.0);
        let lo = TaskId(vec![0.0]);
        let hi = TaskId(vec![1.0]);
        assert_eq!(diversity_score(&space, &[&lo, &hi]), 1.0);
        let mid = TaskId(vec![0.5]);
        assert!((diversity_score(&space, &[&lo, &mid, &hi]) - 0.5).abs() < 1e-15);
        assert_eq!(diversity_score(&space, &[&lo]), 0.0);
    }

    #[test]
    fn greedy_without_diversity_is_top_b() {
        let (space, c) = line(&[0.1, 0.2, 0.3, 0.4], &[0.5, 2.0, 2.0, -1.0]);
        assert_eq!(greedy_diverse(&space, &c, 2, 0.0).unwrap(), top_b(c.scores(), 2).unwrap());
    }

    #[test]
    fn greedy_picks_farthest_pair_for_equal_scores() {
        let (space, c) = line(&[0.0, 0.4, 1.0], &[1.0, 1.0, 1.0]);
        assert_eq!(greedy_diverse(&space, &c, 2, 1.0).unwrap(), vec![0, 2]);
    }

    #[test]
    fn greedy_rejects_bad_arguments() {
        let (space, c) = line(&[0.0, 1.0], &[1.0, 1.0]);
        assert!(greedy_diverse(&space, &c, 3, 1.0).is_err());
        assert!(greedy_diverse(&space, &c, 1, -1.0).is_err());
    }

    #[test]
    fn brute_force_trivial_cases() {
        let (space, c) = line(&[0.0, 0.4, 1.0, 0.7], &[0.2, 0.9, 0.1, 0.5]);
        let (set, obj) = brute_force_diverse(&space, &c, 2, 0.0).unwrap();
        assert_eq!(set, top_b(c.scores(), 2).unwrap());
        assert!((obj.total - (0.9 + 0.5) / 2.0).abs() < 1e-15);
        let (all, _) = brute_force_diverse(&space, &c, 4, 3.0).unwrap();
        assert_eq!(all, vec![0, 1, 2, 3]);
    }

    #[test]
    fn brute_force_guard() {
        let n = 40;
        let (space, c) = line(&vec![0.5; n], &vec![1.0; n]);
        assert!(matches!(
            brute_force_diverse(&space, &c, 20, 1.0),
            Err(RatsError::TooManyCombinations { .. })
        ));
    }

    #[test]
    fn objective_total_is_consistent() {
        let (space, c) = line(&[0.0, 0.5, 1.0], &[1.0, 2.0, 3.0]);
        let o = objective(&space, &c, &[0, 2], 0.7);
        assert!((o.total - (o.score_term + o.gamma * o.diversity)).abs() < 1e-12);
        assert_eq!(o.score_term, 2.0);
        assert_eq!(o.diversity, 1.0);
    }

    #[test]
    fn candidates_reject_bad_input() {
        assert!(ScoredCandidates::new(vec![TaskId(vec![0.0])], vec![]).is_err());
        assert!(ScoredCandidates::new(vec![TaskId(vec![0.0])], vec![f64::NAN]).is_err());
    }
}
