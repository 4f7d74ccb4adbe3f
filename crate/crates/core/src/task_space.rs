//! Task identifiers, the uniform identifier distribution and the normalized
//! geometry used for diversity.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RatsError, Result};

/// A point in the identifier space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub Vec<f64>);

impl TaskId {
    pub fn new(coords: Vec<f64>) -> Self {
        TaskId(coords)
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

impl From<Vec<f64>> for TaskId {
    fn from(v: Vec<f64>) -> Self {
        TaskId(v)
    }
}

/// Axis-aligned box of identifiers with per-dimension `[lo, hi]` bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 2]>", into = "Vec<[f64; 2]>")]
pub struct TaskSpace {
    bounds: Vec<(f64, f64)>,
}

impl TryFrom<Vec<[f64; 2]>> for TaskSpace {
    type Error = RatsError;

    fn try_from(dims: Vec<[f64; 2]>) -> Result<Self> {
        TaskSpace::new(dims.into_iter().map(|[lo, hi]| (lo, hi)).collect())
    }
}

impl From<TaskSpace> for Vec<[f64; 2]> {
    fn from(s: TaskSpace) -> Self {
        s.bounds.into_iter().map(|(lo, hi)| [lo, hi]).collect()
    }
}

impl TaskSpace {
    pub fn new(bounds: Vec<(f64, f64)>) -> Result<Self> {
        if bounds.is_empty() {
            return Err(RatsError::InvalidSpace("dimension must be positive".into()));
        }
        for (i, &(lo, hi)) in bounds.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(RatsError::InvalidSpace(format!(
                    "dimension {i}: need finite lo < hi, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self { bounds })
    }

    /// The unit hypercube `[0, 1]^dim`.
    pub fn unit(dim: usize) -> Result<Self> {
        Self::new(vec![(0.0, 1.0); dim])
    }

    /// Amplitude in `[0.1, 5.0]`, phase in `[0, pi]`.
    pub fn sinusoid() -> Self {
        Self::new(vec![(0.1, 5.0), (0.0, std::f64::consts::PI)]).expect("valid bounds")
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn contains(&self, id: &TaskId) -> bool {
        id.dim() == self.dim()
            && id
                .0
                .iter()
                .zip(&self.bounds)
                .all(|(&x, &(lo, hi))| x >= lo && x <= hi)
    }

    pub fn check(&self, id: &TaskId) -> Result<()> {
        if id.dim() != self.dim() {
            return Err(RatsError::DimensionMismatch {
                expected: self.dim(),
                got: id.dim(),
            });
        }
        for (dim, (&value, &(lo, hi))) in id.0.iter().zip(&self.bounds).enumerate() {
            if !(value >= lo && value <= hi) {
                return Err(RatsError::OutOfBounds { dim, value, lo, hi });
            }
        }
        Ok(())
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<TaskId> {
        (0..count)
            .map(|_| {
                TaskId(
                    self.bounds
                        .iter()
                        .map(|&(lo, hi)| lo + (hi - lo) * rng.random::<f64>())
                        .collect(),
                )
            })
            .collect()
    }

    pub fn normalize(&self, id: &TaskId) -> Result<Vec<f64>> {
        self.check(id)?;
        Ok(self.normalize_unchecked(id))
    }

    pub(crate) fn normalize_unchecked(&self, id: &TaskId) -> Vec<f64> {
        id.0
            .iter()
            .zip(&self.bounds)
            .map(|(&x, &(lo, hi))| (x - lo) / (hi - lo))
            .collect()
    }

    pub fn denormalize(&self, unit: &[f64]) -> Result<TaskId> {
        if unit.len() != self.dim() {
            return Err(RatsError::DimensionMismatch {
                expected: self.dim(),
                got: unit.len(),
            });
        }
        Ok(TaskId(
            unit.iter()
                .zip(&self.bounds)
                .map(|(&u, &(lo, hi))| lo + u * (hi - lo))
                .collect(),
        ))
    }

    /// Squared Euclidean distance of normalized coordinates divided by the
    /// dimension, so the result lies in `[0, 1]`.
    pub fn pairwise_sqdist(&self, a: &TaskId, b: &TaskId) -> f64 {
        let sum: f64 = a
            .0
            .iter()
            .zip(&b.0)
            .zip(&self.bounds)
            .map(|((&x, &y), &(lo, hi))| {
                let d = (x - y) / (hi - lo);
                d * d
            })
            .sum();
        sum / self.dim() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_degenerate_bounds() {
        assert!(TaskSpace::new(vec![(1.0, 1.0)]).is_err());
        assert!(TaskSpace::new(vec![(2.0, 1.0)]).is_err());
        assert!(TaskSpace::new(vec![]).is_err());
        assert!(TaskSpace::new(vec![(0.0, f64::INFINITY)]).is_err());
    }

    #[test]
    fn uniform_samples_are_reproducible_and_in_bounds() {
        let space = TaskSpace::unit(1).unwrap();
        let a = space.sample_uniform(3, &mut ChaCha8Rng::seed_from_u64(4));
        let b = space.sample_uniform(3, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
        assert!(a.iter().all(|t| space.contains(t)));
    }

    #[test]
    fn sinusoid_box_contains_samples() {
        let space = TaskSpace::sinusoid();
        let ids = space.sample_uniform(512, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(ids.len(), 512);
        for t in &ids {
            assert!(t.0[0] >= 0.1 && t.0[0] <= 5.0);
            assert!(t.0[1] >= 0.0 && t.0[1] <= std::f64::consts::PI);
        }
    }

    #[test]
    fn uniform_mean_is_one_half() {
        let space = TaskSpace::unit(1).unwrap();
        let ids = space.sample_uniform(100_000, &mut ChaCha8Rng::seed_from_u64(8));
        let mean = ids.iter().map(|t| t.0[0]).sum::<f64>() / ids.len() as f64;
        assert!((mean - 0.5).abs() < 0.01);
    }

    #[test]
    fn normalize_boundaries() {
        let space = TaskSpace::new(vec![(-2.0, 6.0), (1.0, 3.0)]).unwrap();
        assert_eq!(space.normalize(&TaskId(vec![-2.0, 1.0])).unwrap(), vec![0.0, 0.0]);
        assert_eq!(space.normalize(&TaskId(vec![6.0, 3.0])).unwrap(), vec![1.0, 1.0]);
        assert_eq!(space.normalize(&TaskId(vec![2.0, 2.0])).unwrap(), vec![0.5, 0.5]);
        assert!(matches!(
            space.normalize(&TaskId(vec![7.0, 2.0])),
            Err(RatsError::OutOfBounds { dim: 0, .. })
        ));
    }

    #[test]
    fn distances() {
        let space = TaskSpace::new(vec![(0.0, 10.0), (-1.0, 1.0)]).unwrap();
        let a = TaskId(vec![3.0, 0.2]);
        assert_eq!(space.pairwise_sqdist(&a, &a), 0.0);
        let lo = TaskId(vec![0.0, -1.0]);
        let hi = TaskId(vec![10.0, 1.0]);
        assert!((space.pairwise_sqdist(&lo, &hi) - 1.0).abs() < 1e-15);
        let unit = TaskSpace::unit(2).unwrap();
        let d = unit.pairwise_sqdist(&TaskId(vec![0.0, 0.0]), &TaskId(vec![1.0, 0.0]));
        assert_eq!(d, 0.5);
    }

    #[test]
    fn serde_uses_dims_pairs() {
        let space: TaskSpace = serde_json::from_str("[[0.1, 5.0], [0.0, 3.0]]").unwrap();
        assert_eq!(space.dim(), 2);
        assert!(serde_json::from_str::<TaskSpace>("[[1.0, 0.0]]").is_err());
    }
}
