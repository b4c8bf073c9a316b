//! Next-token distributions over `terminals ∪ {EOS}`.

use serde::{Deserialize, Serialize};

/// Probabilities indexed by terminal id, with EOS in the last slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDistribution {
    pub probs: Vec<f64>,
}

impl TokenDistribution {
    pub fn new(probs: Vec<f64>) -> Self {
        debug_assert!(!probs.is_empty());
        TokenDistribution { probs }
    }

    pub fn uniform(size: usize) -> Self {
        TokenDistribution::new(vec![1.0 / size as f64; size])
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn eos_index(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn eos(&self) -> f64 {
        self.probs[self.eos_index()]
    }

    pub fn prob(&self, symbol: usize) -> f64 {
        self.probs[symbol]
    }

    pub fn sum(&self) -> f64 {
        self.probs.iter().sum()
    }

    pub fn total_variation(&self, other: &Self) -> f64 {
        assert_eq!(self.len(), other.len());
        0.5 * self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }

    /// `KL(self ‖ other)` in nats; infinite when `other` misses support.
    pub fn kl(&self, other: &Self) -> f64 {
        assert_eq!(self.len(), other.len());
        self.probs
            .iter()
            .zip(&other.probs)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, q)| if *q > 0.0 { p * (p / q).ln() } else { f64::INFINITY })
            .sum()
    }

    /// Symbols with positive probability.
    pub fn support(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.probs[i] > 0.0).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distances() {
        let p = TokenDistribution::new(vec![0.5, 0.5, 0.0]);
        let q = TokenDistribution::uniform(3);
        assert!((p.total_variation(&q) - 1.0 / 3.0).abs() < 1e-15);
        assert!((p.kl(&q) - (1.5f64).ln()).abs() < 1e-15);
        assert_eq!(q.kl(&p), f64::INFINITY);
        assert_eq!(p.support(), [0, 1]);
        assert_eq!(p.eos(), 0.0);
    }
}
