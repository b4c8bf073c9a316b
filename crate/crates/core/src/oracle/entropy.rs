use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Oracle, OracleError};
use crate::grammar::{spectral_radius, Grammar};
use crate::sampler::{SampleLimits, Sampler};

/// Samples drawn when looking for strings with more than one derivation.
pub const AMBIGUITY_SAMPLES: usize = 2000;
const AMBIGUITY_SEED: u64 = 0x5eed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    /// Nats, at the start symbol.
    pub derivational_entropy: f64,
    pub per_nonterminal: Vec<(String, f64)>,
    /// A sampled string had a derivation other than the sampled one; the
    /// string entropy is then strictly below the derivational entropy.
    pub ambiguous_warning: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecursionStats {
    pub nonterminal: String,
    pub expected_recursion: f64,
    /// `1 / (1 − E[R])`, absent when `E[R] ≥ 1`.
    pub blowup_factor: Option<f64>,
}

impl RecursionStats {
    pub fn unbounded(&self) -> bool {
        self.blowup_factor.is_none()
    }
}

fn require_consistent(g: &Grammar) -> Result<DMatrix<f64>, OracleError> {
    let m = g.mean_matrix();
    match spectral_radius(&m) {
        Some(r) if r < 1.0 => Ok(m),
        Some(r) => Err(OracleError::Inconsistent(format!("spectral radius {r:.6} ≥ 1"))),
        None => Err(OracleError::Inconsistent("spectral radius inconclusive".into())),
    }
}

/// Solves `(I − M) x = b`.
fn solve(m: DMatrix<f64>, b: Vec<f64>) -> Result<Vec<f64>, OracleError> {
    let n = m.nrows();
    let x = (DMatrix::identity(n, n) - m)
        .lu()
        .solve(&DVector::from_vec(b))
        .ok_or_else(|| OracleError::Inconsistent("I − M is singular".into()))?;
    Ok(x.iter().copied().collect())
}

/// Per-nonterminal derivational entropy from `(I − M) H = local`, where
/// `local[A] = −Σ w ln w` over `A`'s rules.
pub fn derivational_entropy(g: &Grammar) -> Result<EntropyReport, OracleError> {
    let m = require_consistent(g)?;
    let mut local = vec![0.0; g.nonterminals().len()];
    for r in g.rules() {
        if r.weight > 0.0 {
            local[r.lhs] -= r.weight * r.weight.ln();
        }
    }
    let h = solve(m, local)?;
    Ok(EntropyReport {
        derivational_entropy: h[g.start()].max(0.0),
        per_nonterminal: g
            .nonterminals()
            .iter()
            .cloned()
            .zip(h.iter().map(|x| x.max(0.0)))
            .collect(),
        ambiguous_warning: ambiguity_witness(g, AMBIGUITY_SAMPLES)?.is_some(),
    })
}

/// The first of `n` sampled sentences whose string probability exceeds the
/// probability of its sampled derivation.
pub fn ambiguity_witness(g: &Grammar, n: usize) -> Result<Option<Vec<usize>>, OracleError> {
    let oracle = Oracle::new(g)?;
    let sampler = Sampler::new(g, SampleLimits::default());
    for i in 0..n as u64 {
        let Ok(s) = sampler.sample(AMBIGUITY_SEED, i) else {
            continue;
        };
        let tokens = s.tree.tokens();
        let lp = oracle.string_logprob(&tokens)?;
        if lp - s.tree.log_prob > 1e-9 {
            return Ok(Some(tokens));
        }
    }
    Ok(None)
}

/// `E[R]` for `nt`: expected occurrences of `nt` in its own chosen rule.
pub fn expected_recursion(g: &Grammar, nt: &str) -> Result<RecursionStats, OracleError> {
    let a = g
        .nonterminal_id(nt)
        .ok_or_else(|| OracleError::UnknownNonterminal(nt.to_string()))?;
    let e: f64 = g
        .rules_for(a)
        .iter()
        .map(|&r| g.rule(r).weight * g.rule(r).count_of(a) as f64)
        .sum();
    Ok(RecursionStats {
        nonterminal: nt.to_string(),
        expected_recursion: e,
        blowup_factor: (e < 1.0).then(|| 1.0 / (1.0 - e)),
    })
}

/// Expected sentence length from `(I − M) L = t`.
pub fn expected_length(g: &Grammar) -> Result<f64, OracleError> {
    let m = require_consistent(g)?;
    Ok(solve(m, g.local_terminal_counts())?[g.start()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundled;
    use crate::grammar::parse_grammar;

    fn h(p: &[f64]) -> f64 {
        -p.iter().map(|x| x * x.ln()).sum::<f64>()
    }

    #[test]
    fn trivial_entropies() {
        let g = parse_grammar("start: S\nS -> \"a\" [1.0]").unwrap();
        assert_eq!(derivational_entropy(&g).unwrap().derivational_entropy, 0.0);
        let g = parse_grammar("start: S\nS -> \"a\" [0.5] | \"b\" [0.5]").unwrap();
        let r = derivational_entropy(&g).unwrap();
        assert!((r.derivational_entropy - 2f64.ln()).abs() < 1e-15);
        assert!(!r.ambiguous_warning);
    }

    #[test]
    fn nested_parens_entropy() {
        let r = derivational_entropy(&bundled::nested_parens()).unwrap();
        let h1 = h(&[0.8, 0.2]) / 0.2;
        let h0 = (h(&[0.7, 0.3]) + 0.7 * h1) / 0.4;
        assert!((r.per_nonterminal[1].1 - h1).abs() < 1e-12);
        assert!((r.derivational_entropy - h0).abs() < 1e-12);
        assert_eq!(r.per_nonterminal[0].1, r.derivational_entropy);
        // L0 → L0 L0 splits "(a)(a)(a)" two ways.
        assert!(r.ambiguous_warning);
    }

    #[test]
    fn recursion_stats() {
        let s = expected_recursion(&bundled::and_recursion(0.75), "S").unwrap();
        assert_eq!(s.expected_recursion, 0.5);
        assert_eq!(s.blowup_factor, Some(2.0));
        let s = expected_recursion(&bundled::nested_parens(), "L0").unwrap();
        assert!((s.expected_recursion - 0.6).abs() < 1e-15);
        assert!((s.blowup_factor.unwrap() - 2.5).abs() < 1e-12);
        let g = parse_grammar("start: S\nS -> \"a\" [1.0]").unwrap();
        assert_eq!(expected_recursion(&g, "S").unwrap().blowup_factor, Some(1.0));
        let s = expected_recursion(&bundled::and_recursion(0.4), "S").unwrap();
        assert!(s.unbounded());
    }

    #[test]
    fn lengths() {
        let g = parse_grammar("start: S\nS -> \"a\" [1.0]").unwrap();
        assert_eq!(expected_length(&g).unwrap(), 1.0);
        let g = parse_grammar("start: S\nS -> \"a\" \"b\" [0.5] | \"c\" [0.5]").unwrap();
        assert!((expected_length(&g).unwrap() - 1.5).abs() < 1e-15);
        // L1: (2·0.8 + 0.2)/0.2 = 9; L0: (1.4 + 0.7·9)/0.4
        let l = expected_length(&bundled::nested_parens()).unwrap();
        assert!((l - (1.4 + 6.3) / 0.4).abs() < 1e-12);
        let bad = parse_grammar("start: S\nS -> S S [0.9] | \"a\" [0.1]").unwrap();
        assert!(matches!(expected_length(&bad), Err(OracleError::Inconsistent(_))));
    }
}
