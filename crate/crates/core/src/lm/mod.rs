//! Language models over a grammar's terminals: an exact oracle model, a
//! weight-perturbed model that is context-free by construction, a uniform
//! model and a small decoder-only transformer.
//!
//! Every model predicts a [`TokenDistribution`] over the grammar terminals
//! followed by EOS.

mod train;
mod transformer;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dist::TokenDistribution;
use crate::grammar::Grammar;
use crate::oracle::{Oracle, OracleError};

pub use train::{evaluate, train, TrainConfig, TrainLogRow, TrainingLog};
pub use transformer::{ActivationRecord, ModelConfig, Sublayer, Transformer};

#[derive(Debug, Error)]
pub enum LmError {
    #[error("sequence of {len} positions exceeds the context of {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid perturbation: {0}")]
    InvalidPerturbation(String),
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("non-finite loss at step {step}, batch {batch}")]
    NonFiniteLoss { step: u64, batch: u64 },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Grammar terminals, then EOS, BOS and PAD. Terminal ids agree with the
/// grammar, and EOS sits right after them so the first `n + 1` ids index a
/// [`TokenDistribution`] directly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    terminals: Vec<String>,
}

impl Vocab {
    pub fn new(terminals: Vec<String>) -> Vocab {
        Vocab { terminals }
    }

    pub fn from_grammar(g: &Grammar) -> Vocab {
        Vocab::new(g.terminals().to_vec())
    }

    pub fn terminals(&self) -> &[String] {
        &self.terminals
    }

    pub fn n_terminals(&self) -> usize {
        self.terminals.len()
    }

    pub fn eos(&self) -> usize {
        self.terminals.len()
    }

    pub fn bos(&self) -> usize {
        self.terminals.len() + 1
    }

    pub fn pad(&self) -> usize {
        self.terminals.len() + 2
    }

    pub fn len(&self) -> usize {
        self.terminals.len() + 3
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Terminals plus EOS: the support of every prediction.
    pub fn output_size(&self) -> usize {
        self.terminals.len() + 1
    }

    pub fn symbol(&self, id: usize) -> &str {
        let n = self.terminals.len();
        if id < n {
            return &self.terminals[id];
        }
        match id - n {
            0 => "<eos>",
            1 => "<bos>",
            _ => "<pad>",
        }
    }

    /// Fails unless `g` has exactly these terminals in this order.
    pub fn check_grammar(&self, g: &Grammar) -> Result<(), LmError> {
        if g.terminals() == self.terminals.as_slice() {
            Ok(())
        } else {
            Err(LmError::VocabMismatch(format!(
                "model has {} terminals, grammar `{}` has {}",
                self.terminals.len(),
                g.name(),
                g.terminals().len()
            )))
        }
    }
}

/// An autoregressive model over terminal ids.
pub trait LanguageModel: Send + Sync {
    /// Terminals plus EOS.
    fn alphabet_size(&self) -> usize;

    fn next_dist(&self, prefix: &[usize]) -> Result<TokenDistribution, LmError>;

    /// Next-token distributions after each prefix of `tokens`, `n + 1` in
    /// all; the last one scores EOS.
    fn sequence_dists(&self, tokens: &[usize]) -> Result<Vec<TokenDistribution>, LmError> {
        (0..=tokens.len()).map(|k| self.next_dist(&tokens[..k])).collect()
    }

    /// `log Q(x_k | x_<k)` for each token, then the EOS term.
    fn step_logprobs(&self, tokens: &[usize]) -> Result<Vec<f64>, LmError> {
        let dists = self.sequence_dists(tokens)?;
        Ok(dists
            .iter()
            .enumerate()
            .map(|(k, d)| {
                if k == tokens.len() {
                    d.eos().ln()
                } else {
                    d.prob(tokens[k]).ln()
                }
            })
            .collect())
    }

    fn sentence_logprob(&self, tokens: &[usize]) -> Result<f64, LmError> {
        Ok(self.step_logprobs(tokens)?.iter().sum())
    }
}

/// Equal probability on every terminal and EOS.
#[derive(Debug, Clone, Copy)]
pub struct UniformLm {
    size: usize,
}

impl UniformLm {
    pub fn new(n_terminals: usize) -> UniformLm {
        UniformLm {
            size: n_terminals + 1,
        }
    }
}

impl LanguageModel for UniformLm {
    fn alphabet_size(&self) -> usize {
        self.size
    }

    fn next_dist(&self, _prefix: &[usize]) -> Result<TokenDistribution, LmError> {
        Ok(TokenDistribution::uniform(self.size))
    }
}

/// The grammar's own conditionals.
#[derive(Debug, Clone)]
pub struct OracleLm {
    oracle: Oracle,
}

impl OracleLm {
    pub fn oracle(&self) -> &Oracle {
        &self.oracle
    }

    pub fn grammar(&self) -> &Grammar {
        self.oracle.grammar()
    }
}

pub fn oracle_lm(g: &Grammar) -> Result<OracleLm, LmError> {
    Ok(OracleLm {
        oracle: Oracle::new(g)?,
    })
}

impl LanguageModel for OracleLm {
    fn alphabet_size(&self) -> usize {
        self.oracle.alphabet_size()
    }

    fn next_dist(&self, prefix: &[usize]) -> Result<TokenDistribution, LmError> {
        Ok(self.oracle.next_token_dist(prefix)?)
    }

    fn sequence_dists(&self, tokens: &[usize]) -> Result<Vec<TokenDistribution>, LmError> {
        let a = self.oracle.analyze(tokens)?;
        if a.next.len() <= tokens.len() {
            let dead = a.next.len().saturating_sub(1);
            return Err(OracleError::ImpossiblePrefix(self.grammar().render(&tokens[..=dead])).into());
        }
        Ok(a.next)
    }
}

/// Log-scale noise per nonterminal: entry `i` multiplies the weight of the
/// nonterminal's `i`-th rule by `exp(ε_i)` before renormalizing.
pub type Perturbation = BTreeMap<String, Vec<f64>>;

/// Copy of `g` with perturbed, renormalized rule weights.
pub fn perturb_grammar(g: &Grammar, perturb: &Perturbation) -> Result<Grammar, LmError> {
    let mut weights: Vec<f64> = g.rules().iter().map(|r| r.weight).collect();
    for (name, eps) in perturb {
        let a = g
            .nonterminal_id(name)
            .ok_or_else(|| LmError::InvalidPerturbation(format!("unknown nonterminal `{name}`")))?;
        let rules = g.rules_for(a);
        if eps.len() != rules.len() {
            return Err(LmError::InvalidPerturbation(format!(
                "`{name}` has {} rules, got {} noise values",
                rules.len(),
                eps.len()
            )));
        }
        if eps.iter().any(|e| !e.is_finite()) {
            return Err(LmError::InvalidPerturbation(format!("non-finite noise for `{name}`")));
        }
        let scaled: Vec<f64> = rules.iter().zip(eps).map(|(&r, e)| weights[r] * e.exp()).collect();
        let total: f64 = scaled.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(LmError::InvalidPerturbation(format!("weights of `{name}` vanish")));
        }
        for (&r, w) in rules.iter().zip(scaled) {
            weights[r] = w / total;
        }
    }
    let name = format!("{}.perturbed", g.name());
    g.with_weights(&weights)
        .map(|p| p.with_name(name))
        .map_err(|e| LmError::InvalidPerturbation(e.to_string()))
}

/// Gaussian log-noise with standard deviation `scale` on every rule of the
/// named nonterminals.
pub fn random_perturbation(g: &Grammar, nonterminals: &[&str], scale: f64, seed: u64) -> Perturbation {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, scale.abs()).unwrap();
    nonterminals
        .iter()
        .filter_map(|&n| {
            let a = g.nonterminal_id(n)?;
            let eps = (0..g.rules_for(a).len()).map(|_| normal.sample(&mut rng)).collect();
            Some((n.to_string(), eps))
        })
        .collect()
}

/// A model that is the exact oracle of a weight-perturbed copy of `g`. Each
/// nonterminal's behaviour is the same in every context, so it models every
/// subgrammar identically wherever it occurs.
#[derive(Debug, Clone)]
pub struct ComposedLm {
    inner: OracleLm,
}

impl ComposedLm {
    pub fn grammar(&self) -> &Grammar {
        self.inner.grammar()
    }
}

pub fn synthetic_composed_lm(g: &Grammar, perturb: &Perturbation) -> Result<ComposedLm, LmError> {
    Ok(ComposedLm {
        inner: oracle_lm(&perturb_grammar(g, perturb)?)?,
    })
}

impl LanguageModel for ComposedLm {
    fn alphabet_size(&self) -> usize {
        self.inner.alphabet_size()
    }

    fn next_dist(&self, prefix: &[usize]) -> Result<TokenDistribution, LmError> {
        self.inner.next_dist(prefix)
    }

    fn sequence_dists(&self, tokens: &[usize]) -> Result<Vec<TokenDistribution>, LmError> {
        self.inner.sequence_dists(tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundled;
    use crate::grammar::parse_grammar;
    use crate::sampler::{SampleLimits, Sampler};

    #[test]
    fn vocab_layout() {
        let v = Vocab::from_grammar(&bundled::nested_parens());
        assert_eq!(v.terminals(), ["(", ")", "a"]);
        assert_eq!((v.eos(), v.bos(), v.pad(), v.len()), (3, 4, 5, 6));
        assert_eq!(v.symbol(1), ")");
        assert_eq!(v.symbol(3), "<eos>");
        assert_eq!(v.symbol(5), "<pad>");
        assert!(v.check_grammar(&bundled::nested_parens()).is_ok());
        assert!(v.check_grammar(&bundled::and_recursion(0.6)).is_err());
    }

    #[test]
    fn oracle_model_matches_oracle() {
        for g in bundled::all() {
            let lm = oracle_lm(&g).unwrap();
            let oracle = Oracle::new(&g).unwrap();
            let sampler = Sampler::new(&g, SampleLimits::default());
            for i in 0..5 {
                let tokens = sampler.sample(7, i).unwrap().tree.tokens();
                let dists = lm.sequence_dists(&tokens).unwrap();
                for k in (0..=tokens.len()).step_by(3) {
                    let d = oracle.next_token_dist(&tokens[..k]).unwrap();
                    assert!(d.total_variation(&dists[k]) < 1e-12);
                    assert!((dists[k].sum() - 1.0).abs() < 1e-9);
                }
                let steps = lm.step_logprobs(&tokens).unwrap();
                let total = lm.sentence_logprob(&tokens).unwrap();
                let product: f64 = steps.iter().map(|s| s.exp()).product();
                assert!((total.exp() - product).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn chain_rule_on_unambiguous_grammar() {
        let g = bundled::load("deeper_recursion").unwrap();
        let lm = oracle_lm(&g).unwrap();
        let sampler = Sampler::new(&g, SampleLimits::default());
        for i in 0..20 {
            let s = sampler.sample(3, i).unwrap();
            let tokens = s.tree.tokens();
            let lp = lm.sentence_logprob(&tokens).unwrap();
            assert!((lp - lm.oracle().string_logprob(&tokens).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn impossible_prefix_propagates() {
        let g = bundled::nested_parens();
        let lm = oracle_lm(&g).unwrap();
        let close = g.terminal_id(")").unwrap();
        assert!(matches!(lm.next_dist(&[close]), Err(LmError::Oracle(_))));
        assert!(matches!(lm.sequence_dists(&[close, close]), Err(LmError::Oracle(_))));
    }

    #[test]
    fn single_token_vocabulary() {
        // Only EOS geometry matters: P(a^n) = 0.5^(n+1).
        let g = parse_grammar("start: S\nS -> \"a\" S [0.5] | \"\" [0.5]").unwrap();
        let lm = oracle_lm(&g).unwrap();
        for n in 0..6 {
            let lp = lm.sentence_logprob(&vec![0; n]).unwrap();
            assert!((lp - (n as f64 + 1.0) * 0.5f64.ln()).abs() < 1e-12);
        }
        let u = UniformLm::new(1);
        assert!((u.sentence_logprob(&[0, 0]).unwrap() - 3.0 * 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn perturbations() {
        let g = bundled::nested_parens();
        let zero: Perturbation = [("L1".to_string(), vec![0.0, 0.0])].into();
        let q = synthetic_composed_lm(&g, &zero).unwrap();
        let p = oracle_lm(&g).unwrap();
        let prefix = [0, 0, 2];
        assert!(q.next_dist(&prefix).unwrap().kl(&p.next_dist(&prefix).unwrap()).abs() < 1e-15);

        let pg = perturb_grammar(&g, &[("L1".to_string(), vec![0.0, 2f64.ln()])].into()).unwrap();
        // 0.8 : 0.4 renormalized.
        assert!((pg.rule(pg.rules_for(1)[0]).weight - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(pg.rule(pg.rules_for(0)[0]).weight, 0.7);

        let bad = |p: Perturbation| matches!(perturb_grammar(&g, &p), Err(LmError::InvalidPerturbation(_)));
        assert!(bad([("L9".to_string(), vec![0.0])].into()));
        assert!(bad([("L1".to_string(), vec![0.0])].into()));
        assert!(bad([("L1".to_string(), vec![0.0, f64::NAN])].into()));

        let r = random_perturbation(&g, &["L1"], 0.3, 4);
        assert_eq!(r["L1"].len(), 2);
        assert_eq!(r, random_perturbation(&g, &["L1"], 0.3, 4));
        assert!(synthetic_composed_lm(&g, &r).is_ok());
    }
}
