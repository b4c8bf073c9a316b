//! Exact quantities of a PCFG: string, prefix and next-token probabilities,
//! membership, entropy and first moments.

mod earley;
pub mod enumerate;
pub mod inside;
mod entropy;

pub use earley::Analysis;
pub use entropy::{
    derivational_entropy, expected_length, expected_recursion, EntropyReport, RecursionStats,
};

use thiserror::Error;

use crate::dist::TokenDistribution;
use crate::grammar::Grammar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("unknown terminal `{0}`")]
    UnknownTerminal(String),
    #[error("terminal id {0} is out of range")]
    TerminalOutOfRange(usize),
    #[error("prefix `{0}` has probability zero")]
    ImpossiblePrefix(String),
    #[error("unknown nonterminal `{0}`")]
    UnknownNonterminal(String),
    #[error("inconsistent grammar: {0}")]
    Inconsistent(String),
    #[error("unsupported grammar: {0}")]
    Unsupported(String),
}

/// A grammar compiled for chart parsing. Cheap to share across threads.
#[derive(Debug, Clone)]
pub struct Oracle {
    grammar: Grammar,
    chart: earley::Chart,
}

impl Oracle {
    pub fn new(g: &Grammar) -> Result<Oracle, OracleError> {
        Ok(Oracle {
            grammar: g.clone(),
            chart: earley::Chart::new(g)?,
        })
    }

    pub fn grammar(&self) -> &Grammar {
        &self.grammar
    }

    /// Size of the next-token alphabet (terminals plus EOS).
    pub fn alphabet_size(&self) -> usize {
        self.grammar.terminals().len() + 1
    }

    /// Probability of the empty sentence.
    pub fn empty_probability(&self) -> f64 {
        self.chart.null_start()
    }

    fn check(&self, tokens: &[usize]) -> Result<(), OracleError> {
        match tokens.iter().find(|&&t| t >= self.grammar.terminals().len()) {
            Some(&t) => Err(OracleError::TerminalOutOfRange(t)),
            None => Ok(()),
        }
    }

    /// One chart pass: prefix probabilities for every prefix, the
    /// next-token distribution after every live prefix and the sentence
    /// probability.
    pub fn analyze(&self, tokens: &[usize]) -> Result<Analysis, OracleError> {
        self.check(tokens)?;
        Ok(self.chart.analyze(self.grammar.start(), tokens, true))
    }

    pub fn string_logprob(&self, tokens: &[usize]) -> Result<f64, OracleError> {
        self.check(tokens)?;
        Ok(self.chart.analyze(self.grammar.start(), tokens, false).string_logprob)
    }

    pub fn prefix_logprob(&self, prefix: &[usize]) -> Result<f64, OracleError> {
        self.check(prefix)?;
        let a = self.chart.analyze(self.grammar.start(), prefix, false);
        Ok(*a.prefix_logprobs.last().unwrap())
    }

    pub fn next_token_dist(&self, prefix: &[usize]) -> Result<TokenDistribution, OracleError> {
        self.check(prefix)?;
        let mut a = self.chart.analyze(self.grammar.start(), prefix, true);
        if a.next.len() <= prefix.len() {
            return Err(OracleError::ImpossiblePrefix(self.grammar.render(prefix)));
        }
        Ok(a.next.swap_remove(prefix.len()))
    }

    pub fn recognize(&self, tokens: &[usize]) -> Result<bool, OracleError> {
        Ok(self.string_logprob(tokens)? > f64::NEG_INFINITY)
    }

    fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>, OracleError> {
        tokens
            .iter()
            .map(|t| {
                self.grammar
                    .terminal_id(t.as_ref())
                    .ok_or_else(|| OracleError::UnknownTerminal(t.as_ref().to_string()))
            })
            .collect()
    }
}

pub fn string_logprob<S: AsRef<str>>(g: &Grammar, tokens: &[S]) -> Result<f64, OracleError> {
    let o = Oracle::new(g)?;
    o.string_logprob(&o.encode(tokens)?)
}

pub fn prefix_logprob<S: AsRef<str>>(g: &Grammar, prefix: &[S]) -> Result<f64, OracleError> {
    let o = Oracle::new(g)?;
    o.prefix_logprob(&o.encode(prefix)?)
}

pub fn next_token_dist<S: AsRef<str>>(
    g: &Grammar,
    prefix: &[S],
) -> Result<TokenDistribution, OracleError> {
    let o = Oracle::new(g)?;
    o.next_token_dist(&o.encode(prefix)?)
}

pub fn recognize<S: AsRef<str>>(g: &Grammar, tokens: &[S]) -> Result<bool, OracleError> {
    let o = Oracle::new(g)?;
    o.recognize(&o.encode(tokens)?)
}
