//! Probabilistic context-free grammars: representation, the text format,
//! validation and the first-moment (mean) matrix.

mod parse;
mod validate;

use std::collections::HashMap;
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use parse::{parse_grammar, parse_grammar_strict};
pub use validate::{
    spectral_radius, validate, ValidationReport, POWER_ITERATION_CAP, POWER_ITERATION_TOL,
};
pub(crate) use validate::components;

/// Per-nonterminal weight sums must equal one within this tolerance.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

/// Sums that deviate from one by less than this are renormalized at load.
pub const RENORMALIZE_WINDOW: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GrammarError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("undeclared symbol `{name}` at line {line}, column {column}")]
    UndeclaredSymbol {
        name: String,
        line: usize,
        column: usize,
    },
    #[error("duplicate start declaration at line {line}")]
    DuplicateStart { line: usize },
    #[error("missing `start:` declaration")]
    MissingStart,
    #[error("start symbol `{0}` has no rules")]
    UnknownStart(String),
    #[error("symbol `{0}` is declared both as a terminal and a nonterminal")]
    Overlap(String),
    #[error("nonterminal `{0}` has no rules")]
    NoRules(String),
    #[error("rule weight {weight} for `{lhs}` is not a probability")]
    InvalidWeight { lhs: String, weight: f64 },
    #[error("weights of `{lhs}` sum to {sum}, not 1")]
    WeightSum { lhs: String, sum: f64 },
    #[error("unknown nonterminal `{0}`")]
    UnknownNonterminal(String),
    #[error("unknown terminal `{0}`")]
    UnknownTerminal(String),
    #[error("invalid rule reference `{0}` (expected NAME#INDEX)")]
    BadRuleRef(String),
}

/// A right-hand-side symbol, indexing into the grammar's terminal or
/// nonterminal table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Symbol {
    Terminal(usize),
    Nonterminal(usize),
}

impl Symbol {
    pub fn nonterminal(self) -> Option<usize> {
        match self {
            Symbol::Nonterminal(n) => Some(n),
            Symbol::Terminal(_) => None,
        }
    }

    pub fn terminal(self) -> Option<usize> {
        match self {
            Symbol::Terminal(t) => Some(t),
            Symbol::Nonterminal(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub lhs: usize,
    /// Empty for an ε-rule.
    pub rhs: Vec<Symbol>,
    pub weight: f64,
}

impl Rule {
    pub fn nonterminals(&self) -> impl Iterator<Item = usize> + '_ {
        self.rhs.iter().filter_map(|s| s.nonterminal())
    }

    pub fn terminal_count(&self) -> usize {
        self.rhs.iter().filter(|s| s.terminal().is_some()).count()
    }

    pub fn count_of(&self, nt: usize) -> usize {
        self.nonterminals().filter(|&n| n == nt).count()
    }
}

/// A PCFG `(Σ, N, S, P, W)`. Immutable once built; all indices are stable.
#[derive(Debug, Clone)]
pub struct Grammar {
    name: String,
    terminals: Vec<String>,
    nonterminals: Vec<String>,
    start: usize,
    rules: Vec<Rule>,
    by_lhs: Vec<Vec<usize>>,
    terminal_ids: HashMap<String, usize>,
    nonterminal_ids: HashMap<String, usize>,
}

impl PartialEq for Grammar {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.terminals == other.terminals
            && self.nonterminals == other.nonterminals
            && self.start == other.start
            && self.rules == other.rules
    }
}

impl Grammar {
    /// Builds a grammar, checking the structural invariants. Weight sums are
    /// not enforced here; [`validate`] reports them.
    pub fn new(
        name: impl Into<String>,
        terminals: Vec<String>,
        nonterminals: Vec<String>,
        start: usize,
        rules: Vec<Rule>,
    ) -> Result<Self, GrammarError> {
        let terminal_ids: HashMap<String, usize> = terminals
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        let nonterminal_ids: HashMap<String, usize> = nonterminals
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        if let Some(t) = terminals.iter().find(|t| nonterminal_ids.contains_key(*t)) {
            return Err(GrammarError::Overlap(t.clone()));
        }
        if start >= nonterminals.len() {
            return Err(GrammarError::MissingStart);
        }
        let mut by_lhs = vec![Vec::new(); nonterminals.len()];
        for (id, rule) in rules.iter().enumerate() {
            if !(0.0..=1.0).contains(&rule.weight) || !rule.weight.is_finite() {
                return Err(GrammarError::InvalidWeight {
                    lhs: nonterminals[rule.lhs].clone(),
                    weight: rule.weight,
                });
            }
            for sym in &rule.rhs {
                let ok = match *sym {
                    Symbol::Terminal(t) => t < terminals.len(),
                    Symbol::Nonterminal(n) => n < nonterminals.len(),
                };
                if !ok {
                    return Err(GrammarError::UndeclaredSymbol {
                        name: format!("{sym:?}"),
                        line: 0,
                        column: 0,
                    });
                }
            }
            by_lhs[rule.lhs].push(id);
        }
        if let Some(n) = by_lhs.iter().position(|r| r.is_empty()) {
            return Err(GrammarError::NoRules(nonterminals[n].clone()));
        }
        Ok(Grammar {
            name: name.into(),
            terminals,
            nonterminals,
            start,
            rules,
            by_lhs,
            terminal_ids,
            nonterminal_ids,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn terminals(&self) -> &[String] {
        &self.terminals
    }

    pub fn nonterminals(&self) -> &[String] {
        &self.nonterminals
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn start_name(&self) -> &str {
        &self.nonterminals[self.start]
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn rule(&self, id: usize) -> &Rule {
        &self.rules[id]
    }

    /// Rule ids whose left-hand side is `nt`, in declaration order.
    pub fn rules_for(&self, nt: usize) -> &[usize] {
        &self.by_lhs[nt]
    }

    pub fn terminal_id(&self, name: &str) -> Option<usize> {
        self.terminal_ids.get(name).copied()
    }

    pub fn nonterminal_id(&self, name: &str) -> Option<usize> {
        self.nonterminal_ids.get(name).copied()
    }

    pub fn terminal_name(&self, t: usize) -> &str {
        &self.terminals[t]
    }

    pub fn nonterminal_name(&self, n: usize) -> &str {
        &self.nonterminals[n]
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Maps whitespace-free terminal names to ids.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>, GrammarError> {
        tokens
            .iter()
            .map(|t| {
                self.terminal_id(t.as_ref())
                    .ok_or_else(|| GrammarError::UnknownTerminal(t.as_ref().to_string()))
            })
            .collect()
    }

    /// Splits on whitespace and encodes.
    pub fn encode_str(&self, text: &str) -> Result<Vec<usize>, GrammarError> {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        self.encode(&tokens)
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&t| self.terminals[t].clone()).collect()
    }

    /// Space-joined rendering of a token sequence.
    pub fn render(&self, ids: &[usize]) -> String {
        self.decode(ids).join(" ")
    }

    /// The k-th alternative of `lhs`, written `LHS#k`.
    pub fn rule_ref(&self, rule: usize) -> String {
        let lhs = self.rules[rule].lhs;
        let k = self.by_lhs[lhs].iter().position(|&r| r == rule).unwrap();
        format!("{}#{}", self.nonterminals[lhs], k)
    }

    pub fn resolve_rule_ref(&self, text: &str) -> Result<usize, GrammarError> {
        let bad = || GrammarError::BadRuleRef(text.to_string());
        let (name, k) = text.trim().rsplit_once('#').ok_or_else(bad)?;
        let k: usize = k.parse().map_err(|_| bad())?;
        let nt = self
            .nonterminal_id(name)
            .ok_or_else(|| GrammarError::UnknownNonterminal(name.to_string()))?;
        self.by_lhs[nt].get(k).copied().ok_or_else(bad)
    }

    /// Sum of rule weights per nonterminal.
    pub fn weight_sums(&self) -> Vec<f64> {
        self.by_lhs
            .iter()
            .map(|ids| ids.iter().map(|&r| self.rules[r].weight).sum())
            .collect()
    }

    /// Fails on the first nonterminal whose weights do not sum to one.
    pub fn check_weight_sums(&self) -> Result<(), GrammarError> {
        for (nt, sum) in self.weight_sums().into_iter().enumerate() {
            if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
                return Err(GrammarError::WeightSum {
                    lhs: self.nonterminals[nt].clone(),
                    sum,
                });
            }
        }
        Ok(())
    }

    /// Returns a copy with the weights of every rule replaced.
    pub fn with_weights(&self, weights: &[f64]) -> Result<Grammar, GrammarError> {
        assert_eq!(weights.len(), self.rules.len());
        let rules = self
            .rules
            .iter()
            .zip(weights)
            .map(|(r, &w)| Rule {
                weight: w,
                ..r.clone()
            })
            .collect();
        Grammar::new(
            self.name.clone(),
            self.terminals.clone(),
            self.nonterminals.clone(),
            self.start,
            rules,
        )
    }

    /// `M[A][B] = Σ_{A→α} W(A→α) · #B(α)`.
    pub fn mean_matrix(&self) -> DMatrix<f64> {
        let n = self.nonterminals.len();
        let mut m = DMatrix::zeros(n, n);
        for rule in &self.rules {
            for b in rule.nonterminals() {
                m[(rule.lhs, b)] += rule.weight;
            }
        }
        m
    }

    /// Expected number of terminals emitted directly by one expansion of
    /// each nonterminal.
    pub fn local_terminal_counts(&self) -> Vec<f64> {
        let mut t = vec![0.0; self.nonterminals.len()];
        for rule in &self.rules {
            t[rule.lhs] += rule.weight * rule.terminal_count() as f64;
        }
        t
    }

    /// Nonterminals reachable from `root` (including it), as a membership mask.
    pub fn reachable_from(&self, root: usize) -> Vec<bool> {
        let mut seen = vec![false; self.nonterminals.len()];
        let mut stack = vec![root];
        seen[root] = true;
        while let Some(a) = stack.pop() {
            for &r in &self.by_lhs[a] {
                for b in self.rules[r].nonterminals() {
                    if !seen[b] {
                        seen[b] = true;
                        stack.push(b);
                    }
                }
            }
        }
        seen
    }
}

impl fmt::Display for Grammar {
    /// The canonical text form: `name:` and `start:` headers, then one rule
    /// group per nonterminal in declaration order, weights to 6 decimals.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "name: {}", self.name)?;
        writeln!(f, "start: {}", self.nonterminals[self.start])?;
        for (nt, ids) in self.by_lhs.iter().enumerate() {
            write!(f, "{} ->", self.nonterminals[nt])?;
            for (i, &r) in ids.iter().enumerate() {
                if i > 0 {
                    write!(f, " |")?;
                }
                let rule = &self.rules[r];
                if rule.rhs.is_empty() {
                    write!(f, " \"\"")?;
                }
                for sym in &rule.rhs {
                    match *sym {
                        Symbol::Terminal(t) => write!(f, " {}", quote(&self.terminals[t]))?,
                        Symbol::Nonterminal(n) => write!(f, " {}", self.nonterminals[n])?,
                    }
                }
                write!(f, " [{:.6}]", rule.weight)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        if c == '"' || c == '\\' {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('"');
    out
}

/// Marker terminals such as `sL2_1` / `eL2_1` / `sSUBJ` delimit subgrammar
/// spans in the bundled grammars: an `s` or `e` followed by an uppercase
/// letter.
pub fn is_marker(terminal: &str) -> bool {
    let mut chars = terminal.chars();
    matches!(chars.next(), Some('s') | Some('e'))
        && chars.next().is_some_and(|c| c.is_ascii_uppercase())
}
