//! Inner and outer subgrammars, the subgrammar DAG and the top-level split.

mod dag;
mod position;

pub use dag::{decompose_dag, DagNode, SubgrammarDag};
pub use position::{classify_position, Position};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{is_marker, Grammar, GrammarError, Rule, Symbol};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SubgrammarError {
    #[error("unknown nonterminal `{0}`")]
    UnknownNonterminal(String),
    #[error("invalid cover: `{0}` is reachable through kept rules but has no kept rule with positive weight")]
    InvalidCover(String),
    #[error("kept rule id {0} is out of range")]
    BadRule(usize),
    #[error("`{0}` does not label a proper inner subgrammar")]
    NotProper(String),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
}

fn nt_id(g: &Grammar, name: &str) -> Result<usize, SubgrammarError> {
    g.nonterminal_id(name)
        .ok_or_else(|| SubgrammarError::UnknownNonterminal(name.to_string()))
}

/// Builds the grammar over the nonterminals in `keep_nt` using `rules`
/// (`(original rule id, new weight)`), preserving declaration order of both
/// symbol kinds and dropping terminals that no longer occur.
fn restrict(
    g: &Grammar,
    name: String,
    keep_nt: &[bool],
    rules: &[(usize, f64)],
    start: usize,
) -> Result<Grammar, GrammarError> {
    let mut nt_map = vec![usize::MAX; keep_nt.len()];
    let mut nonterminals = Vec::new();
    for (i, &k) in keep_nt.iter().enumerate() {
        if k {
            nt_map[i] = nonterminals.len();
            nonterminals.push(g.nonterminals()[i].clone());
        }
    }
    let mut used_t = vec![false; g.terminals().len()];
    for &(r, _) in rules {
        for s in &g.rule(r).rhs {
            if let Symbol::Terminal(t) = *s {
                used_t[t] = true;
            }
        }
    }
    let mut t_map = vec![usize::MAX; used_t.len()];
    let mut terminals = Vec::new();
    for (i, &u) in used_t.iter().enumerate() {
        if u {
            t_map[i] = terminals.len();
            terminals.push(g.terminals()[i].clone());
        }
    }
    let mut sorted = rules.to_vec();
    sorted.sort_by_key(|&(r, _)| r);
    let new_rules = sorted
        .iter()
        .map(|&(r, w)| {
            let rule = g.rule(r);
            Rule {
                lhs: nt_map[rule.lhs],
                rhs: rule
                    .rhs
                    .iter()
                    .map(|s| match *s {
                        Symbol::Terminal(t) => Symbol::Terminal(t_map[t]),
                        Symbol::Nonterminal(n) => Symbol::Nonterminal(nt_map[n]),
                    })
                    .collect(),
                weight: w,
            }
        })
        .collect();
    Grammar::new(name, terminals, nonterminals, nt_map[start], new_rules)
}

/// The grammar generated by the rule closure of `root`, with `root` as
/// start. Weights are kept as they are: closure retains every rule of each
/// kept nonterminal, so the per-nonterminal sums are unchanged.
pub fn inner_subgrammar(g: &Grammar, root: &str) -> Result<Grammar, SubgrammarError> {
    let r = nt_id(g, root)?;
    let keep = g.reachable_from(r);
    let rules: Vec<(usize, f64)> = (0..g.rules().len())
        .filter(|&i| keep[g.rule(i).lhs])
        .map(|i| (i, g.rule(i).weight))
        .collect();
    let name = if r == g.start() {
        g.name().to_string()
    } else {
        format!("{}.{}", g.name(), root)
    };
    Ok(restrict(g, name, &keep, &rules, r)?)
}

/// The restriction of `g` to the rule ids in `keep`, renormalized per
/// nonterminal. Nonterminals not reachable from the start through kept rules
/// are dropped.
pub fn outer_subgrammar(g: &Grammar, keep: &[usize]) -> Result<Grammar, SubgrammarError> {
    let mut kept = vec![false; g.rules().len()];
    for &r in keep {
        *kept.get_mut(r).ok_or(SubgrammarError::BadRule(r))? = true;
    }
    let n = g.nonterminals().len();
    let mut reach = vec![false; n];
    let mut stack = vec![g.start()];
    reach[g.start()] = true;
    while let Some(a) = stack.pop() {
        for &r in g.rules_for(a) {
            if kept[r] && g.rule(r).weight > 0.0 {
                for b in g.rule(r).nonterminals() {
                    if !reach[b] {
                        reach[b] = true;
                        stack.push(b);
                    }
                }
            }
        }
    }
    let mut rules = Vec::new();
    for a in (0..n).filter(|&a| reach[a]) {
        let ids: Vec<usize> = g
            .rules_for(a)
            .iter()
            .copied()
            .filter(|&r| kept[r] && g.rule(r).weight > 0.0)
            .collect();
        let total: f64 = ids.iter().map(|&r| g.rule(r).weight).sum();
        if ids.is_empty() {
            return Err(SubgrammarError::InvalidCover(g.nonterminals()[a].clone()));
        }
        // Untouched nonterminals keep their weights bit for bit.
        let dropped = ids.len() < g.rules_for(a).len();
        rules.extend(
            ids.into_iter()
                .map(|r| (r, if dropped { g.rule(r).weight / total } else { g.rule(r).weight })),
        );
    }
    let name = format!("{}.outer", g.name());
    Ok(restrict(g, name, &reach, &rules, g.start())?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopLevelEntry {
    pub root: String,
    pub nonterminal: usize,
    /// Probability that the chosen start rule contains `root` at least once.
    pub occurrence_prob: f64,
    /// Expected number of occurrences of `root` in the chosen start rule.
    pub expected_count: f64,
    /// False for the start symbol itself (or anything in its component).
    pub proper: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopLevelSplit {
    /// One entry per distinct nonterminal on start-rule right-hand sides, in
    /// first-appearance order.
    pub subgrammars: Vec<TopLevelEntry>,
    /// Maximal terminal runs of the start rules, space-joined, deduplicated,
    /// in first-appearance order.
    pub overhead: Vec<String>,
}

impl TopLevelSplit {
    pub fn entry(&self, root: &str) -> Option<&TopLevelEntry> {
        self.subgrammars.iter().find(|e| e.root == root)
    }

    /// Overhead runs made up entirely of marker terminals.
    pub fn marker_only(&self) -> bool {
        self.overhead
            .iter()
            .all(|run| run.split(' ').all(is_marker))
    }
}

pub fn top_level(g: &Grammar) -> TopLevelSplit {
    let s = g.start();
    let start_component = {
        let from_s = g.reachable_from(s);
        (0..g.nonterminals().len())
            .map(|b| from_s[b] && g.reachable_from(b)[s])
            .collect::<Vec<_>>()
    };
    let mut subgrammars: Vec<TopLevelEntry> = Vec::new();
    let mut overhead: Vec<String> = Vec::new();
    for &r in g.rules_for(s) {
        let rule = g.rule(r);
        let mut run: Vec<&str> = Vec::new();
        let mut seen_here: Vec<usize> = Vec::new();
        let flush = |run: &mut Vec<&str>, overhead: &mut Vec<String>| {
            if !run.is_empty() {
                let joined = run.join(" ");
                if !overhead.contains(&joined) {
                    overhead.push(joined);
                }
                run.clear();
            }
        };
        for sym in &rule.rhs {
            match *sym {
                Symbol::Terminal(t) => run.push(g.terminal_name(t)),
                Symbol::Nonterminal(b) => {
                    flush(&mut run, &mut overhead);
                    let idx = match subgrammars.iter().position(|e| e.nonterminal == b) {
                        Some(i) => i,
                        None => {
                            subgrammars.push(TopLevelEntry {
                                root: g.nonterminal_name(b).to_string(),
                                nonterminal: b,
                                occurrence_prob: 0.0,
                                expected_count: 0.0,
                                proper: !start_component[b],
                            });
                            subgrammars.len() - 1
                        }
                    };
                    subgrammars[idx].expected_count += rule.weight;
                    if !seen_here.contains(&b) {
                        seen_here.push(b);
                        subgrammars[idx].occurrence_prob += rule.weight;
                    }
                }
            }
        }
        flush(&mut run, &mut overhead);
    }
    TopLevelSplit {
        subgrammars,
        overhead,
    }
}
