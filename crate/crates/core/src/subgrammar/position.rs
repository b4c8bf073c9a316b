use serde::{Deserialize, Serialize};

use super::{nt_id, SubgrammarError};
use crate::grammar::{is_marker, Grammar, Symbol};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Position {
    Prefix,
    Suffix,
    Infix,
    Mixed,
}

impl std::fmt::Display for Position {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Position::Prefix => "prefix",
            Position::Suffix => "suffix",
            Position::Infix => "infix",
            Position::Mixed => "mixed",
        })
    }
}

/// Where the spans of `root`'s subgrammar sit in sentences of `g`.
///
/// Marker terminals count as zero-width: they belong to the surrounding
/// overhead, not to the span. Only outermost occurrences of `root` (those in
/// rules of nonterminals outside its closure) are considered.
pub fn classify_position(g: &Grammar, root: &str) -> Result<Position, SubgrammarError> {
    let r = nt_id(g, root)?;
    let closure = g.reachable_from(r);
    if closure[g.start()] {
        return Err(SubgrammarError::NotProper(root.to_string()));
    }
    let n = g.nonterminals().len();
    let live: Vec<usize> = (0..g.rules().len())
        .filter(|&i| g.rule(i).weight > 0.0)
        .collect();
    let zero_width = |s: &Symbol, nts: &[bool]| match *s {
        Symbol::Terminal(t) => is_marker(g.terminal_name(t)),
        Symbol::Nonterminal(b) => nts[b],
    };

    // Some derivation of A yields only zero-width symbols (least fixpoint).
    let mut skippable = vec![false; n];
    // Every derivation of A does (greatest fixpoint).
    let mut only_skippable = vec![true; n];
    loop {
        let mut changed = false;
        for &i in &live {
            let rule = g.rule(i);
            if !skippable[rule.lhs] && rule.rhs.iter().all(|s| zero_width(s, &skippable)) {
                skippable[rule.lhs] = true;
                changed = true;
            }
            if only_skippable[rule.lhs] && !rule.rhs.iter().all(|s| zero_width(s, &only_skippable)) {
                only_skippable[rule.lhs] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    // Occurrence contexts, as (lhs, symbols before, symbols after).
    let mut occurrences: Vec<(usize, usize, usize)> = Vec::new();
    for &i in &live {
        for (k, s) in g.rule(i).rhs.iter().enumerate() {
            if matches!(s, Symbol::Nonterminal(_)) {
                occurrences.push((i, k, 0));
            }
        }
    }
    let before = |i: usize, k: usize, set: &[bool]| {
        g.rule(i).rhs[..k].iter().all(|s| zero_width(s, set))
    };
    let after = |i: usize, k: usize, set: &[bool]| {
        g.rule(i).rhs[k + 1..].iter().all(|s| zero_width(s, set))
    };
    let sym_at = |i: usize, k: usize| g.rule(i).rhs[k].nonterminal().unwrap();
    let reach = g.reachable_from(g.start());

    // can_start[A]: some occurrence of A begins at position 0 (least).
    // must_start[A]: every occurrence does (greatest, over reachable A).
    let fix = |edge_ok: &dyn Fn(usize, usize) -> bool, least: bool| {
        let mut v = vec![!least; n];
        v[g.start()] = true;
        loop {
            let mut changed = false;
            for b in 0..n {
                if b == g.start() || !reach[b] {
                    continue;
                }
                let ctx = occurrences
                    .iter()
                    .filter(|&&(i, k, _)| sym_at(i, k) == b && reach[g.rule(i).lhs]);
                let val = if least {
                    ctx.clone().any(|&(i, k, _)| v[g.rule(i).lhs] && edge_ok(i, k))
                } else {
                    ctx.clone().all(|&(i, k, _)| v[g.rule(i).lhs] && edge_ok(i, k))
                };
                if val != v[b] {
                    v[b] = val;
                    changed = true;
                }
            }
            if !changed {
                return v;
            }
        }
    };
    let can_start = fix(&|i, k| before(i, k, &skippable), true);
    let must_start = fix(&|i, k| before(i, k, &only_skippable), false);
    let can_end = fix(&|i, k| after(i, k, &skippable), true);
    let must_end = fix(&|i, k| after(i, k, &only_skippable), false);

    let entries: Vec<(usize, usize)> = occurrences
        .iter()
        .filter(|&&(i, k, _)| {
            sym_at(i, k) == r && reach[g.rule(i).lhs] && !closure[g.rule(i).lhs]
        })
        .map(|&(i, k, _)| (i, k))
        .collect();
    let lhs = |i: usize| g.rule(i).lhs;
    let all = |f: &dyn Fn(usize, usize) -> bool| entries.iter().all(|&(i, k)| f(i, k));
    let any = |f: &dyn Fn(usize, usize) -> bool| entries.iter().any(|&(i, k)| f(i, k));
    Ok(
        if all(&|i, k| must_start[lhs(i)] && before(i, k, &only_skippable)) {
            Position::Prefix
        } else if all(&|i, k| must_end[lhs(i)] && after(i, k, &only_skippable)) {
            Position::Suffix
        } else if !any(&|i, k| {
            (can_start[lhs(i)] && before(i, k, &skippable))
                || (can_end[lhs(i)] && after(i, k, &skippable))
        }) {
            Position::Infix
        } else {
            Position::Mixed
        },
    )
}
