//! Brute-force reference computations, independent of the chart parser.
//!
//! [`string_probabilities`] sums every derivation of bounded height whose
//! yield is short enough. [`prefix_bracket`] walks leftmost derivations
//! top-down and returns an interval guaranteed to contain the prefix
//! probability of a consistent grammar.

use std::collections::HashMap;

use crate::grammar::{Grammar, Rule, Symbol};

/// A grammar in which every "terminal class" (a nonterminal whose rules
/// each emit one terminal found nowhere else) is collapsed to a single
/// terminal `<X>`. Class members are exchangeable, so the probability of a
/// concrete string is the lumped probability times the member weights.
#[derive(Debug, Clone)]
pub struct Lumped {
    pub grammar: Grammar,
    /// Per terminal of `grammar`: the `(terminal of the original, weight)`
    /// members, or a single member of weight 1 for ordinary terminals.
    pub members: Vec<Vec<(usize, f64)>>,
}

impl Lumped {
    /// A concrete original-grammar string for a lumped string, choosing
    /// members by `pick(position, member count)`, with the weight factor.
    pub fn concretize(&self, s: &[usize], pick: impl Fn(usize, usize) -> usize) -> (Vec<usize>, f64) {
        let mut factor = 1.0;
        let tokens = s
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let m = &self.members[t];
                let (orig, w) = m[pick(i, m.len()) % m.len()];
                factor *= w;
                orig
            })
            .collect();
        (tokens, factor)
    }
}

pub fn lump(g: &Grammar) -> Lumped {
    let mut uses = vec![0usize; g.terminals().len()];
    for r in g.rules() {
        for s in &r.rhs {
            if let Symbol::Terminal(t) = *s {
                uses[t] += 1;
            }
        }
    }
    let is_class = |a: usize| {
        a != g.start()
            && g.rules_for(a).len() > 1
            && g.rules_for(a).iter().all(|&r| {
                let rhs = &g.rule(r).rhs;
                rhs.len() == 1 && matches!(rhs[0], Symbol::Terminal(t) if uses[t] == 1)
            })
    };
    let mut terminals = Vec::new();
    let mut members = Vec::new();
    let mut t_map = vec![usize::MAX; g.terminals().len()];
    let mut class_terminal = vec![None; g.nonterminals().len()];
    for a in 0..g.nonterminals().len() {
        if is_class(a) {
            class_terminal[a] = Some(terminals.len());
            terminals.push(format!("<{}>", g.nonterminal_name(a)));
            members.push(
                g.rules_for(a)
                    .iter()
                    .map(|&r| (g.rule(r).rhs[0].terminal().unwrap(), g.rule(r).weight))
                    .collect(),
            );
        }
    }
    for (t, name) in g.terminals().iter().enumerate() {
        let owned = g.rules().iter().any(|r| {
            class_terminal[r.lhs].is_some() && r.rhs.first() == Some(&Symbol::Terminal(t))
        });
        if !owned {
            t_map[t] = terminals.len();
            terminals.push(name.clone());
            members.push(vec![(t, 1.0)]);
        }
    }
    let mut rules = Vec::new();
    let mut done = vec![false; g.nonterminals().len()];
    for r in g.rules() {
        if let Some(ct) = class_terminal[r.lhs] {
            if !done[r.lhs] {
                done[r.lhs] = true;
                rules.push(Rule {
                    lhs: r.lhs,
                    rhs: vec![Symbol::Terminal(ct)],
                    weight: 1.0,
                });
            }
            continue;
        }
        rules.push(Rule {
            lhs: r.lhs,
            rhs: r
                .rhs
                .iter()
                .map(|s| match *s {
                    Symbol::Terminal(t) => Symbol::Terminal(t_map[t]),
                    n => n,
                })
                .collect(),
            weight: r.weight,
        });
    }
    let grammar = Grammar::new(
        format!("{}.lumped", g.name()),
        terminals,
        g.nonterminals().to_vec(),
        g.start(),
        rules,
    )
    .expect("lumping preserves structure");
    Lumped { grammar, members }
}

/// Minimal yield length of every nonterminal (`usize::MAX` if unproductive).
pub fn min_lengths(g: &Grammar) -> Vec<usize> {
    let n = g.nonterminals().len();
    let mut m = vec![usize::MAX; n];
    loop {
        let mut changed = false;
        for rule in g.rules() {
            let mut len = 0usize;
            for s in &rule.rhs {
                len = len.saturating_add(match *s {
                    Symbol::Terminal(_) => 1,
                    Symbol::Nonterminal(b) => m[b],
                });
            }
            if len < m[rule.lhs] {
                m[rule.lhs] = len;
                changed = true;
            }
        }
        if !changed {
            return m;
        }
    }
}

/// Minimal number of tokens surrounding any occurrence of each nonterminal
/// in a sentence.
fn min_context(g: &Grammar, min_len: &[usize]) -> Vec<usize> {
    let n = g.nonterminals().len();
    let mut ctx = vec![usize::MAX; n];
    ctx[g.start()] = 0;
    loop {
        let mut changed = false;
        for rule in g.rules() {
            if ctx[rule.lhs] == usize::MAX {
                continue;
            }
            let lens: Vec<usize> = rule
                .rhs
                .iter()
                .map(|s| match *s {
                    Symbol::Terminal(_) => 1,
                    Symbol::Nonterminal(b) => min_len[b],
                })
                .collect();
            let total = lens.iter().fold(0usize, |a, &b| a.saturating_add(b));
            for (i, s) in rule.rhs.iter().enumerate() {
                if let Symbol::Nonterminal(b) = *s {
                    let c = ctx[rule.lhs].saturating_add(total - lens[i]);
                    if c < ctx[b] {
                        ctx[b] = c;
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            return ctx;
        }
    }
}

/// `P(s)` restricted to derivations of height ≤ `max_depth`, for every
/// string `s` with `|s| ≤ max_len`. A node whose rule has no nonterminal on
/// its right-hand side has height 1.
pub fn string_probabilities(
    g: &Grammar,
    max_len: usize,
    max_depth: usize,
) -> HashMap<Vec<usize>, f64> {
    let n = g.nonterminals().len();
    let min_len = min_lengths(g);
    let ctx = min_context(g, &min_len);
    let cap: Vec<usize> = ctx.iter().map(|&c| max_len.saturating_sub(c)).collect();
    let live = |a: usize| ctx[a] <= max_len;
    let mut table: Vec<HashMap<Vec<usize>, f64>> = vec![HashMap::new(); n];
    for _ in 0..max_depth {
        let mut next: Vec<HashMap<Vec<usize>, f64>> = vec![HashMap::new(); n];
        for rule in g.rules() {
            let a = rule.lhs;
            if !live(a) || rule.weight == 0.0 {
                continue;
            }
            let mut partial: HashMap<Vec<usize>, f64> = HashMap::from([(Vec::new(), rule.weight)]);
            let rest_min: Vec<usize> = (0..rule.rhs.len())
                .map(|i| {
                    rule.rhs[i + 1..].iter().fold(0usize, |acc, s| {
                        acc.saturating_add(match *s {
                            Symbol::Terminal(_) => 1,
                            Symbol::Nonterminal(b) => min_len[b],
                        })
                    })
                })
                .collect();
            for (i, s) in rule.rhs.iter().enumerate() {
                let room = cap[a].saturating_sub(rest_min[i]);
                let mut grown = HashMap::new();
                match *s {
                    Symbol::Terminal(t) => {
                        for (mut k, p) in partial {
                            if k.len() < room {
                                k.push(t);
                                *grown.entry(k).or_insert(0.0) += p;
                            }
                        }
                    }
                    Symbol::Nonterminal(b) => {
                        for (k, p) in &partial {
                            for (sub, q) in &table[b] {
                                if k.len() + sub.len() <= room {
                                    let mut key = k.clone();
                                    key.extend_from_slice(sub);
                                    *grown.entry(key).or_insert(0.0) += p * q;
                                }
                            }
                        }
                    }
                }
                partial = grown;
                if partial.is_empty() {
                    break;
                }
            }
            for (k, p) in partial {
                *next[a].entry(k).or_insert(0.0) += p;
            }
        }
        table = next;
    }
    std::mem::take(&mut table[g.start()])
}

/// Interval `[lower, upper]` containing the prefix probability of `prefix`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bracket {
    pub lower: f64,
    pub upper: f64,
}

impl Bracket {
    pub fn contains(&self, x: f64, slack: f64) -> bool {
        self.lower - slack <= x && x <= self.upper + slack
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Explores leftmost derivations, matching terminals against `prefix` as
/// soon as they reach the front. A partial derivation that has matched the
/// whole prefix contributes its full probability (its completions sum to
/// one in a consistent grammar); branches whose probability falls below
/// `threshold` are abandoned and their mass added to the upper bound.
///
/// If `sentence` is set, only derivations of exactly `prefix` count, which
/// brackets the sentence probability instead.
pub fn bracket(g: &Grammar, prefix: &[usize], threshold: f64, sentence: bool) -> Bracket {
    let mut lower = 0.0;
    let mut pruned = 0.0;
    // (matched, remaining symbols with the front at the end, probability)
    let mut stack: Vec<(usize, Vec<Symbol>, f64)> =
        vec![(0, vec![Symbol::Nonterminal(g.start())], 1.0)];
    while let Some((pos, mut rest, p)) = stack.pop() {
        if pos == prefix.len() && !sentence {
            lower += p;
            continue;
        }
        match rest.pop() {
            None => {
                if pos == prefix.len() {
                    lower += p;
                }
            }
            Some(Symbol::Terminal(t)) => {
                if pos < prefix.len() && prefix[pos] == t {
                    stack.push((pos + 1, rest, p));
                }
            }
            Some(Symbol::Nonterminal(a)) => {
                for &r in g.rules_for(a) {
                    let rule = g.rule(r);
                    let q = p * rule.weight;
                    if q == 0.0 {
                        continue;
                    }
                    let terminals_needed = rule.terminal_count()
                        + rest.iter().filter(|s| s.terminal().is_some()).count();
                    if sentence && pos + terminals_needed > prefix.len() {
                        continue;
                    }
                    let mut next = rest.clone();
                    next.extend(rule.rhs.iter().rev());
                    // Terminals now at the front must agree with the prefix.
                    let clash = next
                        .iter()
                        .rev()
                        .map_while(|s| s.terminal())
                        .enumerate()
                        .any(|(k, t)| pos + k < prefix.len() && prefix[pos + k] != t);
                    if clash {
                        continue;
                    }
                    if q < threshold {
                        pruned += q;
                        continue;
                    }
                    stack.push((pos, next, q));
                }
            }
        }
    }
    Bracket {
        lower,
        upper: lower + pruned,
    }
}

pub fn prefix_bracket(g: &Grammar, prefix: &[usize], threshold: f64) -> Bracket {
    bracket(g, prefix, threshold, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundled;
    use crate::grammar::parse_grammar;

    #[test]
    fn l2_2_strings() {
        let g = parse_grammar("start: L2_2\nL2_2 -> \"a\" L2_2 \"b\" [0.6] | \"c\" [0.4]").unwrap();
        let table = string_probabilities(&g, 5, 14);
        assert_eq!(table.len(), 3);
        let acb = g.encode_str("a c b").unwrap();
        assert!((table[&acb] - 0.24).abs() < 1e-15);
    }

    #[test]
    fn depth_limits_recursion() {
        let g = parse_grammar("start: S\nS -> S [0.5] | \"a\" [0.5]").unwrap();
        let a = g.encode_str("a").unwrap();
        // Σ_{k<3} 0.5^{k+1}
        assert!((string_probabilities(&g, 1, 3)[&a] - 0.875).abs() < 1e-15);
    }

    #[test]
    fn lumping_is_exact() {
        let g = bundled::load("kl_example_2").unwrap();
        let l = lump(&g);
        assert!(l.grammar.terminal_id("<NUM>").is_some());
        let full = string_probabilities(&g, 4, 14);
        let small = string_probabilities(&l.grammar, 4, 14);
        assert!(small.len() < full.len());
        for (s, p) in &small {
            for k in 0..6 {
                let (t, f) = l.concretize(s, |i, _| i + k);
                assert!((full[&t] - p * f).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn bracket_contains_known_prefix() {
        let np = bundled::nested_parens();
        let u = np.encode_str("( a").unwrap();
        let b = prefix_bracket(&np, &u, 1e-12);
        assert!(b.contains(0.2, 0.0), "{b:?}");
        assert!(b.width() < 1e-9);
    }

    #[test]
    fn sentence_bracket() {
        let np = bundled::nested_parens();
        let s = np.encode_str("( a ) ( a )").unwrap();
        let b = bracket(&np, &s, 1e-14, true);
        let exact = 0.3 * (0.7f64 * 0.2).powi(2);
        assert!(b.contains(exact, 1e-15), "{b:?}");
    }
}
