//! Probabilistic Earley parsing with forward (prefix) probabilities.
//!
//! The grammar is first rewritten without ε-rules: each nonterminal `A` gets
//! a null probability `e_A = P(A ⇒* ε)` and a rule variant for every way of
//! dropping nullable symbols, weighted so that the rewritten grammar is the
//! original conditioned on a non-empty yield. Left-corner and unit-rule
//! chains are summed in closed form through `(I − P_L)⁻¹` and `(I − P_U)⁻¹`.
//! Forward and inner probabilities are rescaled at every scanned column so
//! long inputs never underflow; the log scale factors are the per-token
//! conditional log probabilities.

use std::collections::{BinaryHeap, HashMap};

use nalgebra::DMatrix;

use super::OracleError;
use crate::dist::TokenDistribution;
use crate::grammar::{Grammar, Symbol};

const NULL_ITERATIONS: usize = 100_000;
const MAX_NULLABLE_PER_RULE: usize = 16;

#[derive(Debug, Clone)]
struct CRule {
    lhs: usize,
    rhs: Vec<Symbol>,
    weight: f64,
}

impl CRule {
    fn is_unit(&self) -> bool {
        self.rhs.len() == 1 && matches!(self.rhs[0], Symbol::Nonterminal(_))
    }
}

/// An ε-free compiled grammar ready for chart parsing.
#[derive(Debug, Clone)]
pub(crate) struct Chart {
    n_terminals: usize,
    rules: Vec<CRule>,
    by_lhs: Vec<Vec<usize>>,
    /// `e_S`: probability of the empty sentence.
    null_start: f64,
    /// For each `Z`, the `(Y, R_L[Z][Y])` with positive entries.
    left_corner: Vec<Vec<(usize, f64)>>,
    /// For each completed `Y`, the `(Z, R_U[Z][Y])` with positive entries.
    unit_into: Vec<Vec<(usize, f64)>>,
}

/// Null probabilities by monotone fixed-point iteration from zero.
pub(crate) fn null_probabilities(g: &Grammar) -> Vec<f64> {
    let n = g.nonterminals().len();
    let mut e = vec![0.0; n];
    for _ in 0..NULL_ITERATIONS {
        let mut next = vec![0.0; n];
        for rule in g.rules() {
            let p: f64 = rule
                .rhs
                .iter()
                .map(|s| match *s {
                    Symbol::Terminal(_) => 0.0,
                    Symbol::Nonterminal(b) => e[b],
                })
                .product();
            next[rule.lhs] += rule.weight * p;
        }
        let delta = next
            .iter()
            .zip(&e)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        e = next;
        if delta <= 1e-17 {
            break;
        }
    }
    for x in &mut e {
        if *x > 1.0 - 1e-15 {
            *x = 1.0;
        }
    }
    e
}

fn closure(p: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>, OracleError> {
    let n = p.nrows();
    let inv = (DMatrix::identity(n, n) - p)
        .try_inverse()
        .ok_or_else(|| OracleError::Inconsistent(format!("{what} closure is singular")))?;
    if inv.iter().any(|&x| x < -1e-9 || !x.is_finite()) {
        return Err(OracleError::Inconsistent(format!(
            "{what} closure diverges (chain probability ≥ 1)"
        )));
    }
    Ok(inv)
}

impl Chart {
    pub(crate) fn new(g: &Grammar) -> Result<Chart, OracleError> {
        let n = g.nonterminals().len();
        let e = null_probabilities(g);
        let mut merged: HashMap<(usize, Vec<Symbol>), f64> = HashMap::new();
        let mut order: Vec<(usize, Vec<Symbol>)> = Vec::new();
        for (rid, rule) in g.rules().iter().enumerate() {
            if rule.weight == 0.0 || e[rule.lhs] >= 1.0 {
                continue;
            }
            let nullable: Vec<usize> = rule
                .rhs
                .iter()
                .enumerate()
                .filter(|(_, s)| matches!(s, Symbol::Nonterminal(b) if e[*b] > 0.0))
                .map(|(i, _)| i)
                .collect();
            if nullable.len() > MAX_NULLABLE_PER_RULE {
                return Err(OracleError::Unsupported(format!(
                    "rule {} has more than {MAX_NULLABLE_PER_RULE} nullable symbols",
                    g.rule_ref(rid)
                )));
            }
            for mask in 0u32..(1 << nullable.len()) {
                let mut w = rule.weight / (1.0 - e[rule.lhs]);
                let mut rhs = Vec::with_capacity(rule.rhs.len());
                let mut next_nullable = 0;
                for (i, s) in rule.rhs.iter().enumerate() {
                    if next_nullable < nullable.len() && nullable[next_nullable] == i {
                        let b = s.nonterminal().unwrap();
                        if mask & (1 << next_nullable) != 0 {
                            w *= e[b];
                        } else {
                            w *= 1.0 - e[b];
                            rhs.push(*s);
                        }
                        next_nullable += 1;
                    } else {
                        rhs.push(*s);
                    }
                }
                if rhs.is_empty() || w == 0.0 {
                    continue;
                }
                let key = (rule.lhs, rhs);
                match merged.get_mut(&key) {
                    Some(acc) => *acc += w,
                    None => {
                        merged.insert(key.clone(), w);
                        order.push(key);
                    }
                }
            }
        }
        let rules: Vec<CRule> = order
            .into_iter()
            .map(|key| {
                let weight = merged[&key];
                CRule {
                    lhs: key.0,
                    rhs: key.1,
                    weight,
                }
            })
            .collect();
        let mut by_lhs = vec![Vec::new(); n];
        let mut p_l = DMatrix::zeros(n, n);
        let mut p_u = DMatrix::zeros(n, n);
        for (id, r) in rules.iter().enumerate() {
            by_lhs[r.lhs].push(id);
            if let Symbol::Nonterminal(b) = r.rhs[0] {
                p_l[(r.lhs, b)] += r.weight;
                if r.rhs.len() == 1 {
                    p_u[(r.lhs, b)] += r.weight;
                }
            }
        }
        let r_l = closure(p_l, "left-corner")?;
        let r_u = closure(p_u, "unit-rule")?;
        let left_corner = (0..n)
            .map(|z| {
                (0..n)
                    .filter(|&y| r_l[(z, y)] > 0.0)
                    .map(|y| (y, r_l[(z, y)]))
                    .collect()
            })
            .collect();
        let unit_into = (0..n)
            .map(|y| {
                (0..n)
                    .filter(|&z| r_u[(z, y)] > 0.0)
                    .map(|z| (z, r_u[(z, y)]))
                    .collect()
            })
            .collect();
        Ok(Chart {
            n_terminals: g.terminals().len(),
            rules,
            by_lhs,
            null_start: e[g.start()],
            left_corner,
            unit_into,
        })
    }

    pub(crate) fn null_start(&self) -> f64 {
        self.null_start
    }
}

#[derive(Debug, Clone, Copy)]
struct Item {
    rule: u32,
    dot: u32,
    start: u32,
    alpha: f64,
    gamma: f64,
}

#[derive(Default)]
struct Column {
    items: Vec<Item>,
    index: HashMap<(u32, u32, u32), usize>,
    /// Items whose next symbol is the given nonterminal.
    waiting: HashMap<usize, Vec<usize>>,
}

impl Column {
    fn add(&mut self, rule: u32, dot: u32, start: u32, alpha: f64, gamma: f64) -> (usize, bool) {
        match self.index.get(&(rule, dot, start)) {
            Some(&i) => {
                self.items[i].alpha += alpha;
                self.items[i].gamma += gamma;
                (i, false)
            }
            None => {
                let i = self.items.len();
                self.items.push(Item {
                    rule,
                    dot,
                    start,
                    alpha,
                    gamma,
                });
                self.index.insert((rule, dot, start), i);
                (i, true)
            }
        }
    }
}

/// Everything one left-to-right pass over a token sequence yields.
#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    /// `log P(x_1..x_k ⋯)` for `k = 0..=n`; `-inf` once the prefix is
    /// impossible.
    pub prefix_logprobs: Vec<f64>,
    /// Next-token distributions after each live prefix (`k = 0..` up to the
    /// last possible prefix, at most `n + 1` entries).
    pub next: Vec<TokenDistribution>,
    /// `log P(x_1..x_n)` as a complete sentence.
    pub string_logprob: f64,
}

impl Analysis {
    /// `log P(x_{k+1} | x_1..x_k)` for each position, then the EOS term;
    /// `-inf` entries mark impossible continuations.
    pub fn conditional_logprobs(&self, tokens: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(tokens.len() + 1);
        for k in 0..=tokens.len() {
            let lp = match self.next.get(k) {
                None => f64::NEG_INFINITY,
                Some(d) if k == tokens.len() => d.eos().ln(),
                Some(d) => d.prob(tokens[k]).ln(),
            };
            out.push(lp);
        }
        out
    }
}

impl Chart {
    fn rhs(&self, rule: u32) -> &[Symbol] {
        if rule as usize == self.rules.len() {
            &[]
        } else {
            &self.rules[rule as usize].rhs
        }
    }

    fn next_symbol(&self, rule: u32, dot: u32, start_nt: usize) -> Option<Symbol> {
        if rule as usize == self.rules.len() {
            (dot == 0).then_some(Symbol::Nonterminal(start_nt))
        } else {
            self.rhs(rule).get(dot as usize).copied()
        }
    }

    pub(crate) fn analyze(&self, start: usize, tokens: &[usize], want_dists: bool) -> Analysis {
        let dummy = self.rules.len() as u32;
        let n = tokens.len();
        let e_s = self.null_start;
        let mut prefix_logprobs = Vec::with_capacity(n + 1);
        prefix_logprobs.push(0.0);
        let mut next = Vec::new();
        let empty_language = self.by_lhs[start].is_empty();

        let mut columns: Vec<Column> = Vec::with_capacity(n + 1);
        let mut col0 = Column::default();
        col0.add(dummy, 0, 0, 1.0, 1.0);
        columns.push(col0);
        let mut log_scale = 0.0;
        let mut alive = !empty_language;
        let mut string_logprob = f64::NEG_INFINITY;

        for k in 0..=n {
            if k > 0 {
                if !alive {
                    prefix_logprobs.push(f64::NEG_INFINITY);
                    continue;
                }
                let tok = tokens[k - 1];
                let prev = &columns[k - 1];
                let mut col = Column::default();
                let mut mass = 0.0;
                for it in &prev.items {
                    if self.next_symbol(it.rule, it.dot, start) == Some(Symbol::Terminal(tok)) {
                        col.add(it.rule, it.dot + 1, it.start, it.alpha, it.gamma);
                        mass += it.alpha;
                    }
                }
                if mass <= 0.0 || !mass.is_finite() {
                    alive = false;
                    prefix_logprobs.push(f64::NEG_INFINITY);
                    columns.push(Column::default());
                    continue;
                }
                for it in &mut col.items {
                    it.alpha /= mass;
                    it.gamma /= mass;
                }
                log_scale += mass.ln();
                prefix_logprobs.push((1.0 - e_s).ln() + log_scale);
                self.complete(&mut col, &columns, k, dummy);
                columns.push(col);
            } else if !alive {
                // Only the empty sentence (or nothing at all) is possible.
                if want_dists {
                    let mut probs = vec![0.0; self.n_terminals + 1];
                    probs[self.n_terminals] = e_s;
                    next.push(TokenDistribution::new(probs));
                }
                continue;
            }
            let col = &mut columns[k];
            self.predict(col, k, start, dummy);
            col.waiting.clear();
            for (i, it) in col.items.iter().enumerate() {
                if let Some(Symbol::Nonterminal(z)) = self.next_symbol(it.rule, it.dot, start) {
                    col.waiting.entry(z).or_default().push(i);
                }
            }
            let eos = col
                .index
                .get(&(dummy, 1, 0))
                .map_or(0.0, |&i| col.items[i].alpha);
            if want_dists || k == n {
                let mut probs = vec![0.0; self.n_terminals + 1];
                for it in &col.items {
                    if let Some(Symbol::Terminal(t)) = self.next_symbol(it.rule, it.dot, start) {
                        probs[t] += it.alpha;
                    }
                }
                probs[self.n_terminals] = eos;
                if k == 0 {
                    for p in &mut probs {
                        *p *= 1.0 - e_s;
                    }
                    probs[self.n_terminals] = e_s;
                }
                if want_dists {
                    next.push(TokenDistribution::new(probs));
                }
            }
            if k == n {
                string_logprob = if n == 0 {
                    e_s.ln()
                } else {
                    (1.0 - e_s).ln() + log_scale + eos.ln()
                };
            }
        }
        if n == 0 && empty_language {
            string_logprob = e_s.ln();
        }
        Analysis {
            prefix_logprobs,
            next,
            string_logprob,
        }
    }

    fn predict(&self, col: &mut Column, k: usize, start: usize, dummy: u32) {
        let n_nt = self.by_lhs.len();
        let mut src = vec![0.0; n_nt];
        let mut any = false;
        for it in &col.items {
            if it.dot > 0 || it.rule == dummy {
                if let Some(Symbol::Nonterminal(z)) = self.next_symbol(it.rule, it.dot, start) {
                    src[z] += it.alpha;
                    any = true;
                }
            }
        }
        if !any {
            return;
        }
        let mut pred = vec![0.0; n_nt];
        for (z, &s) in src.iter().enumerate() {
            if s > 0.0 {
                for &(y, r) in &self.left_corner[z] {
                    pred[y] += s * r;
                }
            }
        }
        for (y, &p) in pred.iter().enumerate() {
            if p > 0.0 {
                for &r in &self.by_lhs[y] {
                    let w = self.rules[r].weight;
                    col.add(r as u32, 0, k as u32, p * w, w);
                }
            }
        }
    }

    /// Completes every non-unit finished item of column `k`, latest start
    /// first, so each finished item's inner probability is final before it
    /// is propagated.
    fn complete(&self, col: &mut Column, columns: &[Column], k: usize, dummy: u32) {
        let mut heap: BinaryHeap<(u32, usize)> = BinaryHeap::new();
        let finished = |chart: &Chart, it: &Item| {
            it.rule != dummy
                && it.dot as usize == chart.rules[it.rule as usize].rhs.len()
                && !chart.rules[it.rule as usize].is_unit()
        };
        for (i, it) in col.items.iter().enumerate() {
            if finished(self, it) {
                heap.push((it.start, i));
            }
        }
        while let Some((j, ci)) = heap.pop() {
            let c = col.items[ci];
            let y = self.rules[c.rule as usize].lhs;
            let source = &columns[j as usize];
            debug_assert!((j as usize) < k);
            for &(z, ru) in &self.unit_into[y] {
                let Some(waiters) = source.waiting.get(&z) else {
                    continue;
                };
                for &wi in waiters {
                    let w = source.items[wi];
                    let (ni, fresh) = col.add(
                        w.rule,
                        w.dot + 1,
                        w.start,
                        w.alpha * ru * c.gamma,
                        w.gamma * ru * c.gamma,
                    );
                    if fresh && finished(self, &col.items[ni]) {
                        heap.push((w.start, ni));
                    }
                }
            }
        }
    }
}
