//! A span-based inside algorithm for sentence and prefix probabilities,
//! written independently of the chart parser so the two can check each
//! other.
//!
//! Spans are filled by increasing width. Derivations in which one child
//! covers the whole span and every sibling is empty form a cycle; those are
//! resolved with the fixed "unit" matrix `U`, and the prefix recursion with
//! the fixed left-corner matrix `L`, each by one linear solve per span or
//! position.

use nalgebra::{DMatrix, DVector, LU};

use crate::grammar::{Grammar, Symbol};

#[derive(Debug, Clone)]
pub struct InsideOracle {
    grammar: Grammar,
    null: Vec<f64>,
    unit: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    left: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

/// Least fixed point of `e(X) = Σ w Π e(child)`, terminals contributing 0.
fn null_probabilities(g: &Grammar) -> Vec<f64> {
    let mut e = vec![0.0; g.nonterminals().len()];
    for _ in 0..100_000 {
        let mut next = vec![0.0; e.len()];
        for r in g.rules() {
            next[r.lhs] += r.weight
                * r.rhs
                    .iter()
                    .map(|s| match s {
                        Symbol::Terminal(_) => 0.0,
                        Symbol::Nonterminal(y) => e[*y],
                    })
                    .product::<f64>();
        }
        let delta = next.iter().zip(&e).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        e = next;
        if delta < 1e-17 {
            break;
        }
    }
    e
}

impl InsideOracle {
    pub fn new(g: &Grammar) -> InsideOracle {
        let n = g.nonterminals().len();
        let null = null_probabilities(g);
        let mut unit = DMatrix::<f64>::identity(n, n);
        let mut left = DMatrix::<f64>::identity(n, n);
        for r in g.rules() {
            let nt_only = r.rhs.iter().all(|s| s.terminal().is_none());
            let mut before = 1.0;
            for (k, s) in r.rhs.iter().enumerate() {
                let Symbol::Nonterminal(y) = *s else { break };
                left[(r.lhs, y)] -= r.weight * before;
                if nt_only {
                    let others: f64 = r
                        .rhs
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != k)
                        .map(|(_, s)| match s {
                            Symbol::Nonterminal(z) => null[*z],
                            Symbol::Terminal(_) => 0.0,
                        })
                        .product();
                    unit[(r.lhs, y)] -= r.weight * others;
                }
                before *= null[y];
            }
        }
        InsideOracle {
            grammar: g.clone(),
            null,
            unit: unit.lu(),
            left: left.lu(),
        }
    }

    pub fn grammar(&self) -> &Grammar {
        &self.grammar
    }

    /// `P(X ⇒* x[i..j])` for every nonempty span, indexed `[i][j - i - 1][X]`.
    fn inside(&self, x: &[usize]) -> Vec<Vec<Vec<f64>>> {
        let n = x.len();
        let nts = self.grammar.nonterminals().len();
        let mut f: Vec<Vec<Vec<f64>>> = (0..n).map(|i| vec![Vec::new(); n - i]).collect();
        for width in 1..=n {
            for i in 0..=n - width {
                let j = i + width;
                let mut partial = vec![0.0; nts];
                for r in self.grammar.rules() {
                    let mut cur = vec![0.0; width + 1];
                    cur[0] = 1.0;
                    for s in &r.rhs {
                        let mut next = vec![0.0; width + 1];
                        for a in 0..=width {
                            if cur[a] == 0.0 {
                                continue;
                            }
                            for b in a..=width {
                                let v = self.symbol_inside(&f, x, *s, i + a, i + b, (i, j));
                                next[b] += cur[a] * v;
                            }
                        }
                        cur = next;
                    }
                    partial[r.lhs] += r.weight * cur[width];
                }
                let sol = self
                    .unit
                    .solve(&DVector::from_vec(partial))
                    .expect("unit closure is singular");
                f[i][width - 1] = sol.iter().copied().collect();
            }
        }
        f
    }

    /// Inside probability of one symbol over `[a, b)`; the span `skip` is
    /// treated as not yet known.
    fn symbol_inside(&self, f: &[Vec<Vec<f64>>], x: &[usize], s: Symbol, a: usize, b: usize, skip: (usize, usize)) -> f64 {
        match s {
            Symbol::Terminal(t) => {
                if b == a + 1 && x[a] == t {
                    1.0
                } else {
                    0.0
                }
            }
            Symbol::Nonterminal(y) => {
                if a == b {
                    self.null[y]
                } else if (a, b) == skip {
                    0.0
                } else {
                    f[a][b - a - 1][y]
                }
            }
        }
    }

    pub fn sentence_probability(&self, x: &[usize]) -> f64 {
        let s = self.grammar.start();
        if x.is_empty() {
            return self.null[s];
        }
        self.inside(x)[0][x.len() - 1][s]
    }

    /// Total probability of sentences that begin with `x`.
    pub fn prefix_probability(&self, x: &[usize]) -> f64 {
        let n = x.len();
        if n == 0 {
            return 1.0;
        }
        let f = self.inside(x);
        let nts = self.grammar.nonterminals().len();
        // pp[i][X]: X derives a string beginning with x[i..n].
        let mut pp = vec![vec![1.0; nts]; n + 1];
        for i in (0..n).rev() {
            let mut c = vec![0.0; nts];
            for r in self.grammar.rules() {
                // cur[m - i]: the symbols so far derive exactly x[i..m].
                let mut cur = vec![0.0; n - i + 1];
                cur[0] = 1.0;
                for s in &r.rhs {
                    for m in i..n {
                        let g = cur[m - i];
                        if g == 0.0 {
                            continue;
                        }
                        let cross = match *s {
                            Symbol::Terminal(t) => (m + 1 == n && x[m] == t) as u8 as f64,
                            Symbol::Nonterminal(_) if m == i => 0.0,
                            Symbol::Nonterminal(y) => pp[m][y],
                        };
                        c[r.lhs] += r.weight * g * cross;
                    }
                    let mut next = vec![0.0; n - i + 1];
                    for a in i..n {
                        if cur[a - i] == 0.0 {
                            continue;
                        }
                        for b in a..n {
                            next[b - i] += cur[a - i] * self.symbol_inside(&f, x, *s, a, b, (n, n));
                        }
                    }
                    cur = next;
                }
            }
            let sol = self
                .left
                .solve(&DVector::from_vec(c))
                .expect("left-corner closure is singular");
            pp[i] = sol.iter().copied().collect();
        }
        pp[0][self.grammar.start()]
    }
}
