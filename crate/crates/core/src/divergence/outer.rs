//! The three-term split of KL across an outer subgrammar `A` and its
//! complement, for a model that is itself a PCFG over the same rules.
//!
//! With `l_r = log(w_P(r) / w_Q(r))` a derivation's log ratio is the sum of
//! `l_r` over its rules, so every quantity is a sum over derivations of
//! `P(d)` times 1 or `l(d)`. The left side comes from one linear solve. The
//! right side comes from a truncated dynamic program over derivation size in
//! the semiring of pairs `(p, s)` with product `(p₁p₂, p₁s₂ + s₁p₂)`, which
//! carries a mass and a first moment together.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grammar::Grammar;
use crate::oracle::Oracle;
use crate::sampler::{SampleLimits, Sampler};
use crate::subgrammar::outer_subgrammar;

use super::DivergenceError;

pub const TAIL_BUDGET: f64 = 1e-6;
const MAX_CAP: usize = 16_384;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterReport {
    pub grammar: String,
    pub kept_rules: Vec<String>,
    /// `KL(P ‖ Q)` from the moment equations.
    pub lhs: f64,
    pub p_a: f64,
    pub p_not_a: f64,
    pub q_a: f64,
    pub q_not_a: f64,
    /// `KL(P_A ‖ Q|_A)`.
    pub kl_a: f64,
    pub kl_not_a: f64,
    /// KL between the Bernoulli variables "the derivation lies in A".
    pub kl_star: f64,
    /// `P(A)·kl_a + P(Ā)·kl_not_a + kl_star`.
    pub rhs: f64,
    pub residual: f64,
    /// Bound on what the size cap leaves out.
    pub tail_bound: f64,
    pub size_cap: usize,
    /// Sampled sentences on which string and derivation log ratios, and
    /// membership in `A`, were checked.
    pub checked_samples: usize,
    pub holds: bool,
}

#[derive(Clone, Copy, Default, Debug)]
struct Dual {
    p: f64,
    s: f64,
}

impl Dual {
    fn mul(self, o: Dual) -> Dual {
        Dual {
            p: self.p * o.p,
            s: self.p * o.s + self.s * o.p,
        }
    }

    fn add(&mut self, o: Dual) {
        self.p += o.p;
        self.s += o.s;
    }
}

/// Mass and moment of derivations of the start symbol, per size
/// `1..=cap` (index 0 unused).
fn size_dp(g: &Grammar, weights: &[f64], logs: &[f64], allowed: &[bool], cap: usize) -> Vec<Dual> {
    let n = g.nonterminals().len();
    // d[k][X]: derivations of X with exactly k rule applications.
    let mut d = vec![vec![Dual::default(); n]; cap + 1];
    // conv[r][j][k]: the first j nonterminal children of r with total size k.
    let children: Vec<Vec<usize>> = g.rules().iter().map(|r| r.nonterminals().collect()).collect();
    let mut conv: Vec<Vec<Vec<Dual>>> = children
        .iter()
        .map(|c| {
            let mut v = vec![vec![Dual::default(); cap]; c.len() + 1];
            v[0][0] = Dual { p: 1.0, s: 0.0 };
            v
        })
        .collect();
    for k in 1..=cap {
        let m = k - 1;
        if m > 0 {
            for (r, c) in children.iter().enumerate() {
                if !allowed[r] {
                    continue;
                }
                for j in 1..=c.len() {
                    let mut acc = Dual::default();
                    for a in 1..=m {
                        let left = conv[r][j - 1][m - a];
                        if left.p == 0.0 && left.s == 0.0 {
                            continue;
                        }
                        acc.add(left.mul(d[a][c[j - 1]]));
                    }
                    conv[r][j][m] = acc;
                }
            }
        }
        for (r, rule) in g.rules().iter().enumerate() {
            if !allowed[r] || weights[r] == 0.0 {
                continue;
            }
            let w = Dual {
                p: weights[r],
                s: weights[r] * logs[r],
            };
            let inner = conv[r][children[r].len()][m];
            d[k][rule.lhs].add(w.mul(inner));
        }
    }
    d.into_iter().map(|row| row[g.start()]).collect()
}

/// `E[Σ_r f_r]` over derivations from the start symbol, from
/// `(I − M) s = b`.
fn expected_sum(g: &Grammar, per_rule: &[f64]) -> Result<f64, DivergenceError> {
    let n = g.nonterminals().len();
    let mut m = DMatrix::<f64>::identity(n, n);
    let mut b = DVector::<f64>::zeros(n);
    for (r, rule) in g.rules().iter().enumerate() {
        b[rule.lhs] += rule.weight * per_rule[r];
        for y in rule.nonterminals() {
            m[(rule.lhs, y)] -= rule.weight;
        }
    }
    m.lu()
        .solve(&b)
        .map(|s| s[g.start()])
        .ok_or_else(|| DivergenceError::Unsupported(format!("`{}` is not consistent", g.name())))
}

fn same_rules(g: &Grammar, q: &Grammar) -> bool {
    g.rules().len() == q.rules().len()
        && g.terminals() == q.terminals()
        && g.nonterminals() == q.nonterminals()
        && g.start() == q.start()
        && g.rules().iter().zip(q.rules()).all(|(a, b)| a.lhs == b.lhs && a.rhs == b.rhs)
}

fn bernoulli_term(p: f64, q: f64) -> f64 {
    if p > 0.0 {
        p * (p / q).ln()
    } else {
        0.0
    }
}

/// Splits `KL(P ‖ Q)` into the parts inside and outside the outer
/// subgrammar kept by `keep`. `q` must have the rules of `g` with different
/// weights. `n` sampled sentences check that string-level log ratios and
/// membership agree with the derivation-level quantities used here.
pub fn verify_outer(g: &Grammar, keep: &[usize], q: &Grammar, n: usize, seed: u64) -> Result<OuterReport, DivergenceError> {
    if !same_rules(g, q) {
        return Err(DivergenceError::InvalidArgument(format!(
            "`{}` does not have the rules of `{}`",
            q.name(),
            g.name()
        )));
    }
    let outer = outer_subgrammar(g, keep)?;
    let mut kept = vec![false; g.rules().len()];
    for &r in keep {
        kept[r] = true;
    }
    let wp: Vec<f64> = g.rules().iter().map(|r| r.weight).collect();
    let wq: Vec<f64> = q.rules().iter().map(|r| r.weight).collect();
    let mut logs = vec![0.0; wp.len()];
    for r in 0..wp.len() {
        if wp[r] > 0.0 {
            if wq[r] == 0.0 {
                return Err(DivergenceError::InfiniteKl {
                    context: format!("rule {}", g.rule_ref(r)),
                    token: "(rule)".into(),
                });
            }
            logs[r] = (wp[r] / wq[r]).ln();
        }
    }
    let lhs = expected_sum(g, &logs)?;
    let mean_size = expected_sum(g, &vec![1.0; wp.len()])?;
    let max_log = logs.iter().fold(0.0f64, |m, l| m.max(l.abs()));
    let all = vec![true; wp.len()];

    let mut cap = 64;
    let (full, tail_bound) = loop {
        let full = size_dp(g, &wp, &logs, &all, cap);
        let mass: f64 = full.iter().map(|d| d.p).sum();
        let sized: f64 = full.iter().enumerate().map(|(k, d)| k as f64 * d.p).sum();
        let tail = (1.0 - mass).max(0.0).max(max_log * (mean_size - sized).max(0.0));
        if tail <= TAIL_BUDGET {
            break (full, tail);
        }
        if cap >= MAX_CAP {
            return Err(DivergenceError::TailBudget {
                tail,
                budget: TAIL_BUDGET,
                cap,
            });
        }
        cap *= 2;
    };
    let sum = |v: &[Dual]| v.iter().fold(Dual::default(), |mut a, d| {
        a.add(*d);
        a
    });
    let zeros = vec![0.0; wp.len()];
    let all_p = sum(&full);
    let in_a = sum(&size_dp(g, &wp, &logs, &kept, cap));
    let q_in_a = sum(&size_dp(g, &wq, &zeros, &kept, cap)).p;
    let q_all = sum(&size_dp(g, &wq, &zeros, &all, cap)).p;

    let (p_a, p_not_a) = (in_a.p, all_p.p - in_a.p);
    let (q_a, q_not_a) = (q_in_a, q_all - q_in_a);
    let s_not_a = all_p.s - in_a.s;
    let restricted = |p: f64, s: f64, q: f64| if p > 0.0 { s / p - (p / q).ln() } else { 0.0 };
    let kl_a = restricted(p_a, in_a.s, q_a);
    let kl_not_a = restricted(p_not_a, s_not_a, q_not_a);
    let kl_star = bernoulli_term(p_a, q_a) + bernoulli_term(p_not_a, q_not_a);
    let rhs = p_a * kl_a + p_not_a * kl_not_a + kl_star;
    let residual = (lhs - rhs).abs();

    check_samples(g, q, &outer, &kept, &logs, n, seed)?;
    Ok(OuterReport {
        grammar: g.name().to_string(),
        kept_rules: keep.iter().map(|&r| g.rule_ref(r)).collect(),
        lhs,
        p_a,
        p_not_a,
        q_a,
        q_not_a,
        kl_a,
        kl_not_a,
        kl_star,
        rhs,
        residual,
        tail_bound,
        size_cap: cap,
        checked_samples: n,
        // The slack covers rounding in the solve when the tail is tiny.
        holds: residual <= 2.0 * tail_bound + 1e-12,
    })
}

/// On sampled sentences, the string log ratio must equal the derivation's
/// and membership in the outer language must match the derivation avoiding
/// dropped rules; otherwise derivation-level terms do not describe strings.
fn check_samples(
    g: &Grammar,
    q: &Grammar,
    outer: &Grammar,
    kept: &[bool],
    logs: &[f64],
    n: usize,
    seed: u64,
) -> Result<(), DivergenceError> {
    let op = Oracle::new(g)?;
    let oq = Oracle::new(q)?;
    let oa = Oracle::new(outer)?;
    let limits = SampleLimits {
        max_tokens: 256,
        ..SampleLimits::default()
    };
    let drawn = Sampler::new(g, limits).annotated_range(seed, 0, n)?;
    let to_outer = |tokens: &[usize]| -> Option<Vec<usize>> {
        tokens.iter().map(|&t| outer.terminal_id(g.terminal_name(t))).collect()
    };
    drawn.par_iter().try_for_each(|s| {
        let t = &s.sentence.tokens;
        let derivation: f64 = s.sentence.rule_trace.iter().map(|&r| logs[r]).sum();
        let string = op.string_logprob(t)? - oq.string_logprob(t)?;
        if (derivation - string).abs() > 1e-9 * (1.0 + string.abs()) {
            return Err(DivergenceError::Unsupported(format!(
                "`{}` has derivations with different log ratios",
                g.render(t)
            )));
        }
        let avoids = s.sentence.rule_trace.iter().all(|&r| kept[r]);
        let member = match to_outer(t) {
            Some(u) => oa.recognize(&u)?,
            None => false,
        };
        if avoids != member {
            return Err(DivergenceError::Unsupported(format!(
                "`{}` is in the outer language by some derivations but not others",
                g.render(t)
            )));
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundled;
    use crate::grammar::parse_grammar;
    use crate::lm::perturb_grammar;

    fn setup() -> (Grammar, Vec<usize>, Grammar) {
        let g = bundled::nested_parens();
        let keep: Vec<usize> = (0..g.rules().len()).filter(|&r| g.rule_ref(r) != "L0#1").collect();
        let eps = [("L0".to_string(), vec![0.2, -0.3]), ("L1".to_string(), vec![-0.1, 0.25])].into();
        let q = perturb_grammar(&g, &eps).unwrap();
        (g, keep, q)
    }

    #[test]
    fn nested_parens_split() {
        let (g, keep, q) = setup();
        let r = verify_outer(&g, &keep, &q, 300, 0).unwrap();
        assert!(r.holds, "{r:?}");
        assert!(r.residual < 2e-6);
        assert!((r.p_a - 0.7).abs() < 1e-9, "{}", r.p_a);
        assert!(r.kl_a > 0.0 && r.kl_not_a > 0.0 && r.kl_star > 0.0);
    }

    #[test]
    fn identical_models() {
        let (g, keep, _) = setup();
        let r = verify_outer(&g, &keep, &g, 50, 0).unwrap();
        assert_eq!((r.lhs, r.kl_a, r.kl_not_a, r.kl_star), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn keep_everything() {
        let (g, _, q) = setup();
        let all: Vec<usize> = (0..g.rules().len()).collect();
        let r = verify_outer(&g, &all, &q, 50, 0).unwrap();
        assert_eq!(r.p_not_a, 0.0);
        assert!(r.kl_star.abs() < 1e-5);
        assert!((r.kl_a - r.lhs).abs() < 2.0 * r.tail_bound + 1e-12);
        assert!(r.holds);
    }

    #[test]
    fn size_dp_matches_closed_form() {
        // S -> a [0.5] | S S [0.5] is critical; use 0.6 / 0.4: sizes are odd,
        // size 1 has mass 0.6 and size 3 has 0.4 · 0.36.
        let g = parse_grammar("start: S\nS -> \"a\" [0.6] | S S [0.4]").unwrap();
        let d = size_dp(&g, &[0.6, 0.4], &[1.0, 2.0], &[true, true], 4);
        assert!((d[1].p - 0.6).abs() < 1e-15);
        assert_eq!(d[2].p, 0.0);
        assert!((d[3].p - 0.4 * 0.36).abs() < 1e-15);
        // Each size-3 derivation has log ratio 2 + 1 + 1.
        assert!((d[3].s - 4.0 * 0.4 * 0.36).abs() < 1e-15);
    }

    #[test]
    fn rejects_foreign_model() {
        let (g, keep, _) = setup();
        let other = bundled::and_recursion(0.75);
        assert!(matches!(
            verify_outer(&g, &keep, &other, 10, 0),
            Err(DivergenceError::InvalidArgument(_))
        ));
    }
}
