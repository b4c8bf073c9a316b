use nalgebra::DMatrix;
use petgraph::graph::DiGraph;
use serde::Serialize;

use super::{Grammar, WEIGHT_SUM_TOLERANCE};

/// Relative tolerance of the power iteration for the spectral radius.
pub const POWER_ITERATION_TOL: f64 = 1e-10;
/// Iteration cap; hitting it makes the consistency verdict inconclusive.
pub const POWER_ITERATION_CAP: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub grammar: String,
    /// `(nonterminal, Σ weights)` in declaration order.
    pub weight_sums: Vec<(String, f64)>,
    pub bad_sums: Vec<String>,
    pub unreachable: Vec<String>,
    pub unproductive: Vec<String>,
    /// `None` when the power iteration hit its cap.
    pub spectral_radius: Option<f64>,
    pub consistent: bool,
}

impl ValidationReport {
    pub fn summary(&self) -> String {
        let rho = match self.spectral_radius {
            Some(r) => format!("{r:.6}"),
            None => "inconclusive".into(),
        };
        let mut s = format!(
            "{}: consistent={} spectral_radius={}",
            self.grammar, self.consistent, rho
        );
        if !self.bad_sums.is_empty() {
            s += &format!(" bad_sums={:?}", self.bad_sums);
        }
        if !self.unreachable.is_empty() {
            s += &format!(" unreachable={:?}", self.unreachable);
        }
        if !self.unproductive.is_empty() {
            s += &format!(" unproductive={:?}", self.unproductive);
        }
        s
    }
}

pub fn validate(g: &Grammar) -> ValidationReport {
    let sums = g.weight_sums();
    let names = g.nonterminals();
    let bad_sums: Vec<String> = sums
        .iter()
        .enumerate()
        .filter(|(_, s)| (**s - 1.0).abs() > WEIGHT_SUM_TOLERANCE)
        .map(|(i, _)| names[i].clone())
        .collect();
    let reach = g.reachable_from(g.start());
    let unreachable: Vec<String> = (0..names.len())
        .filter(|&i| !reach[i])
        .map(|i| names[i].clone())
        .collect();
    let productive = productive(g);
    let unproductive: Vec<String> = (0..names.len())
        .filter(|&i| !productive[i])
        .map(|i| names[i].clone())
        .collect();
    let spectral_radius = spectral_radius(&g.mean_matrix());
    let consistent = bad_sums.is_empty()
        && unreachable.is_empty()
        && unproductive.is_empty()
        && spectral_radius.is_some_and(|r| r < 1.0);
    ValidationReport {
        grammar: g.name().to_string(),
        weight_sums: names.iter().cloned().zip(sums).collect(),
        bad_sums,
        unreachable,
        unproductive,
        spectral_radius,
        consistent,
    }
}

/// Nonterminals that derive at least one terminal string (rules with
/// positive weight only).
pub(crate) fn productive(g: &Grammar) -> Vec<bool> {
    let mut prod = vec![false; g.nonterminals().len()];
    loop {
        let mut changed = false;
        for rule in g.rules() {
            if !prod[rule.lhs] && rule.weight > 0.0 && rule.nonterminals().all(|b| prod[b]) {
                prod[rule.lhs] = true;
                changed = true;
            }
        }
        if !changed {
            return prod;
        }
    }
}

/// Strongly connected components of the "appears on a right-hand side of"
/// relation, each sorted by nonterminal id.
pub(crate) fn components(g: &Grammar) -> Vec<Vec<usize>> {
    let n = g.nonterminals().len();
    let mut graph = DiGraph::<(), ()>::with_capacity(n, g.rules().len());
    let nodes: Vec<_> = (0..n).map(|_| graph.add_node(())).collect();
    for rule in g.rules() {
        for b in rule.nonterminals() {
            graph.update_edge(nodes[rule.lhs], nodes[b], ());
        }
    }
    petgraph::algo::tarjan_scc(&graph)
        .into_iter()
        .map(|c| {
            let mut ids: Vec<usize> = c.into_iter().map(|ix| ix.index()).collect();
            ids.sort_unstable();
            ids
        })
        .collect()
}

/// Spectral radius of a nonnegative matrix: the maximum over irreducible
/// diagonal blocks, each found by power iteration on `I + B` (primitive,
/// so the iteration converges geometrically even for periodic blocks).
pub fn spectral_radius(m: &DMatrix<f64>) -> Option<f64> {
    let n = m.nrows();
    let mut graph = DiGraph::<(), ()>::with_capacity(n, n);
    let nodes: Vec<_> = (0..n).map(|_| graph.add_node(())).collect();
    for i in 0..n {
        for j in 0..n {
            if m[(i, j)] > 0.0 {
                graph.update_edge(nodes[i], nodes[j], ());
            }
        }
    }
    let mut rho: f64 = 0.0;
    for comp in petgraph::algo::tarjan_scc(&graph) {
        let idx: Vec<usize> = comp.into_iter().map(|c| c.index()).collect();
        let block = DMatrix::from_fn(idx.len(), idx.len(), |a, b| m[(idx[a], idx[b])]);
        rho = rho.max(block_radius(&block)?);
    }
    Some(rho)
}

fn block_radius(b: &DMatrix<f64>) -> Option<f64> {
    let k = b.nrows();
    if k == 1 {
        return Some(b[(0, 0)]);
    }
    let shifted = b + DMatrix::identity(k, k);
    let mut x = nalgebra::DVector::from_element(k, 1.0 / k as f64);
    let mut prev = f64::NAN;
    for _ in 0..POWER_ITERATION_CAP {
        let y = &shifted * &x;
        let lambda = y.sum();
        x = y / lambda;
        if (lambda - prev).abs() <= POWER_ITERATION_TOL * lambda {
            return Some(lambda - 1.0);
        }
        prev = lambda;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::parse_grammar;

    #[test]
    fn nested_parens_consistent() {
        let g = parse_grammar(
            "start: L0\nL0 -> \"(\" L1 \")\" [0.7] | L0 L0 [0.3]\nL1 -> \"(\" L1 \")\" [0.8] | \"a\" [0.2]",
        )
        .unwrap();
        let r = validate(&g);
        assert!(r.consistent);
        assert!((r.spectral_radius.unwrap() - 0.8).abs() < 1e-9);
    }

    #[test]
    fn supercritical_is_inconsistent() {
        let g = parse_grammar("start: S\nS -> S S [1.0] | \"a\" [0.0]").unwrap();
        let r = validate(&g);
        assert!(!r.consistent);
        assert!((r.spectral_radius.unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn bad_sum_flagged() {
        let g = parse_grammar("start: S\nS -> \"a\" [0.5] | \"b\" [0.4]").unwrap();
        let r = validate(&g);
        assert_eq!(r.bad_sums, ["S"]);
        assert!(!r.consistent);
    }

    #[test]
    fn unreachable_and_unproductive() {
        let g = parse_grammar(
            "start: S\nS -> \"a\" [0.5] | B [0.5]\nB -> B [1.0]\nC -> \"c\" [1.0]",
        )
        .unwrap();
        let r = validate(&g);
        assert_eq!(r.unreachable, ["C"]);
        assert_eq!(r.unproductive, ["B"]);
        assert!(!r.consistent);
    }

    #[test]
    fn periodic_block_converges() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 0.5, 0.5, 0.0]);
        assert!((spectral_radius(&m).unwrap() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn defective_chain_is_conclusive() {
        // Equal eigenvalues along a chain form a Jordan block; the
        // per-component iteration sidesteps the slow convergence.
        let m = DMatrix::from_row_slice(
            3,
            3,
            &[0.6, 0.7, 0.0, 0.0, 0.6, 0.7, 0.0, 0.0, 0.6],
        );
        assert!((spectral_radius(&m).unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn deterministic() {
        let text = "start: S\nS -> \"x\" [0.75] | \"(\" S \"and\" S \")\" [0.25]";
        let a = validate(&parse_grammar(text).unwrap());
        let b = validate(&parse_grammar(text).unwrap());
        assert_eq!(a, b);
    }
}
