//! Attribution of every token to a leaf of the subgrammar DAG.
//!
//! Terminals inside rules that also contain nonterminals (markers, brackets,
//! operators) are lifted into leaves of their own, named `<t>`. The remaining
//! terminal-only rules must then belong to DAG leaves; otherwise the
//! finest partition is not a partition into leaves and the check refuses.

use crate::grammar::{Grammar, Symbol};
use crate::lm::LanguageModel;
use crate::sampler::{AnnotatedSample, Child, SampleLimits, ROOT_EOS};
use crate::subgrammar::decompose_dag;

use super::{sample_terms, summarize, DivergenceError, ResidualReport, KL_LIMITS, RESIDUAL_TOLERANCE};

/// Per-rule leaf labels for a grammar that passes the gate.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafPartition {
    /// For terminal-only rules, the label of their DAG leaf.
    rule_leaf: Vec<Option<String>>,
    terminal_names: Vec<String>,
}

impl LeafPartition {
    pub fn label(&self, rule: usize, terminal: usize) -> String {
        match &self.rule_leaf[rule] {
            Some(l) => l.clone(),
            None => format!("<{}>", self.terminal_names[terminal]),
        }
    }

    /// Every label that can occur, the EOS slot excluded.
    pub fn leaves(&self) -> Vec<String> {
        let mut out: Vec<String> = self.rule_leaf.iter().flatten().cloned().collect();
        out.extend(self.terminal_names.iter().map(|t| format!("<{t}>")));
        out.sort();
        out.dedup();
        out
    }
}

/// Checks that after lifting, each terminal-only rule sits at a DAG leaf.
pub fn leaf_partition(g: &Grammar) -> Result<LeafPartition, DivergenceError> {
    let dag = decompose_dag(g);
    let mixed = |r: usize| {
        let rhs = &g.rule(r).rhs;
        rhs.iter().any(|s| matches!(s, Symbol::Terminal(_))) && rhs.iter().any(|s| matches!(s, Symbol::Nonterminal(_)))
    };
    let lifted_leaf: Vec<bool> = dag
        .nodes
        .iter()
        .map(|n| dag.is_leaf(n.id) && n.nonterminals.iter().all(|&a| g.rules_for(a).iter().all(|&r| !mixed(r))))
        .collect();
    let mut rule_leaf = vec![None; g.rules().len()];
    for (r, rule) in g.rules().iter().enumerate() {
        let pure = !rule.rhs.is_empty() && rule.rhs.iter().all(|s| matches!(s, Symbol::Terminal(_)));
        if !pure {
            continue;
        }
        let node = dag.node_of(rule.lhs);
        if !lifted_leaf[node] {
            return Err(DivergenceError::GateViolation(format!(
                "rule {} emits only terminals but `{}` is not a leaf once the terminals of mixed rules are lifted",
                g.rule_ref(r),
                g.nonterminal_name(rule.lhs)
            )));
        }
        rule_leaf[r] = Some(dag.nodes[node].label.join("+"));
    }
    Ok(LeafPartition {
        rule_leaf,
        terminal_names: g.terminals().to_vec(),
    })
}

fn labels(part: &LeafPartition, s: &AnnotatedSample) -> Vec<String> {
    let tree = &s.tree;
    let mut out = Vec::with_capacity(s.sentence.tokens.len() + 1);
    tree.walk(|path, child, _| {
        if let Child::Terminal(t) = child {
            let parent = *path.last().unwrap();
            out.push(part.label(tree.nodes[parent].rule, t));
        }
    });
    out.push(ROOT_EOS.to_string());
    out
}

/// Checks that each sample's total equals the sum over leaf buckets plus the
/// EOS slot.
pub fn verify_leaf(g: &Grammar, q: &dyn LanguageModel, n: usize, seed: u64) -> Result<ResidualReport, DivergenceError> {
    verify_leaf_with(g, q, n, seed, KL_LIMITS)
}

pub fn verify_leaf_with(
    g: &Grammar,
    q: &dyn LanguageModel,
    n: usize,
    seed: u64,
    limits: SampleLimits,
) -> Result<ResidualReport, DivergenceError> {
    let part = leaf_partition(g)?;
    if n == 0 {
        return Err(DivergenceError::InvalidArgument("need at least one sample".into()));
    }
    let terms = sample_terms(g, q, n, seed, limits, |s| labels(&part, s))?;
    let report = summarize(g, &terms, seed);
    Ok(ResidualReport {
        level: "leaf".into(),
        holds: report.max_residual < RESIDUAL_TOLERANCE,
        tolerance: RESIDUAL_TOLERANCE,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundled;
    use crate::grammar::parse_grammar;
    use crate::lm::{oracle_lm, random_perturbation, synthetic_composed_lm, UniformLm};

    #[test]
    fn nested_parens_is_refused() {
        let err = leaf_partition(&bundled::nested_parens()).unwrap_err();
        assert!(err.to_string().contains("L1"), "{err}");
    }

    #[test]
    fn deeper_recursion_leaves() {
        let g = bundled::load("deeper_recursion").unwrap();
        let part = leaf_partition(&g).unwrap();
        let leaves = part.leaves();
        assert!(leaves.contains(&"V".to_string()));
        assert!(leaves.contains(&"<sL1>".to_string()));
        let q = synthetic_composed_lm(&g, &random_perturbation(&g, &["V", "L2"], 0.3, 1)).unwrap();
        let r = verify_leaf(&g, &q, 200, 2).unwrap();
        assert!(r.holds, "{}", r.report.max_residual);
        assert!(r.report.per_bucket["V"].mean.abs() > 1e-4);
    }

    #[test]
    fn single_nonterminal() {
        let g = parse_grammar("start: S\nS -> \"a\" [0.5] | \"b\" [0.5]").unwrap();
        let r = verify_leaf(&g, &UniformLm::new(2), 100, 0).unwrap();
        let keys: Vec<&str> = r.report.per_bucket.keys().map(|k| k.as_str()).collect();
        assert_eq!(keys, ["ROOT-EOS", "S"]);
        assert!(r.holds);
        let z = verify_leaf(&g, &oracle_lm(&g).unwrap(), 100, 0).unwrap();
        assert!(z.report.total.mean.abs() < 1e-12);
    }
}
