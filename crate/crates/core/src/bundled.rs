//! The grammars shipped under `grammars/`, compiled into the library.

use crate::grammar::{parse_grammar_strict, Grammar};

pub const KL_EXAMPLE_1: &str = include_str!("../../../grammars/kl_example_1.pcfg");
pub const KL_EXAMPLE_2: &str = include_str!("../../../grammars/kl_example_2.pcfg");
pub const DEEPER_RECURSION: &str = include_str!("../../../grammars/deeper_recursion.pcfg");
pub const UNIFIED_SUBGRAMMAR: &str = include_str!("../../../grammars/unified_subgrammar.pcfg");
pub const UNIFIED_SUBGRAMMAR_KEEP: &str = include_str!("../../../grammars/unified_subgrammar.keep");
pub const ABC: &str = include_str!("../../../grammars/abc.pcfg");
pub const NESTED_PARENS: &str = include_str!("../../../grammars/nested_parens.pcfg");
pub const AND_RECURSION: &str = include_str!("../../../grammars/and_recursion.pcfg");

/// `(file stem, text)` for every bundled grammar.
pub const ALL: [(&str, &str); 7] = [
    ("kl_example_1", KL_EXAMPLE_1),
    ("kl_example_2", KL_EXAMPLE_2),
    ("deeper_recursion", DEEPER_RECURSION),
    ("unified_subgrammar", UNIFIED_SUBGRAMMAR),
    ("abc", ABC),
    ("nested_parens", NESTED_PARENS),
    ("and_recursion", AND_RECURSION),
];

pub fn load(name: &str) -> Option<Grammar> {
    ALL.iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| parse_grammar_strict(text).expect("bundled grammar parses"))
}

pub fn all() -> Vec<Grammar> {
    ALL.iter()
        .map(|(_, text)| parse_grammar_strict(text).expect("bundled grammar parses"))
        .collect()
}

pub fn nested_parens() -> Grammar {
    load("nested_parens").unwrap()
}

/// `S → "x" [p] | "(" S "and" S ")" [1 − p]`, with expected recursion
/// `2(1 − p)`.
pub fn and_recursion(p: f64) -> Grammar {
    assert!((0.0..=1.0).contains(&p));
    let text = format!(
        "name: and_recursion_p{p}\nstart: S\nS -> \"x\" [{p}] | \"(\" S \"and\" S \")\" [{}]\n",
        1.0 - p
    );
    parse_grammar_strict(&text).expect("valid recursion grammar")
}

/// Rule ids listed in a `.keep` file (whitespace-separated `NAME#K`,
/// `#`-prefixed comment lines).
pub fn parse_keep(g: &Grammar, text: &str) -> Result<Vec<usize>, crate::grammar::GrammarError> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.starts_with('#'))
        .flat_map(str::split_whitespace)
        .map(|r| g.resolve_rule_ref(r))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::validate;

    #[test]
    fn every_bundled_grammar_is_consistent_and_round_trips() {
        for (name, text) in ALL {
            let g = parse_grammar_strict(text).unwrap();
            let report = validate(&g);
            assert!(report.consistent, "{name}: {}", report.summary());
            let again = parse_grammar_strict(&g.to_string()).unwrap();
            assert_eq!(again, g, "{name}");
        }
    }

    #[test]
    fn listing_shapes() {
        let g = nested_parens();
        assert_eq!(g.nonterminals().len(), 2);
        assert_eq!(g.rules().len(), 4);
        let abc = load("abc").unwrap();
        assert_eq!(
            abc.nonterminals(),
            ["L0", "L1a", "L1b", "L1c", "L2a", "L2_2a", "L2b", "L2c", "L3"]
        );
        let l2c = abc.nonterminal_id("L2c").unwrap();
        let w: Vec<f64> = abc.rules_for(l2c).iter().map(|&r| abc.rule(r).weight).collect();
        assert!((w[0] - 7.0 / 13.0).abs() < 1e-6 && (w[1] - 6.0 / 13.0).abs() < 1e-6);
        let deeper = load("deeper_recursion").unwrap();
        let v = deeper.nonterminal_id("V").unwrap();
        assert_eq!(deeper.rules_for(v).len(), 25);
    }

    #[test]
    fn keep_file_resolves() {
        let g = load("unified_subgrammar").unwrap();
        let keep = parse_keep(&g, UNIFIED_SUBGRAMMAR_KEEP).unwrap();
        assert_eq!(keep.len(), 5 + 8 + 5);
    }
}
