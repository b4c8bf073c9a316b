//! KL of a recursive start symbol predicted from its parts.
//!
//! For a model that treats every subgrammar identically wherever it occurs,
//! one expansion of the recursive root `S` costs the KL of its rule choice
//! plus, for each proper subgrammar `B` it mentions, the KL of `B` weighted
//! by how often `B` appears. A derivation has `1 / (1 − E[R])` expansions of
//! `S` on average, which gives the prediction.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bundled;
use crate::grammar::Grammar;
use crate::lm::{oracle_lm, perturb_grammar, synthetic_composed_lm, ComposedLm, Perturbation};
use crate::oracle::expected_recursion;
use crate::subgrammar::inner_subgrammar;

use super::{mc_kl, DivergenceError, Estimate};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgrammarKl {
    pub nonterminal: String,
    /// Expected occurrences per expansion of the root.
    pub occurrences: f64,
    pub kl: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrencePrediction {
    pub grammar: String,
    pub root: String,
    pub expected_recursion: f64,
    /// KL between the root's rule distributions under P and Q.
    pub choice_kl: f64,
    pub subgrammars: Vec<SubgrammarKl>,
    /// `choice_kl + Σ occurrences · kl`.
    pub per_expansion: Estimate,
    /// `per_expansion / (1 − E[R])`; absent when unbounded.
    pub predicted: Option<Estimate>,
    pub measured: Option<Estimate>,
    pub unbounded: bool,
}

impl RecurrencePrediction {
    /// Prediction and measurement within `sigmas` combined standard errors.
    pub fn agrees(&self, sigmas: f64) -> Option<bool> {
        Some(self.predicted?.within(&self.measured?, sigmas))
    }
}

/// Measures each proper subgrammar on its own corpus, combines them with the
/// root's choice KL, and compares against `mc_kl` on the whole grammar.
pub fn predict_recurrence(g: &Grammar, q: &ComposedLm, n: usize, seed: u64) -> Result<RecurrencePrediction, DivergenceError> {
    predict(g, q.grammar(), n, seed, || Ok(mc_kl(g, q, n, seed)?.total))
}

/// `measure` runs only when the prediction is finite.
fn predict(
    g: &Grammar,
    qg: &Grammar,
    n: usize,
    seed: u64,
    measure: impl FnOnce() -> Result<Estimate, DivergenceError>,
) -> Result<RecurrencePrediction, DivergenceError> {
    if qg.rules().len() != g.rules().len() || qg.nonterminals() != g.nonterminals() {
        return Err(DivergenceError::InvalidArgument("the composed model is not over this grammar".into()));
    }
    let s = g.start();
    let root = g.nonterminal_name(s).to_string();
    for y in (0..g.nonterminals().len()).filter(|&y| y != s) {
        if g.reachable_from(s)[y] && g.reachable_from(y)[s] {
            return Err(DivergenceError::Unsupported(format!(
                "`{}` is mutually recursive with the root `{root}`",
                g.nonterminal_name(y)
            )));
        }
    }
    let rec = expected_recursion(g, &root)?;
    let mut choice_kl = 0.0;
    let mut occurrences = vec![0.0; g.nonterminals().len()];
    for &r in g.rules_for(s) {
        let (wp, wq) = (g.rule(r).weight, qg.rule(r).weight);
        if wp > 0.0 {
            if wq == 0.0 {
                return Err(DivergenceError::InfiniteKl {
                    context: format!("rule {}", g.rule_ref(r)),
                    token: "(rule)".into(),
                });
            }
            choice_kl += wp * (wp / wq).ln();
        }
        for y in g.rule(r).nonterminals().filter(|&y| y != s) {
            occurrences[y] += wp;
        }
    }
    let mut subgrammars = Vec::new();
    for (y, &c) in occurrences.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        let name = g.nonterminal_name(y);
        let p_sub = inner_subgrammar(g, name)?;
        let q_sub = oracle_lm(&inner_subgrammar(qg, name)?)?;
        let kl = mc_kl(&p_sub, &q_sub, n, seed.wrapping_add(1 + y as u64))?.total;
        subgrammars.push(SubgrammarKl {
            nonterminal: name.to_string(),
            occurrences: c,
            kl,
        });
    }
    let per_expansion = Estimate {
        mean: choice_kl + subgrammars.iter().map(|b| b.occurrences * b.kl.mean).sum::<f64>(),
        stderr: subgrammars
            .iter()
            .map(|b| (b.occurrences * b.kl.stderr).powi(2))
            .fold(0.0, |a, b| a + b)
            .sqrt(),
    };
    let unbounded = rec.unbounded();
    let (predicted, measured) = match rec.blowup_factor {
        Some(f) => (
            Some(Estimate {
                mean: per_expansion.mean * f,
                stderr: per_expansion.stderr * f,
            }),
            Some(measure()?),
        ),
        None => (None, None),
    };
    Ok(RecurrencePrediction {
        grammar: g.name().to_string(),
        root,
        expected_recursion: rec.expected_recursion,
        choice_kl,
        subgrammars,
        per_expansion,
        predicted,
        measured,
        unbounded,
    })
}

/// The `S → x (p) | ( S and S ) (1 − p)` family at each `p`, with the model
/// shifting the two rule log-weights by `+delta` and `−delta`.
pub fn recurrence_sweep(ps: &[f64], delta: f64, n: usize, seed: u64) -> Result<Vec<RecurrencePrediction>, DivergenceError> {
    ps.iter()
        .map(|&p| {
            if !(0.0..=1.0).contains(&p) {
                return Err(DivergenceError::InvalidArgument(format!("p = {p} is not a probability")));
            }
            let g = bundled::and_recursion(p);
            let eps: Perturbation = [("S".to_string(), vec![delta, -delta])].into();
            if 2.0 * (1.0 - p) >= 1.0 {
                // The model's grammar is not consistent either; no oracle.
                let qg = perturb_grammar(&g, &eps)?;
                return predict(&g, &qg, n, seed, || unreachable!("unbounded"));
            }
            let q = synthetic_composed_lm(&g, &eps)?;
            predict_recurrence(&g, &q, n, seed)
        })
        .collect()
}

/// `p,expected_recursion,per_expansion,predicted,predicted_stderr,measured,
/// measured_stderr,unbounded`, one row per sweep point; `p` is read back
/// from the recursion (`E[R] = 2(1 − p)`).
pub fn write_sweep_csv(path: &Path, rows: &[RecurrencePrediction]) -> Result<(), DivergenceError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "p",
        "expected_recursion",
        "per_expansion",
        "predicted",
        "predicted_stderr",
        "measured",
        "measured_stderr",
        "unbounded",
    ])?;
    let opt = |e: Option<Estimate>, f: fn(Estimate) -> f64| e.map(|e| f(e).to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            (1.0 - r.expected_recursion / 2.0).to_string(),
            r.expected_recursion.to_string(),
            r.per_expansion.mean.to_string(),
            opt(r.predicted, |e| e.mean),
            opt(r.predicted, |e| e.stderr),
            opt(r.measured, |e| e.mean),
            opt(r.measured, |e| e.stderr),
            r.unbounded.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::parse_grammar;
    use crate::lm::random_perturbation;

    #[test]
    fn p_one_is_exact() {
        let r = recurrence_sweep(&[1.0], 0.4, 50, 0).unwrap().remove(0);
        assert_eq!(r.expected_recursion, 0.0);
        assert_eq!(r.predicted.unwrap().mean, r.per_expansion.mean);
        assert_eq!(r.measured.unwrap().mean.abs(), 0.0);
    }

    #[test]
    fn three_quarters() {
        let r = recurrence_sweep(&[0.75], 0.4, 3000, 1).unwrap().remove(0);
        assert!((r.expected_recursion - 0.5).abs() < 1e-15);
        assert!((r.predicted.unwrap().mean - 2.0 * r.choice_kl).abs() < 1e-15);
        assert!(r.agrees(3.0).unwrap(), "{r:?}");
    }

    #[test]
    fn unbounded_flag() {
        let r = recurrence_sweep(&[0.5], 0.4, 10, 0).unwrap().remove(0);
        assert!(r.unbounded && r.predicted.is_none() && r.measured.is_none());
    }

    #[test]
    fn with_proper_subgrammar() {
        let g = parse_grammar(
            "start: S\nS -> B [0.6] | \"[\" S S \"]\" [0.4]\nB -> \"b\" B [0.3] | \"c\" [0.7]",
        )
        .unwrap();
        let q = synthetic_composed_lm(&g, &random_perturbation(&g, &["S", "B"], 0.4, 3)).unwrap();
        let r = predict_recurrence(&g, &q, 4000, 2).unwrap();
        assert_eq!(r.subgrammars.len(), 1);
        assert!((r.subgrammars[0].occurrences - 0.6).abs() < 1e-15);
        assert!(r.agrees(3.0).unwrap(), "{r:?}");
    }

    #[test]
    fn mutual_recursion_is_unsupported() {
        let g = parse_grammar("start: S\nS -> \"a\" T [0.3] | \"b\" [0.7]\nT -> S [1.0]").unwrap();
        let q = synthetic_composed_lm(&g, &Perturbation::new()).unwrap();
        assert!(matches!(predict_recurrence(&g, &q, 10, 0), Err(DivergenceError::Unsupported(_))));
    }

    #[test]
    fn sweep_csv() {
        let rows = recurrence_sweep(&[1.0, 0.5], 0.2, 20, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sweep.csv");
        write_sweep_csv(&p, &rows).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(2).unwrap().ends_with(",,,,true"));
    }
}
