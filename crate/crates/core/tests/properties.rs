use proptest::prelude::*;

use pcfg_lab::arith::{gen_deep_expr, gen_shallow_chain};
use pcfg_lab::bundled;
use pcfg_lab::divergence::verify_top_level;
use pcfg_lab::lm::{random_perturbation, synthetic_composed_lm};
use pcfg_lab::subgrammar::decompose_dag;
use pcfg_lab::{Grammar, Rule};

fn permuted(g: &Grammar, order: &[usize]) -> Grammar {
    let rules: Vec<Rule> = order.iter().map(|&i| g.rules()[i].clone()).collect();
    Grammar::new(g.name(), g.terminals().to_vec(), g.nonterminals().to_vec(), g.start(), rules).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn partition_holds_for_any_perturbation(seed in any::<u64>(), scale in 0.05f64..1.5, which in 0usize..7) {
        let g = &bundled::all()[which];
        let names: Vec<&str> = g.nonterminals().iter().map(String::as_str).collect();
        // Large noise can make the model's grammar inconsistent.
        let q = synthetic_composed_lm(g, &random_perturbation(g, &names, scale, seed));
        prop_assume!(q.is_ok());
        let q = q.unwrap();
        let r = verify_top_level(g, &q, 60, seed).unwrap();
        prop_assert!(r.holds, "{}: {:e}", g.name(), r.report.max_residual);
    }

    #[test]
    fn dag_ignores_rule_order(order in Just((0..38).collect::<Vec<usize>>()).prop_shuffle()) {
        let g = bundled::load("deeper_recursion").unwrap();
        prop_assume!(g.rules().len() == order.len());
        prop_assert_eq!(decompose_dag(&permuted(&g, &order)).canonical(), decompose_dag(&g).canonical());
    }

    #[test]
    fn exact_values_track_floats(seed in any::<u64>(), terms in 1usize..40, depth in 1usize..6) {
        for e in [gen_shallow_chain(seed, terms).unwrap(), gen_deep_expr(seed, depth).unwrap()] {
            let exact = e.eval().unwrap();
            let approx = e.eval_f64();
            let x = exact.numer().to_string().parse::<f64>().unwrap() / exact.denom().to_string().parse::<f64>().unwrap();
            if x.abs() < 1e12 {
                prop_assert!((x - approx).abs() <= 1e-6 * x.abs().max(1.0), "{x} vs {approx}");
            }
        }
    }
}
