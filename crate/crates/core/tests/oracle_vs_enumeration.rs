use pcfg_lab::bundled;
use pcfg_lab::oracle::enumerate::{bracket, lump, prefix_bracket, string_probabilities};
use pcfg_lab::oracle::inside::InsideOracle;
use pcfg_lab::oracle::Oracle;
use pcfg_lab::subgrammar::inner_subgrammar;
use pcfg_lab::Grammar;

/// Bundled grammars, with the ABC grammar replaced by its inner
/// subgrammars: its shortest sentence has 14 tokens.
fn cases() -> Vec<Grammar> {
    bundled::all()
        .into_iter()
        .flat_map(|g| {
            if g.name() == "abc" {
                ["L1a", "L1b", "L1c"]
                    .iter()
                    .map(|r| inner_subgrammar(&g, r).unwrap())
                    .collect()
            } else {
                vec![g]
            }
        })
        .collect()
}

#[test]
fn string_probabilities_match_enumeration() {
    for g in cases() {
        let lumped = lump(&g);
        let small = &lumped.grammar;
        let table = string_probabilities(small, 10, 14);
        let deeper = string_probabilities(small, 10, 16);
        assert_eq!(table.len(), deeper.len());
        let oracle = Oracle::new(&g).unwrap();
        let small_oracle = Oracle::new(small).unwrap();
        let mut worst: f64 = 0.0;
        let mut concrete = 0;
        for (s, &p) in &table {
            assert!((deeper[s] - p).abs() < 1e-15, "{}: depth-limited", g.name());
            let chart = small_oracle.string_logprob(s).unwrap().exp();
            worst = worst.max((chart - p).abs());
            assert!((chart - p).abs() < 1e-9, "{}: {}", g.name(), small.render(s));
            for k in 0..3 {
                let (t, f) = lumped.concretize(s, |i, _| 3 * i + k);
                let c = oracle.string_logprob(&t).unwrap().exp();
                assert!((c - p * f).abs() < 1e-9, "{}: {}", g.name(), g.render(&t));
                concrete += 1;
            }
        }
        // Every single-token edit of a member gets the enumerated value too
        // (zero when it is not a member).
        let alphabet = small.terminals().len();
        let mut neighbours = 0;
        for s in table.keys() {
            for i in 0..s.len() {
                let mut d = s.clone();
                d.remove(i);
                let mut edits = vec![d];
                for t in 0..alphabet {
                    let mut m = s.clone();
                    m[i] = t;
                    edits.push(m);
                    let mut ins = s.clone();
                    ins.insert(i, t);
                    if ins.len() <= 10 {
                        edits.push(ins);
                    }
                }
                for m in edits {
                    let want = table.get(&m).copied().unwrap_or(0.0);
                    let got = small_oracle.string_logprob(&m).unwrap().exp();
                    assert!((got - want).abs() < 1e-9, "{}: {}", g.name(), small.render(&m));
                    neighbours += 1;
                }
            }
        }
        eprintln!(
            "{}: {} strings, {concrete} concrete, {neighbours} neighbours, max |Δ| = {worst:.2e}",
            g.name(),
            table.len()
        );
    }
}

#[test]
fn prefix_and_next_token_match_inside_algorithm() {
    for g in cases() {
        let g = lump(&g).grammar;
        let oracle = Oracle::new(&g).unwrap();
        let inside = InsideOracle::new(&g);
        let table = string_probabilities(&g, 10, 14);
        let mut prefixes: Vec<Vec<usize>> = table
            .keys()
            .flat_map(|s| (0..=s.len()).map(move |k| s[..k].to_vec()))
            .collect();
        prefixes.sort();
        prefixes.dedup();
        prefixes.sort_by_key(|p| p.len());
        prefixes.truncate(200);
        let eos = g.terminals().len();
        let mut worst: f64 = 0.0;
        for u in &prefixes {
            let pu = inside.prefix_probability(u);
            let chart = oracle.prefix_logprob(u).unwrap().exp();
            assert!((chart - pu).abs() < 1e-9 * pu.max(1e-3), "{}: {}", g.name(), g.render(u));
            let d = oracle.next_token_dist(u).unwrap();
            assert!((d.sum() - 1.0).abs() < 1e-9);
            for t in 0..=eos {
                let want = if t == eos {
                    inside.sentence_probability(u) / pu
                } else {
                    let mut ut = u.clone();
                    ut.push(t);
                    inside.prefix_probability(&ut) / pu
                };
                let p = d.prob(t);
                worst = worst.max((p - want).abs());
                assert!(
                    (p - want).abs() < 1e-9,
                    "{}: P({} | {}) = {p}, inside {want}",
                    g.name(),
                    if t == eos { "EOS" } else { g.terminal_name(t) },
                    g.render(u)
                );
            }
        }
        // The enumeration bracket must contain the chart value too; it is
        // loose on left-recursive grammars, so only containment is checked.
        for u in prefixes.iter().take(20) {
            let b = prefix_bracket(&g, u, 1e-10);
            let chart = oracle.prefix_logprob(u).unwrap().exp();
            assert!(b.contains(chart, 1e-12), "{}: {} {b:?} {chart}", g.name(), g.render(u));
            let s = bracket(&g, u, 1e-10, true);
            let p = oracle.string_logprob(u).unwrap().exp();
            assert!(s.contains(p, 1e-12), "{}: {} {s:?} {p}", g.name(), g.render(u));
        }
        eprintln!("{}: {} prefixes, max |Δ| = {worst:.2e}", g.name(), prefixes.len());
    }
}
