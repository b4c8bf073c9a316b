use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use pcfg_lab::analysis::{
    cosine_protocol, depth_probe, population_cka, pretraining_study, sequence_classes, ProbeCase, ProbeMetric,
    StudyConfig, DEEP_PREFIX, FAULTY_PREFIX, SHALLOW_PREFIX,
};
use pcfg_lab::arith::{self, BenchItem};
use pcfg_lab::bundled;
use pcfg_lab::divergence::{
    self, mc_kl_with, recurrence_sweep, verify_leaf_with, verify_outer, verify_top_level_with, write_kl_curve,
    write_sweep_csv, KlReport, ResidualReport,
};
use pcfg_lab::lm::{
    evaluate, oracle_lm, perturb_grammar, random_perturbation, synthetic_composed_lm, train, LanguageModel,
    ModelConfig, TrainConfig, TrainingLog, Transformer, UniformLm, Vocab,
};
use pcfg_lab::oracle::{derivational_entropy, expected_recursion, Oracle};
use pcfg_lab::sampler::{write_corpus, SampleLimits, Sampler};
use pcfg_lab::subgrammar::{decompose_dag, top_level};
use pcfg_lab::{parse_grammar, validate, Grammar};

use crate::error::{CliError, Result};
use crate::figure;
use crate::{
    ArithAction, ArithKind, Buckets, Command, KlAction, Metric, ModelArgs, OracleAction, RunConfig, StudyCmd, TrainCmd,
};

/// Fills in generated seeds and file-based settings, writes the run
/// directory and its `config.json`, then runs the command.
pub fn execute(mut rc: RunConfig) -> Result<()> {
    resolve(&mut rc.run)?;
    fs::create_dir_all(&rc.out)?;
    fs::write(rc.out.join("config.json"), serde_json::to_string_pretty(&rc)?)?;
    let out = rc.out.as_path();
    match &rc.run {
        Command::Validate(a) => run_validate(&a.grammar, out),
        Command::Decompose(a) => {
            let g = load_grammar(&a.grammar)?;
            let dag = decompose_dag(&g);
            fs::write(out.join("dag.json"), serde_json::to_string_pretty(&dag.to_json())?)?;
            print!("{}", dag.to_text());
            Ok(())
        }
        Command::TopLevel(a) => {
            let g = load_grammar(&a.grammar)?;
            let split = top_level(&g);
            write_json(out, "top_level.json", &split)?;
            for e in &split.subgrammars {
                println!("{}\tp={:.6}\tE[count]={:.6}\tproper={}", e.root, e.occurrence_prob, e.expected_count, e.proper);
            }
            for o in &split.overhead {
                println!("overhead\t{o}");
            }
            Ok(())
        }
        Command::Sample(a) => {
            let g = load_grammar(&a.grammar)?;
            let limits = SampleLimits {
                max_tokens: a.max_tokens,
                max_depth: a.max_depth,
                ..SampleLimits::default()
            };
            let c = Sampler::new(&g, limits).corpus(seed(a.seed), a.n)?;
            write_corpus(&g, &c.sentences, &out.join("corpus.jsonl"))?;
            let mean = c.sentences.iter().map(|s| s.tokens.len()).sum::<usize>() as f64 / a.n.max(1) as f64;
            println!("{} sentences, mean length {mean:.3}, acceptance rate {:.4}", a.n, c.acceptance_rate());
            Ok(())
        }
        Command::Oracle(o) => run_oracle(&o.action, out),
        Command::Train(t) => run_train(t, out),
        Command::Kl(k) => run_kl(&k.action, out),
        Command::DepthProbe(d) => {
            let g = load_grammar(&d.grammar)?;
            let (q, _) = load_model(&g, &d.model, 0.0, 0)?;
            let metric = match d.metric {
                Metric::Tv => ProbeMetric::Tv,
                Metric::Kl => ProbeMetric::Kl,
            };
            let mut curves = Vec::new();
            for case in [
                ProbeCase::SameDepth,
                ProbeCase::Deepening,
                ProbeCase::Prefixed(SHALLOW_PREFIX.into()),
                ProbeCase::Prefixed(DEEP_PREFIX.into()),
                ProbeCase::Faulty(FAULTY_PREFIX.into()),
            ] {
                let c = depth_probe(q.as_ref(), &g, &case, d.i_max, metric)?;
                let last = c.error.last().copied().unwrap_or(f64::NAN);
                println!("{}\ti={}\terror={last:.6}\tvalid_contexts={}", c.case, d.i_max, c.contexts_valid);
                curves.push(c);
            }
            write_json(out, "probe.json", &curves)
        }
        Command::Cka(c) => {
            let g = load_grammar(&c.grammar)?;
            let models = load_checkpoints(&g, &c.models)?;
            let limits = context_limits(&models[0]);
            let stream = stream(&g, c.subgrammar.as_deref(), c.n, seed(c.seed), limits)?;
            let refs: Vec<&Transformer> = models.iter().collect();
            let p = population_cka(&refs, &stream)?;
            write_json(out, "cka.json", &p)?;
            println!("attention {:.6}\tmlp {:.6}", p.attention_mean, p.mlp_mean);
            Ok(())
        }
        Command::Cosine(c) => {
            let g = load_grammar(&c.grammar)?;
            let models = load_checkpoints(&g, &c.models)?;
            let limits = context_limits(&models[0]);
            let s = seed(c.seed);
            let classes = sequence_classes(&g, &c.subgrammar, c.n, s, limits)?;
            let held_out = Sampler::new(&g, limits).corpus(s.wrapping_add(7), c.n)?.sentences;
            let losses = models
                .iter()
                .map(|m| Ok(evaluate(m, &held_out)?.0))
                .collect::<Result<Vec<f64>>>()?;
            let refs: Vec<&Transformer> = models.iter().collect();
            let t = cosine_protocol(&refs, &losses, &classes, c.quantile)?;
            write_json(out, "cosine.json", &t)?;
            for r in &t.rows {
                println!("{}\tattention {:.6}\tmlp {:.6}", r.class, r.attention, r.mlp);
            }
            Ok(())
        }
        Command::Study(s) => run_study(s, out),
        Command::Arith(a) => run_arith(&a.action, out),
        Command::Figure(f) => figure::emit(&f.id, &f.from, out),
        Command::Rerun(_) => Err(CliError::usage("a resolved config cannot hold `rerun`")),
    }
}

fn fresh_seed() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos() as u64).unwrap_or(0)
}

fn fill(seed: &mut Option<u64>) {
    if seed.is_none() {
        let s = fresh_seed();
        eprintln!("seed {s} (generated; recorded in config.json)");
        *seed = Some(s);
    }
}

fn seed(s: Option<u64>) -> u64 {
    s.expect("seeds are resolved before dispatch")
}

fn resolve(c: &mut Command) -> Result<()> {
    match c {
        Command::Sample(a) => fill(&mut a.seed),
        Command::Train(a) => fill(&mut a.seed),
        Command::Kl(k) => match &mut k.action {
            KlAction::Estimate(m) | KlAction::VerifyTop(m) | KlAction::VerifyLeaf(m) | KlAction::LossIdentity(m) => {
                fill(&mut m.seed)
            }
            KlAction::VerifyOuter(o) => fill(&mut o.seed),
            KlAction::Recurrence(r) => fill(&mut r.seed),
        },
        Command::Cka(a) => fill(&mut a.seed),
        Command::Cosine(a) => fill(&mut a.seed),
        Command::Arith(a) => {
            if let ArithAction::Gen { seed, .. } = &mut a.action {
                fill(seed)
            }
        }
        Command::Study(s) => {
            if s.study.is_none() {
                let mut cfg = match &s.config {
                    Some(p) => serde_json::from_str::<StudyConfig>(&fs::read_to_string(p)?)
                        .map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?,
                    None => StudyConfig::default(),
                };
                if let Some(r) = &s.subgrammar {
                    cfg.subgrammar = r.clone();
                }
                if let Some(n) = s.seeds {
                    cfg.seeds = n;
                }
                s.study = Some(cfg);
            }
        }
        _ => {}
    }
    Ok(())
}

fn write_json<T: Serialize>(out: &Path, name: &str, value: &T) -> Result<()> {
    fs::write(out.join(name), serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// A grammar file, or a bundled grammar by name (a `.pcfg` suffix and
/// directories are ignored for the lookup).
pub fn load_grammar(spec: &str) -> Result<Grammar> {
    let path = Path::new(spec);
    if path.is_file() {
        return Ok(parse_grammar(&fs::read_to_string(path)?)?);
    }
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or(spec);
    bundled::load(stem).ok_or_else(|| CliError::data(format!("`{spec}` is neither a grammar file nor a bundled grammar")))
}

fn context_limits(m: &Transformer) -> SampleLimits {
    SampleLimits {
        max_tokens: m.config().max_context - 1,
        ..divergence::KL_LIMITS
    }
}

fn load_checkpoint(g: &Grammar, path: &Path) -> Result<Transformer> {
    let m = Transformer::load(path)?;
    m.vocab().check_grammar(g)?;
    Ok(m)
}

fn load_checkpoints(g: &Grammar, paths: &[PathBuf]) -> Result<Vec<Transformer>> {
    paths.iter().map(|p| load_checkpoint(g, p)).collect()
}

/// A model by name or checkpoint path, with the sampling limits that keep
/// its inputs inside its context.
fn load_model(g: &Grammar, spec: &str, scale: f64, seed: u64) -> Result<(Box<dyn LanguageModel>, SampleLimits)> {
    let nts: Vec<&str> = g.nonterminals().iter().map(String::as_str).collect();
    Ok(match spec {
        "oracle" => (Box::new(oracle_lm(g)?), divergence::KL_LIMITS),
        "uniform" => (Box::new(UniformLm::new(g.terminals().len())), divergence::KL_LIMITS),
        "composed" => {
            let p = random_perturbation(g, &nts, scale, seed.wrapping_add(1));
            (Box::new(synthetic_composed_lm(g, &p)?), divergence::KL_LIMITS)
        }
        path => {
            let m = load_checkpoint(g, Path::new(path))?;
            let limits = context_limits(&m);
            (Box::new(m), limits)
        }
    })
}

fn stream(g: &Grammar, sub: Option<&str>, n: usize, seed: u64, limits: SampleLimits) -> Result<Vec<Vec<usize>>> {
    Ok(match sub {
        Some(root) => sequence_classes(g, root, n, seed, limits)?.subgrammar_only,
        None => Sampler::new(g, limits)
            .corpus(seed, n)?
            .sentences
            .into_iter()
            .map(|s| s.tokens)
            .collect(),
    })
}

fn run_validate(spec: &str, out: &Path) -> Result<()> {
    let g = load_grammar(spec)?;
    let r = validate(&g);
    write_json(out, "validation.json", &r)?;
    println!("{}", r.summary());
    for (nt, s) in &r.weight_sums {
        println!("  {nt}\t{s}");
    }
    if r.bad_sums.is_empty() && r.unreachable.is_empty() && r.unproductive.is_empty() && r.consistent {
        Ok(())
    } else {
        Err(CliError::data(format!("`{}` failed validation", g.name())))
    }
}

fn run_oracle(action: &OracleAction, out: &Path) -> Result<()> {
    match action {
        OracleAction::Logprob { grammar, tokens } | OracleAction::Prefix { grammar, tokens } => {
            let g = load_grammar(grammar)?;
            let o = Oracle::new(&g)?;
            let ids = g.encode_str(tokens)?;
            let lp = if matches!(action, OracleAction::Logprob { .. }) {
                o.string_logprob(&ids)?
            } else {
                o.prefix_logprob(&ids)?
            };
            write_json(out, "result.json", &serde_json::json!({ "tokens": tokens, "logprob": lp }))?;
            println!("{lp}");
        }
        OracleAction::Nextdist { grammar, tokens } => {
            let g = load_grammar(grammar)?;
            let d = Oracle::new(&g)?.next_token_dist(&g.encode_str(tokens)?)?;
            let mut rows = Vec::new();
            for t in 0..d.len() {
                let name = if t == d.eos_index() { "EOS" } else { g.terminal_name(t) };
                println!("{name}\t{}", d.prob(t));
                rows.push(serde_json::json!({ "token": name, "prob": d.prob(t) }));
            }
            write_json(out, "result.json", &rows)?;
        }
        OracleAction::Entropy { grammar } => {
            let r = derivational_entropy(&load_grammar(grammar)?)?;
            write_json(out, "entropy.json", &r)?;
            println!("derivational entropy {}", r.derivational_entropy);
            if r.ambiguous_warning {
                println!("warning: the grammar is ambiguous, so string entropy is lower");
            }
        }
        OracleAction::Recursion { grammar, nonterminal } => {
            let r = expected_recursion(&load_grammar(grammar)?, nonterminal)?;
            write_json(out, "recursion.json", &r)?;
            match r.blowup_factor {
                Some(b) => println!("E[R] {}\tblow-up {b}", r.expected_recursion),
                None => println!("E[R] {}\tunbounded", r.expected_recursion),
            }
        }
    }
    Ok(())
}

fn kl_checkpoint(g: &Grammar, m: &Transformer, t: &TrainCmd, seed: u64) -> Result<KlReport> {
    let limits = context_limits(m);
    let s = seed.wrapping_add(1);
    Ok(match t.buckets {
        Buckets::Top => mc_kl_with(g, m, t.kl_samples, s, limits)?,
        Buckets::Leaf => verify_leaf_with(g, m, t.kl_samples, s, limits)?.report,
    })
}

fn run_train(t: &TrainCmd, out: &Path) -> Result<()> {
    let g = load_grammar(&t.grammar)?;
    let seed = seed(t.seed);
    let mut model = match &t.resume {
        Some(p) => load_checkpoint(&g, p)?,
        None => {
            let cfg = ModelConfig {
                layers: t.layers,
                heads: t.heads,
                model_dim: t.model_dim,
                mlp_dim: t.mlp_dim,
                max_context: t.max_context,
                dropout: t.dropout,
                seed,
                ..ModelConfig::default()
            };
            Transformer::new(cfg, Vocab::from_grammar(&g))?
        }
    };
    let corpus = Sampler::new(&g, context_limits(&model)).corpus(seed, t.corpus_size)?.sentences;
    let chunk = if t.kl_every == 0 { t.steps.max(1) } else { t.kl_every };
    let mut log = TrainingLog::default();
    let mut curve = Vec::new();
    if t.kl_every > 0 {
        curve.push((model.step(), kl_checkpoint(&g, &model, t, seed)?));
    }
    let mut done = 0;
    while done < t.steps {
        let steps = chunk.min(t.steps - done);
        let cfg = TrainConfig {
            steps,
            batch_size: t.batch_size,
            lr: t.lr,
            warmup: t.warmup,
            grad_clip: t.grad_clip,
            seed,
            log_every: 1,
            ..TrainConfig::default()
        };
        let part = train(&mut model, &corpus, &cfg)?;
        log.buckets = part.buckets;
        log.rows.extend(part.rows);
        done += steps;
        if t.kl_every > 0 || done == t.steps {
            curve.push((model.step(), kl_checkpoint(&g, &model, t, seed)?));
        }
    }
    model.save(&out.join("model.ckpt"), true)?;
    log.write_csv(&out.join("train_log.csv"))?;
    write_kl_curve(&out.join("kl_curve.csv"), &curve)?;
    if let Some(last) = log.rows.last() {
        println!("step {}\tloss {:.6}", last.step, last.loss);
    }
    if let Some((step, r)) = curve.last() {
        println!("step {step}\tKL {:.6} ± {:.6} nats/sentence", r.total.mean, r.total.stderr);
    }
    Ok(())
}

fn print_kl(r: &KlReport) {
    println!("KL {:.6} ± {:.6} nats/sentence ({:.6} per token)", r.total.mean, r.total.stderr, r.per_token.mean);
    for (b, e) in &r.per_bucket {
        println!("  {b}\t{:.6} ± {:.6}", e.mean, e.stderr);
    }
}

fn residual(r: &ResidualReport, out: &Path) -> Result<()> {
    write_json(out, "residual.json", r)?;
    print_kl(&r.report);
    println!("{} residual {:e} (tolerance {:e})", r.level, r.report.max_residual, r.tolerance);
    if r.holds {
        Ok(())
    } else {
        Err(CliError::numerical(format!("{} partition residual exceeds the tolerance", r.level)))
    }
}

fn run_kl(action: &KlAction, out: &Path) -> Result<()> {
    let model = |m: &ModelArgs| -> Result<(Grammar, Box<dyn LanguageModel>, SampleLimits)> {
        let g = load_grammar(&m.grammar)?;
        let (q, l) = load_model(&g, &m.model, m.scale, seed(m.seed))?;
        Ok((g, q, l))
    };
    match action {
        KlAction::Estimate(m) => {
            let (g, q, l) = model(m)?;
            let r = mc_kl_with(&g, q.as_ref(), m.n, seed(m.seed), l)?;
            write_json(out, "kl.json", &r)?;
            print_kl(&r);
            Ok(())
        }
        KlAction::VerifyTop(m) => {
            let (g, q, l) = model(m)?;
            residual(&verify_top_level_with(&g, q.as_ref(), m.n, seed(m.seed), l)?, out)
        }
        KlAction::VerifyLeaf(m) => {
            let (g, q, l) = model(m)?;
            residual(&verify_leaf_with(&g, q.as_ref(), m.n, seed(m.seed), l)?, out)
        }
        KlAction::LossIdentity(m) => {
            let (g, q, l) = model(m)?;
            let r = divergence::loss_identity_with(&g, q.as_ref(), m.n, seed(m.seed), l)?;
            write_json(out, "loss_identity.json", &r)?;
            println!(
                "cross-entropy {:.6} = KL {:.6} + entropy {:.6} ({}); residual {:.3e}, 3 stderr {:.3e}",
                r.cross_entropy.mean,
                r.kl.mean,
                r.entropy.mean,
                r.entropy_source,
                r.residual,
                3.0 * r.combined_stderr
            );
            if r.holds {
                Ok(())
            } else {
                Err(CliError::numerical("the loss identity does not hold within 3 stderr"))
            }
        }
        KlAction::VerifyOuter(o) => {
            let g = load_grammar(&o.grammar)?;
            let keep = keep_rules(&g, &o.keep)?;
            let nts: Vec<&str> = g.nonterminals().iter().map(String::as_str).collect();
            let q = perturb_grammar(&g, &random_perturbation(&g, &nts, o.scale, seed(o.seed).wrapping_add(1)))?;
            let r = verify_outer(&g, &keep, &q, o.n, seed(o.seed))?;
            write_json(out, "outer.json", &r)?;
            println!(
                "KL {:.9} = {:.9} (residual {:.3e}, tail bound {:.3e}, cap {})",
                r.lhs, r.rhs, r.residual, r.tail_bound, r.size_cap
            );
            if r.holds {
                Ok(())
            } else {
                Err(CliError::numerical("the outer split residual exceeds twice the tail bound"))
            }
        }
        KlAction::Recurrence(r) => {
            let rows = recurrence_sweep(&r.p, r.delta, r.n, seed(r.seed))?;
            write_sweep_csv(&out.join("sweep.csv"), &rows)?;
            write_json(out, "sweep.json", &rows)?;
            for (p, row) in r.p.iter().zip(&rows) {
                let show = |e: Option<divergence::Estimate>| {
                    e.map(|e| format!("{:.6} ± {:.6}", e.mean, e.stderr)).unwrap_or_else(|| "unbounded".into())
                };
                println!("p={p}\tE[R]={:.3}\tpredicted {}\tmeasured {}", row.expected_recursion, show(row.predicted), show(row.measured));
            }
            Ok(())
        }
    }
}

/// Rule references from a keep file, or a comma list.
fn keep_rules(g: &Grammar, spec: &str) -> Result<Vec<usize>> {
    let text = if Path::new(spec).is_file() {
        fs::read_to_string(spec)?
    } else {
        spec.replace(',', " ")
    };
    Ok(bundled::parse_keep(g, &text)?)
}

fn run_study(s: &StudyCmd, out: &Path) -> Result<()> {
    let g = load_grammar(&s.grammar)?;
    let cfg = s.study.as_ref().expect("study settings are resolved before dispatch");
    let runs = out.join("runs");
    let report = pretraining_study(&g, cfg, s.checkpoints.then_some(runs.as_path()))?;
    report.write(out)?;
    for r in &report.runs {
        let kl = r.final_kl.map(|e| format!("{:.6}", e.mean)).unwrap_or_default();
        let reg = r.retention.as_ref().map(|c| format!("{:+.2}%", 100.0 * c.max_regression)).unwrap_or_default();
        println!("{}\t{}\tseed {}\tloss {:.6}\tKL {kl}\tmax regression {reg}", r.architecture, r.population, r.seed, r.final_loss);
    }
    Ok(())
}

fn run_arith(action: &ArithAction, out: &Path) -> Result<()> {
    match action {
        ArithAction::Gen { kind, count, size, seed: s } => {
            let s = seed(*s);
            let mut lines = String::new();
            for k in 0..*count {
                let ks = s.wrapping_add(k as u64);
                let e = match kind {
                    ArithKind::Chain => arith::gen_shallow_chain(ks, *size)?,
                    ArithKind::Deep => arith::gen_deep_expr(ks, *size)?,
                };
                lines += &serde_json::to_string(&BenchItem::new(&e)?)?;
                lines.push('\n');
            }
            fs::write(out.join("bench.jsonl"), lines)?;
            println!("{count} expressions written to {}", out.join("bench.jsonl").display());
        }
        ArithAction::Eval { expr, expr_file } => {
            let text = match (expr, expr_file) {
                (Some(e), _) => e.clone(),
                (None, Some(p)) => fs::read_to_string(p)?,
                (None, None) => return Err(CliError::usage("give --expr or --expr-file")),
            };
            let v = arith::eval_exact(text.trim())?;
            let shown = arith::format_rational(&v);
            write_json(out, "result.json", &serde_json::json!({ "value": shown }))?;
            println!("{shown}");
        }
    }
    Ok(())
}
