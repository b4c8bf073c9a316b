use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcfg-lab"))
        .args(args)
        .current_dir(root())
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn out_arg(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

#[test]
fn validate_bundled_and_file() {
    let t = tempfile::tempdir().unwrap();
    let o = run(&["validate", "grammars/nested_parens.pcfg", "--out", &out_arg(t.path(), "v")]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("consistent=true"));
    assert!(t.path().join("v/validation.json").exists());
    assert!(t.path().join("v/config.json").exists());

    let bad = t.path().join("bad.pcfg");
    fs::write(&bad, "start: S\nS -> \"a\" [0.5] | \"b\" [0.2]\n").unwrap();
    let o = run(&["validate", bad.to_str().unwrap(), "--out", &out_arg(t.path(), "b")]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    let o = run(&["figure", "fig99", "--from", ".", "--out", &out_arg(t.path(), "f")]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["figure", "fig1a", "--from", &out_arg(t.path(), "none"), "--out", &out_arg(t.path(), "g")]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["oracle", "logprob", "--grammar", "nested_parens", "( b", "--out", &out_arg(t.path(), "o")]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["arith", "eval", "--expr", "1 / (2 - 2)", "--out", &out_arg(t.path(), "a")]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn verify_top_on_kl_example() {
    let t = tempfile::tempdir().unwrap();
    let o = run(&[
        "kl", "verify-top", "--grammar", "kl_example_1.pcfg", "--model", "oracle", "--n", "10000", "--seed", "0",
        "--out", &out_arg(t.path(), "k"),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(t.path().join("k/residual.json")).unwrap()).unwrap();
    assert!(r["report"]["max_residual"].as_f64().unwrap() < 1e-9);
    assert_eq!(r["holds"], true);
}

#[test]
fn arith_eval_reference_files() {
    let t = tempfile::tempdir().unwrap();
    let o = run(&["arith", "eval", "--expr-file", "data/appendix_chain.txt", "--out", &out_arg(t.path(), "c")]);
    assert_eq!(stdout(&o).trim(), "707449/1260");
    let o = run(&["arith", "eval", "--expr-file", "data/appendix_deep.txt", "--out", &out_arg(t.path(), "d")]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "-7408002035031/13099520");
}

#[test]
fn rerun_reproduces_and_rejects_unknown_keys() {
    let t = tempfile::tempdir().unwrap();
    let first = out_arg(t.path(), "first");
    let o = run(&["kl", "estimate", "--grammar", "nested_parens", "--model", "composed", "--n", "500", "--out", &first]);
    assert_eq!(o.status.code(), Some(0));
    let config = t.path().join("first/config.json");
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(&config).unwrap()).unwrap();
    assert!(cfg["run"]["seed"].is_u64(), "generated seed is recorded");
    let o = run(&["rerun", config.to_str().unwrap(), "--out", &out_arg(t.path(), "second")]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        fs::read(t.path().join("first/kl.json")).unwrap(),
        fs::read(t.path().join("second/kl.json")).unwrap()
    );

    let mut bad = cfg.clone();
    bad["run"]["samples"] = 3.into();
    let bad_path = t.path().join("bad.json");
    fs::write(&bad_path, bad.to_string()).unwrap();
    let o = run(&["rerun", bad_path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("samples"));
}

#[test]
fn train_then_fig1a() {
    let t = tempfile::tempdir().unwrap();
    let train = out_arg(t.path(), "train");
    let o = run(&[
        "train", "--grammar", "kl_example_1", "--seed", "3", "--layers", "1", "--model-dim", "16", "--mlp-dim", "32",
        "--steps", "20", "--kl-every", "10", "--kl-samples", "50", "--corpus-size", "100", "--batch-size", "8", "--out",
        &train,
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["model.ckpt", "train_log.csv", "kl_curve.csv", "config.json"] {
        assert!(t.path().join("train").join(f).exists(), "{f}");
    }
    let o = run(&["figure", "fig1a", "--from", &train, "--out", &out_arg(t.path(), "fig")]);
    assert_eq!(o.status.code(), Some(0));
    let csv = fs::read_to_string(t.path().join("fig/fig1a.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,total,L2_1,L2_2,L2_3,overhead"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|x| x.parse().unwrap()).collect()).collect();
    assert_eq!(rows.iter().map(|r| r[0]).collect::<Vec<_>>(), [0.0, 10.0, 20.0]);
    for r in &rows {
        let parts: f64 = r[2..].iter().sum();
        assert!((parts - r[1]).abs() < 1e-9 * r[1].abs().max(1.0));
    }
}

#[test]
fn fig5_has_two_panels() {
    let t = tempfile::tempdir().unwrap();
    let probe = out_arg(t.path(), "probe");
    let o = run(&["depth-probe", "--model", "uniform", "--i-max", "6", "--out", &probe]);
    assert_eq!(o.status.code(), Some(0));
    let o = run(&["figure", "fig5", "--from", &probe, "--out", &out_arg(t.path(), "fig")]);
    assert_eq!(o.status.code(), Some(0));
    for f in ["fig5_case_i.csv", "fig5_case_ii.csv"] {
        let csv = fs::read_to_string(t.path().join("fig").join(f)).unwrap();
        assert!(csv.starts_with("i,error\n"));
        assert_eq!(csv.lines().count(), 7);
    }
    let o = run(&["figure", "fig6", "--from", &probe, "--out", &out_arg(t.path(), "fig6")]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn recurrence_sweep_and_fig3() {
    let t = tempfile::tempdir().unwrap();
    let dir = out_arg(t.path(), "rec");
    let o = run(&["kl", "recurrence", "--p", "0.75,1.0", "--n", "300", "--seed", "1", "--out", &dir]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["figure", "fig3", "--from", &dir, "--out", &out_arg(t.path(), "fig")]);
    assert_eq!(o.status.code(), Some(0));
    let csv = fs::read_to_string(t.path().join("fig/fig3.csv")).unwrap();
    assert!(csv.starts_with("p,expected_recursion,"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn outer_split_and_fig2b() {
    let t = tempfile::tempdir().unwrap();
    let dir = out_arg(t.path(), "outer");
    let o = run(&[
        "kl", "verify-outer", "--grammar", "unified_subgrammar", "--keep", "grammars/unified_subgrammar.keep", "--seed",
        "4", "--n", "100", "--out", &dir,
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["figure", "fig2b", "--from", &dir, "--out", &out_arg(t.path(), "fig")]);
    assert_eq!(o.status.code(), Some(0));
    assert!(fs::read_to_string(t.path().join("fig/fig2b.csv")).unwrap().contains("kl_membership"));
}

#[test]
fn study_with_tiny_settings() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("study.json");
    fs::write(
        &cfg,
        r#"{"subgrammar": "L1b", "seeds": 2, "pretrain_epochs": [1], "continue_epochs": 1,
            "corpus_size": 16, "eval_size": 6, "batch_size": 8, "warmup": 0, "max_context": 64,
            "kl_samples": 20, "eval_every": 1,
            "architectures": [{"name": "tiny", "layers": 1, "heads": 2, "model_dim": 8, "mlp_dim": 16}]}"#,
    )
    .unwrap();
    let dir = out_arg(t.path(), "study");
    let o = run(&["study", "--config", cfg.to_str().unwrap(), "--checkpoints", "--out", &dir]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["summary.json", "cka_table.csv", "final_kl.csv", "config.json"] {
        assert!(t.path().join("study").join(f).exists(), "{f}");
    }
    assert!(t.path().join("study/runs/tiny/scratch/seed0.ckpt").exists());
    for id in ["fig4", "fig7"] {
        let o = run(&["figure", id, "--from", &dir, "--out", &out_arg(t.path(), id)]);
        assert_eq!(o.status.code(), Some(0));
    }
    assert!(t.path().join("fig7/fig7a.csv").exists());

    fs::write(&cfg, r#"{"seeds": 2, "epochs": 3}"#).unwrap();
    let o = run(&["study", "--config", cfg.to_str().unwrap(), "--out", &out_arg(t.path(), "bad")]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn cka_and_cosine_on_checkpoints() {
    let t = tempfile::tempdir().unwrap();
    let mut ckpts = Vec::new();
    for seed in ["1", "2"] {
        let dir = out_arg(t.path(), &format!("m{seed}"));
        let o = run(&[
            "train", "--grammar", "abc", "--seed", seed, "--layers", "1", "--model-dim", "8", "--mlp-dim", "16",
            "--max-context", "64", "--steps", "2", "--corpus-size", "8", "--batch-size", "4", "--kl-samples", "5",
            "--out", &dir,
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        ckpts.push(format!("{dir}/model.ckpt"));
    }
    let models = ckpts.join(",");
    let o = run(&["cka", "--grammar", "abc", "--models", &models, "--n", "5", "--seed", "0", "--out", &out_arg(t.path(), "cka")]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&[
        "cosine", "--grammar", "abc", "--subgrammar", "L1a", "--models", &models, "--n", "4", "--seed", "0", "--out",
        &out_arg(t.path(), "cos"),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("only vs without"));
}
