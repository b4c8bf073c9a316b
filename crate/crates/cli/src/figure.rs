//! CSV data behind each figure, cut from the artifacts of earlier runs.
//!
//! | id | source run | files |
//! |----|------------|-------|
//! | fig1a, fig1b, fig2a | `train` | `<id>.csv`: `step,total,<buckets>,overhead` |
//! | fig2b | `kl verify-outer` | `fig2b.csv`: `term,value` |
//! | fig3 | `kl recurrence` | `fig3.csv`: the sweep table |
//! | fig4 | `study` | `fig4.csv`: `architecture,population,seed,step,loss,restricted` |
//! | fig5 | `depth-probe` | `fig5_case_i.csv`, `fig5_case_ii.csv`: `i,error` |
//! | fig6 | `depth-probe` | `fig6a.csv`, `fig6b.csv`, `fig6c.csv`: `i,error` |
//! | fig7 | `study` | `fig7<a,b,...>.csv`, one per architecture: `population,seed,final_kl,final_kl_stderr` |

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use pcfg_lab::analysis::{DepthProbeCurve, ProbeCase, StudyReport, DEEP_PREFIX, FAULTY_PREFIX, SHALLOW_PREFIX};
use pcfg_lab::divergence::OuterReport;
use pcfg_lab::sampler::{OVERHEAD, ROOT_EOS};

use crate::error::{CliError, Result};

pub const IDS: [&str; 9] = ["fig1a", "fig1b", "fig2a", "fig2b", "fig3", "fig4", "fig5", "fig6", "fig7"];

fn artifact(from: &Path, name: &str) -> Result<String> {
    let p = from.join(name);
    fs::read_to_string(&p).map_err(|e| CliError::data(format!("missing artifact {}: {e}", p.display())))
}

pub fn emit(id: &str, from: &Path, out: &Path) -> Result<()> {
    let written = match id {
        "fig1a" | "fig1b" | "fig2a" => vec![kl_curve(id, from, out)?],
        "fig2b" => vec![outer(from, out)?],
        "fig3" => {
            fs::write(out.join("fig3.csv"), artifact(from, "sweep.csv")?)?;
            vec!["fig3.csv".to_string()]
        }
        "fig4" => vec![retention(from, out)?],
        "fig5" => probes(
            from,
            out,
            &[
                ("fig5_case_i.csv", ProbeCase::SameDepth),
                ("fig5_case_ii.csv", ProbeCase::Deepening),
            ],
        )?,
        "fig6" => probes(
            from,
            out,
            &[
                ("fig6a.csv", ProbeCase::Prefixed(SHALLOW_PREFIX.into())),
                ("fig6b.csv", ProbeCase::Prefixed(DEEP_PREFIX.into())),
                ("fig6c.csv", ProbeCase::Faulty(FAULTY_PREFIX.into())),
            ],
        )?,
        "fig7" => final_kl(from, out)?,
        _ => {
            return Err(CliError::usage(format!("unknown figure `{id}`; known: {}", IDS.join(", "))));
        }
    };
    for w in written {
        println!("{}", out.join(w).display());
    }
    Ok(())
}

/// Bucket columns of a KL curve with the structural ones (overhead strings,
/// end of sentence and terminals of mixed rules) folded into `overhead`.
fn kl_curve(id: &str, from: &Path, out: &Path) -> Result<String> {
    let text = artifact(from, "kl_curve.csv")?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    let col = |name: &str| header.iter().position(|h| h == name);
    let (step, total) = match (col("step"), col("total")) {
        (Some(s), Some(t)) => (s, t),
        _ => return Err(CliError::data("kl_curve.csv lacks step/total columns")),
    };
    let first_stderr = header.iter().position(|h| h.starts_with("stderr_")).unwrap_or(header.len());
    let buckets: Vec<usize> = (0..first_stderr)
        .filter(|&i| !["step", "total", "per_token"].contains(&header[i].as_str()))
        .collect();
    let structural = |h: &str| h == OVERHEAD || h == ROOT_EOS || (h.starts_with('<') && h.ends_with('>'));
    let named: Vec<usize> = buckets.iter().copied().filter(|&i| !structural(&header[i])).collect();
    let folded: Vec<usize> = buckets.iter().copied().filter(|&i| structural(&header[i])).collect();
    let name = format!("{id}.csv");
    let mut w = csv::Writer::from_path(out.join(&name))?;
    let mut h = vec!["step".to_string(), "total".into()];
    h.extend(named.iter().map(|&i| header[i].clone()));
    h.push("overhead".into());
    w.write_record(&h)?;
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| rec[i].parse::<f64>().unwrap_or(0.0);
        let mut row = vec![rec[step].to_string(), rec[total].to_string()];
        row.extend(named.iter().map(|&i| rec[i].to_string()));
        row.push(folded.iter().map(|&i| num(i)).fold(0.0, |a, b| a + b).to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(name)
}

fn outer(from: &Path, out: &Path) -> Result<String> {
    let r: OuterReport = serde_json::from_str(&artifact(from, "outer.json")?)?;
    let mut w = csv::Writer::from_path(out.join("fig2b.csv"))?;
    w.write_record(["term", "value"])?;
    for (t, v) in [
        ("kl_total", r.lhs),
        ("p_outer", r.p_a),
        ("q_outer", r.q_a),
        ("kl_outer", r.kl_a),
        ("kl_rest", r.kl_not_a),
        ("weighted_outer", r.p_a * r.kl_a),
        ("weighted_rest", r.p_not_a * r.kl_not_a),
        ("kl_membership", r.kl_star),
        ("split_sum", r.rhs),
        ("residual", r.residual),
        ("tail_bound", r.tail_bound),
    ] {
        w.write_record([t.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok("fig2b.csv".into())
}

fn study(from: &Path) -> Result<StudyReport> {
    Ok(serde_json::from_str(&artifact(from, "summary.json")?)?)
}

fn retention(from: &Path, out: &Path) -> Result<String> {
    let s = study(from)?;
    let mut w = csv::Writer::from_path(out.join("fig4.csv"))?;
    w.write_record(["architecture", "population", "seed", "step", "loss", "restricted"])?;
    for r in &s.runs {
        for p in r.retention.iter().flat_map(|c| &c.points) {
            w.write_record([
                r.architecture.clone(),
                r.population.clone(),
                r.seed.to_string(),
                p.step.to_string(),
                p.loss.to_string(),
                p.restricted.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok("fig4.csv".into())
}

fn probes(from: &Path, out: &Path, wanted: &[(&str, ProbeCase)]) -> Result<Vec<String>> {
    let curves: Vec<DepthProbeCurve> = serde_json::from_str(&artifact(from, "probe.json")?)?;
    let mut names = Vec::new();
    for (name, case) in wanted {
        let c = curves
            .iter()
            .find(|c| c.case == case.id())
            .ok_or_else(|| CliError::data(format!("probe.json has no `{}` curve", case.id())))?;
        let mut w = csv::Writer::from_path(out.join(name))?;
        w.write_record(["i", "error"])?;
        for (i, e) in c.i.iter().zip(&c.error) {
            w.write_record([i.to_string(), e.to_string()])?;
        }
        w.flush()?;
        names.push(name.to_string());
    }
    Ok(names)
}

fn final_kl(from: &Path, out: &Path) -> Result<Vec<String>> {
    let s = study(from)?;
    let mut by_arch: BTreeMap<usize, Vec<&pcfg_lab::analysis::RunRecord>> = BTreeMap::new();
    for r in &s.runs {
        let k = s
            .config
            .architectures
            .iter()
            .position(|a| a.name == r.architecture)
            .ok_or_else(|| CliError::data(format!("run architecture `{}` is not in the config", r.architecture)))?;
        by_arch.entry(k).or_default().push(r);
    }
    let mut names = Vec::new();
    for (k, runs) in by_arch {
        let name = format!("fig7{}.csv", (b'a' + k as u8) as char);
        let mut w = csv::Writer::from_path(out.join(&name))?;
        w.write_record(["population", "seed", "final_kl", "final_kl_stderr"])?;
        for r in runs {
            let (m, e) = r.final_kl.map_or((String::new(), String::new()), |e| (e.mean.to_string(), e.stderr.to_string()));
            w.write_record([r.population.clone(), r.seed.to_string(), m, e])?;
        }
        w.flush()?;
        names.push(name);
    }
    Ok(names)
}
