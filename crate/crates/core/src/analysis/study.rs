//! Subgrammar pretraining against training from scratch, with paired seeds.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::divergence::{mc_kl_with, Estimate};
use crate::grammar::Grammar;
use crate::lm::{evaluate, train, ModelConfig, TrainConfig, Transformer, Vocab};
use crate::sampler::{AnnotatedSentence, SampleLimits, Sampler, ROOT_EOS};
use crate::subgrammar::{classify_position, inner_subgrammar, top_level, Position};

use super::cka::population_cka;
use super::cosine::{cosine_protocol, CosineTable, SequenceClasses};
use super::AnalysisError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub name: String,
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub mlp_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    /// Root nonterminal of the pretraining subgrammar.
    pub subgrammar: String,
    pub seeds: usize,
    pub first_seed: u64,
    /// One pretrained population per entry.
    pub pretrain_epochs: Vec<u32>,
    /// Epochs on the full grammar, for both populations.
    pub continue_epochs: u32,
    /// Sentences per training corpus (full grammar and subgrammar alike).
    pub corpus_size: usize,
    /// Held-out sentences per evaluation class.
    pub eval_size: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: u64,
    pub max_context: usize,
    pub architectures: Vec<Architecture>,
    /// Fraction of seeds, best final loss first, averaged by the cosine
    /// protocol.
    pub cosine_quantile: f64,
    /// Samples per final KL estimate; 0 skips it.
    pub kl_samples: usize,
    /// Retention curve resolution in steps.
    pub eval_every: u64,
    pub data_seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            subgrammar: "L1a".into(),
            seeds: 30,
            first_seed: 0,
            pretrain_epochs: vec![10],
            continue_epochs: 10,
            corpus_size: 2000,
            eval_size: 100,
            batch_size: 32,
            lr: 1e-3,
            warmup: 100,
            max_context: 128,
            architectures: vec![
                Architecture {
                    name: "2-layer".into(),
                    layers: 2,
                    heads: 2,
                    model_dim: 64,
                    mlp_dim: 256,
                },
                Architecture {
                    name: "4-layer".into(),
                    layers: 4,
                    heads: 2,
                    model_dim: 64,
                    mlp_dim: 256,
                },
            ],
            cosine_quantile: 0.25,
            kl_samples: 500,
            eval_every: 25,
            data_seed: 0,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        let bad = |m: &str| Err(AnalysisError::InvalidArgument(m.into()));
        if self.seeds == 0 || self.architectures.is_empty() || self.pretrain_epochs.is_empty() {
            return bad("seeds, architectures and pretrain_epochs must be non-empty");
        }
        if self.corpus_size == 0 || self.eval_size < 2 || self.batch_size == 0 || self.eval_every == 0 {
            return bad("corpus_size, batch_size and eval_every must be positive and eval_size at least 2");
        }
        if self.max_context < 2 {
            return bad("max_context must be at least 2");
        }
        Ok(())
    }

    fn steps(&self, epochs: u32) -> u64 {
        epochs as u64 * self.corpus_size.div_ceil(self.batch_size) as u64
    }

    fn limits(&self) -> SampleLimits {
        SampleLimits {
            max_tokens: self.max_context - 1,
            ..SampleLimits::default()
        }
    }

    fn train_config(&self, steps: u64, seed: u64) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: self.batch_size,
            lr: self.lr,
            warmup: self.warmup,
            seed,
            log_every: steps.max(1),
            ..TrainConfig::default()
        }
    }

    fn model(&self, arch: &Architecture, seed: u64, vocab: Vocab) -> Result<Transformer, AnalysisError> {
        let cfg = ModelConfig {
            layers: arch.layers,
            heads: arch.heads,
            model_dim: arch.model_dim,
            mlp_dim: arch.mlp_dim,
            max_context: self.max_context,
            seed,
            ..ModelConfig::default()
        };
        Ok(Transformer::new(cfg, vocab)?)
    }
}

/// Sentences of one inner subgrammar rewritten into the full grammar's
/// terminal ids, every token in the subgrammar's bucket.
fn lift_corpus(g: &Grammar, sub: &Grammar, root: &str, sentences: Vec<AnnotatedSentence>) -> Result<Vec<AnnotatedSentence>, AnalysisError> {
    sentences
        .into_iter()
        .map(|mut s| {
            s.tokens = s
                .tokens
                .iter()
                .map(|&t| {
                    g.terminal_id(sub.terminal_name(t))
                        .ok_or_else(|| AnalysisError::InvalidArgument(format!("terminal `{}` missing", sub.terminal_name(t))))
                })
                .collect::<Result<_, _>>()?;
            s.buckets = vec![root.to_string(); s.tokens.len()];
            s.buckets.push(ROOT_EOS.into());
            Ok(s)
        })
        .collect()
}

/// The corpora one study needs.
#[derive(Debug, Clone)]
pub struct StudyData {
    pub full: Vec<AnnotatedSentence>,
    pub subgrammar: Vec<AnnotatedSentence>,
    pub eval_full: Vec<AnnotatedSentence>,
    pub classes: SequenceClasses,
}

fn inner_corpus(g: &Grammar, root: &str, seed: u64, n: usize, limits: SampleLimits) -> Result<Vec<AnnotatedSentence>, AnalysisError> {
    let sub = inner_subgrammar(g, root)?;
    let c = Sampler::new(&sub, limits).corpus(seed, n)?;
    lift_corpus(g, &sub, root, c.sentences)
}

/// Held-out sentences of the three cosine classes for subgrammar `root`,
/// `n` per class. Sentences without the subgrammar come from the inner
/// corpora of the other top-level subgrammars, split evenly.
pub fn sequence_classes(g: &Grammar, root: &str, n: usize, seed: u64, limits: SampleLimits) -> Result<SequenceClasses, AnalysisError> {
    let only = inner_corpus(g, root, seed, n, limits)?.into_iter().map(|x| x.tokens).collect();
    let others: Vec<String> = top_level(g)
        .subgrammars
        .iter()
        .filter(|e| e.proper && e.root != root)
        .map(|e| e.root.clone())
        .collect();
    if others.is_empty() {
        return Err(AnalysisError::EmptyClass(super::cosine::WITHOUT.into()));
    }
    let mut without = Vec::new();
    for (k, r) in others.iter().enumerate() {
        let share = n / others.len() + usize::from(k < n % others.len());
        let s = seed.wrapping_add(1 + k as u64);
        without.extend(inner_corpus(g, r, s, share, limits)?.into_iter().map(|x| x.tokens));
    }
    let with = Sampler::new(g, limits).corpus(seed.wrapping_add(1000), n)?.sentences;
    Ok(SequenceClasses {
        subgrammar_only: only,
        without_subgrammar: without,
        with_subgrammar: with.into_iter().map(|x| x.tokens).collect(),
    })
}

pub fn study_data(g: &Grammar, cfg: &StudyConfig) -> Result<StudyData, AnalysisError> {
    let limits = cfg.limits();
    let s = cfg.data_seed;
    let eval_full = Sampler::new(g, limits).corpus(s.wrapping_add(1), cfg.eval_size)?.sentences;
    let mut classes = sequence_classes(g, &cfg.subgrammar, cfg.eval_size, s.wrapping_add(3), limits)?;
    classes.with_subgrammar = eval_full.iter().map(|x| x.tokens.clone()).collect();
    Ok(StudyData {
        full: Sampler::new(g, limits).corpus(s, cfg.corpus_size)?.sentences,
        subgrammar: inner_corpus(g, &cfg.subgrammar, s.wrapping_add(2), cfg.corpus_size, limits)?,
        eval_full,
        classes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionPoint {
    pub step: u64,
    pub loss: f64,
    pub restricted: f64,
}

/// Restricted loss of the pretrained subgrammar's bucket on held-out
/// full-grammar sentences while training continues on the full grammar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionCurve {
    pub root: String,
    pub position: Position,
    /// Value at the end of pretraining.
    pub baseline: f64,
    pub points: Vec<RetentionPoint>,
    /// `max(restricted) / baseline − 1` over the continuation.
    pub max_regression: f64,
}

impl RetentionCurve {
    pub fn write_csv(&self, path: &Path) -> Result<(), AnalysisError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "loss", &format!("loss[{}]", self.root)])?;
        for p in &self.points {
            w.write_record([p.step.to_string(), p.loss.to_string(), p.restricted.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Outcome of one pretrain-then-continue run.
pub struct PretrainedRun {
    pub pretrained: Transformer,
    pub model: Transformer,
    pub curve: RetentionCurve,
}

fn restricted(model: &Transformer, eval: &[AnnotatedSentence], root: &str) -> Result<(f64, f64), AnalysisError> {
    let (loss, per) = evaluate(model, eval)?;
    let r = per
        .get(root)
        .copied()
        .ok_or_else(|| AnalysisError::EmptyClass(format!("no `{root}` tokens in the evaluation set")))?;
    Ok((loss, r))
}

/// Pretrains on the subgrammar for `pretrain_epochs`, then continues on the
/// full grammar, evaluating the subgrammar's bucket every `eval_every` steps.
pub fn pretrain_and_continue(
    g: &Grammar,
    cfg: &StudyConfig,
    data: &StudyData,
    arch: &Architecture,
    seed: u64,
    pretrain_epochs: u32,
) -> Result<PretrainedRun, AnalysisError> {
    let root = cfg.subgrammar.as_str();
    let position = classify_position(g, root)?;
    let wrap = |e: crate::lm::LmError| AnalysisError::Training { seed, source: e };
    let mut model = cfg.model(arch, seed, Vocab::from_grammar(g))?;
    let pre_steps = cfg.steps(pretrain_epochs);
    if pre_steps > 0 {
        train(&mut model, &data.subgrammar, &cfg.train_config(pre_steps, seed)).map_err(wrap)?;
    }
    let pretrained = model.clone();
    let (loss, baseline) = restricted(&model, &data.eval_full, root)?;
    let mut points = vec![RetentionPoint {
        step: model.step(),
        loss,
        restricted: baseline,
    }];
    let total = cfg.steps(cfg.continue_epochs);
    let start = model.step();
    let mut done = 0;
    while done < total {
        let chunk = cfg.eval_every.min(total - done);
        // the learning rate warms up again on the new distribution
        let tc = TrainConfig {
            warmup_from: start,
            ..cfg.train_config(chunk, seed)
        };
        train(&mut model, &data.full, &tc).map_err(wrap)?;
        done += chunk;
        let (loss, r) = restricted(&model, &data.eval_full, root)?;
        points.push(RetentionPoint {
            step: model.step(),
            loss,
            restricted: r,
        });
    }
    let worst = points.iter().map(|p| p.restricted).fold(f64::NEG_INFINITY, f64::max);
    Ok(PretrainedRun {
        pretrained,
        model,
        curve: RetentionCurve {
            root: root.into(),
            position,
            baseline,
            points,
            max_regression: worst / baseline - 1.0,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub architecture: String,
    /// `scratch` or `pretrained-<epochs>`.
    pub population: String,
    pub seed: u64,
    pub pretrain_epochs: u32,
    pub final_loss: f64,
    pub final_bucket_losses: BTreeMap<String, f64>,
    pub final_kl: Option<Estimate>,
    pub retention: Option<RetentionCurve>,
}

/// Columns of the CKA table: one per architecture and pretraining length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaColumn {
    pub label: String,
    /// `(attention, mlp)` population means.
    pub full_scratch: (f64, f64),
    pub full_pretrained: (f64, f64),
    pub sub_scratch: (f64, f64),
    pub sub_pretrained: (f64, f64),
    /// Pre-continuation checkpoints on subgrammar sequences.
    pub sub_pretrain_only: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineColumn {
    pub label: String,
    pub scratch: CosineTable,
    pub pretrained: CosineTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub config: StudyConfig,
    pub grammar: String,
    pub runs: Vec<RunRecord>,
    /// Present when each population has at least two seeds.
    pub cka: Vec<CkaColumn>,
    pub cosine: Vec<CosineColumn>,
}

fn pct(scratch: f64, pre: f64) -> f64 {
    100.0 * (pre - scratch) / scratch
}

impl StudyReport {
    /// Table of mean pairwise CKA: sections for full-grammar and subgrammar
    /// sequences, rows per population, an attention and an MLP column per
    /// architecture and pretraining length.
    pub fn write_cka_table(&self, path: &Path) -> Result<(), AnalysisError> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["section".to_string(), "row".into()];
        for c in &self.cka {
            header.push(format!("{} attention", c.label));
            header.push(format!("{} mlp", c.label));
        }
        w.write_record(&header)?;
        type Pick = fn(&CkaColumn) -> (f64, f64);
        let sections: [(&str, Pick, Pick); 2] = [
            ("full grammar sequences", |c| c.full_scratch, |c| c.full_pretrained),
            ("subgrammar sequences", |c| c.sub_scratch, |c| c.sub_pretrained),
        ];
        for (section, a, b) in sections {
            let mut rows: Vec<Vec<String>> = ["from scratch", "with pretraining", "percentage change"]
                .iter()
                .map(|r| vec![section.to_string(), r.to_string()])
                .collect();
            for c in &self.cka {
                let (s, p) = (a(c), b(c));
                rows[0].extend([s.0.to_string(), s.1.to_string()]);
                rows[1].extend([p.0.to_string(), p.1.to_string()]);
                rows[2].extend([pct(s.0, p.0).to_string(), pct(s.1, p.1).to_string()]);
            }
            for r in rows {
                w.write_record(&r)?;
            }
        }
        let mut last = vec!["subgrammar sequences".to_string(), "subgrammar pretraining only".into()];
        for c in &self.cka {
            last.extend([c.sub_pretrain_only.0.to_string(), c.sub_pretrain_only.1.to_string()]);
        }
        w.write_record(&last)?;
        w.flush()?;
        Ok(())
    }

    /// Mean cosine similarity per class, from scratch against pretrained.
    pub fn write_cosine_table(&self, column: &CosineColumn, path: &Path) -> Result<(), AnalysisError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["section", "row", "attention", "mlp"])?;
        for (s, p) in column.scratch.rows.iter().zip(&column.pretrained.rows) {
            w.write_record([s.class.as_str(), "from scratch", &s.attention.to_string(), &s.mlp.to_string()])?;
            w.write_record([p.class.as_str(), "with pretraining", &p.attention.to_string(), &p.mlp.to_string()])?;
            w.write_record([
                s.class.as_str(),
                "percentage change",
                &pct(s.attention, p.attention).to_string(),
                &pct(s.mlp, p.mlp).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// One row per run: the data behind the final-KL distributions.
    pub fn write_final_kl(&self, path: &Path) -> Result<(), AnalysisError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["architecture", "population", "seed", "final_loss", "final_kl", "final_kl_stderr"])?;
        for r in &self.runs {
            let (m, s) = r.final_kl.map_or((String::new(), String::new()), |e| (e.mean.to_string(), e.stderr.to_string()));
            w.write_record([
                r.architecture.clone(),
                r.population.clone(),
                r.seed.to_string(),
                r.final_loss.to_string(),
                m,
                s,
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `summary.json`, the tables, final-KL data and retention curves.
    pub fn write(&self, dir: &Path) -> Result<(), AnalysisError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(self)?)?;
        self.write_final_kl(&dir.join("final_kl.csv"))?;
        if !self.cka.is_empty() {
            self.write_cka_table(&dir.join("cka_table.csv"))?;
        }
        for c in &self.cosine {
            self.write_cosine_table(c, &dir.join(format!("cosine_{}.csv", file_label(&c.label))))?;
        }
        for r in &self.runs {
            if let Some(curve) = &r.retention {
                let name = format!("retention_{}_{}_seed{}.csv", file_label(&r.architecture), r.population, r.seed);
                curve.write_csv(&dir.join(name))?;
            }
        }
        Ok(())
    }
}

fn refs(v: &[Transformer]) -> Vec<&Transformer> {
    v.iter().collect()
}

fn file_label(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

/// Runs every architecture × seed from scratch and with each pretraining
/// length. Run checkpoints go under `runs_dir` when given.
pub fn pretraining_study(g: &Grammar, cfg: &StudyConfig, runs_dir: Option<&Path>) -> Result<StudyReport, AnalysisError> {
    cfg.validate()?;
    let data = study_data(g, cfg)?;
    let mut runs = Vec::new();
    let mut cka = Vec::new();
    let mut cosine = Vec::new();
    let sub_stream = &data.classes.subgrammar_only;
    let full_stream = &data.classes.with_subgrammar;
    for arch in &cfg.architectures {
        let mut scratch_models = Vec::new();
        for k in 0..cfg.seeds {
            let seed = cfg.first_seed + k as u64;
            let mut m = cfg.model(arch, seed, Vocab::from_grammar(g))?;
            let steps = cfg.steps(cfg.continue_epochs);
            if steps > 0 {
                train(&mut m, &data.full, &cfg.train_config(steps, seed))
                    .map_err(|e| AnalysisError::Training { seed, source: e })?;
            }
            runs.push(record(g, cfg, &data, arch, "scratch".into(), seed, 0, &m, None)?);
            save_run(runs_dir, arch, "scratch", seed, &m)?;
            scratch_models.push(m);
        }
        let scratch_losses: Vec<f64> = runs[runs.len() - cfg.seeds..].iter().map(|r| r.final_loss).collect();
        for &epochs in &cfg.pretrain_epochs {
            let population = format!("pretrained-{epochs}");
            let mut pre_models = Vec::new();
            let mut pre_only = Vec::new();
            for k in 0..cfg.seeds {
                let seed = cfg.first_seed + k as u64;
                let run = pretrain_and_continue(g, cfg, &data, arch, seed, epochs)?;
                runs.push(record(g, cfg, &data, arch, population.clone(), seed, epochs, &run.model, Some(run.curve))?);
                save_run(runs_dir, arch, &population, seed, &run.model)?;
                pre_models.push(run.model);
                pre_only.push(run.pretrained);
            }
            let label = format!("{} pretrain {epochs}", arch.name);
            let pre_losses: Vec<f64> = runs[runs.len() - cfg.seeds..].iter().map(|r| r.final_loss).collect();
            cosine.push(CosineColumn {
                label: label.clone(),
                scratch: cosine_protocol(&refs(&scratch_models), &scratch_losses, &data.classes, cfg.cosine_quantile)?,
                pretrained: cosine_protocol(&refs(&pre_models), &pre_losses, &data.classes, cfg.cosine_quantile)?,
            });
            if cfg.seeds >= 2 {
                let pair = |models: &[Transformer], stream: &[Vec<usize>]| -> Result<(f64, f64), AnalysisError> {
                    let p = population_cka(&refs(models), stream)?;
                    Ok((p.attention_mean, p.mlp_mean))
                };
                cka.push(CkaColumn {
                    label,
                    full_scratch: pair(&scratch_models, full_stream)?,
                    full_pretrained: pair(&pre_models, full_stream)?,
                    sub_scratch: pair(&scratch_models, sub_stream)?,
                    sub_pretrained: pair(&pre_models, sub_stream)?,
                    sub_pretrain_only: pair(&pre_only, sub_stream)?,
                });
            }
        }
    }
    Ok(StudyReport {
        config: cfg.clone(),
        grammar: g.name().to_string(),
        runs,
        cka,
        cosine,
    })
}

#[allow(clippy::too_many_arguments)]
fn record(
    g: &Grammar,
    cfg: &StudyConfig,
    data: &StudyData,
    arch: &Architecture,
    population: String,
    seed: u64,
    pretrain_epochs: u32,
    model: &Transformer,
    retention: Option<RetentionCurve>,
) -> Result<RunRecord, AnalysisError> {
    let (final_loss, final_bucket_losses) = evaluate(model, &data.eval_full)?;
    let final_kl = if cfg.kl_samples > 0 {
        Some(mc_kl_with(g, model, cfg.kl_samples, cfg.data_seed.wrapping_add(100), cfg.limits())?.total)
    } else {
        None
    };
    Ok(RunRecord {
        architecture: arch.name.clone(),
        population,
        seed,
        pretrain_epochs,
        final_loss,
        final_bucket_losses,
        final_kl,
        retention,
    })
}

fn save_run(dir: Option<&Path>, arch: &Architecture, population: &str, seed: u64, m: &Transformer) -> Result<(), AnalysisError> {
    if let Some(d) = dir {
        let d = d.join(file_label(&arch.name)).join(population);
        fs::create_dir_all(&d)?;
        m.save(&d.join(format!("seed{seed}.ckpt")), false)?;
    }
    Ok(())
}
