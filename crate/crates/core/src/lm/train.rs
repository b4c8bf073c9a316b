use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::{LmError, Transformer};
use crate::sampler::AnnotatedSentence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    /// Sentences per step.
    pub batch_size: usize,
    pub lr: f64,
    /// Steps of linear warmup, counted from global step `warmup_from`.
    pub warmup: u64,
    pub warmup_from: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm gradient clipping.
    pub grad_clip: Option<f64>,
    /// Seeds batch order and dropout.
    pub seed: u64,
    /// Keep one log row every `log_every` steps (the last step is always kept).
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 64,
            lr: 3e-4,
            warmup: 100,
            warmup_from: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: None,
            seed: 0,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup == 0 {
            self.lr
        } else {
            let k = step.saturating_sub(self.warmup_from) + 1;
            self.lr * (k as f64 / self.warmup as f64).min(1.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: u64,
    /// Mean cross-entropy per token over the batch, nats.
    pub loss: f64,
    /// Mean loss over the batch tokens of each bucket, in the order of
    /// [`TrainingLog::buckets`]; `None` when the batch had no such token.
    pub bucket_losses: Vec<Option<f64>>,
    pub lr: f64,
    /// Seconds since the call to [`train`].
    pub wallclock: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub buckets: Vec<String>,
    pub rows: Vec<TrainLogRow>,
}

impl TrainingLog {
    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }

    pub fn bucket_series(&self, bucket: &str) -> Vec<Option<f64>> {
        match self.buckets.iter().position(|b| b == bucket) {
            Some(i) => self.rows.iter().map(|r| r.bucket_losses[i]).collect(),
            None => Vec::new(),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), LmError> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header = vec!["step".to_string(), "loss".to_string()];
        header.extend(self.buckets.iter().map(|b| format!("loss[{b}]")));
        header.extend(["lr".to_string(), "wallclock".to_string()]);
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![r.step.to_string(), r.loss.to_string()];
            rec.extend(r.bucket_losses.iter().map(|b| b.map(|x| x.to_string()).unwrap_or_default()));
            rec.extend([r.lr.to_string(), format!("{:.3}", r.wallclock)]);
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> LmError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => LmError::Io(io),
        other => LmError::Format(format!("{other:?}")),
    }
}

/// Sentence order: an endless concatenation of seeded permutations, so a
/// resumed run continues the same stream.
fn batch_indices(n: usize, seed: u64, first: u64, count: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(count);
    let mut epoch = u64::MAX;
    let mut perm: Vec<usize> = Vec::new();
    for pos in first..first + count as u64 {
        let e = pos / n as u64;
        if e != epoch {
            epoch = e;
            perm = (0..n).collect();
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(e);
            perm.shuffle(&mut rng);
        }
        out.push(perm[(pos % n as u64) as usize]);
    }
    out
}

/// Minimizes mean per-token cross-entropy (EOS included) with Adam. The step
/// counter, Adam moments and batch stream continue from wherever `model`
/// left off, so a loaded checkpoint resumes where it stopped. Logs carry one
/// restricted-loss column per bucket found in `corpus`.
pub fn train(model: &mut Transformer, corpus: &[AnnotatedSentence], cfg: &TrainConfig) -> Result<TrainingLog, LmError> {
    if corpus.is_empty() || cfg.batch_size == 0 {
        return Err(LmError::InvalidConfig("empty corpus or batch".into()));
    }
    let mut buckets: Vec<String> = corpus.iter().flat_map(|s| s.buckets.iter().cloned()).collect();
    buckets.sort();
    buckets.dedup();
    let bucket_id: BTreeMap<&str, usize> = buckets.iter().enumerate().map(|(i, b)| (b.as_str(), i)).collect();
    let clock = Instant::now();
    let mut log = TrainingLog {
        buckets: buckets.clone(),
        rows: Vec::new(),
    };
    let n = model.params.len();
    for run_step in 0..cfg.steps {
        let step = model.step;
        let idx = batch_indices(corpus.len(), cfg.seed, step * cfg.batch_size as u64, cfg.batch_size);
        let count: usize = idx.iter().map(|&i| corpus[i].tokens.len() + 1).sum();
        let mut grad = vec![0.0; n];
        let mut total = 0.0;
        let mut sums = vec![(0.0, 0usize); buckets.len()];
        for (j, &i) in idx.iter().enumerate() {
            let s = &corpus[i];
            let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0xd209_57a1);
            rng.set_stream(step * cfg.batch_size as u64 + j as u64);
            let losses = model.sentence_loss(&s.tokens, Some(&mut rng), Some((&mut grad, 1.0 / count as f64)))?;
            for (k, l) in losses.iter().enumerate() {
                total += l;
                if let Some(b) = s.buckets.get(k) {
                    let e = &mut sums[bucket_id[b.as_str()]];
                    e.0 += l;
                    e.1 += 1;
                }
            }
        }
        let loss = total / count as f64;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(LmError::NonFiniteLoss { step, batch: run_step });
        }
        if let Some(clip) = cfg.grad_clip {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > clip {
                grad.iter_mut().for_each(|g| *g *= clip / norm);
            }
        }
        let lr = cfg.lr_at(step);
        let t = (step + 1) as i32;
        let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
        for i in 0..n {
            let g = grad[i];
            model.adam_m[i] = cfg.beta1 * model.adam_m[i] + (1.0 - cfg.beta1) * g;
            model.adam_v[i] = cfg.beta2 * model.adam_v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = model.adam_m[i] / c1;
            let vhat = model.adam_v[i] / c2;
            model.params[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
        model.step += 1;
        if run_step % cfg.log_every.max(1) == 0 || run_step + 1 == cfg.steps {
            log.rows.push(TrainLogRow {
                step,
                loss,
                bucket_losses: sums.iter().map(|&(s, c)| (c > 0).then(|| s / c as f64)).collect(),
                lr,
                wallclock: clock.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(log)
}

/// Mean loss over every token of `sentences` and per bucket (EOS included).
pub fn evaluate(model: &Transformer, sentences: &[AnnotatedSentence]) -> Result<(f64, BTreeMap<String, f64>), LmError> {
    let mut total = (0.0, 0usize);
    let mut per: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for s in sentences {
        for (k, l) in model.sentence_loss(&s.tokens, None, None)?.into_iter().enumerate() {
            total.0 += l;
            total.1 += 1;
            if let Some(b) = s.buckets.get(k) {
                let e = per.entry(b.clone()).or_default();
                e.0 += l;
                e.1 += 1;
            }
        }
    }
    Ok((
        total.0 / total.1.max(1) as f64,
        per.into_iter().map(|(b, (s, c))| (b, s / c as f64)).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundled;
    use crate::grammar::parse_grammar;
    use crate::lm::{LanguageModel, ModelConfig, Vocab};
    use crate::sampler::{SampleLimits, Sampler};

    fn small(g: &crate::Grammar, seed: u64) -> Transformer {
        let cfg = ModelConfig {
            layers: 1,
            heads: 2,
            model_dim: 16,
            mlp_dim: 32,
            max_context: 48,
            seed,
            ..ModelConfig::default()
        };
        Transformer::new(cfg, Vocab::from_grammar(g)).unwrap()
    }

    fn corpus(g: &crate::Grammar, n: usize, max_tokens: usize) -> Vec<AnnotatedSentence> {
        let limits = SampleLimits {
            max_tokens,
            ..SampleLimits::default()
        };
        Sampler::new(g, limits).corpus(1, n).unwrap().sentences
    }

    #[test]
    fn single_sentence_language() {
        let g = parse_grammar("start: S\nS -> \"a\" [1.0]").unwrap();
        let mut m = small(&g, 0);
        let data = corpus(&g, 8, 40);
        let cfg = TrainConfig {
            steps: 200,
            batch_size: 4,
            lr: 1e-2,
            warmup: 10,
            ..TrainConfig::default()
        };
        let log = train(&mut m, &data, &cfg).unwrap();
        assert_eq!(log.rows.len(), 200);
        assert!(log.rows[199].loss < 0.01, "{}", log.rows[199].loss);
        assert!(m.next_dist(&[0]).unwrap().eos() > 0.99);
        assert_eq!(log.buckets, ["OVERHEAD", "ROOT-EOS"]);
    }

    #[test]
    fn deterministic_and_resumable() {
        let g = bundled::nested_parens();
        let data = corpus(&g, 64, 40);
        let cfg = TrainConfig {
            steps: 6,
            batch_size: 8,
            lr: 3e-3,
            warmup: 3,
            ..TrainConfig::default()
        };
        let mut a = small(&g, 5);
        let mut b = small(&g, 5);
        let la = train(&mut a, &data, &cfg).unwrap();
        let lb = train(&mut b, &data, &cfg).unwrap();
        assert_eq!(la.losses(), lb.losses());
        assert_eq!(a.parameters(), b.parameters());

        // 6 steps in one go equal 3 + 3 across a checkpoint.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("half.ckpt");
        let mut c = small(&g, 5);
        let half = TrainConfig { steps: 3, ..cfg.clone() };
        let first = train(&mut c, &data, &half).unwrap();
        c.save(&path, true).unwrap();
        let mut d = Transformer::load(&path).unwrap();
        let second = train(&mut d, &data, &half).unwrap();
        let joined: Vec<f64> = first.losses().into_iter().chain(second.losses()).collect();
        assert_eq!(joined, la.losses());
        assert_eq!(d.parameters(), a.parameters());
        assert_eq!(second.rows[0].step, 3);
    }

    #[test]
    fn bucket_columns_and_csv() {
        let g = bundled::load("kl_example_1").unwrap();
        let data = corpus(&g, 16, 40);
        let mut m = small(&g, 1);
        let cfg = TrainConfig {
            steps: 3,
            batch_size: 4,
            log_every: 2,
            ..TrainConfig::default()
        };
        let log = train(&mut m, &data, &cfg).unwrap();
        assert_eq!(log.buckets, ["L2_1", "L2_2", "L2_3", "OVERHEAD", "ROOT-EOS"]);
        assert_eq!(log.rows.iter().map(|r| r.step).collect::<Vec<_>>(), [0, 2]);
        assert!(log.rows.iter().all(|r| r.bucket_losses.iter().all(Option::is_some)));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        log.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,loss,loss[L2_1],loss[L2_2],loss[L2_3],loss[OVERHEAD],loss[ROOT-EOS],lr,wallclock"
        );
        assert_eq!(lines.count(), 2);
        let (total, per) = evaluate(&m, &data).unwrap();
        assert!(total.is_finite() && per.len() == 5);
    }

    #[test]
    fn rejects_foreign_tokens() {
        let g = bundled::nested_parens();
        let other = bundled::load("kl_example_1").unwrap();
        let data = corpus(&other, 4, 40);
        let mut m = small(&g, 0);
        let bad = data.iter().any(|s| s.tokens.iter().any(|&t| t >= 3));
        assert!(bad);
        let cfg = TrainConfig {
            steps: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&mut m, &data, &cfg), Err(LmError::VocabMismatch(_))));
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert!((cfg.lr_at(0) - 3e-6).abs() < 1e-18);
        assert_eq!(cfg.lr_at(99), 3e-4);
        assert_eq!(cfg.lr_at(5000), 3e-4);
        let again = TrainConfig { warmup_from: 5000, ..cfg };
        assert!((again.lr_at(5000) - 3e-6).abs() < 1e-18);
        assert!((again.lr_at(4000) - 3e-6).abs() < 1e-18);
    }

    #[test]
    fn batch_stream_covers_each_epoch() {
        let mut idx = batch_indices(10, 3, 0, 10);
        idx.sort();
        assert_eq!(idx, (0..10).collect::<Vec<_>>());
        assert_eq!(batch_indices(10, 3, 4, 8), batch_indices(10, 3, 0, 12)[4..]);
    }
}
