//! Monte-Carlo KL between a grammar and a language model, its per-token
//! attribution to subgrammars, and numerical checks of the decomposition
//! identities.
//!
//! Every estimate works on the per-token log ratio
//! `log P(x_k | x_<k) − log Q(x_k | x_<k)`, with the P side taken from the
//! chart oracle so ambiguous grammars are handled correctly. Summing these
//! over a sentence (EOS slot included) gives `log P(s) − log Q(s)`, whose
//! expectation under P is the KL divergence.

mod leaf;
mod outer;
mod recurrence;

pub use leaf::{leaf_partition, verify_leaf, verify_leaf_with, LeafPartition};
pub use outer::{verify_outer, OuterReport, TAIL_BUDGET};
pub use recurrence::{predict_recurrence, recurrence_sweep, write_sweep_csv, RecurrencePrediction, SubgrammarKl};

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::Grammar;
use crate::lm::{LanguageModel, LmError};
use crate::oracle::{derivational_entropy, Oracle, OracleError};
use crate::sampler::{AnnotatedSample, SampleError, SampleLimits, Sampler};
use crate::subgrammar::SubgrammarError;

/// Per-sample partition residuals above this are reported as violations.
pub const RESIDUAL_TOLERANCE: f64 = 1e-9;

/// Sampling limits for KL estimates. Looser than the sampler default so that
/// near-critical grammars are not truncated noticeably.
pub const KL_LIMITS: SampleLimits = SampleLimits {
    max_tokens: 2048,
    max_depth: 1024,
    max_resamples: 100,
};

#[derive(Debug, Error)]
pub enum DivergenceError {
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Subgrammar(#[from] SubgrammarError),
    #[error("infinite KL: the model gives `{token}` probability zero after `{context}`")]
    InfiniteKl { context: String, token: String },
    #[error("leaf decomposition refused: {0}")]
    GateViolation(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("tail bound {tail:e} exceeds the budget {budget:e} at size cap {cap}")]
    TailBudget { tail: f64, budget: f64, cap: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// A Monte-Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn exact(mean: f64) -> Estimate {
        Estimate { mean, stderr: 0.0 }
    }

    pub fn from_samples(xs: &[f64]) -> Estimate {
        let n = xs.len() as f64;
        if xs.is_empty() {
            return Estimate::exact(f64::NAN);
        }
        let mean = xs.iter().sum::<f64>() / n;
        if xs.len() < 2 {
            return Estimate::exact(mean);
        }
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Estimate {
            mean,
            stderr: (var / n).sqrt(),
        }
    }

    /// `|self − other|` in units of the combined standard error.
    pub fn z_distance(&self, other: &Estimate) -> f64 {
        let se = self.stderr.hypot(other.stderr);
        let d = (self.mean - other.mean).abs();
        if se == 0.0 {
            if d == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            d / se
        }
    }

    pub fn within(&self, other: &Estimate, sigmas: f64) -> bool {
        self.z_distance(other) <= sigmas
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlReport {
    pub grammar: String,
    /// Nats per sentence.
    pub total: Estimate,
    /// Nats per token, each sentence counting its EOS slot.
    pub per_token: Estimate,
    /// Bucket means; a sentence without tokens in a bucket contributes 0,
    /// so the means add up to `total`.
    pub per_bucket: BTreeMap<String, Estimate>,
    /// `max |total − Σ buckets|` over samples.
    pub max_residual: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub mean_length: f64,
}

/// The outcome of a per-sample partition check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub level: String,
    pub report: KlReport,
    pub tolerance: f64,
    pub holds: bool,
}

/// Log ratios of one sampled sentence.
#[derive(Debug, Clone)]
pub(crate) struct SampleTerms {
    /// `log P(s) − log Q(s)`.
    pub total: f64,
    /// `−log Q(s)`.
    pub cross_entropy: f64,
    pub slots: usize,
    pub buckets: BTreeMap<String, f64>,
}

pub(crate) fn check_alphabet(g: &Grammar, q: &dyn LanguageModel) -> Result<(), DivergenceError> {
    let want = g.terminals().len() + 1;
    if q.alphabet_size() != want {
        return Err(DivergenceError::InvalidArgument(format!(
            "model has {} outputs, grammar `{}` needs {want}",
            q.alphabet_size(),
            g.name()
        )));
    }
    Ok(())
}

/// Samples `n` sentences and scores each under P and `q`. `label` names the
/// bucket of every slot (tokens, then EOS).
pub(crate) fn sample_terms<F>(
    g: &Grammar,
    q: &dyn LanguageModel,
    n: usize,
    seed: u64,
    limits: SampleLimits,
    label: F,
) -> Result<Vec<SampleTerms>, DivergenceError>
where
    F: Fn(&AnnotatedSample) -> Vec<String> + Sync,
{
    check_alphabet(g, q)?;
    let oracle = Oracle::new(g)?;
    let sampler = Sampler::new(g, limits);
    let drawn = sampler.annotated_range(seed, 0, n)?;
    drawn
        .par_iter()
        .map(|s| {
            let tokens = &s.sentence.tokens;
            let a = oracle.analyze(tokens)?;
            let lp = a.conditional_logprobs(tokens);
            let lq = match q.step_logprobs(tokens) {
                Err(LmError::Oracle(OracleError::ImpossiblePrefix(_))) => return Err(zero_witness(g, q, tokens)),
                r => r?,
            };
            let labels = label(s);
            debug_assert_eq!(labels.len(), tokens.len() + 1);
            let mut buckets: BTreeMap<String, f64> = BTreeMap::new();
            let mut q_total = 0.0;
            for (k, (p, lq)) in lp.iter().zip(&lq).enumerate() {
                if !(lq.is_finite()) {
                    return Err(DivergenceError::InfiniteKl {
                        context: g.render(&tokens[..k]),
                        token: tokens.get(k).map_or("EOS", |&t| g.terminal_name(t)).to_string(),
                    });
                }
                *buckets.entry(labels[k].clone()).or_insert(0.0) += p - lq;
                q_total += lq;
            }
            Ok(SampleTerms {
                total: a.string_logprob - q_total,
                cross_entropy: -q_total,
                slots: tokens.len() + 1,
                buckets,
            })
        })
        .collect()
}

/// The first slot where `q` gives the observed symbol probability zero.
fn zero_witness(g: &Grammar, q: &dyn LanguageModel, tokens: &[usize]) -> DivergenceError {
    for k in 0..=tokens.len() {
        let d = match q.next_dist(&tokens[..k]) {
            Ok(d) => d,
            Err(e) => return e.into(),
        };
        let p = if k == tokens.len() { d.eos() } else { d.prob(tokens[k]) };
        if p == 0.0 {
            return DivergenceError::InfiniteKl {
                context: g.render(&tokens[..k]),
                token: tokens.get(k).map_or("EOS", |&t| g.terminal_name(t)).to_string(),
            };
        }
    }
    DivergenceError::Unsupported("the model rejected a prefix it assigns positive probability".into())
}

pub(crate) fn summarize(g: &Grammar, terms: &[SampleTerms], seed: u64) -> KlReport {
    let totals: Vec<f64> = terms.iter().map(|t| t.total).collect();
    let total = Estimate::from_samples(&totals);
    let n = terms.len() as f64;
    let mean_slots = terms.iter().map(|t| t.slots as f64).sum::<f64>() / n;
    // Ratio estimator with a delta-method standard error.
    let ratio = total.mean / mean_slots;
    let resid: Vec<f64> = terms.iter().map(|t| t.total - ratio * t.slots as f64).collect();
    let per_token = Estimate {
        mean: ratio,
        stderr: Estimate::from_samples(&resid).stderr / mean_slots,
    };
    let mut names: Vec<&String> = terms.iter().flat_map(|t| t.buckets.keys()).collect();
    names.sort();
    names.dedup();
    let per_bucket = names
        .into_iter()
        .map(|b| {
            let xs: Vec<f64> = terms.iter().map(|t| t.buckets.get(b).copied().unwrap_or(0.0)).collect();
            (b.clone(), Estimate::from_samples(&xs))
        })
        .collect();
    let max_residual = terms
        .iter()
        .map(|t| (t.total - t.buckets.values().sum::<f64>()).abs())
        .fold(0.0, f64::max);
    KlReport {
        grammar: g.name().to_string(),
        total,
        per_token,
        per_bucket,
        max_residual,
        n_samples: terms.len(),
        seed,
        mean_length: mean_slots - 1.0,
    }
}

fn top_level_labels(s: &AnnotatedSample) -> Vec<String> {
    s.sentence.buckets.clone()
}

/// KL(P_G ‖ Q) from `n` samples, attributed to top-level buckets.
pub fn mc_kl(g: &Grammar, q: &dyn LanguageModel, n: usize, seed: u64) -> Result<KlReport, DivergenceError> {
    mc_kl_with(g, q, n, seed, KL_LIMITS)
}

pub fn mc_kl_with(
    g: &Grammar,
    q: &dyn LanguageModel,
    n: usize,
    seed: u64,
    limits: SampleLimits,
) -> Result<KlReport, DivergenceError> {
    if n == 0 {
        return Err(DivergenceError::InvalidArgument("need at least one sample".into()));
    }
    let terms = sample_terms(g, q, n, seed, limits, top_level_labels)?;
    Ok(summarize(g, &terms, seed))
}

/// Checks that each sample's total equals the sum of its top-level bucket
/// terms (subgrammars, overhead and ROOT-EOS).
pub fn verify_top_level(g: &Grammar, q: &dyn LanguageModel, n: usize, seed: u64) -> Result<ResidualReport, DivergenceError> {
    verify_top_level_with(g, q, n, seed, KL_LIMITS)
}

pub fn verify_top_level_with(
    g: &Grammar,
    q: &dyn LanguageModel,
    n: usize,
    seed: u64,
    limits: SampleLimits,
) -> Result<ResidualReport, DivergenceError> {
    let report = mc_kl_with(g, q, n, seed, limits)?;
    Ok(ResidualReport {
        level: "top-level".into(),
        holds: report.max_residual < RESIDUAL_TOLERANCE,
        tolerance: RESIDUAL_TOLERANCE,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossIdentityReport {
    pub grammar: String,
    /// Mean `−log Q(s)` per sentence.
    pub cross_entropy: Estimate,
    pub kl: Estimate,
    /// The entropy used on the right-hand side.
    pub entropy: Estimate,
    /// `derivational` when the grammar looks unambiguous, otherwise the
    /// Monte-Carlo string entropy `E[−log P(s)]`.
    pub entropy_source: String,
    pub derivational_entropy: f64,
    pub ambiguous: bool,
    /// `cross_entropy − kl − entropy`.
    pub residual: f64,
    pub combined_stderr: f64,
    pub holds: bool,
    pub n_samples: usize,
    pub seed: u64,
}

/// Mean cross-entropy against KL plus entropy, each from its own sample set
/// (seeds `seed`, `seed + 1`, `seed + 2`).
pub fn loss_identity(g: &Grammar, q: &dyn LanguageModel, n: usize, seed: u64) -> Result<LossIdentityReport, DivergenceError> {
    loss_identity_with(g, q, n, seed, KL_LIMITS)
}

/// With tight `limits` the samples are conditioned on fitting them, which
/// biases all three terms against the untruncated entropy.
pub fn loss_identity_with(
    g: &Grammar,
    q: &dyn LanguageModel,
    n: usize,
    seed: u64,
    limits: SampleLimits,
) -> Result<LossIdentityReport, DivergenceError> {
    if n < 2 {
        return Err(DivergenceError::InvalidArgument("need at least two samples".into()));
    }
    let h = derivational_entropy(g)?;
    let ce_terms = sample_terms(g, q, n, seed, limits, top_level_labels)?;
    let ce: Vec<f64> = ce_terms.iter().map(|t| t.cross_entropy).collect();
    let cross_entropy = Estimate::from_samples(&ce);
    let kl = mc_kl_with(g, q, n, seed.wrapping_add(1), limits)?.total;
    let (entropy, entropy_source) = if h.ambiguous_warning {
        let s = seed.wrapping_add(2);
        let oracle = Oracle::new(g)?;
        let drawn = Sampler::new(g, limits).annotated_range(s, 0, n)?;
        let neg: Result<Vec<f64>, OracleError> =
            drawn.par_iter().map(|d| Ok(-oracle.string_logprob(&d.sentence.tokens)?)).collect();
        (Estimate::from_samples(&neg?), "string (Monte-Carlo)")
    } else {
        (Estimate::exact(h.derivational_entropy), "derivational")
    };
    let residual = cross_entropy.mean - kl.mean - entropy.mean;
    let combined_stderr = (cross_entropy.stderr.powi(2) + kl.stderr.powi(2) + entropy.stderr.powi(2)).sqrt();
    Ok(LossIdentityReport {
        grammar: g.name().to_string(),
        cross_entropy,
        kl,
        entropy,
        entropy_source: entropy_source.to_string(),
        derivational_entropy: h.derivational_entropy,
        ambiguous: h.ambiguous_warning,
        residual,
        combined_stderr,
        holds: residual.abs() <= 3.0 * combined_stderr + 1e-9,
        n_samples: n,
        seed,
    })
}

/// One row per checkpoint: `step,total,per_token,<buckets>,stderr_total,
/// stderr_<buckets>`. Buckets are the union over all reports.
pub fn write_kl_curve(path: &Path, rows: &[(u64, KlReport)]) -> Result<(), DivergenceError> {
    let mut names: Vec<&String> = rows.iter().flat_map(|(_, r)| r.per_bucket.keys()).collect();
    names.sort();
    names.dedup();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["step".to_string(), "total".into(), "per_token".into()];
    header.extend(names.iter().map(|b| b.to_string()));
    header.push("stderr_total".into());
    header.extend(names.iter().map(|b| format!("stderr_{b}")));
    w.write_record(&header)?;
    for (step, r) in rows {
        let get = |b: &String| r.per_bucket.get(b).copied().unwrap_or(Estimate::exact(0.0));
        let mut rec = vec![step.to_string(), r.total.mean.to_string(), r.per_token.mean.to_string()];
        rec.extend(names.iter().map(|b| get(b).mean.to_string()));
        rec.push(r.total.stderr.to_string());
        rec.extend(names.iter().map(|b| get(b).stderr.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
