use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::lm::{Sublayer, Transformer};

use super::AnalysisError;

/// Evaluation sentences of the three kinds, as token ids of the full
/// grammar.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SequenceClasses {
    pub subgrammar_only: Vec<Vec<usize>>,
    pub without_subgrammar: Vec<Vec<usize>>,
    pub with_subgrammar: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineRow {
    pub class: String,
    pub attention: f64,
    pub mlp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineTable {
    pub rows: Vec<CosineRow>,
    /// Indices of the models that were averaged.
    pub selected: Vec<usize>,
}

impl CosineTable {
    pub fn row(&self, class: &str) -> Option<&CosineRow> {
        self.rows.iter().find(|r| r.class == class)
    }
}

pub const ONLY: &str = "subgrammar only";
pub const WITHOUT: &str = "without subgrammar";
pub const WITH: &str = "with subgrammar";
pub const CROSS: &str = "only vs without";

/// Mean-pooled sublayer outputs of each sentence: `[sublayer][sentence]`.
fn pooled(model: &Transformer, sentences: &[Vec<usize>]) -> Result<Vec<(Sublayer, Vec<DVector<f64>>)>, AnalysisError> {
    let mut out: Vec<(Sublayer, Vec<DVector<f64>>)> = Vec::new();
    for s in sentences.iter().filter(|s| !s.is_empty()) {
        for (k, rec) in model.capture_activations(s)?.into_iter().enumerate() {
            if out.len() <= k {
                out.push((rec.sublayer, Vec::new()));
            }
            let mean = rec.data.row_mean().transpose();
            out[k].1.push(mean);
        }
    }
    Ok(out)
}

fn cosine(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let d = a.norm() * b.norm();
    if d == 0.0 {
        0.0
    } else {
        a.dot(b) / d
    }
}

fn mean_within(v: &[DVector<f64>]) -> f64 {
    let (mut s, mut c) = (0.0, 0.0);
    for i in 0..v.len() {
        for j in i + 1..v.len() {
            s += cosine(&v[i], &v[j]);
            c += 1.0;
        }
    }
    s / c
}

fn mean_across(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
    let (mut s, mut c) = (0.0, 0.0);
    for x in a {
        for y in b {
            s += cosine(x, y);
            c += 1.0;
        }
    }
    s / c
}

/// Per-model `(attention, mlp)` means for each class and the cross pair.
fn model_rows(model: &Transformer, classes: &SequenceClasses) -> Result<[(f64, f64); 4], AnalysisError> {
    let only = pooled(model, &classes.subgrammar_only)?;
    let without = pooled(model, &classes.without_subgrammar)?;
    let with = pooled(model, &classes.with_subgrammar)?;
    let split = |f: &dyn Fn(usize) -> f64| {
        let (mut a, mut m, mut na, mut nm) = (0.0, 0.0, 0.0, 0.0);
        for (k, (s, _)) in only.iter().enumerate() {
            match s {
                Sublayer::Attention => {
                    a += f(k);
                    na += 1.0;
                }
                Sublayer::Mlp => {
                    m += f(k);
                    nm += 1.0;
                }
            }
        }
        (a / na, m / nm)
    };
    Ok([
        split(&|k| mean_within(&only[k].1)),
        split(&|k| mean_within(&without[k].1)),
        split(&|k| mean_within(&with[k].1)),
        split(&|k| mean_across(&only[k].1, &without[k].1)),
    ])
}

/// Mean pairwise cosine similarity of mean-pooled sublayer activations within
/// each class and across the subgrammar-only / subgrammar-free pair,
/// averaged over the best `quantile` of models by final loss.
pub fn cosine_protocol(
    models: &[&Transformer],
    final_losses: &[f64],
    classes: &SequenceClasses,
    quantile: f64,
) -> Result<CosineTable, AnalysisError> {
    for (name, c) in [
        (ONLY, &classes.subgrammar_only),
        (WITHOUT, &classes.without_subgrammar),
        (WITH, &classes.with_subgrammar),
    ] {
        if c.iter().filter(|s| !s.is_empty()).count() < 2 {
            return Err(AnalysisError::EmptyClass(name.into()));
        }
    }
    if models.is_empty() || models.len() != final_losses.len() {
        return Err(AnalysisError::InvalidArgument("need one final loss per model".into()));
    }
    if !(quantile > 0.0 && quantile <= 1.0) {
        return Err(AnalysisError::InvalidArgument(format!("quantile {quantile} is not in (0, 1]")));
    }
    let mut order: Vec<usize> = (0..models.len()).collect();
    order.sort_by(|&a, &b| final_losses[a].total_cmp(&final_losses[b]).then(a.cmp(&b)));
    let keep = ((quantile * models.len() as f64).ceil() as usize).max(1);
    let mut selected: Vec<usize> = order[..keep].to_vec();
    selected.sort_unstable();
    let mut sums = [(0.0, 0.0); 4];
    for &i in &selected {
        for (s, r) in sums.iter_mut().zip(model_rows(models[i], classes)?) {
            s.0 += r.0;
            s.1 += r.1;
        }
    }
    let k = selected.len() as f64;
    let rows = [ONLY, WITHOUT, WITH, CROSS]
        .iter()
        .zip(sums)
        .map(|(c, (a, m))| CosineRow {
            class: c.to_string(),
            attention: a / k,
            mlp: m / k,
        })
        .collect();
    Ok(CosineTable { rows, selected })
}
