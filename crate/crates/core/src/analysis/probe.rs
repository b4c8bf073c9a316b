use serde::{Deserialize, Serialize};

use crate::dist::TokenDistribution;
use crate::grammar::Grammar;
use crate::lm::LanguageModel;
use crate::oracle::Oracle;

use super::AnalysisError;

/// The two prefixes with which deepening contexts are also probed, and the
/// ungrammatical one.
pub const SHALLOW_PREFIX: &str = "(a)(a)(a)(a)(a)(a)";
pub const DEEP_PREFIX: &str = "(((((((((a))))))))";
pub const FAULTY_PREFIX: &str = "(a)(a)(a))(aa)(a)(a)";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeCase {
    /// `(a)^i (`: longer context at depth 1.
    SameDepth,
    /// `(^(i+1)`: depth grows with `i`.
    Deepening,
    /// A prefix, then the deepening context. When the concatenation is not a
    /// prefix of the grammar it is scored like [`ProbeCase::Faulty`] and the
    /// curve is flagged.
    Prefixed(String),
    /// An arbitrary prefix that is not checked, then the deepening context;
    /// scored against the clean deepening target.
    Faulty(String),
}

impl ProbeCase {
    pub fn id(&self) -> String {
        match self {
            ProbeCase::SameDepth => "same-depth".into(),
            ProbeCase::Deepening => "deepening".into(),
            ProbeCase::Prefixed(p) => format!("prefixed:{p}"),
            ProbeCase::Faulty(p) => format!("faulty:{p}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeMetric {
    /// Total variation distance.
    Tv,
    /// `KL(truth ‖ model)`.
    Kl,
}

impl ProbeMetric {
    fn apply(self, truth: &TokenDistribution, model: &TokenDistribution) -> f64 {
        match self {
            ProbeMetric::Tv => truth.total_variation(model),
            ProbeMetric::Kl => truth.kl(model),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthProbeCurve {
    pub case: String,
    pub metric: ProbeMetric,
    pub i: Vec<usize>,
    /// NaN, written as `null`, where the model refused the context.
    #[serde(with = "nan_as_null")]
    pub error: Vec<f64>,
    /// Whether every probed context is a prefix of the grammar.
    pub contexts_valid: bool,
}

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let o: Vec<Option<f64>> = v.iter().map(|x| (!x.is_nan()).then_some(*x)).collect();
        o.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let o = Vec::<Option<f64>>::deserialize(d)?;
        Ok(o.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect())
    }
}

/// Splits a string of one-character terminals such as `(a)(a)`.
pub fn compact_tokens(g: &Grammar, text: &str) -> Result<Vec<usize>, AnalysisError> {
    text.chars()
        .filter(|c| !c.is_whitespace())
        .map(|c| {
            g.terminal_id(&c.to_string())
                .ok_or_else(|| AnalysisError::InvalidArgument(format!("`{c}` is not a terminal of `{}`", g.name())))
        })
        .collect()
}

/// The probe context of `case` at `i`.
pub fn probe_context(g: &Grammar, case: &ProbeCase, i: usize) -> Result<Vec<usize>, AnalysisError> {
    let deepening = "(".repeat(i + 1);
    let text = match case {
        ProbeCase::SameDepth => format!("{}(", "(a)".repeat(i)),
        ProbeCase::Deepening => deepening,
        ProbeCase::Prefixed(p) | ProbeCase::Faulty(p) => format!("{p}{deepening}"),
    };
    compact_tokens(g, &text)
}

/// Compares `q`'s next-token distribution with the grammar's after each
/// context `i = 1..=i_max`. A model that refuses an ungrammatical context
/// (an exact oracle, say) scores NaN there.
pub fn depth_probe(
    q: &dyn LanguageModel,
    g: &Grammar,
    case: &ProbeCase,
    i_max: usize,
    metric: ProbeMetric,
) -> Result<DepthProbeCurve, AnalysisError> {
    let oracle = Oracle::new(g)?;
    let mut curve = DepthProbeCurve {
        case: case.id(),
        metric,
        i: Vec::new(),
        error: Vec::new(),
        contexts_valid: true,
    };
    for i in 1..=i_max {
        let context = probe_context(g, case, i)?;
        let clean = || probe_context(g, &ProbeCase::Deepening, i);
        let truth = match case {
            ProbeCase::Faulty(_) => {
                curve.contexts_valid = false;
                oracle.next_token_dist(&clean()?)?
            }
            ProbeCase::Prefixed(_) => match oracle.next_token_dist(&context) {
                Ok(d) => d,
                Err(_) => {
                    curve.contexts_valid = false;
                    oracle.next_token_dist(&clean()?)?
                }
            },
            _ => oracle.next_token_dist(&context)?,
        };
        let error = match q.next_dist(&context) {
            Ok(got) => metric.apply(&truth, &got),
            Err(_) if !curve.contexts_valid => f64::NAN,
            Err(e) => return Err(e.into()),
        };
        curve.i.push(i);
        curve.error.push(error);
    }
    Ok(curve)
}
