//! Model-side analyses: depth probes, representation similarity and the
//! subgrammar pretraining study.

mod cka;
mod cosine;
mod probe;
mod study;

pub use cka::{linear_cka, model_cka, population_cka, stacked_activations, CkaResult, PopulationCka, SublayerCka};
pub use cosine::{cosine_protocol, CosineRow, CosineTable, SequenceClasses, CROSS, ONLY, WITH, WITHOUT};
pub use probe::{
    compact_tokens, depth_probe, probe_context, DepthProbeCurve, ProbeCase, ProbeMetric, DEEP_PREFIX,
    FAULTY_PREFIX, SHALLOW_PREFIX,
};
pub use study::{
    pretrain_and_continue, pretraining_study, sequence_classes, study_data, Architecture, CkaColumn, CosineColumn,
    PretrainedRun, RetentionCurve, RetentionPoint, RunRecord, StudyConfig, StudyData, StudyReport,
};

use thiserror::Error;

use crate::divergence::DivergenceError;
use crate::lm::LmError;
use crate::oracle::OracleError;
use crate::sampler::SampleError;
use crate::subgrammar::SubgrammarError;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Subgrammar(#[from] SubgrammarError),
    #[error("undefined: {0}")]
    Undefined(String),
    #[error("no usable sentences in class `{0}`")]
    EmptyClass(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("training seed {seed} failed: {source}")]
    Training { seed: u64, source: LmError },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}
