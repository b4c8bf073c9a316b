use std::fmt;

use pcfg_lab::analysis::AnalysisError;
use pcfg_lab::arith::ArithError;
use pcfg_lab::divergence::DivergenceError;
use pcfg_lab::grammar::GrammarError;
use pcfg_lab::lm::LmError;
use pcfg_lab::oracle::OracleError;
use pcfg_lab::sampler::SampleError;
use pcfg_lab::subgrammar::SubgrammarError;

/// Exit codes.
pub const USAGE: i32 = 1;
pub const DATA: i32 = 2;
pub const NUMERICAL: i32 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(m: impl Into<String>) -> Self {
        CliError { code: USAGE, message: m.into() }
    }

    pub fn data(m: impl Into<String>) -> Self {
        CliError { code: DATA, message: m.into() }
    }

    pub fn numerical(m: impl Into<String>) -> Self {
        CliError { code: NUMERICAL, message: m.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn oracle_code(e: &OracleError) -> i32 {
    match e {
        OracleError::Inconsistent(_) => NUMERICAL,
        _ => DATA,
    }
}

fn lm_code(e: &LmError) -> i32 {
    match e {
        LmError::NonFiniteLoss { .. } => NUMERICAL,
        LmError::Oracle(o) => oracle_code(o),
        _ => DATA,
    }
}

fn sample_code(e: &SampleError) -> i32 {
    match e {
        SampleError::ResampleBudgetExhausted { .. } => NUMERICAL,
        _ => DATA,
    }
}

fn divergence_code(e: &DivergenceError) -> i32 {
    match e {
        DivergenceError::InfiniteKl { .. } | DivergenceError::TailBudget { .. } => NUMERICAL,
        DivergenceError::Lm(e) => lm_code(e),
        DivergenceError::Oracle(e) => oracle_code(e),
        DivergenceError::Sample(e) => sample_code(e),
        _ => DATA,
    }
}

macro_rules! classify {
    ($t:ty, $f:expr) => {
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError {
                    code: $f(&e),
                    message: e.to_string(),
                }
            }
        }
    };
}

classify!(OracleError, oracle_code);
classify!(LmError, lm_code);
classify!(SampleError, sample_code);
classify!(DivergenceError, divergence_code);
classify!(GrammarError, |_: &GrammarError| DATA);
classify!(SubgrammarError, |_: &SubgrammarError| DATA);
classify!(std::io::Error, |_: &std::io::Error| DATA);
classify!(serde_json::Error, |_: &serde_json::Error| DATA);
classify!(csv::Error, |_: &csv::Error| DATA);
classify!(ArithError, |e: &ArithError| match e {
    ArithError::DivisionByZero(_) | ArithError::ResampleBudgetExhausted(_) => NUMERICAL,
    _ => DATA,
});
classify!(AnalysisError, |e: &AnalysisError| match e {
    AnalysisError::Lm(e) | AnalysisError::Training { source: e, .. } => lm_code(e),
    AnalysisError::Oracle(e) => oracle_code(e),
    AnalysisError::Divergence(e) => divergence_code(e),
    AnalysisError::Sample(e) => sample_code(e),
    AnalysisError::Undefined(_) => NUMERICAL,
    _ => DATA,
});
