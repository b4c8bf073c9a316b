//! A laboratory for probabilistic context-free grammars and the language
//! models trained on them.
//!
//! The crate is organised bottom-up:
//!
//! * [`grammar`]: the PCFG type, its text format, validation and the mean
//!   matrix.
//! * [`subgrammar`]: inner/outer subgrammars, the subgrammar DAG, top-level
//!   splits and span positions.
//! * [`oracle`]: exact string, prefix and next-token probabilities from a
//!   probabilistic Earley chart, entropy and moment computations.
//! * [`dist`]: next-token distributions and the distances between them.
//! * [`sampler`]: ancestral sampling with per-token subgrammar attribution.
//! * [`lm`]: the language-model interface with an exact oracle model, a
//!   weight-perturbed "composed" model, a uniform model and a small
//!   decoder-only transformer trained with hand-written backpropagation.
//! * [`divergence`]: Monte-Carlo KL estimation and the decomposition checks.
//! * [`analysis`]: CKA, cosine protocols, depth probes and the pretraining
//!   study.
//! * [`arith`]: arithmetic stress-test expressions with exact evaluation.

pub mod analysis;
pub mod arith;
pub mod bundled;
pub mod dist;
pub mod divergence;
pub mod grammar;
pub mod lm;
pub mod oracle;
pub mod sampler;
pub mod subgrammar;

#[cfg(doctest)]
mod book;

pub use grammar::{parse_grammar, parse_grammar_strict, validate, Grammar, Rule, Symbol};
