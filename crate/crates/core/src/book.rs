//! Guide chapters, compiled so their snippets run as doctests.

#[doc = include_str!("../../../book/src/introduction.md")]
mod introduction {}
#[doc = include_str!("../../../book/src/grammars.md")]
mod grammars {}
#[doc = include_str!("../../../book/src/subgrammars.md")]
mod subgrammars {}
#[doc = include_str!("../../../book/src/oracles.md")]
mod oracles {}
#[doc = include_str!("../../../book/src/sampling.md")]
mod sampling {}
#[doc = include_str!("../../../book/src/language-models.md")]
mod language_models {}
#[doc = include_str!("../../../book/src/divergence.md")]
mod divergence {}
#[doc = include_str!("../../../book/src/analysis.md")]
mod analysis {}
#[doc = include_str!("../../../book/src/arithmetic.md")]
mod arithmetic {}
#[doc = include_str!("../../../book/src/cli.md")]
mod cli {}
