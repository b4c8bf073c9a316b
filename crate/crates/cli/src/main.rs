mod commands;
mod error;
mod figure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "pcfg-lab", version, about = "Grammars, oracles, KL decompositions and the models trained on them")]
struct Cli {
    /// Run directory for machine-readable outputs and the resolved config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

/// The resolved form of one invocation, written as `config.json` in the run
/// directory. `pcfg-lab rerun config.json` replays it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub out: PathBuf,
    pub run: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Check weight sums, reachability, productivity and consistency.
    Validate(GrammarArg),
    /// Print the subgrammar DAG.
    Decompose(GrammarArg),
    /// Print the top-level subgrammars and the overhead strings.
    TopLevel(GrammarArg),
    /// Draw an annotated corpus.
    Sample(SampleCmd),
    /// Exact probabilities from the chart parser.
    Oracle(OracleCmd),
    /// Train a transformer, with KL checkpoints.
    Train(TrainCmd),
    /// KL estimation and the decomposition checks.
    Kl(KlCmd),
    /// Next-token error on contexts of growing length or depth.
    DepthProbe(DepthProbeCmd),
    /// Linear CKA between trained models.
    Cka(CkaCmd),
    /// Cosine similarity of pooled activations per sequence class.
    Cosine(CosineCmd),
    /// Pretraining on a subgrammar against training from scratch.
    Study(StudyCmd),
    /// Arithmetic stress-test expressions.
    Arith(ArithCmd),
    /// Emit the CSV data behind a figure from run artifacts.
    Figure(FigureCmd),
    /// Replay a resolved config.
    #[serde(skip)]
    Rerun(RerunCmd),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Validate(_) => "validate",
            Command::Decompose(_) => "decompose",
            Command::TopLevel(_) => "top-level",
            Command::Sample(_) => "sample",
            Command::Oracle(_) => "oracle",
            Command::Train(_) => "train",
            Command::Kl(_) => "kl",
            Command::DepthProbe(_) => "depth-probe",
            Command::Cka(_) => "cka",
            Command::Cosine(_) => "cosine",
            Command::Study(_) => "study",
            Command::Arith(_) => "arith",
            Command::Figure(_) => "figure",
            Command::Rerun(_) => "rerun",
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrammarArg {
    /// A grammar file, or the name of a bundled grammar.
    pub grammar: String,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleCmd {
    #[arg(long)]
    pub grammar: String,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 512)]
    pub max_tokens: usize,
    #[arg(long, default_value_t = 64)]
    pub max_depth: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OracleCmd {
    #[command(subcommand)]
    pub action: OracleAction,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OracleAction {
    /// Log probability of a sentence.
    Logprob {
        #[arg(long)]
        grammar: String,
        /// Space-separated terminals.
        tokens: String,
    },
    /// Log prefix probability.
    Prefix {
        #[arg(long)]
        grammar: String,
        tokens: String,
    },
    /// Next-token distribution after a prefix.
    Nextdist {
        #[arg(long)]
        grammar: String,
        #[arg(default_value = "")]
        tokens: String,
    },
    /// Derivational entropy.
    Entropy {
        #[arg(long)]
        grammar: String,
    },
    /// Expected recursion of a nonterminal.
    Recursion {
        #[arg(long)]
        grammar: String,
        #[arg(long)]
        nonterminal: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Buckets {
    /// Top-level subgrammars, overhead and end of sentence.
    Top,
    /// DAG leaves.
    Leaf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCmd {
    #[arg(long)]
    pub grammar: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 64)]
    pub model_dim: usize,
    #[arg(long, default_value_t = 256)]
    pub mlp_dim: usize,
    #[arg(long, default_value_t = 128)]
    pub max_context: usize,
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f64,
    #[arg(long, default_value_t = 1000)]
    pub steps: u64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 100)]
    pub warmup: u64,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Training sentences sampled from the grammar.
    #[arg(long, default_value_t = 10_000)]
    pub corpus_size: usize,
    /// Steps between KL checkpoints; 0 estimates only at the end.
    #[arg(long, default_value_t = 0)]
    pub kl_every: u64,
    #[arg(long, default_value_t = 1000)]
    pub kl_samples: usize,
    #[arg(long, value_enum, default_value_t = Buckets::Top)]
    pub buckets: Buckets,
    /// Continue from a checkpoint instead of a fresh model.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArgs {
    #[arg(long)]
    pub grammar: String,
    /// `oracle`, `uniform`, `composed` or a checkpoint path.
    #[arg(long, default_value = "oracle")]
    pub model: String,
    /// Log-noise scale of the composed model.
    #[arg(long, default_value_t = 0.3)]
    pub scale: f64,
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KlCmd {
    #[command(subcommand)]
    pub action: KlAction,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "kebab-case")]
pub enum KlAction {
    /// Monte-Carlo KL with a per-bucket split.
    Estimate(ModelArgs),
    /// Per-sample residual of the top-level partition.
    VerifyTop(ModelArgs),
    /// Per-sample residual of the leaf partition.
    VerifyLeaf(ModelArgs),
    /// Three-term split over an outer subgrammar against a perturbed PCFG.
    VerifyOuter(OuterArgs),
    /// Predicted against measured KL under recursion.
    Recurrence(RecurrenceArgs),
    /// Cross-entropy against KL plus entropy.
    LossIdentity(ModelArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OuterArgs {
    #[arg(long)]
    pub grammar: String,
    /// Kept rules: a file with one `NAME#K` per line, or a comma list.
    #[arg(long)]
    pub keep: String,
    #[arg(long, default_value_t = 0.3)]
    pub scale: f64,
    /// Sampled sentences cross-checked against the exact terms.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecurrenceArgs {
    /// Recursion probabilities `p` of `S -> x (p) | ( S and S ) (1-p)`.
    #[arg(long, value_delimiter = ',', default_values_t = [0.55, 0.6, 0.75, 0.9, 1.0])]
    pub p: Vec<f64>,
    #[arg(long, default_value_t = 0.3)]
    pub delta: f64,
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Tv,
    Kl,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthProbeCmd {
    #[arg(long, default_value = "nested_parens")]
    pub grammar: String,
    /// `oracle`, `uniform` or a checkpoint path.
    #[arg(long)]
    pub model: String,
    #[arg(long, default_value_t = 30)]
    pub i_max: usize,
    #[arg(long, value_enum, default_value_t = Metric::Tv)]
    pub metric: Metric,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CkaCmd {
    #[arg(long)]
    pub grammar: String,
    /// At least two checkpoints of the same shape.
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    pub models: Vec<PathBuf>,
    /// Draw sentences from this inner subgrammar instead of the grammar.
    #[arg(long)]
    pub subgrammar: Option<String>,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CosineCmd {
    #[arg(long)]
    pub grammar: String,
    #[arg(long)]
    pub subgrammar: String,
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    pub models: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.25)]
    pub quantile: f64,
    /// Sentences per class.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyCmd {
    #[arg(long, default_value = "abc")]
    pub grammar: String,
    /// Study settings as JSON; defaults apply to missing keys.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub subgrammar: Option<String>,
    #[arg(long)]
    #[serde(skip)]
    pub seeds: Option<usize>,
    /// Fully resolved settings.
    #[arg(skip)]
    pub study: Option<pcfg_lab::analysis::StudyConfig>,
    /// Keep per-run checkpoints.
    #[arg(long)]
    #[serde(default)]
    pub checkpoints: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ArithCmd {
    #[command(subcommand)]
    pub action: ArithAction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArithKind {
    /// Long flat chains.
    Chain,
    /// Fully nested binary trees.
    Deep,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ArithAction {
    /// Write a JSONL benchmark.
    Gen {
        #[arg(long, value_enum)]
        kind: ArithKind,
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Terms of a chain or depth of a tree.
        #[arg(long)]
        size: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate one expression exactly.
    Eval {
        #[arg(long, conflicts_with = "expr_file", required_unless_present = "expr_file")]
        expr: Option<String>,
        #[arg(long)]
        expr_file: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FigureCmd {
    /// fig1a, fig1b, fig2a, fig2b, fig3, fig4, fig5, fig6 or fig7.
    pub id: String,
    /// Run directory holding the source artifacts.
    #[arg(long)]
    pub from: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct RerunCmd {
    pub config: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { error::USAGE as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let rc = match cli.command {
        Command::Rerun(r) => {
            let text = std::fs::read_to_string(&r.config)?;
            let mut rc: RunConfig =
                serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", r.config.display())))?;
            if let Some(out) = cli.out {
                rc.out = out;
            }
            rc
        }
        command => {
            let out = cli.out.unwrap_or_else(|| PathBuf::from("runs").join(command.name()));
            RunConfig { out, run: command }
        }
    };
    commands::execute(rc)
}
