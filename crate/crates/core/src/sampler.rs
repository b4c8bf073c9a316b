//! Ancestral sampling, token attribution and JSONL corpora.
//!
//! Every sample `i` of a run with seed `s` draws from its own ChaCha20
//! stream `(s, i)`, so corpora are reproducible and can be generated in any
//! order. Rule choice inverts an integer cumulative table (weights scaled by
//! 10⁹), which keeps sampling decisions free of floating-point comparisons.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{Grammar, Symbol};
use crate::subgrammar::{decompose_dag, top_level, SubgrammarDag};

pub const OVERHEAD: &str = "OVERHEAD";
pub const ROOT_EOS: &str = "ROOT-EOS";

const WEIGHT_SCALE: f64 = 1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleLimits {
    pub max_tokens: usize,
    pub max_depth: usize,
    pub max_resamples: usize,
}

impl Default for SampleLimits {
    fn default() -> Self {
        SampleLimits {
            max_tokens: 512,
            max_depth: 64,
            max_resamples: 100,
        }
    }
}

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("sample {index} exceeded the limits {attempts} times in a row")]
    ResampleBudgetExhausted { index: u64, attempts: usize },
    #[error("tree and subgrammar DAG come from different grammars")]
    MismatchedGrammar,
    #[error("corpus line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Child {
    Node(usize),
    Terminal(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub nonterminal: usize,
    pub rule: usize,
    pub children: Vec<Child>,
}

/// A derivation tree stored as an arena; node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivationTree {
    pub nodes: Vec<TreeNode>,
    pub log_prob: f64,
}

impl DerivationTree {
    /// Left-to-right terminal frontier.
    pub fn tokens(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.walk(|_, c, _| {
            if let Child::Terminal(t) = c {
                out.push(t);
            }
        });
        out
    }

    /// Rule ids in preorder.
    pub fn rule_trace(&self) -> Vec<usize> {
        let mut out = vec![self.nodes[0].rule];
        self.walk(|_, c, _| {
            if let Child::Node(n) = c {
                out.push(self.nodes[n].rule);
            }
        });
        out
    }

    /// Height counted in nodes (a single rule application has height 1).
    pub fn height(&self) -> usize {
        let mut max = 1;
        self.walk(|path, c, _| {
            if let Child::Node(_) = c {
                max = max.max(path.len() + 1);
            }
        });
        max
    }

    /// Preorder walk over children; the callback receives the path of node
    /// ids from the root to the parent, the child, and its position.
    pub fn walk(&self, mut f: impl FnMut(&[usize], Child, usize)) {
        let mut path = vec![0usize];
        let mut stack: Vec<(usize, usize)> = vec![(0, 0)];
        while let Some(&mut (node, ref mut next)) = stack.last_mut() {
            if *next == self.nodes[node].children.len() {
                stack.pop();
                path.pop();
                continue;
            }
            let pos = *next;
            *next += 1;
            let child = self.nodes[node].children[pos];
            f(&path, child, pos);
            if let Child::Node(c) = child {
                stack.push((c, 0));
                path.push(c);
            }
        }
    }

    /// Recomputes the log probability from the rule weights.
    pub fn recompute_log_prob(&self, g: &Grammar) -> f64 {
        self.nodes.iter().map(|n| g.rule(n.rule).weight.ln()).sum()
    }
}

/// A grammar prepared for sampling.
#[derive(Debug, Clone)]
pub struct Sampler {
    grammar: Grammar,
    limits: SampleLimits,
    /// Per nonterminal: `(cumulative scaled weight, rule id)`.
    tables: Vec<Vec<(u64, usize)>>,
    log_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub tree: DerivationTree,
    /// Number of draws needed, including the accepted one.
    pub attempts: usize,
}

impl Sampler {
    pub fn new(g: &Grammar, limits: SampleLimits) -> Sampler {
        assert!(limits.max_tokens > 0 && limits.max_depth > 0 && limits.max_resamples > 0);
        let tables = (0..g.nonterminals().len())
            .map(|a| {
                let mut acc = 0u64;
                g.rules_for(a)
                    .iter()
                    .filter_map(|&r| {
                        let w = (g.rule(r).weight * WEIGHT_SCALE).round() as u64;
                        (w > 0).then(|| {
                            acc += w;
                            (acc, r)
                        })
                    })
                    .collect()
            })
            .collect();
        Sampler {
            grammar: g.clone(),
            limits,
            tables,
            log_weights: g.rules().iter().map(|r| r.weight.ln()).collect(),
        }
    }

    pub fn grammar(&self) -> &Grammar {
        &self.grammar
    }

    pub fn limits(&self) -> SampleLimits {
        self.limits
    }

    fn choose(&self, rng: &mut ChaCha20Rng, a: usize) -> usize {
        let table = &self.tables[a];
        let total = table.last().expect("nonterminal has a positive rule").0;
        let u = rng.gen_range(0..total);
        table[table.partition_point(|&(c, _)| c <= u)].1
    }

    fn attempt(&self, rng: &mut ChaCha20Rng) -> Option<DerivationTree> {
        let g = &self.grammar;
        let mut nodes: Vec<TreeNode> = Vec::new();
        let mut tokens = 0usize;
        let mut log_prob = 0.0;
        // (node id, depth); children are filled in when the node is created
        // and expanded depth-first, left to right.
        let mut pending: Vec<(usize, usize)> = Vec::new();
        let mut create = |nodes: &mut Vec<TreeNode>, a: usize, rng: &mut ChaCha20Rng| {
            let r = self.choose(rng, a);
            log_prob += self.log_weights[r];
            nodes.push(TreeNode {
                nonterminal: a,
                rule: r,
                children: Vec::with_capacity(g.rule(r).rhs.len()),
            });
            nodes.len() - 1
        };
        let root = create(&mut nodes, g.start(), rng);
        pending.push((root, 1));
        while let Some((id, depth)) = pending.pop() {
            if depth > self.limits.max_depth {
                return None;
            }
            let rule = g.rule(nodes[id].rule);
            let mut kids = Vec::with_capacity(rule.rhs.len());
            let mut expand = Vec::new();
            for s in &rule.rhs {
                match *s {
                    Symbol::Terminal(t) => {
                        tokens += 1;
                        kids.push(Child::Terminal(t));
                    }
                    Symbol::Nonterminal(b) => {
                        let c = create(&mut nodes, b, rng);
                        kids.push(Child::Node(c));
                        expand.push(c);
                    }
                }
            }
            if tokens > self.limits.max_tokens {
                return None;
            }
            nodes[id].children = kids;
            for &c in expand.iter().rev() {
                pending.push((c, depth + 1));
            }
        }
        Some(DerivationTree { nodes, log_prob })
    }

    /// Draws sample `index` of the run seeded with `seed`, rejecting and
    /// redrawing (from the same stream) while the limits are exceeded.
    pub fn sample(&self, seed: u64, index: u64) -> Result<Sample, SampleError> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(index);
        for attempts in 1..=self.limits.max_resamples {
            if let Some(tree) = self.attempt(&mut rng) {
                return Ok(Sample { tree, attempts });
            }
        }
        Err(SampleError::ResampleBudgetExhausted {
            index,
            attempts: self.limits.max_resamples,
        })
    }

    /// Samples `n` annotated sentences, indices `0..n`.
    pub fn corpus(&self, seed: u64, n: usize) -> Result<Corpus, SampleError> {
        self.corpus_range(seed, 0, n)
    }

    pub fn corpus_range(&self, seed: u64, first: u64, n: usize) -> Result<Corpus, SampleError> {
        let drawn = self.annotated_range(seed, first, n)?;
        let attempts = drawn.iter().map(|d| d.attempts).sum::<usize>();
        Ok(Corpus {
            sentences: drawn.into_iter().map(|d| d.sentence).collect(),
            attempts,
        })
    }

    /// Samples `first..first + n` with both their trees and annotations.
    pub fn annotated_range(&self, seed: u64, first: u64, n: usize) -> Result<Vec<AnnotatedSample>, SampleError> {
        let dag = decompose_dag(&self.grammar);
        let split_roots = top_level_roots(&self.grammar);
        (first..first + n as u64)
            .into_par_iter()
            .map(|i| {
                let s = self.sample(seed, i)?;
                let mut a = annotate(&self.grammar, &s.tree, &dag, &split_roots)?;
                a.seed = seed;
                a.index = i;
                Ok(AnnotatedSample {
                    tree: s.tree,
                    sentence: a,
                    attempts: s.attempts,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSample {
    pub tree: DerivationTree,
    pub sentence: AnnotatedSentence,
    pub attempts: usize,
}

pub fn sample(g: &Grammar, seed: u64, limits: SampleLimits) -> Result<DerivationTree, SampleError> {
    Ok(Sampler::new(g, limits).sample(seed, 0)?.tree)
}

/// A sentence with its per-token attribution. `buckets` and `attribution`
/// have one more entry than `tokens`: the EOS slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedSentence {
    pub tokens: Vec<usize>,
    /// Top-level subgrammar that emitted each token (the root nonterminal's
    /// name), [`OVERHEAD`] for terminals of the start rule, [`ROOT_EOS`].
    pub buckets: Vec<String>,
    /// DAG node ids from the root to the emitting node, with consecutive
    /// repeats collapsed.
    pub attribution: Vec<Vec<usize>>,
    pub rule_trace: Vec<usize>,
    pub log_prob: f64,
    pub seed: u64,
    pub index: u64,
}

impl AnnotatedSentence {
    /// Maximal runs of equal buckets as `(bucket, start, end)`.
    pub fn spans(&self) -> Vec<(&str, usize, usize)> {
        let mut out: Vec<(&str, usize, usize)> = Vec::new();
        for (i, b) in self.buckets.iter().enumerate() {
            match out.last_mut() {
                Some(last) if last.0 == b => last.2 = i + 1,
                _ => out.push((b, i, i + 1)),
            }
        }
        out
    }
}

fn top_level_roots(g: &Grammar) -> Vec<Option<String>> {
    let split = top_level(g);
    (0..g.nonterminals().len())
        .map(|a| split.subgrammars.iter().find(|e| e.nonterminal == a).map(|e| e.root.clone()))
        .collect()
}

fn annotate(
    g: &Grammar,
    tree: &DerivationTree,
    dag: &SubgrammarDag,
    roots: &[Option<String>],
) -> Result<AnnotatedSentence, SampleError> {
    if dag.nodes.iter().map(|n| n.label.len()).sum::<usize>() != g.nonterminals().len()
        || tree.nodes[0].nonterminal != g.start()
        || dag.node_of(g.start()) != dag.root
    {
        return Err(SampleError::MismatchedGrammar);
    }
    let mut tokens = Vec::new();
    let mut buckets = Vec::new();
    let mut attribution = Vec::new();
    tree.walk(|path, child, _| {
        if let Child::Terminal(t) = child {
            tokens.push(t);
            buckets.push(if path.len() == 1 {
                OVERHEAD.to_string()
            } else {
                let top = tree.nodes[path[1]].nonterminal;
                roots[top].clone().unwrap_or_else(|| g.nonterminal_name(top).to_string())
            });
            let mut nodes: Vec<usize> = Vec::with_capacity(path.len());
            for &p in path {
                let d = dag.node_of(tree.nodes[p].nonterminal);
                if nodes.last() != Some(&d) {
                    nodes.push(d);
                }
            }
            attribution.push(nodes);
        }
    });
    buckets.push(ROOT_EOS.to_string());
    attribution.push(vec![dag.root]);
    Ok(AnnotatedSentence {
        tokens,
        buckets,
        attribution,
        rule_trace: tree.rule_trace(),
        log_prob: tree.log_prob,
        seed: 0,
        index: 0,
    })
}

/// Attributes the tokens of `tree` to top-level subgrammars and DAG nodes.
pub fn linearize(
    g: &Grammar,
    tree: &DerivationTree,
    dag: &SubgrammarDag,
) -> Result<AnnotatedSentence, SampleError> {
    annotate(g, tree, dag, &top_level_roots(g))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub sentences: Vec<AnnotatedSentence>,
    /// Total draws including rejected ones.
    pub attempts: usize,
}

impl Corpus {
    pub fn acceptance_rate(&self) -> f64 {
        if self.attempts == 0 {
            1.0
        } else {
            self.sentences.len() as f64 / self.attempts as f64
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    tokens: Vec<String>,
    buckets: Vec<String>,
    attribution: Vec<Vec<usize>>,
    rule_trace: Vec<usize>,
    log_prob: f64,
    seed: u64,
    index: u64,
}

/// Writes one JSON object per line; tokens are written by name.
pub fn write_corpus(g: &Grammar, sentences: &[AnnotatedSentence], path: &Path) -> Result<(), SampleError> {
    let mut out = BufWriter::new(File::create(path)?);
    for s in sentences {
        let rec = Record {
            tokens: g.decode(&s.tokens),
            buckets: s.buckets.clone(),
            attribution: s.attribution.clone(),
            rule_trace: s.rule_trace.clone(),
            log_prob: s.log_prob,
            seed: s.seed,
            index: s.index,
        };
        serde_json::to_writer(&mut out, &rec).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a corpus written by [`write_corpus`], mapping token names through
/// `g` (which may be a larger grammar sharing the terminal names).
pub fn read_corpus(g: &Grammar, path: &Path) -> Result<Vec<AnnotatedSentence>, SampleError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| SampleError::Malformed {
            line: i + 1,
            message,
        };
        let rec: Record = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let tokens = g.encode(&rec.tokens).map_err(|e| malformed(e.to_string()))?;
        if rec.buckets.len() != tokens.len() + 1 || rec.attribution.len() != tokens.len() + 1 {
            return Err(malformed("buckets/attribution length must be tokens + 1".into()));
        }
        out.push(AnnotatedSentence {
            tokens,
            buckets: rec.buckets,
            attribution: rec.attribution,
            rule_trace: rec.rule_trace,
            log_prob: rec.log_prob,
            seed: rec.seed,
            index: rec.index,
        });
    }
    Ok(out)
}
