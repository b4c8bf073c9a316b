use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LanguageModel, LmError, Vocab};
use crate::dist::TokenDistribution;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
/// Unit-scale embeddings keep the first normalization well conditioned.
const EMB_STD: f64 = 1.0;
const FORMAT: &str = "pcfg-lab-transformer";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub mlp_dim: usize,
    pub max_context: usize,
    #[serde(default)]
    pub dropout: f64,
    pub seed: u64,
    /// Score outputs against the token embeddings instead of a separate
    /// projection.
    #[serde(default)]
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            heads: 2,
            model_dim: 128,
            mlp_dim: 512,
            max_context: 512,
            dropout: 0.0,
            seed: 0,
            tie_embeddings: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), LmError> {
        let bad = |m: String| Err(LmError::InvalidConfig(m));
        if self.layers == 0 || self.heads == 0 || self.model_dim == 0 || self.mlp_dim == 0 {
            return bad("layers, heads, model_dim and mlp_dim must be positive".into());
        }
        if self.model_dim % self.heads != 0 {
            return bad(format!(
                "model_dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            ));
        }
        if self.max_context < 2 {
            return bad("max_context must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Number of trainable scalars for a vocabulary of `vocab_len` ids of
    /// which `outputs` are predicted:
    ///
    /// `(V + C)·d + L·(4d² + 2dm + 9d + m) + 2d + O + [untied] d·O`
    pub fn parameter_count(&self, vocab_len: usize, outputs: usize) -> usize {
        let (d, m) = (self.model_dim, self.mlp_dim);
        let per_layer = 4 * d * d + 2 * d * m + 9 * d + m;
        let head = if self.tie_embeddings { 0 } else { d * outputs };
        (vocab_len + self.max_context) * d + self.layers * per_layer + 2 * d + outputs + head
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Seg {
    off: usize,
    len: usize,
}

impl Seg {
    fn of<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.off..self.off + self.len]
    }

    fn of_mut<'a>(&self, p: &'a mut [f64]) -> &'a mut [f64] {
        &mut p[self.off..self.off + self.len]
    }
}

#[derive(Debug, Clone)]
struct LayerSegs {
    ln1_g: Seg,
    ln1_b: Seg,
    wq: Seg,
    bq: Seg,
    wk: Seg,
    bk: Seg,
    wv: Seg,
    bv: Seg,
    wo: Seg,
    bo: Seg,
    ln2_g: Seg,
    ln2_b: Seg,
    w1: Seg,
    b1: Seg,
    w2: Seg,
    b2: Seg,
}

#[derive(Debug, Clone)]
struct Layout {
    tok: Seg,
    pos: Seg,
    layers: Vec<LayerSegs>,
    lnf_g: Seg,
    lnf_b: Seg,
    head_w: Option<Seg>,
    head_b: Seg,
    groups: Vec<(String, Seg)>,
    total: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig, vocab_len: usize, outputs: usize) -> Layout {
        let (d, m) = (cfg.model_dim, cfg.mlp_dim);
        let mut groups = Vec::new();
        let mut off = 0;
        let mut seg = |name: String, len: usize| {
            let s = Seg { off, len };
            off += len;
            groups.push((name, s));
            s
        };
        let tok = seg("tok_emb".into(), vocab_len * d);
        let pos = seg("pos_emb".into(), cfg.max_context * d);
        let layers = (0..cfg.layers)
            .map(|l| {
                let mut s = |n: &str, len| seg(format!("layer{l}.{n}"), len);
                LayerSegs {
                    ln1_g: s("ln1.gain", d),
                    ln1_b: s("ln1.bias", d),
                    wq: s("attn.wq", d * d),
                    bq: s("attn.bq", d),
                    wk: s("attn.wk", d * d),
                    bk: s("attn.bk", d),
                    wv: s("attn.wv", d * d),
                    bv: s("attn.bv", d),
                    wo: s("attn.wo", d * d),
                    bo: s("attn.bo", d),
                    ln2_g: s("ln2.gain", d),
                    ln2_b: s("ln2.bias", d),
                    w1: s("mlp.w1", d * m),
                    b1: s("mlp.b1", m),
                    w2: s("mlp.w2", m * d),
                    b2: s("mlp.b2", d),
                }
            })
            .collect();
        let lnf_g = seg("ln_f.gain".into(), d);
        let lnf_b = seg("ln_f.bias".into(), d);
        let head_w = (!cfg.tie_embeddings).then(|| seg("head.w".into(), d * outputs));
        let head_b = seg("head.b".into(), outputs);
        Layout {
            tok,
            pos,
            layers,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
            groups,
            total: off,
        }
    }
}

/// `c = a·b + beta·c` for row-major `a` (m×k, or k×m when `ta`) and `b`
/// (k×n, or n×k when `tb`).
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted lengths cover every index the strides reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `x·W + b` for `x` of shape t×din.
fn linear(x: &[f64], t: usize, din: usize, w: &[f64], b: &[f64], dout: usize) -> Vec<f64> {
    let mut y: Vec<f64> = (0..t).flat_map(|_| b.iter().copied()).collect();
    gemm(t, din, dout, x, false, w, false, &mut y, 1.0);
    y
}

/// Accumulates `dW += xᵀ·dy`, `db += Σ dy` and returns `dy·Wᵀ`.
#[allow(clippy::too_many_arguments)]
fn linear_back(
    x: &[f64],
    dy: &[f64],
    t: usize,
    din: usize,
    dout: usize,
    w: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    gemm(din, t, dout, x, true, dy, false, dw, 1.0);
    for row in dy.chunks(dout) {
        for (g, v) in db.iter_mut().zip(row) {
            *g += v;
        }
    }
    let mut dx = vec![0.0; t * din];
    gemm(t, dout, din, dy, false, w, true, &mut dx, 0.0);
    dx
}

#[derive(Debug, Clone)]
struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn layer_norm(x: &[f64], d: usize, g: &[f64], b: &[f64]) -> (Vec<f64>, LnCache) {
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = Vec::with_capacity(x.len() / d);
    for ((row, yr), hr) in x.chunks(d).zip(y.chunks_mut(d)).zip(xhat.chunks_mut(d)) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        for i in 0..d {
            hr[i] = (row[i] - mean) * r;
            yr[i] = hr[i] * g[i] + b[i];
        }
        rstd.push(r);
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_back(dy: &[f64], c: &LnCache, d: usize, g: &[f64], dg: &mut [f64], db: &mut [f64], dx: &mut [f64]) {
    let mut dxhat = vec![0.0; d];
    for (t, (dyr, hr)) in dy.chunks(d).zip(c.xhat.chunks(d)).enumerate() {
        for i in 0..d {
            dg[i] += dyr[i] * hr[i];
            db[i] += dyr[i];
            dxhat[i] = dyr[i] * g[i];
        }
        let m1 = dxhat.iter().sum::<f64>() / d as f64;
        let m2 = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let out = &mut dx[t * d..(t + 1) * d];
        for i in 0..d {
            out[i] += c.rstd[t] * (dxhat[i] - m1 - hr[i] * m2);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let th = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

fn dropout_mask(rng: Option<&mut ChaCha20Rng>, p: f64, n: usize) -> Option<Vec<f64>> {
    let rng = rng.filter(|_| p > 0.0)?;
    let keep = 1.0 / (1.0 - p);
    Some((0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect())
}

#[derive(Debug, Clone)]
struct LayerCache {
    ln1: LnCache,
    h1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// heads × t × t, zero above the diagonal.
    att: Vec<f64>,
    ctx: Vec<f64>,
    attn_out: Vec<f64>,
    mask1: Option<Vec<f64>>,
    ln2: LnCache,
    h2: Vec<f64>,
    u: Vec<f64>,
    act: Vec<f64>,
    mlp_out: Vec<f64>,
    mask2: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct Cache {
    input: Vec<usize>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    hf: Vec<f64>,
    logits: Vec<f64>,
}

/// Which residual branch an activation comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sublayer {
    Attention,
    Mlp,
}

/// Output of one residual branch for one sentence: a positions × model_dim
/// matrix, one row per sentence token.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub layer: usize,
    pub sublayer: Sublayer,
    pub data: DMatrix<f64>,
}

/// Decoder-only transformer with pre-normalization residual blocks, causal
/// attention, learned positions and a GELU MLP. Inputs are prefixed with BOS
/// internally; outputs cover the terminals and EOS.
#[derive(Debug, Clone)]
pub struct Transformer {
    config: ModelConfig,
    vocab: Vocab,
    layout: Layout,
    pub(crate) params: Vec<f64>,
    pub(crate) adam_m: Vec<f64>,
    pub(crate) adam_v: Vec<f64>,
    pub(crate) step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    dtype: String,
    config: ModelConfig,
    vocab: Vocab,
    step: u64,
    parameters: usize,
    optimizer_state: bool,
    groups: Vec<(String, Seg)>,
}

impl Transformer {
    /// Fresh model, initialized deterministically from `config.seed`.
    pub fn new(config: ModelConfig, vocab: Vocab) -> Result<Transformer, LmError> {
        config.validate()?;
        let layout = Layout::new(&config, vocab.len(), vocab.output_size());
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).unwrap();
        let emb = Normal::new(0.0, EMB_STD).unwrap();
        let residual = Normal::new(0.0, INIT_STD / (2.0 * config.layers as f64).sqrt()).unwrap();
        for (name, seg) in &layout.groups {
            let out = seg.of_mut(&mut params);
            if name.ends_with(".gain") {
                out.fill(1.0);
            } else if name.ends_with("attn.wo") || name.ends_with("mlp.w2") {
                out.iter_mut().for_each(|x| *x = residual.sample(&mut rng));
            } else if name.ends_with("_emb") {
                out.iter_mut().for_each(|x| *x = emb.sample(&mut rng));
            } else if name.contains(".w") {
                out.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
            }
        }
        let n = params.len();
        Ok(Transformer {
            config,
            vocab,
            layout,
            params,
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            step: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    /// Optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Named parameter groups as `(name, offset, len)`.
    pub fn parameter_groups(&self) -> Vec<(String, usize, usize)> {
        self.layout
            .groups
            .iter()
            .map(|(n, s)| (n.clone(), s.off, s.len))
            .collect()
    }

    /// Zeroes the output projection and bias so every prediction is uniform.
    /// With tied embeddings only the bias is zeroed.
    pub fn zero_output_head(&mut self) {
        if let Some(w) = self.layout.head_w {
            w.of_mut(&mut self.params).fill(0.0);
        }
        self.layout.head_b.of_mut(&mut self.params).fill(0.0);
    }

    fn check_input(&self, tokens: &[usize]) -> Result<Vec<usize>, LmError> {
        if tokens.len() + 1 > self.config.max_context {
            return Err(LmError::ContextOverflow {
                len: tokens.len() + 1,
                max: self.config.max_context,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.vocab.n_terminals()) {
            return Err(LmError::VocabMismatch(format!("token id {t} is not a terminal")));
        }
        let mut input = Vec::with_capacity(tokens.len() + 1);
        input.push(self.vocab.bos());
        input.extend_from_slice(tokens);
        Ok(input)
    }

    fn forward(&self, input: &[usize], mut rng: Option<&mut ChaCha20Rng>) -> Cache {
        let p = &self.params;
        let l = &self.layout;
        let (d, m, t) = (self.config.model_dim, self.config.mlp_dim, input.len());
        let heads = self.config.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let tok = l.tok.of(p);
        let pos = l.pos.of(p);
        let mut x = vec![0.0; t * d];
        for (i, &id) in input.iter().enumerate() {
            for c in 0..d {
                x[i * d + c] = tok[id * d + c] + pos[i * d + c];
            }
        }
        let mut layers = Vec::with_capacity(l.layers.len());
        for s in &l.layers {
            let (h1, ln1) = layer_norm(&x, d, s.ln1_g.of(p), s.ln1_b.of(p));
            let q = linear(&h1, t, d, s.wq.of(p), s.bq.of(p), d);
            let k = linear(&h1, t, d, s.wk.of(p), s.bk.of(p), d);
            let v = linear(&h1, t, d, s.wv.of(p), s.bv.of(p), d);
            let mut att = vec![0.0; heads * t * t];
            let mut ctx = vec![0.0; t * d];
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..t {
                    let row = &mut att[(h * t + i) * t..(h * t + i + 1) * t];
                    let qi = &q[i * d + cols.start..i * d + cols.end];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &k[j * d + cols.start..j * d + cols.end];
                        row[j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        max = max.max(row[j]);
                    }
                    let mut sum = 0.0;
                    for a in &mut row[..=i] {
                        *a = (*a - max).exp();
                        sum += *a;
                    }
                    for a in &mut row[..=i] {
                        *a /= sum;
                    }
                    let out = &mut ctx[i * d + cols.start..i * d + cols.end];
                    for j in 0..=i {
                        let vj = &v[j * d + cols.start..j * d + cols.end];
                        for (o, vv) in out.iter_mut().zip(vj) {
                            *o += row[j] * vv;
                        }
                    }
                }
            }
            let attn_out = linear(&ctx, t, d, s.wo.of(p), s.bo.of(p), d);
            let mask1 = dropout_mask(rng.as_deref_mut(), self.config.dropout, t * d);
            for i in 0..t * d {
                x[i] += attn_out[i] * mask1.as_ref().map_or(1.0, |mk| mk[i]);
            }
            let (h2, ln2) = layer_norm(&x, d, s.ln2_g.of(p), s.ln2_b.of(p));
            let u = linear(&h2, t, d, s.w1.of(p), s.b1.of(p), m);
            let act: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
            let mlp_out = linear(&act, t, m, s.w2.of(p), s.b2.of(p), d);
            let mask2 = dropout_mask(rng.as_deref_mut(), self.config.dropout, t * d);
            for i in 0..t * d {
                x[i] += mlp_out[i] * mask2.as_ref().map_or(1.0, |mk| mk[i]);
            }
            layers.push(LayerCache {
                ln1,
                h1,
                q,
                k,
                v,
                att,
                ctx,
                attn_out,
                mask1,
                ln2,
                h2,
                u,
                act,
                mlp_out,
                mask2,
            });
        }
        let (hf, lnf) = layer_norm(&x, d, l.lnf_g.of(p), l.lnf_b.of(p));
        let o = self.vocab.output_size();
        let logits = match l.head_w {
            Some(w) => linear(&hf, t, d, w.of(p), l.head_b.of(p), o),
            None => {
                let mut y: Vec<f64> = (0..t).flat_map(|_| l.head_b.of(p).iter().copied()).collect();
                gemm(t, d, o, &hf, false, &tok[..o * d], true, &mut y, 1.0);
                y
            }
        };
        Cache {
            input: input.to_vec(),
            layers,
            lnf,
            hf,
            logits,
        }
    }

    /// Adds the gradient of `Σ_t dlogits[t]·logits[t]` to `grad`.
    fn backward(&self, c: &Cache, dlogits: &[f64], grad: &mut [f64]) {
        let p = &self.params;
        let l = &self.layout;
        let (d, m, t) = (self.config.model_dim, self.config.mlp_dim, c.input.len());
        let heads = self.config.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let o = self.vocab.output_size();

        let dhf = match l.head_w {
            Some(w) => {
                let mut db = vec![0.0; o];
                let mut dw = vec![0.0; d * o];
                let dhf = linear_back(&c.hf, dlogits, t, d, o, w.of(p), &mut dw, &mut db);
                add(w.of_mut(grad), &dw);
                add(l.head_b.of_mut(grad), &db);
                dhf
            }
            None => {
                let hb = l.head_b.of_mut(grad);
                for row in dlogits.chunks(o) {
                    add(hb, row);
                }
                let mut de = vec![0.0; o * d];
                gemm(o, t, d, dlogits, true, &c.hf, false, &mut de, 0.0);
                add(&mut l.tok.of_mut(grad)[..o * d], &de);
                let mut dhf = vec![0.0; t * d];
                gemm(t, o, d, dlogits, false, &l.tok.of(p)[..o * d], false, &mut dhf, 0.0);
                dhf
            }
        };
        let mut dx = vec![0.0; t * d];
        {
            let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
            layer_norm_back(&dhf, &c.lnf, d, l.lnf_g.of(p), &mut dg, &mut db, &mut dx);
            add(l.lnf_g.of_mut(grad), &dg);
            add(l.lnf_b.of_mut(grad), &db);
        }

        for (s, lc) in l.layers.iter().zip(&c.layers).rev() {
            // MLP branch.
            let dmlp: Vec<f64> = match &lc.mask2 {
                Some(mk) => dx.iter().zip(mk).map(|(a, b)| a * b).collect(),
                None => dx.clone(),
            };
            let (mut dw2, mut db2) = (vec![0.0; m * d], vec![0.0; d]);
            let dact = linear_back(&lc.act, &dmlp, t, m, d, s.w2.of(p), &mut dw2, &mut db2);
            add(s.w2.of_mut(grad), &dw2);
            add(s.b2.of_mut(grad), &db2);
            let du: Vec<f64> = dact.iter().zip(&lc.u).map(|(g, &u)| g * gelu_grad(u)).collect();
            let (mut dw1, mut db1) = (vec![0.0; d * m], vec![0.0; m]);
            let dh2 = linear_back(&lc.h2, &du, t, d, m, s.w1.of(p), &mut dw1, &mut db1);
            add(s.w1.of_mut(grad), &dw1);
            add(s.b1.of_mut(grad), &db1);
            let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
            layer_norm_back(&dh2, &lc.ln2, d, s.ln2_g.of(p), &mut dg, &mut db, &mut dx);
            add(s.ln2_g.of_mut(grad), &dg);
            add(s.ln2_b.of_mut(grad), &db);

            // Attention branch.
            let dattn: Vec<f64> = match &lc.mask1 {
                Some(mk) => dx.iter().zip(mk).map(|(a, b)| a * b).collect(),
                None => dx.clone(),
            };
            let (mut dwo, mut dbo) = (vec![0.0; d * d], vec![0.0; d]);
            let dctx = linear_back(&lc.ctx, &dattn, t, d, d, s.wo.of(p), &mut dwo, &mut dbo);
            add(s.wo.of_mut(grad), &dwo);
            add(s.bo.of_mut(grad), &dbo);
            let mut dq = vec![0.0; t * d];
            let mut dk = vec![0.0; t * d];
            let mut dv = vec![0.0; t * d];
            let mut da = vec![0.0; t];
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..t {
                    let a = &lc.att[(h * t + i) * t..(h * t + i + 1) * t];
                    let dci = &dctx[i * d + c0..i * d + c0 + dh];
                    let mut dot = 0.0;
                    for j in 0..=i {
                        let vj = &lc.v[j * d + c0..j * d + c0 + dh];
                        da[j] = dci.iter().zip(vj).map(|(x, y)| x * y).sum();
                        dot += a[j] * da[j];
                        let dvj = &mut dv[j * d + c0..j * d + c0 + dh];
                        for (g, x) in dvj.iter_mut().zip(dci) {
                            *g += a[j] * x;
                        }
                    }
                    for j in 0..=i {
                        let ds = a[j] * (da[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for cc in c0..c0 + dh {
                            dq[i * d + cc] += ds * lc.k[j * d + cc];
                            dk[j * d + cc] += ds * lc.q[i * d + cc];
                        }
                    }
                }
            }
            let mut dh1 = vec![0.0; t * d];
            for (dy, w, b) in [(&dq, s.wq, s.bq), (&dk, s.wk, s.bk), (&dv, s.wv, s.bv)] {
                let (mut dw, mut db) = (vec![0.0; d * d], vec![0.0; d]);
                let part = linear_back(&lc.h1, dy, t, d, d, w.of(p), &mut dw, &mut db);
                add(w.of_mut(grad), &dw);
                add(b.of_mut(grad), &db);
                add(&mut dh1, &part);
            }
            let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
            layer_norm_back(&dh1, &lc.ln1, d, s.ln1_g.of(p), &mut dg, &mut db, &mut dx);
            add(s.ln1_g.of_mut(grad), &dg);
            add(s.ln1_b.of_mut(grad), &db);
        }

        let tok = l.tok.of_mut(grad);
        for (i, &id) in c.input.iter().enumerate() {
            add(&mut tok[id * d..(id + 1) * d], &dx[i * d..(i + 1) * d]);
        }
        let pos = l.pos.of_mut(grad);
        add(&mut pos[..t * d], &dx);
    }

    /// Per-position cross-entropy of `tokens` followed by EOS, adding
    /// `scale ×` its gradient to `grad` when given.
    pub(crate) fn sentence_loss(
        &self,
        tokens: &[usize],
        rng: Option<&mut ChaCha20Rng>,
        grad: Option<(&mut [f64], f64)>,
    ) -> Result<Vec<f64>, LmError> {
        let input = self.check_input(tokens)?;
        let cache = self.forward(&input, rng);
        let o = self.vocab.output_size();
        let t = input.len();
        let mut losses = Vec::with_capacity(t);
        let mut dlogits = vec![0.0; t * o];
        for i in 0..t {
            let target = if i < tokens.len() { tokens[i] } else { self.vocab.eos() };
            let row = &cache.logits[i * o..(i + 1) * o];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            losses.push(lse - row[target]);
            if let Some((_, s)) = &grad {
                let dr = &mut dlogits[i * o..(i + 1) * o];
                for (g, z) in dr.iter_mut().zip(row) {
                    *g = s * (z - lse).exp();
                }
                dr[target] -= s;
            }
        }
        if let Some((g, _)) = grad {
            self.backward(&cache, &dlogits, g);
        }
        Ok(losses)
    }

    /// Mean cross-entropy per token (EOS included) over `batch`.
    pub fn batch_loss(&self, batch: &[Vec<usize>]) -> Result<f64, LmError> {
        let mut total = 0.0;
        let mut count = 0;
        for s in batch {
            let l = self.sentence_loss(s, None, None)?;
            total += l.iter().sum::<f64>();
            count += l.len();
        }
        Ok(total / count.max(1) as f64)
    }

    /// Mean per-token loss over `batch` and the gradient of `scale ×` that
    /// mean.
    pub fn loss_and_grad(&self, batch: &[Vec<usize>], scale: f64) -> Result<(f64, Vec<f64>), LmError> {
        let count: usize = batch.iter().map(|s| s.len() + 1).sum();
        let mut grad = vec![0.0; self.params.len()];
        let mut total = 0.0;
        for s in batch {
            let l = self.sentence_loss(s, None, Some((&mut grad, scale / count as f64)))?;
            total += l.iter().sum::<f64>();
        }
        Ok((total / count as f64, grad))
    }

    /// Largest relative disagreement between analytic gradients and central
    /// differences (step 1e-4) over every parameter, per group. Relative
    /// error is `|a − n| / max(|a|, |n|, 1e-6)`.
    pub fn grad_check(&self, batch: &[Vec<usize>]) -> Result<Vec<(String, f64)>, LmError> {
        if self.config.model_dim > 16 || batch.iter().any(|s| s.len() + 1 > 8) {
            return Err(LmError::InvalidConfig(
                "gradient checks need model_dim ≤ 16 and at most 8 positions per sentence".into(),
            ));
        }
        const H: f64 = 1e-4;
        let (_, analytic) = self.loss_and_grad(batch, 1.0)?;
        let mut probe = self.clone();
        let mut out = Vec::new();
        for (name, seg) in &self.layout.groups {
            let mut worst: f64 = 0.0;
            for i in seg.off..seg.off + seg.len {
                let orig = probe.params[i];
                probe.params[i] = orig + H;
                let up = probe.batch_loss(batch)?;
                probe.params[i] = orig - H;
                let down = probe.batch_loss(batch)?;
                probe.params[i] = orig;
                let numeric = (up - down) / (2.0 * H);
                let a = analytic[i];
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max((a - numeric).abs() / denom);
            }
            out.push((name.clone(), worst));
        }
        Ok(out)
    }

    /// Logits (terminals then EOS) after BOS and after each token.
    pub fn logits(&self, tokens: &[usize]) -> Result<Vec<Vec<f64>>, LmError> {
        let input = self.check_input(tokens)?;
        let c = self.forward(&input, None);
        Ok(c.logits.chunks(self.vocab.output_size()).map(<[f64]>::to_vec).collect())
    }

    /// Attention and MLP branch outputs of every layer, rows aligned with the
    /// sentence tokens (the BOS row is dropped).
    pub fn capture_activations(&self, tokens: &[usize]) -> Result<Vec<ActivationRecord>, LmError> {
        let input = self.check_input(tokens)?;
        let c = self.forward(&input, None);
        let d = self.config.model_dim;
        let n = tokens.len();
        let take = |v: &[f64]| DMatrix::from_row_slice(n, d, &v[d..]);
        let mut out = Vec::with_capacity(2 * c.layers.len());
        for (layer, lc) in c.layers.iter().enumerate() {
            out.push(ActivationRecord {
                layer,
                sublayer: Sublayer::Attention,
                data: take(&lc.attn_out),
            });
            out.push(ActivationRecord {
                layer,
                sublayer: Sublayer::Mlp,
                data: take(&lc.mlp_out),
            });
        }
        Ok(out)
    }

    /// Writes a one-line JSON header followed by the parameters and, if
    /// `with_optimizer`, the Adam moments as little-endian f64.
    pub fn save(&self, path: &Path, with_optimizer: bool) -> Result<(), LmError> {
        let header = Header {
            format: FORMAT.into(),
            version: FORMAT_VERSION,
            dtype: "f64le".into(),
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            step: self.step,
            parameters: self.params.len(),
            optimizer_state: with_optimizer,
            groups: self.layout.groups.clone(),
        };
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, &header).map_err(|e| LmError::Format(e.to_string()))?;
        w.write_all(b"\n")?;
        let mut blocks = vec![&self.params];
        if with_optimizer {
            blocks.push(&self.adam_m);
            blocks.push(&self.adam_v);
        }
        for block in blocks {
            for x in block {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Transformer, LmError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut line = String::new();
        r.read_line(&mut line)?;
        let h: Header = serde_json::from_str(&line).map_err(|e| LmError::Format(e.to_string()))?;
        if h.format != FORMAT || h.version != FORMAT_VERSION || h.dtype != "f64le" {
            return Err(LmError::Format(format!(
                "unsupported format {} v{} ({})",
                h.format, h.version, h.dtype
            )));
        }
        let mut model = Transformer::new(h.config, h.vocab)?;
        if h.parameters != model.params.len() || h.groups != model.layout.groups {
            return Err(LmError::Format("parameter layout does not match the configuration".into()));
        }
        let mut read_block = |dst: &mut Vec<f64>| -> Result<(), LmError> {
            let mut buf = vec![0u8; dst.len() * 8];
            r.read_exact(&mut buf)
                .map_err(|_| LmError::Format("truncated tensor data".into()))?;
            for (x, b) in dst.iter_mut().zip(buf.chunks_exact(8)) {
                *x = f64::from_le_bytes(b.try_into().unwrap());
            }
            Ok(())
        };
        read_block(&mut model.params)?;
        if h.optimizer_state {
            read_block(&mut model.adam_m)?;
            read_block(&mut model.adam_v)?;
        }
        if r.read(&mut [0u8])? != 0 {
            return Err(LmError::Format("trailing bytes after tensor data".into()));
        }
        model.step = h.step;
        Ok(model)
    }
}

fn add(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

fn softmax(row: &[f64]) -> TokenDistribution {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
    let s: f64 = e.iter().sum();
    TokenDistribution::new(e.into_iter().map(|x| x / s).collect())
}

impl LanguageModel for Transformer {
    fn alphabet_size(&self) -> usize {
        self.vocab.output_size()
    }

    fn next_dist(&self, prefix: &[usize]) -> Result<TokenDistribution, LmError> {
        let logits = self.logits(prefix)?;
        Ok(softmax(logits.last().unwrap()))
    }

    fn sequence_dists(&self, tokens: &[usize]) -> Result<Vec<TokenDistribution>, LmError> {
        Ok(self.logits(tokens)?.iter().map(|r| softmax(r)).collect())
    }
}
