//! The encoder-decoder with its three gates.
//!
//! Architecture: pre-norm transformer blocks, sinusoidal positions,
//! weight-tied input/output embeddings, GELU feed-forward, Xavier-uniform
//! init, dropout after attention and FFN. One shared encoder stack encodes
//! both the history sequence and each retrieved step. On top of that:
//!
//! * per-segment gates `alpha = sigmoid(W_a [h0; pooled_segment])` blend
//!   segment hidden states toward a learned mask embedding,
//! * retrieved steps are pooled against `h0` the same way and gated by
//!   `beta` before entering the decoder,
//! * each decoder layer cross-attends over the retrieved bank and mixes
//!   the result in through a per-position gate `gamma` with a layer norm.
//!
//! Training minimizes mean token NLL plus `lambda` times an InfoNCE-style
//! contrastive NLL over negative decodes. Everything is f64 and every
//! gradient is exact (see `tape`).

mod io;
mod tape;

pub use io::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};

use std::collections::HashMap;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::text::{Segment, SegmentedSequence, BOS};
use crate::{Error, Result};
use tape::{NodeId, Tape};

pub use tape::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub dropout_rate: f64,
    /// Apply retrieval fusion in every decoder layer (true) or only the top
    /// layer (false).
    pub fuse_every_layer: bool,
}

impl ModelConfig {
    pub fn with_vocab(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 128,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            ffn_dim: 256,
            vocab_size,
            max_positions: 1024,
            dropout_rate: 0.1,
            fuse_every_layer: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("layer counts and ffn_dim must be positive".into()));
        }
        if self.vocab_size == 0 || self.max_positions == 0 {
            return Err(Error::Config("vocab_size and max_positions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Named tensor registry. Construction order is the declaration order used
/// by the checkpoint format; lookups are by name.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    names: Vec<String>,
    tensors: Vec<Array2<f64>>,
    index: HashMap<String, usize>,
}

impl Parameters {
    pub(crate) fn empty() -> Self {
        Parameters { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    pub(crate) fn insert(&mut self, name: &str, tensor: Array2<f64>) -> usize {
        debug_assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let idx = self.tensors.len();
        self.index.insert(name.to_string(), idx);
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        idx
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn idx(&self, name: &str) -> usize {
        *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn tensor(&self, idx: usize) -> &Array2<f64> {
        &self.tensors[idx]
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Array2<f64> {
        &mut self.tensors[idx]
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.tensor(self.idx(name))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        let idx = self.idx(name);
        self.tensor_mut(idx)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub(crate) fn shapes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.tensors.iter().map(|t| t.dim())
    }
}

/// Per-parameter gradients, aligned with the registry order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Array2<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &Parameters) -> Self {
        Gradients { tensors: params.shapes().map(|(r, c)| Array2::zeros((r, c))).collect() }
    }

    pub fn get<'a>(&'a self, params: &Parameters, name: &str) -> &'a Array2<f64> {
        &self.tensors[params.idx(name)]
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in &mut self.tensors {
            *t *= c;
        }
    }
}

/// Test and diagnostics hook: force a gate to a constant instead of its
/// learned sigmoid.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GateOverrides {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    pub lambda: f64,
    pub tau: f64,
    /// `Some(seed)` enables dropout (training mode) at the configured rate.
    pub dropout_seed: Option<u64>,
    pub overrides: GateOverrides,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            lambda: 0.5,
            tau: 1.0,
            dropout_seed: None,
            overrides: GateOverrides::default(),
        }
    }
}

/// Gated encoder bank for one example.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `[h0; blended segment rows...]`, shape L x d.
    pub hidden: Array2<f64>,
    /// The contextualized summary row h0, shape 1 x d.
    pub cls: Array2<f64>,
    /// One mask gate per content segment, in segment order.
    pub alphas: Vec<f64>,
    /// Segment spans of the input, including the CLS span.
    pub segments: Vec<Segment>,
}

/// Gated encodings of the retrieved candidate steps, concatenated.
#[derive(Debug, Clone)]
pub struct RetrievedEncoding {
    /// Shape (sum of step lengths) x d; 0 x d when nothing was retrieved.
    pub hidden: Array2<f64>,
    pub betas: Vec<f64>,
    /// Token rows contributed by each retrieved step.
    pub lens: Vec<usize>,
}

impl RetrievedEncoding {
    pub fn is_empty(&self) -> bool {
        self.hidden.nrows() == 0
    }
}

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// One row per decoder input position; row q scores the token at q+1.
    pub logits: Array2<f64>,
    /// Top-layer fused hidden states after the final norm.
    pub hidden: Array2<f64>,
    /// Fusion gates per fused layer, one value per position. Empty when no
    /// retrieval bank was attached.
    pub gammas: Vec<Vec<f64>>,
}

/// Tokenized inputs for one training example.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub seq: SegmentedSequence,
    /// Full target ids `[<bos>, ..., <eos>]`.
    pub target: Vec<usize>,
    /// Retrieved steps, each `<template>`-prefixed.
    pub retrieved: Vec<Vec<usize>>,
    /// Negative targets, each `[<bos>, ..., <eos>]`.
    pub negatives: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub gen: f64,
    pub contrastive: f64,
    pub total: f64,
}

/// Windowing/truncation/retrieval settings a checkpoint needs at inference
/// time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub max_history: usize,
    pub max_seg_tokens: usize,
    pub max_target_tokens: usize,
    pub k_retrieved: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig { max_history: 10, max_seg_tokens: 30, max_target_tokens: 40, k_retrieved: 5 }
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub params: Parameters,
    /// Fixed sinusoidal position table, max_positions x d_model. Derived
    /// from the config, not learned, not stored in checkpoints.
    pub pos: Array2<f64>,
}

fn sinusoidal_positions(max_positions: usize, d_model: usize) -> Array2<f64> {
    let mut pos = Array2::zeros((max_positions, d_model));
    for p in 0..max_positions {
        for i in 0..d_model / 2 {
            let rate = (p as f64) / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            pos[[p, 2 * i]] = rate.sin();
            pos[[p, 2 * i + 1]] = rate.cos();
        }
    }
    pos
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Parameters::empty();
        let d = config.d_model;
        let ffn = config.ffn_dim;

        let mut xavier = |params: &mut Parameters, name: &str, rows: usize, cols: usize| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            let t = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..=limit));
            params.insert(name, t);
        };
        let zeros = |params: &mut Parameters, name: &str, rows: usize, cols: usize| {
            params.insert(name, Array2::zeros((rows, cols)));
        };
        let ones = |params: &mut Parameters, name: &str, cols: usize| {
            params.insert(name, Array2::ones((1, cols)));
        };
        let attn = |params: &mut Parameters, xavier: &mut dyn FnMut(&mut Parameters, &str, usize, usize), prefix: &str| {
            for w in ["wq", "wk", "wv", "wo"] {
                xavier(params, &format!("{prefix}.{w}"), d, d);
            }
            for b in ["bq", "bk", "bv", "bo"] {
                params.insert(&format!("{prefix}.{b}"), Array2::zeros((1, d)));
            }
        };
        let norm = |params: &mut Parameters, prefix: &str| {
            params.insert(&format!("{prefix}.gain"), Array2::ones((1, d)));
            params.insert(&format!("{prefix}.bias"), Array2::zeros((1, d)));
        };

        xavier(&mut params, "emb.tok", config.vocab_size, d);
        xavier(&mut params, "emb.mask", 1, d);

        for l in 0..config.n_enc_layers {
            norm(&mut params, &format!("enc.{l}.ln1"));
            attn(&mut params, &mut xavier, &format!("enc.{l}.attn"));
            norm(&mut params, &format!("enc.{l}.ln2"));
            xavier(&mut params, &format!("enc.{l}.ffn.w1"), ffn, d);
            zeros(&mut params, &format!("enc.{l}.ffn.b1"), 1, ffn);
            xavier(&mut params, &format!("enc.{l}.ffn.w2"), d, ffn);
            zeros(&mut params, &format!("enc.{l}.ffn.b2"), 1, d);
        }
        norm(&mut params, "enc.final");

        attn(&mut params, &mut xavier, "pool.alpha");
        xavier(&mut params, "gate.alpha.w", 1, 2 * d);
        attn(&mut params, &mut xavier, "pool.beta");
        xavier(&mut params, "gate.beta.w", 1, 2 * d);

        for l in 0..config.n_dec_layers {
            norm(&mut params, &format!("dec.{l}.ln1"));
            attn(&mut params, &mut xavier, &format!("dec.{l}.self"));
            norm(&mut params, &format!("dec.{l}.ln2"));
            attn(&mut params, &mut xavier, &format!("dec.{l}.cross"));
            attn(&mut params, &mut xavier, &format!("dec.{l}.retr"));
            xavier(&mut params, &format!("dec.{l}.gate.gamma.w"), 1, 2 * d);
            norm(&mut params, &format!("dec.{l}.fuse_ln"));
            norm(&mut params, &format!("dec.{l}.ln3"));
            xavier(&mut params, &format!("dec.{l}.ffn.w1"), ffn, d);
            zeros(&mut params, &format!("dec.{l}.ffn.b1"), 1, ffn);
            xavier(&mut params, &format!("dec.{l}.ffn.w2"), d, ffn);
            zeros(&mut params, &format!("dec.{l}.ffn.b2"), 1, d);
        }
        norm(&mut params, "dec.final");

        xavier(&mut params, "head.w_y", 1, d);
        zeros(&mut params, "head.b_y", 1, 1);
        let _ = ones; // all norms constructed via `norm`

        let pos = sinusoidal_positions(config.max_positions, d);
        Ok(Model { config, params, pos })
    }

    /// Vanilla encoder bank H (embedding + layers + final norm), ungated.
    pub fn encode_raw(&self, ids: &[usize]) -> Result<Array2<f64>> {
        let mut g = Graph::new(self, &ForwardOptions::default());
        let h = g.encoder_stack(ids)?;
        Ok(g.tape.value(h).clone())
    }

    pub fn encode_selective(&self, seq: &SegmentedSequence) -> Result<EncoderOutput> {
        self.encode_selective_with(seq, &GateOverrides::default())
    }

    pub fn encode_selective_with(
        &self,
        seq: &SegmentedSequence,
        overrides: &GateOverrides,
    ) -> Result<EncoderOutput> {
        let opts = ForwardOptions { overrides: *overrides, ..Default::default() };
        let mut g = Graph::new(self, &opts);
        let enc = g.encode_selective(seq)?;
        Ok(g.encoder_output(&enc, seq))
    }

    /// Encode retrieved steps (each already tokenized with its `<template>`
    /// marker) against the history summary `h0`.
    pub fn encode_retrieved(
        &self,
        enc: &EncoderOutput,
        retrieved_ids: &[Vec<usize>],
    ) -> Result<RetrievedEncoding> {
        self.encode_retrieved_with(enc, retrieved_ids, &GateOverrides::default())
    }

    pub fn encode_retrieved_with(
        &self,
        enc: &EncoderOutput,
        retrieved_ids: &[Vec<usize>],
        overrides: &GateOverrides,
    ) -> Result<RetrievedEncoding> {
        let opts = ForwardOptions { overrides: *overrides, ..Default::default() };
        let mut g = Graph::new(self, &opts);
        let h0 = g.tape.constant(enc.cls.clone());
        match g.encode_retrieved(h0, retrieved_ids)? {
            Some(nodes) => Ok(g.retrieved_encoding(&nodes)),
            None => Ok(RetrievedEncoding {
                hidden: Array2::zeros((0, self.config.d_model)),
                betas: Vec::new(),
                lens: Vec::new(),
            }),
        }
    }

    /// Run the decoder over `input_ids` (must start with `<bos>`): row q of
    /// the logits scores the token at position q+1. An empty retrieval
    /// encoding disables the fusion path.
    pub fn decode(
        &self,
        input_ids: &[usize],
        enc: &EncoderOutput,
        retr: Option<&RetrievedEncoding>,
    ) -> Result<DecoderOutput> {
        self.decode_with(input_ids, enc, retr, &GateOverrides::default())
    }

    pub fn decode_with(
        &self,
        input_ids: &[usize],
        enc: &EncoderOutput,
        retr: Option<&RetrievedEncoding>,
        overrides: &GateOverrides,
    ) -> Result<DecoderOutput> {
        let opts = ForwardOptions { overrides: *overrides, ..Default::default() };
        let mut g = Graph::new(self, &opts);
        let hbar = g.tape.constant(enc.hidden.clone());
        let retr_node = match retr {
            Some(r) if !r.is_empty() => Some(g.tape.constant(r.hidden.clone())),
            _ => None,
        };
        let dec = g.decode(input_ids, hbar, retr_node)?;
        Ok(g.decoder_output(&dec))
    }

    /// Build the full training graph for one example and return the loss
    /// values together with the recorded graph.
    pub fn forward_loss<'m>(
        &'m self,
        prep: &PreparedExample,
        opts: &ForwardOptions,
    ) -> Result<LossGraph<'m>> {
        if opts.lambda != 0.0 && prep.negatives.is_empty() {
            return Err(Error::Validation(
                "contrastive loss requires at least one negative sample".into(),
            ));
        }
        if opts.tau <= 0.0 {
            return Err(Error::Config("contrastive temperature must be positive".into()));
        }
        let mut g = Graph::new(self, opts);
        let enc = g.encode_selective(&prep.seq)?;
        let retr = g.encode_retrieved(enc.h0, &prep.retrieved)?;
        let retr_bank = retr.as_ref().map(|r| r.hbar);

        let dec_input = &prep.target[..prep.target.len() - 1];
        let gold = &prep.target[1..];
        let dec = g.decode(dec_input, enc.hbar, retr_bank)?;
        let l_gen = g.tape.cross_entropy_mean(dec.logits, gold);

        let (loss, l_cl_value) = if opts.lambda != 0.0 {
            let y_pos = g.score_hidden(dec.hidden);
            let mut ys = vec![y_pos];
            for neg in &prep.negatives {
                let neg_input = &neg[..neg.len() - 1];
                let neg_dec = g.decode(neg_input, enc.hbar, retr_bank)?;
                ys.push(g.score_hidden(neg_dec.hidden));
            }
            let scores = g.tape.concat_cols(&ys);
            let scaled = g.tape.scale(scores, 1.0 / opts.tau);
            let lse = g.tape.log_sum_exp_row(scaled);
            let pos_scaled = g.tape.slice_cols(scaled, 0, 1);
            let l_cl = g.tape.add_scaled(lse, pos_scaled, -1.0);
            let total = g.tape.add_scaled(l_gen, l_cl, opts.lambda);
            (total, g.tape.value(l_cl)[[0, 0]])
        } else {
            (l_gen, 0.0)
        };

        let breakdown = LossBreakdown {
            gen: g.tape.value(l_gen)[[0, 0]],
            contrastive: l_cl_value,
            total: g.tape.value(loss)[[0, 0]],
        };
        Ok(LossGraph { graph: g, loss, breakdown })
    }

    /// Loss values only (used by finite-difference checks).
    pub fn loss_only(&self, prep: &PreparedExample, opts: &ForwardOptions) -> Result<LossBreakdown> {
        Ok(self.forward_loss(prep, opts)?.breakdown)
    }

    /// Contrastive scores and loss from already-computed decoder hidden
    /// states (the value-level route).
    pub fn contrastive_loss(
        &self,
        pos_hidden: &Array2<f64>,
        neg_hiddens: &[Array2<f64>],
        tau: f64,
    ) -> Result<(f64, f64, Vec<f64>)> {
        let score = |h: &Array2<f64>| -> f64 {
            let w = self.params.get("head.w_y");
            let b = self.params.get("head.b_y")[[0, 0]];
            let mut sum = 0.0;
            for row in h.rows() {
                sum += row.iter().zip(w.row(0)).map(|(x, wj)| x * wj).sum::<f64>() + b;
            }
            sigmoid(sum / h.nrows() as f64)
        };
        let y_pos = score(pos_hidden);
        let y_negs: Vec<f64> = neg_hiddens.iter().map(score).collect();
        let loss = infonce_nll(y_pos, &y_negs, tau)?;
        Ok((loss, y_pos, y_negs))
    }
}

/// Mean negative log-likelihood of `gold` under row-wise softmax of
/// `logits` (row q scores gold[q]).
pub fn generation_loss(logits: &Array2<f64>, gold: &[usize]) -> f64 {
    assert_eq!(logits.nrows(), gold.len(), "logit rows must match gold length");
    let mut nll = 0.0;
    for (row, &g) in logits.rows().into_iter().zip(gold) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        nll -= row[g] - lse;
    }
    nll / gold.len() as f64
}

/// InfoNCE negative log-likelihood of classifying the positive correctly:
/// `-ln( exp(y+/tau) / (sum_k exp(y-_k/tau) + exp(y+/tau)) )`.
pub fn infonce_nll(y_pos: f64, y_negs: &[f64], tau: f64) -> Result<f64> {
    if y_negs.is_empty() {
        return Err(Error::Validation("InfoNCE requires at least one negative".into()));
    }
    if tau <= 0.0 {
        return Err(Error::Config("contrastive temperature must be positive".into()));
    }
    let mut scores: Vec<f64> = Vec::with_capacity(y_negs.len() + 1);
    scores.push(y_pos / tau);
    scores.extend(y_negs.iter().map(|y| y / tau));
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - scores[0])
}

/// A recorded forward pass; `backward` yields exact gradients for every
/// registry parameter (zero for parameters outside the graph).
pub struct LossGraph<'m> {
    graph: Graph<'m>,
    loss: NodeId,
    pub breakdown: LossBreakdown,
}

impl LossGraph<'_> {
    pub fn backward(&self) -> Gradients {
        Gradients { tensors: self.graph.tape.backward(self.loss) }
    }
}

struct EncNodes {
    hbar: NodeId,
    h0: NodeId,
    alphas: Vec<NodeId>,
}

struct RetrNodes {
    hbar: NodeId,
    betas: Vec<NodeId>,
    lens: Vec<usize>,
}

struct DecNodes {
    logits: NodeId,
    hidden: NodeId,
    gammas: Vec<NodeId>,
}

struct Graph<'m> {
    model: &'m Model,
    tape: Tape<'m>,
    param_nodes: HashMap<usize, NodeId>,
    overrides: GateOverrides,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'m> Graph<'m> {
    fn new(model: &'m Model, opts: &ForwardOptions) -> Self {
        let dropout = match opts.dropout_seed {
            Some(seed) if model.config.dropout_rate > 0.0 => {
                Some((model.config.dropout_rate, ChaCha8Rng::seed_from_u64(seed)))
            }
            _ => None,
        };
        Graph {
            model,
            tape: Tape::new(&model.params),
            param_nodes: HashMap::new(),
            overrides: opts.overrides,
            dropout,
        }
    }

    fn p(&mut self, name: &str) -> NodeId {
        let idx = self.model.params.idx(name);
        if let Some(&node) = self.param_nodes.get(&idx) {
            return node;
        }
        let node = self.tape.param(idx);
        self.param_nodes.insert(idx, node);
        node
    }

    fn maybe_dropout(&mut self, x: NodeId) -> NodeId {
        let Some((rate, rng)) = &mut self.dropout else { return x };
        let rate = *rate;
        let keep = 1.0 / (1.0 - rate);
        let dim = self.tape.value(x).dim();
        let mask =
            Array2::from_shape_fn(dim, |_| if rng.gen::<f64>() < rate { 0.0 } else { keep });
        self.tape.dropout(x, mask)
    }

    fn affine(&mut self, x: NodeId, w: &str, b: &str) -> NodeId {
        let w = self.p(w);
        let b = self.p(b);
        let xw = self.tape.matmul(x, w, false, true);
        self.tape.add_bias_row(xw, b)
    }

    fn layer_norm(&mut self, x: NodeId, prefix: &str) -> NodeId {
        let gain = self.p(&format!("{prefix}.gain"));
        let bias = self.p(&format!("{prefix}.bias"));
        self.tape.layer_norm(x, gain, bias)
    }

    /// Standard multi-head attention: query rows from `q_in`, keys/values
    /// from `kv_in`, parameters under `prefix`.
    fn attention(&mut self, q_in: NodeId, kv_in: NodeId, prefix: &str, causal: bool) -> NodeId {
        let d = self.model.config.d_model;
        let heads = self.model.config.n_heads;
        let dk = d / heads;
        let q = self.affine(q_in, &format!("{prefix}.wq"), &format!("{prefix}.bq"));
        let k = self.affine(kv_in, &format!("{prefix}.wk"), &format!("{prefix}.bk"));
        let v = self.affine(kv_in, &format!("{prefix}.wv"), &format!("{prefix}.bv"));
        let mask = if causal {
            let n = self.tape.value(q).nrows();
            let mut m = Array2::zeros((n, n));
            for i in 0..n {
                for j in i + 1..n {
                    m[[i, j]] = f64::NEG_INFINITY;
                }
            }
            Some(m)
        } else {
            None
        };
        let mut ctx = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.tape.slice_cols(q, h * dk, dk);
            let kh = self.tape.slice_cols(k, h * dk, dk);
            let vh = self.tape.slice_cols(v, h * dk, dk);
            let scores = self.tape.matmul(qh, kh, false, true);
            let scaled = self.tape.scale(scores, 1.0 / (dk as f64).sqrt());
            let attn = self.tape.softmax_rows(scaled, mask.as_ref());
            ctx.push(self.tape.matmul(attn, vh, false, false));
        }
        let joined = self.tape.concat_cols(&ctx);
        self.affine(joined, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
    }

    fn ffn(&mut self, x: NodeId, prefix: &str) -> NodeId {
        let h = self.affine(x, &format!("{prefix}.w1"), &format!("{prefix}.b1"));
        let a = self.tape.gelu(h);
        self.affine(a, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    fn embed_sequence(&mut self, ids: &[usize]) -> Result<NodeId> {
        if ids.is_empty() {
            return Err(Error::Validation("cannot embed an empty sequence".into()));
        }
        if ids.len() > self.model.config.max_positions {
            return Err(Error::Validation(format!(
                "sequence length {} exceeds max_positions {}",
                ids.len(),
                self.model.config.max_positions
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.model.config.vocab_size) {
            return Err(Error::Validation(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.model.config.vocab_size
            )));
        }
        let table = self.p("emb.tok");
        let e = self.tape.embed_rows(table, ids);
        let scaled = self.tape.scale(e, (self.model.config.d_model as f64).sqrt());
        let pos = self.tape.constant(self.model.pos.slice(s![..ids.len(), ..]).to_owned());
        Ok(self.tape.add(scaled, pos))
    }

    /// Embedding + encoder blocks + final norm.
    fn encoder_stack(&mut self, ids: &[usize]) -> Result<NodeId> {
        let mut x = self.embed_sequence(ids)?;
        for l in 0..self.model.config.n_enc_layers {
            let normed = self.layer_norm(x, &format!("enc.{l}.ln1"));
            let attn = self.attention(normed, normed, &format!("enc.{l}.attn"), false);
            let attn = self.maybe_dropout(attn);
            let a = self.tape.add(x, attn);
            let normed = self.layer_norm(a, &format!("enc.{l}.ln2"));
            let ff = self.ffn(normed, &format!("enc.{l}.ffn"));
            let ff = self.maybe_dropout(ff);
            x = self.tape.add(a, ff);
        }
        Ok(self.layer_norm(x, "enc.final"))
    }

    /// Pool a span of hidden rows against h0 and compute a scalar gate.
    fn pool_gate(
        &mut self,
        h0: NodeId,
        span: NodeId,
        pool_prefix: &str,
        gate_weight: &str,
        force: Option<f64>,
    ) -> NodeId {
        let pooled = self.attention(h0, span, pool_prefix, false);
        match force {
            Some(v) => self.tape.scalar(v),
            None => {
                let gate_in = self.tape.concat_cols(&[h0, pooled]);
                let w = self.p(gate_weight);
                let logit = self.tape.matmul(gate_in, w, false, true);
                self.tape.sigmoid(logit)
            }
        }
    }

    fn encode_selective(&mut self, seq: &SegmentedSequence) -> Result<EncNodes> {
        if seq.segments.len() < 2 {
            return Err(Error::Validation("input must have at least one content segment".into()));
        }
        for seg in seq.content_segments() {
            if seg.is_empty() {
                return Err(Error::Validation("cannot encode an empty segment".into()));
            }
        }
        let h = self.encoder_stack(&seq.token_ids)?;
        let h0 = self.tape.slice_rows(h, 0, 1);
        let mask_emb = self.p("emb.mask");
        let mut parts = vec![h0];
        let mut alphas = Vec::new();
        for seg in seq.content_segments() {
            let span = self.tape.slice_rows(h, seg.start, seg.len());
            let alpha =
                self.pool_gate(h0, span, "pool.alpha", "gate.alpha.w", self.overrides.alpha);
            let blended = self.tape.gate_blend(alpha, mask_emb, span);
            parts.push(blended);
            alphas.push(alpha);
        }
        let hbar = self.tape.concat_rows(&parts);
        Ok(EncNodes { hbar, h0, alphas })
    }

    fn encode_retrieved(
        &mut self,
        h0: NodeId,
        retrieved_ids: &[Vec<usize>],
    ) -> Result<Option<RetrNodes>> {
        if retrieved_ids.is_empty() {
            return Ok(None);
        }
        let mask_emb = self.p("emb.mask");
        let mut parts = Vec::new();
        let mut betas = Vec::new();
        let mut lens = Vec::new();
        for ids in retrieved_ids {
            let h = self.encoder_stack(ids)?;
            let beta = self.pool_gate(h0, h, "pool.beta", "gate.beta.w", self.overrides.beta);
            parts.push(self.tape.gate_blend(beta, mask_emb, h));
            betas.push(beta);
            lens.push(ids.len());
        }
        let hbar = self.tape.concat_rows(&parts);
        Ok(Some(RetrNodes { hbar, betas, lens }))
    }

    fn decode(&mut self, input_ids: &[usize], hbar: NodeId, retr: Option<NodeId>) -> Result<DecNodes> {
        if input_ids.first() != Some(&BOS) {
            return Err(Error::Validation("decoder input must start with <bos>".into()));
        }
        let n_layers = self.model.config.n_dec_layers;
        let mut x = self.embed_sequence(input_ids)?;
        let mut gammas = Vec::new();
        for l in 0..n_layers {
            let normed = self.layer_norm(x, &format!("dec.{l}.ln1"));
            let self_attn = self.attention(normed, normed, &format!("dec.{l}.self"), true);
            let self_attn = self.maybe_dropout(self_attn);
            let a = self.tape.add(x, self_attn);

            let normed = self.layer_norm(a, &format!("dec.{l}.ln2"));
            let cross = self.attention(normed, hbar, &format!("dec.{l}.cross"), false);
            let cross = self.maybe_dropout(cross);
            let b = self.tape.add(a, cross);

            let fuse_here = self.model.config.fuse_every_layer || l + 1 == n_layers;
            let c = match retr {
                Some(bank) if fuse_here => {
                    let fused = self.attention(b, bank, &format!("dec.{l}.retr"), false);
                    let gamma = match self.overrides.gamma {
                        Some(v) => {
                            let rows = self.tape.value(b).nrows();
                            self.tape.constant(Array2::from_elem((rows, 1), v))
                        }
                        None => {
                            let gate_in = self.tape.concat_cols(&[b, fused]);
                            let w = self.p(&format!("dec.{l}.gate.gamma.w"));
                            let logits = self.tape.matmul(gate_in, w, false, true);
                            self.tape.sigmoid(logits)
                        }
                    };
                    let fused_norm = self.layer_norm(fused, &format!("dec.{l}.fuse_ln"));
                    gammas.push(gamma);
                    self.tape.gate_mix_rows(gamma, fused_norm, b)
                }
                _ => b,
            };

            let normed = self.layer_norm(c, &format!("dec.{l}.ln3"));
            let ff = self.ffn(normed, &format!("dec.{l}.ffn"));
            let ff = self.maybe_dropout(ff);
            x = self.tape.add(c, ff);
        }
        let hidden = self.layer_norm(x, "dec.final");
        let emb = self.p("emb.tok");
        let logits = self.tape.matmul(hidden, emb, false, true);
        Ok(DecNodes { logits, hidden, gammas })
    }

    /// y = sigmoid(Avg(H w_y^T + b_y)) over all positions.
    fn score_hidden(&mut self, hidden: NodeId) -> NodeId {
        let w = self.p("head.w_y");
        let b = self.p("head.b_y");
        let scores = self.tape.matmul(hidden, w, false, true);
        let biased = self.tape.add_bias_row(scores, b);
        let avg = self.tape.mean_all(biased);
        self.tape.sigmoid(avg)
    }

    fn encoder_output(&self, enc: &EncNodes, seq: &SegmentedSequence) -> EncoderOutput {
        EncoderOutput {
            hidden: self.tape.value(enc.hbar).clone(),
            cls: self.tape.value(enc.h0).clone(),
            alphas: enc.alphas.iter().map(|a| self.tape.value(*a)[[0, 0]]).collect(),
            segments: seq.segments.clone(),
        }
    }

    fn retrieved_encoding(&self, retr: &RetrNodes) -> RetrievedEncoding {
        RetrievedEncoding {
            hidden: self.tape.value(retr.hbar).clone(),
            betas: retr.betas.iter().map(|b| self.tape.value(*b)[[0, 0]]).collect(),
            lens: retr.lens.clone(),
        }
    }

    fn decoder_output(&self, dec: &DecNodes) -> DecoderOutput {
        DecoderOutput {
            logits: self.tape.value(dec.logits).clone(),
            hidden: self.tape.value(dec.hidden).clone(),
            gammas: dec
                .gammas
                .iter()
                .map(|g| self.tape.value(*g).column(0).to_vec())
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests;
