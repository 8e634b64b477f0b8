//! Optimization: AdamW with decoupled weight decay, linear warmup into
//! cosine annealing with warm restarts, per-epoch negative resampling,
//! early stopping on validation BLEU-4 with a ROUGE-L tiebreak, and
//! deterministic checkpointing.
//!
//! Everything derives from one master seed; two runs with the same seed
//! write byte-identical logs and checkpoints.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use ndarray::Zip;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{build_examples, Corpus, TrainingExample};
use crate::inference::{beam_search, GenerateSettings};
use crate::metrics::{bleu, rouge_l_corpus};
use crate::model::{
    save_checkpoint, Checkpoint, ForwardOptions, Gradients, Model, ModelConfig, Parameters,
    PipelineConfig, PreparedExample,
};
use crate::retrieval::{build_negative_pools, draw_from_pools, EmbeddingIndex, NegativePools};
use crate::text::{assemble_input, encode_retrieved_step, encode_target, SegmentedSequence, Tokenizer};
use crate::{Error, Result};

/// Flat training configuration, mirrored one-to-one by the JSON config
/// file. The defaults are the full-scale settings; desk-scale runs override
/// them in the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub lr_min: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub restart_period: u64,
    pub restart_mult: u64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lambda: f64,
    pub tau: f64,
    pub n_self: usize,
    pub n_retr: usize,
    pub neg_pool: usize,
    pub k_retrieved: usize,
    pub seed: u64,
    pub min_freq: usize,
    pub max_history: usize,
    pub max_seg_tokens: usize,
    pub max_target_tokens: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub max_positions: usize,
    pub fuse_every_layer: bool,
    pub exclude_own_task: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_peak: 1e-5,
            lr_min: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-6,
            weight_decay: 0.01,
            warmup_steps: 2000,
            restart_period: 1000,
            restart_mult: 2,
            batch_size: 16,
            max_epochs: 30,
            patience: 10,
            lambda: 0.5,
            tau: 1.0,
            n_self: 4,
            n_retr: 1,
            neg_pool: 20,
            k_retrieved: 5,
            seed: 42,
            min_freq: 1,
            max_history: 10,
            max_seg_tokens: 30,
            max_target_tokens: 40,
            d_model: 128,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            ffn_dim: 256,
            dropout: 0.1,
            max_positions: 1024,
            fuse_every_layer: true,
            exclude_own_task: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_peak <= 0.0 || self.lr_min < 0.0 || self.lr_min > self.lr_peak {
            return Err(Error::Config("need 0 <= lr_min <= lr_peak and lr_peak > 0".into()));
        }
        if self.patience == 0 || self.patience > self.max_epochs {
            return Err(Error::Config("need 1 <= patience <= max_epochs".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.restart_period == 0 || self.restart_mult == 0 {
            return Err(Error::Config("restart_period and restart_mult must be positive".into()));
        }
        if self.lambda < 0.0 || self.tau <= 0.0 {
            return Err(Error::Config("need lambda >= 0 and tau > 0".into()));
        }
        if self.lambda > 0.0 && self.n_self + self.n_retr == 0 {
            return Err(Error::Config("contrastive training needs at least one negative".into()));
        }
        if self.max_history == 0 || self.max_seg_tokens == 0 || self.max_target_tokens == 0 {
            return Err(Error::Config("window and truncation limits must be positive".into()));
        }
        self.model_config(2).validate()
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_enc_layers: self.n_enc_layers,
            n_dec_layers: self.n_dec_layers,
            ffn_dim: self.ffn_dim,
            vocab_size,
            max_positions: self.max_positions,
            dropout_rate: self.dropout,
            fuse_every_layer: self.fuse_every_layer,
        }
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            max_history: self.max_history,
            max_seg_tokens: self.max_seg_tokens,
            max_target_tokens: self.max_target_tokens,
            k_retrieved: self.k_retrieved,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_reader(fs::File::open(path)?)
    }

    pub fn from_json_reader<R: Read>(reader: R) -> Result<Self> {
        let config: TrainConfig =
            serde_json::from_reader(reader).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Linear warmup from 0 to `lr_peak` over `warmup_steps`, then cosine
/// annealing with warm restarts: within a cycle of length `T_i`,
/// `lr = lr_min + (lr_peak - lr_min) * (1 + cos(pi * t / T_i)) / 2`,
/// with cycle lengths growing by `restart_mult`.
pub fn lr_schedule(config: &TrainConfig, step: u64) -> f64 {
    if step < config.warmup_steps {
        return config.lr_peak * step as f64 / config.warmup_steps as f64;
    }
    let mut t = step - config.warmup_steps;
    let mut period = config.restart_period;
    while t >= period {
        t -= period;
        period = period.saturating_mul(config.restart_mult);
    }
    let cos = (std::f64::consts::PI * t as f64 / period as f64).cos();
    config.lr_min + 0.5 * (config.lr_peak - config.lr_min) * (1.0 + cos)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(c: &TrainConfig) -> Self {
        AdamHyper {
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// Step counter plus first/second moment estimates, shaped like the
/// parameters.
pub struct AdamState {
    pub step: u64,
    m: Vec<ndarray::Array2<f64>>,
    v: Vec<ndarray::Array2<f64>>,
}

impl AdamState {
    pub fn new(params: &Parameters) -> Self {
        let zeros = Gradients::zeros_like(params);
        AdamState { step: 0, m: zeros.tensors.clone(), v: zeros.tensors }
    }

    pub fn moments(&self, idx: usize) -> (&ndarray::Array2<f64>, &ndarray::Array2<f64>) {
        (&self.m[idx], &self.v[idx])
    }
}

/// One bias-corrected AdamW update plus decoupled decay
/// `theta <- theta - lr * wd * theta`. Non-finite gradients abort with the
/// offending parameter named.
pub fn adamw_step(
    state: &mut AdamState,
    params: &mut Parameters,
    grads: &Gradients,
    lr: f64,
    hyper: &AdamHyper,
) -> Result<()> {
    for i in 0..params.len() {
        if let Some(bad) = grads.tensors[i].iter().find(|g| !g.is_finite()) {
            return Err(Error::Train(format!(
                "non-finite gradient {bad} for `{}` at step {}",
                params.name(i),
                state.step
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for i in 0..params.len() {
        let g = &grads.tensors[i];
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        Zip::from(&mut *m).and(g).for_each(|m, &g| *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g);
        Zip::from(&mut *v)
            .and(g)
            .for_each(|v, &g| *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g);
        let theta = params.tensor_mut(i);
        Zip::from(&mut *theta).and(&*m).and(&*v).for_each(|p, &m, &v| {
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            *p -= lr * (m_hat / (v_hat.sqrt() + hyper.eps) + hyper.weight_decay * *p);
        });
    }
    Ok(())
}

/// Deterministic per-purpose seed derivation (splitmix64 finalizer).
pub(crate) fn mix_seed(master: u64, tag: u64, salt: u64) -> u64 {
    let mut z = master
        ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ salt.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub l_gen: f64,
    pub l_cl: f64,
    pub total: f64,
    pub val_bleu4: f64,
    pub val_rouge_l: f64,
    pub lr: f64,
    pub examples_seen: usize,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_bleu4: f64,
    pub best_val_rouge_l: f64,
    pub steps: u64,
    pub stopped_early: bool,
}

pub struct TrainArtifacts {
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub vocab_path: PathBuf,
    pub report: TrainReport,
}

struct CachedExample {
    example: TrainingExample,
    seq: SegmentedSequence,
    target: Vec<usize>,
    retrieved: Vec<Vec<usize>>,
    pools: NegativePools,
}

fn prepare(
    examples: Vec<TrainingExample>,
    tokenizer: &Tokenizer,
    index: &EmbeddingIndex,
    config: &TrainConfig,
) -> Result<Vec<CachedExample>> {
    let mut out = Vec::with_capacity(examples.len());
    for example in examples {
        let seq = assemble_input(tokenizer, &example, config.max_seg_tokens);
        let target = encode_target(tokenizer, &example.target, config.max_target_tokens);
        let exclude = config.exclude_own_task.then_some(example.task_id.as_str());
        let retrieved = if config.k_retrieved > 0 {
            let last = &example.history.last().expect("history is never empty").0;
            crate::retrieval::retrieve_next_steps(index, last, config.k_retrieved, exclude)?
                .steps
                .iter()
                .map(|s| encode_retrieved_step(tokenizer, s, config.max_seg_tokens))
                .collect()
        } else {
            Vec::new()
        };
        let pools = build_negative_pools(index, &example, config.neg_pool, exclude);
        out.push(CachedExample { example, seq, target, retrieved, pools });
    }
    Ok(out)
}

/// Greedy-decode the validation split and score corpus BLEU-4 and mean
/// ROUGE-L against the gold next steps.
fn validate(
    model: &Model,
    cached: &[CachedExample],
    tokenizer: &Tokenizer,
    config: &TrainConfig,
) -> Result<(f64, f64)> {
    let mut candidates = Vec::with_capacity(cached.len());
    let mut references = Vec::with_capacity(cached.len());
    let settings = GenerateSettings { beam: 1, max_len: config.max_target_tokens, len_alpha: 1.0 };
    for item in cached {
        let enc = model.encode_selective(&item.seq)?;
        let retr = model.encode_retrieved(&enc, &item.retrieved)?;
        let ids = beam_search(model, &enc, Some(&retr), &settings)?;
        candidates.push(tokenizer.decode(&ids));
        references.push(item.example.target.clone());
    }
    let b4 = bleu(&candidates, &references, 4)?;
    let rl = rouge_l_corpus(&candidates, &references)?;
    Ok((b4, rl))
}

/// Full training loop. Writes `vocab.txt`, `checkpoint.bin` plus a text
/// manifest sidecar, and `train.log` into `out_dir`, and returns the paths
/// with the per-epoch report.
pub fn train(
    train_corpus: &Corpus,
    valid_corpus: &Corpus,
    tokenizer: &Tokenizer,
    index: &EmbeddingIndex,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainArtifacts> {
    config.validate()?;
    let train_examples = build_examples(train_corpus, config.max_history);
    if train_examples.is_empty() {
        return Err(Error::Validation("training corpus has no examples".into()));
    }
    let valid_examples = build_examples(valid_corpus, config.max_history);
    if valid_examples.is_empty() {
        return Err(Error::Validation("validation corpus has no examples".into()));
    }
    fs::create_dir_all(out_dir)?;

    let cached_train = prepare(train_examples, tokenizer, index, config)?;
    let cached_valid = prepare(valid_examples, tokenizer, index, config)?;

    let mut model = Model::new(config.model_config(tokenizer.vocab_size()), config.seed)?;
    let mut adam = AdamState::new(&model.params);
    let hyper = AdamHyper::from(config);

    let vocab_path = out_dir.join("vocab.txt");
    tokenizer.save(&vocab_path)?;
    let mut vocab_bytes = Vec::new();
    tokenizer.write(&mut vocab_bytes)?;
    let vocab_sha = hex_digest(&vocab_bytes);

    let checkpoint_path = out_dir.join("checkpoint.bin");
    let log_path = out_dir.join("train.log");

    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_bleu4: f64::NEG_INFINITY,
        best_val_rouge_l: f64::NEG_INFINITY,
        stopped_early: false,
        steps: 0,
    };
    let mut epochs_since_best = 0usize;
    let mut log_lines = String::from("epoch\tl_gen\tl_cl\tl\tval_bleu4\tval_rougeL\tlr\n");

    for epoch in 1..=config.max_epochs {
        let mut order: Vec<usize> = (0..cached_train.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 0xe, epoch as u64));
        order.shuffle(&mut shuffle_rng);

        let mut sum_gen = 0.0;
        let mut sum_cl = 0.0;
        let mut sum_total = 0.0;
        let mut seen = 0usize;
        let mut last_lr = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut acc = Gradients::zeros_like(&model.params);
            for &idx in batch {
                let item = &cached_train[idx];
                let salt = ((epoch as u64) << 32) | idx as u64;
                let negatives = if config.lambda > 0.0 {
                    draw_from_pools(
                        &item.pools,
                        config.n_self,
                        config.n_retr,
                        mix_seed(config.seed, 0x1, salt),
                    )
                    .all()
                    .map(|t| encode_target(tokenizer, t, config.max_target_tokens))
                    .collect()
                } else {
                    Vec::new()
                };
                let prep = PreparedExample {
                    seq: item.seq.clone(),
                    target: item.target.clone(),
                    retrieved: item.retrieved.clone(),
                    negatives,
                };
                let opts = ForwardOptions {
                    lambda: config.lambda,
                    tau: config.tau,
                    dropout_seed: Some(mix_seed(config.seed, 0x2, salt)),
                    overrides: Default::default(),
                };
                let graph = model.forward_loss(&prep, &opts)?;
                if !graph.breakdown.total.is_finite() {
                    return Err(Error::Train(format!(
                        "non-finite loss at epoch {epoch} on task `{}`",
                        item.example.task_id
                    )));
                }
                acc.accumulate(&graph.backward());
                sum_gen += graph.breakdown.gen;
                sum_cl += graph.breakdown.contrastive;
                sum_total += graph.breakdown.total;
                seen += 1;
            }
            acc.scale(1.0 / batch.len() as f64);
            last_lr = lr_schedule(config, adam.step + 1);
            adamw_step(&mut adam, &mut model.params, &acc, last_lr, &hyper)?;
        }

        let (val_bleu4, val_rouge_l) = validate(&model, &cached_valid, tokenizer, config)?;
        let n = seen as f64;
        let stats = EpochStats {
            epoch,
            l_gen: sum_gen / n,
            l_cl: sum_cl / n,
            total: sum_total / n,
            val_bleu4,
            val_rouge_l,
            lr: last_lr,
            examples_seen: seen,
        };
        log_lines.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6e}\n",
            stats.epoch,
            stats.l_gen,
            stats.l_cl,
            stats.total,
            stats.val_bleu4,
            stats.val_rouge_l,
            stats.lr
        ));
        log::info!(
            "epoch {epoch}: l_gen {:.4} l_cl {:.4} l {:.4} val_bleu4 {:.4} val_rougeL {:.4}",
            stats.l_gen,
            stats.l_cl,
            stats.total,
            stats.val_bleu4,
            stats.val_rouge_l
        );
        report.epochs.push(stats);

        let improved = val_bleu4 > report.best_val_bleu4
            || (val_bleu4 == report.best_val_bleu4 && val_rouge_l > report.best_val_rouge_l);
        if improved {
            report.best_epoch = epoch;
            report.best_val_bleu4 = val_bleu4;
            report.best_val_rouge_l = val_rouge_l;
            epochs_since_best = 0;
            let ckpt = Checkpoint { model, pipeline: config.pipeline_config() };
            save_checkpoint(&ckpt, &checkpoint_path)?;
            model = ckpt.model;
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= config.patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    report.steps = adam.step;

    fs::write(&log_path, &log_lines)?;
    let manifest = format!(
        "config: {}\nvocab_sha256: {}\ntrain_steps: {}\nbest_epoch: {}\nbest_val_bleu4: {:.6}\nbest_val_rougeL: {:.6}\n",
        serde_json::to_string(config).expect("config serializes"),
        vocab_sha,
        report.steps,
        report.best_epoch,
        report.best_val_bleu4,
        report.best_val_rouge_l,
    );
    fs::write(checkpoint_path.with_extension("bin.manifest"), manifest)?;

    Ok(TrainArtifacts { checkpoint_path, log_path, vocab_path, report })
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn schedule_config(warmup: u64, period: u64, mult: u64) -> TrainConfig {
        TrainConfig {
            lr_peak: 1.0,
            lr_min: 0.0,
            warmup_steps: warmup,
            restart_period: period,
            restart_mult: mult,
            ..Default::default()
        }
    }

    #[test]
    fn warmup_endpoints() {
        let c = schedule_config(100, 50, 2);
        assert_eq!(lr_schedule(&c, 0), 0.0);
        assert!((lr_schedule(&c, 50) - 0.5).abs() < 1e-12);
        assert!((lr_schedule(&c, 100) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_midpoint_is_half_peak() {
        let c = schedule_config(100, 50, 2);
        assert!((lr_schedule(&c, 125) - 0.5).abs() < 1e-12);
        assert!(lr_schedule(&c, 149) < 0.01);
    }

    #[test]
    fn restart_returns_to_peak_and_periods_grow() {
        let c = schedule_config(100, 50, 2);
        // cycle 1 covers steps 100..150, cycle 2 covers 150..250
        assert!((lr_schedule(&c, 150) - 1.0).abs() < 1e-12);
        assert!((lr_schedule(&c, 200) - 0.5).abs() < 1e-12);
        assert!((lr_schedule(&c, 250) - 1.0).abs() < 1e-12);
        let mut floored = schedule_config(10, 40, 1);
        floored.lr_min = 0.2;
        assert!((lr_schedule(&floored, 30) - 0.6).abs() < 1e-12);
    }

    fn one_param(v: f64) -> Parameters {
        let mut p = Parameters::empty();
        p.insert("w", arr2(&[[v]]));
        p
    }

    #[test]
    fn adamw_single_step_closed_form() {
        let mut params = one_param(1.0);
        let mut state = AdamState::new(&params);
        let grads = Gradients { tensors: vec![arr2(&[[0.5]])] };
        let hyper = AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-6, weight_decay: 0.01 };
        adamw_step(&mut state, &mut params, &grads, 0.1, &hyper).unwrap();
        // m = 0.05, v = 0.00025; bias-corrected: m_hat = 0.5, v_hat = 0.25
        let want = 1.0 - 0.1 * (0.5 / (0.25f64.sqrt() + 1e-6) + 0.01 * 1.0);
        assert!((params.get("w")[[0, 0]] - want).abs() < 1e-15);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_grad_zero_decay_leaves_param_unchanged() {
        let mut params = one_param(0.7);
        let mut state = AdamState::new(&params);
        let grads = Gradients { tensors: vec![arr2(&[[0.0]])] };
        let hyper = AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-6, weight_decay: 0.0 };
        for _ in 0..3 {
            adamw_step(&mut state, &mut params, &grads, 0.1, &hyper).unwrap();
        }
        assert_eq!(params.get("w")[[0, 0]], 0.7);
        let (m, v) = state.moments(0);
        assert_eq!(m[[0, 0]], 0.0);
        assert_eq!(v[[0, 0]], 0.0);
    }

    #[test]
    fn zero_grad_with_decay_shrinks_multiplicatively() {
        let mut params = one_param(2.0);
        let mut state = AdamState::new(&params);
        let grads = Gradients { tensors: vec![arr2(&[[0.0]])] };
        let hyper = AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-6, weight_decay: 0.5 };
        adamw_step(&mut state, &mut params, &grads, 0.1, &hyper).unwrap();
        assert!((params.get("w")[[0, 0]] - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_with_name() {
        let mut params = one_param(1.0);
        let mut state = AdamState::new(&params);
        let grads = Gradients { tensors: vec![arr2(&[[f64::NAN]])] };
        let hyper = AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-6, weight_decay: 0.0 };
        let err = adamw_step(&mut state, &mut params, &grads, 0.1, &hyper).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!(state.step, 0, "aborted step must not advance the counter");
    }

    #[test]
    fn config_json_roundtrip_defaults_and_unknown_keys() {
        let config = TrainConfig::default();
        let back = TrainConfig::from_json_reader(config.to_json().as_bytes()).unwrap();
        assert_eq!(config, back);
        assert!(TrainConfig::from_json_reader(r#"{"no_such_key": 1}"#.as_bytes()).is_err());
        assert!(TrainConfig::from_json_reader(r#"{"lr_peak": -1.0}"#.as_bytes()).is_err());
        let sparse = TrainConfig::from_json_reader(r#"{"batch_size": 4}"#.as_bytes()).unwrap();
        assert_eq!(sparse.batch_size, 4);
        assert_eq!(sparse.max_epochs, 30);
    }

    #[test]
    fn seed_mixing_is_stable_and_spread() {
        assert_eq!(mix_seed(42, 1, 7), mix_seed(42, 1, 7));
        assert_ne!(mix_seed(42, 1, 7), mix_seed(42, 1, 8));
        assert_ne!(mix_seed(42, 1, 7), mix_seed(42, 2, 7));
        assert_ne!(mix_seed(42, 1, 7), mix_seed(43, 1, 7));
    }
}
