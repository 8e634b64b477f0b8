//! Beam-search generation of the next step from a trained model.

use crate::corpus::TrainingExample;
use crate::model::{EncoderOutput, Model, PipelineConfig, RetrievedEncoding};
use crate::retrieval::RetrievedSet;
use crate::text::{assemble_input, encode_retrieved_step, Tokenizer, BOS, EOS};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateSettings {
    pub beam: usize,
    pub max_len: usize,
    /// Length-normalization exponent: hypotheses are ranked by
    /// `logprob / len^len_alpha`.
    pub len_alpha: f64,
}

impl Default for GenerateSettings {
    fn default() -> Self {
        GenerateSettings { beam: 5, max_len: 40, len_alpha: 1.0 }
    }
}

/// One (possibly finished) decoding hypothesis.
#[derive(Debug, Clone)]
pub struct BeamHypothesis {
    /// Token ids including the leading `<bos>` (and trailing `<eos>` once
    /// finished).
    pub ids: Vec<usize>,
    /// Cumulative log-probability; never positive.
    pub logprob: f64,
    pub finished: bool,
    /// Creation counter, the final deterministic tiebreak.
    created: u64,
}

impl BeamHypothesis {
    /// Generated tokens, excluding `<bos>` and the terminating `<eos>`.
    pub fn content(&self) -> &[usize] {
        let end = if self.finished { self.ids.len() - 1 } else { self.ids.len() };
        &self.ids[1..end]
    }

    pub fn normalized_score(&self, len_alpha: f64) -> f64 {
        let len = (self.ids.len() - 1).max(1) as f64;
        self.logprob / len.powf(len_alpha)
    }
}

fn log_softmax_row(row: ndarray::ArrayView1<f64>) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Standard beam search over the decoder logits. Deterministic: candidate
/// ties resolve by token id, then by hypothesis creation order. Returns the
/// content ids of the best finished hypothesis under the normalized score.
pub fn beam_search(
    model: &Model,
    enc: &EncoderOutput,
    retr: Option<&RetrievedEncoding>,
    settings: &GenerateSettings,
) -> Result<Vec<usize>> {
    Ok(beam_search_all(model, enc, retr, settings)?
        .into_iter()
        .next()
        .expect("beam search always yields at least one hypothesis")
        .content()
        .to_vec())
}

/// All terminal hypotheses explored, best first (normalized score, then
/// creation order).
pub fn beam_search_all(
    model: &Model,
    enc: &EncoderOutput,
    retr: Option<&RetrievedEncoding>,
    settings: &GenerateSettings,
) -> Result<Vec<BeamHypothesis>> {
    if settings.beam == 0 {
        return Err(Error::Validation("beam width must be positive".into()));
    }
    if settings.max_len == 0 {
        return Err(Error::Validation("max_len must be positive".into()));
    }
    let mut created = 0u64;
    let mut active = vec![BeamHypothesis { ids: vec![BOS], logprob: 0.0, finished: false, created }];
    let mut finished: Vec<BeamHypothesis> = Vec::new();

    for _ in 0..settings.max_len {
        if active.is_empty() {
            break;
        }
        // (logprob, token, parent order, parent index)
        let mut candidates: Vec<(f64, usize, u64, usize)> = Vec::new();
        for (pi, hyp) in active.iter().enumerate() {
            let dec = model.decode(&hyp.ids, enc, retr)?;
            let last = dec.logits.nrows() - 1;
            let logprobs = log_softmax_row(dec.logits.row(last));
            for (tok, lp) in logprobs.iter().enumerate() {
                candidates.push((hyp.logprob + lp, tok, hyp.created, pi));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then_with(|| a.1.cmp(&b.1))
                .then_with(|| a.2.cmp(&b.2))
        });

        let mut next_active = Vec::with_capacity(settings.beam);
        for &(logprob, tok, _, pi) in candidates.iter().take(2 * settings.beam) {
            let parent = &active[pi];
            created += 1;
            let mut ids = parent.ids.clone();
            ids.push(tok);
            let hyp = BeamHypothesis { ids, logprob, finished: tok == EOS, created };
            if hyp.finished {
                finished.push(hyp);
            } else if next_active.len() < settings.beam {
                next_active.push(hyp);
            }
            if next_active.len() >= settings.beam && finished.len() >= settings.beam {
                break;
            }
        }
        active = next_active;
    }
    // out of length budget: remaining hypotheses terminate as-is
    finished.extend(active);

    finished.sort_by(|a, b| {
        b.normalized_score(settings.len_alpha)
            .partial_cmp(&a.normalized_score(settings.len_alpha))
            .unwrap()
            .then_with(|| a.created.cmp(&b.created))
    });
    Ok(finished)
}

/// Assemble, encode, and generate the next step for one example, using the
/// already-retrieved candidate steps.
pub fn generate_text(
    model: &Model,
    tokenizer: &Tokenizer,
    example: &TrainingExample,
    retrieved: &RetrievedSet,
    pipeline: &PipelineConfig,
    settings: &GenerateSettings,
) -> Result<String> {
    let seq = assemble_input(tokenizer, example, pipeline.max_seg_tokens);
    let enc = model.encode_selective(&seq)?;
    let retrieved_ids: Vec<Vec<usize>> = retrieved
        .steps
        .iter()
        .map(|s| encode_retrieved_step(tokenizer, s, pipeline.max_seg_tokens))
        .collect();
    let retr = model.encode_retrieved(&enc, &retrieved_ids)?;
    let ids = beam_search(model, &enc, Some(&retr), settings)?;
    Ok(tokenizer.decode(&ids))
}
