//! Automatic evaluation: BLEU-n, ROUGE-L, self-BLEU, distinct n-grams,
//! history n-gram overlap, and the Text@1 retrieval metric.
//!
//! All metrics tokenize with the same normalization as the model
//! vocabulary and return values in [0, 1]; reports scale by 100 for
//! display. Every function here is pure.

use std::collections::{HashMap, HashSet};

use serde_json::{Map, Value};

use crate::retrieval::Embedder;
use crate::text::Tokenizer;
use crate::{Error, Result};

fn tokens(text: &str) -> Vec<String> {
    Tokenizer::normalize(text)
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut map = HashMap::new();
    if n == 0 || tokens.len() < n {
        return map;
    }
    for window in tokens.windows(n) {
        *map.entry(window).or_insert(0) += 1;
    }
    map
}

/// Clipped n-gram matches of `cand` against the maximum reference count,
/// plus the total candidate n-gram count.
fn clipped_counts(cand: &[String], refs: &[&[String]], n: usize) -> (usize, usize) {
    let cand_counts = ngram_counts(cand, n);
    let ref_counts: Vec<HashMap<&[String], usize>> =
        refs.iter().map(|r| ngram_counts(r, n)).collect();
    let mut clipped = 0;
    let mut total = 0;
    for (gram, count) in cand_counts {
        total += count;
        let max_ref = ref_counts.iter().map(|rc| rc.get(gram).copied().unwrap_or(0)).max().unwrap_or(0);
        clipped += count.min(max_ref);
    }
    (clipped, total)
}

/// Reference length closest to the candidate length (ties favor the
/// shorter reference).
fn effective_ref_len(cand_len: usize, refs: &[&[String]]) -> usize {
    let mut best = 0usize;
    let mut best_dist = usize::MAX;
    for r in refs {
        let d = r.len().abs_diff(cand_len);
        if d < best_dist || (d == best_dist && r.len() < best) {
            best = r.len();
            best_dist = d;
        }
    }
    best
}

/// Corpus BLEU-n over (candidate, references) pairs: pooled clipped
/// modified n-gram precisions with uniform weights and a brevity penalty.
///
/// Orders where the candidates have no n-grams at all are skipped so that
/// `bleu(x, x, n) == 1` even for short texts; with smoothing off, any
/// zero precision makes the score 0.
fn corpus_bleu(pairs: &[(Vec<String>, Vec<Vec<String>>)], n: usize, smooth: bool) -> Result<f64> {
    if n < 1 {
        return Err(Error::Validation("BLEU order must be at least 1".into()));
    }
    if pairs.is_empty() {
        return Err(Error::Validation("BLEU needs at least one candidate".into()));
    }
    let mut clipped = vec![0usize; n];
    let mut totals = vec![0usize; n];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (cand, refs) in pairs {
        let ref_slices: Vec<&[String]> = refs.iter().map(|r| r.as_slice()).collect();
        cand_len += cand.len();
        ref_len += effective_ref_len(cand.len(), &ref_slices);
        for i in 1..=n {
            let (c, t) = clipped_counts(cand, &ref_slices, i);
            clipped[i - 1] += c;
            totals[i - 1] += t;
        }
    }
    if cand_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for i in 0..n {
        if totals[i] == 0 {
            continue;
        }
        let p = if clipped[i] == 0 {
            if !smooth {
                return Ok(0.0);
            }
            1e-9 / totals[i] as f64
        } else {
            clipped[i] as f64 / totals[i] as f64
        };
        log_sum += p.ln() / n as f64;
    }
    let bp = if cand_len >= ref_len { 1.0 } else { (1.0 - ref_len as f64 / cand_len as f64).exp() };
    Ok(bp * log_sum.exp())
}

/// Corpus BLEU-n with one reference per candidate, smoothing off.
pub fn bleu(candidates: &[String], references: &[String], n: usize) -> Result<f64> {
    bleu_with_options(candidates, references, n, false)
}

pub fn bleu_with_options(
    candidates: &[String],
    references: &[String],
    n: usize,
    smooth: bool,
) -> Result<f64> {
    if candidates.len() != references.len() || candidates.is_empty() {
        return Err(Error::Validation(
            "BLEU needs equally many candidates and references, at least one".into(),
        ));
    }
    let pairs: Vec<(Vec<String>, Vec<Vec<String>>)> = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| (tokens(c), vec![tokens(r)]))
        .collect();
    corpus_bleu(&pairs, n, smooth)
}

/// ROUGE-L: longest-common-subsequence F-measure with the recall-weighted
/// beta of the COCO caption evaluation (beta = 1.2).
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let c = tokens(candidate);
    let r = tokens(reference);
    if c.is_empty() && r.is_empty() {
        return 1.0;
    }
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&c, &r) as f64;
    let p = lcs / c.len() as f64;
    let rec = lcs / r.len() as f64;
    if p == 0.0 || rec == 0.0 {
        return 0.0;
    }
    let beta2 = 1.2f64 * 1.2;
    (1.0 + beta2) * p * rec / (rec + beta2 * p)
}

pub fn rouge_l_corpus(candidates: &[String], references: &[String]) -> Result<f64> {
    if candidates.len() != references.len() || candidates.is_empty() {
        return Err(Error::Validation(
            "ROUGE-L needs equally many candidates and references, at least one".into(),
        ));
    }
    let sum: f64 = candidates.iter().zip(references).map(|(c, r)| rouge_l(c, r)).sum();
    Ok(sum / candidates.len() as f64)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            cur[j + 1] = if ai == bj { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Self-BLEU-n: each output scored by BLEU against all other outputs as
/// references, averaged. Lower means more diverse.
pub fn self_bleu(outputs: &[String], n: usize) -> Result<f64> {
    if outputs.len() < 2 {
        return Err(Error::Validation("self-BLEU needs at least two outputs".into()));
    }
    let token_lists: Vec<Vec<String>> = outputs.iter().map(|o| tokens(o)).collect();
    let mut sum = 0.0;
    for i in 0..token_lists.len() {
        let refs: Vec<Vec<String>> = token_lists
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, t)| t.clone())
            .collect();
        sum += corpus_bleu(&[(token_lists[i].clone(), refs)], n, false)?;
    }
    Ok(sum / token_lists.len() as f64)
}

/// Distinct n-gram types over all outputs divided by total n-gram tokens.
/// Returns 0 (with a warning) when no output is long enough for an n-gram.
pub fn distinct_n(outputs: &[String], n: usize) -> Result<f64> {
    if outputs.is_empty() {
        return Err(Error::Validation("distinct-n needs at least one output".into()));
    }
    let mut types: HashSet<Vec<String>> = HashSet::new();
    let mut total = 0usize;
    for out in outputs {
        let toks = tokens(out);
        if toks.len() < n {
            continue;
        }
        for window in toks.windows(n) {
            types.insert(window.to_vec());
            total += 1;
        }
    }
    if total == 0 {
        log::warn!("distinct-{n}: every output is shorter than {n} tokens, reporting 0");
        return Ok(0.0);
    }
    Ok(types.len() as f64 / total as f64)
}

/// Fraction of the generated step's n-gram tokens that also occur in the
/// step history. Returns (matched, total) so corpora can micro-average.
pub fn history_overlap_counts(generated: &str, history: &[String], n: usize) -> (usize, usize) {
    let mut history_grams: HashSet<Vec<String>> = HashSet::new();
    for h in history {
        let toks = tokens(h);
        for window in toks.windows(n) {
            history_grams.insert(window.to_vec());
        }
    }
    let toks = tokens(generated);
    let mut matched = 0;
    let mut total = 0;
    for window in toks.windows(n) {
        total += 1;
        if history_grams.contains(window) {
            matched += 1;
        }
    }
    (matched, total)
}

pub fn history_overlap(generated: &str, history: &[String], n: usize) -> f64 {
    let (matched, total) = history_overlap_counts(generated, history, n);
    if total == 0 {
        0.0
    } else {
        matched as f64 / total as f64
    }
}

/// Micro-averaged history overlap over (generated, history) pairs.
pub fn history_overlap_corpus(items: &[(String, Vec<String>)], n: usize) -> f64 {
    let mut matched = 0usize;
    let mut total = 0usize;
    for (generated, history) in items {
        let (m, t) = history_overlap_counts(generated, history, n);
        matched += m;
        total += t;
    }
    if total == 0 {
        0.0
    } else {
        matched as f64 / total as f64
    }
}

/// One Text@1 query: the candidate pool of steps under the same
/// subgoal/goal and a flag per pool member marking ground-truth future
/// steps.
#[derive(Debug, Clone)]
pub struct TextAt1Item {
    pub generated: String,
    pub pool: Vec<String>,
    pub is_future: Vec<bool>,
}

/// HIT@1: true iff the pool member most similar to the generated text is a
/// ground-truth future step. Ties resolve by pool order.
pub fn text_at_1_hit(embedder: &Embedder, item: &TextAt1Item) -> Result<bool> {
    if item.pool.is_empty() {
        return Err(Error::Validation("Text@1 pool is empty".into()));
    }
    if item.pool.len() != item.is_future.len() {
        return Err(Error::Validation("Text@1 pool/future length mismatch".into()));
    }
    let query = embedder.embed(&item.generated);
    let mut best = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for (i, member) in item.pool.iter().enumerate() {
        let score = query.cosine(&embedder.embed(member));
        if score > best_score {
            best_score = score;
            best = i;
        }
    }
    Ok(item.is_future[best])
}

pub fn text_at_1(embedder: &Embedder, items: &[TextAt1Item]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Validation("Text@1 needs at least one item".into()));
    }
    let mut hits = 0usize;
    for item in items {
        if text_at_1_hit(embedder, item)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / items.len() as f64)
}

/// Which metric families to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MetricSelection {
    pub bleu: bool,
    pub rouge: bool,
    pub self_bleu: bool,
    pub distinct: bool,
    pub history_overlap: bool,
    pub text_at_1: bool,
}

impl Default for MetricSelection {
    fn default() -> Self {
        MetricSelection {
            bleu: true,
            rouge: true,
            self_bleu: true,
            distinct: true,
            history_overlap: true,
            text_at_1: true,
        }
    }
}

impl MetricSelection {
    /// Parse a comma-separated list like `bleu,rouge,distinct`.
    pub fn parse(list: &str) -> Result<Self> {
        let mut sel = MetricSelection {
            bleu: false,
            rouge: false,
            self_bleu: false,
            distinct: false,
            history_overlap: false,
            text_at_1: false,
        };
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match name {
                "bleu" => sel.bleu = true,
                "rouge" | "rouge-l" => sel.rouge = true,
                "self-bleu" | "self_bleu" => sel.self_bleu = true,
                "distinct" => sel.distinct = true,
                "history-overlap" | "history_overlap" => sel.history_overlap = true,
                "text-at-1" | "text_at_1" => sel.text_at_1 = true,
                other => return Err(Error::Config(format!("unknown metric `{other}`"))),
            }
        }
        Ok(sel)
    }
}

/// Scores for one corpus of generations. Fields are `None` when the metric
/// was deselected or its inputs were unavailable.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub bleu: Option<[f64; 4]>,
    pub rouge_l: Option<f64>,
    pub self_bleu: Option<[f64; 4]>,
    pub distinct: Option<[f64; 4]>,
    pub history_overlap: Option<[f64; 4]>,
    pub text_at_1: Option<f64>,
}

impl MetricReport {
    /// Flat key → value view, values scaled to percent.
    pub fn key_values(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        let quad = |name: &str, values: &Option<[f64; 4]>, out: &mut Vec<(String, f64)>| {
            if let Some(values) = values {
                for (i, v) in values.iter().enumerate() {
                    out.push((format!("{name}_{}", i + 1), v * 100.0));
                }
            }
        };
        quad("bleu", &self.bleu, &mut out);
        if let Some(v) = self.rouge_l {
            out.push(("rouge_l".into(), v * 100.0));
        }
        quad("self_bleu", &self.self_bleu, &mut out);
        quad("distinct", &self.distinct, &mut out);
        quad("history_overlap", &self.history_overlap, &mut out);
        if let Some(v) = self.text_at_1 {
            out.push(("text_at_1".into(), v * 100.0));
        }
        out
    }

    pub fn to_json(&self) -> Value {
        let mut map = Map::new();
        for (k, v) in self.key_values() {
            map.insert(k, Value::from(v));
        }
        Value::Object(map)
    }

    pub fn table(&self) -> String {
        let mut out = String::from("metric              score(%)\n");
        for (k, v) in self.key_values() {
            out.push_str(&format!("{k:<20}{v:8.2}\n"));
        }
        out
    }
}

/// Inputs for a full report. `histories` and `text_at_1` are optional
/// because not every caller can supply them.
pub struct ReportInputs<'a> {
    pub candidates: &'a [String],
    pub references: &'a [String],
    pub histories: Option<&'a [Vec<String>]>,
    pub text_at_1: Option<(&'a Embedder, &'a [TextAt1Item])>,
}

pub fn compute_report(inputs: &ReportInputs, selection: &MetricSelection) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    if selection.bleu {
        let mut scores = [0.0; 4];
        for (i, slot) in scores.iter_mut().enumerate() {
            *slot = bleu(inputs.candidates, inputs.references, i + 1)?;
        }
        report.bleu = Some(scores);
    }
    if selection.rouge {
        report.rouge_l = Some(rouge_l_corpus(inputs.candidates, inputs.references)?);
    }
    if selection.self_bleu && inputs.candidates.len() >= 2 {
        let mut scores = [0.0; 4];
        for (i, slot) in scores.iter_mut().enumerate() {
            *slot = self_bleu(inputs.candidates, i + 1)?;
        }
        report.self_bleu = Some(scores);
    }
    if selection.distinct {
        let mut scores = [0.0; 4];
        for (i, slot) in scores.iter_mut().enumerate() {
            *slot = distinct_n(inputs.candidates, i + 1)?;
        }
        report.distinct = Some(scores);
    }
    if selection.history_overlap {
        if let Some(histories) = inputs.histories {
            let items: Vec<(String, Vec<String>)> = inputs
                .candidates
                .iter()
                .zip(histories)
                .map(|(c, h)| (c.clone(), h.clone()))
                .collect();
            let mut scores = [0.0; 4];
            for (i, slot) in scores.iter_mut().enumerate() {
                *slot = history_overlap_corpus(&items, i + 1);
            }
            report.history_overlap = Some(scores);
        }
    }
    if selection.text_at_1 {
        if let Some((embedder, items)) = inputs.text_at_1 {
            report.text_at_1 = Some(text_at_1(embedder, items)?);
        }
    }
    Ok(report)
}
