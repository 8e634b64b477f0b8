//! Deterministic sentence embedding, an exact nearest-neighbor index over
//! training steps with successor links, historically-relevant next-step
//! retrieval, and negative-sample pools for contrastive training.
//!
//! The embedder is a TF-IDF weighted bag of word unigrams and bigrams
//! hashed into a fixed dimension and L2-normalized. It is fitted once on
//! the training corpus and persisted inside the index file so retrieval
//! and evaluation share one notion of similarity.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binio::*;
use crate::corpus::{Corpus, TrainingExample};
use crate::text::Tokenizer;
use crate::{Error, Result};

pub const DEFAULT_DIMENSION: usize = 512;

/// FNV-1a over bytes; fixed constants so files are stable across builds.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// An L2-normalized sentence vector. Texts with no features embed to the
/// zero vector and are flagged.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceVector {
    pub values: Vec<f64>,
    pub is_zero: bool,
}

impl SentenceVector {
    pub fn cosine(&self, other: &SentenceVector) -> f64 {
        if self.is_zero || other.is_zero {
            return 0.0;
        }
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0)
    }
}

/// TF-IDF hashed n-gram embedder. Documents are step texts; features are
/// unigrams and bigrams of the normalized tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedder {
    dimension: usize,
    doc_count: u64,
    doc_freq: HashMap<String, u64>,
}

impl Embedder {
    pub fn fit(corpus: &Corpus, dimension: usize) -> Result<Self> {
        if corpus.tasks.is_empty() {
            return Err(Error::Validation("cannot fit an embedder on an empty corpus".into()));
        }
        if dimension == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        let mut doc_freq: HashMap<String, u64> = HashMap::new();
        let mut doc_count = 0u64;
        for task in &corpus.tasks {
            for step in &task.steps {
                doc_count += 1;
                let mut seen: Vec<String> = features(&step.step_text);
                seen.sort();
                seen.dedup();
                for f in seen {
                    *doc_freq.entry(f).or_insert(0) += 1;
                }
            }
        }
        Ok(Embedder { dimension, doc_count, doc_freq })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    fn idf(&self, feature: &str) -> f64 {
        let df = self.doc_freq.get(feature).copied().unwrap_or(0);
        ((self.doc_count as f64 + 1.0) / (df as f64 + 1.0)).ln() + 1.0
    }

    pub fn embed(&self, text: &str) -> SentenceVector {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for f in features(text) {
            *counts.entry(f).or_insert(0) += 1;
        }
        let mut values = vec![0.0; self.dimension];
        for (f, tf) in &counts {
            let bucket = (fnv1a(f.as_bytes()) % self.dimension as u64) as usize;
            values[bucket] += *tf as f64 * self.idf(f);
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return SentenceVector { values, is_zero: true };
        }
        for v in &mut values {
            *v /= norm;
        }
        SentenceVector { values, is_zero: false }
    }
}

/// Word unigrams plus space-joined bigrams. Tokens never contain spaces,
/// so the two feature families cannot collide.
fn features(text: &str) -> Vec<String> {
    let tokens = Tokenizer::normalize(text);
    let mut out = tokens.clone();
    for pair in tokens.windows(2) {
        out.push(format!("{} {}", pair[0], pair[1]));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub text: String,
    pub task_id: String,
    pub vector: SentenceVector,
    /// Position of the immediate next step within the same task, absent for
    /// task-final steps.
    pub successor: Option<usize>,
}

/// Exact-scan embedding index over every training step, in (task order,
/// step index) order for stable tie-breaking.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    pub embedder: Embedder,
    pub entries: Vec<IndexEntry>,
}

impl EmbeddingIndex {
    pub fn successor_text(&self, entry: usize) -> Option<&str> {
        self.entries[entry].successor.map(|s| self.entries[s].text.as_str())
    }

    pub fn dimension(&self) -> usize {
        self.embedder.dimension()
    }
}

pub fn build_index(train: &Corpus, dimension: usize) -> Result<EmbeddingIndex> {
    let embedder = Embedder::fit(train, dimension)?;
    let mut entries = Vec::new();
    for task in &train.tasks {
        let base = entries.len();
        let m = task.steps.len();
        for (i, step) in task.steps.iter().enumerate() {
            entries.push(IndexEntry {
                text: step.step_text.clone(),
                task_id: task.id.clone(),
                vector: embedder.embed(&step.step_text),
                successor: if i + 1 < m { Some(base + i + 1) } else { None },
            });
        }
    }
    Ok(EmbeddingIndex { embedder, entries })
}

/// Steps retrieved as candidate next steps, ranked by similarity of their
/// predecessor to the query. Scores are the predecessor cosines,
/// non-increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievedSet {
    pub steps: Vec<String>,
    pub scores: Vec<f64>,
    pub task_ids: Vec<String>,
}

impl RetrievedSet {
    pub fn empty() -> Self {
        RetrievedSet { steps: Vec::new(), scores: Vec::new(), task_ids: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Retrieve the successors of the `k` index steps most similar to the
/// previous step. Entries without a successor are skipped; ties resolve by
/// entry order. `exclude_task` drops entries from that task before ranking.
pub fn retrieve_next_steps(
    index: &EmbeddingIndex,
    prev_step: &str,
    k: usize,
    exclude_task: Option<&str>,
) -> Result<RetrievedSet> {
    if k == 0 {
        return Err(Error::Validation("retrieval k must be positive".into()));
    }
    let query = index.embedder.embed(prev_step);
    let mut ranked: Vec<(usize, f64)> = index
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.successor.is_some() && Some(e.task_id.as_str()) != exclude_task)
        .map(|(i, e)| (i, query.cosine(&e.vector)))
        .collect();
    // stable sort keeps entry order on equal scores
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());

    let mut out = RetrievedSet::empty();
    for (i, score) in ranked.into_iter().take(k) {
        let entry = &index.entries[i];
        out.steps.push(index.entries[entry.successor.unwrap()].text.clone());
        out.scores.push(score);
        out.task_ids.push(entry.task_id.clone());
    }
    Ok(out)
}

/// Contrastive negatives for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeSet {
    pub self_negatives: Vec<String>,
    pub retrieved_negatives: Vec<String>,
    /// How many requested negatives the pools could not supply.
    pub self_shortfall: usize,
    pub retrieved_shortfall: usize,
}

impl NegativeSet {
    pub fn total(&self) -> usize {
        self.self_negatives.len() + self.retrieved_negatives.len()
    }

    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.self_negatives.iter().chain(self.retrieved_negatives.iter())
    }
}

fn norm_key(text: &str) -> String {
    Tokenizer::normalize(text).join(" ")
}

/// Candidate texts negatives are drawn from; both pools already exclude the
/// ground-truth target and duplicates. Deterministic for a given index and
/// example, so they can be built once and sampled every epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativePools {
    pub self_pool: Vec<String>,
    pub retrieved_pool: Vec<String>,
}

/// Self pool: goal, subgoal if present, history step texts, history caption
/// texts. Retrieved pool: the `pool_size` index step texts (not their
/// successors) most similar to the last history step.
pub fn build_negative_pools(
    index: &EmbeddingIndex,
    example: &TrainingExample,
    pool_size: usize,
    exclude_task: Option<&str>,
) -> NegativePools {
    let target_key = norm_key(&example.target);
    let push_unique = |pool: &mut Vec<String>, seen: &mut Vec<String>, text: &str| {
        let key = norm_key(text);
        if key.is_empty() || key == target_key || seen.contains(&key) {
            return;
        }
        seen.push(key);
        pool.push(text.to_string());
    };

    let mut self_pool: Vec<String> = Vec::new();
    let mut seen: Vec<String> = Vec::new();
    push_unique(&mut self_pool, &mut seen, &example.goal);
    if let Some(sub) = &example.subgoal {
        push_unique(&mut self_pool, &mut seen, sub);
    }
    for (step, _) in &example.history {
        push_unique(&mut self_pool, &mut seen, step);
    }
    for (_, caption) in &example.history {
        push_unique(&mut self_pool, &mut seen, caption);
    }

    let mut retrieved_pool: Vec<String> = Vec::new();
    if let Some((last_step, _)) = example.history.last() {
        let query = index.embedder.embed(last_step);
        let mut ranked: Vec<(usize, f64)> = index
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| Some(e.task_id.as_str()) != exclude_task)
            .map(|(i, e)| (i, query.cosine(&e.vector)))
            .collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let mut seen_retr: Vec<String> = Vec::new();
        for (i, _) in ranked {
            if retrieved_pool.len() >= pool_size {
                break;
            }
            push_unique(&mut retrieved_pool, &mut seen_retr, &index.entries[i].text);
        }
    }

    NegativePools { self_pool, retrieved_pool }
}

/// Draw without replacement from each pool; pools smaller than requested
/// are taken whole and the shortfall recorded.
pub fn draw_from_pools(pools: &NegativePools, n_self: usize, n_retr: usize, seed: u64) -> NegativeSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |pool: &[String], n: usize, rng: &mut ChaCha8Rng| -> (Vec<String>, usize) {
        if pool.len() <= n {
            return (pool.to_vec(), n - pool.len());
        }
        let picks = rand::seq::index::sample(rng, pool.len(), n);
        (picks.iter().map(|i| pool[i].clone()).collect(), 0)
    };
    let (self_negatives, self_shortfall) = draw(&pools.self_pool, n_self, &mut rng);
    let (retrieved_negatives, retrieved_shortfall) = draw(&pools.retrieved_pool, n_retr, &mut rng);
    NegativeSet { self_negatives, retrieved_negatives, self_shortfall, retrieved_shortfall }
}

/// One-call convenience over [`build_negative_pools`] + [`draw_from_pools`].
pub fn sample_negatives(
    index: &EmbeddingIndex,
    example: &TrainingExample,
    n_self: usize,
    n_retr: usize,
    pool_size: usize,
    seed: u64,
    exclude_task: Option<&str>,
) -> NegativeSet {
    let pools = build_negative_pools(index, example, pool_size, exclude_task);
    draw_from_pools(&pools, n_self, n_retr, seed)
}

const INDEX_MAGIC: &[u8; 4] = b"SGIX";
const INDEX_VERSION: u32 = 1;
const SUCCESSOR_NONE: u64 = u64::MAX;

pub fn save_index(index: &EmbeddingIndex, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_index(index, &mut w)
}

pub fn write_index<W: Write>(index: &EmbeddingIndex, w: &mut W) -> Result<()> {
    w.write_all(INDEX_MAGIC)?;
    write_u32(w, INDEX_VERSION)?;
    write_u32(w, index.embedder.dimension as u32)?;
    write_u64(w, index.embedder.doc_count)?;
    let mut df: Vec<(&String, &u64)> = index.embedder.doc_freq.iter().collect();
    df.sort();
    write_u64(w, df.len() as u64)?;
    for (token, count) in df {
        write_str(w, token)?;
        write_u64(w, *count)?;
    }
    write_u64(w, index.entries.len() as u64)?;
    for entry in &index.entries {
        write_str(w, &entry.text)?;
        write_str(w, &entry.task_id)?;
        for &v in &entry.vector.values {
            write_f64(w, v)?;
        }
        write_u64(w, entry.successor.map(|s| s as u64).unwrap_or(SUCCESSOR_NONE))?;
    }
    Ok(())
}

pub fn load_index(path: &Path) -> Result<EmbeddingIndex> {
    read_index(&mut BufReader::new(File::open(path)?))
}

pub fn read_index<R: Read>(r: &mut R) -> Result<EmbeddingIndex> {
    expect_magic(r, INDEX_MAGIC, "index")?;
    let version = read_u32(r)?;
    if version != INDEX_VERSION {
        return Err(Error::Format(format!("unsupported index version {version}")));
    }
    let dimension = read_u32(r)? as usize;
    if dimension == 0 || dimension as u64 > MAX_LEN {
        return Err(Error::Format(format!("bad index dimension {dimension}")));
    }
    let doc_count = read_u64(r)?;
    let df_len = read_len(r)?;
    let mut doc_freq = HashMap::new();
    for _ in 0..df_len {
        let token = read_str(r)?;
        let count = read_u64(r)?;
        doc_freq.insert(token, count);
    }
    let entry_count = read_len(r)?;
    let mut entries = Vec::new();
    for _ in 0..entry_count {
        let text = read_str(r)?;
        let task_id = read_str(r)?;
        let mut values = Vec::with_capacity(dimension.min(1 << 16));
        for _ in 0..dimension {
            let v = read_f64(r)?;
            if !v.is_finite() {
                return Err(Error::Format("non-finite value in index vector".into()));
            }
            values.push(v);
        }
        let is_zero = values.iter().all(|v| *v == 0.0);
        let successor = match read_u64(r)? {
            SUCCESSOR_NONE => None,
            s if s < entry_count as u64 => Some(s as usize),
            s => return Err(Error::Format(format!("successor {s} out of range"))),
        };
        entries.push(IndexEntry { text, task_id, vector: SentenceVector { values, is_zero }, successor });
    }
    Ok(EmbeddingIndex { embedder: Embedder { dimension, doc_count, doc_freq }, entries })
}
