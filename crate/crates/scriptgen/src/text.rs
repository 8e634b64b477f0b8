//! Text normalization, vocabulary, and model-input assembly.
//!
//! Normalization is lowercasing followed by splitting on anything that is
//! not alphanumeric; punctuation is a separator and never becomes a token.
//! The vocabulary file is plain text, one token per line, line number = id,
//! with the special tokens first in a fixed order.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::corpus::{Corpus, TrainingExample};
use crate::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const CLS: usize = 4;
pub const MASK: usize = 5;
pub const TITLE: usize = 6;
pub const METHOD: usize = 7;
pub const STEP: usize = 8;
pub const CAPTION: usize = 9;
pub const TEMPLATE: usize = 10;

/// Special tokens in id order. Segment markers (`<title>`, `<method>`,
/// `<step>`, `<caption>`, `<template>`) are counted inside the segment they
/// open so the segment gates mask them together with the content.
pub const SPECIAL_TOKENS: [&str; 11] = [
    "<pad>", "<unk>", "<bos>", "<eos>", "<cls>", "<mask>", "<title>", "<method>", "<step>",
    "<caption>", "<template>",
];

#[derive(Debug, Clone)]
pub struct Tokenizer {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    min_freq: usize,
}

impl Tokenizer {
    /// Lowercase and split into maximal alphanumeric runs.
    pub fn normalize(text: &str) -> Vec<String> {
        let lower = text.to_lowercase();
        lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect()
    }

    /// Build a vocabulary over every goal, subgoal, step, and caption text.
    /// Ids are assigned deterministically: specials first, then by
    /// frequency descending, ties lexicographic.
    pub fn build(corpus: &Corpus, min_freq: usize) -> Result<Self> {
        if corpus.tasks.is_empty() {
            return Err(Error::Validation("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut bump = |text: &str| {
            for tok in Self::normalize(text) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        };
        for task in &corpus.tasks {
            bump(&task.goal);
            if let Some(sub) = &task.subgoal {
                bump(sub);
            }
            for step in &task.steps {
                bump(&step.step_text);
                bump(&step.caption_text);
            }
        }
        let mut entries: Vec<(String, usize)> =
            counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(entries.into_iter().map(|(t, _)| t));
        Ok(Self::from_tokens(tokens, min_freq))
    }

    fn from_tokens(tokens: Vec<String>, min_freq: usize) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Tokenizer { tokens, ids, min_freq }
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    /// Encode text to ids. Whole words that exactly match a special token
    /// map to that special id (this keeps decode/encode a round trip);
    /// everything else is normalized, with unknowns mapping to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            if word.starts_with('<') {
                if let Some(&id) = self.ids.get(word) {
                    if id < SPECIAL_TOKENS.len() {
                        out.push(id);
                        continue;
                    }
                }
            }
            for tok in Self::normalize(word) {
                out.push(self.ids.get(&tok).copied().unwrap_or(UNK));
            }
        }
        out
    }

    /// Render ids as text, joined with single spaces.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(self.tokens.get(id).map(String::as_str).unwrap_or("<unk>"));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)
    }

    pub fn write<W: Write>(&self, writer: &mut W) -> Result<()> {
        for tok in &self.tokens {
            writeln!(writer, "{tok}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }

    pub fn read<R: Read>(reader: R) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut seen = HashMap::new();
        for (i, line) in BufReader::new(reader).lines().enumerate() {
            let tok = line?;
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Format(format!("vocabulary line {}: bad token", i + 1)));
            }
            if seen.insert(tok.clone(), i).is_some() {
                return Err(Error::Format(format!("vocabulary line {}: duplicate token `{tok}`", i + 1)));
            }
            tokens.push(tok);
        }
        for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*special) {
                return Err(Error::Format(format!(
                    "vocabulary must start with the fixed special tokens; expected `{special}` at line {}",
                    i + 1
                )));
            }
        }
        Ok(Self::from_tokens(tokens, 1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentLabel {
    Cls,
    GoalSubgoal,
    Step,
    Caption,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub label: SegmentLabel,
    /// Half-open token span [start, end).
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// The assembled encoder input: a `<cls>` token followed by the
/// goal(+subgoal) segment and one step and one caption segment per history
/// pair. Spans are contiguous, non-overlapping, and cover every token; the
/// marker token belongs to its segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentedSequence {
    pub token_ids: Vec<usize>,
    /// All spans including the leading CLS span.
    pub segments: Vec<Segment>,
}

impl SegmentedSequence {
    /// Number of spans after CLS (2n+1 for n history pairs).
    pub fn segment_count(&self) -> usize {
        self.segments.len() - 1
    }

    pub fn content_segments(&self) -> &[Segment] {
        &self.segments[1..]
    }
}

fn truncated(tokenizer: &Tokenizer, text: &str, max_tokens: usize) -> Vec<usize> {
    let mut ids = tokenizer.encode(text);
    ids.truncate(max_tokens);
    ids
}

/// Assemble the segmented model input for one example. Each of goal,
/// subgoal, step, and caption is independently truncated to
/// `max_seg_tokens` content tokens.
pub fn assemble_input(
    tokenizer: &Tokenizer,
    example: &TrainingExample,
    max_seg_tokens: usize,
) -> SegmentedSequence {
    let mut token_ids = vec![CLS];
    let mut segments = vec![Segment { label: SegmentLabel::Cls, start: 0, end: 1 }];

    let start = token_ids.len();
    token_ids.push(TITLE);
    token_ids.extend(truncated(tokenizer, &example.goal, max_seg_tokens));
    if let Some(sub) = &example.subgoal {
        token_ids.push(METHOD);
        token_ids.extend(truncated(tokenizer, sub, max_seg_tokens));
    }
    segments.push(Segment { label: SegmentLabel::GoalSubgoal, start, end: token_ids.len() });

    for (step, caption) in &example.history {
        let start = token_ids.len();
        token_ids.push(STEP);
        token_ids.extend(truncated(tokenizer, step, max_seg_tokens));
        segments.push(Segment { label: SegmentLabel::Step, start, end: token_ids.len() });

        let start = token_ids.len();
        token_ids.push(CAPTION);
        token_ids.extend(truncated(tokenizer, caption, max_seg_tokens));
        segments.push(Segment { label: SegmentLabel::Caption, start, end: token_ids.len() });
    }

    SegmentedSequence { token_ids, segments }
}

/// `<bos>` + up to `max_target` content tokens + `<eos>`.
pub fn encode_target(tokenizer: &Tokenizer, target: &str, max_target: usize) -> Vec<usize> {
    let mut ids = vec![BOS];
    ids.extend(truncated(tokenizer, target, max_target));
    ids.push(EOS);
    ids
}

/// `<template>` + up to `max_seg_tokens` content tokens, for the retrieved
/// step encoder.
pub fn encode_retrieved_step(
    tokenizer: &Tokenizer,
    step: &str,
    max_seg_tokens: usize,
) -> Vec<usize> {
    let mut ids = vec![TEMPLATE];
    ids.extend(truncated(tokenizer, step, max_seg_tokens));
    ids
}
