//! Script dataset ingestion: parsing, validation, example windowing, and
//! corpus statistics.
//!
//! A dataset file is UTF-8 JSON Lines, one task per line:
//!
//! ```text
//! {"id": "...", "goal": "...", "subgoal": null, "steps": [{"text": "...", "caption": "..."}, ...]}
//! ```
//!
//! Split membership (train/valid/test) is a property of the file, not of
//! the records, so the caller names the split when parsing.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::text::Tokenizer;
use crate::{Error, Result};

/// One step of a task together with the caption of its illustrative image.
/// The caption is the textual stand-in for the image itself.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepPair {
    /// 1-based position within the task, contiguous.
    pub index: usize,
    pub step_text: String,
    pub caption_text: String,
}

/// A goal-oriented script: a goal, an optional subgoal, and ordered steps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub goal: String,
    pub subgoal: Option<String>,
    pub steps: Vec<StepPair>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Valid => write!(f, "valid"),
            Split::Test => write!(f, "test"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub split: Split,
    pub tasks: Vec<Task>,
}

/// One supervised example: predict `target` from the goal, the optional
/// subgoal, and the most recent (step, caption) pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingExample {
    pub goal: String,
    pub subgoal: Option<String>,
    /// (step_text, caption_text) pairs, most recent last.
    pub history: Vec<(String, String)>,
    pub target: String,
    pub task_id: String,
    /// Number of steps preceding the target in the source task. Unique per
    /// task even when the history window truncates.
    pub position: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorpusStats {
    pub task_count: usize,
    pub pair_count: usize,
    pub mean_steps_per_sample: f64,
    pub mean_tokens_per_step: f64,
}

/// Side counts from parsing, for reporting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseReport {
    pub tasks_seen: usize,
    pub tasks_kept: usize,
    /// Tasks removed because fewer than 2 steps survived.
    pub tasks_removed: usize,
    pub steps_seen: usize,
    pub steps_dropped: usize,
}

#[derive(Serialize, Deserialize)]
struct RawStep {
    text: String,
    caption: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct RawTask {
    id: String,
    goal: String,
    subgoal: Option<String>,
    steps: Vec<RawStep>,
}

/// Parse a JSON Lines dataset file.
///
/// Steps whose caption is missing (or whose step/caption text normalizes to
/// nothing) are dropped when `drop_incomplete` is set and rejected
/// otherwise. Tasks left with fewer than 2 steps are removed entirely.
pub fn parse_dataset(path: &Path, drop_incomplete: bool, split: Split) -> Result<Corpus> {
    let file = File::open(path)?;
    parse_reader(BufReader::new(file), drop_incomplete, split).map(|(c, _)| c)
}

/// Reader-level parser; returns the corpus plus drop/keep counts.
pub fn parse_reader<R: Read>(
    reader: R,
    drop_incomplete: bool,
    split: Split,
) -> Result<(Corpus, ParseReport)> {
    let mut tasks = Vec::new();
    let mut seen_ids: HashSet<String> = HashSet::new();
    let mut report = ParseReport::default();

    for (lineno, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawTask = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
        report.tasks_seen += 1;
        if !seen_ids.insert(raw.id.clone()) {
            return Err(Error::DuplicateTaskId { line: lineno, id: raw.id });
        }

        let mut steps = Vec::new();
        for raw_step in raw.steps {
            report.steps_seen += 1;
            let step_ok = !Tokenizer::normalize(&raw_step.text).is_empty();
            let caption_ok = raw_step
                .caption
                .as_deref()
                .map(|c| !Tokenizer::normalize(c).is_empty())
                .unwrap_or(false);
            if step_ok && caption_ok {
                steps.push(StepPair {
                    index: steps.len() + 1,
                    step_text: raw_step.text,
                    caption_text: raw_step.caption.unwrap(),
                });
            } else if drop_incomplete {
                report.steps_dropped += 1;
            } else {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!(
                        "task `{}`: step {} is incomplete (missing or empty {})",
                        raw.id,
                        report.steps_seen,
                        if step_ok { "caption" } else { "step text" }
                    ),
                });
            }
        }

        if steps.len() >= 2 {
            report.tasks_kept += 1;
            tasks.push(Task { id: raw.id, goal: raw.goal, subgoal: raw.subgoal, steps });
        } else {
            report.tasks_removed += 1;
        }
    }

    if report.tasks_seen == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok((Corpus { split, tasks }, report))
}

/// Serialize a corpus back to the JSON Lines dataset format.
pub fn write_corpus<W: Write>(corpus: &Corpus, mut writer: W) -> Result<()> {
    for task in &corpus.tasks {
        let raw = RawTask {
            id: task.id.clone(),
            goal: task.goal.clone(),
            subgoal: task.subgoal.clone(),
            steps: task
                .steps
                .iter()
                .map(|s| RawStep { text: s.step_text.clone(), caption: Some(s.caption_text.clone()) })
                .collect(),
        };
        serde_json::to_writer(&mut writer, &raw).map_err(|e| Error::Format(e.to_string()))?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut file = File::create(path)?;
    write_corpus(corpus, &mut file)
}

/// Window every task into next-step prediction examples.
///
/// A task with `m` steps yields `m - 1` examples targeting steps 2..=m,
/// each with the most recent `max_history` preceding pairs as history.
/// Ordering is deterministic: task order, then position.
pub fn build_examples(corpus: &Corpus, max_history: usize) -> Vec<TrainingExample> {
    let mut examples = Vec::new();
    for task in &corpus.tasks {
        for target_idx in 1..task.steps.len() {
            let from = target_idx.saturating_sub(max_history);
            let history = task.steps[from..target_idx]
                .iter()
                .map(|s| (s.step_text.clone(), s.caption_text.clone()))
                .collect();
            examples.push(TrainingExample {
                goal: task.goal.clone(),
                subgoal: task.subgoal.clone(),
                history,
                target: task.steps[target_idx].step_text.clone(),
                task_id: task.id.clone(),
                position: target_idx,
            });
        }
    }
    examples
}

pub fn corpus_stats(corpus: &Corpus, tokenizer: &Tokenizer) -> CorpusStats {
    let task_count = corpus.tasks.len();
    let pair_count: usize = corpus.tasks.iter().map(|t| t.steps.len()).sum();
    let token_total: usize = corpus
        .tasks
        .iter()
        .flat_map(|t| &t.steps)
        .map(|s| tokenizer.encode(&s.step_text).len())
        .sum();
    CorpusStats {
        task_count,
        pair_count,
        mean_steps_per_sample: if task_count == 0 { 0.0 } else { pair_count as f64 / task_count as f64 },
        mean_tokens_per_step: if pair_count == 0 { 0.0 } else { token_total as f64 / pair_count as f64 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: &str, steps: &[(&str, Option<&str>)]) -> String {
        let raw = RawTask {
            id: id.to_string(),
            goal: "grow roses".to_string(),
            subgoal: None,
            steps: steps
                .iter()
                .map(|(t, c)| RawStep { text: t.to_string(), caption: c.map(str::to_string) })
                .collect(),
        };
        serde_json::to_string(&raw).unwrap()
    }

    #[test]
    fn parses_complete_task() {
        let data = line("t1", &[("a", Some("ca")), ("b", Some("cb")), ("c", Some("cc"))]);
        let (corpus, report) = parse_reader(data.as_bytes(), false, Split::Train).unwrap();
        assert_eq!(corpus.tasks.len(), 1);
        assert_eq!(corpus.tasks[0].steps.len(), 3);
        assert_eq!(report.tasks_kept, 1);
        assert_eq!(corpus.tasks[0].steps[2].index, 3);
    }

    #[test]
    fn drop_incomplete_keeps_task_with_two_complete_steps() {
        let data = line("t1", &[("a", Some("ca")), ("b", None), ("c", Some("cc"))]);
        let (corpus, report) = parse_reader(data.as_bytes(), true, Split::Train).unwrap();
        assert_eq!(corpus.tasks[0].steps.len(), 2);
        assert_eq!(report.steps_dropped, 1);
        // indices re-packed to stay contiguous
        assert_eq!(corpus.tasks[0].steps[1].index, 2);
        assert_eq!(corpus.tasks[0].steps[1].step_text, "c");
    }

    #[test]
    fn incomplete_step_rejected_without_flag() {
        let data = line("t1", &[("a", Some("ca")), ("b", None)]);
        let err = parse_reader(data.as_bytes(), false, Split::Train).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn task_reduced_below_two_steps_is_removed() {
        let data = line("t1", &[("a", Some("ca")), ("b", None)]);
        let (corpus, report) = parse_reader(data.as_bytes(), true, Split::Train).unwrap();
        assert!(corpus.tasks.is_empty());
        assert_eq!(report.tasks_removed, 1);
    }

    #[test]
    fn single_step_task_is_removed() {
        let data = line("t1", &[("a", Some("ca"))]);
        let (corpus, report) = parse_reader(data.as_bytes(), false, Split::Train).unwrap();
        assert!(corpus.tasks.is_empty());
        assert_eq!(report.tasks_removed, 1);
    }

    #[test]
    fn duplicate_task_id_rejected() {
        let a = line("t1", &[("a", Some("c")), ("b", Some("c"))]);
        let data = format!("{a}\n{a}");
        let err = parse_reader(data.as_bytes(), false, Split::Train).unwrap_err();
        assert!(matches!(err, Error::DuplicateTaskId { line: 2, .. }));
    }

    #[test]
    fn empty_file_rejected() {
        let err = parse_reader("".as_bytes(), false, Split::Train).unwrap_err();
        assert!(matches!(err, Error::EmptyDataset));
    }

    #[test]
    fn malformed_line_reports_number() {
        let good = line("t1", &[("a", Some("c")), ("b", Some("c"))]);
        let data = format!("{good}\nnot json");
        let err = parse_reader(data.as_bytes(), false, Split::Train).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn windowing_emits_m_minus_one_examples() {
        let data = line("t1", &[("s1", Some("c1")), ("s2", Some("c2")), ("s3", Some("c3"))]);
        let (corpus, _) = parse_reader(data.as_bytes(), false, Split::Train).unwrap();
        let examples = build_examples(&corpus, 10);
        assert_eq!(examples.len(), 2);
        assert_eq!(examples[0].history, vec![("s1".into(), "c1".into())]);
        assert_eq!(examples[0].target, "s2");
        assert_eq!(examples[0].position, 1);
        assert_eq!(examples[1].history.len(), 2);
        assert_eq!(examples[1].target, "s3");
    }

    #[test]
    fn windowing_keeps_most_recent_pairs() {
        let steps: Vec<(String, Option<String>)> =
            (1..=12).map(|i| (format!("step {i}"), Some(format!("cap {i}")))).collect();
        let steps_ref: Vec<(&str, Option<&str>)> =
            steps.iter().map(|(s, c)| (s.as_str(), c.as_deref())).collect();
        let data = line("t1", &steps_ref);
        let (corpus, _) = parse_reader(data.as_bytes(), false, Split::Train).unwrap();
        let examples = build_examples(&corpus, 10);
        let last = examples.last().unwrap();
        assert_eq!(last.target, "step 12");
        assert_eq!(last.history.len(), 10);
        assert_eq!(last.history[0].0, "step 2");
        assert_eq!(last.history[9].0, "step 11");
    }

    #[test]
    fn empty_corpus_yields_no_examples() {
        let corpus = Corpus { split: Split::Train, tasks: vec![] };
        assert!(build_examples(&corpus, 10).is_empty());
    }

    #[test]
    fn stats_arithmetic() {
        let a = line("t1", &[("a b", Some("c")), ("b", Some("c")), ("c", Some("c"))]);
        let b = line(
            "t2",
            &[("a", Some("c")), ("b", Some("c")), ("c", Some("c")), ("d", Some("c")), ("e", Some("c"))],
        );
        let data = format!("{a}\n{b}");
        let (corpus, _) = parse_reader(data.as_bytes(), false, Split::Train).unwrap();
        let tok = Tokenizer::build(&corpus, 1).unwrap();
        let stats = corpus_stats(&corpus, &tok);
        assert_eq!(stats.task_count, 2);
        assert_eq!(stats.pair_count, 8);
        assert!((stats.mean_steps_per_sample - 4.0).abs() < 1e-12);
        assert!((stats.mean_tokens_per_step - 9.0 / 8.0).abs() < 1e-12);
    }

    #[test]
    fn roundtrip_is_identity_on_valid_corpus() {
        let a = line("t1", &[("cut the thread", Some("scissors")), ("tie it", Some("a knot"))]);
        let (corpus, _) = parse_reader(a.as_bytes(), false, Split::Test).unwrap();
        let mut buf = Vec::new();
        write_corpus(&corpus, &mut buf).unwrap();
        let (again, _) = parse_reader(&buf[..], false, Split::Test).unwrap();
        assert_eq!(corpus, again);
    }
}
