//! Command-line pipeline: ingest -> index -> train -> generate -> eval,
//! plus a synthetic-corpus generator. Every stage is a file-to-file step
//! and writes a run manifest next to its outputs; given identical inputs
//! and seed, outputs are byte-identical (timestamps live only in the
//! manifest).

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use scriptgen::corpus::{build_examples, corpus_stats, parse_reader, save_corpus, Corpus, Split};
use scriptgen::inference::{generate_text, GenerateSettings};
use scriptgen::metrics::{
    self, bleu, history_overlap, rouge_l, text_at_1_hit, MetricSelection, ReportInputs, TextAt1Item,
};
use scriptgen::model::load_checkpoint;
use scriptgen::retrieval::{build_index, load_index, retrieve_next_steps, RetrievedSet};
use scriptgen::text::Tokenizer;
use scriptgen::training::{train, TrainConfig};
use scriptgen::synthetic::{generate as synth_generate, SyntheticSpec};

#[derive(Parser)]
#[command(name = "scriptgen", version, about = "Next-step generation for procedural scripts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate a JSON Lines dataset, write the normalized
    /// corpus, and print its statistics.
    Ingest {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Drop caption-less steps instead of rejecting the file.
        #[arg(long)]
        drop_incomplete: bool,
        /// Split designation of this file (membership is by file).
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
    },
    /// Build the step-embedding index over a training corpus.
    Index {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = scriptgen::retrieval::DEFAULT_DIMENSION)]
        dimension: usize,
    },
    /// Train a model; writes checkpoint.bin, vocab.txt, and train.log into
    /// the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate next steps for every example of a corpus.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        beam: usize,
        /// Vocabulary file; defaults to vocab.txt next to the checkpoint.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Skip retrieval hits from the example's own task.
        #[arg(long)]
        exclude_own_task: bool,
        /// Recorded in the manifest; generation itself is deterministic.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a generations file against its corpus.
    Eval {
        #[arg(long)]
        generations: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Comma-separated subset of: bleu, rouge, self-bleu, distinct,
        /// history-overlap, text-at-1.
        #[arg(long)]
        metrics: Option<String>,
        /// Also print one row per example.
        #[arg(long)]
        per_example: bool,
        /// Index file supplying the fitted embedder for Text@1; without it
        /// the embedder is fitted on the eval corpus.
        #[arg(long)]
        index: Option<PathBuf>,
        /// Write the machine-readable report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic template-grammar corpus (train/valid/test).
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 160)]
        train_tasks: usize,
        #[arg(long, default_value_t = 16)]
        valid_tasks: usize,
        #[arg(long, default_value_t = 16)]
        test_tasks: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Replace every task's first caption with a constant irrelevant
        /// text.
        #[arg(long)]
        noise_caption: bool,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Err(err) = run() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Reproducibility record written next to every command's outputs.
struct RunManifest {
    command: &'static str,
    started: u64,
    inputs: Vec<(String, String)>,
    seed: Option<u64>,
    config_echo: Option<serde_json::Value>,
}

impl RunManifest {
    fn new(command: &'static str) -> Self {
        RunManifest { command, started: now_unix(), inputs: Vec::new(), seed: None, config_echo: None }
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push((path.display().to_string(), sha256_file(path)?));
        Ok(())
    }

    fn write(&self, dest: &Path) -> Result<()> {
        let inputs: serde_json::Map<String, serde_json::Value> = self
            .inputs
            .iter()
            .map(|(k, v)| (k.clone(), serde_json::Value::from(v.clone())))
            .collect();
        let mut doc = serde_json::json!({
            "command": self.command,
            "artifact_version": env!("CARGO_PKG_VERSION"),
            "started_unix": self.started,
            "finished_unix": now_unix(),
            "inputs": inputs,
        });
        if let Some(seed) = self.seed {
            doc["seed"] = seed.into();
        }
        if let Some(config) = &self.config_echo {
            doc["config"] = config.clone();
        }
        fs::write(dest, serde_json::to_string_pretty(&doc)? + "\n")
            .with_context(|| format!("writing manifest {}", dest.display()))?;
        Ok(())
    }
}

/// Manifest path for a file output: `<out>.run.json`; for a directory:
/// `<dir>/run_manifest.json`.
fn manifest_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("run_manifest.json")
    } else {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".run.json");
        out.with_file_name(name)
    }
}

fn load_corpus(path: &Path, split: Split) -> Result<Corpus> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let (corpus, _) = parse_reader(std::io::BufReader::new(file), true, split)
        .with_context(|| format!("parsing {}", path.display()))?;
    Ok(corpus)
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Ingest { data, out, drop_incomplete, split } => cmd_ingest(&data, &out, drop_incomplete, split.into()),
        Command::Index { train, out, dimension } => cmd_index(&train, &out, dimension),
        Command::Train { config, train, valid, index, out, seed } => {
            cmd_train(&config, &train, &valid, &index, &out, seed)
        }
        Command::Generate { ckpt, corpus, index, out, beam, vocab, exclude_own_task, seed } => {
            cmd_generate(&ckpt, &corpus, &index, &out, beam, vocab.as_deref(), exclude_own_task, seed)
        }
        Command::Eval { generations, corpus, metrics, per_example, index, out } => {
            cmd_eval(&generations, &corpus, metrics.as_deref(), per_example, index.as_deref(), out.as_deref())
        }
        Command::Synth { out_dir, train_tasks, valid_tasks, test_tasks, seed, noise_caption } => {
            cmd_synth(&out_dir, train_tasks, valid_tasks, test_tasks, seed, noise_caption)
        }
    }
}

fn cmd_ingest(data: &Path, out: &Path, drop_incomplete: bool, split: Split) -> Result<()> {
    let mut manifest = RunManifest::new("ingest");
    manifest.input(data)?;

    let file = fs::File::open(data).with_context(|| format!("opening {}", data.display()))?;
    let (corpus, report) = parse_reader(std::io::BufReader::new(file), drop_incomplete, split)?;
    save_corpus(&corpus, out).with_context(|| format!("writing {}", out.display()))?;

    let tokenizer = Tokenizer::build(&corpus, 1)?;
    let stats = corpus_stats(&corpus, &tokenizer);
    println!("split                {split}");
    println!("tasks                {}", stats.task_count);
    println!("pairs                {}", stats.pair_count);
    println!("mean steps/sample    {:.2}", stats.mean_steps_per_sample);
    println!("mean tokens/step     {:.2}", stats.mean_tokens_per_step);
    println!(
        "retained {}/{} tasks ({} removed with <2 steps), dropped {}/{} steps",
        report.tasks_kept, report.tasks_seen, report.tasks_removed, report.steps_dropped, report.steps_seen
    );

    manifest.write(&manifest_path(out, false))?;
    Ok(())
}

fn cmd_index(train: &Path, out: &Path, dimension: usize) -> Result<()> {
    let mut manifest = RunManifest::new("index");
    manifest.input(train)?;

    let corpus = load_corpus(train, Split::Train)?;
    let index = build_index(&corpus, dimension)?;
    scriptgen::retrieval::save_index(&index, out)?;
    println!("indexed {} steps at dimension {}", index.entries.len(), index.dimension());

    manifest.write(&manifest_path(out, false))?;
    Ok(())
}

fn cmd_train(
    config_path: &Path,
    train_path: &Path,
    valid_path: &Path,
    index_path: &Path,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let mut manifest = RunManifest::new("train");
    for p in [config_path, train_path, valid_path, index_path] {
        manifest.input(p)?;
    }

    let mut config = TrainConfig::load(config_path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    manifest.seed = Some(config.seed);
    manifest.config_echo = Some(serde_json::to_value(&config)?);

    if config.k_retrieved > 0 && !index_path.exists() {
        bail!("index {} not found; run `scriptgen index` first", index_path.display());
    }
    let train_corpus = load_corpus(train_path, Split::Train)?;
    let valid_corpus = load_corpus(valid_path, Split::Valid)?;
    let index = load_index(index_path)?;
    let tokenizer = Tokenizer::build(&train_corpus, config.min_freq)?;

    let artifacts = train(&train_corpus, &valid_corpus, &tokenizer, &index, &config, out)?;
    println!(
        "best epoch {} (val BLEU-4 {:.4}, val ROUGE-L {:.4}) after {} steps{}",
        artifacts.report.best_epoch,
        artifacts.report.best_val_bleu4,
        artifacts.report.best_val_rouge_l,
        artifacts.report.steps,
        if artifacts.report.stopped_early { ", stopped early" } else { "" }
    );
    println!("checkpoint: {}", artifacts.checkpoint_path.display());
    println!("log:        {}", artifacts.log_path.display());

    manifest.write(&manifest_path(out, true))?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_generate(
    ckpt: &Path,
    corpus_path: &Path,
    index_path: &Path,
    out: &Path,
    beam: usize,
    vocab: Option<&Path>,
    exclude_own_task: bool,
    seed: Option<u64>,
) -> Result<()> {
    let mut manifest = RunManifest::new("generate");
    for p in [ckpt, corpus_path, index_path] {
        manifest.input(p)?;
    }
    manifest.seed = seed;

    let checkpoint = load_checkpoint(ckpt)?;
    let vocab_path = vocab
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).join("vocab.txt"));
    let tokenizer = Tokenizer::load(&vocab_path)
        .with_context(|| format!("loading vocabulary {}", vocab_path.display()))?;
    if tokenizer.vocab_size() != checkpoint.model.config.vocab_size {
        bail!(
            "vocabulary has {} tokens but the checkpoint was trained with {}",
            tokenizer.vocab_size(),
            checkpoint.model.config.vocab_size
        );
    }
    let corpus = load_corpus(corpus_path, Split::Test)?;
    let index = load_index(index_path)?;

    let pipeline = checkpoint.pipeline;
    let settings = GenerateSettings {
        beam,
        max_len: pipeline.max_target_tokens,
        len_alpha: 1.0,
    };
    let examples = build_examples(&corpus, pipeline.max_history);
    let mut lines = String::new();
    for example in &examples {
        let retrieved = if pipeline.k_retrieved > 0 {
            let exclude = exclude_own_task.then_some(example.task_id.as_str());
            let last = &example.history.last().expect("history is never empty").0;
            retrieve_next_steps(&index, last, pipeline.k_retrieved, exclude)?
        } else {
            RetrievedSet::empty()
        };
        let text =
            generate_text(&checkpoint.model, &tokenizer, example, &retrieved, &pipeline, &settings)?;
        lines.push_str(&format!("{}\t{}\t{}\n", example.task_id, example.position, text));
    }
    fs::write(out, lines).with_context(|| format!("writing {}", out.display()))?;
    println!("generated {} steps -> {}", examples.len(), out.display());

    manifest.write(&manifest_path(out, false))?;
    Ok(())
}

fn parse_generations(path: &Path) -> Result<Vec<(String, usize, String)>> {
    let raw = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let task = parts.next().unwrap_or_default();
        let position = parts
            .next()
            .and_then(|p| p.parse::<usize>().ok())
            .ok_or_else(|| anyhow!("line {}: expected `task_id\\tposition\\ttext`", i + 1))?;
        let text = parts.next().unwrap_or("").to_string();
        out.push((task.to_string(), position, text));
    }
    if out.is_empty() {
        bail!("no generations in {}", path.display());
    }
    Ok(out)
}

fn cmd_eval(
    generations_path: &Path,
    corpus_path: &Path,
    metric_list: Option<&str>,
    per_example: bool,
    index_path: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let mut manifest = RunManifest::new("eval");
    manifest.input(generations_path)?;
    manifest.input(corpus_path)?;

    let selection = match metric_list {
        Some(list) => MetricSelection::parse(list)?,
        None => MetricSelection::default(),
    };
    let generations = parse_generations(generations_path)?;
    let corpus = load_corpus(corpus_path, Split::Test)?;
    let examples = build_examples(&corpus, scriptgen::model::PipelineConfig::default().max_history);
    let by_key: HashMap<(String, usize), &scriptgen::corpus::TrainingExample> =
        examples.iter().map(|e| ((e.task_id.clone(), e.position), e)).collect();
    let tasks: HashMap<&str, &scriptgen::corpus::Task> =
        corpus.tasks.iter().map(|t| (t.id.as_str(), t)).collect();

    let embedder = match index_path {
        Some(p) => {
            manifest.input(p)?;
            load_index(p)?.embedder
        }
        None => {
            log::warn!("no --index given; fitting the Text@1 embedder on the eval corpus");
            scriptgen::retrieval::Embedder::fit(&corpus, scriptgen::retrieval::DEFAULT_DIMENSION)?
        }
    };

    let mut candidates = Vec::new();
    let mut references = Vec::new();
    let mut histories = Vec::new();
    let mut t1_items = Vec::new();
    for (task_id, position, text) in &generations {
        let example = by_key
            .get(&(task_id.clone(), *position))
            .ok_or_else(|| anyhow!("generation for unknown example {task_id}:{position}"))?;
        candidates.push(text.clone());
        references.push(example.target.clone());
        histories.push(example.history.iter().map(|(s, _)| s.clone()).collect::<Vec<String>>());
        let task = tasks[example.task_id.as_str()];
        t1_items.push(TextAt1Item {
            generated: text.clone(),
            pool: task.steps.iter().map(|s| s.step_text.clone()).collect(),
            is_future: task.steps.iter().map(|s| s.index > *position).collect(),
        });
    }

    let inputs = ReportInputs {
        candidates: &candidates,
        references: &references,
        histories: Some(&histories),
        text_at_1: Some((&embedder, &t1_items)),
    };
    let report = metrics::compute_report(&inputs, &selection)?;
    print!("{}", report.table());

    if per_example {
        println!("task_id\tposition\tbleu_1\tbleu_4\trouge_l\toverlap_1\ttext_at_1_hit");
        for (i, (task_id, position, text)) in generations.iter().enumerate() {
            let b1 = bleu(&[text.clone()], &[references[i].clone()], 1)?;
            let b4 = bleu(&[text.clone()], &[references[i].clone()], 4)?;
            let rl = rouge_l(text, &references[i]);
            let ov = history_overlap(text, &histories[i], 1);
            let hit = text_at_1_hit(&embedder, &t1_items[i])?;
            println!(
                "{task_id}\t{position}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{}",
                b1, b4, rl, ov, hit as u8
            );
        }
    }

    if let Some(out) = out {
        fs::write(out, serde_json::to_string_pretty(&report.to_json())? + "\n")?;
        manifest.write(&manifest_path(out, false))?;
    } else {
        manifest.write(&manifest_path(generations_path, false).with_file_name("eval.run.json"))?;
    }
    Ok(())
}

fn cmd_synth(
    out_dir: &Path,
    train_tasks: usize,
    valid_tasks: usize,
    test_tasks: usize,
    seed: u64,
    noise_caption: bool,
) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let spec = SyntheticSpec { train_tasks, valid_tasks, test_tasks, seed, noise_caption };
    let data = synth_generate(&spec);
    for (corpus, name) in
        [(&data.train, "train.jsonl"), (&data.valid, "valid.jsonl"), (&data.test, "test.jsonl")]
    {
        save_corpus(corpus, &out_dir.join(name))?;
    }
    println!(
        "wrote {} train / {} valid / {} test tasks to {}",
        data.train.tasks.len(),
        data.valid.tasks.len(),
        data.test.tasks.len(),
        out_dir.display()
    );
    let mut manifest = RunManifest::new("synth");
    manifest.seed = Some(seed);
    manifest.write(&manifest_path(out_dir, true))?;
    Ok(())
}
