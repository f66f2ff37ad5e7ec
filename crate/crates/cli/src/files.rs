use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mixpro::augmentation::LexiconRules;
use mixpro::harness::ablation::ExperimentConfig;
use mixpro::harness::SyntheticTask;
use mixpro::prompting::{parse_templates, templates_to_file_string, tokenize, Example, Verbalizer, Vocab};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Provenance of one output directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub engine_version: String,
    pub command: String,
    pub config_sha256: String,
    pub seeds: Vec<u64>,
    pub inputs: Vec<String>,
    pub output_dir: String,
}

impl RunManifest {
    pub fn new(
        command: &str,
        config: &ExperimentConfig,
        seeds: Vec<u64>,
        inputs: Vec<String>,
        out: &Path,
    ) -> Result<Self> {
        let canonical = serde_json::to_vec(config)?;
        Ok(RunManifest {
            engine_version: ENGINE_VERSION.to_string(),
            command: command.to_string(),
            config_sha256: hex::encode(Sha256::digest(&canonical)),
            seeds,
            inputs,
            output_dir: out.display().to_string(),
        })
    }
}

/// Writes through a temporary file in the same directory and renames it
/// into place, so a crash never leaves a half-written output behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// A JSON output with the manifest that produced it.
#[derive(Serialize)]
pub struct WithManifest<'a, T: Serialize> {
    pub manifest: &'a RunManifest,
    #[serde(flatten)]
    pub body: T,
}

pub fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let Some(path) = path else {
        return Ok(ExperimentConfig::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let config: ExperimentConfig =
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    config.validate().with_context(|| format!("invalid config {}", path.display()))?;
    Ok(config)
}

#[derive(Serialize, Deserialize)]
struct ExampleLine {
    text: String,
    label: usize,
}

pub fn examples_to_jsonl(examples: &[Example], vocab: &Vocab) -> Result<String> {
    let mut out = String::new();
    for e in examples {
        out.push_str(&serde_json::to_string(&ExampleLine { text: vocab.decode(&e.tokens), label: e.label })?);
        out.push('\n');
    }
    Ok(out)
}

fn examples_from_jsonl(text: &str, vocab: &Vocab) -> Result<Vec<Example>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let line: ExampleLine = serde_json::from_str(l).with_context(|| format!("line {}", i + 1))?;
            Ok(Example::new(tokenize(&line.text, vocab)?, line.label))
        })
        .collect()
}

pub const TASK_FILES: [&str; 6] =
    ["vocab.txt", "train.jsonl", "dev.jsonl", "templates.txt", "rules.txt", "verbalizer.txt"];

pub fn write_task(dir: &Path, task: &SyntheticTask) -> Result<()> {
    let label_words: Vec<&str> = (0..task.verbalizer.num_labels())
        .map(|l| {
            task.verbalizer.label_word(l).and_then(|id| task.vocab.token(id)).expect("verbalizer words are in vocab")
        })
        .collect();
    let contents = [
        task.vocab.to_file_string(),
        examples_to_jsonl(&task.train, &task.vocab)?,
        examples_to_jsonl(&task.dev, &task.vocab)?,
        templates_to_file_string(&task.templates),
        task.rules.to_file_string(),
        label_words.join("\n") + "\n",
    ];
    for (name, text) in TASK_FILES.iter().zip(contents) {
        write_atomic(&dir.join(name), text.as_bytes())?;
    }
    Ok(())
}

pub fn read_task(dir: &Path) -> Result<SyntheticTask> {
    let read = |name: &str| -> Result<String> {
        let p = dir.join(name);
        std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))
    };
    let vocab = Vocab::parse(&read("vocab.txt")?)?;
    let words = read("verbalizer.txt")?;
    let words: Vec<&str> = words.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    let task = SyntheticTask {
        train: examples_from_jsonl(&read("train.jsonl")?, &vocab).context("train.jsonl")?,
        dev: examples_from_jsonl(&read("dev.jsonl")?, &vocab).context("dev.jsonl")?,
        templates: parse_templates(&read("templates.txt")?)?,
        rules: LexiconRules::parse(&read("rules.txt")?)?,
        verbalizer: Verbalizer::from_words(&words, &vocab)?,
        vocab,
    };
    if task.templates.is_empty() || task.train.is_empty() {
        bail!("task in {} has no templates or no training data", dir.display());
    }
    Ok(task)
}

/// `--input` when given, else the task synthesised from the config.
pub fn task_for(config: &ExperimentConfig, input: Option<&Path>) -> Result<(SyntheticTask, Vec<String>)> {
    match input {
        Some(dir) => Ok((read_task(dir)?, vec![dir.display().to_string()])),
        None => Ok((config.task()?, Vec::new())),
    }
}

pub fn out_dir(out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| PathBuf::from("mixpro-out"))
}
