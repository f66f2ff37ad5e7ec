mod files;

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mixpro::augmentation::{augment_dataset, augment_templates, pairs_to_jsonl, AugmentedPair, RuleAugmenter};
use mixpro::checkpoint;
use mixpro::harness::ablation::{parse_variants, run_ablation, train_cell, RunReport, Variant};
use mixpro::harness::evaluate;
use mixpro::prompting::templates_to_file_string;
use mixpro::training::history_to_jsonl;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use files::{load_config, out_dir, task_for, write_atomic, write_json, write_task, RunManifest, WithManifest};

#[derive(Parser)]
#[command(name = "mixpro", version, about = "Three-level Mixup for few-shot prompt-based learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat JSON experiment config; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = "MIXPRO_OUT")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic task: data splits, templates, rules, vocabulary.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Task seed (overrides `task_seed` in the config).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Dump label-preserving and label-flipping pairs plus paraphrased templates.
    Augment {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Directory written by `synth`; the config's task is used otherwise.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Train one model and write its checkpoint and log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value = "full")]
        variant: String,
    },
    /// Evaluate a checkpoint with one forward pass per example and template.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::Dev)]
        split: Split,
        /// Evaluate only this template index.
        #[arg(long)]
        template: Option<usize>,
    },
    /// Train and evaluate every (variant, seed) cell.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "full,no-aug-PET")]
        variants: String,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Turn an `ablate` report into plot data.
    Report {
        #[command(flatten)]
        common: Common,
        /// Directory written by `ablate`.
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Split {
    Train,
    Dev,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth { common, seed } => synth(&common, seed),
        Command::Augment { common, seed, input } => augment(&common, seed, input.as_deref()),
        Command::Train { common, seed, input, variant } => train(&common, seed, input.as_deref(), &variant),
        Command::Eval { common, checkpoint, input, split, template } => {
            eval(&common, &checkpoint, input.as_deref(), split, template)
        }
        Command::Ablate { common, variants, seeds, jobs } => ablate(&common, &variants, &seeds, jobs),
        Command::Report { common, input } => report(&common, &input),
    }
}

fn synth(common: &Common, seed: Option<u64>) -> Result<()> {
    let mut config = load_config(common.config.as_deref())?;
    if let Some(s) = seed {
        config.task_seed = s;
    }
    let out = out_dir(common.out.clone());
    let task = config.task()?;
    write_task(&out, &task)?;
    let manifest = RunManifest::new("synth", &config, vec![config.task_seed], Vec::new(), &out)?;
    write_json(&out.join("manifest.json"), &manifest)?;
    eprintln!("synth: {} train / {} dev examples -> {}", task.train.len(), task.dev.len(), out.display());
    Ok(())
}

fn augment(common: &Common, seed: u64, input: Option<&Path>) -> Result<()> {
    let config = load_config(common.config.as_deref())?;
    let out = out_dir(common.out.clone());
    let (task, inputs) = task_for(&config, input)?;
    let augmenter = RuleAugmenter::new(task.rules.clone(), task.vocab.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(mixpro::harness::ablation::AUGMENT_STREAM);
    let samples = augment_dataset(&task.train, &augmenter, &mut rng)?;
    let templates = augment_templates(&task.templates, &augmenter, &mut rng)?;
    let pairs: Vec<AugmentedPair> = samples.iter().flat_map(|s| s.pairs()).collect();
    write_atomic(&out.join("pairs.jsonl"), pairs_to_jsonl(&pairs)?.as_bytes())?;
    write_atomic(&out.join("templates_aug.txt"), templates_to_file_string(&templates).as_bytes())?;
    write_json(&out.join("manifest.json"), &RunManifest::new("augment", &config, vec![seed], inputs, &out)?)?;
    eprintln!("augment: {} pairs -> {}", pairs.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct ScheduleBody<'a> {
    variant: Variant,
    seed: u64,
    chosen: &'a [usize],
    counts: &'a [usize],
}

fn train(common: &Common, seed: u64, input: Option<&Path>, variant: &str) -> Result<()> {
    let config = load_config(common.config.as_deref())?;
    let variant: Variant = variant.parse()?;
    let out = out_dir(common.out.clone());
    let (task, inputs) = task_for(&config, input)?;
    let trained =
        train_cell(&config, &task, variant, seed).with_context(|| format!("training {variant}, seed {seed}"))?;
    let manifest = RunManifest::new("train", &config, vec![seed], inputs, &out)?;
    let mut ckpt = Vec::new();
    checkpoint::write_checkpoint(&trained.outcome.params, &mut ckpt)?;
    write_atomic(&out.join("model.ckpt"), &ckpt)?;
    write_atomic(&out.join("train_log.jsonl"), history_to_jsonl(&trained.outcome.history)?.as_bytes())?;
    let schedule = &trained.outcome.schedule;
    let body = ScheduleBody { variant, seed, chosen: &schedule.chosen, counts: &schedule.counts };
    write_json(&out.join("schedule.json"), &WithManifest { manifest: &manifest, body })?;
    write_json(&out.join("manifest.json"), &manifest)?;
    eprintln!("train: {variant} seed {seed}, {} steps in {:.1}s", trained.outcome.history.len(), trained.wall_seconds);
    Ok(())
}

#[derive(Serialize)]
struct TemplateMetrics {
    template: usize,
    accuracy: f64,
    macro_f1: f64,
    forward_passes: usize,
}

#[derive(Serialize)]
struct EvalBody {
    split: Split,
    accuracy: f64,
    macro_f1: f64,
    templates: Vec<TemplateMetrics>,
}

fn eval(common: &Common, ckpt: &Path, input: Option<&Path>, split: Split, template: Option<usize>) -> Result<()> {
    let config = load_config(common.config.as_deref())?;
    let out = out_dir(common.out.clone());
    let (task, mut inputs) = task_for(&config, input)?;
    inputs.push(ckpt.display().to_string());
    let params = checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let data = match split {
        Split::Train => &task.train,
        Split::Dev => &task.dev,
    };
    let indices: Vec<usize> = match template {
        Some(i) if i >= task.templates.len() => bail!("template {i} out of range (task has {})", task.templates.len()),
        Some(i) => vec![i],
        None => (0..task.templates.len()).collect(),
    };
    let mut templates = Vec::new();
    for i in indices {
        let m = evaluate(&params, data, &task.templates[i], &task.verbalizer, &task.vocab)?;
        templates.push(TemplateMetrics {
            template: i,
            accuracy: m.accuracy,
            macro_f1: m.macro_f1,
            forward_passes: m.forward_passes,
        });
    }
    let n = templates.len() as f64;
    let body = EvalBody {
        split,
        accuracy: templates.iter().map(|t| t.accuracy).sum::<f64>() / n,
        macro_f1: templates.iter().map(|t| t.macro_f1).sum::<f64>() / n,
        templates,
    };
    let manifest = RunManifest::new("eval", &config, Vec::new(), inputs, &out)?;
    eprintln!("eval: accuracy {:.4}, macro-F1 {:.4}", body.accuracy, body.macro_f1);
    write_json(&out.join("metrics.json"), &WithManifest { manifest: &manifest, body })
}

fn ablate(common: &Common, variants: &str, seeds: &[u64], jobs: usize) -> Result<()> {
    let config = load_config(common.config.as_deref())?;
    let variants = parse_variants(variants)?;
    if seeds.is_empty() {
        bail!("--seeds is empty");
    }
    let out = out_dir(common.out.clone());
    let start = Instant::now();
    let report = run_ablation(&config, &variants, seeds, jobs)?;
    for r in &report.rows {
        eprintln!("ablate: {} seed {}: accuracy {:.4} ({:.1}s)", r.variant, r.seed, r.accuracy, r.wall_seconds);
    }
    eprintln!(
        "ablate: {} cells, {} parameters, {:.1}s total",
        report.rows.len(),
        report.parameter_count,
        start.elapsed().as_secs_f64()
    );
    let manifest = RunManifest::new("ablate", &config, seeds.to_vec(), Vec::new(), &out)?;
    write_atomic(&out.join("report.csv"), report.to_csv().as_bytes())?;
    write_json(&out.join("report.json"), &WithManifest { manifest: &manifest, body: &report })?;
    write_json(&out.join("manifest.json"), &manifest)
}

#[derive(Serialize)]
struct PlotPoint {
    variant: Variant,
    mean_accuracy: f64,
    std_accuracy: Option<f64>,
}

fn report(common: &Common, input: &Path) -> Result<()> {
    let config = load_config(common.config.as_deref())?;
    let out = out_dir(common.out.clone());
    let path = input.join("report.json");
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let report: RunReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let seeds: Vec<u64> = {
        let mut s: Vec<u64> = report.rows.iter().map(|r| r.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    let manifest = RunManifest::new("report", &config, seeds, vec![path.display().to_string()], &out)?;
    let points: Vec<PlotPoint> = report
        .aggregates
        .iter()
        .map(|a| PlotPoint { variant: a.variant, mean_accuracy: a.mean_accuracy, std_accuracy: a.std_accuracy })
        .collect();
    write_atomic(&out.join("plot_data.csv"), report.plot_data().as_bytes())?;
    #[derive(Serialize)]
    struct Series<'a> {
        series: &'a [PlotPoint],
    }
    write_json(&out.join("plot_data.json"), &WithManifest { manifest: &manifest, body: Series { series: &points } })?;
    write_json(&out.join("manifest.json"), &manifest)
}
