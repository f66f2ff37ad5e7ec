//! Variant grids over seeds.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::evaluate;
use super::synthetic::{gen_synthetic_task, SyntheticTask, SyntheticTaskSpec};
use crate::augmentation::{augment_dataset, augment_templates, AugmentedSample, RuleAugmenter};
use crate::error::{Error, Result};
use crate::mixup::MixupConfig;
use crate::model::{ModelConfig, ModelParams};
use crate::prompting::Example;
use crate::training::{train, LambdaMode, TrainOutcome, TrainingConfig};

/// Stream for the per-run augmentation draws.
pub const AUGMENT_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    Full,
    WithoutToken,
    WithoutSentence,
    WithoutTemplate,
    WithoutTextAug,
    WithoutTemplateAug,
    VanillaMixup,
    NoAugPet,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Full,
        Variant::WithoutToken,
        Variant::WithoutSentence,
        Variant::WithoutTemplate,
        Variant::WithoutTextAug,
        Variant::WithoutTemplateAug,
        Variant::VanillaMixup,
        Variant::NoAugPet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutToken => "w/o-token",
            Variant::WithoutSentence => "w/o-sent",
            Variant::WithoutTemplate => "w/o-tmpl",
            Variant::WithoutTextAug => "w/o-text-aug",
            Variant::WithoutTemplateAug => "w/o-template-aug",
            Variant::VanillaMixup => "vanilla-mixup",
            Variant::NoAugPet => "no-aug-PET",
        }
    }

    /// Mixing levels plus whether the run sees augmented text and templates.
    pub fn setup(self, alpha: f64) -> VariantSetup {
        let full =
            VariantSetup { mixup: MixupConfig { alpha, ..MixupConfig::default() }, text_aug: true, template_aug: true };
        let mut s = full.clone();
        match self {
            Variant::Full => {}
            Variant::WithoutToken => s.mixup.enable_token = false,
            Variant::WithoutSentence => s.mixup.enable_sentence = false,
            Variant::WithoutTemplate => s.mixup.enable_template = false,
            Variant::WithoutTextAug => s.text_aug = false,
            Variant::WithoutTemplateAug => s.template_aug = false,
            Variant::VanillaMixup => {
                s.mixup = MixupConfig { enable_vanilla_baseline: true, ..MixupConfig::disabled(alpha) };
                s.text_aug = false;
                s.template_aug = false;
            }
            Variant::NoAugPet => {
                s = VariantSetup { mixup: MixupConfig::disabled(alpha), text_aug: false, template_aug: false };
            }
        }
        s
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| Error::Unknown(format!("variant {s:?}")))
    }
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Parses a comma-separated list such as `full,no-aug-PET`.
pub fn parse_variants(list: &str) -> Result<Vec<Variant>> {
    list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::parse).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantSetup {
    pub mixup: MixupConfig,
    pub text_aug: bool,
    pub template_aug: bool,
}

/// Every knob of an experiment in one flat record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub batch_size: usize,
    pub grad_accumulation_steps: usize,
    pub max_seq_length: usize,
    pub max_steps: usize,
    pub adam_epsilon: f64,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    pub weight_decay: f64,
    pub mixup_alpha: f64,
    pub seed: u64,
    pub preserving_flipping_ratio: f64,
    pub lambda_mode: LambdaMode,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub init_std: f64,
    pub layer_norm_eps: f64,
    pub task_seed: u64,
    pub train_size: usize,
    pub dev_size: usize,
    pub num_templates: usize,
    pub train_heads_only: bool,
}

impl Default for ExperimentConfig {
    /// The desk-scale setup: the published optimizer recipe except for the
    /// learning rate, which is raised because the encoder starts from random
    /// weights instead of a pretrained checkpoint.
    fn default() -> Self {
        let t = TrainingConfig::default();
        let m = ModelConfig::desk(1, 2);
        let s = SyntheticTaskSpec::default();
        ExperimentConfig {
            batch_size: t.batch_size,
            grad_accumulation_steps: t.grad_accumulation_steps,
            max_seq_length: t.max_seq_length,
            max_steps: t.max_steps,
            adam_epsilon: t.adam_epsilon,
            learning_rate: 3e-3,
            max_grad_norm: t.max_grad_norm,
            weight_decay: t.weight_decay,
            mixup_alpha: t.mixup_alpha,
            seed: t.seed,
            preserving_flipping_ratio: t.preserving_flipping_ratio,
            lambda_mode: t.lambda_mode,
            hidden: m.hidden,
            layers: m.layers,
            heads: m.heads,
            ffn: m.ffn,
            max_len: m.max_len,
            init_std: m.init_std,
            layer_norm_eps: m.layer_norm_eps,
            task_seed: 0,
            train_size: s.train_size,
            dev_size: s.dev_size,
            num_templates: s.num_templates,
            train_heads_only: s.train_heads_only,
        }
    }
}

impl ExperimentConfig {
    pub fn training(&self, seed: u64) -> TrainingConfig {
        TrainingConfig {
            batch_size: self.batch_size,
            grad_accumulation_steps: self.grad_accumulation_steps,
            max_seq_length: self.max_seq_length,
            max_steps: self.max_steps,
            adam_epsilon: self.adam_epsilon,
            learning_rate: self.learning_rate,
            max_grad_norm: self.max_grad_norm,
            weight_decay: self.weight_decay,
            mixup_alpha: self.mixup_alpha,
            seed,
            preserving_flipping_ratio: self.preserving_flipping_ratio,
            lambda_mode: self.lambda_mode,
        }
    }

    pub fn model(&self, vocab_size: usize, num_labels: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            hidden: self.hidden,
            layers: self.layers,
            heads: self.heads,
            ffn: self.ffn,
            max_len: self.max_len,
            num_labels,
            init_std: self.init_std,
            layer_norm_eps: self.layer_norm_eps,
        }
    }

    pub fn task_spec(&self) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            train_size: self.train_size,
            dev_size: self.dev_size,
            num_templates: self.num_templates,
            train_heads_only: self.train_heads_only,
            ..SyntheticTaskSpec::default()
        }
    }

    pub fn task(&self) -> Result<SyntheticTask> {
        gen_synthetic_task(&self.task_spec(), self.task_seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.training(self.seed).validate()?;
        self.model(1, 2).validate()?;
        self.task_spec().validate()
    }
}

/// Augmentation sets whose augmented text is the original itself.
pub fn identity_samples(data: &[Example]) -> Vec<AugmentedSample> {
    data.iter().map(|e| AugmentedSample { original: e.clone(), preserving: e.clone(), flipping: None }).collect()
}

/// A trained cell before evaluation.
#[derive(Clone, Debug)]
pub struct TrainedCell {
    pub outcome: TrainOutcome,
    pub wall_seconds: f64,
}

/// Augments, initialises and trains one `(variant, seed)` cell.
pub fn train_cell(config: &ExperimentConfig, task: &SyntheticTask, variant: Variant, seed: u64) -> Result<TrainedCell> {
    let start = Instant::now();
    let setup = variant.setup(config.mixup_alpha);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(AUGMENT_STREAM);
    let augmenter = RuleAugmenter::new(task.rules.clone(), task.vocab.clone());
    let augmented = if setup.text_aug {
        augment_dataset(&task.train, &augmenter, &mut rng)?
    } else {
        identity_samples(&task.train)
    };
    let aug_templates = if setup.template_aug {
        augment_templates(&task.templates, &augmenter, &mut rng)?
    } else {
        task.templates.clone()
    };
    let model = config.model(task.vocab.len(), task.verbalizer.num_labels());
    let params = ModelParams::init(&model, seed)?;
    let outcome = train(
        &task.train,
        &augmented,
        &task.templates,
        &aug_templates,
        params,
        &setup.mixup,
        &config.training(seed),
        &task.vocab,
    )?;
    Ok(TrainedCell { outcome, wall_seconds: start.elapsed().as_secs_f64() })
}

/// Metrics of one `(variant, seed)` cell.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellResult {
    pub variant: Variant,
    pub seed: u64,
    /// Mean over templates of single-template dev accuracy.
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_template_accuracy: Vec<f64>,
    pub template_counts: Vec<usize>,
    pub forward_passes: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    #[serde(skip)]
    pub wall_seconds: f64,
}

pub fn run_cell(config: &ExperimentConfig, task: &SyntheticTask, variant: Variant, seed: u64) -> Result<CellResult> {
    let trained = train_cell(config, task, variant, seed)?;
    let params = &trained.outcome.params;
    let mut per_template = Vec::with_capacity(task.templates.len());
    let mut f1 = 0.0;
    let mut passes = 0;
    for t in &task.templates {
        let m = evaluate(params, &task.dev, t, &task.verbalizer, &task.vocab)?;
        per_template.push(m.accuracy);
        f1 += m.macro_f1;
        passes += m.forward_passes;
    }
    let n = task.templates.len() as f64;
    let history = &trained.outcome.history;
    Ok(CellResult {
        variant,
        seed,
        accuracy: per_template.iter().sum::<f64>() / n,
        macro_f1: f1 / n,
        per_template_accuracy: per_template,
        template_counts: trained.outcome.schedule.counts.clone(),
        forward_passes: passes,
        initial_loss: history.first().map(|r| r.loss),
        final_loss: history.last().map(|r| r.loss),
        wall_seconds: trained.wall_seconds,
    })
}

/// Mean and sample standard deviation (two passes); `None` below two values.
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, Some((ss / (n - 1.0)).sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub variant: Variant,
    pub seeds: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: Option<f64>,
    pub mean_macro_f1: f64,
    pub std_macro_f1: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub task_seed: u64,
    pub parameter_count: usize,
    pub rows: Vec<CellResult>,
    pub aggregates: Vec<Aggregate>,
}

impl RunReport {
    pub fn aggregate(&self, variant: Variant) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.variant == variant)
    }

    /// One line per cell, then one `mean` line per variant.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from(
            "kind,variant,seed,accuracy,macro_f1,accuracy_std,macro_f1_std,template_counts,forward_passes\n",
        );
        for r in &self.rows {
            let counts: Vec<String> = r.template_counts.iter().map(usize::to_string).collect();
            out.push_str(&format!(
                "cell,{},{},{},{},,,{},{}\n",
                r.variant,
                r.seed,
                r.accuracy,
                r.macro_f1,
                counts.join(";"),
                r.forward_passes
            ));
        }
        for a in &self.aggregates {
            out.push_str(&format!(
                "mean,{},,{},{},{},{},,\n",
                a.variant,
                a.mean_accuracy,
                a.mean_macro_f1,
                opt(a.std_accuracy),
                opt(a.std_macro_f1)
            ));
        }
        out
    }

    /// `variant,mean,std` rows for plotting.
    pub fn plot_data(&self) -> String {
        let mut out = String::from("variant,mean_accuracy,std_accuracy\n");
        for a in &self.aggregates {
            let std = a.std_accuracy.map(|x| x.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{}\n", a.variant, a.mean_accuracy, std));
        }
        out
    }
}

/// Runs every `(variant, seed)` cell on up to `jobs` threads and aggregates
/// per variant. Cell order in the report is variant-major, independent of
/// scheduling.
pub fn run_ablation(config: &ExperimentConfig, variants: &[Variant], seeds: &[u64], jobs: usize) -> Result<RunReport> {
    config.validate()?;
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::contract("ablation needs at least one variant and one seed"));
    }
    let task = config.task()?;
    let cells: Vec<(Variant, u64)> = variants.iter().flat_map(|&v| seeds.iter().map(move |&s| (v, s))).collect();
    let results: Mutex<Vec<Option<Result<CellResult>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, cells.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(v, s)) = cells.get(i) else { break };
                let r =
                    run_cell(config, &task, v, s).map_err(|e| Error::Contract(format!("cell ({v}, seed {s}): {e}")));
                results.lock().expect("no panics while holding the lock")[i] = Some(r);
            });
        }
    });
    let rows: Vec<CellResult> = results
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect::<Result<_>>()?;
    let aggregates = variants
        .iter()
        .map(|&v| {
            let mine: Vec<&CellResult> = rows.iter().filter(|r| r.variant == v).collect();
            let acc: Vec<f64> = mine.iter().map(|r| r.accuracy).collect();
            let f1: Vec<f64> = mine.iter().map(|r| r.macro_f1).collect();
            let (mean_accuracy, std_accuracy) = mean_std(&acc);
            let (mean_macro_f1, std_macro_f1) = mean_std(&f1);
            Aggregate { variant: v, seeds: mine.len(), mean_accuracy, std_accuracy, mean_macro_f1, std_macro_f1 }
        })
        .collect();
    let parameter_count =
        ModelParams::init(&config.model(task.vocab.len(), task.verbalizer.num_labels()), 0)?.num_parameters();
    Ok(RunReport { task_seed: config.task_seed, parameter_count, rows, aggregates })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("w/o-everything".parse::<Variant>().is_err());
        assert_eq!(parse_variants("full, no-aug-PET").unwrap(), vec![Variant::Full, Variant::NoAugPet]);
    }

    #[test]
    fn each_ablation_flips_one_switch() {
        let full = Variant::Full.setup(0.5);
        let flags = |s: &VariantSetup| {
            [s.mixup.enable_token, s.mixup.enable_sentence, s.mixup.enable_template, s.text_aug, s.template_aug]
        };
        for v in [
            Variant::WithoutToken,
            Variant::WithoutSentence,
            Variant::WithoutTemplate,
            Variant::WithoutTextAug,
            Variant::WithoutTemplateAug,
        ] {
            let diff = flags(&full).iter().zip(flags(&v.setup(0.5))).filter(|(a, b)| **a != *b).count();
            assert_eq!(diff, 1, "{v}");
        }
    }

    #[test]
    fn std_matches_textbook_values() {
        let (m, s) = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!(m, 5.0);
        assert!((s.unwrap() - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[1.0]).1, None);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"learning_rte": 0.1}"#).is_err());
        let c: ExperimentConfig = serde_json::from_str(r#"{"max_steps": 3}"#).unwrap();
        assert_eq!(c.max_steps, 3);
    }
}
