//! The training loop.
//!
//! Each epoch draws one template index `i` and builds every prompt of that
//! epoch from `(T[i], T'[i])`. For each sample the original and augmented
//! prompts are embedded, mixed at the input with ratio `λ`, encoded in one
//! pass, read at both `[MASK]` positions, mixed again, and scored against
//! the equally mixed labels. Gradients are accumulated over micro-batches,
//! clipped by global norm and applied with Adam plus decoupled weight decay.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augmentation::{AugMode, AugmentedPair, AugmentedSample};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mixup::{merge_masks, one_hot, sample_lambda, LambdaDraw, MixupConfig};
use crate::model::{
    embed_on_tape, encode_on_tape, extract_on_tape, head_and_loss_on_tape, AttentionMask, ModelParams, ParamVars,
};
use crate::optim::{clip_global_norm, global_norm, Adam, AdamConfig};
use crate::prompting::{build_prompt, Example, Prompt, Template, Vocab};
use crate::tensor::Tensor;

/// ChaCha stream used by [`train`], so that a run seeded with `s` does not
/// replay the stream that initialised its parameters from the same `s`.
pub const TRAIN_STREAM: u64 = 1;

/// Whether `λ` is drawn for every sample or once per micro-batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    #[default]
    PerSample,
    PerBatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
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
    /// Probability that a sample trains on its label-preserving augmentation
    /// in a given epoch (otherwise its label-flipping one, when it has one).
    pub preserving_flipping_ratio: f64,
    pub lambda_mode: LambdaMode,
}

impl Default for TrainingConfig {
    /// The standard few-shot recipe.
    fn default() -> Self {
        TrainingConfig {
            batch_size: 2,
            grad_accumulation_steps: 8,
            max_seq_length: 256,
            max_steps: 250,
            adam_epsilon: 1e-8,
            learning_rate: 1e-5,
            max_grad_norm: 1.0,
            weight_decay: 0.01,
            mixup_alpha: 0.5,
            seed: 42,
            preserving_flipping_ratio: 0.5,
            lambda_mode: LambdaMode::PerSample,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("batch_size", self.batch_size),
            ("grad_accumulation_steps", self.grad_accumulation_steps),
            ("max_seq_length", self.max_seq_length),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::contract(format!("{name} must be positive")));
        }
        let positive = [
            ("adam_epsilon", self.adam_epsilon),
            ("learning_rate", self.learning_rate),
            ("max_grad_norm", self.max_grad_norm),
            ("mixup_alpha", self.mixup_alpha),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::contract(format!("{name} must be positive, got {v}")));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::contract("weight_decay must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.preserving_flipping_ratio) {
            return Err(Error::contract("preserving_flipping_ratio must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            epsilon: self.adam_epsilon,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    pub fn samples_per_step(&self) -> usize {
        self.batch_size * self.grad_accumulation_steps
    }
}

/// Template index chosen for each epoch plus running usage counts.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSchedule {
    pub chosen: Vec<usize>,
    pub counts: Vec<usize>,
}

impl TemplateSchedule {
    pub fn new(num_templates: usize) -> Self {
        TemplateSchedule { chosen: Vec::new(), counts: vec![0; num_templates] }
    }

    fn record(&mut self, index: usize) {
        self.chosen.push(index);
        self.counts[index] += 1;
    }
}

/// Draws the epoch's template index uniformly and returns the paired
/// `(T[i], T'[i])`.
pub fn select_epoch_templates<'a, R: Rng + ?Sized>(
    templates: &'a [Template],
    aug_templates: &'a [Template],
    schedule: &mut TemplateSchedule,
    rng: &mut R,
) -> Result<(usize, &'a Template, &'a Template)> {
    check_template_sets(templates, aug_templates)?;
    if schedule.counts.len() != templates.len() {
        *schedule = TemplateSchedule::new(templates.len());
    }
    let i = rng.random_range(0..templates.len());
    schedule.record(i);
    Ok((i, &templates[i], &aug_templates[i]))
}

fn check_template_sets(templates: &[Template], aug_templates: &[Template]) -> Result<()> {
    if templates.is_empty() {
        return Err(Error::contract("empty template set"));
    }
    if templates.len() != aug_templates.len() {
        return Err(Error::contract(format!(
            "{} templates but {} augmented templates",
            templates.len(),
            aug_templates.len()
        )));
    }
    Ok(())
}

/// The `λ` each mixing point actually consumed for one sample; `None`
/// means that level was switched off.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaUse {
    pub token: Option<LambdaDraw>,
    pub sentence: Option<LambdaDraw>,
    pub label: Option<LambdaDraw>,
}

/// Which levels the per-sample forward mixes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MixLevels {
    pub token: bool,
    pub sentence: bool,
}

impl MixLevels {
    pub fn of(config: &MixupConfig) -> Self {
        if config.enable_vanilla_baseline {
            MixLevels { token: true, sentence: true }
        } else {
            MixLevels { token: config.enable_token, sentence: config.enable_sentence }
        }
    }

    pub fn any(self) -> bool {
        self.token || self.sentence
    }
}

/// Records the mixed forward for one `(p, p')` pair and returns its loss.
///
/// With token mixing off, `E_p` alone is fed through the encoder at the
/// pair's longer length (padding invisible). With sentence mixing off, the
/// hidden vector at `p`'s `[MASK]` is scored against `p`'s label.
pub fn mixed_loss_on_tape(
    tape: &mut Tape,
    pv: &ParamVars,
    p: &Prompt,
    p_aug: &Prompt,
    lambda: LambdaDraw,
    levels: MixLevels,
) -> Result<(Var, LambdaUse)> {
    let num_labels = pv.config().num_labels;
    let len = p.len().max(p_aug.len());
    let e_p = embed_on_tape(tape, pv, p)?;
    let e_p = tape.pad_rows(e_p, len)?;
    let (input, keys) = if levels.token {
        let e_a = embed_on_tape(tape, pv, p_aug)?;
        let e_a = tape.pad_rows(e_a, len)?;
        let mixed = tape.mix(e_p, e_a, lambda.value)?;
        (mixed, merge_masks(p.attention(), p_aug.attention(), len, lambda.value))
    } else {
        let mut keys = p.attention().to_vec();
        keys.resize(len, false);
        (e_p, keys)
    };
    let hidden = encode_on_tape(tape, pv, input, &AttentionMask::from_keys(&keys))?;
    let y_p = one_hot(p.label(), num_labels)?;

    let (h, target) = if levels.sentence {
        let (h_p, h_a) = extract_on_tape(tape, hidden, p.mask_pos(), p_aug.mask_pos())?;
        let h = tape.mix(h_p, h_a, lambda.value)?;
        let y_a = one_hot(p_aug.label(), num_labels)?;
        (h, crate::mixup::label_mixup(&y_p, &y_a, lambda.value)?)
    } else {
        (extract_on_tape(tape, hidden, p.mask_pos(), p.mask_pos())?.0, y_p)
    };
    let (_, loss) = head_and_loss_on_tape(tape, pv, h, &target)?;
    let used = LambdaUse {
        token: levels.token.then_some(lambda),
        sentence: levels.sentence.then_some(lambda),
        label: levels.sentence.then_some(lambda),
    };
    Ok((loss, used))
}

/// Single-prompt loss with no mixing anywhere: embed, encode, read
/// `[MASK]`, cross-entropy against the one-hot label.
pub fn plain_loss_on_tape(tape: &mut Tape, pv: &ParamVars, p: &Prompt) -> Result<Var> {
    let e = embed_on_tape(tape, pv, p)?;
    let hidden = encode_on_tape(tape, pv, e, &AttentionMask::from_keys(p.attention()))?;
    let (h, _) = extract_on_tape(tape, hidden, p.mask_pos(), p.mask_pos())?;
    let y = one_hot(p.label(), pv.config().num_labels)?;
    Ok(head_and_loss_on_tape(tape, pv, h, &y)?.1)
}

/// A sample of an optimizer step, tagged with its index in the training set.
#[derive(Clone, Debug)]
pub struct StepSample {
    pub index: usize,
    pub pair: AugmentedPair,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    /// Mean per-sample loss before the update.
    pub loss: f64,
    pub lambda_mean: f64,
    pub grad_norm: f64,
    pub lambdas: Vec<LambdaUse>,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub template_index: usize,
    pub lambda_mean: f64,
    pub loss: f64,
}

/// Parameters, optimizer state and configuration for one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    params: ModelParams,
    adam: Adam,
    config: TrainingConfig,
    mixup: MixupConfig,
    vocab: Vocab,
}

impl Trainer {
    pub fn new(params: ModelParams, config: TrainingConfig, mixup: MixupConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        mixup.validate()?;
        if vocab.len() != params.config().vocab_size {
            return Err(Error::contract(format!(
                "vocab has {} tokens, model expects {}",
                vocab.len(),
                params.config().vocab_size
            )));
        }
        let adam = Adam::new(config.adam(), params.tensors());
        Ok(Trainer { params, adam, config, mixup, vocab })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    pub fn levels(&self) -> MixLevels {
        MixLevels::of(&self.mixup)
    }

    fn prompts(&self, s: &StepSample, t: &Template, t_aug: &Template) -> Result<(Prompt, Prompt)> {
        let name = |e: Error| Error::Contract(format!("sample {}: {e}", s.index));
        let p = build_prompt(&s.pair.original.tokens, t, s.pair.original.label, &self.vocab).map_err(name)?;
        let pa = build_prompt(&s.pair.augmented.tokens, t_aug, s.pair.augmented.label, &self.vocab).map_err(name)?;
        let limit = self.config.max_seq_length.min(self.params.config().max_len);
        for q in [&p, &pa] {
            if q.len() > limit {
                return Err(Error::Contract(format!(
                    "sample {}: prompt of {} tokens overflows the {limit}-token limit",
                    s.index,
                    q.len()
                )));
            }
        }
        Ok((p, pa))
    }

    /// Sum of per-sample loss gradients over one micro-batch, plus the
    /// per-sample losses.
    pub fn micro_batch(
        &self,
        samples: &[StepSample],
        t: &Template,
        t_aug: &Template,
        lambdas: &[LambdaDraw],
    ) -> Result<(Vec<Tensor>, Vec<f64>, Vec<LambdaUse>)> {
        let levels = self.levels();
        let mut tape = Tape::new();
        let pv = self.params.register(&mut tape);
        let mut losses = Vec::with_capacity(samples.len());
        let mut used = Vec::with_capacity(samples.len());
        let mut total: Option<Var> = None;
        for (s, &lambda) in samples.iter().zip(lambdas) {
            let (p, pa) = self.prompts(s, t, t_aug)?;
            let (loss, u) = mixed_loss_on_tape(&mut tape, &pv, &p, &pa, lambda, levels)
                .map_err(|e| Error::Contract(format!("sample {}: {e}", s.index)))?;
            losses.push(tape.value(loss).item()?);
            used.push(u);
            total = Some(match total {
                None => loss,
                Some(acc) => tape.add(acc, loss)?,
            });
        }
        let total = total.ok_or_else(|| Error::contract("empty micro-batch"))?;
        let grads = tape.backward(total)?;
        Ok((grads.params(), losses, used))
    }

    /// Draws the ratios for `n` samples under the configured mode.
    pub fn draw_lambdas<R: Rng + ?Sized>(&self, n: usize, step: u64, rng: &mut R) -> Result<Vec<LambdaDraw>> {
        if !self.levels().any() {
            return Ok(vec![LambdaDraw::fixed(1.0, step); n]);
        }
        match self.config.lambda_mode {
            LambdaMode::PerSample => {
                (0..n).map(|_| Ok(LambdaDraw { value: sample_lambda(self.mixup.alpha, rng)?, step })).collect()
            }
            LambdaMode::PerBatch => {
                let l = LambdaDraw { value: sample_lambda(self.mixup.alpha, rng)?, step };
                Ok(vec![l; n])
            }
        }
    }

    /// Gradient of the mean per-sample loss over `batch` (split into
    /// micro-batches of `batch_size`), along with the report fields.
    pub fn batch_gradient(
        &self,
        batch: &[StepSample],
        t: &Template,
        t_aug: &Template,
        lambdas: &[LambdaDraw],
    ) -> Result<(Vec<Tensor>, StepReport)> {
        if batch.is_empty() {
            return Err(Error::contract("train_step on an empty batch"));
        }
        if lambdas.len() != batch.len() {
            return Err(Error::shape("one λ per sample required"));
        }
        let mut sum: Vec<Tensor> = self.params.tensors().iter().map(|p| Tensor::zeros(p.shape())).collect();
        let mut losses = Vec::with_capacity(batch.len());
        let mut used = Vec::with_capacity(batch.len());
        for (chunk, lam) in batch.chunks(self.config.batch_size).zip(lambdas.chunks(self.config.batch_size)) {
            let (g, l, u) = self.micro_batch(chunk, t, t_aug, lam)?;
            for (acc, gi) in sum.iter_mut().zip(&g) {
                for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                    *a += b;
                }
            }
            losses.extend(l);
            used.extend(u);
        }
        let n = batch.len() as f64;
        let mean: Vec<Tensor> = sum.iter().map(|g| g.scale(1.0 / n)).collect::<Result<_>>()?;
        let report = StepReport {
            loss: losses.iter().sum::<f64>() / n,
            lambda_mean: lambdas.iter().map(|l| l.value).sum::<f64>() / n,
            grad_norm: global_norm(&mean),
            lambdas: used,
        };
        Ok((mean, report))
    }

    /// One optimizer step over `batch` using templates `(t, t_aug)`.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        batch: &[StepSample],
        t: &Template,
        t_aug: &Template,
        rng: &mut R,
    ) -> Result<StepReport> {
        let step = self.adam.steps() + 1;
        let mut lambdas = Vec::with_capacity(batch.len());
        for chunk in batch.chunks(self.config.batch_size) {
            lambdas.extend(self.draw_lambdas(chunk.len(), step, rng)?);
        }
        self.train_step_with(batch, t, t_aug, &lambdas)
    }

    /// [`Trainer::train_step`] with caller-supplied ratios.
    pub fn train_step_with(
        &mut self,
        batch: &[StepSample],
        t: &Template,
        t_aug: &Template,
        lambdas: &[LambdaDraw],
    ) -> Result<StepReport> {
        let (grads, report) = self.batch_gradient(batch, t, t_aug, lambdas)?;
        let clipped = clip_global_norm(&grads, self.config.max_grad_norm);
        self.adam.step(self.params.tensors_mut(), &clipped)?;
        Ok(report)
    }
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<LogRecord>,
    pub schedule: TemplateSchedule,
}

/// Runs the full loop until `max_steps` optimizer steps.
///
/// `augmented[i]` must hold the augmentations of `data[i]`; `aug_templates[i]`
/// pairs with `templates[i]`.
pub fn train(
    data: &[Example],
    augmented: &[AugmentedSample],
    templates: &[Template],
    aug_templates: &[Template],
    params: ModelParams,
    mixup: &MixupConfig,
    config: &TrainingConfig,
    vocab: &Vocab,
) -> Result<TrainOutcome> {
    check_template_sets(templates, aug_templates)?;
    if data.len() != augmented.len() {
        return Err(Error::contract(format!("{} samples but {} augmented samples", data.len(), augmented.len())));
    }
    if let Some(i) = data.iter().zip(augmented).position(|(d, a)| *d != a.original) {
        return Err(Error::contract(format!("augmented sample {i} does not match original {i}")));
    }
    if data.is_empty() {
        return Err(Error::contract("empty training set"));
    }
    let mut trainer = Trainer::new(params, config.clone(), mixup.clone(), vocab.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(TRAIN_STREAM);
    let mut schedule = TemplateSchedule::new(templates.len());
    let mut history = Vec::with_capacity(config.max_steps);
    let mut epoch = 0;

    while history.len() < config.max_steps {
        let (ti, t, t_aug) = if mixup.enable_template {
            select_epoch_templates(templates, aug_templates, &mut schedule, &mut rng)?
        } else {
            schedule.record(0);
            (0, &templates[0], &aug_templates[0])
        };
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let samples: Vec<StepSample> = order
            .iter()
            .map(|&i| {
                let pair = if mixup.enable_vanilla_baseline {
                    let j = rng.random_range(0..data.len());
                    partner_pair(&data[i], &data[j])
                } else {
                    augmented[i].pick(config.preserving_flipping_ratio, &mut rng)
                };
                StepSample { index: i, pair }
            })
            .collect();
        for batch in samples.chunks(config.samples_per_step()) {
            if history.len() >= config.max_steps {
                break;
            }
            let report = trainer.train_step(batch, t, t_aug, &mut rng)?;
            history.push(LogRecord {
                step: history.len() + 1,
                epoch,
                template_index: ti,
                lambda_mean: report.lambda_mean,
                loss: report.loss,
            });
        }
        epoch += 1;
    }
    Ok(TrainOutcome { params: trainer.into_params(), history, schedule })
}

/// Vanilla Mixup partner: another training sample in the augmented slot.
fn partner_pair(original: &Example, partner: &Example) -> AugmentedPair {
    let mode = if original.label == partner.label { AugMode::Preserving } else { AugMode::Flipping };
    AugmentedPair { original: original.clone(), augmented: partner.clone(), mode }
}

pub fn history_to_jsonl(history: &[LogRecord]) -> Result<String> {
    let mut out = String::new();
    for r in history {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}
