//! Single-model and ensemble inference with forward-pass accounting.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::autodiff::log_softmax;
use crate::error::{Error, Result};
use crate::model::{predict, ModelParams};
use crate::prompting::{build_prompt, Example, Template, Verbalizer, Vocab};

/// Counts encoder forward passes.
#[derive(Debug, Default)]
pub struct ForwardCounter(AtomicUsize);

impl ForwardCounter {
    pub fn new() -> Self {
        ForwardCounter::default()
    }

    pub fn get(&self) -> usize {
        self.0.load(Ordering::Relaxed)
    }

    fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }
}

/// Class probabilities for one prompt, counting the pass.
pub fn probabilities(
    params: &ModelParams,
    example: &Example,
    template: &Template,
    vocab: &Vocab,
    counter: &ForwardCounter,
) -> Result<Vec<f64>> {
    let prompt = build_prompt(&example.tokens, template, example.label, vocab)?;
    let trace = predict(&prompt, params)?;
    counter.bump();
    Ok(log_softmax(trace.logits.data()).1)
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub examples: usize,
    pub forward_passes: usize,
}

/// Accuracy and macro-F1 from gold and predicted labels. Classes that occur
/// in neither list are left out of the F1 average.
pub fn score(gold: &[usize], predicted: &[usize], num_labels: usize) -> Result<(f64, f64)> {
    if gold.is_empty() || gold.len() != predicted.len() {
        return Err(Error::contract("score needs equally long, non-empty label lists"));
    }
    let correct = gold.iter().zip(predicted).filter(|(g, p)| g == p).count();
    let mut f1s = Vec::new();
    for c in 0..num_labels {
        let tp = gold.iter().zip(predicted).filter(|&(&g, &p)| g == c && p == c).count();
        let fp = gold.iter().zip(predicted).filter(|&(&g, &p)| g != c && p == c).count();
        let fn_ = gold.iter().zip(predicted).filter(|&(&g, &p)| g == c && p != c).count();
        let denom = 2 * tp + fp + fn_;
        if denom > 0 {
            f1s.push(2.0 * tp as f64 / denom as f64);
        }
    }
    let macro_f1 = f1s.iter().sum::<f64>() / f1s.len() as f64;
    Ok((correct as f64 / gold.len() as f64, macro_f1))
}

/// Single-model, single-template inference: one forward pass per example.
pub fn evaluate(
    params: &ModelParams,
    dataset: &[Example],
    template: &Template,
    verbalizer: &Verbalizer,
    vocab: &Vocab,
) -> Result<Metrics> {
    if dataset.is_empty() {
        return Err(Error::contract("evaluate on an empty dataset"));
    }
    let num_labels = verbalizer.num_labels();
    if params.config().num_labels != num_labels {
        return Err(Error::contract(format!(
            "model has {} labels, verbalizer {num_labels}",
            params.config().num_labels
        )));
    }
    let counter = ForwardCounter::new();
    let mut predicted = Vec::with_capacity(dataset.len());
    for ex in dataset {
        predicted.push(argmax(&probabilities(params, ex, template, vocab, &counter)?));
    }
    let gold: Vec<usize> = dataset.iter().map(|e| e.label).collect();
    let (accuracy, macro_f1) = score(&gold, &predicted, num_labels)?;
    Ok(Metrics { accuracy, macro_f1, examples: dataset.len(), forward_passes: counter.get() })
}

/// PET-style ensemble: model `i` reads the prompt built with template `i`;
/// the class probabilities are averaged.
pub fn ensemble_predict(
    models: &[ModelParams],
    templates: &[Template],
    example: &Example,
    vocab: &Vocab,
    counter: &ForwardCounter,
) -> Result<Vec<f64>> {
    if models.is_empty() || models.len() != templates.len() {
        return Err(Error::contract("ensemble needs one template per model"));
    }
    let mut avg: Vec<f64> = Vec::new();
    for (m, t) in models.iter().zip(templates) {
        let p = probabilities(m, example, t, vocab, counter)?;
        if avg.is_empty() {
            avg = vec![0.0; p.len()];
        }
        for (a, v) in avg.iter_mut().zip(&p) {
            *a += v / models.len() as f64;
        }
    }
    Ok(avg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceCost {
    pub single_passes: usize,
    pub ensemble_passes: usize,
    pub models: usize,
    /// `single_passes / ensemble_passes`.
    pub ratio: f64,
}

/// Counts forward passes of one model against an `n`-model ensemble over
/// the same dataset.
pub fn inference_cost_check(
    single: &ModelParams,
    ensemble: &[ModelParams],
    templates: &[Template],
    dataset: &[Example],
    vocab: &Vocab,
) -> Result<InferenceCost> {
    if dataset.is_empty() || templates.is_empty() {
        return Err(Error::contract("inference cost check needs data and templates"));
    }
    let single_counter = ForwardCounter::new();
    let ensemble_counter = ForwardCounter::new();
    for ex in dataset {
        probabilities(single, ex, &templates[0], vocab, &single_counter)?;
        ensemble_predict(ensemble, templates, ex, vocab, &ensemble_counter)?;
    }
    Ok(InferenceCost {
        single_passes: single_counter.get(),
        ensemble_passes: ensemble_counter.get(),
        models: ensemble.len(),
        ratio: single_counter.get() as f64 / ensemble_counter.get() as f64,
    })
}
