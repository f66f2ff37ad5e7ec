//! A small sentiment-style cloze task.
//!
//! Sentences are neutral filler words with one to three polarity words
//! dropped in; the label is the majority polarity. Polarity words come in
//! synonym clusters, and positive cluster `c` is the antonym of negative
//! cluster `c`. Both splits draw from whole clusters by default. With
//! `train_heads_only` the training split sees only the first word of each
//! cluster, so the other members are learnable only through augmentation.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augmentation::LexiconRules;
use crate::error::{Error, Result};
use crate::prompting::{Example, Template, TokenId, Verbalizer, Vocab};

pub const NEGATIVE: usize = 0;
pub const POSITIVE: usize = 1;

const TEMPLATE_POOL: [&str; 6] = [
    "{x} it was [MASK] .",
    "{x} all in all , [MASK] .",
    "review : {x} verdict : [MASK]",
    "{x} in short , [MASK] .",
    "[MASK] : {x}",
    "{x} honestly , it was [MASK] !",
];

const TEMPLATE_SYNONYMS: [(&str, &[&str]); 6] = [
    ("was", &["is", "seemed"]),
    ("all_in_all", &["overall", "in_summary"]),
    ("verdict", &["rating", "opinion"]),
    ("review", &["comment"]),
    ("short", &["brief"]),
    ("honestly", &["frankly"]),
];

const LABEL_WORDS: [&str; 2] = ["negative", "positive"];

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|w| w.to_string()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    /// Positive synonym clusters; the first word of each is its head.
    pub positive: Vec<Vec<String>>,
    /// Negative clusters, index-aligned with `positive` as antonyms.
    pub negative: Vec<Vec<String>>,
    pub filler: Vec<String>,
    /// Inclusive range of filler words per sentence.
    pub filler_range: (usize, usize),
    pub train_size: usize,
    pub dev_size: usize,
    pub num_labels: usize,
    pub num_templates: usize,
    pub train_heads_only: bool,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            positive: vec![
                words(&["great", "good", "fine", "nice"]),
                words(&["amazing", "wonderful", "superb", "brilliant"]),
                words(&["loved", "enjoyed", "liked", "adored"]),
                words(&["fun", "lively", "charming", "delightful"]),
            ],
            negative: vec![
                words(&["bad", "poor", "weak", "lame"]),
                words(&["terrible", "dreadful", "horrible", "awful"]),
                words(&["hated", "loathed", "disliked", "despised"]),
                words(&["dull", "boring", "tedious", "bland"]),
            ],
            filler: words(&[
                "the", "movie", "film", "plot", "acting", "story", "cast", "music", "script", "scenes", "director",
                "a", "and", "with", "this", "some", "very", "quite", "really", "had", "of", "felt", "ending", "we",
            ]),
            filler_range: (4, 9),
            train_size: 32,
            dev_size: 256,
            num_labels: 2,
            num_templates: 3,
            train_heads_only: false,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_labels != 2 {
            return Err(Error::contract("the synthetic task has exactly two labels"));
        }
        if self.positive.is_empty() || self.negative.is_empty() {
            return Err(Error::contract("lexicon needs at least one word per class"));
        }
        if self.positive.len() != self.negative.len() {
            return Err(Error::contract("positive and negative clusters must pair up"));
        }
        if self.positive.iter().chain(&self.negative).any(Vec::is_empty) {
            return Err(Error::contract("empty polarity cluster"));
        }
        if self.filler.is_empty() || self.filler_range.0 > self.filler_range.1 {
            return Err(Error::contract("filler words and a valid length range are required"));
        }
        for (name, size) in [("train", self.train_size), ("dev", self.dev_size)] {
            if size == 0 || size % self.num_labels != 0 {
                return Err(Error::contract(format!(
                    "{name} size {size} cannot be balanced over {} labels",
                    self.num_labels
                )));
            }
        }
        if !(1..=TEMPLATE_POOL.len()).contains(&self.num_templates) {
            return Err(Error::contract(format!("num_templates must lie in 1..={}", TEMPLATE_POOL.len())));
        }
        let polar: BTreeSet<&String> = self.positive.iter().chain(&self.negative).flatten().collect();
        if let Some(w) = self.filler.iter().find(|w| polar.contains(w)) {
            return Err(Error::contract(format!("{w:?} is both filler and polarity word")));
        }
        Ok(())
    }

    pub fn positive_words(&self) -> BTreeSet<&str> {
        self.positive.iter().flatten().map(String::as_str).collect()
    }

    pub fn negative_words(&self) -> BTreeSet<&str> {
        self.negative.iter().flatten().map(String::as_str).collect()
    }
}

/// Everything a run needs from the task.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub vocab: Vocab,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub templates: Vec<Template>,
    pub rules: LexiconRules,
    pub verbalizer: Verbalizer,
}

/// Majority polarity of the lexicon words in `words`; `None` on a tie.
pub fn majority_label<'a>(words: impl IntoIterator<Item = &'a str>, spec: &SyntheticTaskSpec) -> Option<usize> {
    let (pos, neg) = (spec.positive_words(), spec.negative_words());
    let mut score = 0i64;
    for w in words {
        score += i64::from(pos.contains(w)) - i64::from(neg.contains(w));
    }
    match score {
        0 => None,
        s if s > 0 => Some(POSITIVE),
        _ => Some(NEGATIVE),
    }
}

/// The lexicon rules implied by the spec: synonyms within a cluster,
/// antonyms across aligned clusters, plus template paraphrases.
pub fn task_rules(spec: &SyntheticTaskSpec) -> LexiconRules {
    let mut rules = LexiconRules::new();
    for (pos, neg) in spec.positive.iter().zip(&spec.negative) {
        for (cluster, opposite) in [(pos, neg), (neg, pos)] {
            let opp: Vec<&str> = opposite.iter().map(String::as_str).collect();
            for w in cluster {
                let others: Vec<&str> = cluster.iter().filter(|o| *o != w).map(String::as_str).collect();
                if !others.is_empty() {
                    rules.add_synonyms(w, &others);
                }
                rules.add_antonyms(w, &opp);
            }
        }
    }
    for (key, subs) in TEMPLATE_SYNONYMS {
        rules.add_synonyms(key, subs);
    }
    rules
}

fn task_vocab(spec: &SyntheticTaskSpec, rules: &LexiconRules) -> Result<Vocab> {
    let mut all: BTreeSet<String> = rules.words().into_iter().collect();
    all.extend(spec.filler.iter().cloned());
    all.extend(spec.positive.iter().chain(&spec.negative).flatten().cloned());
    all.extend(LABEL_WORDS.iter().map(|w| w.to_string()));
    for pattern in TEMPLATE_POOL {
        all.extend(crate::prompting::split_words(pattern).into_iter().filter(|w| !w.starts_with(['[', '{'])));
    }
    Vocab::with_words(all)
}

fn sentence<R: Rng + ?Sized>(
    label: usize,
    heads_only: bool,
    spec: &SyntheticTaskSpec,
    vocab: &Vocab,
    rng: &mut R,
) -> Vec<TokenId> {
    let polar_word = |class: usize, rng: &mut R| -> String {
        let clusters = if class == POSITIVE { &spec.positive } else { &spec.negative };
        let cluster = clusters.choose(rng).expect("validated non-empty");
        if heads_only {
            cluster[0].clone()
        } else {
            cluster.choose(rng).expect("non-empty").clone()
        }
    };
    let k = rng.random_range(1..=3usize);
    let mut polar: Vec<String> = (0..k).map(|_| polar_word(label, rng)).collect();
    if k == 3 && rng.random_bool(0.5) {
        polar[2] = polar_word(1 - label, rng);
    }
    let n_fill = rng.random_range(spec.filler_range.0..=spec.filler_range.1);
    let mut out: Vec<String> = (0..n_fill).map(|_| spec.filler.choose(rng).expect("non-empty").clone()).collect();
    for w in polar {
        let at = rng.random_range(0..=out.len());
        out.insert(at, w);
    }
    out.iter().map(|w| vocab.id(w)).collect()
}

fn split<R: Rng + ?Sized>(
    size: usize,
    heads_only: bool,
    spec: &SyntheticTaskSpec,
    vocab: &Vocab,
    rng: &mut R,
) -> Vec<Example> {
    let per_class = size / spec.num_labels;
    let mut labels: Vec<usize> = (0..spec.num_labels).flat_map(|c| std::iter::repeat_n(c, per_class)).collect();
    rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), rng);
    labels.into_iter().map(|y| Example::new(sentence(y, heads_only, spec, vocab, rng), y)).collect()
}

/// Builds the task deterministically from `seed`.
pub fn gen_synthetic_task(spec: &SyntheticTaskSpec, seed: u64) -> Result<SyntheticTask> {
    spec.validate()?;
    let rules = task_rules(spec);
    let vocab = task_vocab(spec, &rules)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = split(spec.train_size, spec.train_heads_only, spec, &vocab, &mut rng);
    let dev = split(spec.dev_size, false, spec, &vocab, &mut rng);
    let templates = TEMPLATE_POOL[..spec.num_templates]
        .iter()
        .enumerate()
        .map(|(i, p)| Template::parse(i, p))
        .collect::<Result<Vec<_>>>()?;
    let verbalizer = Verbalizer::from_words(&LABEL_WORDS, &vocab)?;
    Ok(SyntheticTask { vocab, train, dev, templates, rules, verbalizer })
}
