//! Label-preserving and label-flipping augmentation of inputs and
//! templates.
//!
//! Generation sits behind the [`Augmenter`] trait. The bundled
//! [`RuleAugmenter`] rewrites text with a lexicon: synonym rules keep the
//! label, antonym rules invert it. A rule key or substitute may be a
//! phrase, written with `_` between its words (`is_amazing`).

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::index;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompting::{Example, Piece, Template, TokenId, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugMode {
    Preserving,
    Flipping,
}

impl fmt::Display for AugMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AugMode::Preserving => "preserving",
            AugMode::Flipping => "flipping",
        })
    }
}

type Phrase = Vec<String>;

/// Synonym and antonym substitution tables.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LexiconRules {
    synonyms: BTreeMap<Phrase, Vec<Phrase>>,
    antonyms: BTreeMap<Phrase, Vec<Phrase>>,
}

fn phrase(word: &str) -> Phrase {
    word.split('_').filter(|w| !w.is_empty()).map(str::to_lowercase).collect()
}

impl LexiconRules {
    pub fn new() -> Self {
        LexiconRules::default()
    }

    /// Adds `word -> substitutes` to the synonym table.
    pub fn add_synonyms(&mut self, word: &str, substitutes: &[&str]) {
        add_rule(&mut self.synonyms, word, substitutes);
    }

    /// Adds `word -> substitutes` to the antonym table.
    pub fn add_antonyms(&mut self, word: &str, substitutes: &[&str]) {
        add_rule(&mut self.antonyms, word, substitutes);
    }

    /// Lines of the form `syn <word> <word>...` or `ant <word> <word>...`;
    /// the first word is the key, the rest its substitutes. Blank lines and
    /// `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rules = LexiconRules::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [kind, key, subs @ ..] = &fields[..] else {
                return Err(Error::parse(format!("rules line {}: {line:?}", n + 1)));
            };
            if subs.is_empty() {
                return Err(Error::parse(format!("rules line {}: no substitutes", n + 1)));
            }
            match *kind {
                "syn" => rules.add_synonyms(key, subs),
                "ant" => rules.add_antonyms(key, subs),
                other => return Err(Error::parse(format!("rules line {}: unknown kind {other:?}", n + 1))),
            }
        }
        Ok(rules)
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (kind, table) in [("syn", &self.synonyms), ("ant", &self.antonyms)] {
            for (key, subs) in table {
                out.push_str(kind);
                for p in std::iter::once(key).chain(subs) {
                    out.push(' ');
                    out.push_str(&p.join("_"));
                }
                out.push('\n');
            }
        }
        out
    }

    fn table(&self, mode: AugMode) -> &BTreeMap<Phrase, Vec<Phrase>> {
        match mode {
            AugMode::Preserving => &self.synonyms,
            AugMode::Flipping => &self.antonyms,
        }
    }

    /// Every word mentioned by any rule.
    pub fn words(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .synonyms
            .iter()
            .chain(&self.antonyms)
            .flat_map(|(k, subs)| std::iter::once(k).chain(subs).flatten().cloned())
            .collect();
        out.sort();
        out.dedup();
        out
    }
}

fn add_rule(table: &mut BTreeMap<Phrase, Vec<Phrase>>, word: &str, substitutes: &[&str]) {
    let entry = table.entry(phrase(word)).or_default();
    for s in substitutes {
        let p = phrase(s);
        if !p.is_empty() && !entry.contains(&p) {
            entry.push(p);
        }
    }
}

/// A rule match: `len` words starting at `start`, rewritable to any of `subs`.
struct Match<'a> {
    start: usize,
    len: usize,
    subs: &'a [Phrase],
}

/// Left-to-right, longest-key-first, non-overlapping matches.
fn find_matches<'a>(words: &[&str], table: &'a BTreeMap<Phrase, Vec<Phrase>>) -> Vec<Match<'a>> {
    let longest = table.keys().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::new();
    let mut i = 0;
    while i < words.len() {
        let hit = (1..=longest.min(words.len() - i)).rev().find_map(|len| {
            let key: Vec<String> = words[i..i + len].iter().map(|w| w.to_string()).collect();
            table.get(&key).map(|subs| Match { start: i, len, subs })
        });
        match hit {
            Some(m) => {
                i += m.len;
                out.push(m);
            }
            None => i += 1,
        }
    }
    out
}

/// Picks which matches to rewrite: all of them for flipping, a random
/// non-empty subset for preserving.
fn choose<R: Rng + ?Sized>(n: usize, mode: AugMode, rng: &mut R) -> Vec<bool> {
    if n == 0 {
        return Vec::new();
    }
    match mode {
        AugMode::Flipping => vec![true; n],
        AugMode::Preserving => {
            let mut pick: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            if !pick.contains(&true) {
                pick[rng.random_range(0..n)] = true;
            }
            pick
        }
    }
}

fn rewrite<R: Rng + ?Sized>(
    words: &[&str],
    table: &BTreeMap<Phrase, Vec<Phrase>>,
    mode: AugMode,
    rng: &mut R,
) -> Option<Vec<String>> {
    let matches = find_matches(words, table);
    if matches.is_empty() {
        return None;
    }
    let pick = choose(matches.len(), mode, rng);
    let mut out = Vec::with_capacity(words.len());
    let mut i = 0;
    for (m, chosen) in matches.iter().zip(pick) {
        out.extend(words[i..m.start].iter().map(|w| w.to_string()));
        if chosen {
            let sub = &m.subs[rng.random_range(0..m.subs.len())];
            out.extend(sub.iter().cloned());
        } else {
            out.extend(words[m.start..m.start + m.len].iter().map(|w| w.to_string()));
        }
        i = m.start + m.len;
    }
    out.extend(words[i..].iter().map(|w| w.to_string()));
    Some(out)
}

/// Rewrites input text.
///
/// `Preserving` replaces a random non-empty subset of synonym-covered
/// words (text with none comes back unchanged). `Flipping` replaces every
/// antonym-covered word and fails when there is none.
pub fn augment_text<R: Rng + ?Sized>(
    x: &[TokenId],
    mode: AugMode,
    rules: &LexiconRules,
    vocab: &Vocab,
    rng: &mut R,
) -> Result<Vec<TokenId>> {
    let words = x
        .iter()
        .map(|&t| vocab.token(t).ok_or_else(|| Error::Unknown(format!("token id {t:?}"))))
        .collect::<Result<Vec<&str>>>()?;
    match rewrite(&words, rules.table(mode), mode, rng) {
        Some(out) => out
            .iter()
            .map(|w| vocab.get(w).ok_or_else(|| Error::Unknown(format!("rule substitute {w:?} not in vocab"))))
            .collect(),
        None if mode == AugMode::Preserving => Ok(x.to_vec()),
        None => Err(Error::contract("label-flipping requested but no antonym-covered word")),
    }
}

/// Label-preserving paraphrase of a template's own words; `{x}` and
/// `[MASK]` are never touched.
pub fn augment_template<R: Rng + ?Sized>(template: &Template, rules: &LexiconRules, rng: &mut R) -> Result<Template> {
    let mut pieces = Vec::with_capacity(template.pieces().len());
    let mut run: Vec<&str> = Vec::new();
    let flush = |run: &mut Vec<&str>, pieces: &mut Vec<Piece>, rng: &mut R| {
        if run.is_empty() {
            return;
        }
        let words = rewrite(run, rules.table(AugMode::Preserving), AugMode::Preserving, rng)
            .unwrap_or_else(|| run.iter().map(|w| w.to_string()).collect());
        pieces.extend(words.into_iter().map(Piece::Word));
        run.clear();
    };
    for piece in template.pieces() {
        match piece {
            Piece::Word(w) => run.push(w),
            other => {
                flush(&mut run, &mut pieces, rng);
                pieces.push(other.clone());
            }
        }
    }
    flush(&mut run, &mut pieces, rng);
    Template::from_pieces(template.id(), pieces)
        .map_err(|e| Error::Contract(format!("template augmentation broke the pattern: {e}")))
}

/// Replaces `ceil(mask_ratio * len)` distinct positions with `mask_id` and
/// returns the masked sequence with the sorted positions.
pub fn cloze_mask<R: Rng + ?Sized>(
    tokens: &[TokenId],
    mask_ratio: f64,
    mask_id: TokenId,
    rng: &mut R,
) -> Result<(Vec<TokenId>, Vec<usize>)> {
    if tokens.is_empty() {
        return Err(Error::contract("cloze_mask on an empty sequence"));
    }
    if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
        return Err(Error::contract(format!("mask ratio must lie in (0, 1), got {mask_ratio}")));
    }
    let count = ((mask_ratio * tokens.len() as f64).ceil() as usize).min(tokens.len());
    let mut positions = index::sample(rng, tokens.len(), count).into_vec();
    positions.sort_unstable();
    let mut out = tokens.to_vec();
    for &p in &positions {
        out[p] = mask_id;
    }
    Ok((out, positions))
}

/// An original sample and one augmentation of it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedPair {
    pub original: Example,
    pub augmented: Example,
    pub mode: AugMode,
}

impl AugmentedPair {
    /// Enforces: preserving keeps the label, flipping changes it.
    pub fn new(original: Example, augmented: Example, mode: AugMode) -> Result<Self> {
        let same = original.label == augmented.label;
        match (mode, same) {
            (AugMode::Preserving, false) => Err(Error::contract("preserving pair changes the label")),
            (AugMode::Flipping, true) => Err(Error::contract("flipping pair keeps the label")),
            _ => Ok(AugmentedPair { original, augmented, mode }),
        }
    }

    /// A pair that mixes a sample with itself.
    pub fn identity(original: Example) -> Self {
        AugmentedPair { augmented: original.clone(), original, mode: AugMode::Preserving }
    }
}

/// Generator contract: prompt text in, augmented text plus label out.
pub trait Augmenter {
    fn augment(&self, example: &Example, mode: AugMode, rng: &mut dyn RngCore) -> Result<Example>;

    fn augment_template(&self, template: &Template, rng: &mut dyn RngCore) -> Result<Template>;
}

/// Lexicon-driven generator for binary tasks.
#[derive(Clone, Debug)]
pub struct RuleAugmenter {
    rules: LexiconRules,
    vocab: Vocab,
}

impl RuleAugmenter {
    pub fn new(rules: LexiconRules, vocab: Vocab) -> Self {
        RuleAugmenter { rules, vocab }
    }

    pub fn rules(&self) -> &LexiconRules {
        &self.rules
    }
}

impl Augmenter for RuleAugmenter {
    fn augment(&self, example: &Example, mode: AugMode, rng: &mut dyn RngCore) -> Result<Example> {
        let tokens = augment_text(&example.tokens, mode, &self.rules, &self.vocab, rng)?;
        let label = match mode {
            AugMode::Preserving => example.label,
            AugMode::Flipping if example.label < 2 => 1 - example.label,
            AugMode::Flipping => return Err(Error::contract("rule-based flipping supports binary labels only")),
        };
        Ok(Example::new(tokens, label))
    }

    fn augment_template(&self, template: &Template, rng: &mut dyn RngCore) -> Result<Template> {
        augment_template(template, &self.rules, rng)
    }
}

/// Pre-generated augmentations of one training sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AugmentedSample {
    pub original: Example,
    pub preserving: Example,
    /// `None` when the text has nothing to flip.
    pub flipping: Option<Example>,
}

impl AugmentedSample {
    /// The pair to train on: flipping with probability `1 - preserving_ratio`
    /// when available, otherwise preserving.
    pub fn pick<R: Rng + ?Sized>(&self, preserving_ratio: f64, rng: &mut R) -> AugmentedPair {
        let want_flip = rng.random::<f64>() >= preserving_ratio;
        match (&self.flipping, want_flip) {
            (Some(f), true) => {
                AugmentedPair { original: self.original.clone(), augmented: f.clone(), mode: AugMode::Flipping }
            }
            _ => AugmentedPair {
                original: self.original.clone(),
                augmented: self.preserving.clone(),
                mode: AugMode::Preserving,
            },
        }
    }

    pub fn pairs(&self) -> Vec<AugmentedPair> {
        let mut out = vec![AugmentedPair {
            original: self.original.clone(),
            augmented: self.preserving.clone(),
            mode: AugMode::Preserving,
        }];
        if let Some(f) = &self.flipping {
            out.push(AugmentedPair { original: self.original.clone(), augmented: f.clone(), mode: AugMode::Flipping });
        }
        out
    }
}

/// One preserving and (where possible) one flipping augmentation per sample.
pub fn augment_dataset(
    data: &[Example],
    augmenter: &dyn Augmenter,
    rng: &mut dyn RngCore,
) -> Result<Vec<AugmentedSample>> {
    data.iter()
        .map(|ex| {
            let preserving = augmenter.augment(ex, AugMode::Preserving, rng)?;
            let flipping = match augmenter.augment(ex, AugMode::Flipping, rng) {
                Ok(f) => Some(f),
                Err(Error::Contract(_)) => None,
                Err(e) => return Err(e),
            };
            Ok(AugmentedSample { original: ex.clone(), preserving, flipping })
        })
        .collect()
}

/// Paraphrases each template; index `i` of the result pairs with `i` of the input.
pub fn augment_templates(
    templates: &[Template],
    augmenter: &dyn Augmenter,
    rng: &mut dyn RngCore,
) -> Result<Vec<Template>> {
    templates.iter().map(|t| augmenter.augment_template(t, rng)).collect()
}

/// One line of the augmented-pair dump.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub orig_tokens: Vec<TokenId>,
    pub aug_tokens: Vec<TokenId>,
    pub y_p: usize,
    pub y_aug: usize,
    pub mode: AugMode,
}

impl From<&AugmentedPair> for PairRecord {
    fn from(p: &AugmentedPair) -> Self {
        PairRecord {
            orig_tokens: p.original.tokens.clone(),
            aug_tokens: p.augmented.tokens.clone(),
            y_p: p.original.label,
            y_aug: p.augmented.label,
            mode: p.mode,
        }
    }
}

pub fn pairs_to_jsonl(pairs: &[AugmentedPair]) -> Result<String> {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&serde_json::to_string(&PairRecord::from(p))?);
        out.push('\n');
    }
    Ok(out)
}

/// Reads a dump back, re-checking the label invariant on every line.
pub fn pairs_from_jsonl(text: &str) -> Result<Vec<AugmentedPair>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let r: PairRecord = serde_json::from_str(l)?;
            AugmentedPair::new(Example::new(r.orig_tokens, r.y_p), Example::new(r.aug_tokens, r.y_aug), r.mode)
        })
        .collect()
}

/// Regroups a pair dump into per-sample augmentation sets, in first-seen
/// order of the originals.
pub fn samples_from_pairs(pairs: &[AugmentedPair]) -> Result<Vec<AugmentedSample>> {
    let mut out: Vec<AugmentedSample> = Vec::new();
    let mut flips: Vec<Option<Example>> = Vec::new();
    let mut pres: Vec<Option<Example>> = Vec::new();
    for p in pairs {
        let idx = match out.iter().position(|s| s.original == p.original) {
            Some(i) => i,
            None => {
                out.push(AugmentedSample {
                    original: p.original.clone(),
                    preserving: p.original.clone(),
                    flipping: None,
                });
                flips.push(None);
                pres.push(None);
                out.len() - 1
            }
        };
        let slot = match p.mode {
            AugMode::Preserving => &mut pres[idx],
            AugMode::Flipping => &mut flips[idx],
        };
        if slot.replace(p.augmented.clone()).is_some() {
            return Err(Error::parse(format!("duplicate {} pair for one sample", p.mode)));
        }
    }
    for ((s, p), f) in out.iter_mut().zip(pres).zip(flips) {
        s.preserving = p.ok_or_else(|| Error::parse("sample without a preserving pair"))?;
        s.flipping = f;
    }
    Ok(out)
}
