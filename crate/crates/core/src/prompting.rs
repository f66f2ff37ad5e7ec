//! Vocabulary, tokenizer, templates, verbalizer and prompt assembly.
//!
//! A prompt is the input text followed by an instantiated template whose
//! single `[MASK]` slot the model fills. Input-text tokens carry segment 0,
//! template tokens segment 1.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const MASK: &str = "[MASK]";
pub const UNK: &str = "[UNK]";
/// Input-text slot in a template pattern.
pub const PLACEHOLDER: &str = "{x}";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Closed vocabulary. Line `i` of a vocab file is the token with id `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: BTreeMap<String, TokenId>,
    pad: TokenId,
    mask: TokenId,
    unk: TokenId,
}

impl Vocab {
    /// `[PAD]`, `[MASK]`, `[UNK]` at ids 0, 1, 2 followed by `words`
    /// (lower-cased, duplicates dropped).
    pub fn with_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> = vec![PAD.into(), MASK.into(), UNK.into()];
        for w in words {
            let w = normalize(w.as_ref());
            if !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        Vocab::from_tokens(tokens)
    }

    /// Builds from an id-ordered token list; the three reserved tokens must
    /// be present and every token must be unique.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut ids = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::parse(format!("vocab line {i}: bad token {t:?}")));
            }
            if ids.insert(t.clone(), TokenId(i as u32)).is_some() {
                return Err(Error::parse(format!("vocab token {t:?} appears twice")));
            }
        }
        let reserved = |name: &str| {
            ids.get(name).copied().ok_or_else(|| Error::parse(format!("vocab lacks reserved token {name}")))
        };
        let (pad, mask, unk) = (reserved(PAD)?, reserved(MASK)?, reserved(UNK)?);
        Ok(Vocab { tokens, ids, pad, mask, unk })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Vocab::from_tokens(text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect())
    }

    /// One token per line.
    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad(&self) -> TokenId {
        self.pad
    }

    pub fn mask(&self) -> TokenId {
        self.mask
    }

    pub fn unk(&self) -> TokenId {
        self.unk
    }

    /// Id of `word`, or `[UNK]`.
    pub fn id(&self, word: &str) -> TokenId {
        self.get(word).unwrap_or(self.unk)
    }

    /// Id of `word` if it is in the vocabulary.
    pub fn get(&self, word: &str) -> Option<TokenId> {
        self.ids.get(word).or_else(|| self.ids.get(&normalize(word))).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id.index()).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&i| self.token(i).unwrap_or(UNK)).collect::<Vec<_>>().join(" ")
    }
}

fn normalize(word: &str) -> String {
    if is_special(word) {
        word.to_string()
    } else {
        word.to_lowercase()
    }
}

fn is_special(word: &str) -> bool {
    matches!(word, PAD | MASK | UNK | PLACEHOLDER)
}

/// Whitespace split, then every ASCII punctuation character becomes its
/// own word. `[MASK]`, `[PAD]`, `[UNK]` and `{x}` survive intact.
/// Words are lower-cased.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut rest = chunk;
        while !rest.is_empty() {
            if let Some(special) = [MASK, PAD, UNK, PLACEHOLDER].iter().find(|s| rest.starts_with(**s)) {
                out.push(special.to_string());
                rest = &rest[special.len()..];
                continue;
            }
            let c = rest.chars().next().expect("non-empty");
            if c.is_ascii_punctuation() {
                out.push(c.to_string());
                rest = &rest[1..];
            } else {
                let end = rest
                    .char_indices()
                    .find(|&(i, ch)| i > 0 && (ch.is_ascii_punctuation()))
                    .map_or(rest.len(), |(i, _)| i);
                out.push(rest[..end].to_lowercase());
                rest = &rest[end..];
            }
        }
    }
    out
}

/// Splits `text` into words and maps each to its id; unknown words become
/// `[UNK]`.
pub fn tokenize(text: &str, vocab: &Vocab) -> Result<Vec<TokenId>> {
    if vocab.is_empty() {
        return Err(Error::contract("tokenize with an empty vocabulary"));
    }
    let words = split_words(text);
    if words.is_empty() {
        return Err(Error::contract("tokenize: empty text"));
    }
    Ok(words.iter().map(|w| vocab.id(w)).collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Piece {
    Word(String),
    Placeholder,
    Mask,
}

/// Cloze pattern with exactly one `{x}` slot and exactly one `[MASK]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Template {
    id: usize,
    pieces: Vec<Piece>,
}

impl Template {
    pub fn parse(id: usize, pattern: &str) -> Result<Self> {
        let pieces = split_words(pattern)
            .into_iter()
            .map(|w| match w.as_str() {
                PLACEHOLDER => Piece::Placeholder,
                MASK => Piece::Mask,
                _ => Piece::Word(w),
            })
            .collect();
        Template::from_pieces(id, pieces)
    }

    pub fn from_pieces(id: usize, pieces: Vec<Piece>) -> Result<Self> {
        let masks = pieces.iter().filter(|p| **p == Piece::Mask).count();
        let slots = pieces.iter().filter(|p| **p == Piece::Placeholder).count();
        if masks != 1 || slots != 1 {
            return Err(Error::parse(format!(
                "template {id} needs exactly one {MASK} and one {PLACEHOLDER}, found {masks} and {slots}"
            )));
        }
        Ok(Template { id, pieces })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let words: Vec<&str> = self
            .pieces
            .iter()
            .map(|p| match p {
                Piece::Word(w) => w.as_str(),
                Piece::Placeholder => PLACEHOLDER,
                Piece::Mask => MASK,
            })
            .collect();
        f.write_str(&words.join(" "))
    }
}

/// One template per non-empty line; ids follow line order.
pub fn parse_templates(text: &str) -> Result<Vec<Template>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .enumerate()
        .map(|(i, l)| Template::parse(i, l))
        .collect()
}

pub fn templates_to_file_string(templates: &[Template]) -> String {
    templates.iter().map(|t| format!("{t}\n")).collect()
}

/// Injective map from label words to labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Verbalizer {
    to_label: BTreeMap<TokenId, usize>,
    to_word: BTreeMap<usize, TokenId>,
}

impl Verbalizer {
    pub fn new(pairs: &[(TokenId, usize)]) -> Result<Self> {
        let mut to_label = BTreeMap::new();
        let mut to_word = BTreeMap::new();
        for &(w, l) in pairs {
            if to_label.insert(w, l).is_some() {
                return Err(Error::contract(format!("verbalizer word {w:?} listed twice")));
            }
            if to_word.insert(l, w).is_some() {
                return Err(Error::contract(format!("verbalizer not injective: label {l} has two words")));
            }
        }
        Ok(Verbalizer { to_label, to_word })
    }

    /// Label `i` is verbalized by `words[i]`.
    pub fn from_words(words: &[&str], vocab: &Vocab) -> Result<Self> {
        let pairs = words
            .iter()
            .enumerate()
            .map(|(l, w)| {
                vocab.get(w).map(|id| (id, l)).ok_or_else(|| Error::Unknown(format!("label word {w:?} not in vocab")))
            })
            .collect::<Result<Vec<_>>>()?;
        Verbalizer::new(&pairs)
    }

    pub fn verbalize(&self, word: TokenId) -> Result<usize> {
        self.to_label.get(&word).copied().ok_or_else(|| Error::Unknown(format!("word {word:?} is not a label word")))
    }

    pub fn label_word(&self, label: usize) -> Option<TokenId> {
        self.to_word.get(&label).copied()
    }

    pub fn num_labels(&self) -> usize {
        self.to_label.len()
    }
}

/// A labeled input text `(x, y)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<TokenId>,
    pub label: usize,
}

impl Example {
    pub fn new(tokens: Vec<TokenId>, label: usize) -> Self {
        Example { tokens, label }
    }
}

/// Input text plus instantiated template.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    tokens: Vec<TokenId>,
    segments: Vec<u8>,
    mask_pos: usize,
    attention: Vec<bool>,
    label: usize,
}

impl Prompt {
    /// Checks the single-`[MASK]` invariant against `mask_id`.
    pub fn new(tokens: Vec<TokenId>, segments: Vec<u8>, mask_id: TokenId, label: usize) -> Result<Self> {
        if tokens.len() != segments.len() {
            return Err(Error::shape("prompt tokens and segments differ in length"));
        }
        let masks: Vec<usize> = tokens.iter().enumerate().filter(|(_, &t)| t == mask_id).map(|(i, _)| i).collect();
        let [mask_pos] = masks[..] else {
            return Err(Error::contract(format!("prompt has {} [MASK] tokens", masks.len())));
        };
        let attention = vec![true; tokens.len()];
        Ok(Prompt { tokens, segments, mask_pos, attention, label })
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn segments(&self) -> &[u8] {
        &self.segments
    }

    pub fn mask_pos(&self) -> usize {
        self.mask_pos
    }

    pub fn attention(&self) -> &[bool] {
        &self.attention
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// `x` followed by the template's words, with `x` substituted at `{x}`.
///
/// ```
/// use mixpro::prompting::{build_prompt, tokenize, Template, Vocab};
///
/// let vocab = Vocab::with_words("this movie is amazing . the feedback".split(' ')).unwrap();
/// let x = tokenize("This movie is amazing .", &vocab).unwrap();
/// let t = Template::parse(0, "{x} The feedback is [MASK] .").unwrap();
/// let p = build_prompt(&x, &t, 1, &vocab).unwrap();
/// assert_eq!(p.mask_pos(), x.len() + 3);
/// ```
pub fn build_prompt(x: &[TokenId], template: &Template, label: usize, vocab: &Vocab) -> Result<Prompt> {
    if x.is_empty() {
        return Err(Error::contract("build_prompt: empty input text"));
    }
    if let Some(&bad) = x.iter().find(|&&t| t == vocab.mask()) {
        return Err(Error::contract(format!("input text already contains {MASK} ({bad:?})")));
    }
    let mut tokens = Vec::with_capacity(x.len() + template.pieces.len());
    let mut segments = Vec::with_capacity(tokens.capacity());
    for piece in &template.pieces {
        match piece {
            Piece::Placeholder => {
                tokens.extend_from_slice(x);
                segments.extend(std::iter::repeat_n(0, x.len()));
            }
            Piece::Mask => {
                tokens.push(vocab.mask());
                segments.push(1);
            }
            Piece::Word(w) => {
                tokens.push(vocab.id(w));
                segments.push(1);
            }
        }
    }
    Prompt::new(tokens, segments, vocab.mask(), label)
}

pub fn verbalize(word: TokenId, verbalizer: &Verbalizer) -> Result<usize> {
    verbalizer.verbalize(word)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::with_words("this movie is amazing . the feedback positive negative great".split(' ')).unwrap()
    }

    #[test]
    fn tokenize_known_unknown_and_mask() {
        let v = vocab();
        let ids = tokenize("This movie is amazing .", &v).unwrap();
        assert_eq!(ids.len(), 5);
        assert!(ids.iter().all(|&i| i != v.unk()));
        assert!(tokenize("this film is amazing", &v).unwrap().contains(&v.unk()));
        assert_eq!(tokenize("[MASK]", &v).unwrap(), vec![v.mask()]);
        assert!(tokenize("   ", &v).is_err());
    }

    #[test]
    fn punctuation_splits_off() {
        assert_eq!(split_words("Great,movie!"), vec!["great", ",", "movie", "!"]);
        assert_eq!(split_words("{x} is[MASK]."), vec!["{x}", "is", "[MASK]", "."]);
    }

    #[test]
    fn prompt_layout_matches_worked_example() {
        let v = vocab();
        let x = tokenize("This movie is amazing .", &v).unwrap();
        let t = Template::parse(0, "{x} The feedback is [MASK] .").unwrap();
        let p = build_prompt(&x, &t, 1, &v).unwrap();
        assert_eq!(v.decode(p.tokens()), "this movie is amazing . the feedback is [MASK] .");
        assert_eq!(p.mask_pos(), x.len() + 3);
        assert_eq!(p.segments(), &[0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
        assert_eq!(p.tokens()[p.mask_pos()], v.mask());
        assert_eq!(p, build_prompt(&x, &t, 1, &v).unwrap());
    }

    #[test]
    fn bad_templates_and_empty_input() {
        let v = vocab();
        assert!(Template::parse(0, "{x} is [MASK] [MASK]").is_err());
        assert!(Template::parse(0, "the feedback is [MASK]").is_err());
        assert!(Template::parse(0, "{x} {x} [MASK]").is_err());
        let t = Template::parse(0, "{x} is [MASK]").unwrap();
        assert!(build_prompt(&[], &t, 0, &v).is_err());
    }

    #[test]
    fn verbalizer_maps_words_and_rejects_others() {
        let v = vocab();
        let verb = Verbalizer::from_words(&["negative", "positive"], &v).unwrap();
        assert_eq!(verbalize(v.id("positive"), &verb).unwrap(), 1);
        assert_eq!(verbalize(v.id("negative"), &verb).unwrap(), 0);
        assert!(verbalize(v.id("great"), &verb).is_err());
        let p = v.id("positive");
        assert!(Verbalizer::new(&[(p, 0), (v.id("great"), 0)]).is_err());
    }

    #[test]
    fn template_file_round_trip() {
        let text = "{x} The feedback is [MASK] .\n\n{x} It was [MASK] .\n";
        let ts = parse_templates(text).unwrap();
        assert_eq!(ts.len(), 2);
        assert_eq!(ts[1].id(), 1);
        assert_eq!(parse_templates(&templates_to_file_string(&ts)).unwrap(), ts);
    }

    #[test]
    fn vocab_file_round_trip_and_reserved_ids() {
        let v = vocab();
        assert_eq!((v.pad(), v.mask(), v.unk()), (TokenId(0), TokenId(1), TokenId(2)));
        assert_eq!(Vocab::parse(&v.to_file_string()).unwrap(), v);
        assert!(Vocab::parse("a\nb\n").is_err());
        assert!(Vocab::parse("[PAD]\n[MASK]\n[UNK]\na\na\n").is_err());
    }
}
