//! Word-level tokenizer and vocabulary.
//!
//! Rendered prompts are split on whitespace. A leading `<i>` sentinel is
//! peeled off as its own token, as are `[`, `]` and `,`, so
//! `<3>week` becomes `<3> week` and `[time` becomes `[ time`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use thiserror::Error;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;
const FIRST_SENTINEL_ID: usize = 4;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("sentinel <{index}> needs at least {needed} sentinels, vocabulary allows {allowed}")]
    TooFewSentinels { index: usize, needed: usize, allowed: usize },
    #[error("vocabulary file is malformed: {0}")]
    Malformed(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// `Some(i)` for a bare `<i>` marker.
pub fn sentinel_index(token: &str) -> Option<usize> {
    let digits = token.strip_prefix('<')?.strip_suffix('>')?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

fn split_sentinel(piece: &str) -> Option<(&str, &str)> {
    let close = piece.find('>')?;
    let head = &piece[..=close];
    sentinel_index(head)?;
    Some((head, &piece[close + 1..]))
}

fn push_word<'a>(out: &mut Vec<&'a str>, mut word: &'a str) {
    while let Some(rest) = word.strip_prefix('[') {
        out.push("[");
        word = rest;
    }
    let mut tail = Vec::new();
    while let Some(last) = word.chars().last().filter(|c| matches!(c, ']' | ',')) {
        let cut = word.len() - last.len_utf8();
        tail.push(&word[cut..]);
        word = &word[..cut];
    }
    if !word.is_empty() {
        out.push(word);
    }
    out.extend(tail.into_iter().rev());
}

/// Splits rendered text into vocabulary tokens.
pub fn tokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for piece in text.split_whitespace() {
        match split_sentinel(piece) {
            Some((sentinel, rest)) => {
                out.push(sentinel);
                push_word(&mut out, rest);
            }
            None => push_word(&mut out, piece),
        }
    }
    out
}

/// Inverse of [`tokenize`] on rendered prompts.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut glue_next = true;
    for tok in tokens {
        let tok = tok.as_ref();
        let glue_prev = matches!(tok, "]" | ",");
        if !(glue_next || glue_prev) {
            out.push(' ');
        }
        out.push_str(tok);
        glue_next = tok == "[" || sentinel_index(tok).is_some();
    }
    out
}

/// Token/id bijection. Ids: specials, then `<0>`..`<S-1>`, then words by
/// descending frequency with lexicographic tie-break.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    n_sentinels: usize,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>, n_sentinels: usize) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self {
            tokens,
            ids,
            n_sentinels,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_sentinels(&self) -> usize {
        self.n_sentinels
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(UNK, String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).into_iter().map(|t| self.id(t)).collect()
    }

    /// Detokenized text up to the first EOS; other specials are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        let toks: Vec<&str> = ids
            .iter()
            .take_while(|&&i| i != EOS_ID)
            .filter(|&&i| i >= FIRST_SENTINEL_ID || i == UNK_ID)
            .map(|&i| self.token(i))
            .collect();
        detokenize(&toks)
    }

    /// One token per line, in id order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, VocabError> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        let specials = [PAD, BOS, EOS, UNK];
        if tokens.len() < specials.len() || tokens[..4] != specials {
            return Err(VocabError::Malformed("missing special tokens".into()));
        }
        let n_sentinels = tokens[FIRST_SENTINEL_ID..]
            .iter()
            .enumerate()
            .take_while(|(i, t)| sentinel_index(t) == Some(*i))
            .count();
        let v = Self::from_tokens(tokens, n_sentinels);
        if v.ids.len() != v.tokens.len() {
            return Err(VocabError::Malformed("duplicate token".into()));
        }
        Ok(v)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), VocabError> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|source| VocabError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, VocabError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| VocabError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }
}

/// Builds a vocabulary over rendered texts with `max_sentinels` markers.
pub fn build_vocab<'a>(
    texts: impl IntoIterator<Item = &'a str>,
    max_sentinels: usize,
) -> Result<Vocab, VocabError> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for text in texts {
        for tok in tokenize(text) {
            if let Some(index) = sentinel_index(tok) {
                if index >= max_sentinels {
                    return Err(VocabError::TooFewSentinels {
                        index,
                        needed: index + 1,
                        allowed: max_sentinels,
                    });
                }
                continue;
            }
            *counts.entry(tok).or_default() += 1;
        }
    }
    let specials = [PAD, BOS, EOS, UNK];
    for s in specials {
        counts.remove(s);
    }
    let mut words: Vec<(&str, usize)> = counts.into_iter().collect();
    // BTreeMap order is lexicographic; a stable sort keeps it for ties
    words.sort_by_key(|w| std::cmp::Reverse(w.1));
    let tokens = specials
        .iter()
        .map(|s| s.to_string())
        .chain((0..max_sentinels).map(|i| format!("<{i}>")))
        .chain(words.into_iter().map(|(w, _)| w.to_string()))
        .collect();
    Ok(Vocab::from_tokens(tokens, max_sentinels))
}
