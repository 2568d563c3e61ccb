//! Prompt rendering and response parsing.
//!
//! Two prompt layouts and three slot encodings. With the utterance
//! `wake me up at five am this week`:
//!
//! ```text
//! Simple:     Utterance: u Domain: d Intent: i Slots: s Arguments: a
//! Structured: Utterance: u Intent in Domain: i in d Slots with Arguments: s with a
//!
//! TagOnly:               u = wake me up ...      s = [Other Other Other Other time time date date]
//! SentinelTag:           u = <0>wake <1>me ...   s = <0>Other <1>Other ... <7>date
//! ExtractiveSentinelTag: u = <0>wake <1>me ...   s = <4>time <5>time <6>date <7>date
//! ```
//!
//! Arguments render as `[time : five am, date : this week]`, or `[]`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{derive_arguments, Argument, Example, OTHER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptStyle {
    Simple,
    Structured,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlotStyle {
    TagOnly,
    SentinelTag,
    ExtractiveSentinelTag,
}

impl SlotStyle {
    fn uses_sentinels(self) -> bool {
        !matches!(self, Self::TagOnly)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FormatSpec {
    pub prompt: PromptStyle,
    pub slots: SlotStyle,
}

impl FormatSpec {
    pub const ALL: [FormatSpec; 6] = [
        FormatSpec::new(PromptStyle::Simple, SlotStyle::TagOnly),
        FormatSpec::new(PromptStyle::Simple, SlotStyle::SentinelTag),
        FormatSpec::new(PromptStyle::Simple, SlotStyle::ExtractiveSentinelTag),
        FormatSpec::new(PromptStyle::Structured, SlotStyle::TagOnly),
        FormatSpec::new(PromptStyle::Structured, SlotStyle::SentinelTag),
        FormatSpec::new(PromptStyle::Structured, SlotStyle::ExtractiveSentinelTag),
    ];

    pub const fn new(prompt: PromptStyle, slots: SlotStyle) -> Self {
        Self { prompt, slots }
    }
}

impl Default for FormatSpec {
    fn default() -> Self {
        Self::new(PromptStyle::Structured, SlotStyle::SentinelTag)
    }
}

impl fmt::Display for FormatSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = match self.prompt {
            PromptStyle::Simple => "simple",
            PromptStyle::Structured => "structured",
        };
        let s = match self.slots {
            SlotStyle::TagOnly => "tag",
            SlotStyle::SentinelTag => "sentinel",
            SlotStyle::ExtractiveSentinelTag => "extractive",
        };
        write!(f, "{p}+{s}")
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown format {0:?}; expected e.g. structured+sentinel")]
pub struct UnknownFormat(pub String);

impl FromStr for FormatSpec {
    type Err = UnknownFormat;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || UnknownFormat(s.to_string());
        let (p, sl) = s.split_once('+').ok_or_else(err)?;
        let prompt = match p.trim().to_ascii_lowercase().as_str() {
            "simple" => PromptStyle::Simple,
            "structured" => PromptStyle::Structured,
            _ => return Err(err()),
        };
        let slots = match sl.trim().to_ascii_lowercase().as_str() {
            "tag" | "tag-only" => SlotStyle::TagOnly,
            "sentinel" | "sentinel-tag" => SlotStyle::SentinelTag,
            "extractive" | "extractive-sentinel-tag" => SlotStyle::ExtractiveSentinelTag,
            _ => return Err(err()),
        };
        Ok(Self { prompt, slots })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Training,
    Inference,
}

/// `<0>tok0 <1>tok1 ...`
pub fn sentinelize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens
        .iter()
        .enumerate()
        .map(|(i, t)| format!("<{i}>{}", t.as_ref()))
        .collect::<Vec<_>>()
        .join(" ")
}

fn render_arguments(args: &[Argument]) -> String {
    let inner: Vec<String> = args.iter().map(|a| format!("{} : {}", a.label, a.text)).collect();
    format!("[{}]", inner.join(", "))
}

fn render_slots(example: &Example, slots: SlotStyle) -> String {
    match slots {
        SlotStyle::TagOnly => format!("[{}]", example.tags.join(" ")),
        SlotStyle::SentinelTag => sentinelize(&example.tags),
        SlotStyle::ExtractiveSentinelTag => example
            .tags
            .iter()
            .enumerate()
            .filter(|(_, t)| *t != OTHER)
            .map(|(i, t)| format!("<{i}>{t}"))
            .collect::<Vec<_>>()
            .join(" "),
    }
}

fn join_nonempty(head: &str, body: &str) -> String {
    if body.is_empty() {
        head.to_string()
    } else {
        format!("{head} {body}")
    }
}

/// Renders an example. Inference output stops right after the first
/// target header and is a prefix of the training output.
pub fn render(example: &Example, spec: FormatSpec, mode: Mode) -> String {
    let utterance = if spec.slots.uses_sentinels() {
        sentinelize(&example.tokens)
    } else {
        example.utterance()
    };
    let first_header = match spec.prompt {
        PromptStyle::Simple => "Domain:",
        PromptStyle::Structured => "Intent in Domain:",
    };
    let prompt = format!("Utterance: {utterance} {first_header}");
    if mode == Mode::Inference {
        return prompt;
    }
    let slots = render_slots(example, spec.slots);
    let args = render_arguments(&example.arguments);
    match spec.prompt {
        PromptStyle::Simple => format!(
            "{prompt} {} Intent: {} {} Arguments: {args}",
            example.domain,
            example.intent,
            join_nonempty("Slots:", &slots)
        ),
        PromptStyle::Structured => format!(
            "{prompt} {} in {} {} with {args}",
            example.intent,
            example.domain,
            join_nonempty("Slots with Arguments:", &slots)
        ),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("missing field {0}")]
    MissingField(&'static str),
    #[error("slot index {0} out of range for {1} tokens")]
    IndexOutOfRange(usize, usize),
    #[error("expected {expected} tags, found {found}")]
    TagCountMismatch { expected: usize, found: usize },
    #[error("unparseable sentinel item {0:?}")]
    UnparseableSentinel(String),
}

/// Non-fatal oddities noticed while parsing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParseWarning {
    /// Index listed more than once; the last label was kept.
    DuplicateIndex(usize),
    /// Sentinel-tag response left indices unlisted; they became `Other`.
    MissingIndices(usize),
    /// Label outside the known slot inventory.
    UnknownLabel(String),
}

/// Structured prediction recovered from generated text.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Hypothesis {
    pub domain: String,
    pub intent: String,
    pub tags: Vec<String>,
    pub warnings: Vec<ParseWarning>,
}

impl Hypothesis {
    /// Empty labels and all-`Other` tags, used when parsing fails.
    pub fn placeholder(n_tokens: usize) -> Self {
        Self {
            tags: vec![OTHER.to_string(); n_tokens],
            ..Self::default()
        }
    }

    /// Slot arguments for the queried utterance tokens.
    pub fn arguments<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<Argument> {
        derive_arguments(tokens, &self.tags)
    }

    /// Adds an `UnknownLabel` warning per distinct label outside `inventory`.
    pub fn flag_unknown_labels(&mut self, inventory: &BTreeSet<String>) {
        let unknown: BTreeSet<&String> = self
            .tags
            .iter()
            .filter(|t| *t != OTHER && !inventory.contains(*t))
            .collect();
        for label in unknown {
            self.warnings.push(ParseWarning::UnknownLabel(label.clone()));
        }
    }
}

fn after<'a>(text: &'a str, header: &'static str) -> Result<&'a str, ParseError> {
    text.find(header)
        .map(|i| &text[i + header.len()..])
        .ok_or(ParseError::MissingField(header.trim_end_matches(':')))
}

fn split_field<'a>(text: &'a str, next: &'static str) -> Result<(&'a str, &'a str), ParseError> {
    text.find(next)
        .map(|i| (text[..i].trim(), &text[i + next.len()..]))
        .ok_or(ParseError::MissingField(next.trim().trim_end_matches(':')))
}

fn nonempty(value: &str, name: &'static str) -> Result<String, ParseError> {
    if value.is_empty() {
        Err(ParseError::MissingField(name))
    } else {
        Ok(value.to_string())
    }
}

/// Parses generated text (with or without the echoed prompt) into a
/// hypothesis over `n_tokens` utterance tokens.
pub fn parse_response(text: &str, spec: FormatSpec, n_tokens: usize) -> Result<Hypothesis, ParseError> {
    assert!(n_tokens >= 1, "hypotheses need at least one token");
    let (domain, intent, slot_text) = match spec.prompt {
        PromptStyle::Simple => {
            let rest = after(text, "Domain:")?;
            let (domain, rest) = split_field(rest, " Intent:")?;
            let (intent, rest) = split_field(rest, " Slots:")?;
            let slots = rest.find(" Arguments:").map_or(rest, |i| &rest[..i]);
            (nonempty(domain, "Domain")?, nonempty(intent, "Intent")?, slots)
        }
        PromptStyle::Structured => {
            let rest = after(text, "Intent in Domain:")?;
            let header = rest.find(" Slots with Arguments:");
            let (labels, slots) = match header {
                Some(i) => {
                    let slots = &rest[i + " Slots with Arguments:".len()..];
                    (&rest[..i], slots.find(" with [").map_or(slots, |j| &slots[..j]))
                }
                // extractive responses with no slots omit the slot header
                None => match rest.find(" with [") {
                    Some(j) => (&rest[..j], ""),
                    None => return Err(ParseError::MissingField("Slots with Arguments")),
                },
            };
            let (intent, domain) = labels
                .trim()
                .split_once(" in ")
                .ok_or(ParseError::MissingField("Domain"))?;
            (nonempty(domain.trim(), "Domain")?, nonempty(intent.trim(), "Intent")?, slots)
        }
    };
    let mut warnings = Vec::new();
    let tags = parse_slots(slot_text.trim(), spec.slots, n_tokens, &mut warnings)?;
    Ok(Hypothesis {
        domain,
        intent,
        tags,
        warnings,
    })
}

fn parse_sentinel_item(item: &str) -> Result<(usize, &str), ParseError> {
    let bad = || ParseError::UnparseableSentinel(item.to_string());
    let rest = item.strip_prefix('<').ok_or_else(bad)?;
    let (idx, label) = rest.split_once('>').ok_or_else(bad)?;
    let idx: usize = idx.parse().map_err(|_| bad())?;
    if label.is_empty() {
        return Err(bad());
    }
    Ok((idx, label))
}

fn parse_slots(
    text: &str,
    slots: SlotStyle,
    n_tokens: usize,
    warnings: &mut Vec<ParseWarning>,
) -> Result<Vec<String>, ParseError> {
    if slots == SlotStyle::TagOnly {
        let inner = text.strip_prefix('[').unwrap_or(text);
        let inner = inner.strip_suffix(']').unwrap_or(inner);
        let tags: Vec<String> = inner.split_whitespace().map(str::to_string).collect();
        if tags.len() != n_tokens {
            return Err(ParseError::TagCountMismatch {
                expected: n_tokens,
                found: tags.len(),
            });
        }
        return Ok(tags);
    }
    let mut listed: BTreeMap<usize, &str> = BTreeMap::new();
    for item in text.split_whitespace() {
        let (idx, label) = parse_sentinel_item(item)?;
        if idx >= n_tokens {
            return Err(ParseError::IndexOutOfRange(idx, n_tokens));
        }
        if listed.insert(idx, label).is_some() {
            warnings.push(ParseWarning::DuplicateIndex(idx));
        }
    }
    if slots == SlotStyle::SentinelTag && listed.len() < n_tokens {
        warnings.push(ParseWarning::MissingIndices(n_tokens - listed.len()));
    }
    Ok((0..n_tokens)
        .map(|i| listed.get(&i).copied().unwrap_or(OTHER).to_string())
        .collect())
}
