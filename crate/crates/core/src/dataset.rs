//! IC-SF corpora: the canonical line-delimited record format, annotation
//! validation, slot-argument derivation and a seeded toy grammar.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tag carried by tokens that are not part of any slot.
pub const OTHER: &str = "Other";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("length mismatch at line {line}: {tokens} tokens, {tags} tags")]
    LengthMismatch {
        line: usize,
        tokens: usize,
        tags: usize,
    },
    #[error("duplicate id {id:?} at line {line}")]
    DuplicateId { line: usize, id: String },
    #[error("unknown split {0:?}")]
    UnknownSplit(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(DatasetError::UnknownSplit(other.to_string())),
        }
    }
}

/// One `(slot-label, text)` pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Argument {
    pub label: String,
    pub text: String,
}

impl Argument {
    pub fn new(label: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            text: text.into(),
        }
    }
}

/// One annotated utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub id: String,
    pub tokens: Vec<String>,
    pub domain: String,
    pub intent: String,
    pub tags: Vec<String>,
    pub arguments: Vec<Argument>,
}

impl Example {
    /// Builds an example, deriving its arguments. Returns `None` when the
    /// tag and token counts differ.
    pub fn new(
        id: impl Into<String>,
        tokens: Vec<String>,
        domain: impl Into<String>,
        intent: impl Into<String>,
        tags: Vec<String>,
    ) -> Option<Self> {
        if tokens.len() != tags.len() {
            return None;
        }
        let arguments = derive_arguments(&tokens, &tags);
        Some(Self {
            id: id.into(),
            tokens,
            domain: domain.into(),
            intent: intent.into(),
            tags,
            arguments,
        })
    }

    pub fn utterance(&self) -> String {
        self.tokens.join(" ")
    }

    fn to_record(&self) -> Record {
        Record {
            id: self.id.clone(),
            domain: self.domain.clone(),
            intent: self.intent.clone(),
            tokens: self.tokens.clone(),
            tags: self.tags.clone(),
        }
    }
}

/// On-disk shape of one example. Unknown fields are ignored on read.
#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: String,
    domain: String,
    intent: String,
    tokens: Vec<String>,
    tags: Vec<String>,
}

/// Each maximal run of an identical non-`Other` tag becomes one argument
/// whose text is the space-joined run.
pub fn derive_arguments<S: AsRef<str>, T: AsRef<str>>(tokens: &[S], tags: &[T]) -> Vec<Argument> {
    debug_assert_eq!(tokens.len(), tags.len());
    let mut out = Vec::new();
    let mut i = 0;
    while i < tags.len() {
        let label = tags[i].as_ref();
        if label == OTHER {
            i += 1;
            continue;
        }
        let start = i;
        while i < tags.len() && tags[i].as_ref() == label {
            i += 1;
        }
        let text = tokens[start..i]
            .iter()
            .map(|t| t.as_ref())
            .collect::<Vec<_>>()
            .join(" ");
        out.push(Argument::new(label, text));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub examples: Vec<Example>,
    pub domains: BTreeSet<String>,
    pub intents: BTreeSet<String>,
    /// Slot labels, never containing `Other`.
    pub slot_labels: BTreeSet<String>,
}

impl Dataset {
    /// Validates the examples and computes the label inventories.
    pub fn from_examples(
        name: impl Into<String>,
        split: Split,
        examples: Vec<Example>,
    ) -> Result<Self, DatasetError> {
        let mut seen = HashSet::new();
        for (i, ex) in examples.iter().enumerate() {
            if ex.tokens.len() != ex.tags.len() {
                return Err(DatasetError::LengthMismatch {
                    line: i + 1,
                    tokens: ex.tokens.len(),
                    tags: ex.tags.len(),
                });
            }
            if !seen.insert(ex.id.as_str()) {
                return Err(DatasetError::DuplicateId {
                    line: i + 1,
                    id: ex.id.clone(),
                });
            }
        }
        let mut ds = Self {
            name: name.into(),
            split,
            examples,
            domains: BTreeSet::new(),
            intents: BTreeSet::new(),
            slot_labels: BTreeSet::new(),
        };
        ds.refresh_inventories();
        Ok(ds)
    }

    fn refresh_inventories(&mut self) {
        self.domains.clear();
        self.intents.clear();
        self.slot_labels.clear();
        for ex in &self.examples {
            self.domains.insert(ex.domain.clone());
            self.intents.insert(ex.intent.clone());
            for tag in &ex.tags {
                if tag != OTHER {
                    self.slot_labels.insert(tag.clone());
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.examples.iter().find(|e| e.id == id)
    }

    /// Longest utterance, in tokens.
    pub fn max_tokens(&self) -> usize {
        self.examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0)
    }

    /// Serializes the dataset in the canonical record format.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for ex in &self.examples {
            out.push_str(&serde_json::to_string(&ex.to_record()).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let path = path.as_ref();
        let io_err = |source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = fs::File::create(path).map_err(io_err)?;
        let mut w = BufWriter::new(file);
        w.write_all(self.to_jsonl().as_bytes()).map_err(io_err)?;
        w.flush().map_err(io_err)
    }
}

/// Parses canonical records from an in-memory string.
pub fn parse_dataset(
    name: impl Into<String>,
    split: Split,
    text: &str,
) -> Result<Dataset, DatasetError> {
    let mut examples = Vec::new();
    let mut seen = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(raw).map_err(|e| DatasetError::Malformed {
            line,
            message: e.to_string(),
        })?;
        if rec.tokens.len() != rec.tags.len() {
            return Err(DatasetError::LengthMismatch {
                line,
                tokens: rec.tokens.len(),
                tags: rec.tags.len(),
            });
        }
        if !seen.insert(rec.id.clone()) {
            return Err(DatasetError::DuplicateId { line, id: rec.id });
        }
        let ex = Example::new(rec.id, rec.tokens, rec.domain, rec.intent, rec.tags)
            .expect("lengths checked");
        examples.push(ex);
    }
    Dataset::from_examples(name, split, examples)
}

pub fn load_dataset(path: impl AsRef<Path>, split: Split) -> Result<Dataset, DatasetError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    parse_dataset(name, split, &text)
}

// ---------------------------------------------------------------------------
// Toy grammar

/// A piece of a template: literal carrier words, or a slot filled from a
/// value list.
#[derive(Clone, Copy)]
enum Piece {
    Words(&'static str),
    Slot(&'static str),
}

use Piece::{Slot, Words};

struct Production {
    domain: &'static str,
    intent: &'static str,
    pieces: &'static [Piece],
}

const PRODUCTIONS: &[Production] = &[
    Production {
        domain: "alarm",
        intent: "alarm_set",
        pieces: &[Words("create an alarm for"), Slot("time"), Slot("date")],
    },
    Production {
        domain: "alarm",
        intent: "alarm_set",
        pieces: &[Words("please wake me up at"), Slot("time"), Slot("date")],
    },
    Production {
        domain: "alarm",
        intent: "alarm_set",
        pieces: &[Words("i need an alarm at"), Slot("time"), Slot("date")],
    },
    Production {
        domain: "alarm",
        intent: "alarm_remove",
        pieces: &[Words("cancel an alarm for"), Slot("time"), Slot("date")],
    },
    Production {
        domain: "alarm",
        intent: "alarm_remove",
        pieces: &[Words("please delete the alarm at"), Slot("time"), Slot("date")],
    },
    Production {
        domain: "alarm",
        intent: "alarm_remove",
        pieces: &[Words("i do not want the alarm at"), Slot("time"), Slot("date")],
    },
    Production {
        domain: "weather",
        intent: "weather_query",
        pieces: &[Words("tell me the weather in"), Slot("place"), Slot("date")],
    },
    Production {
        domain: "weather",
        intent: "weather_query",
        pieces: &[Words("what is the weather like in"), Slot("place"), Slot("date")],
    },
    Production {
        domain: "weather",
        intent: "weather_query",
        pieces: &[Words("is it going to be sunny in"), Slot("place"), Slot("date")],
    },
    Production {
        domain: "weather",
        intent: "weather_alert",
        pieces: &[Words("warn me about the weather in"), Slot("place"), Slot("date")],
    },
    Production {
        domain: "weather",
        intent: "weather_alert",
        pieces: &[Words("send me a notice about storms in"), Slot("place"), Slot("date")],
    },
    Production {
        domain: "weather",
        intent: "weather_alert",
        pieces: &[Words("notify me when it is windy in"), Slot("place"), Slot("date")],
    },
    Production {
        domain: "music",
        intent: "music_play",
        pieces: &[Words("start the song"), Slot("song"), Words("by"), Slot("person")],
    },
    Production {
        domain: "music",
        intent: "music_play",
        pieces: &[Words("please play"), Slot("song"), Words("by"), Slot("person"), Words("now")],
    },
    Production {
        domain: "music",
        intent: "music_play",
        pieces: &[Words("i want to hear"), Slot("song"), Words("by"), Slot("person")],
    },
    Production {
        domain: "music",
        intent: "music_share",
        pieces: &[Words("forward the song"), Slot("song"), Words("to"), Slot("person")],
    },
    Production {
        domain: "music",
        intent: "music_share",
        pieces: &[Words("send the track"), Slot("song"), Words("to"), Slot("person"), Words("now")],
    },
    Production {
        domain: "music",
        intent: "music_share",
        pieces: &[Words("let"), Slot("person"), Words("listen to"), Slot("song"), Words("too")],
    },
];

fn slot_values(label: &str) -> &'static [&'static str] {
    match label {
        "time" => &[
            "five am", "seven pm", "noon", "midnight", "six thirty", "ten am", "nine pm",
            "eight in the morning",
        ],
        "date" => &[
            "today", "tomorrow", "this week", "next week", "monday", "friday", "this weekend",
            "tonight",
        ],
        "place" => &[
            "london", "paris", "boston", "tokyo", "new york", "san francisco", "the city",
            "berlin",
        ],
        "song" => &[
            "yellow submarine", "hey jude", "let it be", "purple rain", "blue moon", "yesterday",
            "wonderwall",
        ],
        "person" => &[
            "adele", "john", "mary", "the beatles", "my mom", "my sister", "prince",
        ],
        other => panic!("no value list for slot {other}"),
    }
}

fn generate_example<R: Rng>(rng: &mut R, id: String) -> Example {
    let prod = PRODUCTIONS.choose(rng).expect("non-empty grammar");
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    for piece in prod.pieces {
        match *piece {
            Words(words) => {
                for w in words.split_whitespace() {
                    tokens.push(w.to_string());
                    tags.push(OTHER.to_string());
                }
            }
            Slot(label) => {
                let value = slot_values(label).choose(rng).expect("non-empty values");
                for w in value.split_whitespace() {
                    tokens.push(w.to_string());
                    tags.push(label.to_string());
                }
            }
        }
    }
    Example::new(id, tokens, prod.domain, prod.intent, tags).expect("grammar keeps lengths equal")
}

/// Deterministic grammar corpus over three domains (alarm, weather, music),
/// two intents each and five slot labels.
pub fn synth_fixture(seed: u64, n_train: usize, n_test: usize) -> (Dataset, Dataset) {
    assert!(n_train > 0 && n_test > 0, "fixture counts must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train: Vec<Example> = (0..n_train)
        .map(|i| generate_example(&mut rng, format!("train-{i:05}")))
        .collect();
    let test: Vec<Example> = (0..n_test)
        .map(|i| generate_example(&mut rng, format!("test-{i:05}")))
        .collect();
    (
        Dataset::from_examples("fixture", Split::Train, train).expect("unique ids"),
        Dataset::from_examples("fixture", Split::Test, test).expect("unique ids"),
    )
}

/// Every label the toy grammar can produce, as `(domains, intents, slots)`.
pub fn fixture_inventory() -> (BTreeSet<String>, BTreeSet<String>, BTreeSet<String>) {
    let mut domains = BTreeSet::new();
    let mut intents = BTreeSet::new();
    let mut slots = BTreeSet::new();
    for p in PRODUCTIONS {
        domains.insert(p.domain.to_string());
        intents.insert(p.intent.to_string());
        for piece in p.pieces {
            if let Slot(label) = piece {
                slots.insert(label.to_string());
            }
        }
    }
    (domains, intents, slots)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    const TABLE1: &str = r#"{"id":"e1","domain":"alarm","intent":"alarm_set","tokens":["wake","me","up","at","five","am","this","week"],"tags":["Other","Other","Other","Other","time","time","date","date"]}"#;

    #[test]
    fn loads_wake_me_up_record() {
        let ds = parse_dataset("t", Split::Train, TABLE1).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(
            ds.examples[0].arguments,
            vec![Argument::new("time", "five am"), Argument::new("date", "this week")]
        );
        assert!(ds.slot_labels.contains("time") && !ds.slot_labels.contains(OTHER));
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let ds = parse_dataset("t", Split::Test, "").unwrap();
        assert!(ds.is_empty());
        assert!(ds.domains.is_empty() && ds.intents.is_empty() && ds.slot_labels.is_empty());
    }

    #[test]
    fn tag_count_mismatch_reports_line() {
        let bad = r#"{"id":"e1","domain":"alarm","intent":"alarm_set","tokens":["wake","me","up","at","five","am","this","week"],"tags":["Other","Other","Other","Other","time","time","date"]}"#;
        let err = parse_dataset("t", Split::Train, bad).unwrap_err();
        assert!(err.to_string().contains("length mismatch at line 1"), "{err}");
    }

    #[test]
    fn malformed_and_duplicate_lines() {
        let err = parse_dataset("t", Split::Train, "{not json").unwrap_err();
        assert!(matches!(err, DatasetError::Malformed { line: 1, .. }));
        let twice = format!("{TABLE1}\n\n{TABLE1}\n");
        let err = parse_dataset("t", Split::Train, &twice).unwrap_err();
        assert!(matches!(err, DatasetError::DuplicateId { line: 3, .. }));
    }

    #[test]
    fn unknown_fields_are_ignored() {
        let line = TABLE1.replace("\"id\"", "\"locale\":\"en-US\",\"id\"");
        assert_eq!(parse_dataset("t", Split::Train, &line).unwrap().len(), 1);
    }

    #[test]
    fn argument_runs() {
        assert!(derive_arguments(&s(&["a", "b"]), &s(&[OTHER, OTHER])).is_empty());
        assert_eq!(
            derive_arguments(&s(&["a", "b", "c"]), &s(&["time", OTHER, "time"])),
            vec![Argument::new("time", "a"), Argument::new("time", "c")]
        );
        assert_eq!(
            derive_arguments(&s(&["a", "b", "c"]), &s(&["time", "date", "date"])),
            vec![Argument::new("time", "a"), Argument::new("date", "b c")]
        );
    }

    #[test]
    fn fixture_is_deterministic_and_consistent() {
        let (a, b) = synth_fixture(7, 4, 2);
        let (c, d) = synth_fixture(7, 4, 2);
        assert_eq!(a.to_jsonl(), c.to_jsonl());
        assert_eq!(b.to_jsonl(), d.to_jsonl());
        for ex in a.examples.iter().chain(&b.examples) {
            assert_eq!(derive_arguments(&ex.tokens, &ex.tags), ex.arguments);
        }
    }

    #[test]
    fn fixture_covers_whole_grammar() {
        // Inventory enumerated from the grammar productions, independent of sampling.
        let (domains, intents, slots) = fixture_inventory();
        assert_eq!(domains.len(), 3);
        assert_eq!(intents.len(), 6);
        assert_eq!(slots.len(), 5);
        let (train, test) = synth_fixture(7, 2000, 200);
        for ds in [&train, &test] {
            assert_eq!(ds.domains, domains);
            assert_eq!(ds.intents, intents);
            assert_eq!(ds.slot_labels, slots);
        }
    }

    #[test]
    fn write_then_load_round_trips() {
        let (train, _) = synth_fixture(3, 25, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.jsonl");
        train.write(&path).unwrap();
        let back = load_dataset(&path, Split::Train).unwrap();
        assert_eq!(back, train);
    }
}
