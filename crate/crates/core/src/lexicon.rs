//! Pronouncing lexicon (CMU-style) for oronym lookup and a tab-separated
//! synonym thesaurus.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use thiserror::Error;

/// Pronouncing lexicon shipped for tests and the toy corpus.
pub const FIXTURE_PRONOUNCING: &str = include_str!("../resources/fixture.dict");
/// Thesaurus shipped for tests and the toy corpus.
pub const FIXTURE_THESAURUS: &str = include_str!("../resources/fixture.thesaurus");

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: word {word:?} has no phonemes")]
    MissingPhonemes { line: usize, word: String },
    #[error("line {line}: invalid phoneme symbol {symbol:?}")]
    InvalidSymbol { line: usize, symbol: String },
    #[error("line {line}: expected `word<TAB>syn1,syn2,...`")]
    MissingTab { line: usize },
}

/// An ARPABET pronunciation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PhoneSeq(Vec<String>);

impl PhoneSeq {
    pub fn phonemes(&self) -> &[String] {
        &self.0
    }

    /// Copy with vowel stress digits removed.
    pub fn stripped(&self) -> PhoneSeq {
        PhoneSeq(
            self.0
                .iter()
                .map(|p| p.trim_end_matches(|c: char| c.is_ascii_digit()).to_string())
                .collect(),
        )
    }
}

fn valid_symbol(sym: &str) -> bool {
    let base = sym.strip_suffix(['0', '1', '2']).unwrap_or(sym);
    !base.is_empty() && base.bytes().all(|b| b.is_ascii_uppercase())
}

#[derive(Debug, Clone, Default)]
pub struct PronouncingLexicon {
    entries: BTreeMap<String, Vec<PhoneSeq>>,
    // stress-stripped pronunciation -> words, for exact homophone lookup
    by_sound: HashMap<PhoneSeq, BTreeSet<String>>,
}

impl PronouncingLexicon {
    pub fn parse(text: &str) -> Result<Self, LexiconError> {
        let mut lex = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with(";;;") {
                continue;
            }
            let mut parts = trimmed.split_whitespace();
            let head = parts.next().expect("non-empty line");
            // "WORD(2)" is an alternate pronunciation of "WORD"
            let word = match head.find('(') {
                Some(i) if head.ends_with(')') => &head[..i],
                _ => head,
            }
            .to_lowercase();
            let phones: Vec<String> = parts.map(str::to_string).collect();
            if phones.is_empty() {
                return Err(LexiconError::MissingPhonemes { line, word });
            }
            if let Some(bad) = phones.iter().find(|p| !valid_symbol(p)) {
                return Err(LexiconError::InvalidSymbol {
                    line,
                    symbol: bad.clone(),
                });
            }
            lex.insert(word, PhoneSeq(phones));
        }
        Ok(lex)
    }

    fn insert(&mut self, word: String, seq: PhoneSeq) {
        self.by_sound
            .entry(seq.stripped())
            .or_default()
            .insert(word.clone());
        let prons = self.entries.entry(word).or_default();
        if !prons.contains(&seq) {
            prons.push(seq);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Case-insensitive lookup.
    pub fn pronunciations(&self, word: &str) -> Option<&[PhoneSeq]> {
        self.entries.get(&word.to_lowercase()).map(Vec::as_slice)
    }

    /// Other words with a pronunciation within `max_phoneme_edits` phoneme
    /// edits of some pronunciation of `word`, ignoring stress. Sorted.
    pub fn homophones(&self, word: &str, max_phoneme_edits: usize) -> Vec<String> {
        let key = word.to_lowercase();
        let Some(prons) = self.entries.get(&key) else {
            return Vec::new();
        };
        let targets: Vec<PhoneSeq> = prons.iter().map(PhoneSeq::stripped).collect();
        let mut found = BTreeSet::new();
        if max_phoneme_edits == 0 {
            for t in &targets {
                if let Some(words) = self.by_sound.get(t) {
                    found.extend(words.iter().cloned());
                }
            }
        } else {
            for (sound, words) in &self.by_sound {
                let close = targets.iter().any(|t| {
                    strsim::generic_levenshtein(&t.0, &sound.0)
                        <= max_phoneme_edits
                });
                if close {
                    found.extend(words.iter().cloned());
                }
            }
        }
        found.remove(&key);
        found.into_iter().collect()
    }
}

pub fn load_pronouncing(path: impl AsRef<Path>) -> Result<PronouncingLexicon, LexiconError> {
    PronouncingLexicon::parse(&read(path.as_ref())?)
}

/// `homophones` as a free function over an explicit lexicon.
pub fn homophones(word: &str, lexicon: &PronouncingLexicon, max_phoneme_edits: usize) -> Vec<String> {
    lexicon.homophones(word, max_phoneme_edits)
}

#[derive(Debug, Clone, Default)]
pub struct Thesaurus {
    entries: BTreeMap<String, Vec<String>>,
}

impl Thesaurus {
    pub fn parse(text: &str) -> Result<Self, LexiconError> {
        let mut entries: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let (word, syns) = raw.split_once('\t').ok_or(LexiconError::MissingTab { line })?;
            let word = word.trim().to_lowercase();
            let list = entries.entry(word.clone()).or_default();
            for syn in syns.split(',') {
                let syn = syn.trim().to_lowercase();
                if syn.is_empty() || syn == word || list.contains(&syn) {
                    continue;
                }
                list.push(syn);
            }
        }
        entries.retain(|_, v| !v.is_empty());
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Stored synonyms in file order; empty for unknown words.
    pub fn synonyms(&self, word: &str) -> &[String] {
        self.entries
            .get(&word.to_lowercase())
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .flat_map(|(k, v)| std::iter::once(k.as_str()).chain(v.iter().map(String::as_str)))
    }
}

pub fn load_thesaurus(path: impl AsRef<Path>) -> Result<Thesaurus, LexiconError> {
    Thesaurus::parse(&read(path.as_ref())?)
}

pub fn synonyms<'a>(word: &str, thesaurus: &'a Thesaurus) -> &'a [String] {
    thesaurus.synonyms(word)
}

fn read(path: &Path) -> Result<String, LexiconError> {
    fs::read_to_string(path).map_err(|source| LexiconError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fixture() -> PronouncingLexicon {
        PronouncingLexicon::parse(FIXTURE_PRONOUNCING).unwrap()
    }

    #[test]
    fn parses_week() {
        let lex = PronouncingLexicon::parse(";;; header\nWEEK  W IY1 K\n").unwrap();
        assert_eq!(lex.len(), 1);
        let prons = lex.pronunciations("Week").unwrap();
        assert_eq!(prons[0].phonemes(), ["W", "IY1", "K"]);
    }

    #[test]
    fn alternates_merge_under_one_word() {
        let lex = fixture();
        assert_eq!(lex.pronunciations("the").unwrap().len(), 3);
        assert_eq!(lex.pronunciations("when").unwrap().len(), 2);
    }

    #[test]
    fn shared_pronunciation() {
        let lex = fixture();
        assert_eq!(lex.pronunciations("weak"), lex.pronunciations("week"));
        assert_eq!(lex.homophones("week", 0), ["weak"]);
        assert!(lex.homophones("xyzzy", 0).is_empty());
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(matches!(
            PronouncingLexicon::parse("WEEK\n"),
            Err(LexiconError::MissingPhonemes { line: 1, .. })
        ));
        assert!(matches!(
            PronouncingLexicon::parse("WEEK  W iy1 K\n"),
            Err(LexiconError::InvalidSymbol { line: 1, .. })
        ));
        assert!(matches!(
            PronouncingLexicon::parse("WEEK  W IY7 K\n"),
            Err(LexiconError::InvalidSymbol { .. })
        ));
    }

    #[test]
    fn edit_distance_widens_the_net() {
        let lex = fixture();
        // WHEN(2) is W IH1 N, identical to WYNN once stress is stripped.
        assert!(lex.homophones("when", 0).contains(&"wynn".to_string()));
        assert!(!lex.homophones("more", 0).contains(&"moore".to_string()));
        assert!(lex.homophones("more", 1).contains(&"moore".to_string()));
        assert_eq!(lex.homophones("all", 0), ["aul", "awl"]);
    }

    #[test]
    fn stress_is_ignored() {
        let a = PronouncingLexicon::parse("RED  R EH1 D\nREAD  R EH0 D\n").unwrap();
        assert_eq!(a.homophones("red", 0), ["read"]);
    }

    #[test]
    fn thesaurus_lines() {
        let th = Thesaurus::parse("new\tnovel,fresh\na\ta,b\n").unwrap();
        assert_eq!(th.synonyms("new"), ["novel", "fresh"]);
        assert_eq!(th.synonyms("NEW"), ["novel", "fresh"]);
        assert_eq!(th.synonyms("a"), ["b"]);
        assert!(th.synonyms("zzz").is_empty());
        assert!(matches!(
            Thesaurus::parse("ok\tfine\nbroken line\n"),
            Err(LexiconError::MissingTab { line: 2 })
        ));
        let dup = Thesaurus::parse("x\ty,z,y\nx\tz,w\n").unwrap();
        assert_eq!(dup.synonyms("x"), ["y", "z", "w"]);
    }

    #[test]
    fn fixture_thesaurus_loads() {
        let th = Thesaurus::parse(FIXTURE_THESAURUS).unwrap();
        assert_eq!(th.synonyms("new"), ["novel", "fresh"]);
        for (w, syns) in &th.entries {
            assert!(!syns.contains(w));
        }
    }

    proptest! {
        #[test]
        fn exact_homophony_is_symmetric(i in 0usize..64, j in 0usize..64) {
            let lex = fixture();
            let words: Vec<&String> = lex.entries.keys().collect();
            let a = words[i % words.len()];
            let b = words[j % words.len()];
            prop_assert_eq!(
                lex.homophones(a, 0).contains(b),
                lex.homophones(b, 0).contains(a)
            );
            prop_assert!(!lex.homophones(a, 0).contains(a));
        }

        #[test]
        fn stress_digits_never_matter(digits in proptest::collection::vec(0u8..3, 3)) {
            let text = format!(
                "WEEK  W IY{} K\nWEAK  W IY{} K\nWICK  W IH{} K\n",
                digits[0], digits[1], digits[2]
            );
            let lex = PronouncingLexicon::parse(&text).unwrap();
            prop_assert_eq!(lex.homophones("week", 0), vec!["weak".to_string()]);
            prop_assert_eq!(lex.homophones("week", 1), vec!["weak".to_string(), "wick".to_string()]);
        }
    }
}
