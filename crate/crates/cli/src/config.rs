//! Run configuration: one TOML file per experiment.
//!
//! ```toml
//! seed = 7
//! out_dir = "runs/demo"
//! format = "structured+sentinel"
//! kinds = ["synonym"]
//! threshold = 0.85
//!
//! [synth]
//! n_train = 2000
//! n_test = 200
//!
//! [train]
//! sft_epochs = 5
//! ```
//!
//! Every key is optional. Paths default to files inside `out_dir`.

use std::path::{Path, PathBuf};

use ppcl_core::perturb::{PerturbationKind, DEFAULT_THRESHOLD};
use ppcl_core::ppcl::TrainConfig;
use ppcl_core::promptfmt::FormatSpec;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub format: String,
    pub kinds: Vec<String>,
    pub threshold: f64,
    /// Perturbation attempts per clean example.
    pub attempts: u32,
    pub augment_k: usize,
    /// Phoneme edits allowed for oronyms; 0 keeps exact homophones.
    pub max_phoneme_edits: usize,
    pub max_new_tokens: usize,
    pub paths: Paths,
    pub synth: Synth,
    pub model: ModelSection,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// CMU-style pronouncing dictionary; the bundled fixture when absent.
    pub pronouncing: Option<PathBuf>,
    /// `word<TAB>syn1,syn2` lines; the bundled fixture when absent.
    pub thesaurus: Option<PathBuf>,
    /// JSONL `{"id", "paraphrase"}` records ingested before template rewrites.
    pub paraphrases: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Synth {
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for Synth {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_test: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub context_length: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_sentinels: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            context_length: 96,
            embed_dim: 128,
            n_layers: 2,
            n_heads: 4,
            max_sentinels: 32,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out_dir: PathBuf::from("run"),
            format: FormatSpec::default().to_string(),
            kinds: vec!["synonym".into()],
            threshold: DEFAULT_THRESHOLD,
            attempts: 8,
            augment_k: 1,
            max_phoneme_edits: 0,
            max_new_tokens: 60,
            paths: Paths::default(),
            synth: Synth::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Validation(format!("config {}: {}", path.display(), e.message())))
    }

    pub fn format_spec(&self) -> Result<FormatSpec, CliError> {
        self.format
            .parse()
            .map_err(|_| CliError::Validation(format!("unknown format {:?}", self.format)))
    }

    pub fn parsed_kinds(&self) -> Result<Vec<PerturbationKind>, CliError> {
        self.kinds
            .iter()
            .map(|k| k.parse().map_err(|_| CliError::Validation(format!("unknown perturbation kind {k:?}"))))
            .collect()
    }

    /// Checks ranges and that every configured input file exists.
    pub fn validate(&self) -> Result<(), CliError> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(CliError::Validation(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        if self.attempts == 0 || self.augment_k == 0 || self.max_new_tokens == 0 {
            return Err(CliError::Validation("attempts, augment_k and max_new_tokens must be positive".into()));
        }
        self.format_spec()?;
        self.parsed_kinds()?;
        self.train.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        let p = &self.paths;
        for path in [&p.pronouncing, &p.thesaurus, &p.paraphrases].into_iter().flatten() {
            if !path.exists() {
                return Err(CliError::Validation(format!("missing input {}", path.display())));
            }
        }
        Ok(())
    }

    pub fn train_path(&self) -> PathBuf {
        self.paths.train.clone().unwrap_or_else(|| self.out_dir.join("train.jsonl"))
    }

    pub fn test_path(&self) -> PathBuf {
        self.paths.test.clone().unwrap_or_else(|| self.out_dir.join("test.jsonl"))
    }

    pub fn perturbed_path(&self, split: &str, kind: PerturbationKind) -> PathBuf {
        self.out_dir.join(format!("perturbed-{split}-{kind}.jsonl"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_toml_fills_defaults() {
        let c: RunConfig = toml::from_str("seed = 3\n[train]\nlearning_rate = 0.001\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.train.learning_rate, 1e-3);
        assert_eq!(c.train.sft_epochs, 5);
        assert_eq!(c.synth.n_train, 2000);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_bad_values() {
        let c = RunConfig {
            threshold: 1.5,
            ..RunConfig::default()
        };
        assert!(matches!(c.validate(), Err(CliError::Validation(_))));
        let c = RunConfig {
            kinds: vec!["typo".into()],
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
        assert!(toml::from_str::<RunConfig>("bogus = 1").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let c = RunConfig::default();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), c);
    }
}
