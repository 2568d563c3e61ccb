//! Prompt perturbation consistency learning at desk scale.
//!
//! The crate generates oronym, synonym and paraphrase perturbations of
//! intent-classification / slot-filling utterances, renders and parses
//! sentinel-based prompts, trains a tiny autoregressive transformer with a
//! cross-entropy plus Jensen-Shannon consistency objective, and scores
//! robustness with performance-drop-rate and recovery metrics.

pub mod dataset;
pub mod eval;
pub mod lexicon;
pub mod nnkit;
pub mod perturb;
pub mod ppcl;
pub mod promptfmt;
