//! Robustness scoring: intent accuracy, span-level slot F1, performance
//! drop rate (PDR) and recovery, plus the paired clean/perturbed harness.

pub mod published;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Example, OTHER};
use crate::nnkit::vocab::{detokenize, BOS_ID};
use crate::nnkit::{ModelError, TinyLM, Vocab};
use crate::perturb::{PairedSet, PerturbationKind};
use crate::promptfmt::{parse_response, render, FormatSpec, Hypothesis, Mode};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{hypotheses} hypotheses for {golds} gold examples")]
    LengthMismatch { hypotheses: usize, golds: usize },
    #[error("pair {index}: {predicted} predicted tags for {gold} gold tokens")]
    TokenCountMismatch {
        index: usize,
        predicted: usize,
        gold: usize,
    },
    #[error("drop rate undefined for a zero reference score")]
    ZeroReference,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn check_lengths(hypotheses: usize, golds: usize) -> Result<(), EvalError> {
    if hypotheses != golds {
        return Err(EvalError::LengthMismatch { hypotheses, golds });
    }
    Ok(())
}

/// Fraction of hypotheses whose intent string equals the gold intent.
/// An empty corpus scores 1.
pub fn intent_accuracy(hypotheses: &[Hypothesis], golds: &[Example]) -> Result<f64, EvalError> {
    check_lengths(hypotheses.len(), golds.len())?;
    if golds.is_empty() {
        return Ok(1.0);
    }
    let hits = hypotheses.iter().zip(golds).filter(|(h, g)| h.intent == g.intent).count();
    Ok(hits as f64 / golds.len() as f64)
}

/// Half-open token span `[start, end)` carrying one slot label.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

/// Maximal runs of one non-`Other` label.
pub fn spans<S: AsRef<str>>(tags: &[S]) -> BTreeSet<Span> {
    let mut out = BTreeSet::new();
    let mut i = 0;
    while i < tags.len() {
        let label = tags[i].as_ref();
        let mut j = i + 1;
        while j < tags.len() && tags[j].as_ref() == label {
            j += 1;
        }
        if label != OTHER {
            out.insert(Span {
                start: i,
                end: j,
                label: label.to_string(),
            });
        }
        i = j;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SpanCounts {
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl SpanCounts {
    fn ratio(num: usize, den: usize, other_den: usize) -> f64 {
        match (den, other_den) {
            (0, 0) => 1.0,
            (0, _) => 0.0,
            _ => num as f64 / den as f64,
        }
    }

    pub fn precision(&self) -> f64 {
        Self::ratio(self.true_positives, self.predicted, self.gold)
    }

    pub fn recall(&self) -> f64 {
        Self::ratio(self.true_positives, self.gold, self.predicted)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

/// Corpus-level span counts; each pair is matched against its own gold.
pub fn span_counts(hypotheses: &[Hypothesis], golds: &[Example]) -> Result<SpanCounts, EvalError> {
    check_lengths(hypotheses.len(), golds.len())?;
    let mut c = SpanCounts::default();
    for (index, (h, g)) in hypotheses.iter().zip(golds).enumerate() {
        if h.tags.len() != g.tags.len() {
            return Err(EvalError::TokenCountMismatch {
                index,
                predicted: h.tags.len(),
                gold: g.tags.len(),
            });
        }
        let (pred, gold) = (spans(&h.tags), spans(&g.tags));
        c.true_positives += pred.intersection(&gold).count();
        c.predicted += pred.len();
        c.gold += gold.len();
    }
    Ok(c)
}

/// Micro-averaged span F1.
pub fn slot_f1(hypotheses: &[Hypothesis], golds: &[Example]) -> Result<f64, EvalError> {
    Ok(span_counts(hypotheses, golds)?.f1())
}

/// Relative drop in percent, `100 * (1 - perturbed / clean)`. Negative when
/// the perturbed score is higher.
pub fn pdr(clean: f64, perturbed: f64) -> Result<f64, EvalError> {
    if clean == 0.0 {
        return Err(EvalError::ZeroReference);
    }
    Ok(100.0 * (1.0 - perturbed / clean))
}

/// Share of a baseline drop rate removed by a mitigation, in percent.
pub fn recovery(baseline_pdr: f64, mitigated_pdr: f64) -> Result<f64, EvalError> {
    if baseline_pdr == 0.0 {
        return Err(EvalError::ZeroReference);
    }
    Ok(100.0 * (1.0 - mitigated_pdr / baseline_pdr))
}

/// What a responder produced for one prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Response {
    Text(String),
    /// Decoding hit the token budget or the context before EOS.
    BudgetExhausted,
}

/// Anything that answers inference prompts.
pub trait Responder {
    /// `prompt` is the inference rendering of `example`.
    fn respond(&self, example: &Example, prompt: &str) -> Result<Response, EvalError>;
}

/// Greedy decoding from a trained model.
pub struct LmResponder<'a> {
    pub model: &'a TinyLM,
    pub vocab: &'a Vocab,
    pub max_new: usize,
}

impl Responder for LmResponder<'_> {
    fn respond(&self, _example: &Example, prompt: &str) -> Result<Response, EvalError> {
        let ids: Vec<usize> = std::iter::once(BOS_ID).chain(self.vocab.encode(prompt)).collect();
        let generated = self.model.generate_greedy(&ids, self.max_new)?;
        // generation stops short of the budget only on EOS or a full context
        let full_context = ids.len() + generated.len() >= self.model.config.context_length;
        if generated.len() >= self.max_new || full_context {
            return Ok(Response::BudgetExhausted);
        }
        let tail: Vec<&str> = generated.iter().map(|&i| self.vocab.token(i)).collect();
        Ok(Response::Text(format!("{prompt} {}", detokenize(&tail))))
    }
}

/// Answers with the gold training rendering.
pub struct CopyOracle {
    pub spec: FormatSpec,
}

impl Responder for CopyOracle {
    fn respond(&self, example: &Example, _prompt: &str) -> Result<Response, EvalError> {
        Ok(Response::Text(render(example, self.spec, Mode::Training)))
    }
}

/// Always answers with unparseable text.
pub struct Garbage;

impl Responder for Garbage {
    fn respond(&self, _example: &Example, _prompt: &str) -> Result<Response, EvalError> {
        Ok(Response::Text("lorem ipsum".into()))
    }
}

/// Hypotheses for one side of a paired set.
#[derive(Debug, Clone, Default)]
pub struct SideResult {
    pub hypotheses: Vec<Hypothesis>,
    pub parse_failures: usize,
    pub budget_exhausted: usize,
}

/// Queries `responder` for each example; failures become placeholders.
pub fn predict(
    responder: &dyn Responder,
    examples: &[Example],
    spec: FormatSpec,
) -> Result<SideResult, EvalError> {
    let mut out = SideResult::default();
    for ex in examples {
        let prompt = render(ex, spec, Mode::Inference);
        let hyp = match responder.respond(ex, &prompt)? {
            Response::Text(text) => parse_response(&text, spec, ex.tokens.len()).ok(),
            Response::BudgetExhausted => {
                out.budget_exhausted += 1;
                None
            }
        };
        out.hypotheses.push(hyp.unwrap_or_else(|| {
            out.parse_failures += 1;
            Hypothesis::placeholder(ex.tokens.len())
        }));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryEntry {
    pub baseline_run: String,
    pub ic: Option<f64>,
    pub sf: Option<f64>,
}

/// Clean vs perturbed scores for one run and perturbation kind. Scores are
/// fractions; drop rates and recoveries are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub kind: PerturbationKind,
    pub pairs: usize,
    pub clean_ic: f64,
    pub pert_ic: f64,
    pub clean_sf: f64,
    pub pert_sf: f64,
    pub ic_pdr: Option<f64>,
    pub sf_pdr: Option<f64>,
    pub clean_parse_failures: usize,
    pub pert_parse_failures: usize,
    pub budget_exhausted: usize,
    pub recovery: Option<RecoveryEntry>,
    pub flags: Vec<String>,
}

impl EvalReport {
    /// Fills in drop rates from the four scores, flagging zero references.
    pub fn assemble(
        run_id: impl Into<String>,
        kind: PerturbationKind,
        pairs: usize,
        (clean_ic, pert_ic): (f64, f64),
        (clean_sf, pert_sf): (f64, f64),
    ) -> Self {
        let mut flags = Vec::new();
        let mut rate = |clean, pert, flag: &str| {
            let r = pdr(clean, pert).ok();
            if r.is_none() {
                flags.push(flag.to_string());
            }
            r
        };
        let ic_pdr = rate(clean_ic, pert_ic, "clean_ic_zero");
        let sf_pdr = rate(clean_sf, pert_sf, "clean_sf_zero");
        Self {
            run_id: run_id.into(),
            kind,
            pairs,
            clean_ic,
            pert_ic,
            clean_sf,
            pert_sf,
            ic_pdr,
            sf_pdr,
            clean_parse_failures: 0,
            pert_parse_failures: 0,
            budget_exhausted: 0,
            recovery: None,
            flags,
        }
    }

    /// Attaches recovery against `baseline`. Metrics whose baseline drop is
    /// zero or missing stay `None`.
    pub fn with_recovery(mut self, baseline: &EvalReport) -> Self {
        let rec = |b: Option<f64>, m: Option<f64>| recovery(b?, m?).ok();
        self.recovery = Some(RecoveryEntry {
            baseline_run: baseline.run_id.clone(),
            ic: rec(baseline.ic_pdr, self.ic_pdr),
            sf: rec(baseline.sf_pdr, self.sf_pdr),
        });
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Scores `responder` on both sides of `paired`.
pub fn evaluate_pair_set(
    run_id: &str,
    responder: &dyn Responder,
    paired: &PairedSet,
    spec: FormatSpec,
) -> Result<EvalReport, EvalError> {
    let clean: Vec<Example> = paired.pairs.iter().map(|(c, _)| c.clone()).collect();
    let pert: Vec<Example> = paired
        .pairs
        .iter()
        .map(|(c, p)| p.to_example(c, format!("{}~{}", c.id, p.kind)))
        .collect();
    let c = predict(responder, &clean, spec)?;
    let p = predict(responder, &pert, spec)?;
    let mut report = EvalReport::assemble(
        run_id,
        paired.kind,
        paired.len(),
        (intent_accuracy(&c.hypotheses, &clean)?, intent_accuracy(&p.hypotheses, &pert)?),
        (slot_f1(&c.hypotheses, &clean)?, slot_f1(&p.hypotheses, &pert)?),
    );
    report.clean_parse_failures = c.parse_failures;
    report.pert_parse_failures = p.parse_failures;
    report.budget_exhausted = c.budget_exhausted + p.budget_exhausted;
    if report.clean_parse_failures + report.pert_parse_failures > 0 {
        report.flags.push("parse_failures".into());
    }
    Ok(report)
}

/// One JSON record per line.
pub fn reports_to_jsonl(reports: &[EvalReport]) -> String {
    reports.iter().map(|r| r.to_json() + "\n").collect()
}

pub fn parse_reports(text: &str) -> Result<Vec<EvalReport>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.2}"))
}

/// Summary table with scores as percentages.
pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from(
        "run,kind,pairs,clean_ic,pert_ic,ic_pdr,clean_sf,pert_sf,sf_pdr,baseline,ic_recovery,sf_recovery\n",
    );
    for r in reports {
        let rec = r.recovery.as_ref();
        let _ = writeln!(
            s,
            "{},{},{},{:.2},{:.2},{},{:.2},{:.2},{},{},{},{}",
            r.run_id,
            r.kind,
            r.pairs,
            100.0 * r.clean_ic,
            100.0 * r.pert_ic,
            cell(r.ic_pdr),
            100.0 * r.clean_sf,
            100.0 * r.pert_sf,
            cell(r.sf_pdr),
            rec.map_or("", |e| e.baseline_run.as_str()),
            cell(rec.and_then(|e| e.ic)),
            cell(rec.and_then(|e| e.sf)),
        );
    }
    s
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<(), EvalError> {
    let path = path.as_ref();
    fs::write(path, text).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}
