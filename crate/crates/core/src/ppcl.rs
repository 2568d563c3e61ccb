//! Consistency-learning objective and the two training phases.
//!
//! Supervised fine-tuning minimises cross-entropy on response tokens.
//! Consistency fine-tuning adds, per (clean, perturbed) pair, the
//! perturbed cross-entropy and a Jensen-Shannon term between the two
//! response distribution sequences:
//!
//! ```text
//! L = w_clean * CE(clean) + w_perturbed * CE(perturbed) + w_js * JS
//! ```
//!
//! JS is taken position by position for word-level perturbations, and
//! between the mean response distributions for paraphrases, whose
//! responses may differ in length. Natural logarithms throughout.

use std::fmt;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Example;
use crate::nnkit::model::snap_to_f32;
use crate::nnkit::vocab::{tokenize, BOS_ID, EOS_ID};
use crate::nnkit::{Matrix, ModelError, ScalarOp, Tape, TinyLM, Var, Vocab};
use crate::perturb::{PairedSet, PerturbationKind};
use crate::promptfmt::{render, FormatSpec, Mode};

const DIST_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("mask selects no positions")]
    EmptyMask,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("input is not a probability distribution")]
    NotADistribution,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("example {id}: {len} tokens exceed context length {context}")]
    PromptOverflow { id: String, len: usize, context: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("pair {id}: {source}")]
    PairMismatch {
        id: String,
        #[source]
        source: LossError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn masked_rows(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter_map(|(i, &m)| m.then_some(i)).collect()
}

fn kl_terms(p: f64, m: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * (p / m).ln()
    }
}

// unchecked JS over equal-length slices
fn js_raw<'a>(p: impl Iterator<Item = &'a f64>, q: impl Iterator<Item = &'a f64>) -> f64 {
    p.zip(q)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            0.5 * (kl_terms(a, m) + kl_terms(b, m))
        })
        .sum()
}

// d JS / d p_i = 0.5 ln(p_i / m_i)
fn js_grad(p: f64, q: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        0.5 * (p / (0.5 * (p + q))).ln()
    }
}

fn check_distribution(p: &[f64]) -> Result<(), LossError> {
    let ok = p.iter().all(|x| x.is_finite() && *x >= 0.0) && (p.iter().sum::<f64>() - 1.0).abs() <= DIST_TOL;
    if ok {
        Ok(())
    } else {
        Err(LossError::NotADistribution)
    }
}

/// Mean of `-ln p(target)` over masked positions.
pub fn cross_entropy(dists: &Matrix, target_ids: &[usize], mask: &[bool]) -> Result<f64, LossError> {
    if dists.nrows() != target_ids.len() {
        return Err(LossError::LengthMismatch(dists.nrows(), target_ids.len()));
    }
    if mask.len() != target_ids.len() {
        return Err(LossError::LengthMismatch(mask.len(), target_ids.len()));
    }
    let rows = masked_rows(mask);
    if rows.is_empty() {
        return Err(LossError::EmptyMask);
    }
    let total: f64 = rows.iter().map(|&j| -dists[[j, target_ids[j]]].ln()).sum();
    Ok(total / rows.len() as f64)
}

/// Jensen-Shannon divergence in nats, in `[0, ln 2]`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64, LossError> {
    if p.len() != q.len() {
        return Err(LossError::LengthMismatch(p.len(), q.len()));
    }
    check_distribution(p)?;
    check_distribution(q)?;
    Ok(js_raw(p.iter(), q.iter()))
}

fn paired_rows(clean_mask: &[bool], pert_mask: &[bool]) -> Result<Vec<(usize, usize)>, LossError> {
    let (a, b) = (masked_rows(clean_mask), masked_rows(pert_mask));
    if a.len() != b.len() {
        return Err(LossError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(LossError::EmptyMask);
    }
    Ok(a.into_iter().zip(b).collect())
}

/// Mean position-wise JS; the k-th masked row of each side are paired.
pub fn token_js_loss(
    clean: &Matrix,
    perturbed: &Matrix,
    clean_mask: &[bool],
    pert_mask: &[bool],
) -> Result<f64, LossError> {
    if clean.ncols() != perturbed.ncols() {
        return Err(LossError::LengthMismatch(clean.ncols(), perturbed.ncols()));
    }
    let pairs = paired_rows(clean_mask, pert_mask)?;
    let total: f64 = pairs
        .iter()
        .map(|&(i, j)| js_raw(clean.row(i).iter(), perturbed.row(j).iter()))
        .sum();
    Ok(total / pairs.len() as f64)
}

fn mean_row(dists: &Matrix, rows: &[usize]) -> (Vec<f64>, f64) {
    let mut mean = vec![0.0; dists.ncols()];
    for &r in rows {
        for (m, &p) in mean.iter_mut().zip(dists.row(r)) {
            *m += p;
        }
    }
    let n = rows.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let total: f64 = mean.iter().sum();
    mean.iter_mut().for_each(|m| *m /= total);
    (mean, total)
}

/// JS between the renormalised mean masked distributions of each side.
pub fn mean_dist_js_loss(
    clean: &Matrix,
    perturbed: &Matrix,
    clean_mask: &[bool],
    pert_mask: &[bool],
) -> Result<f64, LossError> {
    if clean.ncols() != perturbed.ncols() {
        return Err(LossError::LengthMismatch(clean.ncols(), perturbed.ncols()));
    }
    let (a, b) = (masked_rows(clean_mask), masked_rows(pert_mask));
    if a.is_empty() || b.is_empty() {
        return Err(LossError::EmptyMask);
    }
    let (p, _) = mean_row(clean, &a);
    let (q, _) = mean_row(perturbed, &b);
    Ok(js_raw(p.iter(), q.iter()))
}

/// Non-negative weights of the clean, perturbed and JS terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub clean: f64,
    pub perturbed: f64,
    pub js: f64,
}

impl LossWeights {
    pub const FULL: LossWeights = LossWeights::new(1.0, 1.0, 1.0);
    pub const PERTURB_ONLY: LossWeights = LossWeights::new(1.0, 1.0, 0.0);
    pub const JS_ONLY: LossWeights = LossWeights::new(1.0, 0.0, 1.0);

    pub const fn new(clean: f64, perturbed: f64, js: f64) -> Self {
        Self { clean, perturbed, js }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let w = [self.clean, self.perturbed, self.js];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(TrainError::InvalidConfig("loss weights must be finite and non-negative".into()));
        }
        if w.iter().all(|x| *x == 0.0) {
            return Err(TrainError::InvalidConfig("loss weights are all zero".into()));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::FULL
    }
}

pub fn combined_loss(clean: f64, perturbed: f64, js: f64, weights: LossWeights) -> f64 {
    weights.clean * clean + weights.perturbed * perturbed + weights.js * js
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub sft_epochs: usize,
    pub ppcl_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            warmup_steps: 100,
            sft_epochs: 5,
            ppcl_epochs: 2,
            batch_size: 16,
            seed: 0,
            weights: LossWeights::FULL,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return bad("adam hyperparameters out of range");
        }
        self.weights.validate()
    }

    /// Linear warm-up to the base rate, then constant. `step` counts from 0.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.learning_rate
        } else {
            self.learning_rate * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

impl Adam {
    pub fn new(params: &[Matrix], config: &TrainConfig) -> Self {
        let zeros = || params.iter().map(|p| Matrix::zeros(p.raw_dim())).collect();
        Self {
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// One bias-corrected update; parameters are then rounded to `f32`.
    pub fn step(&mut self, params: &mut [Matrix], grads: &[Matrix], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(&mut *p)
                .and(g)
                .and(&mut *m)
                .and(&mut *v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
            snap_to_f32(p);
        }
    }
}

/// Teacher-forced token ids for one rendered example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSample {
    /// `BOS` followed by the rendered tokens.
    pub input: Vec<usize>,
    /// The rendered tokens followed by `EOS`.
    pub targets: Vec<usize>,
    /// True where the target belongs to the response.
    pub mask: Vec<bool>,
}

pub fn encode_sample(vocab: &Vocab, example: &Example, spec: FormatSpec) -> EncodedSample {
    let full = render(example, spec, Mode::Training);
    let prompt_len = tokenize(&render(example, spec, Mode::Inference)).len();
    let ids = vocab.encode(&full);
    let input = std::iter::once(BOS_ID).chain(ids.iter().copied()).collect();
    let targets: Vec<usize> = ids.into_iter().chain(std::iter::once(EOS_ID)).collect();
    let mask = (0..targets.len()).map(|j| j >= prompt_len).collect();
    EncodedSample { input, targets, mask }
}

fn encode_checked(
    vocab: &Vocab,
    example: &Example,
    spec: FormatSpec,
    context: usize,
) -> Result<EncodedSample, TrainError> {
    let s = encode_sample(vocab, example, spec);
    if s.input.len() > context {
        return Err(TrainError::PromptOverflow {
            id: example.id.clone(),
            len: s.input.len(),
            context,
        });
    }
    Ok(s)
}

struct CrossEntropyOp {
    rows: Vec<usize>,
    targets: Vec<usize>,
}

impl CrossEntropyOp {
    fn new(sample: &EncodedSample) -> Self {
        let rows = masked_rows(&sample.mask);
        let targets = rows.iter().map(|&j| sample.targets[j]).collect();
        Self { rows, targets }
    }
}

impl ScalarOp for CrossEntropyOp {
    fn forward(&self, inputs: &[&Matrix]) -> f64 {
        let p = inputs[0];
        let total: f64 = self.rows.iter().zip(&self.targets).map(|(&j, &t)| -p[[j, t]].ln()).sum();
        total / self.rows.len() as f64
    }

    fn backward(&self, inputs: &[&Matrix]) -> Vec<Matrix> {
        let p = inputs[0];
        let n = self.rows.len() as f64;
        let mut g = Matrix::zeros(p.raw_dim());
        for (&j, &t) in self.rows.iter().zip(&self.targets) {
            g[[j, t]] = -1.0 / (n * p[[j, t]]);
        }
        vec![g]
    }
}

struct TokenJsOp {
    pairs: Vec<(usize, usize)>,
}

impl ScalarOp for TokenJsOp {
    fn forward(&self, inputs: &[&Matrix]) -> f64 {
        let (a, b) = (inputs[0], inputs[1]);
        let total: f64 = self
            .pairs
            .iter()
            .map(|&(i, j)| js_raw(a.row(i).iter(), b.row(j).iter()))
            .sum();
        total / self.pairs.len() as f64
    }

    fn backward(&self, inputs: &[&Matrix]) -> Vec<Matrix> {
        let (a, b) = (inputs[0], inputs[1]);
        let n = self.pairs.len() as f64;
        let mut ga = Matrix::zeros(a.raw_dim());
        let mut gb = Matrix::zeros(b.raw_dim());
        for &(i, j) in &self.pairs {
            for k in 0..a.ncols() {
                let (p, q) = (a[[i, k]], b[[j, k]]);
                ga[[i, k]] = js_grad(p, q) / n;
                gb[[j, k]] = js_grad(q, p) / n;
            }
        }
        vec![ga, gb]
    }
}

struct MeanJsOp {
    clean_rows: Vec<usize>,
    pert_rows: Vec<usize>,
}

impl ScalarOp for MeanJsOp {
    fn forward(&self, inputs: &[&Matrix]) -> f64 {
        let (p, _) = mean_row(inputs[0], &self.clean_rows);
        let (q, _) = mean_row(inputs[1], &self.pert_rows);
        js_raw(p.iter(), q.iter())
    }

    fn backward(&self, inputs: &[&Matrix]) -> Vec<Matrix> {
        let (p, sp) = mean_row(inputs[0], &self.clean_rows);
        let (q, sq) = mean_row(inputs[1], &self.pert_rows);
        let side = |x: &[f64], y: &[f64], total: f64, rows: &[usize], shape: &Matrix| {
            let g: Vec<f64> = x.iter().zip(y).map(|(&a, &b)| js_grad(a, b)).collect();
            // back through the renormalisation x = s / sum(s)
            let dot: f64 = g.iter().zip(x).map(|(a, b)| a * b).sum();
            let n = rows.len() as f64;
            let mut out = Matrix::zeros(shape.raw_dim());
            for &r in rows {
                for (k, gk) in g.iter().enumerate() {
                    out[[r, k]] = (gk - dot) / (total * n);
                }
            }
            out
        };
        vec![
            side(&p, &q, sp, &self.clean_rows, inputs[0]),
            side(&q, &p, sq, &self.pert_rows, inputs[1]),
        ]
    }
}

/// Cross-entropy of one sample, recorded on a tape.
pub fn tape_cross_entropy<'a>(
    model: &TinyLM,
    tape: &mut Tape<'a>,
    sample: &EncodedSample,
) -> Result<(Var, Var), ModelError> {
    let probs = model.forward_tape(tape, &sample.input)?;
    let loss = tape.scalar_op(&[probs], Box::new(CrossEntropyOp::new(sample)));
    Ok((probs, loss))
}

/// Consistency loss between two recorded distribution sequences.
pub fn tape_js<'a>(
    tape: &mut Tape<'a>,
    kind: PerturbationKind,
    clean: (Var, &EncodedSample),
    perturbed: (Var, &EncodedSample),
) -> Result<Var, LossError> {
    let op: Box<dyn ScalarOp> = if kind.is_word_level() {
        Box::new(TokenJsOp {
            pairs: paired_rows(&clean.1.mask, &perturbed.1.mask)?,
        })
    } else {
        let clean_rows = masked_rows(&clean.1.mask);
        let pert_rows = masked_rows(&perturbed.1.mask);
        if clean_rows.is_empty() || pert_rows.is_empty() {
            return Err(LossError::EmptyMask);
        }
        Box::new(MeanJsOp { clean_rows, pert_rows })
    };
    Ok(tape.scalar_op(&[clean.0, perturbed.0], op))
}

/// A clean training example with an optional perturbed counterpart.
#[derive(Debug, Clone)]
pub struct PpclItem {
    pub clean: Example,
    pub perturbed: Option<Example>,
    pub kind: PerturbationKind,
}

/// Every clean example, paired where the paired set has a counterpart.
pub fn ppcl_items(clean: &[Example], paired: &PairedSet) -> Vec<PpclItem> {
    let by_id: std::collections::HashMap<&str, Example> = paired
        .pairs
        .iter()
        .map(|(c, p)| (c.id.as_str(), p.to_example(c, format!("{}~{}", c.id, paired.kind))))
        .collect();
    clean
        .iter()
        .map(|c| PpclItem {
            clean: c.clone(),
            perturbed: by_id.get(c.id.as_str()).cloned(),
            kind: paired.kind,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Sft,
    Ppcl,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Sft => "sft",
            Phase::Ppcl => "ppcl",
        })
    }
}

/// Batch-mean loss terms of one optimiser step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub step: usize,
    pub clean: f64,
    pub perturbed: f64,
    pub js: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub records: Vec<LossRecord>,
}

impl LossCurve {
    /// Mean total loss per epoch of `phase`, in epoch order.
    pub fn epoch_means(&self, phase: Phase) -> Vec<f64> {
        let mut sums: Vec<(f64, usize)> = Vec::new();
        for r in self.records.iter().filter(|r| r.phase == phase) {
            if sums.len() <= r.epoch {
                sums.resize(r.epoch + 1, (0.0, 0));
            }
            sums[r.epoch].0 += r.total;
            sums[r.epoch].1 += 1;
        }
        sums.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("phase,epoch,step,l_clean,l_perturbed,l_js,l_total\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.phase, r.epoch, r.step, r.clean, r.perturbed, r.js, r.total
            );
        }
        out
    }

    pub fn extend(&mut self, other: LossCurve) {
        self.records.extend(other.records);
    }
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch as u64));
    order.shuffle(&mut rng);
    order
}

struct EncodedItem {
    clean: EncodedSample,
    perturbed: Option<EncodedSample>,
    kind: PerturbationKind,
    id: String,
}

/// Loss terms and gradients of one item, scaled by `scale`.
fn item_step(
    model: &TinyLM,
    item: &EncodedItem,
    weights: LossWeights,
    scale: f64,
    grads: &mut [Matrix],
) -> Result<(f64, f64, f64), TrainError> {
    let mut tape = Tape::new(&model.params);
    let (pc, lc) = tape_cross_entropy(model, &mut tape, &item.clean)?;
    let mut terms = vec![(lc, weights.clean)];
    let (mut lp_val, mut js_val) = (0.0, 0.0);
    if let Some(pert) = &item.perturbed {
        let (pp, lp) = tape_cross_entropy(model, &mut tape, pert)?;
        terms.push((lp, weights.perturbed));
        lp_val = tape.scalar(lp);
        if weights.js > 0.0 {
            let js = tape_js(&mut tape, item.kind, (pc, &item.clean), (pp, pert)).map_err(|source| {
                TrainError::PairMismatch {
                    id: item.id.clone(),
                    source,
                }
            })?;
            terms.push((js, weights.js));
            js_val = tape.scalar(js);
        }
    }
    let lc_val = tape.scalar(lc);
    let total = tape.weighted_sum(&terms);
    tape.backward(total, scale, grads);
    Ok((lc_val, lp_val, js_val))
}

fn run_phase(
    model: &mut TinyLM,
    items: &[EncodedItem],
    config: &TrainConfig,
    weights: LossWeights,
    phase: Phase,
    epochs: usize,
) -> Result<LossCurve, TrainError> {
    let mut adam = Adam::new(&model.params, config);
    let mut grads: Vec<Matrix> = model.params.iter().map(|p| Matrix::zeros(p.raw_dim())).collect();
    let mut curve = LossCurve::default();
    let mut step = 0;
    for epoch in 0..epochs {
        let order = epoch_order(items.len(), config.seed, epoch);
        for batch in order.chunks(config.batch_size) {
            grads.iter_mut().for_each(|g| g.fill(0.0));
            let scale = 1.0 / batch.len() as f64;
            let (mut lc, mut lp, mut ljs) = (0.0, 0.0, 0.0);
            for &i in batch {
                let (c, p, j) = item_step(model, &items[i], weights, scale, &mut grads)?;
                lc += c * scale;
                lp += p * scale;
                ljs += j * scale;
            }
            adam.step(&mut model.params, &grads, config.lr_at(step));
            curve.records.push(LossRecord {
                phase,
                epoch,
                step,
                clean: lc,
                perturbed: lp,
                js: ljs,
                total: combined_loss(lc, lp, ljs, weights),
            });
            step += 1;
        }
    }
    Ok(curve)
}

/// Supervised fine-tuning on rendered training prompts.
pub fn train_sft(
    model: &mut TinyLM,
    vocab: &Vocab,
    examples: &[Example],
    spec: FormatSpec,
    config: &TrainConfig,
) -> Result<LossCurve, TrainError> {
    config.validate()?;
    let ctx = model.config.context_length;
    let items = examples
        .iter()
        .map(|e| {
            Ok(EncodedItem {
                clean: encode_checked(vocab, e, spec, ctx)?,
                perturbed: None,
                kind: PerturbationKind::Synonym,
                id: e.id.clone(),
            })
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    let weights = LossWeights::new(1.0, 0.0, 0.0);
    run_phase(model, &items, config, weights, Phase::Sft, config.sft_epochs)
}

/// Consistency fine-tuning over clean examples and their counterparts.
pub fn train_ppcl(
    model: &mut TinyLM,
    vocab: &Vocab,
    items: &[PpclItem],
    spec: FormatSpec,
    config: &TrainConfig,
) -> Result<LossCurve, TrainError> {
    config.validate()?;
    let ctx = model.config.context_length;
    let encoded = items
        .iter()
        .map(|it| {
            let clean = encode_checked(vocab, &it.clean, spec, ctx)?;
            let perturbed = it
                .perturbed
                .as_ref()
                .map(|p| encode_checked(vocab, p, spec, ctx))
                .transpose()?;
            if let (Some(p), true) = (&perturbed, it.kind.is_word_level()) {
                paired_rows(&clean.mask, &p.mask).map_err(|source| TrainError::PairMismatch {
                    id: it.clean.id.clone(),
                    source,
                })?;
            }
            Ok(EncodedItem {
                clean,
                perturbed,
                kind: it.kind,
                id: it.clean.id.clone(),
            })
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    run_phase(model, &encoded, config, config.weights, Phase::Ppcl, config.ppcl_epochs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_fixture, OTHER};
    use crate::nnkit::gradcheck::grad_check;
    use crate::nnkit::{build_vocab, ModelConfig};
    use ndarray::array;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn cross_entropy_cases() {
        let one_hot = array![[0.0, 1.0], [1.0, 0.0]];
        assert_eq!(cross_entropy(&one_hot, &[1, 0], &[true, true]).unwrap(), 0.0);
        let uniform = Matrix::from_elem((3, 4), 0.25);
        let ce = cross_entropy(&uniform, &[0, 1, 2], &[true, true, false]).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-12);
        let mut other = uniform.clone();
        other.row_mut(2).assign(&array![0.7, 0.1, 0.1, 0.1]);
        assert_eq!(cross_entropy(&other, &[0, 1, 2], &[true, true, false]).unwrap(), ce);
        assert!(matches!(cross_entropy(&uniform, &[0, 1, 2], &[false; 3]), Err(LossError::EmptyMask)));
    }

    #[test]
    fn js_cases() {
        assert!((js_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - LN2).abs() < 1e-12);
        assert_eq!(js_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!(js_divergence(&[0.5, 0.6], &[0.5, 0.5]).is_err());
        assert!(js_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn token_and_mean_js_cases() {
        let a = array![[1.0, 0.0], [0.5, 0.5]];
        let b = array![[0.0, 1.0], [0.5, 0.5]];
        let both = [true, true];
        assert!((token_js_loss(&a, &b, &both, &both).unwrap() - LN2 / 2.0).abs() < 1e-12);
        let single = token_js_loss(&a, &b, &[true, false], &[true, false]).unwrap();
        assert_eq!(single, js_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap());
        assert!(token_js_loss(&a, &b, &[true, true], &[true, false]).is_err());

        let c = Matrix::from_shape_fn((3, 2), |(_, k)| [0.2, 0.8][k]);
        let d = Matrix::from_shape_fn((5, 2), |(_, k)| [0.2, 0.8][k]);
        assert!(mean_dist_js_loss(&c, &d, &[true; 3], &[true; 5]).unwrap().abs() < 1e-15);
        let m = mean_dist_js_loss(&a, &b, &[true, false], &[true, false]).unwrap();
        assert!((m - LN2).abs() < 1e-12);
        assert!(matches!(mean_dist_js_loss(&c, &d, &[false; 3], &[true; 5]), Err(LossError::EmptyMask)));
    }

    #[test]
    fn weights_and_combination() {
        assert_eq!(combined_loss(0.5, 0.3, 0.2, LossWeights::FULL), 1.0);
        assert_eq!(combined_loss(0.5, 0.3, 0.2, LossWeights::new(1.0, 0.0, 0.0)), 0.5);
        assert!(LossWeights::new(0.0, 0.0, 0.0).validate().is_err());
        assert!(LossWeights::new(1.0, -1.0, 0.0).validate().is_err());
    }

    #[test]
    fn warmup_schedule() {
        let c = TrainConfig::default();
        assert!((c.lr_at(0) - 3e-6).abs() < 1e-18);
        assert_eq!(c.lr_at(99), 3e-4);
        assert_eq!(c.lr_at(5000), 3e-4);
    }

    fn dist(raw: &[f64]) -> Vec<f64> {
        let s: f64 = raw.iter().sum();
        raw.iter().map(|x| x / s).collect()
    }

    proptest! {
        #[test]
        fn js_bounds_and_symmetry(a in proptest::collection::vec(0.0f64..1.0, 5), b in proptest::collection::vec(0.0f64..1.0, 5)) {
            prop_assume!(a.iter().sum::<f64>() > 1e-3 && b.iter().sum::<f64>() > 1e-3);
            let (p, q) = (dist(&a), dist(&b));
            let pq = js_divergence(&p, &q).unwrap();
            let qp = js_divergence(&q, &p).unwrap();
            prop_assert!((pq - qp).abs() < 1e-12);
            prop_assert!((-1e-15..=LN2 + 1e-12).contains(&pq));
            prop_assert!(js_divergence(&p, &p).unwrap().abs() < 1e-12);
        }

        #[test]
        fn sequence_losses_are_swap_invariant(raw in proptest::collection::vec(0.01f64..1.0, 12)) {
            let a = Matrix::from_shape_vec((2, 3), dist(&raw[..6]).iter().map(|x| x * 2.0).collect()).unwrap();
            let b = Matrix::from_shape_vec((2, 3), dist(&raw[6..]).iter().map(|x| x * 2.0).collect()).unwrap();
            let norm = |m: Matrix| {
                let mut m = m;
                for mut r in m.rows_mut() { let s = r.sum(); r /= s; }
                m
            };
            let (a, b) = (norm(a), norm(b));
            let mask = [true, true];
            let t1 = token_js_loss(&a, &b, &mask, &mask).unwrap();
            let t2 = token_js_loss(&b, &a, &mask, &mask).unwrap();
            prop_assert!((t1 - t2).abs() < 1e-12);
            let m1 = mean_dist_js_loss(&a, &b, &mask, &mask).unwrap();
            let m2 = mean_dist_js_loss(&b, &a, &mask, &mask).unwrap();
            prop_assert!((m1 - m2).abs() < 1e-12);
        }
    }

    fn small_model(vocab: &Vocab) -> TinyLM {
        TinyLM::new(ModelConfig {
            vocab_size: vocab.len(),
            context_length: 96,
            embed_dim: 16,
            n_layers: 1,
            n_heads: 2,
            seed: 3,
        })
        .unwrap()
    }

    fn fixture_vocab(examples: &[Example], spec: FormatSpec) -> Vocab {
        let texts: Vec<String> = examples.iter().map(|e| render(e, spec, Mode::Training)).collect();
        build_vocab(texts.iter().map(String::as_str), 16).unwrap()
    }

    #[test]
    fn encoded_mask_covers_response() {
        let (train, _) = synth_fixture(1, 4, 1);
        let spec = FormatSpec::default();
        let vocab = fixture_vocab(&train.examples, spec);
        let e = &train.examples[0];
        let s = encode_sample(&vocab, e, spec);
        assert_eq!(s.input.len(), s.targets.len());
        assert_eq!(s.input[1..], s.targets[..s.targets.len() - 1]);
        assert_eq!(*s.targets.last().unwrap(), EOS_ID);
        let first = s.mask.iter().position(|&m| m).unwrap();
        assert_eq!(vocab.token(s.input[first]), "Domain:");
        assert!(s.mask[first..].iter().all(|&m| m));
    }

    #[test]
    fn tape_losses_match_value_functions() {
        let (train, _) = synth_fixture(2, 2, 1);
        let spec = FormatSpec::default();
        let vocab = fixture_vocab(&train.examples, spec);
        let model = small_model(&vocab);
        let a = encode_sample(&vocab, &train.examples[0], spec);
        let b = encode_sample(&vocab, &train.examples[1], spec);
        let mut tape = Tape::new(&model.params);
        let (pa, la) = tape_cross_entropy(&model, &mut tape, &a).unwrap();
        let (pb, _) = tape_cross_entropy(&model, &mut tape, &b).unwrap();
        let ce = cross_entropy(tape.value(pa), &a.targets, &a.mask).unwrap();
        assert!((tape.scalar(la) - ce).abs() < 1e-12);
        let mj = tape_js(&mut tape, PerturbationKind::Paraphrase, (pa, &a), (pb, &b)).unwrap();
        let mv = mean_dist_js_loss(tape.value(pa), tape.value(pb), &a.mask, &b.mask).unwrap();
        assert!((tape.scalar(mj) - mv).abs() < 1e-12);
    }

    fn pert_twin(e: &Example, swap: (&str, &str)) -> Example {
        let tokens = e.tokens.iter().map(|t| if t == swap.0 { swap.1.to_string() } else { t.clone() }).collect();
        Example::new(format!("{}~p", e.id), tokens, e.domain.clone(), e.intent.clone(), e.tags.clone()).unwrap()
    }

    #[test]
    fn gradients_of_every_loss_composition() {
        let (train, _) = synth_fixture(3, 2, 1);
        let spec = FormatSpec::default();
        let clean = train.examples[0].clone();
        let word = pert_twin(&clean, (&clean.tokens[0].clone(), "zz"));
        let mut para_tokens = clean.tokens.clone();
        para_tokens.insert(0, "please".into());
        let mut para_tags = clean.tags.clone();
        para_tags.insert(0, OTHER.into());
        let para = Example::new("p", para_tokens, clean.domain.clone(), clean.intent.clone(), para_tags).unwrap();
        let vocab = fixture_vocab(&[clean.clone(), word.clone(), para.clone()], spec);
        let model = small_model(&vocab);
        let c = encode_sample(&vocab, &clean, spec);
        let w = encode_sample(&vocab, &word, spec);
        let p = encode_sample(&vocab, &para, spec);
        let check = |f: &dyn for<'a> Fn(&'a TinyLM, &mut Tape<'a>) -> Result<Var, ModelError>| {
            let r = grad_check(&model, f, 1e-3, 200, 1).unwrap();
            assert!(r.max_rel_error < 1e-4, "{r:?}");
        };
        check(&|m, t| Ok(tape_cross_entropy(m, t, &c)?.1));
        check(&|m, t| {
            let (a, _) = tape_cross_entropy(m, t, &c)?;
            let (b, _) = tape_cross_entropy(m, t, &w)?;
            Ok(tape_js(t, PerturbationKind::Synonym, (a, &c), (b, &w)).unwrap())
        });
        check(&|m, t| {
            let (a, _) = tape_cross_entropy(m, t, &c)?;
            let (b, _) = tape_cross_entropy(m, t, &p)?;
            Ok(tape_js(t, PerturbationKind::Paraphrase, (a, &c), (b, &p)).unwrap())
        });
        check(&|m, t| {
            let (a, la) = tape_cross_entropy(m, t, &c)?;
            let (b, lb) = tape_cross_entropy(m, t, &w)?;
            let js = tape_js(t, PerturbationKind::Oronym, (a, &c), (b, &w)).unwrap();
            Ok(t.weighted_sum(&[(la, 1.0), (lb, 1.0), (js, 1.0)]))
        });
    }

    #[test]
    fn sft_descends_and_is_deterministic() {
        let (train, _) = synth_fixture(4, 64, 1);
        let spec = FormatSpec::default();
        let vocab = fixture_vocab(&train.examples, spec);
        let config = TrainConfig {
            learning_rate: 3e-3,
            warmup_steps: 4,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let mut a = small_model(&vocab);
        let curve = train_sft(&mut a, &vocab, &train.examples, spec, &config).unwrap();
        let means = curve.epoch_means(Phase::Sft);
        assert_eq!(means.len(), 5);
        assert!(means[4] < means[0], "{means:?}");
        let mut b = small_model(&vocab);
        train_sft(&mut b, &vocab, &train.examples, spec, &config).unwrap();
        assert_eq!(a, b);
        assert!(curve.to_csv().starts_with("phase,epoch,step,l_clean,l_perturbed,l_js,l_total\nsft,0,0,"));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (train, _) = synth_fixture(5, 8, 1);
        let spec = FormatSpec::default();
        let vocab = fixture_vocab(&train.examples, spec);
        let mut m = small_model(&vocab);
        let before = m.clone();
        let config = TrainConfig {
            learning_rate: 0.0,
            sft_epochs: 1,
            ..TrainConfig::default()
        };
        train_sft(&mut m, &vocab, &train.examples, spec, &config).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn unpaired_ppcl_step_equals_sft_step() {
        let (train, _) = synth_fixture(6, 8, 1);
        let spec = FormatSpec::default();
        let vocab = fixture_vocab(&train.examples, spec);
        let config = TrainConfig {
            sft_epochs: 1,
            ppcl_epochs: 1,
            batch_size: 8,
            weights: LossWeights::PERTURB_ONLY,
            ..TrainConfig::default()
        };
        let mut a = small_model(&vocab);
        let mut b = a.clone();
        train_sft(&mut a, &vocab, &train.examples, spec, &config).unwrap();
        let items: Vec<PpclItem> = train
            .examples
            .iter()
            .map(|e| PpclItem {
                clean: e.clone(),
                perturbed: None,
                kind: PerturbationKind::Synonym,
            })
            .collect();
        train_ppcl(&mut b, &vocab, &items, spec, &config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identical_pairs_have_zero_js() {
        let (train, _) = synth_fixture(7, 6, 1);
        let spec = FormatSpec::default();
        let vocab = fixture_vocab(&train.examples, spec);
        let mut m = small_model(&vocab);
        let items: Vec<PpclItem> = train
            .examples
            .iter()
            .map(|e| PpclItem {
                clean: e.clone(),
                perturbed: Some(e.clone()),
                kind: PerturbationKind::Synonym,
            })
            .collect();
        let config = TrainConfig {
            ppcl_epochs: 2,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let curve = train_ppcl(&mut m, &vocab, &items, spec, &config).unwrap();
        assert!(curve.records.iter().all(|r| r.js.abs() < 1e-12));
    }

    #[test]
    fn overflow_names_the_example() {
        let (train, _) = synth_fixture(8, 3, 1);
        let spec = FormatSpec::default();
        let vocab = fixture_vocab(&train.examples, spec);
        let mut m = TinyLM::new(ModelConfig {
            context_length: 20,
            ..small_model(&vocab).config
        })
        .unwrap();
        match train_sft(&mut m, &vocab, &train.examples, spec, &TrainConfig::default()) {
            Err(TrainError::PromptOverflow { id, .. }) => assert_eq!(id, train.examples[0].id),
            other => panic!("{other:?}"),
        }
    }
}
