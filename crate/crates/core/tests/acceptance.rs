//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so the lines are always printed. The
//! process fails if any criterion fails, except criterion 1 when its failing
//! cells are exactly the known-inconsistent printed values listed below.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::Instant;

use ndarray::Array2;
use ppcl_core::dataset::{synth_fixture, Example, OTHER};
use ppcl_core::eval::published::{aggregation_oracle, pdr_oracle, recovery_oracle, OracleLine};
use ppcl_core::eval::{evaluate_pair_set, EvalReport, LmResponder};
use ppcl_core::nnkit::{build_vocab, grad_check, ModelConfig, ModelError, Tape, TinyLM, Var};
use ppcl_core::perturb::{
    build_paired_set, build_protected_vocab, Lexicons, PairedSet, PerturbationKind, Perturber,
    DEFAULT_MAX_WORDS, DEFAULT_THRESHOLD,
};
use ppcl_core::ppcl::{
    encode_sample, js_divergence, mean_dist_js_loss, ppcl_items, tape_cross_entropy, tape_js, token_js_loss,
    train_ppcl, train_sft, LossWeights, TrainConfig,
};
use ppcl_core::promptfmt::{parse_response, render, FormatSpec, Mode};

/// Printed cells whose PDR disagrees with their own clean/perturbed scores.
const KNOWN_INCONSISTENT: [&str; 5] = [
    "massive/oronym/GPT2+SFT/SF",
    "massive/paraphrase/LLaMA-7b+SFT/IC",
    "atis/synonym/JointBERT/SF",
    "atis/paraphrase/GPT3.5-ZS/IC",
    "snips/paraphrase/JointBERT/SF",
];

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn oracle_outcome(lines: &[OracleLine]) -> (Outcome, Vec<String>) {
    let failed: Vec<String> = lines.iter().filter(|l| !l.pass()).map(|l| l.render()).collect();
    let detail = format!("{}/{} values within tolerance", lines.len() - failed.len(), lines.len());
    (Outcome::new(failed.is_empty(), detail), failed)
}

fn criterion_1() -> (Outcome, bool) {
    let lines = pdr_oracle();
    let (out, failed) = oracle_outcome(&lines);
    for f in &failed {
        println!("    {f}");
    }
    let failing: BTreeSet<&str> = lines
        .iter()
        .filter(|l| !l.pass())
        .map(|l| l.label.as_str())
        .collect();
    let known: BTreeSet<&str> = KNOWN_INCONSISTENT.into_iter().collect();
    (out, failing == known)
}

fn criterion_2() -> Outcome {
    let lines = aggregation_oracle();
    for l in &lines {
        println!("    {}", l.render());
    }
    oracle_outcome(&lines).0
}

fn criterion_3() -> Outcome {
    let lines = recovery_oracle();
    for l in &lines {
        println!("    {}", l.render());
    }
    oracle_outcome(&lines).0
}

fn dist(raw: &[f64]) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    raw.iter().map(|x| x / s).collect()
}

fn criterion_4() -> Outcome {
    let ln2 = std::f64::consts::LN_2;
    let mut bad = Vec::new();
    // deterministic pseudo-random distributions
    let mut state = 0x9e37_79b9_7f4a_7c15u64;
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    for _ in 0..500 {
        let p = dist(&(0..6).map(|_| next() + 1e-6).collect::<Vec<_>>());
        let q = dist(&(0..6).map(|_| next() + 1e-6).collect::<Vec<_>>());
        let pq = js_divergence(&p, &q).unwrap();
        let qp = js_divergence(&q, &p).unwrap();
        if (pq - qp).abs() > 1e-9 {
            bad.push("symmetry");
        }
        if !(-1e-9..=ln2 + 1e-9).contains(&pq) {
            bad.push("bounds");
        }
        if js_divergence(&p, &p).unwrap().abs() > 1e-9 {
            bad.push("identity");
        }
        let single = token_js_loss(
            &Array2::from_shape_vec((1, 6), p.clone()).unwrap(),
            &Array2::from_shape_vec((1, 6), q.clone()).unwrap(),
            &[true],
            &[true],
        )
        .unwrap();
        if (single - pq).abs() > 1e-9 {
            bad.push("single-token reduction");
        }
    }
    if (js_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - ln2).abs() > 1e-9 {
        bad.push("disjoint = ln 2");
    }
    let row = dist(&[1.0, 2.0, 3.0, 4.0]);
    let a = Array2::from_shape_fn((5, 4), |(_, j)| row[j]);
    let b = Array2::from_shape_fn((8, 4), |(_, j)| row[j]);
    if mean_dist_js_loss(&a, &b, &[true; 5], &[true; 8]).unwrap().abs() > 1e-9 {
        bad.push("constant sequences of unequal length");
    }
    bad.dedup();
    Outcome::new(bad.is_empty(), if bad.is_empty() { "500 random pairs plus fixed cases".into() } else { bad.join(", ") })
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let (train, _) = synth_fixture(5, 3, 1);
    let spec = FormatSpec::default();
    let clean = train.examples[0].clone();
    let mut swapped = clean.tokens.clone();
    swapped[0] = "zz".into();
    let word = Example::new("w", swapped, clean.domain.clone(), clean.intent.clone(), clean.tags.clone()).unwrap();
    let mut ptoks = clean.tokens.clone();
    ptoks.insert(0, "please".into());
    let mut ptags = clean.tags.clone();
    ptags.insert(0, OTHER.into());
    let para = Example::new("p", ptoks, clean.domain.clone(), clean.intent.clone(), ptags).unwrap();
    let texts: Vec<String> = [&clean, &word, &para].iter().map(|e| render(e, spec, Mode::Training)).collect();
    let vocab = build_vocab(texts.iter().map(String::as_str), 32).unwrap();
    let model = TinyLM::new(ModelConfig::desk(vocab.len(), 5)).unwrap();
    let (c, w, p) = (
        encode_sample(&vocab, &clean, spec),
        encode_sample(&vocab, &word, spec),
        encode_sample(&vocab, &para, spec),
    );
    type Loss<'s> = Box<dyn for<'a> Fn(&'a TinyLM, &mut Tape<'a>) -> Result<Var, ModelError> + 's>;
    let losses: Vec<(&str, Loss)> = vec![
        ("cross-entropy", Box::new(|m, t| Ok(tape_cross_entropy(m, t, &c)?.1))),
        (
            "token JS",
            Box::new(|m, t| {
                let (a, _) = tape_cross_entropy(m, t, &c)?;
                let (b, _) = tape_cross_entropy(m, t, &w)?;
                Ok(tape_js(t, PerturbationKind::Synonym, (a, &c), (b, &w)).expect("paired masks"))
            }),
        ),
        (
            "mean-distribution JS",
            Box::new(|m, t| {
                let (a, _) = tape_cross_entropy(m, t, &c)?;
                let (b, _) = tape_cross_entropy(m, t, &p)?;
                Ok(tape_js(t, PerturbationKind::Paraphrase, (a, &c), (b, &p)).expect("non-empty masks"))
            }),
        ),
        (
            "combined",
            Box::new(|m, t| {
                let (a, la) = tape_cross_entropy(m, t, &c)?;
                let (b, lb) = tape_cross_entropy(m, t, &w)?;
                let js = tape_js(t, PerturbationKind::Synonym, (a, &c), (b, &w)).expect("paired masks");
                Ok(t.weighted_sum(&[(la, 1.0), (lb, 1.0), (js, 1.0)]))
            }),
        ),
    ];
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (name, f) in &losses {
        let r = grad_check(&model, f, 1e-3, 64, 11).expect("finite gradients");
        worst = worst.max(r.max_rel_error);
        parts.push(format!("{name} {:.1e}", r.max_rel_error));
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        worst < 1e-4 && secs < 60.0,
        format!("max rel error {worst:.2e} ({}) in {secs:.1}s", parts.join(", ")),
    )
}

fn criterion_6() -> Outcome {
    let (train, test) = synth_fixture(7, 2000, 200);
    let mut checked = 0;
    let mut failed = 0;
    for ex in train.examples.iter().chain(&test.examples) {
        for spec in FormatSpec::ALL {
            checked += 1;
            let text = render(ex, spec, Mode::Training);
            match parse_response(&text, spec, ex.tokens.len()) {
                Ok(h) if h.domain == ex.domain && h.intent == ex.intent && h.tags == ex.tags => {}
                _ => failed += 1,
            }
        }
    }
    Outcome::new(failed == 0, format!("{}/{checked} render/parse round trips", checked - failed))
}

fn criterion_7() -> Outcome {
    let (train, _) = synth_fixture(7, 2000, 200);
    let lexicons = Lexicons::fixture();
    let protected = build_protected_vocab(&train);
    let perturber = Perturber::new(&lexicons, &protected);
    let mut generated = Vec::new();
    'outer: for (i, ex) in train.examples.iter().enumerate() {
        for kind in [PerturbationKind::Synonym, PerturbationKind::Oronym] {
            for p in perturber.candidates(ex, kind, 1000 + i as u64, 2) {
                generated.push((ex, p));
                if generated.len() == 1000 {
                    break 'outer;
                }
            }
        }
    }
    let mut violations = Vec::new();
    for (ex, p) in &generated {
        if p.tokens.len() != ex.tokens.len() || p.tags != ex.tags {
            violations.push(format!("{}: token count or tags changed", ex.id));
        }
        if p.replaced_positions.is_empty() || p.replaced_positions.len() > DEFAULT_MAX_WORDS {
            violations.push(format!("{}: {} replacements", ex.id, p.replaced_positions.len()));
        }
        for (j, (a, b)) in ex.tokens.iter().zip(&p.tokens).enumerate() {
            let replaced = p.replaced_positions.contains(&j);
            if (a != b && !replaced) || (replaced && protected.contains(a)) {
                violations.push(format!("{}: position {j} touched", ex.id));
            }
        }
    }
    let perturbed: Vec<_> = generated.iter().map(|(_, p)| p.clone()).collect();
    for kind in [PerturbationKind::Synonym, PerturbationKind::Oronym] {
        let set = build_paired_set(&train, &perturbed, kind, DEFAULT_THRESHOLD).expect("ids resolve");
        let ids: BTreeSet<&str> = set.pairs.iter().map(|(c, _)| c.id.as_str()).collect();
        if ids.len() != set.len() {
            violations.push(format!("{kind}: duplicate clean ids"));
        }
        for (c, p) in &set.pairs {
            if p.clean_id != c.id || p.kind != kind || p.similarity < DEFAULT_THRESHOLD {
                violations.push(format!("{kind}: bad pair {}", c.id));
            }
        }
    }
    let detail = if violations.is_empty() {
        format!("{} perturbations, all invariants hold", generated.len())
    } else {
        format!("{} violations, first: {}", violations.len(), violations[0])
    };
    Outcome::new(generated.len() == 1000 && violations.is_empty(), detail)
}

struct Experiment {
    baseline: EvalReport,
    combined: EvalReport,
    perturb_only: EvalReport,
    secs: f64,
}

fn evaluate(run: &str, model: &TinyLM, vocab: &ppcl_core::nnkit::Vocab, pairs: &PairedSet, spec: FormatSpec) -> EvalReport {
    let responder = LmResponder {
        model,
        vocab,
        max_new: 60,
    };
    evaluate_pair_set(run, &responder, pairs, spec).expect("evaluation runs")
}

/// SFT, then two consistency fine-tunings from the same checkpoint, all
/// scored on the synonym test pairs.
fn synonym_experiment() -> Experiment {
    let start = Instant::now();
    let spec = FormatSpec::default();
    let kind = PerturbationKind::Synonym;
    let (train, test) = synth_fixture(7, 2000, 200);
    let lexicons = Lexicons::fixture();
    let protected = build_protected_vocab(&train);
    let perturber = Perturber::new(&lexicons, &protected);
    let pair = |ds| {
        let cands = perturber.perturb_dataset(ds, kind, 7, 8);
        build_paired_set(ds, &cands, kind, DEFAULT_THRESHOLD).expect("ids resolve")
    };
    let (train_pairs, test_pairs) = (pair(&train), pair(&test));
    let mut texts: Vec<String> = train.examples.iter().map(|e| render(e, spec, Mode::Training)).collect();
    texts.extend(
        train_pairs
            .pairs
            .iter()
            .map(|(c, p)| render(&p.to_example(c, "_"), spec, Mode::Training)),
    );
    let vocab = build_vocab(texts.iter().map(String::as_str), 32).expect("fixture fits 32 sentinels");
    let mut model = TinyLM::new(ModelConfig::desk(vocab.len(), 7)).expect("valid config");
    let mut config = TrainConfig {
        seed: 7,
        ..TrainConfig::default()
    };
    train_sft(&mut model, &vocab, &train.examples, spec, &config).expect("sft runs");
    let baseline = evaluate("sft", &model, &vocab, &test_pairs, spec);
    let items = ppcl_items(&train.examples, &train_pairs);
    let mut tuned = |weights, run: &str| {
        let mut m = model.clone();
        config.weights = weights;
        train_ppcl(&mut m, &vocab, &items, spec, &config).expect("ppcl runs");
        evaluate(run, &m, &vocab, &test_pairs, spec).with_recovery(&baseline)
    };
    let combined = tuned(LossWeights::FULL, "ppcl-1-1-1");
    let perturb_only = tuned(LossWeights::PERTURB_ONLY, "ppcl-1-1-0");
    Experiment {
        baseline,
        combined,
        perturb_only,
        secs: start.elapsed().as_secs_f64(),
    }
}

fn describe(r: &EvalReport) -> String {
    let f = |x: Option<f64>| x.map_or("NA".to_string(), |v| format!("{v:.2}"));
    format!(
        "{}: IC {:.3}/{:.3} PDR {}, SF {:.3}/{:.3} PDR {}",
        r.run_id,
        r.clean_ic,
        r.pert_ic,
        f(r.ic_pdr),
        r.clean_sf,
        r.pert_sf,
        f(r.sf_pdr)
    )
}

fn criterion_8(e: &Experiment) -> Outcome {
    let (b, c) = (&e.baseline, &e.combined);
    let lower = |base: Option<f64>, mit: Option<f64>| matches!((base, mit), (Some(x), Some(y)) if x > 0.0 && y < x);
    let pass = lower(b.ic_pdr, c.ic_pdr)
        && lower(b.sf_pdr, c.sf_pdr)
        && (b.clean_ic - c.clean_ic) * 100.0 < 2.0
        && e.secs < 900.0;
    Outcome::new(
        pass,
        format!("{}; {}; clean IC change {:+.2} points; {:.0}s", describe(b), describe(c), (c.clean_ic - b.clean_ic) * 100.0, e.secs),
    )
}

fn criterion_9(e: &Experiment) -> Outcome {
    let (c, p) = (&e.combined, &e.perturb_only);
    let pass = matches!((c.sf_pdr, p.sf_pdr), (Some(x), Some(y)) if x <= y);
    Outcome::new(pass, format!("{}; {}", describe(c), describe(p)))
}

fn report(n: usize, name: &str, o: &Outcome) {
    println!("{} criterion {n} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn main() -> ExitCode {
    let mut ok = true;
    let (c1, c1_known) = criterion_1();
    report(1, "PDR oracle", &c1);
    if !c1.pass {
        println!(
            "    criterion 1: {} failing cells are the documented printed inconsistencies",
            if c1_known { "all" } else { "NOT all" }
        );
    }
    ok &= c1.pass || c1_known;
    type Check = fn() -> Outcome;
    let quick: [(&str, Check); 6] = [
        ("aggregation oracle", criterion_2),
        ("recovery oracle", criterion_3),
        ("JS properties", criterion_4),
        ("gradient check", criterion_5),
        ("render/parse round trip", criterion_6),
        ("perturbation invariants", criterion_7),
    ];
    for (i, (name, f)) in quick.iter().enumerate() {
        let o = f();
        report(i + 2, name, &o);
        ok &= o.pass;
    }
    let e = synonym_experiment();
    for (n, name, o) in [(8, "end-to-end direction", criterion_8(&e)), (9, "ablation ordering", criterion_9(&e))] {
        report(n, name, &o);
        ok &= o.pass;
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
