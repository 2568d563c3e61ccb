//! Subcommand implementations. Each stage reads its inputs from disk and
//! writes its outputs plus a `.provenance.json` sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use ppcl_core::dataset::{load_dataset, synth_fixture, Dataset, Split};
use ppcl_core::eval::published::{aggregation_oracle, pdr_oracle, recovery_oracle};
use ppcl_core::eval::{
    evaluate_pair_set, parse_reports, reports_to_csv, reports_to_jsonl, CopyOracle, EvalReport, Garbage,
    LmResponder, Responder,
};
use ppcl_core::lexicon::{load_pronouncing, load_thesaurus};
use ppcl_core::nnkit::{build_vocab, ModelConfig, TinyLM, Vocab};
use ppcl_core::perturb::{
    augment, build_paired_set, build_protected_vocab, parse_perturbed, Lexicons, PairedSet, ParaphraseBank,
    PerturbationKind, Perturber,
};
use ppcl_core::ppcl::{ppcl_items, train_ppcl, train_sft, LossCurve, LossWeights};
use ppcl_core::promptfmt::{render, Mode};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{runtime, CliError, Command};

pub fn parse_weights(s: &str) -> Result<LossWeights, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    let [clean, perturbed, js] = parts[..] else {
        return Err("expected three comma-separated weights".into());
    };
    let w = LossWeights::new(clean, perturbed, js);
    w.validate().map_err(|e| e.to_string())?;
    Ok(w)
}

#[derive(Serialize)]
struct Provenance<'a> {
    command: &'a str,
    seed: u64,
    inputs: Vec<String>,
    config: &'a RunConfig,
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    command: &'static str,
}

impl Ctx<'_> {
    fn write(&self, path: &Path, text: &str, inputs: &[&Path]) -> Result<(), CliError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("create {}: {e}", dir.display())))?;
        }
        fs::write(path, text).map_err(|e| CliError::Runtime(format!("write {}: {e}", path.display())))?;
        self.provenance(path, inputs)
    }

    fn provenance(&self, artifact: &Path, inputs: &[&Path]) -> Result<(), CliError> {
        let record = Provenance {
            command: self.command,
            seed: self.cfg.seed,
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            config: self.cfg,
        };
        let mut name = artifact.as_os_str().to_owned();
        name.push(".provenance.json");
        let text = serde_json::to_string_pretty(&record).expect("provenance serializes") + "\n";
        fs::write(PathBuf::from(name), text).map_err(|e| CliError::Runtime(format!("write provenance: {e}")))
    }
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("missing input {}", path.display())))
    }
}

fn load_split(path: &Path, split: Split) -> Result<Dataset, CliError> {
    require(path)?;
    load_dataset(path, split).map_err(runtime)
}

fn lexicons(cfg: &RunConfig) -> Result<Lexicons, CliError> {
    let mut lex = Lexicons::fixture();
    if let Some(p) = &cfg.paths.pronouncing {
        lex.pronouncing = load_pronouncing(p).map_err(runtime)?;
    }
    if let Some(p) = &cfg.paths.thesaurus {
        lex.thesaurus = load_thesaurus(p).map_err(runtime)?;
    }
    lex.max_phoneme_edits = cfg.max_phoneme_edits;
    Ok(lex)
}

fn paraphrase_bank(cfg: &RunConfig) -> Result<Option<ParaphraseBank>, CliError> {
    cfg.paths
        .paraphrases
        .as_ref()
        .map(|p| ParaphraseBank::load(p).map_err(runtime))
        .transpose()
}

fn parse_split(name: &str) -> Result<Split, CliError> {
    match name {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(CliError::Validation(format!("unknown split {other:?}"))),
    }
}

fn split_path(cfg: &RunConfig, split: Split) -> PathBuf {
    match split {
        Split::Train => cfg.train_path(),
        _ => cfg.test_path(),
    }
}

fn paired_set(cfg: &RunConfig, dataset: &Dataset, split: &str, kind: PerturbationKind) -> Result<PairedSet, CliError> {
    let path = cfg.perturbed_path(split, kind);
    require(&path)?;
    let text = fs::read_to_string(&path).map_err(|e| CliError::Runtime(format!("read {}: {e}", path.display())))?;
    let items = parse_perturbed(&text).map_err(runtime)?;
    build_paired_set(dataset, &items, kind, cfg.threshold).map_err(runtime)
}

fn single_kind(cfg: &RunConfig) -> Result<PerturbationKind, CliError> {
    match cfg.parsed_kinds()?[..] {
        [k] => Ok(k),
        _ => Err(CliError::Validation("this stage needs exactly one --kind".into())),
    }
}

fn save_model(ctx: &Ctx, dir: &Path, model: &TinyLM, vocab: &Vocab, curve: &LossCurve, inputs: &[&Path]) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("create {}: {e}", dir.display())))?;
    let model_path = dir.join("model.bin");
    model.save(&model_path).map_err(runtime)?;
    ctx.provenance(&model_path, inputs)?;
    ctx.write(&dir.join("vocab.txt"), &vocab.to_text(), inputs)?;
    ctx.write(&dir.join("loss.csv"), &curve.to_csv(), inputs)
}

fn load_model(dir: &Path) -> Result<(TinyLM, Vocab), CliError> {
    let (m, v) = (dir.join("model.bin"), dir.join("vocab.txt"));
    require(&m)?;
    require(&v)?;
    Ok((TinyLM::load(&m).map_err(runtime)?, Vocab::load(&v).map_err(runtime)?))
}

pub fn dispatch(command: &Command, cfg: &RunConfig) -> Result<(), CliError> {
    match command {
        Command::Synth { n_train, n_test } => synth(cfg, n_train.unwrap_or(cfg.synth.n_train), n_test.unwrap_or(cfg.synth.n_test)),
        Command::Perturb { splits } => perturb(cfg, splits),
        Command::Augment { k } => augment_cmd(cfg, k.unwrap_or(cfg.augment_k)),
        Command::TrainSft { train, name, epochs, lr } => {
            let mut cfg = cfg.clone();
            if let Some(t) = train {
                cfg.paths.train = Some(t.clone());
            }
            cfg.train.sft_epochs = epochs.unwrap_or(cfg.train.sft_epochs);
            cfg.train.learning_rate = lr.unwrap_or(cfg.train.learning_rate);
            sft(&cfg, name)
        }
        Command::TrainPpcl { init, name, weights, epochs, lr } => {
            let mut cfg = cfg.clone();
            cfg.train.weights = weights.unwrap_or(cfg.train.weights);
            cfg.train.ppcl_epochs = epochs.unwrap_or(cfg.train.ppcl_epochs);
            cfg.train.learning_rate = lr.unwrap_or(cfg.train.learning_rate);
            ppcl(&cfg, init, name.as_deref())
        }
        Command::Eval { model, responder, run_id } => eval(cfg, model.as_deref(), responder.as_deref(), run_id.as_deref()),
        Command::Report { baseline, mitigated } => report(cfg, baseline, mitigated),
        Command::OracleCheck => oracle_check(),
    }
}

fn synth(cfg: &RunConfig, n_train: usize, n_test: usize) -> Result<(), CliError> {
    if n_train == 0 || n_test == 0 {
        return Err(CliError::Validation("split sizes must be positive".into()));
    }
    let ctx = Ctx { cfg, command: "synth" };
    let (train, test) = synth_fixture(cfg.seed, n_train, n_test);
    ctx.write(&cfg.train_path(), &train.to_jsonl(), &[])?;
    ctx.write(&cfg.test_path(), &test.to_jsonl(), &[])?;
    println!("train {} examples -> {}", train.len(), cfg.train_path().display());
    println!("test {} examples -> {}", test.len(), cfg.test_path().display());
    Ok(())
}

fn perturb(cfg: &RunConfig, splits: &[String]) -> Result<(), CliError> {
    let ctx = Ctx { cfg, command: "perturb" };
    let lex = lexicons(cfg)?;
    let bank = paraphrase_bank(cfg)?;
    for name in splits {
        let split = parse_split(name)?;
        let path = split_path(cfg, split);
        let dataset = load_split(&path, split)?;
        // protected words come from the training label inventory
        let protected = build_protected_vocab(&load_split(&cfg.train_path(), Split::Train)?);
        let mut perturber = Perturber::new(&lex, &protected);
        if let Some(b) = &bank {
            perturber = perturber.with_paraphrases(b);
        }
        for kind in cfg.parsed_kinds()? {
            let cands = perturber.perturb_dataset(&dataset, kind, cfg.seed, cfg.attempts);
            let set = build_paired_set(&dataset, &cands, kind, cfg.threshold).map_err(runtime)?;
            let out = cfg.perturbed_path(name, kind);
            ctx.write(&out, &set.to_jsonl(), &[&path])?;
            println!("{name} {kind}: {}/{} pairs -> {}", set.len(), dataset.len(), out.display());
        }
    }
    Ok(())
}

fn augment_cmd(cfg: &RunConfig, k: usize) -> Result<(), CliError> {
    if k == 0 {
        return Err(CliError::Validation("k must be positive".into()));
    }
    let ctx = Ctx { cfg, command: "augment" };
    let lex = lexicons(cfg)?;
    let bank = paraphrase_bank(cfg)?;
    let path = cfg.train_path();
    let train = load_split(&path, Split::Train)?;
    let protected = build_protected_vocab(&train);
    let mut perturber = Perturber::new(&lex, &protected);
    if let Some(b) = &bank {
        perturber = perturber.with_paraphrases(b);
    }
    for kind in cfg.parsed_kinds()? {
        let aug = augment(&train, kind, k, cfg.seed, cfg.threshold, &perturber);
        let out = cfg.out_dir.join(format!("train-aug-{kind}.jsonl"));
        ctx.write(&out, &aug.to_jsonl(), &[&path])?;
        println!("{kind}: {} examples -> {}", aug.len(), out.display());
    }
    Ok(())
}

fn sft(cfg: &RunConfig, name: &str) -> Result<(), CliError> {
    let ctx = Ctx { cfg, command: "train-sft" };
    let spec = cfg.format_spec()?;
    let train_path = cfg.train_path();
    let train = load_split(&train_path, Split::Train)?;
    let mut texts: Vec<String> = train.examples.iter().map(|e| render(e, spec, Mode::Training)).collect();
    let mut inputs = vec![train_path.clone()];
    // perturbed training text joins the vocabulary so later consistency
    // tuning can learn embeddings for substituted words
    let clean = load_split(&cfg.out_dir.join("train.jsonl"), Split::Train).or_else(|_| Ok::<_, CliError>(train.clone()))?;
    for kind in cfg.parsed_kinds()? {
        let path = cfg.perturbed_path("train", kind);
        if path.exists() {
            let set = paired_set(cfg, &clean, "train", kind)?;
            texts.extend(set.perturbed_examples().iter().map(|e| render(e, spec, Mode::Training)));
            inputs.push(path);
        }
    }
    let vocab = build_vocab(texts.iter().map(String::as_str), cfg.model.max_sentinels).map_err(runtime)?;
    let m = &cfg.model;
    let mut model = TinyLM::new(ModelConfig {
        vocab_size: vocab.len(),
        context_length: m.context_length,
        embed_dim: m.embed_dim,
        n_layers: m.n_layers,
        n_heads: m.n_heads,
        seed: cfg.seed,
    })
    .map_err(|e| CliError::Validation(e.to_string()))?;
    let curve = train_sft(&mut model, &vocab, &train.examples, spec, &cfg.train).map_err(runtime)?;
    let dir = cfg.out_dir.join(name);
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    save_model(&ctx, &dir, &model, &vocab, &curve, &refs)?;
    println!("{name}: epoch means {:?} -> {}", curve.epoch_means(ppcl_core::ppcl::Phase::Sft), dir.display());
    Ok(())
}

fn weights_tag(w: LossWeights) -> String {
    format!("{}-{}-{}", w.clean, w.perturbed, w.js)
}

fn ppcl(cfg: &RunConfig, init: &str, name: Option<&str>) -> Result<(), CliError> {
    let ctx = Ctx { cfg, command: "train-ppcl" };
    let spec = cfg.format_spec()?;
    let kind = single_kind(cfg)?;
    let init_dir = cfg.out_dir.join(init);
    let (mut model, vocab) = load_model(&init_dir)?;
    let train_path = cfg.train_path();
    let train = load_split(&train_path, Split::Train)?;
    let pairs = paired_set(cfg, &train, "train", kind)?;
    let items = ppcl_items(&train.examples, &pairs);
    let curve = train_ppcl(&mut model, &vocab, &items, spec, &cfg.train).map_err(runtime)?;
    let name = name.map_or_else(|| format!("ppcl-{kind}-{}", weights_tag(cfg.train.weights)), str::to_string);
    let dir = cfg.out_dir.join(&name);
    let pert_path = cfg.perturbed_path("train", kind);
    let model_path = init_dir.join("model.bin");
    save_model(&ctx, &dir, &model, &vocab, &curve, &[&model_path, &train_path, &pert_path])?;
    println!("{name}: epoch means {:?} -> {}", curve.epoch_means(ppcl_core::ppcl::Phase::Ppcl), dir.display());
    Ok(())
}

fn eval(cfg: &RunConfig, model: Option<&str>, stub: Option<&str>, run_id: Option<&str>) -> Result<(), CliError> {
    let ctx = Ctx { cfg, command: "eval" };
    let spec = cfg.format_spec()?;
    let loaded;
    let responder: Box<dyn Responder + '_>;
    let default_id;
    let mut inputs = vec![cfg.test_path()];
    match (model, stub) {
        (Some(dir), None) => {
            loaded = load_model(&cfg.out_dir.join(dir))?;
            responder = Box::new(LmResponder {
                model: &loaded.0,
                vocab: &loaded.1,
                max_new: cfg.max_new_tokens,
            });
            default_id = dir.to_string();
            inputs.push(cfg.out_dir.join(dir).join("model.bin"));
        }
        (None, Some("copy-oracle")) => {
            responder = Box::new(CopyOracle { spec });
            default_id = "copy-oracle".into();
        }
        (None, Some("garbage")) => {
            responder = Box::new(Garbage);
            default_id = "garbage".into();
        }
        (None, Some(other)) => return Err(CliError::Validation(format!("unknown responder {other:?}"))),
        _ => return Err(CliError::Validation("eval needs --model or --responder".into())),
    }
    let run_id = run_id.map_or(default_id, str::to_string);
    let test = load_split(&cfg.test_path(), Split::Test)?;
    let mut reports = Vec::new();
    for kind in cfg.parsed_kinds()? {
        let pairs = paired_set(cfg, &test, "test", kind)?;
        inputs.push(cfg.perturbed_path("test", kind));
        reports.push(evaluate_pair_set(&run_id, responder.as_ref(), &pairs, spec).map_err(runtime)?);
    }
    write_reports(&ctx, &run_id, &reports, &inputs)
}

fn write_reports(ctx: &Ctx, stem: &str, reports: &[EvalReport], inputs: &[PathBuf]) -> Result<(), CliError> {
    let dir = ctx.cfg.out_dir.join("reports");
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    ctx.write(&dir.join(format!("{stem}.jsonl")), &reports_to_jsonl(reports), &refs)?;
    let csv = reports_to_csv(reports);
    ctx.write(&dir.join(format!("{stem}.csv")), &csv, &refs)?;
    print!("{csv}");
    Ok(())
}

fn read_reports(path: &Path) -> Result<Vec<EvalReport>, CliError> {
    require(path)?;
    let text = fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("read {}: {e}", path.display())))?;
    parse_reports(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn report(cfg: &RunConfig, baseline: &Path, mitigated: &Path) -> Result<(), CliError> {
    let ctx = Ctx { cfg, command: "report" };
    let base = read_reports(baseline)?;
    let mut joined = Vec::new();
    for m in read_reports(mitigated)? {
        let b = base
            .iter()
            .find(|b| b.kind == m.kind)
            .ok_or_else(|| CliError::Validation(format!("baseline has no {} report", m.kind)))?;
        joined.push(m.with_recovery(b));
    }
    let stem = match (joined.first(), base.first()) {
        (Some(m), Some(b)) => format!("{}-vs-{}", m.run_id, b.run_id),
        _ => return Err(CliError::Validation("empty report file".into())),
    };
    let mut all = base.clone();
    all.extend(joined);
    write_reports(&ctx, &stem, &all, &[baseline.to_path_buf(), mitigated.to_path_buf()])
}

fn oracle_check() -> Result<(), CliError> {
    let groups = [("drop rate", pdr_oracle()), ("aggregation", aggregation_oracle()), ("recovery", recovery_oracle())];
    for (name, lines) in groups {
        let passed = lines.iter().filter(|l| l.pass()).count();
        for l in &lines {
            println!("{}", l.render());
        }
        println!("== {name}: {passed}/{} PASS", lines.len());
    }
    Ok(())
}
