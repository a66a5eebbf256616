use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::net::ToSocketAddrs;
use std::path::{Path, PathBuf};

use nluadv_annotate::{AppState, ServeConfig, TokenTable};
use nluadv_core::advset::{build_candidates, group_by_source, write_export, AdvStore};
use nluadv_core::corpus::dataset::{format_record, parse_lines};
use nluadv_core::corpus::{parse_columns, parse_records, write_records, Dataset, LabelSpace, LabeledExample, RuleSet, SynthSizes, SyntheticGrammar, Utterance};
use nluadv_core::experiment::{self_train_augment, text_index, AugmentConfig, DataSpec, ExperimentConfig};
use nluadv_core::pairing::PairingConfig;
use nluadv_core::paraphraser::{append_cache, backtranslate, read_cache, rule_paraphrase, train_autoencoder, AutoencoderConfig, CacheRecord, ParaphraseSet, ProcessAdapter, Seq2SeqModel, Source, ADAPTER_ENV};
use nluadv_core::report::{make_report, EvalReport, TestSet, Variant};
use nluadv_core::tagger::train::Trainer;
use nluadv_core::tagger::{TaggerModel, TrainInputs};
use nluadv_core::tensor::checkpoint::Checkpoint;
use nluadv_core::{seed, Execution};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::{AdvBuildArgs, AdvExportArgs, AugmentArgs, EvalArgs, IngestArgs, InputFormat, ParaphraseArgs, ReportArgs, ServeArgs, SynthArgs, TrainArgs};

const SNAPSHOT: &str = "trainer.ckpt";
const MODEL: &str = "model.ckpt";
const HISTORY: &str = "history.jsonl";
const ADAPTER_CHUNK: usize = 64;

/// One self-tagged paraphrase in the `augment` output.
#[derive(Debug, Serialize, Deserialize)]
struct AugRecord {
    original_id: String,
    source: Source,
    example: LabeledExample,
}

fn split_path(data: &Path, split: &str) -> PathBuf {
    data.join(format!("{split}.tsv"))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read_split(data: &Path, split: &str) -> Result<Vec<LabeledExample>> {
    let path = split_path(data, split);
    parse_records(open(&path)?, split).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_dataset(data: &Path) -> Result<Dataset> {
    let [train, dev, test] = ["train", "dev", "test"].map(|s| split_path(data, s));
    Ok(Dataset::load(&train, &dev, &test)?)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_split(dir: &Path, split: &str, examples: &[LabeledExample]) -> Result<()> {
    let mut w = create(&split_path(dir, split))?;
    write_records(&mut w, examples)?;
    w.flush()?;
    Ok(())
}

fn write_labels(dir: &Path, labels: &LabelSpace) -> Result<()> {
    fs::write(dir.join("labels.json"), serde_json::to_string_pretty(labels)? + "\n")?;
    Ok(())
}

pub fn ingest(a: &IngestArgs) -> Result<()> {
    let ds = match a.format {
        InputFormat::Canonical => Dataset::load(&a.train, &a.dev, &a.test)?,
        InputFormat::Columns => {
            let read = |p: &Path, prefix: &str| -> Result<Vec<LabeledExample>> { Ok(parse_columns(open(p)?, prefix)?) };
            let train = read(&a.train, "train")?;
            let label_space = LabelSpace::from_examples(&train)?;
            let dev = read(&a.dev, "dev")?;
            let test = read(&a.test, "test")?;
            for (i, e) in dev.iter().chain(&test).enumerate() {
                label_space.check(&e.annotation, i + 1)?;
            }
            Dataset {
                label_space,
                train,
                dev,
                test,
            }
        }
    };
    fs::create_dir_all(&a.out)?;
    write_split(&a.out, "train", &ds.train)?;
    write_split(&a.out, "dev", &ds.dev)?;
    write_split(&a.out, "test", &ds.test)?;
    write_labels(&a.out, &ds.label_space)?;
    println!(
        "ingested {} train, {} dev, {} test; {} intents, {} slot labels",
        ds.train.len(),
        ds.dev.len(),
        ds.test.len(),
        ds.label_space.num_intents(),
        ds.label_space.slot_labels().len()
    );
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let grammar = match &a.grammar {
        Some(p) => SyntheticGrammar::load(p)?,
        None => SyntheticGrammar::builtin(),
    };
    let sizes = SynthSizes {
        train: a.train,
        dev: a.dev,
        test: a.test,
    };
    let corpus = nluadv_core::corpus::generate_synthetic(&grammar, a.seed, sizes)?;
    fs::create_dir_all(&a.out)?;
    write_split(&a.out, "train", &corpus.train)?;
    write_split(&a.out, "dev", &corpus.dev)?;
    write_split(&a.out, "test", &corpus.test)?;
    let mut w = create(&a.out.join("perturbed.tsv"))?;
    for e in &corpus.perturbed {
        writeln!(w, "{}", format_record(e, Some("rulebased")))?;
    }
    w.flush()?;
    write_labels(&a.out, &corpus.label_space)?;
    let cfg = ExperimentConfig {
        data: DataSpec::Synthetic {
            grammar: a.grammar.clone(),
            sizes,
        },
        tagger: Default::default(),
        pairing: None,
        augment: Default::default(),
        eval_sets: vec![],
        output_dir: a.out.clone(),
        seed: a.seed,
    };
    cfg.freeze(&a.out)?;
    println!(
        "synthesized {} train, {} dev, {} test, {} perturbed",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        corpus.perturbed.len()
    );
    Ok(())
}

/// Whether `source` is selected by a tag such as `bt-es`, `seq2seq` or a
/// full descriptor.
fn tag_matches(tag: &str, source: &Source) -> bool {
    match (tag.strip_prefix("bt-"), source) {
        (Some(lang), Source::BackTranslation { language, .. }) => lang == language,
        _ => source.to_string() == tag,
    }
}

fn parse_list(s: &str) -> Vec<String> {
    match s.trim() {
        "" | "none" => Vec::new(),
        s => s.split(',').map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect(),
    }
}

fn read_aug_records(path: &Path) -> Result<Vec<AugRecord>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

fn pairing_config(a: &TrainArgs, base: Option<&PairingConfig>) -> Result<Option<PairingConfig>> {
    let (clean, alp) = match a.pairing.as_str() {
        "none" => (false, false),
        "clean" => (true, false),
        "alp" => (false, true),
        "clean+alp" | "alp+clean" => (true, true),
        p => return Err(CliError::Usage(format!("--pairing must be none, clean, alp or clean+alp, got `{p}`"))),
    };
    if !clean && a.lambda_sf.is_some() || !alp && a.lambda_a.is_some() {
        return Err(CliError::Usage("a lambda was given for a pairing term that is not enabled".into()));
    }
    if !clean && !alp {
        return Ok(None);
    }
    let base = base.cloned().unwrap_or_default();
    let lambda_sf = match (clean, a.lambda_sf) {
        (false, _) => 0.0,
        (true, Some(l)) => l,
        (true, None) if base.lambda_sf > 0.0 => base.lambda_sf,
        (true, None) => 0.01,
    };
    let lambda_a = if alp { a.lambda_a.unwrap_or(base.lambda_a) } else { 0.0 };
    Ok(Some(PairingConfig {
        lambda_sf,
        lambda_a,
        ..base
    }))
}

pub fn train(a: &TrainArgs, ex: Execution) -> Result<()> {
    let base = a.config.as_deref().map(ExperimentConfig::load).transpose()?;
    let pairing = pairing_config(a, base.as_ref().and_then(|c| c.pairing.as_ref()))?;
    let tags = parse_list(&a.augment);
    let alp = pairing.as_ref().is_some_and(|p| p.lambda_a > 0.0);
    if (!tags.is_empty() || alp) && a.augmented.is_none() {
        return Err(CliError::Usage("--augment and ALP need --augmented (output of `nluadv augment`)".into()));
    }
    let snapshot = a.out.join(SNAPSHOT);
    match (a.resume, snapshot.exists()) {
        (false, true) => {
            return Err(CliError::Usage(format!(
                "{} holds an interrupted run; pass --resume or remove it",
                a.out.display()
            )))
        }
        (true, false) => return Err(CliError::Usage(format!("nothing to resume in {}", a.out.display()))),
        _ => {}
    }

    let ds = load_dataset(&a.data)?;
    let records = match &a.augmented {
        Some(p) => read_aug_records(p)?,
        None => Vec::new(),
    };
    let augmented: Vec<LabeledExample> = records
        .iter()
        .filter(|r| tags.iter().any(|t| tag_matches(t, &r.source)))
        .map(|r| r.example.clone())
        .collect();
    if !tags.is_empty() && augmented.is_empty() {
        return Err(CliError::Data(format!("no augmented examples match `{}`", a.augment)));
    }
    let mut paraphrases: Vec<Vec<LabeledExample>> = vec![Vec::new(); ds.train.len()];
    if alp {
        let index: HashMap<&str, usize> = ds.train.iter().enumerate().map(|(i, e)| (e.utterance.id.as_str(), i)).collect();
        for r in records.iter().filter(|r| tags.is_empty() || tags.iter().any(|t| tag_matches(t, &r.source))) {
            if let Some(&i) = index.get(r.original_id.as_str()) {
                paraphrases[i].push(r.example.clone());
            }
        }
    }

    let mut sources: Vec<Source> = records.iter().filter(|r| tags.iter().any(|t| tag_matches(t, &r.source))).map(|r| r.source.clone()).collect();
    sources.dedup();
    let mut cfg = ExperimentConfig {
        data: DataSpec::Files {
            train: split_path(&a.data, "train"),
            dev: split_path(&a.data, "dev"),
            test: split_path(&a.data, "test"),
        },
        tagger: base.as_ref().map(|c| c.tagger.clone()).unwrap_or_default(),
        pairing,
        augment: AugmentConfig {
            sources,
            ..base.as_ref().map(|c| c.augment.clone()).unwrap_or_default()
        },
        eval_sets: base.as_ref().map(|c| c.eval_sets.clone()).unwrap_or_default(),
        output_dir: a.out.clone(),
        seed: a.seed.or(base.as_ref().map(|c| c.seed)).unwrap_or(0),
    };
    let t = &mut cfg.tagger;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.hidden {
        t.hidden_size = v;
    }
    if let Some(v) = a.layers {
        t.num_layers = v;
    }
    if let Some(v) = a.embedding {
        t.embedding_dim = v;
    }
    if let Some(v) = a.learning_rate {
        t.learning_rate = v;
    }
    cfg.validate()?;
    let resolved = cfg.resolved();
    fs::create_dir_all(&a.out)?;
    cfg.freeze(&a.out)?;

    let inputs = TrainInputs {
        augmented: &augmented,
        paraphrases: alp.then_some(paraphrases.as_slice()),
        dev: &ds.dev,
        labels: Some(&ds.label_space),
        ..TrainInputs::new(&ds.train)
    };
    let mut trainer = Trainer::new(inputs, &resolved.tagger, resolved.pairing.as_ref(), ex)?;
    if a.resume {
        trainer.restore(&Checkpoint::load(&snapshot)?)?;
        log::info!("resumed after epoch {}", trainer.epochs_done());
    }
    let mut ran = 0;
    while !trainer.is_done() {
        if a.pause_after.is_some_and(|n| ran >= n) {
            println!("paused after epoch {}; continue with --resume", trainer.epochs_done());
            return Ok(());
        }
        ran += 1;
        let rec = trainer.run_epoch()?;
        log::info!("epoch {} loss {:.5} dev {:?}", rec.epoch, rec.total, rec.dev_exact_match);
        let tmp = a.out.join(format!("{SNAPSHOT}.tmp"));
        trainer.snapshot()?.save(&tmp)?;
        fs::rename(&tmp, &snapshot)?;
    }
    let (model, history) = trainer.finish();
    model.save(a.out.join(MODEL))?;
    history.write_jsonl(a.out.join(HISTORY))?;
    fs::remove_file(&snapshot)?;
    println!(
        "trained {} epochs ({} augmented, pairing {}); selected epoch {:?}; model in {}",
        history.epochs.len(),
        augmented.len(),
        a.pairing,
        history.selected_epoch,
        a.out.join(MODEL).display()
    );
    Ok(())
}

/// Latest successful set per (original, source) across cache files.
fn load_sets(caches: &[PathBuf]) -> Result<Vec<ParaphraseSet>> {
    let mut order: Vec<(String, Source)> = Vec::new();
    let mut latest: HashMap<(String, Source), ParaphraseSet> = HashMap::new();
    for c in caches {
        for rec in read_cache(c)? {
            if let CacheRecord::Set(s) = rec {
                let key = (s.original_id.clone(), s.source.clone());
                if latest.insert(key.clone(), s).is_none() {
                    order.push(key);
                }
            }
        }
    }
    Ok(order.into_iter().map(|k| latest.remove(&k).expect("key recorded")).collect())
}

fn adapter_for(a: &ParaphraseArgs, source: &Source) -> Result<ProcessAdapter> {
    let Source::BackTranslation { language, .. } = source else {
        unreachable!("only back-translation uses an adapter");
    };
    let line = std::env::var(ADAPTER_ENV).unwrap_or_else(|_| a.adapter_cmd.clone());
    let mut parts = line.split_whitespace().map(|p| p.replace("{lang}", language));
    let program = parts.next().ok_or_else(|| CliError::Usage("empty adapter command".into()))?;
    Ok(ProcessAdapter::new(program, parts.collect(), source.clone()))
}

fn autoencoder(a: &ParaphraseArgs, corpus: &[Utterance], ex: Execution) -> Result<Seq2SeqModel> {
    if let Some(p) = a.autoencoder.as_ref().filter(|p| p.exists()) {
        return Ok(Seq2SeqModel::from_checkpoint(&Checkpoint::load(p)?)?);
    }
    let mut cfg = AutoencoderConfig {
        seed: seed::derive(a.seed, &[3]),
        ..Default::default()
    };
    if let Some(e) = a.ae_epochs {
        cfg.epochs = e;
    }
    let (model, losses) = train_autoencoder(corpus, &cfg, ex)?;
    for (i, l) in losses.iter().enumerate() {
        log::info!("autoencoder epoch {} reconstruction loss {l:.5}", i + 1);
    }
    if let Some(p) = &a.autoencoder {
        model.to_checkpoint()?.save(p)?;
    }
    Ok(model)
}

pub fn paraphrase(a: &ParaphraseArgs, ex: Execution) -> Result<()> {
    let source: Source = a.source.parse()?;
    if a.k == 0 {
        return Err(CliError::Usage("--k must be positive".into()));
    }
    let examples = read_split(&a.data, &a.split)?;
    let done: HashSet<String> = if a.out.exists() {
        read_cache(&a.out)?
            .into_iter()
            .filter_map(|r| match r {
                CacheRecord::Set(s) if s.source == source => Some(s.original_id),
                _ => None,
            })
            .collect()
    } else {
        HashSet::new()
    };
    let todo: Vec<(u64, Utterance)> = examples
        .iter()
        .enumerate()
        .filter(|(_, e)| !done.contains(&e.utterance.id))
        .map(|(i, e)| (i as u64, e.utterance.clone()))
        .collect();
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut failures = 0usize;
    match &source {
        Source::RuleBased => {
            let rules = match &a.rules {
                Some(p) => RuleSet::parse(&fs::read_to_string(p)?)?,
                None => SyntheticGrammar::builtin().rules,
            };
            let sets = ex.map(&todo, |(i, u)| rule_paraphrase(u, &rules, seed::derive(a.seed, &[*i]), a.k));
            append_cache(&a.out, &sets.into_iter().map(CacheRecord::Set).collect::<Vec<_>>())?;
        }
        Source::Seq2Seq => {
            let corpus: Vec<Utterance> = examples.iter().map(|e| e.utterance.clone()).collect();
            let model = autoencoder(a, &corpus, ex)?;
            let sigma = a.sigma.unwrap_or(model.config.noise_sigma);
            let sets = ex.map(&todo, |(i, u)| model.perturb_decode(u, sigma, a.k, seed::derive(a.seed, &[*i])));
            let sets = sets.into_iter().collect::<nluadv_core::Result<Vec<_>>>()?;
            append_cache(&a.out, &sets.into_iter().map(CacheRecord::Set).collect::<Vec<_>>())?;
        }
        Source::BackTranslation { .. } => {
            let mut adapter = adapter_for(a, &source)?;
            for chunk in todo.chunks(ADAPTER_CHUNK) {
                let utts: Vec<Utterance> = chunk.iter().map(|(_, u)| u.clone()).collect();
                let recs: Vec<CacheRecord> = backtranslate(&utts, &mut adapter, a.k).into_iter().map(CacheRecord::from).collect();
                failures += recs.iter().filter(|r| matches!(r, CacheRecord::Failure(_))).count();
                append_cache(&a.out, &recs)?;
            }
        }
    }
    println!(
        "paraphrased {} of {} `{}` utterances with {source} ({} cached before, {failures} failed)",
        todo.len() - failures,
        examples.len(),
        a.split,
        done.len()
    );
    Ok(())
}

pub fn augment(a: &AugmentArgs, ex: Execution) -> Result<()> {
    let train = read_split(&a.data, "train")?;
    let model = TaggerModel::load(&a.model)?;
    let sets = load_sets(&a.caches)?;
    let reference = text_index(&train);
    let mut by_source: BTreeMap<String, (Source, Vec<ParaphraseSet>)> = BTreeMap::new();
    for s in sets {
        by_source.entry(s.source.to_string()).or_insert_with(|| (s.source.clone(), Vec::new())).1.push(s);
    }
    let mut w = create(&a.out)?;
    let mut total = 0;
    for (name, (source, sets)) in &by_source {
        let aug = self_train_augment(&model, &train, sets, &reference, a.weight, ex)?;
        for (i, list) in aug.per_original.iter().enumerate() {
            for e in list {
                let rec = AugRecord {
                    original_id: train[i].utterance.id.clone(),
                    source: source.clone(),
                    example: e.clone(),
                };
                writeln!(w, "{}", serde_json::to_string(&rec)?)?;
            }
        }
        println!("{name}: {} augmented examples", aug.examples.len());
        total += aug.examples.len();
    }
    w.flush()?;
    println!("wrote {total} augmented examples to {}", a.out.display());
    Ok(())
}

pub fn advset_build(a: &AdvBuildArgs, ex: Execution) -> Result<()> {
    let originals = read_split(&a.data, &a.split)?;
    let train = read_split(&a.data, "train")?;
    let model = TaggerModel::load(&a.model)?;
    let reference = text_index(&train);
    let ids: HashSet<&str> = originals.iter().map(|e| e.utterance.id.as_str()).collect();
    let (mut sets, foreign): (Vec<_>, Vec<_>) = load_sets(&a.caches)?.into_iter().partition(|s| ids.contains(s.original_id.as_str()));
    if !foreign.is_empty() {
        log::warn!("{} cached sets do not belong to the `{}` split and were skipped", foreign.len(), a.split);
    }
    for s in &mut sets {
        s.dedupe_against(&reference);
    }
    let candidates = build_candidates(&model, &originals, &sets, ex)?;
    let mut store = if a.log.exists() {
        AdvStore::open(&a.log)?
    } else {
        AdvStore::create(&a.log, model.labels.clone(), !a.hide_original)?
    };
    let fresh: Vec<_> = candidates.into_iter().filter(|c| store.candidate(&c.candidate_id).is_none()).collect();
    let added = store.add_candidates(fresh)?;
    println!("{added} new candidates ({} in log)", store.len());
    Ok(())
}

pub fn advset_export(a: &AdvExportArgs) -> Result<()> {
    let mut store = AdvStore::open(&a.log)?;
    let items = store.export_logged()?;
    let mut w = create(&a.out)?;
    write_export(&mut w, &items)?;
    w.flush()?;
    for (src, exs) in group_by_source(&items) {
        println!("{src}: {}", exs.len());
    }
    println!("exported {} examples to {}", items.len(), a.out.display());
    Ok(())
}

pub fn serve(a: &ServeArgs) -> Result<()> {
    let tokens = TokenTable::load(&a.tokens)?;
    let store = AdvStore::open(&a.log)?;
    let addr = (a.host.as_str(), a.port)
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| CliError::Usage(format!("cannot resolve {}:{}", a.host, a.port)))?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(nluadv_annotate::serve(
        AppState::new(store, tokens),
        ServeConfig {
            addr,
            static_dir: a.static_dir.clone(),
        },
    ))?;
    Ok(())
}

/// Splits an adversarial file by its source column, or names it by file stem.
fn adversarial_sets(path: &Path) -> Result<Vec<(String, Vec<LabeledExample>)>> {
    let stem = path.file_stem().map_or_else(|| "adversarial".to_string(), |s| s.to_string_lossy().into_owned());
    let records = parse_lines(open(path)?, &stem).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut out: Vec<(String, Vec<LabeledExample>)> = Vec::new();
    for r in records {
        let name = r.source.clone().unwrap_or_else(|| stem.clone());
        match out.iter_mut().find(|(n, _)| *n == name) {
            Some((_, v)) => v.push(r.example),
            None => out.push((name, vec![r.example])),
        }
    }
    if out.is_empty() {
        return Err(CliError::Data(format!("adversarial set `{stem}` is empty")));
    }
    Ok(out)
}

pub fn eval(a: &EvalArgs, ex: Execution) -> Result<()> {
    let models = a.models.iter().map(TaggerModel::load).collect::<nluadv_core::Result<Vec<_>>>()?;
    let clean = parse_records(open(&a.clean)?, "clean").map_err(|e| CliError::Data(format!("{}: {e}", a.clean.display())))?;
    let mut adv = Vec::new();
    for p in &a.adversarial {
        adv.extend(adversarial_sets(p)?);
    }
    let variant = Variant {
        name: a.name.clone(),
        models: models.iter().collect(),
    };
    let sets: Vec<TestSet<'_>> = adv.iter().map(|(n, e)| TestSet { name: n, examples: e }).collect();
    let mut report = make_report(
        &[variant],
        TestSet {
            name: "clean",
            examples: &clean,
        },
        &sets,
        ex,
    )?;
    for row in &mut report.rows {
        let paths: Vec<String> = a.models.iter().map(|p| p.display().to_string()).collect();
        row.meta.insert("model_paths".into(), paths.join(","));
    }
    print!("{}", report.to_table());
    if let Some(out) = &a.out {
        let mut w = create(out)?;
        w.write_all(report.to_jsonl()?.as_bytes())?;
        w.flush()?;
    }
    Ok(())
}

pub fn report(a: &ReportArgs) -> Result<()> {
    let mut merged = EvalReport::default();
    for p in &a.inputs {
        merged.rows.extend(EvalReport::from_jsonl(open(p)?)?.rows);
    }
    print!("{}", merged.to_table());
    if let Some(out) = &a.out {
        let mut w = create(out)?;
        w.write_all(merged.to_jsonl()?.as_bytes())?;
        w.flush()?;
    }
    Ok(())
}
