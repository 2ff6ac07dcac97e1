use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use anyhow::{anyhow, bail, Context, Result};
use collabvd::backends::{ChatModel, Detector};
use collabvd::collab::{
    run_pipeline, run_samples, AssessmentStore, CancelFlag, DialogueOptions, PipelineOptions,
    TokenBucket,
};
use collabvd::config::{BackendSpec, RunConfig};
use collabvd::corpus::{
    load_corpus, split_stratified, CodeSample, Corpus, Part, SplitCorpus, SplitManifest,
};
use collabvd::dialogue::{LlmVerdict, PromptTemplate, PromptVariant};
use collabvd::eval::{
    compare_models, evaluate as score, render_table, run_ablation, to_jsonl, AblationBackends,
    AblationRow, AblationSettings, MetricsReport, RowStatus, Scoring,
};
use collabvd::synthesis::{enrich, export_training_set, EnrichOptions};
use collabvd::{SampleId, Verdict};
use serde::{Deserialize, Serialize};

use crate::args::*;
use crate::manifest::{beside, RunManifest};
use crate::{MissingArtifact, UsageError};

pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    })
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn require(path: &Path, what: &'static str, producer: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(MissingArtifact {
            path: path.to_path_buf(),
            what,
            producer,
        }
        .into())
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn apply_data(cfg: &mut RunConfig, a: &DataArgs) {
    if let Some(p) = &a.data {
        cfg.data.path = Some(p.clone());
    }
    if let Some(p) = a.polarity {
        cfg.data.polarity = p.into();
    }
    if let Some(m) = &a.manifest {
        cfg.split.manifest = m.clone();
    }
}

fn apply_backends(cfg: &mut RunConfig, a: &BackendArgs) {
    if let Some(d) = &a.detector {
        cfg.detector.endpoint = Some(d.clone());
    }
    if let Some(l) = &a.llm {
        cfg.llm.endpoint = Some(l.clone());
    }
    if let Some(m) = &a.model {
        cfg.llm.model = m.clone();
    }
    if let Some(t) = a.temperature {
        cfg.llm.temperature = t;
    }
    if let Some(n) = a.max_attempts {
        cfg.retry.max_attempts = n;
    }
}

fn apply_dialogue(cfg: &mut RunConfig, a: &DialogueArgs) {
    if let Some(m) = a.hint_mode {
        cfg.assess.hint_mode = m;
    }
    if let Some(v) = a.variant {
        cfg.assess.variant = v;
    }
    if let Some(t) = &a.template {
        cfg.assess.template = Some(t.clone());
    }
}

fn data_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.data
        .path
        .as_deref()
        .ok_or_else(|| usage("no dataset given: pass --data or set data.path"))
}

fn load_split(cfg: &RunConfig) -> Result<(Corpus, SplitCorpus)> {
    let corpus = load_corpus(data_path(cfg)?, cfg.data.polarity)?;
    let path = &cfg.split.manifest;
    require(path, "split manifest", "ingest")?;
    let split = SplitManifest::load(path)?
        .apply(&corpus)
        .with_context(|| format!("applying {}", path.display()))?;
    Ok((corpus, split))
}

fn cancel_on_interrupt() -> CancelFlag {
    let flag = CancelFlag::new();
    let handler = flag.clone();
    if let Err(e) = ctrlc::set_handler(move || {
        eprintln!("interrupt: finishing samples in flight, then stopping");
        handler.cancel();
    }) {
        log::warn!("could not install interrupt handler: {e}");
    }
    flag
}

fn dialogue<'a>(
    cfg: &RunConfig,
    template: &'a PromptTemplate,
    pool: &'a [CodeSample],
    rate: Option<&'a TokenBucket>,
) -> DialogueOptions<'a> {
    let mut d = DialogueOptions::new(template);
    d.variant = cfg.assess.variant;
    d.reask_limit = cfg.assess.reask_limit;
    d.seed = cfg.split.seed;
    d.exemplar_pool = pool;
    d.rate = rate;
    d
}

fn rate_bucket(cfg: &RunConfig) -> Option<TokenBucket> {
    cfg.assess
        .rate_limit
        .map(|r| TokenBucket::new(r, cfg.assess.concurrency as u32))
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn ingest(mut cfg: RunConfig, a: IngestArgs) -> Result<()> {
    apply_data(&mut cfg, &a.data);
    if let Some(r) = &a.ratios {
        cfg.split.ratios = [r[0], r[1], r[2]];
    }
    if let Some(s) = a.seed {
        cfg.split.seed = s;
    }
    let data = data_path(&cfg)?.to_path_buf();
    let corpus = load_corpus(&data, cfg.data.polarity)?;
    let split = split_stratified(&corpus, cfg.split.ratios, cfg.split.seed)?;
    let path = &cfg.split.manifest;
    write_atomic(path, &split.manifest().to_json())?;

    println!("{} samples from {}", corpus.len(), data.display());
    for (part, c) in split.parts() {
        println!(
            "{:<5}  {:>7}  vulnerable {:>7}  clean {:>7}",
            part.as_str(),
            c.len(),
            c.count(Verdict::Vulnerable),
            c.count(Verdict::Clean)
        );
    }
    println!("manifest: {}", path.display());
    let mut m = RunManifest::new("ingest", cfg.digest());
    m.input(&data)?.output(path)?;
    m.write(&beside(path))
}

pub fn assess(mut cfg: RunConfig, a: AssessArgs) -> Result<()> {
    apply_data(&mut cfg, &a.data);
    apply_backends(&mut cfg, &a.backends);
    apply_dialogue(&mut cfg, &a.dialogue);
    if let Some(s) = &a.store {
        cfg.assess.store = s.clone();
    }
    if let Some(c) = a.concurrency {
        cfg.assess.concurrency = c;
    }
    if let Some(r) = a.rate_limit {
        cfg.assess.rate_limit = Some(r);
    }
    if let Some(t) = a.failure_threshold {
        cfg.assess.failure_threshold = t;
    }
    cfg.validate()?;
    let template = cfg.template()?;
    let (corpus, split) = load_split(&cfg)?;
    let truths = corpus.truths();
    let detector = cfg.build_detector(Some(&truths))?;
    let llm = cfg.build_llm()?;

    let mode = cfg.assess.hint_mode;
    let meta = cfg.store_identity(&template)?.store_meta(Some(mode));
    let store_path = cfg.assess.store.clone();
    let mut store = AssessmentStore::open(&store_path, meta)?;
    let bucket = rate_bucket(&cfg);
    let mut opts = PipelineOptions::new(dialogue(&cfg, &template, &[], bucket.as_ref()), mode);
    opts.concurrency = cfg.assess.concurrency;
    opts.failure_threshold = cfg.assess.failure_threshold;
    opts.cancel = Some(cancel_on_interrupt());

    let report = run_pipeline(&split, &Part::ALL, &*detector, &*llm, &opts, &mut store);
    let report = match report {
        Ok(r) => r,
        Err(e @ collabvd::Error::FailureThreshold { .. }) => {
            return Err(anyhow!(e).context(format!(
                "run aborted; partial store kept at {}",
                store_path.display()
            )))
        }
        Err(e) => return Err(e.into()),
    };
    let run = &report.run;
    println!(
        "{} calls issued (detector {}, llm {}); {} of {} samples already complete",
        run.calls(),
        run.detector_calls,
        run.llm_calls,
        run.cached,
        run.samples
    );
    println!(
        "hint mode {mode}, {} recheck exchange(s) this run",
        run.refinements
    );
    println!(
        "{:<5}  {:>7}  {:>8}  {:>9}  {:>13}  {:>7}  {:>9}  {:>7}  {:>6}",
        "part",
        "samples",
        "assessed",
        "agreement",
        "disagreements",
        "refined",
        "unknown@1",
        "unknown",
        "failed"
    );
    for p in &report.parts {
        println!(
            "{:<5}  {:>7}  {:>8}  {:>9.4}  {:>13}  {:>7}  {:>9}  {:>7}  {:>6}",
            p.part.as_str(),
            p.samples,
            p.assessed,
            p.agreement_rate,
            p.disagreements,
            p.refined,
            p.unknown_initial,
            p.unknown_final,
            p.failed
        );
    }
    if run.cancelled {
        println!("interrupted; rerun the same command to resume");
    } else {
        let mut m = RunManifest::new("assess", cfg.digest());
        m.template_version = Some(template.version.clone());
        m.input(data_path(&cfg)?)?
            .input(&cfg.split.manifest)?
            .output(&store_path)?;
        m.write(&beside(&store_path))?;
    }
    if !run.failed.is_empty() {
        bail!("{} sample(s) failed; rerun to retry them", run.failed.len());
    }
    if run.cancelled {
        bail!("interrupted before completion");
    }
    Ok(())
}

fn load_store(path: &Path) -> Result<AssessmentStore> {
    require(path, "assessment store", "assess")?;
    Ok(AssessmentStore::load(path)?)
}

pub fn synthesize(mut cfg: RunConfig, a: SynthesizeArgs) -> Result<()> {
    apply_data(&mut cfg, &a.data);
    if let Some(s) = &a.store {
        cfg.assess.store = s.clone();
    }
    if let Some(o) = &a.out_dir {
        cfg.synthesis.out_dir = o.clone();
    }
    if a.drop_verdict {
        cfg.synthesis.drop_verdict = true;
    }
    if let Some(t) = &a.template {
        cfg.assess.template = Some(t.clone());
    }
    let template = cfg.template()?;
    let (_, split) = load_split(&cfg)?;
    let store = load_store(&cfg.assess.store)?;
    if store.meta().template_version != template.version {
        bail!(
            "store was built with template version `{}` but the current template is `{}`",
            store.meta().template_version,
            template.version
        );
    }
    let opts = EnrichOptions {
        drop_verdict: cfg.synthesis.drop_verdict,
    };
    let summary = export_training_set(&split, &store, &template, &cfg.synthesis.out_dir, opts)?;
    let mut m = RunManifest::new("synthesize", cfg.digest());
    m.template_version = Some(template.version.clone());
    m.input(&cfg.assess.store)?.input(&cfg.split.manifest)?;
    for f in &summary.files {
        println!(
            "{:<5}  {:>7} records  {}",
            f.part.as_str(),
            f.records,
            f.path.display()
        );
        m.output(&f.path)?;
    }
    if summary.unknown_fallbacks > 0 {
        println!(
            "{} record(s) had an unparseable final reply and were marked clean",
            summary.unknown_fallbacks
        );
    }
    m.write(&cfg.synthesis.out_dir.join("run.json"))
}

pub fn train(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    let t = &mut cfg.train;
    if let Some(d) = &a.output_dir {
        t.output_dir = d.clone();
    }
    if let Some(m) = &a.base_model {
        t.base_model = m.clone();
    }
    if let Some(e) = a.epochs {
        t.epochs = e;
    }
    if let Some(lr) = a.learning_rate {
        t.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        t.batch_size = b;
    }
    if let Some(l) = a.max_length {
        t.max_length = l;
    }
    if let Some(s) = a.seed {
        t.seed = s;
    }
    if !a.trainer.is_empty() {
        t.command = a.trainer.clone();
    }
    if let Some(d) = &a.enriched_dir {
        cfg.synthesis.out_dir = d.clone();
    }
    if let Some(b) = a.tail_budget {
        cfg.synthesis.tail_budget = b;
    }
    let dir = &cfg.synthesis.out_dir;
    let files: Vec<PathBuf> = ["train", "valid", "test"]
        .iter()
        .map(|p| dir.join(format!("{p}.jsonl")))
        .collect();
    for f in &files {
        require(f, "enriched export", "synthesize")?;
    }
    let t = &cfg.train;
    let (program, lead) = t
        .command
        .split_first()
        .ok_or_else(|| usage("train.command is empty"))?;
    let mut args: Vec<String> = lead.to_vec();
    let mut flag = |k: &str, v: String| {
        args.push(format!("--{k}"));
        args.push(v);
    };
    flag("train", files[0].display().to_string());
    flag("valid", files[1].display().to_string());
    flag("test", files[2].display().to_string());
    flag("output-dir", t.output_dir.display().to_string());
    flag("base-model", t.base_model.clone());
    flag("epochs", t.epochs.to_string());
    flag("learning-rate", t.learning_rate.to_string());
    flag("batch-size", t.batch_size.to_string());
    flag("max-length", t.max_length.to_string());
    flag("tail-budget", cfg.synthesis.tail_budget.to_string());
    flag("seed", t.seed.to_string());

    let shown = std::iter::once(program.as_str())
        .chain(args.iter().map(String::as_str))
        .collect::<Vec<_>>()
        .join(" ");
    if a.dry_run {
        println!("{shown}");
        return Ok(());
    }
    log::info!("running {shown}");
    let status = Process::new(program)
        .args(&args)
        .status()
        .with_context(|| format!("starting trainer `{program}`"))
        .map_err(|e| anyhow!("{e:#}"))?;
    if !status.success() {
        bail!("trainer exited with {status}");
    }
    Ok(())
}

#[derive(Deserialize)]
struct ProbeLine {
    idx: SampleId,
    func: String,
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| collabvd::Error::io(path.to_path_buf(), e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .with_context(|| format!("{}:{}: malformed record", path.display(), n + 1))?,
        );
    }
    Ok(out)
}

#[derive(Serialize)]
struct PredictRecord {
    idx: SampleId,
    verdict: Verdict,
    score: f64,
    description: Option<String>,
    llm_verdict: LlmVerdict,
    detector_verdict: Verdict,
    refined: bool,
    provenance: String,
}

pub fn predict(mut cfg: RunConfig, a: PredictArgs) -> Result<()> {
    apply_backends(&mut cfg, &a.backends);
    apply_dialogue(&mut cfg, &a.dialogue);
    apply_data(&mut cfg, &a.data);
    if let Some(v) = &a.validator {
        cfg.validator.endpoint = Some(v.clone());
    }
    let template = cfg.template()?;
    // Probe labels are unknown; the pipeline never reads them.
    let probes: Vec<CodeSample> = match (&a.code, &a.batch) {
        (Some(path), _) => {
            let code =
                fs::read_to_string(path).map_err(|e| collabvd::Error::io(path.clone(), e))?;
            vec![CodeSample::new(a.id, code, Verdict::Clean)]
        }
        (None, Some(path)) => read_lines::<ProbeLine>(path)?
            .into_iter()
            .map(|p| CodeSample::new(p.idx, p.func, Verdict::Clean))
            .collect(),
        (None, None) => return Err(usage("pass --code or --batch")),
    };
    if let Some(empty) = probes.iter().find(|p| p.code.is_empty()) {
        return Err(usage(format!("sample {} has no code", empty.id)));
    }
    let ids: BTreeSet<SampleId> = probes.iter().map(|p| p.id).collect();
    if ids.len() != probes.len() {
        return Err(usage("duplicate ids in batch"));
    }
    let pool = match cfg.assess.variant {
        PromptVariant::FewShot { .. } => load_split(&cfg)?.1.train.samples().to_vec(),
        _ => Vec::new(),
    };

    let detector = cfg.build_detector(None)?;
    let llm = cfg.build_llm()?;
    let validator = cfg.build_validator(None)?;
    let mode = cfg.assess.hint_mode;
    let meta = cfg.store_identity(&template)?.store_meta(Some(mode));
    let mut store = AssessmentStore::in_memory(meta);
    let bucket = rate_bucket(&cfg);
    let mut opts = PipelineOptions::new(dialogue(&cfg, &template, &pool, bucket.as_ref()), mode);
    opts.concurrency = cfg.assess.concurrency;
    opts.failure_threshold = 1.0;
    let refs: Vec<&CodeSample> = probes.iter().collect();
    let stats = run_samples(&refs, &*detector, &*llm, &opts, &mut store, false)?;

    let enrich_opts = EnrichOptions {
        drop_verdict: cfg.synthesis.drop_verdict,
    };
    let mut out = String::new();
    let mut failures = stats.failed.len();
    for p in &probes {
        let Some(assessment) = store.get(p.id).filter(|a| a.is_complete()) else {
            continue;
        };
        let enriched = enrich(&template, p, Some(assessment), enrich_opts)?;
        let reply = match validator
            .predict(p.id, &enriched.text)
            .and_then(|r| r.validate(p.id))
        {
            Ok(r) => r,
            Err(e) => {
                eprintln!("sample {}: validator failed: {e}", p.id);
                failures += 1;
                continue;
            }
        };
        let record = PredictRecord {
            idx: p.id,
            verdict: reply.verdict,
            score: reply.score,
            description: assessment.llm_final.description.clone(),
            llm_verdict: assessment.llm_final.verdict,
            detector_verdict: assessment.detector.verdict,
            refined: assessment.refined,
            provenance: enriched.provenance,
        };
        out.push_str(&serde_json::to_string(&record)?);
        out.push('\n');
    }
    match &a.out {
        Some(path) => write_atomic(path, &out)?,
        None => std::io::stdout().write_all(out.as_bytes())?,
    }
    if failures > 0 {
        bail!("{failures} sample(s) could not be assessed");
    }
    Ok(())
}

/// Reads `{"idx","verdict"}` or `{"idx","target"}` prediction lines.
fn load_predictions(path: &Path) -> Result<BTreeMap<SampleId, Verdict>> {
    let mut out = BTreeMap::new();
    for (n, v) in read_lines::<serde_json::Value>(path)?
        .into_iter()
        .enumerate()
    {
        let at = || format!("{}: record {}", path.display(), n + 1);
        let id = v
            .get("idx")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| anyhow!("{}: missing integer `idx`", at()))?;
        let verdict = match (v.get("verdict"), v.get("target")) {
            (Some(serde_json::Value::String(s)), _) => {
                s.parse::<Verdict>().map_err(|e| anyhow!("{}: {e}", at()))?
            }
            (None, Some(t)) => t
                .as_u64()
                .and_then(|t| u8::try_from(t).ok())
                .and_then(Verdict::from_target)
                .ok_or_else(|| anyhow!("{}: `target` must be 0 or 1", at()))?,
            _ => bail!("{}: expected `verdict` or `target`", at()),
        };
        if out.insert(id, verdict).is_some() {
            bail!("{}: duplicate id {id}", at());
        }
    }
    Ok(out)
}

fn part_ids(
    manifest: &Option<PathBuf>,
    part: Option<PartArg>,
) -> Result<Option<BTreeSet<SampleId>>> {
    let (Some(path), Some(part)) = (manifest, part) else {
        return Ok(None);
    };
    require(path, "split manifest", "ingest")?;
    let m = SplitManifest::load(path)?;
    let ids = match Part::from(part) {
        Part::Train => m.train,
        Part::Valid => m.valid,
        Part::Test => m.test,
    };
    Ok(Some(ids.into_iter().collect()))
}

fn restrict(map: &mut BTreeMap<SampleId, Verdict>, ids: &Option<BTreeSet<SampleId>>) {
    if let Some(ids) = ids {
        map.retain(|id, _| ids.contains(id));
    }
}

#[derive(Serialize)]
struct EvaluateReport<'a> {
    source: &'a str,
    samples: u64,
    metrics: &'a MetricsReport,
    threshold_misses: &'a [String],
}

#[derive(Deserialize)]
struct EnrichedLine {
    idx: SampleId,
    text: String,
    target: u8,
}

pub fn evaluate(mut cfg: RunConfig, a: EvaluateArgs) -> Result<()> {
    if let Some(p) = a.polarity {
        cfg.data.polarity = p.into();
    }
    if let Some(v) = &a.validator {
        cfg.validator.endpoint = Some(v.clone());
    }
    let t = &mut cfg.eval.thresholds;
    t.accuracy = a.thresholds.min_accuracy.or(t.accuracy);
    t.precision = a.thresholds.min_precision.or(t.precision);
    t.recall = a.thresholds.min_recall.or(t.recall);
    t.f1 = a.thresholds.min_f1.or(t.f1);

    let mut truths = match &a.truths {
        Some(p) => Some(load_corpus(p, cfg.data.polarity)?.truths()),
        None => None,
    };
    let (source, mut preds) = if let Some(p) = &a.predictions {
        ("predictions".to_string(), load_predictions(p)?)
    } else if let Some(p) = &a.store {
        let store = load_store(p)?;
        let preds = store
            .iter()
            .filter(|x| a.source != StoreSource::LlmFinal || x.is_complete())
            .map(|x| {
                let v = match a.source {
                    StoreSource::Detector => x.detector.verdict,
                    StoreSource::LlmInitial => {
                        x.llm_initial.verdict.verdict().unwrap_or(Verdict::Clean)
                    }
                    StoreSource::LlmFinal => {
                        x.llm_final.verdict.verdict().unwrap_or(Verdict::Clean)
                    }
                };
                (x.id, v)
            })
            .collect();
        let name = match a.source {
            StoreSource::Detector => "store:detector",
            StoreSource::LlmInitial => "store:llm_initial",
            StoreSource::LlmFinal => "store:llm_final",
        };
        (name.to_string(), preds)
    } else if let Some(p) = &a.enriched {
        let lines: Vec<EnrichedLine> = read_lines(p)?;
        let validator = cfg.build_validator(None)?;
        let mut preds = BTreeMap::new();
        let mut from_file = BTreeMap::new();
        for l in &lines {
            let r = validator
                .predict(l.idx, &l.text)
                .and_then(|r| r.validate(l.idx))?;
            preds.insert(l.idx, r.verdict);
            let truth = Verdict::from_target(l.target).ok_or_else(|| {
                anyhow!("{}: sample {}: `target` must be 0 or 1", p.display(), l.idx)
            })?;
            from_file.insert(l.idx, truth);
        }
        truths.get_or_insert(from_file);
        ("validator".to_string(), preds)
    } else {
        return Err(usage("pass one of --predictions, --store or --enriched"));
    };
    let mut truths =
        truths.ok_or_else(|| usage("--truths is required unless --enriched is used"))?;
    let ids = part_ids(&a.manifest, a.part)?;
    restrict(&mut truths, &ids);
    restrict(&mut preds, &ids);

    let report = score(&preds, &truths)?;
    let misses = cfg.eval.thresholds.misses(&report);
    println!("{source}: {} samples", report.counts.total());
    println!("{report}");
    if report.degenerate.any() {
        println!("(* zero denominator, reported as 0)");
    }
    if let Some(path) = &a.report {
        let body = EvaluateReport {
            source: &source,
            samples: report.counts.total(),
            metrics: &report,
            threshold_misses: &misses,
        };
        write_atomic(path, &(serde_json::to_string_pretty(&body)? + "\n"))?;
    }
    if !misses.is_empty() {
        bail!("acceptance thresholds missed: {}", misses.join("; "));
    }
    Ok(())
}

pub fn compare(mut cfg: RunConfig, a: CompareArgs) -> Result<()> {
    if let Some(p) = a.polarity {
        cfg.data.polarity = p.into();
    }
    if !(2..=3).contains(&a.models.len()) {
        return Err(usage(format!(
            "--model must be given 2 or 3 times, got {}",
            a.models.len()
        )));
    }
    let ids = part_ids(&a.manifest, a.part)?;
    let mut truths = load_corpus(&a.truths, cfg.data.polarity)?.truths();
    restrict(&mut truths, &ids);
    let mut loaded = Vec::new();
    for spec in &a.models {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| usage(format!("expected NAME=FILE, got `{spec}`")))?;
        let mut preds = load_predictions(Path::new(path))?;
        restrict(&mut preds, &ids);
        loaded.push((name.to_string(), preds));
    }
    let refs: Vec<(&str, &BTreeMap<SampleId, Verdict>)> =
        loaded.iter().map(|(n, p)| (n.as_str(), p)).collect();
    let report = compare_models(&refs, &truths)?;
    print!("{}", report.render());
    if let Some(path) = &a.report {
        write_atomic(path, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    }
    Ok(())
}

/// Matrix file for `ablate --rows`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixFile {
    #[serde(default)]
    backends: MatrixBackends,
    #[serde(default)]
    row: Vec<AblationRow>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixBackends {
    #[serde(default)]
    detectors: BTreeMap<String, String>,
    #[serde(default)]
    llms: BTreeMap<String, String>,
}

pub fn ablate(mut cfg: RunConfig, a: AblateArgs) -> Result<()> {
    apply_data(&mut cfg, &a.data);
    apply_backends(&mut cfg, &a.backends);
    if let Some(v) = &a.validator {
        cfg.validator.endpoint = Some(v.clone());
    }
    if let Some(t) = &a.template {
        cfg.assess.template = Some(t.clone());
    }
    if let Some(c) = a.concurrency {
        cfg.assess.concurrency = c;
    }
    cfg.validate()?;
    let template = cfg.template()?;
    let (corpus, split) = load_split(&cfg)?;
    let truths = corpus.truths();

    let mut matrix = match &a.rows {
        Some(path) => {
            let text =
                fs::read_to_string(path).map_err(|e| collabvd::Error::io(path.clone(), e))?;
            toml::from_str::<MatrixFile>(&text)
                .map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => MatrixFile::default(),
    };
    let mut det_specs: BTreeMap<String, BackendSpec> = BTreeMap::new();
    let mut llm_specs: BTreeMap<String, BackendSpec> = BTreeMap::new();
    if let Some(e) = &cfg.detector.endpoint {
        det_specs.insert("detector".into(), e.parse()?);
    }
    if let Some(e) = &cfg.validator.endpoint {
        det_specs.insert("validator".into(), e.parse()?);
    }
    if let Some(e) = &cfg.llm.endpoint {
        llm_specs.insert("llm".into(), e.parse()?);
    }
    for (k, v) in &matrix.backends.detectors {
        det_specs.insert(k.clone(), v.parse()?);
    }
    for (k, v) in &matrix.backends.llms {
        llm_specs.insert(k.clone(), v.parse()?);
    }

    if a.rows.is_none() {
        let modes = if a.modes.is_empty() {
            vec![cfg.assess.hint_mode]
        } else {
            a.modes.clone()
        };
        let variants = if a.variants.is_empty() {
            vec![cfg.assess.variant]
        } else {
            a.variants.clone()
        };
        let scoring = a.scoring.unwrap_or(if det_specs.contains_key("validator") {
            Scoring::Validator
        } else {
            Scoring::LlmFinal
        });
        for v in &variants {
            for m in &modes {
                let name = if variants.len() > 1 {
                    format!("{m}/{v}")
                } else {
                    m.to_string()
                };
                matrix.row.push(AblationRow {
                    name,
                    hint_mode: *m,
                    variant: *v,
                    detector: "detector".into(),
                    llm: "llm".into(),
                    validator: (scoring == Scoring::Validator).then(|| "validator".into()),
                    scoring,
                });
            }
        }
    }
    if matrix.row.is_empty() {
        return Err(usage("the ablation matrix has no rows"));
    }

    let timeout = std::time::Duration::from_secs_f64(cfg.detector.timeout_secs);
    let mut det_boxes: Vec<(String, Box<dyn Detector>)> = Vec::new();
    for (k, spec) in &det_specs {
        det_boxes.push((k.clone(), spec.detector(timeout, cfg.retry, Some(&truths))?));
    }
    let mut llm_boxes: Vec<(String, Box<dyn ChatModel>)> = Vec::new();
    for (k, spec) in &llm_specs {
        llm_boxes.push((k.clone(), spec.chat(&cfg.llm.settings(), cfg.retry)?));
    }
    let backends = AblationBackends {
        detectors: det_boxes.iter().map(|(k, b)| (k.clone(), &**b)).collect(),
        llms: llm_boxes.iter().map(|(k, b)| (k.clone(), &**b)).collect(),
    };

    let out_dir = a
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("out/ablation"));
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let bucket = rate_bucket(&cfg);
    let mut settings = AblationSettings::new(&template);
    settings.seed = cfg.split.seed;
    settings.reask_limit = cfg.assess.reask_limit;
    settings.concurrency = cfg.assess.concurrency;
    settings.failure_threshold = cfg.assess.failure_threshold;
    settings.enrich = EnrichOptions {
        drop_verdict: cfg.synthesis.drop_verdict,
    };
    settings.eval_part = a.part.into();
    settings.cache_dir = Some(out_dir.join("stores"));
    settings.rate = bucket.as_ref();

    let outcomes = run_ablation(&matrix.row, &split, &backends, &settings)?;
    let table = render_table(&outcomes);
    print!("{table}");
    let (txt, jsonl) = (out_dir.join("ablation.txt"), out_dir.join("ablation.jsonl"));
    write_atomic(&txt, &table)?;
    write_atomic(&jsonl, &to_jsonl(&outcomes))?;
    let mut m = RunManifest::new("ablate", cfg.digest());
    m.template_version = Some(template.version.clone());
    m.input(data_path(&cfg)?)?.input(&cfg.split.manifest)?;
    m.output(&txt)?.output(&jsonl)?;
    m.write(&out_dir.join("run.json"))?;

    let mut problems = Vec::new();
    for o in &outcomes {
        match &o.status {
            RowStatus::Failed { reason } => problems.push(format!("{}: {reason}", o.row.name)),
            RowStatus::Ran { metrics, .. } => {
                for miss in cfg.eval.thresholds.misses(metrics) {
                    problems.push(format!("{}: {miss}", o.row.name));
                }
            }
            RowStatus::Skipped { .. } => {}
        }
    }
    if !problems.is_empty() {
        bail!("{}", problems.join("\n"));
    }
    Ok(())
}

pub fn show_config(cfg: &RunConfig) -> Result<()> {
    print!("{}", cfg.to_toml());
    println!("# digest {}", cfg.digest());
    Ok(())
}
