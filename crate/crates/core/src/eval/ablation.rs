use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{evaluate, MetricsReport};
use crate::backends::{detector_predict, ChatModel, Detector};
use crate::collab::{
    run_pipeline, run_samples, Assessment, AssessmentStore, DialogueOptions, HintMode,
    PipelineOptions, Stage, TokenBucket,
};
use crate::config::StoreIdentity;
use crate::corpus::{CodeSample, Part, SplitCorpus};
use crate::dialogue::{LlmVerdict, PromptTemplate, PromptVariant};
use crate::error::{Error, Result};
use crate::synthesis::{enrich, EnrichOptions};
use crate::{SampleId, Verdict};

/// Which verdict a row is scored on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    /// The detector alone.
    Detector,
    /// The LLM's Phase I answer; Unknown counts as Clean.
    LlmInitial,
    /// The LLM's answer after refinement; Unknown counts as Clean.
    LlmFinal,
    /// The validator queried with enriched text.
    Validator,
}

impl Scoring {
    pub fn as_str(self) -> &'static str {
        match self {
            Scoring::Detector => "detector",
            Scoring::LlmInitial => "llm_initial",
            Scoring::LlmFinal => "llm_final",
            Scoring::Validator => "validator",
        }
    }
}

impl std::str::FromStr for Scoring {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "detector" => Ok(Scoring::Detector),
            "llm_initial" => Ok(Scoring::LlmInitial),
            "llm_final" => Ok(Scoring::LlmFinal),
            "validator" => Ok(Scoring::Validator),
            _ => Err(format!("unknown scoring `{s}`")),
        }
    }
}

/// One configuration of the experiment matrix. Backends are named by key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRow {
    pub name: String,
    pub hint_mode: HintMode,
    #[serde(default)]
    pub variant: PromptVariant,
    pub detector: String,
    pub llm: String,
    #[serde(default)]
    pub validator: Option<String>,
    pub scoring: Scoring,
}

/// Named backends available to the matrix. Validators are looked up among
/// the detectors, since they speak the same protocol.
#[derive(Default)]
pub struct AblationBackends<'a> {
    pub detectors: BTreeMap<String, &'a dyn Detector>,
    pub llms: BTreeMap<String, &'a dyn ChatModel>,
}

#[derive(Debug, Clone)]
pub struct AblationSettings<'a> {
    pub template: &'a PromptTemplate,
    pub seed: u64,
    pub reask_limit: u32,
    pub concurrency: usize,
    pub failure_threshold: f64,
    pub enrich: EnrichOptions,
    /// Part the rows are scored on.
    pub eval_part: Part,
    /// Persist per-row and Phase I stores here so reruns resume.
    pub cache_dir: Option<PathBuf>,
    pub rate: Option<&'a TokenBucket>,
}

impl<'a> AblationSettings<'a> {
    pub fn new(template: &'a PromptTemplate) -> Self {
        Self {
            template,
            seed: crate::corpus::DEFAULT_SEED,
            reask_limit: 2,
            concurrency: 8,
            failure_threshold: 0.05,
            enrich: EnrichOptions::default(),
            eval_part: Part::Test,
            cache_dir: None,
            rate: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RowStatus {
    Ran {
        metrics: MetricsReport,
        /// Scored samples that went through a recheck exchange.
        refined: usize,
        /// Backend calls this row issued (cached work excluded).
        detector_calls: usize,
        llm_calls: usize,
    },
    Skipped {
        reason: String,
    },
    Failed {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub row: AblationRow,
    #[serde(flatten)]
    pub status: RowStatus,
}

impl AblationOutcome {
    pub fn metrics(&self) -> Option<&MetricsReport> {
        match &self.status {
            RowStatus::Ran { metrics, .. } => Some(metrics),
            _ => None,
        }
    }
}

fn identity(row: &AblationRow, settings: &AblationSettings<'_>) -> StoreIdentity {
    StoreIdentity {
        detector: row.detector.clone(),
        llm: row.llm.clone(),
        model: String::new(),
        temperature: 0.0,
        max_tokens: 0,
        variant: row.variant,
        reask_limit: settings.reask_limit,
        seed: settings.seed,
        template_version: settings.template.version.clone(),
    }
}

fn open_store(
    settings: &AblationSettings<'_>,
    file: &str,
    id: &StoreIdentity,
    mode: Option<HintMode>,
) -> Result<AssessmentStore> {
    let meta = id.store_meta(mode);
    match &settings.cache_dir {
        Some(dir) => AssessmentStore::open(dir.join(file), meta),
        None => Ok(AssessmentStore::in_memory(meta)),
    }
}

fn llm_score(v: LlmVerdict) -> Verdict {
    v.verdict().unwrap_or(Verdict::Clean)
}

struct Runner<'s, 'a> {
    split: &'s SplitCorpus,
    backends: &'s AblationBackends<'a>,
    settings: &'s AblationSettings<'a>,
    phase1: HashMap<String, AssessmentStore>,
}

impl<'s, 'a> Runner<'s, 'a> {
    fn options(&self, variant: PromptVariant, mode: HintMode) -> PipelineOptions<'s> {
        let mut d = DialogueOptions::new(self.settings.template);
        d.variant = variant;
        d.reask_limit = self.settings.reask_limit;
        d.exemplar_pool = self.split.train.samples();
        d.seed = self.settings.seed;
        d.rate = self.settings.rate;
        let mut p = PipelineOptions::new(d, mode);
        p.concurrency = self.settings.concurrency;
        p.failure_threshold = self.settings.failure_threshold;
        p
    }

    fn eval_samples(&self) -> Vec<&'s CodeSample> {
        self.split.part(self.settings.eval_part).iter().collect()
    }

    fn run_row(&mut self, row: &AblationRow) -> Result<RowStatus> {
        let skip = |what: &str, key: &str| RowStatus::Skipped {
            reason: format!("no {what} backend named `{key}`"),
        };
        let Some(&detector) = self.backends.detectors.get(&row.detector) else {
            return Ok(skip("detector", &row.detector));
        };
        let eval = self.eval_samples();
        let truths: BTreeMap<SampleId, Verdict> = eval.iter().map(|s| (s.id, s.label)).collect();

        if row.scoring == Scoring::Detector {
            let mut preds = BTreeMap::new();
            for s in &eval {
                match detector_predict(detector, s) {
                    Ok(r) => preds.insert(s.id, r.verdict),
                    Err(e) => {
                        return Ok(RowStatus::Failed {
                            reason: e.to_string(),
                        })
                    }
                };
            }
            return Ok(RowStatus::Ran {
                metrics: evaluate(&preds, &truths)?,
                refined: 0,
                detector_calls: eval.len(),
                llm_calls: 0,
            });
        }

        let Some(&llm) = self.backends.llms.get(&row.llm) else {
            return Ok(skip("llm", &row.llm));
        };
        let validator = match (&row.scoring, &row.validator) {
            (Scoring::Validator, None) => {
                return Ok(RowStatus::Skipped {
                    reason: "validator scoring without a validator".into(),
                })
            }
            (Scoring::Validator, Some(key)) => match self.backends.detectors.get(key) {
                Some(&v) => Some(v),
                None => return Ok(skip("validator", key)),
            },
            _ => None,
        };
        // Validator rows enrich every part, as training the validator requires.
        let scope: Vec<&'s CodeSample> = match row.scoring {
            Scoring::Validator => self.split.all_samples(),
            _ => eval.clone(),
        };

        let id = identity(row, self.settings);
        let key = id.phase1_digest();
        let opts = self.options(row.variant, row.hint_mode);
        let phase1 = match self.phase1.entry(key.clone()) {
            std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::hash_map::Entry::Vacant(e) => {
                let file = format!("phase1-{}.jsonl", crate::digest::short(&key));
                e.insert(open_store(self.settings, &file, &id, None)?)
            }
        };
        let p1 = match run_samples(&scope, detector, llm, &opts, phase1, true) {
            Ok(s) => s,
            Err(e @ Error::FailureThreshold { .. }) => {
                return Ok(RowStatus::Failed {
                    reason: e.to_string(),
                })
            }
            Err(e) => return Err(e),
        };
        let (mut detector_calls, mut llm_calls) = (p1.detector_calls, p1.llm_calls);

        if row.scoring == Scoring::LlmInitial {
            let mut preds = BTreeMap::new();
            for s in &eval {
                match phase1.get(s.id) {
                    Some(a) => preds.insert(s.id, llm_score(a.llm_initial.verdict)),
                    None => return Ok(incomplete(&eval, |id| phase1.get(id).is_some())),
                };
            }
            return Ok(RowStatus::Ran {
                metrics: evaluate(&preds, &truths)?,
                refined: 0,
                detector_calls,
                llm_calls,
            });
        }

        let file = format!("row-{}.jsonl", sanitize(&row.name));
        let mut store = open_store(self.settings, &file, &id, Some(row.hint_mode))?;
        for s in &scope {
            if store.get(s.id).is_none() {
                if let Some(a) = phase1.get(s.id) {
                    let mut seeded: Assessment = a.clone();
                    seeded.hint_mode = row.hint_mode;
                    seeded.stage = Stage::Initial;
                    store.append(seeded)?;
                }
            }
        }
        let run = match row.scoring {
            Scoring::Validator => {
                run_pipeline(self.split, &Part::ALL, detector, llm, &opts, &mut store)
                    .map(|r| r.run)
            }
            _ => run_samples(&scope, detector, llm, &opts, &mut store, false),
        };
        match run {
            Ok(stats) => {
                detector_calls += stats.detector_calls;
                llm_calls += stats.llm_calls;
            }
            Err(e @ Error::FailureThreshold { .. }) => {
                return Ok(RowStatus::Failed {
                    reason: e.to_string(),
                })
            }
            Err(e) => return Err(e),
        }
        let complete = |id: SampleId| store.get(id).is_some_and(Assessment::is_complete);
        if !eval.iter().all(|s| complete(s.id)) {
            return Ok(incomplete(&eval, complete));
        }

        let mut preds = BTreeMap::new();
        let mut refined = 0;
        for s in &eval {
            let a = store.get(s.id).expect("checked complete");
            refined += a.refined as usize;
            let v = match validator {
                None => llm_score(a.llm_final.verdict),
                Some(v) => {
                    let e = enrich(self.settings.template, s, Some(a), self.settings.enrich)?;
                    detector_calls += 1;
                    match v.predict(s.id, &e.text).and_then(|r| r.validate(s.id)) {
                        Ok(r) => r.verdict,
                        Err(e) => {
                            return Ok(RowStatus::Failed {
                                reason: e.to_string(),
                            })
                        }
                    }
                }
            };
            preds.insert(s.id, v);
        }
        Ok(RowStatus::Ran {
            metrics: evaluate(&preds, &truths)?,
            refined,
            detector_calls,
            llm_calls,
        })
    }
}

fn incomplete(eval: &[&CodeSample], done: impl Fn(SampleId) -> bool) -> RowStatus {
    let missing: Vec<SampleId> = eval.iter().map(|s| s.id).filter(|&id| !done(id)).collect();
    RowStatus::Failed {
        reason: format!(
            "{} sample(s) without a usable assessment: {missing:?}",
            missing.len()
        ),
    }
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Runs every row and scores it on the evaluation part.
///
/// Rows sharing a detector, LLM and prompt variant share one Phase I store,
/// so Phase I is paid for once however many hint modes are compared.
pub fn run_ablation(
    rows: &[AblationRow],
    split: &SplitCorpus,
    backends: &AblationBackends<'_>,
    settings: &AblationSettings<'_>,
) -> Result<Vec<AblationOutcome>> {
    let mut seen = BTreeSet::new();
    for row in rows {
        if !seen.insert(row.name.as_str()) {
            return Err(Error::Config(format!(
                "duplicate ablation row `{}`",
                row.name
            )));
        }
    }
    let mut runner = Runner {
        split,
        backends,
        settings,
        phase1: HashMap::new(),
    };
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        log::info!("ablation row `{}`", row.name);
        let status = runner.run_row(row)?;
        out.push(AblationOutcome {
            row: row.clone(),
            status,
        });
    }
    Ok(out)
}

/// Aligned text table, one line per row.
pub fn render_table(outcomes: &[AblationOutcome]) -> String {
    let width = outcomes
        .iter()
        .map(|o| o.row.name.len())
        .chain(["config".len()])
        .max()
        .unwrap_or(0);
    let mut out = format!(
        "{:<width$}  {:<11}  {:<13}  {:<11}  {:>8}  {:>9}  {:>8}  {:>8}  {:>7}\n",
        "config",
        "hint_mode",
        "variant",
        "scoring",
        "accuracy",
        "precision",
        "recall",
        "f1",
        "refined"
    );
    for o in outcomes {
        let r = &o.row;
        let head = format!(
            "{:<width$}  {:<11}  {:<13}  {:<11}",
            r.name,
            r.hint_mode.as_str(),
            r.variant.to_string(),
            r.scoring.as_str()
        );
        match &o.status {
            RowStatus::Ran {
                metrics: m,
                refined,
                ..
            } => {
                let _ = writeln!(
                    out,
                    "{head}  {:>8.4}  {:>9.4}  {:>8.4}  {:>8.4}  {:>7}",
                    m.accuracy, m.precision, m.recall, m.f1, refined
                );
            }
            RowStatus::Skipped { reason } => {
                let _ = writeln!(out, "{head}  skipped: {reason}");
            }
            RowStatus::Failed { reason } => {
                let _ = writeln!(out, "{head}  failed: {reason}");
            }
        }
    }
    out
}

/// One JSON object per row.
pub fn to_jsonl(outcomes: &[AblationOutcome]) -> String {
    outcomes
        .iter()
        .map(|o| serde_json::to_string(o).expect("outcome serializes") + "\n")
        .collect()
}
