use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use crossbeam_channel::unbounded;
use serde::Serialize;

use super::{
    phase_one, refine, Assessment, AssessmentStore, DialogueOptions, HintMode, Stage, Status,
};
use crate::backends::{ChatModel, Detector, DetectorReply, Message};
use crate::corpus::{CodeSample, Corpus, Part, SplitCorpus};
use crate::dialogue::LlmVerdict;
use crate::error::{Error, Result};
use crate::{BackendError, SampleId};

/// Cooperative stop signal: workers finish the sample in hand and take no more.
#[derive(Debug, Clone, Default)]
pub struct CancelFlag(Arc<AtomicBool>);

impl CancelFlag {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cancel(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOptions<'a> {
    pub dialogue: DialogueOptions<'a>,
    pub hint_mode: HintMode,
    /// Samples in flight at once; bounds concurrent LLM requests.
    pub concurrency: usize,
    /// Abort once failed samples exceed this fraction of the samples attempted.
    pub failure_threshold: f64,
    pub cancel: Option<CancelFlag>,
}

impl<'a> PipelineOptions<'a> {
    pub fn new(dialogue: DialogueOptions<'a>, hint_mode: HintMode) -> Self {
        Self {
            dialogue,
            hint_mode,
            concurrency: 8,
            failure_threshold: 0.05,
            cancel: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunStats {
    pub samples: usize,
    /// Samples already complete in the store.
    pub cached: usize,
    pub completed: usize,
    pub detector_calls: usize,
    pub llm_calls: usize,
    /// Phase II exchanges attempted.
    pub refinements: usize,
    pub failed: Vec<(SampleId, String)>,
    pub cancelled: bool,
}

impl RunStats {
    pub fn calls(&self) -> usize {
        self.detector_calls + self.llm_calls
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartStats {
    pub part: Part,
    pub samples: usize,
    pub assessed: usize,
    /// Phase I agreement among assessed samples with a Yes/No LLM answer.
    pub agreement_rate: f64,
    pub disagreements: usize,
    pub refined: usize,
    pub unknown_initial: usize,
    pub unknown_final: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineReport {
    pub run: RunStats,
    pub parts: Vec<PartStats>,
}

struct Counting<'a, B: ?Sized> {
    inner: &'a B,
    calls: AtomicUsize,
}

impl<'a, B: ?Sized> Counting<'a, B> {
    fn new(inner: &'a B) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    fn count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<B: Detector + ?Sized> Detector for Counting<'_, B> {
    fn predict(&self, id: SampleId, code: &str) -> Result<DetectorReply, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.predict(id, code)
    }
}

impl<B: ChatModel + ?Sized> ChatModel for Counting<'_, B> {
    fn chat(&self, id: SampleId, transcript: &[Message]) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.chat(id, transcript)
    }
}

struct Job<'s> {
    sample: &'s CodeSample,
    initial: Option<Assessment>,
}

enum Event {
    Initial(Assessment),
    Final {
        assessment: Assessment,
        attempted: bool,
        error: Option<BackendError>,
    },
    Failed(SampleId, String),
}

/// Runs Phase I (and Phase II unless `phase1_only`) over `samples`.
///
/// Samples with a complete record in `store` are skipped; samples with only
/// Phase I recorded resume at Phase II. Results are appended through a
/// single writer as they complete; unless cancelled, the store is compacted
/// at the end so its bytes do not depend on completion order.
pub fn run_samples(
    samples: &[&CodeSample],
    detector: &dyn Detector,
    llm: &dyn ChatModel,
    opts: &PipelineOptions<'_>,
    store: &mut AssessmentStore,
    phase1_only: bool,
) -> Result<RunStats> {
    let mode = opts.hint_mode;
    let mut stats = RunStats {
        samples: samples.len(),
        ..RunStats::default()
    };
    let mut jobs = Vec::new();
    for &sample in samples {
        match store.get(sample.id) {
            Some(a) if a.is_complete() || phase1_only => stats.cached += 1,
            Some(a) => jobs.push(Job {
                sample,
                initial: Some(a.clone()),
            }),
            None => jobs.push(Job {
                sample,
                initial: None,
            }),
        }
    }
    if jobs.is_empty() {
        log::info!("all {} samples cached; no backend calls", samples.len());
        return Ok(stats);
    }

    let detector = Counting::new(detector);
    let llm = Counting::new(llm);
    let attempted = jobs.len();
    let limit = opts.failure_threshold * attempted as f64;
    let stop = AtomicBool::new(false);
    let cancelled = || opts.cancel.as_ref().is_some_and(CancelFlag::is_cancelled);
    let (job_tx, job_rx) = unbounded::<Job<'_>>();
    for job in jobs {
        job_tx.send(job).expect("receiver alive");
    }
    drop(job_tx);
    let (ev_tx, ev_rx) = unbounded::<Event>();

    let mut write_error = None;
    let mut aborted = false;
    thread::scope(|scope| {
        for _ in 0..opts.concurrency.clamp(1, attempted) {
            let job_rx = job_rx.clone();
            let ev_tx = ev_tx.clone();
            let (detector, llm, stop) = (&detector, &llm, &stop);
            scope.spawn(move || {
                while !stop.load(Ordering::SeqCst) && !cancelled() {
                    let Ok(job) = job_rx.recv() else { break };
                    for ev in process(job, detector, llm, opts, mode, phase1_only) {
                        if ev_tx.send(ev).is_err() {
                            return;
                        }
                    }
                }
            });
        }
        drop(ev_tx);

        for ev in ev_rx {
            let result = match ev {
                Event::Initial(a) => {
                    if phase1_only {
                        stats.completed += 1;
                    }
                    store.append(a)
                }
                Event::Final {
                    assessment,
                    attempted,
                    error,
                } => {
                    stats.refinements += attempted as usize;
                    match error {
                        Some(e) => stats.failed.push((assessment.id, e.to_string())),
                        None => stats.completed += 1,
                    }
                    store.append(assessment)
                }
                Event::Failed(id, reason) => {
                    log::warn!("sample {id} failed: {reason}");
                    stats.failed.push((id, reason));
                    Ok(())
                }
            };
            if let Err(e) = result {
                write_error.get_or_insert(e);
                stop.store(true, Ordering::SeqCst);
            }
            if !aborted && stats.failed.len() as f64 > limit {
                aborted = true;
                stop.store(true, Ordering::SeqCst);
            }
        }
    });

    stats.detector_calls = detector.count();
    stats.llm_calls = llm.count();
    stats.cancelled = cancelled();
    stats.failed.sort();
    if let Some(e) = write_error {
        return Err(e);
    }
    if !stats.cancelled {
        store.compact()?;
    }
    if aborted {
        return Err(Error::FailureThreshold {
            failed: stats.failed.len(),
            total: attempted,
            limit: opts.failure_threshold,
        });
    }
    Ok(stats)
}

fn process(
    job: Job<'_>,
    detector: &dyn Detector,
    llm: &dyn ChatModel,
    opts: &PipelineOptions<'_>,
    mode: HintMode,
    phase1_only: bool,
) -> Vec<Event> {
    let sample = job.sample;
    let mut events = Vec::new();
    let initial = match job.initial {
        Some(a) => a,
        None => match phase_one(sample, detector, llm, &opts.dialogue) {
            Ok(p1) => {
                let a = p1.into_initial(sample.id, mode);
                let pending = mode
                    .recheck_finding(a.detector.verdict, a.llm_initial.verdict)
                    .is_some();
                if phase1_only || pending {
                    events.push(Event::Initial(a.clone()));
                }
                a
            }
            Err(e) => {
                events.push(Event::Failed(sample.id, e.to_string()));
                return events;
            }
        },
    };
    if phase1_only {
        return events;
    }
    match refine(&initial, sample, llm, mode, &opts.dialogue) {
        Ok(r) => events.push(Event::Final {
            attempted: r.llm_calls > 0,
            assessment: r.assessment,
            error: r.error,
        }),
        Err(e) => events.push(Event::Failed(sample.id, e.to_string())),
    }
    events
}

/// Phase I only, over a whole corpus.
pub fn run_phase1(
    corpus: &Corpus,
    detector: &dyn Detector,
    llm: &dyn ChatModel,
    opts: &PipelineOptions<'_>,
    store: &mut AssessmentStore,
) -> Result<RunStats> {
    let samples: Vec<&CodeSample> = corpus.iter().collect();
    run_samples(&samples, detector, llm, opts, store, true)
}

/// Both phases over train, valid and test alike.
///
/// `parts` must name all three: enriching only some of them would train
/// the validator on text produced under different conditions than the
/// text it is evaluated on.
pub fn run_pipeline(
    split: &SplitCorpus,
    parts: &[Part],
    detector: &dyn Detector,
    llm: &dyn ChatModel,
    opts: &PipelineOptions<'_>,
    store: &mut AssessmentStore,
) -> Result<PipelineReport> {
    if !Part::ALL.iter().all(|p| parts.contains(p)) {
        return Err(Error::PartialEnrichment(
            parts.iter().map(|p| p.as_str().to_string()).collect(),
        ));
    }
    let mut opts = opts.clone();
    opts.dialogue.exemplar_pool = split.train.samples();
    let samples = split.all_samples();
    let run = run_samples(&samples, detector, llm, &opts, store, false)?;
    let parts = split
        .parts()
        .map(|(part, corpus)| part_stats(part, corpus, store))
        .collect();
    Ok(PipelineReport { run, parts })
}

fn part_stats(part: Part, corpus: &Corpus, store: &AssessmentStore) -> PartStats {
    let mut s = PartStats {
        part,
        samples: corpus.len(),
        assessed: 0,
        agreement_rate: 0.0,
        disagreements: 0,
        refined: 0,
        unknown_initial: 0,
        unknown_final: 0,
        failed: 0,
    };
    let mut known = 0usize;
    for id in corpus.ids() {
        let Some(a) = store.get(id) else { continue };
        if a.stage != Stage::Final {
            continue;
        }
        if a.status == Status::RefineFailed {
            s.failed += 1;
        }
        s.assessed += 1;
        s.refined += a.refined as usize;
        match a.llm_initial.verdict.verdict() {
            Some(c) => {
                known += 1;
                s.disagreements += (c != a.detector.verdict) as usize;
            }
            None => s.unknown_initial += 1,
        }
        s.unknown_final += (a.llm_final.verdict == LlmVerdict::Unknown) as usize;
    }
    // Samples with no final record failed Phase I or were never reached.
    s.failed += corpus.len() - s.assessed;
    if known > 0 {
        s.agreement_rate = (known - s.disagreements) as f64 / known as f64;
    }
    s
}
