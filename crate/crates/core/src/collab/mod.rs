//! Dual assessment and disagreement-triggered refinement.
//!
//! Phase I asks the detector and the LLM about a sample independently.
//! Phase II runs at most once per sample: under [`HintMode::Detector`] it
//! happens only when the LLM's verdict differs from the detector's, and the
//! recheck prompt reports the detector's verdict. The other hint modes are
//! ablations: no refinement at all, or a fixed claim for every sample.

mod pipeline;
mod ratelimit;
mod store;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backends::{
    detector_predict, llm_chat, transcript_hash, ChatModel, Detector, DetectorReply, Message,
};
use crate::corpus::CodeSample;
use crate::dialogue::{
    build_fewshot_prompt, build_phase1_prompt, build_phase2_prompt, parse_reply, select_exemplars,
    LlmVerdict, ParsedReply, PromptTemplate, PromptVariant,
};
use crate::{BackendError, SampleId, Verdict};

pub use pipeline::{
    run_phase1, run_pipeline, run_samples, CancelFlag, PartStats, PipelineOptions, PipelineReport,
    RunStats,
};
pub use ratelimit::TokenBucket;
pub use store::{AssessmentStore, StoreMeta};

/// What the Phase II prompt claims another expert found.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HintMode {
    /// The detector's actual verdict, only on disagreement.
    #[default]
    Detector,
    /// No Phase II.
    None,
    /// "has vulnerabilities" for every sample.
    AlwaysYes,
    /// "does not have vulnerabilities" for every sample.
    AlwaysNo,
}

impl HintMode {
    pub const ALL: [HintMode; 4] = [
        HintMode::Detector,
        HintMode::None,
        HintMode::AlwaysYes,
        HintMode::AlwaysNo,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            HintMode::Detector => "detector",
            HintMode::None => "none",
            HintMode::AlwaysYes => "always_yes",
            HintMode::AlwaysNo => "always_no",
        }
    }

    /// The finding to report in Phase II, or `None` when no exchange is due.
    pub fn recheck_finding(self, detector: Verdict, initial: LlmVerdict) -> Option<Verdict> {
        match self {
            HintMode::Detector => match initial.verdict() {
                Some(c) if c != detector => Some(detector),
                _ => None,
            },
            HintMode::None => None,
            HintMode::AlwaysYes => Some(Verdict::Vulnerable),
            HintMode::AlwaysNo => Some(Verdict::Clean),
        }
    }
}

impl fmt::Display for HintMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HintMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().replace('-', "_").as_str() {
            "detector" => Ok(HintMode::Detector),
            "none" => Ok(HintMode::None),
            "always_yes" => Ok(HintMode::AlwaysYes),
            "always_no" => Ok(HintMode::AlwaysNo),
            other => Err(format!(
                "unknown hint mode `{other}` (detector, none, always_yes, always_no)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Phase I recorded, Phase II pending.
    Initial,
    Final,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    /// Phase II failed; initial values were kept.
    RefineFailed,
}

/// Per-sample record of both phases.
#[derive(Debug, Clone, PartialEq)]
pub struct Assessment {
    pub id: SampleId,
    pub detector: DetectorReply,
    pub llm_initial: ParsedReply,
    pub llm_final: ParsedReply,
    /// Raw Phase I completion, replayed verbatim in the Phase II transcript.
    pub reply_initial: String,
    pub reply_final: Option<String>,
    pub refined: bool,
    pub hint_mode: HintMode,
    pub stage: Stage,
    pub status: Status,
    pub prompt_hash: String,
    pub refine_prompt_hash: Option<String>,
}

impl Assessment {
    pub fn is_complete(&self) -> bool {
        self.stage == Stage::Final && self.status == Status::Ok
    }

    /// Whether Phase I verdicts agree. Unknown counts as agreement.
    pub fn agrees(&self) -> bool {
        match self.llm_initial.verdict.verdict() {
            Some(c) => c == self.detector.verdict,
            None => true,
        }
    }
}

/// Result of Phase I for one sample, before refinement.
#[derive(Debug, Clone)]
pub(crate) struct PhaseOne {
    pub detector: DetectorReply,
    pub transcript: Vec<Message>,
    pub reply: String,
    pub parsed: ParsedReply,
}

/// Knobs shared by both phases.
#[derive(Debug, Clone)]
pub struct DialogueOptions<'a> {
    pub template: &'a PromptTemplate,
    pub variant: PromptVariant,
    /// Re-asks with the same prompt when a reply parses as Unknown.
    pub reask_limit: u32,
    /// Few-shot exemplar source (the training split).
    pub exemplar_pool: &'a [CodeSample],
    pub seed: u64,
    pub rate: Option<&'a TokenBucket>,
}

impl<'a> DialogueOptions<'a> {
    pub fn new(template: &'a PromptTemplate) -> Self {
        Self {
            template,
            variant: PromptVariant::Plain,
            reask_limit: 2,
            exemplar_pool: &[],
            seed: crate::corpus::DEFAULT_SEED,
            rate: None,
        }
    }

    pub(crate) fn phase1_transcript(&self, sample: &CodeSample) -> crate::Result<Vec<Message>> {
        Ok(match self.variant {
            PromptVariant::Plain => build_phase1_prompt(self.template, sample, false),
            PromptVariant::Cot => build_phase1_prompt(self.template, sample, true),
            PromptVariant::FewShot { vulnerable, clean } => {
                let ex =
                    select_exemplars(self.exemplar_pool, sample, vulnerable, clean, self.seed)?;
                build_fewshot_prompt(self.template, sample, &ex, false)
            }
        })
    }
}

/// Asks until the reply parses as Yes/No or the re-ask budget is spent.
fn ask(
    llm: &dyn ChatModel,
    id: SampleId,
    transcript: &[Message],
    opts: &DialogueOptions<'_>,
) -> Result<(String, ParsedReply, usize), BackendError> {
    let mut calls = 0;
    loop {
        if let Some(bucket) = opts.rate {
            bucket.acquire();
        }
        calls += 1;
        let text = llm_chat(llm, id, transcript)?;
        let parsed = parse_reply(&text);
        if parsed.verdict != LlmVerdict::Unknown || calls > opts.reask_limit as usize {
            if parsed.verdict == LlmVerdict::Unknown {
                log::info!(
                    "sample {id}: reply still unparseable after {calls} call(s); recording unknown"
                );
            }
            return Ok((text, parsed, calls));
        }
        log::debug!("sample {id}: unparseable reply, re-asking");
    }
}

/// Phase I: detector and LLM run concurrently on the same sample.
pub(crate) fn phase_one(
    sample: &CodeSample,
    detector: &dyn Detector,
    llm: &dyn ChatModel,
    opts: &DialogueOptions<'_>,
) -> crate::Result<PhaseOne> {
    let transcript = opts.phase1_transcript(sample)?;
    let (det, chat) = std::thread::scope(|s| {
        let det = s.spawn(|| detector_predict(detector, sample));
        let chat = ask(llm, sample.id, &transcript, opts);
        (det.join().expect("detector thread panicked"), chat)
    });
    let detector = det?;
    let (reply, parsed, _) = chat?;
    Ok(PhaseOne {
        detector,
        transcript,
        reply,
        parsed,
    })
}

impl PhaseOne {
    pub(crate) fn into_initial(self, id: SampleId, mode: HintMode) -> Assessment {
        Assessment {
            id,
            detector: self.detector,
            llm_initial: self.parsed.clone(),
            llm_final: self.parsed,
            prompt_hash: transcript_hash(&self.transcript),
            reply_initial: self.reply,
            reply_final: None,
            refined: false,
            hint_mode: mode,
            stage: Stage::Initial,
            status: Status::Ok,
            refine_prompt_hash: None,
        }
    }
}

/// Outcome of [`refine`], with the number of LLM calls it issued.
#[derive(Debug, Clone)]
pub struct Refinement {
    pub assessment: Assessment,
    pub llm_calls: usize,
    pub error: Option<BackendError>,
}

/// Phase II for one sample: at most one recheck exchange.
///
/// `assessment` must carry Phase I results. The returned assessment is
/// final; on LLM failure it keeps the initial verdict and is flagged.
pub fn refine(
    assessment: &Assessment,
    sample: &CodeSample,
    llm: &dyn ChatModel,
    mode: HintMode,
    opts: &DialogueOptions<'_>,
) -> crate::Result<Refinement> {
    let mut out = assessment.clone();
    out.hint_mode = mode;
    out.stage = Stage::Final;
    out.status = Status::Ok;
    out.refined = false;
    out.llm_final = out.llm_initial.clone();
    out.reply_final = None;
    out.refine_prompt_hash = None;

    let Some(finding) =
        mode.recheck_finding(assessment.detector.verdict, assessment.llm_initial.verdict)
    else {
        return Ok(Refinement {
            assessment: out,
            llm_calls: 0,
            error: None,
        });
    };
    let phase1 = opts.phase1_transcript(sample)?;
    let transcript =
        build_phase2_prompt(opts.template, &phase1, &assessment.reply_initial, finding);
    out.refine_prompt_hash = Some(transcript_hash(&transcript));
    match ask(llm, sample.id, &transcript, opts) {
        Ok((text, parsed, calls)) => {
            out.llm_final = parsed;
            out.reply_final = Some(text);
            out.refined = true;
            Ok(Refinement {
                assessment: out,
                llm_calls: calls,
                error: None,
            })
        }
        Err(e) => {
            log::warn!("sample {}: refinement failed: {e}", sample.id);
            out.status = Status::RefineFailed;
            Ok(Refinement {
                assessment: out,
                llm_calls: 1,
                error: Some(e),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::{Recorded, ScriptMode, ScriptedChat, ScriptedDetector};

    fn sample() -> CodeSample {
        CodeSample::new(11, "int f(char *p) { return p[16]; }", Verdict::Vulnerable)
    }

    fn initial(z: Verdict, reply: &str) -> Assessment {
        let p = parse_reply(reply);
        Assessment {
            id: 11,
            detector: DetectorReply::from_score(if z == Verdict::Vulnerable { 0.9 } else { 0.1 }),
            llm_initial: p.clone(),
            llm_final: p,
            reply_initial: reply.into(),
            reply_final: None,
            refined: false,
            hint_mode: HintMode::Detector,
            stage: Stage::Initial,
            status: Status::Ok,
            prompt_hash: String::new(),
            refine_prompt_hash: None,
        }
    }

    #[test]
    fn agreement_skips_call() {
        let tpl = PromptTemplate::default();
        let opts = DialogueOptions::new(&tpl);
        let llm = Recorded::new(ScriptedChat::default());
        let a = initial(Verdict::Vulnerable, "Yes, overflow");
        let r = refine(&a, &sample(), &llm, HintMode::Detector, &opts).unwrap();
        assert_eq!(llm.calls(), 0);
        assert!(!r.assessment.refined);
        assert_eq!(r.assessment.llm_final, a.llm_initial);
        assert_eq!(r.assessment.stage, Stage::Final);
    }

    #[test]
    fn disagreement_reports_detector_verdict() {
        let tpl = PromptTemplate::default();
        let opts = DialogueOptions::new(&tpl);
        let llm = Recorded::new(
            ScriptedChat::new(ScriptMode::ByTurn)
                .with_sample(11, ["No", "Yes, reads past the buffer"]),
        );
        let a = initial(Verdict::Vulnerable, "No");
        let r = refine(&a, &sample(), &llm, HintMode::Detector, &opts).unwrap();
        assert_eq!(llm.calls(), 1);
        let sent = &llm.transcripts()[0].1;
        assert_eq!(sent.len(), 3);
        assert_eq!(sent[1].content, "No");
        assert!(sent[2].content.contains("has vulnerabilities"));
        assert!(r.assessment.refined);
        assert_eq!(
            r.assessment.llm_final,
            ParsedReply::vulnerable("reads past the buffer")
        );
        assert_eq!(r.assessment.llm_initial, ParsedReply::clean());
    }

    #[test]
    fn always_no_calls_on_agreement() {
        let tpl = PromptTemplate::default();
        let opts = DialogueOptions::new(&tpl);
        let llm =
            Recorded::new(ScriptedChat::new(ScriptMode::ByTurn).with_sample(11, ["Yes, a", "No"]));
        let a = initial(Verdict::Vulnerable, "Yes, a");
        let r = refine(&a, &sample(), &llm, HintMode::AlwaysNo, &opts).unwrap();
        assert_eq!(llm.calls(), 1);
        assert!(llm.transcripts()[0].1[2]
            .content
            .contains("does not have vulnerabilities"));
        assert_eq!(r.assessment.llm_final, ParsedReply::clean());
    }

    #[test]
    fn none_mode_never_calls() {
        let tpl = PromptTemplate::default();
        let opts = DialogueOptions::new(&tpl);
        let llm = Recorded::new(ScriptedChat::default());
        let r = refine(
            &initial(Verdict::Vulnerable, "No"),
            &sample(),
            &llm,
            HintMode::None,
            &opts,
        )
        .unwrap();
        assert_eq!(llm.calls(), 0);
        assert!(!r.assessment.refined);
    }

    #[test]
    fn unknown_never_triggers_under_detector_mode() {
        let tpl = PromptTemplate::default();
        let opts = DialogueOptions::new(&tpl);
        let llm = Recorded::new(ScriptedChat::default());
        let r = refine(
            &initial(Verdict::Vulnerable, "Hmm."),
            &sample(),
            &llm,
            HintMode::Detector,
            &opts,
        )
        .unwrap();
        assert_eq!(llm.calls(), 0);
        assert_eq!(r.assessment.llm_final.verdict, LlmVerdict::Unknown);
    }

    #[test]
    fn refine_failure_keeps_initial() {
        let tpl = PromptTemplate::default();
        let opts = DialogueOptions::new(&tpl);
        let llm = ScriptedChat::default();
        let a = initial(Verdict::Clean, "Yes, x");
        let r = refine(&a, &sample(), &llm, HintMode::Detector, &opts).unwrap();
        assert_eq!(r.assessment.status, Status::RefineFailed);
        assert_eq!(r.assessment.llm_final, a.llm_initial);
        assert!(r.error.is_some());
    }

    #[test]
    fn phase_one_reasks_unknown_twice() {
        let tpl = PromptTemplate::default();
        let opts = DialogueOptions::new(&tpl);
        let det = ScriptedDetector::new([(11, DetectorReply::from_score(0.8))]);
        let llm = Recorded::new(
            ScriptedChat::new(ScriptMode::Sequential)
                .with_sample(11, ["unsure", "maybe", "not sure", "Yes"]),
        );
        let p = phase_one(&sample(), &det, &llm, &opts).unwrap();
        assert_eq!(llm.calls(), 3);
        assert_eq!(p.parsed, ParsedReply::unknown());
        assert_eq!(p.reply, "not sure");
    }
}
