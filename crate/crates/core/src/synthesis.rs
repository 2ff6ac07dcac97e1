//! Enriched records: code fused with the LLM's final verdict and description.
//!
//! The fused text is `code + "\n" + marker`, where the marker line comes
//! from the prompt template (so it is versioned with the rest of the
//! wording). Ground truth is carried only in the separate `target` field.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::collab::{Assessment, AssessmentStore};
use crate::corpus::{CodeSample, Part, SplitCorpus};
use crate::dialogue::{LlmVerdict, PromptTemplate};
use crate::error::{Error, Result};
use crate::{SampleId, Verdict};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnrichOptions {
    /// Omit the YES/NO token and keep only the description.
    pub drop_verdict: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnrichedSample {
    pub id: SampleId,
    pub text: String,
    pub label: Option<Verdict>,
    /// Digest of the assessment record the text was built from.
    pub provenance: String,
    /// The final LLM verdict was Unknown and was rendered as Clean.
    pub unknown_fallback: bool,
}

/// Renders the marker line for a final verdict and description.
///
/// Line breaks inside the description are folded to spaces so the marker
/// stays a single line.
pub fn marker_line(
    template: &PromptTemplate,
    verdict: LlmVerdict,
    description: Option<&str>,
    opts: EnrichOptions,
) -> String {
    let description = match verdict {
        LlmVerdict::Vulnerable => description.unwrap_or("").trim(),
        LlmVerdict::Clean | LlmVerdict::Unknown => "",
    };
    let description: String = description
        .split(['\r', '\n'])
        .filter(|s| !s.trim().is_empty())
        .map(str::trim)
        .collect::<Vec<_>>()
        .join(" ");
    let pattern = match (verdict, opts.drop_verdict) {
        (_, true) => &template.marker_description_only,
        (LlmVerdict::Vulnerable, false) => &template.marker_yes,
        (_, false) => return template.marker_no.clone(),
    };
    let line = pattern.replace("{description}", &description);
    if description.is_empty() {
        line.trim_end_matches(|c: char| c.is_whitespace() || c == '—')
            .to_string()
    } else {
        line
    }
}

/// Fuses `code` with a final verdict. Pure function of its inputs.
pub fn enrich_text(
    template: &PromptTemplate,
    code: &str,
    verdict: LlmVerdict,
    description: Option<&str>,
    opts: EnrichOptions,
) -> String {
    let marker = marker_line(template, verdict, description, opts);
    let mut text = String::with_capacity(code.len() + marker.len() + 1);
    text.push_str(code);
    text.push('\n');
    text.push_str(&marker);
    text
}

/// Builds the enriched record for `sample` from its final assessment.
///
/// The returned record has no label; callers that export training data
/// attach it separately.
pub fn enrich(
    template: &PromptTemplate,
    sample: &CodeSample,
    assessment: Option<&Assessment>,
    opts: EnrichOptions,
) -> Result<EnrichedSample> {
    let a = assessment
        .filter(|a| a.id == sample.id && a.is_complete())
        .ok_or(Error::MissingAssessment(sample.id))?;
    let fin = &a.llm_final;
    Ok(EnrichedSample {
        id: sample.id,
        text: enrich_text(
            template,
            &sample.code,
            fin.verdict,
            fin.description.as_deref(),
            opts,
        ),
        label: None,
        provenance: a.digest(),
        unknown_fallback: fin.verdict == LlmVerdict::Unknown,
    })
}

#[derive(Serialize)]
struct ExportRecord<'a> {
    idx: SampleId,
    text: &'a str,
    target: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportedFile {
    pub part: Part,
    pub path: PathBuf,
    pub records: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub files: Vec<ExportedFile>,
    pub unknown_fallbacks: usize,
    pub template_version: String,
    pub store_config_digest: String,
}

/// Ids of `split` lacking a complete final assessment, in ascending order.
pub fn coverage_gaps(split: &SplitCorpus, store: &AssessmentStore) -> Vec<SampleId> {
    let mut missing: Vec<SampleId> = split
        .all_samples()
        .into_iter()
        .filter(|s| !store.get(s.id).is_some_and(Assessment::is_complete))
        .map(|s| s.id)
        .collect();
    missing.sort_unstable();
    missing
}

/// Enriches every part of `split` and writes `train.jsonl`, `valid.jsonl`
/// and `test.jsonl` under `out_dir` as `{"idx","text","target"}` lines.
///
/// Refuses to write anything unless every sample of all three parts has a
/// complete assessment, so the three files are always produced by the same
/// process.
pub fn export_training_set(
    split: &SplitCorpus,
    store: &AssessmentStore,
    template: &PromptTemplate,
    out_dir: impl AsRef<Path>,
    opts: EnrichOptions,
) -> Result<ExportSummary> {
    let missing = coverage_gaps(split, store);
    if !missing.is_empty() {
        return Err(Error::Coverage { missing });
    }
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut rendered: BTreeMap<Part, String> = BTreeMap::new();
    let mut counts = BTreeMap::new();
    let mut unknown_fallbacks = 0;
    for (part, corpus) in split.parts() {
        let mut body = String::new();
        for sample in corpus.iter() {
            let e = enrich(template, sample, store.get(sample.id), opts)?;
            unknown_fallbacks += e.unknown_fallback as usize;
            let record = ExportRecord {
                idx: e.id,
                text: &e.text,
                target: sample.label.as_target(),
            };
            body.push_str(&serde_json::to_string(&record)?);
            body.push('\n');
        }
        counts.insert(part, corpus.len());
        rendered.insert(part, body);
    }

    let mut files = Vec::new();
    for (part, body) in rendered {
        let path = out_dir.join(format!("{}.jsonl", part.as_str()));
        fs::write(&path, &body).map_err(|e| Error::io(&path, e))?;
        files.push(ExportedFile {
            part,
            path,
            records: counts[&part],
            sha256: crate::digest::sha256_hex(&body),
        });
    }
    Ok(ExportSummary {
        files,
        unknown_fallbacks,
        template_version: template.version.clone(),
        store_config_digest: store.meta().config_digest.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dialogue::ParsedReply;

    fn tpl() -> PromptTemplate {
        PromptTemplate::default()
    }

    #[test]
    fn vulnerable_marker() {
        let t = enrich_text(
            &tpl(),
            "int f();",
            LlmVerdict::Vulnerable,
            Some("buffer overflow on line 3"),
            EnrichOptions::default(),
        );
        assert_eq!(t, "int f();\nANALYST: YES — buffer overflow on line 3");
    }

    #[test]
    fn clean_and_unknown_markers() {
        for v in [LlmVerdict::Clean, LlmVerdict::Unknown] {
            let t = enrich_text(&tpl(), "x", v, Some("ignored"), EnrichOptions::default());
            assert_eq!(t, "x\nANALYST: NO");
        }
    }

    #[test]
    fn empty_description_has_no_dangling_dash() {
        let m = marker_line(
            &tpl(),
            LlmVerdict::Vulnerable,
            Some(""),
            EnrichOptions::default(),
        );
        assert_eq!(m, "ANALYST: YES");
    }

    #[test]
    fn multiline_description_folded() {
        let m = marker_line(
            &tpl(),
            LlmVerdict::Vulnerable,
            Some("first\r\nsecond\n\nthird"),
            EnrichOptions::default(),
        );
        assert_eq!(m, "ANALYST: YES — first second third");
    }

    #[test]
    fn drop_verdict_variant() {
        let opts = EnrichOptions { drop_verdict: true };
        assert_eq!(
            marker_line(&tpl(), LlmVerdict::Vulnerable, Some("uaf"), opts),
            "ANALYST: uaf"
        );
        assert_eq!(
            marker_line(&tpl(), LlmVerdict::Clean, None, opts),
            "ANALYST:"
        );
    }

    #[test]
    fn enrich_requires_final_assessment() {
        let s = CodeSample::new(4, "x", Verdict::Clean);
        assert!(matches!(
            enrich(&tpl(), &s, None, EnrichOptions::default()),
            Err(Error::MissingAssessment(4))
        ));
    }

    #[test]
    fn unknown_sets_fallback_flag() {
        use crate::backends::DetectorReply;
        use crate::collab::{HintMode, Stage, Status};
        let s = CodeSample::new(9, "code", Verdict::Vulnerable);
        let a = Assessment {
            id: 9,
            detector: DetectorReply::from_score(0.9),
            llm_initial: ParsedReply::unknown(),
            llm_final: ParsedReply::unknown(),
            reply_initial: "hmm".into(),
            reply_final: None,
            refined: false,
            hint_mode: HintMode::Detector,
            stage: Stage::Final,
            status: Status::Ok,
            prompt_hash: "h".into(),
            refine_prompt_hash: None,
        };
        let e = enrich(&tpl(), &s, Some(&a), EnrichOptions::default()).unwrap();
        assert!(e.unknown_fallback);
        assert!(e.text.ends_with("ANALYST: NO"));
        assert_eq!(e.provenance, a.digest());
        assert_eq!(e.label, None);
    }
}
