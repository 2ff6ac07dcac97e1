mod common;

use std::collections::{BTreeMap, BTreeSet};

use collabvd::backends::mock::{KeywordDetector, Recorded};
use collabvd::backends::{user_turns, ChatModel, Detector};
use collabvd::collab::HintMode;
use collabvd::dialogue::{PromptTemplate, PromptVariant};
use collabvd::eval::{
    run_ablation, to_jsonl, AblationBackends, AblationOutcome, AblationRow, AblationSettings,
    RowStatus, Scoring,
};
use collabvd::{Error, SampleId};
use common::*;

fn row(name: &str, mode: HintMode, scoring: Scoring) -> AblationRow {
    AblationRow {
        name: name.into(),
        hint_mode: mode,
        variant: PromptVariant::Plain,
        detector: "det".into(),
        llm: "llm".into(),
        validator: (scoring == Scoring::Validator).then(|| "val".into()),
        scoring,
    }
}

fn backends<'a>(
    det: &'a dyn Detector,
    llm: &'a dyn ChatModel,
    val: &'a dyn Detector,
) -> AblationBackends<'a> {
    AblationBackends {
        detectors: BTreeMap::from([("det".to_string(), det), ("val".to_string(), val)]),
        llms: BTreeMap::from([("llm".to_string(), llm)]),
    }
}

fn ran(o: &AblationOutcome) -> (f64, usize, usize) {
    match &o.status {
        RowStatus::Ran {
            metrics,
            refined,
            llm_calls,
            ..
        } => (metrics.accuracy, *refined, *llm_calls),
        other => panic!("row {} did not run: {other:?}", o.row.name),
    }
}

#[test]
fn hint_modes_share_phase_one() {
    const N: u64 = 50;
    let (_, split) = split(N);
    let template = PromptTemplate::default();
    let det = detector(N);
    let llm = Recorded::new(chat(N));
    let val = KeywordDetector::new("ANALYST: YES");
    let rows = [
        row("full", HintMode::Detector, Scoring::LlmFinal),
        row("no-recheck", HintMode::None, Scoring::LlmFinal),
        row("yes", HintMode::AlwaysYes, Scoring::LlmFinal),
    ];
    let out = run_ablation(
        &rows,
        &split,
        &backends(&det, &llm, &val),
        &AblationSettings::new(&template),
    )
    .unwrap();
    let mut first_turns: BTreeMap<SampleId, usize> = BTreeMap::new();
    for (id, t) in llm.transcripts() {
        if user_turns(&t) == 1 {
            *first_turns.entry(id).or_default() += 1;
        }
    }
    assert!(first_turns.values().all(|&n| n == 1), "{first_turns:?}");
    let (_, refined_none, calls_none) = ran(&out[1]);
    assert_eq!((refined_none, calls_none), (0, 0));
    let (_, refined_yes, _) = ran(&out[2]);
    assert_eq!(refined_yes, split.test.len());
}

#[test]
fn detector_and_none_differ_on_flipped_samples() {
    const N: u64 = 60;
    let (_, split) = split(N);
    let template = PromptTemplate::default();
    let det = detector(N);
    let llm = chat(N);
    let val = KeywordDetector::new("ANALYST: YES");
    let rows = [
        row("full", HintMode::Detector, Scoring::LlmFinal),
        row("none", HintMode::None, Scoring::LlmFinal),
    ];
    let out = run_ablation(
        &rows,
        &split,
        &backends(&det, &llm, &val),
        &AblationSettings::new(&template),
    )
    .unwrap();
    let test_ids: BTreeSet<SampleId> = split.test.ids().collect();
    let flipped: Vec<SampleId> = test_ids
        .iter()
        .copied()
        .filter(|&i| llm_says(i) != detector_says(i))
        .collect();
    let (acc_full, refined, _) = ran(&out[0]);
    let (acc_none, _, _) = ran(&out[1]);
    assert_eq!(refined, flipped.len());
    // Each recheck reverses the answer, so accuracy moves by one sample per
    // flip in the direction of correctness.
    let delta: i64 = flipped
        .iter()
        .map(|&i| if llm_says(i) == truth(i) { -1 } else { 1 })
        .sum();
    let n = test_ids.len() as f64;
    assert!((acc_full - acc_none - delta as f64 / n).abs() < 1e-12);
}

#[test]
fn oracle_llm_scores_perfectly() {
    const N: u64 = 40;
    let (_, split) = split(N);
    let template = PromptTemplate::default();
    let det = detector(N);
    let llm = oracle_chat(N);
    let val = KeywordDetector::new("ANALYST: YES");
    let rows = [
        row("initial", HintMode::Detector, Scoring::LlmInitial),
        row("final", HintMode::Detector, Scoring::LlmFinal),
        row("validator", HintMode::Detector, Scoring::Validator),
    ];
    let out = run_ablation(
        &rows,
        &split,
        &backends(&det, &llm, &val),
        &AblationSettings::new(&template),
    )
    .unwrap();
    for o in &out {
        assert_eq!(ran(o).0, 1.0, "{}", o.row.name);
    }
}

#[test]
fn single_row_and_detector_row() {
    const N: u64 = 40;
    let (_, split) = split(N);
    let template = PromptTemplate::default();
    let det = detector(N);
    let llm = chat(N);
    let val = KeywordDetector::new("ANALYST: YES");
    let out = run_ablation(
        &[row("det", HintMode::None, Scoring::Detector)],
        &split,
        &backends(&det, &llm, &val),
        &AblationSettings::new(&template),
    )
    .unwrap();
    let expected = split
        .test
        .iter()
        .filter(|s| detector_says(s.id) == truth(s.id))
        .count() as f64
        / split.test.len() as f64;
    assert_eq!(ran(&out[0]).0, expected);
    assert_eq!(to_jsonl(&out).lines().count(), 1);
}

#[test]
fn missing_backend_is_skipped() {
    const N: u64 = 20;
    let (_, split) = split(N);
    let template = PromptTemplate::default();
    let det = detector(N);
    let llm = chat(N);
    let val = KeywordDetector::new("ANALYST: YES");
    let mut missing = row("gpt4", HintMode::Detector, Scoring::LlmFinal);
    missing.llm = "absent".into();
    let out = run_ablation(
        &[missing, row("ok", HintMode::None, Scoring::LlmFinal)],
        &split,
        &backends(&det, &llm, &val),
        &AblationSettings::new(&template),
    )
    .unwrap();
    assert!(matches!(out[0].status, RowStatus::Skipped { .. }));
    ran(&out[1]);
}

#[test]
fn duplicate_row_names_are_rejected() {
    let (_, split) = split(10);
    let template = PromptTemplate::default();
    let det = detector(10);
    let llm = chat(10);
    let val = KeywordDetector::new("ANALYST: YES");
    let rows = [
        row("a", HintMode::None, Scoring::LlmFinal),
        row("a", HintMode::Detector, Scoring::LlmFinal),
    ];
    let r = run_ablation(
        &rows,
        &split,
        &backends(&det, &llm, &val),
        &AblationSettings::new(&template),
    );
    assert!(matches!(r, Err(Error::Config(_))));
}
