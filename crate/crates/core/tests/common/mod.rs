#![allow(dead_code)]

use collabvd::backends::mock::{ScriptMode, ScriptedChat, ScriptedDetector};
use collabvd::backends::DetectorReply;
use collabvd::collab::{HintMode, StoreMeta};
use collabvd::corpus::{split_stratified, CodeSample, Corpus, SplitCorpus};
use collabvd::dialogue::PromptTemplate;
use collabvd::Verdict;

pub fn truth(i: u64) -> bool {
    (i * 13) % 10 < 4
}

pub fn detector_says(i: u64) -> bool {
    truth(i) ^ (i % 5 == 2)
}

pub fn llm_says(i: u64) -> bool {
    truth(i) ^ (i % 3 == 1)
}

pub fn corpus(n: u64) -> Corpus {
    let samples = (0..n)
        .map(|i| {
            let label = if truth(i) {
                Verdict::Vulnerable
            } else {
                Verdict::Clean
            };
            CodeSample::new(i, format!("int f{i}(int *p) {{ return p[{i}]; }}"), label)
        })
        .collect();
    Corpus::new("fixture", samples).unwrap()
}

pub fn split(n: u64) -> (Corpus, SplitCorpus) {
    let c = corpus(n);
    let s = split_stratified(&c, [0.6, 0.2, 0.2], 42).unwrap();
    (c, s)
}

pub fn detector(n: u64) -> ScriptedDetector {
    ScriptedDetector::new((0..n).map(|i| {
        (
            i,
            DetectorReply::from_score(if detector_says(i) { 0.8 } else { 0.2 }),
        )
    }))
}

fn answer(v: bool, i: u64, tag: &str) -> String {
    if v {
        format!("Yes, index {i} is unchecked ({tag}).")
    } else {
        "No.".to_string()
    }
}

/// Phase I answers `llm_says`; the recheck reply reverses it.
pub fn chat(n: u64) -> ScriptedChat {
    let mut c = ScriptedChat::new(ScriptMode::ByTurn);
    for i in 0..n {
        let first = llm_says(i);
        c.insert_sample(
            i,
            [answer(first, i, "initial"), answer(!first, i, "recheck")],
        );
    }
    c
}

/// Answers every turn with the ground truth.
pub fn oracle_chat(n: u64) -> ScriptedChat {
    let mut c = ScriptedChat::new(ScriptMode::ByTurn);
    for i in 0..n {
        c.insert_sample(i, [answer(truth(i), i, "a"), answer(truth(i), i, "b")]);
    }
    c
}

pub fn meta(mode: HintMode) -> StoreMeta {
    StoreMeta {
        config_digest: format!("test-{mode}"),
        phase1_digest: "test".into(),
        template_version: PromptTemplate::default().version,
        hint_mode: Some(mode),
    }
}
