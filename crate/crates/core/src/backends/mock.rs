//! Deterministic backend stand-ins.
//!
//! Scripted mocks replay fixtures and fail loudly when a script runs out,
//! so a wrong fixture never degrades into a silent default answer. The
//! statistical detector draws verdicts from configured true/false positive
//! rates, seeded per sample id so results do not depend on call order.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{transcript_hash, user_turns, ChatModel, Detector, DetectorReply, Message};
use crate::error::{Error, Result};
use crate::{BackendError, SampleId, Verdict};

/// Replays a per-sample sequence of detector replies.
#[derive(Debug, Default)]
pub struct ScriptedDetector {
    scripts: Mutex<HashMap<SampleId, VecDeque<DetectorReply>>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DetectorScriptLine {
    idx: SampleId,
    verdict: Verdict,
    score: f64,
}

impl ScriptedDetector {
    pub fn new(script: impl IntoIterator<Item = (SampleId, DetectorReply)>) -> Self {
        let d = Self::default();
        for (id, reply) in script {
            d.push(id, reply);
        }
        d
    }

    pub fn push(&self, id: SampleId, reply: DetectorReply) {
        self.scripts.lock().entry(id).or_default().push_back(reply);
    }

    /// Loads `{"idx", "verdict", "score"}` lines; repeated ids queue up in file order.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let d = Self::default();
        for (_, line) in read_json_lines::<DetectorScriptLine>(path.as_ref())? {
            d.push(
                line.idx,
                DetectorReply {
                    verdict: line.verdict,
                    score: line.score,
                },
            );
        }
        Ok(d)
    }

    pub fn remaining(&self) -> usize {
        self.scripts.lock().values().map(VecDeque::len).sum()
    }
}

impl Detector for ScriptedDetector {
    fn predict(&self, id: SampleId, _code: &str) -> Result<DetectorReply, BackendError> {
        self.scripts
            .lock()
            .get_mut(&id)
            .and_then(VecDeque::pop_front)
            .ok_or(BackendError::ScriptExhausted { sample: id })
    }
}

/// Detector with fixed true-positive and false-positive rates.
#[derive(Debug, Clone)]
pub struct StatisticalDetector {
    truths: BTreeMap<SampleId, Verdict>,
    tpr: f64,
    fpr: f64,
    seed: u64,
}

impl StatisticalDetector {
    pub fn new(truths: BTreeMap<SampleId, Verdict>, tpr: f64, fpr: f64, seed: u64) -> Self {
        assert!((0.0..=1.0).contains(&tpr) && (0.0..=1.0).contains(&fpr));
        Self {
            truths,
            tpr,
            fpr,
            seed,
        }
    }
}

impl Detector for StatisticalDetector {
    fn predict(&self, id: SampleId, _code: &str) -> Result<DetectorReply, BackendError> {
        let truth = self
            .truths
            .get(&id)
            .ok_or(BackendError::ScriptExhausted { sample: id })?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(id);
        let rate = match truth {
            Verdict::Vulnerable => self.tpr,
            Verdict::Clean => self.fpr,
        };
        let positive = rng.random::<f64>() < rate;
        let spread: f64 = rng.random::<f64>() * 0.5;
        let score = if positive { 0.5 + spread } else { spread };
        Ok(DetectorReply::from_score(score))
    }
}

/// How per-sample chat scripts are indexed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScriptMode {
    /// Reply `k` answers the transcript's `k`-th user turn. Replays are
    /// idempotent, which keeps resumed runs consistent with fresh ones.
    #[default]
    ByTurn,
    /// Each call consumes the next reply.
    Sequential,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum ChatScriptLine {
    Sample { idx: SampleId, replies: Vec<String> },
    Hash { prompt_hash: String, reply: String },
}

/// Replays LLM completions keyed by transcript digest or by sample.
///
/// Transcript-digest entries win over per-sample scripts.
#[derive(Debug, Default)]
pub struct ScriptedChat {
    mode: ScriptMode,
    by_hash: HashMap<String, String>,
    by_sample: HashMap<SampleId, Vec<String>>,
    cursors: Mutex<HashMap<SampleId, usize>>,
}

impl ScriptedChat {
    pub fn new(mode: ScriptMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn with_sample(
        mut self,
        id: SampleId,
        replies: impl IntoIterator<Item = impl Into<String>>,
    ) -> Self {
        self.insert_sample(id, replies);
        self
    }

    pub fn with_transcript(mut self, transcript: &[Message], reply: impl Into<String>) -> Self {
        self.by_hash
            .insert(transcript_hash(transcript), reply.into());
        self
    }

    pub fn insert_sample(
        &mut self,
        id: SampleId,
        replies: impl IntoIterator<Item = impl Into<String>>,
    ) {
        self.by_sample
            .insert(id, replies.into_iter().map(Into::into).collect());
    }

    /// Loads `{"idx", "replies": [...]}` or `{"prompt_hash", "reply"}` lines.
    pub fn from_file(path: impl AsRef<Path>, mode: ScriptMode) -> Result<Self> {
        let mut chat = Self::new(mode);
        for (_, line) in read_json_lines::<ChatScriptLine>(path.as_ref())? {
            match line {
                ChatScriptLine::Sample { idx, replies } => chat.insert_sample(idx, replies),
                ChatScriptLine::Hash { prompt_hash, reply } => {
                    chat.by_hash.insert(prompt_hash, reply);
                }
            }
        }
        Ok(chat)
    }
}

impl ChatModel for ScriptedChat {
    fn chat(&self, id: SampleId, transcript: &[Message]) -> Result<String, BackendError> {
        if !self.by_hash.is_empty() {
            if let Some(reply) = self.by_hash.get(&transcript_hash(transcript)) {
                return Ok(reply.clone());
            }
        }
        let exhausted = BackendError::ScriptExhausted { sample: id };
        let replies = self.by_sample.get(&id).ok_or(exhausted.clone())?;
        let index = match self.mode {
            ScriptMode::ByTurn => user_turns(transcript)
                .checked_sub(1)
                .ok_or(exhausted.clone())?,
            ScriptMode::Sequential => {
                let mut cursors = self.cursors.lock();
                let cursor = cursors.entry(id).or_default();
                *cursor += 1;
                *cursor - 1
            }
        };
        replies.get(index).cloned().ok_or(exhausted)
    }
}

/// Detector that flags any input containing a fixed substring.
///
/// Stands in for a validator trained on enriched text: pointed at the
/// positive marker prefix, it answers with the LLM's final verdict.
#[derive(Debug, Clone)]
pub struct KeywordDetector {
    needle: String,
}

impl KeywordDetector {
    pub fn new(needle: impl Into<String>) -> Self {
        Self {
            needle: needle.into(),
        }
    }
}

impl Detector for KeywordDetector {
    fn predict(&self, _id: SampleId, code: &str) -> Result<DetectorReply, BackendError> {
        let score = if code.contains(&self.needle) {
            0.9
        } else {
            0.1
        };
        Ok(DetectorReply::from_score(score))
    }
}

/// Backend that is never reachable; every call fails as unavailable.
#[derive(Debug, Default, Clone, Copy)]
pub struct Offline;

impl Detector for Offline {
    fn predict(&self, id: SampleId, _code: &str) -> Result<DetectorReply, BackendError> {
        Err(BackendError::Unavailable {
            sample: id,
            attempts: 1,
            reason: "offline".into(),
        })
    }
}

impl ChatModel for Offline {
    fn chat(&self, id: SampleId, _t: &[Message]) -> Result<String, BackendError> {
        Err(BackendError::Unavailable {
            sample: id,
            attempts: 1,
            reason: "offline".into(),
        })
    }
}

/// Wraps a backend and records every request it forwards.
#[derive(Debug, Default)]
pub struct Recorded<B> {
    inner: B,
    calls: AtomicUsize,
    transcripts: Mutex<Vec<(SampleId, Vec<Message>)>>,
    codes: Mutex<Vec<(SampleId, String)>>,
}

impl<B> Recorded<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
            transcripts: Mutex::new(Vec::new()),
            codes: Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn transcripts(&self) -> Vec<(SampleId, Vec<Message>)> {
        self.transcripts.lock().clone()
    }

    pub fn codes(&self) -> Vec<(SampleId, String)> {
        self.codes.lock().clone()
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: ChatModel> ChatModel for Recorded<B> {
    fn chat(&self, id: SampleId, transcript: &[Message]) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.transcripts.lock().push((id, transcript.to_vec()));
        self.inner.chat(id, transcript)
    }
}

impl<B: Detector> Detector for Recorded<B> {
    fn predict(&self, id: SampleId, code: &str) -> Result<DetectorReply, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.codes.lock().push((id, code.to_string()));
        self.inner.predict(id, code)
    }
}

fn read_json_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: n + 1,
            msg: e.to_string(),
        })?;
        out.push((n + 1, value));
    }
    Ok(out)
}
