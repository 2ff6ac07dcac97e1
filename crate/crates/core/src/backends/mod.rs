//! Model backends.
//!
//! Three roles take part in a run: a detection model, a chat LLM, and a
//! validation model. The detection and validation models share the
//! [`Detector`] interface (a classifier checkpoint served behind the same
//! request/reply contract); the LLM implements [`ChatModel`].
//!
//! Real backends speak HTTP ([`http`]); [`mock`] has deterministic
//! stand-ins for offline runs and tests.

pub mod http;
pub mod mock;
mod retry;

use serde::{Deserialize, Serialize};

use crate::corpus::CodeSample;
use crate::digest::canonical_digest;
use crate::{BackendError, SampleId, Verdict};

pub use retry::RetryPolicy;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorReply {
    pub verdict: Verdict,
    /// Confidence that the sample is vulnerable.
    pub score: f64,
}

impl DetectorReply {
    /// Reply whose verdict follows from `score` at the default threshold.
    pub fn from_score(score: f64) -> Self {
        let verdict = if score >= DEFAULT_THRESHOLD {
            Verdict::Vulnerable
        } else {
            Verdict::Clean
        };
        Self { verdict, score }
    }

    /// Checks score range and verdict/threshold consistency.
    pub fn validate(self, sample: SampleId) -> Result<Self, BackendError> {
        if !(0.0..=1.0).contains(&self.score) {
            return Err(BackendError::Protocol {
                sample,
                reason: format!("score {} outside [0, 1]", self.score),
            });
        }
        if Self::from_score(self.score).verdict != self.verdict {
            return Err(BackendError::Protocol {
                sample,
                reason: format!(
                    "verdict {} inconsistent with score {} at threshold {DEFAULT_THRESHOLD}",
                    self.verdict, self.score
                ),
            });
        }
        Ok(self)
    }
}

/// A binary classifier behind the detector wire contract.
pub trait Detector: Send + Sync {
    fn predict(&self, id: SampleId, code: &str) -> Result<DetectorReply, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
    System,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

pub type Transcript = Vec<Message>;

/// Audit digest of a transcript.
pub fn transcript_hash(transcript: &[Message]) -> String {
    canonical_digest(&transcript)
}

/// Number of user turns, i.e. which exchange of a dialogue this is.
pub fn user_turns(transcript: &[Message]) -> usize {
    transcript.iter().filter(|m| m.role == Role::User).count()
}

/// A chat-completion model. The transcript is sent verbatim.
pub trait ChatModel: Send + Sync {
    fn chat(&self, id: SampleId, transcript: &[Message]) -> Result<String, BackendError>;
}

impl<T: Detector + ?Sized> Detector for std::sync::Arc<T> {
    fn predict(&self, id: SampleId, code: &str) -> Result<DetectorReply, BackendError> {
        (**self).predict(id, code)
    }
}

impl<T: ChatModel + ?Sized> ChatModel for std::sync::Arc<T> {
    fn chat(&self, id: SampleId, transcript: &[Message]) -> Result<String, BackendError> {
        (**self).chat(id, transcript)
    }
}

/// Runs the detector on one sample.
pub fn detector_predict(
    backend: &dyn Detector,
    sample: &CodeSample,
) -> Result<DetectorReply, BackendError> {
    if sample.code.is_empty() {
        return Err(BackendError::InvalidRequest {
            sample: sample.id,
            reason: "empty code".into(),
        });
    }
    backend
        .predict(sample.id, &sample.code)?
        .validate(sample.id)
}

/// Sends a transcript and returns the completion text.
pub fn llm_chat(
    backend: &dyn ChatModel,
    id: SampleId,
    transcript: &[Message],
) -> Result<String, BackendError> {
    match transcript.first() {
        None => {
            return Err(BackendError::InvalidRequest {
                sample: id,
                reason: "empty transcript".into(),
            })
        }
        Some(m) if m.role != Role::User => {
            return Err(BackendError::InvalidRequest {
                sample: id,
                reason: "transcript must open with a user message".into(),
            })
        }
        _ => {}
    }
    let text = backend.chat(id, transcript)?;
    if text.trim().is_empty() {
        return Err(BackendError::Protocol {
            sample: id,
            reason: "empty completion".into(),
        });
    }
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reply_threshold_consistency() {
        assert_eq!(DetectorReply::from_score(0.5).verdict, Verdict::Vulnerable);
        assert_eq!(DetectorReply::from_score(0.4999).verdict, Verdict::Clean);
        let bad = DetectorReply {
            verdict: Verdict::Clean,
            score: 0.9,
        };
        assert!(matches!(
            bad.validate(1),
            Err(BackendError::Protocol { .. })
        ));
        let out_of_range = DetectorReply {
            verdict: Verdict::Vulnerable,
            score: 1.5,
        };
        assert!(out_of_range.validate(1).is_err());
    }

    #[test]
    fn transcript_shape_checked() {
        struct Echo;
        impl ChatModel for Echo {
            fn chat(&self, _: SampleId, t: &[Message]) -> Result<String, BackendError> {
                Ok(t.last().unwrap().content.clone())
            }
        }
        assert!(llm_chat(&Echo, 1, &[]).is_err());
        assert!(llm_chat(&Echo, 1, &[Message::assistant("hi")]).is_err());
        assert!(matches!(
            llm_chat(&Echo, 1, &[Message::user("  ")]),
            Err(BackendError::Protocol { .. })
        ));
        assert_eq!(llm_chat(&Echo, 1, &[Message::user("hi")]).unwrap(), "hi");
    }

    #[test]
    fn empty_code_rejected_before_call() {
        let d = mock::ScriptedDetector::default();
        let s = CodeSample::new(3, "", Verdict::Clean);
        assert!(matches!(
            detector_predict(&d, &s),
            Err(BackendError::InvalidRequest { sample: 3, .. })
        ));
    }
}
