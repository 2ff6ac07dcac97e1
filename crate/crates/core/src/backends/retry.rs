use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::{BackendError, SampleId};

/// Bounded retry with exponential backoff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Total attempts, including the first.
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff_ms: 500,
            max_backoff_ms: 8_000,
        }
    }
}

/// Outcome of one attempt.
pub(crate) enum Attempt<T> {
    Done(T),
    Transient(String),
    Fatal(BackendError),
}

impl RetryPolicy {
    pub fn no_backoff(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            initial_backoff_ms: 0,
            max_backoff_ms: 0,
        }
    }

    pub fn backoff(&self, retry: u32) -> Duration {
        let ms = self
            .initial_backoff_ms
            .saturating_mul(1u64 << retry.min(20))
            .min(self.max_backoff_ms);
        Duration::from_millis(ms)
    }

    pub(crate) fn run<T>(
        &self,
        sample: SampleId,
        what: &str,
        mut attempt: impl FnMut(u32) -> Attempt<T>,
    ) -> Result<T, BackendError> {
        let max = self.max_attempts.max(1);
        let mut last = String::new();
        for n in 1..=max {
            match attempt(n) {
                Attempt::Done(v) => return Ok(v),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Transient(reason) => {
                    last = reason;
                    if n < max {
                        let wait = self.backoff(n - 1);
                        log::warn!(
                            "{what} sample {sample}: attempt {n}/{max} failed ({last}); retrying in {wait:?}"
                        );
                        thread::sleep(wait);
                    }
                }
            }
        }
        Err(BackendError::Unavailable {
            sample,
            attempts: max,
            reason: last,
        })
    }
}
