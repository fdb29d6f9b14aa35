use serde::{Deserialize, Serialize};

use super::backend::BackendError;
use super::clock::Clock;

/// Bounded retry with exponential backoff for retryable backend errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff_ms: 500,
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_attempts: 1,
            initial_backoff_ms: 0,
        }
    }

    /// Run `op` until it succeeds, fails permanently, or the budget is spent.
    /// Returns the final result and the number of attempts made.
    pub fn run<T>(
        &self,
        clock: &dyn Clock,
        mut op: impl FnMut(u32) -> Result<T, BackendError>,
    ) -> (Result<T, BackendError>, u32) {
        let max = self.max_attempts.max(1);
        let mut backoff = self.initial_backoff_ms;
        let mut attempt = 1;
        loop {
            match op(attempt) {
                Ok(v) => return (Ok(v), attempt),
                Err(e) if e.retryable && attempt < max => {
                    tracing::debug!(attempt, error = %e, "retrying");
                    clock.sleep_ms(backoff);
                    backoff = backoff.saturating_mul(2);
                    attempt += 1;
                }
                Err(e) => return (Err(e), attempt),
            }
        }
    }
}
