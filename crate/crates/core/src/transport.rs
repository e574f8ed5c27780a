//! Retry loop and HTTP failure classification shared by the LLM and QE clients.

use std::thread;
use std::time::Duration;

use crate::model::RetryPolicy;

/// Outcome of one failed attempt.
#[derive(Debug, Clone, PartialEq)]
pub struct AttemptError {
    pub retryable: bool,
    pub status: Option<u16>,
    pub message: String,
}

impl AttemptError {
    pub fn retryable(message: impl Into<String>) -> Self {
        AttemptError { retryable: true, status: None, message: message.into() }
    }

    pub fn fatal(message: impl Into<String>) -> Self {
        AttemptError { retryable: false, status: None, message: message.into() }
    }

    /// 408, 429 and 5xx are transient; every other 4xx is the caller's fault.
    pub fn from_status(status: u16, body: &str) -> Self {
        let retryable = status == 408 || status == 429 || status >= 500;
        AttemptError { retryable, status: Some(status), message: format!("HTTP {status}: {body}") }
    }

    pub fn from_reqwest(err: &reqwest::Error) -> Self {
        match err.status() {
            Some(status) => Self::from_status(status.as_u16(), &err.to_string()),
            None => AttemptError::retryable(err.to_string()),
        }
    }
}

/// Final failure after the retry loop gave up.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryExhausted {
    pub attempts: u32,
    pub last: AttemptError,
}

/// Runs `op` until it succeeds, fails non-retryably, or the attempt budget is spent.
/// `op` receives the 1-based attempt number.
pub fn with_retry<T>(
    policy: &RetryPolicy,
    mut op: impl FnMut(u32) -> Result<T, AttemptError>,
) -> Result<T, RetryExhausted> {
    let budget = policy.max_attempts.max(1);
    let mut attempt = 1;
    loop {
        let delay = policy.delay_ms(attempt);
        if delay > 0 {
            thread::sleep(Duration::from_millis(delay));
        }
        match op(attempt) {
            Ok(v) => return Ok(v),
            Err(e) if !e.retryable || attempt >= budget => return Err(RetryExhausted { attempts: attempt, last: e }),
            Err(e) => {
                log::debug!("attempt {attempt} failed, retrying: {}", e.message);
                attempt += 1;
            }
        }
    }
}
