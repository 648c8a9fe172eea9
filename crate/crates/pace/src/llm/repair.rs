//! Bounded retry-and-repair around a backend call.
//!
//! Strict output grammars mean a model sometimes answers in the wrong shape.
//! [`complete_with_repair`] re-issues the request up to [`REPAIR_ATTEMPTS`]
//! times, appending a one-line format reminder after each rejected answer,
//! and hands back the first output the validator accepts.

use super::{Backend, ChatMessage, CompletionRequest, CompletionResult, LlmError};
use regex::Regex;
use std::sync::OnceLock;
use std::time::Duration;

/// Maximum completions issued per logical call (first try + repairs).
pub const REPAIR_ATTEMPTS: u32 = 3;

/// A validated completion: the parsed value plus enough bookkeeping for run
/// traces.
#[derive(Debug, Clone)]
pub struct RepairedCompletion<T> {
    pub value: T,
    /// The accepted raw text, think-spans already stripped.
    pub raw_text: String,
    pub attempts_used: u32,
    pub backend_latency: Duration,
}

/// Remove `<think>…</think>` spans some backbones emit despite instructions.
pub fn strip_think_tags(text: &str) -> String {
    static THINK: OnceLock<Regex> = OnceLock::new();
    let re = THINK.get_or_init(|| Regex::new(r"(?s)<think>.*?</think>").expect("static regex"));
    let stripped = re.replace_all(text, "");
    stripped.trim().to_string()
}

/// Issue `request`, validate the (think-stripped) text, and retry with an
/// appended reminder while validation fails. `reminder` should be a single
/// line restating the required format.
pub fn complete_with_repair<T>(
    backend: &dyn Backend,
    request: &CompletionRequest,
    reminder: &str,
    mut validate: impl FnMut(&str) -> Option<T>,
) -> Result<RepairedCompletion<T>, LlmError> {
    let mut working = request.clone();
    let mut total_latency = Duration::ZERO;
    let mut last_text = String::new();

    for attempt in 1..=REPAIR_ATTEMPTS {
        let CompletionResult {
            text,
            backend_latency,
            ..
        } = backend.complete(&working)?;
        total_latency += backend_latency;
        let cleaned = strip_think_tags(&text);
        if let Some(value) = validate(&cleaned) {
            return Ok(RepairedCompletion {
                value,
                raw_text: cleaned,
                attempts_used: attempt,
                backend_latency: total_latency,
            });
        }
        last_text = cleaned;
        working
            .messages
            .push(ChatMessage::user(format!("REMINDER: {reminder}")));
    }

    Err(LlmError::MaxRetriesExceeded {
        attempts: REPAIR_ATTEMPTS,
        last_text,
    })
}
