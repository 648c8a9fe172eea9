//! Backend contract for chat-completion generation.
//!
//! Every stage of the pipeline and every baseline speaks to one [`Backend`]:
//! either a live HTTP endpoint ([`HttpBackend`]) or a deterministic
//! [`ScriptedBackend`] that simulates a model over the synthetic world,
//! which is what makes offline end-to-end runs reproducible. Requests carry
//! a [`StageId`] marker so the scripted backend can tell which behaviour is
//! being exercised; the HTTP wire format does not see the marker.

mod http;
mod repair;
mod scripted;

pub use http::HttpBackend;
pub use repair::{complete_with_repair, strip_think_tags, RepairedCompletion, REPAIR_ATTEMPTS};
pub use scripted::{ScriptRule, ScriptedBackend};

use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::PathBuf;
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("backend unavailable after {attempts} attempt(s): {detail}")]
    BackendUnavailable { attempts: u32, detail: String },
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("no parseable output after {attempts} attempt(s); last output: {last_text:?}")]
    MaxRetriesExceeded { attempts: u32, last_text: String },
    #[error("malformed backend response: {0}")]
    InvalidResponse(String),
    #[error("scripted backend cannot handle a {stage} prompt: {detail}")]
    ScriptGap { stage: StageId, detail: String },
    #[error("script table: {0}")]
    ScriptTable(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Marker naming which prompt grammar a request belongs to. Carried on every
/// request; the scripted backend dispatches on it, the HTTP backend ignores it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageId {
    Initial,
    Focus,
    Tendency,
    Refine,
    Summary,
    Guideline,
    Treatrag,
    MedreflectQ,
    MedreflectA,
    MedreflectR,
    Judge,
}

impl StageId {
    pub const ALL: [StageId; 11] = [
        StageId::Initial,
        StageId::Focus,
        StageId::Tendency,
        StageId::Refine,
        StageId::Summary,
        StageId::Guideline,
        StageId::Treatrag,
        StageId::MedreflectQ,
        StageId::MedreflectA,
        StageId::MedreflectR,
        StageId::Judge,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageId::Initial => "initial",
            StageId::Focus => "focus",
            StageId::Tendency => "tendency",
            StageId::Refine => "refine",
            StageId::Summary => "summary",
            StageId::Guideline => "guideline",
            StageId::Treatrag => "treatrag",
            StageId::MedreflectQ => "medreflect_q",
            StageId::MedreflectA => "medreflect_a",
            StageId::MedreflectR => "medreflect_r",
            StageId::Judge => "judge",
        }
    }

    pub fn parse(name: &str) -> Option<StageId> {
        StageId::ALL.into_iter().find(|s| s.as_str() == name)
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// Sampling parameters sent with every request. The two named profiles carry
/// the defaults used for the supported backbone families; the judge always
/// runs greedy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub context_window: u32,
    pub seed: u64,
}

impl GenerationParams {
    pub fn qwen_profile() -> Self {
        GenerationParams {
            temperature: 0.6,
            max_tokens: 220,
            context_window: 4096,
            seed: 42,
        }
    }

    pub fn llama_profile() -> Self {
        GenerationParams {
            temperature: 0.8,
            max_tokens: 400,
            context_window: 8192,
            seed: 42,
        }
    }

    /// Greedy profile for the relevance judge.
    pub fn judge_profile() -> Self {
        GenerationParams {
            temperature: 0.0,
            max_tokens: 400,
            context_window: 4096,
            seed: 42,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// One complete request: which grammar is expected, the rendered messages,
/// and the sampling parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub stage: StageId,
    pub messages: Vec<ChatMessage>,
    pub params: GenerationParams,
}

impl CompletionRequest {
    pub fn new(stage: StageId, messages: Vec<ChatMessage>, params: GenerationParams) -> Self {
        CompletionRequest {
            stage,
            messages,
            params,
        }
    }

    /// Content of the first user message — the scripted backend reads case
    /// fields out of it. Repair reminders are appended after it, so the
    /// original prompt stays addressable.
    pub fn primary_user_content(&self) -> Option<&str> {
        self.messages
            .iter()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionResult {
    pub text: String,
    pub attempts_used: u32,
    /// Time the backend itself reported/required. Zero for the scripted
    /// backend so recorded traces stay byte-stable across runs.
    pub backend_latency: Duration,
}

/// Which backend a run talks to. Exactly one kind per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendDescriptor {
    Http {
        endpoint_url: String,
        model_name: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        api_key: Option<String>,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: u64,
        #[serde(default = "default_max_retries")]
        max_retries: u32,
    },
    Scripted {
        /// Optional extra rule table; builtin world-model logic fills the gaps.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        script_table: Option<PathBuf>,
        /// Optional oracle file emitted alongside a synthetic cohort.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        oracle: Option<PathBuf>,
        /// Inject seed-keyed surface variation when temperature > 0.
        #[serde(default)]
        simulate_sampling: bool,
    },
}

fn default_timeout_secs() -> u64 {
    60
}

fn default_max_retries() -> u32 {
    3
}

impl BackendDescriptor {
    pub fn scripted_default() -> Self {
        BackendDescriptor::Scripted {
            script_table: None,
            oracle: None,
            simulate_sampling: false,
        }
    }

    pub fn build(&self) -> Result<Box<dyn Backend>, LlmError> {
        match self {
            BackendDescriptor::Http {
                endpoint_url,
                model_name,
                api_key,
                timeout_secs,
                max_retries,
            } => Ok(Box::new(HttpBackend::new(
                endpoint_url.clone(),
                model_name.clone(),
                api_key.clone(),
                Duration::from_secs(*timeout_secs),
                *max_retries,
            ))),
            BackendDescriptor::Scripted {
                script_table,
                oracle,
                simulate_sampling,
            } => {
                let oracle = match oracle {
                    Some(path) => {
                        let raw = std::fs::read_to_string(path)?;
                        serde_json::from_str(&raw)?
                    }
                    None => crate::cohort::SynthOracle::builtin(),
                };
                let mut backend = ScriptedBackend::new(oracle);
                if let Some(path) = script_table {
                    backend = backend.with_script_file(path)?;
                }
                if *simulate_sampling {
                    backend = backend.with_simulated_sampling();
                }
                Ok(Box::new(backend))
            }
        }
    }
}

/// A chat-completion service. Implementations must be safe to call from
/// several visit workers at once.
pub trait Backend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, LlmError>;

    /// Short name recorded in run manifests ("scripted", "http:<model>").
    fn describe(&self) -> String;
}
