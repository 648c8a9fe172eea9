//! Live chat-completion client.
//!
//! Speaks the common chat JSON shape: POST `{model, messages, temperature,
//! max_tokens, seed}`, read `choices[0].message.content`. Transport failures
//! and 5xx responses are retried with a short linear backoff; 4xx responses
//! are not retried (the request itself is wrong).

use super::{Backend, ChatMessage, CompletionRequest, CompletionResult, LlmError};
use serde::{Deserialize, Serialize};
use std::time::{Duration, Instant};

#[derive(Debug, Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
    seed: u64,
}

#[derive(Debug, Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Debug, Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Debug, Deserialize)]
struct WireMessage {
    content: String,
}

pub struct HttpBackend {
    endpoint_url: String,
    model_name: String,
    api_key: Option<String>,
    timeout: Duration,
    max_retries: u32,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(
        endpoint_url: String,
        model_name: String,
        api_key: Option<String>,
        timeout: Duration,
        max_retries: u32,
    ) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .expect("default TLS-free client configuration is always valid");
        HttpBackend {
            endpoint_url,
            model_name,
            api_key,
            timeout,
            max_retries,
            client,
        }
    }

    fn send_once(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        let body = WireRequest {
            model: &self.model_name,
            messages: &request.messages,
            temperature: request.params.temperature,
            max_tokens: request.params.max_tokens,
            seed: request.params.seed,
        };
        let mut builder = self.client.post(&self.endpoint_url).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.header("Authorization", format!("Bearer {key}"));
        }
        let response = builder.send().map_err(|e| {
            if e.is_timeout() {
                LlmError::Timeout(self.timeout)
            } else {
                LlmError::BackendUnavailable {
                    attempts: 1,
                    detail: e.to_string(),
                }
            }
        })?;

        let status = response.status();
        if status.is_server_error() {
            return Err(LlmError::BackendUnavailable {
                attempts: 1,
                detail: format!("server returned {status}"),
            });
        }
        if !status.is_success() {
            return Err(LlmError::InvalidResponse(format!(
                "endpoint rejected the request with {status}"
            )));
        }
        let parsed: WireResponse = response
            .json()
            .map_err(|e| LlmError::InvalidResponse(format!("undecodable body: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| LlmError::InvalidResponse("response carried no choices".into()))
    }
}

impl Backend for HttpBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, LlmError> {
        let started = Instant::now();
        let mut last_detail = String::new();
        for attempt in 1..=self.max_retries.max(1) {
            match self.send_once(request) {
                Ok(text) => {
                    return Ok(CompletionResult {
                        text,
                        attempts_used: attempt,
                        backend_latency: started.elapsed(),
                    });
                }
                Err(LlmError::BackendUnavailable { detail, .. }) => {
                    last_detail = detail;
                    if attempt < self.max_retries.max(1) {
                        std::thread::sleep(Duration::from_millis(50 * u64::from(attempt)));
                    }
                }
                Err(other) => return Err(other),
            }
        }
        Err(LlmError::BackendUnavailable {
            attempts: self.max_retries.max(1),
            detail: last_detail,
        })
    }

    fn describe(&self) -> String {
        format!("http:{}", self.model_name)
    }
}
