//! Operator surface: one declarative TOML file ([`RunConfig`]) drives cohort
//! synthesis, ingestion, index building, batch runs, evaluation, and
//! hyperparameter sweeps, with a handful of command-line and environment
//! overrides layered on top (file < environment < flags).
//!
//! Every command is deterministic given (config, seed) when pointed at the
//! scripted backend, and each failure maps to a stable process exit code so
//! shell drivers can branch on what went wrong.

mod commands;

pub use commands::{
    cmd_eval, cmd_index, cmd_ingest, cmd_run, cmd_sweep, cmd_synth, guideline_entries,
    load_sparse_index, read_oracle, sha256_hex, EvalArtifacts, EvalBundle, IndexArtifacts,
    IndexKind, IngestReport, RunArtifacts, SeedMetrics, SweepRow, SynthArtifacts,
    GUIDELINE_CHUNK_OVERLAP, GUIDELINE_CHUNK_SIZE,
};

use crate::cohort::{CohortError, SplitSpec, SynthConfig};
use crate::eval::EvalError;
use crate::llm::GenerationParams;
use crate::pipeline::{GuidelineConfig, Method, PaceConfig, PipelineError};
use crate::prompts::Flavor;
use crate::retrieval::{RetrievalError, RetrievalParams};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Environment variable overriding the chat endpoint URL.
pub const ENV_BACKEND_URL: &str = "PACE_BACKEND_URL";
/// Environment variable supplying the endpoint API key. The key is never
/// written back out, so it lives here rather than in the config file.
pub const ENV_API_KEY: &str = "PACE_API_KEY";

/// The evaluation seed set used when a config does not name its own.
pub const DEFAULT_SEEDS: [u64; 5] = [42, 137, 2025, 3141, 7777];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },
    /// A required artifact is missing or inconsistent with the cohort.
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{context}: {source}")]
    Artifact {
        context: String,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// Process exit code for this failure: 2 for usage and configuration
    /// mistakes, 4 for an unreachable or misbehaving model backend, 3 for
    /// everything wrong with data on disk.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 2,
            CliError::Pipeline(PipelineError::Stage { .. })
            | CliError::Pipeline(PipelineError::Retrieval(RetrievalError::EmbedderUnavailable(_)))
            | CliError::Retrieval(RetrievalError::EmbedderUnavailable(_))
            | CliError::Eval(EvalError::Backend(_)) => 4,
            _ => 3,
        }
    }
}

/// Which language-model backend a run talks to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// The deterministic offline stand-in keyed on stage markers.
    Scripted,
    /// A chat-completion HTTP endpoint.
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Chat endpoint; required for the http kind.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    /// Backbone label; names the run directory level under the method.
    pub model: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    /// Scripted kind only: derive per-seed output variation the way a
    /// temperature sampler would.
    pub simulate_sampling: bool,
    /// Optional embedding service; the local hashing embedder is used
    /// otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embed_url: Option<String>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Scripted,
            url: None,
            model: "scripted".into(),
            timeout_secs: 120,
            max_retries: 2,
            simulate_sampling: false,
            embed_url: None,
        }
    }
}

/// Named generation-parameter profile, selecting temperature, completion
/// budget, and context window together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationProfile {
    Llama,
    Qwen,
}

impl GenerationProfile {
    pub fn params(self) -> GenerationParams {
        match self {
            GenerationProfile::Llama => GenerationParams::llama_profile(),
            GenerationProfile::Qwen => GenerationParams::qwen_profile(),
        }
    }
}

/// Where each artifact lives. Relative paths resolve against the working
/// directory, so one config can drive several sandboxes via `cd`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Cohort interchange file (JSON-lines of patient records).
    pub cohort: PathBuf,
    /// Scripted-backend world model written by synthesis.
    pub oracle: PathBuf,
    /// Folder of guideline text documents.
    pub guidelines: PathBuf,
    /// Root for persisted retrieval indexes.
    pub indexes: PathBuf,
    /// Root for run directories and evaluation reports.
    pub output: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            cohort: "data/cohort.jsonl".into(),
            oracle: "data/oracle.json".into(),
            guidelines: "data/guidelines".into(),
            indexes: "indexes".into(),
            output: "runs".into(),
        }
    }
}

/// The declarative run configuration: sections of key = value pairs, every
/// field optional with these defaults. [`RunConfig::effective_toml`] emits
/// the fully-resolved form, which parses back to an identical value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub flavor: Flavor,
    pub method: Method,
    pub profile: GenerationProfile,
    pub seeds: Vec<u64>,
    /// Most focus queries extracted per visit.
    pub focus_cap: usize,
    /// Visits completed concurrently within one run.
    pub parallelism: usize,
    pub backend: BackendConfig,
    /// Case retrieval knobs (top-k and similarity threshold).
    pub retrieval: RetrievalParams,
    /// Guideline retrieval knobs for the guideline baseline.
    pub guideline: GuidelineConfig,
    /// Synthetic-cohort settings consumed by the synth command.
    pub synth: SynthConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            flavor: Flavor::Soap,
            method: Method::Pace,
            profile: GenerationProfile::Llama,
            seeds: DEFAULT_SEEDS.to_vec(),
            focus_cap: 2,
            parallelism: 1,
            backend: BackendConfig::default(),
            retrieval: RetrievalParams::default(),
            guideline: GuidelineConfig::default(),
            synth: SynthConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

/// Command-line overrides, strongest layer of the three. `None` leaves the
/// underlying value alone.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// Narrows the seed list to this one seed and repoints synthesis at it.
    pub seed: Option<u64>,
    pub method: Option<String>,
    pub backend_url: Option<String>,
    pub k: Option<usize>,
    pub tau: Option<f64>,
    pub focus_cap: Option<usize>,
    pub parallelism: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let raw = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        toml::from_str(&raw).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Environment layer: a set backend URL replaces the file's. The API key
    /// is read separately at backend construction and never stored here.
    pub fn apply_env(&mut self) {
        self.apply_env_values(std::env::var(ENV_BACKEND_URL).ok());
    }

    fn apply_env_values(&mut self, backend_url: Option<String>) {
        if let Some(url) = backend_url.filter(|u| !u.trim().is_empty()) {
            self.backend.url = Some(url);
        }
    }

    pub fn apply_overrides(&mut self, ov: &Overrides) -> Result<(), CliError> {
        if let Some(seed) = ov.seed {
            self.seeds = vec![seed];
            self.synth.seed = seed;
        }
        if let Some(name) = &ov.method {
            self.method = Method::parse(name).ok_or_else(|| {
                CliError::Usage(format!(
                    "unknown method {name:?}; expected one of pace, zero_shot, guideline, treatrag, medreflect"
                ))
            })?;
        }
        if let Some(url) = &ov.backend_url {
            self.backend.url = Some(url.clone());
        }
        if let Some(k) = ov.k {
            self.retrieval.k = k;
        }
        if let Some(tau) = ov.tau {
            self.retrieval.tau = tau;
        }
        if let Some(cap) = ov.focus_cap {
            self.focus_cap = cap;
        }
        if let Some(par) = ov.parallelism {
            self.parallelism = par;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(CliError::Usage("at least one seed is required".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(CliError::Usage(
                "duplicate seeds would write to the same run directory".into(),
            ));
        }
        if self.retrieval.k == 0 {
            return Err(CliError::Usage("retrieval k must be at least 1".into()));
        }
        check_tau("retrieval tau", self.retrieval.tau)?;
        if self.guideline.k == 0 {
            return Err(CliError::Usage("guideline k must be at least 1".into()));
        }
        check_tau("guideline tau", self.guideline.tau)?;
        if self.focus_cap == 0 {
            return Err(CliError::Usage(
                "focus cap must be at least 1; a cap of 0 silences every acute visit".into(),
            ));
        }
        if self.parallelism == 0 {
            return Err(CliError::Usage("parallelism must be at least 1".into()));
        }
        if self.backend.kind == BackendKind::Http
            && self.backend.url.as_deref().is_none_or(|u| u.trim().is_empty())
        {
            return Err(CliError::Usage(format!(
                "the http backend needs an endpoint: set [backend] url, {ENV_BACKEND_URL}, or --backend-url"
            )));
        }
        self.synth.validate().map_err(CliError::Usage)?;
        Ok(())
    }

    /// The fully-resolved config as TOML. Parsing the result yields a value
    /// equal to `self`.
    pub fn effective_toml(&self) -> String {
        toml::to_string_pretty(self).expect("a run config always serializes")
    }

    /// How the cohort splits into retrieval pool and test set. Fixed across
    /// seeds so every seed scores the same visits.
    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec::default()
    }

    /// Backbone label for directory layout and report rows.
    pub fn backbone(&self) -> &str {
        &self.backend.model
    }

    /// Run directory for one (method, seed): `<output>/<method>/<backbone>/<seed>`.
    pub fn run_dir(&self, method: Method, seed: u64) -> PathBuf {
        self.paths
            .output
            .join(method.as_str())
            .join(self.backbone())
            .join(seed.to_string())
    }

    /// Directory holding cross-seed evaluation artifacts for a method.
    pub fn eval_dir(&self, method: Method) -> PathBuf {
        self.paths.output.join(method.as_str()).join(self.backbone())
    }

    pub fn params_for(&self, seed: u64) -> GenerationParams {
        self.profile.params().with_seed(seed)
    }

    pub fn pace_config(&self) -> PaceConfig {
        PaceConfig {
            retrieval: self.retrieval,
            focus_cap: self.focus_cap,
        }
    }
}

fn check_tau(what: &str, tau: f64) -> Result<(), CliError> {
    if !tau.is_finite() || !(-1.0..=1.0).contains(&tau) {
        return Err(CliError::Usage(format!(
            "{what} must be a cosine threshold in [-1, 1], got {tau}"
        )));
    }
    Ok(())
}

/// Resolve the three configuration layers: file (or defaults), then
/// environment, then flags; validate the result.
pub fn load_config(path: Option<&Path>, ov: &Overrides) -> Result<RunConfig, CliError> {
    let mut config = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    config.apply_env();
    config.apply_overrides(ov)?;
    config.validate()?;
    Ok(config)
}

/// The hyperparameter axis a sweep walks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    K,
    Tau,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::K => "k",
            SweepAxis::Tau => "tau",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

impl SweepSpec {
    /// Parse `--axis`/`--values` flags, e.g. `("k", "1,3,5,7")`.
    pub fn parse(axis: &str, values: &str) -> Result<SweepSpec, CliError> {
        let axis = match axis.trim().to_ascii_lowercase().as_str() {
            "k" => SweepAxis::K,
            "tau" => SweepAxis::Tau,
            other => {
                return Err(CliError::Usage(format!(
                    "unknown sweep axis {other:?}; expected k or tau"
                )))
            }
        };
        let values = values
            .split(',')
            .map(|v| {
                let v = v.trim();
                v.parse::<f64>()
                    .map_err(|_| CliError::Usage(format!("sweep value {v:?} is not a number")))
            })
            .collect::<Result<Vec<f64>, CliError>>()?;
        let spec = SweepSpec { axis, values };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.values.is_empty() {
            return Err(CliError::Usage("a sweep needs at least one value".into()));
        }
        for &v in &self.values {
            match self.axis {
                SweepAxis::K => {
                    if !v.is_finite() || v < 1.0 || v.fract() != 0.0 {
                        return Err(CliError::Usage(format!(
                            "k sweep values must be whole numbers >= 1, got {v}"
                        )));
                    }
                }
                SweepAxis::Tau => check_tau("tau sweep value", v)?,
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for &v in &self.values {
            if !seen.insert(v.to_bits()) {
                return Err(CliError::Usage(format!("sweep value {v} appears twice")));
            }
        }
        Ok(())
    }

    /// Directory label for one value: `k_3`, `tau_0.7`.
    pub fn label(&self, value: f64) -> String {
        match self.axis {
            SweepAxis::K => format!("k_{}", value as usize),
            SweepAxis::Tau => format!("tau_{value}"),
        }
    }

    /// A copy of `config` with this axis pinned to `value`.
    pub fn apply(&self, config: &RunConfig, value: f64) -> RunConfig {
        let mut sub = config.clone();
        match self.axis {
            SweepAxis::K => sub.retrieval.k = value as usize,
            SweepAxis::Tau => sub.retrieval.tau = value,
        }
        sub
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::LlmError;

    #[test]
    fn defaults_mirror_the_reference_settings() {
        let config = RunConfig::default();
        assert_eq!(config.retrieval.k, 7);
        assert_eq!(config.retrieval.tau, 0.9);
        assert_eq!(config.seeds, DEFAULT_SEEDS.to_vec());
        assert_eq!(config.focus_cap, 2);
        assert_eq!(config.method, Method::Pace);
        assert_eq!(config.flavor, Flavor::Soap);
        assert_eq!(config.guideline.k, 3);
        assert_eq!(config.guideline.tau, 0.3);
        assert_eq!(config.synth.patients, 200);
        config.validate().expect("defaults are valid");
    }

    #[test]
    fn effective_config_round_trips() {
        let mut config = RunConfig {
            flavor: Flavor::Diagnosis,
            method: Method::Treatrag,
            profile: GenerationProfile::Qwen,
            seeds: vec![1, 2],
            focus_cap: 1,
            parallelism: 4,
            backend: BackendConfig {
                kind: BackendKind::Http,
                url: Some("http://localhost:9000/v1/chat".into()),
                model: "qwen3-8b".into(),
                simulate_sampling: true,
                embed_url: Some("http://localhost:9001".into()),
                ..BackendConfig::default()
            },
            ..RunConfig::default()
        };
        config.retrieval.k = 3;
        config.retrieval.tau = 0.5;
        config.synth.patients = 12;
        config.paths.output = "elsewhere/runs".into();

        let toml_text = config.effective_toml();
        let back: RunConfig = toml::from_str(&toml_text).expect("effective config parses");
        assert_eq!(back, config);
    }

    #[test]
    fn minimal_and_empty_files_parse_with_defaults() {
        let empty: RunConfig = toml::from_str("").expect("empty config is all defaults");
        assert_eq!(empty, RunConfig::default());

        let partial: RunConfig = toml::from_str(
            "method = \"guideline\"\n\n[retrieval]\nk = 5\n",
        )
        .expect("partial config parses");
        assert_eq!(partial.method, Method::Guideline);
        assert_eq!(partial.retrieval.k, 5);
        assert_eq!(partial.retrieval.tau, 0.9);

        let err = toml::from_str::<RunConfig>("mehtod = \"pace\"\n");
        assert!(err.is_err(), "misspelled keys are rejected, not ignored");
    }

    #[test]
    fn override_layers_apply_in_order() {
        let mut config = RunConfig::default();
        config.backend.url = Some("http://from-file".into());
        config.apply_env_values(Some("http://from-env".into()));
        assert_eq!(config.backend.url.as_deref(), Some("http://from-env"));

        let ov = Overrides {
            seed: Some(7),
            method: Some("TreatRAG".into()),
            backend_url: Some("http://from-flag".into()),
            k: Some(3),
            tau: Some(0.5),
            focus_cap: Some(1),
            parallelism: Some(4),
        };
        config.apply_overrides(&ov).unwrap();
        assert_eq!(config.backend.url.as_deref(), Some("http://from-flag"));
        assert_eq!(config.seeds, vec![7]);
        assert_eq!(config.synth.seed, 7);
        assert_eq!(config.method, Method::Treatrag);
        assert_eq!(config.retrieval.k, 3);
        assert_eq!(config.retrieval.tau, 0.5);
        assert_eq!(config.focus_cap, 1);
        assert_eq!(config.parallelism, 4);

        let bad = Overrides {
            method: Some("mesmer".into()),
            ..Overrides::default()
        };
        let err = config.apply_overrides(&bad).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    type Mutation = Box<dyn Fn(&mut RunConfig)>;

    #[test]
    fn validation_rejects_out_of_range_settings() {
        let cases: Vec<(&str, Mutation)> = vec![
            ("empty seeds", Box::new(|c| c.seeds.clear())),
            ("duplicate seeds", Box::new(|c| c.seeds = vec![1, 1])),
            ("zero k", Box::new(|c| c.retrieval.k = 0)),
            ("tau out of range", Box::new(|c| c.retrieval.tau = 1.5)),
            ("zero focus cap", Box::new(|c| c.focus_cap = 0)),
            ("zero parallelism", Box::new(|c| c.parallelism = 0)),
            ("zero patients", Box::new(|c| c.synth.patients = 0)),
            (
                "http without url",
                Box::new(|c| c.backend.kind = BackendKind::Http),
            ),
        ];
        for (what, mutate) in cases {
            let mut config = RunConfig::default();
            mutate(&mut config);
            let err = config.validate().expect_err(what);
            assert_eq!(err.exit_code(), 2, "{what} should be a usage error");
        }
    }

    #[test]
    fn sweep_specs_parse_and_reject_illegal_values() {
        let k = SweepSpec::parse("k", "1,3,5,7").unwrap();
        assert_eq!(k.axis, SweepAxis::K);
        assert_eq!(k.values, vec![1.0, 3.0, 5.0, 7.0]);
        assert_eq!(k.label(3.0), "k_3");

        let tau = SweepSpec::parse("tau", "0.5, 0.7, 0.9").unwrap();
        assert_eq!(tau.values.len(), 3);
        assert_eq!(tau.label(0.7), "tau_0.7");

        for (axis, values) in [
            ("k", "2.5"),
            ("k", "0"),
            ("tau", "1.5"),
            ("tau", ""),
            ("temperature", "0.5"),
            ("k", "3,3"),
        ] {
            let err = SweepSpec::parse(axis, values).expect_err(axis);
            assert_eq!(err.exit_code(), 2);
        }

        let base = RunConfig::default();
        let swept = k.apply(&base, 3.0);
        assert_eq!(swept.retrieval.k, 3);
        assert_eq!(swept.retrieval.tau, base.retrieval.tau);
    }

    #[test]
    fn exit_codes_partition_failures() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 2);
        assert_eq!(
            CliError::Config {
                path: "p.toml".into(),
                message: "bad".into()
            }
            .exit_code(),
            2
        );
        assert_eq!(CliError::Cohort(CohortError::EmptyCohort).exit_code(), 3);
        assert_eq!(
            CliError::Eval(EvalError::Backend(LlmError::BackendUnavailable {
                attempts: 3,
                detail: "connection refused".into()
            }))
            .exit_code(),
            4
        );
        assert_eq!(
            CliError::Retrieval(RetrievalError::EmbedderUnavailable("down".into())).exit_code(),
            4
        );
        assert_eq!(CliError::Retrieval(RetrievalError::EmptyIndex).exit_code(), 3);
    }
}
