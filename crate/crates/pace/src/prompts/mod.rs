//! Prompt templates plus the strict render and parse machinery around them.
//!
//! Templates are data files under `templates/<flavor>/<stage>.tmpl`, each
//! with a front-matter header declaring its stage, flavor, and placeholder
//! set, followed by `[[system]]` and `[[user]]` sections whose bodies use
//! `{{name}}` placeholders. The registry embeds every file at compile time
//! and validates declared placeholders against the references actually in
//! the body, so a malformed template fails the test suite instead of a
//! production render.

pub mod bind;
pub mod parse;

use crate::cohort::VisitKind;
use crate::llm::{ChatMessage, StageId};
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::sync::OnceLock;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("invalid template: {0}")]
    TemplateInvalid(String),
    #[error("no template registered for stage {stage} flavor {flavor}")]
    UnknownTemplate { stage: StageId, flavor: Flavor },
    #[error("placeholder {{{{{name}}}}} has no binding")]
    MissingBinding { name: String },
}

/// Which note structure a template speaks: outpatient SOAP visits or
/// admission-style diagnosis lists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flavor {
    Soap,
    Diagnosis,
}

impl Flavor {
    pub const ALL: [Flavor; 2] = [Flavor::Soap, Flavor::Diagnosis];

    pub fn as_str(self) -> &'static str {
        match self {
            Flavor::Soap => "soap",
            Flavor::Diagnosis => "diagnosis",
        }
    }

    pub fn parse(name: &str) -> Option<Flavor> {
        Flavor::ALL.into_iter().find(|f| f.as_str() == name)
    }
}

impl From<VisitKind> for Flavor {
    fn from(kind: VisitKind) -> Flavor {
        match kind {
            VisitKind::Soap => Flavor::Soap,
            VisitKind::Admission => Flavor::Diagnosis,
        }
    }
}

impl fmt::Display for Flavor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub stage: StageId,
    pub flavor: Flavor,
    /// Placeholder names in declared order.
    pub placeholders: Vec<String>,
    pub system_text: String,
    pub user_text: String,
}

fn placeholder_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{\{([a-z_]+)\}\}").expect("static regex"))
}

/// Parse one template file: front matter between `---` lines, then
/// `[[system]]` and `[[user]]` sections. The declared placeholder set must
/// equal the set of `{{name}}` references in the two bodies.
pub fn parse_template(raw: &str) -> Result<PromptTemplate, PromptError> {
    let invalid = |detail: &str| PromptError::TemplateInvalid(detail.to_string());

    let rest = raw
        .strip_prefix("---\n")
        .ok_or_else(|| invalid("missing front-matter opener"))?;
    let (header, body) = rest
        .split_once("\n---\n")
        .ok_or_else(|| invalid("missing front-matter closer"))?;

    let mut stage = None;
    let mut flavor = None;
    let mut placeholders: Option<Vec<String>> = None;
    for line in header.lines() {
        let Some((key, value)) = line.split_once(':') else {
            return Err(invalid(&format!("front-matter line without a colon: {line:?}")));
        };
        let value = value.trim();
        match key.trim() {
            "stage" => {
                stage = Some(
                    StageId::parse(value)
                        .ok_or_else(|| invalid(&format!("unknown stage {value:?}")))?,
                )
            }
            "flavor" => {
                flavor = Some(
                    Flavor::parse(value)
                        .ok_or_else(|| invalid(&format!("unknown flavor {value:?}")))?,
                )
            }
            "placeholders" => {
                placeholders = Some(
                    value
                        .split(',')
                        .map(|p| p.trim().to_string())
                        .filter(|p| !p.is_empty())
                        .collect(),
                )
            }
            other => return Err(invalid(&format!("unknown front-matter key {other:?}"))),
        }
    }
    let stage = stage.ok_or_else(|| invalid("front matter lacks a stage"))?;
    let flavor = flavor.ok_or_else(|| invalid("front matter lacks a flavor"))?;
    let placeholders = placeholders.ok_or_else(|| invalid("front matter lacks placeholders"))?;

    let body = body
        .strip_prefix("[[system]]\n")
        .ok_or_else(|| invalid("body must open with [[system]]"))?;
    let (system_text, user_text) = body
        .split_once("\n[[user]]\n")
        .ok_or_else(|| invalid("body lacks a [[user]] section"))?;
    let system_text = system_text.trim().to_string();
    let user_text = user_text.trim().to_string();
    if system_text.is_empty() || user_text.is_empty() {
        return Err(invalid("system and user sections must be non-empty"));
    }

    let mut referenced: Vec<String> = Vec::new();
    for caps in placeholder_regex().captures_iter(&format!("{system_text}\n{user_text}")) {
        let name = caps[1].to_string();
        if !referenced.contains(&name) {
            referenced.push(name);
        }
    }
    for name in &placeholders {
        if !referenced.contains(name) {
            return Err(invalid(&format!("declared placeholder {name:?} never referenced")));
        }
    }
    for name in &referenced {
        if !placeholders.contains(name) {
            return Err(invalid(&format!("undeclared placeholder {name:?} referenced in body")));
        }
    }

    Ok(PromptTemplate {
        stage,
        flavor,
        placeholders,
        system_text,
        user_text,
    })
}

impl PromptTemplate {
    /// Substitute bindings into both sections and produce the two-message
    /// chat transcript. Every placeholder must be bound (missing one is an
    /// error); extra bindings are ignored so callers can share binding sets
    /// across flavors. Substitution is single-pass: placeholder-looking text
    /// inside a bound value is emitted literally, never re-expanded.
    pub fn render(&self, bindings: &[(&str, String)]) -> Result<Vec<ChatMessage>, PromptError> {
        Ok(vec![
            ChatMessage::system(fill(&self.system_text, bindings)?),
            ChatMessage::user(fill(&self.user_text, bindings)?),
        ])
    }
}

fn fill(text: &str, bindings: &[(&str, String)]) -> Result<String, PromptError> {
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for caps in placeholder_regex().captures_iter(text) {
        let span = caps.get(0).expect("whole match");
        let name = &caps[1];
        let value = bindings
            .iter()
            .find(|(key, _)| *key == name)
            .map(|(_, value)| value)
            .ok_or_else(|| PromptError::MissingBinding { name: name.to_string() })?;
        out.push_str(&text[last..span.start()]);
        out.push_str(value);
        last = span.end();
    }
    out.push_str(&text[last..]);
    Ok(out)
}

/// Raw template sources embedded at compile time. Stage and flavor come from
/// each file's own front matter.
const RAW_TEMPLATES: [&str; 22] = [
    include_str!("templates/soap/initial.tmpl"),
    include_str!("templates/soap/focus.tmpl"),
    include_str!("templates/soap/tendency.tmpl"),
    include_str!("templates/soap/refine.tmpl"),
    include_str!("templates/soap/summary.tmpl"),
    include_str!("templates/soap/judge.tmpl"),
    include_str!("templates/soap/guideline.tmpl"),
    include_str!("templates/soap/treatrag.tmpl"),
    include_str!("templates/soap/medreflect_q.tmpl"),
    include_str!("templates/soap/medreflect_a.tmpl"),
    include_str!("templates/soap/medreflect_r.tmpl"),
    include_str!("templates/diagnosis/initial.tmpl"),
    include_str!("templates/diagnosis/focus.tmpl"),
    include_str!("templates/diagnosis/tendency.tmpl"),
    include_str!("templates/diagnosis/refine.tmpl"),
    include_str!("templates/diagnosis/summary.tmpl"),
    include_str!("templates/diagnosis/judge.tmpl"),
    include_str!("templates/diagnosis/guideline.tmpl"),
    include_str!("templates/diagnosis/treatrag.tmpl"),
    include_str!("templates/diagnosis/medreflect_q.tmpl"),
    include_str!("templates/diagnosis/medreflect_a.tmpl"),
    include_str!("templates/diagnosis/medreflect_r.tmpl"),
];

fn registry() -> &'static BTreeMap<(StageId, Flavor), PromptTemplate> {
    static REGISTRY: OnceLock<BTreeMap<(StageId, Flavor), PromptTemplate>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut map = BTreeMap::new();
        for raw in RAW_TEMPLATES {
            let parsed = parse_template(raw).expect("embedded template must parse");
            let key = (parsed.stage, parsed.flavor);
            let existing = map.insert(key, parsed);
            assert!(existing.is_none(), "duplicate template for {key:?}");
        }
        map
    })
}

/// Look up the embedded template for a stage/flavor pair.
pub fn template(stage: StageId, flavor: Flavor) -> Result<&'static PromptTemplate, PromptError> {
    registry()
        .get(&(stage, flavor))
        .ok_or(PromptError::UnknownTemplate { stage, flavor })
}
