//! Strict parsers for every output grammar the templates demand.
//!
//! All parsers are total over arbitrary text: they return a value or a typed
//! error, never panic. Model output is messy — code fences, prose around the
//! JSON, stray brackets — so each parser first localizes the region it cares
//! about and ignores everything outside it.

use crate::cohort::{canonicalize_drug, DrugSet};
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::OnceLock;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("no [START]...[END] block found")]
    MissingBlock,
    #[error("the [START]...[END] block contains no drug lines")]
    EmptyBlock,
    #[error("no JSON object found in the output")]
    NoJsonFound,
    #[error("JSON found but not the expected shape: {0}")]
    WrongShape(String),
    #[error("judge output has no in-range relevance score: {0:?}")]
    UnparseableJudgeOutput(String),
    #[error("missing <{0}> tag")]
    MissingTag(&'static str),
}

/// One drafted line: drug label and its short reason.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedDraft {
    pub lines: Vec<(String, String)>,
}

impl ParsedDraft {
    pub fn drug_set(&self) -> DrugSet {
        self.lines.iter().map(|(drug, _)| drug.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedKeywords {
    pub keywords: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedTendency {
    pub dominant_pattern: String,
    pub common_additions: Vec<String>,
    pub reasoning: String,
}

/// The closed verb set of the audit grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AuditAction {
    Kept,
    Added,
    Removed,
}

impl AuditAction {
    pub fn as_str(self) -> &'static str {
        match self {
            AuditAction::Kept => "KEPT",
            AuditAction::Added => "ADDED",
            AuditAction::Removed => "REMOVED",
        }
    }

    fn parse(raw: &str) -> Option<AuditAction> {
        match raw.trim().to_ascii_uppercase().as_str() {
            "KEPT" => Some(AuditAction::Kept),
            "ADDED" => Some(AuditAction::Added),
            "REMOVED" => Some(AuditAction::Removed),
            _ => None,
        }
    }
}

impl fmt::Display for AuditAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedAuditEntry {
    pub action: AuditAction,
    pub drug: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedRefinement {
    pub final_prescription: Vec<String>,
    pub audit_log: Vec<ParsedAuditEntry>,
    pub final_description: String,
}

/// Extract the first `[START]...[END]` block and split each line on the
/// first `|`. Text outside the block is ignored; lines without a `|` are a
/// bare drug with an empty reason.
pub fn parse_start_end_block(text: &str) -> Result<ParsedDraft, ParseError> {
    let start = text.find("[START]").ok_or(ParseError::MissingBlock)?;
    let after = &text[start + "[START]".len()..];
    let end = after.find("[END]").ok_or(ParseError::MissingBlock)?;
    let body = &after[..end];

    let mut lines = Vec::new();
    for line in body.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (drug_raw, reason) = match line.split_once('|') {
            Some((d, r)) => (d, r.trim().to_string()),
            None => (line, String::new()),
        };
        let drug = canonicalize_drug(drug_raw);
        if drug.is_empty() {
            continue;
        }
        lines.push((drug, reason));
    }
    if lines.is_empty() {
        return Err(ParseError::EmptyBlock);
    }
    Ok(ParsedDraft { lines })
}

/// Inverse of [`parse_start_end_block`] for round-trip checks and for
/// re-rendering a draft into a follow-up prompt.
pub fn render_draft_block(draft: &ParsedDraft) -> String {
    let mut out = String::from("[START]\n");
    for (drug, reason) in &draft.lines {
        if reason.is_empty() {
            out.push_str(drug);
        } else {
            out.push_str(&format!("{drug} | {reason}"));
        }
        out.push('\n');
    }
    out.push_str("[END]");
    out
}

/// Drop markdown code-fence lines so the JSON scan sees the payload.
fn strip_code_fences(text: &str) -> String {
    if !text.contains("```") {
        return text.to_string();
    }
    text.lines()
        .filter(|line| !line.trim_start().starts_with("```"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Every parseable JSON object in the text, in order of appearance, found by
/// balanced-brace scanning that respects string literals.
fn json_objects(text: &str) -> Vec<serde_json::Value> {
    let bytes = text.as_bytes();
    let mut found = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'{' {
            i += 1;
            continue;
        }
        match balanced_object_end(text, i) {
            Some(end) => {
                if let Ok(value) = serde_json::from_str::<serde_json::Value>(&text[i..=end]) {
                    found.push(value);
                    i = end + 1;
                    continue;
                }
                // Not valid JSON despite balanced braces — look inside it.
                i += 1;
            }
            None => i += 1,
        }
    }
    found
}

/// Byte index of the `}` closing the object that opens at `start`, honoring
/// strings and escapes. `None` when the braces never balance.
fn balanced_object_end(text: &str, start: usize) -> Option<usize> {
    let bytes = text.as_bytes();
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (offset, &b) in bytes[start..].iter().enumerate() {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(start + offset);
                }
            }
            _ => {}
        }
    }
    None
}

fn string_array(value: &serde_json::Value) -> Option<Vec<String>> {
    let items = value.as_array()?;
    items
        .iter()
        .map(|v| v.as_str().map(str::to_string))
        .collect()
}

/// Locate the first JSON object carrying a `keywords` string array and cap
/// its length. Returns [`ParseError::WrongShape`] when objects parse but
/// none has the right shape.
pub fn parse_keywords_json(text: &str, cap: usize) -> Result<ParsedKeywords, ParseError> {
    let cleaned = strip_code_fences(text);
    let objects = json_objects(&cleaned);
    if objects.is_empty() {
        return Err(ParseError::NoJsonFound);
    }
    for object in &objects {
        if let Some(keywords) = object.get("keywords").and_then(string_array) {
            let mut keywords = keywords;
            keywords.truncate(cap);
            return Ok(ParsedKeywords { keywords });
        }
    }
    Err(ParseError::WrongShape(
        "no object with a \"keywords\" string array".into(),
    ))
}

pub fn parse_tendency_json(text: &str) -> Result<ParsedTendency, ParseError> {
    let cleaned = strip_code_fences(text);
    let objects = json_objects(&cleaned);
    if objects.is_empty() {
        return Err(ParseError::NoJsonFound);
    }
    for object in &objects {
        let Some(pattern) = object.get("dominant_pattern").and_then(|v| v.as_str()) else {
            continue;
        };
        let Some(additions) = object.get("common_additions").and_then(string_array) else {
            continue;
        };
        let reasoning = object
            .get("reasoning")
            .and_then(|v| v.as_str())
            .unwrap_or_default();
        return Ok(ParsedTendency {
            dominant_pattern: pattern.to_string(),
            common_additions: additions,
            reasoning: reasoning.to_string(),
        });
    }
    Err(ParseError::WrongShape(
        "no object with \"dominant_pattern\" and \"common_additions\"".into(),
    ))
}

pub fn parse_refinement_json(text: &str) -> Result<ParsedRefinement, ParseError> {
    let cleaned = strip_code_fences(text);
    let objects = json_objects(&cleaned);
    if objects.is_empty() {
        return Err(ParseError::NoJsonFound);
    }
    let mut shape_problem = String::from("no object with \"final_prescription\" and \"audit_log\"");
    for object in &objects {
        let Some(final_prescription) = object.get("final_prescription").and_then(string_array)
        else {
            continue;
        };
        let Some(log_items) = object.get("audit_log").and_then(|v| v.as_array()) else {
            continue;
        };
        let mut audit_log = Vec::with_capacity(log_items.len());
        let mut ok = true;
        for item in log_items {
            let action_raw = item.get("action").and_then(|v| v.as_str()).unwrap_or("");
            let Some(action) = AuditAction::parse(action_raw) else {
                shape_problem = format!("audit action {action_raw:?} is not KEPT/ADDED/REMOVED");
                ok = false;
                break;
            };
            let Some(drug) = item.get("drug").and_then(|v| v.as_str()) else {
                shape_problem = "audit entry without a \"drug\" string".into();
                ok = false;
                break;
            };
            audit_log.push(ParsedAuditEntry {
                action,
                drug: drug.to_string(),
            });
        }
        if !ok {
            continue;
        }
        let final_description = object
            .get("final_description")
            .and_then(|v| v.as_str())
            .unwrap_or_default();
        return Ok(ParsedRefinement {
            final_prescription,
            audit_log,
            final_description: final_description.to_string(),
        });
    }
    Err(ParseError::WrongShape(shape_problem))
}

/// Pull the integer from the `Relevance (1-5): N` line; out-of-range scores
/// are rejected.
pub fn parse_judge_score(text: &str) -> Result<u8, ParseError> {
    static SCORE: OnceLock<Regex> = OnceLock::new();
    let re = SCORE.get_or_init(|| {
        Regex::new(r"Relevance \(1-5\):\s*\[?\s*(\d+)\s*\]?").expect("static regex")
    });
    let captures = re
        .captures(text)
        .ok_or_else(|| ParseError::UnparseableJudgeOutput(preview(text)))?;
    let score: u32 = captures[1]
        .parse()
        .map_err(|_| ParseError::UnparseableJudgeOutput(preview(text)))?;
    if (1..=5).contains(&score) {
        Ok(score as u8)
    } else {
        Err(ParseError::UnparseableJudgeOutput(preview(text)))
    }
}

fn preview(text: &str) -> String {
    let trimmed = text.trim();
    let mut end = trimmed.len().min(60);
    while !trimmed.is_char_boundary(end) {
        end -= 1;
    }
    trimmed[..end].to_string()
}

/// Content of the first `<tag>…</tag>` span; a leading `:` after the opening
/// tag is tolerated since prompts show the tag both ways.
pub fn extract_tag(text: &str, tag: &'static str) -> Result<String, ParseError> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = text.find(&open).ok_or(ParseError::MissingTag(tag))? + open.len();
    let rest = &text[start..];
    let end = rest.find(&close).ok_or(ParseError::MissingTag(tag))?;
    let inner = rest[..end].trim();
    Ok(inner.strip_prefix(':').unwrap_or(inner).trim().to_string())
}

/// Final drug list from a `<Answer>:[Drug A, Drug B]</Answer>` span.
pub fn parse_answer_list(text: &str) -> Result<DrugSet, ParseError> {
    let inner = extract_tag(text, "Answer")?;
    let listed = inner
        .trim()
        .trim_start_matches('[')
        .trim_end_matches(']');
    Ok(listed.split(',').collect())
}

/// Keep only keywords that literally occur in `source_text`
/// (case-insensitive); order is preserved.
pub fn validate_focus_substrings(keywords: &[String], source_text: &str) -> Vec<String> {
    let haystack = source_text.to_lowercase();
    keywords
        .iter()
        .filter(|k| !k.trim().is_empty() && haystack.contains(&k.to_lowercase()))
        .cloned()
        .collect()
}
