//! Renderers that turn typed pipeline state into the text fragments the
//! templates expect. Markers, separators, and `None` placeholders here are
//! shared contract with the template bodies and with every consumer that
//! re-parses prompt text, so the exact formats are pinned by tests.

use crate::cohort::{DrugSet, Visit, VisitKind};
use crate::prompts::parse::AuditAction;
use crate::retrieval::RetrievedCase;
use serde::{Deserialize, Serialize};

/// One focus query's retrieval verdict, embedded into refine and summary
/// prompts as single-line JSON so the array survives line-oriented reading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TendencyDigest {
    pub focus: String,
    pub dominant_pattern: String,
    pub common_additions: Vec<String>,
    pub reasoning: String,
}

/// One audit verdict as it appears in the summary prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditDigest {
    pub action: AuditAction,
    pub drug: String,
}

/// Single-line JSON array; `[]` when empty (never `None`, the consumer
/// JSON-parses this line).
pub fn render_tendency_digests(digests: &[TendencyDigest]) -> String {
    serde_json::to_string(digests).expect("string fields always serialize")
}

/// Single-line JSON array of audit verdicts.
pub fn render_audit_digests(digests: &[AuditDigest]) -> String {
    serde_json::to_string(digests).expect("string fields always serialize")
}

fn ordinal(n: usize) -> String {
    let suffix = match (n % 10, n % 100) {
        (_, 11..=13) => "th",
        (1, _) => "st",
        (2, _) => "nd",
        (3, _) => "rd",
        _ => "th",
    };
    format!("{n}{suffix}")
}

/// Numbered visit blocks, oldest first; `None` when there is no history.
/// The issued prescription is rendered from its canonical drug set, not the
/// raw plan text, so history blocks are byte-deterministic.
pub fn render_recent_visits(visits: &[Visit]) -> String {
    if visits.is_empty() {
        return "None".to_string();
    }
    let blocks: Vec<String> = visits
        .iter()
        .enumerate()
        .map(|(i, visit)| {
            let head = format!("{} Visit)", ordinal(i + 1));
            match visit.kind {
                VisitKind::Soap => format!(
                    "{head}\nSubjective: {}\nObjective: {}\nAssessment: {}\nPlan: {}",
                    visit.subjective,
                    visit.objective,
                    visit.assessment,
                    visit.ground_truth.render(),
                ),
                VisitKind::Admission => format!(
                    "{head}\nDiagnoses: {}\nPrescribed: {}",
                    visit.diagnoses_text(),
                    visit.ground_truth.render(),
                ),
            }
        })
        .collect();
    blocks.join("\n\n")
}

/// Retrieved case blocks with the per-case prior/plan lines downstream
/// readers key on; `None` when retrieval came back empty. Case text is
/// flattened to one line so the block markers stay line-anchored.
pub fn render_similar_cases(cases: &[RetrievedCase]) -> String {
    if cases.is_empty() {
        return "None".to_string();
    }
    let blocks: Vec<String> = cases
        .iter()
        .enumerate()
        .map(|(i, case)| {
            format!(
                "[Case {} | similarity {:.3}]\nNote: {}\nPrior medications: {}\nPrescribed plan: {}",
                i + 1,
                case.score,
                flatten(&case.entry.text),
                case.entry.prior_drugs.render(),
                case.entry.associated_drugs.render(),
            )
        })
        .collect();
    blocks.join("\n\n")
}

/// Retrieved guideline chunks; `None` when nothing cleared the threshold.
pub fn render_guideline_chunks(chunks: &[RetrievedCase]) -> String {
    if chunks.is_empty() {
        return "None".to_string();
    }
    let blocks: Vec<String> = chunks
        .iter()
        .enumerate()
        .map(|(i, chunk)| {
            format!("[Guideline {} | similarity {:.3}]\n{}", i + 1, chunk.score, chunk.entry.text)
        })
        .collect();
    blocks.join("\n\n")
}

fn flatten(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// The focus-decision notice shown to the relevance judge.
pub fn render_focus_desc(keywords: &[String]) -> String {
    if keywords.is_empty() {
        "No focus keywords were extracted (stable visit).".to_string()
    } else {
        format!("Extracted keywords: {}", keywords.join("; "))
    }
}

/// The highest-priority focus called out in the refinement prompt.
pub fn render_primary_focus_block(primary_focus: Option<&str>) -> String {
    match primary_focus {
        Some(focus) => format!(
            "PRIMARY FOCUS (the key clinical change driving this refinement): >>> {focus} <<<"
        ),
        None => "PRIMARY FOCUS: None (stable visit).".to_string(),
    }
}

/// Compact current-state block for the summary prompt.
pub fn render_patient_state(visit: &Visit, active_history: &DrugSet) -> String {
    match visit.kind {
        VisitKind::Soap => format!(
            "Subjective: {}\nObjective: {}\nAssessment: {}\nActive History: {}",
            visit.subjective,
            visit.objective,
            visit.assessment,
            active_history.render(),
        ),
        VisitKind::Admission => format!(
            "Diagnoses: {}\nActive History: {}",
            visit.diagnoses_text(),
            active_history.render(),
        ),
    }
}
