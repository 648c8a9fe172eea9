//! Pipeline orchestration: the four-stage recommendation flow, the four
//! baseline flows, and the deterministic refinement audit that re-derives
//! the final prescription regardless of how compliant the model output was.

pub mod baselines;
pub mod runner;
pub mod stages;

pub use baselines::{run_guideline_rag, run_medreflect, run_treatrag, run_zero_shot, GuidelineConfig};
pub use runner::{
    case_entries, execute_run, manifest_path, read_manifest, visit_tasks, Method, RunPlan,
    RunSummary, VisitTask,
};
pub use stages::{
    analyze_tendency, extract_focus_queries, generate_initial_draft, generate_summary,
    refine_prescription_llm, replay_stage, retrieve_similar, run_pace, PaceConfig,
    StageSession, StageTrace,
};

use crate::cohort::DrugSet;
use crate::llm::{LlmError, StageId};
use crate::prompts::parse::{AuditAction, ParsedRefinement};
use crate::prompts::{Flavor, PromptError};
use crate::retrieval::{FieldTag, RetrievalError, RetrievedCase};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: StageId,
        #[source]
        source: LlmError,
    },
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("retrieved case leaked from test patient {patient_id}")]
    PoolLeak { patient_id: String },
    #[error("run directory {0} is locked by another process (remove the .lock file if stale)")]
    Locked(PathBuf),
    #[error("guideline retrieval needs a guideline index but none was supplied")]
    MissingGuidelineIndex,
    #[error("manifest line {line}: {source}")]
    ManifestLine {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One retrieval key: a literal substring of the current note plus the field
/// it was found in, which routes retrieval to same-field entries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FocusQuery {
    pub text: String,
    pub source_field: FieldTag,
}

/// What similar patients' physicians did about one focus: the dominant
/// action and the drugs they commonly added, with the supporting cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TendencySignal {
    pub focus: FocusQuery,
    pub dominant_pattern: String,
    pub common_additions: DrugSet,
    pub reasoning: String,
    pub retrieved: Vec<RetrievedCase>,
}

impl TendencySignal {
    /// The conservative no-evidence signal for a focus.
    pub fn empty(focus: FocusQuery, retrieved: Vec<RetrievedCase>) -> Self {
        TendencySignal {
            focus,
            dominant_pattern: "MAINTAIN".to_string(),
            common_additions: DrugSet::new(),
            reasoning: String::new(),
            retrieved,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub action: AuditAction,
    pub drug: String,
    pub justification: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementResult {
    pub final_prescription: DrugSet,
    pub audit_log: Vec<AuditEntry>,
    pub description: String,
    /// True when the audit produced an empty set with no fallback available
    /// (no history and no supported additions). Scored as-is, never patched.
    pub degenerate_empty: bool,
    /// Size of the symmetric difference between the model's proposed final
    /// set and the audited one; 0 when no proposal was consulted.
    pub divergences: usize,
}

/// Everything one visit produced, trace included; the manifest line type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub patient_id: String,
    pub visit_index: usize,
    pub flavor: Flavor,
    pub gold: DrugSet,
    pub active_history: DrugSet,
    pub initial_draft: DrugSet,
    pub focuses: Vec<FocusQuery>,
    pub tendencies: Vec<TendencySignal>,
    pub refinement: RefinementResult,
    pub summary: String,
    /// Method-level ranked retrieval (guideline chunks, similarity-ranked
    /// cases) for methods that retrieve outside the per-focus loop.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub retrieved: Vec<RetrievedCase>,
    pub trace: Vec<StageTrace>,
}

impl PipelineOutput {
    /// The set this visit is scored on.
    pub fn prediction(&self) -> &DrugSet {
        &self.refinement.final_prescription
    }
}

fn keep_justification() -> String {
    "active history is always maintained".to_string()
}

/// Deterministic re-derivation of the refinement algorithm. The model's
/// proposal is advisory: history is always kept, a draft drug not in history
/// survives only when some tendency lists it as a common addition, proposed
/// extra additions are admitted only under the same gate, and an empty
/// result falls back to the first supported addition (focus order, then
/// label order). Total — never errors.
pub fn audit_refinement(
    active_history: &DrugSet,
    initial_draft: &DrugSet,
    tendencies: &[TendencySignal],
    proposed: Option<&ParsedRefinement>,
) -> RefinementResult {
    let gate: DrugSet = tendencies
        .iter()
        .fold(DrugSet::new(), |acc, t| acc.union(&t.common_additions));

    let mut final_set = DrugSet::new();
    let mut audit_log: Vec<AuditEntry> = Vec::new();

    for drug in active_history.iter() {
        final_set.insert(drug);
        audit_log.push(AuditEntry {
            action: AuditAction::Kept,
            drug: drug.to_string(),
            justification: keep_justification(),
        });
    }

    for drug in initial_draft.difference(active_history).iter() {
        if gate.contains(drug) {
            final_set.insert(drug);
            audit_log.push(AuditEntry {
                action: AuditAction::Added,
                drug: drug.to_string(),
                justification: added_justification(drug, tendencies),
            });
        } else {
            audit_log.push(AuditEntry {
                action: AuditAction::Removed,
                drug: drug.to_string(),
                justification: "no retrieved tendency supports this draft entry".to_string(),
            });
        }
    }

    // Proposed additions beyond the draft pass the same gate; anything the
    // model invented without support is ignored.
    if let Some(parsed) = proposed {
        for entry in &parsed.audit_log {
            if entry.action != AuditAction::Added {
                continue;
            }
            let drug = crate::cohort::canonicalize_drug(&entry.drug);
            if drug.is_empty() || final_set.contains(&drug) || !gate.contains(&drug) {
                continue;
            }
            if audit_log.iter().any(|e| e.drug == drug) {
                continue; // already adjudicated (e.g. REMOVED from the draft)
            }
            final_set.insert(&drug);
            audit_log.push(AuditEntry {
                action: AuditAction::Added,
                drug: drug.clone(),
                justification: added_justification(&drug, tendencies),
            });
        }
    }

    let mut degenerate_empty = false;
    if final_set.is_empty() {
        match first_gated(tendencies) {
            Some(pick) => {
                final_set.insert(&pick);
                audit_log.push(AuditEntry {
                    action: AuditAction::Added,
                    drug: pick,
                    justification: "empty result fallback: first supported addition".to_string(),
                });
            }
            None => degenerate_empty = true,
        }
    }

    let divergences = proposed
        .map(|parsed| {
            let proposed_set: DrugSet =
                parsed.final_prescription.iter().map(String::as_str).collect();
            proposed_set.difference(&final_set).len() + final_set.difference(&proposed_set).len()
        })
        .unwrap_or(0);

    let description = proposed
        .map(|p| p.final_description.trim())
        .filter(|d| !d.is_empty())
        .map(str::to_string)
        .unwrap_or_else(|| {
            let kept = audit_log.iter().filter(|e| e.action == AuditAction::Kept).count();
            let added = audit_log.iter().filter(|e| e.action == AuditAction::Added).count();
            let removed = audit_log.iter().filter(|e| e.action == AuditAction::Removed).count();
            format!(
                "Maintained {kept} active medication(s); admitted {added} supported addition(s); \
                 removed {removed} unsupported draft entr(y/ies)."
            )
        });

    RefinementResult {
        final_prescription: final_set,
        audit_log,
        description,
        degenerate_empty,
        divergences,
    }
}

/// The fallback pick: first non-empty common addition walking tendencies in
/// focus order (labels within one tendency are already in stable order).
fn first_gated(tendencies: &[TendencySignal]) -> Option<String> {
    tendencies
        .iter()
        .flat_map(|t| t.common_additions.iter())
        .next()
        .map(str::to_string)
}

fn added_justification(drug: &str, tendencies: &[TendencySignal]) -> String {
    match tendencies.iter().find(|t| t.common_additions.contains(drug)) {
        Some(t) => format!(
            "commonly added for \"{}\" in retrieved similar cases",
            t.focus.text
        ),
        None => "supported by retrieved tendency evidence".to_string(),
    }
}
