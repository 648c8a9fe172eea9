//! The four-stage recommendation flow, stage by stage, plus the session
//! bookkeeping that records a replayable trace of every model exchange.

use crate::cohort::{DrugSet, Visit};
use crate::llm::{
    complete_with_repair, Backend, ChatMessage, CompletionRequest, CompletionResult,
    GenerationParams, LlmError, StageId,
};
use crate::prompts::parse::{
    parse_keywords_json, parse_refinement_json, parse_start_end_block, parse_tendency_json,
    validate_focus_substrings, ParsedRefinement,
};
use crate::prompts::{bind, template, Flavor};
use crate::retrieval::{DenseIndex, Embedder, FieldTag, RetrievalError, RetrievalParams, RetrievedCase};
use serde::{Deserialize, Serialize};

use super::runner::VisitTask;
use super::{
    audit_refinement, FocusQuery, PipelineError, PipelineOutput, RefinementResult, TendencySignal,
};

/// One recorded model exchange: enough to re-issue the request against any
/// backend, or to re-parse the recorded output, without touching a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub stage: StageId,
    pub params: GenerationParams,
    pub messages: Vec<ChatMessage>,
    pub raw_output: String,
    pub attempts: u32,
    pub latency_ms: u64,
}

/// Re-issue a traced request verbatim.
pub fn replay_stage(backend: &dyn Backend, trace: &StageTrace) -> Result<CompletionResult, LlmError> {
    backend.complete(&CompletionRequest {
        stage: trace.stage,
        messages: trace.messages.clone(),
        params: trace.params,
    })
}

/// Shared per-visit state: the backend handle, the generation profile, and
/// the accumulated trace.
pub struct StageSession<'a> {
    backend: &'a dyn Backend,
    params: GenerationParams,
    trace: Vec<StageTrace>,
}

impl<'a> StageSession<'a> {
    pub fn new(backend: &'a dyn Backend, params: GenerationParams) -> Self {
        StageSession { backend, params, trace: Vec::new() }
    }

    pub fn into_trace(self) -> Vec<StageTrace> {
        self.trace
    }

    /// Render the stage template, run the completion with format repair, and
    /// record the exchange. Exhausted repair attempts are recorded too (with
    /// the last raw output) before the error surfaces, so failures are
    /// diagnosable from the trace alone.
    pub fn run_stage<T>(
        &mut self,
        stage: StageId,
        flavor: Flavor,
        bindings: &[(&str, String)],
        reminder: &str,
        validate: impl FnMut(&str) -> Option<T>,
    ) -> Result<T, PipelineError> {
        let messages = template(stage, flavor)?.render(bindings)?;
        let request = CompletionRequest { stage, messages: messages.clone(), params: self.params };
        match complete_with_repair(self.backend, &request, reminder, validate) {
            Ok(done) => {
                self.trace.push(StageTrace {
                    stage,
                    params: self.params,
                    messages,
                    raw_output: done.raw_text,
                    attempts: done.attempts_used,
                    latency_ms: done.backend_latency.as_millis() as u64,
                });
                Ok(done.value)
            }
            Err(err) => {
                if let LlmError::MaxRetriesExceeded { attempts, ref last_text } = err {
                    self.trace.push(StageTrace {
                        stage,
                        params: self.params,
                        messages,
                        raw_output: last_text.clone(),
                        attempts,
                        latency_ms: 0,
                    });
                }
                Err(PipelineError::Stage { stage, source: err })
            }
        }
    }
}

fn note_bindings(visit: &Visit, active_history: &DrugSet) -> Vec<(&'static str, String)> {
    vec![
        ("subjective", visit.subjective.clone()),
        ("objective", visit.objective.clone()),
        ("assessment", visit.assessment.clone()),
        ("diagnoses", visit.diagnoses_text()),
        ("history", active_history.render()),
        ("medications", active_history.render()),
        ("active_history", active_history.render()),
    ]
}

/// Draft the initial prescription from the current note and history alone.
pub fn generate_initial_draft(
    session: &mut StageSession,
    visit: &Visit,
    history: &[Visit],
    active_history: &DrugSet,
) -> Result<DrugSet, PipelineError> {
    let flavor = Flavor::from(visit.kind);
    let mut bindings = note_bindings(visit, active_history);
    bindings.push(("recent_visit_history_text", bind::render_recent_visits(history)));
    session.run_stage(
        StageId::Initial,
        flavor,
        &bindings,
        "Output ONLY the [START]...[END] block with one 'drug | reason' per line and at least one drug.",
        |text| parse_start_end_block(text).ok().map(|d| d.drug_set()),
    )
}

/// Extract up to `cap` focus keywords that literally occur in the current
/// note. Parse failure after all repair attempts degrades to an empty list
/// (the conservative reading) instead of failing the visit.
pub fn extract_focus_queries(
    session: &mut StageSession,
    visit: &Visit,
    active_history: &DrugSet,
    cap: usize,
) -> Result<Vec<FocusQuery>, PipelineError> {
    let flavor = Flavor::from(visit.kind);
    let (text, sources): (String, Vec<(FieldTag, &str)>) = match flavor {
        Flavor::Soap => (
            format!(
                "Subjective: {}\nObjective: {}\nAssessment: {}",
                visit.subjective, visit.objective, visit.assessment
            ),
            vec![
                (FieldTag::Subjective, visit.subjective.as_str()),
                (FieldTag::Assessment, visit.assessment.as_str()),
            ],
        ),
        Flavor::Diagnosis => (visit.diagnoses_text(), Vec::new()),
    };
    let diagnoses_text = visit.diagnoses_text();
    let sources = if sources.is_empty() {
        vec![(FieldTag::DiagnosisList, diagnoses_text.as_str())]
    } else {
        sources
    };

    let bindings = [
        ("text", text),
        ("active_history", active_history.render()),
    ];
    let parsed = match session.run_stage(
        StageId::Focus,
        flavor,
        &bindings,
        "Return ONLY a JSON object of the form {\"keywords\": [...]} with at most 2 literal phrases from the text.",
        |text| parse_keywords_json(text, cap).ok(),
    ) {
        Ok(parsed) => parsed,
        Err(PipelineError::Stage { source: LlmError::MaxRetriesExceeded { .. }, .. }) => {
            eprintln!(
                "warning: focus extraction unparseable for patient visit; treating as stable"
            );
            return Ok(Vec::new());
        }
        Err(other) => return Err(other),
    };

    // Substring gate: keep keywords that literally occur in a source field,
    // labeling each with the first field (in priority order) containing it.
    let mut focuses: Vec<FocusQuery> = Vec::new();
    for keyword in &parsed.keywords {
        if focuses.iter().any(|f| f.text.eq_ignore_ascii_case(keyword)) {
            continue;
        }
        for (field, source_text) in &sources {
            if !validate_focus_substrings(std::slice::from_ref(keyword), source_text).is_empty() {
                focuses.push(FocusQuery { text: keyword.clone(), source_field: *field });
                break;
            }
        }
    }
    focuses.truncate(cap);
    Ok(focuses)
}

/// Nearest pool cases for one focus, routed to entries of the same field.
pub fn retrieve_similar(
    index: &DenseIndex,
    embedder: &dyn Embedder,
    focus: &FocusQuery,
    params: RetrievalParams,
) -> Result<Vec<RetrievedCase>, PipelineError> {
    if index.is_empty() {
        return Err(RetrievalError::EmptyIndex.into());
    }
    let query = embedder
        .embed(std::slice::from_ref(&focus.text))?
        .pop()
        .expect("one vector per text");
    Ok(index.search(&query, params.k, params.tau, Some(focus.source_field)))
}

/// Summarize what physicians did about this focus across the retrieved
/// cases. No cases means no evidence — the empty signal, without a model
/// call. Model-claimed additions are kept only when some retrieved case
/// actually added that drug (plan minus prior medications), so uncertainty
/// always collapses to "maintain".
pub fn analyze_tendency(
    session: &mut StageSession,
    visit: &Visit,
    focus: &FocusQuery,
    cases: Vec<RetrievedCase>,
) -> Result<TendencySignal, PipelineError> {
    if cases.is_empty() {
        return Ok(TendencySignal::empty(focus.clone(), cases));
    }
    let flavor = Flavor::from(visit.kind);
    let observed_additions = cases.iter().fold(DrugSet::new(), |acc, case| {
        acc.union(&case.entry.associated_drugs.difference(&case.entry.prior_drugs))
    });

    let rendered_cases = bind::render_similar_cases(&cases);
    let bindings = [
        ("symptoms", visit.subjective.clone()),
        ("diagnoses", visit.diagnoses_text()),
        ("focus_txt", focus.text.clone()),
        ("rag_cases", rendered_cases.clone()),
        ("rag_patients", rendered_cases),
    ];
    let parsed = match session.run_stage(
        StageId::Tendency,
        flavor,
        &bindings,
        "Return ONLY a JSON object with \"dominant_pattern\", \"common_additions\", and \"reasoning\".",
        |text| parse_tendency_json(text).ok(),
    ) {
        Ok(parsed) => parsed,
        Err(PipelineError::Stage { source: LlmError::MaxRetriesExceeded { .. }, .. }) => {
            eprintln!("warning: tendency analysis unparseable for focus {:?}; treating as no evidence", focus.text);
            return Ok(TendencySignal::empty(focus.clone(), cases));
        }
        Err(other) => return Err(other),
    };

    let claimed: DrugSet = parsed.common_additions.iter().map(String::as_str).collect();
    Ok(TendencySignal {
        focus: focus.clone(),
        dominant_pattern: parsed.dominant_pattern,
        common_additions: claimed.intersection(&observed_additions),
        reasoning: parsed.reasoning,
        retrieved: cases,
    })
}

/// Ask the model to apply the filtering algorithm. Its JSON is parsed here
/// and then re-derived deterministically by [`audit_refinement`]; the parse
/// exists to capture the proposal and its description.
pub fn refine_prescription_llm(
    session: &mut StageSession,
    visit: &Visit,
    history: &[Visit],
    active_history: &DrugSet,
    initial_draft: &DrugSet,
    tendencies: &[TendencySignal],
) -> Result<ParsedRefinement, PipelineError> {
    let flavor = Flavor::from(visit.kind);
    let digests: Vec<bind::TendencyDigest> = tendencies.iter().map(tendency_digest).collect();
    let mut bindings = note_bindings(visit, active_history);
    bindings.push(("initial_prescription", initial_draft.render()));
    bindings.push((
        "primary_focus_block",
        bind::render_primary_focus_block(tendencies.first().map(|t| t.focus.text.as_str())),
    ));
    bindings.push(("rag_focus_tendency", bind::render_tendency_digests(&digests)));
    bindings.push(("recent_visit_history_text", bind::render_recent_visits(history)));
    session.run_stage(
        StageId::Refine,
        flavor,
        &bindings,
        "Return ONLY the JSON object with \"final_prescription\", \"audit_log\" (KEPT/ADDED/REMOVED), and \"final_description\".",
        |text| parse_refinement_json(text).ok(),
    )
}

fn tendency_digest(signal: &TendencySignal) -> bind::TendencyDigest {
    bind::TendencyDigest {
        focus: signal.focus.text.clone(),
        dominant_pattern: signal.dominant_pattern.clone(),
        common_additions: signal.common_additions.iter().map(str::to_string).collect(),
        reasoning: signal.reasoning.clone(),
    }
}

fn audit_digest(entry: &super::AuditEntry) -> bind::AuditDigest {
    bind::AuditDigest { action: entry.action, drug: entry.drug.clone() }
}

/// The four-section explainable summary. The output must name every drug in
/// the final prescription inside its Prescribe section; anything less is
/// rejected and repaired.
pub fn generate_summary(
    session: &mut StageSession,
    visit: &Visit,
    active_history: &DrugSet,
    initial_draft: &DrugSet,
    tendencies: &[TendencySignal],
    refinement: &RefinementResult,
) -> Result<String, PipelineError> {
    let flavor = Flavor::from(visit.kind);
    let digests: Vec<bind::TendencyDigest> = tendencies.iter().map(tendency_digest).collect();
    let audit: Vec<bind::AuditDigest> = refinement.audit_log.iter().map(audit_digest).collect();
    let bindings = [
        ("patient_state", bind::render_patient_state(visit, active_history)),
        ("initial_prescription", initial_draft.render()),
        ("rag_tendency_by_focus", bind::render_tendency_digests(&digests)),
        ("audit_log", bind::render_audit_digests(&audit)),
        ("final_answer_list", refinement.final_prescription.render()),
    ];
    let final_set = refinement.final_prescription.clone();
    session.run_stage(
        StageId::Summary,
        flavor,
        &bindings,
        "Use the exact four sections in order (* Patient summary *, * Key word *, * Clinical Evidence *, * Prescribe *) and cover every final drug under * Prescribe *.",
        move |text| summary_is_complete(text, &final_set).then(|| text.to_string()),
    )
}

/// Structural contract of the summary: the four section headers in order,
/// and every final drug named in the Prescribe section.
pub fn summary_is_complete(text: &str, final_prescription: &DrugSet) -> bool {
    const SECTIONS: [&str; 4] =
        ["* Patient summary *", "* Key word *", "* Clinical Evidence *", "* Prescribe *"];
    let mut pos = 0;
    for section in SECTIONS {
        match text[pos..].find(section) {
            Some(offset) => pos += offset + section.len(),
            None => return false,
        }
    }
    let prescribe = text[pos..].to_lowercase();
    final_prescription.iter().all(|drug| prescribe.contains(drug))
}

/// Retrieval and focus knobs for the full pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PaceConfig {
    pub retrieval: RetrievalParams,
    pub focus_cap: usize,
}

impl Default for PaceConfig {
    fn default() -> Self {
        PaceConfig { retrieval: RetrievalParams::default(), focus_cap: 2 }
    }
}

/// The full flow for one visit: draft, focus, per-focus retrieval and
/// tendency, audited refinement, summary. An empty focus list short-circuits
/// retrieval and refinement entirely — the audit then reduces to keeping the
/// active history (the conservative anchor).
pub fn run_pace(
    backend: &dyn Backend,
    params: GenerationParams,
    index: &DenseIndex,
    embedder: &dyn Embedder,
    task: &VisitTask,
    config: &PaceConfig,
) -> Result<PipelineOutput, PipelineError> {
    let mut session = StageSession::new(backend, params);
    let visit = &task.visit;
    let initial_draft =
        generate_initial_draft(&mut session, visit, &task.history, &task.active_history)?;
    let focuses =
        extract_focus_queries(&mut session, visit, &task.active_history, config.focus_cap)?;

    let mut tendencies: Vec<TendencySignal> = Vec::new();
    let refinement = if focuses.is_empty() {
        audit_refinement(&task.active_history, &initial_draft, &[], None)
    } else {
        for focus in &focuses {
            let cases = retrieve_similar(index, embedder, focus, config.retrieval)?;
            tendencies.push(analyze_tendency(&mut session, visit, focus, cases)?);
        }
        let proposed = refine_prescription_llm(
            &mut session,
            visit,
            &task.history,
            &task.active_history,
            &initial_draft,
            &tendencies,
        )?;
        audit_refinement(&task.active_history, &initial_draft, &tendencies, Some(&proposed))
    };

    let summary = generate_summary(
        &mut session,
        visit,
        &task.active_history,
        &initial_draft,
        &tendencies,
        &refinement,
    )?;

    Ok(PipelineOutput {
        patient_id: task.patient_id.clone(),
        visit_index: task.visit_index,
        flavor: Flavor::from(visit.kind),
        gold: task.gold.clone(),
        active_history: task.active_history.clone(),
        initial_draft,
        focuses,
        tendencies,
        refinement,
        summary,
        retrieved: Vec::new(),
        trace: session.into_trace(),
    })
}
