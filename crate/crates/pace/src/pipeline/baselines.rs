//! The four comparison flows. Each produces the same manifest record type
//! as the main pipeline so downstream scoring is method-agnostic: the
//! prediction always lives in `refinement.final_prescription`.

use crate::cohort::DrugSet;
use crate::llm::{Backend, GenerationParams, StageId};
use crate::prompts::parse::{extract_tag, parse_answer_list, parse_start_end_block};
use crate::prompts::{bind, Flavor};
use crate::retrieval::{
    rank_by_bigram_jaccard, select_survivors, DenseIndex, Embedder, FieldTag, IndexEntry,
    RetrievedCase,
};
use serde::{Deserialize, Serialize};

use super::runner::VisitTask;
use super::stages::{generate_initial_draft, StageSession};
use super::{AuditEntry, PipelineError, PipelineOutput, RefinementResult};

/// How many ranked cases are carried in the manifest and shown in the
/// prompt; matches the largest k the precision-at-k curves read.
pub const TREATRAG_CASE_CAP: usize = 7;

/// Guideline retrieval knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidelineConfig {
    pub k: usize,
    pub tau: f64,
}

impl Default for GuidelineConfig {
    fn default() -> Self {
        GuidelineConfig { k: 3, tau: 0.3 }
    }
}

fn baseline_output(
    task: &VisitTask,
    initial_draft: DrugSet,
    prediction: DrugSet,
    retrieved: Vec<RetrievedCase>,
    description: &str,
    session: StageSession,
) -> PipelineOutput {
    PipelineOutput {
        patient_id: task.patient_id.clone(),
        visit_index: task.visit_index,
        flavor: Flavor::from(task.visit.kind),
        gold: task.gold.clone(),
        active_history: task.active_history.clone(),
        initial_draft,
        focuses: Vec::new(),
        tendencies: Vec::new(),
        refinement: RefinementResult {
            final_prescription: prediction,
            audit_log: Vec::<AuditEntry>::new(),
            description: description.to_string(),
            degenerate_empty: false,
            divergences: 0,
        },
        summary: String::new(),
        retrieved,
        trace: session.into_trace(),
    }
}

/// The draft alone, with no external information.
pub fn run_zero_shot(
    backend: &dyn Backend,
    params: GenerationParams,
    task: &VisitTask,
) -> Result<PipelineOutput, PipelineError> {
    let mut session = StageSession::new(backend, params);
    let draft =
        generate_initial_draft(&mut session, &task.visit, &task.history, &task.active_history)?;
    Ok(baseline_output(
        task,
        draft.clone(),
        draft,
        Vec::new(),
        "draft from current note and history alone",
        session,
    ))
}

/// Ground the draft in retrieved guideline chunks: top-k at a permissive
/// threshold, queried with the whole current note.
pub fn run_guideline_rag(
    backend: &dyn Backend,
    params: GenerationParams,
    guideline_index: &DenseIndex,
    embedder: &dyn Embedder,
    task: &VisitTask,
    config: &GuidelineConfig,
) -> Result<PipelineOutput, PipelineError> {
    let visit = &task.visit;
    let flavor = Flavor::from(visit.kind);
    let query_text = match flavor {
        Flavor::Soap => format!(
            "Subjective: {}\nObjective: {}\nAssessment: {}",
            visit.subjective, visit.objective, visit.assessment
        ),
        Flavor::Diagnosis => visit.diagnoses_text(),
    };
    let query = embedder
        .embed(std::slice::from_ref(&query_text))?
        .pop()
        .expect("one vector per text");
    let chunks = guideline_index.search(&query, config.k, config.tau, Some(FieldTag::GuidelineChunk));

    let mut session = StageSession::new(backend, params);
    let mut bindings = vec![
        ("subjective", visit.subjective.clone()),
        ("objective", visit.objective.clone()),
        ("assessment", visit.assessment.clone()),
        ("diagnoses", visit.diagnoses_text()),
        ("history", task.active_history.render()),
        ("medications", task.active_history.render()),
        ("similar_guidelines", bind::render_guideline_chunks(&chunks)),
    ];
    bindings.push(("recent_visit_history_text", bind::render_recent_visits(&task.history)));
    let draft = session.run_stage(
        StageId::Guideline,
        flavor,
        &bindings,
        "Output ONLY the [START]...[END] block with one 'drug | reason' per line and at least one drug.",
        |text| parse_start_end_block(text).ok().map(|d| d.drug_set()),
    )?;
    Ok(baseline_output(
        task,
        draft.clone(),
        draft,
        chunks,
        "draft grounded in retrieved guideline chunks",
        session,
    ))
}

/// Whole-note lexical retrieval: bigram-Jaccard ranking over pool cases,
/// adaptive filtering, and a prompt that shows the surviving cases. The
/// manifest keeps the top ranked cases before filtering — that ranking is
/// what the retrieval-precision curves read.
pub fn run_treatrag(
    backend: &dyn Backend,
    params: GenerationParams,
    task: &VisitTask,
    candidates: &[IndexEntry],
) -> Result<PipelineOutput, PipelineError> {
    let visit = &task.visit;
    let flavor = Flavor::from(visit.kind);
    let query = match flavor {
        Flavor::Soap if !visit.assessment.trim().is_empty() => visit.assessment.clone(),
        Flavor::Soap => visit.subjective.clone(),
        Flavor::Diagnosis => visit.diagnoses_text(),
    };
    let wanted_tag = match flavor {
        Flavor::Soap => FieldTag::Assessment,
        Flavor::Diagnosis => FieldTag::DiagnosisList,
    };
    let matched: Vec<&IndexEntry> = {
        let tagged: Vec<&IndexEntry> =
            candidates.iter().filter(|e| e.field_tag == wanted_tag).collect();
        if tagged.is_empty() {
            candidates.iter().filter(|e| e.field_tag == FieldTag::Subjective).collect()
        } else {
            tagged
        }
    };
    let texts: Vec<String> = matched.iter().map(|e| e.text.clone()).collect();
    let ranked = rank_by_bigram_jaccard(&query, &texts);
    let survivors = select_survivors(&ranked);

    let as_retrieved = |scored: &crate::retrieval::ScoredCandidate| RetrievedCase {
        entry_index: scored.index,
        score: scored.score,
        entry: matched[scored.index].clone(),
    };
    let retrieved: Vec<RetrievedCase> =
        ranked.iter().take(TREATRAG_CASE_CAP).map(as_retrieved).collect();
    let prompt_cases: Vec<RetrievedCase> =
        survivors.iter().take(TREATRAG_CASE_CAP).map(as_retrieved).collect();

    let mut session = StageSession::new(backend, params);
    let bindings = [
        ("subjective", visit.subjective.clone()),
        ("objective", visit.objective.clone()),
        ("assessment", visit.assessment.clone()),
        ("diagnoses", visit.diagnoses_text()),
        ("history", task.active_history.render()),
        ("medications", task.active_history.render()),
        ("recent_visit_history_text", bind::render_recent_visits(&task.history)),
        ("similar_cases", bind::render_similar_cases(&prompt_cases)),
    ];
    let draft = session.run_stage(
        StageId::Treatrag,
        flavor,
        &bindings,
        "Output ONLY the [START]...[END] block with one 'drug | reason' per line and at least one drug.",
        |text| parse_start_end_block(text).ok().map(|d| d.drug_set()),
    )?;
    Ok(baseline_output(
        task,
        draft.clone(),
        draft,
        retrieved,
        "draft informed by lexically similar cases",
        session,
    ))
}

/// Three chained completions: pose a reflective question about the draft,
/// answer it, then emit the refined list inside an `<Answer>` tag.
pub fn run_medreflect(
    backend: &dyn Backend,
    params: GenerationParams,
    task: &VisitTask,
) -> Result<PipelineOutput, PipelineError> {
    let visit = &task.visit;
    let flavor = Flavor::from(visit.kind);
    let mut session = StageSession::new(backend, params);
    let draft =
        generate_initial_draft(&mut session, visit, &task.history, &task.active_history)?;

    let previous_prescription = if task.history.is_empty() {
        "None".to_string()
    } else {
        task.history
            .iter()
            .enumerate()
            .map(|(i, v)| format!("{}) {}", i + 1, v.ground_truth.render()))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let mut bindings = vec![
        ("subjective", visit.subjective.clone()),
        ("objective", visit.objective.clone()),
        ("assessment", visit.assessment.clone()),
        ("diagnoses", visit.diagnoses_text()),
        ("active_history", task.active_history.render()),
        ("previous_prescription", previous_prescription),
        ("initial_prescription", draft.render()),
    ];

    let question = session.run_stage(
        StageId::MedreflectQ,
        flavor,
        &bindings,
        "Respond with exactly <Reflective Question>your question</Reflective Question>.",
        |text| extract_tag(text, "Reflective Question").ok(),
    )?;

    bindings.push(("reflective_question", question.clone()));
    let answer = session.run_stage(
        StageId::MedreflectA,
        flavor,
        &bindings,
        "Respond with exactly <Reflective Answer>your answer</Reflective Answer>.",
        |text| extract_tag(text, "Reflective Answer").ok(),
    )?;

    bindings.push(("reflective_answer", answer));
    let prediction = session.run_stage(
        StageId::MedreflectR,
        flavor,
        &bindings,
        "Respond with exactly <Answer>:[Drug A, Drug B]</Answer>.",
        |text| parse_answer_list(text).ok(),
    )?;

    Ok(baseline_output(
        task,
        draft,
        prediction,
        Vec::new(),
        "draft refined through a reflective question-answer pass",
        session,
    ))
}
