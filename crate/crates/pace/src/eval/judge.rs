//! LLM-judged keyword relevance: a greedy-decoding evaluator scores, 1–5,
//! how well the extracted focus keywords (or the decision to extract none)
//! capture the clinically salient change behind each visit's prescription.

use super::{sample_std, EvalError};
use crate::cohort::DrugSet;
use crate::llm::{complete_with_repair, Backend, CompletionRequest, GenerationParams, StageId};
use crate::pipeline::{FocusQuery, VisitTask};
use crate::prompts::bind::{render_focus_desc, render_recent_visits};
use crate::prompts::parse::parse_judge_score;
use crate::prompts::{template, Flavor};
use serde::{Deserialize, Serialize};

const JUDGE_REMINDER: &str = "Answer with the exact headers: a 'Relevance (1-5):' line carrying \
     one integer from 1 to 5, then 'Explanation:' and 'Summary:' lines.";

/// Everything the judge sees about one visit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeItem {
    pub flavor: Flavor,
    /// The current note (or diagnosis list) under evaluation.
    pub patient_input: String,
    /// Rendered recent-visit history.
    pub history: String,
    /// The prescription actually issued at this visit.
    pub gold: DrugSet,
    /// Extracted focus keywords; empty means "stable, nothing extracted".
    pub focuses: Vec<String>,
}

impl JudgeItem {
    pub fn from_task(task: &VisitTask, focuses: &[FocusQuery]) -> Self {
        let flavor = Flavor::from(task.visit.kind);
        let patient_input = match flavor {
            Flavor::Soap => format!(
                "Subjective: {}\nObjective: {}\nAssessment: {}",
                task.visit.subjective, task.visit.objective, task.visit.assessment
            ),
            Flavor::Diagnosis => format!("Diagnoses: {}", task.visit.diagnoses_text()),
        };
        JudgeItem {
            flavor,
            patient_input,
            history: render_recent_visits(&task.history),
            gold: task.gold.clone(),
            focuses: focuses.iter().map(|f| f.text.clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub score: u8,
    /// The judge's full response, explanation included.
    pub raw: String,
}

/// Score one item with the judge template at temperature 0.
pub fn judge_item(backend: &dyn Backend, item: &JudgeItem) -> Result<JudgeVerdict, EvalError> {
    let tpl = template(StageId::Judge, item.flavor)?;
    let messages = tpl.render(&[
        ("patient_input", item.patient_input.clone()),
        ("history_soap", item.history.clone()),
        ("gt_txt", item.gold.render()),
        ("focus_desc", render_focus_desc(&item.focuses)),
    ])?;
    let request = CompletionRequest::new(StageId::Judge, messages, GenerationParams::judge_profile());
    let done = complete_with_repair(backend, &request, JUDGE_REMINDER, |text| {
        parse_judge_score(text).ok()
    })?;
    Ok(JudgeVerdict {
        score: done.value,
        raw: done.raw_text,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeSummary {
    pub scores: Vec<u8>,
    pub mean: f64,
    pub sd: f64,
}

/// Score a batch and summarize: mean and sample standard deviation.
pub fn judge_batch(backend: &dyn Backend, items: &[JudgeItem]) -> Result<JudgeSummary, EvalError> {
    let scores: Vec<u8> = items
        .iter()
        .map(|item| judge_item(backend, item).map(|v| v.score))
        .collect::<Result<_, _>>()?;
    let values: Vec<f64> = scores.iter().map(|&s| s as f64).collect();
    let mean = if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    };
    Ok(JudgeSummary {
        sd: sample_std(&values),
        scores,
        mean,
    })
}
