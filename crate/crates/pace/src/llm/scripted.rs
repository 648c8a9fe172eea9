//! Deterministic stand-in for a chat model, driven by the synthetic world.
//!
//! The backend answers each stage the way a clinician who knows the synthetic
//! symptom→drug world would: drafts start from the listed medications and add
//! the indicated drug plus the world's characteristic wrong guesses, focus
//! extraction returns the acute phrases verbatim, tendency analysis reads the
//! rendered case blocks and reports the majority addition, and refinement
//! applies the audit algorithm faithfully. Everything is a pure function of
//! the request (stage marker, message text, params), so runs replay
//! byte-for-byte.
//!
//! An optional rule table, checked before the builtin logic, lets tests plant
//! specific responses (malformed output, divergent refinements, canned
//! guideline advice) without giving up determinism: first matching rule wins.

use super::{Backend, CompletionRequest, CompletionResult, LlmError, StageId};
use crate::cohort::{parse_plan_labels, DrugSet, SynthOracle};
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Duration;

/// One planted response. Empty `match_text` matches any prompt of the stage;
/// `stage: None` matches any stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(default)]
    pub stage: Option<StageId>,
    #[serde(default, rename = "match")]
    pub match_text: String,
    pub response: String,
}

#[derive(Debug, Deserialize)]
struct ScriptTableFile {
    rules: Vec<ScriptRule>,
}

/// Mirror of the tendency line objects the pipeline renders into refine and
/// summary prompts. Field names are part of the prompt-text contract.
#[derive(Debug, Deserialize)]
struct TendencyLine {
    focus: String,
    #[allow(dead_code)]
    dominant_pattern: String,
    common_additions: Vec<String>,
    #[allow(dead_code)]
    reasoning: String,
}

/// Mirror of the audit entries rendered into summary prompts.
#[derive(Debug, Deserialize)]
struct AuditLine {
    action: String,
    drug: String,
}

pub struct ScriptedBackend {
    oracle: SynthOracle,
    rules: Vec<ScriptRule>,
    simulate_sampling: bool,
}

impl ScriptedBackend {
    pub fn new(oracle: SynthOracle) -> Self {
        ScriptedBackend {
            oracle,
            rules: Vec::new(),
            simulate_sampling: false,
        }
    }

    pub fn with_rules(mut self, rules: Vec<ScriptRule>) -> Self {
        self.rules.extend(rules);
        self
    }

    pub fn with_script_file(self, path: &Path) -> Result<Self, LlmError> {
        let raw = std::fs::read_to_string(path)?;
        let table: ScriptTableFile = serde_json::from_str(&raw)?;
        Ok(self.with_rules(table.rules))
    }

    /// Make responses vary with the request seed whenever temperature > 0,
    /// the way real sampling would — while staying reproducible per seed.
    pub fn with_simulated_sampling(mut self) -> Self {
        self.simulate_sampling = true;
        self
    }

    fn sampling_suffix(&self, request: &CompletionRequest, user: &str) -> Option<String> {
        if !self.simulate_sampling || request.params.temperature <= 0.0 {
            return None;
        }
        let mut hasher = Sha256::new();
        hasher.update(request.params.seed.to_le_bytes());
        hasher.update(request.stage.as_str().as_bytes());
        hasher.update(user.as_bytes());
        let digest = hasher.finalize();
        Some(format!(
            "\n\n[sampling variant {:02x}{:02x}{:02x}{:02x}]",
            digest[0], digest[1], digest[2], digest[3]
        ))
    }

    fn gap(&self, stage: StageId, detail: impl Into<String>) -> LlmError {
        LlmError::ScriptGap {
            stage,
            detail: detail.into(),
        }
    }

    /// Every drug the world's unaided drafter may wrongly reach for.
    fn noise_pool(&self) -> DrugSet {
        self.oracle
            .draft_noise
            .values()
            .flatten()
            .map(String::as_str)
            .collect()
    }

    fn answer_initial(&self, user: &str) -> Result<String, LlmError> {
        let note = line_value(user, "Clinical Note:")
            .or_else(|| line_value(user, "- Diagnoses:"))
            .ok_or_else(|| self.gap(StageId::Initial, "no clinical note line"))?;
        let history = line_value(user, "Most Recent Medications:")
            .map(|v| parse_drug_list(&v))
            .unwrap_or_default();

        let mut seen = history.clone();
        let mut lines: Vec<String> = history
            .iter()
            .map(|d| format!("{d} | continue current regimen"))
            .collect();
        for symptom in self.oracle.symptoms_in(&note) {
            if let Some(drug) = self.oracle.indicated(symptom) {
                if seen.insert(drug) {
                    lines.push(format!("{drug} | treats {symptom}"));
                }
            }
            for noise in self.oracle.draft_noise.get(symptom).into_iter().flatten() {
                if seen.insert(noise) {
                    lines.push(format!("{noise} | empiric consideration"));
                }
            }
        }
        if lines.is_empty() {
            lines.push("amantadine sulfate | conservative default".to_string());
        }
        Ok(format!("[START]\n{}\n[END]", lines.join("\n")))
    }

    fn answer_focus(&self, user: &str) -> String {
        let keywords: Vec<&str> = self.oracle.symptoms_in(user).into_iter().take(2).collect();
        serde_json::json!({ "keywords": keywords }).to_string()
    }

    fn answer_tendency(&self, user: &str) -> String {
        let cases = parse_case_blocks(user);
        let n = cases.len();
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for (prior, plan) in &cases {
            for drug in plan.difference(prior).iter() {
                *counts.entry(drug.to_string()).or_default() += 1;
            }
        }
        let additions: Vec<String> = counts
            .into_iter()
            .filter(|&(_, c)| 2 * c > n)
            .map(|(d, _)| d)
            .collect();
        if additions.is_empty() {
            serde_json::json!({
                "dominant_pattern": "MAINTAIN",
                "common_additions": [],
                "reasoning": "the similar cases show no consistent new drug for this focus"
            })
            .to_string()
        } else {
            serde_json::json!({
                "dominant_pattern": "ADD",
                "common_additions": additions,
                "reasoning": "most similar cases added these drugs for the focus"
            })
            .to_string()
        }
    }

    fn answer_refine(&self, user: &str) -> Result<String, LlmError> {
        let history = line_value(user, "Active History (Currently taking. ALWAYS KEEP THESE):")
            .map(|v| parse_drug_list(&v))
            .ok_or_else(|| self.gap(StageId::Refine, "no active-history line"))?;
        let draft = line_value(
            user,
            "Initial Draft Prescription (WARNING: This is just a guess. Default action is REMOVE unless proven by RAG):",
        )
        .map(|v| parse_drug_list(&v))
        .ok_or_else(|| self.gap(StageId::Refine, "no draft line"))?;
        let tendencies_raw = line_value(
            user,
            "RAG Focus Tendencies (what the DB returned for those/similar symptoms; ordered by priority):",
        )
        .ok_or_else(|| self.gap(StageId::Refine, "no tendencies line"))?;
        let tendencies: Vec<TendencyLine> = serde_json::from_str(&tendencies_raw)
            .map_err(|e| self.gap(StageId::Refine, format!("unreadable tendencies: {e}")))?;

        // Gated additions in focus order, then the order listed per focus.
        let mut gated: Vec<String> = Vec::new();
        for t in &tendencies {
            for d in &t.common_additions {
                let canon = crate::cohort::canonicalize_drug(d);
                if !canon.is_empty() && !gated.contains(&canon) {
                    gated.push(canon);
                }
            }
        }

        let mut final_list: Vec<String> = Vec::new();
        let mut audit: Vec<serde_json::Value> = Vec::new();
        for d in history.iter() {
            final_list.push(d.to_string());
            audit.push(serde_json::json!({ "action": "KEPT", "drug": d }));
        }
        for d in draft.iter() {
            if history.contains(d) {
                continue;
            }
            if gated.iter().any(|g| g == d) {
                final_list.push(d.to_string());
                audit.push(serde_json::json!({ "action": "ADDED", "drug": d }));
            } else {
                audit.push(serde_json::json!({ "action": "REMOVED", "drug": d }));
            }
        }
        if final_list.is_empty() {
            if let Some(pick) = gated.first() {
                final_list.push(pick.clone());
                audit.push(serde_json::json!({ "action": "ADDED", "drug": pick }));
            }
        }

        Ok(serde_json::json!({
            "final_prescription": final_list,
            "audit_log": audit,
            "final_description":
                "Active history preserved; draft additions admitted only with retrieval support."
        })
        .to_string())
    }

    fn answer_summary(&self, user: &str) -> Result<String, LlmError> {
        let final_line = value_after_line(user, "**Final Recommended Medications:**")
            .ok_or_else(|| self.gap(StageId::Summary, "no final medications block"))?;
        let final_drugs = parse_drug_list(&final_line);
        let audit: Vec<AuditLine> = value_after_line(user, "**Clinical Validation Log:**")
            .and_then(|line| serde_json::from_str(&line).ok())
            .unwrap_or_default();
        let tendencies: Vec<TendencyLine> =
            value_after_line(user, "**Clinical Evidence from Similar Cases:**")
                .and_then(|line| serde_json::from_str(&line).ok())
                .unwrap_or_default();

        let keywords = if tendencies.is_empty() {
            "None".to_string()
        } else {
            tendencies
                .iter()
                .map(|t| t.focus.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        };
        let evidence = if tendencies.is_empty() {
            "No focus was extracted; the plan is maintained from active history.".to_string()
        } else {
            tendencies
                .iter()
                .map(|t| {
                    if t.common_additions.is_empty() {
                        format!("For {}: similar cases show no consistent addition.", t.focus)
                    } else {
                        format!(
                            "For {}: similar cases added {}.",
                            t.focus,
                            t.common_additions.join(", ")
                        )
                    }
                })
                .collect::<Vec<_>>()
                .join("\n")
        };

        let mut prescribe_lines = Vec::new();
        for drug in final_drugs.iter() {
            let action = audit
                .iter()
                .find(|a| crate::cohort::canonicalize_drug(&a.drug) == drug)
                .map(|a| a.action.as_str())
                .unwrap_or("KEPT");
            let rationale = if action == "ADDED" {
                match tendencies
                    .iter()
                    .find(|t| t.common_additions.iter().any(|d| {
                        crate::cohort::canonicalize_drug(d) == drug
                    })) {
                    Some(t) => format!(
                        "added for {}; physicians in similar cases prescribed it for this focus",
                        t.focus
                    ),
                    None => "added with support from similar cases".to_string(),
                }
            } else {
                "maintained from active history; no reason to change".to_string()
            };
            prescribe_lines.push(format!("({drug}) : ({rationale})"));
        }

        Ok(format!(
            "* Patient summary *\nVisit reviewed against the carried medication list; retrieved \
             evidence was used to confirm or reject every draft change, and the plan below \
             reflects that audit.\n\n* Key word *\n{keywords}\n\n* Clinical Evidence *\n\
             {evidence}\n\n* Prescribe *\n{}",
            prescribe_lines.join("\n")
        ))
    }

    fn answer_guideline(&self, user: &str) -> Result<String, LlmError> {
        let note = line_value(user, "- Subjective:")
            .or_else(|| line_value(user, "- Diagnoses:"))
            .ok_or_else(|| self.gap(StageId::Guideline, "no subjective/diagnoses line"))?;
        let history = line_value(user, "Most Recent Medications:")
            .map(|v| parse_drug_list(&v))
            .unwrap_or_default();
        let guidelines = region_after_line(user, "Similar Guidelines:")
            .unwrap_or_default()
            .to_lowercase();

        let mut seen = history.clone();
        let mut lines: Vec<String> = history
            .iter()
            .map(|d| format!("{d} | continue current regimen"))
            .collect();
        for symptom in self.oracle.symptoms_in(&note) {
            if !guidelines.contains(symptom) {
                continue; // nothing on point → stay conservative
            }
            if let Some(drug) = self.oracle.indicated(symptom) {
                if seen.insert(drug) {
                    lines.push(format!("{drug} | guideline covers {symptom}"));
                }
            }
        }
        if lines.is_empty() {
            lines.push("amantadine sulfate | conservative default".to_string());
        }
        Ok(format!("[START]\n{}\n[END]", lines.join("\n")))
    }

    fn answer_treatrag(&self, user: &str) -> Result<String, LlmError> {
        let history = line_value(user, "History Summary:")
            .or_else(|| line_value(user, "- Most Recent Medications:"))
            .map(|v| parse_drug_list(&v))
            .ok_or_else(|| self.gap(StageId::Treatrag, "no history line"))?;
        let cases = parse_case_blocks(user);

        // Majority bias: whatever shows up in at least two retrieved plans
        // gets copied, patient-specific or not.
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for (_, plan) in &cases {
            for drug in plan.iter() {
                *counts.entry(drug.to_string()).or_default() += 1;
            }
        }
        let mut lines: Vec<String> = history
            .iter()
            .map(|d| format!("{d} | continue current regimen"))
            .collect();
        for (drug, count) in counts {
            if count >= 2 && !history.contains(&drug) {
                lines.push(format!("{drug} | frequent across similar cases"));
            }
        }
        if lines.is_empty() {
            lines.push("amantadine sulfate | conservative default".to_string());
        }
        Ok(format!("[START]\n{}\n[END]", lines.join("\n")))
    }

    fn answer_medreflect_q(&self, user: &str) -> Result<String, LlmError> {
        let draft = between(user, "<Response>:", "</Response>")
            .ok_or_else(|| self.gap(StageId::MedreflectQ, "no response span"))?;
        Ok(format!(
            "<Reflective Question>Does the draft [{draft}] keep every active-history drug and \
             avoid additions unsupported by the current presentation?</Reflective Question>"
        ))
    }

    fn answer_medreflect_a(&self) -> String {
        "<Reflective Answer>All active-history drugs must stay; an addition is justified only \
         when the current note itself shows the matching indication.</Reflective Answer>"
            .to_string()
    }

    fn answer_medreflect_r(&self, user: &str) -> Result<String, LlmError> {
        let reflection = between(user, "<Self-Reflection>:", "</Self-Reflection>")
            .ok_or_else(|| self.gap(StageId::MedreflectR, "no self-reflection span"))?;
        let draft = between(reflection, "[", "]")
            .map(parse_drug_list)
            .unwrap_or_default();
        let history = line_value(user, "[Active History]:")
            .map(|v| parse_drug_list(&v))
            .unwrap_or_default();

        // Reflection catches most of the wrong guesses but not all of them:
        // the first noise drug in the draft survives.
        let noise = self.noise_pool();
        let mut kept = history.clone();
        let mut surviving_noise: Option<String> = None;
        for drug in draft.iter() {
            if noise.contains(drug) {
                if surviving_noise.is_none() {
                    surviving_noise = Some(drug.to_string());
                }
            } else {
                kept.insert(drug);
            }
        }
        if let Some(n) = surviving_noise {
            kept.insert(&n);
        }
        let listed = kept.iter().collect::<Vec<_>>().join(", ");
        Ok(format!("<Answer>:[{listed}]</Answer>"))
    }

    fn answer_judge(&self, user: &str) -> Result<String, LlmError> {
        let note = block_after_line(user, "Current Clinical Note (patient_input):")
            .or_else(|| block_after_line(user, "Current Admission (patient_input):"))
            .ok_or_else(|| self.gap(StageId::Judge, "no patient input block"))?;
        let focus_desc = block_after_line(
            user,
            "Focus areas (keywords our system extracted, or notice that none were extracted):",
        )
        .unwrap_or_default();
        let symptoms = self.oracle.symptoms_in(&note);
        let extracted = focus_desc
            .find("Extracted keywords:")
            .map(|pos| focus_desc[pos + "Extracted keywords:".len()..].trim().to_string());

        let (score, explanation) = match (&extracted, symptoms.is_empty()) {
            (None, true) => (
                5,
                "The visit is stable relative to the history, and extracting nothing is the \
                 correct call; the ground truth simply maintains the previous plan.",
            ),
            (Some(kw), false) if symptoms.iter().all(|s| kw.contains(s)) => (
                5,
                "The extracted keywords name exactly the acute complaints that drive the \
                 prescription change for this visit.",
            ),
            (Some(_), false) => (
                2,
                "Keywords were extracted but they miss part of the acute presentation that \
                 the ground truth responds to.",
            ),
            (Some(_), true) => (
                2,
                "Keywords were extracted although the visit is stable; the ground truth shows \
                 no prescription change to justify them.",
            ),
            (None, false) => (
                1,
                "An acute complaint is present and drives a prescription change, but nothing \
                 was extracted.",
            ),
        };
        Ok(format!(
            "Relevance (1-5): {score}\nExplanation: {explanation}\nSummary: Focus decision \
             scored against the note, history, and ground-truth prescription."
        ))
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, LlmError> {
        let user = request
            .primary_user_content()
            .ok_or_else(|| self.gap(request.stage, "request carries no user message"))?;

        let mut text = None;
        for rule in &self.rules {
            let stage_ok = rule.stage.is_none_or(|s| s == request.stage);
            let match_ok = rule.match_text.is_empty() || user.contains(&rule.match_text);
            if stage_ok && match_ok {
                text = Some(rule.response.clone());
                break;
            }
        }
        let mut text = match text {
            Some(t) => t,
            None => match request.stage {
                StageId::Initial => self.answer_initial(user)?,
                StageId::Focus => self.answer_focus(user),
                StageId::Tendency => self.answer_tendency(user),
                StageId::Refine => self.answer_refine(user)?,
                StageId::Summary => self.answer_summary(user)?,
                StageId::Guideline => self.answer_guideline(user)?,
                StageId::Treatrag => self.answer_treatrag(user)?,
                StageId::MedreflectQ => self.answer_medreflect_q(user)?,
                StageId::MedreflectA => self.answer_medreflect_a(),
                StageId::MedreflectR => self.answer_medreflect_r(user)?,
                StageId::Judge => self.answer_judge(user)?,
            },
        };
        if let Some(suffix) = self.sampling_suffix(request, user) {
            text.push_str(&suffix);
        }
        Ok(CompletionResult {
            text,
            attempts_used: 1,
            backend_latency: Duration::ZERO,
        })
    }

    fn describe(&self) -> String {
        "scripted".to_string()
    }
}

/// Rest of the first line containing `marker`, trimmed.
fn line_value(content: &str, marker: &str) -> Option<String> {
    content.lines().find_map(|line| {
        line.find(marker)
            .map(|pos| line[pos + marker.len()..].trim().to_string())
    })
}

/// First non-empty line after the line containing `marker`.
fn value_after_line(content: &str, marker: &str) -> Option<String> {
    let mut lines = content.lines();
    lines.find(|line| line.contains(marker))?;
    lines
        .find(|line| !line.trim().is_empty())
        .map(|line| line.trim().to_string())
}

/// Lines after the line containing `marker`, up to the first blank line.
fn block_after_line(content: &str, marker: &str) -> Option<String> {
    let mut lines = content.lines();
    lines.find(|line| line.contains(marker))?;
    let block: Vec<&str> = lines.take_while(|line| !line.trim().is_empty()).collect();
    Some(block.join("\n"))
}

/// Everything after the line containing `marker`.
fn region_after_line(content: &str, marker: &str) -> Option<String> {
    let pos = content.find(marker)?;
    let rest = &content[pos..];
    let newline = rest.find('\n')?;
    Some(rest[newline + 1..].to_string())
}

fn between<'a>(text: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let start = text.find(open)? + open.len();
    let rest = &text[start..];
    let end = rest.find(close)?;
    Some(rest[..end].trim())
}

/// A rendered drug list back to a set; the literal "None" means empty.
fn parse_drug_list(text: &str) -> DrugSet {
    let trimmed = text.trim();
    if trimmed.is_empty() || trimmed.eq_ignore_ascii_case("none") {
        return DrugSet::new();
    }
    parse_plan_labels(trimmed)
}

/// (prior medications, prescribed plan) per rendered case block, in order.
fn parse_case_blocks(content: &str) -> Vec<(DrugSet, DrugSet)> {
    static PRIOR: OnceLock<Regex> = OnceLock::new();
    static PLAN: OnceLock<Regex> = OnceLock::new();
    let prior_re =
        PRIOR.get_or_init(|| Regex::new(r"(?m)^Prior medications:(.*)$").expect("static regex"));
    let plan_re =
        PLAN.get_or_init(|| Regex::new(r"(?m)^Prescribed plan:(.*)$").expect("static regex"));
    let priors: Vec<DrugSet> = prior_re
        .captures_iter(content)
        .map(|c| parse_drug_list(&c[1]))
        .collect();
    let plans: Vec<DrugSet> = plan_re
        .captures_iter(content)
        .map(|c| parse_drug_list(&c[1]))
        .collect();
    priors.into_iter().zip(plans).collect()
}
