//! Cohort model: longitudinal patient records, drug-label canonicalization,
//! note parsing, patient-level splitting, and synthetic cohort generation.
//!
//! A cohort is a list of [`PatientRecord`]s, each an ordered sequence of
//! visits. Two visit shapes exist: SOAP-structured clinic notes and
//! diagnosis-list admissions. Ground truth for every visit is a [`DrugSet`]
//! of canonical labels.

mod atc;
mod io;
mod soap;
mod split;
mod synth;

pub use atc::{fetch_ndc_atc_table, AtcMapping, MappingStats};
pub use io::{
    ingest_admissions_jsonl, read_cohort_jsonl, read_guideline_corpus, write_cohort_jsonl,
    ingest_soap_dir,
};
pub use soap::parse_soap;
pub use split::{split_cohort, CohortSplit, SplitMode, SplitSpec};
pub use synth::{generate_synthetic_cohort, SynthConfig, SynthOracle, SynthOutput};

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CohortError {
    /// Raw note text contained no recognizable section tags.
    #[error("unparseable note: {0}")]
    UnparseableNote(String),
    #[error("cohort is empty")]
    EmptyCohort,
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("malformed cohort line {line}: {source}")]
    MalformedLine {
        line: usize,
        source: serde_json::Error,
    },
    #[error("malformed mapping line {line}: {detail}")]
    MalformedMapping { line: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Normalize a raw drug mention to its canonical label: trim leading and
/// trailing whitespace/ASCII punctuation, collapse internal whitespace runs to
/// a single space, and case-fold. Internal punctuation survives, so
/// `"ACE inhibitors, plain"` stays one label. Idempotent by construction.
pub fn canonicalize_drug(raw: &str) -> String {
    let trimmed = raw.trim_matches(|c: char| c.is_whitespace() || c.is_ascii_punctuation());
    let collapsed: Vec<&str> = trimmed.split_whitespace().collect();
    collapsed.join(" ").to_lowercase()
}

/// An order-stable set of canonical drug labels. Iteration and serialization
/// are always lexicographic, so every artifact derived from a `DrugSet` is
/// byte-deterministic.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DrugSet(BTreeSet<String>);

impl DrugSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Canonicalize and insert. Mentions that canonicalize to the empty
    /// string (pure punctuation/whitespace) are dropped.
    pub fn insert(&mut self, raw: &str) -> bool {
        let label = canonicalize_drug(raw);
        if label.is_empty() {
            return false;
        }
        self.0.insert(label)
    }

    pub fn contains(&self, raw: &str) -> bool {
        self.0.contains(&canonicalize_drug(raw))
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    pub fn union(&self, other: &DrugSet) -> DrugSet {
        DrugSet(self.0.union(&other.0).cloned().collect())
    }

    pub fn intersection(&self, other: &DrugSet) -> DrugSet {
        DrugSet(self.0.intersection(&other.0).cloned().collect())
    }

    pub fn difference(&self, other: &DrugSet) -> DrugSet {
        DrugSet(self.0.difference(&other.0).cloned().collect())
    }

    /// Labels joined with `", "`, or the literal `None` when empty — the
    /// rendering convention shared by every prompt template.
    pub fn render(&self) -> String {
        if self.0.is_empty() {
            "None".to_string()
        } else {
            self.0.iter().cloned().collect::<Vec<_>>().join(", ")
        }
    }
}

impl fmt::Display for DrugSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.render())
    }
}

impl FromIterator<String> for DrugSet {
    fn from_iter<T: IntoIterator<Item = String>>(iter: T) -> Self {
        let mut set = DrugSet::new();
        for raw in iter {
            set.insert(&raw);
        }
        set
    }
}

impl<'a> FromIterator<&'a str> for DrugSet {
    fn from_iter<T: IntoIterator<Item = &'a str>>(iter: T) -> Self {
        let mut set = DrugSet::new();
        for raw in iter {
            set.insert(raw);
        }
        set
    }
}

/// Sectioned clinic note. Missing sections are empty strings.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SoapNote {
    pub subjective: String,
    pub objective: String,
    pub assessment: String,
    pub plan: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisitKind {
    Soap,
    Admission,
}

/// One encounter. `kind` selects which fields are meaningful: SOAP visits
/// carry the four note sections, admissions carry a diagnosis list. The
/// ground truth is the prescription issued at this encounter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Visit {
    pub kind: VisitKind,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub subjective: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub objective: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub assessment: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub plan: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnoses: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub admission_id: Option<String>,
    pub ground_truth: DrugSet,
}

impl Visit {
    pub fn soap(note: SoapNote, ground_truth: DrugSet) -> Self {
        Visit {
            kind: VisitKind::Soap,
            subjective: note.subjective,
            objective: note.objective,
            assessment: note.assessment,
            plan: note.plan,
            diagnoses: Vec::new(),
            admission_id: None,
            ground_truth,
        }
    }

    pub fn admission(admission_id: Option<String>, diagnoses: Vec<String>, ground_truth: DrugSet) -> Self {
        Visit {
            kind: VisitKind::Admission,
            subjective: String::new(),
            objective: String::new(),
            assessment: String::new(),
            plan: String::new(),
            diagnoses,
            admission_id,
            ground_truth,
        }
    }

    /// Diagnosis list joined for embedding/prompting.
    pub fn diagnoses_text(&self) -> String {
        self.diagnoses.join(", ")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub visits: Vec<Visit>,
}

impl PatientRecord {
    /// History window for predicting visit `t`: the `min(3, t)` visits
    /// immediately preceding it, oldest first.
    pub fn history_window(&self, t: usize) -> &[Visit] {
        let start = t.saturating_sub(3);
        &self.visits[start..t]
    }

    /// Medications the patient carries into visit `t`: the prescription of
    /// the immediately preceding visit, empty at the first visit.
    pub fn active_history(&self, t: usize) -> DrugSet {
        if t == 0 {
            DrugSet::new()
        } else {
            self.visits[t - 1].ground_truth.clone()
        }
    }
}

/// Split a raw plan/prescription text into canonical labels. Entries are
/// separated by newlines, commas, or semicolons; a trailing parenthetical
/// dose is kept as part of the label.
pub fn parse_plan_labels(plan: &str) -> DrugSet {
    plan.split(['\n', ',', ';'])
        .filter(|s| !s.trim().is_empty())
        .collect()
}
