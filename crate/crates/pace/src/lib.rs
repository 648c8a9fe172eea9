//! Prescription recommendation over longitudinal clinical records.
//!
//! The library is organized around a four-stage pipeline: an initial draft
//! prescription is produced from the current note and recent history, focus
//! queries describing acute clinical changes are extracted, similar patient
//! cases are retrieved per focus from a pool index, prescribing tendencies are
//! summarized per focus, and a policy-audited refinement merges everything
//! into a final drug set with a per-drug audit log. Baseline strategies
//! (zero-shot, guideline retrieval, whole-note case retrieval, reflective
//! refinement) share the same cohort, backend, and evaluation plumbing.

pub mod cohort;
pub mod eval;
pub mod llm;
pub mod pipeline;
pub mod prompts;
pub mod retrieval;

pub mod cli;
