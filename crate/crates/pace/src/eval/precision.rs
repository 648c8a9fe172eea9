//! Retrieval quality as the prescriber sees it: of the unique drugs carried
//! by the top-k retrieved cases, how many belong to the visit's gold set.

use crate::cohort::DrugSet;
use crate::pipeline::PipelineOutput;
use crate::retrieval::RetrievedCase;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BTreeSet;

/// A precision curve over cutoffs, one value per k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionAtK {
    pub method: String,
    pub k_values: Vec<usize>,
    pub precision: Vec<f64>,
}

/// Precision of the drug pool induced by the top-k cases: the union of their
/// associated drug sets, scored against gold. An empty pool scores 0.
pub fn drug_precision_at_k(ranked: &[RetrievedCase], gold: &DrugSet, k: usize) -> f64 {
    let top = &ranked[..k.min(ranked.len())];
    let mut pool = DrugSet::new();
    for case in top {
        for drug in case.entry.associated_drugs.iter() {
            pool.insert(drug);
        }
    }
    if pool.is_empty() {
        return 0.0;
    }
    let hits = pool.iter().filter(|d| gold.contains(d)).count();
    hits as f64 / pool.len() as f64
}

/// The ranked case list behind one visit's retrieval, for curve building.
///
/// Methods that retrieve once per visit store their ranking directly and are
/// counted by the full prescriptions their cases carry. The focus-driven
/// flow retrieves per focus, so its lists are merged by descending
/// similarity (ties keep focus order) with exact duplicates dropped — and
/// each case is counted by the drugs that encounter newly introduced, since
/// a focused query asks what physicians did about the same signal, not what
/// the other patient happened to be taking already.
pub fn ranked_cases(output: &PipelineOutput) -> Vec<RetrievedCase> {
    if !output.retrieved.is_empty() {
        return output.retrieved.clone();
    }
    let mut merged: Vec<RetrievedCase> = output
        .tendencies
        .iter()
        .flat_map(|t| t.retrieved.iter().cloned())
        .map(|mut case| {
            case.entry.associated_drugs =
                case.entry.associated_drugs.difference(&case.entry.prior_drugs);
            case
        })
        .collect();
    merged.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    let mut seen = BTreeSet::new();
    merged.retain(|case| seen.insert((case.entry.patient_id.clone(), case.entry.text.clone())));
    merged
}

/// Mean precision per cutoff over the given (ranking, gold) pairs. The
/// caller chooses which visits participate — typically those that retrieved
/// at least one case.
pub fn precision_curve(
    method: &str,
    rankings: &[(Vec<RetrievedCase>, DrugSet)],
    k_values: &[usize],
) -> PrecisionAtK {
    let precision = k_values
        .iter()
        .map(|&k| {
            if rankings.is_empty() {
                0.0
            } else {
                rankings
                    .iter()
                    .map(|(cases, gold)| drug_precision_at_k(cases, gold, k))
                    .sum::<f64>()
                    / rankings.len() as f64
            }
        })
        .collect();
    PrecisionAtK {
        method: method.to_string(),
        k_values: k_values.to_vec(),
        precision,
    }
}

/// The standard cutoffs for reporting, 1 through 7.
pub fn default_k_values() -> Vec<usize> {
    (1..=7).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::{FieldTag, IndexEntry};

    fn case(id: &str, score: f64, drugs: &[&str]) -> RetrievedCase {
        RetrievedCase {
            entry_index: 0,
            score,
            entry: IndexEntry {
                patient_id: id.to_string(),
                field_tag: FieldTag::Subjective,
                text: format!("note for {id}"),
                associated_drugs: drugs.iter().map(|s| s.to_string()).collect(),
                prior_drugs: DrugSet::new(),
            },
        }
    }

    fn gold(drugs: &[&str]) -> DrugSet {
        drugs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn single_exact_case_is_perfect_at_one() {
        let ranked = vec![case("p1", 0.99, &["a"])];
        assert_eq!(drug_precision_at_k(&ranked, &gold(&["a"]), 1), 1.0);
    }

    #[test]
    fn widening_k_dilutes_the_pool_per_hand_arithmetic() {
        let ranked = vec![case("p1", 0.9, &["a"]), case("p2", 0.8, &["a", "b", "c"])];
        let g = gold(&["a"]);
        assert_eq!(drug_precision_at_k(&ranked, &g, 1), 1.0);
        assert!((drug_precision_at_k(&ranked, &g, 2) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn disjoint_and_empty_pools_score_zero() {
        let ranked = vec![case("p1", 0.9, &["x"])];
        assert_eq!(drug_precision_at_k(&ranked, &gold(&["a"]), 3), 0.0);
        assert_eq!(drug_precision_at_k(&[], &gold(&["a"]), 3), 0.0);
        let no_drugs = vec![case("p1", 0.9, &[])];
        assert_eq!(drug_precision_at_k(&no_drugs, &gold(&["a"]), 1), 0.0);
    }

    #[test]
    fn full_depth_matches_brute_force_union() {
        let ranked = vec![
            case("p1", 0.9, &["a", "b"]),
            case("p2", 0.8, &["b", "c"]),
            case("p3", 0.7, &["d"]),
        ];
        let g = gold(&["a", "c", "d"]);
        let mut pool = DrugSet::new();
        for c in &ranked {
            for d in c.entry.associated_drugs.iter() {
                pool.insert(d);
            }
        }
        let brute = pool.iter().filter(|d| g.contains(d)).count() as f64 / pool.len() as f64;
        assert_eq!(drug_precision_at_k(&ranked, &g, ranked.len()), brute);
        assert_eq!(drug_precision_at_k(&ranked, &g, 99), brute);
    }

    #[test]
    fn curve_averages_over_visits_per_cutoff() {
        let rankings = vec![
            (vec![case("p1", 0.9, &["a"])], gold(&["a"])),
            (vec![case("p2", 0.9, &["b"])], gold(&["c"])),
        ];
        let curve = precision_curve("demo", &rankings, &[1, 2]);
        assert_eq!(curve.k_values, vec![1, 2]);
        assert_eq!(curve.precision, vec![0.5, 0.5]);
        assert_eq!(curve.method, "demo");
    }

    fn sample_output() -> PipelineOutput {
        use crate::pipeline::RefinementResult;
        use crate::prompts::Flavor;

        PipelineOutput {
            patient_id: "t".into(),
            visit_index: 1,
            flavor: Flavor::Soap,
            gold: gold(&["a"]),
            active_history: DrugSet::new(),
            initial_draft: DrugSet::new(),
            focuses: vec![],
            tendencies: vec![],
            refinement: RefinementResult {
                final_prescription: DrugSet::new(),
                audit_log: vec![],
                description: String::new(),
                degenerate_empty: false,
                divergences: 0,
            },
            summary: String::new(),
            retrieved: vec![],
            trace: vec![],
        }
    }

    #[test]
    fn merged_focus_rankings_sort_by_score_and_dedup() {
        use crate::pipeline::{FocusQuery, TendencySignal};

        let focus = |text: &str| FocusQuery {
            text: text.to_string(),
            source_field: FieldTag::Subjective,
        };
        let shared = case("dup", 0.95, &["a"]);
        let mut output = sample_output();
        output.focuses = vec![focus("x"), focus("y")];
        output.tendencies = vec![
            TendencySignal::empty(focus("x"), vec![case("low", 0.3, &["b"]), shared.clone()]),
            TendencySignal::empty(focus("y"), vec![shared.clone(), case("hi", 0.99, &["c"])]),
        ];
        let ranked = ranked_cases(&output);
        let ids: Vec<&str> = ranked.iter().map(|c| c.entry.patient_id.as_str()).collect();
        assert_eq!(ids, vec!["hi", "dup", "low"], "desc score, dup dropped");

        // A method-level ranking short-circuits the merge.
        let mut direct = output.clone();
        direct.retrieved = vec![case("only", 0.5, &["z"])];
        assert_eq!(ranked_cases(&direct).len(), 1);
    }

    #[test]
    fn merged_rankings_count_only_what_the_encounter_introduced() {
        use crate::pipeline::{FocusQuery, TendencySignal};

        let mut carried = case("p1", 0.95, &["maintenance", "new drug"]);
        carried.entry.prior_drugs = gold(&["maintenance"]);
        let focus = FocusQuery {
            text: "tremor".to_string(),
            source_field: FieldTag::Subjective,
        };
        let mut output = sample_output();
        output.tendencies = vec![TendencySignal::empty(focus, vec![carried.clone()])];

        let merged = ranked_cases(&output);
        assert_eq!(merged[0].entry.associated_drugs, gold(&["new drug"]));
        assert_eq!(drug_precision_at_k(&merged, &gold(&["new drug", "own med"]), 1), 1.0);

        // The direct path keeps the full prescription untouched.
        output.retrieved = vec![carried];
        let direct = ranked_cases(&output);
        assert_eq!(direct[0].entry.associated_drugs, gold(&["maintenance", "new drug"]));
    }
}
