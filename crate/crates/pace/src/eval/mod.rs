//! Scoring and statistics: multi-label set metrics per visit, multi-seed
//! aggregation, paired significance testing, retrieval precision curves, and
//! an LLM-judged keyword-relevance harness.

pub mod judge;
pub mod precision;
pub mod report;
pub mod significance;

pub use judge::{judge_batch, judge_item, JudgeItem, JudgeSummary, JudgeVerdict};
pub use precision::{default_k_values, drug_precision_at_k, precision_curve, ranked_cases, PrecisionAtK};
pub use report::{metrics_csv, precision_csv, report_rows, EvalReport, ReportRow};
pub use significance::{paired_t_test, student_t_cdf, two_tailed_p, SignificanceResult, Stars};

use crate::cohort::DrugSet;
use crate::llm::LlmError;
use crate::pipeline::PipelineOutput;
use crate::prompts::PromptError;
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("gold set is empty; the visit cannot be scored")]
    EmptyGold,
    #[error("expected scores for {expected} seed(s), got {got}")]
    SeedCountMismatch { expected: usize, got: usize },
    #[error("paired series differ in length: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least two paired values, got {0}")]
    TooFewPairs(usize),
    #[error("paired differences have zero variance (mean difference {mean_diff}); t is undefined")]
    ZeroVarianceDifferences { mean_diff: f64 },
    #[error("no visits to score")]
    NoVisits,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("judge backend: {0}")]
    Backend(#[from] LlmError),
}

/// The four per-visit metrics, each in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisitScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Precision,
    Recall,
    F1,
    Accuracy,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::Precision,
        Metric::Recall,
        Metric::F1,
        Metric::Accuracy,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::Precision => "precision",
            Metric::Recall => "recall",
            Metric::F1 => "f1",
            Metric::Accuracy => "accuracy",
        }
    }

    pub fn of(&self, score: &VisitScore) -> f64 {
        match self {
            Metric::Precision => score.precision,
            Metric::Recall => score.recall,
            Metric::F1 => score.f1,
            Metric::Accuracy => score.accuracy,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Set sizes for one scored visit. Keeping the raw counts (not just the
/// derived ratios) is what makes micro-averaging possible later.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisitCounts {
    pub pred: usize,
    pub gold: usize,
    pub overlap: usize,
    pub union: usize,
    pub degenerate_empty: bool,
}

impl VisitCounts {
    pub fn from_sets(
        pred: &DrugSet,
        gold: &DrugSet,
        degenerate_empty: bool,
    ) -> Result<Self, EvalError> {
        if gold.is_empty() {
            return Err(EvalError::EmptyGold);
        }
        Ok(VisitCounts {
            pred: pred.len(),
            gold: gold.len(),
            overlap: pred.intersection(gold).len(),
            union: pred.union(gold).len(),
            degenerate_empty,
        })
    }

    pub fn score(&self) -> VisitScore {
        let precision = ratio(self.overlap, self.pred);
        let recall = ratio(self.overlap, self.gold);
        let f1 = harmonic(precision, recall);
        let accuracy = ratio(self.overlap, self.union);
        VisitScore {
            precision,
            recall,
            f1,
            accuracy,
        }
    }
}

fn ratio(numerator: usize, denominator: usize) -> f64 {
    if denominator == 0 {
        0.0
    } else {
        numerator as f64 / denominator as f64
    }
}

fn harmonic(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Score one visit's prediction against its gold prescription.
///
/// Precision is the fraction of predicted drugs that are correct (0 for an
/// empty prediction), recall the fraction of gold drugs recovered, F1 their
/// harmonic mean (0 when both are 0), and accuracy the Jaccard similarity of
/// the two sets.
pub fn score_visit(pred: &DrugSet, gold: &DrugSet) -> Result<VisitScore, EvalError> {
    VisitCounts::from_sets(pred, gold, false).map(|c| c.score())
}

/// Counts for every visit of one manifest, in manifest order.
pub fn visit_counts(outputs: &[PipelineOutput]) -> Result<Vec<VisitCounts>, EvalError> {
    outputs
        .iter()
        .map(|o| VisitCounts::from_sets(o.prediction(), &o.gold, o.refinement.degenerate_empty))
        .collect()
}

/// All visit counts produced under one seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedScores {
    pub seed: u64,
    pub visits: Vec<VisitCounts>,
}

/// How per-visit results combine into a per-seed value: equal weight per
/// visit, or pooled counts across visits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    Macro,
    Micro,
}

impl Averaging {
    fn seed_score(&self, visits: &[VisitCounts]) -> VisitScore {
        match self {
            Averaging::Macro => {
                // Summing in sorted order makes the mean a function of the
                // score multiset, so visit order cannot shift the last ulp.
                let ordered_mean = |values: &mut Vec<f64>| {
                    values.sort_by(f64::total_cmp);
                    values.iter().sum::<f64>() / values.len() as f64
                };
                let scores: Vec<VisitScore> = visits.iter().map(VisitCounts::score).collect();
                let field = |pick: fn(&VisitScore) -> f64| {
                    ordered_mean(&mut scores.iter().map(pick).collect())
                };
                VisitScore {
                    precision: field(|s| s.precision),
                    recall: field(|s| s.recall),
                    f1: field(|s| s.f1),
                    accuracy: field(|s| s.accuracy),
                }
            }
            Averaging::Micro => {
                let pooled = visits.iter().fold(
                    VisitCounts {
                        pred: 0,
                        gold: 0,
                        overlap: 0,
                        union: 0,
                        degenerate_empty: false,
                    },
                    |mut acc, c| {
                        acc.pred += c.pred;
                        acc.gold += c.gold;
                        acc.overlap += c.overlap;
                        acc.union += c.union;
                        acc
                    },
                );
                pooled.score()
            }
        }
    }
}

/// One metric across seeds: the per-seed values (aligned with the report's
/// seed list) and their mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: Metric,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub averaging: Averaging,
    pub seeds: Vec<u64>,
    /// One summary per metric, in `Metric::ALL` order.
    pub metrics: Vec<MetricSummary>,
    /// Visits scored under each seed (identical across seeds).
    pub n_visits: usize,
    /// Degenerate-empty predictions across all seeds. They score with
    /// precision 0 rather than being excluded.
    pub degenerate_empty_count: usize,
    /// A single-seed report has no variance to estimate; std is 0 by
    /// convention and this flag marks it.
    pub single_seed: bool,
}

impl MetricReport {
    pub fn summary(&self, metric: Metric) -> &MetricSummary {
        self.metrics
            .iter()
            .find(|m| m.metric == metric)
            .expect("every metric is always present")
    }
}

pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (ss / (n - 1.0)).sqrt()
}

/// Reduce per-seed visit scores to per-metric means with cross-seed spread.
///
/// `configured_seeds` is the seed list the run was supposed to cover; the
/// scores must match it exactly so the reported spread is over the full list
/// and nothing else.
pub fn aggregate(
    per_seed: &[SeedScores],
    configured_seeds: &[u64],
    averaging: Averaging,
) -> Result<MetricReport, EvalError> {
    if per_seed.len() != configured_seeds.len() || per_seed.is_empty() {
        return Err(EvalError::SeedCountMismatch {
            expected: configured_seeds.len(),
            got: per_seed.len(),
        });
    }
    let mut got: Vec<u64> = per_seed.iter().map(|s| s.seed).collect();
    let mut expected: Vec<u64> = configured_seeds.to_vec();
    got.sort_unstable();
    expected.sort_unstable();
    if got != expected {
        return Err(EvalError::SeedCountMismatch {
            expected: configured_seeds.len(),
            got: per_seed.len(),
        });
    }

    let n_visits = per_seed[0].visits.len();
    if n_visits == 0 {
        return Err(EvalError::NoVisits);
    }
    for scores in per_seed {
        if scores.visits.len() != n_visits {
            return Err(EvalError::LengthMismatch {
                left: n_visits,
                right: scores.visits.len(),
            });
        }
    }

    let seed_means: Vec<VisitScore> = per_seed
        .iter()
        .map(|s| averaging.seed_score(&s.visits))
        .collect();
    let metrics = Metric::ALL
        .iter()
        .map(|&metric| {
            let per_seed_values: Vec<f64> = seed_means.iter().map(|s| metric.of(s)).collect();
            let mean = per_seed_values.iter().sum::<f64>() / per_seed_values.len() as f64;
            let std = sample_std(&per_seed_values);
            MetricSummary {
                metric,
                per_seed: per_seed_values,
                mean,
                std,
            }
        })
        .collect();

    Ok(MetricReport {
        averaging,
        seeds: per_seed.iter().map(|s| s.seed).collect(),
        metrics,
        n_visits,
        degenerate_empty_count: per_seed
            .iter()
            .flat_map(|s| s.visits.iter())
            .filter(|c| c.degenerate_empty)
            .count(),
        single_seed: per_seed.len() == 1,
    })
}
