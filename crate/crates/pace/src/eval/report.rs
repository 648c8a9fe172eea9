//! Report shapes written to disk: one JSON document per evaluated run plus
//! flat CSVs for tabulation and plotting.

use super::precision::PrecisionAtK;
use super::significance::{SignificanceResult, Stars};
use super::{Metric, MetricReport};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// The full evaluation of one (method, backbone) run set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub backbone: String,
    pub report: MetricReport,
    /// Per-metric comparisons against a baseline, when one was evaluated.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub significance: Vec<SignificanceResult>,
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub backbone: String,
    pub metric: Metric,
    pub mean: f64,
    pub std: f64,
    pub stars: Stars,
}

/// Flatten a report to CSV rows, one per metric, carrying the star marker
/// from the significance comparison for that metric (none when the report
/// had no baseline to compare against).
pub fn report_rows(eval: &EvalReport) -> Vec<ReportRow> {
    eval.report
        .metrics
        .iter()
        .map(|summary| {
            let stars = eval
                .significance
                .iter()
                .find(|s| s.metric == summary.metric)
                .map(|s| s.stars)
                .unwrap_or(Stars::None);
            ReportRow {
                method: eval.method.clone(),
                backbone: eval.backbone.clone(),
                metric: summary.metric,
                mean: summary.mean,
                std: summary.std,
                stars,
            }
        })
        .collect()
}

pub fn metrics_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("method,backbone,metric,mean,std,stars\n");
    for row in rows {
        writeln!(
            out,
            "{},{},{},{:.6},{:.6},{}",
            row.method,
            row.backbone,
            row.metric,
            row.mean,
            row.std,
            row.stars.as_str()
        )
        .expect("writing to a String cannot fail");
    }
    out
}

pub fn precision_csv(curves: &[PrecisionAtK]) -> String {
    let mut out = String::from("method,k,precision\n");
    for curve in curves {
        for (k, p) in curve.k_values.iter().zip(&curve.precision) {
            writeln!(out, "{},{},{:.6}", curve.method, k, p)
                .expect("writing to a String cannot fail");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{aggregate, Averaging, SeedScores, VisitCounts};

    fn tiny_report() -> MetricReport {
        let per_seed = vec![
            SeedScores {
                seed: 1,
                visits: vec![VisitCounts {
                    pred: 1,
                    gold: 1,
                    overlap: 1,
                    union: 1,
                    degenerate_empty: false,
                }],
            },
            SeedScores {
                seed: 2,
                visits: vec![VisitCounts {
                    pred: 2,
                    gold: 1,
                    overlap: 1,
                    union: 2,
                    degenerate_empty: false,
                }],
            },
        ];
        aggregate(&per_seed, &[1, 2], Averaging::Macro).unwrap()
    }

    #[test]
    fn csv_has_one_row_per_metric_with_stars() {
        let eval = EvalReport {
            method: "pace".into(),
            backbone: "scripted".into(),
            report: tiny_report(),
            significance: vec![SignificanceResult {
                baseline: "zero_shot".into(),
                metric: Metric::F1,
                t: 9.0,
                p: 0.004,
                stars: Stars::Two,
            }],
        };
        let rows = report_rows(&eval);
        assert_eq!(rows.len(), 4);
        let csv = metrics_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "method,backbone,metric,mean,std,stars");
        assert_eq!(lines.len(), 5);
        let f1_line = lines.iter().find(|l| l.contains(",f1,")).unwrap();
        assert!(f1_line.ends_with(",**"), "f1 row carries its stars: {f1_line}");
        let precision_line = lines.iter().find(|l| l.contains(",precision,")).unwrap();
        assert!(
            precision_line.ends_with(','),
            "uncompared metric has empty stars: {precision_line}"
        );
    }

    #[test]
    fn precision_csv_flattens_curves() {
        let curves = vec![PrecisionAtK {
            method: "treatrag".into(),
            k_values: vec![1, 2],
            precision: vec![1.0, 0.5],
        }];
        let csv = precision_csv(&curves);
        assert_eq!(csv, "method,k,precision\ntreatrag,1,1.000000\ntreatrag,2,0.500000\n");
    }

    #[test]
    fn report_json_round_trips() {
        let eval = EvalReport {
            method: "pace".into(),
            backbone: "scripted".into(),
            report: tiny_report(),
            significance: vec![],
        };
        let json = serde_json::to_string_pretty(&eval).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, eval);
    }
}
