//! Paired two-tailed t-testing with a self-contained Student-t CDF.
//!
//! The CDF is evaluated by adaptive Simpson quadrature over the density
//! rather than through a statistics dependency, so the shipped binary owns
//! its own numerics; tests cross-check it against an independent
//! implementation.

use super::{EvalError, Metric};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Significance markers: `*` for p < 0.05, `**` for p < 0.01.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stars {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "*")]
    One,
    #[serde(rename = "**")]
    Two,
}

impl Stars {
    pub fn from_p(p: f64) -> Stars {
        if p < 0.01 {
            Stars::Two
        } else if p < 0.05 {
            Stars::One
        } else {
            Stars::None
        }
    }

    /// Suffix form for tables: empty, `*`, or `**`.
    pub fn as_str(&self) -> &'static str {
        match self {
            Stars::None => "",
            Stars::One => "*",
            Stars::Two => "**",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    /// Name of the baseline the comparison was made against.
    pub baseline: String,
    pub metric: Metric,
    pub t: f64,
    pub p: f64,
    pub stars: Stars,
}

/// Two-tailed paired t-test over per-seed metric values.
///
/// The series must be aligned by seed. Identical series are a meaningful
/// outcome (t = 0, p = 1, no stars); constant nonzero differences leave the
/// statistic undefined and are reported as an error for the caller to
/// surface, not a panic.
pub fn paired_t_test(
    baseline_name: &str,
    metric: Metric,
    ours: &[f64],
    baseline: &[f64],
) -> Result<SignificanceResult, EvalError> {
    if ours.len() != baseline.len() {
        return Err(EvalError::LengthMismatch {
            left: ours.len(),
            right: baseline.len(),
        });
    }
    let n = ours.len();
    if n < 2 {
        return Err(EvalError::TooFewPairs(n));
    }

    let diffs: Vec<f64> = ours.iter().zip(baseline).map(|(a, b)| a - b).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;

    if var == 0.0 {
        if mean == 0.0 {
            return Ok(SignificanceResult {
                baseline: baseline_name.to_string(),
                metric,
                t: 0.0,
                p: 1.0,
                stars: Stars::None,
            });
        }
        return Err(EvalError::ZeroVarianceDifferences { mean_diff: mean });
    }

    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let p = two_tailed_p(t, (n - 1) as f64);
    Ok(SignificanceResult {
        baseline: baseline_name.to_string(),
        metric,
        t,
        p,
        stars: Stars::from_p(p),
    })
}

/// Two-tailed p-value for a t statistic with `df` degrees of freedom.
pub fn two_tailed_p(t: f64, df: f64) -> f64 {
    let tail = 1.0 - student_t_cdf(t.abs(), df);
    (2.0 * tail).clamp(0.0, 1.0)
}

/// P(T ≤ x) for Student's t with `df` degrees of freedom, by integrating the
/// density from 0 with adaptive Simpson quadrature (the density is symmetric,
/// so CDF(x) = 1/2 + ∫₀ˣ).
pub fn student_t_cdf(x: f64, df: f64) -> f64 {
    assert!(df > 0.0, "degrees of freedom must be positive");
    if x == 0.0 {
        return 0.5;
    }
    let pdf = |u: f64| {
        let ln = ln_gamma((df + 1.0) / 2.0)
            - ln_gamma(df / 2.0)
            - 0.5 * (df * PI).ln()
            - (df + 1.0) / 2.0 * (1.0 + u * u / df).ln();
        ln.exp()
    };
    let hi = x.abs();
    let half = integrate(&pdf, 0.0, hi, 1e-13);
    let cdf = 0.5 + half.min(0.5);
    if x < 0.0 {
        1.0 - cdf
    } else {
        cdf
    }
}

/// Natural log of the gamma function (Lanczos approximation, g = 7).
fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection keeps the approximation in its accurate range.
        PI.ln() - (PI * x).sin().ln() - ln_gamma(1.0 - x)
    } else {
        let x = x - 1.0;
        let mut acc = COEFFS[0];
        for (i, &c) in COEFFS.iter().enumerate().skip(1) {
            acc += c / (x + i as f64);
        }
        let t = x + 7.5;
        0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
    }
}

fn simpson(fa: f64, fm: f64, fb: f64, width: f64) -> f64 {
    width / 6.0 * (fa + 4.0 * fm + fb)
}

fn integrate(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = simpson(fa, fm, fb, b - a);
    refine(f, a, b, fa, fm, fb, whole, tol, 48)
}

#[allow(clippy::too_many_arguments)]
fn refine(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let (flm, frm) = (f(lm), f(rm));
    let left = simpson(fa, flm, fm, m - a);
    let right = simpson(fm, frm, fb, b - m);
    let split = left + right;
    if depth == 0 || (split - whole).abs() <= 15.0 * tol {
        split + (split - whole) / 15.0
    } else {
        refine(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
            + refine(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use statrs::distribution::{ContinuousCDF, StudentsT};

    #[test]
    fn identical_series_are_a_null_result_not_an_error() {
        let xs = [0.8, 0.81, 0.79, 0.8, 0.82];
        let result = paired_t_test("self", Metric::F1, &xs, &xs).unwrap();
        assert_eq!(result.t, 0.0);
        assert_eq!(result.p, 1.0);
        assert_eq!(result.stars, Stars::None);
    }

    #[test]
    fn constant_nonzero_differences_are_degenerate() {
        let ours = [1.0, 2.0, 3.0, 4.0, 5.0];
        let base = [0.0, 1.0, 2.0, 3.0, 4.0];
        let err = paired_t_test("b", Metric::F1, &ours, &base).unwrap_err();
        assert!(
            matches!(err, EvalError::ZeroVarianceDifferences { mean_diff } if mean_diff == 1.0)
        );
    }

    #[test]
    fn length_and_pair_count_preconditions_hold() {
        assert!(matches!(
            paired_t_test("b", Metric::F1, &[1.0, 2.0], &[1.0]),
            Err(EvalError::LengthMismatch { left: 2, right: 1 })
        ));
        assert!(matches!(
            paired_t_test("b", Metric::F1, &[1.0], &[2.0]),
            Err(EvalError::TooFewPairs(1))
        ));
    }

    #[test]
    fn critical_values_match_the_published_t_table() {
        // Two-tailed critical points: (df, t, alpha).
        let table = [
            (4.0, 2.776_445, 0.05),
            (9.0, 3.249_836, 0.01),
            (19.0, 2.093_024, 0.05),
            (1.0, 12.706_205, 0.05),
        ];
        for (df, t, alpha) in table {
            let p = two_tailed_p(t, df);
            assert!(
                (p - alpha).abs() < 5e-6,
                "df={df} t={t}: p={p} vs alpha={alpha}"
            );
        }
    }

    #[test]
    fn stars_follow_the_thresholds() {
        assert_eq!(Stars::from_p(0.049), Stars::One);
        assert_eq!(Stars::from_p(0.009), Stars::Two);
        assert_eq!(Stars::from_p(0.05), Stars::None);
        assert_eq!(Stars::from_p(0.01), Stars::One);
    }

    #[test]
    fn cdf_matches_an_independent_implementation() {
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        for _ in 0..200 {
            let df = rng.random_range(1..60) as f64;
            let x: f64 = rng.random_range(-8.0..8.0);
            let reference = StudentsT::new(0.0, 1.0, df).unwrap().cdf(x);
            let ours = student_t_cdf(x, df);
            assert!(
                (ours - reference).abs() < 1e-9,
                "df={df} x={x}: {ours} vs {reference}"
            );
        }
    }

    #[test]
    fn paired_test_matches_the_direct_formula_on_random_samples() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..100 {
            let n = rng.random_range(3..12);
            let ours: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let base: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let result = match paired_t_test("b", Metric::F1, &ours, &base) {
                Ok(r) => r,
                Err(EvalError::ZeroVarianceDifferences { .. }) => continue,
                Err(e) => panic!("unexpected: {e}"),
            };
            let diffs: Vec<f64> = ours.iter().zip(&base).map(|(a, b)| a - b).collect();
            let mean = diffs.iter().sum::<f64>() / n as f64;
            let sd = super::super::sample_std(&diffs);
            let t_ref = mean / (sd / (n as f64).sqrt());
            let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).unwrap();
            let p_ref = 2.0 * (1.0 - dist.cdf(t_ref.abs()));
            assert!((result.t - t_ref).abs() < 1e-12);
            assert!((result.p - p_ref).abs() < 1e-9, "{} vs {p_ref}", result.p);
        }
    }
}
