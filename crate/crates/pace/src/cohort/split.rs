//! Patient-level pool/test splitting.
//!
//! Retrieval evidence may only come from pool patients, so the split is done
//! at the patient level: a seeded shuffle of patient order followed by a cut.
//! Two cut modes: a pool ratio (cut at `floor(ratio * n_patients)`) or a
//! target test-encounter count (patients are assigned to the test side until
//! their encounters reach the target, so the realized count lands at the
//! first patient boundary at or past it).

use super::{CohortError, PatientRecord};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum SplitMode {
    /// Fraction of patients assigned to the pool side, in (0, 1).
    PoolRatio(f64),
    /// Approximate number of test-side encounters (visits/admissions).
    FixedTestCount(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            mode: SplitMode::PoolRatio(0.8),
            seed: 42,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CohortSplit {
    pub pool: Vec<PatientRecord>,
    pub test: Vec<PatientRecord>,
}

pub fn split_cohort(
    records: Vec<PatientRecord>,
    spec: &SplitSpec,
) -> Result<CohortSplit, CohortError> {
    if records.is_empty() {
        return Err(CohortError::EmptyCohort);
    }
    let total_encounters: usize = records.iter().map(|r| r.visits.len()).sum();

    let mut shuffled = records;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    shuffled.shuffle(&mut rng);

    match spec.mode {
        SplitMode::PoolRatio(ratio) => {
            if !(ratio > 0.0 && ratio < 1.0) {
                return Err(CohortError::InvalidSplit(format!(
                    "pool ratio {ratio} outside (0, 1)"
                )));
            }
            let cut = ((shuffled.len() as f64) * ratio).floor() as usize;
            if cut == 0 || cut == shuffled.len() {
                return Err(CohortError::InvalidSplit(format!(
                    "ratio {ratio} leaves an empty side for {} patients",
                    shuffled.len()
                )));
            }
            let test = shuffled.split_off(cut);
            Ok(CohortSplit {
                pool: shuffled,
                test,
            })
        }
        SplitMode::FixedTestCount(target) => {
            if target == 0 || target >= total_encounters {
                return Err(CohortError::InvalidSplit(format!(
                    "test encounter target {target} must be in 1..{total_encounters}"
                )));
            }
            let mut test = Vec::new();
            let mut pool = Vec::new();
            let mut test_encounters = 0usize;
            for record in shuffled {
                if test_encounters < target {
                    test_encounters += record.visits.len();
                    test.push(record);
                } else {
                    pool.push(record);
                }
            }
            if pool.is_empty() {
                return Err(CohortError::InvalidSplit(format!(
                    "test encounter target {target} consumed every patient"
                )));
            }
            Ok(CohortSplit { pool, test })
        }
    }
}
