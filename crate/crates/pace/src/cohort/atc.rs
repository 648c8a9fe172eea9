//! NDC→ATC drug-class mapping.
//!
//! The mapping lives in a two-column tab-separated text file (`<NDC>\t<ATC
//! label>`); labels may contain commas, which is why the delimiter is a tab.
//! Lines that are blank or start with `#` are skipped. A small fetch utility
//! builds such a file from an HTTP service exposing `GET
//! <base>/ndc/<code>` → `{"atc": "<label>"}` (404 = unmapped).

use super::{canonicalize_drug, CohortError, DrugSet};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, Default)]
pub struct AtcMapping {
    by_ndc: BTreeMap<String, String>,
}

/// Tally of how code mapping went during an ingestion pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MappingStats {
    pub mapped_codes: usize,
    pub unmapped_codes: usize,
}

impl AtcMapping {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let by_ndc = pairs
            .into_iter()
            .map(|(ndc, atc)| (ndc.trim().to_string(), canonicalize_drug(atc)))
            .collect();
        AtcMapping { by_ndc }
    }

    pub fn load(path: &Path) -> Result<Self, CohortError> {
        let raw = fs::read_to_string(path)?;
        let mut by_ndc = BTreeMap::new();
        for (idx, line) in raw.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (ndc, atc) = line.split_once('\t').ok_or(CohortError::MalformedMapping {
                line: idx + 1,
                detail: "expected two tab-separated columns".into(),
            })?;
            let label = canonicalize_drug(atc);
            if ndc.trim().is_empty() || label.is_empty() {
                return Err(CohortError::MalformedMapping {
                    line: idx + 1,
                    detail: "empty code or label".into(),
                });
            }
            by_ndc.insert(ndc.trim().to_string(), label);
        }
        Ok(AtcMapping { by_ndc })
    }

    pub fn save(&self, path: &Path) -> Result<(), CohortError> {
        let mut out = String::new();
        for (ndc, atc) in &self.by_ndc {
            out.push_str(ndc);
            out.push('\t');
            out.push_str(atc);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.by_ndc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_ndc.is_empty()
    }

    pub fn get(&self, ndc: &str) -> Option<&str> {
        self.by_ndc.get(ndc.trim()).map(String::as_str)
    }

    /// Map a code list to the deduplicated label set, tallying hits/misses.
    pub fn map_codes(&self, codes: &[String], stats: &mut MappingStats) -> DrugSet {
        let mut set = DrugSet::new();
        for code in codes {
            match self.get(code) {
                Some(label) => {
                    stats.mapped_codes += 1;
                    set.insert(label);
                }
                None => stats.unmapped_codes += 1,
            }
        }
        set
    }
}

/// Query an NDC→ATC lookup service for each code and write the resulting
/// two-column table. Codes the service does not know (HTTP 404) are skipped
/// and counted; any other failure aborts, since a partial table written from
/// a flaky source would silently shrink the cohort.
pub fn fetch_ndc_atc_table(
    base_url: &str,
    codes: &[String],
    out_path: &Path,
) -> Result<MappingStats, Box<dyn std::error::Error>> {
    #[derive(serde::Deserialize)]
    struct AtcResponse {
        atc: String,
    }

    let client = reqwest::blocking::Client::new();
    let mut stats = MappingStats::default();
    let mut pairs: Vec<(String, String)> = Vec::new();
    for code in codes {
        let url = format!("{}/ndc/{}", base_url.trim_end_matches('/'), code.trim());
        let resp = client.get(&url).send()?;
        if resp.status() == reqwest::StatusCode::NOT_FOUND {
            stats.unmapped_codes += 1;
            continue;
        }
        let resp = resp.error_for_status()?;
        let body: AtcResponse = resp.json()?;
        stats.mapped_codes += 1;
        pairs.push((code.trim().to_string(), body.atc));
    }
    let mapping = AtcMapping::from_pairs(pairs.iter().map(|(n, a)| (n.as_str(), a.as_str())));
    mapping.save(out_path)?;
    Ok(stats)
}
