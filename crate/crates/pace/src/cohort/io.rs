//! Cohort file formats and raw-source ingestion.
//!
//! The interchange format is JSON-lines: one [`PatientRecord`] object per
//! line. Two ingestion paths produce it:
//!
//! * a folder of SOAP note files, `<dir>/<patient_id>/<nn>.txt`, visits
//!   ordered by file name, ground truth parsed from each note's Plan section;
//! * an admissions JSON-lines file (`{subject_id, admission_id?, seq?,
//!   diagnoses, ndc_codes}` per line) plus an NDC→ATC mapping table, ground
//!   truth being the deduplicated mapped labels.

use super::atc::{AtcMapping, MappingStats};
use super::{parse_plan_labels, parse_soap, CohortError, PatientRecord, Visit};
use serde::Deserialize;
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub fn read_cohort_jsonl(path: &Path) -> Result<Vec<PatientRecord>, CohortError> {
    let file = fs::File::open(path)?;
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PatientRecord = serde_json::from_str(&line)
            .map_err(|source| CohortError::MalformedLine { line: idx + 1, source })?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(CohortError::EmptyCohort);
    }
    Ok(records)
}

pub fn write_cohort_jsonl(path: &Path, records: &[PatientRecord]) -> Result<(), CohortError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = fs::File::create(path)?;
    for record in records {
        let line = serde_json::to_string(record).expect("cohort records serialize");
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Read every `.txt`/`.md` file under a directory (sorted by name) and return
/// their contents — the raw corpus for guideline chunking.
pub fn read_guideline_corpus(dir: &Path) -> Result<Vec<String>, CohortError> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|ext| ext == "txt" || ext == "md")
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    let mut docs = Vec::new();
    for path in paths {
        docs.push(fs::read_to_string(&path)?);
    }
    Ok(docs)
}

/// Ingest a folder of SOAP notes: one subdirectory per patient, one `.txt`
/// file per visit, visit order given by lexicographic file name.
pub fn ingest_soap_dir(dir: &Path) -> Result<Vec<PatientRecord>, CohortError> {
    let mut patient_dirs: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    patient_dirs.sort();
    let mut records = Vec::new();
    for pdir in patient_dirs {
        let patient_id = pdir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut note_paths: Vec<_> = fs::read_dir(&pdir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|ext| ext == "txt").unwrap_or(false))
            .collect();
        note_paths.sort();
        let mut visits = Vec::new();
        for npath in note_paths {
            let raw = fs::read_to_string(&npath)?;
            let note = parse_soap(&raw)?;
            let ground_truth = parse_plan_labels(&note.plan);
            visits.push(Visit::soap(note, ground_truth));
        }
        if !visits.is_empty() {
            records.push(PatientRecord { patient_id, visits });
        }
    }
    if records.is_empty() {
        return Err(CohortError::EmptyCohort);
    }
    Ok(records)
}

#[derive(Debug, Deserialize)]
struct AdmissionLine {
    subject_id: String,
    #[serde(default)]
    admission_id: Option<String>,
    #[serde(default)]
    seq: Option<u64>,
    #[serde(default)]
    diagnoses: Vec<String>,
    #[serde(default)]
    ndc_codes: Vec<String>,
}

/// Ingest admission lines, mapping NDC codes to ATC labels. Admissions whose
/// prescription maps to nothing are kept (their ground truth is empty) and
/// unmapped codes are tallied in the returned [`MappingStats`].
pub fn ingest_admissions_jsonl(
    path: &Path,
    mapping: &AtcMapping,
) -> Result<(Vec<PatientRecord>, MappingStats), CohortError> {
    let file = fs::File::open(path)?;
    let mut by_subject: BTreeMap<String, Vec<(u64, AdmissionLine)>> = BTreeMap::new();
    let mut stats = MappingStats::default();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: AdmissionLine = serde_json::from_str(&line)
            .map_err(|source| CohortError::MalformedLine { line: idx + 1, source })?;
        let seq = parsed.seq.unwrap_or(idx as u64);
        by_subject
            .entry(parsed.subject_id.clone())
            .or_default()
            .push((seq, parsed));
    }
    let mut records = Vec::new();
    for (subject_id, mut lines) in by_subject {
        lines.sort_by_key(|(seq, _)| *seq);
        let visits = lines
            .into_iter()
            .map(|(_, l)| {
                let ground_truth = mapping.map_codes(&l.ndc_codes, &mut stats);
                Visit::admission(l.admission_id, l.diagnoses, ground_truth)
            })
            .collect();
        records.push(PatientRecord {
            patient_id: subject_id,
            visits,
        });
    }
    if records.is_empty() {
        return Err(CohortError::EmptyCohort);
    }
    Ok((records, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{DrugSet, SoapNote};
    use std::fs;

    #[test]
    fn cohort_jsonl_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cohort.jsonl");
        let records = vec![PatientRecord {
            patient_id: "p1".into(),
            visits: vec![Visit::soap(
                SoapNote {
                    subjective: "tremor".into(),
                    plan: "Levodopa".into(),
                    ..SoapNote::default()
                },
                ["Levodopa"].into_iter().collect(),
            )],
        }];
        write_cohort_jsonl(&path, &records).unwrap();
        let back = read_cohort_jsonl(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].visits[0].subjective, "tremor");
        assert!(back[0].visits[0].ground_truth.contains("levodopa"));
    }

    #[test]
    fn malformed_line_is_reported_with_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(&path, "{\"patient_id\": \"p1\", \"visits\": []}\nnot json\n").unwrap();
        match read_cohort_jsonl(&path) {
            Err(CohortError::MalformedLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected MalformedLine, got {other:?}"),
        }
    }

    #[test]
    fn soap_dir_ingestion_orders_visits_by_file_name() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("hph-007");
        fs::create_dir_all(&p).unwrap();
        fs::write(p.join("02.txt"), "S: worse\nP: Levodopa, Rasagiline").unwrap();
        fs::write(p.join("01.txt"), "S: fine\nP: Levodopa").unwrap();
        let records = ingest_soap_dir(dir.path()).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].patient_id, "hph-007");
        assert_eq!(records[0].visits.len(), 2);
        assert_eq!(records[0].visits[0].ground_truth.len(), 1);
        assert_eq!(records[0].visits[1].ground_truth.len(), 2);
    }

    #[test]
    fn admission_ingestion_maps_and_counts_exclusions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adm.jsonl");
        fs::write(
            &path,
            concat!(
                "{\"subject_id\":\"s1\",\"seq\":2,\"diagnoses\":[\"sepsis\"],\"ndc_codes\":[\"111\",\"999\"]}\n",
                "{\"subject_id\":\"s1\",\"seq\":1,\"diagnoses\":[\"pneumonia\"],\"ndc_codes\":[\"222\",\"111\"]}\n",
            ),
        )
        .unwrap();
        let mapping = AtcMapping::from_pairs([("111", "ace inhibitors, plain"), ("222", "beta blockers")]);
        let (records, stats) = ingest_admissions_jsonl(&path, &mapping).unwrap();
        assert_eq!(records.len(), 1);
        let visits = &records[0].visits;
        assert_eq!(visits[0].diagnoses, vec!["pneumonia"]); // seq 1 first
        assert_eq!(
            visits[1].ground_truth,
            ["ace inhibitors, plain"].into_iter().collect::<DrugSet>()
        );
        assert_eq!(stats.unmapped_codes, 1);
        assert_eq!(stats.mapped_codes, 3);
    }
}
