//! Batch execution over a cohort: task construction, the per-method
//! dispatcher, and a resumable, lock-guarded JSONL manifest writer.
//!
//! A run directory belongs to exactly one (method, backend, seed) triple.
//! Results append to `manifest.jsonl` one visit per line, in task order, so
//! two runs over the same inputs produce byte-identical manifests and an
//! interrupted run picks up where it left off.

use super::baselines::{
    run_guideline_rag, run_medreflect, run_treatrag, run_zero_shot, GuidelineConfig,
};
use super::stages::{run_pace, PaceConfig};
use super::{PipelineError, PipelineOutput};
use crate::cohort::{DrugSet, PatientRecord, Visit, VisitKind};
use crate::llm::{Backend, GenerationParams};
use crate::retrieval::{DenseIndex, Embedder, FieldTag, IndexEntry};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

/// Which recommendation flow a run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Pace,
    ZeroShot,
    Guideline,
    Treatrag,
    Medreflect,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Pace,
        Method::ZeroShot,
        Method::Guideline,
        Method::Treatrag,
        Method::Medreflect,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Pace => "pace",
            Method::ZeroShot => "zero_shot",
            Method::Guideline => "guideline",
            Method::Treatrag => "treatrag",
            Method::Medreflect => "medreflect",
        }
    }

    /// Accepts the canonical name with either underscores or hyphens.
    pub fn parse(name: &str) -> Option<Method> {
        let normalized = name.trim().to_ascii_lowercase().replace('-', "_");
        Method::ALL.into_iter().find(|m| m.as_str() == normalized)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One prediction target: a visit at index >= 1 of some patient, bundled
/// with everything the flows need so they never touch the full record.
#[derive(Debug, Clone)]
pub struct VisitTask {
    pub patient_id: String,
    pub visit_index: usize,
    pub visit: Visit,
    /// Up to three visits immediately preceding this one, oldest first.
    pub history: Vec<Visit>,
    /// Medications carried in from the previous visit.
    pub active_history: DrugSet,
    /// The prescription actually issued at this visit.
    pub gold: DrugSet,
}

/// Every follow-up visit in the given records, in record order. First visits
/// are skipped: with no history there is nothing to maintain or refine.
pub fn visit_tasks(records: &[PatientRecord]) -> Vec<VisitTask> {
    let mut tasks = Vec::new();
    for record in records {
        for t in 1..record.visits.len() {
            tasks.push(VisitTask {
                patient_id: record.patient_id.clone(),
                visit_index: t,
                visit: record.visits[t].clone(),
                history: record.history_window(t).to_vec(),
                active_history: record.active_history(t),
                gold: record.visits[t].ground_truth.clone(),
            });
        }
    }
    tasks
}

/// Flatten pool patients into retrieval entries: one per populated field per
/// visit, each carrying that visit's prescription and the medications the
/// patient walked in with.
pub fn case_entries(pool: &[PatientRecord]) -> Vec<IndexEntry> {
    let mut entries = Vec::new();
    for record in pool {
        for (t, visit) in record.visits.iter().enumerate() {
            let prior = record.active_history(t);
            let mut push = |field_tag: FieldTag, text: String| {
                if !text.trim().is_empty() {
                    entries.push(IndexEntry {
                        patient_id: record.patient_id.clone(),
                        field_tag,
                        text,
                        associated_drugs: visit.ground_truth.clone(),
                        prior_drugs: prior.clone(),
                    });
                }
            };
            match visit.kind {
                VisitKind::Soap => {
                    push(FieldTag::Subjective, visit.subjective.clone());
                    push(FieldTag::Assessment, visit.assessment.clone());
                }
                VisitKind::Admission => {
                    push(FieldTag::DiagnosisList, visit.diagnoses_text());
                }
            }
        }
    }
    entries
}

#[derive(Debug, Clone)]
pub struct RunPlan {
    pub method: Method,
    pub params: GenerationParams,
    pub pace: PaceConfig,
    pub guideline: GuidelineConfig,
    pub run_dir: PathBuf,
    /// Visits completed concurrently per batch; 1 disables threading.
    pub parallelism: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub total_targets: usize,
    pub newly_run: usize,
    pub resumed: usize,
    /// Visits where the audited final set differed from the model's proposal.
    pub divergent_visits: usize,
    /// Visits that ended with an empty prescription and no fallback.
    pub degenerate_empty: usize,
    pub manifest_path: PathBuf,
}

pub fn manifest_path(run_dir: &Path) -> PathBuf {
    run_dir.join("manifest.jsonl")
}

/// Exclusive claim on a run directory for the lifetime of the guard.
struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    fn acquire(run_dir: &Path) -> Result<Self, PipelineError> {
        let path = run_dir.join(".lock");
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut file) => {
                let _ = writeln!(file, "{}", std::process::id());
                Ok(LockGuard { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(PipelineError::Locked(run_dir.to_path_buf()))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Load prior results from a manifest, repairing the one damage an
/// interrupted run can cause: a partial final line. That line is cut off and
/// its visit re-runs; damage anywhere earlier is refused instead of guessed
/// around.
fn resume_manifest(path: &Path) -> Result<Vec<PipelineOutput>, PipelineError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let raw = fs::read_to_string(path)?;
    let mut chunks = Vec::new();
    let mut offset = 0usize;
    for chunk in raw.split_inclusive('\n') {
        chunks.push((offset, chunk));
        offset += chunk.len();
    }

    let mut outputs = Vec::new();
    for (i, &(start, chunk)) in chunks.iter().enumerate() {
        let text = chunk.trim_end_matches(['\n', '\r']);
        if text.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<PipelineOutput>(text);
        match parsed {
            Ok(output) if chunk.ends_with('\n') => outputs.push(output),
            other => {
                let rest_is_blank = chunks[i + 1..].iter().all(|(_, c)| c.trim().is_empty());
                if rest_is_blank {
                    // Partial tail: truncate it away and re-run that visit.
                    let file = fs::OpenOptions::new().write(true).open(path)?;
                    file.set_len(start as u64)?;
                    break;
                }
                match other {
                    Ok(_) => unreachable!("a complete line either parses or errors"),
                    Err(source) => {
                        return Err(PipelineError::ManifestLine {
                            line: i + 1,
                            source,
                        })
                    }
                }
            }
        }
    }
    Ok(outputs)
}

/// Strict manifest reader for evaluation: every line must parse.
pub fn read_manifest(path: &Path) -> Result<Vec<PipelineOutput>, PipelineError> {
    let raw = fs::read_to_string(path)?;
    let mut outputs = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let output = serde_json::from_str::<PipelineOutput>(line)
            .map_err(|source| PipelineError::ManifestLine {
                line: i + 1,
                source,
            })?;
        outputs.push(output);
    }
    Ok(outputs)
}

fn check_pool_leak(
    output: &PipelineOutput,
    test_ids: &BTreeSet<&str>,
) -> Result<(), PipelineError> {
    let leaked = output
        .tendencies
        .iter()
        .flat_map(|t| t.retrieved.iter())
        .chain(output.retrieved.iter())
        .find(|case| test_ids.contains(case.entry.patient_id.as_str()));
    match leaked {
        Some(case) => Err(PipelineError::PoolLeak {
            patient_id: case.entry.patient_id.clone(),
        }),
        None => Ok(()),
    }
}

/// Run `plan.method` over every follow-up visit of the test records,
/// retrieving only from the pool records. Appends to the run directory's
/// manifest and skips visits already present in it.
pub fn execute_run(
    backend: &dyn Backend,
    plan: &RunPlan,
    pool: &[PatientRecord],
    test: &[PatientRecord],
    guideline_index: Option<&DenseIndex>,
    embedder: &dyn Embedder,
) -> Result<RunSummary, PipelineError> {
    if plan.method == Method::Guideline && guideline_index.is_none() {
        return Err(PipelineError::MissingGuidelineIndex);
    }
    fs::create_dir_all(&plan.run_dir)?;
    let _lock = LockGuard::acquire(&plan.run_dir)?;
    let manifest = manifest_path(&plan.run_dir);

    let existing = resume_manifest(&manifest)?;
    let done: BTreeSet<(String, usize)> = existing
        .iter()
        .map(|o| (o.patient_id.clone(), o.visit_index))
        .collect();

    let tasks = visit_tasks(test);
    let total_targets = tasks.len();
    let pending: Vec<&VisitTask> = tasks
        .iter()
        .filter(|t| !done.contains(&(t.patient_id.clone(), t.visit_index)))
        .collect();

    // Only build what the method actually consults.
    let (dense, case_pool) = match plan.method {
        Method::Pace => (
            Some(DenseIndex::build(case_entries(pool), embedder)?),
            Vec::new(),
        ),
        Method::Treatrag => (None, case_entries(pool)),
        _ => (None, Vec::new()),
    };

    let run_one = |task: &VisitTask| -> Result<PipelineOutput, PipelineError> {
        match plan.method {
            Method::Pace => run_pace(
                backend,
                plan.params,
                dense.as_ref().expect("index built for this method"),
                embedder,
                task,
                &plan.pace,
            ),
            Method::ZeroShot => run_zero_shot(backend, plan.params, task),
            Method::Guideline => run_guideline_rag(
                backend,
                plan.params,
                guideline_index.expect("presence checked above"),
                embedder,
                task,
                &plan.guideline,
            ),
            Method::Treatrag => run_treatrag(backend, plan.params, task, &case_pool),
            Method::Medreflect => run_medreflect(backend, plan.params, task),
        }
    };

    let test_ids: BTreeSet<&str> = test.iter().map(|r| r.patient_id.as_str()).collect();
    let workers = plan.parallelism.max(1);
    let mut writer = BufWriter::new(
        fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&manifest)?,
    );

    let mut newly_run = 0usize;
    let mut divergent_visits = existing
        .iter()
        .filter(|o| o.refinement.divergences > 0)
        .count();
    let mut degenerate_empty = existing
        .iter()
        .filter(|o| o.refinement.degenerate_empty)
        .count();

    for batch in pending.chunks(workers) {
        let results: Vec<Result<PipelineOutput, PipelineError>> = if workers == 1 {
            batch.iter().map(|task| run_one(task)).collect()
        } else {
            let run_one = &run_one;
            std::thread::scope(|scope| {
                let handles: Vec<_> = batch
                    .iter()
                    .map(|task| scope.spawn(move || run_one(task)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("worker thread panicked"))
                    .collect()
            })
        };
        // Write in task order regardless of completion order; on a failure
        // the completed prefix of the batch is still recorded for resume.
        for result in results {
            let output = result?;
            check_pool_leak(&output, &test_ids)?;
            if output.refinement.divergences > 0 {
                divergent_visits += 1;
            }
            if output.refinement.degenerate_empty {
                degenerate_empty += 1;
            }
            let line = serde_json::to_string(&output).expect("manifest line serializes");
            writeln!(writer, "{line}")?;
            newly_run += 1;
        }
        writer.flush()?;
    }
    writer.flush()?;

    Ok(RunSummary {
        total_targets,
        newly_run,
        resumed: existing.len(),
        divergent_visits,
        degenerate_empty,
        manifest_path: manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{generate_synthetic_cohort, split_cohort, SplitSpec, SynthConfig};
    use crate::llm::ScriptedBackend;
    use crate::retrieval::HashEmbedder;

    fn small_world() -> (Vec<PatientRecord>, Vec<PatientRecord>, ScriptedBackend) {
        let synth = generate_synthetic_cohort(&SynthConfig {
            patients: 14,
            seed: 11,
            visits_min: 2,
            visits_max: 3,
            ..SynthConfig::default()
        });
        let split = split_cohort(synth.records, &SplitSpec::default()).unwrap();
        (split.pool, split.test, ScriptedBackend::new(synth.oracle))
    }

    fn plan_for(method: Method, dir: &Path) -> RunPlan {
        RunPlan {
            method,
            params: GenerationParams::llama_profile(),
            pace: PaceConfig::default(),
            guideline: GuidelineConfig::default(),
            run_dir: dir.to_path_buf(),
            parallelism: 2,
        }
    }

    #[test]
    fn method_names_round_trip() {
        for method in Method::ALL {
            assert_eq!(Method::parse(method.as_str()), Some(method));
        }
        assert_eq!(Method::parse("Zero-Shot"), Some(Method::ZeroShot));
        assert_eq!(Method::parse("unknown"), None);
    }

    #[test]
    fn visit_tasks_cover_every_follow_up() {
        let (pool, test, _) = small_world();
        let tasks = visit_tasks(&test);
        let expected: usize = test.iter().map(|r| r.visits.len() - 1).sum();
        assert_eq!(tasks.len(), expected);
        for task in &tasks {
            assert!(task.visit_index >= 1);
            assert_eq!(task.history.len(), task.visit_index.min(3));
            let record = test
                .iter()
                .find(|r| r.patient_id == task.patient_id)
                .unwrap();
            assert_eq!(task.gold, record.visits[task.visit_index].ground_truth);
            assert_eq!(
                task.active_history,
                record.visits[task.visit_index - 1].ground_truth
            );
        }
        assert!(!visit_tasks(&pool).is_empty());
    }

    #[test]
    fn case_entries_tag_fields_and_carry_prior_medications() {
        let (pool, _, _) = small_world();
        let entries = case_entries(&pool);
        let expected: usize = pool.iter().map(|r| r.visits.len() * 2).sum();
        assert_eq!(entries.len(), expected, "subjective + assessment per visit");
        let first = pool.first().unwrap();
        let first_entries: Vec<&IndexEntry> = entries
            .iter()
            .filter(|e| e.patient_id == first.patient_id)
            .collect();
        assert_eq!(first_entries[0].field_tag, FieldTag::Subjective);
        assert_eq!(first_entries[1].field_tag, FieldTag::Assessment);
        assert!(first_entries[0].prior_drugs.is_empty(), "nothing before t=0");
        assert_eq!(first_entries[0].associated_drugs, first.visits[0].ground_truth);
        assert_eq!(first_entries[2].prior_drugs, first.visits[0].ground_truth);
    }

    #[test]
    fn scripted_run_is_complete_ordered_and_reproducible() {
        let (pool, test, backend) = small_world();
        let embedder = HashEmbedder::new(256);

        let dir_a = tempfile::tempdir().unwrap();
        let plan_a = plan_for(Method::Pace, dir_a.path());
        let summary = execute_run(&backend, &plan_a, &pool, &test, None, &embedder).unwrap();
        assert_eq!(summary.newly_run, summary.total_targets);
        assert_eq!(summary.resumed, 0);

        let outputs = read_manifest(&summary.manifest_path).unwrap();
        assert_eq!(outputs.len(), summary.total_targets);
        let task_order: Vec<(String, usize)> = visit_tasks(&test)
            .iter()
            .map(|t| (t.patient_id.clone(), t.visit_index))
            .collect();
        let manifest_order: Vec<(String, usize)> = outputs
            .iter()
            .map(|o| (o.patient_id.clone(), o.visit_index))
            .collect();
        assert_eq!(manifest_order, task_order, "manifest preserves task order");

        // Same inputs, different parallelism: byte-identical manifest.
        let dir_b = tempfile::tempdir().unwrap();
        let mut plan_b = plan_for(Method::Pace, dir_b.path());
        plan_b.parallelism = 1;
        let summary_b = execute_run(&backend, &plan_b, &pool, &test, None, &embedder).unwrap();
        let bytes_a = fs::read(&summary.manifest_path).unwrap();
        let bytes_b = fs::read(&summary_b.manifest_path).unwrap();
        assert_eq!(bytes_a, bytes_b);
    }

    #[test]
    fn interrupted_run_resumes_to_identical_bytes() {
        let (pool, test, backend) = small_world();
        let embedder = HashEmbedder::new(256);

        let dir_full = tempfile::tempdir().unwrap();
        let full = execute_run(
            &backend,
            &plan_for(Method::Pace, dir_full.path()),
            &pool,
            &test,
            None,
            &embedder,
        )
        .unwrap();
        let full_bytes = fs::read(&full.manifest_path).unwrap();

        // Simulate an interruption: keep two complete lines plus a torn third.
        let text = String::from_utf8(full_bytes.clone()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines.len() >= 3, "need enough visits to tear the manifest");
        let torn = format!(
            "{}\n{}\n{}",
            lines[0],
            lines[1],
            &lines[2][..lines[2].len() / 2]
        );
        let dir_resume = tempfile::tempdir().unwrap();
        fs::write(manifest_path(dir_resume.path()), torn).unwrap();

        let resumed = execute_run(
            &backend,
            &plan_for(Method::Pace, dir_resume.path()),
            &pool,
            &test,
            None,
            &embedder,
        )
        .unwrap();
        assert_eq!(resumed.resumed, 2);
        assert_eq!(resumed.newly_run, resumed.total_targets - 2);
        let resumed_bytes = fs::read(&resumed.manifest_path).unwrap();
        assert_eq!(resumed_bytes, full_bytes);
    }

    #[test]
    fn corruption_before_the_tail_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = manifest_path(dir.path());
        fs::write(&path, "{not json}\n{\"also\": \"wrong shape\"}\n").unwrap();
        let err = resume_manifest(&path).unwrap_err();
        assert!(matches!(err, PipelineError::ManifestLine { line: 1, .. }));
    }

    #[test]
    fn locked_directory_rejects_a_second_run() {
        let (pool, test, backend) = small_world();
        let embedder = HashEmbedder::new(256);
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(".lock"), "held\n").unwrap();
        let err = execute_run(
            &backend,
            &plan_for(Method::ZeroShot, dir.path()),
            &pool,
            &test,
            None,
            &embedder,
        )
        .unwrap_err();
        assert!(matches!(err, PipelineError::Locked(_)));
        // The pre-existing lock is not ours to clean up.
        assert!(dir.path().join(".lock").exists());
    }

    #[test]
    fn guideline_method_requires_an_index() {
        let (pool, test, backend) = small_world();
        let embedder = HashEmbedder::new(256);
        let dir = tempfile::tempdir().unwrap();
        let err = execute_run(
            &backend,
            &plan_for(Method::Guideline, dir.path()),
            &pool,
            &test,
            None,
            &embedder,
        )
        .unwrap_err();
        assert!(matches!(err, PipelineError::MissingGuidelineIndex));
    }

    #[test]
    fn every_baseline_completes_on_the_scripted_backend() {
        let (pool, test, backend) = small_world();
        let embedder = HashEmbedder::new(256);
        // A tiny guideline corpus so the guideline method has something to hit.
        let chunks: Vec<IndexEntry> = crate::cohort::SynthOracle::builtin()
            .symptom_drug
            .iter()
            .map(|(symptom, drug)| IndexEntry {
                patient_id: "guideline".to_string(),
                field_tag: FieldTag::GuidelineChunk,
                text: format!("For {symptom}, initiate {drug}."),
                associated_drugs: DrugSet::new(),
                prior_drugs: DrugSet::new(),
            })
            .collect();
        let guideline_index = DenseIndex::build(chunks, &embedder).unwrap();

        for method in Method::ALL {
            let dir = tempfile::tempdir().unwrap();
            let summary = execute_run(
                &backend,
                &plan_for(method, dir.path()),
                &pool,
                &test,
                Some(&guideline_index),
                &embedder,
            )
            .unwrap_or_else(|e| panic!("{method} failed: {e}"));
            assert_eq!(summary.newly_run, summary.total_targets, "{method}");
            let outputs = read_manifest(&summary.manifest_path).unwrap();
            assert!(outputs.iter().all(|o| !o.trace.is_empty()), "{method}");
        }
    }
}
