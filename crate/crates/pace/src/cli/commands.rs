//! The six operator commands. Each takes a resolved [`RunConfig`], touches
//! only the paths named there, and returns a typed artifact summary the
//! binary renders for humans.

use super::{BackendKind, CliError, RunConfig, SweepSpec, ENV_API_KEY};
use crate::cohort::{
    generate_synthetic_cohort, ingest_admissions_jsonl, ingest_soap_dir, read_cohort_jsonl,
    read_guideline_corpus, split_cohort, write_cohort_jsonl, AtcMapping, DrugSet, SynthOracle,
};
use crate::eval::{
    aggregate, default_k_values, metrics_csv, paired_t_test, precision_csv, precision_curve,
    ranked_cases, report_rows, visit_counts, Averaging, EvalError, EvalReport, Metric,
    MetricReport, PrecisionAtK, SeedScores, SignificanceResult,
};
use crate::llm::{Backend, HttpBackend, ScriptedBackend};
use crate::pipeline::{
    case_entries, execute_run, manifest_path, read_manifest, visit_tasks, Method, PipelineOutput,
    RunPlan, RunSummary,
};
use crate::prompts::Flavor;
use crate::retrieval::{
    chunk_text, DenseIndex, Embedder, FieldTag, HashEmbedder, HttpEmbedder, IndexEntry,
    RetrievedCase, SparseIndex,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};
use std::time::Duration;

/// Guideline documents are chunked to this size (characters) …
pub const GUIDELINE_CHUNK_SIZE: usize = 1200;
/// … with this much shared context between consecutive chunks.
pub const GUIDELINE_CHUNK_OVERLAP: usize = 200;

/// SHA-256 of a file's bytes, lowercase hex.
pub fn sha256_hex(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let body = serde_json::to_string_pretty(value).map_err(|source| CliError::Artifact {
        context: format!("serializing {}", path.display()),
        source,
    })?;
    fs::write(path, body + "\n")?;
    Ok(())
}

fn build_backend(config: &RunConfig) -> Result<Box<dyn Backend>, CliError> {
    match config.backend.kind {
        BackendKind::Scripted => {
            let oracle = read_oracle(&config.paths.oracle)?;
            let mut backend = ScriptedBackend::new(oracle);
            if config.backend.simulate_sampling {
                backend = backend.with_simulated_sampling();
            }
            Ok(Box::new(backend))
        }
        BackendKind::Http => {
            let url = config.backend.url.clone().ok_or_else(|| {
                CliError::Usage("the http backend needs an endpoint URL".into())
            })?;
            let api_key = std::env::var(ENV_API_KEY)
                .ok()
                .filter(|k| !k.trim().is_empty());
            Ok(Box::new(HttpBackend::new(
                url,
                config.backend.model.clone(),
                api_key,
                Duration::from_secs(config.backend.timeout_secs),
                config.backend.max_retries,
            )))
        }
    }
}

fn build_embedder(config: &RunConfig) -> Result<Box<dyn Embedder>, CliError> {
    Ok(match &config.backend.embed_url {
        Some(url) => Box::new(HttpEmbedder::connect(url)?),
        None => Box::new(HashEmbedder::default()),
    })
}

/// The scripted backend's world model, as written by the synth command.
pub fn read_oracle(path: &Path) -> Result<SynthOracle, CliError> {
    let raw = fs::read_to_string(path).map_err(|e| {
        CliError::Data(format!(
            "cannot read oracle {}: {e}; the synth command writes it",
            path.display()
        ))
    })?;
    serde_json::from_str(&raw).map_err(|source| CliError::Artifact {
        context: format!("oracle {}", path.display()),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthArtifacts {
    pub cohort: PathBuf,
    pub oracle: PathBuf,
    pub guidelines: PathBuf,
    pub guideline_files: usize,
    pub patients: usize,
    pub cohort_sha256: String,
}

/// Generate the synthetic cohort plus the two artifacts that make it
/// runnable offline: the oracle file the scripted backend consumes, and a
/// small guideline corpus (one document per treatable symptom).
pub fn cmd_synth(config: &RunConfig) -> Result<SynthArtifacts, CliError> {
    config.synth.validate().map_err(CliError::Usage)?;
    let out = generate_synthetic_cohort(&config.synth);
    write_cohort_jsonl(&config.paths.cohort, &out.records)?;
    write_json(&config.paths.oracle, &out.oracle)?;

    fs::create_dir_all(&config.paths.guidelines)?;
    let mut guideline_files = 0usize;
    for (i, (symptom, drug)) in out.oracle.symptom_drug.iter().enumerate() {
        let slug = symptom.replace(' ', "-");
        let body = format!(
            "For {symptom}, initiate {drug}. Reassess response at the next visit and \
             maintain existing therapy otherwise.\n"
        );
        fs::write(
            config.paths.guidelines.join(format!("{i:02}-{slug}.txt")),
            body,
        )?;
        guideline_files += 1;
    }

    Ok(SynthArtifacts {
        cohort: config.paths.cohort.clone(),
        oracle: config.paths.oracle.clone(),
        guidelines: config.paths.guidelines.clone(),
        guideline_files,
        patients: out.records.len(),
        cohort_sha256: sha256_hex(&config.paths.cohort)?,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub cohort: PathBuf,
    pub patients: usize,
    pub visits: usize,
    pub mapped_codes: usize,
    /// Prescription codes with no ATC label; the excluded remainder.
    pub unmapped_codes: usize,
}

/// Parse raw sources into the cohort interchange file. The soap flavor reads
/// a folder of notes; the diagnosis flavor reads admission lines and needs a
/// code-mapping table. An exclusion report lands next to the cohort.
pub fn cmd_ingest(
    config: &RunConfig,
    source: &Path,
    mapping: Option<&Path>,
) -> Result<IngestReport, CliError> {
    let (records, mapped_codes, unmapped_codes) = match config.flavor {
        Flavor::Soap => (ingest_soap_dir(source)?, 0, 0),
        Flavor::Diagnosis => {
            let mapping_path = mapping.ok_or_else(|| {
                CliError::Usage(
                    "diagnosis ingestion needs --mapping <ndc-to-atc table>".into(),
                )
            })?;
            let table = AtcMapping::load(mapping_path)?;
            let (records, stats) = ingest_admissions_jsonl(source, &table)?;
            (records, stats.mapped_codes, stats.unmapped_codes)
        }
    };
    write_cohort_jsonl(&config.paths.cohort, &records)?;
    let report = IngestReport {
        cohort: config.paths.cohort.clone(),
        patients: records.len(),
        visits: records.iter().map(|r| r.visits.len()).sum(),
        mapped_codes,
        unmapped_codes,
    };
    let exclusions = config
        .paths
        .cohort
        .parent()
        .map_or_else(|| PathBuf::from("exclusions.json"), |p| p.join("exclusions.json"));
    write_json(&exclusions, &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexKind {
    /// Vector index over the retrieval pool's case entries.
    Dense,
    /// Lexical index over the same entries, persisted as the entry list.
    Sparse,
    /// Vector index over chunked guideline documents.
    Guideline,
}

impl IndexKind {
    pub fn as_str(self) -> &'static str {
        match self {
            IndexKind::Dense => "dense",
            IndexKind::Sparse => "sparse",
            IndexKind::Guideline => "guideline",
        }
    }

    pub fn parse(name: &str) -> Result<IndexKind, CliError> {
        match name.trim().to_ascii_lowercase().as_str() {
            "dense" => Ok(IndexKind::Dense),
            "sparse" => Ok(IndexKind::Sparse),
            "guideline" => Ok(IndexKind::Guideline),
            other => Err(CliError::Usage(format!(
                "unknown index kind {other:?}; expected dense, sparse, or guideline"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexArtifacts {
    pub kind: IndexKind,
    pub dir: PathBuf,
    pub entries: usize,
}

/// Chunk guideline documents into index entries. Chunks carry no drug sets;
/// they are evidence text only.
pub fn guideline_entries(docs: &[String]) -> Vec<IndexEntry> {
    docs.iter()
        .enumerate()
        .flat_map(|(di, doc)| {
            chunk_text(doc, GUIDELINE_CHUNK_SIZE, GUIDELINE_CHUNK_OVERLAP)
                .into_iter()
                .map(move |chunk| IndexEntry {
                    patient_id: format!("guideline:{di}:{}", chunk.offset),
                    field_tag: FieldTag::GuidelineChunk,
                    text: chunk.text,
                    associated_drugs: DrugSet::new(),
                    prior_drugs: DrugSet::new(),
                })
        })
        .collect()
}

fn read_index_entries(path: &Path) -> Result<Vec<IndexEntry>, CliError> {
    let file = fs::File::open(path)?;
    let mut entries = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        entries.push(
            serde_json::from_str(&line).map_err(|source| CliError::Artifact {
                context: format!("index entries {}", path.display()),
                source,
            })?,
        );
    }
    Ok(entries)
}

/// Build and persist one retrieval index under `<indexes>/<kind>`. Dense and
/// sparse kinds index the retrieval-pool side of the cohort split (test
/// patients must never be retrievable); the guideline kind indexes the
/// guideline corpus.
pub fn cmd_index(config: &RunConfig, kind: IndexKind) -> Result<IndexArtifacts, CliError> {
    let dir = config.paths.indexes.join(kind.as_str());
    let entries = match kind {
        IndexKind::Dense | IndexKind::Sparse => {
            let records = read_cohort_jsonl(&config.paths.cohort)?;
            let split = split_cohort(records, &config.split_spec())?;
            case_entries(&split.pool)
        }
        IndexKind::Guideline => {
            let docs = read_guideline_corpus(&config.paths.guidelines)?;
            guideline_entries(&docs)
        }
    };
    if entries.is_empty() {
        return Err(CliError::Data(format!(
            "no indexable text found for the {} index",
            kind.as_str()
        )));
    }
    match kind {
        IndexKind::Dense | IndexKind::Guideline => {
            let embedder = build_embedder(config)?;
            let index = DenseIndex::build(entries, embedder.as_ref())?;
            index.save(&dir)?;
            Ok(IndexArtifacts {
                kind,
                dir,
                entries: index.len(),
            })
        }
        IndexKind::Sparse => {
            // The lexical index is a pure function of its entries, so the
            // entry list is the whole persisted state.
            fs::create_dir_all(&dir)?;
            let count = entries.len();
            let mut out = std::io::BufWriter::new(fs::File::create(dir.join("entries.jsonl"))?);
            for entry in &entries {
                let line =
                    serde_json::to_string(entry).map_err(|source| CliError::Artifact {
                        context: "serializing index entries".into(),
                        source,
                    })?;
                writeln!(out, "{line}")?;
            }
            out.flush()?;
            Ok(IndexArtifacts {
                kind,
                dir,
                entries: count,
            })
        }
    }
}

/// Load a sparse index persisted by [`cmd_index`].
pub fn load_sparse_index(dir: &Path) -> Result<SparseIndex, CliError> {
    let entries = read_index_entries(&dir.join("entries.jsonl"))?;
    Ok(SparseIndex::build(entries))
}

/// Per-seed scores written into each run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub run: RunSummary,
    #[serde(rename = "macro")]
    pub macro_report: MetricReport,
    pub micro: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub seed: u64,
    pub run_dir: PathBuf,
    pub summary: RunSummary,
    pub metrics_path: PathBuf,
}

/// Execute the configured method once per seed. Each run directory receives
/// the manifest, the resolved config that produced it, and per-seed metrics;
/// visits already present in a manifest are not re-run.
pub fn cmd_run(config: &RunConfig) -> Result<Vec<RunArtifacts>, CliError> {
    let records = read_cohort_jsonl(&config.paths.cohort)?;
    let split = split_cohort(records, &config.split_spec())?;
    let backend = build_backend(config)?;
    let embedder = build_embedder(config)?;
    let guideline_index = if config.method == Method::Guideline {
        let dir = config.paths.indexes.join(IndexKind::Guideline.as_str());
        if !dir.is_dir() {
            return Err(CliError::Data(format!(
                "the guideline method needs an index at {}; build it with the index command",
                dir.display()
            )));
        }
        Some(DenseIndex::load(&dir)?)
    } else {
        None
    };

    let mut artifacts = Vec::new();
    for &seed in &config.seeds {
        let run_dir = config.run_dir(config.method, seed);
        fs::create_dir_all(&run_dir)?;
        fs::write(run_dir.join("effective_config.toml"), config.effective_toml())?;
        let plan = RunPlan {
            method: config.method,
            params: config.params_for(seed),
            pace: config.pace_config(),
            guideline: config.guideline,
            run_dir: run_dir.clone(),
            parallelism: config.parallelism,
        };
        let summary = execute_run(
            backend.as_ref(),
            &plan,
            &split.pool,
            &split.test,
            guideline_index.as_ref(),
            embedder.as_ref(),
        )?;
        let outputs = read_manifest(&summary.manifest_path)?;
        let scores = vec![SeedScores {
            seed,
            visits: visit_counts(&outputs)?,
        }];
        let metrics = SeedMetrics {
            seed,
            run: summary.clone(),
            macro_report: aggregate(&scores, &[seed], Averaging::Macro)?,
            micro: aggregate(&scores, &[seed], Averaging::Micro)?,
        };
        let metrics_path = run_dir.join("metrics.json");
        write_json(&metrics_path, &metrics)?;
        artifacts.push(RunArtifacts {
            seed,
            run_dir,
            summary,
            metrics_path,
        });
    }
    Ok(artifacts)
}

/// Everything one evaluation emits: the headline (macro) report with
/// significance stars, the pooled (micro) counterpart, retrieval precision
/// curves, and notes about comparisons that could not be computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalBundle {
    #[serde(rename = "macro")]
    pub macro_eval: EvalReport,
    pub micro: MetricReport,
    pub precision: Vec<PrecisionAtK>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalArtifacts {
    pub bundle: EvalBundle,
    pub report_json: PathBuf,
    pub metrics_csv: PathBuf,
    pub precision_csv: PathBuf,
}

fn load_method_runs(
    config: &RunConfig,
    method: Method,
    expected: &BTreeSet<(String, usize)>,
) -> Result<(Vec<SeedScores>, Vec<PipelineOutput>), CliError> {
    let mut scores = Vec::new();
    let mut all_outputs = Vec::new();
    for &seed in &config.seeds {
        let path = manifest_path(&config.run_dir(method, seed));
        if !path.is_file() {
            return Err(CliError::Data(format!(
                "no manifest for {method} seed {seed} at {}; the run command writes it",
                path.display()
            )));
        }
        let outputs = read_manifest(&path)?;
        let keys: BTreeSet<(String, usize)> = outputs
            .iter()
            .map(|o| (o.patient_id.clone(), o.visit_index))
            .collect();
        if keys != *expected {
            return Err(CliError::Data(format!(
                "manifest {} covers {} of the {} test-cohort visits; stale run?",
                path.display(),
                keys.intersection(expected).count(),
                expected.len()
            )));
        }
        scores.push(SeedScores {
            seed,
            visits: visit_counts(&outputs)?,
        });
        all_outputs.extend(outputs);
    }
    Ok((scores, all_outputs))
}

/// Score a method's manifests against the cohort's ground truth, optionally
/// comparing per-seed macro scores against a baseline method's manifests
/// with a paired t-test. Reports land under the method's backbone directory
/// as JSON and CSV.
pub fn cmd_eval(
    config: &RunConfig,
    method: Method,
    baseline: Option<Method>,
) -> Result<EvalArtifacts, CliError> {
    let records = read_cohort_jsonl(&config.paths.cohort)?;
    let split = split_cohort(records, &config.split_spec())?;
    let expected: BTreeSet<(String, usize)> = visit_tasks(&split.test)
        .iter()
        .map(|t| (t.patient_id.clone(), t.visit_index))
        .collect();

    let (scores, outputs) = load_method_runs(config, method, &expected)?;
    let macro_report = aggregate(&scores, &config.seeds, Averaging::Macro)?;
    let micro = aggregate(&scores, &config.seeds, Averaging::Micro)?;

    let mut significance: Vec<SignificanceResult> = Vec::new();
    let mut notes = Vec::new();
    if let Some(base) = baseline {
        let (base_scores, _) = load_method_runs(config, base, &expected)?;
        let base_macro = aggregate(&base_scores, &config.seeds, Averaging::Macro)?;
        for metric in Metric::ALL {
            let ours = &macro_report.summary(metric).per_seed;
            let theirs = &base_macro.summary(metric).per_seed;
            match paired_t_test(base.as_str(), metric, ours, theirs) {
                Ok(result) => significance.push(result),
                Err(EvalError::ZeroVarianceDifferences { mean_diff }) => notes.push(format!(
                    "{metric} vs {base}: paired t-test undefined — per-seed differences \
                     are constant at {mean_diff:.6}"
                )),
                Err(other) => return Err(other.into()),
            }
        }
    }

    // Retrieval precision over visits that actually retrieved cases.
    let k_values = default_k_values();
    let rankings: Vec<(Vec<RetrievedCase>, DrugSet)> = outputs
        .iter()
        .filter_map(|o| {
            let ranked = ranked_cases(o);
            (!ranked.is_empty()).then(|| (ranked, o.gold.clone()))
        })
        .collect();
    let precision = if rankings.is_empty() {
        Vec::new()
    } else {
        vec![precision_curve(method.as_str(), &rankings, &k_values)]
    };

    let bundle = EvalBundle {
        macro_eval: EvalReport {
            method: method.as_str().into(),
            backbone: config.backbone().into(),
            report: macro_report,
            significance,
        },
        micro,
        precision,
        notes,
    };

    let dir = config.eval_dir(method);
    fs::create_dir_all(&dir)?;
    let report_json = dir.join("eval.json");
    write_json(&report_json, &bundle)?;
    let metrics_path = dir.join("metrics.csv");
    fs::write(&metrics_path, metrics_csv(&report_rows(&bundle.macro_eval)))?;
    let precision_path = dir.join("precision.csv");
    fs::write(&precision_path, precision_csv(&bundle.precision))?;

    Ok(EvalArtifacts {
        bundle,
        report_json,
        metrics_csv: metrics_path,
        precision_csv: precision_path,
    })
}

/// One line of a sweep summary: macro means at one axis value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

/// Run and evaluate the configured method once per axis value, each value in
/// its own output directory under `<output>/sweep/<axis>/`. Existing value
/// directories are refused unless `force` is set; with it, runs resume.
pub fn cmd_sweep(
    config: &RunConfig,
    spec: &SweepSpec,
    force: bool,
) -> Result<(Vec<SweepRow>, PathBuf), CliError> {
    spec.validate()?;
    let sweep_root = config.paths.output.join("sweep").join(spec.axis.as_str());
    for &value in &spec.values {
        let dir = sweep_root.join(spec.label(value));
        if dir.exists() && !force {
            return Err(CliError::Usage(format!(
                "sweep directory {} already exists; pass --force to reuse it",
                dir.display()
            )));
        }
    }

    let mut rows = Vec::new();
    for &value in &spec.values {
        let mut sub = spec.apply(config, value);
        sub.paths.output = sweep_root.join(spec.label(value));
        cmd_run(&sub)?;
        let artifacts = cmd_eval(&sub, sub.method, None)?;
        let report = &artifacts.bundle.macro_eval.report;
        rows.push(SweepRow {
            axis: spec.axis.as_str().into(),
            value,
            precision: report.summary(Metric::Precision).mean,
            recall: report.summary(Metric::Recall).mean,
            f1: report.summary(Metric::F1).mean,
            accuracy: report.summary(Metric::Accuracy).mean,
        });
    }

    let mut csv = String::from("axis,value,precision,recall,f1,accuracy\n");
    for row in &rows {
        writeln!(
            csv,
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            row.axis, row.value, row.precision, row.recall, row.f1, row.accuracy
        )
        .expect("writing to a String cannot fail");
    }
    let summary_path = sweep_root.join("summary.csv");
    fs::write(&summary_path, csv)?;
    Ok((rows, summary_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli::PathsConfig;
    use crate::cohort::SynthConfig;
    use crate::pipeline::RefinementResult;
    use tempfile::TempDir;

    fn small_synth() -> SynthConfig {
        SynthConfig {
            patients: 14,
            seed: 11,
            visits_min: 2,
            visits_max: 3,
            ..SynthConfig::default()
        }
    }

    fn sandbox(synth: SynthConfig) -> (TempDir, RunConfig) {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let config = RunConfig {
            synth,
            seeds: vec![42, 137],
            parallelism: 2,
            paths: PathsConfig {
                cohort: root.join("data/cohort.jsonl"),
                oracle: root.join("data/oracle.json"),
                guidelines: root.join("data/guidelines"),
                indexes: root.join("indexes"),
                output: root.join("runs"),
            },
            ..RunConfig::default()
        };
        (dir, config)
    }

    #[test]
    fn synthesis_writes_deterministic_artifacts() {
        let (_a, config_a) = sandbox(small_synth());
        let (_b, config_b) = sandbox(small_synth());
        let first = cmd_synth(&config_a).unwrap();
        let second = cmd_synth(&config_b).unwrap();

        assert_eq!(first.patients, 14);
        assert_eq!(first.cohort_sha256, second.cohort_sha256);
        assert!(first.cohort.is_file());
        let oracle = read_oracle(&first.oracle).unwrap();
        assert!(!oracle.symptom_drug.is_empty());
        assert_eq!(first.guideline_files, oracle.symptom_drug.len());

        // Re-running over the same tree is a no-op byte-wise.
        let again = cmd_synth(&config_a).unwrap();
        assert_eq!(again.cohort_sha256, first.cohort_sha256);
    }

    #[test]
    fn default_synthesis_checksum_is_pinned() {
        let (_dir, config) = sandbox(SynthConfig::default());
        let artifacts = cmd_synth(&config).unwrap();
        assert_eq!(artifacts.patients, 200);
        assert_eq!(
            artifacts.cohort_sha256,
            "131a43dec5e6b6a15e67036572a688d7c45ce53dba1f78851b1bd3ed949cd700",
            "the default cohort is a fixed function of its settings; \
             a new checksum means generation changed"
        );
    }

    #[test]
    fn invalid_synthesis_settings_fail_with_usage() {
        let (_dir, mut config) = sandbox(small_synth());
        config.synth.patients = 0;
        let err = cmd_synth(&config).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("patients"));
    }

    #[test]
    fn soap_ingestion_builds_the_cohort_file() {
        let (_dir, config) = sandbox(small_synth());
        let raw = config.paths.cohort.parent().unwrap().join("raw");
        for (patient, notes) in [
            ("p01", vec!["tremor worse", "stiffness persists"]),
            ("p02", vec!["gait freezing"]),
        ] {
            let pdir = raw.join(patient);
            fs::create_dir_all(&pdir).unwrap();
            for (i, subjective) in notes.iter().enumerate() {
                fs::write(
                    pdir.join(format!("{i:02}.txt")),
                    format!(
                        "Subjective: {subjective}\nObjective: exam stable\n\
                         Assessment: parkinsonism\nPlan: Levodopa, Rasagiline"
                    ),
                )
                .unwrap();
            }
        }

        let report = cmd_ingest(&config, &raw, None).unwrap();
        assert_eq!(report.patients, 2);
        assert_eq!(report.visits, 3);
        assert_eq!(report.unmapped_codes, 0);
        let records = read_cohort_jsonl(&config.paths.cohort).unwrap();
        assert_eq!(records[0].visits[0].subjective, "tremor worse");
        assert!(records[0].visits[0].ground_truth.contains("levodopa"));
    }

    #[test]
    fn admission_ingestion_reports_unmapped_codes() {
        let (_dir, mut config) = sandbox(small_synth());
        config.flavor = Flavor::Diagnosis;
        let root = config.paths.cohort.parent().unwrap().to_path_buf();
        fs::create_dir_all(&root).unwrap();
        let admissions = root.join("admissions.jsonl");
        fs::write(
            &admissions,
            concat!(
                "{\"subject_id\":\"s1\",\"seq\":1,\"diagnoses\":[\"essential tremor\"],\"ndc_codes\":[\"111\"]}\n",
                "{\"subject_id\":\"s1\",\"seq\":2,\"diagnoses\":[\"parkinsonism\"],\"ndc_codes\":[\"111\",\"999\"]}\n",
            ),
        )
        .unwrap();
        let mapping_path = root.join("ndc_atc.json");
        AtcMapping::from_pairs([("111", "N04BA")])
            .save(&mapping_path)
            .unwrap();

        let err = cmd_ingest(&config, &admissions, None).unwrap_err();
        assert_eq!(err.exit_code(), 2, "missing mapping is a usage error");

        let report = cmd_ingest(&config, &admissions, Some(&mapping_path)).unwrap();
        assert_eq!(report.patients, 1);
        assert_eq!(report.visits, 2);
        assert_eq!(report.unmapped_codes, 1);
        assert!(root.join("exclusions.json").is_file());
    }

    #[test]
    fn dense_index_round_trips_through_disk() {
        let (_dir, config) = sandbox(small_synth());
        cmd_synth(&config).unwrap();
        let artifacts = cmd_index(&config, IndexKind::Dense).unwrap();
        assert!(artifacts.entries > 0);

        let loaded = DenseIndex::load(&artifacts.dir).unwrap();
        let records = read_cohort_jsonl(&config.paths.cohort).unwrap();
        let split = split_cohort(records, &config.split_spec()).unwrap();
        let direct =
            DenseIndex::build(case_entries(&split.pool), &HashEmbedder::default()).unwrap();
        assert_eq!(loaded.len(), direct.len());
        assert_eq!(loaded.entries(), direct.entries());
        for i in 0..loaded.len() {
            assert_eq!(loaded.vector(i), direct.vector(i), "vector {i}");
        }
    }

    #[test]
    fn sparse_index_round_trips_and_empty_cohort_errors() {
        let (_dir, config) = sandbox(small_synth());
        cmd_synth(&config).unwrap();
        let artifacts = cmd_index(&config, IndexKind::Sparse).unwrap();
        let loaded = load_sparse_index(&artifacts.dir).unwrap();

        let records = read_cohort_jsonl(&config.paths.cohort).unwrap();
        let split = split_cohort(records, &config.split_spec()).unwrap();
        let direct = SparseIndex::build(case_entries(&split.pool));
        assert_eq!(loaded.len(), direct.len());
        assert_eq!(loaded.search("tremor", 5), direct.search("tremor", 5));

        fs::write(&config.paths.cohort, "").unwrap();
        let err = cmd_index(&config, IndexKind::Dense).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn guideline_index_honors_chunk_geometry() {
        let (_dir, config) = sandbox(small_synth());
        fs::create_dir_all(&config.paths.guidelines).unwrap();
        let sentence = "Start low and titrate slowly while monitoring motor response. ";
        let doc = sentence.repeat(50); // ~3,100 characters, several chunks
        fs::write(config.paths.guidelines.join("long.txt"), &doc).unwrap();

        let artifacts = cmd_index(&config, IndexKind::Guideline).unwrap();
        let expected = chunk_text(&doc, GUIDELINE_CHUNK_SIZE, GUIDELINE_CHUNK_OVERLAP);
        assert!(expected.len() > 1, "fixture must force chunking");
        assert_eq!(artifacts.entries, expected.len());

        let loaded = DenseIndex::load(&artifacts.dir).unwrap();
        for (entry, chunk) in loaded.entries().iter().zip(&expected) {
            assert_eq!(entry.field_tag, FieldTag::GuidelineChunk);
            assert_eq!(entry.text, chunk.text);
            assert!(entry.associated_drugs.is_empty());
        }
    }

    #[test]
    fn run_writes_layout_resumes_and_reproduces() {
        let (_dir, config) = sandbox(small_synth());
        cmd_synth(&config).unwrap();
        let first = cmd_run(&config).unwrap();
        assert_eq!(first.len(), 2, "one run per seed");

        let mut shas = Vec::new();
        for artifact in &first {
            assert!(artifact.summary.newly_run > 0);
            assert_eq!(artifact.summary.resumed, 0);
            let manifest = manifest_path(&artifact.run_dir);
            assert!(manifest.is_file());
            assert!(artifact.metrics_path.is_file());
            let effective = artifact.run_dir.join("effective_config.toml");
            let back: RunConfig =
                toml::from_str(&fs::read_to_string(&effective).unwrap()).unwrap();
            assert_eq!(back, config, "effective config re-ingests identically");
            shas.push(sha256_hex(&manifest).unwrap());
        }

        // A second invocation resumes every visit and leaves bytes alone.
        let second = cmd_run(&config).unwrap();
        for (artifact, sha) in second.iter().zip(&shas) {
            assert_eq!(artifact.summary.newly_run, 0);
            assert_eq!(artifact.summary.resumed, artifact.summary.total_targets);
            assert_eq!(&sha256_hex(&manifest_path(&artifact.run_dir)).unwrap(), sha);
        }

        // A fresh tree with the same config reproduces the same bytes.
        let (_other, config_b) = sandbox(small_synth());
        cmd_synth(&config_b).unwrap();
        let other = cmd_run(&config_b).unwrap();
        for (artifact, sha) in other.iter().zip(&shas) {
            assert_eq!(&sha256_hex(&manifest_path(&artifact.run_dir)).unwrap(), sha);
        }
    }

    /// A manifest whose predictions are the gold sets exactly, except the
    /// earliest `flaws(seed_index)` visits swap a gold drug for a spurious
    /// one — denting precision and recall both.
    fn write_fixture_manifests(
        config: &RunConfig,
        method: Method,
        flaws: impl Fn(usize) -> usize,
    ) {
        let records = read_cohort_jsonl(&config.paths.cohort).unwrap();
        let split = split_cohort(records, &config.split_spec()).unwrap();
        let tasks = visit_tasks(&split.test);
        for (si, &seed) in config.seeds.iter().enumerate() {
            let dir = config.run_dir(method, seed);
            fs::create_dir_all(&dir).unwrap();
            let mut lines = String::new();
            for (ti, task) in tasks.iter().enumerate() {
                let mut prediction = task.gold.clone();
                if ti < flaws(si) {
                    prediction = prediction.iter().skip(1).collect();
                    prediction.insert("made-up mixture");
                }
                let output = PipelineOutput {
                    patient_id: task.patient_id.clone(),
                    visit_index: task.visit_index,
                    flavor: Flavor::Soap,
                    gold: task.gold.clone(),
                    active_history: task.active_history.clone(),
                    initial_draft: prediction.clone(),
                    focuses: Vec::new(),
                    tendencies: Vec::new(),
                    refinement: RefinementResult {
                        final_prescription: prediction,
                        audit_log: Vec::new(),
                        description: String::new(),
                        degenerate_empty: false,
                        divergences: 0,
                    },
                    summary: String::new(),
                    retrieved: Vec::new(),
                    trace: Vec::new(),
                };
                lines.push_str(&serde_json::to_string(&output).unwrap());
                lines.push('\n');
            }
            fs::write(manifest_path(&dir), lines).unwrap();
        }
    }

    #[test]
    fn eval_scores_a_gold_manifest_at_one_everywhere() {
        let (_dir, config) = sandbox(small_synth());
        cmd_synth(&config).unwrap();
        write_fixture_manifests(&config, Method::ZeroShot, |_| 0);

        let artifacts = cmd_eval(&config, Method::ZeroShot, None).unwrap();
        let report = &artifacts.bundle.macro_eval.report;
        for metric in Metric::ALL {
            let summary = report.summary(metric);
            assert_eq!(summary.mean, 1.0, "{metric}");
            assert_eq!(summary.std, 0.0, "{metric}");
        }
        for metric in Metric::ALL {
            assert_eq!(artifacts.bundle.micro.summary(metric).mean, 1.0);
        }
        assert!(artifacts.report_json.is_file());
        let csv = fs::read_to_string(&artifacts.metrics_csv).unwrap();
        assert!(csv.starts_with("method,backbone,metric,mean,std,stars\n"));
        assert!(csv.contains("zero_shot,scripted,f1,1.000000,0.000000,"));
        let reread: EvalBundle =
            serde_json::from_str(&fs::read_to_string(&artifacts.report_json).unwrap()).unwrap();
        assert_eq!(reread, artifacts.bundle);
    }

    #[test]
    fn eval_compares_methods_with_a_paired_test() {
        let (_dir, mut config) = sandbox(small_synth());
        config.seeds = vec![42, 137, 2025];
        cmd_synth(&config).unwrap();
        write_fixture_manifests(&config, Method::Pace, |_| 0);
        // Baseline quality degrades differently per seed, so the per-seed
        // differences carry variance and the t-test is defined.
        write_fixture_manifests(&config, Method::ZeroShot, |si| 2 * si + 1);

        let artifacts = cmd_eval(&config, Method::Pace, Some(Method::ZeroShot)).unwrap();
        let significance = &artifacts.bundle.macro_eval.significance;
        assert_eq!(significance.len(), Metric::ALL.len());
        for result in significance {
            assert_eq!(result.baseline, "zero_shot");
            assert!(result.t > 0.0, "gold beats the flawed baseline");
        }
        assert!(artifacts.bundle.notes.is_empty());

        // Identical manifests: a defined null result, p = 1, no stars.
        let same = cmd_eval(&config, Method::Pace, Some(Method::Pace)).unwrap();
        for result in &same.bundle.macro_eval.significance {
            assert_eq!(result.t, 0.0);
            assert_eq!(result.p, 1.0);
        }

        // Constant nonzero gap: undefined test, reported as a note instead.
        write_fixture_manifests(&config, Method::Treatrag, |_| 1);
        let degenerate = cmd_eval(&config, Method::Pace, Some(Method::Treatrag)).unwrap();
        assert!(degenerate.bundle.macro_eval.significance.is_empty());
        assert_eq!(degenerate.bundle.notes.len(), Metric::ALL.len());
        assert!(degenerate.bundle.notes[0].contains("constant"));
    }

    #[test]
    fn eval_rejects_missing_or_stale_manifests() {
        let (_dir, config) = sandbox(small_synth());
        cmd_synth(&config).unwrap();
        let err = cmd_eval(&config, Method::Pace, None).unwrap_err();
        assert_eq!(err.exit_code(), 3, "no manifests yet");

        write_fixture_manifests(&config, Method::Pace, |_| 0);
        let manifest = manifest_path(&config.run_dir(Method::Pace, 42));
        let mut lines: Vec<String> = fs::read_to_string(&manifest)
            .unwrap()
            .lines()
            .map(String::from)
            .collect();
        lines.pop();
        fs::write(&manifest, lines.join("\n") + "\n").unwrap();
        let err = cmd_eval(&config, Method::Pace, None).unwrap_err();
        assert_eq!(err.exit_code(), 3, "manifest missing a visit");
        assert!(err.to_string().contains("covers"));
    }

    #[test]
    fn sweep_emits_one_row_per_value_and_respects_force() {
        let synth = SynthConfig {
            patients: 10,
            seed: 5,
            visits_min: 2,
            visits_max: 2,
            ..SynthConfig::default()
        };
        let (_dir, mut config) = sandbox(synth);
        config.seeds = vec![42];
        cmd_synth(&config).unwrap();

        let spec = SweepSpec::parse("k", "1,3").unwrap();
        let (rows, summary) = cmd_sweep(&config, &spec, false).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].value, 1.0);
        assert_eq!(rows[1].value, 3.0);
        let csv = fs::read_to_string(&summary).unwrap();
        assert_eq!(csv.lines().count(), 3, "header plus one row per value");
        assert!(csv.starts_with("axis,value,precision,recall,f1,accuracy\n"));

        let err = cmd_sweep(&config, &spec, false).unwrap_err();
        assert_eq!(err.exit_code(), 2, "existing sweep dirs need --force");
        let (again, _) = cmd_sweep(&config, &spec, true).unwrap();
        assert_eq!(again.len(), 2);

        let tau_spec = SweepSpec::parse("tau", "0.5,0.7,0.9").unwrap();
        let (tau_rows, _) = cmd_sweep(&config, &tau_spec, false).unwrap();
        assert_eq!(tau_rows.len(), 3);
    }
}
