//! End-to-end commands over an output directory.
//!
//! Output layout (version [`LAYOUT_VERSION`]):
//!
//! ```text
//! layout.json
//! canonical/   records.jsonl rejections.jsonl skipped.jsonl report.json
//! generation/  requests.jsonl ledger.jsonl translations.jsonl failures.jsonl report.json
//! corpus/      samples.jsonl dropped.jsonl
//! stats/       stats.json stats.txt stats.svg
//! compose/     manifests/stage_*.jsonl packed/stage_*.jsonl plan.json report.json
//! review/      events.jsonl decisions.json
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use futures::stream::{self, StreamExt};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::artifact::{
    read_json, read_jsonl, write_json, ArtifactError, ArtifactHeader, JsonlWriter, RunStamp, LAYOUT_VERSION,
};
use crate::canonicalize::{clean, CanonicalRecord, CleanOutcome, FsImageSource, Rejection};
use crate::composer::{
    apply_mix, soft_pack, CharEstimator, MemoryIndex, MixEntry, MixError, StageMixSpec,
};
use crate::config::{ConfigError, MixRule, RunConfig};
use crate::corpus::{self, assemble, Deduper, InstructionSample};
use crate::digest::sub_seed;
use crate::genclient::{select_for_translation, Backend, FinishReason, GenError, GenerationClient, GenerationResult};
use crate::ingest::{load_records, IngestError, Registry, SkippedRow};
use crate::promptgen::{bundled_templates, load_templates, FormatRecipe, GenerationRequest, LabelPool, PromptError, RequestPlanner};
use crate::review::{DecisionSnapshot, ReviewData, ReviewError, ReviewStore, DECISIONS_FILE};
use crate::trainplan::{apply_override, emit_plan, file_sha256, stage_config, PlanError, StageBinding, StageData, TrainPlan};
use crate::types::{Language, Stage};

pub mod layout {
    pub const LAYOUT_FILE: &str = "layout.json";
    pub const RECORDS: &str = "canonical/records.jsonl";
    pub const REJECTIONS: &str = "canonical/rejections.jsonl";
    pub const SKIPPED: &str = "canonical/skipped.jsonl";
    pub const INGEST_REPORT: &str = "canonical/report.json";
    pub const REQUESTS: &str = "generation/requests.jsonl";
    pub const LEDGER: &str = "generation/ledger.jsonl";
    pub const TRANSLATIONS: &str = "generation/translations.jsonl";
    pub const FAILURES: &str = "generation/failures.jsonl";
    pub const GENERATE_REPORT: &str = "generation/report.json";
    pub const SAMPLES: &str = "corpus/samples.jsonl";
    pub const DROPPED: &str = "corpus/dropped.jsonl";
    pub const STATS_JSON: &str = "stats/stats.json";
    pub const STATS_TXT: &str = "stats/stats.txt";
    pub const STATS_SVG: &str = "stats/stats.svg";
    pub const COMPOSE: &str = "compose";
    pub const PLAN: &str = "plan.json";
    pub const COMPOSE_REPORT: &str = "report.json";

    pub fn manifest(stage: crate::types::Stage) -> String {
        format!("manifests/stage_{stage}.jsonl")
    }

    pub fn packed(stage: crate::types::Stage) -> String {
        format!("packed/stage_{stage}.jsonl")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Generation(#[from] GenError),
    #[error(transparent)]
    Mix(#[from] MixError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Review(#[from] ReviewError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Missing(String),
    #[error("{0}")]
    Inconsistent(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A command's report plus whether some of its work failed or was left pending.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome<R> {
    pub report: R,
    pub partial: bool,
    pub notices: Vec<String>,
}

impl<R> Outcome<R> {
    pub fn exit_code(&self) -> i32 {
        if self.partial {
            2
        } else {
            0
        }
    }
}

fn header(kind: &str, stamp: &RunStamp) -> ArtifactHeader {
    ArtifactHeader::new(kind, stamp)
}

fn write_layout(cfg: &RunConfig) -> Result<(), PipelineError> {
    write_json(
        &cfg.output_dir.join(layout::LAYOUT_FILE),
        &serde_json::json!({ "layout_version": LAYOUT_VERSION, "run": cfg.stamp() }),
    )?;
    Ok(())
}

fn write_all<T: Serialize>(path: &Path, kind: &str, stamp: &RunStamp, items: &[T]) -> Result<(), PipelineError> {
    let mut w = JsonlWriter::create(path, Some(&header(kind, stamp)))?;
    for item in items {
        w.write(item)?;
    }
    w.finish()?;
    Ok(())
}

fn require<T: DeserializeOwned>(path: &Path, hint: &str) -> Result<Vec<T>, PipelineError> {
    if !path.is_file() {
        return Err(PipelineError::Missing(format!("{} not found; {hint}", path.display())));
    }
    Ok(read_jsonl(path)?.1)
}

pub fn read_records(cfg: &RunConfig) -> Result<Vec<CanonicalRecord>, PipelineError> {
    require(&cfg.output_dir.join(layout::RECORDS), "run `ingest` first")
}

pub fn read_samples(cfg: &RunConfig) -> Result<Vec<InstructionSample>, PipelineError> {
    require(&cfg.output_dir.join(layout::SAMPLES), "run `generate` first")
}

// ---------------------------------------------------------------------------
// ingest

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub rows: usize,
    pub records: usize,
    pub rejected: usize,
    pub skipped: usize,
    pub duplicates: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub run: Option<RunStamp>,
    pub datasets: BTreeMap<String, DatasetCounts>,
    pub records: usize,
    pub rejected: usize,
    pub skipped: usize,
    pub rejection_reasons: BTreeMap<String, usize>,
}

pub fn cmd_ingest(cfg: &RunConfig) -> Result<Outcome<IngestReport>, PipelineError> {
    let registry = Registry::load(&cfg.registry_dir)?;
    let mut notices = Vec::new();
    if registry.is_empty() {
        let msg = format!("registry {} has no dataset descriptors", cfg.registry_dir.display());
        tracing::warn!("{msg}");
        notices.push(msg);
    }
    let stamp = cfg.stamp();
    let images = FsImageSource::new(registry.dir());
    let mut report = IngestReport {
        run: Some(stamp.clone()),
        ..Default::default()
    };
    let mut all = CleanOutcome::default();
    let mut skipped: Vec<SkippedRow> = Vec::new();
    let mut seen_ids = HashSet::new();
    for desc in registry.iter() {
        let loaded = load_records(desc, registry.dir())?;
        let mut outcome = CleanOutcome::default();
        for raw in &loaded.records {
            outcome.extend(clean(raw, desc, &cfg.clean_policy, &images));
        }
        let before = outcome.records.len();
        outcome.records.retain(|r| seen_ids.insert(r.record_id.clone()));
        let counts = DatasetCounts {
            rows: loaded.rows,
            records: outcome.records.len(),
            rejected: outcome.rejected.len(),
            skipped: loaded.skipped.len(),
            duplicates: before - outcome.records.len(),
        };
        tracing::info!(dataset = %desc.dataset_id, records = counts.records, rejected = counts.rejected, "ingested");
        report.datasets.insert(desc.dataset_id.clone(), counts);
        skipped.extend(loaded.skipped);
        all.extend(outcome);
    }
    report.records = all.records.len();
    report.rejected = all.rejected.len();
    report.skipped = skipped.len();
    for r in &all.rejected {
        *report.rejection_reasons.entry(reason_code(r)).or_default() += 1;
    }

    let out = &cfg.output_dir;
    write_layout(cfg)?;
    write_all(&out.join(layout::RECORDS), "canonical_records", &stamp, &all.records)?;
    write_all(&out.join(layout::REJECTIONS), "rejections", &stamp, &all.rejected)?;
    write_all(&out.join(layout::SKIPPED), "skipped_rows", &stamp, &skipped)?;
    write_json(&out.join(layout::INGEST_REPORT), &report)?;
    Ok(Outcome {
        report,
        partial: false,
        notices,
    })
}

fn reason_code(r: &Rejection) -> String {
    serde_json::to_value(r.reason)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

// ---------------------------------------------------------------------------
// generate

#[derive(Debug, Clone, Default)]
pub struct GenerateOptions {
    /// Stop after answering this many pending requests.
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateReport {
    pub run: Option<RunStamp>,
    pub backend: String,
    pub requests: usize,
    pub answered: usize,
    pub pending: usize,
    pub failed: usize,
    pub refused: usize,
    pub truncated: usize,
    pub dropped: usize,
    pub duplicates: usize,
    pub samples_en: usize,
    pub samples_zh: usize,
    pub translation_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub key: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dropped {
    pub request_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Translation {
    pub key: String,
    pub text: String,
}

/// Read a resumable ledger, tolerating a torn final line.
fn load_ledger<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    if !path.is_file() {
        return Ok(Vec::new());
    }
    let file = fs::File::open(path).map_err(io_err(path))?;
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() || line.starts_with("{\"__header__\"") {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(v) => out.push(v),
            Err(_) if i + 1 == lines.len() => {
                tracing::warn!(path = %path.display(), "ignoring torn final ledger line");
            }
            Err(e) => {
                return Err(ArtifactError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    reason: e.to_string(),
                }
                .into())
            }
        }
    }
    Ok(out)
}

pub fn plan_all_requests(
    cfg: &RunConfig,
    records: &[CanonicalRecord],
) -> Result<Vec<GenerationRequest>, PipelineError> {
    let mut bodies = bundled_templates();
    if let Some(dir) = &cfg.templates_dir {
        bodies.extend(load_templates(dir)?);
    }
    let recipe = match &cfg.recipe {
        Some(p) => FormatRecipe::load(p)?,
        None => FormatRecipe::default_recipe(),
    };
    let planner = RequestPlanner::new(recipe, &bodies, LabelPool::from_records(records), cfg.seed)?;
    let mut out = Vec::new();
    for rec in records {
        out.extend(planner.plan_requests(rec)?);
    }
    Ok(out)
}

pub async fn cmd_generate(
    cfg: &RunConfig,
    backend: Arc<dyn Backend>,
    opts: &GenerateOptions,
) -> Result<Outcome<GenerateReport>, PipelineError> {
    let records = read_records(cfg)?;
    let requests = plan_all_requests(cfg, &records)?;
    let stamp = cfg.stamp();
    let out = &cfg.output_dir;
    write_layout(cfg)?;
    write_all(&out.join(layout::REQUESTS), "generation_requests", &stamp, &requests)?;

    let client = GenerationClient::new(backend, cfg.client.clone(), &cfg.registry_dir)?;
    let backend_name = client.backend_name().to_string();

    // Reuse answers from an earlier run of the same plan and backend, rewritten in request order.
    let ledger_path = out.join(layout::LEDGER);
    let mut done: HashMap<String, GenerationResult> = load_ledger::<GenerationResult>(&ledger_path)?
        .into_iter()
        .filter(|r| r.backend == backend_name)
        .map(|r| (r.request_id.clone(), r))
        .collect();
    let mut ledger = JsonlWriter::create(&ledger_path, Some(&header("generation_ledger", &stamp)))?;
    for req in &requests {
        if let Some(r) = done.get(&req.request_id) {
            ledger.write(r)?;
        }
    }
    ledger.flush()?;

    let pending_all: Vec<GenerationRequest> = requests
        .iter()
        .filter(|r| !done.contains_key(&r.request_id))
        .cloned()
        .collect();
    let take = opts.limit.unwrap_or(usize::MAX).min(pending_all.len());
    let batch = &pending_all[..take];
    let mut failures = Vec::new();
    let mut results = client.generate_ordered(batch);
    while let Some((i, res)) = results.next().await {
        match res {
            Ok(r) => {
                ledger.write(&r)?;
                ledger.flush()?;
                done.insert(r.request_id.clone(), r);
            }
            Err(e) => {
                tracing::warn!(request = %batch[i].request_id, error = %e, "generation failed");
                failures.push(Failure {
                    key: batch[i].request_id.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    drop(results);
    ledger.finish()?;

    let mut report = GenerateReport {
        run: Some(stamp.clone()),
        backend: backend_name,
        requests: requests.len(),
        answered: done.len(),
        pending: pending_all.len() - take,
        failed: failures.len(),
        ..Default::default()
    };

    // Assemble in request order.
    let by_id: HashMap<&str, &CanonicalRecord> = records.iter().map(|r| (r.record_id.as_str(), r)).collect();
    let mut dropped = Vec::new();
    let mut dedup = Deduper::new();
    let mut samples = Vec::new();
    for req in &requests {
        let Some(res) = done.get(&req.request_id) else { continue };
        match res.finish_reason {
            FinishReason::Refused => report.refused += 1,
            FinishReason::Truncated => report.truncated += 1,
            FinishReason::Ok => {}
        }
        let rec = by_id[req.record_id.as_str()];
        match assemble(req, res, rec) {
            Ok(s) if dedup.admit(&s) => samples.push(s),
            Ok(_) => report.duplicates += 1,
            Err(e) => dropped.push(Dropped {
                request_id: req.request_id.clone(),
                reason: e.to_string(),
            }),
        }
    }
    report.dropped = dropped.len();
    report.samples_en = samples.len();

    // Chinese copies only once the English corpus is complete, so the selection is stable.
    let complete = report.pending == 0 && report.failed == 0;
    let corpus = if complete {
        let (corpus, tr_failures) = translate_pass(cfg, &client, samples, &stamp).await?;
        report.translation_failures = tr_failures.len();
        failures.extend(tr_failures);
        corpus
    } else {
        samples
    };
    report.samples_zh = corpus.iter().filter(|s| s.language == Language::Zh).count();

    write_all(&out.join(layout::SAMPLES), "instruction_corpus", &stamp, &corpus)?;
    write_all(&out.join(layout::DROPPED), "dropped_results", &stamp, &dropped)?;
    write_all(&out.join(layout::FAILURES), "generation_failures", &stamp, &failures)?;
    write_json(&out.join(layout::GENERATE_REPORT), &report)?;

    let mut notices = Vec::new();
    if report.pending > 0 {
        notices.push(format!("{} requests still pending; rerun to resume", report.pending));
    }
    if !failures.is_empty() {
        notices.push(format!("{} calls failed; see {}", failures.len(), layout::FAILURES));
    }
    Ok(Outcome {
        partial: !notices.is_empty(),
        report,
        notices,
    })
}

async fn translate_pass(
    cfg: &RunConfig,
    client: &GenerationClient,
    samples: Vec<InstructionSample>,
    stamp: &RunStamp,
) -> Result<(Vec<InstructionSample>, Vec<Failure>), PipelineError> {
    let selected = select_for_translation(samples.len(), cfg.translation_fraction, cfg.seed);
    let path = cfg.output_dir.join(layout::TRANSLATIONS);
    let mut cache: HashMap<String, String> = load_ledger::<Translation>(&path)?
        .into_iter()
        .map(|t| (t.key, t.text))
        .collect();

    let key = |s: &InstructionSample, i: usize| format!("{}:{i}", s.sample_id);
    let jobs: Vec<(String, String)> = selected
        .iter()
        .flat_map(|&idx| {
            let s = &samples[idx];
            s.messages.iter().enumerate().map(move |(i, m)| (key(s, i), m.content.clone()))
        })
        .collect();

    let mut w = JsonlWriter::create(&path, Some(&header("translation_ledger", stamp)))?;
    for (k, _) in &jobs {
        if let Some(text) = cache.get(k) {
            w.write(&Translation {
                key: k.clone(),
                text: text.clone(),
            })?;
        }
    }
    let pending: Vec<&(String, String)> = jobs.iter().filter(|(k, _)| !cache.contains_key(k)).collect();
    let mut stream = stream::iter(pending)
        .map(|(k, text)| async move { (k.clone(), client.translate(k, text).await) })
        .buffered(cfg.client.max_parallel as usize);
    let mut failures = Vec::new();
    while let Some((k, res)) = stream.next().await {
        match res {
            Ok(text) => {
                w.write(&Translation {
                    key: k.clone(),
                    text: text.clone(),
                })?;
                w.flush()?;
                cache.insert(k, text);
            }
            Err(e) => failures.push(Failure {
                key: k,
                error: e.to_string(),
            }),
        }
    }
    w.finish()?;

    let mut out = Vec::with_capacity(samples.len() + selected.len());
    for (idx, s) in samples.into_iter().enumerate() {
        let zh = selected.contains(&idx).then(|| {
            (0..s.messages.len())
                .map(|i| cache.get(&key(&s, i)).cloned())
                .collect::<Option<Vec<String>>>()
        });
        let copy = zh.flatten().map(|contents| s.translated(contents));
        out.push(s);
        out.extend(copy);
    }
    Ok((out, failures))
}

// ---------------------------------------------------------------------------
// stats

pub fn cmd_stats(cfg: &RunConfig) -> Result<Outcome<corpus::CorpusStats>, PipelineError> {
    let registry = Registry::load(&cfg.registry_dir)?;
    let samples = read_samples(cfg)?;
    let stats = corpus::stats(&samples, &registry)
        .map_err(|e| PipelineError::Inconsistent(e.to_string()))?;
    let stamp = cfg.stamp();
    let out = &cfg.output_dir;
    write_json(
        &out.join(layout::STATS_JSON),
        &serde_json::json!({ "run": stamp, "stats": stats }),
    )?;
    let banner = format!("seed={} config_hash={}", stamp.seed, stamp.config_hash);
    let txt = format!("# {banner}\n{}", stats.render_table());
    fs::write(out.join(layout::STATS_TXT), txt).map_err(io_err(out))?;
    let svg = stats.render_svg().replacen('\n', &format!("\n<!-- {banner} -->\n"), 1);
    fs::write(out.join(layout::STATS_SVG), svg).map_err(io_err(out))?;
    Ok(Outcome {
        report: stats,
        partial: false,
        notices: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// compose

#[derive(Debug, Clone, Default)]
pub struct ComposeOptions {
    /// Build Stage III from the raw mix without review decisions.
    pub no_review: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: Stage,
    pub samples: u64,
    pub expected: u64,
    pub sequences: u64,
    pub overflow: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComposeReport {
    pub run: Option<RunStamp>,
    pub stages: Vec<StageSummary>,
    pub notices: Vec<String>,
}

fn mix_rules(cfg: &RunConfig, index: &MemoryIndex) -> Vec<MixRule> {
    if !cfg.mix.is_empty() {
        return cfg.mix.clone();
    }
    index
        .datasets()
        .map(|(name, _)| MixRule {
            dataset: name.to_string(),
            category: "uncategorized".into(),
            ratio_stage_1_2: 1.0,
            ratio_stage_3: 1.0,
            available: None,
        })
        .collect()
}

/// Mix specs for each stage from the configured rules.
pub fn stage_specs(cfg: &RunConfig, index: &MemoryIndex) -> BTreeMap<Stage, StageMixSpec> {
    use crate::composer::CorpusIndex;
    let rules = mix_rules(cfg, index);
    let seed = sub_seed(cfg.seed, "mix");
    Stage::ALL
        .iter()
        .map(|&stage| {
            let entries = rules
                .iter()
                .map(|r| MixEntry {
                    dataset_name: r.dataset.clone(),
                    category: r.category.clone(),
                    available: r.available.unwrap_or_else(|| index.count(&r.dataset).unwrap_or(0)),
                    ratio: if stage == Stage::III { r.ratio_stage_3 } else { r.ratio_stage_1_2 },
                })
                .collect();
            (stage, StageMixSpec { stage, entries, seed })
        })
        .collect()
}

pub fn cmd_compose(cfg: &RunConfig, opts: &ComposeOptions) -> Result<Outcome<ComposeReport>, PipelineError> {
    let samples = read_samples(cfg)?;
    let index = MemoryIndex::from_samples(&samples);
    let by_id: HashMap<&str, &InstructionSample> = samples.iter().map(|s| (s.sample_id.as_str(), s)).collect();
    let mut specs = stage_specs(cfg, &index);
    let mut notices = Vec::new();

    if !opts.no_review {
        let path = cfg.review_dir().join(DECISIONS_FILE);
        let scaled = if path.is_file() {
            let snap = DecisionSnapshot::load(&path)?;
            specs[&Stage::III].with_retention(&snap.multipliers()).map_err(|e| e.to_string())
        } else {
            Err(format!("{} not found", path.display()))
        };
        match scaled {
            Ok(spec) => {
                specs.insert(Stage::III, spec);
            }
            Err(why) => {
                let msg = format!("stage III skipped: review decisions incomplete ({why}); use --no-review to build it from the raw mix");
                tracing::warn!("{msg}");
                notices.push(msg);
                specs.remove(&Stage::III);
            }
        }
    }

    let stamp = cfg.stamp();
    write_layout(cfg)?;
    let final_dir = cfg.output_dir.join(layout::COMPOSE);
    let tmp = cfg.output_dir.join(".compose.tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
    }
    let estimator = CharEstimator::default();
    let mut bindings = Vec::new();
    let mut report = ComposeReport {
        run: Some(stamp.clone()),
        ..Default::default()
    };
    for (stage, spec) in &specs {
        let manifest = apply_mix(spec, &index)?;
        let manifest_rel = layout::manifest(*stage);
        let manifest_path = tmp.join(&manifest_rel);
        manifest.write_jsonl(&manifest_path, Some(&header("stage_manifest", &stamp)))?;

        let members: Vec<&InstructionSample> = manifest.sample_ids().map(|(_, id)| by_id[id]).collect();
        let budget = cfg.pack_budget(*stage);
        let packed = soft_pack(members, budget, &estimator);
        let packed_rel = layout::packed(*stage);
        let packed_path = tmp.join(&packed_rel);
        write_all(&packed_path, "packed_sequences", &stamp, &packed)?;

        let ov = cfg.train_overrides.get(stage).cloned().unwrap_or_default();
        let (config, deviations) = apply_override(stage_config(*stage), &ov);
        bindings.push(StageBinding {
            config,
            deviations,
            data: StageData {
                manifest_sha256: file_sha256(&manifest_path).map_err(io_err(&manifest_path))?,
                manifest: manifest_rel,
                samples: manifest.total,
                packed_sha256: file_sha256(&packed_path).map_err(io_err(&packed_path))?,
                packed: packed_rel,
                sequences: packed.len() as u64,
                pack_budget: budget,
            },
        });
        report.stages.push(StageSummary {
            stage: *stage,
            samples: manifest.total,
            expected: spec.expected_total(),
            sequences: packed.len() as u64,
            overflow: packed.iter().filter(|p| p.overflow).count() as u64,
        });
    }
    let plan = emit_plan(stamp.seed, &stamp.config_hash, bindings)?;
    write_json(&tmp.join(layout::PLAN), &plan)?;
    report.notices = notices.clone();
    write_json(&tmp.join(layout::COMPOSE_REPORT), &report)?;

    if final_dir.exists() {
        fs::remove_dir_all(&final_dir).map_err(io_err(&final_dir))?;
    }
    fs::rename(&tmp, &final_dir).map_err(io_err(&final_dir))?;
    Ok(Outcome {
        report,
        partial: false,
        notices,
    })
}

// ---------------------------------------------------------------------------
// plan

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrPoint {
    pub step: u64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    /// The composed plan, when one exists.
    pub plan: Option<TrainPlan>,
    /// Stage configs with overrides applied.
    pub configs: Vec<crate::trainplan::TrainStageConfig>,
    /// Checksum mismatches between the plan and the files it names.
    pub mismatches: Vec<String>,
    pub lr_curves: BTreeMap<Stage, Vec<LrPoint>>,
}

/// Show stage configs and verify an existing plan's checksums.
/// With `total_steps`, also sample each stage's learning-rate curve at `points` steps.
pub fn cmd_plan(cfg: &RunConfig, total_steps: Option<u64>, points: u64) -> Result<Outcome<PlanReport>, PipelineError> {
    let configs: Vec<_> = Stage::ALL
        .iter()
        .map(|s| apply_override(stage_config(*s), &cfg.train_overrides.get(s).cloned().unwrap_or_default()).0)
        .collect();
    let dir = cfg.output_dir.join(layout::COMPOSE);
    let plan_path = dir.join(layout::PLAN);
    let mut mismatches = Vec::new();
    let plan: Option<TrainPlan> = if plan_path.is_file() {
        let plan: TrainPlan = read_json(&plan_path)?;
        for st in &plan.stages {
            for (rel, want) in [(&st.data.manifest, &st.data.manifest_sha256), (&st.data.packed, &st.data.packed_sha256)] {
                match file_sha256(&dir.join(rel)) {
                    Ok(got) if &got == want => {}
                    Ok(_) => mismatches.push(format!("{rel}: checksum differs from plan")),
                    Err(e) => mismatches.push(format!("{rel}: {e}")),
                }
            }
        }
        Some(plan)
    } else {
        None
    };
    let mut lr_curves = BTreeMap::new();
    if let Some(total) = total_steps {
        let points = points.max(2);
        for c in &configs {
            let curve = (0..points)
                .map(|i| {
                    let step = total * i / (points - 1);
                    LrPoint {
                        step,
                        lr: crate::trainplan::lr_at(c, step, total),
                    }
                })
                .collect();
            lr_curves.insert(c.stage, curve);
        }
    }
    let partial = !mismatches.is_empty();
    let notices = if plan.is_none() {
        vec![format!("{} not found; showing stage configs only", plan_path.display())]
    } else {
        mismatches.clone()
    };
    Ok(Outcome {
        report: PlanReport {
            plan,
            configs,
            mismatches,
            lr_curves,
        },
        partial,
        notices,
    })
}

// ---------------------------------------------------------------------------
// review

/// Open the review store over the current corpus.
pub fn open_review_store(cfg: &RunConfig) -> Result<ReviewStore, PipelineError> {
    let samples = read_samples(cfg)?;
    let records = read_records(cfg)?;
    let data = ReviewData::new(samples, records, &cfg.registry_dir);
    Ok(ReviewStore::open(&cfg.review_dir(), data, cfg.review.policy.clone(), sub_seed(cfg.seed, "review"))?)
}

/// Serve the review API on `port` until `shutdown` resolves.
pub async fn review_serve(
    cfg: &RunConfig,
    port: u16,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), PipelineError> {
    let store = Arc::new(open_review_store(cfg)?);
    let addr = std::net::SocketAddr::from(([127, 0, 0, 1], port));
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| PipelineError::Io {
            path: PathBuf::from(addr.to_string()),
            source,
        })?;
    tracing::info!(%addr, "review service listening");
    crate::review::serve(listener, store, shutdown)
        .await
        .map_err(|source| PipelineError::Io {
            path: PathBuf::from(addr.to_string()),
            source,
        })
}
