//! Dataset-level quality review.
//!
//! Reviewers page through a seeded subset of each dataset and submit a
//! high/low verdict. Labels go to an append-only event log. The aggregate
//! verdict per dataset is the majority over each reviewer's latest label,
//! with ties counted as low. The aggregate drives a retention decision that
//! scales the dataset's Stage-III mix ratio.

mod server;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use chrono::{DateTime, Utc};
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::artifact::{read_json, read_jsonl, write_json, ArtifactError, JsonlWriter};
use crate::canonicalize::CanonicalRecord;
use crate::corpus::InstructionSample;
use crate::digest::{named_rng, unit_draw};
use crate::types::Verdict;

pub use server::{router, serve};

pub const EVENT_LOG: &str = "events.jsonl";
pub const DECISIONS_FILE: &str = "decisions.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReviewPolicy {
    pub min_samples_seen: usize,
    /// Samples per dataset drawn into the review subset.
    pub subset_size: usize,
    pub diversity_fraction: f64,
    pub diversity_pool_rate: f64,
}

impl Default for ReviewPolicy {
    fn default() -> Self {
        ReviewPolicy {
            min_samples_seen: 20,
            subset_size: 200,
            diversity_fraction: 0.05,
            diversity_pool_rate: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityLabel {
    pub dataset_name: String,
    pub reviewer: String,
    pub verdict: Verdict,
    pub sample_ids_seen: Vec<String>,
    pub timestamp: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionDecision {
    pub dataset_name: String,
    pub verdict: Verdict,
    pub retained: bool,
    pub retained_fraction: f64,
}

/// Contents of the decisions snapshot file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionSnapshot {
    pub seed: u64,
    pub policy: ReviewPolicy,
    pub decisions: Vec<RetentionDecision>,
}

impl DecisionSnapshot {
    pub fn load(path: &Path) -> Result<Self, ArtifactError> {
        read_json(path)
    }

    /// Mix multipliers keyed by dataset.
    pub fn multipliers(&self) -> BTreeMap<String, f64> {
        self.decisions
            .iter()
            .map(|d| (d.dataset_name.clone(), if d.retained { d.retained_fraction } else { 0.0 }))
            .collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ReviewError {
    #[error("unknown dataset {0}")]
    UnknownDataset(String),
    #[error("cursor {cursor} is at or past the end of the {len}-sample review subset")]
    EndOfSubset { cursor: usize, len: usize },
    #[error("verdict needs {required} distinct reviewed samples from the subset, got {seen}")]
    InsufficientReview { seen: usize, required: usize },
    #[error("no verdict recorded for {0}")]
    NoVerdict(String),
    #[error("invalid label: {0}")]
    InvalidLabel(String),
    #[error(transparent)]
    Storage(#[from] ArtifactError),
}

/// Majority over verdicts; ties (and no votes) resolve to low.
pub fn aggregate(verdicts: impl IntoIterator<Item = Verdict>) -> Verdict {
    let (mut high, mut low) = (0usize, 0usize);
    for v in verdicts {
        match v {
            Verdict::High => high += 1,
            Verdict::Low => low += 1,
        }
    }
    if high > low {
        Verdict::High
    } else {
        Verdict::Low
    }
}

/// Deterministic retention for an aggregate verdict.
pub fn retention(dataset: &str, verdict: Verdict, policy: &ReviewPolicy, seed: u64) -> RetentionDecision {
    let (retained, retained_fraction) = match verdict {
        Verdict::High => (true, 1.0),
        Verdict::Low if unit_draw(seed, &format!("diversity/{dataset}")) < policy.diversity_pool_rate => {
            (true, policy.diversity_fraction)
        }
        Verdict::Low => (false, 0.0),
    };
    RetentionDecision {
        dataset_name: dataset.to_string(),
        verdict,
        retained,
        retained_fraction,
    }
}

/// Seeded review order over `ids` (which must be sorted): up to `size` ids, shuffled.
pub fn review_subset(dataset: &str, ids: &[String], size: usize, seed: u64) -> Vec<String> {
    let mut rng = named_rng(seed, &format!("review/{dataset}"));
    let mut picked: Vec<usize> = index::sample(&mut rng, ids.len(), size.min(ids.len())).into_vec();
    picked.sort_unstable();
    picked.shuffle(&mut rng);
    picked.into_iter().map(|i| ids[i].clone()).collect()
}

/// Samples and records the service reviews.
#[derive(Debug, Default)]
pub struct ReviewData {
    samples: BTreeMap<String, Vec<InstructionSample>>,
    by_id: HashMap<String, (String, usize)>,
    records: HashMap<String, CanonicalRecord>,
    image_root: PathBuf,
}

impl ReviewData {
    pub fn new(
        samples: impl IntoIterator<Item = InstructionSample>,
        records: impl IntoIterator<Item = CanonicalRecord>,
        image_root: impl Into<PathBuf>,
    ) -> Self {
        let mut grouped: BTreeMap<String, Vec<InstructionSample>> = BTreeMap::new();
        for s in samples {
            grouped.entry(s.source_dataset.clone()).or_default().push(s);
        }
        let mut by_id = HashMap::new();
        for (ds, v) in grouped.iter_mut() {
            v.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
            for (i, s) in v.iter().enumerate() {
                by_id.insert(s.sample_id.clone(), (ds.clone(), i));
            }
        }
        ReviewData {
            samples: grouped,
            by_id,
            records: records.into_iter().map(|r| (r.record_id.clone(), r)).collect(),
            image_root: image_root.into(),
        }
    }

    pub fn datasets(&self) -> impl Iterator<Item = (&str, usize)> {
        self.samples.iter().map(|(k, v)| (k.as_str(), v.len()))
    }

    pub fn sample(&self, sample_id: &str) -> Option<&InstructionSample> {
        let (ds, i) = self.by_id.get(sample_id)?;
        self.samples.get(ds)?.get(*i)
    }

    pub fn record(&self, record_id: &str) -> Option<&CanonicalRecord> {
        self.records.get(record_id)
    }

    pub fn image_path(&self, record_id: &str) -> Option<PathBuf> {
        self.records.get(record_id).map(|r| self.image_root.join(&r.image_ref))
    }
}

#[derive(Debug, Clone, Default)]
struct LabelState {
    /// dataset -> reviewer -> latest label
    latest: BTreeMap<String, BTreeMap<String, QualityLabel>>,
}

impl LabelState {
    fn apply(&mut self, label: QualityLabel) {
        self.latest
            .entry(label.dataset_name.clone())
            .or_default()
            .insert(label.reviewer.clone(), label);
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Page<'a> {
    pub samples: Vec<&'a InstructionSample>,
    pub next_cursor: Option<usize>,
    pub subset_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ack {
    pub dataset_name: String,
    pub reviewer: String,
    pub aggregate: Verdict,
    pub reviewers: usize,
    pub decision: RetentionDecision,
}

/// Review state backed by a directory holding the event log and decisions snapshot.
///
/// Reads go through an immutable snapshot; writes are serialized.
#[derive(Debug)]
pub struct ReviewStore {
    dir: PathBuf,
    seed: u64,
    policy: ReviewPolicy,
    data: ReviewData,
    subsets: BTreeMap<String, Vec<String>>,
    state: RwLock<Arc<LabelState>>,
    writer: std::sync::Mutex<()>,
}

impl ReviewStore {
    /// Open (or create) a store and replay its event log.
    pub fn open(dir: &Path, data: ReviewData, policy: ReviewPolicy, seed: u64) -> Result<Self, ReviewError> {
        fs::create_dir_all(dir).map_err(|source| ArtifactError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let subsets = data
            .samples
            .iter()
            .map(|(ds, v)| {
                let ids: Vec<String> = v.iter().map(|s| s.sample_id.clone()).collect();
                (ds.clone(), review_subset(ds, &ids, policy.subset_size, seed))
            })
            .collect();
        let mut state = LabelState::default();
        let log = dir.join(EVENT_LOG);
        if log.exists() {
            let (_, events): (_, Vec<QualityLabel>) = read_jsonl(&log)?;
            for e in events {
                state.apply(e);
            }
        }
        Ok(ReviewStore {
            dir: dir.to_path_buf(),
            seed,
            policy,
            data,
            subsets,
            state: RwLock::new(Arc::new(state)),
            writer: std::sync::Mutex::new(()),
        })
    }

    pub fn policy(&self) -> &ReviewPolicy {
        &self.policy
    }

    pub fn data(&self) -> &ReviewData {
        &self.data
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn snapshot(&self) -> Arc<LabelState> {
        self.state.read().expect("label state lock").clone()
    }

    pub fn subset(&self, dataset: &str) -> Result<&[String], ReviewError> {
        self.subsets
            .get(dataset)
            .map(Vec::as_slice)
            .ok_or_else(|| ReviewError::UnknownDataset(dataset.to_string()))
    }

    pub fn next_batch(&self, dataset: &str, size: usize, cursor: usize) -> Result<Page<'_>, ReviewError> {
        let subset = self.subset(dataset)?;
        if cursor >= subset.len() {
            return Err(ReviewError::EndOfSubset {
                cursor,
                len: subset.len(),
            });
        }
        let end = (cursor + size.max(1)).min(subset.len());
        let samples = subset[cursor..end]
            .iter()
            .map(|id| self.data.sample(id).expect("subset ids come from the data"))
            .collect();
        Ok(Page {
            samples,
            next_cursor: (end < subset.len()).then_some(end),
            subset_len: subset.len(),
        })
    }

    pub fn aggregate(&self, dataset: &str) -> Option<(Verdict, usize)> {
        let snap = self.snapshot();
        let labels = snap.latest.get(dataset)?;
        Some((aggregate(labels.values().map(|l| l.verdict)), labels.len()))
    }

    pub fn decision(&self, dataset: &str) -> Result<RetentionDecision, ReviewError> {
        self.subset(dataset)?;
        let (verdict, _) = self
            .aggregate(dataset)
            .ok_or_else(|| ReviewError::NoVerdict(dataset.to_string()))?;
        Ok(retention(dataset, verdict, &self.policy, self.seed))
    }

    pub fn decisions(&self) -> DecisionSnapshot {
        let snap = self.snapshot();
        let decisions = snap
            .latest
            .iter()
            .map(|(ds, labels)| {
                retention(ds, aggregate(labels.values().map(|l| l.verdict)), &self.policy, self.seed)
            })
            .collect();
        DecisionSnapshot {
            seed: self.seed,
            policy: self.policy.clone(),
            decisions,
        }
    }

    fn check(&self, label: &QualityLabel) -> Result<(), ReviewError> {
        if label.reviewer.trim().is_empty() {
            return Err(ReviewError::InvalidLabel("reviewer must be non-empty".into()));
        }
        let subset = self.subset(&label.dataset_name)?;
        let members: BTreeSet<&str> = subset.iter().map(String::as_str).collect();
        let seen: BTreeSet<&str> = label
            .sample_ids_seen
            .iter()
            .map(String::as_str)
            .filter(|id| members.contains(id))
            .collect();
        let required = self.policy.min_samples_seen.min(subset.len());
        if seen.len() < required {
            return Err(ReviewError::InsufficientReview {
                seen: seen.len(),
                required,
            });
        }
        Ok(())
    }

    /// Validate, append to the event log, and refresh the decisions snapshot.
    pub fn submit_label(&self, label: QualityLabel) -> Result<Ack, ReviewError> {
        self.check(&label)?;
        let _guard = self.writer.lock().expect("writer lock");
        let mut w = JsonlWriter::append(&self.dir.join(EVENT_LOG))?;
        w.write(&label)?;
        w.finish()?;

        let mut next = (*self.snapshot()).clone();
        let (dataset, reviewer) = (label.dataset_name.clone(), label.reviewer.clone());
        next.apply(label);
        *self.state.write().expect("label state lock") = Arc::new(next);
        self.write_snapshot()?;

        let (aggregate, reviewers) = self.aggregate(&dataset).expect("label just applied");
        Ok(Ack {
            decision: retention(&dataset, aggregate, &self.policy, self.seed),
            dataset_name: dataset,
            reviewer,
            aggregate,
            reviewers,
        })
    }

    fn write_snapshot(&self) -> Result<(), ReviewError> {
        let tmp = self.dir.join(format!("{DECISIONS_FILE}.tmp"));
        write_json(&tmp, &self.decisions())?;
        let target = self.dir.join(DECISIONS_FILE);
        fs::rename(&tmp, &target).map_err(|source| ArtifactError::Io { path: target, source })?;
        Ok(())
    }
}
