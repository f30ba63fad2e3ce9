//! Per-stage data mixes and soft packing.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::artifact::{ArtifactError, ArtifactHeader, JsonlWriter};
use crate::corpus::InstructionSample;
use crate::digest::named_rng;
use crate::types::Stage;

pub const DEFAULT_PACK_BUDGET: u64 = 4096;

/// Round half up, after snapping away float noise below 1e-9.
pub fn round_half_up(x: f64) -> u64 {
    let snapped = (x * 1e9).round() / 1e9;
    (snapped + 0.5).floor().max(0.0) as u64
}

/// Number of samples an entry contributes.
pub fn target_count(available: u64, ratio: f64) -> u64 {
    round_half_up(available as f64 * ratio)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MixError {
    #[error("ratio {ratio} for {dataset} is outside [0, 1]")]
    RatioOutOfRange { dataset: String, ratio: f64 },
    #[error("dataset {0} appears more than once in the mix")]
    DuplicateDataset(String),
    #[error("dataset {dataset}: need {available} samples, index has {found}")]
    InsufficientSamples {
        dataset: String,
        available: u64,
        found: u64,
    },
    #[error("no retention multiplier for {0}")]
    MissingRetention(String),
    #[error("cannot parse {what} `{text}`")]
    BadNumber { what: &'static str, text: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixEntry {
    pub dataset_name: String,
    pub category: String,
    pub available: u64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMixSpec {
    pub stage: Stage,
    pub entries: Vec<MixEntry>,
    pub seed: u64,
}

impl StageMixSpec {
    pub fn validate(&self) -> Result<(), MixError> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !(0.0..=1.0).contains(&e.ratio) {
                return Err(MixError::RatioOutOfRange {
                    dataset: e.dataset_name.clone(),
                    ratio: e.ratio,
                });
            }
            if !seen.insert(e.dataset_name.as_str()) {
                return Err(MixError::DuplicateDataset(e.dataset_name.clone()));
            }
        }
        Ok(())
    }

    /// Analytic total: sum of round(available x ratio).
    pub fn expected_total(&self) -> u64 {
        self.entries.iter().map(|e| target_count(e.available, e.ratio)).sum()
    }

    /// Multiply each positive-ratio entry by its retention fraction.
    ///
    /// Entries with ratio 0 need no multiplier.
    pub fn with_retention(&self, multipliers: &BTreeMap<String, f64>) -> Result<StageMixSpec, MixError> {
        let mut out = self.clone();
        for e in &mut out.entries {
            if e.ratio == 0.0 {
                continue;
            }
            let m = multipliers
                .get(&e.dataset_name)
                .ok_or_else(|| MixError::MissingRetention(e.dataset_name.clone()))?;
            e.ratio *= m.clamp(0.0, 1.0);
        }
        Ok(out)
    }
}

/// Read-only view of the samples available per dataset, sorted by sample id.
pub trait CorpusIndex {
    fn count(&self, dataset: &str) -> Option<u64>;
    /// The `idx`-th sample id of `dataset` in ascending id order.
    fn id_at(&self, dataset: &str, idx: u64) -> String;
}

/// Index over concrete sample ids.
#[derive(Debug, Clone, Default)]
pub struct MemoryIndex {
    ids: BTreeMap<String, Vec<String>>,
}

impl MemoryIndex {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a InstructionSample>) -> Self {
        let mut ids: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for s in samples {
            ids.entry(s.source_dataset.clone()).or_default().push(s.sample_id.clone());
        }
        for v in ids.values_mut() {
            v.sort();
            v.dedup();
        }
        MemoryIndex { ids }
    }

    pub fn datasets(&self) -> impl Iterator<Item = (&str, u64)> {
        self.ids.iter().map(|(k, v)| (k.as_str(), v.len() as u64))
    }
}

impl CorpusIndex for MemoryIndex {
    fn count(&self, dataset: &str) -> Option<u64> {
        self.ids.get(dataset).map(|v| v.len() as u64)
    }

    fn id_at(&self, dataset: &str, idx: u64) -> String {
        self.ids[dataset][idx as usize].clone()
    }
}

/// Lazily materialized ids `"{dataset}:{idx:010}"`; useful at full-table scale.
#[derive(Debug, Clone, Default)]
pub struct SyntheticIndex {
    sizes: BTreeMap<String, u64>,
}

impl SyntheticIndex {
    pub fn new(sizes: impl IntoIterator<Item = (String, u64)>) -> Self {
        SyntheticIndex {
            sizes: sizes.into_iter().collect(),
        }
    }

    pub fn for_spec(spec: &StageMixSpec) -> Self {
        SyntheticIndex::new(spec.entries.iter().map(|e| (e.dataset_name.clone(), e.available)))
    }
}

impl CorpusIndex for SyntheticIndex {
    fn count(&self, dataset: &str) -> Option<u64> {
        self.sizes.get(dataset).copied()
    }

    fn id_at(&self, dataset: &str, idx: u64) -> String {
        format!("{dataset}:{idx:010}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pick {
    pub dataset_name: String,
    pub sample_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: Stage,
    pub picks: Vec<Pick>,
    pub total: u64,
}

#[derive(Serialize)]
struct ManifestLine<'a> {
    dataset_name: &'a str,
    sample_id: &'a str,
}

impl StageManifest {
    pub fn sample_ids(&self) -> impl Iterator<Item = (&str, &str)> {
        self.picks
            .iter()
            .flat_map(|p| p.sample_ids.iter().map(move |s| (p.dataset_name.as_str(), s.as_str())))
    }

    /// JSONL, one `{dataset_name, sample_id}` per line.
    pub fn write_jsonl(&self, path: &Path, header: Option<&ArtifactHeader>) -> Result<(), ArtifactError> {
        let mut w = JsonlWriter::create(path, header)?;
        for (dataset_name, sample_id) in self.sample_ids() {
            w.write(&ManifestLine {
                dataset_name,
                sample_id,
            })?;
        }
        w.finish()
    }
}

/// Stages I and II read the same table column and share a sampling stream.
fn column(stage: Stage) -> &'static str {
    match stage {
        Stage::I | Stage::II => "1_2",
        Stage::III => "3",
    }
}

/// Positions drawn from one dataset's id-sorted samples.
///
/// Sampling is deferred until [`Selection::positions`] so counting a
/// full-table stage stays cheap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Selection {
    /// Every position in `0..n`; no sampling needed.
    All(u64),
    /// `k` distinct positions out of `0..population`, drawn from a named stream.
    Sampled {
        population: u64,
        k: u64,
        seed: u64,
        stream: String,
    },
}

impl Selection {
    pub fn len(&self) -> u64 {
        match self {
            Selection::All(n) => *n,
            Selection::Sampled { k, .. } => *k,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Ascending positions.
    pub fn positions(&self) -> Box<dyn Iterator<Item = u64> + '_> {
        match self {
            Selection::All(n) => Box::new(0..*n),
            Selection::Sampled {
                population,
                k,
                seed,
                stream,
            } => {
                let mut rng = named_rng(*seed, stream);
                let mut v: Vec<u64> = index::sample(&mut rng, *population as usize, *k as usize)
                    .into_iter()
                    .map(|i| i as u64)
                    .collect();
                v.sort_unstable();
                Box::new(v.into_iter())
            }
        }
    }
}

/// Per-entry selections for a stage, in spec order, without resolving ids.
///
/// Seeded sampling without replacement; this is what [`apply_mix`] resolves.
pub fn select(spec: &StageMixSpec, index: &dyn CorpusIndex) -> Result<Vec<(String, Selection)>, MixError> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.entries.len());
    for e in &spec.entries {
        let found = index.count(&e.dataset_name).unwrap_or(0);
        if found < e.available {
            return Err(MixError::InsufficientSamples {
                dataset: e.dataset_name.clone(),
                available: e.available,
                found,
            });
        }
        let k = target_count(e.available, e.ratio);
        let selection = if k == found {
            Selection::All(found)
        } else {
            Selection::Sampled {
                population: found,
                k,
                seed: spec.seed,
                stream: format!("mix/{}/{}", column(spec.stage), e.dataset_name),
            }
        };
        out.push((e.dataset_name.clone(), selection));
    }
    Ok(out)
}

/// Resolve [`select`] into sample ids, in table order then sample id.
pub fn apply_mix(spec: &StageMixSpec, index: &dyn CorpusIndex) -> Result<StageManifest, MixError> {
    let picks: Vec<Pick> = select(spec, index)?
        .into_iter()
        .map(|(dataset_name, sel)| {
            let mut sample_ids: Vec<String> = sel.positions().map(|i| index.id_at(&dataset_name, i)).collect();
            sample_ids.sort();
            Pick {
                dataset_name,
                sample_ids,
            }
        })
        .collect();
    let total = picks.iter().map(|p| p.sample_ids.len() as u64).sum();
    Ok(StageManifest {
        stage: spec.stage,
        picks,
        total,
    })
}

// ---------------------------------------------------------------------------
// Bundled dataset table

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableRow {
    pub name: String,
    /// As printed, e.g. `468k` or `1.7M`.
    pub size: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableGroup {
    pub category: String,
    pub ratio_stage_1_2: String,
    pub ratio_stage_3: String,
    pub datasets: Vec<TableRow>,
}

/// Dataset list with sizes and per-stage ratios, in the printed layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixTable {
    pub groups: Vec<TableGroup>,
}

const BUNDLED_TABLE: &str = include_str!("../data/mix_table.json");

/// Parse a decimal with an optional `k`/`M` suffix exactly, e.g. `3.2k` -> 3200.
pub fn parse_size(text: &str) -> Result<u64, MixError> {
    let bad = || MixError::BadNumber {
        what: "size",
        text: text.to_string(),
    };
    let t = text.trim();
    let (num, scale) = match t.chars().last() {
        Some('k' | 'K') => (&t[..t.len() - 1], 1_000u64),
        Some('M') => (&t[..t.len() - 1], 1_000_000u64),
        _ => (t, 1u64),
    };
    let (int, frac) = num.split_once('.').unwrap_or((num, ""));
    if int.is_empty() || !int.bytes().all(|b| b.is_ascii_digit()) || !frac.bytes().all(|b| b.is_ascii_digit()) {
        return Err(bad());
    }
    let denom = 10u64.checked_pow(frac.len() as u32).ok_or_else(bad)?;
    if scale % denom != 0 {
        return Err(bad());
    }
    let frac_val: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
    let int_val: u64 = int.parse().map_err(|_| bad())?;
    Ok(int_val * scale + frac_val * (scale / denom))
}

/// `"50.0%"` -> 0.5
pub fn parse_percent(text: &str) -> Result<f64, MixError> {
    let bad = || MixError::BadNumber {
        what: "percentage",
        text: text.to_string(),
    };
    let v: f64 = text.trim().strip_suffix('%').ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
    Ok(v / 100.0)
}

impl MixTable {
    /// The dataset table shipped with the crate: sizes as printed, ratios per stage.
    pub fn bundled() -> MixTable {
        serde_json::from_str(BUNDLED_TABLE).expect("bundled table parses")
    }

    pub fn rows(&self) -> impl Iterator<Item = (&TableGroup, &TableRow)> {
        self.groups.iter().flat_map(|g| g.datasets.iter().map(move |d| (g, d)))
    }

    /// Stage I and II share the joint column.
    pub fn spec_for(&self, stage: Stage, seed: u64) -> Result<StageMixSpec, MixError> {
        let mut entries = Vec::new();
        for (g, d) in self.rows() {
            let ratio = match stage {
                Stage::I | Stage::II => &g.ratio_stage_1_2,
                Stage::III => &g.ratio_stage_3,
            };
            entries.push(MixEntry {
                dataset_name: d.name.clone(),
                category: g.category.clone(),
                available: parse_size(&d.size)?,
                ratio: parse_percent(ratio)?,
            });
        }
        let spec = StageMixSpec { stage, entries, seed };
        spec.validate()?;
        Ok(spec)
    }
}

// ---------------------------------------------------------------------------
// Token estimation and packing

pub trait TokenEstimator {
    fn estimate(&self, sample: &InstructionSample) -> u64;
}

/// `ceil(chars / chars_per_token)` plus a fixed stub for an attached image; at least 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharEstimator {
    pub chars_per_token: u64,
    pub image_tokens: u64,
}

impl Default for CharEstimator {
    fn default() -> Self {
        CharEstimator {
            chars_per_token: 4,
            image_tokens: 64,
        }
    }
}

impl TokenEstimator for CharEstimator {
    fn estimate(&self, s: &InstructionSample) -> u64 {
        let chars: u64 = s.messages.iter().map(|m| m.content.chars().count() as u64).sum();
        let image = if s.image_ref.is_some() { self.image_tokens } else { 0 };
        (chars.div_ceil(self.chars_per_token.max(1)) + image).max(1)
    }
}

pub fn token_len(sample: &InstructionSample, estimator: &dyn TokenEstimator) -> u64 {
    estimator.estimate(sample)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedSequence {
    pub seq_id: String,
    pub member_sample_ids: Vec<String>,
    pub token_lengths: Vec<u64>,
    pub budget: u64,
    pub overflow: bool,
}

impl PackedSequence {
    pub fn used(&self) -> u64 {
        self.token_lengths.iter().sum()
    }
}

fn close(out: &mut Vec<PackedSequence>, ids: &mut Vec<String>, lens: &mut Vec<u64>, budget: u64) {
    if ids.is_empty() {
        return;
    }
    let overflow = lens.len() == 1 && lens[0] > budget;
    out.push(PackedSequence {
        seq_id: format!("seq{:07}", out.len()),
        member_sample_ids: std::mem::take(ids),
        token_lengths: std::mem::take(lens),
        budget,
        overflow,
    });
}

/// Greedy in-order packing of `(sample_id, length)` items.
///
/// Items join the open sequence while its sum stays within `budget`;
/// otherwise the sequence is closed. An item longer than the budget gets a
/// sequence of its own marked `overflow`.
pub fn pack_lengths(items: impl IntoIterator<Item = (String, u64)>, budget: u64) -> Vec<PackedSequence> {
    assert!(budget >= 1, "packing budget must be >= 1");
    let mut out = Vec::new();
    let (mut ids, mut lens) = (Vec::new(), Vec::new());
    let mut used = 0u64;
    for (id, len) in items {
        if used + len > budget {
            close(&mut out, &mut ids, &mut lens, budget);
            used = 0;
        }
        ids.push(id);
        lens.push(len);
        used += len;
        if len > budget {
            close(&mut out, &mut ids, &mut lens, budget);
            used = 0;
        }
    }
    close(&mut out, &mut ids, &mut lens, budget);
    out
}

pub fn soft_pack<'a>(
    samples: impl IntoIterator<Item = &'a InstructionSample>,
    budget: u64,
    estimator: &dyn TokenEstimator,
) -> Vec<PackedSequence> {
    pack_lengths(
        samples.into_iter().map(|s| (s.sample_id.clone(), estimator.estimate(s))),
        budget,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Message;
    use crate::types::{InstructionFormat, Language};

    fn text_sample(chars: usize, image: bool) -> InstructionSample {
        InstructionSample {
            sample_id: "s".into(),
            source_record_id: "r".into(),
            source_dataset: "d".into(),
            format: if image {
                InstructionFormat::ImageCaption
            } else {
                InstructionFormat::TextOnly
            },
            language: Language::En,
            image_ref: image.then(|| "x.png".into()),
            messages: vec![Message::user("x".repeat(chars)), Message::assistant("")],
            quality_flag: None,
        }
    }

    #[test]
    fn table_examples() {
        assert_eq!(target_count(468_000, 0.5), 234_000);
        assert_eq!(target_count(288_000, 0.1), 28_800);
        assert_eq!(target_count(5, 0.5), 3);
    }

    #[test]
    fn sizes_parse_exactly() {
        assert_eq!(parse_size("468k").unwrap(), 468_000);
        assert_eq!(parse_size("1.7M").unwrap(), 1_700_000);
        assert_eq!(parse_size("1.28M").unwrap(), 1_280_000);
        assert_eq!(parse_size("0.3k").unwrap(), 300);
        assert_eq!(parse_size("12").unwrap(), 12);
        assert!(parse_size("1.2345k").is_err());
        assert!(parse_size("k").is_err());
        assert_eq!(parse_percent("5.0%").unwrap(), 0.05);
        assert!(parse_percent("5").is_err());
    }

    #[test]
    fn identity_mix_keeps_every_id_in_order() {
        let spec = StageMixSpec {
            stage: Stage::I,
            entries: vec![MixEntry {
                dataset_name: "b".into(),
                category: "c".into(),
                available: 7,
                ratio: 1.0,
            }],
            seed: 1,
        };
        let m = apply_mix(&spec, &SyntheticIndex::for_spec(&spec)).unwrap();
        let want: Vec<String> = (0..7).map(|i| format!("b:{i:010}")).collect();
        assert_eq!(m.picks[0].sample_ids, want);
    }

    #[test]
    fn insufficient_and_invalid_specs() {
        let mut spec = StageMixSpec {
            stage: Stage::III,
            entries: vec![MixEntry {
                dataset_name: "a".into(),
                category: "c".into(),
                available: 10,
                ratio: 0.5,
            }],
            seed: 1,
        };
        let small = SyntheticIndex::new([("a".to_string(), 9)]);
        assert!(matches!(apply_mix(&spec, &small), Err(MixError::InsufficientSamples { .. })));
        spec.entries[0].ratio = 1.5;
        assert!(matches!(spec.validate(), Err(MixError::RatioOutOfRange { .. })));
    }

    #[test]
    fn retention_scales_positive_entries() {
        let spec = StageMixSpec {
            stage: Stage::III,
            entries: vec![
                MixEntry { dataset_name: "a".into(), category: "c".into(), available: 10_000, ratio: 1.0 },
                MixEntry { dataset_name: "z".into(), category: "c".into(), available: 10, ratio: 0.0 },
            ],
            seed: 1,
        };
        let m = BTreeMap::from([("a".to_string(), 0.05)]);
        assert_eq!(spec.with_retention(&m).unwrap().expected_total(), 500);
        assert!(spec.with_retention(&BTreeMap::new()).is_err());
    }

    #[test]
    fn estimator_examples() {
        let est = CharEstimator::default();
        assert_eq!(est.estimate(&text_sample(0, false)), 1);
        assert_eq!(est.estimate(&text_sample(400, false)), 100);
        assert_eq!(est.estimate(&text_sample(401, true)), 101 + 64);
    }

    fn lens(p: &[PackedSequence]) -> Vec<Vec<u64>> {
        p.iter().map(|s| s.token_lengths.clone()).collect()
    }

    #[test]
    fn packing_hand_traces() {
        let items = |v: &[u64]| v.iter().enumerate().map(|(i, l)| (i.to_string(), *l)).collect::<Vec<_>>();
        assert_eq!(lens(&pack_lengths(items(&[100, 200, 300]), 512)), vec![vec![100, 200], vec![300]]);
        assert!(pack_lengths(Vec::new(), 512).is_empty());
        let over = pack_lengths(items(&[600]), 512);
        assert_eq!(over.len(), 1);
        assert!(over[0].overflow);
        let mixed = pack_lengths(items(&[10, 600, 10, 512]), 512);
        assert_eq!(lens(&mixed), vec![vec![10], vec![600], vec![10], vec![512]]);
        assert_eq!(mixed.iter().filter(|s| s.overflow).count(), 1);
    }
}
