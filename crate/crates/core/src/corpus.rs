//! Instruction samples: assembly from generation results, dedup, and statistics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::canonicalize::CanonicalRecord;
use crate::digest::content_id;
use crate::genclient::{FinishReason, GenerationResult};
use crate::ingest::{DatasetDescriptor, Registry};
use crate::promptgen::{GenerationRequest, Mcq};
use crate::types::{InstructionFormat, Language, Verdict};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn user(content: impl Into<String>) -> Self {
        Message {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Message {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionSample {
    pub sample_id: String,
    pub source_record_id: String,
    pub source_dataset: String,
    pub format: InstructionFormat,
    pub language: Language,
    pub image_ref: Option<String>,
    pub messages: Vec<Message>,
    #[serde(default)]
    pub quality_flag: Option<Verdict>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ShapeViolation {
    #[error("messages must alternate user/assistant starting with user")]
    Alternation,
    #[error("{format} needs {expected} turn pairs, found {found}")]
    TurnCount {
        format: InstructionFormat,
        expected: &'static str,
        found: usize,
    },
    #[error("image_ref must be present exactly when the format carries an image")]
    ImagePresence,
}

impl InstructionSample {
    pub fn check_shape(&self) -> Result<(), ShapeViolation> {
        let alternates = self.messages.len().is_multiple_of(2)
            && self.messages.iter().enumerate().all(|(i, m)| {
                m.role == if i % 2 == 0 { Role::User } else { Role::Assistant }
            });
        if !alternates {
            return Err(ShapeViolation::Alternation);
        }
        let pairs = self.messages.len() / 2;
        let (ok, expected) = match self.format {
            InstructionFormat::Dialogue => (pairs >= 2, ">= 2"),
            _ => (pairs == 1, "exactly 1"),
        };
        if !ok {
            return Err(ShapeViolation::TurnCount {
                format: self.format,
                expected,
                found: pairs,
            });
        }
        if self.image_ref.is_some() != self.format.has_image() {
            return Err(ShapeViolation::ImagePresence);
        }
        Ok(())
    }

    /// Copy with every message content replaced, tagged as Chinese.
    pub fn translated(&self, contents: Vec<String>) -> InstructionSample {
        assert_eq!(contents.len(), self.messages.len(), "one translation per message");
        InstructionSample {
            sample_id: content_id(&["sample", &self.sample_id, Language::Zh.as_str()]),
            language: Language::Zh,
            messages: self
                .messages
                .iter()
                .zip(contents)
                .map(|(m, content)| Message { role: m.role, content })
                .collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AssembleError {
    #[error("result {0} was not completed normally ({1:?})")]
    NotCompleted(String, FinishReason),
    #[error("result {result} does not answer request {request}")]
    RequestMismatch { request: String, result: String },
    #[error("request {request} targets record {expected}, got {found}")]
    RecordMismatch {
        request: String,
        expected: String,
        found: String,
    },
    #[error("dialogue {0} could not be split into at least two turn pairs: {1}")]
    DialogueParse(String, String),
    #[error("instruction {0} has no question/answer pair: {1}")]
    InstructionParse(String, String),
    #[error("request {0} has no multiple-choice payload")]
    MissingMcq(String),
    #[error("record {0} has no bounding box for a region caption")]
    MissingBbox(String),
}

/// Split `Q:`/`A:` marked text into (question, answer) pairs.
///
/// Text before the first `Q:` is ignored. Unmarked lines continue the
/// current turn. Every question needs an answer.
pub fn split_turns(text: &str) -> Result<Vec<(String, String)>, String> {
    enum Open {
        None,
        Q(String),
        A(String, String),
    }
    fn marker(line: &str, m: char) -> Option<&str> {
        let rest = line.strip_prefix(m)?;
        rest.strip_prefix(':')
            .or_else(|| rest.strip_prefix('\u{ff1a}'))
            .map(str::trim)
    }
    let mut pairs = Vec::new();
    let mut open = Open::None;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(q) = marker(line, 'Q') {
            open = match open {
                Open::Q(_) => return Err(format!("line {}: question without answer", n + 1)),
                Open::A(q0, a0) => {
                    pairs.push((q0, a0));
                    Open::Q(q.to_string())
                }
                Open::None => Open::Q(q.to_string()),
            };
        } else if let Some(a) = marker(line, 'A') {
            open = match open {
                Open::Q(q) => Open::A(q, a.to_string()),
                _ => return Err(format!("line {}: answer without question", n + 1)),
            };
        } else if !line.is_empty() {
            match &mut open {
                Open::None => {}
                Open::Q(s) | Open::A(_, s) => {
                    s.push('\n');
                    s.push_str(line);
                }
            }
        }
    }
    match open {
        Open::A(q, a) => pairs.push((q, a)),
        Open::Q(_) => return Err("trailing question without answer".into()),
        Open::None => {}
    }
    if let Some((q, a)) = pairs.iter().find(|(q, a)| q.is_empty() || a.is_empty()) {
        return Err(format!("empty turn in pair ({q:?}, {a:?})"));
    }
    Ok(pairs)
}

fn caption_question(format: InstructionFormat, rec: &CanonicalRecord) -> Option<String> {
    match format {
        InstructionFormat::ImageCaption => Some("Please describe this image in detail.".into()),
        InstructionFormat::RegionCaption => rec.bbox.map(|b| {
            format!(
                "Please describe the region [{}, {}, {}, {}] in this image in detail.",
                b.x_min, b.y_min, b.x_max, b.y_max
            )
        }),
        _ => None,
    }
}

pub fn sample_id(request_id: &str, lang: Language) -> String {
    content_id(&["sample", request_id, lang.as_str()])
}

/// Build a sample from a completed generation. Refused or truncated results are errors.
pub fn assemble(
    req: &GenerationRequest,
    res: &GenerationResult,
    rec: &CanonicalRecord,
) -> Result<InstructionSample, AssembleError> {
    if res.request_id != req.request_id {
        return Err(AssembleError::RequestMismatch {
            request: req.request_id.clone(),
            result: res.request_id.clone(),
        });
    }
    if res.finish_reason != FinishReason::Ok {
        return Err(AssembleError::NotCompleted(res.request_id.clone(), res.finish_reason));
    }
    if req.record_id != rec.record_id {
        return Err(AssembleError::RecordMismatch {
            request: req.request_id.clone(),
            expected: req.record_id.clone(),
            found: rec.record_id.clone(),
        });
    }
    let text = res.text.trim();
    let messages = match req.format {
        InstructionFormat::ImageCaption | InstructionFormat::RegionCaption => {
            let q = caption_question(req.format, rec)
                .ok_or_else(|| AssembleError::MissingBbox(rec.record_id.clone()))?;
            vec![Message::user(q), Message::assistant(text)]
        }
        InstructionFormat::VisualPerception => {
            let mcq = req
                .mcq
                .as_ref()
                .ok_or_else(|| AssembleError::MissingMcq(req.request_id.clone()))?;
            let answer = format!("{}. {}\n{}", Mcq::letter(mcq.answer_index), mcq.answer(), text);
            vec![Message::user(mcq.render()), Message::assistant(answer)]
        }
        InstructionFormat::FreeInstruction | InstructionFormat::TextOnly => {
            let pairs = split_turns(text)
                .map_err(|e| AssembleError::InstructionParse(req.request_id.clone(), e))?;
            let (q, a) = pairs.into_iter().next().ok_or_else(|| {
                AssembleError::InstructionParse(req.request_id.clone(), "no turns found".into())
            })?;
            vec![Message::user(q), Message::assistant(a)]
        }
        InstructionFormat::Dialogue => {
            let pairs = split_turns(text)
                .map_err(|e| AssembleError::DialogueParse(req.request_id.clone(), e))?;
            if pairs.len() < 2 {
                return Err(AssembleError::DialogueParse(
                    req.request_id.clone(),
                    format!("found {} pair(s)", pairs.len()),
                ));
            }
            pairs
                .into_iter()
                .flat_map(|(q, a)| [Message::user(q), Message::assistant(a)])
                .collect()
        }
    };
    Ok(InstructionSample {
        sample_id: sample_id(&req.request_id, req.target_language),
        source_record_id: rec.record_id.clone(),
        source_dataset: rec.source_dataset.clone(),
        format: req.format,
        language: req.target_language,
        image_ref: req.format.has_image().then(|| rec.image_ref.clone()),
        messages,
        quality_flag: None,
    })
}

type DedupKey = (String, InstructionFormat, Language, [u8; 32]);

fn messages_digest(messages: &[Message]) -> [u8; 32] {
    let mut h = Sha256::new();
    for m in messages {
        let role: &[u8] = match m.role {
            Role::User => b"u",
            Role::Assistant => b"a",
        };
        h.update(role);
        h.update((m.content.len() as u64).to_le_bytes());
        h.update(m.content.as_bytes());
    }
    h.finalize().into()
}

/// Streaming dedup keeping the first sample per (record, format, language, messages).
#[derive(Debug, Default)]
pub struct Deduper {
    seen: HashSet<DedupKey>,
}

impl Deduper {
    pub fn new() -> Self {
        Deduper::default()
    }

    /// True when the sample has not been seen before.
    pub fn admit(&mut self, s: &InstructionSample) -> bool {
        self.seen.insert((
            s.source_record_id.clone(),
            s.format,
            s.language,
            messages_digest(&s.messages),
        ))
    }
}

pub fn dedup(samples: impl IntoIterator<Item = InstructionSample>) -> Vec<InstructionSample> {
    let mut d = Deduper::new();
    samples.into_iter().filter(|s| d.admit(s)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TraceError {
    #[error("sample {sample} references unknown record {record}")]
    UnknownRecord { sample: String, record: String },
    #[error("sample {sample} references unknown dataset {dataset}")]
    UnknownDataset { sample: String, dataset: String },
    #[error("sample {sample} claims dataset {claimed} but its record belongs to {actual}")]
    DatasetMismatch {
        sample: String,
        claimed: String,
        actual: String,
    },
}

/// Resolve a sample to its canonical record and source dataset descriptor.
pub fn trace<'a>(
    s: &InstructionSample,
    records: &'a HashMap<String, CanonicalRecord>,
    registry: &'a Registry,
) -> Result<(&'a CanonicalRecord, &'a DatasetDescriptor), TraceError> {
    let rec = records
        .get(&s.source_record_id)
        .ok_or_else(|| TraceError::UnknownRecord {
            sample: s.sample_id.clone(),
            record: s.source_record_id.clone(),
        })?;
    if rec.source_dataset != s.source_dataset {
        return Err(TraceError::DatasetMismatch {
            sample: s.sample_id.clone(),
            claimed: s.source_dataset.clone(),
            actual: rec.source_dataset.clone(),
        });
    }
    let desc = registry
        .get(&s.source_dataset)
        .ok_or_else(|| TraceError::UnknownDataset {
            sample: s.sample_id.clone(),
            dataset: s.source_dataset.clone(),
        })?;
    Ok((rec, desc))
}

// ---------------------------------------------------------------------------
// Statistics

pub const UNSPECIFIED_DEPARTMENT: &str = "unspecified";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Share {
    pub count: u64,
    pub percent: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub total: u64,
    pub by_modality: BTreeMap<String, Share>,
    pub by_task: BTreeMap<String, Share>,
    pub by_department: BTreeMap<String, Share>,
    pub by_format: BTreeMap<String, Share>,
    pub by_language: BTreeMap<String, Share>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("sample {sample} comes from unregistered dataset {dataset}")]
pub struct UnknownDataset {
    pub sample: String,
    pub dataset: String,
}

/// Count maps for one shard. Merging is associative and commutative.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StatsAccumulator {
    pub total: u64,
    pub modality: BTreeMap<String, u64>,
    pub task: BTreeMap<String, u64>,
    pub department: BTreeMap<String, u64>,
    pub format: BTreeMap<String, u64>,
    pub language: BTreeMap<String, u64>,
}

fn bump(map: &mut BTreeMap<String, u64>, key: &str, by: u64) {
    *map.entry(key.to_string()).or_default() += by;
}

impl StatsAccumulator {
    pub fn add(&mut self, s: &InstructionSample, registry: &Registry) -> Result<(), UnknownDataset> {
        let desc = registry.get(&s.source_dataset).ok_or_else(|| UnknownDataset {
            sample: s.sample_id.clone(),
            dataset: s.source_dataset.clone(),
        })?;
        self.total += 1;
        bump(&mut self.modality, desc.modality.as_str(), 1);
        bump(&mut self.task, desc.task_kind.as_str(), 1);
        bump(
            &mut self.department,
            desc.department.as_deref().unwrap_or(UNSPECIFIED_DEPARTMENT),
            1,
        );
        bump(&mut self.format, s.format.as_str(), 1);
        bump(&mut self.language, s.language.as_str(), 1);
        Ok(())
    }

    pub fn merge(mut self, other: &StatsAccumulator) -> StatsAccumulator {
        self.total += other.total;
        for (mine, theirs) in [
            (&mut self.modality, &other.modality),
            (&mut self.task, &other.task),
            (&mut self.department, &other.department),
            (&mut self.format, &other.format),
            (&mut self.language, &other.language),
        ] {
            for (k, v) in theirs {
                bump(mine, k, *v);
            }
        }
        self
    }

    pub fn finish(&self) -> CorpusStats {
        CorpusStats {
            total: self.total,
            by_modality: shares(&self.modality),
            by_task: shares(&self.task),
            by_department: shares(&self.department),
            by_format: shares(&self.format),
            by_language: shares(&self.language),
        }
    }
}

/// Percentages in tenths of a percent that sum to exactly 100.0 (largest remainder).
fn shares(counts: &BTreeMap<String, u64>) -> BTreeMap<String, Share> {
    let total: u64 = counts.values().sum();
    if total == 0 {
        return BTreeMap::new();
    }
    let mut tenths: Vec<(&String, u64, u64)> = counts
        .iter()
        .map(|(k, c)| (k, c * 1000 / total, c * 1000 % total))
        .collect();
    let assigned: u64 = tenths.iter().map(|t| t.1).sum();
    let mut order: Vec<usize> = (0..tenths.len()).collect();
    order.sort_by(|a, b| tenths[*b].2.cmp(&tenths[*a].2).then(a.cmp(b)));
    for &i in order.iter().take((1000 - assigned) as usize) {
        tenths[i].1 += 1;
    }
    tenths
        .into_iter()
        .map(|(k, t, _)| {
            (
                k.clone(),
                Share {
                    count: counts[k],
                    percent: t as f64 / 10.0,
                },
            )
        })
        .collect()
}

pub fn stats<'a>(
    samples: impl IntoIterator<Item = &'a InstructionSample>,
    registry: &Registry,
) -> Result<CorpusStats, UnknownDataset> {
    let mut acc = StatsAccumulator::default();
    for s in samples {
        acc.add(s, registry)?;
    }
    Ok(acc.finish())
}

impl CorpusStats {
    pub fn sections(&self) -> [(&'static str, &BTreeMap<String, Share>); 5] {
        [
            ("modality", &self.by_modality),
            ("task", &self.by_task),
            ("department", &self.by_department),
            ("format", &self.by_format),
            ("language", &self.by_language),
        ]
    }

    /// Plain-text table, one block per dimension.
    pub fn render_table(&self) -> String {
        let mut out = format!("total samples: {}\n", self.total);
        for (name, map) in self.sections() {
            let width = map.keys().map(|k| k.len()).max().unwrap_or(0).max(name.len());
            let _ = writeln!(out, "\n{name:<width$}  {:>9}  {:>7}", "count", "percent");
            let _ = writeln!(out, "{}", "-".repeat(width + 20));
            for (k, s) in map {
                let _ = writeln!(out, "{k:<width$}  {:>9}  {:>6.1}%", s.count, s.percent);
            }
        }
        out
    }

    /// Horizontal bar charts, one panel per dimension.
    pub fn render_svg(&self) -> String {
        const ROW: usize = 18;
        const LABEL_W: usize = 160;
        const BAR_W: f64 = 300.0;
        let rows: usize = self.sections().iter().map(|(_, m)| m.len() + 2).sum();
        let height = rows * ROW + 10;
        let mut out = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{height}\" \
             font-family=\"sans-serif\" font-size=\"12\">\n",
            LABEL_W + BAR_W as usize + 80
        );
        let mut y = ROW;
        for (name, map) in self.sections() {
            let _ = writeln!(out, "  <text x=\"4\" y=\"{y}\" font-weight=\"bold\">{name}</text>");
            y += ROW;
            for (k, s) in map {
                let w = BAR_W * s.percent / 100.0;
                let _ = writeln!(
                    out,
                    "  <text x=\"8\" y=\"{y}\">{}</text><rect x=\"{LABEL_W}\" y=\"{}\" width=\"{w:.1}\" \
                     height=\"{}\" fill=\"#4a78b5\"/><text x=\"{:.1}\" y=\"{y}\">{:.1}%</text>",
                    xml_escape(k),
                    y - 12,
                    ROW - 4,
                    LABEL_W as f64 + w + 4.0,
                    s.percent
                );
                y += ROW;
            }
            y += ROW;
        }
        out.push_str("</svg>\n");
        out
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
