//! Annotation-guided prompt construction.
//!
//! Templates are plain text with `{placeholder}` fields. A clause wrapped in
//! `[[ ... ]]` is optional: it is emitted only when every placeholder inside
//! it has a value, and dropped whole otherwise.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::canonicalize::CanonicalRecord;
use crate::digest::{content_id, sub_seed};
use crate::types::{CanonicalTask, InstructionFormat, Language, Modality};

/// Maximum number of options in a visual-perception question.
pub const MAX_OPTIONS: usize = 5;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("template `{template}`: {reason}")]
    InvalidTemplate { template: String, reason: String },
    #[error("missing required field `{0}`")]
    MissingRequiredField(Placeholder),
    #[error("recipe asks for region_caption but record {0} has no bbox")]
    RecipeFormatMismatch(String),
    #[error("distractor `{0}` equals the true label")]
    DistractorCollision(String),
    #[error("at least one distractor is required")]
    NoDistractors,
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Placeholder {
    Modality,
    Label,
    Department,
    Bbox,
    Language,
}

impl Placeholder {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "modality" => Placeholder::Modality,
            "label" => Placeholder::Label,
            "department" => Placeholder::Department,
            "bbox" => Placeholder::Bbox,
            "language" => Placeholder::Language,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Placeholder::Modality => "modality",
            Placeholder::Label => "label",
            Placeholder::Department => "department",
            Placeholder::Bbox => "bbox",
            Placeholder::Language => "language",
        }
    }
}

impl fmt::Display for Placeholder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Field(Placeholder),
    Optional(Vec<Piece>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub template_id: String,
    pub format: InstructionFormat,
    pub body: String,
    pub required_fields: BTreeSet<Placeholder>,
    pieces: Vec<Piece>,
}

impl PromptTemplate {
    pub fn parse(
        template_id: &str,
        format: InstructionFormat,
        body: &str,
    ) -> Result<Self, PromptError> {
        let invalid = |reason: String| PromptError::InvalidTemplate {
            template: template_id.to_string(),
            reason,
        };
        let body = body.trim_end().to_string();
        let pieces = parse_pieces(&body).map_err(invalid)?;

        let mut required = BTreeSet::new();
        let mut all = BTreeSet::new();
        for piece in &pieces {
            match piece {
                Piece::Field(p) => {
                    required.insert(*p);
                    all.insert(*p);
                }
                Piece::Optional(inner) => {
                    all.extend(inner.iter().filter_map(|p| match p {
                        Piece::Field(f) => Some(*f),
                        _ => None,
                    }));
                }
                Piece::Text(_) => {}
            }
        }
        for needed in [Placeholder::Modality, Placeholder::Label] {
            if !required.contains(&needed) {
                return Err(invalid(format!("`{{{needed}}}` must appear outside optional clauses")));
            }
        }
        if format == InstructionFormat::RegionCaption && !required.contains(&Placeholder::Bbox) {
            return Err(invalid("region_caption templates must require `{bbox}`".into()));
        }
        if format == InstructionFormat::ImageCaption && all.contains(&Placeholder::Bbox) {
            return Err(invalid("image_caption templates must not mention `{bbox}`".into()));
        }
        Ok(PromptTemplate {
            template_id: template_id.to_string(),
            format,
            body,
            required_fields: required,
            pieces,
        })
    }

    /// Substitute placeholders from a record.
    pub fn render(&self, rec: &CanonicalRecord, lang: Language) -> Result<String, PromptError> {
        let value = |p: Placeholder| -> Option<String> {
            match p {
                Placeholder::Modality => Some(rec.modality.as_str().to_string()),
                Placeholder::Label => Some(rec.label.clone()),
                Placeholder::Department => rec.department.clone(),
                Placeholder::Bbox => rec.bbox.map(|b| {
                    format!("[{}, {}, {}, {}]", b.x_min, b.y_min, b.x_max, b.y_max)
                }),
                Placeholder::Language => Some(lang.display_name().to_string()),
            }
        };
        let mut out = String::with_capacity(self.body.len() + 64);
        for piece in &self.pieces {
            match piece {
                Piece::Text(t) => out.push_str(t),
                Piece::Field(p) => out.push_str(&value(*p).ok_or(PromptError::MissingRequiredField(*p))?),
                Piece::Optional(inner) => {
                    let mut clause = String::new();
                    let complete = inner.iter().all(|p| match p {
                        Piece::Text(t) => {
                            clause.push_str(t);
                            true
                        }
                        Piece::Field(f) => value(*f).map(|v| clause.push_str(&v)).is_some(),
                        Piece::Optional(_) => unreachable!("nested optional clauses are rejected"),
                    });
                    if complete {
                        out.push_str(&clause);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn parse_pieces(body: &str) -> Result<Vec<Piece>, String> {
    let mut top: Vec<Piece> = Vec::new();
    let mut clause: Option<Vec<Piece>> = None;
    let mut text = String::new();
    let mut rest = body;

    fn flush(text: &mut String, target: &mut Vec<Piece>) {
        if !text.is_empty() {
            target.push(Piece::Text(std::mem::take(text)));
        }
    }

    while let Some(c) = rest.chars().next() {
        if rest.starts_with("[[") {
            if clause.is_some() {
                return Err("nested `[[` clause".into());
            }
            flush(&mut text, &mut top);
            clause = Some(Vec::new());
            rest = &rest[2..];
        } else if rest.starts_with("]]") {
            let Some(mut inner) = clause.take() else {
                return Err("`]]` without matching `[[`".into());
            };
            flush(&mut text, &mut inner);
            top.push(Piece::Optional(inner));
            rest = &rest[2..];
        } else if c == '{' {
            let end = rest.find('}').ok_or("unterminated `{`")?;
            let name = &rest[1..end];
            let field = Placeholder::parse(name).ok_or_else(|| format!("unknown placeholder `{{{name}}}`"))?;
            let target = clause.as_mut().unwrap_or(&mut top);
            flush(&mut text, target);
            target.push(Piece::Field(field));
            rest = &rest[end + 1..];
        } else if c == '}' {
            return Err("stray `}`".into());
        } else {
            text.push(c);
            rest = &rest[c.len_utf8()..];
        }
    }
    if clause.is_some() {
        return Err("unterminated `[[` clause".into());
    }
    flush(&mut text, &mut top);
    Ok(top)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mcq {
    pub question: String,
    pub options: Vec<String>,
    pub answer_index: usize,
}

impl Mcq {
    pub fn answer(&self) -> &str {
        &self.options[self.answer_index]
    }

    pub fn letter(index: usize) -> char {
        (b'A' + index as u8) as char
    }

    /// Question followed by lettered options, one per line.
    pub fn render(&self) -> String {
        let mut out = self.question.clone();
        for (i, opt) in self.options.iter().enumerate() {
            out.push_str(&format!("\n{}. {}", Mcq::letter(i), opt));
        }
        out
    }
}

fn shuffle_options(answer: &str, distractors: &[String], seed: u64) -> Result<(Vec<String>, usize), PromptError> {
    let mut picked: Vec<String> = Vec::new();
    for d in distractors {
        if d == answer {
            return Err(PromptError::DistractorCollision(d.clone()));
        }
        if !picked.contains(d) && picked.len() < MAX_OPTIONS - 1 {
            picked.push(d.clone());
        }
    }
    if picked.is_empty() {
        return Err(PromptError::NoDistractors);
    }
    picked.push(answer.to_string());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    picked.shuffle(&mut rng);
    let answer_index = picked.iter().position(|o| o == answer).expect("answer present");
    Ok((picked, answer_index))
}

/// Single-answer multiple-choice question whose correct option is the record's label.
pub fn build_vp_question(
    rec: &CanonicalRecord,
    distractors: &[String],
    seed: u64,
) -> Result<Mcq, PromptError> {
    let (options, answer_index) = shuffle_options(&rec.label, distractors, seed)?;
    let question = match rec.bbox {
        Some(b) => format!(
            "Which of the following best describes the region [{}, {}, {}, {}] in this {} image?",
            b.x_min, b.y_min, b.x_max, b.y_max, rec.modality
        ),
        None => format!(
            "Which of the following findings is shown in this {} image?",
            rec.modality
        ),
    };
    Ok(Mcq {
        question,
        options,
        answer_index,
    })
}

/// Fallback question about the imaging modality, used when no label distractors exist.
pub fn build_modality_question(modality: Modality, seed: u64) -> Mcq {
    let others: Vec<String> = Modality::ALL
        .iter()
        .filter(|m| **m != modality)
        .map(|m| m.as_str().to_string())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let distractors: Vec<String> = others
        .choose_multiple(&mut rng, MAX_OPTIONS - 1)
        .cloned()
        .collect();
    let (options, answer_index) = shuffle_options(modality.as_str(), &distractors, seed)
        .expect("modality distractors are distinct and nonempty");
    Mcq {
        question: "Which imaging modality was used to acquire this image?".into(),
        options,
        answer_index,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub request_id: String,
    pub record_id: String,
    pub format: InstructionFormat,
    pub template_id: String,
    /// Position among the requests of one (record, format) pair.
    pub seq: u32,
    pub prompt_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    pub target_language: Language,
    /// Annotation label the prompt is anchored on.
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mcq: Option<Mcq>,
}

pub fn request_id(record_id: &str, template_id: &str, lang: Language, seq: u32) -> String {
    content_id(&[record_id, template_id, lang.as_str(), &seq.to_string()])
}

/// Render one request from a record and a template.
pub fn build_request(
    rec: &CanonicalRecord,
    tmpl: &PromptTemplate,
    lang: Language,
) -> Result<GenerationRequest, PromptError> {
    build_request_seq(rec, tmpl, lang, 0)
}

pub fn build_request_seq(
    rec: &CanonicalRecord,
    tmpl: &PromptTemplate,
    lang: Language,
    seq: u32,
) -> Result<GenerationRequest, PromptError> {
    let prompt_text = tmpl.render(rec, lang)?;
    Ok(GenerationRequest {
        request_id: request_id(&rec.record_id, &tmpl.template_id, lang, seq),
        record_id: rec.record_id.clone(),
        format: tmpl.format,
        template_id: tmpl.template_id.clone(),
        seq,
        prompt_text,
        image_ref: tmpl.format.has_image().then(|| rec.image_ref.clone()),
        target_language: lang,
        label: rec.label.clone(),
        mcq: None,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecipeEntry {
    pub template_id: String,
    pub count: u32,
}

/// Enabled formats, each bound to a template and a per-record count.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FormatRecipe(pub BTreeMap<InstructionFormat, RecipeEntry>);

impl FormatRecipe {
    pub fn default_recipe() -> Self {
        serde_json::from_str(include_str!("../templates/default_recipe.json"))
            .expect("bundled recipe parses")
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = fs::read_to_string(path).map_err(|e| PromptError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| PromptError::Io(format!("{}: {e}", path.display())))
    }

    /// Formats (with counts) that apply to a record of the given task kind.
    pub fn formats_for(
        &self,
        task: CanonicalTask,
    ) -> Result<Vec<(InstructionFormat, u32)>, InstructionFormat> {
        let mut out = Vec::new();
        for (format, entry) in &self.0 {
            let applies = match (format, task) {
                (InstructionFormat::RegionCaption, CanonicalTask::Classification) => {
                    if !self.0.contains_key(&InstructionFormat::ImageCaption) {
                        return Err(*format);
                    }
                    false
                }
                (InstructionFormat::ImageCaption, CanonicalTask::Detection) => false,
                _ => true,
            };
            if applies && entry.count > 0 {
                out.push((*format, entry.count));
            }
        }
        Ok(out)
    }

    /// Number of requests a record of this task kind yields.
    pub fn request_count(&self, task: CanonicalTask) -> Result<usize, InstructionFormat> {
        Ok(self
            .formats_for(task)?
            .iter()
            .map(|(_, n)| *n as usize)
            .sum())
    }
}

/// Distinct labels per dataset, used to draw multiple-choice distractors.
#[derive(Debug, Clone, Default)]
pub struct LabelPool {
    by_dataset: BTreeMap<String, BTreeSet<String>>,
    all: BTreeSet<String>,
}

impl LabelPool {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a CanonicalRecord>) -> Self {
        let mut pool = LabelPool::default();
        for rec in records {
            pool.by_dataset
                .entry(rec.source_dataset.clone())
                .or_default()
                .insert(rec.label.clone());
            pool.all.insert(rec.label.clone());
        }
        pool
    }

    fn candidates(&self, rec: &CanonicalRecord) -> Vec<String> {
        let local: Vec<String> = self
            .by_dataset
            .get(&rec.source_dataset)
            .into_iter()
            .flatten()
            .filter(|l| **l != rec.label)
            .cloned()
            .collect();
        if !local.is_empty() {
            return local;
        }
        self.all.iter().filter(|l| **l != rec.label).cloned().collect()
    }
}

/// Expands canonical records into generation requests according to a recipe.
#[derive(Debug, Clone)]
pub struct RequestPlanner {
    recipe: FormatRecipe,
    templates: BTreeMap<InstructionFormat, PromptTemplate>,
    labels: LabelPool,
    seed: u64,
    language: Language,
}

impl RequestPlanner {
    /// Bind every recipe entry to its template body. `bodies` maps template id to text.
    pub fn new(
        recipe: FormatRecipe,
        bodies: &BTreeMap<String, String>,
        labels: LabelPool,
        seed: u64,
    ) -> Result<Self, PromptError> {
        let mut templates = BTreeMap::new();
        for (format, entry) in &recipe.0 {
            let body = bodies
                .get(&entry.template_id)
                .ok_or_else(|| PromptError::UnknownTemplate(entry.template_id.clone()))?;
            templates.insert(*format, PromptTemplate::parse(&entry.template_id, *format, body)?);
        }
        Ok(RequestPlanner {
            recipe,
            templates,
            labels,
            seed,
            language: Language::En,
        })
    }

    pub fn recipe(&self) -> &FormatRecipe {
        &self.recipe
    }

    pub fn template(&self, format: InstructionFormat) -> Option<&PromptTemplate> {
        self.templates.get(&format)
    }

    /// Requests for one record, ordered by format then sequence index.
    pub fn plan_requests(&self, rec: &CanonicalRecord) -> Result<Vec<GenerationRequest>, PromptError> {
        let formats = self
            .recipe
            .formats_for(rec.task_kind)
            .map_err(|_| PromptError::RecipeFormatMismatch(rec.record_id.clone()))?;
        let mut out = Vec::new();
        for (format, count) in formats {
            let tmpl = &self.templates[&format];
            for seq in 0..count {
                let mut req = build_request_seq(rec, tmpl, self.language, seq)?;
                if format == InstructionFormat::VisualPerception {
                    let mcq = self.question_for(rec, &req.request_id)?;
                    req.prompt_text = format!(
                        "{}\n\n{}\nCorrect answer: {}. {}",
                        req.prompt_text,
                        mcq.render(),
                        Mcq::letter(mcq.answer_index),
                        mcq.answer()
                    );
                    req.mcq = Some(mcq);
                }
                out.push(req);
            }
        }
        Ok(out)
    }

    fn question_for(&self, rec: &CanonicalRecord, request_id: &str) -> Result<Mcq, PromptError> {
        let seed = sub_seed(self.seed, &format!("vp:{request_id}"));
        let candidates = self.labels.candidates(rec);
        if candidates.is_empty() {
            return Ok(build_modality_question(rec.modality, seed));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let distractors: Vec<String> = candidates
            .choose_multiple(&mut rng, MAX_OPTIONS - 1)
            .cloned()
            .collect();
        build_vp_question(rec, &distractors, seed)
    }
}

/// Template bodies shipped with the crate, keyed by template id.
pub fn bundled_templates() -> BTreeMap<String, String> {
    [
        ("image_caption.v1", include_str!("../templates/image_caption.v1.txt")),
        ("region_caption.v1", include_str!("../templates/region_caption.v1.txt")),
        ("free_instruction.v1", include_str!("../templates/free_instruction.v1.txt")),
        ("dialogue.v1", include_str!("../templates/dialogue.v1.txt")),
        ("visual_perception.v1", include_str!("../templates/visual_perception.v1.txt")),
        ("text_only.v1", include_str!("../templates/text_only.v1.txt")),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

/// Load `*.txt` template bodies from a directory; the file stem is the template id.
pub fn load_templates(dir: &Path) -> Result<BTreeMap<String, String>, PromptError> {
    let io = |e: std::io::Error| PromptError::Io(format!("{}: {e}", dir.display()));
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        if path.extension().is_some_and(|e| e == "txt") {
            let id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            out.insert(id, fs::read_to_string(&path).map_err(io)?);
        }
    }
    Ok(out)
}
