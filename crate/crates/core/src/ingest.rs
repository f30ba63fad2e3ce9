//! Dataset registration and raw annotation loading.
//!
//! A source dataset is registered with one JSON descriptor. Annotations come
//! in one of three layouts, chosen by the descriptor's `task_kind`:
//!
//! * classification: CSV `image,labels` with `;`-separated labels
//! * detection: CSV `image,label,x_min,y_min,x_max,y_max`, one box per row
//! * segmentation: a directory of 8-bit grayscale PNG masks paired with
//!   images by filename stem, plus an optional `labels.csv` (`id,label`)
//!   naming each instance id

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use tracing::warn;

use crate::types::{Modality, TaskKind};

/// Key prefix used in [`RawRecord::extra`] to carry segmentation instance names.
pub const INSTANCE_LABEL_PREFIX: &str = "instance_label:";

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "tif", "tiff", "webp"];

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("missing field `{0}`")]
    MissingField(String),
    #[error("unknown modality `{0}`")]
    UnknownModality(String),
    #[error("unknown task kind `{0}`")]
    UnknownTaskKind(String),
    #[error("invalid field `{field}`: {reason}")]
    InvalidField { field: String, reason: String },
    #[error("{path}: malformed descriptor: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("{path}:{line}: {reason}")]
    AnnotationParse {
        path: PathBuf,
        line: u64,
        reason: String,
    },
    #[error("duplicate dataset_id `{0}`")]
    DuplicateDatasetId(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl IngestError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        IngestError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub dataset_id: String,
    pub name: String,
    pub task_kind: TaskKind,
    pub modality: Modality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub department: Option<String>,
    pub source: String,
    pub root_path: PathBuf,
    pub annotation_file: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub license_note: Option<String>,
}

const DESCRIPTOR_KEYS: &[&str] = &[
    "dataset_id",
    "name",
    "task_kind",
    "modality",
    "department",
    "source",
    "root_path",
    "annotation_file",
    "license_note",
];

/// Parse a descriptor document from a file.
pub fn parse_descriptor(file: &Path) -> Result<DatasetDescriptor, IngestError> {
    let text = fs::read_to_string(file).map_err(|e| IngestError::io(file, e))?;
    parse_descriptor_str(&text).map_err(|e| match e {
        IngestError::Malformed { reason, .. } => IngestError::Malformed {
            path: file.to_path_buf(),
            reason,
        },
        other => other,
    })
}

/// Parse a descriptor document from JSON text.
pub fn parse_descriptor_str(text: &str) -> Result<DatasetDescriptor, IngestError> {
    let value: Value = serde_json::from_str(text).map_err(|e| IngestError::Malformed {
        path: PathBuf::new(),
        reason: e.to_string(),
    })?;
    let Value::Object(obj) = value else {
        return Err(IngestError::Malformed {
            path: PathBuf::new(),
            reason: "descriptor must be a JSON object".into(),
        });
    };
    if let Some(key) = obj.keys().find(|k| !DESCRIPTOR_KEYS.contains(&k.as_str())) {
        return Err(IngestError::InvalidField {
            field: key.clone(),
            reason: "unrecognized key".into(),
        });
    }

    let dataset_id = required_str(&obj, "dataset_id")?;
    if dataset_id.trim().is_empty() {
        return Err(IngestError::InvalidField {
            field: "dataset_id".into(),
            reason: "must be non-empty".into(),
        });
    }
    let task_kind = required_str(&obj, "task_kind")?;
    let task_kind = task_kind
        .parse::<TaskKind>()
        .map_err(|e| IngestError::UnknownTaskKind(e.value))?;
    let modality = required_str(&obj, "modality")?;
    let modality = modality
        .parse::<Modality>()
        .map_err(|e| IngestError::UnknownModality(e.value))?;

    Ok(DatasetDescriptor {
        dataset_id,
        name: required_str(&obj, "name")?,
        task_kind,
        modality,
        department: optional_str(&obj, "department")?,
        source: required_str(&obj, "source")?,
        root_path: required_str(&obj, "root_path")?.into(),
        annotation_file: required_str(&obj, "annotation_file")?.into(),
        license_note: optional_str(&obj, "license_note")?,
    })
}

fn required_str(obj: &Map<String, Value>, key: &str) -> Result<String, IngestError> {
    match obj.get(key) {
        None | Some(Value::Null) => Err(IngestError::MissingField(key.to_string())),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(IngestError::InvalidField {
            field: key.to_string(),
            reason: "expected a string".into(),
        }),
    }
}

fn optional_str(obj: &Map<String, Value>, key: &str) -> Result<Option<String>, IngestError> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(IngestError::InvalidField {
            field: key.to_string(),
            reason: "expected a string".into(),
        }),
    }
}

/// All registered descriptors of a run, keyed by `dataset_id`.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    dir: PathBuf,
    datasets: BTreeMap<String, DatasetDescriptor>,
}

impl Registry {
    /// Load every `*.json` file directly under `dir`, in filename order.
    pub fn load(dir: &Path) -> Result<Self, IngestError> {
        let mut files = Vec::new();
        for entry in fs::read_dir(dir).map_err(|e| IngestError::io(dir, e))? {
            let path = entry.map_err(|e| IngestError::io(dir, e))?.path();
            if path.is_file() && path.extension().is_some_and(|e| e == "json") {
                files.push(path);
            }
        }
        files.sort();
        let mut registry = Registry {
            dir: dir.to_path_buf(),
            datasets: BTreeMap::new(),
        };
        for file in files {
            registry.insert(parse_descriptor(&file)?)?;
        }
        Ok(registry)
    }

    pub fn from_descriptors(
        dir: impl Into<PathBuf>,
        descriptors: impl IntoIterator<Item = DatasetDescriptor>,
    ) -> Result<Self, IngestError> {
        let mut registry = Registry {
            dir: dir.into(),
            datasets: BTreeMap::new(),
        };
        for desc in descriptors {
            registry.insert(desc)?;
        }
        Ok(registry)
    }

    fn insert(&mut self, desc: DatasetDescriptor) -> Result<(), IngestError> {
        if self.datasets.contains_key(&desc.dataset_id) {
            return Err(IngestError::DuplicateDatasetId(desc.dataset_id));
        }
        self.datasets.insert(desc.dataset_id.clone(), desc);
        Ok(())
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn get(&self, dataset_id: &str) -> Option<&DatasetDescriptor> {
        self.datasets.get(dataset_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &DatasetDescriptor> {
        self.datasets.values()
    }

    pub fn len(&self) -> usize {
        self.datasets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.datasets.is_empty()
    }

    /// Resolve a registry-relative reference to a filesystem path.
    pub fn resolve(&self, reference: &str) -> PathBuf {
        self.dir.join(reference)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRecord {
    pub dataset_id: String,
    /// Image path relative to the registry directory (or absolute).
    pub image_ref: String,
    pub labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<[u32; 4]>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ShapeError {
    #[error("classification record needs at least one label")]
    MissingLabels,
    #[error("classification record must not carry a mask or boxes")]
    UnexpectedGeometry,
    #[error("segmentation record needs a mask_ref")]
    MissingMask,
    #[error("detection record needs at least one box")]
    MissingBoxes,
    #[error("box {0:?} has min > max")]
    InvertedBox([u32; 4]),
}

impl RawRecord {
    /// Check the shape invariant for the record's task kind.
    pub fn validate(&self, task_kind: TaskKind) -> Result<(), ShapeError> {
        match task_kind {
            TaskKind::Classification => {
                if self.labels.is_empty() {
                    return Err(ShapeError::MissingLabels);
                }
                if self.mask_ref.is_some() || self.boxes.is_some() {
                    return Err(ShapeError::UnexpectedGeometry);
                }
            }
            TaskKind::Segmentation => {
                if self.mask_ref.is_none() {
                    return Err(ShapeError::MissingMask);
                }
            }
            TaskKind::Detection => {
                if self.labels.is_empty() {
                    return Err(ShapeError::MissingLabels);
                }
                let boxes = self.boxes.as_deref().unwrap_or_default();
                if boxes.is_empty() {
                    return Err(ShapeError::MissingBoxes);
                }
                if let Some(b) = boxes.iter().find(|b| b[0] > b[2] || b[1] > b[3]) {
                    return Err(ShapeError::InvertedBox(*b));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    DanglingImageRef,
    InvalidBox,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedRow {
    pub dataset_id: String,
    /// 1-based line in the annotation file, or the mask's position for mask directories.
    pub line: u64,
    pub reference: String,
    pub reason: SkipReason,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadOutcome {
    pub records: Vec<RawRecord>,
    pub skipped: Vec<SkippedRow>,
    /// Number of annotation rows (CSV data rows or mask files) examined.
    pub rows: usize,
}

/// Load the raw annotation rows of one dataset.
///
/// `base_dir` is the directory relative paths in the descriptor are resolved
/// against (the registry directory).
pub fn load_records(desc: &DatasetDescriptor, base_dir: &Path) -> Result<LoadOutcome, IngestError> {
    let root_ref = normalize_ref(&desc.root_path);
    let annotation = base_dir.join(&desc.root_path).join(&desc.annotation_file);
    match desc.task_kind {
        TaskKind::Classification => load_classification(desc, base_dir, &root_ref, &annotation),
        TaskKind::Detection => load_detection(desc, base_dir, &root_ref, &annotation),
        TaskKind::Segmentation => load_segmentation(desc, base_dir, &root_ref, &annotation),
    }
}

fn normalize_ref(path: &Path) -> String {
    let mut parts: Vec<String> = Vec::new();
    let mut absolute = false;
    for comp in path.components() {
        match comp {
            Component::RootDir => absolute = true,
            Component::CurDir => {}
            Component::ParentDir => {
                if parts.last().is_some_and(|p| p != "..") {
                    parts.pop();
                } else {
                    parts.push("..".into());
                }
            }
            Component::Normal(s) => parts.push(s.to_string_lossy().into_owned()),
            Component::Prefix(p) => parts.push(p.as_os_str().to_string_lossy().into_owned()),
        }
    }
    let joined = parts.join("/");
    if absolute {
        format!("/{joined}")
    } else {
        joined
    }
}

fn join_ref(root_ref: &str, rel: &str) -> String {
    normalize_ref(&Path::new(root_ref).join(rel))
}

fn open_csv(path: &Path) -> Result<csv::Reader<fs::File>, IngestError> {
    let file = fs::File::open(path).map_err(|e| IngestError::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn column_index(
    headers: &csv::StringRecord,
    name: &str,
    path: &Path,
) -> Result<usize, IngestError> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| IngestError::AnnotationParse {
            path: path.to_path_buf(),
            line: 1,
            reason: format!("missing column `{name}`"),
        })
}

fn extra_columns(
    headers: &csv::StringRecord,
    row: &csv::StringRecord,
    known: &[usize],
) -> BTreeMap<String, String> {
    headers
        .iter()
        .enumerate()
        .filter(|(i, _)| !known.contains(i))
        .filter_map(|(i, h)| row.get(i).map(|v| (h.to_string(), v.to_string())))
        .collect()
}

fn load_classification(
    desc: &DatasetDescriptor,
    base_dir: &Path,
    root_ref: &str,
    annotation: &Path,
) -> Result<LoadOutcome, IngestError> {
    let mut reader = open_csv(annotation)?;
    let headers = reader
        .headers()
        .map_err(|e| csv_error(annotation, e))?
        .clone();
    let image_col = column_index(&headers, "image", annotation)?;
    let labels_col = column_index(&headers, "labels", annotation)?;

    let mut out = LoadOutcome::default();
    for row in reader.records() {
        let row = row.map_err(|e| csv_error(annotation, e))?;
        let line = row.position().map_or(0, |p| p.line());
        out.rows += 1;
        let image = field(&row, image_col, "image", annotation, line)?;
        let image_ref = join_ref(root_ref, image);
        if !base_dir.join(&image_ref).is_file() {
            out.skip(desc, line, image_ref, SkipReason::DanglingImageRef);
            continue;
        }
        let labels = field(&row, labels_col, "labels", annotation, line)?
            .split(';')
            .map(|l| l.trim().to_string())
            .collect();
        out.records.push(RawRecord {
            dataset_id: desc.dataset_id.clone(),
            image_ref,
            labels,
            mask_ref: None,
            boxes: None,
            extra: extra_columns(&headers, &row, &[image_col, labels_col]),
        });
    }
    Ok(out)
}

fn load_detection(
    desc: &DatasetDescriptor,
    base_dir: &Path,
    root_ref: &str,
    annotation: &Path,
) -> Result<LoadOutcome, IngestError> {
    let mut reader = open_csv(annotation)?;
    let headers = reader
        .headers()
        .map_err(|e| csv_error(annotation, e))?
        .clone();
    let names = ["image", "label", "x_min", "y_min", "x_max", "y_max"];
    let cols = names
        .iter()
        .map(|n| column_index(&headers, n, annotation))
        .collect::<Result<Vec<_>, _>>()?;

    let mut out = LoadOutcome::default();
    for row in reader.records() {
        let row = row.map_err(|e| csv_error(annotation, e))?;
        let line = row.position().map_or(0, |p| p.line());
        out.rows += 1;
        let image = field(&row, cols[0], "image", annotation, line)?;
        let label = field(&row, cols[1], "label", annotation, line)?.to_string();
        let mut coords = [0u32; 4];
        for (slot, (col, name)) in coords.iter_mut().zip(cols[2..].iter().zip(&names[2..])) {
            let raw = field(&row, *col, name, annotation, line)?;
            *slot = raw.parse().map_err(|_| IngestError::AnnotationParse {
                path: annotation.to_path_buf(),
                line,
                reason: format!("`{name}` is not a non-negative integer: `{raw}`"),
            })?;
        }
        let image_ref = join_ref(root_ref, image);
        if coords[0] > coords[2] || coords[1] > coords[3] {
            out.skip(desc, line, image_ref, SkipReason::InvalidBox);
            continue;
        }
        if !base_dir.join(&image_ref).is_file() {
            out.skip(desc, line, image_ref, SkipReason::DanglingImageRef);
            continue;
        }
        out.records.push(RawRecord {
            dataset_id: desc.dataset_id.clone(),
            image_ref,
            labels: vec![label],
            mask_ref: None,
            boxes: Some(vec![coords]),
            extra: extra_columns(&headers, &row, &cols),
        });
    }
    Ok(out)
}

fn load_segmentation(
    desc: &DatasetDescriptor,
    base_dir: &Path,
    root_ref: &str,
    mask_dir: &Path,
) -> Result<LoadOutcome, IngestError> {
    let mask_dir_ref = join_ref(root_ref, &normalize_ref(&desc.annotation_file));
    let instance_labels = read_instance_labels(&mask_dir.join("labels.csv"))?;

    let mut masks = Vec::new();
    for entry in fs::read_dir(mask_dir).map_err(|e| IngestError::io(mask_dir, e))? {
        let path = entry.map_err(|e| IngestError::io(mask_dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            masks.push(path);
        }
    }
    masks.sort();

    let images = images_by_stem(&base_dir.join(&desc.root_path), mask_dir)?;

    let mut out = LoadOutcome::default();
    for (idx, mask) in masks.iter().enumerate() {
        out.rows += 1;
        let line = idx as u64 + 1;
        let file_name = mask.file_name().unwrap_or_default().to_string_lossy();
        let mask_ref = join_ref(&mask_dir_ref, &file_name);
        let stem = mask.file_stem().unwrap_or_default().to_string_lossy();
        let Some(image_name) = images.get(stem.as_ref()) else {
            out.skip(desc, line, mask_ref, SkipReason::DanglingImageRef);
            continue;
        };
        let extra = instance_labels
            .iter()
            .map(|(id, label)| (format!("{INSTANCE_LABEL_PREFIX}{id}"), label.clone()))
            .collect();
        out.records.push(RawRecord {
            dataset_id: desc.dataset_id.clone(),
            image_ref: join_ref(root_ref, image_name),
            labels: Vec::new(),
            mask_ref: Some(mask_ref),
            boxes: None,
            extra,
        });
    }
    Ok(out)
}

/// Map file stem -> file name for image files directly under `dir`.
fn images_by_stem(dir: &Path, exclude: &Path) -> Result<BTreeMap<String, String>, IngestError> {
    let mut out = BTreeMap::new();
    let exclude = exclude.canonicalize().ok();
    for entry in fs::read_dir(dir).map_err(|e| IngestError::io(dir, e))? {
        let path = entry.map_err(|e| IngestError::io(dir, e))?.path();
        if !path.is_file() {
            continue;
        }
        if exclude.is_some() && path.parent().and_then(|p| p.canonicalize().ok()) == exclude {
            continue;
        }
        let is_image = path
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str()));
        if !is_image {
            continue;
        }
        let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        // keep the lexicographically first file when several share a stem
        out.entry(stem)
            .and_modify(|existing: &mut String| {
                if name < *existing {
                    *existing = name.clone();
                }
            })
            .or_insert(name);
    }
    Ok(out)
}

fn read_instance_labels(path: &Path) -> Result<BTreeMap<u8, String>, IngestError> {
    if !path.is_file() {
        return Ok(BTreeMap::new());
    }
    let mut reader = open_csv(path)?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let id_col = column_index(&headers, "id", path)?;
    let label_col = column_index(&headers, "label", path)?;
    let mut out = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let line = row.position().map_or(0, |p| p.line());
        let raw = field(&row, id_col, "id", path, line)?;
        let id: u8 = raw
            .parse()
            .ok()
            .filter(|v| *v != 0)
            .ok_or_else(|| IngestError::AnnotationParse {
                path: path.to_path_buf(),
                line,
                reason: format!("instance id must be in 1..=255, got `{raw}`"),
            })?;
        if !seen.insert(id) {
            return Err(IngestError::AnnotationParse {
                path: path.to_path_buf(),
                line,
                reason: format!("duplicate instance id {id}"),
            });
        }
        out.insert(id, field(&row, label_col, "label", path, line)?.to_string());
    }
    Ok(out)
}

fn field<'r>(
    row: &'r csv::StringRecord,
    col: usize,
    name: &str,
    path: &Path,
    line: u64,
) -> Result<&'r str, IngestError> {
    row.get(col).ok_or_else(|| IngestError::AnnotationParse {
        path: path.to_path_buf(),
        line,
        reason: format!("row has no `{name}` value"),
    })
}

fn csv_error(path: &Path, err: csv::Error) -> IngestError {
    let line = err.position().map_or(0, |p| p.line());
    IngestError::AnnotationParse {
        path: path.to_path_buf(),
        line,
        reason: err.to_string(),
    }
}

impl LoadOutcome {
    fn skip(&mut self, desc: &DatasetDescriptor, line: u64, reference: String, reason: SkipReason) {
        warn!(dataset = %desc.dataset_id, line, %reference, ?reason, "skipping annotation row");
        self.skipped.push(SkippedRow {
            dataset_id: desc.dataset_id.clone(),
            line,
            reference,
            reason,
        });
    }
}
