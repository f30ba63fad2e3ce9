//! Cleaning and standardization of raw records into the canonical tuple
//! `<image, modality, label, department, bbox?>` plus traceability fields.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::digest::content_id;
use crate::ingest::{DatasetDescriptor, RawRecord, INSTANCE_LABEL_PREFIX};
use crate::types::{CanonicalTask, Language, Modality, TaskKind};

/// Inclusive pixel box, origin top-left. Serialized as `[x_min, y_min, x_max, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Self {
        BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn from_array(a: [u32; 4]) -> Self {
        BBox::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [u32; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn width(&self) -> u64 {
        u64::from(self.x_max - self.x_min) + 1
    }

    pub fn height(&self) -> u64 {
        u64::from(self.y_max - self.y_min) + 1
    }

    pub fn area(&self) -> u64 {
        self.width() * self.height()
    }

    pub fn is_ordered(&self) -> bool {
        self.x_min <= self.x_max && self.y_min <= self.y_max
    }

    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.is_ordered() && self.x_max < width && self.y_max < height
    }
}

impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let b = BBox::from_array(<[u32; 4]>::deserialize(d)?);
        if !b.is_ordered() {
            return Err(D::Error::custom("bbox min exceeds max"));
        }
        Ok(b)
    }
}

/// An 8-bit instance-id mask in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMask {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl InstanceMask {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Option<Self> {
        (width > 0 && height > 0 && pixels.len() == width as usize * height as usize).then_some(
            InstanceMask {
                width,
                height,
                pixels,
            },
        )
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("mask has no foreground pixels")]
pub struct EmptyMask;

/// Tight bounding box of every nonzero instance id, sorted by id.
pub fn mask_to_bboxes(mask: &InstanceMask) -> Result<Vec<(u8, BBox)>, EmptyMask> {
    let mut boxes: [Option<BBox>; 256] = [None; 256];
    let width = mask.width as usize;
    for (row, line) in mask.pixels.chunks_exact(width).enumerate() {
        let y = row as u32;
        for (col, &id) in line.iter().enumerate() {
            if id == 0 {
                continue;
            }
            let x = col as u32;
            let slot = &mut boxes[id as usize];
            match slot {
                Some(b) => {
                    b.x_min = b.x_min.min(x);
                    b.x_max = b.x_max.max(x);
                    b.y_max = y;
                }
                None => *slot = Some(BBox::new(x, y, x, y)),
            }
        }
    }
    let out: Vec<(u8, BBox)> = boxes
        .iter()
        .enumerate()
        .filter_map(|(id, b)| b.map(|b| (id as u8, b)))
        .collect();
    if out.is_empty() {
        Err(EmptyMask)
    } else {
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CleanPolicy {
    pub min_box_area: u64,
    pub min_image_side: u32,
}

impl Default for CleanPolicy {
    fn default() -> Self {
        CleanPolicy {
            min_box_area: 100,
            min_image_side: 64,
        }
    }
}

/// Machine-readable rejection codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    MissingLabel,
    UnlabeledInstance,
    EmptyMask,
    BoxTooSmall,
    ImageTooSmall,
    BoxOutOfBounds,
    MaskSizeMismatch,
    UnreadableImage,
    UnreadableMask,
    InvalidShape,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub dataset_id: String,
    pub image_ref: String,
    /// The label or instance the rejection applies to, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonicalRecord {
    pub record_id: String,
    pub image_ref: String,
    pub modality: Modality,
    pub label: String,
    pub department: Option<String>,
    pub bbox: Option<BBox>,
    pub task_kind: CanonicalTask,
    pub source_dataset: String,
    #[serde(default)]
    pub language: Language,
}

/// Field names of a serialized canonical record, in emission order.
pub const CANONICAL_KEYS: &[&str] = &[
    "record_id",
    "image_ref",
    "modality",
    "label",
    "department",
    "bbox",
    "task_kind",
    "source_dataset",
    "language",
];

/// Deterministic 32-hex id over dataset, image, label and box.
pub fn record_id(source_dataset: &str, image_ref: &str, label: &str, bbox: Option<BBox>) -> String {
    let bbox_text = bbox.map_or_else(String::new, |b| {
        format!("{},{},{},{}", b.x_min, b.y_min, b.x_max, b.y_max)
    });
    content_id(&[source_dataset, image_ref, label, &bbox_text])
}

impl CanonicalRecord {
    /// Build a record and assign its id.
    pub fn new(
        desc: &DatasetDescriptor,
        image_ref: &str,
        label: &str,
        bbox: Option<BBox>,
    ) -> CanonicalRecord {
        CanonicalRecord {
            record_id: record_id(&desc.dataset_id, image_ref, label, bbox),
            image_ref: image_ref.to_string(),
            modality: desc.modality,
            label: label.to_string(),
            department: desc.department.clone(),
            bbox,
            task_kind: if bbox.is_some() {
                CanonicalTask::Detection
            } else {
                CanonicalTask::Classification
            },
            source_dataset: desc.dataset_id.clone(),
            language: Language::En,
        }
    }

    pub fn check_shape(&self) -> Result<(), RejectReason> {
        let ok = match self.task_kind {
            CanonicalTask::Detection => self.bbox.is_some_and(|b| b.is_ordered()),
            CanonicalTask::Classification => self.bbox.is_none(),
        };
        if ok && !self.label.trim().is_empty() {
            Ok(())
        } else {
            Err(RejectReason::InvalidShape)
        }
    }

    /// Re-canonicalize an exported record: validate its shape and recompute the id.
    pub fn recanonicalize(&self) -> Result<CanonicalRecord, RejectReason> {
        self.check_shape()?;
        let mut out = self.clone();
        out.label = out.label.trim().to_string();
        out.record_id = record_id(&out.source_dataset, &out.image_ref, &out.label, out.bbox);
        Ok(out)
    }
}

/// Source of image geometry and masks for cleaning.
pub trait ImageSource {
    fn dimensions(&self, image_ref: &str) -> Result<(u32, u32), String>;
    fn mask(&self, mask_ref: &str) -> Result<InstanceMask, String>;
}

/// Reads images and masks from disk relative to a base directory.
#[derive(Debug, Clone)]
pub struct FsImageSource {
    base: PathBuf,
}

impl FsImageSource {
    pub fn new(base: impl Into<PathBuf>) -> Self {
        FsImageSource { base: base.into() }
    }

    fn path(&self, reference: &str) -> PathBuf {
        self.base.join(Path::new(reference))
    }
}

impl ImageSource for FsImageSource {
    fn dimensions(&self, image_ref: &str) -> Result<(u32, u32), String> {
        image::image_dimensions(self.path(image_ref)).map_err(|e| e.to_string())
    }

    fn mask(&self, mask_ref: &str) -> Result<InstanceMask, String> {
        let img = image::open(self.path(mask_ref)).map_err(|e| e.to_string())?;
        match img {
            image::DynamicImage::ImageLuma8(gray) => {
                let (w, h) = gray.dimensions();
                InstanceMask::new(w, h, gray.into_raw()).ok_or_else(|| "empty mask".to_string())
            }
            other => Err(format!(
                "mask must be 8-bit grayscale, found {:?}",
                other.color()
            )),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CleanOutcome {
    pub records: Vec<CanonicalRecord>,
    pub rejected: Vec<Rejection>,
}

impl CleanOutcome {
    pub fn extend(&mut self, other: CleanOutcome) {
        self.records.extend(other.records);
        self.rejected.extend(other.rejected);
    }
}

/// Expand one raw record into canonical records, rejecting units that fail
/// the policy. `records.len() + rejected.len()` equals the number of
/// annotation units (labels, boxes, or mask instances; at least one).
pub fn clean(
    raw: &RawRecord,
    desc: &DatasetDescriptor,
    policy: &CleanPolicy,
    images: &dyn ImageSource,
) -> CleanOutcome {
    let mut out = CleanOutcome::default();
    let reject = |out: &mut CleanOutcome, unit: Option<String>, reason| {
        out.rejected.push(Rejection {
            dataset_id: desc.dataset_id.clone(),
            image_ref: raw.image_ref.clone(),
            unit,
            reason,
        });
    };

    if raw.validate(desc.task_kind).is_err() {
        let units = match desc.task_kind {
            TaskKind::Classification => raw.labels.len(),
            TaskKind::Detection => raw.boxes.as_ref().map_or(0, Vec::len),
            TaskKind::Segmentation => 1,
        };
        for _ in 0..units.max(1) {
            reject(&mut out, None, RejectReason::InvalidShape);
        }
        return out;
    }

    match desc.task_kind {
        TaskKind::Classification => {
            for label in &raw.labels {
                let label = label.trim();
                if label.is_empty() {
                    reject(&mut out, None, RejectReason::MissingLabel);
                } else {
                    out.records
                        .push(CanonicalRecord::new(desc, &raw.image_ref, label, None));
                }
            }
        }
        TaskKind::Detection => {
            let boxes = raw.boxes.as_deref().unwrap_or_default();
            let dims = images.dimensions(&raw.image_ref);
            for (i, b) in boxes.iter().enumerate() {
                let bbox = BBox::from_array(*b);
                let label = raw
                    .labels
                    .get(i)
                    .or(raw.labels.first())
                    .map(|l| l.trim())
                    .unwrap_or_default();
                let unit = Some(label.to_string());
                match dims {
                    _ if label.is_empty() => reject(&mut out, unit, RejectReason::MissingLabel),
                    Err(_) => reject(&mut out, unit, RejectReason::UnreadableImage),
                    Ok((w, h)) if !bbox.fits(w, h) => {
                        reject(&mut out, unit, RejectReason::BoxOutOfBounds)
                    }
                    Ok(_) => out.records.push(CanonicalRecord::new(
                        desc,
                        &raw.image_ref,
                        label,
                        Some(bbox),
                    )),
                }
            }
        }
        TaskKind::Segmentation => {
            let mask_ref = raw.mask_ref.as_deref().unwrap_or_default();
            let mask = match images.mask(mask_ref) {
                Ok(m) => m,
                Err(_) => {
                    reject(&mut out, None, RejectReason::UnreadableMask);
                    return out;
                }
            };
            let instances = match mask_to_bboxes(&mask) {
                Ok(v) => v,
                Err(EmptyMask) => {
                    reject(&mut out, None, RejectReason::EmptyMask);
                    return out;
                }
            };
            let image_check = match images.dimensions(&raw.image_ref) {
                Err(_) => Err(RejectReason::UnreadableImage),
                Ok((w, h)) if (w, h) != (mask.width(), mask.height()) => {
                    Err(RejectReason::MaskSizeMismatch)
                }
                Ok((w, h)) if w.min(h) < policy.min_image_side => Err(RejectReason::ImageTooSmall),
                Ok(_) => Ok(()),
            };
            let names = instance_labels(raw);
            for (id, bbox) in instances {
                let unit = Some(format!("instance {id}"));
                if let Err(reason) = image_check {
                    reject(&mut out, unit, reason);
                    continue;
                }
                let Some(label) = names.get(&id).map(|l| l.trim()).filter(|l| !l.is_empty())
                else {
                    reject(&mut out, unit, RejectReason::UnlabeledInstance);
                    continue;
                };
                if bbox.area() < policy.min_box_area {
                    reject(&mut out, unit, RejectReason::BoxTooSmall);
                    continue;
                }
                out.records
                    .push(CanonicalRecord::new(desc, &raw.image_ref, label, Some(bbox)));
            }
        }
    }
    out
}

fn instance_labels(raw: &RawRecord) -> BTreeMap<u8, &str> {
    raw.extra
        .iter()
        .filter_map(|(k, v)| {
            let id = k.strip_prefix(INSTANCE_LABEL_PREFIX)?.parse().ok()?;
            Some((id, v.as_str()))
        })
        .collect()
}
