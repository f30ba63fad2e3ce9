//! Enumerations shared across the pipeline.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown {kind} `{value}`")]
pub struct ParseEnumError {
    pub kind: &'static str,
    pub value: String,
}

macro_rules! string_enum {
    (
        $(#[$meta:meta])*
        $name:ident, $kind:literal { $($variant:ident => $text:literal),+ $(,)? }
    ) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = ParseEnumError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(ParseEnumError { kind: $kind, value: other.to_string() }),
                }
            }
        }
    };
}

string_enum! {
    /// Imaging acquisition type.
    Modality, "modality" {
        Ct => "CT",
        Mr => "MR",
        XRay => "X-ray",
        Pathology => "Pathology",
        Ultrasound => "Ultrasound",
        Fundus => "Fundus",
        Endoscopy => "Endoscopy",
        Dermoscopy => "Dermoscopy",
        Microscopy => "Microscopy",
        Pet => "PET",
        Oct => "OCT",
        Infrared => "Infrared",
        ClinicalPhoto => "ClinicalPhoto",
    }
}

string_enum! {
    /// Annotation layout of a source dataset.
    TaskKind, "task kind" {
        Classification => "classification",
        Detection => "detection",
        Segmentation => "segmentation",
    }
}

string_enum! {
    /// Task kind of a canonical record. Segmentation data is converted to detection.
    CanonicalTask, "canonical task" {
        Classification => "classification",
        Detection => "detection",
    }
}

string_enum! {
    Language, "language" {
        En => "en",
        Zh => "zh",
    }
}

string_enum! {
    /// The six instruction-following sample shapes, in emission order.
    InstructionFormat, "instruction format" {
        ImageCaption => "image_caption",
        RegionCaption => "region_caption",
        FreeInstruction => "free_instruction",
        Dialogue => "dialogue",
        VisualPerception => "visual_perception",
        TextOnly => "text_only",
    }
}

string_enum! {
    /// Training stage.
    Stage, "stage" {
        I => "I",
        II => "II",
        III => "III",
    }
}

string_enum! {
    /// Dataset-level quality verdict from human review.
    Verdict, "verdict" {
        High => "high",
        Low => "low",
    }
}

// The enum comes from a macro, so `#[default]` is not available.
#[allow(clippy::derivable_impls)]
impl Default for Language {
    fn default() -> Self {
        Language::En
    }
}

impl Language {
    pub fn display_name(self) -> &'static str {
        match self {
            Language::En => "English",
            Language::Zh => "Chinese",
        }
    }
}

impl InstructionFormat {
    pub fn has_image(self) -> bool {
        self != InstructionFormat::TextOnly
    }
}
