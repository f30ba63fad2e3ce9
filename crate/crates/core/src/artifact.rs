//! JSONL artifact files with a provenance header line.
//!
//! Every JSONL artifact starts with one line `{"__header__": {...}}` carrying
//! the artifact kind, layout version, run seed and config hash. Readers skip
//! it and hand back the header separately.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const LAYOUT_VERSION: u32 = 1;
const HEADER_KEY: &str = "__header__";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStamp {
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactHeader {
    pub artifact: String,
    pub layout_version: u32,
    pub seed: u64,
    pub config_hash: String,
}

impl ArtifactHeader {
    pub fn new(artifact: &str, stamp: &RunStamp) -> Self {
        ArtifactHeader {
            artifact: artifact.to_string(),
            layout_version: LAYOUT_VERSION,
            seed: stamp.seed,
            config_hash: stamp.config_hash.clone(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ArtifactError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ArtifactError + '_ {
    move |source| ArtifactError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Line-oriented writer that emits the header first.
pub struct JsonlWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path, header: Option<&ArtifactHeader>) -> Result<Self, ArtifactError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let file = File::create(path).map_err(io_err(path))?;
        let mut w = JsonlWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        };
        if let Some(h) = header {
            let line = serde_json::json!({ HEADER_KEY: h });
            w.write_value(&line)?;
        }
        Ok(w)
    }

    /// Open for appending without writing a header.
    pub fn append(path: &Path) -> Result<Self, ArtifactError> {
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        Ok(JsonlWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn write<T: Serialize>(&mut self, item: &T) -> Result<(), ArtifactError> {
        self.write_value(item)
    }

    fn write_value<T: Serialize + ?Sized>(&mut self, item: &T) -> Result<(), ArtifactError> {
        serde_json::to_writer(&mut self.out, item).map_err(|e| ArtifactError::Io {
            path: self.path.clone(),
            source: e.into(),
        })?;
        self.out.write_all(b"\n").map_err(io_err(&self.path))
    }

    pub fn flush(&mut self) -> Result<(), ArtifactError> {
        self.out.flush().map_err(io_err(&self.path))
    }

    pub fn finish(mut self) -> Result<(), ArtifactError> {
        self.flush()
    }
}

/// Read every item of a JSONL artifact, returning the header when present.
pub fn read_jsonl<T: DeserializeOwned>(
    path: &Path,
) -> Result<(Option<ArtifactHeader>, Vec<T>), ArtifactError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut header = None;
    let mut items = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| ArtifactError::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            reason: e.to_string(),
        };
        if idx == 0 && line.starts_with(&format!("{{\"{HEADER_KEY}\"")) {
            let v: serde_json::Value = serde_json::from_str(&line).map_err(parse_err)?;
            header = Some(serde_json::from_value(v[HEADER_KEY].clone()).map_err(parse_err)?);
            continue;
        }
        items.push(serde_json::from_str(&line).map_err(parse_err)?);
    }
    Ok((header, items))
}

/// Write pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ArtifactError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| ArtifactError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, ArtifactError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| ArtifactError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        reason: e.to_string(),
    })
}
