//! Three-stage training configuration and plan emission.
//!
//! This module plans; it never trains. Precision and hardware strings are
//! carried verbatim for the downstream trainer.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::types::Stage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Freeze {
    pub llm: bool,
    pub vision_encoder: bool,
    pub projector: bool,
}

impl Freeze {
    /// Names of the components that receive gradients.
    pub fn trainable(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if !self.projector {
            out.push("projector");
        }
        if !self.vision_encoder {
            out.push("vision_encoder");
        }
        if !self.llm {
            out.push("llm");
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    CosineDecay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Packing {
    Soft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub name: String,
    pub beta1: f64,
    pub beta2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchShape {
    pub gpus: u32,
    pub micro_batch: u32,
    pub grad_accum: u32,
}

impl fmt::Display for BatchShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.gpus, self.micro_batch, self.grad_accum)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStageConfig {
    pub stage: Stage,
    pub freeze: Freeze,
    pub base_lr: f64,
    pub lr_schedule: LrSchedule,
    pub lr_min: f64,
    pub warmup_steps: u64,
    pub optimizer: Optimizer,
    pub input_size: u32,
    pub batch: BatchShape,
    pub packing: Packing,
    pub drop_rate: f64,
    pub precision: String,
    pub hardware: String,
}

/// The published settings for one stage.
pub fn stage_config(stage: Stage) -> TrainStageConfig {
    let (freeze, base_lr, batch) = match stage {
        Stage::I => (
            Freeze { llm: true, vision_encoder: true, projector: false },
            1e-3,
            BatchShape { gpus: 32, micro_batch: 8, grad_accum: 2 },
        ),
        Stage::II => (
            Freeze { llm: true, vision_encoder: false, projector: false },
            1e-4,
            BatchShape { gpus: 32, micro_batch: 4, grad_accum: 4 },
        ),
        Stage::III => (
            Freeze { llm: false, vision_encoder: false, projector: false },
            1e-5,
            BatchShape { gpus: 32, micro_batch: 4, grad_accum: 4 },
        ),
    };
    TrainStageConfig {
        stage,
        freeze,
        base_lr,
        lr_schedule: LrSchedule::CosineDecay,
        lr_min: 0.0,
        warmup_steps: 0,
        optimizer: Optimizer {
            name: "adamw".into(),
            beta1: 0.9,
            beta2: 0.999,
        },
        input_size: 336,
        batch,
        packing: Packing::Soft,
        drop_rate: 0.0,
        precision: "DeepSpeed bf16".into(),
        hardware: "32xA100 (80G)".into(),
    }
}

pub fn effective_batch(cfg: &TrainStageConfig) -> u64 {
    let b = cfg.batch;
    u64::from(b.gpus) * u64::from(b.micro_batch) * u64::from(b.grad_accum)
}

/// Cosine decay from `base_lr` to `lr_min` over `total_steps`, after optional linear warmup.
///
/// `step` is clamped to `[0, total_steps]`. Endpoints are returned exactly.
pub fn lr_at(cfg: &TrainStageConfig, step: u64, total_steps: u64) -> f64 {
    let total = total_steps.max(1);
    let step = step.min(total);
    let warm = cfg.warmup_steps.min(total - 1);
    if step < warm {
        return cfg.base_lr * step as f64 / warm as f64;
    }
    let (s, t) = (step - warm, total - warm);
    if s == 0 {
        return cfg.base_lr;
    }
    if s == t {
        return cfg.lr_min;
    }
    cfg.lr_min + 0.5 * (cfg.base_lr - cfg.lr_min) * (1.0 + (PI * s as f64 / t as f64).cos())
}

// ---------------------------------------------------------------------------
// Overrides

/// Explicit departures from the published settings for one stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageOverride {
    pub base_lr: Option<f64>,
    pub lr_min: Option<f64>,
    pub warmup_steps: Option<u64>,
    pub input_size: Option<u32>,
    pub batch: Option<BatchShape>,
    pub drop_rate: Option<f64>,
    pub precision: Option<String>,
    pub hardware: Option<String>,
}

/// Override file contents, keyed by stage name.
pub type OverrideSet = BTreeMap<Stage, StageOverride>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deviation {
    pub field: String,
    pub published: serde_json::Value,
    pub used: serde_json::Value,
}

/// Apply an override, returning the config and one deviation per changed field.
pub fn apply_override(mut cfg: TrainStageConfig, ov: &StageOverride) -> (TrainStageConfig, Vec<Deviation>) {
    let mut devs = Vec::new();
    macro_rules! take {
        ($field:ident) => {
            if let Some(v) = &ov.$field {
                if *v != cfg.$field {
                    devs.push(Deviation {
                        field: stringify!($field).into(),
                        published: serde_json::json!(cfg.$field),
                        used: serde_json::json!(v),
                    });
                    cfg.$field = v.clone();
                }
            }
        };
    }
    take!(base_lr);
    take!(lr_min);
    take!(warmup_steps);
    take!(input_size);
    take!(batch);
    take!(drop_rate);
    take!(precision);
    take!(hardware);
    (cfg, devs)
}

// ---------------------------------------------------------------------------
// Plan

pub const PLAN_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageData {
    /// Paths are relative to the plan file.
    pub manifest: String,
    pub manifest_sha256: String,
    pub samples: u64,
    pub packed: String,
    pub packed_sha256: String,
    pub sequences: u64,
    pub pack_budget: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStage {
    pub stage: Stage,
    pub config: TrainStageConfig,
    pub effective_batch: u64,
    pub trainable: Vec<String>,
    pub data: StageData,
    pub deviations: Vec<Deviation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub plan_version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub stages: Vec<PlanStage>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlanError {
    #[error("no stages to plan")]
    NoStages,
    #[error("stages must be strictly ordered I, II, III; got {0:?}")]
    StageOrder(Vec<Stage>),
    #[error("stage {0} has an empty data manifest")]
    EmptyManifest(Stage),
    #[error("stage {0}: effective batch must be >= 1")]
    ZeroBatch(Stage),
}

/// One stage's inputs to [`emit_plan`].
#[derive(Debug, Clone, PartialEq)]
pub struct StageBinding {
    pub config: TrainStageConfig,
    pub deviations: Vec<Deviation>,
    pub data: StageData,
}

pub fn emit_plan(seed: u64, config_hash: &str, stages: Vec<StageBinding>) -> Result<TrainPlan, PlanError> {
    if stages.is_empty() {
        return Err(PlanError::NoStages);
    }
    let order: Vec<Stage> = stages.iter().map(|s| s.config.stage).collect();
    if order.windows(2).any(|w| w[0] >= w[1]) {
        return Err(PlanError::StageOrder(order));
    }
    let mut out = Vec::with_capacity(stages.len());
    for b in stages {
        let stage = b.config.stage;
        if b.data.samples == 0 {
            return Err(PlanError::EmptyManifest(stage));
        }
        let eb = effective_batch(&b.config);
        if eb == 0 {
            return Err(PlanError::ZeroBatch(stage));
        }
        out.push(PlanStage {
            stage,
            trainable: b.config.freeze.trainable().into_iter().map(String::from).collect(),
            effective_batch: eb,
            config: b.config,
            data: b.data,
            deviations: b.deviations,
        });
    }
    Ok(TrainPlan {
        plan_version: PLAN_VERSION,
        seed,
        config_hash: config_hash.to_string(),
        stages: out,
    })
}

/// SHA-256 of a file, hex encoded.
pub fn file_sha256(path: &Path) -> std::io::Result<String> {
    Ok(crate::digest::sha256_hex(&std::fs::read(path)?))
}

/// Published JSON schema for plan files.
pub const PLAN_SCHEMA: &str = include_str!("../../../docs/plan.schema.json");
