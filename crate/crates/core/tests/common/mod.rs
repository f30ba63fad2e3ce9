#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use medcorpus::config::RunConfig;
use medcorpus::digest::sha256_hex;
use medcorpus::genclient::MockBackend;
use medcorpus::pipeline::{self, ComposeOptions, GenerateOptions};

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

/// The fixture run config, writing into `out`.
pub fn fixture_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::load(&fixtures_dir().join("run.toml")).expect("fixture config loads");
    cfg.output_dir = out.to_path_buf();
    cfg
}

/// Relative path -> sha256 for every file under `dir`.
pub fn tree_digest(dir: &Path) -> BTreeMap<String, String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) {
        let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                out.insert(rel, sha256_hex(&fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// ingest -> generate(mock) -> compose(--no-review) -> plan.
pub async fn run_full(cfg: &RunConfig) {
    pipeline::cmd_ingest(cfg).unwrap();
    let gen = pipeline::cmd_generate(cfg, Arc::new(MockBackend::new()), &GenerateOptions::default())
        .await
        .unwrap();
    assert_eq!(gen.exit_code(), 0, "generation incomplete: {:?}", gen.notices);
    pipeline::cmd_stats(cfg).unwrap();
    pipeline::cmd_compose(cfg, &ComposeOptions { no_review: true }).unwrap();
    let plan = pipeline::cmd_plan(cfg, Some(1000), 11).unwrap();
    assert!(plan.report.mismatches.is_empty());
}

/// Hand counts from `fixtures/manifest.toml`.
#[derive(Debug, serde::Deserialize)]
pub struct FixtureManifest {
    pub raw_records: usize,
    pub canonical_records: usize,
    pub rejected: usize,
    pub skipped: usize,
    pub datasets: BTreeMap<String, DatasetCounts>,
    pub rejection_reasons: BTreeMap<String, usize>,
}

#[derive(Debug, serde::Deserialize)]
pub struct DatasetCounts {
    pub rows: usize,
    pub raw_records: usize,
    pub canonical_records: usize,
    pub rejected: usize,
    pub skipped: usize,
}

pub fn fixture_manifest() -> FixtureManifest {
    toml::from_str(&fs::read_to_string(fixtures_dir().join("manifest.toml")).unwrap()).unwrap()
}
