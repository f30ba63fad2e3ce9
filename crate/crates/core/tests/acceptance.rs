//! Acceptance suite: one PASS/FAIL line per headline criterion.
//!
//! Runs without the libtest harness so the lines always print. Exits non-zero
//! when any criterion fails.

mod common;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::DateTime;
use medcorpus::artifact::read_jsonl;
use medcorpus::canonicalize::{mask_to_bboxes, BBox, CanonicalRecord, InstanceMask, CANONICAL_KEYS};
use medcorpus::composer::{
    apply_mix, pack_lengths, select, MixEntry, MixTable, StageMixSpec, SyntheticIndex,
};
use medcorpus::config::RunConfig;
use medcorpus::corpus::{InstructionSample, Message};
use medcorpus::digest::sub_seed;
use medcorpus::genclient::{ClientConfig, GenerationClient, MockBackend};
use medcorpus::pipeline::{self, ComposeOptions};
use medcorpus::promptgen::GenerationRequest;
use medcorpus::review::{retention, QualityLabel, ReviewPolicy};
use medcorpus::trainplan::{effective_batch, lr_at, stage_config};
use medcorpus::types::{InstructionFormat, Language, Stage, Verdict};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Check = Result<String, String>;

struct Suite {
    failed: usize,
}

impl Suite {
    fn run(&mut self, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Check) {
        let start = Instant::now();
        let outcome = f();
        let took = start.elapsed();
        let (mut ok, mut detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        if let Some(limit) = limit {
            if took > limit {
                ok = false;
                detail = format!("{detail}; too slow");
            }
        }
        let timing = match limit {
            Some(l) => format!("{:.2} s, limit {} s", took.as_secs_f64(), l.as_secs()),
            None => format!("{:.2} s", took.as_secs_f64()),
        };
        println!("{} {name:<34} {detail} ({timing})", if ok { "PASS" } else { "FAIL" });
        if !ok {
            self.failed += 1;
        }
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap()
}

// ---------------------------------------------------------------------------
// 1. Canonical-format fidelity

/// Registry yielding exactly 1000 canonical records:
/// 400 two-label classification rows, 100 detection boxes, 50 masks x 2 instances.
fn thousand_record_registry(dir: &Path) {
    let write_desc = |id: &str, task: &str, modality: &str, dept: Option<&str>, ann: &str| {
        let mut d = serde_json::json!({
            "dataset_id": id, "name": id, "task_kind": task, "modality": modality,
            "source": "synthetic", "root_path": id, "annotation_file": ann,
        });
        if let Some(dept) = dept {
            d["department"] = dept.into();
        }
        fs::write(dir.join(format!("{id}.json")), d.to_string()).unwrap();
    };
    let gray = |path: &Path, w: u32, h: u32| {
        image::GrayImage::from_fn(w, h, |x, y| image::Luma([((x * 7 + y * 3) % 251) as u8])).save(path).unwrap();
    };

    let cls = dir.join("cls");
    fs::create_dir_all(&cls).unwrap();
    gray(&cls.join("shared.png"), 64, 64);
    let mut csv = String::from("image,labels\n");
    for i in 0..400 {
        let name = format!("img{i:03}.png");
        fs::copy(cls.join("shared.png"), cls.join(&name)).unwrap();
        csv.push_str(&format!("{name},finding{};finding{}\n", i % 7, 7 + i % 5));
    }
    fs::remove_file(cls.join("shared.png")).unwrap();
    fs::write(cls.join("labels.csv"), csv).unwrap();
    write_desc("cls", "classification", "Fundus", Some("Ophthalmology"), "labels.csv");

    let det = dir.join("det");
    fs::create_dir_all(&det).unwrap();
    let mut csv = String::from("image,label,x_min,y_min,x_max,y_max\n");
    for i in 0..20 {
        gray(&det.join(format!("d{i:02}.png")), 96, 96);
        for j in 0..5u32 {
            csv.push_str(&format!("d{i:02}.png,nodule,{},{},{},{}\n", j * 10, j * 5, j * 10 + 20, j * 5 + 30));
        }
    }
    fs::write(det.join("boxes.csv"), csv).unwrap();
    write_desc("det", "detection", "X-ray", None, "boxes.csv");

    let seg = dir.join("seg");
    let masks = seg.join("masks");
    fs::create_dir_all(&masks).unwrap();
    fs::write(masks.join("labels.csv"), "id,label\n1,liver\n2,kidney\n").unwrap();
    for i in 0..50u32 {
        gray(&seg.join(format!("s{i:02}.png")), 64, 64);
        let off = i % 10;
        let m = image::GrayImage::from_fn(64, 64, |x, y| {
            let v = if (off..off + 20).contains(&x) && (5..25).contains(&y) {
                1
            } else if (30..45).contains(&x) && (35 + off / 2..55).contains(&y) {
                2
            } else {
                0
            };
            image::Luma([v])
        });
        m.save(masks.join(format!("s{i:02}.png"))).unwrap();
    }
    write_desc("seg", "segmentation", "CT", Some("Hepatology"), "masks");
}

fn canonical_fidelity(work: &Path) -> Check {
    let schema: Value = serde_json::from_str(&fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/canonical_record.schema.json"),
    ).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema).map_err(|e| e.to_string())?;

    let start = Instant::now();
    let cfg = RunConfig::new(work.join("registry"), work.join("out"), 11);
    pipeline::cmd_ingest(&cfg).map_err(|e| e.to_string())?;
    let (header, lines) = read_jsonl::<Value>(&cfg.output_dir.join("canonical/records.jsonl")).map_err(|e| e.to_string())?;
    ensure(header.is_some(), || "records file has no header".into())?;
    let mut valid = 0;
    for line in &lines {
        let keys: Vec<&str> = line.as_object().unwrap().keys().map(String::as_str).collect();
        let mut want: Vec<&str> = CANONICAL_KEYS.to_vec();
        want.sort_unstable();
        let mut got = keys.clone();
        got.sort_unstable();
        let typed: CanonicalRecord = serde_json::from_value(line.clone()).map_err(|e| e.to_string())?;
        if got == want && validator.is_valid(line) && typed.check_shape().is_ok() {
            valid += 1;
        }
    }
    ensure(lines.len() == 1000, || format!("expected 1000 records, got {}", lines.len()))?;
    ensure(valid == lines.len(), || format!("{valid}/{} records valid", lines.len()))?;
    Ok(format!("{valid}/{} records valid, ingest+validate {:.2} s", lines.len(), start.elapsed().as_secs_f64()))
}

// ---------------------------------------------------------------------------
// 2. Mask -> bbox

fn pixel_scan(w: u32, h: u32, px: &[u8]) -> Vec<(u8, BBox)> {
    let mut boxes: BTreeMap<u8, [u32; 4]> = BTreeMap::new();
    for y in 0..h {
        for x in 0..w {
            let v = px[(y * w + x) as usize];
            if v != 0 {
                let b = boxes.entry(v).or_insert([x, y, x, y]);
                b[0] = b[0].min(x);
                b[1] = b[1].min(y);
                b[2] = b[2].max(x);
                b[3] = b[3].max(y);
            }
        }
    }
    boxes.into_iter().map(|(id, b)| (id, BBox::new(b[0], b[1], b[2], b[3]))).collect()
}

fn mask_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let (mut mismatches, n) = (0, 2000);
    for _ in 0..n {
        let (w, h) = (rng.random_range(1..=64u32), rng.random_range(1..=64u32));
        let k = rng.random_range(1..=4usize);
        let ids: Vec<u8> = (0..k).map(|_| rng.random_range(1..=255u8)).collect();
        let density: f64 = rng.random_range(0.01..0.6);
        let px: Vec<u8> = (0..w * h)
            .map(|_| if rng.random_bool(density) { ids[rng.random_range(0..k)] } else { 0 })
            .collect();
        let want = pixel_scan(w, h, &px);
        let got = mask_to_bboxes(&InstanceMask::new(w, h, px).unwrap()).unwrap_or_default();
        if got != want {
            mismatches += 1;
        }
    }
    ensure(mismatches == 0, || format!("{mismatches} mismatches over {n} masks"))?;
    Ok(format!("0 mismatches over {n} masks"))
}

// ---------------------------------------------------------------------------
// 3. Mixing arithmetic

/// "1.28M" -> 1_280_000 using integer arithmetic only.
fn size_oracle(s: &str) -> u64 {
    let (digits, mult) = match s.chars().last().unwrap() {
        'k' => (&s[..s.len() - 1], 1_000),
        'M' => (&s[..s.len() - 1], 1_000_000),
        _ => (s, 1),
    };
    let (int, frac) = digits.split_once('.').unwrap_or((digits, ""));
    let scale = 10u64.pow(frac.len() as u32);
    let whole: u64 = format!("{int}{frac}").parse().unwrap();
    whole * mult / scale
}

/// "12.5%" -> tenths of a percent (125).
fn tenths_oracle(s: &str) -> u64 {
    let v = s.trim_end_matches('%');
    let (int, frac) = v.split_once('.').unwrap_or((v, "0"));
    int.parse::<u64>().unwrap() * 10 + frac[..1].parse::<u64>().unwrap()
}

fn mix_arithmetic() -> Check {
    let table = MixTable::bundled();
    let mut rows_checked = 0;
    let mut named = BTreeMap::new();
    for (stage, column) in [(Stage::I, 0), (Stage::III, 1)] {
        let spec = table.spec_for(stage, 99).map_err(|e| e.to_string())?;
        let index = SyntheticIndex::for_spec(&spec);
        let picks = select(&spec, &index).map_err(|e| e.to_string())?;
        let mut total = 0;
        for ((group, row), (name, sel)) in table.rows().zip(&picks) {
            ensure(&row.name == name, || format!("row order differs at {name}"))?;
            let n = size_oracle(&row.size);
            let pct = tenths_oracle(if column == 0 { &group.ratio_stage_1_2 } else { &group.ratio_stage_3 });
            let want = (n * pct * 2 + 1000) / 2000;
            ensure(sel.len() == want, || format!("{name} stage {stage}: {} != {want}", sel.len()))?;
            if matches!(name.as_str(), "ALLaVA" | "PMC-Inline") {
                let positions: Vec<u64> = sel.positions().collect();
                ensure(
                    positions.len() as u64 == want
                        && positions.windows(2).all(|w| w[0] < w[1])
                        && positions.last().is_none_or(|p| *p < n),
                    || format!("{name}: positions not distinct and in range"),
                )?;
            }
            named.insert((name.clone(), stage), sel.len());
            total += want;
            rows_checked += 1;
        }
        ensure(spec.expected_total() == total, || format!("stage {stage} total {} != {total}", spec.expected_total()))?;
    }
    let allava = named[&("ALLaVA".to_string(), Stage::III)];
    let pmc = named[&("PMC-Inline".to_string(), Stage::III)];
    ensure(allava == 234_000, || format!("ALLaVA stage III = {allava}"))?;
    ensure(pmc == 28_800, || format!("PMC-Inline stage III = {pmc}"))?;
    Ok(format!("{rows_checked} rows exact; 468k x 50% = {allava}, 288k x 10% = {pmc}"))
}

// ---------------------------------------------------------------------------
// 4. Packing

fn packing() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut violations = 0;
    let streams = 10_000;
    for _ in 0..streams {
        let budget = rng.random_range(1..=4096u64);
        let n = rng.random_range(0..60usize);
        let items: Vec<(String, u64)> = (0..n)
            .map(|i| (format!("s{i}"), rng.random_range(1..=budget + budget / 4)))
            .collect();
        let packed = pack_lengths(items.clone(), budget);
        let flat: Vec<(String, u64)> = packed
            .iter()
            .flat_map(|p| p.member_sample_ids.iter().cloned().zip(p.token_lengths.iter().copied()))
            .collect();
        if flat != items {
            violations += 1;
            continue;
        }
        for (i, seq) in packed.iter().enumerate() {
            let fits = seq.overflow || seq.used() <= budget;
            let greedy = packed.get(i + 1).is_none_or(|next| seq.used() + next.token_lengths[0] > budget);
            if !fits || !greedy {
                violations += 1;
            }
        }
    }
    ensure(violations == 0, || format!("{violations} violations"))?;
    Ok(format!("0 violations over {streams} streams"))
}

// ---------------------------------------------------------------------------
// 5. Plan constants

fn plan_constants() -> Check {
    let golden: Vec<Value> = serde_json::from_str(include_str!("golden/stage_configs.json")).unwrap();
    let mut fields = 0;
    for (g, stage) in golden.iter().zip(Stage::ALL) {
        let c = stage_config(*stage);
        let got = serde_json::json!({
            "stage": c.stage,
            "freeze": c.freeze,
            "base_lr": c.base_lr,
            "lr_schedule": c.lr_schedule,
            "optimizer": c.optimizer,
            "input_size": c.input_size,
            "batch": c.batch.to_string(),
            "effective_batch": effective_batch(&c),
            "packing": c.packing,
            "drop_rate": c.drop_rate,
            "precision": c.precision,
            "hardware": c.hardware,
        });
        for (k, want) in g.as_object().unwrap() {
            ensure(&got[k] == want, || format!("stage {stage} {k}: {} != {want}", got[k]))?;
            fields += 1;
        }
        ensure(c.base_lr.to_bits() == g["base_lr"].as_f64().unwrap().to_bits(), || "lr bits differ".into())?;
    }
    Ok(format!("{fields} golden fields equal"))
}

// ---------------------------------------------------------------------------
// 6. LR curve

fn lr_curve() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let grids = 10_000;
    for i in 0..grids {
        let c = stage_config(Stage::ALL[i % 3]);
        let total = rng.random_range(1..=100_000u64);
        ensure(lr_at(&c, 0, total) == c.base_lr, || format!("start != base_lr at total {total}"))?;
        ensure(lr_at(&c, total, total) == c.lr_min, || format!("end != lr_min at total {total}"))?;
        if total % 2 == 0 {
            let mid = lr_at(&c, total / 2, total);
            let want = (c.base_lr + c.lr_min) / 2.0;
            ensure((mid - want).abs() <= 1e-12, || format!("midpoint {mid} vs {want}"))?;
        }
        let mut steps: Vec<u64> = (0..50).map(|_| rng.random_range(0..=total)).collect();
        steps.sort_unstable();
        let lrs: Vec<f64> = steps.iter().map(|s| lr_at(&c, *s, total)).collect();
        ensure(lrs.windows(2).all(|w| w[1] <= w[0]), || format!("increase on grid {i}"))?;
    }
    Ok(format!("endpoints exact, midpoint within 1e-12, monotone on {grids} grids"))
}

// ---------------------------------------------------------------------------
// 7. End-to-end determinism

fn determinism() -> Check {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let rt = runtime();
    rt.block_on(common::run_full(&common::fixture_config(a.path())));
    rt.block_on(common::run_full(&common::fixture_config(b.path())));
    let (da, db) = (common::tree_digest(a.path()), common::tree_digest(b.path()));
    let differing: Vec<&String> = da.keys().filter(|k| da.get(*k) != db.get(*k)).collect();
    ensure(da.len() == db.len() && differing.is_empty(), || format!("differs: {differing:?}"))?;
    Ok(format!("{} files byte-identical across two runs", da.len()))
}

// ---------------------------------------------------------------------------
// 8. Prompt fidelity

fn prompt_fidelity(work: &Path) -> Check {
    let mut total = 0;
    let mut region = 0;
    for reg in [common::fixtures_dir(), work.join("registry")] {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = RunConfig::new(&reg, tmp.path(), 5);
        pipeline::cmd_ingest(&cfg).map_err(|e| e.to_string())?;
        let records = pipeline::read_records(&cfg).map_err(|e| e.to_string())?;
        let by_id: BTreeMap<&str, &CanonicalRecord> = records.iter().map(|r| (r.record_id.as_str(), r)).collect();
        let requests = pipeline::plan_all_requests(&cfg, &records).map_err(|e| e.to_string())?;
        for req in &requests {
            let rec = by_id[req.record_id.as_str()];
            let p = &req.prompt_text;
            ensure(p.contains(rec.modality.as_str()) && p.contains(&rec.label), || {
                format!("request {} lacks modality or label", req.request_id)
            })?;
            if req.format == InstructionFormat::RegionCaption {
                let b = rec.bbox.ok_or("region caption without bbox")?;
                let rendered = format!("[{}, {}, {}, {}]", b.x_min, b.y_min, b.x_max, b.y_max);
                ensure(p.contains(&rendered), || format!("request {} lacks {rendered}", req.request_id))?;
                region += 1;
            }
            total += 1;
        }
    }
    Ok(format!("{total}/{total} requests grounded; {region}/{region} region prompts carry all bbox coordinates"))
}

// ---------------------------------------------------------------------------
// 9. Review -> compose

fn review_label(store: &medcorpus::review::ReviewStore, ds: &str, verdict: Verdict) -> QualityLabel {
    let n = store.policy().min_samples_seen.min(store.subset(ds).unwrap().len());
    QualityLabel {
        dataset_name: ds.into(),
        reviewer: "acceptance".into(),
        verdict,
        sample_ids_seen: store.subset(ds).unwrap()[..n].to_vec(),
        timestamp: DateTime::from_timestamp(1_700_000_000, 0).unwrap(),
        note: None,
    }
}

fn stage_three_counts(cfg: &RunConfig) -> BTreeMap<String, u64> {
    let (_, lines) = read_jsonl::<Value>(&cfg.output_dir.join("compose/manifests/stage_III.jsonl")).unwrap();
    let mut out = BTreeMap::new();
    for l in lines {
        *out.entry(l["dataset_name"].as_str().unwrap().to_string()).or_default() += 1;
    }
    out
}

fn review_compose() -> Check {
    let policy = ReviewPolicy::default();

    // (a) excluded dataset on the fixture corpus
    let seed = (0u64..)
        .find(|s| !retention("ds_mr_seg", Verdict::Low, &policy, sub_seed(*s, "review")).retained)
        .unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = common::fixture_config(tmp.path());
    cfg.seed = seed;
    let rt = runtime();
    pipeline::cmd_ingest(&cfg).map_err(|e| e.to_string())?;
    rt.block_on(pipeline::cmd_generate(&cfg, Arc::new(MockBackend::new()), &Default::default()))
        .map_err(|e| e.to_string())?;
    let store = pipeline::open_review_store(&cfg).map_err(|e| e.to_string())?;
    for (ds, v) in [("ds_ct_cls", Verdict::High), ("ds_mr_seg", Verdict::Low), ("ds_xray_det", Verdict::High)] {
        store.submit_label(review_label(&store, ds, v)).map_err(|e| e.to_string())?;
    }
    pipeline::cmd_compose(&cfg, &ComposeOptions::default()).map_err(|e| e.to_string())?;
    let excluded = stage_three_counts(&cfg).get("ds_mr_seg").copied().unwrap_or(0);
    ensure(excluded == 0, || format!("excluded dataset has {excluded} stage III samples"))?;

    // (b) diversity retention on a 10,000-sample dataset
    let seed = (0u64..)
        .find(|s| retention("big", Verdict::Low, &policy, sub_seed(*s, "review")).retained)
        .unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::new(tmp.path().join("registry"), tmp.path().join("out"), seed);
    let samples: Vec<InstructionSample> = (0..10_000)
        .map(|i| InstructionSample {
            sample_id: format!("{i:032x}"),
            source_record_id: format!("{:032x}", i / 5),
            source_dataset: "big".into(),
            format: InstructionFormat::TextOnly,
            language: Language::En,
            image_ref: None,
            messages: vec![Message::user("q"), Message::assistant("a")],
            quality_flag: None,
        })
        .collect();
    let corpus = cfg.output_dir.join("corpus");
    fs::create_dir_all(&corpus).unwrap();
    let mut w = medcorpus::artifact::JsonlWriter::create(&corpus.join("samples.jsonl"), None).unwrap();
    for s in &samples {
        w.write(s).unwrap();
    }
    w.finish().unwrap();
    fs::create_dir_all(cfg.output_dir.join("canonical")).unwrap();
    fs::write(cfg.output_dir.join("canonical/records.jsonl"), "").unwrap();
    cfg.review.policy = policy.clone();
    let store = pipeline::open_review_store(&cfg).map_err(|e| e.to_string())?;
    let ack = store.submit_label(review_label(&store, "big", Verdict::Low)).map_err(|e| e.to_string())?;
    ensure(ack.decision.retained && ack.decision.retained_fraction == 0.05, || format!("{:?}", ack.decision))?;
    pipeline::cmd_compose(&cfg, &ComposeOptions::default()).map_err(|e| e.to_string())?;
    let kept = stage_three_counts(&cfg).get("big").copied().unwrap_or(0);
    ensure(kept == 500, || format!("retained {kept} of 10000"))?;

    // same arithmetic straight through the composer
    let spec = StageMixSpec {
        stage: Stage::III,
        entries: vec![MixEntry { dataset_name: "big".into(), category: "c".into(), available: 10_000, ratio: 1.0 }],
        seed: 3,
    };
    let scaled = spec.with_retention(&BTreeMap::from([("big".to_string(), 0.05)])).unwrap();
    let m = apply_mix(&scaled, &SyntheticIndex::for_spec(&scaled)).unwrap();
    ensure(m.total == 500, || format!("composer gives {}", m.total))?;
    Ok(format!("excluded dataset -> {excluded} samples; 10000 x 0.05 -> {kept}"))
}

// ---------------------------------------------------------------------------
// 10. Rate limiting

fn rate_limit() -> Check {
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().start_paused(true).build().unwrap();
    rt.block_on(async {
        let cfg = ClientConfig { requests_per_minute: 60, max_parallel: 8, ..ClientConfig::default() };
        let client = GenerationClient::new(Arc::new(MockBackend::new()), cfg, ".").map_err(|e| e.to_string())?;
        let requests: Vec<GenerationRequest> = (0..100)
            .map(|i| GenerationRequest {
                request_id: format!("r{i:03}"),
                record_id: "rec".into(),
                format: InstructionFormat::TextOnly,
                template_id: "text_only.v1".into(),
                seq: 0,
                prompt_text: "Write one question and answer about CT pneumonia.".into(),
                image_ref: None,
                target_language: Language::En,
                label: "pneumonia".into(),
                mcq: None,
            })
            .collect();
        let start = tokio::time::Instant::now();
        let results = client.generate_all(&requests).await;
        let elapsed = start.elapsed();
        let ok = results.iter().filter(|r| r.is_ok()).count();
        ensure(ok == 100, || format!("{ok}/100 completed"))?;
        let log = client.limiter().send_log().await;
        ensure(log.len() == 100, || format!("{} sends logged", log.len()))?;
        let window = Duration::from_secs(60);
        let mut worst = 0;
        for (i, t) in log.iter().enumerate() {
            let in_window = log[i..].iter().take_while(|u| **u < *t + window).count();
            worst = worst.max(in_window);
        }
        ensure(worst <= 60, || format!("{worst} sends in one 60 s window"))?;
        let distinct: HashSet<&String> = results.iter().flatten().map(|r| &r.request_id).collect();
        ensure(distinct.len() == 100, || "duplicate results".into())?;
        Ok(format!("100/100 completed, max {worst} sends per 60 s window, {:.0} s virtual", elapsed.as_secs_f64()))
    })
}

fn main() {
    let work = tempfile::tempdir().unwrap();
    fs::create_dir_all(work.path().join("registry")).unwrap();
    thousand_record_registry(&work.path().join("registry"));

    let mut suite = Suite { failed: 0 };
    let secs = Duration::from_secs;
    suite.run("canonical-format fidelity", Some(secs(5)), || canonical_fidelity(work.path()));
    suite.run("mask-to-bbox oracle equivalence", Some(secs(10)), mask_oracle);
    suite.run("mixing arithmetic", Some(secs(1)), mix_arithmetic);
    suite.run("packing conservation and greedy", Some(secs(5)), packing);
    suite.run("training-plan constants", None, plan_constants);
    suite.run("learning-rate curve", None, lr_curve);
    suite.run("end-to-end determinism", Some(secs(60)), determinism);
    suite.run("annotation-guided prompting", None, || prompt_fidelity(work.path()));
    suite.run("review to compose integration", None, review_compose);
    suite.run("rate limiting", None, rate_limit);

    if suite.failed > 0 {
        println!("{} criteria failed", suite.failed);
        std::process::exit(1);
    }
    println!("all criteria passed");
}
