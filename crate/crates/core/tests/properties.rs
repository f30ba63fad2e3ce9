use std::collections::{BTreeMap, HashSet};

use medcorpus::canonicalize::{mask_to_bboxes, BBox, CanonicalRecord, InstanceMask};
use medcorpus::composer::{
    apply_mix, pack_lengths, target_count, CharEstimator, MixEntry, StageMixSpec, SyntheticIndex,
    TokenEstimator,
};
use medcorpus::corpus::{dedup, split_turns, stats, InstructionSample, Message};
use medcorpus::genclient::select_for_translation;
use medcorpus::ingest::{DatasetDescriptor, Registry};
use medcorpus::trainplan::{lr_at, stage_config};
use medcorpus::types::{InstructionFormat, Language, Modality, Stage, TaskKind};
use proptest::prelude::*;

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig::with_cases(n)
}

/// Per-id min/max over every pixel, written without reference to the library.
fn pixel_scan(w: u32, h: u32, px: &[u8]) -> Vec<(u8, BBox)> {
    let mut boxes: BTreeMap<u8, [u32; 4]> = BTreeMap::new();
    for y in 0..h {
        for x in 0..w {
            let v = px[(y * w + x) as usize];
            if v == 0 {
                continue;
            }
            let b = boxes.entry(v).or_insert([x, y, x, y]);
            b[0] = b[0].min(x);
            b[1] = b[1].min(y);
            b[2] = b[2].max(x);
            b[3] = b[3].max(y);
        }
    }
    boxes.into_iter().map(|(id, b)| (id, BBox::new(b[0], b[1], b[2], b[3]))).collect()
}

fn arb_mask() -> impl Strategy<Value = (u32, u32, Vec<u8>)> {
    (1u32..=64, 1u32..=64, prop::collection::vec(1u8..=255, 1..=4)).prop_flat_map(|(w, h, ids)| {
        let n = (w * h) as usize;
        let pick = prop_oneof![3 => Just(0u8), 1 => prop::sample::select(ids)];
        (Just(w), Just(h), prop::collection::vec(pick, n))
    })
}

fn sample(id: &str, record: &str, format: InstructionFormat, text: &str) -> InstructionSample {
    InstructionSample {
        sample_id: id.into(),
        source_record_id: record.into(),
        source_dataset: "ds".into(),
        format,
        language: Language::En,
        image_ref: format.has_image().then(|| "img.png".into()),
        messages: vec![Message::user("q"), Message::assistant(text)],
        quality_flag: None,
    }
}

fn arb_format() -> impl Strategy<Value = InstructionFormat> {
    prop::sample::select(InstructionFormat::ALL.to_vec())
}

proptest! {
    #![proptest_config(cases(1000))]

    #[test]
    fn mask_boxes_match_pixel_scan((w, h, px) in arb_mask()) {
        let want = pixel_scan(w, h, &px);
        let mask = InstanceMask::new(w, h, px).unwrap();
        match mask_to_bboxes(&mask) {
            Ok(got) => prop_assert_eq!(got, want),
            Err(_) => prop_assert!(want.is_empty()),
        }
    }

    #[test]
    fn packing_conserves_order_and_is_greedy(
        lens in prop::collection::vec(1u64..600, 0..200),
        budget in 1u64..1024,
    ) {
        let items: Vec<(String, u64)> = lens.iter().enumerate().map(|(i, l)| (format!("s{i}"), *l)).collect();
        let packed = pack_lengths(items.clone(), budget);
        let flat: Vec<(String, u64)> = packed
            .iter()
            .flat_map(|p| p.member_sample_ids.iter().cloned().zip(p.token_lengths.iter().copied()))
            .collect();
        prop_assert_eq!(&flat, &items);
        for (i, seq) in packed.iter().enumerate() {
            prop_assert!(!seq.member_sample_ids.is_empty());
            if seq.overflow {
                prop_assert_eq!(seq.member_sample_ids.len(), 1);
                prop_assert!(seq.used() > budget);
            } else {
                prop_assert!(seq.used() <= budget);
            }
            if let Some(next) = packed.get(i + 1) {
                prop_assert!(seq.used() + next.token_lengths[0] > budget);
            }
        }
    }

    #[test]
    fn lr_is_bounded_and_non_increasing(total in 1u64..5000, stage in prop::sample::select(Stage::ALL.to_vec())) {
        let cfg = stage_config(stage);
        let mut prev = f64::INFINITY;
        let stride = (total / 200).max(1);
        let mut step = 0;
        while step <= total {
            let lr = lr_at(&cfg, step, total);
            prop_assert!(lr <= prev);
            prop_assert!(lr >= cfg.lr_min && lr <= cfg.base_lr);
            prev = lr;
            step += stride;
        }
        prop_assert_eq!(lr_at(&cfg, 0, total), cfg.base_lr);
        prop_assert_eq!(lr_at(&cfg, total, total), cfg.lr_min);
    }

    #[test]
    fn dedup_matches_hash_set_oracle(
        raw in prop::collection::vec((0u8..4, arb_format(), 0u8..3), 0..60),
    ) {
        let samples: Vec<InstructionSample> = raw
            .iter()
            .enumerate()
            .map(|(i, (r, f, t))| sample(&format!("s{i}"), &format!("r{r}"), *f, &format!("text {t}")))
            .collect();
        let mut seen = HashSet::new();
        let want: Vec<String> = raw
            .iter()
            .enumerate()
            .filter(|(_, key)| seen.insert(**key))
            .map(|(i, _)| format!("s{i}"))
            .collect();
        let once = dedup(samples);
        let got: Vec<String> = once.iter().map(|s| s.sample_id.clone()).collect();
        prop_assert_eq!(&got, &want);
        let twice = dedup(once.clone());
        prop_assert_eq!(twice, once);
    }

    #[test]
    fn samples_round_trip_through_json(
        f in arb_format(),
        text in "[a-zA-Z0-9 .,\u{4e00}-\u{4e10}]{1,80}",
        zh in any::<bool>(),
    ) {
        let mut s = sample("id", "rec", f, &text);
        if zh {
            s.language = Language::Zh;
        }
        let line = serde_json::to_string(&s).unwrap();
        let back: InstructionSample = serde_json::from_str(&line).unwrap();
        prop_assert_eq!(back, s);
    }

    #[test]
    fn estimator_is_monotone_in_text(a in 0usize..4000, extra in 0usize..4000, image in any::<bool>()) {
        let est = CharEstimator::default();
        let make = |n: usize| {
            let mut s = sample("s", "r", InstructionFormat::TextOnly, &"x".repeat(n));
            s.image_ref = image.then(|| "i.png".into());
            s
        };
        let short = est.estimate(&make(a));
        let long = est.estimate(&make(a + extra));
        prop_assert!(short >= 1 && short <= long);
    }

    #[test]
    fn q_a_dialogues_parse_back(pairs in prop::collection::vec(("[a-z][a-z ]{0,20}[a-z]", "[a-z][a-z ]{0,20}[a-z]"), 1..6)) {
        let text: String = pairs.iter().map(|(q, a)| format!("Q: {q}\nA: {a}\n")).collect();
        let parsed = split_turns(&text).unwrap();
        prop_assert_eq!(parsed, pairs);
    }
}

proptest! {
    #![proptest_config(cases(300))]

    #[test]
    fn recanonicalize_is_identity(
        label in "[a-z]{1,12}",
        b in (0u32..100, 0u32..100, 0u32..100, 0u32..100),
        with_box in any::<bool>(),
    ) {
        let desc = DatasetDescriptor {
            dataset_id: "ds".into(),
            name: "n".into(),
            task_kind: TaskKind::Detection,
            modality: Modality::Ct,
            department: None,
            source: "s".into(),
            root_path: ".".into(),
            annotation_file: "a.csv".into(),
            license_note: None,
        };
        let bbox = with_box.then(|| BBox::new(b.0.min(b.2), b.1.min(b.3), b.0.max(b.2), b.1.max(b.3)));
        let rec = CanonicalRecord::new(&desc, "img.png", &label, bbox);
        let line = serde_json::to_string(&rec).unwrap();
        let back: CanonicalRecord = serde_json::from_str(&line).unwrap();
        prop_assert_eq!(back.recanonicalize().unwrap(), rec);
    }

    #[test]
    fn stats_percent_sums_to_exactly_100(counts in prop::collection::vec(0usize..40, 1..6)) {
        prop_assume!(counts.iter().sum::<usize>() > 0);
        let descs: Vec<DatasetDescriptor> = (0..counts.len())
            .map(|i| DatasetDescriptor {
                dataset_id: format!("ds{i}"),
                name: "n".into(),
                task_kind: TaskKind::Classification,
                modality: Modality::ALL[i],
                department: None,
                source: "s".into(),
                root_path: ".".into(),
                annotation_file: "a.csv".into(),
                license_note: None,
            })
            .collect();
        let registry = Registry::from_descriptors(".", descs).unwrap();
        let samples: Vec<InstructionSample> = counts
            .iter()
            .enumerate()
            .flat_map(|(i, n)| (0..*n).map(move |j| {
                let mut s = sample(&format!("{i}-{j}"), "r", InstructionFormat::ImageCaption, "t");
                s.source_dataset = format!("ds{i}");
                s
            }))
            .collect();
        let st = stats(&samples, &registry).unwrap();
        let tenths: i64 = st.by_modality.values().map(|s| (s.percent * 10.0).round() as i64).sum();
        prop_assert_eq!(tenths, 1000);
        let total: u64 = st.by_modality.values().map(|s| s.count).sum();
        prop_assert_eq!(total, samples.len() as u64);
        for (i, n) in counts.iter().enumerate() {
            if *n == 0 {
                continue;
            }
            let share = &st.by_modality[Modality::ALL[i].as_str()];
            let exact = *n as f64 * 100.0 / samples.len() as f64;
            prop_assert!((share.percent - exact).abs() < 0.1 + 1e-9);
        }
    }

    #[test]
    fn mix_totals_equal_rounded_products(
        rows in prop::collection::vec((1u64..5000, 0u32..=100), 1..8),
        seed in any::<u64>(),
    ) {
        let entries: Vec<MixEntry> = rows
            .iter()
            .enumerate()
            .map(|(i, (n, pct))| MixEntry {
                dataset_name: format!("ds{i}"),
                category: "c".into(),
                available: *n,
                ratio: *pct as f64 / 100.0,
            })
            .collect();
        let spec = StageMixSpec { stage: Stage::I, entries, seed };
        let index = SyntheticIndex::for_spec(&spec);
        let m = apply_mix(&spec, &index).unwrap();
        for ((n, pct), pick) in rows.iter().zip(&m.picks) {
            // integer oracle for round-half-up of n * pct / 100
            let want = (n * *pct as u64 * 2 + 100) / 200;
            prop_assert_eq!(pick.sample_ids.len() as u64, want);
            prop_assert_eq!(target_count(*n, *pct as f64 / 100.0), want);
            let distinct: HashSet<&String> = pick.sample_ids.iter().collect();
            prop_assert_eq!(distinct.len(), pick.sample_ids.len());
            prop_assert!(pick.sample_ids.windows(2).all(|w| w[0] < w[1]));
        }
        prop_assert_eq!(m.total, spec.expected_total());
        prop_assert_eq!(apply_mix(&spec, &index).unwrap(), m);
    }

    #[test]
    fn translation_selection_has_exact_size(n in 0usize..2000, pct in 0u32..=100, seed in any::<u64>()) {
        let picked = select_for_translation(n, pct as f64 / 100.0, seed);
        let want = (n as u64 * pct as u64 * 2 + 100) / 200;
        prop_assert_eq!(picked.len() as u64, want);
        prop_assert!(picked.iter().all(|i| *i < n));
    }
}
