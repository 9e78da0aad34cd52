use std::collections::BTreeMap;

use dexprint_core::asmparse::{parse, tokenize, Vocabulary};
use dexprint_core::corpus::*;
use dexprint_core::Error;
use proptest::prelude::*;

fn small() -> GeneratorProfile {
    GeneratorProfile {
        api_count: 120,
        methods_per_app: [2, 4],
        motif_count: 8,
        library_count: 6,
        ..GeneratorProfile::default()
    }
}

fn rep(r: &AppRecord, v: &Vocabulary) -> dexprint_core::asmparse::AppRepresentation {
    tokenize(&parse(&r.source_text).unwrap(), v)
}

#[test]
fn benign_only_corpus() {
    let (recs, _) = generate_corpus(&small(), 0, 5, 1, 7).unwrap();
    assert_eq!(recs.len(), 5);
    assert!(recs
        .iter()
        .all(|r| r.label == Label::Benign && r.family.is_none()));
}

#[test]
fn generation_is_deterministic_and_families_round_robin() {
    let p = GeneratorProfile::default();
    let (a, _) = generate_corpus(&p, 100, 100, 10, 1).unwrap();
    let (b, _) = generate_corpus(&p, 100, 100, 10, 1).unwrap();
    assert_eq!(a, b);
    let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &a {
        r.validate().unwrap();
        if let Some(f) = &r.family {
            *sizes.entry(f).or_default() += 1;
        }
    }
    assert_eq!(sizes.len(), 10);
    assert!(sizes.values().all(|&n| n == 10));
    let (c, _) = generate_corpus(&p, 100, 100, 10, 2).unwrap();
    assert_ne!(a, c);
}

#[test]
fn too_many_families_rejected() {
    assert!(matches!(
        generate_corpus(&small(), 3, 3, 4, 1),
        Err(Error::InvalidArgument(_))
    ));
    assert!(generate_corpus(&small(), 3, 3, 0, 1).is_err());
}

#[test]
fn profile_invariants() {
    let (_, w) = generate_corpus(&GeneratorProfile::default(), 30, 0, 10, 3).unwrap();
    for l in [Label::Malware, Label::Benign] {
        let s: f64 = w.class_distribution(l).iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
    let mut all = std::collections::BTreeSet::new();
    for fam in w.family_signatures() {
        for sig in fam {
            assert!(all.insert(sig.clone()), "signature shared between families");
        }
    }
}

fn count_occurrences(hay: &[u32], needle: &[u32]) -> usize {
    hay.windows(needle.len()).filter(|w| *w == needle).count()
}

#[test]
fn malware_embeds_family_signatures() {
    let (recs, w) = generate_corpus(&small(), 40, 0, 4, 5).unwrap();
    let v = Vocabulary::from_names(w.assets());
    for r in &recs {
        let f: usize = r.family.as_ref().unwrap()["family-".len()..]
            .parse()
            .unwrap();
        let app = rep(r, &v);
        let mut hits = 0;
        for sig in &w.family_signatures()[f] {
            let toks: Vec<u32> = sig
                .iter()
                .flat_map(|&s| w.slot_tokens(s, 0))
                .map(|n| v.get(&n).unwrap())
                .collect();
            hits += app
                .token_streams()
                .map(|s| count_occurrences(s, &toks))
                .sum::<usize>();
        }
        assert!(hits >= 3, "{} has {hits} signature occurrences", r.id);
    }
}

#[test]
fn epoch_tags_and_drift() {
    let p = GeneratorProfile {
        epochs: 7,
        initial_share: Some(0.4),
        ..small()
    };
    let (recs, w) = generate_corpus(&p, 100, 100, 5, 9).unwrap();
    let tag0 = recs.iter().filter(|r| r.epoch_tag == 0).count();
    assert_eq!(tag0, 80);
    assert!(recs.iter().all(|r| r.epoch_tag < 7));
    for t in 1..7 {
        assert!(recs.iter().any(|r| r.epoch_tag == t));
        let expect = 1.0 - 0.9f64.powi(t as i32);
        assert!(
            (w.drifted_share(t) - expect).abs() < 0.1,
            "epoch {t}: {}",
            w.drifted_share(t)
        );
        assert!(w.drifted_share(t) >= w.drifted_share(t - 1));
    }
    let v = Vocabulary::from_names(w.assets());
    for r in &recs {
        assert!(rep(r, &v).total_tokens() > 0);
    }
}

#[test]
fn corpus_round_trips_through_a_directory() {
    let (recs, w) = generate_corpus(&small(), 6, 6, 2, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), &recs, &w.assets()).unwrap();
    assert_eq!(load_corpus(dir.path()).unwrap(), recs);
    let m = read_manifest(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(m[0].path, format!("apps/{}.dasm", recs[0].id));
    let line = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
    let first: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    for key in ["id", "label", "family", "epoch_tag", "path"] {
        assert!(first.get(key).is_some(), "manifest lacks {key}");
    }
    std::fs::remove_file(dir.path().join(&m[1].path)).unwrap();
    assert!(matches!(
        load_corpus(dir.path()),
        Err(Error::MissingInput(_))
    ));
}

fn records(n_mal: usize, n_ben: usize) -> Vec<AppRecord> {
    (0..n_mal + n_ben)
        .map(|i| AppRecord {
            id: format!("r{i:04}"),
            label: if i < n_mal {
                Label::Malware
            } else {
                Label::Benign
            },
            family: (i < n_mal).then(|| "f".to_string()),
            epoch_tag: 0,
            source_text: String::new(),
        })
        .collect()
}

#[test]
fn split_examples() {
    let s = split_dataset(&records(50, 50), 0.5, 3).unwrap();
    assert_eq!((s.build_ids.len(), s.test_ids.len()), (50, 50));
    assert_eq!((s.train_ids.len(), s.valid_ids.len()), (40, 10));
    assert_eq!(s, split_dataset(&records(50, 50), 0.5, 3).unwrap());
    assert_ne!(s, split_dataset(&records(50, 50), 0.5, 4).unwrap());

    let s = split_dataset(&records(2, 2), 0.5, 1).unwrap();
    assert_eq!((s.build_ids.len(), s.test_ids.len()), (2, 2));
    assert!((1..=2).contains(&s.train_ids.len()) && s.valid_ids.len() <= 1);

    assert!(split_dataset(&records(2, 1), 0.5, 1).is_err());
    assert!(split_dataset(&records(5, 5), 1.0, 1).is_err());
}

proptest! {
    #[test]
    fn split_invariants(n in 4usize..300, mal_share in 0.1f64..0.9, ratio in 0.2f64..0.8, seed in any::<u64>()) {
        let n_mal = ((n as f64) * mal_share).round() as usize;
        let recs = records(n_mal, n - n_mal);
        let s = split_dataset(&recs, ratio, seed).unwrap();
        let set = |v: &[String]| v.iter().cloned().collect::<std::collections::BTreeSet<_>>();
        let (b, t, tr, va) = (set(&s.build_ids), set(&s.test_ids), set(&s.train_ids), set(&s.valid_ids));
        prop_assert!(b.is_disjoint(&t));
        prop_assert!(tr.is_disjoint(&va));
        prop_assert_eq!(tr.union(&va).cloned().collect::<std::collections::BTreeSet<_>>(), b.clone());
        prop_assert_eq!(b.len() + t.len(), n);
        prop_assert!((b.len() as f64 - ratio * n as f64).abs() <= 1.0);
        prop_assert!((tr.len() as f64 - 0.8 * b.len() as f64).abs() <= 1.0);
        let malware = |ids: &std::collections::BTreeSet<String>| ids.iter().filter(|id| recs.iter().any(|r| &r.id == *id && r.label == Label::Malware)).count();
        if n >= 40 {
            let global = n_mal as f64 / n as f64;
            prop_assert!((malware(&b) as f64 / b.len() as f64 - global).abs() <= 0.05);
            prop_assert!((malware(&t) as f64 / t.len() as f64 - global).abs() <= 0.05);
        }
    }
}

fn transform_corpus() -> (Vec<AppRecord>, Vocabulary) {
    let (recs, w) = generate_corpus(&small(), 12, 12, 3, 21).unwrap();
    (recs, Vocabulary::from_names(w.assets()))
}

#[test]
fn rename_and_junk_keep_the_representation_bit_identical() {
    let (recs, v) = transform_corpus();
    for (i, r) in recs.iter().enumerate() {
        let before = rep(r, &v);
        for kind in [
            TransformKind::RenameIdentifiers,
            TransformKind::JunkInsertion,
        ] {
            let t = transform(r, kind, i as u64).unwrap();
            assert_ne!(t.source_text, r.source_text);
            assert_eq!(rep(&t, &v), before, "{kind} changed {}", r.id);
            assert_eq!((t.label, &t.family, &t.id), (r.label, &r.family, &r.id));
        }
        let renamed = transform(r, TransformKind::RenameIdentifiers, 0).unwrap();
        assert!(
            !renamed.source_text.contains("com/"),
            "declared names survived renaming"
        );
    }
}

#[test]
fn junk_rate_twenty_percent_keeps_token_count() {
    let (recs, v) = transform_corpus();
    for r in &recs {
        let t = junk_insertion(r, 0.2, 5).unwrap();
        assert!(t.source_text.lines().count() > r.source_text.lines().count());
        assert_eq!(rep(&t, &v).total_tokens(), rep(r, &v).total_tokens());
    }
    assert!(junk_insertion(&recs[0], -1.0, 5).is_err());
}

#[test]
fn reordering_and_string_stub_keep_the_sequence_multiset() {
    let (recs, v) = transform_corpus();
    let mut moved = 0;
    for r in &recs {
        for kind in [
            TransformKind::MethodReordering,
            TransformKind::StringEncryptionStub,
        ] {
            let t = transform(r, kind, 2).unwrap();
            assert_eq!(
                rep(&t, &v).sequence_multiset(),
                rep(r, &v).sequence_multiset()
            );
        }
        let t = transform(r, TransformKind::MethodReordering, 2).unwrap();
        moved += usize::from(rep(&t, &v) != rep(r, &v));
        let s = transform(r, TransformKind::StringEncryptionStub, 2).unwrap();
        assert!(s.source_text.contains("\"enc:"));
    }
    assert!(moved > recs.len() / 2);
}

#[test]
fn call_indirection_keeps_the_token_multiset() {
    let (recs, v) = transform_corpus();
    for r in &recs {
        let t = transform(r, TransformKind::CallIndirection, 3).unwrap();
        let (a, b) = (rep(&t, &v), rep(r, &v));
        assert_eq!(a.token_multiset(), b.token_multiset());
        assert_eq!(a.sequences.len(), b.sequences.len() + 1);
    }
}

#[test]
fn transforms_are_deterministic_and_reject_bad_input() {
    let (recs, _) = transform_corpus();
    for kind in TransformKind::ALL {
        assert_eq!(
            transform(&recs[0], kind, 9).unwrap(),
            transform(&recs[0], kind, 9).unwrap()
        );
        assert_eq!(kind.name().parse::<TransformKind>().unwrap(), kind);
    }
    let mut bad = recs[0].clone();
    bad.source_text = "method m\nend\n".into();
    assert!(matches!(
        transform(&bad, TransformKind::JunkInsertion, 1),
        Err(Error::Parse { .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn transformation_safety(seed in any::<u64>(), kind_idx in 0usize..5) {
        let (recs, w) = generate_corpus(&small(), 2, 2, 1, seed).unwrap();
        let v = Vocabulary::from_names(w.assets());
        let kind = TransformKind::ALL[kind_idx];
        for r in &recs {
            let t = transform(r, kind, seed).unwrap();
            let (a, b) = (rep(&t, &v), rep(r, &v));
            if kind == TransformKind::CallIndirection {
                prop_assert_eq!(a.token_multiset(), b.token_multiset());
            } else {
                prop_assert_eq!(a.sequence_multiset(), b.sequence_multiset());
            }
        }
    }
}
