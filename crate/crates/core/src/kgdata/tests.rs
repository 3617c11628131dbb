use super::*;
use proptest::prelude::*;
use std::collections::BTreeSet;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn paths(dir: &Path, train: &str, valid: &str, test: &str) -> SplitPaths {
    SplitPaths {
        train: write(dir, "train.txt", train),
        valid: write(dir, "valid.txt", valid),
        test: write(dir, "test.txt", test),
    }
}

#[test]
fn loads_small_graph_with_first_appearance_order() {
    let dir = tempfile::tempdir().unwrap();
    let p = paths(dir.path(), "a\tr1\tb\nb\tr1\tc\n", "", "");
    let kg = load_graph(&p, false).unwrap();
    assert_eq!(kg.num_entities(), 3);
    assert_eq!(kg.num_relations(), 1);
    assert_eq!(kg.train, vec![Triple::new(0, 0, 1), Triple::new(1, 0, 2)]);
    assert_eq!(kg.entities.names(), &["a", "b", "c"]);
}

#[test]
fn duplicate_triple_in_split_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = paths(dir.path(), "a\tr\tb\na\tr\tb\n", "", "");
    match load_graph(&p, false) {
        Err(DataError::DuplicateTriple { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected duplicate error, got {other:?}"),
    }
}

#[test]
fn same_triple_in_two_splits_is_allowed() {
    let dir = tempfile::tempdir().unwrap();
    let p = paths(dir.path(), "a\tr\tb\n", "a\tr\tb\n", "");
    assert!(load_graph(&p, false).is_ok());
}

#[test]
fn malformed_line_reports_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let p = paths(dir.path(), "a\tr\tb\n\na\tr\n", "", "");
    match load_graph(&p, false) {
        Err(DataError::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn unseen_test_entity_needs_the_allow_flag() {
    let dir = tempfile::tempdir().unwrap();
    let p = paths(dir.path(), "a\tr\tb\n", "", "a\tr\tz\n");
    match load_graph(&p, false) {
        Err(DataError::Unseen { kind, name, line, .. }) => {
            assert_eq!((kind, name.as_str(), line), ("entity", "z", 1));
        }
        other => panic!("expected unseen error, got {other:?}"),
    }
    let kg = load_graph(&p, true).unwrap();
    assert_eq!(kg.num_entities(), 3);
    assert_eq!(kg.test, vec![Triple::new(0, 0, 2)]);
}

#[test]
fn missing_file_is_an_io_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let p = SplitPaths {
        train: dir.path().join("nope.txt"),
        valid: dir.path().join("nope.txt"),
        test: dir.path().join("nope.txt"),
    };
    let err = load_graph(&p, false).unwrap_err();
    assert!(err.to_string().contains("nope.txt"));
}

#[test]
fn db15k_shaped_counts() {
    // 12842 entities / 279 relations / 79222 train triples, valid 9902, test 9904.
    let (ne, nr, ntrain, nvalid, ntest) = (12842usize, 279usize, 79222usize, 9902usize, 9904usize);
    let mut train = String::new();
    let mut used = std::collections::HashSet::new();
    let mut k = 0usize;
    let mut emit = |buf: &mut String, count: usize, used: &mut std::collections::HashSet<(usize, usize, usize)>| {
        let mut n = 0;
        while n < count {
            // first 12842 train triples introduce every entity in order
            let h = k % ne;
            let t = (k * 7919 + 13) % ne;
            let r = (k / ne + k) % nr;
            k += 1;
            if used.insert((h, r, t)) {
                buf.push_str(&format!("ent{h}\trel{r}\tent{t}\n"));
                n += 1;
            }
        }
    };
    emit(&mut train, ntrain, &mut used);
    let mut valid = String::new();
    emit(&mut valid, nvalid, &mut used);
    let mut test = String::new();
    emit(&mut test, ntest, &mut used);
    let dir = tempfile::tempdir().unwrap();
    let p = paths(dir.path(), &train, &valid, &test);
    let kg = load_graph(&p, false).unwrap();
    assert_eq!(kg.num_entities(), 12842);
    assert_eq!(kg.num_relations(), 279);
    assert_eq!(kg.train.len(), 79222);
    assert_eq!(kg.valid.len(), 9902);
    assert_eq!(kg.test.len(), 9904);
}

#[test]
fn reserialized_splits_reload_with_same_indices() {
    let dir = tempfile::tempdir().unwrap();
    let p = paths(dir.path(), "x\tp\ty\ny\tq\tz\nz\tp\tx\n", "x\tq\tz\n", "y\tp\tx\n");
    let kg = load_graph(&p, false).unwrap();
    let out = tempfile::tempdir().unwrap();
    let p2 = kg.save_splits(out.path()).unwrap();
    let kg2 = load_graph(&p2, false).unwrap();
    assert_eq!(kg, kg2);
}

#[test]
fn vocab_dump_lists_every_id() {
    let kg = KnowledgeGraph::from_indexed(3, 2, vec![Triple::new(0, 1, 2)], vec![], vec![]);
    let dir = tempfile::tempdir().unwrap();
    kg.dump_vocab(dir.path()).unwrap();
    let ents = std::fs::read_to_string(dir.path().join("entities.tsv")).unwrap();
    assert_eq!(ents, "0\te0\n1\te1\n2\te2\n");
    let rels = std::fs::read_to_string(dir.path().join("relations.tsv")).unwrap();
    assert_eq!(rels, "0\tr0\n1\tr1\n");
}

fn toy_graph() -> KnowledgeGraph {
    let dir = tempfile::tempdir().unwrap();
    let p = paths(dir.path(), "a\tr\tb\nb\tr\tc\n", "", "");
    load_graph(&p, false).unwrap()
}

#[test]
fn modality_coverage_marks_missing_entities() {
    let kg = toy_graph();
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "img.txt", "a\t1.0,2.0\nc\t0.5,-1.5\n");
    let t = load_modality(&p, "image", &kg).unwrap();
    assert_eq!(t.dim, 2);
    assert!((t.coverage() - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(t.get(0), Some(&[1.0f32, 2.0][..]));
    assert_eq!(t.get(1), None);
    assert_eq!(t.get(2), Some(&[0.5f32, -1.5][..]));
}

#[test]
fn modality_inconsistent_lengths_are_a_format_error() {
    let kg = toy_graph();
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "img.txt", "a\t1,2,3,4\nb\t1,2,3,4,5\n");
    match load_modality(&p, "image", &kg) {
        Err(DataError::Format { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected format error, got {other:?}"),
    }
}

#[test]
fn modality_unknown_entities_are_listed() {
    let kg = toy_graph();
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "txt.txt", "a\t1\nq\t2\nw\t3\n");
    match load_modality(&p, "text", &kg) {
        Err(DataError::UnknownEntities { ids, .. }) => assert_eq!(ids, vec!["q", "w"]),
        other => panic!("expected unknown entities, got {other:?}"),
    }
}

#[test]
fn mkg_w_shaped_image_coverage() {
    // 14463 of 15000 entities carry an image vector.
    let mut table = ModalityFeatureTable::new("image", 1, 15000);
    for e in 0..14463 {
        table.set(e, vec![e as f32]);
    }
    assert!((table.coverage() - 0.9642).abs() < 5e-5);
}

#[test]
fn filter_index_examples() {
    let idx = FilterIndex::from_triples([Triple::new(0, 0, 1), Triple::new(0, 0, 2)]);
    let tails: BTreeSet<usize> = idx.true_tails(0, 0).unwrap().iter().copied().collect();
    assert_eq!(tails, BTreeSet::from([1, 2]));
    assert!(idx.true_tails(1, 0).is_none());
    assert!(idx.true_heads(0, 0).is_none());
    assert_eq!(idx.len(), 2);

    let empty = KnowledgeGraph::from_indexed(0, 0, vec![], vec![], vec![]);
    let idx = FilterIndex::build(&empty);
    assert!(idx.is_empty());
}

#[test]
fn loaded_structures_are_shareable_across_threads() {
    fn check<T: Send + Sync>() {}
    check::<KnowledgeGraph>();
    check::<ModalityFeatureTable>();
    check::<FilterIndex>();
}

proptest! {
    #[test]
    fn filter_index_agrees_with_linear_scan(
        triples in prop::collection::vec((0usize..6, 0usize..3, 0usize..6), 0..30),
        queries in prop::collection::vec((0usize..6, 0usize..3, 0usize..6), 20),
    ) {
        let uniq: BTreeSet<(usize, usize, usize)> = triples.into_iter().collect();
        let all: Vec<Triple> = uniq.iter().map(|&(h, r, t)| Triple::new(h, r, t)).collect();
        let n = all.len();
        let kg = KnowledgeGraph::from_indexed(6, 3, all[..n / 2].to_vec(), all[n / 2..n * 3 / 4].to_vec(), all[n * 3 / 4..].to_vec());
        let idx = FilterIndex::build(&kg);
        prop_assert_eq!(idx.len(), n);
        for (h, r, t) in queries {
            let q = Triple::new(h, r, t);
            prop_assert_eq!(idx.contains(&q), all.contains(&q));
            let scan_tails: BTreeSet<usize> = all.iter().filter(|x| x.head == h && x.relation == r).map(|x| x.tail).collect();
            let got: BTreeSet<usize> = idx.true_tails(h, r).map(|s| s.iter().copied().collect()).unwrap_or_default();
            prop_assert_eq!(got, scan_tails);
            let scan_heads: BTreeSet<usize> = all.iter().filter(|x| x.tail == t && x.relation == r).map(|x| x.head).collect();
            let got: BTreeSet<usize> = idx.true_heads(r, t).map(|s| s.iter().copied().collect()).unwrap_or_default();
            prop_assert_eq!(got, scan_heads);
        }
    }
}
