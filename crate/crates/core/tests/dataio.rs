use std::fs;

use dfsp_core::data::{
    generate, load_embeddings, load_manifest, write_manifest, Manifest, SampleRecord, Split,
    SplitPairs, SyntheticSpec,
};
use dfsp_core::diff::Matrix;
use dfsp_core::space::World;
use dfsp_core::Error;
use proptest::prelude::*;

fn small() -> Manifest {
    generate(&SyntheticSpec {
        states: 3,
        objects: 3,
        dim: 4,
        samples_per_pair: 2,
        unseen_fraction: 0.3,
        seed: 5,
        ..SyntheticSpec::default()
    })
    .unwrap()
    .0
}

#[test]
fn round_trip_is_identical() {
    let man = small();
    let dir = tempfile::tempdir().unwrap();
    write_manifest(&man, dir.path()).unwrap();
    let back = load_manifest(dir.path()).unwrap();
    assert_eq!(back, man);
    assert_eq!(
        back.space(World::Closed).unwrap(),
        man.space(World::Closed).unwrap()
    );
    assert_eq!(back.split_hashes(), man.split_hashes());

    let again = tempfile::tempdir().unwrap();
    write_manifest(&back, again.path()).unwrap();
    for f in [
        "states.txt",
        "objects.txt",
        "pairs_train.txt",
        "pairs_test_unseen.txt",
        "index.csv",
        "features.bin",
    ] {
        assert_eq!(
            fs::read(dir.path().join(f)).unwrap(),
            fs::read(again.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn large_counts_load() {
    let states: Vec<String> = (0..115).map(|i| format!("st{i}")).collect();
    let objects: Vec<String> = (0..245).map(|i| format!("ob{i}")).collect();
    // k mod 115 and k mod 245 jointly identify k below lcm = 5635.
    let train: Vec<_> = (0..1262).map(|k| (k % 115, k % 245)).collect();
    let records = vec![
        SampleRecord {
            id: "a".into(),
            pair: train[0],
            split: Split::Train,
        },
        SampleRecord {
            id: "b".into(),
            pair: train[1],
            split: Split::Train,
        },
    ];
    let feats = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
    let man = Manifest::new(
        states,
        objects,
        SplitPairs {
            train,
            ..SplitPairs::default()
        },
        records,
        feats,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_manifest(&man, dir.path()).unwrap();
    let space = load_manifest(dir.path())
        .unwrap()
        .space(World::Closed)
        .unwrap();
    assert_eq!(
        (
            space.n_states(),
            space.n_objects(),
            space.seen_pairs().len()
        ),
        (115, 245, 1262)
    );
}

fn write_small() -> (tempfile::TempDir, Manifest) {
    let man = small();
    let dir = tempfile::tempdir().unwrap();
    write_manifest(&man, dir.path()).unwrap();
    (dir, man)
}

fn expect_parse(dir: &std::path::Path, file: &str, line: usize) {
    match load_manifest(dir) {
        Err(Error::Parse { path, line: l, .. }) => {
            assert!(path.ends_with(file), "{path}");
            assert_eq!(l, line);
        }
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn train_sample_with_unseen_pair_is_rejected() {
    let (dir, man) = write_small();
    let (s, o) = man.pairs().test_unseen[0];
    let index = fs::read_to_string(dir.path().join("index.csv")).unwrap();
    let mut lines: Vec<String> = index.lines().map(String::from).collect();
    let f: Vec<&str> = lines[1].split(',').collect();
    lines[1] = format!("{},{},{s},{o},train", f[0], f[1]);
    fs::write(dir.path().join("index.csv"), lines.join("\n")).unwrap();
    expect_parse(dir.path(), "index.csv", 2);
}

#[test]
fn malformed_files_report_their_line() {
    let (dir, _) = write_small();
    let p = dir.path().join("pairs_train.txt");
    let orig = fs::read_to_string(&p).unwrap();
    fs::write(&p, format!("{orig}s0 nosuchobject\n")).unwrap();
    expect_parse(dir.path(), "pairs_train.txt", orig.lines().count() + 1);
    fs::write(&p, &orig).unwrap();

    let idx = dir.path().join("index.csv");
    let orig = fs::read_to_string(&idx).unwrap();
    fs::write(&idx, orig.replacen("sample_id", "id", 1)).unwrap();
    expect_parse(dir.path(), "index.csv", 1);
    let mut lines: Vec<String> = orig.lines().map(String::from).collect();
    let f: Vec<String> = lines[3].split(',').map(String::from).collect();
    lines[3] = format!("{},{},{},{},{}", f[0], 3, f[2], f[3], f[4]);
    fs::write(&idx, lines.join("\n")).unwrap();
    expect_parse(dir.path(), "index.csv", 4);
    lines[3] = format!("{},{},{},{},{}", f[0], 0, f[2], f[3], f[4]);
    fs::write(&idx, lines.join("\n")).unwrap();
    expect_parse(dir.path(), "index.csv", 4);
}

#[test]
fn truncated_features_are_rejected() {
    let (dir, _) = write_small();
    let p = dir.path().join("features.bin");
    let mut bytes = fs::read(&p).unwrap();
    bytes.truncate(bytes.len() - 3);
    fs::write(&p, bytes).unwrap();
    assert!(matches!(load_manifest(dir.path()), Err(Error::Manifest(_))));
}

#[test]
fn non_finite_feature_is_rejected() {
    let (dir, _) = write_small();
    let p = dir.path().join("features.bin");
    let mut bytes = fs::read(&p).unwrap();
    bytes[8..16].copy_from_slice(&f64::NAN.to_le_bytes());
    fs::write(&p, bytes).unwrap();
    expect_parse(dir.path(), "index.csv", 2);
}

#[test]
fn seen_lists_must_be_train_pairs() {
    let man = small();
    let mut pairs = man.pairs().clone();
    pairs.test_seen.push(pairs.test_unseen[0]);
    let r = Manifest::new(
        man.states().to_vec(),
        man.objects().to_vec(),
        pairs,
        man.records().to_vec(),
        man.features().clone(),
    );
    assert!(matches!(r, Err(Error::Manifest(_))));
}

#[test]
fn noiseless_samples_coincide() {
    let (man, _) = generate(&SyntheticSpec {
        noise: 0.0,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let (x, labels) = man.split_data(Split::Train).unwrap();
    for i in 1..labels.len() {
        if labels[i] == labels[i - 1] {
            assert_eq!(x.row(i), x.row(i - 1));
        }
    }
}

#[test]
fn same_seed_same_data() {
    let spec = SyntheticSpec {
        seed: 11,
        ..SyntheticSpec::default()
    };
    assert_eq!(generate(&spec).unwrap().0, generate(&spec).unwrap().0);
    let other = SyntheticSpec {
        seed: 12,
        ..spec.clone()
    };
    assert_ne!(generate(&other).unwrap().0, generate(&spec).unwrap().0);
}

#[test]
fn nearest_centroid_oracle_labels_test_set() {
    let (man, lat) = generate(&SyntheticSpec::default()).unwrap();
    let space = man.space(World::Closed).unwrap();
    let cands = space.test_pairs();
    let centroids: Vec<Vec<f64>> = cands.iter().map(|&p| lat.centroid(p)).collect();
    let (x, labels) = man.split_data(Split::Test).unwrap();
    let mut hits = 0;
    for (row, truth) in x.row_iter().zip(&labels) {
        let best = (0..cands.len())
            .min_by(|&a, &b| {
                let d = |c: &Vec<f64>| c.iter().zip(row).map(|(u, v)| (u - v).powi(2)).sum::<f64>();
                d(&centroids[a]).total_cmp(&d(&centroids[b]))
            })
            .unwrap();
        hits += usize::from(cands[best] == *truth);
    }
    let acc = hits as f64 / labels.len() as f64;
    assert!(acc >= 0.99, "nearest-centroid accuracy {acc}");
}

#[test]
fn invalid_specs_are_rejected() {
    for spec in [
        SyntheticSpec {
            states: 1,
            ..SyntheticSpec::default()
        },
        SyntheticSpec {
            unseen_fraction: 0.0,
            ..SyntheticSpec::default()
        },
        SyntheticSpec {
            unseen_fraction: 1.0,
            ..SyntheticSpec::default()
        },
        SyntheticSpec {
            noise: -1.0,
            ..SyntheticSpec::default()
        },
        SyntheticSpec {
            states: 2,
            objects: 2,
            unseen_fraction: 0.9,
            ..SyntheticSpec::default()
        },
    ] {
        assert!(matches!(generate(&spec), Err(Error::Config(_))), "{spec:?}");
    }
}

#[test]
fn embeddings_load_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("vec.txt");
    fs::write(&p, "wet 1 0\nold 0 1\ndog 0.5 0.5\nextra 9 9\n").unwrap();
    let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let (s, o) = load_embeddings(&p, &names(&["old", "wet"]), &names(&["dog"])).unwrap();
    assert_eq!(s.row(0), &[0.0, 1.0]);
    assert_eq!(o.row(0), &[0.5, 0.5]);
    assert!(matches!(
        load_embeddings(&p, &names(&["cat"]), &names(&["dog"])),
        Err(Error::Manifest(_))
    ));
    fs::write(&p, "wet 1 0\nold 0\n").unwrap();
    assert!(matches!(
        load_embeddings(&p, &names(&["wet"]), &names(&["old"])),
        Err(Error::Parse { line: 2, .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn generated_spaces_are_valid(n in 2usize..8, m in 2usize..8, frac in 0.05f64..0.7, seed in 0u64..1000) {
        let spec = SyntheticSpec { states: n, objects: m, dim: 3, samples_per_pair: 1, unseen_fraction: frac, seed, ..SyntheticSpec::default() };
        match generate(&spec) {
            Ok((man, _)) => {
                let space = man.space(World::Open).unwrap();
                prop_assert_eq!(space.test_pairs().len(), n * m);
                prop_assert!(!man.pairs().test_unseen.is_empty());
                for i in man.split_indices(Split::Train) {
                    prop_assert!(space.is_seen(man.records()[i].pair));
                }
            }
            Err(e) => prop_assert!(matches!(e, Error::Config(_))),
        }
    }
}
