use std::fs;

use gcgp_core::synthetic::{two_cliques, BlockModel};
use gcgp_core::{GcgpError, Graph};

#[test]
fn toy_fixture_round_trips() {
    let g = two_cliques(4);
    let dir = tempfile::tempdir().unwrap();
    g.save(dir.path()).unwrap();
    let back = Graph::load(dir.path()).unwrap();
    assert_eq!(back.features(), g.features());
    assert_eq!(back.adjacency(), g.adjacency());
    assert_eq!(back.labels(), g.labels());
    assert_eq!(back.splits(), g.splits());

    let again = tempfile::tempdir().unwrap();
    back.save(again.path()).unwrap();
    for file in ["features.csv", "edges.csv", "labels.csv", "split.json"] {
        assert_eq!(
            fs::read(dir.path().join(file)).unwrap(),
            fs::read(again.path().join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn block_model_round_trips_losslessly() {
    let g = BlockModel { n: 300, d: 40, classes: 3, val: 50, test: 100, ..Default::default() }.generate();
    let dir = tempfile::tempdir().unwrap();
    g.save(dir.path()).unwrap();
    let back = Graph::load(dir.path()).unwrap();
    assert_eq!(back.features(), g.features());
    assert_eq!(back.adjacency().edges(), g.adjacency().edges());
    assert_eq!(back.num_classes(), 3);
}

fn write_dataset(features: &str, edges: &str, labels: &str, split: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("features.csv"), features).unwrap();
    fs::write(dir.path().join("edges.csv"), edges).unwrap();
    fs::write(dir.path().join("labels.csv"), labels).unwrap();
    fs::write(dir.path().join("split.json"), split).unwrap();
    dir
}

const SPLIT: &str = r#"{"train":[0],"val":[],"test":[1,2]}"#;

#[test]
fn small_directory_loads() {
    let dir = write_dataset("1,0\n0,1\n1,1\n", "0,1\n1,2\n", "0\n1\n1\n", SPLIT);
    let g = Graph::load(dir.path()).unwrap();
    assert_eq!((g.num_nodes(), g.num_features(), g.num_classes()), (3, 2, 2));
    assert_eq!(g.adjacency().num_edges(), 2);
}

#[test]
fn malformed_directories_are_rejected() {
    let cases = [
        ("ragged rows", write_dataset("1,0\n0\n1,1\n", "0,1\n", "0\n1\n1\n", SPLIT)),
        ("bad number", write_dataset("1,x\n0,1\n1,1\n", "0,1\n", "0\n1\n1\n", SPLIT)),
        ("label count", write_dataset("1,0\n0,1\n1,1\n", "0,1\n", "0\n1\n", SPLIT)),
        ("edge out of range", write_dataset("1,0\n0,1\n1,1\n", "0,7\n", "0\n1\n1\n", SPLIT)),
        ("asymmetric listing", write_dataset("1,0\n0,1\n1,1\n", "0,1\n1,0\n1,2\n", "0\n1\n1\n", SPLIT)),
        ("split out of range", write_dataset("1,0\n0,1\n1,1\n", "0,1\n", "0\n1\n1\n", r#"{"train":[9],"val":[],"test":[1]}"#)),
        ("overlapping split", write_dataset("1,0\n0,1\n1,1\n", "0,1\n", "0\n1\n1\n", r#"{"train":[1],"val":[],"test":[1]}"#)),
    ];
    for (what, dir) in cases {
        let err = Graph::load(dir.path()).expect_err(what);
        assert!(!err.is_numerical(), "{what}: {err}");
    }
    let missing = tempfile::tempdir().unwrap();
    assert!(matches!(Graph::load(missing.path().join("nope")), Err(GcgpError::Validation(_))));
    fs::write(missing.path().join("features.csv"), "1\n").unwrap();
    assert!(Graph::load(missing.path()).is_err());
}
