use std::path::Path;

use parapath::data::{generate_synthetic, load_pairs, save_pairs, RetrievalSet, SynthSpec};

const GOLDEN: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/golden.jsonl");

fn spec() -> SynthSpec {
    SynthSpec { num_entities: 8, seed: 3, ..Default::default() }
}

#[test]
fn generator_output_is_pinned() {
    let corpus = generate_synthetic(&spec()).unwrap();
    let golden = load_pairs(Path::new(GOLDEN)).unwrap();
    assert_eq!(golden.len(), 3);
    assert_eq!(corpus.records[..3], golden[..]);
}

#[test]
fn saved_lines_match_the_fixture_bytes() {
    let corpus = generate_synthetic(&spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("pairs.jsonl");
    save_pairs(&corpus.records[..3], &out).unwrap();
    assert_eq!(std::fs::read_to_string(out).unwrap(), std::fs::read_to_string(GOLDEN).unwrap());
}

#[test]
fn splits_partition_the_corpus_by_group() {
    let corpus = generate_synthetic(&SynthSpec { num_entities: 64, ..Default::default() }).unwrap();
    let (train, eval) = (corpus.train(), corpus.eval());
    assert_eq!(train.len() + eval.len(), corpus.records.len());
    assert!(!train.is_empty() && !eval.is_empty());
    let set = RetrievalSet::from_records(&eval).unwrap();
    assert_eq!(set.queries.len(), eval.len());
    assert!(set.gold.iter().all(|&g| g < set.targets.len()));
}
