use std::path::{Path, PathBuf};

use cytofm::cli::cli_main;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/toy")
}

fn run(args: &[&str]) -> i32 {
    cli_main(std::iter::once("cytofm").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn outputs(run_json: &Path) -> serde_json::Value {
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(run_json).unwrap()).unwrap();
    v["outputs"].clone()
}

fn preprocess(out: &Path) {
    let reg = fixture().join("datasets.json");
    assert_eq!(run(&["preprocess", "--registry", s(&reg), "--dataset", "toy", "--out", s(out)]), 0);
}

#[test]
fn pretrain_is_reproducible_from_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let patches = dir.path().join("patches");
    preprocess(&patches);
    let cfg = fixture().join("pretrain.json");
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let code = run(&["pretrain", "--corpus", s(&patches), "--config", s(&cfg), "--out", s(&out), "--seed", "7", "--steps", "3"]);
        assert_eq!(code, 0);
    }
    let (a, b) = (outputs(&dir.path().join("a/run.json")), outputs(&dir.path().join("b/run.json")));
    assert!(a.as_object().is_some_and(|o| !o.is_empty()));
    assert_eq!(a, b);
    let log = std::fs::read_to_string(dir.path().join("a/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn extract_writes_record_beside_store() {
    let dir = tempfile::tempdir().unwrap();
    let patches = dir.path().join("patches");
    preprocess(&patches);
    let cfg = fixture().join("pretrain.json");
    let ckpt = dir.path().join("ckpt");
    assert_eq!(run(&["pretrain", "--corpus", s(&patches), "--config", s(&cfg), "--out", s(&ckpt), "--steps", "0"]), 0);
    let store = dir.path().join("store");
    let labels = fixture().join("labels.csv");
    let code = run(&["extract", "--encoder", s(&ckpt.join("encoder")), "--patches", s(&patches), "--labels", s(&labels), "--out", s(&store)]);
    assert_eq!(code, 0);
    assert!(dir.path().join("store.run.json").is_file());
    let bags = cytofm::datasets::read_feature_store(&store).unwrap();
    assert_eq!(bags.len(), 24);
    assert!(bags.iter().all(|b| b.label.is_some()));
}

#[test]
fn missing_input_is_a_validation_error_and_corrupt_input_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let enc = dir.path().join("enc");
    let out = dir.path().join("out");
    let args = ["extract", "--encoder", s(&enc), "--patches", s(dir.path()), "--out", s(&out)];
    assert_eq!(run(&args), 1);
    std::fs::write(dir.path().join("enc.manifest.json"), b"{ not json").unwrap();
    assert_eq!(run(&args), 2);
}
