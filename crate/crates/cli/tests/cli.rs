use std::path::Path;
use std::process::{Command, Output};

fn glioseg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glioseg"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn selftest_passes_and_detects_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let ok = glioseg(&["selftest", "--seeds", "2"], dir.path());
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stdout));
    let stdout = String::from_utf8_lossy(&ok.stdout);
    assert!(stdout.contains("grad conv3d") && stdout.contains("cube sphericity"));

    let bad = glioseg(&["selftest", "--seeds", "1", "--inject-fault", "conv3d"], dir.path());
    assert_eq!(code(&bad), 1);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("grad conv3d"));

    let unknown = glioseg(&["selftest", "--inject-fault", "nope"], dir.path());
    assert_eq!(code(&unknown), 4);
}

#[test]
fn configuration_errors_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let typo = glioseg(&["preprocess", "--set", "train.epoch=3"], dir.path());
    assert_eq!(code(&typo), 4);
    assert!(String::from_utf8_lossy(&typo.stderr).contains("epoch"));
    let mismatch = glioseg(&["preprocess", "--set", "preprocess.target_dims=[16,16,16]"], dir.path());
    assert_eq!(code(&mismatch), 4);
    std::fs::write(dir.path().join("cfg.json"), "{\"seed\": \"x\"}").unwrap();
    assert_eq!(code(&glioseg(&["preprocess", "--config", "cfg.json"], dir.path())), 4);
}

#[test]
fn missing_inputs_and_empty_datasets() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("empty")).unwrap();
    let empty = glioseg(&["preprocess", "--dataset-root", "empty", "--output-root", "out"], dir.path());
    assert_eq!(code(&empty), 2);
    let absent = glioseg(&["preprocess", "--dataset-root", "nowhere", "--output-root", "out"], dir.path());
    assert_eq!(code(&absent), 4);
    for stage in ["train", "segment", "evaluate", "radiomics", "classify"] {
        let o = glioseg(&[stage, "--output-root", "fresh"], dir.path());
        assert_eq!(code(&o), 3, "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn phantom_dataset_preprocesses_with_skips() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&glioseg(&["phantom", "--out", "data", "--cases", "3", "--seed", "2"], dir.path())), 0);
    // drop one channel of the last case
    let case = dir.path().join("data/case003");
    let victim = std::fs::read_dir(&case)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_string_lossy().contains("_t2."))
        .unwrap();
    std::fs::remove_file(victim).unwrap();
    let o = glioseg(&["preprocess", "--dataset-root", "data", "--output-root", "out"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/preprocess/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["cases"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["skipped"][0]["case_id"], "case003");
    assert_eq!(manifest["target_dims"], serde_json::json!([32, 32, 32]));
    let seg = glioseg(&["segment", "--output-root", "out"], dir.path());
    assert_eq!(code(&seg), 3);
    assert!(String::from_utf8_lossy(&seg.stderr).contains("checkpoint"));
    for id in ["case001", "case002"] {
        for f in ["image.vxl", "labels.vxl", "infer_image.vxl", "infer_labels.vxl"] {
            assert!(dir.path().join("out/preprocess").join(id).join(f).is_file());
        }
    }
}
