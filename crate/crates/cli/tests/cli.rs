use std::path::Path;
use std::process::{Command, Output};

fn neuralign(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neuralign"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(output: Output) -> Output {
    assert!(
        output.status.success(),
        "exit {:?}\nstderr: {}",
        output.status.code(),
        String::from_utf8_lossy(&output.stderr)
    );
    output
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// synth, train and eval in `root`; returns the report bytes.
fn pipeline(root: &Path) -> Vec<u8> {
    ok(neuralign(
        root,
        &[
            "synth",
            "--modality",
            "fmri:16",
            "--subjects",
            "2",
            "--stimuli",
            "200",
            "--test",
            "40",
            "--classes",
            "10",
            "--seed",
            "3",
        ],
    ));
    let manifest = root.join("fmri/manifest.json");
    let run = root.join("run");
    ok(neuralign(
        &run,
        &[
            "train",
            "--manifest",
            path(&manifest),
            "--arch",
            "compact",
            "--epochs",
            "300",
            "--seed",
            "7",
        ],
    ));
    assert!(run.join("loss_curve.csv").is_file());
    let checkpoint = run.join("checkpoint");
    ok(neuralign(
        &run,
        &[
            "--format",
            "json",
            "eval",
            "--checkpoint",
            path(&checkpoint),
            "--manifest",
            path(&manifest),
        ],
    ));
    std::fs::read(run.join("report.json")).unwrap()
}

#[test]
fn noiseless_pipeline_decodes_perfectly_and_reproduces() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = pipeline(a.path());
    let report: serde_json::Value = serde_json::from_slice(&first).unwrap();
    let decoding = &report["decoding"][0];
    let top1 = decoding["reports"]
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["metric"] == "top1_accuracy")
        .unwrap();
    assert_eq!(top1["value"], 1.0);

    // output paths only appear in the run record
    assert_eq!(first, pipeline(b.path()));
    assert_eq!(
        std::fs::read(a.path().join("run/checkpoint/architecture.json")).unwrap(),
        std::fs::read(b.path().join("run/checkpoint/architecture.json")).unwrap()
    );
}

#[test]
fn missing_manifest_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let output = neuralign(&out, &["train", "--manifest", path(&dir.path().join("absent.json"))]);
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("absent.json"));
    assert!(!out.exists());
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let output = neuralign(dir.path(), &["synth", "--modality", "fmri:16", "--bogus"]);
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn bad_modality_shape_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let output = neuralign(dir.path(), &["synth", "--modality", "fmri:4x4"]);
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn decode_lists_k_hits_per_sample() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ok(neuralign(
        root,
        &[
            "synth",
            "--modality",
            "eeg:4x4",
            "--subjects",
            "1",
            "--stimuli",
            "30",
            "--test",
            "6",
            "--classes",
            "3",
        ],
    ));
    let manifest = root.join("eeg/manifest.json");
    ok(neuralign(
        root,
        &[
            "train",
            "--manifest",
            path(&manifest),
            "--arch",
            "compact",
            "--epochs",
            "2",
        ],
    ));
    let checkpoint = root.join("checkpoint");
    let output = ok(neuralign(
        root,
        &[
            "--format",
            "json",
            "decode",
            "--checkpoint",
            path(&checkpoint),
            "--manifest",
            path(&manifest),
            "--k",
            "3",
        ],
    ));
    let rows: Vec<serde_json::Value> = serde_json::from_slice(&output.stdout).unwrap();
    assert_eq!(rows.len(), 6 * 3);
    assert_eq!(
        rows,
        serde_json::from_slice::<Vec<serde_json::Value>>(&std::fs::read(root.join("decode-hits.json")).unwrap())
            .unwrap()
    );

    let output = neuralign(
        root,
        &[
            "decode",
            "--checkpoint",
            path(&checkpoint),
            "--manifest",
            path(&manifest),
            "--k",
            "0",
        ],
    );
    assert_eq!(output.status.code(), Some(2));
}
