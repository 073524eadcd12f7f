//! Files produced by an external embedding exporter: hand-assembled
//! containers and manifests must load unchanged.

use std::fs;
use std::path::Path;

use neuralign::dataset::Split;
use neuralign::datastore::{load_dataset, load_stimulus_table, read_tensor};
use neuralign::kernel::DType;
use neuralign::Error;

fn container_f32(values: &[f32]) -> Vec<u8> {
    let mut out = b"NALN".to_vec();
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn write_export(dir: &Path, count: usize, width: usize, declared: usize) {
    fs::create_dir_all(dir.join("embeddings")).unwrap();
    let mut rows = Vec::new();
    for i in 0..count {
        let values: Vec<f32> = (0..width).map(|j| ((i * width + j) as f32).sin() + 0.1).collect();
        fs::write(dir.join(format!("embeddings/img_{i:03}.naln")), container_f32(&values)).unwrap();
        rows.push(format!(
            r#"{{"stimulus_id": "img_{i:03}", "class_label": "c{}", "embedding": "embeddings/img_{i:03}.naln"}}"#,
            i % 3
        ));
    }
    let manifest = format!(
        r#"{{"format_version": 1, "embed_dim": {declared}, "metadata": {{"model": "vit-b-32"}}, "stimuli": [{}]}}"#,
        rows.join(", ")
    );
    fs::write(dir.join("manifest.json"), manifest).unwrap();
}

#[test]
fn exported_stimulus_table_validates() {
    let tmp = tempfile::tempdir().unwrap();
    write_export(tmp.path(), 12, 8, 8);
    let (d, stimuli) = load_stimulus_table(tmp.path().join("manifest.json")).unwrap();
    assert_eq!(d, 8);
    assert_eq!(stimuli.len(), 12);
    assert_eq!(stimuli[4].class_label.as_deref(), Some("c1"));
    assert_eq!(stimuli[0].embedding.dtype(), DType::F32);
    assert_eq!(stimuli[0].embedding.data()[0], (0.0f32.sin() + 0.1) as f64);
}

#[test]
fn declared_width_mismatch_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    write_export(tmp.path(), 10, 8, 16);
    match load_stimulus_table(tmp.path().join("manifest.json")) {
        Err(Error::InvalidManifest(p)) => assert_eq!(p.len(), 10),
        other => panic!("expected manifest error, got {other:?}"),
    }
}

#[test]
fn hand_written_dataset_manifest_loads() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_export(dir, 4, 3, 3);
    for i in 0..4 {
        fs::write(dir.join(format!("n{i}.naln")), container_f32(&[i as f32, 1.0])).unwrap();
    }
    let samples: Vec<String> = (0..4)
        .map(|i| {
            format!(
                r#"{{"sample_id": "n{i}", "subject_id": "s1", "tensor": "n{i}.naln", "stimulus_id": "img_{i:03}", "split": "{}"}}"#,
                if i < 3 { "train" } else { "test" }
            )
        })
        .collect();
    let stimuli = fs::read_to_string(dir.join("manifest.json")).unwrap();
    let stimuli = &stimuli[stimuli.find("\"stimuli\"").unwrap()..];
    let manifest = format!(
        r#"{{"modality": "fmri", "embed_dim": 3, "input_shape": [2], "subjects": ["s1"], "samples": [{}], {stimuli}"#,
        samples.join(", ")
    );
    fs::write(dir.join("paired.json"), manifest).unwrap();
    let ds = load_dataset(dir.join("paired.json")).unwrap();
    assert_eq!(ds.samples().len(), 4);
    assert_eq!(ds.split(Split::Test)[0].stimulus_id, "img_003");
    assert_eq!(ds.samples()[2].features.data(), &[2.0, 1.0]);
}

#[test]
fn container_layout_is_little_endian() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("t.naln");
    let mut bytes = b"NALN".to_vec();
    for v in [1u32, 1, 2] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for d in [2u64, 1] {
        bytes.extend_from_slice(&d.to_le_bytes());
    }
    for v in [0.25f64, -3.0] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&path, &bytes).unwrap();
    let t = read_tensor(&path).unwrap();
    assert_eq!(t.shape(), &[2, 1]);
    assert_eq!(t.data(), &[0.25, -3.0]);
}
