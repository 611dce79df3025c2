//! Preprocessing into patches, manifests on disk, and directory evaluation.

use std::fs;

use egmt::data_pipeline::{
    crop_sliding, load_dataset, load_gray, preprocess, save_gray_png, DatasetManifest,
};
use egmt::entity_ingest::{load_annotation, serialize, LabelVocabulary};
use egmt::fixtures;
use egmt::metrics::{evaluate_directory, fusion_metrics, MetricReport, MetricsConfig, FUSION_COLUMNS};
use egmt::Error;

#[test]
fn preprocess_writes_a_loadable_patch_dataset() {
    let vocab = LabelVocabulary::default_vocabulary();
    let source = DatasetManifest::load(&fixtures::shipped_manifest(448)).unwrap();
    let originals = load_dataset(&source, &vocab).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let patches = preprocess(&source, dir.path(), 224, 224).unwrap();
    assert_eq!(patches.entries.len(), 4 * fixtures::PAIRS);

    let path = dir.path().join("manifest.json");
    patches.save(&path).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    assert!(!text.contains(dir.path().to_str().unwrap()), "paths are stored relative");
    let reloaded = DatasetManifest::load(&path).unwrap();
    assert_eq!(reloaded, patches);

    let loaded = load_dataset(&reloaded, &vocab).unwrap();
    let expected: Vec<_> = originals.iter().flat_map(|s| crop_sliding(s, 224, 224).unwrap()).collect();
    assert_eq!(loaded.len(), expected.len());
    for (got, want) in loaded.iter().zip(&expected) {
        assert_eq!(got.id, want.id);
        assert_eq!(got.ir, want.ir);
        // Luma is recomputed from the same 8-bit RGB, so it matches exactly.
        assert_eq!(got.vi_y, want.vi_y);
        assert_eq!(got.label, want.label);
        assert_eq!(got.annotation, want.annotation);
    }
    let ann = &reloaded.entries[0].annotation_path;
    let doc = fs::read_to_string(ann).unwrap();
    assert_eq!(doc, serialize(&load_annotation(ann).unwrap()));
}

#[test]
fn manifest_with_a_missing_file_is_rejected_with_its_id() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = DatasetManifest::load(&fixtures::shipped_manifest(32)).unwrap();
    m.entries[2].vi_path = dir.path().join("nowhere.png");
    let err = m.validate().unwrap_err();
    assert!(err.to_string().contains("pair_2"), "{err}");
}

fn source_dirs() -> (std::path::PathBuf, std::path::PathBuf) {
    let root = fixtures::shipped_root().join("32");
    (root.join("ir"), root.join("vi"))
}

#[test]
fn directory_report_rows_and_mean() {
    let (ir_dir, vi_dir) = source_dirs();
    let fused = tempfile::tempdir().unwrap();
    let cfg = MetricsConfig::default();
    let mut expected = Vec::new();
    for k in [4, 1, 6] {
        let id = fixtures::pair_id(k);
        let ir = load_gray(&ir_dir.join(format!("{id}.png"))).unwrap();
        let vi = load_gray(&vi_dir.join(format!("{id}.png"))).unwrap();
        let f = ir.zip_map(&vi, f64::max).unwrap();
        save_gray_png(&fused.path().join(format!("{id}_fused.png")), &f).unwrap();
        let f = load_gray(&fused.path().join(format!("{id}_fused.png"))).unwrap();
        expected.push((id, fusion_metrics(&f, &ir, &vi, &cfg).unwrap().to_vec()));
    }
    expected.sort_by(|a, b| a.0.cmp(&b.0));
    fs::write(fused.path().join("notes.txt"), "not an image").unwrap();

    let report = evaluate_directory(fused.path(), &ir_dir, &vi_dir, &cfg).unwrap();
    assert_eq!(report.columns, FUSION_COLUMNS);
    assert_eq!(report.rows, expected);
    for c in 0..FUSION_COLUMNS.len() {
        let mean = expected.iter().map(|r| r.1[c]).sum::<f64>() / 3.0;
        assert!((report.mean[c] - mean).abs() < 1e-12);
    }
    let back = MetricReport::from_csv(&report.to_csv().unwrap()).unwrap();
    assert_eq!(back.rows.len(), 3);
}

#[test]
fn identical_triple_scores_perfect_ssim() {
    let (_, vi_dir) = source_dirs();
    let fused = tempfile::tempdir().unwrap();
    fs::copy(vi_dir.join("pair_5.png"), fused.path().join("pair_5.png")).unwrap();
    let report = evaluate_directory(fused.path(), &vi_dir, &vi_dir, &MetricsConfig::default()).unwrap();
    assert_eq!(report.rows.len(), 1);
    let ssim = report.column("SSIM").unwrap()[0];
    assert!((ssim - 1.0).abs() < 1e-9);
    assert_eq!(report.column("N_abf").unwrap()[0], 0.0);
    assert_eq!(report.column("PSNR").unwrap()[0], 100.0);
}

#[test]
fn empty_and_unmatched_directories() {
    let (ir_dir, vi_dir) = source_dirs();
    let fused = tempfile::tempdir().unwrap();
    let report = evaluate_directory(fused.path(), &ir_dir, &vi_dir, &MetricsConfig::default()).unwrap();
    assert!(report.is_empty());

    fs::copy(vi_dir.join("pair_0.png"), fused.path().join("stray_fused.png")).unwrap();
    match evaluate_directory(fused.path(), &ir_dir, &vi_dir, &MetricsConfig::default()) {
        Err(Error::MissingCounterpart { stem, .. }) => assert_eq!(stem, "stray"),
        other => panic!("{other:?}"),
    }
}
