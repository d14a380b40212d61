use vlmir_data::{build_corpus, generate_toy_scenes, DegradationLabel, Split, SynthParams, TaskMixing};
use vlmir_eval::{evaluate_dataset, metrics, EvalError, ReportMetadata};

fn corpus(dir: &std::path::Path) -> vlmir_data::DatasetManifest {
    let gt = dir.join("scenes");
    generate_toy_scenes(&gt, "t", 5, 32, 3).unwrap();
    build_corpus(
        &gt,
        &[DegradationLabel::Noise],
        &SynthParams::default(),
        dir.join("corpus"),
        Split::Test,
        TaskMixing::Uniform,
    )
    .unwrap()
}

#[test]
fn restored_equal_to_gt_gives_perfect_scores() {
    let tmp = tempfile::tempdir().unwrap();
    let m = corpus(tmp.path());
    let restored = tmp.path().join("restored");
    std::fs::create_dir_all(&restored).unwrap();
    for r in &m.records {
        std::fs::copy(m.gt_path(r), restored.join(format!("{}.png", r.id))).unwrap();
    }
    let report = evaluate_dataset("gt", &m, &restored, &[], ReportMetadata::new()).unwrap();
    assert_eq!(report.per_image.len(), 5);
    assert_eq!(report.value("psnr"), Some(f64::INFINITY));
    assert_eq!(report.infinite_counts["psnr"], 5);
    assert!((report.value("ssim").unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn restored_equal_to_lq_reproduces_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    let m = corpus(tmp.path());
    let restored = tmp.path().join("restored");
    std::fs::create_dir_all(&restored).unwrap();
    let mut expected = 0.0;
    for r in &m.records {
        std::fs::copy(m.lq_path(r), restored.join(format!("{}.png", r.id))).unwrap();
        let lq = vlmir_data::ImageTensor::load_png(m.lq_path(r)).unwrap();
        let gt = vlmir_data::ImageTensor::load_png(m.gt_path(r)).unwrap();
        expected += metrics::psnr(&lq, &gt).unwrap();
    }
    let report = evaluate_dataset("lq", &m, &restored, &[], ReportMetadata::new()).unwrap();
    assert!((report.value("psnr").unwrap() - expected / 5.0).abs() < 1e-9);
}

#[test]
fn missing_restored_files_are_listed() {
    let tmp = tempfile::tempdir().unwrap();
    let m = corpus(tmp.path());
    let restored = tmp.path().join("restored");
    std::fs::create_dir_all(&restored).unwrap();
    let first = &m.records[0];
    std::fs::copy(m.gt_path(first), restored.join(format!("{}.png", first.id))).unwrap();
    match evaluate_dataset("x", &m, &restored, &[], ReportMetadata::new()) {
        Err(EvalError::MissingRestored(ids)) => assert_eq!(ids.len(), 4),
        other => panic!("expected missing-file error, got {other:?}"),
    }
}
