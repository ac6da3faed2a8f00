use std::fs;
use std::path::Path;

use crowdscope::config::{bundled_scenario, PipelineConfig, PipelineKind};
use crowdscope::dataset::{detection_rows_to_csv, DetectionRow};
use crowdscope::error::Error;
use crowdscope::pipeline::{run, run_large_scale, run_small_scale, RunOptions};
use crowdscope::report::ReportBundle;
use crowdscope::synth::{generate_synthetic, ActorSpec};
use crowdscope::tracking::TRACK_HEADER;

fn small(frames: usize, intervals: Vec<[usize; 2]>) -> PipelineConfig {
    let mut config = bundled_scenario(PipelineKind::SmallScale);
    let spec = config.test.synth.as_mut().unwrap();
    spec.frames = frames;
    spec.abnormal_intervals = intervals;
    config
}

fn sections(csv: &str) -> Vec<String> {
    let mut out: Vec<String> = csv
        .lines()
        .skip(1)
        .filter_map(|l| l.split(',').next().map(str::to_string))
        .collect();
    out.dedup();
    out
}

fn assert_same_bundle(a: &ReportBundle, b: &ReportBundle) {
    let names_a: Vec<&str> = a.names().collect();
    let names_b: Vec<&str> = b.names().collect();
    assert_eq!(names_a, names_b);
    for name in names_a {
        assert!(a.get(name) == b.get(name), "{name} differs");
    }
}

fn write_detections(path: &Path, rows: &[DetectionRow]) {
    fs::write(path, detection_rows_to_csv(rows)).unwrap();
}

#[test]
fn all_normal_video_reports_frame_metrics_only() {
    let result = run_small_scale(&small(30, vec![]), &RunOptions::default()).unwrap();
    assert!(result.verdicts.iter().all(|v| !v.is_abnormal));
    assert!(result.regions.is_empty());
    let m = &result.metrics;
    assert_eq!(m.get_f64("run", "regions_processed"), Some(0.0));
    assert_eq!(m.get_f64("frame", "tn"), Some(30.0));
    let found = sections(&m.to_csv());
    assert_eq!(found, vec!["run".to_string(), "frame".to_string()]);
    assert_eq!(result.bundle.get_str("tracks.csv"), Some(format!("{TRACK_HEADER}\n").as_str()));
}

#[test]
fn regions_come_only_from_gated_frames() {
    let result = run_small_scale(&small(40, vec![[12, 30]]), &RunOptions::default()).unwrap();
    assert!(!result.regions.is_empty());
    for r in &result.regions {
        assert!(result.verdicts[r.frame].is_abnormal, "region in ungated frame {}", r.frame);
    }
    let rows = result.bundle.get_str("regions.csv").unwrap().lines().count() - 1;
    assert_eq!(rows, result.regions.len());
    assert!(result.metrics.get("localization", "tp").is_some());
}

#[test]
fn resumed_run_reproduces_the_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let config = small(36, vec![[10, 25]]);
    let fresh = RunOptions { out: Some(dir.path().to_path_buf()), resume: false };
    let first = run_small_scale(&config, &fresh).unwrap();
    let stages = dir.path().join("stages");
    assert!(stages.join("features.csv").exists());

    let resume = RunOptions { out: Some(dir.path().to_path_buf()), resume: true };
    let second = run_small_scale(&config, &resume).unwrap();
    assert_same_bundle(&first.bundle, &second.bundle);

    // drop part of the cache: the missing stages are recomputed, the rest read back
    fs::remove_file(stages.join("features.csv")).unwrap();
    let flows: Vec<_> = fs::read_dir(stages.join("flows")).unwrap().collect();
    for entry in flows.into_iter().step_by(2) {
        fs::remove_file(entry.unwrap().path()).unwrap();
    }
    let third = run_small_scale(&config, &resume).unwrap();
    assert_same_bundle(&first.bundle, &third.bundle);
}

#[test]
fn stale_feature_cache_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = small(36, vec![[10, 25]]);
    let resume = RunOptions { out: Some(dir.path().to_path_buf()), resume: true };
    run_small_scale(&config, &resume).unwrap();
    let path = dir.path().join("stages/features.csv");
    let text = fs::read_to_string(&path).unwrap();
    let header = text.lines().next().unwrap();
    fs::write(&path, format!("{header}\n")).unwrap();
    let err = run_small_scale(&config, &resume).unwrap_err();
    assert!(matches!(err, Error::Stage { stage: "features", .. }), "{err}");
}

#[test]
fn empty_detection_file_gives_degenerate_report() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("none.csv");
    write_detections(&path, &[]);
    let mut config = bundled_scenario(PipelineKind::LargeScale);
    config.test.synth.as_mut().unwrap().frames = 20;
    config.models.detections = Some(path);
    let result = run_large_scale(&config, &RunOptions::default()).unwrap();
    assert!(result.detections.is_empty());
    assert!(result.records.is_empty());
    assert!(result.track_classes.is_empty());
    assert_eq!(result.metrics.get_f64("run", "degenerate"), Some(1.0));
    assert_eq!(result.bundle.get_str("tracks.csv"), Some(format!("{TRACK_HEADER}\n").as_str()));
}

#[test]
fn two_actors_with_perfect_detections_give_two_confirmed_tracks() {
    let mut config = bundled_scenario(PipelineKind::LargeScale);
    let spec = config.test.synth.as_mut().unwrap();
    spec.frames = 30;
    let keep: Vec<ActorSpec> = vec![spec.actors[0].clone(), spec.actors[2].clone()];
    spec.actors = keep;
    let truth = generate_synthetic(spec).unwrap();
    let rows: Vec<DetectionRow> = truth
        .ground_truth
        .iter()
        .flatten()
        .map(|gt| DetectionRow {
            video_id: "two".into(),
            frame: gt.frame,
            bbox: gt.bbox,
            class_label: None,
            confidence: 1.0,
            line: 0,
        })
        .collect();
    assert_eq!(rows.len(), 60);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("two.csv");
    write_detections(&path, &rows);
    config.models.detections = Some(path);

    let result = run_large_scale(&config, &RunOptions::default()).unwrap();
    assert_eq!(result.track_classes.len(), 2);
    assert!(result.track_classes.iter().all(|t| t.confirmed && t.detections == 30));
    assert!(result.detections.iter().all(|d| d.track_id.is_some()));
    assert_eq!(result.metrics.get_f64("run", "degenerate"), Some(0.0));
    assert_eq!(result.metrics.get_f64("track_per_frame", "precision"), Some(1.0));
    // only confirmed boxes are scored: each track is tentative for its first two frames
    assert_eq!(result.metrics.get_f64("track_per_frame", "tp"), Some(56.0));
    assert_eq!(result.metrics.get_f64("track_per_frame", "fn"), Some(4.0));
    assert_eq!(result.metrics.get_f64("track_per_track", "tp"), Some(2.0));
}

#[test]
fn missing_inputs_are_config_errors() {
    let mut config = small(20, vec![]);
    config.models.gate = Some("/nonexistent/gate.cssp".into());
    let err = run(&config, &RunOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert!(err.to_string().contains("/nonexistent/gate.cssp"));
    assert!(err.is_data_error());

    let mut config = small(20, vec![]);
    config.train = None;
    let err = run(&config, &RunOptions::default()).unwrap_err();
    match &err {
        Error::Stage { stage, source } => {
            assert_eq!(*stage, "gate");
            assert!(matches!(**source, Error::MissingModel(_)), "{source}");
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn corrupt_model_file_names_its_stage() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gate.cssp");
    fs::write(&path, b"not a model").unwrap();
    let mut config = small(20, vec![]);
    config.models.gate = Some(path);
    let err = run(&config, &RunOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Stage { stage: "gate", .. }), "{err}");
    assert!(err.to_string().starts_with("stage gate"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let err = PipelineConfig::from_toml("pipeline = \"small_scale\"\nsed = 3\n").unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    let err = PipelineConfig::from_toml("[flow]\nalfa = 1.0\n").unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn resolved_config_reparses_to_the_same_config() {
    let config = small(20, vec![[3, 8]]);
    let back = PipelineConfig::from_toml(&config.to_toml().unwrap()).unwrap();
    assert_eq!(back, config);
}
