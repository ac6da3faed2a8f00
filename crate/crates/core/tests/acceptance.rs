//! Acceptance suite. Runs without the libtest harness so every criterion prints one
//! PASS/FAIL line regardless of output capture.

mod common;

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use crowdscope::assignment::hungarian;
use crowdscope::config::{bundled_scenario, PipelineKind};
use crowdscope::dataset::{detection_rows_to_csv, DetectionRow};
use crowdscope::eval::{classification_metrics, match_detections, roc_auc, ConfusionCounts};
use crowdscope::flow::{horn_schunck, HsParams};
use crowdscope::forest::{rf_train, ForestParams, TrainingSet};
use crowdscope::geometry::{iou, BBox};
use crowdscope::pipeline::{run_large_scale, run_small_scale, RunOptions};
use crowdscope::spatial::Detection;
use crowdscope::synth::{generate_synthetic, textured_frame};
use crowdscope::tracking::{KalmanState, Track, TrackStatus, Tracker, TrackerParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn c1_optical_flow() -> Outcome {
    let prev = textured_frame(128, 128, 42, 8.0, 0.6, 0.0, 0.0, 0).map_err(|e| e.to_string())?;
    let next = textured_frame(128, 128, 42, 8.0, 0.6, 1.0, 0.0, 1).map_err(|e| e.to_string())?;
    let params = HsParams {
        alpha: 1.0,
        iterations: 200,
        ..HsParams::default()
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| e.to_string())?;
    let start = Instant::now();
    let flow = pool
        .install(|| horn_schunck(&prev, &next, &params))
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let epe = mean_endpoint_error(&flow, (1.0, 0.0), 8);
    let residual = warp_residual(&prev, &next, &flow, 8);
    ensure(epe < 0.2, || format!("endpoint error {epe:.4}"))?;
    ensure(residual < 0.02, || format!("warp residual {residual:.5}"))?;
    ensure(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "epe {epe:.4} px, residual {residual:.5}, {:.2}s on 1 thread",
        elapsed.as_secs_f64()
    ))
}

fn c2_metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..1000 {
        let mut draw = || {
            if rng.random_bool(0.15) {
                0
            } else {
                rng.random_range(0..1000u64)
            }
        };
        let c = ConfusionCounts::new(draw(), draw(), draw(), draw());
        if c.total() == 0 {
            ensure(classification_metrics(&c).is_err(), || {
                "all-zero counts accepted".into()
            })?;
            continue;
        }
        let m = classification_metrics(&c).map_err(|e| e.to_string())?;
        let got = (m.accuracy, m.precision, m.recall, m.f1);
        let want = metrics_oracle(c.tp, c.tn, c.fp, c.fn_);
        ensure(got == want, || format!("tuple {i} {c:?}: {got:?} != {want:?}"))?;
    }
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        let n = rng.random_range(2..60);
        // coarse scores so ties occur
        let levels = rng.random_range(2..20);
        let mut scores: Vec<(f64, bool)> = (0..n)
            .map(|_| (rng.random_range(0..levels) as f64 / levels as f64, rng.random_bool(0.5)))
            .collect();
        scores[0].1 = true;
        scores[1].1 = false;
        let auc = roc_auc(&scores).map_err(|e| e.to_string())?.auc;
        let oracle = mann_whitney(&scores);
        worst = worst.max((auc - oracle).abs());
        ensure((auc - oracle).abs() <= 1e-9, || {
            format!("score set {i}: auc {auc} != mann-whitney {oracle}")
        })?;
    }
    Ok(format!(
        "1000 count tuples exact, 200 score sets max |auc - U| = {worst:.1e}"
    ))
}

fn random_grid_box(rng: &mut ChaCha8Rng) -> BBox {
    let q = |rng: &mut ChaCha8Rng, lo: i32, hi: i32| rng.random_range(lo..hi) as f64 * 0.25;
    BBox::new(q(rng, 0, 64), q(rng, 0, 64), q(rng, 1, 40), q(rng, 1, 40))
}

/// Hand-enumerated layouts: predictions (box, confidence), ground truths, expected (tp, fp, fn).
fn curated_matching_cases() -> Vec<(Vec<(BBox, f64)>, Vec<BBox>, (u64, u64, u64))> {
    let b = BBox::new;
    vec![
        // exact hit
        (vec![(b(0., 0., 10., 10.), 0.9)], vec![b(0., 0., 10., 10.)], (1, 0, 0)),
        // iou 0.5 exactly counts
        (vec![(b(0., 0., 10., 10.), 0.9)], vec![b(0., 0., 10., 5.)], (1, 0, 0)),
        // iou 1/3 misses
        (vec![(b(0., 0., 10., 10.), 0.9)], vec![b(5., 0., 10., 10.)], (0, 1, 1)),
        // nothing predicted
        (vec![], vec![b(0., 0., 4., 4.), b(10., 10., 4., 4.)], (0, 0, 2)),
        // nothing to find
        (vec![(b(0., 0., 4., 4.), 0.5)], vec![], (0, 1, 0)),
        // duplicate predictions: the second is a false positive
        (
            vec![(b(0., 0., 10., 10.), 0.9), (b(0., 0., 10., 10.), 0.8)],
            vec![b(0., 0., 10., 10.)],
            (1, 1, 0),
        ),
        // two disjoint pairs
        (
            vec![(b(0., 0., 10., 10.), 0.3), (b(20., 20., 10., 10.), 0.7)],
            vec![b(20., 20., 10., 10.), b(1., 0., 10., 10.)],
            (2, 0, 0),
        ),
        // greedy order matters: the confident prediction takes the only gt it overlaps best,
        // leaving the weaker one without a partner
        (
            vec![(b(0., 0., 10., 10.), 0.4), (b(2., 0., 10., 10.), 0.9)],
            vec![b(2., 0., 10., 10.)],
            (1, 1, 0),
        ),
        // one prediction between two gts takes the better one
        (
            vec![(b(3., 0., 10., 10.), 0.9)],
            vec![b(0., 0., 10., 10.), b(4., 0., 10., 10.)],
            (1, 0, 1),
        ),
        // three predictions, two gts, one far-off prediction
        (
            vec![
                (b(0., 0., 8., 8.), 0.6),
                (b(30., 30., 8., 8.), 0.95),
                (b(60., 0., 8., 8.), 0.2),
            ],
            vec![b(0., 0., 8., 8.), b(30., 31., 8., 8.)],
            (2, 1, 0),
        ),
    ]
}

fn c3_iou_and_matching() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..500 {
        let a = random_grid_box(&mut rng);
        let b = random_grid_box(&mut rng);
        let got = iou(&a, &b).map_err(|e| e.to_string())?;
        let want = raster_iou(&a, &b, 4.0);
        ensure((got - want).abs() <= 1e-9, || {
            format!("pair {i} {a:?} {b:?}: iou {got} != raster {want}")
        })?;
    }
    for i in 0..100 {
        let np = rng.random_range(0..=4);
        let ng = rng.random_range(0..=4);
        let preds: Vec<Detection> = (0..np)
            .map(|_| Detection {
                frame: 0,
                bbox: BBox::new(
                    rng.random_range(0..4) as f64 * 6.0,
                    rng.random_range(0..4) as f64 * 6.0,
                    8.0,
                    8.0,
                ),
                confidence: rng.random_range(0.0..1.0),
                class_label: None,
            })
            .collect();
        let gts: Vec<BBox> = (0..ng)
            .map(|_| {
                BBox::new(
                    rng.random_range(0..4) as f64 * 6.0,
                    rng.random_range(0..4) as f64 * 6.0,
                    8.0,
                    8.0,
                )
            })
            .collect();
        let c = match_detections(&preds, &gts, 0.5)
            .map_err(|e| e.to_string())?
            .counts;
        ensure(c.tp + c.fn_ == ng as u64 && c.tp + c.fp == np as u64, || {
            format!("layout {i}: {c:?} with {np} preds, {ng} gts")
        })?;
    }
    let cases = curated_matching_cases();
    for (i, (preds, gts, want)) in cases.iter().enumerate() {
        let preds: Vec<Detection> = preds
            .iter()
            .map(|(bbox, confidence)| Detection {
                frame: 0,
                bbox: *bbox,
                confidence: *confidence,
                class_label: None,
            })
            .collect();
        let c = match_detections(&preds, gts, 0.5)
            .map_err(|e| e.to_string())?
            .counts;
        ensure((c.tp, c.fp, c.fn_) == *want, || {
            format!("curated case {i}: {:?} != {want:?}", (c.tp, c.fp, c.fn_))
        })?;
    }
    Ok(format!(
        "500 iou pairs, 100 random layouts, {} curated cases",
        cases.len()
    ))
}

fn c4_random_forest() -> Outcome {
    let params = ForestParams {
        n_trees: 25,
        ..ForestParams::default()
    };
    let mut worst: f64 = 1.0;
    for seed in 0..20u64 {
        let (x, y) = separable_set(120, 4, 1000 + seed);
        let (xt, yt) = separable_set(200, 4, 5000 + seed);
        let data = TrainingSet::unkeyed(x, y, 2).map_err(|e| e.to_string())?;
        let model = rf_train(&data, &params, seed).map_err(|e| e.to_string())?;
        let mut correct = 0;
        for (row, label) in xt.iter().zip(&yt) {
            if model.predict(row).map_err(|e| e.to_string())?.0 == *label {
                correct += 1;
            }
        }
        let acc = correct as f64 / yt.len() as f64;
        worst = worst.min(acc);
        ensure(acc >= 0.98, || format!("seed {seed}: held-out accuracy {acc}"))?;
    }

    let single = ForestParams {
        n_trees: 1,
        mtry: Some(3),
        bootstrap: false,
        ..ForestParams::default()
    };
    let micro = micro_datasets(300, 4);
    for (i, (x, y, k)) in micro.iter().enumerate() {
        let d = x[0].len();
        let p = ForestParams {
            mtry: Some(d),
            ..single
        };
        let data = TrainingSet::unkeyed(x.clone(), y.clone(), *k).map_err(|e| e.to_string())?;
        let model = rf_train(&data, &p, i as u64).map_err(|e| e.to_string())?;
        check_tree_against_oracle(&model.trees[0], x, y, *k)
            .map_err(|e| format!("micro-dataset {i}: {e}"))?;
    }

    let (x, y) = separable_set(150, 5, 77);
    let data = TrainingSet::unkeyed(x, y, 2).map_err(|e| e.to_string())?;
    let first = rf_train(&data, &params, 9).map_err(|e| e.to_string())?.to_bytes();
    for _ in 0..3 {
        let again = rf_train(&data, &params, 9).map_err(|e| e.to_string())?.to_bytes();
        ensure(again == first, || "same-seed serializations differ".into())?;
    }
    Ok(format!(
        "worst held-out accuracy {worst:.3} over 20 seeds, {} micro-datasets match the oracle, \
         serialization byte-identical",
        micro.len()
    ))
}

fn curated_cost_matrices() -> Vec<Vec<Vec<f64>>> {
    vec![
        vec![vec![1., 2., 3.], vec![2., 4., 6.], vec![3., 6., 9.]],
        vec![vec![4., 1., 3.], vec![2., 0., 5.], vec![3., 2., 2.]],
        vec![vec![0., 0., 0.], vec![0., 0., 0.], vec![0., 0., 0.]],
        vec![vec![9., 9., 1.], vec![9., 1., 9.], vec![1., 9., 9.]],
        vec![vec![1., 1., 100.], vec![100., 1., 1.], vec![1., 100., 1.]],
        vec![vec![7., 5., 3.], vec![5., 3., 7.], vec![3., 7., 5.]],
        vec![vec![0.5, 1e6, 2.], vec![1e6, 0.25, 1e6], vec![2., 1e6, 0.5]],
        vec![vec![10., 19., 8.], vec![10., 18., 7.], vec![13., 16., 9.]],
    ]
}

fn detection(frame: usize, cx: f64, cy: f64) -> Detection {
    Detection {
        frame,
        bbox: BBox::from_center(cx, cy, 12.0, 12.0),
        confidence: 1.0,
        class_label: None,
    }
}

fn c5_tracking() -> Outcome {
    let params = TrackerParams::default();
    let truth = |k: usize| (20.0 + 3.0 * k as f64, 40.0 - 2.0 * k as f64);
    let first = BBox::from_center(truth(0).0, truth(0).1, 12.0, 12.0);
    let mut track = Track::new(0, KalmanState::new(first.center(), (0.0, 0.0), 12.0, 12.0, &params));
    for k in 1..=5 {
        track.predict(&params).map_err(|e| e.to_string())?;
        let (x, y) = truth(k);
        track
            .update(&BBox::from_center(x, y, 12.0, 12.0), &params)
            .map_err(|e| e.to_string())?;
    }
    let predicted = track.predict(&params).map_err(|e| e.to_string())?.center();
    let (tx, ty) = truth(6);
    let err = ((predicted.0 - tx).powi(2) + (predicted.1 - ty).powi(2)).sqrt();
    ensure(err < 0.5, || format!("one-step prediction error {err:.3} px"))?;

    let matrices = curated_cost_matrices();
    for (i, cost) in matrices.iter().enumerate() {
        let assignment = hungarian(cost);
        let total: f64 = assignment
            .iter()
            .enumerate()
            .map(|(r, c)| c.map(|c| cost[r][c]).unwrap_or(f64::INFINITY))
            .sum();
        let best = brute_force_assignment(cost);
        ensure((total - best).abs() < 1e-9, || {
            format!("matrix {i}: hungarian {total} != brute force {best}")
        })?;
    }

    // two actors on parallel lanes passing each other, detections listed in shuffled order
    let mut tracker = Tracker::new(params, 224, 160).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut actor_of = Vec::new();
    for f in 0..30 {
        let a = (30.0 + 4.0 * f as f64, 70.0);
        let b = (190.0 - 4.0 * f as f64, 90.0);
        let swap = rng.random_bool(0.5);
        let dets = if swap {
            vec![detection(f, b.0, b.1), detection(f, a.0, a.1)]
        } else {
            vec![detection(f, a.0, a.1), detection(f, b.0, b.1)]
        };
        actor_of.push(if swap { [1, 0] } else { [0, 1] });
        tracker.step(f, &dets).map_err(|e| e.to_string())?;
    }
    let confirmed: Vec<_> = tracker
        .tracks()
        .iter()
        .filter(|t| t.status == TrackStatus::Confirmed)
        .collect();
    ensure(tracker.tracks().len() == 2 && confirmed.len() == 2, || {
        format!(
            "{} tracks created, {} confirmed",
            tracker.tracks().len(),
            confirmed.len()
        )
    })?;
    let mut swaps = 0;
    for t in &confirmed {
        let actors: Vec<usize> = t.history.iter().map(|(f, d)| actor_of[*f][*d]).collect();
        swaps += actors.windows(2).filter(|w| w[0] != w[1]).count();
    }
    ensure(swaps == 0, || format!("{swaps} identity swaps"))?;
    Ok(format!(
        "prediction error {err:.3} px, {} cost matrices optimal, 2 confirmed tracks, 0 swaps",
        matrices.len()
    ))
}

fn c6_small_scale() -> Outcome {
    let config = bundled_scenario(PipelineKind::SmallScale);
    let start = Instant::now();
    let result = run_small_scale(&config, &RunOptions::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let auc = result
        .metrics
        .get_f64("frame", "auc")
        .ok_or("no frame auc in report")?;
    let truth = result.truth.as_ref().ok_or("scenario has no truth")?;
    const COUNTER_MOVER: usize = 3;
    let (mut gated, mut localized) = (0, 0);
    for v in result.verdicts.iter().filter(|v| v.is_abnormal) {
        let Some(gt) = truth[v.frame].iter().find(|t| t.id == COUNTER_MOVER) else {
            continue;
        };
        gated += 1;
        let best = result
            .regions
            .iter()
            .filter(|r| r.frame == v.frame)
            .filter_map(|r| iou(&r.bbox, &gt.bbox).ok())
            .fold(0.0, f64::max);
        if best >= 0.5 {
            localized += 1;
        }
    }
    let rate = if gated == 0 {
        0.0
    } else {
        localized as f64 / gated as f64
    };
    ensure(auc >= 0.9, || format!("frame auc {auc}"))?;
    ensure(rate >= 0.8, || {
        format!("counter-mover localized in {localized}/{gated} gated frames")
    })?;
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "frame auc {auc:.4}, counter-mover localized in {localized}/{gated} gated frames, {:.1}s",
        elapsed.as_secs_f64()
    ))
}

fn c7_large_scale(dir: &Path) -> Outcome {
    let mut config = bundled_scenario(PipelineKind::LargeScale);
    let spec = config
        .test
        .synth
        .clone()
        .ok_or("large-scale scenario has no synthetic test source")?;
    let synth = generate_synthetic(&spec).map_err(|e| e.to_string())?;
    let rows: Vec<DetectionRow> = synth
        .ground_truth
        .iter()
        .flatten()
        .map(|gt| DetectionRow {
            video_id: "perfect".into(),
            frame: gt.frame,
            bbox: gt.bbox,
            class_label: None,
            confidence: 1.0,
            line: 0,
        })
        .collect();
    let path = dir.join("perfect_detections.csv");
    fs::write(&path, detection_rows_to_csv(&rows)).map_err(|e| e.to_string())?;
    config.models.detections = Some(path);
    let result = run_large_scale(&config, &RunOptions::default()).map_err(|e| e.to_string())?;
    let m = &result.metrics;
    let classes: Vec<String> = m
        .to_csv()
        .lines()
        .filter_map(|l| {
            l.strip_prefix("per_detection,")?
                .split(',')
                .next()?
                .strip_suffix(".recall")
                .map(str::to_string)
        })
        .collect();
    ensure(classes.len() == 3, || format!("classes with recall: {classes:?}"))?;
    for c in &classes {
        let r = m
            .get_f64("per_detection", &format!("{c}.recall"))
            .ok_or("missing recall")?;
        ensure(r == 1.0, || format!("{c} recall {r}"))?;
    }
    let macro_auc = m
        .get_f64("per_detection", "macro_auc")
        .ok_or("no macro auc")?;
    ensure(macro_auc >= 0.95, || format!("macro auc {macro_auc}"))?;
    let precision = m
        .get_f64("track_per_frame", "precision")
        .ok_or("no track precision")?;
    ensure(precision == 1.0, || format!("track-assignment precision {precision}"))?;
    Ok(format!(
        "recall 1 for {}, macro auc {macro_auc:.4}, track-assignment precision {precision}",
        classes.join("/")
    ))
}

fn c8_determinism(dir: &Path) -> Outcome {
    let mut checked = Vec::new();
    for kind in [PipelineKind::SmallScale, PipelineKind::LargeScale] {
        let config = bundled_scenario(kind);
        let mut bundles = Vec::new();
        for run in 0..2 {
            let out = dir.join(format!("{}_{run}", kind.as_str()));
            let options = RunOptions {
                out: Some(out.clone()),
                resume: false,
            };
            crowdscope::pipeline::run(&config, &options).map_err(|e| e.to_string())?;
            let mut files = Vec::new();
            for entry in walk(&out)? {
                let bytes = fs::read(&entry).map_err(|e| e.to_string())?;
                let rel = entry.strip_prefix(&out).map_err(|e| e.to_string())?;
                files.push((rel.to_path_buf(), bytes));
            }
            files.sort();
            bundles.push(files);
        }
        ensure(bundles[0] == bundles[1], || {
            format!("{} bundles differ", kind.as_str())
        })?;
        checked.push(format!("{} ({} files)", kind.as_str(), bundles[0].len()));
    }
    Ok(format!("byte-identical: {}", checked.join(", ")))
}

fn walk(dir: &Path) -> Result<Vec<std::path::PathBuf>, String> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        if path.is_dir() {
            out.extend(walk(&path)?);
        } else {
            out.push(path);
        }
    }
    Ok(out)
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("C1 optical-flow accuracy", Box::new(c1_optical_flow)),
        ("C2 metric oracle equality", Box::new(c2_metric_oracles)),
        ("C3 iou/matching oracle", Box::new(c3_iou_and_matching)),
        ("C4 random forest", Box::new(c4_random_forest)),
        ("C5 tracking", Box::new(c5_tracking)),
        ("C6 end-to-end small-scale", Box::new(c6_small_scale)),
        ("C7 end-to-end large-scale", Box::new(|| c7_large_scale(tmp.path()))),
        ("C8 determinism", Box::new(|| c8_determinism(tmp.path()))),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
