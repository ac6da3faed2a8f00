//! End-to-end runs.
//!
//! Small scale: score every frame with the gate; for flagged frames threshold the flow
//! magnitude, extract regions, compute their statistics and classify each region.
//! Large scale: detect individuals, compute their statistics over the flow, classify each
//! detection with the multi-class forest and track them with the Kalman tracker.
//!
//! Intermediates (flows, masks, detections, features) are written under `<out>/stages`.
//! With `resume`, any stage file already present is read back instead of recomputed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::{PipelineConfig, PipelineKind, SourceConfig};
use crate::dataset::{
    detection_rows_to_csv, parse_annotations_str, parse_frame_labels, BehaviorClass, DetectionRow,
};
use crate::error::{Error, Result};
use crate::eval::{
    classification_metrics, match_detections, one_vs_rest_auc, per_class_counts, pixel_accuracy,
    roc_auc, roc_svg, track_assignment_metrics, ConfusionCounts, RocCurve, TrackBox, TruthBox,
};
use crate::features::{
    batch_features, features_to_csv, parse_features_csv, pixel_features, FeatureRow, FeatureVector,
    LabelTransfer, LabeledBox,
};
use crate::flow::{
    flow_file_name, flow_pair_for_frame, horn_schunck, to_polar, FlowField, FlowPolar,
};
use crate::forest::{argmax, rf_train, RandomForestModel, TrainingSet};
use crate::frame::{load_sequence, VideoSequence};
use crate::geometry::BBox;
use crate::region::{connected_components, magnitude_mask, mask_file_name, BinaryMask, Region};
use crate::report::{rocs_to_csv, MetricsTable, ReportBundle};
use crate::spatial::{
    baseline_train_from_flows, ingest_detections, verdicts_to_csv, BaselineFrameModel, Detection,
    Detector, FrameClassifier, FrameVerdict, IngestedVerdicts, LabeledFlows, MotionDetector,
};
use crate::synth::{generate_synthetic, parse_truth_csv};
use crate::tracking::{tracks_to_csv, TrackRecord, TrackStatus, Tracker, TRACK_HEADER};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Bundle directory; nothing is written when `None`.
    pub out: Option<PathBuf>,
    pub resume: bool,
}

/// A ground-truth box with the identity of the individual it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthEntry {
    pub frame: usize,
    pub id: usize,
    pub bbox: BBox,
    pub class: Option<BehaviorClass>,
    pub abnormal: bool,
}

#[derive(Debug, Clone)]
pub struct LoadedSource {
    pub sequence: VideoSequence,
    /// Boxes per frame.
    pub truth: Option<Vec<Vec<TruthEntry>>>,
    pub warnings: Vec<String>,
}

pub fn load_source(source: &SourceConfig) -> Result<LoadedSource> {
    if let Some(spec) = &source.synth {
        let out = generate_synthetic(spec)?;
        let truth = out
            .ground_truth
            .iter()
            .map(|boxes| {
                boxes
                    .iter()
                    .map(|g| TruthEntry {
                        frame: g.frame,
                        id: g.actor,
                        bbox: g.bbox,
                        class: g.class,
                        abnormal: g.abnormal,
                    })
                    .collect()
            })
            .collect();
        return Ok(LoadedSource {
            sequence: out.sequence,
            truth: Some(truth),
            warnings: out.warnings,
        });
    }
    let dir = source
        .frames
        .as_ref()
        .ok_or_else(|| Error::Config("source has neither `frames` nor `synth`".into()))?;
    let mut sequence = load_sequence(dir, source.pattern.as_deref().unwrap_or("*"))?;
    if let Some(path) = &source.frame_labels {
        sequence.set_frame_labels(parse_frame_labels(path)?)?;
    }
    let truth = match &source.truth {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Some(parse_truth(&text, sequence.len(), sequence.frame_labels())?)
        }
        None => None,
    };
    Ok(LoadedSource {
        sequence,
        truth,
        warnings: Vec::new(),
    })
}

/// Reads either a synthetic `truth.csv` or an annotation CSV.
///
/// Annotation rows carry no identity, so a row's id is its position within its frame, and a
/// box is abnormal when its frame is labeled abnormal.
pub fn parse_truth_entries(text: &str, frame_labels: Option<&[bool]>) -> Result<Vec<TruthEntry>> {
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    if first.trim_start().starts_with("frame,actor") {
        return Ok(parse_truth_csv(text)?
            .into_iter()
            .map(|g| TruthEntry {
                frame: g.frame,
                id: g.actor,
                bbox: g.bbox,
                class: g.class,
                abnormal: g.abnormal,
            })
            .collect());
    }
    let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
    Ok(parse_annotations_str(text)?
        .into_iter()
        .map(|row| {
            let slot = seen.entry(row.frame).or_default();
            let id = *slot;
            *slot += 1;
            TruthEntry {
                frame: row.frame,
                id,
                bbox: row.bbox(),
                class: Some(row.class_label),
                abnormal: frame_labels
                    .and_then(|l| l.get(row.frame))
                    .copied()
                    .unwrap_or(false),
            }
        })
        .collect())
}

/// Groups truth entries by frame; entries past `n_frames` are an error.
pub fn group_truth(entries: Vec<TruthEntry>, n_frames: usize) -> Result<Vec<Vec<TruthEntry>>> {
    let mut per_frame: Vec<Vec<TruthEntry>> = vec![Vec::new(); n_frames];
    for e in entries {
        let frame = e.frame;
        per_frame
            .get_mut(frame)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "ground truth names frame {frame} of a {n_frames}-frame sequence"
                ))
            })?
            .push(e);
    }
    Ok(per_frame)
}

/// [`parse_truth_entries`] grouped into `n_frames` frames.
pub fn parse_truth(
    text: &str,
    n_frames: usize,
    frame_labels: Option<&[bool]>,
) -> Result<Vec<Vec<TruthEntry>>> {
    group_truth(parse_truth_entries(text, frame_labels)?, n_frames)
}

struct Stages {
    dir: Option<PathBuf>,
    resume: bool,
}

impl Stages {
    fn new(options: &RunOptions) -> Self {
        Stages {
            dir: options.out.as_ref().map(|d| d.join("stages")),
            resume: options.resume,
        }
    }

    fn cached(&self, name: &str) -> Option<PathBuf> {
        let path = self.dir.as_ref()?.join(name);
        (self.resume && path.exists()).then_some(path)
    }

    fn save(&self, name: &str, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let path = dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write(&path)
    }
}

fn flow_stage_name(i: usize) -> String {
    format!("flows/{}", flow_file_name(i))
}

/// Polar flow of each requested frame, computed for the pair `(i, i + 1)` or read back from
/// the stage directory.
fn polars_for(
    sequence: &VideoSequence,
    needed: &[usize],
    config: &PipelineConfig,
    stages: &Stages,
) -> Result<BTreeMap<usize, FlowPolar>> {
    let frames = sequence.frames();
    let n = frames.len();
    let flows: Vec<(usize, FlowField, bool)> = needed
        .par_iter()
        .map(|&i| {
            if let Some(path) = stages.cached(&flow_stage_name(i)) {
                return Ok((i, FlowField::load(&path)?, true));
            }
            let (a, b) = flow_pair_for_frame(i, n);
            Ok((
                i,
                horn_schunck(&frames[a], &frames[b], &config.flow)?,
                false,
            ))
        })
        .collect::<Result<_>>()?;
    let mut out = BTreeMap::new();
    for (i, flow, loaded) in flows {
        if !loaded {
            stages.save(&flow_stage_name(i), |p| flow.save(p))?;
        }
        out.insert(i, to_polar(&flow));
    }
    Ok(out)
}

fn all_polars(sequence: &VideoSequence, config: &PipelineConfig) -> Result<Vec<FlowPolar>> {
    let all: Vec<usize> = (0..sequence.len()).collect();
    let no_stages = Stages {
        dir: None,
        resume: false,
    };
    Ok(polars_for(sequence, &all, config, &no_stages)?
        .into_values()
        .collect())
}

fn mask_regions(polar: &FlowPolar, config: &PipelineConfig) -> Result<(BinaryMask, Vec<Region>)> {
    let mask = magnitude_mask(polar, config.mask.threshold.resolve(polar))?;
    let regions = connected_components(&mask, config.mask.min_area)?;
    Ok((mask, regions))
}

fn load_train(config: &PipelineConfig, what: &str) -> Result<LoadedSource> {
    let source = config
        .train
        .as_ref()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| {
            Error::MissingModel(format!(
                "no {what} model given and no [train] source to fit one"
            ))
        })?;
    load_source(source)
}

/// Loads the training source and its flow once, on first use.
fn training_data<'a>(
    slot: &'a mut Option<(LoadedSource, Vec<FlowPolar>)>,
    config: &PipelineConfig,
    what: &str,
) -> Result<&'a (LoadedSource, Vec<FlowPolar>)> {
    if slot.is_none() {
        let source = load_train(config, what)?;
        let polars = all_polars(&source.sequence, config)?;
        *slot = Some((source, polars));
    }
    Ok(slot.as_ref().expect("just filled"))
}

fn forest_seed(seed: u64) -> u64 {
    seed.wrapping_add(1)
}

enum Gate {
    Model(BaselineFrameModel),
    Ingested(IngestedVerdicts),
}

impl Gate {
    fn needs_flow(&self) -> bool {
        matches!(self, Gate::Model(_))
    }

    fn classifier(&self) -> &dyn FrameClassifier {
        match self {
            Gate::Model(m) => m,
            Gate::Ingested(v) => v,
        }
    }
}

/// Region forest trained on a labeled source: regions matching an abnormal ground-truth box
/// are class 1, all others class 0. Without boxes, regions take their frame's label.
fn train_region_forest(
    train: &LoadedSource,
    polars: &[FlowPolar],
    config: &PipelineConfig,
) -> Result<RandomForestModel> {
    let extracted: Vec<Vec<Region>> = polars
        .par_iter()
        .map(|p| mask_regions(p, config).map(|(_, r)| r))
        .collect::<Result<_>>()?;
    let frames: Vec<(usize, &FlowPolar, &[Region])> = polars
        .iter()
        .zip(&extracted)
        .enumerate()
        .map(|(i, (p, r))| (i, p, r.as_slice()))
        .collect();
    let rows = match &train.truth {
        Some(truth) => {
            let boxes: Vec<Vec<LabeledBox>> = truth
                .iter()
                .map(|f| {
                    f.iter()
                        .map(|t| LabeledBox {
                            bbox: t.bbox,
                            label: usize::from(t.abnormal),
                        })
                        .collect()
                })
                .collect();
            batch_features(&frames, Some(&boxes), None, LabelTransfer::Iou, Some(0))?
        }
        None => batch_features(
            &frames,
            None,
            train.sequence.frame_labels(),
            LabelTransfer::FrameLabel,
            None,
        )?,
    };
    let rows: Vec<FeatureRow> = rows.into_iter().filter(|r| r.label.is_some()).collect();
    let set = TrainingSet::new(
        rows.iter()
            .map(|r| r.features.to_array().to_vec())
            .collect(),
        rows.iter().map(|r| r.label.unwrap_or(0)).collect(),
        rows.iter().map(FeatureRow::key).collect(),
        2,
    )?;
    rf_train(&set, &config.forest, forest_seed(config.seed))
}

/// Behavior forest trained on the annotated boxes of a labeled source.
fn train_behavior_forest(
    train: &LoadedSource,
    polars: &[FlowPolar],
    config: &PipelineConfig,
) -> Result<RandomForestModel> {
    let truth = train.truth.as_ref().ok_or_else(|| {
        Error::MissingModel("the [train] source has no ground-truth boxes".into())
    })?;
    let (w, h) = train.sequence.dimensions();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut keys = Vec::new();
    for (frame, entries) in truth.iter().enumerate() {
        for e in entries {
            let (Some(class), Some(region)) = (e.class, Region::from_bbox(e.id, &e.bbox, w, h))
            else {
                continue;
            };
            features.push(
                pixel_features(&polars[frame], &region.pixel_indices)?
                    .to_array()
                    .to_vec(),
            );
            labels.push(class.index());
            keys.push(((frame as u64) << 20) | e.id as u64);
        }
    }
    let set = TrainingSet::new(features, labels, keys, BehaviorClass::ALL.len())?;
    rf_train(&set, &config.forest, forest_seed(config.seed))
}

fn push_metrics(table: &mut MetricsTable, section: &str, c: &ConfusionCounts) {
    match classification_metrics(c) {
        Ok(m) => table.metrics(section, c, &m),
        Err(_) => table.counts(section, c),
    }
}

fn roc_files(bundle: &mut ReportBundle, curves: &[(String, RocCurve)]) {
    let refs: Vec<(String, &RocCurve)> = curves.iter().map(|(n, c)| (n.clone(), c)).collect();
    bundle.insert("roc.csv", rocs_to_csv(&refs));
    bundle.insert("roc.svg", roc_svg(&refs));
}

fn warnings_text(warnings: &[String]) -> String {
    warnings.iter().map(|w| format!("{w}\n")).collect()
}

/// One region classified in a gated frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionDecision {
    pub frame: usize,
    pub region_id: usize,
    pub bbox: BBox,
    pub features: FeatureVector,
    pub abnormal_score: f64,
    pub abnormal: bool,
}

#[derive(Debug, Clone)]
pub struct SmallScaleResult {
    pub verdicts: Vec<FrameVerdict>,
    pub regions: Vec<RegionDecision>,
    pub truth: Option<Vec<Vec<TruthEntry>>>,
    pub metrics: MetricsTable,
    pub bundle: ReportBundle,
    pub warnings: Vec<String>,
}

fn regions_to_csv(regions: &[RegionDecision]) -> String {
    let mut out =
        String::from("frame,region_id,x,y,w,h,mu_m,mu_r,var_m,var_r,sd_m,sd_r,p,score,abnormal\n");
    for r in regions {
        let f = &r.features;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.frame,
            r.region_id,
            r.bbox.x,
            r.bbox.y,
            r.bbox.w,
            r.bbox.h,
            f.mu_m,
            f.mu_r,
            f.var_m,
            f.var_r,
            f.sd_m,
            f.sd_r,
            f.p,
            r.abnormal_score,
            u8::from(r.abnormal)
        );
    }
    out
}

fn mask_stage_name(i: usize) -> String {
    format!("masks/{}", mask_file_name(i))
}

/// Reads staged features for `regions`, or computes and stages them.
fn staged_features(
    stages: &Stages,
    items: &[(usize, usize, BBox, &FlowPolar, &[usize])],
) -> Result<Vec<FeatureVector>> {
    const NAME: &str = "features.csv";
    if let Some(path) = stages.cached(NAME) {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let rows = parse_features_csv(&text)?;
        let consistent = rows.len() == items.len()
            && rows
                .iter()
                .zip(items)
                .all(|(r, (frame, id, ..))| r.frame == *frame && r.region_id == *id);
        if !consistent {
            return Err(Error::Format(format!(
                "{} does not match the regions of this run",
                path.display()
            )));
        }
        return Ok(rows.into_iter().map(|r| r.features).collect());
    }
    let features: Vec<FeatureVector> = items
        .par_iter()
        .map(|(_, _, _, polar, pixels)| pixel_features(polar, pixels))
        .collect::<Result<_>>()?;
    let rows: Vec<FeatureRow> = items
        .iter()
        .zip(&features)
        .map(|((frame, id, bbox, ..), f)| FeatureRow {
            frame: *frame,
            region_id: *id,
            bbox: *bbox,
            features: *f,
            label: None,
        })
        .collect();
    stages.save(NAME, |p| {
        std::fs::write(p, features_to_csv(&rows)).map_err(|e| Error::io(p, e))
    })?;
    Ok(features)
}

pub fn run_small_scale(config: &PipelineConfig, options: &RunOptions) -> Result<SmallScaleResult> {
    config.validate()?;
    let stages = Stages::new(options);
    let test = load_source(&config.test).map_err(|e| e.in_stage("load"))?;
    let sequence = &test.sequence;
    let (width, height) = sequence.dimensions();
    let n = sequence.len();
    let mut warnings = test.warnings.clone();
    let mut bundle = ReportBundle::default();

    let mut train: Option<(LoadedSource, Vec<FlowPolar>)> = None;

    let gate = if let Some(path) = &config.models.gate {
        Gate::Model(BaselineFrameModel::load(path).map_err(|e| e.in_stage("gate"))?)
    } else if let Some(path) = &config.models.verdicts {
        Gate::Ingested(
            IngestedVerdicts::load(path, config.gate.decision_threshold)
                .map_err(|e| e.in_stage("gate"))?,
        )
    } else {
        let (source, polars) =
            training_data(&mut train, config, "gate").map_err(|e| e.in_stage("gate"))?;
        let model = baseline_train_from_flows(
            &[LabeledFlows {
                sequence: &source.sequence,
                polars,
            }],
            &config.gate,
            config.seed,
        )
        .map_err(|e| e.in_stage("gate"))?;
        bundle.insert("models/gate.cssp", model.to_bytes());
        Gate::Model(model)
    };

    let forest = if let Some(path) = &config.models.rf {
        RandomForestModel::load(path).map_err(|e| e.in_stage("forest"))?
    } else {
        let (source, polars) =
            training_data(&mut train, config, "region forest").map_err(|e| e.in_stage("forest"))?;
        let model =
            train_region_forest(source, polars, config).map_err(|e| e.in_stage("forest"))?;
        bundle.insert("models/rf.csrf", model.to_bytes());
        model
    };
    if forest.n_classes != 2 {
        return Err(Error::Config(format!(
            "region forest has {} classes, expected 2",
            forest.n_classes
        ))
        .in_stage("forest"));
    }
    drop(train);

    // The baseline gate reads every frame's flow; ingested verdicts need flow only where
    // the gate fires.
    let mut polars = if gate.needs_flow() {
        let all: Vec<usize> = (0..n).collect();
        polars_for(sequence, &all, config, &stages).map_err(|e| e.in_stage("flow"))?
    } else {
        BTreeMap::new()
    };
    let verdicts: Vec<FrameVerdict> = sequence
        .frames()
        .iter()
        .enumerate()
        .map(|(i, frame)| gate.classifier().score_frame(frame, polars.get(&i)))
        .collect::<Result<_>>()
        .map_err(|e| e.in_stage("gate"))?;
    let gated: Vec<usize> = verdicts
        .iter()
        .filter(|v| v.is_abnormal)
        .map(|v| v.frame)
        .collect();
    if !gate.needs_flow() {
        polars = polars_for(sequence, &gated, config, &stages).map_err(|e| e.in_stage("flow"))?;
    }

    let masks: Vec<(usize, Vec<Region>)> = gated
        .par_iter()
        .map(|&i| -> Result<(usize, Vec<Region>, Option<BinaryMask>)> {
            if let Some(path) = stages.cached(&mask_stage_name(i)) {
                let mask = BinaryMask::load_pgm(&path)?;
                return Ok((i, connected_components(&mask, config.mask.min_area)?, None));
            }
            let (mask, regions) = mask_regions(&polars[&i], config)?;
            Ok((i, regions, Some(mask)))
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("mask"))?
        .into_iter()
        .map(|(i, regions, mask)| {
            if let Some(mask) = mask {
                stages.save(&mask_stage_name(i), |p| mask.save_pgm(p))?;
            }
            Ok((i, regions))
        })
        .collect::<Result<_>>()
        .map_err(|e: Error| e.in_stage("mask"))?;

    let items: Vec<(usize, usize, BBox, &FlowPolar, &[usize])> = masks
        .iter()
        .flat_map(|(i, regions)| {
            let polar = &polars[i];
            regions
                .iter()
                .map(move |r| (*i, r.id, r.bbox, polar, r.pixel_indices.as_slice()))
        })
        .collect();
    let features = staged_features(&stages, &items).map_err(|e| e.in_stage("features"))?;
    let regions: Vec<RegionDecision> = items
        .iter()
        .zip(&features)
        .map(|((frame, id, bbox, ..), f)| {
            let score = forest.predict_proba(&f.to_array())?[1];
            Ok(RegionDecision {
                frame: *frame,
                region_id: *id,
                bbox: *bbox,
                features: *f,
                abnormal_score: score,
                abnormal: score >= config.eval.region_threshold,
            })
        })
        .collect::<Result<_>>()
        .map_err(|e: Error| e.in_stage("classify"))?;

    let mut metrics = MetricsTable::default();
    let mut curves: Vec<(String, RocCurve)> = Vec::new();
    metrics.push("run", "pipeline", PipelineKind::SmallScale.as_str());
    metrics.push("run", "source", sequence.source_id());
    metrics.push("run", "frames", n);
    metrics.push("run", "gated_frames", gated.len());
    metrics.push("run", "regions_processed", regions.len());
    if let Some(labels) = sequence.frame_labels() {
        let mut c = ConfusionCounts::default();
        for (v, &truth) in verdicts.iter().zip(labels) {
            match (v.is_abnormal, truth) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        push_metrics(&mut metrics, "frame", &c);
        let scores: Vec<(f64, bool)> = verdicts
            .iter()
            .zip(labels)
            .map(|(v, &l)| (v.abnormal_score, l))
            .collect();
        if let Ok(curve) = roc_auc(&scores) {
            metrics.push("frame", "auc", curve.auc);
            curves.push(("frame".into(), curve));
        }
    }
    if let (Some(truth), false) = (&test.truth, gated.is_empty()) {
        let mut det = ConfusionCounts::default();
        let mut pix = ConfusionCounts::default();
        let mut region_scores = Vec::new();
        for &i in &gated {
            let preds: Vec<Detection> = regions
                .iter()
                .filter(|r| r.frame == i && r.abnormal)
                .map(|r| Detection {
                    frame: i,
                    bbox: r.bbox,
                    confidence: r.abnormal_score,
                    class_label: None,
                })
                .collect();
            let gts: Vec<BBox> = truth[i]
                .iter()
                .filter(|t| t.abnormal)
                .map(|t| t.bbox)
                .collect();
            det += match_detections(&preds, &gts, config.eval.iou_threshold)?.counts;
            pix += pixel_accuracy(&preds, &gts, config.eval.iou_threshold, width, height)?;
            let boxes: Vec<LabeledBox> = truth[i]
                .iter()
                .map(|t| LabeledBox {
                    bbox: t.bbox,
                    label: usize::from(t.abnormal),
                })
                .collect();
            for r in regions.iter().filter(|r| r.frame == i) {
                let label = crate::features::best_iou_match(
                    &r.bbox,
                    &boxes,
                    crate::features::LABEL_IOU_THRESHOLD,
                )
                .map(|j| boxes[j].label == 1)
                .unwrap_or(false);
                region_scores.push((r.abnormal_score, label));
            }
        }
        push_metrics(&mut metrics, "localization", &det);
        push_metrics(&mut metrics, "pixel", &pix);
        if let Ok(curve) = roc_auc(&region_scores) {
            metrics.push("region", "auc", curve.auc);
            curves.push(("region".into(), curve));
        }
    }

    bundle.insert("config.resolved", config.to_toml()?);
    bundle.insert("metrics.csv", metrics.to_csv());
    roc_files(&mut bundle, &curves);
    bundle.insert("tracks.csv", format!("{TRACK_HEADER}\n"));
    bundle.insert("verdicts.csv", verdicts_to_csv(&verdicts));
    bundle.insert("regions.csv", regions_to_csv(&regions));
    warnings.sort();
    bundle.insert("warnings.txt", warnings_text(&warnings));
    if let Some(dir) = &options.out {
        bundle.write(dir)?;
    }
    Ok(SmallScaleResult {
        verdicts,
        regions,
        truth: test.truth,
        metrics,
        bundle,
        warnings,
    })
}

/// One detection with its class decision.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionDecision {
    pub frame: usize,
    /// Position within the frame's detection list.
    pub index: usize,
    pub bbox: BBox,
    pub confidence: f64,
    pub features: FeatureVector,
    pub class: BehaviorClass,
    pub proba: Vec<f64>,
    pub track_id: Option<u64>,
}

/// Majority class over a track's associated detections.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackClass {
    pub track_id: u64,
    pub detections: usize,
    pub class: BehaviorClass,
    pub confirmed: bool,
}

#[derive(Debug, Clone)]
pub struct LargeScaleResult {
    pub detections: Vec<DetectionDecision>,
    pub records: Vec<TrackRecord>,
    pub track_classes: Vec<TrackClass>,
    pub truth: Option<Vec<Vec<TruthEntry>>>,
    pub metrics: MetricsTable,
    pub bundle: ReportBundle,
    pub warnings: Vec<String>,
}

const DETECTION_STAGE: &str = "detections.csv";

fn decisions_to_csv(decisions: &[DetectionDecision], tracks: &[TrackClass]) -> String {
    let majority: BTreeMap<u64, BehaviorClass> =
        tracks.iter().map(|t| (t.track_id, t.class)).collect();
    let mut out = String::from("frame,detection,x,y,w,h,confidence,class,track_id,track_class");
    for c in BehaviorClass::ALL {
        let _ = write!(out, ",p_{}", c.as_str());
    }
    out.push('\n');
    for d in decisions {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            d.frame,
            d.index,
            d.bbox.x,
            d.bbox.y,
            d.bbox.w,
            d.bbox.h,
            d.confidence,
            d.class.as_str(),
            d.track_id.map(|t| t.to_string()).unwrap_or_default(),
            d.track_id
                .and_then(|t| majority.get(&t))
                .map(|c| c.as_str())
                .unwrap_or("")
        );
        for p in &d.proba {
            let _ = write!(out, ",{p}");
        }
        out.push('\n');
    }
    out
}

fn track_classes_to_csv(tracks: &[TrackClass]) -> String {
    let mut out = String::from("track_id,detections,class,confirmed\n");
    for t in tracks {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            t.track_id,
            t.detections,
            t.class.as_str(),
            u8::from(t.confirmed)
        );
    }
    out
}

/// Per-class recall and precision, one-vs-rest AUC where probabilities are given.
fn class_report(
    metrics: &mut MetricsTable,
    curves: &mut Vec<(String, RocCurve)>,
    section: &str,
    predicted: &[usize],
    actual: &[usize],
    probas: Option<&[Vec<f64>]>,
) -> Result<()> {
    let k = BehaviorClass::ALL.len();
    if actual.is_empty() {
        metrics.push(section, "support", 0);
        return Ok(());
    }
    let correct = predicted.iter().zip(actual).filter(|(p, a)| p == a).count();
    metrics.push(section, "support", actual.len());
    metrics.push(section, "accuracy", correct as f64 / actual.len() as f64);
    let counts = per_class_counts(predicted, actual, k);
    let mut recalls = Vec::new();
    for (class, c) in BehaviorClass::ALL.iter().zip(&counts) {
        if c.tp + c.fn_ + c.fp == 0 {
            continue;
        }
        let name = class.as_str();
        metrics.push(section, &format!("{name}.support"), c.tp + c.fn_);
        if c.tp + c.fn_ > 0 {
            let recall = c.tp as f64 / (c.tp + c.fn_) as f64;
            recalls.push(recall);
            metrics.push(section, &format!("{name}.recall"), recall);
        }
        if c.tp + c.fp > 0 {
            metrics.push(
                section,
                &format!("{name}.precision"),
                c.tp as f64 / (c.tp + c.fp) as f64,
            );
        }
    }
    if !recalls.is_empty() {
        metrics.push(
            section,
            "macro_recall",
            recalls.iter().sum::<f64>() / recalls.len() as f64,
        );
    }
    if let Some(probas) = probas {
        let (per_class, macro_auc) = one_vs_rest_auc(probas, actual, k)?;
        for (class, auc) in BehaviorClass::ALL.iter().zip(&per_class) {
            let Some(auc) = auc else { continue };
            metrics.push(section, &format!("{}.auc", class.as_str()), auc);
            let scores: Vec<(f64, bool)> = probas
                .iter()
                .zip(actual)
                .map(|(p, a)| (p[class.index()], *a == class.index()))
                .collect();
            curves.push((format!("class:{}", class.as_str()), roc_auc(&scores)?));
        }
        if let Some(m) = macro_auc {
            metrics.push(section, "macro_auc", m);
        }
    }
    Ok(())
}

pub fn run_large_scale(config: &PipelineConfig, options: &RunOptions) -> Result<LargeScaleResult> {
    config.validate()?;
    let stages = Stages::new(options);
    let test = load_source(&config.test).map_err(|e| e.in_stage("load"))?;
    let sequence = &test.sequence;
    let (width, height) = sequence.dimensions();
    let n = sequence.len();
    let mut warnings = test.warnings.clone();
    let mut bundle = ReportBundle::default();

    let forest = if let Some(path) = &config.models.rf {
        RandomForestModel::load(path).map_err(|e| e.in_stage("forest"))?
    } else {
        let train = load_train(config, "behavior forest").map_err(|e| e.in_stage("forest"))?;
        let polars = all_polars(&train.sequence, config).map_err(|e| e.in_stage("forest"))?;
        let model =
            train_behavior_forest(&train, &polars, config).map_err(|e| e.in_stage("forest"))?;
        bundle.insert("models/rf.csrf", model.to_bytes());
        model
    };
    if forest.n_classes != BehaviorClass::ALL.len() {
        return Err(Error::Config(format!(
            "behavior forest has {} classes, expected {}",
            forest.n_classes,
            BehaviorClass::ALL.len()
        ))
        .in_stage("forest"));
    }

    let mut polars = BTreeMap::new();
    let by_frame: BTreeMap<usize, Vec<Detection>> = if let Some(path) =
        stages.cached(DETECTION_STAGE)
    {
        ingest_detections(&path, width, height)
            .map_err(|e| e.in_stage("detect"))?
            .by_frame
    } else {
        let by_frame = if let Some(path) = &config.models.detections {
            let ingested =
                ingest_detections(path, width, height).map_err(|e| e.in_stage("detect"))?;
            warnings.extend(ingested.warnings);
            ingested.by_frame
        } else {
            let all: Vec<usize> = (0..n).collect();
            polars = polars_for(sequence, &all, config, &stages).map_err(|e| e.in_stage("flow"))?;
            let detector = MotionDetector {
                threshold: config.mask.threshold,
                min_area: config.mask.min_area,
            };
            let mut by_frame = BTreeMap::new();
            for (i, frame) in sequence.frames().iter().enumerate() {
                let dets = detector
                    .detect(frame, polars.get(&i))
                    .map_err(|e| e.in_stage("detect"))?;
                if !dets.is_empty() {
                    by_frame.insert(i, dets);
                }
            }
            by_frame
        };
        let rows: Vec<DetectionRow> = by_frame
            .values()
            .flatten()
            .map(|d| DetectionRow {
                video_id: sequence.source_id().to_string(),
                frame: d.frame,
                bbox: d.bbox,
                class_label: None,
                confidence: d.confidence,
                line: 0,
            })
            .collect();
        stages.save(DETECTION_STAGE, |p| {
            std::fs::write(p, detection_rows_to_csv(&rows)).map_err(|e| Error::io(p, e))
        })?;
        by_frame
    };
    if let Some(bad) = by_frame.keys().find(|&&f| f >= n) {
        return Err(Error::InvalidArgument(format!(
            "detections name frame {bad} of a {n}-frame sequence"
        ))
        .in_stage("detect"));
    }

    let needed: Vec<usize> = by_frame
        .keys()
        .copied()
        .filter(|f| !polars.contains_key(f))
        .collect();
    polars.extend(polars_for(sequence, &needed, config, &stages).map_err(|e| e.in_stage("flow"))?);

    let mut regions: Vec<(usize, usize, &Detection, Region)> = Vec::new();
    for (&frame, dets) in &by_frame {
        for (j, d) in dets.iter().enumerate() {
            match Region::from_bbox(j, &d.bbox, width, height) {
                Some(region) => regions.push((frame, j, d, region)),
                None => warnings.push(format!(
                    "frame {frame}: detection {j} covers no pixel centers and was skipped"
                )),
            }
        }
    }
    let items: Vec<(usize, usize, BBox, &FlowPolar, &[usize])> = regions
        .iter()
        .map(|(frame, j, d, r)| {
            (
                *frame,
                *j,
                d.bbox,
                &polars[frame],
                r.pixel_indices.as_slice(),
            )
        })
        .collect();
    let features = staged_features(&stages, &items).map_err(|e| e.in_stage("features"))?;
    let mut decisions: Vec<DetectionDecision> = regions
        .iter()
        .zip(&features)
        .map(|((frame, j, d, _), f)| {
            let proba = forest.predict_proba(&f.to_array())?;
            let class = BehaviorClass::from_index(argmax(&proba)).expect("class index in range");
            Ok(DetectionDecision {
                frame: *frame,
                index: *j,
                bbox: d.bbox,
                confidence: d.confidence,
                features: *f,
                class,
                proba,
                track_id: None,
            })
        })
        .collect::<Result<_>>()
        .map_err(|e: Error| e.in_stage("classify"))?;

    let mut tracker =
        Tracker::new(config.tracker, width, height).map_err(|e| e.in_stage("track"))?;
    let mut cursor = 0;
    for frame in 0..n {
        let start = cursor;
        while cursor < decisions.len() && decisions[cursor].frame == frame {
            cursor += 1;
        }
        let dets: Vec<Detection> = decisions[start..cursor]
            .iter()
            .map(|d| Detection {
                frame,
                bbox: d.bbox,
                confidence: d.confidence,
                class_label: Some(d.class),
            })
            .collect();
        let before = tracker.records().len();
        tracker
            .step(frame, &dets)
            .map_err(|e| e.in_stage("track"))?;
        for r in &tracker.records()[before..] {
            if let Some(j) = r.detection {
                decisions[start + j].track_id = Some(r.track_id);
            }
        }
    }
    let records = tracker.records().to_vec();

    let mut votes: BTreeMap<u64, (Vec<f64>, usize, bool)> = BTreeMap::new();
    for r in &records {
        let entry = votes
            .entry(r.track_id)
            .or_insert_with(|| (vec![0.0; BehaviorClass::ALL.len()], 0, false));
        entry.2 |= r.status == TrackStatus::Confirmed;
    }
    for d in &decisions {
        if let Some(entry) = d.track_id.and_then(|t| votes.get_mut(&t)) {
            entry.0[d.class.index()] += 1.0;
            entry.1 += 1;
        }
    }
    let track_classes: Vec<TrackClass> = votes
        .into_iter()
        .map(|(track_id, (counts, detections, confirmed))| TrackClass {
            track_id,
            detections,
            class: BehaviorClass::from_index(argmax(&counts)).expect("class index in range"),
            confirmed,
        })
        .collect();
    let majority: BTreeMap<u64, BehaviorClass> = track_classes
        .iter()
        .map(|t| (t.track_id, t.class))
        .collect();

    let mut metrics = MetricsTable::default();
    let mut curves: Vec<(String, RocCurve)> = Vec::new();
    metrics.push("run", "pipeline", PipelineKind::LargeScale.as_str());
    metrics.push("run", "source", sequence.source_id());
    metrics.push("run", "frames", n);
    metrics.push("run", "detections", decisions.len());
    metrics.push("run", "tracks", track_classes.len());
    metrics.push(
        "run",
        "confirmed_tracks",
        track_classes.iter().filter(|t| t.confirmed).count(),
    );
    metrics.push("run", "degenerate", u8::from(decisions.is_empty()));
    metrics.push(
        "run",
        "track_criterion",
        config.eval.track_criterion.describe(),
    );

    if let Some(truth) = &test.truth {
        let mut det = ConfusionCounts::default();
        let mut pix = ConfusionCounts::default();
        let mut actual = Vec::new();
        let mut predicted = Vec::new();
        let mut probas = Vec::new();
        let mut track_actual = Vec::new();
        let mut track_predicted = Vec::new();
        let mut start = 0;
        for (frame, gts) in truth.iter().enumerate() {
            let mut end = start;
            while end < decisions.len() && decisions[end].frame == frame {
                end += 1;
            }
            let in_frame = &decisions[start..end];
            start = end;
            let preds: Vec<Detection> = in_frame
                .iter()
                .map(|d| Detection {
                    frame,
                    bbox: d.bbox,
                    confidence: d.confidence,
                    class_label: Some(d.class),
                })
                .collect();
            let boxes: Vec<BBox> = gts.iter().map(|g| g.bbox).collect();
            let matched = match_detections(&preds, &boxes, config.eval.iou_threshold)?;
            det += matched.counts;
            pix += pixel_accuracy(&preds, &boxes, config.eval.iou_threshold, width, height)?;
            for pair in &matched.pairs {
                let Some(class) = gts[pair.gt].class else {
                    continue;
                };
                let d = &in_frame[pair.pred];
                actual.push(class.index());
                predicted.push(d.class.index());
                probas.push(d.proba.clone());
                if let Some(track_class) = d.track_id.and_then(|t| majority.get(&t)) {
                    track_actual.push(class.index());
                    track_predicted.push(track_class.index());
                }
            }
        }
        push_metrics(&mut metrics, "detection", &det);
        push_metrics(&mut metrics, "pixel", &pix);
        class_report(
            &mut metrics,
            &mut curves,
            "per_detection",
            &predicted,
            &actual,
            Some(&probas),
        )?;
        class_report(
            &mut metrics,
            &mut curves,
            "per_track_majority",
            &track_predicted,
            &track_actual,
            None,
        )?;

        let track_boxes: Vec<TrackBox> = records
            .iter()
            .filter(|r| r.status == TrackStatus::Confirmed)
            .map(|r| TrackBox {
                frame: r.frame,
                track_id: r.track_id,
                bbox: r.bbox(),
            })
            .collect();
        let truth_boxes: Vec<TruthBox> = truth
            .iter()
            .flatten()
            .map(|t| TruthBox {
                frame: t.frame,
                id: t.id,
                bbox: t.bbox,
            })
            .collect();
        let report =
            track_assignment_metrics(&track_boxes, &truth_boxes, config.eval.track_criterion)?;
        push_metrics(&mut metrics, "track_per_frame", &report.per_frame);
        push_metrics(&mut metrics, "track_per_track", &report.per_track);
    }

    bundle.insert("config.resolved", config.to_toml()?);
    bundle.insert("metrics.csv", metrics.to_csv());
    roc_files(&mut bundle, &curves);
    bundle.insert("tracks.csv", tracks_to_csv(&records));
    bundle.insert(
        "detections.csv",
        decisions_to_csv(&decisions, &track_classes),
    );
    bundle.insert("track_classes.csv", track_classes_to_csv(&track_classes));
    warnings.sort();
    bundle.insert("warnings.txt", warnings_text(&warnings));
    if let Some(dir) = &options.out {
        bundle.write(dir)?;
    }
    Ok(LargeScaleResult {
        detections: decisions,
        records,
        track_classes,
        truth: test.truth,
        metrics,
        bundle,
        warnings,
    })
}

/// Either pipeline's result.
#[derive(Debug, Clone)]
pub enum RunResult {
    SmallScale(SmallScaleResult),
    LargeScale(LargeScaleResult),
}

impl RunResult {
    pub fn bundle(&self) -> &ReportBundle {
        match self {
            RunResult::SmallScale(r) => &r.bundle,
            RunResult::LargeScale(r) => &r.bundle,
        }
    }

    pub fn metrics(&self) -> &MetricsTable {
        match self {
            RunResult::SmallScale(r) => &r.metrics,
            RunResult::LargeScale(r) => &r.metrics,
        }
    }
}

pub fn run(config: &PipelineConfig, options: &RunOptions) -> Result<RunResult> {
    match config.pipeline {
        PipelineKind::SmallScale => run_small_scale(config, options).map(RunResult::SmallScale),
        PipelineKind::LargeScale => run_large_scale(config, options).map(RunResult::LargeScale),
    }
}
