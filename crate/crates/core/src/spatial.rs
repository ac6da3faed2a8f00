//! Frame-level anomaly gate and per-frame detectors.
//!
//! The gate and detector are traits so that the pipelines run unchanged whether decisions
//! come from the built-in flow-feature baseline or from files produced by an external model.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{parse_detection_rows, parse_detection_rows_str, BehaviorClass, DetectionRow};
use crate::error::{Error, Result};
use crate::flow::{sequence_flows, to_polar, FlowPolar, HsParams};
use crate::forest::{rf_train, ForestParams, RandomForestModel, Reader, TrainingSet};
use crate::frame::{Frame, VideoSequence};
use crate::geometry::BBox;
use crate::region::{connected_components, magnitude_mask, ThresholdMode};

pub const DEFAULT_DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameVerdict {
    pub frame: usize,
    pub abnormal_score: f64,
    pub is_abnormal: bool,
}

impl FrameVerdict {
    pub fn new(frame: usize, abnormal_score: f64, threshold: f64) -> Self {
        FrameVerdict {
            frame,
            abnormal_score,
            is_abnormal: abnormal_score >= threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub frame: usize,
    pub bbox: BBox,
    pub confidence: f64,
    pub class_label: Option<BehaviorClass>,
}

/// Frame-level normal/abnormal decision.
pub trait FrameClassifier {
    fn score_frame(&self, frame: &Frame, polar: Option<&FlowPolar>) -> Result<FrameVerdict>;
}

/// Per-frame localization of individuals.
pub trait Detector {
    fn detect(&self, frame: &Frame, polar: Option<&FlowPolar>) -> Result<Vec<Detection>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateParams {
    pub bins: usize,
    /// Upper edge of the histogram range; larger magnitudes land in the last bin.
    pub max_magnitude: f64,
    pub decision_threshold: f64,
    pub forest: ForestParams,
}

impl Default for GateParams {
    fn default() -> Self {
        GateParams {
            bins: 16,
            max_magnitude: 4.0,
            decision_threshold: DEFAULT_DECISION_THRESHOLD,
            forest: ForestParams::default(),
        }
    }
}

/// Normalized magnitude histogram followed by the frame's mean and standard deviation.
pub fn frame_features(polar: &FlowPolar, bins: usize, max_magnitude: f64) -> Vec<f64> {
    let mut hist = vec![0.0; bins];
    for &m in &polar.magnitude {
        let b = ((m / max_magnitude) * bins as f64).floor();
        let b = if b.is_finite() {
            (b.max(0.0) as usize).min(bins - 1)
        } else {
            bins - 1
        };
        hist[b] += 1.0;
    }
    let n = polar.len().max(1) as f64;
    hist.iter_mut().for_each(|h| *h /= n);
    let (mean, sd) = polar.magnitude_stats();
    hist.push(mean);
    hist.push(sd);
    hist
}

/// Flow-feature random forest standing in for a frame-level CNN classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineFrameModel {
    pub bins: usize,
    pub max_magnitude: f64,
    pub decision_threshold: f64,
    pub forest: RandomForestModel,
}

/// Labeled frames as (sequence, per-frame polar rasters).
pub struct LabeledFlows<'a> {
    pub sequence: &'a VideoSequence,
    pub polars: &'a [FlowPolar],
}

/// Computes per-frame polar rasters for a sequence.
pub fn sequence_polars(sequence: &VideoSequence, hs: &HsParams) -> Result<Vec<FlowPolar>> {
    Ok(sequence_flows(sequence.frames(), hs)?
        .iter()
        .map(to_polar)
        .collect())
}

/// Trains the gate from sequences with frame labels.
pub fn baseline_train_from_flows(
    data: &[LabeledFlows<'_>],
    params: &GateParams,
    seed: u64,
) -> Result<BaselineFrameModel> {
    if params.bins == 0 || !(params.max_magnitude > 0.0) {
        return Err(Error::InvalidArgument(
            "gate needs bins >= 1 and max_magnitude > 0".into(),
        ));
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut keys = Vec::new();
    for (s, item) in data.iter().enumerate() {
        let frame_labels = item.sequence.frame_labels().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "sequence {} has no frame labels",
                item.sequence.source_id()
            ))
        })?;
        if item.polars.len() != frame_labels.len() {
            return Err(Error::SizeMismatch(format!(
                "{} flow rasters for {} frames",
                item.polars.len(),
                frame_labels.len()
            )));
        }
        for (i, (polar, abnormal)) in item.polars.iter().zip(frame_labels).enumerate() {
            features.push(frame_features(polar, params.bins, params.max_magnitude));
            labels.push(usize::from(*abnormal));
            keys.push(((s as u64) << 32) | i as u64);
        }
    }
    let set = TrainingSet::new(features, labels, keys, 2)?;
    let forest = rf_train(&set, &params.forest, seed)?;
    Ok(BaselineFrameModel {
        bins: params.bins,
        max_magnitude: params.max_magnitude,
        decision_threshold: params.decision_threshold,
        forest,
    })
}

/// Computes flow for each sequence and trains the gate on its frame labels.
pub fn baseline_train(
    sequences: &[&VideoSequence],
    hs: &HsParams,
    params: &GateParams,
    seed: u64,
) -> Result<BaselineFrameModel> {
    let polars: Vec<Vec<FlowPolar>> = sequences
        .iter()
        .map(|s| sequence_polars(s, hs))
        .collect::<Result<_>>()?;
    let data: Vec<LabeledFlows> = sequences
        .iter()
        .zip(&polars)
        .map(|(sequence, polars)| LabeledFlows { sequence, polars })
        .collect();
    baseline_train_from_flows(&data, params, seed)
}

const GATE_MAGIC: &[u8; 5] = b"CSSP1";

impl BaselineFrameModel {
    pub fn score_polar(&self, frame: usize, polar: &FlowPolar) -> Result<FrameVerdict> {
        let features = frame_features(polar, self.bins, self.max_magnitude);
        let proba = self.forest.predict_proba(&features)?;
        Ok(FrameVerdict::new(frame, proba[1], self.decision_threshold))
    }

    /// `CSSP1`, u32 bins, f64 max magnitude, f64 decision threshold, then the forest blob.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = GATE_MAGIC.to_vec();
        out.extend_from_slice(&(self.bins as u32).to_le_bytes());
        out.extend_from_slice(&self.max_magnitude.to_le_bytes());
        out.extend_from_slice(&self.decision_threshold.to_le_bytes());
        out.extend_from_slice(&self.forest.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(5)? != GATE_MAGIC {
            return Err(Error::Format("missing CSSP1 header".into()));
        }
        let bins = r.u32()?;
        let max_magnitude = r.f64()?;
        let decision_threshold = r.f64()?;
        let forest = RandomForestModel::from_bytes(r.rest())?;
        if forest.n_features != bins + 2 || forest.n_classes != 2 {
            return Err(Error::Format(
                "gate forest shape does not match bins".into(),
            ));
        }
        Ok(BaselineFrameModel {
            bins,
            max_magnitude,
            decision_threshold,
            forest,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

impl FrameClassifier for BaselineFrameModel {
    fn score_frame(&self, frame: &Frame, polar: Option<&FlowPolar>) -> Result<FrameVerdict> {
        let polar = polar
            .ok_or_else(|| Error::InvalidArgument("baseline gate needs the frame's flow".into()))?;
        self.score_polar(frame.index(), polar)
    }
}

/// Frame scores produced elsewhere, one `frame,score` row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct IngestedVerdicts {
    pub scores: BTreeMap<usize, f64>,
    pub decision_threshold: f64,
}

impl IngestedVerdicts {
    pub fn parse(text: &str, decision_threshold: f64) -> Result<Self> {
        let mut scores = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i as u64 + 1;
            let line = line.trim();
            if line.is_empty() || (i == 0 && line.starts_with("frame")) {
                continue;
            }
            let parse_err = |m: String| Error::Parse {
                line: line_no,
                message: m,
            };
            let mut cols = line.split(',');
            let frame = cols
                .next()
                .unwrap_or("")
                .trim()
                .parse::<usize>()
                .map_err(|e| parse_err(format!("bad frame: {e}")))?;
            let score = cols
                .next()
                .ok_or_else(|| parse_err("missing score".into()))?
                .trim()
                .parse::<f64>()
                .map_err(|e| parse_err(format!("bad score: {e}")))?;
            if !(0.0..=1.0).contains(&score) {
                return Err(parse_err(format!("score {score} outside [0,1]")));
            }
            scores.insert(frame, score);
        }
        Ok(IngestedVerdicts {
            scores,
            decision_threshold,
        })
    }

    pub fn load(path: &Path, decision_threshold: f64) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, decision_threshold)
    }
}

impl FrameClassifier for IngestedVerdicts {
    fn score_frame(&self, frame: &Frame, _polar: Option<&FlowPolar>) -> Result<FrameVerdict> {
        let score = self.scores.get(&frame.index()).copied().ok_or_else(|| {
            Error::InvalidArgument(format!("no ingested score for frame {}", frame.index()))
        })?;
        Ok(FrameVerdict::new(
            frame.index(),
            score,
            self.decision_threshold,
        ))
    }
}

pub fn verdicts_to_csv(verdicts: &[FrameVerdict]) -> String {
    let mut out = String::from("frame,score,abnormal\n");
    for v in verdicts {
        let _ = writeln!(
            out,
            "{},{},{}",
            v.frame,
            v.abnormal_score,
            u8::from(v.is_abnormal)
        );
    }
    out
}

/// Detections read from a file, grouped by frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestedDetections {
    pub by_frame: BTreeMap<usize, Vec<Detection>>,
    pub warnings: Vec<String>,
}

impl IngestedDetections {
    /// Groups rows by frame, clipping boxes to the frame and dropping those left empty.
    pub fn from_rows(rows: Vec<DetectionRow>, width: usize, height: usize) -> Self {
        let mut out = IngestedDetections::default();
        for row in rows {
            let bbox = if row.bbox.within(width as f64, height as f64) {
                Some(row.bbox)
            } else {
                let clipped = row.bbox.clip(width as f64, height as f64);
                let msg = match clipped {
                    Some(_) => format!("line {}: box exceeds the frame; clipped", row.line),
                    None => format!("line {}: box lies outside the frame; dropped", row.line),
                };
                log::warn!("{msg}");
                out.warnings.push(msg);
                clipped
            };
            if let Some(bbox) = bbox {
                out.by_frame.entry(row.frame).or_default().push(Detection {
                    frame: row.frame,
                    bbox,
                    confidence: row.confidence,
                    class_label: row.class_label,
                });
            }
        }
        out
    }

    pub fn for_frame(&self, frame: usize) -> Vec<Detection> {
        self.by_frame.get(&frame).cloned().unwrap_or_default()
    }
}

impl Detector for IngestedDetections {
    fn detect(&self, frame: &Frame, _polar: Option<&FlowPolar>) -> Result<Vec<Detection>> {
        Ok(self.for_frame(frame.index()))
    }
}

/// Reads a detection file (annotation schema, optional confidence column).
pub fn ingest_detections(path: &Path, width: usize, height: usize) -> Result<IngestedDetections> {
    Ok(IngestedDetections::from_rows(
        parse_detection_rows(path)?,
        width,
        height,
    ))
}

pub fn ingest_detections_str(
    text: &str,
    width: usize,
    height: usize,
) -> Result<IngestedDetections> {
    Ok(IngestedDetections::from_rows(
        parse_detection_rows_str(text)?,
        width,
        height,
    ))
}

/// Baseline detector: boxes of the connected components of the frame's magnitude mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionDetector {
    pub threshold: ThresholdMode,
    pub min_area: usize,
}

impl Detector for MotionDetector {
    fn detect(&self, frame: &Frame, polar: Option<&FlowPolar>) -> Result<Vec<Detection>> {
        let polar = polar.ok_or_else(|| {
            Error::InvalidArgument("motion detector needs the frame's flow".into())
        })?;
        let mask = magnitude_mask(polar, self.threshold.resolve(polar))?;
        Ok(connected_components(&mask, self.min_area)?
            .into_iter()
            .map(|r| {
                let mean = r
                    .pixel_indices
                    .iter()
                    .map(|&k| polar.magnitude[k])
                    .sum::<f64>()
                    / r.area() as f64;
                Detection {
                    frame: frame.index(),
                    bbox: r.bbox,
                    confidence: 1.0 - (-mean).exp(),
                    class_label: None,
                }
            })
            .collect())
    }
}
