//! Classification metrics, ROC/AUC, IOU-based detection matching, pixel-level counts and
//! track-assignment scoring.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::spatial::Detection;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        ConfusionCounts { tp, tn, fp, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = ConfusionCounts;
    fn add(self, o: Self) -> Self {
        ConfusionCounts::new(
            self.tp + o.tp,
            self.tn + o.tn,
            self.fp + o.fp,
            self.fn_ + o.fn_,
        )
    }
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when a ratio was 0/0 and defined as 0.
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub f1_undefined: bool,
}

fn ratio(num: f64, den: f64) -> (f64, bool) {
    if den == 0.0 {
        (0.0, true)
    } else {
        (num / den, false)
    }
}

/// Accuracy, precision, recall and F1 from confusion counts.
pub fn classification_metrics(c: &ConfusionCounts) -> Result<Metrics> {
    if c.total() == 0 {
        return Err(Error::InvalidArgument(
            "all confusion counts are zero".into(),
        ));
    }
    let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
    let accuracy = (tp + tn) / (tp + tn + fp + fn_);
    let (precision, precision_undefined) = ratio(tp, tp + fp);
    let (recall, recall_undefined) = ratio(tp, tp + fn_);
    let (f1, f1_undefined) = ratio(2.0 * precision * recall, precision + recall);
    Ok(Metrics {
        accuracy,
        precision,
        recall,
        f1,
        precision_undefined,
        recall_undefined,
        f1_undefined,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores `>= threshold` are called positive; the first point uses +infinity.
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// ROC over every distinct score, with trapezoidal AUC. Tied scores move along the diagonal,
/// so ties count half.
pub fn roc_auc(scores: &[(f64, bool)]) -> Result<RocCurve> {
    if scores.iter().any(|(s, _)| !s.is_finite()) {
        return Err(Error::NonFinite("ROC score".into()));
    }
    let pos = scores.iter().filter(|(_, l)| *l).count() as f64;
    let neg = scores.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::InvalidArgument(
            "ROC needs both positive and negative labels".into(),
        ));
    }
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut auc = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        let prev = points[points.len() - 1];
        let p = RocPoint {
            fpr: fp / neg,
            tpr: tp / pos,
            threshold: t,
        };
        auc += (p.fpr - prev.fpr) * (p.tpr + prev.tpr) / 2.0;
        points.push(p);
    }
    Ok(RocCurve { points, auc })
}

/// Per-class one-vs-rest AUC (`None` where a class is absent or universal) and their mean.
pub fn one_vs_rest_auc(
    probas: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
) -> Result<(Vec<Option<f64>>, Option<f64>)> {
    if probas.len() != labels.len() {
        return Err(Error::SizeMismatch(format!(
            "{} score rows for {} labels",
            probas.len(),
            labels.len()
        )));
    }
    let mut per_class = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let scores: Vec<(f64, bool)> = probas
            .iter()
            .zip(labels)
            .map(|(p, l)| (p[c], *l == c))
            .collect();
        per_class.push(roc_auc(&scores).ok().map(|r| r.auc));
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let macro_auc = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    Ok((per_class, macro_auc))
}

/// One-vs-rest counts for each class.
pub fn per_class_counts(
    predicted: &[usize],
    actual: &[usize],
    n_classes: usize,
) -> Vec<ConfusionCounts> {
    (0..n_classes)
        .map(|c| {
            let mut k = ConfusionCounts::default();
            for (p, a) in predicted.iter().zip(actual) {
                match (*p == c, *a == c) {
                    (true, true) => k.tp += 1,
                    (true, false) => k.fp += 1,
                    (false, true) => k.fn_ += 1,
                    (false, false) => k.tn += 1,
                }
            }
            k
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchPair {
    pub pred: usize,
    pub gt: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub counts: ConfusionCounts,
    pub pairs: Vec<MatchPair>,
}

/// Greedy matching in descending prediction confidence (ties: lower prediction index). Each
/// prediction takes the unclaimed ground truth of highest IOU at or above `iou_threshold`.
pub fn match_detections(
    preds: &[Detection],
    gts: &[BBox],
    iou_threshold: f64,
) -> Result<MatchResult> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence));
    let mut claimed = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for p in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if claimed[g] {
                continue;
            }
            let o = iou(&preds[p].bbox, gt)?;
            if o >= iou_threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        if let Some((g, o)) = best {
            claimed[g] = true;
            pairs.push(MatchPair {
                pred: p,
                gt: g,
                iou: o,
            });
        }
    }
    let tp = pairs.len() as u64;
    Ok(MatchResult {
        counts: ConfusionCounts::new(tp, 0, preds.len() as u64 - tp, gts.len() as u64 - tp),
        pairs,
    })
}

/// Pixel-level counts for given matched pairs: pixels in a matched pair's intersection are TP,
/// remaining prediction pixels FP, remaining ground-truth pixels FN, everything else TN.
pub fn pixel_accuracy_with_pairs(
    preds: &[BBox],
    gts: &[BBox],
    pairs: &[(usize, usize)],
    width: usize,
    height: usize,
) -> ConfusionCounts {
    let mut class = vec![0u8; width * height]; // 0 TN, 1 FN, 2 FP, 3 TP
    let mut paint = |b: &BBox, level: u8, other: Option<&BBox>| {
        let (x0, y0, x1, y1) = b.pixel_span(width, height);
        for y in y0..y1 {
            for x in x0..x1 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if !b.contains_point(px, py) {
                    continue;
                }
                if other.is_some_and(|o| !o.contains_point(px, py)) {
                    continue;
                }
                let k = y * width + x;
                class[k] = class[k].max(level);
            }
        }
    };
    for g in gts {
        paint(g, 1, None);
    }
    for p in preds {
        paint(p, 2, None);
    }
    for &(p, g) in pairs {
        paint(&preds[p], 3, Some(&gts[g]));
    }
    let mut c = ConfusionCounts::default();
    for v in class {
        match v {
            0 => c.tn += 1,
            1 => c.fn_ += 1,
            2 => c.fp += 1,
            _ => c.tp += 1,
        }
    }
    c
}

/// Pixel-level counts after greedy IOU matching at `iou_threshold`.
pub fn pixel_accuracy(
    preds: &[Detection],
    gts: &[BBox],
    iou_threshold: f64,
    width: usize,
    height: usize,
) -> Result<ConfusionCounts> {
    let m = match_detections(preds, gts, iou_threshold)?;
    let boxes: Vec<BBox> = preds.iter().map(|d| d.bbox).collect();
    let pairs: Vec<(usize, usize)> = m.pairs.iter().map(|p| (p.pred, p.gt)).collect();
    Ok(pixel_accuracy_with_pairs(
        &boxes, gts, &pairs, width, height,
    ))
}

/// When a track box counts as following a ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrackCriterion {
    Iou {
        threshold: f64,
    },
    /// The track's center lies inside the ground-truth box.
    CenterInBox,
}

impl Default for TrackCriterion {
    fn default() -> Self {
        TrackCriterion::Iou { threshold: 0.5 }
    }
}

impl TrackCriterion {
    pub fn describe(&self) -> String {
        match self {
            TrackCriterion::Iou { threshold } => format!("iou>={threshold}"),
            TrackCriterion::CenterInBox => "center_in_box".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackBox {
    pub frame: usize,
    pub track_id: u64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthBox {
    pub frame: usize,
    pub id: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackAssignmentReport {
    /// Frame-by-frame counts summed over frames.
    pub per_frame: ConfusionCounts,
    /// A track is TP when most of its frames matched; ground truths never followed by a TP
    /// track are FN.
    pub per_track: ConfusionCounts,
    pub criterion: TrackCriterion,
}

/// Scores track boxes against ground truth frame by frame. Within a frame tracks are taken in
/// id order and each claims the best unclaimed ground truth satisfying `criterion`.
pub fn track_assignment_metrics(
    tracks: &[TrackBox],
    gts: &[TruthBox],
    criterion: TrackCriterion,
) -> Result<TrackAssignmentReport> {
    let mut frames: BTreeSet<usize> = tracks.iter().map(|t| t.frame).collect();
    frames.extend(gts.iter().map(|g| g.frame));

    let mut per_frame = ConfusionCounts::default();
    // track id -> (matched frames, total frames, matched gt ids)
    let mut track_stats: BTreeMap<u64, (usize, usize, BTreeSet<usize>)> = BTreeMap::new();
    for frame in frames {
        let mut ts: Vec<&TrackBox> = tracks.iter().filter(|t| t.frame == frame).collect();
        ts.sort_by_key(|t| t.track_id);
        let gs: Vec<&TruthBox> = gts.iter().filter(|g| g.frame == frame).collect();
        let mut claimed = vec![false; gs.len()];
        for t in ts {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gs.iter().enumerate() {
                if claimed[j] {
                    continue;
                }
                let score = match criterion {
                    TrackCriterion::Iou { threshold } => {
                        let o = iou(&t.bbox, &g.bbox)?;
                        (o >= threshold).then_some(o)
                    }
                    TrackCriterion::CenterInBox => {
                        let (cx, cy) = t.bbox.center();
                        let (gx, gy) = g.bbox.center();
                        g.bbox
                            .contains_point(cx, cy)
                            .then(|| -((cx - gx).powi(2) + (cy - gy).powi(2)))
                    }
                };
                if let Some(s) = score {
                    if best.is_none_or(|(_, b)| s > b) {
                        best = Some((j, s));
                    }
                }
            }
            let entry = track_stats.entry(t.track_id).or_default();
            entry.1 += 1;
            match best {
                Some((j, _)) => {
                    claimed[j] = true;
                    per_frame.tp += 1;
                    entry.0 += 1;
                    entry.2.insert(gs[j].id);
                }
                None => per_frame.fp += 1,
            }
        }
        per_frame.fn_ += claimed.iter().filter(|c| !**c).count() as u64;
    }

    let mut per_track = ConfusionCounts::default();
    let mut followed = BTreeSet::new();
    for (matched, total, ids) in track_stats.values() {
        if 2 * matched > *total {
            per_track.tp += 1;
            followed.extend(ids.iter().copied());
        } else {
            per_track.fp += 1;
        }
    }
    let all_ids: BTreeSet<usize> = gts.iter().map(|g| g.id).collect();
    per_track.fn_ = all_ids.difference(&followed).count() as u64;
    Ok(TrackAssignmentReport {
        per_frame,
        per_track,
        criterion,
    })
}

/// Line plot of one or more ROC curves with the chance diagonal.
pub fn roc_svg(curves: &[(String, &RocCurve)]) -> String {
    const SIZE: f64 = 400.0;
    const PAD: f64 = 40.0;
    const COLORS: [&str; 6] = [
        "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
    ];
    let plot = SIZE - 2.0 * PAD;
    let sx = |v: f64| PAD + v * plot;
    let sy = |v: f64| SIZE - PAD - v * plot;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n"
    );
    let _ = writeln!(
        svg,
        "<rect width=\"{SIZE}\" height=\"{SIZE}\" fill=\"white\"/>"
    );
    let _ = writeln!(
        svg,
        "<rect x=\"{PAD}\" y=\"{PAD}\" width=\"{plot}\" height=\"{plot}\" fill=\"none\" stroke=\"black\"/>"
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#999\" stroke-dasharray=\"4 4\"/>",
        sx(0.0),
        sy(0.0),
        sx(1.0),
        sy(1.0)
    );
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">False positive rate</text>",
        SIZE / 2.0,
        SIZE - 10.0
    );
    let _ = writeln!(
        svg,
        "<text x=\"14\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">True positive rate</text>",
        SIZE / 2.0,
        SIZE / 2.0
    );
    for (i, (name, curve)) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = curve
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", sx(p.fpr), sy(p.tpr)))
            .collect();
        let _ = writeln!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>",
            pts.join(" ")
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{} (AUC {:.4})</text>",
            sx(0.45),
            sy(0.1) + 16.0 * i as f64,
            xml_escape(name),
            curve.auc
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
