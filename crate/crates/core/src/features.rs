//! Per-region statistics of flow magnitude and orientation.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::FlowPolar;
use crate::geometry::{iou, BBox};
use crate::region::Region;

/// Population statistics of magnitude and orientation over one region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector {
    pub mu_m: f64,
    pub mu_r: f64,
    pub var_m: f64,
    pub var_r: f64,
    pub sd_m: f64,
    pub sd_r: f64,
    pub p: usize,
}

pub const FEATURE_NAMES: [&str; 7] = ["mu_m", "mu_r", "var_m", "var_r", "sd_m", "sd_r", "p"];

impl FeatureVector {
    /// Classifier input in [`FEATURE_NAMES`] order.
    pub fn to_array(&self) -> [f64; 7] {
        [
            self.mu_m,
            self.mu_r,
            self.var_m,
            self.var_r,
            self.sd_m,
            self.sd_r,
            self.p as f64,
        ]
    }
}

fn mean_var(values: impl Iterator<Item = f64> + Clone, p: f64) -> (f64, f64) {
    let mean = values.clone().sum::<f64>() / p;
    let var = values.map(|x| (x - mean) * (x - mean)).sum::<f64>() / p;
    (mean, var)
}

/// Statistics over `pixels` (row-major indices into `polar`).
pub fn pixel_features(polar: &FlowPolar, pixels: &[usize]) -> Result<FeatureVector> {
    if pixels.is_empty() {
        return Err(Error::Empty("region has no pixels".into()));
    }
    if let Some(&k) = pixels.iter().find(|&&k| k >= polar.len()) {
        return Err(Error::InvalidArgument(format!(
            "pixel {k} outside {}x{} raster",
            polar.width, polar.height
        )));
    }
    let p = pixels.len() as f64;
    let (mu_m, var_m) = mean_var(pixels.iter().map(|&k| polar.magnitude[k]), p);
    let (mu_r, var_r) = mean_var(pixels.iter().map(|&k| polar.orientation[k]), p);
    Ok(FeatureVector {
        mu_m,
        mu_r,
        var_m,
        var_r,
        sd_m: var_m.sqrt(),
        sd_r: var_r.sqrt(),
        p: pixels.len(),
    })
}

pub fn region_features(polar: &FlowPolar, region: &Region) -> Result<FeatureVector> {
    pixel_features(polar, &region.pixel_indices)
}

/// One row of a feature table.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub frame: usize,
    pub region_id: usize,
    pub bbox: BBox,
    pub features: FeatureVector,
    /// Class index, when ground truth was available.
    pub label: Option<usize>,
}

impl FeatureRow {
    /// Stable row key used for seeding: frame in the high bits, region in the low bits.
    pub fn key(&self) -> u64 {
        ((self.frame as u64) << 20) | (self.region_id as u64 & 0xF_FFFF)
    }
}

/// A ground-truth box with the class index it carries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledBox {
    pub bbox: BBox,
    pub label: usize,
}

/// Index of the ground truth with the best IOU `>= threshold`; ties go to the lower index.
pub fn best_iou_match(bbox: &BBox, truths: &[LabeledBox], threshold: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, t) in truths.iter().enumerate() {
        let Ok(score) = iou(bbox, &t.bbox) else {
            continue;
        };
        if score >= threshold && best.map(|(_, b)| score > b).unwrap_or(true) {
            best = Some((i, score));
        }
    }
    best.map(|(i, _)| i)
}

/// How training labels are attached to feature rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelTransfer {
    /// Best-IOU ground truth at `>= 0.5`; unmatched rows get `unmatched_label`.
    Iou,
    /// Every region takes the frame's label (1 abnormal, 0 normal).
    FrameLabel,
}

pub const LABEL_IOU_THRESHOLD: f64 = 0.5;

/// Builds the feature table for a sequence of polar rasters and their regions.
///
/// `truths[i]` holds the ground-truth boxes of frame `frames[i]`. With
/// [`LabelTransfer::Iou`], regions with no match receive `unmatched_label`.
pub fn batch_features(
    frames: &[(usize, &FlowPolar, &[Region])],
    truths: Option<&[Vec<LabeledBox>]>,
    frame_labels: Option<&[bool]>,
    transfer: LabelTransfer,
    unmatched_label: Option<usize>,
) -> Result<Vec<FeatureRow>> {
    let mut rows = Vec::new();
    for (i, (frame, polar, regions)) in frames.iter().enumerate() {
        for region in regions.iter() {
            let features = region_features(polar, region)?;
            let label = match transfer {
                LabelTransfer::Iou => truths.and_then(|t| t.get(i)).and_then(|boxes| {
                    best_iou_match(&region.bbox, boxes, LABEL_IOU_THRESHOLD)
                        .map(|j| boxes[j].label)
                        .or(unmatched_label)
                }),
                LabelTransfer::FrameLabel => frame_labels
                    .and_then(|l| l.get(*frame))
                    .map(|abnormal| usize::from(*abnormal)),
            };
            rows.push(FeatureRow {
                frame: *frame,
                region_id: region.id,
                bbox: region.bbox,
                features,
                label,
            });
        }
    }
    rows.sort_by_key(|r| (r.frame, r.region_id));
    Ok(rows)
}

pub const FEATURE_HEADER: &str = "frame,region_id,mu_m,mu_r,var_m,var_r,sd_m,sd_r,p,label";

/// CSV export; `label` is written as the class index or left empty.
pub fn features_to_csv(rows: &[FeatureRow]) -> String {
    let mut out = format!("{FEATURE_HEADER}\n");
    for r in rows {
        let f = &r.features;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.frame,
            r.region_id,
            f.mu_m,
            f.mu_r,
            f.var_m,
            f.var_r,
            f.sd_m,
            f.sd_r,
            f.p,
            r.label.map(|l| l.to_string()).unwrap_or_default()
        );
    }
    out
}

pub fn write_features(path: &Path, rows: &[FeatureRow]) -> Result<()> {
    std::fs::write(path, features_to_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Parses [`features_to_csv`] output. Bounding boxes are not part of the table and come
/// back as zero-sized.
pub fn parse_features_csv(text: &str) -> Result<Vec<FeatureRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i as u64 + 1;
        let line = line.trim_end_matches('\r');
        if line.is_empty() || (i == 0 && line.starts_with("frame")) {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 10 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 10 columns, found {}", cols.len()),
            });
        }
        let f = |j: usize| -> Result<f64> {
            cols[j].trim().parse::<f64>().map_err(|e| Error::Parse {
                line: line_no,
                message: format!("column {j}: {e}"),
            })
        };
        let u = |j: usize| -> Result<usize> {
            cols[j].trim().parse::<usize>().map_err(|e| Error::Parse {
                line: line_no,
                message: format!("column {j}: {e}"),
            })
        };
        rows.push(FeatureRow {
            frame: u(0)?,
            region_id: u(1)?,
            bbox: BBox::new(0.0, 0.0, 0.0, 0.0),
            features: FeatureVector {
                mu_m: f(2)?,
                mu_r: f(3)?,
                var_m: f(4)?,
                var_r: f(5)?,
                sd_m: f(6)?,
                sd_r: f(7)?,
                p: u(8)?,
            },
            label: if cols[9].trim().is_empty() {
                None
            } else {
                Some(u(9)?)
            },
        });
    }
    Ok(rows)
}
