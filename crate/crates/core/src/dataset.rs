//! Annotation CSV files, frame-label files and train/test splits.
//!
//! Annotation schema (one header line, UTF-8, LF or CRLF):
//!
//! ```text
//! video_id,frame,x,y,w,h,class_label
//! ```
//!
//! Detection files use the same columns with an optional trailing `confidence`
//! column, and allow an empty `class_label`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// The seven behavior classes of the annotation vocabulary, in index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorClass {
    DifferentCrowdDirection,
    MovingInOpposite,
    MovingNonHumanObject,
    Running,
    Sitting,
    Sleeping,
    Standing,
}

impl BehaviorClass {
    pub const ALL: [BehaviorClass; 7] = [
        BehaviorClass::DifferentCrowdDirection,
        BehaviorClass::MovingInOpposite,
        BehaviorClass::MovingNonHumanObject,
        BehaviorClass::Running,
        BehaviorClass::Sitting,
        BehaviorClass::Sleeping,
        BehaviorClass::Standing,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BehaviorClass::DifferentCrowdDirection => "different_crowd_direction",
            BehaviorClass::MovingInOpposite => "moving_in_opposite",
            BehaviorClass::MovingNonHumanObject => "moving_non_human_object",
            BehaviorClass::Running => "running",
            BehaviorClass::Sitting => "sitting",
            BehaviorClass::Sleeping => "sleeping",
            BehaviorClass::Standing => "standing",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Accepts the canonical snake_case names, case-insensitively, with spaces or
    /// hyphens in place of underscores.
    pub fn parse(s: &str) -> Option<Self> {
        let norm: String = s
            .trim()
            .chars()
            .map(|c| match c {
                ' ' | '-' => '_',
                c => c.to_ascii_lowercase(),
            })
            .collect();
        Self::ALL.into_iter().find(|c| c.as_str() == norm)
    }
}

impl std::fmt::Display for BehaviorClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRow {
    pub video_id: String,
    pub frame: usize,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub class_label: BehaviorClass,
    /// 1-based source line, 0 for rows built in memory.
    pub line: u64,
}

impl AnnotationRow {
    pub fn bbox(&self) -> BBox {
        BBox::new(self.x, self.y, self.w, self.h)
    }
}

/// A row of a detection file: annotation columns, optional label, optional confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRow {
    pub video_id: String,
    pub frame: usize,
    pub bbox: BBox,
    pub class_label: Option<BehaviorClass>,
    pub confidence: f64,
    pub line: u64,
}

fn reader(bytes: &[u8]) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(bytes)
}

fn parse_num<T: std::str::FromStr>(field: &str, name: &str, line: u64) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    field.parse::<T>().map_err(|e| Error::Parse {
        line,
        message: format!("bad {name} {field:?}: {e}"),
    })
}

/// Source column of each field, for files whose layout differs from the canonical one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ColumnMap {
    pub video_id: usize,
    pub frame: usize,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub class_label: usize,
    /// Optional in detection files, ignored for annotations.
    pub confidence: usize,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            video_id: 0,
            frame: 1,
            x: 2,
            y: 3,
            w: 4,
            h: 5,
            class_label: 6,
            confidence: 7,
        }
    }
}

impl ColumnMap {
    fn required(&self) -> usize {
        [self.video_id, self.frame, self.x, self.y, self.w, self.h, self.class_label]
            .into_iter()
            .max()
            .unwrap_or(0)
            + 1
    }

    fn allowed(&self, allow_confidence: bool) -> usize {
        if allow_confidence {
            self.required().max(self.confidence + 1)
        } else {
            self.required()
        }
    }
}

fn is_header(record: &csv::StringRecord, columns: &ColumnMap) -> bool {
    record
        .get(columns.frame)
        .map(|f| f.eq_ignore_ascii_case("frame"))
        .unwrap_or(false)
}

struct RawRow {
    video_id: String,
    frame: usize,
    bbox: BBox,
    label: String,
    confidence: Option<f64>,
    line: u64,
}

fn parse_rows(text: &str, columns: &ColumnMap, allow_confidence: bool) -> Result<Vec<RawRow>> {
    // csv's line counter skips the LF of a CRLF pair
    let text = text.replace("\r\n", "\n");
    let mut rows = Vec::new();
    let mut rdr = reader(text.as_bytes());
    for (i, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(i as u64 + 1);
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        if i == 0 && is_header(&record, columns) {
            continue;
        }
        let (required, allowed) = (columns.required(), columns.allowed(allow_confidence));
        if record.len() < required || record.len() > allowed {
            return Err(Error::Parse {
                line,
                message: format!("expected {required} columns, found {}", record.len()),
            });
        }
        let frame = parse_num::<usize>(&record[columns.frame], "frame", line)?;
        let x = parse_num::<f64>(&record[columns.x], "x", line)?;
        let y = parse_num::<f64>(&record[columns.y], "y", line)?;
        let w = parse_num::<f64>(&record[columns.w], "w", line)?;
        let h = parse_num::<f64>(&record[columns.h], "h", line)?;
        if [x, y, w, h].iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                line,
                message: "non-finite box coordinate".into(),
            });
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::NonPositiveExtent { line, w, h });
        }
        let confidence = match record.get(columns.confidence).filter(|_| allow_confidence) {
            Some(c) if !c.is_empty() => {
                let c = parse_num::<f64>(c, "confidence", line)?;
                if !(0.0..=1.0).contains(&c) {
                    return Err(Error::Parse {
                        line,
                        message: format!("confidence {c} outside [0,1]"),
                    });
                }
                Some(c)
            }
            _ => None,
        };
        rows.push(RawRow {
            video_id: record[columns.video_id].to_string(),
            frame,
            bbox: BBox::new(x, y, w, h),
            label: record[columns.class_label].to_string(),
            confidence,
            line,
        });
    }
    Ok(rows)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses annotation CSV text. Every row must carry a known class label.
pub fn parse_annotations_str(text: &str) -> Result<Vec<AnnotationRow>> {
    parse_annotations_str_with(text, &ColumnMap::default())
}

/// [`parse_annotations_str`] for a file with a different column layout.
pub fn parse_annotations_str_with(text: &str, columns: &ColumnMap) -> Result<Vec<AnnotationRow>> {
    parse_rows(text, columns, false)?
        .into_iter()
        .map(|r| {
            let class_label = BehaviorClass::parse(&r.label).ok_or(Error::UnknownLabel {
                line: r.line,
                label: r.label.clone(),
            })?;
            Ok(AnnotationRow {
                video_id: r.video_id,
                frame: r.frame,
                x: r.bbox.x,
                y: r.bbox.y,
                w: r.bbox.w,
                h: r.bbox.h,
                class_label,
                line: r.line,
            })
        })
        .collect()
}

pub fn parse_annotations(path: &Path) -> Result<Vec<AnnotationRow>> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::Parse {
        line: 0,
        message: format!("{}: not UTF-8: {e}", path.display()),
    })?;
    parse_annotations_str(text)
}

pub const ANNOTATION_HEADER: &str = "video_id,frame,x,y,w,h,class_label";

pub fn annotations_to_csv(rows: &[AnnotationRow]) -> String {
    let mut out = format!("{ANNOTATION_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            csv_field(&r.video_id),
            r.frame,
            r.x,
            r.y,
            r.w,
            r.h,
            r.class_label
        );
    }
    out
}

pub fn write_annotations(path: &Path, rows: &[AnnotationRow]) -> Result<()> {
    fs::write(path, annotations_to_csv(rows)).map_err(|e| Error::io(path, e))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Parses a detection file. A missing confidence column means confidence 1.
pub fn parse_detection_rows_str(text: &str) -> Result<Vec<DetectionRow>> {
    parse_detection_rows_str_with(text, &ColumnMap::default())
}

pub fn parse_detection_rows_str_with(text: &str, columns: &ColumnMap) -> Result<Vec<DetectionRow>> {
    parse_rows(text, columns, true)?
        .into_iter()
        .map(|r| {
            let class_label = if r.label.is_empty() {
                None
            } else {
                Some(BehaviorClass::parse(&r.label).ok_or(Error::UnknownLabel {
                    line: r.line,
                    label: r.label.clone(),
                })?)
            };
            Ok(DetectionRow {
                video_id: r.video_id,
                frame: r.frame,
                bbox: r.bbox,
                class_label,
                confidence: r.confidence.unwrap_or(1.0),
                line: r.line,
            })
        })
        .collect()
}

pub fn parse_detection_rows(path: &Path) -> Result<Vec<DetectionRow>> {
    let bytes = read_file(path)?;
    let text = String::from_utf8_lossy(&bytes);
    parse_detection_rows_str(&text)
}

pub fn detection_rows_to_csv(rows: &[DetectionRow]) -> String {
    let mut out = format!("{ANNOTATION_HEADER},confidence\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            csv_field(&r.video_id),
            r.frame,
            r.bbox.x,
            r.bbox.y,
            r.bbox.w,
            r.bbox.h,
            r.class_label.map(|c| c.as_str()).unwrap_or(""),
            r.confidence
        );
    }
    out
}

/// Frame-label file: `frame,label` with label `normal`/`abnormal` (or `0`/`1`).
pub fn parse_frame_labels_str(text: &str) -> Result<Vec<bool>> {
    let mut labels: Vec<(usize, bool)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i as u64 + 1;
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("frame")) {
            continue;
        }
        let (frame, label) = line.split_once(',').ok_or_else(|| Error::Parse {
            line: line_no,
            message: "expected frame,label".into(),
        })?;
        let frame = parse_num::<usize>(frame.trim(), "frame", line_no)?;
        let abnormal = match label.trim().to_ascii_lowercase().as_str() {
            "abnormal" | "1" => true,
            "normal" | "0" => false,
            other => {
                return Err(Error::UnknownLabel {
                    line: line_no,
                    label: other.to_string(),
                })
            }
        };
        labels.push((frame, abnormal));
    }
    labels.sort_by_key(|(f, _)| *f);
    for (expected, (frame, _)) in labels.iter().enumerate() {
        if *frame != expected {
            return Err(Error::Parse {
                line: 0,
                message: format!("frame labels must cover 0..n without gaps; missing {expected}"),
            });
        }
    }
    Ok(labels.into_iter().map(|(_, l)| l).collect())
}

pub fn parse_frame_labels(path: &Path) -> Result<Vec<bool>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_frame_labels_str(&text)
}

pub fn frame_labels_to_csv(labels: &[bool]) -> String {
    let mut out = String::from("frame,label\n");
    for (i, l) in labels.iter().enumerate() {
        let _ = writeln!(out, "{i},{}", if *l { "abnormal" } else { "normal" });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SplitSpec {
    /// First `ceil(fraction * n)` frames train, the rest test.
    Fraction { fraction: f64 },
    /// Explicit frame lists.
    ByFile { train: Vec<usize>, test: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits `n_frames` frames into train and test indices. Fraction mode needs frame labels
/// on the sequence, which the caller signals with `has_labels`.
pub fn make_split(n_frames: usize, has_labels: bool, spec: &SplitSpec) -> Result<Split> {
    match spec {
        SplitSpec::Fraction { fraction } => {
            if !(*fraction > 0.0 && *fraction < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "split fraction {fraction} outside (0,1)"
                )));
            }
            if !has_labels {
                return Err(Error::InvalidArgument(
                    "fraction split requires frame labels".into(),
                ));
            }
            let n_train = (fraction * n_frames as f64).ceil() as usize;
            if n_train >= n_frames {
                return Err(Error::InvalidArgument("empty test partition".into()));
            }
            Ok(Split {
                train: (0..n_train).collect(),
                test: (n_train..n_frames).collect(),
            })
        }
        SplitSpec::ByFile { train, test } => {
            let mut seen = vec![false; n_frames];
            for &i in train.iter().chain(test) {
                if i >= n_frames {
                    return Err(Error::InvalidArgument(format!(
                        "split index {i} out of range for {n_frames} frames"
                    )));
                }
                if seen[i] {
                    return Err(Error::InvalidArgument(format!(
                        "frame {i} appears more than once in the split"
                    )));
                }
                seen[i] = true;
            }
            if train.is_empty() || test.is_empty() {
                return Err(Error::InvalidArgument("empty split partition".into()));
            }
            Ok(Split {
                train: train.clone(),
                test: test.clone(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const GOOD: &str = "video_id,frame,x,y,w,h,class_label\n\
                        v1,0,1,2,3,4,running\n\
                        v1,0,5,6,7,8,standing\r\n\
                        v1,1,1.5,2,3,4,Sitting\n";

    #[test]
    fn parses_well_formed_file() {
        let rows = parse_annotations_str(GOOD).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[1].class_label, BehaviorClass::Standing);
        assert_eq!(rows[2].x, 1.5);
        let lines: Vec<u64> = rows.iter().map(|r| r.line).collect();
        assert_eq!(lines, vec![2, 3, 4]);
    }

    #[test]
    fn unknown_label_reports_line() {
        let text = "v,0,1,1,2,2,running\nv,1,1,1,2,2,flying\n";
        match parse_annotations_str(text) {
            Err(Error::UnknownLabel { line, label }) => {
                assert_eq!(line, 2);
                assert_eq!(label, "flying");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_width_rejected() {
        let text = "header,frame,x,y,w,h,c\nv,0,1,1,0,2,running\n";
        assert!(matches!(
            parse_annotations_str(text),
            Err(Error::NonPositiveExtent { line: 2, .. })
        ));
    }

    #[test]
    fn bad_number_reports_line() {
        let text = "v,0,1,1,2,2,running\nv,zero,1,1,2,2,running\n";
        assert!(matches!(
            parse_annotations_str(text),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn detection_rows_allow_empty_label_and_confidence() {
        let text = "v,0,1,1,2,2,,0.25\nv,0,1,1,2,2,running\n";
        let rows = parse_detection_rows_str(text).unwrap();
        assert_eq!(rows[0].class_label, None);
        assert_eq!(rows[0].confidence, 0.25);
        assert_eq!(rows[1].confidence, 1.0);
    }

    #[test]
    fn frame_labels_round_trip() {
        let labels = vec![false, true, true, false];
        assert_eq!(
            parse_frame_labels_str(&frame_labels_to_csv(&labels)).unwrap(),
            labels
        );
    }

    #[test]
    fn fraction_split_takes_temporal_prefix() {
        let s = make_split(10, true, &SplitSpec::Fraction { fraction: 0.7 }).unwrap();
        assert_eq!(s.train, (0..7).collect::<Vec<_>>());
        assert_eq!(s.test, vec![7, 8, 9]);
    }

    #[test]
    fn fraction_split_guards() {
        let err = make_split(10, true, &SplitSpec::Fraction { fraction: 0.999 }).unwrap_err();
        assert!(err.to_string().contains("empty test partition"));
        assert!(make_split(10, true, &SplitSpec::Fraction { fraction: 1.0 }).is_err());
        assert!(make_split(10, true, &SplitSpec::Fraction { fraction: 0.0 }).is_err());
        assert!(make_split(10, false, &SplitSpec::Fraction { fraction: 0.5 }).is_err());
    }

    #[test]
    fn by_file_split_is_exact() {
        let spec = SplitSpec::ByFile {
            train: vec![0, 2, 4],
            test: vec![1, 3],
        };
        let s = make_split(5, false, &spec).unwrap();
        assert_eq!(s.train, vec![0, 2, 4]);
        assert_eq!(s.test, vec![1, 3]);
        let overlapping = SplitSpec::ByFile {
            train: vec![0, 1],
            test: vec![1],
        };
        assert!(make_split(5, false, &overlapping).is_err());
    }

    fn arb_row() -> impl Strategy<Value = AnnotationRow> {
        (
            "[a-z0-9_,\" ]{1,8}",
            0usize..10_000,
            -1e4f64..1e4,
            -1e4f64..1e4,
            1e-3f64..1e4,
            1e-3f64..1e4,
            0usize..7,
        )
            .prop_filter("trimmed ids", |(id, ..)| id.trim() == id.as_str())
            .prop_map(|(video_id, frame, x, y, w, h, c)| AnnotationRow {
                video_id,
                frame,
                x,
                y,
                w,
                h,
                class_label: BehaviorClass::from_index(c).unwrap(),
                line: 0,
            })
    }

    proptest! {
        #[test]
        fn write_then_parse_is_field_exact(rows in prop::collection::vec(arb_row(), 0..20)) {
            let parsed = parse_annotations_str(&annotations_to_csv(&rows)).unwrap();
            prop_assert_eq!(parsed.len(), rows.len());
            for (p, r) in parsed.iter().zip(&rows) {
                prop_assert_eq!(&p.video_id, &r.video_id);
                prop_assert_eq!((p.frame, p.x, p.y, p.w, p.h), (r.frame, r.x, r.y, r.w, r.h));
                prop_assert_eq!(p.class_label, r.class_label);
            }
        }

        #[test]
        fn fraction_split_partitions(n in 2usize..200, fraction in 0.01f64..0.99) {
            if let Ok(s) = make_split(n, true, &SplitSpec::Fraction { fraction }) {
                let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
                prop_assert!(!s.test.is_empty());
            }
        }
    }
}
