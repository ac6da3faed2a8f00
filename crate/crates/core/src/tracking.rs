//! Constant-velocity Kalman tracking of box centers with Hungarian association.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix2, Matrix2x4, Matrix4, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::assignment::hungarian;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::spatial::Detection;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerParams {
    /// Consecutive hits that confirm a tentative track.
    pub confirm_hits: u32,
    /// Consecutive misses that kill a track.
    pub max_misses: u32,
    /// Association gate in pixels; `None` means frame diagonal / 20.
    pub gate: Option<f64>,
    /// Diagonal of Q for `[cx, cy, vx, vy]`, px^2.
    pub process_noise: [f64; 4],
    /// Diagonal of R for `[cx, cy]`, px^2.
    pub measurement_noise: [f64; 2],
    /// Initial velocity variance of a new track.
    pub init_velocity_var: f64,
    /// Weight of the new detection when smoothing box extent.
    pub extent_smoothing: f64,
}

impl Default for TrackerParams {
    fn default() -> Self {
        TrackerParams {
            confirm_hits: 3,
            max_misses: 5,
            gate: None,
            process_noise: [1.0, 1.0, 0.25, 0.25],
            measurement_noise: [4.0, 4.0],
            init_velocity_var: 100.0,
            extent_smoothing: 0.5,
        }
    }
}

impl TrackerParams {
    pub fn resolved_gate(&self, width: usize, height: usize) -> f64 {
        self.gate
            .unwrap_or_else(|| 0.5 * ((width * width + height * height) as f64).sqrt() / 10.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.confirm_hits == 0 || self.max_misses == 0 {
            return Err(Error::InvalidArgument(
                "confirm_hits and max_misses must be >= 1".into(),
            ));
        }
        if self.gate.is_some_and(|g| !(g > 0.0)) {
            return Err(Error::InvalidArgument("gate must be > 0".into()));
        }
        if self
            .process_noise
            .iter()
            .chain(&self.measurement_noise)
            .any(|v| !(*v >= 0.0))
            || !(self.init_velocity_var >= 0.0)
        {
            return Err(Error::InvalidArgument(
                "noise variances must be >= 0".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.extent_smoothing) {
            return Err(Error::InvalidArgument(
                "extent_smoothing must be in [0,1]".into(),
            ));
        }
        Ok(())
    }

    fn q(&self) -> Matrix4<f64> {
        Matrix4::from_diagonal(&Vector4::from(self.process_noise))
    }

    fn r(&self) -> Matrix2<f64> {
        Matrix2::from_diagonal(&Vector2::from(self.measurement_noise))
    }
}

/// State `[cx, cy, vx, vy]` with covariance, plus the box extent carried alongside.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub x: Vector4<f64>,
    pub p: Matrix4<f64>,
    pub w: f64,
    pub h: f64,
}

fn transition() -> Matrix4<f64> {
    Matrix4::new(
        1.0, 0.0, 1.0, 0.0, //
        0.0, 1.0, 0.0, 1.0, //
        0.0, 0.0, 1.0, 0.0, //
        0.0, 0.0, 0.0, 1.0,
    )
}

fn observation() -> Matrix2x4<f64> {
    Matrix2x4::new(
        1.0, 0.0, 0.0, 0.0, //
        0.0, 1.0, 0.0, 0.0,
    )
}

impl KalmanState {
    pub fn new(
        center: (f64, f64),
        velocity: (f64, f64),
        w: f64,
        h: f64,
        params: &TrackerParams,
    ) -> Self {
        let [rx, ry] = params.measurement_noise;
        let v = params.init_velocity_var;
        KalmanState {
            x: Vector4::new(center.0, center.1, velocity.0, velocity.1),
            p: Matrix4::from_diagonal(&Vector4::new(rx, ry, v, v)),
            w,
            h,
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x[0], self.x[1])
    }

    pub fn bbox(&self) -> BBox {
        BBox::from_center(self.x[0], self.x[1], self.w, self.h)
    }

    fn predict(&mut self, q: &Matrix4<f64>) {
        let f = transition();
        self.x = f * self.x;
        self.p = f * self.p * f.transpose() + q;
        self.symmetrize();
    }

    fn update(&mut self, z: Vector2<f64>, r: &Matrix2<f64>) {
        let h = observation();
        let s = h * self.p * h.transpose() + r;
        let Some(s_inv) = s.try_inverse() else {
            // zero innovation covariance: the measurement carries no new information
            return;
        };
        let k = self.p * h.transpose() * s_inv;
        self.x += k * (z - h * self.x);
        // Joseph form keeps P symmetric positive semi-definite
        let i_kh = Matrix4::identity() - k * h;
        self.p = i_kh * self.p * i_kh.transpose() + k * r * k.transpose();
        self.symmetrize();
    }

    fn symmetrize(&mut self) {
        self.p = (self.p + self.p.transpose()) * 0.5;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackStatus {
    Tentative,
    Confirmed,
    Dead,
}

impl TrackStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            TrackStatus::Tentative => "tentative",
            TrackStatus::Confirmed => "confirmed",
            TrackStatus::Dead => "dead",
        }
    }
}

/// Reference to a detection: frame and its index within that frame's detection list.
pub type DetectionRef = (usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: u64,
    pub state: KalmanState,
    pub history: Vec<DetectionRef>,
    pub hits: u32,
    pub misses: u32,
    pub status: TrackStatus,
}

impl Track {
    pub fn new(id: u64, state: KalmanState) -> Self {
        Track {
            id,
            state,
            history: Vec::new(),
            hits: 1,
            misses: 0,
            status: TrackStatus::Tentative,
        }
    }

    /// Constant-velocity prediction; returns the predicted box.
    pub fn predict(&mut self, params: &TrackerParams) -> Result<BBox> {
        if self.status == TrackStatus::Dead {
            return Err(Error::DeadTrack(self.id));
        }
        self.state.predict(&params.q());
        Ok(self.state.bbox())
    }

    /// Kalman update with a detection's center; extent is exponentially smoothed.
    pub fn update(&mut self, bbox: &BBox, params: &TrackerParams) -> Result<()> {
        if self.status == TrackStatus::Dead {
            return Err(Error::DeadTrack(self.id));
        }
        let (cx, cy) = bbox.center();
        self.state.update(Vector2::new(cx, cy), &params.r());
        let a = params.extent_smoothing;
        self.state.w = (1.0 - a) * self.state.w + a * bbox.w;
        self.state.h = (1.0 - a) * self.state.h + a * bbox.h;
        Ok(())
    }

    fn record_hit(&mut self, params: &TrackerParams) {
        self.hits += 1;
        self.misses = 0;
        if self.status == TrackStatus::Tentative && self.hits >= params.confirm_hits {
            self.status = TrackStatus::Confirmed;
        }
    }

    fn record_miss(&mut self, params: &TrackerParams) {
        self.hits = 0;
        self.misses += 1;
        if self.misses >= params.max_misses {
            self.status = TrackStatus::Dead;
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Association {
    /// `(track index, detection index)` pairs.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_tracks: Vec<usize>,
    pub unmatched_detections: Vec<usize>,
}

/// Optimal one-to-one matching of track centers to detection centers by Euclidean distance;
/// pairs farther apart than `gate` are left unmatched.
pub fn associate(
    track_centers: &[(f64, f64)],
    detection_centers: &[(f64, f64)],
    gate: f64,
) -> Result<Association> {
    if !(gate > 0.0) {
        return Err(Error::InvalidArgument(format!("gate {gate} must be > 0")));
    }
    let dist = |a: (f64, f64), b: (f64, f64)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
    let mut out = Association::default();
    if track_centers.is_empty() || detection_centers.is_empty() {
        out.unmatched_tracks = (0..track_centers.len()).collect();
        out.unmatched_detections = (0..detection_centers.len()).collect();
        return Ok(out);
    }
    // gated pairs cost more than any feasible full assignment
    let big = gate * (track_centers.len() + detection_centers.len()) as f64 * 4.0 + 1.0;
    let cost: Vec<Vec<f64>> = track_centers
        .iter()
        .map(|t| {
            detection_centers
                .iter()
                .map(|d| {
                    let c = dist(*t, *d);
                    if c > gate {
                        big
                    } else {
                        c
                    }
                })
                .collect()
        })
        .collect();
    let assignment = hungarian(&cost);
    let mut det_used = vec![false; detection_centers.len()];
    for (t, a) in assignment.into_iter().enumerate() {
        match a {
            Some(d) if dist(track_centers[t], detection_centers[d]) <= gate => {
                out.pairs.push((t, d));
                det_used[d] = true;
            }
            _ => out.unmatched_tracks.push(t),
        }
    }
    out.unmatched_detections = (0..detection_centers.len())
        .filter(|d| !det_used[*d])
        .collect();
    Ok(out)
}

/// One exported row of track state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackRecord {
    pub track_id: u64,
    pub frame: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub status: TrackStatus,
    /// Index of the detection matched this frame, if any.
    pub detection: Option<usize>,
}

impl TrackRecord {
    pub fn bbox(&self) -> BBox {
        BBox::from_center(self.cx, self.cy, self.w, self.h)
    }
}

/// Multi-object tracker over frames presented in increasing order.
#[derive(Debug, Clone)]
pub struct Tracker {
    pub params: TrackerParams,
    gate: f64,
    tracks: Vec<Track>,
    next_id: u64,
    last_frame: Option<usize>,
    records: Vec<TrackRecord>,
}

impl Tracker {
    pub fn new(params: TrackerParams, width: usize, height: usize) -> Result<Self> {
        params.validate()?;
        Ok(Tracker {
            gate: params.resolved_gate(width, height),
            params,
            tracks: Vec::new(),
            next_id: 0,
            last_frame: None,
            records: Vec::new(),
        })
    }

    pub fn gate(&self) -> f64 {
        self.gate
    }

    /// All tracks ever created, including dead ones.
    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    pub fn live_tracks(&self) -> impl Iterator<Item = &Track> {
        self.tracks.iter().filter(|t| t.status != TrackStatus::Dead)
    }

    /// Rows for every live track after each processed frame.
    pub fn records(&self) -> &[TrackRecord] {
        &self.records
    }

    /// Advances the tracker by one frame.
    pub fn step(&mut self, frame: usize, detections: &[Detection]) -> Result<()> {
        if let Some(last) = self.last_frame {
            if frame <= last {
                return Err(Error::OutOfOrder { last, got: frame });
            }
        }
        self.last_frame = Some(frame);

        let live: Vec<usize> = (0..self.tracks.len())
            .filter(|&i| self.tracks[i].status != TrackStatus::Dead)
            .collect();
        let mut centers = Vec::with_capacity(live.len());
        for &i in &live {
            self.tracks[i].predict(&self.params)?;
            centers.push(self.tracks[i].state.center());
        }
        let det_centers: Vec<(f64, f64)> = detections.iter().map(|d| d.bbox.center()).collect();
        let assoc = associate(&centers, &det_centers, self.gate)?;

        let mut matched_det = vec![None; live.len()];
        for &(t, d) in &assoc.pairs {
            let track = &mut self.tracks[live[t]];
            track.update(&detections[d].bbox, &self.params)?;
            track.history.push((frame, d));
            track.record_hit(&self.params);
            matched_det[t] = Some(d);
        }
        for &t in &assoc.unmatched_tracks {
            self.tracks[live[t]].record_miss(&self.params);
        }
        let mut spawned = Vec::new();
        for &d in &assoc.unmatched_detections {
            let bbox = &detections[d].bbox;
            let state = KalmanState::new(bbox.center(), (0.0, 0.0), bbox.w, bbox.h, &self.params);
            let mut track = Track::new(self.next_id, state);
            self.next_id += 1;
            track.history.push((frame, d));
            if track.hits >= self.params.confirm_hits {
                track.status = TrackStatus::Confirmed;
            }
            spawned.push((self.tracks.len(), d));
            self.tracks.push(track);
        }

        for (t, &i) in live.iter().enumerate() {
            self.push_record(i, frame, matched_det[t]);
        }
        for (i, d) in spawned {
            self.push_record(i, frame, Some(d));
        }
        Ok(())
    }

    fn push_record(&mut self, i: usize, frame: usize, detection: Option<usize>) {
        let track = &self.tracks[i];
        if track.status == TrackStatus::Dead {
            return;
        }
        self.records.push(TrackRecord {
            track_id: track.id,
            frame,
            cx: track.state.x[0],
            cy: track.state.x[1],
            w: track.state.w,
            h: track.state.h,
            status: track.status,
            detection,
        });
    }
}

pub const TRACK_HEADER: &str = "track_id,frame,cx,cy,w,h,status";

pub fn tracks_to_csv(records: &[TrackRecord]) -> String {
    let mut out = format!("{TRACK_HEADER}\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.track_id,
            r.frame,
            r.cx,
            r.cy,
            r.w,
            r.h,
            r.status.as_str()
        );
    }
    out
}

pub fn write_tracks(path: &Path, records: &[TrackRecord]) -> Result<()> {
    std::fs::write(path, tracks_to_csv(records)).map_err(|e| Error::io(path, e))
}

pub fn parse_tracks_csv(text: &str) -> Result<Vec<TrackRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i as u64 + 1;
        let line = line.trim_end_matches('\r');
        if line.is_empty() || (i == 0 && line.starts_with("track_id")) {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let err = |m: String| Error::Parse {
            line: line_no,
            message: m,
        };
        if cols.len() != 7 {
            return Err(err(format!("expected 7 columns, found {}", cols.len())));
        }
        let f = |j: usize| {
            cols[j]
                .parse::<f64>()
                .map_err(|e| err(format!("column {j}: {e}")))
        };
        let status = match cols[6] {
            "tentative" => TrackStatus::Tentative,
            "confirmed" => TrackStatus::Confirmed,
            "dead" => TrackStatus::Dead,
            other => return Err(err(format!("unknown status {other:?}"))),
        };
        out.push(TrackRecord {
            track_id: cols[0].parse().map_err(|e| err(format!("track_id: {e}")))?,
            frame: cols[1].parse().map_err(|e| err(format!("frame: {e}")))?,
            cx: f(2)?,
            cy: f(3)?,
            w: f(4)?,
            h: f(5)?,
            status,
            detection: None,
        });
    }
    Ok(out)
}
