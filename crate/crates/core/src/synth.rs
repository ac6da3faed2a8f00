//! Deterministic synthetic crowd sequences with exact per-frame ground truth.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::BehaviorClass;
use crate::error::{Error, Result};
use crate::frame::{Frame, VideoSequence, MIN_FRAME_SIDE};
use crate::geometry::BBox;

/// Seeded lattice value noise with smoothstep interpolation, values in `[0,1]`.
#[derive(Debug, Clone, Copy)]
pub struct ValueNoise {
    seed: u64,
    cell: f64,
    octaves: u32,
}

impl ValueNoise {
    pub fn new(seed: u64, cell: f64, octaves: u32) -> Self {
        ValueNoise {
            seed,
            cell: cell.max(1.0),
            octaves: octaves.max(1),
        }
    }

    fn lattice(&self, octave: u32, ix: i64, iy: i64) -> f64 {
        let mut h = self.seed ^ (octave as u64).wrapping_mul(0xA24B_AED4_963E_E407);
        h ^= (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        h = splitmix64(h);
        h ^= (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
        h = splitmix64(h);
        (h >> 11) as f64 / (1u64 << 53) as f64
    }

    fn octave(&self, octave: u32, x: f64, y: f64) -> f64 {
        let cell = self.cell / (1u64 << octave) as f64;
        let (fx, fy) = (x / cell, y / cell);
        let (x0, y0) = (fx.floor(), fy.floor());
        let (tx, ty) = (smoothstep(fx - x0), smoothstep(fy - y0));
        let (ix, iy) = (x0 as i64, y0 as i64);
        let a = self.lattice(octave, ix, iy);
        let b = self.lattice(octave, ix + 1, iy);
        let c = self.lattice(octave, ix, iy + 1);
        let d = self.lattice(octave, ix + 1, iy + 1);
        let top = a + (b - a) * tx;
        let bottom = c + (d - c) * tx;
        top + (bottom - top) * ty
    }

    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let mut total = 0.0;
        let mut weight = 0.0;
        let mut amp = 1.0;
        for o in 0..self.octaves {
            total += amp * self.octave(o, x, y);
            weight += amp;
            amp *= 0.5;
        }
        total / weight
    }
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Renders a seeded texture on a `width x height` frame, shifted so that pixel `(x, y)`
/// shows the texture at `(x - dx, y - dy)`. Used for exact-translation flow fixtures.
pub fn textured_frame(
    width: usize,
    height: usize,
    seed: u64,
    cell: f64,
    amplitude: f64,
    dx: f64,
    dy: f64,
    index: usize,
) -> Result<Frame> {
    let noise = ValueNoise::new(seed, cell, 2);
    Frame::from_fn(width, height, index, |x, y| {
        0.5 + amplitude * (noise.sample(x as f64 - dx, y as f64 - dy) - 0.5)
    })
}

/// Behavior an actor switches to while the frame lies in an abnormal interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbnormalPhase {
    pub velocity: [f64; 2],
    #[serde(default)]
    pub class: Option<BehaviorClass>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActorSpec {
    pub x: f64,
    pub y: f64,
    pub w: usize,
    pub h: usize,
    /// Pixels per frame.
    pub velocity: [f64; 2],
    #[serde(default)]
    pub class: Option<BehaviorClass>,
    #[serde(default)]
    pub abnormal: Option<AbnormalPhase>,
}

fn default_amplitude() -> f64 {
    0.5
}

fn default_cell() -> f64 {
    8.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub background_seed: u64,
    /// Peak-to-peak amplitude of the background texture.
    #[serde(default = "default_amplitude")]
    pub background_amplitude: f64,
    #[serde(default = "default_cell")]
    pub background_cell: f64,
    #[serde(default)]
    pub actors: Vec<ActorSpec>,
    /// Inclusive `[start, end]` frame ranges labeled abnormal.
    #[serde(default)]
    pub abnormal_intervals: Vec<[usize; 2]>,
    pub seed: u64,
    /// Uniform random offset in `[-jitter, jitter]` added to every actor start position.
    #[serde(default)]
    pub position_jitter: f64,
}

impl SynthSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < MIN_FRAME_SIDE || self.height < MIN_FRAME_SIDE {
            return Err(Error::InvalidArgument(format!(
                "canvas {}x{} too small",
                self.width, self.height
            )));
        }
        if self.frames < 2 {
            return Err(Error::InvalidArgument("need at least 2 frames".into()));
        }
        if self.background_amplitude < 0.2 || self.background_amplitude > 1.0 {
            return Err(Error::InvalidArgument(format!(
                "background amplitude {} outside [0.2, 1]",
                self.background_amplitude
            )));
        }
        for [start, end] in &self.abnormal_intervals {
            if start > end {
                return Err(Error::InvalidArgument(format!(
                    "abnormal interval [{start}, {end}] is reversed"
                )));
            }
        }
        for (i, a) in self.actors.iter().enumerate() {
            let inside = a.w > 0
                && a.h > 0
                && a.x >= 0.0
                && a.y >= 0.0
                && a.x + a.w as f64 <= self.width as f64
                && a.y + a.h as f64 <= self.height as f64;
            if !inside {
                return Err(Error::InvalidArgument(format!(
                    "actor {i} does not start inside the canvas"
                )));
            }
        }
        Ok(())
    }

    pub fn is_abnormal_frame(&self, frame: usize) -> bool {
        self.abnormal_intervals
            .iter()
            .any(|[s, e]| (*s..=*e).contains(&frame))
    }
}

/// One actor's exact box in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthBox {
    pub frame: usize,
    pub actor: usize,
    pub bbox: BBox,
    pub class: Option<BehaviorClass>,
    pub abnormal: bool,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub sequence: VideoSequence,
    /// Boxes per frame, in actor order.
    pub ground_truth: Vec<Vec<GroundTruthBox>>,
    /// Actors that left the canvas (their boxes are clipped).
    pub warnings: Vec<String>,
}

impl SynthOutput {
    /// Ground truth as CSV `frame,actor,x,y,w,h,class_label,abnormal`.
    pub fn truth_csv(&self) -> String {
        let mut out = String::from("frame,actor,x,y,w,h,class_label,abnormal\n");
        for gt in self.ground_truth.iter().flatten() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                gt.frame,
                gt.actor,
                gt.bbox.x,
                gt.bbox.y,
                gt.bbox.w,
                gt.bbox.h,
                gt.class.map(|c| c.as_str()).unwrap_or(""),
                u8::from(gt.abnormal)
            );
        }
        out
    }

    pub fn write_truth_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.truth_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Parses the CSV written by [`SynthOutput::truth_csv`].
pub fn parse_truth_csv(text: &str) -> Result<Vec<GroundTruthBox>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i as u64 + 1;
        let line = line.trim_end_matches('\r');
        if line.is_empty() || (i == 0 && line.starts_with("frame")) {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 8 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 8 columns, found {}", cols.len()),
            });
        }
        let num = |s: &str| -> Result<f64> {
            s.trim().parse::<f64>().map_err(|e| Error::Parse {
                line: line_no,
                message: format!("bad number {s:?}: {e}"),
            })
        };
        let class = match cols[6].trim() {
            "" => None,
            label => Some(
                BehaviorClass::parse(label).ok_or_else(|| Error::UnknownLabel {
                    line: line_no,
                    label: label.to_string(),
                })?,
            ),
        };
        out.push(GroundTruthBox {
            frame: num(cols[0])? as usize,
            actor: num(cols[1])? as usize,
            bbox: BBox::new(num(cols[2])?, num(cols[3])?, num(cols[4])?, num(cols[5])?),
            class,
            abnormal: cols[7].trim() == "1",
        });
    }
    Ok(out)
}

/// Renders the sequence described by `spec` and its exact ground truth.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let background = ValueNoise::new(spec.background_seed, spec.background_cell, 2);

    struct ActorState {
        pos: (f64, f64),
        texture: ValueNoise,
        left_canvas: bool,
    }
    let mut states: Vec<ActorState> = spec
        .actors
        .iter()
        .map(|a| {
            let texture = ValueNoise::new(rng.random::<u64>(), 3.0, 1);
            let (mut x, mut y) = (a.x, a.y);
            if spec.position_jitter > 0.0 {
                let j = spec.position_jitter;
                x = (x + rng.random_range(-j..=j)).clamp(0.0, (spec.width - a.w) as f64);
                y = (y + rng.random_range(-j..=j)).clamp(0.0, (spec.height - a.h) as f64);
            }
            ActorState {
                pos: (x, y),
                texture,
                left_canvas: false,
            }
        })
        .collect();

    let (w, h) = (spec.width, spec.height);
    let bg: Vec<f64> = (0..w * h)
        .map(|k| {
            let (x, y) = ((k % w) as f64, (k / w) as f64);
            0.5 + spec.background_amplitude * (background.sample(x, y) - 0.5)
        })
        .collect();

    let mut frames = Vec::with_capacity(spec.frames);
    let mut truth = Vec::with_capacity(spec.frames);
    let mut labels = Vec::with_capacity(spec.frames);
    let mut warnings = Vec::new();

    for k in 0..spec.frames {
        let abnormal_frame = spec.is_abnormal_frame(k);
        labels.push(abnormal_frame);
        let mut data = bg.clone();
        let mut boxes = Vec::new();
        for (i, (actor, state)) in spec.actors.iter().zip(states.iter_mut()).enumerate() {
            let ax = state.pos.0.round();
            let ay = state.pos.1.round();
            let full = BBox::new(ax, ay, actor.w as f64, actor.h as f64);
            if !full.within(w as f64, h as f64) && !state.left_canvas {
                state.left_canvas = true;
                let msg = format!("actor {i} leaves the canvas at frame {k}; box clipped");
                log::warn!("{msg}");
                warnings.push(msg);
            }
            let phase = actor.abnormal.as_ref().filter(|_| abnormal_frame);
            if let Some(bbox) = full.clip(w as f64, h as f64) {
                let (x0, y0, x1, y1) = bbox.pixel_span(w, h);
                for py in y0..y1 {
                    for px in x0..x1 {
                        let local = (px as f64 - ax, py as f64 - ay);
                        data[py * w + px] = 0.15 + 0.7 * state.texture.sample(local.0, local.1);
                    }
                }
                boxes.push(GroundTruthBox {
                    frame: k,
                    actor: i,
                    bbox,
                    class: phase.map(|p| p.class).unwrap_or(actor.class),
                    abnormal: phase.is_some(),
                });
            }
            let velocity = phase.map(|p| p.velocity).unwrap_or(actor.velocity);
            state.pos.0 += velocity[0];
            state.pos.1 += velocity[1];
        }
        frames.push(Frame::new(w, h, data, k)?);
        truth.push(boxes);
    }

    let sequence = VideoSequence::new(frames, format!("synth-{}", spec.seed), Some(labels))?;
    Ok(SynthOutput {
        sequence,
        ground_truth: truth,
        warnings,
    })
}
