//! Horn-Schunck optical flow and its polar (magnitude/orientation) form.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{numbered_files, Frame};

/// Intensity scale applied before differentiation: the solver works in 8-bit gray levels so
/// that `alpha` keeps its usual meaning for normalized frames.
const GRAY_LEVELS: f64 = 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HsParams {
    /// Smoothness weight.
    pub alpha: f64,
    pub iterations: usize,
    /// Gaussian pre-smoothing sigma in pixels; 0 disables it.
    pub presmooth_sigma: f64,
}

impl Default for HsParams {
    fn default() -> Self {
        HsParams {
            alpha: 1.0,
            iterations: 100,
            presmooth_sigma: 1.0,
        }
    }
}

impl HsParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "alpha {} must be > 0",
                self.alpha
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be >= 1".into()));
        }
        if !(self.presmooth_sigma >= 0.0 && self.presmooth_sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "presmooth_sigma {} must be >= 0",
                self.presmooth_sigma
            )));
        }
        Ok(())
    }
}

/// Per-pixel displacement field in pixels per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

const FLOW_MAGIC: &[u8; 5] = b"CSFL1";

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
        }
    }

    pub fn new(width: usize, height: usize, u: Vec<f32>, v: Vec<f32>) -> Result<Self> {
        if u.len() != width * height || v.len() != width * height {
            return Err(Error::SizeMismatch(format!(
                "flow rasters {}/{} for {width}x{height}",
                u.len(),
                v.len()
            )));
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("flow field".into()));
        }
        Ok(FlowField {
            width,
            height,
            u,
            v,
        })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (f64, f64) {
        let k = y * self.width + x;
        (self.u[k] as f64, self.v[k] as f64)
    }

    /// `CSFL1`, u32 width, u32 height, then u then v as f32, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(13 + 8 * self.u.len());
        out.extend_from_slice(FLOW_MAGIC);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for x in self.u.iter().chain(&self.v) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 13 || &bytes[..5] != FLOW_MAGIC {
            return Err(Error::Format("missing CSFL1 header".into()));
        }
        let width = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        let n = width * height;
        if bytes.len() != 13 + 8 * n {
            return Err(Error::Format(format!(
                "flow payload is {} bytes, expected {}",
                bytes.len() - 13,
                8 * n
            )));
        }
        let floats: Vec<f32> = bytes[13..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (u, v) = floats.split_at(n);
        FlowField::new(width, height, u.to_vec(), v.to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        FlowField::from_bytes(&bytes)
    }
}

/// File name of frame `i`'s flow inside a flow directory.
pub fn flow_file_name(i: usize) -> String {
    format!("flow_{i:05}.csfl")
}

/// Reads every `flow_NNNNN.csfl` in `dir`, keyed by frame.
pub fn load_flow_dir(dir: &Path) -> Result<BTreeMap<usize, FlowField>> {
    numbered_files(dir, "flow_", "csfl")?
        .into_iter()
        .map(|(i, path)| Ok((i, FlowField::load(&path)?)))
        .collect()
}

/// Magnitude (px/frame) and orientation (radians in `(-pi, pi]`) rasters.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowPolar {
    pub width: usize,
    pub height: usize,
    pub magnitude: Vec<f64>,
    pub orientation: Vec<f64>,
}

impl FlowPolar {
    pub fn len(&self) -> usize {
        self.magnitude.len()
    }

    pub fn is_empty(&self) -> bool {
        self.magnitude.is_empty()
    }

    /// Population mean and standard deviation of the magnitude raster.
    pub fn magnitude_stats(&self) -> (f64, f64) {
        let n = self.magnitude.len().max(1) as f64;
        let mean = self.magnitude.iter().sum::<f64>() / n;
        let var = self
            .magnitude
            .iter()
            .map(|m| (m - mean).powi(2))
            .sum::<f64>()
            / n;
        (mean, var.sqrt())
    }
}

/// Orientation of `(u, v)`; zero vectors map to 0 and `-pi` folds onto `pi`.
pub fn orientation(u: f64, v: f64) -> f64 {
    if u == 0.0 && v == 0.0 {
        return 0.0;
    }
    let r = v.atan2(u);
    if r <= -PI {
        PI
    } else {
        r
    }
}

pub fn to_polar(flow: &FlowField) -> FlowPolar {
    let (magnitude, orientation) = flow
        .u
        .iter()
        .zip(&flow.v)
        .map(|(&u, &v)| {
            let (u, v) = (u as f64, v as f64);
            (u.hypot(v), orientation(u, v))
        })
        .unzip();
    FlowPolar {
        width: flow.width,
        height: flow.height,
        magnitude,
        orientation,
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= sum);
    k
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(data: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as i64;
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; data.len()];
    for y in 0..height {
        for x in 0..width {
            tmp[y * width + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, w)| w * data[y * width + clamp(x as i64 + i as i64 - r, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, w)| w * tmp[clamp(y as i64 + i as i64 - r, height) * width + x])
                .sum();
        }
    }
    out
}

/// Iterative Horn-Schunck solver. Derivatives are computed once; each call to
/// [`HornSchunck::iterate`] advances the Jacobi fixed-point iteration.
pub struct HornSchunck {
    width: usize,
    height: usize,
    alpha2: f64,
    ix: Vec<f64>,
    iy: Vec<f64>,
    it: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
    iterations_done: usize,
}

impl HornSchunck {
    pub fn new(prev: &Frame, next: &Frame, params: &HsParams) -> Result<Self> {
        params.validate()?;
        let (w, h) = (prev.width(), prev.height());
        if (w, h) != (next.width(), next.height()) {
            return Err(Error::SizeMismatch(format!(
                "frames are {w}x{h} and {}x{}",
                next.width(),
                next.height()
            )));
        }
        if prev
            .data()
            .iter()
            .chain(next.data())
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("input frame".into()));
        }
        let prep = |f: &Frame| {
            let scaled: Vec<f64> = f.data().iter().map(|v| v * GRAY_LEVELS).collect();
            gaussian_blur(&scaled, w, h, params.presmooth_sigma)
        };
        let (e1, e2) = (prep(prev), prep(next));

        let n = w * h;
        let (mut ix, mut iy, mut it) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for y in 0..h {
            let y1 = (y + 1).min(h - 1);
            for x in 0..w {
                let x1 = (x + 1).min(w - 1);
                let (a, b, c, d) = (y * w + x, y * w + x1, y1 * w + x, y1 * w + x1);
                let k = y * w + x;
                ix[k] =
                    0.25 * ((e1[b] - e1[a]) + (e1[d] - e1[c]) + (e2[b] - e2[a]) + (e2[d] - e2[c]));
                iy[k] =
                    0.25 * ((e1[c] - e1[a]) + (e1[d] - e1[b]) + (e2[c] - e2[a]) + (e2[d] - e2[b]));
                it[k] =
                    0.25 * ((e2[a] - e1[a]) + (e2[b] - e1[b]) + (e2[c] - e1[c]) + (e2[d] - e1[d]));
            }
        }
        Ok(HornSchunck {
            width: w,
            height: h,
            alpha2: params.alpha * params.alpha,
            ix,
            iy,
            it,
            u: vec![0.0; n],
            v: vec![0.0; n],
            iterations_done: 0,
        })
    }

    pub fn iterations_done(&self) -> usize {
        self.iterations_done
    }

    /// Runs `count` more iterations.
    pub fn iterate(&mut self, count: usize) {
        let (w, h) = (self.width, self.height);
        let mut u_next = vec![0.0; w * h];
        let mut v_next = vec![0.0; w * h];
        for _ in 0..count {
            let (u, v) = (&self.u, &self.v);
            let (ix, iy, it, alpha2) = (&self.ix, &self.iy, &self.it, self.alpha2);
            u_next
                .par_chunks_mut(w)
                .zip(v_next.par_chunks_mut(w))
                .enumerate()
                .for_each(|(y, (urow, vrow))| {
                    let ym = y.saturating_sub(1);
                    let yp = (y + 1).min(h - 1);
                    for x in 0..w {
                        let xm = x.saturating_sub(1);
                        let xp = (x + 1).min(w - 1);
                        let mean = |f: &[f64]| {
                            (f[ym * w + x] + f[yp * w + x] + f[y * w + xm] + f[y * w + xp]) / 6.0
                                + (f[ym * w + xm]
                                    + f[ym * w + xp]
                                    + f[yp * w + xm]
                                    + f[yp * w + xp])
                                    / 12.0
                        };
                        let (ub, vb) = (mean(u), mean(v));
                        let k = y * w + x;
                        let t = (ix[k] * ub + iy[k] * vb + it[k])
                            / (alpha2 + ix[k] * ix[k] + iy[k] * iy[k]);
                        urow[x] = ub - ix[k] * t;
                        vrow[x] = vb - iy[k] * t;
                    }
                });
            std::mem::swap(&mut self.u, &mut u_next);
            std::mem::swap(&mut self.v, &mut v_next);
            self.iterations_done += 1;
        }
    }

    pub fn flow(&self) -> FlowField {
        FlowField {
            width: self.width,
            height: self.height,
            u: self.u.iter().map(|x| *x as f32).collect(),
            v: self.v.iter().map(|x| *x as f32).collect(),
        }
    }
}

/// Flow from `prev` to `next` after `params.iterations` Horn-Schunck iterations.
pub fn horn_schunck(prev: &Frame, next: &Frame, params: &HsParams) -> Result<FlowField> {
    let mut solver = HornSchunck::new(prev, next, params)?;
    solver.iterate(params.iterations);
    Ok(solver.flow())
}

/// Flow for every frame of a sequence: frame `i` gets the flow from `i` to `i + 1`, and the
/// last frame reuses the flow from `n - 2` to `n - 1`. Pairs are solved in parallel.
pub fn sequence_flows(frames: &[Frame], params: &HsParams) -> Result<Vec<FlowField>> {
    if frames.len() < 2 {
        return Err(Error::InvalidArgument(
            "flow needs at least 2 frames".into(),
        ));
    }
    let pairs: Vec<FlowField> = frames
        .par_windows(2)
        .map(|w| horn_schunck(&w[0], &w[1], params))
        .collect::<Result<_>>()?;
    let mut out = pairs;
    out.push(out[out.len() - 1].clone());
    Ok(out)
}

/// The frame-pair index whose flow is attributed to frame `i` in [`sequence_flows`].
pub fn flow_pair_for_frame(i: usize, n_frames: usize) -> (usize, usize) {
    if i + 1 < n_frames {
        (i, i + 1)
    } else {
        (n_frames - 2, n_frames - 1)
    }
}
