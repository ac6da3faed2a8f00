//! Magnitude masks and 8-connected region labeling.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowPolar;
use crate::frame::{numbered_files, write_pgm};
use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::SizeMismatch(format!(
                "{} mask bits for {width}x{height}",
                bits.len()
            )));
        }
        Ok(BinaryMask {
            width,
            height,
            bits,
        })
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let px: Vec<u8> = self.bits.iter().map(|b| if *b { 255 } else { 0 }).collect();
        write_pgm(path, self.width, self.height, &px)
    }

    pub fn load_pgm(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Decode {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?
            .to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        BinaryMask::new(w, h, img.pixels().map(|p| p[0] >= 128).collect())
    }
}

/// File name of frame `i`'s mask inside a mask directory.
pub fn mask_file_name(i: usize) -> String {
    format!("mask_{i:05}.pgm")
}

/// Reads every `mask_NNNNN.pgm` in `dir`, keyed by frame.
pub fn load_mask_dir(dir: &Path) -> Result<BTreeMap<usize, BinaryMask>> {
    numbered_files(dir, "mask_", "pgm")?
        .into_iter()
        .map(|(i, path)| Ok((i, BinaryMask::load_pgm(&path)?)))
        .collect()
}

/// How the magnitude threshold `T` is chosen per frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ThresholdMode {
    /// `T = mean(m) + sd(m)` over the frame.
    Adaptive,
    Fixed {
        value: f64,
    },
}

impl Default for ThresholdMode {
    fn default() -> Self {
        ThresholdMode::Adaptive
    }
}

impl ThresholdMode {
    pub fn resolve(&self, polar: &FlowPolar) -> f64 {
        match *self {
            ThresholdMode::Adaptive => {
                let (mean, sd) = polar.magnitude_stats();
                mean + sd
            }
            ThresholdMode::Fixed { value } => value,
        }
    }
}

/// Sets every pixel whose magnitude strictly exceeds `threshold`.
pub fn magnitude_mask(polar: &FlowPolar, threshold: f64) -> Result<BinaryMask> {
    if !(threshold >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold {threshold} must be >= 0"
        )));
    }
    BinaryMask::new(
        polar.width,
        polar.height,
        polar.magnitude.iter().map(|m| *m > threshold).collect(),
    )
}

/// A connected group of mask pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub id: usize,
    pub bbox: BBox,
    /// Row-major pixel indices, ascending.
    pub pixel_indices: Vec<usize>,
}

impl Region {
    pub fn area(&self) -> usize {
        self.pixel_indices.len()
    }

    /// A region covering every pixel of `bbox` (clipped to the frame).
    pub fn from_bbox(id: usize, bbox: &BBox, width: usize, height: usize) -> Option<Region> {
        let (x0, y0, x1, y1) = bbox.pixel_span(width, height);
        if x1 <= x0 || y1 <= y0 {
            return None;
        }
        let pixel_indices = (y0..y1)
            .flat_map(|y| (x0..x1).map(move |x| y * width + x))
            .collect();
        Some(Region {
            id,
            bbox: BBox::new(x0 as f64, y0 as f64, (x1 - x0) as f64, (y1 - y0) as f64),
            pixel_indices,
        })
    }
}

/// Labels 8-connected components, drops those smaller than `min_area`, and returns the rest
/// ordered by bounding-box top, then left.
pub fn connected_components(mask: &BinaryMask, min_area: usize) -> Result<Vec<Region>> {
    if min_area == 0 {
        return Err(Error::InvalidArgument("min_area must be >= 1".into()));
    }
    let (w, h) = (mask.width, mask.height);
    let mut visited = vec![false; w * h];
    let mut stack = Vec::new();
    let mut found: Vec<(usize, usize, usize, Region)> = Vec::new();

    for start in 0..w * h {
        if !mask.bits[start] || visited[start] {
            continue;
        }
        visited[start] = true;
        stack.push(start);
        let mut pixels = Vec::new();
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        while let Some(k) = stack.pop() {
            pixels.push(k);
            let (x, y) = (k % w, k / w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let n = ny * w + nx;
                    if mask.bits[n] && !visited[n] {
                        visited[n] = true;
                        stack.push(n);
                    }
                }
            }
        }
        if pixels.len() < min_area {
            continue;
        }
        pixels.sort_unstable();
        let bbox = BBox::new(
            x0 as f64,
            y0 as f64,
            (x1 - x0 + 1) as f64,
            (y1 - y0 + 1) as f64,
        );
        found.push((
            y0,
            x0,
            start,
            Region {
                id: 0,
                bbox,
                pixel_indices: pixels,
            },
        ));
    }
    found.sort_by_key(|(y, x, first, _)| (*y, *x, *first));
    Ok(found
        .into_iter()
        .enumerate()
        .map(|(id, (.., mut r))| {
            r.id = id;
            r
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn polar(mags: Vec<f64>, w: usize, h: usize) -> FlowPolar {
        FlowPolar {
            width: w,
            height: h,
            orientation: vec![0.0; mags.len()],
            magnitude: mags,
        }
    }

    #[test]
    fn strict_threshold() {
        let p = polar(vec![0.0; 4], 2, 2);
        assert_eq!(magnitude_mask(&p, 0.0).unwrap().count(), 0);
        let p = polar(vec![0.1, 0.5, 0.9], 3, 1);
        assert_eq!(
            magnitude_mask(&p, 0.5).unwrap().bits,
            vec![false, false, true]
        );
        assert!(magnitude_mask(&p, -1.0).is_err());
    }

    #[test]
    fn empty_and_full_masks() {
        let empty = BinaryMask::new(8, 8, vec![false; 64]).unwrap();
        assert!(connected_components(&empty, 1).unwrap().is_empty());
        let full = BinaryMask::new(8, 6, vec![true; 48]).unwrap();
        let regions = connected_components(&full, 1).unwrap();
        assert_eq!(regions.len(), 1);
        assert_eq!(regions[0].bbox, BBox::new(0.0, 0.0, 8.0, 6.0));
        assert_eq!(regions[0].area(), 48);
    }

    #[test]
    fn two_blocks() {
        let mut bits = vec![false; 16 * 16];
        for (ox, oy) in [(0, 0), (10, 10)] {
            for y in oy..oy + 3 {
                for x in ox..ox + 3 {
                    bits[y * 16 + x] = true;
                }
            }
        }
        let mask = BinaryMask::new(16, 16, bits).unwrap();
        let regions = connected_components(&mask, 1).unwrap();
        assert_eq!(regions.len(), 2);
        assert_eq!(regions[0].area(), 9);
        assert_eq!(regions[1].area(), 9);
        assert_eq!(regions[0].bbox, BBox::new(0.0, 0.0, 3.0, 3.0));
        assert_eq!(regions[1].bbox, BBox::new(10.0, 10.0, 3.0, 3.0));
        assert_eq!(connected_components(&mask, 10).unwrap().len(), 0);
    }

    #[test]
    fn diagonal_pixels_join() {
        let mut bits = vec![false; 9];
        bits[0] = true;
        bits[4] = true;
        bits[8] = true;
        let mask = BinaryMask::new(3, 3, bits).unwrap();
        assert_eq!(connected_components(&mask, 1).unwrap().len(), 1);
        assert!(connected_components(&mask, 0).is_err());
    }

    #[test]
    fn adaptive_threshold_is_mean_plus_sd() {
        let p = polar(vec![0.0, 0.0, 2.0, 2.0], 2, 2);
        assert_eq!(ThresholdMode::Adaptive.resolve(&p), 2.0);
        assert_eq!(ThresholdMode::Fixed { value: 0.3 }.resolve(&p), 0.3);
    }

    /// Labels by repeated min-label propagation until nothing changes.
    fn propagation_labels(mask: &BinaryMask) -> Vec<Option<usize>> {
        let (w, h) = (mask.width, mask.height);
        let mut labels: Vec<Option<usize>> = (0..w * h)
            .map(|k| if mask.bits[k] { Some(k) } else { None })
            .collect();
        loop {
            let mut changed = false;
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let k = (y as usize) * w + x as usize;
                    let Some(mut best) = labels[k] else { continue };
                    for dy in -1..=1i64 {
                        for dx in -1..=1i64 {
                            let (nx, ny) = (x + dx, y + dy);
                            if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                                continue;
                            }
                            if let Some(l) = labels[ny as usize * w + nx as usize] {
                                best = best.min(l);
                            }
                        }
                    }
                    if Some(best) != labels[k] {
                        labels[k] = Some(best);
                        changed = true;
                    }
                }
            }
            if !changed {
                return labels;
            }
        }
    }

    proptest! {
        #[test]
        fn matches_propagation_oracle(
            w in 1usize..32,
            h in 1usize..32,
            density in 0.1f64..0.7,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let bits: Vec<bool> = (0..w * h).map(|_| rng.random_bool(density)).collect();
            let mask = BinaryMask::new(w, h, bits).unwrap();
            let regions = connected_components(&mask, 1).unwrap();
            let oracle = propagation_labels(&mask);

            let mut oracle_groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
            for (k, l) in oracle.iter().enumerate() {
                if let Some(l) = l {
                    oracle_groups.entry(*l).or_default().push(k);
                }
            }
            let mut ours: Vec<Vec<usize>> = regions.iter().map(|r| r.pixel_indices.clone()).collect();
            let mut theirs: Vec<Vec<usize>> = oracle_groups.into_values().collect();
            ours.sort();
            theirs.sort();
            prop_assert_eq!(ours, theirs);

            let total: usize = regions.iter().map(|r| r.area()).sum();
            prop_assert_eq!(total, mask.count());
            for r in &regions {
                let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
                for &k in &r.pixel_indices {
                    let (x, y) = (k % w, k / w);
                    prop_assert!(r.bbox.contains_point(x as f64, y as f64));
                    x0 = x0.min(x); y0 = y0.min(y); x1 = x1.max(x); y1 = y1.max(y);
                }
                prop_assert_eq!(r.bbox, BBox::new(x0 as f64, y0 as f64, (x1 - x0 + 1) as f64, (y1 - y0 + 1) as f64));
            }
            for pair in regions.windows(2) {
                prop_assert!((pair[0].bbox.y, pair[0].bbox.x) <= (pair[1].bbox.y, pair[1].bbox.x));
            }
        }

        #[test]
        fn raising_threshold_never_adds_pixels(
            mags in prop::collection::vec(0.0f64..5.0, 64),
            t1 in 0.0f64..5.0,
            dt in 0.0f64..2.0,
        ) {
            let p = polar(mags, 8, 8);
            let lo = magnitude_mask(&p, t1).unwrap();
            let hi = magnitude_mask(&p, t1 + dt).unwrap();
            for (a, b) in lo.bits.iter().zip(&hi.bits) {
                prop_assert!(!*b || *a);
            }
        }
    }
}
