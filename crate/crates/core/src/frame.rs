//! Grayscale frames, frame sequences and their on-disk forms.

use std::cmp::Ordering;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::DynamicImage;

use crate::error::{Error, Result};

pub const MIN_FRAME_SIDE: usize = 8;

/// A single luminance frame, row-major, values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    data: Vec<f64>,
    index: usize,
}

impl Frame {
    pub fn new(width: usize, height: usize, data: Vec<f64>, index: usize) -> Result<Self> {
        if width < MIN_FRAME_SIDE || height < MIN_FRAME_SIDE {
            return Err(Error::InvalidArgument(format!(
                "frame {width}x{height} is smaller than {MIN_FRAME_SIDE}x{MIN_FRAME_SIDE}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::SizeMismatch(format!(
                "frame data has {} values for {width}x{height}",
                data.len()
            )));
        }
        if let Some(v) = data
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::InvalidArgument(format!(
                "luminance {v} outside [0,1]"
            )));
        }
        Ok(Frame {
            width,
            height,
            data,
            index,
        })
    }

    /// Builds a frame from a function of pixel coordinates, clamping into `[0,1]`.
    pub fn from_fn(
        width: usize,
        height: usize,
        index: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        Frame::new(width, height, data, index)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn with_index(mut self, index: usize) -> Self {
        self.index = index;
        self
    }

    pub fn to_gray8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        write_pgm(path, self.width, self.height, &self.to_gray8())
    }
}

/// Writes an 8-bit binary PGM (P5).
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    debug_assert_eq!(pixels.len(), width * height);
    let mut buf = Vec::with_capacity(pixels.len() + 20);
    write!(buf, "P5\n{width} {height}\n255\n").expect("write to vec");
    buf.extend_from_slice(pixels);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Ordered frames sharing one resolution, with optional per-frame ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSequence {
    frames: Vec<Frame>,
    source_id: String,
    frame_labels: Option<Vec<bool>>,
}

impl VideoSequence {
    /// Frames are re-indexed from 0 in the given order.
    pub fn new(
        frames: Vec<Frame>,
        source_id: impl Into<String>,
        frame_labels: Option<Vec<bool>>,
    ) -> Result<Self> {
        if let Some(first) = frames.first() {
            let (w, h) = (first.width, first.height);
            if let Some(bad) = frames.iter().find(|f| f.width != w || f.height != h) {
                return Err(Error::SizeMismatch(format!(
                    "frame {} is {}x{}, sequence is {w}x{h}",
                    bad.index, bad.width, bad.height
                )));
            }
        }
        if let Some(labels) = &frame_labels {
            if labels.len() != frames.len() {
                return Err(Error::SizeMismatch(format!(
                    "{} frame labels for {} frames",
                    labels.len(),
                    frames.len()
                )));
            }
        }
        let frames = frames
            .into_iter()
            .enumerate()
            .map(|(i, f)| f.with_index(i))
            .collect();
        Ok(VideoSequence {
            frames,
            source_id: source_id.into(),
            frame_labels,
        })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn frame_labels(&self) -> Option<&[bool]> {
        self.frame_labels.as_deref()
    }

    pub fn set_frame_labels(&mut self, labels: Vec<bool>) -> Result<()> {
        if labels.len() != self.frames.len() {
            return Err(Error::SizeMismatch(format!(
                "{} frame labels for {} frames",
                labels.len(),
                self.frames.len()
            )));
        }
        self.frame_labels = Some(labels);
        Ok(())
    }

    /// `(width, height)` of the frames, or `(0, 0)` for an empty sequence.
    pub fn dimensions(&self) -> (usize, usize) {
        self.frames
            .first()
            .map(|f| (f.width, f.height))
            .unwrap_or((0, 0))
    }

    /// Writes every frame as `frame_NNNNN.pgm` into `dir`.
    pub fn save_pgm_dir(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.frames
            .iter()
            .map(|f| {
                let path = dir.join(format!("frame_{:05}.pgm", f.index));
                f.save_pgm(&path).map(|_| path)
            })
            .collect()
    }
}

/// Compares file names so that embedded digit runs sort numerically (`f2 < f10`).
pub fn natural_cmp(a: &str, b: &str) -> Ordering {
    let (mut a, mut b) = (a.as_bytes(), b.as_bytes());
    loop {
        match (a.first(), b.first()) {
            (None, None) => return Ordering::Equal,
            (None, Some(_)) => return Ordering::Less,
            (Some(_), None) => return Ordering::Greater,
            (Some(ca), Some(cb)) if ca.is_ascii_digit() && cb.is_ascii_digit() => {
                let da = a.iter().take_while(|c| c.is_ascii_digit()).count();
                let db = b.iter().take_while(|c| c.is_ascii_digit()).count();
                let (na, nb) = (trim_zeros(&a[..da]), trim_zeros(&b[..db]));
                let ord = na
                    .len()
                    .cmp(&nb.len())
                    .then_with(|| na.cmp(nb))
                    .then(da.cmp(&db));
                if ord != Ordering::Equal {
                    return ord;
                }
                a = &a[da..];
                b = &b[db..];
            }
            (Some(ca), Some(cb)) => {
                if ca != cb {
                    return ca.cmp(cb);
                }
                a = &a[1..];
                b = &b[1..];
            }
        }
    }
}

fn trim_zeros(digits: &[u8]) -> &[u8] {
    let start = digits
        .iter()
        .position(|c| *c != b'0')
        .unwrap_or(digits.len());
    &digits[start..]
}

/// ITU-R BT.601 luma of normalized RGB.
pub fn luminance(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn image_to_frame(img: &DynamicImage, index: usize, path: &Path) -> Result<Frame> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = if img.color().has_color() {
        img.to_rgb32f()
            .pixels()
            .map(|p| luminance(p[0] as f64, p[1] as f64, p[2] as f64))
            .collect()
    } else {
        img.to_luma32f().pixels().map(|p| p[0] as f64).collect()
    };
    let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Frame::new(w, h, data, index).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Files named `{prefix}{number}.{ext}` in `dir`, ordered by number.
pub fn numbered_files(dir: &Path, prefix: &str, ext: &str) -> Result<Vec<(usize, PathBuf)>> {
    let suffix = format!(".{ext}");
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let Ok(name) = entry.file_name().into_string() else {
            continue;
        };
        let number = name
            .strip_prefix(prefix)
            .and_then(|rest| rest.strip_suffix(&suffix))
            .and_then(|digits| digits.parse::<usize>().ok());
        if let Some(i) = number {
            out.push((i, entry.path()));
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyDirectory {
            path: dir.to_path_buf(),
        });
    }
    out.sort();
    Ok(out)
}

/// Loads every file in `dir` whose name matches `pattern` (a filename glob such as `*.png`),
/// in natural filename order.
pub fn load_sequence(dir: &Path, pattern: &str) -> Result<VideoSequence> {
    let glob = glob::Pattern::new(pattern)
        .map_err(|e| Error::InvalidArgument(format!("bad pattern {pattern:?}: {e}")))?;
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok())
        .filter(|entry| entry.file_type().map(|t| t.is_file()).unwrap_or(false))
        .filter_map(|entry| entry.file_name().into_string().ok())
        .filter(|name| glob.matches(name))
        .collect();
    if names.is_empty() {
        return Err(Error::EmptyDirectory {
            path: dir.to_path_buf(),
        });
    }
    names.sort_by(|a, b| natural_cmp(a, b));

    let mut frames: Vec<Frame> = Vec::with_capacity(names.len());
    for (index, name) in names.iter().enumerate() {
        let path = dir.join(name);
        let img = image::open(&path).map_err(|e| Error::Decode {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let frame = image_to_frame(&img, index, &path)?;
        if let Some(first) = frames.first() {
            if (first.width, first.height) != (frame.width, frame.height) {
                return Err(Error::MixedResolution {
                    path,
                    expected_w: first.width,
                    expected_h: first.height,
                    found_w: frame.width,
                    found_h: frame.height,
                });
            }
        }
        frames.push(frame);
    }
    if frames.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "{}: need at least 2 frames, found {}",
            dir.display(),
            frames.len()
        )));
    }
    let source_id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    VideoSequence::new(frames, source_id, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(v: f64, index: usize) -> Frame {
        Frame::new(16, 16, vec![v; 256], index).unwrap()
    }

    #[test]
    fn natural_order() {
        let mut names = vec!["f10.png", "f2.png", "f1.png", "f001.png", "a.png"];
        names.sort_by(|a, b| natural_cmp(a, b));
        assert_eq!(names, ["a.png", "f1.png", "f001.png", "f2.png", "f10.png"]);
    }

    #[test]
    fn frame_invariants() {
        assert!(Frame::new(4, 16, vec![0.0; 64], 0).is_err());
        assert!(Frame::new(16, 16, vec![0.0; 10], 0).is_err());
        assert!(Frame::new(16, 16, vec![1.5; 256], 0).is_err());
    }

    #[test]
    fn sequence_rejects_mismatched_labels() {
        let frames = vec![uniform(0.1, 0), uniform(0.2, 1)];
        assert!(VideoSequence::new(frames, "s", Some(vec![true])).is_err());
    }

    #[test]
    fn load_uniform_directory() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..3 {
            uniform(0.4, i)
                .save_pgm(&dir.path().join(format!("{i}.pgm")))
                .unwrap();
        }
        let seq = load_sequence(dir.path(), "*.pgm").unwrap();
        assert_eq!(seq.len(), 3);
        let first = seq.frames()[0].data()[0];
        assert!(seq
            .frames()
            .iter()
            .all(|f| f.data().iter().all(|v| *v == first)));
    }

    #[test]
    fn load_orders_shuffled_files() {
        let dir = tempfile::tempdir().unwrap();
        for i in [7usize, 3, 10, 1, 5, 2, 9, 4, 8, 6] {
            uniform(i as f64 / 20.0, 0)
                .save_pgm(&dir.path().join(format!("{i:03}.pgm")))
                .unwrap();
        }
        let seq = load_sequence(dir.path(), "*.pgm").unwrap();
        let got: Vec<u8> = seq.frames().iter().map(|f| f.to_gray8()[0]).collect();
        let want: Vec<u8> = (1..=10)
            .map(|i| ((i as f64 / 20.0) * 255.0).round() as u8)
            .collect();
        assert_eq!(got, want);
        assert!(seq.frames().iter().enumerate().all(|(i, f)| f.index() == i));
    }

    #[test]
    fn load_rejects_mixed_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let a = image::GrayImage::from_pixel(320, 240, image::Luma([10]));
        let b = image::GrayImage::from_pixel(238, 158, image::Luma([10]));
        a.save(dir.path().join("a.png")).unwrap();
        b.save(dir.path().join("b.png")).unwrap();
        match load_sequence(dir.path(), "*.png") {
            Err(Error::MixedResolution { path, .. }) => assert!(path.ends_with("b.png")),
            other => panic!("expected mixed-resolution error, got {other:?}"),
        }
    }

    #[test]
    fn load_empty_and_undecodable() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_sequence(dir.path(), "*.png"),
            Err(Error::EmptyDirectory { .. })
        ));
        fs::write(dir.path().join("junk.png"), b"not an image").unwrap();
        match load_sequence(dir.path(), "*.png") {
            Err(Error::Decode { path, .. }) => assert!(path.ends_with("junk.png")),
            other => panic!("expected decode error, got {other:?}"),
        }
    }

    #[test]
    fn color_png_uses_bt601_weights() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["a.png", "b.png"] {
            let img = image::RgbImage::from_pixel(8, 8, image::Rgb([255, 0, 0]));
            img.save(dir.path().join(name)).unwrap();
        }
        let seq = load_sequence(dir.path(), "*.png").unwrap();
        assert!((seq.frames()[0].get(0, 0) - 0.299).abs() < 1e-6);
    }
}
