//! Declarative run configuration.
//!
//! A config is a TOML file. Every section is optional and falls back to the owning module's
//! defaults; relative paths are resolved against the directory holding the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::TrackCriterion;
use crate::flow::HsParams;
use crate::forest::ForestParams;
use crate::region::ThresholdMode;
use crate::spatial::GateParams;
use crate::synth::SynthSpec;
use crate::tracking::TrackerParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineKind {
    #[default]
    SmallScale,
    LargeScale,
}

impl PipelineKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PipelineKind::SmallScale => "small_scale",
            PipelineKind::LargeScale => "large_scale",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "small_scale" | "small" => Some(PipelineKind::SmallScale),
            "large_scale" | "large" => Some(PipelineKind::LargeScale),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub threshold: ThresholdMode,
    pub min_area: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            threshold: ThresholdMode::Adaptive,
            min_area: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub track_criterion: TrackCriterion,
    /// Region score at or above which a region counts as abnormal.
    pub region_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_threshold: 0.5,
            track_criterion: TrackCriterion::default(),
            region_threshold: 0.5,
        }
    }
}

/// Where a sequence comes from: an image directory or an inline synthetic spec.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceConfig {
    pub frames: Option<PathBuf>,
    /// Glob applied to file names inside `frames`.
    pub pattern: Option<String>,
    /// `frame,label` CSV.
    pub frame_labels: Option<PathBuf>,
    /// Ground truth boxes: a synthetic `truth.csv` or an annotation CSV.
    pub truth: Option<PathBuf>,
    pub synth: Option<SynthSpec>,
}

impl SourceConfig {
    pub fn is_empty(&self) -> bool {
        self.frames.is_none() && self.synth.is_none()
    }
}

/// Pretrained models and externally produced decisions.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelPaths {
    pub gate: Option<PathBuf>,
    pub rf: Option<PathBuf>,
    /// `frame,score` CSV used instead of the gate model.
    pub verdicts: Option<PathBuf>,
    /// Detection CSV used instead of the motion detector.
    pub detections: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub pipeline: PipelineKind,
    pub seed: u64,
    pub flow: HsParams,
    pub mask: MaskConfig,
    pub gate: GateParams,
    pub forest: ForestParams,
    pub tracker: TrackerParams,
    pub eval: EvalConfig,
    pub models: ModelPaths,
    pub test: SourceConfig,
    /// Used to fit any model not given under `models`.
    pub train: Option<SourceConfig>,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.models.gate);
        fix(&mut self.models.rf);
        fix(&mut self.models.verdicts);
        fix(&mut self.models.detections);
        for source in std::iter::once(&mut self.test).chain(self.train.as_mut()) {
            fix(&mut source.frames);
            fix(&mut source.frame_labels);
            fix(&mut source.truth);
        }
    }

    /// Checks parameter ranges and that every referenced path exists.
    pub fn validate(&self) -> Result<()> {
        self.flow.validate()?;
        self.tracker.validate()?;
        if self.mask.min_area == 0 {
            return Err(Error::Config("mask.min_area must be >= 1".into()));
        }
        if let ThresholdMode::Fixed { value } = self.mask.threshold {
            if !(value >= 0.0) {
                return Err(Error::Config("mask threshold must be >= 0".into()));
            }
        }
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1]")))
            }
        };
        unit("eval.iou_threshold", self.eval.iou_threshold)?;
        unit("eval.region_threshold", self.eval.region_threshold)?;
        unit("gate.decision_threshold", self.gate.decision_threshold)?;
        if self.forest.n_trees == 0 || self.gate.forest.n_trees == 0 {
            return Err(Error::Config("forests need at least one tree".into()));
        }
        if self.test.is_empty() {
            return Err(Error::Config(
                "[test] needs either `frames` or a `synth` table".into(),
            ));
        }
        let mut paths: Vec<&PathBuf> = Vec::new();
        paths.extend(self.models.gate.iter());
        paths.extend(self.models.rf.iter());
        paths.extend(self.models.verdicts.iter());
        paths.extend(self.models.detections.iter());
        for source in std::iter::once(&self.test).chain(self.train.iter()) {
            if source.frames.is_some() && source.synth.is_some() {
                return Err(Error::Config(
                    "a source takes `frames` or `synth`, not both".into(),
                ));
            }
            if let Some(spec) = &source.synth {
                spec.validate()?;
            }
            paths.extend(source.frames.iter());
            paths.extend(source.frame_labels.iter());
            paths.extend(source.truth.iter());
        }
        for p in paths {
            if !p.exists() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// The config as written into report bundles.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

pub const SMALL_SCALE_SCENARIO: &str = include_str!("../scenarios/small_scale.toml");
pub const LARGE_SCALE_SCENARIO: &str = include_str!("../scenarios/large_scale.toml");

/// One of the bundled synthetic scenarios.
pub fn bundled_scenario(kind: PipelineKind) -> PipelineConfig {
    let text = match kind {
        PipelineKind::SmallScale => SMALL_SCALE_SCENARIO,
        PipelineKind::LargeScale => LARGE_SCALE_SCENARIO,
    };
    PipelineConfig::from_toml(text).expect("bundled scenario parses")
}
