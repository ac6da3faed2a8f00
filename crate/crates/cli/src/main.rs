//! `crowdscope` command-line tool.
//!
//! Exit codes: 0 success, 1 usage error, 2 bad input data, 3 internal or I/O failure.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crowdscope::config::{bundled_scenario, PipelineConfig, PipelineKind};
use crowdscope::dataset::{
    annotations_to_csv, detection_rows_to_csv, frame_labels_to_csv, parse_detection_rows,
    parse_frame_labels, AnnotationRow, BehaviorClass, DetectionRow,
};
use crowdscope::eval::{
    classification_metrics, match_detections, roc_auc, roc_svg, track_assignment_metrics,
    ConfusionCounts, TrackBox, TruthBox,
};
use crowdscope::features::{
    batch_features, features_to_csv, parse_features_csv, FeatureRow, LabelTransfer, LabeledBox,
};
use crowdscope::flow::{
    flow_file_name, load_flow_dir, sequence_flows, to_polar, FlowField, FlowPolar,
};
use crowdscope::forest::{cross_validate, rf_train, TrainingSet};
use crowdscope::frame::load_sequence;
use crowdscope::geometry::BBox;
use crowdscope::pipeline::{
    group_truth, parse_truth, parse_truth_entries, run, RunOptions, TruthEntry,
};
use crowdscope::region::{connected_components, magnitude_mask, mask_file_name, Region};
use crowdscope::report::{parse_rocs_csv, rocs_to_csv, MetricsTable};
use crowdscope::spatial::{
    baseline_train, ingest_detections, Detection, Detector, IngestedVerdicts, MotionDetector,
};
use crowdscope::synth::{generate_synthetic, SynthSpec};
use crowdscope::tracking::{parse_tracks_csv, write_tracks, TrackStatus, Tracker};
use crowdscope::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "crowdscope",
    version,
    about = "Crowd anomaly analysis on frame sequences"
)]
#[command(arg_required_else_help = true)]
struct Cli {
    /// TOML run configuration; module defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic sequence with ground truth.
    Synth(SynthArgs),
    /// Horn-Schunck flow for every frame.
    Flow(FramesArgs),
    /// Magnitude masks and their regions from a flow directory.
    Mask(MaskArgs),
    /// Motion-mask detections for every frame.
    Detect(FramesArgs),
    /// Kalman tracking over a detection file.
    Track(TrackArgs),
    /// Region or detection statistics as a feature table.
    Features(FeaturesArgs),
    /// Train the frame-level gate on labeled frames.
    TrainGate(TrainGateArgs),
    /// Train a random forest on a labeled feature table.
    TrainRf(TrainRfArgs),
    /// Run a full pipeline and write its report bundle.
    Run(RunArgs),
    /// Score detections, tracks or frame scores against ground truth.
    Eval(EvalArgs),
    /// Render ROC curves from a roc.csv.
    PlotRoc(PlotRocArgs),
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Scenario {
    SmallScale,
    LargeScale,
}

impl Scenario {
    fn kind(self) -> PipelineKind {
        match self {
            Scenario::SmallScale => PipelineKind::SmallScale,
            Scenario::LargeScale => PipelineKind::LargeScale,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Part {
    Test,
    Train,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Synthetic spec as TOML.
    #[arg(long, conflicts_with = "scenario")]
    spec: Option<PathBuf>,
    /// A bundled scenario.
    #[arg(long, value_enum)]
    scenario: Option<Scenario>,
    /// Which sequence of the scenario to render.
    #[arg(long, value_enum, default_value = "test")]
    part: Part,
}

#[derive(Args, Debug)]
struct FramesArgs {
    #[arg(long)]
    frames: PathBuf,
    /// File-name glob inside the frame directory.
    #[arg(long, default_value = "*")]
    pattern: String,
}

#[derive(Args, Debug)]
struct MaskArgs {
    #[arg(long)]
    flows: PathBuf,
}

#[derive(Args, Debug)]
struct TrackArgs {
    #[arg(long)]
    detections: PathBuf,
    /// Frame directory giving the frame size and count.
    #[arg(long, conflicts_with_all = ["width", "height"])]
    frames: Option<PathBuf>,
    #[arg(long, default_value = "*")]
    pattern: String,
    #[arg(long, requires = "height")]
    width: Option<usize>,
    #[arg(long, requires = "width")]
    height: Option<usize>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum LabelKind {
    /// 1 for regions matching an abnormal ground-truth box, else 0.
    Abnormal,
    /// Behavior class index of the matching ground-truth box.
    Class,
    /// The frame's label from the frame-label file.
    Frame,
}

#[derive(Args, Debug)]
struct FeaturesArgs {
    #[arg(long)]
    flows: PathBuf,
    /// Use these boxes instead of mask regions.
    #[arg(long)]
    detections: Option<PathBuf>,
    /// Ground truth (`truth.csv` or annotation CSV) used for labels.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    frame_labels: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "abnormal")]
    labels: LabelKind,
}

#[derive(Args, Debug)]
struct TrainGateArgs {
    #[arg(long)]
    frames: PathBuf,
    #[arg(long, default_value = "*")]
    pattern: String,
    #[arg(long)]
    frame_labels: PathBuf,
}

#[derive(Args, Debug)]
struct TrainRfArgs {
    #[arg(long)]
    features: PathBuf,
    /// Number of classes; 2 for abnormal/normal, 7 for behavior classes.
    #[arg(long)]
    classes: Option<usize>,
    /// Also report k-fold cross-validated accuracy (`--cv` alone means k = 5).
    #[arg(long, num_args = 0..=1, default_missing_value = "5")]
    cv: Option<usize>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long, value_parser = parse_pipeline)]
    pipeline: Option<PipelineKind>,
    /// Run a bundled scenario instead of `--config`.
    #[arg(long, value_enum, conflicts_with = "pipeline")]
    scenario: Option<Scenario>,
    /// Reuse intermediates already present under `<out>/stages`.
    #[arg(long)]
    resume: bool,
}

fn parse_pipeline(s: &str) -> std::result::Result<PipelineKind, String> {
    PipelineKind::parse(s).ok_or_else(|| format!("unknown pipeline {s:?}"))
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Ground truth: `truth.csv`, annotation CSV, or (with --scores) a frame-label file.
    #[arg(long)]
    gt: PathBuf,
    /// Detection file to score.
    #[arg(long, conflicts_with_all = ["tracks", "scores"])]
    pred: Option<PathBuf>,
    /// tracks.csv to score; only confirmed rows count.
    #[arg(long, conflicts_with = "scores")]
    tracks: Option<PathBuf>,
    /// `frame,score` file to score against frame labels.
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    /// Count a track box when its center lies in the ground-truth box.
    #[arg(long)]
    center_in_box: bool,
}

#[derive(Args, Debug)]
struct PlotRocArgs {
    #[arg(long)]
    roc: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();

    match std::panic::catch_unwind(|| execute(&cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() { 2 } else { 3 })
        }
        Err(_) => ExitCode::from(3),
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn execute(cli: &Cli) -> Result<()> {
    let out = &cli.out;
    match &cli.command {
        Command::Synth(args) => synth(cli, args),
        Command::Flow(args) => {
            let config = load_config(cli)?;
            let sequence = load_sequence(&args.frames, &args.pattern)?;
            let flows = sequence_flows(sequence.frames(), &config.flow)?;
            create_dir(&out.join("flows"))?;
            for (i, flow) in flows.iter().enumerate() {
                flow.save(&out.join("flows").join(flow_file_name(i)))?;
            }
            println!(
                "wrote {} flow fields to {}",
                flows.len(),
                out.join("flows").display()
            );
            Ok(())
        }
        Command::Mask(args) => {
            let config = load_config(cli)?;
            let flows = load_flow_dir(&args.flows)?;
            create_dir(&out.join("masks"))?;
            let mut csv = String::from("frame,region_id,x,y,w,h,area\n");
            for (i, flow) in &flows {
                let polar = to_polar(flow);
                let mask = magnitude_mask(&polar, config.mask.threshold.resolve(&polar))?;
                mask.save_pgm(&out.join("masks").join(mask_file_name(*i)))?;
                for r in connected_components(&mask, config.mask.min_area)? {
                    let b = r.bbox;
                    let _ = writeln!(
                        csv,
                        "{i},{},{},{},{},{},{}",
                        r.id,
                        b.x,
                        b.y,
                        b.w,
                        b.h,
                        r.area()
                    );
                }
            }
            write(&out.join("regions.csv"), csv)?;
            println!(
                "wrote {} masks and regions.csv to {}",
                flows.len(),
                out.display()
            );
            Ok(())
        }
        Command::Detect(args) => {
            let config = load_config(cli)?;
            let sequence = load_sequence(&args.frames, &args.pattern)?;
            let flows = sequence_flows(sequence.frames(), &config.flow)?;
            let detector = MotionDetector {
                threshold: config.mask.threshold,
                min_area: config.mask.min_area,
            };
            let mut rows = Vec::new();
            for (frame, flow) in sequence.frames().iter().zip(&flows) {
                let polar = to_polar(flow);
                for d in detector.detect(frame, Some(&polar))? {
                    rows.push(DetectionRow {
                        video_id: sequence.source_id().to_string(),
                        frame: d.frame,
                        bbox: d.bbox,
                        class_label: None,
                        confidence: d.confidence,
                        line: 0,
                    });
                }
            }
            write(&out.join("detections.csv"), detection_rows_to_csv(&rows))?;
            println!(
                "wrote {} detections to {}",
                rows.len(),
                out.join("detections.csv").display()
            );
            Ok(())
        }
        Command::Track(args) => track(cli, args),
        Command::Features(args) => features(args, out, &load_config(cli)?),
        Command::TrainGate(args) => {
            let config = load_config(cli)?;
            let mut sequence = load_sequence(&args.frames, &args.pattern)?;
            sequence.set_frame_labels(parse_frame_labels(&args.frame_labels)?)?;
            let model = baseline_train(&[&sequence], &config.flow, &config.gate, config.seed)?;
            let path = out.join("gate.cssp");
            create_dir(out)?;
            model.save(&path)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::TrainRf(args) => train_rf(args, out, &load_config(cli)?),
        Command::Run(args) => {
            let mut config = match args.scenario {
                Some(s) => {
                    let mut c = bundled_scenario(s.kind());
                    if let Some(seed) = cli.seed {
                        c.seed = seed;
                    }
                    c
                }
                None => load_config(cli)?,
            };
            if let Some(kind) = args.pipeline {
                config.pipeline = kind;
            }
            let result = run(
                &config,
                &RunOptions {
                    out: Some(out.clone()),
                    resume: args.resume,
                },
            )?;
            print!("{}", result.metrics().to_csv());
            Ok(())
        }
        Command::Eval(args) => eval(args, out),
        Command::PlotRoc(args) => {
            let curves = parse_rocs_csv(&read(&args.roc)?)?;
            if curves.is_empty() {
                return Err(Error::Empty(format!(
                    "{} has no ROC points",
                    args.roc.display()
                )));
            }
            let refs: Vec<_> = curves.iter().map(|(n, c)| (n.clone(), c)).collect();
            let path = out.join("roc.svg");
            write(&path, roc_svg(&refs))?;
            for (name, curve) in &curves {
                println!("{name}: auc {}", curve.auc);
            }
            Ok(())
        }
    }
}

fn synth(cli: &Cli, args: &SynthArgs) -> Result<()> {
    let spec: SynthSpec = match (&args.spec, args.scenario) {
        (Some(path), _) => SynthSpec::from_toml(&read(path)?)?,
        (None, Some(s)) => {
            let config = bundled_scenario(s.kind());
            let source = match args.part {
                Part::Test => Some(config.test),
                Part::Train => config.train,
            };
            source
                .and_then(|s| s.synth)
                .ok_or_else(|| Error::Config("scenario has no such synthetic part".into()))?
        }
        (None, None) => {
            return Err(Error::Config("synth needs --spec or --scenario".into()));
        }
    };
    let mut spec = spec;
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    let output = generate_synthetic(&spec)?;
    let out = &cli.out;
    let frames = output.sequence.save_pgm_dir(&out.join("frames"))?;
    output.write_truth_csv(&out.join("truth.csv"))?;
    if let Some(labels) = output.sequence.frame_labels() {
        write(&out.join("frame_labels.csv"), frame_labels_to_csv(labels))?;
    }
    let annotations: Vec<AnnotationRow> = output
        .ground_truth
        .iter()
        .flatten()
        .filter_map(|g| {
            Some(AnnotationRow {
                video_id: output.sequence.source_id().to_string(),
                frame: g.frame,
                x: g.bbox.x,
                y: g.bbox.y,
                w: g.bbox.w,
                h: g.bbox.h,
                class_label: g.class?,
                line: 0,
            })
        })
        .collect();
    write(
        &out.join("annotations.csv"),
        annotations_to_csv(&annotations),
    )?;
    for w in &output.warnings {
        log::warn!("{w}");
    }
    println!(
        "wrote {} frames to {}",
        frames.len(),
        out.join("frames").display()
    );
    Ok(())
}

fn frame_size(
    frames: Option<&Path>,
    pattern: &str,
    w: Option<usize>,
    h: Option<usize>,
) -> Result<(usize, usize, Option<usize>)> {
    match (frames, w, h) {
        (Some(dir), _, _) => {
            let seq = load_sequence(dir, pattern)?;
            let (w, h) = seq.dimensions();
            Ok((w, h, Some(seq.len())))
        }
        (None, Some(w), Some(h)) => Ok((w, h, None)),
        _ => Err(Error::Config(
            "give --frames or both --width and --height".into(),
        )),
    }
}

fn track(cli: &Cli, args: &TrackArgs) -> Result<()> {
    let config = load_config(cli)?;
    let (w, h, n) = frame_size(
        args.frames.as_deref(),
        &args.pattern,
        args.width,
        args.height,
    )?;
    let dets = ingest_detections(&args.detections, w, h)?;
    for warning in &dets.warnings {
        log::warn!("{warning}");
    }
    let last = dets.by_frame.keys().next_back().map(|f| f + 1).unwrap_or(0);
    let n = n.unwrap_or(last).max(last);
    let mut tracker = Tracker::new(config.tracker, w, h)?;
    for frame in 0..n {
        tracker.step(frame, &dets.for_frame(frame))?;
    }
    let path = cli.out.join("tracks.csv");
    create_dir(&cli.out)?;
    write_tracks(&path, tracker.records())?;
    let confirmed = tracker
        .tracks()
        .iter()
        .filter(|t| {
            tracker
                .records()
                .iter()
                .any(|r| r.track_id == t.id && r.status == TrackStatus::Confirmed)
        })
        .count();
    println!(
        "{} tracks ({confirmed} confirmed) written to {}",
        tracker.tracks().len(),
        path.display()
    );
    Ok(())
}

fn load_truth(
    path: &Path,
    n_frames: usize,
    labels: Option<&[bool]>,
) -> Result<Vec<Vec<TruthEntry>>> {
    parse_truth(&read(path)?, n_frames, labels)
}

fn features(args: &FeaturesArgs, out: &Path, config: &PipelineConfig) -> Result<()> {
    let flows: BTreeMap<usize, FlowField> = load_flow_dir(&args.flows)?;
    let polars: BTreeMap<usize, FlowPolar> = flows.iter().map(|(i, f)| (*i, to_polar(f))).collect();
    let first = polars
        .values()
        .next()
        .expect("flow directory is never empty");
    let (w, h) = (first.width, first.height);
    let n = polars.keys().next_back().map(|i| i + 1).unwrap_or(0);

    let regions: BTreeMap<usize, Vec<Region>> = match &args.detections {
        Some(path) => {
            let dets = ingest_detections(path, w, h)?;
            polars
                .keys()
                .map(|&i| {
                    let regions = dets
                        .for_frame(i)
                        .iter()
                        .enumerate()
                        .filter_map(|(j, d)| Region::from_bbox(j, &d.bbox, w, h))
                        .collect();
                    (i, regions)
                })
                .collect()
        }
        None => polars
            .iter()
            .map(|(&i, p)| {
                let mask = magnitude_mask(p, config.mask.threshold.resolve(p))?;
                Ok((i, connected_components(&mask, config.mask.min_area)?))
            })
            .collect::<Result<_>>()?,
    };
    let frame_labels = args
        .frame_labels
        .as_deref()
        .map(parse_frame_labels)
        .transpose()?;
    let truth = args
        .truth
        .as_deref()
        .map(|p| load_truth(p, n, frame_labels.as_deref()))
        .transpose()?;

    let frames: Vec<(usize, &FlowPolar, &[Region])> = polars
        .iter()
        .map(|(i, p)| (*i, p, regions[i].as_slice()))
        .collect();
    let rows = match args.labels {
        LabelKind::Frame => batch_features(
            &frames,
            None,
            frame_labels.as_deref(),
            LabelTransfer::FrameLabel,
            None,
        )?,
        LabelKind::Abnormal | LabelKind::Class => {
            let boxes: Option<Vec<Vec<LabeledBox>>> = truth.as_ref().map(|t| {
                frames
                    .iter()
                    .map(|(i, ..)| {
                        t.get(*i)
                            .into_iter()
                            .flatten()
                            .filter_map(|e| {
                                let label = match args.labels {
                                    LabelKind::Abnormal => usize::from(e.abnormal),
                                    _ => e.class?.index(),
                                };
                                Some(LabeledBox {
                                    bbox: e.bbox,
                                    label,
                                })
                            })
                            .collect()
                    })
                    .collect()
            });
            let unmatched = matches!(args.labels, LabelKind::Abnormal).then_some(0);
            batch_features(
                &frames,
                boxes.as_deref(),
                None,
                LabelTransfer::Iou,
                unmatched,
            )?
        }
    };
    let path = out.join("features.csv");
    write(&path, features_to_csv(&rows))?;
    println!("wrote {} feature rows to {}", rows.len(), path.display());
    Ok(())
}

fn train_rf(args: &TrainRfArgs, out: &Path, config: &PipelineConfig) -> Result<()> {
    let rows: Vec<FeatureRow> = parse_features_csv(&read(&args.features)?)?
        .into_iter()
        .filter(|r| r.label.is_some())
        .collect();
    let max_label = rows.iter().filter_map(|r| r.label).max().unwrap_or(0);
    let n_classes = args.classes.unwrap_or(if max_label < 2 {
        2
    } else {
        BehaviorClass::ALL.len()
    });
    let set = TrainingSet::new(
        rows.iter()
            .map(|r| r.features.to_array().to_vec())
            .collect(),
        rows.iter().map(|r| r.label.unwrap_or(0)).collect(),
        rows.iter().map(FeatureRow::key).collect(),
        n_classes,
    )?;
    let model = rf_train(&set, &config.forest, config.seed)?;
    let path = out.join("rf.csrf");
    create_dir(out)?;
    model.save(&path)?;
    println!(
        "trained {} trees on {} rows, wrote {}",
        model.trees.len(),
        set.len(),
        path.display()
    );
    if let Some(k) = args.cv {
        let folds = cross_validate(&set, &config.forest, config.seed, k)?;
        let mean = folds.iter().sum::<f64>() / folds.len() as f64;
        println!("{k}-fold cross-validated accuracy: {mean} (folds: {folds:?})");
    }
    Ok(())
}

fn eval(args: &EvalArgs, out: &Path) -> Result<()> {
    if !(0.0..=1.0).contains(&args.iou) {
        return Err(Error::InvalidArgument("--iou must lie in [0, 1]".into()));
    }
    let mut metrics = MetricsTable::default();
    if let Some(scores_path) = &args.scores {
        let labels = parse_frame_labels(&args.gt)?;
        let scores = IngestedVerdicts::load(scores_path, 0.5)?;
        let mut pairs = Vec::new();
        for (frame, label) in labels.iter().enumerate() {
            let score = scores
                .scores
                .get(&frame)
                .ok_or_else(|| Error::InvalidArgument(format!("no score for frame {frame}")))?;
            pairs.push((*score, *label));
        }
        let mut c = ConfusionCounts::default();
        for (s, l) in &pairs {
            match (*s >= 0.5, *l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        metrics.metrics("frame", &c, &classification_metrics(&c)?);
        let curve = roc_auc(&pairs)?;
        metrics.push("frame", "auc", curve.auc);
        write(
            &out.join("roc.csv"),
            rocs_to_csv(&[("frame".into(), &curve)]),
        )?;
    } else {
        let gt_text = read(&args.gt)?;
        if let Some(pred) = &args.pred {
            let rows = parse_detection_rows(pred)?;
            let truth = truth_covering(&gt_text, rows.iter().map(|r| r.frame))?;
            let mut by_frame: BTreeMap<usize, Vec<Detection>> = BTreeMap::new();
            for r in rows {
                by_frame.entry(r.frame).or_default().push(Detection {
                    frame: r.frame,
                    bbox: r.bbox,
                    confidence: r.confidence,
                    class_label: r.class_label,
                });
            }
            let mut per_frame = String::from("frame,tp,fp,fn\n");
            let mut total = ConfusionCounts::default();
            let empty = Vec::new();
            for (frame, gts) in truth.iter().enumerate() {
                let preds = by_frame.get(&frame).unwrap_or(&empty);
                let boxes: Vec<BBox> = gts.iter().map(|g| g.bbox).collect();
                let c = match_detections(preds, &boxes, args.iou)?.counts;
                if c.total() > 0 {
                    let _ = writeln!(per_frame, "{frame},{},{},{}", c.tp, c.fp, c.fn_);
                }
                total += c;
            }
            write(&out.join("detection_frames.csv"), per_frame)?;
            metrics.push("detection", "iou_threshold", args.iou);
            match classification_metrics(&total) {
                Ok(m) => metrics.metrics("detection", &total, &m),
                Err(_) => metrics.counts("detection", &total),
            }
        } else if let Some(tracks) = &args.tracks {
            let records = parse_tracks_csv(&read(tracks)?)?;
            let truth = truth_covering(&gt_text, records.iter().map(|r| r.frame))?;
            let boxes: Vec<TrackBox> = records
                .iter()
                .filter(|r| r.status == TrackStatus::Confirmed)
                .map(|r| TrackBox {
                    frame: r.frame,
                    track_id: r.track_id,
                    bbox: r.bbox(),
                })
                .collect();
            let gts: Vec<TruthBox> = truth
                .iter()
                .flatten()
                .map(|t| TruthBox {
                    frame: t.frame,
                    id: t.id,
                    bbox: t.bbox,
                })
                .collect();
            let criterion = if args.center_in_box {
                crowdscope::eval::TrackCriterion::CenterInBox
            } else {
                crowdscope::eval::TrackCriterion::Iou {
                    threshold: args.iou,
                }
            };
            let report = track_assignment_metrics(&boxes, &gts, criterion)?;
            metrics.push("track", "criterion", criterion.describe());
            for (section, c) in [
                ("track_per_frame", report.per_frame),
                ("track_per_track", report.per_track),
            ] {
                match classification_metrics(&c) {
                    Ok(m) => metrics.metrics(section, &c, &m),
                    Err(_) => metrics.counts(section, &c),
                }
            }
        } else {
            return Err(Error::Config(
                "eval needs --pred, --tracks or --scores".into(),
            ));
        }
    }
    let path = out.join("metrics.csv");
    write(&path, metrics.to_csv())?;
    print!("{}", metrics.to_csv());
    Ok(())
}

/// Ground truth grouped over enough frames to cover it and the given prediction frames.
fn truth_covering(
    gt_text: &str,
    pred_frames: impl Iterator<Item = usize>,
) -> Result<Vec<Vec<TruthEntry>>> {
    let entries = parse_truth_entries(gt_text, None)?;
    let n = entries
        .iter()
        .map(|e| e.frame)
        .chain(pred_frames)
        .max()
        .map(|f| f + 1)
        .unwrap_or(0);
    group_truth(entries, n)
}
