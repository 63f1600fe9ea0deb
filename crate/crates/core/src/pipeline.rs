//! Pipeline orchestration: generate, validate, train, track, evaluate, and
//! the text/clip-size ablation grid. Every command is a deterministic
//! function of its config; a fixed seed reproduces every artifact byte for
//! byte.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anno::{parse_clip, validate_clip, ClipAnnotation, Scenario, Violation, CLIP_EXT};
use crate::metrics::{aggregate, evaluate_pair, render_csv, render_markdown, AggregateTable, Grouping, MetricReport, MetricsError};
use crate::numerics::{adam_step, load_checkpoint, save_checkpoint, Binding, Graph, NumericsError, OptimizerState};
use crate::synth::{read_frames, split_suite, write_clip, ScenarioConfig, SynthError};
use crate::tgtrack::{
    outputs_to_prediction, parse_prediction, queries_from_annotation, serialize_prediction, total_loss, LossWeights,
    Model, PredError, TextMode, TrackError, TrackPrediction, PRED_EXT,
};
use crate::vision::ModelConfig;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Anno(#[from] crate::anno::AnnoError),
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Pred(#[from] PredError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad configuration: {0}")]
    Config(String),
}

impl PipelineError {
    /// Stable machine-parsable category for CLI exits.
    pub fn category(&self) -> &'static str {
        match self {
            PipelineError::Synth(_) => "SynthError",
            PipelineError::Anno(crate::anno::AnnoError::MalformedDocument(_)) => "MalformedDocument",
            PipelineError::Anno(_) => "SchemaViolation",
            PipelineError::Track(_) => "TrackError",
            PipelineError::Metrics(_) => "MetricsError",
            PipelineError::Pred(_) => "PredictionError",
            PipelineError::Numerics(_) => "NumericsError",
            PipelineError::Io { .. } => "IoError",
            PipelineError::Config(_) => "ConfigError",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Training/evaluation clip length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipSize {
    Short,
    Long,
    Custom(usize),
}

impl ClipSize {
    pub fn n_frames(&self) -> usize {
        match self {
            ClipSize::Short => 8,
            ClipSize::Long => 24,
            ClipSize::Custom(n) => *n,
        }
    }
}

/// Which status text guides refinement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextModeCfg {
    Gt,
    Pred,
    None,
}

impl std::str::FromStr for TextModeCfg {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gt" => Ok(TextModeCfg::Gt),
            "pred" => Ok(TextModeCfg::Pred),
            "none" => Ok(TextModeCfg::None),
            other => Err(format!("unknown text mode {other:?} (expected gt|pred|none)")),
        }
    }
}

/// Resolved run configuration; echoed verbatim into every run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Clips to generate per scenario; scenarios absent from the map (or
    /// mapped to zero) are not generated.
    pub scenario_counts: BTreeMap<Scenario, usize>,
    pub clip_size: ClipSize,
    pub n_points: usize,
    pub width: u32,
    pub height: u32,
    pub intensity: f64,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub lr: f64,
    pub steps: usize,
    pub text_mode: TextModeCfg,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            scenario_counts: Scenario::ALL.iter().map(|&s| (s, 10)).collect(),
            clip_size: ClipSize::Long,
            n_points: 8,
            width: 256,
            height: 256,
            intensity: 0.7,
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            lr: 3e-4,
            steps: 300,
            text_mode: TextModeCfg::Pred,
            workers: 1,
        }
    }
}

impl RunConfig {
    pub fn template(&self) -> ScenarioConfig {
        ScenarioConfig {
            scenario: Scenario::Clean,
            seed: 0,
            n_frames: self.clip_size.n_frames(),
            n_points: self.n_points,
            width: self.width,
            height: self.height,
            intensity: self.intensity,
        }
    }

    pub fn echo_into(&self, run_dir: &Path) -> Result<(), PipelineError> {
        fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
        let path = run_dir.join("config.json");
        let mut bytes = serde_json::to_vec_pretty(self).expect("config serialization");
        bytes.push(b'\n');
        fs::write(&path, bytes).map_err(io_err(&path))
    }
}

/// Order-preserving parallel map over clips. `workers <= 1` degrades to a
/// plain sequential loop; results are identical either way.
fn par_map<T, R, F>(items: Vec<T>, workers: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    if workers <= 1 || items.len() <= 1 {
        return items.into_iter().map(f).collect();
    }
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let jobs: Vec<(usize, T)> = items.into_iter().enumerate().collect();
    let queue = std::sync::Mutex::new(jobs);
    let fref = &f;
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let job = queue.lock().unwrap().pop();
                match job {
                    Some((i, item)) => {
                        let r = fref(item);
                        results.lock().unwrap()[i] = Some(r);
                    }
                    None => break,
                }
            });
        }
    });
    slots.into_iter().map(|r| r.expect("worker completed")).collect()
}

// ---- gen ----------------------------------------------------------------

#[derive(Debug)]
pub struct GenSummary {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Generate the train/test suite under `out_dir/train` and `out_dir/test`.
pub fn cmd_gen(cfg: &RunConfig, out_dir: &Path) -> Result<GenSummary, PipelineError> {
    let (train_cfgs, test_cfgs) = split_suite(cfg.seed, &cfg.scenario_counts, &cfg.template())?;
    let train_dir = out_dir.join("train");
    let test_dir = out_dir.join("test");
    fs::create_dir_all(&train_dir).map_err(io_err(&train_dir))?;
    fs::create_dir_all(&test_dir).map_err(io_err(&test_dir))?;

    let write_all = |cfgs: Vec<ScenarioConfig>, dir: PathBuf| -> Result<Vec<String>, PipelineError> {
        let results = par_map(cfgs, cfg.workers, |c| write_clip(&dir, &c));
        let mut ids = Vec::with_capacity(results.len());
        for r in results {
            ids.push(r?);
        }
        ids.sort();
        Ok(ids)
    };
    Ok(GenSummary {
        train: write_all(train_cfgs, train_dir)?,
        test: write_all(test_cfgs, test_dir)?,
    })
}

// ---- validate -----------------------------------------------------------

/// Parse and validate clip documents. The boolean is true when the file
/// parsed; violations are the invariant failures found after parsing.
pub fn cmd_validate(paths: &[PathBuf]) -> Vec<(PathBuf, Result<Vec<Violation>, PipelineError>)> {
    paths
        .iter()
        .map(|p| {
            let out = fs::read(p)
                .map_err(io_err(p))
                .and_then(|bytes| parse_clip(&bytes).map_err(PipelineError::from))
                .map(|clip| validate_clip(&clip));
            (p.clone(), out)
        })
        .collect()
}

// ---- clip loading ---------------------------------------------------------

/// A clip annotation together with its rendered frames.
pub struct LoadedClip {
    pub annotation: ClipAnnotation,
    pub frames: Vec<Vec<f64>>,
}

/// Load every `.vlspt.json` (with sibling `.frames.bin`) in a directory,
/// sorted by file name for a stable order.
pub fn load_clips(dir: &Path) -> Result<Vec<LoadedClip>, PipelineError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.to_string_lossy().ends_with(CLIP_EXT))
        .collect();
    paths.sort();
    let mut clips = Vec::with_capacity(paths.len());
    for path in paths {
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let annotation = parse_clip(&bytes)?;
        let frames_path = sibling_frames_path(&path);
        let file = fs::File::open(&frames_path).map_err(io_err(&frames_path))?;
        let (frames, h, w) = read_frames(std::io::BufReader::new(file))?;
        if (w, h) != (annotation.width, annotation.height) {
            return Err(PipelineError::Config(format!(
                "frame file {} is {}x{} but the annotation says {}x{}",
                frames_path.display(),
                w,
                h,
                annotation.width,
                annotation.height
            )));
        }
        clips.push(LoadedClip { annotation, frames });
    }
    Ok(clips)
}

fn sibling_frames_path(clip_path: &Path) -> PathBuf {
    let s = clip_path.to_string_lossy();
    PathBuf::from(s.replace(CLIP_EXT, crate::synth::FRAMES_EXT))
}

// ---- train ----------------------------------------------------------------

#[derive(Debug)]
pub struct TrainSummary {
    pub steps: usize,
    pub first_loss: f64,
    pub last_loss: f64,
    pub checkpoint: PathBuf,
}

fn text_mode_for<'a>(cfg_mode: TextModeCfg, ann: &'a ClipAnnotation) -> TextMode<'a> {
    match cfg_mode {
        TextModeCfg::Gt => TextMode::GroundTruth(ann),
        TextModeCfg::Pred => TextMode::Predicted,
        TextModeCfg::None => TextMode::None,
    }
}

/// Train on every clip in `clips_dir` (round-robin in file-name order) and
/// write `checkpoint.tgpt`, `loss.csv`, and the echoed config into
/// `run_dir`.
pub fn cmd_train(cfg: &RunConfig, clips_dir: &Path, run_dir: &Path) -> Result<TrainSummary, PipelineError> {
    let clips = load_clips(clips_dir)?;
    if clips.is_empty() {
        return Err(PipelineError::Config(format!(
            "no clips found in {}",
            clips_dir.display()
        )));
    }
    cfg.echo_into(run_dir)?;

    let mut model = Model::new(cfg.model.clone(), cfg.seed);
    let mut opt = OptimizerState::new(cfg.lr);
    let mut log = String::from("step,clip_id,total,point,smooth,text\n");
    let mut first_loss = 0.0;
    let mut last_loss = 0.0;

    for step in 0..cfg.steps {
        let clip = &clips[step % clips.len()];
        let breakdown = train_step(&mut model, &mut opt, clip, cfg)?;
        if step == 0 {
            first_loss = breakdown.3;
        }
        last_loss = breakdown.3;
        log.push_str(&format!(
            "{step},{},{:.6},{:.6},{:.6},{:.6}\n",
            clip.annotation.clip_id, breakdown.3, breakdown.0, breakdown.1, breakdown.2
        ));
    }

    let loss_path = run_dir.join("loss.csv");
    fs::write(&loss_path, log).map_err(io_err(&loss_path))?;
    let ckpt_path = run_dir.join("checkpoint.tgpt");
    save_checkpoint(&model.params, &ckpt_path).map_err(io_err(&ckpt_path))?;
    Ok(TrainSummary {
        steps: cfg.steps,
        first_loss,
        last_loss,
        checkpoint: ckpt_path,
    })
}

/// One optimization step on one clip. Returns (point, smooth, text, total).
fn train_step(
    model: &mut Model,
    opt: &mut OptimizerState,
    clip: &LoadedClip,
    cfg: &RunConfig,
) -> Result<(f64, f64, f64, f64), PipelineError> {
    let ann = &clip.annotation;
    let queries = queries_from_annotation(ann)?;
    let mut g = Graph::new();
    let mut binding = Binding::new();
    let bound = model.bind(&mut g, &mut binding);
    let outputs = crate::tgtrack::track_clip(
        &mut g,
        &bound,
        &model.cfg,
        &clip.frames,
        ann.height as usize,
        ann.width as usize,
        &queries,
        text_mode_for(cfg.text_mode, ann),
    )?;
    let loss = total_loss(&mut g, &outputs, ann, &cfg.loss)?;
    g.backward(loss.total).map_err(TrackError::from)?;
    binding.collect_grads(&g, &mut model.params);
    adam_step(&mut model.params, opt).map_err(TrackError::from)?;
    model.params.zero_grad();
    Ok((loss.point, loss.smooth, loss.text, loss.total_value))
}

/// Mean forward-only loss over a clip set (no parameter updates).
pub fn mean_eval_loss(model: &Model, clips: &[LoadedClip], weights: &LossWeights) -> Result<f64, PipelineError> {
    let mut sum = 0.0;
    for clip in clips {
        let ann = &clip.annotation;
        let queries = queries_from_annotation(ann)?;
        let mut g = Graph::new();
        let mut binding = Binding::new();
        let bound = model.bind(&mut g, &mut binding);
        let outputs = crate::tgtrack::track_clip(
            &mut g,
            &bound,
            &model.cfg,
            &clip.frames,
            ann.height as usize,
            ann.width as usize,
            &queries,
            TextMode::GroundTruth(ann),
        )?;
        let loss = total_loss(&mut g, &outputs, ann, weights)?;
        sum += loss.total_value;
    }
    Ok(sum / clips.len().max(1) as f64)
}

// ---- track ------------------------------------------------------------------

/// Load a checkpoint into a model, verifying the parameter inventory
/// matches the configured architecture.
pub fn load_model(cfg: &ModelConfig, checkpoint: &Path) -> Result<Model, PipelineError> {
    let bytes = fs::read(checkpoint).map_err(io_err(checkpoint))?;
    let params = load_checkpoint(&bytes).map_err(TrackError::from)?;
    let expected = Model::new(cfg.clone(), 0);
    let expect_names: Vec<&String> = expected.params.names().collect();
    let got_names: Vec<&String> = params.names().collect();
    if expect_names != got_names {
        return Err(PipelineError::Config(format!(
            "checkpoint parameters do not match the configured model ({} vs {} tensors)",
            got_names.len(),
            expect_names.len()
        )));
    }
    for (name, p) in params.iter() {
        if expected.params.get(name).shape != p.shape {
            return Err(PipelineError::Config(format!(
                "checkpoint parameter {name} has shape {:?}, expected {:?}",
                p.shape,
                expected.params.get(name).shape
            )));
        }
    }
    Ok(Model::from_params(cfg.clone(), params))
}

/// Track one loaded clip with the given text mode.
pub fn track_one(model: &Model, clip: &LoadedClip, mode: TextModeCfg) -> Result<TrackPrediction, PipelineError> {
    let ann = &clip.annotation;
    let queries = queries_from_annotation(ann)?;
    let mut g = Graph::new();
    let mut binding = Binding::new();
    let bound = model.bind(&mut g, &mut binding);
    let outputs = crate::tgtrack::track_clip(
        &mut g,
        &bound,
        &model.cfg,
        &clip.frames,
        ann.height as usize,
        ann.width as usize,
        &queries,
        text_mode_for(mode, ann),
    )?;
    Ok(outputs_to_prediction(&g, &outputs, &ann.clip_id, &queries))
}

/// Track every clip in `clips_dir` and write one `.pred.json` per clip.
pub fn cmd_track(
    cfg: &RunConfig,
    checkpoint: &Path,
    clips_dir: &Path,
    preds_dir: &Path,
) -> Result<usize, PipelineError> {
    let model = load_model(&cfg.model, checkpoint)?;
    let clips = load_clips(clips_dir)?;
    fs::create_dir_all(preds_dir).map_err(io_err(preds_dir))?;
    let results = par_map(clips, cfg.workers, |clip| {
        track_one(&model, &clip, cfg.text_mode).map(|pred| (clip.annotation.clip_id.clone(), pred))
    });
    let mut n = 0;
    for r in results {
        let (clip_id, pred) = r?;
        let path = preds_dir.join(format!("{clip_id}{PRED_EXT}"));
        fs::write(&path, serialize_prediction(&pred)).map_err(io_err(&path))?;
        n += 1;
    }
    Ok(n)
}

// ---- eval ---------------------------------------------------------------------

/// Evaluate predictions against ground truth; writes `report.csv` and
/// `report.md` and returns the per-scenario aggregate.
pub fn cmd_eval(gt_dir: &Path, pred_dir: &Path, out_dir: &Path) -> Result<AggregateTable, PipelineError> {
    let reports = eval_reports(gt_dir, pred_dir)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let csv_path = out_dir.join("report.csv");
    fs::write(&csv_path, render_csv(&reports)).map_err(io_err(&csv_path))?;

    let by_scenario = aggregate(&reports, Grouping::Scenario);
    let mut md = render_markdown(&by_scenario, "Results by scenario");
    if reports.iter().any(|r| !r.instrument_types.is_empty()) {
        md.push('\n');
        md.push_str(&render_markdown(
            &aggregate(&reports, Grouping::InstrumentType),
            "Results by instrument type",
        ));
    }
    let md_path = out_dir.join("report.md");
    fs::write(&md_path, md).map_err(io_err(&md_path))?;
    Ok(by_scenario)
}

/// Per-clip metric reports for every ground-truth clip in `gt_dir`.
pub fn eval_reports(gt_dir: &Path, pred_dir: &Path) -> Result<Vec<MetricReport>, PipelineError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(gt_dir)
        .map_err(io_err(gt_dir))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.to_string_lossy().ends_with(CLIP_EXT))
        .collect();
    paths.sort();
    let mut reports = Vec::with_capacity(paths.len());
    for path in paths {
        let gt = parse_clip(&fs::read(&path).map_err(io_err(&path))?)?;
        let pred_path = pred_dir.join(format!("{}{PRED_EXT}", gt.clip_id));
        let pred = parse_prediction(&fs::read(&pred_path).map_err(io_err(&pred_path))?)?;
        reports.push(evaluate_pair(&gt, &pred)?);
    }
    Ok(reports)
}

// ---- ablate -------------------------------------------------------------------

/// Run the 2x2 ablation grid {text on/off} x {short/long training clips},
/// evaluated on a common long-clip test split. Returns the markdown matrix.
pub fn cmd_ablate(cfg: &RunConfig, out_dir: &Path) -> Result<String, PipelineError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    // Common test split: long clips, the configured seed.
    let mut test_cfg = cfg.clone();
    test_cfg.clip_size = ClipSize::Long;
    let test_dir = out_dir.join("test");
    fs::create_dir_all(&test_dir).map_err(io_err(&test_dir))?;
    let (_, test_cfgs) = split_suite(cfg.seed, &cfg.scenario_counts, &test_cfg.template())?;
    for c in &test_cfgs {
        write_clip(&test_dir, c)?;
    }

    let mut rows = Vec::new();
    for &clip_size in &[ClipSize::Short, ClipSize::Long] {
        for &text_on in &[true, false] {
            let label = format!(
                "{}-{}",
                match clip_size {
                    ClipSize::Short => "short",
                    ClipSize::Long => "long",
                    ClipSize::Custom(_) => "custom",
                },
                if text_on { "text" } else { "notext" }
            );
            let row_dir = out_dir.join(&label);
            let mut row_cfg = cfg.clone();
            row_cfg.clip_size = clip_size;
            row_cfg.text_mode = if text_on { TextModeCfg::Gt } else { TextModeCfg::None };

            let (train_cfgs, _) = split_suite(cfg.seed, &cfg.scenario_counts, &row_cfg.template())?;
            let train_dir = row_dir.join("train");
            fs::create_dir_all(&train_dir).map_err(io_err(&train_dir))?;
            for c in &train_cfgs {
                write_clip(&train_dir, c)?;
            }
            let summary = cmd_train(&row_cfg, &train_dir, &row_dir)?;

            let mut track_cfg = row_cfg.clone();
            track_cfg.text_mode = if text_on { TextModeCfg::Pred } else { TextModeCfg::None };
            let preds_dir = row_dir.join("preds");
            cmd_track(&track_cfg, &summary.checkpoint, &test_dir, &preds_dir)?;
            let reports = eval_reports(&test_dir, &preds_dir)?;
            let table = aggregate(&reports, Grouping::Scenario);
            rows.push((clip_size, text_on, table.mean));
        }
    }

    let mut md = String::from("## Ablation: text guidance x training clip size\n\n");
    md.push_str("| Clip Size | Text | AJ | <δ_avg | OA | EPE |\n|---|---|---|---|---|---|\n");
    for (clip_size, text_on, mean) in &rows {
        let size = match clip_size {
            ClipSize::Short => "short",
            ClipSize::Long => "long",
            ClipSize::Custom(_) => "custom",
        };
        md.push_str(&format!(
            "| {} | {} | {:.4} | {:.4} | {:.4} | {:.3} |\n",
            size,
            if *text_on { "yes" } else { "no" },
            mean.aj,
            mean.delta_avg,
            mean.oa,
            mean.epe
        ));
    }
    let path = out_dir.join("ablation.md");
    let mut f = fs::File::create(&path).map_err(io_err(&path))?;
    f.write_all(md.as_bytes()).map_err(io_err(&path))?;
    Ok(md)
}
