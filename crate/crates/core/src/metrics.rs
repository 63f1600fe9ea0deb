//! Evaluation metric suite: threshold accuracy, Average Jaccard, occlusion
//! accuracy, endpoint error, and status-classification accuracy, with
//! per-scenario and per-instrument aggregation.
//!
//! All distances are measured after rescaling both ground truth and
//! predictions into the fixed evaluation frame (256x256 by default).
//! Ground-truth visibility is coordinate presence; predicted visibility is
//! the tracker's own flag.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::anno::{ClipAnnotation, InstrumentType, PointStatus, Scenario};
use crate::tgtrack::TrackPrediction;

/// Distance thresholds (pixels in the evaluation frame).
pub const THRESHOLDS: [u32; 5] = [2, 4, 8, 16, 32];

/// Default evaluation frame.
pub const EVAL_SIZE: (u32, u32) = (256, 256);

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("zero extent in rescale: {0}x{1}")]
    ZeroExtent(u32, u32),
    #[error("track count mismatch: ground truth has {gt}, prediction has {pred}")]
    TrackCountMismatch { gt: usize, pred: usize },
    #[error("prediction for clip {clip_id} missing frame {frame}")]
    MissingFrame { clip_id: String, frame: u32 },
    #[error("no ground-truth-visible points to score")]
    NoVisiblePoints,
    #[error("no ground-truth-visible points at the final annotated frame")]
    NoEndpointGT,
    #[error("empty evaluation: no (point, frame) pairs")]
    EmptyEval,
}

/// Map a coordinate between pixel frames.
pub fn rescale(coord: (f64, f64), from_wh: (u32, u32), to_wh: (u32, u32)) -> Result<(f64, f64), MetricsError> {
    if from_wh.0 == 0 || from_wh.1 == 0 {
        return Err(MetricsError::ZeroExtent(from_wh.0, from_wh.1));
    }
    Ok((
        coord.0 * to_wh.0 as f64 / from_wh.0 as f64,
        coord.1 * to_wh.1 as f64 / from_wh.1 as f64,
    ))
}

/// One (track, annotated frame) cell of the evaluation table.
#[derive(Debug, Clone, Copy)]
struct Cell {
    gt_vis: bool,
    pred_vis: bool,
    /// Euclidean error in the evaluation frame, present iff `gt_vis`.
    dist: Option<f64>,
    gt_status: PointStatus,
    pred_status: PointStatus,
}

/// A ground-truth clip joined with a prediction, rescaled and indexed by
/// (track, annotated frame).
pub struct EvalPair<'a> {
    pub gt: &'a ClipAnnotation,
    pub pred: &'a TrackPrediction,
    pub eval_w: u32,
    pub eval_h: u32,
    cells: Vec<Vec<Cell>>,
}

impl<'a> EvalPair<'a> {
    pub fn new(gt: &'a ClipAnnotation, pred: &'a TrackPrediction) -> Result<Self, MetricsError> {
        Self::with_eval_frame(gt, pred, EVAL_SIZE)
    }

    pub fn with_eval_frame(
        gt: &'a ClipAnnotation,
        pred: &'a TrackPrediction,
        (eval_w, eval_h): (u32, u32),
    ) -> Result<Self, MetricsError> {
        if gt.tracks.len() != pred.tracks.len() {
            return Err(MetricsError::TrackCountMismatch {
                gt: gt.tracks.len(),
                pred: pred.tracks.len(),
            });
        }
        let from = (gt.width, gt.height);
        let mut cells = Vec::with_capacity(gt.tracks.len());
        for (track, ptrack) in gt.tracks.iter().zip(&pred.tracks) {
            let mut row = Vec::with_capacity(gt.frame_indices.len());
            for (oi, &fi) in gt.frame_indices.iter().enumerate() {
                let obs = &track.observations[oi];
                let pframe = ptrack
                    .frames
                    .iter()
                    .find(|f| f.frame == fi)
                    .ok_or_else(|| MetricsError::MissingFrame {
                        clip_id: gt.clip_id.clone(),
                        frame: fi,
                    })?;
                let dist = match obs.coord {
                    Some(gc) => {
                        let g = rescale(gc, from, (eval_w, eval_h))?;
                        let p = rescale(pframe.coord, from, (eval_w, eval_h))?;
                        Some(((g.0 - p.0).powi(2) + (g.1 - p.1).powi(2)).sqrt())
                    }
                    None => None,
                };
                row.push(Cell {
                    gt_vis: obs.coord.is_some(),
                    pred_vis: pframe.visible,
                    dist,
                    gt_status: obs.status,
                    pred_status: pframe.status,
                });
            }
            cells.push(row);
        }
        Ok(EvalPair {
            gt,
            pred,
            eval_w,
            eval_h,
            cells,
        })
    }

    fn all_cells(&self) -> impl Iterator<Item = &Cell> {
        self.cells.iter().flatten()
    }
}

/// Fraction of ground-truth-visible points predicted within `k` pixels
/// (inclusive) in the evaluation frame.
pub fn delta_accuracy(pair: &EvalPair, k: f64) -> Result<f64, MetricsError> {
    assert!(k > 0.0, "threshold must be positive");
    let mut visible = 0usize;
    let mut within = 0usize;
    for cell in pair.all_cells() {
        if let Some(d) = cell.dist {
            visible += 1;
            if d <= k {
                within += 1;
            }
        }
    }
    if visible == 0 {
        return Err(MetricsError::NoVisiblePoints);
    }
    Ok(within as f64 / visible as f64)
}

/// Unweighted mean of [`delta_accuracy`] over the standard thresholds.
pub fn delta_avg(pair: &EvalPair) -> Result<f64, MetricsError> {
    let mut sum = 0.0;
    for k in THRESHOLDS {
        sum += delta_accuracy(pair, k as f64)?;
    }
    Ok(sum / THRESHOLDS.len() as f64)
}

/// Mean Jaccard score across thresholds. Per threshold: TP are visible
/// points predicted visible within the threshold, FN are visible points
/// missed (predicted invisible or too far), FP are invisible points
/// predicted visible. An empty denominator counts as a perfect 1.0 (no
/// positives anywhere and none claimed).
pub fn average_jaccard(pair: &EvalPair) -> Result<f64, MetricsError> {
    if pair.all_cells().next().is_none() {
        return Err(MetricsError::EmptyEval);
    }
    let mut sum = 0.0;
    for k in THRESHOLDS {
        let k = k as f64;
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for cell in pair.all_cells() {
            match cell.dist {
                Some(d) => {
                    if cell.pred_vis && d <= k {
                        tp += 1;
                    } else {
                        fn_ += 1;
                    }
                }
                None => {
                    if cell.pred_vis {
                        fp += 1;
                    }
                }
            }
        }
        let denom = tp + fp + fn_;
        sum += if denom == 0 { 1.0 } else { tp as f64 / denom as f64 };
    }
    Ok(sum / THRESHOLDS.len() as f64)
}

/// Fraction of all (point, frame) pairs whose predicted visibility matches
/// the ground truth (coordinate presence).
pub fn occlusion_accuracy(pair: &EvalPair) -> Result<f64, MetricsError> {
    let mut total = 0usize;
    let mut correct = 0usize;
    for cell in pair.all_cells() {
        total += 1;
        if cell.pred_vis == cell.gt_vis {
            correct += 1;
        }
    }
    if total == 0 {
        return Err(MetricsError::EmptyEval);
    }
    Ok(correct as f64 / total as f64)
}

/// Mean Euclidean error over ground-truth-visible points at the final
/// annotated frame.
pub fn endpoint_error(pair: &EvalPair) -> Result<f64, MetricsError> {
    let last = pair.gt.frame_indices.len().checked_sub(1).ok_or(MetricsError::EmptyEval)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for row in &pair.cells {
        if let Some(d) = row[last].dist {
            sum += d;
            count += 1;
        }
    }
    if count == 0 {
        return Err(MetricsError::NoEndpointGT);
    }
    Ok(sum / count as f64)
}

/// Micro status accuracy over all annotated (point, frame) pairs.
pub fn text_accuracy(pair: &EvalPair) -> Result<f64, MetricsError> {
    let mut total = 0usize;
    let mut correct = 0usize;
    for cell in pair.all_cells() {
        total += 1;
        if cell.pred_status == cell.gt_status {
            correct += 1;
        }
    }
    if total == 0 {
        return Err(MetricsError::EmptyEval);
    }
    Ok(correct as f64 / total as f64)
}

/// Per-class status recall: for each ground-truth class, the fraction of
/// its occurrences predicted correctly.
pub fn text_accuracy_per_status(pair: &EvalPair) -> Result<BTreeMap<PointStatus, (usize, usize)>, MetricsError> {
    let mut by_class: BTreeMap<PointStatus, (usize, usize)> = BTreeMap::new();
    for cell in pair.all_cells() {
        let e = by_class.entry(cell.gt_status).or_insert((0, 0));
        e.1 += 1;
        if cell.pred_status == cell.gt_status {
            e.0 += 1;
        }
    }
    if by_class.is_empty() {
        return Err(MetricsError::EmptyEval);
    }
    Ok(by_class)
}

/// All metrics for one clip. Coordinate metrics are absent when the clip
/// has no ground-truth-visible points; such clips are reported in the
/// aggregate `skipped` column instead.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub clip_id: String,
    pub scenario: Scenario,
    pub instrument_types: Vec<InstrumentType>,
    pub n_points: usize,
    pub delta_at: Vec<(u32, f64)>,
    pub delta_avg: Option<f64>,
    pub aj: Option<f64>,
    pub oa: f64,
    pub epe: Option<f64>,
    pub text_acc: f64,
    pub per_status: BTreeMap<PointStatus, (usize, usize)>,
}

impl MetricReport {
    pub fn skipped(&self) -> bool {
        self.delta_avg.is_none()
    }
}

/// Evaluate one ground truth + prediction pair at the default 256x256
/// evaluation frame.
pub fn evaluate_pair(gt: &ClipAnnotation, pred: &TrackPrediction) -> Result<MetricReport, MetricsError> {
    let pair = EvalPair::new(gt, pred)?;
    let has_visible = pair.all_cells().any(|c| c.gt_vis);
    let (delta_at, davg, aj, epe) = if has_visible {
        let mut d = Vec::with_capacity(THRESHOLDS.len());
        for k in THRESHOLDS {
            d.push((k, delta_accuracy(&pair, k as f64)?));
        }
        (
            d,
            Some(delta_avg(&pair)?),
            Some(average_jaccard(&pair)?),
            endpoint_error(&pair).ok(),
        )
    } else {
        (Vec::new(), None, None, None)
    };
    Ok(MetricReport {
        clip_id: gt.clip_id.clone(),
        scenario: gt.scenario,
        instrument_types: {
            let mut tys: Vec<InstrumentType> = gt
                .tracks
                .iter()
                .filter_map(|t| t.instrument.map(|m| m.instrument_type))
                .collect();
            tys.sort();
            tys.dedup();
            tys
        },
        n_points: gt.tracks.len(),
        delta_at,
        delta_avg: davg,
        aj,
        oa: occlusion_accuracy(&pair)?,
        epe,
        text_acc: text_accuracy(&pair)?,
        per_status: text_accuracy_per_status(&pair)?,
    })
}

/// How to group clips for aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grouping {
    Scenario,
    InstrumentType,
}

/// Unweighted per-group means plus the overall mean row.
#[derive(Debug, Clone)]
pub struct GroupRow {
    pub group: String,
    pub n_clips: usize,
    pub skipped: usize,
    pub delta_avg: f64,
    pub aj: f64,
    pub oa: f64,
    pub epe: f64,
    pub text_acc: f64,
}

#[derive(Debug, Clone)]
pub struct AggregateTable {
    pub rows: Vec<GroupRow>,
    pub mean: GroupRow,
}

fn mean_row(group: &str, reports: &[&MetricReport]) -> GroupRow {
    let n = reports.len();
    let scored: Vec<&&MetricReport> = reports.iter().filter(|r| !r.skipped()).collect();
    let s = scored.len().max(1) as f64;
    // A clip can carry coordinate metrics but still lack endpoint ground
    // truth (everything occluded at the final frame); EPE averages only
    // over clips that have one.
    let epe_vals: Vec<f64> = scored.iter().filter_map(|r| r.epe).collect();
    GroupRow {
        group: group.to_string(),
        n_clips: n,
        skipped: n - scored.len(),
        delta_avg: scored.iter().map(|r| r.delta_avg.unwrap()).sum::<f64>() / s,
        aj: scored.iter().map(|r| r.aj.unwrap()).sum::<f64>() / s,
        epe: epe_vals.iter().sum::<f64>() / epe_vals.len().max(1) as f64,
        oa: reports.iter().map(|r| r.oa).sum::<f64>() / n.max(1) as f64,
        text_acc: reports.iter().map(|r| r.text_acc).sum::<f64>() / n.max(1) as f64,
    }
}

/// Group clip reports and average within each group; the `mean` row pools
/// every clip with equal weight.
pub fn aggregate(reports: &[MetricReport], grouping: Grouping) -> AggregateTable {
    let mut groups: BTreeMap<String, Vec<&MetricReport>> = BTreeMap::new();
    match grouping {
        Grouping::Scenario => {
            for r in reports {
                groups.entry(r.scenario.as_str().to_string()).or_default().push(r);
            }
        }
        Grouping::InstrumentType => {
            for r in reports {
                for ty in &r.instrument_types {
                    groups.entry(ty.as_str().to_string()).or_default().push(r);
                }
            }
        }
    }
    let rows = groups.iter().map(|(g, rs)| mean_row(g, rs)).collect();
    let all: Vec<&MetricReport> = reports.iter().collect();
    AggregateTable {
        rows,
        mean: mean_row("Mean Results", &all),
    }
}

/// One CSV row per clip.
pub fn render_csv(reports: &[MetricReport]) -> String {
    let mut out = String::from("clip_id,scenario,n_points,skipped,aj,delta_avg,oa,epe,text_acc");
    for k in THRESHOLDS {
        let _ = write!(out, ",delta_{k}");
    }
    out.push('\n');
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in reports {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{:.6},{},{:.6}",
            r.clip_id,
            r.scenario.as_str(),
            r.n_points,
            r.skipped(),
            fmt(r.aj),
            fmt(r.delta_avg),
            r.oa,
            fmt(r.epe),
            r.text_acc
        );
        for k in THRESHOLDS {
            let v = r.delta_at.iter().find(|(kk, _)| *kk == k).map(|&(_, v)| v);
            let _ = write!(out, ",{}", fmt(v));
        }
        out.push('\n');
    }
    out
}

/// Benchmark-shaped markdown table (AJ, delta_avg, OA, EPE per group).
pub fn render_markdown(table: &AggregateTable, title: &str) -> String {
    let mut out = format!("## {title}\n\n");
    out.push_str("| Group | Clips | Skipped | AJ | <δ_avg | OA | EPE | Status Acc |\n");
    out.push_str("|---|---|---|---|---|---|---|---|\n");
    for row in table.rows.iter().chain(std::iter::once(&table.mean)) {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {:.4} | {:.4} | {:.4} | {:.3} | {:.4} |",
            row.group, row.n_clips, row.skipped, row.aj, row.delta_avg, row.oa, row.epe, row.text_acc
        );
    }
    out
}
