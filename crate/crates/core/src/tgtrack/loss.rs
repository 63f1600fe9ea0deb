//! Composite training loss: Huber point distance over ground-truth-visible
//! points, second-order trajectory smoothness, and status cross-entropy.

use crate::anno::ClipAnnotation;
use crate::numerics::{Graph, TensorRef};

use super::{TrackError, TrackOutputs};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    /// Huber transition point in model-frame pixels.
    pub huber_delta: f64,
    /// Smoothness term coefficient.
    pub lambda_s: f64,
    /// Status cross-entropy coefficient.
    pub lambda_text: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            huber_delta: 6.0,
            lambda_s: 1.0,
            lambda_text: 1.0,
        }
    }
}

/// The loss tensor and its reported decomposition. `total` is computed as
/// `(point + smooth) + text` over the already-weighted terms, so the
/// breakdown sums to the total bit-for-bit.
pub struct LossBreakdown {
    pub total: TensorRef,
    pub point: f64,
    pub smooth: f64,
    pub text: f64,
    pub total_value: f64,
}

/// Accumulate the composite loss over every annotated frame.
///
/// Coordinates are supervised only where the ground-truth coordinate is
/// non-null; statuses only at annotated frames; the smoothness term is
/// computed once per point over the full predicted trajectory (it needs at
/// least 3 frames and contributes zero on shorter clips).
pub fn total_loss(
    g: &mut Graph,
    outputs: &TrackOutputs,
    gt: &ClipAnnotation,
    weights: &LossWeights,
) -> Result<LossBreakdown, TrackError> {
    let n = outputs.n_queries;
    if gt.tracks.len() != n {
        return Err(TrackError::QueryCountMismatch {
            queries: n,
            fused: gt.tracks.len(),
        });
    }
    for &fi in &gt.frame_indices {
        if fi as usize >= outputs.frames.len() {
            return Err(TrackError::FrameCoverageGap(fi));
        }
    }

    let mut point_sum = g.scalar(0.0);
    let mut text_sum = g.scalar(0.0);

    for (oi, &fi) in gt.frame_indices.iter().enumerate() {
        let frame = &outputs.frames[fi as usize];

        let mut vis_rows = Vec::new();
        let mut vis_coords = Vec::new();
        for (ti, track) in gt.tracks.iter().enumerate() {
            if let Some((x, y)) = track.observations[oi].coord {
                vis_rows.push(ti);
                vis_coords.push(x);
                vis_coords.push(y);
            }
        }
        if !vis_rows.is_empty() {
            let pred = g.gather_rows(frame.refined, &vis_rows)?;
            let target = g.constant(&[vis_rows.len(), 2], vis_coords);
            let residual = g.sub(pred, target)?;
            let h = g.huber(residual, weights.huber_delta)?;
            point_sum = g.add(point_sum, h)?;
        }

        for (point_type, members, logits) in &frame.status_logits {
            let mut targets = Vec::with_capacity(members.len());
            for &ti in members {
                let status = gt.tracks[ti].observations[oi].status;
                let idx = status.head_index(*point_type).ok_or(TrackError::VocabularyMismatch {
                    point_type: *point_type,
                    status,
                })?;
                targets.push(idx);
            }
            let ce = g.cross_entropy(*logits, &targets)?;
            text_sum = g.add(text_sum, ce)?;
        }
    }

    let mut smooth_sum = g.scalar(0.0);
    if outputs.frames.len() >= 3 {
        for qi in 0..n {
            let mut rows = Vec::with_capacity(outputs.frames.len());
            for frame in &outputs.frames {
                rows.push(g.gather_rows(frame.refined, &[qi])?);
            }
            let traj = g.concat(0, &rows)?;
            let s = g.second_diff_l1(traj)?;
            smooth_sum = g.add(smooth_sum, s)?;
        }
    }

    let smooth_term = g.scalar_mul(smooth_sum, weights.lambda_s)?;
    let text_term = g.scalar_mul(text_sum, weights.lambda_text)?;
    let partial = g.add(point_sum, smooth_term)?;
    let total = g.add(partial, text_term)?;

    Ok(LossBreakdown {
        total,
        point: g.item(point_sum),
        smooth: g.item(smooth_term),
        text: g.item(text_term),
        total_value: g.item(total),
    })
}
