//! Attribute prediction heads and text-guided coordinate refinement.

use crate::anno::{PointStatus, PointType};
use crate::numerics::{Graph, TensorRef};
use crate::vision::ModelConfig;

use super::attention::{deformable_attention, FusedFeatures};
use super::text::{cross_attend_text, encode_text, encode_text_zero};
use super::{BoundModel, TrackError};

/// Point-type logits `[2, n]` and per-type status logits (`[7, n]` tissue,
/// `[4, n]` instrument) for one group of same-type queries.
pub struct AttributePrediction {
    pub point_type: PointType,
    pub type_logits: TensorRef,
    pub status_logits: TensorRef,
}

/// Run deformable attention with the query features and classify: a 2-way
/// point-type head plus the status head selected by `point_type`.
pub fn predict_attributes(
    g: &mut Graph,
    bound: &BoundModel,
    cfg: &ModelConfig,
    fq: TensorRef,
    fused: &FusedFeatures,
    ref_xy: TensorRef,
    point_type: PointType,
) -> Result<AttributePrediction, TrackError> {
    let h = deformable_attention(g, &bound.attr_deform, &bound.fuse, fq, fused, ref_xy, cfg)?.out;
    let (tw, tb) = bound.type_head;
    let tl = g.linear(h, tw, tb)?;
    let type_logits = g.transpose(tl)?;
    let (sw, sb) = match point_type {
        PointType::Tissue => bound.status_tissue,
        PointType::Instrument => bound.status_instrument,
    };
    let sl = g.linear(h, sw, sb)?;
    let status_logits = g.transpose(sl)?;
    Ok(AttributePrediction {
        point_type,
        type_logits,
        status_logits,
    })
}

/// Output of the text-guided refinement step.
pub struct Refinement {
    /// Final coordinates `[n, 2]`: exactly `coarse + offsets`.
    pub refined_xy: TensorRef,
    /// Predicted offsets `[n, 2]`.
    pub offsets: TensorRef,
    /// Text-enhanced query features `[n, C]`.
    pub ftq: TensorRef,
}

/// Fuse each query with its text attributes via cross-attention, run the
/// refinement deformable attention, and add the predicted offsets onto the
/// coarse coordinates. `texts[i] = None` uses the zero embedding (the
/// no-text ablation path; the residual keeps the query features intact).
pub fn text_guided_refine(
    g: &mut Graph,
    bound: &BoundModel,
    cfg: &ModelConfig,
    fq: TensorRef,
    texts: &[Option<(PointType, PointStatus)>],
    fused: &FusedFeatures,
    coarse_xy: TensorRef,
) -> Result<Refinement, TrackError> {
    let mut embedded = Vec::with_capacity(texts.len());
    for t in texts {
        embedded.push(match t {
            Some((pt, st)) => encode_text(g, bound, *pt, *st)?,
            None => encode_text_zero(g, cfg),
        });
    }
    let ftq = cross_attend_text(g, bound, cfg, fq, &embedded)?;
    let h = deformable_attention(g, &bound.refine_deform, &bound.fuse, ftq, fused, coarse_xy, cfg)?.out;
    let (ow, ob) = bound.refine_offset;
    let offsets = g.linear(h, ow, ob)?;
    let refined_xy = g.add(coarse_xy, offsets)?;
    Ok(Refinement {
        refined_xy,
        offsets,
        ftq,
    })
}
