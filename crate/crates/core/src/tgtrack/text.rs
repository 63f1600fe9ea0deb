//! Learned closed-vocabulary text embedding and cross-attention fusion.

use crate::anno::{PointStatus, PointType};
use crate::numerics::{Graph, TensorRef};
use crate::vision::ModelConfig;

use super::{BoundModel, TrackError};

/// Row of the embedding table for a point type.
fn type_row(pt: PointType) -> usize {
    match pt {
        PointType::Tissue => 0,
        PointType::Instrument => 1,
    }
}

/// Row of the embedding table for a status (after the 2 type rows).
fn status_row(status: PointStatus) -> usize {
    2 + PointStatus::ALL.iter().position(|&s| s == status).unwrap()
}

/// Look up the two-attribute text embedding: one type row and one status
/// row, each L2-normalized. `[2, text_dim]`.
pub fn encode_text(
    g: &mut Graph,
    bound: &BoundModel,
    point_type: PointType,
    status: PointStatus,
) -> Result<TensorRef, TrackError> {
    if !status.allowed_for(point_type) {
        return Err(TrackError::VocabularyMismatch {
            point_type,
            status,
        });
    }
    let rows = [type_row(point_type), status_row(status)];
    let picked = g.gather_rows(bound.text_table, &rows)?;
    Ok(g.l2_normalize_rows(picked)?)
}

/// The no-text ablation embedding: all zeros, same shape as a lookup.
pub fn encode_text_zero(g: &mut Graph, cfg: &ModelConfig) -> TensorRef {
    g.zeros(&[2, cfg.text_dim])
}

/// Single-head cross-attention of each query over its own two projected
/// text rows, with a residual connection back onto the query features.
pub fn cross_attend_text(
    g: &mut Graph,
    bound: &BoundModel,
    cfg: &ModelConfig,
    fq: TensorRef,
    texts: &[TensorRef],
) -> Result<TensorRef, TrackError> {
    let n = g.shape(fq)[0];
    if texts.len() != n {
        return Err(TrackError::QueryCountMismatch {
            queries: n,
            fused: texts.len(),
        });
    }
    let stacked = g.concat(0, texts)?;
    let (pw, pb) = bound.text_proj;
    let kv = g.linear(stacked, pw, pb)?;
    let scores = g.rowwise_dot(fq, kv)?;
    let scaled = g.scalar_mul(scores, 1.0 / (cfg.channels as f64).sqrt())?;
    let attn = g.softmax(scaled, 1)?;
    let mixed = g.weighted_rowsum(attn, kv)?;
    Ok(g.add(mixed, fq)?)
}
