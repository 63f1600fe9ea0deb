//! Multi-scale correlation fusion and deformable attention.

use crate::numerics::{Graph, TensorRef};
use crate::vision::{CoarseMatch, FeaturePyramid, ModelConfig};

use super::{BoundModel, DeformBound, TrackError};

/// Per-level Key/Value source for deformable attention: the raw feature
/// grid plus one cosine-correlation map per query.
///
/// The fused cell representation is `linear(concat(cell_feat, corr))`; the
/// fusion linear commutes with bilinear interpolation (weights sum to 1),
/// so sampling applies it to interpolated `(feat, corr)` pairs instead of
/// materializing a fused grid per query.
#[derive(Debug, Clone)]
pub struct FusedLevel {
    pub grid: TensorRef,
    /// One `[h*w, 1]` correlation map per query.
    pub corr: Vec<TensorRef>,
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone)]
pub struct FusedFeatures {
    pub levels: Vec<FusedLevel>,
    /// Patch edge of the source pyramid (level-0 pixel scale).
    pub patch: usize,
}

impl FusedFeatures {
    /// Restrict the per-query correlation maps to a subset of queries.
    pub fn subset(&self, indices: &[usize]) -> FusedFeatures {
        FusedFeatures {
            levels: self
                .levels
                .iter()
                .map(|l| FusedLevel {
                    grid: l.grid,
                    corr: indices.iter().map(|&i| l.corr[i]).collect(),
                    h: l.h,
                    w: l.w,
                })
                .collect(),
            patch: self.patch,
        }
    }

    pub fn n_queries(&self) -> usize {
        self.levels[0].corr.len()
    }
}

/// Correlate every pyramid cell against each query's matching feature and
/// register the per-level grids as deformable-attention sources.
///
/// Level 0 reuses the coarse matcher's own score rows, so the correlation
/// channel at the matched cell equals the match score exactly.
pub fn fuse_multiscale(
    g: &mut Graph,
    match_: &CoarseMatch,
    pyr: &FeaturePyramid,
) -> Result<FusedFeatures, TrackError> {
    let n = g.shape(match_.soft_xy)[0];
    let mut levels = Vec::with_capacity(pyr.levels.len());
    for (li, lvl) in pyr.levels.iter().enumerate() {
        let mut corr = Vec::with_capacity(n);
        if li == 0 {
            for qi in 0..n {
                let row = g.gather_rows(match_.scores, &[qi])?;
                corr.push(g.transpose(row)?);
            }
        } else {
            let gn = g.l2_normalize_rows(lvl.grid)?;
            for qi in 0..n {
                let q = g.gather_rows(match_.query_norm, &[qi])?;
                let qt = g.transpose(q)?;
                corr.push(g.matmul(gn, qt)?);
            }
        }
        levels.push(FusedLevel {
            grid: lvl.grid,
            corr,
            h: lvl.h,
            w: lvl.w,
        });
    }
    Ok(FusedFeatures {
        levels,
        patch: pyr.patch,
    })
}

/// Fused cell values for one query at one level, materialized the literal
/// way: concat the grid with the query's correlation column, then the
/// fusion linear. Kept as the reference route for tests against the
/// sampling path.
pub fn materialize_fused_grid(
    g: &mut Graph,
    bound: &BoundModel,
    fused: &FusedFeatures,
    level: usize,
    query: usize,
) -> Result<TensorRef, TrackError> {
    let l = &fused.levels[level];
    let cat = g.concat(1, &[l.grid, l.corr[query]])?;
    let (w, b) = bound.fuse[level];
    Ok(g.linear(cat, w, b)?)
}

/// Deformable-attention output plus the normalized sampling weights, one
/// `[n, levels*k]` tensor per head.
pub struct DeformOut {
    pub out: TensorRef,
    pub attn: Vec<TensorRef>,
}

/// Query-conditioned sparse sampling over the fused multi-scale grids.
///
/// Per head and level, a learned linear predicts `k` pixel offsets from
/// each query; sampling weights are soft-maxed jointly across all
/// `levels*k` samples of the head. Samples are bilinear (differentiable in
/// the sample locations), fused per level, weighted per head, and mixed by
/// an output linear.
pub fn deformable_attention(
    g: &mut Graph,
    deform: &DeformBound,
    fuse_params: &[(TensorRef, TensorRef)],
    query: TensorRef,
    fused: &FusedFeatures,
    ref_xy: TensorRef,
    cfg: &ModelConfig,
) -> Result<DeformOut, TrackError> {
    let n = g.shape(query)[0];
    if fused.n_queries() != n || g.shape(ref_xy) != [n, 2] {
        return Err(TrackError::QueryCountMismatch {
            queries: n,
            fused: fused.n_queries(),
        });
    }
    let levels = fused.levels.len();
    let k = cfg.k_samples;
    let heads = cfg.heads;

    // Per-head/level offset predictions [n, k*2] and joint softmax weights.
    let mut offsets = Vec::with_capacity(heads);
    let mut attn = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut per_level = Vec::with_capacity(levels);
        for l in 0..levels {
            let (w, b) = deform.off[h][l];
            per_level.push(g.linear(query, w, b)?);
        }
        offsets.push(per_level);
        let (w, b) = deform.wt[h];
        let logits = g.linear(query, w, b)?;
        attn.push(g.softmax(logits, 1)?);
    }

    let mut rows = Vec::with_capacity(n);
    for qi in 0..n {
        let ref_row = g.gather_rows(ref_xy, &[qi])?;
        let tiled = vec![ref_row; heads * k];
        let ref_tile = g.concat(0, &tiled)?;

        // All heads' samples for one level share one bilinear pass.
        let mut level_vals = Vec::with_capacity(levels);
        for (l, lvl) in fused.levels.iter().enumerate() {
            let mut head_offsets = Vec::with_capacity(heads);
            for off_h in offsets.iter() {
                let row = g.gather_rows(off_h[l], &[qi])?;
                head_offsets.push(g.reshape(row, &[k, 2])?);
            }
            let off_block = g.concat(0, &head_offsets)?;
            let pos_px = g.add(ref_tile, off_block)?;
            let scale = (fused.patch << l) as f64;
            let center_off = scale / 2.0 - 0.5;
            let off_const = g.constant(&[heads * k, 2], vec![center_off; heads * k * 2]);
            let shifted = g.sub(pos_px, off_const)?;
            let pos_grid = g.scalar_mul(shifted, 1.0 / scale)?;
            let feat = g.bilinear_sample(lvl.grid, lvl.h, lvl.w, pos_grid)?;
            let corr = g.bilinear_sample(lvl.corr[qi], lvl.h, lvl.w, pos_grid)?;
            let cat = g.concat(1, &[feat, corr])?;
            let (fw, fb) = fuse_params[l];
            level_vals.push(g.linear(cat, fw, fb)?);
        }

        let mut head_outs = Vec::with_capacity(heads);
        for (h, attn_h) in attn.iter().enumerate() {
            let mut parts = Vec::with_capacity(levels);
            for vals_l in &level_vals {
                let rows_idx: Vec<usize> = (h * k..(h + 1) * k).collect();
                parts.push(g.gather_rows(*vals_l, &rows_idx)?);
            }
            let vals = g.concat(0, &parts)?;
            let w_row = g.gather_rows(*attn_h, &[qi])?;
            head_outs.push(g.matmul(w_row, vals)?);
        }
        rows.push(g.concat(1, &head_outs)?);
    }
    let stacked = g.concat(0, &rows)?;
    let (ow, ob) = deform.out;
    let out = g.linear(stacked, ow, ob)?;
    Ok(DeformOut { out, attn })
}
