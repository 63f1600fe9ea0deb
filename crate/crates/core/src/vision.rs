//! Stand-in visual branch: patch-embedding feature pyramid, query-point
//! features, and coarse correlation matching.
//!
//! This intentionally replaces a frozen pretrained tracker backbone with
//! the smallest trainable stack that still yields the four visual-branch
//! outputs the rest of the model consumes: query features, per-frame
//! feature grids, coarse matched positions/features, and initial
//! coordinates.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::numerics::{Binding, Graph, NumericsError, ParamSet, TensorRef};

/// Model hyperparameters shared by the visual branch and the text-guided
/// tracking head.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    /// Feature channels C at every pyramid level.
    pub channels: usize,
    /// Learned text-embedding width.
    pub text_dim: usize,
    /// Deformable-attention heads.
    pub heads: usize,
    /// Sampling points per level per head.
    pub k_samples: usize,
    /// Soft-argmax temperature.
    pub tau: f64,
    /// Patch edge in pixels; level 0 is a patch/8 embedding grid.
    pub patch: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 32,
            text_dim: 64,
            heads: 2,
            k_samples: 4,
            tau: 0.05,
            patch: 8,
        }
    }
}

#[derive(Debug, Error)]
pub enum VisionError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("bad frame shape {0}x{1}: extents must be positive multiples of 32")]
    BadFrameShape(usize, usize),
    #[error("query ({0}, {1}) outside frame bounds {2}x{3}")]
    OutOfBounds(f64, f64, usize, usize),
}

/// One pyramid level: a `[h*w, C]` feature grid in the graph.
#[derive(Debug, Clone, Copy)]
pub struct PyramidLevel {
    pub grid: TensorRef,
    pub h: usize,
    pub w: usize,
}

/// Three feature grids at /8, /16, /32 of the input frame, constant C.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<PyramidLevel>,
    /// Model-frame pixel extents the pyramid was built from.
    pub px_w: usize,
    pub px_h: usize,
    /// Patch edge used for pixel-to-grid coordinate mapping.
    pub patch: usize,
}

impl FeaturePyramid {
    /// Map a model-frame pixel coordinate to level-`l` grid coordinates.
    /// Grid node (i, j) sits at the center of its patch, so a pixel at a
    /// patch center lands exactly on a node.
    pub fn to_grid(&self, level: usize, x: f64, y: f64) -> (f64, f64) {
        let scale = (self.patch << level) as f64;
        let off = scale / 2.0 - 0.5;
        ((x - off) / scale, (y - off) / scale)
    }

    /// Model-frame pixel center of a level-0 cell.
    pub fn cell_center(&self, idx: usize) -> (f64, f64) {
        let w = self.levels[0].w;
        let p = self.patch as f64;
        let cx = (idx % w) as f64 * p + p / 2.0 - 0.5;
        let cy = (idx / w) as f64 * p + p / 2.0 - 0.5;
        (cx, cy)
    }
}

/// Coarse patch-level match of each query against the level-0 grid.
#[derive(Debug, Clone)]
pub struct CoarseMatch {
    /// Hard argmax cell centers in model-frame pixels.
    pub xy: Vec<(f64, f64)>,
    /// Flat level-0 cell index per query (ties break to the smallest
    /// row-major index).
    pub cell_index: Vec<usize>,
    /// Max cosine correlation per query.
    pub score: Vec<f64>,
    /// Differentiable soft-argmax coordinates `[n, 2]`, model-frame px.
    pub soft_xy: TensorRef,
    /// Features at the matched cells `[n, C]`.
    pub feat: TensorRef,
    /// Raw cosine score map `[n, h0*w0]` against the level-0 grid.
    pub scores: TensorRef,
    /// L2-normalized query features `[n, C]`, the correlation reference
    /// for multi-scale fusion.
    pub query_norm: TensorRef,
}

pub(crate) fn uniform_init(rng: &mut ChaCha8Rng, fan_in: usize, len: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..len).map(|_| rng.random_range(-bound..bound)).collect()
}

pub(crate) fn register_linear(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    name: &str,
    din: usize,
    dout: usize,
) {
    params.insert(&format!("{name}.w"), vec![din, dout], uniform_init(rng, din, din * dout));
    params.insert(&format!("{name}.b"), vec![dout], vec![0.0; dout]);
}

/// Register the visual-branch parameters under the `vision.` prefix.
pub fn register_vision_params(params: &mut ParamSet, cfg: &ModelConfig, rng: &mut ChaCha8Rng) {
    let c = cfg.channels;
    register_linear(params, rng, "vision.patch", cfg.patch * cfg.patch + 1, c);
    register_linear(params, rng, "vision.mix", c, c);
    register_linear(params, rng, "vision.lvl1", c, c);
    register_linear(params, rng, "vision.lvl2", c, c);
}

/// Visual-branch parameters bound into one graph.
pub struct BoundVision {
    pub patch_w: TensorRef,
    pub patch_b: TensorRef,
    pub mix_w: TensorRef,
    pub mix_b: TensorRef,
    pub lvl1_w: TensorRef,
    pub lvl1_b: TensorRef,
    pub lvl2_w: TensorRef,
    pub lvl2_b: TensorRef,
}

pub fn bind_vision(g: &mut Graph, params: &ParamSet, binding: &mut Binding) -> BoundVision {
    BoundVision {
        patch_w: binding.bind(g, params, "vision.patch.w"),
        patch_b: binding.bind(g, params, "vision.patch.b"),
        mix_w: binding.bind(g, params, "vision.mix.w"),
        mix_b: binding.bind(g, params, "vision.mix.b"),
        lvl1_w: binding.bind(g, params, "vision.lvl1.w"),
        lvl1_b: binding.bind(g, params, "vision.lvl1.b"),
        lvl2_w: binding.bind(g, params, "vision.lvl2.w"),
        lvl2_b: binding.bind(g, params, "vision.lvl2.b"),
    }
}

/// Cut a frame into non-overlapping `patch x patch` rows, one row per cell.
///
/// Each row is the DC-centered patch with the patch mean appended as one
/// extra coordinate. This is still a linear map of the raw pixels, but
/// re-parameterized: centered first, the shared brightness component would
/// otherwise dominate every embedding and collapse cosine correlation to
/// ties, while dropping it entirely would blind the status heads to
/// brightness shifts such as smoke and saturation.
fn patch_matrix(frame: &[f64], h: usize, w: usize, patch: usize) -> (Vec<f64>, usize, usize) {
    let gh = h / patch;
    let gw = w / patch;
    let px = patch * patch;
    let mut out = Vec::with_capacity(gh * gw * (px + 1));
    for cy in 0..gh {
        for cx in 0..gw {
            let start = out.len();
            for py in 0..patch {
                let row = (cy * patch + py) * w + cx * patch;
                out.extend_from_slice(&frame[row..row + patch]);
            }
            let mean = out[start..].iter().sum::<f64>() / px as f64;
            out[start..].iter_mut().for_each(|v| *v -= mean);
            // Offset about mid-gray: brightness deviations stay visible
            // without injecting a shared component into every row.
            out.push(mean - 0.5);
        }
    }
    (out, gh, gw)
}

/// Build the three-level feature pyramid for one frame.
///
/// Level 0 is a linear patch embedding followed by layer-norm and one
/// relu-mixed linear; levels 1 and 2 are 2x2 average pools followed by a
/// per-level linear.
pub fn extract_pyramid(
    g: &mut Graph,
    b: &BoundVision,
    cfg: &ModelConfig,
    frame: &[f64],
    height: usize,
    width: usize,
) -> Result<FeaturePyramid, VisionError> {
    if height == 0 || width == 0 || height % 32 != 0 || width % 32 != 0 || frame.len() != height * width {
        return Err(VisionError::BadFrameShape(height, width));
    }
    let (patches, gh, gw) = patch_matrix(frame, height, width, cfg.patch);
    let patches = g.constant(&[gh * gw, cfg.patch * cfg.patch + 1], patches);
    let emb = g.linear(patches, b.patch_w, b.patch_b)?;
    let emb = g.layer_norm(emb, 1)?;
    let mixed = g.linear(emb, b.mix_w, b.mix_b)?;
    let level0 = g.relu(mixed)?;

    let pooled1 = g.avg_pool2x2(level0, gh, gw)?;
    let level1 = g.linear(pooled1, b.lvl1_w, b.lvl1_b)?;
    let (h1, w1) = (gh / 2, gw / 2);

    let pooled2 = g.avg_pool2x2(level1, h1, w1)?;
    let level2 = g.linear(pooled2, b.lvl2_w, b.lvl2_b)?;
    let (h2, w2) = (h1 / 2, w1 / 2);

    Ok(FeaturePyramid {
        levels: vec![
            PyramidLevel { grid: level0, h: gh, w: gw },
            PyramidLevel { grid: level1, h: h1, w: w1 },
            PyramidLevel { grid: level2, h: h2, w: w2 },
        ],
        px_w: width,
        px_h: height,
        patch: cfg.patch,
    })
}

/// Sample level-0 features at the query points (frame-0 pyramid).
pub fn query_features(
    g: &mut Graph,
    pyr: &FeaturePyramid,
    queries: &[(f64, f64)],
) -> Result<TensorRef, VisionError> {
    let mut grid_xy = Vec::with_capacity(queries.len() * 2);
    for &(x, y) in queries {
        if !(0.0..pyr.px_w as f64).contains(&x) || !(0.0..pyr.px_h as f64).contains(&y) {
            return Err(VisionError::OutOfBounds(x, y, pyr.px_w, pyr.px_h));
        }
        let (gx, gy) = pyr.to_grid(0, x, y);
        grid_xy.push(gx);
        grid_xy.push(gy);
    }
    let xy = g.constant(&[queries.len(), 2], grid_xy);
    let lvl = &pyr.levels[0];
    Ok(g.bilinear_sample(lvl.grid, lvl.h, lvl.w, xy)?)
}

/// Correlate each query feature against every level-0 cell.
///
/// The reported position is the argmax cell center; the differentiable
/// path is a temperature-`tau` soft argmax over the same scores.
pub fn coarse_match(
    g: &mut Graph,
    fq: TensorRef,
    pyr: &FeaturePyramid,
    cfg: &ModelConfig,
) -> Result<CoarseMatch, VisionError> {
    let lvl = &pyr.levels[0];
    let n = g.shape(fq)[0];
    let hw = lvl.h * lvl.w;

    let qn = g.l2_normalize_rows(fq)?;
    let gn = g.l2_normalize_rows(lvl.grid)?;
    let gnt = g.transpose(gn)?;
    let scores = g.matmul(qn, gnt)?;

    let mut xy = Vec::with_capacity(n);
    let mut cell_index = Vec::with_capacity(n);
    let mut score = Vec::with_capacity(n);
    {
        let sv = g.values(scores);
        for i in 0..n {
            let row = &sv[i * hw..(i + 1) * hw];
            let mut best = row[0];
            let mut best_j = 0;
            for (j, &s) in row.iter().enumerate().skip(1) {
                if s > best {
                    best = s;
                    best_j = j;
                }
            }
            cell_index.push(best_j);
            score.push(best);
            xy.push(pyr.cell_center(best_j));
        }
    }

    let sharpened = g.scalar_mul(scores, 1.0 / cfg.tau)?;
    let probs = g.softmax(sharpened, 1)?;
    let centers: Vec<f64> = (0..hw)
        .flat_map(|j| {
            let (cx, cy) = pyr.cell_center(j);
            [cx, cy]
        })
        .collect();
    let centers = g.constant(&[hw, 2], centers);
    let soft_xy = g.matmul(probs, centers)?;
    let feat = g.gather_rows(lvl.grid, &cell_index)?;

    Ok(CoarseMatch {
        xy,
        cell_index,
        score,
        soft_xy,
        feat,
        scores,
        query_norm: qn,
    })
}
