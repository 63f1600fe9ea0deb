//! Text-guided point tracking: text embedding branch, attribute prediction
//! heads, text-guided attention, coordinate refinement, loss assembly, and
//! clip-level inference.
//!
//! Training follows the teacher-forcing protocol: ground-truth status text
//! guides refinement while the status head learns to predict it; at
//! inference the model's own predicted statuses replace the annotations.

pub mod attention;
pub mod heads;
pub mod loss;
pub mod pred;
pub mod text;
#[cfg(test)]
mod tests;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::anno::{ClipAnnotation, PointStatus, PointType};
use crate::numerics::{Binding, Graph, NumericsError, ParamSet, TensorRef};
use crate::vision::{
    bind_vision, coarse_match, extract_pyramid, query_features, register_linear,
    register_vision_params, BoundVision, ModelConfig, VisionError,
};

pub use attention::{deformable_attention, fuse_multiscale, materialize_fused_grid, FusedFeatures};
pub use heads::{predict_attributes, text_guided_refine, AttributePrediction, Refinement};
pub use loss::{total_loss, LossBreakdown, LossWeights};
pub use pred::{parse_prediction, serialize_prediction, PredError, PredFrame, PredTrack, TrackPrediction, PRED_EXT};
pub use text::{encode_text, encode_text_zero};

#[derive(Debug, Error)]
pub enum TrackError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Vision(#[from] VisionError),
    #[error("status {status:?} is not in the {point_type:?} vocabulary")]
    VocabularyMismatch {
        point_type: PointType,
        status: PointStatus,
    },
    #[error("clip has no frames")]
    EmptyClip,
    #[error("prediction does not cover annotated frame {0}")]
    FrameCoverageGap(u32),
    #[error("inputs disagree on query count: {queries} vs {fused}")]
    QueryCountMismatch { queries: usize, fused: usize },
}

/// Number of pyramid levels the tracker operates over.
pub const N_LEVELS: usize = 3;

/// A query point to track from frame 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryPoint {
    pub x: f64,
    pub y: f64,
    pub point_type: PointType,
}

/// Where the text branch gets its status labels.
///
/// `Predicted` deliberately carries no annotation, so inference-time text
/// cannot read ground truth by construction.
#[derive(Debug, Clone, Copy)]
pub enum TextMode<'a> {
    /// Teacher forcing: the latest annotated status at or before each frame.
    GroundTruth(&'a ClipAnnotation),
    /// The model's own argmax status prediction, per frame.
    Predicted,
    /// Zero text embedding (ablation).
    None,
}

/// The full parameter set plus hyperparameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
}

impl Model {
    /// Fresh model with seeded uniform(+-1/sqrt(fan_in)) weights and zero
    /// biases.
    pub fn new(cfg: ModelConfig, seed: u64) -> Model {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        register_vision_params(&mut params, &cfg, &mut rng);
        register_text_params(&mut params, &cfg, &mut rng);
        register_fuse_params(&mut params, &cfg, &mut rng);
        register_deform_params(&mut params, &cfg, &mut rng, "attr");
        register_deform_params(&mut params, &cfg, &mut rng, "refine");
        register_linear(&mut params, &mut rng, "attr.type", cfg.channels, 2);
        register_linear(&mut params, &mut rng, "attr.status_tissue", cfg.channels, 7);
        register_linear(&mut params, &mut rng, "attr.status_instrument", cfg.channels, 4);
        register_linear(&mut params, &mut rng, "refine.offset", cfg.channels, 2);
        Model { cfg, params }
    }

    pub fn from_params(cfg: ModelConfig, params: ParamSet) -> Model {
        Model { cfg, params }
    }

    pub fn bind<'g>(&self, g: &mut Graph, binding: &mut Binding) -> BoundModel {
        bind_model(g, &self.params, &self.cfg, binding)
    }
}

fn register_text_params(params: &mut ParamSet, cfg: &ModelConfig, rng: &mut ChaCha8Rng) {
    let rows = 2 + PointStatus::ALL.len();
    let table = crate::vision::uniform_init(rng, cfg.text_dim, rows * cfg.text_dim);
    params.insert("text.table", vec![rows, cfg.text_dim], table);
    register_linear(params, rng, "text.proj", cfg.text_dim, cfg.channels);
}

fn register_fuse_params(params: &mut ParamSet, cfg: &ModelConfig, rng: &mut ChaCha8Rng) {
    for l in 0..N_LEVELS {
        register_linear(params, rng, &format!("fuse.l{l}"), cfg.channels + 1, cfg.channels);
    }
}

fn register_deform_params(params: &mut ParamSet, cfg: &ModelConfig, rng: &mut ChaCha8Rng, prefix: &str) {
    for h in 0..cfg.heads {
        for l in 0..N_LEVELS {
            register_linear(
                params,
                rng,
                &format!("{prefix}.deform.h{h}.l{l}.off"),
                cfg.channels,
                cfg.k_samples * 2,
            );
        }
        register_linear(
            params,
            rng,
            &format!("{prefix}.deform.h{h}.wt"),
            cfg.channels,
            N_LEVELS * cfg.k_samples,
        );
    }
    register_linear(
        params,
        rng,
        &format!("{prefix}.deform.out"),
        cfg.heads * cfg.channels,
        cfg.channels,
    );
}

/// One deformable-attention instance bound into a graph.
pub struct DeformBound {
    /// `[heads][levels]` offset linears.
    pub off: Vec<Vec<(TensorRef, TensorRef)>>,
    /// `[heads]` joint sampling-weight linears.
    pub wt: Vec<(TensorRef, TensorRef)>,
    pub out: (TensorRef, TensorRef),
}

/// Every model parameter bound into one graph.
pub struct BoundModel {
    pub vision: BoundVision,
    pub text_table: TensorRef,
    pub text_proj: (TensorRef, TensorRef),
    pub fuse: Vec<(TensorRef, TensorRef)>,
    pub attr_deform: DeformBound,
    pub refine_deform: DeformBound,
    pub type_head: (TensorRef, TensorRef),
    pub status_tissue: (TensorRef, TensorRef),
    pub status_instrument: (TensorRef, TensorRef),
    pub refine_offset: (TensorRef, TensorRef),
}

fn bind_pair(g: &mut Graph, params: &ParamSet, binding: &mut Binding, name: &str) -> (TensorRef, TensorRef) {
    (
        binding.bind(g, params, &format!("{name}.w")),
        binding.bind(g, params, &format!("{name}.b")),
    )
}

fn bind_deform(g: &mut Graph, params: &ParamSet, cfg: &ModelConfig, binding: &mut Binding, prefix: &str) -> DeformBound {
    let mut off = Vec::with_capacity(cfg.heads);
    let mut wt = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let mut per_level = Vec::with_capacity(N_LEVELS);
        for l in 0..N_LEVELS {
            per_level.push(bind_pair(g, params, binding, &format!("{prefix}.deform.h{h}.l{l}.off")));
        }
        off.push(per_level);
        wt.push(bind_pair(g, params, binding, &format!("{prefix}.deform.h{h}.wt")));
    }
    let out = bind_pair(g, params, binding, &format!("{prefix}.deform.out"));
    DeformBound { off, wt, out }
}

pub fn bind_model(g: &mut Graph, params: &ParamSet, cfg: &ModelConfig, binding: &mut Binding) -> BoundModel {
    BoundModel {
        vision: bind_vision(g, params, binding),
        text_table: binding.bind(g, params, "text.table"),
        text_proj: bind_pair(g, params, binding, "text.proj"),
        fuse: (0..N_LEVELS)
            .map(|l| bind_pair(g, params, binding, &format!("fuse.l{l}")))
            .collect(),
        attr_deform: bind_deform(g, params, cfg, binding, "attr"),
        refine_deform: bind_deform(g, params, cfg, binding, "refine"),
        type_head: bind_pair(g, params, binding, "attr.type"),
        status_tissue: bind_pair(g, params, binding, "attr.status_tissue"),
        status_instrument: bind_pair(g, params, binding, "attr.status_instrument"),
        refine_offset: bind_pair(g, params, binding, "refine.offset"),
    }
}

/// Per-frame graph handles and diagnostics from one tracked clip.
pub struct FrameOutput {
    /// Final coordinates `[n, 2]` (Eq. `refined = coarse + offset`).
    pub refined: TensorRef,
    /// Soft-argmax coarse coordinates `[n, 2]`.
    pub coarse: TensorRef,
    /// Refinement offsets `[n, 2]`.
    pub offsets: TensorRef,
    /// Hard-argmax coarse positions (diagnostic).
    pub coarse_hard: Vec<(f64, f64)>,
    /// Max correlation per query (diagnostic).
    pub score: Vec<f64>,
    /// Type logits `[2, n]` over all queries (query order).
    pub type_logits: TensorRef,
    /// Status logits per type group: (type, member query indices, `[c, n_g]`).
    pub status_logits: Vec<(PointType, Vec<usize>, TensorRef)>,
    /// Argmax status per query.
    pub pred_status: Vec<PointStatus>,
    /// Softmax over each query's own status vocabulary.
    pub status_probs: Vec<Vec<f64>>,
    /// Status that guided the text branch (None in the no-text mode).
    pub chosen_status: Vec<Option<PointStatus>>,
}

/// Graph-side result of tracking one clip.
pub struct TrackOutputs {
    pub n_queries: usize,
    pub frames: Vec<FrameOutput>,
}

/// Track `queries` through `frames`.
///
/// Per frame: extract the pyramid, coarse-match against the frame-0 query
/// features, predict attributes, choose the text per `mode`, refine, and
/// derive visibility from the chosen status.
pub fn track_clip(
    g: &mut Graph,
    bound: &BoundModel,
    cfg: &ModelConfig,
    frames: &[Vec<f64>],
    height: usize,
    width: usize,
    queries: &[QueryPoint],
    mode: TextMode,
) -> Result<TrackOutputs, TrackError> {
    if frames.is_empty() {
        return Err(TrackError::EmptyClip);
    }
    let n = queries.len();
    let query_xy: Vec<(f64, f64)> = queries.iter().map(|q| (q.x, q.y)).collect();

    let pyr0 = extract_pyramid(g, &bound.vision, cfg, &frames[0], height, width)?;
    let fq = query_features(g, &pyr0, &query_xy)?;

    // Queries grouped by point type; the status head width differs.
    let mut groups: Vec<(PointType, Vec<usize>)> = Vec::new();
    for pt in [PointType::Tissue, PointType::Instrument] {
        let members: Vec<usize> = (0..n).filter(|&i| queries[i].point_type == pt).collect();
        if !members.is_empty() {
            groups.push((pt, members));
        }
    }

    let mut out_frames = Vec::with_capacity(frames.len());
    for (t, frame) in frames.iter().enumerate() {
        let pyr = if t == 0 {
            pyr0.clone()
        } else {
            extract_pyramid(g, &bound.vision, cfg, frame, height, width)?
        };
        let m = coarse_match(g, fq, &pyr, cfg)?;
        let fused = fuse_multiscale(g, &m, &pyr)?;

        let mut type_cols: Vec<TensorRef> = Vec::new();
        let mut status_logits = Vec::new();
        let mut pred_status = vec![PointStatus::ClearView; n];
        let mut status_probs = vec![Vec::new(); n];
        for (pt, members) in &groups {
            let fq_g = g.gather_rows(fq, members)?;
            let ref_g = g.gather_rows(m.soft_xy, members)?;
            let fused_g = fused.subset(members);
            let attr = predict_attributes(g, bound, cfg, fq_g, &fused_g, ref_g, *pt)?;
            let logits = g.values(attr.status_logits);
            let classes = g.shape(attr.status_logits)[0];
            let ng = members.len();
            for (j, &qi) in members.iter().enumerate() {
                let col: Vec<f64> = (0..classes).map(|c| logits[c * ng + j]).collect();
                let probs = softmax_1d(&col);
                let argmax = argmax_strict(&col);
                pred_status[qi] = PointStatus::from_head_index(*pt, argmax)
                    .expect("argmax index within head width");
                status_probs[qi] = probs;
            }
            status_logits.push((*pt, members.clone(), attr.status_logits));
            type_cols.push(attr.type_logits);
        }
        let type_logits = if type_cols.len() == 1 {
            type_cols[0]
        } else {
            g.concat(1, &type_cols)?
        };

        let mut chosen_status: Vec<Option<PointStatus>> = vec![None; n];
        let texts: Vec<Option<(PointType, PointStatus)>> = match mode {
            TextMode::GroundTruth(ann) => (0..n)
                .map(|qi| {
                    let status = held_status(ann, qi, t as u32);
                    chosen_status[qi] = Some(status);
                    Some((queries[qi].point_type, status))
                })
                .collect(),
            TextMode::Predicted => (0..n)
                .map(|qi| {
                    chosen_status[qi] = Some(pred_status[qi]);
                    Some((queries[qi].point_type, pred_status[qi]))
                })
                .collect(),
            TextMode::None => vec![None; n],
        };

        let refinement = text_guided_refine(g, bound, cfg, fq, &texts, &fused, m.soft_xy)?;

        out_frames.push(FrameOutput {
            refined: refinement.refined_xy,
            coarse: m.soft_xy,
            offsets: refinement.offsets,
            coarse_hard: m.xy,
            score: m.score,
            type_logits,
            status_logits,
            pred_status,
            status_probs,
            chosen_status,
        });
    }

    Ok(TrackOutputs {
        n_queries: n,
        frames: out_frames,
    })
}

/// Latest annotated status at or before frame `t` (teacher forcing holds
/// the 1 fps label until the next annotation).
fn held_status(ann: &ClipAnnotation, track: usize, t: u32) -> PointStatus {
    let mut status = ann.tracks[track].observations[0].status;
    for (oi, &fi) in ann.frame_indices.iter().enumerate() {
        if fi <= t {
            status = ann.tracks[track].observations[oi].status;
        } else {
            break;
        }
    }
    status
}

fn softmax_1d(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn argmax_strict(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Materialize plain prediction records from the graph outputs.
pub fn outputs_to_prediction(
    g: &Graph,
    outputs: &TrackOutputs,
    clip_id: &str,
    queries: &[QueryPoint],
) -> TrackPrediction {
    let n = outputs.n_queries;
    let mut tracks: Vec<PredTrack> = queries
        .iter()
        .map(|q| PredTrack {
            query: (q.x, q.y),
            frames: Vec::with_capacity(outputs.frames.len()),
        })
        .collect();
    for (t, frame) in outputs.frames.iter().enumerate() {
        let refined = g.values(frame.refined);
        let coarse = g.values(frame.coarse);
        let offsets = g.values(frame.offsets);
        for qi in 0..n {
            let guiding = frame.chosen_status[qi].unwrap_or(frame.pred_status[qi]);
            tracks[qi].frames.push(PredFrame {
                frame: t as u32,
                coord: (refined[qi * 2], refined[qi * 2 + 1]),
                status: frame.pred_status[qi],
                status_probs: frame.status_probs[qi].clone(),
                visible: crate::anno::visibility_of(guiding, None),
                coarse: (coarse[qi * 2], coarse[qi * 2 + 1]),
                offset: (offsets[qi * 2], offsets[qi * 2 + 1]),
            });
        }
    }
    TrackPrediction {
        clip_id: clip_id.to_string(),
        tracks,
    }
}

/// Query points from a clip's frame-0 annotations.
pub fn queries_from_annotation(ann: &ClipAnnotation) -> Result<Vec<QueryPoint>, TrackError> {
    ann.tracks
        .iter()
        .map(|tr| {
            let (x, y) = tr.observations[0].coord.ok_or(TrackError::EmptyClip)?;
            Ok(QueryPoint {
                x,
                y,
                point_type: tr.point_type,
            })
        })
        .collect()
}
