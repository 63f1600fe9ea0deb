use super::*;
use crate::anno::{PointObservation, Scenario, Track};
use crate::numerics::grad_check;
use crate::synth::{gen_clip, ScenarioConfig};
use crate::vision::ModelConfig;

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        channels: 8,
        text_dim: 8,
        ..ModelConfig::default()
    }
}

fn tiny_frames(seed: u64, n_frames: usize) -> Vec<Vec<f64>> {
    let cfg = ScenarioConfig {
        n_frames: n_frames.max(3),
        n_points: 1,
        width: 64,
        height: 64,
        ..ScenarioConfig::new(Scenario::Clean, seed)
    };
    let mut frames = gen_clip(&cfg).unwrap().frames;
    frames.truncate(n_frames);
    frames
}

fn forward_fixture(
    model: &Model,
    seed: u64,
) -> (Graph, BoundModel, TensorRef, FusedFeatures, crate::vision::CoarseMatch) {
    let mut g = Graph::new();
    let mut binding = Binding::new();
    let bound = model.bind(&mut g, &mut binding);
    let frames = tiny_frames(seed, 1);
    let pyr = crate::vision::extract_pyramid(&mut g, &bound.vision, &model.cfg, &frames[0], 64, 64).unwrap();
    let fq = crate::vision::query_features(&mut g, &pyr, &[(19.5, 27.5), (36.0, 34.5)]).unwrap();
    let m = crate::vision::coarse_match(&mut g, fq, &pyr, &model.cfg).unwrap();
    let fused = fuse_multiscale(&mut g, &m, &pyr).unwrap();
    (g, bound, fq, fused, m)
}

#[test]
fn encode_text_is_deterministic_normalized_and_shaped() {
    let model = Model::new(tiny_cfg(), 5);
    let mut g = Graph::new();
    let mut binding = Binding::new();
    let bound = model.bind(&mut g, &mut binding);
    let a = encode_text(&mut g, &bound, PointType::Tissue, PointStatus::ClearView).unwrap();
    let b = encode_text(&mut g, &bound, PointType::Tissue, PointStatus::ClearView).unwrap();
    assert_eq!(g.shape(a), &[2, model.cfg.text_dim]);
    assert_eq!(g.values(a), g.values(b));
    for row in g.values(a).chunks(model.cfg.text_dim) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-9, "row norm {norm}");
    }
}

#[test]
fn encode_text_rejects_vocabulary_mismatch() {
    let model = Model::new(tiny_cfg(), 5);
    let mut g = Graph::new();
    let mut binding = Binding::new();
    let bound = model.bind(&mut g, &mut binding);
    assert!(matches!(
        encode_text(&mut g, &bound, PointType::Tissue, PointStatus::SelfOcclusion),
        Err(TrackError::VocabularyMismatch { .. })
    ));
    assert!(matches!(
        encode_text(&mut g, &bound, PointType::Instrument, PointStatus::Pulled),
        Err(TrackError::VocabularyMismatch { .. })
    ));
}

#[test]
fn fusion_correlation_at_matched_cell_equals_score() {
    let model = Model::new(tiny_cfg(), 6);
    let (g, _bound, _fq, fused, m) = forward_fixture(&model, 50);
    for (qi, &cell) in m.cell_index.iter().enumerate() {
        let corr = g.values(fused.levels[0].corr[qi]);
        assert_eq!(corr[cell], m.score[qi], "query {qi}");
    }
    assert_eq!(fused.levels.len(), 3);
}

#[test]
fn sampled_fusion_matches_materialized_grid() {
    // Sampling at a grid node must agree with the literal
    // concat-then-linear fused cell value.
    let model = Model::new(tiny_cfg(), 7);
    let (mut g, bound, _fq, fused, _m) = forward_fixture(&model, 51);
    let level = 1;
    let query = 0;
    let cell = 5;
    let mat = materialize_fused_grid(&mut g, &bound, &fused, level, query).unwrap();
    let expect = g.values(mat)[cell * model.cfg.channels..(cell + 1) * model.cfg.channels].to_vec();

    let l = &fused.levels[level];
    let xy = g.constant(&[1, 2], vec![(cell % l.w) as f64, (cell / l.w) as f64]);
    let feat = g.bilinear_sample(l.grid, l.h, l.w, xy).unwrap();
    let corr = g.bilinear_sample(l.corr[query], l.h, l.w, xy).unwrap();
    let cat = g.concat(1, &[feat, corr]).unwrap();
    let (fw, fb) = bound.fuse[level];
    let sampled = g.linear(cat, fw, fb).unwrap();
    for (a, b) in g.values(sampled).iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn deformable_attention_weights_sum_to_one() {
    let model = Model::new(tiny_cfg(), 8);
    let (mut g, bound, fq, fused, m) = forward_fixture(&model, 52);
    let out = deformable_attention(&mut g, &bound.attr_deform, &bound.fuse, fq, &fused, m.soft_xy, &model.cfg).unwrap();
    assert_eq!(out.attn.len(), model.cfg.heads);
    for attn in &out.attn {
        for row in g.values(*attn).chunks(g.shape(*attn)[1]) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() <= 1e-12, "weight row sums to {s}");
        }
    }
}

#[test]
fn deformable_attention_frozen_weight_oracle() {
    // Zeroed offset and weight linears: every sample lands at the
    // reference point with uniform weights, so the output is the mean of
    // the per-level fused samples pushed through the output linear.
    let mut model = Model::new(tiny_cfg(), 9);
    for h in 0..model.cfg.heads {
        for l in 0..N_LEVELS {
            model.params.get_mut(&format!("attr.deform.h{h}.l{l}.off.w")).values.fill(0.0);
            model.params.get_mut(&format!("attr.deform.h{h}.l{l}.off.b")).values.fill(0.0);
        }
        model.params.get_mut(&format!("attr.deform.h{h}.wt.w")).values.fill(0.0);
        model.params.get_mut(&format!("attr.deform.h{h}.wt.b")).values.fill(0.0);
    }
    let (mut g, bound, fq, fused, m) = forward_fixture(&model, 53);
    let got = deformable_attention(&mut g, &bound.attr_deform, &bound.fuse, fq, &fused, m.soft_xy, &model.cfg).unwrap();

    let c = model.cfg.channels;
    let n = 2;
    let levels = N_LEVELS;
    // Hand-assembled forward.
    let ref_xy = g.values(m.soft_xy).to_vec();
    let out_w = model.params.get("attr.deform.out.w").values.clone();
    let out_b = model.params.get("attr.deform.out.b").values.clone();
    for qi in 0..n {
        let mut mean = vec![0.0; c];
        for (l, lvl) in fused.levels.iter().enumerate() {
            let scale = (fused.patch << l) as f64;
            let off = scale / 2.0 - 0.5;
            let gx = (ref_xy[qi * 2] - off) / scale;
            let gy = (ref_xy[qi * 2 + 1] - off) / scale;
            let feat = hand_bilinear(g.values(lvl.grid), lvl.h, lvl.w, c, gx, gy);
            let corr = hand_bilinear(g.values(lvl.corr[qi]), lvl.h, lvl.w, 1, gx, gy);
            let fw = &model.params.get(&format!("fuse.l{l}.w")).values;
            let fb = &model.params.get(&format!("fuse.l{l}.b")).values;
            for oc in 0..c {
                let mut v = fb[oc];
                for ic in 0..c {
                    v += feat[ic] * fw[ic * c + oc];
                }
                v += corr[0] * fw[c * c + oc];
                mean[oc] += v / levels as f64;
            }
        }
        // Both heads see the same mean; concat then output linear.
        let mut expect = vec![0.0; c];
        for oc in 0..c {
            let mut v = out_b[oc];
            for h in 0..model.cfg.heads {
                for ic in 0..c {
                    v += mean[ic] * out_w[(h * c + ic) * c + oc];
                }
            }
            expect[oc] = v;
        }
        let got_row = &g.values(got.out)[qi * c..(qi + 1) * c];
        for (a, b) in got_row.iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }
}

fn hand_bilinear(grid: &[f64], h: usize, w: usize, c: usize, x: f64, y: f64) -> Vec<f64> {
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let x0 = if w > 1 { (xc.floor() as usize).min(w - 2) } else { 0 };
    let y0 = if h > 1 { (yc.floor() as usize).min(h - 2) } else { 0 };
    let x1 = if w > 1 { x0 + 1 } else { x0 };
    let y1 = if h > 1 { y0 + 1 } else { y0 };
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    (0..c)
        .map(|ch| {
            grid[(y0 * w + x0) * c + ch] * (1.0 - fx) * (1.0 - fy)
                + grid[(y0 * w + x1) * c + ch] * fx * (1.0 - fy)
                + grid[(y1 * w + x0) * c + ch] * (1.0 - fx) * fy
                + grid[(y1 * w + x1) * c + ch] * fx * fy
        })
        .collect()
}

#[test]
fn attribute_head_shapes_follow_the_type() {
    let model = Model::new(tiny_cfg(), 10);
    for n in 1..=6usize {
        for pt in [PointType::Tissue, PointType::Instrument] {
            let mut g = Graph::new();
            let mut binding = Binding::new();
            let bound = model.bind(&mut g, &mut binding);
            let frames = tiny_frames(60, 1);
            let pyr = crate::vision::extract_pyramid(&mut g, &bound.vision, &model.cfg, &frames[0], 64, 64).unwrap();
            let queries: Vec<(f64, f64)> = (0..n).map(|i| (11.5 + 8.0 * i as f64, 27.5)).collect();
            let fq = crate::vision::query_features(&mut g, &pyr, &queries).unwrap();
            let m = crate::vision::coarse_match(&mut g, fq, &pyr, &model.cfg).unwrap();
            let fused = fuse_multiscale(&mut g, &m, &pyr).unwrap();
            let attr = predict_attributes(&mut g, &bound, &model.cfg, fq, &fused, m.soft_xy, pt).unwrap();
            assert_eq!(g.shape(attr.type_logits), &[2, n]);
            let expect_rows = match pt {
                PointType::Tissue => 7,
                PointType::Instrument => 4,
            };
            assert_eq!(g.shape(attr.status_logits), &[expect_rows, n]);
        }
    }
}

#[test]
fn refinement_is_exactly_coarse_plus_offsets() {
    let model = Model::new(tiny_cfg(), 11);
    let (mut g, bound, fq, fused, m) = forward_fixture(&model, 54);
    let texts = vec![Some((PointType::Tissue, PointStatus::ClearView)); 2];
    let r = text_guided_refine(&mut g, &bound, &model.cfg, fq, &texts, &fused, m.soft_xy).unwrap();
    let coarse = g.values(m.soft_xy);
    let offsets = g.values(r.offsets);
    let refined = g.values(r.refined_xy);
    for i in 0..refined.len() {
        assert_eq!(refined[i], coarse[i] + offsets[i], "component {i}");
    }
}

#[test]
fn zero_offsets_reproduce_coarse_coordinates() {
    let mut model = Model::new(tiny_cfg(), 12);
    model.params.get_mut("refine.offset.w").values.fill(0.0);
    model.params.get_mut("refine.offset.b").values.fill(0.0);
    let (mut g, bound, fq, fused, m) = forward_fixture(&model, 55);
    let texts = vec![Some((PointType::Tissue, PointStatus::ClearView)); 2];
    let r = text_guided_refine(&mut g, &bound, &model.cfg, fq, &texts, &fused, m.soft_xy).unwrap();
    assert_eq!(g.values(r.refined_xy), g.values(m.soft_xy));
    assert!(g.values(r.offsets).iter().all(|&v| v == 0.0));
}

#[test]
fn eq1_arithmetic() {
    let mut g = Graph::new();
    let coarse = g.constant(&[1, 2], vec![10.0, 20.0]);
    let offsets = g.constant(&[1, 2], vec![2.0, -3.0]);
    let refined = g.add(coarse, offsets).unwrap();
    assert_eq!(g.values(refined), &[12.0, 17.0]);
}

fn fabricated_outputs(
    g: &mut Graph,
    coords: &[Vec<(f64, f64)>],
    status_logits_rows: usize,
    logits_for: impl Fn(usize, usize) -> Vec<f64>,
) -> TrackOutputs {
    // coords[t][q]; logits_for(t, class_count) returns [classes * n].
    let n = coords[0].len();
    let frames = coords
        .iter()
        .enumerate()
        .map(|(t, frame_coords)| {
            let flat: Vec<f64> = frame_coords.iter().flat_map(|&(x, y)| [x, y]).collect();
            let refined = g.constant(&[n, 2], flat.clone());
            let coarse = g.constant(&[n, 2], flat);
            let offsets = g.zeros(&[n, 2]);
            let logits = g.constant(&[status_logits_rows, n], logits_for(t, status_logits_rows));
            FrameOutput {
                refined,
                coarse,
                offsets,
                coarse_hard: frame_coords.clone(),
                score: vec![1.0; n],
                type_logits: g.zeros(&[2, n]),
                status_logits: vec![(PointType::Tissue, (0..n).collect(), logits)],
                pred_status: vec![PointStatus::ClearView; n],
                status_probs: vec![vec![]; n],
                chosen_status: vec![Some(PointStatus::ClearView); n],
            }
        })
        .collect();
    TrackOutputs {
        n_queries: n,
        frames,
    }
}

fn simple_gt(coords: &[Vec<(f64, f64)>], status: PointStatus) -> ClipAnnotation {
    let n = coords[0].len();
    ClipAnnotation {
        clip_id: "fixture".into(),
        width: 256,
        height: 256,
        annotation_fps: 1.0,
        scenario: Scenario::Clean,
        frame_indices: (0..coords.len() as u32).collect(),
        tracks: (0..n)
            .map(|q| Track {
                point_type: PointType::Tissue,
                instrument: None,
                observations: coords
                    .iter()
                    .map(|frame| PointObservation {
                        coord: Some(frame[q]),
                        status,
                    })
                    .collect(),
            })
            .collect(),
    }
}

#[test]
fn perfect_prediction_has_negligible_loss() {
    let mut g = Graph::new();
    // Linear trajectory, exact coordinates, saturated correct status.
    let coords: Vec<Vec<(f64, f64)>> = (0..4)
        .map(|t| vec![(10.0 + t as f64, 20.0), (30.0, 40.0 + 2.0 * t as f64)])
        .collect();
    let outputs = fabricated_outputs(&mut g, &coords, 7, |_, classes| {
        let mut l = vec![0.0; classes * 2];
        l[0] = 30.0;
        l[1] = 30.0;
        l
    });
    let gt = simple_gt(&coords, PointStatus::ClearView);
    let loss = total_loss(&mut g, &outputs, &gt, &LossWeights::default()).unwrap();
    assert!(loss.total_value < 1e-6, "loss {}", loss.total_value);
}

#[test]
fn half_pixel_error_yields_huber_eighth() {
    let mut g = Graph::new();
    let gt_coords: Vec<Vec<(f64, f64)>> = vec![vec![(10.0, 20.0)]];
    let mut pred_coords = gt_coords.clone();
    pred_coords[0][0].0 += 0.5;
    let outputs = fabricated_outputs(&mut g, &pred_coords, 7, |_, classes| {
        let mut l = vec![0.0; classes];
        l[0] = 30.0;
        l
    });
    let gt = simple_gt(&gt_coords, PointStatus::ClearView);
    let loss = total_loss(&mut g, &outputs, &gt, &LossWeights::default()).unwrap();
    assert!((loss.point - 0.125).abs() < 1e-12, "point term {}", loss.point);
}

#[test]
fn uniform_status_costs_ln_seven() {
    let mut g = Graph::new();
    let coords: Vec<Vec<(f64, f64)>> = vec![vec![(10.0, 20.0)]];
    let outputs = fabricated_outputs(&mut g, &coords, 7, |_, classes| vec![0.0; classes]);
    let gt = simple_gt(&coords, PointStatus::ClearView);
    let loss = total_loss(&mut g, &outputs, &gt, &LossWeights::default()).unwrap();
    assert!((loss.text - (7.0f64).ln()).abs() < 1e-12, "text term {}", loss.text);
}

#[test]
fn loss_decomposition_is_exact() {
    let model = Model::new(tiny_cfg(), 13);
    let clip_cfg = ScenarioConfig {
        n_frames: 6,
        n_points: 3,
        width: 64,
        height: 64,
        intensity: 0.5,
        ..ScenarioConfig::new(Scenario::TissueDeformation, 77)
    };
    let clip = gen_clip(&clip_cfg).unwrap();
    let mut g = Graph::new();
    let mut binding = Binding::new();
    let bound = model.bind(&mut g, &mut binding);
    let queries = queries_from_annotation(&clip.annotation).unwrap();
    let outputs = track_clip(
        &mut g,
        &bound,
        &model.cfg,
        &clip.frames,
        64,
        64,
        &queries,
        TextMode::GroundTruth(&clip.annotation),
    )
    .unwrap();
    let loss = total_loss(&mut g, &outputs, &clip.annotation, &LossWeights::default()).unwrap();
    assert_eq!(loss.total_value, (loss.point + loss.smooth) + loss.text);
    assert!(loss.total_value.is_finite());
}

#[test]
fn frame_coverage_gap_is_detected() {
    let mut g = Graph::new();
    let coords: Vec<Vec<(f64, f64)>> = vec![vec![(10.0, 20.0)]];
    let outputs = fabricated_outputs(&mut g, &coords, 7, |_, c| vec![0.0; c]);
    let mut gt = simple_gt(&coords, PointStatus::ClearView);
    gt.frame_indices = vec![5];
    assert!(matches!(
        total_loss(&mut g, &outputs, &gt, &LossWeights::default()),
        Err(TrackError::FrameCoverageGap(5))
    ));
}

#[test]
fn self_frame_tracks_to_query_with_zeroed_offsets() {
    let mut cfg = tiny_cfg();
    cfg.channels = 16;
    cfg.tau = 1e-3;
    let mut model = Model::new(cfg, 14);
    model.params.get_mut("refine.offset.w").values.fill(0.0);
    model.params.get_mut("refine.offset.b").values.fill(0.0);
    let frames = tiny_frames(56, 1);
    let queries = vec![
        QueryPoint { x: 19.5, y: 27.5, point_type: PointType::Tissue },
        QueryPoint { x: 43.5, y: 35.5, point_type: PointType::Tissue },
    ];
    let mut g = Graph::new();
    let mut binding = Binding::new();
    let bound = model.bind(&mut g, &mut binding);
    let outputs = track_clip(&mut g, &bound, &model.cfg, &frames, 64, 64, &queries, TextMode::Predicted).unwrap();
    let coords = g.values(outputs.frames[0].refined);
    for (qi, q) in queries.iter().enumerate() {
        assert!(
            (coords[qi * 2] - q.x).abs() <= 1e-3 && (coords[qi * 2 + 1] - q.y).abs() <= 1e-3,
            "query {qi}: ({}, {}) vs ({}, {})",
            coords[qi * 2],
            coords[qi * 2 + 1],
            q.x,
            q.y
        );
    }
}

#[test]
fn zeroed_text_makes_ground_truth_and_none_identical() {
    let mut model = Model::new(tiny_cfg(), 15);
    model.params.get_mut("text.table").values.fill(0.0);
    model.params.get_mut("text.proj.w").values.fill(0.0);
    model.params.get_mut("text.proj.b").values.fill(0.0);
    let clip_cfg = ScenarioConfig {
        n_frames: 5,
        n_points: 3,
        width: 64,
        height: 64,
        ..ScenarioConfig::new(Scenario::SurfaceReflection, 31)
    };
    let clip = gen_clip(&clip_cfg).unwrap();
    let queries = queries_from_annotation(&clip.annotation).unwrap();

    let run = |mode_gt: bool| {
        let mut g = Graph::new();
        let mut binding = Binding::new();
        let bound = model.bind(&mut g, &mut binding);
        let mode = if mode_gt {
            TextMode::GroundTruth(&clip.annotation)
        } else {
            TextMode::None
        };
        let outputs = track_clip(&mut g, &bound, &model.cfg, &clip.frames, 64, 64, &queries, mode).unwrap();
        let mut coords = Vec::new();
        for f in &outputs.frames {
            coords.extend_from_slice(g.values(f.refined));
            coords.extend_from_slice(g.values(f.offsets));
        }
        coords
    };
    assert_eq!(run(true), run(false));
}

#[test]
fn ground_truth_and_predicted_agree_when_the_head_is_saturated() {
    // Saturate the tissue status head toward ClearView; on a clip whose
    // ground truth is all ClearView the two modes choose identical text.
    let mut model = Model::new(tiny_cfg(), 16);
    model.params.get_mut("attr.status_tissue.w").values.fill(0.0);
    {
        let b = model.params.get_mut("attr.status_tissue.b");
        b.values.fill(0.0);
        b.values[0] = 30.0;
    }
    let clip_cfg = ScenarioConfig {
        n_frames: 4,
        n_points: 2,
        width: 64,
        height: 64,
        ..ScenarioConfig::new(Scenario::Clean, 32)
    };
    let clip = gen_clip(&clip_cfg).unwrap();
    let queries = queries_from_annotation(&clip.annotation).unwrap();
    let run = |mode_gt: bool| {
        let mut g = Graph::new();
        let mut binding = Binding::new();
        let bound = model.bind(&mut g, &mut binding);
        let mode = if mode_gt {
            TextMode::GroundTruth(&clip.annotation)
        } else {
            TextMode::Predicted
        };
        let outputs = track_clip(&mut g, &bound, &model.cfg, &clip.frames, 64, 64, &queries, mode).unwrap();
        let pred = outputs_to_prediction(&g, &outputs, &clip.annotation.clip_id, &queries);
        serialize_prediction(&pred)
    };
    assert_eq!(run(true), run(false));
}

#[test]
fn deform_offset_parameters_pass_grad_check() {
    let model = Model::new(tiny_cfg(), 17);
    let frames = tiny_frames(57, 1);
    let name = "refine.deform.h0.l0.off.w";
    let p = model.params.get(name);
    let (shape, x0) = (p.shape.clone(), p.values.clone());
    let queries = vec![
        QueryPoint { x: 19.3, y: 27.8, point_type: PointType::Tissue },
        QueryPoint { x: 36.1, y: 34.2, point_type: PointType::Tissue },
    ];
    let err = grad_check(
        |g, x| {
            let mut binding = Binding::new();
            let mut bound = bind_model(g, &model.params, &model.cfg, &mut binding);
            bound.refine_deform.off[0][0].0 = x;
            let outputs = track_clip(g, &bound, &model.cfg, &frames, 64, 64, &queries, TextMode::Predicted)
                .map_err(track_to_numerics)?;
            g.mean(outputs.frames[0].refined)
        },
        &shape,
        &x0,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "relative error {err}");
}

#[test]
fn fusion_parameters_pass_grad_check() {
    let model = Model::new(tiny_cfg(), 18);
    let frames = tiny_frames(58, 1);
    let name = "fuse.l0.w";
    let p = model.params.get(name);
    let (shape, x0) = (p.shape.clone(), p.values.clone());
    let queries = vec![QueryPoint { x: 19.3, y: 27.8, point_type: PointType::Tissue }];
    let err = grad_check(
        |g, x| {
            let mut binding = Binding::new();
            let mut bound = bind_model(g, &model.params, &model.cfg, &mut binding);
            bound.fuse[0].0 = x;
            let outputs = track_clip(g, &bound, &model.cfg, &frames, 64, 64, &queries, TextMode::Predicted)
                .map_err(track_to_numerics)?;
            g.mean(outputs.frames[0].refined)
        },
        &shape,
        &x0,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "relative error {err}");
}

pub(crate) fn track_to_numerics(e: TrackError) -> crate::numerics::NumericsError {
    match e {
        TrackError::Numerics(n) => n,
        TrackError::Vision(VisionError::Numerics(n)) => n,
        other => panic!("unexpected error in grad check: {other}"),
    }
}

#[test]
fn prediction_serialization_round_trips() {
    let model = Model::new(tiny_cfg(), 19);
    let clip_cfg = ScenarioConfig {
        n_frames: 4,
        n_points: 2,
        width: 64,
        height: 64,
        ..ScenarioConfig::new(Scenario::CameraJitter, 33)
    };
    let clip = gen_clip(&clip_cfg).unwrap();
    let queries = queries_from_annotation(&clip.annotation).unwrap();
    let mut g = Graph::new();
    let mut binding = Binding::new();
    let bound = model.bind(&mut g, &mut binding);
    let outputs = track_clip(&mut g, &bound, &model.cfg, &clip.frames, 64, 64, &queries, TextMode::Predicted).unwrap();
    let pred = outputs_to_prediction(&g, &outputs, &clip.annotation.clip_id, &queries);
    let bytes = serialize_prediction(&pred);
    let parsed = parse_prediction(&bytes).unwrap();
    assert_eq!(parsed.clip_id, pred.clip_id);
    for (a, b) in parsed.tracks.iter().zip(&pred.tracks) {
        assert_eq!(a.query, b.query);
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            // Coordinates survive the text format bit-exactly, so the
            // refinement identity stays checkable from the file.
            assert_eq!(fa.coord, fb.coord);
            assert_eq!(fa.coarse, fb.coarse);
            assert_eq!(fa.offset, fb.offset);
            assert_eq!(fa.coord.0, fa.coarse.0 + fa.offset.0);
            assert_eq!(fa.coord.1, fa.coarse.1 + fa.offset.1);
            assert_eq!(fa.status, fb.status);
            assert_eq!(fa.visible, fb.visible);
        }
    }
}

#[test]
fn empty_clip_is_rejected() {
    let model = Model::new(tiny_cfg(), 20);
    let mut g = Graph::new();
    let mut binding = Binding::new();
    let bound = model.bind(&mut g, &mut binding);
    let queries = vec![QueryPoint { x: 5.0, y: 5.0, point_type: PointType::Tissue }];
    assert!(matches!(
        track_clip(&mut g, &bound, &model.cfg, &[], 64, 64, &queries, TextMode::Predicted),
        Err(TrackError::EmptyClip)
    ));
}
