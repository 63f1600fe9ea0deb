//! Prediction records and their `.pred.json` wire format.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anno::PointStatus;

/// File extension for prediction documents.
pub const PRED_EXT: &str = ".pred.json";

/// Per-frame prediction for one query point.
#[derive(Debug, Clone, PartialEq)]
pub struct PredFrame {
    pub frame: u32,
    /// Final coordinate, exactly `coarse + offset`.
    pub coord: (f64, f64),
    /// The model's own status prediction (argmax of the status head).
    pub status: PointStatus,
    /// Predicted softmax over the point's status vocabulary.
    pub status_probs: Vec<f64>,
    /// Visibility derived from the status that guided this frame.
    pub visible: bool,
    pub coarse: (f64, f64),
    pub offset: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredTrack {
    pub query: (f64, f64),
    pub frames: Vec<PredFrame>,
}

/// All predictions for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackPrediction {
    pub clip_id: String,
    pub tracks: Vec<PredTrack>,
}

#[derive(Debug, Error)]
pub enum PredError {
    #[error("malformed prediction document: {0}")]
    Malformed(String),
    #[error("unknown status string {0:?} in prediction document")]
    UnknownStatus(String),
}

#[derive(Serialize, Deserialize)]
struct FrameWire {
    frame: u32,
    coord: [f64; 2],
    status: String,
    visible: bool,
    coarse: [f64; 2],
    offset: [f64; 2],
}

#[derive(Serialize, Deserialize)]
struct TrackWire {
    queries: [f64; 2],
    frames: Vec<FrameWire>,
}

#[derive(Serialize, Deserialize)]
struct PredWire {
    clip_id: String,
    tracks: Vec<TrackWire>,
}

/// Render as deterministic JSON. Floats use shortest round-trip form, so
/// parsing recovers every coordinate bit-exactly.
pub fn serialize_prediction(pred: &TrackPrediction) -> Vec<u8> {
    let wire = PredWire {
        clip_id: pred.clip_id.clone(),
        tracks: pred
            .tracks
            .iter()
            .map(|t| TrackWire {
                queries: [t.query.0, t.query.1],
                frames: t
                    .frames
                    .iter()
                    .map(|f| FrameWire {
                        frame: f.frame,
                        coord: [f.coord.0, f.coord.1],
                        status: f.status.as_str().to_string(),
                        visible: f.visible,
                        coarse: [f.coarse.0, f.coarse.1],
                        offset: [f.offset.0, f.offset.1],
                    })
                    .collect(),
            })
            .collect(),
    };
    let mut out = serde_json::to_vec_pretty(&wire).expect("prediction serialization cannot fail");
    out.push(b'\n');
    out
}

pub fn parse_prediction(bytes: &[u8]) -> Result<TrackPrediction, PredError> {
    let wire: PredWire = serde_json::from_slice(bytes).map_err(|e| PredError::Malformed(e.to_string()))?;
    let mut tracks = Vec::with_capacity(wire.tracks.len());
    for t in wire.tracks {
        let mut frames = Vec::with_capacity(t.frames.len());
        for f in t.frames {
            let status = PointStatus::parse(&f.status).ok_or_else(|| PredError::UnknownStatus(f.status.clone()))?;
            frames.push(PredFrame {
                frame: f.frame,
                coord: (f.coord[0], f.coord[1]),
                status,
                status_probs: Vec::new(),
                visible: f.visible,
                coarse: (f.coarse[0], f.coarse[1]),
                offset: (f.offset[0], f.offset[1]),
            });
        }
        tracks.push(PredTrack {
            query: (t.queries[0], t.queries[1]),
            frames,
        });
    }
    Ok(TrackPrediction {
        clip_id: wire.clip_id,
        tracks,
    })
}
