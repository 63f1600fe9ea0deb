//! Multimodal clip annotation schema and its on-disk format.
//!
//! A clip document is UTF-8 JSON, one clip per `.vlspt.json` file: per-track
//! point type, optional instrument metadata, and one observation (coordinate
//! or null, plus a status string) per annotated frame. Serialization is
//! canonical: fixed key order and 3-decimal fixed-point coordinates, so
//! `parse∘serialize` is the identity and output bytes are reproducible.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde_json::Value;
use thiserror::Error;

/// File extension for clip annotation documents.
pub const CLIP_EXT: &str = ".vlspt.json";

/// What kind of point a track follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PointType {
    Tissue,
    Instrument,
}

impl PointType {
    pub fn as_str(&self) -> &'static str {
        match self {
            PointType::Tissue => "Tissue",
            PointType::Instrument => "Instrument",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "Tissue" => Some(PointType::Tissue),
            "Instrument" => Some(PointType::Instrument),
            _ => None,
        }
    }
}

/// Closed 9-entry visual-status vocabulary. Tissue points use the first
/// seven entries, instrument points use {ClearView, ExternalOcclusion,
/// SelfOcclusion, OutOfView}; the 7/4 split matches the status-head widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PointStatus {
    ClearView,
    Pulled,
    Reflection,
    SmokeObscuration,
    InstrumentObscuration,
    TissueObscuration,
    OutOfView,
    ExternalOcclusion,
    SelfOcclusion,
}

/// Tissue vocabulary in head-index order.
pub const TISSUE_STATUSES: [PointStatus; 7] = [
    PointStatus::ClearView,
    PointStatus::Pulled,
    PointStatus::Reflection,
    PointStatus::SmokeObscuration,
    PointStatus::InstrumentObscuration,
    PointStatus::TissueObscuration,
    PointStatus::OutOfView,
];

/// Instrument vocabulary in head-index order.
pub const INSTRUMENT_STATUSES: [PointStatus; 4] = [
    PointStatus::ClearView,
    PointStatus::ExternalOcclusion,
    PointStatus::SelfOcclusion,
    PointStatus::OutOfView,
];

impl PointStatus {
    pub const ALL: [PointStatus; 9] = [
        PointStatus::ClearView,
        PointStatus::Pulled,
        PointStatus::Reflection,
        PointStatus::SmokeObscuration,
        PointStatus::InstrumentObscuration,
        PointStatus::TissueObscuration,
        PointStatus::OutOfView,
        PointStatus::ExternalOcclusion,
        PointStatus::SelfOcclusion,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PointStatus::ClearView => "Clear View",
            PointStatus::Pulled => "Pulled",
            PointStatus::Reflection => "Reflection",
            PointStatus::SmokeObscuration => "Smoke Obscuration",
            PointStatus::InstrumentObscuration => "Instrument Obscuration",
            PointStatus::TissueObscuration => "Tissue Obscuration",
            PointStatus::OutOfView => "Out of View",
            PointStatus::ExternalOcclusion => "External Occlusion",
            PointStatus::SelfOcclusion => "Self-occlusion",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|st| st.as_str() == s)
    }

    /// Whether this status is legal for the given point type.
    pub fn allowed_for(&self, pt: PointType) -> bool {
        match pt {
            PointType::Tissue => TISSUE_STATUSES.contains(self),
            PointType::Instrument => INSTRUMENT_STATUSES.contains(self),
        }
    }

    /// Index into the per-type status head (7-way tissue, 4-way instrument).
    pub fn head_index(&self, pt: PointType) -> Option<usize> {
        match pt {
            PointType::Tissue => TISSUE_STATUSES.iter().position(|s| s == self),
            PointType::Instrument => INSTRUMENT_STATUSES.iter().position(|s| s == self),
        }
    }

    pub fn from_head_index(pt: PointType, idx: usize) -> Option<Self> {
        match pt {
            PointType::Tissue => TISSUE_STATUSES.get(idx).copied(),
            PointType::Instrument => INSTRUMENT_STATUSES.get(idx).copied(),
        }
    }
}

/// The seven annotated instrument types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum InstrumentType {
    HarmonicAceCurvedShears,
    CadiereForceps,
    FenestratedBipolarForceps,
    ClipApplier,
    Clip,
    TipUpFenestratedGrasper,
    NeedleDriver,
}

impl InstrumentType {
    pub const ALL: [InstrumentType; 7] = [
        InstrumentType::HarmonicAceCurvedShears,
        InstrumentType::CadiereForceps,
        InstrumentType::FenestratedBipolarForceps,
        InstrumentType::ClipApplier,
        InstrumentType::Clip,
        InstrumentType::TipUpFenestratedGrasper,
        InstrumentType::NeedleDriver,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            InstrumentType::HarmonicAceCurvedShears => "Harmonic Ace Curved Shears",
            InstrumentType::CadiereForceps => "Cadiere Forceps",
            InstrumentType::FenestratedBipolarForceps => "Fenestrated Bipolar Forceps",
            InstrumentType::ClipApplier => "Clip Applier",
            InstrumentType::Clip => "Clip",
            InstrumentType::TipUpFenestratedGrasper => "Tip-Up Fenestrated Grasper",
            InstrumentType::NeedleDriver => "Needle Driver",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|t| t.as_str() == s)
    }
}

/// Instrument identity for instrument-type tracks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstrumentMeta {
    pub instrument_type: InstrumentType,
    pub instance_id: u32,
}

/// Synthetic-scenario label carried by each clip. `Clean` is the
/// unchallenged control and never stands in for a surgical scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scenario {
    TissueDeformation,
    InstrumentOcclusion,
    CameraJitter,
    SurfaceReflection,
    CauterizationSmoke,
    Clean,
}

impl serde::Serialize for Scenario {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> serde::Deserialize<'de> for Scenario {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Scenario::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("unknown scenario {s:?}")))
    }
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::TissueDeformation,
        Scenario::InstrumentOcclusion,
        Scenario::CameraJitter,
        Scenario::SurfaceReflection,
        Scenario::CauterizationSmoke,
        Scenario::Clean,
    ];

    /// The five surgical challenge scenarios, without the control.
    pub const CHALLENGES: [Scenario; 5] = [
        Scenario::TissueDeformation,
        Scenario::InstrumentOcclusion,
        Scenario::CameraJitter,
        Scenario::SurfaceReflection,
        Scenario::CauterizationSmoke,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Scenario::TissueDeformation => "Tissue Deformation",
            Scenario::InstrumentOcclusion => "Instrument Occlusion",
            Scenario::CameraJitter => "Camera Jitter",
            Scenario::SurfaceReflection => "Surface Reflection",
            Scenario::CauterizationSmoke => "Cauterization Smoke",
            Scenario::Clean => "Clean",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|sc| sc.as_str() == s)
    }
}

/// One annotated frame of one track: pixel coordinate (absent when the
/// point is annotated invisible) and a status label.
#[derive(Debug, Clone, PartialEq)]
pub struct PointObservation {
    pub coord: Option<(f64, f64)>,
    pub status: PointStatus,
}

/// One tracked point across the clip's annotated frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub point_type: PointType,
    pub instrument: Option<InstrumentMeta>,
    /// One observation per entry of `ClipAnnotation::frame_indices`.
    pub observations: Vec<PointObservation>,
}

/// Ground truth for one video clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipAnnotation {
    pub clip_id: String,
    pub width: u32,
    pub height: u32,
    /// Labeling cadence of the source scheme, in Hz.
    pub annotation_fps: f64,
    pub scenario: Scenario,
    pub frame_indices: Vec<u32>,
    pub tracks: Vec<Track>,
}

/// Parse or schema failure, with enough location to find the offender.
#[derive(Debug, Error)]
pub enum AnnoError {
    #[error("malformed document: {0}")]
    MalformedDocument(String),
    #[error("schema violation in clip {clip_id:?} (track {track:?}, frame {frame:?}): {message}")]
    SchemaViolation {
        clip_id: String,
        track: Option<usize>,
        frame: Option<u32>,
        message: String,
    },
}

impl AnnoError {
    fn schema(clip_id: &str, track: Option<usize>, frame: Option<u32>, message: impl Into<String>) -> Self {
        AnnoError::SchemaViolation {
            clip_id: clip_id.to_string(),
            track,
            frame,
            message: message.into(),
        }
    }
}

/// Machine-readable invariant violation found by [`validate_clip`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub code: ViolationCode,
    pub track: Option<usize>,
    pub frame: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationCode {
    QueryPointInvisible,
    DuplicateInstanceId,
    ObservationCountMismatch,
    StatusVocabularyMismatch,
    CoordOutOfBounds,
    FrameIndicesNotAscending,
    MissingInstrumentMeta,
    UnexpectedInstrumentMeta,
    NoFrames,
}

impl std::fmt::Display for ViolationCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

// ---- parsing ---------------------------------------------------------------

/// Parse a clip document. Syntax failures report [`AnnoError::MalformedDocument`];
/// every schema failure carries clip id, track index, and frame index.
pub fn parse_clip(bytes: &[u8]) -> Result<ClipAnnotation, AnnoError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| AnnoError::MalformedDocument(format!("not UTF-8: {e}")))?;
    let root: Value =
        serde_json::from_str(text).map_err(|e| AnnoError::MalformedDocument(e.to_string()))?;
    let obj = root
        .as_object()
        .ok_or_else(|| AnnoError::MalformedDocument("top level is not an object".into()))?;

    // clip_id first so every later error can name the clip.
    let clip_id = obj
        .get("clip_id")
        .and_then(Value::as_str)
        .ok_or_else(|| AnnoError::schema("<unknown>", None, None, "missing string field clip_id"))?
        .to_string();
    let want_u32 = |field: &str| -> Result<u32, AnnoError> {
        obj.get(field)
            .and_then(Value::as_u64)
            .and_then(|v| u32::try_from(v).ok())
            .ok_or_else(|| AnnoError::schema(&clip_id, None, None, format!("missing or invalid field {field}")))
    };
    let width = want_u32("width")?;
    let height = want_u32("height")?;
    let annotation_fps = obj
        .get("annotation_fps")
        .and_then(Value::as_f64)
        .ok_or_else(|| AnnoError::schema(&clip_id, None, None, "missing numeric field annotation_fps"))?;
    let scenario_str = obj
        .get("scenario")
        .and_then(Value::as_str)
        .ok_or_else(|| AnnoError::schema(&clip_id, None, None, "missing string field scenario"))?;
    let scenario = Scenario::parse(scenario_str)
        .ok_or_else(|| AnnoError::schema(&clip_id, None, None, format!("unknown scenario {scenario_str:?}")))?;
    let frame_indices: Vec<u32> = obj
        .get("frame_indices")
        .and_then(Value::as_array)
        .ok_or_else(|| AnnoError::schema(&clip_id, None, None, "missing array field frame_indices"))?
        .iter()
        .map(|v| {
            v.as_u64()
                .and_then(|x| u32::try_from(x).ok())
                .ok_or_else(|| AnnoError::schema(&clip_id, None, None, "frame_indices entries must be non-negative integers"))
        })
        .collect::<Result<_, _>>()?;

    let tracks_json = obj
        .get("tracks")
        .and_then(Value::as_array)
        .ok_or_else(|| AnnoError::schema(&clip_id, None, None, "missing array field tracks"))?;

    let mut tracks = Vec::with_capacity(tracks_json.len());
    for (ti, tv) in tracks_json.iter().enumerate() {
        tracks.push(parse_track(&clip_id, ti, tv, &frame_indices, width, height)?);
    }

    Ok(ClipAnnotation {
        clip_id,
        width,
        height,
        annotation_fps,
        scenario,
        frame_indices,
        tracks,
    })
}

fn parse_track(
    clip_id: &str,
    ti: usize,
    tv: &Value,
    frame_indices: &[u32],
    width: u32,
    height: u32,
) -> Result<Track, AnnoError> {
    let tobj = tv
        .as_object()
        .ok_or_else(|| AnnoError::schema(clip_id, Some(ti), None, "track is not an object"))?;
    let pt_str = tobj
        .get("point_type")
        .and_then(Value::as_str)
        .ok_or_else(|| AnnoError::schema(clip_id, Some(ti), None, "missing string field point_type"))?;
    let point_type = PointType::parse(pt_str)
        .ok_or_else(|| AnnoError::schema(clip_id, Some(ti), None, format!("unknown point_type {pt_str:?}")))?;

    let instrument = match point_type {
        PointType::Instrument => {
            let it_str = tobj.get("instrument_type").and_then(Value::as_str).ok_or_else(|| {
                AnnoError::schema(clip_id, Some(ti), None, "instrument track missing instrument_type")
            })?;
            let instrument_type = InstrumentType::parse(it_str).ok_or_else(|| {
                AnnoError::schema(clip_id, Some(ti), None, format!("unknown instrument_type {it_str:?}"))
            })?;
            let instance_id = tobj
                .get("instance_id")
                .and_then(Value::as_u64)
                .and_then(|v| u32::try_from(v).ok())
                .ok_or_else(|| {
                    AnnoError::schema(clip_id, Some(ti), None, "instrument track missing non-negative instance_id")
                })?;
            Some(InstrumentMeta {
                instrument_type,
                instance_id,
            })
        }
        PointType::Tissue => {
            if tobj.contains_key("instrument_type") || tobj.contains_key("instance_id") {
                return Err(AnnoError::schema(
                    clip_id,
                    Some(ti),
                    None,
                    "tissue track carries instrument metadata",
                ));
            }
            None
        }
    };

    let obs_json = tobj
        .get("observations")
        .and_then(Value::as_array)
        .ok_or_else(|| AnnoError::schema(clip_id, Some(ti), None, "missing array field observations"))?;
    if obs_json.len() != frame_indices.len() {
        return Err(AnnoError::schema(
            clip_id,
            Some(ti),
            None,
            format!(
                "track has {} observations for {} annotated frames",
                obs_json.len(),
                frame_indices.len()
            ),
        ));
    }

    let mut observations = Vec::with_capacity(obs_json.len());
    for (oi, ov) in obs_json.iter().enumerate() {
        let frame_no = frame_indices[oi];
        let oobj = ov
            .as_object()
            .ok_or_else(|| AnnoError::schema(clip_id, Some(ti), Some(frame_no), "observation is not an object"))?;
        let declared = oobj
            .get("frame")
            .and_then(Value::as_u64)
            .and_then(|v| u32::try_from(v).ok())
            .ok_or_else(|| AnnoError::schema(clip_id, Some(ti), Some(frame_no), "observation missing frame index"))?;
        if declared != frame_no {
            return Err(AnnoError::schema(
                clip_id,
                Some(ti),
                Some(frame_no),
                format!("observation frame {declared} does not match frame_indices entry {frame_no}"),
            ));
        }
        let status_str = oobj
            .get("status")
            .and_then(Value::as_str)
            .ok_or_else(|| AnnoError::schema(clip_id, Some(ti), Some(frame_no), "observation missing status"))?;
        let status = PointStatus::parse(status_str).ok_or_else(|| {
            AnnoError::schema(clip_id, Some(ti), Some(frame_no), format!("unknown status {status_str:?}"))
        })?;
        if !status.allowed_for(point_type) {
            return Err(AnnoError::schema(
                clip_id,
                Some(ti),
                Some(frame_no),
                format!(
                    "status {:?} is not in the {} vocabulary",
                    status.as_str(),
                    point_type.as_str()
                ),
            ));
        }
        let coord = match oobj.get("coord") {
            None => {
                return Err(AnnoError::schema(clip_id, Some(ti), Some(frame_no), "observation missing coord"))
            }
            Some(Value::Null) => None,
            Some(Value::Array(a)) if a.len() == 2 => {
                let x = a[0].as_f64();
                let y = a[1].as_f64();
                match (x, y) {
                    (Some(x), Some(y)) => {
                        if !(0.0..width as f64).contains(&x) || !(0.0..height as f64).contains(&y) {
                            return Err(AnnoError::schema(
                                clip_id,
                                Some(ti),
                                Some(frame_no),
                                format!("coord ({x}, {y}) outside {width}x{height} frame"),
                            ));
                        }
                        Some((x, y))
                    }
                    _ => {
                        return Err(AnnoError::schema(
                            clip_id,
                            Some(ti),
                            Some(frame_no),
                            "coord entries must be numbers",
                        ))
                    }
                }
            }
            Some(_) => {
                return Err(AnnoError::schema(
                    clip_id,
                    Some(ti),
                    Some(frame_no),
                    "coord must be null or a 2-element array",
                ))
            }
        };
        observations.push(PointObservation { coord, status });
    }

    Ok(Track {
        point_type,
        instrument,
        observations,
    })
}

// ---- serialization ----------------------------------------------------------

fn push_f3(out: &mut String, v: f64) {
    let _ = write!(out, "{v:.3}");
}

/// Render a clip as canonical UTF-8 JSON: fixed key order, coordinates and
/// fps at 3-decimal fixed precision, no insignificant whitespace.
pub fn serialize_clip(clip: &ClipAnnotation) -> Vec<u8> {
    let mut s = String::new();
    s.push_str("{\"clip_id\":");
    s.push_str(&Value::String(clip.clip_id.clone()).to_string());
    let _ = write!(s, ",\"width\":{},\"height\":{}", clip.width, clip.height);
    s.push_str(",\"annotation_fps\":");
    push_f3(&mut s, clip.annotation_fps);
    let _ = write!(s, ",\"scenario\":\"{}\"", clip.scenario.as_str());
    s.push_str(",\"frame_indices\":[");
    for (i, f) in clip.frame_indices.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{f}");
    }
    s.push_str("],\"tracks\":[");
    for (ti, track) in clip.tracks.iter().enumerate() {
        if ti > 0 {
            s.push(',');
        }
        let _ = write!(s, "{{\"point_type\":\"{}\"", track.point_type.as_str());
        if let Some(meta) = &track.instrument {
            let _ = write!(
                s,
                ",\"instrument_type\":\"{}\",\"instance_id\":{}",
                meta.instrument_type.as_str(),
                meta.instance_id
            );
        }
        s.push_str(",\"observations\":[");
        for (oi, obs) in track.observations.iter().enumerate() {
            if oi > 0 {
                s.push(',');
            }
            let frame = clip.frame_indices.get(oi).copied().unwrap_or(oi as u32);
            let _ = write!(s, "{{\"frame\":{frame},\"coord\":");
            match obs.coord {
                Some((x, y)) => {
                    s.push('[');
                    push_f3(&mut s, x);
                    s.push(',');
                    push_f3(&mut s, y);
                    s.push(']');
                }
                None => s.push_str("null"),
            }
            let _ = write!(s, ",\"status\":\"{}\"}}", obs.status.as_str());
        }
        s.push_str("]}");
    }
    s.push_str("]}");
    s.into_bytes()
}

// ---- visibility --------------------------------------------------------------

/// Visibility convention shared by ground truth and predictions.
///
/// When a coordinate is available (the ground-truth side), presence of the
/// coordinate alone decides. When none is available (the prediction side),
/// the status decides: obscured and out-of-view statuses count as invisible,
/// while Reflection, Pulled, and Smoke Obscuration count as visible since
/// the source scheme keeps coordinates for them.
pub fn visibility_of(status: PointStatus, coord: Option<(f64, f64)>) -> bool {
    match coord {
        Some(_) => true,
        None => !matches!(
            status,
            PointStatus::OutOfView
                | PointStatus::InstrumentObscuration
                | PointStatus::TissueObscuration
                | PointStatus::ExternalOcclusion
                | PointStatus::SelfOcclusion
        ),
    }
}

// ---- validation ---------------------------------------------------------------

/// Check every clip invariant; returns an empty list iff all hold.
pub fn validate_clip(clip: &ClipAnnotation) -> Vec<Violation> {
    let mut out = Vec::new();
    if clip.frame_indices.is_empty() {
        out.push(Violation {
            code: ViolationCode::NoFrames,
            track: None,
            frame: None,
        });
    }
    if clip.frame_indices.windows(2).any(|w| w[0] >= w[1]) {
        out.push(Violation {
            code: ViolationCode::FrameIndicesNotAscending,
            track: None,
            frame: None,
        });
    }
    let mut seen_instances = BTreeSet::new();
    for (ti, track) in clip.tracks.iter().enumerate() {
        match (track.point_type, &track.instrument) {
            (PointType::Instrument, None) => out.push(Violation {
                code: ViolationCode::MissingInstrumentMeta,
                track: Some(ti),
                frame: None,
            }),
            (PointType::Tissue, Some(_)) => out.push(Violation {
                code: ViolationCode::UnexpectedInstrumentMeta,
                track: Some(ti),
                frame: None,
            }),
            _ => {}
        }
        if let Some(meta) = &track.instrument {
            // Tracks span every annotated frame, so a repeated
            // (instrument_type, instance_id) pair collides in each frame.
            if !seen_instances.insert((meta.instrument_type, meta.instance_id)) {
                out.push(Violation {
                    code: ViolationCode::DuplicateInstanceId,
                    track: Some(ti),
                    frame: None,
                });
            }
        }
        if track.observations.len() != clip.frame_indices.len() {
            out.push(Violation {
                code: ViolationCode::ObservationCountMismatch,
                track: Some(ti),
                frame: None,
            });
        }
        for (oi, obs) in track.observations.iter().enumerate() {
            let frame = clip.frame_indices.get(oi).copied();
            if oi == 0 && obs.coord.is_none() {
                out.push(Violation {
                    code: ViolationCode::QueryPointInvisible,
                    track: Some(ti),
                    frame,
                });
            }
            if !obs.status.allowed_for(track.point_type) {
                out.push(Violation {
                    code: ViolationCode::StatusVocabularyMismatch,
                    track: Some(ti),
                    frame,
                });
            }
            if let Some((x, y)) = obs.coord {
                if !(0.0..clip.width as f64).contains(&x) || !(0.0..clip.height as f64).contains(&y) {
                    out.push(Violation {
                        code: ViolationCode::CoordOutOfBounds,
                        track: Some(ti),
                        frame,
                    });
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_doc() -> String {
        r#"{
            "clip_id": "demo-0",
            "width": 256, "height": 256,
            "annotation_fps": 1.0,
            "scenario": "Clean",
            "frame_indices": [0, 3],
            "tracks": [
                {"point_type": "Tissue", "observations": [
                    {"frame": 0, "coord": [10, 10], "status": "Clear View"},
                    {"frame": 3, "coord": [12, 11], "status": "Clear View"}
                ]}
            ]
        }"#
        .to_string()
    }

    #[test]
    fn parses_minimal_document() {
        let clip = parse_clip(minimal_doc().as_bytes()).unwrap();
        assert_eq!(clip.tracks.len(), 1);
        assert_eq!(clip.frame_indices, vec![0, 3]);
        assert_eq!(clip.tracks[0].observations[0].coord, Some((10.0, 10.0)));
        assert_eq!(clip.tracks[0].observations[1].coord, Some((12.0, 11.0)));
        assert!(validate_clip(&clip).is_empty());
    }

    #[test]
    fn tissue_track_with_instrument_status_is_rejected() {
        let doc = minimal_doc().replace("\"Clear View\"", "\"Self-occlusion\"");
        let err = parse_clip(doc.as_bytes()).unwrap_err();
        match err {
            AnnoError::SchemaViolation {
                clip_id,
                track,
                frame,
                message,
            } => {
                assert_eq!(clip_id, "demo-0");
                assert_eq!(track, Some(0));
                assert_eq!(frame, Some(0));
                assert!(message.contains("vocabulary"), "{message}");
            }
            other => panic!("expected SchemaViolation, got {other:?}"),
        }
    }

    #[test]
    fn null_coord_parses_as_absent() {
        let doc = minimal_doc().replace(
            r#"{"frame": 3, "coord": [12, 11], "status": "Clear View"}"#,
            r#"{"frame": 3, "coord": null, "status": "Out of View"}"#,
        );
        let clip = parse_clip(doc.as_bytes()).unwrap();
        assert_eq!(clip.tracks[0].observations[1].coord, None);
        assert_eq!(clip.tracks[0].observations[1].status, PointStatus::OutOfView);
    }

    #[test]
    fn syntax_error_is_malformed_document() {
        assert!(matches!(
            parse_clip(b"{not json"),
            Err(AnnoError::MalformedDocument(_))
        ));
    }

    #[test]
    fn unknown_status_is_schema_violation() {
        let doc = minimal_doc().replace("Clear View", "Crystal Clear");
        assert!(matches!(parse_clip(doc.as_bytes()), Err(AnnoError::SchemaViolation { .. })));
    }

    #[test]
    fn out_of_bounds_coord_is_schema_violation() {
        let doc = minimal_doc().replace("[12, 11]", "[256, 11]");
        let err = parse_clip(doc.as_bytes()).unwrap_err();
        match err {
            AnnoError::SchemaViolation { frame, .. } => assert_eq!(frame, Some(3)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn serialization_round_trips_and_is_canonical() {
        let clip = parse_clip(minimal_doc().as_bytes()).unwrap();
        let bytes = serialize_clip(&clip);
        let reparsed = parse_clip(&bytes).unwrap();
        assert_eq!(reparsed, clip);
        assert_eq!(serialize_clip(&reparsed), bytes);
    }

    #[test]
    fn coords_render_at_three_decimals() {
        let mut clip = parse_clip(minimal_doc().as_bytes()).unwrap();
        clip.tracks[0].observations[0].coord = Some((10.5, 3.25));
        let text = String::from_utf8(serialize_clip(&clip)).unwrap();
        assert!(text.contains("[10.500,3.250]"), "{text}");
    }

    #[test]
    fn track_order_is_preserved() {
        let mut clip = parse_clip(minimal_doc().as_bytes()).unwrap();
        let mut second = clip.tracks[0].clone();
        second.observations[0].coord = Some((99.0, 99.0));
        clip.tracks.push(second);
        let reparsed = parse_clip(&serialize_clip(&clip)).unwrap();
        assert_eq!(reparsed.tracks[1].observations[0].coord, Some((99.0, 99.0)));
    }

    #[test]
    fn visibility_mapping_table() {
        assert!(visibility_of(PointStatus::ClearView, None));
        assert!(!visibility_of(PointStatus::OutOfView, None));
        assert!(visibility_of(PointStatus::SmokeObscuration, Some((5.0, 5.0))));
        assert!(visibility_of(PointStatus::SmokeObscuration, None));
        assert!(!visibility_of(PointStatus::TissueObscuration, None));
        assert!(visibility_of(PointStatus::Reflection, None));
        assert!(!visibility_of(PointStatus::ExternalOcclusion, None));
    }

    #[test]
    fn validate_flags_invisible_query_point() {
        let mut clip = parse_clip(minimal_doc().as_bytes()).unwrap();
        clip.tracks[0].observations[0].coord = None;
        let v = validate_clip(&clip);
        assert!(v.iter().any(|x| x.code == ViolationCode::QueryPointInvisible));
    }

    #[test]
    fn validate_flags_duplicate_instance_id() {
        let mut clip = parse_clip(minimal_doc().as_bytes()).unwrap();
        let meta = InstrumentMeta {
            instrument_type: InstrumentType::Clip,
            instance_id: 1,
        };
        for _ in 0..2 {
            clip.tracks.push(Track {
                point_type: PointType::Instrument,
                instrument: Some(meta),
                observations: vec![
                    PointObservation {
                        coord: Some((1.0, 1.0)),
                        status: PointStatus::ClearView,
                    };
                    2
                ],
            });
        }
        let v = validate_clip(&clip);
        assert_eq!(
            v.iter().filter(|x| x.code == ViolationCode::DuplicateInstanceId).count(),
            1
        );
    }

    #[test]
    fn validate_flags_vocabulary_partition_both_ways() {
        let mut clip = parse_clip(minimal_doc().as_bytes()).unwrap();
        clip.tracks[0].observations[1].status = PointStatus::SelfOcclusion;
        clip.tracks.push(Track {
            point_type: PointType::Instrument,
            instrument: Some(InstrumentMeta {
                instrument_type: InstrumentType::NeedleDriver,
                instance_id: 0,
            }),
            observations: vec![
                PointObservation {
                    coord: Some((1.0, 1.0)),
                    status: PointStatus::Pulled,
                };
                2
            ],
        });
        let v = validate_clip(&clip);
        assert_eq!(
            v.iter().filter(|x| x.code == ViolationCode::StatusVocabularyMismatch).count(),
            3
        );
    }

    #[test]
    fn vocabulary_cardinalities_match_head_widths() {
        assert_eq!(TISSUE_STATUSES.len(), 7);
        assert_eq!(INSTRUMENT_STATUSES.len(), 4);
        assert_eq!(PointStatus::ALL.len(), 9);
        for (i, s) in TISSUE_STATUSES.iter().enumerate() {
            assert_eq!(s.head_index(PointType::Tissue), Some(i));
        }
        for (i, s) in INSTRUMENT_STATUSES.iter().enumerate() {
            assert_eq!(s.head_index(PointType::Instrument), Some(i));
        }
        assert_eq!(PointStatus::Pulled.head_index(PointType::Instrument), None);
    }
}
