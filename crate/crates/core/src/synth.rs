//! Deterministic generator of toy surgical clips.
//!
//! Each clip is a seeded procedural grayscale texture perturbed by one of
//! six scenario dynamics, together with exact per-frame point positions
//! (`dense_truth`) and the sparse annotation derived from them. Everything
//! is a pure function of [`ScenarioConfig`]: the same config yields
//! bit-identical frames, trajectories, and annotation bytes.
//!
//! Motion bounds per scenario (checked by tests; `amp = intensity * 8` px):
//! deformation displaces points by at most `amp` per frame pair and jitter
//! translates globally by at most `2 * amp` between consecutive frames, so
//! every per-frame step is within `intensity * 16 + amp`. The remaining
//! scenarios keep points static.

use std::io::{Read, Write};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::anno::{
    serialize_clip, ClipAnnotation, PointObservation, PointStatus, PointType, Scenario, Track,
};

/// Header of the sibling frame-data file.
pub const FRAMES_MAGIC: &[u8; 5] = b"TGFR1";
/// File extension for frame data.
pub const FRAMES_EXT: &str = ".frames.bin";

/// Annotate every k-th frame, emulating sparse 1 fps labels over video.
pub const ANNOTATE_EVERY: usize = 3;

/// Point speed above which a deformed point is labeled Pulled, px/frame.
const PULLED_SPEED: f64 = 1.0;
/// Smoke density thresholds: above the first the status flips to
/// Smoke Obscuration, above the second the coordinate is dropped.
const SMOKE_STATUS_DENSITY: f64 = 0.6;
const SMOKE_NULL_DENSITY: f64 = 0.9;
/// Apparent-texture displacement under full-density smoke at intensity 1,
/// in pixels along +x. The annotation keeps the true position, so the
/// appearance-vs-geometry bias is exactly what status guidance can fix.
pub const SMOKE_SHIMMER_PX: f64 = 8.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scenario config: {0}")]
    InvalidConfig(String),
    #[error("scenario {scenario} needs at least 5 clips for a 4:1 split, got {count}")]
    TooFewClips { scenario: &'static str, count: usize },
    #[error("frame file header mismatch, expected \"TGFR1\"")]
    BadFramesHeader,
    #[error("frame file truncated or corrupt: {0}")]
    BadFrames(String),
}

/// Everything that determines one synthetic clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub seed: u64,
    pub n_frames: usize,
    pub n_points: usize,
    pub width: u32,
    pub height: u32,
    /// Challenge severity knob in [0, 1].
    pub intensity: f64,
}

impl ScenarioConfig {
    pub fn new(scenario: Scenario, seed: u64) -> Self {
        ScenarioConfig {
            scenario,
            seed,
            n_frames: 24,
            n_points: 8,
            width: 256,
            height: 256,
            intensity: 0.7,
        }
    }

    pub fn clip_id(&self) -> String {
        format!("{}-{:016x}", scenario_slug(self.scenario), self.seed)
    }

    fn validate(&self) -> Result<(), SynthError> {
        if self.n_frames < 3 {
            return Err(SynthError::InvalidConfig(format!(
                "n_frames must be >= 3, got {}",
                self.n_frames
            )));
        }
        if self.n_points < 1 {
            return Err(SynthError::InvalidConfig("n_points must be >= 1".into()));
        }
        if self.width < 64 || self.height < 64 || self.width % 32 != 0 || self.height % 32 != 0 {
            return Err(SynthError::InvalidConfig(format!(
                "frame extents must be >= 64 and divisible by 32, got {}x{}",
                self.width, self.height
            )));
        }
        if !(0.0..=1.0).contains(&self.intensity) {
            return Err(SynthError::InvalidConfig(format!(
                "intensity must be in [0, 1], got {}",
                self.intensity
            )));
        }
        Ok(())
    }
}

pub fn scenario_slug(s: Scenario) -> &'static str {
    match s {
        Scenario::TissueDeformation => "tissue_deformation",
        Scenario::InstrumentOcclusion => "instrument_occlusion",
        Scenario::CameraJitter => "camera_jitter",
        Scenario::SurfaceReflection => "surface_reflection",
        Scenario::CauterizationSmoke => "cauterization_smoke",
        Scenario::Clean => "clean",
    }
}

/// A generated clip: rendered frames, the sparse annotation, and the exact
/// position of every point at every frame (even while occluded).
#[derive(Debug, Clone)]
pub struct SynthClip {
    /// One `height*width` grayscale grid in [0, 1] per frame.
    pub frames: Vec<Vec<f64>>,
    pub annotation: ClipAnnotation,
    /// `dense_truth[point][frame]` exact positions.
    pub dense_truth: Vec<Vec<(f64, f64)>>,
}

// ---- seeded value noise ------------------------------------------------------

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn lattice(seed: u64, octave: u64, ix: i64, iy: i64) -> f64 {
    let h = splitmix(splitmix(splitmix(seed ^ octave.wrapping_mul(0xA24B_AED4_963E_E407)) ^ ix as u64) ^ iy as u64);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn value_noise(seed: u64, octave: u64, x: f64, y: f64) -> f64 {
    let ix = x.floor() as i64;
    let iy = y.floor() as i64;
    let fx = smoothstep(x - ix as f64);
    let fy = smoothstep(y - iy as f64);
    let v00 = lattice(seed, octave, ix, iy);
    let v10 = lattice(seed, octave, ix + 1, iy);
    let v01 = lattice(seed, octave, ix, iy + 1);
    let v11 = lattice(seed, octave, ix + 1, iy + 1);
    v00 * (1.0 - fx) * (1.0 - fy) + v10 * fx * (1.0 - fy) + v01 * (1.0 - fx) * fy + v11 * fx * fy
}

/// Multi-octave value noise in [0, 1]. The slow persistence falloff keeps
/// enough high-frequency energy inside an 8 px patch for patch features to
/// stay distinctive; at 0.5 the local ramp of the coarse octaves dominates
/// and distant patches become near-duplicates.
fn texture(seed: u64, x: f64, y: f64) -> f64 {
    let mut acc = 0.0;
    let mut wsum = 0.0;
    let mut weight = 1.0;
    let mut wavelength = 16.0;
    for octave in 0..5u64 {
        acc += weight * value_noise(seed, octave, x / wavelength, y / wavelength);
        wsum += weight;
        weight *= 0.8;
        wavelength *= 0.5;
    }
    acc / wsum
}

// ---- scenario dynamics -------------------------------------------------------

/// Seeded per-clip motion parameters, exposed so tests can re-derive the
/// occlusion geometry independent of the generator's own status labels.
#[derive(Debug, Clone)]
pub struct Dynamics {
    cfg: ScenarioConfig,
    /// Deformation kernels: (rest center, drift px/frame, direction, cycles).
    kernels: Vec<((f64, f64), (f64, f64), (f64, f64), f64)>,
    /// Per-frame global translation for camera jitter.
    jitter: Vec<(f64, f64)>,
    /// Occluding rectangle: vertical center and half extents.
    rect_cy: f64,
    rect_half: (f64, f64),
    /// Reflection ellipses: (start center, velocity, radii).
    ellipses: Vec<((f64, f64), (f64, f64), (f64, f64))>,
    /// Smoke blob: start center, velocity, base sigma.
    smoke_start: (f64, f64),
    smoke_vel: (f64, f64),
    smoke_sigma: f64,
}

impl Dynamics {
    pub fn amp(&self) -> f64 {
        self.cfg.intensity * 8.0
    }

    /// Deformation displacement field at frame `t`; identically zero at t=0.
    pub fn displacement(&self, t: usize, x: f64, y: f64) -> (f64, f64) {
        if self.cfg.scenario != Scenario::TissueDeformation {
            return (0.0, 0.0);
        }
        let tt = t as f64 / (self.cfg.n_frames - 1) as f64;
        let amp = self.amp();
        let mut dx = 0.0;
        let mut dy = 0.0;
        for &((cx0, cy0), (vx, vy), (ux, uy), cycles) in &self.kernels {
            let cx = cx0 + vx * t as f64;
            let cy = cy0 + vy * t as f64;
            let r2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
            let sigma = 52.0;
            let envelope = (-r2 / (2.0 * sigma * sigma)).exp();
            let phase = (std::f64::consts::PI * cycles * tt).sin();
            dx += amp * phase * envelope * ux;
            dy += amp * phase * envelope * uy;
        }
        (dx, dy)
    }

    pub fn jitter(&self, t: usize) -> (f64, f64) {
        self.jitter[t]
    }

    /// Occluding rectangle at frame `t`: (cx, cy, half_w, half_h). Starts
    /// fully outside the left edge and sweeps across.
    pub fn rect(&self, t: usize) -> (f64, f64, f64, f64) {
        let (hw, hh) = self.rect_half;
        let w = self.cfg.width as f64;
        let tt = t as f64 / (self.cfg.n_frames - 1) as f64;
        let cx = -hw - 2.0 + (w + 2.0 * hw + 4.0) * tt;
        (cx, self.rect_cy, hw, hh)
    }

    pub fn rect_contains(&self, t: usize, x: f64, y: f64) -> bool {
        let (cx, cy, hw, hh) = self.rect(t);
        (x - cx).abs() <= hw && (y - cy).abs() <= hh
    }

    /// Squared normalized radius of `p` w.r.t. ellipse `e` at frame `t`;
    /// values <= 1 are inside.
    pub fn ellipse_r2(&self, e: usize, t: usize, x: f64, y: f64) -> f64 {
        let ((cx0, cy0), (vx, vy), (rx, ry)) = self.ellipses[e];
        let cx = cx0 + vx * t as f64;
        let cy = cy0 + vy * t as f64;
        let nx = (x - cx) / rx;
        let ny = (y - cy) / ry;
        nx * nx + ny * ny
    }

    pub fn in_reflection(&self, t: usize, x: f64, y: f64) -> bool {
        (0..self.ellipses.len()).any(|e| self.ellipse_r2(e, t, x, y) <= 1.0)
    }

    /// Smoke density in [0, 1] at frame `t`.
    pub fn smoke_density(&self, t: usize, x: f64, y: f64) -> f64 {
        let tt = t as f64 / (self.cfg.n_frames - 1) as f64;
        let cx = self.smoke_start.0 + self.smoke_vel.0 * t as f64;
        let cy = self.smoke_start.1 + self.smoke_vel.1 * t as f64;
        let sigma = self.smoke_sigma * (1.0 + 0.6 * tt);
        let peak = ((0.4 + 0.9 * tt) * (0.25 + self.cfg.intensity)).min(1.0);
        let r2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
        peak * (-r2 / (2.0 * sigma * sigma)).exp()
    }
}

/// Derive all seeded motion parameters for a config.
pub fn clip_dynamics(cfg: &ScenarioConfig) -> Dynamics {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ 0x5CE9_A21_u64));
    let w = cfg.width as f64;
    let h = cfg.height as f64;
    let amp = cfg.intensity * 8.0;

    let mut kernels = Vec::new();
    for _ in 0..3 {
        let center = (rng.random_range(0.2 * w..0.8 * w), rng.random_range(0.2 * h..0.8 * h));
        let drift = (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
        let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let cycles = if rng.random_bool(0.5) { 1.0 } else { 2.0 };
        kernels.push((center, drift, (theta.cos(), theta.sin()), cycles));
    }

    let mut jitter = vec![(0.0, 0.0)];
    for _ in 1..cfg.n_frames {
        jitter.push((rng.random_range(-amp..amp), rng.random_range(-amp..amp)));
    }
    if cfg.scenario != Scenario::CameraJitter {
        jitter.iter_mut().for_each(|j| *j = (0.0, 0.0));
    }

    let rect_cy = rng.random_range(0.35 * h..0.65 * h);
    let rect_half = (
        15.0 + 25.0 * cfg.intensity,
        40.0 + 30.0 * cfg.intensity,
    );

    let mut ellipses = Vec::new();
    for _ in 0..2 {
        let start = (rng.random_range(0.1 * w..0.5 * w), rng.random_range(0.2 * h..0.8 * h));
        let vel = (rng.random_range(2.0..5.0), rng.random_range(-2.0..2.0));
        let radii = (
            25.0 + 20.0 * cfg.intensity,
            15.0 + 12.0 * cfg.intensity,
        );
        ellipses.push((start, vel, radii));
    }

    let smoke_start = (rng.random_range(0.3 * w..0.7 * w), rng.random_range(0.3 * h..0.7 * h));
    let smoke_vel = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
    let smoke_sigma = 55.0 + 35.0 * cfg.intensity;

    Dynamics {
        cfg: cfg.clone(),
        kernels,
        jitter,
        rect_cy,
        rect_half,
        ellipses,
        smoke_start,
        smoke_vel,
        smoke_sigma,
    }
}

// ---- generation --------------------------------------------------------------

fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

/// Annotated frame indices for a clip length: frame 0, then every
/// [`ANNOTATE_EVERY`]-th frame.
pub fn annotated_frames(n_frames: usize) -> Vec<u32> {
    (0..n_frames).step_by(ANNOTATE_EVERY).map(|f| f as u32).collect()
}

/// Generate one clip. Deterministic: the same config yields bit-identical
/// frames, dense truth, and annotation bytes.
pub fn gen_clip(cfg: &ScenarioConfig) -> Result<SynthClip, SynthError> {
    cfg.validate()?;
    let dyn_ = clip_dynamics(cfg);
    let w = cfg.width as usize;
    let h = cfg.height as usize;
    let wf = cfg.width as f64;
    let hf = cfg.height as f64;

    // Seeded query points, kept away from the borders so the scenario
    // motion cannot eject them in frame 0.
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ 0x0511_7AB5_u64));
    let mut points0 = Vec::with_capacity(cfg.n_points);
    for _ in 0..cfg.n_points {
        points0.push((
            rng.random_range(0.15 * wf..0.85 * wf),
            rng.random_range(0.15 * hf..0.85 * hf),
        ));
    }

    // Base texture on a padded canvas; warped frames resample it.
    let pad = 32i64;
    let pw = w + 2 * pad as usize;
    let ph = h + 2 * pad as usize;
    let mut base = vec![0.0; pw * ph];
    for y in 0..ph {
        for x in 0..pw {
            base[y * pw + x] = texture(cfg.seed, (x as i64 - pad) as f64, (y as i64 - pad) as f64);
        }
    }
    let sample_base = |x: f64, y: f64| -> f64 {
        let xs = (x + pad as f64).clamp(0.0, (pw - 1) as f64);
        let ys = (y + pad as f64).clamp(0.0, (ph - 1) as f64);
        let x0 = (xs.floor() as usize).min(pw - 2);
        let y0 = (ys.floor() as usize).min(ph - 2);
        let fx = xs - x0 as f64;
        let fy = ys - y0 as f64;
        base[y0 * pw + x0] * (1.0 - fx) * (1.0 - fy)
            + base[y0 * pw + x0 + 1] * fx * (1.0 - fy)
            + base[(y0 + 1) * pw + x0] * (1.0 - fx) * fy
            + base[(y0 + 1) * pw + x0 + 1] * fx * fy
    };

    // Dense trajectories.
    let mut dense_truth = vec![Vec::with_capacity(cfg.n_frames); cfg.n_points];
    for (pi, &(px, py)) in points0.iter().enumerate() {
        for t in 0..cfg.n_frames {
            let p = match cfg.scenario {
                Scenario::TissueDeformation => {
                    let (dx, dy) = dyn_.displacement(t, px, py);
                    (px + dx, py + dy)
                }
                Scenario::CameraJitter => {
                    let (jx, jy) = dyn_.jitter(t);
                    (px + jx, py + jy)
                }
                _ => (px, py),
            };
            dense_truth[pi].push(p);
        }
    }

    // Rendered frames.
    let mut frames = Vec::with_capacity(cfg.n_frames);
    for t in 0..cfg.n_frames {
        let mut frame = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64, y as f64);
                let mut v = match cfg.scenario {
                    Scenario::TissueDeformation => {
                        let (dx, dy) = dyn_.displacement(t, px, py);
                        sample_base(px - dx, py - dy)
                    }
                    Scenario::CameraJitter => {
                        let (jx, jy) = dyn_.jitter(t);
                        sample_base(px - jx, py - jy)
                    }
                    Scenario::CauterizationSmoke => {
                        // Scattering shimmer: the apparent texture under
                        // smoke is displaced in proportion to density,
                        // while the annotated point stays put.
                        let d = dyn_.smoke_density(t, px, py);
                        sample_base(px - SMOKE_SHIMMER_PX * cfg.intensity * d, py)
                    }
                    _ => base[(y + pad as usize) * pw + x + pad as usize],
                };
                match cfg.scenario {
                    Scenario::InstrumentOcclusion => {
                        if dyn_.rect_contains(t, px, py) {
                            v = 0.05;
                        }
                    }
                    Scenario::SurfaceReflection => {
                        for e in 0..2 {
                            let r2 = dyn_.ellipse_r2(e, t, px, py);
                            if r2 <= 1.0 {
                                v += 1.2 * (1.0 - r2);
                            }
                        }
                    }
                    Scenario::CauterizationSmoke => {
                        let d = dyn_.smoke_density(t, px, py);
                        // Pull toward mid-gray (contrast compression) and
                        // brighten where the blob is dense. The shimmer
                        // displacement above keeps the texture matchable
                        // but systematically misplaced.
                        v = 0.5 + (v - 0.5) * (1.0 - cfg.intensity * d) + 0.3 * d;
                    }
                    _ => {}
                }
                frame[y * w + x] = v.clamp(0.0, 1.0);
            }
        }
        frames.push(frame);
    }

    // Status labels and the sparse annotation.
    let frame_indices = annotated_frames(cfg.n_frames);
    let mut tracks = Vec::with_capacity(cfg.n_points);
    for (pi, traj) in dense_truth.iter().enumerate() {
        let mut observations = Vec::with_capacity(frame_indices.len());
        for &fi in &frame_indices {
            let t = fi as usize;
            let (px, py) = traj[t];
            let in_frame = (0.0..wf).contains(&px) && (0.0..hf).contains(&py);
            let (status, coord) = if !in_frame {
                (PointStatus::OutOfView, None)
            } else {
                match cfg.scenario {
                    Scenario::TissueDeformation => {
                        let prev = if t == 0 { traj[1] } else { traj[t - 1] };
                        let speed = ((px - prev.0).powi(2) + (py - prev.1).powi(2)).sqrt();
                        let status = if speed > PULLED_SPEED {
                            PointStatus::Pulled
                        } else {
                            PointStatus::ClearView
                        };
                        (status, Some((px, py)))
                    }
                    Scenario::InstrumentOcclusion => {
                        if dyn_.rect_contains(t, px, py) {
                            (PointStatus::InstrumentObscuration, None)
                        } else {
                            (PointStatus::ClearView, Some((px, py)))
                        }
                    }
                    Scenario::CameraJitter => (PointStatus::ClearView, Some((px, py))),
                    Scenario::SurfaceReflection => {
                        if dyn_.in_reflection(t, px, py) {
                            (PointStatus::Reflection, Some((px, py)))
                        } else {
                            (PointStatus::ClearView, Some((px, py)))
                        }
                    }
                    Scenario::CauterizationSmoke => {
                        let d = dyn_.smoke_density(t, px, py);
                        if d > SMOKE_NULL_DENSITY {
                            (PointStatus::SmokeObscuration, None)
                        } else if d > SMOKE_STATUS_DENSITY {
                            (PointStatus::SmokeObscuration, Some((px, py)))
                        } else {
                            (PointStatus::ClearView, Some((px, py)))
                        }
                    }
                    Scenario::Clean => (PointStatus::ClearView, Some((px, py))),
                }
            };
            observations.push(PointObservation {
                coord: coord.map(|(x, y)| (round3(x), round3(y))),
                status,
            });
        }
        debug_assert!(observations[0].coord.is_some(), "query point {pi} invisible at frame 0");
        tracks.push(Track {
            point_type: PointType::Tissue,
            instrument: None,
            observations,
        });
    }

    let annotation = ClipAnnotation {
        clip_id: cfg.clip_id(),
        width: cfg.width,
        height: cfg.height,
        annotation_fps: 1.0,
        scenario: cfg.scenario,
        frame_indices,
        tracks,
    };

    Ok(SynthClip {
        frames,
        annotation,
        dense_truth,
    })
}

// ---- suite splitting ---------------------------------------------------------

/// Clip configs for a suite, per-scenario counts.
pub fn suite_configs(
    seed: u64,
    counts: &std::collections::BTreeMap<Scenario, usize>,
    template: &ScenarioConfig,
) -> Vec<ScenarioConfig> {
    let mut out = Vec::new();
    for (&sc, &count) in counts {
        // Key clip seeds on the scenario's global identity so the same
        // (suite seed, scenario, index) always names the same clip, no
        // matter which subset of scenarios is requested.
        let si = Scenario::ALL.iter().position(|&s| s == sc).unwrap() as u64;
        for i in 0..count {
            let clip_seed = splitmix(splitmix(seed ^ (si + 1).wrapping_mul(0x9E37_79B9)) ^ i as u64);
            let mut cfg = template.clone();
            cfg.scenario = sc;
            cfg.seed = clip_seed;
            out.push(cfg);
        }
    }
    out
}

/// Deterministic per-scenario 4:1 train/test split. Membership is keyed by
/// the clip's derived seed position (every fifth clip of a scenario is
/// test), so it does not depend on any external ordering.
pub fn split_suite(
    seed: u64,
    counts: &std::collections::BTreeMap<Scenario, usize>,
    template: &ScenarioConfig,
) -> Result<(Vec<ScenarioConfig>, Vec<ScenarioConfig>), SynthError> {
    for (&sc, &count) in counts {
        if count > 0 && count < 5 {
            return Err(SynthError::TooFewClips {
                scenario: scenario_slug(sc),
                count,
            });
        }
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (&sc, &count) in counts {
        let single = std::collections::BTreeMap::from([(sc, count)]);
        for (i, cfg) in suite_configs(seed, &single, template).into_iter().enumerate() {
            if i % 5 == 4 {
                test.push(cfg);
            } else {
                train.push(cfg);
            }
        }
    }
    Ok((train, test))
}

// ---- frame file I/O ----------------------------------------------------------

/// Write frames as `TGFR1`, u32 LE n_frames/height/width, then row-major
/// little-endian f64 values per frame.
pub fn write_frames<W: Write>(mut out: W, frames: &[Vec<f64>], height: u32, width: u32) -> std::io::Result<()> {
    out.write_all(FRAMES_MAGIC)?;
    out.write_all(&(frames.len() as u32).to_le_bytes())?;
    out.write_all(&height.to_le_bytes())?;
    out.write_all(&width.to_le_bytes())?;
    let mut buf = Vec::with_capacity(8 * height as usize * width as usize);
    for frame in frames {
        buf.clear();
        for &v in frame {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

/// Read a frame file back: (frames, height, width).
pub fn read_frames<R: Read>(mut input: R) -> Result<(Vec<Vec<f64>>, u32, u32), SynthError> {
    let mut header = [0u8; 17];
    input
        .read_exact(&mut header)
        .map_err(|e| SynthError::BadFrames(e.to_string()))?;
    if &header[..5] != FRAMES_MAGIC {
        return Err(SynthError::BadFramesHeader);
    }
    let n = u32::from_le_bytes(header[5..9].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(header[9..13].try_into().unwrap());
    let w = u32::from_le_bytes(header[13..17].try_into().unwrap());
    let mut frames = Vec::with_capacity(n);
    let mut buf = vec![0u8; 8 * h as usize * w as usize];
    for _ in 0..n {
        input
            .read_exact(&mut buf)
            .map_err(|e| SynthError::BadFrames(e.to_string()))?;
        frames.push(
            buf.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        );
    }
    Ok((frames, h, w))
}

/// Render, serialize, and write one clip (`<id>.vlspt.json` plus
/// `<id>.frames.bin`) into `dir`. Returns the clip id.
pub fn write_clip(dir: &std::path::Path, cfg: &ScenarioConfig) -> Result<String, SynthError> {
    let clip = gen_clip(cfg)?;
    let id = clip.annotation.clip_id.clone();
    let json_path = dir.join(format!("{id}{}", crate::anno::CLIP_EXT));
    let frames_path = dir.join(format!("{id}{FRAMES_EXT}"));
    std::fs::write(json_path, serialize_clip(&clip.annotation))
        .map_err(|e| SynthError::BadFrames(e.to_string()))?;
    let file = std::fs::File::create(frames_path).map_err(|e| SynthError::BadFrames(e.to_string()))?;
    write_frames(std::io::BufWriter::new(file), &clip.frames, cfg.height, cfg.width)
        .map_err(|e| SynthError::BadFrames(e.to_string()))?;
    Ok(id)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_scenario_is_static_and_clear() {
        let mut cfg = ScenarioConfig::new(Scenario::Clean, 42);
        cfg.n_points = 1;
        let clip = gen_clip(&cfg).unwrap();
        let traj = &clip.dense_truth[0];
        assert!(traj.iter().all(|&p| p == traj[0]));
        for obs in &clip.annotation.tracks[0].observations {
            assert_eq!(obs.status, PointStatus::ClearView);
            assert!(obs.coord.is_some());
        }
    }

    #[test]
    fn occlusion_rectangle_produces_contiguous_null_run() {
        // Geometric containment oracle: a point the rectangle sweeps over
        // must be null exactly while contained, as one contiguous run.
        let mut found = false;
        for seed in 0..6 {
            let cfg = ScenarioConfig::new(Scenario::InstrumentOcclusion, seed);
            let clip = gen_clip(&cfg).unwrap();
            let dyn_ = clip_dynamics(&cfg);
            for (pi, track) in clip.annotation.tracks.iter().enumerate() {
                let nulls: Vec<bool> = track.observations.iter().map(|o| o.coord.is_none()).collect();
                for (oi, obs) in track.observations.iter().enumerate() {
                    let t = clip.annotation.frame_indices[oi] as usize;
                    let (px, py) = clip.dense_truth[pi][t];
                    let covered = dyn_.rect_contains(t, px, py);
                    assert_eq!(obs.coord.is_none(), covered, "seed {seed} point {pi} frame {t}");
                    if covered {
                        assert_eq!(obs.status, PointStatus::InstrumentObscuration);
                        found = true;
                    }
                }
                // Contiguity: the rectangle passes each static point once.
                let runs = nulls
                    .windows(2)
                    .filter(|w| w[0] != w[1])
                    .count();
                assert!(runs <= 2, "null run not contiguous: {nulls:?}");
            }
        }
        assert!(found, "no point was ever covered; occlusion fixture is inert");
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = ScenarioConfig::new(Scenario::CauterizationSmoke, 7);
        let a = gen_clip(&cfg).unwrap();
        let b = gen_clip(&cfg).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.dense_truth, b.dense_truth);
        assert_eq!(serialize_clip(&a.annotation), serialize_clip(&b.annotation));
    }

    #[test]
    fn frames_stay_in_unit_interval() {
        for sc in Scenario::ALL {
            let mut cfg = ScenarioConfig::new(sc, 11);
            cfg.n_frames = 6;
            let clip = gen_clip(&cfg).unwrap();
            for frame in &clip.frames {
                assert!(frame.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn trajectories_never_teleport() {
        for sc in Scenario::ALL {
            let cfg = ScenarioConfig::new(sc, 3);
            let clip = gen_clip(&cfg).unwrap();
            let bound = cfg.intensity * 16.0 + cfg.intensity * 8.0;
            for traj in &clip.dense_truth {
                for pair in traj.windows(2) {
                    let d = ((pair[1].0 - pair[0].0).powi(2) + (pair[1].1 - pair[0].1).powi(2)).sqrt();
                    assert!(d <= bound, "{sc:?} step {d} exceeds {bound}");
                }
            }
        }
    }

    #[test]
    fn annotated_coords_are_rounded_dense_truth() {
        let cfg = ScenarioConfig::new(Scenario::TissueDeformation, 5);
        let clip = gen_clip(&cfg).unwrap();
        for (pi, track) in clip.annotation.tracks.iter().enumerate() {
            for (oi, obs) in track.observations.iter().enumerate() {
                if let Some((x, y)) = obs.coord {
                    let t = clip.annotation.frame_indices[oi] as usize;
                    let (dx, dy) = clip.dense_truth[pi][t];
                    assert_eq!(x, round3(dx));
                    assert_eq!(y, round3(dy));
                }
            }
        }
    }

    #[test]
    fn every_null_coord_has_an_occluding_cause() {
        for sc in [Scenario::InstrumentOcclusion, Scenario::CauterizationSmoke, Scenario::CameraJitter] {
            for seed in 0..4 {
                let cfg = ScenarioConfig::new(sc, seed);
                let clip = gen_clip(&cfg).unwrap();
                let dyn_ = clip_dynamics(&cfg);
                for (pi, track) in clip.annotation.tracks.iter().enumerate() {
                    for (oi, obs) in track.observations.iter().enumerate() {
                        if obs.coord.is_some() {
                            continue;
                        }
                        let t = clip.annotation.frame_indices[oi] as usize;
                        let (px, py) = clip.dense_truth[pi][t];
                        let out_of_frame = !(0.0..cfg.width as f64).contains(&px)
                            || !(0.0..cfg.height as f64).contains(&py);
                        let cause = out_of_frame
                            || dyn_.rect_contains(t, px, py)
                            || dyn_.smoke_density(t, px, py) > SMOKE_NULL_DENSITY;
                        assert!(cause, "{sc:?} null at point {pi} frame {t} has no cause");
                    }
                }
            }
        }
    }

    #[test]
    fn smoke_scenario_annotates_visible_obscured_points() {
        // Dataset convention: smoke-obscured points keep their coordinate
        // until the density is nearly opaque.
        let mut with_coord = 0;
        for seed in 0..8 {
            let cfg = ScenarioConfig::new(Scenario::CauterizationSmoke, seed);
            let clip = gen_clip(&cfg).unwrap();
            for track in &clip.annotation.tracks {
                for obs in &track.observations {
                    if obs.status == PointStatus::SmokeObscuration && obs.coord.is_some() {
                        with_coord += 1;
                    }
                }
            }
        }
        assert!(with_coord > 0, "no coordinate-retaining smoke observations generated");
    }

    #[test]
    fn generated_clips_validate_and_round_trip() {
        for sc in Scenario::ALL {
            let cfg = ScenarioConfig::new(sc, 21);
            let clip = gen_clip(&cfg).unwrap();
            assert!(crate::anno::validate_clip(&clip.annotation).is_empty());
            let bytes = serialize_clip(&clip.annotation);
            let reparsed = crate::anno::parse_clip(&bytes).unwrap();
            assert_eq!(serialize_clip(&reparsed), bytes);
        }
    }

    fn uniform_counts(scenarios: &[Scenario], count: usize) -> std::collections::BTreeMap<Scenario, usize> {
        scenarios.iter().map(|&s| (s, count)).collect()
    }

    #[test]
    fn split_is_four_to_one_and_disjoint() {
        let template = ScenarioConfig::new(Scenario::Clean, 0);
        let (train, test) =
            split_suite(99, &uniform_counts(&Scenario::CHALLENGES, 10), &template).unwrap();
        assert_eq!(train.len(), 40);
        assert_eq!(test.len(), 10);
        for sc in Scenario::CHALLENGES {
            assert_eq!(train.iter().filter(|c| c.scenario == sc).count(), 8);
            assert_eq!(test.iter().filter(|c| c.scenario == sc).count(), 2);
        }
        let train_seeds: std::collections::BTreeSet<u64> = train.iter().map(|c| c.seed).collect();
        let test_seeds: std::collections::BTreeSet<u64> = test.iter().map(|c| c.seed).collect();
        assert!(train_seeds.is_disjoint(&test_seeds));
        assert_eq!(train_seeds.len(), 40);
        // Determinism.
        let (train2, test2) = split_suite(99, &uniform_counts(&Scenario::CHALLENGES, 10), &template).unwrap();
        assert_eq!(train, train2);
        assert_eq!(test, test2);
    }

    #[test]
    fn split_rejects_tiny_suites() {
        let template = ScenarioConfig::new(Scenario::Clean, 0);
        assert!(matches!(
            split_suite(1, &uniform_counts(&[Scenario::Clean], 4), &template),
            Err(SynthError::TooFewClips { .. })
        ));
    }

    #[test]
    fn frame_file_round_trips() {
        let cfg = ScenarioConfig {
            n_frames: 3,
            n_points: 1,
            width: 64,
            height: 64,
            ..ScenarioConfig::new(Scenario::Clean, 1)
        };
        let clip = gen_clip(&cfg).unwrap();
        let mut buf = Vec::new();
        write_frames(&mut buf, &clip.frames, 64, 64).unwrap();
        let (frames, h, w) = read_frames(buf.as_slice()).unwrap();
        assert_eq!((h, w), (64, 64));
        assert_eq!(frames, clip.frames);
        assert!(matches!(read_frames(&b"WRONG"[..]), Err(_)));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ScenarioConfig::new(Scenario::Clean, 1);
        cfg.n_frames = 2;
        assert!(matches!(gen_clip(&cfg), Err(SynthError::InvalidConfig(_))));
        let mut cfg = ScenarioConfig::new(Scenario::Clean, 1);
        cfg.width = 100;
        assert!(matches!(gen_clip(&cfg), Err(SynthError::InvalidConfig(_))));
        let mut cfg = ScenarioConfig::new(Scenario::Clean, 1);
        cfg.intensity = 1.5;
        assert!(matches!(gen_clip(&cfg), Err(SynthError::InvalidConfig(_))));
    }

    #[test]
    fn non_square_fixture_generates() {
        let cfg = ScenarioConfig {
            width: 512,
            height: 384,
            n_frames: 6,
            ..ScenarioConfig::new(Scenario::CameraJitter, 2)
        };
        let clip = gen_clip(&cfg).unwrap();
        assert_eq!(clip.annotation.width, 512);
        assert_eq!(clip.annotation.height, 384);
        assert!(crate::anno::validate_clip(&clip.annotation).is_empty());
    }
}
