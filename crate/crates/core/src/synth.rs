//! Synthetic wide-angle world.
//!
//! Scenes are authored in rectified (stereographic) coordinates. The
//! perspective rendering of a rectified point `q` at radius `r_s` from the
//! principal point lies at radius `r_p = f tan(2 atan(r_s / 2f))`, which is
//! exactly `q + F(q)` for the backward correction flow `F` returned by
//! [`stereographic_correction_flow`]. Rendering a distorted frame therefore
//! gives a known ground-truth rectification flow.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{warp_backward, BorderPolicy, Direction, FlowField, Frame, Mask, Raster, VectorField};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub focal_px: f64,
    pub principal_point: (f64, f64),
    pub width: usize,
    pub height: usize,
}

impl CameraSpec {
    /// Camera with the principal point at the frame center.
    pub fn centered(width: usize, height: usize, focal_px: f64) -> Self {
        Self {
            focal_px,
            principal_point: ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0),
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Dimension {
                height: self.height,
                width: self.width,
            });
        }
        if !(self.focal_px.is_finite() && self.focal_px > 0.0) {
            return Err(Error::Input("focal length must be positive".into()));
        }
        let (cx, cy) = self.principal_point;
        if !(cx >= 0.0 && cy >= 0.0 && cx <= (self.width - 1) as f64 && cy <= (self.height - 1) as f64) {
            return Err(Error::Input("principal point lies outside the frame".into()));
        }
        Ok(())
    }

    /// Perspective position of a rectified point.
    pub fn to_distorted(&self, q: (f64, f64)) -> (f64, f64) {
        let (cx, cy) = self.principal_point;
        let (dx, dy) = (q.0 - cx, q.1 - cy);
        let rs = dx.hypot(dy);
        if rs == 0.0 {
            return q;
        }
        let k = perspective_radius(rs, self.focal_px) / rs;
        (cx + k * dx, cy + k * dy)
    }

    /// Rectified position of a perspective point.
    pub fn to_rectified(&self, d: (f64, f64)) -> (f64, f64) {
        let (cx, cy) = self.principal_point;
        let (dx, dy) = (d.0 - cx, d.1 - cy);
        let rp = dx.hypot(dy);
        if rp == 0.0 {
            return d;
        }
        let k = stereographic_radius(rp, self.focal_px) / rp;
        (cx + k * dx, cy + k * dy)
    }

    /// Inside the pixel-center box `[0, w-1] x [0, h-1]`.
    pub fn in_frame(&self, p: (f64, f64)) -> bool {
        p.0 >= 0.0 && p.1 >= 0.0 && p.0 <= (self.width - 1) as f64 && p.1 <= (self.height - 1) as f64
    }
}

/// `f tan(theta)` with `theta = 2 atan(r_s / 2f)`.
pub fn perspective_radius(rs: f64, focal: f64) -> f64 {
    focal * (2.0 * (rs / (2.0 * focal)).atan()).tan()
}

/// `2f tan(theta / 2)` with `theta = atan(r_p / f)`.
pub fn stereographic_radius(rp: f64, focal: f64) -> f64 {
    2.0 * focal * ((rp / focal).atan() / 2.0).tan()
}

/// Backward flow from rectified (stereographic) pixels to source
/// (perspective) pixels: `F(p) = (r_p / r_s - 1)(p - c)`.
pub fn stereographic_correction_flow(cam: &CameraSpec) -> Result<FlowField> {
    cam.validate()?;
    let (cx, cy) = cam.principal_point;
    let corners = [
        (0.0, 0.0),
        ((cam.width - 1) as f64, 0.0),
        (0.0, (cam.height - 1) as f64),
        ((cam.width - 1) as f64, (cam.height - 1) as f64),
    ];
    let max_rs = corners.iter().map(|&(x, y)| (x - cx).hypot(y - cy)).fold(0.0, f64::max);
    // theta reaches 90 degrees at r_s = 2f
    if max_rs >= 2.0 * cam.focal_px {
        return Err(Error::Domain(format!(
            "view angle reaches 90 degrees: radius {max_rs:.2} px with focal length {} px",
            cam.focal_px
        )));
    }
    FlowField::from_fn(cam.height, cam.width, Direction::Backward, |x, y| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        let rs = dx.hypot(dy);
        if rs == 0.0 {
            return (0.0, 0.0);
        }
        let k = perspective_radius(rs, cam.focal_px) / rs - 1.0;
        (k * dx, k * dy)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaceSpec {
    pub center: (f64, f64),
    /// Semi-axes in pixels.
    pub axes: (f64, f64),
    /// Rotation of the first axis, radians.
    pub orientation: f64,
    pub landmarks: Vec<(f64, f64)>,
}

/// Scene geometry in rectified coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub line_segments: Vec<((f64, f64), (f64, f64))>,
    pub faces: Vec<FaceSpec>,
    pub seed: u64,
}

const LINE_HALF_WIDTH: f64 = 0.9;
const LANDMARK_RADIUS: f64 = 1.2;
const LINE_SAMPLES: usize = 17;
const TEXTURE_BLOBS: usize = 14;

impl SceneSpec {
    /// Lines near the frame periphery, where wide-angle stretching is
    /// strongest, and one off-center face with 17 landmarks.
    pub fn generate(cam: &CameraSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (cam.width as f64, cam.height as f64);
        let mut jitter = |v: f64, scale: f64| v + scale * rng.random_range(-0.02..0.02);
        let line_segments = vec![
            (
                (jitter(0.08 * w, w), jitter(0.14 * h, h)),
                (jitter(0.92 * w, w), jitter(0.14 * h, h)),
            ),
            (
                (jitter(0.08 * w, w), jitter(0.86 * h, h)),
                (jitter(0.92 * w, w), jitter(0.86 * h, h)),
            ),
            (
                (jitter(0.12 * w, w), jitter(0.22 * h, h)),
                (jitter(0.12 * w, w), jitter(0.78 * h, h)),
            ),
            (
                (jitter(0.88 * w, w), jitter(0.22 * h, h)),
                (jitter(0.88 * w, w), jitter(0.78 * h, h)),
            ),
            (
                (jitter(0.2 * w, w), jitter(0.7 * h, h)),
                (jitter(0.45 * w, w), jitter(0.3 * h, h)),
            ),
        ];
        let center = (jitter(0.64 * w, w), jitter(0.46 * h, h));
        let axes = (0.11 * w, 0.15 * h);
        let orientation = rng.random_range(-0.15..0.15);
        let (s, c) = f64::sin_cos(orientation);
        let place = |a: f64, b: f64| (center.0 + c * a - s * b, center.1 + s * a + c * b);
        let mut landmarks: Vec<(f64, f64)> = (0..12)
            .map(|k| {
                let t = k as f64 / 12.0 * std::f64::consts::TAU;
                place(0.92 * axes.0 * t.cos(), 0.92 * axes.1 * t.sin())
            })
            .collect();
        landmarks.extend([
            place(-0.4 * axes.0, -0.3 * axes.1),
            place(0.4 * axes.0, -0.3 * axes.1),
            place(0.0, 0.1 * axes.1),
            place(-0.35 * axes.0, 0.5 * axes.1),
            place(0.35 * axes.0, 0.5 * axes.1),
        ]);
        Self {
            line_segments,
            faces: vec![FaceSpec {
                center,
                axes,
                orientation,
                landmarks,
            }],
            seed,
        }
    }
}

/// Annotation in rectified and distorted coordinates. `outside` is set when
/// any point falls outside the frame in either space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    pub rectified: Vec<(f64, f64)>,
    pub distorted: Vec<(f64, f64)>,
    pub outside: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Annotations {
    pub lines: Vec<PointSet>,
    pub landmarks: Vec<PointSet>,
}

impl Annotations {
    /// One record per line or landmark set:
    /// `<kind> <id> <ok|outside> <space> x0 y0 x1 y1 ...`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (kind, sets) in [("line", &self.lines), ("landmarks", &self.landmarks)] {
            for (id, set) in sets.iter().enumerate() {
                let flag = if set.outside { "outside" } else { "ok" };
                for (space, pts) in [("rectified", &set.rectified), ("distorted", &set.distorted)] {
                    out.push_str(&format!("{kind} {id} {flag} {space}"));
                    for (x, y) in pts {
                        out.push_str(&format!(" {x:.6} {y:.6}"));
                    }
                    out.push('\n');
                }
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut ann = Annotations::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: &str| Error::Format(format!("annotation line {}: {msg}", lineno + 1));
            let mut tok = line.split_whitespace();
            let kind = tok.next().ok_or_else(|| bad("empty record"))?;
            let id: usize = tok.next().and_then(|t| t.parse().ok()).ok_or_else(|| bad("bad id"))?;
            let outside = match tok.next() {
                Some("ok") => false,
                Some("outside") => true,
                _ => return Err(bad("flag must be ok or outside")),
            };
            let space = tok.next().ok_or_else(|| bad("missing space"))?;
            let nums: Vec<f64> = tok
                .map(|t| t.parse::<f64>().map_err(|_| bad("bad coordinate")))
                .collect::<Result<_>>()?;
            if !nums.len().is_multiple_of(2) {
                return Err(bad("odd number of coordinates"));
            }
            let pts: Vec<(f64, f64)> = nums.chunks(2).map(|c| (c[0], c[1])).collect();
            let sets = match kind {
                "line" => &mut ann.lines,
                "landmarks" => &mut ann.landmarks,
                _ => return Err(bad("unknown record kind")),
            };
            if sets.len() <= id {
                sets.resize(
                    id + 1,
                    PointSet {
                        rectified: vec![],
                        distorted: vec![],
                        outside: false,
                    },
                );
            }
            let set = &mut sets[id];
            set.outside |= outside;
            match space {
                "rectified" => set.rectified = pts,
                "distorted" => set.distorted = pts,
                _ => return Err(bad("space must be rectified or distorted")),
            }
        }
        Ok(ann)
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (abx, aby) = (b.0 - a.0, b.1 - a.1);
    let len2 = abx * abx + aby * aby;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * abx + (p.1 - a.1) * aby) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p.0 - a.0 - t * abx).hypot(p.1 - a.1 - t * aby)
}

struct Blob {
    center: (f64, f64),
    sigma: f64,
    color: [f64; 3],
}

fn scene_color(spec: &SceneSpec, blobs: &[Blob], q: (f64, f64)) -> [f64; 3] {
    let mut c = [0.42, 0.46, 0.5];
    for b in blobs {
        let d2 = (q.0 - b.center.0).powi(2) + (q.1 - b.center.1).powi(2);
        let g = (-d2 / (2.0 * b.sigma * b.sigma)).exp();
        for (ck, bk) in c.iter_mut().zip(b.color) {
            *ck += g * bk;
        }
    }
    for face in &spec.faces {
        let (s, co) = face.orientation.sin_cos();
        let (dx, dy) = (q.0 - face.center.0, q.1 - face.center.1);
        let a = (co * dx + s * dy) / face.axes.0;
        let b = (-s * dx + co * dy) / face.axes.1;
        if a * a + b * b <= 1.0 {
            c = [0.86, 0.68, 0.58];
            for l in &face.landmarks {
                if (q.0 - l.0).hypot(q.1 - l.1) <= LANDMARK_RADIUS {
                    c = [0.32, 0.16, 0.12];
                }
            }
        }
    }
    for &(a, b) in &spec.line_segments {
        if segment_distance(q, a, b) <= LINE_HALF_WIDTH {
            c = [0.08, 0.08, 0.12];
        }
    }
    c
}

/// Renders the scene with 4x4 supersampling. With `distorted`, each
/// subsample is mapped to rectified space before shading, so the frame is the
/// perspective view of the rectified scene.
pub fn render_scene(spec: &SceneSpec, cam: &CameraSpec, distorted: bool) -> Result<(Frame, Annotations)> {
    cam.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_b10b);
    let (w, h) = (cam.width as f64, cam.height as f64);
    let blobs: Vec<Blob> = (0..TEXTURE_BLOBS)
        .map(|_| Blob {
            center: (rng.random_range(0.0..w), rng.random_range(0.0..h)),
            sigma: rng.random_range(0.04..0.12) * w.min(h),
            color: std::array::from_fn(|_| rng.random_range(-0.25..0.25)),
        })
        .collect();

    const OFFSETS: [f64; 4] = [-0.375, -0.125, 0.125, 0.375];
    let mut planes = vec![vec![0.0; cam.width * cam.height]; 3];
    for y in 0..cam.height {
        for x in 0..cam.width {
            let mut acc = [0.0; 3];
            for oy in OFFSETS {
                for ox in OFFSETS {
                    let p = (x as f64 + ox, y as f64 + oy);
                    let q = if distorted { cam.to_rectified(p) } else { p };
                    let c = scene_color(spec, &blobs, q);
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            for k in 0..3 {
                planes[k][y * cam.width + x] = acc[k] / 16.0;
            }
        }
    }
    let frame = Frame::new(
        planes
            .into_iter()
            .map(|p| Raster::new(cam.height, cam.width, p))
            .collect::<Result<_>>()?,
    )?;

    let annotate = |rectified: Vec<(f64, f64)>| {
        let distorted: Vec<_> = rectified.iter().map(|&q| cam.to_distorted(q)).collect();
        let outside = !rectified.iter().chain(&distorted).all(|&p| cam.in_frame(p));
        PointSet {
            rectified,
            distorted,
            outside,
        }
    };
    let lines = spec
        .line_segments
        .iter()
        .map(|&(a, b)| {
            annotate(
                (0..LINE_SAMPLES)
                    .map(|k| {
                        let t = k as f64 / (LINE_SAMPLES - 1) as f64;
                        (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1))
                    })
                    .collect(),
            )
        })
        .collect();
    let landmarks = spec.faces.iter().map(|f| annotate(f.landmarks.clone())).collect();
    Ok((frame, Annotations { lines, landmarks }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JitterProfile {
    WhiteNoise,
    Sinusoidal { period_frames: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JitterSpec {
    /// Peak translation in pixels.
    pub amplitude: f64,
    pub profile: JitterProfile,
    pub seed: u64,
    /// Adds rotation about the frame center of at most `amplitude / 50` rad.
    #[serde(default)]
    pub rotation: bool,
}

/// Per-frame rigid jitter: frame `t` is moved by `x -> c + R(angle)(x - c) + offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct JitterSignal {
    pub offsets: Vec<(f64, f64)>,
    pub angles: Vec<f64>,
}

impl JitterSignal {
    pub fn generate(spec: &JitterSpec, frames: usize) -> Result<Self> {
        if !(spec.amplitude.is_finite() && spec.amplitude >= 0.0) {
            return Err(Error::Input("jitter amplitude must be >= 0".into()));
        }
        let a = spec.amplitude;
        let max_angle = if spec.rotation { a / 50.0 } else { 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut offsets = Vec::with_capacity(frames);
        let mut angles = Vec::with_capacity(frames);
        for t in 0..frames {
            match spec.profile {
                JitterProfile::WhiteNoise => {
                    let ox = a * rng.random_range(-1.0..=1.0);
                    let oy = a * rng.random_range(-1.0..=1.0);
                    let s: f64 = rng.random_range(-1.0..=1.0);
                    offsets.push((ox, oy));
                    angles.push(max_angle * s);
                }
                JitterProfile::Sinusoidal { period_frames } => {
                    if period_frames.is_nan() || period_frames <= 0.0 {
                        return Err(Error::Input("jitter period must be positive".into()));
                    }
                    let phase = std::f64::consts::TAU * t as f64 / period_frames;
                    offsets.push((a * phase.sin(), a * phase.cos()));
                    angles.push(max_angle * (phase + std::f64::consts::FRAC_PI_4).sin());
                }
            }
        }
        Ok(Self { offsets, angles })
    }

    fn apply(&self, t: usize, center: (f64, f64), p: (f64, f64)) -> (f64, f64) {
        let (s, c) = self.angles[t].sin_cos();
        let (dx, dy) = (p.0 - center.0, p.1 - center.1);
        (
            center.0 + c * dx - s * dy + self.offsets[t].0,
            center.1 + s * dx + c * dy + self.offsets[t].1,
        )
    }

    fn invert(&self, t: usize, center: (f64, f64), p: (f64, f64)) -> (f64, f64) {
        let (s, c) = self.angles[t].sin_cos();
        let (dx, dy) = (p.0 - self.offsets[t].0 - center.0, p.1 - self.offsets[t].1 - center.1);
        (center.0 + c * dx + s * dy, center.1 - s * dx + c * dy)
    }

    /// Where content at `p` of the un-jittered frame `t` appears after jitter.
    pub fn jitter_point(&self, t: usize, center: (f64, f64), p: (f64, f64)) -> (f64, f64) {
        self.apply(t, center, p)
    }
}

/// Jittered frames plus the ground-truth forward flows between them.
#[derive(Debug, Clone)]
pub struct JitteredSequence {
    pub frames: Vec<Frame>,
    /// `flows[t]` maps frame `t` to `t+1`, tagged `Forward`.
    pub flows: Vec<FlowField>,
    pub signal: JitterSignal,
}

/// Moves each frame by the jitter signal and returns the exact forward flows
/// between consecutive jittered frames.
pub fn apply_jitter(frames: &[Frame], spec: &JitterSpec) -> Result<JitteredSequence> {
    if frames.is_empty() {
        return Err(Error::Input("jitter needs a non-empty sequence".into()));
    }
    let signal = JitterSignal::generate(spec, frames.len())?;
    apply_signal(frames, signal)
}

/// [`apply_jitter`] with an explicit per-frame signal.
pub fn apply_signal(frames: &[Frame], signal: JitterSignal) -> Result<JitteredSequence> {
    if frames.len() < 2 {
        return Err(Error::Length("jitter needs at least 2 frames".into()));
    }
    if signal.offsets.len() != frames.len() || signal.angles.len() != frames.len() {
        return Err(Error::Length("jitter signal length differs from frame count".into()));
    }
    let (h, w) = frames[0].dims();
    if let Some(f) = frames.iter().find(|f| f.dims() != (h, w)) {
        return Err(Error::shape((h, w), f.dims()));
    }
    let center = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let jittered = frames
        .iter()
        .enumerate()
        .map(|(t, frame)| {
            let back = VectorField::from_fn(h, w, |x, y| {
                let p = (x as f64, y as f64);
                let src = signal.invert(t, center, p);
                (src.0 - p.0, src.1 - p.1)
            })?;
            warp_backward(frame, &FlowField::new(back, Direction::Backward), BorderPolicy::Clamp)
        })
        .collect::<Result<Vec<_>>>()?;
    let flows = (0..frames.len() - 1)
        .map(|t| {
            FlowField::from_fn(h, w, Direction::Forward, |x, y| {
                let p = (x as f64, y as f64);
                let q = signal.apply(t + 1, center, signal.invert(t, center, p));
                (q.0 - p.0, q.1 - p.1)
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(JitteredSequence {
        frames: jittered,
        flows,
        signal,
    })
}

/// Which branch of [`face_mask`] produced the mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskShape {
    Ellipse,
    /// Landmarks were collinear or coincident.
    RectangleFallback,
}

/// Filled ellipse inscribed in the landmark bounding box dilated by 10%.
pub fn face_mask(landmarks: &[(f64, f64)], height: usize, width: usize) -> Result<(Mask, MaskShape)> {
    if landmarks.len() < 3 {
        return Err(Error::Input(format!(
            "face mask needs at least 3 landmarks, got {}",
            landmarks.len()
        )));
    }
    let n = landmarks.len() as f64;
    let (mx, my) = landmarks
        .iter()
        .fold((0.0, 0.0), |(a, b), p| (a + p.0 / n, b + p.1 / n));
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in landmarks {
        sxx += (p.0 - mx).powi(2) / n;
        syy += (p.1 - my).powi(2) / n;
        sxy += (p.0 - mx) * (p.1 - my) / n;
    }
    // smaller eigenvalue of the landmark covariance
    let minor = (sxx + syy) / 2.0 - (((sxx - syy) / 2.0).powi(2) + sxy * sxy).sqrt();
    let degenerate = minor.max(0.0).sqrt() < 0.5;

    let (x0, x1, y0, y1) = landmarks.iter().fold(
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
        |(a, b, c, d), p| (a.min(p.0), b.max(p.0), c.min(p.1), d.max(p.1)),
    );
    let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
    let ax = 1.1 * (x1 - x0) / 2.0;
    let ay = 1.1 * (y1 - y0) / 2.0;
    if degenerate {
        let (ax, ay) = (ax.max(0.5), ay.max(0.5));
        let mask = Mask::from_fn(height, width, |x, y| {
            (x as f64 - cx).abs() <= ax && (y as f64 - cy).abs() <= ay
        })?;
        return Ok((mask, MaskShape::RectangleFallback));
    }
    let mask = Mask::from_fn(height, width, |x, y| {
        let a = (x as f64 - cx) / ax;
        let b = (y as f64 - cy) / ay;
        a * a + b * b <= 1.0
    })?;
    Ok((mask, MaskShape::Ellipse))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::invert_point;

    #[test]
    fn flow_examples() {
        let cam = CameraSpec::centered(101, 101, 100.0);
        let flow = stereographic_correction_flow(&cam).unwrap();
        assert_eq!(flow.get(50, 50), (0.0, 0.0));

        // radial magnitude along the center row grows outward
        let mags: Vec<f64> = (50..101).map(|x| flow.get(x, 50).0.abs()).collect();
        assert!(mags.windows(2).all(|w| w[1] >= w[0]));

        // r_s = 2 f tan(22.5 deg) maps to theta = 45 deg and r_p = f
        let rs = 2.0 * 100.0 * (22.5f64).to_radians().tan();
        assert!((rs - 82.84).abs() < 0.01);
        let rp = perspective_radius(rs, 100.0);
        assert!((rp - 100.0).abs() < 1e-9);
        assert!((rp - rs - 17.157).abs() < 1e-3);
    }

    #[test]
    fn flow_domain_error() {
        let cam = CameraSpec::centered(401, 401, 100.0);
        assert!(matches!(stereographic_correction_flow(&cam), Err(Error::Domain(_))));
    }

    #[test]
    fn radius_maps_are_inverse() {
        for &rs in &[0.5, 10.0, 60.0, 150.0] {
            let rp = perspective_radius(rs, 90.0);
            assert!((stereographic_radius(rp, 90.0) - rs).abs() < 1e-9);
            assert!(rp >= rs);
        }
    }

    #[test]
    fn flow_pair_consistency() {
        let cam = CameraSpec::centered(96, 80, 70.0);
        let fwd_corr = stereographic_correction_flow(&cam).unwrap();
        let inv = crate::field::invert_backward(&fwd_corr, BorderPolicy::Clamp).unwrap();
        let composed = crate::field::compose_displaced(&inv, fwd_corr.vectors(), BorderPolicy::Clamp).unwrap();
        let resid = composed.vectors().add(fwd_corr.vectors()).unwrap();
        let (mx, my) = (96 / 10, 80 / 10);
        for y in my..80 - my {
            for x in mx..96 - mx {
                let (a, b) = resid.get(x, y);
                assert!(a.hypot(b) < 0.05, "({x},{y}) -> {}", a.hypot(b));
            }
        }
    }

    #[test]
    fn undistorted_lines_are_collinear() {
        let cam = CameraSpec::centered(64, 48, 50.0);
        let spec = SceneSpec::generate(&cam, 4);
        let (_, ann) = render_scene(&spec, &cam, false).unwrap();
        for l in &ann.lines {
            let (a, b) = (l.rectified[0], *l.rectified.last().unwrap());
            for p in &l.rectified {
                let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
                assert!(cross.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn landmarks_round_trip_through_flow() {
        let cam = CameraSpec::centered(128, 128, 90.0);
        let spec = SceneSpec::generate(&cam, 9);
        let (_, ann) = render_scene(&spec, &cam, true).unwrap();
        let flow = stereographic_correction_flow(&cam).unwrap();
        for set in &ann.landmarks {
            for (r, d) in set.rectified.iter().zip(&set.distorted) {
                let c = invert_point(&flow, *d, BorderPolicy::Clamp);
                assert!((c.0 - r.0).hypot(c.1 - r.1) < 0.1);
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let cam = CameraSpec::centered(40, 32, 40.0);
        let spec = SceneSpec::generate(&cam, 77);
        let (a, ann_a) = render_scene(&spec, &cam, true).unwrap();
        let (b, ann_b) = render_scene(&spec, &cam, true).unwrap();
        assert_eq!(a, b);
        assert_eq!(ann_a, ann_b);
        let other = SceneSpec { seed: 78, ..spec };
        assert_ne!(render_scene(&other, &cam, true).unwrap().0, a);
    }

    #[test]
    fn annotations_text_round_trip() {
        let cam = CameraSpec::centered(64, 64, 45.0);
        let (_, ann) = render_scene(&SceneSpec::generate(&cam, 1), &cam, true).unwrap();
        let parsed = Annotations::from_text(&ann.to_text()).unwrap();
        assert_eq!(parsed.lines.len(), ann.lines.len());
        for (a, b) in parsed.lines.iter().zip(&ann.lines) {
            assert_eq!(a.outside, b.outside);
            for (p, q) in a.distorted.iter().zip(&b.distorted) {
                assert!((p.0 - q.0).abs() < 1e-6 && (p.1 - q.1).abs() < 1e-6);
            }
        }
        assert!(Annotations::from_text("line x ok rectified 1 2").is_err());
    }

    #[test]
    fn outside_geometry_is_flagged() {
        let cam = CameraSpec::centered(64, 64, 45.0);
        let spec = SceneSpec {
            line_segments: vec![((1.0, 1.0), (62.0, 1.0)), ((20.0, 30.0), (40.0, 30.0))],
            faces: vec![],
            seed: 0,
        };
        let (_, ann) = render_scene(&spec, &cam, true).unwrap();
        assert!(ann.lines[0].outside);
        assert!(!ann.lines[1].outside);
    }

    fn still_frames(n: usize) -> Vec<Frame> {
        let f = Frame::gray_from_fn(24, 24, |x, y| {
            0.5 + 0.3 * ((x as f64) * 0.4).sin() * ((y as f64) * 0.3).cos()
        })
        .unwrap();
        vec![f; n]
    }

    #[test]
    fn zero_amplitude_is_identity() {
        let frames = still_frames(4);
        let spec = JitterSpec {
            amplitude: 0.0,
            profile: JitterProfile::WhiteNoise,
            seed: 1,
            rotation: true,
        };
        let out = apply_jitter(&frames, &spec).unwrap();
        assert_eq!(out.frames, frames);
        assert!(out.flows.iter().all(|f| f.vectors().max_norm() == 0.0));
    }

    #[test]
    fn white_noise_is_reproducible() {
        let spec = JitterSpec {
            amplitude: 3.0,
            profile: JitterProfile::WhiteNoise,
            seed: 42,
            rotation: false,
        };
        let a = JitterSignal::generate(&spec, 20).unwrap();
        let b = JitterSignal::generate(&spec, 20).unwrap();
        assert_eq!(a, b);
        assert!(a.offsets.iter().all(|o| o.0.abs() <= 3.0 && o.1.abs() <= 3.0));
    }

    #[test]
    fn sinusoid_offsets_measured_from_flows() {
        let spec = JitterSpec {
            amplitude: 2.0,
            profile: JitterProfile::Sinusoidal { period_frames: 16.0 },
            seed: 0,
            rotation: false,
        };
        let out = apply_jitter(&still_frames(20), &spec).unwrap();
        let mut x = 0.0;
        for t in 0..20 {
            let expected = 2.0 * (std::f64::consts::TAU * t as f64 / 16.0).sin();
            assert!((x - expected).abs() < 0.01, "t={t}: {x} vs {expected}");
            if t < 19 {
                x += out.flows[t].vectors().interior_mean(0).0;
            }
        }
    }

    #[test]
    fn rotation_is_bounded() {
        let spec = JitterSpec {
            amplitude: 2.5,
            profile: JitterProfile::WhiteNoise,
            seed: 3,
            rotation: true,
        };
        let s = JitterSignal::generate(&spec, 50).unwrap();
        assert!(s.angles.iter().all(|a| a.abs() <= 2.5 / 50.0));
        assert!(s.angles.iter().any(|a| a.abs() > 0.0));
    }

    #[test]
    fn jitter_errors() {
        let spec = JitterSpec {
            amplitude: 1.0,
            profile: JitterProfile::WhiteNoise,
            seed: 0,
            rotation: false,
        };
        assert!(matches!(apply_jitter(&[], &spec), Err(Error::Input(_))));
        assert!(apply_jitter(&still_frames(1), &spec).is_err());
    }

    #[test]
    fn circle_mask_area() {
        let pts: Vec<(f64, f64)> = (0..36)
            .map(|k| {
                let t = k as f64 * std::f64::consts::TAU / 36.0;
                (32.0 + 10.0 * t.cos(), 32.0 + 10.0 * t.sin())
            })
            .collect();
        let (mask, shape) = face_mask(&pts, 64, 64).unwrap();
        assert_eq!(shape, MaskShape::Ellipse);
        let expected = std::f64::consts::PI * 121.0;
        assert!(((mask.area() as f64) - expected).abs() / expected < 0.05);
        assert!(mask.data().iter().all(|&v| v <= 1));
    }

    #[test]
    fn degenerate_mask_falls_back() {
        let (mask, shape) = face_mask(&[(10.0, 10.0), (10.01, 10.0), (10.0, 10.02)], 20, 20).unwrap();
        assert_eq!(shape, MaskShape::RectangleFallback);
        assert!(mask.area() >= 1);
        let (_, shape) = face_mask(&[(2.0, 2.0), (8.0, 8.0), (14.0, 14.0)], 20, 20).unwrap();
        assert_eq!(shape, MaskShape::RectangleFallback);
        assert!(face_mask(&[(1.0, 1.0), (2.0, 2.0)], 5, 5).is_err());
    }
}
