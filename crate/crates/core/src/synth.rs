//! Analytic road scenes and noiseless camera views with exact ground truth.
//!
//! A scene is a height field `z(x, y)` with closed-form color and class
//! functions. Views are rendered by exact ray–surface intersection and
//! supersampled for antialiasing; labels and depth come from the pixel
//! center ray.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bev::{BevGrid, BevMeta, COVERAGE_THRESHOLD, META_FILE, RGB_FILE, SEMANTIC_FILE, TOP_MARGIN};
use crate::error::{Error, Result};
use crate::image::{LabelMap, Raster, RgbImage};
use crate::io::{self, ClassTable};
use crate::rng::substream;
use crate::scene::{Camera, Frame, Intrinsics, Pose, Ray, Split, Vec3};

pub const CLASS_NAMES: [&str; 9] = [
    "road",
    "lane_marking",
    "sidewalk",
    "curb",
    "vehicle",
    "pedestrian",
    "rider",
    "bicycle",
    "sky",
];
pub const PALETTE: [[u8; 3]; 9] = [
    [128, 64, 128],
    [255, 255, 255],
    [244, 35, 232],
    [196, 196, 196],
    [0, 0, 142],
    [220, 20, 60],
    [255, 0, 0],
    [119, 11, 32],
    [70, 130, 180],
];
pub const ROAD: u16 = 0;
pub const LANE_MARKING: u16 = 1;
pub const SIDEWALK: u16 = 2;
pub const CURB: u16 = 3;
pub const VEHICLE: u16 = 4;
pub const SKY: u16 = 8;

pub const SKY_COLOR: [f64; 3] = [0.55, 0.7, 0.9];
/// Bisection stops once the bracket is shorter than this along the ray.
pub const BISECTION_TOL: f64 = 1e-6;
const MARCH_STEP: f64 = 0.01;
const MAX_RAY_LENGTH: f64 = 500.0;

pub fn class_table() -> ClassTable {
    ClassTable {
        names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        palette: PALETTE.to_vec(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Extent {
    pub x: [f64; 2],
    pub y: [f64; 2],
    /// Ground-truth BEV cell size, meters.
    pub resolution: f64,
}

impl Default for Extent {
    fn default() -> Self {
        Self {
            x: [0.0, 8.0],
            y: [-1.4, 1.4],
            resolution: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Flat,
    Ramp,
    Sinusoid,
}

/// `flat`: `z0`. `ramp`: `z0 + gradient * x`. `sinusoid`:
/// `z0 + amplitude * sin(2 pi x / wavelength)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Elevation {
    pub profile: Profile,
    pub z0: f64,
    pub gradient: f64,
    pub amplitude: f64,
    pub wavelength: f64,
}

impl Default for Elevation {
    fn default() -> Self {
        Self {
            profile: Profile::Flat,
            z0: 0.0,
            gradient: 0.02,
            amplitude: 0.05,
            wavelength: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stripe {
    /// Lateral center, meters.
    pub y: f64,
    pub width: f64,
    #[serde(default = "default_marking_color")]
    pub color: [f64; 3],
    /// Dash and gap lengths along x; a zero dash draws a solid line.
    #[serde(default)]
    pub dash: f64,
    #[serde(default)]
    pub gap: f64,
}

fn default_marking_color() -> [f64; 3] {
    [0.92, 0.92, 0.88]
}

/// Lateral band `y in [y0, y1)` painted with a non-road class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Band {
    pub class: String,
    pub y: [f64; 2],
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Texture {
    pub asphalt: [f64; 3],
    /// Relative amplitude of the procedural grain.
    pub grain: f64,
    /// Grain feature size, meters.
    pub grain_scale: f64,
    pub stripes: Vec<Stripe>,
    pub bands: Vec<Band>,
}

impl Default for Texture {
    fn default() -> Self {
        let side = |class: &str, y: [f64; 2], color: [f64; 3]| Band {
            class: class.into(),
            y,
            color,
        };
        Self {
            asphalt: [0.34, 0.34, 0.37],
            grain: 0.25,
            grain_scale: 0.12,
            stripes: vec![
                Stripe { y: 0.0, width: 0.12, color: default_marking_color(), dash: 1.0, gap: 1.0 },
                Stripe { y: 1.0, width: 0.1, color: default_marking_color(), dash: 0.0, gap: 0.0 },
                Stripe { y: -1.0, width: 0.1, color: default_marking_color(), dash: 0.0, gap: 0.0 },
            ],
            bands: vec![
                side("curb", [1.15, 1.3], [0.68, 0.68, 0.66]),
                side("sidewalk", [1.3, 1e3], [0.62, 0.55, 0.5]),
                side("curb", [-1.3, -1.15], [0.68, 0.68, 0.66]),
                side("sidewalk", [-1e3, -1.3], [0.62, 0.55, 0.5]),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraSpec {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    /// Defaults to the image center.
    pub cx: Option<f64>,
    pub cy: Option<f64>,
    /// Samples per pixel along each axis.
    pub supersample: usize,
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            fx: 60.0,
            fy: 60.0,
            cx: None,
            cy: None,
            supersample: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Trajectory {
    pub start: [f64; 2],
    pub heading_deg: f64,
    pub length: f64,
    pub frames: usize,
    /// Camera height above the surface under it.
    pub height: f64,
    /// Angle below the horizon; 90 is straight down.
    pub pitch_deg: f64,
    /// Indices of held-out frames.
    pub test_frames: Vec<usize>,
}

impl Default for Trajectory {
    fn default() -> Self {
        Self {
            start: [0.0, 0.0],
            heading_deg: 0.0,
            length: 8.0,
            frames: 24,
            height: 1.5,
            pitch_deg: 90.0,
            test_frames: vec![5, 9, 14, 18],
        }
    }
}

/// Axis-aligned cuboid resting on the surface at its footprint center.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Occluder {
    pub center: [f64; 2],
    /// Length along x, width along y, height.
    pub size: [f64; 3],
    #[serde(default = "default_occluder_color")]
    pub color: [f64; 3],
    /// Frame indices the box appears in; all frames when absent.
    #[serde(default)]
    pub frames: Option<Vec<usize>>,
}

fn default_occluder_color() -> [f64; 3] {
    [0.75, 0.12, 0.1]
}

/// Per-frame `clamp(gain * in^gamma)`, both drawn uniformly from the ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Lighting {
    pub gain: [f64; 2],
    pub gamma: [f64; 2],
}

impl Default for Lighting {
    fn default() -> Self {
        Self {
            gain: [1.0, 1.0],
            gamma: [1.0, 1.0],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub seed: u64,
    pub extent: Extent,
    pub elevation: Elevation,
    pub texture: Texture,
    pub camera: CameraSpec,
    pub trajectory: Trajectory,
    pub occluders: Vec<Occluder>,
    pub lighting: Lighting,
}

fn finite_all(vals: &[f64]) -> bool {
    vals.iter().all(|v| v.is_finite())
}

fn color_ok(c: &[f64; 3]) -> bool {
    c.iter().all(|v| (0.0..=1.0).contains(v))
}

impl SynthSpec {
    /// Parses TOML; syntax and type errors carry line and column.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: Self =
            toml::from_str(text).map_err(|e| Error::InvalidInput(format!("synthetic spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(format!("synthetic spec: {m}")));
        let e = &self.extent;
        if !finite_all(&[e.x[0], e.x[1], e.y[0], e.y[1]]) || e.x[1] <= e.x[0] || e.y[1] <= e.y[0] {
            return bad(format!("extent must be positive, got x={:?} y={:?}", e.x, e.y));
        }
        if !(e.resolution > 0.0 && e.resolution.is_finite()) {
            return bad("extent.resolution must be positive".into());
        }
        let el = &self.elevation;
        if !finite_all(&[el.z0, el.gradient, el.amplitude, el.wavelength]) {
            return bad("elevation parameters must be finite".into());
        }
        if el.profile == Profile::Sinusoid && el.wavelength <= 0.0 {
            return bad("elevation.wavelength must be positive".into());
        }
        let t = &self.texture;
        if !color_ok(&t.asphalt) || !(t.grain >= 0.0 && t.grain < 1.0) || !(t.grain_scale > 0.0) {
            return bad("texture colors must lie in [0, 1], grain in [0, 1), grain_scale > 0".into());
        }
        for (i, s) in t.stripes.iter().enumerate() {
            if !(s.width > 0.0) || !finite_all(&[s.y, s.width, s.dash, s.gap]) {
                return bad(format!("texture.stripes[{i}].width must be positive"));
            }
            if s.dash < 0.0 || s.gap < 0.0 || (s.dash > 0.0 && s.dash + s.gap <= 0.0) || !color_ok(&s.color) {
                return bad(format!("texture.stripes[{i}] has invalid dash, gap or color"));
            }
        }
        for (i, b) in t.bands.iter().enumerate() {
            if !CLASS_NAMES.contains(&b.class.as_str()) {
                return bad(format!("texture.bands[{i}].class `{}` is unknown", b.class));
            }
            if !(b.y[1] > b.y[0]) || !color_ok(&b.color) {
                return bad(format!("texture.bands[{i}] needs y[1] > y[0] and colors in [0, 1]"));
            }
        }
        let c = &self.camera;
        if c.width == 0 || c.height == 0 || !(c.fx > 0.0 && c.fy > 0.0) || c.supersample == 0 {
            return bad("camera needs nonzero size, positive focal lengths and supersample".into());
        }
        let tr = &self.trajectory;
        if tr.frames == 0 || !(tr.length >= 0.0) || !(tr.height > 0.0) {
            return bad("trajectory needs frames > 0, length >= 0 and height > 0".into());
        }
        if !(tr.pitch_deg > 0.0 && tr.pitch_deg <= 90.0) {
            return bad("trajectory.pitch_deg must be in (0, 90]".into());
        }
        if let Some(&i) = tr.test_frames.iter().find(|&&i| i >= tr.frames) {
            return bad(format!("trajectory.test_frames entry {i} exceeds frame count"));
        }
        for (i, o) in self.occluders.iter().enumerate() {
            if !o.size.iter().all(|&s| s > 0.0) || !color_ok(&o.color) {
                return bad(format!("occluders[{i}] needs positive size and colors in [0, 1]"));
            }
            if o.size[2] >= tr.height {
                return bad(format!("occluders[{i}] is taller than the camera height"));
            }
        }
        let l = &self.lighting;
        if !(l.gain[0] > 0.0 && l.gain[1] >= l.gain[0] && l.gamma[0] > 0.0 && l.gamma[1] >= l.gamma[0]) {
            return bad("lighting ranges must be positive and ordered".into());
        }
        Ok(())
    }

    pub fn bev_grid(&self) -> BevGrid {
        let e = &self.extent;
        let scene = generate_scene(self);
        let mut z_max = f64::NEG_INFINITY;
        let grid = BevGrid::covering([e.x[0], e.y[0]], [e.x[1], e.y[1]], e.resolution, 0.0);
        for row in 0..grid.height {
            for col in 0..grid.width {
                let (x, y) = grid.cell_center(col, row);
                z_max = z_max.max(scene.elevation(x, y));
            }
        }
        BevGrid {
            z_top: z_max + TOP_MARGIN,
            ..grid
        }
    }
}

fn hash2(ix: i64, iy: i64, seed: u64) -> f64 {
    let mut h = seed ^ (ix as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (iy as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

/// Smooth value noise in `[-1, 1]` with unit feature size.
fn value_noise(x: f64, y: f64, seed: u64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let s = |t: f64| t * t * (3.0 - 2.0 * t);
    let (tx, ty) = (s(x - fx), s(y - fy));
    let a = hash2(ix, iy, seed) * (1.0 - tx) + hash2(ix + 1, iy, seed) * tx;
    let b = hash2(ix, iy + 1, seed) * (1.0 - tx) + hash2(ix + 1, iy + 1, seed) * tx;
    a * (1.0 - ty) + b * ty
}

/// Closed-form ground truth derived from a spec.
#[derive(Clone, Debug)]
pub struct AnalyticScene {
    pub elevation: Elevation,
    pub texture: Texture,
    band_classes: Vec<u16>,
    noise_seed: u64,
}

pub fn generate_scene(spec: &SynthSpec) -> AnalyticScene {
    let band_classes = spec
        .texture
        .bands
        .iter()
        .map(|b| CLASS_NAMES.iter().position(|n| *n == b.class).unwrap_or(0) as u16)
        .collect();
    AnalyticScene {
        elevation: spec.elevation.clone(),
        texture: spec.texture.clone(),
        band_classes,
        noise_seed: crate::rng::substream_seed(spec.seed, "texture"),
    }
}

impl AnalyticScene {
    pub fn elevation(&self, x: f64, _y: f64) -> f64 {
        let e = &self.elevation;
        match e.profile {
            Profile::Flat => e.z0,
            Profile::Ramp => e.z0 + e.gradient * x,
            Profile::Sinusoid => e.z0 + e.amplitude * (std::f64::consts::TAU * x / e.wavelength).sin(),
        }
    }

    fn stripe_at(&self, x: f64, y: f64) -> Option<&Stripe> {
        self.texture.stripes.iter().rev().find(|s| {
            (y - s.y).abs() <= s.width / 2.0 && (s.dash <= 0.0 || x.rem_euclid(s.dash + s.gap) < s.dash)
        })
    }

    fn band_at(&self, y: f64) -> Option<(usize, &Band)> {
        self.texture
            .bands
            .iter()
            .enumerate()
            .rev()
            .find(|(_, b)| y >= b.y[0] && y < b.y[1])
    }

    pub fn class(&self, x: f64, y: f64) -> u16 {
        if let Some((i, _)) = self.band_at(y) {
            return self.band_classes[i];
        }
        if self.stripe_at(x, y).is_some() {
            return LANE_MARKING;
        }
        ROAD
    }

    pub fn color(&self, x: f64, y: f64) -> [f64; 3] {
        let t = &self.texture;
        let g = t.grain_scale;
        let n = value_noise(x / g, y / g, self.noise_seed)
            + 0.5 * value_noise(x / (0.37 * g), y / (0.37 * g), self.noise_seed ^ 1);
        let (base, amp) = if let Some((_, b)) = self.band_at(y) {
            (b.color, 0.5 * t.grain)
        } else if let Some(s) = self.stripe_at(x, y) {
            (s.color, 0.2 * t.grain)
        } else {
            (t.asphalt, t.grain)
        };
        let f = 1.0 + amp * n / 1.5;
        base.map(|c| (c * f).clamp(0.0, 1.0))
    }

    fn height_above(&self, ray: &Ray, t: f64) -> f64 {
        let p = ray.at(t);
        p.z - self.elevation(p.x, p.y)
    }

    /// Ray parameter of the first surface crossing, if any.
    pub fn intersect(&self, ray: &Ray) -> Option<f64> {
        let e = &self.elevation;
        match e.profile {
            Profile::Flat | Profile::Ramp => {
                let g = if e.profile == Profile::Ramp { e.gradient } else { 0.0 };
                let denom = ray.dir.z - g * ray.dir.x;
                if denom.abs() < 1e-15 {
                    return None;
                }
                let t = (e.z0 + g * ray.origin.x - ray.origin.z) / denom;
                (t > 0.0).then_some(t)
            }
            Profile::Sinusoid => {
                let step = MARCH_STEP / ray.dir.norm();
                let max_t = MAX_RAY_LENGTH / ray.dir.norm();
                if self.height_above(ray, 0.0) <= 0.0 {
                    return None;
                }
                let mut t0 = 0.0;
                while t0 < max_t {
                    let t1 = t0 + step;
                    let f1 = self.height_above(ray, t1);
                    if f1 <= 0.0 {
                        let (mut lo, mut hi) = (t0, t1);
                        let tol = BISECTION_TOL / ray.dir.norm();
                        while hi - lo > tol {
                            let mid = 0.5 * (lo + hi);
                            if self.height_above(ray, mid) > 0.0 {
                                lo = mid;
                            } else {
                                hi = mid;
                            }
                        }
                        return Some(0.5 * (lo + hi));
                    }
                    t0 = t1;
                }
                None
            }
        }
    }
}

/// Camera poses along a straight line, each `height` above the surface.
pub fn trajectory_cameras(spec: &SynthSpec, scene: &AnalyticScene) -> Vec<(String, Camera, Split)> {
    let tr = &spec.trajectory;
    let c = &spec.camera;
    let k = Intrinsics {
        fx: c.fx,
        fy: c.fy,
        cx: c.cx.unwrap_or(c.width as f64 / 2.0),
        cy: c.cy.unwrap_or(c.height as f64 / 2.0),
        width: c.width,
        height: c.height,
    };
    let yaw = tr.heading_deg.to_radians();
    let dir = [yaw.cos(), yaw.sin()];
    (0..tr.frames)
        .map(|i| {
            let s = if tr.frames > 1 { tr.length * i as f64 / (tr.frames - 1) as f64 } else { 0.0 };
            let (x, y) = (tr.start[0] + s * dir[0], tr.start[1] + s * dir[1]);
            let pos = Vec3::new(x, y, scene.elevation(x, y) + tr.height);
            let pose = Pose::looking_down(pos, yaw, tr.pitch_deg.to_radians());
            let split = if tr.test_frames.contains(&i) { Split::Test } else { Split::Train };
            (format!("{i:03}"), Camera::new(k, pose), split)
        })
        .collect()
}

/// A rendered view with its ground-truth depth (ray parameter, equal to
/// camera-frame z; NaN where the ray misses the surface).
#[derive(Clone, Debug)]
pub struct GtView {
    pub frame: Frame,
    pub depth: Raster<f64>,
}

fn sample_offsets(n: usize) -> Vec<f64> {
    (0..n).map(|a| (a as f64 + 0.5) / n as f64).collect()
}

fn shade_ground(scene: &AnalyticScene, ray: &Ray) -> ([f64; 3], Option<f64>) {
    match scene.intersect(ray) {
        Some(t) => {
            let p = ray.at(t);
            (scene.color(p.x, p.y), Some(t))
        }
        None => (SKY_COLOR, None),
    }
}

pub fn render_gt_views(scene: &AnalyticScene, cameras: &[(String, Camera, Split)], supersample: usize) -> Vec<GtView> {
    let offs = sample_offsets(supersample);
    let inv = 1.0 / (supersample * supersample) as f64;
    cameras
        .iter()
        .map(|(id, cam, split)| {
            let (w, h) = (cam.width(), cam.height());
            let pixels: Vec<([f64; 3], u16, f64)> = (0..w * h)
                .into_par_iter()
                .map(|p| {
                    let (x, y) = ((p % w) as f64, (p / w) as f64);
                    let mut acc = [0.0; 3];
                    for &oy in &offs {
                        for &ox in &offs {
                            let (c, _) = shade_ground(scene, &cam.ray_through(x + ox, y + oy));
                            for k in 0..3 {
                                acc[k] += c[k];
                            }
                        }
                    }
                    let center = cam.ray_through(x + 0.5, y + 0.5);
                    let (label, depth) = match scene.intersect(&center) {
                        Some(t) => {
                            let q = center.at(t);
                            (scene.class(q.x, q.y), t)
                        }
                        None => (SKY, f64::NAN),
                    };
                    (acc.map(|v| v * inv), label, depth)
                })
                .collect();
            let frame = Frame {
                id: id.clone(),
                image: Raster { width: w, height: h, data: pixels.iter().map(|p| p.0).collect() },
                camera: *cam,
                labels: Raster { width: w, height: h, data: pixels.iter().map(|p| p.1).collect() },
                occluder_mask: None,
                inpainted: None,
                split: *split,
            };
            GtView {
                frame,
                depth: Raster { width: w, height: h, data: pixels.iter().map(|p| p.2).collect() },
            }
        })
        .collect()
}

/// Entry distance and entry-face axis of a ray against an axis-aligned box.
fn ray_box(ray: &Ray, lo: &Vec3, hi: &Vec3) -> Option<(f64, usize)> {
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    let mut axis = 0;
    for k in 0..3 {
        let (o, d) = (ray.origin[k], ray.dir[k]);
        if d.abs() < 1e-15 {
            if o < lo[k] || o > hi[k] {
                return None;
            }
            continue;
        }
        let (mut a, mut b) = ((lo[k] - o) / d, (hi[k] - o) / d);
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        if a > t_enter {
            t_enter = a;
            axis = k;
        }
        t_exit = t_exit.min(b);
    }
    (t_enter <= t_exit && t_enter > 0.0).then_some((t_enter, axis))
}

struct PlacedBox {
    lo: Vec3,
    hi: Vec3,
    color: [f64; 3],
}

impl PlacedBox {
    fn new(o: &Occluder, scene: &AnalyticScene) -> Self {
        let base = scene.elevation(o.center[0], o.center[1]);
        Self {
            lo: Vec3::new(o.center[0] - o.size[0] / 2.0, o.center[1] - o.size[1] / 2.0, base - 0.05),
            hi: Vec3::new(o.center[0] + o.size[0] / 2.0, o.center[1] + o.size[1] / 2.0, base + o.size[2]),
            color: o.color,
        }
    }
}

const FACE_SHADE: [f64; 3] = [0.7, 0.8, 1.0];

/// Nearest box hit in front of the ground, with its flat-shaded color.
fn box_hit(boxes: &[&PlacedBox], ray: &Ray, ground_t: Option<f64>) -> Option<[f64; 3]> {
    let mut best: Option<(f64, [f64; 3])> = None;
    for b in boxes {
        if let Some((t, axis)) = ray_box(ray, &b.lo, &b.hi) {
            if ground_t.map_or(true, |g| t < g) && best.map_or(true, |(bt, _)| t < bt) {
                best = Some((t, b.color.map(|c| c * FACE_SHADE[axis])));
            }
        }
    }
    best.map(|(_, c)| c)
}

/// Composites occluder boxes into the frames they are assigned to and keeps
/// the unoccluded image as the oracle inpainting. Pixels no sample of which
/// sees a box are left untouched.
pub fn add_occluders(views: &mut [GtView], scene: &AnalyticScene, occluders: &[Occluder], supersample: usize) {
    if occluders.is_empty() {
        return;
    }
    let placed: Vec<PlacedBox> = occluders.iter().map(|o| PlacedBox::new(o, scene)).collect();
    let offs = sample_offsets(supersample);
    let inv = 1.0 / (supersample * supersample) as f64;
    for (i, view) in views.iter_mut().enumerate() {
        let boxes: Vec<&PlacedBox> = occluders
            .iter()
            .zip(&placed)
            .filter(|(o, _)| o.frames.as_ref().map_or(true, |f| f.contains(&i)))
            .map(|(_, b)| b)
            .collect();
        if boxes.is_empty() {
            continue;
        }
        let frame = &mut view.frame;
        let cam = frame.camera;
        let w = cam.width();
        let changes: Vec<Option<([f64; 3], bool)>> = (0..frame.image.len())
            .into_par_iter()
            .map(|p| {
                let (x, y) = ((p % w) as f64, (p / w) as f64);
                let mut acc = [0.0; 3];
                let mut any = false;
                for &oy in &offs {
                    for &ox in &offs {
                        let ray = cam.ray_through(x + ox, y + oy);
                        let (ground, t) = shade_ground(scene, &ray);
                        let c = match box_hit(&boxes, &ray, t) {
                            Some(c) => {
                                any = true;
                                c
                            }
                            None => ground,
                        };
                        for k in 0..3 {
                            acc[k] += c[k];
                        }
                    }
                }
                let center = cam.ray_through(x + 0.5, y + 0.5);
                let center_hit = box_hit(&boxes, &center, scene.intersect(&center)).is_some();
                (any || center_hit).then(|| (acc.map(|v| v * inv), center_hit))
            })
            .collect();
        if changes.iter().all(Option::is_none) {
            continue;
        }
        let original = frame.image.clone();
        for (p, ch) in changes.into_iter().enumerate() {
            if let Some((color, covered)) = ch {
                frame.image.data[p] = color;
                if covered {
                    frame.labels.data[p] = VEHICLE;
                }
            }
        }
        frame.inpainted = Some(original);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightingParams {
    pub gain: f64,
    pub gamma: f64,
}

pub fn sample_lighting(lighting: &Lighting, frames: usize, seed: u64) -> Vec<LightingParams> {
    let mut rng = substream(seed, "lighting");
    let draw = |rng: &mut rand_chacha::ChaCha8Rng, r: [f64; 2]| {
        if r[1] > r[0] {
            rng.gen_range(r[0]..=r[1])
        } else {
            r[0]
        }
    };
    (0..frames)
        .map(|_| LightingParams {
            gain: draw(&mut rng, lighting.gain),
            gamma: draw(&mut rng, lighting.gamma),
        })
        .collect()
}

pub fn apply_lighting(img: &RgbImage, params: LightingParams) -> RgbImage {
    if params.gain == 1.0 && params.gamma == 1.0 {
        return img.clone();
    }
    img.map(|c| c.map(|v| (params.gain * v.powf(params.gamma)).clamp(0.0, 1.0)))
}

/// Applies per-frame lighting to images and oracle inpaintings alike.
pub fn add_lighting_variation(views: &mut [GtView], params: &[LightingParams]) {
    for (v, &p) in views.iter_mut().zip(params) {
        v.frame.image = apply_lighting(&v.frame.image, p);
        if let Some(img) = &v.frame.inpainted {
            v.frame.inpainted = Some(apply_lighting(img, p));
        }
    }
}

/// Ground-truth BEV maps sampled from the analytic scene.
#[derive(Clone, Debug)]
pub struct GtBev {
    pub grid: BevGrid,
    pub rgb: RgbImage,
    pub semantic: LabelMap,
    pub elevation: Raster<f64>,
}

pub fn ground_truth_bev(scene: &AnalyticScene, grid: &BevGrid, supersample: usize) -> GtBev {
    let (w, h) = (grid.width, grid.height);
    let offs: Vec<f64> = sample_offsets(supersample).iter().map(|o| o - 0.5).collect();
    let inv = 1.0 / (supersample * supersample) as f64;
    let cells: Vec<([f64; 3], u16, f64)> = (0..w * h)
        .into_par_iter()
        .map(|p| {
            let (x, y) = grid.cell_center(p % w, p / w);
            let mut acc = [0.0; 3];
            for &oy in &offs {
                for &ox in &offs {
                    let c = scene.color(x + ox * grid.resolution, y - oy * grid.resolution);
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            (acc.map(|v| v * inv), scene.class(x, y), scene.elevation(x, y))
        })
        .collect();
    GtBev {
        grid: *grid,
        rgb: Raster { width: w, height: h, data: cells.iter().map(|c| c.0).collect() },
        semantic: Raster { width: w, height: h, data: cells.iter().map(|c| c.1).collect() },
        elevation: Raster { width: w, height: h, data: cells.iter().map(|c| c.2).collect() },
    }
}

/// Everything a synthetic dataset consists of, in memory.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub classes: ClassTable,
    pub views: Vec<GtView>,
    pub lighting: Vec<LightingParams>,
    pub bev: GtBev,
}

impl SynthDataset {
    pub fn frames(&self) -> Vec<Frame> {
        self.views.iter().map(|v| v.frame.clone()).collect()
    }
}

pub fn synthesize(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let scene = generate_scene(spec);
    let cameras = trajectory_cameras(spec, &scene);
    let ss = spec.camera.supersample;
    let mut views = render_gt_views(&scene, &cameras, ss);
    add_occluders(&mut views, &scene, &spec.occluders, ss);
    let lighting = sample_lighting(&spec.lighting, views.len(), spec.seed);
    add_lighting_variation(&mut views, &lighting);
    let bev = ground_truth_bev(&scene, &spec.bev_grid(), ss);
    Ok(SynthDataset {
        spec: spec.clone(),
        classes: class_table(),
        views,
        lighting,
        bev,
    })
}

pub const GT_DIR: &str = "gt";
pub const GT_ELEVATION_FILE: &str = "elevation.pfm";
pub const GT_META_FILE: &str = "meta.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameLighting {
    pub frame: String,
    pub gain: f64,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtMeta {
    pub spec: SynthSpec,
    pub lighting: Vec<FrameLighting>,
    pub grid: BevGrid,
}

/// Writes the dataset layout plus `gt/`: analytic elevation, BEV color and
/// semantics on the same grid, per-frame depth, and `meta.json`.
pub fn write_synth(dir: &Path, ds: &SynthDataset) -> Result<()> {
    let frames = ds.frames();
    io::write_dataset(dir, &ds.classes, &frames)?;
    let gt = dir.join(GT_DIR);
    io::write_pfm(&gt.join(GT_ELEVATION_FILE), &ds.bev.elevation)?;
    io::write_rgb_png(&gt.join(RGB_FILE), &ds.bev.rgb)?;
    io::write_label_png(&gt.join(SEMANTIC_FILE), &ds.bev.semantic, Some(&ds.classes.palette))?;
    io::write_json(
        &gt.join(META_FILE),
        &BevMeta {
            grid: ds.bev.grid,
            coverage_threshold: COVERAGE_THRESHOLD,
            class_names: ds.classes.names.clone(),
        },
    )?;
    for v in &ds.views {
        io::write_depth_png16(&gt.join("depth").join(format!("{}.png", v.frame.id)), &v.depth)?;
    }
    let meta = GtMeta {
        spec: ds.spec.clone(),
        lighting: ds
            .views
            .iter()
            .zip(&ds.lighting)
            .map(|(v, l)| FrameLighting { frame: v.frame.id.clone(), gain: l.gain, gamma: l.gamma })
            .collect(),
        grid: ds.bev.grid,
    };
    io::write_json(&gt.join(GT_META_FILE), &meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthSpec {
        let mut spec = SynthSpec::default();
        spec.camera = CameraSpec { width: 32, height: 24, fx: 15.0, fy: 15.0, supersample: 2, ..Default::default() };
        spec.trajectory.frames = 4;
        spec.trajectory.length = 3.0;
        spec.trajectory.test_frames = vec![2];
        spec
    }

    #[test]
    fn elevation_profiles() {
        let mut spec = SynthSpec::default();
        assert_eq!(generate_scene(&spec).elevation(3.0, -1.0), 0.0);
        spec.elevation.profile = Profile::Ramp;
        assert!((generate_scene(&spec).elevation(10.0, 0.5) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn stripe_classes_follow_layout() {
        let scene = generate_scene(&SynthSpec::default());
        assert_eq!(scene.class(0.5, 0.0), LANE_MARKING);
        assert_eq!(scene.class(0.5, 0.059), LANE_MARKING);
        assert_eq!(scene.class(0.5, 0.061), ROAD);
        // Dashes are 1 m on, 1 m off.
        assert_eq!(scene.class(1.5, 0.0), ROAD);
        assert_eq!(scene.class(2.2, 0.0), LANE_MARKING);
        assert_eq!(scene.class(0.0, 1.2), CURB);
        assert_eq!(scene.class(0.0, -2.0), SIDEWALK);
        assert_eq!(scene.color(0.5, 0.0)[0], scene.color(0.5, 0.0)[1]);
    }

    #[test]
    fn nadir_flat_depth_is_camera_height() {
        let spec = small_spec();
        let ds = synthesize(&spec).unwrap();
        for v in &ds.views {
            assert!(v.depth.data.iter().all(|d| (d - 1.5).abs() < 1e-12));
        }
        // Pixel over the center line in the first frame shows the marking.
        let f = &ds.views[0].frame;
        let (px, py) = (0..f.labels.len())
            .map(|p| (p % 32, p / 32))
            .find(|&(x, y)| {
                let r = f.camera.pixel_ray(x, y);
                let q = r.at(1.5);
                q.x > 0.3 && q.x < 0.7 && q.y.abs() < 0.055
            })
            .unwrap();
        assert_eq!(*f.labels.get(px, py), LANE_MARKING);
        let scene = generate_scene(&spec);
        let single = render_gt_views(&scene, &trajectory_cameras(&spec, &scene)[..1], 1);
        let q = f.camera.pixel_ray(px, py).at(1.5);
        assert_eq!(*single[0].frame.image.get(px, py), scene.color(q.x, q.y));
        assert!(scene.color(q.x, q.y)[0] > 0.7);
    }

    #[test]
    fn sinusoid_matches_ray_march() {
        let mut spec = small_spec();
        spec.elevation.profile = Profile::Sinusoid;
        spec.elevation.amplitude = 0.1;
        spec.elevation.wavelength = 1.3;
        spec.trajectory.pitch_deg = 50.0;
        let scene = generate_scene(&spec);
        let cams = trajectory_cameras(&spec, &scene);
        let cam = &cams[1].1;
        for &(x, y) in &[(0usize, 0usize), (5, 20), (16, 12), (31, 23), (20, 3)] {
            let ray = cam.pixel_ray(x, y);
            let got = scene.intersect(&ray);
            // Brute-force march with a tiny step, no bisection.
            let step = 1e-5;
            let mut t = 0.0;
            let mut want = None;
            while t < 20.0 {
                let p = ray.at(t);
                if p.z <= scene.elevation(p.x, p.y) {
                    want = Some(t);
                    break;
                }
                t += step;
            }
            match (got, want) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-4, "{a} vs {b}"),
                (None, None) => {}
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn occluders_contract() {
        let spec = small_spec();
        let scene = generate_scene(&spec);
        let cams = trajectory_cameras(&spec, &scene);
        let clean = render_gt_views(&scene, &cams, 2);

        let mut same = clean.clone();
        add_occluders(&mut same, &scene, &[], 2);
        assert!(same.iter().zip(&clean).all(|(a, b)| a.frame.image == b.frame.image && a.frame.inpainted.is_none()));

        let boxed = Occluder { center: [1.0, 0.3], size: [0.6, 0.4, 0.3], color: [0.8, 0.1, 0.1], frames: Some(vec![1]) };
        let mut views = clean.clone();
        add_occluders(&mut views, &scene, &[boxed.clone()], 2);
        assert!(views[0].frame.inpainted.is_none() && views[0].frame.image == clean[0].frame.image);
        let f = &views[1].frame;
        assert_eq!(f.inpainted.as_ref().unwrap(), &clean[1].frame.image);
        let placed = PlacedBox::new(&boxed, &scene);
        let w = f.camera.width();
        let mut vehicle = 0;
        for p in 0..f.labels.len() {
            let center = f.camera.ray_through((p % w) as f64 + 0.5, (p / w) as f64 + 0.5);
            let hit = box_hit(&[&placed], &center, scene.intersect(&center)).is_some();
            assert_eq!(f.labels.data[p] == VEHICLE, hit);
            vehicle += hit as usize;
            if f.image.data[p] != clean[1].frame.image.data[p] {
                // Changed pixels must see the box with at least one sample.
                let near = (0..4).any(|k| {
                    let r = f.camera.ray_through((p % w) as f64 + 0.25 + 0.5 * (k % 2) as f64, (p / w) as f64 + 0.25 + 0.5 * (k / 2) as f64);
                    box_hit(&[&placed], &r, scene.intersect(&r)).is_some()
                });
                assert!(near);
            }
        }
        assert!(vehicle > 10);
    }

    #[test]
    fn lighting_examples() {
        let img = Raster::filled(2, 1, [1.0, 1.0, 1.0]);
        assert_eq!(apply_lighting(&img, LightingParams { gain: 1.0, gamma: 1.0 }), img);
        let half = apply_lighting(&img, LightingParams { gain: 0.5, gamma: 2.2 });
        assert_eq!(half.data[0], [0.5; 3]);
        let l = sample_lighting(&Lighting { gain: [0.7, 1.3], gamma: [1.0, 1.0] }, 50, 3);
        assert!(l.iter().all(|p| (0.7..=1.3).contains(&p.gain) && p.gamma == 1.0));
        assert_eq!(l, sample_lighting(&Lighting { gain: [0.7, 1.3], gamma: [1.0, 1.0] }, 50, 3));
    }

    #[test]
    fn gt_bev_is_exact() {
        let mut spec = small_spec();
        spec.elevation.profile = Profile::Ramp;
        let scene = generate_scene(&spec);
        let grid = spec.bev_grid();
        let bev = ground_truth_bev(&scene, &grid, 2);
        for row in 0..grid.height {
            for col in 0..grid.width {
                let (x, _) = grid.cell_center(col, row);
                assert_eq!(*bev.elevation.get(col, row), 0.02 * x);
            }
        }
    }

    #[test]
    fn spec_parsing_and_validation() {
        let spec = SynthSpec::from_toml_str("seed = 3\n[elevation]\nprofile = \"ramp\"\ngradient = 0.02\n").unwrap();
        assert_eq!(spec.elevation.profile, Profile::Ramp);
        assert_eq!(spec.camera.width, 128);

        let err = SynthSpec::from_toml_str("seed = 1\n[extent]\nx = [5.0, -1.0]\n").unwrap_err().to_string();
        assert!(err.contains("extent"), "{err}");
        let err = SynthSpec::from_toml_str("seed = 1\n\n[camera]\nwidth = \"big\"\n").unwrap_err().to_string();
        assert!(err.contains("line 4"), "{err}");
        let err = SynthSpec::from_toml_str("[texture]\nstripes = [{ y = 0.0, width = -0.1 }]\n").unwrap_err().to_string();
        assert!(err.contains("stripes[0]"), "{err}");
        assert!(SynthSpec::from_toml_str("bogus = 1\n").is_err());
    }

    #[test]
    fn deterministic_and_round_trips() {
        let mut spec = small_spec();
        spec.lighting.gain = [0.7, 1.3];
        let a = synthesize(&spec).unwrap();
        let b = synthesize(&spec).unwrap();
        assert!(a.views.iter().zip(&b.views).all(|(x, y)| x.frame.image == y.frame.image));

        let dir = tempfile::tempdir().unwrap();
        write_synth(dir.path(), &a).unwrap();
        let loaded = io::load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.frames.len(), 4);
        assert_eq!(loaded.frames[2].split, Split::Test);
        let meta: GtMeta = io::read_json(&dir.path().join("gt/meta.json")).unwrap();
        assert_eq!(meta.lighting[1].gain, a.lighting[1].gain);
        assert_eq!(meta.spec, spec);
    }
}
