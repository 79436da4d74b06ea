//! Surfel initialization along a trajectory, adaptive-moment updates, pruning
//! and the training loop.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{self, BackwardOptions, ParamGrads, OFF_OPACITY, OFF_SCALE, OFF_SEMANTIC, OFF_SH};
use crate::loss::{LossBreakdown, LossTarget, LossWeights};
use crate::raster::{self, RenderOptions};
use crate::rng;
use crate::scene::{Camera, Pose, Scene, Surfel, Vec3};
use crate::sh::SH_COEFFS;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub center_xy: f64,
    pub center_z: f64,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub sh: f64,
    pub semantic: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            center_xy: 2e-5,
            center_z: 1e-4,
            scale: 5e-4,
            rotation: 1e-3,
            opacity: 0.01,
            sh: 0.01,
            semantic: 0.05,
        }
    }
}

impl LearningRates {
    fn all(&self) -> [f64; 7] {
        [
            self.center_xy,
            self.center_z,
            self.scale,
            self.rotation,
            self.opacity,
            self.sh,
            self.semantic,
        ]
    }

    /// Rate for one record offset.
    pub fn for_offset(&self, offset: usize) -> f64 {
        match offset {
            0 | 1 => self.center_xy,
            2 => self.center_z,
            3 | 4 => self.scale,
            5..=7 => self.rotation,
            8 => self.opacity,
            o if o < OFF_SEMANTIC => self.sh,
            _ => self.semantic,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub iterations: usize,
    pub learning_rates: LearningRates,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub prune_opacity_threshold: f64,
    /// Iterations between pruning passes; 0 disables pruning.
    pub prune_interval: usize,
    pub grid_spacing: f64,
    pub grid_halfwidth: f64,
    /// Extends the band past the first and last pose along the trajectory.
    pub grid_end_margin: f64,
    pub mount_height: f64,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            learning_rates: LearningRates::default(),
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-15,
            prune_opacity_threshold: 0.005,
            prune_interval: 500,
            grid_spacing: 0.05,
            grid_halfwidth: 1.8,
            grid_end_margin: 0.0,
            mount_height: 1.5,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.into()));
        if self.learning_rates.all().iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return bad("learning rates must be finite and nonnegative");
        }
        if !(self.grid_spacing > 0.0 && self.grid_spacing.is_finite()) {
            return bad("grid spacing must be positive");
        }
        if !(self.grid_halfwidth > 0.0) {
            return bad("grid halfwidth must be positive");
        }
        if !(self.grid_end_margin >= 0.0 && self.grid_end_margin.is_finite()) {
            return bad("grid end margin must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("moment decay coefficients must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if !(0.0..1.0).contains(&self.prune_opacity_threshold) {
            return bad("prune threshold must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn min_scale(&self) -> f64 {
        1e-4
    }

    pub fn max_scale(&self) -> f64 {
        10.0 * self.grid_spacing
    }
}

/// Lattice points (x, y, z) covering the band around the ground-projected
/// trajectory, optionally extended by `end_margin` beyond both ends. The
/// lattice is cell-centered and anchored at the first pose.
pub fn band_lattice(
    poses: &[Pose],
    spacing: f64,
    halfwidth: f64,
    end_margin: f64,
    mount_height: f64,
) -> Vec<Vec3> {
    let ground: Vec<(f64, f64, f64)> = poses
        .iter()
        .map(|p| {
            let t = p.translation;
            (t.x, t.y, t.z - mount_height)
        })
        .collect();
    let anchor = (ground[0].0, ground[0].1);
    let segments: Vec<((f64, f64, f64), (f64, f64, f64))> = ground
        .windows(2)
        .filter(|w| (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1) > 1e-12)
        .map(|w| (w[0], w[1]))
        .collect();

    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    let reach = halfwidth + end_margin;
    for g in &ground {
        x0 = x0.min(g.0 - reach);
        x1 = x1.max(g.0 + reach);
        y0 = y0.min(g.1 - reach);
        y1 = y1.max(g.1 + reach);
    }
    let first = |lo: f64, a: f64| ((lo - a) / spacing - 0.5).floor() as i64;
    let last = |hi: f64, a: f64| ((hi - a) / spacing - 0.5).ceil() as i64;
    let (i0, i1) = (first(x0, anchor.0), last(x1, anchor.0));
    let (j0, j1) = (first(y0, anchor.1), last(y1, anchor.1));
    let tol = 1e-9;

    let mut points = Vec::new();
    for j in j0..=j1 {
        for i in i0..=i1 {
            let x = anchor.0 + (i as f64 + 0.5) * spacing;
            let y = anchor.1 + (j as f64 + 0.5) * spacing;
            let z = if segments.is_empty() {
                let g = ground[0];
                ((x - g.0).abs() <= halfwidth + tol && (y - g.1).abs() <= halfwidth + tol)
                    .then_some(g.2)
            } else {
                let mut best: Option<(f64, f64)> = None;
                let last = segments.len() - 1;
                for (k, (a, b)) in segments.iter().enumerate() {
                    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
                    let len2 = dx * dx + dy * dy;
                    let tau = ((x - a.0) * dx + (y - a.1) * dy) / len2;
                    let ext = end_margin / len2.sqrt();
                    let lo = if k == 0 { -ext } else { 0.0 } - tol;
                    let hi = if k == last { 1.0 + ext } else { 1.0 } + tol;
                    if !(lo..=hi).contains(&tau) {
                        continue;
                    }
                    let lateral = ((x - a.0) * dy - (y - a.1) * dx).abs() / len2.sqrt();
                    if lateral > halfwidth + tol {
                        continue;
                    }
                    if best.map_or(true, |(d, _)| lateral < d) {
                        let tau = tau.clamp(0.0, 1.0);
                        best = Some((lateral, a.2 + tau * (b.2 - a.2)));
                    }
                }
                best.map(|(_, z)| z)
            };
            if let Some(z) = z {
                points.push(Vec3::new(x, y, z));
            }
        }
    }
    points
}

/// Horizontal surfels on the trajectory band: scale = spacing, opacity 0.5,
/// mid-gray color and uniform semantic logits.
pub fn init_scene(poses: &[Pose], config: &OptimConfig, class_names: Vec<String>) -> Result<Scene> {
    if poses.is_empty() {
        return Err(Error::InvalidInput("empty trajectory".into()));
    }
    config.validate()?;
    let c = class_names.len();
    let mut scene = Scene::new(class_names);
    scene.surfels = band_lattice(
        poses,
        config.grid_spacing,
        config.grid_halfwidth,
        config.grid_end_margin,
        config.mount_height,
    )
    .into_iter()
    .map(|p| Surfel::horizontal(p, config.grid_spacing, 0.5, c))
    .collect();
    Ok(scene)
}

/// First and second moment buffers, laid out like [`ParamGrads`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn for_scene(scene: &Scene) -> Self {
        Self::new(scene.len() * grad::record_len(scene.class_count()))
    }

    /// Drops the records of removed surfels.
    pub fn retain(&mut self, keep: &[bool], stride: usize) {
        let filter = |buf: &Vec<f64>| -> Vec<f64> {
            buf.chunks(stride)
                .zip(keep)
                .filter(|(_, &k)| k)
                .flat_map(|(c, _)| c.iter().copied())
                .collect()
        };
        self.m = filter(&self.m);
        self.v = filter(&self.v);
    }
}

fn clamp_surfel(s: &mut Surfel, config: &OptimConfig) {
    s.opacity = s.opacity.clamp(0.0, 1.0);
    s.scale_u = s.scale_u.clamp(config.min_scale(), config.max_scale());
    s.scale_v = s.scale_v.clamp(config.min_scale(), config.max_scale());
}

/// One bias-corrected adaptive-moment update of every parameter, followed by
/// frame re-orthonormalization and range clamps.
pub fn step(
    scene: &mut Scene,
    grads: &ParamGrads,
    state: &mut AdamState,
    config: &OptimConfig,
) -> Result<()> {
    grads.check_finite()?;
    let stride = grad::record_len(scene.class_count());
    if grads.data.len() != scene.len() * stride || state.m.len() != grads.data.len() {
        return Err(Error::InvalidInput(
            "gradient or optimizer state does not match scene".into(),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    let lrs: Vec<f64> = (0..stride).map(|o| config.learning_rates.for_offset(o)).collect();

    let mut delta = vec![0.0; stride];
    for (i, s) in scene.surfels.iter_mut().enumerate() {
        let base = i * stride;
        for o in 0..stride {
            let g = grads.data[base + o];
            let m = &mut state.m[base + o];
            let v = &mut state.v[base + o];
            *m = config.beta1 * *m + (1.0 - config.beta1) * g;
            *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            delta[o] = -lrs[o] * m_hat / (v_hat.sqrt() + config.epsilon);
        }
        for k in 0..3 {
            s.center[k] += delta[k];
        }
        s.scale_u += delta[OFF_SCALE];
        s.scale_v += delta[OFF_SCALE + 1];
        let rot = Vec3::new(delta[5], delta[6], delta[7]);
        if rot != Vec3::zeros() {
            s.rotate(&rot);
        }
        s.orthonormalize();
        s.opacity += delta[OFF_OPACITY];
        for ch in 0..3 {
            for k in 0..SH_COEFFS {
                s.sh[ch][k] += delta[OFF_SH + ch * SH_COEFFS + k];
            }
        }
        for (l, d) in s.semantic.iter_mut().zip(&delta[OFF_SEMANTIC..]) {
            *l += d;
        }
        clamp_surfel(s, config);
    }
    Ok(())
}

/// Removes surfels with opacity below `threshold`, preserving order.
pub fn prune(scene: &Scene, threshold: f64) -> Scene {
    let mut out = Scene::new(scene.class_names.clone());
    out.surfels = scene
        .surfels
        .iter()
        .filter(|s| s.opacity >= threshold)
        .cloned()
        .collect();
    out
}

fn prune_with_state(scene: &mut Scene, state: &mut AdamState, threshold: f64) -> usize {
    let keep: Vec<bool> = scene.surfels.iter().map(|s| s.opacity >= threshold).collect();
    let removed = keep.iter().filter(|&&k| !k).count();
    if removed > 0 {
        state.retain(&keep, grad::record_len(scene.class_count()));
        let mut it = keep.iter();
        scene.surfels.retain(|_| *it.next().unwrap());
    }
    removed
}

/// One supervised view used for training.
#[derive(Clone, Debug)]
pub struct TrainingView {
    pub id: String,
    pub camera: Camera,
    pub target: LossTarget,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub frame: String,
    pub surfels: usize,
    pub loss: LossBreakdown,
}

/// Frame index for a global iteration: every frame once per epoch, in an order
/// shuffled per epoch from the seed.
pub fn frame_for_iteration(iteration: usize, frame_count: usize, seed: u64) -> usize {
    let epoch = iteration / frame_count;
    let mut order: Vec<usize> = (0..frame_count).collect();
    order.shuffle(&mut rng::substream(seed, &format!("frame-order/{epoch}")));
    order[iteration % frame_count]
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub render: RenderOptions,
    /// Global index of the first iteration, for resumed runs.
    pub start_iteration: usize,
}

/// Runs `config.iterations` steps starting at `opts.start_iteration`, calling
/// `on_iteration` after each one.
pub fn optimize_with(
    scene: &mut Scene,
    state: &mut AdamState,
    views: &[TrainingView],
    config: &OptimConfig,
    weights: &LossWeights,
    opts: &TrainOptions,
    mut on_iteration: impl FnMut(&IterationLog),
) -> Result<()> {
    if views.is_empty() {
        return Err(Error::InvalidInput("no training views".into()));
    }
    config.validate()?;
    weights.validate()?;
    let render_opts = RenderOptions {
        retain_contributions: true,
        ..opts.render
    };
    let stride = grad::record_len(scene.class_count());
    if state.m.len() != scene.len() * stride {
        *state = AdamState::for_scene(scene);
    }
    for k in 0..config.iterations {
        let it = opts.start_iteration + k;
        let view = &views[frame_for_iteration(it, views.len(), config.seed)];
        let out = raster::render(scene, &view.camera, &render_opts)?;
        let (loss, grads) = grad::backward(
            scene,
            &view.camera,
            &out,
            &view.target,
            weights,
            &BackwardOptions::default(),
        )?;
        drop(out);
        step(scene, &grads, state, config)?;
        if config.prune_interval > 0 && (it + 1) % config.prune_interval == 0 {
            let removed = prune_with_state(scene, state, config.prune_opacity_threshold);
            if removed > 0 {
                log::debug!("iteration {}: pruned {removed} surfels", it + 1);
            }
        }
        on_iteration(&IterationLog {
            iteration: it + 1,
            frame: view.id.clone(),
            surfels: scene.len(),
            loss,
        });
    }
    Ok(())
}

/// Trains from `scene` and returns the result with the per-iteration log.
pub fn optimize(
    scene: &Scene,
    views: &[TrainingView],
    config: &OptimConfig,
    weights: &LossWeights,
) -> Result<(Scene, Vec<IterationLog>)> {
    let mut s = scene.clone();
    let mut state = AdamState::for_scene(&s);
    let mut log = Vec::new();
    optimize_with(
        &mut s,
        &mut state,
        views,
        config,
        weights,
        &TrainOptions::default(),
        |l| log.push(l.clone()),
    )?;
    Ok((s, log))
}

const SCENE_MAGIC: &[u8; 4] = b"SRF1";
const STATE_MAGIC: &[u8; 4] = b"SRFA";

fn put_f64s(buf: &mut Vec<u8>, vals: impl IntoIterator<Item = f64>) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn vec3(&mut self) -> Result<Vec3> {
        Ok(Vec3::new(self.f64()?, self.f64()?, self.f64()?))
    }
}

/// Binary scene encoding: magic, surfel count (u64), class count (u32), SH
/// coefficient count (u32), then one little-endian f64 record per surfel in
/// field order.
pub fn encode_scene(scene: &Scene) -> Vec<u8> {
    let c = scene.class_count();
    let mut buf = Vec::with_capacity(16 + scene.len() * 8 * (12 + 48 + c));
    buf.extend_from_slice(SCENE_MAGIC);
    buf.extend_from_slice(&(scene.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(c as u32).to_le_bytes());
    buf.extend_from_slice(&(SH_COEFFS as u32).to_le_bytes());
    for s in &scene.surfels {
        put_f64s(&mut buf, s.center.iter().copied());
        put_f64s(&mut buf, [s.scale_u, s.scale_v]);
        put_f64s(&mut buf, s.tangent_u.iter().copied());
        put_f64s(&mut buf, s.tangent_v.iter().copied());
        put_f64s(&mut buf, [s.opacity]);
        put_f64s(&mut buf, s.sh.iter().flat_map(|ch| ch.iter().copied()));
        put_f64s(&mut buf, s.semantic.iter().copied());
    }
    buf
}

pub fn decode_scene(bytes: &[u8], class_names: Vec<String>) -> Result<Scene> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != SCENE_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let n = r.u64()? as usize;
    let c = r.u32()? as usize;
    let k = r.u32()? as usize;
    if k != SH_COEFFS {
        return Err(Error::Checkpoint(format!("unsupported SH coefficient count {k}")));
    }
    if c != class_names.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {c} classes, sidecar lists {}",
            class_names.len()
        )));
    }
    let record = 8 * (12 + 3 * SH_COEFFS + c);
    if bytes.len() != 20 + n * record {
        return Err(Error::Checkpoint("size does not match header".into()));
    }
    let mut scene = Scene::new(class_names);
    scene.surfels.reserve(n);
    for _ in 0..n {
        let center = r.vec3()?;
        let scale_u = r.f64()?;
        let scale_v = r.f64()?;
        let tangent_u = r.vec3()?;
        let tangent_v = r.vec3()?;
        let opacity = r.f64()?;
        let mut sh = [[0.0; SH_COEFFS]; 3];
        for ch in sh.iter_mut() {
            for v in ch.iter_mut() {
                *v = r.f64()?;
            }
        }
        let semantic = (0..c).map(|_| r.f64()).collect::<Result<_>>()?;
        scene.surfels.push(Surfel {
            center,
            scale_u,
            scale_v,
            tangent_u,
            tangent_v,
            opacity,
            sh,
            semantic,
        });
    }
    scene.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(scene)
}

/// Sidecar written next to a checkpoint as `<checkpoint>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub class_names: Vec<String>,
    pub config_hash: String,
    pub iterations: usize,
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

pub fn state_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".adam");
    s.into()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

/// Writes the scene, its JSON sidecar and, when given, the optimizer moments.
pub fn write_checkpoint(
    path: &Path,
    scene: &Scene,
    meta: &CheckpointMeta,
    state: Option<&AdamState>,
) -> Result<()> {
    write_file(path, &encode_scene(scene))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(meta).map_err(|e| Error::Json {
        path: side.display().to_string(),
        source: e,
    })?;
    write_file(&side, json.as_bytes())?;
    if let Some(st) = state {
        let mut buf = Vec::with_capacity(20 + 16 * st.m.len());
        buf.extend_from_slice(STATE_MAGIC);
        buf.extend_from_slice(&st.step.to_le_bytes());
        buf.extend_from_slice(&(st.m.len() as u64).to_le_bytes());
        put_f64s(&mut buf, st.m.iter().copied());
        put_f64s(&mut buf, st.v.iter().copied());
        write_file(&state_path(path), &buf)?;
    }
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(Scene, CheckpointMeta)> {
    let side = sidecar_path(path);
    let meta: CheckpointMeta =
        serde_json::from_slice(&read_file(&side)?).map_err(|e| Error::Json {
            path: side.display().to_string(),
            source: e,
        })?;
    let scene = decode_scene(&read_file(path)?, meta.class_names.clone())?;
    Ok((scene, meta))
}

/// Optimizer moments saved with a checkpoint, if present.
pub fn read_state(path: &Path) -> Result<Option<AdamState>> {
    let p = state_path(path);
    if !p.exists() {
        return Ok(None);
    }
    let bytes = read_file(&p)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4)? != STATE_MAGIC {
        return Err(Error::Checkpoint("bad optimizer state magic".into()));
    }
    let step = r.u64()?;
    let n = r.u64()? as usize;
    if bytes.len() != 20 + 16 * n {
        return Err(Error::Checkpoint("optimizer state size mismatch".into()));
    }
    let m = (0..n).map(|_| r.f64()).collect::<Result<_>>()?;
    let v = (0..n).map(|_| r.f64()).collect::<Result<_>>()?;
    Ok(Some(AdamState { step, m, v }))
}
