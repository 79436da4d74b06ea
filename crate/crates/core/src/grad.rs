//! Analytic gradients of the total loss with respect to every surfel parameter,
//! plus a central-difference checker.
//!
//! Per-surfel parameter layout (offsets into one record):
//!
//! | offset        | parameter                         |
//! |---------------|-----------------------------------|
//! | 0..3          | center x, y, z                    |
//! | 3..5          | scale_u, scale_v                  |
//! | 5..8          | rotation increment (axis-angle)   |
//! | 8             | opacity                           |
//! | 9..57         | SH, `9 + channel * 16 + k`        |
//! | 57..57+C      | semantic logits                   |
//!
//! Truncation at the cutoff radius and the depth sort are treated as locally
//! constant.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::Raster;
use crate::loss::{self, L1Mode, LossBreakdown, LossTarget, LossWeights};
use crate::raster::{
    self, normal_stencil, RenderOptions, RenderOutput, SurfelAttributes, ALPHA_THRESHOLD,
};
use crate::scene::{Camera, Intrinsics, Pose, Ray, Scene, Surfel, Vec3};
use crate::sh::{self, ShCoeffs, SH_COEFFS};

pub const OFF_CENTER: usize = 0;
pub const OFF_SCALE: usize = 3;
pub const OFF_ROTATION: usize = 5;
pub const OFF_OPACITY: usize = 8;
pub const OFF_SH: usize = 9;
pub const OFF_SEMANTIC: usize = OFF_SH + 3 * SH_COEFFS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamClass {
    CenterXY,
    CenterZ,
    Scale,
    Rotation,
    Opacity,
    Sh,
    Semantic,
}

impl ParamClass {
    pub const ALL: [ParamClass; 7] = [
        ParamClass::CenterXY,
        ParamClass::CenterZ,
        ParamClass::Scale,
        ParamClass::Rotation,
        ParamClass::Opacity,
        ParamClass::Sh,
        ParamClass::Semantic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamClass::CenterXY => "center_xy",
            ParamClass::CenterZ => "center_z",
            ParamClass::Scale => "scale",
            ParamClass::Rotation => "rotation",
            ParamClass::Opacity => "opacity",
            ParamClass::Sh => "sh",
            ParamClass::Semantic => "semantic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    pub fn of_offset(offset: usize) -> Self {
        match offset {
            0 | 1 => ParamClass::CenterXY,
            2 => ParamClass::CenterZ,
            3 | 4 => ParamClass::Scale,
            5..=7 => ParamClass::Rotation,
            8 => ParamClass::Opacity,
            o if o < OFF_SEMANTIC => ParamClass::Sh,
            _ => ParamClass::Semantic,
        }
    }
}

impl std::fmt::Display for ParamClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Human-readable name of one record offset, e.g. `sh[2][5]`.
pub fn param_label(offset: usize) -> String {
    match offset {
        0 => "center.x".into(),
        1 => "center.y".into(),
        2 => "center.z".into(),
        3 => "scale_u".into(),
        4 => "scale_v".into(),
        5..=7 => format!("rotation[{}]", offset - OFF_ROTATION),
        8 => "opacity".into(),
        o if o < OFF_SEMANTIC => {
            let k = o - OFF_SH;
            format!("sh[{}][{}]", k / SH_COEFFS, k % SH_COEFFS)
        }
        o => format!("semantic[{}]", o - OFF_SEMANTIC),
    }
}

pub fn record_len(class_count: usize) -> usize {
    OFF_SEMANTIC + class_count
}

/// Dense gradient records, one per surfel.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub surfel_count: usize,
    pub class_count: usize,
    pub data: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros(surfel_count: usize, class_count: usize) -> Self {
        Self {
            surfel_count,
            class_count,
            data: vec![0.0; surfel_count * record_len(class_count)],
        }
    }

    pub fn stride(&self) -> usize {
        record_len(self.class_count)
    }

    pub fn surfel(&self, i: usize) -> &[f64] {
        let s = self.stride();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn surfel_mut(&mut self, i: usize) -> &mut [f64] {
        let s = self.stride();
        &mut self.data[i * s..(i + 1) * s]
    }

    pub fn center(&self, i: usize) -> Vec3 {
        let r = self.surfel(i);
        Vec3::new(r[0], r[1], r[2])
    }

    pub fn rotation(&self, i: usize) -> Vec3 {
        let r = self.surfel(i);
        Vec3::new(r[5], r[6], r[7])
    }

    pub fn opacity(&self, i: usize) -> f64 {
        self.surfel(i)[OFF_OPACITY]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scale_by(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    /// Errors on the first non-finite entry, naming surfel and parameter.
    pub fn check_finite(&self) -> Result<()> {
        let s = self.stride();
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(idx) => Err(Error::NonFinite {
                surfel: idx / s,
                param: param_label(idx % s),
            }),
        }
    }

    fn negate_class(&mut self, class: ParamClass) {
        let s = self.stride();
        for (idx, v) in self.data.iter_mut().enumerate() {
            if ParamClass::of_offset(idx % s) == class {
                *v = -*v;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BackwardOptions {
    pub l1: L1Mode,
    /// Negates one parameter class; used to confirm the checker catches faults.
    pub inject_fault: Option<ParamClass>,
}

// Per-surfel accumulator layout inside a work chunk.
const ACC_CENTER: usize = 0;
const ACC_SCALE: usize = 3;
const ACC_ROT: usize = 5;
const ACC_OPACITY: usize = 8;
const ACC_COLOR: usize = 9;
const ACC_SEMANTIC: usize = 12;

struct Coefficients {
    color: f64,
    depth: f64,
    normal: f64,
    semantic: f64,
}

/// Total loss and its gradient for one rendered view.
pub fn backward(
    scene: &Scene,
    camera: &Camera,
    out: &RenderOutput,
    target: &LossTarget,
    weights: &LossWeights,
    opts: &BackwardOptions,
) -> Result<(LossBreakdown, ParamGrads)> {
    if out.contributions.is_none() {
        return Err(Error::MissingContributions);
    }
    if out.width != camera.width() || out.height != camera.height() {
        return Err(Error::InvalidInput("render does not match camera".into()));
    }
    let breakdown = loss::total_loss_with(out, target, weights, opts.l1)?;
    let (w, h) = (out.width, out.height);
    let n_pix = w * h;
    let c = scene.class_count();
    let n_surfels = scene.len();

    let per = |lambda: f64, count: usize| if count > 0 { lambda / count as f64 } else { 0.0 };
    let k = Coefficients {
        color: per(weights.lambda_c, target.valid.count()),
        depth: per(weights.lambda_d, n_pix),
        normal: per(weights.lambda_n, out.normal_valid.iter().filter(|&&v| v).count()),
        semantic: per(weights.lambda_s, target.semantic_valid.count()),
    };

    let g_depth = depth_buffer_gradient(camera, out, k.normal);
    let attrs = SurfelAttributes::for_view(scene, camera);

    let acc_len = ACC_SEMANTIC + c;
    let rows_per_chunk = h.div_ceil(16).max(1);
    let starts: Vec<usize> = (0..h).step_by(rows_per_chunk).collect();
    let partials: Vec<Vec<f64>> = starts
        .par_iter()
        .map(|&y0| {
            let mut acc = vec![0.0; n_surfels * acc_len];
            let mut scratch = PixelScratch::new(c);
            for y in y0..(y0 + rows_per_chunk).min(h) {
                for x in 0..w {
                    pixel_backward(
                        x, y, scene, camera, out, target, &attrs, &g_depth, &k, opts.l1,
                        &mut scratch, &mut acc, acc_len,
                    );
                }
            }
            acc
        })
        .collect();
    let mut acc = vec![0.0; n_surfels * acc_len];
    for part in &partials {
        for (a, p) in acc.iter_mut().zip(part) {
            *a += p;
        }
    }

    let mut grads = ParamGrads::zeros(n_surfels, c);
    let cam_center = camera.center();
    grads
        .data
        .par_chunks_mut(record_len(c))
        .zip(scene.surfels.par_iter())
        .enumerate()
        .for_each(|(i, (rec, surfel))| {
            let a = &acc[i * acc_len..(i + 1) * acc_len];
            let mut g_center = Vec3::new(a[0], a[1], a[2]);
            let g_color = [a[ACC_COLOR], a[ACC_COLOR + 1], a[ACC_COLOR + 2]];
            let mut g_sh: ShCoeffs = [[0.0; SH_COEFFS]; 3];
            let view = surfel.center - cam_center;
            let len = view.norm();
            if len > 0.0 && g_color.iter().any(|&g| g != 0.0) {
                let dir = view / len;
                let g_dir = sh::backward(&surfel.sh, &dir, g_color, &mut g_sh);
                g_center += (g_dir - dir * dir.dot(&g_dir)) / len;
            }
            rec[0] = g_center.x;
            rec[1] = g_center.y;
            rec[2] = g_center.z;
            rec[OFF_SCALE..OFF_OPACITY].copy_from_slice(&a[ACC_SCALE..ACC_OPACITY]);
            rec[OFF_OPACITY] = a[ACC_OPACITY];
            for ch in 0..3 {
                rec[OFF_SH + ch * SH_COEFFS..OFF_SH + (ch + 1) * SH_COEFFS]
                    .copy_from_slice(&g_sh[ch]);
            }
            rec[OFF_SEMANTIC..].copy_from_slice(&a[ACC_SEMANTIC..]);
        });

    grads.check_finite()?;
    if let Some(class) = opts.inject_fault {
        grads.negate_class(class);
    }
    Ok((breakdown, grads))
}

/// Gradient of the normal-consistency term with respect to the depth buffer,
/// through the dominant-normal construction.
fn depth_buffer_gradient(camera: &Camera, out: &RenderOutput, k_normal: f64) -> Vec<f64> {
    let (w, h) = (out.width, out.height);
    let mut g_depth = vec![0.0; w * h];
    if k_normal == 0.0 {
        return g_depth;
    }
    let contribs = out.contributions.as_ref().expect("checked by caller");
    let dir = |q: usize| camera.pixel_ray(q % w, q / w).dir;
    let point = |q: usize| camera.pixel_ray(q % w, q / w).at(out.depth[q]);
    for p in 0..w * h {
        if !out.normal_valid[p] {
            continue;
        }
        let (hits, omegas) = contribs.ray(p);
        let mut weighted = Vec3::zeros();
        for (hit, om) in hits.iter().zip(omegas) {
            weighted += hit.normal * *om;
        }
        let g_n = weighted * -k_normal;
        if g_n == Vec3::zeros() {
            continue;
        }
        let Some((sx, sy)) = normal_stencil(p % w, p / w, w, h, &out.alpha) else {
            continue;
        };
        let dx = (point(sx.0) - point(sx.1)) * sx.2;
        let dy = (point(sy.0) - point(sy.1)) * sy.2;
        let m = dx.cross(&dy);
        let len = m.norm();
        let m_hat = m / len;
        let sign = if m_hat.z < 0.0 { -1.0 } else { 1.0 };
        let g_hat = g_n * sign;
        let g_m = (g_hat - m_hat * m_hat.dot(&g_hat)) / len;
        let g_dx = dy.cross(&g_m);
        let g_dy = g_m.cross(&dx);
        for (q, coef, g) in [
            (sx.0, sx.2, &g_dx),
            (sx.1, -sx.2, &g_dx),
            (sy.0, sy.2, &g_dy),
            (sy.1, -sy.2, &g_dy),
        ] {
            g_depth[q] += coef * g.dot(&dir(q));
        }
    }
    g_depth
}

struct PixelScratch {
    g_sem: Vec<f64>,
    probs: Vec<f64>,
    abs_sum: Vec<f64>,
    sign_sum: Vec<f64>,
    g_omega: Vec<f64>,
    g_z: Vec<f64>,
    trans: Vec<f64>,
}

impl PixelScratch {
    fn new(c: usize) -> Self {
        Self {
            g_sem: vec![0.0; c],
            probs: vec![0.0; c],
            abs_sum: Vec::new(),
            sign_sum: Vec::new(),
            g_omega: Vec::new(),
            g_z: Vec::new(),
            trans: Vec::new(),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn pixel_backward(
    x: usize,
    y: usize,
    scene: &Scene,
    camera: &Camera,
    out: &RenderOutput,
    target: &LossTarget,
    attrs: &SurfelAttributes,
    g_depth: &[f64],
    k: &Coefficients,
    l1: L1Mode,
    s: &mut PixelScratch,
    acc: &mut [f64],
    acc_len: usize,
) {
    let w = out.width;
    let p = y * w + x;
    let contribs = out.contributions.as_ref().expect("checked by caller");
    let (hits, omegas) = contribs.ray(p);
    let n = hits.len();
    if n == 0 {
        return;
    }
    let c = out.class_count;
    let total_alpha = out.alpha[p];
    let depth = out.depth[p];

    let color_on = k.color != 0.0 && target.valid.data[p] && total_alpha >= ALPHA_THRESHOLD;
    let mut g_col = [0.0; 3];
    if color_on {
        let t = &target.image.data[p];
        for ch in 0..3 {
            g_col[ch] = k.color * l1.sign(out.color[p][ch] - t[ch]);
        }
    }
    let sem_on = k.semantic != 0.0 && target.semantic_valid.data[p];
    if sem_on {
        loss::log_softmax_parts(out.semantic_of(p), &mut s.probs);
        let label = target.labels.data[p] as usize;
        for j in 0..c {
            let onehot = if j == label { 1.0 } else { 0.0 };
            s.g_sem[j] = k.semantic * (s.probs[j] - onehot);
        }
    }
    let normal_on = k.normal != 0.0 && out.normal_valid[p];
    let big_n = out.dominant_normal[p];
    let g_d = if total_alpha > 0.0 { g_depth[p] } else { 0.0 };
    let depth_on = k.depth != 0.0 && n >= 2;
    if depth_on {
        loss::pair_sums(hits, omegas, l1, &mut s.abs_sum, &mut s.sign_sum);
    }

    s.g_omega.clear();
    s.g_z.clear();
    for (i, hit) in hits.iter().enumerate() {
        let si = hit.surfel_index;
        let om = omegas[i];
        let mut g = 0.0;
        let mut gz = 0.0;
        if color_on {
            let col = &attrs.color[si];
            for ch in 0..3 {
                g += g_col[ch] * (col[ch] - out.background[ch]);
            }
            let a = &mut acc[si * acc_len + ACC_COLOR..si * acc_len + ACC_COLOR + 3];
            for ch in 0..3 {
                a[ch] += g_col[ch] * om;
            }
        }
        if sem_on {
            let logits = attrs.semantic_of(si);
            let a = &mut acc[si * acc_len + ACC_SEMANTIC..(si + 1) * acc_len];
            for j in 0..c {
                g += s.g_sem[j] * logits[j];
                a[j] += s.g_sem[j] * om;
            }
        }
        if depth_on {
            g += k.depth * s.abs_sum[i];
            gz += k.depth * om * s.sign_sum[i];
        }
        if normal_on {
            g += k.normal * (1.0 - hit.normal.dot(&big_n));
        }
        if g_d != 0.0 {
            g += g_d * (hit.depth - depth) / total_alpha;
            gz += g_d * om / total_alpha;
        }
        s.g_omega.push(g);
        s.g_z.push(gz);
    }

    s.trans.clear();
    let mut t = 1.0;
    for hit in hits {
        s.trans.push(t);
        t *= 1.0 - scene.surfels[hit.surfel_index].opacity * hit.weight;
    }

    let ray = camera.pixel_ray(x, y);
    let mut rest = 0.0;
    for i in (0..n).rev() {
        let hit = &hits[i];
        let surfel = &scene.surfels[hit.surfel_index];
        let a = surfel.opacity * hit.weight;
        let g_a = s.trans[i] * (s.g_omega[i] - rest);
        rest = s.g_omega[i] * a + (1.0 - a) * rest;

        let g_nc = if normal_on {
            big_n * (-k.normal * omegas[i])
        } else {
            Vec3::zeros()
        };
        let base = hit.surfel_index * acc_len;
        hit_geometry_backward(surfel, &ray, hit, g_a, s.g_z[i], &g_nc, &mut acc[base..base + ACC_COLOR]);
    }
}

/// Chains `dL/da`, `dL/dz` and `dL/dn` of one hit into center, scales,
/// rotation and opacity, written to `acc[0..9]`.
fn hit_geometry_backward(
    surfel: &Surfel,
    ray: &Ray,
    hit: &raster::SplatHit,
    g_a: f64,
    g_z: f64,
    g_nc: &Vec3,
    acc: &mut [f64],
) {
    let (tu, tv) = (surfel.tangent_u, surfel.tangent_v);
    let (su, sv) = (surfel.scale_u, surfel.scale_v);
    let (u, v) = (hit.u, hit.v);
    let gauss = hit.weight;

    let g_alpha = g_a * gauss;
    let g_gauss = g_a * surfel.opacity;
    let g_u = -g_gauss * gauss * u;
    let g_v = -g_gauss * gauss * v;

    let n_raw = surfel.raw_normal();
    let nd = n_raw.dot(&ray.dir);
    let wv = ray.at(hit.depth) - surfel.center;

    let g_w = tu * (g_u / su) + tv * (g_v / sv);
    let mut g_tu = wv * (g_u / su);
    let mut g_tv = wv * (g_v / sv);
    let g_su = -g_u * u / su;
    let g_sv = -g_v * v / sv;

    let g_t = g_z + g_w.dot(&ray.dir);
    let g_p = -g_w + n_raw * (g_t / nd);
    let g_n = -wv * (g_t / nd) + g_nc * surfel.normal_sign();
    g_tu += tv.cross(&g_n);
    g_tv += g_n.cross(&tu);
    let g_rot = tu.cross(&g_tu) + tv.cross(&g_tv);

    acc[ACC_CENTER] += g_p.x;
    acc[ACC_CENTER + 1] += g_p.y;
    acc[ACC_CENTER + 2] += g_p.z;
    acc[ACC_SCALE] += g_su;
    acc[ACC_SCALE + 1] += g_sv;
    acc[ACC_ROT] += g_rot.x;
    acc[ACC_ROT + 1] += g_rot.y;
    acc[ACC_ROT + 2] += g_rot.z;
    acc[ACC_OPACITY] += g_alpha;
}

/// Shifts one scalar parameter of one surfel by `h`. Rotation offsets apply
/// `exp([h e_k]_x)` to the tangent frame.
pub fn perturb(surfel: &mut Surfel, offset: usize, h: f64) {
    match offset {
        0..=2 => surfel.center[offset] += h,
        3 => surfel.scale_u += h,
        4 => surfel.scale_v += h,
        5..=7 => {
            let mut d = Vec3::zeros();
            d[offset - OFF_ROTATION] = h;
            surfel.rotate(&d);
        }
        8 => surfel.opacity += h,
        o if o < OFF_SEMANTIC => {
            let k = o - OFF_SH;
            surfel.sh[k / SH_COEFFS][k % SH_COEFFS] += h;
        }
        o => surfel.semantic[o - OFF_SEMANTIC] += h,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Entries whose analytic and numeric magnitudes both fall below this are
    /// not compared.
    pub magnitude_floor: f64,
    pub render: RenderOptions,
    pub l1: L1Mode,
    pub inject_fault: Option<ParamClass>,
}

/// Cutoff used by the checker; wide enough that no footprint edge crosses the
/// image, so the loss is smooth in every parameter.
pub const CHECK_CUTOFF: f64 = 10.0;

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-4,
            magnitude_floor: 1e-6,
            render: RenderOptions {
                cutoff: CHECK_CUTOFF,
                retain_contributions: true,
                ..RenderOptions::default()
            },
            l1: L1Mode::Smooth(loss::SMOOTH_L1_EPS),
            inject_fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassReport {
    pub class: ParamClass,
    pub compared: usize,
    pub max_rel_error: f64,
    /// Worst entry, e.g. `surfel 3 sh[0][5]`.
    pub worst: Option<String>,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub classes: Vec<ClassReport>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn failing(&self) -> impl Iterator<Item = &ClassReport> {
        self.classes.iter().filter(|c| !c.passed)
    }
}

pub fn evaluate_loss(
    scene: &Scene,
    camera: &Camera,
    target: &LossTarget,
    weights: &LossWeights,
    render: &RenderOptions,
    l1: L1Mode,
) -> Result<LossBreakdown> {
    let opts = RenderOptions {
        retain_contributions: true,
        ..*render
    };
    let out = raster::render(scene, camera, &opts)?;
    loss::total_loss_with(&out, target, weights, l1)
}

/// Compares analytic gradients against central differences of the loss.
pub fn finite_diff_check(
    scene: &Scene,
    camera: &Camera,
    target: &LossTarget,
    weights: &LossWeights,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let render_opts = RenderOptions {
        retain_contributions: true,
        ..opts.render
    };
    let out = raster::render(scene, camera, &render_opts)?;
    let (_, analytic) = backward(
        scene,
        camera,
        &out,
        target,
        weights,
        &BackwardOptions {
            l1: opts.l1,
            inject_fault: opts.inject_fault,
        },
    )?;

    let stride = record_len(scene.class_count());
    let entries: Vec<(usize, usize)> = (0..scene.len())
        .flat_map(|i| (0..stride).map(move |o| (i, o)))
        .collect();
    let numeric: Vec<f64> = entries
        .par_iter()
        .map(|&(i, o)| -> Result<f64> {
            let mut plus = scene.clone();
            perturb(&mut plus.surfels[i], o, opts.step);
            let mut minus = scene.clone();
            perturb(&mut minus.surfels[i], o, -opts.step);
            let lp = evaluate_loss(&plus, camera, target, weights, &opts.render, opts.l1)?.total;
            let lm = evaluate_loss(&minus, camera, target, weights, &opts.render, opts.l1)?.total;
            Ok((lp - lm) / (2.0 * opts.step))
        })
        .collect::<Result<_>>()?;

    let mut classes: Vec<ClassReport> = ParamClass::ALL
        .iter()
        .map(|&class| ClassReport {
            class,
            compared: 0,
            max_rel_error: 0.0,
            worst: None,
            passed: true,
        })
        .collect();
    for (&(i, o), &num) in entries.iter().zip(&numeric) {
        let ana = analytic.surfel(i)[o];
        let mag = ana.abs().max(num.abs());
        if !(mag > opts.magnitude_floor) {
            continue;
        }
        let rel = (ana - num).abs() / mag;
        let rep = &mut classes[ParamClass::ALL
            .iter()
            .position(|&c| c == ParamClass::of_offset(o))
            .unwrap()];
        rep.compared += 1;
        if rel > rep.max_rel_error || rep.worst.is_none() {
            rep.max_rel_error = rel.max(rep.max_rel_error);
            rep.worst = Some(format!("surfel {i} {}", param_label(o)));
        }
        if !(rel < opts.tolerance) {
            rep.passed = false;
        }
    }
    let passed = classes.iter().all(|c| c.passed);
    Ok(GradCheckReport { classes, passed })
}

/// A small randomized scene with its camera and supervision, built so the
/// loss is smooth around the current parameters.
#[derive(Clone, Debug)]
pub struct GradCheckCase {
    pub scene: Scene,
    pub camera: Camera,
    pub target: LossTarget,
}

pub const CHECK_IMAGE_SIZE: usize = 16;
pub const CHECK_MAX_SURFELS: usize = 8;
pub const CHECK_CLASS_NAMES: [&str; 4] = ["road", "lane_marking", "sidewalk", "curb"];

/// Deterministic random case: one wide ground surfel under up to seven
/// smaller surfels stacked on separated layers, viewed from about 4 m.
pub fn random_check_case(seed: u64) -> GradCheckCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = CHECK_IMAGE_SIZE;
    let class_count = CHECK_CLASS_NAMES.len();
    let k = Intrinsics {
        fx: 20.0,
        fy: 20.0,
        cx: size as f64 / 2.0,
        cy: size as f64 / 2.0,
        width: size,
        height: size,
    };
    let pose = Pose::looking_down(
        Vec3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), 4.0),
        rng.gen_range(-3.1..3.1),
        std::f64::consts::FRAC_PI_2 - rng.gen_range(0.0..0.25),
    );
    let camera = Camera::new(k, pose);

    let mut scene = Scene::new(CHECK_CLASS_NAMES.iter().map(|s| s.to_string()).collect());
    let count = rng.gen_range(4..=CHECK_MAX_SURFELS);
    for layer in 0..count {
        let (center, scale, opacity) = if layer == 0 {
            (
                Vec3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), 0.0),
                (rng.gen_range(1.5..2.5), rng.gen_range(1.5..2.5)),
                0.8,
            )
        } else {
            (
                Vec3::new(
                    rng.gen_range(-0.8..0.8),
                    rng.gen_range(-0.8..0.8),
                    0.15 * layer as f64 + rng.gen_range(-0.02..0.02),
                ),
                (rng.gen_range(0.3..0.8), rng.gen_range(0.3..0.8)),
                rng.gen_range(0.2..0.9),
            )
        };
        let mut s = Surfel::horizontal(center, scale.0, opacity, class_count);
        s.scale_v = scale.1;
        s.rotate(&Vec3::new(0.0, 0.0, rng.gen_range(-3.1..3.1)));
        s.rotate(&Vec3::new(
            rng.gen_range(-0.005..0.005),
            rng.gen_range(-0.005..0.005),
            0.0,
        ));
        for ch in 0..3 {
            s.sh[ch][0] = sh::dc_from_rgb(rng.gen_range(0.3..0.7));
            for kk in 1..SH_COEFFS {
                s.sh[ch][kk] = rng.gen_range(-0.02..0.02);
            }
        }
        for l in s.semantic.iter_mut() {
            *l = rng.gen_range(-1.0..1.0);
        }
        scene.surfels.push(s);
    }
    // Shuffle so the bottom surfel is not always index 0.
    for i in (1..scene.surfels.len()).rev() {
        let j = rng.gen_range(0..=i);
        scene.surfels.swap(i, j);
    }

    let opts = GradCheckOptions::default();
    let out = raster::render(&scene, &camera, &opts.render).expect("valid check camera");
    let n = size * size;
    let image = out
        .color
        .iter()
        .map(|c| {
            let mut t = *c;
            for v in t.iter_mut() {
                let off = rng.gen_range(0.03..0.1);
                *v += if rng.gen_bool(0.5) { off } else { -off };
            }
            t
        })
        .collect();
    let labels = (0..n).map(|_| rng.gen_range(0..class_count as u16)).collect();
    let valid = (0..n).map(|_| rng.gen_bool(0.85)).collect();
    let semantic_valid = (0..n).map(|_| rng.gen_bool(0.85)).collect();
    let target = LossTarget {
        image: Raster::from_vec(size, size, image).unwrap(),
        valid: Raster::from_vec(size, size, valid).unwrap(),
        labels: Raster::from_vec(size, size, labels).unwrap(),
        semantic_valid: Raster::from_vec(size, size, semantic_valid).unwrap(),
    };
    GradCheckCase {
        scene,
        camera,
        target,
    }
}
