//! Forward rendering of surfel fields.
//!
//! Every pixel casts one ray, intersects it exactly with each candidate
//! surfel plane, sorts the hits by depth (ties by surfel index) and blends
//! front to back. Candidates come from 16x16 pixel tiles binned by each
//! surfel's conservative screen-space bounds; the naive all-surfels loop is
//! kept as a reference path and produces bit-identical buffers.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scene::{Camera, Ray, Scene, Surfel, Vec3};
use crate::sh;

pub const DEFAULT_CUTOFF: f64 = 3.0;
pub const GRAZING_EPS: f64 = 1e-9;
pub const ALPHA_THRESHOLD: f64 = 1e-4;
pub const TILE_SIZE: usize = 16;
pub const DEFAULT_NEAR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Traversal {
    #[default]
    Tiled,
    Naive,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    pub background: [f64; 3],
    /// Truncation radius in the surfel's (u, v) chart.
    pub cutoff: f64,
    pub near: f64,
    pub retain_contributions: bool,
    pub traversal: Traversal,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            background: [0.5, 0.5, 0.5],
            cutoff: DEFAULT_CUTOFF,
            near: DEFAULT_NEAR,
            retain_contributions: false,
            traversal: Traversal::Tiled,
        }
    }
}

impl RenderOptions {
    pub fn training() -> Self {
        Self {
            retain_contributions: true,
            ..Self::default()
        }
    }
}

/// One ray-surfel intersection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplatHit {
    pub surfel_index: usize,
    pub u: f64,
    pub v: f64,
    /// Ray parameter; camera-frame depth for perspective views.
    pub depth: f64,
    /// Kernel value `G(u, v)`.
    pub weight: f64,
    /// Upward-canonical surfel normal.
    pub normal: Vec3,
}

/// Gaussian kernel in the tangent-plane chart.
#[inline]
pub fn gaussian_weight(u: f64, v: f64) -> f64 {
    (-(u * u + v * v) * 0.5).exp()
}

/// Exact ray-plane intersection expressed in the surfel's (u, v) chart.
pub fn intersect_ray(
    ray: &Ray,
    surfel: &Surfel,
    surfel_index: usize,
    cutoff: f64,
    near: f64,
) -> Option<SplatHit> {
    let n = surfel.raw_normal();
    let nd = n.dot(&ray.dir);
    if nd.abs() < GRAZING_EPS * ray.dir.norm() {
        return None;
    }
    let t = n.dot(&(surfel.center - ray.origin)) / nd;
    if !(t > near) {
        return None;
    }
    let w = ray.at(t) - surfel.center;
    let u = surfel.tangent_u.dot(&w) / surfel.scale_u;
    let v = surfel.tangent_v.dot(&w) / surfel.scale_v;
    let r2 = u * u + v * v;
    if r2 > cutoff * cutoff {
        return None;
    }
    Some(SplatHit {
        surfel_index,
        u,
        v,
        depth: t,
        weight: (-0.5 * r2).exp(),
        normal: n * surfel.normal_sign(),
    })
}

/// Intersection of the viewing ray through pixel `(x, y)` with one surfel.
pub fn ray_splat_intersect(
    camera: &Camera,
    pixel: (usize, usize),
    surfel: &Surfel,
    surfel_index: usize,
    opts: &RenderOptions,
) -> Option<SplatHit> {
    let ray = camera.pixel_ray(pixel.0, pixel.1);
    intersect_ray(&ray, surfel, surfel_index, opts.cutoff, opts.near)
}

#[inline]
fn hit_order(a: &SplatHit, b: &SplatHit) -> std::cmp::Ordering {
    a.depth
        .total_cmp(&b.depth)
        .then(a.surfel_index.cmp(&b.surfel_index))
}

pub fn sort_hits_in_place(hits: &mut [SplatHit]) {
    hits.sort_unstable_by(hit_order);
}

/// Ascending depth, ties broken by ascending surfel index.
pub fn sort_hits(mut hits: Vec<SplatHit>) -> Vec<SplatHit> {
    sort_hits_in_place(&mut hits);
    hits
}

/// Per-surfel quantities that are constant over one view.
#[derive(Clone, Debug)]
pub struct SurfelAttributes {
    pub opacity: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    /// Flattened `[surfel][class]` logits.
    pub semantic: Vec<f64>,
    pub class_count: usize,
}

impl SurfelAttributes {
    pub fn for_view<V: View + ?Sized>(scene: &Scene, view: &V) -> Self {
        let color = scene
            .surfels
            .par_iter()
            .map(|s| sh::sh_eval(&s.sh, &view.view_dir(&s.center)))
            .collect();
        Self {
            opacity: scene.surfels.iter().map(|s| s.opacity).collect(),
            color,
            semantic: scene
                .surfels
                .iter()
                .flat_map(|s| s.semantic.iter().copied())
                .collect(),
            class_count: scene.class_count(),
        }
    }

    pub fn semantic_of(&self, i: usize) -> &[f64] {
        &self.semantic[i * self.class_count..(i + 1) * self.class_count]
    }
}

/// Blend weights for one ray.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PerRayContribution {
    pub hits: Vec<SplatHit>,
    pub omegas: Vec<f64>,
}

/// Result of blending one ray, before background compositing.
#[derive(Clone, Debug, PartialEq)]
pub struct RayBlend {
    pub color: [f64; 3],
    /// Weight-normalized depth, zero when nothing contributes.
    pub depth: f64,
    pub normal: Vec3,
    pub semantic: Vec<f64>,
    pub alpha: f64,
}

#[derive(Clone, Copy, Debug)]
struct BlendScalars {
    color: [f64; 3],
    depth: f64,
    normal: Vec3,
    alpha: f64,
}

fn blend_into(
    hits: &[SplatHit],
    attrs: &SurfelAttributes,
    omegas: &mut Vec<f64>,
    semantic: &mut [f64],
) -> BlendScalars {
    let mut transmittance = 1.0;
    let mut color = [0.0; 3];
    let mut depth_sum = 0.0;
    let mut normal_sum = Vec3::zeros();
    let mut alpha = 0.0;
    semantic.iter_mut().for_each(|s| *s = 0.0);
    for hit in hits {
        let i = hit.surfel_index;
        let a = attrs.opacity[i] * hit.weight;
        let omega = a * transmittance;
        omegas.push(omega);
        let c = &attrs.color[i];
        for ch in 0..3 {
            color[ch] += omega * c[ch];
        }
        for (s, l) in semantic.iter_mut().zip(attrs.semantic_of(i)) {
            *s += omega * l;
        }
        depth_sum += omega * hit.depth;
        normal_sum += hit.normal * omega;
        alpha += omega;
        transmittance *= 1.0 - a;
    }
    let (depth, normal) = if alpha > 0.0 {
        let n = normal_sum / alpha;
        let len = n.norm();
        (
            depth_sum / alpha,
            if len > 0.0 { n / len } else { Vec3::zeros() },
        )
    } else {
        (0.0, Vec3::zeros())
    };
    BlendScalars {
        color,
        depth,
        normal,
        alpha,
    }
}

/// Front-to-back blending of depth-sorted hits.
pub fn blend_ray(hits: &[SplatHit], attrs: &SurfelAttributes) -> (RayBlend, PerRayContribution) {
    let mut omegas = Vec::with_capacity(hits.len());
    let mut semantic = vec![0.0; attrs.class_count];
    let b = blend_into(hits, attrs, &mut omegas, &mut semantic);
    (
        RayBlend {
            color: b.color,
            depth: b.depth,
            normal: b.normal,
            semantic,
            alpha: b.alpha,
        },
        PerRayContribution {
            hits: hits.to_vec(),
            omegas,
        },
    )
}

/// Inclusive pixel bounds `[x0, x1, y0, y1]`.
pub type PixelBounds = [usize; 4];

/// A ray generator over a pixel grid.
pub trait View: Sync {
    fn width(&self) -> usize;
    fn height(&self) -> usize;
    fn ray(&self, x: usize, y: usize) -> Ray;
    /// Direction used for spherical-harmonic color of a surfel at `center`.
    fn view_dir(&self, center: &Vec3) -> Vec3;
    /// Conservative pixel bounds of the surfel's truncated footprint.
    fn surfel_bounds(&self, surfel: &Surfel, cutoff: f64, near: f64) -> Option<PixelBounds>;
}

/// Clips a floating-point image-coordinate box to pixel indices whose centers
/// fall inside it, padded by one pixel.
pub(crate) fn clip_bounds(
    min: (f64, f64),
    max: (f64, f64),
    width: usize,
    height: usize,
) -> Option<PixelBounds> {
    let lo = |v: f64| (v - 0.5).ceil() - 1.0;
    let hi = |v: f64| (v - 0.5).floor() + 1.0;
    let (x0, x1) = (lo(min.0), hi(max.0));
    let (y0, y1) = (lo(min.1), hi(max.1));
    if !(x0.is_finite() && x1.is_finite() && y0.is_finite() && y1.is_finite()) {
        return Some([0, width - 1, 0, height - 1]);
    }
    if x1 < 0.0 || y1 < 0.0 || x0 > (width - 1) as f64 || y0 > (height - 1) as f64 {
        return None;
    }
    Some([
        x0.max(0.0) as usize,
        x1.min((width - 1) as f64) as usize,
        y0.max(0.0) as usize,
        y1.min((height - 1) as f64) as usize,
    ])
}

pub(crate) fn footprint_corners(surfel: &Surfel, cutoff: f64) -> [Vec3; 4] {
    [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)]
        .map(|(a, b)| surfel.local_to_world(a * cutoff, b * cutoff))
}

impl View for Camera {
    fn width(&self) -> usize {
        self.intrinsics.width
    }

    fn height(&self) -> usize {
        self.intrinsics.height
    }

    fn ray(&self, x: usize, y: usize) -> Ray {
        self.pixel_ray(x, y)
    }

    fn view_dir(&self, center: &Vec3) -> Vec3 {
        let d = center - self.center();
        let len = d.norm();
        if len > 0.0 {
            d / len
        } else {
            self.pose.rotation.column(2).into_owned()
        }
    }

    fn surfel_bounds(&self, surfel: &Surfel, cutoff: f64, near: f64) -> Option<PixelBounds> {
        let (w, h) = (self.width(), self.height());
        let mut min = (f64::INFINITY, f64::INFINITY);
        let mut max = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for corner in footprint_corners(surfel, cutoff) {
            match self.project(&corner, near) {
                Some((px, py, _)) => {
                    min = (min.0.min(px), min.1.min(py));
                    max = (max.0.max(px), max.1.max(py));
                }
                // Part of the footprint is behind the near plane.
                None => return Some([0, w - 1, 0, h - 1]),
            }
        }
        clip_bounds(min, max, w, h)
    }
}

/// Retained per-pixel hit lists, row-major by pixel.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Contributions {
    pub offsets: Vec<usize>,
    pub hits: Vec<SplatHit>,
    pub omegas: Vec<f64>,
}

impl Contributions {
    pub fn pixel_count(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn ray(&self, pixel: usize) -> (&[SplatHit], &[f64]) {
        let r = self.offsets[pixel]..self.offsets[pixel + 1];
        (&self.hits[r.clone()], &self.omegas[r])
    }

    pub fn per_ray(&self, pixel: usize) -> PerRayContribution {
        let (h, o) = self.ray(pixel);
        PerRayContribution {
            hits: h.to_vec(),
            omegas: o.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub class_count: usize,
    pub background: [f64; 3],
    pub color: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub normal: Vec<Vec3>,
    /// Flattened `[pixel][class]` blended logits.
    pub semantic: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Plane normal from the depth buffer; meaningful where `normal_valid`.
    pub dominant_normal: Vec<Vec3>,
    pub normal_valid: Vec<bool>,
    pub contributions: Option<Contributions>,
}

impl RenderOutput {
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn semantic_of(&self, pixel: usize) -> &[f64] {
        &self.semantic[pixel * self.class_count..(pixel + 1) * self.class_count]
    }

    pub fn color_image(&self) -> crate::image::RgbImage {
        crate::image::Raster {
            width: self.width,
            height: self.height,
            data: self.color.clone(),
        }
    }

    /// Argmax of the blended logits per pixel.
    pub fn semantic_argmax(&self) -> Vec<u16> {
        (0..self.pixel_count())
            .map(|p| argmax(self.semantic_of(p)) as u16)
            .collect()
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Output of one work unit: a list of pixels and their buffers.
struct Chunk {
    pixels: Vec<usize>,
    scalars: Vec<BlendScalars>,
    semantic: Vec<f64>,
    hit_ends: Vec<usize>,
    hits: Vec<SplatHit>,
    omegas: Vec<f64>,
}

impl Chunk {
    fn new() -> Self {
        Self {
            pixels: Vec::new(),
            scalars: Vec::new(),
            semantic: Vec::new(),
            hit_ends: Vec::new(),
            hits: Vec::new(),
            omegas: Vec::new(),
        }
    }

    fn push_pixel(
        &mut self,
        pixel: usize,
        scratch: &mut Vec<SplatHit>,
        attrs: &SurfelAttributes,
        keep: bool,
    ) {
        sort_hits_in_place(scratch);
        let start = self.semantic.len();
        self.semantic.resize(start + attrs.class_count, 0.0);
        let mut omegas = std::mem::take(&mut self.omegas);
        let before = omegas.len();
        let b = blend_into(scratch, attrs, &mut omegas, &mut self.semantic[start..]);
        if keep {
            self.hits.extend_from_slice(scratch);
        } else {
            omegas.truncate(before);
        }
        self.omegas = omegas;
        self.pixels.push(pixel);
        self.scalars.push(b);
        self.hit_ends.push(self.hits.len());
    }
}

/// Renders raw blend buffers for any view. Dominant normals are left invalid.
pub fn render_view<V: View + ?Sized>(
    scene: &Scene,
    view: &V,
    opts: &RenderOptions,
) -> RenderOutput {
    let (w, h) = (view.width(), view.height());
    let attrs = SurfelAttributes::for_view(scene, view);
    let keep = opts.retain_contributions;

    let chunks: Vec<Chunk> = match opts.traversal {
        Traversal::Naive => (0..h)
            .into_par_iter()
            .map(|y| {
                let mut chunk = Chunk::new();
                let mut scratch = Vec::new();
                for x in 0..w {
                    let ray = view.ray(x, y);
                    scratch.clear();
                    for (i, s) in scene.surfels.iter().enumerate() {
                        if let Some(hit) = intersect_ray(&ray, s, i, opts.cutoff, opts.near) {
                            scratch.push(hit);
                        }
                    }
                    chunk.push_pixel(y * w + x, &mut scratch, &attrs, keep);
                }
                chunk
            })
            .collect(),
        Traversal::Tiled => {
            let bounds: Vec<Option<PixelBounds>> = scene
                .surfels
                .par_iter()
                .map(|s| view.surfel_bounds(s, opts.cutoff, opts.near))
                .collect();
            let tiles_x = w.div_ceil(TILE_SIZE);
            let tiles_y = h.div_ceil(TILE_SIZE);
            let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
            for (i, b) in bounds.iter().enumerate() {
                if let Some([x0, x1, y0, y1]) = *b {
                    for ty in y0 / TILE_SIZE..=y1 / TILE_SIZE {
                        for tx in x0 / TILE_SIZE..=x1 / TILE_SIZE {
                            bins[ty * tiles_x + tx].push(i as u32);
                        }
                    }
                }
            }
            bins.par_iter()
                .enumerate()
                .map(|(t, bin)| {
                    let (tx, ty) = (t % tiles_x, t / tiles_x);
                    let mut chunk = Chunk::new();
                    let mut scratch = Vec::new();
                    let xs = tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(w);
                    let ys = ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(h);
                    for y in ys {
                        for x in xs.clone() {
                            let ray = view.ray(x, y);
                            scratch.clear();
                            for &i in bin {
                                let i = i as usize;
                                let [x0, x1, y0, y1] = bounds[i].unwrap();
                                if x < x0 || x > x1 || y < y0 || y > y1 {
                                    continue;
                                }
                                if let Some(hit) = intersect_ray(
                                    &ray,
                                    &scene.surfels[i],
                                    i,
                                    opts.cutoff,
                                    opts.near,
                                ) {
                                    scratch.push(hit);
                                }
                            }
                            chunk.push_pixel(y * w + x, &mut scratch, &attrs, keep);
                        }
                    }
                    chunk
                })
                .collect()
        }
    };

    assemble(chunks, w, h, attrs.class_count, opts)
}

fn assemble(
    chunks: Vec<Chunk>,
    w: usize,
    h: usize,
    class_count: usize,
    opts: &RenderOptions,
) -> RenderOutput {
    let n = w * h;
    let mut out = RenderOutput {
        width: w,
        height: h,
        class_count,
        background: opts.background,
        color: vec![opts.background; n],
        depth: vec![0.0; n],
        normal: vec![Vec3::zeros(); n],
        semantic: vec![0.0; n * class_count],
        alpha: vec![0.0; n],
        dominant_normal: vec![Vec3::zeros(); n],
        normal_valid: vec![false; n],
        contributions: None,
    };
    // (chunk, local index) per pixel, used to emit contributions in pixel order.
    let mut location = vec![(u32::MAX, 0u32); n];
    for (ci, chunk) in chunks.iter().enumerate() {
        for (li, (&p, b)) in chunk.pixels.iter().zip(&chunk.scalars).enumerate() {
            location[p] = (ci as u32, li as u32);
            out.alpha[p] = b.alpha;
            out.depth[p] = b.depth;
            out.normal[p] = b.normal;
            out.color[p] = composite(b.color, b.alpha, &opts.background);
            out.semantic[p * class_count..(p + 1) * class_count]
                .copy_from_slice(&chunk.semantic[li * class_count..(li + 1) * class_count]);
        }
    }
    if opts.retain_contributions {
        let total: usize = chunks.iter().map(|c| c.hits.len()).sum();
        let mut contrib = Contributions {
            offsets: Vec::with_capacity(n + 1),
            hits: Vec::with_capacity(total),
            omegas: Vec::with_capacity(total),
        };
        contrib.offsets.push(0);
        for &(ci, li) in &location {
            if ci != u32::MAX {
                let chunk = &chunks[ci as usize];
                let li = li as usize;
                let start = if li == 0 { 0 } else { chunk.hit_ends[li - 1] };
                let end = chunk.hit_ends[li];
                contrib.hits.extend_from_slice(&chunk.hits[start..end]);
                contrib.omegas.extend_from_slice(&chunk.omegas[start..end]);
            }
            contrib.offsets.push(contrib.hits.len());
        }
        out.contributions = Some(contrib);
    }
    out
}

/// Background compositing; pixels below the alpha threshold take the
/// background color exactly.
#[inline]
pub fn composite(blended: [f64; 3], alpha: f64, background: &[f64; 3]) -> [f64; 3] {
    if alpha < ALPHA_THRESHOLD {
        *background
    } else {
        let t = 1.0 - alpha;
        [
            blended[0] + t * background[0],
            blended[1] + t * background[1],
            blended[2] + t * background[2],
        ]
    }
}

/// Neighbor pair used for one finite-difference direction: `(plus, minus,
/// scale)` so that `dP = scale * (P[plus] - P[minus])`.
pub type StencilPair = (usize, usize, f64);

/// Chooses central, forward, or backward differences from pixels with
/// sufficient alpha.
pub fn normal_stencil(
    x: usize,
    y: usize,
    w: usize,
    h: usize,
    alpha: &[f64],
) -> Option<(StencilPair, StencilPair)> {
    let p = y * w + x;
    let ok = |q: usize| alpha[q] >= ALPHA_THRESHOLD;
    if !ok(p) {
        return None;
    }
    let pick = |has_minus: bool, minus: usize, has_plus: bool, plus: usize| -> Option<StencilPair> {
        let m = has_minus && ok(minus);
        let pl = has_plus && ok(plus);
        match (m, pl) {
            (true, true) => Some((plus, minus, 0.5)),
            (false, true) => Some((plus, p, 1.0)),
            (true, false) => Some((p, minus, 1.0)),
            (false, false) => None,
        }
    };
    let sx = pick(x > 0, p.wrapping_sub(1), x + 1 < w, p + 1)?;
    let sy = pick(y > 0, p.wrapping_sub(w), y + 1 < h, p + w)?;
    Some((sx, sy))
}

pub(crate) const NORMAL_MIN_CROSS: f64 = 1e-12;

/// Dominant plane normal from back-projected depth differences.
pub fn dominant_normals(
    camera: &Camera,
    depth: &[f64],
    alpha: &[f64],
) -> (Vec<Vec3>, Vec<bool>) {
    let (w, h) = (camera.width(), camera.height());
    let point = |q: usize| camera.pixel_ray(q % w, q / w).at(depth[q]);
    let mut normals = vec![Vec3::zeros(); w * h];
    let mut valid = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let Some((sx, sy)) = normal_stencil(x, y, w, h, alpha) else {
                continue;
            };
            let dx = (point(sx.0) - point(sx.1)) * sx.2;
            let dy = (point(sy.0) - point(sy.1)) * sy.2;
            let m = dx.cross(&dy);
            let len = m.norm();
            if len < NORMAL_MIN_CROSS {
                continue;
            }
            let n = m / len;
            normals[p] = if n.z < 0.0 { -n } else { n };
            valid[p] = true;
        }
    }
    (normals, valid)
}

/// Perspective render with dominant normals.
pub fn render(scene: &Scene, camera: &Camera, opts: &RenderOptions) -> Result<RenderOutput> {
    camera.validate()?;
    if scene.surfels.iter().any(|s| s.semantic.len() != scene.class_count()) {
        return Err(Error::InvalidInput(
            "surfel semantic length differs from class count".into(),
        ));
    }
    let mut out = render_view(scene, camera, opts);
    let (normals, valid) = dominant_normals(camera, &out.depth, &out.alpha);
    out.dominant_normal = normals;
    out.normal_valid = valid;
    Ok(out)
}
