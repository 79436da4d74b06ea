//! Orthographic top-down export and map-quality metrics.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{LabelMap, Mask, Raster, RgbImage};
use crate::io;
use crate::raster::{self, clip_bounds, footprint_corners, PixelBounds, RenderOptions, View};
use crate::scene::{Ray, Scene, Surfel, Vec3};

/// Cells whose accumulated opacity falls below this are reported as empty.
pub const COVERAGE_THRESHOLD: f64 = 0.1;
/// Semantic value of an empty cell.
pub const EMPTY_LABEL: u16 = 255;
/// Rays start this far above the highest surfel center.
pub const TOP_MARGIN: f64 = 10.0;

pub const RGB_FILE: &str = "bev_rgb.png";
pub const SEMANTIC_FILE: &str = "bev_semantic.png";
pub const ELEVATION_FILE: &str = "bev_elevation.pfm";
pub const COVERAGE_FILE: &str = "bev_coverage.pfm";
pub const META_FILE: &str = "bev_meta.json";

/// Axis-aligned grid in the world xy-plane. Cell `(col, row)` is centered at
/// `(origin_x + col * res, origin_y - row * res)`, so row 0 is the northmost.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BevGrid {
    pub origin: [f64; 2],
    pub resolution: f64,
    pub width: usize,
    pub height: usize,
    pub z_top: f64,
}

impl BevGrid {
    pub fn validate(&self) -> Result<()> {
        if !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return Err(Error::InvalidInput("BEV resolution must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput("BEV grid is empty".into()));
        }
        if !(self.origin.iter().all(|v| v.is_finite()) && self.z_top.is_finite()) {
            return Err(Error::InvalidInput("BEV grid origin is not finite".into()));
        }
        Ok(())
    }

    pub fn cell_center(&self, col: usize, row: usize) -> (f64, f64) {
        (
            self.origin[0] + col as f64 * self.resolution,
            self.origin[1] - row as f64 * self.resolution,
        )
    }

    /// Grid whose cell centers start at the rectangle's min corner and reach
    /// at least its max corner. The tolerance keeps exact multiples of the
    /// resolution from gaining a cell to rounding noise.
    pub fn covering(min: [f64; 2], max: [f64; 2], resolution: f64, z_top: f64) -> Self {
        let cells = |lo: f64, hi: f64| (((hi - lo) / resolution - 1e-9).ceil().max(0.0) as usize) + 1;
        Self {
            origin: [min[0], max[1]],
            resolution,
            width: cells(min[0], max[0]),
            height: cells(min[1], max[1]),
            z_top,
        }
    }

    /// Bounding box of the surfel centers. An empty scene gets a single cell
    /// at the world origin.
    pub fn for_scene(scene: &Scene, resolution: f64) -> Self {
        if scene.is_empty() {
            return Self::covering([0.0; 2], [0.0; 2], resolution, TOP_MARGIN);
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for s in &scene.surfels {
            for k in 0..3 {
                lo[k] = lo[k].min(s.center[k]);
                hi[k] = hi[k].max(s.center[k]);
            }
        }
        Self::covering([lo[0], lo[1]], [hi[0], hi[1]], resolution, hi[2] + TOP_MARGIN)
    }
}

impl View for BevGrid {
    fn width(&self) -> usize {
        self.width
    }

    fn height(&self) -> usize {
        self.height
    }

    fn ray(&self, x: usize, y: usize) -> Ray {
        let (cx, cy) = self.cell_center(x, y);
        Ray {
            origin: Vec3::new(cx, cy, self.z_top),
            dir: -Vec3::z(),
        }
    }

    fn view_dir(&self, _center: &Vec3) -> Vec3 {
        -Vec3::z()
    }

    fn surfel_bounds(&self, surfel: &Surfel, cutoff: f64, _near: f64) -> Option<PixelBounds> {
        // Image coordinates put cell centers at integer + 0.5.
        let mut min = (f64::INFINITY, f64::INFINITY);
        let mut max = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for c in footprint_corners(surfel, cutoff) {
            let px = (c.x - self.origin[0]) / self.resolution + 0.5;
            let py = (self.origin[1] - c.y) / self.resolution + 0.5;
            min = (min.0.min(px), min.1.min(py));
            max = (max.0.max(px), max.1.max(py));
        }
        clip_bounds(min, max, self.width, self.height)
    }
}

/// Raster maps of one BEV export. Empty cells hold NaN elevation and
/// [`EMPTY_LABEL`].
#[derive(Clone, Debug)]
pub struct BevMap {
    pub grid: BevGrid,
    pub rgb: RgbImage,
    pub semantic: LabelMap,
    pub elevation: Raster<f64>,
    pub coverage: Raster<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BevMeta {
    pub grid: BevGrid,
    pub coverage_threshold: f64,
    pub class_names: Vec<String>,
}

pub fn export_bev(scene: &Scene, grid: &BevGrid, opts: &RenderOptions) -> Result<BevMap> {
    grid.validate()?;
    let mut opts = opts.clone();
    opts.retain_contributions = false;
    let out = raster::render_view(scene, grid, &opts);
    let (w, h) = (grid.width, grid.height);
    let covered = |p: usize| out.alpha[p] >= COVERAGE_THRESHOLD;
    let semantic = (0..w * h)
        .map(|p| {
            if covered(p) && out.class_count > 0 {
                raster::argmax(out.semantic_of(p)) as u16
            } else {
                EMPTY_LABEL
            }
        })
        .collect();
    let elevation = (0..w * h)
        .map(|p| if covered(p) { grid.z_top - out.depth[p] } else { f64::NAN })
        .collect();
    Ok(BevMap {
        grid: *grid,
        rgb: out.color_image(),
        semantic: Raster::from_vec(w, h, semantic)?,
        elevation: Raster::from_vec(w, h, elevation)?,
        coverage: Raster::from_vec(w, h, out.alpha.clone())?,
    })
}

impl BevMap {
    pub fn write(&self, dir: &Path, class_names: &[String], palette: &[[u8; 3]]) -> Result<()> {
        io::write_rgb_png(&dir.join(RGB_FILE), &self.rgb)?;
        io::write_label_png(&dir.join(SEMANTIC_FILE), &self.semantic, Some(palette))?;
        io::write_pfm(&dir.join(ELEVATION_FILE), &self.elevation)?;
        io::write_pfm(&dir.join(COVERAGE_FILE), &self.coverage)?;
        io::write_json(
            &dir.join(META_FILE),
            &BevMeta {
                grid: self.grid,
                coverage_threshold: COVERAGE_THRESHOLD,
                class_names: class_names.to_vec(),
            },
        )
    }
}

/// The quantized maps as stored on disk.
#[derive(Clone, Debug)]
pub struct StoredBev {
    pub meta: BevMeta,
    pub rgb: RgbImage,
    pub semantic: LabelMap,
    pub elevation: Raster<f64>,
}

impl StoredBev {
    pub fn read(dir: &Path) -> Result<Self> {
        let meta: BevMeta = io::read_json(&dir.join(META_FILE))?;
        let rgb = io::read_rgb_png(&dir.join(RGB_FILE))?;
        let semantic = io::read_label_png(&dir.join(SEMANTIC_FILE))?;
        // Ground-truth directories written by the generator name the elevation
        // grid `elevation.pfm`.
        let elevation_path = match dir.join(ELEVATION_FILE) {
            p if p.is_file() => p,
            _ => dir.join("elevation.pfm"),
        };
        let elevation = io::read_pfm(&elevation_path)?;
        let (w, h) = (meta.grid.width, meta.grid.height);
        for (name, rw, rh) in [
            (RGB_FILE, rgb.width, rgb.height),
            (SEMANTIC_FILE, semantic.width, semantic.height),
            (ELEVATION_FILE, elevation.width, elevation.height),
        ] {
            if (rw, rh) != (w, h) {
                return Err(Error::Dataset(format!(
                    "{}: {name} is {rw}x{rh}, grid is {w}x{h}",
                    dir.display()
                )));
            }
        }
        Ok(Self {
            meta,
            rgb,
            semantic,
            elevation,
        })
    }
}

/// Peak signal-to-noise ratio for unit-range images over `mask` (all pixels
/// when `None`). Identical inputs give `f64::INFINITY`.
pub fn psnr(a: &RgbImage, b: &RgbImage, mask: Option<&Mask>) -> Result<f64> {
    crate::image::check_shape(a, b, "psnr")?;
    if let Some(m) = mask {
        crate::image::check_shape(a, m, "psnr mask")?;
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for p in 0..a.len() {
        if mask.map_or(true, |m| m.data[p]) {
            for k in 0..3 {
                let d = a.data[p][k] - b.data[p][k];
                sum += d * d;
            }
            n += 3;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask("psnr"));
    }
    let mse = sum / n as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// RMSE over cells where both grids are finite.
pub fn elevation_rmse(pred: &Raster<f64>, gt: &Raster<f64>) -> Result<f64> {
    crate::image::check_shape(pred, gt, "elevation")?;
    let (sum, n) = pred
        .data
        .iter()
        .zip(&gt.data)
        .filter(|(p, g)| p.is_finite() && g.is_finite())
        .fold((0.0, 0usize), |(s, n), (p, g)| (s + (p - g) * (p - g), n + 1));
    if n == 0 {
        return Err(Error::EmptyMask("elevation rmse"));
    }
    Ok((sum / n as f64).sqrt())
}

/// Fraction of ground-truth cells of each class whose prediction matches.
/// Classes absent from the ground truth are left out.
pub fn class_accuracy(pred: &LabelMap, gt: &LabelMap, class_names: &[String]) -> Result<BTreeMap<String, f64>> {
    crate::image::check_shape(pred, gt, "semantic")?;
    let mut hits = vec![(0usize, 0usize); class_names.len()];
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        if let Some(h) = hits.get_mut(g as usize) {
            h.1 += 1;
            if p == g {
                h.0 += 1;
            }
        }
    }
    Ok(class_names
        .iter()
        .zip(hits)
        .filter(|(_, (_, n))| *n > 0)
        .map(|(name, (k, n))| (name.clone(), k as f64 / n as f64))
        .collect())
}

/// Least-squares plane `z = a + b x + c y` through the finite cells.
pub fn fit_plane(grid: &BevGrid, elevation: &Raster<f64>) -> Result<[f64; 3]> {
    let mut ata = nalgebra::Matrix3::<f64>::zeros();
    let mut atb = Vec3::zeros();
    let mut n = 0;
    for row in 0..elevation.height {
        for col in 0..elevation.width {
            let z = *elevation.get(col, row);
            if !z.is_finite() {
                continue;
            }
            let (x, y) = grid.cell_center(col, row);
            let r = Vec3::new(1.0, x, y);
            ata += r * r.transpose();
            atb += r * z;
            n += 1;
        }
    }
    if n < 3 {
        return Err(Error::EmptyMask("plane fit"));
    }
    let sol = ata
        .lu()
        .solve(&atb)
        .ok_or_else(|| Error::InvalidInput("plane fit is degenerate".into()))?;
    Ok([sol[0], sol[1], sol[2]])
}
