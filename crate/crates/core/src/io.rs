//! On-disk formats: PNG images and label maps, PFM elevation grids, JSON
//! sidecars, and the dataset directory layout.
//!
//! ```text
//! <dataset>/
//!   frames/<id>.png      8-bit RGB
//!   labels/<id>.png      8-bit class indices (gray or palette)
//!   masks/<id>.png       optional occluder masks, nonzero = occluded
//!   inpainted/<id>.png   optional
//!   cameras.json
//!   classes.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Cursor};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{LabelMap, Mask, Raster, RgbImage};
use crate::scene::{Camera, Frame, Intrinsics, Mat3, Pose, Split, Vec3};

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    Ok(())
}

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.display().to_string(),
        source,
    }
}

pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img
        .pixels()
        .map(|p| p.0.map(|c| c as f64 / 255.0))
        .collect();
    Raster::from_vec(w as usize, h as usize, data)
}

pub fn write_rgb_png(path: &Path, img: &RgbImage) -> Result<()> {
    ensure_parent(path)?;
    let bytes: Vec<u8> = img.data.iter().flat_map(|c| c.map(quantize)).collect();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes)
        .ok_or_else(|| Error::InvalidInput("image buffer size mismatch".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Dataset(format!("{}: {e}", path.display()))
}

/// Raw 8-bit samples of a grayscale or palette PNG, without palette expansion.
pub fn read_label_png(path: &Path) -> Result<LabelMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    if info.bit_depth != png::BitDepth::Eight
        || !matches!(
            info.color_type,
            png::ColorType::Grayscale | png::ColorType::Indexed
        )
    {
        return Err(png_err(
            path,
            format!(
                "label maps must be 8-bit gray or indexed, got {:?} {:?}",
                info.color_type, info.bit_depth
            ),
        ));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let data = (0..h)
        .flat_map(|y| buf[y * info.line_size..y * info.line_size + w].iter().map(|&b| b as u16))
        .collect();
    Raster::from_vec(w, h, data)
}

/// Palette PNG when `palette` is given (entries past its end are black),
/// grayscale otherwise.
pub fn write_label_png(path: &Path, labels: &LabelMap, palette: Option<&[[u8; 3]]>) -> Result<()> {
    ensure_parent(path)?;
    let bytes: Vec<u8> = labels
        .data
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| Error::InvalidInput(format!("label {l} exceeds 255"))))
        .collect::<Result<_>>()?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), labels.width as u32, labels.height as u32);
    enc.set_depth(png::BitDepth::Eight);
    match palette {
        Some(p) => {
            let mut table: Vec<u8> = p.iter().flatten().copied().collect();
            table.resize(256 * 3, 0);
            enc.set_color(png::ColorType::Indexed);
            enc.set_palette(table);
        }
        None => enc.set_color(png::ColorType::Grayscale),
    }
    let mut w = enc.write_header().map_err(|e| png_err(path, e))?;
    w.write_image_data(&bytes).map_err(|e| png_err(path, e))?;
    w.finish().map_err(|e| png_err(path, e))
}

pub fn read_mask_png(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    Raster::from_vec(w as usize, h as usize, img.pixels().map(|p| p.0[0] != 0).collect())
}

pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let labels = mask.map(|&b| if b { 255u16 } else { 0 });
    write_label_png(path, &labels, None)
}

/// 16-bit grayscale in millimeters; non-finite depths are written as 0.
pub fn write_depth_png16(path: &Path, depth: &Raster<f64>) -> Result<()> {
    ensure_parent(path)?;
    let bytes: Vec<u8> = depth
        .data
        .iter()
        .flat_map(|&d| {
            let mm = if d.is_finite() { (d * 1000.0).round().clamp(0.0, 65535.0) as u16 } else { 0 };
            mm.to_be_bytes()
        })
        .collect();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), depth.width as u32, depth.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut w = enc.write_header().map_err(|e| png_err(path, e))?;
    w.write_image_data(&bytes).map_err(|e| png_err(path, e))?;
    w.finish().map_err(|e| png_err(path, e))
}

/// Single-channel little-endian PFM. Rows are stored bottom to top; the
/// raster's row 0 is the top row.
pub fn write_pfm(path: &Path, grid: &Raster<f64>) -> Result<()> {
    ensure_parent(path)?;
    let mut out = format!("Pf\n{} {}\n-1.0\n", grid.width, grid.height).into_bytes();
    for y in (0..grid.height).rev() {
        for x in 0..grid.width {
            out.extend_from_slice(&(*grid.get(x, y) as f32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<Raster<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Dataset(format!("{}: {m}", path.display()));
    // Header is three whitespace-terminated tokens after the magic line.
    let mut tokens = Vec::new();
    let mut pos = 0;
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if tokens[0] != "Pf" {
        return Err(bad("only single-channel PFM is supported"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad dimensions"));
    let (w, h) = (parse(&tokens[1])?, parse(&tokens[2])?);
    let scale: f64 = tokens[3].parse().map_err(|_| bad("bad scale"))?;
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != w * h * 4 {
        return Err(bad("payload size does not match dimensions"));
    }
    let mut data = vec![0.0; w * h];
    for (k, chunk) in body.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if scale < 0.0 { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (x, row_from_bottom) = (k % w, k / w);
        data[(h - 1 - row_from_bottom) * w + x] = v as f64;
    }
    Raster::from_vec(w, h, data)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.display().to_string(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// One entry of `cameras.json`. `rotation` is the row-major world-from-camera
/// matrix (camera x right, y down, z forward) and `translation` the camera
/// center in world coordinates, meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub id: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    #[serde(default)]
    pub split: Split,
}

impl CameraRecord {
    pub fn from_camera(id: &str, camera: &Camera, split: Split) -> Self {
        let k = camera.intrinsics;
        let r = camera.pose.rotation;
        let t = camera.pose.translation;
        Self {
            id: id.to_string(),
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
            rotation: [
                r[(0, 0)], r[(0, 1)], r[(0, 2)],
                r[(1, 0)], r[(1, 1)], r[(1, 2)],
                r[(2, 0)], r[(2, 1)], r[(2, 2)],
            ],
            translation: [t.x, t.y, t.z],
            split,
        }
    }

    pub fn camera(&self) -> Camera {
        Camera::new(
            Intrinsics {
                fx: self.fx,
                fy: self.fy,
                cx: self.cx,
                cy: self.cy,
                width: self.width,
                height: self.height,
            },
            Pose {
                rotation: Mat3::from_row_slice(&self.rotation),
                translation: Vec3::from_column_slice(&self.translation),
            },
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CamerasFile {
    pub frames: Vec<CameraRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum ClassEntry {
    Name(String),
    Full {
        name: String,
        #[serde(default)]
        color: Option<[u8; 3]>,
    },
}

/// Class names in index order plus a display palette.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassTable {
    pub names: Vec<String>,
    pub palette: Vec<[u8; 3]>,
}

/// Deterministic fallback color for class `i`.
pub fn default_color(i: usize) -> [u8; 3] {
    let h = (i as u32).wrapping_mul(2_654_435_761);
    [(h >> 24) as u8 | 0x40, (h >> 16) as u8 | 0x40, (h >> 8) as u8 | 0x40]
}

impl ClassTable {
    pub fn new(names: Vec<String>) -> Self {
        let palette = (0..names.len()).map(default_color).collect();
        Self { names, palette }
    }

    pub fn index_of(&self, name: &str) -> Option<u16> {
        self.names.iter().position(|n| n == name).map(|i| i as u16)
    }

    /// Reads `{"0": "road", "1": {"name": "curb", "color": [r, g, b]}, ...}`.
    /// Keys must cover `0..n` exactly.
    pub fn read(path: &Path) -> Result<Self> {
        let raw: BTreeMap<String, ClassEntry> = read_json(path)?;
        let mut entries: Vec<(usize, ClassEntry)> = raw
            .into_iter()
            .map(|(k, v)| {
                k.parse::<usize>()
                    .map(|i| (i, v))
                    .map_err(|_| Error::Dataset(format!("{}: class key `{k}` is not an index", path.display())))
            })
            .collect::<Result<_>>()?;
        entries.sort_by_key(|(i, _)| *i);
        if entries.iter().enumerate().any(|(want, (got, _))| want != *got) {
            return Err(Error::Dataset(format!(
                "{}: class indices must be contiguous from 0",
                path.display()
            )));
        }
        let mut names = Vec::new();
        let mut palette = Vec::new();
        for (i, e) in entries {
            let (name, color) = match e {
                ClassEntry::Name(n) => (n, None),
                ClassEntry::Full { name, color } => (name, color),
            };
            names.push(name);
            palette.push(color.unwrap_or_else(|| default_color(i)));
        }
        Ok(Self { names, palette })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let map: BTreeMap<String, ClassEntry> = self
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| {
                (
                    i.to_string(),
                    ClassEntry::Full {
                        name: n.clone(),
                        color: self.palette.get(i).copied(),
                    },
                )
            })
            .collect();
        // BTreeMap string keys sort "10" before "2"; readers re-sort by value.
        write_json(path, &map)
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub classes: ClassTable,
    pub frames: Vec<Frame>,
}

fn frame_path(root: &Path, sub: &str, id: &str) -> PathBuf {
    root.join(sub).join(format!("{id}.png"))
}

fn with_frame<T>(id: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Frame { .. } => e,
        other => Error::frame(id, other.to_string()),
    })
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", root.display())));
    }
    let classes = ClassTable::read(&root.join("classes.json"))?;
    let cams: CamerasFile = read_json(&root.join("cameras.json"))?;
    if cams.frames.is_empty() {
        return Err(Error::Dataset("cameras.json lists no frames".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for rec in &cams.frames {
        if !seen.insert(rec.id.as_str()) {
            return Err(Error::frame(&rec.id, "duplicate frame id"));
        }
    }
    let optional = |sub: &str, id: &str| {
        let p = frame_path(root, sub, id);
        p.is_file().then_some(p)
    };
    let frames = cams
        .frames
        .iter()
        .map(|rec| {
            let id = rec.id.as_str();
            let image = with_frame(id, read_rgb_png(&frame_path(root, "frames", id)))?;
            let labels = with_frame(id, read_label_png(&frame_path(root, "labels", id)))?;
            let occluder_mask = optional("masks", id)
                .map(|p| with_frame(id, read_mask_png(&p)))
                .transpose()?;
            let inpainted = optional("inpainted", id)
                .map(|p| with_frame(id, read_rgb_png(&p)))
                .transpose()?;
            let frame = Frame {
                id: rec.id.clone(),
                image,
                camera: rec.camera(),
                labels,
                occluder_mask,
                inpainted,
                split: rec.split,
            };
            frame.validate(classes.names.len())?;
            Ok(frame)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        root: root.to_path_buf(),
        classes,
        frames,
    })
}

pub fn write_dataset(root: &Path, classes: &ClassTable, frames: &[Frame]) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    classes.write(&root.join("classes.json"))?;
    let cams = CamerasFile {
        frames: frames
            .iter()
            .map(|f| CameraRecord::from_camera(&f.id, &f.camera, f.split))
            .collect(),
    };
    write_json(&root.join("cameras.json"), &cams)?;
    for f in frames {
        write_rgb_png(&frame_path(root, "frames", &f.id), &f.image)?;
        write_label_png(&frame_path(root, "labels", &f.id), &f.labels, None)?;
        if let Some(m) = &f.occluder_mask {
            write_mask_png(&frame_path(root, "masks", &f.id), m)?;
        }
        if let Some(img) = &f.inpainted {
            write_rgb_png(&frame_path(root, "inpainted", &f.id), img)?;
        }
    }
    Ok(())
}

/// Which image an enhanced frame was computed from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnhanceSource {
    Raw,
    Inpainted,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnhanceManifest {
    pub frames: BTreeMap<String, EnhanceSource>,
}

pub const ENHANCED_DIR: &str = "enhanced";

pub fn enhanced_path(root: &Path, id: &str) -> PathBuf {
    frame_path(root, ENHANCED_DIR, id)
}

pub fn manifest_path(root: &Path) -> PathBuf {
    root.join(ENHANCED_DIR).join("manifest.json")
}

/// Enhanced images whose recorded source matches `wanted`, keyed by frame id.
/// Frames with no enhanced image or a mismatched source are left out.
pub fn load_enhanced(
    root: &Path,
    wanted: &BTreeMap<String, EnhanceSource>,
) -> Result<BTreeMap<String, RgbImage>> {
    let mpath = manifest_path(root);
    if !mpath.is_file() {
        return Ok(BTreeMap::new());
    }
    let manifest: EnhanceManifest = read_json(&mpath)?;
    let mut out = BTreeMap::new();
    for (id, src) in wanted {
        if manifest.frames.get(id) == Some(src) {
            let p = enhanced_path(root, id);
            if p.is_file() {
                out.insert(id.clone(), with_frame(id, read_rgb_png(&p))?);
            }
        }
    }
    Ok(out)
}
