//! The stages the commands chain together, callable in-process.

use std::collections::BTreeMap;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use roadsurf::bev::{self, BevGrid, BevMap, StoredBev, EMPTY_LABEL};
use roadsurf::enhance::{self, EnhanceInput, HsvImage, ReferenceStats};
use roadsurf::image::{Raster, RgbImage};
use roadsurf::io::{self, ClassTable, Dataset, EnhanceSource};
use roadsurf::optim::{self, TrainingView};
use roadsurf::raster::{self, RenderOptions};
use roadsurf::scene::{Frame, Scene, Split};
use serde::{Deserialize, Serialize, Serializer};

use crate::config::PipelineConfig;

/// The image as it reads back from an 8-bit PNG.
pub fn quantized(img: &RgbImage) -> RgbImage {
    img.map(|c| c.map(|v| io::quantize(v) as f64 / 255.0))
}

/// Dataset frames as they read back from disk.
pub fn quantized_frames(frames: &[Frame]) -> Vec<Frame> {
    frames
        .iter()
        .map(|f| Frame {
            image: quantized(&f.image),
            inpainted: f.inpainted.as_ref().map(quantized),
            ..f.clone()
        })
        .collect()
}

pub fn enhance_sources(frames: &[Frame], cfg: &PipelineConfig, classes: &ClassTable) -> Result<BTreeMap<String, EnhanceSource>> {
    let policy = cfg.policy(classes)?;
    Ok(frames
        .iter()
        .map(|f| {
            let src = if policy.uses_inpainted(f) {
                EnhanceSource::Inpainted
            } else {
                EnhanceSource::Raw
            };
            (f.id.clone(), src)
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct Enhanced {
    pub reference: ReferenceStats,
    /// Quantized to 8 bits, matching what `enhance` writes.
    pub images: BTreeMap<String, RgbImage>,
    pub sources: BTreeMap<String, EnhanceSource>,
}

/// Enhances every frame against reference statistics pooled over all frames.
pub fn enhance_frames(frames: &[Frame], cfg: &PipelineConfig, classes: &ClassTable) -> Result<Enhanced> {
    let policy = cfg.policy(classes)?;
    let ids = cfg.enhance_class_ids(classes)?;
    let bases: Vec<&RgbImage> = frames.iter().map(|f| policy.enhancement_base(f)).collect();
    let hsv: Vec<HsvImage> = bases.par_iter().map(|b| HsvImage::from_rgb(b)).collect();
    let inputs: Vec<EnhanceInput> = hsv
        .iter()
        .zip(frames)
        .map(|(image, f)| EnhanceInput { image, labels: &f.labels })
        .collect();
    let reference = enhance::compute_reference_stats(&inputs, &ids);
    let images: Vec<RgbImage> = bases
        .par_iter()
        .zip(frames.par_iter())
        .map(|(b, f)| quantized(&enhance::enhance_frame(b, &f.labels, &reference, &ids)))
        .collect();
    Ok(Enhanced {
        reference,
        images: frames.iter().map(|f| f.id.clone()).zip(images).collect(),
        sources: enhance_sources(frames, cfg, classes)?,
    })
}

/// Enhanced images for training: those written by `enhance` when every frame
/// has one from the right source, otherwise computed here.
pub fn enhanced_for_training(ds: &Dataset, cfg: &PipelineConfig) -> Result<BTreeMap<String, RgbImage>> {
    if !cfg.enhance.enabled {
        return Ok(BTreeMap::new());
    }
    let wanted = enhance_sources(&ds.frames, cfg, &ds.classes)?;
    let stored = io::load_enhanced(&ds.root, &wanted)?;
    if stored.len() == ds.frames.len() {
        return Ok(stored);
    }
    log::info!(
        "enhanced images on disk cover {} of {} frames for this configuration; enhancing in memory",
        stored.len(),
        ds.frames.len()
    );
    Ok(enhance_frames(&ds.frames, cfg, &ds.classes)?.images)
}

pub fn training_views(
    frames: &[Frame],
    cfg: &PipelineConfig,
    classes: &ClassTable,
    enhanced: &BTreeMap<String, RgbImage>,
) -> Result<Vec<TrainingView>> {
    let policy = cfg.policy(classes)?;
    let views = frames
        .iter()
        .filter(|f| f.split == Split::Train)
        .map(|f| {
            let target = roadsurf::occlusion::supervision_target(f, enhanced.get(&f.id), &policy)?;
            Ok(TrainingView { id: f.id.clone(), camera: f.camera, target })
        })
        .collect::<Result<Vec<_>>>()?;
    if views.is_empty() {
        bail!("dataset has no training frames");
    }
    Ok(views)
}

pub fn initial_scene(views: &[TrainingView], cfg: &PipelineConfig, classes: &ClassTable) -> Result<Scene> {
    let poses: Vec<_> = views.iter().map(|v| v.camera.pose).collect();
    Ok(optim::init_scene(&poses, &cfg.optim, classes.names.clone())?)
}

/// Synthesized-or-loaded frames to trained scene, as `optimize` runs it.
pub fn reconstruct(frames: &[Frame], classes: &ClassTable, cfg: &PipelineConfig) -> Result<Scene> {
    let enhanced = if cfg.enhance.enabled {
        enhance_frames(frames, cfg, classes)?.images
    } else {
        BTreeMap::new()
    };
    let views = training_views(frames, cfg, classes, &enhanced)?;
    let scene = initial_scene(&views, cfg, classes)?;
    let (scene, _) = optim::optimize(&scene, &views, &cfg.optim, &cfg.loss)?;
    Ok(scene)
}

pub fn export(scene: &Scene, grid: &BevGrid) -> Result<BevMap> {
    Ok(bev::export_bev(scene, grid, &RenderOptions::default())?)
}

/// Writes `f64::INFINITY` as the string `"inf"`, which JSON cannot hold as a
/// number.
fn finite_or_inf<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) if x.is_infinite() && *x > 0.0 => s.serialize_str("inf"),
        Some(x) => s.serialize_f64(*x),
        None => s.serialize_none(),
    }
}

fn inf_or_number<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum V {
        N(f64),
        S(String),
    }
    match Option::<V>::deserialize(d)? {
        None => Ok(None),
        Some(V::N(x)) => Ok(Some(x)),
        Some(V::S(s)) if s == "inf" => Ok(Some(f64::INFINITY)),
        Some(V::S(s)) => Err(serde::de::Error::custom(format!("bad number `{s}`"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldoutReport {
    pub views: usize,
    /// Mean over held-out views of the full-frame PSNR.
    #[serde(serialize_with = "finite_or_inf", deserialize_with = "inf_or_number")]
    pub psnr_db: Option<f64>,
    /// Same, restricted to pixels labeled road.
    #[serde(serialize_with = "finite_or_inf", deserialize_with = "inf_or_number")]
    pub psnr_road_db: Option<f64>,
}

/// Metrics of a predicted BEV against ground truth. Fields are `null` when no
/// cell qualifies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// BEV color PSNR over cells covered in both maps.
    #[serde(serialize_with = "finite_or_inf", deserialize_with = "inf_or_number")]
    pub psnr_db: Option<f64>,
    /// BEV color PSNR over covered cells labeled road in the ground truth.
    #[serde(serialize_with = "finite_or_inf", deserialize_with = "inf_or_number")]
    pub psnr_road_db: Option<f64>,
    pub elevation_rmse_m: Option<f64>,
    pub covered_cells: usize,
    pub class_accuracy: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heldout: Option<HeldoutReport>,
}

fn empty_ok(r: roadsurf::Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(roadsurf::Error::EmptyMask(_)) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

pub fn evaluate_bev(pred: &StoredBev, gt: &StoredBev) -> Result<EvalReport> {
    let (pg, gg) = (&pred.meta.grid, &gt.meta.grid);
    if (pg.width, pg.height) != (gg.width, gg.height) {
        bail!(
            "prediction grid is {}x{} but ground truth is {}x{}",
            pg.width,
            pg.height,
            gg.width,
            gg.height
        );
    }
    let road = gt.meta.class_names.iter().position(|n| n == "road");
    let covered: Vec<bool> = pred
        .semantic
        .data
        .iter()
        .zip(&gt.semantic.data)
        .map(|(&p, &g)| p != EMPTY_LABEL && g != EMPTY_LABEL)
        .collect();
    let road_mask: Vec<bool> = covered
        .iter()
        .zip(&gt.semantic.data)
        .map(|(&c, &g)| c && Some(g as usize) == road)
        .collect();
    let (w, h) = (pg.width, pg.height);
    let covered_mask = Raster::from_vec(w, h, covered)?;
    let road_mask = Raster::from_vec(w, h, road_mask)?;
    Ok(EvalReport {
        psnr_db: empty_ok(bev::psnr(&pred.rgb, &gt.rgb, Some(&covered_mask)))?,
        psnr_road_db: empty_ok(bev::psnr(&pred.rgb, &gt.rgb, Some(&road_mask)))?,
        elevation_rmse_m: empty_ok(bev::elevation_rmse(&pred.elevation, &gt.elevation))?,
        covered_cells: covered_mask.count(),
        class_accuracy: bev::class_accuracy(&pred.semantic, &gt.semantic, &gt.meta.class_names)?,
        heldout: None,
    })
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// PSNR of renders at the test-split frames against their images.
pub fn heldout_psnr(scene: &Scene, frames: &[Frame], classes: &ClassTable) -> Result<HeldoutReport> {
    let road = classes.index_of("road");
    let mut full = Vec::new();
    let mut road_only = Vec::new();
    for f in frames.iter().filter(|f| f.split == Split::Test) {
        let out = raster::render(scene, &f.camera, &RenderOptions::default())
            .with_context(|| format!("rendering frame {}", f.id))?;
        let img = out.color_image();
        full.push(bev::psnr(&img, &f.image, None)?);
        if let Some(r) = road {
            let mask = f.labels.map(|&l| l == r);
            if let Some(p) = empty_ok(bev::psnr(&img, &f.image, Some(&mask)))? {
                road_only.push(p);
            }
        }
    }
    Ok(HeldoutReport {
        views: full.len(),
        psnr_db: mean(&full),
        psnr_road_db: mean(&road_only),
    })
}
