//! Occluder masks and the per-frame supervision target.

use crate::error::{Error, Result};
use crate::image::{LabelMap, Mask, Raster, RgbImage};
use crate::loss::LossTarget;
use crate::scene::Frame;

pub const DEFAULT_DILATION_RADIUS: usize = 4;
pub const DEFAULT_OCCLUDER_CLASSES: [&str; 4] = ["vehicle", "pedestrian", "rider", "bicycle"];
pub const DEFAULT_NON_GROUND_CLASSES: [&str; 1] = ["sky"];

/// Pixels labeled with any of `classes`, dilated by a disk of `radius` pixels.
pub fn build_occluder_mask(labels: &LabelMap, classes: &[u16], radius: usize) -> Mask {
    let (w, h) = (labels.width, labels.height);
    let seed: Vec<bool> = labels.data.iter().map(|l| classes.contains(l)).collect();
    if radius == 0 {
        return Raster {
            width: w,
            height: h,
            data: seed,
        };
    }
    let r = radius as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
        .filter(|(dx, dy)| dx * dx + dy * dy <= r * r)
        .collect();
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            if !seed[y * w + x] {
                continue;
            }
            for &(dx, dy) in &offsets {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                    out[ny as usize * w + nx as usize] = true;
                }
            }
        }
    }
    Raster {
        width: w,
        height: h,
        data: out,
    }
}

/// Which image supervises a frame and how occluded pixels are treated. Class
/// lists hold indices into the dataset's class table.
#[derive(Clone, Debug)]
pub struct SupervisionPolicy {
    pub occluder_classes: Vec<u16>,
    pub non_ground_classes: Vec<u16>,
    pub dilation_radius: usize,
    pub use_inpainted: bool,
    pub use_enhanced: bool,
}

impl SupervisionPolicy {
    pub fn from_names(
        class_names: &[String],
        occluders: &[String],
        non_ground: &[String],
        dilation_radius: usize,
    ) -> Result<Self> {
        let resolve = |names: &[String]| -> Result<Vec<u16>> {
            names
                .iter()
                .map(|n| {
                    class_names
                        .iter()
                        .position(|c| c == n)
                        .map(|i| i as u16)
                        .ok_or_else(|| Error::Dataset(format!("unknown class `{n}`")))
                })
                .collect()
        };
        Ok(Self {
            occluder_classes: resolve(occluders)?,
            non_ground_classes: resolve(non_ground)?,
            dilation_radius,
            use_inpainted: true,
            use_enhanced: true,
        })
    }

    /// Loaded mask when the frame has one, otherwise derived from labels.
    pub fn occluder_mask(&self, frame: &Frame) -> Mask {
        match &frame.occluder_mask {
            Some(m) => m.clone(),
            None => build_occluder_mask(&frame.labels, &self.occluder_classes, self.dilation_radius),
        }
    }

    /// True when the frame will be supervised by its inpainted image.
    pub fn uses_inpainted(&self, frame: &Frame) -> bool {
        self.use_inpainted && frame.inpainted.is_some()
    }

    /// The image enhancement should start from for this frame.
    pub fn enhancement_base<'a>(&self, frame: &'a Frame) -> &'a RgbImage {
        match (&frame.inpainted, self.use_inpainted) {
            (Some(img), true) => img,
            _ => &frame.image,
        }
    }
}

/// Builds the loss target for one frame. `enhanced` must have been produced
/// from [`SupervisionPolicy::enhancement_base`]; it is ignored when the policy
/// disables enhancement.
pub fn supervision_target(
    frame: &Frame,
    enhanced: Option<&RgbImage>,
    policy: &SupervisionPolicy,
) -> Result<LossTarget> {
    let occluders = policy.occluder_mask(frame);
    let ground: Vec<bool> = frame
        .labels
        .data
        .iter()
        .map(|l| !policy.non_ground_classes.contains(l))
        .collect();
    let inpainted = policy.uses_inpainted(frame);
    let image = match (enhanced, policy.use_enhanced) {
        (Some(e), true) => e.clone(),
        _ => policy.enhancement_base(frame).clone(),
    };
    if !image.same_shape(&frame.labels) {
        return Err(Error::frame(&frame.id, "supervision image size does not match labels"));
    }
    let valid: Vec<bool> = ground
        .iter()
        .zip(&occluders.data)
        .map(|(&g, &o)| g && (inpainted || !o))
        .collect();
    if !valid.iter().any(|&v| v) {
        return Err(Error::frame(&frame.id, "no pixels left to supervise after masking"));
    }
    let semantic_valid: Vec<bool> = ground
        .iter()
        .zip(&occluders.data)
        .map(|(&g, &o)| g && !o)
        .collect();
    let (w, h) = (frame.labels.width, frame.labels.height);
    Ok(LossTarget {
        image,
        valid: Raster::from_vec(w, h, valid)?,
        labels: frame.labels.clone(),
        semantic_valid: Raster::from_vec(w, h, semantic_valid)?,
    })
}
