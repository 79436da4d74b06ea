//! Per-class color harmonization in HSV space.
//!
//! Value and saturation of selected classes are mapped so each view's class
//! statistics match a dataset-wide reference; hue is carried through
//! untouched.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::image::{LabelMap, Mask, Raster, RgbImage};

/// Source standard deviations at or below this leave the channel unchanged.
pub const DEGENERATE_STD: f64 = 1e-4;

pub const DEFAULT_ENHANCE_CLASSES: [&str; 4] = ["road", "lane_marking", "sidewalk", "curb"];

/// Hexcone conversion; inputs are clamped to `[0, 1]`. Hue is in degrees in
/// `[0, 360)` and is 0 whenever saturation is 0.
pub fn rgb_to_hsv(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb.map(|c| c.clamp(0.0, 1.0));
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    if delta == 0.0 || max == 0.0 {
        return [0.0, 0.0, v];
    }
    let s = delta / max;
    let sector = if max == r {
        (g - b) / delta
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    let mut h = 60.0 * sector;
    if h < 0.0 {
        h += 360.0;
    }
    if h >= 360.0 {
        h -= 360.0;
    }
    [h, s, v]
}

pub fn hsv_to_rgb(hsv: [f64; 3]) -> [f64; 3] {
    let [h, s, v] = hsv;
    let s = s.clamp(0.0, 1.0);
    let v = v.clamp(0.0, 1.0);
    if s == 0.0 {
        return [v, v, v];
    }
    let h = h.rem_euclid(360.0) / 60.0;
    let i = h.floor();
    let f = h - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HsvImage {
    pub width: usize,
    pub height: usize,
    pub hue: Vec<f64>,
    pub saturation: Vec<f64>,
    pub value: Vec<f64>,
}

impl HsvImage {
    pub fn from_rgb(img: &RgbImage) -> Self {
        let hsv: Vec<[f64; 3]> = img.data.par_iter().map(|c| rgb_to_hsv(*c)).collect();
        Self {
            width: img.width,
            height: img.height,
            hue: hsv.iter().map(|c| c[0]).collect(),
            saturation: hsv.iter().map(|c| c[1]).collect(),
            value: hsv.iter().map(|c| c[2]).collect(),
        }
    }

    pub fn to_rgb(&self) -> RgbImage {
        Raster {
            width: self.width,
            height: self.height,
            data: (0..self.hue.len())
                .into_par_iter()
                .map(|i| hsv_to_rgb([self.hue[i], self.saturation[i], self.value[i]]))
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class_id: u16,
    pub pixel_count: usize,
    pub value_mean: f64,
    pub value_std: f64,
    pub sat_mean: f64,
    pub sat_std: f64,
}

fn mean_std(vals: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
    let mean = vals.clone().sum::<f64>() / n as f64;
    let var = vals.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

/// Population statistics of V and S over pixels of `class_id` that are valid.
/// `None` when no such pixel exists.
pub fn class_stats(
    image: &HsvImage,
    labels: &LabelMap,
    class_id: u16,
    valid: Option<&Mask>,
) -> Option<ClassStats> {
    let idx: Vec<usize> = (0..labels.len())
        .filter(|&p| labels.data[p] == class_id && valid.map_or(true, |m| m.data[p]))
        .collect();
    if idx.is_empty() {
        return None;
    }
    let n = idx.len();
    let (value_mean, value_std) = mean_std(idx.iter().map(|&p| image.value[p]), n);
    let (sat_mean, sat_std) = mean_std(idx.iter().map(|&p| image.saturation[p]), n);
    Some(ClassStats {
        class_id,
        pixel_count: n,
        value_mean,
        value_std,
        sat_mean,
        sat_std,
    })
}

#[inline]
fn transfer_value(x: f64, src: (f64, f64), reference: (f64, f64)) -> f64 {
    if src == reference {
        return x.clamp(0.0, 1.0);
    }
    ((reference.1 / src.1) * (x - src.0) + reference.0).clamp(0.0, 1.0)
}

/// `clamp((sigma_r / sigma_v) (x - mu_v) + mu_r, 0, 1)` elementwise. A
/// degenerate source spread returns the input unchanged.
pub fn transfer_channel(x: &[f64], src: (f64, f64), reference: (f64, f64)) -> Vec<f64> {
    if src.1 <= DEGENERATE_STD {
        log::warn!(
            "source standard deviation {:.3e} is degenerate; channel left unchanged",
            src.1
        );
        return x.to_vec();
    }
    x.iter().map(|&v| transfer_value(v, src, reference)).collect()
}

/// Reference mean/std of V and S for one class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceClass {
    pub pixel_count: usize,
    pub value_mean: f64,
    pub value_std: f64,
    pub sat_mean: f64,
    pub sat_std: f64,
}

/// Keyed by class index.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReferenceStats {
    pub classes: BTreeMap<u16, ReferenceClass>,
}

/// One view's input to enhancement.
#[derive(Clone, Copy, Debug)]
pub struct EnhanceInput<'a> {
    pub image: &'a HsvImage,
    pub labels: &'a LabelMap,
}

/// Pixel-count-weighted average of per-view class means and stds.
pub fn compute_reference_stats(views: &[EnhanceInput<'_>], classes: &[u16]) -> ReferenceStats {
    let per_view: Vec<Vec<Option<ClassStats>>> = views
        .par_iter()
        .map(|v| {
            classes
                .iter()
                .map(|&c| class_stats(v.image, v.labels, c, None))
                .collect()
        })
        .collect();
    let mut out = ReferenceStats::default();
    for (ci, &c) in classes.iter().enumerate() {
        let mut acc = [0.0; 4];
        let mut count = 0usize;
        for stats in per_view.iter().filter_map(|v| v[ci]) {
            let w = stats.pixel_count as f64;
            acc[0] += w * stats.value_mean;
            acc[1] += w * stats.value_std;
            acc[2] += w * stats.sat_mean;
            acc[3] += w * stats.sat_std;
            count += stats.pixel_count;
        }
        if count > 0 {
            let n = count as f64;
            out.classes.insert(
                c,
                ReferenceClass {
                    pixel_count: count,
                    value_mean: acc[0] / n,
                    value_std: acc[1] / n,
                    sat_mean: acc[2] / n,
                    sat_std: acc[3] / n,
                },
            );
        }
    }
    out
}

/// Applies the transfer to V and S of every class in `classes` that has both
/// view and reference statistics. Hue and all other pixels are copied as is.
pub fn enhance_hsv(
    image: &HsvImage,
    labels: &LabelMap,
    reference: &ReferenceStats,
    classes: &[u16],
) -> HsvImage {
    let mut out = image.clone();
    for &c in classes {
        let (Some(stats), Some(r)) = (
            class_stats(image, labels, c, None),
            reference.classes.get(&c),
        ) else {
            continue;
        };
        for (channel, src, dst) in [
            (
                &mut out.value,
                (stats.value_mean, stats.value_std),
                (r.value_mean, r.value_std),
            ),
            (
                &mut out.saturation,
                (stats.sat_mean, stats.sat_std),
                (r.sat_mean, r.sat_std),
            ),
        ] {
            if src.1 <= DEGENERATE_STD {
                log::warn!(
                    "class {c}: source standard deviation {:.3e} is degenerate; channel left unchanged",
                    src.1
                );
                continue;
            }
            for (p, &l) in labels.data.iter().enumerate() {
                if l == c {
                    channel[p] = transfer_value(channel[p], src, dst);
                }
            }
        }
    }
    out
}

pub fn enhance_frame(
    image: &RgbImage,
    labels: &LabelMap,
    reference: &ReferenceStats,
    classes: &[u16],
) -> RgbImage {
    let hsv = HsvImage::from_rgb(image);
    let out = enhance_hsv(&hsv, labels, reference, classes);
    let mut rgb = out.to_rgb();
    // Untouched pixels keep their exact input values.
    for (p, &l) in labels.data.iter().enumerate() {
        if !classes.contains(&l) {
            rgb.data[p] = image.data[p];
        }
    }
    rgb
}
