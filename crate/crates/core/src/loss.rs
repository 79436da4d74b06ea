//! Photometric, depth-smoothness, normal-consistency and semantic losses.
//!
//! Every term is a per-pixel mean so the weights do not depend on resolution.
//! The depth term averages over all pixels, the normal term over pixels with a
//! valid dominant normal, and the photometric and semantic terms over their
//! respective validity masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{check_shape, LabelMap, Mask, RgbImage};
use crate::raster::{Contributions, RenderOutput, SplatHit};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_d: f64,
    pub lambda_n: f64,
    pub lambda_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_c: 1.0,
            lambda_d: 0.05,
            lambda_n: 0.05,
            lambda_s: 0.1,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            lambda_c: 0.0,
            lambda_d: 0.0,
            lambda_n: 0.0,
            lambda_s: 0.0,
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            lambda_c: self.lambda_c * k,
            lambda_d: self.lambda_d * k,
            lambda_n: self.lambda_n * k,
            lambda_s: self.lambda_s * k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_c, self.lambda_d, self.lambda_n, self.lambda_s];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidInput("loss weights must be finite and nonnegative".into()))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub photometric: f64,
    pub depth_smooth: f64,
    pub normal_consistency: f64,
    pub semantic: f64,
    pub total: f64,
}

/// How `|x|` is evaluated. `Smooth(eps)` is `sqrt(x^2 + eps^2)`, used by the
/// finite-difference checker so kinks do not pollute central differences.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum L1Mode {
    #[default]
    Exact,
    Smooth(f64),
}

pub const SMOOTH_L1_EPS: f64 = 1e-8;

impl L1Mode {
    #[inline]
    pub fn abs(self, x: f64) -> f64 {
        match self {
            L1Mode::Exact => x.abs(),
            L1Mode::Smooth(eps) => (x * x + eps * eps).sqrt(),
        }
    }

    /// Derivative of [`L1Mode::abs`]; the exact variant uses `sign(0) = 0`.
    #[inline]
    pub fn sign(self, x: f64) -> f64 {
        match self {
            L1Mode::Exact => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            L1Mode::Smooth(eps) => x / (x * x + eps * eps).sqrt(),
        }
    }
}

/// Supervision for one view.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTarget {
    pub image: RgbImage,
    /// Pixels that supervise color.
    pub valid: Mask,
    pub labels: LabelMap,
    /// Pixels that supervise semantics.
    pub semantic_valid: Mask,
}

impl LossTarget {
    pub fn check_against(&self, out: &RenderOutput) -> Result<()> {
        let (w, h) = (out.width, out.height);
        for (name, rw, rh) in [
            ("target image", self.image.width, self.image.height),
            ("valid mask", self.valid.width, self.valid.height),
            ("label map", self.labels.width, self.labels.height),
            ("semantic mask", self.semantic_valid.width, self.semantic_valid.height),
        ] {
            if rw != w || rh != h {
                return Err(Error::InvalidInput(format!(
                    "{name} is {rw}x{rh}, render is {w}x{h}"
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn photometric_slices(
    rendered: &[[f64; 3]],
    target: &[[f64; 3]],
    valid: &[bool],
    mode: L1Mode,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((r, t), &ok) in rendered.iter().zip(target).zip(valid) {
        if ok {
            sum += mode.abs(r[0] - t[0]) + mode.abs(r[1] - t[1]) + mode.abs(r[2] - t[2]);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask("photometric loss"));
    }
    Ok(sum / n as f64)
}

/// Mean over valid pixels of the channel-summed absolute difference.
pub fn photometric_loss(rendered: &RgbImage, target: &RgbImage, valid: &Mask) -> Result<f64> {
    check_shape(rendered, target, "photometric loss")?;
    check_shape(rendered, valid, "photometric loss mask")?;
    photometric_slices(&rendered.data, &target.data, &valid.data, L1Mode::Exact)
}

/// For each hit `i`: `sum_j w_j |z_i - z_j|` and `sum_j w_j sign(z_i - z_j)`.
///
/// The exact mode assumes hits are sorted by depth (as produced by the
/// renderer) and runs in linear time; equal depths contribute nothing.
pub(crate) fn pair_sums(
    hits: &[SplatHit],
    omegas: &[f64],
    mode: L1Mode,
    abs_sum: &mut Vec<f64>,
    sign_sum: &mut Vec<f64>,
) {
    let n = hits.len();
    abs_sum.clear();
    sign_sum.clear();
    abs_sum.resize(n, 0.0);
    sign_sum.resize(n, 0.0);
    let sorted = hits.windows(2).all(|p| p[0].depth <= p[1].depth);
    if mode == L1Mode::Exact && sorted {
        let w_total: f64 = omegas.iter().sum();
        let z_total: f64 = hits.iter().zip(omegas).map(|(h, w)| h.depth * w).sum();
        let (mut w_lt, mut z_lt) = (0.0, 0.0);
        let mut start = 0;
        while start < n {
            let z = hits[start].depth;
            let mut end = start;
            let (mut w_grp, mut z_grp) = (0.0, 0.0);
            while end < n && hits[end].depth == z {
                w_grp += omegas[end];
                z_grp += omegas[end] * hits[end].depth;
                end += 1;
            }
            let w_gt = w_total - w_lt - w_grp;
            let z_gt = z_total - z_lt - z_grp;
            let a = z * w_lt - z_lt + z_gt - z * w_gt;
            let s = w_lt - w_gt;
            for i in start..end {
                abs_sum[i] = a;
                sign_sum[i] = s;
            }
            w_lt += w_grp;
            z_lt += z_grp;
            start = end;
        }
    } else {
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let d = hits[i].depth - hits[j].depth;
                    abs_sum[i] += omegas[j] * mode.abs(d);
                    sign_sum[i] += omegas[j] * mode.sign(d);
                }
            }
        }
    }
}

pub(crate) fn depth_smoothness_with(contribs: &Contributions, mode: L1Mode) -> f64 {
    let pixels = contribs.pixel_count();
    if pixels == 0 {
        return 0.0;
    }
    let mut a = Vec::new();
    let mut s = Vec::new();
    let mut total = 0.0;
    for p in 0..pixels {
        let (hits, omegas) = contribs.ray(p);
        if hits.len() < 2 {
            continue;
        }
        pair_sums(hits, omegas, mode, &mut a, &mut s);
        // Each unordered pair appears twice.
        total += 0.5 * omegas.iter().zip(&a).map(|(w, x)| w * x).sum::<f64>();
    }
    total / pixels as f64
}

/// Mean over pixels of `sum_{i<j} w_i w_j |z_i - z_j|`.
pub fn depth_smoothness_loss(contribs: &Contributions) -> f64 {
    depth_smoothness_with(contribs, L1Mode::Exact)
}

/// Mean over pixels with a valid dominant normal of `sum_i w_i (1 - n_i . N)`.
pub fn normal_consistency_loss(
    contribs: &Contributions,
    dominant_normal: &[crate::scene::Vec3],
    normal_valid: &[bool],
) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for p in 0..contribs.pixel_count() {
        if !normal_valid[p] {
            continue;
        }
        n += 1;
        let big_n = &dominant_normal[p];
        let (hits, omegas) = contribs.ray(p);
        total += hits
            .iter()
            .zip(omegas)
            .map(|(h, w)| w * (1.0 - h.normal.dot(big_n)))
            .sum::<f64>();
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// `log(sum exp(x))` and the softmax of `x`, written into `probs`.
pub(crate) fn log_softmax_parts(logits: &[f64], probs: &mut [f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (p, l) in probs.iter_mut().zip(logits) {
        *p = (l - m).exp();
        z += *p;
    }
    for p in probs.iter_mut() {
        *p /= z;
    }
    m + z.ln()
}

pub(crate) fn semantic_slices(
    semantic: &[f64],
    class_count: usize,
    labels: &[u16],
    valid: &[bool],
) -> Result<f64> {
    let mut probs = vec![0.0; class_count];
    let mut total = 0.0;
    let mut n = 0usize;
    for (p, (&label, &ok)) in labels.iter().zip(valid).enumerate() {
        if !ok {
            continue;
        }
        let logits = &semantic[p * class_count..(p + 1) * class_count];
        let lse = log_softmax_parts(logits, &mut probs);
        total += lse - logits[label as usize];
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask("semantic loss"));
    }
    Ok(total / n as f64)
}

/// Mean softmax cross-entropy over valid pixels. `rendered_semantic` is
/// `[pixel][class]` flattened.
pub fn semantic_loss(
    rendered_semantic: &[f64],
    class_count: usize,
    labels: &LabelMap,
    valid: &Mask,
) -> Result<f64> {
    check_shape(labels, valid, "semantic loss")?;
    if rendered_semantic.len() != labels.len() * class_count {
        return Err(Error::InvalidInput(
            "semantic buffer does not match label map".into(),
        ));
    }
    if labels.data.iter().any(|&l| l as usize >= class_count) {
        return Err(Error::InvalidInput("label outside class range".into()));
    }
    semantic_slices(rendered_semantic, class_count, &labels.data, &valid.data)
}

/// Evaluates all four terms and their weighted sum. Terms whose mask is empty
/// are an error only when their weight is positive.
pub fn total_loss_with(
    out: &RenderOutput,
    target: &LossTarget,
    weights: &LossWeights,
    mode: L1Mode,
) -> Result<LossBreakdown> {
    weights.validate()?;
    target.check_against(out)?;
    let contribs = out.contributions.as_ref().ok_or(Error::MissingContributions)?;
    let photometric = match photometric_slices(&out.color, &target.image.data, &target.valid.data, mode) {
        Ok(v) => v,
        Err(_) if weights.lambda_c == 0.0 => 0.0,
        Err(e) => return Err(e),
    };
    let semantic = match semantic_slices(
        &out.semantic,
        out.class_count,
        &target.labels.data,
        &target.semantic_valid.data,
    ) {
        Ok(v) => v,
        Err(_) if weights.lambda_s == 0.0 => 0.0,
        Err(e) => return Err(e),
    };
    let depth_smooth = depth_smoothness_with(contribs, mode);
    let normal_consistency =
        normal_consistency_loss(contribs, &out.dominant_normal, &out.normal_valid);
    Ok(LossBreakdown {
        photometric,
        depth_smooth,
        normal_consistency,
        semantic,
        total: weights.lambda_c * photometric
            + weights.lambda_d * depth_smooth
            + weights.lambda_n * normal_consistency
            + weights.lambda_s * semantic,
    })
}

pub fn total_loss(
    out: &RenderOutput,
    target: &LossTarget,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    total_loss_with(out, target, weights, L1Mode::Exact)
}
