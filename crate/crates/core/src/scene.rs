//! Surfels, cameras, frames, and the geometric maps between them.

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{LabelMap, Mask, RgbImage};
use crate::sh::{ShCoeffs, SH_COEFFS};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

const FRAME_TOL: f64 = 1e-6;

/// One planar Gaussian primitive.
#[derive(Clone, Debug, PartialEq)]
pub struct Surfel {
    pub center: Vec3,
    pub scale_u: f64,
    pub scale_v: f64,
    pub tangent_u: Vec3,
    pub tangent_v: Vec3,
    pub opacity: f64,
    pub sh: ShCoeffs,
    pub semantic: Vec<f64>,
}

impl Surfel {
    /// Horizontal surfel with axis-aligned tangents, mid-gray color and
    /// uniform semantic logits.
    pub fn horizontal(center: Vec3, scale: f64, opacity: f64, class_count: usize) -> Self {
        Self {
            center,
            scale_u: scale,
            scale_v: scale,
            tangent_u: Vec3::x(),
            tangent_v: Vec3::y(),
            opacity,
            sh: [[0.0; SH_COEFFS]; 3],
            semantic: vec![0.0; class_count],
        }
    }

    /// World point for tangent-plane coordinates `(u, v)`.
    pub fn local_to_world(&self, u: f64, v: f64) -> Vec3 {
        self.center + self.tangent_u * (self.scale_u * u) + self.tangent_v * (self.scale_v * v)
    }

    /// `t_u x t_v`, without orientation canonicalization.
    pub fn raw_normal(&self) -> Vec3 {
        self.tangent_u.cross(&self.tangent_v)
    }

    /// Sign applied to `raw_normal` to make the normal face up.
    pub fn normal_sign(&self) -> f64 {
        if self.raw_normal().z < 0.0 {
            -1.0
        } else {
            1.0
        }
    }

    /// Unit normal, flipped so its vertical component is nonnegative.
    pub fn normal(&self) -> Vec3 {
        let n = self.raw_normal();
        let n = n / n.norm();
        if n.z < 0.0 {
            -n
        } else {
            n
        }
    }

    /// Gram-Schmidt on the tangent pair.
    pub fn orthonormalize(&mut self) {
        let tu = self.tangent_u.normalize();
        let tv = self.tangent_v - tu * tu.dot(&self.tangent_v);
        self.tangent_u = tu;
        self.tangent_v = tv.normalize();
    }

    /// Applies the rotation `exp([delta]_x)` to the tangent frame.
    pub fn rotate(&mut self, delta: &Vec3) {
        let r = Rotation3::new(*delta);
        self.tangent_u = r * self.tangent_u;
        self.tangent_v = r * self.tangent_v;
    }

    pub fn validate(&self, class_count: usize) -> Result<()> {
        let tu = self.tangent_u;
        let tv = self.tangent_v;
        if (tu.norm() - 1.0).abs() > FRAME_TOL
            || (tv.norm() - 1.0).abs() > FRAME_TOL
            || tu.dot(&tv).abs() > FRAME_TOL
        {
            return Err(Error::InvalidInput("tangent frame is not orthonormal".into()));
        }
        if !(self.scale_u > 0.0 && self.scale_v > 0.0) {
            return Err(Error::InvalidInput("surfel scales must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(Error::InvalidInput("opacity outside [0, 1]".into()));
        }
        if self.semantic.len() != class_count {
            return Err(Error::InvalidInput(format!(
                "semantic logits have length {}, expected {class_count}",
                self.semantic.len()
            )));
        }
        Ok(())
    }
}

/// A viewing ray. For perspective cameras `dir` has unit camera-frame z, so
/// the ray parameter equals camera-frame depth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

/// World-from-camera rigid transform. Camera axes: x right, y down, z forward.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    /// Camera looking down at `pitch` radians below the horizon while heading
    /// along `yaw` (radians from +x). `pitch = pi/2` is a nadir view whose image
    /// top points along the heading.
    pub fn looking_down(position: Vec3, yaw: f64, pitch: f64) -> Self {
        let forward = Vec3::new(yaw.cos(), yaw.sin(), 0.0);
        let right = Vec3::new(yaw.sin(), -yaw.cos(), 0.0);
        let z_c = forward * pitch.cos() - Vec3::z() * pitch.sin();
        let x_c = right;
        let y_c = z_c.cross(&x_c);
        Self {
            rotation: Mat3::from_columns(&[x_c, y_c, z_c]),
            translation: position,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let should_be_identity = r.transpose() * r;
        if (should_be_identity - Mat3::identity()).abs().max() > 1e-6
            || (r.determinant() - 1.0).abs() > 1e-6
        {
            return Err(Error::InvalidInput(
                "camera rotation is not a proper rotation".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, pose: Pose) -> Self {
        Self { intrinsics, pose }
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn center(&self) -> Vec3 {
        self.pose.translation
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0) {
            return Err(Error::InvalidInput("focal lengths must be positive".into()));
        }
        if k.width == 0 || k.height == 0 {
            return Err(Error::InvalidInput("image size must be nonzero".into()));
        }
        self.pose.validate()
    }

    /// Ray through image coordinates `(px, py)`; pixel `(i, j)` has its center
    /// at `(i + 0.5, j + 0.5)`.
    pub fn ray_through(&self, px: f64, py: f64) -> Ray {
        let k = &self.intrinsics;
        let d_cam = Vec3::new((px - k.cx) / k.fx, (py - k.cy) / k.fy, 1.0);
        Ray {
            origin: self.pose.translation,
            dir: self.pose.rotation * d_cam,
        }
    }

    pub fn pixel_ray(&self, x: usize, y: usize) -> Ray {
        self.ray_through(x as f64 + 0.5, y as f64 + 0.5)
    }

    /// World point to camera frame.
    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.pose.rotation.transpose() * (p - self.pose.translation)
    }

    /// Image coordinates and depth of a world point, or `None` when the point
    /// is not in front of the near plane.
    pub fn project(&self, p: &Vec3, near: f64) -> Option<(f64, f64, f64)> {
        let c = self.to_camera(p);
        if c.z <= near {
            return None;
        }
        let k = &self.intrinsics;
        Some((k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy, c.z))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

/// One input view.
#[derive(Clone, Debug)]
pub struct Frame {
    pub id: String,
    pub image: RgbImage,
    pub camera: Camera,
    pub labels: LabelMap,
    pub occluder_mask: Option<Mask>,
    pub inpainted: Option<RgbImage>,
    pub split: Split,
}

impl Frame {
    pub fn validate(&self, class_count: usize) -> Result<()> {
        let (w, h) = (self.camera.width(), self.camera.height());
        let bad = |what: &str, rw: usize, rh: usize| {
            Error::frame(
                &self.id,
                format!("{what} is {rw}x{rh}, camera is {w}x{h}"),
            )
        };
        if self.image.width != w || self.image.height != h {
            return Err(bad("image", self.image.width, self.image.height));
        }
        if self.labels.width != w || self.labels.height != h {
            return Err(bad("label map", self.labels.width, self.labels.height));
        }
        if let Some(m) = &self.occluder_mask {
            if m.width != w || m.height != h {
                return Err(bad("occluder mask", m.width, m.height));
            }
        }
        if let Some(img) = &self.inpainted {
            if img.width != w || img.height != h {
                return Err(bad("inpainted image", img.width, img.height));
            }
        }
        if let Some(&l) = self.labels.data.iter().find(|&&l| l as usize >= class_count) {
            return Err(Error::frame(
                &self.id,
                format!("label {l} outside [0, {class_count})"),
            ));
        }
        self.camera
            .validate()
            .map_err(|e| Error::frame(&self.id, e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub surfels: Vec<Surfel>,
    pub class_names: Vec<String>,
}

impl Scene {
    pub fn new(class_names: Vec<String>) -> Self {
        Self {
            surfels: Vec::new(),
            class_names,
        }
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.surfels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfels.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.class_count();
        for (i, s) in self.surfels.iter().enumerate() {
            s.validate(c)
                .map_err(|e| Error::InvalidInput(format!("surfel {i}: {e}")))?;
        }
        Ok(())
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }
}

/// Free-function form of [`Surfel::local_to_world`].
pub fn surfel_local_to_world(surfel: &Surfel, u: f64, v: f64) -> Vec3 {
    surfel.local_to_world(u, v)
}

/// Free-function form of [`Surfel::normal`].
pub fn surfel_normal(surfel: &Surfel) -> Vec3 {
    surfel.normal()
}
