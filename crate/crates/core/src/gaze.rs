//! Gaze vectors from point clouds and field-of-view (FoV) heatmaps.
//!
//! The FoV value at a pixel is the clamped cosine between the gaze
//! direction and the vector from the eye to that pixel's 3D point, with an
//! exponential fall-off below a cosine threshold.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{Camera, GeometryError, Pixel};
use crate::depth::{dpth, DepthError, DepthMap, PointGrid};
use crate::imageio::{self, ImageError};
use crate::linalg::{Point3, Vec3};
use crate::scalar::Real;

/// 3D gaze direction in a camera frame. Need not be unit length.
pub type GazeVector<T> = Vec3<T>;

/// Scene-input resolution at which heatmaps are computed.
pub const SCENE_WIDTH: usize = 512;
pub const SCENE_HEIGHT: usize = 384;

#[derive(Debug, Error)]
pub enum GazeFieldError {
    #[error("zero-length gaze vector")]
    ZeroVector,
    #[error("pixel coincides with the eye pixel")]
    DegenerateAtEye,
    #[error("pixel ({0}, {1}) outside the point grid")]
    OutOfGrid(f64, f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Depth(#[from] DepthError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Subject eye: image position and camera-frame 3D point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EyeLocation<T> {
    pub px: Pixel<T>,
    pub p3: Point3<T>,
    raw: Point3<T>,
    scale: T,
}

impl<T: Real> EyeLocation<T> {
    /// Eye at pixel `px` with known depth.
    pub fn at_depth(cam: &Camera<T>, px: Pixel<T>, depth: T) -> Result<Self, GazeFieldError> {
        let p3 = cam.backproject(px, depth)?;
        Ok(Self { px, p3, raw: p3, scale: T::one() })
    }

    /// Eye at pixel `px`, depth read from the nearest cell of `depth`.
    pub fn from_depth(cam: &Camera<T>, depth: &DepthMap<T>, px: Pixel<T>) -> Result<Self, GazeFieldError> {
        let (u, v) = px
            .nearest_cell(depth.width(), depth.height())
            .ok_or(GazeFieldError::OutOfGrid(px.u.as_f64(), px.v.as_f64()))?;
        let raw_depth = depth.raw_samples()[v * depth.width() + u];
        let raw = cam.backproject(px, raw_depth)?;
        let scale = depth.scale();
        let p3 = if scale == T::one() { raw } else { raw * scale };
        Ok(Self { px, p3, raw, scale })
    }
}

/// Soft fall-off applied below `threshold`: `c · exp(-gamma·(threshold - c))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayConfig {
    pub threshold: f64,
    pub gamma: f64,
}

impl Default for DecayConfig {
    fn default() -> Self {
        Self { threshold: 0.9, gamma: 10.0 }
    }
}

/// Decayed FoV value for a raw (already clamped) cosine.
pub fn apply_decay<T: Real>(raw: T, cfg: &DecayConfig) -> T {
    let thr = T::lit(cfg.threshold);
    if raw < thr {
        raw * (-T::lit(cfg.gamma) * (thr - raw)).exp()
    } else {
        raw
    }
}

/// Per-pixel gaze prior in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FovHeatmap<T> {
    pub width: usize,
    pub height: usize,
    pub values: Vec<T>,
}

impl<T: Real> FovHeatmap<T> {
    pub fn get(&self, u: usize, v: usize) -> T {
        self.values[v * self.width + u]
    }

    /// Cell of the largest value, first in row-major order on ties.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best % self.width, best / self.width)
    }

    /// Area-averaging resize to `width × height` (any ratio).
    pub fn downsample_area(&self, width: usize, height: usize) -> Self {
        Self { width, height, values: resize_area(&self.values, self.width, self.height, width, height) }
    }

    /// 8-bit grayscale PNG, `round(value·255)`.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), GazeFieldError> {
        let bytes: Vec<u8> = self
            .values
            .iter()
            .map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        imageio::write_gray8(path, self.width, self.height, &bytes)?;
        Ok(())
    }

    /// Lossless float export in the DPTH grid layout.
    pub fn save_dpth(&self, path: impl AsRef<Path>) -> Result<(), GazeFieldError> {
        let data: Vec<f32> = self.values.iter().map(|v| v.as_f64() as f32).collect();
        dpth::write(path, self.width, self.height, &data)?;
        Ok(())
    }

    pub fn load_dpth(path: impl AsRef<Path>) -> Result<Self, GazeFieldError> {
        let (width, height, data) = dpth::read(path)?;
        Ok(Self { width, height, values: data.into_iter().map(|v| T::lit(v as f64)).collect() })
    }
}

/// Area-weighted resampling of a row-major single-channel grid.
pub fn resize_area<T: Real>(src: &[T], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<T> {
    let weights = |s: usize, d: usize| -> Vec<Vec<(usize, T)>> {
        let ratio = s as f64 / d as f64;
        (0..d)
            .map(|i| {
                let (lo, hi) = (i as f64 * ratio, (i + 1) as f64 * ratio);
                let mut w = Vec::new();
                let mut k = lo.floor() as usize;
                while (k as f64) < hi && k < s {
                    let overlap = hi.min(k as f64 + 1.0) - lo.max(k as f64);
                    if overlap > 0.0 {
                        w.push((k, T::lit(overlap / ratio)));
                    }
                    k += 1;
                }
                w
            })
            .collect()
    };
    let (wx, wy) = (weights(sw, dw), weights(sh, dh));
    let mut out = vec![T::zero(); dw * dh];
    for (j, ry) in wy.iter().enumerate() {
        for (i, rx) in wx.iter().enumerate() {
            let mut acc = T::zero();
            for &(y, fy) in ry {
                for &(x, fx) in rx {
                    acc += src[y * sw + x] * fx * fy;
                }
            }
            out[j * dw + i] = acc;
        }
    }
    out
}

/// `V = P(px) − P(eye)`, the vector from the eye to the 3D point at `px`.
pub fn pixel_to_eye_vector<T: Real>(
    cloud: &PointGrid<T>,
    eye: &EyeLocation<T>,
    px: Pixel<T>,
) -> Result<GazeVector<T>, GazeFieldError> {
    let (w, h) = cloud.size();
    let (u, v) = px
        .nearest_cell(w, h)
        .ok_or(GazeFieldError::OutOfGrid(px.u.as_f64(), px.v.as_f64()))?;
    if eye.px.nearest_cell(w, h) == Some((u, v)) {
        return Err(GazeFieldError::DegenerateAtEye);
    }
    let vec = cloud.get(u, v) - eye.p3;
    if vec.norm_squared() == T::zero() {
        return Err(GazeFieldError::DegenerateAtEye);
    }
    Ok(vec)
}

/// Ground-truth gaze: the eye-to-target vector at the annotated target pixel.
pub fn ground_truth_gaze<T: Real>(
    cloud: &PointGrid<T>,
    eye: &EyeLocation<T>,
    target: Pixel<T>,
) -> Result<GazeVector<T>, GazeFieldError> {
    pixel_to_eye_vector(cloud, eye, target)
}

fn fov_core<T: Real>(
    width: usize,
    height: usize,
    points: &[Point3<T>],
    point_scale: T,
    eye: Point3<T>,
    eye_cell: Option<(usize, usize)>,
    g: GazeVector<T>,
    cfg: &DecayConfig,
) -> Result<FovHeatmap<T>, GazeFieldError> {
    let g_norm = g.norm();
    if !(g_norm > T::zero() && g_norm.is_finite()) {
        return Err(GazeFieldError::ZeroVector);
    }
    let mut values = vec![T::zero(); width * height];
    values.par_chunks_mut(width).enumerate().for_each(|(v, row)| {
        for (u, out) in row.iter_mut().enumerate() {
            let p = points[v * width + u];
            let p = if point_scale == T::one() { p } else { p * point_scale };
            let vec = p - eye;
            let n = vec.norm();
            *out = if n > T::zero() {
                let raw = (vec.dot(g) / (n * g_norm)).max(T::zero()).min(T::one());
                apply_decay(raw, cfg)
            } else {
                T::zero()
            };
        }
    });
    if let Some((u, v)) = eye_cell {
        values[v * width + u] = T::zero();
    }
    Ok(FovHeatmap { width, height, values })
}

/// FoV heatmap for a view from its own (possibly relative-scale) point cloud.
/// The eye's own cell is 0.
pub fn fov_heatmap<T: Real>(
    cloud: &PointGrid<T>,
    eye: &EyeLocation<T>,
    g: GazeVector<T>,
    cfg: &DecayConfig,
) -> Result<FovHeatmap<T>, GazeFieldError> {
    let (w, h) = cloud.size();
    let eye_cell = eye.px.nearest_cell(w, h);
    if eye.scale == cloud.scale() {
        // Common scale cancels in every cosine; work on unscaled geometry.
        fov_core(w, h, cloud.raw_points(), T::one(), eye.raw, eye_cell, g, cfg)
    } else {
        fov_core(w, h, cloud.raw_points(), cloud.scale(), eye.p3, eye_cell, g, cfg)
    }
}

/// FoV heatmap for a primary view whose eye location comes from another
/// view. `cloud` must be metric (scale/shift-corrected), `eye` and `g` in
/// the primary camera frame. The eye may lie outside the image or behind
/// the camera; if it projects inside the image, that cell is 0.
pub fn fov_heatmap_cross_view<T: Real>(
    primary_cam: &Camera<T>,
    cloud: &PointGrid<T>,
    eye: Point3<T>,
    g: GazeVector<T>,
    cfg: &DecayConfig,
) -> Result<FovHeatmap<T>, GazeFieldError> {
    let (w, h) = cloud.size();
    let eye_cell = primary_cam.project(eye).ok().and_then(|px| px.nearest_cell(w, h));
    fov_core(w, h, cloud.raw_points(), cloud.scale(), eye, eye_cell, g, cfg)
}
