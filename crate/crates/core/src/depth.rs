//! Depth maps, pseudo point clouds and affine (scale/shift) alignment of
//! relative depth to absolute reference depth.
//!
//! A [`DepthMap`] stores its samples together with a uniform scale factor.
//! Rescaling a map only touches that factor, so anything that depends on
//! depth only up to scale (directions, cosines) can be evaluated on the
//! unscaled samples and is exactly invariant under rescaling.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{Camera, Pixel};
use crate::linalg::{Point3, Vec3};
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum DepthError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: (usize, usize), got: (usize, usize) },
    #[error("invalid depth value {value} at index {index}")]
    InvalidValue { index: usize, value: f64 },
    #[error("too few usable pixels: {got} < {needed}")]
    TooFewPixels { got: usize, needed: usize },
    #[error("no consensus: best inlier ratio {ratio:.3} < {required:.3}")]
    NoConsensus { ratio: f64, required: f64 },
    #[error("corrected depth is non-positive at index {index} ({value})")]
    NonPositiveResult { index: usize, value: f64 },
    #[error("scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("bad DPTH data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense per-pixel depth of arbitrary (relative) units.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap<T> {
    width: usize,
    height: usize,
    samples: Vec<T>,
    scale: T,
}

impl<T: Real> DepthMap<T> {
    pub fn new(width: usize, height: usize, values: Vec<T>) -> Result<Self, DepthError> {
        if values.len() != width * height {
            return Err(DepthError::ShapeMismatch {
                expected: (width, height),
                got: (values.len(), 1),
            });
        }
        if let Some((index, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v > T::zero()))
        {
            return Err(DepthError::InvalidValue { index, value: v.as_f64() });
        }
        Ok(Self { width, height, samples: values, scale: T::one() })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> T) -> Result<Self, DepthError> {
        let values = (0..height).flat_map(|v| (0..width).map(move |u| (u, v))).map(|(u, v)| f(u, v)).collect();
        Self::new(width, height, values)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Uniform factor applied on top of the stored samples.
    pub fn scale(&self) -> T {
        self.scale
    }

    /// Same map with every depth multiplied by `k` (`k > 0`).
    pub fn scaled(&self, k: T) -> Result<Self, DepthError> {
        if !(k > T::zero() && k.is_finite()) {
            return Err(DepthError::NonPositiveScale(k.as_f64()));
        }
        Ok(Self { scale: self.scale * k, ..self.clone() })
    }

    /// Depth at grid cell `(u, v)`.
    pub fn get(&self, u: usize, v: usize) -> T {
        self.apply_scale(self.samples[v * self.width + u])
    }

    /// Depth at flat row-major index.
    pub fn at(&self, i: usize) -> T {
        self.apply_scale(self.samples[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = T> + '_ {
        self.samples.iter().map(move |&s| self.apply_scale(s))
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.iter().collect()
    }

    /// Bilinear depth at a sub-pixel position, clamped to the grid.
    pub fn sample_bilinear(&self, px: Pixel<T>) -> T {
        let (w1, h1) = (T::from_usize_lossy(self.width - 1), T::from_usize_lossy(self.height - 1));
        let u = px.u.max(T::zero()).min(w1);
        let v = px.v.max(T::zero()).min(h1);
        let (u0, v0) = (u.floor(), v.floor());
        let (fu, fv) = (u - u0, v - v0);
        let (iu, iv) = (u0.to_usize().unwrap_or(0), v0.to_usize().unwrap_or(0));
        let iu1 = (iu + 1).min(self.width - 1);
        let iv1 = (iv + 1).min(self.height - 1);
        let one = T::one();
        self.get(iu, iv) * (one - fu) * (one - fv)
            + self.get(iu1, iv) * fu * (one - fv)
            + self.get(iu, iv1) * (one - fu) * fv
            + self.get(iu1, iv1) * fu * fv
    }

    fn apply_scale(&self, s: T) -> T {
        if self.scale == T::one() {
            s
        } else {
            s * self.scale
        }
    }

    /// Unscaled samples; only meaningful together with [`DepthMap::scale`].
    pub(crate) fn raw_samples(&self) -> &[T] {
        &self.samples
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DepthError> {
        let (w, h, data) = dpth::read(path)?;
        Self::new(w, h, data.into_iter().map(|v| T::lit(v as f64)).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DepthError> {
        let data: Vec<f32> = self.iter().map(|v| v.as_f64() as f32).collect();
        dpth::write(path, self.width, self.height, &data)
    }
}

/// Depth in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct AbsoluteDepthMap<T>(pub DepthMap<T>);

impl<T: Real> AbsoluteDepthMap<T> {
    pub fn new(width: usize, height: usize, meters: Vec<T>) -> Result<Self, DepthError> {
        DepthMap::new(width, height, meters).map(Self)
    }

    pub fn map(&self) -> &DepthMap<T> {
        &self.0
    }

    pub fn into_map(self) -> DepthMap<T> {
        self.0
    }
}

/// Boolean per-pixel mask; `true` marks usable pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl PixelMask {
    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self { width, height, bits: vec![value; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height).flat_map(|v| (0..width).map(move |u| (u, v))).map(|(u, v)| f(u, v)).collect();
        Self { width, height, bits }
    }

    pub fn get(&self, u: usize, v: usize) -> bool {
        self.bits[v * self.width + u]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Logical not.
    pub fn inverted(&self) -> Self {
        Self { bits: self.bits.iter().map(|b| !b).collect(), ..self.clone() }
    }
}

/// Per-pixel 3D points in a camera frame, row-major, with a uniform scale
/// inherited from the depth map they were lifted from.
#[derive(Clone, Debug, PartialEq)]
pub struct PointGrid<T> {
    width: usize,
    height: usize,
    points: Vec<Point3<T>>,
    scale: T,
}

impl<T: Real> PointGrid<T> {
    pub fn from_points(width: usize, height: usize, points: Vec<Point3<T>>) -> Result<Self, DepthError> {
        if points.len() != width * height {
            return Err(DepthError::ShapeMismatch {
                expected: (width, height),
                got: (points.len(), 1),
            });
        }
        Ok(Self { width, height, points, scale: T::one() })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn scale(&self) -> T {
        self.scale
    }

    pub fn get(&self, u: usize, v: usize) -> Point3<T> {
        let p = self.points[v * self.width + u];
        if self.scale == T::one() {
            p
        } else {
            p * self.scale
        }
    }

    pub fn scaled(&self, k: T) -> Self {
        Self { scale: self.scale * k, ..self.clone() }
    }

    pub(crate) fn raw_points(&self) -> &[Point3<T>] {
        &self.points
    }
}

/// Lifts every pixel of `d` to a camera-frame point:
/// `((u-cx)/fx·D, (v-cy)/fy·D, D)`. The map's scale is carried over, not corrected.
pub fn pseudo_pointcloud<T: Real>(cam: &Camera<T>, d: &DepthMap<T>) -> Result<PointGrid<T>, DepthError> {
    let expected = cam.intrinsics.size();
    if d.size() != expected {
        return Err(DepthError::ShapeMismatch { expected, got: d.size() });
    }
    let k = &cam.intrinsics;
    let (w, h) = d.size();
    let raw = d.raw_samples();
    let points = (0..h)
        .flat_map(|v| (0..w).map(move |u| (u, v)))
        .map(|(u, v)| {
            let depth = raw[v * w + u];
            let (uf, vf) = (T::from_usize_lossy(u), T::from_usize_lossy(v));
            Vec3::new((uf - k.cx) / k.fx * depth, (vf - k.cy) / k.fy * depth, depth)
        })
        .collect();
    Ok(PointGrid { width: w, height: h, points, scale: d.scale() })
}

/// Affine correction `D* = a·D + b` with fit diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleShift<T> {
    pub a: T,
    pub b: T,
    pub inlier_count: usize,
    pub inlier_rms: T,
}

impl<T: Real> ScaleShift<T> {
    pub fn exact(a: T, b: T) -> Self {
        Self { a, b, inlier_count: 0, inlier_rms: T::zero() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Inlier threshold as a fraction of the median reference depth.
    pub threshold_fraction: f64,
    pub min_inlier_ratio: f64,
    pub min_inlier_pixels: usize,
    pub seed: u64,
}

impl RansacConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            iterations: 500,
            threshold_fraction: 0.02,
            min_inlier_ratio: 0.3,
            min_inlier_pixels: 100,
            seed,
        }
    }
}

fn least_squares_line<T: Real>(xs: &[T], ys: &[T], idx: &[usize]) -> Option<(T, T)> {
    let n = T::from_usize_lossy(idx.len());
    let mx = idx.iter().map(|&i| xs[i]).sum::<T>() / n;
    let my = idx.iter().map(|&i| ys[i]).sum::<T>() / n;
    let (mut sxx, mut sxy) = (T::zero(), T::zero());
    for &i in idx {
        let dx = xs[i] - mx;
        sxx += dx * dx;
        sxy += dx * (ys[i] - my);
    }
    if !(sxx > T::zero()) {
        return None;
    }
    let a = sxy / sxx;
    Some((a, my - a * mx))
}

fn inliers<T: Real>(xs: &[T], ys: &[T], a: T, b: T, thr: T) -> Vec<usize> {
    (0..xs.len()).filter(|&i| (a * xs[i] + b - ys[i]).abs() < thr).collect()
}

/// Robust fit of `abs_ref ≈ a·rel + b` over pixels where `mask` is true.
///
/// Two-pixel hypotheses are drawn up front from a seeded generator and
/// scored independently; the best hypothesis (earliest on ties) is refined
/// by least squares on its inliers, re-scored, and refined once more.
pub fn ransac_scale_shift<T: Real>(
    rel: &DepthMap<T>,
    abs_ref: &AbsoluteDepthMap<T>,
    mask: &PixelMask,
    cfg: &RansacConfig,
) -> Result<ScaleShift<T>, DepthError> {
    let abs_map = abs_ref.map();
    if rel.size() != abs_map.size() {
        return Err(DepthError::ShapeMismatch { expected: rel.size(), got: abs_map.size() });
    }
    if mask.size() != rel.size() {
        return Err(DepthError::ShapeMismatch { expected: rel.size(), got: mask.size() });
    }
    let idx: Vec<usize> = (0..rel.len()).filter(|&i| mask.bits[i]).collect();
    let needed = cfg.min_inlier_pixels.max(2);
    if idx.len() < needed {
        return Err(DepthError::TooFewPixels { got: idx.len(), needed });
    }
    let xs: Vec<T> = idx.iter().map(|&i| rel.at(i)).collect();
    let ys: Vec<T> = idx.iter().map(|&i| abs_map.at(i)).collect();
    let n = xs.len();

    let mut sorted = ys.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite depths"));
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) * T::lit(0.5)
    };
    let thr = median * T::lit(cfg.threshold_fraction);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let hypotheses: Vec<(usize, usize)> = (0..cfg.iterations)
        .map(|_| {
            let i = rng.gen_range(0..n);
            let mut j = rng.gen_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            (i, j)
        })
        .collect();

    let scores: Vec<Option<(usize, T, T)>> = hypotheses
        .par_iter()
        .map(|&(i, j)| {
            let dx = xs[i] - xs[j];
            if dx == T::zero() {
                return None;
            }
            let a = (ys[i] - ys[j]) / dx;
            let b = ys[i] - a * xs[i];
            if !(a > T::zero() && a.is_finite() && b.is_finite()) {
                return None;
            }
            let count = (0..n).filter(|&k| (a * xs[k] + b - ys[k]).abs() < thr).count();
            Some((count, a, b))
        })
        .collect();

    let mut best: Option<(usize, T, T)> = None;
    for s in scores.into_iter().flatten() {
        if best.map_or(true, |b| s.0 > b.0) {
            best = Some(s);
        }
    }
    let (count, a0, b0) = best.unwrap_or((0, T::one(), T::zero()));
    let ratio = count as f64 / n as f64;
    if count < 2 || ratio < cfg.min_inlier_ratio {
        return Err(DepthError::NoConsensus { ratio, required: cfg.min_inlier_ratio });
    }

    let mut model = (a0, b0);
    let mut set = inliers(&xs, &ys, a0, b0, thr);
    for _ in 0..2 {
        match least_squares_line(&xs, &ys, &set) {
            Some(m) if m.0 > T::zero() => model = m,
            _ => break,
        }
        let next = inliers(&xs, &ys, model.0, model.1, thr);
        if next.len() < 2 {
            break;
        }
        set = next;
    }
    let (a, b) = model;
    let ratio = set.len() as f64 / n as f64;
    if ratio < cfg.min_inlier_ratio {
        return Err(DepthError::NoConsensus { ratio, required: cfg.min_inlier_ratio });
    }
    let sse: T = set.iter().map(|&i| {
        let r = a * xs[i] + b - ys[i];
        r * r
    }).sum();
    let inlier_rms = (sse / T::from_usize_lossy(set.len())).sqrt();
    Ok(ScaleShift { a, b, inlier_count: set.len(), inlier_rms })
}

/// Elementwise `a·D + b`.
pub fn apply_scale_shift<T: Real>(rel: &DepthMap<T>, s: &ScaleShift<T>) -> Result<AbsoluteDepthMap<T>, DepthError> {
    if !(s.a > T::zero()) {
        return Err(DepthError::NonPositiveScale(s.a.as_f64()));
    }
    let mut out = Vec::with_capacity(rel.len());
    for (index, d) in rel.iter().enumerate() {
        let v = s.a * d + s.b;
        if !(v > T::zero()) {
            return Err(DepthError::NonPositiveResult { index, value: v.as_f64() });
        }
        out.push(v);
    }
    AbsoluteDepthMap::new(rel.width(), rel.height(), out)
}

/// Little-endian float grid format: `"DPTH"`, `u32` width, `u32` height,
/// then `width·height` row-major `f32`.
pub mod dpth {
    use super::*;

    pub const MAGIC: &[u8; 4] = b"DPTH";

    pub fn encode(width: usize, height: usize, data: &[f32]) -> Result<Vec<u8>, DepthError> {
        if data.len() != width * height {
            return Err(DepthError::ShapeMismatch { expected: (width, height), got: (data.len(), 1) });
        }
        let mut out = Vec::with_capacity(12 + 4 * data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(width as u32).to_le_bytes());
        out.extend_from_slice(&(height as u32).to_le_bytes());
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>), DepthError> {
        if bytes.len() < 12 || &bytes[0..4] != MAGIC {
            return Err(DepthError::Format("missing DPTH header".into()));
        }
        let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
        let (w, h) = (word(4), word(8));
        let body = &bytes[12..];
        if body.len() != 4 * w * h {
            return Err(DepthError::Format(format!(
                "expected {} payload bytes for {w}x{h}, found {}",
                4 * w * h,
                body.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok((w, h, data))
    }

    pub fn write(path: impl AsRef<Path>, width: usize, height: usize, data: &[f32]) -> Result<(), DepthError> {
        let bytes = encode(width, height, data)?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f32>), DepthError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{Extrinsics, Intrinsics};

    fn camera(w: u32, h: u32) -> Camera<f64> {
        let k = Intrinsics::new(50.0, 50.0, (w / 2) as f64, (h / 2) as f64, w, h).unwrap();
        Camera::new("cam", k, Extrinsics::identity())
    }

    #[test]
    fn rejects_non_positive_depth() {
        assert!(DepthMap::new(2, 1, vec![1.0, 0.0]).is_err());
        assert!(DepthMap::new(2, 1, vec![1.0, f64::NAN]).is_err());
        assert!(DepthMap::new(2, 2, vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn pointcloud_principal_point_and_scaling() {
        let cam = camera(8, 6);
        let d = DepthMap::from_fn(8, 6, |_, _| 2.5).unwrap();
        let cloud = pseudo_pointcloud(&cam, &d).unwrap();
        assert_eq!(cloud.get(4, 3), Vec3::new(0.0, 0.0, 2.5));

        let k = 3.7;
        let scaled = pseudo_pointcloud(&cam, &d.scaled(k).unwrap()).unwrap();
        for v in 0..6 {
            for u in 0..8 {
                assert_eq!(scaled.get(u, v), cloud.get(u, v) * k);
            }
        }
        assert!(matches!(
            pseudo_pointcloud(&camera(4, 4), &d),
            Err(DepthError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn ransac_identity_fit() {
        let rel = DepthMap::from_fn(20, 10, |u, v| 1.0 + 0.1 * u as f64 + 0.05 * v as f64).unwrap();
        let abs = AbsoluteDepthMap(rel.clone());
        let mask = PixelMask::filled(20, 10, true);
        let fit = ransac_scale_shift(&rel, &abs, &mask, &RansacConfig::new(1)).unwrap();
        assert!((fit.a - 1.0).abs() < 1e-9 && fit.b.abs() < 1e-9);
        assert_eq!(fit.inlier_count, 200);
        assert!(fit.inlier_rms <= 1e-9);
    }

    #[test]
    fn ransac_empty_mask() {
        let rel = DepthMap::from_fn(20, 10, |u, _| 1.0 + u as f64).unwrap();
        let abs = AbsoluteDepthMap(rel.clone());
        let mask = PixelMask::filled(20, 10, false);
        assert!(matches!(
            ransac_scale_shift(&rel, &abs, &mask, &RansacConfig::new(1)),
            Err(DepthError::TooFewPixels { got: 0, .. })
        ));
    }

    #[test]
    fn ransac_no_consensus_on_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<f64> = (0..900).map(|_| rng.gen_range(1.0..5.0)).collect();
        let ys: Vec<f64> = (0..900).map(|_| rng.gen_range(1.0..5.0)).collect();
        let rel = DepthMap::new(30, 30, xs).unwrap();
        let abs = AbsoluteDepthMap::new(30, 30, ys).unwrap();
        let mask = PixelMask::filled(30, 30, true);
        assert!(matches!(
            ransac_scale_shift(&rel, &abs, &mask, &RansacConfig::new(9)),
            Err(DepthError::NoConsensus { .. })
        ));
    }

    #[test]
    fn apply_examples() {
        let rel = DepthMap::new(1, 1, vec![1.0]).unwrap();
        let out = apply_scale_shift(&rel, &ScaleShift::exact(2.0, 0.5)).unwrap();
        assert_eq!(out.map().get(0, 0), 2.5);
        let out = apply_scale_shift(&rel, &ScaleShift::exact(1.0, 0.0)).unwrap();
        assert_eq!(out.map().get(0, 0), 1.0);
        assert!(matches!(
            apply_scale_shift(&rel, &ScaleShift::exact(1.0, -2.0)),
            Err(DepthError::NonPositiveResult { .. })
        ));
        assert!(apply_scale_shift(&rel, &ScaleShift::exact(-1.0, 3.0)).is_err());
    }

    #[test]
    fn dpth_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.dpth");
        let d = DepthMap::from_fn(5, 3, |u, v| 1.0 + u as f64 * 0.25 + v as f64).unwrap();
        d.save(&path).unwrap();
        let back = DepthMap::<f64>::load(&path).unwrap();
        assert_eq!(back, d);

        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"DPTH");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 5);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 12 + 4 * 15);

        dpth::write(&path, 2, 1, &[1.0, -1.0]).unwrap();
        assert!(matches!(DepthMap::<f64>::load(&path), Err(DepthError::InvalidValue { index: 1, .. })));
        assert!(dpth::decode(b"DPTX\0\0\0\0\0\0\0\0").is_err());
        assert!(dpth::decode(&dpth::encode(2, 2, &[1.0; 4]).unwrap()[..20]).is_err());
    }
}
