//! Pinhole cameras, inter-camera transforms, epipolar geometry and
//! two-view triangulation.
//!
//! Extrinsics map world to camera coordinates: `X_cam = R·X_world + t`.
//! Pixel coordinates are continuous with integer values at pixel centers,
//! so the sampling grid of a `width × height` image spans
//! `[0, width-1] × [0, height-1]`.

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::linalg::{symmetric_min_eigenvector, Mat3, Point3, Vec3};
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point has non-positive depth {0}")]
    NonPositiveDepth(f64),
    #[error("camera centers coincide; epipolar geometry undefined")]
    DegenerateBaseline,
    #[error("rays are nearly parallel ({angle_deg:.4}° < 0.1°)")]
    NearParallelRays { angle_deg: f64 },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid extrinsics: {0}")]
    InvalidExtrinsics(String),
    #[error("epipolar sampling needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
}

/// Sub-pixel image coordinate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pixel<T> {
    pub u: T,
    pub v: T,
}

impl<T: Real> Pixel<T> {
    pub const fn new(u: T, v: T) -> Self {
        Self { u, v }
    }

    pub fn homogeneous(self) -> Vec3<T> {
        Vec3::new(self.u, self.v, T::one())
    }

    pub fn distance(self, o: Self) -> T {
        (self.u - o.u).hypot(self.v - o.v)
    }

    /// Nearest integer grid cell, if it lies inside a `width × height` grid.
    pub fn nearest_cell(self, width: usize, height: usize) -> Option<(usize, usize)> {
        let (u, v) = (self.u.round(), self.v.round());
        if !(u.is_finite() && v.is_finite()) || u < T::zero() || v < T::zero() {
            return None;
        }
        let (iu, iv) = (u.to_usize()?, v.to_usize()?);
        (iu < width && iv < height).then_some((iu, iv))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: u32,
    pub height: u32,
}

impl<T: Real> Intrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T, width: u32, height: u32) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |m: &str| Err(GeometryError::InvalidIntrinsics(m.to_string()));
        if !(self.fx > T::zero() && self.fy > T::zero()) {
            return bad("focal lengths must be positive");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive");
        }
        let (w, h) = (T::lit(self.width as f64), T::lit(self.height as f64));
        if !(self.cx >= T::zero() && self.cx < w && self.cy >= T::zero() && self.cy < h) {
            return bad("principal point outside image");
        }
        Ok(())
    }

    pub fn matrix(&self) -> Mat3<T> {
        let (o, z) = (T::one(), T::zero());
        Mat3::from_rows([[self.fx, z, self.cx], [z, self.fy, self.cy], [z, z, o]])
    }

    pub fn inverse_matrix(&self) -> Mat3<T> {
        let (o, z) = (T::one(), T::zero());
        Mat3::from_rows([
            [o / self.fx, z, -self.cx / self.fx],
            [z, o / self.fy, -self.cy / self.fy],
            [z, z, o],
        ])
    }

    /// Viewing ray through `px` scaled to unit depth.
    pub fn unit_depth_ray(&self, px: Pixel<T>) -> Vec3<T> {
        Vec3::new((px.u - self.cx) / self.fx, (px.v - self.cy) / self.fy, T::one())
    }

    /// Whether `px` lies in the sampling rectangle `[0, w-1] × [0, h-1]`.
    pub fn contains(&self, px: Pixel<T>) -> bool {
        let (w, h) = self.max_coords();
        px.u >= T::zero() && px.v >= T::zero() && px.u <= w && px.v <= h
    }

    pub(crate) fn max_coords(&self) -> (T, T) {
        (T::lit(self.width as f64 - 1.0), T::lit(self.height as f64 - 1.0))
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width as usize, self.height as usize)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Extrinsics<T> {
    /// World→camera rotation.
    pub r: Mat3<T>,
    /// World→camera translation.
    pub t: Vec3<T>,
}

impl<T: Real> Extrinsics<T> {
    pub fn new(r: Mat3<T>, t: Vec3<T>) -> Result<Self, GeometryError> {
        if !r.is_rotation(T::structural_tol()) {
            return Err(GeometryError::InvalidExtrinsics(
                "R is not a proper rotation".into(),
            ));
        }
        if !t.is_finite() {
            return Err(GeometryError::InvalidExtrinsics("t is not finite".into()));
        }
        Ok(Self { r, t })
    }

    pub fn identity() -> Self {
        Self { r: Mat3::identity(), t: Vec3::zeros() }
    }

    /// Pose of a camera at world position `center` with world→camera rotation `r`.
    pub fn from_center(r: Mat3<T>, center: Vec3<T>) -> Result<Self, GeometryError> {
        Self::new(r, -(r * center))
    }

    /// Camera looking from `eye` toward `target`. Camera axes: x right,
    /// y down, z forward. `up` is the world up direction.
    pub fn look_at(eye: Vec3<T>, target: Vec3<T>, up: Vec3<T>) -> Result<Self, GeometryError> {
        let bad = || GeometryError::InvalidExtrinsics("degenerate look-at".into());
        let z = (target - eye).normalized().ok_or_else(bad)?;
        let x = z.cross(up).normalized().ok_or_else(bad)?;
        let y = z.cross(x);
        Self::from_center(Mat3::from_row_vectors(x, y, z), eye)
    }

    /// Camera center in world coordinates, `-Rᵀt`.
    pub fn center(&self) -> Vec3<T> {
        -(self.r.transpose() * self.t)
    }

    pub fn world_to_camera(&self, p: Point3<T>) -> Point3<T> {
        self.r * p + self.t
    }

    pub fn camera_to_world(&self, p: Point3<T>) -> Point3<T> {
        self.r.transpose() * (p - self.t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Camera<T> {
    pub id: String,
    pub intrinsics: Intrinsics<T>,
    pub extrinsics: Extrinsics<T>,
}

impl<T: Real> Camera<T> {
    pub fn new(id: impl Into<String>, intrinsics: Intrinsics<T>, extrinsics: Extrinsics<T>) -> Self {
        Self { id: id.into(), intrinsics, extrinsics }
    }

    /// Pinhole projection of a camera-frame point.
    pub fn project(&self, p: Point3<T>) -> Result<Pixel<T>, GeometryError> {
        if !(p.z > T::zero()) {
            return Err(GeometryError::NonPositiveDepth(p.z.as_f64()));
        }
        let k = &self.intrinsics;
        Ok(Pixel::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy))
    }

    /// Lifts a pixel to the camera-frame point at the given depth (z).
    pub fn backproject(&self, px: Pixel<T>, depth: T) -> Result<Point3<T>, GeometryError> {
        if !(depth > T::zero()) {
            return Err(GeometryError::NonPositiveDepth(depth.as_f64()));
        }
        let k = &self.intrinsics;
        Ok(Vec3::new(
            (px.u - k.cx) / k.fx * depth,
            (px.v - k.cy) / k.fy * depth,
            depth,
        ))
    }

    pub fn project_world(&self, p: Point3<T>) -> Result<Pixel<T>, GeometryError> {
        self.project(self.extrinsics.world_to_camera(p))
    }

    pub fn center(&self) -> Vec3<T> {
        self.extrinsics.center()
    }

    /// World-frame direction of the viewing ray through `px` (not normalized).
    pub fn world_ray(&self, px: Pixel<T>) -> Vec3<T> {
        self.extrinsics.r.transpose() * self.intrinsics.unit_depth_ray(px)
    }

    pub fn cast<U: Real>(&self) -> Camera<U> {
        let k = &self.intrinsics;
        Camera {
            id: self.id.clone(),
            intrinsics: Intrinsics {
                fx: U::lit(k.fx.as_f64()),
                fy: U::lit(k.fy.as_f64()),
                cx: U::lit(k.cx.as_f64()),
                cy: U::lit(k.cy.as_f64()),
                width: k.width,
                height: k.height,
            },
            extrinsics: Extrinsics {
                r: self.extrinsics.r.cast(),
                t: self.extrinsics.t.cast(),
            },
        }
    }
}

/// JSON wire form of a camera: `{id, fx, fy, cx, cy, width, height, R, t}`
/// with `R` as 9 row-major numbers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CameraRecord {
    pub id: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
}

impl<T: Real> From<&Camera<T>> for CameraRecord {
    fn from(c: &Camera<T>) -> Self {
        let k = &c.intrinsics;
        let r = c.extrinsics.r.to_row_major().map(|v| v.as_f64());
        let t = c.extrinsics.t.to_array().map(|v| v.as_f64());
        Self {
            id: c.id.clone(),
            fx: k.fx.as_f64(),
            fy: k.fy.as_f64(),
            cx: k.cx.as_f64(),
            cy: k.cy.as_f64(),
            width: k.width,
            height: k.height,
            r,
            t,
        }
    }
}

impl<T: Real> TryFrom<CameraRecord> for Camera<T> {
    type Error = GeometryError;

    fn try_from(rec: CameraRecord) -> Result<Self, Self::Error> {
        let intrinsics = Intrinsics::new(
            T::lit(rec.fx),
            T::lit(rec.fy),
            T::lit(rec.cx),
            T::lit(rec.cy),
            rec.width,
            rec.height,
        )?;
        let r = Mat3::from_row_slice(&rec.r.map(T::lit)).expect("nine entries");
        let t = Vec3::from_array(rec.t.map(T::lit));
        Ok(Camera::new(rec.id, intrinsics, Extrinsics::new(r, t)?))
    }
}

impl<T: Real> Serialize for Camera<T> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        CameraRecord::from(self).serialize(s)
    }
}

impl<'de, T: Real> Deserialize<'de> for Camera<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rec = CameraRecord::deserialize(d)?;
        Camera::try_from(rec).map_err(serde::de::Error::custom)
    }
}

/// `R₁·R₂⁻¹`: rotates directions expressed in camera 2 into camera 1.
pub fn relative_rotation<T: Real>(r1: &Extrinsics<T>, r2: &Extrinsics<T>) -> Mat3<T> {
    r1.r * r2.r.transpose()
}

/// Relative pose `(R, t)` with `X_dst = R·X_src + t`.
pub fn relative_pose<T: Real>(src: &Extrinsics<T>, dst: &Extrinsics<T>) -> (Mat3<T>, Vec3<T>) {
    let r = dst.r * src.r.transpose();
    let t = dst.t - r * src.t;
    (r, t)
}

/// Moves a point from the `src` camera frame into the `dst` camera frame.
pub fn transform_point<T: Real>(src: &Camera<T>, dst: &Camera<T>, p: Point3<T>) -> Point3<T> {
    let world = src.extrinsics.camera_to_world(p);
    dst.extrinsics.world_to_camera(world)
}

/// Fundamental matrix with `x₂ᵀ·F·x₁ = 0` for corresponding pixels.
pub fn fundamental_matrix<T: Real>(cam1: &Camera<T>, cam2: &Camera<T>) -> Result<Mat3<T>, GeometryError> {
    let (r, t) = relative_pose(&cam1.extrinsics, &cam2.extrinsics);
    let scale = T::one()
        .max(cam1.extrinsics.t.norm())
        .max(cam2.extrinsics.t.norm());
    if t.norm() <= T::lit(1e-12) * scale || (cam1.center() - cam2.center()).norm() <= T::lit(1e-12) * scale {
        return Err(GeometryError::DegenerateBaseline);
    }
    let essential = Mat3::skew(t) * r;
    Ok(cam2.intrinsics.inverse_matrix().transpose() * essential * cam1.intrinsics.inverse_matrix())
}

/// Homogeneous image line `a·u + b·v + c = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpipolarLine<T> {
    pub a: T,
    pub b: T,
    pub c: T,
}

impl<T: Real> EpipolarLine<T> {
    /// Line in view 2 for pixel `px` of view 1. `None` when `(a, b) = (0, 0)`,
    /// which happens exactly at the epipole.
    pub fn from_fundamental(f: &Mat3<T>, px: Pixel<T>) -> Option<Self> {
        let l = *f * px.homogeneous();
        let line = Self { a: l.x, b: l.y, c: l.z };
        (line.a.hypot(line.b) > T::zero()).then_some(line)
    }

    /// Signed distance in pixels.
    pub fn distance(&self, px: Pixel<T>) -> T {
        (self.a * px.u + self.b * px.v + self.c) / self.a.hypot(self.b)
    }
}

/// A clipped line segment in an image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment<T> {
    pub start: Pixel<T>,
    pub end: Pixel<T>,
}

/// Liang–Barsky clipping of a parametric segment `p0 + s·d`, `s ∈ [lo, hi]`,
/// against half-planes given as `(p, q)` pairs meaning `s·p ≤ q`.
fn liang_barsky<T: Real>(mut lo: T, mut hi: T, constraints: &[(T, T)]) -> Option<(T, T)> {
    for &(p, q) in constraints {
        if p == T::zero() {
            if q < T::zero() {
                return None;
            }
        } else {
            let r = q / p;
            if p < T::zero() {
                lo = lo.max(r);
            } else {
                hi = hi.min(r);
            }
        }
        if lo > hi {
            return None;
        }
    }
    Some((lo, hi))
}

/// Intersects the epipolar line `F·[u, v, 1]ᵀ` with the view-2 sampling
/// rectangle. `None` when the line misses the image.
pub fn epipolar_segment<T: Real>(f: &Mat3<T>, px: Pixel<T>, img: &Intrinsics<T>) -> Option<Segment<T>> {
    let line = EpipolarLine::from_fundamental(f, px)?;
    let n2 = line.a * line.a + line.b * line.b;
    let p0 = Pixel::new(-line.a * line.c / n2, -line.b * line.c / n2);
    let n = n2.sqrt();
    let d = (line.b / n, -line.a / n);
    let (w, h) = img.max_coords();
    let big = T::max_value();
    let (s0, s1) = liang_barsky(
        -big,
        big,
        &[
            (-d.0, p0.u),
            (d.0, w - p0.u),
            (-d.1, p0.v),
            (d.1, h - p0.v),
        ],
    )?;
    let at = |s: T| Pixel::new(p0.u + s * d.0, p0.v + s * d.1);
    // Snap to the exact line to keep residuals at rounding level.
    let snap = |p: Pixel<T>| {
        let e = (line.a * p.u + line.b * p.v + line.c) / n2;
        Pixel::new(p.u - e * line.a, p.v - e * line.b)
    };
    Some(Segment { start: snap(at(s0)), end: snap(at(s1)) })
}

/// The part of the epipolar line of `px` that images 3D points in front
/// of both cameras, clipped to the view-2 sampling rectangle.
///
/// The viewing ray of `px` is parametrised projectively as
/// `h(s) = (1-s)·a + s·b` with `a` the image of camera 1's center and `b`
/// the image of the ray's point at infinity; every visibility and image
/// bound is linear in `s ∈ [0, 1]`.
pub fn visible_epipolar_segment<T: Real>(
    cam1: &Camera<T>,
    cam2: &Camera<T>,
    px: Pixel<T>,
) -> Option<Segment<T>> {
    let (r, t) = relative_pose(&cam1.extrinsics, &cam2.extrinsics);
    let k2 = cam2.intrinsics.matrix();
    let a = k2 * t;
    let b = k2 * (r * cam1.intrinsics.unit_depth_ray(px));
    let (w, h) = cam2.intrinsics.max_coords();
    // Positive depth, with a small margin so the projection stays finite.
    let eps = T::lit(1e-9) * a.z.abs().max(b.z.abs()).max(T::one());
    let da = a - b; // h(s) = a - s·da
    let constraints = [
        // z(s) ≥ eps
        (da.z, a.z - eps),
        // x(s) ≥ 0
        (da.x, a.x),
        // x(s) ≤ w·z(s)
        (w * da.z - da.x, w * a.z - a.x),
        // y(s) ≥ 0
        (da.y, a.y),
        // y(s) ≤ h·z(s)
        (h * da.z - da.y, h * a.z - a.y),
    ];
    let (s0, s1) = liang_barsky(T::zero(), T::one(), &constraints)?;
    let at = |s: T| {
        let hs = a - da * s;
        Pixel::new(hs.x / hs.z, hs.y / hs.z)
    };
    let (p0, p1) = (at(s0), at(s1));
    (p0.u.is_finite() && p0.v.is_finite() && p1.u.is_finite() && p1.v.is_finite())
        .then_some(Segment { start: p0, end: p1 })
}

/// `n` uniformly spaced pixels from `seg.start` to `seg.end`, endpoints included.
pub fn sample_epipolar<T: Real>(seg: &Segment<T>, n: usize) -> Result<Vec<Pixel<T>>, GeometryError> {
    if n < 2 {
        return Err(GeometryError::TooFewSamples(n));
    }
    let last = T::from_usize_lossy(n - 1);
    Ok((0..n)
        .map(|i| {
            if i + 1 == n {
                return seg.end;
            }
            let s = T::from_usize_lossy(i) / last;
            Pixel::new(
                seg.start.u + (seg.end.u - seg.start.u) * s,
                seg.start.v + (seg.end.v - seg.start.v) * s,
            )
        })
        .collect())
}

/// Default number of epipolar samples per query token.
pub const DEFAULT_EPIPOLAR_SAMPLES: usize = 48;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Triangulation<T> {
    /// World-frame point.
    pub point: Point3<T>,
    /// Largest reprojection error over the two views, in pixels.
    pub residual_px: T,
    /// Angle between the two viewing rays, degrees.
    pub ray_angle_deg: T,
}

fn reprojection_residual<T: Real>(
    cam1: &Camera<T>,
    px1: Pixel<T>,
    cam2: &Camera<T>,
    px2: Pixel<T>,
    x: Point3<T>,
) -> T {
    let err = |cam: &Camera<T>, px: Pixel<T>| match cam.project_world(x) {
        Ok(p) => p.distance(px),
        Err(_) => T::infinity(),
    };
    err(cam1, px1).max(err(cam2, px2))
}

/// Two-view triangulation: linear DLT (smallest eigenvector of `AᵀA` in
/// normalized camera coordinates), compared against the midpoint of
/// closest approach; the one with the smaller reprojection error wins.
pub fn triangulate<T: Real>(
    cam1: &Camera<T>,
    px1: Pixel<T>,
    cam2: &Camera<T>,
    px2: Pixel<T>,
) -> Result<Triangulation<T>, GeometryError> {
    let (c1, c2) = (cam1.center(), cam2.center());
    let scale = T::one().max(c1.norm()).max(c2.norm());
    if (c1 - c2).norm() <= T::lit(1e-12) * scale {
        return Err(GeometryError::DegenerateBaseline);
    }
    let d1 = cam1.world_ray(px1).normalized().ok_or(GeometryError::DegenerateBaseline)?;
    let d2 = cam2.world_ray(px2).normalized().ok_or(GeometryError::DegenerateBaseline)?;
    let angle_deg = d1.cross(d2).norm().atan2(d1.dot(d2)).to_degrees();
    if angle_deg < T::lit(0.1) {
        return Err(GeometryError::NearParallelRays { angle_deg: angle_deg.as_f64() });
    }

    // Midpoint of closest approach between c1 + s·d1 and c2 + t·d2.
    let w0 = c1 - c2;
    let (b, d, e) = (d1.dot(d2), d1.dot(w0), d2.dot(w0));
    let denom = T::one() - b * b;
    let s = (b * e - d) / denom;
    let t = (e - b * d) / denom;
    let midpoint = ((c1 + d1 * s) + (c2 + d2 * t)) * T::lit(0.5);

    // DLT in normalized coordinates.
    let mut rows: Vec<[T; 4]> = Vec::with_capacity(4);
    for (cam, px) in [(cam1, px1), (cam2, px2)] {
        let n = cam.intrinsics.unit_depth_ray(px);
        let (r, tr) = (&cam.extrinsics.r, &cam.extrinsics.t);
        let p = |i: usize| [r.m[i][0], r.m[i][1], r.m[i][2], tr[i]];
        let (p0, p1, p2) = (p(0), p(1), p(2));
        rows.push(std::array::from_fn(|k| n.x * p2[k] - p0[k]));
        rows.push(std::array::from_fn(|k| n.y * p2[k] - p1[k]));
    }
    let mut ata = [[T::zero(); 4]; 4];
    for row in &rows {
        for i in 0..4 {
            for j in 0..4 {
                ata[i][j] += row[i] * row[j];
            }
        }
    }
    let (_, h) = symmetric_min_eigenvector(ata);
    let dlt = (h[3] != T::zero()).then(|| Vec3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]));

    let mid_res = reprojection_residual(cam1, px1, cam2, px2, midpoint);
    let (point, residual_px) = match dlt {
        Some(x) if x.is_finite() => {
            let r = reprojection_residual(cam1, px1, cam2, px2, x);
            if r < mid_res {
                (x, r)
            } else {
                (midpoint, mid_res)
            }
        }
        _ => (midpoint, mid_res),
    };
    Ok(Triangulation { point, residual_px, ray_angle_deg: angle_deg })
}
