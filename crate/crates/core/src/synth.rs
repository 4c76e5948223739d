//! Deterministic synthetic multi-camera rooms with exact ground truth.
//!
//! A scene is the inside of an axis-aligned room (floor at `y = 0`, world
//! `y` up) with box occluders standing on the floor, cameras on a ring
//! looking inward, and one subject whose head is a sphere. Depth is
//! rendered by analytic ray casting; the gaze target is the first surface
//! hit along the gaze ray from the eye.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{Camera, Extrinsics, GeometryError, Intrinsics, Pixel};
use crate::data::{Annotation, DataError, Frame, HeadBox, ScenePack, Visibility};
use crate::depth::{dpth, DepthError, DepthMap, ScaleShift};
use crate::gaze::{DecayConfig, FovHeatmap};
use crate::imageio::{self, ImageError};
use crate::linalg::Vec3;

type V3 = Vec3<f64>;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error("no feasible {what} placement after {attempts} attempts")]
    InfeasiblePlacement { what: &'static str, attempts: usize },
    #[error("invalid corruption parameters: {0}")]
    InvalidCorruption(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Depth(#[from] DepthError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub camera_count: usize,
    pub width: u32,
    pub height: u32,
    pub hfov_deg: f64,
    /// Half the room's side length, meters.
    pub room_half_extent: f64,
    pub room_height: f64,
    pub ring_radius: f64,
    pub camera_height: f64,
    pub occluder_count: usize,
    pub head_radius: f64,
    /// Max horizontal distance of the head from the room center.
    pub subject_radius: f64,
    pub subject_height: (f64, f64),
    /// Gaze elevation range, degrees (negative looks down).
    pub gaze_pitch_deg: (f64, f64),
    pub min_target_distance: f64,
    /// Views in which the target must be in frame and unoccluded.
    pub min_target_views: usize,
    /// Capture instants; the subject is re-placed for each.
    pub instants: usize,
    /// Uniform annotation jitter in `[-j, j]` pixels.
    pub pixel_jitter: f64,
    /// Relative multiplicative noise of the emitted depth files.
    pub depth_noise: f64,
    /// Fraction of emitted depth pixels replaced by uniform noise.
    pub outlier_fraction: f64,
    pub max_retries: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            camera_count: 6,
            width: 512,
            height: 384,
            hfov_deg: 75.0,
            room_half_extent: 3.0,
            room_height: 3.0,
            ring_radius: 2.4,
            camera_height: 2.2,
            occluder_count: 2,
            head_radius: 0.1,
            subject_radius: 1.2,
            subject_height: (1.2, 1.8),
            gaze_pitch_deg: (-60.0, 10.0),
            min_target_distance: 0.5,
            min_target_views: 2,
            instants: 1,
            pixel_jitter: 0.0,
            depth_noise: 0.0,
            outlier_fraction: 0.0,
            max_retries: 200,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if self.camera_count < 2 {
            return bad("camera_count must be at least 2");
        }
        if self.width < 2 || self.height < 2 {
            return bad("image size must be at least 2x2");
        }
        let positive = [
            self.room_half_extent,
            self.room_height,
            self.ring_radius,
            self.camera_height,
            self.head_radius,
            self.hfov_deg,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("extents must be positive");
        }
        if self.hfov_deg >= 170.0 {
            return bad("hfov_deg must be below 170");
        }
        if self.ring_radius >= self.room_half_extent || self.camera_height >= self.room_height {
            return bad("cameras must be inside the room");
        }
        if self.subject_radius < 0.0 || self.subject_radius + self.head_radius >= self.room_half_extent {
            return bad("subject range must be inside the room");
        }
        let (h0, h1) = self.subject_height;
        if !(self.head_radius < h0 && h0 <= h1 && h1 + self.head_radius < self.room_height) {
            return bad("subject height range must be inside the room");
        }
        let (p0, p1) = self.gaze_pitch_deg;
        if !(-90.0 < p0 && p0 <= p1 && p1 < 90.0) {
            return bad("gaze pitch range must lie in (-90, 90)");
        }
        if self.min_target_views > self.camera_count {
            return bad("min_target_views exceeds camera_count");
        }
        if self.instants == 0 || self.max_retries == 0 {
            return bad("instants and max_retries must be positive");
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) || self.depth_noise < 0.0 || self.pixel_jitter < 0.0 {
            return bad("noise levels must be non-negative and outlier_fraction < 1");
        }
        Ok(())
    }

    fn intrinsics(&self) -> Result<Intrinsics<f64>, GeometryError> {
        let f = 0.5 * self.width as f64 / (0.5 * self.hfov_deg.to_radians()).tan();
        let cx = 0.5 * (self.width as f64 - 1.0);
        let cy = 0.5 * (self.height as f64 - 1.0);
        Intrinsics::new(f, f, cx, cy, self.width, self.height)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: V3,
    pub max: V3,
}

impl Aabb {
    /// Slab test: `(t_enter, t_exit)` of the ray's overlap with the box.
    fn slab(&self, o: V3, d: V3) -> Option<(f64, f64)> {
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        for k in 0..3 {
            if d[k] == 0.0 {
                if o[k] < self.min[k] || o[k] > self.max[k] {
                    return None;
                }
                continue;
            }
            let (a, b) = ((self.min[k] - o[k]) / d[k], (self.max[k] - o[k]) / d[k]);
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        (t0 <= t1).then_some((t0, t1))
    }

    fn distance(&self, p: V3) -> f64 {
        let c = |k: usize| (self.min[k] - p[k]).max(0.0).max(p[k] - self.max[k]);
        V3::new(c(0), c(1), c(2)).norm()
    }

    /// Outward normal of the face nearest to `p`.
    fn normal_at(&self, p: V3) -> V3 {
        let mut best = (f64::INFINITY, 0, 0.0);
        for k in 0..3 {
            for (dist, sign) in [((p[k] - self.min[k]).abs(), -1.0), ((p[k] - self.max[k]).abs(), 1.0)] {
                if dist < best.0 {
                    best = (dist, k, sign);
                }
            }
        }
        V3::from_array(std::array::from_fn(|i| if i == best.1 { best.2 } else { 0.0 }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub center: V3,
    pub radius: f64,
}

impl Sphere {
    /// Smallest root of the ray–sphere quadratic greater than `eps`.
    fn entry(&self, o: V3, d: V3, eps: f64) -> Option<f64> {
        let oc = o - self.center;
        let a = d.dot(d);
        let b = oc.dot(d);
        let c = oc.dot(oc) - self.radius * self.radius;
        let disc = b * b - a * c;
        if disc < 0.0 {
            return None;
        }
        let s = disc.sqrt();
        [(-b - s) / a, (-b + s) / a].into_iter().find(|t| *t > eps)
    }
}

/// What a ray hit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Surface {
    Floor,
    Ceiling,
    /// Room wall, indexed `-x, +x, -z, +z`.
    Wall(usize),
    Occluder(usize),
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    /// Ray parameter; with unit-depth camera rays this is the depth.
    pub t: f64,
    pub surface: Surface,
    pub normal: V3,
}

/// Static room geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Room {
    pub half_extent: f64,
    pub height: f64,
    pub occluders: Vec<Aabb>,
}

const HIT_EPS: f64 = 1e-9;

impl Room {
    fn interior(&self) -> Aabb {
        let h = self.half_extent;
        Aabb { min: V3::new(-h, 0.0, -h), max: V3::new(h, self.height, h) }
    }

    /// First surface along `o + t·d`, `t > 0`. `o` must be inside the room.
    pub fn cast(&self, head: Option<&Sphere>, o: V3, d: V3) -> Hit {
        let room = self.interior();
        let (_, t_exit) = room.slab(o, d).expect("ray origin inside the room");
        let p = o + d * t_exit;
        let n = room.normal_at(p);
        let surface = match (n.x as i32, n.y as i32, n.z as i32) {
            (_, -1, _) => Surface::Floor,
            (_, 1, _) => Surface::Ceiling,
            (-1, _, _) => Surface::Wall(0),
            (1, _, _) => Surface::Wall(1),
            (_, _, -1) => Surface::Wall(2),
            _ => Surface::Wall(3),
        };
        let mut best = Hit { t: t_exit, surface, normal: -n };
        for (i, b) in self.occluders.iter().enumerate() {
            if let Some((t0, _)) = b.slab(o, d) {
                if t0 > HIT_EPS && t0 < best.t {
                    best = Hit { t: t0, surface: Surface::Occluder(i), normal: b.normal_at(o + d * t0) };
                }
            }
        }
        if let Some(s) = head {
            if let Some(t) = s.entry(o, d, HIT_EPS) {
                if t < best.t {
                    let normal = ((o + d * t) - s.center) * (1.0 / s.radius);
                    best = Hit { t, surface: Surface::Head, normal };
                }
            }
        }
        best
    }
}

/// Ground truth of one camera at one instant.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthView {
    pub camera_index: usize,
    /// Exact metric depth, one sample per pixel center.
    pub depth: DepthMap<f64>,
    pub head_visible: bool,
    pub head_box: Option<HeadBox<f64>>,
    pub target_visibility: Visibility,
    /// Exact projections (present when in front of the camera).
    pub eye_px: Option<Pixel<f64>>,
    pub target_px: Option<Pixel<f64>>,
    pub eye_cam: V3,
    pub target_cam: V3,
    /// Eye-to-target direction in this camera's frame.
    pub gaze_cam: V3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthFrame {
    pub instant: u64,
    pub head: Sphere,
    pub eye: V3,
    pub target: V3,
    pub target_surface: Surface,
    pub views: Vec<SynthView>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthScene {
    pub config: SynthConfig,
    pub room: Room,
    pub cameras: Vec<Camera<f64>>,
    pub frames: Vec<SynthFrame>,
    /// Manifest with (possibly jittered) annotations and no file references.
    pub pack: ScenePack<f64>,
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn place_occluders(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Aabb> {
    let reach = 0.75 * cfg.room_half_extent;
    (0..cfg.occluder_count)
        .map(|_| {
            let c = (uniform(rng, (-reach, reach)), uniform(rng, (-reach, reach)));
            let half = (uniform(rng, (0.15, 0.4)), uniform(rng, (0.15, 0.4)));
            let h = uniform(rng, (0.4, 1.2)).min(cfg.camera_height - 0.2);
            Aabb { min: V3::new(c.0 - half.0, 0.0, c.1 - half.1), max: V3::new(c.0 + half.0, h, c.1 + half.1) }
        })
        .collect()
}

fn place_cameras(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Camera<f64>>, SynthError> {
    let k = cfg.intrinsics()?;
    let offset = uniform(rng, (0.0, std::f64::consts::TAU));
    (0..cfg.camera_count)
        .map(|i| {
            let a = offset + std::f64::consts::TAU * i as f64 / cfg.camera_count as f64;
            let center = V3::new(cfg.ring_radius * a.cos(), cfg.camera_height, cfg.ring_radius * a.sin());
            let look = V3::new(uniform(rng, (-0.2, 0.2)), uniform(rng, (0.7, 1.1)), uniform(rng, (-0.2, 0.2)));
            let ext = Extrinsics::look_at(center, look, V3::new(0.0, 1.0, 0.0))?;
            Ok(Camera::new(format!("cam{i}"), k, ext))
        })
        .collect()
}

/// World-frame unit-depth ray of pixel `px`.
fn pixel_ray(cam: &Camera<f64>, px: Pixel<f64>) -> V3 {
    cam.extrinsics.r.transpose() * cam.intrinsics.unit_depth_ray(px)
}

/// Renders exact depth: the ray parameter of the first hit along each
/// pixel's unit-depth ray.
pub fn render_depth(room: &Room, head: Option<&Sphere>, cam: &Camera<f64>) -> Result<DepthMap<f64>, DepthError> {
    let (w, h) = cam.intrinsics.size();
    let o = cam.center();
    let mut values = vec![0.0; w * h];
    values.par_chunks_mut(w).enumerate().for_each(|(v, row)| {
        for (u, out) in row.iter_mut().enumerate() {
            let d = pixel_ray(cam, Pixel::new(u as f64, v as f64));
            *out = room.cast(head, o, d).t;
        }
    });
    DepthMap::new(w, h, values)
}

/// Whether the straight segment from `from` to `to` reaches `to` before
/// hitting anything else.
fn line_of_sight(room: &Room, head: Option<&Sphere>, from: V3, to: V3) -> bool {
    let delta = to - from;
    let dist = delta.norm();
    let hit = room.cast(head, from, delta * (1.0 / dist));
    hit.t >= dist - 1e-7 * dist.max(1.0)
}

fn view_truth(
    cfg: &SynthConfig,
    room: &Room,
    ci: usize,
    cam: &Camera<f64>,
    head: &Sphere,
    eye: V3,
    target: V3,
) -> Result<SynthView, SynthError> {
    let center = cam.center();
    let eye_cam = cam.extrinsics.world_to_camera(eye);
    let target_cam = cam.extrinsics.world_to_camera(target);
    let eye_px = cam.project(eye_cam).ok();
    let target_px = cam.project(target_cam).ok();

    let target_in_frame = target_px.is_some_and(|p| cam.intrinsics.contains(p));
    let target_visibility = if !target_in_frame {
        Visibility::Outside
    } else if line_of_sight(room, Some(head), center, target) {
        Visibility::Inside
    } else {
        Visibility::Occluded
    };

    // Head visible: center projects inside and nothing but the head itself blocks it.
    let head_cam = cam.extrinsics.world_to_camera(head.center);
    let head_box = match cam.project(head_cam) {
        Ok(px) if cam.intrinsics.contains(px) && line_of_sight(room, None, center, head.center) => {
            let k = &cam.intrinsics;
            let (rx, ry) = (k.fx * head.radius / head_cam.z, k.fy * head.radius / head_cam.z);
            let (w, h) = (cfg.width as f64, cfg.height as f64);
            let b = HeadBox::new(
                (px.u - rx).max(0.0),
                (px.v - ry).max(0.0),
                (px.u + rx + 1.0).min(w),
                (px.v + ry + 1.0).min(h),
            );
            b.is_valid_in(cfg.width as usize, cfg.height as usize).then_some(b)
        }
        _ => None,
    };

    Ok(SynthView {
        camera_index: ci,
        depth: render_depth(room, Some(head), cam)?,
        head_visible: head_box.is_some(),
        head_box,
        target_visibility,
        eye_px,
        target_px,
        eye_cam,
        target_cam,
        gaze_cam: cam.extrinsics.r * (target - eye),
    })
}

struct Placement {
    head: Sphere,
    eye: V3,
    target: V3,
    surface: Surface,
}

fn place_subject(cfg: &SynthConfig, room: &Room, cams: &[Camera<f64>], rng: &mut ChaCha8Rng) -> Result<Placement, SynthError> {
    for _ in 0..cfg.max_retries {
        let rad = cfg.subject_radius * uniform(rng, (0.0, 1.0)).sqrt();
        let ang = uniform(rng, (0.0, std::f64::consts::TAU));
        let center = V3::new(rad * ang.cos(), uniform(rng, cfg.subject_height), rad * ang.sin());
        let head = Sphere { center, radius: cfg.head_radius };
        if room.occluders.iter().any(|b| b.distance(center) < head.radius + 0.05) {
            continue;
        }
        let yaw = uniform(rng, (0.0, std::f64::consts::TAU));
        let pitch = uniform(rng, cfg.gaze_pitch_deg).to_radians();
        let dir = V3::new(pitch.cos() * yaw.cos(), pitch.sin(), pitch.cos() * yaw.sin());
        let eye = center + dir * head.radius;
        let hit = room.cast(None, eye, dir);
        if hit.t < cfg.min_target_distance {
            continue;
        }
        let target = eye + dir * hit.t;
        let seen = cams
            .iter()
            .filter(|c| {
                c.project_world(target).is_ok_and(|p| c.intrinsics.contains(p))
                    && line_of_sight(room, Some(&head), c.center(), target)
            })
            .count();
        if seen >= cfg.min_target_views {
            return Ok(Placement { head, eye, target, surface: hit.surface });
        }
    }
    Err(SynthError::InfeasiblePlacement { what: "subject", attempts: cfg.max_retries })
}

fn jitter(rng: &mut ChaCha8Rng, j: f64, p: Pixel<f64>) -> Pixel<f64> {
    if j == 0.0 {
        return p;
    }
    Pixel::new(p.u + uniform(rng, (-j, j)), p.v + uniform(rng, (-j, j)))
}

/// Builds a scene from `cfg`. Deterministic in `cfg.seed`.
pub fn generate(cfg: &SynthConfig) -> Result<SynthScene, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cameras = place_cameras(cfg, &mut rng)?;
    let room = Room {
        half_extent: cfg.room_half_extent,
        height: cfg.room_height,
        occluders: place_occluders(cfg, &mut rng),
    };
    let scene_id = format!("synth-{}", cfg.seed);

    let mut frames = Vec::with_capacity(cfg.instants);
    let mut pack_frames = Vec::with_capacity(cfg.instants);
    for instant in 0..cfg.instants as u64 {
        let pl = place_subject(cfg, &room, &cameras, &mut rng)?;
        let views = cameras
            .iter()
            .enumerate()
            .map(|(ci, cam)| view_truth(cfg, &room, ci, cam, &pl.head, pl.eye, pl.target))
            .collect::<Result<Vec<_>, _>>()?;

        let mut annotations = Vec::with_capacity(views.len());
        for (cam, v) in cameras.iter().zip(&views) {
            let eye_px = v.head_box.and(v.eye_px).map(|p| jitter(&mut rng, cfg.pixel_jitter, p));
            let gaze_point = match v.target_visibility {
                Visibility::Outside => None,
                _ => v.target_px.map(|p| {
                    let q = jitter(&mut rng, cfg.pixel_jitter, p);
                    let (mu, mv) = cam.intrinsics.max_coords();
                    Pixel::new(q.u.clamp(0.0, mu), q.v.clamp(0.0, mv))
                }),
            };
            annotations.push(Annotation {
                image_id: format!("{instant}/{}", cam.id),
                camera_id: cam.id.clone(),
                scene_id: scene_id.clone(),
                subject_id: "p0".into(),
                head_box: v.head_box,
                eye_px,
                gaze_point,
                visibility: v.target_visibility,
            });
        }
        pack_frames.push(Frame {
            instant,
            annotations,
            depth_files: BTreeMap::new(),
            reference_depth_files: BTreeMap::new(),
            image_files: BTreeMap::new(),
        });
        frames.push(SynthFrame {
            instant,
            head: pl.head,
            eye: pl.eye,
            target: pl.target,
            target_surface: pl.surface,
            views,
        });
    }

    let pack = ScenePack { scene_id, cameras: cameras.clone(), frames: pack_frames };
    pack.validate()?;
    Ok(SynthScene { config: cfg.clone(), room, cameras, frames, pack })
}

/// Ground-truth sidecar written next to the manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub instant: u64,
    pub eye_world: [f64; 3],
    pub target_world: [f64; 3],
    pub views: Vec<GroundTruthView>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroundTruthView {
    pub camera_id: String,
    pub head_visible: bool,
    pub target_visibility: Visibility,
    pub eye_cam: [f64; 3],
    pub gaze_cam: [f64; 3],
    pub target_px: Option<[f64; 2]>,
}

impl SynthScene {
    pub fn frame(&self, instant: usize) -> &SynthFrame {
        &self.frames[instant]
    }

    /// Depth the ray through `px` of `view` sees at `instant`.
    pub fn cast_depth(&self, instant: usize, view: usize, px: Pixel<f64>) -> f64 {
        let cam = &self.cameras[view];
        let head = &self.frames[instant].head;
        self.room.cast(Some(head), cam.center(), pixel_ray(cam, px)).t
    }

    pub fn ground_truth(&self) -> Vec<GroundTruthRecord> {
        self.frames
            .iter()
            .map(|f| GroundTruthRecord {
                instant: f.instant,
                eye_world: f.eye.to_array(),
                target_world: f.target.to_array(),
                views: f
                    .views
                    .iter()
                    .map(|v| GroundTruthView {
                        camera_id: self.cameras[v.camera_index].id.clone(),
                        head_visible: v.head_visible,
                        target_visibility: v.target_visibility,
                        eye_cam: v.eye_cam.to_array(),
                        gaze_cam: v.gaze_cam.to_array(),
                        target_px: v.target_px.map(|p| [p.u, p.v]),
                    })
                    .collect(),
            })
            .collect()
    }

    /// Simple shaded RGB render of one view.
    pub fn render_rgb(&self, instant: usize, view: usize) -> Vec<u8> {
        let cam = &self.cameras[view];
        let frame = &self.frames[instant];
        let gaze_dir = (frame.target - frame.eye).normalized().expect("eye differs from target");
        let (w, h) = cam.intrinsics.size();
        let o = cam.center();
        let mut rgb = vec![0u8; 3 * w * h];
        rgb.par_chunks_mut(3 * w).enumerate().for_each(|(v, row)| {
            for u in 0..w {
                let d = pixel_ray(cam, Pixel::new(u as f64, v as f64));
                let hit = self.room.cast(Some(&frame.head), o, d);
                let p = o + d * hit.t;
                let base: [f64; 3] = match hit.surface {
                    Surface::Floor => {
                        if ((p.x / 0.5).floor() + (p.z / 0.5).floor()) as i64 % 2 == 0 {
                            [150.0, 140.0, 120.0]
                        } else {
                            [110.0, 100.0, 90.0]
                        }
                    }
                    Surface::Ceiling => [210.0, 210.0, 205.0],
                    Surface::Wall(i) => [[170.0, 190.0, 200.0], [200.0, 180.0, 160.0], [180.0, 200.0, 170.0], [190.0, 170.0, 190.0]][i],
                    Surface::Occluder(i) => [[60.0, 90.0, 160.0], [160.0, 70.0, 60.0], [70.0, 140.0, 80.0], [150.0, 130.0, 50.0]][i % 4],
                    Surface::Head => {
                        if hit.normal.dot(gaze_dir) > 0.85 {
                            [25.0, 25.0, 30.0]
                        } else {
                            [225.0, 185.0, 150.0]
                        }
                    }
                };
                let dn = d.normalized().expect("nonzero ray");
                let shade = 0.55 + 0.45 * hit.normal.dot(dn).abs();
                for c in 0..3 {
                    row[3 * u + c] = (base[c] * shade).round().clamp(0.0, 255.0) as u8;
                }
            }
        });
        rgb
    }

    /// Writes `manifest.json`, `ground_truth.json`, DPTH depth files and
    /// (optionally) RGB PNGs under `dir`; returns the manifest.
    pub fn write(&self, dir: impl AsRef<Path>, images: bool) -> Result<ScenePack<f64>, SynthError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join("depth"))?;
        if images {
            std::fs::create_dir_all(dir.join("images"))?;
        }
        let noisy = self.config.depth_noise > 0.0 || self.config.outlier_fraction > 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed_d397);
        let mut pack = self.pack.clone();
        for (fi, frame) in self.frames.iter().enumerate() {
            let pf = &mut pack.frames[fi];
            for view in &frame.views {
                let cam = &self.cameras[view.camera_index];
                let stem = format!("{}_{}", frame.instant, cam.id);
                let exact = format!("depth/{stem}.dpth");
                let (w, h) = view.depth.size();
                let data: Vec<f32> = view.depth.iter().map(|v| v as f32).collect();
                dpth::write(dir.join(&exact), w, h, &data)?;
                pf.reference_depth_files.insert(cam.id.clone(), exact.clone());
                if noisy {
                    let (lo, hi) = data.iter().fold((f32::MAX, 0f32), |(a, b), &v| (a.min(v), b.max(v)));
                    let noisy_data: Vec<f32> = data
                        .iter()
                        .map(|&v| {
                            if rng.gen_bool(self.config.outlier_fraction) {
                                rng.gen_range(lo..=hi)
                            } else {
                                let n = self.config.depth_noise;
                                (v as f64 * (1.0 + uniform(&mut rng, (-n, n)))).max(1e-6) as f32
                            }
                        })
                        .collect();
                    let rel = format!("depth/{stem}_noisy.dpth");
                    dpth::write(dir.join(&rel), w, h, &noisy_data)?;
                    pf.depth_files.insert(cam.id.clone(), rel);
                } else {
                    pf.depth_files.insert(cam.id.clone(), exact);
                }
                if images {
                    let rel = format!("images/{stem}.png");
                    imageio::write_rgb8(dir.join(&rel), w, h, &self.render_rgb(fi, view.camera_index))?;
                    pf.image_files.insert(cam.id.clone(), rel);
                }
            }
        }
        pack.save(dir.join("manifest.json"))?;
        let gt = serde_json::to_string_pretty(&self.ground_truth()).map_err(DataError::from)?;
        std::fs::write(dir.join("ground_truth.json"), gt)?;
        Ok(pack)
    }
}

/// FoV value at `px` of `view` evaluated directly on the scene geometry:
/// the clamped cosine between the world gaze and the eye-to-surface
/// vector, with the same soft fall-off as the heatmap.
pub fn oracle_fov_value(
    scene: &SynthScene,
    instant: usize,
    view: usize,
    px: Pixel<f64>,
    gaze_cam: V3,
    cfg: &DecayConfig,
) -> f64 {
    let cam = &scene.cameras[view];
    let frame = &scene.frames[instant];
    let g = cam.extrinsics.r.transpose() * gaze_cam;
    let hit = scene.room.cast(Some(&frame.head), cam.center(), pixel_ray(cam, px));
    let p = cam.center() + pixel_ray(cam, px) * hit.t;
    let vec = p - frame.eye;
    let denom = vec.norm() * g.norm();
    if denom == 0.0 {
        return 0.0;
    }
    let c = (vec.dot(g) / denom).clamp(0.0, 1.0);
    if c < cfg.threshold {
        c * (cfg.gamma * (c - cfg.threshold)).exp()
    } else {
        c
    }
}

/// Oracle heatmap over every pixel center; the eye's nearest cell is 0.
pub fn oracle_fov(scene: &SynthScene, instant: usize, view: usize, gaze_cam: V3, cfg: &DecayConfig) -> FovHeatmap<f64> {
    let cam = &scene.cameras[view];
    let (w, h) = cam.intrinsics.size();
    let mut values = vec![0.0; w * h];
    values.par_chunks_mut(w).enumerate().for_each(|(v, row)| {
        for (u, out) in row.iter_mut().enumerate() {
            *out = oracle_fov_value(scene, instant, view, Pixel::new(u as f64, v as f64), gaze_cam, cfg);
        }
    });
    let eye_px = scene.frames[instant].views[view].eye_px;
    if let Some((u, v)) = eye_px.and_then(|p| p.nearest_cell(w, h)) {
        values[v * w + u] = 0.0;
    }
    FovHeatmap { width: w, height: h, values }
}

/// Relative depth `(abs − shift)/scale` of one view, with a fraction of
/// pixels replaced by uniform noise over the clean range. Returns the
/// planted map `abs = scale·rel + shift`.
pub fn corrupt_depth(
    scene: &SynthScene,
    instant: usize,
    view: usize,
    scale: f64,
    shift: f64,
    outlier_fraction: f64,
    seed: u64,
) -> Result<(DepthMap<f64>, ScaleShift<f64>), SynthError> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(SynthError::InvalidCorruption(format!("scale must be positive, got {scale}")));
    }
    if !(0.0..=1.0).contains(&outlier_fraction) {
        return Err(SynthError::InvalidCorruption(format!("outlier fraction {outlier_fraction} outside [0, 1]")));
    }
    let abs = &scene.frames[instant].views[view].depth;
    let min_abs = abs.iter().fold(f64::INFINITY, f64::min);
    if !(shift < min_abs) {
        return Err(SynthError::InvalidCorruption(format!(
            "shift {shift} must be below the smallest depth {min_abs}"
        )));
    }
    let clean: Vec<f64> = abs.iter().map(|d| (d - shift) / scale).collect();
    let (lo, hi) = clean.iter().fold((f64::INFINITY, 0f64), |(a, b), &v| (a.min(v), b.max(v)));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = clean
        .into_iter()
        .map(|v| if rng.gen_bool(outlier_fraction) { rng.gen_range(lo..=hi) } else { v })
        .collect();
    let (w, h) = abs.size();
    Ok((DepthMap::new(w, h, values)?, ScaleShift::exact(scale, shift)))
}
