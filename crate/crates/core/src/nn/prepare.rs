//! Turns annotated view pairs into model inputs and supervision.

use std::collections::HashMap;
use std::path::Path;

use crate::camera::{relative_rotation, Camera, Intrinsics, Pixel};
use crate::data::{enumerate_pairs, head_mask, Annotation, PairMode, PairView, ScenePack, ViewPairSample};
use crate::depth::{pseudo_pointcloud, DepthMap};
use crate::eval::Category;
use crate::gaze::{ground_truth_gaze, resize_area, EyeLocation};
use crate::imageio;
use crate::linalg::Vec3;
use crate::scalar::Real;
use crate::synth::SynthScene;

use super::blocks::{EsaGeometry, HEATMAP_SIZE};
use super::loss::{gaussian_target_heatmap, ViewTarget, DEFAULT_TARGET_SIGMA};
use super::model::{PairInput, PairTarget, ToyConfig, ViewInput};
use super::NnError;

/// A view at native resolution.
#[derive(Clone, Copy, Debug)]
pub struct RawView<'a> {
    pub camera: &'a Camera<f64>,
    pub annotation: &'a Annotation<f64>,
    /// Interleaved RGB8, row-major.
    pub rgb: &'a [u8],
    pub depth: &'a DepthMap<f64>,
}

#[derive(Clone, Debug)]
pub struct PreparedPair<T> {
    pub scene_id: String,
    pub instant: u64,
    pub primary_image_id: String,
    pub reference_camera_id: String,
    pub category: Category,
    pub input: PairInput<T>,
    pub target: PairTarget<T>,
}

fn data_err(e: impl std::fmt::Display) -> NnError {
    NnError::Data(e.to_string())
}

/// `(u + ½)·s − ½` per axis.
fn rescale_px(px: Pixel<f64>, sx: f64, sy: f64) -> Pixel<f64> {
    Pixel::new((px.u + 0.5) * sx - 0.5, (px.v + 0.5) * sy - 0.5)
}

fn rescale_camera(cam: &Camera<f64>, w: usize, h: usize) -> Result<Camera<f64>, NnError> {
    let k = &cam.intrinsics;
    let (sx, sy) = (w as f64 / k.width as f64, h as f64 / k.height as f64);
    let c = rescale_px(Pixel::new(k.cx, k.cy), sx, sy);
    let k2 = Intrinsics::new(k.fx * sx, k.fy * sy, c.u, c.v, w as u32, h as u32).map_err(data_err)?;
    Ok(Camera::new(cam.id.clone(), k2, cam.extrinsics))
}

fn bilinear_rgb(rgb: &[u8], w: usize, h: usize, u: f64, v: f64) -> [f64; 3] {
    let u = u.clamp(0.0, (w - 1) as f64);
    let v = v.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (u.floor() as usize, v.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (u - x0 as f64, v - y0 as f64);
    let at = |x: usize, y: usize, c: usize| rgb[(y * w + x) * 3 + c] as f64;
    [0, 1, 2].map(|c| {
        (1.0 - fy) * ((1.0 - fx) * at(x0, y0, c) + fx * at(x1, y0, c)) + fy * ((1.0 - fx) * at(x0, y1, c) + fx * at(x1, y1, c))
    })
}

struct ViewPrep {
    input: ViewInput<f64>,
    target: ViewTarget<f64>,
    gaze: Option<Vec3<f64>>,
    point: Option<[f64; 2]>,
}

fn prepare_view(view: &RawView, cfg: &ToyConfig) -> Result<ViewPrep, NnError> {
    let (w, h) = view.camera.intrinsics.size();
    let (sw, sh) = cfg.scene_size;
    let ann = view.annotation;
    if view.rgb.len() != w * h * 3 || view.depth.size() != (w, h) {
        return Err(NnError::Data(format!("{}: image or depth does not match the {w}×{h} camera", ann.image_id)));
    }
    let (sx, sy) = (sw as f64 / w as f64, sh as f64 / h as f64);
    let camera = rescale_camera(view.camera, sw, sh)?;

    let channels: Vec<Vec<f64>> = (0..3)
        .map(|c| {
            let plane: Vec<f64> = view.rgb.iter().skip(c).step_by(3).map(|&b| b as f64 / 255.0 - 0.5).collect();
            resize_area(&plane, w, h, sw, sh)
        })
        .collect();
    let rgb: Vec<f64> = (0..sw * sh).flat_map(|i| channels.iter().map(move |p| p[i])).collect();

    let depth = DepthMap::new(sw, sh, resize_area(&view.depth.to_vec(), w, h, sw, sh)).map_err(data_err)?;
    let cloud = pseudo_pointcloud(&camera, &depth).map_err(data_err)?;

    let visible = ann.head_visible();
    let head_mask = if visible {
        head_mask(ann, w, h, sw, sh).map_err(data_err)?.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    } else {
        vec![0.0; sw * sh]
    };
    let c = cfg.head_crop;
    let (head_crop, head_center) = match ann.head_box.filter(|_| visible) {
        Some(b) => {
            let (bw, bh) = (b.x1 - b.x0, b.y1 - b.y0);
            let crop = (0..c * c)
                .flat_map(|i| {
                    let u = b.x0 - 0.5 + ((i % c) as f64 + 0.5) * bw / c as f64;
                    let v = b.y0 - 0.5 + ((i / c) as f64 + 0.5) * bh / c as f64;
                    bilinear_rgb(view.rgb, w, h, u, v).map(|x| x / 255.0 - 0.5)
                })
                .collect();
            (crop, [(b.x0 + b.x1) / (2.0 * w as f64), (b.y0 + b.y1) / (2.0 * h as f64)])
        }
        None => (vec![0.0; c * c * 3], [0.5, 0.5]),
    };
    let eye_native = if visible { ann.eye_or_head_center() } else { None };
    let eye_px = eye_native.map(|p| rescale_px(p, sx, sy));

    let inside = ann.visibility.in_frame();
    let point = ann
        .gaze_point
        .filter(|_| inside)
        .map(|p| [(p.u + 0.5) / w as f64, (p.v + 0.5) / h as f64])
        .filter(|p| (0.0..1.0).contains(&p[0]) && (0.0..1.0).contains(&p[1]));
    let heatmap = match point {
        Some(p) => {
            let size = HEATMAP_SIZE as f64;
            Some(gaussian_target_heatmap([p[0] * size, p[1] * size], DEFAULT_TARGET_SIGMA)?)
        }
        None => None,
    };

    let gaze = match (eye_native, ann.gaze_point.filter(|_| inside)) {
        (Some(eye_px), Some(target)) => {
            let native_cloud = pseudo_pointcloud(view.camera, view.depth).map_err(data_err)?;
            EyeLocation::from_depth(view.camera, view.depth, eye_px)
                .ok()
                .and_then(|eye| ground_truth_gaze(&native_cloud, &eye, target).ok())
        }
        _ => None,
    };

    Ok(ViewPrep {
        input: ViewInput { camera, rgb, head_mask, head_crop, head_center, depth, cloud, eye_px },
        target: ViewTarget { heatmap, inside },
        gaze,
        point,
    })
}

fn cast_vec<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::lit(x)).collect()
}

fn cast_view<T: Real>(v: ViewInput<f64>) -> Result<ViewInput<T>, NnError> {
    let camera = v.camera.cast::<T>();
    let (w, h) = v.depth.size();
    let depth = DepthMap::new(w, h, cast_vec(&v.depth.to_vec())).map_err(data_err)?;
    let cloud = pseudo_pointcloud(&camera, &depth).map_err(data_err)?;
    Ok(ViewInput {
        camera,
        rgb: cast_vec(&v.rgb),
        head_mask: cast_vec(&v.head_mask),
        head_crop: cast_vec(&v.head_crop),
        head_center: v.head_center.map(T::lit),
        depth,
        cloud,
        eye_px: v.eye_px.map(|p| Pixel::new(T::lit(p.u), T::lit(p.v))),
    })
}

/// Prepares a (primary, reference) pair. Ground-truth gaze missing in one
/// view is rotated over from the other.
pub fn prepare_pair<T: Real>(
    scene_id: &str,
    instant: u64,
    primary: &RawView,
    reference: &RawView,
    cfg: &ToyConfig,
) -> Result<PreparedPair<T>, NnError> {
    cfg.validate()?;
    let p1 = prepare_view(primary, cfg)?;
    let p2 = prepare_view(reference, cfg)?;
    let (e1, e2) = (&primary.camera.extrinsics, &reference.camera.extrinsics);
    let r21 = relative_rotation(e1, e2);
    let r12 = relative_rotation(e2, e1);
    let gaze = match (p1.gaze, p2.gaze) {
        (None, Some(g2)) => [Some(r21 * g2), Some(g2)],
        (Some(g1), None) => [Some(g1), Some(r12 * g1)],
        other => [other.0, other.1],
    };
    let grid = cfg.token_grid();
    let esa12 = EsaGeometry::from_cameras(&p1.input.camera, &p2.input.camera, &grid, &grid, cfg.esa_samples)?;
    let esa21 = EsaGeometry::from_cameras(&p2.input.camera, &p1.input.camera, &grid, &grid, cfg.esa_samples)?;
    let ref_ann = reference.annotation;
    let cast_target = |t: ViewTarget<f64>| ViewTarget { heatmap: t.heatmap.map(|h| cast_vec(&h)), inside: t.inside };
    Ok(PreparedPair {
        scene_id: scene_id.to_string(),
        instant,
        primary_image_id: primary.annotation.image_id.clone(),
        reference_camera_id: reference.camera.id.clone(),
        category: Category::from_visibility(ref_ann.head_visible(), ref_ann.visibility.in_frame()),
        input: PairInput {
            views: [cast_view(p1.input)?, cast_view(p2.input)?],
            esa12,
            esa21,
            r21: r21.cast(),
            r12: r12.cast(),
        },
        target: PairTarget {
            views: [cast_target(p1.target), cast_target(p2.target)],
            gaze: gaze.map(|g| g.map(|g| g.cast())),
            point: [p1.point, p2.point].map(|p| p.map(|p| p.map(T::lit))),
        },
    })
}

type ViewData = (Vec<u8>, DepthMap<f64>);

fn prepare_samples<T: Real>(
    samples: &[ViewPairSample<f64>],
    cfg: &ToyConfig,
    mut fetch: impl FnMut(u64, &PairView<f64>) -> Result<ViewData, NnError>,
) -> Result<Vec<PreparedPair<T>>, NnError> {
    let mut cache: HashMap<(u64, String), ViewData> = HashMap::new();
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        for v in [&s.primary, &s.reference] {
            let key = (s.instant, v.camera.id.clone());
            if !cache.contains_key(&key) {
                let data = fetch(s.instant, v)?;
                cache.insert(key, data);
            }
        }
        let (r1, d1) = &cache[&(s.instant, s.primary.camera.id.clone())];
        let (r2, d2) = &cache[&(s.instant, s.reference.camera.id.clone())];
        let a = RawView { camera: &s.primary.camera, annotation: &s.primary.annotation, rgb: r1, depth: d1 };
        let b = RawView { camera: &s.reference.camera, annotation: &s.reference.annotation, rgb: r2, depth: d2 };
        out.push(prepare_pair(&s.scene_id, s.instant, &a, &b, cfg)?);
    }
    Ok(out)
}

fn load_rgb(path: &Path) -> Result<Vec<u8>, NnError> {
    let img = imageio::read(path).map_err(data_err)?;
    Ok(match img.channels {
        3 => img.data,
        4 => img.data.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        1 => img.data.iter().flat_map(|&g| [g, g, g]).collect(),
        2 => img.data.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        n => return Err(NnError::Data(format!("{}: unsupported channel count {n}", path.display()))),
    })
}

/// Pairs of a manifest, with images and depth resolved against `base`.
pub fn pairs_from_manifest<T: Real>(
    pack: &ScenePack<f64>,
    base: &Path,
    mode: PairMode,
    cfg: &ToyConfig,
    limit: Option<usize>,
) -> Result<Vec<PreparedPair<T>>, NnError> {
    let mut samples = enumerate_pairs(pack, mode);
    samples.truncate(limit.unwrap_or(usize::MAX));
    prepare_samples(&samples, cfg, |_, v| {
        let rel = v.image_file.as_ref().ok_or_else(|| {
            NnError::Data(format!("{}: no image file in the manifest", v.annotation.image_id))
        })?;
        let rgb = load_rgb(&base.join(rel))?;
        let depth = v.load_depth(base).map_err(data_err)?;
        Ok((rgb, depth))
    })
}

/// Pairs of an in-memory synthetic scene, using exact depth.
pub fn pairs_from_synth<T: Real>(
    scene: &SynthScene,
    mode: PairMode,
    cfg: &ToyConfig,
    limit: Option<usize>,
) -> Result<Vec<PreparedPair<T>>, NnError> {
    let mut samples = enumerate_pairs(&scene.pack, mode);
    samples.truncate(limit.unwrap_or(usize::MAX));
    prepare_samples(&samples, cfg, |instant, v| {
        let fi = scene
            .frames
            .iter()
            .position(|f| f.instant == instant)
            .ok_or_else(|| NnError::Data(format!("no frame at instant {instant}")))?;
        let ci = scene
            .cameras
            .iter()
            .position(|c| c.id == v.camera.id)
            .ok_or_else(|| NnError::Data(format!("unknown camera {}", v.camera.id)))?;
        let view = scene.frames[fi]
            .views
            .iter()
            .find(|sv| sv.camera_index == ci)
            .ok_or_else(|| NnError::Data(format!("camera {} missing at instant {instant}", v.camera.id)))?;
        Ok((scene.render_rgb(fi, ci), view.depth.clone()))
    })
}

/// At least `count` standard pairs from synthetic scenes seeded
/// `template.seed`, `template.seed + 1`, …, truncated to `count`.
/// Seeds whose placement is infeasible are skipped.
pub fn synth_training_pairs<T: Real>(
    template: &crate::synth::SynthConfig,
    count: usize,
    cfg: &ToyConfig,
) -> Result<Vec<PreparedPair<T>>, NnError> {
    use crate::synth::{generate, SynthError};
    let mut out = Vec::with_capacity(count);
    let mut seed = template.seed;
    let mut failures = 0;
    while out.len() < count {
        let scfg = crate::synth::SynthConfig { seed, ..template.clone() };
        seed = seed.wrapping_add(1);
        match generate(&scfg) {
            Ok(scene) => out.extend(pairs_from_synth(&scene, PairMode::Standard, cfg, Some(count - out.len()))?),
            Err(SynthError::InfeasiblePlacement { .. }) if failures < 100 => failures += 1,
            Err(e) => return Err(data_err(e)),
        }
    }
    Ok(out)
}
