//! Dataset manifest, view-pair enumeration and visibility categories.
//!
//! A manifest is one JSON file per scene:
//! `{scene_id, cameras: [...], frames: [{instant, annotations, depth_files}]}`.
//! Depth maps and images are referenced by path relative to the manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{Camera, Pixel};
use crate::depth::{DepthError, DepthMap, PixelMask};
use crate::eval::{Category, SceneScoped};
use crate::imageio::{self, ImageError};
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("head box missing or outside the {width}x{height} image")]
    BoxOutOfImage { width: usize, height: usize },
    #[error("annotation {image_id:?} references unknown camera {camera_id:?}")]
    UnknownCamera { image_id: String, camera_id: String },
    #[error("invalid annotation {0:?}: {1}")]
    InvalidAnnotation(String, String),
    #[error("manifest {0}: {1}")]
    Manifest(PathBuf, String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Depth(#[from] DepthError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Where the gaze target lies relative to a view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Visibility {
    Inside,
    Outside,
    /// In frame but hidden; counts as inside for in/out labels.
    Occluded,
}

impl Visibility {
    pub fn in_frame(self) -> bool {
        self != Visibility::Outside
    }
}

/// Axis-aligned head box in pixels. Pixel `(u, v)` is covered when
/// `x0 ≤ u < x1` and `y0 ≤ v < y1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct HeadBox<T> {
    pub x0: T,
    pub y0: T,
    pub x1: T,
    pub y1: T,
}

impl<T: Real> HeadBox<T> {
    pub fn new(x0: T, y0: T, x1: T, y1: T) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn center(&self) -> Pixel<T> {
        let half = T::lit(0.5);
        Pixel::new((self.x0 + self.x1) * half, (self.y0 + self.y1) * half)
    }

    /// Well ordered, nonempty, and inside `[0, width] × [0, height]`.
    pub fn is_valid_in(&self, width: usize, height: usize) -> bool {
        let (w, h) = (T::from_usize_lossy(width), T::from_usize_lossy(height));
        [self.x0, self.y0, self.x1, self.y1].iter().all(|v| v.is_finite())
            && T::zero() <= self.x0
            && self.x0 < self.x1
            && self.x1 <= w
            && T::zero() <= self.y0
            && self.y0 < self.y1
            && self.y1 <= h
    }

    fn covers(&self, u: T, v: T) -> bool {
        self.x0 <= u && u < self.x1 && self.y0 <= v && v < self.y1
    }
}

/// One subject in one camera image at one instant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Annotation<T> {
    pub image_id: String,
    pub camera_id: String,
    pub scene_id: String,
    pub subject_id: String,
    /// `None` when the head is not visible in this view.
    pub head_box: Option<HeadBox<T>>,
    #[serde(default)]
    pub eye_px: Option<Pixel<T>>,
    /// Present iff the target is not outside the frame.
    #[serde(default)]
    pub gaze_point: Option<Pixel<T>>,
    pub visibility: Visibility,
}

impl<T: Real> Annotation<T> {
    pub fn head_visible(&self) -> bool {
        self.head_box.is_some()
    }

    /// Annotated eye pixel, falling back to the head-box center.
    pub fn eye_or_head_center(&self) -> Option<Pixel<T>> {
        self.eye_px.or_else(|| self.head_box.map(|b| b.center()))
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<(), DataError> {
        let bad = |msg: &str| Err(DataError::InvalidAnnotation(self.image_id.clone(), msg.to_string()));
        if let Some(b) = &self.head_box {
            if !b.is_valid_in(width, height) {
                return bad("head box not inside the image");
            }
        }
        if self.gaze_point.is_some() != self.visibility.in_frame() {
            return bad("gaze point must be present exactly when the target is in frame");
        }
        Ok(())
    }
}

/// Everything captured at one instant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Frame<T> {
    pub instant: u64,
    pub annotations: Vec<Annotation<T>>,
    /// Per-camera depth (possibly relative) in DPTH format.
    #[serde(default)]
    pub depth_files: BTreeMap<String, String>,
    /// Per-camera metric reference depth, when available.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub reference_depth_files: BTreeMap<String, String>,
    /// Per-camera 8-bit RGB PNG.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub image_files: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ScenePack<T> {
    pub scene_id: String,
    pub cameras: Vec<Camera<T>>,
    pub frames: Vec<Frame<T>>,
}

impl<T: Real> ScenePack<T> {
    pub fn camera(&self, id: &str) -> Option<&Camera<T>> {
        self.cameras.iter().find(|c| c.id == id)
    }

    fn camera_index(&self, id: &str) -> Option<usize> {
        self.cameras.iter().position(|c| c.id == id)
    }

    /// Checks camera references, annotation consistency and box bounds.
    pub fn validate(&self) -> Result<(), DataError> {
        for frame in &self.frames {
            for a in &frame.annotations {
                let cam = self.camera(&a.camera_id).ok_or_else(|| DataError::UnknownCamera {
                    image_id: a.image_id.clone(),
                    camera_id: a.camera_id.clone(),
                })?;
                let (w, h) = cam.intrinsics.size();
                a.validate(w, h)?;
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, DataError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, DataError> {
        let pack: Self = serde_json::from_str(s)?;
        pack.validate()?;
        Ok(pack)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            DataError::Json(j) => DataError::Manifest(path.to_path_buf(), j.to_string()),
            other => other,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    /// Head visible in the primary view.
    Standard,
    /// Head visible only in the reference view, target in the primary view.
    CrossView,
}

/// One side of a view pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct PairView<T> {
    pub annotation: Annotation<T>,
    pub camera: Camera<T>,
    pub depth_file: Option<String>,
    pub reference_depth_file: Option<String>,
    pub image_file: Option<String>,
}

impl<T: Real> PairView<T> {
    /// Loads the view's depth map, resolving the path against `base`.
    pub fn load_depth(&self, base: &Path) -> Result<DepthMap<T>, DataError> {
        let rel = self.depth_file.as_ref().ok_or_else(|| {
            DataError::InvalidAnnotation(self.annotation.image_id.clone(), "no depth file".into())
        })?;
        Ok(DepthMap::load(base.join(rel))?)
    }

    pub fn load_reference_depth(&self, base: &Path) -> Result<DepthMap<T>, DataError> {
        let rel = self.reference_depth_file.as_ref().ok_or_else(|| {
            DataError::InvalidAnnotation(self.annotation.image_id.clone(), "no reference depth file".into())
        })?;
        Ok(DepthMap::load(base.join(rel))?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ViewPairSample<T> {
    pub scene_id: String,
    pub instant: u64,
    pub primary: PairView<T>,
    pub reference: PairView<T>,
    pub kind: PairMode,
}

impl<T> SceneScoped for ViewPairSample<T> {
    fn scene_id(&self) -> &str {
        &self.scene_id
    }
}

/// All ordered view pairs of a pack for the given mode, sorted by
/// (instant, primary camera, reference camera, subject). Cameras are
/// ordered as listed in the pack.
pub fn enumerate_pairs<T: Real>(pack: &ScenePack<T>, mode: PairMode) -> Vec<ViewPairSample<T>> {
    let mut frames: Vec<&Frame<T>> = pack.frames.iter().collect();
    frames.sort_by_key(|f| f.instant);

    let mut out = Vec::new();
    for frame in frames {
        // (camera index, subject) -> annotation
        let mut by_view: BTreeMap<(usize, &str), &Annotation<T>> = BTreeMap::new();
        for a in &frame.annotations {
            if let Some(ci) = pack.camera_index(&a.camera_id) {
                by_view.insert((ci, a.subject_id.as_str()), a);
            }
        }
        let view = |ci: usize, a: &Annotation<T>| {
            let cam = &pack.cameras[ci];
            PairView {
                annotation: a.clone(),
                camera: cam.clone(),
                depth_file: frame.depth_files.get(&cam.id).cloned(),
                reference_depth_file: frame.reference_depth_files.get(&cam.id).cloned(),
                image_file: frame.image_files.get(&cam.id).cloned(),
            }
        };
        for pi in 0..pack.cameras.len() {
            for ri in 0..pack.cameras.len() {
                if pi == ri {
                    continue;
                }
                for (&(_, subject), &pa) in by_view.range((pi, "")..(pi + 1, "")) {
                    let Some(&ra) = by_view.get(&(ri, subject)) else { continue };
                    let keep = match mode {
                        PairMode::Standard => pa.head_visible(),
                        PairMode::CrossView => !pa.head_visible() && ra.head_visible() && pa.visibility.in_frame(),
                    };
                    if keep {
                        out.push(ViewPairSample {
                            scene_id: pack.scene_id.clone(),
                            instant: frame.instant,
                            primary: view(pi, pa),
                            reference: view(ri, ra),
                            kind: mode,
                        });
                    }
                }
            }
        }
    }
    out
}

/// Category by the reference view's head and target visibility.
/// Occluded targets count as visible.
pub fn categorize<T: Real>(sample: &ViewPairSample<T>) -> Category {
    let r = &sample.reference.annotation;
    Category::from_visibility(r.head_visible(), r.visibility.in_frame())
}

/// Binary head mask of the annotation's box on a `width × height` image,
/// resampled by nearest neighbour to `out_w × out_h`.
pub fn head_mask<T: Real>(
    ann: &Annotation<T>,
    width: usize,
    height: usize,
    out_w: usize,
    out_h: usize,
) -> Result<PixelMask, DataError> {
    let b = ann
        .head_box
        .filter(|b| b.is_valid_in(width, height))
        .ok_or(DataError::BoxOutOfImage { width, height })?;
    let src = |i: usize, n: usize, out: usize| ((i * n) as f64 + 0.5 * n as f64) / out as f64;
    Ok(PixelMask::from_fn(out_w, out_h, |i, j| {
        let u = src(i, width, out_w).floor();
        let v = src(j, height, out_h).floor();
        b.covers(T::lit(u), T::lit(v))
    }))
}

/// 1-bit PNG, white inside the mask.
pub fn save_mask_png(mask: &PixelMask, path: impl AsRef<Path>) -> Result<(), DataError> {
    imageio::write_gray1(path, mask.width, mask.height, &mask.bits)?;
    Ok(())
}
