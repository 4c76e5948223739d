//! The two-view toy model: conv stems, HIA, gaze head, uncertainty-based
//! gaze selection, FoV prior, ESA and the gaze decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, Pixel};
use crate::depth::{DepthMap, PointGrid};
use crate::gaze::{fov_heatmap, DecayConfig, EyeLocation};
use crate::linalg::{Mat3, Vec3};
use crate::scalar::Real;
use crate::selection::{gaze_loss, select_and_transfer, GazePrediction, SelectionResult};

use super::blocks::{
    CrossViewTransform, DecoderCache, Esa, EsaCache, EsaGeometry, GazeDecoder, GazeHead, Hia, HiaCache, ModelOutputs,
    QueryCache, TokenGrid,
};
use super::layers::{ConvStem, StemCache};
use super::loss::{total_loss, LossBreakdown, LossWeights, ViewTarget};
use super::tensor::{join, Parameterized, Tensor};
use super::NnError;

/// Scene channels per pixel: RGB, FoV prior, head mask.
pub const SCENE_CHANNELS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub d: usize,
    pub heads: usize,
    /// Scene input resolution `(width, height)`; both multiples of 4.
    pub scene_size: (usize, usize),
    /// Side of the square RGB head crop; a multiple of 4.
    pub head_crop: usize,
    pub stem_channels: usize,
    pub esa_samples: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self { d: 32, heads: 2, scene_size: (64, 48), head_crop: 16, stem_channels: 16, esa_samples: 48, seed: 0 }
    }
}

impl ToyConfig {
    pub fn token_grid(&self) -> TokenGrid {
        TokenGrid::with_stride(self.scene_size.0 / 4, self.scene_size.1 / 4, 4)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let (w, h) = self.scene_size;
        let bad = self.d == 0
            || self.heads == 0
            || self.d % self.heads != 0
            || w == 0
            || h == 0
            || w % 4 != 0
            || h % 4 != 0
            || self.head_crop == 0
            || self.head_crop % 4 != 0
            || self.esa_samples < 2;
        if bad {
            return Err(NnError::Config(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Preprocessed inputs of one view.
#[derive(Clone, Debug)]
pub struct ViewInput<T> {
    /// Camera rescaled to the scene resolution.
    pub camera: Camera<T>,
    /// `[h, w, 3]`, roughly in `[-0.5, 0.5]`.
    pub rgb: Vec<T>,
    /// `[h, w]`, 1 inside the head box.
    pub head_mask: Vec<T>,
    /// `[c, c, 3]` head crop; zeros without a visible head.
    pub head_crop: Vec<T>,
    /// Normalized head-box center.
    pub head_center: [T; 2],
    pub depth: DepthMap<T>,
    pub cloud: PointGrid<T>,
    /// Eye in scene-resolution pixels; `None` without a visible head.
    pub eye_px: Option<Pixel<T>>,
}

#[derive(Clone, Debug)]
pub struct PairInput<T> {
    pub views: [ViewInput<T>; 2],
    pub esa12: EsaGeometry,
    pub esa21: EsaGeometry,
    /// `R₁R₂ᵀ`, rotating view-2 camera coordinates into view 1.
    pub r21: Mat3<T>,
    pub r12: Mat3<T>,
}

/// Supervision for a pair.
#[derive(Clone, Debug)]
pub struct PairTarget<T> {
    pub views: [ViewTarget<T>; 2],
    /// Ground-truth gaze per view in its camera frame.
    pub gaze: [Option<Vec3<T>>; 2],
    /// Normalized target location per view, when in frame.
    pub point: [Option<[T; 2]>; 2],
}

/// Which gaze drives the FoV prior.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FovSource {
    /// The model's own gaze after uncertainty-based selection.
    #[default]
    Predicted,
    /// Ground-truth gaze (teacher forcing), when available.
    GroundTruth,
}

#[derive(Clone, Debug)]
pub struct PairOutput<T> {
    pub outputs: [ModelOutputs<T>; 2],
    pub gaze: [Vec3<T>; 2],
    pub log_sigma: [T; 2],
    /// `None` when either predicted gaze is degenerate.
    pub selection: Option<SelectionResult<T>>,
    /// FoV prior per view at scene resolution.
    pub fov: [Vec<T>; 2],
}

impl<T: Real> PairOutput<T> {
    pub fn sigma(&self, view: usize) -> T {
        self.log_sigma[view].exp()
    }
}

#[derive(Clone, Debug)]
pub struct PairCache<T> {
    head_stem: [StemCache<T>; 2],
    hia: HiaCache<T>,
    e: [Vec<T>; 2],
    scene_stem: [StemCache<T>; 2],
    esa12: EsaCache<T>,
    esa21: EsaCache<T>,
    query: [QueryCache<T>; 2],
    decoder: [DecoderCache<T>; 2],
}

/// Loss gradients with respect to the model outputs.
#[derive(Clone, Debug)]
pub struct OutputGrads<T> {
    pub heatmap: [Vec<T>; 2],
    pub logit: [T; 2],
    pub gaze: [Vec3<T>; 2],
    pub log_sigma: [T; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel<T> {
    pub config: ToyConfig,
    pub head_stem: ConvStem<T>,
    pub hia: Hia<T>,
    pub gaze_head: GazeHead<T>,
    pub scene_stem: ConvStem<T>,
    pub scene_pos: Tensor<T>,
    pub esa: Esa<T>,
    pub decoder: GazeDecoder<T>,
    pub cross_view: CrossViewTransform<T>,
}

fn add_into<T: Real>(a: &mut [T], b: &[T]) {
    a.iter_mut().zip(b).for_each(|(x, &y)| *x += y);
}

impl<T: Real> ToyModel<T> {
    pub fn new(config: ToyConfig) -> Result<Self, NnError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d;
        let grid = config.token_grid();
        Ok(Self {
            config,
            head_stem: ConvStem::new(3, config.stem_channels, d, &mut rng),
            hia: Hia::new(d, config.heads, &mut rng)?,
            gaze_head: GazeHead::new(d, &mut rng),
            scene_stem: ConvStem::new(SCENE_CHANNELS, config.stem_channels, d, &mut rng),
            scene_pos: Tensor::uniform(&[grid.len(), d], 0.1, &mut rng),
            esa: Esa::new(d, config.heads, &mut rng)?,
            decoder: GazeDecoder::new(d, config.heads, (grid.width, grid.height), &mut rng)?,
            cross_view: CrossViewTransform::new(d, &mut rng),
        })
    }

    fn scene_input(&self, view: &ViewInput<T>, fov: &[T]) -> Result<Vec<T>, NnError> {
        let (w, h) = self.config.scene_size;
        let n = w * h;
        if view.rgb.len() != 3 * n || view.head_mask.len() != n || fov.len() != n {
            return Err(NnError::ShapeMismatch(format!("scene inputs must be {w}×{h}")));
        }
        let mut x = Vec::with_capacity(SCENE_CHANNELS * n);
        for i in 0..n {
            x.extend_from_slice(&view.rgb[3 * i..3 * i + 3]);
            x.push(fov[i]);
            x.push(view.head_mask[i]);
        }
        Ok(x)
    }

    /// FoV prior for a view; zero when the view has no eye or `g` is degenerate.
    pub fn fov_prior(&self, view: &ViewInput<T>, g: Vec3<T>) -> Vec<T> {
        let (w, h) = self.config.scene_size;
        let zeros = || vec![T::zero(); w * h];
        let Some(eye_px) = view.eye_px else { return zeros() };
        let Ok(eye) = EyeLocation::from_depth(&view.camera, &view.depth, eye_px) else { return zeros() };
        match fov_heatmap(&view.cloud, &eye, g, &DecayConfig::default()) {
            Ok(m) => m.values,
            Err(_) => zeros(),
        }
    }

    pub fn forward(
        &self,
        input: &PairInput<T>,
        fov_gaze: Option<[Option<Vec3<T>>; 2]>,
    ) -> Result<(PairOutput<T>, PairCache<T>), NnError> {
        let c = self.config.head_crop;
        let (w, h) = self.config.scene_size;
        let [v1, v2] = &input.views;
        let (f1, hs1) = self.head_stem.forward(&v1.head_crop, c, c);
        let (f2, hs2) = self.head_stem.forward(&v2.head_crop, c, c);
        let (hia, hia_cache) = self.hia.forward(&f1, &f2, &input.r21, &input.r12)?;
        let (g1, ls1) = self.gaze_head.forward(&hia.e1);
        let (g2, ls2) = self.gaze_head.forward(&hia.e2);
        for v in [g1.x, g1.y, g1.z, ls1, g2.x, g2.y, g2.z, ls2] {
            if !v.is_finite() {
                return Err(NnError::NonFinite("gaze head output".into()));
            }
        }

        let selection = match (
            GazePrediction::from_log_sigma("1", g1, ls1),
            GazePrediction::from_log_sigma("2", g2, ls2),
        ) {
            (Ok(p1), Ok(p2)) if g1.norm() > T::zero() && g2.norm() > T::zero() => {
                Some(select_and_transfer(&p1, &p2, &v1.camera.extrinsics, &v2.camera.extrinsics))
            }
            _ => None,
        };
        let fov_g = match fov_gaze {
            Some(g) => g,
            None => match &selection {
                Some(s) => [Some(s.g1), Some(s.g2)],
                None => [None, None],
            },
        };
        let fov = [0, 1].map(|i| match fov_g[i] {
            Some(g) => self.fov_prior(&input.views[i], g),
            None => vec![T::zero(); w * h],
        });

        let (s1, ss1) = self.scene_stem.forward(&self.scene_input(v1, &fov[0])?, h, w);
        let (s2, ss2) = self.scene_stem.forward(&self.scene_input(v2, &fov[1])?, h, w);
        let pos = self.scene_pos.data();
        let s1: Vec<T> = s1.iter().zip(pos).map(|(&a, &b)| a + b).collect();
        let s2: Vec<T> = s2.iter().zip(pos).map(|(&a, &b)| a + b).collect();
        let (t1, esa12) = self.esa.forward(&s1, &s2, &input.esa12)?;
        let (t2, esa21) = self.esa.forward(&s2, &s1, &input.esa21)?;

        let (q1, qc1) = self.decoder.head_query(&hia.e1, v1.head_center);
        let (q2, qc2) = self.decoder.head_query(&hia.e2, v2.head_center);
        let (o1, dc1) = self.decoder.decode(&q1, &t1)?;
        let (o2, dc2) = self.decoder.decode(&q2, &t2)?;

        let out = PairOutput { outputs: [o1, o2], gaze: [g1, g2], log_sigma: [ls1, ls2], selection, fov };
        let cache = PairCache {
            head_stem: [hs1, hs2],
            hia: hia_cache,
            e: [hia.e1, hia.e2],
            scene_stem: [ss1, ss2],
            esa12,
            esa21,
            query: [qc1, qc2],
            decoder: [dc1, dc2],
        };
        Ok((out, cache))
    }

    /// Accumulates parameter gradients. The FoV prior is treated as a
    /// constant input.
    pub fn backward(&mut self, input: &PairInput<T>, cache: &PairCache<T>, grads: &OutputGrads<T>) {
        let (dq1, dt1) = self.decoder.decode_backward(&cache.decoder[0], &grads.heatmap[0], grads.logit[0]);
        let (dq2, dt2) = self.decoder.decode_backward(&cache.decoder[1], &grads.heatmap[1], grads.logit[1]);
        self.decoder.head_query_backward(&cache.query[0], &dq1);
        self.decoder.head_query_backward(&cache.query[1], &dq2);

        let (mut ds1, mut ds2) = self.esa.backward(&cache.esa12, &input.esa12, &dt1);
        let (b2, b1) = self.esa.backward(&cache.esa21, &input.esa21, &dt2);
        add_into(&mut ds1, &b1);
        add_into(&mut ds2, &b2);
        {
            let g = self.scene_pos.grad_mut();
            add_into(g, &ds1);
            add_into(g, &ds2);
        }
        self.scene_stem.backward(&cache.scene_stem[0], &ds1);
        self.scene_stem.backward(&cache.scene_stem[1], &ds2);

        let mut de1 = self.gaze_head.backward(&cache.e[0], grads.gaze[0], grads.log_sigma[0]);
        let mut de2 = self.gaze_head.backward(&cache.e[1], grads.gaze[1], grads.log_sigma[1]);
        add_into(&mut de1, &dq1);
        add_into(&mut de2, &dq2);
        let (dh1, dh2) = self.hia.backward(&cache.hia, None, None, &de1, &de2);
        self.head_stem.backward(&cache.head_stem[0], &dh1);
        self.head_stem.backward(&cache.head_stem[1], &dh2);
    }

    /// Training loss of one pair with gradients on the outputs.
    pub fn pair_loss(
        &self,
        out: &PairOutput<T>,
        target: &PairTarget<T>,
        weights: &LossWeights,
    ) -> Result<(LossBreakdown<T>, OutputGrads<T>), NnError> {
        let gaze = [0, 1].map(|i| target.gaze[i].and_then(|gt| gaze_loss(out.gaze[i], out.sigma(i), gt).ok()));
        let loss = total_loss(&out.outputs, &target.views, &gaze, weights)?;
        let scale = loss.gaze_scale;
        let zero = (Vec3::zeros(), T::zero());
        let [(dg1, dl1), (dg2, dl2)] =
            gaze.map(|g| g.map(|g| (g.grad_g * scale, g.grad_log_sigma * scale)).unwrap_or(zero));
        let grads = OutputGrads {
            heatmap: [loss.d_heatmap[0].clone(), loss.d_heatmap[1].clone()],
            logit: [loss.d_logit[0], loss.d_logit[1]],
            gaze: [dg1, dg2],
            log_sigma: [dl1, dl2],
        };
        Ok((loss, grads))
    }

    /// Forward, loss and backward for one pair; gradients accumulate.
    pub fn train_pair(
        &mut self,
        input: &PairInput<T>,
        target: &PairTarget<T>,
        weights: &LossWeights,
        source: FovSource,
    ) -> Result<LossBreakdown<T>, NnError> {
        let fov_gaze = match source {
            FovSource::Predicted => None,
            FovSource::GroundTruth => Some(target.gaze),
        };
        let (out, cache) = self.forward(input, fov_gaze)?;
        let (loss, grads) = self.pair_loss(&out, target, weights)?;
        if !loss.total.is_finite() {
            return Err(NnError::NonFinite("loss".into()));
        }
        self.backward(input, &cache, &grads);
        Ok(loss)
    }

    /// Head embedding for a primary view without a visible head, from the
    /// reference view's embedding.
    pub fn cross_view_embedding(&self, e_ref: &[T], r21: &Mat3<T>) -> Result<Vec<T>, NnError> {
        Ok(self.cross_view.forward(e_ref, r21)?.0)
    }

    /// Flattened gradients in visiting order.
    pub fn grads(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit("", &mut |_, t| match t.grad() {
            Some(g) => out.extend_from_slice(g),
            None => out.extend(std::iter::repeat(T::zero()).take(t.len())),
        });
        out
    }

    /// `θ ← θ − lr·g` with `g` in visiting order.
    pub fn apply_update(&mut self, grads: &[T], lr: T) {
        let mut off = 0;
        self.visit_mut("", &mut |_, t| {
            let n = t.len();
            t.data_mut().iter_mut().zip(&grads[off..off + n]).for_each(|(p, &g)| *p -= lr * g);
            off += n;
        });
    }
}

impl<T: Real> Parameterized<T> for ToyModel<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.head_stem.visit(&join(prefix, "head_stem"), f);
        self.hia.visit(&join(prefix, "hia"), f);
        self.gaze_head.visit(&join(prefix, "gaze_head"), f);
        self.scene_stem.visit(&join(prefix, "scene_stem"), f);
        f(&join(prefix, "scene_pos"), &self.scene_pos);
        self.esa.visit(&join(prefix, "esa"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
        self.cross_view.visit(&join(prefix, "cross_view"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.head_stem.visit_mut(&join(prefix, "head_stem"), f);
        self.hia.visit_mut(&join(prefix, "hia"), f);
        self.gaze_head.visit_mut(&join(prefix, "gaze_head"), f);
        self.scene_stem.visit_mut(&join(prefix, "scene_stem"), f);
        f(&join(prefix, "scene_pos"), &mut self.scene_pos);
        self.esa.visit_mut(&join(prefix, "esa"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
        self.cross_view.visit_mut(&join(prefix, "cross_view"), f);
    }
}
