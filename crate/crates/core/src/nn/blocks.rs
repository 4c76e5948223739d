//! Head information aggregation (HIA), epipolar scene attention (ESA),
//! the gaze decoder with its output heads, the gaze head, and the
//! cross-view head-embedding transform.

use rand_chacha::ChaCha8Rng;

use crate::camera::{epipolar_segment, sample_epipolar, visible_epipolar_segment, Camera, Intrinsics, Pixel, Segment};
use crate::linalg::{Mat3, Vec3};
use crate::scalar::Real;

use super::attention::{
    attend, attend_backward, cross_attention, cross_attention_backward, AttentionParams, CrossAttentionCache,
};
use super::layers::{sigmoid, BilinearResize, Linear, Mlp2, Mlp2Cache};
use super::tensor::{join, Parameterized, Tensor};
use super::NnError;

/// Side length of the output heatmap.
pub const HEATMAP_SIZE: usize = 64;

fn append_rotation<T: Real>(tokens: &[T], d: usize, r: &Mat3<T>) -> Vec<T> {
    let flat = r.to_row_major();
    let mut out = Vec::with_capacity(tokens.len() / d * (d + 9));
    for row in tokens.chunks_exact(d) {
        out.extend_from_slice(row);
        out.extend_from_slice(&flat);
    }
    out
}

fn strip_rotation<T: Real>(dkv: &[T], d: usize) -> Vec<T> {
    dkv.chunks_exact(d + 9).flat_map(|r| r[..d].iter().copied()).collect()
}

fn mean_rows<T: Real>(x: &[T], d: usize) -> Vec<T> {
    let n = x.len() / d;
    let mut m = vec![T::zero(); d];
    for row in x.chunks_exact(d) {
        m.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
    }
    let inv = T::one() / T::from_usize_lossy(n);
    m.iter_mut().for_each(|v| *v *= inv);
    m
}

/// Head cross-attention shared by both views. Keys and values see the
/// other view's tokens with the flattened relative rotation appended.
#[derive(Clone, Debug, PartialEq)]
pub struct Hia<T> {
    pub attn: AttentionParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HiaOutput<T> {
    pub f1: Vec<T>,
    pub f2: Vec<T>,
    pub e1: Vec<T>,
    pub e2: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct HiaCache<T> {
    c1: CrossAttentionCache<T>,
    c2: CrossAttentionCache<T>,
    n1: usize,
    n2: usize,
}

impl<T: Real> Hia<T> {
    pub fn new(d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self, NnError> {
        Ok(Self { attn: AttentionParams::new(d, d + 9, d, heads, rng)? })
    }

    pub fn width(&self) -> usize {
        self.attn.d_query()
    }

    /// `F̃₁ = F₁ + CrossAtt(F₁, F₂ ⊕ R₂₁)`, symmetric for view 2 with
    /// `R₁₂`; embeddings are token means.
    pub fn forward(&self, f1: &[T], f2: &[T], r21: &Mat3<T>, r12: &Mat3<T>) -> Result<(HiaOutput<T>, HiaCache<T>), NnError> {
        let d = self.width();
        if f1.len() % d != 0 || f2.len() % d != 0 || f1.is_empty() || f2.is_empty() {
            return Err(NnError::ShapeMismatch(format!("head tokens must have width {d}")));
        }
        let (o1, c1) = cross_attention(f1, &append_rotation(f2, d, r21), &self.attn)?;
        let (o2, c2) = cross_attention(f2, &append_rotation(f1, d, r12), &self.attn)?;
        let (e1, e2) = (mean_rows(&o1, d), mean_rows(&o2, d));
        let cache = HiaCache { c1, c2, n1: f1.len() / d, n2: f2.len() / d };
        Ok((HiaOutput { f1: o1, f2: o2, e1, e2 }, cache))
    }

    /// Gradients with respect to the raw tokens, given gradients on the
    /// enhanced tokens (optional) and on the pooled embeddings.
    pub fn backward(
        &mut self,
        cache: &HiaCache<T>,
        df1: Option<&[T]>,
        df2: Option<&[T]>,
        de1: &[T],
        de2: &[T],
    ) -> (Vec<T>, Vec<T>) {
        let d = self.width();
        let spread = |n: usize, de: &[T], df: Option<&[T]>| -> Vec<T> {
            let inv = T::one() / T::from_usize_lossy(n);
            let mut g: Vec<T> = (0..n).flat_map(|_| de.iter().map(move |&v| v * inv)).collect();
            if let Some(df) = df {
                g.iter_mut().zip(df).for_each(|(a, &b)| *a += b);
            }
            g
        };
        let g1 = spread(cache.n1, de1, df1);
        let g2 = spread(cache.n2, de2, df2);
        let (mut d1, dkv1) = cross_attention_backward(&mut self.attn, &cache.c1, &g1);
        let (mut d2, dkv2) = cross_attention_backward(&mut self.attn, &cache.c2, &g2);
        d2.iter_mut().zip(strip_rotation(&dkv1, d)).for_each(|(a, b)| *a += b);
        d1.iter_mut().zip(strip_rotation(&dkv2, d)).for_each(|(a, b)| *a += b);
        (d1, d2)
    }
}

impl<T: Real> Parameterized<T> for Hia<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.attn.visit(&join(prefix, "attn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.attn.visit_mut(&join(prefix, "attn"), f);
    }
}

/// Placement of a token grid on its image: token `(i, j)` sits at pixel
/// `(offset + stride·i, offset + stride·j)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenGrid {
    pub width: usize,
    pub height: usize,
    pub stride: f64,
    pub offset: f64,
}

impl TokenGrid {
    /// Grid of `width × height` tokens each covering `stride × stride` pixels.
    pub fn with_stride(width: usize, height: usize, stride: usize) -> Self {
        Self { width, height, stride: stride as f64, offset: 0.5 * (stride as f64 - 1.0) }
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn center<T: Real>(&self, index: usize) -> Pixel<T> {
        let (i, j) = (index % self.width, index / self.width);
        Pixel::new(T::lit(self.offset + self.stride * i as f64), T::lit(self.offset + self.stride * j as f64))
    }

    /// Bilinear taps of pixel `px` on the grid, clamped to the border.
    pub fn taps<T: Real>(&self, px: Pixel<T>) -> [(usize, f64); 4] {
        let gx = ((px.u.as_f64() - self.offset) / self.stride).clamp(0.0, (self.width - 1) as f64);
        let gy = ((px.v.as_f64() - self.offset) / self.stride).clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
        [
            (y0 * self.width + x0, (1.0 - fx) * (1.0 - fy)),
            (y0 * self.width + x1, fx * (1.0 - fy)),
            (y1 * self.width + x0, (1.0 - fx) * fy),
            (y1 * self.width + x1, fx * fy),
        ]
    }
}

/// Per query token of view 1: bilinear taps into view 2's grid for each
/// epipolar sample, or `None` when the line misses view 2.
#[derive(Clone, Debug, PartialEq)]
pub struct EsaGeometry {
    pub samples: Vec<Option<Vec<[(usize, f64); 4]>>>,
    /// Sample pixels in view 2, parallel to `samples`.
    pub pixels: Vec<Option<Vec<(f64, f64)>>>,
}

impl EsaGeometry {
    fn from_segments<T: Real>(
        grid1: &TokenGrid,
        grid2: &TokenGrid,
        n_samples: usize,
        mut seg: impl FnMut(Pixel<T>) -> Option<Segment<T>>,
    ) -> Result<Self, NnError> {
        let mut samples = Vec::with_capacity(grid1.len());
        let mut pixels = Vec::with_capacity(grid1.len());
        for i in 0..grid1.len() {
            match seg(grid1.center(i)) {
                Some(s) => {
                    let pts = sample_epipolar(&s, n_samples).map_err(|e| NnError::ShapeMismatch(e.to_string()))?;
                    samples.push(Some(pts.iter().map(|&p| grid2.taps(p)).collect()));
                    pixels.push(Some(pts.iter().map(|p| (p.u.as_f64(), p.v.as_f64())).collect()));
                }
                None => {
                    samples.push(None);
                    pixels.push(None);
                }
            }
        }
        Ok(Self { samples, pixels })
    }

    /// Samples along the part of each epipolar line that lies in front of
    /// camera 2 and inside its image.
    pub fn from_cameras<T: Real>(
        cam1: &Camera<T>,
        cam2: &Camera<T>,
        grid1: &TokenGrid,
        grid2: &TokenGrid,
        n_samples: usize,
    ) -> Result<Self, NnError> {
        Self::from_segments(grid1, grid2, n_samples, |px| visible_epipolar_segment(cam1, cam2, px))
    }

    /// Samples along `l = F·x` clipped to image 2, from the fundamental matrix alone.
    pub fn from_fundamental<T: Real>(
        f12: &Mat3<T>,
        image2: &Intrinsics<T>,
        grid1: &TokenGrid,
        grid2: &TokenGrid,
        n_samples: usize,
    ) -> Result<Self, NnError> {
        Self::from_segments(grid1, grid2, n_samples, |px| epipolar_segment(f12, px, image2))
    }

    pub fn covered(&self) -> usize {
        self.samples.iter().filter(|s| s.is_some()).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Esa<T> {
    pub attn: AttentionParams<T>,
}

#[derive(Clone, Debug)]
pub struct EsaCache<T> {
    scene1: Vec<T>,
    scene2: Vec<T>,
    q: Vec<T>,
    kg: Vec<T>,
    vg: Vec<T>,
    ctx: Vec<T>,
    weights: Vec<Option<Vec<T>>>,
}

impl<T> EsaCache<T> {
    /// `[heads, n_samples]` attention weights of query token `i`.
    pub fn weights(&self, i: usize) -> Option<&[T]> {
        self.weights[i].as_deref()
    }
}

fn gather<T: Real>(grid: &[T], dk: usize, taps: &[[(usize, f64); 4]]) -> Vec<T> {
    let mut out = vec![T::zero(); taps.len() * dk];
    for (l, tap) in taps.iter().enumerate() {
        let dst = &mut out[l * dk..(l + 1) * dk];
        for &(idx, w) in tap {
            if w == 0.0 {
                continue;
            }
            let w = T::lit(w);
            for (o, &g) in dst.iter_mut().zip(&grid[idx * dk..(idx + 1) * dk]) {
                *o += w * g;
            }
        }
    }
    out
}

fn scatter<T: Real>(grid: &mut [T], dk: usize, taps: &[[(usize, f64); 4]], d: &[T]) {
    for (l, tap) in taps.iter().enumerate() {
        let src = &d[l * dk..(l + 1) * dk];
        for &(idx, w) in tap {
            if w == 0.0 {
                continue;
            }
            let w = T::lit(w);
            for (g, &s) in grid[idx * dk..(idx + 1) * dk].iter_mut().zip(src) {
                *g += w * s;
            }
        }
    }
}

impl<T: Real> Esa<T> {
    pub fn new(d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self, NnError> {
        Ok(Self { attn: AttentionParams::new(d, d, d, heads, rng)? })
    }

    /// `p' = p + CrossAtt(Wq·p, Wk·E_p, Wv·E_p)` with `E_p` the view-2
    /// features bilinearly sampled along `p`'s epipolar line. Keys and
    /// values are projected on the grid before sampling, which is
    /// equivalent because the taps sum to one.
    pub fn forward(&self, scene1: &[T], scene2: &[T], geom: &EsaGeometry) -> Result<(Vec<T>, EsaCache<T>), NnError> {
        let d = self.attn.d_query();
        if scene1.len() != geom.samples.len() * d || scene2.is_empty() || scene2.len() % d != 0 {
            return Err(NnError::ShapeMismatch(format!(
                "scene tokens {} / {} for {} query tokens of width {d}",
                scene1.len(),
                scene2.len(),
                geom.samples.len()
            )));
        }
        let dk = self.attn.d_k();
        let q = self.attn.wq.forward(scene1);
        let kg = self.attn.wk.forward(scene2);
        let vg = self.attn.wv.forward(scene2);
        let mut ctx = vec![T::zero(); geom.samples.len() * dk];
        let mut weights = Vec::with_capacity(geom.samples.len());
        for (i, taps) in geom.samples.iter().enumerate() {
            let Some(taps) = taps else {
                weights.push(None);
                continue;
            };
            let (k, v) = (gather(&kg, dk, taps), gather(&vg, dk, taps));
            let (c, w) = attend(&q[i * dk..(i + 1) * dk], &k, &v, self.attn.heads);
            ctx[i * dk..(i + 1) * dk].copy_from_slice(&c);
            weights.push(Some(w));
        }
        let proj = self.attn.wo.forward(&ctx);
        let mut out = scene1.to_vec();
        for (i, w) in weights.iter().enumerate() {
            if w.is_some() {
                for c in 0..d {
                    out[i * d + c] += proj[i * d + c];
                }
            }
        }
        let cache = EsaCache { scene1: scene1.to_vec(), scene2: scene2.to_vec(), q, kg, vg, ctx, weights };
        Ok((out, cache))
    }

    /// Returns `(d_scene1, d_scene2)`.
    pub fn backward(&mut self, cache: &EsaCache<T>, geom: &EsaGeometry, dout: &[T]) -> (Vec<T>, Vec<T>) {
        let (d, dk) = (self.attn.d_query(), self.attn.d_k());
        let mut dproj = dout.to_vec();
        for (i, w) in cache.weights.iter().enumerate() {
            if w.is_none() {
                dproj[i * d..(i + 1) * d].iter_mut().for_each(|v| *v = T::zero());
            }
        }
        let dctx = self.attn.wo.backward(&cache.ctx, &dproj);
        let mut dq = vec![T::zero(); cache.q.len()];
        let mut dkg = vec![T::zero(); cache.kg.len()];
        let mut dvg = vec![T::zero(); cache.vg.len()];
        for (i, taps) in geom.samples.iter().enumerate() {
            let (Some(taps), Some(w)) = (taps, &cache.weights[i]) else { continue };
            let (k, v) = (gather(&cache.kg, dk, taps), gather(&cache.vg, dk, taps));
            let (a, bk, bv) =
                attend_backward(&cache.q[i * dk..(i + 1) * dk], &k, &v, self.attn.heads, w, &dctx[i * dk..(i + 1) * dk]);
            dq[i * dk..(i + 1) * dk].copy_from_slice(&a);
            scatter(&mut dkg, dk, taps, &bk);
            scatter(&mut dvg, dk, taps, &bv);
        }
        let mut d1 = self.attn.wq.backward(&cache.scene1, &dq);
        d1.iter_mut().zip(dout).for_each(|(a, &b)| *a += b);
        let mut d2 = self.attn.wk.backward(&cache.scene2, &dkg);
        let d2v = self.attn.wv.backward(&cache.scene2, &dvg);
        d2.iter_mut().zip(d2v).for_each(|(a, b)| *a += b);
        (d1, d2)
    }
}

impl<T: Real> Parameterized<T> for Esa<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.attn.visit(&join(prefix, "attn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.attn.visit_mut(&join(prefix, "attn"), f);
    }
}

/// Maps a head embedding to a gaze vector and `log σ`.
#[derive(Clone, Debug, PartialEq)]
pub struct GazeHead<T> {
    pub lin: Linear<T>,
}

impl<T: Real> GazeHead<T> {
    pub fn new(d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { lin: Linear::new(d, 4, rng) }
    }

    pub fn forward(&self, e: &[T]) -> (Vec3<T>, T) {
        let y = self.lin.forward(e);
        (Vec3::new(y[0], y[1], y[2]), y[3])
    }

    pub fn backward(&mut self, e: &[T], dg: Vec3<T>, dlog_sigma: T) -> Vec<T> {
        self.lin.backward(e, &[dg.x, dg.y, dg.z, dlog_sigma])
    }
}

impl<T: Real> Parameterized<T> for GazeHead<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.lin.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.lin.visit_mut(prefix, f);
    }
}

/// Predicted heatmap and in-frame probability for one view.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutputs<T> {
    /// Row-major `64 × 64`.
    pub heatmap: Vec<T>,
    pub p_in: T,
    /// Pre-sigmoid in/out score.
    pub logit: T,
}

impl<T: Real> ModelOutputs<T> {
    pub fn from_probability(heatmap: Vec<T>, p_in: T) -> Self {
        Self { heatmap, p_in, logit: (p_in / (T::one() - p_in)).ln() }
    }
}

/// Gaze decoder: one cross-attention from the head query over the scene
/// tokens, a per-token heatmap head on `e_g ⊙ token` upsampled to 64×64,
/// and a logistic in/out head on `[ẽ_h, e_g]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GazeDecoder<T> {
    pub pos_mlp: Mlp2<T>,
    pub attn: AttentionParams<T>,
    pub hm_head: Linear<T>,
    pub io_head: Linear<T>,
    pub grid: (usize, usize),
    resize: BilinearResize,
}

#[derive(Clone, Debug)]
pub struct QueryCache<T> {
    pos: Mlp2Cache<T>,
}

#[derive(Clone, Debug)]
pub struct DecoderCache<T> {
    attn: CrossAttentionCache<T>,
    eg: Vec<T>,
    scene: Vec<T>,
    modulated: Vec<T>,
    io_in: Vec<T>,
}

impl<T> DecoderCache<T> {
    pub fn gaze_token(&self) -> &[T] {
        &self.eg
    }
}

impl<T: Real> GazeDecoder<T> {
    pub fn new(d: usize, heads: usize, grid: (usize, usize), rng: &mut ChaCha8Rng) -> Result<Self, NnError> {
        Ok(Self {
            pos_mlp: Mlp2::new(2, d, d, rng),
            attn: AttentionParams::new(d, d, d, heads, rng)?,
            hm_head: Linear::new(d, 1, rng),
            io_head: Linear::new(2 * d, 1, rng),
            grid,
            resize: BilinearResize::new(grid, (HEATMAP_SIZE, HEATMAP_SIZE)),
        })
    }

    pub fn width(&self) -> usize {
        self.attn.d_query()
    }

    /// `ẽ_h = e_h + MLP(normalized head center)`.
    pub fn head_query(&self, e_h: &[T], center: [T; 2]) -> (Vec<T>, QueryCache<T>) {
        let (pos, cache) = self.pos_mlp.forward(&center);
        (e_h.iter().zip(&pos).map(|(&a, &b)| a + b).collect(), QueryCache { pos: cache })
    }

    /// Gradient of `ẽ_h` flows unchanged to `e_h`; this accumulates the MLP part.
    pub fn head_query_backward(&mut self, cache: &QueryCache<T>, dquery: &[T]) {
        self.pos_mlp.backward(&cache.pos, dquery);
    }

    pub fn decode(&self, query: &[T], scene: &[T]) -> Result<(ModelOutputs<T>, DecoderCache<T>), NnError> {
        let d = self.width();
        let n = self.grid.0 * self.grid.1;
        if query.len() != d || scene.len() != n * d {
            return Err(NnError::ShapeMismatch(format!(
                "decoder expects a {d}-query and {n}×{d} scene tokens, got {} and {}",
                query.len(),
                scene.len()
            )));
        }
        let (eg, attn) = cross_attention(query, scene, &self.attn)?;
        let modulated: Vec<T> = scene.chunks_exact(d).flat_map(|row| row.iter().zip(&eg).map(|(&a, &b)| a * b)).collect();
        let logits = self.hm_head.forward(&modulated);
        let heatmap = self.resize.forward(&logits);
        let io_in: Vec<T> = query.iter().chain(eg.iter()).copied().collect();
        let logit = self.io_head.forward(&io_in)[0];
        let out = ModelOutputs { heatmap, p_in: sigmoid(logit), logit };
        Ok((out, DecoderCache { attn, eg, scene: scene.to_vec(), modulated, io_in }))
    }

    /// Returns `(d_query, d_scene)`.
    pub fn decode_backward(&mut self, cache: &DecoderCache<T>, dheatmap: &[T], dlogit: T) -> (Vec<T>, Vec<T>) {
        let d = self.width();
        let dz = self.resize.backward(dheatmap);
        let dmod = self.hm_head.backward(&cache.modulated, &dz);
        let mut dscene = vec![T::zero(); cache.scene.len()];
        let mut deg = vec![T::zero(); d];
        for (i, (row, drow)) in cache.scene.chunks_exact(d).zip(dmod.chunks_exact(d)).enumerate() {
            for c in 0..d {
                dscene[i * d + c] = drow[c] * cache.eg[c];
                deg[c] += drow[c] * row[c];
            }
        }
        let dio = self.io_head.backward(&cache.io_in, &[dlogit]);
        let mut dquery: Vec<T> = dio[..d].to_vec();
        deg.iter_mut().zip(&dio[d..]).for_each(|(a, &b)| *a += b);
        let (dq2, dkv) = cross_attention_backward(&mut self.attn, &cache.attn, &deg);
        dquery.iter_mut().zip(dq2).for_each(|(a, b)| *a += b);
        dscene.iter_mut().zip(dkv).for_each(|(a, b)| *a += b);
        (dquery, dscene)
    }
}

impl<T: Real> Parameterized<T> for GazeDecoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.pos_mlp.visit(&join(prefix, "pos_mlp"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.hm_head.visit(&join(prefix, "hm_head"), f);
        self.io_head.visit(&join(prefix, "io_head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.pos_mlp.visit_mut(&join(prefix, "pos_mlp"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.hm_head.visit_mut(&join(prefix, "hm_head"), f);
        self.io_head.visit_mut(&join(prefix, "io_head"), f);
    }
}

/// Head embedding for a primary view without a visible head:
/// `MLP(e_h2 ⊕ flat(R₂₁)) + e_pos_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossViewTransform<T> {
    pub mlp: Mlp2<T>,
    pub e_pos_out: Tensor<T>,
}

impl<T: Real> CrossViewTransform<T> {
    pub fn new(d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { mlp: Mlp2::new(d + 9, d, d, rng), e_pos_out: Tensor::uniform(&[d], 0.1, rng) }
    }

    pub fn forward(&self, e_h2: &[T], r21: &Mat3<T>) -> Result<(Vec<T>, Mlp2Cache<T>), NnError> {
        let d = self.e_pos_out.len();
        if e_h2.len() != d {
            return Err(NnError::ShapeMismatch(format!("embedding width {} != {d}", e_h2.len())));
        }
        let x: Vec<T> = e_h2.iter().copied().chain(r21.to_row_major()).collect();
        let (y, cache) = self.mlp.forward(&x);
        Ok((y.iter().zip(self.e_pos_out.data()).map(|(&a, &b)| a + b).collect(), cache))
    }

    /// Returns the gradient with respect to `e_h2`.
    pub fn backward(&mut self, cache: &Mlp2Cache<T>, dout: &[T]) -> Vec<T> {
        let d = self.e_pos_out.len();
        self.e_pos_out.grad_mut().iter_mut().zip(dout).for_each(|(g, &v)| *g += v);
        let dx = self.mlp.backward(cache, dout);
        dx[..d].to_vec()
    }
}

impl<T: Real> Parameterized<T> for CrossViewTransform<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.mlp.visit(&join(prefix, "mlp"), f);
        f(&join(prefix, "e_pos_out"), &self.e_pos_out);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
        f(&join(prefix, "e_pos_out"), &mut self.e_pos_out);
    }
}
