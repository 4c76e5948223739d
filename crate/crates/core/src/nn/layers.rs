//! Linear layers, small MLPs, strided convolutions and resampling, each
//! with an explicit backward pass that accumulates parameter gradients.

use rand_chacha::ChaCha8Rng;

use crate::scalar::Real;

use super::tensor::{join, Parameterized, Tensor};

/// `y = x·Wᵀ + b` applied to each row of an `[n, d_in]` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Real> Linear<T> {
    /// Xavier-uniform weights, zero bias.
    pub fn new(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (d_in + d_out) as f64).sqrt();
        Self { w: Tensor::uniform(&[d_out, d_in], limit, rng), b: Tensor::zeros(&[d_out]) }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self { w: Tensor::zeros(&[d_out, d_in]), b: Tensor::zeros(&[d_out]) }
    }

    pub fn d_in(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        let (di, dout) = (self.d_in(), self.d_out());
        debug_assert_eq!(x.len() % di, 0);
        let (w, b) = (self.w.data(), self.b.data());
        let mut y = Vec::with_capacity(x.len() / di * dout);
        for row in x.chunks_exact(di) {
            for o in 0..dout {
                let wr = &w[o * di..(o + 1) * di];
                let mut acc = b[o];
                for k in 0..di {
                    acc += wr[k] * row[k];
                }
                y.push(acc);
            }
        }
        y
    }

    /// Accumulates `dW`, `db` and returns `dx`.
    pub fn backward(&mut self, x: &[T], dy: &[T]) -> Vec<T> {
        let (di, dout) = (self.d_in(), self.d_out());
        let n = x.len() / di;
        debug_assert_eq!(dy.len(), n * dout);
        {
            let gw = self.w.grad_mut();
            for (row, drow) in x.chunks_exact(di).zip(dy.chunks_exact(dout)) {
                for o in 0..dout {
                    let g = drow[o];
                    if g != T::zero() {
                        let gr = &mut gw[o * di..(o + 1) * di];
                        for k in 0..di {
                            gr[k] += g * row[k];
                        }
                    }
                }
            }
        }
        {
            let gb = self.b.grad_mut();
            for drow in dy.chunks_exact(dout) {
                for o in 0..dout {
                    gb[o] += drow[o];
                }
            }
        }
        let w = self.w.data();
        let mut dx = vec![T::zero(); x.len()];
        for (dxr, drow) in dx.chunks_exact_mut(di).zip(dy.chunks_exact(dout)) {
            for o in 0..dout {
                let g = drow[o];
                if g != T::zero() {
                    let wr = &w[o * di..(o + 1) * di];
                    for k in 0..di {
                        dxr[k] += g * wr[k];
                    }
                }
            }
        }
        dx
    }
}

impl<T: Real> Parameterized<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "w"), &self.w);
        f(&join(prefix, "b"), &self.b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "b"), &mut self.b);
    }
}

/// Two linear layers with a tanh in between.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp2<T> {
    pub l1: Linear<T>,
    pub l2: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct Mlp2Cache<T> {
    x: Vec<T>,
    h: Vec<T>,
}

impl<T: Real> Mlp2<T> {
    pub fn new(d_in: usize, d_hidden: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { l1: Linear::new(d_in, d_hidden, rng), l2: Linear::new(d_hidden, d_out, rng) }
    }

    pub fn forward(&self, x: &[T]) -> (Vec<T>, Mlp2Cache<T>) {
        let h: Vec<T> = self.l1.forward(x).into_iter().map(T::tanh).collect();
        let y = self.l2.forward(&h);
        (y, Mlp2Cache { x: x.to_vec(), h })
    }

    pub fn backward(&mut self, cache: &Mlp2Cache<T>, dy: &[T]) -> Vec<T> {
        let dh = self.l2.backward(&cache.h, dy);
        let dz: Vec<T> = dh.iter().zip(&cache.h).map(|(&g, &h)| g * (T::one() - h * h)).collect();
        self.l1.backward(&cache.x, &dz)
    }
}

impl<T: Real> Parameterized<T> for Mlp2<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.l1.visit(&join(prefix, "l1"), f);
        self.l2.visit(&join(prefix, "l2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.l1.visit_mut(&join(prefix, "l1"), f);
        self.l2.visit_mut(&join(prefix, "l2"), f);
    }
}

/// 3×3 convolution, stride 2, zero padding 1, on pixel-major `[h·w, c]`
/// feature maps. Implemented as a linear layer over im2col patches.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub lin: Linear<T>,
    pub c_in: usize,
}

#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    patches: Vec<T>,
    h: usize,
    w: usize,
}

pub fn conv_out_size(n: usize) -> usize {
    (n - 1) / 2 + 1
}

impl<T: Real> Conv2d<T> {
    pub fn new(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { lin: Linear::new(9 * c_in, c_out, rng), c_in }
    }

    pub fn c_out(&self) -> usize {
        self.lin.d_out()
    }

    fn im2col(&self, x: &[T], h: usize, w: usize) -> Vec<T> {
        let c = self.c_in;
        let (oh, ow) = (conv_out_size(h), conv_out_size(w));
        let mut p = vec![T::zero(); oh * ow * 9 * c];
        for oy in 0..oh {
            for ox in 0..ow {
                let base = (oy * ow + ox) * 9 * c;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (iy, ix) = ((2 * oy + ky) as isize - 1, (2 * ox + kx) as isize - 1);
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        let src = (iy as usize * w + ix as usize) * c;
                        let dst = base + (ky * 3 + kx) * c;
                        p[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
        p
    }

    /// Returns the `[oh·ow, c_out]` output.
    pub fn forward(&self, x: &[T], h: usize, w: usize) -> (Vec<T>, ConvCache<T>) {
        debug_assert_eq!(x.len(), h * w * self.c_in);
        let patches = self.im2col(x, h, w);
        (self.lin.forward(&patches), ConvCache { patches, h, w })
    }

    pub fn backward(&mut self, cache: &ConvCache<T>, dy: &[T]) -> Vec<T> {
        let dp = self.lin.backward(&cache.patches, dy);
        let c = self.c_in;
        let (h, w) = (cache.h, cache.w);
        let (oh, ow) = (conv_out_size(h), conv_out_size(w));
        let mut dx = vec![T::zero(); h * w * c];
        for oy in 0..oh {
            for ox in 0..ow {
                let base = (oy * ow + ox) * 9 * c;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (iy, ix) = ((2 * oy + ky) as isize - 1, (2 * ox + kx) as isize - 1);
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        let dst = (iy as usize * w + ix as usize) * c;
                        let src = base + (ky * 3 + kx) * c;
                        for k in 0..c {
                            dx[dst + k] += dp[src + k];
                        }
                    }
                }
            }
        }
        dx
    }
}

impl<T: Real> Parameterized<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.lin.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.lin.visit_mut(prefix, f);
    }
}

/// Two strided convolutions with a tanh between them: `[h·w, c_in]` →
/// `[h/4 · w/4, c_out]` tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvStem<T> {
    pub c1: Conv2d<T>,
    pub c2: Conv2d<T>,
}

#[derive(Clone, Debug)]
pub struct StemCache<T> {
    c1: ConvCache<T>,
    a1: Vec<T>,
    c2: ConvCache<T>,
}

impl<T: Real> ConvStem<T> {
    pub fn new(c_in: usize, c_mid: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { c1: Conv2d::new(c_in, c_mid, rng), c2: Conv2d::new(c_mid, c_out, rng) }
    }

    pub fn output_size(h: usize, w: usize) -> (usize, usize) {
        (conv_out_size(conv_out_size(h)), conv_out_size(conv_out_size(w)))
    }

    pub fn forward(&self, x: &[T], h: usize, w: usize) -> (Vec<T>, StemCache<T>) {
        let (z1, c1) = self.c1.forward(x, h, w);
        let a1: Vec<T> = z1.into_iter().map(T::tanh).collect();
        let (y, c2) = self.c2.forward(&a1, conv_out_size(h), conv_out_size(w));
        (y, StemCache { c1, a1, c2 })
    }

    pub fn backward(&mut self, cache: &StemCache<T>, dy: &[T]) -> Vec<T> {
        let da = self.c2.backward(&cache.c2, dy);
        let dz: Vec<T> = da.iter().zip(&cache.a1).map(|(&g, &a)| g * (T::one() - a * a)).collect();
        self.c1.backward(&cache.c1, &dz)
    }
}

impl<T: Real> Parameterized<T> for ConvStem<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.c1.visit(&join(prefix, "c1"), f);
        self.c2.visit(&join(prefix, "c2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.c1.visit_mut(&join(prefix, "c1"), f);
        self.c2.visit_mut(&join(prefix, "c2"), f);
    }
}

/// Separable bilinear resampling with half-pixel centers and edge clamping.
#[derive(Clone, Debug, PartialEq)]
pub struct BilinearResize {
    pub src: (usize, usize),
    pub dst: (usize, usize),
    wx: Vec<[(usize, f64); 2]>,
    wy: Vec<[(usize, f64); 2]>,
}

fn axis_weights(s: usize, d: usize) -> Vec<[(usize, f64); 2]> {
    (0..d)
        .map(|i| {
            let x = ((i as f64 + 0.5) * s as f64 / d as f64 - 0.5).clamp(0.0, (s - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(s - 1);
            let f = x - x0 as f64;
            [(x0, 1.0 - f), (x1, f)]
        })
        .collect()
}

impl BilinearResize {
    /// Sizes are `(width, height)`.
    pub fn new(src: (usize, usize), dst: (usize, usize)) -> Self {
        Self { src, dst, wx: axis_weights(src.0, dst.0), wy: axis_weights(src.1, dst.1) }
    }

    pub fn forward<T: Real>(&self, x: &[T]) -> Vec<T> {
        let (sw, (dw, dh)) = (self.src.0, self.dst);
        let mut y = vec![T::zero(); dw * dh];
        for j in 0..dh {
            for i in 0..dw {
                let mut acc = T::zero();
                for &(yy, fy) in &self.wy[j] {
                    for &(xx, fx) in &self.wx[i] {
                        acc += x[yy * sw + xx] * T::lit(fx * fy);
                    }
                }
                y[j * dw + i] = acc;
            }
        }
        y
    }

    pub fn backward<T: Real>(&self, dy: &[T]) -> Vec<T> {
        let ((sw, sh), (dw, dh)) = (self.src, self.dst);
        let mut dx = vec![T::zero(); sw * sh];
        for j in 0..dh {
            for i in 0..dw {
                let g = dy[j * dw + i];
                for &(yy, fy) in &self.wy[j] {
                    for &(xx, fx) in &self.wx[i] {
                        dx[yy * sw + xx] += g * T::lit(fx * fy);
                    }
                }
            }
        }
        dx
    }
}

/// Numerically stable softmax.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}
