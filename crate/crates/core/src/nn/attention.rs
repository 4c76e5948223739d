//! Multi-head scaled dot-product cross-attention in residual form.

use rand_chacha::ChaCha8Rng;

use crate::scalar::Real;

use super::layers::{softmax, Linear};
use super::tensor::{join, Parameterized, Tensor};
use super::NnError;

/// `Wq, Wk, Wv` project to width `d_k`; `Wo` maps back to the query width.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    pub heads: usize,
}

impl<T: Real> AttentionParams<T> {
    pub fn new(d_query: usize, d_kv: usize, d_k: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self, NnError> {
        if heads == 0 || d_k % heads != 0 {
            return Err(NnError::ShapeMismatch(format!("d_k {d_k} not divisible by {heads} heads")));
        }
        Ok(Self {
            wq: Linear::new(d_query, d_k, rng),
            wk: Linear::new(d_kv, d_k, rng),
            wv: Linear::new(d_kv, d_k, rng),
            wo: Linear::new(d_k, d_query, rng),
            heads,
        })
    }

    pub fn d_query(&self) -> usize {
        self.wq.d_in()
    }

    pub fn d_kv(&self) -> usize {
        self.wk.d_in()
    }

    pub fn d_k(&self) -> usize {
        self.wq.d_out()
    }

    /// Zeroes the output projection, making the block an exact identity.
    pub fn zero_output(&mut self) {
        self.wo.w.fill(T::zero());
        self.wo.b.fill(T::zero());
    }
}

impl<T: Real> Parameterized<T> for AttentionParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.wq.visit(&join(prefix, "wq"), f);
        self.wk.visit(&join(prefix, "wk"), f);
        self.wv.visit(&join(prefix, "wv"), f);
        self.wo.visit(&join(prefix, "wo"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.wq.visit_mut(&join(prefix, "wq"), f);
        self.wk.visit_mut(&join(prefix, "wk"), f);
        self.wv.visit_mut(&join(prefix, "wv"), f);
        self.wo.visit_mut(&join(prefix, "wo"), f);
    }
}

/// Attention of one projected query `q` (width `d_k`) over `n` projected
/// keys/values. Returns the context vector and the `[heads, n]` weights.
pub fn attend<T: Real>(q: &[T], k: &[T], v: &[T], heads: usize) -> (Vec<T>, Vec<T>) {
    let dk = q.len();
    let n = k.len() / dk;
    let dh = dk / heads;
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let mut ctx = vec![T::zero(); dk];
    let mut weights = Vec::with_capacity(heads * n);
    for h in 0..heads {
        let s = h * dh..(h + 1) * dh;
        let logits: Vec<T> = (0..n)
            .map(|j| {
                let kj = &k[j * dk..(j + 1) * dk];
                q[s.clone()].iter().zip(&kj[s.clone()]).map(|(&a, &b)| a * b).sum::<T>() * scale
            })
            .collect();
        let a = softmax(&logits);
        for (j, &aj) in a.iter().enumerate() {
            let vj = &v[j * dk..(j + 1) * dk];
            for c in s.clone() {
                ctx[c] += aj * vj[c];
            }
        }
        weights.extend(a);
    }
    (ctx, weights)
}

/// Gradients of [`attend`] with respect to `q`, `k` and `v`.
pub fn attend_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    heads: usize,
    weights: &[T],
    dctx: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dk = q.len();
    let n = k.len() / dk;
    let dh = dk / heads;
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let mut dq = vec![T::zero(); dk];
    let mut dkk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    for h in 0..heads {
        let s = h * dh..(h + 1) * dh;
        let a = &weights[h * n..(h + 1) * n];
        let mut da = vec![T::zero(); n];
        for j in 0..n {
            let (vj, dvj) = (&v[j * dk..(j + 1) * dk], &mut dv[j * dk..(j + 1) * dk]);
            let mut acc = T::zero();
            for c in s.clone() {
                dvj[c] += a[j] * dctx[c];
                acc += dctx[c] * vj[c];
            }
            da[j] = acc;
        }
        let mean: T = a.iter().zip(&da).map(|(&x, &y)| x * y).sum();
        for j in 0..n {
            let dl = a[j] * (da[j] - mean) * scale;
            if dl == T::zero() {
                continue;
            }
            let kj = &k[j * dk..(j + 1) * dk];
            let dkj = &mut dkk[j * dk..(j + 1) * dk];
            for c in s.clone() {
                dq[c] += dl * kj[c];
                dkj[c] += dl * q[c];
            }
        }
    }
    (dq, dkk, dv)
}

#[derive(Clone, Debug)]
pub struct CrossAttentionCache<T> {
    query: Vec<T>,
    kv: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    weights: Vec<Vec<T>>,
    ctx: Vec<T>,
}

impl<T> CrossAttentionCache<T> {
    /// `[heads, n_kv]` attention weights of query token `i`.
    pub fn weights(&self, i: usize) -> &[T] {
        &self.weights[i]
    }
}

/// `out = query + Wo·Attn(Wq·query, Wk·kv, Wv·kv)` for `[n_q, d_query]`
/// queries and `[n_kv, d_kv]` keys/values.
pub fn cross_attention<T: Real>(
    query: &[T],
    kv: &[T],
    p: &AttentionParams<T>,
) -> Result<(Vec<T>, CrossAttentionCache<T>), NnError> {
    let (dq, dkv) = (p.d_query(), p.d_kv());
    if query.is_empty() || query.len() % dq != 0 || kv.is_empty() || kv.len() % dkv != 0 {
        return Err(NnError::ShapeMismatch(format!(
            "query len {} / width {dq}, kv len {} / width {dkv}",
            query.len(),
            kv.len()
        )));
    }
    let dk = p.d_k();
    let q = p.wq.forward(query);
    let k = p.wk.forward(kv);
    let v = p.wv.forward(kv);
    let mut ctx = Vec::with_capacity(q.len());
    let mut weights = Vec::with_capacity(q.len() / dk);
    for qi in q.chunks_exact(dk) {
        let (c, w) = attend(qi, &k, &v, p.heads);
        ctx.extend(c);
        weights.push(w);
    }
    let proj = p.wo.forward(&ctx);
    let out = query.iter().zip(&proj).map(|(&a, &b)| a + b).collect();
    Ok((out, CrossAttentionCache { query: query.to_vec(), kv: kv.to_vec(), q, k, v, weights, ctx }))
}

/// Returns `(d_query, d_kv)` and accumulates parameter gradients.
pub fn cross_attention_backward<T: Real>(
    p: &mut AttentionParams<T>,
    cache: &CrossAttentionCache<T>,
    dout: &[T],
) -> (Vec<T>, Vec<T>) {
    let dk = p.d_k();
    let dctx = p.wo.backward(&cache.ctx, dout);
    let mut dq = vec![T::zero(); cache.q.len()];
    let mut dk_all = vec![T::zero(); cache.k.len()];
    let mut dv_all = vec![T::zero(); cache.v.len()];
    for (i, qi) in cache.q.chunks_exact(dk).enumerate() {
        let (a, b, c) = attend_backward(qi, &cache.k, &cache.v, p.heads, &cache.weights[i], &dctx[i * dk..(i + 1) * dk]);
        dq[i * dk..(i + 1) * dk].copy_from_slice(&a);
        dk_all.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        dv_all.iter_mut().zip(c).for_each(|(x, y)| *x += y);
    }
    let mut dquery = p.wq.backward(&cache.query, &dq);
    dquery.iter_mut().zip(dout).for_each(|(x, &y)| *x += y);
    let mut dkv = p.wk.backward(&cache.kv, &dk_all);
    let dkv_v = p.wv.backward(&cache.kv, &dv_all);
    dkv.iter_mut().zip(dkv_v).for_each(|(x, y)| *x += y);
    (dquery, dkv)
}
