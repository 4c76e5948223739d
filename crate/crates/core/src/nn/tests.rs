use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::attention::{cross_attention, cross_attention_backward, AttentionParams};
use super::blocks::*;
use super::gradcheck::{check_params, numeric_input_grad, relative_error};
use super::layers::{softmax, BilinearResize, ConvStem, Linear, Mlp2};
use super::loss::*;
use super::model::{FovSource, ToyConfig, ToyModel};
use super::prepare::{pairs_from_synth, PreparedPair};
use super::tensor::Parameterized;
use super::{checkpoint, NnError};
use crate::camera::{Camera, Extrinsics, Intrinsics, Pixel};
use crate::data::PairMode;
use crate::linalg::{Mat3, Vec3};
use crate::selection::gaze_loss;
use crate::synth::{generate, SynthConfig};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randv(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn assert_grads(label: &str, checks: &[(String, f64)]) {
    for (name, err) in checks {
        assert!(*err <= TOL, "{label}: {name} relative error {err:.3e}");
    }
}

fn randomize<M: Parameterized<f64>>(m: &mut M, seed: u64) {
    let mut r = rng(seed);
    m.visit_mut("", &mut |_, t| t.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-0.5..0.5)));
}

#[test]
fn softmax_rows_sum_to_one_and_ignore_shifts() {
    let mut r = rng(1);
    for _ in 0..100 {
        let x = randv(&mut r, 7).iter().map(|v| v * 20.0).collect::<Vec<_>>();
        let p = softmax(&x);
        assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let c = r.gen_range(-50.0..50.0);
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        let q = softmax(&shifted);
        assert!(p.iter().zip(&q).all(|(a, b)| (a - b).abs() <= 1e-12));
    }
}

#[test]
fn linear_mlp_conv_resize_gradients() {
    let mut r = rng(2);
    let x = randv(&mut r, 3 * 5);
    let c = randv(&mut r, 3 * 4);
    let mut lin = Linear::<f64>::new(5, 4, &mut r);
    randomize(&mut lin, 3);
    let dx = lin.backward(&x, &c);
    assert_grads("linear", &check_params(&lin, H, 1, |m| dot(&m.forward(&x), &c)));
    assert!(relative_error(&dx, &numeric_input_grad(&x, H, |x| dot(&lin.forward(x), &c))) <= TOL);

    let mut mlp = Mlp2::<f64>::new(5, 6, 4, &mut r);
    let (_, cache) = mlp.forward(&x);
    let dx = mlp.backward(&cache, &c);
    assert_grads("mlp", &check_params(&mlp, H, 1, |m| dot(&m.forward(&x).0, &c)));
    assert!(relative_error(&dx, &numeric_input_grad(&x, H, |x| dot(&mlp.forward(x).0, &c))) <= TOL);

    let (h, w) = (8, 6);
    let img = randv(&mut r, h * w * 3);
    let mut stem = ConvStem::<f64>::new(3, 4, 5, &mut r);
    let (oh, ow) = ConvStem::<f64>::output_size(h, w);
    assert_eq!((oh, ow), (2, 2));
    let c = randv(&mut r, oh * ow * 5);
    let (_, cache) = stem.forward(&img, h, w);
    let dimg = stem.backward(&cache, &c);
    assert_grads("stem", &check_params(&stem, H, 1, |m| dot(&m.forward(&img, h, w).0, &c)));
    assert!(relative_error(&dimg, &numeric_input_grad(&img, H, |x| dot(&stem.forward(x, h, w).0, &c))) <= TOL);

    let rs = BilinearResize::new((3, 2), (7, 5));
    let src = randv(&mut r, 6);
    let c = randv(&mut r, 35);
    let d = rs.backward(&c);
    assert!(relative_error(&d, &numeric_input_grad(&src, H, |x| dot(&rs.forward(x), &c))) <= TOL);
}

#[test]
fn cross_attention_gradients_and_identities() {
    let mut r = rng(4);
    let (d, dkv, nq, nk) = (8, 6, 3, 5);
    let mut p = AttentionParams::<f64>::new(d, dkv, 8, 2, &mut r).unwrap();
    randomize(&mut p, 5);
    let q = randv(&mut r, nq * d);
    let kv = randv(&mut r, nk * dkv);
    let c = randv(&mut r, nq * d);
    let (_, cache) = cross_attention(&q, &kv, &p).unwrap();
    let (dq, dk) = cross_attention_backward(&mut p, &cache, &c);
    let f = |p: &AttentionParams<f64>, q: &[f64], kv: &[f64]| dot(&cross_attention(q, kv, p).unwrap().0, &c);
    assert_grads("attention", &check_params(&p, H, 1, |m| f(m, &q, &kv)));
    assert!(relative_error(&dq, &numeric_input_grad(&q, H, |x| f(&p, x, &kv))) <= TOL);
    assert!(relative_error(&dk, &numeric_input_grad(&kv, H, |x| f(&p, &q, x))) <= TOL);

    let (out, cache) = cross_attention(&q, &kv[..dkv], &p).unwrap();
    assert!(cache.weights(0).iter().all(|&w| w == 1.0));
    assert_eq!(out.len(), q.len());

    p.zero_output();
    assert_eq!(cross_attention(&q, &kv, &p).unwrap().0, q);
    assert!(matches!(cross_attention(&q[..5], &kv, &p), Err(NnError::ShapeMismatch(_))));
    assert!(AttentionParams::<f64>::new(8, 8, 7, 2, &mut r).is_err());
}

#[test]
fn hia_gradients_symmetry_and_rotation_sensitivity() {
    let mut r = rng(6);
    let d = 8;
    let mut hia = Hia::<f64>::new(d, 2, &mut r).unwrap();
    randomize(&mut hia, 7);
    let (f1, f2) = (randv(&mut r, 4 * d), randv(&mut r, 3 * d));
    let r21 = Mat3::rot_y(0.7) * Mat3::rot_x(-0.2);
    let r12 = r21.transpose();
    let (c1, c2, ce1, ce2) = (randv(&mut r, 4 * d), randv(&mut r, 3 * d), randv(&mut r, d), randv(&mut r, d));
    let obj = |h: &Hia<f64>, a: &[f64], b: &[f64]| {
        let (o, _) = h.forward(a, b, &r21, &r12).unwrap();
        dot(&o.f1, &c1) + dot(&o.f2, &c2) + dot(&o.e1, &ce1) + dot(&o.e2, &ce2)
    };
    let (_, cache) = hia.forward(&f1, &f2, &r21, &r12).unwrap();
    let (d1, d2) = hia.backward(&cache, Some(&c1), Some(&c2), &ce1, &ce2);
    assert_grads("hia", &check_params(&hia, H, 1, |m| obj(m, &f1, &f2)));
    assert!(relative_error(&d1, &numeric_input_grad(&f1, H, |x| obj(&hia, x, &f2))) <= TOL);
    assert!(relative_error(&d2, &numeric_input_grad(&f2, H, |x| obj(&hia, &f1, x))) <= TOL);

    let id = Mat3::identity();
    let (o, _) = hia.forward(&f1, &f1, &id, &id).unwrap();
    assert_eq!(o.f1, o.f2);

    let (a, _) = hia.forward(&f1, &f2, &r21, &r12).unwrap();
    let (b, _) = hia.forward(&f1, &f2, &(Mat3::rot_z(0.05) * r21), &r12).unwrap();
    assert!(relative_error(&a.e1, &b.e1) > 1e-6);

    hia.attn.zero_output();
    let (o, _) = hia.forward(&f1, &f2, &r21, &r12).unwrap();
    assert_eq!((o.f1.as_slice(), o.f2.as_slice()), (f1.as_slice(), f2.as_slice()));
}

fn camera(id: &str, eye: Vec3<f64>, target: Vec3<f64>, w: u32, h: u32) -> Camera<f64> {
    let f = 0.5 * w as f64 / (35f64.to_radians()).tan();
    let k = Intrinsics::new(f, f, (w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0, w, h).unwrap();
    Camera::new(id, k, Extrinsics::look_at(eye, target, Vec3::new(0.0, 1.0, 0.0)).unwrap())
}

#[test]
fn esa_gradients_and_identities() {
    let mut r = rng(8);
    let d = 8;
    let c1 = camera("a", Vec3::new(-1.0, 0.3, 0.0), Vec3::new(0.0, 0.0, 4.0), 16, 12);
    let c2 = camera("b", Vec3::new(1.0, -0.2, 0.5), Vec3::new(0.0, 0.0, 4.0), 16, 12);
    let grid = TokenGrid::with_stride(4, 3, 4);
    let geom = EsaGeometry::from_cameras(&c1, &c2, &grid, &grid, 6).unwrap();
    assert!(geom.covered() > 0);
    let mut esa = Esa::<f64>::new(d, 2, &mut r).unwrap();
    randomize(&mut esa, 9);
    let (s1, s2, c) = (randv(&mut r, 12 * d), randv(&mut r, 12 * d), randv(&mut r, 12 * d));
    let obj = |e: &Esa<f64>, a: &[f64], b: &[f64]| dot(&e.forward(a, b, &geom).unwrap().0, &c);
    let (_, cache) = esa.forward(&s1, &s2, &geom).unwrap();
    let (d1, d2) = esa.backward(&cache, &geom, &c);
    assert_grads("esa", &check_params(&esa, H, 1, |m| obj(m, &s1, &s2)));
    assert!(relative_error(&d1, &numeric_input_grad(&s1, H, |x| obj(&esa, x, &s2))) <= TOL);
    assert!(relative_error(&d2, &numeric_input_grad(&s2, H, |x| obj(&esa, &s1, x))) <= TOL);

    // Back to back: no epipolar line reaches the other image.
    let fwd = camera("f", Vec3::zeros(), Vec3::new(0.0, 0.0, 1.0), 16, 12);
    let back = camera("r", Vec3::new(0.0, 0.0, -0.5), Vec3::new(0.0, 0.0, -2.0), 16, 12);
    let none = EsaGeometry::from_cameras(&fwd, &back, &grid, &grid, 6).unwrap();
    assert_eq!(none.covered(), 0);
    assert_eq!(esa.forward(&s1, &s2, &none).unwrap().0, s1);

    esa.attn.zero_output();
    assert_eq!(esa.forward(&s1, &s2, &geom).unwrap().0, s1);
}

/// Fourier features of the wall point seen at each pixel of a stride-1 grid.
fn wall_features(cam: &Camera<f64>, omegas: &[f64], beta: f64) -> Vec<f64> {
    let (w, h) = cam.intrinsics.size();
    let mut out = Vec::new();
    for v in 0..h {
        for u in 0..w {
            let o = cam.center();
            let dir = cam.world_ray(Pixel::new(u as f64, v as f64));
            let t = (4.0 - o.z) / dir.z;
            let p = o + dir * t;
            for &om in omegas {
                for x in [p.x, p.y] {
                    out.push(beta * (om * x).sin());
                    out.push(beta * (om * x).cos());
                }
            }
        }
    }
    out
}

#[test]
fn esa_attention_peaks_at_the_true_correspondence() {
    let (w, h) = (40, 30);
    let c1 = camera("a", Vec3::new(-0.8, 0.2, 0.0), Vec3::new(0.0, 0.0, 4.0), w, h);
    let c2 = camera("b", Vec3::new(0.9, -0.1, 0.3), Vec3::new(0.1, 0.0, 4.0), w, h);
    let omegas = [0.7, 1.9];
    let d = 4 * omegas.len();
    let grid = TokenGrid::with_stride(w as usize, h as usize, 1);
    let geom = EsaGeometry::from_cameras(&c1, &c2, &grid, &grid, 48).unwrap();
    let mut esa = Esa::<f64>::new(d, 1, &mut rng(10)).unwrap();
    for l in [&mut esa.attn.wq, &mut esa.attn.wk] {
        l.w.fill(0.0);
        l.b.fill(0.0);
        for i in 0..d {
            l.w.data_mut()[i * d + i] = 1.0;
        }
    }
    let (s1, s2) = (wall_features(&c1, &omegas, 3.0), wall_features(&c2, &omegas, 3.0));
    let (_, cache) = esa.forward(&s1, &s2, &geom).unwrap();
    let mut checked = 0;
    for i in 0..grid.len() {
        let (Some(weights), Some(pixels)) = (cache.weights(i), &geom.pixels[i]) else { continue };
        let px: Pixel<f64> = grid.center(i);
        let o = c1.center();
        let dir = c1.world_ray(px);
        let truth = c2.project_world(o + dir * ((4.0 - o.z) / dir.z)).unwrap();
        if !c2.intrinsics.contains(truth) {
            continue;
        }
        let dist = |k: usize| (pixels[k].0 - truth.u).hypot(pixels[k].1 - truth.v);
        let nearest = (0..pixels.len()).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).unwrap();
        let peak = (0..weights.len()).max_by(|&a, &b| weights[a].total_cmp(&weights[b])).unwrap();
        // Bilinear features are exact only at integer pixels, so the peak
        // is resolved to within one grid cell rather than one sample.
        assert!(dist(peak) < 1.0, "token {i}: peak {peak} at {:.3} px, nearest {nearest}", dist(peak));
        checked += 1;
    }
    assert!(checked > 100, "only {checked} tokens had a visible correspondence");
}

#[test]
fn decoder_shapes_range_and_gradients() {
    let mut r = rng(11);
    let d = 8;
    let mut dec = GazeDecoder::<f64>::new(d, 2, (2, 1), &mut r).unwrap();
    randomize(&mut dec, 12);
    let (e, scene, center) = (randv(&mut r, d), randv(&mut r, 2 * d), [0.3, 0.6]);
    let c = randv(&mut r, HEATMAP_SIZE * HEATMAP_SIZE);
    let cl = 0.7;
    let obj = |m: &GazeDecoder<f64>, e: &[f64], s: &[f64]| {
        let (q, _) = m.head_query(e, center);
        let (o, _) = m.decode(&q, s).unwrap();
        dot(&o.heatmap, &c) + cl * o.logit
    };
    let (q, qc) = dec.head_query(&e, center);
    let (out, cache) = dec.decode(&q, &scene).unwrap();
    assert_eq!(out.heatmap.len(), 64 * 64);
    assert!(out.p_in > 0.0 && out.p_in < 1.0);
    assert_eq!(cache.gaze_token().len(), d);
    let (dq, ds) = dec.decode_backward(&cache, &c, cl);
    dec.head_query_backward(&qc, &dq);
    assert_grads("decoder", &check_params(&dec, H, 1, |m| obj(m, &e, &scene)));
    assert!(relative_error(&dq, &numeric_input_grad(&e, H, |x| obj(&dec, x, &scene))) <= TOL);
    assert!(relative_error(&ds, &numeric_input_grad(&scene, H, |x| obj(&dec, &e, x))) <= TOL);

    let big: Vec<f64> = scene.iter().map(|v| v * 1e3).collect();
    let (o, _) = dec.decode(&q, &big).unwrap();
    assert!(o.p_in >= 0.0 && o.p_in <= 1.0 && o.heatmap.iter().all(|v| v.is_finite()));

    dec.attn.zero_output();
    let (_, cache) = dec.decode(&q, &scene).unwrap();
    assert_eq!(cache.gaze_token(), q.as_slice());
    assert!(dec.decode(&q[1..], &scene).is_err());
}

#[test]
fn gaze_head_and_cross_view_transform() {
    let mut r = rng(13);
    let d = 8;
    let mut head = GazeHead::<f64>::new(d, &mut r);
    randomize(&mut head, 14);
    let e = randv(&mut r, d);
    let (cg, cs) = (Vec3::new(0.3, -0.8, 0.5), -0.4);
    let obj = |m: &GazeHead<f64>, e: &[f64]| {
        let (g, ls) = m.forward(e);
        g.dot(cg) + cs * ls
    };
    let de = head.backward(&e, cg, cs);
    assert_grads("gaze head", &check_params(&head, H, 1, |m| obj(m, &e)));
    assert!(relative_error(&de, &numeric_input_grad(&e, H, |x| obj(&head, x))) <= TOL);

    let mut xf = CrossViewTransform::<f64>::new(d, &mut r);
    randomize(&mut xf, 15);
    let rot = Mat3::rot_y(0.4);
    let c = randv(&mut r, d);
    let obj = |m: &CrossViewTransform<f64>, e: &[f64]| dot(&m.forward(e, &rot).unwrap().0, &c);
    let (y, cache) = xf.forward(&e, &rot).unwrap();
    assert_eq!(y.len(), d);
    let de = xf.backward(&cache, &c);
    assert_grads("cross view", &check_params(&xf, H, 1, |m| obj(m, &e)));
    assert!(relative_error(&de, &numeric_input_grad(&e, H, |x| obj(&xf, x))) <= TOL);

    xf.mlp.l1.w.fill(0.0);
    xf.mlp.l2.w.fill(0.0);
    xf.mlp.l2.b.fill(0.0);
    assert_eq!(xf.forward(&e, &rot).unwrap().0, xf.e_pos_out.data());
    assert!(xf.forward(&e[1..], &rot).is_err());
}

#[test]
fn gaussian_target_examples() {
    let m = gaussian_target_heatmap([20.4, 31.9], 3.0f64).unwrap();
    assert_eq!(m[31 * 64 + 20], 1.0);
    assert!((m[31 * 64 + 23] - (-0.5f64).exp()).abs() < 1e-15);
    for (dx, dy) in [(1i64, 0i64), (2, 3), (5, -4)] {
        let at = |x: i64, y: i64| m[((31 + y) * 64 + 20 + x) as usize];
        assert_eq!(at(dx, dy), at(-dx, -dy));
    }
    assert!(matches!(gaussian_target_heatmap([64.0, 3.0], 3.0f64), Err(NnError::OutOfBounds(..))));
    assert!(matches!(gaussian_target_heatmap([-0.1, 3.0], 3.0f64), Err(NnError::OutOfBounds(..))));
}

fn outputs(h: Vec<f64>, logit: f64) -> ModelOutputs<f64> {
    ModelOutputs { heatmap: h, p_in: 1.0 / (1.0 + (-logit).exp()), logit }
}

#[test]
fn loss_examples() {
    let t = gaussian_target_heatmap([10.0, 10.0], 3.0f64).unwrap();
    let perfect = ModelOutputs { heatmap: t.clone(), p_in: 1.0, logit: f64::INFINITY };
    let g = Vec3::new(0.1, 0.2, 0.9);
    let gl = gaze_loss(g, 1.0, g).unwrap();
    let target = ViewTarget { heatmap: Some(t.clone()), inside: true };
    let l = total_loss(&[perfect], &[target.clone()], &[Some(gl)], &LossWeights::default()).unwrap();
    assert!(l.total.abs() <= 1e-15);

    let shifted = outputs(t.iter().map(|v| v + 0.1).collect(), 0.0);
    let w = LossWeights { alpha: 1.0, beta: 0.0, lambda: 0.0 };
    let l = total_loss(&[shifted], &[target], &[None], &w).unwrap();
    assert!((l.total - 0.01).abs() < 1e-12);

    // Out of frame: the heatmap term is masked, in/out still counts.
    let masked = ViewTarget { heatmap: None, inside: false };
    let o = outputs(vec![0.3; 4096], -2.0);
    let l = total_loss(&[o.clone()], &[masked], &[None], &LossWeights::default()).unwrap();
    assert_eq!(l.heatmap, 0.0);
    assert!((l.inout - (1.0 + 2f64.exp()).ln() + 2.0).abs() < 1e-12);
    assert!(l.d_heatmap[0].iter().all(|&v| v == 0.0));
    assert!(total_loss(&[o], &[], &[None], &LossWeights::default()).is_err());
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut r = rng(16);
    let t = gaussian_target_heatmap([30.0, 12.0], 3.0f64).unwrap();
    let targets = [ViewTarget { heatmap: Some(t), inside: true }, ViewTarget { heatmap: None, inside: false }];
    let h0 = randv(&mut r, 4096);
    let h1 = randv(&mut r, 4096);
    let logits = [0.4, -1.3];
    let w = LossWeights::default();
    let f = |h0: &[f64], h1: &[f64], l: [f64; 2]| {
        let o = [outputs(h0.to_vec(), l[0]), outputs(h1.to_vec(), l[1])];
        total_loss(&o, &targets, &[None, None], &w).unwrap().total
    };
    let o = [outputs(h0.clone(), logits[0]), outputs(h1.clone(), logits[1])];
    let l = total_loss(&o, &targets, &[None, None], &w).unwrap();
    assert!(relative_error(&l.d_heatmap[0], &numeric_input_grad(&h0, H, |x| f(x, &h1, logits))) <= TOL);
    assert!(relative_error(&l.d_heatmap[1], &numeric_input_grad(&h1, H, |x| f(&h0, x, logits))) <= TOL);
    let dl = numeric_input_grad(&logits, H, |x| f(&h0, &h1, [x[0], x[1]]));
    assert!(relative_error(&l.d_logit, &dl) <= TOL);
}

fn tiny_config() -> ToyConfig {
    ToyConfig { d: 8, heads: 2, scene_size: (32, 24), head_crop: 8, stem_channels: 4, esa_samples: 6, seed: 3 }
}

fn tiny_pairs(cfg: &ToyConfig) -> Vec<PreparedPair<f64>> {
    let scfg = SynthConfig { seed: 21, camera_count: 3, width: 96, height: 72, ..SynthConfig::default() };
    let scene = generate(&scfg).unwrap();
    pairs_from_synth(&scene, PairMode::Standard, cfg, Some(4)).unwrap()
}

#[test]
fn full_model_gradient_check() {
    let cfg = tiny_config();
    let pairs = tiny_pairs(&cfg);
    assert!(!pairs.is_empty());
    let mut model = ToyModel::<f64>::new(cfg).unwrap();
    let w = LossWeights::default();
    let pair = &pairs[0];
    model.zero_grad();
    model.train_pair(&pair.input, &pair.target, &w, FovSource::GroundTruth).unwrap();
    let loss = |m: &ToyModel<f64>| {
        let (out, _) = m.forward(&pair.input, Some(pair.target.gaze)).unwrap();
        m.pair_loss(&out, &pair.target, &w).unwrap().0.total
    };
    let checks = check_params(&model, H, 3, loss);
    // The cross-view transform is not on the standard-pair path.
    for (name, err) in &checks {
        assert!(*err <= TOL, "{name}: {err:.3e}");
    }
}

#[test]
fn model_is_deterministic_and_checkpoints_round_trip() {
    let cfg = tiny_config();
    let pairs = tiny_pairs(&cfg);
    let model = ToyModel::<f64>::new(cfg).unwrap();
    let (a, _) = model.forward(&pairs[0].input, None).unwrap();
    let (b, _) = model.forward(&pairs[0].input, None).unwrap();
    assert_eq!(a.outputs, b.outputs);
    assert_eq!(a.fov, b.fov);

    let bytes = checkpoint::encode(&model);
    assert_eq!(&bytes[..4], b"MVGZ");
    let mut other = ToyModel::<f64>::new(ToyConfig { seed: 99, ..cfg }).unwrap();
    checkpoint::load_into(&mut other, &bytes).unwrap();
    let mut back = Vec::new();
    other.visit("", &mut |_, t| back.extend_from_slice(t.data()));
    let mut orig = Vec::new();
    model.visit("", &mut |_, t| orig.extend(t.data().iter().map(|&v| v as f32 as f64)));
    assert_eq!(back, orig);

    assert!(checkpoint::load_into(&mut other, &bytes[..bytes.len() - 1]).is_err());
    let wider = ToyModel::<f64>::new(ToyConfig { d: 12, ..cfg }).unwrap();
    assert!(checkpoint::load_into(&mut other, &checkpoint::encode(&wider)).is_err());
}
