use proptest::prelude::*;

use mvgaze_core::camera::{
    epipolar_segment, fundamental_matrix, relative_rotation, sample_epipolar, transform_point, triangulate, Camera,
    EpipolarLine, Extrinsics, Intrinsics, Pixel,
};
use mvgaze_core::data::{categorize, enumerate_pairs, PairMode, ScenePack, Visibility};
use mvgaze_core::depth::{pseudo_pointcloud, ransac_scale_shift, AbsoluteDepthMap, DepthMap, PixelMask, RansacConfig};
use mvgaze_core::eval::{aggregate_by_primary, decode_heatmap, normalized_l2, Category, EvalRecord};
use mvgaze_core::gaze::{apply_decay, fov_heatmap, DecayConfig, EyeLocation};
use mvgaze_core::linalg::{Mat3, Vec3};
use mvgaze_core::nn::gaussian_target_heatmap;
use mvgaze_core::nn::layers::softmax;
use mvgaze_core::selection::{gaze_loss, select_and_transfer, GazePrediction};
use mvgaze_core::synth::{generate, SynthConfig};

fn vec3(lo: f64, hi: f64) -> impl Strategy<Value = Vec3<f64>> {
    (lo..hi, lo..hi, lo..hi).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn direction() -> impl Strategy<Value = Vec3<f64>> {
    vec3(-1.0, 1.0).prop_filter_map("nonzero", |v| (v.norm() > 0.1).then(|| v * (1.0 / v.norm())))
}

fn rotation() -> impl Strategy<Value = Mat3<f64>> {
    (direction(), 0.0..std::f64::consts::PI).prop_map(|(axis, angle)| Mat3::from_axis_angle(axis, angle))
}

fn intrinsics() -> impl Strategy<Value = Intrinsics<f64>> {
    (200.0..900.0f64, 0.9..1.1f64, -20.0..20.0f64, -20.0..20.0f64)
        .prop_map(|(f, aspect, dx, dy)| Intrinsics::new(f, f * aspect, 319.5 + dx, 239.5 + dy, 640, 480).unwrap())
}

/// Camera on a sphere of radius 3–6 around the origin, looking near it.
fn orbit_camera() -> impl Strategy<Value = Camera<f64>> {
    (intrinsics(), direction(), 3.0..6.0f64, vec3(-0.3, 0.3)).prop_filter_map("valid pose", |(k, dir, radius, look)| {
        let center = dir * radius;
        let up = if dir.y.abs() > 0.95 { Vec3::new(1.0, 0.0, 0.0) } else { Vec3::new(0.0, 1.0, 0.0) };
        Extrinsics::look_at(center, look, up).ok().map(|e| Camera::new("c", k, e))
    })
}

fn is_rotation(m: &Mat3<f64>, tol: f64) -> bool {
    (m.transpose() * *m).max_abs_diff(&Mat3::identity()) <= tol && (m.determinant() - 1.0).abs() <= tol
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn backproject_then_project_is_identity(cam in orbit_camera(), u in 0.0..639.0f64, v in 0.0..479.0f64, z in 0.05..50.0f64) {
        let px = Pixel::new(u, v);
        let back = cam.project(cam.backproject(px, z).unwrap()).unwrap();
        prop_assert!(back.distance(px) <= 1e-9);
    }

    #[test]
    fn relative_rotation_is_a_rotation(r1 in rotation(), r2 in rotation(), t1 in vec3(-5.0, 5.0), t2 in vec3(-5.0, 5.0)) {
        let (e1, e2) = (Extrinsics::new(r1, t1).unwrap(), Extrinsics::new(r2, t2).unwrap());
        prop_assert!(is_rotation(&relative_rotation(&e1, &e2), 1e-12));
    }

    #[test]
    fn transform_point_round_trips(a in orbit_camera(), b in orbit_camera(), p in vec3(-3.0, 3.0)) {
        let back = transform_point(&b, &a, transform_point(&a, &b, p));
        prop_assert!((back - p).norm() <= 1e-9);
    }

    #[test]
    fn correspondences_satisfy_the_epipolar_constraint(a in orbit_camera(), b in orbit_camera(), x in vec3(-1.0, 1.0)) {
        prop_assume!((a.center() - b.center()).norm() > 0.5);
        let (Ok(p1), Ok(p2)) = (a.project_world(x), b.project_world(x)) else { return Ok(()) };
        let f = fundamental_matrix(&a, &b).unwrap();
        let residual = p2.homogeneous().dot(f * p1.homogeneous()).abs() / f.frobenius_norm();
        prop_assert!(residual < 1e-6);
    }

    #[test]
    fn epipolar_samples_lie_on_the_line_inside_the_image(
        a in orbit_camera(), b in orbit_camera(), u in 0.0..639.0f64, v in 0.0..479.0f64, n in 2usize..64,
    ) {
        prop_assume!((a.center() - b.center()).norm() > 0.5);
        let f = fundamental_matrix(&a, &b).unwrap();
        let px = Pixel::new(u, v);
        let Some(seg) = epipolar_segment(&f, px, &b.intrinsics) else { return Ok(()) };
        let line = EpipolarLine::from_fundamental(&f, px).unwrap();
        for s in sample_epipolar(&seg, n).unwrap() {
            prop_assert!(line.distance(s) <= 1e-9, "off the line by {}", line.distance(s));
            prop_assert!(s.u >= -1e-9 && s.v >= -1e-9 && s.u <= 639.0 + 1e-9 && s.v <= 479.0 + 1e-9);
        }
    }

    #[test]
    fn triangulation_recovers_clean_points(a in orbit_camera(), b in orbit_camera(), x in vec3(-1.0, 1.0)) {
        prop_assume!((a.center() - b.center()).norm() > 0.5);
        let (Ok(p1), Ok(p2)) = (a.project_world(x), b.project_world(x)) else { return Ok(()) };
        if let Ok(t) = triangulate(&a, p1, &b, p2) {
            prop_assert!((t.point - x).norm() <= 1e-6);
        }
    }
}

fn small_depth(w: usize, h: usize, seed: u64) -> DepthMap<f64> {
    let s = seed as f64;
    DepthMap::from_fn(w, h, |u, v| 1.0 + 0.5 * ((u as f64 * 0.37 + s).sin() + 1.0) + 0.02 * v as f64).unwrap()
}

fn camera_for(w: u32, h: u32) -> Camera<f64> {
    let k = Intrinsics::new(30.0, 30.0, (w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0, w, h).unwrap();
    Camera::new("c", k, Extrinsics::identity())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fov_is_invariant_to_depth_scale(seed in 0u64..1000, k in 0.01..100.0f64, g in direction(), eu in 0usize..24, ev in 0usize..18) {
        let (w, h) = (24, 18);
        let cam = camera_for(w as u32, h as u32);
        let d = small_depth(w, h, seed);
        let eye_px = Pixel::new(eu as f64, ev as f64);
        let run = |d: &DepthMap<f64>| {
            let cloud = pseudo_pointcloud(&cam, d).unwrap();
            let eye = EyeLocation::from_depth(&cam, d, eye_px).unwrap();
            fov_heatmap(&cloud, &eye, g, &DecayConfig::default()).unwrap()
        };
        let (a, b) = (run(&d), run(&d.scaled(k).unwrap()));
        prop_assert!(a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn fov_is_rotation_equivariant_and_bounded(seed in 0u64..1000, rot in rotation(), g in direction(), eu in 0usize..24, ev in 0usize..18) {
        let (w, h) = (24, 18);
        let cam = camera_for(w as u32, h as u32);
        let d = small_depth(w, h, seed);
        let cloud = pseudo_pointcloud(&cam, &d).unwrap();
        let eye = EyeLocation::from_depth(&cam, &d, Pixel::new(eu as f64, ev as f64)).unwrap();
        let cfg = DecayConfig::default();
        let base = fov_heatmap(&cloud, &eye, g, &cfg).unwrap();
        prop_assert!(base.values.iter().all(|v| (0.0..=1.0).contains(v)));

        // Rotating the scene and the gaze together leaves every cosine unchanged.
        let eye_r = rot * eye.p3;
        let cosine = |p: Vec3<f64>, e: Vec3<f64>, g: Vec3<f64>| {
            let v = p - e;
            apply_decay((v.dot(g) / (v.norm() * g.norm())).clamp(0.0, 1.0), &cfg)
        };
        for vv in 0..h {
            for uu in 0..w {
                if (uu, vv) == (eu, ev) {
                    continue;
                }
                let p = cloud.get(uu, vv);
                let rotated = cosine(rot * p, eye_r, rot * g);
                prop_assert!((rotated - base.get(uu, vv)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn decay_is_monotone(a in 0.0..1.0f64, b in 0.0..1.0f64, gamma in 0.1..50.0f64, threshold in 0.1..0.99f64) {
        let cfg = DecayConfig { threshold, gamma };
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(apply_decay(lo, &cfg) <= apply_decay(hi, &cfg));
        prop_assert!((0.0..=1.0).contains(&apply_decay(hi, &cfg)));
    }

    #[test]
    fn ransac_is_reproducible_and_exact_on_clean_data(seed in 0u64..10_000, a in 0.2..5.0f64, b in -0.5..0.5f64) {
        let (w, h) = (32, 24);
        let abs = small_depth(w, h, seed);
        let rel = DepthMap::new(w, h, abs.iter().map(|d| (d - b) / a).collect()).unwrap();
        let reference = AbsoluteDepthMap(abs);
        let mask = PixelMask::filled(w, h, true);
        let cfg = RansacConfig { iterations: 50, ..RansacConfig::new(seed) };
        let x = ransac_scale_shift(&rel, &reference, &mask, &cfg).unwrap();
        let y = ransac_scale_shift(&rel, &reference, &mask, &cfg).unwrap();
        prop_assert_eq!(x.a.to_bits(), y.a.to_bits());
        prop_assert_eq!(x.b.to_bits(), y.b.to_bits());
        prop_assert!(x.inlier_rms <= 1e-9, "rms {}", x.inlier_rms);
        prop_assert!(x.a > 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn gaze_loss_ignores_vector_lengths(g in direction(), gt in direction(), s in 0.1..3.0f64, k1 in 0.1..10.0f64, k2 in 0.1..10.0f64) {
        let a = gaze_loss(g, s, gt).unwrap().value;
        let b = gaze_loss(g * k1, s, gt * k2).unwrap().value;
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn selection_preserves_norms_and_is_idempotent(
        r1 in rotation(), r2 in rotation(), g1 in vec3(-3.0, 3.0), g2 in vec3(-3.0, 3.0), s1 in 0.05..2.0f64, s2 in 0.05..2.0f64,
    ) {
        prop_assume!(g1.norm() > 1e-3 && g2.norm() > 1e-3);
        let (e1, e2) = (Extrinsics::new(r1, Vec3::zeros()).unwrap(), Extrinsics::new(r2, Vec3::zeros()).unwrap());
        let (p1, p2) = (GazePrediction::new("a", g1, s1).unwrap(), GazePrediction::new("b", g2, s2).unwrap());
        let sel = select_and_transfer(&p1, &p2, &e1, &e2);
        prop_assert_eq!(sel.chosen_sigma, s1.min(s2));
        let (src, dst) = if s2 < s1 { (g2, sel.g1) } else { (g1, sel.g2) };
        if sel.transferred {
            prop_assert!((dst.norm() - src.norm()).abs() <= 1e-12 * src.norm());
        }
        let q1 = GazePrediction::new("a", sel.g1, s1).unwrap();
        let q2 = GazePrediction::new("b", sel.g2, s2).unwrap();
        let again = select_and_transfer(&q1, &q2, &e1, &e2);
        prop_assert!((again.g1 - sel.g1).norm() <= 1e-12 * sel.g1.norm().max(1.0));
        prop_assert!((again.g2 - sel.g2).norm() <= 1e-12 * sel.g2.norm().max(1.0));
        prop_assert_eq!(again.chosen_view, sel.chosen_view);
    }

    #[test]
    fn normalized_l2_is_a_metric(a in prop::array::uniform2(0.0..1.0f64), b in prop::array::uniform2(0.0..1.0f64), c in prop::array::uniform2(0.0..1.0f64)) {
        prop_assert_eq!(normalized_l2(a, a), 0.0);
        prop_assert_eq!(normalized_l2(a, b), normalized_l2(b, a));
        prop_assert!(normalized_l2(a, c) <= normalized_l2(a, b) + normalized_l2(b, c) + 1e-15);
        prop_assert!(normalized_l2(a, b) <= 2f64.sqrt());
    }

    #[test]
    fn gaussian_target_decodes_to_its_cell(x in 0.0..64.0f64, y in 0.0..64.0f64) {
        let heat = gaussian_target_heatmap([x, y], 3.0).unwrap();
        let p = decode_heatmap(&heat, 64, 64);
        prop_assert!(normalized_l2(p, [x / 64.0, y / 64.0]) <= 1.0 / 64.0);
    }

    #[test]
    fn softmax_sums_to_one_and_ignores_shifts(x in prop::collection::vec(-30.0..30.0f64, 1..16), c in -100.0..100.0f64) {
        let p = softmax(&x);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        prop_assert!(p.iter().zip(softmax(&shifted)).all(|(a, b)| (a - b).abs() <= 1e-12));
    }
}

fn records() -> impl Strategy<Value = Vec<EvalRecord<f64>>> {
    let record = (0usize..5, 0usize..3, prop::array::uniform2(0.0..1.0f64), 0.0..1.0f64, any::<bool>(), 0usize..4)
        .prop_map(|(img, cam, pt, p_in, gt_in, cat)| EvalRecord {
            primary_image_id: format!("img{img}"),
            reference_camera_id: format!("cam{cam}"),
            predicted_point: pt,
            gt_point: gt_in.then_some([0.5, 0.25]),
            p_in,
            gt_in,
            category: Category::ALL[cat],
            predicted_gaze: None,
            gt_gaze: None,
        });
    prop::collection::vec(record, 1..24)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn aggregation_ignores_record_order(recs in records(), perm_seed in any::<u64>()) {
        let mut shuffled = recs.clone();
        let n = shuffled.len();
        let mut s = perm_seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        let (a, b) = (aggregate_by_primary(&recs), aggregate_by_primary(&shuffled));
        match (a, b) {
            (Ok(a), Ok(b)) => {
                let close = |x: Option<f64>, y: Option<f64>| match (x, y) {
                    (Some(x), Some(y)) => (x - y).abs() <= 1e-12,
                    (None, None) => true,
                    _ => false,
                };
                for (x, y) in a.rows().zip(b.rows()) {
                    prop_assert_eq!(x.category, y.category);
                    prop_assert_eq!(x.record_count, y.record_count);
                    prop_assert!(close(x.dist_mean, y.dist_mean));
                    prop_assert!(close(x.ap, y.ap));
                }
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "one order failed and the other did not"),
        }
    }
}

fn small_scene() -> impl Strategy<Value = (u64, usize)> {
    (0u64..10_000, 3usize..6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn synthetic_scenes_are_geometrically_consistent((seed, cams) in small_scene()) {
        let cfg = SynthConfig { seed, camera_count: cams, width: 96, height: 72, instants: 2, ..SynthConfig::default() };
        let Ok(scene) = generate(&cfg) else { return Ok(()) };
        for frame in &scene.frames {
            for view in &frame.views {
                let cam = &scene.cameras[view.camera_index];
                if let Some(px) = view.target_px {
                    prop_assert!(cam.project_world(frame.target).unwrap().distance(px) <= 1e-9);
                }
                if let Some(px) = view.eye_px {
                    prop_assert!(cam.project_world(frame.eye).unwrap().distance(px) <= 1e-9);
                }
            }
            let seen: Vec<_> = frame.views.iter().filter(|v| v.target_visibility.in_frame() && v.target_px.is_some()).collect();
            for (i, a) in seen.iter().enumerate() {
                for b in &seen[i + 1..] {
                    let (ca, cb) = (&scene.cameras[a.camera_index], &scene.cameras[b.camera_index]);
                    if let Ok(t) = triangulate(ca, a.target_px.unwrap(), cb, b.target_px.unwrap()) {
                        prop_assert!((t.point - frame.target).norm() <= 1e-6);
                    }
                }
            }
        }

        let pack = &scene.pack;
        let back = ScenePack::<f64>::from_json(&pack.to_json().unwrap()).unwrap();
        prop_assert_eq!(&back, pack);

        for mode in [PairMode::Standard, PairMode::CrossView] {
            let pairs = enumerate_pairs(pack, mode);
            prop_assert_eq!(&pairs, &enumerate_pairs(pack, mode));
            let index = |id: &str| pack.cameras.iter().position(|c| c.id == id).unwrap();
            let keys: Vec<_> = pairs
                .iter()
                .map(|p| (p.instant, index(&p.primary.camera.id), index(&p.reference.camera.id)))
                .collect();
            prop_assert!(keys.windows(2).all(|w| w[0] <= w[1]));
            for p in &pairs {
                let r = &p.reference.annotation;
                let matching = Category::ALL
                    .iter()
                    .filter(|c| **c == Category::from_visibility(r.head_visible(), r.visibility.in_frame()))
                    .count();
                prop_assert_eq!(matching, 1);
                prop_assert_eq!(categorize(p), Category::from_visibility(r.head_visible(), r.visibility.in_frame()));
            }
        }
    }
}

/// Penetration depth of `p` into the box (negative outside).
fn box_depth(b: &mvgaze_core::synth::Aabb, p: Vec3<f64>) -> f64 {
    (0..3).map(|k| (p[k] - b.min[k]).min(b.max[k] - p[k])).fold(f64::INFINITY, f64::min)
}

#[derive(Debug, PartialEq)]
enum March {
    Clear,
    Blocked,
    Unsure,
}

/// Dense march from `from` to `to` that ignores nothing but the last `skip` metres.
fn march(scene: &mvgaze_core::synth::SynthScene, head: Option<&mvgaze_core::synth::Sphere>, from: Vec3<f64>, to: Vec3<f64>, skip: f64) -> March {
    const STEPS: usize = 4000;
    const MARGIN: f64 = 1e-3;
    let len = (to - from).norm();
    let mut out = March::Clear;
    for i in 1..STEPS {
        let s = i as f64 / STEPS as f64;
        let p = from + (to - from) * s;
        let mut depth = scene.room.occluders.iter().map(|b| box_depth(b, p)).fold(f64::NEG_INFINITY, f64::max);
        if let Some(h) = head {
            depth = depth.max(h.radius - (p - h.center).norm());
        }
        let near_end = (1.0 - s) * len < skip;
        if depth > MARGIN && !near_end {
            return March::Blocked;
        }
        if depth > -MARGIN {
            out = March::Unsure;
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn visibility_agrees_with_a_dense_ray_march((seed, cams) in small_scene(), occluders in 1usize..5, hfov in 40.0..75.0f64) {
        let cfg = SynthConfig { seed, camera_count: cams, width: 96, height: 72, instants: 3, occluder_count: occluders, hfov_deg: hfov, ..SynthConfig::default() };
        let Ok(scene) = generate(&cfg) else { return Ok(()) };
        for frame in &scene.frames {
            for view in &frame.views {
                let cam = &scene.cameras[view.camera_index];
                let center = cam.center();
                if view.target_visibility.in_frame() {
                    let expect = match march(&scene, Some(&frame.head), center, frame.target, 1e-2) {
                        March::Clear => Some(Visibility::Inside),
                        March::Blocked => Some(Visibility::Occluded),
                        March::Unsure => None,
                    };
                    if let Some(e) = expect {
                        prop_assert_eq!(view.target_visibility, e);
                    }
                }
                let head_px = cam.project_world(frame.head.center).ok().filter(|p| cam.intrinsics.contains(*p));
                if head_px.is_some() {
                    match march(&scene, None, center, frame.head.center, frame.head.radius) {
                        March::Clear => prop_assert!(view.head_visible),
                        March::Blocked => prop_assert!(!view.head_visible),
                        March::Unsure => {}
                    }
                } else {
                    prop_assert!(!view.head_visible);
                }
            }
        }
    }
}
