use nalgebra::Vector3;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use acwm::action_map::{layout_glyph, render_action_map, GlyphStyle};
use acwm::backend::SparseMemory;
use acwm::codec::{Latent, LatentCodec};
use acwm::conditioning::{delta_matrix, DeltaResampler, CONDITION_CHANNELS};
use acwm::diffusion::make_linear_schedule;
use acwm::eval_harness::{aggregate_sr, majority, run_episode, EpisodeConfig, Label, Verdict};
use acwm::geometry::{
    compute_ray_map, delta_action, interpolate_action, project, ActionState, ArmId, CameraExtrinsics, RigidTransform, Rpy,
};
use acwm::image::Frame;
use acwm::learned::LearnedConfig;
use acwm::nn::ParamStore;
use acwm::world::{default_rig, render_views, step, NoiseLevel, OracleBackend, SceneConfig, ScriptedPolicy, ZeroPolicy};

fn pose() -> impl Strategy<Value = RigidTransform> {
    (prop::array::uniform3(-1.0..1.0f64), -3.1..3.1f64, -1.5..1.5f64, -3.1..3.1f64)
        .prop_map(|(t, r, p, y)| RigidTransform::from_rpy(Vector3::from(t), Rpy::new(r, p, y)))
}

fn action() -> impl Strategy<Value = ActionState> {
    (prop::array::uniform3(-0.3..0.3f64), -3.0..3.0f64, -1.2..1.2f64, -3.0..3.0f64, 0.0..=1.0f64)
        .prop_map(|(p, r, pi, y, o)| ActionState::new(ArmId::Left, Vector3::from(p), Rpy::new(r, pi, y), o))
}

fn max_abs_diff(a: &RigidTransform, b: &RigidTransform) -> f64 {
    (a.rotation - b.rotation).abs().max().max((a.translation - b.translation).abs().max())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn compose_inverse_and_associativity(a in pose(), b in pose(), c in pose()) {
        prop_assert!(max_abs_diff(&a.compose(&a.inverse()), &RigidTransform::identity()) < 1e-12);
        prop_assert!(max_abs_diff(&a.compose(&b).compose(&c), &a.compose(&b.compose(&c))) < 1e-12);
    }

    #[test]
    fn interpolation_is_symmetric(a0 in action(), a1 in action(), s in 0.0..=1.0f64) {
        let f = interpolate_action(&a0, &a1, s).unwrap();
        let b = interpolate_action(&a1, &a0, 1.0 - s).unwrap();
        prop_assert!((f.pose.position - b.pose.position).abs().max() < 1e-12);
        let d = delta_action(&f, &b).unwrap();
        prop_assert!(d.d_rpy.iter().all(|v| v.abs() < 1e-12));
        prop_assert!((f.openness - b.openness).abs() < 1e-12);
    }

    #[test]
    fn delta_scales_linearly(a0 in action(), dp in prop::array::uniform3(-0.2..0.2f64), dr in prop::array::uniform3(-0.5..0.5f64), s in 0.0..0.5f64, k in 1u32..4) {
        // small rotation offsets keep every rpy component away from the wrap
        let mut a1 = a0;
        a1.pose.position += Vector3::from(dp);
        a1.pose.rpy = Rpy::new(a0.pose.rpy.roll * 0.2 + dr[0], a0.pose.rpy.pitch * 0.2 + dr[1], a0.pose.rpy.yaw * 0.2 + dr[2]);
        let mut a0 = a0;
        a0.pose.rpy = Rpy::new(a0.pose.rpy.roll * 0.2, a0.pose.rpy.pitch * 0.2, a0.pose.rpy.yaw * 0.2);
        let delta = 0.05;
        let base = interpolate_action(&a0, &a1, s).unwrap();
        let d1 = delta_action(&interpolate_action(&a0, &a1, s + delta).unwrap(), &base).unwrap().to_vector();
        let dk = delta_action(&interpolate_action(&a0, &a1, s + delta * k as f64).unwrap(), &base).unwrap().to_vector();
        for i in 0..7 {
            prop_assert!((dk[i] - k as f64 * d1[i]).abs() < 1e-9, "component {i}: {} vs {} x {}", dk[i], k, d1[i]);
        }
    }

    #[test]
    fn ray_maps_unit_and_static_over_time(a in action(), b in action()) {
        let rig = default_rig();
        let head = &rig.views[0];
        let anchor = RigidTransform::identity();
        let c2w_a = head.extrinsics.camera_to_world(Some(&vec![a])).unwrap();
        let c2w_b = head.extrinsics.camera_to_world(Some(&vec![b])).unwrap();
        let ma = compute_ray_map(&head.camera, &c2w_a, &anchor, 10, 16);
        let mb = compute_ray_map(&head.camera, &c2w_b, &anchor, 10, 16);
        prop_assert_eq!(&ma, &mb);
        prop_assert!(ma.directions.iter().all(|d| (d.norm() - 1.0).abs() < 1e-12));
        let wrist = &rig.views[1];
        let wa = compute_ray_map(&wrist.camera, &wrist.extrinsics.camera_to_world(Some(&vec![a])).unwrap(), &anchor, 10, 16);
        let wb = compute_ray_map(&wrist.camera, &wrist.extrinsics.camera_to_world(Some(&vec![b])).unwrap(), &anchor, 10, 16);
        prop_assert!(wa.directions.iter().all(|d| (d.norm() - 1.0).abs() < 1e-12));
        if a.pose != b.pose {
            prop_assert_ne!(wa, wb);
        }
    }

    #[test]
    fn action_map_is_deterministic_and_centered(a in action()) {
        let rig = default_rig();
        let head = &rig.views[0];
        let CameraExtrinsics::Static(c2w) = head.extrinsics else { unreachable!() };
        let style = GlyphStyle::default();
        let f = vec![a];
        prop_assert_eq!(render_action_map(&f, &head.camera, &c2w, &style), render_action_map(&f, &head.camera, &c2w, &style));
        if let Ok(l) = layout_glyph(&a, &head.camera, &c2w, &style) {
            let p = project(&a.pose.position, &head.camera, &c2w).unwrap();
            prop_assert_eq!(l.center, (p.u, p.v));
        }
    }

    #[test]
    fn two_arm_maps_use_disjoint_colours(l in action(), r in action()) {
        let rig = default_rig();
        let head = &rig.views[0];
        let CameraExtrinsics::Static(c2w) = head.extrinsics else { unreachable!() };
        let style = GlyphStyle::default();
        let mut r = r;
        r.arm = ArmId::Right;
        let colours = |f: &Vec<ActionState>| {
            let img = render_action_map(f, &head.camera, &c2w, &style);
            let mut set = std::collections::BTreeSet::new();
            for y in 0..img.height {
                for x in 0..img.width {
                    let c = img.get(x, y);
                    if c != [0, 0, 0] {
                        set.insert(c);
                    }
                }
            }
            set
        };
        let left = colours(&vec![l]);
        let right = colours(&vec![r]);
        prop_assert!(left.is_disjoint(&right));
    }

    #[test]
    fn codec_is_linear_before_clamp(seed in any::<u64>(), a in -2.0..2.0f64, b in -2.0..2.0f64) {
        use rand::Rng;
        let codec = LatentCodec::new(7);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut frame = || {
            let mut f = Frame::zeros(32, 16);
            f.data.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
            f
        };
        let (x, y) = (frame(), frame());
        let mut mix = Frame::zeros(32, 16);
        for i in 0..mix.data.len() {
            mix.data[i] = a * x.data[i] + b * y.data[i];
        }
        let (ex, ey, em) = (codec.encode(&x).unwrap(), codec.encode(&y).unwrap(), codec.encode(&mix).unwrap());
        for i in 0..em.data.len() {
            prop_assert!((em.data[i] - (a * ex.data[i] + b * ey.data[i])).abs() < 1e-6);
        }
        let once = codec.decode(&ex).unwrap();
        let twice = codec.decode(&codec.encode(&once).unwrap()).unwrap();
        prop_assert!(x.mean_abs_diff(&once) + 1e-12 >= once.mean_abs_diff(&twice));
        let zero = Latent::zeros(ex.height, ex.width);
        prop_assert_eq!(zero.data.len(), ex.data.len());
    }

    #[test]
    fn delta_tokens_translation_invariant(
        pts in prop::collection::vec(prop::array::uniform3(-256i32..256), 3..8),
        off in prop::array::uniform3(-256i32..256),
    ) {
        // dyadic coordinates make the offset additions exact
        let q = |v: i32| v as f64 / 1024.0;
        let mk = |p: &[i32; 3], o: &[i32; 3]| {
            vec![ActionState::new(ArmId::Left, Vector3::new(q(p[0] + o[0]), q(p[1] + o[1]), q(p[2] + o[2])), Rpy::new(0.5, 0.25, -0.75), 1.0)]
        };
        let base: Vec<_> = pts.iter().map(|p| mk(p, &[0, 0, 0])).collect();
        let moved: Vec<_> = pts.iter().map(|p| mk(p, &off)).collect();
        prop_assert_eq!(delta_matrix(&base).unwrap(), delta_matrix(&moved).unwrap());
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = DeltaResampler::new(&mut store, "delta", 7, 16, 4, &mut rng);
        prop_assert_eq!(r.encode(&store, &base).unwrap(), r.encode(&store, &moved).unwrap());
    }

    #[test]
    fn schedule_identity(t in 1usize..=1000) {
        let s = make_linear_schedule(1000, 0.00085, 0.012).unwrap();
        let ab = s.alpha_bar(t);
        prop_assert!((ab.sqrt().powi(2) + (1.0 - ab) - 1.0).abs() < 1e-15);
        if t > 1 {
            prop_assert!(ab < s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn v_round_trip_any_shape(n in 1usize..64, t in 1usize..=1000, seed in any::<u64>()) {
        use rand_distr::{Distribution, StandardNormal};
        let s = make_linear_schedule(1000, 0.00085, 0.012).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = || -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let (z0, eps) = (v(), v());
        let zt = s.q_sample(&z0, t, &eps).unwrap();
        let back = s.predict_z0_from_v(&zt, &s.v_target(&z0, &eps, t), t);
        prop_assert!(z0.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn world_is_deterministic_and_conserves_objects(
        moves in prop::collection::vec((prop::array::uniform3(-0.02..0.02f64), prop::bool::ANY), 1..40),
        seed in 0u64..50,
    ) {
        let scene = SceneConfig::randomized(seed);
        let rig = default_rig();
        let mut s = scene.initial_state();
        let n = s.objects.len();
        let mut a = s.gripper;
        for (d, close) in &moves {
            a.pose.position += Vector3::from(*d);
            a.openness = if *close { 0.1 } else { 1.0 };
            let s1 = step(&s, &a, &scene.rules).unwrap();
            let s2 = step(&s, &a, &scene.rules).unwrap();
            prop_assert_eq!(&s1, &s2);
            prop_assert_eq!(render_views(&s1, &scene, &rig).unwrap(), render_views(&s2, &scene, &rig).unwrap());
            s = s1;
            prop_assert_eq!(s.objects.len(), n);
            prop_assert!(s.objects.iter().filter(|o| o.attached.is_some()).count() <= 1);
            for o in s.objects.iter().filter(|o| o.attached.is_none()) {
                prop_assert!(o.position.z <= s.table_height + o.half_extent + 1e-12);
            }
        }
    }

    #[test]
    fn sr_and_majority_ignore_order(labels in prop::collection::vec(prop::collection::vec(prop::bool::ANY, 1..5), 1..8), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lab = |b: bool| if b { Label::Success } else { Label::Failure };
        let ids: Vec<String> = (0..labels.len()).map(|i| format!("r{i}")).collect();
        let mut verdicts = Vec::new();
        for (i, ls) in labels.iter().enumerate() {
            let mut shuffled: Vec<Label> = ls.iter().map(|b| lab(*b)).collect();
            let m = majority(&shuffled);
            shuffled.shuffle(&mut rng);
            prop_assert_eq!(majority(&shuffled), m);
            for (e, b) in ls.iter().enumerate() {
                verdicts.push(Verdict { rollout_id: ids[i].clone(), evaluator: format!("e{e}"), label: lab(*b), timestamp: 0 });
            }
        }
        let a = aggregate_sr(&ids, &verdicts).unwrap();
        let (mut ids2, mut v2) = (ids.clone(), verdicts.clone());
        ids2.shuffle(&mut rng);
        v2.shuffle(&mut rng);
        prop_assert_eq!(a, aggregate_sr(&ids2, &v2).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn episodes_are_deterministic_and_terminate_soundly(seed in 0u64..1000, sigma in 0.0..0.03f64, zero in prop::bool::ANY) {
        let scene = SceneConfig::randomized(seed);
        let rig = acwm::geometry::CameraRig { views: vec![default_rig().views[0].clone()] };
        let cfg = EpisodeConfig::default();
        let run = || {
            let s0 = scene.initial_state();
            let mut oracle = OracleBackend::new(scene.clone(), rig.clone());
            let init = oracle.observe().unwrap();
            let mut policy: Box<dyn acwm::world::Policy> = if zero {
                Box::new(ZeroPolicy { chunk: 16 })
            } else {
                Box::new(ScriptedPolicy::new(&scene, &s0, NoiseLevel::Gaussian(sigma), seed, 16).unwrap())
            };
            run_episode("p", policy.as_mut(), &mut oracle, init, vec![s0.gripper], &scene.task, &cfg).unwrap()
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(a.content_hash(), b.content_hash());
        let n = a.chunks.len();
        prop_assert!(a.chunks[..n - 1].iter().all(|c| c.mean_delta_norm >= cfg.eps_term));
    }
}

#[test]
fn dropout_zeroes_all_condition_channels() {
    let config = LearnedConfig::default();
    let builder = config.builder(default_rig());
    let scene = SceneConfig::default();
    let oracle = OracleBackend::new(scene.clone(), default_rig());
    let frames = oracle.observe().unwrap();
    let a = vec![scene.gripper_start];
    let mut b = a.clone();
    b[0].pose.position.z += 0.05;
    let cond = builder.build(&frames, &a, &[a.clone(), b], &SparseMemory::new(4)).unwrap();
    let dropped = cond.dropped_copy();
    let noisy = Latent::zeros(cond.height, cond.width);
    for v in 0..cond.views {
        for k in 0..cond.frames {
            let full = cond.bundle(&noisy, v, k);
            assert_eq!(full.channels(), CONDITION_CHANNELS);
            assert!(full.channel(18).iter().all(|x| *x == 1.0));
            let d = dropped.bundle(&noisy, v, k);
            for c in 4..CONDITION_CHANNELS {
                assert!(d.channel(c).iter().all(|x| *x == 0.0), "channel {c} leaks");
            }
        }
    }
    assert!(dropped.deltas.iter().chain(&dropped.style_patches).all(|x| *x == 0.0));
}
