use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mlrm::dataset::{Dataset, DatasetConfig};
use mlrm::extraction::{marching_cubes, SdfGrid};
use mlrm::geometry::{orbit_camera, plucker_rays, ray_box_depth, BoxOccluder, Mat3, Vec3};
use mlrm::losses::{recon_loss, LossWeights, TargetCrop};
use mlrm::masking::build_view_masks;
use mlrm::model::ModelConfig;
use mlrm::scene::{generate_random_scene, SceneSpec};
use mlrm::tensor::{Checkpoint, Graph, ParamStore, Tensor};
use mlrm::training::{sample_batch, stream_rng, MaskingMode, TrainConfig};
use mlrm::volren::{weights, PredView};

/// Neumaier-compensated sum, so the check sees the stored values rather than summation rounding.
fn exact_sum(xs: &[f64]) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for &x in xs {
        let t = s + x;
        c += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    }
    s + c
}

fn vec3(r: f64) -> impl Strategy<Value = Vec3> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn rotation() -> impl Strategy<Value = Mat3> {
    (-3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64)
        .prop_map(|(a, b, c)| *nalgebra::Rotation3::from_euler_angles(a, b, c).matrix())
}

fn occluder() -> impl Strategy<Value = BoxOccluder> {
    (vec3(0.6), (0.05..0.5f64, 0.05..0.5f64, 0.05..0.5f64), rotation())
        .prop_map(|(c, (x, y, z), r)| BoxOccluder::new(c, Vec3::new(x, y, z), r).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn plucker_moment_orthogonal_and_origin_free(az in -3.1..3.1f64, el in -1.0..1.0f64, s in -3.0..3.0f64) {
        let cam = orbit_camera(az, el, 2.2, 0.9, 8).unwrap();
        let rays = plucker_rays(&cam);
        let o = cam.origin();
        for (d, m) in rays.directions.iter().zip(&rays.moments) {
            prop_assert!(m.dot(d).abs() < 1e-6);
            let shifted = (o + d * s).cross(d);
            prop_assert!((shifted - m).norm() < 1e-6);
        }
    }

    #[test]
    fn inflating_a_box_never_deepens_a_hit(b in occluder(), o in vec3(3.0), d in vec3(1.0), by in 0.0..0.5f64) {
        prop_assume!(d.norm() > 1e-3);
        let d = d.normalize();
        if let Some(t) = ray_box_depth(&o, &d, &b) {
            let t2 = ray_box_depth(&o, &d, &b.inflated(by));
            prop_assert!(t2.is_some_and(|t2| t2 <= t + 1e-12));
        }
    }

    #[test]
    fn growing_occluder_never_unflags(seed in 0u64..500, b in occluder(), by in 0.01..0.3f64, az in -3.1..3.1f64) {
        let scene = generate_random_scene(&mut ChaCha8Rng::seed_from_u64(seed), &SceneSpec::default()).unwrap();
        let cam = orbit_camera(az, 0.3, 2.2, 0.9, 32).unwrap();
        let small = build_view_masks(&scene, &b, std::slice::from_ref(&cam), 8).unwrap().remove(0);
        let big = build_view_masks(&scene, &b.inflated(by), std::slice::from_ref(&cam), 8).unwrap().remove(0);
        for (a, c) in small.flags.iter().zip(&big.flags) {
            prop_assert!(!a || *c);
        }
    }

    #[test]
    fn weights_are_normalized(n in 1usize..40, sig in prop::collection::vec(0.0..200.0f64, 40), dl in prop::collection::vec(1e-4..0.5f64, 40)) {
        let mut g = Graph::<f64>::new();
        let s = g.constant(Tensor::from_f64(&[1, n], &sig[..n]).unwrap());
        let d = g.constant(Tensor::from_f64(&[1, n], &dl[..n]).unwrap());
        let (w, op) = weights(&mut g, s, d).unwrap();
        let total = exact_sum(g.value(w).data());
        prop_assert!(g.value(w).data().iter().all(|&v| v >= 0.0));
        prop_assert!((0.0..=1.0).contains(&total));
        prop_assert!((total - g.value(op).data()[0]).abs() < 1e-12);
    }

    #[test]
    fn zero_density_sample_changes_nothing(n in 2usize..20, at in 0usize..20, sig in prop::collection::vec(0.0..20.0f64, 20), dl in prop::collection::vec(1e-3..0.3f64, 20), extra in 1e-3..0.3f64) {
        let at = at % n;
        let run = |s: &[f64], d: &[f64]| {
            let mut g = Graph::<f64>::new();
            let m = s.len();
            let sv = g.constant(Tensor::from_f64(&[1, m], s).unwrap());
            let dv = g.constant(Tensor::from_f64(&[1, m], d).unwrap());
            let (w, op) = weights(&mut g, sv, dv).unwrap();
            (g.value(w).data().to_vec(), g.value(op).data()[0])
        };
        let (w0, op0) = run(&sig[..n], &dl[..n]);
        let (mut s1, mut d1) = (sig[..n].to_vec(), dl[..n].to_vec());
        s1.insert(at, 0.0);
        d1.insert(at, extra);
        let (mut w1, op1) = run(&s1, &d1);
        prop_assert!(w1[at].abs() < 1e-15);
        w1.remove(at);
        prop_assert!((op0 - op1).abs() < 1e-7);
        for (a, b) in w0.iter().zip(&w1) {
            prop_assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn loss_total_is_weighted_sum_and_nonnegative(seed in 0u64..1000, wi in 0.0..2.0f64, wn in 0.0..2.0f64, wm in 0.0..2.0f64, wp in 0.0..2.0f64, wd in 0.0..2.0f64) {
        use rand::Rng;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (8usize, 8usize);
        let n = h * w;
        let sil: Vec<bool> = (0..n).map(|_| r.gen_bool(0.5)).collect();
        let target = TargetCrop {
            height: h,
            width: w,
            rgb: (0..3 * n).map(|_| r.gen()).collect(),
            normal: (0..3 * n).map(|_| r.gen_range(-1.0..1.0)).collect(),
            depth: sil.iter().map(|&s| if s { r.gen_range(1.0..3.0) } else { f64::INFINITY }).collect(),
            silhouette: sil,
        };
        let mut g = Graph::<f64>::new();
        let mut rand_var = |g: &mut Graph<f64>, shape: &[usize], lo: f64, hi: f64| g.constant(Tensor::uniform(shape, lo, hi, &mut r));
        let pred = PredView {
            height: h,
            width: w,
            rgb: rand_var(&mut g, &[n, 3], 0.0, 1.0),
            opacity: rand_var(&mut g, &[n], 0.0, 1.0),
            normal: Some(rand_var(&mut g, &[n, 3], -1.0, 1.0)),
            depth: Some(rand_var(&mut g, &[n], 1.0, 3.0)),
        };
        let lw = LossWeights { w_i: wi, w_n: wn, w_m: wm, w_p: wp, w_d: wd };
        let (_, rep) = recon_loss(&mut g, &pred, &target, &lw).unwrap();
        prop_assert!((rep.total - rep.weighted_total(&lw)).abs() < 1e-9);
        for v in [rep.recon_rgb, rep.recon_normal, rep.recon_mask, rep.perceptual, rep.depth] {
            prop_assert!(v >= 0.0);
        }
    }

    #[test]
    fn negated_sphere_flips_orientation(c in vec3(0.2), radius in 0.2..0.6f64) {
        let grid = SdfGrid::from_fn(20, |p| (p - c).norm() - radius).unwrap();
        let a = marching_cubes(&grid, 0.0);
        let b = marching_cubes(&grid.negated(), 0.0);
        prop_assert!(a.is_closed_oriented() && b.is_closed_oriented());
        prop_assert_eq!(a.triangles.len(), b.triangles.len());
        for t in 0..a.triangles.len().min(50) {
            let ca = (a.vertices[a.triangles[t][0]] + a.vertices[a.triangles[t][1]] + a.vertices[a.triangles[t][2]]) / 3.0;
            prop_assert!(a.triangle_normal(t).dot(&(ca - c)) > 0.0);
        }
        for t in 0..b.triangles.len().min(50) {
            let cb = (b.vertices[b.triangles[t][0]] + b.vertices[b.triangles[t][1]] + b.vertices[b.triangles[t][2]]) / 3.0;
            prop_assert!(b.triangle_normal(t).dot(&(cb - c)) < 0.0);
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_exact(vals in prop::collection::vec(-1e6..1e6f64, 1..40), rows in 1usize..4) {
        let mut p = ParamStore::new();
        let cols = vals.len().div_ceil(rows);
        let mut data = vals.clone();
        data.resize(rows * cols, 0.5);
        p.add("w", Tensor::from_f64(&[rows, cols], &data).unwrap());
        p.add("b", Tensor::from_f64(&[vals.len()], &vals).unwrap());
        let ck = Checkpoint { meta: String::from("x = 1"), params: p, state: None };
        prop_assert_eq!(Checkpoint::<f64>::from_bytes(&ck.to_bytes()).unwrap(), ck);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn conditional_view_never_masked(seed in 0u64..10_000, uniform in any::<bool>()) {
        let dcfg = DatasetConfig { n_scenes: 2, n_views: 7, n_heldout: 0, resolution: 16, ..Default::default() };
        let mut ds = Dataset::generate(&dcfg, seed % 7).unwrap();
        ds.prepare_resolution(16);
        let mcfg = ModelConfig { image_res: 16, patch_size: 4, ..ModelConfig::tiny() };
        let mut cfg = TrainConfig { crop_size: 8, n_input_min: 2, n_input_max: 4, ..Default::default() };
        cfg.stage1.out_res = 16;
        cfg.masking.mode = if uniform { MaskingMode::Uniform } else { MaskingMode::Box };
        let batch = sample_batch(&ds, &[0, 1], &mut stream_rng(seed, 3), &cfg, &mcfg).unwrap();
        for item in &batch.items {
            prop_assert_eq!(item.masks.len(), item.inputs.len());
            prop_assert!(!item.input_views.contains(&item.cond_view));
            prop_assert_eq!(item.inputs.len(), batch.n_inputs);
        }
    }
}
