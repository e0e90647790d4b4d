use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skei::groupact::{apply_rotation, RotationGroup};
use skei::image::{norm_sq, Image, ImageShape};
use skei::linops::{CtModel, FbpFilter, KSpaceStack, LinearModel, MriModel, SamplingMask};
use skei::nn::{Architecture, Network};
use skei::objectives::{evaluate, EiTerm};
use skei::phantom::{complex_phantom, shepp_logan, synthetic_coil_maps};
use skei::sketch::partition::restrict_rows;
use skei::sketch::{build_coil_sketch_matrix, coil_compress, make_angle_partition, sketch_mri_model};

fn image(shape: ImageShape, vals: &[f64]) -> Image<f64> {
    let mut i = 0;
    Image::from_fn(shape, |_, _, _| {
        i += 1;
        vals[(i * 7919) % vals.len()]
    })
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (d / norm_sq(b).max(1e-300)).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ct_forward_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, v1 in prop::collection::vec(-1.0f64..1.0, 64), v2 in prop::collection::vec(-1.0f64..1.0, 64), views in 1usize..20) {
        let m = CtModel::<f64>::uniform(16, views, FbpFilter::RamLak).unwrap();
        let (x1, x2) = (image(m.image_shape(), &v1), image(m.image_shape(), &v2));
        let lhs = m.forward(&x1.scaled(a).add(&x2.scaled(b)));
        let rhs: Vec<f64> = m.forward(&x1).iter().zip(m.forward(&x2)).map(|(p, q)| a * p + b * q).collect();
        prop_assert!(rel(&lhs, &rhs) <= 1e-5 || norm_sq(&rhs) < 1e-20);
    }

    #[test]
    fn mri_forward_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, v1 in prop::collection::vec(-1.0f64..1.0, 64), v2 in prop::collection::vec(-1.0f64..1.0, 64)) {
        let m = MriModel::<f64>::new(synthetic_coil_maps(3, 16, 16), SamplingMask::cartesian(16, 16, 4, 4).unwrap()).unwrap();
        let (x1, x2) = (image(m.image_shape(), &v1), image(m.image_shape(), &v2));
        let lhs = m.forward(&x1.scaled(a).add(&x2.scaled(b)));
        let rhs: Vec<f64> = m.forward(&x1).iter().zip(m.forward(&x2)).map(|(p, q)| a * p + b * q).collect();
        prop_assert!(rel(&lhs, &rhs) <= 1e-5 || norm_sq(&rhs) < 1e-20);
    }

    #[test]
    fn rotation_is_linear_and_full_turn_is_identity(g in 0u32..360, a in -2.0f64..2.0, v1 in prop::collection::vec(-1.0f64..1.0, 32), v2 in prop::collection::vec(-1.0f64..1.0, 32)) {
        let group = RotationGroup::new(360).unwrap();
        let shape = ImageShape::new(2, 12, 12);
        let (x1, x2) = (image(shape, &v1), image(shape, &v2));
        let lhs = apply_rotation(&x1.scaled(a).add(&x2), &group, g).unwrap();
        let rhs = apply_rotation(&x1, &group, g).unwrap().scaled(a).add(&apply_rotation(&x2, &group, g).unwrap());
        prop_assert!(rel(lhs.data(), rhs.data()) <= 1e-6 || rhs.norm_sq() < 1e-20);
        prop_assert_eq!(apply_rotation(&x1, &group, 360).unwrap(), x1);
    }

    #[test]
    fn partition_identity_for_any_residual(n_angles in 1usize..40, k in 1usize..12, n_det in 1usize..9, seed in any::<u64>()) {
        prop_assume!(k <= n_angles);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r: Vec<f64> = (0..n_angles * n_det).map(|_| rand::Rng::random_range(&mut rng, -5.0..5.0)).collect();
        let p = make_angle_partition(n_angles, k).unwrap();
        let total: f64 = p.batches.iter().map(|b| norm_sq(&restrict_rows(&r, n_det, b))).sum();
        let full = norm_sq(&r);
        prop_assert!((total - full).abs() <= 1e-12 * full.max(1.0));
    }

    #[test]
    fn loss_components_are_finite_nonnegative_and_consistent(seed in any::<u64>(), g in 0u32..360, lambda in 0.0f64..5.0) {
        let m = CtModel::<f64>::uniform(8, 5, FbpFilter::RamLak).unwrap();
        let x = shepp_logan::<f64>(8);
        let y = m.forward(&x);
        let z = m.pinv(&y);
        let arch = Architecture::UNet { channels: 1, base_width: 2, depth: 1, residual: true };
        let net = Network::<f64>::new(&arch, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let term = EiTerm { group: RotationGroup::new(360).unwrap(), g, lambda, noise: None };
        let l = evaluate(&net, &z, &y, &m, Some(&term), None).unwrap().loss;
        prop_assert!(l.is_finite() && l.mc >= 0.0 && l.ei >= 0.0);
        prop_assert!((l.total - (l.mc + lambda * l.ei)).abs() <= 1e-7 * l.total.max(1.0));
    }
}

#[test]
fn lambda_zero_ei_is_the_dip_loss() {
    let m = CtModel::<f64>::uniform(8, 7, FbpFilter::RamLak).unwrap();
    let y = m.forward(&shepp_logan::<f64>(8));
    let z = m.pinv(&y);
    let arch = Architecture::UNet {
        channels: 1,
        base_width: 2,
        depth: 1,
        residual: true,
    };
    let net = Network::<f64>::new(&arch, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let term = EiTerm {
        group: RotationGroup::new(360).unwrap(),
        g: 45,
        lambda: 0.0,
        noise: None,
    };
    let ei = evaluate(&net, &z, &y, &m, Some(&term), None).unwrap().loss;
    let dip = evaluate(&net, &z, &y, &m, None, None).unwrap().loss;
    assert_eq!(ei.total, dip.total);
    assert_eq!(ei.mc, dip.mc);
}

#[test]
fn coil_energy_ordering_and_top_coils_survive_sketching() {
    let n = 32;
    let mask = SamplingMask::cartesian(n, n, 4, 6).unwrap();
    let model = MriModel::<f64>::new(synthetic_coil_maps(6, n, n), mask.clone()).unwrap();
    let y = model.forward(&complex_phantom(&shepp_logan::<f64>(n)));
    let k = KSpaceStack::from_interleaved(6, mask, &y).unwrap();

    let mut last = 0.0;
    for l in 1..=6 {
        let e: f64 = coil_compress(&k, l).unwrap().virtual_energies().iter().sum();
        assert!(e >= last - 1e-9 * e.abs());
        last = e;
    }
    let total: f64 = k.data.iter().map(|v| v.norm_sqr()).sum();
    assert!((last - total).abs() <= 1e-9 * total);

    let cc = coil_compress(&k, 5).unwrap();
    let cmodel = model.with_maps(cc.compress_maps(model.maps()).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let sk = build_coil_sketch_matrix(5, 2, 2, &mut rng).unwrap();
    let out = sketch_mri_model(&cmodel, &cc.compressed, &sk).unwrap();
    let out = KSpaceStack::from_interleaved(4, cc.compressed.mask.clone(), &out.y).unwrap();
    for r in 0..2 {
        assert!(out.coil(r).iter().zip(cc.compressed.coil(r)).all(|(a, b)| a == b));
    }
}
