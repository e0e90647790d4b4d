use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skei::analysis::{lipschitz_probe, sandwich_check, sketch_deviation, spectrum_profile, SketchFamily};
use skei::config::ExperimentConfig;
use skei::experiment::{run_experiment, Inputs};
use skei::linops::{CtModel, FbpFilter, LinearModel};
use skei::nn::{Architecture, Network};
use skei::phantom::shepp_logan;
use skei::sketch::{make_angle_partition, restrict_model, Matrix};
use skei::{Image, ImageShape};

#[test]
fn ct_spectrum_decays() {
    let model = CtModel::<f64>::uniform(64, 30, FbpFilter::RamLak).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let prof = spectrum_profile(&model, 20, 0.1, &mut rng);
    let sv = &prof.singular_values;
    assert_eq!(sv.len(), 20);
    assert!(sv.windows(2).all(|w| w[0] > w[1]), "{sv:?}");
    assert!(sv[0] / sv[19] > 2.0, "{sv:?}");
}

#[test]
fn batch_operator_is_cheaper() {
    let model = CtModel::<f32>::uniform(128, 100, FbpFilter::RamLak).unwrap();
    let x = shepp_logan::<f32>(128);
    let y = model.forward(&x);
    let part = make_angle_partition(100, 10).unwrap();
    let sk = restrict_model(&model, &y, &part, 3).unwrap();
    let best = |m: &dyn LinearModel<f32>| {
        (0..5)
            .map(|_| {
                let t = Instant::now();
                let v = m.forward(&x);
                std::hint::black_box(m.adjoint(&v));
                t.elapsed().as_secs_f64()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let ratio = best(&sk.model) / best(&model);
    assert!(ratio <= 0.2, "A_S / A cost ratio {ratio}");
}

#[test]
fn lipschitz_estimate_is_stable_across_seeds() {
    let cfg = ExperimentConfig::from_json(
        r#"{"task":"ct","image_size":64,"ct":{"n_angles":30,"n_batches":5},"seed":2,"optimizer":{"iterations":60}}"#,
    )
    .unwrap();
    let out = run_experiment::<f32>(&cfg, &Inputs::default(), &mut |_| {}).unwrap();
    let net = out.network;
    let z = out.problem.z;
    let probe = |seed| {
        let mut f = |v: &Image<f32>| net.forward(v).unwrap();
        lipschitz_probe(&mut f, &z, 40, 0.05, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    };
    let (a, b) = (probe(1), probe(2));
    assert!(a.is_finite() && b.is_finite() && a > 0.0);
    assert!((a - b).abs() / a.max(b) <= 0.2, "{a} vs {b}");
}

// Advisory: the probed constant is a lower bound, so the bound may be
// violated without contradicting the theory. Only finiteness is asserted.
#[test]
fn sandwich_bound_is_logged_for_gaussian_sketches() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ct = CtModel::<f64>::uniform(16, 10, FbpFilter::RamLak).unwrap();
    let shape = ct.image_shape();
    let d = shape.len();
    let cols: Vec<Vec<f64>> = (0..d)
        .map(|j| {
            let mut e = vec![0.0; d];
            e[j] = 1.0;
            ct.forward(&Image::from_vec(shape, e).unwrap())
        })
        .collect();
    let raw = Matrix::from_fn(cols[0].len(), d, |i, j| cols[j][i]);
    let s1 = skei::analysis::dense_singular_values(&raw)[0];
    let a = Matrix::from_fn(raw.rows, d, |i, j| raw.get(i, j) / s1);

    let arch = Architecture::UNet {
        channels: 1,
        base_width: 4,
        depth: 2,
        residual: true,
    };
    let net = Network::<f64>::new(&arch, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let mut f = |v: &Image<f64>| net.forward(v).unwrap();
    let v = Image::from_vec(ImageShape::new(1, 16, 16), shepp_logan::<f64>(16).into_vec()).unwrap();
    let l_hat = lipschitz_probe(&mut f, &v, 20, 0.05, &mut rng).unwrap();

    let normal = |s: Option<&Matrix<f64>>| {
        let mut r = a.matvec(v.data());
        if let Some(s) = s {
            r = s.tr_matvec(&s.matvec(&r));
        }
        Image::from_vec(shape, a.tr_matvec(&r)).unwrap()
    };
    let full = normal(None);
    let mut holds = 0;
    for _ in 0..100 {
        let s: Matrix<f64> = SketchFamily::Gaussian.draw(160, a.rows, &mut rng);
        let dev = sketch_deviation(&a, &s, &mut rng).unwrap();
        let rec = sandwich_check(&mut f, &v, &full, &normal(Some(&s)), l_hat, dev);
        assert!(rec.full.is_finite() && rec.sketched.is_finite() && rec.bound.is_finite());
        holds += rec.holds as usize;
    }
    eprintln!("sandwich bound held in {holds}/100 draws (L̂ = {l_hat:.3})");
}
