//! Training losses: measurement consistency (DIP), equivariant imaging, and
//! the sketched / noise-injected variants, each with parameter gradients.
//!
//! All norms are plain sums of squares. Writing `x1 = F(z)`, `x2 = T_g x1`,
//! `x3 = F(A_S†(A_S x2 + ε))`:
//!
//! ```text
//! mc = ‖y_S − A_S x1‖²      ei = ‖x2 − x3‖²      total = mc + λ·ei
//! ```

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::groupact::{apply_rotation, rotate_adjoint, RotationGroup};
use crate::image::{axpy, norm_sq, Image};
use crate::linops::LinearModel;
use crate::nn::{Network, Trace};
use crate::scalar::Real;
use crate::sketch::SketchedModel;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mc: f64,
    pub ei: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    fn new(mc: f64, ei: f64, lambda: f64) -> Self {
        Self {
            mc,
            ei,
            total: mc + lambda * ei,
            lambda,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mc.is_finite() && self.ei.is_finite() && self.total.is_finite()
    }
}

/// The equivariance term: a group element, the weight λ, and optional
/// measurement noise for the REI variant.
#[derive(Clone, Debug)]
pub struct EiTerm<'a, T> {
    pub group: RotationGroup,
    pub g: u32,
    pub lambda: f64,
    pub noise: Option<&'a [T]>,
}

/// Loss value, the reconstruction `x1 = F(z)` and the traces of every
/// network pass (for running-statistic updates).
pub struct Evaluation<T> {
    pub loss: LossBreakdown,
    pub x1: Image<T>,
    pub traces: Vec<Trace<T>>,
}

/// Evaluates the loss and, when `grads` is given, accumulates `∂total/∂θ`.
pub fn evaluate<T: Real>(
    net: &Network<T>,
    z: &Image<T>,
    y: &[T],
    model: &dyn LinearModel<T>,
    ei: Option<&EiTerm<'_, T>>,
    grads: Option<&mut [T]>,
) -> Result<Evaluation<T>> {
    if y.len() != model.measurement_len() {
        return Err(Error::shape(format!(
            "measurement has {} values, model expects {}",
            y.len(),
            model.measurement_len()
        )));
    }
    let (x1, t1) = net.forward_trace(z)?;
    let mut r = y.to_vec();
    axpy(&mut r, -T::one(), &model.forward(&x1));
    let mc = norm_sq(&r).as_f64();

    let Some(term) = ei else {
        if let Some(grads) = grads {
            let g1 = model.adjoint(&r).scaled(T::lit(-2.0));
            net.backward(&t1, &g1, grads);
        }
        return Ok(Evaluation {
            loss: LossBreakdown::new(mc, 0.0, 0.0),
            x1,
            traces: vec![t1],
        });
    };

    let x2 = apply_rotation(&x1, &term.group, term.g)?;
    let mut ax2 = model.forward(&x2);
    if let Some(eps) = term.noise {
        if eps.len() != ax2.len() {
            return Err(Error::shape("noise length differs from the measurement length"));
        }
        axpy(&mut ax2, T::one(), eps);
    }
    let u = model.pinv(&ax2);
    let (x3, t3) = net.forward_trace(&u)?;
    let d = x2.sub(&x3);
    let ei_val = d.norm_sq().as_f64();
    let loss = LossBreakdown::new(mc, ei_val, term.lambda);

    if let Some(grads) = grads {
        let lam2 = T::lit(2.0 * term.lambda);
        let g3 = d.scaled(-lam2);
        let gu = net.backward(&t3, &g3, grads);
        let mut g2 = d.scaled(lam2);
        g2.axpy(T::one(), &model.project_adjoint(&gu));
        let mut g1 = model.adjoint(&r).scaled(T::lit(-2.0));
        g1.axpy(T::one(), &rotate_adjoint(&g2, term.group.degrees(term.g)));
        net.backward(&t1, &g1, grads);
    }
    Ok(Evaluation {
        loss,
        x1,
        traces: vec![t1, t3],
    })
}

/// `‖y − A F(z)‖²`
pub fn dip_loss<T: Real>(net: &Network<T>, z: &Image<T>, y: &[T], model: &dyn LinearModel<T>) -> Result<f64> {
    Ok(evaluate(net, z, y, model, None, None)?.loss.mc)
}

/// Full EI with `z = A†y`.
pub fn ei_loss<T: Real>(
    net: &Network<T>,
    y: &[T],
    model: &dyn LinearModel<T>,
    group: RotationGroup,
    g: u32,
    lambda: f64,
) -> Result<LossBreakdown> {
    let z = model.pinv(y);
    let term = EiTerm {
        group,
        g,
        lambda,
        noise: None,
    };
    Ok(evaluate(net, &z, y, model, Some(&term), None)?.loss)
}

/// Sketched EI: both terms use the sketched pair; `z` comes from the full
/// model.
pub fn sketched_ei_loss<T: Real>(
    net: &Network<T>,
    z: &Image<T>,
    sk: &SketchedModel<T>,
    group: RotationGroup,
    g: u32,
    lambda: f64,
) -> Result<LossBreakdown> {
    let term = EiTerm {
        group,
        g,
        lambda,
        noise: None,
    };
    Ok(evaluate(net, z, &sk.y, &sk.model, Some(&term), None)?.loss)
}

/// Gaussian measurement noise of standard deviation `sigma`.
pub fn draw_noise<T: Real, R: Rng + ?Sized>(len: usize, sigma: f64, rng: &mut R) -> Vec<T> {
    (0..len)
        .map(|_| T::lit(sigma * rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

/// Sketched EI with fresh noise injected before the inner pseudo-inverse.
#[allow(clippy::too_many_arguments)]
pub fn rei_sketched_loss<T: Real, R: Rng + ?Sized>(
    net: &Network<T>,
    z: &Image<T>,
    sk: &SketchedModel<T>,
    group: RotationGroup,
    g: u32,
    lambda: f64,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<LossBreakdown> {
    if !(noise_sigma >= 0.0) {
        return Err(Error::config("noise_sigma", "must be non-negative"));
    }
    if noise_sigma == 0.0 {
        return sketched_ei_loss(net, z, sk, group, g, lambda);
    }
    let eps = draw_noise(sk.model.measurement_len(), noise_sigma, rng);
    let term = EiTerm {
        group,
        g,
        lambda,
        noise: Some(&eps),
    };
    Ok(evaluate(net, z, &sk.y, &sk.model, Some(&term), None)?.loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::groupact::rotate;
    use crate::image::ImageShape;
    use crate::linops::{CoilMaps, CtModel, FbpFilter, IdentityModel, MeasurementModel, MriModel, SamplingMask};
    use crate::nn::Architecture;
    use crate::phantom::synthetic_coil_maps;
    use crate::sketch::{make_angle_partition, restrict_model};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn group() -> RotationGroup {
        RotationGroup::new(360).unwrap()
    }

    fn small_net(channels: usize, seed: u64) -> Network<f64> {
        let arch = Architecture::UNet {
            channels,
            base_width: 2,
            depth: 2,
            residual: true,
        };
        Network::new(&arch, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn two_layer(seed: u64) -> Network<f64> {
        let arch = Architecture::ConvNet {
            channels: 1,
            width: 3,
            layers: 2,
            batch_norm: true,
            residual: false,
        };
        Network::new(&arch, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn ct8() -> (CtModel<f64>, Vec<f64>) {
        let model = CtModel::<f64>::uniform(8, 6, FbpFilter::RamLak).unwrap();
        let x = Image::from_fn(ImageShape::new(1, 8, 8), |_, i, j| ((i * 3 + j * 5) % 7) as f64 / 7.0);
        let y = model.forward(&x);
        (model, y)
    }

    fn mri8() -> (MriModel<f64>, Vec<f64>) {
        let maps: CoilMaps<f64> = synthetic_coil_maps(3, 8, 8);
        let mask = SamplingMask::cartesian(8, 8, 2, 2).unwrap();
        let model = MriModel::new(maps, mask).unwrap();
        let x = Image::from_fn(ImageShape::new(2, 8, 8), |c, i, j| ((i + 2 * j + c) % 5) as f64 / 5.0);
        let y = model.forward(&x);
        (model, y)
    }

    #[test]
    fn trivial_identity_cases() {
        let shape = ImageShape::new(1, 8, 8);
        let id = IdentityModel { shape };
        let net = Network::<f64>::new(
            &Architecture::Identity { channels: 1 },
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let y: Vec<f64> = (0..64).map(|k| (k % 9) as f64).collect();
        let z = Image::from_vec(shape, y.clone()).unwrap();
        assert_eq!(dip_loss(&net, &z, &y, &id).unwrap(), 0.0);
        for g in [1, 90, 137, 360] {
            let l = ei_loss(&net, &y, &id, group(), g, 1.0).unwrap();
            assert_eq!((l.mc, l.ei), (0.0, 0.0));
        }
        // zero network output → ‖y‖²
        let mut zero = two_layer(1);
        let n = zero.params().len();
        zero.params_mut().data[..n].iter_mut().for_each(|v| *v = 0.0);
        let expect: f64 = y.iter().map(|v| v * v).sum();
        assert_eq!(dip_loss(&zero, &z, &y, &id).unwrap(), expect);
    }

    #[test]
    fn dip_matches_direct_norm() {
        let (model, y) = ct8();
        let net = two_layer(2);
        let z = model.pinv(&y);
        let out = net.forward(&z).unwrap();
        let ax = model.forward(&out);
        let direct: f64 = y.iter().zip(&ax).map(|(a, b)| (a - b) * (a - b)).sum();
        assert!((dip_loss(&net, &z, &y, &model).unwrap() - direct).abs() <= 1e-7 * direct.max(1.0));
    }

    #[test]
    fn ei_matches_unrolled_oracle_and_lambda_zero() {
        let (model, y) = ct8();
        let net = two_layer(3);
        let g = 37;
        let x1 = net.forward(&model.pinv(&y)).unwrap();
        let x2 = rotate(&x1, 37.0);
        let x3 = net.forward(&model.pinv(&model.forward(&x2))).unwrap();
        let mc: f64 = y.iter().zip(model.forward(&x1)).map(|(a, b)| (a - b) * (a - b)).sum();
        let ei: f64 = x2.data().iter().zip(x3.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let l = ei_loss(&net, &y, &model, group(), g, 0.5).unwrap();
        assert!((l.mc - mc).abs() <= 1e-6 * mc.max(1.0));
        assert!((l.ei - ei).abs() <= 1e-6 * ei.max(1.0));
        assert!((l.total - (mc + 0.5 * ei)).abs() <= 1e-6 * l.total.max(1.0));
        let l0 = ei_loss(&net, &y, &model, group(), g, 0.0).unwrap();
        assert_eq!(l0.total, l0.mc);
        assert!(l0.is_finite() && l0.mc >= 0.0 && l0.ei >= 0.0);
    }

    #[test]
    fn sketched_reductions() {
        let (model, y) = ct8();
        let net = small_net(1, 4);
        let z = model.pinv(&y);
        let full = ei_loss(&net, &y, &model, group(), 200, 1.0).unwrap();
        let one = make_angle_partition(6, 1).unwrap();
        let sk = restrict_model(&model, &y, &one, 0).unwrap();
        let red = sketched_ei_loss(&net, &z, &sk, group(), 200, 1.0).unwrap();
        assert!((full.total - red.total).abs() <= 1e-6 * full.total.max(1.0));
        assert_eq!(full, red);

        // MC terms over a partition add up to the full MC term.
        let part = make_angle_partition(6, 2).unwrap();
        let mut mc_sum = 0.0;
        for b in 0..2 {
            let skb = restrict_model(&model, &y, &part, b).unwrap();
            let lb = sketched_ei_loss(&net, &z, &skb, group(), 200, 1.0).unwrap();
            mc_sum += lb.mc;
            // unrolled oracle on the batch
            let x1 = net.forward(&z).unwrap();
            let x2 = rotate(&x1, 200.0);
            let x3 = net.forward(&skb.model.pinv(&skb.model.forward(&x2))).unwrap();
            let ei: f64 = x2.sub(&x3).norm_sq();
            assert!((lb.ei - ei).abs() <= 1e-6 * ei.max(1.0));
        }
        assert!((mc_sum - full.mc).abs() <= 1e-6 * full.mc);

        // REI at σ = 0 is sketched EI; fixed seed is deterministic.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            rei_sketched_loss(&net, &z, &sk, group(), 200, 1.0, 0.0, &mut rng).unwrap(),
            red
        );
        let a = rei_sketched_loss(&net, &z, &sk, group(), 200, 1.0, 0.1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = rei_sketched_loss(&net, &z, &sk, group(), 200, 1.0, 0.1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert!(rei_sketched_loss(&net, &z, &sk, group(), 200, 1.0, -1.0, &mut rng).is_err());
    }

    #[test]
    fn noise_inflates_ei_on_average() {
        // Holds for affine reconstructors: E‖a − F(u + Pε)‖² = ‖a − F(u)‖² + E‖Pε‖².
        let (model, y) = ct8();
        let net = Network::<f64>::new(
            &Architecture::Identity { channels: 1 },
            &mut ChaCha8Rng::seed_from_u64(6),
        )
        .unwrap();
        let z = model.pinv(&y);
        let sk = SketchedModel::full(MeasurementModel::Ct(model), y);
        let clean = sketched_ei_loss(&net, &z, &sk, group(), 45, 1.0).unwrap().ei;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let draws = 1000;
        let mean = (0..draws)
            .map(|_| {
                rei_sketched_loss(&net, &z, &sk, group(), 45, 1.0, 0.05, &mut rng)
                    .unwrap()
                    .ei
            })
            .sum::<f64>()
            / draws as f64;
        assert!(mean >= clean, "{mean} < {clean}");
    }

    /// Central differences on a handful of parameters.
    fn check_gradients(
        net: &mut Network<f64>,
        z: &Image<f64>,
        y: &[f64],
        model: &dyn LinearModel<f64>,
        term: Option<&EiTerm<'_, f64>>,
    ) {
        let mut grads = vec![0.0; net.param_count()];
        evaluate(net, z, y, model, term, Some(&mut grads)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        for _ in 0..5 {
            let idx = rng.random_range(0..net.param_count());
            let orig = net.params().data[idx];
            net.params_mut().data[idx] = orig + h;
            let lp = evaluate(net, z, y, model, term, None).unwrap().loss.total;
            net.params_mut().data[idx] = orig - h;
            let lm = evaluate(net, z, y, model, term, None).unwrap().loss.total;
            net.params_mut().data[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - grads[idx]).abs() / fd.abs().max(grads[idx].abs()).max(1e-8);
            assert!(
                rel < 1e-3 || (fd - grads[idx]).abs() < 1e-7,
                "param {idx}: fd {fd} vs analytic {}",
                grads[idx]
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences_ct() {
        let (model, y) = ct8();
        let mut net = small_net(1, 7);
        let z = model.pinv(&y);
        check_gradients(&mut net, &z, &y, &model, None);
        let term = EiTerm {
            group: group(),
            g: 123,
            lambda: 0.7,
            noise: None,
        };
        check_gradients(&mut net, &z, &y, &model, Some(&term));
        let part = make_angle_partition(6, 3).unwrap();
        let sk = restrict_model(&model, &y, &part, 1).unwrap();
        check_gradients(&mut net, &z, &sk.y, &sk.model, Some(&term));
        let eps = draw_noise::<f64, _>(sk.model.measurement_len(), 0.05, &mut ChaCha8Rng::seed_from_u64(1));
        let noisy = EiTerm {
            noise: Some(&eps),
            ..term
        };
        check_gradients(&mut net, &z, &sk.y, &sk.model, Some(&noisy));
    }

    #[test]
    fn gradients_match_finite_differences_mri() {
        let (model, y) = mri8();
        let mut net = small_net(2, 8);
        let z = model.pinv(&y);
        let term = EiTerm {
            group: group(),
            g: 71,
            lambda: 1.0,
            noise: None,
        };
        check_gradients(&mut net, &z, &y, &model, None);
        check_gradients(&mut net, &z, &y, &model, Some(&term));
    }
}
