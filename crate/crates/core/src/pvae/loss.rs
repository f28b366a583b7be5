//! Autoencoder objective: reconstruction/codebook/commitment terms,
//! tri-plane feature loss and the adversarial terms.

use meddiff_tensor::Var;

use super::nets::{triplanes, PlaneFeatures, SliceCritic};
use super::PvaeError;
use crate::layers::batch_l2;

/// Probability clamp used inside every log of the adversarial terms.
pub const PROB_EPS: f64 = 1e-6;

/// The three parts of the vector-quantization objective.
#[derive(Clone)]
pub struct VqLoss {
    /// `‖x − x̃‖`
    pub rec: Var,
    /// `‖sg[z] − z̃‖`, reaches only the codebook.
    pub codebook: Var,
    /// `‖sg[z̃] − z‖`, reaches only the encoder.
    pub commit: Var,
}

impl VqLoss {
    pub fn total(&self) -> Var {
        self.rec.add(&self.codebook).add(&self.commit)
    }
}

fn check_finite(name: &str, v: &Var) -> Result<(), PvaeError> {
    if v.value().all_finite() {
        Ok(())
    } else {
        Err(PvaeError::NonFinite(format!("{name} holds non-finite values")))
    }
}

fn check_shapes(what: &str, a: &Var, b: &Var) -> Result<(), PvaeError> {
    if a.shape() != b.shape() {
        return Err(PvaeError::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `x` input batch, `x_rec` reconstruction, `z` encoder output, `zq` the
/// selected codes as a codebook-connected variable. Norms are taken per
/// sample and averaged over the batch.
pub fn vq_loss(x: &Var, x_rec: &Var, z: &Var, zq: &Var) -> Result<VqLoss, PvaeError> {
    check_shapes("reconstruction", x, x_rec)?;
    check_shapes("latent", z, zq)?;
    for (n, v) in [("x", x), ("x_rec", x_rec), ("z", z), ("zq", zq)] {
        check_finite(n, v)?;
    }
    Ok(VqLoss {
        rec: batch_l2(&x.sub(x_rec)),
        codebook: batch_l2(&z.detach().sub(zq)),
        commit: batch_l2(&zq.detach().sub(z)),
    })
}

/// Sum over the axial, coronal and sagittal planes through `idx` of the
/// feature-space distance `‖φ(p) − φ(p̃)‖`.
pub fn triplane_loss(x: &Var, x_rec: &Var, phi: &dyn PlaneFeatures, idx: [usize; 3]) -> Result<Var, PvaeError> {
    check_shapes("tri-plane", x, x_rec)?;
    let s = x.shape();
    if s.len() != 5 || (0..3).any(|a| idx[a] >= s[2 + a]) {
        return Err(PvaeError::Shape(format!("plane index {idx:?} does not fit {s:?}")));
    }
    let a = triplanes(x, idx);
    let b = triplanes(x_rec, idx);
    let mut total: Option<Var> = None;
    for (p, q) in a.iter().zip(&b) {
        let d = batch_l2(&phi.features(p).sub(&phi.features(q)));
        total = Some(match total {
            Some(t) => t.add(&d),
            None => d,
        });
    }
    Ok(total.expect("three planes"))
}

fn log_clamped(p: &Var) -> Var {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS).ln()
}

/// `mean log D(x) + mean log(1 − D(x̃))`, the quantity the critic maximizes.
pub fn disc_objective(p_real: &Var, p_fake: &Var) -> Var {
    let one_minus = p_fake.neg().add_scalar(1.0);
    log_clamped(p_real).mean().add(&log_clamped(&one_minus).mean())
}

/// Non-saturating generator term `−mean log D(x̃)`.
pub fn generator_adv(p_fake: &Var) -> Var {
    log_clamped(p_fake).mean().neg()
}

/// Critic objective averaged over matched orthogonal slices of real and
/// reconstructed batches.
pub fn slice_disc_objective(critic: &dyn SliceCritic, x: &Var, x_rec: &Var, idx: [usize; 3]) -> Var {
    let real = triplanes(x, idx);
    let fake = triplanes(x_rec, idx);
    let terms: Vec<Var> = real
        .iter()
        .zip(&fake)
        .map(|(r, f)| disc_objective(&critic.probs(r), &critic.probs(f)).reshape(&[1]))
        .collect();
    Var::concat(&terms, 0).mean()
}

/// Generator term averaged over the three slices of the reconstruction.
pub fn slice_generator_adv(critic: &dyn SliceCritic, x_rec: &Var, idx: [usize; 3]) -> Var {
    let terms: Vec<Var> = triplanes(x_rec, idx)
        .iter()
        .map(|f| generator_adv(&critic.probs(f)).reshape(&[1]))
        .collect();
    Var::concat(&terms, 0).mean()
}

/// `L_vq + λ_adv·L_adv + λ_tp·L_tp`.
pub fn total_ae_loss(vq: &Var, adv: &Var, tp: &Var, lambda_adv: f64, lambda_tp: f64) -> Var {
    vq.add(&adv.scale(lambda_adv)).add(&tp.scale(lambda_tp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pvae::nets::RandomPlaneFeatures;
    use meddiff_tensor::{impl_module, Conv3d, Module, Param, Tensor};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_var(shape: &[usize], seed: u64) -> Var {
        Var::leaf(Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)))
    }

    fn raw_norm(a: &Tensor, b: &Tensor) -> f64 {
        a.sub(b).sq_norm().sqrt()
    }

    #[test]
    fn vq_zero_when_perfect() {
        let x = rand_var(&[1, 1, 4, 4, 4], 1);
        let z = rand_var(&[1, 2, 1, 1, 1], 2);
        let l = vq_loss(&x, &x, &z, &z).unwrap();
        assert_eq!(l.total().item(), 0.0);
    }

    #[test]
    fn vq_matches_raw_norms() {
        let x = rand_var(&[1, 1, 4, 4, 4], 3);
        let xr = rand_var(&[1, 1, 4, 4, 4], 4);
        let z = rand_var(&[1, 2, 4, 4, 4], 5);
        let zq = rand_var(&[1, 2, 4, 4, 4], 6);
        let l = vq_loss(&x, &xr, &z, &zq).unwrap();
        let want = raw_norm(x.value(), xr.value()) + 2.0 * raw_norm(z.value(), zq.value());
        assert!((l.total().item() - want).abs() < 1e-12);
    }

    #[test]
    fn vq_rejects_non_finite() {
        let x = rand_var(&[1, 1, 2, 2, 2], 7);
        let bad = Var::constant(Tensor::full(&[1, 1, 2, 2, 2], f64::NAN));
        let z = rand_var(&[1, 1, 1, 1, 1], 8);
        assert!(matches!(vq_loss(&x, &bad, &z, &z), Err(PvaeError::NonFinite(_))));
    }

    #[derive(Clone, Debug)]
    struct Toy {
        enc: Conv3d,
        codes: Param,
    }
    impl_module!(Toy { enc, codes });

    #[test]
    fn stop_gradient_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let toy = Toy { enc: Conv3d::same(1, 2, 1, &mut rng), codes: Param::new(Tensor::randn(&[16], 1.0, &mut rng)) };
        let x = Var::constant(Tensor::randn(&[1, 1, 2, 2, 2], 1.0, &mut rng));
        let z = toy.enc.forward(&x);
        let zq = toy.codes.var().reshape(&[1, 2, 2, 2, 2]);
        let l = vq_loss(&x, &x, &z, &zq).unwrap();
        let g_cb = l.codebook.backward();
        assert!(g_cb.param(&toy.codes).unwrap().max_abs() > 0.0);
        for (_, p) in toy.enc.named_params() {
            assert!(g_cb.param(p).is_none_or(|g| g.max_abs() == 0.0));
        }
        let g_commit = l.commit.backward();
        assert!(g_commit.param(&toy.codes).is_none_or(|g| g.max_abs() == 0.0));
        assert!(g_commit.param(&toy.enc.weight).unwrap().max_abs() > 0.0);
    }

    #[test]
    fn triplane_identity_and_manual() {
        let phi = RandomPlaneFeatures::new(3);
        let x = rand_var(&[1, 1, 8, 8, 8], 10);
        let y = rand_var(&[1, 1, 8, 8, 8], 11);
        assert_eq!(triplane_loss(&x, &x, &phi, [1, 2, 3]).unwrap().item(), 0.0);
        let got = triplane_loss(&x, &y, &phi, [1, 2, 3]).unwrap().item();
        let (xv, yv) = (x.value(), y.value());
        let mut want = 0.0;
        let planes = [(4, 3, [8, 8]), (3, 2, [8, 8]), (2, 1, [8, 8])];
        for (axis, i, hw) in planes {
            let p = Var::constant(xv.narrow(axis, i, 1).reshape(&[1, 1, hw[0], hw[1]]));
            let q = Var::constant(yv.narrow(axis, i, 1).reshape(&[1, 1, hw[0], hw[1]]));
            want += raw_norm(phi.features(&p).value(), phi.features(&q).value());
        }
        assert!((got - want).abs() < 1e-12 * want.max(1.0));
        assert!(triplane_loss(&x, &rand_var(&[1, 1, 8, 8, 4], 1), &phi, [0; 3]).is_err());
    }

    #[test]
    fn disc_closed_forms() {
        let half = Var::constant(Tensor::full(&[4], 0.5));
        assert!((disc_objective(&half, &half).item() - 2.0 * 0.5f64.ln()).abs() < 1e-15);
        let one = Var::constant(Tensor::full(&[4], 1.0));
        let zero = Var::constant(Tensor::zeros(&[4]));
        let perfect = disc_objective(&one, &zero).item();
        assert!(perfect < 0.0 && perfect > -1e-5);
        assert!(generator_adv(&zero).item().is_finite());
    }

    #[test]
    fn total_is_affine_in_weights() {
        let vq = Var::constant(Tensor::scalar(1.5));
        let adv = Var::constant(Tensor::scalar(0.7));
        let tp = Var::constant(Tensor::scalar(0.3));
        assert_eq!(total_ae_loss(&vq, &adv, &tp, 0.0, 0.0).item(), 1.5);
        let base = total_ae_loss(&vq, &adv, &tp, 2.0, 4.0).item();
        assert!((base - (1.5 + 1.4 + 1.2)).abs() < 1e-15);
        let doubled = total_ae_loss(&vq, &adv, &tp, 2.0, 8.0).item();
        assert!((doubled - base - 1.2).abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn triplane_symmetric(seed in any::<u64>(), i in 0usize..4, j in 0usize..4, k in 0usize..4) {
            let phi = RandomPlaneFeatures::new(seed);
            let x = rand_var(&[1, 1, 4, 4, 4], seed);
            let y = rand_var(&[1, 1, 4, 4, 4], seed ^ 1);
            let a = triplane_loss(&x, &y, &phi, [i, j, k]).unwrap().item();
            let b = triplane_loss(&y, &x, &phi, [i, j, k]).unwrap().item();
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }

        #[test]
        fn total_affine(vq in -5.0f64..5.0, adv in -5.0f64..5.0, tp in 0.0f64..5.0, la in 0.0f64..10.0, lt in 0.0f64..10.0) {
            let c = |v| Var::constant(Tensor::scalar(v));
            let got = total_ae_loss(&c(vq), &c(adv), &c(tp), la, lt).item();
            prop_assert!((got - (vq + la * adv + lt * tp)).abs() < 1e-12);
        }
    }
}
