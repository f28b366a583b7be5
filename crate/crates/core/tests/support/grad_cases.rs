#![allow(dead_code)]

// Finite-difference gradient cases shared by the core tests and the
// acceptance harness.

use meddiff::biflownet::{BiFlowConfig, BiFlowNet};
use meddiff::diffusion::{diffusion_loss_at, randn_like, NoiseSchedule};
use meddiff::layers::{batch_l2, stream_rng};
use meddiff::pvae::loss::{slice_disc_objective, slice_generator_adv};
use meddiff::pvae::{straight_through, triplane_loss, vq_loss, PvaeConfig, PvaeModel};
use meddiff_tensor::gradcheck::{check_params, GradSample};
use meddiff_tensor::{no_grad, Module, Tensor, Var};

pub const SAMPLES: usize = 12;
pub const STEP: f64 = 1e-6;
pub const MIN_GRAD: f64 = 1e-5;

pub struct GradCase {
    pub name: &'static str,
    pub params: usize,
    pub samples: Vec<GradSample>,
}

impl GradCase {
    pub fn worst(&self) -> f64 {
        self.samples.iter().map(GradSample::rel_error).fold(0.0, f64::max)
    }
}

fn tiny_pvae() -> PvaeModel {
    PvaeModel::new(PvaeConfig {
        patch: [8; 3],
        widths: [2, 4, 4],
        res_blocks: 1,
        latent_channels: 2,
        codebook_size: 16,
        disc_width: 2,
        batch: 2,
        seed: 11,
        ..PvaeConfig::default()
    })
    .expect("tiny config is valid")
}

fn patches(seed: u64) -> Var {
    let mut rng = stream_rng(seed, 0);
    Var::constant(Tensor::randn(&[2, 1, 8, 8, 8], 0.5, &mut rng))
}

/// Reconstruction, codebook and commitment terms through the
/// straight-through estimator. The numeric side freezes the stop-gradient
/// operands: the code assignment, `sg[z]`, `sg[z̃]` and the
/// straight-through offset `z̃ − z`.
pub fn vq_case() -> GradCase {
    let mut m = tiny_pvae();
    let x = patches(1);
    let z0 = no_grad(|| m.encoder.forward(&x).value().clone());
    let q0 = m.codebook.quantize(&z0).expect("finite");
    let offset = q0.features.zip_map(&z0, |a, b| a - b);
    let analytic = |m: &PvaeModel| {
        let z = m.encoder.forward(&x);
        let q = m.codebook.quantize(z.value()).expect("finite");
        let zq = m.codebook.lookup_var(&q.indices, q.grid());
        let x_rec = m.patch_decoder.forward(&straight_through(&z, &q.features));
        vq_loss(&x, &x_rec, &z, &zq).expect("shapes agree").total()
    };
    let numeric = |m: &PvaeModel| {
        no_grad(|| {
            let z = m.encoder.forward(&x);
            let zq = m.codebook.lookup_var(&q0.indices, q0.grid());
            let x_rec = m.patch_decoder.forward(&z.add(&Var::constant(offset.clone())));
            let rec = batch_l2(&x.sub(&x_rec));
            let book = batch_l2(&Var::constant(z0.clone()).sub(&zq));
            let commit = batch_l2(&Var::constant(q0.features.clone()).sub(&z));
            rec.add(&book).add(&commit).item()
        })
    };
    let params = m.encoder.param_count() + m.codebook.param_count() + m.patch_decoder.param_count();
    let samples = check_params(&mut m, analytic, numeric, SAMPLES, STEP, MIN_GRAD, &mut stream_rng(2, 0));
    GradCase { name: "vq", params, samples }
}

fn fixed_latent() -> Tensor {
    Tensor::randn(&[2, 2, 2, 2, 2], 1.0, &mut stream_rng(3, 0))
}

/// Tri-plane feature loss of decoder output against fixed patches; the
/// feature stack is frozen so only decoder weights are checked.
pub fn triplane_case() -> GradCase {
    let mut m = tiny_pvae();
    let x = patches(4);
    let zq = Var::constant(fixed_latent());
    let idx = [3, 5, 2];
    let f = |m: &PvaeModel| triplane_loss(&x, &m.patch_decoder.forward(&zq), &m.features, idx).expect("shapes agree");
    let params = m.patch_decoder.param_count();
    let samples = check_params(&mut m, f, |m| no_grad(|| f(m).item()), SAMPLES, STEP, MIN_GRAD, &mut stream_rng(5, 0));
    GradCase { name: "triplane", params, samples }
}

/// Generator term through decoder and critic plus the critic objective on
/// a detached reconstruction, which the numeric side holds at its base value.
pub fn adversarial_case() -> GradCase {
    let mut m = tiny_pvae();
    let x = patches(6);
    let zq = Var::constant(fixed_latent());
    let idx = [1, 6, 4];
    let x_rec0 = Var::constant(no_grad(|| m.patch_decoder.forward(&zq).value().clone()));
    let analytic = |m: &PvaeModel| {
        let x_rec = m.patch_decoder.forward(&zq);
        let gen = slice_generator_adv(&m.discriminator, &x_rec, idx);
        gen.add(&slice_disc_objective(&m.discriminator, &x, &x_rec.detach(), idx))
    };
    let numeric = |m: &PvaeModel| {
        no_grad(|| {
            let x_rec = m.patch_decoder.forward(&zq);
            let gen = slice_generator_adv(&m.discriminator, &x_rec, idx);
            gen.add(&slice_disc_objective(&m.discriminator, &x, &x_rec0, idx)).item()
        })
    };
    let params = m.patch_decoder.param_count() + m.discriminator.param_count();
    let samples = check_params(&mut m, analytic, numeric, SAMPLES, STEP, MIN_GRAD, &mut stream_rng(7, 0));
    GradCase { name: "adversarial", params, samples }
}

pub fn toy_biflow_config() -> BiFlowConfig {
    BiFlowConfig {
        channels: 2,
        latent_patch: [2; 3],
        token: 1,
        embed_dim: 8,
        heads: 2,
        mlp_ratio: 2,
        depth: 4,
        unet_widths: vec![2, 2],
        cond_dim: 8,
        num_classes: 2,
        timesteps: 10,
        cosine_offset: 0.008,
        unet_only: false,
        seed: 13,
    }
}

/// Noise-prediction loss of the full estimator at fixed timesteps and noise.
pub fn biflownet_case() -> GradCase {
    let cfg = toy_biflow_config();
    let sched = NoiseSchedule::cosine(cfg.timesteps, 0.008).expect("valid schedule");
    let mut net = BiFlowNet::new(cfg).expect("valid config");
    let mut rng = stream_rng(8, 0);
    let shape = [2, 2, 4, 4, 4];
    let z0 = randn_like(&shape, &mut rng);
    let eps = randn_like(&shape, &mut rng);
    let (ts, class) = ([3, 9], [0, 1]);
    let f = |n: &BiFlowNet| diffusion_loss_at(n, &z0, &class, &ts, &eps, &sched).expect("shapes agree");
    let params = net.param_count();
    let samples = check_params(&mut net, f, |n| no_grad(|| f(n).item()), SAMPLES, STEP, MIN_GRAD, &mut rng);
    GradCase { name: "biflownet", params, samples }
}

pub fn all_cases() -> Vec<GradCase> {
    vec![vq_case(), triplane_case(), adversarial_case(), biflownet_case()]
}
