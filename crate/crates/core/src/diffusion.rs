//! Noise schedule, forward noising, ancestral sampling and the
//! noise-prediction objective on latent tensors.

use std::path::Path;

use meddiff_tensor::{no_grad, Adam, Module, Tensor, TensorArchive, TensorError, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::layers::stream_rng;

#[derive(Debug, thiserror::Error)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("timestep {t} outside 1..={max}")]
    Timestep { t: usize, max: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite latent at reverse step {step}")]
    NonFinite { step: usize },
    #[error("training diverged at step {step}")]
    Diverged { step: u64 },
    #[error("estimator: {0}")]
    Estimator(String),
    #[error("no training latents")]
    NoData,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DiffusionError>;

/// Per-step coefficients. Vectors are indexed by `t` in `0..=T`; entry 0
/// is the clean state (`beta = 0`, `alpha_bar = 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma: Vec<f64>,
}

pub const MAX_BETA: f64 = 0.999;

impl NoiseSchedule {
    /// Squared-cosine signal retention with offset `s`; betas clipped to
    /// [`MAX_BETA`], `alpha_bar` is the running product of the clipped values.
    pub fn cosine(steps: usize, s: f64) -> Result<NoiseSchedule> {
        if steps < 2 {
            return Err(DiffusionError::Schedule(format!("need at least 2 steps, got {steps}")));
        }
        if !(s > 0.0 && s < 1.0) {
            return Err(DiffusionError::Schedule(format!("offset {s} must lie in (0, 1)")));
        }
        let f = |t: usize| {
            let u = (t as f64 / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
            u.cos().powi(2)
        };
        let betas = (1..=steps).map(|t| (1.0 - f(t) / f(t - 1)).min(MAX_BETA)).collect();
        NoiseSchedule::from_betas(betas)
    }

    /// Schedule from `beta[1..=T]`. Zero betas are allowed (degenerate test
    /// schedules); `sigma = sqrt(beta)`.
    pub fn from_betas(betas: Vec<f64>) -> Result<NoiseSchedule> {
        if betas.is_empty() {
            return Err(DiffusionError::Schedule("empty beta sequence".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(0.0..1.0).contains(*b)) {
            return Err(DiffusionError::Schedule(format!("beta {b} outside [0, 1)")));
        }
        let mut beta = vec![0.0];
        beta.extend(betas);
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let sigma = beta.iter().map(|b| b.sqrt()).collect();
        Ok(NoiseSchedule { beta, alpha, alpha_bar, sigma })
    }

    /// Same schedule with a noiseless reverse process.
    pub fn without_reverse_noise(mut self) -> NoiseSchedule {
        self.sigma.iter_mut().for_each(|s| *s = 0.0);
        self
    }

    pub fn steps(&self) -> usize {
        self.beta.len() - 1
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(DiffusionError::Timestep { t, max: self.steps() });
        }
        Ok(())
    }

    /// SHA-256 over the step count and the bit patterns of all betas.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.steps() as u64).to_le_bytes());
        for b in &self.beta {
            h.update(b.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

pub fn cosine_schedule(steps: usize, s: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::cosine(steps, s)
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(DiffusionError::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `sqrt(alpha_bar_t)·z0 + sqrt(1 − alpha_bar_t)·eps`.
pub fn q_sample(z0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    check_same(z0, eps, "noise")?;
    let (a, b) = (sched.alpha_bar[t].sqrt(), (1.0 - sched.alpha_bar[t]).sqrt());
    Ok(z0.zip_map(eps, |z, e| a * z + b * e))
}

/// [`q_sample`] with one timestep per leading-axis item.
pub fn q_sample_batch(z0: &Tensor, ts: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    check_same(z0, eps, "noise")?;
    let n = z0.shape()[0];
    if ts.len() != n {
        return Err(DiffusionError::Shape(format!("{} timesteps for a batch of {n}", ts.len())));
    }
    let per = z0.numel() / n.max(1);
    let mut out = z0.clone();
    let (zd, ed) = (z0.data(), eps.data());
    for (i, &t) in ts.iter().enumerate() {
        sched.check_t(t)?;
        let (a, b) = (sched.alpha_bar[t].sqrt(), (1.0 - sched.alpha_bar[t]).sqrt());
        for j in i * per..(i + 1) * per {
            out.data_mut()[j] = a * zd[j] + b * ed[j];
        }
    }
    Ok(out)
}

/// Mean of the reverse transition given the predicted noise.
pub fn posterior_mean(zt: &Tensor, t: usize, eps_hat: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    check_same(zt, eps_hat, "predicted noise")?;
    let inv = 1.0 / sched.alpha[t].sqrt();
    let k = sched.beta[t] / (1.0 - sched.alpha_bar[t]).sqrt();
    Ok(zt.zip_map(eps_hat, |z, e| inv * (z - k * e)))
}

/// A network that predicts the noise in `zt` for timesteps `t` and class
/// indices `class` (one of each per batch item).
pub trait NoiseEstimator {
    fn predict(&self, zt: &Var, t: &[usize], class: &[usize]) -> Result<Var>;

    /// Prediction given a per-item condition latent shaped like `zt`.
    fn predict_hinted(&self, zt: &Var, t: &[usize], class: &[usize], hint: &Var) -> Result<Var> {
        let _ = (zt, t, class, hint);
        Err(DiffusionError::Estimator("estimator takes no condition latent".into()))
    }
}

/// Binds a fixed condition latent so a conditional estimator can drive the
/// plain sampler and loss.
pub struct WithHint<'a, E: ?Sized> {
    pub est: &'a E,
    pub hint: Tensor,
}

impl<E: NoiseEstimator + ?Sized> NoiseEstimator for WithHint<'_, E> {
    fn predict(&self, zt: &Var, t: &[usize], class: &[usize]) -> Result<Var> {
        if self.hint.shape() != zt.shape() {
            return Err(DiffusionError::Shape(format!("condition {:?} vs latent {:?}", self.hint.shape(), zt.shape())));
        }
        self.est.predict_hinted(zt, t, class, &Var::constant(self.hint.clone()))
    }
}

pub fn randn_like<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
}

/// One ancestral step from `t` to `t − 1`; no noise is added at `t = 1`.
pub fn p_sample_step<R: Rng>(
    zt: &Tensor,
    t: usize,
    est: &dyn NoiseEstimator,
    class: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    sched.check_t(t)?;
    let n = zt.shape()[0];
    let eps_hat = no_grad(|| est.predict(&Var::constant(zt.clone()), &vec![t; n], &vec![class; n]))?;
    if eps_hat.shape() != zt.shape() {
        return Err(DiffusionError::Shape(format!(
            "estimator returned {:?} for input {:?}",
            eps_hat.shape(),
            zt.shape()
        )));
    }
    let mu = posterior_mean(zt, t, eps_hat.value(), sched)?;
    if t == 1 || sched.sigma[t] == 0.0 {
        return Ok(mu);
    }
    let noise = randn_like(zt.shape(), rng);
    Ok(mu.zip_map(&noise, |m, e| m + sched.sigma[t] * e))
}

/// Full reverse trajectory from standard-normal noise of `shape`.
pub fn sample<R: Rng>(
    est: &dyn NoiseEstimator,
    shape: &[usize],
    class: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    let mut z = randn_like(shape, rng);
    for t in (1..=sched.steps()).rev() {
        z = p_sample_step(&z, t, est, class, sched, rng)?;
        if !z.all_finite() {
            return Err(DiffusionError::NonFinite { step: t });
        }
    }
    Ok(z)
}

/// Mean squared error between `eps` and the prediction at the given
/// timesteps.
pub fn diffusion_loss_at(
    est: &dyn NoiseEstimator,
    z0: &Tensor,
    class: &[usize],
    ts: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Var> {
    let zt = q_sample_batch(z0, ts, eps, sched)?;
    let pred = est.predict(&Var::constant(zt), ts, class)?;
    if pred.shape() != eps.shape() {
        return Err(DiffusionError::Shape(format!("estimator returned {:?}, expected {:?}", pred.shape(), eps.shape())));
    }
    Ok(pred.sub(&Var::constant(eps.clone())).square().mean())
}

/// Draws one timestep per item uniformly in `1..=T` plus fresh noise and
/// returns the noise-prediction MSE.
pub fn diffusion_loss<R: Rng>(
    est: &dyn NoiseEstimator,
    z0: &Tensor,
    class: &[usize],
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Var> {
    let n = z0.shape()[0];
    let ts: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=sched.steps())).collect();
    let eps = randn_like(z0.shape(), rng);
    diffusion_loss_at(est, z0, class, &ts, &eps, sched)
}

/// Per-channel standardization statistics of latent volumes `(N, C, ...)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentStats {
    pub fn fit(latents: &[Tensor]) -> Result<LatentStats> {
        let c = latents.first().ok_or(DiffusionError::NoData)?.shape()[1];
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut count = 0usize;
        for l in latents {
            let s = l.shape();
            if s[1] != c {
                return Err(DiffusionError::Shape(format!("latent channels {} vs {c}", s[1])));
            }
            let per: usize = s[2..].iter().product();
            for (i, v) in l.data().iter().enumerate() {
                let ch = (i / per) % c;
                sum[ch] += v;
                sq[ch] += v * v;
            }
            count += s[0] * per;
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-6)).collect();
        Ok(LatentStats { mean, std })
    }

    pub fn identity(channels: usize) -> LatentStats {
        LatentStats { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    fn apply(&self, t: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let s = t.shape();
        let per: usize = s[2..].iter().product();
        let c = s[1];
        let mut out = t.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = (i / per) % c;
            *v = f(*v, self.mean[ch], self.std[ch]);
        }
        out
    }

    pub fn standardize(&self, t: &Tensor) -> Tensor {
        self.apply(t, |v, m, s| (v - m) / s)
    }

    pub fn unstandardize(&self, t: &Tensor) -> Tensor {
        self.apply(t, |v, m, s| v * s + m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub cosine_offset: f64,
    pub lr: f64,
    /// Exponent of the polynomial learning-rate decay.
    pub lr_power: f64,
    pub steps: u64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig { timesteps: 1000, cosine_offset: 0.008, lr: 1e-4, lr_power: 0.9, steps: 2000, batch: 1, seed: 0 }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::cosine(self.timesteps, self.cosine_offset)
    }

    /// `lr·(1 − step/steps)^power`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let frac = (step as f64 / self.steps.max(1) as f64).min(1.0);
        self.lr * (1.0 - frac).powf(self.lr_power)
    }
}

/// One standardized training latent `(1, C, ...)` with its class index and,
/// for conditional fine-tuning, the paired condition latent.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainLatent {
    pub latent: Tensor,
    pub class: usize,
    pub hint: Option<Tensor>,
}

impl TrainLatent {
    pub fn new(latent: Tensor, class: usize) -> TrainLatent {
        TrainLatent { latent, class, hint: None }
    }
}

/// Noise-prediction training with Adam and polynomial decay.
pub struct DiffusionTrainer<E> {
    pub model: E,
    pub config: DiffusionConfig,
    pub schedule: NoiseSchedule,
    opt: Adam,
    pub step: u64,
    data: Vec<TrainLatent>,
}

impl<E: NoiseEstimator + Module> DiffusionTrainer<E> {
    pub fn new(model: E, config: DiffusionConfig, data: Vec<TrainLatent>) -> Result<DiffusionTrainer<E>> {
        if data.is_empty() {
            return Err(DiffusionError::NoData);
        }
        let shape = data[0].latent.shape().to_vec();
        if let Some(d) = data.iter().find(|d| d.latent.shape() != shape) {
            return Err(DiffusionError::Shape(format!("latent {:?} vs {:?}", d.latent.shape(), shape)));
        }
        let hinted = data[0].hint.is_some();
        if data.iter().any(|d| d.hint.is_some() != hinted || d.hint.as_ref().is_some_and(|h| h.shape() != shape)) {
            return Err(DiffusionError::Shape("condition latents must be present for all items and match their latents".into()));
        }
        if config.batch == 0 {
            return Err(DiffusionError::Schedule("batch must be positive".into()));
        }
        Ok(DiffusionTrainer { schedule: config.schedule()?, opt: Adam::new(config.lr), model, config, step: 0, data })
    }

    /// Loss of `est` on the batch, timesteps and noise that the next
    /// training step will draw. Condition latents are bound only if `hinted`.
    pub fn next_batch_loss(&self, est: &dyn NoiseEstimator, hinted: bool) -> Result<Var> {
        let mut rng = stream_rng(self.config.seed, self.step + 1);
        let picks: Vec<&TrainLatent> =
            (0..self.config.batch).map(|_| &self.data[rng.gen_range(0..self.data.len())]).collect();
        let z0 = Tensor::concat(&picks.iter().map(|p| &p.latent).collect::<Vec<_>>(), 0);
        let class: Vec<usize> = picks.iter().map(|p| p.class).collect();
        match picks[0].hint.is_some() && hinted {
            true => {
                let hint = Tensor::concat(&picks.iter().map(|p| p.hint.as_ref().expect("checked")).collect::<Vec<_>>(), 0);
                diffusion_loss(&WithHint { est, hint }, &z0, &class, &self.schedule, &mut rng)
            }
            false => diffusion_loss(est, &z0, &class, &self.schedule, &mut rng),
        }
    }

    /// One optimizer step; returns the loss before the update.
    pub fn train_step(&mut self) -> Result<f64> {
        let loss = self.next_batch_loss(&self.model, true)?;
        let v = loss.item();
        if !v.is_finite() {
            return Err(DiffusionError::Diverged { step: self.step });
        }
        let g = loss.backward();
        self.opt.lr = self.config.lr_at(self.step);
        self.opt.step(&mut self.model, &g);
        self.step += 1;
        Ok(v)
    }

    pub fn train(&mut self, steps: u64) -> Result<Vec<f64>> {
        (0..steps).map(|_| self.train_step()).collect()
    }

    /// Model parameters under `model.`, optimizer state under `opt.`, and
    /// the step counter, config and schedule hash as metadata.
    pub fn to_archive(&self) -> TensorArchive {
        let mut a = TensorArchive::new();
        a.insert_all("model.", &self.model.state_dict());
        a.insert_all("opt.", &self.opt.state());
        a.metadata.insert("step".into(), self.step.to_string());
        a.metadata.insert("diffusion".into(), serde_json::to_string(&self.config).expect("config serializes"));
        a.metadata.insert("schedule_hash".into(), self.schedule.hash());
        a
    }

    /// Restores parameters, optimizer state and step from an archive made
    /// by [`DiffusionTrainer::to_archive`].
    pub fn restore(&mut self, a: &TensorArchive) -> Result<()> {
        self.model.load_state_dict(&a.with_prefix("model."))?;
        self.opt.load_state(&a.with_prefix("opt."))?;
        self.step = a.meta("step")?.parse().map_err(|_| DiffusionError::Checkpoint("bad step counter".into()))?;
        if a.meta("schedule_hash")? != self.schedule.hash() {
            return Err(DiffusionError::Checkpoint("schedule differs from the checkpoint".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_archive().save(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Returns the exact noise that maps a memorized `z0` to `zt`.
    struct Oracle {
        z0: Tensor,
        sched: NoiseSchedule,
    }

    impl NoiseEstimator for Oracle {
        fn predict(&self, zt: &Var, t: &[usize], _class: &[usize]) -> Result<Var> {
            let ab = self.sched.alpha_bar[t[0]];
            let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
            Ok(Var::constant(zt.value().zip_map(&self.z0, |z, z0| (z - a * z0) / b)))
        }
    }

    struct Zero;
    impl NoiseEstimator for Zero {
        fn predict(&self, zt: &Var, _t: &[usize], _c: &[usize]) -> Result<Var> {
            Ok(Var::constant(Tensor::zeros(zt.shape())))
        }
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn cosine_bounds_at_1000() {
        let s = cosine_schedule(1000, 0.008).unwrap();
        assert!(s.beta[1..].iter().all(|&b| b > 0.0 && b <= MAX_BETA));
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar[1] > 0.999);
        assert!(s.alpha_bar[1000] / s.alpha_bar[0] < 0.01);
        assert!(s.sigma[2..].iter().all(|&v| v > 0.0));
    }

    #[test]
    fn schedule_rejects_bad_input() {
        assert!(cosine_schedule(1, 0.008).is_err());
        assert!(cosine_schedule(10, 0.0).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.1, 1.0]).is_err());
        assert!(NoiseSchedule::from_betas(vec![]).is_err());
    }

    #[test]
    fn q_sample_degenerate_cases() {
        let z0 = randn_like(&[1, 2, 4, 4, 4], &mut rng(1));
        let eps = randn_like(z0.shape(), &mut rng(2));
        let flat = NoiseSchedule::from_betas(vec![0.0; 5]).unwrap();
        assert_eq!(q_sample(&z0, 3, &eps, &flat).unwrap(), z0);
        let s = cosine_schedule(50, 0.008).unwrap();
        let zt = q_sample(&Tensor::zeros(z0.shape()), 20, &eps, &s).unwrap();
        assert_eq!(zt, eps.scale((1.0 - s.alpha_bar[20]).sqrt()));
        assert!(matches!(q_sample(&z0, 0, &eps, &s), Err(DiffusionError::Timestep { .. })));
        assert!(q_sample(&z0, 51, &eps, &s).is_err());
    }

    #[test]
    fn posterior_mean_identities() {
        let s = cosine_schedule(100, 0.008).unwrap();
        let mut r = rng(3);
        let z0 = randn_like(&[1, 1, 4, 4, 4], &mut r);
        let eps = randn_like(z0.shape(), &mut r);
        let t = 37;
        let zt = q_sample(&z0, t, &eps, &s).unwrap();
        let zero = Tensor::zeros(z0.shape());
        assert_eq!(posterior_mean(&zt, t, &zero, &s).unwrap(), zt.scale(1.0 / s.alpha[t].sqrt()));
        // with the true noise the mean is the Gaussian posterior mean given z0
        let mu = posterior_mean(&zt, t, &eps, &s).unwrap();
        let z0_rec = zt.zip_map(&eps, |z, e| (z - (1.0 - s.alpha_bar[t]).sqrt() * e) / s.alpha_bar[t].sqrt());
        let c0 = s.alpha_bar[t - 1].sqrt() * s.beta[t] / (1.0 - s.alpha_bar[t]);
        let ct = s.alpha[t].sqrt() * (1.0 - s.alpha_bar[t - 1]) / (1.0 - s.alpha_bar[t]);
        let direct = z0_rec.zip_map(&zt, |a, b| c0 * a + ct * b);
        for (a, b) in mu.data().iter().zip(direct.data()) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1e-3));
        }
        assert!(matches!(posterior_mean(&zt, 0, &eps, &s), Err(DiffusionError::Timestep { .. })));
    }

    #[test]
    fn oracle_sampling_recovers_latent() {
        let s = cosine_schedule(100, 0.008).unwrap();
        let z0 = randn_like(&[1, 1, 4, 4, 4], &mut rng(4));
        let oracle = Oracle { z0: z0.clone(), sched: s.clone() };
        let out = sample(&oracle, z0.shape(), 0, &s, &mut rng(5)).unwrap();
        assert!(out.sub(&z0).max_abs() <= 1e-3);
    }

    #[test]
    fn sampling_determinism_and_noise() {
        let s = cosine_schedule(20, 0.008).unwrap();
        let a = sample(&Zero, &[1, 2, 2, 2, 2], 0, &s, &mut rng(6)).unwrap();
        let b = sample(&Zero, &[1, 2, 2, 2, 2], 0, &s, &mut rng(6)).unwrap();
        let c = sample(&Zero, &[1, 2, 2, 2, 2], 0, &s, &mut rng(7)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[1, 2, 2, 2, 2]);
        assert!(a.sub(&c).sq_norm() > 0.0);
        // without reverse noise the result depends only on the start draw
        let quiet = s.clone().without_reverse_noise();
        let mut r1 = rng(8);
        let z_t = randn_like(&[1, 1, 2, 2, 2], &mut r1);
        let mut z1 = z_t.clone();
        let mut z2 = z_t.clone();
        for t in (1..=20).rev() {
            z1 = p_sample_step(&z1, t, &Zero, 0, &quiet, &mut rng(t as u64)).unwrap();
            z2 = p_sample_step(&z2, t, &Zero, 0, &quiet, &mut rng(1000 + t as u64)).unwrap();
        }
        assert_eq!(z1, z2);
    }

    struct Wrong;
    impl NoiseEstimator for Wrong {
        fn predict(&self, _zt: &Var, _t: &[usize], _c: &[usize]) -> Result<Var> {
            Ok(Var::constant(Tensor::zeros(&[1, 1])))
        }
    }

    #[test]
    fn estimator_shape_mismatch_errors() {
        let s = cosine_schedule(10, 0.008).unwrap();
        let z = Tensor::zeros(&[1, 1, 2, 2, 2]);
        assert!(matches!(p_sample_step(&z, 3, &Wrong, 0, &s, &mut rng(0)), Err(DiffusionError::Shape(_))));
    }

    #[test]
    fn loss_reference_values() {
        let s = cosine_schedule(100, 0.008).unwrap();
        let z0 = randn_like(&[1, 2, 4, 4, 4], &mut rng(9));
        let eps = randn_like(z0.shape(), &mut rng(10));
        let oracle = Oracle { z0: z0.clone(), sched: s.clone() };
        let l = diffusion_loss_at(&oracle, &z0, &[0], &[40], &eps, &s).unwrap().item();
        assert!(l < 1e-20);
        // zero estimator: loss is the mean squared noise, ≈ 1 for many elements
        let big = Tensor::zeros(&[1, 1, 40, 40, 40]);
        let l0 = diffusion_loss(&Zero, &big, &[0], &s, &mut rng(11)).unwrap().item();
        assert!((l0 - 1.0).abs() < 0.01, "{l0}");
    }

    #[test]
    fn latent_stats_round_trip() {
        let mut r = rng(12);
        let a = randn_like(&[1, 3, 4, 4, 4], &mut r).map(|v| 2.0 * v + 5.0);
        let b = randn_like(&[1, 3, 4, 4, 4], &mut r).map(|v| 2.0 * v + 5.0);
        let st = LatentStats::fit(&[a.clone(), b]).unwrap();
        let z = st.standardize(&a);
        let back = st.unstandardize(&z);
        assert!(back.sub(&a).max_abs() < 1e-12);
        assert!(st.mean.iter().all(|m| (m - 5.0).abs() < 0.5));
    }

    #[test]
    fn poly_decay_endpoints() {
        let c = DiffusionConfig { lr: 1e-3, steps: 100, ..DiffusionConfig::default() };
        assert_eq!(c.lr_at(0), 1e-3);
        assert_eq!(c.lr_at(100), 0.0);
        assert!(c.lr_at(50) < 1e-3 && c.lr_at(50) > c.lr_at(60));
    }

    /// Mean and variance of `n` chains run `t` single steps from `z0`.
    fn chain_stats(z0: f64, t: usize, s: &NoiseSchedule, n: usize, seed: u64) -> (f64, f64) {
        let mut r = rng(seed);
        let mut xs = vec![z0; n];
        for k in 1..=t {
            let (a, b) = (s.alpha[k].sqrt(), s.beta[k].sqrt());
            for x in xs.iter_mut() {
                *x = a * *x + b * r.sample::<f64, _>(StandardNormal);
            }
        }
        let m = xs.iter().sum::<f64>() / n as f64;
        (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64)
    }

    #[test]
    fn closed_form_matches_iterated_chain() {
        let n = 10_000;
        for steps in [10, 100] {
            let s = cosine_schedule(steps, 0.008).unwrap();
            for t in [1, steps / 2, steps] {
                let z0 = 0.8;
                let (m, v) = chain_stats(z0, t, &s, n, t as u64);
                let (mt, vt) = (s.alpha_bar[t].sqrt() * z0, 1.0 - s.alpha_bar[t]);
                assert!((m - mt).abs() <= 3.0 * (vt / n as f64).sqrt(), "mean t={t}");
                assert!((v - vt).abs() <= 3.0 * vt * (2.0 / (n - 1) as f64).sqrt(), "var t={t}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn cosine_invariants(steps in 2usize..1200, s in 0.001f64..0.05) {
            let sc = cosine_schedule(steps, s).unwrap();
            prop_assert!(sc.beta[1..].iter().all(|&b| b > 0.0 && b <= MAX_BETA));
            prop_assert!(sc.alpha_bar.windows(2).all(|w| w[1] < w[0]));
            prop_assert!(sc.sigma[1..].iter().all(|&v| v > 0.0));
        }

        #[test]
        fn posterior_mean_affine(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0, t in 1usize..50) {
            let s = cosine_schedule(50, 0.008).unwrap();
            let mut r = rng(seed);
            let zt = randn_like(&[8], &mut r);
            let e1 = randn_like(&[8], &mut r);
            let e2 = randn_like(&[8], &mut r);
            let mix = e1.scale(a).add(&e2.scale(b));
            let lhs = posterior_mean(&zt, t, &mix, &s).unwrap();
            let m1 = posterior_mean(&zt, t, &e1, &s).unwrap();
            let m2 = posterior_mean(&zt, t, &e2, &s).unwrap();
            let rhs = m1.scale(a).add(&m2.scale(b)).sub(&zt.scale((a + b - 1.0) / s.alpha[t].sqrt()));
            for (x, y) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((x - y).abs() < 1e-8 * (1.0 + y.abs()));
            }
        }
    }
}
