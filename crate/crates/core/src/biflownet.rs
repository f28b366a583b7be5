//! Dual-flow noise estimator: a per-patch transformer with adaptive
//! layer-norm conditioning and a volumetric U-Net over the whole latent,
//! fused by addition at matching resolutions and at the output.

use std::path::Path;

use meddiff_tensor::{impl_module, no_grad, Conv3d, Embedding, GroupNorm, Linear, Module, Param, Tensor, TensorArchive, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{DiffusionError, NoiseEstimator, NoiseSchedule, Result};
use crate::layers::{down_conv, stream_rng, ResBlock3d, Upsample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiFlowConfig {
    /// Latent channels.
    pub channels: usize,
    /// Per-patch latent extent.
    pub latent_patch: [usize; 3],
    /// Token side inside a patch; a power of two dividing `latent_patch`.
    pub token: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Transformer blocks; the first two and last two feed the U-Net.
    pub depth: usize,
    /// U-Net width per resolution level.
    pub unet_widths: Vec<usize>,
    pub cond_dim: usize,
    pub num_classes: usize,
    pub timesteps: usize,
    /// Offset of the cosine schedule the output head is blended with.
    pub cosine_offset: f64,
    /// Drop the transformer flow entirely (ablation).
    pub unet_only: bool,
    pub seed: u64,
}

impl Default for BiFlowConfig {
    fn default() -> Self {
        BiFlowConfig {
            channels: 8,
            latent_patch: [8; 3],
            token: 2,
            embed_dim: 64,
            heads: 4,
            mlp_ratio: 4,
            depth: 4,
            unet_widths: vec![32, 64, 64],
            cond_dim: 64,
            num_classes: 4,
            timesteps: 1000,
            cosine_offset: 0.008,
            unet_only: false,
            seed: 0,
        }
    }
}

/// Residual blocks per U-Net level; each level exposes two fusion sites.
pub const LEVEL_BLOCKS: usize = 2;

fn bad(msg: String) -> DiffusionError {
    DiffusionError::Estimator(msg)
}

impl BiFlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 4 {
            return Err(bad(format!("depth {} leaves no distinct first-two/last-two blocks", self.depth)));
        }
        if !self.token.is_power_of_two() || self.latent_patch.iter().any(|&p| p == 0 || p % self.token != 0) {
            return Err(bad(format!("token {} must be a power of two dividing {:?}", self.token, self.latent_patch)));
        }
        if self.fusion_level() >= self.unet_widths.len() {
            return Err(bad(format!("token {} needs more than {} U-Net levels", self.token, self.unet_widths.len())));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(bad(format!("{} heads do not split embed dim {}", self.heads, self.embed_dim)));
        }
        if self.channels == 0 || self.cond_dim == 0 || !self.cond_dim.is_multiple_of(2) || self.num_classes == 0 || self.mlp_ratio == 0 {
            return Err(bad("channels, classes and mlp ratio must be positive; cond dim positive and even".into()));
        }
        if self.unet_widths.is_empty() || self.unet_widths.contains(&0) {
            return Err(bad("U-Net widths must be non-empty and positive".into()));
        }
        Ok(())
    }

    /// U-Net level whose resolution equals the token grid.
    pub fn fusion_level(&self) -> usize {
        self.token.trailing_zeros() as usize
    }

    /// Transformer blocks whose outputs are fused, in U-Net order
    /// (encoder site 0, encoder site 1, decoder site 0, decoder site 1).
    pub fn tap_blocks(&self) -> [usize; 4] {
        [0, 1, self.depth - 2, self.depth - 1]
    }

    pub fn tokens_per_patch(&self) -> usize {
        self.latent_patch.iter().map(|p| p / self.token).product()
    }

    pub fn token_dim(&self) -> usize {
        self.channels * self.token.pow(3)
    }
}

/// `(B, C, X, Y, Z)` → `(B·P, C, lx, ly, lz)` with patches in row-major
/// grid order.
pub fn patchify_var(z: &Var, lp: [usize; 3]) -> Result<Var> {
    let s = z.shape().to_vec();
    if s.len() != 5 || (0..3).any(|a| !s[2 + a].is_multiple_of(lp[a])) {
        return Err(DiffusionError::Shape(format!("latent {s:?} is not divisible into patches {lp:?}")));
    }
    let (b, c) = (s[0], s[1]);
    let g = [0, 1, 2].map(|a| s[2 + a] / lp[a]);
    Ok(z.reshape(&[b, c, g[0], lp[0], g[1], lp[1], g[2], lp[2]])
        .permute(&[0, 2, 4, 6, 1, 3, 5, 7])
        .reshape(&[b * g[0] * g[1] * g[2], c, lp[0], lp[1], lp[2]]))
}

/// Inverse of [`patchify_var`] for a patch grid `grid`.
pub fn depatchify_var(p: &Var, grid: [usize; 3]) -> Var {
    let s = p.shape().to_vec();
    let n: usize = grid.iter().product();
    let (b, c) = (s[0] / n, s[1]);
    let lp = [s[2], s[3], s[4]];
    p.reshape(&[b, grid[0], grid[1], grid[2], c, lp[0], lp[1], lp[2]])
        .permute(&[0, 4, 1, 5, 2, 6, 3, 7])
        .reshape(&[b, c, grid[0] * lp[0], grid[1] * lp[1], grid[2] * lp[2]])
}

pub fn patchify_latent(z: &Tensor, lp: [usize; 3]) -> Result<Tensor> {
    no_grad(|| patchify_var(&Var::constant(z.clone()), lp).map(|v| v.value().clone()))
}

pub fn depatchify_latent(p: &Tensor, grid: [usize; 3]) -> Tensor {
    no_grad(|| depatchify_var(&Var::constant(p.clone()), grid).value().clone())
}

/// Sinusoidal timestep features followed by a two-layer MLP, plus a
/// learned class vector.
#[derive(Clone, Debug)]
pub struct ConditionEmbedding {
    time1: Linear,
    time2: Linear,
    class: Embedding,
}
impl_module!(ConditionEmbedding { time1, time2, class });

pub fn timestep_features(t: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp() * ti as f64);
        let (c, s): (Vec<f64>, Vec<f64>) = freqs.map(|a| (a.cos(), a.sin())).unzip();
        out.extend(c);
        out.extend(s);
    }
    Tensor::new(&[t.len(), dim], out)
}

impl ConditionEmbedding {
    pub fn new<R: Rng>(cond: usize, classes: usize, rng: &mut R) -> ConditionEmbedding {
        ConditionEmbedding {
            time1: Linear::new(cond, cond, rng),
            time2: Linear::new(cond, cond, rng),
            class: Embedding::new(classes, cond, rng),
        }
    }

    /// `(B, cond)` conditioning vectors.
    pub fn forward(&self, t: &[usize], class: &[usize]) -> Result<Var> {
        if t.len() != class.len() {
            return Err(DiffusionError::Shape(format!("{} timesteps for {} class labels", t.len(), class.len())));
        }
        if let Some(c) = class.iter().find(|&&c| c >= self.class.len()) {
            return Err(bad(format!("unknown class index {c} (model has {} classes)", self.class.len())));
        }
        let dim = self.time1.in_dim();
        let te = self.time2.forward(&self.time1.forward(&Var::constant(timestep_features(t, dim))).silu());
        Ok(te.add(&self.class.forward(class)))
    }
}

/// Transformer block with adaptive layer-norm shift/scale/gate.
#[derive(Clone, Debug)]
pub struct DitBlock {
    ada: Linear,
    qkv: Linear,
    proj: Linear,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}
impl_module!(DitBlock { ada, qkv, proj, fc1, fc2 });

fn modulate(x: &Var, shift: &Var, scale: &Var) -> Var {
    x.layer_norm(1e-6).mul(&scale.add_scalar(1.0)).add(shift)
}

impl DitBlock {
    pub fn new<R: Rng>(e: usize, heads: usize, mlp: usize, cond: usize, rng: &mut R) -> DitBlock {
        DitBlock {
            ada: Linear::scaled(cond, 6 * e, 0.02, rng),
            qkv: Linear::new(e, 3 * e, rng),
            proj: Linear::new(e, e, rng),
            fc1: Linear::new(e, mlp * e, rng),
            fc2: Linear::new(mlp * e, e, rng),
            heads,
        }
    }

    fn attention(&self, x: &Var) -> Var {
        let s = x.shape().to_vec();
        let (b, n, e) = (s[0], s[1], s[2]);
        let h = self.heads;
        let dh = e / h;
        let qkv = self.qkv.forward(x).reshape(&[b, n, 3, h, dh]).permute(&[2, 0, 3, 1, 4]);
        let part = |i: usize| qkv.narrow(0, i, 1).reshape(&[b * h, n, dh]);
        let (q, k, v) = (part(0), part(1), part(2));
        let att = q.matmul(&k.permute(&[0, 2, 1])).scale(1.0 / (dh as f64).sqrt()).softmax_last();
        let o = att.matmul(&v).reshape(&[b, h, n, dh]).permute(&[0, 2, 1, 3]).reshape(&[b, n, e]);
        self.proj.forward(&o)
    }

    /// `x: (B', N, E)`, `cond: (B', cond)`.
    pub fn forward(&self, x: &Var, cond: &Var) -> Var {
        let e = x.shape()[2];
        let b = x.shape()[0];
        let m = self.ada.forward(&cond.silu()).reshape(&[b, 1, 6 * e]);
        let chunk = |i: usize| m.narrow(2, i * e, e);
        let h = modulate(x, &chunk(0), &chunk(1));
        let x = x.add(&chunk(2).mul(&self.attention(&h)));
        let h = modulate(&x, &chunk(3), &chunk(4));
        let mlp = self.fc2.forward(&self.fc1.forward(&h).gelu());
        x.add(&chunk(5).mul(&mlp))
    }
}

/// Intra-patch flow: tokens of each latent patch pass through shared
/// transformer blocks independently of all other patches.
#[derive(Clone, Debug)]
pub struct Dit {
    pub embed: Linear,
    pub pos: Param,
    pub blocks: Vec<DitBlock>,
    final_ada: Linear,
    final_out: Linear,
}
impl_module!(Dit { embed, pos, blocks, final_ada, final_out });

/// Per-patch flow results: fusion taps on the token grid and the
/// reassembled noise prediction.
pub struct IntraOutput {
    /// `(B, E, X/token, Y/token, Z/token)` after each tap block.
    pub taps: Vec<Var>,
    pub out: Var,
}

impl Dit {
    pub fn new<R: Rng>(cfg: &BiFlowConfig, rng: &mut R) -> Dit {
        let e = cfg.embed_dim;
        Dit {
            embed: Linear::new(cfg.token_dim(), e, rng),
            pos: Param::new(Tensor::randn(&[1, cfg.tokens_per_patch(), e], 0.02, rng)),
            blocks: (0..cfg.depth).map(|_| DitBlock::new(e, cfg.heads, cfg.mlp_ratio, cfg.cond_dim, rng)).collect(),
            final_ada: Linear::scaled(cfg.cond_dim, 2 * e, 0.02, rng),
            final_out: Linear::scaled(e, cfg.token_dim(), 0.02, rng),
        }
    }

    /// `(B·P, C, lp)` patches → `(B·P, N, C·k³)` raw token vectors.
    pub fn tokenize(p: &Var, k: usize) -> Var {
        let s = p.shape().to_vec();
        let (bp, c) = (s[0], s[1]);
        let g = [s[2] / k, s[3] / k, s[4] / k];
        p.reshape(&[bp, c, g[0], k, g[1], k, g[2], k])
            .permute(&[0, 2, 4, 6, 1, 3, 5, 7])
            .reshape(&[bp, g[0] * g[1] * g[2], c * k * k * k])
    }

    fn untokenize(t: &Var, c: usize, k: usize, lp: [usize; 3]) -> Var {
        let bp = t.shape()[0];
        let g = lp.map(|l| l / k);
        t.reshape(&[bp, g[0], g[1], g[2], c, k, k, k])
            .permute(&[0, 4, 1, 5, 2, 6, 3, 7])
            .reshape(&[bp, c, lp[0], lp[1], lp[2]])
    }

    /// Token features `(B·P, N, E)` → token grid `(B, E, X/k, Y/k, Z/k)`.
    pub fn tokens_to_volume(h: &Var, lp: [usize; 3], k: usize, grid: [usize; 3]) -> Var {
        let s = h.shape().to_vec();
        let (bp, e) = (s[0], s[2]);
        let g = lp.map(|l| l / k);
        let per_patch = h.reshape(&[bp, g[0], g[1], g[2], e]).permute(&[0, 4, 1, 2, 3]);
        depatchify_var(&per_patch, grid)
    }

    /// Embedded tokens `(B·P, N, E)` of a latent batch.
    pub fn embed_tokens(&self, zt: &Var, cfg: &BiFlowConfig) -> Result<Var> {
        let p = patchify_var(zt, cfg.latent_patch)?;
        let tok = Dit::tokenize(&p, cfg.token);
        Ok(self.embed.forward(&tok).add(&self.pos.var()))
    }

    /// Runs all blocks on `h`, handing the output of each listed block to `on_tap`.
    pub fn run_blocks(&self, mut h: Var, cond: &Var, taps: &[usize], mut on_tap: impl FnMut(usize, &Var)) -> Var {
        for (i, blk) in self.blocks.iter().enumerate() {
            h = blk.forward(&h, cond);
            if taps.contains(&i) {
                on_tap(i, &h);
            }
        }
        h
    }

    fn head(&self, h: &Var, cond: &Var) -> Var {
        let e = h.shape()[2];
        let b = h.shape()[0];
        let m = self.final_ada.forward(&cond.silu()).reshape(&[b, 1, 2 * e]);
        self.final_out.forward(&modulate(h, &m.narrow(2, 0, e), &m.narrow(2, e, e)))
    }
}

/// Repeats per-item conditioning `(B, D)` once per patch → `(B·P, D)`.
pub fn repeat_per_patch(cond: &Var, patches: usize) -> Var {
    let (b, d) = (cond.shape()[0], cond.shape()[1]);
    cond.reshape(&[b, 1, d]).broadcast_to(&[b, patches, d]).reshape(&[b * patches, d])
}

/// Inter-patch flow: a 3D U-Net over the whole latent volume with
/// additive conditioning in every residual block.
#[derive(Clone, Debug)]
pub struct UNet {
    pub conv_in: Conv3d,
    pub enc: Vec<Vec<ResBlock3d>>,
    pub downs: Vec<Conv3d>,
    pub mid: ResBlock3d,
    ups: Vec<Upsample>,
    dec: Vec<Vec<ResBlock3d>>,
    norm_out: GroupNorm,
    conv_out: Conv3d,
}
impl_module!(UNet { conv_in, enc, downs, mid, ups, dec, norm_out, conv_out });

/// Features added at the two sites of one U-Net level.
#[derive(Clone, Default)]
pub struct LevelInjection {
    pub level: usize,
    pub enc: Vec<Var>,
    pub dec: Vec<Var>,
}

/// Residuals a control adapter adds to the U-Net decoder inputs (skips and
/// mid block) and to the last transformer fusion tap.
#[derive(Clone)]
pub struct ControlResiduals {
    pub skips: Vec<Var>,
    pub mid: Var,
    pub tap: Option<Var>,
}

impl UNet {
    pub fn new<R: Rng>(channels: usize, widths: &[usize], cond: usize, rng: &mut R) -> UNet {
        let levels = widths.len();
        let enc = (0..levels)
            .map(|l| (0..LEVEL_BLOCKS).map(|_| ResBlock3d::new(widths[l], widths[l], Some(cond), rng)).collect())
            .collect();
        let downs = (0..levels - 1).map(|l| down_conv(widths[l], widths[l + 1], rng)).collect();
        let mid = ResBlock3d::new(widths[levels - 1], widths[levels - 1], Some(cond), rng);
        let ups = (0..levels - 1).map(|l| Upsample::new(widths[l + 1], widths[l], rng)).collect();
        let dec = (0..levels)
            .map(|l| {
                vec![
                    ResBlock3d::new(2 * widths[l], widths[l], Some(cond), rng),
                    ResBlock3d::new(widths[l], widths[l], Some(cond), rng),
                ]
            })
            .collect();
        UNet {
            conv_in: Conv3d::same(channels, widths[0], 3, rng),
            enc,
            downs,
            mid,
            ups,
            dec,
            norm_out: GroupNorm::auto(widths[0]),
            conv_out: Conv3d::same(widths[0], channels, 3, rng),
        }
    }

    pub fn levels(&self) -> usize {
        self.enc.len()
    }

    /// Encoder half from stem features; returns per-level skips and the mid output.
    pub fn encode(&self, h: Var, cond: &Var, inj: Option<&LevelInjection>) -> Result<(Vec<Var>, Var)> {
        encode_levels(&self.enc, &self.downs, &self.mid, h, cond, inj)
    }

    pub fn decode(&self, mut h: Var, skips: &[Var], cond: &Var, inj: Option<&LevelInjection>) -> Result<Var> {
        for l in (0..self.levels()).rev() {
            if l + 1 < self.levels() {
                h = self.ups[l].forward(&h);
            }
            h = Var::concat(&[h, skips[l].clone()], 1);
            for (i, blk) in self.dec[l].iter().enumerate() {
                h = blk.forward(&h, Some(cond));
                if let Some(f) = inj.filter(|j| j.level == l).and_then(|j| j.dec.get(i)) {
                    h = add_aligned(&h, f)?;
                }
            }
        }
        Ok(self.conv_out.forward(&self.norm_out.forward(&h).silu()))
    }

    pub fn forward(&self, x: &Var, cond: &Var, inj: Option<&LevelInjection>, control: Option<&ControlResiduals>) -> Result<Var> {
        let (mut skips, mut mid) = self.encode(self.conv_in.forward(x), cond, inj)?;
        if let Some(c) = control {
            if c.skips.len() != skips.len() {
                return Err(DiffusionError::Shape(format!("{} control skips for {} levels", c.skips.len(), skips.len())));
            }
            for (s, r) in skips.iter_mut().zip(&c.skips) {
                *s = add_aligned(s, r)?;
            }
            mid = add_aligned(&mid, &c.mid)?;
        }
        self.decode(mid, &skips, cond, inj)
    }
}

/// Shared encoder-half walk, also used by control adapters holding a copy.
pub fn encode_levels(
    enc: &[Vec<ResBlock3d>],
    downs: &[Conv3d],
    mid: &ResBlock3d,
    mut h: Var,
    cond: &Var,
    inj: Option<&LevelInjection>,
) -> Result<(Vec<Var>, Var)> {
    let mut skips = Vec::with_capacity(enc.len());
    for (l, blocks) in enc.iter().enumerate() {
        for (i, blk) in blocks.iter().enumerate() {
            h = blk.forward(&h, Some(cond));
            if let Some(f) = inj.filter(|j| j.level == l).and_then(|j| j.enc.get(i)) {
                h = add_aligned(&h, f)?;
            }
        }
        skips.push(h.clone());
        if l + 1 < enc.len() {
            h = downs[l].forward(&h);
        }
    }
    Ok((skips, mid.forward(&h, Some(cond))))
}

fn add_aligned(a: &Var, b: &Var) -> Result<Var> {
    if a.shape() != b.shape() {
        return Err(DiffusionError::Shape(format!("fusion of {:?} with {:?}", a.shape(), b.shape())));
    }
    Ok(a.add(b))
}

/// Element-wise fusion of a projected transformer tap into U-Net features.
pub fn fuse(dit: &Var, unet: &Var) -> Result<Var> {
    add_aligned(unet, dit)
}

#[derive(Clone, Debug)]
pub struct BiFlowNet {
    pub config: BiFlowConfig,
    pub cond: ConditionEmbedding,
    pub dit: Option<Dit>,
    /// 1×1×1 maps from the embed dim to the fusion-level U-Net width.
    pub tap_proj: Vec<Conv3d>,
    pub unet: UNet,
    /// `(√ᾱ_t, √(1 − ᾱ_t))` for `t` in `0..=T`.
    blend: Vec<(f64, f64)>,
}
impl_module!(BiFlowNet { cond, dit, tap_proj, unet });

impl BiFlowNet {
    pub fn new(config: BiFlowConfig) -> Result<BiFlowNet> {
        config.validate()?;
        let mut rng = stream_rng(config.seed, 0);
        let cond = ConditionEmbedding::new(config.cond_dim, config.num_classes, &mut rng);
        let (dit, tap_proj) = if config.unet_only {
            (None, Vec::new())
        } else {
            let w = config.unet_widths[config.fusion_level()];
            let proj = (0..4).map(|_| Conv3d::new(config.embed_dim, w, [1; 3], [1; 3], [0; 3], &mut rng)).collect();
            (Some(Dit::new(&config, &mut rng)), proj)
        };
        let unet = UNet::new(config.channels, &config.unet_widths, config.cond_dim, &mut rng);
        let sched = NoiseSchedule::cosine(config.timesteps, config.cosine_offset)?;
        let blend = sched.alpha_bar.iter().map(|&ab| (ab.sqrt(), (1.0 - ab).sqrt())).collect();
        Ok(BiFlowNet { config, cond, dit, tap_proj, unet, blend })
    }

    /// Patch grid of a latent batch, after shape checks.
    pub fn grid_of(&self, shape: &[usize]) -> Result<[usize; 3]> {
        let c = &self.config;
        let down = 1 << (c.unet_widths.len() - 1);
        let ok = shape.len() == 5
            && shape[1] == c.channels
            && (0..3).all(|a| shape[2 + a].is_multiple_of(c.latent_patch[a]) && shape[2 + a].is_multiple_of(down) && shape[2 + a] > 0);
        if !ok {
            return Err(DiffusionError::Shape(format!(
                "latent {shape:?} incompatible with {} channels, patches {:?} and {} U-Net levels",
                c.channels,
                c.latent_patch,
                c.unet_widths.len()
            )));
        }
        Ok([0, 1, 2].map(|a| shape[2 + a] / c.latent_patch[a]))
    }

    /// Transformer flow alone: per-patch output plus projected fusion taps.
    /// `tap_residual` is added to the last projected tap.
    pub fn intra_patch_forward(&self, zt: &Var, cond: &Var, tap_residual: Option<&Var>) -> Result<Option<IntraOutput>> {
        let Some(dit) = &self.dit else { return Ok(None) };
        let cfg = &self.config;
        let grid = self.grid_of(zt.shape())?;
        let patches: usize = grid.iter().product();
        let cond_p = repeat_per_patch(cond, patches);
        let h = dit.embed_tokens(zt, cfg)?;
        let taps_at = cfg.tap_blocks();
        let mut taps = Vec::with_capacity(4);
        let h = dit.run_blocks(h, &cond_p, &taps_at, |i, f| {
            let slot = taps_at.iter().position(|&t| t == i).expect("tap block");
            let vol = Dit::tokens_to_volume(f, cfg.latent_patch, cfg.token, grid);
            taps.push(self.tap_proj[slot].forward(&vol));
        });
        if let Some(r) = tap_residual {
            taps[3] = add_aligned(&taps[3], r)?;
        }
        let out_tokens = dit.head(&h, &cond_p);
        let out = depatchify_var(&Dit::untokenize(&out_tokens, cfg.channels, cfg.token, cfg.latent_patch), grid);
        Ok(Some(IntraOutput { taps, out }))
    }

    pub fn injection_from(&self, intra: &IntraOutput) -> LevelInjection {
        LevelInjection {
            level: self.config.fusion_level(),
            enc: intra.taps[..2].to_vec(),
            dec: intra.taps[2..].to_vec(),
        }
    }

    pub fn forward_with(&self, zt: &Var, t: &[usize], class: &[usize], control: Option<&ControlResiduals>) -> Result<Var> {
        self.grid_of(zt.shape())?;
        if t.len() != zt.shape()[0] {
            return Err(DiffusionError::Shape(format!("{} timesteps for a batch of {}", t.len(), zt.shape()[0])));
        }
        if let Some(s) = t.iter().find(|&&s| s > self.config.timesteps) {
            return Err(bad(format!("timestep {s} beyond the model's {} steps", self.config.timesteps)));
        }
        let cond = self.cond.forward(t, class)?;
        let intra = self.intra_patch_forward(zt, &cond, control.and_then(|c| c.tap.as_ref()))?;
        let inj = intra.as_ref().map(|i| self.injection_from(i));
        let out = self.unet.forward(zt, &cond, inj.as_ref(), control)?;
        let out = match intra {
            Some(i) => out.add(&i.out),
            None => out,
        };
        Ok(self.head(zt, t, &out))
    }

    /// Noise estimate `√ᾱ_t·f + √(1 − ᾱ_t)·z_t` from the network output `f`.
    /// Near `t = T` the estimate tends to `z_t` itself, so the large
    /// posterior-mean gain of the last steps does not amplify network error.
    fn head(&self, zt: &Var, t: &[usize], f: &Var) -> Var {
        let n = t.len();
        let (a, b): (Vec<f64>, Vec<f64>) = t.iter().map(|&s| self.blend[s]).unzip();
        let a = Var::constant(Tensor::new(&[n, 1, 1, 1, 1], a));
        let b = Var::constant(Tensor::new(&[n, 1, 1, 1, 1], b));
        f.mul(&a).add(&zt.mul(&b))
    }

    pub fn to_archive(&self) -> TensorArchive {
        let mut a = TensorArchive::new();
        a.insert_all("model.", &self.state_dict());
        a.metadata.insert("architecture".into(), self.architecture_json());
        a
    }

    pub fn architecture_json(&self) -> String {
        serde_json::to_string(&self.config).expect("config serializes")
    }

    /// Rebuilds from the `architecture` metadata and `model.` tensors.
    pub fn from_archive(a: &TensorArchive) -> Result<BiFlowNet> {
        let cfg: BiFlowConfig = serde_json::from_str(a.meta("architecture")?)
            .map_err(|e| DiffusionError::Checkpoint(format!("architecture block: {e}")))?;
        let mut m = BiFlowNet::new(cfg)?;
        m.load_state_dict(&a.with_prefix("model."))?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_archive().save(path)?)
    }

    pub fn load(path: &Path) -> Result<BiFlowNet> {
        BiFlowNet::from_archive(&TensorArchive::load(path)?)
    }
}

impl NoiseEstimator for BiFlowNet {
    fn predict(&self, zt: &Var, t: &[usize], class: &[usize]) -> Result<Var> {
        self.forward_with(zt, t, class, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::randn_like;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn toy() -> BiFlowConfig {
        BiFlowConfig {
            channels: 2,
            latent_patch: [2; 3],
            token: 1,
            embed_dim: 8,
            heads: 2,
            mlp_ratio: 2,
            depth: 4,
            unet_widths: vec![4, 4],
            cond_dim: 8,
            num_classes: 2,
            timesteps: 10,
            cosine_offset: 0.008,
            unet_only: false,
            seed: 3,
        }
    }

    fn rnd(shape: &[usize], seed: u64) -> Tensor {
        randn_like(shape, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn patchify_examples() {
        let z = rnd(&[1, 3, 4, 6, 2], 1);
        assert_eq!(patchify_latent(&z, [4, 6, 2]).unwrap(), z);
        let p = patchify_latent(&z, [2, 3, 2]).unwrap();
        assert_eq!(p.shape(), &[4, 3, 2, 3, 2]);
        // patch index 2 sits at grid (1, 0, 0)
        assert_eq!(p.narrow(0, 2, 1), z.narrow(2, 2, 2).narrow(3, 0, 3));
        assert_eq!(depatchify_latent(&p, [2, 2, 1]), z);
        assert!(patchify_latent(&z, [3, 3, 2]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(BiFlowConfig { depth: 3, ..toy() }.validate().is_err());
        assert!(BiFlowConfig { token: 3, ..toy() }.validate().is_err());
        assert!(BiFlowConfig { token: 4, ..toy() }.validate().is_err());
        assert!(BiFlowConfig { heads: 3, ..toy() }.validate().is_err());
        assert!(BiFlowConfig::default().validate().is_ok());
    }

    #[test]
    fn output_shape_and_determinism() {
        let m = BiFlowNet::new(toy()).unwrap();
        let z = Var::constant(rnd(&[2, 2, 4, 4, 4], 2));
        let a = m.predict(&z, &[3, 7], &[0, 1]).unwrap();
        assert_eq!(a.shape(), z.shape());
        assert_eq!(m.predict(&z, &[3, 7], &[0, 1]).unwrap().value(), a.value());
        assert!(matches!(m.predict(&z, &[3, 7], &[0, 2]), Err(DiffusionError::Estimator(_))));
        assert!(m.predict(&Var::constant(rnd(&[1, 2, 3, 4, 4], 2)), &[1], &[0]).is_err());
    }

    #[test]
    fn intra_flow_is_patch_local_and_equivariant() {
        let m = BiFlowNet::new(toy()).unwrap();
        let cond = m.cond.forward(&[5], &[1]).unwrap();
        let z = rnd(&[1, 2, 4, 4, 4], 4);
        let base = m.intra_patch_forward(&Var::constant(z.clone()), &cond, None).unwrap().unwrap().out;
        let mut z2 = z.clone();
        z2.data_mut()[0] += 0.5; // inside patch 0
        let pert = m.intra_patch_forward(&Var::constant(z2), &cond, None).unwrap().unwrap().out;
        let pb = patchify_latent(base.value(), [2; 3]).unwrap();
        let pp = patchify_latent(pert.value(), [2; 3]).unwrap();
        assert_ne!(pb.narrow(0, 0, 1), pp.narrow(0, 0, 1));
        for j in 1..8 {
            assert_eq!(pb.narrow(0, j, 1), pp.narrow(0, j, 1));
        }
        // swapping two patches swaps their outputs
        let mut parts = patchify_latent(&z, [2; 3]).unwrap();
        let (a, b) = (parts.narrow(0, 1, 1), parts.narrow(0, 6, 1));
        let per = a.numel();
        parts.data_mut()[per..2 * per].copy_from_slice(b.data());
        parts.data_mut()[6 * per..7 * per].copy_from_slice(a.data());
        let zs = depatchify_latent(&parts, [2; 3]);
        let sw = m.intra_patch_forward(&Var::constant(zs), &cond, None).unwrap().unwrap().out;
        let ps = patchify_latent(sw.value(), [2; 3]).unwrap();
        assert_eq!(ps.narrow(0, 1, 1), pb.narrow(0, 6, 1));
        assert_eq!(ps.narrow(0, 6, 1), pb.narrow(0, 1, 1));
    }

    #[test]
    fn identical_patches_identical_outputs() {
        let m = BiFlowNet::new(toy()).unwrap();
        let cond = m.cond.forward(&[2], &[0]).unwrap();
        let one = rnd(&[1, 2, 2, 2, 2], 5);
        let parts = Tensor::concat(&[&one, &one, &one, &one, &one, &one, &one, &one], 0);
        let z = depatchify_latent(&parts, [2; 3]);
        let out = m.intra_patch_forward(&Var::constant(z), &cond, None).unwrap().unwrap().out;
        let p = patchify_latent(out.value(), [2; 3]).unwrap();
        for j in 1..8 {
            assert_eq!(p.narrow(0, j, 1), p.narrow(0, 0, 1));
        }
    }

    #[test]
    fn zero_injection_is_plain_unet() {
        let m = BiFlowNet::new(toy()).unwrap();
        let cond = m.cond.forward(&[4], &[0]).unwrap();
        let z = Var::constant(rnd(&[1, 2, 4, 4, 4], 6));
        let plain = m.unet.forward(&z, &cond, None, None).unwrap();
        let zeros = |s: &[usize]| Var::constant(Tensor::zeros(s));
        let inj = LevelInjection { level: 0, enc: vec![zeros(&[1, 4, 4, 4, 4]); 2], dec: vec![zeros(&[1, 4, 4, 4, 4]); 2] };
        assert_eq!(m.unet.forward(&z, &cond, Some(&inj), None).unwrap().value(), plain.value());
        let bad = LevelInjection { level: 0, enc: vec![zeros(&[1, 4, 2, 2, 2])], dec: vec![] };
        assert!(matches!(m.unet.forward(&z, &cond, Some(&bad), None), Err(DiffusionError::Shape(_))));
    }

    #[test]
    fn fuse_is_commutative_addition() {
        let a = Var::constant(rnd(&[1, 2, 2, 2, 2], 7));
        let b = Var::constant(rnd(&[1, 2, 2, 2, 2], 8));
        assert_eq!(fuse(&a, &b).unwrap().value(), fuse(&b, &a).unwrap().value());
        let z = Var::constant(Tensor::zeros(&[1, 2, 2, 2, 2]));
        assert_eq!(fuse(&z, &b).unwrap().value(), b.value());
        assert!(fuse(&a, &Var::constant(Tensor::zeros(&[1, 2, 2, 2, 1]))).is_err());
    }

    #[test]
    fn unet_couples_distant_voxels() {
        let m = BiFlowNet { dit: None, tap_proj: vec![], ..BiFlowNet::new(toy()).unwrap() };
        let cond = m.cond.forward(&[4], &[0]).unwrap();
        let z = rnd(&[1, 2, 8, 8, 8], 9);
        let mut z2 = z.clone();
        z2.data_mut()[0] += 1.0;
        let a = m.unet.forward(&Var::constant(z), &cond, None, None).unwrap();
        let b = m.unet.forward(&Var::constant(z2), &cond, None, None).unwrap();
        let last = a.value().numel() - 1;
        assert_ne!(a.value().data()[last], b.value().data()[last]);
    }

    #[test]
    fn both_flows_receive_gradients() {
        let m = BiFlowNet::new(toy()).unwrap();
        let z = Var::constant(rnd(&[1, 2, 4, 4, 4], 10));
        let loss = m.predict(&z, &[6], &[1]).unwrap().square().mean();
        let g = loss.backward();
        let dit = m.dit.as_ref().unwrap();
        let nz = |p: &Param| g.param(p).is_some_and(|t| t.max_abs() > 1e-10);
        assert!(dit.named_params().iter().all(|(_, p)| nz(p)));
        // biases feeding straight into a norm legitimately get ~0
        for (n, p) in m.unet.named_params() {
            if n.ends_with("weight") {
                assert!(nz(p), "{n}");
            }
        }
        let cond: Vec<_> = m.cond.named_params();
        assert!(cond.iter().all(|(_, p)| nz(p)));
    }

    #[test]
    fn archive_round_trip() {
        let m = BiFlowNet::new(toy()).unwrap();
        let back = BiFlowNet::from_archive(&m.to_archive()).unwrap();
        assert_eq!(back.params_hash(), m.params_hash());
        let z = Var::constant(rnd(&[1, 2, 4, 4, 4], 11));
        assert_eq!(back.predict(&z, &[2], &[0]).unwrap().value(), m.predict(&z, &[2], &[0]).unwrap().value());
    }

    #[test]
    fn timestep_embedding_is_deterministic() {
        let m = BiFlowNet::new(toy()).unwrap();
        let a = m.cond.forward(&[3, 9], &[1, 0]).unwrap();
        let b = m.cond.forward(&[3, 9], &[1, 0]).unwrap();
        assert_eq!(a.value(), b.value());
        assert_ne!(a.value().narrow(0, 0, 1), a.value().narrow(0, 1, 1));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(5))]

        #[test]
        fn output_shape_over_configs(seed in any::<u64>(), c in 1usize..4, token_log in 0u32..2, gx in 1usize..3, gz in 1usize..3) {
            let token = 1usize << token_log;
            let lp = 2 * token;
            let cfg = BiFlowConfig {
                channels: c, latent_patch: [lp; 3], token, embed_dim: 8, heads: 2, mlp_ratio: 1, depth: 4,
                unet_widths: vec![4, 4], cond_dim: 4, num_classes: 1, seed, ..BiFlowConfig::default()
            };
            let m = BiFlowNet::new(cfg).unwrap();
            let z = Var::constant(rnd(&[1, c, gx * lp, lp, gz * lp], seed));
            let out = m.predict(&z, &[1], &[0]).unwrap();
            prop_assert_eq!(out.shape(), z.shape());
        }

        #[test]
        fn patchify_round_trip(seed in any::<u64>(), g in prop::array::uniform3(1usize..4), lp in prop::array::uniform3(1usize..4), c in 1usize..3, b in 1usize..3) {
            let z = rnd(&[b, c, g[0] * lp[0], g[1] * lp[1], g[2] * lp[2]], seed);
            let p = patchify_latent(&z, lp).unwrap();
            prop_assert_eq!(depatchify_latent(&p, g), z);
        }
    }
}
