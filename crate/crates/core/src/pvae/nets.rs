//! Encoder, decoders, slice discriminator and the fixed plane feature map.

use meddiff_tensor::{impl_module, Conv2d, Conv3d, GroupNorm, Module, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::layers::{down_conv, ResBlock3d, Upsample};

/// Spatial reduction per axis of encoder and decoders.
pub const REDUCTION: usize = 4;

/// Residual 3D conv encoder: three width levels joined by two stride-2
/// convolutions, then a pointwise projection to the code dimension.
#[derive(Clone, Debug)]
pub struct Encoder {
    conv_in: Conv3d,
    blocks: Vec<Vec<ResBlock3d>>,
    downs: Vec<Conv3d>,
    norm_out: GroupNorm,
    conv_out: Conv3d,
}
impl_module!(Encoder { conv_in, blocks, downs, norm_out, conv_out });

impl Encoder {
    pub fn new<R: Rng>(widths: [usize; 3], res_blocks: usize, latent: usize, rng: &mut R) -> Encoder {
        let conv_in = Conv3d::same(1, widths[0], 3, rng);
        let mut blocks = Vec::new();
        let mut downs = Vec::new();
        for l in 0..3 {
            blocks.push((0..res_blocks).map(|_| ResBlock3d::new(widths[l], widths[l], None, rng)).collect());
            if l < 2 {
                downs.push(down_conv(widths[l], widths[l + 1], rng));
            }
        }
        Encoder {
            conv_in,
            blocks,
            downs,
            norm_out: GroupNorm::auto(widths[2]),
            conv_out: Conv3d::new(widths[2], latent, [1; 3], [1; 3], [0; 3], rng),
        }
    }

    pub fn forward(&self, x: &Var) -> Var {
        let mut h = self.conv_in.forward(x);
        for (l, level) in self.blocks.iter().enumerate() {
            for b in level {
                h = b.forward(&h, None);
            }
            if let Some(d) = self.downs.get(l) {
                h = d.forward(&h);
            }
        }
        self.conv_out.forward(&self.norm_out.forward(&h).silu())
    }
}

/// Mirror of [`Encoder`] with nearest-neighbour upsampling.
#[derive(Clone, Debug)]
pub struct Decoder {
    conv_in: Conv3d,
    blocks: Vec<Vec<ResBlock3d>>,
    ups: Vec<Upsample>,
    norm_out: GroupNorm,
    conv_out: Conv3d,
}
impl_module!(Decoder { conv_in, blocks, ups, norm_out, conv_out });

impl Decoder {
    pub fn new<R: Rng>(widths: [usize; 3], res_blocks: usize, latent: usize, rng: &mut R) -> Decoder {
        let conv_in = Conv3d::same(latent, widths[2], 3, rng);
        let mut blocks = Vec::new();
        let mut ups = Vec::new();
        for l in (0..3).rev() {
            blocks.push((0..res_blocks).map(|_| ResBlock3d::new(widths[l], widths[l], None, rng)).collect());
            if l > 0 {
                ups.push(Upsample::new(widths[l], widths[l - 1], rng));
            }
        }
        Decoder {
            conv_in,
            blocks,
            ups,
            norm_out: GroupNorm::auto(widths[0]),
            conv_out: Conv3d::same(widths[0], 1, 3, rng),
        }
    }

    pub fn forward(&self, z: &Var) -> Var {
        let mut h = self.conv_in.forward(z);
        for (l, level) in self.blocks.iter().enumerate() {
            for b in level {
                h = b.forward(&h, None);
            }
            if let Some(u) = self.ups.get(l) {
                h = u.forward(&h);
            }
        }
        self.conv_out.forward(&self.norm_out.forward(&h).silu())
    }
}

/// Axial, coronal and sagittal planes of a `(N, 1, H, W, D)` batch through
/// voxel `idx`, as `(N, 1, ·, ·)` images.
pub fn triplanes(x: &Var, idx: [usize; 3]) -> [Var; 3] {
    let s = x.shape().to_vec();
    let (n, h, w, d) = (s[0], s[2], s[3], s[4]);
    [
        x.narrow(4, idx[2], 1).reshape(&[n, 1, h, w]),
        x.narrow(3, idx[1], 1).reshape(&[n, 1, h, d]),
        x.narrow(2, idx[0], 1).reshape(&[n, 1, w, d]),
    ]
}

/// Anything that scores 2D slices with probabilities in (0, 1).
pub trait SliceCritic {
    fn probs(&self, slices: &Var) -> Var;
}

/// Patch discriminator over 2D slices with a sigmoid head.
#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    conv1: Conv2d,
    conv2: Conv2d,
    norm2: GroupNorm,
    head: Conv2d,
}
impl_module!(PatchDiscriminator { conv1, conv2, norm2, head });

impl PatchDiscriminator {
    pub fn new<R: Rng>(width: usize, rng: &mut R) -> PatchDiscriminator {
        PatchDiscriminator {
            conv1: Conv2d::new(1, width, 4, 2, 1, rng),
            conv2: Conv2d::new(width, 2 * width, 4, 2, 1, rng),
            norm2: GroupNorm::auto(2 * width),
            head: Conv2d::new(2 * width, 1, 3, 1, 1, rng),
        }
    }
}

impl SliceCritic for PatchDiscriminator {
    fn probs(&self, x: &Var) -> Var {
        let h = self.conv1.forward(x).leaky_relu(0.2);
        let h = self.norm2.forward(&self.conv2.forward(&h)).leaky_relu(0.2);
        self.head.forward(&h).sigmoid()
    }
}

/// Fixed feature map applied to 2D planes inside the tri-plane loss.
pub trait PlaneFeatures {
    fn features(&self, plane: &Var) -> Var;
    fn identity_hash(&self) -> String;
}

/// Four seeded, untrained 2D conv layers with SiLU activations. The
/// parameters are frozen; gradients flow through to the input only.
#[derive(Clone, Debug)]
pub struct RandomPlaneFeatures {
    layers: Vec<Conv2d>,
    seed: u64,
}
impl_module!(RandomPlaneFeatures { layers });

impl RandomPlaneFeatures {
    pub fn new(seed: u64) -> RandomPlaneFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = [(1, 8, 1), (8, 16, 2), (16, 16, 1), (16, 32, 2)];
        let mut layers: Vec<Conv2d> = spec.iter().map(|&(i, o, s)| Conv2d::new(i, o, 3, s, 1, &mut rng)).collect();
        for l in layers.iter_mut() {
            l.set_trainable(false);
        }
        RandomPlaneFeatures { layers, seed }
    }
}

impl PlaneFeatures for RandomPlaneFeatures {
    fn features(&self, plane: &Var) -> Var {
        let mut h = plane.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h);
            if i + 1 < self.layers.len() {
                h = h.silu();
            }
        }
        h
    }

    fn identity_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("random-plane-conv2d/{}", self.seed));
        h.update(self.params_hash());
        hex::encode(h.finalize())
    }
}
