//! Building blocks shared by the autoencoder and the noise estimator.

use meddiff_tensor::{impl_module, Conv3d, GroupNorm, Linear, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Deterministic RNG for `(seed, stream)`, e.g. one stream per training step.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Child seed for a named component.
pub fn sub_seed(seed: u64, tag: u64) -> u64 {
    stream_rng(seed, tag.wrapping_add(1 << 40)).gen()
}

/// GroupNorm → SiLU → conv, twice, with an optional additive conditioning
/// vector after the first conv and a 1×1×1 skip when widths differ.
#[derive(Clone, Debug)]
pub struct ResBlock3d {
    norm1: GroupNorm,
    conv1: Conv3d,
    cond: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv3d,
    skip: Option<Conv3d>,
}
impl_module!(ResBlock3d { norm1, conv1, cond, norm2, conv2, skip });

impl ResBlock3d {
    pub fn new<R: Rng>(cin: usize, cout: usize, cond_dim: Option<usize>, rng: &mut R) -> ResBlock3d {
        ResBlock3d {
            norm1: GroupNorm::auto(cin),
            conv1: Conv3d::same(cin, cout, 3, rng),
            cond: cond_dim.map(|d| Linear::new(d, cout, rng)),
            norm2: GroupNorm::auto(cout),
            conv2: Conv3d::same(cout, cout, 3, rng),
            skip: (cin != cout).then(|| Conv3d::new(cin, cout, [1; 3], [1; 3], [0; 3], rng)),
        }
    }

    pub fn forward(&self, x: &Var, cond: Option<&Var>) -> Var {
        let h = self.conv1.forward(&self.norm1.forward(x).silu());
        let mut h = self.norm2.forward(&h);
        // shift after the norm so per-channel groups cannot cancel it
        if let (Some(lin), Some(c)) = (&self.cond, cond) {
            let e = lin.forward(&c.silu());
            let n = e.shape()[0];
            let ch = e.shape()[1];
            h = h.add(&e.reshape(&[n, ch, 1, 1, 1]));
        }
        let h = self.conv2.forward(&h.silu());
        match &self.skip {
            Some(s) => s.forward(x).add(&h),
            None => x.add(&h),
        }
    }
}

/// Stride-2 3×3×3 convolution.
pub fn down_conv<R: Rng>(cin: usize, cout: usize, rng: &mut R) -> Conv3d {
    Conv3d::new(cin, cout, [3; 3], [2; 3], [1; 3], rng)
}

/// Nearest ×2 upsampling followed by a 3×3×3 convolution.
#[derive(Clone, Debug)]
pub struct Upsample {
    conv: Conv3d,
}
impl_module!(Upsample { conv });

impl Upsample {
    pub fn new<R: Rng>(cin: usize, cout: usize, rng: &mut R) -> Upsample {
        Upsample { conv: Conv3d::same(cin, cout, 3, rng) }
    }

    pub fn forward(&self, x: &Var) -> Var {
        self.conv.forward(&x.upsample_nearest([2; 3]))
    }
}

/// Per-sample Euclidean norm of a batch `(N, ...)`, averaged over the batch.
pub fn batch_l2(x: &Var) -> Var {
    let n = x.shape()[0];
    let parts: Vec<Var> = (0..n).map(|i| x.narrow(0, i, 1).l2_norm().reshape(&[1])).collect();
    Var::concat(&parts, 0).mean()
}
