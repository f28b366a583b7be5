//! Codebook, nearest-code quantization and latent volumes.

use meddiff_tensor::{impl_module, Param, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use super::PvaeError;
use crate::volume::PatchLayout;

#[derive(Clone, Debug)]
pub struct Codebook {
    /// `(K, C)` code vectors.
    pub codes: Param,
    /// Assignments since creation.
    pub usage: Vec<u64>,
    /// Assignments since the last dead-code sweep.
    pub epoch_usage: Vec<u64>,
}
impl_module!(Codebook { codes });

impl Codebook {
    pub fn new<R: Rng>(k: usize, dim: usize, rng: &mut R) -> Codebook {
        let b = 1.0 / k as f64;
        Codebook::from_codes(Tensor::uniform(&[k, dim], -b, b, rng))
    }

    pub fn from_codes(codes: Tensor) -> Codebook {
        let k = codes.shape()[0];
        Codebook { codes: Param::new(codes), usage: vec![0; k], epoch_usage: vec![0; k] }
    }

    pub fn len(&self) -> usize {
        self.codes.value().shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.codes.value().shape()[1]
    }

    /// Index of the nearest code (squared Euclidean, lowest index on ties)
    /// for every `dim`-long row of `rows`.
    pub fn nearest(&self, rows: &[f64]) -> Result<Vec<usize>, PvaeError> {
        let (k, c) = (self.len(), self.dim());
        if k == 0 {
            return Err(PvaeError::EmptyCodebook);
        }
        let codes = self.codes.value().data();
        Ok(rows
            .chunks(c)
            .map(|z| {
                let mut best = f64::INFINITY;
                let mut arg = 0;
                'codes: for (i, code) in codes.chunks(c).enumerate() {
                    let mut d = 0.0;
                    for (a, b) in z.iter().zip(code) {
                        d += (a - b) * (a - b);
                        if d >= best {
                            continue 'codes;
                        }
                    }
                    best = d;
                    arg = i;
                }
                arg
            })
            .collect())
    }

    /// Nearest-code quantization of a `(N, C, a, b, c)` feature grid.
    pub fn quantize(&self, z: &Tensor) -> Result<QuantizedLatent, PvaeError> {
        let s = z.shape();
        if s.len() != 5 || s[1] != self.dim() {
            return Err(PvaeError::Shape(format!("feature grid {s:?} does not have {} channels", self.dim())));
        }
        let rows = z.permute(&[0, 2, 3, 4, 1]);
        let indices = self.nearest(rows.data())?;
        let features = self.lookup(&indices, [s[0], s[2], s[3], s[4]]);
        Ok(QuantizedLatent { indices, features })
    }

    /// Codes for `indices` laid out as `(N, C, a, b, c)`.
    pub fn lookup(&self, indices: &[usize], grid: [usize; 4]) -> Tensor {
        let c = self.dim();
        let codes = self.codes.value().data();
        let mut rows = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            rows.extend_from_slice(&codes[i * c..(i + 1) * c]);
        }
        Tensor::new(&[grid[0], grid[1], grid[2], grid[3], c], rows).permute(&[0, 4, 1, 2, 3])
    }

    /// Differentiable lookup: gradients reach the code vectors.
    pub fn lookup_var(&self, indices: &[usize], grid: [usize; 4]) -> Var {
        let c = self.dim();
        self.codes
            .var()
            .gather_rows(indices)
            .reshape(&[grid[0], grid[1], grid[2], grid[3], c])
            .permute(&[0, 4, 1, 2, 3])
    }

    pub fn record_usage(&mut self, indices: &[usize]) {
        for &i in indices {
            self.usage[i] += 1;
            self.epoch_usage[i] += 1;
        }
    }

    /// Replaces codes unused since the last sweep with random rows of
    /// `candidates` (`(M, C)` encoder outputs) plus a little jitter, then
    /// starts a new sweep window. Returns how many codes were reseeded.
    pub fn reseed_dead<R: Rng>(&mut self, candidates: &[f64], rng: &mut R) -> usize {
        let c = self.dim();
        let m = candidates.len() / c;
        if m == 0 {
            return 0;
        }
        let var = candidates.iter().map(|v| v * v).sum::<f64>() / candidates.len() as f64;
        let jitter = 1e-3 * var.sqrt().max(1e-6);
        let dead: Vec<usize> = (0..self.len()).filter(|&i| self.epoch_usage[i] == 0).collect();
        let codes = self.codes.value_mut().data_mut();
        for &i in &dead {
            let r = rng.gen_range(0..m);
            for j in 0..c {
                codes[i * c + j] = candidates[r * c + j] + jitter * rng.sample::<f64, _>(StandardNormal);
            }
        }
        self.epoch_usage.iter_mut().for_each(|u| *u = 0);
        dead.len()
    }
}

/// Code indices per latent position plus the selected code vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLatent {
    /// Row-major over `(N, a, b, c)`.
    pub indices: Vec<usize>,
    /// `(N, C, a, b, c)`, exactly the selected codes.
    pub features: Tensor,
}

impl QuantizedLatent {
    pub fn grid(&self) -> [usize; 4] {
        let s = self.features.shape();
        [s[0], s[2], s[3], s[4]]
    }
}

/// Value of `zq` in the forward pass, identity gradient to `z` backwards.
pub fn straight_through(z: &Var, zq: &Tensor) -> Var {
    assert_eq!(z.shape(), zq.shape());
    Var::from_op(zq.clone(), vec![z.clone()], Box::new(|g, _, _| vec![Some(g.clone())]))
}

/// Per-patch latents stitched into one grid following a [`PatchLayout`].
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVolume {
    /// `(1, C, X, Y, Z)` with `X = grid·(patch / 4)` per axis.
    pub features: Tensor,
    /// Code index per position of the stitched grid, row-major.
    pub indices: Vec<usize>,
    pub layout: PatchLayout,
}

impl LatentVolume {
    pub fn latent_patch(&self) -> [usize; 3] {
        self.layout.patch.map(|p| p / super::REDUCTION)
    }

    pub fn extent(&self) -> [usize; 3] {
        let s = self.features.shape();
        [s[2], s[3], s[4]]
    }
}

/// Copies block `n` of shape `block` from `src` `(B, C, ...)` into a stitched
/// grid `(1, C, X, Y, Z)` at the layout position of patch `n`.
pub fn stitch_blocks(blocks: &Tensor, grid: [usize; 3], block: [usize; 3]) -> Tensor {
    let s = blocks.shape();
    let (n, c) = (s[0], s[1]);
    assert_eq!(n, grid.iter().product::<usize>());
    let ext = [0, 1, 2].map(|a| grid[a] * block[a]);
    let mut out = vec![0.0; c * ext.iter().product::<usize>()];
    let src = blocks.data();
    let bsz: usize = block.iter().product();
    for p in 0..n {
        let g = [p / (grid[1] * grid[2]), (p / grid[2]) % grid[1], p % grid[2]];
        for ch in 0..c {
            for i in 0..block[0] {
                for j in 0..block[1] {
                    let from = ((p * c + ch) * bsz) + (i * block[1] + j) * block[2];
                    let x = g[0] * block[0] + i;
                    let y = g[1] * block[1] + j;
                    let to = ((ch * ext[0] + x) * ext[1] + y) * ext[2] + g[2] * block[2];
                    out[to..to + block[2]].copy_from_slice(&src[from..from + block[2]]);
                }
            }
        }
    }
    Tensor::new(&[1, c, ext[0], ext[1], ext[2]], out)
}

/// Inverse of [`stitch_blocks`].
pub fn split_blocks(grid_t: &Tensor, grid: [usize; 3], block: [usize; 3]) -> Tensor {
    let s = grid_t.shape();
    let c = s[1];
    let ext = [s[2], s[3], s[4]];
    let n: usize = grid.iter().product();
    let bsz: usize = block.iter().product();
    let mut out = vec![0.0; n * c * bsz];
    let src = grid_t.data();
    for p in 0..n {
        let g = [p / (grid[1] * grid[2]), (p / grid[2]) % grid[1], p % grid[2]];
        for ch in 0..c {
            for i in 0..block[0] {
                for j in 0..block[1] {
                    let to = ((p * c + ch) * bsz) + (i * block[1] + j) * block[2];
                    let x = g[0] * block[0] + i;
                    let y = g[1] * block[1] + j;
                    let from = ((ch * ext[0] + x) * ext[1] + y) * ext[2] + g[2] * block[2];
                    out[to..to + block[2]].copy_from_slice(&src[from..from + block[2]]);
                }
            }
        }
    }
    Tensor::new(&[n, c, block[0], block[1], block[2]], out)
}

/// Differentiable stitching of `(B, C, ...)` blocks, used by the
/// full-graph training variant.
pub fn stitch_blocks_var(blocks: &Var, grid: [usize; 3]) -> Var {
    let rows: Vec<Var> = (0..grid[0])
        .map(|i| {
            let cols: Vec<Var> = (0..grid[1])
                .map(|j| {
                    let deps: Vec<Var> = (0..grid[2])
                        .map(|k| blocks.narrow(0, (i * grid[1] + j) * grid[2] + k, 1))
                        .collect();
                    Var::concat(&deps, 4)
                })
                .collect();
            Var::concat(&cols, 3)
        })
        .collect();
    Var::concat(&rows, 2)
}
