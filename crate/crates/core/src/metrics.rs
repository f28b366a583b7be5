//! Image-quality and distribution metrics for volumes.

use meddiff_tensor::{no_grad, Conv3d, Module, Tensor, Var};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::volume::{PatchLayout, Volume};

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape([usize; 3], [usize; 3]),
    #[error("extent {0:?} too small for an 11-voxel window")]
    TooSmall([usize; 3]),
    #[error("need at least {need} items, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("feature sets come from different extractors ({0} vs {1})")]
    ExtractorMismatch(String, String),
    #[error("feature dimension mismatch: {0} vs {1}")]
    Dim(usize, usize),
    #[error("covariance is singular; use a positive regularizer")]
    Singular,
    #[error("layout {layout:?} does not fit volume {shape:?}")]
    Layout { layout: [usize; 3], shape: [usize; 3] },
}

pub type Result<T> = std::result::Result<T, MetricError>;

fn same_shape(a: &Volume, b: &Volume) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(MetricError::Shape(a.shape(), b.shape()));
    }
    Ok(())
}

pub fn mse(a: &Volume, b: &Volume) -> Result<f64> {
    same_shape(a, b)?;
    Ok(a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len() as f64)
}

pub fn psnr_from_mse(mse: f64, data_range: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (data_range * data_range / mse).log10()
    }
}

/// Peak signal-to-noise ratio in dB; identical inputs give `+inf`.
pub fn psnr(a: &Volume, b: &Volume, data_range: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, data_range))
}

/// PSNR of two equally shaped tensors with range taken from `reference`.
pub fn tensor_psnr(x: &Tensor, reference: &Tensor) -> f64 {
    assert_eq!(x.shape(), reference.shape());
    let d = reference.data();
    let range = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - d.iter().cloned().fold(f64::INFINITY, f64::min);
    let mse = x.data().iter().zip(d).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / d.len() as f64;
    psnr_from_mse(mse, range)
}

const WIN: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const MS_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

fn gauss_window() -> [f64; WIN] {
    let mut w = [0.0; WIN];
    let c = (WIN / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable valid-mode Gaussian filtering along all three axes.
fn filter(x: &[f64], shape: [usize; 3]) -> (Vec<f64>, [usize; 3]) {
    let w = gauss_window();
    let mut cur = x.to_vec();
    let mut s = shape;
    for axis in 0..3 {
        let mut o = s;
        o[axis] = s[axis] + 1 - WIN;
        let st_in = [s[1] * s[2], s[2], 1];
        let st_out = [o[1] * o[2], o[2], 1];
        let mut out = vec![0.0; o.iter().product()];
        for i in 0..o[0] {
            for j in 0..o[1] {
                for k in 0..o[2] {
                    let base = i * st_in[0] + j * st_in[1] + k * st_in[2];
                    let mut acc = 0.0;
                    for (t, wt) in w.iter().enumerate() {
                        acc += wt * cur[base + t * st_in[axis]];
                    }
                    out[i * st_out[0] + j * st_out[1] + k * st_out[2]] = acc;
                }
            }
        }
        cur = out;
        s = o;
    }
    (cur, s)
}

/// Mean SSIM and mean contrast-structure term.
fn ssim_parts(a: &[f64], b: &[f64], shape: [usize; 3], range: f64) -> (f64, f64) {
    let c1 = (K1 * range).powi(2);
    let c2 = (K2 * range).powi(2);
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let (mu_a, _) = filter(a, shape);
    let (mu_b, _) = filter(b, shape);
    let (aa, _) = filter(&prod(&|x, _| x * x), shape);
    let (bb, _) = filter(&prod(&|_, y| y * y), shape);
    let (ab, _) = filter(&prod(&|x, y| x * y), shape);
    let n = mu_a.len() as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        let c = (2.0 * cov + c2) / (va + vb + c2);
        cs += c;
        ssim += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1) * c;
    }
    (ssim / n, cs / n)
}

fn as_f64(v: &Volume) -> Vec<f64> {
    v.data().iter().map(|&x| x as f64).collect()
}

/// Gaussian-window SSIM (11 voxels, sigma 1.5, valid mode).
pub fn ssim(a: &Volume, b: &Volume, data_range: f64) -> Result<f64> {
    same_shape(a, b)?;
    if a.shape().iter().any(|&s| s < WIN) {
        return Err(MetricError::TooSmall(a.shape()));
    }
    Ok(ssim_parts(&as_f64(a), &as_f64(b), a.shape(), data_range).0)
}

fn avg_pool2(x: &[f64], s: [usize; 3]) -> (Vec<f64>, [usize; 3]) {
    let o = s.map(|v| v / 2);
    let mut out = vec![0.0; o.iter().product()];
    for i in 0..o[0] {
        for j in 0..o[1] {
            for k in 0..o[2] {
                let mut acc = 0.0;
                for (di, dj, dk) in (0..8).map(|t| (t >> 2, (t >> 1) & 1, t & 1)) {
                    acc += x[((2 * i + di) * s[1] + 2 * j + dj) * s[2] + 2 * k + dk];
                }
                out[(i * o[1] + j) * o[2] + k] = acc / 8.0;
            }
        }
    }
    (out, o)
}

/// Number of dyadic scales (up to 5) whose extent still fits the window.
pub fn ms_ssim_scales(shape: [usize; 3]) -> usize {
    let m = *shape.iter().min().unwrap();
    (0..5).take_while(|&s| m >> s >= WIN).count()
}

/// Multi-scale SSIM; scales that no longer fit the window are dropped and
/// the remaining weights renormalized. Negative components clamp to 0.
pub fn ms_ssim(a: &Volume, b: &Volume, data_range: f64) -> Result<f64> {
    same_shape(a, b)?;
    let levels = ms_ssim_scales(a.shape());
    if levels == 0 {
        return Err(MetricError::TooSmall(a.shape()));
    }
    let wsum: f64 = MS_WEIGHTS[..levels].iter().sum();
    let (mut x, mut y, mut s) = (as_f64(a), as_f64(b), a.shape());
    let mut out = 1.0;
    for (l, w) in MS_WEIGHTS[..levels].iter().enumerate() {
        let (ss, cs) = ssim_parts(&x, &y, s, data_range);
        let v = if l + 1 == levels { ss } else { cs };
        out *= v.max(0.0).powf(w / wsum);
        if l + 1 < levels {
            let (nx, ns) = avg_pool2(&x, s);
            y = avg_pool2(&y, s).0;
            x = nx;
            s = ns;
        }
    }
    Ok(out)
}

/// Mean pairwise MS-SSIM; when there are more than `max_pairs` pairs a
/// seeded subsample is used.
pub fn diversity_msssim(samples: &[Volume], data_range: f64, max_pairs: usize, seed: u64) -> Result<f64> {
    if samples.len() < 2 {
        return Err(MetricError::TooFew { need: 2, got: samples.len() });
    }
    let mut pairs = Vec::new();
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            pairs.push((i, j));
        }
    }
    if pairs.len() > max_pairs.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = sample(&mut rng, pairs.len(), max_pairs.max(1)).into_vec();
        keep.sort_unstable();
        pairs = keep.into_iter().map(|i| pairs[i]).collect();
    }
    let mut acc = 0.0;
    for &(i, j) in &pairs {
        acc += ms_ssim(&samples[i], &samples[j], data_range)?;
    }
    Ok(acc / pairs.len() as f64)
}

/// Maps a volume to a fixed-length feature vector.
pub trait FeatureExtractor {
    fn extract(&self, vol: &Volume) -> Vec<f64>;
    fn identity_hash(&self) -> String;
}

/// Untrained 3D conv stack with fixed seeded weights and global average
/// pooling to a 128-dim vector.
pub struct RandomConvExtractor {
    layers: Vec<Conv3d>,
    seed: u64,
}

impl RandomConvExtractor {
    pub const DIM: usize = 128;

    pub fn new(seed: u64) -> RandomConvExtractor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [1, 16, 32, 64];
        let mut layers: Vec<Conv3d> = widths
            .windows(2)
            .map(|w| Conv3d::new(w[0], w[1], [3; 3], [2; 3], [1; 3], &mut rng))
            .collect();
        layers.push(Conv3d::new(64, Self::DIM, [3; 3], [1; 3], [1; 3], &mut rng));
        RandomConvExtractor { layers, seed }
    }
}

impl Default for RandomConvExtractor {
    fn default() -> Self {
        RandomConvExtractor::new(0x5eed)
    }
}

impl FeatureExtractor for RandomConvExtractor {
    fn extract(&self, vol: &Volume) -> Vec<f64> {
        no_grad(|| {
            let mut h = Var::constant(vol.to_tensor());
            let last = self.layers.len() - 1;
            for (i, l) in self.layers.iter().enumerate() {
                h = l.forward(&h);
                if i < last {
                    h = h.leaky_relu(0.2);
                }
            }
            let s = h.shape().to_vec();
            h.reshape(&[s[1], s[2] * s[3] * s[4]]).mean_axis(1, false).value().to_vec()
        })
    }

    fn identity_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("random-conv3d-gap/{}", self.seed));
        for l in &self.layers {
            h.update(l.params_hash());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureEmbeddingSet {
    pub features: Vec<Vec<f64>>,
    pub extractor_hash: String,
}

impl FeatureEmbeddingSet {
    pub fn from_volumes(extractor: &dyn FeatureExtractor, vols: &[Volume]) -> FeatureEmbeddingSet {
        FeatureEmbeddingSet {
            features: vols.iter().map(|v| extractor.extract(v)).collect(),
            extractor_hash: extractor.identity_hash(),
        }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }
}

fn compatible(a: &FeatureEmbeddingSet, b: &FeatureEmbeddingSet, min: usize) -> Result<()> {
    if a.extractor_hash != b.extractor_hash {
        return Err(MetricError::ExtractorMismatch(a.extractor_hash.clone(), b.extractor_hash.clone()));
    }
    for s in [a, b] {
        if s.len() < min {
            return Err(MetricError::TooFew { need: min, got: s.len() });
        }
    }
    if a.dim() != b.dim() || a.features.iter().chain(&b.features).any(|f| f.len() != a.dim()) {
        return Err(MetricError::Dim(a.dim(), b.dim()));
    }
    Ok(())
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Biased MMD² with an RBF kernel `exp(-d²/(2γ))`, `γ` the squared median
/// pairwise distance over the pooled sample.
pub fn mmd(a: &FeatureEmbeddingSet, b: &FeatureEmbeddingSet) -> Result<f64> {
    compatible(a, b, 2)?;
    let pooled: Vec<&Vec<f64>> = a.features.iter().chain(&b.features).collect();
    let mut d: Vec<f64> = Vec::new();
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    let median = if d.len().is_multiple_of(2) { 0.5 * (d[mid - 1] + d[mid]) } else { d[mid] };
    let gamma = if median > 0.0 { median * median } else { 1.0 };
    // Kernel values are summed in sorted order so the result does not
    // depend on argument order.
    let mean_k = |x: &[Vec<f64>], y: &[Vec<f64>]| {
        let mut k: Vec<f64> = x.iter().flat_map(|p| y.iter().map(move |q| (-sq_dist(p, q) / (2.0 * gamma)).exp())).collect();
        k.sort_by(f64::total_cmp);
        k.iter().sum::<f64>() / k.len() as f64
    };
    let v = mean_k(&a.features, &a.features) + mean_k(&b.features, &b.features) - 2.0 * mean_k(&a.features, &b.features);
    Ok(v.max(0.0))
}

fn mean_cov(x: &[Vec<f64>], eps: f64) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.len();
    let d = x[0].len();
    let m = DMatrix::from_fn(n, d, |i, j| x[i][j]);
    let mu = m.row_mean().transpose();
    let centred = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mu[j]);
    let mut cov = centred.transpose() * &centred / (n as f64 - 1.0);
    for i in 0..d {
        cov[(i, i)] += eps;
    }
    (mu, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let s = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets. Covariances
/// get `eps·I` added; with `eps = 0` a singular covariance is an error.
pub fn frechet_distance(a: &FeatureEmbeddingSet, b: &FeatureEmbeddingSet, eps: f64) -> Result<f64> {
    compatible(a, b, 2)?;
    let (mu_a, ca) = mean_cov(&a.features, eps);
    let (mu_b, cb) = mean_cov(&b.features, eps);
    if eps <= 0.0 {
        for c in [&ca, &cb] {
            let ev = SymmetricEigen::new(c.clone()).eigenvalues;
            let max = ev.iter().cloned().fold(0.0, f64::max);
            if ev.iter().any(|&v| v <= 1e-12 * max.max(1e-300)) {
                return Err(MetricError::Singular);
            }
        }
    }
    let sa = sym_sqrt(&ca);
    let inner = &sa * &cb * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = mu_a - mu_b;
    Ok((diff.dot(&diff) + ca.trace() + cb.trace() - 2.0 * tr_sqrt).max(0.0))
}

/// Mean |finite difference| across patch-boundary voxel pairs minus the same
/// statistic over interior pairs, computed per axis that has boundaries and
/// then averaged. Accepts the volume at either its original or padded extent.
pub fn seam_discontinuity(vol: &Volume, layout: &PatchLayout) -> Result<f64> {
    let s = vol.shape();
    if s != layout.extent && s != layout.padded() {
        return Err(MetricError::Layout { layout: layout.padded(), shape: s });
    }
    let mut per_axis = Vec::new();
    for axis in 0..3 {
        let p = layout.patch[axis];
        if s[axis] <= p {
            continue;
        }
        let (mut bsum, mut bn, mut isum, mut inn) = (0.0, 0usize, 0.0, 0usize);
        for i in 0..s[0] {
            for j in 0..s[1] {
                for k in 0..s[2] {
                    let c = [i, j, k];
                    if c[axis] + 1 >= s[axis] {
                        continue;
                    }
                    let mut n = c;
                    n[axis] += 1;
                    let d = (vol.get(n[0], n[1], n[2]) as f64 - vol.get(i, j, k) as f64).abs();
                    if n[axis] % p == 0 {
                        bsum += d;
                        bn += 1;
                    } else {
                        isum += d;
                        inn += 1;
                    }
                }
            }
        }
        if bn > 0 && inn > 0 {
            per_axis.push(bsum / bn as f64 - isum / inn as f64);
        }
    }
    if per_axis.is_empty() {
        return Ok(0.0);
    }
    Ok(per_axis.iter().sum::<f64>() / per_axis.len() as f64)
}

/// Usage statistics of a codebook: number of codes used and perplexity.
pub fn codebook_stats(usage: &[u64]) -> (usize, f64) {
    let total: u64 = usage.iter().sum();
    let used = usage.iter().filter(|&&u| u > 0).count();
    if total == 0 {
        return (0, 0.0);
    }
    let h: f64 = usage
        .iter()
        .filter(|&&u| u > 0)
        .map(|&u| {
            let p = u as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    (used, h.exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_phantom, Family, PhantomSpec};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn noise(shape: [usize; 3], seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::new(shape, (0..shape.iter().product()).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect()).unwrap()
    }

    fn phantom() -> Volume {
        gen_phantom(&PhantomSpec::new(Family::EllipsoidOrgan, [32; 3], 4)).unwrap().0
    }

    #[test]
    fn psnr_cases() {
        let a = noise([4, 4, 4], 1);
        assert_eq!(psnr(&a, &a, 2.0).unwrap(), f64::INFINITY);
        assert!((psnr_from_mse(0.02, 2.0) - 23.0103).abs() < 1e-4);
        let b = noise([4, 4, 4], 2);
        assert_eq!(psnr(&a, &b, 2.0).unwrap(), psnr(&b, &a, 2.0).unwrap());
        assert!(psnr(&a, &noise([4, 4, 5], 0), 2.0).is_err());
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let x = phantom();
        assert!((ssim(&x, &x, 2.0).unwrap() - 1.0).abs() < 1e-12);
        let neg = x.like(x.shape(), x.data().iter().map(|v| -v).collect());
        assert!(ssim(&x, &neg, 2.0).unwrap() < ssim(&x, &x, 2.0).unwrap());
        assert!(matches!(ssim(&noise([10, 12, 12], 0), &noise([10, 12, 12], 1), 2.0), Err(MetricError::TooSmall(_))));
    }

    /// Brute-force SSIM: explicit 11³ Gaussian window at every valid offset.
    fn ssim_reference(a: &Volume, b: &Volume, range: f64) -> f64 {
        let g = gauss_window();
        let s = a.shape();
        let (c1, c2) = ((K1 * range).powi(2), (K2 * range).powi(2));
        let mut acc = 0.0;
        let mut n = 0.0;
        for i in 0..=s[0] - WIN {
            for j in 0..=s[1] - WIN {
                for k in 0..=s[2] - WIN {
                    let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for x in 0..WIN {
                        for y in 0..WIN {
                            for z in 0..WIN {
                                let w = g[x] * g[y] * g[z];
                                let u = a.get(i + x, j + y, k + z) as f64;
                                let v = b.get(i + x, j + y, k + z) as f64;
                                ma += w * u;
                                mb += w * v;
                                aa += w * u * u;
                                bb += w * v * v;
                                ab += w * u * v;
                            }
                        }
                    }
                    let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
                    acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    n += 1.0;
                }
            }
        }
        acc / n
    }

    #[test]
    fn psnr_and_ssim_match_reference_on_random_pairs() {
        for s in 0..20 {
            let a = noise([12, 13, 12], 100 + s);
            let b = noise([12, 13, 12], 200 + s);
            let direct_mse = a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len() as f64;
            let want = 10.0 * (4.0 / direct_mse).log10();
            assert!((psnr(&a, &b, 2.0).unwrap() - want).abs() < 1e-6);
            assert!((ssim(&a, &b, 2.0).unwrap() - ssim_reference(&a, &b, 2.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn ms_ssim_decreases_with_noise() {
        let x = phantom();
        let mut last = ms_ssim(&x, &x, 2.0).unwrap();
        assert!((last - 1.0).abs() < 1e-12);
        for (i, sigma) in [0.05f32, 0.1, 0.2].into_iter().enumerate() {
            let n = noise(x.shape(), 7 + i as u64);
            let y = x.like(x.shape(), x.data().iter().zip(n.data()).map(|(a, b)| a + sigma * b).collect());
            let v = ms_ssim(&x, &y, 2.0).unwrap();
            assert!(v < last, "sigma {sigma}: {v} !< {last}");
            last = v;
        }
        assert_eq!(ms_ssim_scales([32; 3]), 2);
        assert!(ms_ssim(&noise([8; 3], 0), &noise([8; 3], 1), 2.0).is_err());
    }

    #[test]
    fn diversity_cases() {
        let x = phantom();
        let same = vec![x.clone(), x.clone(), x.clone()];
        assert!((diversity_msssim(&same, 2.0, 500, 0).unwrap() - 1.0).abs() < 1e-12);
        let iid: Vec<Volume> = (0..20).map(|s| noise([22; 3], s)).collect();
        assert!(diversity_msssim(&iid, 2.0, 500, 0).unwrap() < 0.5);
        let ten = &iid[..10];
        let full = diversity_msssim(ten, 2.0, 500, 0).unwrap();
        let sub = diversity_msssim(ten, 2.0, 30, 3).unwrap();
        assert!((full - sub).abs() <= 0.02, "{full} vs {sub}");
        assert!(diversity_msssim(&iid[..1], 2.0, 500, 0).is_err());
    }

    fn set(points: Vec<Vec<f64>>) -> FeatureEmbeddingSet {
        FeatureEmbeddingSet { features: points, extractor_hash: "h".into() }
    }

    #[test]
    fn mmd_cases() {
        let a = set((0..6).map(|i| vec![i as f64, (i * i) as f64 * 0.1]).collect());
        let b = set((0..5).map(|i| vec![i as f64 + 0.5, 1.0]).collect());
        assert_eq!(mmd(&a, &a).unwrap(), 0.0);
        assert_eq!(mmd(&a, &b).unwrap(), mmd(&b, &a).unwrap());
        let d = 3.0;
        let pa = set(vec![vec![0.0, 0.0], vec![0.0, 0.0]]);
        let pb = set(vec![vec![d, 0.0], vec![d, 0.0]]);
        let gamma = d * d;
        let want = 2.0 * (1.0 - (-d * d / (2.0 * gamma)).exp());
        assert!((mmd(&pa, &pb).unwrap() - want).abs() < 1e-12);
        let mut other = b.clone();
        other.extractor_hash = "x".into();
        assert!(matches!(mmd(&a, &other), Err(MetricError::ExtractorMismatch(..))));
    }

    fn gaussian_set(n: usize, dim: usize, shift: f64, seed: u64) -> FeatureEmbeddingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        set((0..n)
            .map(|_| (0..dim).map(|j| rng.sample::<f64, _>(StandardNormal) + if j == 0 { shift } else { 0.0 }).collect())
            .collect())
    }

    #[test]
    fn frechet_cases() {
        let a = gaussian_set(200, 4, 0.0, 1);
        assert!(frechet_distance(&a, &a, 1e-6).unwrap() < 1e-6);
        let d = 3.0;
        let big_a = gaussian_set(20000, 3, 0.0, 2);
        let big_b = gaussian_set(20000, 3, d, 3);
        let fd = frechet_distance(&big_a, &big_b, 1e-6).unwrap();
        assert!((fd - d * d).abs() / (d * d) < 0.05, "{fd}");

        // Simultaneous rotation of both sets.
        let b = gaussian_set(200, 4, 1.0, 4);
        let q = nalgebra::Rotation3::from_euler_angles(0.3, -0.7, 1.1);
        let rot = |s: &FeatureEmbeddingSet| {
            set(s.features
                .iter()
                .map(|f| {
                    let v = q * nalgebra::Vector3::new(f[0], f[1], f[2]);
                    vec![v[0], v[1], v[2], f[3]]
                })
                .collect())
        };
        let before = frechet_distance(&a, &b, 1e-6).unwrap();
        let after = frechet_distance(&rot(&a), &rot(&b), 1e-6).unwrap();
        assert!((before - after).abs() < 1e-5, "{before} vs {after}");

        let degenerate = set(vec![vec![1.0, 2.0]; 5]);
        assert!(matches!(frechet_distance(&degenerate, &degenerate, 0.0), Err(MetricError::Singular)));
    }

    #[test]
    fn extractor_is_deterministic() {
        let x = phantom();
        let e1 = RandomConvExtractor::default();
        let e2 = RandomConvExtractor::default();
        let f = e1.extract(&x);
        assert_eq!(f.len(), RandomConvExtractor::DIM);
        assert_eq!(f, e2.extract(&x));
        assert_eq!(e1.identity_hash(), e2.identity_hash());
        assert_ne!(e1.identity_hash(), RandomConvExtractor::new(1).identity_hash());
    }

    #[test]
    fn seam_oracles() {
        let layout = PatchLayout::new([16; 3], [8; 3]).unwrap();
        let ramp = Volume::from_fn([16; 3], |i, j, k| 0.01 * i as f32 + 0.02 * j as f32 - 0.005 * k as f32);
        assert!(seam_discontinuity(&ramp, &layout).unwrap().abs() < 1e-6);

        let seamed = Volume::from_fn([16; 3], |i, j, k| {
            let parity = (i / 8 + j / 8 + k / 8) % 2;
            0.01 * i as f32 + 0.1 * parity as f32
        });
        assert!((seam_discontinuity(&seamed, &layout).unwrap() - 0.1).abs() < 0.01);

        let shifted = seamed.like([16; 3], seamed.data().iter().map(|v| v + 0.37).collect());
        let (a, b) = (seam_discontinuity(&seamed, &layout).unwrap(), seam_discontinuity(&shifted, &layout).unwrap());
        assert!((a - b).abs() < 1e-6);
        assert!(seam_discontinuity(&Volume::zeros([9; 3]), &layout).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn distances_are_nonnegative_and_zero_on_self(seed in any::<u64>(), n in 3usize..12) {
            let a = gaussian_set(n, 3, 0.0, seed);
            let b = gaussian_set(n + 1, 3, 0.5, seed ^ 1);
            prop_assert!(mmd(&a, &b).unwrap() >= 0.0);
            prop_assert!(frechet_distance(&a, &b, 1e-6).unwrap() >= 0.0);
            prop_assert_eq!(mmd(&a, &a).unwrap(), 0.0);
            prop_assert!(frechet_distance(&a, &a, 1e-6).unwrap() < 1e-6);
        }
    }
}
