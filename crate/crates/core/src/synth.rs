//! Procedural phantoms and k-space undersampling conditions.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::volume::{load_volume, save_volume, Volume, VolumeError};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("unknown phantom family `{name}`; valid families: {}", Family::NAMES.join(", "))]
    UnknownFamily { name: String },
    #[error("unknown mask kind `{0}`; valid kinds: gaussian-1d, poisson")]
    UnknownMask(String),
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("mask extent {mask:?} does not match volume extent {volume:?}")]
    ExtentMismatch { mask: [usize; 3], volume: [usize; 3] },
    #[error("no readable volumes among {0} inputs")]
    AllSkipped(usize),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    EllipsoidOrgan,
    TubeVessel,
    ShellSkull,
    LatticeBone,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::EllipsoidOrgan, Family::TubeVessel, Family::ShellSkull, Family::LatticeBone];
    pub const NAMES: [&'static str; 4] = ["ellipsoid-organ", "tube-vessel", "shell-skull", "lattice-bone"];

    pub fn name(self) -> &'static str {
        Family::NAMES[Family::ALL.iter().position(|&f| f == self).unwrap()]
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = SynthError;
    fn from_str(s: &str) -> Result<Family> {
        Family::NAMES
            .iter()
            .position(|&n| n == s)
            .map(|i| Family::ALL[i])
            .ok_or_else(|| SynthError::UnknownFamily { name: s.to_string() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub family: Family,
    pub extent: [usize; 3],
    /// Inclusive range for the number of primitives.
    pub primitives: (usize, usize),
    /// Foreground intensity range inside [0, 1]; background is 0.
    pub intensity: (f64, f64),
    /// Logistic edge width in voxels.
    pub edge: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn new(family: Family, extent: [usize; 3], seed: u64) -> PhantomSpec {
        PhantomSpec { family, extent, primitives: (1, 3), intensity: (0.35, 1.0), edge: 0.8, seed }
    }
}

/// A solid described by an approximate signed distance (voxels, negative inside).
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Ellipsoid { center: [f64; 3], semi_axes: [f64; 3] },
    Tube { a: [f64; 3], b: [f64; 3], radius: f64 },
    Shell { center: [f64; 3], semi_axes: [f64; 3], thickness: f64 },
    Lattice { center: [f64; 3], radius: f64, period: f64, strut: f64, phase: [f64; 3] },
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn ellipsoid_sd(p: [f64; 3], c: [f64; 3], a: [f64; 3]) -> f64 {
    let q = [0, 1, 2].map(|i| (p[i] - c[i]) / a[i]);
    (norm(q) - 1.0) * a.iter().cloned().fold(f64::INFINITY, f64::min)
}

impl Primitive {
    pub fn signed_distance(&self, p: [f64; 3]) -> f64 {
        match self {
            Primitive::Ellipsoid { center, semi_axes } => ellipsoid_sd(p, *center, *semi_axes),
            Primitive::Tube { a, b, radius } => {
                let ab = [0, 1, 2].map(|i| b[i] - a[i]);
                let ap = [0, 1, 2].map(|i| p[i] - a[i]);
                let len2 = ab.iter().map(|v| v * v).sum::<f64>().max(1e-12);
                let t = ((0..3).map(|i| ap[i] * ab[i]).sum::<f64>() / len2).clamp(0.0, 1.0);
                norm([0, 1, 2].map(|i| ap[i] - t * ab[i])) - radius
            }
            Primitive::Shell { center, semi_axes, thickness } => {
                ellipsoid_sd(p, *center, *semi_axes).abs() - thickness / 2.0
            }
            Primitive::Lattice { center, radius, period, strut, phase } => {
                let d = [0, 1, 2].map(|i| {
                    let u = (p[i] - center[i] + phase[i]).rem_euclid(*period);
                    u.min(period - u)
                });
                let rod = (d[1].hypot(d[2])).min(d[0].hypot(d[2])).min(d[0].hypot(d[1])) - strut;
                rod.max(norm([0, 1, 2].map(|i| p[i] - center[i])) - radius)
            }
        }
    }
}

/// Renders primitives with logistic edges onto a background of 0; later
/// primitives paint over earlier ones. Returns values in [0, 1] and labels
/// (1-based primitive index of voxels whose centre is inside).
pub fn render(extent: [usize; 3], prims: &[(Primitive, f64)], edge: f64) -> (Vec<f64>, Vec<f32>) {
    let n = extent.iter().product();
    let mut vals = vec![0.0; n];
    let mut labels = vec![0f32; n];
    let mut idx = 0;
    for i in 0..extent[0] {
        for j in 0..extent[1] {
            for k in 0..extent[2] {
                let p = [i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5];
                let mut v = 0.0;
                for (l, (prim, inten)) in prims.iter().enumerate() {
                    let sd = prim.signed_distance(p);
                    let occ = 1.0 / (1.0 + (sd / edge).exp());
                    v = v * (1.0 - occ) + inten * occ;
                    if sd < 0.0 {
                        labels[idx] = (l + 1) as f32;
                    }
                }
                vals[idx] = v;
                idx += 1;
            }
        }
    }
    (vals, labels)
}

fn sample_primitive<R: Rng>(family: Family, e: [f64; 3], rng: &mut R) -> Primitive {
    let m = e.iter().cloned().fold(f64::INFINITY, f64::min);
    let point = |rng: &mut R, lo: f64, hi: f64| [0, 1, 2].map(|i| e[i] * rng.gen_range(lo..hi));
    match family {
        Family::EllipsoidOrgan => Primitive::Ellipsoid {
            center: point(rng, 0.3, 0.7),
            semi_axes: [0, 1, 2].map(|_| m * rng.gen_range(0.12..0.3)),
        },
        Family::TubeVessel => Primitive::Tube {
            a: point(rng, 0.1, 0.9),
            b: point(rng, 0.1, 0.9),
            radius: m * rng.gen_range(0.05..0.11),
        },
        Family::ShellSkull => Primitive::Shell {
            center: point(rng, 0.45, 0.55),
            semi_axes: [0, 1, 2].map(|_| m * rng.gen_range(0.28..0.4)),
            thickness: m * rng.gen_range(0.06..0.12),
        },
        Family::LatticeBone => Primitive::Lattice {
            center: point(rng, 0.4, 0.6),
            radius: m * rng.gen_range(0.25..0.42),
            period: m * rng.gen_range(0.22..0.32),
            strut: m * rng.gen_range(0.035..0.06),
            phase: [0, 1, 2].map(|_| rng.gen_range(0.0..m)),
        },
    }
}

/// Generates a phantom and its label mask. Intensities are mapped from the
/// physical range [0, 1] onto [-1, 1].
pub fn gen_phantom(spec: &PhantomSpec) -> Result<(Volume, Volume)> {
    let (lo, hi) = spec.primitives;
    if hi == 0 || lo > hi {
        return Err(SynthError::InvalidSpec(format!("primitive count range {lo}..={hi} is empty or zero")));
    }
    if spec.extent.contains(&0) {
        return Err(SynthError::InvalidSpec("zero extent".into()));
    }
    let (ilo, ihi) = spec.intensity;
    if !(0.0 < ilo && ilo <= ihi && ihi <= 1.0) || !(spec.edge > 0.0) {
        return Err(SynthError::InvalidSpec(format!("intensity {:?} / edge {}", spec.intensity, spec.edge)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let count = rng.gen_range(lo.max(1)..=hi);
    let e = spec.extent.map(|v| v as f64);
    let prims: Vec<(Primitive, f64)> = (0..count)
        .map(|_| {
            let p = sample_primitive(spec.family, e, &mut rng);
            (p, rng.gen_range(ilo..=ihi))
        })
        .collect();
    let (vals, labels) = render(spec.extent, &prims, spec.edge);
    let mut vol = Volume::new(spec.extent, vals.iter().map(|&v| (2.0 * v - 1.0) as f32).collect())?.with_tag(spec.family.name());
    vol.value_range = [0.0, 1.0];
    let mut lab = Volume::new(spec.extent, labels)?.with_tag(spec.family.name());
    lab.value_range = [0.0, count as f64];
    Ok((vol, lab))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskKind {
    Gaussian1d,
    Poisson,
}

impl MaskKind {
    pub fn name(self) -> &'static str {
        match self {
            MaskKind::Gaussian1d => "gaussian-1d",
            MaskKind::Poisson => "poisson",
        }
    }
}

impl FromStr for MaskKind {
    type Err = SynthError;
    fn from_str(s: &str) -> Result<MaskKind> {
        match s {
            "gaussian-1d" => Ok(MaskKind::Gaussian1d),
            "poisson" => Ok(MaskKind::Poisson),
            _ => Err(SynthError::UnknownMask(s.into())),
        }
    }
}

/// Binary sampling pattern over the unshifted DFT grid (DC at index 0).
#[derive(Clone, Debug, PartialEq)]
pub struct UndersamplingMask {
    pub kind: MaskKind,
    pub acceleration: f64,
    pub extent: [usize; 3],
    pub seed: u64,
    /// Axis whose frequencies are subsampled by the 1D mask.
    pub axis: usize,
    pub mask: Vec<bool>,
}

/// Signed frequency of DFT bin `k` on `n` points.
fn signed_freq(k: usize, n: usize) -> i64 {
    if k < n.div_ceil(2) {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

fn bin_of(f: i64, n: usize) -> usize {
    f.rem_euclid(n as i64) as usize
}

impl UndersamplingMask {
    pub fn generate(kind: MaskKind, extent: [usize; 3], acceleration: f64, seed: u64) -> Result<UndersamplingMask> {
        if !(acceleration >= 1.0) || extent.contains(&0) {
            return Err(SynthError::InvalidSpec(format!("acceleration {acceleration} / extent {extent:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let axis = 1;
        let mask = match kind {
            MaskKind::Gaussian1d => gaussian_1d(extent, axis, acceleration, &mut rng),
            MaskKind::Poisson => poisson(extent, acceleration, &mut rng),
        };
        Ok(UndersamplingMask { kind, acceleration, extent, seed, axis, mask })
    }

    pub fn all(extent: [usize; 3], keep: bool) -> UndersamplingMask {
        UndersamplingMask {
            kind: MaskKind::Poisson,
            acceleration: if keep { 1.0 } else { f64::INFINITY },
            extent,
            seed: 0,
            axis: 1,
            mask: vec![keep; extent.iter().product()],
        }
    }

    pub fn retained_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }
}

fn gaussian_1d<R: Rng>(extent: [usize; 3], axis: usize, accel: f64, rng: &mut R) -> Vec<bool> {
    let n = extent[axis];
    let keep = ((n as f64 / accel).round() as usize).clamp(1, n);
    let normal = Normal::new(0.0, n as f64 / 6.0).unwrap();
    let mut chosen = vec![false; n];
    chosen[0] = true;
    let mut count = 1;
    while count < keep {
        let f = normal.sample(rng).round() as i64;
        if f < -(n as i64 / 2) || f >= n.div_ceil(2) as i64 {
            continue;
        }
        let b = bin_of(f, n);
        if !chosen[b] {
            chosen[b] = true;
            count += 1;
        }
    }
    let mut mask = Vec::with_capacity(extent.iter().product());
    for i in 0..extent[0] {
        for j in 0..extent[1] {
            for k in 0..extent[2] {
                mask.push(chosen[[i, j, k][axis]]);
            }
        }
    }
    mask
}

/// Variable-density dart throwing: the exclusion radius grows with distance
/// from DC. The radius scale is bisected until at least the target count
/// survives, then surplus peripheral points are dropped at random.
fn poisson<R: Rng>(extent: [usize; 3], accel: f64, rng: &mut R) -> Vec<bool> {
    let total: usize = extent.iter().product();
    let target = ((total as f64 / accel).round() as usize).clamp(1, total);
    let idx = |i: usize, j: usize, k: usize| (i * extent[1] + j) * extent[2] + k;
    let coords = |p: usize| [p / (extent[1] * extent[2]), (p / extent[2]) % extent[1], p % extent[2]];
    let radial = |p: usize| {
        let c = coords(p);
        let r = [0, 1, 2].map(|a| signed_freq(c[a], extent[a]) as f64 / (extent[a] as f64 / 2.0).max(1.0));
        norm(r) / 3f64.sqrt()
    };
    let side = extent.map(|n| ((n as f64 / 16.0).round() as i64).max(1));
    let is_center = |p: usize| {
        let c = coords(p);
        (0..3).all(|a| {
            let f = signed_freq(c[a], extent[a]);
            f >= -(side[a] / 2) && f < side[a] - side[a] / 2
        })
    };
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(rng);
    let centre: Vec<usize> = (0..total).filter(|&p| is_center(p)).collect();

    let throw = |scale: f64| -> Vec<bool> {
        let mut m = vec![false; total];
        for &p in &centre {
            m[p] = true;
        }
        for &p in &order {
            if m[p] {
                continue;
            }
            let r = scale * (0.25 + radial(p));
            let reach = r.floor() as i64;
            let c = coords(p);
            let mut ok = true;
            'search: for di in -reach..=reach {
                for dj in -reach..=reach {
                    for dk in -reach..=reach {
                        if ((di * di + dj * dj + dk * dk) as f64) >= r * r || (di, dj, dk) == (0, 0, 0) {
                            continue;
                        }
                        let q = [(c[0] as i64 + di), (c[1] as i64 + dj), (c[2] as i64 + dk)];
                        let q = [0, 1, 2].map(|a| q[a].rem_euclid(extent[a] as i64) as usize);
                        if m[idx(q[0], q[1], q[2])] {
                            ok = false;
                            break 'search;
                        }
                    }
                }
            }
            if ok {
                m[p] = true;
            }
        }
        m
    };
    let count = |m: &[bool]| m.iter().filter(|&&b| b).count();
    let (mut lo, mut hi) = (0.0, extent.iter().cloned().max().unwrap() as f64);
    let mut best = throw(lo);
    for _ in 0..24 {
        let mid = 0.5 * (lo + hi);
        let m = throw(mid);
        if count(&m) >= target {
            lo = mid;
            best = m;
        } else {
            hi = mid;
        }
    }
    let mut surplus: Vec<usize> = (0..total).filter(|&p| best[p] && !is_center(p)).collect();
    surplus.shuffle(rng);
    let excess = count(&best).saturating_sub(target);
    for &p in surplus.iter().take(excess) {
        best[p] = false;
    }
    best
}

fn fft3(buf: &mut [Complex<f64>], extent: [usize; 3], inverse: bool) {
    let mut planner = FftPlanner::new();
    let [h, w, d] = extent;
    let strides = [w * d, d, 1];
    for axis in 0..3 {
        let n = extent[axis];
        let fft = if inverse { planner.plan_fft_inverse(n) } else { planner.plan_fft_forward(n) };
        let mut line = vec![Complex::new(0.0, 0.0); n];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for u in 0..extent[others[0]] {
            for v in 0..extent[others[1]] {
                let base = u * strides[others[0]] + v * strides[others[1]];
                for (t, c) in line.iter_mut().enumerate() {
                    *c = buf[base + t * strides[axis]];
                }
                fft.process(&mut line);
                for (t, c) in line.iter().enumerate() {
                    buf[base + t * strides[axis]] = *c;
                }
            }
        }
    }
    if inverse {
        let s = 1.0 / (h * w * d) as f64;
        for c in buf.iter_mut() {
            *c *= s;
        }
    }
}

/// Zero-filled reconstruction: forward DFT, mask, inverse DFT, real part.
pub fn kspace_undersample(vol: &Volume, mask: &UndersamplingMask) -> Result<Volume> {
    if mask.extent != vol.shape() {
        return Err(SynthError::ExtentMismatch { mask: mask.extent, volume: vol.shape() });
    }
    let mut buf: Vec<Complex<f64>> = vol.data().iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
    fft3(&mut buf, vol.shape(), false);
    for (c, &keep) in buf.iter_mut().zip(&mask.mask) {
        if !keep {
            *c = Complex::new(0.0, 0.0);
        }
    }
    fft3(&mut buf, vol.shape(), true);
    Ok(vol.like(vol.shape(), buf.iter().map(|c| c.re as f32).collect()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub target: PathBuf,
    pub condition: PathBuf,
    pub mask_kind: MaskKind,
    pub mask_seed: u64,
    pub class_tag: String,
    pub acceleration: f64,
}

/// Per-item seed stream derived from a master seed.
pub fn item_seed(master: u64, item: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(item as u64 + 1);
    rng.gen()
}

/// Writes one zero-filled condition per readable target into `out_dir`
/// and a JSON-lines manifest at `manifest`.
pub fn build_pairs(
    targets: &[PathBuf],
    out_dir: &Path,
    manifest: &Path,
    kind: MaskKind,
    acceleration: f64,
    master_seed: u64,
) -> Result<Vec<PairRecord>> {
    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    for (n, target) in targets.iter().enumerate() {
        let vol = match load_volume(target) {
            Ok(v) => v,
            Err(e) => {
                log::warn!("skipping {}: {e}", target.display());
                continue;
            }
        };
        let mask_seed = item_seed(master_seed, n);
        let mask = UndersamplingMask::generate(kind, vol.shape(), acceleration, mask_seed)?;
        let cond = kspace_undersample(&vol, &mask)?;
        let stem = target.file_stem().and_then(|s| s.to_str()).unwrap_or("item");
        let condition = out_dir.join(format!("{stem}_{}.raw", kind.name()));
        save_volume(&cond, &condition)?;
        rows.push(PairRecord {
            target: target.clone(),
            condition,
            mask_kind: kind,
            mask_seed,
            class_tag: vol.class_tag.clone(),
            acceleration,
        });
    }
    if rows.is_empty() {
        return Err(SynthError::AllSkipped(targets.len()));
    }
    let mut text = String::new();
    for r in &rows {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    std::fs::write(manifest, text)?;
    Ok(rows)
}

pub fn read_pairs(manifest: &Path) -> Result<Vec<PairRecord>> {
    let text = std::fs::read_to_string(manifest)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| SynthError::InvalidSpec(format!("manifest row: {e}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;
    use proptest::prelude::*;

    #[test]
    fn centred_sphere_voxel_count() {
        let prim = Primitive::Ellipsoid { center: [16.0; 3], semi_axes: [8.0; 3] };
        let (_, labels) = render([32; 3], &[(prim, 1.0)], 0.8);
        let count = labels.iter().filter(|&&l| l == 1.0).count() as f64;
        let analytic = 4.0 / 3.0 * std::f64::consts::PI * 512.0;
        assert!((count - analytic).abs() / analytic < 0.05, "{count} vs {analytic}");
    }

    #[test]
    fn phantom_is_deterministic_and_bounded() {
        for family in Family::ALL {
            let spec = PhantomSpec::new(family, [16, 16, 16], 9);
            let (a, la) = gen_phantom(&spec).unwrap();
            let (b, lb) = gen_phantom(&spec).unwrap();
            assert_eq!((a.data(), la.data()), (b.data(), lb.data()));
            assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            assert_eq!(a.class_tag, family.name());
        }
    }

    #[test]
    fn zero_primitives_rejected() {
        let mut spec = PhantomSpec::new(Family::TubeVessel, [8; 3], 0);
        spec.primitives = (0, 0);
        assert!(gen_phantom(&spec).is_err());
        assert!(matches!("bogus".parse::<Family>(), Err(SynthError::UnknownFamily { .. })));
    }

    #[test]
    fn identity_and_empty_masks() {
        let (v, _) = gen_phantom(&PhantomSpec::new(Family::ShellSkull, [12, 10, 8], 3)).unwrap();
        let same = kspace_undersample(&v, &UndersamplingMask::all(v.shape(), true)).unwrap();
        let err = same.data().iter().zip(v.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(err <= 1e-5, "{err}");
        let zero = kspace_undersample(&v, &UndersamplingMask::all(v.shape(), false)).unwrap();
        assert!(zero.data().iter().all(|&x| x == 0.0));
        let wrong = UndersamplingMask::all([8, 8, 8], true);
        assert!(matches!(kspace_undersample(&v, &wrong), Err(SynthError::ExtentMismatch { .. })));
    }

    #[test]
    fn fidelity_drops_with_acceleration() {
        let (v, _) = gen_phantom(&PhantomSpec::new(Family::EllipsoidOrgan, [32; 3], 11)).unwrap();
        for kind in [MaskKind::Gaussian1d, MaskKind::Poisson] {
            let p: Vec<f64> = [2.0, 4.0, 8.0]
                .iter()
                .map(|&acc| {
                    let m = UndersamplingMask::generate(kind, v.shape(), acc, 5).unwrap();
                    psnr(&kspace_undersample(&v, &m).unwrap(), &v, 2.0).unwrap()
                })
                .collect();
            assert!(p.iter().all(|x| x.is_finite()));
            assert!(p[0] > p[1] && p[1] > p[2], "{kind:?}: {p:?}");
        }
    }

    #[test]
    fn gaussian_mask_keeps_full_planes() {
        let m = UndersamplingMask::generate(MaskKind::Gaussian1d, [8, 16, 4], 4.0, 1).unwrap();
        let at = |i: usize, j: usize, k: usize| m.mask[(i * 16 + j) * 4 + k];
        for j in 0..16 {
            let v = at(0, j, 0);
            for i in 0..8 {
                for k in 0..4 {
                    assert_eq!(at(i, j, k), v);
                }
            }
        }
        assert!(at(0, 0, 0), "DC line is always kept");
    }

    #[test]
    fn poisson_mask_has_full_centre() {
        let m = UndersamplingMask::generate(MaskKind::Poisson, [32; 3], 8.0, 2).unwrap();
        for f in [-1i64, 0] {
            for g in [-1i64, 0] {
                for h in [-1i64, 0] {
                    let p = (bin_of(f, 32) * 32 + bin_of(g, 32)) * 32 + bin_of(h, 32);
                    assert!(m.mask[p]);
                }
            }
        }
        // Peripheral sampling is sparser than central sampling.
        let shell = |lo: i64, hi: i64| {
            let mut kept = 0;
            let mut all = 0;
            for p in 0..m.mask.len() {
                let c = [p / 1024, (p / 32) % 32, p % 32].map(|x| signed_freq(x, 32).abs());
                let r = *c.iter().max().unwrap();
                if r >= lo && r < hi {
                    all += 1;
                    kept += m.mask[p] as usize;
                }
            }
            kept as f64 / all as f64
        };
        assert!(shell(2, 6) > shell(10, 17));
    }

    #[test]
    fn pairs_manifest_regenerates() {
        let dir = tempfile::tempdir().unwrap();
        let mut targets = Vec::new();
        for i in 0..10 {
            let (v, _) = gen_phantom(&PhantomSpec::new(Family::ALL[i % 4], [8; 3], i as u64)).unwrap();
            let p = dir.path().join(format!("t{i}.raw"));
            save_volume(&v, &p).unwrap();
            targets.push(p);
        }
        targets.push(dir.path().join("missing.raw"));
        let man = dir.path().join("pairs.jsonl");
        let rows = build_pairs(&targets, &dir.path().join("c"), &man, MaskKind::Gaussian1d, 8.0, 42).unwrap();
        assert_eq!(rows.len(), 10);
        let first = std::fs::read(&man).unwrap();
        build_pairs(&targets, &dir.path().join("c"), &man, MaskKind::Gaussian1d, 8.0, 42).unwrap();
        assert_eq!(std::fs::read(&man).unwrap(), first);
        for r in read_pairs(&man).unwrap() {
            let t = load_volume(&r.target).unwrap();
            let m = UndersamplingMask::generate(r.mask_kind, t.shape(), r.acceleration, r.mask_seed).unwrap();
            assert_eq!(kspace_undersample(&t, &m).unwrap().data(), load_volume(&r.condition).unwrap().data());
        }
        assert!(matches!(
            build_pairs(&targets[10..], dir.path(), &man, MaskKind::Poisson, 8.0, 1),
            Err(SynthError::AllSkipped(1))
        ));
    }

    #[test]
    fn families_have_distinct_intensity_distributions() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let means = |f: Family| -> Vec<f64> {
            (0..50)
                .map(|s| {
                    let (v, _) = gen_phantom(&PhantomSpec::new(f, [16; 3], 1000 + s)).unwrap();
                    v.data().iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64
                })
                .collect()
        };
        let a = means(Family::EllipsoidOrgan);
        let b = means(Family::TubeVessel);
        let mut pooled: Vec<f64> = a.iter().chain(&b).cloned().collect();
        pooled.sort_by(f64::total_cmp);
        let edges: Vec<f64> = (1..5).map(|q| pooled[q * pooled.len() / 5]).collect();
        let bin = |x: f64| edges.iter().filter(|&&e| x >= e).count();
        let mut table = [[0f64; 5]; 2];
        for &x in &a {
            table[0][bin(x)] += 1.0;
        }
        for &x in &b {
            table[1][bin(x)] += 1.0;
        }
        let mut chi = 0.0;
        for c in 0..5 {
            let col = table[0][c] + table[1][c];
            for row in &table {
                let expected = col * 50.0 / 100.0;
                if expected > 0.0 {
                    chi += (row[c] - expected).powi(2) / expected;
                }
            }
        }
        let p = 1.0 - ChiSquared::new(4.0).unwrap().cdf(chi);
        assert!(p < 0.01, "chi2 {chi}, p {p}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn gaussian_retained_fraction(seed in any::<u64>(), n in prop::sample::select(vec![16usize, 24, 32, 48, 64])) {
            let m = UndersamplingMask::generate(MaskKind::Gaussian1d, [6, n, 5], 8.0, seed).unwrap();
            prop_assert!((m.retained_fraction() - 0.125).abs() <= 0.0125);
        }

        #[test]
        fn poisson_retained_fraction(seed in any::<u64>()) {
            let m = UndersamplingMask::generate(MaskKind::Poisson, [12, 12, 12], 8.0, seed).unwrap();
            prop_assert!((m.retained_fraction() - 0.125).abs() <= 0.0125);
        }
    }
}
