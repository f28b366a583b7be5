//! Volume data model, patch partitioning, tri-plane slicing and raw I/O.
//!
//! Voxels are stored as `f32` in C order over `(H, W, D)`, i.e. the last
//! axis is contiguous. The on-disk payload is x-fastest (first axis
//! fastest), so save/load transpose.

use std::path::{Path, PathBuf};

use meddiff_tensor::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum VolumeError {
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("index {index:?} out of bounds for shape {shape:?}")]
    OutOfBounds { index: [usize; 3], shape: [usize; 3] },
    #[error("patch layout mismatch: {0}")]
    Layout(String),
    #[error("sidecar not found: {0}")]
    MissingSidecar(PathBuf),
    #[error("sidecar schema error in field `{field}`: {reason}")]
    Schema { field: String, reason: String },
    #[error("payload holds {found} values, sidecar shape needs {expected}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("volume contains non-finite values")]
    NonFinite,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VolumeError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    data: Vec<f32>,
    pub spacing: [f64; 3],
    pub class_tag: String,
    /// Physical intensity range that maps onto [-1, 1].
    pub value_range: [f64; 2],
}

impl Volume {
    pub fn new(shape: [usize; 3], data: Vec<f32>) -> Result<Volume> {
        if shape.contains(&0) {
            return Err(VolumeError::InvalidShape(format!("{shape:?} has a zero extent")));
        }
        let n = shape.iter().product::<usize>();
        if data.len() != n {
            return Err(VolumeError::ShapeMismatch { expected: n, found: data.len() });
        }
        let (lo, hi) = min_max(&data);
        Ok(Volume { shape, data, spacing: [1.0; 3], class_tag: String::new(), value_range: [lo, hi] })
    }

    pub fn zeros(shape: [usize; 3]) -> Volume {
        Volume::filled(shape, 0.0)
    }

    pub fn filled(shape: [usize; 3], v: f32) -> Volume {
        let mut vol = Volume::new(shape, vec![v; shape.iter().product()]).expect("positive shape");
        vol.value_range = [-1.0, 1.0];
        vol
    }

    pub fn from_fn(shape: [usize; 3], f: impl Fn(usize, usize, usize) -> f32) -> Volume {
        let mut data = Vec::with_capacity(shape.iter().product());
        for i in 0..shape[0] {
            for j in 0..shape[1] {
                for k in 0..shape[2] {
                    data.push(f(i, j, k));
                }
            }
        }
        Volume::new(shape, data).expect("positive shape")
    }

    pub fn with_tag(mut self, tag: &str) -> Volume {
        self.class_tag = tag.to_string();
        self
    }

    /// Same metadata as `self`, new voxels.
    pub fn like(&self, shape: [usize; 3], data: Vec<f32>) -> Volume {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Volume { shape, data, spacing: self.spacing, class_tag: self.class_tag.clone(), value_range: self.value_range }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.shape[1] + j) * self.shape[2] + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f32) {
        let idx = self.index(i, j, k);
        self.data[idx] = v;
    }

    pub fn min_max(&self) -> (f64, f64) {
        min_max(&self.data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `(1, 1, H, W, D)` f64 tensor.
    pub fn to_tensor(&self) -> Tensor {
        let [h, w, d] = self.shape;
        Tensor::new(&[1, 1, h, w, d], self.data.iter().map(|&v| v as f64).collect())
    }

    /// Inverse of [`Volume::to_tensor`]; the tensor must hold exactly one channel.
    pub fn from_tensor(t: &Tensor, template: &Volume) -> Result<Volume> {
        let s = t.shape();
        if s.len() != 5 || s[0] != 1 || s[1] != 1 {
            return Err(VolumeError::InvalidShape(format!("tensor shape {s:?} is not (1, 1, H, W, D)")));
        }
        let shape = [s[2], s[3], s[4]];
        Ok(template.like(shape, t.data().iter().map(|&v| v as f32).collect()))
    }

    /// Sub-block starting at `origin`; must lie inside the volume.
    pub fn block(&self, origin: [usize; 3], size: [usize; 3]) -> Volume {
        let mut data = Vec::with_capacity(size.iter().product());
        for i in 0..size[0] {
            for j in 0..size[1] {
                let base = self.index(origin[0] + i, origin[1] + j, origin[2]);
                data.extend_from_slice(&self.data[base..base + size[2]]);
            }
        }
        self.like(size, data)
    }

    fn put_block(&mut self, origin: [usize; 3], src: &Volume) {
        let size = src.shape;
        for i in 0..size[0] {
            for j in 0..size[1] {
                let dst = self.index(origin[0] + i, origin[1] + j, origin[2]);
                let s = (i * size[1] + j) * size[2];
                self.data[dst..dst + size[2]].copy_from_slice(&src.data[s..s + size[2]]);
            }
        }
    }
}

fn min_max(data: &[f32]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in data {
        lo = lo.min(v as f64);
        hi = hi.max(v as f64);
    }
    (lo, hi)
}

/// Affine map of the voxel range onto [-1, 1]. The source range is kept in
/// `value_range` so [`denormalize`] can undo it.
pub fn normalize_minmax(vol: &Volume) -> Result<Volume> {
    if !vol.all_finite() {
        return Err(VolumeError::NonFinite);
    }
    let (lo, hi) = vol.min_max();
    if lo >= hi {
        return Err(VolumeError::Degenerate(format!("constant volume (all values {lo})")));
    }
    let scale = 2.0 / (hi - lo);
    let data = vol
        .data
        .iter()
        .map(|&v| {
            let x = v as f64;
            if x == hi {
                1.0
            } else {
                ((x - lo) * scale - 1.0) as f32
            }
        })
        .collect();
    let mut out = vol.like(vol.shape, data);
    out.value_range = [lo, hi];
    Ok(out)
}

pub fn denormalize(vol: &Volume) -> Volume {
    let [lo, hi] = vol.value_range;
    let data = vol.data.iter().map(|&v| ((v as f64 + 1.0) * 0.5 * (hi - lo) + lo) as f32).collect();
    vol.like(vol.shape, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchLayout {
    pub patch: [usize; 3],
    pub grid: [usize; 3],
    /// Extent before padding.
    pub extent: [usize; 3],
}

impl PatchLayout {
    /// Layout for `extent` cut into `patch`-sized blocks, padding up to the
    /// next multiple. Reflect padding needs `pad < extent` on every axis.
    pub fn new(extent: [usize; 3], patch: [usize; 3]) -> Result<PatchLayout> {
        let mut grid = [0; 3];
        for a in 0..3 {
            if patch[a] == 0 || extent[a] == 0 {
                return Err(VolumeError::InvalidShape(format!("patch {patch:?} / extent {extent:?} has a zero extent")));
            }
            grid[a] = extent[a].div_ceil(patch[a]);
            let pad = grid[a] * patch[a] - extent[a];
            if pad > 0 && pad >= extent[a] {
                return Err(VolumeError::Layout(format!(
                    "patch {patch:?} exceeds what reflect padding of extent {extent:?} can cover"
                )));
            }
        }
        Ok(PatchLayout { patch, grid, extent })
    }

    pub fn padded(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.patch[a] * self.grid[a])
    }

    pub fn patch_count(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn is_padded(&self) -> bool {
        self.padded() != self.extent
    }

    /// Grid coordinate of the `n`-th patch (row-major over the grid).
    pub fn grid_pos(&self, n: usize) -> [usize; 3] {
        let [_, gw, gd] = self.grid;
        [n / (gw * gd), (n / gd) % gw, n % gd]
    }

    pub fn origin(&self, n: usize) -> [usize; 3] {
        let g = self.grid_pos(n);
        [0, 1, 2].map(|a| g[a] * self.patch[a])
    }

    /// Drops the padding of a reassembled volume.
    pub fn crop(&self, vol: &Volume) -> Result<Volume> {
        if vol.shape != self.padded() {
            return Err(VolumeError::Layout(format!("volume {:?} is not the padded extent {:?}", vol.shape, self.padded())));
        }
        Ok(vol.block([0; 3], self.extent))
    }
}

fn reflect(p: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = p % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Reflect-pads at the high end of each axis up to `target`.
pub fn reflect_pad(vol: &Volume, target: [usize; 3]) -> Volume {
    if target == vol.shape {
        return vol.clone();
    }
    let mut data = Vec::with_capacity(target.iter().product());
    for i in 0..target[0] {
        let si = reflect(i, vol.shape[0]);
        for j in 0..target[1] {
            let sj = reflect(j, vol.shape[1]);
            for k in 0..target[2] {
                data.push(vol.get(si, sj, reflect(k, vol.shape[2])));
            }
        }
    }
    vol.like(target, data)
}

/// Cuts `vol` into disjoint patches ordered row-major over the patch grid.
pub fn partition(vol: &Volume, patch: [usize; 3]) -> Result<(Vec<Volume>, PatchLayout)> {
    let layout = PatchLayout::new(vol.shape, patch)?;
    let padded = reflect_pad(vol, layout.padded());
    let patches = (0..layout.patch_count()).map(|n| padded.block(layout.origin(n), patch)).collect();
    Ok((patches, layout))
}

/// Stitches patches back into the padded volume.
pub fn reassemble(patches: &[Volume], layout: &PatchLayout) -> Result<Volume> {
    if patches.len() != layout.patch_count() {
        return Err(VolumeError::Layout(format!("{} patches for a grid of {}", patches.len(), layout.patch_count())));
    }
    if let Some(p) = patches.iter().find(|p| p.shape != layout.patch) {
        return Err(VolumeError::Layout(format!("patch shape {:?}, layout expects {:?}", p.shape, layout.patch)));
    }
    let mut out = patches[0].like(layout.padded(), vec![0.0; layout.padded().iter().product()]);
    for (n, p) in patches.iter().enumerate() {
        out.put_block(layout.origin(n), p);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }
}

/// Three orthogonal planes through one voxel: axial `H×W` (fixed third
/// index), coronal `H×D` (fixed second), sagittal `W×D` (fixed first).
#[derive(Clone, Debug, PartialEq)]
pub struct TriPlaneSlices {
    pub index: [usize; 3],
    pub axial: Plane,
    pub coronal: Plane,
    pub sagittal: Plane,
}

impl TriPlaneSlices {
    pub fn planes(&self) -> [&Plane; 3] {
        [&self.axial, &self.coronal, &self.sagittal]
    }
}

pub fn extract_triplanes(vol: &Volume, index: [usize; 3]) -> Result<TriPlaneSlices> {
    let [h, w, d] = vol.shape;
    let [x, y, z] = index;
    if x >= h || y >= w || z >= d {
        return Err(VolumeError::OutOfBounds { index, shape: vol.shape });
    }
    let mut axial = Vec::with_capacity(h * w);
    let mut coronal = Vec::with_capacity(h * d);
    for i in 0..h {
        for j in 0..w {
            axial.push(vol.get(i, j, z));
        }
        for k in 0..d {
            coronal.push(vol.get(i, y, k));
        }
    }
    let sagittal = vol.block([x, 0, 0], [1, w, d]).data;
    Ok(TriPlaneSlices {
        index,
        axial: Plane { rows: h, cols: w, data: axial },
        coronal: Plane { rows: h, cols: d, data: coronal },
        sagittal: Plane { rows: w, cols: d, data: sagittal },
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    shape: [usize; 3],
    spacing: [f64; 3],
    class_tag: String,
    value_range: [f64; 2],
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes the raw little-endian f32 payload (x fastest) and its `.json` sidecar.
pub fn save_volume(vol: &Volume, path: &Path) -> Result<()> {
    let [h, w, d] = vol.shape;
    let mut bytes = Vec::with_capacity(vol.len() * 4);
    for k in 0..d {
        for j in 0..w {
            for i in 0..h {
                bytes.extend_from_slice(&vol.get(i, j, k).to_le_bytes());
            }
        }
    }
    std::fs::write(path, bytes)?;
    let side = Sidecar { shape: vol.shape, spacing: vol.spacing, class_tag: vol.class_tag.clone(), value_range: vol.value_range };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&side).expect("sidecar serializes"))?;
    Ok(())
}

fn parse_sidecar(text: &str) -> Result<Sidecar> {
    let v: Value = serde_json::from_str(text).map_err(|e| VolumeError::Schema { field: "<root>".into(), reason: e.to_string() })?;
    for field in ["shape", "spacing", "class_tag", "value_range"] {
        if v.get(field).is_none() {
            return Err(VolumeError::Schema { field: field.into(), reason: "missing".into() });
        }
    }
    let field_err = |field: &str, e: serde_json::Error| VolumeError::Schema { field: field.into(), reason: e.to_string() };
    let side = Sidecar {
        shape: serde_json::from_value(v["shape"].clone()).map_err(|e| field_err("shape", e))?,
        spacing: serde_json::from_value(v["spacing"].clone()).map_err(|e| field_err("spacing", e))?,
        class_tag: serde_json::from_value(v["class_tag"].clone()).map_err(|e| field_err("class_tag", e))?,
        value_range: serde_json::from_value(v["value_range"].clone()).map_err(|e| field_err("value_range", e))?,
    };
    if side.shape.contains(&0) {
        return Err(VolumeError::Schema { field: "shape".into(), reason: "components must be >= 1".into() });
    }
    if side.spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(VolumeError::Schema { field: "spacing".into(), reason: "components must be > 0".into() });
    }
    Ok(side)
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let side_path = sidecar_path(path);
    if !side_path.exists() {
        return Err(VolumeError::MissingSidecar(side_path));
    }
    let side = parse_sidecar(&std::fs::read_to_string(&side_path)?)?;
    let bytes = std::fs::read(path)?;
    let [h, w, d] = side.shape;
    let n = h * w * d;
    if bytes.len() != n * 4 {
        return Err(VolumeError::ShapeMismatch { expected: n, found: bytes.len() / 4 });
    }
    let mut data = vec![0f32; n];
    let mut it = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    for k in 0..d {
        for j in 0..w {
            for i in 0..h {
                data[(i * w + j) * d + k] = it.next().unwrap();
            }
        }
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(VolumeError::NonFinite);
    }
    Ok(Volume { shape: side.shape, data, spacing: side.spacing, class_tag: side.class_tag, value_range: side.value_range })
}
