use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::storage::Storage;

/// Dense row-major f64 tensor. Cloning is cheap (shared buffer,
/// copy-on-write through [`Tensor::data_mut`]).
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Storage>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            numel(shape),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(Storage::new(data)),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::new(shape, vec![0.0; numel(shape)])
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Tensor::new(shape, vec![v; numel(shape)])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(&[], vec![v])
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
            .collect();
        Tensor::new(shape, data)
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape)).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::new(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access; copies the buffer if it is shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            numel(shape),
            self.numel(),
            "cannot reshape {:?} to {shape:?}",
            self.shape
        );
        Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(&self.shape, self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Tensor::new(
            &self.shape,
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    /// `self += other * s` in place.
    pub fn axpy(&mut self, s: f64, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "axpy shape mismatch");
        for (a, b) in self.data_mut().iter_mut().zip(other.data.iter()) {
            *a += s * b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Materialized axis permutation: `out.shape[i] = self.shape[dims[i]]`.
    pub fn permute(&self, dims: &[usize]) -> Tensor {
        assert_eq!(dims.len(), self.rank(), "permute rank mismatch");
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = dims.iter().map(|&d| self.shape[d]).collect();
        let src_strides: Vec<usize> = dims.iter().map(|&d| in_strides[d]).collect();
        let mut out = Vec::with_capacity(self.numel());
        strided_gather(self.data(), &out_shape, &src_strides, 0, &mut out);
        Tensor::new(&out_shape, out)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        assert!(start + len <= self.shape[axis], "narrow out of range");
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let n = self.shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Tensor::new(&shape, out)
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty());
        let first = parts[0].shape();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut total = 0;
        for p in parts {
            assert_eq!(p.rank(), first.len());
            for (i, (&a, &b)) in p.shape().iter().zip(first.iter()).enumerate() {
                assert!(i == axis || a == b, "concat shape mismatch");
            }
            total += p.shape()[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let n = p.shape()[axis] * inner;
                out.extend_from_slice(&p.data()[o * n..(o + 1) * n]);
            }
        }
        let mut shape = first.to_vec();
        shape[axis] = total;
        Tensor::new(&shape, out)
    }

    /// Broadcast to `shape` (numpy rules, right-aligned).
    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        if self.shape == shape {
            return self.clone();
        }
        let src_strides = broadcast_strides(&self.shape, shape);
        let mut out = Vec::with_capacity(numel(shape));
        strided_gather(self.data(), shape, &src_strides, 0, &mut out);
        Tensor::new(shape, out)
    }

    /// Sums a broadcast-expanded tensor back down to `shape`.
    pub fn sum_to_shape(&self, shape: &[usize]) -> Tensor {
        if self.shape == shape {
            return self.clone();
        }
        let dst_strides = broadcast_strides(shape, &self.shape);
        let mut out = vec![0.0; numel(shape)];
        let out_strides = strides(&self.shape);
        for (i, &v) in self.data.iter().enumerate() {
            let mut rem = i;
            let mut dst = 0;
            for (k, &st) in out_strides.iter().enumerate() {
                let idx = rem / st;
                rem %= st;
                dst += idx * dst_strides[k];
            }
            out[dst] += v;
        }
        Tensor::new(shape, out)
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&self, axis: usize) -> Tensor {
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let n = self.shape[axis];
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &self.data[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Tensor::new(&shape, out)
    }

    /// SHA-256 over shape and little-endian payload.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for &d in &self.shape {
            h.update((d as u64).to_le_bytes());
        }
        for &x in self.data.iter() {
            h.update(x.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Strides of `src` viewed inside `dst` under broadcasting (0 on expanded axes).
pub(crate) fn broadcast_strides(src: &[usize], dst: &[usize]) -> Vec<usize> {
    assert!(src.len() <= dst.len(), "cannot broadcast {src:?} to {dst:?}");
    let offset = dst.len() - src.len();
    let s = strides(src);
    (0..dst.len())
        .map(|i| {
            if i < offset {
                0
            } else {
                let d = src[i - offset];
                assert!(
                    d == dst[i] || d == 1,
                    "cannot broadcast {src:?} to {dst:?}"
                );
                if d == 1 {
                    0
                } else {
                    s[i - offset]
                }
            }
        })
        .collect()
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| {
            let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
            let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
            assert!(
                da == db || da == 1 || db == 1,
                "incompatible shapes {a:?} and {b:?}"
            );
            da.max(db)
        })
        .collect()
}

fn strided_gather(src: &[f64], shape: &[usize], src_strides: &[usize], base: usize, out: &mut Vec<f64>) {
    match shape.len() {
        0 => out.push(src[base]),
        1 => {
            let st = src_strides[0];
            if st == 1 {
                out.extend_from_slice(&src[base..base + shape[0]]);
            } else {
                out.extend((0..shape[0]).map(|i| src[base + i * st]));
            }
        }
        _ => {
            for i in 0..shape[0] {
                strided_gather(src, &shape[1..], &src_strides[1..], base + i * src_strides[0], out);
            }
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 8 {
            write!(f, " {:?}", &self.data[..])?;
        }
        Ok(())
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data[..] == other.data[..]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_transposes() {
        let t = Tensor::new(&[2, 3], vec![0., 1., 2., 3., 4., 5.]);
        let p = t.permute(&[1, 0]);
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(p.data(), &[0., 3., 1., 4., 2., 5.]);
    }

    #[test]
    fn broadcast_and_reduce_are_adjoint() {
        let t = Tensor::new(&[2, 1], vec![1., 2.]);
        let b = t.broadcast_to(&[3, 2, 4]);
        assert_eq!(b.numel(), 24);
        assert_eq!(b.data()[4], 2.0);
        let s = b.sum_to_shape(&[2, 1]);
        assert_eq!(s.data(), &[12., 24.]);
    }

    #[test]
    fn narrow_concat_roundtrip() {
        let t = Tensor::new(&[2, 4], (0..8).map(f64::from).collect());
        let a = t.narrow(1, 0, 1);
        let b = t.narrow(1, 1, 3);
        assert_eq!(Tensor::concat(&[&a, &b], 1), t);
    }

    #[test]
    fn copy_on_write() {
        let a = Tensor::zeros(&[3]);
        let mut b = a.clone();
        b.data_mut()[0] = 1.0;
        assert_eq!(a.data()[0], 0.0);
        assert_eq!(b.data()[0], 1.0);
    }
}
