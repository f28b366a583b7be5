//! Differentiable operations on [`Var`].

use std::rc::Rc;

use crate::gemm::gemm;
use crate::tensor::{broadcast_shape, numel, Tensor};
use crate::var::Var;

fn bcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let shape = broadcast_shape(a.shape(), b.shape());
    a.broadcast_to(&shape).zip_map(&b.broadcast_to(&shape), f)
}

fn needs(p: &[Var], i: usize) -> bool {
    p[i].requires_grad()
}

impl Var {
    fn unary(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
        let out = self.value().map(f);
        Var::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, p, y| {
                let x = p[0].value().data();
                let gd = g.data();
                let yd = y.data();
                let data = (0..gd.len()).map(|i| gd[i] * df(x[i], yd[i])).collect();
                vec![Some(Tensor::new(g.shape(), data))]
            }),
        )
    }

    pub fn add(&self, o: &Var) -> Var {
        let out = bcast_zip(self.value(), o.value(), |a, b| a + b);
        Var::from_op(
            out,
            vec![self.clone(), o.clone()],
            Box::new(|g, p, _| {
                vec![
                    needs(p, 0).then(|| g.sum_to_shape(p[0].shape())),
                    needs(p, 1).then(|| g.sum_to_shape(p[1].shape())),
                ]
            }),
        )
    }

    pub fn sub(&self, o: &Var) -> Var {
        let out = bcast_zip(self.value(), o.value(), |a, b| a - b);
        Var::from_op(
            out,
            vec![self.clone(), o.clone()],
            Box::new(|g, p, _| {
                vec![
                    needs(p, 0).then(|| g.sum_to_shape(p[0].shape())),
                    needs(p, 1).then(|| g.scale(-1.0).sum_to_shape(p[1].shape())),
                ]
            }),
        )
    }

    pub fn mul(&self, o: &Var) -> Var {
        let out = bcast_zip(self.value(), o.value(), |a, b| a * b);
        Var::from_op(
            out,
            vec![self.clone(), o.clone()],
            Box::new(|g, p, _| {
                let (a, b) = (p[0].value(), p[1].value());
                vec![
                    needs(p, 0).then(|| bcast_zip(g, b, |x, y| x * y).sum_to_shape(a.shape())),
                    needs(p, 1).then(|| bcast_zip(g, a, |x, y| x * y).sum_to_shape(b.shape())),
                ]
            }),
        )
    }

    pub fn div(&self, o: &Var) -> Var {
        let out = bcast_zip(self.value(), o.value(), |a, b| a / b);
        Var::from_op(
            out,
            vec![self.clone(), o.clone()],
            Box::new(|g, p, y| {
                let (a, b) = (p[0].value(), p[1].value());
                vec![
                    needs(p, 0).then(|| bcast_zip(g, b, |x, d| x / d).sum_to_shape(a.shape())),
                    needs(p, 1).then(|| {
                        let gy = bcast_zip(g, y, |x, q| -x * q);
                        bcast_zip(&gy, b, |x, d| x / d).sum_to_shape(b.shape())
                    }),
                ]
            }),
        )
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn scale(&self, s: f64) -> Var {
        self.unary(move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Var {
        self.unary(move |x| x + s, |_, _| 1.0)
    }

    pub fn square(&self) -> Var {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(&self) -> Var {
        self.unary(f64::sqrt, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 })
    }

    pub fn exp(&self) -> Var {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Var {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sigmoid(&self) -> Var {
        self.unary(|x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self) -> Var {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn silu(&self) -> Var {
        self.unary(
            |x| x / (1.0 + (-x).exp()),
            |x, _| {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn relu(&self) -> Var {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        self.unary(
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    /// tanh-approximated GELU.
    pub fn gelu(&self) -> Var {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        self.unary(
            |x| 0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh()),
            |x, _| {
                let u = C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            },
        )
    }

    /// Clamp with pass-through gradient inside `[lo, hi]`.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        self.unary(
            move |x| x.clamp(lo, hi),
            move |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 },
        )
    }

    pub fn sum(&self) -> Var {
        let out = Tensor::scalar(self.value().sum());
        Var::from_op(
            out,
            vec![self.clone()],
            Box::new(|g, p, _| vec![Some(Tensor::full(p[0].shape(), g.item()))]),
        )
    }

    pub fn mean(&self) -> Var {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Euclidean norm of all elements; the gradient at zero is taken as zero.
    pub fn l2_norm(&self) -> Var {
        let out = Tensor::scalar(self.value().sq_norm().sqrt());
        Var::from_op(
            out,
            vec![self.clone()],
            Box::new(|g, p, y| {
                let n = y.item();
                let s = if n > 0.0 { g.item() / n } else { 0.0 };
                vec![Some(p[0].value().scale(s))]
            }),
        )
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Var {
        let mut out = self.value().sum_axis(axis);
        if keepdim {
            let mut shape = self.shape().to_vec();
            shape[axis] = 1;
            out = out.reshape(&shape);
        }
        Var::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, p, _| {
                let mut shape = p[0].shape().to_vec();
                shape[axis] = 1;
                vec![Some(g.reshape(&shape).broadcast_to(p[0].shape()))]
            }),
        )
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Var {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis, keepdim).scale(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let out = self.value().reshape(shape);
        Var::from_op(
            out,
            vec![self.clone()],
            Box::new(|g, p, _| vec![Some(g.reshape(p[0].shape()))]),
        )
    }

    pub fn permute(&self, dims: &[usize]) -> Var {
        let out = self.value().permute(dims);
        let mut inv = vec![0; dims.len()];
        for (i, &d) in dims.iter().enumerate() {
            inv[d] = i;
        }
        Var::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.permute(&inv))]),
        )
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var {
        let out = self.value().narrow(axis, start, len);
        Var::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, p, _| {
                let full = p[0].shape();
                let outer: usize = full[..axis].iter().product();
                let inner: usize = full[axis + 1..].iter().product();
                let n = full[axis];
                let mut data = vec![0.0; numel(full)];
                let gd = g.data();
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    data[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                vec![Some(Tensor::new(full, data))]
            }),
        )
    }

    pub fn concat(parts: &[Var], axis: usize) -> Var {
        let values: Vec<&Tensor> = parts.iter().map(|v| v.value()).collect();
        let out = Tensor::concat(&values, axis);
        Var::from_op(
            out,
            parts.to_vec(),
            Box::new(move |g, p, _| {
                let mut start = 0;
                p.iter()
                    .map(|v| {
                        let len = v.shape()[axis];
                        let s = start;
                        start += len;
                        v.requires_grad().then(|| g.narrow(axis, s, len))
                    })
                    .collect()
            }),
        )
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Var {
        let out = self.value().broadcast_to(shape);
        Var::from_op(
            out,
            vec![self.clone()],
            Box::new(|g, p, _| vec![Some(g.sum_to_shape(p[0].shape()))]),
        )
    }

    /// Rows of a `(rows, cols)` table; repeated indices accumulate gradient.
    pub fn gather_rows(&self, indices: &[usize]) -> Var {
        assert_eq!(self.value().rank(), 2, "gather_rows needs a 2-D table");
        let cols = self.shape()[1];
        let rows = self.shape()[0];
        let src = self.value().data();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            assert!(i < rows, "row index {i} out of range {rows}");
            data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let out = Tensor::new(&[indices.len(), cols], data);
        let idx: Rc<Vec<usize>> = Rc::new(indices.to_vec());
        Var::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, p, _| {
                let mut acc = vec![0.0; p[0].value().numel()];
                let gd = g.data();
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..cols {
                        acc[i * cols + c] += gd[r * cols + c];
                    }
                }
                vec![Some(Tensor::new(p[0].shape(), acc))]
            }),
        )
    }

    /// Batched matrix product. `self: (..., m, k)`, `o: (..., k, n)` with equal
    /// batch dims, or `o: (k, n)` shared across the batch.
    pub fn matmul(&self, o: &Var) -> Var {
        let a = self.value();
        let b = o.value();
        let ar = a.rank();
        assert!(ar >= 2 && b.rank() >= 2, "matmul needs rank >= 2");
        let (m, k) = (a.shape()[ar - 2], a.shape()[ar - 1]);
        let br = b.rank();
        let (kb, n) = (b.shape()[br - 2], b.shape()[br - 1]);
        assert_eq!(k, kb, "matmul inner dims {k} vs {kb}");
        let batch: usize = a.shape()[..ar - 2].iter().product();
        let shared = br == 2;
        if !shared {
            assert_eq!(&a.shape()[..ar - 2], &b.shape()[..br - 2], "matmul batch dims");
        }
        let mut out_shape = a.shape()[..ar - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let bo = if shared { 0 } else { bi * k * n };
            gemm(m, n, k, &a.data()[bi * m * k..], false, &b.data()[bo..], false, &mut out[bi * m * n..], n, 0.0);
        }
        Var::from_op(
            Tensor::new(&out_shape, out),
            vec![self.clone(), o.clone()],
            Box::new(move |g, p, _| {
                let (a, b) = (p[0].value(), p[1].value());
                let gd = g.data();
                let ga = needs(p, 0).then(|| {
                    let mut ga = vec![0.0; a.numel()];
                    for bi in 0..batch {
                        let bo = if shared { 0 } else { bi * k * n };
                        // ga = g · bᵀ
                        gemm(m, k, n, &gd[bi * m * n..], false, &b.data()[bo..], true, &mut ga[bi * m * k..], k, 0.0);
                    }
                    Tensor::new(a.shape(), ga)
                });
                let gb = needs(p, 1).then(|| {
                    let mut gb = vec![0.0; b.numel()];
                    for bi in 0..batch {
                        let (bo, beta) = if shared { (0, if bi == 0 { 0.0 } else { 1.0 }) } else { (bi * k * n, 0.0) };
                        // gb = aᵀ · g
                        gemm(k, n, m, &a.data()[bi * m * k..], true, &gd[bi * m * n..], false, &mut gb[bo..], n, beta);
                    }
                    Tensor::new(b.shape(), gb)
                });
                vec![ga, gb]
            }),
        )
    }

    /// `x · wᵀ + b` over the last axis; `w: (out, in)`, `b: (out)`.
    pub fn linear(&self, w: &Var, b: Option<&Var>) -> Var {
        let x = self.value();
        let din = *x.shape().last().expect("linear on scalar");
        let (dout, win) = (w.shape()[0], w.shape()[1]);
        assert_eq!(din, win, "linear input dim {din} vs weight {win}");
        let rows = x.numel() / din;
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = b {
            assert_eq!(b.shape(), &[dout]);
            for r in 0..rows {
                out[r * dout..(r + 1) * dout].copy_from_slice(b.value().data());
            }
        }
        gemm(rows, dout, din, x.data(), false, w.value().data(), true, &mut out, dout, if b.is_some() { 1.0 } else { 0.0 });
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let mut parents = vec![self.clone(), w.clone()];
        if let Some(b) = b {
            parents.push(b.clone());
        }
        Var::from_op(
            Tensor::new(&shape, out),
            parents,
            Box::new(move |g, p, _| {
                let gd = g.data();
                let gx = needs(p, 0).then(|| {
                    let mut gx = vec![0.0; rows * din];
                    gemm(rows, din, dout, gd, false, p[1].value().data(), false, &mut gx, din, 0.0);
                    Tensor::new(p[0].shape(), gx)
                });
                let gw = needs(p, 1).then(|| {
                    let mut gw = vec![0.0; dout * din];
                    gemm(dout, din, rows, gd, true, p[0].value().data(), false, &mut gw, din, 0.0);
                    Tensor::new(p[1].shape(), gw)
                });
                let mut res = vec![gx, gw];
                if p.len() == 3 {
                    res.push(needs(p, 2).then(|| {
                        let mut gb = vec![0.0; dout];
                        for r in 0..rows {
                            for (o, v) in gb.iter_mut().zip(&gd[r * dout..(r + 1) * dout]) {
                                *o += v;
                            }
                        }
                        Tensor::new(&[dout], gb)
                    }));
                }
                res
            }),
        )
    }

    pub fn softmax_last(&self) -> Var {
        let x = self.value();
        let d = *x.shape().last().unwrap();
        let mut out = x.to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        Var::from_op(
            Tensor::new(x.shape(), out),
            vec![self.clone()],
            Box::new(move |g, _, y| {
                let mut gx = vec![0.0; y.numel()];
                for ((gr, yr), out) in g.data().chunks(d).zip(y.data().chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for i in 0..d {
                        out[i] = yr[i] * (gr[i] - dot);
                    }
                }
                vec![Some(Tensor::new(y.shape(), gx))]
            }),
        )
    }

    /// Normalizes each of `groups` contiguous chunks of every batch row
    /// (dim 0) to zero mean and unit variance. No affine part.
    pub fn group_norm(&self, groups: usize, eps: f64) -> Var {
        let x = self.value();
        let n = x.shape()[0];
        let rows = n * groups;
        assert_eq!(x.numel() % rows, 0, "group_norm: groups must divide each sample");
        self.normalize_rows(rows, eps)
    }

    /// Layer norm over the last axis, no affine part.
    pub fn layer_norm(&self, eps: f64) -> Var {
        let d = *self.shape().last().unwrap();
        self.normalize_rows(self.value().numel() / d, eps)
    }

    fn normalize_rows(&self, rows: usize, eps: f64) -> Var {
        let x = self.value();
        let len = x.numel() / rows;
        let mut out = vec![0.0; x.numel()];
        let mut rstd = vec![0.0; rows];
        for (r, (xr, yr)) in x.data().chunks(len).zip(out.chunks_mut(len)).enumerate() {
            let mean = xr.iter().sum::<f64>() / len as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for (y, v) in yr.iter_mut().zip(xr) {
                *y = (v - mean) * rs;
            }
        }
        Var::from_op(
            Tensor::new(x.shape(), out),
            vec![self.clone()],
            Box::new(move |g, _, y| {
                let mut gx = vec![0.0; y.numel()];
                for (r, ((gr, yr), out)) in g.data().chunks(len).zip(y.data().chunks(len)).zip(gx.chunks_mut(len)).enumerate() {
                    let mg = gr.iter().sum::<f64>() / len as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / len as f64;
                    for i in 0..len {
                        out[i] = rstd[r] * (gr[i] - mg - yr[i] * mgy);
                    }
                }
                vec![Some(Tensor::new(y.shape(), gx))]
            }),
        )
    }
}

/// Mean squared error between two vars of equal shape.
pub fn mse(a: &Var, b: &Var) -> Var {
    a.sub(b).square().mean()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::var::no_grad;

    fn leaf(shape: &[usize], f: impl Fn(usize) -> f64) -> Var {
        Var::leaf(Tensor::new(shape, (0..numel(shape)).map(f).collect()))
    }

    /// Central-difference check of d(sum(w ⊙ f(x)))/dx for a fixed random weighting.
    fn check_grad(x0: &Tensor, f: impl Fn(&Var) -> Var) {
        let x = Var::leaf(x0.clone());
        let y = f(&x);
        let w: Vec<f64> = (0..y.value().numel()).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect();
        let wt = Var::constant(Tensor::new(y.shape(), w.clone()));
        let g = y.mul(&wt).sum().backward();
        let ga = g.wrt(&x).unwrap().clone();
        let h = 1e-6;
        for i in 0..x0.numel() {
            let eval = |d: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += d;
                no_grad(|| {
                    let y = f(&Var::constant(xp));
                    y.value().data().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
                })
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = ga.data()[i];
            assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "elem {i}: fd {fd} vs analytic {an}");
        }
    }

    fn sample(shape: &[usize]) -> Tensor {
        Tensor::new(shape, (0..numel(shape)).map(|i| ((i as f64) * 0.731).sin() * 1.3).collect())
    }

    #[test]
    fn elementwise_grads() {
        let x = sample(&[2, 3]);
        check_grad(&x, |v| v.silu());
        check_grad(&x, |v| v.gelu());
        check_grad(&x, |v| v.sigmoid());
        check_grad(&x, |v| v.tanh());
        check_grad(&x, |v| v.square().add_scalar(1.0).sqrt());
        check_grad(&x, |v| v.exp().add_scalar(0.5).ln());
        check_grad(&x.map(|v| v + 0.05), |v| v.leaky_relu(0.2));
    }

    #[test]
    fn broadcast_binary_grads() {
        let x = sample(&[2, 3, 4]);
        let b = Var::constant(Tensor::new(&[3, 1], vec![0.5, -1.5, 2.0]));
        check_grad(&x, |v| v.mul(&b));
        check_grad(&x, |v| v.div(&b.add_scalar(3.0)));
        let y = Var::constant(sample(&[2, 3, 4]).scale(0.3));
        check_grad(&Tensor::new(&[3, 1], vec![0.5, -1.5, 2.0]), |v| y.mul(v).add(v).sub(&y));
        check_grad(&Tensor::new(&[3, 1], vec![1.5, 2.5, 2.0]), |v| y.div(v));
    }

    #[test]
    fn shape_op_grads() {
        let x = sample(&[2, 3, 4]);
        check_grad(&x, |v| v.permute(&[2, 0, 1]).square());
        check_grad(&x, |v| v.narrow(1, 1, 2).exp());
        check_grad(&x, |v| Var::concat(&[v.narrow(2, 0, 1), v.square()], 2));
        check_grad(&x, |v| v.sum_axis(1, true).broadcast_to(&[2, 3, 4]).mul(v));
        check_grad(&x, |v| v.reshape(&[6, 4]).gather_rows(&[0, 5, 0, 2]));
    }

    #[test]
    fn matmul_and_linear_grads() {
        let a = sample(&[2, 3, 4]);
        let b = Var::constant(sample(&[2, 4, 5]));
        let bs = Var::constant(sample(&[4, 5]));
        check_grad(&a, |v| v.matmul(&b));
        check_grad(&a, |v| v.matmul(&bs));
        let av = Var::constant(a.clone());
        check_grad(&sample(&[4, 5]), |w| av.matmul(w));
        check_grad(&sample(&[2, 4, 5]), |w| av.matmul(w));
        let w = Var::constant(sample(&[5, 4]));
        let bias = Var::constant(sample(&[5]));
        check_grad(&a, |v| v.linear(&w, Some(&bias)));
        check_grad(&sample(&[5, 4]), |wv| av.linear(wv, Some(&bias)));
        check_grad(&sample(&[5]), |bv| av.linear(&w, Some(bv)));
    }

    #[test]
    fn norm_and_softmax_grads() {
        let x = sample(&[2, 4, 3]);
        check_grad(&x, |v| v.softmax_last());
        check_grad(&x, |v| v.layer_norm(1e-5));
        check_grad(&x, |v| v.group_norm(2, 1e-5));
        check_grad(&x, |v| v.l2_norm());
    }

    #[test]
    fn no_grad_records_nothing() {
        let x = leaf(&[3], |i| i as f64);
        let y = no_grad(|| x.square().sum());
        assert!(!y.requires_grad());
        let z = x.square().sum();
        assert!(z.requires_grad());
    }

    #[test]
    fn detach_blocks_gradient() {
        let x = leaf(&[3], |i| i as f64 + 1.0);
        let y = x.square().detach().mul(&x).sum();
        let g = y.backward();
        assert_eq!(g.wrt(&x).unwrap().data(), &[1.0, 4.0, 9.0]);
    }

    #[test]
    fn reused_var_accumulates() {
        let x = leaf(&[2], |i| i as f64 + 2.0);
        let y = x.mul(&x).add(&x).sum();
        let g = y.backward();
        assert_eq!(g.wrt(&x).unwrap().data(), &[5.0, 7.0]);
    }
}
