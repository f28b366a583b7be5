//! 3D convolution (im2col + gemm) and nearest-neighbour upsampling.
//!
//! Layout is `(N, C, D, H, W)`. 2D convolutions run through the same
//! kernel with a unit depth axis.

use crate::gemm::gemm;
use crate::storage::Storage;
use crate::tensor::Tensor;
use crate::var::Var;

/// Upper bound on scratch column-buffer elements per chunk.
const COL_BUDGET: usize = 1 << 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(in_ch: usize, out_ch: usize, input: [usize; 3], kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> ConvGeom {
        let mut output = [0; 3];
        for i in 0..3 {
            let span = input[i] + 2 * pad[i];
            assert!(span >= kernel[i], "conv kernel {kernel:?} larger than padded input {input:?}");
            output[i] = (span - kernel[i]) / stride[i] + 1;
        }
        ConvGeom { in_ch, out_ch, input, kernel, stride, pad, output }
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }

    fn cols(&self) -> usize {
        self.in_ch * self.kernel.iter().product::<usize>()
    }

    fn out_positions(&self) -> usize {
        self.output.iter().product()
    }

    fn in_positions(&self) -> usize {
        self.input.iter().product()
    }

    fn chunk(&self) -> usize {
        (COL_BUDGET / self.cols()).clamp(1, self.out_positions())
    }
}

/// Calls `f(offset, z, y, x0, x1)` for each run of output positions in
/// `[p0, p1)` that share an output row `(z, y)`.
fn row_runs(g: &ConvGeom, p0: usize, p1: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    let [_, oh, ow] = g.output;
    let mut p = p0;
    while p < p1 {
        let x0 = p % ow;
        let x1 = (x0 + (p1 - p)).min(ow);
        f(p - p0, p / (oh * ow), (p / ow) % oh, x0, x1);
        p += x1 - x0;
    }
}

/// Output columns `[x0, x1)` whose input column `x·s + off` is inside `[0, w)`.
fn valid_cols(x0: usize, x1: usize, s: usize, off: isize, w: usize) -> (usize, usize) {
    let lo = if off >= 0 { 0 } else { ((-off) as usize).div_ceil(s) };
    let hi = if (w as isize) <= off { 0 } else { ((w as isize - off) as usize).div_ceil(s) };
    let lo = lo.clamp(x0, x1);
    (lo, hi.clamp(lo, x1))
}

/// One kernel tap applied to one output run.
struct Tap {
    /// Start of the run inside the column buffer.
    start: usize,
    /// Offset of the input row, `None` when the row lies in the padding.
    base: Option<usize>,
    x0: usize,
    x1: usize,
    /// Output columns `[lo, hi)` read real input.
    lo: usize,
    hi: usize,
    /// Input column of output column `ox` is `ox·stride + off`.
    off: isize,
}

fn for_each_tap(g: &ConvGeom, p0: usize, p1: usize, mut f: impl FnMut(&Tap)) {
    let len = p1 - p0;
    let [d, h, w] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [s0, s1, s2] = g.stride;
    let inp = g.in_positions();
    row_runs(g, p0, p1, |j0, oz, oy, x0, x1| {
        let mut r = 0;
        for c in 0..g.in_ch {
            for a in 0..kd {
                let iz = (oz * s0 + a) as isize - g.pad[0] as isize;
                for bb in 0..kh {
                    let iy = (oy * s1 + bb) as isize - g.pad[1] as isize;
                    let inside = iz >= 0 && (iz as usize) < d && iy >= 0 && (iy as usize) < h;
                    let base = inside.then(|| c * inp + (iz as usize * h + iy as usize) * w);
                    for cc in 0..kw {
                        let off = cc as isize - g.pad[2] as isize;
                        let (lo, hi) = valid_cols(x0, x1, s2, off, w);
                        f(&Tap { start: r * len + j0, base, x0, x1, lo, hi, off });
                        r += 1;
                    }
                }
            }
        }
    });
}

fn im2col(g: &ConvGeom, x: &[f64], p0: usize, p1: usize, cols: &mut [f64]) {
    let s2 = g.stride[2];
    for_each_tap(g, p0, p1, |t| {
        let dst = &mut cols[t.start..t.start + (t.x1 - t.x0)];
        let Some(base) = t.base else {
            dst.fill(0.0);
            return;
        };
        let (lo, hi) = (t.lo - t.x0, t.hi - t.x0);
        dst[..lo].fill(0.0);
        dst[hi..].fill(0.0);
        let first = (base as isize + (t.lo * s2) as isize + t.off) as usize;
        if s2 == 1 {
            dst[lo..hi].copy_from_slice(&x[first..first + (hi - lo)]);
        } else {
            for (i, v) in dst[lo..hi].iter_mut().enumerate() {
                *v = x[first + i * s2];
            }
        }
    });
}

fn col2im(g: &ConvGeom, cols: &[f64], p0: usize, p1: usize, gx: &mut [f64]) {
    let s2 = g.stride[2];
    for_each_tap(g, p0, p1, |t| {
        let Some(base) = t.base else { return };
        let src = &cols[t.start + (t.lo - t.x0)..t.start + (t.hi - t.x0)];
        let first = (base as isize + (t.lo * s2) as isize + t.off) as usize;
        if s2 == 1 {
            for (d, v) in gx[first..first + src.len()].iter_mut().zip(src) {
                *d += v;
            }
        } else {
            for (i, v) in src.iter().enumerate() {
                gx[first + i * s2] += v;
            }
        }
    });
}

fn conv_forward(g: &ConvGeom, batch: usize, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (inp, outp, ncol) = (g.in_positions(), g.out_positions(), g.cols());
    let mut out = vec![0.0; batch * g.out_ch * outp];
    for n in 0..batch {
        let xn = &x[n * g.in_ch * inp..(n + 1) * g.in_ch * inp];
        let on = &mut out[n * g.out_ch * outp..(n + 1) * g.out_ch * outp];
        if let Some(b) = bias {
            for (co, &bv) in b.iter().enumerate() {
                on[co * outp..(co + 1) * outp].fill(bv);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        if g.is_pointwise() {
            gemm(g.out_ch, outp, g.in_ch, w, false, xn, false, on, outp, beta);
            continue;
        }
        let chunk = g.chunk();
        let mut cols = Storage::zeros(ncol * chunk);
        let mut p0 = 0;
        while p0 < outp {
            let p1 = (p0 + chunk).min(outp);
            let len = p1 - p0;
            im2col(g, xn, p0, p1, &mut cols[..ncol * len]);
            gemm(g.out_ch, len, ncol, w, false, &cols[..ncol * len], false, &mut on[p0..], outp, beta);
            p0 = p1;
        }
    }
    out
}

/// Returns `(grad_x, grad_w, grad_b)`, each only when requested.
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
fn conv_backward(
    g: &ConvGeom,
    batch: usize,
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    want_x: bool,
    want_w: bool,
    want_b: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let (inp, outp, ncol) = (g.in_positions(), g.out_positions(), g.cols());
    let mut gx = want_x.then(|| vec![0.0; batch * g.in_ch * inp]);
    let mut gw = want_w.then(|| vec![0.0; g.out_ch * ncol]);
    let gb = want_b.then(|| {
        let mut gb = vec![0.0; g.out_ch];
        for n in 0..batch {
            for (co, acc) in gb.iter_mut().enumerate() {
                let s = (n * g.out_ch + co) * outp;
                *acc += gout[s..s + outp].iter().sum::<f64>();
            }
        }
        gb
    });
    let chunk = g.chunk();
    let mut cols = Storage::zeros(if g.is_pointwise() { 0 } else { ncol * chunk });
    for n in 0..batch {
        let xn = &x[n * g.in_ch * inp..(n + 1) * g.in_ch * inp];
        let gn = &gout[n * g.out_ch * outp..(n + 1) * g.out_ch * outp];
        if g.is_pointwise() {
            if let Some(gw) = gw.as_mut() {
                gemm(g.out_ch, g.in_ch, outp, gn, false, xn, true, gw, g.in_ch, 1.0);
            }
            if let Some(gx) = gx.as_mut() {
                let gxn = &mut gx[n * g.in_ch * inp..(n + 1) * g.in_ch * inp];
                gemm(g.in_ch, inp, g.out_ch, w, true, gn, false, gxn, inp, 0.0);
            }
            continue;
        }
        let mut p0 = 0;
        while p0 < outp {
            let p1 = (p0 + chunk).min(outp);
            let len = p1 - p0;
            // gout chunk is a (out_ch × len) view with row stride outp; copy it contiguous
            let mut gchunk = Storage::zeros(g.out_ch * len);
            for co in 0..g.out_ch {
                gchunk[co * len..(co + 1) * len].copy_from_slice(&gn[co * outp + p0..co * outp + p1]);
            }
            if let Some(gw) = gw.as_mut() {
                im2col(g, xn, p0, p1, &mut cols[..ncol * len]);
                gemm(g.out_ch, ncol, len, &gchunk, false, &cols[..ncol * len], true, gw, ncol, 1.0);
            }
            if let Some(gx) = gx.as_mut() {
                gemm(ncol, len, g.out_ch, w, true, &gchunk, false, &mut cols[..ncol * len], len, 0.0);
                col2im(g, &cols[..ncol * len], p0, p1, &mut gx[n * g.in_ch * inp..(n + 1) * g.in_ch * inp]);
            }
            p0 = p1;
        }
    }
    (gx, gw, gb)
}

impl Var {
    /// 3D convolution. `self: (N, Cin, D, H, W)`, `w: (Cout, Cin, kd, kh, kw)`.
    pub fn conv3d(&self, w: &Var, b: Option<&Var>, stride: [usize; 3], pad: [usize; 3]) -> Var {
        let xs = self.shape();
        let ws = w.shape();
        assert_eq!(xs.len(), 5, "conv3d input must be (N, C, D, H, W), got {xs:?}");
        assert_eq!(ws.len(), 5, "conv3d weight must be rank 5");
        assert_eq!(xs[1], ws[1], "conv3d channel mismatch: input {} vs weight {}", xs[1], ws[1]);
        let geom = ConvGeom::new(ws[1], ws[0], [xs[2], xs[3], xs[4]], [ws[2], ws[3], ws[4]], stride, pad);
        let batch = xs[0];
        let out = conv_forward(&geom, batch, self.value().data(), w.value().data(), b.map(|b| b.value().data()));
        let shape = [batch, geom.out_ch, geom.output[0], geom.output[1], geom.output[2]];
        let mut parents = vec![self.clone(), w.clone()];
        if let Some(b) = b {
            parents.push(b.clone());
        }
        Var::from_op(
            Tensor::new(&shape, out),
            parents,
            Box::new(move |g, p, _| {
                let want_b = p.len() == 3 && p[2].requires_grad();
                let (gx, gw, gb) = conv_backward(
                    &geom,
                    batch,
                    p[0].value().data(),
                    p[1].value().data(),
                    g.data(),
                    p[0].requires_grad(),
                    p[1].requires_grad(),
                    want_b,
                );
                let mut res = vec![gx.map(|v| Tensor::new(p[0].shape(), v)), gw.map(|v| Tensor::new(p[1].shape(), v))];
                if p.len() == 3 {
                    res.push(gb.map(|v| Tensor::new(p[2].shape(), v)));
                }
                res
            }),
        )
    }

    /// Nearest-neighbour upsampling of the three trailing axes.
    pub fn upsample_nearest(&self, f: [usize; 3]) -> Var {
        let xs = self.shape().to_vec();
        assert_eq!(xs.len(), 5, "upsample expects (N, C, D, H, W)");
        let lead = xs[0] * xs[1];
        let [d, h, w] = [xs[2], xs[3], xs[4]];
        let [od, oh, ow] = [d * f[0], h * f[1], w * f[2]];
        let x = self.value().data();
        let mut out = Vec::with_capacity(lead * od * oh * ow);
        for l in 0..lead {
            for z in 0..od {
                for y in 0..oh {
                    let row = &x[l * d * h * w + ((z / f[0]) * h + y / f[1]) * w..];
                    out.extend((0..ow).map(|xx| row[xx / f[2]]));
                }
            }
        }
        Var::from_op(
            Tensor::new(&[xs[0], xs[1], od, oh, ow], out),
            vec![self.clone()],
            Box::new(move |g, p, _| {
                let gd = g.data();
                let mut gx = vec![0.0; lead * d * h * w];
                let mut i = 0;
                for l in 0..lead {
                    for z in 0..od {
                        for y in 0..oh {
                            let base = l * d * h * w + ((z / f[0]) * h + y / f[1]) * w;
                            for xx in 0..ow {
                                gx[base + xx / f[2]] += gd[i];
                                i += 1;
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(p[0].shape(), gx))]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::var::no_grad;

    fn sample(shape: &[usize], k: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|i| ((i as f64) * k).sin()).collect())
    }

    /// Direct 7-loop convolution used as the reference.
    fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], stride: [usize; 3], pad: [usize; 3]) -> Tensor {
        let xs = x.shape();
        let ws = w.shape();
        let g = ConvGeom::new(ws[1], ws[0], [xs[2], xs[3], xs[4]], [ws[2], ws[3], ws[4]], stride, pad);
        let [od, oh, ow] = g.output;
        let mut out = vec![0.0; xs[0] * ws[0] * od * oh * ow];
        let xd = x.data();
        let wd = w.data();
        let mut i = 0;
        for n in 0..xs[0] {
            for co in 0..ws[0] {
                for z in 0..od {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut acc = b[co];
                            for ci in 0..ws[1] {
                                for a in 0..ws[2] {
                                    for bb in 0..ws[3] {
                                        for c in 0..ws[4] {
                                            let iz = (z * stride[0] + a) as isize - pad[0] as isize;
                                            let iy = (y * stride[1] + bb) as isize - pad[1] as isize;
                                            let ix = (xx * stride[2] + c) as isize - pad[2] as isize;
                                            if iz < 0 || iy < 0 || ix < 0 || iz >= xs[2] as isize || iy >= xs[3] as isize || ix >= xs[4] as isize {
                                                continue;
                                            }
                                            let xi = (((n * xs[1] + ci) * xs[2] + iz as usize) * xs[3] + iy as usize) * xs[4] + ix as usize;
                                            let wi = (((co * ws[1] + ci) * ws[2] + a) * ws[3] + bb) * ws[4] + c;
                                            acc += xd[xi] * wd[wi];
                                        }
                                    }
                                }
                            }
                            out[i] = acc;
                            i += 1;
                        }
                    }
                }
            }
        }
        Tensor::new(&[xs[0], ws[0], od, oh, ow], out)
    }

    #[test]
    fn conv_matches_naive() {
        let x = sample(&[2, 3, 5, 4, 6], 0.37);
        for (k, s, p) in [([3, 3, 3], [1, 1, 1], [1, 1, 1]), ([3, 3, 3], [2, 2, 2], [1, 1, 1]), ([1, 1, 1], [1, 1, 1], [0, 0, 0]), ([1, 3, 3], [1, 2, 1], [0, 1, 1])] {
            let w = sample(&[4, 3, k[0], k[1], k[2]], 0.53);
            let b = vec![0.1, -0.2, 0.3, 0.05];
            let y = Var::constant(x.clone()).conv3d(&Var::constant(w.clone()), Some(&Var::constant(Tensor::new(&[4], b.clone()))), s, p);
            let r = naive_conv(&x, &w, &b, s, p);
            assert_eq!(y.shape(), r.shape());
            for (a, b) in y.value().data().iter().zip(r.data()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn chunked_columns_match_naive() {
        // 1000 output positions with 81 columns each spill over several
        // column chunks that split output rows.
        let x = sample(&[1, 3, 10, 10, 10], 0.23);
        let w = sample(&[2, 3, 3, 3, 3], 0.71);
        let b = vec![0.0, 0.5];
        let xv = Var::leaf(x.clone());
        let y = xv.conv3d(&Var::constant(w.clone()), Some(&Var::constant(Tensor::new(&[2], b.clone()))), [1; 3], [1; 3]);
        let r = naive_conv(&x, &w, &b, [1; 3], [1; 3]);
        assert!(y.value().data().iter().zip(r.data()).all(|(a, b)| (a - b).abs() < 1e-10));
        // gradient of Σ y w.r.t. x equals the naive conv of ones with the flipped kernel sum
        let g = y.sum().backward();
        let gx = g.wrt(&xv).unwrap();
        let probe = |i: usize| {
            let mut t = x.clone();
            t.data_mut()[i] += 1.0;
            naive_conv(&t, &w, &b, [1; 3], [1; 3]).sum() - r.sum()
        };
        for i in [0, 37, 455, 999, 1500, 2999] {
            assert!((gx.data()[i] - probe(i)).abs() < 1e-9);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let x0 = sample(&[1, 2, 4, 3, 4], 0.41);
        let w0 = sample(&[3, 2, 3, 3, 3], 0.29);
        let b0 = Tensor::new(&[3], vec![0.1, 0.0, -0.1]);
        for (s, p) in [([1, 1, 1], [1, 1, 1]), ([2, 2, 2], [1, 1, 1])] {
            let x = Var::leaf(x0.clone());
            let w = Var::leaf(w0.clone());
            let b = Var::leaf(b0.clone());
            let loss = |x: &Var, w: &Var, b: &Var| x.conv3d(w, Some(b), s, p).square().sum();
            let g = loss(&x, &w, &b).backward();
            let h = 1e-6;
            for (t0, which) in [(&x0, 0), (&w0, 1), (&b0, 2)] {
                let an = match which {
                    0 => g.wrt(&x).unwrap(),
                    1 => g.wrt(&w).unwrap(),
                    _ => g.wrt(&b).unwrap(),
                };
                for i in (0..t0.numel()).step_by(5) {
                    let f = |d: f64| {
                        let mut t = t0.clone();
                        t.data_mut()[i] += d;
                        let c = |v: &Tensor| Var::constant(v.clone());
                        no_grad(|| match which {
                            0 => loss(&c(&t), &c(&w0), &c(&b0)).item(),
                            1 => loss(&c(&x0), &c(&t), &c(&b0)).item(),
                            _ => loss(&c(&x0), &c(&w0), &c(&t)).item(),
                        })
                    };
                    let fd = (f(h) - f(-h)) / (2.0 * h);
                    let a = an.data()[i];
                    assert!((fd - a).abs() < 1e-5 * (1.0 + fd.abs()), "param {which} elem {i}: {fd} vs {a}");
                }
            }
        }
    }

    #[test]
    fn upsample_repeats_and_sums_back() {
        let x = Var::leaf(Tensor::new(&[1, 1, 1, 2, 2], vec![1., 2., 3., 4.]));
        let y = x.upsample_nearest([2, 2, 2]);
        assert_eq!(y.shape(), &[1, 1, 2, 4, 4]);
        assert_eq!(&y.value().data()[..4], &[1., 1., 2., 2.]);
        let g = y.sum().backward();
        assert_eq!(g.wrt(&x).unwrap().data(), &[8., 8., 8., 8.]);
    }
}
