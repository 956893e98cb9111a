//! 2-D convolution (im2col + GEMM) and the stride-2 transposed convolution
//! used for decoder upsampling.

use super::tape::{GradSink, Op};
use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv2dOp {
    pub(crate) x: Var,
    pub(crate) kernel: Var,
    pub(crate) bias: Option<Var>,
    pub(crate) stride: usize,
    pub(crate) pad: usize,
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col<T: Scalar>(x: &[T], g: &Geometry, out: &mut [T]) {
    let p = g.cols();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut out[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &Geometry, dx: &mut [T]) {
    let p = g.cols();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            line[ix as usize] = line[ix as usize] + src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn geometry(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<(usize, usize, Geometry)> {
    let [n, c, h, w] = <[usize; 4]>::try_from(x)
        .map_err(|_| Error::InvalidShape { shape: x.to_vec(), reason: "conv2d input must be NCHW".into() })?;
    let [o, kc, kh, kw] = <[usize; 4]>::try_from(k)
        .map_err(|_| Error::InvalidShape { shape: k.to_vec(), reason: "conv2d kernel must be OCkk".into() })?;
    if kc != c {
        return Err(Error::ShapeMismatch { op: "conv2d (channels)", left: x.to_vec(), right: k.to_vec() });
    }
    if stride == 0 {
        return Err(Error::Unsupported { op: "conv2d", reason: "stride must be >= 1".into() });
    }
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    if hp < kh || wp < kw {
        return Err(Error::InvalidShape { shape: x.to_vec(), reason: "output extent would be < 1".into() });
    }
    let g = Geometry { c, h, w, kh, kw, oh: (hp - kh) / stride + 1, ow: (wp - kw) / stride + 1, stride, pad };
    Ok((n, o, g))
}

impl<T: Scalar> Tape<T> {
    /// Cross-correlation of `x` (NCHW) with `kernel` (O×C×kh×kw) plus optional bias (O).
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (n, o, g) = geometry(self.shape(x), self.shape(kernel), stride, padding)?;
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(Error::ShapeMismatch { op: "conv2d (bias)", left: vec![o], right: self.shape(b).to_vec() });
            }
        }
        let (rows, p) = (g.rows(), g.cols());
        let xd = self.value(x).data();
        let kd = self.value(kernel).data();
        let mut out = vec![T::zero(); n * o * p];
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * p] };
        for s in 0..n {
            let xs = &xd[s * g.c * g.h * g.w..(s + 1) * g.c * g.h * g.w];
            let src: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, &g, &mut cols);
                &cols
            };
            let ys = &mut out[s * o * p..(s + 1) * o * p];
            T::gemm_raw(o, rows, p, T::one(), kd, rows as isize, 1, src, p as isize, 1, T::zero(), ys);
            if let Some(b) = bias {
                let bd = self.value(b).data();
                for (oc, chunk) in ys.chunks_mut(p).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = *v + bd[oc]);
                }
            }
        }
        let value = Tensor::from_parts(vec![n, o, g.oh, g.ow], out);
        Ok(self.push(value, Op::Conv2d(Conv2dOp { x, kernel, bias, stride, pad: padding })))
    }

    /// Stride-2 transposed convolution with a 2×2 kernel laid out as C_in×C_out×2×2.
    /// Spatial extents are exactly doubled.
    pub fn transposed_conv2d(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let ks = self.shape(kernel).to_vec();
        if stride != 2 || ks.len() != 4 || ks[2] != 2 || ks[3] != 2 {
            return Err(Error::Unsupported {
                op: "transposed_conv2d",
                reason: format!("only stride 2 with a 2x2 kernel is supported (stride {stride}, kernel {ks:?})"),
            });
        }
        if ks[0] != c {
            return Err(Error::ShapeMismatch {
                op: "transposed_conv2d (channels)",
                left: self.shape(x).to_vec(),
                right: ks,
            });
        }
        let o = ks[1];
        let hw = h * w;
        let o4 = o * 4;
        let xd = self.value(x).data();
        let kd = self.value(kernel).data();
        let mut z = vec![T::zero(); o4 * hw];
        let mut out = vec![T::zero(); n * o * 4 * hw];
        for s in 0..n {
            let xs = &xd[s * c * hw..(s + 1) * c * hw];
            // z (O4 x HW) = K^T (O4 x C) * x_s (C x HW)
            T::gemm_raw(o4, c, hw, T::one(), kd, 1, o4 as isize, xs, hw as isize, 1, T::zero(), &mut z);
            let ys = &mut out[s * o * 4 * hw..(s + 1) * o * 4 * hw];
            scatter_up(&z, ys, o, h, w);
        }
        let value = Tensor::from_parts(vec![n, o, 2 * h, 2 * w], out);
        Ok(self.push(value, Op::ConvTranspose2x2 { x, kernel }))
    }
}

/// z[(o*4 + a*2 + b), i*W + j] -> y[o, 2i+a, 2j+b]
fn scatter_up<T: Scalar>(z: &[T], y: &mut [T], o: usize, h: usize, w: usize) {
    let hw = h * w;
    let w2 = 2 * w;
    for oc in 0..o {
        for a in 0..2 {
            for b in 0..2 {
                let row = &z[(oc * 4 + a * 2 + b) * hw..(oc * 4 + a * 2 + b + 1) * hw];
                for i in 0..h {
                    for j in 0..w {
                        y[oc * 4 * hw + (2 * i + a) * w2 + 2 * j + b] = row[i * w + j];
                    }
                }
            }
        }
    }
}

fn gather_down<T: Scalar>(y: &[T], z: &mut [T], o: usize, h: usize, w: usize) {
    let hw = h * w;
    let w2 = 2 * w;
    for oc in 0..o {
        for a in 0..2 {
            for b in 0..2 {
                let row = &mut z[(oc * 4 + a * 2 + b) * hw..(oc * 4 + a * 2 + b + 1) * hw];
                for i in 0..h {
                    for j in 0..w {
                        row[i * w + j] = y[oc * 4 * hw + (2 * i + a) * w2 + 2 * j + b];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_backward<T: Scalar>(sink: &mut GradSink<'_, T>, op: &Conv2dOp, g: &[T]) {
    let nodes = sink.nodes;
    let xv = &nodes[op.x.0].value;
    let kv = &nodes[op.kernel.0].value;
    let (n, o, geo) = geometry(xv.shape(), kv.shape(), op.stride, op.pad).expect("validated in forward");
    let (rows, p) = (geo.rows(), geo.cols());
    let xd = xv.data();
    let kd = kv.data();
    let chw = geo.c * geo.h * geo.w;
    let want_x = sink.wants(op.x);
    let want_k = sink.wants(op.kernel);

    if let Some(b) = op.bias {
        if sink.wants(b) {
            let db = sink.buf(b);
            for s in 0..n {
                for oc in 0..o {
                    let base = (s * o + oc) * p;
                    let acc: T = g[base..base + p].iter().copied().sum();
                    db[oc] = db[oc] + acc;
                }
            }
        }
    }

    if want_k {
        let mut dk = vec![T::zero(); o * rows];
        let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * p] };
        for s in 0..n {
            let xs = &xd[s * chw..(s + 1) * chw];
            let src: &[T] = if geo.is_pointwise() {
                xs
            } else {
                im2col(xs, &geo, &mut cols);
                &cols
            };
            let gs = &g[s * o * p..(s + 1) * o * p];
            // dK (O x rows) += dY (O x P) * cols^T (P x rows)
            T::gemm_raw(o, p, rows, T::one(), gs, p as isize, 1, src, 1, p as isize, T::one(), &mut dk);
        }
        let buf = sink.buf(op.kernel);
        buf.iter_mut().zip(&dk).for_each(|(a, &b)| *a = *a + b);
    }

    if want_x {
        let mut dcols = vec![T::zero(); rows * p];
        let dx = sink.buf(op.x);
        for s in 0..n {
            let gs = &g[s * o * p..(s + 1) * o * p];
            let dxs = &mut dx[s * chw..(s + 1) * chw];
            if geo.is_pointwise() {
                // dX (C x P) += K^T (C x O) * dY (O x P)
                T::gemm_raw(rows, o, p, T::one(), kd, 1, rows as isize, gs, p as isize, 1, T::one(), dxs);
            } else {
                T::gemm_raw(rows, o, p, T::one(), kd, 1, rows as isize, gs, p as isize, 1, T::zero(), &mut dcols);
                col2im(&dcols, &geo, dxs);
            }
        }
    }
}

pub(crate) fn conv_t_backward<T: Scalar>(sink: &mut GradSink<'_, T>, x: Var, kernel: Var, g: &[T]) {
    let nodes = sink.nodes;
    let xv = &nodes[x.0].value;
    let kd = nodes[kernel.0].value.data();
    let [n, c, h, w] = xv.dims4().expect("validated in forward");
    let o = nodes[kernel.0].value.shape()[1];
    let (hw, o4) = (h * w, o * 4);
    let xd = xv.data();
    let mut dz_all = vec![T::zero(); n * o4 * hw];
    for s in 0..n {
        gather_down(&g[s * o4 * hw..(s + 1) * o4 * hw], &mut dz_all[s * o4 * hw..(s + 1) * o4 * hw], o, h, w);
    }
    if sink.wants(kernel) {
        let mut dk = vec![T::zero(); c * o4];
        for s in 0..n {
            let xs = &xd[s * c * hw..(s + 1) * c * hw];
            let dz = &dz_all[s * o4 * hw..(s + 1) * o4 * hw];
            // dK (C x O4) += x_s (C x HW) * dz^T (HW x O4)
            T::gemm_raw(c, hw, o4, T::one(), xs, hw as isize, 1, dz, 1, hw as isize, T::one(), &mut dk);
        }
        let buf = sink.buf(kernel);
        buf.iter_mut().zip(&dk).for_each(|(a, &b)| *a = *a + b);
    }
    if sink.wants(x) {
        let dx = sink.buf(x);
        for s in 0..n {
            let dz = &dz_all[s * o4 * hw..(s + 1) * o4 * hw];
            // dX (C x HW) += K (C x O4) * dz (O4 x HW)
            T::gemm_raw(
                c,
                o4,
                hw,
                T::one(),
                kd,
                o4 as isize,
                1,
                dz,
                hw as isize,
                1,
                T::one(),
                &mut dx[s * c * hw..(s + 1) * c * hw],
            );
        }
    }
}
