//! Normalization kernels (without the learnable affine) and the per-channel
//! affine transform.

use super::tape::{GradSink, Op};
use super::{lit, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Mean and biased variance of a strided group, accumulated in f64.
fn moments<T: Scalar>(values: impl Iterator<Item = T>) -> (f64, f64, usize) {
    let mut count = 0usize;
    let mut sum = 0.0f64;
    let mut sq = 0.0f64;
    for v in values {
        let v = v.to_f64().unwrap_or(f64::NAN);
        sum += v;
        sq += v * v;
        count += 1;
    }
    let mean = sum / count as f64;
    let var = (sq / count as f64 - mean * mean).max(0.0);
    (mean, var, count)
}

impl<T: Scalar> Tape<T> {
    /// Per-channel normalization with batch statistics over (N, H, W).
    /// Returns the normalized tensor plus the batch mean and biased variance.
    pub fn batch_norm_train(&mut self, x: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let plane = h * w;
        if n * plane < 2 {
            return Err(Error::InvalidShape {
                shape: self.shape(x).to_vec(),
                reason: "batch norm in train mode needs N*H*W >= 2".into(),
            });
        }
        let xd = self.value(x).data();
        let mut means = Vec::with_capacity(c);
        let mut vars = Vec::with_capacity(c);
        let mut inv_std = Vec::with_capacity(c);
        for ch in 0..c {
            let it = (0..n).flat_map(|s| xd[(s * c + ch) * plane..(s * c + ch + 1) * plane].iter().copied());
            let (m, v, _) = moments(it);
            means.push(m);
            vars.push(v);
            inv_std.push(lit::<T>(1.0 / (v + eps).sqrt()));
        }
        let mut out = vec![T::zero(); xd.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                let (m, is) = (lit::<T>(means[ch]), inv_std[ch]);
                for i in base..base + plane {
                    out[i] = (xd[i] - m) * is;
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, h, w], out);
        let v = self.push(value, Op::BatchNorm { x, inv_std });
        Ok((v, means, vars))
    }

    /// Normalizes every (sample, channel) plane by its own statistics.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let plane = h * w;
        if plane < 2 {
            return Err(Error::InvalidShape {
                shape: self.shape(x).to_vec(),
                reason: "instance norm needs H*W >= 2".into(),
            });
        }
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        let mut inv_std = Vec::with_capacity(n * c);
        for p in 0..n * c {
            let src = &xd[p * plane..(p + 1) * plane];
            let (m, v, _) = moments(src.iter().copied());
            let is = lit::<T>(1.0 / (v + eps).sqrt());
            let m = lit::<T>(m);
            for (o, &e) in out[p * plane..(p + 1) * plane].iter_mut().zip(src) {
                *o = (e - m) * is;
            }
            inv_std.push(is);
        }
        let value = Tensor::from_parts(vec![n, c, h, w], out);
        Ok(self.push(value, Op::InstanceNorm { x, inv_std }))
    }

    /// `y[n,c] = scale[c] * x[n,c] + shift[c]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if self.shape(scale) != [c] || self.shape(shift) != [c] {
            return Err(Error::ShapeMismatch {
                op: "channel_affine",
                left: self.shape(scale).to_vec(),
                right: vec![c],
            });
        }
        let plane = h * w;
        let (xd, sd, bd) = (self.value(x).data(), self.value(scale).data(), self.value(shift).data());
        let mut out = vec![T::zero(); xd.len()];
        for p in 0..n * c {
            let ch = p % c;
            for i in p * plane..(p + 1) * plane {
                out[i] = sd[ch] * xd[i] + bd[ch];
            }
        }
        let value = Tensor::from_parts(vec![n, c, h, w], out);
        Ok(self.push(value, Op::ChannelAffine { x, scale, shift }))
    }
}

/// Shared backward of the two normalizations: within each group of `m`
/// elements with normalized output `y`,
/// `dx = inv_std / m * (m*g - sum(g) - y * sum(g*y))`.
fn normalize_grad<T: Scalar>(g: &[T], y: &[T], idx: &[usize], inv_std: T, dx: &mut [T]) {
    let m = idx.len() as f64;
    let (mut sg, mut sgy) = (0.0f64, 0.0f64);
    for &i in idx {
        let (gi, yi) = (g[i].to_f64().unwrap_or(0.0), y[i].to_f64().unwrap_or(0.0));
        sg += gi;
        sgy += gi * yi;
    }
    let (sg, sgy, mt) = (lit::<T>(sg), lit::<T>(sgy), lit::<T>(m));
    let k = inv_std / mt;
    for &i in idx {
        dx[i] = dx[i] + k * (mt * g[i] - sg - y[i] * sgy);
    }
}

pub(crate) fn batch_norm_backward<T: Scalar>(
    sink: &mut GradSink<'_, T>,
    x: Var,
    out: &Tensor<T>,
    inv_std: &[T],
    g: &[T],
) {
    if !sink.wants(x) {
        return;
    }
    let [n, c, h, w] = out.dims4().expect("NCHW");
    let plane = h * w;
    let dx = sink.buf(x);
    for ch in 0..c {
        let idx: Vec<usize> = (0..n).flat_map(|s| (s * c + ch) * plane..(s * c + ch + 1) * plane).collect();
        normalize_grad(g, out.data(), &idx, inv_std[ch], dx);
    }
}

pub(crate) fn instance_norm_backward<T: Scalar>(
    sink: &mut GradSink<'_, T>,
    x: Var,
    out: &Tensor<T>,
    inv_std: &[T],
    g: &[T],
) {
    if !sink.wants(x) {
        return;
    }
    let [n, c, h, w] = out.dims4().expect("NCHW");
    let plane = h * w;
    let dx = sink.buf(x);
    for p in 0..n * c {
        let idx: Vec<usize> = (p * plane..(p + 1) * plane).collect();
        normalize_grad(g, out.data(), &idx, inv_std[p], dx);
    }
}

pub(crate) fn channel_affine_backward<T: Scalar>(sink: &mut GradSink<'_, T>, x: Var, scale: Var, shift: Var, g: &[T]) {
    let nodes = sink.nodes;
    let xv = &nodes[x.0].value;
    let [n, c, h, w] = xv.dims4().expect("NCHW");
    let plane = h * w;
    let (xd, sd) = (xv.data(), nodes[scale.0].value.data());
    sink.add_with(x, |i| g[i] * sd[(i / plane) % c]);
    let mut dscale = vec![0.0f64; c];
    let mut dshift = vec![0.0f64; c];
    for p in 0..n * c {
        let ch = p % c;
        for i in p * plane..(p + 1) * plane {
            let gi = g[i].to_f64().unwrap_or(0.0);
            dscale[ch] += gi * xd[i].to_f64().unwrap_or(0.0);
            dshift[ch] += gi;
        }
    }
    sink.add_with(scale, |ch| lit(dscale[ch]));
    sink.add_with(shift, |ch| lit(dshift[ch]));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, Init};

    fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::create(shape, Init::Uniform { seed, lo: -2.0, hi: 2.0 }).unwrap()
    }

    #[test]
    fn normalization_gradients() {
        let x = rand(&[2, 3, 3, 2], 1);
        let w = rand(&[2, 3, 3, 2], 2);
        for which in 0..2 {
            let chk = finite_diff_check(
                |t, v| {
                    let y = if which == 0 { t.batch_norm_train(v, 1e-5)?.0 } else { t.instance_norm(v, 1e-5)? };
                    let wv = t.constant(w.clone());
                    let m = t.mul(y, wv)?;
                    Ok(t.sum(m))
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(chk.max_rel_err < 1e-4, "which={which}: {chk:?}");
        }
    }

    #[test]
    fn affine_gradients() {
        let x = rand(&[2, 3, 2, 2], 3);
        let s = rand(&[3], 4);
        let b = rand(&[3], 5);
        let w = rand(&[2, 3, 2, 2], 6);
        for which in 0..3 {
            let target = [&x, &s, &b][which];
            let chk = finite_diff_check(
                |t, v| {
                    let mut ins = [t.constant(x.clone()), t.constant(s.clone()), t.constant(b.clone())];
                    ins[which] = v;
                    let y = t.channel_affine(ins[0], ins[1], ins[2])?;
                    let wv = t.constant(w.clone());
                    let m = t.mul(y, wv)?;
                    Ok(t.sum(m))
                },
                target,
                1e-5,
            )
            .unwrap();
            assert!(chk.max_rel_err < 1e-6, "which={which}: {chk:?}");
        }
    }

    #[test]
    fn degenerate_extents_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 1, 1]).unwrap());
        assert!(tape.batch_norm_train(x, 1e-5).is_err());
        assert!(tape.instance_norm(x, 1e-5).is_err());
    }
}
