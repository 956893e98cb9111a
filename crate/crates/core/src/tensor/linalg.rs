//! Batched matrix products and row softmax, the building blocks of the
//! attention layers.

use super::buffers;
use super::tape::{GradSink, Op};
use super::{lane_dot, lane_max, lane_sum, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub(crate) struct BmmOp {
    pub(crate) a: Var,
    pub(crate) b: Var,
    ta: bool,
    tb: bool,
}

/// Strided row-major matrix view.
#[derive(Clone, Copy)]
struct View<'a, T> {
    data: &'a [T],
    rs: isize,
    cs: isize,
}

impl<'a, T> View<'a, T> {
    fn rows_major(data: &'a [T], cols: usize) -> Self {
        Self { data, rs: cols as isize, cs: 1 }
    }

    fn t(self) -> Self {
        Self { data: self.data, rs: self.cs, cs: self.rs }
    }

    fn maybe_t(self, flag: bool) -> Self {
        if flag {
            self.t()
        } else {
            self
        }
    }
}

fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: View<'_, T>, b: View<'_, T>, beta: T, c: &mut [T]) {
    T::gemm_raw(m, k, n, T::one(), a.data, a.rs, a.cs, b.data, b.rs, b.cs, beta, c);
}

fn dims3(shape: &[usize], op: &'static str) -> Result<[usize; 3]> {
    <[usize; 3]>::try_from(shape)
        .map_err(|_| Error::InvalidShape { shape: shape.to_vec(), reason: format!("{op} expects a rank-3 tensor") })
}

fn softmax_rows<T: Scalar>(data: &mut [T], len: usize) {
    for row in data.chunks_mut(len) {
        softmax_row(row);
    }
}

fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = lane_max(row);
    row.iter_mut().for_each(|v| *v = *v - max);
    T::exp_in_place(row);
    let total = lane_sum(row);
    let inv = T::one() / total;
    row.iter_mut().for_each(|v| *v = *v * inv);
}

/// dE = A ⊙ (dA − rowsum(dA ⊙ A)), row by row.
fn softmax_rows_grad<T: Scalar>(a: &[T], da: &[T], len: usize, out: &mut [T]) {
    for ((ar, gr), or) in a.chunks(len).zip(da.chunks(len)).zip(out.chunks_mut(len)) {
        let dot = lane_dot(ar, gr);
        for ((o, &p), &q) in or.iter_mut().zip(ar).zip(gr) {
            *o = p * (q - dot);
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Batched product `op(a) · op(b)` over rank-3 tensors, where `op`
    /// optionally transposes the trailing two axes.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let [ba, ra, ca] = dims3(self.shape(a), "bmm")?;
        let [bb, rb, cb] = dims3(self.shape(b), "bmm")?;
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if ba != bb || k != k2 {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); ba * m * n];
        for s in 0..ba {
            let av = View::rows_major(&ad[s * ra * ca..(s + 1) * ra * ca], ca).maybe_t(ta);
            let bv = View::rows_major(&bd[s * rb * cb..(s + 1) * rb * cb], cb).maybe_t(tb);
            gemm(m, k, n, av, bv, T::zero(), &mut out[s * m * n..(s + 1) * m * n]);
        }
        let value = Tensor::from_parts(vec![ba, m, n], out);
        Ok(self.push(value, Op::Bmm(BmmOp { a, b, ta, tb })))
    }

    /// Row-softmax of `queryᵀ · key` for `query`, `key` of shape N×c×P,
    /// giving an N×P×P affinity whose rows sum to one. Only the normalized
    /// affinity is stored.
    pub fn affinity_softmax(&mut self, query: Var, key: Var) -> Result<Var> {
        let [nq, cq, pq] = dims3(self.shape(query), "affinity_softmax")?;
        let [nk, ck, pk] = dims3(self.shape(key), "affinity_softmax")?;
        if (nq, cq, pq) != (nk, ck, pk) {
            return Err(Error::ShapeMismatch {
                op: "affinity_softmax",
                left: self.shape(query).to_vec(),
                right: self.shape(key).to_vec(),
            });
        }
        let (n, c, p) = (nq, cq, pq);
        let (qd, kd) = (self.value(query).data(), self.value(key).data());
        let mut out = buffers::zeroed(n * p * p);
        // One row at a time: the c-term dot products, then the softmax, so
        // the P×P energies are written once and never re-read.
        for s in 0..n {
            let (qs, ks) = (&qd[s * c * p..(s + 1) * c * p], &kd[s * c * p..(s + 1) * c * p]);
            for (i, row) in out[s * p * p..(s + 1) * p * p].chunks_mut(p).enumerate() {
                for ch in 0..c {
                    let qi = qs[ch * p + i];
                    for (e, &kj) in row.iter_mut().zip(&ks[ch * p..(ch + 1) * p]) {
                        *e = *e + qi * kj;
                    }
                }
                softmax_row(row);
            }
        }
        let value = Tensor::from_parts(vec![n, p, p], out);
        Ok(self.push(value, Op::AffinitySoftmax { query, key }))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let len = *shape.last().expect("tensors have rank >= 1");
        let mut data = self.value(x).data().to_vec();
        if len > 0 {
            softmax_rows(&mut data, len);
        }
        Ok(self.push(Tensor::from_parts(shape, data), Op::SoftmaxLast(x)))
    }
}

pub(crate) fn bmm_backward<T: Scalar>(sink: &mut GradSink<'_, T>, op: &BmmOp, g: &[T]) {
    let nodes = sink.nodes;
    let av = &nodes[op.a.0].value;
    let bv = &nodes[op.b.0].value;
    let [batch, ra, ca] = dims3(av.shape(), "bmm").expect("validated");
    let [_, rb, cb] = dims3(bv.shape(), "bmm").expect("validated");
    let (m, k) = if op.ta { (ca, ra) } else { (ra, ca) };
    let n = if op.tb { rb } else { cb };
    let (ad, bd) = (av.data(), bv.data());
    if sink.wants(op.a) {
        let da = sink.buf(op.a);
        for s in 0..batch {
            let gs = View::rows_major(&g[s * m * n..(s + 1) * m * n], n);
            let bs = View::rows_major(&bd[s * rb * cb..(s + 1) * rb * cb], cb).maybe_t(op.tb);
            let das = &mut da[s * ra * ca..(s + 1) * ra * ca];
            if op.ta {
                // dA (k x m) = op(B) (k x n) · dCᵀ (n x m)
                gemm(k, n, m, bs, gs.t(), T::one(), das);
            } else {
                // dA (m x k) = dC (m x n) · op(B)ᵀ (n x k)
                gemm(m, n, k, gs, bs.t(), T::one(), das);
            }
        }
    }
    if sink.wants(op.b) {
        let db = sink.buf(op.b);
        for s in 0..batch {
            let gs = View::rows_major(&g[s * m * n..(s + 1) * m * n], n);
            let as_ = View::rows_major(&ad[s * ra * ca..(s + 1) * ra * ca], ca).maybe_t(op.ta);
            let dbs = &mut db[s * rb * cb..(s + 1) * rb * cb];
            if op.tb {
                // dB (n x k) = dCᵀ (n x m) · op(A) (m x k)
                gemm(n, m, k, gs.t(), as_, T::one(), dbs);
            } else {
                // dB (k x n) = op(A)ᵀ (k x m) · dC (m x n)
                gemm(k, m, n, as_.t(), gs, T::one(), dbs);
            }
        }
    }
}

pub(crate) fn affinity_backward<T: Scalar>(sink: &mut GradSink<'_, T>, query: Var, key: Var, out: &Tensor<T>, g: &[T]) {
    let nodes = sink.nodes;
    let [n, c, p] = dims3(nodes[query.0].value.shape(), "affinity_softmax").expect("validated");
    let (qd, kd) = (nodes[query.0].value.data(), nodes[key.0].value.data());
    let ad = out.data();
    let (want_q, want_k) = (sink.wants(query), sink.wants(key));
    let mut dq = vec![T::zero(); if want_q { n * c * p } else { 0 }];
    let mut dk = vec![T::zero(); if want_k { n * c * p } else { 0 }];
    let mut de = vec![T::zero(); p];
    for s in 0..n {
        let (qs, ks) = (&qd[s * c * p..(s + 1) * c * p], &kd[s * c * p..(s + 1) * c * p]);
        let rows = ad[s * p * p..(s + 1) * p * p].chunks(p).zip(g[s * p * p..(s + 1) * p * p].chunks(p));
        for (i, (ar, gr)) in rows.enumerate() {
            softmax_rows_grad(ar, gr, p, &mut de);
            for ch in 0..c {
                let kc = &ks[ch * p..(ch + 1) * p];
                if want_q {
                    // E = qᵀ k  =>  dq[c, i] = Σ_j dE[i, j] k[c, j]
                    dq[(s * c + ch) * p + i] = lane_dot(&de, kc);
                }
                if want_k {
                    // dk[c, j] += q[c, i] dE[i, j]
                    let qi = qs[ch * p + i];
                    let dkc = &mut dk[(s * c + ch) * p..(s * c + ch + 1) * p];
                    for (d, &e) in dkc.iter_mut().zip(&de) {
                        *d = *d + qi * e;
                    }
                }
            }
        }
    }
    if want_q {
        sink.add_with(query, |i| dq[i]);
    }
    if want_k {
        sink.add_with(key, |i| dk[i]);
    }
}

pub(crate) fn softmax_last_backward<T: Scalar>(sink: &mut GradSink<'_, T>, x: Var, out: &Tensor<T>, g: &[T]) {
    if !sink.wants(x) {
        return;
    }
    let len = *out.shape().last().expect("rank >= 1");
    let mut dx = vec![T::zero(); g.len()];
    if len > 0 {
        softmax_rows_grad(out.data(), g, len, &mut dx);
    }
    sink.add_with(x, |i| dx[i]);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, Init};

    fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::create(shape, Init::Uniform { seed, lo: -1.0, hi: 1.0 }).unwrap()
    }

    fn naive(a: &Tensor<f64>, b: &Tensor<f64>, ta: bool, tb: bool) -> Vec<f64> {
        let [bs, ra, ca] = dims3(a.shape(), "").unwrap();
        let [_, rb, cb] = dims3(b.shape(), "").unwrap();
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let n = if tb { rb } else { cb };
        let at = |s: usize, i: usize, j: usize| {
            if ta {
                a.data()[s * ra * ca + j * ca + i]
            } else {
                a.data()[s * ra * ca + i * ca + j]
            }
        };
        let bt = |s: usize, i: usize, j: usize| {
            if tb {
                b.data()[s * rb * cb + j * cb + i]
            } else {
                b.data()[s * rb * cb + i * cb + j]
            }
        };
        let mut out = vec![0.0; bs * m * n];
        for s in 0..bs {
            for i in 0..m {
                for j in 0..n {
                    out[(s * m + i) * n + j] = (0..k).map(|l| at(s, i, l) * bt(s, l, j)).sum();
                }
            }
        }
        out
    }

    #[test]
    fn bmm_all_transpositions() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = if ta { rand(&[2, 4, 3], 1) } else { rand(&[2, 3, 4], 1) };
            let b = if tb { rand(&[2, 5, 4], 2) } else { rand(&[2, 4, 5], 2) };
            let mut tape = Tape::<f64>::new();
            let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
            let c = tape.bmm(va, vb, ta, tb).unwrap();
            assert_eq!(tape.shape(c), &[2, 3, 5]);
            let r = naive(&a, &b, ta, tb);
            for (x, y) in tape.value(c).data().iter().zip(&r) {
                assert!((x - y).abs() < 1e-12);
            }
            let w = rand(&[2, 3, 5], 3);
            for which in 0..2 {
                let chk = finite_diff_check(
                    |t, v| {
                        let (x, y) = if which == 0 { (v, t.constant(b.clone())) } else { (t.constant(a.clone()), v) };
                        let c = t.bmm(x, y, ta, tb)?;
                        let wv = t.constant(w.clone());
                        let m = t.mul(c, wv)?;
                        Ok(t.sum(m))
                    },
                    if which == 0 { &a } else { &b },
                    1e-5,
                )
                .unwrap();
                assert!(chk.max_rel_err < 1e-6, "ta={ta} tb={tb} which={which}: {chk:?}");
            }
        }
    }

    #[test]
    fn affinity_rows_sum_to_one_and_gradients() {
        let q = rand(&[2, 2, 6], 5);
        let k = rand(&[2, 2, 6], 6);
        let mut tape = Tape::<f64>::new();
        let (vq, vk) = (tape.constant(q.clone()), tape.constant(k.clone()));
        let a = tape.affinity_softmax(vq, vk).unwrap();
        for row in tape.value(a).data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let w = rand(&[2, 6, 6], 7);
        for which in 0..2 {
            let chk = finite_diff_check(
                |t, v| {
                    let (x, y) = if which == 0 { (v, t.constant(k.clone())) } else { (t.constant(q.clone()), v) };
                    let a = t.affinity_softmax(x, y)?;
                    let wv = t.constant(w.clone());
                    let m = t.mul(a, wv)?;
                    Ok(t.sum(m))
                },
                if which == 0 { &q } else { &k },
                1e-5,
            )
            .unwrap();
            assert!(chk.max_rel_err < 1e-5, "{chk:?}");
        }
    }

    #[test]
    fn softmax_last_gradient() {
        let x = rand(&[3, 4], 8);
        let w = rand(&[3, 4], 9);
        let chk = finite_diff_check(
            |t, v| {
                let s = t.softmax_last(v)?;
                let wv = t.constant(w.clone());
                let m = t.mul(s, wv)?;
                Ok(t.sum(m))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(chk.max_rel_err < 1e-5, "{chk:?}");
    }
}
