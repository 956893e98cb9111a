//! Pointwise operations, reductions and shape plumbing.

use super::tape::{GradSink, Op};
use super::{lit, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Divisors smaller than this in magnitude are a domain error.
const DIV_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    Sigmoid,
    Log,
    Square,
    Negate,
}

fn sum_f64<T: Scalar>(xs: &[T]) -> T {
    let s: f64 = xs.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum();
    lit(s)
}

/// Clamp that keeps NaN.
fn pin<T: Scalar>(e: T, lo: T, hi: T) -> T {
    if e < lo {
        lo
    } else if e > hi {
        hi
    } else {
        e
    }
}

impl<T: Scalar> Tape<T> {
    pub fn elementwise_binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch { op: "elementwise_binary", left: sa.to_vec(), right: sb.to_vec() });
        }
        let (x, y) = (self.value(a).data(), self.value(b).data());
        if op == BinaryOp::Div {
            let floor = lit::<T>(DIV_FLOOR);
            let bad: Vec<usize> = (0..y.len()).filter(|&i| y[i].abs() < floor).collect();
            if let Some(&first) = bad.first() {
                return Err(Error::Domain { op: "div", count: bad.len(), first });
            }
        }
        let f: fn(T, T) -> T = match op {
            BinaryOp::Add => |p, q| p + q,
            BinaryOp::Sub => |p, q| p - q,
            BinaryOp::Mul => |p, q| p * q,
            BinaryOp::Div => |p, q| p / q,
        };
        let data = x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::from_parts(sa.to_vec(), data);
        let rec = match op {
            BinaryOp::Add => Op::Add(a, b),
            BinaryOp::Sub => Op::Sub(a, b),
            BinaryOp::Mul => Op::Mul(a, b),
            BinaryOp::Div => Op::Div(a, b),
        };
        Ok(self.push(value, rec))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_binary(BinaryOp::Div, a, b)
    }

    pub fn elementwise_unary(&mut self, op: UnaryOp, x: Var) -> Result<Var> {
        Ok(match op {
            UnaryOp::Relu => self.relu(x),
            UnaryOp::Sigmoid => self.sigmoid(x),
            UnaryOp::Log => self.log(x)?,
            UnaryOp::Square => self.square(x),
            UnaryOp::Negate => self.neg(x),
        })
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| f(e)).collect();
        let value = Tensor::from_parts(v.shape().to_vec(), data);
        self.push(value, op)
    }

    /// Comparisons (not `max`/`min`) so NaN passes through.
    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |e| if e < T::zero() { T::zero() } else { e }, Op::Relu(x))
    }

    /// Logistic sigmoid. Saturated outputs are pinned to the nearest
    /// representable values inside (0, 1).
    pub fn sigmoid(&mut self, x: Var) -> Var {
        let hi = T::one() - T::epsilon() / lit(2.0);
        let lo = T::min_positive_value();
        self.map(
            x,
            move |e| {
                let s = if e >= T::zero() {
                    T::one() / (T::one() + (-e).exp())
                } else {
                    let z = e.exp();
                    z / (T::one() + z)
                };
                pin(s, lo, hi)
            },
            Op::Sigmoid(x),
        )
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data();
        let bad: Vec<usize> = (0..data.len()).filter(|&i| !(data[i] > T::zero())).collect();
        if let Some(&first) = bad.first() {
            return Err(Error::Domain { op: "log", count: bad.len(), first });
        }
        Ok(self.map(x, |e| e.ln(), Op::Log(x)))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, |e| e * e, Op::Square(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.map(x, |e| -e, Op::Neg(x))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.map(x, |e| e * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.map(x, |e| e + c, Op::AddScalar(x))
    }

    /// `x^e` for non-negative `x`. The derivative at exactly zero is taken as zero.
    pub fn powf(&mut self, x: Var, e: T) -> Result<Var> {
        let data = self.value(x).data();
        let bad: Vec<usize> = (0..data.len()).filter(|&i| !(data[i] >= T::zero())).collect();
        if let Some(&first) = bad.first() {
            return Err(Error::Domain { op: "powf", count: bad.len(), first });
        }
        Ok(self.map(x, |v| v.powf(e), Op::Powf(x, e)))
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.map(x, move |e| pin(e, lo, hi), Op::Clamp(x, lo, hi))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = sum_f64(self.value(x).data());
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x).data();
        let n = lit::<T>(v.len().max(1) as f64);
        let s = sum_f64(v) / n;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Multiplies every element by the single value held in `gate`.
    pub fn scale_by(&mut self, x: Var, gate: Var) -> Result<Var> {
        if self.value(gate).numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "scale_by",
                left: self.shape(x).to_vec(),
                right: self.shape(gate).to_vec(),
            });
        }
        let g = self.value(gate).item();
        Ok(self.map(x, |e| e * g, Op::ScaleBy(x, gate)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if shape.iter().product::<usize>() != v.numel() {
            return Err(Error::ShapeMismatch { op: "reshape", left: v.shape().to_vec(), right: shape.to_vec() });
        }
        let value = Tensor::from_parts(shape.to_vec(), v.data().to_vec());
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Channel-wise concatenation of two NCHW tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [na, ca, ha, wa] = self.value(a).dims4()?;
        let [nb, cb, hb, wb] = self.value(b).dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let plane = ha * wa;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(na * (ca + cb) * plane);
        for n in 0..na {
            data.extend_from_slice(&da[n * ca * plane..(n + 1) * ca * plane]);
            data.extend_from_slice(&db[n * cb * plane..(n + 1) * cb * plane]);
        }
        let value = Tensor::from_parts(vec![na, ca + cb, ha, wa], data);
        Ok(self.push(value, Op::Concat(a, b)))
    }
}

pub(crate) fn backward<T: Scalar>(sink: &mut GradSink<'_, T>, op: &Op<T>, out: &Tensor<T>, g: &[T]) {
    let nodes = sink.nodes;
    let val = |v: Var| nodes[v.0].value.data();
    match *op {
        Op::Add(a, b) => {
            sink.add_with(a, |i| g[i]);
            sink.add_with(b, |i| g[i]);
        }
        Op::Sub(a, b) => {
            sink.add_with(a, |i| g[i]);
            sink.add_with(b, |i| -g[i]);
        }
        Op::Mul(a, b) => {
            let (x, y) = (val(a), val(b));
            sink.add_with(a, |i| g[i] * y[i]);
            sink.add_with(b, |i| g[i] * x[i]);
        }
        Op::Div(a, b) => {
            let (x, y) = (val(a), val(b));
            sink.add_with(a, |i| g[i] / y[i]);
            sink.add_with(b, |i| -g[i] * x[i] / (y[i] * y[i]));
        }
        Op::Relu(x) => {
            let xv = val(x);
            sink.add_with(x, |i| if xv[i] > T::zero() { g[i] } else { T::zero() });
        }
        Op::Sigmoid(x) => {
            let s = out.data();
            sink.add_with(x, |i| g[i] * s[i] * (T::one() - s[i]));
        }
        Op::Log(x) => {
            let xv = val(x);
            sink.add_with(x, |i| g[i] / xv[i]);
        }
        Op::Square(x) => {
            let xv = val(x);
            let two = lit::<T>(2.0);
            sink.add_with(x, |i| two * xv[i] * g[i]);
        }
        Op::Neg(x) => sink.add_with(x, |i| -g[i]),
        Op::Scale(x, c) => sink.add_with(x, |i| g[i] * c),
        Op::AddScalar(x) | Op::Reshape(x) => sink.add_with(x, |i| g[i]),
        Op::Powf(x, e) => {
            let xv = val(x);
            sink.add_with(x, |i| if xv[i] > T::zero() { g[i] * e * xv[i].powf(e - T::one()) } else { T::zero() });
        }
        Op::Clamp(x, lo, hi) => {
            let xv = val(x);
            sink.add_with(x, |i| if xv[i] >= lo && xv[i] <= hi { g[i] } else { T::zero() });
        }
        Op::Sum(x) => sink.add_with(x, |_| g[0]),
        Op::Mean(x) => {
            let n = lit::<T>(val(x).len().max(1) as f64);
            sink.add_with(x, |_| g[0] / n);
        }
        Op::ScaleBy(x, gate) => {
            let (xv, gv) = (val(x), val(gate)[0]);
            sink.add_with(x, |i| g[i] * gv);
            if sink.wants(gate) {
                let dot = sum_f64(&xv.iter().zip(g).map(|(&a, &b)| a * b).collect::<Vec<_>>());
                let buf = sink.buf(gate);
                buf[0] = buf[0] + dot;
            }
        }
        Op::Concat(a, b) => {
            let [_, c, h, w] = out.dims4().expect("concat output is NCHW");
            let ca = nodes[a.0].value.shape()[1];
            let cb = c - ca;
            let plane = h * w;
            sink.add_with(a, |i| {
                let (s, r) = (i / (ca * plane), i % (ca * plane));
                g[s * c * plane + r]
            });
            sink.add_with(b, |i| {
                let (s, r) = (i / (cb * plane), i % (cb * plane));
                g[s * c * plane + ca * plane + r]
            });
        }
        _ => unreachable!("not an elementwise op"),
    }
}
