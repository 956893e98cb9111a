//! Dense NCHW tensors and a define-by-run reverse-mode tape.
//!
//! Values live in [`Tensor`]; differentiable computations are recorded on a
//! [`Tape`] and referenced through copyable [`Var`] handles. The engine is
//! generic over the element type so the same kernels run in `f32` for
//! training and in `f64` when checked against finite differences.

mod buffers;
mod conv;
mod elementwise;
mod gradcheck;
mod linalg;
mod norm_ops;
mod pool;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use elementwise::{BinaryOp, UnaryOp};
pub use gradcheck::{finite_diff_check, finite_diff_check_at, relative_error, GradCheck, REL_ERR_FLOOR};
pub use tape::{Tape, Var};

/// Element type of a tensor.
pub trait Scalar: Float + FromPrimitive + Default + Debug + Display + Send + Sync + Sum + 'static {
    /// `c = alpha * a * b + beta * c` on strided matrices; `c` is row-major contiguous.
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );

    /// Replaces every element by its exponential.
    fn exp_in_place(xs: &mut [Self]);
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path, $exp:path) => {
        impl Scalar for $t {
            fn exp_in_place(xs: &mut [Self]) {
                $exp(xs)
            }

            fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(c.len() >= m * n, "gemm: output too small");
                if k > 0 {
                    assert!(span(m, k, rsa, csa) <= a.len(), "gemm: lhs out of bounds");
                    assert!(span(k, n, rsb, csb) <= b.len(), "gemm: rhs out of bounds");
                }
                // SAFETY: the strided extents of a, b and c were bounds-checked above
                // and all strides are non-negative.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    assert!(rs >= 0 && cs >= 0, "gemm: negative stride");
    (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
}

impl_scalar!(f32, matrixmultiply::sgemm, exp_f32_slice);
impl_scalar!(f64, matrixmultiply::dgemm, exp_f64_slice);

fn exp_f64_slice(xs: &mut [f64]) {
    xs.iter_mut().for_each(|v| *v = v.exp());
}

/// Branch-free `exp` for f32: range reduction by ln 2 and a degree-7 Taylor
/// polynomial, written so the loop vectorizes. Relative error is a few ulp;
/// inputs are clamped to the normal range, so no infinities or subnormals.
fn exp_f32_slice(xs: &mut [f32]) {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_145_75;
    const LN2_LO: f32 = 1.428_606_8e-6;
    const ROUND: f32 = 12_582_912.0; // 1.5 * 2^23
    for v in xs.iter_mut() {
        let x = v.clamp(-87.0, 88.0);
        let shifted = x * LOG2E + ROUND;
        let n = shifted - ROUND;
        let r = x - n * LN2_HI - n * LN2_LO;
        let p = 1.0
            + r * (1.0
                + r * (0.5
                    + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0 + r * (1.0 / 5040.0)))))));
        // The low mantissa bits of `shifted` hold n; move them into the exponent.
        let bits = shifted.to_bits().wrapping_sub(ROUND.to_bits()).wrapping_add(127) << 23;
        *v = p * f32::from_bits(bits);
    }
}

/// Sum with eight independent accumulators, so the loop vectorizes.
pub(crate) fn lane_sum<T: Scalar>(xs: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = xs.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a = *a + v;
        }
    }
    acc.iter().copied().chain(tail.iter().copied()).fold(T::zero(), |a, b| a + b)
}

/// Dot product with eight independent accumulators.
pub(crate) fn lane_dot<T: Scalar>(xs: &[T], ys: &[T]) -> T {
    debug_assert_eq!(xs.len(), ys.len());
    let mut acc = [T::zero(); 8];
    let (cx, cy) = (xs.chunks_exact(8), ys.chunks_exact(8));
    let tail: T = cx.remainder().iter().zip(cy.remainder()).map(|(&a, &b)| a * b).fold(T::zero(), |a, b| a + b);
    for (a8, b8) in cx.zip(cy) {
        for ((acc, &a), &b) in acc.iter_mut().zip(a8).zip(b8) {
            *acc = *acc + a * b;
        }
    }
    acc.iter().copied().fold(tail, |a, b| a + b)
}

/// Maximum with eight independent accumulators (NaN-oblivious).
pub(crate) fn lane_max<T: Scalar>(xs: &[T]) -> T {
    let mut acc = [T::neg_infinity(); 8];
    let chunks = xs.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a = if v > *a { v } else { *a };
        }
    }
    acc.iter().copied().chain(tail.iter().copied()).fold(T::neg_infinity(), |a, b| if b > a { b } else { a })
}

/// Converts an `f64` literal into the element type.
#[inline]
pub fn lit<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("finite literal")
}

/// Initializer accepted by [`Tensor::create`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init<T> {
    Zeros,
    Fill(T),
    Uniform { seed: u64, lo: f64, hi: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    /// Allocates a tensor; every extent must be at least one.
    pub fn create(shape: &[usize], init: Init<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidShape { shape: shape.to_vec(), reason: "all extents must be >= 1".into() });
        }
        let len: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![T::zero(); len],
            Init::Fill(v) => vec![v; len],
            Init::Uniform { seed, lo, hi } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..len).map(|_| lit(rng.random_range(lo..hi))).collect()
            }
        };
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::create(shape, Init::Zeros)
    }

    pub fn full(shape: &[usize], v: T) -> Result<Self> {
        Self::create(shape, Init::Fill(v))
    }

    /// Wraps existing data. Zero extents are allowed here (e.g. a tensor with
    /// no channels) as long as the element count matches.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if shape.is_empty() || len != data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("expected {len} elements, got {}", data.len()),
            });
        }
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    pub fn scalar(v: T) -> Self {
        Self::from_parts(vec![1], vec![v])
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data, requires_grad: false, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    /// `(N, C, H, W)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::InvalidShape { shape: self.shape.clone(), reason: "expected rank-4 NCHW tensor".into() }),
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Installs a gradient; its length must match the data.
    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::ShapeMismatch { op: "set_grad", left: self.shape.clone(), right: vec![grad.len()] });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-type conversion (drops gradient state).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.data.iter().map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan())).collect();
        Tensor::from_parts(self.shape.clone(), data).with_requires_grad(self.requires_grad)
    }

    /// Same data under a new shape with equal element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch { op: "reshape", left: self.shape, right: shape.to_vec() });
        }
        self.shape = shape.to_vec();
        self.grad = None;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn create_zeros_and_fill() {
        let z = Tensor::<f32>::create(&[2, 2], Init::Zeros).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
        let f = Tensor::<f32>::create(&[3], Init::Fill(1.5)).unwrap();
        assert_eq!(f.data(), &[1.5, 1.5, 1.5]);
    }

    #[test]
    fn uniform_is_deterministic() {
        let init = Init::Uniform { seed: 7, lo: -1.0, hi: 1.0 };
        let a = Tensor::<f32>::create(&[4], init).unwrap();
        let b = Tensor::<f32>::create(&[4], init).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (-1.0..1.0).contains(v)));
        let c = Tensor::<f32>::create(&[4], Init::Uniform { seed: 8, lo: -1.0, hi: 1.0 }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(matches!(Tensor::<f32>::zeros(&[2, 0]), Err(Error::InvalidShape { .. })));
        assert!(Tensor::<f32>::zeros(&[]).is_err());
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(&[2, 2], vec![1.0f32; 3]).is_err());
        let empty = Tensor::<f32>::from_vec(&[1, 0, 4, 4], vec![]).unwrap();
        assert_eq!(empty.numel(), 0);
    }

    #[test]
    fn grad_slot_shape_checked() {
        let mut t = Tensor::<f32>::zeros(&[2]).unwrap();
        assert!(t.set_grad(vec![1.0]).is_err());
        t.set_grad(vec![1.0, 2.0]).unwrap();
        assert_eq!(t.grad(), Some(&[1.0, 2.0][..]));
    }

    #[test]
    fn gemm_transposed_strides() {
        // a = [[1,2],[3,4]], b = a^T via strides
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let mut c = [0.0f64; 4];
        f64::gemm_raw(2, 2, 2, 1.0, &a, 2, 1, &a, 1, 2, 0.0, &mut c);
        assert_eq!(c, [5.0, 11.0, 11.0, 25.0]);
    }

    #[test]
    fn fast_exp_accuracy() {
        let xs: Vec<f32> = (-8700..=8800).map(|i| i as f32 * 0.01).collect();
        let mut ys = xs.clone();
        f32::exp_in_place(&mut ys);
        for (&x, &y) in xs.iter().zip(&ys) {
            let want = (x as f64).exp();
            assert!(((y as f64 - want) / want).abs() < 1e-6, "exp({x}) = {y}, want {want}");
        }
        let mut extreme = [-1000.0f32, 1000.0, f32::NEG_INFINITY];
        f32::exp_in_place(&mut extreme);
        assert!(extreme[0] > 0.0 && extreme[0] < 1e-37 && extreme[2] > 0.0);
        assert!(extreme[1].is_finite());
    }
}
