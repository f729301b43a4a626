//! Row-major tensors over f32/f64 and the small set of dense kernels
//! everything else is built from.
//!
//! f32 is the working precision for training and decoding; f64 exists so the
//! same model code can be instantiated for finite-difference gradient
//! verification. Matrix products go through `matrixmultiply`, optionally
//! row-chunked across threads. Chunking splits output rows only, so every
//! output element sees the same reduction order no matter how many threads
//! run: results are bit-identical for any thread count.

use std::fmt::{Debug, Display};
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{Error, Result};
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

/// Scalar type the numeric stack is generic over.
pub trait Real:
    Copy
    + PartialOrd
    + Debug
    + Display
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
{
    const DTYPE: DType;
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn maximum(self, other: Self) -> Self;

    /// C = alpha * A(m,k) * B(k,n) + beta * C with explicit strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_real {
    ($t:ty, $dtype:expr, $gemm:path) => {
        impl Real for $t {
            const DTYPE: DType = $dtype;
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn is_finite(self) -> bool {
                self.is_finite()
            }
            fn maximum(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }

            unsafe fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: *const Self,
                rsa: isize,
                csa: isize,
                b: *const Self,
                rsb: isize,
                csb: isize,
                beta: Self,
                c: *mut Self,
                rsc: isize,
                csc: isize,
            ) {
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

impl_real!(f32, DType::F32, matrixmultiply::sgemm);
impl_real!(f64, DType::F64, matrixmultiply::dgemm);

/// Dense row-major tensor with an optional gradient accumulator.
#[derive(Debug, Clone)]
pub struct Tensor<T: Real> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![T::ZERO; numel])
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![value; numel])
    }

    /// I.i.d. normal entries with the given standard deviation.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut StreamRng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| T::from_f64(rng.normal() * std))
            .collect();
        Tensor::new(shape, data)
    }

    /// I.i.d. uniform entries in [-bound, bound].
    pub fn rand_uniform(shape: Vec<usize>, bound: f64, rng: &mut StreamRng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| T::from_f64(rng.uniform(-bound, bound)))
            .collect();
        Tensor::new(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if on && self.grad.is_none() {
            self.grad = Some(vec![T::ZERO; self.data.len()]);
        }
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = T::ZERO);
        }
    }

    /// Adds `delta` into the gradient accumulator (allocating it if needed).
    pub fn accumulate_grad(&mut self, delta: &[T]) {
        assert_eq!(delta.len(), self.data.len(), "gradient length mismatch");
        let g = self
            .grad
            .get_or_insert_with(|| vec![T::ZERO; self.data.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += *di;
        }
    }

    /// 2D row view.
    pub fn row(&self, i: usize) -> &[T] {
        assert_eq!(self.shape.len(), 2, "row() on non-matrix");
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Converts element type, exactly representable for f32 -> f64.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::new(
            self.shape.clone(),
            self.data.iter().map(|x| U::from_f64(x.to_f64())).collect(),
        )
    }
}

/// Lowest-index argmax; ties break toward the smaller index so decoding is
/// deterministic.
pub fn argmax<T: Real>(xs: &[T]) -> usize {
    assert!(!xs.is_empty(), "argmax of empty slice");
    let mut best = 0;
    for (i, x) in xs.iter().enumerate().skip(1) {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Minimum m*k*n before gemm is split across threads.
const GEMM_PAR_FLOPS: usize = 1 << 21;

/// C(m,n) = A_log(m,k) @ B_log(k,n), optionally accumulating onto C.
///
/// `a_transposed` means the slice stores A_log transposed, i.e. a (k,m)
/// row-major array; likewise `b_transposed` means b is (n,k) row-major.
/// Thread-level chunking splits output rows only, so results are
/// bit-identical for any thread count.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_transposed: bool,
    b: &[T],
    b_transposed: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: A size");
    assert_eq!(b.len(), k * n, "gemm: B size");
    assert_eq!(c.len(), m * n, "gemm: C size");
    let beta = if accumulate { T::ONE } else { T::ZERO };
    let (rsa, csa) = if a_transposed {
        (1isize, m as isize)
    } else {
        (k as isize, 1isize)
    };
    let (rsb, csb) = if b_transposed {
        (1isize, k as isize)
    } else {
        (n as isize, 1isize)
    };
    let work = m * k * n;
    let threads = rayon::current_num_threads();
    if work >= GEMM_PAR_FLOPS && m >= 2 && threads > 1 && !a_transposed {
        let chunk_rows = m.div_ceil(threads.min(m));
        use rayon::prelude::*;
        a.par_chunks(chunk_rows * k)
            .zip(c.par_chunks_mut(chunk_rows * n))
            .for_each(|(ac, cc)| {
                let rows = cc.len() / n;
                unsafe {
                    T::gemm_raw(
                        rows,
                        k,
                        n,
                        T::ONE,
                        ac.as_ptr(),
                        k as isize,
                        1,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        cc.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            });
    } else {
        unsafe {
            T::gemm_raw(
                m,
                k,
                n,
                T::ONE,
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

/// In-place softmax of one row, stabilized by max subtraction. Entries where
/// `allowed` returns false get probability zero and are excluded from the max.
pub fn softmax_row_inplace<T: Real>(row: &mut [T], allowed: impl Fn(usize) -> bool) {
    let mut maxv: Option<T> = None;
    for (j, x) in row.iter().enumerate() {
        if allowed(j) {
            maxv = Some(match maxv {
                None => *x,
                Some(m) => m.maximum(*x),
            });
        }
    }
    let maxv = maxv.expect("softmax row with no allowed entries");
    let mut sum = T::ZERO;
    for (j, x) in row.iter_mut().enumerate() {
        if allowed(j) {
            *x = (*x - maxv).exp();
            sum += *x;
        } else {
            *x = T::ZERO;
        }
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Probability-normalizing softmax over a full vector. Rejects non-finite
/// input; stable for magnitudes up to at least 1e4 by max subtraction.
pub fn softmax<T: Real>(xs: &[T]) -> Result<Vec<T>> {
    if xs.is_empty() {
        return Err(Error::Shape {
            op: "softmax",
            detail: "empty input".into(),
        });
    }
    for (i, x) in xs.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::NonFinite {
                op: "softmax",
                detail: format!("input[{i}] = {x}"),
            });
        }
    }
    let mut out = xs.to_vec();
    softmax_row_inplace(&mut out, |_| true);
    Ok(out)
}

/// Natural log of each entry of a probability row, guarded against log(0).
pub fn log_probs_row<T: Real>(probs: &[T]) -> Vec<T> {
    let floor = T::from_f64(1e-45);
    probs.iter().map(|p| p.maximum(floor).ln()).collect()
}
