//! Dense NHWC tensors and a reverse-mode tape over them.
//!
//! Everything numeric in the crate flows through [`Tensor`]: a rank-4
//! `(batch, height, width, channels)` buffer in row-major order. Training
//! runs on `f32`; gradient checks replay the same graph in `f64`.

mod gradcheck;
mod ops;
mod tape;

pub use gradcheck::{grad_check, DEFAULT_FD_EPS};
pub use tape::{Tape, Var};

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar type a tape can run in.
pub trait Real: Float + Debug + Default + Sum + Send + Sync + 'static {
    /// `c[m×n] += a[m×k] · b[k×n]` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm_acc(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn lit(x: f64) -> Self;

    fn as_f64(self) -> f64;
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm_acc(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || k == 0 || n == 0 {
                    return;
                }
                let last = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    ((rows as isize - 1) * rs + (cols as isize - 1) * cs) as usize
                };
                assert!(last(m, k, rsa, csa) < a.len());
                assert!(last(k, n, rsb, csb) < b.len());
                assert!(last(m, n, rsc, csc) < c.len());
                // SAFETY: the asserts above bound every strided access.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        1.0,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }

            fn lit(x: f64) -> Self {
                x as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Extent of a rank-4 NHWC tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape { n: 1, h: 1, w: 1, c: 1 };

    pub const fn new(n: usize, h: usize, w: usize, c: usize) -> Self {
        Shape { n, h, w, c }
    }

    pub fn numel(&self) -> usize {
        self.n * self.h * self.w * self.c
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.h, self.w, self.c]
    }

    pub fn from_dims(d: [usize; 4]) -> Self {
        Shape::new(d[0], d[1], d[2], d[3])
    }

    pub fn is_scalar(&self) -> bool {
        *self == Shape::SCALAR
    }

    /// Pixels per sample.
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub(crate) fn strides(&self) -> [usize; 4] {
        [self.h * self.w * self.c, self.w * self.c, self.c, 1]
    }

    pub fn index(&self, n: usize, h: usize, w: usize, c: usize) -> usize {
        ((n * self.h + h) * self.w + w) * self.c + c
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.h, self.w, self.c)
    }
}

pub(crate) const AXIS_NAMES: [&str; 4] = ["batch", "height", "width", "channels"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.dims().iter().any(|&d| d == 0) {
            return Err(Error::contract(format!("tensor shape {shape} has an empty axis")));
        }
        if data.len() != shape.numel() {
            return Err(Error::contract(format!(
                "buffer of length {} does not fill shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: Shape, value: T) -> Self {
        assert!(shape.numel() > 0, "tensor shape {shape} has an empty axis");
        Tensor { shape, data: vec![value; shape.numel()] }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::SCALAR, value)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for h in 0..shape.h {
                for w in 0..shape.w {
                    for c in 0..shape.c {
                        data.push(f(n, h, w, c));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    pub fn at(&self, n: usize, h: usize, w: usize, c: usize) -> T {
        self.data[self.shape.index(n, h, w, c)]
    }

    pub fn set(&mut self, n: usize, h: usize, w: usize, c: usize, v: T) {
        let i = self.shape.index(n, h, w, c);
        self.data[i] = v;
    }

    /// Value of a `(1,1,1,1)` tensor.
    pub fn item(&self) -> T {
        debug_assert!(self.shape.is_scalar());
        self.data[0]
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        Tensor { shape: self.shape, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape, data: self.data.iter().map(|x| U::lit(x.as_f64())).collect() }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Single sample `i` as a batch of one.
    pub fn sample(&self, i: usize) -> Self {
        let per = self.shape.numel() / self.shape.n;
        Tensor {
            shape: Shape { n: 1, ..self.shape },
            data: self.data[i * per..(i + 1) * per].to_vec(),
        }
    }

    /// Stacks equally shaped tensors along the batch axis.
    pub fn stack(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::contract("stack of zero tensors"))?;
        let mut shape = first.shape;
        let mut data = Vec::with_capacity(first.data.len() * parts.len());
        for p in parts {
            for (axis, (a, b)) in [(1, (p.shape.h, shape.h)), (2, (p.shape.w, shape.w)), (3, (p.shape.c, shape.c))] {
                if a != b {
                    return Err(Error::Dim { op: "stack", axis: AXIS_NAMES[axis], expected: b, got: a });
                }
            }
            data.extend_from_slice(&p.data);
        }
        shape.n = parts.iter().map(|p| p.shape.n).sum();
        Ok(Tensor { shape, data })
    }

    /// Reorders the batch axis: output sample `i` is input sample `order[i]`.
    pub fn select_batch(&self, order: &[usize]) -> Self {
        let per = self.shape.numel() / self.shape.n;
        let mut data = Vec::with_capacity(per * order.len());
        for &i in order {
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        Tensor { shape: Shape { n: order.len(), ..self.shape }, data }
    }
}

pub(crate) fn check_axis(op: &'static str, axis: usize, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dim { op, axis: AXIS_NAMES[axis], expected, got });
    }
    Ok(())
}
