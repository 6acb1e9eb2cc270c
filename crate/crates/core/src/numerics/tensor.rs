use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Scalar element type of a [`Tensor`]. Implemented for `f32` (training and
/// inference) and `f64` (gradient checks).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a @ b + beta * c` over strided row/column views.
    ///
    /// # Safety
    /// Every index reachable through the given extents and strides must lie
    /// inside the corresponding allocation. [`gemm`] checks this before calling.
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

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts")
    }

    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// A strided 2-D view into a flat buffer: `offset + i * rs + j * cs`.
#[derive(Clone, Copy, Debug)]
pub struct View {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn row_major(offset: usize, cols: usize) -> Self {
        View {
            offset,
            rs: cols,
            cs: 1,
        }
    }

    /// Transposed view of a row-major `[_, cols]` block.
    pub fn transposed(offset: usize, cols: usize) -> Self {
        View {
            offset,
            rs: 1,
            cs: cols,
        }
    }

    fn last(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            self.offset
        } else {
            self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
        }
    }
}

/// Bounds-checked general matrix multiply over strided views.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    (m, k, n): (usize, usize, usize),
    alpha: T,
    a: &[T],
    av: View,
    b: &[T],
    bv: View,
    beta: T,
    c: &mut [T],
    cv: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = cv.offset + i * cv.rs + j * cv.cs;
                c[idx] = if beta == T::zero() {
                    T::zero()
                } else {
                    c[idx] * beta
                };
            }
        }
        return;
    }
    assert!(av.last(m, k) < a.len(), "gemm: lhs view out of bounds");
    assert!(bv.last(k, n) < b.len(), "gemm: rhs view out of bounds");
    assert!(cv.last(m, n) < c.len(), "gemm: output view out of bounds");
    // SAFETY: the three asserts above bound every reachable index.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} elements, data has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn scalar(x: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![x],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Row-major matrix from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[&[T]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Tensor {
            shape: vec![rows.len(), cols],
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading extent, treating the tensor as `[rows, rest]`.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Trailing extent.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn at2(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max)
    }
}

/// Allowed-entry mask for attention, `[rows, cols]` row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allowed.push(f(i, j));
            }
        }
        Mask {
            rows,
            cols,
            allowed,
        }
    }

    /// Block-diagonal mask over `blocks` consecutive groups of `size` tokens.
    pub fn block_diagonal(blocks: usize, size: usize) -> Self {
        let n = blocks * size;
        Mask::from_fn(n, n, |i, j| i / size == j / size)
    }

    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.cols..(i + 1) * self.cols]
    }

    pub fn count_row(&self, i: usize) -> usize {
        self.row(i).iter().filter(|&&a| a).count()
    }
}
