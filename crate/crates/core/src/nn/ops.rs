//! Dense kernels shared by the forward and backward passes. All matrices are
//! row-major slices; strided views are expressed through explicit strides.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

/// Scalar type the transformer runs in: `f32` for training and sampling,
/// `f64` for gradient checking.
pub trait Real: Float + Default + Debug + Send + Sync + Sum + 'static {
    const NAME: &'static str;

    fn lit(x: f64) -> Self;

    /// `C = alpha * A B + beta * C` over raw strided storage.
    ///
    /// # Safety
    /// Every index reachable through the dimensions and strides must lie
    /// inside the corresponding allocation.
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

impl Real for f32 {
    const NAME: &'static str = "f32";

    fn lit(x: f64) -> Self {
        x as f32
    }

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
    const NAME: &'static str = "f64";

    fn lit(x: f64) -> Self {
        x
    }

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

/// A strided matrix view: element `(r, c)` lives at `offset + r * rs + c * cs`.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> Mat<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// Column block `[col0, col0 + cols)` of a row-major matrix with `stride` columns.
    pub fn cols_of(data: &'a [T], rows: usize, stride: usize, col0: usize, cols: usize) -> Self {
        Self {
            data,
            offset: col0,
            rows,
            cols,
            rs: stride,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            self.offset
        } else {
            self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
        }
    }
}

pub(crate) struct MatMut<'a, T> {
    pub data: &'a mut [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatMut<'a, T> {
    pub fn new(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn cols_of(data: &'a mut [T], rows: usize, stride: usize, col0: usize, cols: usize) -> Self {
        Self {
            data,
            offset: col0,
            rows,
            cols,
            rs: stride,
            cs: 1,
        }
    }
}

/// `C = A B` when `accumulate` is false, `C += A B` otherwise.
pub(crate) fn gemm<T: Real>(a: Mat<'_, T>, b: Mat<'_, T>, c: MatMut<'_, T>, accumulate: bool) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!(a.rows, c.rows, "row counts differ");
    assert_eq!(b.cols, c.cols, "column counts differ");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    if a.cols == 0 {
        if !accumulate {
            for r in 0..c.rows {
                for col in 0..c.cols {
                    c.data[c.offset + r * c.rs + col * c.cs] = T::zero();
                }
            }
        }
        return;
    }
    assert!(a.last_index() < a.data.len());
    assert!(b.last_index() < b.data.len());
    let c_last = c.offset + (c.rows - 1) * c.rs + (c.cols - 1) * c.cs;
    assert!(c_last < c.data.len());
    // SAFETY: the asserts above bound every reachable index of a, b and c.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            T::one(),
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// `out[r, :] = x[r, :] W + bias` for a row-major `rows x inp` input.
pub(crate) fn linear<T: Real>(x: &[T], rows: usize, inp: usize, w: &[T], bias: &[T], out: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(rows * out);
    for _ in 0..rows {
        y.extend_from_slice(bias);
    }
    gemm(
        Mat::new(x, rows, inp),
        Mat::new(w, inp, out),
        MatMut::new(&mut y, rows, out),
        true,
    );
    y
}

/// Backward of [`linear`]: accumulates `dW += x^T dy`, `db += colsum(dy)` and
/// returns `dx = dy W^T`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward<T: Real>(
    x: &[T],
    rows: usize,
    inp: usize,
    w: &[T],
    dy: &[T],
    out: usize,
    dw: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    gemm(
        Mat::new(x, rows, inp).t(),
        Mat::new(dy, rows, out),
        MatMut::new(dw, inp, out),
        true,
    );
    for row in dy.chunks(out) {
        for (b, &g) in db.iter_mut().zip(row) {
            *b = *b + g;
        }
    }
    let mut dx = vec![T::zero(); rows * inp];
    gemm(
        Mat::new(dy, rows, out),
        Mat::new(w, inp, out).t(),
        MatMut::new(&mut dx, rows, inp),
        false,
    );
    dx
}

pub(crate) const LN_EPS: f64 = 1e-6;

/// Affine-free layer norm over rows of width `d`; returns `(xhat, rstd)`.
pub(crate) fn layer_norm<T: Real>(x: &[T], d: usize) -> (Vec<T>, Vec<T>) {
    let eps = T::lit(LN_EPS);
    let inv_d = T::lit(1.0 / d as f64);
    let mut xhat = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(x.len() / d);
    for row in x.chunks(d) {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let r = (var + eps).sqrt().recip();
        rstd.push(r);
        xhat.extend(row.iter().map(|&v| (v - mean) * r));
    }
    (xhat, rstd)
}

pub(crate) fn layer_norm_backward<T: Real>(dxhat: &[T], xhat: &[T], rstd: &[T], d: usize) -> Vec<T> {
    let inv_d = T::lit(1.0 / d as f64);
    let mut dx = Vec::with_capacity(dxhat.len());
    for ((g, xh), &r) in dxhat.chunks(d).zip(xhat.chunks(d)).zip(rstd) {
        let mean_g = g.iter().copied().sum::<T>() * inv_d;
        let mean_gx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
        dx.extend(g.iter().zip(xh).map(|(&gi, &xi)| r * (gi - mean_g - xi * mean_gx)));
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<T: Real>(u: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * u * (T::one() + (c * (u + a * u * u * u)).tanh())
}

pub(crate) fn gelu_grad<T: Real>(u: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = (c * (u + a * u * u * u)).tanh();
    half * (T::one() + t) + half * u * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * u * u)
}

pub(crate) fn silu<T: Real>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

pub(crate) fn silu_grad<T: Real>(x: T) -> T {
    let s = (T::one() + (-x).exp()).recip();
    s * (T::one() + x * (T::one() - s))
}

/// In-place row softmax over rows of width `w`.
pub(crate) fn softmax_rows<T: Real>(x: &mut [T], w: usize) {
    for row in x.chunks_mut(w) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        let inv = sum.recip();
        row.iter_mut().for_each(|v| *v = *v * inv);
    }
}
