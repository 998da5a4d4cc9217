//! Dense tensors, matrices and the primitive kernels the layers are built on.
//!
//! Everything is row-major. A [`Tensor`] is always four-dimensional in
//! `(batch, channel, height, width)` order; a [`Matrix`] is a plain 2-D
//! row-major array.

use std::fmt::{self, Debug};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{arg_err, shape_err, Result};

/// Floating point element type. Implemented for `f32` (inference and
/// training) and `f64` (gradient checks).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + DivAssign
    + SubAssign
    + MulAssign
    + 'static
{
    /// `c = alpha * a * b + beta * c` on raw strided storage.
    ///
    /// # Safety
    /// Every index reachable through the given dimensions and strides must
    /// be in bounds for the corresponding pointer.
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

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits")
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// A borrowed row-major matrix, optionally transposed.
#[derive(Clone, Copy)]
pub struct MatRef<'a, F> {
    pub data: &'a [F],
    pub rows: usize,
    pub cols: usize,
    transposed: bool,
}

impl<'a, F> MatRef<'a, F> {
    pub fn new(data: &'a [F], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        MatRef {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    /// The transpose, without copying.
    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            transposed: !self.transposed,
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = a * b + beta * out`, `out` being a row-major `a.rows x b.cols` buffer.
pub fn gemm<F: Real>(a: MatRef<'_, F>, b: MatRef<'_, F>, beta: F, out: &mut [F]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    assert_eq!(a.data.len(), a.rows * a.cols);
    assert_eq!(b.data.len(), b.rows * b.cols);
    assert_eq!(out.len(), a.rows * b.cols, "gemm output size");
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: all three buffers were checked against their logical
    // dimensions above, and the strides describe exactly those dimensions.
    unsafe {
        F::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            F::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            b.cols as isize,
            1,
        )
    }
}

/// Tensor dimensions in `(n, c, h, w)` order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    /// Number of elements, or `None` if it overflows `usize`.
    pub fn checked_len(&self) -> Option<usize> {
        self.n
            .checked_mul(self.c)?
            .checked_mul(self.h)?
            .checked_mul(self.w)
    }

    pub fn len(&self) -> usize {
        self.checked_len().expect("shape overflows usize")
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements per batch item.
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn with_n(self, n: usize) -> Self {
        Shape { n, ..self }
    }

    pub fn with_c(self, c: usize) -> Self {
        Shape { c, ..self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense 4-axis array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F = f32> {
    shape: Shape,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![F::zero(); shape.len()],
        }
    }

    pub fn full(shape: Shape, value: F) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<F>) -> Result<Self> {
        match shape.checked_len() {
            Some(len) if len == data.len() => Ok(Tensor { shape, data }),
            _ => shape_err(format!(
                "{} values cannot fill a {} tensor",
                data.len(),
                shape
            )),
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<F> {
        self.data
    }

    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let s = self.shape;
        debug_assert!(n < s.n && c < s.c && h < s.h && w < s.w);
        ((n * s.c + c) * s.h + h) * s.w + w
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> F {
        self.data[self.index(n, c, h, w)]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: F) {
        let i = self.index(n, c, h, w);
        self.data[i] = v;
    }

    /// Data of one batch item.
    pub fn sample(&self, n: usize) -> &[F] {
        let len = self.shape.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [F] {
        let len = self.shape.sample_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Copy of batch item `n` as a batch of one.
    pub fn slice_batch(&self, n: usize) -> Self {
        Tensor {
            shape: self.shape.with_n(1),
            data: self.sample(n).to_vec(),
        }
    }

    /// Stacks batch-of-one (or larger) tensors along the batch axis.
    pub fn stack(items: &[&Tensor<F>]) -> Result<Self> {
        let Some(first) = items.first() else {
            return shape_err("cannot stack zero tensors");
        };
        let per = first.shape.with_n(1);
        let mut n = 0;
        let mut data = Vec::new();
        for t in items {
            if t.shape.with_n(1) != per {
                return shape_err(format!("cannot stack {} with {}", t.shape, first.shape));
            }
            n += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Tensor::from_vec(per.with_n(n), data)
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Tensor::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| G::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(G::nan()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute element-wise difference to `other`.
    pub fn max_abs_diff(&self, other: &Tensor<F>) -> F {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(F::zero(), F::max)
    }
}

/// Dense row-major 2-D array.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<F = f32> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Real> Matrix<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = F::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return shape_err(format!(
                "{} values cannot fill a {}x{} matrix",
                data.len(),
                rows,
                cols
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("ragged rows");
        }
        Matrix::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<F> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: F) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn view(&self) -> MatRef<'_, F> {
        MatRef::new(&self.data, self.rows, self.cols)
    }

    pub fn transpose(&self) -> Self {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }
}

/// Matrix product.
pub fn matmul<F: Real>(a: &Matrix<F>, b: &Matrix<F>) -> Result<Matrix<F>> {
    if a.cols != b.rows {
        return shape_err(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    gemm(a.view(), b.view(), F::zero(), &mut out.data);
    Ok(out)
}

/// Kernel size, stride and zero padding of a sliding-window operation, each
/// as `(height, width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Window {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Window {
    pub const fn new(kernel: (usize, usize), stride: (usize, usize), pad: (usize, usize)) -> Self {
        Window {
            kernel,
            stride,
            pad,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.0 == 0 || self.kernel.1 == 0 {
            return arg_err("kernel dimensions must be at least 1");
        }
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return arg_err("strides must be at least 1");
        }
        Ok(())
    }

    /// Output `(height, width)` for an input of the given size.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let ph = h + 2 * self.pad.0;
        let pw = w + 2 * self.pad.1;
        if self.kernel.0 > ph || self.kernel.1 > pw {
            return shape_err(format!(
                "{}x{} kernel larger than padded {}x{} input",
                self.kernel.0, self.kernel.1, ph, pw
            ));
        }
        Ok((
            (ph - self.kernel.0) / self.stride.0 + 1,
            (pw - self.kernel.1) / self.stride.1 + 1,
        ))
    }
}

/// Output positions `lo..hi` (of `wo`) whose input column `o * s + k - p`
/// lies inside `0..w`.
fn valid_range(wo: usize, w: usize, s: usize, k: usize, p: usize) -> (usize, usize) {
    let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
    let hi = if w + p > k { (w + p - k).div_ceil(s) } else { 0 };
    (lo.min(wo), hi.min(wo).max(lo.min(wo)))
}

/// Lowers one `c x h x w` sample into a `(c*kh*kw) x (ho*wo)` column matrix.
pub(crate) fn im2col_sample<F: Real>(
    x: &[F],
    (c, h, w): (usize, usize, usize),
    win: &Window,
    (ho, wo): (usize, usize),
    out: &mut [F],
) {
    let (kh, kw) = win.kernel;
    let (sh, sw) = win.stride;
    let (ph, pw) = win.pad;
    let cols = ho * wo;
    debug_assert_eq!(out.len(), c * kh * kw * cols);
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..ho {
                    let iy = (oy * sh + ki) as isize - ph as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(F::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let (lo, hi) = valid_range(wo, w, sw, kj, pw);
                    line[..lo].fill(F::zero());
                    line[hi..].fill(F::zero());
                    if lo < hi {
                        let start = lo * sw + kj - pw;
                        if sw == 1 {
                            line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        } else {
                            for (v, &s) in line[lo..hi].iter_mut().zip(src[start..].iter().step_by(sw)) {
                                *v = s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_sample`]: scatters column gradients back, adding into `dx`.
pub(crate) fn col2im_sample<F: Real>(
    cols_data: &[F],
    (c, h, w): (usize, usize, usize),
    win: &Window,
    (ho, wo): (usize, usize),
    dx: &mut [F],
) {
    let (kh, kw) = win.kernel;
    let (sh, sw) = win.stride;
    let (ph, pw) = win.pad;
    let cols = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols_data[row * cols..(row + 1) * cols];
                for oy in 0..ho {
                    let iy = (oy * sh + ki) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let (lo, hi) = valid_range(wo, w, sw, kj, pw);
                    if lo < hi {
                        let start = lo * sw + kj - pw;
                        let g = &src[oy * wo + lo..oy * wo + hi];
                        for (d, &v) in line[start..].iter_mut().step_by(sw).zip(g) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// Patch matrix of the whole batch: `C*kh*kw` rows, `N*H_out*W_out` columns
/// ordered by `(n, y, x)`. Padding is zero.
pub fn im2col<F: Real>(input: &Tensor<F>, win: &Window) -> Result<Matrix<F>> {
    let s = input.shape();
    let (ho, wo) = win.output_size(s.h, s.w)?;
    let rows = s.c * win.kernel.0 * win.kernel.1;
    let per = ho * wo;
    let mut out = Matrix::zeros(rows, s.n * per);
    let mut buf = vec![F::zero(); rows * per];
    for n in 0..s.n {
        im2col_sample(input.sample(n), (s.c, s.h, s.w), win, (ho, wo), &mut buf);
        for r in 0..rows {
            out.row_mut(r)[n * per..(n + 1) * per].copy_from_slice(&buf[r * per..(r + 1) * per]);
        }
    }
    Ok(out)
}

/// Element-wise binary operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Mul,
    Max,
}

/// Element-wise unary operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    Tanh,
}

/// Right-hand side of a broadcasting binary op.
#[derive(Clone, Copy, Debug)]
pub enum Operand<'a, F> {
    Tensor(&'a Tensor<F>),
    Scalar(F),
    /// One value per channel, broadcast over batch and space.
    PerChannel(&'a [F]),
}

impl BinaryOp {
    fn apply<F: Real>(self, a: F, b: F) -> F {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Mul => a * b,
            BinaryOp::Max => a.max(b),
        }
    }
}

impl UnaryOp {
    pub fn apply<F: Real>(self, a: F) -> F {
        match self {
            UnaryOp::Relu => a.max(F::zero()),
            UnaryOp::Tanh => a.tanh(),
        }
    }
}

pub fn binary<F: Real>(op: BinaryOp, a: &Tensor<F>, b: Operand<'_, F>) -> Result<Tensor<F>> {
    let s = a.shape();
    let data = match b {
        Operand::Tensor(t) => {
            if t.shape() != s {
                return shape_err(format!("cannot broadcast {} onto {}", t.shape(), s));
            }
            a.data()
                .iter()
                .zip(t.data())
                .map(|(&x, &y)| op.apply(x, y))
                .collect()
        }
        Operand::Scalar(y) => a.data().iter().map(|&x| op.apply(x, y)).collect(),
        Operand::PerChannel(v) => {
            if v.len() != s.c {
                return shape_err(format!("{} channel values for {} channels", v.len(), s.c));
            }
            let plane = s.plane();
            a.data()
                .iter()
                .enumerate()
                .map(|(i, &x)| op.apply(x, v[(i / plane) % s.c]))
                .collect()
        }
    };
    Tensor::from_vec(s, data)
}

pub fn unary<F: Real>(op: UnaryOp, a: &Tensor<F>) -> Tensor<F> {
    a.map(|x| op.apply(x))
}

pub fn relu<F: Real>(a: &Tensor<F>) -> Tensor<F> {
    unary(UnaryOp::Relu, a)
}

pub fn tanh<F: Real>(a: &Tensor<F>) -> Tensor<F> {
    unary(UnaryOp::Tanh, a)
}
