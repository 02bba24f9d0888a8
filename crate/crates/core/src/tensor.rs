//! Dense storage and the linear-algebra kernels behind matrixized convolution.
//!
//! A convolution with `C_out` filters of side `d` over a `C×H×W` input is
//! computed as `K · im2col(x)`, where `K` is the `C_out × (C·d·d)` filter
//! matrix whose row `i` is filter `i`, and `im2col(x)` is the
//! `(C·d·d) × (H'·W')` patch matrix. Activations are stored channel-major
//! (`C, H, W` per sample) so the product lands directly in output layout.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// Floating-point element type of the numeric kernels.
///
/// Everything production-facing runs in `f32`; `f64` exists so gradient
/// checks can run the very same layer code without single-precision noise.
pub trait Scalar:
    Float + FromPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// `C ← α·A·B + β·C` on raw strided buffers.
    ///
    /// # Safety
    /// Strides and extents must describe memory inside the given slices.
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
        Self::from_f64(v).expect("literal fits in scalar")
    }
}

impl Scalar for f32 {
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

impl Scalar for f64 {
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

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows * cols != data.len() {
            return shape_err(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("ragged rows");
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Keeps only the rows whose flag is set, in order.
    pub fn select_rows(&self, keep: &[bool]) -> Self {
        let data: Vec<T> = keep
            .iter()
            .enumerate()
            .filter(|(_, &k)| k)
            .flat_map(|(r, _)| self.row(r).iter().copied())
            .collect();
        let rows = data.len() / self.cols.max(1);
        Self {
            rows: if self.cols == 0 { 0 } else { rows },
            cols: self.cols,
            data,
        }
    }

    /// Keeps only the columns whose flag is set, in order.
    pub fn select_cols(&self, keep: &[bool]) -> Self {
        let kept: Vec<usize> = (0..self.cols).filter(|&c| keep[c]).collect();
        let mut out = Self::zeros(self.rows, kept.len());
        for r in 0..self.rows {
            let src = self.row(r);
            for (j, &c) in kept.iter().enumerate() {
                out.data[r * kept.len() + j] = src[c];
            }
        }
        out
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape() != other.shape() {
            return shape_err(format!(
                "elementwise op on {:?} and {:?}",
                self.shape(),
                other.shape()
            ));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| U::from(v).unwrap()).collect(),
        }
    }
}

/// `a · b`, accumulated in the element type with a fixed loop order.
pub fn gemm<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return shape_err(format!(
            "gemm inner dimensions disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let mut c = Matrix::zeros(a.rows, b.cols);
    gemm_slices(
        a.rows,
        a.cols,
        b.cols,
        T::one(),
        &a.data,
        false,
        &b.data,
        false,
        T::zero(),
        &mut c.data,
    );
    Ok(c)
}

/// `c ← α·op(a)·op(b) + β·c` on row-major slices, where `op(a)` is `m×k`
/// and `op(b)` is `k×n`. With `a_t` set, `a` is stored as the `k×m`
/// transpose; likewise for `b_t`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_slices<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assertion above bounds every strided access.
    unsafe {
        T::gemm_raw(
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

/// Dense N-dimensional array, row-major over `shape`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return shape_err(format!("zero extent in {shape:?}"));
        }
        if shape.iter().product::<usize>() != data.len() {
            return shape_err(format!(
                "shape {shape:?} needs {} values, got {}",
                shape.iter().product::<usize>(),
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return shape_err(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from(v).unwrap()).collect(),
        }
    }
}

/// Geometry of a square-kernel, unit-stride convolution over one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(channels: usize, height: usize, width: usize, kernel: usize, pad: usize) -> Result<Self> {
        if kernel == 0 || channels == 0 {
            return shape_err("kernel and channel count must be positive");
        }
        if height + 2 * pad < kernel || width + 2 * pad < kernel {
            return shape_err(format!(
                "kernel {kernel} larger than padded input {}x{}",
                height + 2 * pad,
                width + 2 * pad
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            kernel,
            pad,
        })
    }

    pub fn out_height(&self) -> usize {
        self.height + 2 * self.pad - self.kernel + 1
    }

    pub fn out_width(&self) -> usize {
        self.width + 2 * self.pad - self.kernel + 1
    }

    /// Rows of the patch matrix: `C·d·d`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Columns of the patch matrix: `H'·W'`.
    pub fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Patch matrix of a `C×H×W` input with no padding.
pub fn im2col<T: Scalar>(input: &Tensor<T>, kernel: usize) -> Result<Matrix<T>> {
    let [c, h, w] = match *input.shape() {
        [c, h, w] => [c, h, w],
        _ => return shape_err(format!("im2col expects C×H×W, got {:?}", input.shape())),
    };
    let geom = ConvGeometry::new(c, h, w, kernel, 0)?;
    let mut out = Matrix::zeros(geom.patch_len(), geom.positions());
    im2col_into(input.data(), &geom, out.data_mut());
    Ok(out)
}

/// Fills `out` (`patch_len × positions`, row-major) with the patches of
/// `input`. Row `(c·d + i)·d + j` holds kernel tap `(c, i, j)`, so row
/// order matches a flattened `(in, kh, kw)` filter row.
pub(crate) fn im2col_into<T: Scalar>(input: &[T], geom: &ConvGeometry, out: &mut [T]) {
    let (h, w, d, pad) = (geom.height, geom.width, geom.kernel, geom.pad);
    let (oh, ow) = (geom.out_height(), geom.out_width());
    let positions = oh * ow;
    debug_assert_eq!(out.len(), geom.patch_len() * positions);
    for c in 0..geom.channels {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for i in 0..d {
            for j in 0..d {
                let row = (c * d + i) * d + j;
                let dst = &mut out[row * positions..(row + 1) * positions];
                for y in 0..oh {
                    let sy = y + i;
                    let dst_row = &mut dst[y * ow..(y + 1) * ow];
                    if sy < pad || sy >= h + pad {
                        dst_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[(sy - pad) * w..(sy - pad + 1) * w];
                    if pad == 0 {
                        dst_row.copy_from_slice(&src_row[j..j + ow]);
                    } else {
                        for (x, v) in dst_row.iter_mut().enumerate() {
                            let sx = x + j;
                            *v = if sx < pad || sx >= w + pad {
                                T::zero()
                            } else {
                                src_row[sx - pad]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a patch matrix back into `C×H×W` layout.
pub fn col2im<T: Scalar>(cols: &Matrix<T>, geom: &ConvGeometry) -> Result<Tensor<T>> {
    if cols.shape() != (geom.patch_len(), geom.positions()) {
        return shape_err(format!(
            "col2im: cols {:?} do not match geometry ({}, {})",
            cols.shape(),
            geom.patch_len(),
            geom.positions()
        ));
    }
    let mut out = Tensor::zeros(&[geom.channels, geom.height, geom.width]);
    col2im_add(cols.data(), geom, out.data_mut());
    Ok(out)
}

pub(crate) fn col2im_add<T: Scalar>(cols: &[T], geom: &ConvGeometry, out: &mut [T]) {
    let (h, w, d, pad) = (geom.height, geom.width, geom.kernel, geom.pad);
    let (oh, ow) = (geom.out_height(), geom.out_width());
    let positions = oh * ow;
    for c in 0..geom.channels {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for i in 0..d {
            for j in 0..d {
                let row = (c * d + i) * d + j;
                let src = &cols[row * positions..(row + 1) * positions];
                for y in 0..oh {
                    let sy = y + i;
                    if sy < pad || sy >= h + pad {
                        continue;
                    }
                    let dst_row = &mut plane[(sy - pad) * w..(sy - pad + 1) * w];
                    for x in 0..ow {
                        let sx = x + j;
                        if sx >= pad && sx < w + pad {
                            dst_row[sx - pad] = dst_row[sx - pad] + src[y * ow + x];
                        }
                    }
                }
            }
        }
    }
}

/// Euclidean norm of every row.
pub fn row_l2_norms<T: Scalar>(m: &Matrix<T>) -> Vec<T> {
    (0..m.rows())
        .map(|r| m.row(r).iter().map(|&v| v * v).sum::<T>().sqrt())
        .collect()
}

/// `‖m‖_{2,1}`: sum of row norms.
pub fn l21_norm<T: Scalar>(m: &Matrix<T>) -> T {
    row_l2_norms(m).into_iter().sum()
}

/// `‖m‖_{2,0}`: number of nonzero rows.
pub fn l20_count<T: Scalar>(m: &Matrix<T>) -> usize {
    row_l2_norms(m).into_iter().filter(|&n| n > T::zero()).count()
}

/// A convolutional filter bank, stored as its matrixized view: row `i` is
/// filter `i`, flattened in `(in_channel, kh, kw)` order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterBank<T = f32> {
    in_channels: usize,
    kernel: usize,
    weights: Matrix<T>,
}

impl<T: Scalar> FilterBank<T> {
    pub fn zeros(out_channels: usize, in_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            kernel,
            weights: Matrix::zeros(out_channels, in_channels * kernel * kernel),
        }
    }

    pub fn from_matrix(in_channels: usize, kernel: usize, weights: Matrix<T>) -> Result<Self> {
        if weights.cols() != in_channels * kernel * kernel {
            return shape_err(format!(
                "filter matrix has {} columns, expected {}·{}²",
                weights.cols(),
                in_channels,
                kernel
            ));
        }
        Ok(Self {
            in_channels,
            kernel,
            weights,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.rows()
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.weights
    }

    pub fn matrix_mut(&mut self) -> &mut Matrix<T> {
        &mut self.weights
    }

    /// Weight of filter `o` at tap `(c, i, j)`.
    pub fn at(&self, o: usize, c: usize, i: usize, j: usize) -> T {
        let d = self.kernel;
        self.weights.get(o, (c * d + i) * d + j)
    }

    /// Drops input channels, keeping the `(kh, kw)` slabs of the survivors.
    pub fn select_in_channels(&self, keep: &[bool]) -> Self {
        let taps = self.kernel * self.kernel;
        let col_keep: Vec<bool> = (0..self.weights.cols()).map(|c| keep[c / taps]).collect();
        Self {
            in_channels: keep.iter().filter(|&&k| k).count(),
            kernel: self.kernel,
            weights: self.weights.select_cols(&col_keep),
        }
    }

    pub fn select_out_channels(&self, keep: &[bool]) -> Self {
        Self {
            in_channels: self.in_channels,
            kernel: self.kernel,
            weights: self.weights.select_rows(keep),
        }
    }

    pub fn cast<U: Scalar>(&self) -> FilterBank<U> {
        FilterBank {
            in_channels: self.in_channels,
            kernel: self.kernel,
            weights: self.weights.cast(),
        }
    }
}
