//! Dense row-major tensors and the im2col/col2im/matmul kernels every
//! convolution is built on.
//!
//! All reductions run in a fixed loop order, so results are bitwise
//! reproducible for a given input and precision.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_extents(shape: &[usize]) -> Result<usize> {
    if let Some(pos) = shape.iter().position(|&d| d == 0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("extent {pos} is zero"),
        });
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let len = check_extents(&shape)?;
        if len != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("expected {len} elements, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    /// Panics if any extent is zero.
    pub fn full(shape: &[usize], value: T) -> Self {
        let len = check_extents(shape).expect("tensor extents must be positive");
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(&other.shape)
    }

    pub fn ones_like(other: &Self) -> Self {
        Self::ones(&other.shape)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let len = check_extents(shape).expect("tensor extents must be positive");
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Self {
        Self::from_fn(shape, |_| T::of(rng.uniform(lo, hi)))
    }

    pub fn normal(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        Self::from_fn(shape, |_| T::of(std * rng.normal()))
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = check_extents(shape)?;
        if len != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Extents as `(N, C, H, W)`; errors unless the tensor has rank 4.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "expected rank 4 (N, C, H, W)".into(),
            }),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [r, c] => Ok((r, c)),
            _ => Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "expected rank 2".into(),
            }),
        }
    }

    fn zip(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_scalar(&self, s: T) -> Self {
        self.map(|v| v + s)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add_assign", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    /// Inner product over all elements.
    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::shape("dot", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b))
    }

    pub fn norm(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &v| acc + v * v)
            .sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &v| if v.abs() > acc { v.abs() } else { acc })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(Scalar::to_f64(*v))).collect(),
        }
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(m, k, n, &self.data, &other.data, &mut out);
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Unfolds every receptive field of `self` (N, C, H, W) into a column:
    /// the result is (N, C·kh·kw, Ho·Wo).
    pub fn im2col(
        &self,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Self> {
        let (n, c, h, w) = self.dims4()?;
        let geom = ConvGeometry {
            channels: c,
            height: h,
            width: w,
            kernel,
            stride,
            padding,
        };
        let (ho, wo) = geom.output_hw()?;
        let rows = geom.patch_len();
        let cols = ho * wo;
        let mut out = vec![T::zero(); n * rows * cols];
        let sample = c * h * w;
        for (x, dst) in self.data.chunks_exact(sample).zip(out.chunks_exact_mut(rows * cols)) {
            im2col_into(x, &geom, dst);
        }
        Ok(Self {
            shape: vec![n, rows, cols],
            data: out,
        })
    }

    /// Adjoint of [`Tensor::im2col`]: scatters columns back into an image,
    /// summing overlapping contributions.
    pub fn col2im(&self, geom: &ConvGeometry) -> Result<Self> {
        let (ho, wo) = geom.output_hw()?;
        let expected_rows = geom.patch_len();
        let (n, rows, cols) = match *self.shape.as_slice() {
            [n, r, c] => (n, r, c),
            _ => {
                return Err(Error::Geometry(format!(
                    "col2im expects rank-3 columns, got {:?}",
                    self.shape
                )))
            }
        };
        if rows != expected_rows || cols != ho * wo {
            return Err(Error::Geometry(format!(
                "columns {:?} do not match geometry ({} rows, {} positions)",
                self.shape,
                expected_rows,
                ho * wo
            )));
        }
        let sample = geom.channels * geom.height * geom.width;
        let mut out = vec![T::zero(); n * sample];
        for (src, x) in self.data.chunks_exact(rows * cols).zip(out.chunks_exact_mut(sample)) {
            col2im_add(src, geom, x);
        }
        Ok(Self {
            shape: vec![n, geom.channels, geom.height, geom.width],
            data: out,
        })
    }
}

/// Spatial geometry of one sliding-window operation on a single sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

/// Output extent of a strided window; floors like the usual frameworks and
/// rejects windows that do not fit at all.
pub fn conv_output_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::Geometry(format!(
            "kernel {kernel} and stride {stride} must be positive"
        )));
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::Geometry(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

impl ConvGeometry {
    pub fn output_hw(&self) -> Result<(usize, usize)> {
        Ok((
            conv_output_len(self.height, self.kernel.0, self.stride.0, self.padding.0)?,
            conv_output_len(self.width, self.kernel.1, self.stride.1, self.padding.1)?,
        ))
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel.0 * self.kernel.1
    }

    /// True when im2col is the identity map (1×1 window, unit stride, no padding).
    pub fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == (1, 1) && self.padding == (0, 0)
    }
}

/// Range of output columns `ox` whose input column `ox*stride + offset - pad`
/// lands inside `[0, len)`.
#[inline]
fn valid_range(out_len: usize, len: usize, stride: usize, offset: usize, pad: usize) -> (usize, usize) {
    // ox*stride + offset >= pad
    let lo = if offset >= pad {
        0
    } else {
        (pad - offset).div_ceil(stride)
    };
    // ox*stride + offset - pad <= len - 1
    let hi = if offset > pad + len - 1 {
        0
    } else {
        ((pad + len - 1 - offset) / stride + 1).min(out_len)
    };
    (lo.min(hi), hi)
}

/// One sample: `x` is (C, H, W), `cols` is (C·kh·kw, Ho·Wo) and fully overwritten.
pub(crate) fn im2col_into<T: Scalar>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let (ho, wo) = g.output_hw().expect("geometry validated by caller");
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    let (h, w) = (g.height, g.width);
    let p = ho * wo;
    for c in 0..g.channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            let (oy_lo, oy_hi) = valid_range(ho, h, sh, ki, ph);
            for kj in 0..kw {
                let (ox_lo, ox_hi) = valid_range(wo, w, sw, kj, pw);
                let row = ((c * kh + ki) * kw + kj) * p;
                let dst = &mut cols[row..row + p];
                for oy in 0..ho {
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if oy < oy_lo || oy >= oy_hi || ox_lo >= ox_hi {
                        line.fill(T::zero());
                        continue;
                    }
                    let iy = oy * sh + ki - ph;
                    let src = &plane[iy * w..(iy + 1) * w];
                    line[..ox_lo].fill(T::zero());
                    line[ox_hi..].fill(T::zero());
                    let ix0 = ox_lo * sw + kj - pw;
                    if sw == 1 {
                        line[ox_lo..ox_hi].copy_from_slice(&src[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for (k, v) in line[ox_lo..ox_hi].iter_mut().enumerate() {
                            *v = src[ix0 + k * sw];
                        }
                    }
                }
            }
        }
    }
}

/// One sample: adds the columns (C·kh·kw, Ho·Wo) into `x` (C, H, W).
pub(crate) fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeometry, x: &mut [T]) {
    let (ho, wo) = g.output_hw().expect("geometry validated by caller");
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    let (h, w) = (g.height, g.width);
    let p = ho * wo;
    for c in 0..g.channels {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            let (oy_lo, oy_hi) = valid_range(ho, h, sh, ki, ph);
            for kj in 0..kw {
                let (ox_lo, ox_hi) = valid_range(wo, w, sw, kj, pw);
                if ox_lo >= ox_hi {
                    continue;
                }
                let row = ((c * kh + ki) * kw + kj) * p;
                let src = &cols[row..row + p];
                for oy in oy_lo..oy_hi {
                    let iy = oy * sh + ki - ph;
                    let line = &src[oy * wo..(oy + 1) * wo];
                    let dst = &mut plane[iy * w..(iy + 1) * w];
                    let ix0 = ox_lo * sw + kj - pw;
                    for (k, &v) in line[ox_lo..ox_hi].iter().enumerate() {
                        let d = &mut dst[ix0 + k * sw];
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

/// `out (m×n) += a (m×k) · b (k×n)`; each output sums over `k` in ascending order.
pub(crate) fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
}

/// `out (m×n) += a (m×k) · bᵀ` with `b` stored as (n×k).
pub(crate) fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && out.len() >= m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = out[i * n + j] + dot_lanes(arow, brow);
        }
    }
}

/// `out (m×n) += aᵀ · b` with `a` stored as (k×m) and `b` as (k×n).
pub(crate) fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert!(a.len() >= k * m && b.len() >= k * n && out.len() >= m * n);
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == T::zero() {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + api * bv;
            }
        }
    }
}

/// Dot product with eight fixed accumulator lanes (deterministic, vectorizable).
#[inline]
pub(crate) fn dot_lanes<T: Scalar>(a: &[T], b: &[T]) -> T {
    const L: usize = 8;
    let mut acc = [T::zero(); L];
    let ca = a.chunks_exact(L);
    let cb = b.chunks_exact(L);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..L {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail = tail + x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}
