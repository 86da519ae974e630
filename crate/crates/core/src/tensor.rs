//! Dense tensor types and the direct-convolution reference.
//!
//! Activations are stored row-major in `(x, y, s)` order with the channel
//! index varying fastest. Kernels are stored in `(i, j, s, t)` order with
//! the output channel varying fastest, which makes the raw buffer identical
//! to the `d²S × T` kernel matrix used by the lowered convolution.
//!
//! Accessors on tensors take 0-based indices. Spatial positions that name
//! output locations ([`Pos`], [`SpatialIndexSet`]) are 1-based.

use std::collections::HashSet;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Scalar type used by tensors: `f32` for inference and training, `f64`
/// for gradient checks.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    /// Size of one value in bytes.
    const BYTES: usize;

    fn from_f64_lossy(v: f64) -> Self;

    fn to_f64_lossy(self) -> f64;
}

impl Real for f32 {
    const BYTES: usize = 4;

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const BYTES: usize = 8;

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

fn check_finite<T: Real>(values: &[T]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(i)),
        None => Ok(()),
    }
}

/// An `X × Y × S` activation tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3<T = f32> {
    x: usize,
    y: usize,
    s: usize,
    data: Vec<T>,
}

impl<T: Real> Tensor3<T> {
    pub fn zeros(x: usize, y: usize, s: usize) -> Self {
        Tensor3 {
            x,
            y,
            s,
            data: vec![T::zero(); x * y * s],
        }
    }

    pub fn from_vec(x: usize, y: usize, s: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != x * y * s {
            return Err(Error::shape(format!(
                "tensor {x}x{y}x{s} needs {} values, got {}",
                x * y * s,
                data.len()
            )));
        }
        check_finite(&data)?;
        Ok(Tensor3 { x, y, s, data })
    }

    /// Builds a tensor from a function of 0-based `(x, y, s)`.
    pub fn from_fn(x: usize, y: usize, s: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(x * y * s);
        for i in 0..x {
            for j in 0..y {
                for c in 0..s {
                    data.push(f(i, j, c));
                }
            }
        }
        Tensor3 { x, y, s, data }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.x
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.y
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.s
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.x, self.y, self.s)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, s: usize) -> usize {
        debug_assert!(x < self.x && y < self.y && s < self.s);
        (x * self.y + y) * self.s + s
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, s: usize) -> T {
        self.data[self.index(x, y, s)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, s: usize, v: T) {
        let i = self.index(x, y, s);
        self.data[i] = v;
    }

    /// All channels at 0-based spatial location `(x, y)`.
    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[T] {
        let start = (x * self.y + y) * self.s;
        &self.data[start..start + self.s]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [T] {
        let start = (x * self.y + y) * self.s;
        &mut self.data[start..start + self.s]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn cast<U: Real>(&self) -> Tensor3<U> {
        Tensor3 {
            x: self.x,
            y: self.y,
            s: self.s,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }

    /// Zero-pads both spatial dimensions by `pad` on each side.
    pub fn padded(&self, pad: usize) -> Self {
        if pad == 0 {
            return self.clone();
        }
        let mut out = Tensor3::zeros(self.x + 2 * pad, self.y + 2 * pad, self.s);
        for i in 0..self.x {
            for j in 0..self.y {
                out.pixel_mut(i + pad, j + pad).copy_from_slice(self.pixel(i, j));
            }
        }
        out
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

/// `T` convolution kernels of size `d × d × S`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelTensor<T = f32> {
    d: usize,
    s: usize,
    t: usize,
    data: Vec<T>,
}

impl<T: Real> KernelTensor<T> {
    pub fn zeros(d: usize, s: usize, t: usize) -> Self {
        KernelTensor {
            d,
            s,
            t,
            data: vec![T::zero(); d * d * s * t],
        }
    }

    pub fn from_vec(d: usize, s: usize, t: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != d * d * s * t {
            return Err(Error::shape(format!(
                "kernel {d}x{d}x{s}x{t} needs {} values, got {}",
                d * d * s * t,
                data.len()
            )));
        }
        check_finite(&data)?;
        Ok(KernelTensor { d, s, t, data })
    }

    /// Builds a kernel from a function of 0-based `(i, j, s, t)`.
    pub fn from_fn(
        d: usize,
        s: usize,
        t: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(d * d * s * t);
        for i in 0..d {
            for j in 0..d {
                for c in 0..s {
                    for o in 0..t {
                        data.push(f(i, j, c, o));
                    }
                }
            }
        }
        KernelTensor { d, s, t, data }
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn in_channels(&self) -> usize {
        self.s
    }

    #[inline]
    pub fn out_channels(&self) -> usize {
        self.t
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, s: usize, t: usize) -> T {
        self.data[((i * self.d + j) * self.s + s) * self.t + t]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, s: usize, t: usize, v: T) {
        let k = ((i * self.d + j) * self.s + s) * self.t + t;
        self.data[k] = v;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Number of rows of the reshaped `d²S × T` kernel matrix.
    #[inline]
    pub fn patch_len(&self) -> usize {
        self.d * self.d * self.s
    }

    /// The `d²S × T` kernel matrix. Zero-copy in spirit: the buffer layout
    /// already matches, so this only clones the storage.
    pub fn to_matrix(&self) -> Matrix<T> {
        Matrix {
            rows: self.patch_len(),
            cols: self.t,
            data: self.data.clone(),
        }
    }

    pub fn from_matrix(d: usize, s: usize, m: Matrix<T>) -> Result<Self> {
        if m.rows != d * d * s {
            return Err(Error::shape(format!(
                "kernel matrix has {} rows, expected {}",
                m.rows,
                d * d * s
            )));
        }
        Ok(KernelTensor {
            d,
            s,
            t: m.cols,
            data: m.data,
        })
    }

    pub fn cast<U: Real>(&self) -> KernelTensor<U> {
        KernelTensor {
            d: self.d,
            s: self.s,
            t: self.t,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T = f32> {
    pub(crate) rows: usize,
    pub(crate) cols: usize,
    pub(crate) data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
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

/// A 1-based output spatial position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pos {
    pub x: usize,
    pub y: usize,
}

impl Pos {
    #[inline]
    pub const fn new(x: usize, y: usize) -> Self {
        Pos { x, y }
    }

    /// Row-major 0-based flat index on a grid of width `yp`.
    #[inline]
    pub fn flat(self, yp: usize) -> usize {
        (self.x - 1) * yp + (self.y - 1)
    }

    #[inline]
    pub fn from_flat(i: usize, yp: usize) -> Self {
        Pos {
            x: i / yp + 1,
            y: i % yp + 1,
        }
    }

    #[inline]
    pub fn dist2(self, other: Pos) -> usize {
        let dx = self.x.abs_diff(other.x);
        let dy = self.y.abs_diff(other.y);
        dx * dx + dy * dy
    }
}

/// An ordered, duplicate-free set of positions inside `[1, X′] × [1, Y′]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpatialIndexSet {
    xp: usize,
    yp: usize,
    indices: Vec<Pos>,
}

impl SpatialIndexSet {
    pub fn new(xp: usize, yp: usize, indices: Vec<Pos>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(indices.len());
        for &p in &indices {
            if p.x < 1 || p.x > xp || p.y < 1 || p.y > yp {
                return Err(Error::OutOfBounds {
                    x: p.x,
                    y: p.y,
                    xp,
                    yp,
                });
            }
            if !seen.insert(p) {
                return Err(Error::Duplicate { x: p.x, y: p.y });
            }
        }
        Ok(SpatialIndexSet { xp, yp, indices })
    }

    /// Ω: every position in row-major order.
    pub fn full(xp: usize, yp: usize) -> Self {
        let indices = (1..=xp)
            .flat_map(|x| (1..=yp).map(move |y| Pos::new(x, y)))
            .collect();
        SpatialIndexSet { xp, yp, indices }
    }

    pub(crate) fn from_sorted_unchecked(xp: usize, yp: usize, indices: Vec<Pos>) -> Self {
        SpatialIndexSet { xp, yp, indices }
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.xp, self.yp)
    }

    /// N = |I|.
    #[inline]
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// |Ω| for this grid.
    #[inline]
    pub fn omega_size(&self) -> usize {
        self.xp * self.yp
    }

    pub fn positions(&self) -> &[Pos] {
        &self.indices
    }

    pub fn iter(&self) -> impl Iterator<Item = Pos> + '_ {
        self.indices.iter().copied()
    }

    pub fn contains(&self, p: Pos) -> bool {
        self.indices.contains(&p)
    }

    /// Boolean membership grid in row-major order.
    pub fn membership(&self) -> Vec<bool> {
        let mut m = vec![false; self.xp * self.yp];
        for p in &self.indices {
            m[p.flat(self.yp)] = true;
        }
        m
    }

    /// Perforation rate `r = 1 − N/|Ω|` of this set on its own grid.
    pub fn rate(&self) -> f64 {
        1.0 - self.len() as f64 / self.omega_size() as f64
    }
}

/// `r = 1 − |I|/|Ω|`.
pub fn perforation_rate(set: &SpatialIndexSet, omega_size: usize) -> Result<f64> {
    if set.len() > omega_size {
        return Err(Error::invalid(format!(
            "index set has {} positions but |Ω| = {omega_size}",
            set.len()
        )));
    }
    if omega_size == 0 {
        return Err(Error::invalid("|Ω| must be positive"));
    }
    Ok(1.0 - set.len() as f64 / omega_size as f64)
}

/// Unit-stride, unpadded, bias-free convolution evaluated term by term.
///
/// This is the reference every lowered path is checked against and is
/// intentionally left unoptimized.
pub fn direct_conv<T: Real>(u: &Tensor3<T>, k: &KernelTensor<T>) -> Result<Tensor3<T>> {
    let d = k.size();
    if u.channels() != k.in_channels() {
        return Err(Error::shape(format!(
            "input has {} channels, kernel expects {}",
            u.channels(),
            k.in_channels()
        )));
    }
    if d == 0 || u.height() < d || u.width() < d {
        return Err(Error::shape(format!(
            "input {}x{} is smaller than kernel {d}x{d}",
            u.height(),
            u.width()
        )));
    }
    let xp = u.height() - d + 1;
    let yp = u.width() - d + 1;
    let t_out = k.out_channels();
    let mut v = Tensor3::zeros(xp, yp, t_out);
    for x in 0..xp {
        for y in 0..yp {
            for t in 0..t_out {
                let mut acc = T::zero();
                for i in 0..d {
                    for j in 0..d {
                        for s in 0..u.channels() {
                            acc += k.get(i, j, s, t) * u.get(x + i, y + j, s);
                        }
                    }
                }
                v.set(x, y, t, acc);
            }
        }
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_input_gives_zero_output() {
        let u = Tensor3::<f32>::zeros(5, 5, 2);
        let k = KernelTensor::from_fn(3, 2, 4, |i, j, s, t| (i + j + s + t) as f32 * 0.3 - 1.0);
        let v = direct_conv(&u, &k).unwrap();
        assert_eq!(v.dims(), (3, 3, 4));
        assert!(v.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identity_kernel_copies_channel() {
        let u = Tensor3::from_fn(4, 3, 1, |x, y, _| (x * 10 + y) as f32);
        let mut k = KernelTensor::zeros(1, 1, 1);
        k.set(0, 0, 0, 0, 1.0);
        let v = direct_conv(&u, &k).unwrap();
        assert_eq!(v, u);
    }

    #[test]
    fn single_output_is_nine_term_dot_product() {
        let uv = [0.5f64, -1.0, 2.0, 0.25, 3.0, -0.5, 1.5, 0.0, -2.0, 1.0, 0.75, -1.25, 2.5, 0.1, -0.3, 0.6];
        let kv = [1.0f64, -2.0, 0.5, 0.25, 1.5, -1.0, 2.0, 0.0, -0.75];
        let u = Tensor3::from_vec(4, 4, 1, uv.to_vec()).unwrap();
        let k = KernelTensor::from_vec(3, 1, 1, kv.to_vec()).unwrap();
        // hand expansion of V(1,1,1) = Σ_ij K(i,j) U(i,j)
        // rows of the 3x3 window: U(0,0..3), U(1,0..3), U(2,0..3) of a width-4 grid
        let expected = 1.0 * 0.5 + -2.0 * -1.0 + 0.5 * 2.0
            + 0.25 * 3.0 + 1.5 * -0.5 + -1.5
            + 2.0 * -2.0 + 0.0 * 1.0 + -0.75 * 0.75;
        let v = direct_conv(&u, &k).unwrap();
        assert_eq!(v.dims(), (2, 2, 1));
        assert!((v.get(0, 0, 0) - expected).abs() < 1e-12);
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let u = Tensor3::<f32>::zeros(5, 5, 2);
        let k = KernelTensor::zeros(3, 3, 1);
        assert!(matches!(direct_conv(&u, &k), Err(Error::Shape(_))));
        let small = Tensor3::<f32>::zeros(2, 5, 3);
        assert!(matches!(direct_conv(&small, &k), Err(Error::Shape(_))));
    }

    #[test]
    fn rate_formula() {
        let full = SpatialIndexSet::full(10, 10);
        assert_eq!(perforation_rate(&full, 100).unwrap(), 0.0);
        let empty = SpatialIndexSet::new(10, 10, vec![]).unwrap();
        assert_eq!(perforation_rate(&empty, 100).unwrap(), 1.0);
        let quarter = SpatialIndexSet::new(
            10,
            10,
            (1..=5).flat_map(|x| (1..=5).map(move |y| Pos::new(x, y))).collect(),
        )
        .unwrap();
        assert_eq!(perforation_rate(&quarter, 100).unwrap(), 0.75);
        assert!(perforation_rate(&full, 50).is_err());
    }

    #[test]
    fn index_set_validation() {
        assert!(matches!(
            SpatialIndexSet::new(3, 3, vec![Pos::new(4, 1)]),
            Err(Error::OutOfBounds { x: 4, y: 1, .. })
        ));
        assert!(matches!(
            SpatialIndexSet::new(3, 3, vec![Pos::new(0, 1)]),
            Err(Error::OutOfBounds { .. })
        ));
        assert!(matches!(
            SpatialIndexSet::new(3, 3, vec![Pos::new(1, 1), Pos::new(1, 1)]),
            Err(Error::Duplicate { .. })
        ));
    }

    #[test]
    fn non_finite_values_rejected() {
        assert!(matches!(
            Tensor3::from_vec(1, 1, 2, vec![1.0f32, f32::NAN]),
            Err(Error::NonFinite(1))
        ));
    }
}
