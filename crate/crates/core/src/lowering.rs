//! Convolution lowering: row-subset `im2row`, GEMM and batch stacking.
//!
//! A data-matrix row holds one input patch flattened with the channel index
//! fastest, then the kernel column `j`, then the kernel row `i`; i.e. entry
//! `(i·d + j)·S + s`. This matches the row order of
//! [`KernelTensor::to_matrix`](crate::tensor::KernelTensor::to_matrix), so a
//! row times the kernel matrix is one output pixel.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Pos, Real, SpatialIndexSet, Tensor3};

/// Spatial geometry of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub const fn unit(kernel: usize) -> Self {
        ConvGeometry {
            kernel,
            stride: 1,
            pad: 0,
        }
    }

    pub fn output_len(&self, input: usize) -> Result<usize> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::invalid("kernel size and stride must be positive"));
        }
        let span = input + 2 * self.pad;
        if span < self.kernel {
            return Err(Error::shape(format!(
                "input extent {input} (+2×{} padding) is smaller than kernel {}",
                self.pad, self.kernel
            )));
        }
        Ok((span - self.kernel) / self.stride + 1)
    }

    pub fn output_dims(&self, x: usize, y: usize) -> Result<(usize, usize)> {
        Ok((self.output_len(x)?, self.output_len(y)?))
    }

    /// Signed input coordinate of the top-left patch corner for a 1-based
    /// output coordinate.
    #[inline]
    fn origin(&self, out: usize) -> isize {
        ((out - 1) * self.stride) as isize - self.pad as isize
    }
}

/// Anything a convolution or pooling window can read pixels from: a dense
/// tensor, or a compactly stored perforated output read through its
/// interpolation map.
pub trait PatchSource<T: Real>: Sync {
    fn dims(&self) -> (usize, usize, usize);

    /// Writes all channels of 0-based `(x, y)` into `out`.
    fn write_pixel(&self, x: usize, y: usize, out: &mut [T]);
}

impl<T: Real> PatchSource<T> for Tensor3<T> {
    fn dims(&self) -> (usize, usize, usize) {
        Tensor3::dims(self)
    }

    #[inline]
    fn write_pixel(&self, x: usize, y: usize, out: &mut [T]) {
        out.copy_from_slice(self.pixel(x, y));
    }
}

/// Which image and output position a data-matrix row came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RowOrigin {
    pub image: usize,
    pub pos: Pos,
}

/// The lowered data matrix `M` with per-row provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct DataMatrix<T = f32> {
    pub matrix: Matrix<T>,
    pub row_origin: Vec<RowOrigin>,
}

impl<T: Real> DataMatrix<T> {
    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.cols()
    }
}

fn check_positions(positions: &[Pos], xp: usize, yp: usize) -> Result<()> {
    for p in positions {
        if p.x < 1 || p.x > xp || p.y < 1 || p.y > yp {
            return Err(Error::OutOfBounds {
                x: p.x,
                y: p.y,
                xp,
                yp,
            });
        }
    }
    Ok(())
}

/// Fills `out` (rows × d²S) with the patches at `positions`.
pub(crate) fn fill_rows<T: Real, S: PatchSource<T> + ?Sized>(
    src: &S,
    geom: ConvGeometry,
    positions: &[Pos],
    out: &mut [T],
) {
    let (xin, yin, s) = src.dims();
    let d = geom.kernel;
    let cols = d * d * s;
    debug_assert_eq!(out.len(), positions.len() * cols);
    for (row, p) in out.chunks_exact_mut(cols).zip(positions) {
        let ox = geom.origin(p.x);
        let oy = geom.origin(p.y);
        for i in 0..d {
            let ix = ox + i as isize;
            for j in 0..d {
                let iy = oy + j as isize;
                let seg = &mut row[(i * d + j) * s..(i * d + j + 1) * s];
                if ix < 0 || iy < 0 || ix as usize >= xin || iy as usize >= yin {
                    seg.fill(T::zero());
                } else {
                    src.write_pixel(ix as usize, iy as usize, seg);
                }
            }
        }
    }
}

/// Lowers the patches at `positions` under a general geometry.
pub fn im2row_with<T: Real, S: PatchSource<T> + ?Sized>(
    src: &S,
    geom: ConvGeometry,
    positions: &[Pos],
) -> Result<Matrix<T>> {
    let (xin, yin, s) = src.dims();
    let (xp, yp) = geom.output_dims(xin, yin)?;
    check_positions(positions, xp, yp)?;
    let cols = geom.kernel * geom.kernel * s;
    let mut m = Matrix::zeros(positions.len(), cols);
    fill_rows(src, geom, positions, m.as_mut_slice());
    Ok(m)
}

/// Unit-stride lowering of `u` restricted to `positions`, one row per
/// position in the set's order.
pub fn im2row<T: Real>(u: &Tensor3<T>, d: usize, positions: &SpatialIndexSet) -> Result<DataMatrix<T>> {
    let matrix = im2row_with(u, ConvGeometry::unit(d), positions.positions())?;
    let row_origin = positions
        .iter()
        .map(|pos| RowOrigin { image: 0, pos })
        .collect();
    Ok(DataMatrix { matrix, row_origin })
}

/// Adds the patch gradients in `rows` back onto a dense input gradient.
pub fn col2im<T: Real>(
    rows: &Matrix<T>,
    geom: ConvGeometry,
    positions: &[Pos],
    input_dims: (usize, usize, usize),
) -> Result<Tensor3<T>> {
    let (xin, yin, s) = input_dims;
    let d = geom.kernel;
    if rows.cols() != d * d * s || rows.rows() != positions.len() {
        return Err(Error::shape(format!(
            "col2im: {}x{} rows for {} positions and patch length {}",
            rows.rows(),
            rows.cols(),
            positions.len(),
            d * d * s
        )));
    }
    let mut out = Tensor3::zeros(xin, yin, s);
    for (r, p) in positions.iter().enumerate() {
        let row = rows.row(r);
        let ox = geom.origin(p.x);
        let oy = geom.origin(p.y);
        for i in 0..d {
            let ix = ox + i as isize;
            if ix < 0 || ix as usize >= xin {
                continue;
            }
            for j in 0..d {
                let iy = oy + j as isize;
                if iy < 0 || iy as usize >= yin {
                    continue;
                }
                let seg = &row[(i * d + j) * s..(i * d + j + 1) * s];
                for (o, &g) in out.pixel_mut(ix as usize, iy as usize).iter_mut().zip(seg) {
                    *o += g;
                }
            }
        }
    }
    Ok(out)
}

/// Worker policy for [`matmul_with`]. Row blocks are independent and each
/// is reduced in a fixed order, so results do not depend on the policy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Parallelism {
    #[default]
    Single,
    Rayon,
}

const K_BLOCK: usize = 256;
const ROW_BLOCK: usize = 4;
const PAR_ROWS: usize = 64;

fn axpy<T: Real>(out: &mut [T], a: T, b: &[T]) {
    for (o, &v) in out.iter_mut().zip(b) {
        *o += a * v;
    }
}

/// `out += a · b` for a block of rows of `a`.
fn gemm_block<T: Real>(a: &[T], k: usize, b: &Matrix<T>, out: &mut [T]) {
    let n = b.cols();
    let rows = a.len() / k.max(1);
    for kb in (0..k).step_by(K_BLOCK) {
        let kend = (kb + K_BLOCK).min(k);
        let mut r = 0;
        while r + ROW_BLOCK <= rows {
            let (o0, rest) = out[r * n..(r + ROW_BLOCK) * n].split_at_mut(n);
            let (o1, rest) = rest.split_at_mut(n);
            let (o2, o3) = rest.split_at_mut(n);
            let a0 = &a[r * k..(r + 1) * k];
            let a1 = &a[(r + 1) * k..(r + 2) * k];
            let a2 = &a[(r + 2) * k..(r + 3) * k];
            let a3 = &a[(r + 3) * k..(r + 4) * k];
            for kk in kb..kend {
                let brow = b.row(kk);
                let (x0, x1, x2, x3) = (a0[kk], a1[kk], a2[kk], a3[kk]);
                for (j, &bv) in brow.iter().enumerate() {
                    o0[j] += x0 * bv;
                    o1[j] += x1 * bv;
                    o2[j] += x2 * bv;
                    o3[j] += x3 * bv;
                }
            }
            r += ROW_BLOCK;
        }
        for r in r..rows {
            let arow = &a[r * k..(r + 1) * k];
            let orow = &mut out[r * n..(r + 1) * n];
            for kk in kb..kend {
                axpy(orow, arow[kk], b.row(kk));
            }
        }
    }
}

/// `a · b` with the blocked kernel.
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    matmul_with(a, b, Parallelism::Single)
}

pub fn matmul_with<T: Real>(a: &Matrix<T>, b: &Matrix<T>, par: Parallelism) -> Result<Matrix<T>> {
    if a.cols() != b.rows() {
        return Err(Error::shape(format!(
            "matmul inner dimensions differ: {}x{} · {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Matrix::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return Ok(out);
    }
    match par {
        Parallelism::Single => gemm_block(a.as_slice(), k, b, out.as_mut_slice()),
        Parallelism::Rayon => {
            out.as_mut_slice()
                .par_chunks_mut(PAR_ROWS * n)
                .zip(a.as_slice().par_chunks(PAR_ROWS * k))
                .for_each(|(o, ablk)| gemm_block(ablk, k, b, o));
        }
    }
    Ok(out)
}

/// `aᵀ · b`, accumulated as a sum of row outer products.
pub fn matmul_tn<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.rows() != b.rows() {
        return Err(Error::shape(format!(
            "matmul_tn row counts differ: {} vs {}",
            a.rows(),
            b.rows()
        )));
    }
    let mut out = Matrix::zeros(a.cols(), b.cols());
    for r in 0..a.rows() {
        let brow = b.row(r);
        for (p, &av) in a.row(r).iter().enumerate() {
            if av != T::zero() {
                axpy(out.row_mut(p), av, brow);
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ`.
pub fn matmul_nt<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols() != b.cols() {
        return Err(Error::shape(format!(
            "matmul_nt column counts differ: {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for r in 0..a.rows() {
        let arow = a.row(r);
        for c in 0..b.rows() {
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(b.row(c)) {
                acc += x * y;
            }
            out.set(r, c, acc);
        }
    }
    Ok(out)
}

/// Concatenates the selected rows of up to `stack_factor` images per data
/// matrix. `masks` holds either one set shared by all images or one per
/// image. Returns one matrix per group of images; `row_origin[i].image` is
/// the index into `inputs`.
pub fn stack_batch<T: Real>(
    inputs: &[Tensor3<T>],
    masks: &[SpatialIndexSet],
    geom: ConvGeometry,
    stack_factor: usize,
) -> Result<Vec<DataMatrix<T>>> {
    if inputs.is_empty() {
        return Err(Error::invalid("stack_batch needs at least one image"));
    }
    if stack_factor == 0 {
        return Err(Error::invalid("stack factor must be at least 1"));
    }
    if masks.len() != 1 && masks.len() != inputs.len() {
        return Err(Error::invalid(format!(
            "{} masks for {} images",
            masks.len(),
            inputs.len()
        )));
    }
    let dims = inputs[0].dims();
    if let Some(bad) = inputs.iter().position(|u| u.dims() != dims) {
        return Err(Error::shape(format!(
            "image {bad} has dims {:?}, expected {dims:?}",
            inputs[bad].dims()
        )));
    }
    let (xp, yp) = geom.output_dims(dims.0, dims.1)?;
    let cols = geom.kernel * geom.kernel * dims.2;
    let mask_of = |i: usize| if masks.len() == 1 { &masks[0] } else { &masks[i] };

    let mut groups = Vec::new();
    for start in (0..inputs.len()).step_by(stack_factor) {
        let end = (start + stack_factor).min(inputs.len());
        let rows: usize = (start..end).map(|i| mask_of(i).len()).sum();
        let mut matrix = Matrix::zeros(rows, cols);
        let mut row_origin = Vec::with_capacity(rows);
        let mut offset = 0;
        for (i, u) in inputs.iter().enumerate().take(end).skip(start) {
            let mask = mask_of(i);
            check_positions(mask.positions(), xp, yp)?;
            let n = mask.len();
            fill_rows(
                u,
                geom,
                mask.positions(),
                &mut matrix.as_mut_slice()[offset * cols..(offset + n) * cols],
            );
            row_origin.extend(mask.iter().map(|pos| RowOrigin { image: i, pos }));
            offset += n;
        }
        groups.push(DataMatrix { matrix, row_origin });
    }
    Ok(groups)
}

/// Splits the product of a stacked data matrix back into per-image blocks,
/// keyed by the image index recorded in `row_origin`.
pub fn unstack<T: Real>(product: &Matrix<T>, row_origin: &[RowOrigin]) -> Result<Vec<(usize, Matrix<T>)>> {
    if product.rows() != row_origin.len() {
        return Err(Error::shape(format!(
            "product has {} rows but {} origins",
            product.rows(),
            row_origin.len()
        )));
    }
    let n = product.cols();
    let mut out: Vec<(usize, Vec<T>)> = Vec::new();
    for (r, o) in row_origin.iter().enumerate() {
        match out.last_mut() {
            Some((img, buf)) if *img == o.image => buf.extend_from_slice(product.row(r)),
            _ => out.push((o.image, product.row(r).to_vec())),
        }
    }
    out.into_iter()
        .map(|(img, buf)| {
            let rows = buf.len() / n.max(1);
            Matrix::from_vec(rows, n, buf).map(|m| (img, m))
        })
        .collect()
}

/// Multiplications of one lowered convolution: `d²·S·T·N`.
pub fn count_mults(d: usize, s: usize, t: usize, n: usize) -> u64 {
    (d as u64) * (d as u64) * (s as u64) * (t as u64) * (n as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{direct_conv, KernelTensor};

    fn naive<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = T::zero();
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    fn pseudo(i: usize) -> f64 {
        ((i as f64 * 0.618_033_988_7).fract() - 0.5) * 2.0
    }

    #[test]
    fn single_patch_is_flattened_input() {
        let u = Tensor3::from_fn(3, 3, 1, |x, y, _| (x * 3 + y) as f32);
        let dm = im2row(&u, 3, &SpatialIndexSet::full(1, 1)).unwrap();
        assert_eq!(dm.rows(), 1);
        assert_eq!(dm.matrix.as_slice(), u.as_slice());
    }

    #[test]
    fn one_position_one_row() {
        let u = Tensor3::from_fn(8, 7, 2, |x, y, s| (x + y + s) as f32);
        let set = SpatialIndexSet::new(6, 5, vec![Pos::new(1, 1)]).unwrap();
        let dm = im2row(&u, 3, &set).unwrap();
        assert_eq!((dm.rows(), dm.cols()), (1, 18));
    }

    #[test]
    fn out_of_bounds_position_is_named() {
        let u = Tensor3::<f32>::zeros(5, 5, 1);
        let set = SpatialIndexSet::new(4, 4, vec![Pos::new(4, 2)]).unwrap();
        match im2row(&u, 3, &set) {
            Err(Error::OutOfBounds { x: 4, y: 2, xp: 3, yp: 3 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn full_lowering_reproduces_direct_conv() {
        let u = Tensor3::from_fn(5, 5, 2, |x, y, s| pseudo(x * 11 + y * 3 + s) as f32);
        let k = KernelTensor::from_fn(3, 2, 3, |i, j, s, t| pseudo(i * 7 + j * 5 + s * 2 + t + 100) as f32);
        let dm = im2row(&u, 3, &SpatialIndexSet::full(3, 3)).unwrap();
        let prod = matmul(&dm.matrix, &k.to_matrix()).unwrap();
        let v = direct_conv(&u, &k).unwrap();
        for (r, o) in dm.row_origin.iter().enumerate() {
            for t in 0..3 {
                let want = v.get(o.pos.x - 1, o.pos.y - 1, t);
                assert!((prod.get(r, t) - want).abs() <= 1e-5 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn matmul_matches_naive_and_scalar_loop() {
        let a = Matrix::from_vec(1, 9, (0..9).map(|i| i as f64 - 4.0).collect()).unwrap();
        let b = Matrix::from_vec(9, 1, (0..9).map(|i| 0.5 * i as f64).collect()).unwrap();
        let dot: f64 = (0..9).map(|i| (i as f64 - 4.0) * 0.5 * i as f64).sum();
        assert_eq!(matmul(&a, &b).unwrap().get(0, 0), dot);

        for &(m, k, n) in &[(1, 1, 1), (7, 300, 5), (13, 17, 33), (64, 513, 9), (130, 20, 70)] {
            let a = Matrix::from_vec(m, k, (0..m * k).map(|i| pseudo(i) as f32).collect()).unwrap();
            let b = Matrix::from_vec(k, n, (0..k * n).map(|i| pseudo(i + 99) as f32).collect()).unwrap();
            let want = naive(&a, &b);
            for par in [Parallelism::Single, Parallelism::Rayon] {
                let got = matmul_with(&a, &b, par).unwrap();
                for (g, w) in got.as_slice().iter().zip(want.as_slice()) {
                    assert!((g - w).abs() <= 1e-5 * w.abs().max(1.0), "{g} vs {w}");
                }
            }
        }
    }

    #[test]
    fn zero_row_times_anything_is_zero() {
        let a = Matrix::<f32>::zeros(1, 4);
        let b = Matrix::from_vec(4, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().as_slice(), &[0.0, 0.0]);
        assert!(matmul(&b, &b).is_err());
    }

    #[test]
    fn transposed_products() {
        let a = Matrix::from_vec(3, 4, (0..12).map(pseudo).collect()).unwrap();
        let b = Matrix::from_vec(3, 2, (0..6).map(|i| pseudo(i + 40)).collect()).unwrap();
        let tn = matmul_tn(&a, &b).unwrap();
        let want = naive(&a.transpose(), &b);
        for (g, w) in tn.as_slice().iter().zip(want.as_slice()) {
            assert!((g - w).abs() < 1e-12);
        }
        let c = Matrix::from_vec(5, 4, (0..20).map(|i| pseudo(i + 7)).collect()).unwrap();
        let nt = matmul_nt(&a, &c).unwrap();
        let want = naive(&a, &c.transpose());
        for (g, w) in nt.as_slice().iter().zip(want.as_slice()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn stacking() {
        let imgs: Vec<Tensor3<f32>> = (0..3)
            .map(|n| Tensor3::from_fn(6, 6, 2, |x, y, s| pseudo(n * 100 + x * 13 + y * 3 + s) as f32))
            .collect();
        let geom = ConvGeometry::unit(3);
        let full = SpatialIndexSet::full(4, 4);
        let half = SpatialIndexSet::new(4, 4, full.positions()[..8].to_vec()).unwrap();

        // factor 1: identical to per-image lowering
        let single = stack_batch(&imgs, std::slice::from_ref(&half), geom, 1).unwrap();
        assert_eq!(single.len(), 3);
        for (n, dm) in single.iter().enumerate() {
            assert_eq!(dm.matrix, im2row(&imgs[n], 3, &half).unwrap().matrix);
        }

        // two half-masked images fill one full-size matrix
        let two = stack_batch(&imgs[..2], std::slice::from_ref(&half), geom, 2).unwrap();
        assert_eq!(two.len(), 1);
        assert_eq!(two[0].rows(), 16);

        // product of the stacked matrix unstacks into per-image products
        let k = KernelTensor::from_fn(3, 2, 4, |i, j, s, t| pseudo(i + j * 3 + s * 9 + t * 27 + 5) as f32);
        let km = k.to_matrix();
        let prod = matmul(&two[0].matrix, &km).unwrap();
        let parts = unstack(&prod, &two[0].row_origin).unwrap();
        assert_eq!(parts.len(), 2);
        for (img, block) in parts {
            let want = matmul(&im2row(&imgs[img], 3, &half).unwrap().matrix, &km).unwrap();
            assert_eq!(block, want);
        }

        assert!(stack_batch::<f32>(&[], &[half], geom, 2).is_err());
    }

    #[test]
    fn mult_count() {
        assert_eq!(count_mults(3, 2, 4, 16), 1152);
        assert_eq!(count_mults(3, 2, 4, 8), 576);
    }

    #[test]
    fn col2im_is_adjoint_of_im2row() {
        // <im2row(u), g> == <u, col2im(g)>
        let geom = ConvGeometry {
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let u = Tensor3::from_fn(7, 6, 2, |x, y, s| pseudo(x * 17 + y * 5 + s));
        let (xp, yp) = geom.output_dims(7, 6).unwrap();
        let pos = SpatialIndexSet::full(xp, yp);
        let m = im2row_with(&u, geom, pos.positions()).unwrap();
        let g = Matrix::from_vec(m.rows(), m.cols(), (0..m.rows() * m.cols()).map(|i| pseudo(i + 3)).collect())
            .unwrap();
        let lhs: f64 = m.as_slice().iter().zip(g.as_slice()).map(|(a, b)| a * b).sum();
        let back = col2im(&g, geom, pos.positions(), u.dims()).unwrap();
        let rhs: f64 = u.as_slice().iter().zip(back.as_slice()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
