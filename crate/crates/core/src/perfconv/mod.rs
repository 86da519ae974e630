//! The perforated convolutional layer.
//!
//! Only the `N = |I|` exact output positions are computed, by lowering the
//! selected patches and multiplying by the kernel matrix. The remaining
//! positions are reconstructed through an [`InterpMap`]. In compact storage
//! the layer output stays `N × T` and consumers read it through the map.

mod delaunay;
mod interp;

use std::sync::Arc;

pub use delaunay::Triangulation;
pub use interp::{CompactActivation, InterpMap, Interpolation};

use crate::error::{Error, Result};
use crate::lowering::{
    col2im, count_mults, im2row_with, matmul, matmul_nt, matmul_tn, matmul_with, stack_batch, unstack,
    ConvGeometry, Parallelism, PatchSource,
};
use crate::masks::{grid_mask, neighbor_map, NeighborMap, PerforationMask, TieBreak};
use crate::tensor::{KernelTensor, Matrix, Pos, Real, SpatialIndexSet, Tensor3};

/// How a perforated layer keeps its output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Storage {
    #[default]
    Compact,
    Dense,
}

impl std::str::FromStr for Storage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "compact" => Ok(Storage::Compact),
            "dense" => Ok(Storage::Dense),
            other => Err(Error::format("storage mode", format!("unknown mode `{other}`"))),
        }
    }
}

/// Output of [`PerforatedConvLayer::forward`].
#[derive(Clone, Debug, PartialEq)]
pub enum LayerOutput<T = f32> {
    Compact(CompactActivation<T>),
    Dense(Tensor3<T>),
}

impl<T: Real> LayerOutput<T> {
    pub fn densify(&self) -> Tensor3<T> {
        match self {
            LayerOutput::Compact(c) => c.densify(),
            LayerOutput::Dense(t) => t.clone(),
        }
    }

    pub fn bytes(&self) -> usize {
        match self {
            LayerOutput::Compact(c) => c.bytes(),
            LayerOutput::Dense(t) => t.len() * T::BYTES,
        }
    }
}

/// Gradients from [`PerforatedConvLayer::backward`].
#[derive(Clone, Debug)]
pub struct LayerGrads<T = f32> {
    /// `∂L/∂V` at the exact positions, `N × T` in mask order.
    pub d_exact: Matrix<T>,
    pub d_kernel: KernelTensor<T>,
    pub d_bias: Option<Vec<T>>,
    /// Absent when not requested.
    pub d_input: Option<Tensor3<T>>,
}

#[derive(Clone, Debug)]
pub struct PerforatedConvLayer<T = f32> {
    kernel: KernelTensor<T>,
    kernel_matrix: Matrix<T>,
    bias: Option<Vec<T>>,
    geom: ConvGeometry,
    input: (usize, usize),
    mask: PerforationMask,
    neighbors: NeighborMap,
    map: Arc<InterpMap>,
    storage: Storage,
}

impl<T: Real> PerforatedConvLayer<T> {
    /// Unit-stride, unpadded, bias-free layer on an `X × Y` input.
    pub fn new(
        kernel: KernelTensor<T>,
        input: (usize, usize),
        mask: PerforationMask,
        interpolation: Interpolation,
    ) -> Result<Self> {
        Self::with_geometry(
            kernel,
            None,
            ConvGeometry::unit(0),
            input,
            mask,
            interpolation,
            TieBreak::LowestIndex,
        )
    }

    /// General constructor. A zero `geom.kernel` is replaced by the kernel
    /// size.
    pub fn with_geometry(
        kernel: KernelTensor<T>,
        bias: Option<Vec<T>>,
        mut geom: ConvGeometry,
        input: (usize, usize),
        mask: PerforationMask,
        interpolation: Interpolation,
        tie: TieBreak,
    ) -> Result<Self> {
        if geom.kernel == 0 {
            geom.kernel = kernel.size();
        }
        if geom.kernel != kernel.size() {
            return Err(Error::shape(format!(
                "geometry kernel {} differs from kernel size {}",
                geom.kernel,
                kernel.size()
            )));
        }
        let out = geom.output_dims(input.0, input.1)?;
        if mask.dims() != out {
            return Err(Error::shape(format!(
                "mask is {:?} but the layer output is {out:?}",
                mask.dims()
            )));
        }
        if let Some(b) = &bias {
            if b.len() != kernel.out_channels() {
                return Err(Error::shape(format!(
                    "bias has {} entries for {} output channels",
                    b.len(),
                    kernel.out_channels()
                )));
            }
        }
        let neighbors = neighbor_map(&mask, tie)?;
        let map = Arc::new(InterpMap::build(&mask, &neighbors, interpolation)?);
        Ok(PerforatedConvLayer {
            kernel_matrix: kernel.to_matrix(),
            kernel,
            bias,
            geom,
            input,
            mask,
            neighbors,
            map,
            storage: Storage::Compact,
        })
    }

    /// A standard (unperforated) layer: mask = Ω.
    pub fn standard(kernel: KernelTensor<T>, input: (usize, usize)) -> Result<Self> {
        let d = kernel.size();
        let out = ConvGeometry::unit(d).output_dims(input.0, input.1)?;
        Self::new(kernel, input, PerforationMask::full(out.0, out.1), Interpolation::Nearest)
    }

    /// Replaces the mask, rebuilding the neighbor and interpolation maps.
    pub fn set_mask(&mut self, mask: PerforationMask, interpolation: Interpolation, tie: TieBreak) -> Result<()> {
        if mask.dims() != self.mask.dims() {
            return Err(Error::shape(format!(
                "mask is {:?} but the layer output is {:?}",
                mask.dims(),
                self.mask.dims()
            )));
        }
        let neighbors = neighbor_map(&mask, tie)?;
        self.map = Arc::new(InterpMap::build(&mask, &neighbors, interpolation)?);
        self.neighbors = neighbors;
        self.mask = mask;
        Ok(())
    }

    /// Mutates kernel and bias in place.
    pub fn update_parameters(&mut self, f: impl FnOnce(&mut KernelTensor<T>, Option<&mut Vec<T>>)) {
        f(&mut self.kernel, self.bias.as_mut());
        self.kernel_matrix = self.kernel.to_matrix();
    }

    pub fn kernel_matrix(&self) -> &Matrix<T> {
        &self.kernel_matrix
    }

    pub fn input_dims(&self) -> (usize, usize) {
        self.input
    }

    pub fn with_storage(mut self, storage: Storage) -> Self {
        self.storage = storage;
        self
    }

    pub fn kernel(&self) -> &KernelTensor<T> {
        &self.kernel
    }

    pub fn bias(&self) -> Option<&[T]> {
        self.bias.as_deref()
    }

    pub fn geometry(&self) -> ConvGeometry {
        self.geom
    }

    pub fn mask(&self) -> &PerforationMask {
        &self.mask
    }

    pub fn neighbors(&self) -> &NeighborMap {
        &self.neighbors
    }

    pub fn interp_map(&self) -> &Arc<InterpMap> {
        &self.map
    }

    pub fn interpolation(&self) -> Interpolation {
        self.map.strategy()
    }

    pub fn storage(&self) -> Storage {
        self.storage
    }

    pub fn output_dims(&self) -> (usize, usize, usize) {
        let (xp, yp) = self.mask.dims();
        (xp, yp, self.kernel.out_channels())
    }

    /// `d²·S·T·N`.
    pub fn mults(&self) -> u64 {
        count_mults(
            self.kernel.size(),
            self.kernel.in_channels(),
            self.kernel.out_channels(),
            self.mask.len(),
        )
    }

    /// Bytes of the stored output in the current storage mode.
    pub fn activation_bytes(&self) -> usize {
        let (xp, yp, t) = self.output_dims();
        match self.storage {
            Storage::Compact => self.mask.len() * t * T::BYTES,
            Storage::Dense => xp * yp * t * T::BYTES,
        }
    }

    fn check_input<S: PatchSource<T> + ?Sized>(&self, u: &S) -> Result<()> {
        let (x, y, s) = u.dims();
        if (x, y) != self.input || s != self.kernel.in_channels() {
            return Err(Error::shape(format!(
                "layer expects {}x{}x{} input, got {x}x{y}x{s}",
                self.input.0,
                self.input.1,
                self.kernel.in_channels()
            )));
        }
        Ok(())
    }

    fn add_bias(&self, m: &mut Matrix<T>) {
        if let Some(b) = &self.bias {
            for r in 0..m.rows() {
                for (v, &bv) in m.row_mut(r).iter_mut().zip(b) {
                    *v += bv;
                }
            }
        }
    }

    /// Data matrix for the exact positions.
    pub fn lower<S: PatchSource<T> + ?Sized>(&self, u: &S) -> Result<Matrix<T>> {
        self.check_input(u)?;
        im2row_with(u, self.geom, self.mask.positions())
    }

    /// Exact values `V(x, y, t)` for `(x, y) ∈ I`, as an `N × T` matrix in
    /// mask order.
    pub fn forward_compact<S: PatchSource<T> + ?Sized>(&self, u: &S) -> Result<Matrix<T>> {
        let m = self.lower(u)?;
        let mut v = matmul(&m, &self.kernel_matrix)?;
        self.add_bias(&mut v);
        Ok(v)
    }

    pub fn forward<S: PatchSource<T> + ?Sized>(&self, u: &S) -> Result<LayerOutput<T>> {
        let compact = CompactActivation::new(self.forward_compact(u)?, Arc::clone(&self.map))?;
        Ok(match self.storage {
            Storage::Compact => LayerOutput::Compact(compact),
            Storage::Dense => LayerOutput::Dense(compact.densify()),
        })
    }

    /// Dense `V̂`.
    pub fn forward_dense<S: PatchSource<T> + ?Sized>(&self, u: &S) -> Result<Tensor3<T>> {
        self.map.apply(&self.forward_compact(u)?)
    }

    /// Exact values for a batch, stacking `stack_factor` images per GEMM so
    /// the data matrix keeps roughly its unperforated height.
    pub fn forward_batch(&self, inputs: &[Tensor3<T>], stack_factor: usize) -> Result<Vec<Matrix<T>>> {
        self.forward_batch_with(inputs, stack_factor, Parallelism::Single)
    }

    pub fn forward_batch_with(
        &self,
        inputs: &[Tensor3<T>],
        stack_factor: usize,
        par: Parallelism,
    ) -> Result<Vec<Matrix<T>>> {
        for u in inputs {
            self.check_input(u)?;
        }
        let groups = stack_batch(inputs, std::slice::from_ref(self.mask.set()), self.geom, stack_factor)?;
        let mut out = Vec::with_capacity(inputs.len());
        for g in groups {
            let prod = matmul_with(&g.matrix, &self.kernel_matrix, par)?;
            for (_, mut block) in unstack(&prod, &g.row_origin)? {
                self.add_bias(&mut block);
                out.push(block);
            }
        }
        Ok(out)
    }

    /// Backward pass from a gradient on the dense interpolated output.
    pub fn backward<S: PatchSource<T> + ?Sized>(&self, u: &S, grad_out: &Tensor3<T>) -> Result<LayerGrads<T>> {
        let (xp, yp, t) = self.output_dims();
        if grad_out.dims() != (xp, yp, t) {
            return Err(Error::shape(format!(
                "output gradient is {:?}, layer output is {:?}",
                grad_out.dims(),
                (xp, yp, t)
            )));
        }
        let d_exact = self.map.adjoint(grad_out)?;
        self.backward_compact(u, d_exact, true)
    }

    /// Backward pass from a gradient already folded onto the exact values.
    pub fn backward_compact<S: PatchSource<T> + ?Sized>(
        &self,
        u: &S,
        d_exact: Matrix<T>,
        need_input: bool,
    ) -> Result<LayerGrads<T>> {
        if d_exact.rows() != self.mask.len() || d_exact.cols() != self.kernel.out_channels() {
            return Err(Error::shape(format!(
                "exact-value gradient is {}x{}, expected {}x{}",
                d_exact.rows(),
                d_exact.cols(),
                self.mask.len(),
                self.kernel.out_channels()
            )));
        }
        let m = self.lower(u)?;
        let dk = matmul_tn(&m, &d_exact)?;
        let d_kernel = KernelTensor::from_matrix(self.kernel.size(), self.kernel.in_channels(), dk)?;
        let d_bias = self.bias.as_ref().map(|_| {
            let mut b = vec![T::zero(); d_exact.cols()];
            for r in 0..d_exact.rows() {
                for (acc, &g) in b.iter_mut().zip(d_exact.row(r)) {
                    *acc += g;
                }
            }
            b
        });
        let d_input = if need_input {
            let dm = matmul_nt(&d_exact, &self.kernel_matrix)?;
            Some(col2im(&dm, self.geom, self.mask.positions(), u.dims())?)
        } else {
            None
        };
        Ok(LayerGrads {
            d_exact,
            d_kernel,
            d_bias,
            d_input,
        })
    }
}

fn reshape_rows<T: Real>(m: &Matrix<T>, x: usize, y: usize) -> Result<Tensor3<T>> {
    Tensor3::from_vec(x, y, m.cols(), m.as_slice().to_vec())
}

/// Stride baseline: evaluates every `stride`-th output in both directions and
/// omits the rest, giving a `⌈X′/stride⌉ × ⌈Y′/stride⌉` output.
pub fn strided_conv<T: Real>(u: &Tensor3<T>, k: &KernelTensor<T>, stride: usize) -> Result<Tensor3<T>> {
    if stride == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    if u.channels() != k.in_channels() {
        return Err(Error::shape("input and kernel channel counts differ"));
    }
    let geom = ConvGeometry::unit(k.size());
    let (xp, yp) = geom.output_dims(u.height(), u.width())?;
    let xs: Vec<usize> = (1..=xp).step_by(stride).collect();
    let ys: Vec<usize> = (1..=yp).step_by(stride).collect();
    let pos: Vec<Pos> = xs.iter().flat_map(|&x| ys.iter().map(move |&y| Pos::new(x, y))).collect();
    let m = im2row_with(u, geom, &pos)?;
    reshape_rows(&matmul(&m, &k.to_matrix())?, xs.len(), ys.len())
}

/// Fractional-stride baseline: evaluates on the non-regular grid chosen by
/// the grid-mask scheme for `N = keep_rate·|Ω|` and omits the rest, giving a
/// `Kx × Ky` output.
pub fn fractional_stride_conv<T: Real>(
    u: &Tensor3<T>,
    k: &KernelTensor<T>,
    keep_rate: f64,
    seed: u64,
) -> Result<Tensor3<T>> {
    if !(keep_rate > 0.0 && keep_rate <= 1.0) {
        return Err(Error::invalid(format!("keep rate {keep_rate} outside (0, 1]")));
    }
    if u.channels() != k.in_channels() {
        return Err(Error::shape("input and kernel channel counts differ"));
    }
    let geom = ConvGeometry::unit(k.size());
    let (xp, yp) = geom.output_dims(u.height(), u.width())?;
    let n = ((keep_rate * (xp * yp) as f64).round() as usize).clamp(1, xp * yp);
    let mask = grid_mask(xp, yp, n, seed)?;
    let xs = mask.positions().iter().map(|p| p.x).collect::<std::collections::BTreeSet<_>>().len();
    let ys = mask.len() / xs;
    let m = im2row_with(u, geom, mask.positions())?;
    reshape_rows(&matmul(&m, &k.to_matrix())?, xs, ys)
}

/// Dense standard convolution via full lowering, with optional bias.
pub fn conv_forward<T: Real>(
    u: &Tensor3<T>,
    k: &KernelTensor<T>,
    bias: Option<&[T]>,
    geom: ConvGeometry,
) -> Result<Tensor3<T>> {
    let (xp, yp) = geom.output_dims(u.height(), u.width())?;
    let all = SpatialIndexSet::full(xp, yp);
    let m = im2row_with(u, geom, all.positions())?;
    let mut v = matmul(&m, &k.to_matrix())?;
    if let Some(b) = bias {
        for r in 0..v.rows() {
            for (x, &bv) in v.row_mut(r).iter_mut().zip(b) {
                *x += bv;
            }
        }
    }
    reshape_rows(&v, xp, yp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{uniform_mask, MaskKind};
    use crate::tensor::direct_conv;

    fn pseudo(i: usize) -> f64 {
        ((i as f64 * 0.754_877_666).fract() - 0.5) * 2.0
    }

    fn rand_input(x: usize, y: usize, s: usize, salt: usize) -> Tensor3<f64> {
        Tensor3::from_fn(x, y, s, |a, b, c| pseudo(salt + a * 131 + b * 17 + c * 3))
    }

    fn rand_kernel(d: usize, s: usize, t: usize, salt: usize) -> KernelTensor<f64> {
        KernelTensor::from_fn(d, s, t, |i, j, c, o| pseudo(salt + i * 71 + j * 13 + c * 5 + o))
    }

    #[test]
    fn full_mask_equals_direct_conv() {
        let u = rand_input(7, 6, 3, 1);
        let k = rand_kernel(3, 3, 4, 2);
        let layer = PerforatedConvLayer::standard(k.clone(), (7, 6)).unwrap();
        let got = layer.forward_dense(&u).unwrap();
        let want = direct_conv(&u, &k).unwrap();
        for (g, w) in got.as_slice().iter().zip(want.as_slice()) {
            assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0));
        }
    }

    #[test]
    fn single_exact_position_is_constant() {
        let u = rand_input(6, 6, 2, 3);
        let k = rand_kernel(3, 2, 3, 4);
        let mask = PerforationMask::from_set(
            SpatialIndexSet::new(4, 4, vec![Pos::new(1, 1)]).unwrap(),
            MaskKind::Custom,
            0,
        );
        let layer = PerforatedConvLayer::new(k.clone(), (6, 6), mask, Interpolation::Nearest).unwrap();
        let v = layer.forward_dense(&u).unwrap();
        let exact = direct_conv(&u, &k).unwrap();
        for x in 0..4 {
            for y in 0..4 {
                for t in 0..3 {
                    assert_eq!(v.get(x, y, t), exact.get(0, 0, t));
                }
            }
        }
    }

    #[test]
    fn single_position_backward_sums_everything() {
        let u = rand_input(6, 6, 2, 5);
        let k = rand_kernel(3, 2, 3, 6);
        let mask = PerforationMask::from_set(
            SpatialIndexSet::new(4, 4, vec![Pos::new(1, 1)]).unwrap(),
            MaskKind::Custom,
            0,
        );
        let layer = PerforatedConvLayer::new(k, (6, 6), mask, Interpolation::Nearest).unwrap();
        let g = rand_input(4, 4, 3, 9);
        let grads = layer.backward(&u, &g).unwrap();
        for t in 0..3 {
            let sum: f64 = (0..4).flat_map(|x| (0..4).map(move |y| (x, y))).map(|(x, y)| g.get(x, y, t)).sum();
            assert!((grads.d_exact.get(0, t) - sum).abs() < 1e-12);
        }
    }

    #[test]
    fn compact_and_dense_storage_agree() {
        let u = rand_input(9, 9, 2, 7).cast::<f32>();
        let k = rand_kernel(3, 2, 5, 8).cast::<f32>();
        let mask = uniform_mask(7, 7, 12, 1).unwrap();
        let layer = PerforatedConvLayer::new(k, (9, 9), mask, Interpolation::Nearest).unwrap();
        let compact = layer.forward(&u).unwrap();
        assert!(matches!(compact, LayerOutput::Compact(_)));
        assert_eq!(compact.bytes(), 12 * 5 * 4);
        let dense_layer = layer.clone().with_storage(Storage::Dense);
        let dense = dense_layer.forward(&u).unwrap();
        assert_eq!(dense.bytes(), 49 * 5 * 4);
        assert_eq!(compact.densify(), dense.densify());
    }

    #[test]
    fn batch_stacking_matches_per_image() {
        let k = rand_kernel(3, 2, 4, 11).cast::<f32>();
        let mask = uniform_mask(6, 6, 9, 2).unwrap();
        let layer = PerforatedConvLayer::new(k, (8, 8), mask, Interpolation::Nearest).unwrap();
        let imgs: Vec<_> = (0..5).map(|i| rand_input(8, 8, 2, 100 * i).cast::<f32>()).collect();
        let stacked = layer.forward_batch(&imgs, 4).unwrap();
        assert_eq!(stacked.len(), 5);
        for (img, got) in imgs.iter().zip(&stacked) {
            assert_eq!(got, &layer.forward_compact(img).unwrap());
        }
    }

    #[test]
    fn stride_baselines() {
        let u = rand_input(6, 6, 2, 13);
        let k = rand_kernel(3, 2, 3, 14);
        let full = direct_conv(&u, &k).unwrap();
        let s1 = strided_conv(&u, &k, 1).unwrap();
        for (a, b) in s1.as_slice().iter().zip(full.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        let s2 = strided_conv(&u, &k, 2).unwrap();
        assert_eq!(s2.dims(), (2, 2, 3));
        for (i, x) in [0usize, 2].iter().enumerate() {
            for (j, y) in [0usize, 2].iter().enumerate() {
                for t in 0..3 {
                    assert!((s2.get(i, j, t) - full.get(*x, *y, t)).abs() < 1e-12);
                }
            }
        }
        let f1 = fractional_stride_conv(&u, &k, 1.0, 77).unwrap();
        assert_eq!(f1.dims(), full.dims());
        for (a, b) in f1.as_slice().iter().zip(full.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        let fh = fractional_stride_conv(&rand_input(12, 10, 2, 1), &k, 0.3, 5).unwrap();
        assert!(fh.height() < 10 && fh.width() < 8);
        assert!(strided_conv(&u, &k, 0).is_err());
        assert!(fractional_stride_conv(&u, &k, 0.0, 1).is_err());
    }

    #[test]
    fn shape_errors() {
        let k = rand_kernel(3, 2, 3, 1);
        let layer = PerforatedConvLayer::standard(k.clone(), (6, 6)).unwrap();
        assert!(layer.forward_compact(&rand_input(6, 6, 3, 0)).is_err());
        assert!(layer.forward_compact(&rand_input(7, 6, 2, 0)).is_err());
        let wrong = PerforationMask::full(3, 3);
        assert!(PerforatedConvLayer::new(k, (6, 6), wrong, Interpolation::Nearest).is_err());
    }
}
