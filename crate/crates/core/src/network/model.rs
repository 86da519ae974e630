use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io;
use crate::lowering::{matmul, matmul_nt, matmul_tn, ConvGeometry, PatchSource};
use crate::masks::{grid_mask, pooling_mask, top_n_by_weight, uniform_mask, MaskKind, PerforationMask, PoolGeometry, TieBreak, WeightField};
use crate::perfconv::{CompactActivation, Interpolation, PerforatedConvLayer, Storage};
use crate::rate::Rate;
use crate::seed;
use crate::tensor::{KernelTensor, Matrix, Pos, Real, Tensor3};

use super::data::Dataset;
use super::spec::{LayerSpec, NetworkSpec, Shape};

/// Output of one layer.
#[derive(Clone, Debug, PartialEq)]
pub enum Activation<T = f32> {
    Dense(Tensor3<T>),
    /// Exact values of a perforated layer plus the interpolation map.
    Compact(CompactActivation<T>),
    Flat(Vec<T>),
}

impl<T: Real> Activation<T> {
    pub fn densify(&self) -> Result<Tensor3<T>> {
        match self {
            Activation::Dense(t) => Ok(t.clone()),
            Activation::Compact(c) => Ok(c.densify()),
            Activation::Flat(_) => Err(Error::shape("vector activation has no spatial layout")),
        }
    }

    /// Values in `(x, y, s)` order for spatial activations.
    pub fn flatten(&self) -> Vec<T> {
        match self {
            Activation::Dense(t) => t.as_slice().to_vec(),
            Activation::Compact(c) => c.densify().into_vec(),
            Activation::Flat(v) => v.clone(),
        }
    }

    /// Bytes actually stored.
    pub fn bytes(&self) -> usize {
        match self {
            Activation::Dense(t) => t.len() * T::BYTES,
            Activation::Compact(c) => c.bytes(),
            Activation::Flat(v) => v.len() * T::BYTES,
        }
    }

    fn source(&self) -> Result<&dyn PatchSource<T>> {
        match self {
            Activation::Dense(t) => Ok(t),
            Activation::Compact(c) => Ok(c),
            Activation::Flat(_) => Err(Error::shape("layer needs a spatial input")),
        }
    }
}

/// Parameters of one layer.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams<T = f32> {
    None,
    Conv { kernel: KernelTensor<T>, bias: Option<Vec<T>> },
    /// `w` is `inputs × outputs`.
    Fc { w: Matrix<T>, b: Vec<T> },
}

/// Parameters (or gradients) of every layer, aligned with the spec.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T = f32> {
    pub layers: Vec<LayerParams<T>>,
}

impl<T: Real> Params<T> {
    pub fn zeros_like(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                LayerParams::None => LayerParams::None,
                LayerParams::Conv { kernel, bias } => LayerParams::Conv {
                    kernel: KernelTensor::zeros(kernel.size(), kernel.in_channels(), kernel.out_channels()),
                    bias: bias.as_ref().map(|b| vec![T::zero(); b.len()]),
                },
                LayerParams::Fc { w, b } => LayerParams::Fc {
                    w: Matrix::zeros(w.rows(), w.cols()),
                    b: vec![T::zero(); b.len()],
                },
            })
            .collect();
        Params { layers }
    }

    pub fn slices(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                LayerParams::None => {}
                LayerParams::Conv { kernel, bias } => {
                    out.push(kernel.as_slice());
                    if let Some(b) = bias {
                        out.push(b.as_slice());
                    }
                }
                LayerParams::Fc { w, b } => {
                    out.push(w.as_slice());
                    out.push(b.as_slice());
                }
            }
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                LayerParams::None => {}
                LayerParams::Conv { kernel, bias } => {
                    out.push(kernel.as_mut_slice());
                    if let Some(b) = bias {
                        out.push(b.as_mut_slice());
                    }
                }
                LayerParams::Fc { w, b } => {
                    out.push(w.as_mut_slice());
                    out.push(b.as_mut_slice());
                }
            }
        }
        out
    }

    pub fn count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// `self += a · other`.
    pub fn add_scaled(&mut self, other: &Params<T>, a: T) {
        for (d, s) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, &y) in d.iter_mut().zip(s) {
                *x += a * y;
            }
        }
    }

    pub fn scale(&mut self, a: T) {
        for d in self.slices_mut() {
            d.iter_mut().for_each(|x| *x = *x * a);
        }
    }

    pub fn max_abs(&self) -> T {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                LayerParams::None => LayerParams::None,
                LayerParams::Conv { kernel, bias } => LayerParams::Conv {
                    kernel: kernel.cast(),
                    bias: bias.as_ref().map(|b| b.iter().map(|&v| U::from_f64_lossy(v.to_f64_lossy())).collect()),
                },
                LayerParams::Fc { w, b } => LayerParams::Fc {
                    w: Matrix::from_vec(
                        w.rows(),
                        w.cols(),
                        w.as_slice().iter().map(|&v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
                    )
                    .expect("same shape"),
                    b: b.iter().map(|&v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
                },
            })
            .collect();
        Params { layers }
    }
}

impl Params<f32> {
    /// Weight bundle: for each layer with parameters, its `u32` index, the
    /// weights as a `PCNW` record and the bias as a `1 × 1 × 1 × T` record
    /// (`T = 0` when the layer has no bias). Fully-connected weights use
    /// `d = 1`, `S = inputs`, `T = outputs`.
    pub fn write_bundle(&self, w: &mut impl Write) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            let (weights, bias) = match l {
                LayerParams::None => continue,
                LayerParams::Conv { kernel, bias } => (kernel.clone(), bias.clone().unwrap_or_default()),
                LayerParams::Fc { w: m, b } => (
                    KernelTensor::from_vec(1, m.rows(), m.cols(), m.as_slice().to_vec())?,
                    b.clone(),
                ),
            };
            w.write_all(&(i as u32).to_le_bytes())?;
            io::write_kernel(w, &weights)?;
            io::write_kernel(w, &KernelTensor::from_vec(1, 1, bias.len(), bias)?)?;
        }
        Ok(())
    }

    /// Reads a bundle into the layout of `spec`; every parametrized layer
    /// must be present with matching shapes.
    pub fn read_bundle(spec: &NetworkSpec, r: &mut impl Read) -> Result<Self> {
        const WHAT: &str = "weight bundle";
        let expected = Params::<f32>::shapes_of(spec)?;
        let mut layers = vec![LayerParams::None; spec.layers.len()];
        loop {
            let mut idx = [0u8; 4];
            match r.read(&mut idx[..1])? {
                0 => break,
                _ => r.read_exact(&mut idx[1..])?,
            }
            let i = u32::from_le_bytes(idx) as usize;
            let weights = io::read_kernel(r)?;
            let bias = io::read_kernel(r)?;
            let slot = layers
                .get_mut(i)
                .ok_or_else(|| Error::format(WHAT, format!("layer index {i} out of range")))?;
            if !matches!(slot, LayerParams::None) {
                return Err(Error::format(WHAT, format!("layer {i} appears twice")));
            }
            let bias_vec = bias.as_slice().to_vec();
            *slot = match &spec.layers[i] {
                LayerSpec::Conv(c) => LayerParams::Conv {
                    kernel: weights,
                    bias: if c.bias { Some(bias_vec) } else { None },
                },
                LayerSpec::Fc { .. } => LayerParams::Fc {
                    w: Matrix::from_vec(weights.in_channels(), weights.out_channels(), weights.as_slice().to_vec())?,
                    b: bias_vec,
                },
                other => return Err(Error::format(WHAT, format!("layer {i} ({}) has no parameters", other.name()))),
            };
        }
        let params = Params { layers };
        if params.shape_signature() != expected {
            return Err(Error::format(WHAT, "parameter shapes do not match the network spec"));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_bundle(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(spec: &NetworkSpec, path: &Path) -> Result<Self> {
        Params::read_bundle(spec, &mut fs::read(path)?.as_slice())
    }
}

type Signature = Vec<Option<(Vec<usize>, usize)>>;

impl<T: Real> Params<T> {
    fn shape_signature(&self) -> Signature {
        self.layers
            .iter()
            .map(|l| match l {
                LayerParams::None => None,
                LayerParams::Conv { kernel, bias } => Some((
                    vec![kernel.size(), kernel.in_channels(), kernel.out_channels()],
                    bias.as_ref().map_or(0, |b| b.len()),
                )),
                LayerParams::Fc { w, b } => Some((vec![w.rows(), w.cols()], b.len())),
            })
            .collect()
    }

    fn shapes_of(spec: &NetworkSpec) -> Result<Signature> {
        let shapes = spec.shapes()?;
        Ok(spec
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| match l {
                LayerSpec::Conv(c) => Some((
                    vec![c.kernel, c.in_channels / c.groups, c.out_channels],
                    if c.bias { c.out_channels } else { 0 },
                )),
                LayerSpec::Fc { outputs } => Some((vec![shapes[i].len(), *outputs], *outputs)),
                _ => None,
            })
            .collect())
    }
}

#[derive(Clone, Debug)]
enum Layer<T> {
    Conv(Box<PerforatedConvLayer<T>>),
    Relu,
    MaxPool(PoolGeometry),
    AvgPool(PoolGeometry),
    Gap,
    Fc { w: Matrix<T>, b: Vec<T> },
}

/// Retained state of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardState<T = f32> {
    /// Input followed by every layer's output.
    pub acts: Vec<Activation<T>>,
    /// Class probabilities.
    pub probs: Vec<T>,
    propagated: Vec<bool>,
    argmax: Vec<Vec<u32>>,
}

impl<T: Real> ForwardState<T> {
    pub fn logits(&self) -> &[T] {
        match self.acts.last() {
            Some(Activation::Flat(v)) => v,
            _ => &[],
        }
    }

    pub fn predicted(&self) -> usize {
        argmax(&self.probs)
    }

    /// Negative log-likelihood of `label`.
    pub fn loss(&self, label: usize) -> T {
        -self.probs[label].max(T::min_positive_value()).ln()
    }
}

fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Gradients of one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients<T = f32> {
    pub params: Params<T>,
    /// `∂L/∂V` at the exact positions of every convolution, in the order
    /// of [`Network::exact_positions`].
    pub d_exact: Vec<Option<Matrix<T>>>,
    pub d_input: Option<Tensor3<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    /// Mean negative log-likelihood.
    pub loss: f64,
    /// Fraction misclassified.
    pub error: f64,
}

enum Grad<T> {
    Dense(Tensor3<T>),
    Compact(Matrix<T>),
    Flat(Vec<T>),
}

/// A trainable CNN whose convolutions may be perforated.
#[derive(Clone, Debug)]
pub struct Network<T = f32> {
    spec: NetworkSpec,
    shapes: Vec<Shape>,
    layers: Vec<Layer<T>>,
    storage: Storage,
    tie: TieBreak,
}

impl<T: Real> Network<T> {
    pub fn from_params(spec: NetworkSpec, params: Params<T>) -> Result<Self> {
        let shapes = spec.shapes()?;
        if params.shape_signature() != Params::<T>::shapes_of(&spec)? {
            return Err(Error::shape("parameter shapes do not match the network spec"));
        }
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, (ls, lp)) in spec.layers.iter().zip(params.layers).enumerate() {
            let layer = match (ls, lp) {
                (LayerSpec::Conv(c), LayerParams::Conv { kernel, bias }) => {
                    if c.groups != 1 {
                        return Err(Error::invalid("grouped convolutions are counted but cannot be executed").at_layer(i));
                    }
                    let Shape::Spatial { x, y, .. } = shapes[i] else {
                        unreachable!("validated by shapes()")
                    };
                    let (xp, yp) = c.geometry().output_dims(x, y)?;
                    let l = PerforatedConvLayer::with_geometry(
                        kernel,
                        bias,
                        c.geometry(),
                        (x, y),
                        PerforationMask::full(xp, yp),
                        Interpolation::Nearest,
                        TieBreak::LowestIndex,
                    )
                    .map_err(|e| e.at_layer(i))?;
                    Layer::Conv(Box::new(l))
                }
                (LayerSpec::Relu, _) => Layer::Relu,
                (LayerSpec::MaxPool(p), _) => Layer::MaxPool(*p),
                (LayerSpec::AvgPool(p), _) => Layer::AvgPool(*p),
                (LayerSpec::Gap, _) => Layer::Gap,
                (LayerSpec::Fc { .. }, LayerParams::Fc { w, b }) => Layer::Fc { w, b },
                _ => unreachable!("signature checked"),
            };
            layers.push(layer);
        }
        Ok(Network {
            spec,
            shapes,
            layers,
            storage: Storage::Compact,
            tie: TieBreak::LowestIndex,
        })
    }

    /// He-normal weights and zero biases from the `init` seed stream.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let shapes = spec.shapes()?;
        let mut rng = seed::component_rng(seed, "init");
        let mut normal = |fan_in: usize, len: usize| -> Vec<T> {
            let std = (2.0 / fan_in.max(1) as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("positive std");
            (0..len).map(|_| T::from_f64_lossy(dist.sample(&mut rng))).collect()
        };
        let layers = spec
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| -> Result<LayerParams<T>> {
                Ok(match l {
                    LayerSpec::Conv(c) => {
                        let s = c.in_channels / c.groups;
                        let fan = c.kernel * c.kernel * s;
                        LayerParams::Conv {
                            kernel: KernelTensor::from_vec(c.kernel, s, c.out_channels, normal(fan, fan * c.out_channels))?,
                            bias: c.bias.then(|| vec![T::zero(); c.out_channels]),
                        }
                    }
                    LayerSpec::Fc { outputs } => {
                        let n = shapes[i].len();
                        LayerParams::Fc {
                            w: Matrix::from_vec(n, *outputs, normal(n, n * outputs))?,
                            b: vec![T::zero(); *outputs],
                        }
                    }
                    _ => LayerParams::None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Network::from_params(spec, Params { layers })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Input shape of every layer followed by the output shape.
    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn storage(&self) -> Storage {
        self.storage
    }

    pub fn set_storage(&mut self, storage: Storage) {
        self.storage = storage;
    }

    pub fn tie_break(&self) -> TieBreak {
        self.tie
    }

    /// Policy for neighbor-map ties used by subsequent mask changes.
    pub fn set_tie_break(&mut self, tie: TieBreak) {
        self.tie = tie;
    }

    pub fn conv(&self, layer: usize) -> Option<&PerforatedConvLayer<T>> {
        match self.layers.get(layer) {
            Some(Layer::Conv(c)) => Some(c),
            _ => None,
        }
    }

    fn conv_checked(&self, layer: usize) -> Result<&PerforatedConvLayer<T>> {
        self.conv(layer)
            .ok_or_else(|| Error::invalid(format!("layer {layer} is not a convolution")))
    }

    pub fn mask(&self, layer: usize) -> Option<&PerforationMask> {
        self.conv(layer).map(|c| c.mask())
    }

    /// Builds a mask of `kind` for convolution `layer` at `rate`. Pooling
    /// masks use the pooling that follows the layer; impact masks need the
    /// averaged impact field.
    pub fn make_mask(
        &self,
        layer: usize,
        kind: MaskKind,
        rate: Rate,
        seed: u64,
        impact: Option<&WeightField>,
    ) -> Result<PerforationMask> {
        let c = self.conv_checked(layer)?;
        let (xp, yp) = c.mask().dims();
        if rate.is_zero() {
            return Ok(PerforationMask::full(xp, yp));
        }
        let n = rate.kept(xp * yp);
        let mask = match kind {
            MaskKind::Full => PerforationMask::full(xp, yp),
            MaskKind::Uniform => uniform_mask(xp, yp, n, seed)?,
            MaskKind::Grid => grid_mask(xp, yp, n, seed)?,
            MaskKind::Pooling => {
                let pool = self
                    .spec
                    .following_pool(layer)
                    .ok_or_else(|| Error::invalid(format!("layer {layer} is not followed by pooling")))?;
                pooling_mask(xp, yp, n, pool, seed)?
            }
            MaskKind::Impact => {
                let field = impact.ok_or_else(|| Error::invalid("impact masks need an impact field"))?;
                if field.dims() != (xp, yp) {
                    return Err(Error::shape(format!(
                        "impact field is {:?}, layer output is {:?}",
                        field.dims(),
                        (xp, yp)
                    )));
                }
                top_n_by_weight(field, n, seed, MaskKind::Impact)?
            }
            MaskKind::Custom => return Err(Error::invalid("custom masks are set directly")),
        };
        Ok(mask)
    }

    pub fn set_mask(&mut self, layer: usize, mask: PerforationMask, interp: Interpolation) -> Result<()> {
        let tie = self.tie;
        match self.layers.get_mut(layer) {
            Some(Layer::Conv(c)) => c.set_mask(mask, interp, tie).map_err(|e| e.at_layer(layer)),
            _ => Err(Error::invalid(format!("layer {layer} is not a convolution"))),
        }
    }

    pub fn perforate(
        &mut self,
        layer: usize,
        kind: MaskKind,
        rate: Rate,
        seed: u64,
        interp: Interpolation,
        impact: Option<&WeightField>,
    ) -> Result<()> {
        let mask = self.make_mask(layer, kind, rate, seed, impact)?;
        self.set_mask(layer, mask, interp)
    }

    /// Restores every convolution to Ω.
    pub fn clear_perforation(&mut self) {
        for l in 0..self.layers.len() {
            if let Some(c) = self.conv(l) {
                let (xp, yp) = c.mask().dims();
                let interp = c.interpolation();
                self.set_mask(l, PerforationMask::full(xp, yp), interp).expect("full mask fits");
            }
        }
    }

    pub fn params(&self) -> Params<T> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => LayerParams::Conv {
                    kernel: c.kernel().clone(),
                    bias: c.bias().map(|b| b.to_vec()),
                },
                Layer::Fc { w, b } => LayerParams::Fc { w: w.clone(), b: b.clone() },
                _ => LayerParams::None,
            })
            .collect();
        Params { layers }
    }

    /// `params += a · delta`.
    pub fn update(&mut self, delta: &Params<T>, a: T) -> Result<()> {
        if delta.shape_signature() != Params::<T>::shapes_of(&self.spec)? {
            return Err(Error::shape("update shapes do not match the network"));
        }
        for (l, d) in self.layers.iter_mut().zip(&delta.layers) {
            match (l, d) {
                (Layer::Conv(c), LayerParams::Conv { kernel, bias }) => c.update_parameters(|k, b| {
                    for (x, &y) in k.as_mut_slice().iter_mut().zip(kernel.as_slice()) {
                        *x += a * y;
                    }
                    if let (Some(b), Some(db)) = (b, bias) {
                        for (x, &y) in b.iter_mut().zip(db) {
                            *x += a * y;
                        }
                    }
                }),
                (Layer::Fc { w, b }, LayerParams::Fc { w: dw, b: db }) => {
                    for (x, &y) in w.as_mut_slice().iter_mut().zip(dw.as_slice()) {
                        *x += a * y;
                    }
                    for (x, &y) in b.iter_mut().zip(db) {
                        *x += a * y;
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn set_params(&mut self, params: &Params<T>) -> Result<()> {
        let spec = self.spec.clone();
        let masks: Vec<Option<(PerforationMask, Interpolation)>> = (0..self.layers.len())
            .map(|l| self.conv(l).map(|c| (c.mask().clone(), c.interpolation())))
            .collect();
        let (storage, tie) = (self.storage, self.tie);
        *self = Network::from_params(spec, params.clone())?;
        self.storage = storage;
        self.tie = tie;
        for (l, m) in masks.into_iter().enumerate() {
            if let Some((mask, interp)) = m {
                self.set_mask(l, mask, interp)?;
            }
        }
        Ok(())
    }

    /// Positions of the rows of `d_exact[layer]`: the layer's own mask, or
    /// the upstream mask when a compact input was carried through a
    /// pointwise convolution.
    pub fn exact_positions<'a>(&'a self, state: &'a ForwardState<T>, layer: usize) -> Result<&'a [Pos]> {
        let c = self.conv_checked(layer)?;
        Ok(match &state.acts[layer + 1] {
            Activation::Compact(ca) => ca.map.exact_positions(),
            _ => c.mask().positions(),
        })
    }

    /// Exact output values of convolution `layer`, rows aligned with
    /// [`exact_positions`](Self::exact_positions).
    pub fn exact_values(&self, state: &ForwardState<T>, layer: usize) -> Result<Matrix<T>> {
        let pos = self.exact_positions(state, layer)?;
        match &state.acts[layer + 1] {
            Activation::Compact(ca) => Ok(ca.values.clone()),
            Activation::Dense(t) => {
                let s = t.channels();
                let mut m = Matrix::zeros(pos.len(), s);
                for (k, p) in pos.iter().enumerate() {
                    m.row_mut(k).copy_from_slice(t.pixel(p.x - 1, p.y - 1));
                }
                Ok(m)
            }
            Activation::Flat(_) => Err(Error::shape("convolution produced a vector")),
        }
    }

    fn can_propagate(&self, c: &PerforatedConvLayer<T>, input: &CompactActivation<T>) -> bool {
        let g = c.geometry();
        self.storage == Storage::Compact
            && g == (ConvGeometry { kernel: 1, stride: 1, pad: 0 })
            && c.mask().is_full()
            && input.map.is_pointwise_copy()
    }

    pub fn forward(&self, image: &Tensor3<T>) -> Result<ForwardState<T>> {
        self.forward_with_hook(image, &mut |_, _| {})
    }

    /// Forward pass that lets `hook(layer, values)` modify the exact
    /// values of each convolution before they are stored.
    pub fn forward_with_hook(
        &self,
        image: &Tensor3<T>,
        hook: &mut dyn FnMut(usize, &mut Matrix<T>),
    ) -> Result<ForwardState<T>> {
        let Shape::Spatial { x, y, s } = self.shapes[0] else {
            unreachable!("inputs are spatial")
        };
        if image.dims() != (x, y, s) {
            return Err(Error::shape(format!("network expects {x}x{y}x{s} input, got {:?}", image.dims())));
        }
        let n = self.layers.len();
        let mut acts = Vec::with_capacity(n + 1);
        acts.push(Activation::Dense(image.clone()));
        let mut propagated = vec![false; n];
        let mut argmaxes = vec![Vec::new(); n];
        for (i, layer) in self.layers.iter().enumerate() {
            let out = self
                .layer_forward(i, layer, &acts[i], &mut propagated[i], &mut argmaxes[i], hook)
                .map_err(|e| e.at_layer(i))?;
            acts.push(out);
        }
        let probs = match acts.last() {
            Some(Activation::Flat(v)) => softmax(v),
            _ => return Err(Error::shape("network must end in a vector")),
        };
        Ok(ForwardState {
            acts,
            probs,
            propagated,
            argmax: argmaxes,
        })
    }

    fn layer_forward(
        &self,
        i: usize,
        layer: &Layer<T>,
        input: &Activation<T>,
        propagated: &mut bool,
        argmax_out: &mut Vec<u32>,
        hook: &mut dyn FnMut(usize, &mut Matrix<T>),
    ) -> Result<Activation<T>> {
        Ok(match layer {
            Layer::Conv(c) => {
                if let Activation::Compact(ca) = input {
                    if self.can_propagate(c, ca) {
                        *propagated = true;
                        let mut v = matmul(&ca.values, c.kernel_matrix())?;
                        add_bias(&mut v, c.bias());
                        hook(i, &mut v);
                        return Ok(Activation::Compact(CompactActivation::new(v, Arc::clone(&ca.map))?));
                    }
                }
                let mut v = c.forward_compact(input.source()?)?;
                hook(i, &mut v);
                let (xp, yp, t) = c.output_dims();
                if c.mask().is_full() {
                    Activation::Dense(Tensor3::from_vec(xp, yp, t, v.into_vec())?)
                } else {
                    let ca = CompactActivation::new(v, Arc::clone(c.interp_map()))?;
                    match self.storage {
                        Storage::Compact => Activation::Compact(ca),
                        Storage::Dense => Activation::Dense(ca.densify()),
                    }
                }
            }
            Layer::Relu => match input {
                Activation::Dense(t) => Activation::Dense(relu_tensor(t)),
                Activation::Compact(ca) if ca.map.is_copy_or_zero() => {
                    let mut v = ca.values.clone();
                    v.as_mut_slice().iter_mut().for_each(|x| *x = x.max(T::zero()));
                    Activation::Compact(CompactActivation::new(v, Arc::clone(&ca.map))?)
                }
                Activation::Compact(ca) => Activation::Dense(relu_tensor(&ca.densify())),
                Activation::Flat(v) => Activation::Flat(v.iter().map(|x| x.max(T::zero())).collect()),
            },
            Layer::MaxPool(p) => {
                let (t, am) = max_pool(input.source()?, *p)?;
                *argmax_out = am;
                Activation::Dense(t)
            }
            Layer::AvgPool(p) => Activation::Dense(avg_pool(input.source()?, *p)?),
            Layer::Gap => {
                let src = input.source()?;
                let (x, y, s) = src.dims();
                let mut acc = vec![T::zero(); s];
                let mut px = vec![T::zero(); s];
                for a in 0..x {
                    for b in 0..y {
                        src.write_pixel(a, b, &mut px);
                        for (o, &v) in acc.iter_mut().zip(&px) {
                            *o += v;
                        }
                    }
                }
                let inv = T::one() / T::from_usize(x * y).expect("small count");
                Activation::Flat(acc.into_iter().map(|v| v * inv).collect())
            }
            Layer::Fc { w, b } => {
                let xin = input.flatten();
                let mut out = b.clone();
                for (k, &xv) in xin.iter().enumerate() {
                    if xv == T::zero() {
                        continue;
                    }
                    for (o, &wv) in out.iter_mut().zip(w.row(k)) {
                        *o += xv * wv;
                    }
                }
                Activation::Flat(out)
            }
        })
    }

    /// Backward pass of the negative log-likelihood of `label`.
    pub fn backward(&self, state: &ForwardState<T>, label: usize, need_input_grad: bool) -> Result<Gradients<T>> {
        let mut g = state.probs.clone();
        if label >= g.len() {
            return Err(Error::invalid(format!("label {label} outside {} classes", g.len())));
        }
        g[label] -= T::one();
        self.backward_from(state, Grad::Flat(g), need_input_grad)
    }

    /// Backward pass from an arbitrary gradient on the logits.
    pub fn backward_logits(&self, state: &ForwardState<T>, d_logits: Vec<T>, need_input_grad: bool) -> Result<Gradients<T>> {
        self.backward_from(state, Grad::Flat(d_logits), need_input_grad)
    }

    fn backward_from(&self, state: &ForwardState<T>, mut g: Grad<T>, need_input_grad: bool) -> Result<Gradients<T>> {
        let n = self.layers.len();
        if state.acts.len() != n + 1 {
            return Err(Error::invalid("forward state does not belong to this network"));
        }
        let mut params = vec![LayerParams::None; n];
        let mut d_exact = vec![None; n];
        for i in (0..n).rev() {
            let need = i > 0 || need_input_grad;
            let (gi, pi, ei) = self.layer_backward(i, state, g, need).map_err(|e| e.at_layer(i))?;
            params[i] = pi;
            d_exact[i] = ei;
            g = gi;
            if !need {
                break;
            }
        }
        let d_input = if need_input_grad {
            match g {
                Grad::Dense(t) => Some(t),
                _ => return Err(Error::shape("input gradient is not dense")),
            }
        } else {
            None
        };
        Ok(Gradients {
            params: Params { layers: params },
            d_exact,
            d_input,
        })
    }

    #[allow(clippy::type_complexity)]
    fn layer_backward(
        &self,
        i: usize,
        state: &ForwardState<T>,
        g: Grad<T>,
        need_input: bool,
    ) -> Result<(Grad<T>, LayerParams<T>, Option<Matrix<T>>)> {
        let input = &state.acts[i];
        let output = &state.acts[i + 1];
        let empty = || Grad::Flat(Vec::new());
        Ok(match &self.layers[i] {
            Layer::Conv(c) => {
                if state.propagated[i] {
                    let (Activation::Compact(ca), Grad::Compact(gm)) = (input, g) else {
                        return Err(Error::invalid("propagated layer lost its compact state"));
                    };
                    let dk = matmul_tn(&ca.values, &gm)?;
                    let kernel = KernelTensor::from_matrix(1, ca.values.cols(), dk)?;
                    let bias = c.bias().map(|_| column_sums(&gm));
                    let gin = if need_input { Grad::Compact(matmul_nt(&gm, c.kernel_matrix())?) } else { empty() };
                    (gin, LayerParams::Conv { kernel, bias }, Some(gm))
                } else {
                    let d_exact = match (output, g) {
                        (_, Grad::Compact(m)) => m,
                        (_, Grad::Dense(t)) if c.mask().is_full() => {
                            let (x, y, s) = t.dims();
                            Matrix::from_vec(x * y, s, t.into_vec())?
                        }
                        (_, Grad::Dense(t)) => c.interp_map().adjoint(&t)?,
                        (_, Grad::Flat(_)) => return Err(Error::shape("convolution received a vector gradient")),
                    };
                    let lg = c.backward_compact(input.source()?, d_exact, need_input)?;
                    let gin = match lg.d_input {
                        Some(t) => fold(input, t)?,
                        None => empty(),
                    };
                    (
                        gin,
                        LayerParams::Conv {
                            kernel: lg.d_kernel,
                            bias: lg.d_bias,
                        },
                        Some(lg.d_exact),
                    )
                }
            }
            Layer::Relu => {
                let gin = match (output, g) {
                    (Activation::Compact(out), Grad::Compact(mut gm)) => {
                        for (gv, &ov) in gm.as_mut_slice().iter_mut().zip(out.values.as_slice()) {
                            if ov <= T::zero() {
                                *gv = T::zero();
                            }
                        }
                        Grad::Compact(gm)
                    }
                    (Activation::Dense(out), Grad::Dense(mut gt)) => {
                        for (gv, &ov) in gt.as_mut_slice().iter_mut().zip(out.as_slice()) {
                            if ov <= T::zero() {
                                *gv = T::zero();
                            }
                        }
                        fold(input, gt)?
                    }
                    (Activation::Flat(out), Grad::Flat(mut gv)) => {
                        for (x, &ov) in gv.iter_mut().zip(out) {
                            if ov <= T::zero() {
                                *x = T::zero();
                            }
                        }
                        Grad::Flat(gv)
                    }
                    _ => return Err(Error::invalid("relu gradient does not match its output")),
                };
                (gin, LayerParams::None, None)
            }
            Layer::MaxPool(_) => {
                let Grad::Dense(gt) = g else {
                    return Err(Error::shape("pooling received a non-dense gradient"));
                };
                let (x, y, s) = input.source()?.dims();
                let mut d = Tensor3::zeros(x, y, s);
                for (&src, &gv) in state.argmax[i].iter().zip(gt.as_slice()) {
                    d.as_mut_slice()[src as usize] += gv;
                }
                (fold(input, d)?, LayerParams::None, None)
            }
            Layer::AvgPool(p) => {
                let Grad::Dense(gt) = g else {
                    return Err(Error::shape("pooling received a non-dense gradient"));
                };
                let d = avg_pool_backward(&gt, input.source()?.dims(), *p);
                (fold(input, d)?, LayerParams::None, None)
            }
            Layer::Gap => {
                let Grad::Flat(gv) = g else {
                    return Err(Error::shape("global pooling received a spatial gradient"));
                };
                let (x, y, s) = input.source()?.dims();
                let inv = T::one() / T::from_usize(x * y).expect("small count");
                let d = Tensor3::from_fn(x, y, s, |_, _, c| gv[c] * inv);
                (fold(input, d)?, LayerParams::None, None)
            }
            Layer::Fc { w, .. } => {
                let Grad::Flat(gv) = g else {
                    return Err(Error::shape("fc received a spatial gradient"));
                };
                let xin = input.flatten();
                let mut dw = Matrix::zeros(w.rows(), w.cols());
                for (k, &xv) in xin.iter().enumerate() {
                    if xv == T::zero() {
                        continue;
                    }
                    for (o, &gg) in dw.row_mut(k).iter_mut().zip(&gv) {
                        *o = xv * gg;
                    }
                }
                let gin = if need_input {
                    let dx: Vec<T> = (0..w.rows())
                        .map(|k| w.row(k).iter().zip(&gv).fold(T::zero(), |a, (&wv, &gg)| a + wv * gg))
                        .collect();
                    match input {
                        Activation::Flat(_) => Grad::Flat(dx),
                        other => {
                            let (x, y, s) = other.source()?.dims();
                            fold(other, Tensor3::from_vec(x, y, s, dx)?)?
                        }
                    }
                } else {
                    empty()
                };
                (gin, LayerParams::Fc { w: dw, b: gv }, None)
            }
        })
    }

    /// Batch metrics (before any update) and mean parameter gradient;
    /// samples are processed in parallel and reduced in order.
    pub fn loss_and_grad(&self, images: &[Tensor3<T>], labels: &[usize]) -> Result<(Metrics, Params<T>)> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(Error::invalid("batch must be non-empty with one label per image"));
        }
        let per: Vec<Result<(T, bool, Params<T>)>> = images
            .par_iter()
            .zip(labels.par_iter())
            .map(|(img, &lab)| {
                let st = self.forward(img)?;
                let loss = st.loss(lab);
                Ok((loss, st.predicted() != lab, self.backward(&st, lab, false)?.params))
            })
            .collect();
        let mut total = 0.0;
        let mut wrong = 0usize;
        let mut acc: Option<Params<T>> = None;
        for r in per {
            let (l, w, p) = r?;
            total += l.to_f64_lossy();
            wrong += w as usize;
            match &mut acc {
                None => acc = Some(p),
                Some(a) => a.add_scaled(&p, T::one()),
            }
        }
        let mut grads = acc.expect("non-empty batch");
        let inv = T::one() / T::from_usize(images.len()).expect("batch size");
        grads.scale(inv);
        let n = images.len() as f64;
        Ok((
            Metrics {
                loss: total / n,
                error: wrong as f64 / n,
            },
            grads,
        ))
    }
}

impl Network<f32> {
    /// Mean NLL and error rate over `data`.
    pub fn evaluate(&self, data: &Dataset) -> Result<Metrics> {
        if data.is_empty() {
            return Err(Error::invalid("cannot evaluate on an empty dataset"));
        }
        let per: Vec<Result<(f64, bool)>> = data
            .images
            .par_iter()
            .zip(data.labels.par_iter())
            .map(|(img, &lab)| {
                let st = self.forward(img)?;
                if lab >= st.probs.len() {
                    return Err(Error::invalid(format!("label {lab} outside {} classes", st.probs.len())));
                }
                Ok((st.loss(lab) as f64, st.predicted() != lab))
            })
            .collect();
        let mut loss = 0.0;
        let mut wrong = 0usize;
        for r in per {
            let (l, w) = r?;
            loss += l;
            wrong += w as usize;
        }
        let n = data.len() as f64;
        Ok(Metrics {
            loss: loss / n,
            error: wrong as f64 / n,
        })
    }
}

fn add_bias<T: Real>(m: &mut Matrix<T>, bias: Option<&[T]>) {
    if let Some(b) = bias {
        for r in 0..m.rows() {
            for (v, &bv) in m.row_mut(r).iter_mut().zip(b) {
                *v += bv;
            }
        }
    }
}

fn column_sums<T: Real>(m: &Matrix<T>) -> Vec<T> {
    let mut out = vec![T::zero(); m.cols()];
    for r in 0..m.rows() {
        for (o, &v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

fn relu_tensor<T: Real>(t: &Tensor3<T>) -> Tensor3<T> {
    let mut out = t.clone();
    out.as_mut_slice().iter_mut().for_each(|x| *x = x.max(T::zero()));
    out
}

fn softmax<T: Real>(v: &[T]) -> Vec<T> {
    let m = v.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let e: Vec<T> = v.iter().map(|&x| (x - m).exp()).collect();
    let s = e.iter().fold(T::zero(), |a, &b| a + b);
    e.into_iter().map(|x| x / s).collect()
}

/// Brings a dense gradient to the representation of `act`.
fn fold<T: Real>(act: &Activation<T>, d: Tensor3<T>) -> Result<Grad<T>> {
    Ok(match act {
        Activation::Dense(_) => Grad::Dense(d),
        Activation::Compact(c) => Grad::Compact(c.map.adjoint(&d)?),
        Activation::Flat(_) => Grad::Flat(d.into_vec()),
    })
}

fn pool_window(out: usize, p: PoolGeometry, len: usize) -> std::ops::Range<usize> {
    let start = (out * p.stride) as isize - p.pad as isize;
    let lo = start.max(0) as usize;
    let hi = ((start + p.size as isize).max(0) as usize).min(len);
    lo..hi
}

/// Max pooling over the in-bounds part of each window, recording the flat
/// input index of each maximum (first one on ties).
fn max_pool<T: Real>(src: &dyn PatchSource<T>, p: PoolGeometry) -> Result<(Tensor3<T>, Vec<u32>)> {
    let (x, y, s) = src.dims();
    let (xo, yo) = (p.output_len(x)?, p.output_len(y)?);
    let mut out = Tensor3::zeros(xo, yo, s);
    let mut arg = vec![0u32; xo * yo * s];
    // cache densified rows of the input once
    let mut dense = vec![T::zero(); x * y * s];
    for a in 0..x {
        for b in 0..y {
            src.write_pixel(a, b, &mut dense[(a * y + b) * s..(a * y + b + 1) * s]);
        }
    }
    for ox in 0..xo {
        let wx = pool_window(ox, p, x);
        for oy in 0..yo {
            let wy = pool_window(oy, p, y);
            let base = (ox * yo + oy) * s;
            for c in 0..s {
                let mut best = T::neg_infinity();
                let mut bi = 0usize;
                for a in wx.clone() {
                    for b in wy.clone() {
                        let idx = (a * y + b) * s + c;
                        if dense[idx] > best {
                            best = dense[idx];
                            bi = idx;
                        }
                    }
                }
                out.as_mut_slice()[base + c] = best;
                arg[base + c] = bi as u32;
            }
        }
    }
    Ok((out, arg))
}

/// Average pooling dividing by the full window area (padding counts as
/// zeros).
fn avg_pool<T: Real>(src: &dyn PatchSource<T>, p: PoolGeometry) -> Result<Tensor3<T>> {
    let (x, y, s) = src.dims();
    let (xo, yo) = (p.output_len(x)?, p.output_len(y)?);
    let inv = T::one() / T::from_usize(p.size * p.size).expect("small window");
    let mut out = Tensor3::zeros(xo, yo, s);
    let mut px = vec![T::zero(); s];
    for ox in 0..xo {
        for oy in 0..yo {
            for a in pool_window(ox, p, x) {
                for b in pool_window(oy, p, y) {
                    src.write_pixel(a, b, &mut px);
                    for (o, &v) in out.pixel_mut(ox, oy).iter_mut().zip(&px) {
                        *o += v;
                    }
                }
            }
            out.pixel_mut(ox, oy).iter_mut().for_each(|v| *v = *v * inv);
        }
    }
    Ok(out)
}

fn avg_pool_backward<T: Real>(g: &Tensor3<T>, dims: (usize, usize, usize), p: PoolGeometry) -> Tensor3<T> {
    let (x, y, s) = dims;
    let (xo, yo, _) = g.dims();
    let inv = T::one() / T::from_usize(p.size * p.size).expect("small window");
    let mut d = Tensor3::zeros(x, y, s);
    for ox in 0..xo {
        for oy in 0..yo {
            let gp: Vec<T> = g.pixel(ox, oy).iter().map(|&v| v * inv).collect();
            for a in pool_window(ox, p, x) {
                for b in pool_window(oy, p, y) {
                    for (o, &v) in d.pixel_mut(a, b).iter_mut().zip(&gp) {
                        *o += v;
                    }
                }
            }
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetworkSpec {
        "input x=6 y=6 s=2\nconv d=3 t=3 pad=1\nrelu\nconv d=1 t=4\nrelu\nmaxpool k=3 stride=2\ngap\nfc t=3\n"
            .parse()
            .unwrap()
    }

    #[test]
    fn zero_weights_give_uniform_probabilities() {
        let spec = tiny();
        let net = Network::<f64>::init(spec, 1).unwrap();
        let mut p = net.params();
        p.scale(0.0);
        let net = Network::from_params(net.spec().clone(), p).unwrap();
        let img = Tensor3::from_fn(6, 6, 2, |a, b, c| (a + b * c) as f64);
        let st = net.forward(&img).unwrap();
        assert!((st.loss(1) - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bundle_round_trip() {
        let net = Network::<f32>::init(tiny(), 3).unwrap();
        let mut a = Vec::new();
        net.params().write_bundle(&mut a).unwrap();
        let back = Params::read_bundle(net.spec(), &mut a.as_slice()).unwrap();
        assert_eq!(back, net.params());
        let mut b = Vec::new();
        back.write_bundle(&mut b).unwrap();
        assert_eq!(a, b);
        let other: NetworkSpec = "input x=6 y=6 s=2\nconv d=3 t=5 pad=1\ngap\nfc t=3\n".parse().unwrap();
        assert!(Params::read_bundle(&other, &mut a.as_slice()).is_err());
    }

    #[test]
    fn storage_mode_does_not_change_results() {
        let mut net = Network::<f64>::init(tiny(), 4).unwrap();
        net.perforate(0, MaskKind::Uniform, Rate::new(1, 2).unwrap(), 9, Interpolation::Nearest, None)
            .unwrap();
        let img = Tensor3::from_fn(6, 6, 2, |a, b, c| ((a * 7 + b * 3 + c) % 5) as f64 - 2.0);
        let sc = net.forward(&img).unwrap();
        assert!(matches!(sc.acts[3], Activation::Compact(_)), "1x1 conv keeps compact values");
        let gc = net.backward(&sc, 2, true).unwrap();
        net.set_storage(Storage::Dense);
        let sd = net.forward(&img).unwrap();
        assert!(matches!(sd.acts[3], Activation::Dense(_)));
        let gd = net.backward(&sd, 2, true).unwrap();
        for (a, b) in sc.probs.iter().zip(&sd.probs) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in gc.params.slices().iter().zip(gd.params.slices()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-10);
            }
        }
        let (ia, ib) = (gc.d_input.unwrap(), gd.d_input.unwrap());
        for (x, y) in ia.as_slice().iter().zip(ib.as_slice()) {
            assert!((x - y).abs() < 1e-10);
        }
        assert!(sc.acts[1].bytes() * 2 == sd.acts[1].bytes());
    }

    #[test]
    fn grouped_conv_is_rejected_for_execution() {
        let spec: NetworkSpec = "input x=6 y=6 s=2\nconv d=3 t=4 groups=2\ngap\n".parse().unwrap();
        assert!(Network::<f32>::init(spec, 0).is_err());
    }
}
