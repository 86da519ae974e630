//! Line-oriented network descriptions.
//!
//! ```text
//! input x=32 y=32 s=3
//! conv d=5 t=32 stride=1 pad=2 perf=grid r=1/2 seed=7 interp=nearest
//! relu
//! maxpool k=3 stride=2 pad=1
//! avgpool k=3 stride=2
//! gap
//! fc t=10
//! ```
//!
//! Layer indices are 0-based and count every line after `input`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::lowering::ConvGeometry;
use crate::masks::{MaskKind, PoolGeometry};
use crate::perfconv::Interpolation;
use crate::rate::Rate;

const WHAT: &str = "network spec";

/// Perforation attached to a convolution in the spec text.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PerfAttachment {
    pub kind: MaskKind,
    pub rate: Rate,
    pub seed: u64,
    pub interp: Option<Interpolation>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub pad: usize,
    /// Channel groups. Only counted, never executed.
    pub groups: usize,
    pub bias: bool,
    pub perf: Option<PerfAttachment>,
}

impl ConvSpec {
    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry {
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        }
    }

    /// Spatial convolutions (`d > 1`) are the perforable ones.
    pub fn is_perforable(&self) -> bool {
        self.kernel > 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv(ConvSpec),
    Relu,
    MaxPool(PoolGeometry),
    AvgPool(PoolGeometry),
    /// Global average pooling to a vector.
    Gap,
    Fc { outputs: usize },
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv(_) => "conv",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool(_) => "maxpool",
            LayerSpec::AvgPool(_) => "avgpool",
            LayerSpec::Gap => "gap",
            LayerSpec::Fc { .. } => "fc",
        }
    }
}

/// Activation shape between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Spatial { x: usize, y: usize, s: usize },
    Flat(usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Spatial { x, y, s } => x * y * s,
            Shape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Spatial { x, y, s } => write!(f, "{x}x{y}x{s}"),
            Shape::Flat(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Input shape of every layer followed by the output shape.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        let (x, y, s) = self.input;
        let mut cur = Shape::Spatial { x, y, s };
        let mut out = vec![cur];
        for (i, layer) in self.layers.iter().enumerate() {
            cur = next_shape(cur, layer).map_err(|e| e.at_layer(i))?;
            out.push(cur);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.shapes().map(|_| ())
    }

    /// Number of classes (length of the final vector).
    pub fn classes(&self) -> Result<usize> {
        match self.shapes()?.last() {
            Some(Shape::Flat(n)) => Ok(*n),
            _ => Err(Error::format(WHAT, "network must end in a vector (gap or fc)")),
        }
    }

    pub fn conv(&self, layer: usize) -> Option<&ConvSpec> {
        match self.layers.get(layer) {
            Some(LayerSpec::Conv(c)) => Some(c),
            _ => None,
        }
    }

    pub fn conv_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.conv(i).is_some()).collect()
    }

    pub fn perforable_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.conv(i).is_some_and(|c| c.is_perforable()))
            .collect()
    }

    /// Pooling that consumes the output of `layer`, looking past ReLUs.
    pub fn following_pool(&self, layer: usize) -> Option<PoolGeometry> {
        for l in &self.layers[layer + 1..] {
            match l {
                LayerSpec::Relu => continue,
                LayerSpec::MaxPool(p) | LayerSpec::AvgPool(p) => return Some(*p),
                _ => return None,
            }
        }
        None
    }

    /// Parameter count (weights and biases).
    pub fn parameter_count(&self) -> Result<usize> {
        let shapes = self.shapes()?;
        Ok(self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| match l {
                LayerSpec::Conv(c) => {
                    c.kernel * c.kernel * c.in_channels / c.groups * c.out_channels
                        + if c.bias { c.out_channels } else { 0 }
                }
                LayerSpec::Fc { outputs } => shapes[i].len() * outputs + outputs,
                _ => 0,
            })
            .sum())
    }
}

fn next_shape(cur: Shape, layer: &LayerSpec) -> Result<Shape> {
    let spatial = |what: &str| match cur {
        Shape::Spatial { x, y, s } => Ok((x, y, s)),
        Shape::Flat(_) => Err(Error::shape(format!("{what} needs a spatial input"))),
    };
    Ok(match layer {
        LayerSpec::Conv(c) => {
            let (x, y, s) = spatial("conv")?;
            if s != c.in_channels {
                return Err(Error::shape(format!(
                    "conv expects {} input channels, got {s}",
                    c.in_channels
                )));
            }
            if c.groups == 0 || s % c.groups != 0 || c.out_channels % c.groups != 0 {
                return Err(Error::shape(format!("{} groups do not divide {s}/{}", c.groups, c.out_channels)));
            }
            let (xo, yo) = c.geometry().output_dims(x, y)?;
            Shape::Spatial {
                x: xo,
                y: yo,
                s: c.out_channels,
            }
        }
        LayerSpec::Relu => cur,
        LayerSpec::MaxPool(p) | LayerSpec::AvgPool(p) => {
            let (x, y, s) = spatial("pooling")?;
            Shape::Spatial {
                x: p.output_len(x)?,
                y: p.output_len(y)?,
                s,
            }
        }
        LayerSpec::Gap => Shape::Flat(spatial("gap")?.2),
        LayerSpec::Fc { outputs } => {
            if *outputs == 0 {
                return Err(Error::shape("fc needs at least one output"));
            }
            Shape::Flat(*outputs)
        }
    })
}

fn parse_kv(tokens: &[&str], line: usize) -> Result<BTreeMap<String, String>> {
    let mut m = BTreeMap::new();
    for t in tokens {
        let (k, v) = t
            .split_once('=')
            .ok_or_else(|| Error::format(WHAT, format!("line {line}: expected key=value, got `{t}`")))?;
        if m.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::format(WHAT, format!("line {line}: repeated key `{k}`")));
        }
    }
    Ok(m)
}

struct Fields {
    map: BTreeMap<String, String>,
    line: usize,
}

impl Fields {
    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.map.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::format(WHAT, format!("line {}: bad value `{v}` for `{key}`", self.line))),
        }
    }

    fn need<T: FromStr>(&mut self, key: &str) -> Result<T> {
        self.take(key)?
            .ok_or_else(|| Error::format(WHAT, format!("line {}: missing `{key}`", self.line)))
    }

    fn finish(self) -> Result<()> {
        match self.map.keys().next() {
            Some(k) => Err(Error::format(WHAT, format!("line {}: unknown key `{k}`", self.line))),
            None => Ok(()),
        }
    }
}

fn parse_pool(f: &mut Fields) -> Result<PoolGeometry> {
    Ok(PoolGeometry {
        size: f.need("k")?,
        stride: f.need("stride")?,
        pad: f.take("pad")?.unwrap_or(0),
    })
}

impl FromStr for NetworkSpec {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut input = None;
        let mut layers = Vec::new();
        let mut channels = 0;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let tokens: Vec<&str> = body.split_whitespace().collect();
            let mut f = Fields {
                map: parse_kv(&tokens[1..], line)?,
                line,
            };
            if tokens[0] == "input" {
                if input.is_some() {
                    return Err(Error::format(WHAT, format!("line {line}: second input line")));
                }
                let shape: (usize, usize, usize) = (f.need("x")?, f.need("y")?, f.need("s")?);
                channels = shape.2;
                input = Some(shape);
                f.finish()?;
                continue;
            }
            if input.is_none() {
                return Err(Error::format(WHAT, format!("line {line}: layers must follow the input line")));
            }
            let layer = match tokens[0] {
                "conv" => {
                    let out_channels = f.need("t")?;
                    let in_channels = f.take("s")?.unwrap_or(channels);
                    let perf = match f.take::<MaskKind>("perf")? {
                        None => None,
                        Some(kind) => Some(PerfAttachment {
                            kind,
                            rate: f.need("r")?,
                            seed: f.take("seed")?.unwrap_or(0),
                            interp: f.take("interp")?,
                        }),
                    };
                    let c = ConvSpec {
                        kernel: f.need("d")?,
                        in_channels,
                        out_channels,
                        stride: f.take("stride")?.unwrap_or(1),
                        pad: f.take("pad")?.unwrap_or(0),
                        groups: f.take("groups")?.unwrap_or(1),
                        bias: f.take::<u8>("bias")?.map(|b| b != 0).unwrap_or(true),
                        perf,
                    };
                    channels = c.out_channels;
                    LayerSpec::Conv(c)
                }
                "relu" => LayerSpec::Relu,
                "maxpool" => LayerSpec::MaxPool(parse_pool(&mut f)?),
                "avgpool" => LayerSpec::AvgPool(parse_pool(&mut f)?),
                "gap" => LayerSpec::Gap,
                "fc" => LayerSpec::Fc { outputs: f.need("t")? },
                other => return Err(Error::format(WHAT, format!("line {line}: unknown layer `{other}`"))),
            };
            f.finish()?;
            layers.push(layer);
        }
        let input = input.ok_or_else(|| Error::format(WHAT, "missing input line"))?;
        let spec = NetworkSpec { input, layers };
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (x, y, s) = self.input;
        writeln!(f, "input x={x} y={y} s={s}")?;
        for l in &self.layers {
            match l {
                LayerSpec::Conv(c) => {
                    write!(
                        f,
                        "conv d={} s={} t={} stride={} pad={}",
                        c.kernel, c.in_channels, c.out_channels, c.stride, c.pad
                    )?;
                    if c.groups != 1 {
                        write!(f, " groups={}", c.groups)?;
                    }
                    if !c.bias {
                        write!(f, " bias=0")?;
                    }
                    if let Some(p) = &c.perf {
                        write!(f, " perf={} r={} seed={}", p.kind, p.rate, p.seed)?;
                        if let Some(i) = p.interp {
                            write!(f, " interp={i}")?;
                        }
                    }
                    writeln!(f)?;
                }
                LayerSpec::MaxPool(p) | LayerSpec::AvgPool(p) => {
                    writeln!(f, "{} k={} stride={} pad={}", l.name(), p.size, p.stride, p.pad)?
                }
                LayerSpec::Fc { outputs } => writeln!(f, "fc t={outputs}")?,
                LayerSpec::Relu | LayerSpec::Gap => writeln!(f, "{}", l.name())?,
            }
        }
        Ok(())
    }
}

/// Network-in-Network for 32×32 CIFAR-10 inputs.
pub const NIN_CIFAR: &str = "\
input x=32 y=32 s=3
conv d=5 t=192 pad=2
relu
conv d=1 t=160
relu
conv d=1 t=96
relu
maxpool k=3 stride=2 pad=1
conv d=5 t=192 pad=2
relu
conv d=1 t=192
relu
conv d=1 t=192
relu
avgpool k=3 stride=2 pad=1
conv d=3 t=192 pad=1
relu
conv d=1 t=192
relu
conv d=1 t=10
relu
gap
";

/// AlexNet, Caffe reference variant (pooling before normalization, which is
/// omitted here as it performs no multiplications counted in the table).
pub const ALEXNET_CAFFE: &str = "\
input x=227 y=227 s=3
conv d=11 t=96 stride=4
relu
maxpool k=3 stride=2
conv d=5 t=256 pad=2 groups=2
relu
maxpool k=3 stride=2
conv d=3 t=384 pad=1
relu
conv d=3 t=384 pad=1 groups=2
relu
conv d=3 t=256 pad=1 groups=2
relu
maxpool k=3 stride=2
fc t=4096
relu
fc t=4096
relu
fc t=1000
";

pub const VGG16: &str = "\
input x=224 y=224 s=3
conv d=3 t=64 pad=1
relu
conv d=3 t=64 pad=1
relu
maxpool k=2 stride=2
conv d=3 t=128 pad=1
relu
conv d=3 t=128 pad=1
relu
maxpool k=2 stride=2
conv d=3 t=256 pad=1
relu
conv d=3 t=256 pad=1
relu
conv d=3 t=256 pad=1
relu
maxpool k=2 stride=2
conv d=3 t=512 pad=1
relu
conv d=3 t=512 pad=1
relu
conv d=3 t=512 pad=1
relu
maxpool k=2 stride=2
conv d=3 t=512 pad=1
relu
conv d=3 t=512 pad=1
relu
conv d=3 t=512 pad=1
relu
maxpool k=2 stride=2
fc t=4096
relu
fc t=4096
relu
fc t=1000
";

pub fn nin() -> NetworkSpec {
    NIN_CIFAR.parse().expect("built-in spec")
}

pub fn alexnet() -> NetworkSpec {
    ALEXNET_CAFFE.parse().expect("built-in spec")
}

pub fn vgg16() -> NetworkSpec {
    VGG16.parse().expect("built-in spec")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_print_round_trip() {
        let text = "input x=8 y=8 s=2\nconv d=3 t=4 pad=1 perf=grid r=0.5 seed=3 interp=bary\nrelu\nmaxpool k=2 stride=2\ngap\nfc t=3\n";
        let spec: NetworkSpec = text.parse().unwrap();
        assert_eq!(spec.layers.len(), 5);
        let c = spec.conv(0).unwrap();
        assert_eq!(c.in_channels, 2);
        let p = c.perf.unwrap();
        assert_eq!(p.kind, MaskKind::Grid);
        assert_eq!(p.rate.to_string(), "1/2");
        assert_eq!(p.interp, Some(Interpolation::Barycentric));
        let printed = spec.to_string();
        let again: NetworkSpec = printed.parse().unwrap();
        assert_eq!(again, spec);
        assert_eq!(again.to_string(), printed);
        assert_eq!(spec.classes().unwrap(), 3);
        assert_eq!(spec.following_pool(0), Some(PoolGeometry { size: 2, stride: 2, pad: 0 }));
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let err = "input x=8 y=8 s=2\nconv d=3 t=4\nconv d=9 t=2\n".parse::<NetworkSpec>().unwrap_err();
        assert!(matches!(err, Error::Layer { index: 1, .. }), "{err}");
        assert!("input x=8 y=8 s=2\nconv d=3 s=3 t=4\n".parse::<NetworkSpec>().is_err());
        assert!("input x=8 y=8 s=2\nconv d=3 t=4 foo=1\n".parse::<NetworkSpec>().is_err());
        assert!("conv d=3 t=4\n".parse::<NetworkSpec>().is_err());
        assert!("input x=8 y=8 s=2\ngap\nrelu\nconv d=1 t=2\n".parse::<NetworkSpec>().is_err());
    }

    #[test]
    fn builtin_specs_have_the_listed_perforable_convs() {
        assert_eq!(nin().perforable_layers().len(), 3);
        assert_eq!(alexnet().perforable_layers().len(), 5);
        assert_eq!(vgg16().perforable_layers().len(), 13);
        assert_eq!(nin().classes().unwrap(), 10);
        assert_eq!(alexnet().classes().unwrap(), 1000);
        let shapes = alexnet().shapes().unwrap();
        assert_eq!(shapes[1], Shape::Spatial { x: 55, y: 55, s: 96 });
    }
}
