//! Loss-impact estimates of convolution outputs and impact-driven masks.
//!
//! `G(x, y) = Σ_t |∂L/∂V(x, y, t) · V(x, y, t)|` is taken with respect to
//! the exact values of a convolution, so positions a layer does not compute
//! have zero impact.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::masks::{top_n_by_weight, MaskKind, PerforationMask, WeightField};
use crate::perfconv::Interpolation;
use crate::rate::RateLadder;
use crate::tensor::{Real, Tensor3};

use super::data::Dataset;
use super::model::{ForwardState, Gradients, Network};

fn field_from<T: Real>(net: &Network<T>, st: &ForwardState<T>, g: &Gradients<T>, layer: usize) -> Result<WeightField> {
    let c = net
        .conv(layer)
        .ok_or_else(|| Error::invalid(format!("layer {layer} is not a convolution")))?;
    let (xp, yp) = c.mask().dims();
    let pos = net.exact_positions(st, layer)?;
    let vals = net.exact_values(st, layer)?;
    let d = g.d_exact[layer]
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("no gradient recorded for layer {layer}")))?;
    let mut out = WeightField::zeros(xp, yp);
    let values = out.values_mut();
    for (k, p) in pos.iter().enumerate() {
        let s: f64 = vals
            .row(k)
            .iter()
            .zip(d.row(k))
            .map(|(&v, &dv)| (v * dv).abs().to_f64_lossy())
            .sum();
        values[p.flat(yp)] = s;
    }
    Ok(out)
}

/// `G` of convolution `layer` for one labeled image.
pub fn impact_field<T: Real>(net: &Network<T>, layer: usize, image: &Tensor3<T>, label: usize) -> Result<WeightField> {
    let st = net.forward(image)?;
    let g = net.backward(&st, label, false)?;
    field_from(net, &st, &g, layer)
}

/// `G` from an arbitrary gradient on the logits, e.g. one that selects a
/// single output.
pub fn impact_field_from_logits<T: Real>(
    net: &Network<T>,
    layer: usize,
    image: &Tensor3<T>,
    d_logits: Vec<T>,
) -> Result<WeightField> {
    let st = net.forward(image)?;
    let g = net.backward_logits(&st, d_logits, false)?;
    field_from(net, &st, &g, layer)
}

/// `B` for each of `layers`: the mean of `G` over `data`, from one
/// forward/backward pass per sample.
pub fn average_impacts_all(net: &Network<f32>, layers: &[usize], data: &Dataset) -> Result<Vec<WeightField>> {
    if data.is_empty() {
        return Err(Error::invalid("impact averaging needs a non-empty dataset"));
    }
    let per: Vec<Result<Vec<WeightField>>> = data
        .images
        .par_iter()
        .zip(data.labels.par_iter())
        .map(|(img, &lab)| {
            let st = net.forward(img)?;
            let g = net.backward(&st, lab, false)?;
            layers.iter().map(|&l| field_from(net, &st, &g, l)).collect()
        })
        .collect();
    let per: Vec<Vec<WeightField>> = per.into_iter().collect::<Result<_>>()?;
    (0..layers.len())
        .map(|j| {
            let fields: Vec<WeightField> = per.iter().map(|v| v[j].clone()).collect();
            WeightField::mean(&fields)
        })
        .collect()
}

/// `B` of convolution `layer` over `data`.
pub fn average_impacts(net: &Network<f32>, layer: usize, data: &Dataset) -> Result<WeightField> {
    Ok(average_impacts_all(net, &[layer], data)?.remove(0))
}

/// Outcome of [`iterative_impact_perforation`].
#[derive(Clone, Debug)]
pub struct IterativeImpact {
    /// Ladder level reached by each perforated layer, in first-touch order.
    pub levels: Vec<(usize, usize)>,
    pub masks: Vec<(usize, PerforationMask)>,
    /// How many times impacts were recomputed.
    pub recomputations: usize,
}

/// Raises the rate of `schedule[k]` by one ladder step at step `k`,
/// recomputing the impacts of all scheduled layers on the current network
/// before every selection. The network is left perforated.
pub fn iterative_impact_perforation(
    net: &mut Network<f32>,
    schedule: &[usize],
    ladder: &RateLadder,
    data: &Dataset,
    seed: u64,
    interp: Interpolation,
) -> Result<IterativeImpact> {
    let mut layers: Vec<usize> = Vec::new();
    for &l in schedule {
        if net.conv(l).is_none() {
            return Err(Error::invalid(format!("layer {l} is not a convolution")));
        }
        if !layers.contains(&l) {
            layers.push(l);
        }
    }
    let mut levels = vec![0usize; layers.len()];
    let mut recomputations = 0;
    for &l in schedule {
        let j = layers.iter().position(|&x| x == l).expect("collected above");
        if levels[j] >= ladder.steps() {
            return Err(Error::invalid(format!("rate ladder exhausted for layer {l}")));
        }
        let fields = average_impacts_all(net, &layers, data)?;
        recomputations += 1;
        levels[j] += 1;
        let (xp, yp) = net.mask(l).expect("checked").dims();
        let n = ladder.rate(levels[j]).kept(xp * yp);
        let mask = top_n_by_weight(&fields[j], n, seed, MaskKind::Impact)?;
        net.set_mask(l, mask, interp)?;
    }
    Ok(IterativeImpact {
        levels: layers.iter().copied().zip(levels).collect(),
        masks: layers
            .iter()
            .map(|&l| (l, net.mask(l).expect("checked").clone()))
            .collect(),
        recomputations,
    })
}

/// Applies the perforations written in the network spec. Impact masks are
/// computed on `data` after all other attachments are in place.
pub fn apply_spec_perforation(net: &mut Network<f32>, data: Option<&Dataset>, default_interp: Interpolation) -> Result<()> {
    let spec = net.spec().clone();
    let mut impact = Vec::new();
    for l in spec.conv_layers() {
        let Some(p) = spec.conv(l).and_then(|c| c.perf) else {
            continue;
        };
        let interp = p.interp.unwrap_or(default_interp);
        if p.kind == MaskKind::Impact {
            impact.push((l, p, interp));
        } else {
            net.perforate(l, p.kind, p.rate, p.seed, interp, None)
                .map_err(|e| e.at_layer(l))?;
        }
    }
    if impact.is_empty() {
        return Ok(());
    }
    let data = data.ok_or_else(|| Error::invalid("impact perforation in the spec needs a dataset"))?;
    let layers: Vec<usize> = impact.iter().map(|e| e.0).collect();
    let fields = average_impacts_all(net, &layers, data)?;
    for ((l, p, interp), f) in impact.into_iter().zip(&fields) {
        net.perforate(l, MaskKind::Impact, p.rate, p.seed, interp, Some(f))
            .map_err(|e| e.at_layer(l))?;
    }
    Ok(())
}
