//! Per-layer perforation assignments.
//!
//! Text form, one line per layer:
//!
//! ```text
//! layer=0 mask=grid r=1/2 seed=17
//! layer=4 mask=impact r=2/3 seed=9
//! ```

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::masks::MaskKind;
use crate::network::NetworkSpec;
use crate::rate::{Rate, RateLadder};
use crate::seed;

const WHAT: &str = "perforation config";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerPerforation {
    pub layer: usize,
    pub kind: MaskKind,
    pub rate: Rate,
    pub seed: u64,
}

/// Perforation of each listed convolution; unlisted layers stay dense.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PerforationConfig {
    entries: Vec<LayerPerforation>,
}

/// Default mask seed of `layer` under a global seed.
pub fn layer_seed(global: u64, layer: usize) -> u64 {
    seed::derive(global, &format!("mask/layer{layer}"))
}

impl PerforationConfig {
    pub fn new(mut entries: Vec<LayerPerforation>) -> Result<Self> {
        entries.sort_by_key(|e| e.layer);
        if let Some(w) = entries.windows(2).find(|w| w[0].layer == w[1].layer) {
            return Err(Error::format(WHAT, format!("layer {} listed twice", w[0].layer)));
        }
        Ok(PerforationConfig { entries })
    }

    /// Every perforable layer of `spec` at rate 0 with mask `kind` and
    /// seeds derived from `global_seed`.
    pub fn unperforated(spec: &NetworkSpec, kind: MaskKind, global_seed: u64) -> Self {
        PerforationConfig {
            entries: spec
                .perforable_layers()
                .into_iter()
                .map(|layer| LayerPerforation {
                    layer,
                    kind,
                    rate: Rate::ZERO,
                    seed: layer_seed(global_seed, layer),
                })
                .collect(),
        }
    }

    /// The same rate on every perforable layer.
    pub fn uniform_rate(spec: &NetworkSpec, kind: MaskKind, rate: Rate, global_seed: u64) -> Self {
        let mut c = Self::unperforated(spec, kind, global_seed);
        c.entries.iter_mut().for_each(|e| e.rate = rate);
        c
    }

    pub fn entries(&self) -> &[LayerPerforation] {
        &self.entries
    }

    pub fn get(&self, layer: usize) -> Option<&LayerPerforation> {
        self.entries.iter().find(|e| e.layer == layer)
    }

    pub fn layers(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.layer).collect()
    }

    pub fn set_rate(&mut self, layer: usize, rate: Rate) -> Result<()> {
        let e = self
            .entries
            .iter_mut()
            .find(|e| e.layer == layer)
            .ok_or_else(|| Error::invalid(format!("layer {layer} is not in the config")))?;
        e.rate = rate;
        Ok(())
    }

    /// Ladder level of every entry.
    pub fn levels(&self, ladder: &RateLadder) -> Result<Vec<usize>> {
        self.entries
            .iter()
            .map(|e| {
                ladder
                    .level_of(e.rate)
                    .ok_or_else(|| Error::invalid(format!("rate {} of layer {} is not on the ladder", e.rate, e.layer)))
            })
            .collect()
    }

    /// Copy with entry `k` at `ladder.rate(levels[k])`.
    pub fn with_levels(&self, ladder: &RateLadder, levels: &[usize]) -> Result<Self> {
        if levels.len() != self.entries.len() {
            return Err(Error::invalid("one level per config entry is required"));
        }
        let mut c = self.clone();
        for (e, &l) in c.entries.iter_mut().zip(levels) {
            if l > ladder.steps() {
                return Err(Error::invalid(format!("level {l} beyond the {}-step ladder", ladder.steps())));
            }
            e.rate = ladder.rate(l);
        }
        Ok(c)
    }

    /// Entries must name convolutions of `spec` that can be perforated.
    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        for e in &self.entries {
            match spec.conv(e.layer) {
                Some(c) if c.is_perforable() || e.rate.is_zero() => {}
                Some(_) => return Err(Error::invalid(format!("layer {} is a 1x1 convolution", e.layer))),
                None => return Err(Error::invalid(format!("layer {} is not a convolution", e.layer))),
            }
            if e.kind == MaskKind::Pooling && !e.rate.is_zero() && spec.following_pool(e.layer).is_none() {
                return Err(Error::invalid(format!("layer {} is not followed by pooling", e.layer)));
            }
            if e.kind == MaskKind::Custom {
                return Err(Error::invalid("custom masks cannot appear in a config"));
            }
        }
        Ok(())
    }
}

impl fmt::Display for PerforationConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            let rate = if e.rate.is_zero() { "0".to_string() } else { e.rate.to_string() };
            writeln!(f, "layer={} mask={} r={} seed={}", e.layer, e.kind, rate, e.seed)?;
        }
        Ok(())
    }
}

impl FromStr for PerforationConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (mut layer, mut kind, mut rate, mut seed) = (None, None, None, None);
            for tok in body.split_whitespace() {
                let (k, v) = tok
                    .split_once('=')
                    .ok_or_else(|| Error::format(WHAT, format!("line {}: expected key=value, got `{tok}`", i + 1)))?;
                let bad = || Error::format(WHAT, format!("line {}: bad value `{v}` for `{k}`", i + 1));
                match k {
                    "layer" => layer = Some(v.parse().map_err(|_| bad())?),
                    "mask" => kind = Some(v.parse::<MaskKind>()?),
                    "r" => rate = Some(v.parse::<Rate>()?),
                    "seed" => seed = Some(v.parse().map_err(|_| bad())?),
                    _ => return Err(Error::format(WHAT, format!("line {}: unknown key `{k}`", i + 1))),
                }
            }
            let missing = |what: &str| Error::format(WHAT, format!("line {}: missing `{what}`", i + 1));
            entries.push(LayerPerforation {
                layer: layer.ok_or_else(|| missing("layer"))?,
                kind: kind.ok_or_else(|| missing("mask"))?,
                rate: rate.ok_or_else(|| missing("r"))?,
                seed: seed.ok_or_else(|| missing("seed"))?,
            });
        }
        PerforationConfig::new(entries)
    }
}
