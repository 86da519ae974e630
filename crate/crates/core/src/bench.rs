//! Multiplication and activation-memory accounting, and wall-clock timing.
//!
//! Accounting follows execution in compact storage: a perforated output is
//! stored as `N × T` values, stays compact through ReLU when interpolation
//! only copies or zeroes, and is carried through 1×1 convolutions when it
//! copies, which then also compute only `N` rows.

use std::fmt::Write as _;
use std::time::Instant;

use crate::config::PerforationConfig;
use crate::error::{Error, Result};
use crate::lowering::Parallelism;
use crate::masks::{grid_achieved, grid_mask, pooling_mask, uniform_mask, MaskKind};
use crate::network::{LayerSpec, Network, NetworkSpec, Shape};
use crate::perfconv::{Interpolation, PerforatedConvLayer, Storage};
use crate::tensor::{Pos, Real, Tensor3};

/// Bytes per stored activation value.
pub const VALUE_BYTES: u64 = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCost {
    pub layer: usize,
    pub kind: &'static str,
    /// `|Ω|` of the layer output (1 for vectors).
    pub positions: usize,
    /// Positions actually computed and stored.
    pub exact: usize,
    pub mults: u64,
    pub baseline_mults: u64,
    pub activation_bytes: u64,
    pub baseline_activation_bytes: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimingStats {
    pub reps: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub mean: f64,
    /// Set when the median is too short for the timer to resolve reliably.
    pub flagged: bool,
}

/// Shortest median treated as reliably measurable, in seconds.
pub const MIN_RELIABLE_SECONDS: f64 = 1e-4;

impl TimingStats {
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        if samples.len() < 3 {
            return Err(Error::invalid("timing needs at least 3 repetitions"));
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (s.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
        };
        let median = q(0.5);
        Ok(TimingStats {
            reps: s.len(),
            median,
            q1: q(0.25),
            q3: q(0.75),
            mean: s.iter().sum::<f64>() / s.len() as f64,
            flagged: median < MIN_RELIABLE_SECONDS,
        })
    }

    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }

    /// Whether the interquartile ranges of two measurements intersect.
    pub fn overlaps(&self, other: &TimingStats) -> bool {
        self.q1 <= other.q3 && other.q1 <= self.q3
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    /// Timing of the configured network.
    pub timing: Option<TimingStats>,
    /// Timing of the unperforated network.
    pub baseline_timing: Option<TimingStats>,
    pub threads: usize,
}

/// CSV header of [`CostReport::to_csv`].
pub const CSV_COLUMNS: [&str; 17] = [
    "layer",
    "kind",
    "positions",
    "exact",
    "mults",
    "baseline_mults",
    "act_bytes",
    "baseline_act_bytes",
    "theoretical_speedup",
    "memory_ratio",
    "median_s",
    "q1_s",
    "q3_s",
    "mean_s",
    "baseline_median_s",
    "empirical_speedup",
    "timing_flag",
];

impl CostReport {
    fn conv_layers(&self) -> impl Iterator<Item = &LayerCost> {
        self.layers.iter().filter(|l| l.kind == "conv")
    }

    pub fn conv_mults(&self) -> u64 {
        self.conv_layers().map(|l| l.mults).sum()
    }

    pub fn baseline_conv_mults(&self) -> u64 {
        self.conv_layers().map(|l| l.baseline_mults).sum()
    }

    /// All multiplications, fully-connected layers included.
    pub fn total_mults(&self) -> u64 {
        self.layers.iter().map(|l| l.mults).sum()
    }

    pub fn activation_bytes(&self) -> u64 {
        self.layers.iter().map(|l| l.activation_bytes).sum()
    }

    pub fn baseline_activation_bytes(&self) -> u64 {
        self.layers.iter().map(|l| l.baseline_activation_bytes).sum()
    }

    /// Baseline over configured convolution multiplications.
    pub fn theoretical_speedup(&self) -> f64 {
        self.baseline_conv_mults() as f64 / self.conv_mults() as f64
    }

    /// Baseline over configured activation bytes.
    pub fn memory_ratio(&self) -> f64 {
        self.baseline_activation_bytes() as f64 / self.activation_bytes() as f64
    }

    pub fn empirical_speedup(&self) -> Option<f64> {
        match (self.timing, self.baseline_timing) {
            (Some(t), Some(b)) => Some(b.median / t.median),
            _ => None,
        }
    }

    /// One row per layer and a final `total` row; timing columns are filled
    /// on the total row only.
    pub fn to_csv(&self) -> String {
        let mut s = CSV_COLUMNS.join(",");
        s.push('\n');
        let ratio = |a: u64, b: u64| if b == 0 { String::new() } else { format!("{:.6}", a as f64 / b as f64) };
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},,,,,,,",
                l.layer,
                l.kind,
                l.positions,
                l.exact,
                l.mults,
                l.baseline_mults,
                l.activation_bytes,
                l.baseline_activation_bytes,
                ratio(l.baseline_mults, l.mults),
                ratio(l.baseline_activation_bytes, l.activation_bytes),
            );
        }
        let t = |v: Option<f64>| v.map(|x| format!("{x:.9}")).unwrap_or_default();
        let _ = writeln!(
            s,
            "total,all,,,{},{},{},{},{:.6},{:.6},{},{},{},{},{},{},{}",
            self.conv_mults(),
            self.baseline_conv_mults(),
            self.activation_bytes(),
            self.baseline_activation_bytes(),
            self.theoretical_speedup(),
            self.memory_ratio(),
            t(self.timing.map(|x| x.median)),
            t(self.timing.map(|x| x.q1)),
            t(self.timing.map(|x| x.q3)),
            t(self.timing.map(|x| x.mean)),
            t(self.baseline_timing.map(|x| x.median)),
            self.empirical_speedup().map(|x| format!("{x:.4}")).unwrap_or_default(),
            match self.timing {
                Some(x) if x.flagged => "low_resolution",
                Some(_) => "ok",
                None => "",
            },
        );
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>5}  {:<8} {:>9} {:>9} {:>15} {:>15} {:>8} {:>12} {:>8}",
            "layer", "kind", "positions", "exact", "mults", "baseline", "mult↓", "act bytes", "mem↓"
        );
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:>5}  {:<8} {:>9} {:>9} {:>15} {:>15} {:>8.3} {:>12} {:>8.3}",
                l.layer,
                l.kind,
                l.positions,
                l.exact,
                l.mults,
                l.baseline_mults,
                if l.mults == 0 { 1.0 } else { l.baseline_mults as f64 / l.mults as f64 },
                l.activation_bytes,
                l.baseline_activation_bytes as f64 / l.activation_bytes.max(1) as f64,
            );
        }
        let _ = writeln!(
            s,
            "conv mults {} (baseline {}), theoretical speedup {:.3}x, memory ratio {:.3}x",
            self.conv_mults(),
            self.baseline_conv_mults(),
            self.theoretical_speedup(),
            self.memory_ratio()
        );
        if let Some(t) = self.timing {
            let _ = write!(
                s,
                "time median {:.6}s (IQR {:.6}s, mean {:.6}s, {} reps, {} thread{})",
                t.median,
                t.iqr(),
                t.mean,
                t.reps,
                self.threads,
                if self.threads == 1 { "" } else { "s" }
            );
            if let Some(e) = self.empirical_speedup() {
                let _ = write!(s, ", empirical speedup {e:.3}x");
            }
            if t.flagged {
                let _ = write!(s, " [below timer resolution]");
            }
            s.push('\n');
        }
        s
    }
}

/// How one convolution is perforated, for accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvPlan {
    /// Exact positions `N`.
    pub exact: usize,
    /// Interpolation copies one exact value per position.
    pub pointwise: bool,
    /// Interpolation copies or zeroes.
    pub copy_or_zero: bool,
}

#[derive(Clone, Copy)]
struct Stored {
    exact: usize,
    pointwise: bool,
    copy_or_zero: bool,
}

/// Accounting core: `plans[l]` describes convolution `l` (`None` for Ω).
fn account_plans(spec: &NetworkSpec, plans: &[Option<ConvPlan>], storage: Storage) -> Result<CostReport> {
    let shapes = spec.shapes()?;
    let mut layers = Vec::with_capacity(spec.layers.len());
    let mut compact: Option<Stored> = None;
    for (i, l) in spec.layers.iter().enumerate() {
        let (out_pos, out_ch) = match shapes[i + 1] {
            Shape::Spatial { x, y, s } => (x * y, s),
            Shape::Flat(n) => (1, n),
        };
        let dense_bytes = (out_pos * out_ch) as u64 * VALUE_BYTES;
        let (mut mults, mut base) = (0u64, 0u64);
        let mut exact = out_pos;
        let next = match l {
            LayerSpec::Conv(c) => {
                let per_pos = (c.kernel * c.kernel * (c.in_channels / c.groups) * c.out_channels) as u64;
                base = per_pos * out_pos as u64;
                let plan = plans.get(i).copied().flatten();
                let unperforated = plan.is_none_or(|p| p.exact == out_pos);
                let carry = compact.filter(|s| {
                    storage == Storage::Compact
                        && s.pointwise
                        && unperforated
                        && c.kernel == 1
                        && c.stride == 1
                        && c.pad == 0
                });
                match (carry, plan) {
                    (Some(s), _) => {
                        exact = s.exact;
                        mults = per_pos * exact as u64;
                        Some(s)
                    }
                    (None, Some(p)) if p.exact < out_pos => {
                        exact = p.exact;
                        mults = per_pos * exact as u64;
                        (storage == Storage::Compact).then_some(Stored {
                            exact,
                            pointwise: p.pointwise,
                            copy_or_zero: p.copy_or_zero,
                        })
                    }
                    _ => {
                        mults = base;
                        None
                    }
                }
            }
            LayerSpec::Relu => match compact {
                Some(s) if s.copy_or_zero => {
                    exact = s.exact;
                    Some(s)
                }
                _ => None,
            },
            LayerSpec::Fc { outputs } => {
                base = (shapes[i].len() * outputs) as u64;
                mults = base;
                None
            }
            LayerSpec::MaxPool(_) | LayerSpec::AvgPool(_) | LayerSpec::Gap => None,
        };
        let bytes = match next {
            Some(s) => (s.exact * out_ch) as u64 * VALUE_BYTES,
            None => dense_bytes,
        };
        if next.is_none() {
            exact = out_pos;
        }
        compact = next;
        layers.push(LayerCost {
            layer: i,
            kind: l.name(),
            positions: out_pos,
            exact,
            mults,
            baseline_mults: base,
            activation_bytes: bytes,
            baseline_activation_bytes: dense_bytes,
        });
    }
    Ok(CostReport {
        layers,
        timing: None,
        baseline_timing: None,
        threads: 1,
    })
}

/// Static accounting of `spec` under `config`, without running the network.
/// Grid masks are counted at their achievable size `Kx·Ky`. Under
/// barycentric interpolation, impact masks of three or more positions are
/// assumed not to be collinear; [`account_network`] is exact.
pub fn account(spec: &NetworkSpec, config: &PerforationConfig, interp: Interpolation, storage: Storage) -> Result<CostReport> {
    config.validate(spec)?;
    let shapes = spec.shapes()?;
    let mut plans = vec![None; spec.layers.len()];
    for e in config.entries() {
        if e.rate.is_zero() {
            continue;
        }
        let Shape::Spatial { x, y, .. } = shapes[e.layer + 1] else {
            unreachable!("validated convolution")
        };
        let omega = x * y;
        let mut n = e.rate.kept(omega);
        if e.kind == MaskKind::Grid {
            n = grid_achieved(x, y, n);
            if n == 0 {
                return Err(Error::invalid(format!("grid mask for layer {} would be empty", e.layer)));
            }
        }
        // Barycentric interpolation over collinear positions degrades to copying.
        let degenerate = interp == Interpolation::Barycentric
            && match e.kind {
                MaskKind::Impact => n < 3,
                MaskKind::Uniform => collinear(uniform_mask(x, y, n, e.seed)?.positions()),
                MaskKind::Grid => collinear(grid_mask(x, y, n, e.seed)?.positions()),
                MaskKind::Pooling => {
                    let pool = spec.following_pool(e.layer).expect("validated pooling");
                    collinear(pooling_mask(x, y, n, pool, e.seed)?.positions())
                }
                MaskKind::Full | MaskKind::Custom => unreachable!("not in a validated config"),
            };
        plans[e.layer] = Some(ConvPlan {
            exact: n,
            pointwise: interp == Interpolation::Nearest || degenerate,
            copy_or_zero: interp != Interpolation::Barycentric || degenerate,
        });
    }
    account_plans(spec, &plans, storage)
}

fn collinear(p: &[Pos]) -> bool {
    let Some(&a) = p.first() else { return true };
    let Some(&b) = p.iter().find(|&&q| q != a) else { return true };
    let (ax, ay) = (a.x as i64, a.y as i64);
    let (bx, by) = (b.x as i64 - ax, b.y as i64 - ay);
    p.iter().all(|q| bx * (q.y as i64 - ay) - by * (q.x as i64 - ax) == 0)
}

/// Accounting of a built network from its actual masks.
pub fn account_network<T: Real>(net: &Network<T>) -> Result<CostReport> {
    let plans: Vec<Option<ConvPlan>> = (0..net.len())
        .map(|l| {
            net.conv(l).map(|c| ConvPlan {
                exact: c.mask().len(),
                pointwise: c.interp_map().is_pointwise_copy(),
                copy_or_zero: c.interp_map().is_copy_or_zero(),
            })
        })
        .collect();
    account_plans(net.spec(), &plans, net.storage())
}

fn time_reps(reps: usize, warmup: usize, mut f: impl FnMut() -> Result<()>) -> Result<TimingStats> {
    if reps < 3 {
        return Err(Error::invalid("timing needs at least 3 repetitions"));
    }
    for _ in 0..warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed().as_secs_f64());
    }
    TimingStats::from_samples(&samples)
}

/// Wall-clock time of sequential forward passes over `images`.
pub fn time_forward(net: &Network<f32>, images: &[Tensor3<f32>], reps: usize, warmup: usize) -> Result<TimingStats> {
    if images.is_empty() {
        return Err(Error::invalid("timing needs at least one image"));
    }
    time_reps(reps, warmup, || {
        for img in images {
            std::hint::black_box(net.forward(img)?);
        }
        Ok(())
    })
}

/// Accounting plus timing of `net` against its unperforated version.
pub fn bench_network(net: &Network<f32>, images: &[Tensor3<f32>], reps: usize, warmup: usize) -> Result<CostReport> {
    let mut report = account_network(net)?;
    let mut base = net.clone();
    base.clear_perforation();
    report.baseline_timing = Some(time_forward(&base, images, reps, warmup)?);
    report.timing = Some(time_forward(net, images, reps, warmup)?);
    Ok(report)
}

/// Wall-clock time of the lowered path of one convolution over a batch:
/// lowering of the exact rows, stacked `stack_factor` images per GEMM.
pub fn time_conv_layer<T: Real>(
    layer: &PerforatedConvLayer<T>,
    inputs: &[Tensor3<T>],
    stack_factor: usize,
    par: Parallelism,
    reps: usize,
    warmup: usize,
) -> Result<TimingStats> {
    time_reps(reps, warmup, || {
        std::hint::black_box(layer.forward_batch_with(inputs, stack_factor, par)?);
        Ok(())
    })
}
