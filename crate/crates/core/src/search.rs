//! Greedy per-layer rate configuration and Pareto fronts.

use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;

use crate::bench::{account_network, time_forward};
use crate::config::PerforationConfig;
use crate::error::{Error, Result};
use crate::masks::MaskKind;
use crate::network::{average_impacts_all, Dataset, Network};
use crate::perfconv::Interpolation;
use crate::rate::{Rate, RateLadder};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CostModel {
    /// Convolution multiplications per image.
    #[default]
    Mults,
    /// Median wall-clock seconds of a forward pass over the subset.
    Time,
}

impl FromStr for CostModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mults" => Ok(CostModel::Mults),
            "time" => Ok(CostModel::Time),
            _ => Err(Error::invalid(format!("unknown cost model `{s}`"))),
        }
    }
}

/// Cost `t` and objective `e` (mean NLL) of one configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CandidateEvaluation {
    pub t: f64,
    pub e: f64,
}

impl CandidateEvaluation {
    pub fn speedup(&self, baseline: &CandidateEvaluation) -> f64 {
        baseline.t / self.t
    }
}

#[derive(Clone, Debug)]
pub struct SearchOptions {
    pub cost_model: CostModel,
    pub interp: Interpolation,
    pub ladder: RateLadder,
    /// Timing repetitions and warmup runs for [`CostModel::Time`].
    pub reps: usize,
    pub warmup: usize,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            cost_model: CostModel::Mults,
            interp: Interpolation::Nearest,
            ladder: RateLadder::standard(),
            reps: 5,
            warmup: 1,
        }
    }
}

/// Replaces the perforation of `net` by `config`. Impact masks are built
/// from impacts averaged over `impact_data`, measured after every other
/// entry is in place.
pub fn apply_config(
    net: &mut Network<f32>,
    config: &PerforationConfig,
    interp: Interpolation,
    impact_data: Option<&Dataset>,
) -> Result<()> {
    config.validate(net.spec())?;
    net.clear_perforation();
    let mut impact = Vec::new();
    for e in config.entries() {
        if e.rate.is_zero() {
            continue;
        }
        if e.kind == MaskKind::Impact {
            impact.push(*e);
        } else {
            net.perforate(e.layer, e.kind, e.rate, e.seed, interp, None)
                .map_err(|err| err.at_layer(e.layer))?;
        }
    }
    if impact.is_empty() {
        return Ok(());
    }
    let data = impact_data.ok_or_else(|| Error::invalid("impact masks need a dataset"))?;
    let layers: Vec<usize> = impact.iter().map(|e| e.layer).collect();
    let fields = average_impacts_all(net, &layers, data)?;
    for (e, f) in impact.iter().zip(&fields) {
        net.perforate(e.layer, e.kind, e.rate, e.seed, interp, Some(f))
            .map_err(|err| err.at_layer(e.layer))?;
    }
    Ok(())
}

fn measure(net: &Network<f32>, subset: &Dataset, opts: &SearchOptions) -> Result<CandidateEvaluation> {
    let t = match opts.cost_model {
        CostModel::Mults => account_network(net)?.conv_mults() as f64,
        CostModel::Time => time_forward(net, &subset.images, opts.reps, opts.warmup)?.median,
    };
    let e = net.evaluate(subset)?.loss;
    if !e.is_finite() {
        return Err(Error::invalid("evaluation loss is not finite"));
    }
    Ok(CandidateEvaluation { t, e })
}

/// `(t, e)` of `net` perforated by `config`; `net` itself is untouched.
pub fn evaluate_config(
    net: &Network<f32>,
    config: &PerforationConfig,
    subset: &Dataset,
    opts: &SearchOptions,
) -> Result<CandidateEvaluation> {
    if subset.is_empty() {
        return Err(Error::invalid("evaluation subset is empty"));
    }
    let mut n = net.clone();
    apply_config(&mut n, config, opts.interp, Some(subset))?;
    measure(&n, subset, opts)
}

/// Greedy cost of a candidate; `None` when it does not reduce `t`.
pub fn greedy_cost(baseline: &CandidateEvaluation, candidate: &CandidateEvaluation) -> Option<f64> {
    (candidate.t < baseline.t).then(|| (candidate.e - baseline.e) / (baseline.t - candidate.t))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceStep {
    pub step: usize,
    pub layer: usize,
    pub rate: Rate,
    pub t: f64,
    pub e: f64,
    pub cost: f64,
}

#[derive(Clone, Debug)]
pub struct GreedyOutcome {
    pub config: PerforationConfig,
    pub baseline: CandidateEvaluation,
    pub result: CandidateEvaluation,
    pub trace: Vec<TraceStep>,
    /// False when the ladder ran out before the target speedup.
    pub reached_target: bool,
}

impl GreedyOutcome {
    pub fn speedup(&self) -> f64 {
        self.result.speedup(&self.baseline)
    }

    /// Trace as CSV `step,layer,rate,t,e,cost`.
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("step,layer,rate,t,e,cost\n");
        for r in &self.trace {
            let _ = writeln!(s, "{},{},{},{},{:.9},{:.9e}", r.step, r.layer, r.rate, r.t, r.e, r.cost);
        }
        s
    }
}

/// Raises one layer's rate per step, choosing the layer with the smallest
/// `(e − e₀)/(t₀ − t)`, until `t₀/t ≥ target_speedup` or no layer can move.
///
/// `start` lists the layers to configure with their mask kinds and seeds;
/// its rates must be on the ladder. Under the multiplication model a
/// candidate skips ladder levels that leave `t` unchanged.
pub fn greedy_configure(
    net: &Network<f32>,
    start: &PerforationConfig,
    subset: &Dataset,
    target_speedup: f64,
    opts: &SearchOptions,
) -> Result<GreedyOutcome> {
    if target_speedup.is_nan() || target_speedup <= 1.0 {
        return Err(Error::invalid(format!("target speedup must exceed 1, got {target_speedup}")));
    }
    if start.entries().is_empty() {
        return Err(Error::invalid("no layers to configure"));
    }
    let ladder = &opts.ladder;
    let mut levels = start.levels(ladder)?;
    let baseline_cfg = start.with_levels(ladder, &vec![0; levels.len()])?;
    let baseline = evaluate_config(net, &baseline_cfg, subset, opts)?;
    let mut config = start.with_levels(ladder, &levels)?;
    let mut current = evaluate_config(net, &config, subset, opts)?;
    let mut trace = Vec::new();
    let exact_t = opts.cost_model == CostModel::Mults;
    loop {
        if current.speedup(&baseline) >= target_speedup {
            break;
        }
        let candidates: Vec<Result<Option<(usize, usize, CandidateEvaluation)>>> = (0..levels.len())
            .into_par_iter()
            .map(|k| {
                let mut lv = levels.clone();
                loop {
                    if lv[k] >= ladder.steps() {
                        return Ok(None);
                    }
                    lv[k] += 1;
                    let ev = evaluate_config(net, &config.with_levels(ladder, &lv)?, subset, opts)?;
                    if !exact_t || ev.t < current.t {
                        return Ok(Some((k, lv[k], ev)));
                    }
                }
            })
            .collect();
        let room = levels.iter().any(|&l| l < ladder.steps());
        let mut best: Option<(usize, usize, CandidateEvaluation, f64)> = None;
        for c in candidates {
            let Some((k, level, ev)) = c? else { continue };
            let Some(cost) = greedy_cost(&baseline, &ev) else { continue };
            if best.as_ref().is_none_or(|b| cost < b.3) {
                best = Some((k, level, ev, cost));
            }
        }
        let Some((k, level, ev, cost)) = best else {
            if trace.is_empty() && room {
                return Err(Error::invalid("no candidate reduces the cost below the unperforated network"));
            }
            break;
        };
        levels[k] = level;
        config = config.with_levels(ladder, &levels)?;
        current = ev;
        trace.push(TraceStep {
            step: trace.len() + 1,
            layer: config.entries()[k].layer,
            rate: ladder.rate(level),
            t: ev.t,
            e: ev.e,
            cost,
        });
    }
    Ok(GreedyOutcome {
        reached_target: current.speedup(&baseline) >= target_speedup,
        config,
        baseline,
        result: current,
        trace,
    })
}

/// One enumerated configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct EnumeratedConfig {
    pub levels: Vec<usize>,
    pub eval: CandidateEvaluation,
}

/// Every combination of ladder levels for at most three layers, in
/// lexicographic level order.
pub fn exhaustive_search(
    net: &Network<f32>,
    start: &PerforationConfig,
    subset: &Dataset,
    opts: &SearchOptions,
) -> Result<Vec<EnumeratedConfig>> {
    let k = start.entries().len();
    if k == 0 || k > 3 {
        return Err(Error::invalid(format!("exhaustive search covers 1 to 3 layers, got {k}")));
    }
    let side = opts.ladder.steps() + 1;
    let combos: Vec<Vec<usize>> = (0..side.pow(k as u32))
        .map(|mut i| {
            let mut lv = vec![0; k];
            for slot in lv.iter_mut().rev() {
                *slot = i % side;
                i /= side;
            }
            lv
        })
        .collect();
    combos
        .into_par_iter()
        .map(|levels| {
            let eval = evaluate_config(net, &start.with_levels(&opts.ladder, &levels)?, subset, opts)?;
            Ok(EnumeratedConfig { levels, eval })
        })
        .collect()
}

/// Indices of the non-dominated evaluations under (minimize `t`, i.e.
/// maximize speedup; minimize `e`), ordered by increasing speedup. Equal
/// points do not dominate each other and are all kept.
pub fn pareto_front(evals: &[CandidateEvaluation]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..evals.len()).collect();
    idx.sort_by(|&a, &b| {
        evals[a]
            .t
            .total_cmp(&evals[b].t)
            .then(evals[a].e.total_cmp(&evals[b].e))
            .then(a.cmp(&b))
    });
    let mut front = Vec::new();
    let mut best_e = f64::INFINITY;
    let mut i = 0;
    while i < idx.len() {
        let t = evals[idx[i]].t;
        let group_min = evals[idx[i]].e;
        let mut j = i;
        while j < idx.len() && evals[idx[j]].t == t {
            if evals[idx[j]].e == group_min && group_min < best_e {
                front.push(idx[j]);
            }
            j += 1;
        }
        best_e = best_e.min(group_min);
        i = j;
    }
    front.sort_by(|&a, &b| evals[b].t.total_cmp(&evals[a].t).then(a.cmp(&b)));
    front
}

/// Whether `a` dominates `b`.
pub fn dominates(a: &CandidateEvaluation, b: &CandidateEvaluation) -> bool {
    a.t <= b.t && a.e <= b.e && (a.t < b.t || a.e < b.e)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(t: f64, e: f64) -> CandidateEvaluation {
        CandidateEvaluation { t, e }
    }

    #[test]
    fn cost_formula_picks_cheaper_error_per_saving() {
        let base = ev(100.0, 1.0);
        let a = greedy_cost(&base, &ev(60.0, 1.1)).unwrap();
        let b = greedy_cost(&base, &ev(40.0, 1.3)).unwrap();
        assert!((a - 0.0025).abs() < 1e-12);
        assert!((b - 0.005).abs() < 1e-12);
        assert!(a < b);
        assert_eq!(greedy_cost(&base, &ev(100.0, 0.5)), None);
    }

    #[test]
    fn front_basics() {
        assert_eq!(pareto_front(&[ev(5.0, 1.0)]), vec![0]);
        assert_eq!(pareto_front(&[ev(50.0, 1.1), ev(50.0, 1.3)]), vec![0]);
        assert_eq!(pareto_front(&[ev(50.0, 1.1), ev(50.0, 1.1)]), vec![0, 1]);
        let f = pareto_front(&[ev(10.0, 3.0), ev(20.0, 2.0), ev(30.0, 1.0), ev(25.0, 2.5), ev(10.0, 3.0)]);
        assert_eq!(f, vec![2, 1, 0, 4]);
        assert_eq!(pareto_front(&[ev(10.0, 1.0), ev(20.0, 1.0)]), vec![0]);
    }

    #[test]
    fn cost_model_parses() {
        assert_eq!("mults".parse::<CostModel>().unwrap(), CostModel::Mults);
        assert_eq!("time".parse::<CostModel>().unwrap(), CostModel::Time);
        assert!("flops".parse::<CostModel>().is_err());
    }
}
