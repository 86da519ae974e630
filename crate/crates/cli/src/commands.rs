use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use perfcnn::bench::{account_network, bench_network, time_conv_layer, MIN_RELIABLE_SECONDS};
use perfcnn::config::{layer_seed, LayerPerforation, PerforationConfig};
use perfcnn::io;
use perfcnn::lowering::Parallelism;
use perfcnn::masks::{grid_mask, pooling_mask, top_n_by_weight, uniform_mask, MaskKind, PerforationMask, WeightField};
use perfcnn::network::{
    apply_spec_perforation, average_impacts, synthetic, Dataset, Network, NetworkSpec, Params, Shape, TrainState,
};
use perfcnn::perfconv::Interpolation;
use perfcnn::rate::RateLadder;
use perfcnn::search::{apply_config, exhaustive_search, greedy_configure, pareto_front, SearchOptions};
use perfcnn::seed::{self, derive};
use perfcnn::tensor::Tensor3;
use perfcnn::Error;
use rand::Rng as _;

use crate::{BenchArgs, EvalArgs, ExecArgs, MaskArgs, SearchArgs, SynthArgs, TrainArgs};

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Error::InvalidArgument(msg.into()).into()
}

fn load_spec(path: &Path) -> Result<NetworkSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading network spec {}", path.display()))?;
    text.parse::<NetworkSpec>()
        .with_context(|| format!("parsing network spec {}", path.display()))
}

fn load_net(spec_path: &Path, weights: Option<&Path>, seed: u64, exec: ExecArgs) -> Result<Network<f32>> {
    let spec = load_spec(spec_path)?;
    let mut net = match weights {
        Some(w) => {
            let params = Params::load(&spec, w).with_context(|| format!("reading weights {}", w.display()))?;
            Network::from_params(spec, params)?
        }
        None => Network::init(spec, seed)?,
    };
    net.set_storage(exec.storage);
    Ok(net)
}

fn load_data(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn load_config(path: &Path) -> Result<PerforationConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    text.parse::<PerforationConfig>()
        .with_context(|| format!("parsing config {}", path.display()))
}

/// Applies `config` if given, else the perforation written in the spec.
fn perforate(net: &mut Network<f32>, config: Option<&PerforationConfig>, interp: Interpolation, data: Option<&Dataset>) -> Result<()> {
    match config {
        Some(c) => apply_config(net, c, interp, data)?,
        None => apply_spec_perforation(net, data, interp)?,
    }
    Ok(())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn mask(a: MaskArgs, seed: u64) -> Result<()> {
    let mask_seed = derive(seed, "mask");
    let net = match &a.net {
        Some(p) => Some(load_net(p, a.weights.as_deref(), seed, ExecArgs::default())?),
        None => None,
    };
    let (xp, yp) = match (a.layer, &net) {
        (Some(l), Some(net)) => net
            .mask(l)
            .ok_or_else(|| invalid(format!("layer {l} is not a convolution")))?
            .dims(),
        _ => (a.xp.expect("required by clap"), a.yp.expect("required by clap")),
    };
    if xp == 0 || yp == 0 {
        return Err(invalid("output grid must be non-empty"));
    }
    let omega = xp * yp;
    let n = match (a.n, a.rate) {
        (Some(n), _) => n,
        (None, Some(r)) => r.kept(omega),
        (None, None) => unreachable!("required by clap"),
    };
    if n == 0 || n > omega {
        return Err(invalid(format!("N = {n} is outside 1..={omega}")));
    }
    let mut field = None;
    let mask: PerforationMask = match a.kind {
        MaskKind::Uniform => uniform_mask(xp, yp, n, mask_seed)?,
        MaskKind::Grid => grid_mask(xp, yp, n, mask_seed)?,
        MaskKind::Pooling => {
            let pool = match (a.pool, a.layer, &net) {
                (Some(p), _, _) => p,
                (None, Some(l), Some(net)) => net
                    .spec()
                    .following_pool(l)
                    .ok_or_else(|| invalid(format!("layer {l} is not followed by pooling")))?,
                _ => return Err(invalid("pooling masks need --pool or --layer")),
            };
            pooling_mask(xp, yp, n, pool, mask_seed)?
        }
        MaskKind::Impact => {
            let w: WeightField = match (&a.field, a.layer, &net, &a.data) {
                (Some(p), _, _, _) => io::load_weight_field(p).with_context(|| format!("reading field {}", p.display()))?,
                (None, Some(l), Some(net), Some(d)) => {
                    if a.weights.is_none() {
                        return Err(invalid("impact fields need trained --weights"));
                    }
                    let data = load_data(d)?.subset(a.impact_samples, derive(seed, "impact/subset"));
                    average_impacts(net, l, &data)?
                }
                _ => return Err(invalid("impact masks need --field, or --layer with --net, --weights and --data")),
            };
            if w.dims() != (xp, yp) {
                return Err(invalid(format!("impact field is {:?}, output grid is {:?}", w.dims(), (xp, yp))));
            }
            let m = top_n_by_weight(&w, n, mask_seed, MaskKind::Impact)?;
            field = Some(w);
            m
        }
        MaskKind::Full | MaskKind::Custom => unreachable!("rejected by the parser"),
    };
    io::save_mask(&a.out, &mask).with_context(|| format!("writing {}", a.out.display()))?;
    if let (Some(p), Some(w)) = (&a.field_out, &field) {
        io::save_weight_field(p, w)?;
    }
    let kept = mask.len();
    println!(
        "{} mask {xp}x{yp}: requested N={n}, kept N={kept} of {omega}, r = {}/{omega} ({:.4})",
        a.kind,
        omega - kept,
        mask.rate()
    );
    if kept != n {
        println!("note: grid masks keep Kx*Ky positions; achieved rate differs from the request");
    }
    Ok(())
}

const METRICS_COLUMNS: &str = "samples,loss,error,conv_mults,baseline_conv_mults,theoretical_speedup,act_bytes,baseline_act_bytes,memory_ratio";

pub fn eval(a: EvalArgs, seed: u64) -> Result<()> {
    let mut net = load_net(&a.net, Some(&a.weights), seed, a.exec)?;
    let mut data = load_data(&a.data)?;
    if let Some(n) = a.subset {
        data = data.subset(n, derive(seed, "eval/subset"));
    }
    let impact_data = match &a.impact_data {
        Some(p) => load_data(p)?,
        None => data.clone(),
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    if let Some(layer) = a.sweep_layer {
        let ladder = RateLadder::standard_prefix(a.ladder_steps)?;
        let mut csv = String::from("kind,level,rate,exact,theoretical_speedup,loss,error\n");
        for &kind in &a.kinds {
            for level in 0..=ladder.steps() {
                let cfg = PerforationConfig::new(vec![LayerPerforation {
                    layer,
                    kind,
                    rate: ladder.rate(level),
                    seed: layer_seed(seed, layer),
                }])?;
                let mut n = net.clone();
                apply_config(&mut n, &cfg, a.exec.interp, Some(&impact_data))?;
                let m = n.evaluate(&data)?;
                let report = account_network(&n)?;
                let exact = n.mask(layer).expect("validated").len();
                writeln!(
                    csv,
                    "{kind},{level},{},{exact},{},{},{}",
                    ladder.rate(level),
                    report.theoretical_speedup(),
                    m.loss,
                    m.error
                )?;
            }
        }
        write(&a.out.join("sweep.csv"), &csv)?;
        print!("{csv}");
        return Ok(());
    }

    let config = a.config.as_deref().map(load_config).transpose()?;
    perforate(&mut net, config.as_ref(), a.exec.interp, Some(&impact_data))?;
    let m = net.evaluate(&data)?;
    let report = account_network(&net)?;
    let metrics = format!(
        "{METRICS_COLUMNS}\n{},{},{},{},{},{},{},{},{}\n",
        data.len(),
        m.loss,
        m.error,
        report.conv_mults(),
        report.baseline_conv_mults(),
        report.theoretical_speedup(),
        report.activation_bytes(),
        report.baseline_activation_bytes(),
        report.memory_ratio()
    );
    write(&a.out.join("metrics.csv"), &metrics)?;
    write(&a.out.join("cost.csv"), report.to_csv())?;
    println!("{}", report.to_table());
    println!("loss {:.6}, error {:.4} on {} samples", m.loss, m.error, data.len());
    Ok(())
}

pub fn search(a: SearchArgs, seed: u64) -> Result<()> {
    let net = load_net(&a.net, Some(&a.weights), seed, a.exec)?;
    let subset = load_data(&a.data)?.subset(a.subset, derive(seed, "search/subset"));
    let ladder = RateLadder::standard_prefix(a.ladder_steps)?;
    let start = match &a.start {
        Some(p) => load_config(p)?,
        None => PerforationConfig::unperforated(net.spec(), a.mask, seed),
    };
    start.validate(net.spec())?;
    let opts = SearchOptions {
        cost_model: a.cost_model,
        interp: a.exec.interp,
        ladder,
        reps: a.reps,
        warmup: a.warmup,
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let out = greedy_configure(&net, &start, &subset, a.target, &opts)?;
    write(&a.out.join("config.txt"), out.config.to_string())?;
    write(&a.out.join("trace.csv"), out.trace_csv())?;
    println!(
        "{} steps: t {} -> {}, e {:.6} -> {:.6}, speedup {:.3}x",
        out.trace.len(),
        out.baseline.t,
        out.result.t,
        out.baseline.e,
        out.result.e,
        out.speedup()
    );
    if !out.reached_target {
        println!(
            "notice: rate ladder exhausted at {:.3}x before reaching the target {}x",
            out.speedup(),
            a.target
        );
    }
    print!("{}", out.config);

    if a.exhaustive {
        let all = exhaustive_search(&net, &start, &subset, &opts)?;
        let evals: Vec<_> = all.iter().map(|c| c.eval).collect();
        let front = pareto_front(&evals);
        let mut on_front = vec![false; all.len()];
        front.iter().for_each(|&i| on_front[i] = true);
        let base = &evals[0];
        let mut csv = String::new();
        for e in start.entries() {
            write!(csv, "level_{},", e.layer)?;
        }
        csv.push_str("t,e,speedup,pareto\n");
        for (c, front) in all.iter().zip(&on_front) {
            for l in &c.levels {
                write!(csv, "{l},")?;
            }
            writeln!(csv, "{},{},{},{}", c.eval.t, c.eval.e, c.eval.speedup(base), u8::from(*front))?;
        }
        write(&a.out.join("exhaustive.csv"), csv)?;
        println!("exhaustive: {} configurations, {} on the Pareto front", all.len(), front.len());
    }
    Ok(())
}

pub fn train(a: TrainArgs, seed: u64) -> Result<()> {
    let mut net = load_net(&a.net, a.weights.as_deref(), seed, a.exec)?;
    let data = load_data(&a.data)?;
    let config = a.config.as_deref().map(load_config).transpose()?;
    perforate(&mut net, config.as_ref(), a.exec.interp, Some(&data))?;
    let mut state = TrainState::new(a.lr, a.batch, seed);
    state.momentum = a.momentum;
    let logs = perfcnn::network::sgd_finetune(&mut net, &data, a.epochs, &mut state)?;
    net.params()
        .save(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    let mut csv = String::from("epoch,loss,error\n");
    for l in &logs {
        writeln!(csv, "{},{},{}", l.epoch, l.loss, l.error)?;
        println!("epoch {}: loss {:.6}, train error {:.4}", l.epoch, l.loss, l.error);
    }
    if let Some(p) = &a.log {
        write(p, &csv)?;
    }
    if let Some(p) = &a.test_data {
        let m = net.evaluate(&load_data(p)?)?;
        println!("test: loss {:.6}, error {:.4}", m.loss, m.error);
    }
    Ok(())
}

const LAYER_COLUMNS: &str =
    "layer,positions,exact,stack_factor,theoretical_speedup,median_s,baseline_median_s,empirical_speedup,threads,timing_flag";

pub fn bench(a: BenchArgs, seed: u64) -> Result<()> {
    let mut net = load_net(&a.net, a.weights.as_deref(), seed, a.exec)?;
    let data = a.data.as_deref().map(load_data).transpose()?;
    let images: Vec<Tensor3<f32>> = match &data {
        Some(d) => d.head(a.images).images,
        None => {
            let Shape::Spatial { x, y, s } = net.shapes()[0] else {
                return Err(invalid("network input must be spatial"));
            };
            let mut rng = seed::component_rng(seed, "bench/images");
            (0..a.images)
                .map(|_| Tensor3::from_fn(x, y, s, |_, _, _| rng.random_range(-1.0f32..1.0)))
                .collect()
        }
    };
    let config = a.config.as_deref().map(load_config).transpose()?;
    perforate(&mut net, config.as_ref(), a.exec.interp, data.as_ref())?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let report = bench_network(&net, &images, a.reps, a.warmup)?;
    write(&a.out.join("cost.csv"), report.to_csv())?;
    println!("{}", report.to_table());

    let (par, threads) = if a.parallel {
        (Parallelism::Rayon, rayon::current_num_threads())
    } else {
        (Parallelism::Single, 1)
    };
    let states = images.iter().map(|img| net.forward(img)).collect::<Result<Vec<_>, _>>()?;
    let mut csv = format!("{LAYER_COLUMNS}\n");
    for l in net.spec().conv_layers() {
        let conv = net.conv(l).expect("conv layer");
        let inputs = states.iter().map(|s| s.acts[l].densify()).collect::<Result<Vec<_>, _>>()?;
        let (xp, yp) = conv.mask().dims();
        let mut base = conv.clone();
        base.set_mask(PerforationMask::full(xp, yp), conv.interpolation(), net.tie_break())?;
        let stack = (xp * yp) / conv.mask().len();
        let tb = time_conv_layer(&base, &inputs, 1, par, a.reps, a.warmup)?;
        let tp = time_conv_layer(conv, &inputs, stack, par, a.reps, a.warmup)?;
        let flag = if tb.flagged || tp.flagged { "low_resolution" } else { "ok" };
        writeln!(
            csv,
            "{l},{},{},{stack},{},{},{},{},{threads},{flag}",
            xp * yp,
            conv.mask().len(),
            base.mults() as f64 / conv.mults() as f64,
            tp.median,
            tb.median,
            tb.median / tp.median
        )?;
    }
    write(&a.out.join("layers.csv"), &csv)?;
    print!("{csv}");
    if report.timing.as_ref().is_some_and(|t| t.median < MIN_RELIABLE_SECONDS) {
        println!("note: network timings are below timer resolution; use more images");
    }
    Ok(())
}

pub fn synth(a: SynthArgs, seed: u64) -> Result<()> {
    let data = synthetic(a.count, a.x, a.y, a.channels, a.classes, a.noise, derive(seed, "synth"))?;
    data.save(&a.out)?;
    println!(
        "{} images of {}x{}x{}, {} classes -> {}",
        data.len(),
        a.x,
        a.y,
        a.channels,
        a.classes,
        a.out.display()
    );
    Ok(())
}
