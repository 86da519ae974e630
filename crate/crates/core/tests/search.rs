use perfcnn::config::{LayerPerforation, PerforationConfig};
use perfcnn::masks::MaskKind;
use perfcnn::network::{iterative_impact_perforation, synthetic, Dataset, Network, NetworkSpec};
use perfcnn::perfconv::Interpolation;
use perfcnn::rate::{Rate, RateLadder};
use perfcnn::search::{evaluate_config, greedy_configure, CostModel, SearchOptions};

const TWO_CONV: &str = "\
input x=10 y=10 s=2
conv d=3 t=4 pad=1
relu
maxpool k=2 stride=2
conv d=3 t=6 pad=1
relu
gap
fc t=3
";

fn setup(spec: &str) -> (Network<f32>, Dataset) {
    let spec: NetworkSpec = spec.parse().unwrap();
    let net = Network::init(spec, 5).unwrap();
    let data = synthetic(48, 10, 10, 2, 3, 0.3, 6).unwrap();
    (net, data)
}

fn opts(steps: usize) -> SearchOptions {
    SearchOptions {
        ladder: RateLadder::standard_prefix(steps).unwrap(),
        ..SearchOptions::default()
    }
}

#[test]
fn zero_config_evaluates_to_the_unperforated_network() {
    let (net, data) = setup(TWO_CONV);
    let cfg = PerforationConfig::unperforated(net.spec(), MaskKind::Uniform, 1);
    let ev = evaluate_config(&net, &cfg, &data, &opts(6)).unwrap();
    assert_eq!(ev.e, net.evaluate(&data).unwrap().loss);
    let mults = perfcnn::bench::account_network(&net).unwrap().conv_mults();
    assert_eq!(ev.t, mults as f64);
}

#[test]
fn raising_a_rate_never_raises_theoretical_cost() {
    let (net, data) = setup(TWO_CONV);
    let o = opts(8);
    for kind in [MaskKind::Uniform, MaskKind::Grid, MaskKind::Pooling, MaskKind::Impact] {
        // Layer 3 is not followed by pooling.
        let second = if kind == MaskKind::Pooling { MaskKind::Uniform } else { kind };
        let base = PerforationConfig::new(vec![
            LayerPerforation { layer: 0, kind, rate: Rate::ZERO, seed: 2 },
            LayerPerforation { layer: 3, kind: second, rate: Rate::ZERO, seed: 2 },
        ])
        .unwrap();
        for layer in 0..2 {
            let mut prev = f64::INFINITY;
            for level in 0..=o.ladder.steps() {
                let mut lv = vec![0, 0];
                lv[layer] = level;
                let ev = evaluate_config(&net, &base.with_levels(&o.ladder, &lv).unwrap(), &data, &o).unwrap();
                assert!(ev.t <= prev, "{kind} layer {layer} level {level}");
                prev = ev.t;
            }
        }
    }
}

#[test]
fn heavy_perforation_raises_the_objective() {
    let (net, data) = setup(TWO_CONV);
    let trained = {
        let mut n = net.clone();
        perfcnn::network::sgd_finetune(&mut n, &data, 15, &mut perfcnn::network::TrainState::new(0.05, 8, 3)).unwrap();
        n
    };
    let o = opts(20);
    let e0 = evaluate_config(&trained, &PerforationConfig::unperforated(trained.spec(), MaskKind::Uniform, 0), &data, &o)
        .unwrap()
        .e;
    let mut es: Vec<f64> = (0..5)
        .map(|s| {
            let cfg = PerforationConfig::uniform_rate(trained.spec(), MaskKind::Uniform, Rate::new(19, 20).unwrap(), s);
            evaluate_config(&trained, &cfg, &data, &o).unwrap().e
        })
        .collect();
    es.sort_by(f64::total_cmp);
    assert!(es[2] >= e0, "median {} below {e0}", es[2]);
}

#[test]
fn single_layer_greedy_scans_the_ladder() {
    let spec = "input x=10 y=10 s=2\nconv d=3 t=4\nrelu\ngap\nfc t=3\n";
    let (net, data) = setup(spec);
    let o = opts(10);
    let start = PerforationConfig::unperforated(net.spec(), MaskKind::Uniform, 4);
    let out = greedy_configure(&net, &start, &data, 3.0, &o).unwrap();
    assert!(out.reached_target);
    // Scan: the first ladder level whose cost reaches the target.
    let t0 = out.baseline.t;
    let mut expected = None;
    for level in 1..=o.ladder.steps() {
        let ev = evaluate_config(&net, &start.with_levels(&o.ladder, &[level]).unwrap(), &data, &o).unwrap();
        if t0 / ev.t >= 3.0 {
            expected = Some((level, ev));
            break;
        }
    }
    let (level, ev) = expected.unwrap();
    assert_eq!(out.config.levels(&o.ladder).unwrap(), vec![level]);
    assert_eq!(out.result, ev);
    assert_eq!(out.trace.len(), level);
}

#[test]
fn greedy_trace_is_strictly_decreasing_and_deterministic() {
    let (net, data) = setup(TWO_CONV);
    let o = opts(12);
    let start = PerforationConfig::unperforated(net.spec(), MaskKind::Grid, 9);
    let a = greedy_configure(&net, &start, &data, 4.0, &o).unwrap();
    let b = greedy_configure(&net, &start, &data, 4.0, &o).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.config, b.config);
    let mut prev = a.baseline.t;
    for s in &a.trace {
        assert!(s.t < prev);
        prev = s.t;
    }
    assert!(a.reached_target && a.speedup() >= 4.0);
    let csv = a.trace_csv();
    assert!(csv.starts_with("step,layer,rate,t,e,cost\n"));
    assert_eq!(csv.lines().count(), a.trace.len() + 1);
}

#[test]
fn exhausted_ladder_is_reported() {
    let (net, data) = setup(TWO_CONV);
    let o = opts(2);
    let start = PerforationConfig::unperforated(net.spec(), MaskKind::Uniform, 9);
    let out = greedy_configure(&net, &start, &data, 50.0, &o).unwrap();
    assert!(!out.reached_target);
    assert_eq!(out.config.levels(&o.ladder).unwrap(), vec![2, 2]);
}

#[test]
fn degenerate_network_fails_explicitly() {
    let spec = "input x=3 y=3 s=1\nconv d=3 t=2\ngap\nfc t=2\n";
    let (net, _) = setup(spec);
    let data = synthetic(4, 3, 3, 1, 2, 0.1, 1).unwrap();
    let start = PerforationConfig::unperforated(net.spec(), MaskKind::Uniform, 0);
    assert!(greedy_configure(&net, &start, &data, 2.0, &opts(5)).is_err());
    assert!(greedy_configure(&net, &start, &data, 1.0, &opts(5)).is_err());
}

#[test]
fn wall_clock_cost_model_runs() {
    let (net, data) = setup(TWO_CONV);
    let o = SearchOptions {
        cost_model: CostModel::Time,
        reps: 3,
        warmup: 0,
        ..opts(4)
    };
    let cfg = PerforationConfig::uniform_rate(net.spec(), MaskKind::Uniform, Rate::new(1, 2).unwrap(), 1);
    let ev = evaluate_config(&net, &cfg, &data.head(8), &o).unwrap();
    assert!(ev.t > 0.0 && ev.e.is_finite());
}

#[test]
fn iterative_impact_recomputes_before_every_step() {
    let (mut net, data) = setup(TWO_CONV);
    let ladder = RateLadder::standard_prefix(4).unwrap();
    let out = iterative_impact_perforation(&mut net, &[0, 3, 0, 3, 0], &ladder, &data, 3, Interpolation::Nearest).unwrap();
    assert_eq!(out.recomputations, 5);
    assert_eq!(out.levels, vec![(0, 3), (3, 2)]);
    assert_eq!(net.mask(0).unwrap().len(), ladder.rate(3).kept(100));
    assert_eq!(net.mask(3).unwrap().len(), ladder.rate(2).kept(25));
    assert!(iterative_impact_perforation(&mut net, &[3, 3, 3, 3, 3], &ladder, &data, 3, Interpolation::Nearest).is_err());
}
