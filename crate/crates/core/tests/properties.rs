use proptest::prelude::*;

use perfcnn::lowering::ConvGeometry;
use perfcnn::masks::{
    grid_achieved, grid_indices, grid_mask, neighbor_map, pooling_mask, pooling_usage_counts, top_n_by_weight,
    uniform_mask, MaskKind, PoolGeometry, TieBreak, WeightField,
};
use perfcnn::perfconv::{InterpMap, Interpolation, PerforatedConvLayer};
use perfcnn::search::{dominates, pareto_front, CandidateEvaluation};
use perfcnn::tensor::{direct_conv, KernelTensor, Matrix, Pos, Tensor3};

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn perforated_forward_matches_direct_conv_on_mask(
        (d, x, y, s, t) in (prop_oneof![Just(1usize), Just(3), Just(5)], 5usize..12, 5usize..12, 1usize..4, 1usize..4),
        keep in 0.05f64..1.0,
        seed in any::<u64>(),
        data in values(12 * 12 * 4 + 5 * 5 * 4 * 4),
    ) {
        let u = Tensor3::from_vec(x, y, s, data[..x * y * s].to_vec()).unwrap();
        let k = KernelTensor::from_vec(d, s, t, data[x * y * s..x * y * s + d * d * s * t].to_vec()).unwrap();
        let (xp, yp) = (x - d + 1, y - d + 1);
        let n = ((keep * (xp * yp) as f64) as usize).max(1);
        let mask = uniform_mask(xp, yp, n, seed).unwrap();
        let layer = PerforatedConvLayer::new(k.clone(), (x, y), mask.clone(), Interpolation::Nearest).unwrap();
        let v = layer.forward_compact(&u).unwrap();
        let full = direct_conv(&u, &k).unwrap();
        let nb = neighbor_map(&mask, TieBreak::LowestIndex).unwrap();
        let dense = layer.forward_dense(&u).unwrap();
        for (r, p) in mask.positions().iter().enumerate() {
            for c in 0..t {
                prop_assert!((v.get(r, c) - full.get(p.x - 1, p.y - 1, c)).abs() < 1e-12);
            }
        }
        for xx in 1..=xp {
            for yy in 1..=yp {
                let q = nb.nearest(xx, yy);
                for c in 0..t {
                    prop_assert_eq!(dense.get(xx - 1, yy - 1, c), full.get(q.x - 1, q.y - 1, c));
                }
            }
        }
    }

    #[test]
    fn perforated_layer_is_linear_in_its_input(
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
        seed in any::<u64>(),
        interp in prop_oneof![Just(Interpolation::Nearest), Just(Interpolation::Zero), Just(Interpolation::Barycentric)],
        data in values(2 * 9 * 9 * 2 + 9 * 2 * 3),
    ) {
        let u1 = Tensor3::from_vec(9, 9, 2, data[..162].to_vec()).unwrap();
        let u2 = Tensor3::from_vec(9, 9, 2, data[162..324].to_vec()).unwrap();
        let k = KernelTensor::from_vec(3, 2, 3, data[324..].to_vec()).unwrap();
        let mask = uniform_mask(7, 7, 20, seed).unwrap();
        let layer = PerforatedConvLayer::new(k, (9, 9), mask, interp).unwrap();
        let mix = Tensor3::from_fn(9, 9, 2, |i, j, c| a * u1.get(i, j, c) + b * u2.get(i, j, c));
        let f = |u: &Tensor3<f64>| layer.forward_dense(u).unwrap();
        let (f1, f2, fm) = (f(&u1), f(&u2), f(&mix));
        for (i, &v) in fm.as_slice().iter().enumerate() {
            prop_assert!((v - (a * f1.as_slice()[i] + b * f2.as_slice()[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn uniform_masks_have_n_distinct_sorted_positions(xp in 1usize..20, yp in 1usize..20, frac in 0.0f64..1.0, seed in any::<u64>()) {
        let n = 1 + (frac * (xp * yp - 1) as f64) as usize;
        let m = uniform_mask(xp, yp, n, seed).unwrap();
        prop_assert_eq!(m.len(), n);
        let flat: Vec<usize> = m.positions().iter().map(|p| p.flat(yp)).collect();
        prop_assert!(flat.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(m, uniform_mask(xp, yp, n, seed).unwrap());
    }

    #[test]
    fn grid_indices_increase_within_range(len in 1usize..=64, kfrac in 0.0f64..1.0, u in 1e-9f64..1.0) {
        let k = 1 + (kfrac * (len - 1) as f64) as usize;
        let a = grid_indices(len, k, u);
        prop_assert_eq!(a.len(), k);
        prop_assert!(a.iter().all(|&v| (1..=len).contains(&v)));
        prop_assert!(a.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn grid_masks_report_their_actual_size(xp in 1usize..24, yp in 1usize..24, frac in 0.0f64..1.0, seed in any::<u64>()) {
        let n = 1 + (frac * (xp * yp - 1) as f64) as usize;
        match grid_mask(xp, yp, n, seed) {
            Ok(m) => {
                prop_assert_eq!(m.len(), grid_achieved(xp, yp, n));
                prop_assert!(m.len() <= n);
                prop_assert_eq!(m.kind(), MaskKind::Grid);
            }
            Err(_) => prop_assert_eq!(grid_achieved(xp, yp, n), 0),
        }
    }

    #[test]
    fn top_n_keeps_the_heaviest(xp in 1usize..12, yp in 1usize..12, frac in 0.0f64..1.0, seed in any::<u64>(), w in prop::collection::vec(0u8..6, 144)) {
        let n = 1 + (frac * (xp * yp - 1) as f64) as usize;
        let field = WeightField::new(xp, yp, w[..xp * yp].iter().map(|&v| v as f64).collect()).unwrap();
        let m = top_n_by_weight(&field, n, seed, MaskKind::Impact).unwrap();
        prop_assert_eq!(m.len(), n);
        let member = m.set().membership();
        let kept_min = (0..xp * yp).filter(|&i| member[i]).map(|i| field.values()[i]).fold(f64::INFINITY, f64::min);
        let dropped_max = (0..xp * yp).filter(|&i| !member[i]).map(|i| field.values()[i]).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(kept_min >= dropped_max);
    }

    #[test]
    fn pooling_counts_match_window_enumeration(xp in 1usize..14, yp in 1usize..14, size in 1usize..4, stride in 1usize..3, pad in 0usize..2) {
        prop_assume!(pad < size && size <= xp + 2 * pad && size <= yp + 2 * pad);
        let pool = PoolGeometry { size, stride, pad };
        let a = pooling_usage_counts(xp, yp, pool).unwrap();
        let windows = |len: usize| (len + 2 * pad - size) / stride + 1;
        let mut oracle = vec![0.0; xp * yp];
        for wx in 0..windows(xp) {
            for wy in 0..windows(yp) {
                for i in 0..size {
                    for j in 0..size {
                        let (x, y) = ((wx * stride + i) as isize - pad as isize, (wy * stride + j) as isize - pad as isize);
                        if x >= 0 && y >= 0 && (x as usize) < xp && (y as usize) < yp {
                            oracle[x as usize * yp + y as usize] += 1.0;
                        }
                    }
                }
            }
        }
        prop_assert_eq!(a.values(), &oracle[..]);
        let n = 1 + xp * yp / 3;
        let m = pooling_mask(xp, yp, n, pool, 5).unwrap();
        prop_assert_eq!(m.len(), n);
    }

    #[test]
    fn neighbor_map_is_optimal(xp in 1usize..=32, yp in 1usize..=32, frac in 0.0f64..0.3, seed in any::<u64>(), tseed in any::<u64>(), seeded in any::<bool>()) {
        let n = 1 + (frac * (xp * yp - 1) as f64) as usize;
        let m = uniform_mask(xp, yp, n, seed).unwrap();
        let tie = if seeded { TieBreak::Seeded(tseed) } else { TieBreak::LowestIndex };
        let nb = neighbor_map(&m, tie).unwrap();
        let member = m.set().membership();
        for x in 1..=xp {
            for y in 1..=yp {
                let p = Pos::new(x, y);
                let q = nb.nearest(x, y);
                prop_assert!(member[q.flat(yp)]);
                let best = m.positions().iter().map(|&c| p.dist2(c)).min().unwrap();
                prop_assert_eq!(p.dist2(q), best);
                if member[p.flat(yp)] {
                    prop_assert_eq!(q, p);
                } else if !seeded {
                    let lowest = m.positions().iter().filter(|&&c| p.dist2(c) == best).map(|c| c.flat(yp)).min().unwrap();
                    prop_assert_eq!(q.flat(yp), lowest);
                }
            }
        }
    }

    #[test]
    fn interpolation_backward_is_the_adjoint(
        seed in any::<u64>(),
        interp in prop_oneof![Just(Interpolation::Nearest), Just(Interpolation::Zero), Just(Interpolation::Barycentric)],
        data in values(9 * 11 * 2 + 99 * 2),
        n in 1usize..60,
    ) {
        let m = uniform_mask(9, 11, n, seed).unwrap();
        let nb = neighbor_map(&m, TieBreak::LowestIndex).unwrap();
        let map = InterpMap::build(&m, &nb, interp).unwrap();
        let v = Matrix::from_vec(n, 2, data[..n * 2].to_vec()).unwrap();
        let g = Tensor3::from_vec(9, 11, 2, data[198..].to_vec()).unwrap();
        let lhs: f64 = map.apply(&v).unwrap().as_slice().iter().zip(g.as_slice()).map(|(a, b)| a * b).sum();
        let rhs: f64 = v.as_slice().iter().zip(map.adjoint(&g).unwrap().as_slice()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn pareto_front_matches_quadratic_oracle(points in prop::collection::vec((1u8..20, 0u8..20), 1..100)) {
        let evals: Vec<CandidateEvaluation> = points.iter().map(|&(t, e)| CandidateEvaluation { t: t as f64, e: e as f64 / 10.0 }).collect();
        let front = pareto_front(&evals);
        let mut oracle: Vec<usize> = (0..evals.len())
            .filter(|&i| !evals.iter().any(|o| dominates(o, &evals[i])))
            .collect();
        let mut got = front.clone();
        got.sort_unstable();
        oracle.sort_unstable();
        prop_assert_eq!(got, oracle);
        prop_assert!(front.windows(2).all(|w| evals[w[0]].t >= evals[w[1]].t));
    }
}

#[test]
fn strided_geometry_output_sizes() {
    let g = ConvGeometry { kernel: 3, stride: 2, pad: 1 };
    assert_eq!(g.output_dims(7, 8).unwrap(), (4, 4));
    assert!(ConvGeometry { kernel: 5, stride: 1, pad: 0 }.output_dims(4, 9).is_err());
}
