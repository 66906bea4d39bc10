mod common;

use proptest::prelude::*;
use softmoe::analysis::{cumulative_weight_curves, slot_correlation, token_contribution, Orientation};
use softmoe::soft_moe;
use softmoe::sparse::{self, RouterScores};
use softmoe::{Rng, Tensor};

fn layer_dims() -> impl Strategy<Value = (usize, usize, usize, usize, u64, bool)> {
    (1usize..10, 1usize..8, 1usize..5, 1usize..4, any::<u64>(), any::<bool>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn dispatch_columns_and_combine_rows_sum_to_one((m, d, n, p, seed, norm) in layer_dims()) {
        let (store, params, x) = common::random_layer(seed, m, d, n, p, norm);
        let (_, w) = soft_moe::forward(&store, &params, &x).unwrap();
        for j in 0..n * p {
            let s: f64 = w.dispatch.column(j).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
        for i in 0..m {
            let s: f64 = w.combine.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
        prop_assert!(w.dispatch.data().iter().chain(w.combine.data()).all(|&v| v >= 0.0));
    }

    #[test]
    fn soft_routing_drops_nothing((m, d, n, p, seed, norm) in layer_dims()) {
        let (store, params, x) = common::random_layer(seed, m, d, n, p, norm);
        let (_, w) = soft_moe::forward(&store, &params, &x).unwrap();
        for i in 0..m {
            prop_assert!(w.dispatch.row(i).iter().all(|&v| v > 0.0));
            prop_assert!(w.combine.row(i).iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn permuting_tokens_permutes_outputs((m, d, n, p, seed, norm) in layer_dims(), shuffle in any::<u64>()) {
        let (store, params, x) = common::random_layer(seed, m, d, n, p, norm);
        let mut perm: Vec<usize> = (0..m).collect();
        Rng::new(shuffle).shuffle(&mut perm);
        let rows = x.to_rows();
        let px = Tensor::from_rows(&perm.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>()).unwrap();
        let (y, _) = soft_moe::forward(&store, &params, &x).unwrap();
        let (py, _) = soft_moe::forward(&store, &params, &px).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            for (a, b) in py.row(k).iter().zip(y.row(i)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn buffers_respect_capacity(t in 1usize..40, e in 1usize..9, k in 1usize..4, c in 0.25f64..3.0, bpr in any::<bool>(), seed in any::<u64>()) {
        let k = k.min(e);
        let scores = sparse::random_scores(&mut Rng::new(seed), t, e, 1.0).unwrap();
        let tc = sparse::tokens_choice_route(&scores, k, c, bpr).unwrap();
        prop_assert_eq!(tc.capacity, sparse::tokens_choice_capacity(t, e, k, c));
        prop_assert!(tc.buffers.iter().all(|b| b.len() <= tc.capacity));
        if e as f64 <= t as f64 * c {
            let ec = sparse::experts_choice_route(&scores, c).unwrap();
            prop_assert!(ec.buffers.iter().all(|b| b.len() == ec.capacity));
        }
    }

    #[test]
    fn token_claims_are_conserved(t in 1usize..40, e in 1usize..9, k in 1usize..4, c in 0.25f64..3.0, bpr in any::<bool>(), seed in any::<u64>()) {
        let k = k.min(e);
        let scores = sparse::random_scores(&mut Rng::new(seed), t, e, 1.0).unwrap();
        let a = sparse::tokens_choice_route(&scores, k, c, bpr).unwrap();
        let claims = a.claims();
        prop_assert_eq!(claims.iter().sum::<usize>(), a.buffers.iter().map(Vec::len).sum::<usize>());
        prop_assert!(claims.iter().all(|&n| n <= k));
        let zero: Vec<usize> = (0..t).filter(|&i| claims[i] == 0).collect();
        prop_assert_eq!(&zero, &a.dropped);
        for buf in &a.buffers {
            let mut seen: Vec<usize> = buf.iter().map(|&(i, _)| i).collect();
            seen.sort_unstable();
            seen.dedup();
            prop_assert_eq!(seen.len(), buf.len());
        }
        let stats = a.stats();
        prop_assert!((stats.drop_rate - a.dropped.len() as f64 / t as f64).abs() < 1e-15);
    }

    #[test]
    fn priority_routing_keeps_more_gate_mass(t in 1usize..64, e in 1usize..9, c in 0.25f64..1.5, seed in any::<u64>()) {
        let scores = sparse::random_scores(&mut Rng::new(seed), t, e, 2.0).unwrap();
        let plain = sparse::tokens_choice_route(&scores, 1, c, false).unwrap();
        let bpr = sparse::tokens_choice_route(&scores, 1, c, true).unwrap();
        prop_assert_eq!(plain.dropped.len(), bpr.dropped.len());
        prop_assert!(bpr.dropped_gate_mass(&scores) <= plain.dropped_gate_mass(&scores) + 1e-12);
    }

    #[test]
    fn cumulative_curves_are_concave_and_end_at_one(m in 1usize..12, s in 1usize..12, seed in any::<u64>()) {
        let logits = Rng::new(seed).normal_tensor(&[m, s], 2.0);
        let dispatch = soft_moe::dispatch_weights(&logits).unwrap();
        let combine = soft_moe::combine_weights(&logits).unwrap();
        for (w, o) in [(&dispatch, Orientation::Dispatch), (&combine, Orientation::Combine)] {
            for curve in cumulative_weight_curves(w, o).unwrap() {
                prop_assert!((curve.last().unwrap() - 1.0).abs() < 1e-9);
                let mut prev_step = f64::INFINITY;
                let mut prev = 0.0;
                for &v in &curve {
                    let step = v - prev;
                    prop_assert!(step >= -1e-15 && step <= prev_step + 1e-15);
                    prev_step = step;
                    prev = v;
                }
            }
        }
    }

    #[test]
    fn token_contributions_sum_to_slot_count(m in 1usize..12, s in 1usize..12, seed in any::<u64>()) {
        let logits = Rng::new(seed).normal_tensor(&[m, s], 2.0);
        let tc = token_contribution(&soft_moe::dispatch_weights(&logits).unwrap()).unwrap();
        prop_assert!((tc.sums.iter().sum::<f64>() - s as f64).abs() < 1e-9);
        prop_assert!(tc.quantiles.windows(2).all(|w| w[0].1 <= w[1].1));
    }

    #[test]
    fn slot_correlation_follows_column_signs(d in 1usize..8, s in 1usize..8, seed in any::<u64>(), flips in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let phi = rng.normal_tensor(&[d, s], 1.0);
        let sign = |j: usize| if flips >> (j % 64) & 1 == 1 { -1.0 } else { 1.0 };
        let scale: Vec<f64> = (0..s).map(|_| rng.uniform(0.1, 10.0)).collect();
        let mut flipped = phi.clone();
        for (k, v) in flipped.data_mut().iter_mut().enumerate() {
            *v *= sign(k % s) * scale[k % s];
        }
        let base = slot_correlation(&phi).unwrap();
        let got = slot_correlation(&flipped).unwrap();
        for i in 0..s {
            prop_assert!((base.at(i, i) - 1.0).abs() < 1e-12);
            for j in 0..s {
                prop_assert!((base.at(i, j) - base.at(j, i)).abs() < 1e-15);
                prop_assert!(base.at(i, j).abs() <= 1.0);
                prop_assert!((got.at(i, j) - sign(i) * sign(j) * base.at(i, j)).abs() < 1e-12);
            }
        }
    }
}

/// Every 8×4 gate matrix from 500 seeds against the loop simulator, over
/// all K, capacity factors and both orders.
#[test]
fn tokens_choice_matches_simulator_exhaustively() {
    for seed in 0..500u64 {
        let scores = sparse::random_scores(&mut Rng::new(seed), 8, 4, 1.0).unwrap();
        let gates = common::mat(scores.gates());
        for k in 1..=4 {
            for c in [0.25, 0.5, 0.75, 1.0, 1.125, 1.5, 2.0] {
                for bpr in [false, true] {
                    let a = sparse::tokens_choice_route(&scores, k, c, bpr).unwrap();
                    let cap = ((c * (k * 8) as f64 / 4.0) - 1e-9).ceil().max(1.0) as usize;
                    assert_eq!(a.capacity, cap);
                    let (bufs, dropped) = common::tokens_choice(&gates, k, cap, bpr);
                    assert_eq!(a.buffers, bufs, "seed {seed} k {k} c {c} bpr {bpr}");
                    assert_eq!(a.dropped, dropped);
                }
            }
        }
    }
}

#[test]
fn experts_choice_matches_simulator_exhaustively() {
    for seed in 0..500u64 {
        let scores = sparse::random_scores(&mut Rng::new(seed), 8, 4, 1.0).unwrap();
        let gates = common::mat(scores.gates());
        for c in [0.5, 1.0, 1.125, 2.0, 4.0] {
            let a = sparse::experts_choice_route(&scores, c).unwrap();
            let cap = ((c * 2.0).round() as usize).clamp(1, 8);
            let (bufs, dropped) = common::experts_choice(&gates, cap);
            assert_eq!(a.buffers, bufs);
            assert_eq!(a.dropped, dropped);
        }
    }
}

#[test]
fn tied_gates_keep_index_order() {
    let scores = RouterScores::new(Tensor::filled(&[6, 2], 0.5)).unwrap();
    let a = sparse::tokens_choice_route(&scores, 1, 1.0, true).unwrap();
    assert_eq!(a.buffers[0].iter().map(|&(t, _)| t).collect::<Vec<_>>(), vec![0, 1, 2]);
    assert_eq!(a.dropped, vec![3, 4, 5]);
}

#[test]
fn cumulative_curves_concave_over_many_seeds() {
    for seed in 0..1000u64 {
        let logits = Rng::new(seed).normal_tensor(&[16, 8], 3.0);
        let w = soft_moe::combine_weights(&logits).unwrap();
        for curve in cumulative_weight_curves(&w, Orientation::Combine).unwrap() {
            let steps: Vec<f64> = std::iter::once(curve[0]).chain(curve.windows(2).map(|p| p[1] - p[0])).collect();
            assert!(steps.windows(2).all(|s| s[1] <= s[0] + 1e-15), "seed {seed}");
        }
    }
}
