use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xkfac::curvature::{assemble_block, estimate_factors, Coupling, Curvature, EstimateConfig, LabelMode};
use xkfac::linalg::min_eigenvalue_sym;
use xkfac::net::{Network, NormMode};
use xkfac::penalty::{merge_weights, merged_forward, penalty_grad, penalty_value, Interpretation, PenaltyState};
use xkfac::Matrix;

fn uniform(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0))
}

fn norm_net(r: &mut ChaCha8Rng, widths: &[usize], mode: NormMode) -> Network {
    let mut net = Network::mlp(widths, Some(mode), r).unwrap();
    for n in net.norm_layers_mut() {
        for i in 0..n.channels() {
            n.gamma[i] = r.random_range(0.5..1.5);
            n.beta[i] = r.random_range(-0.5..0.5);
            n.pop_mean[i] = r.random_range(-0.3..0.3);
            n.pop_var[i] = r.random_range(0.3..2.0);
        }
    }
    net
}

fn widths(r: &mut ChaCha8Rng) -> Vec<usize> {
    vec![r.random_range(2..6), r.random_range(2..6), r.random_range(2..6), r.random_range(2..4)]
}

/// A random two-term penalty state over the merged weights of `net`.
fn random_state(r: &mut ChaCha8Rng, net: &Network, n: usize, damping: f64) -> PenaltyState {
    let anchors = merge_weights(net, None, Interpretation::EvalStats).unwrap().matrices();
    let mut c = Curvature::new();
    for (ls, lt) in [(0.0, 1.0), (0.5, 0.5)] {
        let xs: Vec<Matrix> = (0..2).map(|_| uniform(r, net.input_features(), n)).collect();
        let cfg = EstimateConfig { coupling: Coupling::Full, ..Default::default() };
        c.accumulate(ls, estimate_factors(net, &xs, n, cfg, r).unwrap(), lt).unwrap();
    }
    PenaltyState::new(anchors, c, damping, 0.5).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn renormalization_without_clipping_matches_population_normalization(seed in 0u64..10_000) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let w = widths(&mut r);
        let mut brn = norm_net(&mut r, &w, NormMode::Brn);
        brn.set_renorm_limits(1e6, 1e6);
        let x = uniform(&mut r, w[0], 5);
        let d = brn.forward(&x, true).unwrap().logits().max_abs_diff(&brn.predict(&x).unwrap()).unwrap();
        prop_assert!(d < 1e-10, "{d}");
    }

    #[test]
    fn eval_forward_commutes_with_example_order(seed in 0u64..10_000) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let w = widths(&mut r);
        let net = norm_net(&mut r, &w, NormMode::Bn);
        let x = uniform(&mut r, w[0], 6);
        let perm = [3, 0, 5, 1, 4, 2];
        let a = net.predict(&x).unwrap().select_cols(&perm);
        let b = net.predict(&x.select_cols(&perm)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn merged_forward_matches_every_block(seed in 0u64..10_000, brn in any::<bool>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let w = widths(&mut r);
        let (mode, interp) = if brn { (NormMode::Brn, Interpretation::Brn) } else { (NormMode::Bn, Interpretation::Bn) };
        let mut net = norm_net(&mut r, &w, mode);
        net.set_renorm_limits(2.0, 0.5);
        let x = uniform(&mut r, w[0], 4);
        let fwd = net.forward(&x, true).unwrap();
        for m in merge_weights(&net, Some(&fwd), interp).unwrap().blocks {
            let out = merged_forward(&m, &fwd.acts[m.block.input()]).unwrap();
            prop_assert!(out.max_abs_diff(&fwd.acts[m.block.output()]).unwrap() < 1e-12);
        }
    }

    #[test]
    fn factors_ignore_example_order_within_batches(seed in 0u64..10_000, n in 2usize..5) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let w = widths(&mut r);
        let net = norm_net(&mut r, &w, NormMode::Bn);
        let xs: Vec<Matrix> = (0..2).map(|_| uniform(&mut r, w[0], n)).collect();
        let rev: Vec<usize> = (0..n).rev().collect();
        let flipped: Vec<Matrix> = xs.iter().map(|x| x.select_cols(&rev)).collect();
        let cfg = EstimateConfig { labels: LabelMode::Exact, coupling: Coupling::Full, ..Default::default() };
        let a = estimate_factors(&net, &xs, n, cfg, &mut r).unwrap();
        let b = estimate_factors(&net, &flipped, n, cfg, &mut r).unwrap();
        for (f, g) in a.blocks.iter().zip(&b.blocks) {
            for (u, v) in [(&f.a, &g.a), (&f.a_prime, &g.a_prime), (&f.h_prime, &g.h_prime), (&f.h_dprime, &g.h_dprime)] {
                prop_assert!(u.max_abs_diff(v).unwrap() < 1e-12);
            }
        }
    }

    #[test]
    fn assembled_blocks_are_psd(seed in 0u64..10_000, n in 1usize..6) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let w = widths(&mut r);
        let net = norm_net(&mut r, &w, NormMode::Bn);
        let xs: Vec<Matrix> = (0..2).map(|_| uniform(&mut r, w[0], n)).collect();
        let fs = estimate_factors(&net, &xs, n, EstimateConfig::default(), &mut r).unwrap();
        for l in 0..fs.layers() {
            let h = assemble_block(&fs, l, l).unwrap();
            prop_assert!(min_eigenvalue_sym(&h.symmetrized().unwrap()).unwrap() >= -1e-8);
        }
    }

    #[test]
    fn penalty_is_non_negative_with_consistent_gradient(seed in 0u64..10_000, n in 1usize..4, damping in 0.0f64..0.1) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let w = widths(&mut r);
        let net = norm_net(&mut r, &w, NormMode::Bn);
        let st = random_state(&mut r, &net, n, damping);
        let cur: Vec<Matrix> = st.anchors.iter().map(|a| a.add(&uniform(&mut r, a.rows(), a.cols())).unwrap()).collect();
        let g = penalty_grad(&st, &cur).unwrap();
        let v = penalty_value(&st, &cur, &g).unwrap();
        prop_assert!(v >= -1e-12);
        let dir: Vec<Matrix> = cur.iter().map(|c| uniform(&mut r, c.rows(), c.cols())).collect();
        let at = |t: f64| {
            let p: Vec<Matrix> = cur.iter().zip(&dir).map(|(c, d)| { let mut m = c.clone(); m.add_scaled(t, d).unwrap(); m }).collect();
            penalty_value(&st, &p, &penalty_grad(&st, &p).unwrap()).unwrap()
        };
        let h = 1e-5;
        let fd = (at(h) - at(-h)) / (2.0 * h);
        let exact: f64 = g.iter().zip(&dir).map(|(a, b)| a.dot(b).unwrap()).sum();
        prop_assert!((fd - exact).abs() <= 1e-6 * exact.abs().max(1.0), "{fd} vs {exact}");
    }

    #[test]
    fn empty_curvature_is_recentred_weight_decay(seed in 0u64..10_000, damping in 0.0f64..1.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let w = widths(&mut r);
        let net = norm_net(&mut r, &w, NormMode::Bn);
        let anchors = merge_weights(&net, None, Interpretation::EvalStats).unwrap().matrices();
        let st = PenaltyState::new(anchors.clone(), Curvature::new(), damping, 0.5).unwrap();
        let cur: Vec<Matrix> = anchors.iter().map(|a| a.add(&uniform(&mut r, a.rows(), a.cols())).unwrap()).collect();
        for ((g, c), a) in penalty_grad(&st, &cur).unwrap().iter().zip(&cur).zip(&anchors) {
            prop_assert_eq!(g, &c.sub(a).unwrap().scaled(damping));
        }
    }
}
