//! Cross-module invariants checked against independent oracles.

use anna_core::anna::{anna_forward, anna_forward_linear_memory, table_hash};
use anna_core::attention::{ema_forward, low_rank_attention_with, softmax_qkv, Association};
use anna_core::compiler::{compile, EncodingChoice, HeadRole, LayerRole};
use anna_core::lsh::{
    euclidean_to_angle, select_parameters, AnnaConfig, HyperplaneFamily, HyperplaneHash, LshFamilyDescriptor,
};
use anna_core::mpc::protocols::sort_protocol;
use anna_core::mpc::{default_memory, round_trace, run_protocol, ProtocolKind, ProtocolParams, Word};
use anna_core::rng::stream;
use anna_core::tasks::{gen_khop, khop_labels, KhopGen};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn unit(dim: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let v = Array1::from_shape_fn(dim, |_| rng.sample::<f64, _>(StandardNormal));
    let n = v.dot(&v).sqrt();
    v / n
}

/// A unit vector at chord distance `d` from the unit vector `x`.
fn at_distance(x: &Array1<f64>, d: f64, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let r = unit(x.len(), rng);
    let side = &r - &(x * r.dot(x));
    let side = &side / side.dot(&side).sqrt();
    let theta = euclidean_to_angle(d);
    x * theta.cos() + side * theta.sin()
}

fn gaussian(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.sample(StandardNormal))
}

#[test]
fn single_hash_collision_rates_respect_sensitivity() {
    let (dim, r, c) = (12, 0.3, 3.0);
    let desc = LshFamilyDescriptor::hyperplane(dim, r, c).unwrap();
    let (p1, p2) = (desc.sensitivity.p1, desc.sensitivity.p2);
    let samples = 4000;
    let mut rng = stream(11, &[]);
    let hashes: Vec<HyperplaneHash> = (0..samples).map(|_| HyperplaneHash::sample(dim, &mut rng)).collect();
    let sign = |h: &HyperplaneHash, v: &Array1<f64>| h.project(v.as_slice().unwrap()) >= 0.0;
    for trial in 0..20 {
        let x = unit(dim, &mut rng);
        let near = at_distance(&x, rng.random_range(0.0..=r), &mut rng);
        let far = at_distance(&x, rng.random_range(c * r + 1e-3..2.0), &mut rng);
        let rate = |y: &Array1<f64>| hashes.iter().filter(|h| sign(h, &x) == sign(h, y)).count() as f64 / samples as f64;
        let sigma = |p: f64| (p * (1.0 - p) / samples as f64).sqrt();
        assert!(rate(&near) >= p1 - 3.0 * sigma(p1), "trial {trial}: near rate {} < {p1}", rate(&near));
        assert!(rate(&far) <= p2 + 3.0 * sigma(p2), "trial {trial}: far rate {} > {p2}", rate(&far));
    }
}

#[test]
fn composite_far_collisions_are_rare_at_selected_z() {
    let (n, dim, r, c) = (4usize, 8, 0.3, 3.0);
    let desc = LshFamilyDescriptor::hyperplane(dim, r, c).unwrap();
    let z = select_parameters(n, desc.rho, desc.sensitivity.p2, 0.1).unwrap().z;
    let family = HyperplaneFamily::new(desc).unwrap();
    let mut rng = stream(12, &[]);
    let x = unit(dim, &mut rng);
    let y = at_distance(&x, c * r, &mut rng);
    let tables = 20_000;
    let hits = (0..tables)
        .filter(|&t| {
            let h = table_hash(&family, 5, t, z).unwrap();
            h.code(x.as_slice().unwrap()) == h.code(y.as_slice().unwrap())
        })
        .count();
    let bound = 0.1 / (n as f64).powi(3);
    let sigma = (bound * (1.0 - bound) / tables as f64).sqrt();
    assert!((hits as f64 / tables as f64) <= bound + 3.0 * sigma, "{hits} collisions in {tables} at z={z}");
}

#[test]
fn mean_weight_falls_with_distance() {
    let (dim, seeds) = (16, 1000u64);
    let grid = [0.0, 0.3, 0.6, 0.9, 1.2, 1.5, 1.8];
    let mut mean = vec![0.0; grid.len()];
    for seed in 0..seeds {
        let mut rng = stream(13, &[seed]);
        let x = unit(dim, &mut rng);
        let mut keys = Array2::zeros((grid.len(), dim));
        for (j, &d) in grid.iter().enumerate() {
            keys.row_mut(j).assign(&at_distance(&x, d, &mut rng));
        }
        let q = x.insert_axis(ndarray::Axis(0));
        let v = Array2::zeros((grid.len(), 1));
        let out = anna_forward(q.view(), keys.view(), v.view(), &AnnaConfig::fixed(4, 3, seed), true).unwrap();
        let w = out.weights.unwrap();
        for (j, m) in mean.iter_mut().enumerate() {
            *m += w.get(0, j) / seeds as f64;
        }
    }
    assert!(mean.windows(2).all(|p| p[0] >= p[1]), "{mean:?}");
}

#[test]
fn large_beta_softmax_approaches_exact_match() {
    let mut rng = stream(14, &[]);
    let (n, width) = (40, 6);
    let one_hot = |i: usize| Array1::from_shape_fn(width, |j| f64::from(u8::from(j == i)));
    let mut k = Array2::zeros((n, width));
    let mut q = Array2::zeros((n, width));
    for i in 0..n {
        k.row_mut(i).assign(&one_hot(rng.random_range(0..width)));
    }
    for i in 0..n {
        // every query has at least one matching key
        q.row_mut(i).assign(&k.row(rng.random_range(0..n)));
    }
    let v = gaussian(n, 3, &mut rng);
    let soft = softmax_qkv(q.view(), k.view(), v.view(), Some(1e3)).unwrap();
    let ema = ema_forward(q.view(), k.view(), v.view()).unwrap();
    let dev = soft.iter().zip(ema.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(dev <= 1e-6, "{dev}");
}

#[test]
fn transport_is_conserved_and_runs_are_pure() {
    for kind in ProtocolKind::ALL {
        let params = ProtocolParams::new(100);
        let built = kind.build(&params).unwrap();
        let input = kind.random_input(&params, &mut stream(15, &[kind as u64]));
        let p = &built.protocol;
        let a = round_trace(p, &input, &p.config).unwrap();
        let b = round_trace(p, &input, &p.config).unwrap();
        assert_eq!(a, b, "{kind}");
        for r in &a.rounds {
            assert_eq!(r.total_sent, r.total_received, "{kind} round {}", r.round);
        }
    }
}

#[test]
fn compiled_layers_match_protocol_shape() {
    for kind in ProtocolKind::COMPILE_SUITE {
        let built = kind.build(&ProtocolParams::for_compile(64)).unwrap();
        let ct = compile(&built.protocol, EncodingChoice::ExactSlot).unwrap();
        assert_eq!(ct.layers.len(), built.protocol.round_count() + 2, "{kind}");
        assert_eq!(ct.layers.first().unwrap().role, LayerRole::Load);
        assert_eq!(ct.layers.last().unwrap().role, LayerRole::Gather);
        for layer in &ct.layers {
            if let LayerRole::Route(_) = layer.role {
                let emissions = layer.heads.iter().filter(|h| matches!(h, HeadRole::Emission(_))).count();
                assert_eq!(emissions, built.protocol.max_out_degree, "{kind}");
            }
        }
        let positions = ct.to_document();
        let ids = positions.tensor("positions").unwrap();
        assert!(ids.data.iter().all(|x| x.fract() == 0.0 && x.abs() < 2f64.powi(40)));
    }
}

#[test]
fn compiled_khop_labels_generated_data() {
    let (n, k) = (64, 3);
    let built = ProtocolKind::Khop.build(&ProtocolParams::for_compile(n).with_hops(k)).unwrap();
    let ct = compile(&built.protocol, EncodingChoice::ExactSlot).unwrap();
    let data = gen_khop(&KhopGen { tokens: n, alphabet: 4, hops: k, size: 10, seed: 16, with_flag_token: false }).unwrap();
    let bottom = built.protocol.config.bottom();
    for inst in data {
        let got = ct.execute(&inst.tokens).unwrap();
        let want: Vec<Word> = inst.labels.iter().map(|&l| if l == 4 { bottom } else { l }).collect();
        assert_eq!(got, want);
        assert_eq!(khop_labels(&inst.tokens, k, bottom), want);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn weight_rows_are_stochastic(seed: u64, n in 2usize..60, ell in 1usize..10, z in 1usize..8) {
        let mut rng = stream(seed, &[]);
        let (q, k) = (gaussian(n, 5, &mut rng), gaussian(n, 5, &mut rng));
        let v = gaussian(n, 2, &mut rng);
        let out = anna_forward(q.view(), k.view(), v.view(), &AnnaConfig::fixed(ell, z, seed), true).unwrap();
        let w = out.weights.unwrap();
        for i in 0..n {
            let row = w.row(i);
            if row.is_empty() {
                prop_assert!(out.output.row(i).iter().all(|&x| x == 0.0));
            } else {
                prop_assert!((row.iter().map(|(_, x)| x).sum::<f64>() - 1.0).abs() <= 1e-9);
                let mixed: Vec<f64> = (0..2).map(|c| row.iter().map(|&(j, x)| x * v[[j, c]]).sum()).collect();
                for (m, o) in mixed.iter().zip(out.output.row(i)) {
                    prop_assert!((m - o).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn outputs_are_seed_determined(seed: u64, n in 1usize..80, ell in 1usize..8, z in 1usize..8) {
        let mut rng = stream(seed, &[1]);
        let (q, k, v) = (gaussian(n, 4, &mut rng), gaussian(n, 4, &mut rng), gaussian(n, 3, &mut rng));
        let cfg = AnnaConfig::fixed(ell, z, seed);
        let a = anna_forward(q.view(), k.view(), v.view(), &cfg, false).unwrap().output;
        let b = anna_forward(q.view(), k.view(), v.view(), &cfg, false).unwrap().output;
        let (c, _) = anna_forward_linear_memory(q.view(), k.view(), v.view(), &cfg).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(&a, &c);
    }

    #[test]
    fn low_rank_orders_agree(seed: u64, n in 1usize..=64, r in 1usize..6, m in 1usize..6) {
        let mut rng = stream(seed, &[2]);
        let (q, k, v) = (gaussian(n, r, &mut rng), gaussian(n, r, &mut rng), gaussian(n, m, &mut rng));
        let lin = low_rank_attention_with(q.view(), k.view(), v.view(), Association::Linear).unwrap();
        let quad = low_rank_attention_with(q.view(), k.view(), v.view(), Association::Quadratic).unwrap();
        for (a, b) in lin.iter().zip(quad.iter()) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn sort_protocol_sorts(words in prop::collection::vec(0u64..50, 1..200)) {
        let n = words.len();
        let p = sort_protocol(n, 1, 1, default_memory(n).max(16)).unwrap();
        let got = run_protocol(&p, &words, &p.config).unwrap();
        let mut want = words.clone();
        want.sort();
        prop_assert_eq!(got, want);
    }
}
