//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::collections::BTreeSet;
use std::time::Instant;

use anna_core::anna::{anna_forward, anna_forward_linear_memory, verify_contract};
use anna_core::attention::{
    low_rank_attention_with, reachable_positions, sum_via_anna, AttentionHeadSpec, Association, ChunkOrder, ElementMap,
    HeadKind, LayerSpec, TransformerSpec,
};
use anna_core::bench::{bench_scaling, BenchMechanism, ScalingConfig};
use anna_core::compiler::{compile, measure_fan_in, EncodingChoice};
use anna_core::lsh::AnnaConfig;
use anna_core::mpc::protocols::hop::{HOP_EPSILON, HOP_ROUND_CONSTANT};
use anna_core::mpc::protocols::{khop_protocol, low_rank_mpc, pack_real_rows, LowRankShape, RealRing};
use anna_core::mpc::{bottom_word, default_memory, round_trace, run_protocol, ProtocolKind, ProtocolParams, Word};
use anna_core::rng::stream;
use anna_core::tasks::{match2_ema_construction, match2_embed, match2_oracle};
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn gaussian(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.sample(StandardNormal))
}

fn unit(v: Array1<f64>) -> Array1<f64> {
    let norm = v.dot(&v).sqrt();
    v / norm
}

// ---- ANNA weight guarantees ----

/// Unit keys; half the queries sit within `r` of a random key, the rest are
/// uniform on the sphere.
fn planted(n: usize, dim: usize, r: f64, rng: &mut ChaCha8Rng) -> (Array2<f64>, Array2<f64>) {
    let mut keys = Array2::zeros((n, dim));
    for mut row in keys.rows_mut() {
        row.assign(&unit(Array1::from_shape_fn(dim, |_| rng.sample(StandardNormal))));
    }
    let mut queries = Array2::zeros((n, dim));
    for i in 0..n {
        let fresh = unit(Array1::from_shape_fn(dim, |_| rng.sample(StandardNormal)));
        let q = if i % 2 == 0 {
            let k = keys.row(rng.random_range(0..n)).to_owned();
            let ortho = unit(&fresh - &(&k * fresh.dot(&k)));
            // chord length d corresponds to angle 2 asin(d / 2)
            let theta = 2.0 * (rng.random_range(0.0..r) / 2.0).asin();
            &k * theta.cos() + &ortho * theta.sin()
        } else {
            fresh
        };
        queries.row_mut(i).assign(&q);
    }
    (queries, keys)
}

fn anna_contract() -> Outcome {
    let (n, dim, r, c) = (128, 16, 0.2, 6.0);
    let runs = 100;
    let mut bad = 0;
    let mut near_pairs = 0usize;
    let mut shape = (0, 0);
    for run in 0..runs {
        let cfg = AnnaConfig::auto(n, dim, r, c, 0.01, run).map_err(|e| e.to_string())?;
        shape = (cfg.ell, cfg.z);
        let mut rng = stream(0xc0de, &[run]);
        let (q, k) = planted(n, dim, r, &mut rng);
        let v = gaussian(n, 4, &mut rng);
        let out = anna_forward(q.view(), k.view(), v.view(), &cfg, true).map_err(|e| e.to_string())?;
        let weights = out.weights.ok_or("weights were not returned")?;
        for i in 0..n {
            near_pairs += (0..n).filter(|&j| (&q.row(i) - &k.row(j)).dot(&(&q.row(i) - &k.row(j))).sqrt() <= r).count();
        }
        if !verify_contract(q.view(), k.view(), &weights, r, c, cfg.ell).is_clean() {
            bad += 1;
        }
    }
    let frac = bad as f64 / runs as f64;
    let msg = format!(
        "{bad}/{runs} runs with a violation (fraction {frac:.2}, limit 0.05); ell={}, z={}, {near_pairs} near pairs checked",
        shape.0, shape.1
    );
    if frac <= 0.05 && near_pairs > 0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn schedules_agree() -> Outcome {
    let mut checked = 0;
    for n in [64usize, 256] {
        for inst in 0..50u64 {
            let mut rng = stream(0x5c4e, &[n as u64, inst]);
            let dim = rng.random_range(2..=12);
            let (q, k, v) = (gaussian(n, dim, &mut rng), gaussian(n, dim, &mut rng), gaussian(n, 3, &mut rng));
            let cfg = AnnaConfig::fixed(rng.random_range(1..=16), rng.random_range(1..=10), inst);
            let a = anna_forward(q.view(), k.view(), v.view(), &cfg, false).map_err(|e| e.to_string())?.output;
            let (b, _) = anna_forward_linear_memory(q.view(), k.view(), v.view(), &cfg).map_err(|e| e.to_string())?;
            if a.iter().zip(b.iter()).any(|(x, y)| x.to_bits() != y.to_bits()) || a.dim() != b.dim() {
                return Err(format!("N={n} instance {inst}: outputs differ"));
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} instances bitwise equal"))
}

// ---- Match2 ----

fn match2_brute(x: &[u64], m: u64) -> Vec<u64> {
    x.iter().map(|&a| u64::from(x.iter().any(|&b| (a + b) % m == 0))).collect()
}

fn run_match2(x: &[u64], m: u64) -> Result<Vec<u64>, String> {
    let out = match2_ema_construction(m).forward(match2_embed(x).view()).map_err(|e| e.to_string())?;
    out.column(0)
        .iter()
        .map(|&v| if v == 0.0 || v == 1.0 { Ok(v as u64) } else { Err(format!("non-binary output {v}")) })
        .collect()
}

fn match2_construction() -> Outcome {
    let mut errors = 0;
    let mut total = 0;
    let mut check = |x: &[u64], m: u64| -> Result<(), String> {
        let want = match2_brute(x, m);
        if match2_oracle(x, m, false).map_err(|e| e.to_string())? != want {
            return Err(format!("library oracle disagrees with brute force on {x:?}"));
        }
        total += 1;
        if run_match2(x, m)? != want {
            errors += 1;
        }
        Ok(())
    };
    for code in 0..125u64 {
        let x: Vec<u64> = (0..3).map(|p| code / 5u64.pow(p) % 5 + 1).collect();
        check(&x, 5)?;
    }
    let mut rng = stream(0x3a7c, &[]);
    for _ in 0..10_000 {
        let x: Vec<u64> = (0..32).map(|_| rng.random_range(1..=37)).collect();
        check(&x, 37)?;
    }
    let msg = format!("{errors} errors over {total} inputs (125 exhaustive at N=3 M=5, 10000 random at N=32 M=37)");
    if errors == 0 && total == 10_125 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---- k-hop ----

/// Iterated last-prior-occurrence successor by direct scanning.
fn khop_brute(w: &[Word], k: usize, bottom: Word) -> Vec<Word> {
    let step = |i: usize| -> usize {
        if i == 0 {
            return 0;
        }
        (2..=i).rev().find(|&j| w[j - 2] == w[i - 1]).unwrap_or(0)
    };
    (1..=w.len())
        .map(|i| {
            let j = (0..k).fold(i, |j, _| step(j));
            if j == 0 {
                bottom
            } else {
                w[j - 1]
            }
        })
        .collect()
}

fn khop_rounds() -> Outcome {
    let mut worst = String::new();
    let mut runs = 0;
    for n in [64usize, 256] {
        for k in [1usize, 2, 3, 5, 8] {
            let bound = (HOP_ROUND_CONSTANT as f64 / HOP_EPSILON) as usize + 2 * ((k as f64).log2().floor() as usize + 1);
            let hop = khop_protocol(n, k, default_memory(n), 64).map_err(|e| e.to_string())?;
            let p = &hop.protocol;
            let mut max_rounds = 0;
            for inst in 0..50u64 {
                let mut rng = stream(0x6b68, &[n as u64, k as u64, inst]);
                let alphabet = [2u64, 4, 16][inst as usize % 3];
                let w: Vec<Word> = (0..n).map(|_| rng.random_range(0..alphabet)).collect();
                let out = run_protocol(p, &w, &p.config).map_err(|e| format!("N={n} k={k}: {e}"))?;
                if out != khop_brute(&w, k, bottom_word(p.config.word_bits)) {
                    return Err(format!("N={n} k={k} instance {inst}: output differs from the oracle"));
                }
                let rounds = round_trace(p, &w, &p.config).map_err(|e| e.to_string())?.round_count();
                max_rounds = max_rounds.max(rounds);
                runs += 1;
            }
            if max_rounds > bound {
                return Err(format!("N={n} k={k}: {max_rounds} rounds exceed bound {bound}"));
            }
            if n == 256 && k == 8 {
                worst = format!("N=256 k=8 used {max_rounds} rounds (bound {bound})");
            }
        }
    }
    Ok(format!("{runs} runs oracle-equal within the round bound; {worst}"))
}

// ---- compiler ----

fn compiler_round_trip() -> Outcome {
    let started = Instant::now();
    let mut exact = 0;
    let (mut hashed_ok, mut hashed_flagged, mut hashed_total) = (0, 0, 0);
    for kind in ProtocolKind::COMPILE_SUITE {
        for n in [64usize, 128] {
            let params = ProtocolParams::for_compile(n);
            let built = kind.build(&params).map_err(|e| e.to_string())?;
            let p = &built.protocol;
            let inputs: Vec<Vec<Word>> =
                (0..100u64).map(|i| kind.random_input(&params, &mut stream(0xc0, &[n as u64, i]))).collect();
            let wants: Vec<Vec<Word>> =
                inputs.iter().map(|x| run_protocol(p, x, &p.config)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;

            let ct = compile(p, EncodingChoice::ExactSlot).map_err(|e| format!("{kind}: {e}"))?;
            for (i, (x, want)) in inputs.iter().zip(&wants).enumerate() {
                match ct.execute(x) {
                    Ok(got) if &got == want => exact += 1,
                    Ok(_) => return Err(format!("{kind} N={n} input {i}: exact-slot output differs")),
                    Err(e) => return Err(format!("{kind} N={n} input {i}: {e}")),
                }
            }

            let alpha = measure_fan_in(p, &inputs[..8]).map_err(|e| e.to_string())?;
            let hashed = compile(p, EncodingChoice::Hashed { alpha, seed: n as u64 }).map_err(|e| e.to_string())?;
            for (x, want) in inputs.iter().zip(&wants).take(20) {
                hashed_total += 1;
                match hashed.execute(x) {
                    Ok(got) if &got == want => hashed_ok += 1,
                    Ok(_) => return Err(format!("{kind} N={n}: hashed mode returned a wrong output silently")),
                    Err(_) => hashed_flagged += 1,
                }
            }
        }
    }
    let rate = hashed_ok as f64 / hashed_total as f64;
    let msg = format!(
        "exact-slot {exact}/1000 equal; hashed recovery {hashed_ok}/{hashed_total} ({rate:.3}), {hashed_flagged} flagged, 0 silent; {:.1}s",
        started.elapsed().as_secs_f64()
    );
    if exact == 1000 && rate >= 0.99 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---- low rank ----

fn low_rank_direct(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>) -> Array2<f64> {
    let (n, m) = (q.nrows(), v.ncols());
    Array2::from_shape_fn((n, m), |(i, b)| {
        (0..n).map(|j| (0..q.ncols()).map(|a| q[[i, a]] * k[[j, a]]).sum::<f64>() * v[[j, b]]).sum()
    })
}

fn max_abs_diff<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn low_rank() -> Outcome {
    let (n, r, m) = (128, 4, 8);
    let (mut order_gap, mut mpc_gap) = (0.0f64, 0.0f64);
    for inst in 0..20u64 {
        let mut rng = stream(0x10a4, &[inst]);
        let (q, k, v) = (gaussian(n, r, &mut rng), gaussian(n, r, &mut rng), gaussian(n, m, &mut rng));
        let lin = low_rank_attention_with(q.view(), k.view(), v.view(), Association::Linear).map_err(|e| e.to_string())?;
        let quad = low_rank_attention_with(q.view(), k.view(), v.view(), Association::Quadratic).map_err(|e| e.to_string())?;
        order_gap = order_gap.max(max_abs_diff(&lin, &quad));
        let direct = low_rank_direct(&q, &k, &v);
        let input = pack_real_rows(&q, &k, &v);
        let shape = LowRankShape { tokens: n, rank: r, value_dim: m };
        let p = low_rank_mpc(shape, default_memory(input.len()), RealRing).map_err(|e| e.to_string())?;
        let out: Vec<f64> = run_protocol(&p, &input, &p.config).map_err(|e| e.to_string())?.into_iter().map(f64::from_bits).collect();
        if out.len() != n * m {
            return Err(format!("protocol returned {} words, expected {}", out.len(), n * m));
        }
        mpc_gap = mpc_gap.max(max_abs_diff(&out, &direct));
    }
    let msg = format!("association gap {order_gap:.2e} (limit 1e-10), protocol gap {mpc_gap:.2e} (limit 1e-9)");
    if order_gap <= 1e-10 && mpc_gap <= 1e-9 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---- runtime scaling ----

fn scaling() -> Outcome {
    let started = Instant::now();
    let lengths: Vec<usize> = (10..=14).map(|e| 1 << e).collect();
    let anna = bench_scaling(&ScalingConfig::new(BenchMechanism::Anna, lengths.clone())).map_err(|e| e.to_string())?;
    let soft = bench_scaling(&ScalingConfig::new(BenchMechanism::Softmax, lengths)).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed().as_secs_f64();
    let (a, s) = (anna.slope.ok_or("no anna slope")?, soft.slope.ok_or("no softmax slope")?);
    let msg = format!("anna slope {a:.3} (< 1.5), softmax slope {s:.3} (> 1.8), {elapsed:.0}s (<= 600s)");
    if a < 1.5 && s > 1.8 && elapsed <= 600.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---- chunked attention ----

/// Positions whose inputs can reach `target` through `layers` rounds of
/// chunked mixing, computed forwards from each source.
fn reach_forward(n: usize, chunk: usize, perms: &[Vec<usize>], target: usize) -> BTreeSet<usize> {
    let chunk_of = |layer: usize| -> Vec<usize> {
        let mut c = vec![0; n];
        for (slot, &pos) in perms[layer].iter().enumerate() {
            c[pos] = slot / chunk;
        }
        c
    };
    let chunks: Vec<Vec<usize>> = (0..perms.len()).map(chunk_of).collect();
    (0..n)
        .filter(|&src| {
            let mut live: BTreeSet<usize> = [src].into();
            for c in &chunks {
                live = (0..n).filter(|&p| live.iter().any(|&s| c[s] == c[p])).collect();
            }
            live.contains(&target)
        })
        .collect()
}

fn reformer_stack(chunk: usize, order: ChunkOrder, layers: usize) -> TransformerSpec {
    let head = AttentionHeadSpec::new(HeadKind::Reformer { chunk, order }, ElementMap::Identity, ElementMap::Identity, ElementMap::Identity);
    TransformerSpec::new((0..layers).map(|_| LayerSpec::new(vec![head.clone()])).collect(), ElementMap::Identity)
}

fn reformer_and_sum() -> Outcome {
    let (b, l, n, dim) = (2usize, 3usize, 100usize, 4usize);
    let target = n - 1;
    let mut trials = 0;
    let mut inside_changed = 0;
    for trial in 0..1000u64 {
        let mut rng = stream(0x4ef0, &[trial]);
        let (order, perms) = if trial % 2 == 0 {
            (ChunkOrder::Identity, vec![(0..n).collect::<Vec<_>>(); l])
        } else {
            let perms: Vec<Vec<usize>> = (0..l)
                .map(|_| {
                    let mut p: Vec<usize> = (0..n).collect();
                    p.shuffle(&mut rng);
                    p
                })
                .collect();
            (ChunkOrder::Fixed(perms.clone()), perms)
        };
        let reach = reach_forward(n, b, &perms, target);
        if reach.len() > b.pow(l as u32) {
            return Err(format!("trial {trial}: reach {} exceeds B^L", reach.len()));
        }
        if reachable_positions(n, b, &order, l, target).as_ref() != Some(&reach) {
            return Err(format!("trial {trial}: library reach disagrees with the forward closure"));
        }
        let stack = reformer_stack(b, order, l);
        let x = Array2::from_shape_fn((n, dim), |_| rng.random_range(-2.0..2.0));
        let base = stack.forward(x.view()).map_err(|e| e.to_string())?;
        let mut outside = x.clone();
        for p in (0..n).filter(|p| !reach.contains(p)) {
            for d in 0..dim {
                outside[[p, d]] += rng.random_range(-5.0..5.0);
            }
        }
        let moved = stack.forward(outside.view()).map_err(|e| e.to_string())?;
        if base.row(target).iter().zip(moved.row(target)).any(|(a, c)| a.to_bits() != c.to_bits()) {
            return Err(format!("trial {trial}: perturbing outside the reachable set changed the last output"));
        }
        let mut inside = x.clone();
        let p = *reach.iter().find(|&&p| p != target).unwrap_or(&target);
        inside[[p, 0]] += 1.0;
        if stack.forward(inside.view()).map_err(|e| e.to_string())?.row(target) != base.row(target) {
            inside_changed += 1;
        }
        trials += 1;
    }
    let mut rng = stream(0x5a, &[]);
    for t in 0..1000u64 {
        let len = rng.random_range(1..=300);
        let xs: Vec<i64> = (0..len).map(|_| rng.random_range(-1_000_000..=1_000_000)).collect();
        let got = sum_via_anna(&xs, t).map_err(|e| e.to_string())?;
        if got != xs.iter().sum::<i64>() {
            return Err(format!("sum input {t}: attention gave {got}"));
        }
    }
    Ok(format!(
        "{trials} perturbation trials unchanged ({inside_changed} in-reach controls changed); 1000 sums exact"
    ))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("anna-contract", anna_contract),
        ("schedules-bitwise-equal", schedules_agree),
        ("match2-construction", match2_construction),
        ("khop-protocol", khop_rounds),
        ("compiler-round-trip", compiler_round_trip),
        ("low-rank-equivalence", low_rank),
        ("runtime-scaling", scaling),
        ("reformer-reach-and-sum", reformer_and_sum),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        match run() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
