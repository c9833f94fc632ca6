use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

use super::{Instance, TaskError};
use crate::attention::{AttentionHeadSpec, ElementMap, HeadKind, LayerSpec, TransformerSpec};
use crate::rng::stream;

/// Ones-percentage ranges of the four balancing bins; the last is closed.
pub const ONES_BINS: [(u32, u32); 4] = [(0, 25), (25, 50), (50, 75), (75, 100)];

/// `y_i = 1` iff some `j` has `x_i + x_j = 0 mod modulus`. With `strict`
/// the partner must sit at a different position.
pub fn match2_oracle(x: &[u64], modulus: u64, strict: bool) -> Result<Vec<u64>, TaskError> {
    if modulus == 0 {
        return Err(TaskError::Params("modulus must be positive".into()));
    }
    let mut counts = vec![0usize; modulus as usize];
    for (pos, &t) in x.iter().enumerate() {
        if t == 0 || t > modulus {
            return Err(TaskError::TokenRange { pos, token: t, max: modulus });
        }
        counts[(t % modulus) as usize] += 1;
    }
    Ok(x.iter()
        .map(|&t| {
            let r = t % modulus;
            let partner = (modulus - r) % modulus;
            let mut found = counts[partner as usize];
            if strict && partner == r {
                found -= 1;
            }
            u64::from(found > 0)
        })
        .collect())
}

fn bin_of(ones: usize, n: usize) -> usize {
    (4 * ones / n).min(3)
}

/// Generator settings. Tokens are drawn from `1..=range`.
#[derive(Debug, Clone, PartialEq)]
pub struct Match2Gen {
    pub tokens: usize,
    pub range: u64,
    pub modulus: u64,
    pub size: usize,
    pub seed: u64,
    /// Draws allowed before a still-empty bin is reported.
    pub max_draws: usize,
}

impl Match2Gen {
    pub fn new(tokens: usize, modulus: u64, size: usize, seed: u64) -> Self {
        Self { tokens, range: modulus.saturating_sub(1).max(1), modulus, size, seed, max_draws: 1_000_000 }
    }
}

/// Balanced Match2 data with the default token range `1..=modulus-1`.
pub fn gen_match2(tokens: usize, modulus: u64, size: usize, seed: u64) -> Result<Vec<Instance>, TaskError> {
    gen_match2_with(&Match2Gen::new(tokens, modulus, size, seed))
}

/// Rejection-samples until `size / 40` instances are binned and no bin is
/// empty, tops every bin up with permuted copies of its members, then
/// shuffles.
pub fn gen_match2_with(g: &Match2Gen) -> Result<Vec<Instance>, TaskError> {
    if !g.size.is_multiple_of(4) {
        return Err(TaskError::Size(g.size));
    }
    if g.tokens == 0 || g.range == 0 || g.range > g.modulus {
        return Err(TaskError::Params(format!("tokens {}, range {}, modulus {}", g.tokens, g.range, g.modulus)));
    }
    let per_bin = g.size / 4;
    let mut bins: [Vec<Instance>; 4] = Default::default();
    if per_bin == 0 {
        return Ok(vec![]);
    }
    let mut rng = stream(g.seed, &[0x6d61_7463_6832]);
    let mut draws = 0usize;
    let total = |bins: &[Vec<Instance>; 4]| bins.iter().map(Vec::len).sum::<usize>();
    while 40 * total(&bins) < g.size || bins.iter().any(Vec::is_empty) {
        if draws >= g.max_draws {
            let bin = bins.iter().position(Vec::is_empty).unwrap_or(0);
            return Err(TaskError::Timeout { bin, iterations: draws });
        }
        draws += 1;
        let x: Vec<u64> = (0..g.tokens).map(|_| rng.random_range(1..=g.range)).collect();
        let y = match2_oracle(&x, g.modulus, false)?;
        let ones = y.iter().filter(|&&b| b == 1).count();
        let bin = &mut bins[bin_of(ones, g.tokens)];
        if bin.len() < per_bin {
            bin.push(Instance { tokens: x, labels: y });
        }
    }
    for bin in bins.iter_mut() {
        while bin.len() < per_bin {
            let src = &bin[rng.random_range(0..bin.len())];
            let mut perm: Vec<usize> = (0..g.tokens).collect();
            perm.shuffle(&mut rng);
            let copy = Instance {
                tokens: perm.iter().map(|&p| src.tokens[p]).collect(),
                labels: perm.iter().map(|&p| src.labels[p]).collect(),
            };
            bin.push(copy);
        }
    }
    let mut out: Vec<Instance> = bins.into_iter().flatten().collect();
    out.shuffle(&mut rng);
    Ok(out)
}

/// Token embedding `x -> (x, 1)`.
pub fn match2_embed(x: &[u64]) -> Array2<f64> {
    Array2::from_shape_fn((x.len(), 2), |(i, j)| if j == 0 { x[i] as f64 } else { 1.0 })
}

/// One exact-match head over [`match2_embed`]: query `x`, key `M - x`,
/// value `1`. Both are taken modulo `M` so that the token `M` finds itself.
pub fn match2_ema_construction(modulus: u64) -> TransformerSpec {
    let m = modulus as f64;
    let query = ElementMap::func("residue", 1, move |r| vec![r[0].rem_euclid(m)]);
    // (x, 1) . (-1, M), reduced
    let key = ElementMap::func("complement", 1, move |r| vec![(-r[0] + m * r[1]).rem_euclid(m)]);
    let value = ElementMap::Linear(ndarray::array![[0.0], [1.0]]);
    let head = AttentionHeadSpec::new(HeadKind::Ema, query, key, value);
    TransformerSpec::new(vec![LayerSpec::new(vec![head])], ElementMap::Identity)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(x: &[u64], m: u64, strict: bool) -> Vec<u64> {
        (0..x.len())
            .map(|i| u64::from((0..x.len()).any(|j| (!strict || j != i) && (x[i] + x[j]).is_multiple_of(m))))
            .collect()
    }

    fn run_construction(x: &[u64], m: u64) -> Vec<u64> {
        let out = match2_ema_construction(m).forward(match2_embed(x).view()).unwrap();
        out.column(0).iter().map(|&v| v as u64).collect()
    }

    #[test]
    fn oracle_examples() {
        assert_eq!(match2_oracle(&[1, 36], 37, false).unwrap(), vec![1, 1]);
        assert_eq!(match2_oracle(&[1, 2], 37, false).unwrap(), vec![0, 0]);
        assert_eq!(match2_oracle(&[37], 37, false).unwrap(), vec![1]);
        assert_eq!(match2_oracle(&[37], 37, true).unwrap(), vec![0]);
        assert_eq!(match2_oracle(&[1, 36, 5], 37, false).unwrap(), vec![1, 1, 0]);
        assert_eq!(match2_oracle(&[0, 1], 37, false).unwrap_err(), TaskError::TokenRange { pos: 0, token: 0, max: 37 });
        assert!(match2_oracle(&[38], 37, false).is_err());
    }

    #[test]
    fn construction_examples() {
        assert_eq!(run_construction(&[1, 36, 5], 37), vec![1, 1, 0]);
        assert_eq!(run_construction(&[1, 2, 3, 4], 37), vec![0; 4]);
    }

    #[test]
    fn construction_is_exhaustively_exact_on_small_domains() {
        for m in 2..=7u64 {
            for n in 1..=3u32 {
                for code in 0..m.pow(n) {
                    let x: Vec<u64> = (0..n).map(|p| code / m.pow(p) % m + 1).collect();
                    assert_eq!(run_construction(&x, m), brute(&x, m, false), "{x:?} mod {m}");
                }
            }
        }
    }

    #[test]
    fn balanced_bins() {
        let data = gen_match2(32, 37, 40, 1).unwrap();
        assert_eq!(data.len(), 40);
        let mut counts = [0; 4];
        for inst in &data {
            assert_eq!(inst.labels, match2_oracle(&inst.tokens, 37, false).unwrap());
            assert!(inst.tokens.iter().all(|&t| (1..=36).contains(&t)));
            counts[bin_of(inst.labels.iter().sum::<u64>() as usize, 32)] += 1;
        }
        assert_eq!(counts, [10; 4]);
        let tiny = gen_match2(32, 37, 4, 2).unwrap();
        assert_eq!(tiny.len(), 4);
        assert_eq!(gen_match2(32, 37, 6, 1).unwrap_err(), TaskError::Size(6));
    }

    #[test]
    fn unfillable_bin_times_out() {
        // every token pairs with itself mod 2, so no row lands below 75%
        let g = Match2Gen { max_draws: 500, ..Match2Gen::new(8, 2, 8, 0) };
        assert!(matches!(gen_match2_with(&g), Err(TaskError::Timeout { bin: 0, iterations: 500 })));
    }

    #[test]
    fn generation_is_seeded() {
        assert_eq!(gen_match2(16, 37, 8, 5).unwrap(), gen_match2(16, 37, 8, 5).unwrap());
        assert_ne!(gen_match2(16, 37, 8, 5).unwrap(), gen_match2(16, 37, 8, 6).unwrap());
    }

    proptest! {
        #[test]
        fn oracle_matches_brute_force(x in prop::collection::vec(1u64..=37, 1..40), strict: bool) {
            prop_assert_eq!(match2_oracle(&x, 37, strict).unwrap(), brute(&x, 37, strict));
        }

        #[test]
        fn permutation_equivariant(x in prop::collection::vec(1u64..=37, 1..30), seed: u64) {
            let mut perm: Vec<usize> = (0..x.len()).collect();
            perm.shuffle(&mut stream(seed, &[]));
            let y = match2_oracle(&x, 37, false).unwrap();
            let xp: Vec<u64> = perm.iter().map(|&p| x[p]).collect();
            let yp: Vec<u64> = perm.iter().map(|&p| y[p]).collect();
            prop_assert_eq!(match2_oracle(&xp, 37, false).unwrap(), yp);
        }
    }
}
