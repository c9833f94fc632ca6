use std::collections::HashMap;

use rand::Rng;

use super::{Instance, TaskError};
use crate::rng::stream;

/// `max({0} ∪ {j <= i : w_{j-1} = w_i})` over 1-indexed positions; `0` maps
/// to `0`.
pub fn sigma(w: &[u64], i: usize) -> usize {
    if i == 0 || i > w.len() {
        return 0;
    }
    (2..=i).rev().find(|&j| w[j - 2] == w[i - 1]).unwrap_or(0)
}

/// `sigma` applied `k` times; `k = 0` is the identity.
pub fn sigma_k(w: &[u64], i: usize, k: usize) -> usize {
    (0..k).fold(i, |j, _| sigma(w, j))
}

/// `sigma(w, i)` for `i = 1..=N` in one pass.
fn sigma_all(w: &[u64]) -> Vec<usize> {
    let mut last: HashMap<u64, usize> = HashMap::new();
    let mut out = Vec::with_capacity(w.len());
    for (p, &t) in w.iter().enumerate() {
        // previous occurrence at 1-indexed q < p+1 gives j = q + 1
        out.push(last.get(&t).map_or(0, |&q| q + 1));
        last.insert(t, p + 1);
    }
    out
}

/// `w_{sigma^k(w, i)}` for every position, `bottom` where the chain hits 0.
pub fn khop_labels(w: &[u64], k: usize, bottom: u64) -> Vec<u64> {
    let s = sigma_all(w);
    (1..=w.len())
        .map(|i| {
            let j = (0..k).fold(i, |j, _| if j == 0 { 0 } else { s[j - 1] });
            if j == 0 {
                bottom
            } else {
                w[j - 1]
            }
        })
        .collect()
}

/// k-hop generator settings. Symbols are `0..alphabet`; the missing label is
/// the extra class `alphabet`.
#[derive(Debug, Clone, PartialEq)]
pub struct KhopGen {
    /// Sequence length, counting the flag token when present.
    pub tokens: usize,
    pub alphabet: u64,
    pub hops: usize,
    pub size: usize,
    pub seed: u64,
    /// Prefix each row with the hop count and its labels with a 0.
    pub with_flag_token: bool,
}

pub fn gen_khop(g: &KhopGen) -> Result<Vec<Instance>, TaskError> {
    if g.alphabet == 0 || g.alphabet as usize > g.tokens {
        return Err(TaskError::Params(format!("alphabet {} must lie in 1..={}", g.alphabet, g.tokens)));
    }
    let body = if g.with_flag_token { g.tokens - 1 } else { g.tokens };
    Ok((0..g.size)
        .map(|row| {
            let mut rng = stream(g.seed, &[0x6b68_6f70, row as u64]);
            let w: Vec<u64> = (0..body).map(|_| rng.random_range(0..g.alphabet)).collect();
            let y = khop_labels(&w, g.hops, g.alphabet);
            if g.with_flag_token {
                let mut tokens = vec![g.hops as u64];
                tokens.extend(w);
                let mut labels = vec![0];
                labels.extend(y);
                Instance { tokens, labels }
            } else {
                Instance { tokens: w, labels: y }
            }
        })
        .collect())
}
