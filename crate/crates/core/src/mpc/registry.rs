//! Named protocols with input generators, sequential references and declared
//! round bounds.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::protocols::hop::{induction_round_bound, khop_round_bound};
use super::protocols::{
    aggregation_protocol, broadcast_protocol, combine_sum, echo_protocol, ema_simulation_protocol, identity_protocol,
    induction_protocol, khop_protocol, low_rank_mpc, shift_protocol, sort_protocol, EmaShape, LowRankShape, ModRing,
    Ring,
};
use super::sim::{bottom_word, LocalFault, MpcProtocol, Word};
use super::default_memory;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("unknown protocol {0:?}; known: {1}")]
    Unknown(String, String),
    #[error("bad parameters for {name}: {reason}")]
    Params { name: String, reason: String },
    #[error(transparent)]
    Build(#[from] LocalFault),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ProtocolKind {
    Identity,
    Shift,
    Echo,
    Sort,
    Aggregate,
    Broadcast,
    Induction,
    Khop,
    LowRank,
    EmaSim,
}

impl ProtocolKind {
    pub const ALL: [ProtocolKind; 10] = [
        ProtocolKind::Identity,
        ProtocolKind::Shift,
        ProtocolKind::Echo,
        ProtocolKind::Sort,
        ProtocolKind::Aggregate,
        ProtocolKind::Broadcast,
        ProtocolKind::Induction,
        ProtocolKind::Khop,
        ProtocolKind::LowRank,
        ProtocolKind::EmaSim,
    ];

    /// The protocols the compiler round-trip is checked on.
    pub const COMPILE_SUITE: [ProtocolKind; 5] =
        [ProtocolKind::Identity, ProtocolKind::Shift, ProtocolKind::Induction, ProtocolKind::Khop, ProtocolKind::LowRank];

    pub fn name(&self) -> &'static str {
        match self {
            ProtocolKind::Identity => "identity",
            ProtocolKind::Shift => "shift",
            ProtocolKind::Echo => "echo",
            ProtocolKind::Sort => "sort",
            ProtocolKind::Aggregate => "aggregate",
            ProtocolKind::Broadcast => "broadcast",
            ProtocolKind::Induction => "induction-heads",
            ProtocolKind::Khop => "k-hop",
            ProtocolKind::LowRank => "low-rank",
            ProtocolKind::EmaSim => "ema-sim",
        }
    }
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProtocolKind {
    type Err = RegistryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let alias = match s {
            "induction" => "induction-heads",
            "khop" => "k-hop",
            "lowrank" => "low-rank",
            "ema" => "ema-sim",
            other => other,
        };
        Self::ALL.into_iter().find(|k| k.name() == alias).ok_or_else(|| {
            RegistryError::Unknown(s.to_string(), Self::ALL.map(|k| k.name()).join(", "))
        })
    }
}

/// Parameters shared by the registry entries. `tokens` is the sequence
/// length, not the input word count.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolParams {
    pub tokens: usize,
    /// Local memory; defaults to [`default_memory`] of the input word count.
    pub memory: Option<usize>,
    pub word_bits: u32,
    pub hops: usize,
    pub alphabet: u64,
    pub rank: usize,
    pub value_dim: usize,
    /// Low-rank arithmetic is modulo `2^ring_bits`.
    pub ring_bits: u32,
    pub width: usize,
}

impl ProtocolParams {
    pub fn new(tokens: usize) -> Self {
        Self { tokens, memory: None, word_bits: 64, hops: 3, alphabet: 4, rank: 2, value_dim: 1, ring_bits: 32, width: 2 }
    }

    /// Word width used when the protocol is to be compiled: every word must
    /// stay an exact float coordinate.
    pub fn for_compile(tokens: usize) -> Self {
        Self { word_bits: 40, ..Self::new(tokens) }
    }

    pub fn with_hops(mut self, k: usize) -> Self {
        self.hops = k;
        self
    }

    pub fn with_memory(mut self, s: usize) -> Self {
        self.memory = Some(s);
        self
    }
}

/// A registry protocol built for concrete parameters.
#[derive(Debug, Clone)]
pub struct BuiltProtocol {
    pub kind: ProtocolKind,
    pub params: ProtocolParams,
    pub protocol: MpcProtocol,
    /// Rounds the protocol promises not to exceed.
    pub round_bound: usize,
}

const SMALL_WORD: u64 = 1 << 20;

impl ProtocolKind {
    /// Input length in words for the parameters.
    pub fn input_words(&self, p: &ProtocolParams) -> usize {
        match self {
            ProtocolKind::Broadcast => p.width,
            ProtocolKind::LowRank => p.tokens * (2 * p.rank + p.value_dim),
            ProtocolKind::EmaSim => p.tokens * 3,
            _ => p.tokens,
        }
    }

    pub fn build(&self, p: &ProtocolParams) -> Result<BuiltProtocol, RegistryError> {
        let n = p.tokens;
        if n == 0 {
            return Err(RegistryError::Params { name: self.name().into(), reason: "no tokens".into() });
        }
        let words = self.input_words(p);
        let s = p.memory.unwrap_or_else(|| default_memory(words.max(n)));
        // trees fan out as far as memory allows, so two levels cover any n <= s^2
        let tree_bound = 2 + LEVELS;
        let (protocol, round_bound) = match self {
            ProtocolKind::Identity => (identity_protocol(n, s), 0),
            ProtocolKind::Shift => (shift_protocol(n, s), 1),
            ProtocolKind::Echo => (echo_protocol(n, s), 1),
            ProtocolKind::Sort => (sort_protocol(n, 1, 1, s)?, 2 + crate::mpc::sort::SORT_STAGE_ROUNDS),
            ProtocolKind::Aggregate => (aggregation_protocol(n, 1, s.min(n).max(2), s, combine_sum())?, tree_bound),
            ProtocolKind::Broadcast => (broadcast_protocol(n, p.width, (s / p.width).max(2), s)?, tree_bound),
            ProtocolKind::Induction => (induction_protocol(n, s, p.word_bits)?.protocol, induction_round_bound()),
            ProtocolKind::Khop => {
                if p.hops == 0 {
                    return Err(RegistryError::Params { name: self.name().into(), reason: "k must be at least 1".into() });
                }
                (khop_protocol(n, p.hops, s, p.word_bits)?.protocol, khop_round_bound(p.hops))
            }
            ProtocolKind::LowRank => {
                let shape = LowRankShape { tokens: n, rank: p.rank, value_dim: p.value_dim };
                (low_rank_mpc(shape, s, ModRing { bits: p.ring_bits })?, 2 + 2 * LEVELS)
            }
            ProtocolKind::EmaSim => {
                let shape = EmaShape { tokens: n, key_dim: 1, value_dim: 1 };
                (ema_simulation_protocol(shape, s)?, 3 + crate::mpc::sort::SORT_STAGE_ROUNDS + 2 * LEVELS)
            }
        };
        let protocol = MpcProtocol { config: protocol.config.clone().with_word_bits(p.word_bits), ..protocol };
        Ok(BuiltProtocol { kind: *self, params: p.clone(), protocol, round_bound })
    }

    pub fn random_input(&self, p: &ProtocolParams, rng: &mut ChaCha8Rng) -> Vec<Word> {
        let words = self.input_words(p);
        match self {
            ProtocolKind::Induction | ProtocolKind::Khop => (0..words).map(|_| rng.random_range(0..p.alphabet)).collect(),
            ProtocolKind::LowRank => (0..words).map(|_| rng.random_range(0..1u64 << p.ring_bits.min(40))).collect(),
            ProtocolKind::EmaSim => (0..p.tokens)
                .flat_map(|_| {
                    let q = rng.random_range(0..p.alphabet) as f64;
                    let k = rng.random_range(0..p.alphabet) as f64;
                    let v = rng.random_range(0..100) as f64;
                    [q.to_bits(), k.to_bits(), v.to_bits()]
                })
                .collect(),
            _ => (0..words).map(|_| rng.random_range(0..SMALL_WORD)).collect(),
        }
    }

    /// Sequential computation of what the protocol should output.
    pub fn reference(&self, p: &ProtocolParams, input: &[Word]) -> Vec<Word> {
        let bottom = bottom_word(p.word_bits);
        match self {
            ProtocolKind::Identity | ProtocolKind::Echo => input.to_vec(),
            ProtocolKind::Shift => {
                let mut out = input.to_vec();
                out.rotate_right(1);
                out
            }
            ProtocolKind::Sort => {
                let mut out = input.to_vec();
                out.sort();
                out
            }
            ProtocolKind::Aggregate => vec![input.iter().fold(0u64, |a, b| a.wrapping_add(*b))],
            ProtocolKind::Broadcast => input.repeat(p.tokens),
            ProtocolKind::Induction | ProtocolKind::Khop => {
                let hops = if *self == ProtocolKind::Induction { 1 } else { p.hops };
                (1..=input.len())
                    .map(|i| {
                        let mut j = i;
                        for _ in 0..hops {
                            j = if j == 0 { 0 } else { previous_successor(input, j) };
                        }
                        if j == 0 {
                            bottom
                        } else {
                            input[j - 1]
                        }
                    })
                    .collect()
            }
            ProtocolKind::LowRank => {
                let ring = ModRing { bits: p.ring_bits };
                let (r, m) = (p.rank, p.value_dim);
                let d = 2 * r + m;
                let mut mat = vec![0; r * m];
                for row in input.chunks(d) {
                    for a in 0..r {
                        for b in 0..m {
                            mat[a * m + b] = ring.add(mat[a * m + b], ring.mul(row[r + a], row[2 * r + b]));
                        }
                    }
                }
                input
                    .chunks(d)
                    .flat_map(|row| {
                        (0..m).map(|b| (0..r).fold(0, |acc, a| ring.add(acc, ring.mul(row[a], mat[a * m + b]))))
                            .collect::<Vec<_>>()
                    })
                    .collect()
            }
            ProtocolKind::EmaSim => {
                let cols: Vec<[f64; 3]> =
                    input.chunks(3).map(|c| [0, 1, 2].map(|t| f64::from_bits(c[t]))).collect();
                let q = ndarray::Array2::from_shape_fn((cols.len(), 1), |(i, _)| cols[i][0]);
                let k = ndarray::Array2::from_shape_fn((cols.len(), 1), |(i, _)| cols[i][1]);
                let v = ndarray::Array2::from_shape_fn((cols.len(), 1), |(i, _)| cols[i][2]);
                crate::attention::ema_forward(q.view(), k.view(), v.view())
                    .expect("shapes agree")
                    .iter()
                    .map(|x| x.to_bits())
                    .collect()
            }
        }
    }
}

/// Tree levels a fan-`s` tree needs for at most `s^2` leaves.
const LEVELS: usize = 2;

/// One past the last earlier occurrence of the token at 1-based `i`, or 0.
fn previous_successor(tokens: &[Word], i: usize) -> usize {
    (1..i).rev().find(|&j| tokens[j - 1] == tokens[i - 1]).map_or(0, |j| j + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpc::{round_trace, run_protocol};
    use crate::rng::stream;

    #[test]
    fn names_round_trip() {
        for k in ProtocolKind::ALL {
            assert_eq!(k.name().parse::<ProtocolKind>().unwrap(), k);
        }
        assert_eq!("khop".parse::<ProtocolKind>().unwrap(), ProtocolKind::Khop);
        assert!("nope".parse::<ProtocolKind>().is_err());
    }

    #[test]
    fn every_entry_matches_its_reference_within_bound() {
        for n in [64, 256, 1024] {
            for kind in ProtocolKind::ALL {
                let params = ProtocolParams::new(n);
                let built = kind.build(&params).unwrap();
                let mut rng = stream(n as u64, &[kind as u64]);
                let input = kind.random_input(&params, &mut rng);
                let trace = round_trace(&built.protocol, &input, &built.protocol.config).unwrap();
                assert!(
                    trace.round_count() <= built.round_bound,
                    "{kind} at n={n}: {} rounds, bound {}",
                    trace.round_count(),
                    built.round_bound
                );
                let out = run_protocol(&built.protocol, &input, &built.protocol.config).unwrap();
                assert_eq!(out, kind.reference(&params, &input), "{kind} at n={n}");
            }
        }
    }

    #[test]
    fn compile_words_fit_forty_bits() {
        for kind in ProtocolKind::COMPILE_SUITE {
            let params = ProtocolParams::for_compile(64);
            let built = kind.build(&params).unwrap();
            let input = kind.random_input(&params, &mut stream(1, &[]));
            let out = run_protocol(&built.protocol, &input, &built.protocol.config).unwrap();
            assert!(out.iter().all(|w| *w < 1 << 40), "{kind}");
        }
    }
}
