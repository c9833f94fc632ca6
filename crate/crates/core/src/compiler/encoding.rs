//! Positional identifiers and message encodings that survive uniform
//! averaging.
//!
//! Every encoded value carries a constant-1 coordinate per block. After an
//! exact-match head averages `t` contributors that coordinate reads `1/t`, so
//! multiplying a block by `t` restores the integers written into it.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::mpc::{MachineId, Word};
use crate::rng::mix_words;

/// Sparse value row: `(coordinate, value)` sorted by coordinate.
pub type SparseRow = Vec<(usize, f64)>;

/// Coordinates of a positional identifier: the binary digits of `i`.
pub fn positional_id(i: usize, bits: usize) -> Vec<f64> {
    (0..bits).map(|b| ((i >> b) & 1) as f64).collect()
}

/// A key no positional identifier equals.
pub fn never_key(bits: usize) -> Vec<f64> {
    vec![2.0; bits]
}

/// A query no key equals, including [`never_key`].
pub fn never_query(bits: usize) -> Vec<f64> {
    vec![3.0; bits]
}

/// Digits needed to give `count` machines distinct identifiers.
pub fn id_bits(count: usize) -> usize {
    (usize::BITS - count.saturating_sub(1).leading_zeros()).max(1) as usize
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EncodingMode {
    /// One disjoint slot of `delta + 2` coordinates per source machine.
    ExactSlot,
    /// `repetitions` groups of `blocks` blocks; each source writes one block
    /// per group, chosen by hashing its id.
    Hashed { repetitions: usize, blocks: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodingConfig {
    /// Largest number of contributors a query may average.
    pub alpha: usize,
    /// Largest message in words.
    pub delta: usize,
    /// Number of machines `q`.
    pub machines: usize,
    pub mode: EncodingMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("{got} contributors exceed the bound {alpha}")]
    TooManyContributors { got: usize, alpha: usize },
    #[error("recovered {got} of {expected} contributors")]
    Unrecovered { got: usize, expected: usize },
    #[error("malformed encoding: {0}")]
    Malformed(String),
}

impl DecodeError {
    /// Failures the hashed encoding is allowed to have; the rest are bugs or
    /// contract breaches.
    pub fn is_declared_failure(&self) -> bool {
        matches!(self, DecodeError::Unrecovered { .. })
    }
}

/// A message as carried by one head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub src: MachineId,
    pub dest: MachineId,
    pub words: Vec<Word>,
}

const CHECK_DOMAIN: u64 = 0x6368_6563_6b73_756d;

impl EncodingConfig {
    pub fn exact(machines: usize, delta: usize) -> Self {
        Self { alpha: machines.max(1), delta, machines, mode: EncodingMode::ExactSlot }
    }

    /// `2 ceil(log2 q)` repetitions of `2 alpha^2` blocks.
    pub fn hashed(machines: usize, delta: usize, alpha: usize, seed: u64) -> Self {
        let alpha = alpha.max(1);
        let repetitions = 2 * id_bits(machines.max(2));
        Self { alpha, delta, machines, mode: EncodingMode::Hashed { repetitions, blocks: 2 * alpha * alpha, seed } }
    }

    fn slot_width(&self) -> usize {
        match self.mode {
            EncodingMode::ExactSlot => self.delta + 2,
            EncodingMode::Hashed { .. } => self.delta + 4,
        }
    }

    /// Width of the dense value vector the sparse rows stand for.
    pub fn dimension(&self) -> usize {
        match self.mode {
            EncodingMode::ExactSlot => self.machines * self.slot_width(),
            EncodingMode::Hashed { repetitions, blocks, .. } => repetitions * blocks * self.slot_width(),
        }
    }

    fn header(&self, dest: MachineId, len: usize) -> Word {
        (dest * (self.delta + 1) + len) as Word
    }

    fn checksum(&self, seed: u64, env: &Envelope) -> Word {
        let mut words = vec![env.src as Word, env.dest as Word, env.words.len() as Word];
        words.extend_from_slice(&env.words);
        mix_words(seed ^ CHECK_DOMAIN, &words) & 0xffff_ffff
    }

    fn block_of(seed: u64, rep: usize, src: MachineId, blocks: usize) -> usize {
        (mix_words(seed, &[rep as u64, src as u64]) % blocks as u64) as usize
    }

    pub fn encode(&self, env: &Envelope) -> SparseRow {
        assert!(env.words.len() <= self.delta, "message longer than delta");
        let mut block: Vec<Word> = Vec::with_capacity(self.slot_width());
        let mut row = SparseRow::new();
        let push = |row: &mut SparseRow, base: usize, block: &[Word]| {
            row.extend(block.iter().enumerate().filter(|(_, w)| **w != 0).map(|(o, w)| (base + o, *w as f64)));
        };
        match self.mode {
            EncodingMode::ExactSlot => {
                block.push(1);
                block.push(self.header(env.dest, env.words.len()));
                block.extend_from_slice(&env.words);
                push(&mut row, env.src * self.slot_width(), &block);
            }
            EncodingMode::Hashed { repetitions, blocks, seed } => {
                block.push(1);
                block.push(env.src as Word + 1);
                block.push(self.header(env.dest, env.words.len()));
                block.extend_from_slice(&env.words);
                block.resize(self.delta + 3, 0);
                block.push(self.checksum(seed, env));
                for rep in 0..repetitions {
                    let b = Self::block_of(seed, rep, env.src, blocks);
                    push(&mut row, (rep * blocks + b) * self.slot_width(), &block);
                }
                row.sort_by_key(|(i, _)| *i);
            }
        }
        row
    }

    /// Envelopes recovered from an average, ordered by source.
    pub fn decode(&self, avg: &SparseRow) -> Result<Vec<Envelope>, DecodeError> {
        if avg.is_empty() {
            return Ok(vec![]);
        }
        let width = self.slot_width();
        let mut slots: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
        for &(i, x) in avg {
            slots.entry(i / width).or_default().push((i % width, x));
        }
        let lead = |cells: &[(usize, f64)]| cells.iter().find(|(o, _)| *o == 0).map(|(_, x)| *x);
        let scaled = |x: f64, t: f64| -> Result<Word, DecodeError> {
            nearest_word(x * t).ok_or_else(|| DecodeError::Malformed(format!("coordinate {x} times {t} is not a word")))
        };
        match self.mode {
            EncodingMode::ExactSlot => {
                let mut out = Vec::new();
                let mut count: Option<f64> = None;
                for (&src, cells) in &slots {
                    let c = lead(cells).ok_or_else(|| DecodeError::Malformed(format!("slot {src} lacks its constant")))?;
                    let t = (1.0 / c).round();
                    if count.is_some_and(|k| k != t) {
                        return Err(DecodeError::Malformed("slots disagree on the contributor count".into()));
                    }
                    count = Some(t);
                    let mut block = vec![0 as Word; width];
                    for &(o, x) in cells {
                        block[o] = scaled(x, t)?;
                    }
                    out.push(self.unpack(src, block[1], &block[2..])?);
                }
                let t = count.unwrap_or(0.0) as usize;
                if t != out.len() {
                    return Err(DecodeError::Unrecovered { got: out.len(), expected: t });
                }
                Ok(out)
            }
            EncodingMode::Hashed { seed, .. } => {
                let min_lead = slots
                    .values()
                    .filter_map(|c| lead(c))
                    .fold(f64::INFINITY, f64::min);
                if !min_lead.is_finite() || min_lead <= 0.0 {
                    return Err(DecodeError::Malformed("no block carries a constant".into()));
                }
                let t = (1.0 / min_lead).round();
                if t as usize > self.alpha {
                    return Err(DecodeError::TooManyContributors { got: t as usize, alpha: self.alpha });
                }
                let mut accepted: BTreeMap<MachineId, Envelope> = BTreeMap::new();
                for cells in slots.values() {
                    // only blocks written by exactly one contributor decode
                    if lead(cells).map(|c| (c * t).round()) != Some(1.0) {
                        continue;
                    }
                    let mut block = vec![0 as Word; width];
                    let mut ok = true;
                    for &(o, x) in cells {
                        match scaled(x, t) {
                            Ok(w) => block[o] = w,
                            Err(_) => ok = false,
                        }
                    }
                    if !ok || block[1] == 0 {
                        continue;
                    }
                    let src = block[1] as usize - 1;
                    let Ok(env) = self.unpack(src, block[2], &block[3..width - 1]) else { continue };
                    if self.checksum(seed, &env) != block[width - 1] {
                        continue;
                    }
                    accepted.entry(src).or_insert(env);
                }
                if accepted.len() != t as usize {
                    return Err(DecodeError::Unrecovered { got: accepted.len(), expected: t as usize });
                }
                Ok(accepted.into_values().collect())
            }
        }
    }

    fn unpack(&self, src: MachineId, header: Word, words: &[Word]) -> Result<Envelope, DecodeError> {
        let header = header as usize;
        let (dest, len) = (header / (self.delta + 1), header % (self.delta + 1));
        if len > words.len() {
            return Err(DecodeError::Malformed(format!("length {len} past the slot")));
        }
        Ok(Envelope { src, dest, words: words[..len].to_vec() })
    }
}

/// Uniform average of sparse rows.
/// The word `y` stands for once averaging and unscaling error is allowed
/// for: a few ulps relative to `y`, never less than `1e-6`.
pub(crate) fn nearest_word(y: f64) -> Option<Word> {
    let r = y.round();
    let tol = (8.0 * f64::EPSILON * y.abs()).max(1e-6);
    ((y - r).abs() <= tol && r >= 0.0).then_some(r as Word)
}

pub fn average(rows: &[&SparseRow]) -> SparseRow {
    let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
    for row in rows {
        for &(i, x) in row.iter() {
            *acc.entry(i).or_insert(0.0) += x;
        }
    }
    let t = rows.len() as f64;
    acc.into_iter().map(|(i, x)| (i, x / t)).collect()
}
