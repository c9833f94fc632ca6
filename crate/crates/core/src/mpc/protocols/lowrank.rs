//! Low-rank attention `Q (K^T V)` by a tree sum of per-group outer products
//! followed by a broadcast of the `r x m` product.
//!
//! Each token arrives as `[q (r words), k (r words), v (m words)]` and leaves
//! as the `m` words of `q M`.

use std::sync::Arc;

use crate::mpc::layout::{block_span, gather, records, scatter, Layout, LevelTree, PlacedTree};
use crate::mpc::sim::{FinalizeFn, LocalFault, LocalFn, Memory, MpcConfig, MpcProtocol, StepOutput, Word};

/// Arithmetic on machine words.
pub trait Ring: Send + Sync + 'static {
    fn zero(&self) -> Word;
    fn add(&self, a: Word, b: Word) -> Word;
    fn mul(&self, a: Word, b: Word) -> Word;
    fn name(&self) -> String;
}

/// `f64` values stored by their bit patterns.
#[derive(Debug, Clone, Copy, Default)]
pub struct RealRing;

impl Ring for RealRing {
    fn zero(&self) -> Word {
        0f64.to_bits()
    }
    fn add(&self, a: Word, b: Word) -> Word {
        (f64::from_bits(a) + f64::from_bits(b)).to_bits()
    }
    fn mul(&self, a: Word, b: Word) -> Word {
        (f64::from_bits(a) * f64::from_bits(b)).to_bits()
    }
    fn name(&self) -> String {
        "real".into()
    }
}

/// Integers modulo `2^bits`.
#[derive(Debug, Clone, Copy)]
pub struct ModRing {
    pub bits: u32,
}

impl ModRing {
    fn mask(&self) -> Word {
        if self.bits >= 64 {
            Word::MAX
        } else {
            (1 << self.bits) - 1
        }
    }
}

impl Ring for ModRing {
    fn zero(&self) -> Word {
        0
    }
    fn add(&self, a: Word, b: Word) -> Word {
        a.wrapping_add(b) & self.mask()
    }
    fn mul(&self, a: Word, b: Word) -> Word {
        a.wrapping_mul(b) & self.mask()
    }
    fn name(&self) -> String {
        format!("mod-2^{}", self.bits)
    }
}

/// Shape of a [`low_rank_mpc`] instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LowRankShape {
    pub tokens: usize,
    pub rank: usize,
    pub value_dim: usize,
}

impl LowRankShape {
    pub fn token_width(&self) -> usize {
        2 * self.rank + self.value_dim
    }
}

pub fn low_rank_mpc<R: Ring>(shape: LowRankShape, memory: usize, ring: R) -> Result<MpcProtocol, LocalFault> {
    let LowRankShape { tokens: n, rank: r, value_dim: m } = shape;
    if n == 0 || r == 0 || m == 0 {
        return Err(LocalFault::Capacity("empty low-rank shape".into()));
    }
    let s = memory;
    let d = shape.token_width();
    let rm = r * m;
    let per_group = (s / (2 * (d + m))).max(1);
    if per_group * d > s || per_group * r + rm > s {
        return Err(LocalFault::Capacity(format!("a {d}-word token does not fit memory {s}")));
    }
    let fan = (s.saturating_sub(per_group * r) / rm).saturating_sub(1);
    if fan < 2 {
        return Err(LocalFault::Capacity(format!("memory {s} leaves tree fan {fan} for {rm}-word partial sums")));
    }
    let words = n * d;
    let q_in = words.div_ceil(s);
    let q_out = (n * m).div_ceil(s);
    let mut layout = Layout::after(q_in.max(q_out));
    let groups = n.div_ceil(per_group);
    let group_region = layout.alloc(groups);
    let tree = Arc::new(PlacedTree::new(LevelTree::new(groups, fan), group_region, &mut layout));
    let depth = tree.shape.depth();
    let ring = Arc::new(ring);

    let route = move |g: usize, dest: &mut Vec<usize>| dest.push(group_region.id(g / d / per_group));
    let mut rounds: Vec<LocalFn> = Vec::new();
    rounds.push(Arc::new(move |id, mem: &Memory| {
        Ok(StepOutput { retain: vec![], messages: scatter(id * s, &mem.flatten(), route) })
    }));

    // rows of the group's tokens, in order
    let group_tokens = move |j: usize, mem: &Memory| -> Result<Vec<Word>, LocalFault> {
        let got = gather(group_region.id(j), mem, |src| (src < q_in).then(|| block_span(src, s, words)), route)?;
        let want = block_span(j, per_group, n).len() * d;
        if got.len() != want {
            return Err(LocalFault::Malformed(format!("group {j} holds {} of {want} words", got.len())));
        }
        Ok(got.into_values().collect())
    };
    let partial = {
        let ring = ring.clone();
        move |rows: &[Word]| -> Result<(Vec<Word>, Vec<Word>), LocalFault> {
            let mut acc = vec![ring.zero(); rm];
            let mut qs = Vec::new();
            for row in records(rows, d)? {
                let (q, rest) = row.split_at(r);
                let (k, v) = rest.split_at(r);
                qs.extend_from_slice(q);
                for (a, &ka) in k.iter().enumerate() {
                    for (b, &vb) in v.iter().enumerate() {
                        acc[a * m + b] = ring.add(acc[a * m + b], ring.mul(ka, vb));
                    }
                }
            }
            Ok((qs, acc))
        }
    };
    let sum_inbox = {
        let ring = ring.clone();
        move |mem: &Memory| -> Result<Vec<Word>, LocalFault> {
            let mut acc = vec![ring.zero(); rm];
            for msg in &mem.inbox {
                if msg.words.len() != rm {
                    return Err(LocalFault::Malformed("partial sum of wrong size".into()));
                }
                for (x, &y) in acc.iter_mut().zip(&msg.words) {
                    *x = ring.add(*x, y);
                }
            }
            Ok(acc)
        }
    };
    let product = {
        let ring = ring.clone();
        move |qs: &[Word], mat: &[Word]| -> Vec<Word> {
            let mut out = Vec::with_capacity(qs.len() / r * m);
            for q in qs.chunks_exact(r) {
                for b in 0..m {
                    out.push((0..r).fold(ring.zero(), |acc, a| ring.add(acc, ring.mul(q[a], mat[a * m + b]))));
                }
            }
            out
        }
    };

    if depth == 0 {
        // a single group does everything locally
        let product = product.clone();
        rounds.push(Arc::new(move |_, mem: &Memory| {
            let (qs, mat) = partial(&group_tokens(0, mem)?)?;
            let out = product(&qs, &mat);
            Ok(StepOutput { retain: vec![], messages: scatter(0, &out, |g, dest| dest.push(g / s)) })
        }));
    } else {
        for t in 0..depth {
            let tree = tree.clone();
            let partial = partial.clone();
            let sum_inbox = sum_inbox.clone();
            rounds.push(Arc::new(move |id, mem: &Memory| {
                let (lvl, j) = tree.locate(id).ok_or_else(|| LocalFault::Malformed(format!("stray machine {id}")))?;
                if lvl == 0 && t > 0 {
                    return Ok(StepOutput::keep(mem.retained.clone()));
                }
                if lvl != t {
                    return Err(LocalFault::Malformed(format!("level {lvl} active in up round {t}")));
                }
                let (keep, value) = if t == 0 {
                    partial(&group_tokens(j, mem)?)?
                } else {
                    (vec![], sum_inbox(mem)?)
                };
                Ok(StepOutput::keep(keep).send(tree.parent(t, j), value))
            }));
        }
        for t in (1..=depth).rev() {
            let tree = tree.clone();
            let sum_inbox = sum_inbox.clone();
            rounds.push(Arc::new(move |id, mem: &Memory| {
                let (lvl, j) = tree.locate(id).ok_or_else(|| LocalFault::Malformed(format!("stray machine {id}")))?;
                if lvl == 0 {
                    return Ok(StepOutput::keep(mem.retained.clone()));
                }
                if lvl != t {
                    return Err(LocalFault::Malformed(format!("level {lvl} active in down round {t}")));
                }
                let value = if t == depth { sum_inbox(mem)? } else { mem.inbox.first().map(|x| x.words.clone()).unwrap_or_default() };
                let mut out = StepOutput::default();
                for c in tree.shape.children(t, j) {
                    out = out.send(tree.levels[t - 1].id(c), value.clone());
                }
                Ok(out)
            }));
        }
        rounds.push(Arc::new(move |id, mem: &Memory| {
            let j = group_region.index(id).ok_or_else(|| LocalFault::Malformed(format!("stray machine {id}")))?;
            let mat = mem.inbox.first().map(|x| x.words.as_slice()).unwrap_or(&[]);
            if mat.len() != rm {
                return Err(LocalFault::Malformed(format!("group {j} has no product")));
            }
            let out = product(&mem.retained, mat);
            let start = block_span(j, per_group, n).start * m;
            Ok(StepOutput { retain: vec![], messages: scatter(start, &out, |g, dest| dest.push(g / s)) })
        }));
    }
    let out_words = n * m;
    let finalize: FinalizeFn = Arc::new(move |id, mem: &Memory| {
        let got = gather(
            id,
            mem,
            |src| group_region.index(src).map(|j| block_span(j, per_group * m, out_words)),
            |g, dest| dest.push(g / s),
        )?;
        Ok(got.into_values().collect())
    });
    let config = MpcConfig::new(words, s, layout.total());
    Ok(MpcProtocol {
        name: format!("low-rank-{}", ring.name()),
        rounds,
        finalize,
        output_len: out_words,
        max_out_degree: fan.max(s.div_ceil(per_group * d) + 1).max(per_group * m / s + 2),
        config,
    })
}

/// Packs `[q, k, v]` rows of real matrices into protocol input words.
pub fn pack_real_rows(q: &ndarray::Array2<f64>, k: &ndarray::Array2<f64>, v: &ndarray::Array2<f64>) -> Vec<Word> {
    let mut out = Vec::new();
    for ((qr, kr), vr) in q.rows().into_iter().zip(k.rows()).zip(v.rows()) {
        out.extend(qr.iter().chain(kr.iter()).chain(vr.iter()).map(|x| x.to_bits()));
    }
    out
}
