//! Exact-match attention on the simulator.
//!
//! Every token contributes two sort items: a key item `(k_i, 0 | v_i)` and a
//! query item `(q_i, 1)`. One sort puts each query right after all keys equal
//! to it. A segmented scan over the placement machines then hands every query
//! item the sum and count of the key run it closes; the scan runs up and down
//! a fan-`f` tree whose internal nodes live on their own machines. Results go
//! to home machines by token index and from there to the output blocks.
//!
//! Values are `f64` bit patterns. Keys compare by canonical bits, so `-0.0`
//! matches `0.0`.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2};

use crate::attention::canonical_key;
use crate::mpc::layout::{block_span, gather, records, scatter, Layout, LevelTree, PlacedTree};
use crate::mpc::sim::{
    run_protocol, FinalizeFn, LocalFault, LocalFn, Memory, MpcConfig, MpcError, MpcProtocol, Outgoing, StepOutput, Word,
};
use crate::mpc::sort::{SortPlan, SortStage};

/// Per-token widths of an exact-match instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmaShape {
    pub tokens: usize,
    pub key_dim: usize,
    pub value_dim: usize,
}

impl EmaShape {
    /// Input words per token: query, key, value.
    pub fn token_width(&self) -> usize {
        2 * self.key_dim + self.value_dim
    }
}

/// Scan state of a contiguous stretch of sorted items: the first and last
/// key, whether all keys agree, and the value sum and key-item count of the
/// last run.
#[derive(Debug, Clone, PartialEq)]
struct RunSummary {
    first: Vec<Word>,
    last: Vec<Word>,
    uniform: bool,
    count: u64,
    sum: Vec<f64>,
}

impl RunSummary {
    fn item(key: &[Word], value: Option<&[Word]>, dim: usize) -> Self {
        Self {
            first: key.to_vec(),
            last: key.to_vec(),
            uniform: true,
            count: value.is_some() as u64,
            sum: value.map_or(vec![0.0; dim], |v| v.iter().map(|w| f64::from_bits(*w)).collect()),
        }
    }

    fn then(self, next: &Self) -> Self {
        let joined = self.last == next.first && next.uniform;
        let (count, sum) = if joined {
            (self.count + next.count, self.sum.iter().zip(&next.sum).map(|(a, b)| a + b).collect())
        } else {
            (next.count, next.sum.clone())
        };
        Self {
            uniform: self.uniform && self.last == next.first && next.uniform,
            first: self.first,
            last: next.last.clone(),
            count,
            sum,
        }
    }

    fn encode(summary: Option<&Self>, key_dim: usize, value_dim: usize) -> Vec<Word> {
        match summary {
            None => vec![0; 3 + 2 * key_dim + value_dim],
            Some(s) => {
                let mut out = vec![1, s.uniform as Word, s.count];
                out.extend_from_slice(&s.first);
                out.extend_from_slice(&s.last);
                out.extend(s.sum.iter().map(|x| x.to_bits()));
                out
            }
        }
    }

    fn decode(words: &[Word], key_dim: usize) -> Option<Self> {
        (words[0] == 1).then(|| Self {
            uniform: words[1] == 1,
            count: words[2],
            first: words[3..3 + key_dim].to_vec(),
            last: words[3 + key_dim..3 + 2 * key_dim].to_vec(),
            sum: words[3 + 2 * key_dim..].iter().map(|w| f64::from_bits(*w)).collect(),
        })
    }
}

fn fold(prefix: Option<RunSummary>, next: &RunSummary) -> Option<RunSummary> {
    Some(match prefix {
        None => next.clone(),
        Some(p) => p.then(next),
    })
}

fn stray(id: usize) -> LocalFault {
    LocalFault::Malformed(format!("stray machine {id}"))
}

pub fn ema_simulation_protocol(shape: EmaShape, memory: usize) -> Result<MpcProtocol, LocalFault> {
    let EmaShape { tokens: n, key_dim: kd, value_dim: vd } = shape;
    if n == 0 || kd == 0 || vd == 0 {
        return Err(LocalFault::Capacity("empty exact-match shape".into()));
    }
    let s = memory;
    let d = shape.token_width();
    let words = n * d;
    let q_in = words.div_ceil(s);
    let q_out = (n * vd).div_ceil(s);
    let summary_width = 3 + 2 * kd + vd;
    // sort items: [key, kind, value]; record adds the index word
    let item_width = kd + 1 + vd;
    let record_width = item_width + 1;
    let per_placement = s / (2 * (record_width + 1));
    if per_placement == 0 {
        return Err(LocalFault::Capacity(format!("{record_width}-word records do not fit memory {s}")));
    }
    let fan = s / (2 * summary_width);
    if fan < 2 {
        return Err(LocalFault::Capacity(format!("memory {s} leaves scan fan {fan}")));
    }
    let per_home = s / (2 * (1 + vd));
    if per_home == 0 {
        return Err(LocalFault::Capacity(format!("{vd}-word values do not fit memory {s}")));
    }

    let mut layout = Layout::after(q_in.max(q_out));
    let stage = Arc::new(SortStage::place(
        SortPlan::new(2 * n, kd + 1, item_width, s, Some(per_placement))?,
        &mut layout,
    ));
    let leaves = stage.placement;
    let tree = Arc::new(PlacedTree::new(LevelTree::new(leaves.len, fan), leaves, &mut layout));
    let depth = tree.shape.depth();
    let homes = layout.alloc(n.div_ceil(per_home));

    // query words go to the query item, key and value words to the key item
    let route = {
        let stage = stage.clone();
        move |g: usize, dest: &mut Vec<usize>| {
            let (i, off) = (g / d, g % d);
            dest.push(stage.owner_of(if off < kd { n + i } else { i }));
        }
    };
    let mut rounds: Vec<LocalFn> = Vec::new();
    {
        let route = route.clone();
        rounds.push(Arc::new(move |id, m: &Memory| {
            Ok(StepOutput { retain: vec![], messages: scatter(id * s, &m.flatten(), route.clone()) })
        }));
    }
    let make_records = {
        let stage = stage.clone();
        Arc::new(move |a: usize, m: &Memory| -> Result<Vec<Word>, LocalFault> {
            let got = gather(stage.owners.id(a), m, |src| (src < q_in).then(|| block_span(src, s, words)), route.clone())?;
            let word = |g: usize| got.get(&g).copied().ok_or_else(|| LocalFault::Malformed(format!("missing word {g}")));
            let mut recs = Vec::new();
            for pos in stage.block_items(a) {
                recs.push(pos as Word);
                let (i, is_query) = if pos < n { (pos, false) } else { (pos - n, true) };
                let base = i * d + if is_query { 0 } else { kd };
                let key: Vec<f64> = (0..kd).map(|c| word(base + c).map(f64::from_bits)).collect::<Result<_, _>>()?;
                recs.extend(canonical_key(key));
                recs.push(is_query as Word);
                for c in 0..vd {
                    recs.push(if is_query { 0 } else { word(i * d + 2 * kd + c)? });
                }
            }
            Ok(recs)
        })
    };
    for k in 1..=stage.rounds() {
        let stage = stage.clone();
        let make_records = make_records.clone();
        rounds.push(Arc::new(move |id, m: &Memory| stage.step(k, id, m, &*make_records)));
    }

    let item_summary = move |rec: &[Word]| {
        let key = &rec[1..=kd];
        let value = (rec[kd + 1] == 0).then(|| &rec[kd + 2..]);
        RunSummary::item(key, value, vd)
    };
    // runs the scan over a leaf's records and sends query results home
    let answer = move |recs: &[Word], mut prefix: Option<RunSummary>| -> Result<StepOutput, LocalFault> {
        let mut by_home: Vec<(usize, Vec<Word>)> = Vec::new();
        for rec in records(recs, record_width)? {
            prefix = fold(prefix, &item_summary(rec));
            if rec[kd + 1] == 1 {
                let run = prefix.as_ref().expect("just folded");
                let i = rec[0] as usize - n;
                let mut msg = vec![i as Word];
                if run.count == 0 {
                    msg.extend(std::iter::repeat_n(0.0f64.to_bits(), vd));
                } else {
                    msg.extend(run.sum.iter().map(|x| (x / run.count as f64).to_bits()));
                }
                by_home.push((homes.id(i / per_home), msg));
            }
        }
        by_home.sort_by_key(|(h, _)| *h);
        let mut out = StepOutput::default();
        for (dest, msg) in by_home {
            match out.messages.last_mut() {
                Some(m) if m.dest == dest => m.payload.extend(msg),
                _ => out.messages.push(Outgoing::new(dest, msg)),
            }
        }
        Ok(out)
    };

    // leaves: collect placed records, then send a summary up or answer directly
    {
        let stage = stage.clone();
        let tree = tree.clone();
        rounds.push(Arc::new(move |id, m: &Memory| {
            let j = leaves.index(id).ok_or_else(|| stray(id))?;
            let recs: Vec<Word> = stage.placed(m)?.concat();
            if depth == 0 {
                return answer(&recs, None);
            }
            let summary = records(&recs, record_width)?.fold(None, |acc, r| fold(acc, &item_summary(r)));
            Ok(StepOutput::keep(recs).send(tree.parent(0, j), RunSummary::encode(summary.as_ref(), kd, vd)))
        }));
    }
    if depth > 0 {
        let combine = move |parts: &[Word]| -> Result<Option<RunSummary>, LocalFault> {
            Ok(records(parts, summary_width)?
                .filter_map(|w| RunSummary::decode(w, kd))
                .fold(None, |acc, x| fold(acc, &x)))
        };
        for t in 1..depth {
            let tree = tree.clone();
            rounds.push(Arc::new(move |id, m: &Memory| {
                let (lvl, j) = tree.locate(id).ok_or_else(|| stray(id))?;
                if lvl < t {
                    return Ok(StepOutput::keep(m.retained.clone()));
                }
                if lvl != t {
                    return Err(LocalFault::Malformed(format!("level {lvl} active in up round {t}")));
                }
                let children: Vec<Word> = m.inbox.iter().flat_map(|r| r.words.iter().copied()).collect();
                let summary = combine(&children)?;
                Ok(StepOutput::keep(children).send(tree.parent(t, j), RunSummary::encode(summary.as_ref(), kd, vd)))
            }));
        }
        // down: every node hands each child the scan of everything left of it
        for t in (1..=depth).rev() {
            let tree = tree.clone();
            rounds.push(Arc::new(move |id, m: &Memory| {
                let (lvl, j) = tree.locate(id).ok_or_else(|| stray(id))?;
                if lvl < t {
                    return Ok(StepOutput::keep(m.retained.clone()));
                }
                if lvl != t {
                    return Err(LocalFault::Malformed(format!("level {lvl} active in down round {t}")));
                }
                let (children, incoming): (Vec<Word>, Option<RunSummary>) = if t == depth {
                    (m.inbox.iter().flat_map(|r| r.words.iter().copied()).collect(), None)
                } else {
                    let inc = m.inbox.first().ok_or_else(|| LocalFault::Malformed("no prefix from parent".into()))?;
                    (m.retained.clone(), RunSummary::decode(&inc.words, kd))
                };
                let kids = tree.shape.children(t, j);
                let parts: Vec<&[Word]> = records(&children, summary_width)?.collect();
                if parts.len() != kids.len() {
                    return Err(LocalFault::Malformed(format!("{} summaries for {} children", parts.len(), kids.len())));
                }
                let mut prefix = incoming;
                let mut out = StepOutput::default();
                for (c, part) in kids.zip(parts) {
                    out = out.send(tree.levels[t - 1].id(c), RunSummary::encode(prefix.as_ref(), kd, vd));
                    if let Some(x) = RunSummary::decode(part, kd) {
                        prefix = fold(prefix, &x);
                    }
                }
                Ok(out)
            }));
        }
        rounds.push(Arc::new(move |id, m: &Memory| {
            leaves.index(id).ok_or_else(|| stray(id))?;
            let inc = m.inbox.first().ok_or_else(|| LocalFault::Malformed("no prefix from parent".into()))?;
            answer(&m.retained, RunSummary::decode(&inc.words, kd))
        }));
    }
    // homes: order results by token and scatter to the output blocks
    rounds.push(Arc::new(move |id, m: &Memory| {
        let h = homes.index(id).ok_or_else(|| stray(id))?;
        let span = block_span(h, per_home, n);
        let mut vals = vec![None; span.len()];
        for msg in &m.inbox {
            for r in records(&msg.words, 1 + vd)? {
                let t = (r[0] as usize).checked_sub(span.start).filter(|&t| t < span.len());
                let t = t.ok_or_else(|| LocalFault::Malformed(format!("token {} at home {h}", r[0])))?;
                vals[t] = Some(&r[1..]);
            }
        }
        let mut flat = Vec::with_capacity(span.len() * vd);
        for v in vals {
            flat.extend_from_slice(v.ok_or_else(|| LocalFault::Malformed(format!("home {h} is missing a token")))?);
        }
        Ok(StepOutput { retain: vec![], messages: scatter(span.start * vd, &flat, |g, dest| dest.push(g / s)) })
    }));
    let out_words = n * vd;
    let finalize: FinalizeFn = Arc::new(move |id, m: &Memory| {
        let got = gather(
            id,
            m,
            |src| homes.index(src).map(|h| block_span(h, per_home * vd, out_words)),
            |g, dest| dest.push(g / s),
        )?;
        Ok(got.into_values().collect())
    });
    let p = &stage.plan;
    let max_out_degree = [
        s.div_ceil(p.block) + 1,
        2 * p.fan,
        p.block.min(p.placement_machines()),
        fan,
        per_placement.min(homes.len),
        per_home * vd / s + 2,
    ]
    .into_iter()
    .max()
    .unwrap();
    let config = MpcConfig::new(words, s, layout.total());
    Ok(MpcProtocol { name: "ema-simulation".into(), rounds, finalize, output_len: out_words, max_out_degree, config })
}

/// Token-major `[q, k, v]` words of three matrices.
pub fn pack_ema_rows(q: ArrayView2<'_, f64>, k: ArrayView2<'_, f64>, v: ArrayView2<'_, f64>) -> Vec<Word> {
    let mut out = Vec::new();
    for ((qr, kr), vr) in q.rows().into_iter().zip(k.rows()).zip(v.rows()) {
        out.extend(qr.iter().chain(kr.iter()).chain(vr.iter()).map(|x| x.to_bits()));
    }
    out
}

/// Builds and runs the protocol on real matrices.
pub fn ema_simulate(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    memory: usize,
) -> Result<Array2<f64>, MpcError> {
    if q.nrows() != k.nrows() || k.nrows() != v.nrows() || q.ncols() != k.ncols() {
        return Err(MpcError::Config(format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape())));
    }
    let shape = EmaShape { tokens: q.nrows(), key_dim: q.ncols(), value_dim: v.ncols() };
    let p = ema_simulation_protocol(shape, memory).map_err(|e| MpcError::Config(e.to_string()))?;
    let out = run_protocol(&p, &pack_ema_rows(q, k, v), &p.config)?;
    Ok(Array2::from_shape_vec((shape.tokens, shape.value_dim), out.into_iter().map(f64::from_bits).collect())
        .expect("output length checked by the simulator"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::ema_forward;
    use crate::mpc::default_memory;
    use crate::rng::stream;
    use rand::Rng;

    fn grid(rows: usize, cols: usize, range: i64, seed: u64) -> Array2<f64> {
        let mut rng = stream(seed, &[rows as u64, cols as u64]);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(0..range) as f64)
    }

    fn memory_for(q: &Array2<f64>, v: &Array2<f64>) -> usize {
        default_memory(q.nrows() * (2 * q.ncols() + v.ncols()))
    }

    #[test]
    fn planted_groups_equal_reference() {
        let n = 128;
        let (q, k, v) = (grid(n, 2, 4, 1), grid(n, 2, 4, 2), grid(n, 3, 1000, 3));
        let got = ema_simulate(q.view(), k.view(), v.view(), memory_for(&q, &v)).unwrap();
        assert_eq!(got, ema_forward(q.view(), k.view(), v.view()).unwrap());
    }

    #[test]
    fn no_match_is_zero() {
        let n = 40;
        let q = grid(n, 1, 10, 4);
        let k = q.mapv(|x| x + 100.0);
        let v = grid(n, 2, 50, 5);
        let got = ema_simulate(q.view(), k.view(), v.view(), memory_for(&q, &v)).unwrap();
        assert!(got.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn single_pair_routes_its_value() {
        let n = 30;
        let q = Array2::from_shape_fn((n, 1), |(i, _)| if i == 7 { 5.0 } else { -1.0 });
        let k = Array2::from_shape_fn((n, 1), |(i, _)| if i == 22 { 5.0 } else { 1000.0 + i as f64 });
        let v = Array2::from_shape_fn((n, 1), |(i, _)| i as f64 * 1.5);
        let got = ema_simulate(q.view(), k.view(), v.view(), memory_for(&q, &v)).unwrap();
        assert_eq!(got[[7, 0]], 33.0);
        assert_eq!(got.iter().filter(|x| **x != 0.0).count(), 1);
    }

    #[test]
    fn one_giant_run_spans_many_machines() {
        let n = 300;
        let q = Array2::zeros((n, 1));
        let k = Array2::from_shape_fn((n, 1), |(i, _)| if i % 2 == 0 { -0.0 } else { 1.0 });
        let v = grid(n, 1, 8, 6);
        let got = ema_simulate(q.view(), k.view(), v.view(), 48).unwrap();
        assert_eq!(got, ema_forward(q.view(), k.view(), v.view()).unwrap());
    }
}
