//! Induction heads and k-hop by sorting and pointer doubling.
//!
//! Positions are 1-based; `0` stands for "no position" and the reserved
//! bottom word for "no token". Each position `i` becomes a sort item
//! `(x_i, i | x_{i+1})`. After sorting, the item just before `i` in sorted
//! order holds the last earlier occurrence `j` of `x_i` whenever the tokens
//! agree, which gives `sigma(i) = j + 1` and the token `x_{j+1}` at once.
//!
//! For k hops every position then keeps `(J, w_J, A, w_A)` on a home machine,
//! with `J = sigma^(2^l)(i)` and `A = sigma^(k mod 2^l)(i)`, and doubles with
//! one request round and one reply round per bit of `k`. A non-zero target is
//! requested by at most one position per field, because `sigma` is injective
//! away from 0, so fan-in at a home stays bounded.

use std::sync::Arc;

use crate::mpc::layout::{block_span, gather, records, scatter, Layout, Region};
use crate::mpc::sim::{
    FinalizeFn, LocalFault, LocalFn, MachineStates, Memory, MpcConfig, MpcProtocol, Outgoing, StepOutput, Word,
};
use crate::mpc::sort::{SortPlan, SortStage};

/// Constant in the declared round bound `C / epsilon + 2 (floor(log2 k) + 1)`.
pub const HOP_ROUND_CONSTANT: usize = 6;
/// Memory exponent the protocols are laid out for.
pub const HOP_EPSILON: f64 = 0.5;

/// Declared round bound of [`khop_protocol`].
pub fn khop_round_bound(k: usize) -> usize {
    (HOP_ROUND_CONSTANT as f64 / HOP_EPSILON) as usize + 2 * (k.ilog2() as usize + 1)
}

/// Declared round bound of [`induction_protocol`].
pub fn induction_round_bound() -> usize {
    (HOP_ROUND_CONSTANT as f64 / HOP_EPSILON) as usize
}

/// State of one position during doubling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HopTuple {
    pub pos: usize,
    /// `sigma^(2^l)(pos)` and its token.
    pub jump: usize,
    pub jump_token: Word,
    /// `sigma^(k mod 2^l)(pos)` and its token.
    pub acc: usize,
    pub acc_token: Word,
}

/// A built hop protocol with enough layout to inspect home machines.
#[derive(Debug, Clone)]
pub struct HopProtocol {
    pub protocol: MpcProtocol,
    pub hops: Option<usize>,
    pub sort_rounds: usize,
    homes: Region,
    per_home: usize,
    n: usize,
}

const STATE: usize = 4;

fn home_of(homes: Region, per_home: usize, pos: usize) -> usize {
    homes.id((pos - 1) / per_home)
}

fn group(messages: Vec<(usize, Vec<Word>)>) -> Vec<Outgoing> {
    let mut sorted = messages;
    sorted.sort_by_key(|(d, _)| *d);
    let mut out: Vec<Outgoing> = Vec::new();
    for (dest, words) in sorted {
        match out.last_mut() {
            Some(m) if m.dest == dest => m.payload.extend(words),
            _ => out.push(Outgoing::new(dest, words)),
        }
    }
    out
}

fn malformed(msg: impl Into<String>) -> LocalFault {
    LocalFault::Malformed(msg.into())
}

/// Home state before the doubling updates that are still in the inbox.
fn initial_state(lo: usize, len: usize, m: &Memory) -> Result<Vec<Word>, LocalFault> {
    let mut state = vec![0 as Word; len * STATE];
    let mut seen = vec![false; len];
    for msg in &m.inbox {
        for r in records(&msg.words, 4)? {
            let t = (r[0] as usize).checked_sub(lo).filter(|&t| t < len).ok_or_else(|| malformed("foreign position"))?;
            // (sigma, w_sigma, i, x_i)
            state[t * STATE..(t + 1) * STATE].copy_from_slice(&[r[2], r[3], r[0], r[1]]);
            seen[t] = true;
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(malformed("home is missing a position"));
    }
    Ok(state)
}

fn apply_replies(state: &mut [Word], lo: usize, m: &Memory) -> Result<(), LocalFault> {
    for msg in &m.inbox {
        for r in records(&msg.words, 4)? {
            let t = (r[0] as usize).checked_sub(lo).ok_or_else(|| malformed("foreign reply"))?;
            let base = t * STATE + if r[1] == 0 { 0 } else { 2 };
            let slot = state.get_mut(base..base + 2).ok_or_else(|| malformed("foreign reply"))?;
            slot.copy_from_slice(&r[2..4]);
        }
    }
    Ok(())
}

impl HopProtocol {
    /// Round after which the replies of doubling step `l` sit in the homes'
    /// inboxes.
    pub fn step_boundary(&self, l: usize) -> usize {
        2 + self.sort_rounds + 2 + 2 * l + 2
    }

    /// Doubling state of every position after the boundary of a step,
    /// applying pending replies the way the next round would.
    pub fn tuples(&self, states: &MachineStates) -> Result<Vec<HopTuple>, LocalFault> {
        let mut out = Vec::with_capacity(self.n);
        let empty = Memory::default();
        for h in 0..self.homes.len {
            let span = block_span(h, self.per_home, self.n);
            let lo = span.start + 1;
            let mem = states.get(&self.homes.id(h)).unwrap_or(&empty);
            let mut state = mem.retained.clone();
            if state.len() != span.len() * STATE {
                return Err(malformed(format!("home {h} holds {} state words", state.len())));
            }
            apply_replies(&mut state, lo, mem)?;
            for (t, s) in state.chunks_exact(STATE).enumerate() {
                out.push(HopTuple {
                    pos: lo + t,
                    jump: s[0] as usize,
                    jump_token: s[1],
                    acc: s[2] as usize,
                    acc_token: s[3],
                });
            }
        }
        Ok(out)
    }
}

/// Outputs `w_{sigma(i)}` per position, bottom when `sigma(i) = 0`.
pub fn induction_protocol(n: usize, memory: usize, word_bits: u32) -> Result<HopProtocol, LocalFault> {
    build(n, memory, word_bits, None)
}

/// Outputs `w_{sigma^k(i)}` per position, bottom when the chain reaches 0.
pub fn khop_protocol(n: usize, k: usize, memory: usize, word_bits: u32) -> Result<HopProtocol, LocalFault> {
    if k == 0 {
        return Err(LocalFault::Capacity("k must be at least 1".into()));
    }
    build(n, memory, word_bits, Some(k))
}

fn build(n: usize, memory: usize, word_bits: u32, hops: Option<usize>) -> Result<HopProtocol, LocalFault> {
    if n == 0 {
        return Err(LocalFault::Capacity("empty input".into()));
    }
    let bottom = crate::mpc::sim::bottom_word(word_bits);
    let s = memory;
    let q_in = n.div_ceil(s);
    let mut layout = Layout::after(q_in);
    let stage = Arc::new(SortStage::place(SortPlan::new(n, 1, 2, s, None)?, &mut layout));
    let per_home = (s / 16).max(1);
    if per_home * 12 > s {
        return Err(LocalFault::Capacity(format!("memory {s} is too small for home machines")));
    }
    let homes = layout.alloc(n.div_ceil(per_home));
    let home_span = move |h: usize| block_span(h, per_home, n);

    let mut rounds: Vec<LocalFn> = Vec::new();
    let route = {
        let stage = stage.clone();
        move |g: usize, d: &mut Vec<usize>| d.push(stage.owner_of(g))
    };
    {
        let route = route.clone();
        rounds.push(Arc::new(move |id, m: &Memory| {
            Ok(StepOutput { retain: vec![], messages: scatter(id * s, &m.flatten(), route.clone()) })
        }));
    }
    // owners lend their first token to the previous block
    {
        let stage = stage.clone();
        rounds.push(Arc::new(move |id, m: &Memory| {
            let a = stage.owners.index(id).ok_or_else(|| malformed(format!("stray machine {id}")))?;
            let got = gather(id, m, |src| (src < q_in).then(|| block_span(src, s, n)), route.clone())?;
            let tokens: Vec<Word> = got.into_values().collect();
            if tokens.len() != stage.block_items(a).len() {
                return Err(malformed(format!("owner {a} holds {} tokens", tokens.len())));
            }
            let first = tokens.first().copied();
            let mut out = StepOutput::keep(tokens);
            if let (Some(w), true) = (first, a > 0) {
                out = out.send(stage.owners.id(a - 1), vec![w]);
            }
            Ok(out)
        }));
    }
    let make_records = {
        let stage = stage.clone();
        Arc::new(move |a: usize, m: &Memory| -> Result<Vec<Word>, LocalFault> {
            let next_block = m.inbox.first().and_then(|r| r.words.first()).copied().unwrap_or(bottom);
            let span = stage.block_items(a);
            let mut recs = Vec::with_capacity(span.len() * 3);
            for (t, pos) in span.enumerate() {
                let next = m.retained.get(t + 1).copied().unwrap_or(next_block);
                recs.extend_from_slice(&[pos as Word + 1, m.retained[t], next]);
            }
            Ok(recs)
        })
    };
    for k in 1..=stage.rounds() {
        let stage = stage.clone();
        let make_records = make_records.clone();
        rounds.push(Arc::new(move |id, m: &Memory| stage.step(k, id, m, &*make_records)));
    }
    // each placement machine lends its last item to the next one
    {
        let stage = stage.clone();
        rounds.push(Arc::new(move |id, m: &Memory| {
            let p = stage.placement.index(id).ok_or_else(|| malformed(format!("stray machine {id}")))?;
            let recs = stage.placed(m)?;
            let mut out = StepOutput::keep(recs.concat());
            if p + 1 < stage.placement.len {
                out = out.send(id + 1, recs.last().cloned().unwrap_or_default());
            }
            Ok(out)
        }));
    }
    {
        let stage = stage.clone();
        rounds.push(Arc::new(move |_, m: &Memory| {
            let mut prev: Option<Vec<Word>> = m.inbox.first().map(|r| r.words.clone());
            let mut msgs = Vec::new();
            for r in records(&m.retained, 3)? {
                let (i, x) = (r[0], r[1]);
                let (sigma, val) = match &prev {
                    Some(p) if p[1] == x => (p[0] + 1, p[2]),
                    _ => (0, bottom),
                };
                msgs.push((home_of(homes, per_home, i as usize), vec![i, x, sigma, val]));
                prev = Some(r.to_vec());
            }
            let _ = &stage;
            Ok(StepOutput { retain: vec![], messages: group(msgs) })
        }));
    }
    if let Some(k) = hops {
        let last = k.ilog2() as usize;
        for l in 0..=last {
            rounds.push(Arc::new(move |id, m: &Memory| {
                let h = homes.index(id).ok_or_else(|| malformed(format!("stray machine {id}")))?;
                let span = home_span(h);
                let lo = span.start + 1;
                let state = if l == 0 {
                    initial_state(lo, span.len(), m)?
                } else {
                    let mut st = m.retained.clone();
                    apply_replies(&mut st, lo, m)?;
                    st
                };
                let mut msgs = Vec::new();
                for (t, st) in state.chunks_exact(STATE).enumerate() {
                    let pos = (lo + t) as Word;
                    if (k >> l) & 1 == 1 && st[2] != 0 {
                        msgs.push((home_of(homes, per_home, st[2] as usize), vec![st[2], pos, 1]));
                    }
                    if l < last && st[0] != 0 {
                        msgs.push((home_of(homes, per_home, st[0] as usize), vec![st[0], pos, 0]));
                    }
                }
                Ok(StepOutput { retain: state, messages: group(msgs) })
            }));
            rounds.push(Arc::new(move |id, m: &Memory| {
                let h = homes.index(id).ok_or_else(|| malformed(format!("stray machine {id}")))?;
                let lo = home_span(h).start + 1;
                let mut msgs = Vec::new();
                for msg in &m.inbox {
                    for r in records(&msg.words, 3)? {
                        let t = r[0] as usize - lo;
                        let st = &m.retained[t * STATE..(t + 1) * STATE];
                        msgs.push((home_of(homes, per_home, r[1] as usize), vec![r[1], r[2], st[0], st[1]]));
                    }
                }
                Ok(StepOutput { retain: m.retained.clone(), messages: group(msgs) })
            }));
        }
    }
    rounds.push(Arc::new(move |id, m: &Memory| {
        let h = homes.index(id).ok_or_else(|| malformed(format!("stray machine {id}")))?;
        let span = home_span(h);
        let lo = span.start + 1;
        let state = match hops {
            None => initial_state(lo, span.len(), m)?,
            Some(_) => {
                let mut st = m.retained.clone();
                apply_replies(&mut st, lo, m)?;
                st
            }
        };
        // induction reads w_sigma, k-hop reads the accumulated token
        let col = if hops.is_some() { 3 } else { 1 };
        let vals: Vec<Word> = state.chunks_exact(STATE).map(|st| st[col]).collect();
        Ok(StepOutput { retain: vec![], messages: scatter(span.start, &vals, |g, d| d.push(g / s)) })
    }));
    let finalize: FinalizeFn = Arc::new(move |id, m: &Memory| {
        let got = gather(id, m, |src| homes.index(src).map(home_span), |g, d| d.push(g / s))?;
        Ok(got.into_values().collect())
    });
    let sort_rounds = stage.rounds();
    let p = &stage.plan;
    let scatter_degree = s.div_ceil(p.block) + 1;
    let max_out_degree = [scatter_degree, 2 * p.fan, p.block.min(p.placement_machines()), p.per_placement.min(homes.len), 2 * per_home, 2]
        .into_iter()
        .max()
        .unwrap();
    let name = match hops {
        None => "induction".to_string(),
        Some(k) => format!("khop-{k}"),
    };
    let config = MpcConfig::new(n, s, layout.total()).with_word_bits(word_bits);
    Ok(HopProtocol {
        protocol: MpcProtocol { name, rounds, finalize, output_len: n, max_out_degree, config },
        hops,
        sort_rounds,
        homes,
        per_home,
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpc::{default_memory, run_observed, run_protocol};
    use crate::rng::stream;
    use rand::Rng;

    // sigma(i): one past the last earlier occurrence of x_i, 0 if none
    fn sigma(x: &[Word]) -> Vec<usize> {
        (1..=x.len())
            .map(|i| (1..i).rev().find(|&j| x[j - 1] == x[i - 1]).map_or(0, |j| j + 1))
            .collect()
    }

    fn sigma_pow(sig: &[usize], i: usize, k: usize) -> usize {
        (0..k).fold(i, |j, _| if j == 0 { 0 } else { sig[j - 1] })
    }

    fn tokens(n: usize, alphabet: Word, seed: u64) -> Vec<Word> {
        let mut rng = stream(seed, &[n as u64]);
        (0..n).map(|_| rng.random_range(0..alphabet)).collect()
    }

    #[test]
    fn induction_matches_oracle() {
        for (n, seed) in [(64, 1), (256, 2), (100, 3)] {
            let x = tokens(n, 6, seed);
            let p = induction_protocol(n, default_memory(n), 64).unwrap().protocol;
            let out = run_protocol(&p, &x, &p.config).unwrap();
            let sig = sigma(&x);
            let want: Vec<Word> = sig.iter().map(|&j| if j == 0 { Word::MAX } else { x[j - 1] }).collect();
            assert_eq!(out, want);
            assert!(p.round_count() <= induction_round_bound());
        }
    }

    #[test]
    fn khop_matches_oracle() {
        for n in [64, 256] {
            for k in [1, 2, 3, 5, 8] {
                let x = tokens(n, 4, k as u64);
                let p = khop_protocol(n, k, default_memory(n), 64).unwrap().protocol;
                let out = run_protocol(&p, &x, &p.config).unwrap();
                let sig = sigma(&x);
                let want: Vec<Word> = (1..=n)
                    .map(|i| match sigma_pow(&sig, i, k) {
                        0 => Word::MAX,
                        j => x[j - 1],
                    })
                    .collect();
                assert_eq!(out, want, "n={n} k={k}");
                assert!(p.round_count() <= khop_round_bound(k), "{} rounds", p.round_count());
            }
        }
    }

    #[test]
    fn doubling_invariant_holds_each_step() {
        let (n, k) = (128, 13);
        let x = tokens(n, 3, 9);
        let hp = khop_protocol(n, k, default_memory(n), 64).unwrap();
        let sig = sigma(&x);
        let last = k.ilog2() as usize;
        let mut checked = 0;
        run_observed(&hp.protocol, &x, &hp.protocol.config, |round, states| {
            for l in 0..=last {
                if round == hp.step_boundary(l) {
                    for t in hp.tuples(states).unwrap() {
                        let jump = if l < last { 1 << (l + 1) } else { 1 << l };
                        assert_eq!(t.jump, sigma_pow(&sig, t.pos, jump));
                        assert_eq!(t.acc, sigma_pow(&sig, t.pos, k % (1 << (l + 1))));
                    }
                    checked += 1;
                }
            }
        })
        .unwrap();
        assert_eq!(checked, last + 1);
    }

    #[test]
    fn tiny_memory_is_a_capacity_error() {
        assert!(matches!(khop_protocol(256, 3, 8, 64), Err(LocalFault::Capacity(_))));
        assert!(matches!(khop_protocol(16, 0, 64, 64), Err(LocalFault::Capacity(_))));
    }

    #[test]
    #[ignore]
    fn print_round_counts() {
        for n in [64usize, 256, 1024, 4096, 16384] {
            let h = induction_protocol(n, default_memory(n), 64).unwrap();
            println!("n={n} s={} sort={} induction={} machines={}", default_memory(n), h.sort_rounds, h.protocol.round_count(), h.protocol.config.machines);
        }
    }
}
