//! Placement-level protocols: identity, shift, echo, and a standalone sort.

use std::sync::Arc;

use crate::mpc::layout::{block_span, gather, scatter, Layout};
use crate::mpc::sim::{FinalizeFn, LocalFault, LocalFn, Memory, MpcConfig, MpcProtocol, StepOutput, Word};
use crate::mpc::sort::{SortPlan, SortStage};

fn keep_block() -> FinalizeFn {
    Arc::new(|_, m: &Memory| Ok(m.flatten()))
}

/// Zero rounds: output is the placed input.
pub fn identity_protocol(n: usize, memory: usize) -> MpcProtocol {
    let config = MpcConfig::new(n, memory, n.div_ceil(memory).max(1));
    MpcProtocol { name: "identity".into(), rounds: vec![], finalize: keep_block(), output_len: n, max_out_degree: 0, config }
}

/// One round; output is the input rotated right by one word.
pub fn shift_protocol(n: usize, memory: usize) -> MpcProtocol {
    let q = n.div_ceil(memory).max(1);
    let round: LocalFn = Arc::new(move |id, m: &Memory| {
        let mut words = m.flatten();
        let last = words.pop().expect("non-empty memory");
        Ok(StepOutput::keep(words).send((id + 1) % q, vec![last]))
    });
    let finalize: FinalizeFn = Arc::new(|_, m: &Memory| {
        let mut out: Vec<Word> = m.inbox.iter().flat_map(|r| r.words.iter().copied()).collect();
        out.extend_from_slice(&m.retained);
        Ok(out)
    });
    let config = MpcConfig::new(n, memory, q);
    MpcProtocol { name: "shift".into(), rounds: vec![round], finalize, output_len: n, max_out_degree: 1, config }
}

/// One round in which every machine sends its memory to itself.
pub fn echo_protocol(n: usize, memory: usize) -> MpcProtocol {
    let round: LocalFn = Arc::new(|id, m: &Memory| Ok(StepOutput::default().send(id, m.flatten())));
    let config = MpcConfig::new(n, memory, n.div_ceil(memory).max(1));
    MpcProtocol { name: "echo".into(), rounds: vec![round], finalize: keep_block(), output_len: n, max_out_degree: 1, config }
}

/// Sorts `n` items of `width` words, comparing the first `key_width` words
/// and breaking ties by position. Output is the items in order.
pub fn sort_protocol(n: usize, key_width: usize, width: usize, memory: usize) -> Result<MpcProtocol, LocalFault> {
    let words = n * width;
    let q_in = words.div_ceil(memory);
    let mut layout = Layout::after(q_in);
    let plan = SortPlan::new(n, key_width, width, memory, Some(memory / (width + 2)))?;
    let stage = Arc::new(SortStage::place(plan, &mut layout));

    let route = {
        let stage = stage.clone();
        move |g: usize, d: &mut Vec<usize>| d.push(stage.owner_of(g / width))
    };
    let mut rounds: Vec<LocalFn> = Vec::new();
    {
        let route = route.clone();
        rounds.push(Arc::new(move |id, m: &Memory| {
            let start = id * memory;
            Ok(StepOutput { retain: vec![], messages: scatter(start, &m.flatten(), route.clone()) })
        }));
    }
    let make_records = {
        let stage = stage.clone();
        move |a: usize, m: &Memory| -> Result<Vec<Word>, LocalFault> {
            let me = stage.owners.id(a);
            let got = gather(me, m, |src| (src < q_in).then(|| block_span(src, memory, words)), route.clone())?;
            let mut recs = Vec::new();
            for pos in stage.block_items(a) {
                recs.push(pos as Word);
                for t in 0..width {
                    let g = pos * width + t;
                    recs.push(*got.get(&g).ok_or_else(|| LocalFault::Malformed(format!("missing word {g}")))?);
                }
            }
            Ok(recs)
        }
    };
    let make_records = Arc::new(make_records);
    for k in 1..=stage.rounds() {
        let stage = stage.clone();
        let make_records = make_records.clone();
        rounds.push(Arc::new(move |id, m: &Memory| stage.step(k, id, m, &*make_records)));
    }
    // placement machines hand their items to the output blocks
    {
        let stage = stage.clone();
        rounds.push(Arc::new(move |id, m: &Memory| {
            let p = stage.placement.index(id).ok_or_else(|| LocalFault::Malformed(format!("stray machine {id}")))?;
            let items: Vec<Word> = stage.placed(m)?.into_iter().flat_map(|r| r[1..].to_vec()).collect();
            let start = stage.first_rank(p) * width;
            Ok(StepOutput { retain: vec![], messages: scatter(start, &items, |g, d| d.push(g / memory)) })
        }));
    }
    let finalize: FinalizeFn = {
        let stage = stage.clone();
        Arc::new(move |id, m: &Memory| {
            let per = stage.plan.per_placement * width;
            let got = gather(
                id,
                m,
                |src| stage.placement.index(src).map(|p| block_span(p, per, words)),
                |g, d| d.push(g / memory),
            )?;
            Ok(got.into_values().collect())
        })
    };
    let p = &stage.plan;
    let scatter_degree = memory.div_ceil(p.block * width) + 1;
    let max_out_degree = [scatter_degree, p.fan * 2, p.block.min(p.placement_machines()), 2].into_iter().max().unwrap();
    let config = MpcConfig::new(words, memory, layout.total());
    Ok(MpcProtocol { name: "sort".into(), rounds, finalize, output_len: words, max_out_degree, config })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpc::{default_memory, run_protocol};
    use crate::rng::stream;
    use rand::Rng;

    fn check_sort(items: &[Vec<Word>], key_width: usize, memory: usize) {
        let width = items[0].len();
        let p = sort_protocol(items.len(), key_width, width, memory).unwrap();
        let input: Vec<Word> = items.concat();
        let out = run_protocol(&p, &input, &p.config).unwrap();
        let mut want = items.to_vec();
        want.sort_by(|a, b| a[..key_width].cmp(&b[..key_width]));
        assert_eq!(out, want.concat());
    }

    #[test]
    fn sorts_random_sorted_and_reversed() {
        let mut rng = stream(3, &[0]);
        let n = 256;
        let s = default_memory(n * 2);
        let random: Vec<Vec<Word>> = (0..n).map(|i| vec![rng.random_range(0..20), i as Word]).collect();
        check_sort(&random, 1, s);
        let sorted: Vec<Vec<Word>> = (0..n as Word).map(|i| vec![i, 7]).collect();
        check_sort(&sorted, 1, s);
        let reversed: Vec<Vec<Word>> = (0..n as Word).rev().map(|i| vec![i, i * 3]).collect();
        check_sort(&reversed, 1, s);
    }

    #[test]
    fn ties_keep_input_order() {
        let items: Vec<Vec<Word>> = (0..100).map(|i| vec![i % 3, i]).collect();
        check_sort(&items, 1, 40);
    }

    #[test]
    fn shift_and_identity() {
        let input: Vec<Word> = (0..10).collect();
        let p = shift_protocol(10, 4);
        assert_eq!(run_protocol(&p, &input, &p.config).unwrap(), vec![9, 0, 1, 2, 3, 4, 5, 6, 7, 8]);
        let p = identity_protocol(10, 4);
        assert_eq!(run_protocol(&p, &input, &p.config).unwrap(), input);
        let p = echo_protocol(10, 4);
        assert_eq!(run_protocol(&p, &input, &p.config).unwrap(), input);
    }
}
