//! Fan-`f` aggregation and broadcast trees.

use std::sync::Arc;

use crate::mpc::layout::{block_span, gather, scatter, Layout, LevelTree, PlacedTree};
use crate::mpc::sim::{FinalizeFn, LocalFault, LocalFn, Memory, MpcConfig, MpcProtocol, StepOutput, Word};

/// An associative combine on equal-width word vectors.
pub type CombineFn = Arc<dyn Fn(&[Word], &[Word]) -> Vec<Word> + Send + Sync>;

pub fn combine_sum() -> CombineFn {
    Arc::new(|a, b| a.iter().zip(b).map(|(x, y)| x.wrapping_add(*y)).collect())
}

pub fn combine_max() -> CombineFn {
    Arc::new(|a, b| a.iter().zip(b).map(|(x, y)| *x.max(y)).collect())
}

pub fn combine_min() -> CombineFn {
    Arc::new(|a, b| a.iter().zip(b).map(|(x, y)| *x.min(y)).collect())
}

pub fn combine_by_name(name: &str) -> Option<CombineFn> {
    match name {
        "sum" => Some(combine_sum()),
        "max" => Some(combine_max()),
        "min" => Some(combine_min()),
        _ => None,
    }
}

fn check_fan(fan: usize, width: usize, memory: usize) -> Result<(), LocalFault> {
    if fan < 2 {
        return Err(LocalFault::Capacity("tree fan must be at least 2".into()));
    }
    if width == 0 || fan * width > memory {
        return Err(LocalFault::Capacity(format!("fan {fan} of {width}-word values exceeds memory {memory}")));
    }
    Ok(())
}

/// Folds `leaves` values of `width` words to a single value on machine 0.
/// Rounds: one to place leaves, `ceil(log_fan leaves)` up the tree, one to
/// deliver the root.
pub fn aggregation_protocol(
    leaves: usize,
    width: usize,
    fan: usize,
    memory: usize,
    combine: CombineFn,
) -> Result<MpcProtocol, LocalFault> {
    check_fan(fan, width, memory)?;
    let words = leaves * width;
    let q_in = words.div_ceil(memory);
    let mut layout = Layout::after(q_in.max(1));
    let leaf_region = layout.alloc(leaves);
    let tree = Arc::new(PlacedTree::new(LevelTree::new(leaves, fan), leaf_region, &mut layout));
    let depth = tree.shape.depth();

    let mut rounds: Vec<LocalFn> = Vec::new();
    {
        let tree = tree.clone();
        rounds.push(Arc::new(move |id, m: &Memory| {
            let route = |g: usize, d: &mut Vec<usize>| d.push(tree.levels[0].id(g / width));
            Ok(StepOutput { retain: vec![], messages: scatter(id * memory, &m.flatten(), route) })
        }));
    }
    for _ in 0..=depth {
        let tree = tree.clone();
        let combine = combine.clone();
        rounds.push(Arc::new(move |id, m: &Memory| {
            let (t, j) = tree.locate(id).ok_or_else(|| LocalFault::Malformed(format!("stray machine {id}")))?;
            let value = if t == 0 {
                let got = gather(
                    id,
                    m,
                    |src| (src < q_in).then(|| block_span(src, memory, words)),
                    |g, d| d.push(tree.levels[0].id(g / width)),
                )?;
                got.into_values().collect::<Vec<_>>()
            } else {
                let mut parts = m.inbox.iter().map(|r| r.words.as_slice());
                let first = parts.next().ok_or_else(|| LocalFault::Malformed("node without children".into()))?;
                parts.fold(first.to_vec(), |acc, x| combine(&acc, x))
            };
            let dest = if t == depth { 0 } else { tree.parent(t, j) };
            Ok(StepOutput::default().send(dest, value))
        }));
    }
    let finalize: FinalizeFn = Arc::new(|_, m: &Memory| Ok(m.inbox.iter().flat_map(|r| r.words.clone()).collect()));
    let config = MpcConfig::new(words, memory, layout.total());
    Ok(MpcProtocol {
        name: "aggregate".into(),
        rounds,
        finalize,
        output_len: width,
        max_out_degree: memory.div_ceil(width) + 1,
        config,
    })
}

/// Copies a `width`-word value on machine 0 to `leaves` tree leaves; the
/// output is `leaves` copies in a row.
pub fn broadcast_protocol(leaves: usize, width: usize, fan: usize, memory: usize) -> Result<MpcProtocol, LocalFault> {
    check_fan(fan, width, memory)?;
    if width > memory {
        return Err(LocalFault::Capacity("value exceeds memory".into()));
    }
    let out_words = leaves * width;
    let q_out = out_words.div_ceil(memory);
    let mut layout = Layout::after(q_out.max(1));
    let leaf_region = layout.alloc(leaves);
    let tree = Arc::new(PlacedTree::new(LevelTree::new(leaves, fan), leaf_region, &mut layout));
    let depth = tree.shape.depth();

    let mut rounds: Vec<LocalFn> = Vec::new();
    {
        let tree = tree.clone();
        rounds.push(Arc::new(move |_, m: &Memory| Ok(StepOutput::default().send(tree.root(), m.flatten()))));
    }
    for _ in 0..depth {
        let tree = tree.clone();
        rounds.push(Arc::new(move |id, m: &Memory| {
            let (t, j) = tree.locate(id).ok_or_else(|| LocalFault::Malformed(format!("stray machine {id}")))?;
            let value = m.flatten();
            let mut out = StepOutput::default();
            for c in tree.shape.children(t, j) {
                out = out.send(tree.levels[t - 1].id(c), value.clone());
            }
            Ok(out)
        }));
    }
    {
        let tree = tree.clone();
        rounds.push(Arc::new(move |id, m: &Memory| {
            let j = tree.levels[0].index(id).ok_or_else(|| LocalFault::Malformed(format!("stray machine {id}")))?;
            Ok(StepOutput { retain: vec![], messages: scatter(j * width, &m.flatten(), |g, d| d.push(g / memory)) })
        }));
    }
    let finalize: FinalizeFn = {
        let tree = tree.clone();
        Arc::new(move |id, m: &Memory| {
            let got = gather(
                id,
                m,
                |src| tree.levels[0].index(src).map(|j| block_span(j, width, out_words)),
                |g, d| d.push(g / memory),
            )?;
            Ok(got.into_values().collect())
        })
    };
    let config = MpcConfig::new(width, memory, layout.total());
    Ok(MpcProtocol {
        name: "broadcast".into(),
        rounds,
        finalize,
        output_len: out_words,
        max_out_degree: fan.max(2),
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpc::run_protocol;

    #[test]
    fn sums_one_to_hundred() {
        let p = aggregation_protocol(100, 1, 4, 16, combine_sum()).unwrap();
        let input: Vec<Word> = (1..=100).collect();
        assert_eq!(run_protocol(&p, &input, &p.config).unwrap(), vec![5050]);
        assert_eq!(p.round_count(), 1 + 4 + 1);
    }

    #[test]
    fn max_of_pairs() {
        let p = aggregation_protocol(30, 2, 3, 12, combine_max()).unwrap();
        let input: Vec<Word> = (0..60).map(|i| (i * 37) % 61).collect();
        let want = vec![
            input.iter().step_by(2).copied().max().unwrap(),
            input.iter().skip(1).step_by(2).copied().max().unwrap(),
        ];
        assert_eq!(run_protocol(&p, &input, &p.config).unwrap(), want);
    }

    #[test]
    fn broadcast_copies() {
        let p = broadcast_protocol(20, 3, 4, 12).unwrap();
        let out = run_protocol(&p, &[5, 6, 7], &p.config).unwrap();
        assert_eq!(out, [5, 6, 7].repeat(20));
    }

    #[test]
    fn fan_must_fit() {
        assert!(aggregation_protocol(10, 4, 4, 8, combine_sum()).is_err());
        assert!(broadcast_protocol(10, 1, 1, 8).is_err());
    }
}
