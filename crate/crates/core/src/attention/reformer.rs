use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView2};

use super::{softmax_qkv, AttentionError, AttentionHeadSpec, HeadKind};
use crate::lsh::HyperplaneHash;
use crate::rng::stream;

/// How positions are arranged before being cut into chunks.
#[derive(Debug, Clone, PartialEq)]
pub enum ChunkOrder {
    /// Positions in input order.
    Identity,
    /// One input-independent arrangement per layer; `perms[l][t]` is the
    /// position placed at slot `t` in layer `l`. Layers past the end reuse
    /// the last entry.
    Fixed(Vec<Vec<usize>>),
    /// Stable sort by the sign pattern of `bits` random hyperplanes, drawn
    /// per layer from `seed`.
    HashSorted { seed: u64, bits: usize },
}

impl ChunkOrder {
    fn arrangement(&self, q: ArrayView2<'_, f64>, layer: usize) -> Result<Vec<usize>, AttentionError> {
        let n = q.nrows();
        match self {
            ChunkOrder::Identity => Ok((0..n).collect()),
            ChunkOrder::Fixed(perms) => {
                let p = perms
                    .get(layer)
                    .or_else(|| perms.last())
                    .ok_or_else(|| AttentionError::InvalidHead("fixed order has no permutations".into()))?;
                let mut seen = vec![false; n];
                if p.len() != n || p.iter().any(|&i| i >= n || std::mem::replace(&mut seen[i], true)) {
                    return Err(AttentionError::InvalidHead(format!("layer {layer} order is not a permutation of 0..{n}")));
                }
                Ok(p.clone())
            }
            ChunkOrder::HashSorted { seed, bits } => {
                let planes: Vec<HyperplaneHash> = (0..*bits)
                    .map(|j| HyperplaneHash::sample(q.ncols(), &mut stream(*seed, &[layer as u64, j as u64])))
                    .collect();
                let code = |i: usize| -> u64 {
                    let row = q.row(i).to_vec();
                    planes.iter().fold(0u64, |acc, h| (acc << 1) | u64::from(h.project(&row) >= 0.0))
                };
                let mut order: Vec<(u64, usize)> = (0..n).map(|i| (code(i), i)).collect();
                order.sort_by_key(|&(c, _)| c);
                Ok(order.into_iter().map(|(_, i)| i).collect())
            }
        }
    }
}

/// Chunked softmax with keys tied to queries. When the chunk size does not
/// divide N the last chunk is short, which is the same as padding with tokens
/// that take no part in normalisation.
pub(super) fn reformer_qv(
    q: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    chunk: usize,
    order: &ChunkOrder,
    layer: usize,
) -> Result<Array2<f64>, AttentionError> {
    if chunk == 0 {
        return Err(AttentionError::InvalidHead("chunk size must be at least 1".into()));
    }
    if q.nrows() != v.nrows() {
        return Err(AttentionError::Shape(format!("{} queries but {} values", q.nrows(), v.nrows())));
    }
    let arrangement = order.arrangement(q, layer)?;
    let mut out = Array2::zeros((q.nrows(), v.ncols()));
    for members in arrangement.chunks(chunk) {
        let qc = q.select(ndarray::Axis(0), members);
        let vc = v.select(ndarray::Axis(0), members);
        let oc = softmax_qkv(qc.view(), qc.view(), vc.view(), None)?;
        for (t, &i) in members.iter().enumerate() {
            out.row_mut(i).assign(&oc.row(t));
        }
    }
    Ok(out)
}

/// Runs a reformer head on `x` as layer `layer` of a stack.
pub fn reformer_forward(x: ArrayView2<'_, f64>, head: &AttentionHeadSpec, layer: usize) -> Result<Array2<f64>, AttentionError> {
    match head.kind {
        HeadKind::Reformer { .. } => head.forward(x, layer),
        _ => Err(AttentionError::InvalidHead("not a reformer head".into())),
    }
}

/// Input positions that can influence `target` after `layers` stacked layers
/// with an input-independent order. Returns `None` for hash-sorted orders.
pub fn reachable_positions(n: usize, chunk: usize, order: &ChunkOrder, layers: usize, target: usize) -> Option<BTreeSet<usize>> {
    let dummy = Array2::<f64>::zeros((n, 1));
    if matches!(order, ChunkOrder::HashSorted { .. }) || chunk == 0 {
        return None;
    }
    let mut reach: BTreeSet<usize> = [target].into();
    for layer in (0..layers).rev() {
        let arrangement = order.arrangement(dummy.view(), layer).ok()?;
        reach = arrangement
            .chunks(chunk)
            .filter(|c| c.iter().any(|i| reach.contains(i)))
            .flatten()
            .copied()
            .collect();
    }
    Some(reach)
}
