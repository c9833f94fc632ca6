//! Reference attention mechanisms and a residual-free transformer executor.
//!
//! A head sees the token matrix `X` (N x d) only through element-wise maps
//! `Q, K, V` applied row by row. The mechanisms differ in how they turn the
//! resulting queries, keys and values into an N x m output.

mod ema;
mod lowrank;
mod reformer;
mod softmax;
mod transformer;

use std::fmt;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use thiserror::Error;

use crate::anna::AnnaError;
use crate::lsh::AnnaConfig;

pub use ema::{canonical_key, ema_average, ema_forward, ExactMatchIndex};
pub use lowrank::{low_rank_attention, low_rank_attention_with, Association};
pub use reformer::{reachable_positions, reformer_forward, ChunkOrder};
pub use softmax::{softmax_attention, softmax_qkv};
pub use transformer::{sum_via_anna, LayerSpec, TransformerSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("row {row} of the {what} is zero and cannot be normalised")]
    ZeroVector { what: &'static str, row: usize },
    #[error("{0}")]
    Range(String),
    #[error("invalid head: {0}")]
    InvalidHead(String),
    #[error(transparent)]
    Anna(#[from] AnnaError),
}

type RowFn = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;

/// A row-wise map `R^d -> R^m`.
#[derive(Clone)]
pub enum ElementMap {
    Identity,
    /// `x -> x W` with `W` of shape d x m.
    Linear(Array2<f64>),
    /// An arbitrary pure function with a declared output width.
    Func { name: String, out_dim: usize, f: Arc<RowFn> },
}

impl fmt::Debug for ElementMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ElementMap::Identity => f.write_str("Identity"),
            ElementMap::Linear(w) => write!(f, "Linear({}x{})", w.nrows(), w.ncols()),
            ElementMap::Func { name, out_dim, .. } => write!(f, "Func({name}, {out_dim})"),
        }
    }
}

impl ElementMap {
    pub fn func(name: impl Into<String>, out_dim: usize, f: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        ElementMap::Func { name: name.into(), out_dim, f: Arc::new(f) }
    }

    pub fn out_dim(&self, in_dim: usize) -> usize {
        match self {
            ElementMap::Identity => in_dim,
            ElementMap::Linear(w) => w.ncols(),
            ElementMap::Func { out_dim, .. } => *out_dim,
        }
    }

    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>, AttentionError> {
        match self {
            ElementMap::Identity => Ok(x.to_owned()),
            ElementMap::Linear(w) => {
                if w.nrows() != x.ncols() {
                    return Err(AttentionError::Shape(format!(
                        "linear map expects width {} but rows have {}",
                        w.nrows(),
                        x.ncols()
                    )));
                }
                Ok(x.dot(w))
            }
            ElementMap::Func { name, out_dim, f } => {
                let mut out = Array2::zeros((x.nrows(), *out_dim));
                for (i, row) in x.rows().into_iter().enumerate() {
                    let y = f(&row.to_vec());
                    if y.len() != *out_dim {
                        return Err(AttentionError::Shape(format!(
                            "map `{name}` returned {} values, declared {out_dim}",
                            y.len()
                        )));
                    }
                    out.row_mut(i).assign(&ndarray::ArrayView1::from(&y));
                }
                Ok(out)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum HeadKind {
    /// Logits `<q_i, k_j>`.
    Softmax,
    /// Queries and keys scaled to unit norm, logits `beta <q_i, k_j>`.
    SoftmaxNormalized { beta: f64 },
    /// `Q (K^T V)` with no normalisation.
    LowRank,
    Ema,
    Anna(AnnaConfig),
    /// Chunked softmax with shared queries and keys; the key map is unused.
    Reformer { chunk: usize, order: ChunkOrder },
}

#[derive(Debug, Clone)]
pub struct AttentionHeadSpec {
    pub kind: HeadKind,
    pub query: ElementMap,
    pub key: ElementMap,
    pub value: ElementMap,
}

impl AttentionHeadSpec {
    pub fn new(kind: HeadKind, query: ElementMap, key: ElementMap, value: ElementMap) -> Self {
        Self { kind, query, key, value }
    }

    /// Runs the head on `x`. `layer` selects the per-layer chunk order of a
    /// reformer head.
    pub fn forward(&self, x: ArrayView2<'_, f64>, layer: usize) -> Result<Array2<f64>, AttentionError> {
        let q = self.query.apply(x)?;
        let v = self.value.apply(x)?;
        match &self.kind {
            HeadKind::Reformer { chunk, order } => reformer::reformer_qv(q.view(), v.view(), *chunk, order, layer),
            HeadKind::LowRank => {
                let k = self.key.apply(x)?;
                low_rank_attention_with(q.view(), k.view(), v.view(), Association::Linear)
            }
            kind => {
                let k = self.key.apply(x)?;
                match kind {
                    HeadKind::Softmax => softmax_qkv(q.view(), k.view(), v.view(), None),
                    HeadKind::SoftmaxNormalized { beta } => softmax_qkv(q.view(), k.view(), v.view(), Some(*beta)),
                    HeadKind::Ema => ema_forward(q.view(), k.view(), v.view()),
                    HeadKind::Anna(cfg) => {
                        Ok(crate::anna::anna_forward(q.view(), k.view(), v.view(), cfg, false)?.output)
                    }
                    HeadKind::LowRank | HeadKind::Reformer { .. } => unreachable!(),
                }
            }
        }
    }
}
