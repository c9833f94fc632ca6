use ndarray::{Array2, ArrayView2};

use super::AttentionError;

/// Bit pattern used for key equality. `-0.0` is folded onto `0.0` so that the
/// two zeros match, as they do under `==`.
pub fn canonical_key(row: impl IntoIterator<Item = f64>) -> Vec<u64> {
    row.into_iter().map(|x| if x == 0.0 { 0 } else { x.to_bits() }).collect()
}

/// Keys sorted by canonical encoding; equal keys keep their input order.
#[derive(Debug, Clone)]
pub struct ExactMatchIndex {
    sorted: Vec<(Vec<u64>, usize)>,
}

impl ExactMatchIndex {
    pub fn new(keys: impl IntoIterator<Item = Vec<u64>>) -> Self {
        let mut sorted: Vec<(Vec<u64>, usize)> = keys.into_iter().enumerate().map(|(j, k)| (k, j)).collect();
        sorted.sort();
        Self { sorted }
    }

    pub fn from_rows(keys: ArrayView2<'_, f64>) -> Self {
        Self::new(keys.rows().into_iter().map(|r| canonical_key(r.iter().copied())))
    }

    /// Indices of keys equal to `query`, ascending.
    pub fn matches(&self, query: &[u64]) -> impl Iterator<Item = usize> + '_ {
        let lo = self.sorted.partition_point(|(k, _)| k.as_slice() < query);
        let hi = self.sorted.partition_point(|(k, _)| k.as_slice() <= query);
        self.sorted[lo..hi].iter().map(|(_, j)| *j)
    }
}

/// Exact-match attention over arbitrary value types. `average` receives the
/// matched values in key order; queries with no match get `empty()`.
pub fn ema_average<V, R>(
    index: &ExactMatchIndex,
    queries: impl IntoIterator<Item = Vec<u64>>,
    values: &[V],
    mut average: impl FnMut(&[&V]) -> R,
    mut empty: impl FnMut() -> R,
) -> Vec<R> {
    queries
        .into_iter()
        .map(|q| {
            let hit: Vec<&V> = index.matches(&q).map(|j| &values[j]).collect();
            if hit.is_empty() {
                empty()
            } else {
                average(&hit)
            }
        })
        .collect()
}

/// Row `i` is the mean of the values whose key equals `q_i`, else zero.
pub fn ema_forward(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
) -> Result<Array2<f64>, AttentionError> {
    if q.ncols() != k.ncols() || k.nrows() != v.nrows() {
        return Err(AttentionError::Shape(format!(
            "q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let index = ExactMatchIndex::from_rows(k);
    let width = v.ncols();
    let mut out = Array2::zeros((q.nrows(), width));
    for (i, qi) in q.rows().into_iter().enumerate() {
        let key = canonical_key(qi.iter().copied());
        let mut count = 0usize;
        let mut row = out.row_mut(i);
        for j in index.matches(&key) {
            row += &v.row(j);
            count += 1;
        }
        if count > 0 {
            row.mapv_inplace(|x| x / count as f64);
        }
    }
    Ok(out)
}
