use ndarray::{Array2, ArrayView2};

use super::{AttentionError, ElementMap};

/// Which product is formed first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Association {
    /// `Q (K^T V)`: O(N r m).
    Linear,
    /// `(Q K^T) V`: materialises the N x N matrix.
    Quadratic,
}

pub fn low_rank_attention_with(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    order: Association,
) -> Result<Array2<f64>, AttentionError> {
    if q.ncols() != k.ncols() || k.nrows() != v.nrows() {
        return Err(AttentionError::Shape(format!(
            "q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if q.ncols() == 0 {
        return Err(AttentionError::Shape("rank must be at least 1".into()));
    }
    Ok(match order {
        Association::Linear => q.dot(&k.t().dot(&v)),
        Association::Quadratic => q.dot(&k.t()).dot(&v),
    })
}

/// `Q'(X) (K'(X)^T V(X))`.
pub fn low_rank_attention(
    x: ArrayView2<'_, f64>,
    qmap: &ElementMap,
    kmap: &ElementMap,
    vmap: &ElementMap,
) -> Result<Array2<f64>, AttentionError> {
    let q = qmap.apply(x)?;
    let k = kmap.apply(x)?;
    let v = vmap.apply(x)?;
    low_rank_attention_with(q.view(), k.view(), v.view(), Association::Linear)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_ones_rank_one_sums_values() {
        let x = Array2::from_shape_fn((5, 2), |(i, j)| (i + 3 * j) as f64);
        let ones = ElementMap::func("ones", 1, |_| vec![1.0]);
        let out = low_rank_attention(x.view(), &ones, &ones, &ElementMap::Identity).unwrap();
        for row in out.rows() {
            assert_eq!(row.to_vec(), vec![10.0, 25.0]);
        }
    }

    #[test]
    fn zero_values_give_zero() {
        let x = Array2::from_shape_fn((4, 3), |(i, j)| (i * j) as f64 - 1.0);
        let zero = ElementMap::func("zero", 2, |_| vec![0.0, 0.0]);
        let out = low_rank_attention(x.view(), &ElementMap::Identity, &ElementMap::Identity, &zero).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }
}
