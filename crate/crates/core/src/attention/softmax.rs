use ndarray::{Array2, ArrayView2};

use super::{AttentionError, AttentionHeadSpec, HeadKind};

fn unit_rows(m: ArrayView2<'_, f64>, what: &'static str) -> Result<Array2<f64>, AttentionError> {
    let mut out = m.to_owned();
    for (row, mut r) in out.rows_mut().into_iter().enumerate() {
        let norm = r.dot(&r).sqrt();
        if norm == 0.0 {
            return Err(AttentionError::ZeroVector { what, row });
        }
        r.mapv_inplace(|x| x / norm);
    }
    Ok(out)
}

/// Softmax attention on explicit queries, keys and values. With `beta`, rows
/// of `q` and `k` are first scaled to unit norm and logits are multiplied by
/// `beta`.
pub fn softmax_qkv(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    beta: Option<f64>,
) -> Result<Array2<f64>, AttentionError> {
    if q.ncols() != k.ncols() || k.nrows() != v.nrows() {
        return Err(AttentionError::Shape(format!(
            "q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let mut logits = match beta {
        Some(b) => {
            if !(b > 0.0) {
                return Err(AttentionError::InvalidHead(format!("beta must be positive, got {b}")));
            }
            let qn = unit_rows(q, "queries")?;
            let kn = unit_rows(k, "keys")?;
            qn.dot(&kn.t()) * b
        }
        None => q.dot(&k.t()),
    };
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - max).exp());
        let z = row.sum();
        row.mapv_inplace(|x| x / z);
    }
    Ok(logits.dot(&v))
}

/// Runs a softmax or normalized-softmax head on a token matrix.
pub fn softmax_attention(x: ArrayView2<'_, f64>, head: &AttentionHeadSpec) -> Result<Array2<f64>, AttentionError> {
    match head.kind {
        HeadKind::Softmax | HeadKind::SoftmaxNormalized { .. } => head.forward(x, 0),
        _ => Err(AttentionError::InvalidHead("not a softmax head".into())),
    }
}
