use ndarray::{Array2, ArrayView2};

use super::{AttentionError, AttentionHeadSpec, ElementMap};
use crate::anna::anna_forward;
use crate::lsh::AnnaConfig;

/// One layer: `post(sum_h head_h(X) W_h)`.
#[derive(Debug, Clone)]
pub struct LayerSpec {
    pub heads: Vec<AttentionHeadSpec>,
    /// `None` leaves a head's output as is; its width must then equal the
    /// layer's output width.
    pub mixing: Vec<Option<Array2<f64>>>,
    pub post: Option<ElementMap>,
}

impl LayerSpec {
    pub fn new(heads: Vec<AttentionHeadSpec>) -> Self {
        let mixing = vec![None; heads.len()];
        Self { heads, mixing, post: None }
    }

    pub fn with_mixing(mut self, mixing: Vec<Option<Array2<f64>>>) -> Self {
        self.mixing = mixing;
        self
    }

    pub fn with_post(mut self, post: ElementMap) -> Self {
        self.post = Some(post);
        self
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>, layer: usize) -> Result<Array2<f64>, AttentionError> {
        if self.heads.is_empty() || self.mixing.len() != self.heads.len() {
            return Err(AttentionError::Shape(format!(
                "layer {layer} has {} heads and {} mixing matrices",
                self.heads.len(),
                self.mixing.len()
            )));
        }
        let mut acc: Option<Array2<f64>> = None;
        for (h, (head, mix)) in self.heads.iter().zip(&self.mixing).enumerate() {
            let out = head.forward(x, layer)?;
            let mixed = match mix {
                Some(w) if w.nrows() == out.ncols() => out.dot(w),
                Some(w) => {
                    return Err(AttentionError::Shape(format!(
                        "layer {layer} head {h}: output width {} but mixing has {} rows",
                        out.ncols(),
                        w.nrows()
                    )))
                }
                None => out,
            };
            acc = Some(match acc {
                None => mixed,
                Some(a) if a.dim() == mixed.dim() => a + mixed,
                Some(a) => {
                    return Err(AttentionError::Shape(format!(
                        "layer {layer} head {h}: {:?} does not add to {:?}",
                        mixed.dim(),
                        a.dim()
                    )))
                }
            });
        }
        let summed = acc.expect("non-empty heads");
        match &self.post {
            Some(map) => map.apply(summed.view()),
            None => Ok(summed),
        }
    }
}

/// `psi(f_L(... f_1(X)))` with no residual stream.
#[derive(Debug, Clone)]
pub struct TransformerSpec {
    pub layers: Vec<LayerSpec>,
    pub output: ElementMap,
}

impl TransformerSpec {
    pub fn new(layers: Vec<LayerSpec>, output: ElementMap) -> Self {
        Self { layers, output }
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>, AttentionError> {
        let mut cur = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            cur = layer.forward(cur.view(), l)?;
        }
        self.output.apply(cur.view())
    }
}

/// The sum of `xs` computed by one attention layer in which every key equals
/// the query and value `i` is `N x_i`, so the bucket mean is the sum.
pub fn sum_via_anna(xs: &[i64], seed: u64) -> Result<i64, AttentionError> {
    if xs.is_empty() {
        return Ok(0);
    }
    let n = xs.len() as f64;
    let bound = xs.iter().map(|x| x.unsigned_abs() as f64).sum::<f64>() * n;
    if bound >= 2f64.powi(53) {
        return Err(AttentionError::Range(format!("N * sum|x| = {bound} exceeds the exact float range")));
    }
    let qk = Array2::from_elem((xs.len(), 1), 1.0);
    let v = Array2::from_shape_fn((xs.len(), 1), |(i, _)| n * xs[i] as f64);
    let out = anna_forward(qk.view(), qk.view(), v.view(), &AnnaConfig::fixed(1, 1, seed), false)?;
    Ok(out.output[[xs.len() - 1, 0]] as i64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::HeadKind;
    use ndarray::array;

    #[test]
    fn sums() {
        assert_eq!(sum_via_anna(&[0, 0, 0], 1).unwrap(), 0);
        assert_eq!(sum_via_anna(&[5], 1).unwrap(), 5);
        assert_eq!(sum_via_anna(&[3, -9, 40], 1).unwrap(), 34);
        assert!(sum_via_anna(&[1 << 50, 1 << 50, 1 << 50, 1 << 50], 1).is_err());
    }

    #[test]
    fn mixing_and_post_map() {
        let x = array![[1.0, 2.0]];
        let head = AttentionHeadSpec::new(HeadKind::Softmax, ElementMap::Identity, ElementMap::Identity, ElementMap::Identity);
        let layer = LayerSpec::new(vec![head.clone(), head])
            .with_mixing(vec![Some(array![[1.0], [0.0]]), Some(array![[0.0], [10.0]])])
            .with_post(ElementMap::func("double", 1, |r| vec![2.0 * r[0]]));
        let t = TransformerSpec::new(vec![layer], ElementMap::Identity);
        assert_eq!(t.forward(x.view()).unwrap(), array![[42.0]]);
    }
}
