//! Line-oriented text format for model weights.
//!
//! ```text
//! anna-weights v1
//! meta beta 0.1
//! tensor layer.0.q shape=2,3
//! 1.0000000000000000e0 0.0000000000000000e0 2.5000000000000000e-1
//! 0.0000000000000000e0 1.0000000000000000e0 0.0000000000000000e0
//! map layer.0.post mlp-gelu
//! end
//! ```
//!
//! A tensor of shape `a,b,...` is followed by `a` rows holding the remaining
//! elements each; a one-dimensional tensor is a single row. Values are written
//! with 17 significant digits so that every `f64` reads back bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::Array2;
use thiserror::Error;

pub const HEADER: &str = "anna-weights v1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WeightsError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("missing meta key {0:?}")]
    MissingMeta(String),
    #[error("tensor {name:?} has shape {got:?}, expected {want:?}")]
    Shape { name: String, got: Vec<usize>, want: Vec<usize> },
    #[error("meta {key:?}: {msg}")]
    BadMeta { key: String, msg: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor data does not match its shape");
        Self { shape, data }
    }

    pub fn from_matrix(m: &Array2<f64>) -> Self {
        Self::new(vec![m.nrows(), m.ncols()], m.iter().copied().collect())
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self::new(vec![data.len()], data)
    }

    /// Two-dimensional view; a vector becomes one row.
    pub fn to_matrix(&self) -> Array2<f64> {
        let (r, c) = match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => (other[0], other[1..].iter().product()),
        };
        Array2::from_shape_vec((r, c), self.data.clone()).expect("shape checked on construction")
    }
}

/// Meta entries, tensors and map names of one model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightsDocument {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
    /// Named element-wise maps that are code rather than numbers.
    pub maps: BTreeMap<String, String>,
}

fn token_ok(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(char::is_whitespace)
}

impl WeightsDocument {
    pub fn set_meta(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> &mut Self {
        self.tensors.insert(name.to_string(), t);
        self
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor, WeightsError> {
        self.tensors.get(name).ok_or_else(|| WeightsError::MissingTensor(name.to_string()))
    }

    /// A tensor that must have the given shape.
    pub fn matrix(&self, name: &str, rows: usize, cols: usize) -> Result<Array2<f64>, WeightsError> {
        let t = self.tensor(name)?;
        let m = t.to_matrix();
        if m.dim() != (rows, cols) {
            return Err(WeightsError::Shape { name: name.into(), got: t.shape.clone(), want: vec![rows, cols] });
        }
        Ok(m)
    }

    pub fn meta_str(&self, key: &str) -> Result<&str, WeightsError> {
        self.meta.get(key).map(String::as_str).ok_or_else(|| WeightsError::MissingMeta(key.to_string()))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, WeightsError>
    where
        T::Err: std::fmt::Display,
    {
        self.meta_str(key)?
            .parse()
            .map_err(|e: T::Err| WeightsError::BadMeta { key: key.to_string(), msg: e.to_string() })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(HEADER);
        out.push('\n');
        for (k, v) in &self.meta {
            debug_assert!(token_ok(k));
            let _ = writeln!(out, "meta {k} {v}");
        }
        for (name, t) in &self.tensors {
            let shape: Vec<String> = t.shape.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "tensor {name} shape={}", shape.join(","));
            let row_len = if t.shape.len() <= 1 { t.data.len() } else { t.shape[1..].iter().product() };
            if row_len == 0 {
                continue;
            }
            for row in t.data.chunks(row_len) {
                let cells: Vec<String> = row.iter().map(|x| format!("{x:.16e}")).collect();
                out.push_str(&cells.join(" "));
                out.push('\n');
            }
        }
        for (k, v) in &self.maps {
            let _ = writeln!(out, "map {k} {v}");
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str) -> Result<Self, WeightsError> {
        let err = |line: usize, msg: String| WeightsError::Parse { line, msg };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
        match lines.next() {
            Some((_, HEADER)) => {}
            Some((n, other)) => return Err(err(n, format!("expected {HEADER:?}, found {other:?}"))),
            None => return Err(err(1, "empty document".into())),
        }
        let mut doc = WeightsDocument::default();
        let mut ended = false;
        while let Some((n, line)) = lines.next() {
            if ended {
                return Err(err(n, "content after end".into()));
            }
            let mut parts = line.splitn(3, ' ');
            match parts.next() {
                Some("meta") => {
                    let (k, v) = (parts.next(), parts.next());
                    let (k, v) = k.zip(v).ok_or_else(|| err(n, "meta needs a key and a value".into()))?;
                    doc.meta.insert(k.to_string(), v.to_string());
                }
                Some("map") => {
                    let (k, v) = (parts.next(), parts.next());
                    let (k, v) = k.zip(v).ok_or_else(|| err(n, "map needs a key and a name".into()))?;
                    doc.maps.insert(k.to_string(), v.to_string());
                }
                Some("tensor") => {
                    let name = parts.next().ok_or_else(|| err(n, "tensor needs a name".into()))?;
                    let shape_spec = parts
                        .next()
                        .and_then(|s| s.strip_prefix("shape="))
                        .ok_or_else(|| err(n, "tensor needs shape=a,b".into()))?;
                    let shape: Vec<usize> = shape_spec
                        .split(',')
                        .map(|d| d.parse().map_err(|_| err(n, format!("bad dimension {d:?}"))))
                        .collect::<Result<_, _>>()?;
                    let total: usize = shape.iter().product();
                    let (rows, row_len) = if shape.len() <= 1 { (1, total) } else { (shape[0], total / shape[0].max(1)) };
                    let mut data = Vec::with_capacity(total);
                    for _ in 0..if total == 0 { 0 } else { rows } {
                        let (rn, row) = lines.next().ok_or_else(|| err(n, format!("tensor {name} is cut short")))?;
                        let before = data.len();
                        for cell in row.split_whitespace() {
                            data.push(cell.parse::<f64>().map_err(|_| err(rn, format!("bad number {cell:?}")))?);
                        }
                        if data.len() - before != row_len {
                            return Err(err(rn, format!("row has {} values, expected {row_len}", data.len() - before)));
                        }
                    }
                    if doc.tensors.insert(name.to_string(), Tensor { shape, data }).is_some() {
                        return Err(err(n, format!("duplicate tensor {name}")));
                    }
                }
                Some("end") => ended = true,
                Some(other) => return Err(err(n, format!("unknown directive {other:?}"))),
                None => unreachable!("blank lines are skipped"),
            }
        }
        if !ended {
            return Err(err(text.lines().count(), "missing end".into()));
        }
        Ok(doc)
    }
}
