use std::fmt::Write as _;

use super::TaskError;

/// One sequence with per-position labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub tokens: Vec<u64>,
    pub labels: Vec<u64>,
}

fn join(xs: &[u64]) -> String {
    xs.iter().map(u64::to_string).collect::<Vec<_>>().join(" ")
}

/// `tokens<TAB>labels` per line, both space-separated.
pub fn write_dataset(data: &[Instance]) -> String {
    let mut out = String::new();
    for inst in data {
        let _ = writeln!(out, "{}\t{}", join(&inst.tokens), join(&inst.labels));
    }
    out
}

pub fn read_dataset(text: &str) -> Result<Vec<Instance>, TaskError> {
    let parse = |line: usize, field: &str| -> Result<Vec<u64>, TaskError> {
        field
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| TaskError::Parse { line, msg: format!("bad token {t:?}") }))
            .collect()
    };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let (x, y) = l
                .split_once('\t')
                .ok_or_else(|| TaskError::Parse { line: i + 1, msg: "missing tab before labels".into() })?;
            Ok(Instance { tokens: parse(i + 1, x)?, labels: parse(i + 1, y)? })
        })
        .collect()
}

/// Fraction of positions where `pred` and `gold` differ.
pub fn error_rate(pred: &[u64], gold: &[u64]) -> Result<f64, TaskError> {
    if pred.len() != gold.len() {
        return Err(TaskError::Length(pred.len(), gold.len()));
    }
    if gold.is_empty() {
        return Ok(0.0);
    }
    Ok(pred.iter().zip(gold).filter(|(p, g)| p != g).count() as f64 / gold.len() as f64)
}
