//! Wall-clock scaling of attention mechanisms in the sequence length.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{s, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::anna::{anna_forward, anna_forward_linear_memory, AnnaError};
use crate::attention::{ema_forward, low_rank_attention_with, softmax_qkv, Association, AttentionError};
use crate::lsh::AnnaConfig;
use crate::rng::stream;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BenchError {
    #[error("unknown mechanism {0:?}; expected softmax, anna, anna-linear, low-rank or ema")]
    Unknown(String),
    #[error("bad benchmark parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Anna(#[from] AnnaError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMechanism {
    Softmax,
    Anna,
    /// The one-table-at-a-time schedule.
    AnnaLinear,
    LowRank,
    Ema,
}

impl BenchMechanism {
    pub fn name(&self) -> &'static str {
        match self {
            BenchMechanism::Softmax => "softmax",
            BenchMechanism::Anna => "anna",
            BenchMechanism::AnnaLinear => "anna-linear",
            BenchMechanism::LowRank => "low-rank",
            BenchMechanism::Ema => "ema",
        }
    }
}

impl fmt::Display for BenchMechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchMechanism {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            BenchMechanism::Softmax,
            BenchMechanism::Anna,
            BenchMechanism::AnnaLinear,
            BenchMechanism::LowRank,
            BenchMechanism::Ema,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| BenchError::Unknown(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingConfig {
    pub mechanism: BenchMechanism,
    pub lengths: Vec<usize>,
    /// Query, key and value width.
    pub dim: usize,
    pub repetitions: usize,
    pub seed: u64,
    /// Table shape for the ANNA mechanisms.
    pub ell: usize,
    pub z: usize,
}

impl ScalingConfig {
    pub fn new(mechanism: BenchMechanism, lengths: Vec<usize>) -> Self {
        Self { mechanism, lengths, dim: 16, repetitions: 3, seed: 0, ell: 8, z: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingRow {
    pub n: usize,
    pub median_secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingTable {
    pub mechanism: BenchMechanism,
    pub rows: Vec<ScalingRow>,
    /// Least-squares slope of log time against log N; absent with fewer
    /// than two lengths.
    pub slope: Option<f64>,
}

/// Query rows per softmax block, bounding the logit buffer.
const SOFTMAX_BLOCK: usize = 512;

/// Least-squares slope of `ln y` on `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx)
}

fn gaussian(n: usize, d: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || rng.sample(StandardNormal))
}

fn run_once(cfg: &ScalingConfig, q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>) -> Result<(), BenchError> {
    let anna = AnnaConfig::fixed(cfg.ell, cfg.z, cfg.seed);
    match cfg.mechanism {
        BenchMechanism::Softmax => {
            let n = q.nrows();
            for start in (0..n).step_by(SOFTMAX_BLOCK) {
                let end = (start + SOFTMAX_BLOCK).min(n);
                std::hint::black_box(softmax_qkv(q.slice(s![start..end, ..]), k.view(), v.view(), None)?);
            }
        }
        BenchMechanism::Anna => {
            std::hint::black_box(anna_forward(q.view(), k.view(), v.view(), &anna, false)?);
        }
        BenchMechanism::AnnaLinear => {
            std::hint::black_box(anna_forward_linear_memory(q.view(), k.view(), v.view(), &anna)?);
        }
        BenchMechanism::LowRank => {
            std::hint::black_box(low_rank_attention_with(q.view(), k.view(), v.view(), Association::Linear)?);
        }
        BenchMechanism::Ema => {
            std::hint::black_box(ema_forward(q.view(), k.view(), v.view())?);
        }
    }
    Ok(())
}

/// Median wall time per length over `repetitions` runs on seeded Gaussian
/// inputs (integer-rounded for exact match).
pub fn bench_scaling(cfg: &ScalingConfig) -> Result<ScalingTable, BenchError> {
    if cfg.repetitions == 0 || cfg.dim == 0 || cfg.lengths.contains(&0) {
        return Err(BenchError::Params("lengths, dim and repetitions must be positive".into()));
    }
    let mut rows = Vec::with_capacity(cfg.lengths.len());
    for &n in &cfg.lengths {
        let mut rng = stream(cfg.seed, &[n as u64]);
        let (mut q, mut k) = (gaussian(n, cfg.dim, &mut rng), gaussian(n, cfg.dim, &mut rng));
        let v = gaussian(n, cfg.dim, &mut rng);
        if cfg.mechanism == BenchMechanism::Ema {
            q.mapv_inplace(f64::round);
            k.mapv_inplace(f64::round);
        }
        let mut times: Vec<f64> = (0..cfg.repetitions)
            .map(|_| {
                let t0 = Instant::now();
                run_once(cfg, &q, &k, &v).map(|_| t0.elapsed().as_secs_f64())
            })
            .collect::<Result<_, _>>()?;
        times.sort_by(f64::total_cmp);
        let mid = times.len() / 2;
        let median = if times.len() % 2 == 1 { times[mid] } else { 0.5 * (times[mid - 1] + times[mid]) };
        rows.push(ScalingRow { n, median_secs: median });
    }
    let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.n as f64, r.median_secs.max(1e-9))).collect();
    Ok(ScalingTable { mechanism: cfg.mechanism, slope: loglog_slope(&points), rows })
}

impl ScalingTable {
    pub fn to_table(&self, sep: char) -> String {
        let mut out = format!("mechanism{sep}n{sep}median_seconds\n");
        for r in &self.rows {
            out.push_str(&format!("{}{sep}{}{sep}{:.6e}\n", self.mechanism, r.n, r.median_secs));
        }
        out
    }

    pub fn slope_line(&self) -> String {
        match self.slope {
            Some(s) => format!("{} log-log slope: {s:.3}", self.mechanism),
            None => format!("{} log-log slope: undefined (one length)", self.mechanism),
        }
    }
}
