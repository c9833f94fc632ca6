//! Match2 and k-hop induction tasks: generators, brute-force oracles and a
//! line-oriented dataset format.

mod dataset;
mod khop;
mod match2;

use thiserror::Error;

pub use dataset::{error_rate, read_dataset, write_dataset, Instance};
pub use khop::{gen_khop, khop_labels, sigma, sigma_k, KhopGen};
pub use match2::{gen_match2, gen_match2_with, match2_ema_construction, match2_embed, match2_oracle, Match2Gen, ONES_BINS};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TaskError {
    #[error("token {token} at position {pos} outside 1..={max}")]
    TokenRange { pos: usize, token: u64, max: u64 },
    #[error("dataset size {0} is not a multiple of 4")]
    Size(usize),
    #[error("bin {bin} still empty after {iterations} draws")]
    Timeout { bin: usize, iterations: usize },
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}
