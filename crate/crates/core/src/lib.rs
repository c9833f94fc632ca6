//! Approximate nearest neighbor attention and the machinery around it.
//!
//! The crate is organised bottom-up:
//!
//! - [`lsh`]: hash families, composite codes and table-count selection.
//! - [`anna`]: the bucketed attention kernel in its table-at-once and
//!   linear-memory schedules, plus a checker for its weight guarantees.
//! - [`attention`]: reference mechanisms (softmax, low-rank, exact-match,
//!   chunked) and a small transformer executor.
//! - [`mpc`]: a word-accurate simulator for massively parallel computation and
//!   a library of protocols built on it.
//! - [`compiler`]: turns a protocol into a stack of exact-match attention layers.
//! - [`tasks`]: Match2 and k-hop generators with brute-force oracles.
//! - [`weights`], [`distill`], [`bench`]: plumbing used by the command-line driver.

// `!(x > 0.0)` is used deliberately so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anna;
pub mod attention;
pub mod bench;
pub mod compiler;
pub mod distill;
pub mod lsh;
pub mod mpc;
pub mod rng;
pub mod tasks;
pub mod weights;
