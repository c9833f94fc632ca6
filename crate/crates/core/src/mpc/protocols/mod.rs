//! Protocols built on the simulator.

pub mod basic;
pub mod ema_sim;
pub mod hop;
pub mod lowrank;
pub mod tree;

pub use basic::{echo_protocol, identity_protocol, shift_protocol, sort_protocol};
pub use hop::{induction_protocol, khop_protocol, khop_round_bound, HopProtocol, HopTuple};
pub use tree::{aggregation_protocol, broadcast_protocol, combine_by_name, combine_max, combine_min, combine_sum, CombineFn};
pub use lowrank::{low_rank_mpc, pack_real_rows, LowRankShape, ModRing, RealRing, Ring};
pub use ema_sim::{ema_simulate, ema_simulation_protocol, pack_ema_rows, EmaShape};
