//! A word-accurate simulator for massively parallel computation and a
//! library of protocols on top of it.
//!
//! Every machine holds at most `s` words. A round runs one local function
//! per machine over its memory, then delivers the messages; budgets on sent,
//! received and retained words are checked after every round.

pub mod layout;
pub mod protocols;
pub mod registry;
pub mod sim;
pub mod sort;

pub use registry::{BuiltProtocol, ProtocolKind, ProtocolParams, RegistryError};
pub use sim::{
    bottom_word, round_trace, run_observed, run_protocol, LocalFault, MachineId, MachineStates, Memory, MpcConfig,
    MpcError, MpcProtocol, Outgoing, Received, StepOutput, Trace, Word,
};

/// Local memory used by default for an input of `n` words: `8 ceil(sqrt n)`.
pub fn default_memory(n: usize) -> usize {
    8 * (n as f64).sqrt().ceil() as usize
}
