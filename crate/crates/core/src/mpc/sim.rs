//! Synchronous round-by-round execution with word-level budget enforcement.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

pub type Word = u64;

/// Index of a machine, counted from zero.
pub type MachineId = usize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Received {
    pub src: MachineId,
    pub words: Vec<Word>,
}

/// What a machine holds at the start of a round: the words it chose to keep
/// plus the messages delivered to it, ordered by `(src, emission index)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Memory {
    pub retained: Vec<Word>,
    pub inbox: Vec<Received>,
}

impl Memory {
    pub fn with_words(words: Vec<Word>) -> Self {
        Self { retained: words, inbox: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.retained.len() + self.inbox.iter().map(|m| m.words.len()).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Retained words followed by every inbox payload.
    pub fn flatten(&self) -> Vec<Word> {
        let mut out = self.retained.clone();
        for m in &self.inbox {
            out.extend_from_slice(&m.words);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outgoing {
    pub dest: MachineId,
    pub payload: Vec<Word>,
}

impl Outgoing {
    pub fn new(dest: MachineId, payload: Vec<Word>) -> Self {
        Self { dest, payload }
    }
}

/// Result of one local computation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StepOutput {
    pub retain: Vec<Word>,
    pub messages: Vec<Outgoing>,
}

impl StepOutput {
    pub fn keep(retain: Vec<Word>) -> Self {
        Self { retain, messages: Vec::new() }
    }

    pub fn send(mut self, dest: MachineId, payload: Vec<Word>) -> Self {
        if !payload.is_empty() {
            self.messages.push(Outgoing { dest, payload });
        }
        self
    }
}

/// A failure raised by a protocol's own local code.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LocalFault {
    #[error("capacity: {0}")]
    Capacity(String),
    #[error("malformed memory: {0}")]
    Malformed(String),
}

pub type LocalFn = Arc<dyn Fn(MachineId, &Memory) -> Result<StepOutput, LocalFault> + Send + Sync>;
pub type FinalizeFn = Arc<dyn Fn(MachineId, &Memory) -> Result<Vec<Word>, LocalFault> + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MpcError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("input has {got} words, protocol expects {expected}")]
    InputLength { expected: usize, got: usize },
    #[error("round {round}, machine {machine}: sends {words} words, budget {limit}")]
    SendBudget { round: usize, machine: MachineId, words: usize, limit: usize },
    #[error("round {round}, machine {machine}: receives {words} words, budget {limit}")]
    ReceiveBudget { round: usize, machine: MachineId, words: usize, limit: usize },
    #[error("round {round}, machine {machine}: stores {words} words, budget {limit}")]
    MemoryBudget { round: usize, machine: MachineId, words: usize, limit: usize },
    #[error("round {round}, machine {machine}: destination {dest} outside 0..{machines}")]
    Destination { round: usize, machine: MachineId, dest: MachineId, machines: usize },
    #[error("round {round}, machine {machine}: {degree} messages, declared out-degree {limit}")]
    OutDegree { round: usize, machine: MachineId, degree: usize, limit: usize },
    #[error("round {round}, machine {machine}: empty message to {dest}")]
    EmptyPayload { round: usize, machine: MachineId, dest: MachineId },
    #[error("round {round}, machine {machine}: word {word} does not fit in {bits} bits")]
    WordRange { round: usize, machine: MachineId, word: Word, bits: u32 },
    #[error("round {round}, machine {machine}: {fault}")]
    Local { round: usize, machine: MachineId, fault: LocalFault },
    #[error("output machine {machine} produced {got} words, expected {expected}")]
    OutputShape { machine: MachineId, expected: usize, got: usize },
}

impl MpcError {
    /// Budget and contract violations, as opposed to malformed requests.
    pub fn is_violation(&self) -> bool {
        !matches!(self, MpcError::Config(_) | MpcError::InputLength { .. })
    }
}

/// Machine count, memory and word width of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcConfig {
    /// Input length in words.
    pub input_words: usize,
    pub word_bits: u32,
    /// Local memory `s` in words; also the per-round send and receive budget.
    pub memory: usize,
    pub machines: usize,
    /// Exponents of the `(gamma, epsilon)` regime, for reporting only.
    pub epsilon: f64,
    pub gamma: f64,
}

impl MpcConfig {
    pub fn new(input_words: usize, memory: usize, machines: usize) -> Self {
        Self { input_words, word_bits: 64, memory, machines, epsilon: 0.5, gamma: 0.0 }
    }

    pub fn with_word_bits(mut self, bits: u32) -> Self {
        self.word_bits = bits;
        self
    }

    /// The reserved "no value" word `2^p - 1`.
    pub fn bottom(&self) -> Word {
        bottom_word(self.word_bits)
    }

    pub fn input_machines(&self) -> usize {
        self.input_words.div_ceil(self.memory)
    }

    pub fn validate(&self) -> Result<(), MpcError> {
        if self.memory == 0 {
            return Err(MpcError::Config("memory must be at least one word".into()));
        }
        if !(1..=64).contains(&self.word_bits) {
            return Err(MpcError::Config(format!("word width {} outside 1..=64", self.word_bits)));
        }
        if self.machines < self.input_machines().max(1) {
            return Err(MpcError::Config(format!(
                "{} machines cannot hold {} input words at {} words each",
                self.machines, self.input_words, self.memory
            )));
        }
        Ok(())
    }
}

pub fn bottom_word(bits: u32) -> Word {
    if bits >= 64 {
        Word::MAX
    } else {
        (1u64 << bits) - 1
    }
}

/// A fixed-round protocol.
#[derive(Clone)]
pub struct MpcProtocol {
    pub name: String,
    /// Local functions of the communication rounds, in order.
    pub rounds: Vec<LocalFn>,
    /// Produces each output machine's block after the last round.
    pub finalize: FinalizeFn,
    pub output_len: usize,
    /// Largest number of messages any machine sends in one round.
    pub max_out_degree: usize,
    /// The configuration the protocol was laid out for.
    pub config: MpcConfig,
}

impl fmt::Debug for MpcProtocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MpcProtocol")
            .field("name", &self.name)
            .field("rounds", &self.rounds.len())
            .field("output_len", &self.output_len)
            .field("max_out_degree", &self.max_out_degree)
            .field("config", &self.config)
            .finish()
    }
}

impl MpcProtocol {
    /// Communication rounds.
    pub fn round_count(&self) -> usize {
        self.rounds.len()
    }

    /// Local computation phases, counting the final one that writes output.
    pub fn local_phases(&self) -> usize {
        self.rounds.len() + 1
    }

    pub fn output_machines(&self) -> usize {
        self.output_len.div_ceil(self.config.memory)
    }
}

/// Per-round maxima.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RoundStats {
    /// 0 is the input placement.
    pub round: usize,
    pub max_sent: usize,
    pub max_received: usize,
    pub max_memory: usize,
    pub machines_touched: usize,
    pub total_sent: usize,
    pub total_received: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MachineRow {
    pub round: usize,
    pub machine: MachineId,
    pub sent: usize,
    pub received: usize,
    pub memory: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Trace {
    pub rounds: Vec<RoundStats>,
    pub machines: Vec<MachineRow>,
}

impl Trace {
    /// Communication rounds executed.
    pub fn round_count(&self) -> usize {
        self.rounds.len().saturating_sub(1)
    }

    /// `round machine sent received memory` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::from("round\tmachine\tsent\treceived\tmemory\n");
        for r in &self.machines {
            s.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", r.round, r.machine, r.sent, r.received, r.memory));
        }
        s
    }
}

/// Machine memories after a round, keyed by id; absent machines are empty.
pub type MachineStates = BTreeMap<MachineId, Memory>;

/// Contiguous blocks of `memory` words on machines `0, 1, ...`.
pub fn place_input(input: &[Word], memory: usize) -> MachineStates {
    input
        .chunks(memory)
        .enumerate()
        .map(|(i, c)| (i, Memory::with_words(c.to_vec())))
        .collect()
}

/// Retained words and inbound `(src, message index, payload)` triples.
type Pending = (Vec<Word>, Vec<(MachineId, usize, Vec<Word>)>);

/// Runs one communication round and returns the next states.
pub fn step_round(
    round: usize,
    local: &LocalFn,
    states: &MachineStates,
    config: &MpcConfig,
    max_out_degree: usize,
    stats: &mut RoundStats,
    rows: &mut Vec<MachineRow>,
) -> Result<MachineStates, MpcError> {
    let s = config.memory;
    let bits = config.word_bits;
    let mut next: BTreeMap<MachineId, Pending> = BTreeMap::new();
    let mut sent_by: BTreeMap<MachineId, usize> = BTreeMap::new();
    for (&id, mem) in states {
        if mem.is_empty() {
            continue;
        }
        let out = local(id, mem).map_err(|fault| MpcError::Local { round, machine: id, fault })?;
        if out.messages.len() > max_out_degree {
            return Err(MpcError::OutDegree { round, machine: id, degree: out.messages.len(), limit: max_out_degree });
        }
        let mut sent = 0usize;
        for (e, msg) in out.messages.into_iter().enumerate() {
            if msg.dest >= config.machines {
                return Err(MpcError::Destination { round, machine: id, dest: msg.dest, machines: config.machines });
            }
            if msg.payload.is_empty() {
                return Err(MpcError::EmptyPayload { round, machine: id, dest: msg.dest });
            }
            if let Some(&w) = msg.payload.iter().find(|&&w| bits < 64 && w >> bits != 0) {
                return Err(MpcError::WordRange { round, machine: id, word: w, bits });
            }
            sent += msg.payload.len();
            next.entry(msg.dest).or_default().1.push((id, e, msg.payload));
        }
        if sent > s {
            return Err(MpcError::SendBudget { round, machine: id, words: sent, limit: s });
        }
        if let Some(&w) = out.retain.iter().find(|&&w| bits < 64 && w >> bits != 0) {
            return Err(MpcError::WordRange { round, machine: id, word: w, bits });
        }
        sent_by.insert(id, sent);
        if !out.retain.is_empty() {
            next.entry(id).or_default().0 = out.retain;
        }
    }
    let mut states_out = MachineStates::new();
    let mut touched: std::collections::BTreeSet<MachineId> = sent_by.keys().copied().collect();
    for (id, (retain, mut inbox)) in next {
        inbox.sort_by_key(|(src, e, _)| (*src, *e));
        let received: usize = inbox.iter().map(|(_, _, w)| w.len()).sum();
        if received > s {
            return Err(MpcError::ReceiveBudget { round, machine: id, words: received, limit: s });
        }
        if retain.len() + received > s {
            return Err(MpcError::MemoryBudget { round, machine: id, words: retain.len() + received, limit: s });
        }
        let mem = Memory {
            retained: retain,
            inbox: inbox.into_iter().map(|(src, _, words)| Received { src, words }).collect(),
        };
        touched.insert(id);
        stats.max_received = stats.max_received.max(received);
        stats.total_received += received;
        stats.max_memory = stats.max_memory.max(mem.len());
        states_out.insert(id, mem);
    }
    for &id in &touched {
        let sent = sent_by.get(&id).copied().unwrap_or(0);
        stats.max_sent = stats.max_sent.max(sent);
        stats.total_sent += sent;
        let mem = states_out.get(&id);
        rows.push(MachineRow {
            round,
            machine: id,
            sent,
            received: mem.map_or(0, |m| m.inbox.iter().map(|r| r.words.len()).sum()),
            memory: mem.map_or(0, Memory::len),
        });
    }
    stats.round = round;
    stats.machines_touched = touched.len();
    Ok(states_out)
}

/// Output blocks from the first `ceil(output_len / s)` machines.
pub fn collect_output(protocol: &MpcProtocol, states: &MachineStates, config: &MpcConfig) -> Result<Vec<Word>, MpcError> {
    let s = config.memory;
    let empty = Memory::default();
    let mut out = Vec::with_capacity(protocol.output_len);
    for machine in 0..protocol.output_len.div_ceil(s) {
        let expected = s.min(protocol.output_len - machine * s);
        let mem = states.get(&machine).unwrap_or(&empty);
        let block = (protocol.finalize)(machine, mem).map_err(|fault| MpcError::Local {
            round: protocol.rounds.len() + 1,
            machine,
            fault,
        })?;
        if block.len() != expected {
            return Err(MpcError::OutputShape { machine, expected, got: block.len() });
        }
        out.extend(block);
    }
    Ok(out)
}

/// Full run with an observer called on the states after placement (round 0)
/// and after every round.
pub fn run_observed(
    protocol: &MpcProtocol,
    input: &[Word],
    config: &MpcConfig,
    mut observe: impl FnMut(usize, &MachineStates),
) -> Result<(Vec<Word>, Trace), MpcError> {
    config.validate()?;
    if input.len() != config.input_words {
        return Err(MpcError::InputLength { expected: config.input_words, got: input.len() });
    }
    if let Some(&w) = input.iter().find(|&&w| config.word_bits < 64 && w >> config.word_bits != 0) {
        return Err(MpcError::WordRange { round: 0, machine: 0, word: w, bits: config.word_bits });
    }
    let mut states = place_input(input, config.memory);
    let mut trace = Trace::default();
    let mut placement = RoundStats::default();
    for (&id, mem) in &states {
        placement.max_memory = placement.max_memory.max(mem.len());
        placement.machines_touched += 1;
        trace.machines.push(MachineRow { round: 0, machine: id, sent: 0, received: 0, memory: mem.len() });
    }
    trace.rounds.push(placement);
    observe(0, &states);
    for (r, local) in protocol.rounds.iter().enumerate() {
        let mut stats = RoundStats::default();
        states = step_round(r + 1, local, &states, config, protocol.max_out_degree, &mut stats, &mut trace.machines)?;
        trace.rounds.push(stats);
        observe(r + 1, &states);
    }
    let output = collect_output(protocol, &states, config)?;
    Ok((output, trace))
}

pub fn run_protocol(protocol: &MpcProtocol, input: &[Word], config: &MpcConfig) -> Result<Vec<Word>, MpcError> {
    run_observed(protocol, input, config, |_, _| {}).map(|(out, _)| out)
}

pub fn round_trace(protocol: &MpcProtocol, input: &[Word], config: &MpcConfig) -> Result<Trace, MpcError> {
    run_observed(protocol, input, config, |_, _| {}).map(|(_, t)| t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keep_all() -> FinalizeFn {
        Arc::new(|_, m: &Memory| Ok(m.flatten()))
    }

    fn proto(rounds: Vec<LocalFn>, n: usize, s: usize, machines: usize) -> MpcProtocol {
        MpcProtocol {
            name: "test".into(),
            rounds,
            finalize: keep_all(),
            output_len: n,
            max_out_degree: 4,
            config: MpcConfig::new(n, s, machines),
        }
    }

    #[test]
    fn zero_rounds_reads_input_back() {
        let p = proto(vec![], 10, 4, 3);
        let input: Vec<Word> = (0..10).collect();
        assert_eq!(run_protocol(&p, &input, &p.config).unwrap(), input);
        let t = round_trace(&p, &input, &p.config).unwrap();
        assert_eq!(t.round_count(), 0);
        assert_eq!(t.rounds[0].max_sent, 0);
    }

    #[test]
    fn oversend_names_round_and_machine() {
        let f: LocalFn = Arc::new(|id, m: &Memory| {
            let mut out = StepOutput::default();
            if id == 0 {
                out = out.send(1, vec![0; 5]);
            } else {
                out.retain = m.flatten();
            }
            Ok(out)
        });
        let p = proto(vec![f], 8, 4, 3);
        let err = run_protocol(&p, &[1; 8], &p.config).unwrap_err();
        assert_eq!(err, MpcError::SendBudget { round: 1, machine: 0, words: 5, limit: 4 });
    }

    #[test]
    fn inbox_order_is_source_then_emission() {
        let f: LocalFn = Arc::new(|id, _m: &Memory| {
            Ok(StepOutput::default().send(0, vec![10 + id as Word]).send(0, vec![20 + id as Word]))
        });
        let p = proto(vec![f], 8, 4, 2);
        let out = run_protocol(&MpcProtocol { output_len: 4, ..p.clone() }, &[0; 8], &p.config).unwrap();
        assert_eq!(out, vec![10, 20, 11, 21]);
    }

    #[test]
    fn word_width_enforced() {
        let p = proto(vec![], 2, 2, 1);
        let cfg = p.config.clone().with_word_bits(8);
        assert!(matches!(run_protocol(&p, &[1, 300], &cfg), Err(MpcError::WordRange { .. })));
        assert_eq!(cfg.bottom(), 255);
    }
}
