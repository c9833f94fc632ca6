//! Compiles an MPC protocol into a stack of exact-match attention layers.
//!
//! Token `t` plays machine `t`. Its row in the residual stream holds the
//! machine's memory after a local phase, laid out as
//!
//! ```text
//! [id, n_retain, retain..., n_msgs, (dest, len, payload...)...]
//! ```
//!
//! and, after the final phase, `[id, n_out, out...]`. A layer has one head per
//! emission index: the head's key is the positional id of that message's
//! destination, its query is the token's own id, and its value is the message
//! in a collision-tolerant encoding. The post-attention map decodes the
//! inbox, enforces the simulator's budgets and runs the next local phase.
//!
//! Layers: one that loads the input blocks, one per communication round, one
//! that spreads the output blocks back to positions.

pub mod encoding;

use std::fmt;

use thiserror::Error;

use crate::attention::{canonical_key, ema_average, ExactMatchIndex};
use crate::mpc::{run_observed, MachineId, Memory, MpcError, MpcProtocol, Received, Word};
use crate::weights::{Tensor, WeightsDocument};

pub use encoding::{
    average, id_bits, never_key, never_query, positional_id, DecodeError, EncodingConfig, EncodingMode, Envelope,
    SparseRow,
};
use encoding::nearest_word;

/// Widest word that survives averaging as an exact float coordinate.
pub const MAX_WORD_BITS: u32 = 40;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CompileError {
    #[error("words of {0} bits do not fit a float coordinate exactly; at most {MAX_WORD_BITS}")]
    WordBits(u32),
    #[error("message headers overflow: {machines} machines with memory {memory}")]
    HeaderRange { machines: usize, memory: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExecError {
    #[error("layer {layer}, token {machine}: {err}")]
    Decode { layer: usize, machine: MachineId, err: DecodeError },
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error("input has {got} words, expected {expected}")]
    Input { expected: usize, got: usize },
}

impl ExecError {
    /// A decoding miss the hashed encoding is permitted, as opposed to a bug.
    pub fn is_declared_failure(&self) -> bool {
        matches!(self, ExecError::Decode { err, .. } if err.is_declared_failure())
    }
}

/// How messages are packed into head values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodingChoice {
    ExactSlot,
    Hashed { alpha: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadRole {
    /// Gathers the input words of a machine's block.
    InputBlock,
    /// Carries the `h`-th message each machine sent.
    Emission(usize),
    /// Fetches the output block covering a position.
    OutputBlock,
}

/// Which local computation a layer's post-attention map performs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PostMap {
    /// The local function before communication round `r` (1-based).
    Local(usize),
    Finalize,
    /// Picks the position's word from its output block.
    Pick,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerRole {
    Load,
    /// Delivers the messages of communication round `r`.
    Route(usize),
    Gather,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompiledLayer {
    pub role: LayerRole,
    pub heads: Vec<HeadRole>,
    pub post: PostMap,
}

impl fmt::Display for HeadRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeadRole::InputBlock => f.write_str("input-block"),
            HeadRole::Emission(h) => write!(f, "emission-{h}"),
            HeadRole::OutputBlock => f.write_str("output-block"),
        }
    }
}

impl fmt::Display for PostMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PostMap::Local(r) => write!(f, "local-{r}"),
            PostMap::Finalize => f.write_str("finalize"),
            PostMap::Pick => f.write_str("pick"),
        }
    }
}

/// A protocol as a transformer over `tokens` positions.
#[derive(Debug, Clone)]
pub struct CompiledTransformer {
    pub protocol: MpcProtocol,
    pub tokens: usize,
    pub id_bits: usize,
    pub encoding: EncodingConfig,
    pub layers: Vec<CompiledLayer>,
    positions: Vec<Vec<u64>>,
}

type Row = Vec<f64>;

/// Largest number of distinct senders into one machine in one round, over
/// runs on `inputs`.
pub fn measure_fan_in(protocol: &MpcProtocol, inputs: &[Vec<Word>]) -> Result<usize, MpcError> {
    let mut most = 1;
    for input in inputs {
        run_observed(protocol, input, &protocol.config, |round, states| {
            if round == 0 {
                return;
            }
            for mem in states.values() {
                let mut srcs: Vec<MachineId> = mem.inbox.iter().map(|r| r.src).collect();
                srcs.dedup();
                most = most.max(srcs.len());
            }
        })?;
    }
    Ok(most)
}

pub fn compile(protocol: &MpcProtocol, choice: EncodingChoice) -> Result<CompiledTransformer, CompileError> {
    let cfg = &protocol.config;
    cfg.validate().map_err(|e| CompileError::Config(e.to_string()))?;
    if cfg.word_bits > MAX_WORD_BITS {
        return Err(CompileError::WordBits(cfg.word_bits));
    }
    let s = cfg.memory;
    if (cfg.machines as u128) * (s as u128 + 1) >= 1u128 << MAX_WORD_BITS {
        return Err(CompileError::HeaderRange { machines: cfg.machines, memory: s });
    }
    let tokens = cfg.input_words.max(cfg.machines).max(protocol.output_len).max(1);
    let bits = id_bits(tokens);
    let encoding = match choice {
        EncodingChoice::ExactSlot => EncodingConfig::exact(cfg.machines, s),
        EncodingChoice::Hashed { alpha, seed } => EncodingConfig::hashed(cfg.machines, s, alpha, seed),
    };
    let rounds = protocol.round_count();
    let after = |r: usize| if r < rounds { PostMap::Local(r + 1) } else { PostMap::Finalize };
    let mut layers = vec![CompiledLayer { role: LayerRole::Load, heads: vec![HeadRole::InputBlock], post: after(0) }];
    for r in 1..=rounds {
        let heads = (0..protocol.max_out_degree).map(HeadRole::Emission).collect();
        layers.push(CompiledLayer { role: LayerRole::Route(r), heads, post: after(r) });
    }
    layers.push(CompiledLayer { role: LayerRole::Gather, heads: vec![HeadRole::OutputBlock], post: PostMap::Pick });
    let positions = (0..tokens).map(|t| canonical_key(positional_id(t, bits))).collect();
    Ok(CompiledTransformer { protocol: protocol.clone(), tokens, id_bits: bits, encoding, layers, positions })
}

fn word(x: f64) -> Word {
    x as Word
}

/// Messages stored in a machine row: `(dest, payload)`.
fn row_messages(row: &Row) -> Vec<(MachineId, Vec<Word>)> {
    let n_ret = row[1] as usize;
    let mut at = 2 + n_ret;
    let n_msgs = row[at] as usize;
    at += 1;
    let mut out = Vec::with_capacity(n_msgs);
    for _ in 0..n_msgs {
        let (dest, len) = (row[at] as usize, row[at + 1] as usize);
        out.push((dest, row[at + 2..at + 2 + len].iter().map(|&x| word(x)).collect()));
        at += 2 + len;
    }
    out
}

fn row_retained(row: &Row) -> Vec<Word> {
    let n_ret = row[1] as usize;
    row[2..2 + n_ret].iter().map(|&x| word(x)).collect()
}

impl CompiledTransformer {
    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn head_count(&self) -> usize {
        self.layers.iter().map(|l| l.heads.len()).sum()
    }

    fn s(&self) -> usize {
        self.protocol.config.memory
    }

    fn input_machines(&self) -> usize {
        self.protocol.config.input_machines()
    }

    fn position(&self, i: usize) -> Vec<u64> {
        self.positions[i].clone()
    }

    /// `(query, key, value)` of a head at token `t`; `None` keys never match.
    fn head_inputs(&self, head: HeadRole, t: usize, row: &Row) -> (Option<Vec<u64>>, Option<Vec<u64>>, SparseRow) {
        let s = self.s();
        match head {
            HeadRole::InputBlock => {
                let q = (t < self.input_machines()).then(|| self.position(t));
                let has = row[1] == 1.0;
                let k = has.then(|| self.position(t / s));
                let mut v = SparseRow::new();
                if has {
                    if row[2] != 0.0 {
                        v.push((t % s, row[2]));
                    }
                    v.push((s + t % s, 1.0));
                }
                (q, k, v)
            }
            HeadRole::Emission(h) => {
                let q = (t < self.protocol.config.machines).then(|| self.position(t));
                match row_messages(row).into_iter().nth(h) {
                    Some((dest, words)) => {
                        let v = self.encoding.encode(&Envelope { src: t, dest, words });
                        (q, Some(self.position(dest)), v)
                    }
                    None => (q, None, SparseRow::new()),
                }
            }
            HeadRole::OutputBlock => {
                let q = (t < self.protocol.output_len).then(|| self.position(t / s));
                if t < self.protocol.output_machines() {
                    let n = row[1] as usize;
                    let mut v: SparseRow =
                        row[2..2 + n].iter().enumerate().filter(|(_, x)| **x != 0.0).map(|(j, x)| (j, *x)).collect();
                    v.push((s, 1.0));
                    (q, Some(self.position(t)), v)
                } else {
                    (q, None, SparseRow::new())
                }
            }
        }
    }

    fn attend(&self, head: HeadRole, rows: &[Row]) -> Vec<SparseRow> {
        let mut keys = Vec::new();
        let mut values = Vec::new();
        let mut queries = Vec::with_capacity(rows.len());
        // a query that matches nothing, standing in for the never-query id
        let miss = canonical_key(never_query(self.id_bits));
        for (t, row) in rows.iter().enumerate() {
            let (q, k, v) = self.head_inputs(head, t, row);
            queries.push(q.unwrap_or_else(|| miss.clone()));
            if let Some(k) = k {
                keys.push(k);
                values.push(v);
            }
        }
        let index = ExactMatchIndex::new(keys);
        ema_average(&index, queries, &values, average, SparseRow::new)
    }

    /// Runs a local phase on a machine's memory and writes the machine row.
    fn run_phase(&self, post: PostMap, t: usize, mem: &Memory) -> Result<Row, MpcError> {
        let cfg = &self.protocol.config;
        let bits = cfg.word_bits;
        let out_of_range = |w: &Word| bits < 64 && w >> bits != 0;
        match post {
            PostMap::Local(r) => {
                if mem.is_empty() {
                    return Ok(vec![t as f64, 0.0, 0.0]);
                }
                let out = (self.protocol.rounds[r - 1])(t, mem)
                    .map_err(|fault| MpcError::Local { round: r, machine: t, fault })?;
                if out.messages.len() > self.protocol.max_out_degree {
                    return Err(MpcError::OutDegree {
                        round: r,
                        machine: t,
                        degree: out.messages.len(),
                        limit: self.protocol.max_out_degree,
                    });
                }
                let mut row = vec![t as f64, out.retain.len() as f64];
                if let Some(&w) = out.retain.iter().find(|w| out_of_range(w)) {
                    return Err(MpcError::WordRange { round: r, machine: t, word: w, bits });
                }
                row.extend(out.retain.iter().map(|&w| w as f64));
                row.push(out.messages.len() as f64);
                let mut sent = 0;
                for msg in &out.messages {
                    if msg.dest >= cfg.machines {
                        return Err(MpcError::Destination { round: r, machine: t, dest: msg.dest, machines: cfg.machines });
                    }
                    if msg.payload.is_empty() {
                        return Err(MpcError::EmptyPayload { round: r, machine: t, dest: msg.dest });
                    }
                    if let Some(&w) = msg.payload.iter().find(|w| out_of_range(w)) {
                        return Err(MpcError::WordRange { round: r, machine: t, word: w, bits });
                    }
                    sent += msg.payload.len();
                    row.push(msg.dest as f64);
                    row.push(msg.payload.len() as f64);
                    row.extend(msg.payload.iter().map(|&w| w as f64));
                }
                if sent > cfg.memory {
                    return Err(MpcError::SendBudget { round: r, machine: t, words: sent, limit: cfg.memory });
                }
                Ok(row)
            }
            PostMap::Finalize => {
                if t >= self.protocol.output_machines() {
                    return Ok(vec![t as f64, 0.0]);
                }
                let expected = cfg.memory.min(self.protocol.output_len - t * cfg.memory);
                let block = (self.protocol.finalize)(t, mem).map_err(|fault| MpcError::Local {
                    round: self.protocol.round_count() + 1,
                    machine: t,
                    fault,
                })?;
                if block.len() != expected {
                    return Err(MpcError::OutputShape { machine: t, expected, got: block.len() });
                }
                let mut row = vec![t as f64, block.len() as f64];
                row.extend(block.iter().map(|&w| w as f64));
                Ok(row)
            }
            PostMap::Pick => unreachable!("pick has no machine phase"),
        }
    }

    fn decode_err(layer: usize, machine: MachineId, err: DecodeError) -> ExecError {
        ExecError::Decode { layer, machine, err }
    }

    /// Words of a block average. Each contributor owns word coordinate `j`
    /// and constant coordinate `s + j`, so every constant reads `1/count`.
    fn unscale_block(avg: &SparseRow, s: usize, layer: usize, t: usize) -> Result<(usize, Vec<Word>), ExecError> {
        let c = avg.iter().find(|(i, _)| *i >= s).map(|(_, x)| *x);
        let Some(c) = c.filter(|c| *c > 0.0) else {
            return Ok((0, vec![]));
        };
        let cnt = (1.0 / c).round();
        let mut words = vec![0 as Word; s];
        for &(i, x) in avg.iter().filter(|(i, _)| *i < s) {
            match nearest_word(x * cnt) {
                Some(w) if i < words.len() => words[i] = w,
                _ => return Err(Self::decode_err(layer, t, DecodeError::Malformed(format!("coordinate {i} reads {x}")))),
            }
        }
        Ok((cnt as usize, words))
    }

    fn post(&self, l: usize, layer: &CompiledLayer, t: usize, row: &Row, heads: &[SparseRow]) -> Result<Row, ExecError> {
        let s = self.s();
        let cfg = &self.protocol.config;
        match layer.role {
            LayerRole::Load => {
                let mem = if t < self.input_machines() {
                    let (cnt, mut words) = Self::unscale_block(&heads[0], s, l, t)?;
                    words.truncate(cnt);
                    Memory::with_words(words)
                } else {
                    Memory::default()
                };
                Ok(self.run_phase(layer.post, t, &mem)?)
            }
            LayerRole::Route(r) => {
                if t >= cfg.machines {
                    return Ok(self.run_phase(layer.post, t, &Memory::default())?);
                }
                let mut inbox: Vec<(MachineId, usize, Vec<Word>)> = Vec::new();
                for (head, avg) in layer.heads.iter().zip(heads) {
                    let HeadRole::Emission(h) = *head else { unreachable!("route layers carry emissions") };
                    for env in self.encoding.decode(avg).map_err(|e| Self::decode_err(l, t, e))? {
                        if env.dest != t {
                            let msg = format!("message for {} delivered to {t}", env.dest);
                            return Err(Self::decode_err(l, t, DecodeError::Malformed(msg)));
                        }
                        inbox.push((env.src, h, env.words));
                    }
                }
                inbox.sort_by_key(|(src, h, _)| (*src, *h));
                let retained = row_retained(row);
                let received: usize = inbox.iter().map(|(_, _, w)| w.len()).sum();
                if received > s {
                    return Err(MpcError::ReceiveBudget { round: r, machine: t, words: received, limit: s }.into());
                }
                if retained.len() + received > s {
                    let words = retained.len() + received;
                    return Err(MpcError::MemoryBudget { round: r, machine: t, words, limit: s }.into());
                }
                let mem = Memory {
                    retained,
                    inbox: inbox.into_iter().map(|(src, _, words)| Received { src, words }).collect(),
                };
                Ok(self.run_phase(layer.post, t, &mem)?)
            }
            LayerRole::Gather => {
                if t >= self.protocol.output_len {
                    return Ok(vec![t as f64, 0.0]);
                }
                let (_, words) = Self::unscale_block(&heads[0], s, l, t)?;
                let w = words.get(t % s).copied().ok_or_else(|| {
                    Self::decode_err(l, t, DecodeError::Malformed("output block is short".into()))
                })?;
                Ok(vec![t as f64, w as f64])
            }
        }
    }

    /// Initial residual stream: `[t, has_word, word]` per position.
    fn embed(&self, input: &[Word]) -> Vec<Row> {
        (0..self.tokens)
            .map(|t| match input.get(t) {
                Some(&w) => vec![t as f64, 1.0, w as f64],
                None => vec![t as f64, 0.0, 0.0],
            })
            .collect()
    }

    pub fn execute(&self, input: &[Word]) -> Result<Vec<Word>, ExecError> {
        let cfg = &self.protocol.config;
        if input.len() != cfg.input_words {
            return Err(ExecError::Input { expected: cfg.input_words, got: input.len() });
        }
        if let Some(&w) = input.iter().find(|&&w| cfg.word_bits < 64 && w >> cfg.word_bits != 0) {
            return Err(MpcError::WordRange { round: 0, machine: 0, word: w, bits: cfg.word_bits }.into());
        }
        let mut rows = self.embed(input);
        for (l, layer) in self.layers.iter().enumerate() {
            let outs: Vec<Vec<SparseRow>> = layer.heads.iter().map(|&h| self.attend(h, &rows)).collect();
            rows = rows
                .iter()
                .enumerate()
                .map(|(t, row)| {
                    let heads: Vec<SparseRow> = outs.iter().map(|o| o[t].clone()).collect();
                    self.post(l, layer, t, row, &heads)
                })
                .collect::<Result<_, _>>()?;
        }
        Ok(rows[..self.protocol.output_len].iter().map(|r| word(r[1])).collect())
    }

    /// Structure, positional ids and post-map names. The local functions
    /// themselves are code and are referenced by protocol name.
    pub fn to_document(&self) -> WeightsDocument {
        let cfg = &self.protocol.config;
        let mut doc = WeightsDocument::default();
        doc.set_meta("protocol", &self.protocol.name)
            .set_meta("tokens", self.tokens)
            .set_meta("input_words", cfg.input_words)
            .set_meta("output_len", self.protocol.output_len)
            .set_meta("memory", cfg.memory)
            .set_meta("machines", cfg.machines)
            .set_meta("word_bits", cfg.word_bits)
            .set_meta("id_bits", self.id_bits)
            .set_meta("layers", self.layers.len())
            .set_meta("value_dim", self.encoding.dimension());
        match self.encoding.mode {
            EncodingMode::ExactSlot => doc.set_meta("encoding", "exact-slot"),
            EncodingMode::Hashed { repetitions, blocks, seed } => doc
                .set_meta("encoding", "hashed")
                .set_meta("alpha", self.encoding.alpha)
                .set_meta("repetitions", repetitions)
                .set_meta("blocks", blocks)
                .set_meta("hash_seed", seed),
        };
        let ids: Vec<f64> = (0..self.tokens).flat_map(|t| positional_id(t, self.id_bits)).collect();
        doc.insert("positions", Tensor::new(vec![self.tokens, self.id_bits], ids));
        for (l, layer) in self.layers.iter().enumerate() {
            let heads: Vec<String> = layer.heads.iter().map(HeadRole::to_string).collect();
            doc.set_meta(&format!("layer.{l}.heads"), if heads.is_empty() { "none".into() } else { heads.join(",") });
            doc.maps.insert(format!("layer.{l}.post"), format!("{}:{}", self.protocol.name, layer.post));
        }
        doc
    }
}
