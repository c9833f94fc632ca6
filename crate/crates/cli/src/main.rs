//! `anna-bench`: data generation, protocol runs, compiler round-trips,
//! distillation sweeps, scaling benchmarks and contract checks.

use std::fmt::Display;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anna_core::anna::{anna_forward, planted_instance, verify_contract, ViolationKind};
use anna_core::bench::{bench_scaling, BenchMechanism, ScalingConfig};
use anna_core::compiler::{compile, measure_fan_in, EncodingChoice, ExecError};
use anna_core::distill::{parse_grid, sweep, DistillTask, SurrogateModel, SweepConfig, Topology};
use anna_core::lsh::AnnaConfig;
use anna_core::mpc::{run_observed, MpcError, ProtocolKind, ProtocolParams, Trace, Word};
use anna_core::rng::stream;
use anna_core::tasks::{gen_khop, gen_match2, write_dataset, Instance, KhopGen};
use anna_core::weights::WeightsDocument;
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    /// Budget or contract violations.
    #[error("{0}")]
    Violation(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Violation(_) => 2,
            CliError::Usage(_) | CliError::Io { .. } => 1,
        }
    }
}

fn usage(e: impl Display) -> CliError {
    CliError::Usage(e.to_string())
}

impl From<MpcError> for CliError {
    fn from(e: MpcError) -> Self {
        if e.is_violation() {
            CliError::Violation(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

impl From<ExecError> for CliError {
    fn from(e: ExecError) -> Self {
        match e {
            ExecError::Mpc(m) => m.into(),
            ExecError::Input { .. } => usage(e),
            ExecError::Decode { .. } => CliError::Violation(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Tsv,
}

impl Format {
    fn sep(self) -> char {
        match self {
            Format::Csv => ',',
            Format::Tsv => '\t',
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "anna-bench", version, about = "Experiments with approximate nearest neighbor attention")]
struct Cli {
    /// Base seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Write the table here instead of standard output.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a labelled task dataset.
    GenData(GenDataArgs),
    /// Run a registry protocol on a random input and check it against the reference.
    RunProtocol(RunProtocolArgs),
    /// Compile a protocol to exact-match attention and compare both executions.
    CompileRun(CompileRunArgs),
    /// Replace the softmax heads of a surrogate with ANNA over a grid of table shapes.
    DistillEval(DistillArgs),
    /// Time an attention mechanism over sequence lengths.
    BenchScaling(BenchArgs),
    /// Check the ANNA weight guarantees on planted data over many seeds.
    VerifyContract(ContractArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GenTask {
    Match2,
    Khop,
    InductionHeads,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(value_enum)]
    task: GenTask,
    #[arg(long, default_value_t = 32)]
    tokens: usize,
    /// Match2 modulus.
    #[arg(long, default_value_t = 37)]
    modulus: u64,
    /// k-hop symbol count.
    #[arg(long, default_value_t = 4)]
    alphabet: u64,
    #[arg(long, default_value_t = 3)]
    hops: usize,
    #[arg(long, default_value_t = 256)]
    size: usize,
    /// Prefix k-hop rows with the hop count.
    #[arg(long)]
    flag_token: bool,
}

#[derive(Debug, Args)]
struct ProtocolArgs {
    /// identity, shift, echo, sort, aggregate, broadcast, induction-heads, k-hop, low-rank or ema-sim.
    protocol: String,
    #[arg(long, default_value_t = 64)]
    tokens: usize,
    #[arg(long, default_value_t = 3)]
    hops: usize,
    /// Words per machine; defaults to 8 ceil(sqrt(input words)).
    #[arg(long)]
    memory: Option<usize>,
    #[arg(long, default_value_t = 4)]
    alphabet: u64,
    #[arg(long, default_value_t = 2)]
    rank: usize,
    #[arg(long, default_value_t = 1)]
    value_dim: usize,
    /// Broadcast payload width.
    #[arg(long, default_value_t = 2)]
    width: usize,
}

impl ProtocolArgs {
    fn params(&self, base: ProtocolParams) -> Result<(ProtocolKind, ProtocolParams), CliError> {
        let kind: ProtocolKind = self.protocol.parse().map_err(usage)?;
        let mut p = ProtocolParams {
            hops: self.hops,
            alphabet: self.alphabet,
            rank: self.rank,
            value_dim: self.value_dim,
            width: self.width,
            ..base
        };
        p.memory = self.memory;
        Ok((kind, p))
    }
}

#[derive(Debug, Args)]
struct RunProtocolArgs {
    #[command(flatten)]
    protocol: ProtocolArgs,
    /// Write the per-machine trace here.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Write the generated input words here, one per line.
    #[arg(long)]
    input_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Encoding {
    Exact,
    Hashed,
}

#[derive(Debug, Args)]
struct CompileRunArgs {
    #[command(flatten)]
    protocol: ProtocolArgs,
    /// Random inputs to compare on.
    #[arg(long, default_value_t = 1)]
    inputs: usize,
    #[arg(long, value_enum, default_value_t = Encoding::Exact)]
    encoding: Encoding,
    /// Write the compiled layer description here.
    #[arg(long)]
    document: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DistillArgs {
    /// match2 or induction-heads.
    #[arg(long)]
    task: String,
    /// Surrogate weights file.
    #[arg(long, conflicts_with = "builtin")]
    weights: Option<PathBuf>,
    /// analytic-match2 or random.
    #[arg(long)]
    builtin: Option<String>,
    /// Softmax temperature of a builtin model.
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    /// Table counts: one comma list per layer separated by ':'; `a-b/step` ranges allowed.
    #[arg(long, default_value = "8")]
    ell: String,
    /// Hash functions per table, same syntax as --ell.
    #[arg(long, default_value = "1")]
    z: String,
    #[arg(long, default_value_t = 10)]
    runs: usize,
    /// Test sequences; 256 for match2 and 100 for induction-heads by default.
    #[arg(long)]
    samples: Option<usize>,
    /// Write `x series value` plot data here.
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// softmax, anna, anna-linear, low-rank or ema.
    #[arg(long, default_value = "anna")]
    mechanism: String,
    /// Sequence lengths, comma separated; `a-b/step` ranges allowed.
    #[arg(long, default_value = "1024,2048,4096,8192,16384")]
    lengths: String,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value_t = 8)]
    ell: usize,
    #[arg(long, default_value_t = 8)]
    z: usize,
}

#[derive(Debug, Args)]
struct ContractArgs {
    #[arg(long, default_value_t = 128)]
    tokens: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Near radius.
    #[arg(long, default_value_t = 0.2)]
    r: f64,
    /// Approximation factor.
    #[arg(long, default_value_t = 6.0)]
    c: f64,
    /// Failure probability handed to parameter selection.
    #[arg(long, default_value_t = 0.01)]
    delta: f64,
    #[arg(long, default_value_t = 100)]
    runs: u64,
    /// Largest fraction of violating runs accepted.
    #[arg(long, default_value_t = 0.05)]
    tolerance: f64,
    /// Override the selected table count.
    #[arg(long)]
    ell: Option<usize>,
    /// Override the selected hashes per table.
    #[arg(long)]
    z: Option<usize>,
    /// Dump the first run's weight matrix as `row col weight` lines.
    #[arg(long)]
    weights_out: Option<PathBuf>,
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn read_file(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

/// Summary lines go to stdout; the table goes to `--out` or follows them.
struct Report<'a> {
    cli: &'a Cli,
    lines: Vec<String>,
}

impl<'a> Report<'a> {
    fn new(cli: &'a Cli) -> Self {
        Self { cli, lines: Vec::new() }
    }

    fn line(&mut self, s: impl Into<String>) {
        self.lines.push(s.into());
    }

    fn finish(self, table: &str) -> Result<(), CliError> {
        let mut stdout = std::io::stdout().lock();
        for l in &self.lines {
            let _ = writeln!(stdout, "{l}");
        }
        match &self.cli.out {
            Some(path) => write_file(path, table),
            None => {
                let _ = stdout.write_all(table.as_bytes());
                Ok(())
            }
        }
    }
}

fn gen_data(cli: &Cli, a: &GenDataArgs) -> Result<(), CliError> {
    let data: Vec<Instance> = match a.task {
        GenTask::Match2 => gen_match2(a.tokens, a.modulus, a.size, cli.seed).map_err(usage)?,
        GenTask::Khop | GenTask::InductionHeads => {
            let hops = if matches!(a.task, GenTask::InductionHeads) { 1 } else { a.hops };
            let g = KhopGen {
                tokens: a.tokens,
                alphabet: a.alphabet,
                hops,
                size: a.size,
                seed: cli.seed,
                with_flag_token: a.flag_token,
            };
            gen_khop(&g).map_err(usage)?
        }
    };
    // TSV is the dataset format itself; CSV adds a header and commas
    let table = match cli.format {
        Format::Tsv => write_dataset(&data),
        Format::Csv => {
            let body = write_dataset(&data).replace('\t', ",");
            format!("tokens,labels\n{body}")
        }
    };
    let mut report = Report::new(cli);
    if cli.out.is_some() {
        report.line(format!("wrote {} instances", data.len()));
    }
    report.finish(&table)
}

fn words_table(rows: &[(usize, Vec<Word>)], sep: char) -> String {
    let mut out = format!("input{sep}index{sep}word\n");
    for (input, words) in rows {
        for (i, w) in words.iter().enumerate() {
            out.push_str(&format!("{input}{sep}{i}{sep}{w}\n"));
        }
    }
    out
}

fn trace_maxima(trace: &Trace) -> (usize, usize, usize) {
    trace.rounds.iter().fold((0, 0, 0), |(s, r, m), x| (s.max(x.max_sent), r.max(x.max_received), m.max(x.max_memory)))
}

fn run_protocol_cmd(cli: &Cli, a: &RunProtocolArgs) -> Result<(), CliError> {
    let (kind, params) = a.protocol.params(ProtocolParams::new(a.protocol.tokens))?;
    let built = kind.build(&params).map_err(usage)?;
    let p = &built.protocol;
    let input = kind.random_input(&params, &mut stream(cli.seed, &[0x696e_7075]));
    let (out, trace) = run_observed(p, &input, &p.config, |_, _| {})?;
    if let Some(path) = &a.trace {
        write_file(path, &trace.to_text())?;
    }
    if let Some(path) = &a.input_out {
        write_file(path, &input.iter().map(|w| format!("{w}\n")).collect::<String>())?;
    }
    let equal = out == kind.reference(&params, &input);
    let rounds = trace.round_count();
    let (sent, received, memory) = trace_maxima(&trace);
    let mut report = Report::new(cli);
    report.line(format!("protocol: {}", kind));
    report.line(format!("tokens: {}", params.tokens));
    report.line(format!("memory: {}", p.config.memory));
    report.line(format!("machines: {}", p.config.machines));
    report.line(format!("rounds: {rounds}"));
    report.line(format!("round bound: {}", built.round_bound));
    report.line(format!("max sent: {sent}"));
    report.line(format!("max received: {received}"));
    report.line(format!("max memory: {memory}"));
    report.line(format!("oracle-equal: {equal}"));
    report.finish(&words_table(&[(0, out)], cli.format.sep()))?;
    if !equal {
        return Err(CliError::Violation(format!("{kind}: output differs from the reference")));
    }
    if rounds > built.round_bound {
        return Err(CliError::Violation(format!("{kind}: {rounds} rounds exceed the bound {}", built.round_bound)));
    }
    Ok(())
}

fn compile_run(cli: &Cli, a: &CompileRunArgs) -> Result<(), CliError> {
    let (kind, params) = a.protocol.params(ProtocolParams::for_compile(a.protocol.tokens))?;
    if a.inputs == 0 {
        return Err(usage("--inputs must be positive"));
    }
    let built = kind.build(&params).map_err(usage)?;
    let p = &built.protocol;
    let inputs: Vec<Vec<Word>> =
        (0..a.inputs as u64).map(|i| kind.random_input(&params, &mut stream(cli.seed, &[0x696e_7075, i]))).collect();
    let choice = match a.encoding {
        Encoding::Exact => EncodingChoice::ExactSlot,
        Encoding::Hashed => EncodingChoice::Hashed { alpha: measure_fan_in(p, &inputs)?, seed: cli.seed },
    };
    let ct = compile(p, choice).map_err(usage)?;
    if let Some(path) = &a.document {
        write_file(path, &ct.to_document().to_text())?;
    }
    let mut rows = Vec::with_capacity(inputs.len());
    let mut equal = true;
    for (i, x) in inputs.iter().enumerate() {
        let (want, _) = run_observed(p, x, &p.config, |_, _| {})?;
        let got = ct.execute(x)?;
        equal &= got == want;
        rows.push((i, got));
    }
    let mut report = Report::new(cli);
    report.line(format!("protocol: {kind}"));
    report.line(format!("tokens: {}", params.tokens));
    report.line(format!("rounds: {}", p.round_count()));
    report.line(format!("layers: {}", ct.layer_count()));
    report.line(format!("heads: {}", ct.head_count()));
    report.line(format!("inputs: {}", inputs.len()));
    report.line(format!("equal: {equal}"));
    report.finish(&words_table(&rows, cli.format.sep()))?;
    if equal {
        Ok(())
    } else {
        Err(CliError::Violation(format!("{kind}: compiled output differs from the protocol")))
    }
}

fn load_model(a: &DistillArgs, task: DistillTask, seed: u64) -> Result<SurrogateModel, CliError> {
    let model = match (&a.weights, a.builtin.as_deref()) {
        (Some(path), _) => {
            let text = read_file(path)?;
            let doc = WeightsDocument::from_text(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            SurrogateModel::from_document(&doc).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        (None, Some("analytic-match2")) => {
            if task != DistillTask::Match2 {
                return Err(usage("the analytic-match2 model only solves match2"));
            }
            let t = Topology::match2(a.beta);
            SurrogateModel::analytic_match2(t.task_param, t.seq_len, a.beta)
        }
        (None, Some("random")) => {
            let topology = match task {
                DistillTask::Match2 => Topology::match2(a.beta),
                DistillTask::InductionHeads => Topology::induction(a.beta),
            };
            SurrogateModel::random(topology, seed)
        }
        (None, Some(other)) => return Err(usage(format!("unknown builtin model {other:?}; expected analytic-match2 or random"))),
        (None, None) => return Err(usage("give --weights FILE or --builtin NAME")),
    };
    if model.topology.task != task {
        return Err(usage(format!("model is for {}, not {task}", model.topology.task)));
    }
    Ok(model)
}

fn distill_eval(cli: &Cli, a: &DistillArgs) -> Result<(), CliError> {
    let task: DistillTask = a.task.parse().map_err(usage)?;
    let cfg = SweepConfig {
        ells: parse_grid(&a.ell).map_err(usage)?,
        zs: parse_grid(&a.z).map_err(usage)?,
        runs: a.runs,
        samples: a.samples.unwrap_or(task.default_samples()),
        seed: cli.seed,
    };
    let model = load_model(a, task, cli.seed)?;
    let result = sweep(&model, &cfg).map_err(usage)?;
    if let Some(path) = &a.plot {
        write_file(path, &result.plot_data())?;
    }
    let mut report = Report::new(cli);
    report.line(format!("task: {task}"));
    report.line(format!("samples: {}", result.samples));
    report.line(format!("runs: {}", result.runs));
    report.line(format!("softmax error: {:.6}", result.softmax_error));
    for best in result.best_over_z() {
        report.line(format!(
            "best z for ell {:?}: z {:?}, mean error {:.6} +- {:.6}",
            best.ells,
            best.zs,
            best.mean(),
            best.stddev()
        ));
    }
    report.finish(&result.to_table(cli.format.sep()))
}

fn bench_cmd(cli: &Cli, a: &BenchArgs) -> Result<(), CliError> {
    let mechanism: BenchMechanism = a.mechanism.parse().map_err(usage)?;
    let lengths = match parse_grid(&a.lengths).map_err(usage)?.as_slice() {
        [one] => one.clone(),
        _ => return Err(usage("--lengths takes a single list")),
    };
    let cfg = ScalingConfig { dim: a.dim, repetitions: a.reps, seed: cli.seed, ell: a.ell, z: a.z, ..ScalingConfig::new(mechanism, lengths) };
    let table = bench_scaling(&cfg).map_err(usage)?;
    let mut report = Report::new(cli);
    report.line(table.slope_line());
    report.finish(&table.to_table(cli.format.sep()))
}

fn verify_contract_cmd(cli: &Cli, a: &ContractArgs) -> Result<(), CliError> {
    if a.runs == 0 {
        return Err(usage("--runs must be positive"));
    }
    if !(0.0..=2.0).contains(&a.r) {
        return Err(usage("--r must lie in [0, 2] for unit vectors"));
    }
    let sep = cli.format.sep();
    let mut table = format!("run{sep}ell{sep}z{sep}far_key_weighted{sep}near_key_underweight\n");
    let mut bad = 0u64;
    for run in 0..a.runs {
        let seed = anna_core::rng::derive_seed(cli.seed, &[run]);
        let mut cfg = AnnaConfig::auto(a.tokens, a.dim, a.r, a.c, a.delta, seed).map_err(usage)?;
        cfg.ell = a.ell.unwrap_or(cfg.ell);
        cfg.z = a.z.unwrap_or(cfg.z);
        let (q, k) = planted_instance(a.tokens, a.dim, a.r, seed);
        let mut rng = stream(seed, &[0x7661_6c75]);
        let v = Array2::from_shape_fn((a.tokens, 1), |_| rng.random_range(-1.0..1.0));
        let out = anna_forward(q.view(), k.view(), v.view(), &cfg, true).map_err(usage)?;
        let weights = out.weights.expect("weights were requested");
        if run == 0 {
            if let Some(path) = &a.weights_out {
                write_file(path, &weights.to_text())?;
            }
        }
        let rep = verify_contract(q.view(), k.view(), &weights, a.r, a.c, cfg.ell);
        let (far, near) = (rep.count(ViolationKind::FarKeyWeighted), rep.count(ViolationKind::NearKeyUnderweight));
        bad += u64::from(!rep.is_clean());
        table.push_str(&format!("{run}{sep}{}{sep}{}{sep}{far}{sep}{near}\n", cfg.ell, cfg.z));
    }
    let frac = bad as f64 / a.runs as f64;
    let mut report = Report::new(cli);
    report.line(format!("violating runs: {bad}/{} (fraction {frac:.3}, tolerance {})", a.runs, a.tolerance));
    report.finish(&table)?;
    if frac > a.tolerance {
        return Err(CliError::Violation(format!("violation fraction {frac:.3} exceeds {}", a.tolerance)));
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a),
        Command::RunProtocol(a) => run_protocol_cmd(cli, a),
        Command::CompileRun(a) => compile_run(cli, a),
        Command::DistillEval(a) => distill_eval(cli, a),
        Command::BenchScaling(a) => bench_cmd(cli, a),
        Command::VerifyContract(a) => verify_contract_cmd(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
