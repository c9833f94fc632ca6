//! Softmax surrogate models and their distillation into ANNA heads.
//!
//! A surrogate is a residual transformer without normalisation layers:
//!
//! ```text
//! x = embed.token[tokens] + embed.pos[0..N]
//! per layer:  x += concat_h attn_h(x Wq_h, x Wk_h, x Wv_h) Wo
//!             x += gelu(x W1 + b1) W2 + b2
//! logits = x readout.w + readout.b
//! ```
//!
//! where `attn` is `softmax(beta <q/|q|, k/|k|>) v`. Distillation swaps every
//! attention head for an ANNA head on the same `q, k, v` and leaves the MLPs
//! alone.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::anna::{anna_forward_tables, AnnaError, AnnaTables};
use crate::attention::{softmax_qkv, AttentionError};
use crate::lsh::AnnaConfig;
use crate::rng::{derive_seed, stream};
use crate::tasks::{error_rate, gen_khop, gen_match2, Instance, KhopGen, TaskError};
use crate::weights::{Tensor, WeightsDocument, WeightsError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistillError {
    #[error(transparent)]
    Weights(#[from] WeightsError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Anna(#[from] AnnaError),
    #[error("unknown task {0:?}; expected match2 or induction-heads")]
    UnknownTask(String),
    #[error("bad grid: {0}")]
    Grid(String),
    #[error("inconsistent model: {0}")]
    Topology(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistillTask {
    Match2,
    InductionHeads,
}

impl DistillTask {
    pub fn name(&self) -> &'static str {
        match self {
            DistillTask::Match2 => "match2",
            DistillTask::InductionHeads => "induction-heads",
        }
    }

    /// Test-set size used when none is given.
    pub fn default_samples(&self) -> usize {
        match self {
            DistillTask::Match2 => 256,
            DistillTask::InductionHeads => 100,
        }
    }
}

impl fmt::Display for DistillTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistillTask {
    type Err = DistillError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "match2" => Ok(DistillTask::Match2),
            "induction-heads" | "induction" => Ok(DistillTask::InductionHeads),
            other => Err(DistillError::UnknownTask(other.to_string())),
        }
    }
}

/// Shape parameters of a surrogate.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub task: DistillTask,
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub head_dim: usize,
    pub mlp_width: usize,
    pub vocab: usize,
    pub classes: usize,
    pub seq_len: usize,
    pub beta: f64,
    /// Unit-normalise queries and keys before the softmax.
    pub normalize: bool,
    /// Match2 modulus or k-hop alphabet size.
    pub task_param: u64,
}

impl Topology {
    /// One layer, `m = 64`, MLP width `4m`, sequences of 32 tokens mod 37.
    pub fn match2(beta: f64) -> Self {
        Self {
            task: DistillTask::Match2,
            layers: 1,
            heads: 1,
            model_dim: 64,
            head_dim: 64,
            mlp_width: 256,
            vocab: 38,
            classes: 2,
            seq_len: 32,
            beta,
            normalize: true,
            task_param: 37,
        }
    }

    /// Two layers, `m = 128`, MLP width `4m`, 100 tokens over 4 symbols.
    pub fn induction(beta: f64) -> Self {
        Self {
            task: DistillTask::InductionHeads,
            layers: 2,
            heads: 1,
            model_dim: 128,
            head_dim: 128,
            mlp_width: 512,
            vocab: 5,
            classes: 5,
            seq_len: 100,
            beta,
            normalize: true,
            task_param: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    o: Array2<f64>,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateModel {
    pub topology: Topology,
    token: Array2<f64>,
    pos: Array2<f64>,
    blocks: Vec<Block>,
    readout_w: Array2<f64>,
    readout_b: Array1<f64>,
}

/// How one layer's heads attend.
#[derive(Clone, Copy)]
pub enum Mechanism<'a> {
    Softmax,
    /// Tables per head.
    Anna(&'a [AnnaTables]),
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn vector(doc: &WeightsDocument, name: &str, len: usize) -> Result<Array1<f64>, WeightsError> {
    Ok(doc.matrix(name, 1, len)?.row(0).to_owned())
}

impl SurrogateModel {
    pub fn from_document(doc: &WeightsDocument) -> Result<Self, DistillError> {
        let task: DistillTask = doc.meta_str("task")?.parse()?;
        let t = Topology {
            task,
            layers: doc.meta_parse("layers")?,
            heads: doc.meta_parse("heads")?,
            model_dim: doc.meta_parse("model_dim")?,
            head_dim: doc.meta_parse("head_dim")?,
            mlp_width: doc.meta_parse("mlp_width")?,
            vocab: doc.meta_parse("vocab")?,
            classes: doc.meta_parse("classes")?,
            seq_len: doc.meta_parse("seq_len")?,
            beta: doc.meta_parse("beta")?,
            normalize: doc.meta_parse("normalize")?,
            task_param: doc.meta_parse("task_param")?,
        };
        if t.layers == 0 || t.heads == 0 || !(t.beta > 0.0) {
            return Err(DistillError::Topology("layers, heads and beta must be positive".into()));
        }
        let (m, hd, w) = (t.model_dim, t.heads * t.head_dim, t.mlp_width);
        let blocks = (0..t.layers)
            .map(|l| {
                let p = |n: &str| format!("layer.{l}.{n}");
                Ok(Block {
                    q: doc.matrix(&p("q"), m, hd)?,
                    k: doc.matrix(&p("k"), m, hd)?,
                    v: doc.matrix(&p("v"), m, hd)?,
                    o: doc.matrix(&p("o"), hd, m)?,
                    w1: doc.matrix(&p("mlp.w1"), m, w)?,
                    b1: vector(doc, &p("mlp.b1"), w)?,
                    w2: doc.matrix(&p("mlp.w2"), w, m)?,
                    b2: vector(doc, &p("mlp.b2"), m)?,
                })
            })
            .collect::<Result<_, WeightsError>>()?;
        Ok(Self {
            token: doc.matrix("embed.token", t.vocab, m)?,
            pos: doc.matrix("embed.pos", t.seq_len, m)?,
            blocks,
            readout_w: doc.matrix("readout.w", m, t.classes)?,
            readout_b: vector(doc, "readout.b", t.classes)?,
            topology: t,
        })
    }

    pub fn to_document(&self) -> WeightsDocument {
        let t = &self.topology;
        let mut doc = WeightsDocument::default();
        doc.set_meta("task", t.task)
            .set_meta("layers", t.layers)
            .set_meta("heads", t.heads)
            .set_meta("model_dim", t.model_dim)
            .set_meta("head_dim", t.head_dim)
            .set_meta("mlp_width", t.mlp_width)
            .set_meta("vocab", t.vocab)
            .set_meta("classes", t.classes)
            .set_meta("seq_len", t.seq_len)
            .set_meta("beta", t.beta)
            .set_meta("normalize", t.normalize)
            .set_meta("task_param", t.task_param);
        doc.insert("embed.token", Tensor::from_matrix(&self.token));
        doc.insert("embed.pos", Tensor::from_matrix(&self.pos));
        for (l, b) in self.blocks.iter().enumerate() {
            let p = |n: &str| format!("layer.{l}.{n}");
            doc.insert(&p("q"), Tensor::from_matrix(&b.q));
            doc.insert(&p("k"), Tensor::from_matrix(&b.k));
            doc.insert(&p("v"), Tensor::from_matrix(&b.v));
            doc.insert(&p("o"), Tensor::from_matrix(&b.o));
            doc.insert(&p("mlp.w1"), Tensor::from_matrix(&b.w1));
            doc.insert(&p("mlp.b1"), Tensor::vector(b.b1.to_vec()));
            doc.insert(&p("mlp.w2"), Tensor::from_matrix(&b.w2));
            doc.insert(&p("mlp.b2"), Tensor::vector(b.b2.to_vec()));
        }
        doc.insert("readout.w", Tensor::from_matrix(&self.readout_w));
        doc.insert("readout.b", Tensor::vector(self.readout_b.to_vec()));
        doc
    }

    /// Gaussian weights scaled by `1/sqrt(fan_in)`.
    pub fn random(topology: Topology, seed: u64) -> Self {
        let mut rng = stream(seed, &[0x7375_7272]);
        let mut gauss = |r: usize, c: usize| {
            let scale = 1.0 / (r as f64).sqrt();
            Array2::from_shape_simple_fn((r, c), || scale * rng.sample::<f64, _>(StandardNormal))
        };
        let t = &topology;
        let (m, hd, w) = (t.model_dim, t.heads * t.head_dim, t.mlp_width);
        let token = gauss(t.vocab, m);
        let pos = gauss(t.seq_len, m);
        let blocks = (0..t.layers)
            .map(|_| Block {
                q: gauss(m, hd),
                k: gauss(m, hd),
                v: gauss(m, hd),
                o: gauss(hd, m),
                w1: gauss(m, w),
                b1: Array1::zeros(w),
                w2: gauss(w, m),
                b2: Array1::zeros(m),
            })
            .collect();
        let readout_w = gauss(m, t.classes);
        Self { token, pos, blocks, readout_w, readout_b: Array1::zeros(t.classes), topology }
    }

    /// A hand-set Match2 model that is exact under softmax for any `beta`
    /// and under ANNA for any tables.
    ///
    /// Residues are one-hot. Queries are the token's residue, keys and values
    /// the residue of its complement, so attention mass on the query's own
    /// residue is positive exactly when a partner exists. One MLP unit per
    /// residue fires when both the token and that mass are present.
    pub fn analytic_match2(modulus: u64, seq_len: usize, beta: f64) -> Self {
        let mm = modulus as usize;
        let m = 2 * mm + 1;
        let flag = 2 * mm;
        // the mass is at least 1/seq_len; fire above a fraction of that
        let threshold = 0.5 / seq_len as f64;
        let gain = 50.0 * seq_len as f64;
        let topology = Topology {
            task: DistillTask::Match2,
            layers: 1,
            heads: 1,
            model_dim: m,
            head_dim: mm,
            mlp_width: mm,
            vocab: mm + 1,
            classes: 2,
            seq_len,
            beta,
            normalize: true,
            task_param: modulus,
        };
        let mut token = Array2::zeros((mm + 1, m));
        for x in 0..=mm {
            token[[x, x % mm]] = 1.0;
        }
        let mut q = Array2::zeros((m, mm));
        let mut k = Array2::zeros((m, mm));
        let mut o = Array2::zeros((mm, m));
        let mut w1 = Array2::zeros((m, mm));
        let mut w2 = Array2::zeros((mm, m));
        for a in 0..mm {
            q[[a, a]] = 1.0;
            k[[a, (mm - a) % mm]] = 1.0;
            o[[a, mm + a]] = 1.0;
            w1[[a, a]] = gain;
            w1[[mm + a, a]] = gain;
            w2[[a, flag]] = 1.0;
        }
        let b1 = Array1::from_elem(mm, -gain * (1.0 + threshold));
        let mut readout_w = Array2::zeros((m, 2));
        readout_w[[flag, 1]] = 1.0;
        let block = Block { q, v: k.clone(), k, o, w1, b1, w2, b2: Array1::zeros(m) };
        Self {
            token,
            pos: Array2::zeros((seq_len, m)),
            blocks: vec![block],
            readout_w,
            readout_b: ndarray::array![1.0, 0.0],
            topology,
        }
    }

    fn attend(&self, q: ArrayView2<'_, f64>, k: ArrayView2<'_, f64>, v: ArrayView2<'_, f64>) -> Result<Array2<f64>, DistillError> {
        let t = &self.topology;
        Ok(if t.normalize {
            softmax_qkv(q, k, v, Some(t.beta))?
        } else {
            softmax_qkv((&q * t.beta).view(), k, v, None)?
        })
    }

    /// Logits for one sequence; `mechanisms[l]` picks layer `l`'s heads.
    pub fn logits(&self, tokens: &[u64], mechanisms: &[Mechanism<'_>]) -> Result<Array2<f64>, DistillError> {
        let t = &self.topology;
        if tokens.len() > t.seq_len {
            return Err(DistillError::Topology(format!("{} tokens exceed seq_len {}", tokens.len(), t.seq_len)));
        }
        if mechanisms.len() != t.layers {
            return Err(DistillError::Topology(format!("{} mechanisms for {} layers", mechanisms.len(), t.layers)));
        }
        let n = tokens.len();
        let mut x = Array2::zeros((n, t.model_dim));
        for (i, &tok) in tokens.iter().enumerate() {
            if tok as usize >= t.vocab {
                return Err(DistillError::Topology(format!("token {tok} outside vocabulary of {}", t.vocab)));
            }
            let row = &self.token.row(tok as usize) + &self.pos.row(i);
            x.row_mut(i).assign(&row);
        }
        let d = t.head_dim;
        for (b, mech) in self.blocks.iter().zip(mechanisms) {
            let (q, k, v) = (x.dot(&b.q), x.dot(&b.k), x.dot(&b.v));
            let mut heads = Array2::zeros((n, t.heads * d));
            for h in 0..t.heads {
                let cols = s![.., h * d..(h + 1) * d];
                let out = match mech {
                    Mechanism::Softmax => self.attend(q.slice(cols), k.slice(cols), v.slice(cols))?,
                    Mechanism::Anna(tables) => {
                        let tab = tables.get(h).ok_or_else(|| DistillError::Topology("missing tables for head".into()))?;
                        anna_forward_tables(q.slice(cols), k.slice(cols), v.slice(cols), tab, false)?.output
                    }
                };
                heads.slice_mut(cols).assign(&out);
            }
            x += &heads.dot(&b.o);
            let hidden = (x.dot(&b.w1) + &b.b1).mapv(gelu);
            x += &(hidden.dot(&b.w2) + &b.b2);
        }
        Ok(x.dot(&self.readout_w) + &self.readout_b)
    }

    /// Argmax class per position, ties to the lower class.
    pub fn predict(&self, tokens: &[u64], mechanisms: &[Mechanism<'_>]) -> Result<Vec<u64>, DistillError> {
        let logits = self.logits(tokens, mechanisms)?;
        Ok(logits
            .axis_iter(Axis(0))
            .map(|row| {
                let mut best = 0;
                for (c, &z) in row.iter().enumerate() {
                    if z > row[best] {
                        best = c;
                    }
                }
                best as u64
            })
            .collect())
    }

    /// Token-level error over a dataset, all positions counted.
    pub fn error(&self, data: &[Instance], mechanisms: &[Mechanism<'_>]) -> Result<f64, DistillError> {
        let (mut pred, mut gold) = (Vec::new(), Vec::new());
        for inst in data {
            pred.extend(self.predict(&inst.tokens, mechanisms)?);
            gold.extend_from_slice(&inst.labels);
        }
        Ok(error_rate(&pred, &gold)?)
    }

    /// The held-out set the sweep scores on.
    pub fn test_set(&self, samples: usize, seed: u64) -> Result<Vec<Instance>, DistillError> {
        let t = &self.topology;
        let seed = derive_seed(seed, &[0x7465_7374]);
        Ok(match t.task {
            DistillTask::Match2 => gen_match2(t.seq_len, t.task_param, samples.div_ceil(4) * 4, seed)?,
            DistillTask::InductionHeads => gen_khop(&KhopGen {
                tokens: t.seq_len,
                alphabet: t.task_param,
                hops: 1,
                size: samples,
                seed,
                with_flag_token: true,
            })?,
        })
    }
}

/// `32,40:4,8` gives `[[32, 40], [4, 8]]`: one comma list per layer.
/// `a-b/step` expands to an arithmetic range.
pub fn parse_grid(spec: &str) -> Result<Vec<Vec<usize>>, DistillError> {
    let bad = |m: String| DistillError::Grid(m);
    spec.split(':')
        .map(|layer| {
            let mut vals = Vec::new();
            for item in layer.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                let p = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad number {s:?}")));
                let (range, step) = match item.split_once('/') {
                    Some((r, st)) => (r, p(st)?),
                    None => (item, 1),
                };
                match range.split_once('-') {
                    Some((a, b)) => {
                        let (a, b) = (p(a)?, p(b)?);
                        if step == 0 || a > b {
                            return Err(bad(format!("empty range {item:?}")));
                        }
                        vals.extend((a..=b).step_by(step));
                    }
                    None => vals.push(p(range)?),
                }
            }
            if vals.is_empty() || vals.contains(&0) {
                return Err(bad(format!("layer list {layer:?} must hold positive values")));
            }
            Ok(vals)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    /// Table counts per layer; a single list applies to every layer.
    pub ells: Vec<Vec<usize>>,
    pub zs: Vec<Vec<usize>>,
    pub runs: usize,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub ells: Vec<usize>,
    pub zs: Vec<usize>,
    pub errors: Vec<f64>,
}

impl SweepCell {
    pub fn mean(&self) -> f64 {
        self.errors.iter().sum::<f64>() / self.errors.len() as f64
    }

    pub fn stddev(&self) -> f64 {
        let mu = self.mean();
        let n = self.errors.len();
        if n < 2 {
            return 0.0;
        }
        (self.errors.iter().map(|e| (e - mu).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub task: DistillTask,
    pub runs: usize,
    pub seed: u64,
    pub samples: usize,
    /// Error of the surrogate itself.
    pub softmax_error: f64,
    /// In grid order: later layers vary fastest, `z` after `ell`.
    pub cells: Vec<SweepCell>,
}

fn per_layer(lists: &[Vec<usize>], layers: usize, what: &str) -> Result<Vec<Vec<usize>>, DistillError> {
    match lists.len() {
        1 => Ok(vec![lists[0].clone(); layers]),
        n if n == layers => Ok(lists.to_vec()),
        n => Err(DistillError::Grid(format!("{n} {what} lists for {layers} layers"))),
    }
}

fn product(lists: &[Vec<usize>]) -> Vec<Vec<usize>> {
    lists.iter().fold(vec![vec![]], |acc, list| {
        acc.iter().flat_map(|prefix| list.iter().map(move |&v| [prefix.clone(), vec![v]].concat())).collect()
    })
}

/// Scores every `(ells, zs)` cell `runs` times. Run `r` of every cell draws
/// table `u` of head `(l, h)` from the same stream, so grids are nested.
pub fn sweep(model: &SurrogateModel, cfg: &SweepConfig) -> Result<SweepResult, DistillError> {
    let t = &model.topology;
    if cfg.runs == 0 {
        return Err(DistillError::Grid("runs must be positive".into()));
    }
    let ells = product(&per_layer(&cfg.ells, t.layers, "ell")?);
    let zs = product(&per_layer(&cfg.zs, t.layers, "z")?);
    let data = model.test_set(cfg.samples, cfg.seed)?;
    let softmax_error = model.error(&data, &vec![Mechanism::Softmax; t.layers])?;
    let jobs: Vec<(Vec<usize>, Vec<usize>, usize)> = ells
        .iter()
        .flat_map(|e| zs.iter().flat_map(move |z| (0..cfg.runs).map(move |r| (e.clone(), z.clone(), r))))
        .collect();
    let errors: Vec<f64> = jobs
        .par_iter()
        .map(|(e, z, run)| {
            let tables: Vec<Vec<AnnaTables>> = (0..t.layers)
                .map(|l| {
                    (0..t.heads)
                        .map(|h| {
                            let seed = derive_seed(cfg.seed, &[*run as u64, l as u64, h as u64]);
                            AnnaTables::hyperplane(t.head_dim, &AnnaConfig::fixed(e[l], z[l], seed))
                        })
                        .collect::<Result<_, _>>()
                })
                .collect::<Result<_, AnnaError>>()?;
            let mechs: Vec<Mechanism<'_>> = tables.iter().map(|tab| Mechanism::Anna(tab)).collect();
            model.error(&data, &mechs)
        })
        .collect::<Result<_, _>>()?;
    let cells = errors
        .chunks(cfg.runs)
        .zip(jobs.iter().step_by(cfg.runs))
        .map(|(errs, (e, z, _))| SweepCell { ells: e.clone(), zs: z.clone(), errors: errs.to_vec() })
        .collect();
    Ok(SweepResult { task: t.task, runs: cfg.runs, seed: cfg.seed, samples: data.len(), softmax_error, cells })
}

fn join(xs: &[usize], sep: &str) -> String {
    xs.iter().map(usize::to_string).collect::<Vec<_>>().join(sep)
}

impl SweepResult {
    fn layers(&self) -> usize {
        self.cells.first().map_or(0, |c| c.ells.len())
    }

    /// One row per cell: `ell_1.. z_1.. runs mean_error stddev`.
    pub fn to_table(&self, sep: char) -> String {
        let l = self.layers();
        let mut head: Vec<String> = (1..=l).map(|i| format!("ell{i}")).collect();
        head.extend((1..=l).map(|i| format!("z{i}")));
        head.extend(["runs", "mean_error", "stddev"].map(String::from));
        let sep_s = sep.to_string();
        let mut out = head.join(&sep_s);
        out.push('\n');
        for c in &self.cells {
            let mut row: Vec<String> = c.ells.iter().chain(&c.zs).map(usize::to_string).collect();
            row.push(c.errors.len().to_string());
            row.push(format!("{:.6}", c.mean()));
            row.push(format!("{:.6}", c.stddev()));
            out.push_str(&row.join(&sep_s));
            out.push('\n');
        }
        out
    }

    /// The lowest mean error over `z` for each table-count tuple, in grid
    /// order.
    pub fn best_over_z(&self) -> Vec<&SweepCell> {
        let mut best: Vec<&SweepCell> = Vec::new();
        for c in &self.cells {
            match best.iter_mut().find(|b| b.ells == c.ells) {
                Some(b) if c.mean() < b.mean() => *b = c,
                Some(_) => {}
                None => best.push(c),
            }
        }
        best
    }

    /// `x series value` lines. One layer: `x = ell`, one series per `z`.
    /// More layers: `x` is the first layer's `ell`, the series the remaining
    /// `ell`s, the value the best mean over `z`.
    pub fn plot_data(&self) -> String {
        let mut out = String::from("# x series value\n");
        if self.layers() == 1 {
            for c in &self.cells {
                let _ = writeln!(out, "{} z={} {:.6}", c.ells[0], c.zs[0], c.mean());
            }
        } else {
            for c in self.best_over_z() {
                let _ = writeln!(out, "{} ell={} {:.6}", c.ells[0], join(&c.ells[1..], "/"), c.mean());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_syntax() {
        assert_eq!(parse_grid("32,40:4,8").unwrap(), vec![vec![32, 40], vec![4, 8]]);
        assert_eq!(parse_grid("1-16").unwrap(), vec![(1..=16).collect::<Vec<_>>()]);
        assert_eq!(parse_grid("32-96/8").unwrap()[0], vec![32, 40, 48, 56, 64, 72, 80, 88, 96]);
        assert!(parse_grid("0").is_err());
        assert!(parse_grid("4,x").is_err());
        assert!(parse_grid("9-3").is_err());
    }

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((gelu(-1.0) + 0.158_655_253_931_457_05).abs() < 1e-12);
    }

    #[test]
    fn analytic_match2_is_exact_under_both_mechanisms() {
        let model = SurrogateModel::analytic_match2(37, 32, 0.1);
        let data = model.test_set(64, 4).unwrap();
        assert_eq!(model.error(&data, &[Mechanism::Softmax]).unwrap(), 0.0);
        let cfg = SweepConfig { ells: vec![vec![1, 8]], zs: vec![vec![1, 3]], runs: 3, samples: 64, seed: 9 };
        let res = sweep(&model, &cfg).unwrap();
        assert_eq!(res.cells.len(), 4);
        assert!(res.cells.iter().all(|c| c.errors.len() == 3 && c.mean() == 0.0));
    }

    #[test]
    fn document_round_trip_preserves_predictions() {
        let model = SurrogateModel::random(Topology { model_dim: 16, head_dim: 8, heads: 2, mlp_width: 32, ..Topology::induction(1.0) }, 3);
        let text = model.to_document().to_text();
        let back = SurrogateModel::from_document(&WeightsDocument::from_text(&text).unwrap()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn missing_tensor_is_reported() {
        let mut doc = SurrogateModel::analytic_match2(5, 4, 1.0).to_document();
        doc.tensors.remove("layer.0.mlp.w1");
        assert!(matches!(
            SurrogateModel::from_document(&doc),
            Err(DistillError::Weights(WeightsError::MissingTensor(_)))
        ));
        doc.set_meta("task", "match3");
        assert!(matches!(SurrogateModel::from_document(&doc), Err(DistillError::UnknownTask(_))));
    }

    #[test]
    fn sweep_is_deterministic_and_bounded() {
        let topo = Topology { model_dim: 16, head_dim: 16, mlp_width: 32, seq_len: 20, ..Topology::induction(1.0) };
        let model = SurrogateModel::random(topo, 1);
        let cfg = SweepConfig { ells: vec![vec![2], vec![1, 4]], zs: vec![vec![1, 2]], runs: 2, samples: 5, seed: 2 };
        let a = sweep(&model, &cfg).unwrap();
        let b = sweep(&model, &cfg).unwrap();
        assert_eq!(a.to_table(','), b.to_table(','));
        assert_eq!(a.cells.len(), 2 * 4);
        assert_eq!(a.cells[1].ells, vec![2, 1]);
        assert_eq!(a.cells[1].zs, vec![1, 2]);
        assert!(a.cells.iter().all(|c| (0.0..=1.0).contains(&c.mean())));
        assert_eq!(a.best_over_z().len(), 2);
        assert!(a.plot_data().lines().count() == 3);
        assert!(a.to_table('\t').starts_with("ell1\tell2\tz1\tz2\truns"));
    }
}
