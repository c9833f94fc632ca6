//! Approximate nearest neighbor attention.
//!
//! Keys are hashed into `ell` tables, each keyed by a composite code of `z`
//! elementary hashes. A bucket stores the running sum of the values that landed
//! in it and their count. A query gathers the buckets it hashes to in every
//! table and returns `sum / count`.
//!
//! Two schedules are provided. [`anna_forward`] builds every table up front.
//! [`anna_forward_linear_memory`] builds one table at a time and only keeps
//! buckets that some query will read, so at most `2N` bucket-sized records are
//! alive at once. Both add bucket sums in key order and accumulate tables in
//! order `0..ell`, so their outputs agree bit for bit.

use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::lsh::{compose_hash, AnnaConfig, CompositeHash, HashCode, HyperplaneFamily, LshError, LshFamily};
use crate::rng::stream;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnnaError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite input in {matrix} at row {row}")]
    NonFinite { matrix: &'static str, row: usize },
    #[error(transparent)]
    Lsh(#[from] LshError),
}

/// Running `(sum of values, number of keys)` for one code in one table.
#[derive(Debug, Clone, PartialEq)]
pub struct HashBucket {
    pub value_sum: Vec<f64>,
    pub count: usize,
}

impl HashBucket {
    fn empty(width: usize) -> Self {
        Self { value_sum: vec![0.0; width], count: 0 }
    }

    fn add(&mut self, value: ArrayView1<'_, f64>) {
        for (acc, v) in self.value_sum.iter_mut().zip(value.iter()) {
            *acc += v;
        }
        self.count += 1;
    }
}

/// Sparse row-stochastic weights implied by one forward pass.
///
/// Row `i` lists `(j, w_ij)` for keys that shared a bucket with query `i` at
/// least once. A row with no entries is the empty-row marker.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    n_keys: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl WeightMatrix {
    pub fn from_rows(n_keys: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        Self { n_keys, rows }
    }

    pub fn from_dense(w: ArrayView2<'_, f64>) -> Self {
        let rows = w
            .rows()
            .into_iter()
            .map(|r| r.iter().enumerate().filter(|(_, &x)| x != 0.0).map(|(j, &x)| (j, x)).collect())
            .collect();
        Self { n_keys: w.ncols(), rows }
    }

    pub fn n_queries(&self) -> usize {
        self.rows.len()
    }

    pub fn n_keys(&self) -> usize {
        self.n_keys
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i].iter().find(|(k, _)| *k == j).map_or(0.0, |(_, w)| *w)
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.rows.len(), self.n_keys));
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                out[[i, j]] = w;
            }
        }
        out
    }

    /// `row col weight` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                s.push_str(&format!("{i} {j} {w}\n"));
            }
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct AnnaOutput {
    pub output: Array2<f64>,
    pub weights: Option<WeightMatrix>,
}

/// Instrumentation from the linear-memory schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MemoryStats {
    /// Largest number of bucket-sized records alive at once, counting the
    /// per-query accumulators.
    pub peak_live_buckets: usize,
}

fn check_inputs(q: &ArrayView2<'_, f64>, k: &ArrayView2<'_, f64>, v: &ArrayView2<'_, f64>) -> Result<(), AnnaError> {
    if q.ncols() != k.ncols() {
        return Err(AnnaError::Shape(format!("queries have width {} but keys {}", q.ncols(), k.ncols())));
    }
    if k.nrows() != v.nrows() {
        return Err(AnnaError::Shape(format!("{} keys but {} values", k.nrows(), v.nrows())));
    }
    if q.ncols() == 0 {
        return Err(AnnaError::Shape("query width must be positive".into()));
    }
    for (name, m) in [("queries", q), ("keys", k), ("values", v)] {
        if let Some(row) = m.rows().into_iter().position(|r| r.iter().any(|x| !x.is_finite())) {
            return Err(AnnaError::NonFinite { matrix: name, row });
        }
    }
    Ok(())
}

/// The composite hash of table `table`, sampled from its own seeded stream.
pub fn table_hash(family: &dyn LshFamily, seed: u64, table: usize, z: usize) -> Result<CompositeHash, LshError> {
    let parts = (0..z)
        .map(|j| {
            let mut rng = stream(seed, &[table as u64, j as u64]);
            family.sample(&mut rng)
        })
        .collect();
    compose_hash(parts)
}

fn codes(hash: &CompositeHash, m: &ArrayView2<'_, f64>) -> Vec<HashCode> {
    m.rows()
        .into_iter()
        .map(|r| match r.as_slice() {
            Some(s) => hash.code(s),
            None => hash.code(&r.to_vec()),
        })
        .collect()
}

fn finish_row(acc: &[f64], count: usize) -> Vec<f64> {
    if count == 0 {
        vec![0.0; acc.len()]
    } else {
        let c = count as f64;
        acc.iter().map(|x| x / c).collect()
    }
}

fn hyperplane_for(dim: usize) -> Result<HyperplaneFamily, AnnaError> {
    Ok(HyperplaneFamily::with_dim(dim)?)
}

/// All tables built before any query is answered.
pub fn anna_forward(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    config: &AnnaConfig,
    want_weights: bool,
) -> Result<AnnaOutput, AnnaError> {
    let family = hyperplane_for(q.ncols())?;
    anna_forward_with_family(q, k, v, config, &family, want_weights)
}

pub fn anna_forward_with_family(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    config: &AnnaConfig,
    family: &dyn LshFamily,
    want_weights: bool,
) -> Result<AnnaOutput, AnnaError> {
    check_inputs(&q, &k, &v)?;
    let tables = AnnaTables::sample(family, config)?;
    anna_forward_tables(q, k, v, &tables, want_weights)
}

/// The `ell` composite hashes of one sampled attention head. Reusing them
/// across inputs evaluates the same randomized head on each.
pub struct AnnaTables {
    hashes: Vec<CompositeHash>,
}

impl AnnaTables {
    pub fn sample(family: &dyn LshFamily, config: &AnnaConfig) -> Result<Self, AnnaError> {
        config.validate()?;
        let hashes = (0..config.ell).map(|u| table_hash(family, config.seed, u, config.z)).collect::<Result<_, _>>()?;
        Ok(Self { hashes })
    }

    /// Hyperplane tables for `dim`-dimensional inputs.
    pub fn hyperplane(dim: usize, config: &AnnaConfig) -> Result<Self, AnnaError> {
        Self::sample(&hyperplane_for(dim)?, config)
    }

    pub fn len(&self) -> usize {
        self.hashes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hashes.is_empty()
    }
}

/// [`anna_forward`] with tables sampled beforehand.
#[allow(clippy::needless_range_loop)]
pub fn anna_forward_tables(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    tables_in: &AnnaTables,
    want_weights: bool,
) -> Result<AnnaOutput, AnnaError> {
    check_inputs(&q, &k, &v)?;
    if let Some(h) = tables_in.hashes.first() {
        if h.dim() != q.ncols() {
            return Err(AnnaError::Shape(format!("tables hash {} dimensions, rows have {}", h.dim(), q.ncols())));
        }
    }
    let width = v.ncols();
    let ell = tables_in.hashes.len();

    // preprocessing: every table, keys inserted in input order
    let mut tables = Vec::with_capacity(ell);
    let mut members: Vec<HashMap<HashCode, Vec<usize>>> = Vec::new();
    let mut hashes = Vec::with_capacity(ell);
    for hash in &tables_in.hashes {
        let mut table: HashMap<HashCode, HashBucket> = HashMap::new();
        let mut who: HashMap<HashCode, Vec<usize>> = HashMap::new();
        for (j, code) in codes(hash, &k).into_iter().enumerate() {
            if want_weights {
                who.entry(code.clone()).or_default().push(j);
            }
            table.entry(code).or_insert_with(|| HashBucket::empty(width)).add(v.row(j));
        }
        tables.push(table);
        members.push(who);
        hashes.push(hash);
    }

    // query phase: tables visited in order
    let mut out = Array2::zeros((q.nrows(), width));
    let mut weight_rows = want_weights.then(|| Vec::with_capacity(q.nrows()));
    let query_codes: Vec<Vec<HashCode>> = hashes.iter().map(|h| codes(h, &q)).collect();
    for i in 0..q.nrows() {
        let mut acc = vec![0.0; width];
        let mut count = 0usize;
        let mut hits: HashMap<usize, usize> = HashMap::new();
        for u in 0..ell {
            let code = &query_codes[u][i];
            if let Some(bucket) = tables[u].get(code) {
                for (a, s) in acc.iter_mut().zip(&bucket.value_sum) {
                    *a += s;
                }
                count += bucket.count;
                if want_weights {
                    for &j in &members[u][code] {
                        *hits.entry(j).or_default() += 1;
                    }
                }
            }
        }
        for (o, x) in out.row_mut(i).iter_mut().zip(finish_row(&acc, count)) {
            *o = x;
        }
        if let Some(rows) = weight_rows.as_mut() {
            let mut row: Vec<(usize, f64)> =
                hits.into_iter().map(|(j, c)| (j, c as f64 / count as f64)).collect();
            row.sort_by_key(|(j, _)| *j);
            rows.push(row);
        }
    }
    Ok(AnnaOutput { output: out, weights: weight_rows.map(|rows| WeightMatrix::from_rows(k.nrows(), rows)) })
}

/// One table at a time; only buckets addressed by some query are kept.
pub fn anna_forward_linear_memory(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    config: &AnnaConfig,
) -> Result<(Array2<f64>, MemoryStats), AnnaError> {
    let family = hyperplane_for(q.ncols())?;
    anna_forward_linear_memory_with_family(q, k, v, config, &family)
}

pub fn anna_forward_linear_memory_with_family(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    config: &AnnaConfig,
    family: &dyn LshFamily,
) -> Result<(Array2<f64>, MemoryStats), AnnaError> {
    check_inputs(&q, &k, &v)?;
    config.validate()?;
    let width = v.ncols();
    let n = q.nrows();
    let mut acc = vec![HashBucket::empty(width); n];
    let mut stats = MemoryStats::default();
    for u in 0..config.ell {
        let hash = table_hash(family, config.seed, u, config.z)?;
        let query_codes = codes(&hash, &q);
        let mut table: HashMap<&HashCode, HashBucket> = HashMap::with_capacity(n);
        for code in &query_codes {
            table.entry(code).or_insert_with(|| HashBucket::empty(width));
        }
        stats.peak_live_buckets = stats.peak_live_buckets.max(n + table.len());
        for (j, code) in codes(&hash, &k).iter().enumerate() {
            if let Some(bucket) = table.get_mut(code) {
                bucket.add(v.row(j));
            }
        }
        for (i, code) in query_codes.iter().enumerate() {
            let bucket = &table[code];
            if bucket.count == 0 {
                continue;
            }
            for (a, s) in acc[i].value_sum.iter_mut().zip(&bucket.value_sum) {
                *a += s;
            }
            acc[i].count += bucket.count;
        }
    }
    let mut out = Array2::zeros((n, width));
    for (i, b) in acc.iter().enumerate() {
        for (o, x) in out.row_mut(i).iter_mut().zip(finish_row(&b.value_sum, b.count)) {
            *o = x;
        }
    }
    Ok((out, stats))
}

/// Bucket records held by the table-at-once schedule for the same inputs.
pub fn table_footprint(k: ArrayView2<'_, f64>, config: &AnnaConfig) -> Result<usize, AnnaError> {
    let family = hyperplane_for(k.ncols())?;
    let mut total = 0;
    for u in 0..config.ell {
        let hash = table_hash(&family, config.seed, u, config.z)?;
        let distinct: std::collections::HashSet<HashCode> = codes(&hash, &k).into_iter().collect();
        total += distinct.len();
    }
    Ok(total)
}

fn distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Indices of keys within distance `t` of `q`, in increasing order.
pub fn brute_force_neighbors(q: ArrayView1<'_, f64>, keys: ArrayView2<'_, f64>, t: f64) -> Vec<usize> {
    keys.rows()
        .into_iter()
        .enumerate()
        .filter(|(_, k)| distance(q, *k) <= t)
        .map(|(j, _)| j)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    /// Positive weight on a key farther than `cr`.
    FarKeyWeighted,
    /// A key within `r` got less than the guaranteed floor.
    NearKeyUnderweight,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub query: usize,
    pub key: usize,
    pub kind: ViolationKind,
    pub weight: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ContractReport {
    pub violations: Vec<Violation>,
}

impl ContractReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, kind: ViolationKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }
}

fn random_unit(dim: usize, rng: &mut impl Rng) -> Array1<f64> {
    let v = Array1::from_shape_fn(dim, |_| rng.sample::<f64, _>(StandardNormal));
    let norm = v.dot(&v).sqrt();
    v / norm
}

/// Unit-sphere test data: `n` uniform keys, and `n` queries of which every
/// even one lies within chord distance `r` of a random key.
pub fn planted_instance(n: usize, dim: usize, r: f64, seed: u64) -> (Array2<f64>, Array2<f64>) {
    let mut rng = stream(seed, &[0x706c_616e]);
    let mut keys = Array2::zeros((n, dim));
    for mut row in keys.rows_mut() {
        row.assign(&random_unit(dim, &mut rng));
    }
    let mut queries = Array2::zeros((n, dim));
    for i in 0..n {
        let fresh = random_unit(dim, &mut rng);
        let q = if i % 2 == 0 && n > 0 {
            let k = keys.row(rng.random_range(0..n)).to_owned();
            let side = &fresh - &(&k * fresh.dot(&k));
            let side = &side / side.dot(&side).sqrt();
            let theta = 2.0 * (rng.random_range(0.0..=r) / 2.0).asin();
            &k * theta.cos() + &side * theta.sin()
        } else {
            fresh
        };
        queries.row_mut(i).assign(&q);
    }
    (queries, keys)
}

/// Checks the two weight guarantees against exact neighborhoods.
///
/// For each query `i`: every key with positive weight must lie within `c * r`,
/// and every key within `r` must receive at least
/// `1 / ((|N(q_i, cr)| - 1) * ell + 1)`.
pub fn verify_contract(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    weights: &WeightMatrix,
    r: f64,
    c: f64,
    ell: usize,
) -> ContractReport {
    let cr = c * r;
    let mut violations = Vec::new();
    for i in 0..q.nrows() {
        let qi = q.row(i);
        let dists: Vec<f64> = k.rows().into_iter().map(|kj| distance(qi, kj)).collect();
        for &(j, w) in weights.row(i) {
            if w > 0.0 && dists[j] > cr {
                violations.push(Violation { query: i, key: j, kind: ViolationKind::FarKeyWeighted, weight: w, distance: dists[j] });
            }
        }
        let far_ball = dists.iter().filter(|&&d| d <= cr).count();
        let floor = 1.0 / ((far_ball.saturating_sub(1) * ell) as f64 + 1.0);
        for (j, &d) in dists.iter().enumerate() {
            if d <= r {
                let w = weights.get(i, j);
                if w < floor * (1.0 - 1e-12) {
                    violations.push(Violation { query: i, key: j, kind: ViolationKind::NearKeyUnderweight, weight: w, distance: d });
                }
            }
        }
    }
    ContractReport { violations }
}
