//! Locality-sensitive hash families, composite codes and parameter selection.
//!
//! The only concrete family shipped here is the random-hyperplane (angular)
//! family: `h(x) = sign(<g, x>)` with `g` a standard Gaussian vector. Two unit
//! vectors at angle `theta` collide with probability `1 - theta / pi`. Other
//! families plug in through [`LshFamily`].

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LshError {
    #[error("invalid family descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("invalid hash composition: {0}")]
    InvalidComposition(String),
    #[error("unsupported regime: rho = {rho} must be below 1/3")]
    UnsupportedRegime { rho: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("config parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Which family a descriptor refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FamilyKind {
    RandomHyperplane,
    /// Supplied by the caller through [`LshFamily`].
    Pluggable,
}

impl fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FamilyKind::RandomHyperplane => f.write_str("random-hyperplane"),
            FamilyKind::Pluggable => f.write_str("pluggable"),
        }
    }
}

impl FromStr for FamilyKind {
    type Err = LshError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random-hyperplane" => Ok(FamilyKind::RandomHyperplane),
            "pluggable" => Ok(FamilyKind::Pluggable),
            other => Err(LshError::InvalidParameter(format!("unknown family `{other}`"))),
        }
    }
}

/// The `(r, cr, p1, p2)` sensitivity tuple of a family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sensitivity {
    pub r: f64,
    pub cr: f64,
    pub p1: f64,
    pub p2: f64,
}

/// Metadata describing an LSH family.
#[derive(Debug, Clone, PartialEq)]
pub struct LshFamilyDescriptor {
    pub kind: FamilyKind,
    pub dim: usize,
    pub sensitivity: Sensitivity,
    pub rho: f64,
}

/// Angle between two unit vectors at Euclidean distance `d`.
pub fn euclidean_to_angle(d: f64) -> f64 {
    2.0 * (d / 2.0).clamp(0.0, 1.0).asin()
}

/// Collision probability of one hyperplane hash for unit vectors at angle `theta`.
pub fn hyperplane_collision_probability(theta: f64) -> f64 {
    1.0 - theta.clamp(0.0, PI) / PI
}

impl LshFamilyDescriptor {
    pub fn new(kind: FamilyKind, dim: usize, sensitivity: Sensitivity) -> Result<Self, LshError> {
        if dim == 0 {
            return Err(LshError::InvalidDescriptor("dimension must be at least 1".into()));
        }
        let Sensitivity { r, cr, p1, p2 } = sensitivity;
        if !(r >= 0.0 && cr > r) {
            return Err(LshError::InvalidDescriptor(format!("need 0 <= r < cr, got r={r}, cr={cr}")));
        }
        if !(0.0 < p2 && p2 < p1 && p1 <= 1.0) {
            return Err(LshError::InvalidDescriptor(format!("need 0 < p2 < p1 <= 1, got p1={p1}, p2={p2}")));
        }
        let rho = p1.recip().ln() / p2.recip().ln();
        Ok(Self { kind, dim, sensitivity, rho })
    }

    /// Hyperplane family on the unit sphere, with Euclidean thresholds `r` and `c * r`.
    pub fn hyperplane(dim: usize, r: f64, c: f64) -> Result<Self, LshError> {
        if !(c > 1.0) {
            return Err(LshError::InvalidDescriptor(format!("approximation factor must exceed 1, got {c}")));
        }
        let cr = c * r;
        let p1 = hyperplane_collision_probability(euclidean_to_angle(r));
        let p2 = hyperplane_collision_probability(euclidean_to_angle(cr));
        Self::new(FamilyKind::RandomHyperplane, dim, Sensitivity { r, cr, p1, p2 })
    }

    pub fn approximation_factor(&self) -> f64 {
        self.sensitivity.cr / self.sensitivity.r
    }
}

/// One sampled hash function.
pub trait ElementaryHash: Send + Sync {
    fn dim(&self) -> usize;
    /// The bucket symbol of `x`.
    fn hash(&self, x: &[f64]) -> u32;
}

/// `x -> [<g, x> >= 0]` for a Gaussian normal vector `g`.
#[derive(Debug, Clone)]
pub struct HyperplaneHash {
    normal: Vec<f64>,
}

impl HyperplaneHash {
    pub fn sample(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        Self { normal }
    }

    pub fn normal(&self) -> &[f64] {
        &self.normal
    }

    /// Signed projection, exposed for the chunked-attention sort key.
    pub fn project(&self, x: &[f64]) -> f64 {
        self.normal.iter().zip(x).map(|(g, v)| g * v).sum()
    }
}

impl ElementaryHash for HyperplaneHash {
    fn dim(&self) -> usize {
        self.normal.len()
    }

    fn hash(&self, x: &[f64]) -> u32 {
        u32::from(self.project(x) >= 0.0)
    }
}

/// A samplable family.
pub trait LshFamily: Send + Sync {
    fn descriptor(&self) -> &LshFamilyDescriptor;
    fn sample(&self, rng: &mut ChaCha8Rng) -> Box<dyn ElementaryHash>;
}

/// The random-hyperplane family as an [`LshFamily`].
#[derive(Debug, Clone)]
pub struct HyperplaneFamily {
    descriptor: LshFamilyDescriptor,
}

impl HyperplaneFamily {
    pub fn new(descriptor: LshFamilyDescriptor) -> Result<Self, LshError> {
        if descriptor.kind != FamilyKind::RandomHyperplane {
            return Err(LshError::InvalidDescriptor("descriptor is not a hyperplane family".into()));
        }
        Ok(Self { descriptor })
    }

    /// A hyperplane family with placeholder sensitivity, for callers that fix
    /// table counts by hand and only need the sampler.
    pub fn with_dim(dim: usize) -> Result<Self, LshError> {
        Self::new(LshFamilyDescriptor::hyperplane(dim, 0.5, 2.0)?)
    }
}

impl LshFamily for HyperplaneFamily {
    fn descriptor(&self) -> &LshFamilyDescriptor {
        &self.descriptor
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Box<dyn ElementaryHash> {
        Box::new(HyperplaneHash::sample(self.descriptor.dim, rng))
    }
}

/// Samples one hash from a built-in family.
pub fn sample_hash(
    descriptor: &LshFamilyDescriptor,
    rng: &mut ChaCha8Rng,
) -> Result<Box<dyn ElementaryHash>, LshError> {
    if descriptor.dim == 0 {
        return Err(LshError::InvalidDescriptor("dimension must be at least 1".into()));
    }
    match descriptor.kind {
        FamilyKind::RandomHyperplane => Ok(Box::new(HyperplaneHash::sample(descriptor.dim, rng))),
        FamilyKind::Pluggable => Err(LshError::InvalidDescriptor(
            "pluggable families sample through their own LshFamily implementation".into(),
        )),
    }
}

/// A tuple of `z` bucket symbols.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HashCode(pub Vec<u32>);

impl HashCode {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Binary symbols packed little-end first into 64-bit words. Returns `None`
    /// when some symbol is not 0 or 1.
    pub fn packed_bits(&self) -> Option<Vec<u64>> {
        let mut out = vec![0u64; self.0.len().div_ceil(64).max(1)];
        for (i, &s) in self.0.iter().enumerate() {
            match s {
                0 => {}
                1 => out[i / 64] |= 1 << (i % 64),
                _ => return None,
            }
        }
        Some(out)
    }

    /// The code as a `0`/`1` string when every symbol is binary, else comma separated.
    pub fn to_text(&self) -> String {
        if self.0.iter().all(|&s| s <= 1) {
            self.0.iter().map(|&s| if s == 1 { '1' } else { '0' }).collect()
        } else {
            self.0.iter().map(u32::to_string).collect::<Vec<_>>().join(",")
        }
    }
}

/// `x -> (h_1(x), ..., h_z(x))`.
pub struct CompositeHash {
    parts: Vec<Box<dyn ElementaryHash>>,
}

impl CompositeHash {
    pub fn z(&self) -> usize {
        self.parts.len()
    }

    pub fn dim(&self) -> usize {
        self.parts[0].dim()
    }

    pub fn code(&self, x: &[f64]) -> HashCode {
        HashCode(self.parts.iter().map(|h| h.hash(x)).collect())
    }

    pub fn parts(&self) -> &[Box<dyn ElementaryHash>] {
        &self.parts
    }
}

pub fn compose_hash(parts: Vec<Box<dyn ElementaryHash>>) -> Result<CompositeHash, LshError> {
    let Some(first) = parts.first() else {
        return Err(LshError::InvalidComposition("need at least one hash".into()));
    };
    let dim = first.dim();
    if let Some(bad) = parts.iter().position(|h| h.dim() != dim) {
        return Err(LshError::InvalidComposition(format!(
            "hash {bad} has dimension {} but hash 0 has {dim}",
            parts[bad].dim()
        )));
    }
    Ok(CompositeHash { parts })
}

/// Table count and hashes per table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TableParams {
    pub ell: usize,
    pub z: usize,
}

/// Picks `z = ceil(log_{1/p2}(10 N^3))` and `ell = ceil(N^{3 rho} (ln N + ln(1/delta)))`.
///
/// The first makes a far pair share a full code with probability at most
/// `0.1 / N^3`; the second gives every near pair a shared table with
/// probability at least `1 - delta / N` when `p1^z ~ N^{-3 rho}`.
pub fn select_parameters(n: usize, rho: f64, p2: f64, delta: f64) -> Result<TableParams, LshError> {
    if n < 2 {
        return Err(LshError::InvalidParameter(format!("context length must be at least 2, got {n}")));
    }
    if !(rho > 0.0) {
        return Err(LshError::InvalidParameter(format!("rho must be positive, got {rho}")));
    }
    if rho >= 1.0 / 3.0 {
        return Err(LshError::UnsupportedRegime { rho });
    }
    if !(p2 > 0.0 && p2 < 1.0) {
        return Err(LshError::InvalidParameter(format!("p2 must lie in (0,1), got {p2}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(LshError::InvalidParameter(format!("delta must lie in (0,1), got {delta}")));
    }
    let nf = n as f64;
    let z = ((10.0 * nf.powi(3)).ln() / p2.recip().ln()).ceil().max(1.0) as usize;
    let ell = (nf.powf(3.0 * rho) * (nf.ln() + delta.recip().ln())).ceil().max(1.0) as usize;
    Ok(TableParams { ell, z })
}

/// Parameters of one approximate-nearest-neighbor attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnaConfig {
    pub r: f64,
    pub c: f64,
    pub ell: usize,
    pub z: usize,
    pub eta: f64,
    pub rho: f64,
    pub p1: f64,
    pub p2: f64,
    pub seed: u64,
    pub family: FamilyKind,
}

impl AnnaConfig {
    /// Hyperplane family with `ell` and `z` chosen by [`select_parameters`].
    pub fn auto(n: usize, dim: usize, r: f64, c: f64, delta: f64, seed: u64) -> Result<Self, LshError> {
        let desc = LshFamilyDescriptor::hyperplane(dim, r, c)?;
        let TableParams { ell, z } = select_parameters(n, desc.rho, desc.sensitivity.p2, delta)?;
        let cfg = Self {
            r,
            c,
            ell,
            z,
            eta: delta,
            rho: desc.rho,
            p1: desc.sensitivity.p1,
            p2: desc.sensitivity.p2,
            seed,
            family: FamilyKind::RandomHyperplane,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hand-picked table counts; distance thresholds are left at their
    /// exact-match defaults (`r = 0`, unbounded `c`).
    pub fn fixed(ell: usize, z: usize, seed: u64) -> Self {
        Self {
            r: 0.0,
            c: f64::INFINITY,
            ell,
            z,
            eta: 0.0,
            rho: 0.0,
            p1: 1.0,
            p2: 0.5,
            seed,
            family: FamilyKind::RandomHyperplane,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), LshError> {
        if self.ell == 0 || self.z == 0 {
            return Err(LshError::InvalidParameter("ell and z must be at least 1".into()));
        }
        if !(self.r >= 0.0) {
            return Err(LshError::InvalidParameter(format!("r must be non-negative, got {}", self.r)));
        }
        if !(self.c > 1.0) {
            return Err(LshError::InvalidParameter(format!("c must exceed 1, got {}", self.c)));
        }
        if !(0.0..1.0).contains(&self.eta) {
            return Err(LshError::InvalidParameter(format!("eta must lie in [0,1), got {}", self.eta)));
        }
        Ok(())
    }

    /// Flat `key=value` text, one pair per line.
    pub fn to_text(&self) -> String {
        format!(
            "r={}\nc={}\nell={}\nz={}\neta={}\nrho={}\np1={}\np2={}\nseed={}\nfamily={}\n",
            self.r, self.c, self.ell, self.z, self.eta, self.rho, self.p1, self.p2, self.seed, self.family
        )
    }

    pub fn from_text(text: &str) -> Result<Self, LshError> {
        let mut cfg = Self::fixed(1, 1, 0);
        let mut seen = [false; 10];
        const KEYS: [&str; 10] = ["r", "c", "ell", "z", "eta", "rho", "p1", "p2", "seed", "family"];
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| LshError::Parse {
                line: line_no,
                msg: format!("expected key=value, got `{line}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let slot = KEYS.iter().position(|k| *k == key).ok_or_else(|| LshError::Parse {
                line: line_no,
                msg: format!("unknown key `{key}`"),
            })?;
            if seen[slot] {
                return Err(LshError::Parse { line: line_no, msg: format!("duplicate key `{key}`") });
            }
            seen[slot] = true;
            let bad = |e: String| LshError::Parse { line: line_no, msg: format!("bad value for `{key}`: {e}") };
            let float = |v: &str| v.parse::<f64>().map_err(|e| bad(e.to_string()));
            let int = |v: &str| v.parse::<usize>().map_err(|e| bad(e.to_string()));
            match key {
                "r" => cfg.r = float(value)?,
                "c" => cfg.c = float(value)?,
                "ell" => cfg.ell = int(value)?,
                "z" => cfg.z = int(value)?,
                "eta" => cfg.eta = float(value)?,
                "rho" => cfg.rho = float(value)?,
                "p1" => cfg.p1 = float(value)?,
                "p2" => cfg.p2 = float(value)?,
                "seed" => cfg.seed = value.parse::<u64>().map_err(|e| bad(e.to_string()))?,
                _ => cfg.family = value.parse().map_err(|e: LshError| bad(e.to_string()))?,
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(LshError::Parse { line: 0, msg: format!("missing key `{}`", KEYS[missing]) });
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn identical_inputs_share_buckets() {
        let desc = LshFamilyDescriptor::hyperplane(5, 0.3, 3.0).unwrap();
        let mut rng = stream(1, &[]);
        let x = [0.3, -1.0, 2.0, 0.1, 0.0];
        for _ in 0..100 {
            let h = sample_hash(&desc, &mut rng).unwrap();
            assert_eq!(h.hash(&x), h.hash(&x));
        }
    }

    #[test]
    fn zero_dimension_is_rejected() {
        let mut desc = LshFamilyDescriptor::hyperplane(3, 0.3, 3.0).unwrap();
        desc.dim = 0;
        assert!(matches!(sample_hash(&desc, &mut stream(0, &[])), Err(LshError::InvalidDescriptor(_))));
        assert!(LshFamilyDescriptor::hyperplane(0, 0.3, 3.0).is_err());
    }

    #[test]
    fn z_for_two_tokens() {
        let p = select_parameters(2, 0.2, 0.5, 0.5).unwrap();
        assert_eq!(p.z, 7);
    }

    #[test]
    fn rho_limit_gives_log_table_count() {
        for n in [2usize, 10, 1000] {
            let p = select_parameters(n, 1e-12, 0.5, 0.5).unwrap();
            assert_eq!(p.ell, ((n as f64).ln() + 2f64.ln()).ceil() as usize);
        }
    }

    #[test]
    fn rho_at_one_third_is_unsupported() {
        assert!(matches!(
            select_parameters(100, 1.0 / 3.0, 0.5, 0.1),
            Err(LshError::UnsupportedRegime { .. })
        ));
    }

    #[test]
    fn composition_checks_dimensions() {
        let mut rng = stream(3, &[]);
        assert!(compose_hash(vec![]).is_err());
        let parts: Vec<Box<dyn ElementaryHash>> = vec![
            Box::new(HyperplaneHash::sample(3, &mut rng)),
            Box::new(HyperplaneHash::sample(4, &mut rng)),
        ];
        assert!(matches!(compose_hash(parts), Err(LshError::InvalidComposition(_))));
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = AnnaConfig::auto(128, 16, 0.2, 6.0, 0.01, 99).unwrap();
        let back = AnnaConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(cfg, back);
        let fixed = AnnaConfig::fixed(8, 1, 3);
        assert_eq!(AnnaConfig::from_text(&fixed.to_text()).unwrap(), fixed);
    }

    #[test]
    fn config_parse_errors_carry_lines() {
        let text = "r=0\nc=2\nbogus=1\n";
        match AnnaConfig::from_text(text) {
            Err(LshError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn packed_bits_layout() {
        let code = HashCode(vec![1, 0, 1, 1]);
        assert_eq!(code.packed_bits().unwrap(), vec![0b1101]);
        assert_eq!(code.to_text(), "1011");
        assert!(HashCode(vec![2]).packed_bits().is_none());
    }
}
