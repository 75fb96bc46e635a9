//! Material codebook, embeddings and part-level physical priors.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{Edge, EdgeKind};

pub const NUM_MATERIALS: usize = 10;
pub const EMBEDDING_DIM: usize = 16;
const WEIGHT_SUM_TOLERANCE: f64 = 1e-6;

/// Probability vector over material classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MaterialDistribution {
    pub weights: Vec<f64>,
}

impl MaterialDistribution {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        let m = MaterialDistribution { weights };
        m.validate()?;
        Ok(m)
    }

    pub fn one_hot(class: usize, classes: usize) -> Self {
        let mut weights = vec![0.0; classes];
        weights[class] = 1.0;
        MaterialDistribution { weights }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() {
            return Err(Error::invalid("material distribution is empty"));
        }
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("material weights must be finite and >= 0"));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(Error::invalid(format!("material weights sum to {sum}, expected 1")));
        }
        Ok(())
    }

    /// Size-weighted average of several distributions.
    pub fn mix(dists: &[MaterialDistribution], sizes: &[usize]) -> Result<Self> {
        let total: usize = sizes.iter().sum();
        if dists.is_empty() || total == 0 {
            return Err(Error::invalid("nothing to mix"));
        }
        let q = dists[0].len();
        let mut weights = vec![0.0; q];
        for (d, &n) in dists.iter().zip(sizes) {
            if d.len() != q {
                return Err(Error::dims("material classes", q, d.len()));
            }
            for (w, v) in weights.iter_mut().zip(&d.weights) {
                *w += v * n as f64 / total as f64;
            }
        }
        MaterialDistribution::new(weights)
    }
}

/// Learnable material embeddings, one row per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub entries: Vec<Vec<f64>>,
}

impl Codebook {
    /// Standard-normal entries scaled by `1/sqrt(dim)`.
    pub fn init(classes: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dim as f64).sqrt();
        let entries = (0..classes)
            .map(|_| {
                (0..dim)
                    .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
                    .collect()
            })
            .collect();
        Codebook { entries }
    }

    pub fn classes(&self) -> usize {
        self.entries.len()
    }

    pub fn dim(&self) -> usize {
        self.entries.first().map_or(0, Vec::len)
    }
}

/// Distribution-weighted sum of codebook entries.
pub fn embed_material(m: &MaterialDistribution, codebook: &Codebook) -> Result<Vec<f64>> {
    m.validate()?;
    if m.len() != codebook.classes() {
        return Err(Error::dims("material classes", codebook.classes(), m.len()));
    }
    let mut z = vec![0.0; codebook.dim()];
    for (w, e) in m.weights.iter().zip(&codebook.entries) {
        for (zk, ek) in z.iter_mut().zip(e) {
            *zk += w * ek;
        }
    }
    Ok(z)
}

/// Which part embeddings feed a spring's material feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpringParts {
    Intra(usize),
    Boundary(usize, usize),
    Controller,
}

impl SpringParts {
    pub fn of(edge: &Edge, part_of: &[usize]) -> Self {
        match edge.kind {
            EdgeKind::Intra(p) => SpringParts::Intra(p),
            EdgeKind::Boundary => SpringParts::Boundary(part_of[edge.i], part_of[edge.j]),
        }
    }
}

pub fn edge_material_feature(spring: SpringParts, part_embeddings: &[Vec<f64>]) -> Result<Vec<f64>> {
    let get = |p: usize| {
        part_embeddings
            .get(p)
            .ok_or_else(|| Error::invalid(format!("part {p} has no embedding")))
    };
    match spring {
        SpringParts::Intra(p) => Ok(get(p)?.clone()),
        SpringParts::Boundary(a, b) => {
            let (za, zb) = (get(a)?, get(b)?);
            Ok(za.iter().zip(zb).map(|(x, y)| 0.5 * (x + y)).collect())
        }
        SpringParts::Controller => Err(Error::invalid(
            "controller springs use the global controller stiffness",
        )),
    }
}

/// Part-size weighted mean of part embeddings.
pub fn global_material_feature(part_embeddings: &[Vec<f64>], part_sizes: &[usize]) -> Result<Vec<f64>> {
    let total: usize = part_sizes.iter().sum();
    if total == 0 || part_embeddings.len() != part_sizes.len() {
        return Err(Error::invalid("global material feature needs non-empty parts"));
    }
    let dim = part_embeddings[0].len();
    let mut z = vec![0.0; dim];
    for (e, &n) in part_embeddings.iter().zip(part_sizes) {
        let w = n as f64 / total as f64;
        for (zk, ek) in z.iter_mut().zip(e) {
            *zk += w * ek;
        }
    }
    Ok(z)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub fn intersect(&self, other: &Interval) -> Option<Interval> {
        let lo = self.lo.max(other.lo);
        let hi = self.hi.min(other.hi);
        (lo < hi).then_some(Interval { lo, hi })
    }

    pub fn hull(&self, other: &Interval) -> Interval {
        Interval {
            lo: self.lo.min(other.lo),
            hi: self.hi.max(other.hi),
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialClass {
    pub name: String,
    /// ln(N/m).
    pub log_stiffness_mean: f64,
    pub log_stiffness_std: f64,
    pub damping: Interval,
    pub drag: Interval,
    pub friction: Interval,
    pub elasticity: Interval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MaterialClassTable {
    pub classes: Vec<MaterialClass>,
}

impl Default for MaterialClassTable {
    fn default() -> Self {
        #[rustfmt::skip]
        let rows: [(&str, f64, f64, [f64; 2], [f64; 2], [f64; 2], [f64; 2]); NUM_MATERIALS] = [
            ("rope",       1e3, 1.0, [0.5, 10.0], [0.95, 1.0], [0.3, 1.2], [0.0, 0.3]),
            ("cloth",      3e2, 1.0, [0.01, 0.5], [0.95, 1.0], [0.3, 1.0], [0.0, 0.2]),
            ("plush",      1e2, 1.0, [0.05, 2.0], [0.93, 1.0], [0.4, 1.2], [0.0, 0.3]),
            ("rubber",     3e3, 1.0, [0.05, 2.0], [0.95, 1.0], [0.6, 1.5], [0.3, 0.9]),
            ("foam",       5e1, 1.0, [0.05, 1.0], [0.93, 1.0], [0.4, 1.2], [0.0, 0.4]),
            ("paper",      2e3, 1.0, [0.01, 0.5], [0.95, 1.0], [0.2, 0.8], [0.0, 0.2]),
            ("plastic",    2e4, 1.0, [0.05, 2.0], [0.97, 1.0], [0.2, 0.7], [0.2, 0.7]),
            ("leather",    1.5e3, 1.0, [0.05, 1.0], [0.95, 1.0], [0.4, 1.0], [0.0, 0.3]),
            ("sponge",     1e1, 1.0, [0.05, 1.0], [0.9, 1.0],  [0.5, 1.5], [0.0, 0.3]),
            ("near-rigid", 1e5, 0.7, [0.1, 5.0],  [0.98, 1.0], [0.2, 0.8], [0.1, 0.6]),
        ];
        let iv = |r: [f64; 2]| Interval::new(r[0], r[1]);
        MaterialClassTable {
            classes: rows
                .iter()
                .map(|&(name, k, std, g, d, f, e)| MaterialClass {
                    name: name.to_string(),
                    log_stiffness_mean: f64::ln(k),
                    log_stiffness_std: std,
                    damping: iv(g),
                    drag: iv(d),
                    friction: iv(f),
                    elasticity: iv(e),
                })
                .collect(),
        }
    }
}

impl MaterialClassTable {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }

    /// Distribution from `(class name, weight)` pairs.
    pub fn distribution(&self, weights: &[(&str, f64)]) -> Result<MaterialDistribution> {
        let mut w = vec![0.0; self.len()];
        for &(name, v) in weights {
            let q = self
                .index_of(name)
                .ok_or_else(|| Error::invalid(format!("unknown material class `{name}`")))?;
            w[q] += v;
        }
        MaterialDistribution::new(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::validation("material_table", "needs at least one class"));
        }
        for (q, c) in self.classes.iter().enumerate() {
            let path = |f: &str| format!("material_table[{q}].{f}");
            if !(c.log_stiffness_std > 0.0) || !c.log_stiffness_mean.is_finite() {
                return Err(Error::validation(path("log_stiffness_std"), "std must be > 0"));
            }
            let bounded = [
                ("damping", c.damping, c.damping.lo >= 0.0),
                ("drag", c.drag, c.drag.lo > 0.0 && c.drag.hi <= 1.0),
                ("friction", c.friction, c.friction.lo >= 0.0),
                ("elasticity", c.elasticity, c.elasticity.lo >= 0.0 && c.elasticity.hi <= 1.0),
            ];
            for (name, iv, in_bounds) in bounded {
                if !(iv.lo <= iv.hi) || !in_bounds {
                    return Err(Error::validation(path(name), "interval must satisfy lo <= hi within parameter bounds"));
                }
            }
        }
        Ok(())
    }
}

/// Reference distribution of a part's physical parameters: a Gaussian over
/// log-stiffness and intervals for the object-level parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartPrior {
    pub log_stiffness_mean: f64,
    pub log_stiffness_std: f64,
    pub damping: Interval,
    pub drag: Interval,
    pub friction: Interval,
    pub elasticity: Interval,
}

impl PartPrior {
    /// Stiffness-only prior with unconstrained global ranges.
    pub fn gaussian(mean: f64, std: f64) -> Self {
        PartPrior {
            log_stiffness_mean: mean,
            log_stiffness_std: std,
            damping: Interval::new(0.0, f64::INFINITY),
            drag: Interval::new(0.0, 1.0),
            friction: Interval::new(0.0, f64::INFINITY),
            elasticity: Interval::new(0.0, 1.0),
        }
    }

    /// Stiffness window of ±`sigmas` standard deviations, in N/m.
    pub fn stiffness_window(&self, sigmas: f64) -> Interval {
        Interval::new(
            (self.log_stiffness_mean - sigmas * self.log_stiffness_std).exp(),
            (self.log_stiffness_mean + sigmas * self.log_stiffness_std).exp(),
        )
    }

    /// Size-weighted interval means over several part priors.
    pub fn object_ranges(priors: &[PartPrior], sizes: &[usize]) -> [Interval; 4] {
        let total: usize = sizes.iter().sum::<usize>().max(1);
        let mut out = [Interval::new(0.0, 0.0); 4];
        for (p, &n) in priors.iter().zip(sizes) {
            let w = n as f64 / total as f64;
            for (o, iv) in out.iter_mut().zip([p.damping, p.drag, p.friction, p.elasticity]) {
                o.lo += w * iv.lo;
                o.hi += w * iv.hi;
            }
        }
        out
    }
}

fn weighted_interval(m: &MaterialDistribution, ivs: impl Iterator<Item = Interval>) -> Interval {
    let mut out = Interval::new(0.0, 0.0);
    for (w, iv) in m.weights.iter().zip(ivs) {
        out.lo += w * iv.lo;
        out.hi += w * iv.hi;
    }
    out
}

/// Moment-matched single Gaussian of the class mixture.
pub fn part_prior(m: &MaterialDistribution, table: &MaterialClassTable) -> Result<PartPrior> {
    m.validate()?;
    if m.len() != table.len() {
        return Err(Error::dims("material classes", table.len(), m.len()));
    }
    let mut mean = 0.0;
    let mut second = 0.0;
    for (w, c) in m.weights.iter().zip(&table.classes) {
        mean += w * c.log_stiffness_mean;
        second += w * (c.log_stiffness_std.powi(2) + c.log_stiffness_mean.powi(2));
    }
    let var = (second - mean * mean).max(0.0);
    let cls = &table.classes;
    Ok(PartPrior {
        log_stiffness_mean: mean,
        log_stiffness_std: var.sqrt(),
        damping: weighted_interval(m, cls.iter().map(|c| c.damping)),
        drag: weighted_interval(m, cls.iter().map(|c| c.drag)),
        friction: weighted_interval(m, cls.iter().map(|c| c.friction)),
        elasticity: weighted_interval(m, cls.iter().map(|c| c.elasticity)),
    })
}
