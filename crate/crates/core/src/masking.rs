//! Temporal causal masks, variable dependency graphs and their Kronecker
//! product over temporal-first flattened tokens.
//!
//! Token `(m, i)` (variable `m`, time `i`, both 1-based) sits at flat
//! position `k = (m − 1)·T + i`. Storage is 0-based: flat index
//! `m0·T + i0` with `m0 = m − 1`, `i0 = i − 1`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `T × T` mask with `entry(i, j) == 1` iff destination `i` may read source `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemporalMask {
    t: usize,
    causal: bool,
    entries: Vec<u8>,
}

impl TemporalMask {
    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    pub fn is_causal(&self) -> bool {
        self.causal
    }

    /// 0-based entry.
    pub fn entry(&self, i: usize, j: usize) -> u8 {
        self.entries[i * self.t + j]
    }

    pub fn rows(&self) -> Vec<Vec<u8>> {
        self.entries.chunks(self.t).map(<[u8]>::to_vec).collect()
    }
}

/// Lower-triangular (inclusive) when `causal`, all ones otherwise.
pub fn build_temporal_mask(t: usize, causal: bool) -> Result<TemporalMask> {
    if t == 0 {
        return Err(Error::contract("temporal mask needs at least one token"));
    }
    let entries = (0..t * t)
        .map(|k| u8::from(!causal || k % t <= k / t))
        .collect();
    Ok(TemporalMask { t, causal, entries })
}

/// Adjacency `C[m][n] = 1` iff variable `m` depends on variable `n`, plus the
/// set of variables that are supervised during training.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableDependencyGraph {
    n: usize,
    adjacency: Vec<u8>,
    target_flags: Vec<bool>,
}

impl VariableDependencyGraph {
    /// Validates a custom graph. Every variable must depend on itself; a
    /// missing self-loop is an error, not something that gets patched.
    pub fn new(rows: &[Vec<u8>], target_flags: Vec<bool>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::config("dependency graph needs at least one variable"));
        }
        let mut adjacency = Vec::with_capacity(n * n);
        for (m, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::config(format!(
                    "dependency row {m} has {} entries, expected {n}",
                    row.len()
                )));
            }
            for (k, &x) in row.iter().enumerate() {
                if x > 1 {
                    return Err(Error::config(format!("dependency entry ({m}, {k}) must be 0 or 1, got {x}")));
                }
            }
            if row[m] != 1 {
                return Err(Error::config(format!("variable {m} must depend on itself (C[{m}][{m}] = 1)")));
            }
            adjacency.extend_from_slice(row);
        }
        if target_flags.len() != n {
            return Err(Error::config(format!(
                "{} target flags for {n} variables",
                target_flags.len()
            )));
        }
        if !target_flags.iter().any(|&f| f) {
            return Err(Error::config("at least one variable must be a target"));
        }
        Ok(VariableDependencyGraph {
            n,
            adjacency,
            target_flags,
        })
    }

    /// Multivariate forecasting: every variable depends on every other.
    pub fn full(n: usize) -> Result<Self> {
        Self::new(&vec![vec![1; n]; n], vec![true; n])
    }

    /// Channel independence: identity adjacency.
    pub fn independent(n: usize) -> Result<Self> {
        let rows: Vec<Vec<u8>> = (0..n).map(|m| (0..n).map(|k| u8::from(m == k)).collect()).collect();
        Self::new(&rows, vec![true; n])
    }

    /// One target (variable 0) informed by `covariates` exogenous series,
    /// each of which only depends on itself. Only the target is supervised.
    pub fn covariate(covariates: usize) -> Result<Self> {
        let n = covariates + 1;
        let rows: Vec<Vec<u8>> = (0..n)
            .map(|m| (0..n).map(|k| u8::from(m == 0 || m == k)).collect())
            .collect();
        let mut flags = vec![false; n];
        flags[0] = true;
        Self::new(&rows, flags)
    }

    pub fn with_targets(mut self, target_flags: Vec<bool>) -> Result<Self> {
        let rows = self.rows();
        self = Self::new(&rows, target_flags)?;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// 0-based adjacency entry.
    pub fn entry(&self, m: usize, k: usize) -> u8 {
        self.adjacency[m * self.n + k]
    }

    pub fn rows(&self) -> Vec<Vec<u8>> {
        self.adjacency.chunks(self.n).map(<[u8]>::to_vec).collect()
    }

    pub fn target_flags(&self) -> &[bool] {
        &self.target_flags
    }

    pub fn is_identity(&self) -> bool {
        (0..self.n).all(|m| (0..self.n).all(|k| self.entry(m, k) == u8::from(m == k)))
    }

    /// Relabels variables: new variable `a` is old variable `perm[a]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n {
            return Err(Error::contract("permutation length differs from variable count"));
        }
        let rows: Vec<Vec<u8>> = perm
            .iter()
            .map(|&pa| perm.iter().map(|&pb| self.entry(pa, pb)).collect())
            .collect();
        Self::new(&rows, perm.iter().map(|&p| self.target_flags[p]).collect())
    }
}

/// `NT × NT` mask equal to `C ⊗ T` under temporal-first flattening.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlatTokenMask {
    n: usize,
    t: usize,
    entries: Vec<u8>,
}

impl FlatTokenMask {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn size(&self) -> usize {
        self.n * self.t
    }

    /// 0-based entry for destination row `dst`, source column `src`.
    pub fn entry(&self, dst: usize, src: usize) -> u8 {
        self.entries[dst * self.size() + src]
    }

    /// 1-based token lookup.
    pub fn allows(&self, dst: usize, src: usize) -> bool {
        self.entry(dst - 1, src - 1) == 1
    }

    /// 1-based sources visible from 1-based destination `dst`.
    pub fn sources_of(&self, dst: usize) -> Vec<usize> {
        (1..=self.size()).filter(|&s| self.allows(dst, s)).collect()
    }

    /// Additive form: `0` where attention is allowed, `-inf` elsewhere.
    pub fn additive<F: Scalar>(&self) -> Tensor<F> {
        let s = self.size();
        Tensor::new(
            &[s, s],
            self.entries
                .iter()
                .map(|&e| if e == 1 { F::zero() } else { F::neg_infinity() })
                .collect(),
        )
        .expect("square mask")
    }

    /// Whether two flat positions hold the same variable.
    pub fn same_variable_pattern(&self) -> Vec<bool> {
        let s = self.size();
        (0..s * s).map(|k| (k / s) / self.t == (k % s) / self.t).collect()
    }
}

/// 0-based flat index of token `(m0, i0)`.
pub fn flat_index(m0: usize, i0: usize, t: usize) -> usize {
    m0 * t + i0
}

/// 0-based `(variable, time)` of a flat index.
pub fn unflatten(k: usize, t: usize) -> (usize, usize) {
    (k / t, k % t)
}

/// Kronecker product of the dependency graph with the temporal mask.
pub fn kronecker_mask(c: &VariableDependencyGraph, t: &TemporalMask) -> FlatTokenMask {
    let (n, tl) = (c.n(), t.len());
    let s = n * tl;
    let mut entries = vec![0u8; s * s];
    for m in 0..n {
        for k in 0..n {
            let cmk = c.entry(m, k);
            if cmk == 0 {
                continue;
            }
            for i in 0..tl {
                let row = (m * tl + i) * s + k * tl;
                for j in 0..tl {
                    entries[row + j] = cmk * t.entry(i, j);
                }
            }
        }
    }
    FlatTokenMask { n, t: tl, entries }
}

/// Enumerates every allowed `(destination, source)` pair as 1-based flat
/// indices directly from the definitions of `C` and `T`, without forming a
/// block matrix. Exists to cross-check [`kronecker_mask`].
pub fn dependency_oracle(c: &VariableDependencyGraph, t: &TemporalMask) -> BTreeSet<(usize, usize)> {
    let tl = t.len();
    let mut pairs = BTreeSet::new();
    for m in 1..=c.n() {
        for i in 1..=tl {
            for n in 1..=c.n() {
                for j in 1..=tl {
                    if c.entry(m - 1, n - 1) == 1 && t.entry(i - 1, j - 1) == 1 {
                        pairs.insert(((m - 1) * tl + i, (n - 1) * tl + j));
                    }
                }
            }
        }
    }
    pairs
}

/// Textual dependency preset as written in run configs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Full,
    Independent,
    Custom,
}

impl MaskKind {
    /// Builds the graph for `n` variables. `rows` is required for `custom`
    /// and rejected otherwise; `targets` defaults to all variables.
    pub fn build(&self, n: usize, rows: Option<&[Vec<u8>]>, targets: Option<Vec<bool>>) -> Result<VariableDependencyGraph> {
        let graph = match (self, rows) {
            (MaskKind::Full, None) => VariableDependencyGraph::full(n)?,
            (MaskKind::Independent, None) => VariableDependencyGraph::independent(n)?,
            (MaskKind::Custom, Some(rows)) => {
                if rows.len() != n {
                    return Err(Error::config(format!(
                        "custom mask has {} rows but the data has {n} variables",
                        rows.len()
                    )));
                }
                VariableDependencyGraph::new(rows, vec![true; n])?
            }
            (MaskKind::Custom, None) => return Err(Error::config("mask.kind = \"custom\" requires mask.rows")),
            (_, Some(_)) => return Err(Error::config("mask.rows is only valid with mask.kind = \"custom\"")),
        };
        match targets {
            Some(flags) => graph.with_targets(flags),
            None => Ok(graph),
        }
    }
}
