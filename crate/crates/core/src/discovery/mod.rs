//! Constraint-based structure learning on (learned or true) latents, and graph distances.

mod fisher;
mod pc;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{mcc, pearson_corr};
use crate::nn::Matrix;
use crate::scm::Dag;

pub use fisher::{fisher_z_test, CiTest, FisherZ};
pub use pc::{apply_meek_rules, cpdag_of_dag, pc_algorithm, PcResult};

pub const DEFAULT_ALPHA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EdgeStatus {
    Absent,
    Undirected,
    /// `(from, to)`.
    Directed(usize, usize),
}

/// A partially directed graph: directed `(from, to)` pairs and undirected `(lo, hi)` pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cpdag {
    pub n: usize,
    pub directed: BTreeSet<(usize, usize)>,
    pub undirected: BTreeSet<(usize, usize)>,
}

impl Cpdag {
    pub fn empty(n: usize) -> Self {
        Self { n, ..Default::default() }
    }

    pub fn new(n: usize, directed: impl IntoIterator<Item = (usize, usize)>, undirected: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut g = Self::empty(n);
        for (a, b) in directed {
            g.check_pair(a, b)?;
            if g.status(a, b) != EdgeStatus::Absent {
                return Err(Error::Config(format!("pair ({a}, {b}) appears twice")));
            }
            g.directed.insert((a, b));
        }
        for (a, b) in undirected {
            g.check_pair(a, b)?;
            if g.status(a, b) != EdgeStatus::Absent {
                return Err(Error::Config(format!("pair ({a}, {b}) appears twice")));
            }
            g.undirected.insert((a.min(b), a.max(b)));
        }
        Ok(g)
    }

    fn check_pair(&self, a: usize, b: usize) -> Result<()> {
        if a >= self.n || b >= self.n || a == b {
            return Err(Error::Config(format!("invalid edge ({a}, {b}) for {} nodes", self.n)));
        }
        Ok(())
    }

    pub fn status(&self, a: usize, b: usize) -> EdgeStatus {
        if self.directed.contains(&(a, b)) {
            EdgeStatus::Directed(a, b)
        } else if self.directed.contains(&(b, a)) {
            EdgeStatus::Directed(b, a)
        } else if self.undirected.contains(&(a.min(b), a.max(b))) {
            EdgeStatus::Undirected
        } else {
            EdgeStatus::Absent
        }
    }

    pub fn edge_count(&self) -> usize {
        self.directed.len() + self.undirected.len()
    }

    /// Rows `(from, to, directed)`, for CSV export.
    pub fn edge_list(&self) -> Vec<(usize, usize, bool)> {
        self.directed
            .iter()
            .map(|&(a, b)| (a, b, true))
            .chain(self.undirected.iter().map(|&(a, b)| (a, b, false)))
            .collect()
    }
}

/// Number of node pairs whose status (absent, undirected, or directed either way) differs.
pub fn shd(a: &Cpdag, b: &Cpdag) -> Result<usize> {
    if a.n != b.n {
        return Err(Error::Shape(format!("graphs over {} and {} nodes", a.n, b.n)));
    }
    let mut count = 0;
    for i in 0..a.n {
        for j in i + 1..a.n {
            if a.status(i, j) != b.status(i, j) {
                count += 1;
            }
        }
    }
    Ok(count)
}

/// Columns of `z_hat` reordered so that column `i` is `z_hat[:, perm[i]]`.
pub fn align_columns(z_hat: &Matrix, perm: &[usize]) -> Matrix {
    z_hat.select_columns(perm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaShd {
    pub shd_true_z: usize,
    pub shd_learned_z: usize,
    /// `shd_learned_z − shd_true_z`.
    pub delta: i64,
    pub truth: Cpdag,
    pub from_true_z: Cpdag,
    pub from_learned_z: Cpdag,
}

/// Runs PC on `z` and on `z_hat` (aligned to `z` by the MCC assignment), both drawn from
/// samples without masked variables, and compares each to the true equivalence class.
pub fn delta_shd(dag: &Dag, z: &Matrix, z_hat: &Matrix, alpha: f64) -> Result<DeltaShd> {
    if z.rows() != z_hat.rows() || z.cols() != dag.n() {
        return Err(Error::Shape("latent samples do not match the graph".into()));
    }
    let truth = cpdag_of_dag(dag);
    let (_, perm) = mcc(&pearson_corr(z, z_hat)?)?;
    let aligned = align_columns(z_hat, &perm);
    let from_true_z = pc_algorithm(z, alpha)?.cpdag;
    let from_learned_z = pc_algorithm(&aligned, alpha)?.cpdag;
    let shd_true_z = shd(&truth, &from_true_z)?;
    let shd_learned_z = shd(&truth, &from_learned_z)?;
    Ok(DeltaShd {
        shd_true_z,
        shd_learned_z,
        delta: shd_learned_z as i64 - shd_true_z as i64,
        truth,
        from_true_z,
        from_learned_z,
    })
}
