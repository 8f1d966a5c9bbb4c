//! Random causal graphs and structural causal models for the ground-truth causal
//! variables `C`.

use std::collections::VecDeque;

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Matrix;

/// Hidden width of the per-node networks of the nonlinear SCM.
pub const NONLINEAR_HIDDEN: usize = 100;

/// A DAG over `0..n`. Edges are `(parent, child)` pairs and all point forward in
/// `topo_order`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dag {
    n: usize,
    edges: Vec<(usize, usize)>,
    topo_order: Vec<usize>,
}

impl Dag {
    /// Validates the edge list and derives a topological order; fails on cycles,
    /// self-loops, duplicate edges, or out-of-range nodes.
    pub fn new(n: usize, mut edges: Vec<(usize, usize)>) -> Result<Self> {
        edges.sort_unstable();
        edges.dedup();
        for &(a, b) in &edges {
            if a >= n || b >= n || a == b {
                return Err(Error::Config(format!("invalid edge ({a}, {b}) for {n} nodes")));
            }
        }
        let topo_order = kahn_order(n, &edges)
            .ok_or_else(|| Error::Config("edge set contains a cycle".into()))?;
        Ok(Self { n, edges, topo_order })
    }

    pub fn empty(n: usize) -> Self {
        Self { n, edges: Vec::new(), topo_order: (0..n).collect() }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn topo_order(&self) -> &[usize] {
        &self.topo_order
    }

    pub fn has_edge(&self, parent: usize, child: usize) -> bool {
        self.edges.binary_search(&(parent, child)).is_ok()
    }

    pub fn parents(&self, child: usize) -> Vec<usize> {
        self.edges.iter().filter(|e| e.1 == child).map(|e| e.0).collect()
    }

    /// `n x n` matrix with `w[child][parent] = weight` for the given per-edge weights.
    pub fn weighted_adjacency(&self, weights: &[f64]) -> Matrix {
        let mut w = Matrix::zeros(self.n, self.n);
        for (&(p, c), &wt) in self.edges.iter().zip(weights) {
            w[(c, p)] = wt;
        }
        w
    }
}

/// Kahn's algorithm; `None` when the graph has a cycle.
pub fn kahn_order(n: usize, edges: &[(usize, usize)]) -> Option<Vec<usize>> {
    let mut indeg = vec![0usize; n];
    let mut children = vec![Vec::new(); n];
    for &(a, b) in edges {
        indeg[b] += 1;
        children[a].push(b);
    }
    let mut queue: VecDeque<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(v) = queue.pop_front() {
        order.push(v);
        for &c in &children[v] {
            indeg[c] -= 1;
            if indeg[c] == 0 {
                queue.push_back(c);
            }
        }
    }
    (order.len() == n).then_some(order)
}

/// ER-k DAG: a uniformly random topological order, then `min(n·k, n(n-1)/2)` edges drawn
/// uniformly without replacement among the pairs compatible with that order.
pub fn sample_er_dag<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<Dag> {
    if n == 0 {
        return Err(Error::Config("a DAG needs at least one node".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let max_edges = n * (n - 1) / 2;
    let count = (n * k).min(max_edges);
    let mut pairs = Vec::with_capacity(max_edges);
    for a in 0..n {
        for b in a + 1..n {
            pairs.push((order[a], order[b]));
        }
    }
    let edges: Vec<(usize, usize)> = sample_indices(rng, max_edges, count).into_iter().map(|i| pairs[i]).collect();
    Dag::new(n, edges)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// Standard normal.
    Gaussian,
    /// Exponential with scale 1 (mean 1, not centered).
    Exponential,
}

impl NoiseKind {
    fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            NoiseKind::Gaussian => rng.sample(StandardNormal),
            NoiseKind::Exponential => rng.sample(Exp1),
        }
    }
}

/// `c = w2 · sigmoid(w1 · c_parents) + noise`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeNet {
    pub parents: Vec<usize>,
    /// `hidden x |parents|`.
    pub w1: Matrix,
    pub w2: Vec<f64>,
}

impl NodeNet {
    pub fn eval(&self, parent_values: &[f64]) -> f64 {
        (0..self.w1.rows())
            .map(|h| {
                let a: f64 = self.w1.row(h).iter().zip(parent_values).map(|(w, x)| w * x).sum();
                self.w2[h] * sigmoid(a)
            })
            .sum()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mechanism {
    /// One weight per edge, aligned with [`Dag::edges`].
    Linear { weights: Vec<f64> },
    /// One network per node; `None` for parentless nodes.
    Nonlinear { nets: Vec<Option<NodeNet>> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScmFamily {
    LinearGaussian,
    LinearExponential,
    Nonlinear,
}

impl std::str::FromStr for ScmFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear_gaussian" | "lin_gauss" => Ok(ScmFamily::LinearGaussian),
            "linear_exponential" | "lin_exp" => Ok(ScmFamily::LinearExponential),
            "nonlinear" => Ok(ScmFamily::Nonlinear),
            other => Err(Error::Config(format!("unknown SCM family '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmModel {
    pub dag: Dag,
    pub mechanism: Mechanism,
    pub noise: NoiseKind,
}

/// Uniform on `[-2, -0.5] ∪ [0.5, 2]`, each interval with probability 1/2.
pub fn sample_edge_weight<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let magnitude = rng.random_range(0.5..=2.0);
    if rng.random_bool(0.5) {
        magnitude
    } else {
        -magnitude
    }
}

pub fn sample_linear_scm<R: Rng + ?Sized>(dag: Dag, noise: NoiseKind, rng: &mut R) -> ScmModel {
    let weights = dag.edges().iter().map(|_| sample_edge_weight(rng)).collect();
    ScmModel { dag, mechanism: Mechanism::Linear { weights }, noise }
}

/// Per-node two-layer networks over the node's parents with standard Gaussian additive noise.
pub fn sample_nonlinear_scm<R: Rng + ?Sized>(dag: Dag, rng: &mut R) -> ScmModel {
    let nets = (0..dag.n())
        .map(|j| {
            let parents = dag.parents(j);
            if parents.is_empty() {
                return None;
            }
            let w1 = Matrix::from_fn(NONLINEAR_HIDDEN, parents.len(), |_, _| sample_edge_weight(rng));
            let w2 = (0..NONLINEAR_HIDDEN).map(|_| sample_edge_weight(rng)).collect();
            Some(NodeNet { parents, w1, w2 })
        })
        .collect();
    ScmModel { dag, mechanism: Mechanism::Nonlinear { nets }, noise: NoiseKind::Gaussian }
}

pub fn sample_scm<R: Rng + ?Sized>(family: ScmFamily, dag: Dag, rng: &mut R) -> ScmModel {
    match family {
        ScmFamily::LinearGaussian => sample_linear_scm(dag, NoiseKind::Gaussian, rng),
        ScmFamily::LinearExponential => sample_linear_scm(dag, NoiseKind::Exponential, rng),
        ScmFamily::Nonlinear => sample_nonlinear_scm(dag, rng),
    }
}

impl ScmModel {
    pub fn n(&self) -> usize {
        self.dag.n()
    }

    pub fn is_linear_gaussian(&self) -> bool {
        matches!(self.mechanism, Mechanism::Linear { .. }) && self.noise == NoiseKind::Gaussian
    }

    /// `N` i.i.d. rows of `C` by ancestral sampling in topological order.
    pub fn sample_c<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> Matrix {
        let n = self.n();
        let mut c = Matrix::zeros(rows, n);
        let parents: Vec<Vec<(usize, f64)>> = match &self.mechanism {
            Mechanism::Linear { weights } => {
                let mut p = vec![Vec::new(); n];
                for (&(a, b), &w) in self.dag.edges().iter().zip(weights) {
                    p[b].push((a, w));
                }
                p
            }
            Mechanism::Nonlinear { .. } => Vec::new(),
        };
        let mut buf = Vec::new();
        for r in 0..rows {
            let row = c.row_mut(r);
            for &j in self.dag.topo_order() {
                let signal = match &self.mechanism {
                    Mechanism::Linear { .. } => parents[j].iter().map(|&(p, w)| w * row[p]).sum(),
                    Mechanism::Nonlinear { nets } => match &nets[j] {
                        Some(net) => {
                            buf.clear();
                            buf.extend(net.parents.iter().map(|&p| row[p]));
                            net.eval(&buf)
                        }
                        None => 0.0,
                    },
                };
                row[j] = signal + self.noise.sample(rng);
            }
        }
        c
    }
}

/// Mean, per-coordinate standard deviation, and (optionally) covariance of `C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentMoments {
    pub mu: Vec<f64>,
    pub sigma_diag: Vec<f64>,
    pub cov: Option<Matrix>,
}

impl LatentMoments {
    pub fn standard(n: usize) -> Self {
        Self { mu: vec![0.0; n], sigma_diag: vec![1.0; n], cov: Some(Matrix::identity(n)) }
    }

    /// Empirical moments (unbiased covariance) of the rows of `samples`.
    pub fn empirical(samples: &Matrix) -> Self {
        let (rows, n) = samples.shape();
        let mu = samples.column_means();
        let mut cov = Matrix::zeros(n, n);
        for r in 0..rows {
            let row = samples.row(r);
            for a in 0..n {
                let da = row[a] - mu[a];
                for b in a..n {
                    cov[(a, b)] += da * (row[b] - mu[b]);
                }
            }
        }
        let denom = (rows.max(2) - 1) as f64;
        for a in 0..n {
            for b in a..n {
                let v = cov[(a, b)] / denom;
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
        }
        let sigma_diag = (0..n).map(|j| cov[(j, j)].sqrt()).collect();
        Self { mu, sigma_diag, cov: Some(cov) }
    }
}

/// For linear-Gaussian models: mean 0 and `Σ = (I − W)⁻¹(I − W)⁻ᵀ`. Otherwise the
/// empirical moments of `rows` fresh samples.
pub fn latent_moments<R: Rng + ?Sized>(model: &ScmModel, rows: usize, rng: &mut R) -> LatentMoments {
    let n = model.n();
    if let (Mechanism::Linear { weights }, NoiseKind::Gaussian) = (&model.mechanism, model.noise) {
        let w = model.dag.weighted_adjacency(weights);
        let i_minus_w = Matrix::identity(n).sub(&w).expect("square");
        // Unit lower-triangular in topological order, hence always invertible.
        let inv = i_minus_w.inverse().expect("I - W is invertible for a DAG");
        let cov = inv.matmul_t(&inv).expect("square");
        let sigma_diag = (0..n).map(|j| cov[(j, j)].sqrt()).collect();
        return LatentMoments { mu: vec![0.0; n], sigma_diag, cov: Some(cov) };
    }
    LatentMoments::empirical(&model.sample_c(rows, rng))
}
