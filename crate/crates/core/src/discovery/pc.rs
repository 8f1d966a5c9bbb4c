//! PC-stable skeleton search, collider orientation, and Meek's propagation rules.

use std::collections::BTreeMap;

use super::{Cpdag, FisherZ};
use crate::error::Result;
use crate::nn::Matrix;
use crate::scm::Dag;

/// `marks[a][b]` says the edge between `a` and `b` may point into `b`. Both marks set is an
/// undirected edge, one mark a directed edge, none no edge.
struct Pdag {
    marks: Vec<Vec<bool>>,
}

impl Pdag {
    fn from_skeleton(n: usize, adjacent: impl Fn(usize, usize) -> bool) -> Self {
        Self { marks: (0..n).map(|a| (0..n).map(|b| a != b && adjacent(a, b)).collect()).collect() }
    }

    fn n(&self) -> usize {
        self.marks.len()
    }

    fn adjacent(&self, a: usize, b: usize) -> bool {
        self.marks[a][b] || self.marks[b][a]
    }

    fn undirected(&self, a: usize, b: usize) -> bool {
        self.marks[a][b] && self.marks[b][a]
    }

    fn directed(&self, a: usize, b: usize) -> bool {
        self.marks[a][b] && !self.marks[b][a]
    }

    /// Turns `a – b` into `a → b`; no-op unless the edge is undirected.
    fn orient(&mut self, a: usize, b: usize) -> bool {
        if self.undirected(a, b) {
            self.marks[b][a] = false;
            true
        } else {
            false
        }
    }

    fn into_cpdag(self) -> Cpdag {
        let n = self.n();
        let mut g = Cpdag::empty(n);
        for a in 0..n {
            for b in 0..n {
                if self.directed(a, b) {
                    g.directed.insert((a, b));
                } else if a < b && self.undirected(a, b) {
                    g.undirected.insert((a, b));
                }
            }
        }
        g
    }
}

fn meek_pass(g: &mut Pdag) -> bool {
    let n = g.n();
    let mut changed = false;
    for a in 0..n {
        for b in 0..n {
            if !g.undirected(a, b) {
                continue;
            }
            // R1: c → a – b, c and b not adjacent.
            let r1 = (0..n).any(|c| c != b && g.directed(c, a) && !g.adjacent(c, b));
            // R2: a → c → b.
            let r2 = || (0..n).any(|c| g.directed(a, c) && g.directed(c, b));
            // R3: a – c → b and a – d → b with c, d not adjacent.
            let r3 = || {
                let kids: Vec<usize> = (0..n).filter(|&c| g.undirected(a, c) && g.directed(c, b)).collect();
                kids.iter().enumerate().any(|(i, &c)| kids[i + 1..].iter().any(|&d| !g.adjacent(c, d)))
            };
            // R4: a – d → c → b with a adjacent to c and d not adjacent to b.
            let r4 = || {
                (0..n).any(|d| {
                    d != b && g.undirected(a, d) && !g.adjacent(d, b) && (0..n).any(|c| g.directed(d, c) && g.directed(c, b) && g.adjacent(a, c))
                })
            };
            if r1 || r2() || r3() || r4() {
                changed |= g.orient(a, b);
            }
        }
    }
    changed
}

fn meek_closure(g: &mut Pdag) {
    while meek_pass(g) {}
}

/// Applies Meek's rules R1–R4 to a partially directed graph until nothing changes.
pub fn apply_meek_rules(graph: &Cpdag) -> Cpdag {
    let mut g = Pdag::from_skeleton(graph.n, |a, b| graph.status(a, b) != super::EdgeStatus::Absent);
    for &(a, b) in &graph.directed {
        g.marks[b][a] = false;
    }
    meek_closure(&mut g);
    g.into_cpdag()
}

/// The essential graph of the Markov equivalence class of `dag`.
pub fn cpdag_of_dag(dag: &Dag) -> Cpdag {
    let n = dag.n();
    let mut g = Pdag::from_skeleton(n, |a, b| dag.has_edge(a, b) || dag.has_edge(b, a));
    for k in 0..n {
        let pa = dag.parents(k);
        for (i, &p) in pa.iter().enumerate() {
            for &q in &pa[i + 1..] {
                if !g.adjacent(p, q) {
                    g.orient(p, k);
                    g.orient(q, k);
                    // Already-directed collider edges stay as they are.
                    g.marks[k][p] = false;
                    g.marks[k][q] = false;
                }
            }
        }
    }
    meek_closure(&mut g);
    g.into_cpdag()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcResult {
    pub cpdag: Cpdag,
    /// Separating set of every removed pair `(lo, hi)`.
    pub sepsets: BTreeMap<(usize, usize), Vec<usize>>,
    pub tests: usize,
}

/// Calls `f` on every `k`-subset of `items` in lexicographic order until it returns true.
fn any_subset(items: &[usize], k: usize, mut f: impl FnMut(&[usize]) -> bool) -> Option<Vec<usize>> {
    if k > items.len() {
        return None;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    let mut buf = vec![0; k];
    loop {
        for (b, &i) in buf.iter_mut().zip(&idx) {
            *b = items[i];
        }
        if f(&buf) {
            return Some(buf);
        }
        // Advance the rightmost index that still has room.
        let mut pos = k;
        while pos > 0 && idx[pos - 1] == items.len() - k + pos - 1 {
            pos -= 1;
        }
        if pos == 0 {
            return None;
        }
        pos -= 1;
        idx[pos] += 1;
        for q in pos + 1..k {
            idx[q] = idx[q - 1] + 1;
        }
    }
}

/// PC with the order-independent skeleton phase: conditioning sets at each size are drawn
/// from the adjacencies frozen at the start of that size.
pub fn pc_algorithm(data: &Matrix, alpha: f64) -> Result<PcResult> {
    let tester = FisherZ::new(data)?;
    let n = tester.n();
    let mut adj = vec![vec![true; n]; n];
    for (i, row) in adj.iter_mut().enumerate() {
        row[i] = false;
    }
    let mut sepsets = BTreeMap::new();
    let mut tests = 0;
    let mut level = 0;
    loop {
        let frozen: Vec<Vec<usize>> = (0..n).map(|i| (0..n).filter(|&j| adj[i][j]).collect()).collect();
        let mut any = false;
        for i in 0..n {
            for j in 0..n {
                if i == j || !adj[i][j] {
                    continue;
                }
                let others: Vec<usize> = frozen[i].iter().copied().filter(|&v| v != j).collect();
                if others.len() < level {
                    continue;
                }
                any = true;
                let mut err = None;
                let found = any_subset(&others, level, |s| {
                    tests += 1;
                    match tester.test(i, j, s, alpha) {
                        Ok(t) => t.independent,
                        Err(e) => {
                            err = Some(e);
                            true
                        }
                    }
                });
                if let Some(e) = err {
                    return Err(e);
                }
                if let Some(s) = found {
                    adj[i][j] = false;
                    adj[j][i] = false;
                    sepsets.insert((i.min(j), i.max(j)), s);
                }
            }
        }
        if !any {
            break;
        }
        level += 1;
    }

    let mut g = Pdag::from_skeleton(n, |a, b| adj[a][b]);
    for i in 0..n {
        for j in i + 1..n {
            if adj[i][j] {
                continue;
            }
            let sep = sepsets.get(&(i, j)).cloned().unwrap_or_default();
            for k in 0..n {
                if adj[i][k] && adj[j][k] && !sep.contains(&k) {
                    // First orientation wins on conflicts.
                    g.orient(i, k);
                    g.orient(j, k);
                }
            }
        }
    }
    meek_closure(&mut g);
    Ok(PcResult { cpdag: g.into_cpdag(), sepsets, tests })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn subsets_in_order() {
        let mut seen = Vec::new();
        any_subset(&[1, 4, 7, 9], 2, |s| {
            seen.push(s.to_vec());
            false
        });
        assert_eq!(seen, vec![vec![1, 4], vec![1, 7], vec![1, 9], vec![4, 7], vec![4, 9], vec![7, 9]]);
        let mut count = 0;
        any_subset(&[1, 2], 0, |s| {
            assert!(s.is_empty());
            count += 1;
            false
        });
        assert_eq!(count, 1);
        assert!(any_subset(&[1], 2, |_| true).is_none());
    }

    #[test]
    fn dag_cpdags() {
        let chain = Dag::new(3, vec![(0, 1), (1, 2)]).unwrap();
        assert_eq!(cpdag_of_dag(&chain), Cpdag::new(3, [], [(0, 1), (1, 2)]).unwrap());
        let collider = Dag::new(3, vec![(0, 2), (1, 2)]).unwrap();
        assert_eq!(cpdag_of_dag(&collider), Cpdag::new(3, [(0, 2), (1, 2)], []).unwrap());
        assert_eq!(cpdag_of_dag(&Dag::empty(4)), Cpdag::empty(4));
        // Collider plus a child: R1 orients 2 → 3.
        let g = Dag::new(4, vec![(0, 2), (1, 2), (2, 3)]).unwrap();
        assert_eq!(cpdag_of_dag(&g), Cpdag::new(4, [(0, 2), (1, 2), (2, 3)], []).unwrap());
    }

    fn sample(edges: &[(usize, usize, f64)], n: usize, rows: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Matrix::randn(rows, n, &mut rng);
        // Edges are listed in a topological order of their children.
        for r in 0..rows {
            for &(a, b, w) in edges {
                m[(r, b)] += w * m[(r, a)];
            }
        }
        m
    }

    #[test]
    fn recovers_chain_and_collider() {
        let chain = sample(&[(0, 1, 1.5), (1, 2, 1.5)], 3, 10_000, 1);
        let r = pc_algorithm(&chain, 0.01).unwrap();
        assert_eq!(r.cpdag, Cpdag::new(3, [], [(0, 1), (1, 2)]).unwrap());
        assert_eq!(r.sepsets.get(&(0, 2)), Some(&vec![1]));

        let collider = sample(&[(0, 2, 1.5), (1, 2, -1.2)], 3, 10_000, 2);
        let r = pc_algorithm(&collider, 0.01).unwrap();
        assert_eq!(r.cpdag, Cpdag::new(3, [(0, 2), (1, 2)], []).unwrap());
    }

    #[test]
    fn meek_rule_one() {
        let g = Cpdag::new(3, [(0, 1)], [(1, 2)]).unwrap();
        assert_eq!(apply_meek_rules(&g), Cpdag::new(3, [(0, 1), (1, 2)], []).unwrap());
    }
}
