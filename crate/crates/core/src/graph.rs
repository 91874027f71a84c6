//! Adjacency structures, neighbor averages and CAR precision matrices.
//!
//! Every spatial coupling in the crate (SIR contact weights, spillover
//! averages, the CAR/STCAR latent fields) is built from an
//! [`AdjacencyGraph`]: a symmetric 0/1 relation without self loops.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, parse_err, Error, Result};
use crate::scalar::Scalar;

/// What to do with a node that has no neighbors (`m_j = 0`).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IsolatedPolicy {
    /// Reject the graph.
    #[default]
    Error,
    /// Treat the node as its own single neighbor: `m_j := 1`, the neighbor
    /// average is the node's own value and its CAR conditional is
    /// independent with variance `sigma^2`.
    SelfLoop,
}

/// Symmetric 0/1 adjacency with sorted neighbor lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyGraph {
    neighbors: Vec<Vec<usize>>,
}

impl AdjacencyGraph {
    /// Builds a graph from unordered edges. Duplicate edges collapse; self
    /// loops and out-of-range indices are rejected.
    pub fn from_edges(n_nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n_nodes == 0 {
            return invalid("graph must have at least one node");
        }
        let mut sets = vec![BTreeSet::new(); n_nodes];
        for &(a, b) in edges {
            if a >= n_nodes || b >= n_nodes {
                return invalid(format!("edge ({a}, {b}) out of range for {n_nodes} nodes"));
            }
            if a == b {
                return invalid(format!("self loop at node {a}"));
            }
            sets[a].insert(b);
            sets[b].insert(a);
        }
        Ok(Self {
            neighbors: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    /// `m_j`, the number of neighbors of each node.
    pub fn degrees(&self) -> Vec<usize> {
        self.neighbors.iter().map(Vec::len).collect()
    }

    pub fn degree(&self, node: usize) -> usize {
        self.neighbors[node].len()
    }

    pub fn n_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Edges `(j, k)` with `j < k` in lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(j, nb)| nb.iter().filter(move |&&k| k > j).map(move |&k| (j, k)))
    }

    pub fn is_adjacent(&self, j: usize, k: usize) -> bool {
        self.neighbors[j].binary_search(&k).is_ok()
    }

    pub fn isolated_nodes(&self) -> Vec<usize> {
        (0..self.n_nodes()).filter(|&j| self.neighbors[j].is_empty()).collect()
    }

    /// Degrees after applying `policy` to isolated nodes.
    pub fn effective_degrees(&self, policy: IsolatedPolicy) -> Result<Vec<usize>> {
        self.neighbors
            .iter()
            .enumerate()
            .map(|(j, nb)| match (nb.len(), policy) {
                (0, IsolatedPolicy::Error) => Err(Error::IsolatedNode { node: j }),
                (0, IsolatedPolicy::SelfLoop) => Ok(1),
                (m, _) => Ok(m),
            })
            .collect()
    }

    /// Neighbors-of-neighbors, excluding the node itself and its direct
    /// neighbors.
    pub fn second_degree_neighbors(&self, node: usize) -> Vec<usize> {
        let first = &self.neighbors[node];
        let mut out = BTreeSet::new();
        for &k in first {
            for &l in &self.neighbors[k] {
                if l != node && first.binary_search(&l).is_err() {
                    out.insert(l);
                }
            }
        }
        out.into_iter().collect()
    }

    /// Text form: header `nodes <J>`, then one `j k` line per edge (`j < k`).
    pub fn to_text(&self) -> String {
        let mut s = format!("nodes {}\n", self.n_nodes());
        for (j, k) in self.edges() {
            let _ = writeln!(s, "{j} {k}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines
            .next()
            .ok_or_else(|| parse_err("adjacency", "empty file"))?;
        let n_nodes = match header.split_whitespace().collect::<Vec<_>>().as_slice() {
            ["nodes", n] => n
                .parse::<usize>()
                .map_err(|e| parse_err("adjacency header", e.to_string()))?,
            _ => return Err(parse_err("adjacency", format!("bad header line `{header}`"))),
        };
        let mut edges = Vec::new();
        for (i, line) in lines.enumerate() {
            let parts: Vec<_> = line.split_whitespace().collect();
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|e| parse_err(format!("adjacency edge line {}", i + 2), e.to_string()))
            };
            match parts.as_slice() {
                [a, b] => edges.push((parse(a)?, parse(b)?)),
                _ => {
                    return Err(parse_err(
                        "adjacency",
                        format!("expected `j k`, found `{line}`"),
                    ))
                }
            }
        }
        Self::from_edges(n_nodes, &edges)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Rook-adjacency lattice; node `(r, c)` has index `r * cols + c`.
pub fn rook_grid(rows: usize, cols: usize) -> Result<AdjacencyGraph> {
    if rows == 0 || cols == 0 {
        return invalid(format!("grid dimensions must be positive, got {rows}x{cols}"));
    }
    let mut edges = Vec::with_capacity(2 * rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let j = r * cols + c;
            if c + 1 < cols {
                edges.push((j, j + 1));
            }
            if r + 1 < rows {
                edges.push((j, j + cols));
            }
        }
    }
    AdjacencyGraph::from_edges(rows * cols, &edges)
}

/// Time points `0..n_times` with `t` adjacent to `t - 1` and `t + 1`.
pub fn temporal_path_graph(n_times: usize) -> Result<AdjacencyGraph> {
    if n_times == 0 {
        return invalid("number of time points must be positive");
    }
    let edges: Vec<_> = (1..n_times).map(|t| (t - 1, t)).collect();
    AdjacencyGraph::from_edges(n_times, &edges)
}

/// Per-node neighbor mean of every column of `field` (rows are nodes).
pub fn neighbor_average<S: Scalar>(
    graph: &AdjacencyGraph,
    field: &DMatrix<S>,
    policy: IsolatedPolicy,
) -> Result<DMatrix<S>> {
    if field.nrows() != graph.n_nodes() {
        return Err(Error::Dimension(format!(
            "field has {} rows but graph has {} nodes",
            field.nrows(),
            graph.n_nodes()
        )));
    }
    let degrees = graph.effective_degrees(policy)?;
    let mut out = DMatrix::zeros(field.nrows(), field.ncols());
    for t in 0..field.ncols() {
        for j in 0..graph.n_nodes() {
            let nb = graph.neighbors(j);
            out[(j, t)] = if nb.is_empty() {
                field[(j, t)]
            } else {
                nb.iter().fold(S::zero(), |acc, &k| acc + field[(k, t)]) / S::from_count(degrees[j])
            };
        }
    }
    Ok(out)
}

/// Symmetric sparse matrix in coordinate form, entries sorted by `(row, col)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsePrecision<S> {
    pub dim: usize,
    pub entries: Vec<(usize, usize, S)>,
    pub symmetric: bool,
}

impl<S: Scalar> SparsePrecision<S> {
    pub fn get(&self, row: usize, col: usize) -> S {
        self.entries
            .binary_search_by(|&(r, c, _)| (r, c).cmp(&(row, col)))
            .map(|i| self.entries[i].2)
            .unwrap_or_else(|_| S::zero())
    }

    pub fn diagonal(&self) -> Vec<S> {
        let mut d = vec![S::zero(); self.dim];
        for &(r, c, v) in &self.entries {
            if r == c {
                d[r] = v;
            }
        }
        d
    }

    pub fn mul_vec(&self, x: &[S]) -> Vec<S> {
        let mut y = vec![S::zero(); self.dim];
        for &(r, c, v) in &self.entries {
            y[r] = y[r] + v * x[c];
        }
        y
    }

    pub fn to_dense(&self) -> DMatrix<S> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for &(r, c, v) in &self.entries {
            m[(r, c)] = v;
        }
        m
    }
}

/// `M - rho C`: degrees on the diagonal, `-rho` for every adjacent pair.
pub fn car_precision<S: Scalar>(
    graph: &AdjacencyGraph,
    rho: S,
    policy: IsolatedPolicy,
) -> Result<SparsePrecision<S>> {
    if !(rho >= S::zero() && rho < S::one()) {
        return invalid(format!("rho must lie in [0, 1), got {rho}"));
    }
    let degrees = graph.effective_degrees(policy)?;
    let mut entries = Vec::with_capacity(graph.n_nodes() + 2 * graph.n_edges());
    for (j, &m) in degrees.iter().enumerate() {
        let nb = graph.neighbors(j);
        let split = nb.partition_point(|&k| k < j);
        for &k in &nb[..split] {
            entries.push((j, k, -rho));
        }
        entries.push((j, j, S::from_count(m)));
        for &k in &nb[split..] {
            entries.push((j, k, -rho));
        }
    }
    Ok(SparsePrecision {
        dim: graph.n_nodes(),
        entries,
        symmetric: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn smallest_grid_is_a_path() {
        let g = rook_grid(1, 2).unwrap();
        assert_eq!(g.n_nodes(), 2);
        assert_eq!(g.n_edges(), 1);
        assert_eq!(g.degrees(), vec![1, 1]);
    }

    #[test]
    fn grid_three_by_three_degrees() {
        let g = rook_grid(3, 3).unwrap();
        assert_eq!(g.n_nodes(), 9);
        assert_eq!(g.n_edges(), 12);
        let mut d = g.degrees();
        d.sort();
        assert_eq!(d, vec![2, 2, 2, 2, 3, 3, 3, 3, 4]);
        assert_eq!(g.degree(4), 4);
        assert_eq!(rook_grid(15, 15).unwrap().n_nodes(), 225);
    }

    #[test]
    fn zero_dimension_grid_rejected() {
        assert!(matches!(rook_grid(0, 3), Err(Error::InvalidArgument(_))));
        assert!(matches!(rook_grid(3, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn temporal_paths() {
        assert!(temporal_path_graph(0).is_err());
        let one = temporal_path_graph(1).unwrap();
        assert_eq!(one.isolated_nodes(), vec![0]);
        let three = temporal_path_graph(3).unwrap();
        assert_eq!(three.edges().collect::<Vec<_>>(), vec![(0, 1), (1, 2)]);
        assert_eq!(three.degrees(), vec![1, 2, 1]);
        assert_eq!(temporal_path_graph(30).unwrap().n_edges(), 29);
    }

    #[test]
    fn neighbor_average_examples() {
        let path = rook_grid(1, 2).unwrap();
        let f = DMatrix::from_column_slice(2, 1, &[4.0, 8.0]);
        let avg = neighbor_average(&path, &f, IsolatedPolicy::Error).unwrap();
        assert_eq!(avg.as_slice(), &[8.0, 4.0]);
        assert_eq!(f.as_slice(), &[4.0, 8.0]);

        let grid = rook_grid(3, 3).unwrap();
        let idx = DMatrix::from_fn(9, 1, |j, _| j as f64);
        let avg = neighbor_average(&grid, &idx, IsolatedPolicy::Error).unwrap();
        assert_eq!(avg[(4, 0)], 4.0);

        let c = DMatrix::from_element(9, 3, 2.5_f32);
        let avg = neighbor_average(&grid, &c, IsolatedPolicy::Error).unwrap();
        assert!(avg.iter().all(|&v| v == 2.5));
    }

    #[test]
    fn isolated_node_policy() {
        let g = AdjacencyGraph::from_edges(3, &[(0, 1)]).unwrap();
        let f = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 7.0]);
        assert!(matches!(
            neighbor_average(&g, &f, IsolatedPolicy::Error),
            Err(Error::IsolatedNode { node: 2 })
        ));
        let avg = neighbor_average(&g, &f, IsolatedPolicy::SelfLoop).unwrap();
        assert_eq!(avg.as_slice(), &[2.0, 1.0, 7.0]);
        let p = car_precision(&g, 0.5, IsolatedPolicy::SelfLoop).unwrap();
        assert_eq!(p.get(2, 2), 1.0);
        assert!(car_precision(&g, 0.5, IsolatedPolicy::Error).is_err());
    }

    #[test]
    fn car_precision_examples() {
        let path = rook_grid(1, 2).unwrap();
        let p = car_precision(&path, 0.5, IsolatedPolicy::Error).unwrap();
        assert_eq!(
            p.to_dense(),
            DMatrix::from_row_slice(2, 2, &[1.0, -0.5, -0.5, 1.0])
        );
        let grid = rook_grid(3, 3).unwrap();
        let p0 = car_precision(&grid, 0.0, IsolatedPolicy::Error).unwrap().to_dense();
        let deg: Vec<f64> = grid.degrees().iter().map(|&d| d as f64).collect();
        assert_eq!(p0, DMatrix::from_diagonal(&nalgebra::DVector::from_vec(deg)));

        let p9 = car_precision(&grid, 0.9, IsolatedPolicy::Error).unwrap().to_dense();
        let eig = p9.symmetric_eigenvalues();
        assert!(eig.min() > 0.0);
    }

    #[test]
    fn car_precision_rejects_bad_rho() {
        let g = rook_grid(2, 2).unwrap();
        assert!(car_precision(&g, 1.0, IsolatedPolicy::Error).is_err());
        assert!(car_precision(&g, -0.1, IsolatedPolicy::Error).is_err());
        assert!(car_precision(&g, f64::NAN, IsolatedPolicy::Error).is_err());
    }

    #[test]
    fn coordinate_order_is_sorted() {
        let g = rook_grid(3, 4).unwrap();
        let p = car_precision(&g, 0.3, IsolatedPolicy::Error).unwrap();
        let keys: Vec<_> = p.entries.iter().map(|&(r, c, _)| (r, c)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn adjacency_text_round_trip() {
        let g = rook_grid(3, 4).unwrap();
        let text = g.to_text();
        assert!(text.starts_with("nodes 12\n"));
        let back = AdjacencyGraph::from_text(&text).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.to_text(), text);
        assert!(AdjacencyGraph::from_text("nodes 2\n0 5\n").is_err());
        assert!(AdjacencyGraph::from_text("vertices 2\n").is_err());
    }

    #[test]
    fn second_degree_excludes_self_and_first() {
        let g = rook_grid(3, 3).unwrap();
        assert_eq!(g.second_degree_neighbors(0), vec![2, 4, 6]);
    }

    fn arb_graph() -> impl Strategy<Value = AdjacencyGraph> {
        (1usize..6, 1usize..6).prop_map(|(r, c)| rook_grid(r, c).unwrap())
    }

    proptest! {
        #[test]
        fn degrees_sum_to_twice_edges(g in arb_graph()) {
            prop_assert_eq!(g.degrees().iter().sum::<usize>(), 2 * g.n_edges());
        }

        #[test]
        fn neighbor_average_is_linear(
            (rows, cols) in (1usize..5, 2usize..5),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
            seed in any::<u64>(),
        ) {
            let g = rook_grid(rows, cols).unwrap();
            let n = g.n_nodes();
            let mut s = seed;
            let mut next = || {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            };
            let x = DMatrix::from_fn(n, 3, |_, _| next());
            let y = DMatrix::from_fn(n, 3, |_, _| next());
            let lhs = neighbor_average(&g, &(&x * a + &y * b), IsolatedPolicy::Error).unwrap();
            let rhs = neighbor_average(&g, &x, IsolatedPolicy::Error).unwrap() * a
                + neighbor_average(&g, &y, IsolatedPolicy::Error).unwrap() * b;
            prop_assert!((lhs - rhs).amax() < 1e-12);
        }

        #[test]
        fn car_precision_positive_definite(g in arb_graph(), rho in 0.0f64..0.999) {
            prop_assume!(g.n_nodes() > 1);
            let p = car_precision(&g, rho, IsolatedPolicy::Error).unwrap().to_dense();
            prop_assert_eq!(&p, &p.transpose());
            prop_assert!(p.clone().cholesky().is_some());
        }
    }
}
