//! Neighbourhood structure for areal data: adjacency, degrees, the graph
//! Laplacian `R = D - W`, and connectivity.

use std::collections::VecDeque;
use std::sync::OnceLock;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

/// Contiguity rule used when building a regular lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Contiguity {
    /// Shared edges only (4 neighbours in the interior).
    #[default]
    Rook,
    /// Shared edges or corners (8 neighbours in the interior).
    Queen,
}

/// Undirected 0/1 adjacency over `n` areal units.
///
/// Edges are stored once as `(i, j)` with `i < j`, sorted and deduplicated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyGraph {
    n: usize,
    edges: Vec<(usize, usize)>,
}

impl AdjacencyGraph {
    /// Builds a graph from unordered pairs. Duplicates (in either orientation)
    /// collapse to one edge.
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut canonical = Vec::new();
        for (i, j) in edges {
            if i == j {
                return Err(Error::SelfLoop { i, j });
            }
            for index in [i, j] {
                if index >= n {
                    return Err(Error::IndexOutOfRange { index, n });
                }
            }
            canonical.push((i.min(j), i.max(j)));
        }
        canonical.sort_unstable();
        canonical.dedup();
        Ok(Self {
            n,
            edges: canonical,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.n];
        for &(i, j) in &self.edges {
            d[i] += 1;
            d[j] += 1;
        }
        d
    }

    pub fn neighbours(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(i, j) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        adj
    }

    /// Connected-component label for every node, labels assigned in order of
    /// the smallest node index in each component.
    pub fn component_labels(&self) -> Vec<usize> {
        let adj = self.neighbours();
        let mut label = vec![usize::MAX; self.n];
        let mut next = 0;
        let mut queue = VecDeque::new();
        for start in 0..self.n {
            if label[start] != usize::MAX {
                continue;
            }
            label[start] = next;
            queue.push_back(start);
            while let Some(v) = queue.pop_front() {
                for &w in &adj[v] {
                    if label[w] == usize::MAX {
                        label[w] = next;
                        queue.push_back(w);
                    }
                }
            }
            next += 1;
        }
        label
    }

    /// Sizes of the connected components, in label order.
    pub fn component_sizes(&self) -> Vec<usize> {
        let labels = self.component_labels();
        let k = labels.iter().copied().max().map_or(0, |m| m + 1);
        let mut sizes = vec![0; k];
        for l in labels {
            sizes[l] += 1;
        }
        sizes
    }
}

/// Regular `n0 x n0` lattice; node `row * n0 + col`.
pub fn lattice_graph(n0: usize, scheme: Contiguity) -> Result<AdjacencyGraph> {
    if n0 < 2 {
        return Err(Error::LatticeTooSmall(n0));
    }
    grid_graph(n0, n0, scheme)
}

/// Rectangular `rows x cols` lattice; node `row * cols + col`.
pub fn grid_graph(rows: usize, cols: usize, scheme: Contiguity) -> Result<AdjacencyGraph> {
    if rows == 0 || cols == 0 || rows * cols < 2 {
        return Err(Error::LatticeTooSmall(rows.min(cols)));
    }
    let id = |r: usize, c: usize| r * cols + c;
    let mut edges = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                edges.push((id(r, c), id(r, c + 1)));
            }
            if r + 1 < rows {
                edges.push((id(r, c), id(r + 1, c)));
            }
            if scheme == Contiguity::Queen && r + 1 < rows {
                if c + 1 < cols {
                    edges.push((id(r, c), id(r + 1, c + 1)));
                }
                if c > 0 {
                    edges.push((id(r, c), id(r + 1, c - 1)));
                }
            }
        }
    }
    AdjacencyGraph::new(rows * cols, edges)
}

/// Symmetric sparse matrix in coordinate form. Both triangles are stored,
/// entries sorted by `(row, col)` with no duplicates.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSymmetric {
    n: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl SparseSymmetric {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n);
        for &(i, j, a) in &self.entries {
            out[i] += a * v[j];
        }
        out
    }

    /// `self * m` for a dense `m` with `n` rows.
    pub fn mul_dense(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, m.ncols());
        for &(i, j, a) in &self.entries {
            for c in 0..m.ncols() {
                out[(i, c)] += a * m[(j, c)];
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, self.n);
        for &(i, j, a) in &self.entries {
            out[(i, j)] = a;
        }
        out
    }
}

/// The ICAR precision structure derived from an adjacency graph.
#[derive(Debug, Clone)]
pub struct IcarStructure {
    graph: AdjacencyGraph,
    laplacian: SparseSymmetric,
    degrees: Vec<usize>,
    num_components: usize,
    log_pdet: OnceLock<f64>,
}

/// Builds `R = D - W` and counts connected components.
pub fn build_icar(g: &AdjacencyGraph) -> Result<IcarStructure> {
    let n = g.n();
    if n == 0 {
        return Err(Error::EmptyGraph);
    }
    if n >= 2 && g.num_edges() == 0 {
        return Err(Error::NoEdges { n });
    }
    let degrees = g.degrees();
    let mut entries = Vec::with_capacity(n + 2 * g.num_edges());
    for (i, &d) in degrees.iter().enumerate() {
        entries.push((i, i, d as f64));
    }
    for &(i, j) in g.edges() {
        entries.push((i, j, -1.0));
        entries.push((j, i, -1.0));
    }
    entries.sort_unstable_by_key(|&(i, j, _)| (i, j));
    let num_components = g.component_sizes().len();
    Ok(IcarStructure {
        graph: g.clone(),
        laplacian: SparseSymmetric { n, entries },
        degrees,
        num_components,
        log_pdet: OnceLock::new(),
    })
}

impl IcarStructure {
    pub fn n(&self) -> usize {
        self.graph.n()
    }

    pub fn graph(&self) -> &AdjacencyGraph {
        &self.graph
    }

    pub fn laplacian(&self) -> &SparseSymmetric {
        &self.laplacian
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    pub fn num_components(&self) -> usize {
        self.num_components
    }

    /// Dimension of the Laplacian's null space; equals the component count.
    pub fn rank_deficiency(&self) -> usize {
        self.num_components
    }

    pub fn is_connected(&self) -> bool {
        self.num_components == 1
    }

    pub fn ensure_connected(&self) -> Result<()> {
        if self.is_connected() {
            Ok(())
        } else {
            Err(Error::Disconnected {
                components: self.num_components,
            })
        }
    }

    /// `v' R v`, summed over edges.
    pub fn quadratic_form(&self, v: &DVector<f64>) -> Result<f64> {
        if v.len() != self.n() {
            return Err(Error::DimensionMismatch {
                what: "quadratic_form vector",
                expected: self.n(),
                got: v.len(),
            });
        }
        Ok(self
            .graph
            .edges()
            .iter()
            .map(|&(i, j)| (v[i] - v[j]).powi(2))
            .sum())
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        self.laplacian.mul_vec(v)
    }

    /// Log pseudo-determinant of `R` (product of its nonzero eigenvalues),
    /// by the matrix-tree theorem: `|R|_+ = n * det(R with one row and
    /// column removed)`. Requires a connected graph. Cached.
    pub fn log_pseudo_det(&self) -> Result<f64> {
        self.ensure_connected()?;
        if let Some(v) = self.log_pdet.get() {
            return Ok(*v);
        }
        let n = self.n();
        let value = if n == 1 {
            0.0
        } else {
            let mut minor = DMatrix::zeros(n - 1, n - 1);
            for &(i, j, a) in self.laplacian.entries() {
                if i > 0 && j > 0 {
                    minor[(i - 1, j - 1)] = a;
                }
            }
            let chol = Cholesky::new(minor).ok_or(Error::NotPositiveDefiniteOnE)?;
            let l = chol.l_dirty();
            (n as f64).ln() + 2.0 * (0..n - 1).map(|k| l[(k, k)].ln()).sum::<f64>()
        };
        Ok(*self.log_pdet.get_or_init(|| value))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path(n: usize) -> AdjacencyGraph {
        AdjacencyGraph::new(n, (0..n - 1).map(|i| (i, i + 1))).unwrap()
    }

    #[test]
    fn two_node_path_laplacian() {
        let icar = build_icar(&path(2)).unwrap();
        let r = icar.laplacian().to_dense();
        assert_eq!(r, DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
        assert_eq!(icar.rank_deficiency(), 1);
    }

    #[test]
    fn four_cycle() {
        let g = AdjacencyGraph::new(4, [(0, 1), (1, 2), (2, 3), (3, 0)]).unwrap();
        let icar = build_icar(&g).unwrap();
        assert!(icar.degrees().iter().all(|&d| d == 2));
        let r = icar.laplacian().to_dense();
        assert!((0..4).all(|i| r[(i, i)] == 2.0));
        assert_eq!(icar.rank_deficiency(), 1);
    }

    #[test]
    fn two_disjoint_edges() {
        let g = AdjacencyGraph::new(4, [(0, 1), (2, 3)]).unwrap();
        let icar = build_icar(&g).unwrap();
        assert_eq!(icar.rank_deficiency(), 2);
        assert!(matches!(
            icar.ensure_connected(),
            Err(Error::Disconnected { components: 2 })
        ));
        assert!(icar.log_pseudo_det().is_err());
    }

    #[test]
    fn construction_errors() {
        assert!(matches!(
            build_icar(&AdjacencyGraph::new(0, []).unwrap()),
            Err(Error::EmptyGraph)
        ));
        assert!(matches!(
            build_icar(&AdjacencyGraph::new(3, []).unwrap()),
            Err(Error::NoEdges { n: 3 })
        ));
        assert!(matches!(
            AdjacencyGraph::new(3, [(1, 1)]),
            Err(Error::SelfLoop { .. })
        ));
        assert!(matches!(
            AdjacencyGraph::new(3, [(0, 3)]),
            Err(Error::IndexOutOfRange { index: 3, n: 3 })
        ));
    }

    #[test]
    fn duplicate_edges_collapse() {
        let g = AdjacencyGraph::new(3, [(0, 1), (1, 0), (1, 2), (0, 1)]).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (1, 2)]);
    }

    #[test]
    fn rook_lattices() {
        let g2 = lattice_graph(2, Contiguity::Rook).unwrap();
        assert_eq!(g2.n(), 4);
        assert_eq!(g2.num_edges(), 4);
        assert!(g2.degrees().iter().all(|&d| d == 2));

        let g3 = lattice_graph(3, Contiguity::Rook).unwrap();
        assert_eq!(g3.num_edges(), 12);
        assert_eq!(g3.degrees(), vec![2, 3, 2, 3, 4, 3, 2, 3, 2]);

        for n0 in 2..8 {
            let g = lattice_graph(n0, Contiguity::Rook).unwrap();
            assert_eq!(g.num_edges(), 2 * n0 * (n0 - 1));
        }
        assert!(matches!(
            lattice_graph(1, Contiguity::Rook),
            Err(Error::LatticeTooSmall(1))
        ));
    }

    #[test]
    fn queen_lattice_interior_has_eight_neighbours() {
        let g = lattice_graph(3, Contiguity::Queen).unwrap();
        assert_eq!(g.degrees()[4], 8);
        assert_eq!(g.degrees()[0], 3);
        // rook edges plus two diagonals per interior square
        assert_eq!(g.num_edges(), 12 + 2 * 4);
    }

    #[test]
    fn path_quadratic_form() {
        let icar = build_icar(&path(3)).unwrap();
        let v = DVector::from_vec(vec![-1.0, 0.0, 1.0]);
        assert_eq!(icar.quadratic_form(&v).unwrap(), 2.0);
        let c = DVector::from_element(3, 4.2);
        assert_eq!(icar.quadratic_form(&c).unwrap(), 0.0);
        assert!(icar.quadratic_form(&DVector::zeros(2)).is_err());
    }

    #[test]
    fn laplacian_rows_sum_to_zero() {
        let g = lattice_graph(4, Contiguity::Queen).unwrap();
        let icar = build_icar(&g).unwrap();
        let ones = DVector::from_element(16, 1.0);
        assert!(icar.apply(&ones).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn laplacian_entries_are_canonical() {
        let g = AdjacencyGraph::new(4, [(3, 2), (0, 3), (1, 0)]).unwrap();
        let icar = build_icar(&g).unwrap();
        let keys: Vec<_> = icar
            .laplacian()
            .entries()
            .iter()
            .map(|&(i, j, _)| (i, j))
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn pseudo_det_of_small_graphs() {
        // path on 2 nodes: eigenvalues {0, 2}
        let icar = build_icar(&path(2)).unwrap();
        assert!((icar.log_pseudo_det().unwrap() - 2f64.ln()).abs() < 1e-14);
        // 4-cycle: eigenvalues {0, 2, 2, 4}
        let g = AdjacencyGraph::new(4, [(0, 1), (1, 2), (2, 3), (3, 0)]).unwrap();
        let icar = build_icar(&g).unwrap();
        assert!((icar.log_pseudo_det().unwrap() - 16f64.ln()).abs() < 1e-13);
    }
}
