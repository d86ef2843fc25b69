//! Graphs, shift operators, random edge/node samplers and the graph Fourier transform.

use std::collections::{HashSet, VecDeque};
use std::path::Path;
use std::sync::OnceLock;

use nalgebra::SymmetricEigen;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{is_symmetric, spectral_radius, to_complex, to_complex_vec, CMat, CVector, Mat, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

/// Weighted graph on nodes `0..n_nodes`. Undirected edges are stored once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    pub n_nodes: usize,
    pub edges: Vec<Edge>,
    #[serde(default)]
    pub directed: bool,
}

impl Graph {
    pub fn new(n_nodes: usize, edges: Vec<Edge>) -> Result<Self> {
        Self::with_direction(n_nodes, edges, false)
    }

    pub fn with_direction(n_nodes: usize, edges: Vec<Edge>, directed: bool) -> Result<Self> {
        if n_nodes == 0 {
            return Err(Error::invalid("graph must have at least one node"));
        }
        let mut seen = HashSet::new();
        for e in &edges {
            if e.i >= n_nodes || e.j >= n_nodes {
                return Err(Error::invalid(format!(
                    "edge ({}, {}) out of range for {} nodes",
                    e.i, e.j, n_nodes
                )));
            }
            if e.i == e.j {
                return Err(Error::invalid(format!("self-loop at node {}", e.i)));
            }
            if !e.weight.is_finite() {
                return Err(Error::invalid(format!("non-finite weight on edge ({}, {})", e.i, e.j)));
            }
            let key = if directed { (e.i, e.j) } else { (e.i.min(e.j), e.i.max(e.j)) };
            if !seen.insert(key) {
                return Err(Error::invalid(format!("duplicate edge ({}, {})", e.i, e.j)));
            }
        }
        Ok(Graph { n_nodes, edges, directed })
    }

    /// Unit-weight undirected graph from index pairs.
    pub fn from_pairs(n_nodes: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let edges = pairs.iter().map(|&(i, j)| Edge { i, j, weight: 1.0 }).collect();
        Self::new(n_nodes, edges)
    }

    pub fn path(n: usize) -> Self {
        let pairs: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        Self::from_pairs(n, &pairs).expect("path graph is valid")
    }

    pub fn ring(n: usize) -> Self {
        let mut pairs: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        if n > 2 {
            pairs.push((n - 1, 0));
        }
        Self::from_pairs(n, &pairs).expect("ring graph is valid")
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn adjacency(&self) -> Mat {
        let mut a = Mat::zeros(self.n_nodes, self.n_nodes);
        for e in &self.edges {
            a[(e.i, e.j)] += e.weight;
            if !self.directed {
                a[(e.j, e.i)] += e.weight;
            }
        }
        a
    }

    pub fn laplacian(&self) -> Mat {
        let a = self.adjacency();
        let mut l = -a.clone();
        for i in 0..self.n_nodes {
            l[(i, i)] = a.row(i).sum();
        }
        l
    }

    pub fn degrees(&self) -> Vec<f64> {
        let a = self.adjacency();
        (0..self.n_nodes).map(|i| a.row(i).sum()).collect()
    }

    /// Weak connectivity via BFS over the undirected skeleton.
    pub fn is_connected(&self) -> bool {
        let mut nbrs = vec![Vec::new(); self.n_nodes];
        for e in &self.edges {
            nbrs[e.i].push(e.j);
            nbrs[e.j].push(e.i);
        }
        let mut seen = vec![false; self.n_nodes];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = queue.pop_front() {
            for &v in &nbrs[u] {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    queue.push_back(v);
                }
            }
        }
        count == self.n_nodes
    }

    /// Parses `i j weight` lines (0-based, `#` starts a comment). Node count is max index + 1
    /// unless `n_nodes` is given.
    pub fn parse_edge_list(text: &str, n_nodes: Option<usize>) -> Result<Self> {
        let mut edges = Vec::new();
        let mut max_idx = 0usize;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(Error::invalid(format!(
                    "line {}: expected `i j weight`, found {} fields",
                    lineno + 1,
                    fields.len()
                )));
            }
            let parse_idx = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::invalid(format!("line {}: bad node index `{s}`", lineno + 1)))
            };
            let i = parse_idx(fields[0])?;
            let j = parse_idx(fields[1])?;
            let weight: f64 = fields[2]
                .parse()
                .map_err(|_| Error::invalid(format!("line {}: bad weight `{}`", lineno + 1, fields[2])))?;
            max_idx = max_idx.max(i).max(j);
            edges.push(Edge { i, j, weight });
        }
        let n = n_nodes.unwrap_or(if edges.is_empty() { 0 } else { max_idx + 1 });
        Self::new(n, edges)
    }

    pub fn load_edge_list(path: impl AsRef<Path>, n_nodes: Option<usize>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_edge_list(&text, n_nodes)
    }

    pub fn to_edge_list(&self) -> String {
        self.edges
            .iter()
            .map(|e| format!("{} {} {}\n", e.i, e.j, e.weight))
            .collect()
    }
}

/// Connection radius giving 64-node sensor graphs with roughly 236 edges.
pub const SENSOR_RADIUS_64: f64 = 0.22;

/// The 64-node benchmark surrogate (232 edges for seed 0).
pub fn benchmark_sensor_graph(seed: u64) -> Result<Graph> {
    gen_sensor_graph(64, SENSOR_RADIUS_64, seed)
}

/// Random geometric graph on the unit square with unit weights, redrawn until connected.
pub fn gen_sensor_graph(n: usize, radius: f64, seed: u64) -> Result<Graph> {
    const MAX_RETRIES: usize = 1000;
    if n < 2 {
        return Err(Error::invalid("sensor graph needs at least 2 nodes"));
    }
    if !(radius > 0.0) {
        return Err(Error::invalid("radius must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_RETRIES {
        let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.random(), rng.random())).collect();
        let mut pairs = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                let (dx, dy) = (pts[i].0 - pts[j].0, pts[i].1 - pts[j].1);
                if dx * dx + dy * dy < radius * radius {
                    pairs.push((i, j));
                }
            }
        }
        let g = Graph::from_pairs(n, &pairs)?;
        if g.is_connected() {
            return Ok(g);
        }
    }
    Err(Error::Generation(format!(
        "no connected graph with n={n}, radius={radius} after {MAX_RETRIES} draws"
    )))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    Adjacency,
    Laplacian,
    NormalizedLaplacian,
    Custom,
}

/// Eigendecomposition `S = U diag(λ) U⁻¹`.
#[derive(Debug, Clone)]
pub struct Evd {
    pub u: CMat,
    pub u_inv: CMat,
    pub eigenvalues: Vec<Complex64>,
    pub symmetric: bool,
}

#[derive(Debug, Clone)]
enum EvdFailure {
    Defective(f64),
    Solver(String),
}

#[derive(Debug, Clone)]
pub struct ShiftOperator {
    pub matrix: Mat,
    pub kind: ShiftKind,
    pub spectral_radius: f64,
    symmetric: bool,
    evd: OnceLock<std::result::Result<Evd, EvdFailure>>,
}

impl ShiftOperator {
    pub fn build(graph: &Graph, kind: ShiftKind) -> Result<Self> {
        if graph.n_nodes == 0 {
            return Err(Error::invalid("empty graph"));
        }
        let matrix = match kind {
            ShiftKind::Adjacency | ShiftKind::Custom => graph.adjacency(),
            ShiftKind::Laplacian => graph.laplacian(),
            ShiftKind::NormalizedLaplacian => {
                let l = graph.laplacian();
                let lmax = spectral_radius(&l);
                if lmax <= 0.0 {
                    return Err(Error::invalid("graph has no edges; Laplacian cannot be normalized"));
                }
                l / lmax
            }
        };
        Self::from_matrix(matrix, kind)
    }

    pub fn from_matrix(matrix: Mat, kind: ShiftKind) -> Result<Self> {
        if !matrix.is_square() || matrix.nrows() == 0 {
            return Err(Error::invalid("shift operator must be a nonempty square matrix"));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("shift operator has non-finite entries"));
        }
        let symmetric = is_symmetric(&matrix, 0.0);
        let rho = spectral_radius(&matrix);
        Ok(ShiftOperator { matrix, kind, spectral_radius: rho, symmetric, evd: OnceLock::new() })
    }

    pub fn custom(matrix: Mat) -> Result<Self> {
        Self::from_matrix(matrix, ShiftKind::Custom)
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn evd(&self) -> Result<&Evd> {
        match self.evd.get_or_init(|| compute_evd(&self.matrix, self.symmetric)) {
            Ok(e) => Ok(e),
            Err(EvdFailure::Defective(r)) => Err(Error::NotDiagonalizable(*r)),
            Err(EvdFailure::Solver(m)) => Err(Error::Eigen(m.clone())),
        }
    }

    /// `x̂ = U⁻¹ x`.
    pub fn gft(&self, x: &Vector) -> Result<CVector> {
        self.check_len(x.len())?;
        Ok(&self.evd()?.u_inv * to_complex_vec(x))
    }

    /// `x = U x̂`.
    pub fn inverse_gft(&self, xhat: &CVector) -> Result<CVector> {
        self.check_len(xhat.len())?;
        Ok(&self.evd()?.u * xhat)
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.n() {
            return Err(Error::Dimension { expected: self.n(), got: len });
        }
        Ok(())
    }

    /// Edge decomposition used by the Bernoulli mask model.
    pub fn mask_model(&self) -> Result<MaskModel> {
        MaskModel::from_operator(self)
    }
}

fn compute_evd(m: &Mat, symmetric: bool) -> std::result::Result<Evd, EvdFailure> {
    let n = m.nrows();
    if symmetric {
        let eig = SymmetricEigen::try_new(m.clone(), 1e-14, 0)
            .ok_or_else(|| EvdFailure::Solver("symmetric eigensolver did not converge".into()))?;
        let u = to_complex(&eig.eigenvectors);
        let u_inv = u.transpose();
        let eigenvalues = eig.eigenvalues.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        return Ok(Evd { u, u_inv, eigenvalues, symmetric: true });
    }
    let lambdas = m.complex_eigenvalues();
    let mc = to_complex(m);
    let mut u = CMat::zeros(n, n);
    for (k, lam) in lambdas.iter().enumerate() {
        let shifted = &mc - CMat::identity(n, n) * *lam;
        let svd = shifted.svd(false, true);
        let v_t = svd
            .v_t
            .ok_or_else(|| EvdFailure::Solver("SVD did not return right singular vectors".into()))?;
        let (imin, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
        let v = v_t.row(imin).adjoint();
        u.set_column(k, &v);
    }
    let u_inv = match u.clone().try_inverse() {
        Some(inv) => inv,
        None => return Err(EvdFailure::Defective(f64::INFINITY)),
    };
    let ident_err = (&u * &u_inv - CMat::identity(n, n)).iter().fold(0.0f64, |a, v| a.max(v.norm()));
    let lam_d = CMat::from_diagonal(&CVector::from_iterator(n, lambdas.iter().copied()));
    let recon = &u * lam_d * &u_inv - &mc;
    let scale = m.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let recon_err = recon.iter().fold(0.0f64, |a, v| a.max(v.norm())) / scale;
    let err = ident_err.max(recon_err);
    if !err.is_finite() || err > 1e-9 {
        return Err(EvdFailure::Defective(err));
    }
    Ok(Evd { u, u_inv, eigenvalues: lambdas.iter().copied().collect(), symmetric: false })
}

/// Symmetric operator written as `S = Σ_e S_e` with one term per undirected edge, where
/// `S_e = w (E_ij + E_ji)` for adjacency-type masks and `S_e = w (e_i − e_j)(e_i − e_j)ᵀ`
/// for Laplacian-type masks. A Bernoulli(p) realization keeps each term independently.
#[derive(Debug, Clone)]
pub struct MaskModel {
    pub n: usize,
    pub edges: Vec<(usize, usize, f64)>,
    pub laplacian: bool,
}

impl MaskModel {
    pub fn from_operator(s: &ShiftOperator) -> Result<Self> {
        if !s.is_symmetric() {
            return Err(Error::invalid("edge sampling requires a symmetric shift operator"));
        }
        let laplacian = match s.kind {
            ShiftKind::Adjacency => false,
            ShiftKind::Laplacian | ShiftKind::NormalizedLaplacian => true,
            ShiftKind::Custom => {
                return Err(Error::invalid("edge sampling is defined for adjacency or Laplacian operators"))
            }
        };
        let n = s.n();
        let m = &s.matrix;
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                let v = m[(i, j)];
                if v != 0.0 {
                    edges.push((i, j, if laplacian { -v } else { v }));
                }
            }
        }
        let model = MaskModel { n, edges, laplacian };
        let rebuilt = model.realization(&vec![true; model.edges.len()]);
        let scale = m.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        if crate::linalg::max_abs_diff(&rebuilt, m) > 1e-12 * scale {
            return Err(Error::invalid(if laplacian {
                "Laplacian operator rows do not sum to zero"
            } else {
                "adjacency operator has nonzero diagonal"
            }));
        }
        Ok(model)
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Operator with only the edges flagged in `keep`.
    pub fn realization(&self, keep: &[bool]) -> Mat {
        let mut s = Mat::zeros(self.n, self.n);
        for (&(i, j, w), &k) in self.edges.iter().zip(keep) {
            if !k {
                continue;
            }
            if self.laplacian {
                s[(i, i)] += w;
                s[(j, j)] += w;
                s[(i, j)] -= w;
                s[(j, i)] -= w;
            } else {
                s[(i, j)] += w;
                s[(j, i)] += w;
            }
        }
        s
    }

    pub fn full(&self) -> Mat {
        self.realization(&vec![true; self.edges.len()])
    }

    /// `S̄ = E[S_t] = p S`.
    pub fn mean(&self, p: f64) -> Mat {
        self.full() * p
    }

    /// `S_e M S_e` for one edge term, accumulated into `out` with factor `c`.
    pub(crate) fn add_edge_conjugation(&self, m: &Mat, c: f64, out: &mut Mat) {
        for &(i, j, w) in &self.edges {
            let f = c * w * w;
            if self.laplacian {
                let q = m[(i, i)] - m[(i, j)] - m[(j, i)] + m[(j, j)];
                let v = f * q;
                out[(i, i)] += v;
                out[(j, j)] += v;
                out[(i, j)] -= v;
                out[(j, i)] -= v;
            } else {
                out[(i, i)] += f * m[(j, j)];
                out[(i, j)] += f * m[(j, i)];
                out[(j, i)] += f * m[(i, j)];
                out[(j, j)] += f * m[(i, i)];
            }
        }
    }

    /// Edge term `S_e` as a dense matrix.
    pub fn edge_term(&self, e: usize) -> Mat {
        let mut keep = vec![false; self.edges.len()];
        keep[e] = true;
        self.realization(&keep)
    }
}

/// Draws i.i.d. Bernoulli(p) edge masks, symmetric by construction.
#[derive(Debug, Clone)]
pub struct EdgeSampler {
    model: MaskModel,
    p: f64,
    rng: ChaCha8Rng,
}

impl EdgeSampler {
    pub fn new(base: &ShiftOperator, p: f64, seed: u64) -> Result<Self> {
        Self::from_model(base.mask_model()?, p, ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn from_model(model: MaskModel, p: f64, rng: ChaCha8Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("edge probability {p} outside [0, 1)")));
        }
        Ok(EdgeSampler { model, p, rng })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn model(&self) -> &MaskModel {
        &self.model
    }

    pub fn sample_mask(&mut self) -> Vec<bool> {
        let p = self.p;
        (0..self.model.n_edges()).map(|_| self.rng.random::<f64>() < p).collect()
    }

    pub fn sample(&mut self) -> Mat {
        let mask = self.sample_mask();
        self.model.realization(&mask)
    }
}

/// Draws i.i.d. Bernoulli(p) node-selection sets.
#[derive(Debug, Clone)]
pub struct NodeSampler {
    n: usize,
    p: f64,
    rng: ChaCha8Rng,
}

impl NodeSampler {
    pub fn new(n: usize, p: f64, seed: u64) -> Result<Self> {
        Self::from_rng(n, p, ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn from_rng(n: usize, p: f64, rng: ChaCha8Rng) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("node sampler needs at least one node"));
        }
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::invalid(format!("node probability {p} outside (0, 1]")));
        }
        Ok(NodeSampler { n, p, rng })
    }

    pub fn sample_set(&mut self) -> Vec<bool> {
        let p = self.p;
        (0..self.n).map(|_| p >= 1.0 || self.rng.random::<f64>() < p).collect()
    }

    /// Diagonal 0/1 selection matrix.
    pub fn sample(&mut self) -> Mat {
        selection_matrix(&self.sample_set())
    }
}

pub fn selection_matrix(set: &[bool]) -> Mat {
    Mat::from_diagonal(&Vector::from_iterator(set.len(), set.iter().map(|&b| if b { 1.0 } else { 0.0 })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::spectral_norm;
    use proptest::prelude::*;
    use rand::Rng;

    fn single_edge() -> Graph {
        Graph::from_pairs(2, &[(0, 1)]).unwrap()
    }

    #[test]
    fn two_node_operators() {
        let g = single_edge();
        let a = ShiftOperator::build(&g, ShiftKind::Adjacency).unwrap();
        assert_eq!(a.matrix, Mat::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
        assert!((a.spectral_radius - 1.0).abs() < 1e-12);
        let l = ShiftOperator::build(&g, ShiftKind::Laplacian).unwrap();
        assert_eq!(l.matrix, Mat::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
        assert!((l.spectral_radius - 2.0).abs() < 1e-12);
    }

    #[test]
    fn normalized_laplacian_has_unit_radius() {
        let g = gen_sensor_graph(20, 0.4, 3).unwrap();
        let s = ShiftOperator::build(&g, ShiftKind::NormalizedLaplacian).unwrap();
        assert!((s.spectral_radius - 1.0).abs() < 1e-9);
        for i in 0..20 {
            assert!(s.matrix.row(i).sum().abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_edges() {
        assert!(Graph::from_pairs(2, &[(0, 0)]).is_err());
        assert!(Graph::from_pairs(2, &[(0, 1), (1, 0)]).is_err());
        assert!(Graph::from_pairs(2, &[(0, 2)]).is_err());
        assert!(Graph::new(0, vec![]).is_err());
    }

    #[test]
    fn edge_list_round_trip() {
        let text = "# comment\n0 1 1.5\n1 2 0.5 # trailing\n\n";
        let g = Graph::parse_edge_list(text, None).unwrap();
        assert_eq!(g.n_nodes, 3);
        assert_eq!(g.n_edges(), 2);
        let again = Graph::parse_edge_list(&g.to_edge_list(), None).unwrap();
        assert_eq!(g, again);
        assert!(Graph::parse_edge_list("0 1 1\n1 0 2\n", None).is_err());
        assert!(Graph::parse_edge_list("0 0 1\n", None).is_err());
    }

    #[test]
    fn gft_identity_operator() {
        let s = ShiftOperator::custom(Mat::identity(3, 3)).unwrap();
        let x = Vector::from_vec(vec![1.0, -2.0, 0.5]);
        let xh = s.gft(&x).unwrap();
        let back = s.inverse_gft(&xh).unwrap();
        for i in 0..3 {
            assert!((back[i].re - x[i]).abs() < 1e-12 && back[i].im.abs() < 1e-12);
        }
    }

    #[test]
    fn gft_of_eigenvector_is_unit() {
        let g = Graph::path(4);
        let s = ShiftOperator::build(&g, ShiftKind::Laplacian).unwrap();
        let evd = s.evd().unwrap();
        let u0: Vector = evd.u.column(0).map(|c| c.re);
        let xh = s.gft(&u0).unwrap();
        assert!((xh[0].norm() - 1.0).abs() < 1e-12);
        for k in 1..4 {
            assert!(xh[k].norm() < 1e-12);
        }
    }

    #[test]
    fn gft_nonsymmetric_and_defective() {
        let m = Mat::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let s = ShiftOperator::custom(m).unwrap();
        let x = Vector::from_vec(vec![0.3, -1.0, 2.0]);
        let back = s.inverse_gft(&s.gft(&x).unwrap()).unwrap();
        for i in 0..3 {
            assert!((back[i].re - x[i]).abs() < 1e-10 && back[i].im.abs() < 1e-10);
        }
        let jordan = ShiftOperator::custom(Mat::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0])).unwrap();
        assert!(matches!(jordan.evd(), Err(Error::NotDiagonalizable(_))));
    }

    #[test]
    fn sensor_graph_determinism_and_small_case() {
        let g = gen_sensor_graph(2, 2.0, 0).unwrap();
        assert_eq!(g.n_edges(), 1);
        let a = gen_sensor_graph(30, 0.35, 11).unwrap();
        let b = gen_sensor_graph(30, 0.35, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.is_connected());
        assert!(gen_sensor_graph(30, 1e-6, 1).is_err());
    }

    #[test]
    fn zero_probability_gives_empty_realization() {
        let g = Graph::ring(5);
        let s = ShiftOperator::build(&g, ShiftKind::Adjacency).unwrap();
        let mut es = EdgeSampler::new(&s, 0.0, 1).unwrap();
        for _ in 0..10 {
            assert_eq!(es.sample(), Mat::zeros(5, 5));
        }
        assert!(EdgeSampler::new(&s, 1.0, 1).is_err());
        assert!(EdgeSampler::new(&s, -0.1, 1).is_err());
    }

    #[test]
    fn single_edge_frequency() {
        let s = ShiftOperator::build(&single_edge(), ShiftKind::Adjacency).unwrap();
        let mut es = EdgeSampler::new(&s, 0.5, 42).unwrap();
        let draws = 100_000;
        let hits = (0..draws).filter(|_| es.sample()[(0, 1)] != 0.0).count();
        let frac = hits as f64 / draws as f64;
        assert!((frac - 0.5).abs() < 0.01, "{frac}");
    }

    #[test]
    fn laplacian_realizations_have_zero_row_sums_and_bounded_norm() {
        let g = gen_sensor_graph(12, 0.5, 5).unwrap();
        for kind in [ShiftKind::Adjacency, ShiftKind::Laplacian, ShiftKind::NormalizedLaplacian] {
            let s = ShiftOperator::build(&g, kind).unwrap();
            let mut es = EdgeSampler::new(&s, 0.6, 9).unwrap();
            for _ in 0..1000 {
                let st = es.sample();
                assert!(is_symmetric(&st, 0.0));
                assert!(spectral_norm(&st) <= s.spectral_radius + 1e-9);
                if kind != ShiftKind::Adjacency {
                    for i in 0..12 {
                        assert!(st.row(i).sum().abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn mean_adjacency_realization_approaches_p_a() {
        let g = Graph::path(4);
        let s = ShiftOperator::build(&g, ShiftKind::Adjacency).unwrap();
        let mut es = EdgeSampler::new(&s, 0.3, 2).unwrap();
        let trials = 40_000;
        let mut acc = Mat::zeros(4, 4);
        for _ in 0..trials {
            acc += es.sample();
        }
        acc /= trials as f64;
        assert!(crate::linalg::max_abs_diff(&acc, &(&s.matrix * 0.3)) < 0.01);
    }

    #[test]
    fn node_sampler_statistics() {
        let mut ns = NodeSampler::new(64, 0.25, 17).unwrap();
        let draws = 100_000;
        let mut total = 0.0;
        for _ in 0..draws {
            let p = ns.sample();
            assert_eq!(&p * &p, p);
            total += p.trace();
        }
        assert!((total / draws as f64 - 16.0).abs() < 0.5);
        let mut full = NodeSampler::new(5, 1.0, 0).unwrap();
        assert_eq!(full.sample(), Mat::identity(5, 5));
        assert!(NodeSampler::new(5, 0.0, 0).is_err());
    }

    proptest! {
        #[test]
        fn gft_round_trip_random_symmetric(seed in 0u64..1000, n in 2usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut m = Mat::zeros(n, n);
            for i in 0..n {
                for j in i..n {
                    let v: f64 = rng.random_range(-1.0..1.0);
                    m[(i, j)] = v;
                    m[(j, i)] = v;
                }
            }
            let s = ShiftOperator::custom(m).unwrap();
            let x = Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let back = s.inverse_gft(&s.gft(&x).unwrap()).unwrap();
            for i in 0..n {
                prop_assert!((back[i].re - x[i]).abs() < 1e-10);
                prop_assert!(back[i].im.abs() < 1e-10);
            }
        }

        #[test]
        fn samplers_are_seed_deterministic(seed in any::<u64>()) {
            let g = Graph::ring(6);
            let s = ShiftOperator::build(&g, ShiftKind::Laplacian).unwrap();
            let mut a = EdgeSampler::new(&s, 0.5, seed).unwrap();
            let mut b = EdgeSampler::new(&s, 0.5, seed).unwrap();
            for _ in 0..5 {
                prop_assert_eq!(a.sample(), b.sample());
            }
            let mut c = NodeSampler::new(6, 0.4, seed).unwrap();
            let mut d = NodeSampler::new(6, 0.4, seed).unwrap();
            prop_assert_eq!(c.sample_set(), d.sample_set());
        }
    }

    #[test]
    fn benchmark_surrogate_edge_count() {
        for seed in 0..10 {
            let g = benchmark_sensor_graph(seed).unwrap();
            assert!((180..=290).contains(&g.n_edges()), "seed {seed}: {} edges", g.n_edges());
            assert!(g.is_connected());
        }
        assert_eq!(benchmark_sensor_graph(0).unwrap().n_edges(), 232);
    }
}
