//! Graphs, Laplacians, mixing matrices and their spectra.
//!
//! Nodes are 0-indexed in memory and 1-indexed in edge-list text.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::rng_from_seed;

/// Relative threshold below which an eigenvalue counts as zero.
pub const EIG_ZERO_REL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphFamily {
    Path,
    Cycle,
    Star,
    Complete,
    ErdosRenyi,
}

impl FromStr for GraphFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "path" => Ok(Self::Path),
            "cycle" => Ok(Self::Cycle),
            "star" => Ok(Self::Star),
            "complete" => Ok(Self::Complete),
            "erdos_renyi" => Ok(Self::ErdosRenyi),
            other => Err(Error::invalid(format!("unknown graph family `{other}`"))),
        }
    }
}

impl fmt::Display for GraphFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Path => "path",
            Self::Cycle => "cycle",
            Self::Star => "star",
            Self::Complete => "complete",
            Self::ErdosRenyi => "erdos_renyi",
        };
        f.write_str(s)
    }
}

/// Undirected simple graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    node_count: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl Graph {
    pub fn new(node_count: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if node_count == 0 {
            return Err(Error::invalid("graph needs at least one node"));
        }
        let mut set = BTreeSet::new();
        for (i, j) in edges {
            if i == j {
                return Err(Error::invalid(format!("self-loop at node {i}")));
            }
            if i >= node_count || j >= node_count {
                return Err(Error::invalid(format!("edge ({i},{j}) out of range for {node_count} nodes")));
            }
            set.insert((i.min(j), i.max(j)));
        }
        Ok(Self { node_count, edges: set })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.contains(&(i.min(j), i.max(j)))
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.node_count];
        for &(i, j) in &self.edges {
            d[i] += 1;
            d[j] += 1;
        }
        d
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.node_count];
        for &(i, j) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        adj
    }

    /// Breadth-first traversal from node 0.
    pub fn is_connected(&self) -> bool {
        connected(self.node_count, self.edges.iter().copied())
    }

    /// Edge list, one `i j` pair per line, 1-indexed, preceded by a node-count comment.
    pub fn to_edge_list(&self) -> String {
        let mut s = format!("# nodes {}\n", self.node_count);
        for &(i, j) in &self.edges {
            s.push_str(&format!("{} {}\n", i + 1, j + 1));
        }
        s
    }

    /// Parse [`Graph::to_edge_list`] output. Without a `# nodes` line the
    /// node count is the largest index seen.
    pub fn from_edge_list(text: &str) -> Result<Self> {
        let mut declared = None;
        let mut edges = Vec::new();
        let mut max_idx = 0;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let mut parts = rest.split_whitespace();
                if parts.next() == Some("nodes") {
                    let m = parts
                        .next()
                        .and_then(|v| v.parse::<usize>().ok())
                        .ok_or_else(|| Error::Parse(format!("line {}: bad node count", lineno + 1)))?;
                    declared = Some(m);
                }
                continue;
            }
            let nums: Vec<usize> = line
                .split_whitespace()
                .map(|t| t.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
            if nums.len() != 2 || nums[0] == 0 || nums[1] == 0 {
                return Err(Error::Parse(format!("line {}: expected two 1-indexed node ids", lineno + 1)));
            }
            max_idx = max_idx.max(nums[0]).max(nums[1]);
            edges.push((nums[0] - 1, nums[1] - 1));
        }
        Graph::new(declared.unwrap_or(max_idx), edges)
    }
}

fn connected(m: usize, edges: impl Iterator<Item = (usize, usize)>) -> bool {
    let mut adj = vec![Vec::new(); m];
    for (i, j) in edges {
        adj[i].push(j);
        adj[j].push(i);
    }
    let mut seen = vec![false; m];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    let mut count = 1;
    while let Some(v) = queue.pop_front() {
        for &w in &adj[v] {
            if !seen[w] {
                seen[w] = true;
                count += 1;
                queue.push_back(w);
            }
        }
    }
    count == m
}

/// Connectivity of the union of several graphs on the same node set.
pub fn union_is_connected(graphs: &[Graph]) -> bool {
    let Some(first) = graphs.first() else { return false };
    connected(first.node_count, graphs.iter().flat_map(|g| g.edges.iter().copied()))
}

pub fn generate_graph(family: GraphFamily, m: usize, seed: u64) -> Result<Graph> {
    if m < 2 {
        return Err(Error::invalid(format!("graph needs m >= 2 nodes, got {m}")));
    }
    let edges: Vec<(usize, usize)> = match family {
        GraphFamily::Path => (0..m - 1).map(|i| (i, i + 1)).collect(),
        GraphFamily::Cycle => {
            let mut e: Vec<_> = (0..m - 1).map(|i| (i, i + 1)).collect();
            if m > 2 {
                e.push((0, m - 1));
            }
            e
        }
        GraphFamily::Star => (1..m).map(|i| (0, i)).collect(),
        GraphFamily::Complete => (0..m).flat_map(|i| ((i + 1)..m).map(move |j| (i, j))).collect(),
        GraphFamily::ErdosRenyi => {
            let mut rng = rng_from_seed(seed);
            let p = (2.0 * (m as f64).ln() / m as f64).clamp(0.3, 1.0);
            for _ in 0..10_000 {
                let e: Vec<_> = (0..m)
                    .flat_map(|i| ((i + 1)..m).map(move |j| (i, j)))
                    .filter(|_| rng.random::<f64>() < p)
                    .collect();
                if connected(m, e.iter().copied()) {
                    return Graph::new(m, e);
                }
            }
            return Err(Error::Certification("no connected Erdos-Renyi sample".into()));
        }
    };
    Graph::new(m, edges)
}

/// Graph Laplacian: degree matrix minus adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianMatrix(DMatrix<f64>);

impl LaplacianMatrix {
    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn node_count(&self) -> usize {
        self.0.nrows()
    }
}

pub fn build_laplacian(g: &Graph) -> LaplacianMatrix {
    let m = g.node_count();
    let mut w = DMatrix::zeros(m, m);
    for (i, j) in g.edges() {
        w[(i, j)] = -1.0;
        w[(j, i)] = -1.0;
        w[(i, i)] += 1.0;
        w[(j, j)] += 1.0;
    }
    LaplacianMatrix(w)
}

/// Symmetric doubly stochastic matrix respecting a graph's sparsity.
///
/// Carries a counter of how many times it has been applied, used to audit
/// communication-round bookkeeping.
#[derive(Debug)]
pub struct MixingMatrix {
    m: DMatrix<f64>,
    applications: AtomicU64,
}

impl Clone for MixingMatrix {
    fn clone(&self) -> Self {
        Self { m: self.m.clone(), applications: AtomicU64::new(self.applications()) }
    }
}

impl PartialEq for MixingMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.m == other.m
    }
}

impl MixingMatrix {
    /// Wrap a matrix after checking symmetry and unit row sums.
    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self> {
        linalg::ensure_symmetric(&m, 1e-12)?;
        let ones = DVector::from_element(m.nrows(), 1.0);
        let dev = (&m * &ones - &ones).amax();
        if dev > 1e-10 {
            return Err(Error::invalid(format!("mixing matrix rows must sum to 1 (deviation {dev:e})")));
        }
        Ok(Self { m, applications: AtomicU64::new(0) })
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn node_count(&self) -> usize {
        self.m.nrows()
    }

    /// `M X`, counted as one application.
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.applications.fetch_add(1, Ordering::Relaxed);
        &self.m * x
    }

    pub fn applications(&self) -> u64 {
        self.applications.load(Ordering::Relaxed)
    }

    pub fn lambda2(&self) -> f64 {
        spectral_summary(&self.m, SpectralKind::Mixing).map(|s| s.lambda2_mix).unwrap_or(f64::NAN)
    }
}

/// Metropolis weights `1/(1+max(d_i,d_j))` on edges, remainder on the diagonal.
pub fn metropolis_mixing(g: &Graph) -> Result<MixingMatrix> {
    if !g.is_connected() {
        return Err(Error::Disconnected);
    }
    Ok(metropolis_unchecked(g))
}

/// Metropolis weights without the connectivity check (time-varying rounds
/// may be disconnected individually).
pub fn metropolis_unchecked(g: &Graph) -> MixingMatrix {
    let m = g.node_count();
    let d = g.degrees();
    let mut w = DMatrix::zeros(m, m);
    for (i, j) in g.edges() {
        let v = 1.0 / (1.0 + d[i].max(d[j]) as f64);
        w[(i, j)] = v;
        w[(j, i)] = v;
    }
    for i in 0..m {
        let off: f64 = (0..m).filter(|&j| j != i).map(|j| w[(i, j)]).sum();
        w[(i, i)] = 1.0 - off;
    }
    MixingMatrix { m: w, applications: AtomicU64::new(0) }
}

/// `I - W/lambda_max(W)`.
pub fn laplacian_mixing(w: &LaplacianMatrix) -> Result<MixingMatrix> {
    let lmax = linalg::eigenvalues(w.as_matrix()).last().copied().unwrap_or(0.0);
    if lmax <= 0.0 {
        return Err(Error::invalid("laplacian is the zero matrix"));
    }
    let m = w.node_count();
    let mat = DMatrix::identity(m, m) - w.as_matrix() / lmax;
    Ok(MixingMatrix { m: mat, applications: AtomicU64::new(0) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectralKind {
    Laplacian,
    Mixing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralSummary {
    pub lambda_max: f64,
    pub lambda_min_plus: f64,
    /// For a Laplacian: the value of `I - W/lambda_max`.
    pub lambda2_mix: f64,
    pub chi: f64,
    /// Ascending.
    pub eigenvalues: Vec<f64>,
}

pub fn spectral_summary(a: &DMatrix<f64>, kind: SpectralKind) -> Result<SpectralSummary> {
    linalg::ensure_symmetric(a, 1e-10)?;
    let eig = linalg::eigenvalues(a);
    let lambda_max = eig.last().copied().unwrap_or(0.0);
    let scale = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let thr = EIG_ZERO_REL * scale;
    let lambda_min_plus = eig.iter().copied().find(|&v| v > thr).unwrap_or(0.0);
    match kind {
        SpectralKind::Laplacian => {
            let (lambda2_mix, chi) = if lambda_min_plus > 0.0 {
                (1.0 - lambda_min_plus / lambda_max, lambda_max / lambda_min_plus)
            } else {
                (1.0, f64::INFINITY)
            };
            Ok(SpectralSummary { lambda_max, lambda_min_plus, lambda2_mix, chi, eigenvalues: eig })
        }
        SpectralKind::Mixing => {
            // Drop the eigenvalue closest to 1 (the consensus direction).
            let top = eig
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1 - 1.0).abs().total_cmp(&(b.1 - 1.0).abs()))
                .map(|(i, _)| i)
                .unwrap_or(0);
            let lambda2_mix = eig
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != top)
                .fold(0.0f64, |m, (_, v)| m.max(v.abs()));
            let chi = if lambda2_mix < 1.0 { 1.0 / (1.0 - lambda2_mix) } else { f64::INFINITY };
            Ok(SpectralSummary { lambda_max, lambda_min_plus, lambda2_mix, chi, eigenvalues: eig })
        }
    }
}

/// `W (x) I_n`, with node `i` occupying coordinates `i*n .. (i+1)*n`.
pub fn kron_lift(w: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let m = w.nrows();
    let mut out = DMatrix::zeros(m * n, m * n);
    for i in 0..m {
        for j in 0..m {
            let v = w[(i, j)];
            if v != 0.0 {
                for a in 0..n {
                    out[(i * n + a, j * n + a)] = v;
                }
            }
        }
    }
    out
}

/// Principal square root of a symmetric PSD matrix.
pub fn sqrt_psd(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    linalg::ensure_symmetric(w, 1e-10)?;
    let (vals, vecs) = linalg::sorted_eigen(w);
    let lmax = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let lmin = vals.iter().copied().fold(f64::INFINITY, f64::min);
    if lmin < -1e-8 * lmax {
        return Err(Error::Indefinite(lmin));
    }
    // Rounding-level eigenvalues are zeroed so that the kernel is preserved.
    let d = vals.map(|v| if v > 1e-12 * lmax { v.sqrt() } else { 0.0 });
    let s = &vecs * DMatrix::from_diagonal(&d) * vecs.transpose();
    Ok((&s + s.transpose()) * 0.5)
}

/// Rounds of a time-varying network.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSequence {
    pub graphs: Vec<Graph>,
    pub window: usize,
}

impl GraphSequence {
    pub fn constant(g: Graph, rounds: usize) -> Self {
        Self { graphs: vec![g; rounds.max(1)], window: 1 }
    }

    /// Every window of `window` consecutive rounds has a connected union
    /// (for sequences shorter than the window, the whole sequence).
    pub fn is_b_connected(&self) -> bool {
        if self.graphs.is_empty() || self.window == 0 {
            return false;
        }
        if self.graphs.len() <= self.window {
            return union_is_connected(&self.graphs);
        }
        self.graphs.windows(self.window).all(union_is_connected)
    }

    pub fn mixing_matrices(&self) -> Vec<MixingMatrix> {
        self.graphs.iter().map(metropolis_unchecked).collect()
    }
}

pub fn generate_time_varying(
    base: &Graph,
    rounds: usize,
    drop_prob: f64,
    window: usize,
    seed: u64,
) -> Result<GraphSequence> {
    if !base.is_connected() {
        return Err(Error::Disconnected);
    }
    if !(0.0..1.0).contains(&drop_prob) {
        return Err(Error::invalid(format!("drop_prob must be in [0,1), got {drop_prob}")));
    }
    if window == 0 || rounds == 0 {
        return Err(Error::invalid("window and rounds must be positive"));
    }
    let mut rng = rng_from_seed(seed);
    let m = base.node_count();
    let base_edges: Vec<_> = base.edges().collect();
    let mut graphs: Vec<Graph> = Vec::with_capacity(rounds);
    for k in 0..rounds {
        let mut kept = Vec::new();
        let mut dropped = Vec::new();
        for &e in &base_edges {
            if rng.random::<f64>() < drop_prob {
                dropped.push(e);
            } else {
                kept.push(e);
            }
        }
        dropped.shuffle(&mut rng);
        let start = (k + 1).saturating_sub(window);
        let ok = |kept: &[(usize, usize)]| {
            connected(
                m,
                graphs[start..k].iter().flat_map(|g| g.edges.iter().copied()).chain(kept.iter().copied()),
            )
        };
        let mut restored = dropped.into_iter();
        while !ok(&kept) {
            match restored.next() {
                Some(e) => kept.push(e),
                None => return Err(Error::Certification(format!("round {k}: window union disconnected"))),
            }
        }
        graphs.push(Graph::new(m, kept)?);
    }
    let seq = GraphSequence { graphs, window };
    if !seq.is_b_connected() {
        return Err(Error::Certification("sequence is not B-connected".into()));
    }
    Ok(seq)
}

pub fn matrix_to_csv(a: &DMatrix<f64>) -> String {
    let mut s = String::new();
    for i in 0..a.nrows() {
        let row: Vec<String> = (0..a.ncols()).map(|j| format!("{}", a[(i, j)])).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn matrix_from_csv(text: &str) -> Result<DMatrix<f64>> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split(',')
                .map(|t| t.trim().parse::<f64>().map_err(|e| Error::Parse(e.to_string())))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Parse("ragged matrix csv".into()));
    }
    Ok(DMatrix::from_row_iterator(rows.len(), ncols, rows.into_iter().flatten()))
}
