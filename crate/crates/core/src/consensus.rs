//! Gossip iterations: plain, multi-step and accelerated.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::netgraph::{spectral_summary, LaplacianMatrix, MixingMatrix, SpectralKind};

/// Stacked node iterates, one row per node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeState(DMatrix<f64>);

impl NodeState {
    pub fn from_matrix(x: DMatrix<f64>) -> Self {
        Self(x)
    }

    pub fn zeros(m: usize, n: usize) -> Self {
        Self(DMatrix::zeros(m, n))
    }

    /// Every row equal to `x`.
    pub fn consensual(m: usize, x: &DVector<f64>) -> Self {
        Self(DMatrix::from_fn(m, x.len(), |_, j| x[j]))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("ragged node state"));
        }
        Ok(Self(DMatrix::from_row_iterator(rows.len(), n, rows.iter().flatten().copied())))
    }

    pub fn node_count(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.0.row(i).transpose()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    /// Average of the rows.
    pub fn mean(&self) -> DVector<f64> {
        row_mean(&self.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Stack rows into one `m*n` vector (node-major).
    pub fn to_stacked(&self) -> DVector<f64> {
        DVector::from_row_iterator(self.0.len(), self.0.transpose().iter().copied())
    }

    pub fn from_stacked(v: &DVector<f64>, m: usize) -> Self {
        let n = v.len() / m;
        Self(DMatrix::from_row_iterator(m, n, v.iter().copied()))
    }
}

pub fn row_mean(x: &DMatrix<f64>) -> DVector<f64> {
    let m = x.nrows() as f64;
    DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / m))
}

/// Replace every row by the mean row.
pub fn mean_projection(x: &NodeState) -> NodeState {
    NodeState::consensual(x.node_count(), &x.mean())
}

/// `||X - mean(X)||_F`.
pub fn consensus_error(x: &NodeState) -> f64 {
    consensus_error_mat(x.as_matrix())
}

pub fn consensus_error_mat(x: &DMatrix<f64>) -> f64 {
    let mean = row_mean(x);
    let mut s = 0.0;
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            let d = x[(i, j)] - mean[j];
            s += d * d;
        }
    }
    s.sqrt()
}

fn center_columns(d: &mut DMatrix<f64>) {
    let mean = row_mean(d);
    for mut row in d.row_iter_mut() {
        row -= mean.transpose();
    }
}

pub fn consensus_step(m: &MixingMatrix, x: &NodeState) -> Result<NodeState> {
    if m.node_count() != x.node_count() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} rows", m.node_count()),
            found: format!("{} rows", x.node_count()),
        });
    }
    Ok(NodeState(m.apply(x.as_matrix())))
}

/// A static matrix or a per-round sequence (cycled when exhausted).
#[derive(Debug, Clone, Copy)]
pub enum MixingSource<'a> {
    Static(&'a MixingMatrix),
    Varying(&'a [MixingMatrix]),
}

impl<'a> MixingSource<'a> {
    pub fn at(&self, round: usize) -> &'a MixingMatrix {
        match self {
            Self::Static(m) => m,
            Self::Varying(ms) => &ms[round % ms.len()],
        }
    }

    pub fn node_count(&self) -> usize {
        self.at(0).node_count()
    }

    /// Total applications across the underlying matrices.
    pub fn applications(&self) -> u64 {
        match self {
            Self::Static(m) => m.applications(),
            Self::Varying(ms) => ms.iter().map(MixingMatrix::applications).sum(),
        }
    }
}

/// Mixes with a source and counts communication rounds.
#[derive(Debug)]
pub struct Gossip<'a> {
    source: MixingSource<'a>,
    rounds: u64,
    clock: usize,
}

impl<'a> Gossip<'a> {
    pub fn new(source: MixingSource<'a>) -> Self {
        Self { source, rounds: 0, clock: 0 }
    }

    /// Mix with the matrix of the current time step.
    pub fn mix(&mut self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.rounds += 1;
        self.source.at(self.clock).apply(x)
    }

    /// Advance the time step used by subsequent [`Gossip::mix`] calls.
    pub fn tick(&mut self) {
        self.clock += 1;
    }

    pub fn rounds(&self) -> u64 {
        self.rounds
    }

    pub fn clock(&self) -> usize {
        self.clock
    }

    pub fn source(&self) -> MixingSource<'a> {
        self.source
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusReport {
    pub iterations_run: usize,
    pub final_error: f64,
    /// `||X^k - mean(X^0)||_F` for k = 0..=T.
    pub errors: Vec<f64>,
    /// Ratio of successive errors; `None` once the error is at rounding level.
    pub per_step_ratio: Vec<Option<f64>>,
}

/// Errors below this fraction of the initial error are treated as exact.
pub const RATIO_FLOOR: f64 = 1e-12;

impl ConsensusReport {
    fn from_errors(errors: Vec<f64>) -> Self {
        let e0 = errors.first().copied().unwrap_or(0.0);
        let per_step_ratio = errors
            .windows(2)
            .map(|w| if w[0] > RATIO_FLOOR * e0 && w[0] > 0.0 { Some(w[1] / w[0]) } else { None })
            .collect();
        Self {
            iterations_run: errors.len().saturating_sub(1),
            final_error: errors.last().copied().unwrap_or(0.0),
            errors,
            per_step_ratio,
        }
    }

    /// First step whose error is at most `rel * errors[0]`.
    pub fn rounds_to_relative(&self, rel: f64) -> Option<usize> {
        let e0 = self.errors.first().copied()?;
        self.errors.iter().position(|&e| e <= rel * e0)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("# schema_version=1\nstep,error,ratio\n");
        for (k, e) in self.errors.iter().enumerate() {
            let r = if k == 0 { None } else { self.per_step_ratio[k - 1] };
            match r {
                Some(r) => s.push_str(&format!("{k},{e},{r}\n")),
                None => s.push_str(&format!("{k},{e},\n")),
            }
        }
        s
    }
}

/// `T` gossip steps `X <- M^t X`.
///
/// With doubly stochastic matrices the mean is invariant, so the iterate is
/// kept as `mean(X^0) + D^t` with the deviation `D` re-centred each step.
/// This is the same iteration, but the reported error does not suffer
/// cancellation once it is far below the entries of `X`.
pub fn run_consensus(source: MixingSource<'_>, x0: &NodeState, t: usize) -> (NodeState, ConsensusReport) {
    let mut gossip = Gossip::new(source);
    run_consensus_with(&mut gossip, x0, t)
}

pub fn run_consensus_with(gossip: &mut Gossip<'_>, x0: &NodeState, t: usize) -> (NodeState, ConsensusReport) {
    if t == 0 {
        return (x0.clone(), ConsensusReport::from_errors(vec![consensus_error(x0)]));
    }
    let mean = x0.mean();
    let mut d = x0.as_matrix().clone();
    center_columns(&mut d);
    let mut errors = Vec::with_capacity(t + 1);
    errors.push(d.norm());
    for _ in 0..t {
        d = gossip.mix(&d);
        gossip.tick();
        center_columns(&mut d);
        errors.push(d.norm());
    }
    for mut row in d.row_iter_mut() {
        row += mean.transpose();
    }
    (NodeState(d), ConsensusReport::from_errors(errors))
}

/// Nesterov-accelerated gossip driven by the Laplacian.
pub fn accelerated_consensus(w: &LaplacianMatrix, x0: &NodeState, t: usize) -> Result<NodeState> {
    accelerated_consensus_report(w, x0, t).map(|(x, _)| x)
}

pub fn accelerated_consensus_report(
    w: &LaplacianMatrix,
    x0: &NodeState,
    t: usize,
) -> Result<(NodeState, ConsensusReport)> {
    let s = spectral_summary(w.as_matrix(), SpectralKind::Laplacian)?;
    if s.lambda_min_plus <= 0.0 {
        return Err(Error::Disconnected);
    }
    let (lmax, lmin) = (s.lambda_max, s.lambda_min_plus);
    let beta = (lmax.sqrt() - lmin.sqrt()) / (lmax.sqrt() + lmin.sqrt());
    let wm = w.as_matrix();
    let mean = x0.mean();
    let target = NodeState::consensual(x0.node_count(), &mean);
    let err = |x: &DMatrix<f64>| (x - target.as_matrix()).norm();
    let mut x = x0.as_matrix().clone();
    let mut x_prev = x.clone();
    let mut errors = vec![err(&x)];
    for _ in 0..t {
        let y = &x + (&x - &x_prev) * beta;
        let next = &y - (wm * &y) / lmax;
        x_prev = std::mem::replace(&mut x, next);
        errors.push(err(&x));
    }
    Ok((NodeState(x), ConsensusReport::from_errors(errors)))
}

/// Contraction over windows of `tau` rounds: `lambda = 1 - max_k ||M_tau^k - J||_2`
/// with `M_tau^k = M^{k+tau-1} ... M^k` and `J = 11^T/m`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContractionEstimate {
    pub tau: usize,
    pub lambda: f64,
}

pub fn estimate_contraction(mats: &[MixingMatrix], tau: usize) -> Result<ContractionEstimate> {
    if mats.is_empty() || tau == 0 {
        return Err(Error::invalid("need at least one matrix and tau >= 1"));
    }
    let m = mats[0].node_count();
    let j = DMatrix::from_element(m, m, 1.0 / m as f64);
    let windows = if mats.len() >= tau { mats.len() - tau + 1 } else { 1 };
    let mut worst = 0.0f64;
    for k in 0..windows {
        let mut p = DMatrix::identity(m, m);
        for r in 0..tau {
            p = mats[(k + r) % mats.len()].as_matrix() * p;
        }
        worst = worst.max(linalg::spectral_norm(&(p - &j)));
    }
    Ok(ContractionEstimate { tau, lambda: 1.0 - worst })
}

/// Window length up to `max_tau` minimising the round cost `tau/lambda`.
pub fn best_contraction(mats: &[MixingMatrix], max_tau: usize) -> Result<ContractionEstimate> {
    let mut best: Option<ContractionEstimate> = None;
    for tau in 1..=max_tau.max(1) {
        let e = estimate_contraction(mats, tau)?;
        if e.lambda <= 0.0 {
            continue;
        }
        if best.map_or(true, |b| (tau as f64 / e.lambda) < (b.tau as f64 / b.lambda)) {
            best = Some(e);
        }
    }
    best.ok_or_else(|| Error::Certification(format!("no contraction within {max_tau} rounds")))
}
