//! Penalty reformulation and gradient sliding for composite problems
//! `min_{x in Q} psi(x) = h(x) + f(x)` with `h` smooth and `f` nonsmooth.
//!
//! The nonsmooth part is reached through exact subgradients, noisy
//! subgradients or a two-point zeroth-order estimator. The smooth part is
//! linearised once per outer step.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};

use crate::consensus::consensus_error_mat;
use crate::error::{Error, Result};
use crate::linalg::eigenvalues;
use crate::oracle::{two_point_estimate, NoiseConfig, Objective, OracleSuite};
use crate::problems::{Domain, ProblemInstance};
use crate::record::{RecordKind, RunRecord, TraceRow};
use crate::rng::rng_from_seed;
use crate::NodeState;

/// Per-outer-step cap on inner iterations.
pub const INNER_CAP: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometryKind {
    Euclidean,
    EntropySimplex,
}

/// Prox setup: norm, distance-generating function and feasible set.
///
/// Euclidean: `V(x, u) = |u - x|^2 / 2` over all space, a box or the simplex.
/// Entropy: `V(x, u) = sum_j u_j ln(u_j / x_j)` over the simplex with the l1 norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BregmanGeometry {
    kind: GeometryKind,
    domain: Domain,
    dim: usize,
}

impl BregmanGeometry {
    pub fn new(kind: GeometryKind, domain: Domain, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("geometry dimension must be positive"));
        }
        match (kind, domain) {
            (GeometryKind::EntropySimplex, Domain::Simplex) => {}
            (GeometryKind::EntropySimplex, d) => {
                return Err(Error::invalid(format!("entropy prox has no closed form on {d:?}")));
            }
            (GeometryKind::Euclidean, Domain::Box { lo, hi }) if !(lo <= hi) => {
                return Err(Error::invalid(format!("empty box [{lo}, {hi}]")));
            }
            _ => {}
        }
        Ok(Self { kind, domain, dim })
    }

    pub fn euclidean(domain: Domain, dim: usize) -> Result<Self> {
        Self::new(GeometryKind::Euclidean, domain, dim)
    }

    pub fn entropy_simplex(dim: usize) -> Result<Self> {
        Self::new(GeometryKind::EntropySimplex, Domain::Simplex, dim)
    }

    pub fn kind(&self) -> GeometryKind {
        self.kind
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Primal norm (l2, or l1 for the entropy setup).
    pub fn norm(&self, v: &DVector<f64>) -> f64 {
        match self.kind {
            GeometryKind::Euclidean => v.norm(),
            GeometryKind::EntropySimplex => v.lp_norm(1),
        }
    }

    pub fn dual_norm(&self, v: &DVector<f64>) -> f64 {
        match self.kind {
            GeometryKind::Euclidean => v.norm(),
            GeometryKind::EntropySimplex => v.amax(),
        }
    }

    pub fn divergence(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        match self.kind {
            GeometryKind::Euclidean => 0.5 * (u - x).norm_squared(),
            GeometryKind::EntropySimplex => kl_divergence(x, u),
        }
    }

    /// Closest feasible point (Euclidean projection, or renormalisation for entropy).
    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        match (self.kind, self.domain) {
            (_, Domain::AllSpace) => x.clone(),
            (_, Domain::Box { lo, hi }) => x.map(|v| v.clamp(lo, hi)),
            (GeometryKind::Euclidean, Domain::Simplex) => project_simplex(x),
            (GeometryKind::EntropySimplex, Domain::Simplex) => {
                let c = x.map(|v| v.max(0.0));
                let s = c.sum();
                if s > 0.0 {
                    c / s
                } else {
                    self.center()
                }
            }
        }
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        match self.domain {
            Domain::AllSpace => x.iter().all(|v| v.is_finite()),
            Domain::Box { lo, hi } => x.iter().all(|&v| v >= lo - tol && v <= hi + tol),
            Domain::Simplex => x.iter().all(|&v| v >= -tol) && (x.sum() - 1.0).abs() <= tol,
        }
    }

    /// Analytic centre of `Q` (origin for all space).
    pub fn center(&self) -> DVector<f64> {
        match self.domain {
            Domain::AllSpace => DVector::zeros(self.dim),
            Domain::Box { lo, hi } => DVector::from_element(self.dim, 0.5 * (lo + hi)),
            Domain::Simplex => DVector::from_element(self.dim, 1.0 / self.dim as f64),
        }
    }

    /// Diameter of `Q` in the primal norm; `None` when unbounded.
    pub fn diameter(&self) -> Option<f64> {
        let n = self.dim as f64;
        match (self.kind, self.domain) {
            (_, Domain::AllSpace) => None,
            (_, Domain::Box { lo, hi }) => Some((hi - lo) * n.sqrt()),
            (GeometryKind::Euclidean, Domain::Simplex) => Some(if self.dim > 1 { 2f64.sqrt() } else { 0.0 }),
            (GeometryKind::EntropySimplex, Domain::Simplex) => Some(if self.dim > 1 { 2.0 } else { 0.0 }),
        }
    }

    /// `max sqrt(2 V(x, y))` over `Q`.
    pub fn bregman_diameter(&self) -> Option<f64> {
        match self.kind {
            GeometryKind::Euclidean => self.diameter(),
            GeometryKind::EntropySimplex => Some((2.0 * (self.dim as f64).ln()).sqrt()),
        }
    }

    /// Bound on `(E |e|_*^4)^{1/4}` for `e` uniform on the unit sphere.
    pub fn p_star(&self) -> f64 {
        match self.kind {
            GeometryKind::Euclidean => 1.0,
            GeometryKind::EntropySimplex => {
                let n = self.dim as f64;
                (2.0 * (2.0 * n).ln() / n).sqrt().min(1.0)
            }
        }
    }

    /// `argmin_u <g, u> + beta V(x, u) + beta p V(u_prev, u)` over `Q`.
    pub fn prox_step(&self, g: &DVector<f64>, x: &DVector<f64>, u_prev: &DVector<f64>, beta: f64, p: f64) -> DVector<f64> {
        let w = beta * (1.0 + p);
        match self.kind {
            GeometryKind::Euclidean => {
                let free = (x * beta + u_prev * (beta * p) - g) / w;
                self.project(&free)
            }
            GeometryKind::EntropySimplex => {
                let logits = DVector::from_fn(self.dim, |j, _| (beta * x[j].ln() + beta * p * u_prev[j].ln() - g[j]) / w);
                softmax(&logits)
            }
        }
    }
}

fn softmax(z: &DVector<f64>) -> DVector<f64> {
    let top = z.max();
    let e = z.map(|v| (v - top).exp());
    let s = e.sum();
    e / s
}

/// `sum_j u_j ln(u_j / x_j)` with `0 ln 0 = 0`.
pub fn kl_divergence(x: &DVector<f64>, u: &DVector<f64>) -> f64 {
    x.iter()
        .zip(u.iter())
        .map(|(&xj, &uj)| if uj > 0.0 { uj * (uj / xj).ln() } else { 0.0 })
        .sum()
}

/// Euclidean projection onto the probability simplex (sort-based).
pub fn project_simplex(v: &DVector<f64>) -> DVector<f64> {
    let mut s: Vec<f64> = v.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, &si) in s.iter().enumerate() {
        cum += si;
        let t = (cum - 1.0) / (i + 1) as f64;
        if si - t > 0.0 {
            theta = t;
        }
    }
    v.map(|x| (x - theta).max(0.0))
}

/// How many prox steps each outer iteration runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InnerRule {
    /// `ceil(M^2 N k^2 / (D L^2))`.
    Lan { m2: f64, d_tilde: f64 },
    /// `ceil(C N p*^2 (n M^2 + n^2 Delta^2 / r^2) k^2 / (D L^2))`.
    ZerothOrder { c: f64, p_star: f64, n: usize, m2: f64, delta: f64, r: f64, d_tilde: f64 },
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlidingSchedule {
    pub l: f64,
    pub n_outer: usize,
    pub inner: InnerRule,
    pub cap: usize,
}

impl SlidingSchedule {
    pub fn new(l: f64, n_outer: usize, inner: InnerRule) -> Result<Self> {
        if !(l > 0.0) || n_outer == 0 {
            return Err(Error::invalid(format!("need L > 0 and N >= 1, got L = {l}, N = {n_outer}")));
        }
        Ok(Self { l, n_outer, inner, cap: INNER_CAP })
    }

    pub fn p(&self, t: usize) -> f64 {
        t as f64 / 2.0
    }

    pub fn theta(&self, t: usize) -> f64 {
        let t = t as f64;
        2.0 * (t + 1.0) / (t * (t + 3.0))
    }

    pub fn beta(&self, k: usize) -> f64 {
        2.0 * self.l / k as f64
    }

    pub fn gamma(&self, k: usize) -> f64 {
        2.0 / (k as f64 + 1.0)
    }

    pub fn inner_steps(&self, k: usize) -> usize {
        let n = self.n_outer as f64;
        let k2 = (k * k) as f64;
        let l2 = self.l * self.l;
        let raw = match self.inner {
            InnerRule::Lan { m2, d_tilde } => m2 * n * k2 / (d_tilde * l2),
            InnerRule::ZerothOrder { c, p_star, n: dim, m2, delta, r, d_tilde } => {
                let d = dim as f64;
                c * n * p_star * p_star * (d * m2 + d * d * delta * delta / (r * r)) * k2 / (d_tilde * l2)
            }
            InnerRule::Fixed(t) => t as f64,
        };
        if raw.is_finite() {
            (raw.ceil() as usize).clamp(1, self.cap)
        } else {
            self.cap
        }
    }
}

/// Outer budget `ceil(sqrt(12 L R^2 / eps))` from the `12 L D^2 / (N (N + 1))` rate.
pub fn outer_budget(l: f64, r2: f64, eps: f64) -> usize {
    ((12.0 * l * r2 / eps).sqrt().ceil() as usize).max(1)
}

/// `h` and `f` of a composite problem, with `f*` for the residual column.
#[derive(Clone, Copy)]
pub struct Composite<'a> {
    pub smooth: &'a dyn Objective,
    pub nonsmooth: &'a dyn Objective,
    pub f_star: f64,
    /// For stacked decentralized vectors: node count (enables the consensus column).
    pub nodes: Option<usize>,
    /// Communication rounds per smooth gradient.
    pub rounds_per_smooth: u64,
}

impl<'a> Composite<'a> {
    pub fn new(smooth: &'a dyn Objective, nonsmooth: &'a dyn Objective, f_star: f64) -> Result<Self> {
        if smooth.dim() != nonsmooth.dim() {
            return Err(Error::DimensionMismatch {
                expected: smooth.dim().to_string(),
                found: nonsmooth.dim().to_string(),
            });
        }
        Ok(Self { smooth, nonsmooth, f_star, nodes: None, rounds_per_smooth: 0 })
    }

    /// Penalized decentralized problem: one round per `A^T A x` product.
    pub fn penalized(penalty: &'a PenaltyProblem, base: &'a StackedObjective<'a>, f_star: f64) -> Result<Self> {
        let mut c = Self::new(penalty, base, f_star)?;
        c.nodes = Some(penalty.node_count());
        c.rounds_per_smooth = 1;
        Ok(c)
    }

    pub fn dim(&self) -> usize {
        self.smooth.dim()
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        self.smooth.value(x) + self.nonsmooth.value(x)
    }
}

/// `f(x) = sum_i f_i(x_i)` on a node-major stacked vector.
pub struct StackedObjective<'a>(pub &'a ProblemInstance);

impl Objective for StackedObjective<'_> {
    fn dim(&self) -> usize {
        self.0.node_count() * self.0.dim
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        self.0.stacked_value(NodeState::from_stacked(x, self.0.node_count()).as_matrix())
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let g = self.0.stacked_gradient(NodeState::from_stacked(x, self.0.node_count()).as_matrix());
        NodeState::from_matrix(g).to_stacked()
    }
}

/// Smooth penalty `h(x) = c |A x|^2` on stacked vectors, `A` acting across nodes.
/// Gradient calls count `A^T A` products.
pub struct PenaltyProblem {
    ata: DMatrix<f64>,
    dim: usize,
    coef: f64,
    lambda_max: f64,
    products: AtomicU64,
}

impl PenaltyProblem {
    /// Coefficient `R_y^2 / eps`.
    pub fn new(a: &DMatrix<f64>, dim: usize, r_y: f64, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::invalid("eps must be positive"));
        }
        Self::with_coefficient(a, dim, r_y * r_y / eps)
    }

    pub fn with_coefficient(a: &DMatrix<f64>, dim: usize, coef: f64) -> Result<Self> {
        if a.nrows() == 0 || !a.is_square() || dim == 0 {
            return Err(Error::invalid("penalty matrix must be square and non-empty"));
        }
        if !(coef >= 0.0) {
            return Err(Error::invalid("penalty coefficient must be non-negative"));
        }
        let ata = a.transpose() * a;
        let lambda_max = eigenvalues(&ata).into_iter().fold(0.0, f64::max);
        Ok(Self { ata, dim, coef, lambda_max, products: AtomicU64::new(0) })
    }

    pub fn node_count(&self) -> usize {
        self.ata.nrows()
    }

    pub fn coefficient(&self) -> f64 {
        self.coef
    }

    /// `2 c lambda_max(A^T A)`.
    pub fn smooth_l(&self) -> f64 {
        2.0 * self.coef * self.lambda_max
    }

    pub fn products(&self) -> u64 {
        self.products.load(Ordering::Relaxed)
    }

    fn reshape(&self, x: &DVector<f64>) -> DMatrix<f64> {
        NodeState::from_stacked(x, self.node_count()).into_matrix()
    }
}

/// `make_penalty` with `A = sqrt(W)`: `h(x) = (R_y^2 / eps) |A x|^2`.
pub fn make_penalty(problem: &ProblemInstance, a: &DMatrix<f64>, r_y: f64, eps: f64) -> Result<PenaltyProblem> {
    if a.nrows() != problem.node_count() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} x {}", problem.node_count(), problem.node_count()),
            found: format!("{} x {}", a.nrows(), a.ncols()),
        });
    }
    PenaltyProblem::new(a, problem.dim, r_y, eps)
}

/// `R_y <= sqrt(M^2 / (m lambda_min^+(W)))`.
pub fn ry_bound(m_lip: f64, nodes: usize, lambda_min_plus: f64) -> f64 {
    (m_lip * m_lip / (nodes as f64 * lambda_min_plus)).sqrt()
}

impl Objective for PenaltyProblem {
    fn dim(&self) -> usize {
        self.node_count() * self.dim
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        let xm = self.reshape(x);
        self.coef * (xm.transpose() * &self.ata * &xm).trace()
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.products.fetch_add(1, Ordering::Relaxed);
        let xm = self.reshape(x);
        NodeState::from_matrix(&self.ata * xm * (2.0 * self.coef)).to_stacked()
    }
}

/// Oracle used inside the prox-sliding loop.
enum Inner<'s, 'a> {
    Exact,
    Stochastic { suite: OracleSuite<'a>, rng: &'s mut crate::rng::Rng },
    ZerothOrder { suite: OracleSuite<'a>, rng: &'s mut crate::rng::Rng, r: f64, shrink: f64, center: DVector<f64> },
}

struct Counters {
    smooth: u64,
    grad: u64,
    zo: u64,
}

fn guard(k: usize, x: &DVector<f64>) -> Result<()> {
    let norm = x.norm();
    if !norm.is_finite() || norm > crate::primal::DIVERGENCE_LIMIT {
        return Err(Error::Diverged { iteration: k, norm });
    }
    Ok(())
}

fn log_row(rec: &mut RunRecord, comp: &Composite<'_>, k: usize, c: &Counters, x: &DVector<f64>) {
    let consensus_error = comp
        .nodes
        .map(|m| consensus_error_mat(NodeState::from_stacked(x, m).as_matrix()))
        .unwrap_or(0.0);
    rec.push(TraceRow {
        iter: k,
        comm_rounds: c.smooth * comp.rounds_per_smooth,
        grad_calls: c.grad,
        f_residual: comp.value(x) - comp.f_star,
        consensus_error,
        zo_calls: c.zo,
        smooth_grad_calls: c.smooth,
    });
}

fn check_start(comp: &Composite<'_>, geom: &BregmanGeometry, x0: &DVector<f64>) -> Result<()> {
    if x0.len() != comp.dim() || geom.dim() != comp.dim() {
        return Err(Error::DimensionMismatch {
            expected: comp.dim().to_string(),
            found: format!("start {} / geometry {}", x0.len(), geom.dim()),
        });
    }
    if !geom.contains(x0, 1e-9) {
        return Err(Error::invalid("starting point is not feasible"));
    }
    if geom.kind() == GeometryKind::EntropySimplex && x0.iter().any(|&v| v <= 0.0) {
        return Err(Error::invalid("entropy geometry needs a strictly positive start"));
    }
    Ok(())
}

fn run_sliding(
    comp: &Composite<'_>,
    geom: &BregmanGeometry,
    x0: &DVector<f64>,
    sched: &SlidingSchedule,
    mut inner: Inner<'_, '_>,
    rec: &mut RunRecord,
    c: &mut Counters,
    iter_offset: usize,
) -> Result<DVector<f64>> {
    check_start(comp, geom, x0)?;
    let mut x = x0.clone();
    let mut x_bar = x0.clone();
    for k in 1..=sched.n_outer {
        let gamma = sched.gamma(k);
        let beta = sched.beta(k);
        let x_low = &x_bar * (1.0 - gamma) + &x * gamma;
        let gh = comp.smooth.gradient(&x_low);
        c.smooth += 1;
        let mut u = x.clone();
        let mut u_tilde = x.clone();
        for t in 1..=sched.inner_steps(k) {
            let fprime = match &mut inner {
                Inner::Exact => {
                    c.grad += 1;
                    comp.nonsmooth.gradient(&u)
                }
                Inner::Stochastic { suite, rng } => {
                    c.grad += 1;
                    suite.stochastic_gradient(&u, rng)
                }
                Inner::ZerothOrder { suite, rng, r, shrink, center } => {
                    c.zo += 2;
                    let at = &*center + (&u - &*center) * *shrink;
                    two_point_estimate(suite, &at, *r, rng).estimate
                }
            };
            let g = &gh + fprime;
            u = geom.prox_step(&g, &x, &u, beta, sched.p(t));
            let theta = sched.theta(t);
            u_tilde = &u_tilde * (1.0 - theta) + &u * theta;
        }
        x = u;
        x_bar = &x_bar * (1.0 - gamma) + &u_tilde * gamma;
        guard(iter_offset + k, &x_bar)?;
        log_row(rec, comp, iter_offset + k, c, &x_bar);
    }
    Ok(x_bar)
}

fn start_record(comp: &Composite<'_>, x0: &DVector<f64>, c: &Counters) -> Result<RunRecord> {
    guard(0, x0)?;
    let mut rec = RunRecord::new(RecordKind::Sliding);
    log_row(&mut rec, comp, 0, c, x0);
    Ok(rec)
}

fn zeros() -> Counters {
    Counters { smooth: 0, grad: 0, zo: 0 }
}

fn finish(mut rec: RunRecord, x: DVector<f64>) -> RunRecord {
    let n = x.len();
    rec.final_state = DMatrix::from_column_slice(1, n, x.as_slice());
    rec
}

/// Gradient sliding with exact subgradients of `f`. The output `x_bar_N` is
/// the last row of the record and `final_state` (as a row vector).
pub fn sliding(comp: &Composite<'_>, geom: &BregmanGeometry, x0: &DVector<f64>, sched: &SlidingSchedule) -> Result<RunRecord> {
    let mut c = zeros();
    let mut rec = start_record(comp, x0, &c)?;
    let x = run_sliding(comp, geom, x0, sched, Inner::Exact, &mut rec, &mut c, 0)?;
    Ok(finish(rec, x))
}

/// Sliding with stochastic subgradients `grad f(x) + noise`.
pub fn s_sliding(
    comp: &Composite<'_>,
    geom: &BregmanGeometry,
    x0: &DVector<f64>,
    sched: &SlidingSchedule,
    noise: NoiseConfig,
    seed: u64,
) -> Result<RunRecord> {
    let mut rng = rng_from_seed(seed);
    let mut c = zeros();
    let mut rec = start_record(comp, x0, &c)?;
    let inner = Inner::Stochastic { suite: OracleSuite::new(comp.nonsmooth, noise), rng: &mut rng };
    let x = run_sliding(comp, geom, x0, sched, inner, &mut rec, &mut c, 0)?;
    Ok(finish(rec, x))
}

/// Output of a multi-phase run.
#[derive(Debug, Clone)]
pub struct PhasedRun {
    pub record: RunRecord,
    /// Phase outputs, starting with the initial point.
    pub phase_points: Vec<DVector<f64>>,
    pub phase_budgets: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RestartSettings {
    pub mu: f64,
    /// Bound on `|x0 - x*|`.
    pub r0: f64,
    /// Subgradient bound of `f`.
    pub m_lip: f64,
    pub phases: usize,
}

/// Phase `p` of restarted sliding: target `mu R_p^2 / 4` with `R_p^2 = R_0^2 / 2^p`.
pub fn restart_phase_schedule(l: f64, s: &RestartSettings, noise_sigma: f64, phase: usize) -> Result<SlidingSchedule> {
    let r2 = s.r0 * s.r0 / 2f64.powi(phase as i32);
    let eps = s.mu * r2 / 4.0;
    let n = outer_budget(l, r2, eps);
    SlidingSchedule::new(
        l,
        n,
        InnerRule::Lan { m2: s.m_lip * s.m_lip + noise_sigma * noise_sigma, d_tilde: 0.75 * r2 },
    )
}

/// Restarted stochastic sliding for strongly convex `psi` on a bounded set.
pub fn rs_sliding(
    comp: &Composite<'_>,
    geom: &BregmanGeometry,
    x0: &DVector<f64>,
    l: f64,
    settings: RestartSettings,
    noise: NoiseConfig,
    seed: u64,
) -> Result<PhasedRun> {
    if !(settings.mu > 0.0) {
        return Err(Error::invalid("restarted sliding needs mu > 0"));
    }
    if geom.diameter().is_none() {
        return Err(Error::invalid("restarted sliding needs a bounded feasible set"));
    }
    let mut rng = rng_from_seed(seed);
    let mut c = zeros();
    let mut rec = start_record(comp, x0, &c)?;
    let mut y = x0.clone();
    let mut points = vec![y.clone()];
    let mut budgets = Vec::new();
    let mut offset = 0;
    for phase in 0..settings.phases {
        let sched = restart_phase_schedule(l, &settings, noise.sigma, phase)?;
        let inner = Inner::Stochastic { suite: OracleSuite::new(comp.nonsmooth, noise), rng: &mut rng };
        y = run_sliding(comp, geom, &y, &sched, inner, &mut rec, &mut c, offset)?;
        offset += sched.n_outer;
        budgets.push(sched.n_outer);
        points.push(y.clone());
    }
    Ok(PhasedRun { record: finish(rec, y), phase_points: points, phase_budgets: budgets })
}

/// Zeroth-order access to `f`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZoSettings {
    /// Smoothing radius.
    pub r: f64,
    pub noise: NoiseConfig,
    /// Constant in the inner schedule.
    pub c: f64,
    /// Bound `M` on the subgradients of `f`.
    pub m_lip: f64,
}

impl ZoSettings {
    pub fn new(r: f64, m_lip: f64) -> Self {
        Self { r, noise: NoiseConfig::default(), c: 0.1, m_lip }
    }

    pub fn inner_rule(&self, geom: &BregmanGeometry, d_tilde: f64) -> InnerRule {
        InnerRule::ZerothOrder {
            c: self.c,
            p_star: geom.p_star(),
            n: geom.dim(),
            m2: self.m_lip * self.m_lip,
            delta: self.noise.delta,
            r: self.r,
            d_tilde,
        }
    }

    /// Evaluation points are pulled towards the centre by `1 - r / D_Q`.
    pub fn shrink_factor(&self, geom: &BregmanGeometry) -> f64 {
        match geom.diameter() {
            Some(d) if d > 0.0 => (1.0 - self.r / d).max(0.0),
            _ => 1.0,
        }
    }
}

fn validate_zo(zo: &ZoSettings) -> Result<()> {
    if !(zo.r > 0.0) || !(zo.c > 0.0) {
        return Err(Error::invalid(format!("need r > 0 and C > 0, got r = {}, C = {}", zo.r, zo.c)));
    }
    Ok(())
}

/// zoSA: sliding with the two-point estimator of `f` at the shrunk point.
pub fn zo_sliding(
    comp: &Composite<'_>,
    geom: &BregmanGeometry,
    x0: &DVector<f64>,
    sched: &SlidingSchedule,
    zo: &ZoSettings,
    seed: u64,
) -> Result<RunRecord> {
    validate_zo(zo)?;
    let mut rng = rng_from_seed(seed);
    let mut c = zeros();
    let mut rec = start_record(comp, x0, &c)?;
    let inner = Inner::ZerothOrder {
        suite: OracleSuite::new(comp.nonsmooth, zo.noise),
        rng: &mut rng,
        r: zo.r,
        shrink: zo.shrink_factor(geom),
        center: geom.center(),
    };
    let x = run_sliding(comp, geom, x0, sched, inner, &mut rec, &mut c, 0)?;
    Ok(finish(rec, x))
}

/// `N_0 = 2 ceil(sqrt(5 L / mu))`.
pub fn m_zo_outer_budget(l: f64, mu: f64) -> usize {
    2 * (5.0 * l / mu).sqrt().ceil() as usize
}

/// M-zoSA: phase `i = 1..=I` runs zoSA from the previous output with
/// `D = rho0 / (mu 2^i)` and `N_0` outer steps.
#[allow(clippy::too_many_arguments)]
pub fn m_zo_sliding(
    comp: &Composite<'_>,
    geom: &BregmanGeometry,
    y0: &DVector<f64>,
    l: f64,
    mu: f64,
    rho0: f64,
    phases: usize,
    zo: &ZoSettings,
    seed: u64,
) -> Result<PhasedRun> {
    validate_zo(zo)?;
    if !(mu > 0.0) || !(rho0 > 0.0) {
        return Err(Error::invalid(format!("need mu > 0 and rho0 > 0, got mu = {mu}, rho0 = {rho0}")));
    }
    let n0 = m_zo_outer_budget(l, mu);
    let mut rng = rng_from_seed(seed);
    let mut c = zeros();
    let mut rec = start_record(comp, y0, &c)?;
    let mut y = y0.clone();
    let mut points = vec![y.clone()];
    let mut budgets = Vec::new();
    for i in 1..=phases {
        let d_tilde = rho0 / (mu * 2f64.powi(i as i32));
        let sched = SlidingSchedule::new(l, n0, zo.inner_rule(geom, d_tilde))?;
        let inner = Inner::ZerothOrder {
            suite: OracleSuite::new(comp.nonsmooth, zo.noise),
            rng: &mut rng,
            r: zo.r,
            shrink: zo.shrink_factor(geom),
            center: geom.center(),
        };
        y = run_sliding(comp, geom, &y, &sched, inner, &mut rec, &mut c, (i - 1) * n0)?;
        budgets.push(n0);
        points.push(y.clone());
    }
    Ok(PhasedRun { record: finish(rec, y), phase_points: points, phase_budgets: budgets })
}

/// Noiseless decentralized l1 regression with its penalty, scaled so that
/// `L R^2 = 1` and `M R = mr` for the start `x0 = 0`. The optimum is the
/// consensual planted point with value 0.
pub struct PlantedPenalty {
    pub problem: ProblemInstance,
    pub penalty: PenaltyProblem,
    /// Stacked optimum.
    pub x_star: DVector<f64>,
    pub m_lip: f64,
    pub r2: f64,
}

impl PlantedPenalty {
    pub fn build(graph: &crate::netgraph::Graph, n: usize, samples: usize, mr: f64, seed: u64) -> Result<Self> {
        use crate::problems::{make_nonsmooth_with, NodeFunction, NonsmoothKind, NonsmoothOptions};
        let m = graph.node_count();
        let opts = NonsmoothOptions { samples_per_node: samples, noise: 0.0, weight: Some(1.0) };
        let (raw, planted) = make_nonsmooth_with(m, n, NonsmoothKind::L1Regression, opts, seed)?;
        let x_star = NodeState::consensual(m, &planted).to_stacked();
        let r2 = x_star.norm_squared();
        let unit = raw.stacked_lipschitz();
        let weight = mr / (unit * r2.sqrt());
        let nodes = raw
            .nodes
            .into_iter()
            .map(|f| match f {
                NodeFunction::L1Regression { z, b, .. } => NodeFunction::l1_regression(z, b, weight),
                other => other,
            })
            .collect();
        let problem = ProblemInstance::new(nodes, Domain::AllSpace)?;
        let w = crate::netgraph::build_laplacian(graph);
        let a = crate::netgraph::sqrt_psd(w.as_matrix())?;
        let lmax = eigenvalues(w.as_matrix()).into_iter().fold(0.0, f64::max);
        let penalty = PenaltyProblem::with_coefficient(&a, n, 1.0 / (2.0 * lmax * r2))?;
        let m_lip = problem.stacked_lipschitz();
        Ok(Self { problem, penalty, x_star, m_lip, r2 })
    }

    pub fn geometry(&self) -> Result<BregmanGeometry> {
        BregmanGeometry::euclidean(Domain::AllSpace, self.x_star.len())
    }

    /// Sliding from zero with budgets chosen for accuracy `eps`.
    pub fn run(&self, eps: f64) -> Result<RunRecord> {
        let base = StackedObjective(&self.problem);
        let comp = Composite::penalized(&self.penalty, &base, 0.0)?;
        let sched = accuracy_schedule(self.penalty.smooth_l(), self.r2, self.m_lip, eps)?;
        sliding(&comp, &self.geometry()?, &DVector::zeros(self.x_star.len()), &sched)
    }
}

/// Outer budget and inner rule for accuracy `eps` given `L`, `R^2` and `M`.
pub fn accuracy_schedule(l: f64, r2: f64, m_lip: f64, eps: f64) -> Result<SlidingSchedule> {
    if !(eps > 0.0) {
        return Err(Error::invalid("eps must be positive"));
    }
    SlidingSchedule::new(l, outer_budget(l, r2, eps), InnerRule::Lan { m2: m_lip * m_lip, d_tilde: 0.75 * r2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{build_laplacian, generate_graph, spectral_summary, sqrt_psd, GraphFamily, SpectralKind};
    use crate::problems::NodeFunction;
    use crate::rng::Rng;
    use proptest::prelude::*;
    use rand::Rng as _;

    struct Quad {
        q: DVector<f64>,
        mu: f64,
    }

    impl Objective for Quad {
        fn dim(&self) -> usize {
            self.q.len()
        }
        fn value(&self, x: &DVector<f64>) -> f64 {
            0.5 * self.mu * (x - &self.q).norm_squared()
        }
        fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
            (x - &self.q) * self.mu
        }
    }

    struct Zero(usize);

    impl Objective for Zero {
        fn dim(&self) -> usize {
            self.0
        }
        fn value(&self, _: &DVector<f64>) -> f64 {
            0.0
        }
        fn gradient(&self, _: &DVector<f64>) -> DVector<f64> {
            DVector::zeros(self.0)
        }
    }

    fn random_simplex(n: usize, rng: &mut Rng) -> DVector<f64> {
        let v = DVector::from_fn(n, |_, _| rng.random::<f64>() + 1e-3);
        let s = v.sum();
        v / s
    }

    #[test]
    fn schedule_values() {
        let s = SlidingSchedule::new(3.0, 10, InnerRule::Fixed(4)).unwrap();
        assert_eq!(s.p(1), 0.5);
        assert_eq!(s.theta(1), 1.0);
        assert_eq!(s.beta(1), 6.0);
        assert_eq!(s.gamma(1), 1.0);
        assert_eq!(s.inner_steps(3), 4);
        let lan = SlidingSchedule::new(2.0, 4, InnerRule::Lan { m2: 1.0, d_tilde: 1.0 }).unwrap();
        assert_eq!(lan.inner_steps(3), 9);
        let zero = SlidingSchedule::new(2.0, 4, InnerRule::Lan { m2: 0.0, d_tilde: 1.0 }).unwrap();
        assert_eq!(zero.inner_steps(5), 1);
        assert!(SlidingSchedule::new(0.0, 4, InnerRule::Fixed(1)).is_err());
        assert_eq!(m_zo_outer_budget(5.0, 1.0), 10);
    }

    #[test]
    fn simplex_projection_known_values() {
        let p = project_simplex(&DVector::from_row_slice(&[0.5, 0.5, 0.5]));
        assert!((p - DVector::from_element(3, 1.0 / 3.0)).amax() < 1e-15);
        let p = project_simplex(&DVector::from_row_slice(&[2.0, 0.0, -1.0]));
        assert_eq!(p, DVector::from_row_slice(&[1.0, 0.0, 0.0]));
    }

    #[test]
    fn entropy_rejected_off_simplex() {
        assert!(BregmanGeometry::new(GeometryKind::EntropySimplex, Domain::AllSpace, 3).is_err());
        assert!(BregmanGeometry::euclidean(Domain::Box { lo: 1.0, hi: 0.0 }, 3).is_err());
    }

    #[test]
    fn penalty_examples() {
        let g = generate_graph(GraphFamily::Path, 4, 0).unwrap();
        let w = build_laplacian(&g);
        let a = sqrt_psd(w.as_matrix()).unwrap();
        let base = ProblemInstance::new(vec![NodeFunction::constant(2, 0.0); 4], Domain::AllSpace).unwrap();
        let pen = make_penalty(&base, &a, 5f64.sqrt(), 1.0).unwrap();
        let x = NodeState::consensual(4, &DVector::from_row_slice(&[1.0, -2.0])).to_stacked();
        assert!(pen.value(&x).abs() < 1e-12);
        // a stacked x with |A x|^2 = 1
        let (vals, vecs) = crate::linalg::sorted_eigen(w.as_matrix());
        let v = vecs.column(3) / vals[3].sqrt();
        let mut xm = DMatrix::zeros(4, 2);
        xm.set_column(0, &v);
        let xs = NodeState::from_matrix(xm).to_stacked();
        assert!((pen.value(&xs) - 5.0).abs() < 1e-10);
        let grad = pen.gradient(&xs);
        let hand = NodeState::from_matrix(w.as_matrix() * NodeState::from_stacked(&xs, 4).as_matrix() * 10.0).to_stacked();
        assert!((grad - hand).amax() < 1e-10);
        assert_eq!(pen.products(), 1);
        assert!((pen.smooth_l() - 2.0 * 5.0 * vals[3]).abs() < 1e-10);

        let s = spectral_summary(w.as_matrix(), SpectralKind::Laplacian).unwrap();
        let r = ry_bound(3.0, 4, s.lambda_min_plus);
        assert!((r * r - 9.0 / (4.0 * s.lambda_min_plus)).abs() < 1e-12);
    }

    #[test]
    fn kl_prox_matches_numeric_solve() {
        let geom = BregmanGeometry::entropy_simplex(4).unwrap();
        let mut rng = crate::rng::rng_from_seed(5);
        for _ in 0..10 {
            let x = random_simplex(4, &mut rng);
            let up = random_simplex(4, &mut rng);
            let g = DVector::from_fn(4, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let (beta, p) = (1.3, 0.7);
            let u = geom.prox_step(&g, &x, &up, beta, p);
            // stationarity: g + beta ln(u/x) + beta p ln(u/u_prev) is constant
            let s = DVector::from_fn(4, |j, _| g[j] + beta * (u[j] / x[j]).ln() + beta * p * (u[j] / up[j]).ln());
            assert!(s.max() - s.min() < 1e-8);
            // exponentiated-gradient inner solve
            let obj_grad = |v: &DVector<f64>| DVector::from_fn(4, |j, _| g[j] + beta * ((v[j] / x[j]).ln() + 1.0) + beta * p * ((v[j] / up[j]).ln() + 1.0));
            let mut v = DVector::from_element(4, 0.25);
            for _ in 0..5000 {
                let gr = obj_grad(&v);
                let z = DVector::from_fn(4, |j, _| v[j].ln() - 0.2 * gr[j]);
                v = softmax(&z);
            }
            assert!((v - &u).amax() < 1e-8);
        }
    }

    #[test]
    fn euclidean_prox_matches_projected_gradient() {
        let mut rng = crate::rng::rng_from_seed(6);
        for domain in [Domain::Box { lo: -0.3, hi: 0.4 }, Domain::Simplex] {
            let geom = BregmanGeometry::euclidean(domain, 5).unwrap();
            for _ in 0..10 {
                let x = geom.project(&DVector::from_fn(5, |_, _| rng.random::<f64>()));
                let up = geom.project(&DVector::from_fn(5, |_, _| rng.random::<f64>()));
                let g = DVector::from_fn(5, |_, _| rng.random::<f64>() * 4.0 - 2.0);
                let (beta, p) = (0.9, 1.5);
                let u = geom.prox_step(&g, &x, &up, beta, p);
                let mut v = geom.center();
                let step = 1.0 / (beta * (1.0 + p));
                for _ in 0..2000 {
                    let gr = &g + (&v - &x) * beta + (&v - &up) * (beta * p);
                    v = geom.project(&(&v - gr * (0.5 * step)));
                }
                assert!((v - &u).amax() < 1e-8);
            }
        }
    }

    #[test]
    fn smooth_only_matches_accelerated_rate() {
        let n = 6;
        let q = DVector::from_fn(n, |i, _| i as f64 - 2.0);
        let h = Quad { q: q.clone(), mu: 4.0 };
        let f = Zero(n);
        let comp = Composite::new(&h, &f, 0.0).unwrap();
        let geom = BregmanGeometry::euclidean(Domain::AllSpace, n).unwrap();
        let x0 = DVector::zeros(n);
        let r2 = q.norm_squared();
        let eps = 1e-8;
        let big_n = outer_budget(4.0, r2, eps);
        let sched = SlidingSchedule::new(4.0, big_n, InnerRule::Lan { m2: 0.0, d_tilde: 0.75 * r2 }).unwrap();
        let rec = sliding(&comp, &geom, &x0, &sched).unwrap();
        let last = rec.last().unwrap();
        assert!(last.f_residual <= eps);
        assert_eq!(last.smooth_grad_calls as usize, big_n);
        // the rate bound holds at every recorded step
        for row in &rec.rows[1..] {
            let k = row.iter as f64;
            assert!(row.f_residual <= 12.0 * 4.0 * r2 / (k * (k + 1.0)) + 1e-12);
        }
    }

    #[test]
    fn stochastic_without_noise_is_deterministic_sliding() {
        let n = 4;
        let h = Quad { q: DVector::from_element(n, 0.3), mu: 2.0 };
        let f = NodeFunction::l1_regression(DMatrix::identity(n, n), DVector::from_element(n, -0.2), 0.5);
        let comp = Composite::new(&h, &f, 0.0).unwrap();
        let geom = BregmanGeometry::euclidean(Domain::Box { lo: -1.0, hi: 1.0 }, n).unwrap();
        let sched = SlidingSchedule::new(2.0, 15, InnerRule::Lan { m2: 1.0, d_tilde: 1.0 }).unwrap();
        let x0 = DVector::zeros(n);
        let a = sliding(&comp, &geom, &x0, &sched).unwrap();
        let b = s_sliding(&comp, &geom, &x0, &sched, NoiseConfig::default(), 3).unwrap();
        assert_eq!(a.final_state, b.final_state);
        assert_eq!(a.to_csv(), b.to_csv());
    }

    #[test]
    fn zo_with_zero_nonsmooth_matches_sliding() {
        let n = 3;
        let h = Quad { q: DVector::from_row_slice(&[0.2, 0.5, 0.3]), mu: 1.0 };
        let f = Zero(n);
        let comp = Composite::new(&h, &f, 0.0).unwrap();
        let geom = BregmanGeometry::euclidean(Domain::Simplex, n).unwrap();
        let sched = SlidingSchedule::new(1.0, 20, InnerRule::Fixed(5)).unwrap();
        let x0 = geom.center();
        let a = sliding(&comp, &geom, &x0, &sched).unwrap();
        let b = zo_sliding(&comp, &geom, &x0, &sched, &ZoSettings::new(1e-3, 0.0), 9).unwrap();
        assert!((&a.final_state - &b.final_state).amax() < 1e-12);
        assert_eq!(b.last().unwrap().zo_calls, 2 * 5 * 20);
        assert_eq!(b.last().unwrap().smooth_grad_calls, 20);
    }

    #[test]
    fn entropy_iterates_stay_on_simplex() {
        let n = 5;
        let h = Quad { q: DVector::from_row_slice(&[0.1, 0.4, 0.2, 0.2, 0.1]), mu: 2.0 };
        let f = NodeFunction::l1_regression(DMatrix::identity(n, n), DVector::from_element(n, 0.2), 0.3);
        let comp = Composite::new(&h, &f, 0.0).unwrap();
        let geom = BregmanGeometry::entropy_simplex(n).unwrap();
        let sched = SlidingSchedule::new(2.0, 10, InnerRule::Fixed(20)).unwrap();
        let rec = zo_sliding(&comp, &geom, &geom.center(), &sched, &ZoSettings::new(1e-4, 1.0), 2).unwrap();
        let x = rec.final_state.row(0).transpose();
        assert!(x.iter().all(|&v| v >= 0.0));
        assert!((x.sum() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn restart_phase_zero_is_plain_budget() {
        let s = RestartSettings { mu: 0.5, r0: 2.0, m_lip: 1.0, phases: 3 };
        let sched = restart_phase_schedule(3.0, &s, 0.0, 0).unwrap();
        assert_eq!(sched.n_outer, outer_budget(3.0, 4.0, 0.5 * 4.0 / 4.0));
        let later = restart_phase_schedule(3.0, &s, 0.0, 2).unwrap();
        assert_eq!(later.n_outer, sched.n_outer);
    }

    proptest! {
        #[test]
        fn divergence_dominates_half_norm_sq(seed in 0u64..500, n in 2usize..8) {
            let mut rng = crate::rng::rng_from_seed(seed);
            let x = random_simplex(n, &mut rng);
            let y = random_simplex(n, &mut rng);
            let e = BregmanGeometry::entropy_simplex(n).unwrap();
            prop_assert!(e.divergence(&x, &x).abs() < 1e-15);
            prop_assert!(e.divergence(&x, &y) >= 0.5 * (&x - &y).lp_norm(1).powi(2) - 1e-12);
            let g = BregmanGeometry::euclidean(Domain::AllSpace, n).unwrap();
            prop_assert!(g.divergence(&x, &y) >= 0.5 * (&x - &y).norm_squared() - 1e-15);
        }

        #[test]
        fn prox_is_feasible(seed in 0u64..300) {
            let mut rng = crate::rng::rng_from_seed(seed);
            let n = 4;
            let g = DVector::from_fn(n, |_, _| rng.random::<f64>() * 20.0 - 10.0);
            for geom in [
                BregmanGeometry::entropy_simplex(n).unwrap(),
                BregmanGeometry::euclidean(Domain::Simplex, n).unwrap(),
                BregmanGeometry::euclidean(Domain::Box { lo: 0.0, hi: 0.5 }, n).unwrap(),
            ] {
                let x = geom.project(&random_simplex(n, &mut rng));
                let u = geom.prox_step(&g, &x, &x, 0.3, 2.0);
                prop_assert!(geom.contains(&u, 1e-12));
            }
        }
    }
}
