//! Decentralized primal methods on `F(X) = sum_i f_i(x_i)`.
//!
//! Every method records one trace row for the initial point and one per
//! iteration. The residual is `f(mean(X)) - f*` with `f = sum_i f_i`.

use nalgebra::{DMatrix, DVector};

use crate::consensus::{consensus_error_mat, row_mean, run_consensus_with, ContractionEstimate, Gossip, MixingSource};
use crate::error::{Error, Result};
use crate::netgraph::MixingMatrix;
use crate::problems::{compute_constants, ProblemInstance, ReferenceSolution};
use crate::record::{RecordKind, RunRecord, TraceRow};
use crate::NodeState;

/// Abort threshold on `||X||_F`.
pub const DIVERGENCE_LIMIT: f64 = 1e10;

/// Budget and bookkeeping shared by all primal runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSpec {
    /// Maximum number of iterations.
    pub budget: usize,
    /// Reference optimal value used for the residual column.
    pub f_star: f64,
    /// Stop once residual and consensus error are both at most this value.
    pub stop_eps: Option<f64>,
}

impl RunSpec {
    pub fn new(budget: usize, f_star: f64) -> Self {
        Self { budget, f_star, stop_eps: None }
    }

    pub fn stop_at(mut self, eps: f64) -> Self {
        self.stop_eps = Some(eps);
        self
    }
}

/// Callback receiving the iteration index and named internal sequences.
pub type Observer<'a> = &'a mut dyn FnMut(usize, &[(&str, &DMatrix<f64>)]);

struct Tracker<'p> {
    problem: &'p ProblemInstance,
    spec: RunSpec,
    record: RunRecord,
    grad_calls: u64,
}

impl<'p> Tracker<'p> {
    fn new(problem: &'p ProblemInstance, spec: RunSpec) -> Self {
        Self { problem, spec, record: RunRecord::new(RecordKind::Primal), grad_calls: 0 }
    }

    fn grad(&mut self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.grad_calls += 1;
        self.problem.stacked_gradient(x)
    }

    /// Record a row; returns `true` when the stopping rule fires.
    fn log(&mut self, iter: usize, rounds: u64, x: &DMatrix<f64>) -> Result<bool> {
        let norm = x.norm();
        if !norm.is_finite() || norm > DIVERGENCE_LIMIT {
            return Err(Error::Diverged { iteration: iter, norm });
        }
        let f_residual = self.problem.value(&row_mean(x)) - self.spec.f_star;
        let consensus_error = consensus_error_mat(x);
        self.record.push(TraceRow {
            iter,
            comm_rounds: rounds,
            grad_calls: self.grad_calls,
            f_residual,
            consensus_error,
            zo_calls: 0,
            smooth_grad_calls: 0,
        });
        Ok(self.spec.stop_eps.is_some_and(|e| f_residual <= e && consensus_error <= e))
    }

    fn finish(mut self, x: DMatrix<f64>) -> RunRecord {
        self.record.final_state = x;
        self.record
    }
}

fn check_shape(problem: &ProblemInstance, m: usize, x0: &NodeState) -> Result<()> {
    if x0.node_count() != problem.node_count() || m != problem.node_count() || x0.dim() != problem.dim {
        return Err(Error::DimensionMismatch {
            expected: format!("{} nodes x {}", problem.node_count(), problem.dim),
            found: format!("{} nodes x {} (mixing {m})", x0.node_count(), x0.dim()),
        });
    }
    Ok(())
}

/// `X^{k+1} = M X^k - alpha grad F(X^k)`.
pub fn dgd(problem: &ProblemInstance, m: &MixingMatrix, alpha: f64, x0: &NodeState, spec: RunSpec) -> Result<RunRecord> {
    check_shape(problem, m.node_count(), x0)?;
    if alpha < 0.0 {
        return Err(Error::invalid("step size must be non-negative"));
    }
    let mut gossip = Gossip::new(MixingSource::Static(m));
    let mut t = Tracker::new(problem, spec);
    let mut x = x0.as_matrix().clone();
    if t.log(0, 0, &x)? {
        return Ok(t.finish(x));
    }
    for k in 0..spec.budget {
        let g = t.grad(&x);
        x = gossip.mix(&x) - g * alpha;
        if t.log(k + 1, gossip.rounds(), &x)? {
            break;
        }
    }
    Ok(t.finish(x))
}

/// EXTRA with `M~ = (M + I)/2`. The product `M X^k` from the previous step
/// is reused, so each iteration costs one round.
pub fn extra(problem: &ProblemInstance, m: &MixingMatrix, alpha: f64, x0: &NodeState, spec: RunSpec) -> Result<RunRecord> {
    extra_observed(problem, m, alpha, x0, spec, &mut |_, _| {})
}

pub fn extra_observed(
    problem: &ProblemInstance,
    m: &MixingMatrix,
    alpha: f64,
    x0: &NodeState,
    spec: RunSpec,
    observer: Observer<'_>,
) -> Result<RunRecord> {
    check_shape(problem, m.node_count(), x0)?;
    if alpha <= 0.0 {
        return Err(Error::invalid("step size must be positive"));
    }
    let mut gossip = Gossip::new(MixingSource::Static(m));
    let mut t = Tracker::new(problem, spec);
    let x_prev0 = x0.as_matrix().clone();
    if t.log(0, 0, &x_prev0)? {
        return Ok(t.finish(x_prev0));
    }
    let mut g_prev = t.grad(&x_prev0);
    let mut mx_prev = gossip.mix(&x_prev0);
    let mut x_prev = x_prev0;
    let mut x = &mx_prev - &g_prev * alpha;
    observer(1, &[("x", &x), ("grad_prev", &g_prev)]);
    if spec.budget == 0 || t.log(1, gossip.rounds(), &x)? {
        return Ok(t.finish(x));
    }
    for k in 1..spec.budget {
        let g = t.grad(&x);
        let mx = gossip.mix(&x);
        // (I + M) X^{k+1} - (M + I)/2 X^k - alpha (g^{k+1} - g^k)
        let next = &x + &mx - (&mx_prev + &x_prev) * 0.5 - (&g - &g_prev) * alpha;
        x_prev = std::mem::replace(&mut x, next);
        mx_prev = mx;
        g_prev = g;
        observer(k + 1, &[("x", &x), ("grad_prev", &g_prev)]);
        if t.log(k + 1, gossip.rounds(), &x)? {
            break;
        }
    }
    Ok(t.finish(x))
}

/// Accelerated distributed Nesterov gradient with gradient tracking.
///
/// Rounds are counted per actual product: `M Y^k` is formed once and used in
/// both the `X` and `V` updates, so an iteration costs three rounds.
pub fn acc_dngd(problem: &ProblemInstance, m: &MixingMatrix, eta: f64, x0: &NodeState, spec: RunSpec) -> Result<RunRecord> {
    acc_dngd_observed(problem, m, eta, x0, spec, &mut |_, _| {})
}

pub fn acc_dngd_observed(
    problem: &ProblemInstance,
    m: &MixingMatrix,
    eta: f64,
    x0: &NodeState,
    spec: RunSpec,
    observer: Observer<'_>,
) -> Result<RunRecord> {
    check_shape(problem, m.node_count(), x0)?;
    if eta <= 0.0 {
        return Err(Error::invalid("step size must be positive"));
    }
    let mu_l = compute_constants(problem).mu_l;
    let a = (mu_l * eta).sqrt();
    let mut gossip = Gossip::new(MixingSource::Static(m));
    let mut t = Tracker::new(problem, spec);
    let mut x = x0.as_matrix().clone();
    let mut v = x.clone();
    let mut y = x.clone();
    let mut gy = t.grad(&y);
    let mut s = gy.clone();
    observer(0, &[("x", &x), ("y", &y), ("s", &s), ("grad_y", &gy)]);
    if t.log(0, 0, &x)? {
        return Ok(t.finish(x));
    }
    for k in 0..spec.budget {
        let my = gossip.mix(&y);
        let mv = gossip.mix(&v);
        let ms = gossip.mix(&s);
        let x_new = &my - &s * eta;
        let v_new = mv * (1.0 - a) + &my * a - &s * (eta / a);
        let y_new = (&x_new + &v_new * a) / (1.0 + a);
        let gy_new = t.grad(&y_new);
        s = ms + &gy_new - &gy;
        x = x_new;
        v = v_new;
        y = y_new;
        gy = gy_new;
        observer(k + 1, &[("x", &x), ("y", &y), ("s", &s), ("grad_y", &gy)]);
        if t.log(k + 1, gossip.rounds(), &x)? {
            break;
        }
    }
    Ok(t.finish(x))
}

/// DIGing over a per-round mixing sequence (cycled if shorter than the budget).
pub fn diging(
    problem: &ProblemInstance,
    mats: MixingSource<'_>,
    alpha: f64,
    x0: &NodeState,
    spec: RunSpec,
) -> Result<RunRecord> {
    diging_observed(problem, mats, alpha, x0, spec, &mut |_, _| {})
}

pub fn diging_observed(
    problem: &ProblemInstance,
    mats: MixingSource<'_>,
    alpha: f64,
    x0: &NodeState,
    spec: RunSpec,
    observer: Observer<'_>,
) -> Result<RunRecord> {
    check_shape(problem, mats.node_count(), x0)?;
    if alpha <= 0.0 {
        return Err(Error::invalid("step size must be positive"));
    }
    let mut gossip = Gossip::new(mats);
    let mut t = Tracker::new(problem, spec);
    let mut x = x0.as_matrix().clone();
    let mut gx = t.grad(&x);
    let mut y = gx.clone();
    observer(0, &[("x", &x), ("y", &y), ("grad_x", &gx)]);
    if t.log(0, 0, &x)? {
        return Ok(t.finish(x));
    }
    for k in 0..spec.budget {
        let x_new = gossip.mix(&x) - &y * alpha;
        let my = gossip.mix(&y);
        gossip.tick();
        let gx_new = t.grad(&x_new);
        y = my + &gx_new - &gx;
        x = x_new;
        gx = gx_new;
        observer(k + 1, &[("x", &x), ("y", &y), ("grad_x", &gx)]);
        if t.log(k + 1, gossip.rounds(), &x)? {
            break;
        }
    }
    Ok(t.finish(x))
}

/// Greater root of `(A + a)(1 + A mu) = L a^2`.
pub fn agd_step_root(a_k: f64, l: f64, mu: f64) -> Result<f64> {
    let c = 1.0 + a_k * mu;
    let disc = c * c + 4.0 * l * a_k * c;
    if l <= 0.0 || disc < 0.0 {
        return Err(Error::SolveFailed(format!("degenerate step equation (L = {l}, discriminant {disc})")));
    }
    Ok((c + disc.sqrt()) / (2.0 * l))
}

/// Accelerated gradient with an inexact consensus projection of `T` gossip
/// steps per outer iteration. The gossip clock runs on across outer steps.
#[allow(clippy::too_many_arguments)]
pub fn dagd_consensus(
    problem: &ProblemInstance,
    mats: MixingSource<'_>,
    l: f64,
    mu: f64,
    x0: &NodeState,
    consensus_t: usize,
    spec: RunSpec,
) -> Result<RunRecord> {
    dagd_consensus_observed(problem, mats, l, mu, x0, consensus_t, spec, &mut |_, _| {})
}

#[allow(clippy::too_many_arguments)]
pub fn dagd_consensus_observed(
    problem: &ProblemInstance,
    mats: MixingSource<'_>,
    l: f64,
    mu: f64,
    x0: &NodeState,
    consensus_t: usize,
    spec: RunSpec,
    observer: Observer<'_>,
) -> Result<RunRecord> {
    check_shape(problem, mats.node_count(), x0)?;
    if !(l >= mu && mu > 0.0) {
        return Err(Error::invalid(format!("need L >= mu > 0, got L = {l}, mu = {mu}")));
    }
    let mut gossip = Gossip::new(mats);
    let mut t = Tracker::new(problem, spec);
    let mut x = x0.as_matrix().clone();
    let mut u = x.clone();
    let mut a_k = 0.0;
    if t.log(0, 0, &x)? {
        return Ok(t.finish(x));
    }
    for k in 0..spec.budget {
        let alpha = agd_step_root(a_k, l, mu)?;
        let a_next = a_k + alpha;
        let y = (&u * alpha + &x * a_k) / a_next;
        let gy = t.grad(&y);
        let denom = 1.0 + a_k * mu + mu;
        let v = (&y * mu + &u * (1.0 + a_k * mu)) / denom - gy * (alpha / denom);
        let (u_new, _) = run_consensus_with(&mut gossip, &NodeState::from_matrix(v), consensus_t);
        u = u_new.into_matrix();
        x = (&u * alpha + &x * a_k) / a_next;
        a_k = a_next;
        observer(k + 1, &[("x", &x), ("u", &u)]);
        if t.log(k + 1, gossip.rounds(), &x)? {
            break;
        }
    }
    Ok(t.finish(x))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InexactParams {
    pub delta: f64,
    pub delta_prime: f64,
    pub l_model: f64,
    pub mu_model: f64,
    /// `sqrt(D)` of the consensus-iteration bound.
    pub sqrt_d: f64,
    pub consensus_t: usize,
}

/// `delta = (1/2m)(L_l^2/L_g + 2 L_l^2/mu_g + L_l - mu_l) delta'`.
pub fn inexact_delta(problem: &ProblemInstance, delta_prime: f64) -> f64 {
    let c = compute_constants(problem);
    let m = problem.node_count() as f64;
    (c.l_l * c.l_l / c.l_g + 2.0 * c.l_l * c.l_l / c.mu_g + c.l_l - c.mu_l) * delta_prime / (2.0 * m)
}

/// Default consensus accuracy `delta' = (m eps/32) mu_g^{3/2} / (L_g^{1/2} L_l^2)`.
pub fn default_delta_prime(problem: &ProblemInstance, eps: f64) -> f64 {
    let c = compute_constants(problem);
    let m = problem.node_count() as f64;
    m * eps / 32.0 * c.mu_g.powf(1.5) / (c.l_g.sqrt() * c.l_l * c.l_l)
}

/// Model constants, `delta` and the number of consensus steps per outer
/// iteration. `D` uses the reference solution and the starting point; the
/// contraction pair `(tau, lambda)` is measured on the mixing sequence.
pub fn inexact_oracle_params(
    problem: &ProblemInstance,
    eps: f64,
    delta_prime: Option<f64>,
    contraction: ContractionEstimate,
    reference: &ReferenceSolution,
    x0: &NodeState,
) -> Result<InexactParams> {
    if eps <= 0.0 {
        return Err(Error::invalid("eps must be positive"));
    }
    let c = compute_constants(problem);
    let m = problem.node_count() as f64;
    let delta_prime = delta_prime.unwrap_or_else(|| default_delta_prime(problem, eps));
    let delta = inexact_delta(problem, delta_prime);
    let l_model = 2.0 * c.l_g;
    let mu_model = c.mu_g / 2.0;
    let slm = (l_model * mu_model).sqrt();
    let xs = NodeState::consensual(problem.node_count(), &reference.x_star);
    let grad_star = problem.stacked_gradient(xs.as_matrix()).norm();
    let u0: DVector<f64> = x0.mean();
    let dist2 = (u0 - &reference.x_star).norm_squared();
    let sqrt_d = (2.0 * c.l_l / slm + 1.0) * delta_prime.sqrt()
        + c.l_l / mu_model * m.sqrt() * (dist2 + 8.0 * delta_prime / slm).sqrt()
        + 2.0 * grad_star / slm;
    let d = sqrt_d * sqrt_d;
    if contraction.lambda <= 0.0 {
        return Err(Error::invalid("contraction lambda must be positive"));
    }
    let t = if delta_prime > 0.0 {
        (contraction.tau as f64 / (2.0 * contraction.lambda) * (d / delta_prime).ln()).ceil().max(1.0) as usize
    } else {
        usize::MAX
    };
    Ok(InexactParams { delta, delta_prime, l_model, mu_model, sqrt_d, consensus_t: t })
}
