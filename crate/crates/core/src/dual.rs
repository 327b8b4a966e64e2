//! Dual methods for `min f(x) s.t. A x = 0` through the conjugate oracle
//! `x(u) = argmax_x <u, x> - f(x)`, with `psi(y) = <A^T y, x(A^T y)> - f(x(A^T y))`.
//!
//! Iterates live either in the original coordinates `y` or in the lifted
//! coordinates `v = sqrt(W) y`, where the gradient becomes `W x(v)` and costs
//! one communication round. The methods only see [`DualOracle`], so both forms
//! produce the same primal sequence.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{eigenvalues, psd_pinv};
use crate::netgraph::EIG_ZERO_REL;
use crate::problems::{compute_constants, conjugate_argmax, NodeFunction, ProblemInstance};
use crate::record::{DualRunRecord, DualTraceRow};
use crate::rng::{child_rng, rng_from_seed, Rng};
use crate::NodeState;

/// Noise of the stochastic conjugate oracle `x~(y, xi) = x(y) + delta(y, xi)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DualNoise {
    /// Total std of the zero-mean part (per entry `sigma_x / sqrt(m n)`).
    pub sigma_x: f64,
    /// Norm of a fixed bias vector.
    pub delta_y: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualConstants {
    /// `lambda_max(A^T A) / mu`.
    pub l_psi: f64,
    /// `lambda_min^+(A^T A) / L`.
    pub mu_psi: f64,
    pub lambda_max: f64,
    pub lambda_min_plus: f64,
    /// `sqrt(lambda_max) sigma_x`.
    pub sigma_psi: f64,
}

/// One batched call of the dual oracle at an iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct DualSample {
    /// Primal point `x~(A^T y)` (nodes x dim).
    pub x: DMatrix<f64>,
    /// Gradient estimate in iterate coordinates.
    pub grad: DMatrix<f64>,
    /// Norm of the estimate of `grad psi(y)` in the original coordinates.
    pub grad_norm: f64,
}

pub trait DualOracle: Sync {
    /// Shape of an iterate.
    fn shape(&self) -> (usize, usize);
    fn constants(&self) -> DualConstants;
    /// Batched stochastic sample; counts `batch` conjugate calls and one round.
    fn sample(&self, v: &DMatrix<f64>, batch: usize, rng: &mut Rng) -> Result<DualSample>;
    /// Exact, uncounted evaluation for reporting.
    fn exact(&self, v: &DMatrix<f64>) -> Result<DualSample>;
    /// `psi` at the iterate, given its exact primal point.
    fn psi(&self, v: &DMatrix<f64>, x: &DMatrix<f64>) -> f64;
    fn primal_value(&self, x: &DMatrix<f64>) -> f64;
    /// `|A x|`.
    fn constraint_norm(&self, x: &DMatrix<f64>) -> f64;
    fn conj_calls(&self) -> u64;
    fn comm_rounds(&self) -> u64;
}

#[derive(Debug, Clone)]
enum Form {
    Unlifted { a: DMatrix<f64> },
    Lifted { w: DMatrix<f64> },
}

/// Dual of a decentralized problem with `f = sum_i f_i` and a constraint
/// matrix acting across nodes.
pub struct DualProblem<'a> {
    problem: &'a ProblemInstance,
    form: Form,
    constants: DualConstants,
    noise: DualNoise,
    bias: DMatrix<f64>,
    conj: AtomicU64,
    rounds: AtomicU64,
}

fn spectrum(ata: &DMatrix<f64>) -> Result<(f64, f64)> {
    let ev = eigenvalues(ata);
    let lmax = ev.iter().copied().fold(0.0, f64::max);
    if !(lmax > 0.0) {
        return Err(Error::invalid("constraint matrix is zero: the constraint set is the whole space"));
    }
    let lmin = ev.iter().copied().filter(|&e| e > EIG_ZERO_REL * lmax).fold(f64::INFINITY, f64::min);
    Ok((lmax, lmin))
}

impl<'a> DualProblem<'a> {
    /// Original coordinates with constraint matrix `a` (`p x m`).
    pub fn new(problem: &'a ProblemInstance, a: DMatrix<f64>, noise: DualNoise) -> Result<Self> {
        if a.ncols() != problem.node_count() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} columns", problem.node_count()),
                found: format!("{} columns", a.ncols()),
            });
        }
        let ata = a.transpose() * &a;
        Self::build(problem, Form::Unlifted { a }, &ata, noise)
    }

    /// Lifted coordinates for `A = sqrt(W)` given the Laplacian `w`.
    pub fn lifted(problem: &'a ProblemInstance, w: &DMatrix<f64>, noise: DualNoise) -> Result<Self> {
        if w.nrows() != problem.node_count() || !w.is_square() {
            return Err(Error::DimensionMismatch {
                expected: format!("{0} x {0}", problem.node_count()),
                found: format!("{} x {}", w.nrows(), w.ncols()),
            });
        }
        let residual = w.column_sum().amax();
        if residual > 1e-10 * w.amax().max(1.0) {
            return Err(Error::invalid(format!("lifted form needs W 1 = 0 (residual {residual:e})")));
        }
        Self::build(problem, Form::Lifted { w: w.clone() }, w, noise)
    }

    fn build(problem: &'a ProblemInstance, form: Form, ata: &DMatrix<f64>, noise: DualNoise) -> Result<Self> {
        let (lambda_max, lambda_min_plus) = spectrum(ata)?;
        let c = compute_constants(problem);
        if !(c.mu_l > 0.0) {
            return Err(Error::invalid("dual methods need a strongly convex primal objective"));
        }
        let (m, n) = (problem.node_count(), problem.dim);
        let bias = if noise.delta_y > 0.0 {
            let mut rng = rng_from_seed(noise.bias_seed());
            let d = DMatrix::<f64>::from_fn(m, n, |_, _| StandardNormal.sample(&mut rng));
            let norm = d.norm();
            d * (noise.delta_y / norm)
        } else {
            DMatrix::zeros(m, n)
        };
        let constants = DualConstants {
            l_psi: lambda_max / c.mu_l,
            mu_psi: if c.l_l.is_finite() { lambda_min_plus / c.l_l } else { 0.0 },
            lambda_max,
            lambda_min_plus,
            sigma_psi: lambda_max.sqrt() * noise.sigma_x,
        };
        Ok(Self { problem, form, constants, noise, bias, conj: AtomicU64::new(0), rounds: AtomicU64::new(0) })
    }

    pub fn problem(&self) -> &ProblemInstance {
        self.problem
    }

    pub fn is_lifted(&self) -> bool {
        matches!(self.form, Form::Lifted { .. })
    }

    /// Argument of the conjugate oracle for an iterate.
    fn conj_arg(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.form {
            Form::Unlifted { a } => a.transpose() * v,
            Form::Lifted { .. } => v.clone(),
        }
    }

    fn grad_of(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
        match &self.form {
            Form::Unlifted { a } => {
                let g = a * x;
                let n = g.norm();
                (g, n)
            }
            Form::Lifted { w } => {
                // W 1 = 0, so centring first changes nothing exactly but keeps
                // x^T W x free of cancellation near consensus
                let mut xc = x.clone();
                let mean = xc.row_mean();
                for mut row in xc.row_iter_mut() {
                    row -= &mean;
                }
                let g = w * &xc;
                let n = xc.dot(&g).max(0.0).sqrt();
                (g, n)
            }
        }
    }
}

impl DualNoise {
    fn bias_seed(&self) -> u64 {
        crate::rng::derive_seed(self.seed, u64::MAX)
    }
}

impl DualOracle for DualProblem<'_> {
    fn shape(&self) -> (usize, usize) {
        match &self.form {
            Form::Unlifted { a } => (a.nrows(), self.problem.dim),
            Form::Lifted { w } => (w.nrows(), self.problem.dim),
        }
    }

    fn constants(&self) -> DualConstants {
        self.constants
    }

    fn sample(&self, v: &DMatrix<f64>, batch: usize, rng: &mut Rng) -> Result<DualSample> {
        let batch = batch.max(1);
        self.conj.fetch_add(batch as u64, Ordering::Relaxed);
        self.rounds.fetch_add(1, Ordering::Relaxed);
        let mut x = conjugate_argmax(self.problem, &self.conj_arg(v))?;
        if self.noise.sigma_x > 0.0 {
            // mean of `batch` independent draws, sampled directly
            let s = self.noise.sigma_x / ((x.len() * batch) as f64).sqrt();
            for e in x.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *e += s * z;
            }
        }
        if self.noise.delta_y > 0.0 {
            x += &self.bias;
        }
        let (grad, grad_norm) = self.grad_of(&x);
        Ok(DualSample { x, grad, grad_norm })
    }

    fn exact(&self, v: &DMatrix<f64>) -> Result<DualSample> {
        let x = conjugate_argmax(self.problem, &self.conj_arg(v))?;
        let (grad, grad_norm) = self.grad_of(&x);
        Ok(DualSample { x, grad, grad_norm })
    }

    fn psi(&self, v: &DMatrix<f64>, x: &DMatrix<f64>) -> f64 {
        self.conj_arg(v).dot(x) - self.problem.stacked_value(x)
    }

    fn primal_value(&self, x: &DMatrix<f64>) -> f64 {
        self.problem.stacked_value(x)
    }

    fn constraint_norm(&self, x: &DMatrix<f64>) -> f64 {
        self.grad_of(x).1
    }

    fn conj_calls(&self) -> u64 {
        self.conj.load(Ordering::Relaxed)
    }

    fn comm_rounds(&self) -> u64 {
        self.rounds.load(Ordering::Relaxed)
    }
}

/// Batch size as a function of the iteration index.
pub type BatchRule<'a> = &'a (dyn Fn(usize) -> usize + Sync);

pub fn unit_batch(_: usize) -> usize {
    1
}

/// Batch rule `max{1, sigma^2 alpha_k ln(N/beta) / (c eps)}` with `alpha_k = (k+1)/(2 L~)`.
pub fn spdstm_batch(sigma_psi: f64, l_tilde: f64, n: usize, beta: f64, eps: f64, c_hat: f64) -> impl Fn(usize) -> usize + Sync {
    move |k| {
        let a = (k as f64 + 1.0) / (2.0 * l_tilde);
        (sigma_psi * sigma_psi * a * (n as f64 / beta).ln() / (c_hat * eps)).ceil().max(1.0) as usize
    }
}

/// Constant batch `max{1, (mu/L)^{3/2} N^2 sigma^2 (1 + sqrt(3 ln(N/beta)))^2 / (C eps)}`.
pub fn sstm_batch(c: DualConstants, n: usize, beta: f64, eps: f64, c_const: f64) -> usize {
    let log = 1.0 + (3.0 * (n as f64 / beta).ln()).sqrt();
    let r = (c.mu_psi / c.l_psi).powf(1.5) * (n * n) as f64 * c.sigma_psi.powi(2) * log * log / (c_const * eps);
    r.ceil().max(1.0) as usize
}

/// Named iterate passed to observers.
pub type DualObserver<'a> = &'a mut dyn FnMut(&str, &DMatrix<f64>);

#[derive(Debug, Clone)]
pub struct DualOutput {
    pub y: DMatrix<f64>,
    /// Recovered primal point.
    pub x_tilde: DMatrix<f64>,
    pub record: DualRunRecord,
}

fn report(
    oracle: &dyn DualOracle,
    rec: &mut DualRunRecord,
    iter: usize,
    y: &DMatrix<f64>,
    x_hat: Option<&DMatrix<f64>>,
) -> Result<()> {
    let e = oracle.exact(y)?;
    let psi = oracle.psi(y, &e.x);
    let xr = x_hat.unwrap_or(&e.x);
    if !psi.is_finite() || !e.grad_norm.is_finite() {
        return Err(Error::Diverged { iteration: iter, norm: y.norm() });
    }
    rec.rows.push(DualTraceRow {
        iter,
        comm_rounds: oracle.comm_rounds(),
        conj_calls: oracle.conj_calls(),
        grad_norm: e.grad_norm,
        psi,
        gap: oracle.primal_value(xr) + psi,
        ax_norm: oracle.constraint_norm(xr),
    });
    Ok(())
}

/// Greater root of `2 L alpha^2 = A + alpha`.
pub fn spdstm_step(a_k: f64, l_tilde: f64) -> f64 {
    (1.0 + (1.0 + 8.0 * l_tilde * a_k).sqrt()) / (4.0 * l_tilde)
}

/// Stochastic primal-dual similar triangles from `y = 0` with `L~ = 2 L_psi`.
pub fn spdstm(oracle: &dyn DualOracle, n_iter: usize, batch: BatchRule<'_>, seed: u64) -> Result<DualOutput> {
    spdstm_observed(oracle, n_iter, batch, seed, &mut |_, _| {})
}

pub fn spdstm_observed(
    oracle: &dyn DualOracle,
    n_iter: usize,
    batch: BatchRule<'_>,
    seed: u64,
    obs: DualObserver<'_>,
) -> Result<DualOutput> {
    let (p, n) = oracle.shape();
    let l_tilde = 2.0 * oracle.constants().l_psi;
    let mut rng = rng_from_seed(seed);
    let mut y = DMatrix::zeros(p, n);
    let mut z = y.clone();
    let mut a_k = 0.0;
    let mut x_sum: Option<DMatrix<f64>> = None;
    let mut rec = DualRunRecord::default();
    report(oracle, &mut rec, 0, &y, None)?;
    for k in 0..n_iter {
        let alpha = spdstm_step(a_k, l_tilde);
        let a_next = a_k + alpha;
        let y_tilde = (&y * a_k + &z * alpha) / a_next;
        let s = oracle.sample(&y_tilde, batch(k + 1), &mut rng)?;
        z -= &s.grad * alpha;
        y = (&y * a_k + &z * alpha) / a_next;
        x_sum = Some(match x_sum {
            Some(acc) => acc + &s.x * alpha,
            None => &s.x * alpha,
        });
        a_k = a_next;
        obs("y_tilde", &y_tilde);
        obs("z", &z);
        obs("y", &y);
        let x_tilde = x_sum.as_ref().map(|acc| acc / a_k);
        report(oracle, &mut rec, k + 1, &y, x_tilde.as_ref())?;
    }
    let x_tilde = match x_sum {
        Some(acc) => acc / a_k,
        None => oracle.exact(&y)?.x,
    };
    Ok(DualOutput { y, x_tilde, record: rec })
}

/// Regularised objective `psi(y) + lambda/2 |y - y0|^2 + lambda sum_l 2^{l-1} |y - c_l|^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Regularizer {
    pub lambda: f64,
    pub y0: DMatrix<f64>,
    pub centers: Vec<DMatrix<f64>>,
}

impl Regularizer {
    pub fn new(lambda: f64, y0: DMatrix<f64>) -> Self {
        Self { lambda, y0, centers: Vec::new() }
    }

    /// Gradient of the regularising terms at `y`.
    pub fn gradient(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let mut g = (y - &self.y0) * self.lambda;
        for (l, c) in self.centers.iter().enumerate() {
            g += (y - c) * (self.lambda * 2f64.powi(l as i32 + 1));
        }
        g
    }

    /// `(mu_k, L_k)` of the regularised function for `psi` with smoothness `l_psi`.
    pub fn constants(&self, l_psi: f64) -> (f64, f64) {
        let k = self.centers.len() as i32;
        let extra = self.lambda * (2f64.powi(k + 1) - 2.0);
        (self.lambda + extra, l_psi + self.lambda + extra)
    }
}

struct AcSaCtx<'r> {
    rng: &'r mut Rng,
    batch: usize,
    iter: usize,
}

fn ac_sa_inner(
    oracle: &dyn DualOracle,
    reg: &Regularizer,
    z0: &DMatrix<f64>,
    m: usize,
    ctx: &mut AcSaCtx<'_>,
    obs: &mut dyn FnMut(&str, &DMatrix<f64>),
) -> Result<DMatrix<f64>> {
    let (lam, l_tilde) = reg.constants(oracle.constants().l_psi);
    let mut y_ag = z0.clone();
    let mut z = z0.clone();
    for t in 1..=m {
        let tf = t as f64;
        let alpha = 2.0 / (tf + 1.0);
        let gamma = 4.0 * l_tilde / (tf * (tf + 1.0));
        let den = gamma + (1.0 - alpha * alpha) * lam;
        let y_md = (&y_ag * ((1.0 - alpha) * (lam + gamma)) + &z * (alpha * ((1.0 - alpha) * lam + gamma))) / den;
        let s = oracle.sample(&y_md, ctx.batch, ctx.rng)?;
        let g = s.grad + reg.gradient(&y_md);
        z = (&y_md * (alpha * lam) + &z * ((1.0 - alpha) * lam + gamma) - g * alpha) / (lam + gamma);
        y_ag = &z * alpha + &y_ag * (1.0 - alpha);
        ctx.iter += 1;
        obs("y_md", &y_md);
        obs("z", &z);
        obs("y_ag", &y_ag);
        if !y_ag.iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged { iteration: ctx.iter, norm: y_ag.norm() });
        }
    }
    Ok(y_ag)
}

/// AC-SA on the regularised objective for `m` iterations.
pub fn ac_sa(
    oracle: &dyn DualOracle,
    reg: &Regularizer,
    z0: &DMatrix<f64>,
    m: usize,
    batch: usize,
    seed: u64,
    obs: DualObserver<'_>,
) -> Result<DMatrix<f64>> {
    if !(reg.lambda > 0.0) {
        return Err(Error::invalid("AC-SA needs lambda > 0"));
    }
    let mut rng = rng_from_seed(seed);
    let mut ctx = AcSaCtx { rng: &mut rng, batch, iter: 0 };
    ac_sa_inner(oracle, reg, z0, m, &mut ctx, obs)
}

fn ac_sa2_inner(
    oracle: &dyn DualOracle,
    reg: &Regularizer,
    z0: &DMatrix<f64>,
    m: usize,
    ctx: &mut AcSaCtx<'_>,
    obs: &mut dyn FnMut(&str, &DMatrix<f64>),
) -> Result<DMatrix<f64>> {
    let first = (m / 2).max(1);
    let second = (m - m / 2).max(1);
    let y1 = ac_sa_inner(oracle, reg, z0, first, ctx, obs)?;
    ac_sa_inner(oracle, reg, &y1, second, ctx, obs)
}

/// Two AC-SA runs of `floor(m/2)` and `ceil(m/2)` iterations, the second
/// restarted at the first output.
pub fn ac_sa2(
    oracle: &dyn DualOracle,
    reg: &Regularizer,
    z0: &DMatrix<f64>,
    m: usize,
    batch: usize,
    seed: u64,
    obs: DualObserver<'_>,
) -> Result<DMatrix<f64>> {
    if !(reg.lambda > 0.0) {
        return Err(Error::invalid("AC-SA needs lambda > 0"));
    }
    let mut rng = rng_from_seed(seed);
    let mut ctx = AcSaCtx { rng: &mut rng, batch, iter: 0 };
    ac_sa2_inner(oracle, reg, z0, m, &mut ctx, obs)
}

/// `lambda = L_psi ln^2 N / N^2`.
pub fn rrma_lambda(l_psi: f64, n_total: usize) -> f64 {
    let n = n_total as f64;
    l_psi * n.ln().powi(2) / (n * n)
}

/// `floor(log2(L~ / lambda))` with `L~ = L_psi + lambda`.
pub fn rrma_stages(l_psi: f64, lambda: f64) -> usize {
    ((l_psi + lambda) / lambda).log2().floor().max(0.0) as usize
}

fn rrma_inner(
    oracle: &dyn DualOracle,
    y0: &DMatrix<f64>,
    n_total: usize,
    lambda: f64,
    ctx: &mut AcSaCtx<'_>,
    obs: &mut dyn FnMut(&str, &DMatrix<f64>),
) -> Result<DMatrix<f64>> {
    if !(lambda > 0.0) {
        return Err(Error::invalid("recursive regularisation needs lambda > 0"));
    }
    let stages = rrma_stages(oracle.constants().l_psi, lambda);
    let mut reg = Regularizer::new(lambda, y0.clone());
    if stages == 0 {
        return ac_sa2_inner(oracle, &reg, y0, n_total, ctx, obs);
    }
    // split N over the stages so that the total is exactly N
    let (base, extra) = (n_total / stages, n_total % stages);
    let mut y_hat = y0.clone();
    for k in 0..stages {
        let m_k = (base + usize::from(k < extra)).max(2);
        y_hat = ac_sa2_inner(oracle, &reg, &y_hat, m_k, ctx, obs)?;
        obs("y_hat", &y_hat);
        reg.centers.push(y_hat.clone());
    }
    Ok(y_hat)
}

/// Recursive regularisation around AC-SA^2 with `N` iterations in total.
pub fn rrma_ac_sa2(
    oracle: &dyn DualOracle,
    y0: &DMatrix<f64>,
    n_total: usize,
    lambda: f64,
    batch: usize,
    seed: u64,
    obs: DualObserver<'_>,
) -> Result<DMatrix<f64>> {
    let mut rng = rng_from_seed(seed);
    let mut ctx = AcSaCtx { rng: &mut rng, batch, iter: 0 };
    rrma_inner(oracle, y0, n_total, lambda, &mut ctx, obs)
}

/// Settings of the restarted method beyond `eps` and `R_y`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RestartConfig {
    /// Constant of the gradient-norm rate.
    pub c_const: f64,
    /// Confidence level.
    pub beta: f64,
    /// All batches and the amplification count set to 1.
    pub zero_noise: bool,
    /// Worker threads for amplification trajectories (0 = rayon default).
    pub workers: usize,
}

impl Default for RestartConfig {
    fn default() -> Self {
        Self { c_const: 1.0, beta: 0.1, zero_noise: false, workers: 0 }
    }
}

/// Smallest integer `N > 1` with `C L^2 ln^4 N / (mu^2 N^4) <= 1/32`.
pub fn restart_inner_budget(c_const: f64, l_psi: f64, mu_psi: f64) -> usize {
    let k2 = (l_psi / mu_psi).powi(2) * c_const;
    let ok = |n: usize| {
        let nf = n as f64;
        k2 * nf.ln().powi(4) / nf.powi(4) <= 1.0 / 32.0
    };
    let mut hi = 2usize;
    while !ok(hi) {
        hi *= 2;
    }
    // ln^4 N / N^4 is decreasing on N >= 3, so bisect on [hi/2, hi]
    let mut lo = (hi / 2).max(2);
    if ok(lo) {
        return lo;
    }
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// `max{1, ceil(log2(2 R_y^2 |grad psi(y0)|^2 / eps^2))}`.
pub fn restart_count(r_y: f64, grad_norm0: f64, eps: f64) -> usize {
    let arg = 2.0 * r_y * r_y * grad_norm0 * grad_norm0 / (eps * eps);
    if arg <= 2.0 {
        1
    } else {
        arg.log2().ceil() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RestartPhase {
    /// Batched estimate of `|grad psi|` at the phase start (`r^` samples).
    pub start_estimate: f64,
    pub batch: usize,
    pub trajectories: usize,
    /// Estimated norms of the trajectory outputs (`r-` samples each).
    pub estimates: Vec<f64>,
    pub chosen: usize,
    /// Exact `|grad psi|` of the chosen output (reporting only).
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct RestartOutput {
    pub y: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub phases: Vec<RestartPhase>,
    pub inner_budget: usize,
    pub record: DualRunRecord,
}

/// Restarted RRMA-AC-SA^2 with batching and amplification.
pub fn restarted_rrma(
    oracle: &dyn DualOracle,
    y0: &DMatrix<f64>,
    eps: f64,
    r_y: f64,
    cfg: RestartConfig,
    seed: u64,
) -> Result<RestartOutput> {
    if !(eps > 0.0) || !(r_y > 0.0) {
        return Err(Error::invalid("need eps > 0 and R_y > 0"));
    }
    if !(cfg.beta > 0.0 && cfg.beta < 1.0 / 3.0) {
        return Err(Error::config("beta", "must lie in (0, 1/3)"));
    }
    let c = oracle.constants();
    if !(c.mu_psi > 0.0) {
        return Err(Error::invalid("restarts need a strongly convex dual (smooth primal)"));
    }
    let n_bar = restart_inner_budget(cfg.c_const, c.l_psi, c.mu_psi);
    let lambda = rrma_lambda(c.l_psi, n_bar);
    let l = restart_count(r_y, oracle.exact(y0)?.grad_norm, eps);
    let s2 = c.sigma_psi * c.sigma_psi;
    let lf = l as f64;
    let (r_hat, p_k) = if cfg.zero_noise {
        (1, 1)
    } else {
        let r_hat = (4.0 * s2 * (1.0 + (3.0 * (lf / cfg.beta).ln()).sqrt()).powi(2) * r_y * r_y / (eps * eps)).ceil().max(1.0) as usize;
        (r_hat, ((lf / cfg.beta).log2().ceil() as usize).max(1))
    };
    let r_bar = if cfg.zero_noise {
        1
    } else {
        let pf = p_k as f64;
        (128.0 * s2 * (1.0 + (3.0 * (lf * pf / cfg.beta).ln()).sqrt()).powi(2) * r_y * r_y / (eps * eps)).ceil().max(1.0) as usize
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::config("workers", e.to_string()))?;

    let mut y = y0.clone();
    let mut phases = Vec::with_capacity(l);
    let mut rec = DualRunRecord::default();
    report(oracle, &mut rec, 0, &y, None)?;
    let mut est_rng = child_rng(seed, 0);
    for k in 1..=l {
        let start = oracle.sample(&y, r_hat, &mut est_rng)?.grad_norm;
        let batch = if cfg.zero_noise || start <= 0.0 {
            1
        } else {
            let lnn = (n_bar as f64).ln();
            (64.0 * cfg.c_const * s2 * lnn.powi(6) / (n_bar as f64 * start * start)).ceil().max(1.0) as usize
        };
        let phase_seed = crate::rng::derive_seed(seed, k as u64);
        let start_point = y.clone();
        let runs: Vec<Result<(DMatrix<f64>, f64)>> = pool.install(|| {
            (0..p_k)
                .into_par_iter()
                .map(|p| {
                    let mut rng = child_rng(phase_seed, p as u64);
                    let mut ctx = AcSaCtx { rng: &mut rng, batch, iter: 0 };
                    let out = rrma_inner(oracle, &start_point, n_bar, lambda, &mut ctx, &mut |_, _| {})?;
                    let est = oracle.sample(&out, r_bar, &mut rng)?.grad_norm;
                    Ok((out, est))
                })
                .collect()
        });
        let runs: Vec<(DMatrix<f64>, f64)> = runs.into_iter().collect::<Result<_>>()?;
        let estimates: Vec<f64> = runs.iter().map(|r| r.1).collect();
        let mut chosen = 0;
        for (i, &e) in estimates.iter().enumerate() {
            if e < estimates[chosen] {
                chosen = i;
            }
        }
        y = runs[chosen].0.clone();
        let grad_norm = oracle.exact(&y)?.grad_norm;
        report(oracle, &mut rec, k, &y, None)?;
        phases.push(RestartPhase { start_estimate: start, batch, trajectories: p_k, estimates, chosen, grad_norm });
    }
    let x = oracle.sample(&y, r_bar, &mut est_rng)?.x;
    Ok(RestartOutput { y, x, phases, inner_budget: n_bar, record: rec })
}

/// Greater root of `(A + alpha)(1 + A mu) = L alpha^2`.
pub fn sstm_step(a_k: f64, l: f64, mu: f64) -> f64 {
    let c = 1.0 + a_k * mu;
    (c + (c * c + 4.0 * l * a_k * c).sqrt()) / (2.0 * l)
}

/// Stochastic similar triangles for a strongly convex dual, started at `y0`.
/// `z` follows the explicit minimiser of the aggregated model.
pub fn sstm_sc(oracle: &dyn DualOracle, y0: &DMatrix<f64>, n_iter: usize, batch: usize, seed: u64) -> Result<DualOutput> {
    sstm_sc_observed(oracle, y0, n_iter, batch, seed, &mut |_, _| {})
}

pub fn sstm_sc_observed(
    oracle: &dyn DualOracle,
    y0: &DMatrix<f64>,
    n_iter: usize,
    batch: usize,
    seed: u64,
    obs: DualObserver<'_>,
) -> Result<DualOutput> {
    let c = oracle.constants();
    let (l, mu) = (c.l_psi, c.mu_psi);
    if !(mu > 0.0) {
        return Err(Error::invalid("SSTM_sc needs mu_psi > 0"));
    }
    let mut rng = rng_from_seed(seed);
    let z0 = y0.clone();
    let mut y = y0.clone();
    let mut z = y0.clone();
    // A_k grows geometrically, so track 1/A_k and the A-weighted means
    // S_y / A_k, S_g / A_k instead of the raw sums.
    let mut inv_a = l;
    let g0 = oracle.sample(y0, batch, &mut rng)?;
    let mut mean_y = y0.clone();
    let mut mean_g = g0.grad;
    let mut rec = DualRunRecord::default();
    report(oracle, &mut rec, 0, &y, None)?;
    for k in 0..n_iter {
        // rho = alpha_{k+1} / A_k from the step equation divided by A_k^2
        let c = inv_a + mu;
        let rho = (c + (c * c + 4.0 * l * c).sqrt()) / (2.0 * l);
        let tau = rho / (1.0 + rho);
        let y_tilde = &y * (1.0 - tau) + &z * tau;
        let s = oracle.sample(&y_tilde, batch, &mut rng)?;
        mean_y = &mean_y * (1.0 - tau) + &y_tilde * tau;
        mean_g = &mean_g * (1.0 - tau) + &s.grad * tau;
        inv_a /= 1.0 + rho;
        z = (&z0 * inv_a + &mean_y * mu - &mean_g) / (inv_a + mu);
        y = &y * (1.0 - tau) + &z * tau;
        obs("y_tilde", &y_tilde);
        obs("z", &z);
        obs("y", &y);
        report(oracle, &mut rec, k + 1, &y, None)?;
    }
    let x_tilde = oracle.sample(&y, batch, &mut rng)?.x;
    Ok(DualOutput { y, x_tilde, record: rec })
}

/// Minimum-norm dual solution for an all-quadratic objective:
/// `A H^{-1} A^T y = -A H^{-1} b` solved within `Im(A)`.
pub fn quadratic_dual_solution(problem: &ProblemInstance, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (m, n) = (problem.node_count(), problem.dim);
    if a.ncols() != m {
        return Err(Error::DimensionMismatch { expected: format!("{m} columns"), found: format!("{} columns", a.ncols()) });
    }
    let mut hinv = DMatrix::zeros(m * n, m * n);
    let mut hb = nalgebra::DVector::zeros(m * n);
    for (i, f) in problem.nodes.iter().enumerate() {
        let NodeFunction::Quadratic { a: h, b, .. } = f else {
            return Err(Error::invalid("closed-form dual solution needs quadratic nodes"));
        };
        let inv = h.clone().cholesky().ok_or_else(|| Error::SolveFailed("node Hessian not positive definite".into()))?.inverse();
        hb.rows_mut(i * n, n).copy_from(&(&inv * b));
        hinv.view_mut((i * n, i * n), (n, n)).copy_from(&inv);
    }
    let big_a = crate::netgraph::kron_lift(a, n);
    let lhs = &big_a * &hinv * big_a.transpose();
    let rhs = -(&big_a * hb);
    let y = psd_pinv(&lhs, 1e-10) * rhs;
    Ok(NodeState::from_stacked(&y, a.nrows()).into_matrix())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Certificate {
    pub grad_norm: f64,
    pub y_norm: f64,
    pub f_gap: f64,
    pub ax_norm: f64,
    /// `|grad psi(y)| <= eps / R_y` and `|y| <= 2 R_y`.
    pub hypothesis: bool,
    /// `f(x(A^T y)) - f* <= 2 eps` and `|A x(A^T y)| <= eps / R_y`.
    pub conclusion: bool,
}

impl Certificate {
    pub fn holds(&self) -> bool {
        !self.hypothesis || self.conclusion
    }
}

/// Small-gradient certificate in original coordinates (unlifted oracle).
pub fn small_gradient_certificate(dual: &DualProblem<'_>, y: &DMatrix<f64>, eps: f64, r_y: f64, f_star: f64) -> Result<Certificate> {
    if dual.is_lifted() {
        return Err(Error::invalid("the certificate needs the dual iterate in original coordinates"));
    }
    let e = dual.exact(y)?;
    let f_gap = dual.primal_value(&e.x) - f_star;
    let ax_norm = dual.constraint_norm(&e.x);
    let slack = 1e-12 * (1.0 + f_star.abs());
    let hypothesis = e.grad_norm <= eps / r_y && y.norm() <= 2.0 * r_y;
    let conclusion = f_gap <= 2.0 * eps + slack && ax_norm <= eps / r_y + 1e-15;
    Ok(Certificate { grad_norm: e.grad_norm, y_norm: y.norm(), f_gap, ax_norm, hypothesis, conclusion })
}

/// `(f(x(A^T y)) - f*, <A x(A^T y), y>)`; the first never exceeds the second.
pub fn key_inequality(dual: &DualProblem<'_>, y: &DMatrix<f64>, f_star: f64) -> Result<(f64, f64)> {
    let e = dual.exact(y)?;
    Ok((dual.primal_value(&e.x) - f_star, e.grad.dot(y)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{build_laplacian, generate_graph, sqrt_psd, GraphFamily};
    use crate::problems::{make_quadratic, solve_reference};

    fn setup(m: usize, n: usize, seed: u64) -> (ProblemInstance, DMatrix<f64>, DMatrix<f64>) {
        let p = make_quadratic(m, n, 4.0, seed).unwrap();
        let w = build_laplacian(&generate_graph(GraphFamily::Path, m, 0).unwrap()).as_matrix().clone();
        let a = sqrt_psd(&w).unwrap();
        (p, w, a)
    }

    #[test]
    fn first_coefficients() {
        let lt = 3.0;
        assert!((spdstm_step(0.0, lt) - 1.0 / (2.0 * lt)).abs() < 1e-15);
        let a = 0.7;
        let r = spdstm_step(a, lt);
        assert!((2.0 * lt * r * r - a - r).abs() < 1e-12);
        let (l, mu) = (5.0, 0.2);
        let r = sstm_step(0.4, l, mu);
        assert!(((0.4 + r) * (1.0 + 0.4 * mu) - l * r * r).abs() < 1e-12);
        assert_eq!(rrma_stages(7.0, 1.0), 3);
        assert_eq!(rrma_stages(0.5, 1.0), 0);
    }

    #[test]
    fn zero_constraint_rejected() {
        let (p, _, _) = setup(3, 2, 0);
        assert!(DualProblem::new(&p, DMatrix::zeros(3, 3), DualNoise::default()).is_err());
        assert!(DualProblem::lifted(&p, &DMatrix::zeros(3, 3), DualNoise::default()).is_err());
    }

    #[test]
    fn danskin_gradient_matches_finite_differences() {
        let (p, _, a) = setup(4, 2, 1);
        let d = DualProblem::new(&p, a, DualNoise::default()).unwrap();
        let mut rng = rng_from_seed(3);
        let y = DMatrix::from_fn(4, 2, |_, _| StandardNormal.sample(&mut rng));
        let e = d.exact(&y).unwrap();
        let psi = |v: &DMatrix<f64>| {
            let x = d.exact(v).unwrap().x;
            d.psi(v, &x)
        };
        let h = 1e-5;
        for i in 0..4 {
            for j in 0..2 {
                let mut yp = y.clone();
                yp[(i, j)] += h;
                let mut ym = y.clone();
                ym[(i, j)] -= h;
                let fd = (psi(&yp) - psi(&ym)) / (2.0 * h);
                assert!((fd - e.grad[(i, j)]).abs() < 1e-5, "{fd} vs {}", e.grad[(i, j)]);
            }
        }
    }

    #[test]
    fn regularizer_gradient_vanishes_at_new_center() {
        let y0 = DMatrix::from_element(2, 2, 0.5);
        let mut reg = Regularizer::new(0.3, y0.clone());
        let c1 = DMatrix::from_element(2, 2, 1.5);
        let before = reg.gradient(&c1);
        reg.centers.push(c1.clone());
        assert!((reg.gradient(&c1) - before).amax() < 1e-15);
        assert_eq!(reg.constants(2.0), (0.3 * 3.0, 2.0 + 0.3 * 3.0));
    }

    #[test]
    fn ac_sa_first_midpoint_is_start() {
        let (p, _, a) = setup(3, 2, 2);
        let d = DualProblem::new(&p, a, DualNoise::default()).unwrap();
        let z0 = DMatrix::from_element(3, 2, 0.25);
        let mut first = None;
        let mut obs = |name: &str, v: &DMatrix<f64>| {
            if name == "y_md" && first.is_none() {
                first = Some(v.clone());
            }
        };
        ac_sa(&d, &Regularizer::new(0.1, z0.clone()), &z0, 3, 1, 0, &mut obs).unwrap();
        assert!((first.unwrap() - z0).amax() < 1e-15);
    }

    #[test]
    fn restart_formulas() {
        assert_eq!(restart_count(2.0, 0.5 / (2f64.sqrt() * 2.0), 0.5), 1);
        assert_eq!(restart_count(1.0, 8.0, 1.0), 7);
        let n = restart_inner_budget(1.0, 100.0, 1.0);
        let ok = |n: usize| {
            let nf = n as f64;
            1e4 * nf.ln().powi(4) / nf.powi(4) <= 1.0 / 32.0
        };
        assert!(ok(n) && !ok(n - 1));
        assert_eq!(restart_inner_budget(1.0, 1.0, 1.0), 2);
    }

    #[test]
    fn sstm_growth_without_strong_convexity() {
        let l = 2.0;
        let mut a = 1.0 / l;
        for k in 1..=200 {
            a += sstm_step(a, l, 0.0);
            let kf = k as f64;
            if k >= 10 {
                assert!(a * l / (kf * kf) > 0.2 && a * l / (kf * kf) < 1.0, "k={k} A={a}");
            }
        }
    }

    #[test]
    fn spdstm_recovers_solution() {
        let (p, w, _) = setup(3, 2, 4);
        let r = solve_reference(&p, 1e-12).unwrap();
        let d = DualProblem::lifted(&p, &w, DualNoise::default()).unwrap();
        let out = spdstm(&d, 800, &unit_batch, 0).unwrap();
        let xs = NodeState::consensual(3, &r.x_star);
        assert!((&out.x_tilde - xs.as_matrix()).amax() < 1e-3);
        assert_eq!(d.comm_rounds(), 800);
    }
}
