//! Test objectives with known constants, conjugate oracles and reference
//! solutions.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::netgraph::{matrix_from_csv, matrix_to_csv};
use crate::oracle::Objective;
use crate::rng::{rng_from_seed, Rng};

/// Per-node objective.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeFunction {
    /// `x^T A x / 2 - b^T x + c`.
    Quadratic { a: DMatrix<f64>, b: DVector<f64>, c: f64 },
    /// `<c, x> + offset`.
    Affine { c: DVector<f64>, offset: f64 },
    /// `mean_j log(1 + exp(-y_j z_j^T x)) + reg/2 |x|^2`, rows of `z` are samples.
    Logistic { z: DMatrix<f64>, y: DVector<f64>, reg: f64 },
    /// `weight * sum_j |z_j^T x - b_j|`.
    L1Regression { z: DMatrix<f64>, b: DVector<f64>, weight: f64 },
    /// `weight * sum_j max(0, 1 - y_j z_j^T x)`.
    Hinge { z: DMatrix<f64>, y: DVector<f64>, weight: f64 },
}

/// Midpoint of the subdifferential of `|t|`.
fn sign_mid(t: f64) -> f64 {
    if t > 0.0 {
        1.0
    } else if t < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn log1pexp(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl NodeFunction {
    pub fn quadratic(a: DMatrix<f64>, b: DVector<f64>) -> Self {
        Self::Quadratic { a, b, c: 0.0 }
    }

    pub fn linear(c: DVector<f64>) -> Self {
        Self::Affine { c, offset: 0.0 }
    }

    pub fn constant(n: usize, value: f64) -> Self {
        Self::Affine { c: DVector::zeros(n), offset: value }
    }

    pub fn logistic(z: DMatrix<f64>, y: DVector<f64>, reg: f64) -> Self {
        Self::Logistic { z, y, reg }
    }

    pub fn l1_regression(z: DMatrix<f64>, b: DVector<f64>, weight: f64) -> Self {
        Self::L1Regression { z, b, weight }
    }

    pub fn hinge(z: DMatrix<f64>, y: DVector<f64>, weight: f64) -> Self {
        Self::Hinge { z, y, weight }
    }

    pub fn is_smooth(&self) -> bool {
        matches!(self, Self::Quadratic { .. } | Self::Affine { .. } | Self::Logistic { .. })
    }

    /// Strong convexity and smoothness constants `(mu, L)`; `(0, 0)` for nonsmooth kinds.
    pub fn constants(&self) -> (f64, f64) {
        match self {
            Self::Quadratic { a, .. } => {
                let e = linalg::eigenvalues(a);
                (e[0].max(0.0), e[e.len() - 1].max(0.0))
            }
            Self::Affine { .. } => (0.0, 0.0),
            Self::Logistic { z, reg, .. } => {
                let s = z.nrows().max(1) as f64;
                let ztz = z.transpose() * z;
                let top = linalg::eigenvalues(&ztz).last().copied().unwrap_or(0.0).max(0.0);
                (*reg, reg + top / (4.0 * s))
            }
            Self::L1Regression { .. } | Self::Hinge { .. } => (0.0, 0.0),
        }
    }

    /// Global bound on subgradient norms; infinite for functions with
    /// unbounded gradients.
    pub fn lipschitz_bound(&self) -> f64 {
        let rows = |z: &DMatrix<f64>| z.row_iter().map(|r| r.norm()).sum::<f64>();
        match self {
            Self::Affine { c, .. } => c.norm(),
            Self::Quadratic { .. } => f64::INFINITY,
            Self::Logistic { z, reg, .. } => {
                if *reg > 0.0 {
                    f64::INFINITY
                } else {
                    rows(z) / z.nrows().max(1) as f64
                }
            }
            Self::L1Regression { z, weight, .. } | Self::Hinge { z, weight, .. } => weight * rows(z),
        }
    }

    pub fn hessian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        match self {
            Self::Quadratic { a, .. } => Some(a.clone()),
            Self::Affine { c, .. } => Some(DMatrix::zeros(c.len(), c.len())),
            Self::Logistic { z, y, reg } => {
                let s = z.nrows().max(1) as f64;
                let n = z.ncols();
                let mut h = DMatrix::identity(n, n) * *reg;
                for (j, row) in z.row_iter().enumerate() {
                    let t = y[j] * row.dot(&x.transpose());
                    let p = sigmoid(t);
                    let w = p * (1.0 - p) / s;
                    h += row.transpose() * row * w;
                }
                Some(h)
            }
            _ => None,
        }
    }

    /// `argmax_x <y, x> - f(x)`, requiring strong convexity.
    pub fn conjugate_argmax(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            Self::Quadratic { a, b, .. } => linalg::spd_solve(a, &(y + b)),
            Self::Logistic { reg, .. } if *reg > 0.0 => {
                newton_minimize(|x| self.value(x) - y.dot(x), |x| self.gradient(x) - y, |x| {
                    self.hessian(x).expect("logistic hessian")
                }, DVector::zeros(y.len()), 1e-12, 200)
            }
            _ => Err(Error::invalid("conjugate oracle needs a strongly convex smooth node function")),
        }
    }
}

impl Objective for NodeFunction {
    fn dim(&self) -> usize {
        match self {
            Self::Quadratic { b, .. } => b.len(),
            Self::Affine { c, .. } => c.len(),
            Self::Logistic { z, .. } | Self::L1Regression { z, .. } | Self::Hinge { z, .. } => z.ncols(),
        }
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        match self {
            Self::Quadratic { a, b, c } => 0.5 * x.dot(&(a * x)) - b.dot(x) + c,
            Self::Affine { c, offset } => c.dot(x) + offset,
            Self::Logistic { z, y, reg } => {
                let s = z.nrows().max(1) as f64;
                let zx = z * x;
                let loss: f64 = zx.iter().zip(y.iter()).map(|(t, yj)| log1pexp(-yj * t)).sum();
                loss / s + 0.5 * reg * x.norm_squared()
            }
            Self::L1Regression { z, b, weight } => weight * (z * x - b).iter().map(|r| r.abs()).sum::<f64>(),
            Self::Hinge { z, y, weight } => {
                let zx = z * x;
                weight * zx.iter().zip(y.iter()).map(|(t, yj)| (1.0 - yj * t).max(0.0)).sum::<f64>()
            }
        }
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::Quadratic { a, b, .. } => a * x - b,
            Self::Affine { c, .. } => c.clone(),
            Self::Logistic { z, y, reg } => {
                let s = z.nrows().max(1) as f64;
                let zx = z * x;
                let coef = DVector::from_iterator(z.nrows(), (0..z.nrows()).map(|j| -y[j] * sigmoid(-y[j] * zx[j]) / s));
                z.transpose() * coef + x * *reg
            }
            Self::L1Regression { z, b, weight } => {
                let r = z * x - b;
                z.transpose() * r.map(sign_mid) * *weight
            }
            Self::Hinge { z, y, weight } => {
                let zx = z * x;
                let coef = DVector::from_iterator(
                    z.nrows(),
                    (0..z.nrows()).map(|j| {
                        let margin = 1.0 - y[j] * zx[j];
                        let d = if margin > 0.0 {
                            1.0
                        } else if margin < 0.0 {
                            0.0
                        } else {
                            0.5
                        };
                        -y[j] * d
                    }),
                );
                z.transpose() * coef * *weight
            }
        }
    }
}

/// Damped Newton with backtracking on a smooth strongly convex function.
pub fn newton_minimize(
    f: impl Fn(&DVector<f64>) -> f64,
    grad: impl Fn(&DVector<f64>) -> DVector<f64>,
    hess: impl Fn(&DVector<f64>) -> DMatrix<f64>,
    mut x: DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<DVector<f64>> {
    for _ in 0..max_iter {
        let g = grad(&x);
        if g.norm() <= tol {
            return Ok(x);
        }
        let h = hess(&x);
        let step = linalg::spd_solve(&h, &g)?;
        let fx = f(&x);
        let slope = g.dot(&step);
        if g.norm() < 1e-6 {
            // Inside the quadratic-convergence region; function values are
            // too flat for a line search to be meaningful.
            x -= &step;
            continue;
        }
        let mut t = 1.0;
        loop {
            let cand = &x - &step * t;
            if f(&cand) <= fx - 0.25 * t * slope || t < 1e-10 {
                x = cand;
                break;
            }
            t *= 0.5;
        }
    }
    let g = grad(&x).norm();
    if g <= tol {
        Ok(x)
    } else {
        Err(Error::SolveFailed(format!("newton stopped with gradient norm {g:e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Domain {
    AllSpace,
    Box { lo: f64, hi: f64 },
    Simplex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonsmoothKind {
    L1Regression,
    Hinge,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemInstance {
    pub nodes: Vec<NodeFunction>,
    pub mu: Vec<f64>,
    pub l: Vec<f64>,
    /// Per-node subgradient bounds (infinite when unbounded).
    pub lipschitz: Vec<f64>,
    pub domain: Domain,
    pub dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantSummary {
    pub mu_l: f64,
    pub l_l: f64,
    pub mu_g: f64,
    pub l_g: f64,
    pub kappa_l: f64,
    pub kappa_g: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSolution {
    pub x_star: DVector<f64>,
    pub f_star: f64,
    pub method_note: String,
    pub tolerance: f64,
}

impl ProblemInstance {
    pub fn new(nodes: Vec<NodeFunction>, domain: Domain) -> Result<Self> {
        let dim = nodes.first().map(Objective::dim).ok_or_else(|| Error::invalid("no nodes"))?;
        if nodes.iter().any(|f| f.dim() != dim) {
            return Err(Error::invalid("node functions have different dimensions"));
        }
        let (mu, l): (Vec<f64>, Vec<f64>) = nodes.iter().map(NodeFunction::constants).unzip();
        let lipschitz = nodes.iter().map(NodeFunction::lipschitz_bound).collect();
        Ok(Self { nodes, mu, l, lipschitz, domain, dim })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_smooth(&self) -> bool {
        self.nodes.iter().all(NodeFunction::is_smooth)
    }

    /// `f(x) = sum_i f_i(x)`.
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        self.nodes.iter().map(|f| f.value(x)).sum()
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.nodes.iter().fold(DVector::zeros(self.dim), |acc, f| acc + f.gradient(x))
    }

    /// `F(X) = sum_i f_i(x_i)`.
    pub fn stacked_value(&self, x: &DMatrix<f64>) -> f64 {
        self.nodes.iter().enumerate().map(|(i, f)| f.value(&x.row(i).transpose())).sum()
    }

    /// Rows `grad f_i(x_i)`.
    pub fn stacked_gradient(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(x.nrows(), x.ncols());
        for (i, f) in self.nodes.iter().enumerate() {
            g.set_row(i, &f.gradient(&x.row(i).transpose()).transpose());
        }
        g
    }

    /// Max per-node subgradient bound.
    pub fn lipschitz_max(&self) -> f64 {
        self.lipschitz.iter().copied().fold(0.0, f64::max)
    }

    /// Bound for the stacked function `F` on `R^{mn}`: `sqrt(sum M_i^2)`.
    pub fn stacked_lipschitz(&self) -> f64 {
        self.lipschitz.iter().map(|m| m * m).sum::<f64>().sqrt()
    }

    /// Write matrices and vectors as CSV files plus a JSON manifest.
    pub fn write_bundle(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut nodes = Vec::new();
        for (i, f) in self.nodes.iter().enumerate() {
            let (kind, mat, vec, scalar) = match f {
                NodeFunction::Quadratic { a, b, c } => ("quadratic", a, b, *c),
                NodeFunction::Affine { c, offset } => ("affine", &DMatrix::zeros(0, 0), c, *offset),
                NodeFunction::Logistic { z, y, reg } => ("logistic", z, y, *reg),
                NodeFunction::L1Regression { z, b, weight } => ("l1_regression", z, b, *weight),
                NodeFunction::Hinge { z, y, weight } => ("hinge", z, y, *weight),
            };
            let mname = format!("node{i}_matrix.csv");
            let vname = format!("node{i}_vector.csv");
            fs::write(dir.join(&mname), matrix_to_csv(mat))?;
            fs::write(dir.join(&vname), matrix_to_csv(&DMatrix::from_column_slice(vec.len(), 1, vec.as_slice())))?;
            nodes.push(BundleNode { kind: kind.into(), matrix: mname, vector: vname, scalar, dim: self.dim });
        }
        let manifest = Bundle { domain: self.domain, nodes };
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
        fs::write(dir.join("problem.json"), json)?;
        Ok(())
    }

    pub fn read_bundle(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("problem.json"))?;
        let manifest: Bundle = serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
        let mut nodes = Vec::new();
        for n in manifest.nodes {
            let mat = matrix_from_csv(&fs::read_to_string(dir.join(&n.matrix))?)?;
            let v = matrix_from_csv(&fs::read_to_string(dir.join(&n.vector))?)?;
            let vec = DVector::from_column_slice(v.as_slice());
            nodes.push(match n.kind.as_str() {
                "quadratic" => NodeFunction::Quadratic { a: mat, b: vec, c: n.scalar },
                "affine" => NodeFunction::Affine { c: vec, offset: n.scalar },
                "logistic" => NodeFunction::Logistic { z: mat, y: vec, reg: n.scalar },
                "l1_regression" => NodeFunction::L1Regression { z: mat, b: vec, weight: n.scalar },
                "hinge" => NodeFunction::Hinge { z: mat, y: vec, weight: n.scalar },
                other => return Err(Error::Parse(format!("unknown node kind `{other}`"))),
            });
        }
        Self::new(nodes, manifest.domain)
    }
}

#[derive(Serialize, Deserialize)]
struct Bundle {
    domain: Domain,
    nodes: Vec<BundleNode>,
}

#[derive(Serialize, Deserialize)]
struct BundleNode {
    kind: String,
    matrix: String,
    vector: String,
    scalar: f64,
    dim: usize,
}

pub fn compute_constants(p: &ProblemInstance) -> ConstantSummary {
    let m = p.mu.len() as f64;
    let mu_l = p.mu.iter().copied().fold(f64::INFINITY, f64::min);
    let l_l = p.l.iter().copied().fold(0.0, f64::max);
    let mu_g = p.mu.iter().sum::<f64>() / m;
    let l_g = p.l.iter().sum::<f64>() / m;
    ConstantSummary { mu_l, l_l, mu_g, l_g, kappa_l: l_l / mu_l, kappa_g: l_g / mu_g }
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn gaussian_vector(n: usize, rng: &mut Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// Random orthogonal matrix.
pub fn random_rotation(n: usize, rng: &mut Rng) -> DMatrix<f64> {
    gaussian_matrix(n, n, rng).qr().q()
}

/// Strongly convex quadratics sharing one eigenbasis, so the spectrum of the
/// sum spans exactly `[sum mu_i, sum L_i]` and `kappa_g = kappa_target`.
pub fn make_quadratic(m: usize, n: usize, kappa_target: f64, seed: u64) -> Result<ProblemInstance> {
    if kappa_target < 1.0 || m == 0 || n == 0 {
        return Err(Error::invalid("need m, n >= 1 and kappa_target >= 1"));
    }
    let mut rng = rng_from_seed(seed);
    let q = random_rotation(n, &mut rng);
    let mut nodes = Vec::with_capacity(m);
    let (mut mu, mut l) = (Vec::with_capacity(m), Vec::with_capacity(m));
    for _ in 0..m {
        let scale = 0.5 + rng.random::<f64>();
        let mut eig = vec![0.0; n];
        eig[0] = scale;
        if n > 1 {
            eig[n - 1] = scale * kappa_target;
            for e in eig.iter_mut().take(n - 1).skip(1) {
                *e = scale * kappa_target.powf(rng.random::<f64>());
            }
        }
        mu.push(eig[0]);
        l.push(eig[n - 1]);
        let d = DMatrix::from_diagonal(&DVector::from_vec(eig));
        let a = &q * d * q.transpose();
        let a = (&a + a.transpose()) * 0.5;
        let b = gaussian_vector(n, &mut rng) * (1.0 + scale);
        nodes.push(NodeFunction::quadratic(a, b));
    }
    let mut p = ProblemInstance::new(nodes, Domain::AllSpace)?;
    // The intended spectrum is exact; keep it instead of eigen-solver output.
    p.mu = mu;
    p.l = l;
    Ok(p)
}

pub fn make_logistic(m: usize, n: usize, samples_per_node: usize, reg_mu: f64, seed: u64) -> Result<ProblemInstance> {
    if reg_mu < 0.0 || samples_per_node == 0 {
        return Err(Error::invalid("need reg_mu >= 0 and samples_per_node >= 1"));
    }
    let mut rng = rng_from_seed(seed);
    let w = gaussian_vector(n, &mut rng);
    let nodes = (0..m)
        .map(|_| {
            let z = gaussian_matrix(samples_per_node, n, &mut rng);
            let y = DVector::from_fn(samples_per_node, |j, _| {
                let t = z.row(j).dot(&w.transpose()) + 0.5 * rng.random::<f64>() - 0.25;
                if t >= 0.0 {
                    1.0
                } else {
                    -1.0
                }
            });
            NodeFunction::logistic(z, y, reg_mu)
        })
        .collect();
    ProblemInstance::new(nodes, Domain::AllSpace)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NonsmoothOptions {
    pub samples_per_node: usize,
    /// Label/target noise. With zero noise the planted point is a common
    /// minimiser of every node with `f* = 0` (l1 regression).
    pub noise: f64,
    /// Overall multiplier; `None` means `1/samples_per_node`.
    pub weight: Option<f64>,
}

impl Default for NonsmoothOptions {
    fn default() -> Self {
        Self { samples_per_node: 10, noise: 0.1, weight: None }
    }
}

pub fn make_nonsmooth(m: usize, n: usize, kind: NonsmoothKind, seed: u64) -> Result<ProblemInstance> {
    make_nonsmooth_with(m, n, kind, NonsmoothOptions::default(), seed).map(|(p, _)| p)
}

/// Also returns the planted parameter vector.
pub fn make_nonsmooth_with(
    m: usize,
    n: usize,
    kind: NonsmoothKind,
    opts: NonsmoothOptions,
    seed: u64,
) -> Result<(ProblemInstance, DVector<f64>)> {
    let s = opts.samples_per_node.max(1);
    let weight = opts.weight.unwrap_or(1.0 / s as f64);
    let mut rng = rng_from_seed(seed);
    let planted = gaussian_vector(n, &mut rng);
    let nodes = (0..m)
        .map(|_| {
            let z = gaussian_matrix(s, n, &mut rng);
            let clean = &z * &planted;
            match kind {
                NonsmoothKind::L1Regression => {
                    let b = DVector::from_fn(s, |j, _| {
                        let eps: f64 = StandardNormal.sample(&mut rng);
                        clean[j] + opts.noise * eps
                    });
                    NodeFunction::l1_regression(z, b, weight)
                }
                NonsmoothKind::Hinge => {
                    let y = DVector::from_fn(s, |j, _| {
                        let flip = rng.random::<f64>() < opts.noise;
                        let sgn = if clean[j] >= 0.0 { 1.0 } else { -1.0 };
                        if flip {
                            -sgn
                        } else {
                            sgn
                        }
                    });
                    NodeFunction::hinge(z, y, weight)
                }
            }
        })
        .collect();
    Ok((ProblemInstance::new(nodes, Domain::AllSpace)?, planted))
}

/// Per-node conjugate argmax for rows of `y`.
pub fn conjugate_argmax(p: &ProblemInstance, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut x = DMatrix::zeros(y.nrows(), y.ncols());
    for (i, f) in p.nodes.iter().enumerate() {
        x.set_row(i, &f.conjugate_argmax(&y.row(i).transpose())?.transpose());
    }
    Ok(x)
}

/// Centralized reference solution of `min_x sum_i f_i(x)`.
pub fn solve_reference(p: &ProblemInstance, tol: f64) -> Result<ReferenceSolution> {
    if tol <= 0.0 {
        return Err(Error::invalid("tolerance must be positive"));
    }
    if p.domain != Domain::AllSpace {
        return Err(Error::invalid("reference solver handles unconstrained instances only"));
    }
    if p.nodes.iter().all(|f| matches!(f, NodeFunction::Quadratic { .. })) {
        let n = p.dim;
        let mut a = DMatrix::zeros(n, n);
        let mut b = DVector::zeros(n);
        for f in &p.nodes {
            if let NodeFunction::Quadratic { a: ai, b: bi, .. } = f {
                a += ai;
                b += bi;
            }
        }
        let x = linalg::spd_solve(&a, &b)?;
        // One refinement step against rounding.
        let r = &a * &x - &b;
        let x = &x - linalg::spd_solve(&a, &r)?;
        let g = p.gradient(&x).norm();
        if g > tol {
            return Err(Error::Certification(format!("gradient norm {g:e} above {tol:e}")));
        }
        return Ok(ReferenceSolution { f_star: p.value(&x), x_star: x, method_note: "closed form".into(), tolerance: g });
    }
    if p.is_smooth() {
        let x = newton_minimize(
            |x| p.value(x),
            |x| p.gradient(x),
            |x| p.nodes.iter().fold(DMatrix::zeros(p.dim, p.dim), |acc, f| acc + f.hessian(x).unwrap()),
            DVector::zeros(p.dim),
            tol,
            500,
        )
        .map_err(|e| Error::Certification(e.to_string()))?;
        let g = p.gradient(&x).norm();
        return Ok(ReferenceSolution { f_star: p.value(&x), x_star: x, method_note: "newton".into(), tolerance: g });
    }
    subgradient_reference(p, 1_000_000, tol)
}

/// Subgradient descent with diminishing normalised steps; keeps the best
/// iterate. The certificate is heuristic: the largest decrease found by
/// probing random directions around the returned point.
pub fn subgradient_reference(p: &ProblemInstance, iters: usize, tol: f64) -> Result<ReferenceSolution> {
    let mut x = DVector::zeros(p.dim);
    let mut best = x.clone();
    let mut best_f = p.value(&x);
    let radius = 1.0 + best_f.abs().sqrt();
    for k in 0..iters {
        let g = p.gradient(&x);
        let gn = g.norm();
        if gn == 0.0 {
            break;
        }
        x -= g * (radius / ((k + 1) as f64).sqrt() / gn);
        let fx = p.value(&x);
        if fx < best_f {
            best_f = fx;
            best.copy_from(&x);
        }
    }
    let mut rng = rng_from_seed(0x5eed);
    let mut gap = 0.0f64;
    for h in [1e-2, 1e-3, 1e-4] {
        for _ in 0..200 {
            let e = crate::oracle::sphere_sample(p.dim, &mut rng);
            gap = gap.max(best_f - p.value(&(&best + e * h)));
        }
    }
    if gap > tol {
        return Err(Error::Certification(format!("probe found decrease {gap:e} above {tol:e}")));
    }
    Ok(ReferenceSolution {
        x_star: best,
        f_star: best_f,
        method_note: format!("subgradient descent, {iters} steps, best iterate"),
        tolerance: gap.max(0.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(s: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(s)
    }

    #[test]
    fn quadratic_trivial_cases() {
        let p = ProblemInstance::new(vec![NodeFunction::quadratic(DMatrix::identity(2, 2), DVector::zeros(2))], Domain::AllSpace)
            .unwrap();
        let r = solve_reference(&p, 1e-10).unwrap();
        assert!(r.x_star.norm() < 1e-15 && r.f_star.abs() < 1e-15);
        let p = ProblemInstance::new(
            vec![
                NodeFunction::quadratic(DMatrix::identity(2, 2), v(&[1.0, 0.0])),
                NodeFunction::quadratic(DMatrix::identity(2, 2), v(&[0.0, 1.0])),
            ],
            Domain::AllSpace,
        )
        .unwrap();
        let r = solve_reference(&p, 1e-10).unwrap();
        assert!((r.x_star - v(&[0.5, 0.5])).amax() < 1e-14);
    }

    #[test]
    fn random_quadratic_matches_linear_solve() {
        let p = make_quadratic(4, 5, 30.0, 3).unwrap();
        let mut a = DMatrix::zeros(5, 5);
        let mut b = DVector::zeros(5);
        for f in &p.nodes {
            if let NodeFunction::Quadratic { a: ai, b: bi, .. } = f {
                a += ai;
                b += bi;
            }
        }
        let x = a.lu().solve(&b).unwrap();
        let r = solve_reference(&p, 1e-10).unwrap();
        assert!((r.x_star - x).amax() < 1e-10);
        let c = compute_constants(&p);
        assert!((c.kappa_g - 30.0).abs() < 1e-9);
        assert!(c.kappa_g <= c.kappa_l);
        for (i, f) in p.nodes.iter().enumerate() {
            let (mu, l) = f.constants();
            assert!((mu - p.mu[i]).abs() < 1e-9 * l && (l - p.l[i]).abs() < 1e-9 * l);
        }
    }

    #[test]
    fn constants_arithmetic() {
        let mut p = make_quadratic(2, 2, 10.0, 0).unwrap();
        p.mu = vec![1.0, 1.0];
        p.l = vec![10.0, 10.0];
        let c = compute_constants(&p);
        assert_eq!((c.mu_l, c.mu_g, c.l_l, c.l_g), (1.0, 1.0, 10.0, 10.0));
        p.mu = vec![1.0, 3.0];
        p.l = vec![10.0, 20.0];
        let c = compute_constants(&p);
        assert_eq!((c.mu_l, c.mu_g, c.l_l, c.l_g), (1.0, 2.0, 20.0, 15.0));
    }

    #[test]
    fn logistic_properties() {
        let z = DMatrix::zeros(4, 3);
        let y = v(&[1.0, -1.0, 1.0, -1.0]);
        let f = NodeFunction::logistic(z, y, 0.5);
        assert!(f.gradient(&DVector::zeros(3)).norm() < 1e-15);

        let p = make_logistic(3, 4, 20, 0.1, 8).unwrap();
        let mut rng = rng_from_seed(1);
        for _ in 0..10 {
            let x = gaussian_vector(4, &mut rng);
            for f in &p.nodes {
                let g = f.gradient(&x);
                let h = 1e-6;
                for i in 0..4 {
                    let mut xp = x.clone();
                    xp[i] += h;
                    let mut xm = x.clone();
                    xm[i] -= h;
                    let fd = (f.value(&xp) - f.value(&xm)) / (2.0 * h);
                    assert!((fd - g[i]).abs() < 1e-6);
                }
            }
        }
        let r = solve_reference(&p, 1e-10).unwrap();
        assert!(p.gradient(&r.x_star).norm() <= 1e-10);
    }

    #[test]
    fn nonsmooth_cases() {
        let abs = NodeFunction::l1_regression(DMatrix::identity(1, 1), DVector::zeros(1), 1.0);
        assert_eq!(abs.gradient(&DVector::zeros(1))[0], 0.0);
        let two = NodeFunction::l1_regression(DMatrix::from_element(2, 1, 1.0), v(&[1.0, -1.0]), 1.0);
        let p = ProblemInstance::new(vec![two], Domain::AllSpace).unwrap();
        let r = solve_reference(&p, 1e-4).unwrap();
        assert!((r.f_star - 2.0).abs() < 1e-12);
        assert!(r.x_star[0].abs() <= 1.0);
        let hinge = NodeFunction::hinge(DMatrix::identity(1, 1), v(&[1.0]), 1.0);
        assert_eq!(hinge.gradient(&v(&[1.0]))[0], -0.5);
    }

    /// Exhaustive vertex search for small l1 regressions: the optimum of a
    /// polyhedral function with full-rank data is attained where `n`
    /// residuals vanish.
    fn l1_vertex_oracle(p: &ProblemInstance) -> f64 {
        let mut rows = Vec::new();
        for f in &p.nodes {
            if let NodeFunction::L1Regression { z, b, .. } = f {
                for j in 0..z.nrows() {
                    rows.push((z.row(j).transpose(), b[j]));
                }
            }
        }
        let n = p.dim;
        assert_eq!(n, 2);
        let mut best = f64::INFINITY;
        for i in 0..rows.len() {
            for j in (i + 1)..rows.len() {
                let a = DMatrix::from_rows(&[rows[i].0.transpose(), rows[j].0.transpose()]);
                if let Some(x) = a.lu().solve(&v(&[rows[i].1, rows[j].1])) {
                    best = best.min(p.value(&x));
                }
            }
        }
        best
    }

    #[test]
    fn l1_reference_matches_vertex_search() {
        let opts = NonsmoothOptions { samples_per_node: 6, noise: 0.5, weight: None };
        let (p, _) = make_nonsmooth_with(3, 2, NonsmoothKind::L1Regression, opts, 4).unwrap();
        let r = solve_reference(&p, 1e-4).unwrap();
        let exact = l1_vertex_oracle(&p);
        assert!(r.f_star - exact <= 1e-4 && r.f_star >= exact - 1e-12, "{} vs {}", r.f_star, exact);
    }

    #[test]
    fn conjugates() {
        let f = NodeFunction::quadratic(DMatrix::identity(3, 3), DVector::zeros(3));
        let y = v(&[0.3, -2.0, 5.0]);
        assert!((f.conjugate_argmax(&y).unwrap() - &y).amax() < 1e-15);
        let d = NodeFunction::quadratic(DMatrix::from_diagonal(&v(&[2.0, 4.0])), DVector::zeros(2));
        assert!((d.conjugate_argmax(&v(&[2.0, 4.0])).unwrap() - v(&[1.0, 1.0])).amax() < 1e-15);
        assert!(NodeFunction::constant(2, 1.0).conjugate_argmax(&v(&[1.0, 1.0])).is_err());

        let p = make_logistic(1, 3, 15, 0.2, 2).unwrap();
        let f = &p.nodes[0];
        let phi = |y: &DVector<f64>| {
            let x = f.conjugate_argmax(y).unwrap();
            y.dot(&x) - f.value(&x)
        };
        let y = v(&[0.1, -0.3, 0.2]);
        let x = f.conjugate_argmax(&y).unwrap();
        assert!((&y - f.gradient(&x)).norm() <= 1e-10);
        let h = 1e-6;
        for i in 0..3 {
            let mut yp = y.clone();
            yp[i] += h;
            let mut ym = y.clone();
            ym[i] -= h;
            assert!(((phi(&yp) - phi(&ym)) / (2.0 * h) - x[i]).abs() <= 1e-6);
        }
    }

    #[test]
    fn bundle_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = make_logistic(2, 3, 4, 0.1, 1).unwrap();
        p.write_bundle(dir.path()).unwrap();
        assert_eq!(ProblemInstance::read_bundle(dir.path()).unwrap(), p);
        let q = make_nonsmooth(2, 2, NonsmoothKind::Hinge, 1).unwrap();
        q.write_bundle(dir.path()).unwrap();
        assert_eq!(ProblemInstance::read_bundle(dir.path()).unwrap(), q);
    }

    fn check_certificate(p: &ProblemInstance, rng: &mut crate::rng::Rng) -> std::result::Result<(), TestCaseError> {
        for _ in 0..100 {
            let x = gaussian_vector(p.dim, rng) * 2.0;
            let y = gaussian_vector(p.dim, rng) * 2.0;
            for (i, f) in p.nodes.iter().enumerate() {
                let gx = f.gradient(&x);
                let gy = f.gradient(&y);
                let d = (&x - &y).norm();
                prop_assert!((&gx - &gy).norm() <= p.l[i] * d * (1.0 + 1e-9) + 1e-12);
                let lower = f.value(&x) + gx.dot(&(&y - &x)) + 0.5 * p.mu[i] * d * d;
                prop_assert!(f.value(&y) >= lower - 1e-9 * (1.0 + lower.abs()));
            }
        }
        Ok(())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn smoothness_certificates(seed in 0u64..1000, kappa in 1.0f64..200.0) {
            let mut rng = rng_from_seed(seed);
            check_certificate(&make_quadratic(3, 4, kappa, seed).unwrap(), &mut rng)?;
            check_certificate(&make_logistic(3, 4, 10, 0.05, seed).unwrap(), &mut rng)?;
        }

        #[test]
        fn stacked_sandwich(seed in 0u64..1000) {
            // On consensual pairs, F(1x) = m f_bar(x) with f_bar between mu_g and L_g.
            let p = make_quadratic(4, 3, 20.0, seed).unwrap();
            let c = compute_constants(&p);
            let mut rng = rng_from_seed(seed);
            let m = p.node_count() as f64;
            for _ in 0..20 {
                let x = gaussian_vector(3, &mut rng);
                let y = gaussian_vector(3, &mut rng);
                let d2 = (&x - &y).norm_squared();
                let fx = p.value(&x) / m;
                let fy = p.value(&y) / m;
                let lin = fx + (p.gradient(&x) / m).dot(&(&y - &x));
                prop_assert!(fy - lin >= 0.5 * c.mu_g * d2 * (1.0 - 1e-9));
                prop_assert!(fy - lin <= 0.5 * c.l_g * d2 * (1.0 + 1e-9));
            }
        }

        #[test]
        fn conjugate_optimality(seed in 0u64..500) {
            let p = make_logistic(2, 3, 8, 0.3, seed).unwrap();
            let mut rng = rng_from_seed(seed);
            let y = gaussian_vector(3, &mut rng) * 0.3;
            for f in &p.nodes {
                let x = f.conjugate_argmax(&y).unwrap();
                prop_assert!((&y - f.gradient(&x)).norm() <= 1e-10);
            }
        }
    }
}
