//! Experiment configuration, runner and scaling sweeps.
//!
//! A config is a TOML document (see `docs/config-schema.md`). Running it
//! produces a CSV trace and a JSON summary; a config with a `[sweep]` table
//! is run once per swept value and reduced to fitted log-log slopes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::consensus::{
    accelerated_consensus_report, best_contraction, estimate_contraction, run_consensus, ConsensusReport, MixingSource,
};
use crate::dual::{
    quadratic_dual_solution, restarted_rrma, spdstm, spdstm_batch, sstm_batch, sstm_sc, DualNoise, DualOracle,
    DualProblem, RestartConfig,
};
use crate::error::{Error, Result};
use crate::linalg::loglog_slope;
use crate::netgraph::{
    build_laplacian, generate_graph, generate_time_varying, metropolis_mixing, spectral_summary, sqrt_psd, Graph,
    GraphFamily, MixingMatrix, SpectralKind,
};
use crate::primal::{acc_dngd, dagd_consensus, dgd, diging, extra, inexact_oracle_params, RunSpec};
use crate::problems::{
    compute_constants, make_logistic, make_nonsmooth_with, make_quadratic, solve_reference, NonsmoothKind,
    NonsmoothOptions, ProblemInstance,
};
use crate::record::{DualRunRecord, RunRecord};
use crate::rng::{derive_seed, rng_from_seed};
use crate::sliding::{ry_bound, PlantedPenalty};
use crate::NodeState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemFamily {
    Quadratic,
    Logistic,
    L1Regression,
    Hinge,
    /// Noiseless l1 regression with a planted consensual minimiser and `f* = 0`.
    PlantedL1,
}

impl ProblemFamily {
    fn is_smooth(self) -> bool {
        matches!(self, Self::Quadratic | Self::Logistic)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub family: ProblemFamily,
    pub m: usize,
    pub n: usize,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    pub seed: Option<u64>,
    #[serde(default = "default_samples")]
    pub samples_per_node: usize,
    /// l2 regularisation of the logistic family.
    #[serde(default = "default_reg")]
    pub reg: f64,
    /// Label noise of the nonsmooth families.
    #[serde(default = "default_label_noise")]
    pub noise: f64,
    /// `M * R` of the planted l1 instance.
    #[serde(default = "default_mr")]
    pub mr: f64,
}

fn default_kappa() -> f64 {
    10.0
}
fn default_samples() -> usize {
    10
}
fn default_reg() -> f64 {
    0.1
}
fn default_label_noise() -> f64 {
    0.1
}
fn default_mr() -> f64 {
    0.12
}
fn default_window() -> usize {
    1
}
fn default_rounds() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub family: GraphFamily,
    pub m: usize,
    pub seed: Option<u64>,
    /// Per-round edge drop probability; positive values give a time-varying sequence.
    #[serde(default)]
    pub drop_prob: f64,
    /// Connectivity window `B` of the time-varying sequence.
    #[serde(default = "default_window")]
    pub window: usize,
    /// Length of the generated sequence (cycled when shorter than the run).
    #[serde(default = "default_rounds")]
    pub rounds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "snake_case", deny_unknown_fields)]
pub enum AlgorithmSpec {
    Consensus {
        #[serde(default)]
        accelerated: bool,
    },
    Dgd {
        alpha: Option<f64>,
    },
    Extra {
        alpha: Option<f64>,
    },
    AccDngd {
        eta: Option<f64>,
    },
    Diging {
        alpha: Option<f64>,
    },
    DagdConsensus {
        consensus_t: Option<usize>,
        delta_prime: Option<f64>,
        #[serde(default = "default_max_tau")]
        max_tau: usize,
    },
    Sliding {},
    Spdstm {
        #[serde(default)]
        sigma_x: f64,
        #[serde(default)]
        delta_y: f64,
        #[serde(default = "default_one")]
        batch_const: f64,
    },
    SstmSc {
        #[serde(default)]
        sigma_x: f64,
        #[serde(default)]
        delta_y: f64,
        #[serde(default = "default_one")]
        batch_const: f64,
    },
    RestartedRrma {
        r_y: Option<f64>,
        #[serde(default)]
        sigma_x: f64,
        #[serde(default = "default_one")]
        c_const: f64,
        #[serde(default = "default_beta")]
        beta: f64,
        #[serde(default)]
        zero_noise: bool,
    },
}

fn default_max_tau() -> usize {
    8
}
fn default_one() -> f64 {
    1.0
}
fn default_beta() -> f64 {
    0.1
}

/// Identifier and one-line description of every runnable algorithm.
pub const ALGORITHMS: &[(&str, &str)] = &[
    ("consensus", "plain gossip (or Laplacian-accelerated with accelerated = true)"),
    ("dgd", "decentralized gradient descent"),
    ("extra", "EXTRA, exact first-order method"),
    ("acc_dngd", "accelerated decentralized Nesterov gradient with tracking"),
    ("diging", "gradient tracking over fixed or time-varying graphs"),
    ("dagd_consensus", "accelerated gradient with inexact consensus subroutine"),
    ("sliding", "gradient sliding on the penalised planted l1 instance"),
    ("spdstm", "stochastic primal-dual similar triangles (lifted dual)"),
    ("sstm_sc", "similar triangles for strongly convex duals (lifted dual)"),
    ("restarted_rrma", "restarted recursive-regularisation AC-SA^2 (lifted dual)"),
];

impl AlgorithmSpec {
    pub fn id(&self) -> &'static str {
        match self {
            Self::Consensus { .. } => "consensus",
            Self::Dgd { .. } => "dgd",
            Self::Extra { .. } => "extra",
            Self::AccDngd { .. } => "acc_dngd",
            Self::Diging { .. } => "diging",
            Self::DagdConsensus { .. } => "dagd_consensus",
            Self::Sliding {} => "sliding",
            Self::Spdstm { .. } => "spdstm",
            Self::SstmSc { .. } => "sstm_sc",
            Self::RestartedRrma { .. } => "restarted_rrma",
        }
    }

    fn supports_varying(&self) -> bool {
        matches!(self, Self::Consensus { accelerated: false } | Self::Diging { .. } | Self::DagdConsensus { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetSpec {
    pub iterations: usize,
    /// Target accuracy; also sizes the schedules of `sliding`, `dagd_consensus`
    /// and `restarted_rrma`.
    pub eps: Option<f64>,
    /// Stop primal runs once both residual and consensus error reach `eps`.
    #[serde(default)]
    pub stop_at_eps: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    Eps,
    /// Values are node counts; the abscissa is the Laplacian condition number.
    Chi,
    /// Values are target condition numbers; the abscissa is the measured `kappa_g`.
    Kappa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMetric {
    Iterations,
    CommRounds,
    OracleCalls,
    SmoothCalls,
}

impl SweepMetric {
    fn key(self) -> &'static str {
        match self {
            Self::Iterations => "iterations",
            Self::CommRounds => "comm_rounds",
            Self::OracleCalls => "oracle_calls",
            Self::SmoothCalls => "smooth_calls",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub variable: SweepVariable,
    pub values: Vec<f64>,
    pub metric: Option<SweepMetric>,
    pub theory_slope: Option<f64>,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn default_tolerance() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed; problem, graph and algorithm seeds derive from it unless set.
    #[serde(default)]
    pub seed: u64,
    pub problem: ProblemSpec,
    pub graph: GraphSpec,
    pub algorithm: AlgorithmSpec,
    pub budget: BudgetSpec,
    pub output: Option<PathBuf>,
    pub sweep: Option<SweepSpec>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.problem;
        let g = &self.graph;
        if p.m != g.m {
            return Err(Error::config(
                "problem.m",
                format!("problem.m = {} does not match graph.m = {}", p.m, g.m),
            ));
        }
        if p.m < 2 {
            return Err(Error::config("problem.m", "need at least 2 nodes"));
        }
        if p.n == 0 {
            return Err(Error::config("problem.n", "must be positive"));
        }
        if !(p.kappa >= 1.0) {
            return Err(Error::config("problem.kappa", "must be at least 1"));
        }
        if p.samples_per_node == 0 {
            return Err(Error::config("problem.samples_per_node", "must be positive"));
        }
        if !(p.reg > 0.0) && p.family == ProblemFamily::Logistic {
            return Err(Error::config("problem.reg", "logistic regularisation must be positive"));
        }
        if !(p.mr > 0.0) {
            return Err(Error::config("problem.mr", "must be positive"));
        }
        if !(0.0..1.0).contains(&g.drop_prob) {
            return Err(Error::config("graph.drop_prob", "must lie in [0, 1)"));
        }
        if g.window == 0 || g.rounds == 0 {
            return Err(Error::config("graph.window", "window and rounds must be positive"));
        }
        if self.budget.iterations == 0 {
            return Err(Error::config("budget.iterations", "must be positive"));
        }
        if let Some(e) = self.budget.eps {
            if !(e > 0.0) {
                return Err(Error::config("budget.eps", "must be positive"));
            }
        }
        let a = &self.algorithm;
        if g.drop_prob > 0.0 && !a.supports_varying() {
            return Err(Error::config("graph.drop_prob", format!("`{}` needs a static graph", a.id())));
        }
        match a {
            AlgorithmSpec::Sliding {} if p.family != ProblemFamily::PlantedL1 => {
                return Err(Error::config("problem.family", "`sliding` runs on the planted_l1 family"));
            }
            AlgorithmSpec::Consensus { .. } | AlgorithmSpec::Sliding {} => {}
            _ if !p.family.is_smooth() => {
                return Err(Error::config("problem.family", format!("`{}` needs a smooth family", a.id())));
            }
            _ => {}
        }
        let needs_eps = matches!(
            a,
            AlgorithmSpec::Sliding {} | AlgorithmSpec::DagdConsensus { .. } | AlgorithmSpec::RestartedRrma { .. }
        ) || self.budget.stop_at_eps;
        if needs_eps && self.budget.eps.is_none() && !matches!(self.sweep, Some(SweepSpec { variable: SweepVariable::Eps, .. })) {
            return Err(Error::config("budget.eps", format!("required by `{}`", a.id())));
        }
        for (field, v) in step_params(a) {
            if let Some(v) = v {
                if !(v > 0.0) {
                    return Err(Error::config(format!("algorithm.{field}"), "must be positive"));
                }
            }
        }
        if let AlgorithmSpec::RestartedRrma { beta, .. } = a {
            if !(*beta > 0.0 && *beta < 1.0 / 3.0) {
                return Err(Error::config("algorithm.beta", "must lie in (0, 1/3)"));
            }
        }
        if let Some(s) = &self.sweep {
            if s.values.len() < 3 {
                return Err(Error::config("sweep.values", "need at least 3 values"));
            }
            if s.values.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(Error::config("sweep.values", "values must be positive"));
            }
            if s.variable == SweepVariable::Chi && s.values.iter().any(|v| v.fract() != 0.0 || *v < 2.0) {
                return Err(Error::config("sweep.values", "chi sweeps take node counts (integers >= 2)"));
            }
            if !(s.tolerance > 0.0) {
                return Err(Error::config("sweep.tolerance", "must be positive"));
            }
        }
        Ok(())
    }

    /// Copy with `value` substituted for the sweep variable.
    pub fn with_value(&self, var: SweepVariable, value: f64) -> Self {
        let mut c = self.clone();
        c.sweep = None;
        match var {
            SweepVariable::Eps => c.budget.eps = Some(value),
            SweepVariable::Kappa => c.problem.kappa = value,
            SweepVariable::Chi => {
                c.problem.m = value as usize;
                c.graph.m = value as usize;
            }
        }
        c
    }

    fn problem_seed(&self) -> u64 {
        self.problem.seed.unwrap_or_else(|| derive_seed(self.seed, 1))
    }

    fn graph_seed(&self) -> u64 {
        self.graph.seed.unwrap_or_else(|| derive_seed(self.seed, 2))
    }

    fn algorithm_seed(&self) -> u64 {
        derive_seed(self.seed, 3)
    }
}

fn step_params(a: &AlgorithmSpec) -> Vec<(&'static str, Option<f64>)> {
    match a {
        AlgorithmSpec::Dgd { alpha } | AlgorithmSpec::Extra { alpha } | AlgorithmSpec::Diging { alpha } => vec![("alpha", *alpha)],
        AlgorithmSpec::AccDngd { eta } => vec![("eta", *eta)],
        AlgorithmSpec::DagdConsensus { delta_prime, .. } => vec![("delta_prime", *delta_prime)],
        AlgorithmSpec::Spdstm { batch_const, .. } | AlgorithmSpec::SstmSc { batch_const, .. } => vec![("batch_const", Some(*batch_const))],
        AlgorithmSpec::RestartedRrma { r_y, c_const, .. } => vec![("r_y", *r_y), ("c_const", Some(*c_const))],
        _ => Vec::new(),
    }
}

/// Trace of one run, in the CSV layout of its family.
#[derive(Debug, Clone)]
pub enum Trace {
    Primal(RunRecord),
    Dual(DualRunRecord),
    Consensus(ConsensusReport),
}

impl Trace {
    pub fn to_csv(&self) -> String {
        match self {
            Self::Primal(r) => r.to_csv(),
            Self::Dual(r) => r.to_csv(),
            Self::Consensus(r) => r.to_csv(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub algorithm: String,
    pub seed: u64,
    pub iterations: usize,
    pub comm_rounds: u64,
    /// Mixing-matrix multiplications counted by the matrices themselves.
    pub mixing_applications: Option<u64>,
    pub grad_calls: u64,
    pub smooth_grad_calls: u64,
    pub zo_calls: u64,
    pub conj_calls: u64,
    pub final_f_residual: Option<f64>,
    pub final_consensus_error: Option<f64>,
    pub final_grad_norm: Option<f64>,
    pub final_gap: Option<f64>,
    pub final_ax_norm: Option<f64>,
    /// First trace row meeting the accuracy target.
    pub reached_eps_at: Option<usize>,
    pub kappa_g: Option<f64>,
    /// Condition number of the (base) graph Laplacian.
    pub chi: f64,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub trace: Trace,
    pub summary: Summary,
}

/// Counts at the first row meeting the target (or the final row for
/// fixed-schedule methods).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReachCounts {
    pub iterations: f64,
    pub comm_rounds: f64,
    pub oracle_calls: f64,
    pub smooth_calls: f64,
}

impl ReachCounts {
    fn get(&self, m: SweepMetric) -> f64 {
        match m {
            SweepMetric::Iterations => self.iterations,
            SweepMetric::CommRounds => self.comm_rounds,
            SweepMetric::OracleCalls => self.oracle_calls,
            SweepMetric::SmoothCalls => self.smooth_calls,
        }
    }
}

enum Network {
    Static(MixingMatrix),
    Varying(Vec<MixingMatrix>),
}

impl Network {
    fn source(&self) -> MixingSource<'_> {
        match self {
            Self::Static(m) => MixingSource::Static(m),
            Self::Varying(ms) => MixingSource::Varying(ms),
        }
    }

    fn applications(&self) -> u64 {
        self.source().applications()
    }

    fn as_static(&self) -> Result<&MixingMatrix> {
        match self {
            Self::Static(m) => Ok(m),
            Self::Varying(_) => Err(Error::config("graph.drop_prob", "this algorithm needs a static graph")),
        }
    }
}

fn build_problem(cfg: &ExperimentConfig) -> Result<ProblemInstance> {
    let p = &cfg.problem;
    let seed = cfg.problem_seed();
    match p.family {
        ProblemFamily::Quadratic => make_quadratic(p.m, p.n, p.kappa, seed),
        ProblemFamily::Logistic => make_logistic(p.m, p.n, p.samples_per_node, p.reg, seed),
        ProblemFamily::L1Regression | ProblemFamily::Hinge => {
            let kind = if p.family == ProblemFamily::Hinge { NonsmoothKind::Hinge } else { NonsmoothKind::L1Regression };
            let opts = NonsmoothOptions { samples_per_node: p.samples_per_node, noise: p.noise, weight: None };
            make_nonsmooth_with(p.m, p.n, kind, opts, seed).map(|(q, _)| q)
        }
        ProblemFamily::PlantedL1 => Err(Error::config("problem.family", "planted_l1 is only available to `sliding`")),
    }
}

fn laplacian_chi(g: &Graph) -> Result<f64> {
    let s = spectral_summary(build_laplacian(g).as_matrix(), SpectralKind::Laplacian)?;
    Ok(s.lambda_max / s.lambda_min_plus)
}

fn random_start(m: usize, n: usize, seed: u64) -> NodeState {
    let mut rng = rng_from_seed(seed);
    NodeState::from_matrix(DMatrix::from_fn(m, n, |_, _| StandardNormal.sample(&mut rng)))
}

/// Runs one config (its `sweep` table, if any, is ignored).
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Outcome> {
    cfg.validate()?;
    let graph = generate_graph(cfg.graph.family, cfg.graph.m, cfg.graph_seed())?;
    let chi = laplacian_chi(&graph)?;
    let eps = cfg.budget.eps;
    let iters = cfg.budget.iterations;
    let mut summary = Summary {
        algorithm: cfg.algorithm.id().to_string(),
        seed: cfg.seed,
        iterations: 0,
        comm_rounds: 0,
        mixing_applications: None,
        grad_calls: 0,
        smooth_grad_calls: 0,
        zo_calls: 0,
        conj_calls: 0,
        final_f_residual: None,
        final_consensus_error: None,
        final_grad_norm: None,
        final_gap: None,
        final_ax_norm: None,
        reached_eps_at: None,
        kappa_g: None,
        chi,
    };

    if let AlgorithmSpec::Sliding {} = cfg.algorithm {
        let eps = eps.ok_or_else(|| Error::config("budget.eps", "required by `sliding`"))?;
        let planted = PlantedPenalty::build(&graph, cfg.problem.n, cfg.problem.samples_per_node, cfg.problem.mr, cfg.problem_seed())?;
        let rec = planted.run(eps)?;
        fill_primal(&mut summary, &rec, Some(eps));
        return Ok(Outcome { trace: Trace::Primal(rec), summary });
    }

    let network = if cfg.graph.drop_prob > 0.0 {
        let seq = generate_time_varying(&graph, cfg.graph.rounds, cfg.graph.drop_prob, cfg.graph.window, cfg.graph_seed())?;
        Network::Varying(seq.mixing_matrices())
    } else {
        Network::Static(metropolis_mixing(&graph)?)
    };

    if let AlgorithmSpec::Consensus { accelerated } = cfg.algorithm {
        let x0 = random_start(cfg.problem.m, cfg.problem.n, cfg.algorithm_seed());
        let report = if accelerated {
            let w = build_laplacian(&graph);
            accelerated_consensus_report(&w, &x0, iters)?.1
        } else {
            let r = run_consensus(network.source(), &x0, iters).1;
            summary.mixing_applications = Some(network.applications());
            r
        };
        summary.iterations = report.iterations_run;
        summary.comm_rounds = report.iterations_run as u64;
        summary.final_consensus_error = Some(report.final_error);
        summary.reached_eps_at = eps.and_then(|e| report.rounds_to_relative(e));
        return Ok(Outcome { trace: Trace::Consensus(report), summary });
    }

    let problem = build_problem(cfg)?;
    let consts = compute_constants(&problem);
    summary.kappa_g = Some(consts.kappa_g);
    let reference = solve_reference(&problem, 1e-12)?;
    let mut spec = RunSpec::new(iters, reference.f_star);
    if cfg.budget.stop_at_eps {
        spec = spec.stop_at(eps.expect("validated"));
    }
    let x0 = NodeState::zeros(problem.node_count(), problem.dim);
    let primal = match &cfg.algorithm {
        AlgorithmSpec::Dgd { alpha } => Some(dgd(&problem, network.as_static()?, alpha.unwrap_or(0.5 / consts.l_l), &x0, spec)?),
        AlgorithmSpec::Extra { alpha } => Some(extra(&problem, network.as_static()?, alpha.unwrap_or(0.5 / consts.l_l), &x0, spec)?),
        AlgorithmSpec::AccDngd { eta } => Some(acc_dngd(&problem, network.as_static()?, eta.unwrap_or(0.05 / consts.l_l), &x0, spec)?),
        AlgorithmSpec::Diging { alpha } => Some(diging(&problem, network.source(), alpha.unwrap_or(0.2 / consts.l_l), &x0, spec)?),
        AlgorithmSpec::DagdConsensus { consensus_t, delta_prime, max_tau } => {
            let eps = eps.ok_or_else(|| Error::config("budget.eps", "required by `dagd_consensus`"))?;
            let contraction = match &network {
                Network::Static(m) => estimate_contraction(std::slice::from_ref(m), 1)?,
                Network::Varying(ms) => best_contraction(ms, *max_tau)?,
            };
            let ip = inexact_oracle_params(&problem, eps, *delta_prime, contraction, &reference, &x0)?;
            let t = consensus_t.unwrap_or(ip.consensus_t);
            Some(dagd_consensus(&problem, network.source(), ip.l_model, ip.mu_model, &x0, t, spec)?)
        }
        _ => None,
    };
    if let Some(rec) = primal {
        fill_primal(&mut summary, &rec, eps);
        summary.mixing_applications = Some(network.applications());
        return Ok(Outcome { trace: Trace::Primal(rec), summary });
    }

    // dual methods on sqrt(W), W the Laplacian of the base graph
    let w = build_laplacian(&graph).as_matrix().clone();
    let seed = cfg.algorithm_seed();
    let (dual, rec) = match &cfg.algorithm {
        AlgorithmSpec::Spdstm { sigma_x, delta_y, batch_const } => {
            let dual = DualProblem::lifted(&problem, &w, DualNoise { sigma_x: *sigma_x, delta_y: *delta_y, seed })?;
            let c = dual.constants();
            let target = eps.unwrap_or(1e-6);
            let rule = spdstm_batch(c.sigma_psi, 2.0 * c.l_psi, iters, 0.1, target, *batch_const);
            let out = spdstm(&dual, iters, &rule, seed)?;
            (dual, out.record)
        }
        AlgorithmSpec::SstmSc { sigma_x, delta_y, batch_const } => {
            let dual = DualProblem::lifted(&problem, &w, DualNoise { sigma_x: *sigma_x, delta_y: *delta_y, seed })?;
            let batch = sstm_batch(dual.constants(), iters, 0.1, eps.unwrap_or(1e-6), *batch_const);
            let y0 = DMatrix::zeros(problem.node_count(), problem.dim);
            let out = sstm_sc(&dual, &y0, iters, batch, seed)?;
            (dual, out.record)
        }
        AlgorithmSpec::RestartedRrma { r_y, sigma_x, c_const, beta, zero_noise } => {
            let eps = eps.ok_or_else(|| Error::config("budget.eps", "required by `restarted_rrma`"))?;
            let dual = DualProblem::lifted(&problem, &w, DualNoise { sigma_x: *sigma_x, delta_y: 0.0, seed })?;
            let r_y = match r_y {
                Some(r) => *r,
                None => default_r_y(&problem, &w, &reference.x_star)?,
            };
            let rc = RestartConfig { c_const: *c_const, beta: *beta, zero_noise: *zero_noise, workers: 0 };
            let y0 = DMatrix::zeros(problem.node_count(), problem.dim);
            let out = restarted_rrma(&dual, &y0, eps, r_y, rc, seed)?;
            (dual, out.record)
        }
        _ => unreachable!("all algorithm families handled"),
    };
    fill_dual(&mut summary, &dual, &rec, eps);
    Ok(Outcome { trace: Trace::Dual(rec), summary })
}

/// Exact `|y*|` for quadratic nodes, otherwise the gradient-norm bound.
fn default_r_y(problem: &ProblemInstance, w: &DMatrix<f64>, x_star: &nalgebra::DVector<f64>) -> Result<f64> {
    let a = sqrt_psd(w)?;
    if let Ok(y) = quadratic_dual_solution(problem, &a) {
        return Ok(y.norm().max(f64::MIN_POSITIVE));
    }
    let xs = NodeState::consensual(problem.node_count(), x_star);
    let g = problem.stacked_gradient(xs.as_matrix()).norm();
    let s = spectral_summary(w, SpectralKind::Laplacian)?;
    Ok(ry_bound(g, problem.node_count(), s.lambda_min_plus).max(f64::MIN_POSITIVE))
}

fn fill_primal(s: &mut Summary, rec: &RunRecord, eps: Option<f64>) {
    if let Some(last) = rec.last() {
        s.iterations = last.iter;
        s.comm_rounds = last.comm_rounds;
        s.grad_calls = last.grad_calls;
        s.smooth_grad_calls = last.smooth_grad_calls;
        s.zo_calls = last.zo_calls;
        s.final_f_residual = Some(last.f_residual);
        s.final_consensus_error = Some(last.consensus_error);
    }
    s.reached_eps_at = eps.and_then(|e| rec.first_reaching(e)).map(|r| r.iter);
}

fn fill_dual(s: &mut Summary, dual: &DualProblem<'_>, rec: &DualRunRecord, eps: Option<f64>) {
    if let Some(last) = rec.last() {
        s.iterations = last.iter;
        s.comm_rounds = last.comm_rounds;
        s.conj_calls = last.conj_calls;
        s.final_grad_norm = Some(last.grad_norm);
        s.final_gap = Some(last.gap);
        s.final_ax_norm = Some(last.ax_norm);
    }
    debug_assert_eq!(s.comm_rounds, dual.comm_rounds());
    s.reached_eps_at = eps.and_then(|e| rec.rows.iter().find(|r| r.gap.abs() <= e && r.ax_norm <= e)).map(|r| r.iter);
}

impl Outcome {
    /// Counts to reach `eps`. Sliding runs are sized for `eps`, so their final
    /// counts are used.
    pub fn reach_counts(&self, eps: Option<f64>) -> Result<ReachCounts> {
        let miss = || Error::invalid(format!("target eps = {eps:?} not reached within budget"));
        match &self.trace {
            Trace::Primal(rec) => {
                let row = if self.summary.algorithm == "sliding" {
                    rec.last().ok_or_else(miss)?
                } else {
                    rec.first_reaching(eps.ok_or_else(miss)?).ok_or_else(miss)?
                };
                Ok(ReachCounts {
                    iterations: row.iter as f64,
                    comm_rounds: row.comm_rounds as f64,
                    oracle_calls: row.grad_calls as f64,
                    smooth_calls: row.smooth_grad_calls as f64,
                })
            }
            Trace::Dual(rec) => {
                let e = eps.ok_or_else(miss)?;
                let row = rec.rows.iter().find(|r| r.gap.abs() <= e && r.ax_norm <= e).ok_or_else(miss)?;
                Ok(ReachCounts {
                    iterations: row.iter as f64,
                    comm_rounds: row.comm_rounds as f64,
                    oracle_calls: row.conj_calls as f64,
                    smooth_calls: 0.0,
                })
            }
            Trace::Consensus(rep) => {
                let k = rep.rounds_to_relative(eps.ok_or_else(miss)?).ok_or_else(miss)? as f64;
                Ok(ReachCounts { iterations: k, comm_rounds: k, oracle_calls: 0.0, smooth_calls: 0.0 })
            }
        }
    }
}

/// Writes `trace.csv` and `summary.json` into `dir`.
pub fn write_outputs(outcome: &Outcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("trace.csv"), outcome.trace.to_csv())?;
    let json = serde_json::to_string_pretty(&outcome.summary).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(dir.join("summary.json"), json + "\n")?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    /// Abscissa of the fit (eps, measured chi or measured kappa_g).
    pub x: f64,
    pub counts: ReachCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepFailure {
    pub value: f64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub variable: SweepVariable,
    pub points: Vec<SweepPoint>,
    /// Log-log slopes of each count against the abscissa.
    pub slopes: BTreeMap<String, f64>,
    pub metric: SweepMetric,
    pub theory_slope: Option<f64>,
    pub tolerance: f64,
    /// `None` without a theory slope or with fewer than 3 successful points.
    pub pass: Option<bool>,
    pub failures: Vec<SweepFailure>,
}

impl ScalingReport {
    pub fn slope(&self, m: SweepMetric) -> Option<f64> {
        self.slopes.get(m.key()).copied()
    }

    pub fn is_partial(&self) -> bool {
        !self.failures.is_empty()
    }
}

/// Runs the members of `cfg.sweep` on `workers` threads (0 = all cores).
pub fn sweep(cfg: &ExperimentConfig, workers: usize) -> Result<ScalingReport> {
    cfg.validate()?;
    let spec = cfg.sweep.clone().ok_or_else(|| Error::config("sweep", "missing [sweep] table"))?;
    let default_metric = match cfg.algorithm {
        AlgorithmSpec::Consensus { .. } => SweepMetric::CommRounds,
        AlgorithmSpec::DagdConsensus { .. } => SweepMetric::Iterations,
        _ => SweepMetric::OracleCalls,
    };
    let metric = spec.metric.unwrap_or(default_metric);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config("workers", e.to_string()))?;
    let results: Vec<(f64, Result<SweepPoint>)> = pool.install(|| {
        spec.values
            .par_iter()
            .map(|&v| {
                let member = cfg.with_value(spec.variable, v);
                let r = run_experiment(&member).and_then(|o| {
                    let counts = o.reach_counts(member.budget.eps)?;
                    let x = match spec.variable {
                        SweepVariable::Eps => v,
                        SweepVariable::Chi => o.summary.chi,
                        SweepVariable::Kappa => o.summary.kappa_g.unwrap_or(v),
                    };
                    Ok(SweepPoint { value: v, x, counts })
                });
                (v, r)
            })
            .collect()
    });
    let mut points = Vec::new();
    let mut failures = Vec::new();
    for (v, r) in results {
        match r {
            Ok(p) => points.push(p),
            Err(e) => failures.push(SweepFailure { value: v, error: e.to_string() }),
        }
    }
    let mut slopes = BTreeMap::new();
    if points.len() >= 2 {
        let xs: Vec<f64> = points.iter().map(|p| p.x).collect();
        for m in [SweepMetric::Iterations, SweepMetric::CommRounds, SweepMetric::OracleCalls, SweepMetric::SmoothCalls] {
            let ys: Vec<f64> = points.iter().map(|p| p.counts.get(m)).collect();
            if ys.iter().all(|&y| y > 0.0) {
                let s = loglog_slope(&xs, &ys);
                if s.is_finite() {
                    slopes.insert(m.key().to_string(), s);
                }
            }
        }
    }
    let pass = match (spec.theory_slope, slopes.get(metric.key())) {
        (Some(t), Some(s)) if points.len() >= 3 => Some(failures.is_empty() && (s - t).abs() <= spec.tolerance),
        _ => None,
    };
    Ok(ScalingReport { variable: spec.variable, points, slopes, metric, theory_slope: spec.theory_slope, tolerance: spec.tolerance, pass, failures })
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
seed = 7

[problem]
family = "quadratic"
m = 4
n = 3
kappa = 5.0

[graph]
family = "path"
m = 4

[algorithm]
id = "extra"

[budget]
iterations = 50
"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg = ExperimentConfig::from_toml(BASE).unwrap();
        assert_eq!(cfg.algorithm, AlgorithmSpec::Extra { alpha: None });
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn mismatched_m_names_both_fields() {
        let text = BASE.replace("m = 4\n\n[algorithm]", "m = 5\n\n[algorithm]");
        let err = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("problem.m") && err.contains("graph.m"), "{err}");
    }

    #[test]
    fn unknown_fields_rejected() {
        let text = BASE.replace("kappa = 5.0", "kappa = 5.0\nkapa = 3.0");
        assert!(ExperimentConfig::from_toml(&text).is_err());
        let text = BASE.replace("id = \"extra\"", "id = \"extra\"\nstep = 0.1");
        assert!(ExperimentConfig::from_toml(&text).is_err());
        let text = BASE.replace("id = \"extra\"", "id = \"newton\"");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn family_and_graph_compatibility() {
        let text = BASE.replace("\"quadratic\"", "\"hinge\"");
        assert!(ExperimentConfig::from_toml(&text).unwrap_err().to_string().contains("problem.family"));
        let text = BASE.replace("m = 4\n\n[algorithm]", "m = 4\ndrop_prob = 0.2\n\n[algorithm]");
        assert!(ExperimentConfig::from_toml(&text).unwrap_err().to_string().contains("graph.drop_prob"));
        let text = BASE.replace("id = \"extra\"", "id = \"dagd_consensus\"");
        assert!(ExperimentConfig::from_toml(&text).unwrap_err().to_string().contains("budget.eps"));
    }

    #[test]
    fn sweep_needs_three_values() {
        let text = format!("{BASE}\n[sweep]\nvariable = \"kappa\"\nvalues = [10.0, 100.0]\n");
        assert!(ExperimentConfig::from_toml(&text).unwrap_err().to_string().contains("sweep.values"));
    }

    #[test]
    fn run_is_deterministic_and_counts_match() {
        let cfg = ExperimentConfig::from_toml(BASE).unwrap();
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.trace.to_csv(), b.trace.to_csv());
        assert_eq!(a.summary.mixing_applications, Some(a.summary.comm_rounds));
        assert_eq!(a.summary.iterations, 50);
    }

    #[test]
    fn algorithm_table_covers_every_variant() {
        let ids: Vec<_> = ALGORITHMS.iter().map(|(id, _)| *id).collect();
        for body in ["consensus", "dgd", "extra", "acc_dngd", "diging", "dagd_consensus", "sliding", "spdstm", "sstm_sc", "restarted_rrma"] {
            let a: AlgorithmSpec = toml::from_str(&format!("id = \"{body}\"")).unwrap();
            assert!(ids.contains(&a.id()));
        }
    }
}
