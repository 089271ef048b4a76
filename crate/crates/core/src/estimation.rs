//! M-step of the EM identification and the outer EM loop.
//!
//! The expected terms needed by the M-step are evaluated from the six
//! smoother statistics only. The Hadamard-product forms are evaluated edge
//! by edge (`J' XX J` is never formed); the `M theta` terms use the identity
//! `M(t) theta = ((A - I) T(t) + B P(t)) / dtau`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GraphOperators;
use crate::linalg::{is_diagonal, spd_inverse, symmetrize, symmetrized, CsrMatrix};
use crate::model::{assemble, ThetaParams};
use crate::smoother::{accumulate_stats, rtss_steady, SmootherStats};
use crate::solvers::SolverOptions;

/// Floor applied to fitted covariance parameters that come out non-positive.
pub const POSITIVE_FLOOR: f64 = 1e-12;

/// Condition number above which the normal matrix is declared singular.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConstraintKind {
    /// `Q = q I`
    #[serde(rename = "qI")]
    ScalarIdentity,
    /// `Q = diag(q)`
    #[serde(rename = "diag")]
    Diagonal,
    /// `Q = alpha L L' + beta I`
    #[serde(rename = "aLLbI")]
    AlphaLLBetaI,
}

impl ConstraintKind {
    pub fn label(self) -> &'static str {
        match self {
            ConstraintKind::ScalarIdentity => "qI",
            ConstraintKind::Diagonal => "diag",
            ConstraintKind::AlphaLLBetaI => "aLLbI",
        }
    }
}

impl fmt::Display for ConstraintKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ConstraintKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qI" | "qi" | "scalar" => Ok(ConstraintKind::ScalarIdentity),
            "diag" | "diagonal" => Ok(ConstraintKind::Diagonal),
            "aLLbI" | "allbi" | "alpha-beta" => Ok(ConstraintKind::AlphaLLBetaI),
            _ => Err(Error::Parse(format!("unknown covariance constraint '{s}' (expected qI, diag or aLLbI)"))),
        }
    }
}

/// Structured process-noise covariance.
#[derive(Clone, Debug, PartialEq)]
pub enum CovarianceConstraint {
    ScalarIdentity { q: f64 },
    Diagonal { q: DVector<f64> },
    AlphaLLBetaI { ll: DMatrix<f64>, alpha: f64, beta: f64 },
}

impl CovarianceConstraint {
    /// Every free parameter set to `value`. `ll` is `L L'`, required for
    /// [`ConstraintKind::AlphaLLBetaI`].
    pub fn initial(kind: ConstraintKind, n: usize, value: f64, ll: Option<DMatrix<f64>>) -> Result<Self> {
        if !(value > 0.0) {
            return Err(Error::InvalidArgument(format!("initial covariance parameter must be positive, got {value}")));
        }
        Ok(match kind {
            ConstraintKind::ScalarIdentity => CovarianceConstraint::ScalarIdentity { q: value },
            ConstraintKind::Diagonal => CovarianceConstraint::Diagonal { q: DVector::from_element(n, value) },
            ConstraintKind::AlphaLLBetaI => {
                let ll = ll.ok_or_else(|| Error::InvalidArgument("alpha LL' + beta I needs the L L' matrix".to_string()))?;
                if ll.shape() != (n, n) {
                    return Err(Error::Dimension(format!("L L' is {:?}, expected {n}x{n}", ll.shape())));
                }
                CovarianceConstraint::AlphaLLBetaI { ll, alpha: value, beta: value }
            }
        })
    }

    pub fn kind(&self) -> ConstraintKind {
        match self {
            CovarianceConstraint::ScalarIdentity { .. } => ConstraintKind::ScalarIdentity,
            CovarianceConstraint::Diagonal { .. } => ConstraintKind::Diagonal,
            CovarianceConstraint::AlphaLLBetaI { .. } => ConstraintKind::AlphaLLBetaI,
        }
    }

    pub fn covariance(&self, n: usize) -> DMatrix<f64> {
        match self {
            CovarianceConstraint::ScalarIdentity { q } => DMatrix::from_diagonal_element(n, n, *q),
            CovarianceConstraint::Diagonal { q } => DMatrix::from_diagonal(q),
            CovarianceConstraint::AlphaLLBetaI { ll, alpha, beta } => {
                ll * *alpha + DMatrix::from_diagonal_element(n, n, *beta)
            }
        }
    }

    pub fn inverse(&self, n: usize) -> Result<DMatrix<f64>> {
        match self {
            CovarianceConstraint::ScalarIdentity { q } => Ok(DMatrix::from_diagonal_element(n, n, 1.0 / q)),
            CovarianceConstraint::Diagonal { q } => Ok(DMatrix::from_diagonal(&q.map(|v| 1.0 / v))),
            CovarianceConstraint::AlphaLLBetaI { .. } => spd_inverse(&self.covariance(n)),
        }
    }

    /// Weight matrix used in the parameter update. The scalar factor of
    /// `q I` cancels from the normal equations, so the identity is used.
    pub fn weight(&self, n: usize) -> Result<DMatrix<f64>> {
        match self {
            CovarianceConstraint::ScalarIdentity { .. } => Ok(DMatrix::identity(n, n)),
            _ => self.inverse(n),
        }
    }

    /// Flat parameter list: `[q]`, `q_1..q_n` or `[alpha, beta]`.
    pub fn params(&self) -> Vec<f64> {
        match self {
            CovarianceConstraint::ScalarIdentity { q } => vec![*q],
            CovarianceConstraint::Diagonal { q } => q.iter().copied().collect(),
            CovarianceConstraint::AlphaLLBetaI { alpha, beta, .. } => vec![*alpha, *beta],
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        match self {
            CovarianceConstraint::ScalarIdentity { .. } => vec!["q".to_string()],
            CovarianceConstraint::Diagonal { q } => (1..=q.len()).map(|i| format!("q_{i}")).collect(),
            CovarianceConstraint::AlphaLLBetaI { .. } => vec!["alpha".to_string(), "beta".to_string()],
        }
    }
}

/// Frobenius-nearest member of the constraint family to `q_full`.
pub fn project_constraint(q_full: &DMatrix<f64>, current: &CovarianceConstraint) -> Result<CovarianceConstraint> {
    let n = q_full.nrows();
    match current {
        CovarianceConstraint::ScalarIdentity { .. } => {
            let q = q_full.trace() / n as f64;
            Ok(CovarianceConstraint::ScalarIdentity { q: floor_positive("q", q) })
        }
        CovarianceConstraint::Diagonal { .. } => {
            let q = q_full.diagonal().map(|v| floor_positive("q_i", v));
            Ok(CovarianceConstraint::Diagonal { q })
        }
        CovarianceConstraint::AlphaLLBetaI { ll, .. } => {
            let (alpha, beta) = fit_alpha_beta(q_full, ll)?;
            Ok(CovarianceConstraint::AlphaLLBetaI {
                ll: ll.clone(),
                alpha: floor_positive("alpha", alpha),
                beta: floor_positive("beta", beta),
            })
        }
    }
}

/// Least squares `[alpha; beta] = (F'F)^-1 F' vec(Q)` with
/// `F = [vec(LL'), vec(I)]`.
pub fn fit_alpha_beta(q_full: &DMatrix<f64>, ll: &DMatrix<f64>) -> Result<(f64, f64)> {
    let n = q_full.nrows() as f64;
    let ll_ll = ll.norm_squared();
    let ll_i = ll.trace();
    let det = ll_ll * n - ll_i * ll_i;
    if !(det > 1e-12 * ll_ll * n) {
        return Err(Error::Config("vec(LL') and vec(I) are collinear; alpha and beta are not separable".to_string()));
    }
    let ll_q = ll.component_mul(q_full).sum();
    let i_q = q_full.trace();
    let alpha = (n * ll_q - ll_i * i_q) / det;
    let beta = (ll_ll * i_q - ll_i * ll_q) / det;
    Ok((alpha, beta))
}

fn floor_positive(name: &str, v: f64) -> f64 {
    if v > POSITIVE_FLOOR {
        v
    } else {
        log::warn!("fitted covariance parameter {name} = {v:.3e} is not positive; clamped to {POSITIVE_FLOOR:e}");
        POSITIVE_FLOOR
    }
}

/// Fixed 0/1 pattern `L`: one where the structural coupling matrix
/// `Ihead diag(Csel 1) J'` is nonzero, excluding the last (ambient) column.
pub fn build_l(ops: &GraphOperators) -> DMatrix<f64> {
    let n = ops.n();
    let mut l = DMatrix::zeros(n, n);
    for e in ops.edges() {
        for col in [e.tail, e.head] {
            if col + 1 < n {
                l[(e.head, col)] = 1.0;
            }
        }
    }
    l
}

/// The five expectation aggregates over `t = 1..N-1`.
#[derive(Clone, Debug)]
pub struct ExpectedTerms {
    /// `sum E[dT dT']`
    pub dt_dt: DMatrix<f64>,
    /// `sum E[M' W M]`
    pub m_w_m: DMatrix<f64>,
    /// `sum E[M theta theta' M']`
    pub mt_mt: DMatrix<f64>,
    /// `sum E[M' W dT]`
    pub m_w_dt: DVector<f64>,
    /// `sum E[dT theta' M']`
    pub dt_mt: DMatrix<f64>,
    pub transitions: usize,
}

/// All five aggregates; `weight` plays the role of `Q^-1`.
pub fn expected_terms(
    stats: &SmootherStats,
    ops: &GraphOperators,
    weight: &DMatrix<f64>,
    theta: &ThetaParams,
) -> Result<ExpectedTerms> {
    let (m_w_m, m_w_dt) = normal_equations(stats, ops, weight, theta.dtau)?;
    let (dt_dt, dt_mt, mt_mt) = residual_terms(stats, ops, theta)?;
    Ok(ExpectedTerms { dt_dt, m_w_m, mt_mt, m_w_dt, dt_mt, transitions: stats.transitions() })
}

fn check_stats(stats: &SmootherStats, ops: &GraphOperators) -> Result<()> {
    let (n, np) = (ops.n(), ops.n_p());
    let ok = stats.xx.shape() == (n, n)
        && stats.zz.shape() == (n, n)
        && stats.xz.shape() == (n, n)
        && stats.xu.shape() == (n, np)
        && stats.zu.shape() == (n, np)
        && stats.uu.shape() == (np, np);
    if !ok {
        return Err(Error::Dimension(format!(
            "statistics ({:?}, {:?}, {:?}) do not match operators n = {n}, n_P = {np}",
            stats.xx.shape(),
            stats.xu.shape(),
            stats.uu.shape()
        )));
    }
    Ok(())
}

/// `sum E[M' W M]` and `sum E[M' W dT]`.
pub fn normal_equations(
    stats: &SmootherStats,
    ops: &GraphOperators,
    weight: &DMatrix<f64>,
    dtau: f64,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    check_stats(stats, ops)?;
    let n = ops.n();
    if weight.shape() != (n, n) {
        return Err(Error::Dimension(format!("weight is {:?}, expected {n}x{n}", weight.shape())));
    }
    let nk = ops.n_k();
    let p = ops.n_theta();
    let edges = ops.edges();
    let sources = ops.sources();
    let xx = &stats.xx;
    let xu = &stats.xu;

    // edges grouped by head; with a diagonal weight only equal heads interact
    let mut heads: Vec<(usize, Vec<usize>)> = Vec::new();
    for (l, e) in edges.iter().enumerate() {
        match heads.iter_mut().find(|(h, _)| *h == e.head) {
            Some((_, list)) => list.push(l),
            None => heads.push((e.head, vec![l])),
        }
    }
    let diagonal = is_diagonal(weight);

    let mut normal = DMatrix::zeros(p, p);
    for (h1, g1) in &heads {
        for (h2, g2) in &heads {
            if diagonal && h1 != h2 {
                continue;
            }
            let w = weight[(*h1, *h2)];
            if w == 0.0 {
                continue;
            }
            for &l1 in g1 {
                let e1 = &edges[l1];
                for &l2 in g2 {
                    let e2 = &edges[l2];
                    let s = xx[(e1.tail, e2.tail)] - xx[(e1.tail, e2.head)] - xx[(e1.head, e2.tail)]
                        + xx[(e1.head, e2.head)];
                    normal[(e1.class, e2.class)] += w * e1.scale * e2.scale * s;
                }
            }
        }
    }
    for e in edges {
        for (q, s) in sources.iter().enumerate() {
            let w = weight[(e.head, s.compartment)];
            if w == 0.0 {
                continue;
            }
            let v = e.scale * s.scale * s.gain_scale * w * (xu[(e.tail, q)] - xu[(e.head, q)]);
            normal[(e.class, nk + s.class)] += v;
            normal[(nk + s.class, e.class)] += v;
        }
    }
    for (q1, s1) in sources.iter().enumerate() {
        for (q2, s2) in sources.iter().enumerate() {
            let w = weight[(s1.compartment, s2.compartment)];
            if w == 0.0 {
                continue;
            }
            normal[(nk + s1.class, nk + s2.class)] +=
                s1.scale * s1.gain_scale * s2.scale * s2.gain_scale * w * stats.uu[(q1, q2)];
        }
    }
    symmetrize(&mut normal);

    // G = (XZ - XX) W'
    let d = &stats.xz - xx;
    let g = if diagonal {
        let mut g = d.clone();
        for (j, mut col) in g.column_iter_mut().enumerate() {
            col.scale_mut(weight[(j, j)]);
        }
        g
    } else {
        d * weight.transpose()
    };
    let mut rhs = DVector::zeros(p);
    for e in edges {
        rhs[e.class] += e.scale * (g[(e.tail, e.head)] - g[(e.head, e.head)]) / dtau;
    }
    let du = &stats.zu - xu;
    for (q, s) in sources.iter().enumerate() {
        let row = weight.row(s.compartment);
        let v: f64 = row.iter().zip(du.column(q).iter()).map(|(w, x)| w * x).sum();
        rhs[nk + s.class] += s.scale * s.gain_scale * v / dtau;
    }
    Ok((normal, rhs))
}

/// `(A - I) / dtau` in sparse form.
fn rate_matrix(ops: &GraphOperators, theta: &ThetaParams) -> CsrMatrix {
    let n = ops.n();
    let mut rate = DMatrix::zeros(n, n);
    for e in ops.edges() {
        let w = e.scale * theta.k[e.class];
        rate[(e.head, e.tail)] += w;
        rate[(e.head, e.head)] -= w;
    }
    CsrMatrix::from_dense(&rate)
}

/// `sum E[dT dT']`, `sum E[dT theta' M']` and `sum E[M theta theta' M']`.
pub fn residual_terms(
    stats: &SmootherStats,
    ops: &GraphOperators,
    theta: &ThetaParams,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    check_stats(stats, ops)?;
    if theta.k.len() != ops.n_k() || theta.z.len() != ops.n_z() {
        return Err(Error::Dimension("theta does not match the operators".to_string()));
    }
    let dtau = theta.dtau;
    let rate = rate_matrix(ops, theta);
    let mut gain = DMatrix::zeros(ops.n(), ops.n_p());
    for (q, s) in ops.sources().iter().enumerate() {
        gain[(s.compartment, q)] = s.scale * s.gain_scale * theta.z[s.class];
    }

    let mut dt_dt = (&stats.xx - &stats.xz - stats.xz.transpose() + &stats.zz) / (dtau * dtau);
    symmetrize(&mut dt_dt);

    // rate XX rate' + rate XU G' + G XU' rate' + G UU G'
    let r_xx = rate.mul_dense(&stats.xx);
    let r_xx_r = rate.mul_dense(&r_xx.transpose());
    let r_xu_g = rate.mul_dense(&stats.xu) * gain.transpose();
    let g_uu_g = &gain * &stats.uu * gain.transpose();
    let mt_mt = symmetrized(r_xx_r + &r_xu_g + r_xu_g.transpose() + g_uu_g);

    // ((XZ - XX)' rate' + (ZU - XU) G') / dtau
    let d = &stats.xz - &stats.xx;
    let dt_mt = (rate.mul_dense(&d).transpose() + (&stats.zu - &stats.xu) * gain.transpose()) / dtau;
    Ok((dt_dt, dt_mt, mt_mt))
}

/// Weighted least-squares parameter update `(sum M'WM)^-1 sum M'W dT`.
pub fn update_theta(normal: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let p = normal.nrows();
    let diag = normal.diagonal();
    let null: Vec<usize> = (0..p).filter(|&i| !(diag[i] > 0.0)).collect();
    if !null.is_empty() {
        return Err(Error::Identifiability { condition: f64::INFINITY, indices: null });
    }
    let scale = diag.map(|v| 1.0 / v.sqrt());
    let scaled = DMatrix::from_fn(p, p, |i, j| normal[(i, j)] * scale[i] * scale[j]);
    let eig = scaled.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if condition > MAX_CONDITION {
        let mut indices: Vec<usize> = Vec::new();
        for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
            if lambda <= max / MAX_CONDITION {
                for i in 0..p {
                    if eig.eigenvectors[(i, j)].abs() > 0.1 && !indices.contains(&i) {
                        indices.push(i);
                    }
                }
            }
        }
        indices.sort_unstable();
        return Err(Error::Identifiability { condition, indices });
    }
    let scaled_rhs = rhs.component_mul(&scale);
    let sol = scaled
        .cholesky()
        .map(|c| c.solve(&scaled_rhs))
        .ok_or(Error::Identifiability { condition, indices: Vec::new() })?;
    Ok(sol.component_mul(&scale))
}

/// Unconstrained ML covariance from terms evaluated at the new parameters.
pub fn update_q_full(terms: &ExpectedTerms) -> DMatrix<f64> {
    let sum = &terms.dt_dt - &terms.dt_mt - terms.dt_mt.transpose() + &terms.mt_mt;
    symmetrized(sum / terms.transitions as f64)
}

#[derive(Clone, Debug)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Stop when `max_i |theta_i - theta_i_prev| / |theta_i_prev|` falls below.
    pub theta_tol: f64,
    pub theta_init: ThetaParams,
    pub q_init: f64,
    pub constraint: ConstraintKind,
    /// Known measurement covariance.
    pub r: DMatrix<f64>,
    pub solver: SolverOptions,
    /// Allowed log-likelihood decrease before a warning is logged.
    pub loglik_slack: f64,
}

impl EmConfig {
    pub fn new(theta_init: ThetaParams, constraint: ConstraintKind, r: DMatrix<f64>) -> Self {
        EmConfig {
            max_iter: 500,
            theta_tol: 1e-6,
            theta_init,
            q_init: 1e-2,
            constraint,
            r,
            solver: SolverOptions::default(),
            loglik_slack: 1e-8,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.max_iter < 1 {
            return Err(Error::InvalidArgument("max_iter must be at least 1".to_string()));
        }
        if !(self.theta_tol > 0.0) || !(self.q_init > 0.0) {
            return Err(Error::InvalidArgument("tolerances and q_init must be positive".to_string()));
        }
        self.theta_init.validate()
    }
}

/// Measured data and structure for one identification run.
#[derive(Clone, Copy, Debug)]
pub struct EmProblem<'a> {
    pub ops: &'a GraphOperators,
    pub observed: &'a [usize],
    /// `n_y x N`
    pub observations: &'a DMatrix<f64>,
    /// `n_P x N`
    pub inputs: &'a DMatrix<f64>,
    pub initial: &'a DVector<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmIteration {
    pub iteration: usize,
    /// Parameters after this iteration's M-step.
    pub theta: ThetaParams,
    /// Covariance parameters after this iteration's M-step.
    pub constraint_params: Vec<f64>,
    /// Innovation log-likelihood of the E-step (previous parameters).
    pub loglik: f64,
    pub theta_change: f64,
    pub q_full_trace: f64,
    pub dare_residual: f64,
    pub dlyap_residual: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmTrace {
    pub constraint: Option<ConstraintKind>,
    pub constraint_names: Vec<String>,
    pub records: Vec<EmIteration>,
}

impl EmTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Converged,
    MaxIter,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::Converged => "converged",
            StopReason::MaxIter => "max_iter",
        })
    }
}

#[derive(Clone, Debug)]
pub struct EmResult {
    pub theta: ThetaParams,
    pub constraint: CovarianceConstraint,
    pub trace: EmTrace,
    pub stop: StopReason,
}

/// An aborted run together with everything recorded before the failure.
#[derive(Debug)]
pub struct EmFailure {
    pub error: Error,
    pub trace: EmTrace,
}

impl fmt::Display for EmFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EM aborted after {} iterations: {}", self.trace.len(), self.error)
    }
}

impl std::error::Error for EmFailure {}

/// Alternate steady-state smoothing with the M-step updates. The parameter
/// update uses the previous covariance estimate; the covariance update uses
/// the new parameters.
pub fn run_em(problem: &EmProblem<'_>, cfg: &EmConfig) -> std::result::Result<EmResult, EmFailure> {
    let mut trace = EmTrace { constraint: Some(cfg.constraint), ..EmTrace::default() };
    let fail = |error: Error, trace: EmTrace| EmFailure { error, trace };
    if let Err(e) = cfg.validate() {
        return Err(fail(e, trace));
    }
    let ops = problem.ops;
    let n = ops.n();
    let ll = match cfg.constraint {
        ConstraintKind::AlphaLLBetaI => {
            let l = build_l(ops);
            Some(&l * l.transpose())
        }
        _ => None,
    };
    let mut constraint = match CovarianceConstraint::initial(cfg.constraint, n, cfg.q_init, ll) {
        Ok(c) => c,
        Err(e) => return Err(fail(e, trace)),
    };
    trace.constraint_names = constraint.param_names();
    let mut theta = cfg.theta_init.clone();
    let mut prev_loglik = f64::NEG_INFINITY;

    for iteration in 1..=cfg.max_iter {
        let step = em_iteration(problem, cfg, &theta, &constraint);
        let (next_theta, next_constraint, record) = match step {
            Ok(v) => v,
            Err(e) => return Err(fail(e, trace)),
        };
        if record.loglik < prev_loglik - cfg.loglik_slack * prev_loglik.abs().max(1.0) {
            log::warn!(
                "log-likelihood decreased at iteration {iteration}: {:.10e} -> {:.10e}",
                prev_loglik,
                record.loglik
            );
        }
        prev_loglik = record.loglik;
        let change = record.theta_change;
        let record = EmIteration { iteration, ..record };
        log::debug!(
            "EM {iteration}: loglik {:.6e}, change {:.3e}, theta {:?}",
            record.loglik,
            change,
            next_theta.vector().as_slice()
        );
        trace.records.push(record);
        theta = next_theta;
        constraint = next_constraint;
        if change < cfg.theta_tol {
            return Ok(EmResult { theta, constraint, trace, stop: StopReason::Converged });
        }
    }
    Ok(EmResult { theta, constraint, trace, stop: StopReason::MaxIter })
}

fn em_iteration(
    problem: &EmProblem<'_>,
    cfg: &EmConfig,
    theta: &ThetaParams,
    constraint: &CovarianceConstraint,
) -> Result<(ThetaParams, CovarianceConstraint, EmIteration)> {
    let ops = problem.ops;
    let n = ops.n();
    let model = assemble(ops, theta, problem.observed, constraint.covariance(n), cfg.r.clone())?;
    let smoothed = rtss_steady(&model, problem.observations, problem.inputs, problem.initial, cfg.solver)?;
    let stats = accumulate_stats(&smoothed, problem.inputs)?;

    let weight = constraint.weight(n)?;
    let (normal, rhs) = normal_equations(&stats, ops, &weight, theta.dtau)?;
    let mut raw = update_theta(&normal, &rhs)?;
    for (i, v) in raw.iter_mut().enumerate() {
        if *v < 0.0 {
            log::warn!("parameter {i} estimated negative ({v:.3e}); clamped to 0");
            *v = 0.0;
        }
    }
    let next_theta = ThetaParams::from_vector(&raw, ops.n_k(), theta.dtau);
    let (dt_dt, dt_mt, mt_mt) = residual_terms(&stats, ops, &next_theta)?;
    let terms = ExpectedTerms {
        dt_dt,
        m_w_m: normal,
        mt_mt,
        m_w_dt: rhs,
        dt_mt,
        transitions: stats.transitions(),
    };
    let q_full = update_q_full(&terms);
    let next_constraint = project_constraint(&q_full, constraint)?;

    let old = theta.vector();
    let theta_change = old
        .iter()
        .zip(raw.iter())
        .map(|(o, v)| (v - o).abs() / o.abs().max(1e-300))
        .fold(0.0, f64::max);
    let record = EmIteration {
        iteration: 0,
        theta: next_theta.clone(),
        constraint_params: next_constraint.params(),
        loglik: smoothed.loglik,
        theta_change,
        q_full_trace: q_full.trace(),
        dare_residual: smoothed.dare_residual,
        dlyap_residual: smoothed.dlyap_residual,
    };
    Ok((next_theta, next_constraint, record))
}
