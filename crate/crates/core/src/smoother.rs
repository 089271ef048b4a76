//! E-step: Rauch-Tung-Striebel smoothing and the sufficient statistics used
//! by the M-step.
//!
//! [`rtss_steady`] replaces every time-varying covariance by its stationary
//! value (one DARE and one Stein equation per call), so memory is `O(n^2)`
//! plus the mean sequences. [`rtss_full`] is the textbook time-varying
//! smoother; it stores all covariances and is meant for small problems and
//! as a reference.
//!
//! Column `t` of every sequence holds time step `t` (0-based); the initial
//! state is taken as known and its measurement is not assimilated.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{solve_spd, symmetrize};
use crate::model::StateSpaceModel;
use crate::solvers::{solve_dare, solve_dlyap, DareProblem, DlyapProblem, SolverOptions};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Aggregates over `t = 1..N-1` of the smoothed moments:
/// `XX = sum E[T_t T_t']`, `ZZ = sum E[T_{t+1} T_{t+1}']`,
/// `XZ = sum E[T_t T_{t+1}']`, `XU = sum x_t P_t'`, `ZU = sum x_{t+1} P_t'`,
/// `UU = sum P_t P_t'`.
#[derive(Clone, Debug, PartialEq)]
pub struct SmootherStats {
    pub xx: DMatrix<f64>,
    pub xu: DMatrix<f64>,
    pub zz: DMatrix<f64>,
    pub zu: DMatrix<f64>,
    pub xz: DMatrix<f64>,
    pub uu: DMatrix<f64>,
    /// Sequence length `N`; sums run over `N - 1` transitions.
    pub len: usize,
}

impl SmootherStats {
    pub fn transitions(&self) -> usize {
        self.len - 1
    }
}

#[derive(Clone, Debug)]
pub struct SmootherOutput {
    /// `n x N` smoothed means.
    pub smoothed: DMatrix<f64>,
    /// `n x N` filtered means.
    pub filtered: DMatrix<f64>,
    /// Stationary predicted covariance.
    pub v_minus: DMatrix<f64>,
    /// Stationary filtered covariance.
    pub v_plus: DMatrix<f64>,
    /// Stationary smoothed covariance.
    pub v_smooth: DMatrix<f64>,
    /// `n x n_y` Kalman gain.
    pub kalman_gain: DMatrix<f64>,
    /// `n x n` smoother gain.
    pub smoother_gain: DMatrix<f64>,
    /// Innovation log-likelihood of `y_2..y_N`.
    pub loglik: f64,
    pub dare_residual: f64,
    pub dlyap_residual: f64,
}

fn check_data(model: &StateSpaceModel, y: &DMatrix<f64>, inputs: &DMatrix<f64>, initial: &DVector<f64>) -> Result<usize> {
    let len = y.ncols();
    if len < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 time steps, got {len}")));
    }
    if y.nrows() != model.n_y() || inputs.nrows() != model.n_p() || inputs.ncols() != len || initial.len() != model.n() {
        return Err(Error::Dimension(format!(
            "observations {:?}, inputs {:?}, initial {} for model n = {}, n_y = {}, n_P = {}",
            y.shape(),
            inputs.shape(),
            initial.len(),
            model.n(),
            model.n_y(),
            model.n_p()
        )));
    }
    Ok(len)
}

struct InnovationForm {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    log_det: f64,
}

impl InnovationForm {
    fn new(s: DMatrix<f64>) -> Result<Self> {
        let chol = s
            .cholesky()
            .ok_or_else(|| Error::Numerical("innovation covariance C V C' + R is singular".to_string()))?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(InnovationForm { chol, log_det })
    }

    fn loglik(&self, e: &DVector<f64>) -> f64 {
        let w = self.chol.solve(e);
        -0.5 * (e.len() as f64 * LN_2PI + self.log_det + e.dot(&w))
    }
}

/// Steady-state-covariance RTS smoother.
pub fn rtss_steady(
    model: &StateSpaceModel,
    y: &DMatrix<f64>,
    inputs: &DMatrix<f64>,
    initial: &DVector<f64>,
    opts: SolverOptions,
) -> Result<SmootherOutput> {
    let len = check_data(model, y, inputs, initial)?;
    let n = model.n();
    let (a, c) = (&model.a, &model.c);

    let dare = solve_dare(&DareProblem { a, c, q: &model.q, r: &model.r }, opts)?;
    let v_minus = dare.x;
    let cv = c * &v_minus;
    let mut s = &cv * c.transpose() + &model.r;
    symmetrize(&mut s);
    let innov = InnovationForm::new(s)?;
    let kalman_gain = innov.chol.solve(&cv).transpose();
    let mut v_plus = &v_minus - &kalman_gain * &cv;
    symmetrize(&mut v_plus);

    let bu = &model.b * inputs;
    let mut filtered = DMatrix::zeros(n, len);
    filtered.set_column(0, initial);
    let mut loglik = 0.0;
    let mut x = initial.clone();
    let mut pred = DVector::zeros(n);
    let mut e = DVector::zeros(model.n_y());
    for t in 0..len - 1 {
        model.a_sparse().mul_into(x.as_slice(), pred.as_mut_slice());
        pred += bu.column(t);
        e.copy_from(&y.column(t + 1));
        e.gemv(-1.0, c, &pred, 1.0);
        loglik += innov.loglik(&e);
        pred.gemv(1.0, &kalman_gain, &e, 1.0);
        filtered.set_column(t + 1, &pred);
        std::mem::swap(&mut x, &mut pred);
    }

    // J = V+ A' (V-)^-1, i.e. J' = (V-)^-1 A V+
    let smoother_gain = solve_spd(&v_minus, &(a * &v_plus))?.transpose();
    let mut w = &v_plus - &smoother_gain * &v_minus * smoother_gain.transpose();
    symmetrize(&mut w);
    let lyap = solve_dlyap(&DlyapProblem { j: &smoother_gain, w: &w }, opts)?;

    let mut smoothed = DMatrix::zeros(n, len);
    smoothed.set_column(len - 1, &filtered.column(len - 1));
    let preds = model.a_sparse().mul_dense(&filtered) + &bu;
    let mut diff = DVector::zeros(n);
    let mut xs = DVector::zeros(n);
    for t in (0..len - 1).rev() {
        diff.copy_from(&smoothed.column(t + 1));
        diff -= preds.column(t);
        xs.copy_from(&filtered.column(t));
        xs.gemv(1.0, &smoother_gain, &diff, 1.0);
        smoothed.set_column(t, &xs);
    }

    Ok(SmootherOutput {
        smoothed,
        filtered,
        v_minus,
        v_plus,
        v_smooth: lyap.x,
        kalman_gain,
        smoother_gain,
        loglik,
        dare_residual: dare.residual,
        dlyap_residual: lyap.residual,
    })
}

/// Statistics of a steady-state smoother run.
pub fn accumulate_stats(out: &SmootherOutput, inputs: &DMatrix<f64>) -> Result<SmootherStats> {
    let len = out.smoothed.ncols();
    if len < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 time steps, got {len}")));
    }
    if inputs.ncols() != len {
        return Err(Error::Dimension(format!("inputs have {} steps, means have {len}", inputs.ncols())));
    }
    let transitions = (len - 1) as f64;
    let cov = &out.v_smooth * transitions;
    let cross_cov = &out.smoother_gain * out.v_smooth.transpose() * transitions;
    Ok(stats_from_means(&out.smoothed, inputs, &cov, &cov, &cross_cov))
}

/// Mean-part sums plus the given covariance sums.
fn stats_from_means(
    means: &DMatrix<f64>,
    inputs: &DMatrix<f64>,
    cov_x: &DMatrix<f64>,
    cov_z: &DMatrix<f64>,
    cov_xz: &DMatrix<f64>,
) -> SmootherStats {
    let len = means.ncols();
    let x = means.columns(0, len - 1);
    let z = means.columns(1, len - 1);
    let u = inputs.columns(0, len - 1);

    let mut xx_mean = &x * x.transpose();
    symmetrize(&mut xx_mean);
    let first = means.column(0);
    let last = means.column(len - 1);
    let mut zz_mean = &xx_mean - first * first.transpose() + last * last.transpose();
    symmetrize(&mut zz_mean);
    let xz = &x * z.transpose() + cov_xz;
    let xu = &x * u.transpose();
    let zu = &z * u.transpose();
    let mut uu = &u * u.transpose();
    symmetrize(&mut uu);

    SmootherStats {
        xx: xx_mean + cov_x,
        xu,
        zz: zz_mean + cov_z,
        zu,
        xz,
        uu,
        len,
    }
}

#[derive(Clone, Debug)]
pub struct FullSmootherOutput {
    pub smoothed: DMatrix<f64>,
    pub filtered: DMatrix<f64>,
    /// Smoothed covariances `V_t^N`, one per step.
    pub covariances: Vec<DMatrix<f64>>,
    /// Lag-one covariances `Cov(T_{t+1}, T_t) = V_{t+1}^N J_t'`, `N - 1` entries.
    pub lag_covariances: Vec<DMatrix<f64>>,
    pub gains: Vec<DMatrix<f64>>,
    pub loglik: f64,
    pub stats: SmootherStats,
}

/// Time-varying RTS smoother starting from `x_1 = initial` with filtered
/// covariance `initial_cov`.
pub fn rtss_full(
    model: &StateSpaceModel,
    y: &DMatrix<f64>,
    inputs: &DMatrix<f64>,
    initial: &DVector<f64>,
    initial_cov: &DMatrix<f64>,
) -> Result<FullSmootherOutput> {
    let len = check_data(model, y, inputs, initial)?;
    let n = model.n();
    if initial_cov.shape() != (n, n) {
        return Err(Error::Dimension(format!("initial covariance is {:?}", initial_cov.shape())));
    }
    let (a, b, c) = (&model.a, &model.b, &model.c);

    let mut filtered = DMatrix::zeros(n, len);
    filtered.set_column(0, initial);
    let mut v_filt = Vec::with_capacity(len);
    let mut v_pred = Vec::with_capacity(len - 1);
    v_filt.push(initial_cov.clone());
    let mut loglik = 0.0;
    for t in 0..len - 1 {
        let xt = filtered.column(t);
        let pred = a * xt + b * inputs.column(t);
        let mut vp = a * &v_filt[t] * a.transpose() + &model.q;
        symmetrize(&mut vp);
        let cv = c * &vp;
        let mut s = &cv * c.transpose() + &model.r;
        symmetrize(&mut s);
        let innov = InnovationForm::new(s)?;
        let gain = innov.chol.solve(&cv).transpose();
        let e = y.column(t + 1) - c * &pred;
        loglik += innov.loglik(&e);
        let mut vf = &vp - &gain * &cv;
        symmetrize(&mut vf);
        filtered.set_column(t + 1, &(pred + &gain * e));
        v_pred.push(vp);
        v_filt.push(vf);
    }

    let mut smoothed = DMatrix::zeros(n, len);
    smoothed.set_column(len - 1, &filtered.column(len - 1));
    let mut covariances = vec![DMatrix::zeros(n, n); len];
    covariances[len - 1] = v_filt[len - 1].clone();
    let mut lag_covariances = vec![DMatrix::zeros(n, n); len - 1];
    let mut gains = vec![DMatrix::zeros(n, n); len - 1];
    for t in (0..len - 1).rev() {
        // J_t = V_t^t A' (V_{t+1}^t)^-1
        let jt = solve_spd(&v_pred[t], &(a * &v_filt[t]))
            .map_err(|_| Error::Numerical(format!("predicted covariance at step {} is singular", t + 1)))?
            .transpose();
        let mut vs = &v_filt[t] + &jt * (&covariances[t + 1] - &v_pred[t]) * jt.transpose();
        symmetrize(&mut vs);
        lag_covariances[t] = &covariances[t + 1] * jt.transpose();
        let xf = filtered.column(t);
        let pred = a * xf + b * inputs.column(t);
        let xs = xf + &jt * (smoothed.column(t + 1) - pred);
        smoothed.set_column(t, &xs);
        covariances[t] = vs;
        gains[t] = jt;
    }

    let mut cov_x = DMatrix::zeros(n, n);
    let mut cov_z = DMatrix::zeros(n, n);
    let mut cov_xz = DMatrix::zeros(n, n);
    for t in 0..len - 1 {
        cov_x += &covariances[t];
        cov_z += &covariances[t + 1];
        cov_xz += lag_covariances[t].transpose();
    }
    let stats = stats_from_means(&smoothed, inputs, &cov_x, &cov_z, &cov_xz);
    Ok(FullSmootherOutput { smoothed, filtered, covariances, lag_covariances, gains, loglik, stats })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn scalar_model(a: f64, q: f64, r: f64) -> StateSpaceModel {
        StateSpaceModel::new(scalar(a), DMatrix::zeros(1, 0), scalar(1.0), scalar(q), scalar(r)).unwrap()
    }

    #[test]
    fn two_point_smoother_matches_hand_algebra() {
        let (v, q, r) = (0.7, 0.3, 0.2);
        let model = scalar_model(1.0, q, r);
        let y = DMatrix::from_row_slice(1, 2, &[0.0, 2.0]);
        let x1 = DVector::from_element(1, 0.5);
        let out = rtss_full(&model, &y, &DMatrix::zeros(0, 2), &x1, &scalar(v)).unwrap();
        let vp = v + q;
        let k = vp / (vp + r);
        let x2 = 0.5 + k * (2.0 - 0.5);
        assert!((out.smoothed[(0, 1)] - x2).abs() < 1e-14);
        let j1 = v / (v + q);
        assert!((out.smoothed[(0, 0)] - (0.5 + j1 * (x2 - 0.5))).abs() < 1e-14);
    }

    #[test]
    fn constant_data_is_a_fixed_point() {
        let model = scalar_model(1.0, 0.1, 0.1);
        let y = DMatrix::from_element(1, 20, 3.5);
        let x1 = DVector::from_element(1, 3.5);
        let u = DMatrix::zeros(0, 20);
        let full = rtss_full(&model, &y, &u, &x1, &scalar(0.0)).unwrap();
        let steady = rtss_steady(&model, &y, &u, &x1, SolverOptions::default()).unwrap();
        for t in 0..20 {
            assert!((full.smoothed[(0, t)] - 3.5).abs() < 1e-12);
            assert!((steady.smoothed[(0, t)] - 3.5).abs() < 1e-12);
        }
    }

    #[test]
    fn steady_gain_matches_scalar_dare() {
        let s2 = 0.04;
        let model = scalar_model(1.0, s2, s2);
        // v^2 - s2 v - s2^2 = 0
        let v = s2 * (1.0 + 5f64.sqrt()) / 2.0;
        let y = DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 0.5]);
        let out = rtss_steady(&model, &y, &DMatrix::zeros(0, 3), &DVector::zeros(1), SolverOptions::default()).unwrap();
        assert!((out.v_minus[(0, 0)] - v).abs() < 1e-12);
        assert!((out.kalman_gain[(0, 0)] - v / (v + s2)).abs() < 1e-12);
        let v_plus = (1.0 - out.kalman_gain[(0, 0)]) * v;
        assert!((out.v_plus[(0, 0)] - v_plus).abs() < 1e-14);
    }

    #[test]
    fn single_transition_stats() {
        let out = SmootherOutput {
            smoothed: DMatrix::from_row_slice(1, 2, &[1.0, 2.0]),
            filtered: DMatrix::zeros(1, 2),
            v_minus: scalar(0.0),
            v_plus: scalar(0.0),
            v_smooth: scalar(0.0),
            kalman_gain: scalar(0.0),
            smoother_gain: scalar(0.0),
            loglik: 0.0,
            dare_residual: 0.0,
            dlyap_residual: 0.0,
        };
        let inputs = DMatrix::from_row_slice(1, 2, &[3.0, 0.0]);
        let s = accumulate_stats(&out, &inputs).unwrap();
        assert_eq!((s.xx[(0, 0)], s.zz[(0, 0)], s.xz[(0, 0)]), (1.0, 4.0, 2.0));
        assert_eq!((s.xu[(0, 0)], s.zu[(0, 0)], s.uu[(0, 0)]), (3.0, 6.0, 9.0));
        let short = SmootherOutput { smoothed: DMatrix::zeros(1, 1), ..out };
        assert!(accumulate_stats(&short, &DMatrix::zeros(1, 1)).is_err());
    }
}
