//! Linear time-invariant state-space form of the compartment network.
//!
//! With `theta = [k; z]` the explicit update reads
//! `T(t+1) = A T(t) + B P(t) + w(t)` where
//! `A = I - dtau * Ihead * diag(Csel k) * J'` and
//! `B = dtau * Bsel * diag(Asel z)`, or equivalently
//! `T(t+1) = T(t) + dtau * M(t) theta + w(t)` with the regression matrix
//! `M(t) = [-Ihead diag(J' T(t)) Csel, Bsel diag(P(t)) Asel]`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GraphOperators;
use crate::linalg::{covariance_factor, CsrMatrix};

/// Shared parameters: conductance classes `k`, source gains `z`, time step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaParams {
    pub k: Vec<f64>,
    pub z: Vec<f64>,
    pub dtau: f64,
}

impl ThetaParams {
    pub fn new(k: Vec<f64>, z: Vec<f64>, dtau: f64) -> Result<Self> {
        let theta = ThetaParams { k, z, dtau };
        theta.validate()?;
        Ok(theta)
    }

    pub fn uniform(n_k: usize, n_z: usize, value: f64, dtau: f64) -> Self {
        ThetaParams { k: vec![value; n_k], z: vec![value; n_z], dtau }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dtau > 0.0) || !self.dtau.is_finite() {
            return Err(Error::InvalidArgument(format!("time step must be positive, got {}", self.dtau)));
        }
        if let Some(v) = self.k.iter().chain(&self.z).find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("parameters must be finite and non-negative, got {v}")));
        }
        Ok(())
    }

    /// Stacked vector `[k; z]`.
    pub fn vector(&self) -> DVector<f64> {
        DVector::from_iterator(self.k.len() + self.z.len(), self.k.iter().chain(&self.z).copied())
    }

    pub fn from_vector(v: &DVector<f64>, n_k: usize, dtau: f64) -> Self {
        ThetaParams {
            k: v.rows(0, n_k).iter().copied().collect(),
            z: v.rows(n_k, v.len() - n_k).iter().copied().collect(),
            dtau,
        }
    }

    pub fn len(&self) -> usize {
        self.k.len() + self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `T(t+1) = A T(t) + B P(t) + w`, `y(t) = C T(t) + v`,
/// `w ~ N(0, Q)`, `v ~ N(0, R)`.
#[derive(Clone, Debug)]
pub struct StateSpaceModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    a_sparse: CsrMatrix,
}

impl StateSpaceModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        let dims_ok = a.ncols() == n
            && b.nrows() == n
            && c.ncols() == n
            && q.shape() == (n, n)
            && r.shape() == (c.nrows(), c.nrows());
        if !dims_ok {
            return Err(Error::Dimension(format!(
                "A {:?}, B {:?}, C {:?}, Q {:?}, R {:?}",
                a.shape(),
                b.shape(),
                c.shape(),
                q.shape(),
                r.shape()
            )));
        }
        let a_sparse = CsrMatrix::from_dense(&a);
        Ok(StateSpaceModel { a, b, c, q, r, a_sparse })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_y(&self) -> usize {
        self.c.nrows()
    }

    pub fn n_p(&self) -> usize {
        self.b.ncols()
    }

    pub fn a_sparse(&self) -> &CsrMatrix {
        &self.a_sparse
    }

    /// Deterministic one-step map `A x + B p`.
    pub fn step(&self, x: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        let mut out = self.a_sparse.mul_vec(x);
        if self.b.ncols() > 0 {
            out.gemv(1.0, &self.b, p, 1.0);
        }
        out
    }
}

/// Selector with one row per observed compartment.
pub fn observation_matrix(n: usize, observed: &[usize]) -> Result<DMatrix<f64>> {
    let mut c = DMatrix::zeros(observed.len(), n);
    for (row, &i) in observed.iter().enumerate() {
        if i >= n {
            return Err(Error::InvalidArgument(format!("observed index {i} out of range (n = {n})")));
        }
        c[(row, i)] = 1.0;
    }
    Ok(c)
}

/// Dynamics matrix `A` for the given parameters. Fails if any diagonal entry
/// would become negative.
pub fn dynamics_matrix(ops: &GraphOperators, theta: &ThetaParams) -> Result<DMatrix<f64>> {
    check_theta(ops, theta)?;
    let n = ops.n();
    let mut a = DMatrix::identity(n, n);
    for e in ops.edges() {
        let w = theta.dtau * e.scale * theta.k[e.class];
        a[(e.head, e.tail)] += w;
        a[(e.head, e.head)] -= w;
    }
    for i in 0..n {
        if a[(i, i)] < 0.0 {
            return Err(Error::Stability { row: i, load: 1.0 - a[(i, i)] });
        }
    }
    Ok(a)
}

/// Input matrix `B = dtau * Bsel * diag(Asel z)`.
pub fn input_matrix(ops: &GraphOperators, theta: &ThetaParams) -> Result<DMatrix<f64>> {
    check_theta(ops, theta)?;
    let mut b = DMatrix::zeros(ops.n(), ops.n_p());
    for (p, s) in ops.sources().iter().enumerate() {
        b[(s.compartment, p)] = theta.dtau * s.scale * s.gain_scale * theta.z[s.class];
    }
    Ok(b)
}

fn check_theta(ops: &GraphOperators, theta: &ThetaParams) -> Result<()> {
    if theta.k.len() != ops.n_k() || theta.z.len() != ops.n_z() {
        return Err(Error::Dimension(format!(
            "theta has {} k / {} z entries, operators expect {} / {}",
            theta.k.len(),
            theta.z.len(),
            ops.n_k(),
            ops.n_z()
        )));
    }
    theta.validate()
}

pub fn assemble(
    ops: &GraphOperators,
    theta: &ThetaParams,
    observed: &[usize],
    q: DMatrix<f64>,
    r: DMatrix<f64>,
) -> Result<StateSpaceModel> {
    let a = dynamics_matrix(ops, theta)?;
    let b = input_matrix(ops, theta)?;
    let c = observation_matrix(ops.n(), observed)?;
    StateSpaceModel::new(a, b, c, q, r)
}

/// `M(t)` such that `T + dtau * M theta = A T + B P`.
pub fn regression_matrix(ops: &GraphOperators, state: &DVector<f64>, input: &DVector<f64>) -> Result<DMatrix<f64>> {
    if state.len() != ops.n() || input.len() != ops.n_p() {
        return Err(Error::Dimension(format!(
            "state {} / input {} vs operators n = {} / n_P = {}",
            state.len(),
            input.len(),
            ops.n(),
            ops.n_p()
        )));
    }
    let mut m = DMatrix::zeros(ops.n(), ops.n_theta());
    for e in ops.edges() {
        m[(e.head, e.class)] += e.scale * (state[e.tail] - state[e.head]);
    }
    for (p, s) in ops.sources().iter().enumerate() {
        m[(s.compartment, ops.n_k() + s.class)] += s.scale * s.gain_scale * input[p];
    }
    Ok(m)
}

/// Time series with one column per step.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// `n x N` compartment temperatures.
    pub states: DMatrix<f64>,
    /// `n_P x N` heat inputs.
    pub inputs: DMatrix<f64>,
    /// `n_y x N` measurements.
    pub observations: DMatrix<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.states.ncols() == 0
    }
}

/// Process / measurement noise switches for [`simulate_with`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseSwitch {
    pub process: bool,
    pub measurement: bool,
}

pub fn simulate(
    model: &StateSpaceModel,
    initial: &DVector<f64>,
    inputs: &DMatrix<f64>,
    seed: u64,
    noiseless: bool,
) -> Result<Trajectory> {
    let noise = NoiseSwitch { process: !noiseless, measurement: !noiseless };
    simulate_with(model, initial, inputs, seed, noise)
}

pub fn simulate_with(
    model: &StateSpaceModel,
    initial: &DVector<f64>,
    inputs: &DMatrix<f64>,
    seed: u64,
    noise: NoiseSwitch,
) -> Result<Trajectory> {
    let n = model.n();
    let steps = inputs.ncols();
    if steps < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 steps, got {steps}")));
    }
    if initial.len() != n || inputs.nrows() != model.n_p() {
        return Err(Error::Dimension(format!(
            "initial state {} / inputs {} vs model n = {} / n_P = {}",
            initial.len(),
            inputs.nrows(),
            n,
            model.n_p()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wf = noise.process.then(|| covariance_factor(&model.q));
    let vf = noise.measurement.then(|| covariance_factor(&model.r));

    let mut states = DMatrix::zeros(n, steps);
    states.set_column(0, initial);
    let mut x = initial.clone();
    let mut eps = DVector::zeros(n);
    for t in 0..steps - 1 {
        let p = inputs.column(t).into_owned();
        let mut next = model.step(&x, &p);
        if let Some(f) = &wf {
            eps.iter_mut().for_each(|e| *e = StandardNormal.sample(&mut rng));
            next.gemv(1.0, f, &eps, 1.0);
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: t + 1 });
        }
        states.set_column(t + 1, &next);
        x = next;
    }
    let mut observations = &model.c * &states;
    if let Some(f) = &vf {
        let mut e = DVector::zeros(model.n_y());
        for mut col in observations.column_iter_mut() {
            e.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
            col.gemv(1.0, f, &e, 1.0);
        }
    }
    Ok(Trajectory { states, inputs: inputs.clone(), observations })
}

/// Noiseless rollout over the whole input sequence.
pub fn predict(model: &StateSpaceModel, initial: &DVector<f64>, inputs: &DMatrix<f64>) -> Result<Trajectory> {
    simulate(model, initial, inputs, 0, true)
}

/// Initial state from the first measurement: observed compartments take
/// their measured value, the rest take the measured ambient value (or the
/// mean of the measurements if ambient is not observed).
pub fn initial_state_from_measurement(n: usize, observed: &[usize], y0: &DVector<f64>, ambient: usize) -> DVector<f64> {
    let fill = observed
        .iter()
        .position(|&i| i == ambient)
        .map(|row| y0[row])
        .unwrap_or_else(|| y0.mean());
    let mut x = DVector::from_element(n, fill);
    for (row, &i) in observed.iter().enumerate() {
        x[i] = y0[row];
    }
    x
}
