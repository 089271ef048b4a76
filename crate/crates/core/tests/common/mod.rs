#![allow(dead_code)]

use compartment::graph::{Edge, GraphOperators, Source};
use compartment::model::{StateSpaceModel, ThetaParams};
use compartment::smoother::SmootherStats;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DMatrix<f64> {
    let f = gaussian(rng, n, n);
    (&f * f.transpose() / n as f64 + DMatrix::identity(n, n) * 0.1) * scale
}

/// Random compartment graph on `n` nodes; the last node is ambient and only
/// ever a tail. Two conductance classes, two gain classes, two sources.
pub fn random_ops(rng: &mut ChaCha8Rng, n: usize) -> GraphOperators {
    assert!(n >= 3);
    let amb = n - 1;
    let mut edges = Vec::new();
    for i in 0..amb {
        for j in (i + 1)..amb {
            if j == i + 1 || rng.random_bool(0.5) {
                let class = if j == i + 1 { i % 2 } else { rng.random_range(0..2) };
                let scale = rng.random_range(0.5..1.5);
                edges.push(Edge { tail: i, head: j, class, scale });
                edges.push(Edge { tail: j, head: i, class, scale });
            }
        }
        if i == amb - 1 || rng.random_bool(0.5) {
            edges.push(Edge { tail: amb, head: i, class: 1, scale: rng.random_range(0.5..1.5) });
        }
    }
    let sources = vec![
        Source { compartment: 0, class: 0, scale: rng.random_range(0.5..1.5), gain_scale: rng.random_range(0.5..1.5) },
        Source { compartment: 1, class: 1, scale: rng.random_range(0.5..1.5), gain_scale: 1.0 },
    ];
    GraphOperators::new(n, 2, 2, edges, sources).unwrap()
}

pub fn random_theta(rng: &mut ChaCha8Rng, ops: &GraphOperators, dtau: f64) -> ThetaParams {
    ThetaParams {
        k: (0..ops.n_k()).map(|_| rng.random_range(0.01..0.06)).collect(),
        z: (0..ops.n_z()).map(|_| rng.random_range(0.02..0.1)).collect(),
        dtau,
    }
}

/// Regression matrix built from the dense operator views:
/// `[-Ihead diag(J' x) Csel, Bsel diag(p) Asel]`.
pub fn dense_regression(ops: &GraphOperators, x: &DVector<f64>, p: &DVector<f64>) -> DMatrix<f64> {
    let j = ops.incidence();
    let ih = ops.head_incidence();
    let csel = ops.edge_selector();
    let bsel = ops.source_selector();
    let asel = ops.gain_selector();
    let left = -&ih * DMatrix::from_diagonal(&(j.transpose() * x)) * csel;
    let right = bsel * DMatrix::from_diagonal(p) * asel;
    let mut m = DMatrix::zeros(ops.n(), ops.n_theta());
    m.columns_mut(0, ops.n_k()).copy_from(&left);
    m.columns_mut(ops.n_k(), ops.n_z()).copy_from(&right);
    m
}

/// First and second moments of a Gaussian state sequence.
pub struct Moments {
    pub x: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub v: Vec<DMatrix<f64>>,
    /// `lag[t] = Cov(T_{t+1}, T_t)`
    pub lag: Vec<DMatrix<f64>>,
}

impl Moments {
    pub fn len(&self) -> usize {
        self.x.ncols()
    }
}

/// Random means plus blocks of one random joint covariance of all steps.
pub fn random_moments(rng: &mut ChaCha8Rng, n: usize, np: usize, len: usize, with_cov: bool) -> Moments {
    let x = gaussian(rng, n, len).add_scalar(25.0);
    let u = gaussian(rng, np, len).abs();
    let big = n * len;
    let joint = if with_cov { random_spd(rng, big, 0.05) } else { DMatrix::zeros(big, big) };
    let v = (0..len).map(|t| joint.view((t * n, t * n), (n, n)).into_owned()).collect();
    let lag = (0..len - 1).map(|t| joint.view(((t + 1) * n, t * n), (n, n)).into_owned()).collect();
    Moments { x, u, v, lag }
}

/// The six statistics from their definitions.
pub fn stats_of(m: &Moments) -> SmootherStats {
    let n = m.x.nrows();
    let np = m.u.nrows();
    let mut s = SmootherStats {
        xx: DMatrix::zeros(n, n),
        xu: DMatrix::zeros(n, np),
        zz: DMatrix::zeros(n, n),
        zu: DMatrix::zeros(n, np),
        xz: DMatrix::zeros(n, n),
        uu: DMatrix::zeros(np, np),
        len: m.len(),
    };
    for t in 0..m.len() - 1 {
        let (xt, xn, ut) = (m.x.column(t), m.x.column(t + 1), m.u.column(t));
        s.xx += xt * xt.transpose() + &m.v[t];
        s.zz += xn * xn.transpose() + &m.v[t + 1];
        s.xz += xt * xn.transpose() + m.lag[t].transpose();
        s.xu += xt * ut.transpose();
        s.zu += xn * ut.transpose();
        s.uu += ut * ut.transpose();
    }
    s
}

pub struct BruteTerms {
    pub dt_dt: DMatrix<f64>,
    pub m_w_m: DMatrix<f64>,
    pub mt_mt: DMatrix<f64>,
    pub m_w_dt: DVector<f64>,
    pub dt_mt: DMatrix<f64>,
}

/// Per-step expectations summed explicitly. `M_t` is linear in `T_t`, so
/// with `M_i` the matrix for the unit state `e_i`:
/// `E[M' W M] = M(x)' W M(x) + sum_ij V_ij M_i' W M_j`, and similarly for
/// the other terms.
pub fn brute_terms(ops: &GraphOperators, m: &Moments, weight: &DMatrix<f64>, theta: &ThetaParams) -> BruteTerms {
    let n = ops.n();
    let p = ops.n_theta();
    let dt = theta.dtau;
    let th = theta.vector();
    let zero_p = DVector::zeros(ops.n_p());
    let basis: Vec<DMatrix<f64>> =
        (0..n).map(|i| dense_regression(ops, &DVector::from_fn(n, |r, _| if r == i { 1.0 } else { 0.0 }), &zero_p)).collect();
    let g = DMatrix::from_fn(n, n, |r, i| (&basis[i] * &th)[r]);

    let mut out = BruteTerms {
        dt_dt: DMatrix::zeros(n, n),
        m_w_m: DMatrix::zeros(p, p),
        mt_mt: DMatrix::zeros(n, n),
        m_w_dt: DVector::zeros(p),
        dt_mt: DMatrix::zeros(n, n),
    };
    for t in 0..m.len() - 1 {
        let xt = m.x.column(t).into_owned();
        let ut = m.u.column(t).into_owned();
        let d = (m.x.column(t + 1) - &xt) / dt;
        let cov_d = (&m.v[t + 1] + &m.v[t] - &m.lag[t] - m.lag[t].transpose()) / (dt * dt);
        // Cov(dT, T_t)
        let cov_dx = (&m.lag[t] - &m.v[t]) / dt;
        let mx = dense_regression(ops, &xt, &ut);
        let mean_mt = &mx * &th;

        out.dt_dt += &d * d.transpose() + cov_d;
        out.m_w_m += mx.transpose() * weight * &mx;
        out.m_w_dt += mx.transpose() * weight * &d;
        for i in 0..n {
            for j in 0..n {
                out.m_w_m += basis[i].transpose() * weight * &basis[j] * m.v[t][(i, j)];
            }
            out.m_w_dt += basis[i].transpose() * weight * cov_dx.column(i);
        }
        out.mt_mt += &mean_mt * mean_mt.transpose() + &g * &m.v[t] * g.transpose();
        out.dt_mt += &d * mean_mt.transpose() + &cov_dx * g.transpose();
    }
    out
}

pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

/// Random stable dense system: spectral radius about `radius`, first
/// `ny` states observed through a random matrix.
pub fn random_stable_model(rng: &mut ChaCha8Rng, n: usize, ny: usize, np: usize, radius: f64) -> StateSpaceModel {
    let raw = gaussian(rng, n, n);
    let rho = raw.complex_eigenvalues().iter().map(|l| l.norm()).fold(0.0, f64::max);
    let a = raw * (radius / rho);
    let b = gaussian(rng, n, np) * 0.1;
    let c = gaussian(rng, ny, n);
    let q = random_spd(rng, n, 0.1);
    let r = random_spd(rng, ny, 0.1);
    StateSpaceModel::new(a, b, c, q, r).unwrap()
}
