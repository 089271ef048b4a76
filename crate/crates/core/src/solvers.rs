//! Stationary covariance equations of the steady-state smoother.
//!
//! * filter DARE: `V = A V A' - A V C' (C V C' + R)^-1 C V A' + Q`, solved by
//!   the structure-preserving doubling algorithm, with plain Riccati
//!   recursion as fallback;
//! * Stein/Lyapunov: `V = J V J' + W`, solved by a Kronecker system for small
//!   `n` and by squaring/doubling otherwise.
//!
//! Every returned solution is certified by its relative residual.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{is_psd, solve_spd, symmetrize};

/// Largest dimension solved through the dense `n^2 x n^2` Kronecker system.
pub const KRONECKER_MAX_DIM: usize = 32;

/// Iteration budget of the fallback Riccati recursion, per allowed doubling step.
const RECURSION_STEPS_PER_ITER: usize = 500;

#[derive(Clone, Debug)]
pub struct DareProblem<'a> {
    pub a: &'a DMatrix<f64>,
    pub c: &'a DMatrix<f64>,
    pub q: &'a DMatrix<f64>,
    pub r: &'a DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct DlyapProblem<'a> {
    pub j: &'a DMatrix<f64>,
    pub w: &'a DMatrix<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    /// Relative residual bound `||res||_F / max(1e-300, ||V||_F, ||rhs||_F)`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { tol: 1e-10, max_iter: 200 }
    }
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub x: DMatrix<f64>,
    pub iterations: usize,
    pub residual: f64,
}

fn check_square(name: &str, m: &DMatrix<f64>, n: usize) -> Result<()> {
    if m.shape() != (n, n) {
        return Err(Error::Dimension(format!("{name} is {:?}, expected {n}x{n}", m.shape())));
    }
    Ok(())
}

/// Riccati map `A V A' - A V C' (C V C' + R)^-1 C V A' + Q`.
pub fn riccati_map(p: &DareProblem<'_>, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let av = p.a * v;
    let cv = p.c * v;
    let s = &cv * p.c.transpose() + p.r;
    let cva = &cv * p.a.transpose();
    let gain_term = solve_spd(&s, &cva)?;
    let mut out = &av * p.a.transpose() - cva.transpose() * gain_term + p.q;
    symmetrize(&mut out);
    Ok(out)
}

/// Relative DARE residual of a candidate solution.
pub fn dare_residual(p: &DareProblem<'_>, v: &DMatrix<f64>) -> Result<f64> {
    let res = riccati_map(p, v)? - v;
    Ok(res.norm() / v.norm().max(p.q.norm()).max(1e-300))
}

/// Relative Stein residual `||V - J V J' - W|| / max(||V||, ||W||)`.
pub fn dlyap_residual(p: &DlyapProblem<'_>, v: &DMatrix<f64>) -> f64 {
    let res = v - p.j * v * p.j.transpose() - p.w;
    res.norm() / v.norm().max(p.w.norm()).max(1e-300)
}

/// Stabilizing solution of the filter DARE (the predicted covariance).
pub fn solve_dare(p: &DareProblem<'_>, opts: SolverOptions) -> Result<Solution> {
    let n = p.a.nrows();
    check_square("A", p.a, n)?;
    check_square("Q", p.q, n)?;
    if p.c.ncols() != n {
        return Err(Error::Dimension(format!("C has {} columns, expected {n}", p.c.ncols())));
    }
    check_square("R", p.r, p.c.nrows())?;

    let sol = match doubling_dare(p, opts) {
        Ok(s) => s,
        Err(e) => {
            log::debug!("doubling DARE failed ({e}); falling back to Riccati recursion");
            recursion_dare(p, opts)?
        }
    };
    if !is_psd(&sol.x, 1e-10) {
        return Err(Error::Numerical("DARE solution is indefinite".to_string()));
    }
    Ok(sol)
}

/// Structure-preserving doubling on the dual (filter) problem:
/// `A0 = A'`, `G0 = C' R^-1 C`, `H0 = Q`; `H_k` converges to the solution.
fn doubling_dare(p: &DareProblem<'_>, opts: SolverOptions) -> Result<Solution> {
    let n = p.a.nrows();
    let r_inv_c = solve_spd(p.r, p.c)?;
    let mut g = p.c.transpose() * r_inv_c;
    symmetrize(&mut g);
    let mut ak = p.a.transpose();
    let mut h = p.q.clone();
    symmetrize(&mut h);
    let ident = DMatrix::<f64>::identity(n, n);

    for it in 1..=opts.max_iter {
        // W = I + G H, factored once
        let w = &ident + &g * &h;
        let lu = w.lu();
        let w_inv_a = lu
            .solve(&ak)
            .ok_or_else(|| Error::Numerical("singular doubling matrix I + G H".to_string()))?;
        let w_inv_g = lu
            .solve(&g)
            .ok_or_else(|| Error::Numerical("singular doubling matrix I + G H".to_string()))?;
        //   A_{k+1} = A W^-1 A
        //   G_{k+1} = G + A W^-1 G A'
        //   H_{k+1} = H + A' H W^-1 A
        let mut g_next = &g + &ak * &w_inv_g * ak.transpose();
        let mut h_next = &h + ak.transpose() * &h * &w_inv_a;
        let a_next = &ak * &w_inv_a;
        symmetrize(&mut g_next);
        symmetrize(&mut h_next);
        if h_next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("doubling iterate is not finite".to_string()));
        }
        let change = (&h_next - &h).norm() / h_next.norm().max(1e-300);
        h = h_next;
        g = g_next;
        ak = a_next;
        if change < 1e-14 || ak.amax() < 1e-300 {
            let residual = dare_residual(p, &h)?;
            if residual < opts.tol {
                return Ok(Solution { x: h, iterations: it, residual });
            }
            // polish with plain Riccati steps
            for extra in 1..=20 {
                h = riccati_map(p, &h)?;
                let residual = dare_residual(p, &h)?;
                if residual < opts.tol {
                    return Ok(Solution { x: h, iterations: it + extra, residual });
                }
            }
            return Err(Error::Convergence { solver: "doubling DARE", iterations: it, residual });
        }
    }
    let residual = dare_residual(p, &h)?;
    if residual < opts.tol {
        return Ok(Solution { x: h, iterations: opts.max_iter, residual });
    }
    Err(Error::Convergence { solver: "doubling DARE", iterations: opts.max_iter, residual })
}

fn recursion_dare(p: &DareProblem<'_>, opts: SolverOptions) -> Result<Solution> {
    let mut v = p.q.clone();
    symmetrize(&mut v);
    let budget = opts.max_iter * RECURSION_STEPS_PER_ITER;
    let mut residual = f64::INFINITY;
    for it in 1..=budget {
        let next = riccati_map(p, &v)?;
        if next.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("Riccati recursion diverged".to_string()));
        }
        residual = (&next - &v).norm() / next.norm().max(p.q.norm()).max(1e-300);
        v = next;
        if residual < opts.tol {
            return Ok(Solution { x: v, iterations: it, residual });
        }
    }
    Err(Error::Convergence { solver: "Riccati recursion", iterations: budget, residual })
}

/// Solution of `V = J V J' + W` for `rho(J) < 1`.
pub fn solve_dlyap(p: &DlyapProblem<'_>, opts: SolverOptions) -> Result<Solution> {
    let n = p.j.nrows();
    check_square("J", p.j, n)?;
    check_square("W", p.w, n)?;
    let mut sol = if n <= KRONECKER_MAX_DIM {
        kronecker_dlyap(p)?
    } else {
        doubling_dlyap(p, opts)?
    };
    symmetrize(&mut sol.x);
    sol.residual = dlyap_residual(p, &sol.x);
    if !(sol.residual < opts.tol) {
        return Err(Error::Convergence { solver: "Lyapunov", iterations: sol.iterations, residual: sol.residual });
    }
    Ok(sol)
}

fn kronecker_dlyap(p: &DlyapProblem<'_>) -> Result<Solution> {
    let n = p.j.nrows();
    let radius = p
        .j
        .complex_eigenvalues()
        .iter()
        .map(|l| l.norm())
        .fold(0.0, f64::max);
    if radius >= 1.0 {
        return Err(Error::Convergence { solver: "Lyapunov", iterations: 0, residual: f64::INFINITY });
    }
    // vec(J V J') = (J kron J) vec(V) in column-major order
    let kron = p.j.kronecker(p.j);
    let system = DMatrix::<f64>::identity(n * n, n * n) - kron;
    let rhs = DMatrix::from_column_slice(n * n, 1, p.w.as_slice());
    let v = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("singular Kronecker system".to_string()))?;
    Ok(Solution { x: DMatrix::from_column_slice(n, n, v.as_slice()), iterations: 1, residual: 0.0 })
}

fn doubling_dlyap(p: &DlyapProblem<'_>, opts: SolverOptions) -> Result<Solution> {
    let mut v = p.w.clone();
    let mut jk = p.j.clone();
    let mut prev_term = f64::INFINITY;
    for it in 1..=opts.max_iter {
        let term = &jk * &v * jk.transpose();
        let term_norm = term.norm();
        v += &term;
        if !term_norm.is_finite() || (it > 8 && term_norm > prev_term) {
            return Err(Error::Convergence { solver: "Lyapunov doubling", iterations: it, residual: term_norm });
        }
        prev_term = term_norm;
        if term_norm <= 1e-16 * v.norm().max(1e-300) {
            return Ok(Solution { x: v, iterations: it, residual: 0.0 });
        }
        jk = &jk * &jk;
    }
    Err(Error::Convergence { solver: "Lyapunov doubling", iterations: opts.max_iter, residual: prev_term })
}
