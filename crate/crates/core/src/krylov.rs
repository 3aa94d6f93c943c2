//! Matrix-free conjugate residual / conjugate gradient solvers and the
//! dense diagnostics used to compare Hessians.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::sensitivity::LinearOperator;
use crate::vecops::{all_finite, axpy, dot, norm_inf};

/// Denominators below this magnitude count as breakdown.
const BREAKDOWN: f64 = 1e-300;

#[derive(Debug, Clone)]
pub struct KrylovResult {
    pub solution: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub breakdown: bool,
    /// `‖r_k‖_∞ / ‖r_0‖_∞` for `k = 0..=iterations`.
    pub residual_history: Vec<f64>,
    /// `‖r_k‖_2` for `k = 0..=iterations`.
    pub residual_norms2: Vec<f64>,
    /// `‖v_k - v_ref‖_∞` when a reference solution was supplied.
    pub error_history: Option<Vec<f64>>,
    /// Number of operator applications.
    pub applies: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KrylovOptions {
    /// Tolerance on the max-norm relative residual.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for KrylovOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 1000,
        }
    }
}

struct History<'a> {
    rhs_norm: f64,
    residual: Vec<f64>,
    norms2: Vec<f64>,
    reference: Option<&'a [f64]>,
    errors: Vec<f64>,
}

impl<'a> History<'a> {
    fn new(rhs: &[f64], reference: Option<&'a [f64]>) -> Self {
        Self {
            rhs_norm: norm_inf(rhs),
            residual: Vec::new(),
            norms2: Vec::new(),
            reference,
            errors: Vec::new(),
        }
    }

    /// Records the iterate and returns its relative residual.
    fn record(&mut self, x: &[f64], r: &[f64]) -> f64 {
        let rel = norm_inf(r) / self.rhs_norm;
        self.residual.push(rel);
        self.norms2.push(dot(r, r).sqrt());
        if let Some(v) = self.reference {
            self.errors.push(
                x.iter()
                    .zip(v)
                    .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs())),
            );
        }
        rel
    }

    fn finish(
        self,
        x: Vec<f64>,
        iterations: usize,
        converged: bool,
        breakdown: bool,
        applies: usize,
    ) -> KrylovResult {
        KrylovResult {
            solution: x,
            iterations,
            converged,
            breakdown,
            residual_history: self.residual,
            residual_norms2: self.norms2,
            error_history: self.reference.map(|_| self.errors),
            applies,
        }
    }
}

fn prepare<L: LinearOperator + ?Sized>(
    op: &L,
    rhs: &[f64],
    reference: Option<&[f64]>,
) -> Result<()> {
    let d = op.dim();
    if rhs.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: rhs.len(),
        });
    }
    if let Some(v) = reference {
        if v.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: v.len(),
            });
        }
    }
    if !all_finite(rhs) {
        return Err(Error::InvalidArgument(
            "right-hand side is not finite".into(),
        ));
    }
    Ok(())
}

fn checked_apply<L: LinearOperator + ?Sized>(
    op: &L,
    v: &[f64],
    iteration: usize,
) -> Result<Vec<f64>> {
    let out = op.apply(v)?;
    if !all_finite(&out) {
        return Err(Error::NonFinite { step: iteration });
    }
    Ok(out)
}

/// Conjugate residual iteration from `v_0 = 0`, stopping when the
/// max-norm relative residual drops to `opts.tol`.
pub fn conjugate_residual<L: LinearOperator + ?Sized>(
    op: &L,
    rhs: &[f64],
    opts: &KrylovOptions,
    reference: Option<&[f64]>,
) -> Result<KrylovResult> {
    prepare(op, rhs, reference)?;
    let d = rhs.len();
    let mut x = vec![0.0; d];
    let mut r = rhs.to_vec();
    let mut hist = History::new(rhs, reference);
    if hist.rhs_norm == 0.0 {
        hist.residual.push(0.0);
        hist.norms2.push(0.0);
        if let Some(v) = reference {
            hist.errors.push(norm_inf(v));
        }
        return Ok(hist.finish(x, 0, true, false, 0));
    }
    hist.record(&x, &r);

    let mut ar = checked_apply(op, &r, 0)?;
    let mut applies = 1;
    let mut p = r.clone();
    let mut ap = ar.clone();
    let mut rar = dot(&r, &ar);

    for k in 1..=opts.max_iter {
        let apap = dot(&ap, &ap);
        if apap.abs() < BREAKDOWN || rar.abs() < BREAKDOWN {
            return Ok(hist.finish(x, k - 1, false, true, applies));
        }
        let alpha = rar / apap;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        if hist.record(&x, &r) <= opts.tol {
            return Ok(hist.finish(x, k, true, false, applies));
        }
        ar = checked_apply(op, &r, k)?;
        applies += 1;
        let rar_next = dot(&r, &ar);
        let beta = rar_next / rar;
        rar = rar_next;
        for i in 0..d {
            p[i] = r[i] + beta * p[i];
            ap[i] = ar[i] + beta * ap[i];
        }
    }
    Ok(hist.finish(x, opts.max_iter, false, false, applies))
}

/// Conjugate gradient iteration from `v_0 = 0` with the same stopping rule.
pub fn conjugate_gradient<L: LinearOperator + ?Sized>(
    op: &L,
    rhs: &[f64],
    opts: &KrylovOptions,
    reference: Option<&[f64]>,
) -> Result<KrylovResult> {
    prepare(op, rhs, reference)?;
    let d = rhs.len();
    let mut x = vec![0.0; d];
    let mut r = rhs.to_vec();
    let mut hist = History::new(rhs, reference);
    if hist.rhs_norm == 0.0 {
        hist.residual.push(0.0);
        hist.norms2.push(0.0);
        if let Some(v) = reference {
            hist.errors.push(norm_inf(v));
        }
        return Ok(hist.finish(x, 0, true, false, 0));
    }
    hist.record(&x, &r);
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let mut applies = 0;

    for k in 1..=opts.max_iter {
        let ap = checked_apply(op, &p, k)?;
        applies += 1;
        let pap = dot(&p, &ap);
        if pap.abs() < BREAKDOWN {
            return Ok(hist.finish(x, k - 1, false, true, applies));
        }
        let alpha = rr / pap;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        if hist.record(&x, &r) <= opts.tol {
            return Ok(hist.finish(x, k, true, false, applies));
        }
        let rr_next = dot(&r, &r);
        let beta = rr_next / rr;
        rr = rr_next;
        for i in 0..d {
            p[i] = r[i] + beta * p[i];
        }
    }
    Ok(hist.finish(x, opts.max_iter, false, false, applies))
}

/// `τ(M) = max_ij |M_ij - M_ji|`
pub fn degree_of_asymmetry(m: &DMatrix<f64>) -> Result<f64> {
    check_square(m)?;
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in i + 1..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    Ok(worst)
}

/// Entrywise max norm `max_ij |M_ij|`.
pub fn norm_max(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Operator norm induced by the vector max norm (largest absolute row sum).
pub fn norm_inf_operator(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `‖M‖_∞ ‖M⁻¹‖_∞` with the inverse from a dense LU factorization.
pub fn cond_inf(m: &DMatrix<f64>) -> Result<f64> {
    check_square(m)?;
    let inv = m.clone().try_inverse().ok_or(Error::SingularMatrix)?;
    if !inv.iter().all(|v| v.is_finite()) {
        return Err(Error::SingularMatrix);
    }
    Ok(norm_inf_operator(m) * norm_inf_operator(&inv))
}

/// Relative perturbation bound `cond_∞(H̃) ‖H - H̃‖_∞ / ‖H̃‖_∞` on the
/// solutions of `H v = r` and `H̃ ṽ = r`.
pub fn perturbation_bound(exact: &DMatrix<f64>, approx: &DMatrix<f64>) -> Result<f64> {
    check_square(exact)?;
    if exact.shape() != approx.shape() {
        return Err(Error::DimensionMismatch {
            expected: exact.nrows(),
            got: approx.nrows(),
        });
    }
    let cond = cond_inf(approx)?;
    Ok(cond * norm_inf_operator(&(exact - approx)) / norm_inf_operator(approx))
}

fn check_square(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch {
            expected: m.nrows(),
            got: m.ncols(),
        });
    }
    Ok(())
}
