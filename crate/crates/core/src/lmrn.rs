//! Levenberg–Marquardt-regularized Newton: each outer iteration solves
//! `(H + μI) ν = -∇C` with conjugate residuals on a matrix-free Hessian.

use std::ops::Range;

use crate::adjoint::SweepMode;
use crate::cost::CostAttachment;
use crate::error::{Error, Result};
use crate::krylov::{conjugate_residual, KrylovOptions};
use crate::ode::SecondOrderSystem;
use crate::sensitivity::{gradient_with_mode, Gradient, HvpOperator, Model, Shifted};
use crate::vecops::{all_finite, dot, norm_inf};

const MU_FACTOR: f64 = 4.0;
const ACCEPT_RATIO: f64 = 0.1;
/// Consecutive rejections tolerated before giving up on an iterate.
const MAX_REJECTIONS: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmrnOptions {
    /// Stop once `‖∇C‖_∞` drops to this value.
    pub grad_tol: f64,
    /// Max-norm relative residual tolerance of the inner CR solves.
    pub cr_tol: f64,
    pub max_iter: usize,
    /// Inner iteration cap; `None` means ten times the control dimension.
    pub cr_max_iter: Option<usize>,
    pub mode: SweepMode,
}

impl Default for LmrnOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-8,
            cr_tol: 1e-8,
            max_iter: 200,
            cr_max_iter: None,
            mode: SweepMode::Exact,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmrnState {
    pub w: Vec<f64>,
    pub mu: f64,
    pub cost: f64,
    pub gradient: Vec<f64>,
    pub backward_evals: usize,
    /// `(backward_evals, C)` at the start and after every accepted step.
    pub history: Vec<(usize, f64)>,
    pub iterations: usize,
    pub converged: bool,
}

impl LmrnState {
    fn new(w: Vec<f64>) -> Self {
        Self {
            w,
            mu: 0.0,
            cost: f64::INFINITY,
            gradient: Vec::new(),
            backward_evals: 0,
            history: Vec::new(),
            iterations: 0,
            converged: false,
        }
    }
}

pub fn count_backward_evals(state: &LmrnState) -> usize {
    state.backward_evals
}

/// Places the control `w` into `block` of a copy of `base`.
fn embed(base: &[f64], block: &Range<usize>, w: &[f64]) -> Vec<f64> {
    let mut x = base.to_vec();
    x[block.clone()].copy_from_slice(w);
    x
}

/// Minimizes `W ↦ C(x(θ(W)))` where `θ` equals `base` except on `block`,
/// which holds the control `W`. In naive mode both the gradient and the
/// Hessian-vector products come from the comparison backward scheme.
///
/// Running out of outer iterations is not an error: the best iterate is
/// returned with `converged = false`.
pub fn lmrn_minimize<S, C>(
    model: Model<'_, S, C>,
    base: &[f64],
    block: Range<usize>,
    w0: &[f64],
    opts: &LmrnOptions,
) -> Result<LmrnState>
where
    S: SecondOrderSystem + ?Sized,
    C: CostAttachment + ?Sized,
{
    if base.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: base.len(),
        });
    }
    if block.end > base.len() || block.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "control block {block:?} out of range"
        )));
    }
    if w0.len() != block.len() {
        return Err(Error::DimensionMismatch {
            expected: block.len(),
            got: w0.len(),
        });
    }
    if !all_finite(w0) {
        return Err(Error::InvalidArgument(
            "initial control is not finite".into(),
        ));
    }
    if !(opts.grad_tol > 0.0 && opts.cr_tol > 0.0) {
        return Err(Error::InvalidArgument("tolerances must be positive".into()));
    }

    let krylov = KrylovOptions {
        tol: opts.cr_tol,
        max_iter: opts.cr_max_iter.unwrap_or(10 * block.len()),
    };
    let mut state = LmrnState::new(w0.to_vec());
    let evaluate = |w: &[f64], state: &mut LmrnState| -> Result<Gradient> {
        let g = gradient_with_mode(model, &embed(base, &block, w), opts.mode)?;
        state.backward_evals += 1;
        Ok(g)
    };

    let mut current = evaluate(w0, &mut state)?;
    state.cost = current.value;
    state.gradient = current.grad[block.clone()].to_vec();
    state.mu = 1e-3 * norm_inf(&state.gradient).max(1.0);
    state.history.push((state.backward_evals, state.cost));

    while state.iterations < opts.max_iter {
        if norm_inf(&state.gradient) <= opts.grad_tol {
            state.converged = true;
            break;
        }
        state.iterations += 1;
        let g = state.gradient.clone();
        let rhs: Vec<f64> = g.iter().map(|x| -x).collect();
        let hess =
            HvpOperator::from_gradient(model, current.clone())?.restrict_to(block.clone())?;

        let mut accepted = false;
        for _ in 0..MAX_REJECTIONS {
            let shifted = Shifted {
                op: &hess,
                shift: state.mu,
            };
            let before = hess.apply_count();
            let solve = conjugate_residual(&shifted, &rhs, &krylov, None);
            state.backward_evals += hess.apply_count() - before;
            let solve = match solve {
                Ok(s) if !s.breakdown && all_finite(&s.solution) => s,
                _ => {
                    state.mu *= MU_FACTOR;
                    continue;
                }
            };
            let nu = solve.solution;
            // Quadratic-model reduction, using (H + μI)ν = -g.
            let predicted = -0.5 * dot(&g, &nu) + 0.5 * state.mu * dot(&nu, &nu);

            let trial: Vec<f64> = state.w.iter().zip(&nu).map(|(w, n)| w + n).collect();
            let trial_cost = model
                .cost_value(&embed(base, &block, &trial))
                .unwrap_or(f64::INFINITY);
            let actual = state.cost - trial_cost;
            if trial_cost.is_finite() && predicted > 0.0 && actual >= ACCEPT_RATIO * predicted {
                state.mu /= MU_FACTOR;
                current = evaluate(&trial, &mut state)?;
                state.w = trial;
                state.cost = current.value;
                state.gradient = current.grad[block.clone()].to_vec();
                state.history.push((state.backward_evals, state.cost));
                accepted = true;
                break;
            }
            state.mu *= MU_FACTOR;
        }
        if !accepted {
            return Err(Error::KrylovBreakdown {
                iterations: state.iterations,
            });
        }
    }
    if !state.converged && norm_inf(&state.gradient) <= opts.grad_tol {
        state.converged = true;
    }
    Ok(state)
}
