//! Gradient and Hessian-vector product operators over a discretized model,
//! plus finite-difference oracles used to validate them.

use std::ops::Range;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::adjoint::{
    first_order_sweep, second_order_sweep, BackwardScheme, LambdaCache, SweepMode,
};
use crate::cost::CostAttachment;
use crate::error::{Error, Result};
use crate::ode::{integrate, propagate_tangent, SecondOrderSystem, Trajectory};
use crate::tableau::{adjoint_partner, ButcherTableau};
use crate::vecops::{axpy, unit};

/// Matrix-free square operator `v ↦ M v`.
pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>>;
}

impl LinearOperator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.ncols() {
            return Err(Error::DimensionMismatch {
                expected: self.ncols(),
                got: v.len(),
            });
        }
        let mut out = vec![0.0; self.nrows()];
        for (j, &vj) in v.iter().enumerate() {
            if vj != 0.0 {
                for (o, m) in out.iter_mut().zip(self.column(j).iter()) {
                    *o += m * vj;
                }
            }
        }
        Ok(out)
    }
}

impl<T: LinearOperator + ?Sized> LinearOperator for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        (**self).apply(v)
    }
}

/// `v ↦ (M + shift·I) v`
pub struct Shifted<L> {
    pub op: L,
    pub shift: f64,
}

impl<L: LinearOperator> LinearOperator for Shifted<L> {
    fn dim(&self) -> usize {
        self.op.dim()
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.op.apply(v)?;
        axpy(self.shift, v, &mut out);
        Ok(out)
    }
}

/// A system, a cost and the time discretization they are evaluated with.
pub struct Model<'a, S: ?Sized, C: ?Sized> {
    pub system: &'a S,
    pub cost: &'a C,
    pub tableau: &'a ButcherTableau,
    pub h: f64,
    pub steps: usize,
}

impl<S: ?Sized, C: ?Sized> Clone for Model<'_, S, C> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<S: ?Sized, C: ?Sized> Copy for Model<'_, S, C> {}

impl<'a, S, C> Model<'a, S, C>
where
    S: SecondOrderSystem + ?Sized,
    C: CostAttachment + ?Sized,
{
    pub fn new(
        system: &'a S,
        cost: &'a C,
        tableau: &'a ButcherTableau,
        h: f64,
        steps: usize,
    ) -> Self {
        Self {
            system,
            cost,
            tableau,
            h,
            steps,
        }
    }

    pub fn dim(&self) -> usize {
        self.system.dim()
    }

    pub fn trajectory(&self, theta: &[f64]) -> Result<Trajectory> {
        integrate(self.system, self.tableau, theta, self.h, self.steps)
    }

    /// Cost of the discrete solution started from `θ`.
    pub fn cost_value(&self, theta: &[f64]) -> Result<f64> {
        self.cost.total(&self.trajectory(theta)?)
    }

    fn scheme(&self, mode: SweepMode) -> Result<BackwardScheme> {
        match mode {
            SweepMode::Exact => {
                BackwardScheme::exact(self.tableau, &adjoint_partner(self.tableau)?)
            }
            SweepMode::Naive => BackwardScheme::naive(self.tableau),
        }
    }
}

/// Gradient together with the forward and λ-trajectories that produced it.
#[derive(Debug, Clone)]
pub struct Gradient {
    pub value: f64,
    pub grad: Vec<f64>,
    pub mode: SweepMode,
    pub state: Arc<Trajectory>,
    pub lambda: LambdaCache,
}

/// Exact gradient `∇_θ C(x(θ))` of the discrete cost.
pub fn gradient<S, C>(model: Model<'_, S, C>, theta: &[f64]) -> Result<Gradient>
where
    S: SecondOrderSystem + ?Sized,
    C: CostAttachment + ?Sized,
{
    gradient_with_mode(model, theta, SweepMode::Exact)
}

/// Gradient from the λ-block of the requested backward scheme.
pub fn gradient_with_mode<S, C>(
    model: Model<'_, S, C>,
    theta: &[f64],
    mode: SweepMode,
) -> Result<Gradient>
where
    S: SecondOrderSystem + ?Sized,
    C: CostAttachment + ?Sized,
{
    let scheme = model.scheme(mode)?;
    let state = Arc::new(model.trajectory(theta)?);
    let value = model.cost.total(&state)?;
    let sweep = first_order_sweep(model.system, &state, &scheme, model.cost)?;
    Ok(Gradient {
        value,
        grad: sweep.lambda0,
        mode,
        state,
        lambda: sweep
            .lambda
            .expect("first-order sweep returns its λ-trajectory"),
    })
}

/// Hessian-vector product operator at a fixed `θ`.
///
/// The x-trajectory is integrated once. In exact mode the λ-trajectory is
/// cached as well, so each [`apply`](Self::apply) costs one forward δ-sweep
/// and one backward ξ-sweep. Naive mode recomputes λ inside every sweep.
pub struct HvpOperator<'a, S: ?Sized, C: ?Sized> {
    model: Model<'a, S, C>,
    scheme: BackwardScheme,
    gradient: Gradient,
    block: Option<Range<usize>>,
    apply_count: AtomicUsize,
}

pub fn make_hvp_operator<'a, S, C>(
    model: Model<'a, S, C>,
    theta: &[f64],
    mode: SweepMode,
) -> Result<HvpOperator<'a, S, C>>
where
    S: SecondOrderSystem + ?Sized,
    C: CostAttachment + ?Sized,
{
    let gradient = gradient_with_mode(model, theta, mode)?;
    HvpOperator::from_gradient(model, gradient)
}

impl<'a, S, C> HvpOperator<'a, S, C>
where
    S: SecondOrderSystem + ?Sized,
    C: CostAttachment + ?Sized,
{
    /// Reuses the trajectories of an already computed gradient.
    pub fn from_gradient(model: Model<'a, S, C>, gradient: Gradient) -> Result<Self> {
        if gradient.state.tableau() != model.tableau {
            return Err(Error::CacheMismatch);
        }
        Ok(Self {
            scheme: model.scheme(gradient.mode)?,
            model,
            gradient,
            block: None,
            apply_count: AtomicUsize::new(0),
        })
    }

    /// Restricts the operator to a block of the state: inputs are
    /// zero-padded into the full direction and outputs sliced back.
    pub fn restrict_to(mut self, block: Range<usize>) -> Result<Self> {
        if block.end > self.model.dim() || block.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "block {block:?} outside state of dimension {}",
                self.model.dim()
            )));
        }
        self.block = Some(block);
        Ok(self)
    }

    pub fn mode(&self) -> SweepMode {
        self.scheme.mode()
    }

    pub fn gradient(&self) -> &Gradient {
        &self.gradient
    }

    pub fn state(&self) -> &Trajectory {
        &self.gradient.state
    }

    /// Number of backward ξ-sweeps performed so far.
    pub fn apply_count(&self) -> usize {
        self.apply_count.load(Ordering::Relaxed)
    }

    fn embed(&self, v: &[f64]) -> Result<Vec<f64>> {
        let expected = LinearOperator::dim(self);
        if v.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: v.len(),
            });
        }
        Ok(match &self.block {
            None => v.to_vec(),
            Some(block) => {
                let mut full = vec![0.0; self.model.dim()];
                full[block.clone()].copy_from_slice(v);
                full
            }
        })
    }

    fn project(&self, full: Vec<f64>) -> Vec<f64> {
        match &self.block {
            None => full,
            Some(block) => full[block.clone()].to_vec(),
        }
    }

    fn sweep(&self, gamma: &[f64], reuse_lambda: bool) -> Result<Vec<f64>> {
        let full = self.embed(gamma)?;
        let ctraj = propagate_tangent(self.model.system, &self.gradient.state, &full)?;
        let cached = (reuse_lambda && self.scheme.mode() == SweepMode::Exact)
            .then_some(&self.gradient.lambda);
        let result = second_order_sweep(
            self.model.system,
            &ctraj,
            &self.scheme,
            self.model.cost,
            cached,
        )?;
        self.apply_count
            .fetch_add(result.backward_eval_count, Ordering::Relaxed);
        Ok(self.project(result.xi0.expect("coupled sweep returns ξ_0")))
    }

    /// `H γ`
    pub fn apply(&self, gamma: &[f64]) -> Result<Vec<f64>> {
        self.sweep(gamma, true)
    }

    /// `H γ` with the λ-block recomputed inside the sweep.
    pub fn apply_without_cache(&self, gamma: &[f64]) -> Result<Vec<f64>> {
        self.sweep(gamma, false)
    }
}

impl<S, C> LinearOperator for HvpOperator<'_, S, C>
where
    S: SecondOrderSystem + ?Sized,
    C: CostAttachment + ?Sized,
{
    fn dim(&self) -> usize {
        match &self.block {
            Some(block) => block.len(),
            None => self.model.dim(),
        }
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        HvpOperator::apply(self, v)
    }
}

/// Dense matrix whose column `j` is `op(e_j)`.
pub fn assemble_hessian<L: LinearOperator + ?Sized>(op: &L) -> Result<DMatrix<f64>> {
    let d = op.dim();
    let mut m = DMatrix::zeros(d, d);
    for j in 0..d {
        let col = op.apply(&unit(d, j))?;
        m.column_mut(j).copy_from_slice(&col);
    }
    Ok(m)
}

/// Central difference of the discrete cost along `direction`.
pub fn fd_directional_derivative<S, C>(
    model: Model<'_, S, C>,
    theta: &[f64],
    direction: &[f64],
    eps: f64,
) -> Result<f64>
where
    S: SecondOrderSystem + ?Sized,
    C: CostAttachment + ?Sized,
{
    check_eps(eps)?;
    let mut plus = theta.to_vec();
    let mut minus = theta.to_vec();
    axpy(eps, direction, &mut plus);
    axpy(-eps, direction, &mut minus);
    Ok((model.cost_value(&plus)? - model.cost_value(&minus)?) / (2.0 * eps))
}

/// Component-wise central differences of the discrete cost.
pub fn fd_gradient_oracle<S, C>(model: Model<'_, S, C>, theta: &[f64], eps: f64) -> Result<Vec<f64>>
where
    S: SecondOrderSystem + ?Sized,
    C: CostAttachment + ?Sized,
{
    let d = theta.len();
    (0..d)
        .map(|k| fd_directional_derivative(model, theta, &unit(d, k), eps))
        .collect()
}

/// `(∇C(θ + εγ) - ∇C(θ - εγ)) / 2ε` using exact adjoint gradients.
pub fn fd_hvp_oracle<S, C>(
    model: Model<'_, S, C>,
    theta: &[f64],
    gamma: &[f64],
    eps: f64,
) -> Result<Vec<f64>>
where
    S: SecondOrderSystem + ?Sized,
    C: CostAttachment + ?Sized,
{
    check_eps(eps)?;
    let mut plus = theta.to_vec();
    let mut minus = theta.to_vec();
    axpy(eps, gamma, &mut plus);
    axpy(-eps, gamma, &mut minus);
    let gp = gradient(model, &plus)?.grad;
    let gm = gradient(model, &minus)?.grad;
    Ok(gp
        .iter()
        .zip(&gm)
        .map(|(a, b)| (a - b) / (2.0 * eps))
        .collect())
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {eps}"
        )))
    }
}

/// Default finite-difference steps.
pub const FD_GRADIENT_EPS: f64 = 1e-6;
pub const FD_HVP_EPS: f64 = 1e-5;
