//! ODE systems with derivative actions and forward Runge–Kutta integration
//! of the original and the coupled (state + variational) systems.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::tableau::{ButcherTableau, TableauKind};
use crate::vecops::{all_finite, axpy, norm_inf};

/// Right-hand side `f` of an autonomous system `dx/dt = f(x)` together with
/// its first-derivative actions. All `out` buffers are overwritten.
pub trait OdeSystem {
    fn dim(&self) -> usize;

    fn rhs(&self, x: &[f64], out: &mut [f64]);

    /// `∇f(x) v`
    fn jvp(&self, x: &[f64], v: &[f64], out: &mut [f64]);

    /// `∇f(x)ᵀ w`
    fn vjp(&self, x: &[f64], w: &[f64], out: &mut [f64]);

    /// Dense Jacobian, assembled column by column from `jvp` unless overridden.
    fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let d = self.dim();
        let mut jac = DMatrix::zeros(d, d);
        let mut e = vec![0.0; d];
        let mut col = vec![0.0; d];
        for j in 0..d {
            e[j] = 1.0;
            self.jvp(x, &e, &mut col);
            jac.column_mut(j).copy_from_slice(&col);
            e[j] = 0.0;
        }
        jac
    }
}

/// Systems that also expose contractions of the second derivative of `f`.
pub trait SecondOrderSystem: OdeSystem {
    /// `(∇ₓ(∇ₓf(x) δ))ᵀ λ`
    fn so_vjp(&self, x: &[f64], delta: &[f64], lambda: &[f64], out: &mut [f64]);

    /// `(∇ₓ(∇ₓf(x) δ)) v`, the second derivative of `f` applied to `(δ, v)`.
    ///
    /// The default recovers each component from `so_vjp` against a unit
    /// covector, which costs `dim` calls.
    fn so_jvp(&self, x: &[f64], delta: &[f64], v: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let mut e = vec![0.0; d];
        let mut row = vec![0.0; d];
        for k in 0..d {
            e[k] = 1.0;
            self.so_vjp(x, delta, &e, &mut row);
            out[k] = crate::vecops::dot(&row, v);
            e[k] = 0.0;
        }
    }
}

impl<T: OdeSystem + ?Sized> OdeSystem for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn rhs(&self, x: &[f64], out: &mut [f64]) {
        (**self).rhs(x, out)
    }
    fn jvp(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        (**self).jvp(x, v, out)
    }
    fn vjp(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        (**self).vjp(x, w, out)
    }
    fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        (**self).jacobian(x)
    }
}

impl<T: SecondOrderSystem + ?Sized> SecondOrderSystem for &T {
    fn so_vjp(&self, x: &[f64], delta: &[f64], lambda: &[f64], out: &mut [f64]) {
        (**self).so_vjp(x, delta, lambda, out)
    }
    fn so_jvp(&self, x: &[f64], delta: &[f64], v: &[f64], out: &mut [f64]) {
        (**self).so_jvp(x, delta, v, out)
    }
}

/// The state + variational system `y = (x, δ)`, `g(y) = (f(x), ∇f(x) δ)`.
#[derive(Debug, Clone, Copy)]
pub struct CoupledSystem<S> {
    inner: S,
}

pub fn coupled_system<S: SecondOrderSystem>(sys: S) -> CoupledSystem<S> {
    CoupledSystem { inner: sys }
}

impl<S: SecondOrderSystem> CoupledSystem<S> {
    pub fn inner(&self) -> &S {
        &self.inner
    }
}

impl<S: SecondOrderSystem> OdeSystem for CoupledSystem<S> {
    fn dim(&self) -> usize {
        2 * self.inner.dim()
    }

    fn rhs(&self, y: &[f64], out: &mut [f64]) {
        let d = self.inner.dim();
        let (x, delta) = y.split_at(d);
        let (fx, fd) = out.split_at_mut(d);
        self.inner.rhs(x, fx);
        self.inner.jvp(x, delta, fd);
    }

    fn jvp(&self, y: &[f64], v: &[f64], out: &mut [f64]) {
        let d = self.inner.dim();
        let (x, delta) = y.split_at(d);
        let (vx, vd) = v.split_at(d);
        let (ox, od) = out.split_at_mut(d);
        self.inner.jvp(x, vx, ox);
        self.inner.jvp(x, vd, od);
        let mut second = vec![0.0; d];
        self.inner.so_jvp(x, delta, vx, &mut second);
        axpy(1.0, &second, od);
    }

    /// On `φ = (ξ, λ)` returns `(∇f ᵀξ + (∇(∇f δ))ᵀλ, ∇f ᵀλ)`.
    fn vjp(&self, y: &[f64], w: &[f64], out: &mut [f64]) {
        let d = self.inner.dim();
        let (x, delta) = y.split_at(d);
        let (xi, lambda) = w.split_at(d);
        let (ox, ol) = out.split_at_mut(d);
        self.inner.vjp(x, xi, ox);
        let mut second = vec![0.0; d];
        self.inner.so_vjp(x, delta, lambda, &mut second);
        axpy(1.0, &second, ox);
        self.inner.vjp(x, lambda, ol);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorOptions {
    /// Max-norm tolerance on the implicit step residual.
    pub newton_tol: f64,
    pub newton_max_iter: usize,
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        Self {
            newton_tol: 1e-12,
            newton_max_iter: 50,
        }
    }
}

/// LU factors of the implicit-Euler step matrix `I - h ∇f(x_{n+1})` and of
/// its transpose.
#[derive(Debug, Clone)]
pub struct StepFactors {
    forward: nalgebra::linalg::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    adjoint: nalgebra::linalg::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl StepFactors {
    fn new(jac: &DMatrix<f64>, h: f64, step: usize) -> Result<Self> {
        let d = jac.nrows();
        let m = DMatrix::identity(d, d) - jac * h;
        let forward = m.clone().lu();
        let adjoint = m.transpose().lu();
        if !forward.is_invertible() || !adjoint.is_invertible() {
            return Err(Error::SingularStep { step });
        }
        Ok(Self { forward, adjoint })
    }

    /// Solves `(I - hJ) z = rhs`.
    pub fn solve(&self, rhs: &[f64], step: usize) -> Result<Vec<f64>> {
        solve_lu(&self.forward, rhs, step)
    }

    /// Solves `(I - hJ)ᵀ z = rhs`.
    pub fn solve_adjoint(&self, rhs: &[f64], step: usize) -> Result<Vec<f64>> {
        solve_lu(&self.adjoint, rhs, step)
    }
}

fn solve_lu(
    lu: &nalgebra::linalg::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    rhs: &[f64],
    step: usize,
) -> Result<Vec<f64>> {
    let b = DVector::from_column_slice(rhs);
    lu.solve(&b)
        .map(|z| z.as_slice().to_vec())
        .ok_or(Error::SingularStep { step })
}

static NEXT_TRAJECTORY_ID: AtomicU64 = AtomicU64::new(1);

/// Forward solution with every node and stage stored.
#[derive(Debug, Clone)]
pub struct Trajectory {
    id: u64,
    tableau: ButcherTableau,
    h: f64,
    nodes: Vec<Vec<f64>>,
    /// `stages[n][i] = X_{n,i}`
    stages: Vec<Vec<Vec<f64>>>,
    /// `slopes[n][i] = k_{n,i} = f(X_{n,i})`
    slopes: Vec<Vec<Vec<f64>>>,
    /// Implicit Euler only: factors of the step matrix at `x_{n+1}`.
    factors: Vec<StepFactors>,
}

impl Trajectory {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn tableau(&self) -> &ButcherTableau {
        &self.tableau
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.nodes[0].len()
    }

    pub fn node(&self, n: usize) -> &[f64] {
        &self.nodes[n]
    }

    pub fn nodes(&self) -> &[Vec<f64>] {
        &self.nodes
    }

    pub fn last(&self) -> &[f64] {
        self.nodes.last().expect("trajectory has at least one node")
    }

    pub fn stage(&self, n: usize, i: usize) -> &[f64] {
        &self.stages[n][i]
    }

    pub fn slope(&self, n: usize, i: usize) -> &[f64] {
        &self.slopes[n][i]
    }

    pub fn step_factors(&self, n: usize) -> Option<&StepFactors> {
        self.factors.get(n)
    }
}

pub fn integrate<S: OdeSystem + ?Sized>(
    sys: &S,
    tableau: &ButcherTableau,
    x0: &[f64],
    h: f64,
    steps: usize,
) -> Result<Trajectory> {
    integrate_with(sys, tableau, x0, h, steps, &IntegratorOptions::default())
}

pub fn integrate_with<S: OdeSystem + ?Sized>(
    sys: &S,
    tableau: &ButcherTableau,
    x0: &[f64],
    h: f64,
    steps: usize,
    opts: &IntegratorOptions,
) -> Result<Trajectory> {
    let d = sys.dim();
    if x0.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: x0.len(),
        });
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "step size must be positive, got {h}"
        )));
    }
    if !all_finite(x0) {
        return Err(Error::NonFinite { step: 0 });
    }

    let s = tableau.stages();
    let mut nodes = Vec::with_capacity(steps + 1);
    let mut stages = Vec::with_capacity(steps);
    let mut slopes = Vec::with_capacity(steps);
    let mut factors = Vec::new();
    nodes.push(x0.to_vec());

    for n in 0..steps {
        let xn = &nodes[n];
        let (next, step_stages, step_slopes) = match tableau.kind() {
            TableauKind::Explicit => {
                let mut xs: Vec<Vec<f64>> = Vec::with_capacity(s);
                let mut ks: Vec<Vec<f64>> = Vec::with_capacity(s);
                for i in 0..s {
                    let mut stage = xn.clone();
                    for (j, kj) in ks.iter().enumerate() {
                        let aij = tableau.a(i, j);
                        if aij != 0.0 {
                            axpy(h * aij, kj, &mut stage);
                        }
                    }
                    let mut k = vec![0.0; d];
                    sys.rhs(&stage, &mut k);
                    xs.push(stage);
                    ks.push(k);
                }
                let mut next = xn.clone();
                for (bi, ki) in tableau.weights().iter().zip(&ks) {
                    axpy(h * bi, ki, &mut next);
                }
                (next, xs, ks)
            }
            TableauKind::ImplicitEuler => {
                let next = newton_implicit_euler(sys, xn, h, n, opts)?;
                factors.push(StepFactors::new(&sys.jacobian(&next), h, n)?);
                let mut k = vec![0.0; d];
                sys.rhs(&next, &mut k);
                (next.clone(), vec![next], vec![k])
            }
        };
        if !all_finite(&next) {
            return Err(Error::NonFinite { step: n + 1 });
        }
        nodes.push(next);
        stages.push(step_stages);
        slopes.push(step_slopes);
    }

    Ok(Trajectory {
        id: NEXT_TRAJECTORY_ID.fetch_add(1, Ordering::Relaxed),
        tableau: tableau.clone(),
        h,
        nodes,
        stages,
        slopes,
        factors,
    })
}

/// Solves `z - x_n - h f(z) = 0` by full Newton from `z = x_n`.
fn newton_implicit_euler<S: OdeSystem + ?Sized>(
    sys: &S,
    xn: &[f64],
    h: f64,
    step: usize,
    opts: &IntegratorOptions,
) -> Result<Vec<f64>> {
    let d = sys.dim();
    let mut z = xn.to_vec();
    let mut fz = vec![0.0; d];
    let mut residual = vec![0.0; d];
    let mut res_norm = f64::INFINITY;
    for _ in 0..=opts.newton_max_iter {
        sys.rhs(&z, &mut fz);
        for k in 0..d {
            residual[k] = z[k] - xn[k] - h * fz[k];
        }
        res_norm = norm_inf(&residual);
        if !res_norm.is_finite() {
            return Err(Error::NonFinite { step: step + 1 });
        }
        if res_norm <= opts.newton_tol {
            return Ok(z);
        }
        let m = DMatrix::identity(d, d) - sys.jacobian(&z) * h;
        let rhs = DVector::from_iterator(d, residual.iter().map(|r| -r));
        let dz = m.lu().solve(&rhs).ok_or(Error::SingularStep { step })?;
        axpy(1.0, dz.as_slice(), &mut z);
    }
    Err(Error::NewtonDivergence {
        step,
        residual: res_norm,
    })
}

/// Forward coupled solution: the shared x-trajectory plus the variational
/// nodes `δ_n` and stages `Δ_{n,i}`.
#[derive(Debug, Clone)]
pub struct CoupledTrajectory {
    state: Arc<Trajectory>,
    tangent_nodes: Vec<Vec<f64>>,
    tangent_stages: Vec<Vec<Vec<f64>>>,
}

impl CoupledTrajectory {
    pub fn state(&self) -> &Trajectory {
        &self.state
    }

    pub fn shared_state(&self) -> &Arc<Trajectory> {
        &self.state
    }

    pub fn tangent(&self, n: usize) -> &[f64] {
        &self.tangent_nodes[n]
    }

    pub fn tangent_nodes(&self) -> &[Vec<f64>] {
        &self.tangent_nodes
    }

    pub fn tangent_stage(&self, n: usize, i: usize) -> &[f64] {
        &self.tangent_stages[n][i]
    }

    /// Node `y_n = (x_n, δ_n)` of the augmented system.
    pub fn augmented_node(&self, n: usize) -> Vec<f64> {
        let mut y = self.state.node(n).to_vec();
        y.extend_from_slice(&self.tangent_nodes[n]);
        y
    }

    /// Stage `Y_{n,i} = (X_{n,i}, Δ_{n,i})` of the augmented system.
    pub fn augmented_stage(&self, n: usize, i: usize) -> Vec<f64> {
        let mut y = self.state.stage(n, i).to_vec();
        y.extend_from_slice(&self.tangent_stages[n][i]);
        y
    }
}

/// Integrates the coupled system from `y_0 = (θ, γ)`.
pub fn integrate_coupled<S: SecondOrderSystem + ?Sized>(
    sys: &S,
    tableau: &ButcherTableau,
    theta: &[f64],
    gamma: &[f64],
    h: f64,
    steps: usize,
) -> Result<CoupledTrajectory> {
    let state = Arc::new(integrate(sys, tableau, theta, h, steps)?);
    propagate_tangent(sys, &state, gamma)
}

/// Runs the δ-equation of the coupled system over an existing x-trajectory.
///
/// The x-part of the coupled integration does not depend on δ, so reusing
/// the stored trajectory gives the same numbers as integrating `g` directly.
pub fn propagate_tangent<S: OdeSystem + ?Sized>(
    sys: &S,
    state: &Arc<Trajectory>,
    gamma: &[f64],
) -> Result<CoupledTrajectory> {
    let d = state.dim();
    if gamma.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: gamma.len(),
        });
    }
    let tableau = state.tableau();
    let s = tableau.stages();
    let h = state.h();
    let mut nodes = Vec::with_capacity(state.steps() + 1);
    let mut all_stages = Vec::with_capacity(state.steps());
    nodes.push(gamma.to_vec());

    for n in 0..state.steps() {
        let dn = &nodes[n];
        let (next, stages) = match tableau.kind() {
            TableauKind::Explicit => {
                let mut ds: Vec<Vec<f64>> = Vec::with_capacity(s);
                let mut ks: Vec<Vec<f64>> = Vec::with_capacity(s);
                for i in 0..s {
                    let mut stage = dn.clone();
                    for (j, kj) in ks.iter().enumerate() {
                        let aij = tableau.a(i, j);
                        if aij != 0.0 {
                            axpy(h * aij, kj, &mut stage);
                        }
                    }
                    let mut k = vec![0.0; d];
                    sys.jvp(state.stage(n, i), &stage, &mut k);
                    ds.push(stage);
                    ks.push(k);
                }
                let mut next = dn.clone();
                for (bi, ki) in tableau.weights().iter().zip(&ks) {
                    axpy(h * bi, ki, &mut next);
                }
                (next, ds)
            }
            TableauKind::ImplicitEuler => {
                let factors = state
                    .step_factors(n)
                    .expect("implicit trajectory stores factors");
                let next = factors.solve(dn, n)?;
                (next.clone(), vec![next])
            }
        };
        if !all_finite(&next) {
            return Err(Error::NonFinite { step: n + 1 });
        }
        nodes.push(next);
        all_stages.push(stages);
    }

    Ok(CoupledTrajectory {
        state: Arc::clone(state),
        tangent_nodes: nodes,
        tangent_stages: all_stages,
    })
}
