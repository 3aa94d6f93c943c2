//! Backward sweeps of the first-order adjoint system and of the coupled
//! (second-order + first-order) adjoint system.
//!
//! Every sweep uses the backward form
//!
//! ```text
//! φ_n     = φ_{n+1} + h Σ_i B_i q̄_{n,i}
//! q̄_{n,i} = ∇g(Y_{n,i})ᵀ Φ_{n,i}
//! Φ_{n,i} = φ_{n+1} + h Σ_j D_ij q̄_{n,j}
//! ```
//!
//! With the partner tableau the sweep differentiates the discrete flow
//! exactly. The naive schemes keep the same shape but evaluate `∇g` at the
//! step endpoints instead of the forward stages.

use crate::cost::{check_nodes, CostAttachment};
use crate::error::{Error, Result};
use crate::ode::{CoupledTrajectory, SecondOrderSystem, Trajectory};
use crate::tableau::{
    verify_partner, AdjointTableau, ButcherTableau, Coefficients, Preset, TableauKind,
};
use crate::vecops::axpy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SweepMode {
    /// Partner-tableau discretization.
    Exact,
    /// Comparison discretization that ignores the forward stages.
    Naive,
}

/// Where the Jacobian of backward stage `i` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EvalPoint {
    Stage(usize),
    StepStart,
    StepEnd,
}

/// A backward discretization tied to one forward tableau.
#[derive(Debug, Clone)]
pub struct BackwardScheme {
    mode: SweepMode,
    forward: ButcherTableau,
    weights: Vec<f64>,
    d: Coefficients,
    points: Vec<EvalPoint>,
    implicit: bool,
}

impl BackwardScheme {
    /// Partner scheme; `at` must satisfy the partner conditions for `forward`.
    pub fn exact(forward: &ButcherTableau, at: &AdjointTableau) -> Result<Self> {
        if !verify_partner(forward, at, 1e-12) {
            return Err(Error::TableauMismatch(format!(
                "adjoint tableau derived from `{}` is not a partner of `{}`",
                at.source(),
                forward.name()
            )));
        }
        let s = forward.stages();
        let implicit = match forward.kind() {
            TableauKind::Explicit => false,
            TableauKind::ImplicitEuler => true,
        };
        Ok(Self {
            mode: SweepMode::Exact,
            forward: forward.clone(),
            weights: at.weights().to_vec(),
            d: at.backward_coefficients().clone(),
            points: (0..s).map(EvalPoint::Stage).collect(),
            implicit,
        })
    }

    /// Comparison schemes: backward explicit Euler
    /// `φ_n = φ_{n+1} + h ∇g(y_{n+1})ᵀ φ_{n+1}` for both Euler forward
    /// methods, and backward Heun with `∇g` taken at `y_{n+1}` and `y_n`.
    pub fn naive(forward: &ButcherTableau) -> Result<Self> {
        let preset: Preset = forward
            .name()
            .parse()
            .map_err(|_| Error::UnsupportedNaive(forward.name().to_string()))?;
        let (weights, d, points) = match preset {
            Preset::ExplicitEuler | Preset::ImplicitEuler => (
                vec![1.0],
                Coefficients::from_rows(&[vec![0.0]])?,
                vec![EvalPoint::StepEnd],
            ),
            Preset::Heun => (
                vec![0.5, 0.5],
                Coefficients::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]])?,
                vec![EvalPoint::StepStart, EvalPoint::StepEnd],
            ),
            Preset::Rk4 => return Err(Error::UnsupportedNaive(forward.name().to_string())),
        };
        Ok(Self {
            mode: SweepMode::Naive,
            forward: forward.clone(),
            weights,
            d,
            points,
            implicit: false,
        })
    }

    pub fn mode(&self) -> SweepMode {
        self.mode
    }

    pub fn stages(&self) -> usize {
        self.weights.len()
    }

    fn check_trajectory(&self, traj: &Trajectory) -> Result<()> {
        if traj.tableau() != &self.forward {
            return Err(Error::TableauMismatch(format!(
                "scheme built for `{}`, trajectory integrated with `{}`",
                self.forward.name(),
                traj.tableau().name()
            )));
        }
        Ok(())
    }

    fn point<'a>(&self, traj: &'a Trajectory, n: usize, i: usize) -> &'a [f64] {
        match self.points[i] {
            EvalPoint::Stage(k) => traj.stage(n, k),
            EvalPoint::StepStart => traj.node(n),
            EvalPoint::StepEnd => traj.node(n + 1),
        }
    }

    fn tangent_point<'a>(&self, ctraj: &'a CoupledTrajectory, n: usize, i: usize) -> &'a [f64] {
        match self.points[i] {
            EvalPoint::Stage(k) => ctraj.tangent_stage(n, k),
            EvalPoint::StepStart => ctraj.tangent(n),
            EvalPoint::StepEnd => ctraj.tangent(n + 1),
        }
    }
}

/// Stored `λ_n` nodes and `Λ_{n,i}` stages of one first-order sweep.
///
/// The λ-block of the coupled adjoint does not depend on `ξ`, so a cache
/// built once per x-trajectory serves every subsequent Hessian-vector product.
#[derive(Debug, Clone)]
pub struct LambdaCache {
    trajectory_id: u64,
    mode: SweepMode,
    nodes: Vec<Vec<f64>>,
    stages: Vec<Vec<Vec<f64>>>,
}

impl LambdaCache {
    pub fn node(&self, n: usize) -> &[f64] {
        &self.nodes[n]
    }

    pub fn nodes(&self) -> &[Vec<f64>] {
        &self.nodes
    }

    pub fn stage(&self, n: usize, i: usize) -> &[f64] {
        &self.stages[n][i]
    }

    pub fn trajectory_id(&self) -> u64 {
        self.trajectory_id
    }

    pub fn mode(&self) -> SweepMode {
        self.mode
    }
}

#[derive(Debug, Clone)]
pub struct AdjointSweepResult {
    /// `λ_0`, the gradient with respect to the initial state.
    pub lambda0: Vec<f64>,
    /// `ξ_0`, the Hessian-vector product; absent for first-order sweeps.
    pub xi0: Option<Vec<f64>>,
    /// λ-trajectory; filled whenever the sweep computed it.
    pub lambda: Option<LambdaCache>,
    /// Always 1: one full backward sweep.
    pub backward_eval_count: usize,
}

/// First-order sweep with the partner tableau; `λ_0` is the exact gradient
/// of the total cost over the discrete flow.
pub fn sweep_first_order<S, C>(
    sys: &S,
    traj: &Trajectory,
    at: &AdjointTableau,
    cost: &C,
) -> Result<AdjointSweepResult>
where
    S: SecondOrderSystem + ?Sized,
    C: CostAttachment + ?Sized,
{
    let scheme = BackwardScheme::exact(traj.tableau(), at)?;
    first_order_sweep(sys, traj, &scheme, cost)
}

/// Coupled sweep with the partner tableau. `ξ_0` is the exact
/// Hessian-vector product along the direction stored in `ctraj`.
pub fn sweep_second_order<S, C>(
    sys: &S,
    ctraj: &CoupledTrajectory,
    at: &AdjointTableau,
    cost: &C,
    cached: Option<&LambdaCache>,
) -> Result<AdjointSweepResult>
where
    S: SecondOrderSystem + ?Sized,
    C: CostAttachment + ?Sized,
{
    let scheme = BackwardScheme::exact(ctraj.state().tableau(), at)?;
    second_order_sweep(sys, ctraj, &scheme, cost, cached)
}

/// Coupled sweep with the comparison scheme for `preset`.
pub fn sweep_naive<S, C>(
    sys: &S,
    ctraj: &CoupledTrajectory,
    preset: Preset,
    cost: &C,
) -> Result<AdjointSweepResult>
where
    S: SecondOrderSystem + ?Sized,
    C: CostAttachment + ?Sized,
{
    if ctraj.state().tableau().name() != preset.name() {
        return Err(Error::TableauMismatch(format!(
            "naive scheme `{preset}` requested for a `{}` trajectory",
            ctraj.state().tableau().name()
        )));
    }
    let scheme = BackwardScheme::naive(ctraj.state().tableau())?;
    second_order_sweep(sys, ctraj, &scheme, cost, None)
}

fn is_obs(cost: &(impl CostAttachment + ?Sized), n: usize) -> bool {
    cost.obs_nodes().binary_search(&n).is_ok()
}

/// λ-only sweep under any scheme.
pub fn first_order_sweep<S, C>(
    sys: &S,
    traj: &Trajectory,
    scheme: &BackwardScheme,
    cost: &C,
) -> Result<AdjointSweepResult>
where
    S: SecondOrderSystem + ?Sized,
    C: CostAttachment + ?Sized,
{
    scheme.check_trajectory(traj)?;
    check_nodes(cost, traj.steps())?;
    let cache = lambda_sweep(sys, traj, scheme, cost)?;
    Ok(AdjointSweepResult {
        lambda0: cache.nodes[0].clone(),
        xi0: None,
        lambda: Some(cache),
        backward_eval_count: 1,
    })
}

fn lambda_sweep<S, C>(
    sys: &S,
    traj: &Trajectory,
    scheme: &BackwardScheme,
    cost: &C,
) -> Result<LambdaCache>
where
    S: SecondOrderSystem + ?Sized,
    C: CostAttachment + ?Sized,
{
    let d = traj.dim();
    let steps = traj.steps();
    let s = scheme.stages();
    let h = traj.h();

    let mut nodes = vec![Vec::new(); steps + 1];
    let mut stages = vec![Vec::new(); steps];
    let mut lambda = vec![0.0; d];
    let mut inject = vec![0.0; d];
    if is_obs(cost, steps) {
        cost.grad(steps, traj.node(steps), &mut inject);
        axpy(1.0, &inject, &mut lambda);
    }
    nodes[steps] = lambda.clone();

    for n in (0..steps).rev() {
        let mut big: Vec<Vec<f64>> = vec![Vec::new(); s];
        let mut qbar: Vec<Vec<f64>> = vec![vec![0.0; d]; s];
        if scheme.implicit {
            // Λ = λ_{n+1} + h D ∇fᵀ Λ with D = [[1]]
            let factors = traj
                .step_factors(n)
                .expect("implicit trajectory stores factors");
            big[0] = factors.solve_adjoint(&nodes[n + 1], n)?;
            sys.vjp(scheme.point(traj, n, 0), &big[0], &mut qbar[0]);
        } else {
            for i in (0..s).rev() {
                let mut stage = nodes[n + 1].clone();
                for j in i + 1..s {
                    let dij = scheme.d.get(i, j);
                    if dij != 0.0 {
                        axpy(h * dij, &qbar[j], &mut stage);
                    }
                }
                sys.vjp(scheme.point(traj, n, i), &stage, &mut qbar[i]);
                big[i] = stage;
            }
        }
        let mut next = nodes[n + 1].clone();
        for (bi, qi) in scheme.weights.iter().zip(&qbar) {
            axpy(h * bi, qi, &mut next);
        }
        if is_obs(cost, n) {
            cost.grad(n, traj.node(n), &mut inject);
            axpy(1.0, &inject, &mut next);
        }
        if !crate::vecops::all_finite(&next) {
            return Err(Error::NonFinite { step: n });
        }
        nodes[n] = next;
        stages[n] = big;
    }

    Ok(LambdaCache {
        trajectory_id: traj.id(),
        mode: scheme.mode,
        nodes,
        stages,
    })
}

/// Coupled `(ξ, λ)` sweep under any scheme. When `cached` is given, the
/// λ-block is read from it instead of being recomputed.
pub fn second_order_sweep<S, C>(
    sys: &S,
    ctraj: &CoupledTrajectory,
    scheme: &BackwardScheme,
    cost: &C,
    cached: Option<&LambdaCache>,
) -> Result<AdjointSweepResult>
where
    S: SecondOrderSystem + ?Sized,
    C: CostAttachment + ?Sized,
{
    let traj = ctraj.state();
    scheme.check_trajectory(traj)?;
    check_nodes(cost, traj.steps())?;
    if let Some(cache) = cached {
        if cache.trajectory_id != traj.id() || cache.mode != scheme.mode {
            return Err(Error::CacheMismatch);
        }
    }
    let computed = match cached {
        Some(_) => None,
        None => Some(lambda_sweep(sys, traj, scheme, cost)?),
    };
    let lambda = cached
        .or(computed.as_ref())
        .expect("λ-trajectory available");

    let d = traj.dim();
    let steps = traj.steps();
    let s = scheme.stages();
    let h = traj.h();

    let mut xi = vec![0.0; d];
    let mut inject = vec![0.0; d];
    if is_obs(cost, steps) {
        cost.hessvec(steps, traj.node(steps), ctraj.tangent(steps), &mut inject);
        axpy(1.0, &inject, &mut xi);
    }
    let mut source = vec![0.0; d];

    for n in (0..steps).rev() {
        let mut qbar: Vec<Vec<f64>> = vec![vec![0.0; d]; s];
        if scheme.implicit {
            // (I - h∇fᵀ) Ξ = ξ_{n+1} + h (∇(∇f Δ))ᵀ Λ
            let x = scheme.point(traj, n, 0);
            sys.so_vjp(
                x,
                scheme.tangent_point(ctraj, n, 0),
                lambda.stage(n, 0),
                &mut source,
            );
            let mut rhs = xi.clone();
            axpy(h * scheme.d.get(0, 0), &source, &mut rhs);
            let factors = traj
                .step_factors(n)
                .expect("implicit trajectory stores factors");
            let stage = factors.solve_adjoint(&rhs, n)?;
            sys.vjp(x, &stage, &mut qbar[0]);
            axpy(1.0, &source, &mut qbar[0]);
        } else {
            for i in (0..s).rev() {
                let mut stage = xi.clone();
                for j in i + 1..s {
                    let dij = scheme.d.get(i, j);
                    if dij != 0.0 {
                        axpy(h * dij, &qbar[j], &mut stage);
                    }
                }
                let x = scheme.point(traj, n, i);
                sys.vjp(x, &stage, &mut qbar[i]);
                sys.so_vjp(
                    x,
                    scheme.tangent_point(ctraj, n, i),
                    lambda.stage(n, i),
                    &mut source,
                );
                axpy(1.0, &source, &mut qbar[i]);
            }
        }
        for (bi, qi) in scheme.weights.iter().zip(&qbar) {
            axpy(h * bi, qi, &mut xi);
        }
        if is_obs(cost, n) {
            cost.hessvec(n, traj.node(n), ctraj.tangent(n), &mut inject);
            axpy(1.0, &inject, &mut xi);
        }
        if !crate::vecops::all_finite(&xi) {
            return Err(Error::NonFinite { step: n });
        }
    }

    let lambda0 = lambda.nodes[0].clone();
    Ok(AdjointSweepResult {
        lambda0,
        xi0: Some(xi),
        lambda: computed,
        backward_eval_count: 1,
    })
}
