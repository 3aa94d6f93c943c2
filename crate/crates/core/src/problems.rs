//! Benchmark systems: the simple pendulum, the semi-discrete Allen–Cahn
//! equation with Neumann ends, and the periodic inhomogeneous wave equation
//! on a staggered grid with the structure field carried as constant state.

use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::cost::{CostAttachment, SquaredMisfit};
use crate::error::{Error, Result};
use crate::ode::{integrate, OdeSystem, SecondOrderSystem};
use crate::tableau::{ButcherTableau, Preset};

/// `Q' = P`, `P' = -sin Q`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Pendulum;

impl OdeSystem for Pendulum {
    fn dim(&self) -> usize {
        2
    }

    fn rhs(&self, x: &[f64], out: &mut [f64]) {
        out[0] = x[1];
        out[1] = -x[0].sin();
    }

    fn jvp(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        out[0] = v[1];
        out[1] = -x[0].cos() * v[0];
    }

    fn vjp(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        out[0] = -x[0].cos() * w[1];
        out[1] = w[0];
    }
}

impl SecondOrderSystem for Pendulum {
    fn so_vjp(&self, x: &[f64], delta: &[f64], lambda: &[f64], out: &mut [f64]) {
        out[0] = x[0].sin() * delta[0] * lambda[1];
        out[1] = 0.0;
    }

    fn so_jvp(&self, x: &[f64], delta: &[f64], v: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = x[0].sin() * delta[0] * v[0];
    }
}

/// `C(Q, P) = Q² + QP + P² + P⁴` at a single node.
#[derive(Debug, Clone)]
pub struct PendulumCost {
    nodes: [usize; 1],
}

impl PendulumCost {
    pub fn terminal(node: usize) -> Self {
        Self { nodes: [node] }
    }
}

impl CostAttachment for PendulumCost {
    fn obs_nodes(&self) -> &[usize] {
        &self.nodes
    }

    fn value(&self, _: usize, x: &[f64]) -> f64 {
        let (q, p) = (x[0], x[1]);
        q * q + q * p + p * p + p.powi(4)
    }

    fn grad(&self, _: usize, x: &[f64], out: &mut [f64]) {
        let (q, p) = (x[0], x[1]);
        out[0] = 2.0 * q + p;
        out[1] = q + 2.0 * p + 4.0 * p.powi(3);
    }

    fn hessvec(&self, _: usize, x: &[f64], v: &[f64], out: &mut [f64]) {
        let p = x[1];
        out[0] = 2.0 * v[0] + v[1];
        out[1] = v[0] + (2.0 + 12.0 * p * p) * v[1];
    }
}

pub fn pendulum(steps: usize) -> (Pendulum, PendulumCost) {
    (Pendulum, PendulumCost::terminal(steps))
}

/// `ψ_t = αψ + βψ_zz + κψ³` on `[0, 1]` with `ψ_z = 0` at both ends,
/// central differences on `d` points with the mirrored boundary stencil.
#[derive(Debug, Clone)]
pub struct AllenCahn {
    d: usize,
    alpha: f64,
    beta: f64,
    kappa: f64,
    /// `β / Δz²`
    diffusion: f64,
}

impl AllenCahn {
    pub fn new(d: usize, alpha: f64, beta: f64, kappa: f64) -> Result<Self> {
        if d < 3 {
            return Err(Error::InvalidArgument(format!(
                "Allen–Cahn needs d >= 3, got {d}"
            )));
        }
        let dz = 1.0 / (d - 1) as f64;
        Ok(Self {
            d,
            alpha,
            beta,
            kappa,
            diffusion: beta / (dz * dz),
        })
    }

    pub fn grid_spacing(&self) -> f64 {
        1.0 / (self.d - 1) as f64
    }

    pub fn coefficients(&self) -> (f64, f64, f64) {
        (self.alpha, self.beta, self.kappa)
    }

    /// Second-difference stencil with the doubled boundary rows.
    fn laplacian(&self, u: &[f64], out: &mut [f64]) {
        let d = self.d;
        out[0] = 2.0 * (u[1] - u[0]);
        for m in 1..d - 1 {
            out[m] = u[m + 1] - 2.0 * u[m] + u[m - 1];
        }
        out[d - 1] = 2.0 * (u[d - 2] - u[d - 1]);
    }

    fn laplacian_transpose(&self, w: &[f64], out: &mut [f64]) {
        let d = self.d;
        let upper = |i: usize| if i == 0 { 2.0 } else { 1.0 };
        let lower = |i: usize| if i == d - 1 { 2.0 } else { 1.0 };
        for j in 0..d {
            let mut acc = -2.0 * w[j];
            if j >= 1 {
                acc += upper(j - 1) * w[j - 1];
            }
            if j + 1 < d {
                acc += lower(j + 1) * w[j + 1];
            }
            out[j] = acc;
        }
    }
}

impl OdeSystem for AllenCahn {
    fn dim(&self) -> usize {
        self.d
    }

    fn rhs(&self, x: &[f64], out: &mut [f64]) {
        self.laplacian(x, out);
        for (o, &p) in out.iter_mut().zip(x) {
            *o = self.alpha * p + self.kappa * p * p * p + self.diffusion * *o;
        }
    }

    fn jvp(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        self.laplacian(v, out);
        for m in 0..self.d {
            let p = x[m];
            out[m] = (self.alpha + 3.0 * self.kappa * p * p) * v[m] + self.diffusion * out[m];
        }
    }

    fn vjp(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        self.laplacian_transpose(w, out);
        for m in 0..self.d {
            let p = x[m];
            out[m] = (self.alpha + 3.0 * self.kappa * p * p) * w[m] + self.diffusion * out[m];
        }
    }

    fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let d = self.d;
        let c = self.diffusion;
        let mut jac = DMatrix::zeros(d, d);
        for m in 0..d {
            jac[(m, m)] = self.alpha + 3.0 * self.kappa * x[m] * x[m] - 2.0 * c;
        }
        jac[(0, 1)] = 2.0 * c;
        jac[(d - 1, d - 2)] = 2.0 * c;
        for m in 1..d - 1 {
            jac[(m, m - 1)] = c;
            jac[(m, m + 1)] = c;
        }
        jac
    }
}

impl SecondOrderSystem for AllenCahn {
    fn so_vjp(&self, x: &[f64], delta: &[f64], lambda: &[f64], out: &mut [f64]) {
        for m in 0..self.d {
            out[m] = 6.0 * self.kappa * x[m] * delta[m] * lambda[m];
        }
    }

    fn so_jvp(&self, x: &[f64], delta: &[f64], v: &[f64], out: &mut [f64]) {
        self.so_vjp(x, delta, v, out)
    }
}

/// Allen–Cahn benchmark: system, terminal misfit against the trajectory
/// started from `θ̂`, and the grid data needed to build initial states.
#[derive(Debug, Clone)]
pub struct AllenCahnProblem {
    pub system: AllenCahn,
    pub cost: SquaredMisfit,
    pub tableau: ButcherTableau,
    pub h: f64,
    pub steps: usize,
    pub reference_initial: Vec<f64>,
}

/// `θ̂_m = cos(π (m-1) Δz)`.
pub fn allen_cahn_profile(d: usize, scale: f64) -> Vec<f64> {
    let dz = 1.0 / (d - 1) as f64;
    (0..d).map(|m| scale * (PI * m as f64 * dz).cos()).collect()
}

/// Builds the Allen–Cahn problem; the target `Ψ_N(θ̂)` is computed with
/// the same integrator settings, so the cost vanishes at `θ̂`.
pub fn allen_cahn(
    d: usize,
    alpha: f64,
    beta: f64,
    kappa: f64,
    reference_initial: Vec<f64>,
    h: f64,
    steps: usize,
) -> Result<AllenCahnProblem> {
    let system = AllenCahn::new(d, alpha, beta, kappa)?;
    if reference_initial.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: reference_initial.len(),
        });
    }
    let tableau = ButcherTableau::preset(Preset::ImplicitEuler);
    let target = integrate(&system, &tableau, &reference_initial, h, steps)?;
    let cost = SquaredMisfit::terminal(steps, target.last().to_vec());
    Ok(AllenCahnProblem {
        system,
        cost,
        tableau,
        h,
        steps,
        reference_initial,
    })
}

/// Periodic staggered-grid wave system on the augmented state `(U, V, W)`:
/// `U' = V`, `V' = D⁻(W D⁺U) / Δz²`, `W' = 0`. `W[k]` sits between
/// `U[k]` and `U[k+1 mod d]`.
#[derive(Debug, Clone)]
pub struct WaveSystem {
    d: usize,
    inv_dz2: f64,
}

impl WaveSystem {
    pub fn new(d: usize, dz: f64) -> Result<Self> {
        if d < 2 {
            return Err(Error::InvalidArgument(format!(
                "wave grid needs d >= 2, got {d}"
            )));
        }
        Ok(Self {
            d,
            inv_dz2: 1.0 / (dz * dz),
        })
    }

    pub fn grid_points(&self) -> usize {
        self.d
    }

    /// `out_k = (c_k (u_{k+1} - u_k) - c_{k-1} (u_k - u_{k-1})) / Δz²`, periodic.
    fn flux_divergence(&self, c: &[f64], u: &[f64], out: &mut [f64]) {
        let d = self.d;
        for k in 0..d {
            let next = (k + 1) % d;
            let prev = (k + d - 1) % d;
            out[k] = (c[k] * (u[next] - u[k]) - c[prev] * (u[k] - u[prev])) * self.inv_dz2;
        }
    }

    /// Gradient of `wᵀ flux_divergence(c, u)` with respect to `c`, accumulated.
    fn flux_coefficient_adjoint(&self, u: &[f64], w: &[f64], out: &mut [f64]) {
        let d = self.d;
        for k in 0..d {
            let next = (k + 1) % d;
            out[k] += (u[next] - u[k]) * (w[k] - w[next]) * self.inv_dz2;
        }
    }

    pub fn blocks<'a>(&self, x: &'a [f64]) -> (&'a [f64], &'a [f64], &'a [f64]) {
        let d = self.d;
        (&x[..d], &x[d..2 * d], &x[2 * d..])
    }
}

impl OdeSystem for WaveSystem {
    fn dim(&self) -> usize {
        3 * self.d
    }

    fn rhs(&self, x: &[f64], out: &mut [f64]) {
        let d = self.d;
        let (u, v, w) = self.blocks(x);
        out[..d].copy_from_slice(v);
        self.flux_divergence(w, u, &mut out[d..2 * d]);
        out[2 * d..].fill(0.0);
    }

    fn jvp(&self, x: &[f64], dx: &[f64], out: &mut [f64]) {
        let d = self.d;
        let (u, _, w) = self.blocks(x);
        let (du, dv, dw) = self.blocks(dx);
        out[..d].copy_from_slice(dv);
        let mut tmp = vec![0.0; d];
        self.flux_divergence(w, du, &mut out[d..2 * d]);
        self.flux_divergence(dw, u, &mut tmp);
        for (o, t) in out[d..2 * d].iter_mut().zip(&tmp) {
            *o += t;
        }
        out[2 * d..].fill(0.0);
    }

    fn vjp(&self, x: &[f64], lam: &[f64], out: &mut [f64]) {
        let d = self.d;
        let (u, _, w) = self.blocks(x);
        let (lu, lv, _) = self.blocks(lam);
        // the flux operator is symmetric in u for fixed coefficients
        self.flux_divergence(w, lv, &mut out[..d]);
        out[d..2 * d].copy_from_slice(lu);
        out[2 * d..].fill(0.0);
        self.flux_coefficient_adjoint(u, lv, &mut out[2 * d..]);
    }
}

impl SecondOrderSystem for WaveSystem {
    fn so_vjp(&self, _: &[f64], delta: &[f64], lam: &[f64], out: &mut [f64]) {
        let d = self.d;
        let (du, _, dw) = self.blocks(delta);
        let (_, lv, _) = self.blocks(lam);
        self.flux_divergence(dw, lv, &mut out[..d]);
        out[d..].fill(0.0);
        self.flux_coefficient_adjoint(du, lv, &mut out[2 * d..]);
    }

    fn so_jvp(&self, _: &[f64], delta: &[f64], v: &[f64], out: &mut [f64]) {
        let d = self.d;
        let (du, _, dw) = self.blocks(delta);
        let (vu, _, vw) = self.blocks(v);
        out.fill(0.0);
        let mut tmp = vec![0.0; d];
        self.flux_divergence(dw, vu, &mut out[d..2 * d]);
        self.flux_divergence(vw, du, &mut tmp);
        for (o, t) in out[d..2 * d].iter_mut().zip(&tmp) {
            *o += t;
        }
    }
}

/// Wave inversion benchmark. The control is the `W` block of the
/// augmented initial state; `U(0)` and `V(0)` are fixed.
#[derive(Debug, Clone)]
pub struct WaveProblem {
    pub system: WaveSystem,
    pub cost: SquaredMisfit,
    pub tableau: ButcherTableau,
    pub h: f64,
    pub steps: usize,
    pub length: f64,
    pub w_true: Vec<f64>,
    /// `(U(0), V(0), ·)` with the `W` block set to `w_true`.
    pub base_state: Vec<f64>,
}

impl WaveProblem {
    pub fn grid_points(&self) -> usize {
        self.system.grid_points()
    }

    /// Index range of the structure field inside the augmented state.
    pub fn control_block(&self) -> std::ops::Range<usize> {
        let d = self.grid_points();
        2 * d..3 * d
    }

    /// Augmented initial state with `W` replaced by `w`.
    pub fn initial_state(&self, w: &[f64]) -> Vec<f64> {
        let mut x0 = self.base_state.clone();
        x0[self.control_block()].copy_from_slice(w);
        x0
    }
}

/// `w(z) = 0.5 + 0.25 sin(4πz / L)`.
pub fn default_structure_field(length: f64) -> impl Fn(f64) -> f64 {
    move |z| 0.5 + 0.25 * (4.0 * PI * z / length).sin()
}

/// Converts observation times to node indices, requiring each to be an
/// integer multiple of `h` up to `1e-9` relative slack.
pub fn observation_nodes(times: &[f64], h: f64) -> Result<Vec<usize>> {
    let mut nodes = Vec::with_capacity(times.len());
    for &t in times {
        let ratio = t / h;
        let n = ratio.round();
        if n.is_nan() || n < 0.0 || (ratio - n).abs() > 1e-9 * ratio.abs().max(1.0) {
            return Err(Error::MisalignedObservation { time: t, h });
        }
        nodes.push(n as usize);
    }
    nodes.sort_unstable();
    nodes.dedup();
    Ok(nodes)
}

/// Builds the wave problem: `d` points on `[0, L)`, `U(0) = 16z²(L-z)²/L⁴`,
/// `V(0) = 0`, `W` sampled at the half-integer points, and observations of
/// `U` generated by Heun with the same `h` at `W = w_true`.
pub fn wave(
    length: f64,
    d: usize,
    w_true_fn: impl Fn(f64) -> f64,
    obs_times: &[f64],
    h: f64,
) -> Result<WaveProblem> {
    let dz = length / d as f64;
    let system = WaveSystem::new(d, dz)?;
    let nodes = observation_nodes(obs_times, h)?;
    let steps = nodes.last().copied().unwrap_or(0);

    let l4 = length.powi(4);
    let w_true: Vec<f64> = (0..d).map(|k| w_true_fn((k as f64 + 0.5) * dz)).collect();
    let mut base_state = vec![0.0; 3 * d];
    for k in 0..d {
        let z = k as f64 * dz;
        base_state[k] = 16.0 * z * z * (length - z).powi(2) / l4;
    }
    base_state[2 * d..].copy_from_slice(&w_true);

    let tableau = ButcherTableau::preset(Preset::Heun);
    let truth = integrate(&system, &tableau, &base_state, h, steps)?;
    let observations = nodes
        .iter()
        .map(|&n| (n, truth.node(n)[..d].to_vec()))
        .collect();
    let cost = SquaredMisfit::new(observations, 0..d)?;

    Ok(WaveProblem {
        system,
        cost,
        tableau,
        h,
        steps,
        length,
        w_true,
        base_state,
    })
}

/// Observation times `{0.2 j : 0 ≤ j ≤ 10}`.
pub fn default_observation_times() -> Vec<f64> {
    (0..=10).map(|j| 0.2 * j as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vecops::dot;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }

    /// Dot-product test of jvp/vjp and symmetry of the second derivative.
    fn check_consistency<S: SecondOrderSystem>(sys: &S, rng: &mut ChaCha8Rng, scale: f64) {
        let n = sys.dim();
        for _ in 0..100 {
            let x: Vec<f64> = random_vec(rng, n).iter().map(|v| v * scale).collect();
            let v = random_vec(rng, n);
            let w = random_vec(rng, n);
            let mut jv = vec![0.0; n];
            let mut jtw = vec![0.0; n];
            sys.jvp(&x, &v, &mut jv);
            sys.vjp(&x, &w, &mut jtw);
            let (a, b) = (dot(&w, &jv), dot(&jtw, &v));
            let mag = w.iter().zip(&jv).map(|(p, q)| (p * q).abs()).sum::<f64>();
            assert!(
                (a - b).abs() <= 1e-13 * mag.max(1e-300),
                "adjoint consistency {a} vs {b}"
            );

            let d1 = random_vec(rng, n);
            let d2 = random_vec(rng, n);
            let mut s1 = vec![0.0; n];
            let mut s2 = vec![0.0; n];
            sys.so_vjp(&x, &d1, &w, &mut s1);
            sys.so_vjp(&x, &d2, &w, &mut s2);
            let (a, b) = (dot(&s1, &d2), dot(&s2, &d1));
            let mag = s1.iter().zip(&d2).map(|(p, q)| (p * q).abs()).sum::<f64>();
            assert!(
                (a - b).abs() <= 1e-12 * mag.max(1e-300),
                "second-derivative symmetry {a} vs {b}"
            );

            // so_jvp is the forward counterpart of so_vjp
            let mut fwd = vec![0.0; n];
            sys.so_jvp(&x, &d1, &d2, &mut fwd);
            assert!(rel(dot(&fwd, &w), a) <= 1e-12 || (dot(&fwd, &w) - a).abs() <= 1e-12 * mag);
        }
    }

    #[test]
    fn pendulum_values() {
        let (sys, cost) = pendulum(5);
        let mut out = [1.0, 1.0];
        sys.rhs(&[0.0, 0.0], &mut out);
        assert_eq!(out, [0.0, 0.0]);
        assert_eq!(cost.value(5, &[1.0, 1.0]), 4.0);
        cost.grad(5, &[1.0, 1.0], &mut out);
        assert_eq!(out, [3.0, 7.0]);
        cost.hessvec(5, &[1.0, 1.0], &[1.0, 0.0], &mut out);
        assert_eq!(out, [2.0, 1.0]);
        cost.hessvec(5, &[1.0, 1.0], &[0.0, 1.0], &mut out);
        assert_eq!(out, [1.0, 14.0]);
    }

    #[test]
    fn pendulum_cost_gradient_matches_differences() {
        let cost = PendulumCost::terminal(0);
        let x = [0.3, -0.7];
        let mut g = [0.0; 2];
        cost.grad(0, &x, &mut g);
        for k in 0..2 {
            let eps = 1e-6;
            let mut xp = x;
            let mut xm = x;
            xp[k] += eps;
            xm[k] -= eps;
            let fd = (cost.value(0, &xp) - cost.value(0, &xm)) / (2.0 * eps);
            assert!(rel(fd, g[k]) <= 1e-6);
        }
    }

    #[test]
    fn derivative_actions_are_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        check_consistency(&Pendulum, &mut rng, 3.0);
        check_consistency(
            &AllenCahn::new(12, 10.0, 0.001, -1.0).unwrap(),
            &mut rng,
            1.5,
        );
        check_consistency(&WaveSystem::new(9, 1.0).unwrap(), &mut rng, 1.0);
    }

    #[test]
    fn allen_cahn_constant_state_has_no_diffusion() {
        let sys = AllenCahn::new(7, 10.0, 0.001, -1.0).unwrap();
        let c = 0.8;
        let mut out = vec![0.0; 7];
        sys.rhs(&[c; 7], &mut out);
        for o in out {
            assert!((o - (10.0 * c - c * c * c)).abs() < 1e-13);
        }
    }

    #[test]
    fn allen_cahn_jacobian_matches_jvp() {
        let sys = AllenCahn::new(6, 10.0, 0.001, -1.0).unwrap();
        let x = [0.1, -0.4, 0.9, 1.1, 0.0, -0.2];
        let dense = sys.jacobian(&x);
        let mut col = vec![0.0; 6];
        for j in 0..6 {
            let mut e = vec![0.0; 6];
            e[j] = 1.0;
            sys.jvp(&x, &e, &mut col);
            for i in 0..6 {
                assert!((dense[(i, j)] - col[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn allen_cahn_cost_vanishes_at_reference() {
        let p = allen_cahn(20, 10.0, 0.001, -1.0, allen_cahn_profile(20, 1.0), 0.001, 5).unwrap();
        let traj = integrate(&p.system, &p.tableau, &p.reference_initial, p.h, p.steps).unwrap();
        assert_eq!(p.cost.total(&traj).unwrap(), 0.0);
    }

    #[test]
    fn wave_constant_displacement_is_at_rest() {
        let sys = WaveSystem::new(8, 1.0).unwrap();
        let mut x = vec![0.0; 24];
        x[..8].fill(0.3);
        for (k, w) in x[16..].iter_mut().enumerate() {
            *w = 0.5 + 0.1 * k as f64;
        }
        let mut out = vec![1.0; 24];
        sys.rhs(&x, &mut out);
        assert!(out[8..16].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wave_momentum_flux_sums_to_zero() {
        let sys = WaveSystem::new(10, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x = random_vec(&mut rng, 30);
        x[20..].fill(0.7);
        let mut out = vec![0.0; 30];
        sys.rhs(&x, &mut out);
        assert!(out[10..20].iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn wave_cost_vanishes_at_truth() {
        let p = wave(
            64.0,
            64,
            default_structure_field(64.0),
            &default_observation_times(),
            0.2,
        )
        .unwrap();
        assert_eq!(p.steps, 10);
        assert_eq!(p.cost.obs_nodes(), &(0..=10).collect::<Vec<_>>()[..]);
        let traj = integrate(
            &p.system,
            &p.tableau,
            &p.initial_state(&p.w_true),
            p.h,
            p.steps,
        )
        .unwrap();
        assert_eq!(p.cost.total(&traj).unwrap(), 0.0);
    }

    #[test]
    fn misaligned_observations_are_rejected() {
        assert!(matches!(
            observation_nodes(&[0.0, 0.3], 0.2),
            Err(Error::MisalignedObservation { .. })
        ));
        assert_eq!(
            observation_nodes(&[0.0, 0.2, 0.4], 0.04).unwrap(),
            vec![0, 5, 10]
        );
    }
}
