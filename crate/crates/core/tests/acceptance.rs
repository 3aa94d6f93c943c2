//! Acceptance suite: one PASS/FAIL line per criterion. Runs as its own
//! harness so the lines are always printed; exits non-zero if any fails.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rkhess::adjoint::{sweep_first_order, sweep_second_order, SweepMode};
use rkhess::cost::CostAttachment;
use rkhess::expcli::{
    allen_cahn_outcome, loglog_slope, matching_digits, reference_values, run, wave_asymmetry_rows,
    wave_optimize_outcome, Experiment, ExperimentConfig,
};
use rkhess::krylov::{cond_inf, degree_of_asymmetry, norm_max, perturbation_bound};
use rkhess::ode::{integrate_coupled, SecondOrderSystem};
use rkhess::problems::{
    allen_cahn, allen_cahn_profile, default_observation_times, default_structure_field, pendulum,
    wave,
};
use rkhess::sensitivity::{
    assemble_hessian, fd_directional_derivative, fd_gradient_oracle, fd_hvp_oracle, gradient,
    make_hvp_operator, Model,
};
use rkhess::tableau::{adjoint_partner, partner_residual, ButcherTableau, Preset};
use rkhess::vecops::{dot, norm_inf};

struct Criterion {
    checks: Vec<(String, bool)>,
}

impl Criterion {
    fn new() -> Self {
        Self { checks: Vec::new() }
    }

    fn check(&mut self, label: impl Into<String>, ok: bool) {
        self.checks.push((label.into(), ok));
    }

    fn passed(&self) -> bool {
        self.checks.iter().all(|(_, ok)| *ok)
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn within(v: f64, lo: f64, hi: f64) -> bool {
    v >= lo && v <= hi
}

fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
}

/// A benchmark problem reduced to what the generic checks need.
struct Case<'a, S: ?Sized, C: ?Sized> {
    name: &'static str,
    model: Model<'a, S, C>,
    theta: Vec<f64>,
}

fn pendulum_hessians() -> Criterion {
    let mut c = Criterion::new();
    let reference = &reference_values().pendulum;
    let (sys, cost) = pendulum(5);
    let t = ButcherTableau::preset(Preset::ExplicitEuler);
    let model = Model::new(&sys, &cost, &t, 0.01, 5);
    let h = assemble_hessian(&make_hvp_operator(model, &[1.0, 1.0], SweepMode::Exact).unwrap())
        .unwrap();
    let worst = (0..4)
        .map(|k| matching_digits(h[(k / 2, k % 2)], reference.exact[k / 2][k % 2]))
        .min()
        .unwrap();
    c.check(format!("min matching digits {worst} >= 13"), worst >= 13);
    let tau = degree_of_asymmetry(&h).unwrap();
    c.check(format!("asymmetry {tau:.2e} <= 1e-15"), tau <= 1e-15);
    c
}

fn pendulum_naive() -> Criterion {
    let mut c = Criterion::new();
    let reference = &reference_values().pendulum;
    let (sys, cost) = pendulum(5);
    let t = ButcherTableau::preset(Preset::ExplicitEuler);
    let model = Model::new(&sys, &cost, &t, 0.01, 5);
    let h = assemble_hessian(&make_hvp_operator(model, &[1.0, 1.0], SweepMode::Naive).unwrap())
        .unwrap();
    let worst = (0..4)
        .map(|k| matching_digits(h[(k / 2, k % 2)], reference.naive[k / 2][k % 2]))
        .min()
        .unwrap();
    c.check(format!("min matching digits {worst} >= 12"), worst >= 12);
    c
}

fn partner_identity() -> Criterion {
    let mut c = Criterion::new();
    for preset in Preset::ALL {
        let t = ButcherTableau::preset(preset);
        let r = partner_residual(&t, &adjoint_partner(&t).unwrap());
        c.check(format!("{preset} residual {r:.1e} <= 1e-15"), r <= 1e-15);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let s = rng.gen_range(1..=6);
        let a: Vec<Vec<f64>> = (0..s)
            .map(|i| {
                (0..s)
                    .map(|j| if j < i { rng.gen_range(-2.0..2.0) } else { 0.0 })
                    .collect()
            })
            .collect();
        let b: Vec<f64> = (0..s)
            .map(|_| rng.gen_range(0.05..2.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
            .collect();
        let t = ButcherTableau::explicit("random", &a, &b).unwrap();
        let at = adjoint_partner(&t).unwrap();
        let mut largest = 1.0_f64;
        for i in 0..s {
            for j in 0..s {
                let (bi, bj) = (t.weights()[i], at.weights()[j]);
                largest = largest
                    .max((bi * at.a(i, j)).abs())
                    .max((bj * t.a(j, i)).abs())
                    .max((bi * bj).abs());
            }
        }
        worst = worst.max(partner_residual(&t, &at) / largest);
    }
    c.check(
        format!("100 random tableaus: residual / largest term {worst:.1e} <= 1e-15"),
        worst <= 1e-15,
    );
    c
}

fn gradient_checks<S, C>(
    c: &mut Criterion,
    case: &Case<'_, S, C>,
    eps: &[f64],
    rng: &mut ChaCha8Rng,
) where
    S: SecondOrderSystem + ?Sized,
    C: CostAttachment + ?Sized,
{
    let model = case.model;
    let d = model.dim();
    let at = adjoint_partner(model.tableau).unwrap();
    let mut pairing = 0.0_f64;
    for _ in 0..20 {
        let gamma = random_vec(rng, d);
        let ctraj = integrate_coupled(
            model.system,
            model.tableau,
            &case.theta,
            &gamma,
            model.h,
            model.steps,
        )
        .unwrap();
        let lambda0 = sweep_first_order(model.system, ctraj.state(), &at, model.cost)
            .unwrap()
            .lambda0;
        let mut rhs = 0.0;
        let mut g = vec![0.0; d];
        for &n in model.cost.obs_nodes() {
            model.cost.grad(n, ctraj.state().node(n), &mut g);
            rhs += dot(&g, ctraj.tangent(n));
        }
        pairing = pairing.max(rel(dot(&lambda0, &gamma), rhs));
    }
    c.check(
        format!("{}: pairing {pairing:.1e} <= 1e-12", case.name),
        pairing <= 1e-12,
    );

    let grad = gradient(model, &case.theta).unwrap().grad;
    let fd = fd_gradient_oracle(model, &case.theta, 1e-6).unwrap();
    let fd_rel = max_diff(&fd, &grad) / norm_inf(&grad);
    c.check(
        format!("{}: FD gradient {fd_rel:.1e} <= 1e-6", case.name),
        fd_rel <= 1e-6,
    );

    let gamma = random_vec(rng, d);
    let exact = dot(&grad, &gamma);
    let points: Vec<(f64, f64)> = eps
        .iter()
        .map(|&e| {
            (
                e,
                (fd_directional_derivative(model, &case.theta, &gamma, e).unwrap() - exact).abs(),
            )
        })
        .collect();
    let slope = loglog_slope(&points).unwrap();
    c.check(
        format!("{}: FD slope {slope:.3} in [1.8, 2.2]", case.name),
        within(slope, 1.8, 2.2),
    );
}

fn hvp_checks<S, C>(c: &mut Criterion, case: &Case<'_, S, C>, rng: &mut ChaCha8Rng)
where
    S: SecondOrderSystem + ?Sized,
    C: CostAttachment + ?Sized,
{
    let model = case.model;
    let d = model.dim();
    let op = make_hvp_operator(model, &case.theta, SweepMode::Exact).unwrap();
    let mut sym = 0.0_f64;
    let mut oracle = 0.0_f64;
    for _ in 0..3 {
        let g1 = random_vec(rng, d);
        let g2 = random_vec(rng, d);
        let h1 = op.apply(&g1).unwrap();
        let h2 = op.apply(&g2).unwrap();
        sym = sym.max(rel(dot(&g2, &h1), dot(&g1, &h2)));
        let fd = fd_hvp_oracle(model, &case.theta, &g1, 1e-5).unwrap();
        oracle = oracle.max(max_diff(&fd, &h1) / norm_inf(&h1));
    }
    c.check(
        format!("{}: symmetry {sym:.1e} <= 1e-12", case.name),
        sym <= 1e-12,
    );
    c.check(
        format!("{}: FD HVP {oracle:.1e} <= 1e-5", case.name),
        oracle <= 1e-5,
    );
}

fn wave_case_problem() -> rkhess::problems::WaveProblem {
    wave(
        64.0,
        64,
        default_structure_field(64.0),
        &default_observation_times(),
        0.2,
    )
    .unwrap()
}

fn allen_cahn_problem() -> rkhess::problems::AllenCahnProblem {
    allen_cahn(
        150,
        10.0,
        0.001,
        -1.0,
        allen_cahn_profile(150, 1.0),
        0.001,
        20,
    )
    .unwrap()
}

fn gradient_exactness() -> Criterion {
    let mut c = Criterion::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);

    let (sys, cost) = pendulum(5);
    let t = ButcherTableau::preset(Preset::ExplicitEuler);
    let case = Case {
        name: "pendulum",
        model: Model::new(&sys, &cost, &t, 0.01, 5),
        theta: vec![1.0, 1.0],
    };
    gradient_checks(&mut c, &case, &[1e-2, 5e-3, 2.5e-3, 1.25e-3], &mut rng);

    let ac = allen_cahn_problem();
    let case = Case {
        name: "allen-cahn",
        model: Model::new(&ac.system, &ac.cost, &ac.tableau, ac.h, ac.steps),
        theta: allen_cahn_profile(150, 1.05),
    };
    gradient_checks(&mut c, &case, &[1e-1, 5e-2, 2.5e-2, 1.25e-2], &mut rng);

    let wv = wave_case_problem();
    let case = Case {
        name: "wave",
        model: Model::new(&wv.system, &wv.cost, &wv.tableau, wv.h, wv.steps),
        theta: wv.initial_state(&vec![0.5; 64]),
    };
    gradient_checks(&mut c, &case, &[1e-1, 5e-2, 2.5e-2, 1.25e-2], &mut rng);
    c
}

fn hvp_symmetry_and_oracle() -> Criterion {
    let mut c = Criterion::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    let (sys, cost) = pendulum(5);
    let t = ButcherTableau::preset(Preset::ExplicitEuler);
    let case = Case {
        name: "pendulum",
        model: Model::new(&sys, &cost, &t, 0.01, 5),
        theta: vec![1.0, 1.0],
    };
    hvp_checks(&mut c, &case, &mut rng);

    let ac = allen_cahn_problem();
    let case = Case {
        name: "allen-cahn",
        model: Model::new(&ac.system, &ac.cost, &ac.tableau, ac.h, ac.steps),
        theta: allen_cahn_profile(150, 1.05),
    };
    hvp_checks(&mut c, &case, &mut rng);

    let wv = wave_case_problem();
    let case = Case {
        name: "wave",
        model: Model::new(&wv.system, &wv.cost, &wv.tableau, wv.h, wv.steps),
        theta: wv.initial_state(&vec![0.5; 64]),
    };
    hvp_checks(&mut c, &case, &mut rng);
    c
}

fn allen_cahn_diagnostics(outcome: &rkhess::expcli::AllenCahnOutcome) -> Criterion {
    let mut c = Criterion::new();
    let h = outcome.exact.as_ref().unwrap();
    let hn = outcome.naive.as_ref().unwrap();
    let tau = degree_of_asymmetry(h).unwrap();
    let bound = 1e-14 * norm_max(h).max(1.0);
    c.check(format!("tau(H) {tau:.2e} <= {bound:.2e}"), tau <= bound);
    let tau_n = degree_of_asymmetry(hn).unwrap();
    c.check(
        format!("tau(H~) {tau_n:.3e} in [2.1e-5, 2.6e-5]"),
        within(tau_n, 2.1e-5, 2.6e-5),
    );
    let diff = norm_max(&(h - hn));
    c.check(
        format!("|H - H~|_max {diff:.3e} in [3.8e-5, 4.7e-5]"),
        within(diff, 3.8e-5, 4.7e-5),
    );
    let cond_n = cond_inf(hn).unwrap();
    c.check(
        format!("cond(H~) {cond_n:.3e} in [2.7e5, 3.3e5]"),
        within(cond_n, 2.7e5, 3.3e5),
    );
    let cond = cond_inf(h).unwrap();
    c.check(
        format!("cond(H) {cond:.3e} in [2.4e5, 3.0e5]"),
        within(cond, 2.4e5, 3.0e5),
    );
    let pb = perturbation_bound(h, hn).unwrap();
    c.check(
        format!("perturbation bound {pb:.3e} in [4.2e4, 5.6e4]"),
        within(pb, 4.2e4, 5.6e4),
    );
    c
}

fn allen_cahn_cr(outcome: &rkhess::expcli::AllenCahnOutcome) -> Criterion {
    let mut c = Criterion::new();
    let exact = outcome.cr_exact.as_ref().unwrap();
    let naive = outcome.cr_naive.as_ref().unwrap();
    c.check(
        format!(
            "exact CR converged in {} iterations (39 +- 3)",
            exact.iterations
        ),
        exact.converged && exact.iterations.abs_diff(39) <= 3,
    );
    let monotone = exact.residual_history.windows(2).all(|w| w[1] <= w[0]);
    c.check(format!("exact residual monotone: {monotone}"), monotone);
    let err = *exact.error_history.as_ref().unwrap().last().unwrap();
    c.check(format!("exact final error {err:.2e} <= 1e-7"), err <= 1e-7);
    c.check(
        format!("naive CR converged ({} iterations)", naive.iterations),
        naive.converged,
    );
    let plateau = *naive.error_history.as_ref().unwrap().last().unwrap();
    c.check(
        format!("naive error plateau {plateau:.4e} in [0.245, 0.272]"),
        within(plateau, 0.245, 0.272),
    );
    c
}

fn wave_asymmetry() -> Criterion {
    let mut c = Criterion::new();
    let rows = wave_asymmetry_rows(&ExperimentConfig::new(Experiment::WaveAsymmetry)).unwrap();
    let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.h, r.tau_naive.unwrap())).collect();
    let slope = loglog_slope(&points).unwrap();
    c.check(
        format!("slope {slope:.4} in [1.9, 2.1]"),
        within(slope, 1.9, 2.1),
    );
    let worst = rows
        .iter()
        .map(|r| r.tau_exact.unwrap())
        .fold(0.0, f64::max);
    c.check(format!("max tau(H) {worst:.2e} <= 1e-13"), worst <= 1e-13);
    for (h, reference) in [(0.2, 3.054165e-5), (0.01, 7.551447e-8)] {
        let tau = rows.iter().find(|r| r.h == h).unwrap().tau_naive.unwrap();
        c.check(
            format!("h = {h}: tau(H~) {tau:.4e} within 10% of {reference:.4e}"),
            rel(tau, reference) <= 0.1,
        );
    }
    c
}

fn wave_optimization() -> Criterion {
    let mut c = Criterion::new();
    let outcome = wave_optimize_outcome(&ExperimentConfig::new(Experiment::WaveOptimize)).unwrap();
    for (mode, state) in &outcome.runs {
        c.check(
            format!("{mode:?}: final cost {:.2e} <= 1e-12", state.cost),
            state.cost <= 1e-12,
        );
        let err = max_diff(&state.w, &outcome.w_true);
        c.check(
            format!("{mode:?}: |W - w_true| {err:.2e} <= 1e-6"),
            err <= 1e-6,
        );
    }
    let exact = outcome.runs[0].1.backward_evals as f64;
    let naive = outcome.runs[1].1.backward_evals as f64;
    c.check(
        format!(
            "backward evaluation ratio {:.3} >= 1.6 ({naive} / {exact})",
            naive / exact
        ),
        naive / exact >= 1.6,
    );
    c
}

fn conservation<S, C>(c: &mut Criterion, case: &Case<'_, S, C>, gamma: &[f64])
where
    S: SecondOrderSystem + ?Sized,
    C: CostAttachment + ?Sized,
{
    let model = case.model;
    let at = adjoint_partner(model.tableau).unwrap();
    let ctraj = integrate_coupled(
        model.system,
        model.tableau,
        &case.theta,
        gamma,
        model.h,
        model.steps,
    )
    .unwrap();
    let first = sweep_first_order(model.system, ctraj.state(), &at, model.cost).unwrap();
    let second = sweep_second_order(model.system, &ctraj, &at, model.cost, None).unwrap();
    let lambda = second.lambda.unwrap();
    let reference = dot(lambda.node(model.steps), ctraj.tangent(model.steps));
    let drift = (0..=model.steps)
        .map(|n| rel(dot(lambda.node(n), ctraj.tangent(n)), reference))
        .fold(0.0, f64::max);
    c.check(
        format!("{}: bilinear drift {drift:.1e} <= 1e-12", case.name),
        drift <= 1e-12,
    );
    let agree = max_diff(&first.lambda0, &second.lambda0);
    c.check(
        format!("{}: lambda_0 agreement {agree:.1e} <= 1e-14", case.name),
        agree <= 1e-14,
    );
}

fn invariants() -> Criterion {
    let mut c = Criterion::new();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (sys, cost) = pendulum(40);
    for preset in Preset::ALL {
        let t = ButcherTableau::preset(preset);
        let case = Case {
            name: preset.name(),
            model: Model::new(&sys, &cost, &t, 0.05, 40),
            theta: vec![1.0, 1.0],
        };
        let gamma = random_vec(&mut rng, 2);
        conservation(&mut c, &case, &gamma);
    }
    let ac = allen_cahn_problem();
    let case = Case {
        name: "allen-cahn",
        model: Model::new(&ac.system, &ac.cost, &ac.tableau, ac.h, ac.steps),
        theta: allen_cahn_profile(150, 1.05),
    };
    let gamma = random_vec(&mut rng, 150);
    conservation(&mut c, &case, &gamma);

    for experiment in [Experiment::Pendulum, Experiment::AllenCahn] {
        let config = ExperimentConfig::new(experiment);
        let a = run(&config).unwrap().csv.render();
        let b = run(&config).unwrap().csv.render();
        c.check(
            format!("{}: repeated run byte-identical", experiment.name()),
            a == b,
        );
    }
    let mut config = ExperimentConfig::new(Experiment::WaveAsymmetry);
    config.h = Some(0.2);
    let a = run(&config).unwrap().csv.render();
    let b = run(&config).unwrap().csv.render();
    c.check("wave-asymmetry: repeated run byte-identical", a == b);
    c
}

fn main() {
    let mut failed = Vec::new();
    let mut report = |id: usize, title: &str, f: &dyn Fn() -> Criterion| {
        let start = Instant::now();
        let crit = f();
        let status = if crit.passed() { "PASS" } else { "FAIL" };
        println!(
            "criterion {id:>2} {status}  {title}  ({:.1}s)",
            start.elapsed().as_secs_f64()
        );
        for (label, ok) in &crit.checks {
            println!("      [{}] {label}", if *ok { "ok" } else { "x" });
        }
        if !crit.passed() {
            failed.push(id);
        }
    };

    report(1, "pendulum exact Hessian", &pendulum_hessians);
    report(2, "pendulum naive Hessian", &pendulum_naive);
    report(3, "partner tableau identity", &partner_identity);
    report(4, "gradient exactness", &gradient_exactness);
    report(5, "HVP symmetry and FD oracle", &hvp_symmetry_and_oracle);
    let outcome = allen_cahn_outcome(&ExperimentConfig::new(Experiment::AllenCahn)).unwrap();
    report(6, "Allen-Cahn Hessian diagnostics", &|| {
        allen_cahn_diagnostics(&outcome)
    });
    report(7, "Allen-Cahn conjugate residual", &|| {
        allen_cahn_cr(&outcome)
    });
    report(8, "wave asymmetry scaling", &wave_asymmetry);
    report(9, "wave optimization", &wave_optimization);
    report(10, "invariant suite", &invariants);

    if failed.is_empty() {
        println!("acceptance: all 10 criteria pass");
    } else {
        println!(
            "acceptance: {} of 10 criteria fail: {failed:?}",
            failed.len()
        );
        std::process::exit(1);
    }
}
