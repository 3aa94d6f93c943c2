//! Experiment runner behind the `rkhess` binary: JSON configs in,
//! deterministic CSV tables and text summaries out.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;
use std::sync::OnceLock;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::adjoint::SweepMode;
use crate::cost::CostAttachment;
use crate::error::Error;
use crate::krylov::{
    cond_inf, conjugate_residual, degree_of_asymmetry, norm_inf_operator, norm_max,
    perturbation_bound, KrylovOptions, KrylovResult,
};
use crate::lmrn::{lmrn_minimize, LmrnOptions, LmrnState};
use crate::ode::SecondOrderSystem;
use crate::problems::{
    allen_cahn, allen_cahn_profile, default_observation_times, default_structure_field, pendulum,
    wave,
};
use crate::sensitivity::{assemble_hessian, make_hvp_operator, Model};
use crate::tableau::{ButcherTableau, Preset};
use crate::vecops::{norm_inf, unit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Pendulum,
    AllenCahn,
    WaveAsymmetry,
    WaveOptimize,
}

impl Experiment {
    pub const ALL: [Experiment; 4] = [
        Experiment::Pendulum,
        Experiment::AllenCahn,
        Experiment::WaveAsymmetry,
        Experiment::WaveOptimize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Pendulum => "pendulum",
            Experiment::AllenCahn => "allen-cahn",
            Experiment::WaveAsymmetry => "wave-asymmetry",
            Experiment::WaveOptimize => "wave-optimize",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeSelection {
    Exact,
    Naive,
    Both,
}

impl ModeSelection {
    fn modes(self) -> Vec<SweepMode> {
        match self {
            ModeSelection::Exact => vec![SweepMode::Exact],
            ModeSelection::Naive => vec![SweepMode::Naive],
            ModeSelection::Both => vec![SweepMode::Exact, SweepMode::Naive],
        }
    }
}

/// Everything an experiment can be told. Unset fields take the defaults of
/// the corresponding experiment; fields that do not apply are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<ModeSelection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    /// Pendulum evaluation point `(Q(0), P(0))`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_points: Option<usize>,
    /// Allen–Cahn `(α, β, κ)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coefficients: Option<[f64; 3]>,
    /// Allen–Cahn evaluation point as a multiple of the reference profile.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length: Option<f64>,
    /// Step sizes swept by the wave asymmetry run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_values: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obs_times: Option<Vec<f64>>,
    /// Constant initial structure field of the wave optimization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cr_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cr_max_iter: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

impl ExperimentConfig {
    pub fn new(experiment: Experiment) -> Self {
        Self {
            experiment,
            mode: None,
            h: None,
            steps: None,
            theta: None,
            grid_points: None,
            coefficients: None,
            scale: None,
            length: None,
            h_values: None,
            obs_times: None,
            w0: None,
            cr_tol: None,
            cr_max_iter: None,
            grad_tol: None,
            max_iter: None,
            output: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ExpError> {
        serde_json::from_str(text).map_err(|e| ExpError::Config(format!("malformed config: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, ExpError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExpError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    fn mode_selection(&self) -> ModeSelection {
        self.mode.unwrap_or(ModeSelection::Both)
    }

    fn reject(&self, fields: &[(&str, bool)]) -> Result<(), ExpError> {
        for (name, set) in fields {
            if *set {
                return Err(ExpError::Config(format!(
                    "`{name}` does not apply to the {} experiment",
                    self.experiment.name()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExpError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(Error),
    #[error("convergence failure: {0}")]
    Convergence(String),
}

impl ExpError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ExpError::Config(_) => 2,
            ExpError::Numeric(_) => 3,
            ExpError::Convergence(_) => 4,
        }
    }
}

impl From<Error> for ExpError {
    fn from(e: Error) -> Self {
        match e {
            Error::MisalignedObservation { .. } | Error::InvalidArgument(_) => {
                ExpError::Config(e.to_string())
            }
            Error::NotConverged(msg) => ExpError::Convergence(msg),
            other => ExpError::Numeric(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Real(f64),
    Text(String),
    Empty,
}

impl Cell {
    fn render(&self, out: &mut String) {
        match self {
            Cell::Int(v) => write!(out, "{v}").unwrap(),
            Cell::Real(v) => write!(out, "{v:.16e}").unwrap(),
            Cell::Text(s) => out.push_str(s),
            Cell::Empty => {}
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Real(v)
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Empty, Cell::Real)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

/// Comma-separated table; reals are printed with 17 significant digits.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvReport {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl CsvReport {
    fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            for (k, cell) in row.iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                cell.render(&mut out);
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Report {
    pub experiment: Experiment,
    pub csv: CsvReport,
    pub summary: Vec<String>,
}

#[derive(Debug, Deserialize)]
pub struct PendulumReference {
    pub exact: [[f64; 2]; 2],
    pub naive: [[f64; 2]; 2],
}

#[derive(Debug, Deserialize)]
pub struct AllenCahnReference {
    pub tau_exact: f64,
    pub tau_naive: f64,
    pub diff_max: f64,
    pub diff_inf: f64,
    pub cond_exact: f64,
    pub cond_naive: f64,
    pub perturbation_bound: f64,
    pub cr_iterations_exact: usize,
    pub cr_error_plateau_naive: f64,
}

#[derive(Debug, Deserialize)]
pub struct WaveAsymmetryReference {
    pub h: Vec<f64>,
    pub tau_exact: Vec<f64>,
    pub tau_naive: Vec<f64>,
}

#[derive(Debug, Deserialize)]
pub struct WaveOptimizeReference {
    pub initial_cost: f64,
    pub final_cost_exact: f64,
    pub final_cost_naive: f64,
    pub backward_evals_exact: usize,
    pub backward_evals_naive: usize,
}

/// Published values the summaries are compared against.
#[derive(Debug, Deserialize)]
pub struct ReferenceValues {
    pub pendulum: PendulumReference,
    pub allen_cahn: AllenCahnReference,
    pub wave_asymmetry: WaveAsymmetryReference,
    pub wave_optimize: WaveOptimizeReference,
}

pub fn reference_values() -> &'static ReferenceValues {
    static REF: OnceLock<ReferenceValues> = OnceLock::new();
    REF.get_or_init(|| {
        serde_json::from_str(include_str!("../data/reference.json"))
            .expect("bundled reference values parse")
    })
}

/// Number of leading significant digits on which `value` agrees with
/// `reference`, capped at 17.
pub fn matching_digits(value: f64, reference: f64) -> u32 {
    if value == reference {
        return 17;
    }
    let rel = (value - reference).abs() / reference.abs();
    if !rel.is_finite() || rel >= 1.0 {
        return 0;
    }
    (-rel.log10()).floor().clamp(0.0, 17.0) as u32
}

fn positive(name: &str, v: f64) -> Result<f64, ExpError> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(ExpError::Config(format!(
            "`{name}` must be positive, got {v}"
        )))
    }
}

fn nonzero(name: &str, v: usize) -> Result<usize, ExpError> {
    if v == 0 {
        Err(ExpError::Config(format!("`{name}` must be at least 1")))
    } else {
        Ok(v)
    }
}

fn mode_name(mode: SweepMode) -> &'static str {
    match mode {
        SweepMode::Exact => "exact",
        SweepMode::Naive => "naive",
    }
}

fn hessian<S, C>(
    model: Model<'_, S, C>,
    theta: &[f64],
    mode: SweepMode,
    block: Option<Range<usize>>,
) -> Result<DMatrix<f64>, Error>
where
    S: SecondOrderSystem + ?Sized,
    C: CostAttachment + ?Sized,
{
    let op = make_hvp_operator(model, theta, mode)?;
    match block {
        Some(b) => assemble_hessian(&op.restrict_to(b)?),
        None => assemble_hessian(&op),
    }
}

pub fn run(config: &ExperimentConfig) -> Result<Report, ExpError> {
    match config.experiment {
        Experiment::Pendulum => run_pendulum(config),
        Experiment::AllenCahn => run_allen_cahn(config),
        Experiment::WaveAsymmetry => run_wave_asymmetry(config),
        Experiment::WaveOptimize => run_wave_optimize(config),
    }
}

pub fn run_pendulum(config: &ExperimentConfig) -> Result<Report, ExpError> {
    config.reject(&[
        ("grid_points", config.grid_points.is_some()),
        ("coefficients", config.coefficients.is_some()),
        ("scale", config.scale.is_some()),
        ("length", config.length.is_some()),
        ("h_values", config.h_values.is_some()),
        ("obs_times", config.obs_times.is_some()),
        ("w0", config.w0.is_some()),
        ("cr_tol", config.cr_tol.is_some()),
        ("cr_max_iter", config.cr_max_iter.is_some()),
        ("grad_tol", config.grad_tol.is_some()),
        ("max_iter", config.max_iter.is_some()),
    ])?;
    let h = positive("h", config.h.unwrap_or(0.01))?;
    let steps = nonzero("steps", config.steps.unwrap_or(5))?;
    let theta = config.theta.clone().unwrap_or_else(|| vec![1.0, 1.0]);
    if theta.len() != 2 || !theta.iter().all(|v| v.is_finite()) {
        return Err(ExpError::Config(
            "`theta` must hold two finite numbers".into(),
        ));
    }
    let selection = config.mode_selection();
    let comparable = h == 0.01 && steps == 5 && theta == [1.0, 1.0];
    let reference = &reference_values().pendulum;

    let (sys, cost) = pendulum(steps);
    let tableau = ButcherTableau::preset(Preset::ExplicitEuler);
    let model = Model::new(&sys, &cost, &tableau, h, steps);

    let mut csv = CsvReport::new(&[
        "mode",
        "row",
        "col",
        "value",
        "reference",
        "matching_digits",
    ]);
    let mut summary = vec![format!(
        "pendulum: explicit Euler, h = {h}, N = {steps}, theta = ({}, {})",
        theta[0], theta[1]
    )];
    for mode in selection.modes() {
        let m = hessian(model, &theta, mode, None)?;
        let table = match mode {
            SweepMode::Exact => &reference.exact,
            SweepMode::Naive => &reference.naive,
        };
        for i in 0..2 {
            for j in 0..2 {
                let v = m[(i, j)];
                let (r, digits) = if comparable {
                    let r = table[i][j];
                    (Cell::Real(r), Cell::Int(matching_digits(v, r) as i64))
                } else {
                    (Cell::Empty, Cell::Empty)
                };
                if comparable {
                    summary.push(format!(
                        "{} H[{},{}] = {v:.16e}  reference {:.15e}  digits {}",
                        mode_name(mode),
                        i + 1,
                        j + 1,
                        table[i][j],
                        matching_digits(v, table[i][j])
                    ));
                } else {
                    summary.push(format!(
                        "{} H[{},{}] = {v:.16e}",
                        mode_name(mode),
                        i + 1,
                        j + 1
                    ));
                }
                csv.push(vec![
                    mode_name(mode).into(),
                    (i + 1).into(),
                    (j + 1).into(),
                    v.into(),
                    r,
                    digits,
                ]);
            }
        }
        summary.push(format!(
            "{} asymmetry = {:.3e}",
            mode_name(mode),
            degree_of_asymmetry(&m)?
        ));
    }
    Ok(Report {
        experiment: Experiment::Pendulum,
        csv,
        summary,
    })
}

/// Dense diagnostics of the Allen–Cahn Hessians, as computed by
/// [`run_allen_cahn`].
#[derive(Debug, Clone)]
pub struct AllenCahnOutcome {
    pub exact: Option<DMatrix<f64>>,
    pub naive: Option<DMatrix<f64>>,
    pub cr_exact: Option<KrylovResult>,
    pub cr_naive: Option<KrylovResult>,
}

/// Assembles the requested Allen–Cahn Hessians and runs CR on
/// `H v = H e₁` with each of them.
pub fn allen_cahn_outcome(config: &ExperimentConfig) -> Result<AllenCahnOutcome, ExpError> {
    config.reject(&[
        ("theta", config.theta.is_some()),
        ("length", config.length.is_some()),
        ("h_values", config.h_values.is_some()),
        ("obs_times", config.obs_times.is_some()),
        ("w0", config.w0.is_some()),
        ("grad_tol", config.grad_tol.is_some()),
        ("max_iter", config.max_iter.is_some()),
    ])?;
    let d = config.grid_points.unwrap_or(150);
    if d < 3 {
        return Err(ExpError::Config("`grid_points` must be at least 3".into()));
    }
    let [alpha, beta, kappa] = config.coefficients.unwrap_or([10.0, 0.001, -1.0]);
    let h = positive("h", config.h.unwrap_or(0.001))?;
    let steps = nonzero("steps", config.steps.unwrap_or(20))?;
    let scale = config.scale.unwrap_or(1.05);
    let cr = KrylovOptions {
        tol: positive("cr_tol", config.cr_tol.unwrap_or(1e-8))?,
        max_iter: nonzero("cr_max_iter", config.cr_max_iter.unwrap_or(10 * d))?,
    };
    let selection = config.mode_selection();

    let problem = allen_cahn(d, alpha, beta, kappa, allen_cahn_profile(d, 1.0), h, steps)?;
    let model = Model::new(
        &problem.system,
        &problem.cost,
        &problem.tableau,
        problem.h,
        problem.steps,
    );
    let theta = allen_cahn_profile(d, scale);
    let e1 = unit(d, 0);
    let rhs = make_hvp_operator(model, &theta, SweepMode::Exact)?.apply(&e1)?;

    let mut outcome = AllenCahnOutcome {
        exact: None,
        naive: None,
        cr_exact: None,
        cr_naive: None,
    };
    for mode in selection.modes() {
        let m = hessian(model, &theta, mode, None)?;
        let solve = conjugate_residual(&m, &rhs, &cr, Some(&e1))?;
        match mode {
            SweepMode::Exact => {
                outcome.exact = Some(m);
                outcome.cr_exact = Some(solve);
            }
            SweepMode::Naive => {
                outcome.naive = Some(m);
                outcome.cr_naive = Some(solve);
            }
        }
    }
    Ok(outcome)
}

pub fn run_allen_cahn(config: &ExperimentConfig) -> Result<Report, ExpError> {
    let outcome = allen_cahn_outcome(config)?;
    let comparable = config.grid_points.is_none()
        && config.coefficients.is_none()
        && config.h.is_none()
        && config.steps.is_none()
        && config.scale.is_none();
    let reference = &reference_values().allen_cahn;
    let cmp = |v: f64, r: f64| {
        if comparable {
            format!("{v:.4e}  (reference {r:.4e})")
        } else {
            format!("{v:.4e}")
        }
    };

    let mut summary = vec!["allen-cahn: implicit Euler, CR on H v = H e1".to_string()];
    let histories = [
        (SweepMode::Exact, &outcome.exact, &outcome.cr_exact),
        (SweepMode::Naive, &outcome.naive, &outcome.cr_naive),
    ];
    for (mode, matrix, solve) in histories {
        let (Some(m), Some(solve)) = (matrix, solve) else {
            continue;
        };
        let (tau_ref, cond_ref) = match mode {
            SweepMode::Exact => (reference.tau_exact, reference.cond_exact),
            SweepMode::Naive => (reference.tau_naive, reference.cond_naive),
        };
        let name = mode_name(mode);
        summary.push(format!(
            "tau_{name} = {}",
            cmp(degree_of_asymmetry(m)?, tau_ref)
        ));
        summary.push(format!("cond_inf_{name} = {}", cmp(cond_inf(m)?, cond_ref)));
        summary.push(format!("norm_max_{name} = {:.4e}", norm_max(m)));
        let error = solve
            .error_history
            .as_ref()
            .and_then(|e| e.last().copied())
            .unwrap_or(f64::NAN);
        summary.push(format!(
            "cr_{name}: converged = {}, iterations = {}, final residual = {:.3e}, final error = {:.4e}",
            solve.converged,
            solve.iterations,
            solve.residual_history.last().copied().unwrap_or(f64::NAN),
            error
        ));
    }
    if comparable {
        if outcome.cr_exact.is_some() {
            summary.push(format!(
                "cr_exact reference iterations = {}",
                reference.cr_iterations_exact
            ));
        }
        if outcome.cr_naive.is_some() {
            summary.push(format!(
                "cr_naive reference error plateau = {:.4e}",
                reference.cr_error_plateau_naive
            ));
        }
    }
    if let (Some(h), Some(hn)) = (&outcome.exact, &outcome.naive) {
        let diff = h - hn;
        summary.push(format!(
            "diff_max = {}",
            cmp(norm_max(&diff), reference.diff_max)
        ));
        summary.push(format!(
            "diff_inf = {}",
            cmp(norm_inf_operator(&diff), reference.diff_inf)
        ));
        summary.push(format!(
            "diff_inf / norm_inf(H) = {:.4e}",
            norm_inf_operator(&diff) / norm_inf_operator(h)
        ));
        summary.push(format!(
            "perturbation_bound = {}",
            cmp(perturbation_bound(h, hn)?, reference.perturbation_bound)
        ));
    }

    let mut csv = CsvReport::new(&[
        "iteration",
        "residual_exact",
        "error_exact",
        "residual_naive",
        "error_naive",
    ]);
    let len = |s: &Option<KrylovResult>| s.as_ref().map_or(0, |s| s.residual_history.len());
    let rows = len(&outcome.cr_exact).max(len(&outcome.cr_naive));
    let pick = |s: &Option<KrylovResult>, k: usize| -> (Cell, Cell) {
        match s {
            Some(s) if k < s.residual_history.len() => (
                s.residual_history[k].into(),
                s.error_history.as_ref().map(|e| e[k]).into(),
            ),
            _ => (Cell::Empty, Cell::Empty),
        }
    };
    for k in 0..rows {
        let (re, ee) = pick(&outcome.cr_exact, k);
        let (rn, en) = pick(&outcome.cr_naive, k);
        csv.push(vec![k.into(), re, ee, rn, en]);
    }

    for (mode, solve) in [
        (SweepMode::Exact, &outcome.cr_exact),
        (SweepMode::Naive, &outcome.cr_naive),
    ] {
        if let Some(s) = solve {
            if !s.converged {
                return Err(ExpError::Convergence(format!(
                    "CR on the {} Hessian stopped after {} iterations at relative residual {:.3e}",
                    mode_name(mode),
                    s.iterations,
                    s.residual_history.last().copied().unwrap_or(f64::NAN)
                )));
            }
        }
    }
    Ok(Report {
        experiment: Experiment::AllenCahn,
        csv,
        summary,
    })
}

/// One row of the wave asymmetry sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AsymmetryRow {
    pub h: f64,
    pub tau_exact: Option<f64>,
    pub tau_naive: Option<f64>,
}

fn wave_geometry(config: &ExperimentConfig) -> Result<(f64, usize, Vec<f64>), ExpError> {
    if config.steps.is_some() {
        return Err(ExpError::Config(
            "`steps` does not apply to wave experiments: it follows from the observation times"
                .into(),
        ));
    }
    let length = positive("length", config.length.unwrap_or(64.0))?;
    let d = config.grid_points.unwrap_or(64);
    if d < 3 {
        return Err(ExpError::Config("`grid_points` must be at least 3".into()));
    }
    let times = config
        .obs_times
        .clone()
        .unwrap_or_else(default_observation_times);
    Ok((length, d, times))
}

pub fn default_wave_step_sizes() -> Vec<f64> {
    vec![0.2, 0.1, 0.05, 0.04, 0.025, 0.02, 0.01, 0.005, 0.004]
}

pub fn wave_asymmetry_rows(config: &ExperimentConfig) -> Result<Vec<AsymmetryRow>, ExpError> {
    config.reject(&[
        ("theta", config.theta.is_some()),
        ("coefficients", config.coefficients.is_some()),
        ("scale", config.scale.is_some()),
        ("w0", config.w0.is_some()),
        ("cr_tol", config.cr_tol.is_some()),
        ("cr_max_iter", config.cr_max_iter.is_some()),
        ("grad_tol", config.grad_tol.is_some()),
        ("max_iter", config.max_iter.is_some()),
    ])?;
    let (length, d, times) = wave_geometry(config)?;
    let hs = match (config.h, &config.h_values) {
        (Some(_), Some(_)) => {
            return Err(ExpError::Config(
                "give either `h` or `h_values`, not both".into(),
            ))
        }
        (Some(h), None) => vec![h],
        (None, Some(list)) => list.clone(),
        (None, None) => default_wave_step_sizes(),
    };
    if hs.is_empty() {
        return Err(ExpError::Config("`h_values` is empty".into()));
    }
    let selection = config.mode_selection();
    let mut rows = Vec::with_capacity(hs.len());
    for h in hs {
        let h = positive("h", h)?;
        let problem = wave(length, d, default_structure_field(length), &times, h)?;
        let model = Model::new(
            &problem.system,
            &problem.cost,
            &problem.tableau,
            problem.h,
            problem.steps,
        );
        let x0 = problem.initial_state(&problem.w_true);
        let mut row = AsymmetryRow {
            h,
            tau_exact: None,
            tau_naive: None,
        };
        for mode in selection.modes() {
            let m = hessian(model, &x0, mode, Some(problem.control_block()))?;
            let tau = degree_of_asymmetry(&m)?;
            match mode {
                SweepMode::Exact => row.tau_exact = Some(tau),
                SweepMode::Naive => row.tau_naive = Some(tau),
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let (sx, sy) = points
        .iter()
        .fold((0.0, 0.0), |(a, b), &(x, y)| (a + x.ln(), b + y.ln()));
    let (mx, my) = (sx / n, sy / n);
    let (num, den) = points.iter().fold((0.0, 0.0), |(num, den), &(x, y)| {
        let dx = x.ln() - mx;
        (num + dx * (y.ln() - my), den + dx * dx)
    });
    (den > 0.0).then(|| num / den)
}

pub fn run_wave_asymmetry(config: &ExperimentConfig) -> Result<Report, ExpError> {
    let rows = wave_asymmetry_rows(config)?;
    let comparable =
        config.length.is_none() && config.grid_points.is_none() && config.obs_times.is_none();
    let reference = &reference_values().wave_asymmetry;
    let lookup = |h: f64| {
        comparable
            .then(|| {
                reference
                    .h
                    .iter()
                    .position(|&r| r == h)
                    .map(|k| reference.tau_naive[k])
            })
            .flatten()
    };

    let mut csv = CsvReport::new(&["h", "tau_exact", "tau_naive", "reference_tau_naive"]);
    let mut summary =
        vec!["wave-asymmetry: Heun, W-block Hessian at the true structure field".to_string()];
    for row in &rows {
        csv.push(vec![
            row.h.into(),
            row.tau_exact.into(),
            row.tau_naive.into(),
            lookup(row.h).into(),
        ]);
        let mut line = format!("h = {:.3e}", row.h);
        if let Some(t) = row.tau_exact {
            write!(line, "  tau_exact = {t:.3e}").unwrap();
        }
        if let Some(t) = row.tau_naive {
            write!(line, "  tau_naive = {t:.4e}").unwrap();
        }
        if let Some(r) = lookup(row.h) {
            write!(line, "  (reference {r:.4e})").unwrap();
        }
        summary.push(line);
    }
    let naive: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.tau_naive.map(|t| (r.h, t)))
        .collect();
    if let Some(slope) = loglog_slope(&naive) {
        summary.push(format!("log-log slope of tau_naive = {slope:.4}"));
    }
    if let Some(worst) = rows.iter().filter_map(|r| r.tau_exact).reduce(f64::max) {
        summary.push(format!("max tau_exact = {worst:.3e}"));
    }
    Ok(Report {
        experiment: Experiment::WaveAsymmetry,
        csv,
        summary,
    })
}

/// Optimization runs of the wave inversion, one per requested mode.
#[derive(Debug, Clone)]
pub struct WaveOptimizeOutcome {
    pub runs: Vec<(SweepMode, LmrnState)>,
    pub w_true: Vec<f64>,
    pub initial_cost: f64,
}

pub fn wave_optimize_outcome(config: &ExperimentConfig) -> Result<WaveOptimizeOutcome, ExpError> {
    config.reject(&[
        ("theta", config.theta.is_some()),
        ("coefficients", config.coefficients.is_some()),
        ("scale", config.scale.is_some()),
        ("h_values", config.h_values.is_some()),
    ])?;
    let (length, d, times) = wave_geometry(config)?;
    let h = positive("h", config.h.unwrap_or(0.2))?;
    let w0 = config.w0.unwrap_or(0.5);
    if !w0.is_finite() {
        return Err(ExpError::Config("`w0` must be finite".into()));
    }
    let base = LmrnOptions::default();
    let problem = wave(length, d, default_structure_field(length), &times, h)?;
    let model = Model::new(
        &problem.system,
        &problem.cost,
        &problem.tableau,
        problem.h,
        problem.steps,
    );
    let start = vec![w0; d];
    let initial_cost = model.cost_value(&problem.initial_state(&start))?;

    let mut runs = Vec::new();
    for mode in config.mode_selection().modes() {
        let opts = LmrnOptions {
            grad_tol: positive("grad_tol", config.grad_tol.unwrap_or(1e-13))?,
            cr_tol: positive("cr_tol", config.cr_tol.unwrap_or(base.cr_tol))?,
            max_iter: config.max_iter.unwrap_or(base.max_iter),
            cr_max_iter: config.cr_max_iter,
            mode,
        };
        let state = lmrn_minimize(
            model,
            &problem.base_state,
            problem.control_block(),
            &start,
            &opts,
        )?;
        runs.push((mode, state));
    }
    Ok(WaveOptimizeOutcome {
        runs,
        w_true: problem.w_true,
        initial_cost,
    })
}

pub fn run_wave_optimize(config: &ExperimentConfig) -> Result<Report, ExpError> {
    let outcome = wave_optimize_outcome(config)?;
    let reference = &reference_values().wave_optimize;
    let mut csv = CsvReport::new(&["mode", "backward_evals", "cost"]);
    let mut summary = vec![format!(
        "wave-optimize: initial cost = {:.7e} (reference {:.7e})",
        outcome.initial_cost, reference.initial_cost
    )];
    for (mode, state) in &outcome.runs {
        for &(evals, cost) in &state.history {
            csv.push(vec![mode_name(*mode).into(), evals.into(), cost.into()]);
        }
        let err = state
            .w
            .iter()
            .zip(&outcome.w_true)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        let (ref_evals, ref_cost) = match mode {
            SweepMode::Exact => (reference.backward_evals_exact, reference.final_cost_exact),
            SweepMode::Naive => (reference.backward_evals_naive, reference.final_cost_naive),
        };
        summary.push(format!(
            "{}: converged = {}, iterations = {}, backward evaluations = {} (reference {ref_evals}), final cost = {:.4e} (reference {ref_cost:.4e}), max |W - w_true| = {err:.3e}, |grad| = {:.3e}",
            mode_name(*mode),
            state.converged,
            state.iterations,
            state.backward_evals,
            state.cost,
            norm_inf(&state.gradient)
        ));
    }
    if let [(_, exact), (_, naive)] = outcome.runs.as_slice() {
        summary.push(format!(
            "backward evaluation ratio naive/exact = {:.3} (reference {:.3})",
            naive.backward_evals as f64 / exact.backward_evals as f64,
            reference.backward_evals_naive as f64 / reference.backward_evals_exact as f64
        ));
    }
    if let Some((mode, state)) = outcome.runs.iter().find(|(_, s)| !s.converged) {
        return Err(ExpError::Convergence(format!(
            "{} run stopped after {} iterations with |grad| = {:.3e}",
            mode_name(*mode),
            state.iterations,
            norm_inf(&state.gradient)
        )));
    }
    Ok(Report {
        experiment: Experiment::WaveOptimize,
        csv,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_uses_seventeen_digits() {
        let mut csv = CsvReport::new(&["a", "b", "c", "d"]);
        csv.push(vec![Cell::Int(3), Cell::Real(0.1), Cell::Empty, "x".into()]);
        assert_eq!(csv.render(), "a,b,c,d\n3,1.0000000000000001e-1,,x\n");
        let parsed: f64 = "1.0000000000000001e-1".parse().unwrap();
        assert_eq!(parsed, 0.1);
    }

    #[test]
    fn config_round_trips() {
        let mut c = ExperimentConfig::new(Experiment::AllenCahn);
        c.h = Some(0.1 + 0.2);
        c.coefficients = Some([10.0, 1.0 / 3.0, -1.0]);
        c.mode = Some(ModeSelection::Naive);
        c.output = Some("out.csv".into());
        let back = ExperimentConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        for e in Experiment::ALL {
            let c = ExperimentConfig::new(e);
            assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
        }
    }

    #[test]
    fn bad_configs_are_config_errors() {
        assert_eq!(ExperimentConfig::from_json("{").unwrap_err().exit_code(), 2);
        assert_eq!(
            ExperimentConfig::from_json(r#"{"experiment":"pendulum","bogus":1}"#)
                .unwrap_err()
                .exit_code(),
            2
        );
        let mut c = ExperimentConfig::new(Experiment::Pendulum);
        c.h = Some(-1.0);
        assert_eq!(run(&c).unwrap_err().exit_code(), 2);
        let mut c = ExperimentConfig::new(Experiment::WaveAsymmetry);
        c.steps = Some(3);
        assert_eq!(run(&c).unwrap_err().exit_code(), 2);
        let mut c = ExperimentConfig::new(Experiment::WaveAsymmetry);
        c.h = Some(0.3);
        assert_eq!(run(&c).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn digit_counting() {
        assert_eq!(matching_digits(1.0, 1.0), 17);
        assert_eq!(matching_digits(1.23456, 1.23457), 5);
        assert_eq!(matching_digits(2.0, 1.0), 0);
    }

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = [0.1, 0.2, 0.4].iter().map(|&h| (h, 3.0 * h * h)).collect();
        assert!((loglog_slope(&pts).unwrap() - 2.0).abs() < 1e-12);
        assert!(loglog_slope(&pts[..1]).is_none());
    }

    #[test]
    fn pendulum_report_matches_reference() {
        let report = run(&ExperimentConfig::new(Experiment::Pendulum)).unwrap();
        assert_eq!(report.csv.rows.len(), 8);
        for row in &report.csv.rows {
            let Cell::Int(digits) = row[5] else {
                panic!("missing digits")
            };
            assert!(digits >= 12, "{row:?}");
        }
        let again = run(&ExperimentConfig::new(Experiment::Pendulum)).unwrap();
        assert_eq!(report.csv.render(), again.csv.render());
    }
}
