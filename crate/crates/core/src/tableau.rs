//! Runge–Kutta coefficient sets and their symplectic adjoint partners.
//!
//! A forward tableau `(a, b)` paired with an adjoint tableau `(A, B)` that
//! satisfies `B_i = b_i` and `b_i A_ij + B_j a_ji = b_i B_j` forms a symplectic
//! partitioned Runge–Kutta pair. Backward sweeps with the partner conserve the
//! pairing `λ_nᵀ δ_n` exactly, which is what makes the adjoint derivatives
//! exact for the discrete flow.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Named tableaus shipped with the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    ExplicitEuler,
    ImplicitEuler,
    Heun,
    Rk4,
}

impl Preset {
    pub const ALL: [Preset; 4] = [
        Preset::ExplicitEuler,
        Preset::ImplicitEuler,
        Preset::Heun,
        Preset::Rk4,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::ExplicitEuler => "explicit-euler",
            Preset::ImplicitEuler => "implicit-euler",
            Preset::Heun => "heun",
            Preset::Rk4 => "rk4",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::UnknownPreset(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableauKind {
    /// Strictly lower triangular `a`.
    Explicit,
    /// The one-stage method with `a = [[1]]`, `b = [1]`.
    ImplicitEuler,
}

/// Square coefficient matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    n: usize,
    data: Vec<f64>,
}

impl Coefficients {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for row in rows {
            if row.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self { n, data })
    }

    fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data
            .chunks(self.n.max(1))
            .map(<[f64]>::to_vec)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ButcherTableau {
    name: String,
    a: Coefficients,
    b: Vec<f64>,
    kind: TableauKind,
}

impl ButcherTableau {
    /// Builds an explicit tableau; `a` must be strictly lower triangular.
    pub fn explicit(name: impl Into<String>, a: &[Vec<f64>], b: &[f64]) -> Result<Self> {
        let a = Coefficients::from_rows(a)?;
        if a.dim() == 0 {
            return Err(Error::InvalidArgument(
                "tableau needs at least one stage".into(),
            ));
        }
        if b.len() != a.dim() {
            return Err(Error::DimensionMismatch {
                expected: a.dim(),
                got: b.len(),
            });
        }
        for i in 0..a.dim() {
            for j in i..a.dim() {
                if a.get(i, j) != 0.0 {
                    return Err(Error::UnsupportedTableau(format!(
                        "a[{i}][{j}] = {} makes the method implicit",
                        a.get(i, j)
                    )));
                }
            }
        }
        Ok(Self {
            name: name.into(),
            a,
            b: b.to_vec(),
            kind: TableauKind::Explicit,
        })
    }

    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::ExplicitEuler => Self::explicit(preset.name(), &[vec![0.0]], &[1.0]),
            Preset::ImplicitEuler => Ok(Self {
                name: preset.name().into(),
                a: Coefficients {
                    n: 1,
                    data: vec![1.0],
                },
                b: vec![1.0],
                kind: TableauKind::ImplicitEuler,
            }),
            Preset::Heun => Self::explicit(
                preset.name(),
                &[vec![0.0, 0.0], vec![1.0, 0.0]],
                &[0.5, 0.5],
            ),
            Preset::Rk4 => Self::explicit(
                preset.name(),
                &[
                    vec![0.0, 0.0, 0.0, 0.0],
                    vec![0.5, 0.0, 0.0, 0.0],
                    vec![0.0, 0.5, 0.0, 0.0],
                    vec![0.0, 0.0, 1.0, 0.0],
                ],
                &[1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
            ),
        }
        .expect("preset coefficients are valid")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn stages(&self) -> usize {
        self.b.len()
    }

    pub fn a(&self, i: usize, j: usize) -> f64 {
        self.a.get(i, j)
    }

    pub fn coefficients(&self) -> &Coefficients {
        &self.a
    }

    pub fn weights(&self) -> &[f64] {
        &self.b
    }

    pub fn kind(&self) -> TableauKind {
        self.kind
    }

    pub fn is_explicit(&self) -> bool {
        self.kind == TableauKind::Explicit
    }
}

/// Looks up a preset by its CLI name.
pub fn make_tableau(name: &str) -> Result<ButcherTableau> {
    Ok(ButcherTableau::preset(name.parse()?))
}

/// Adjoint-side coefficients `(A, B)` and the backward-form coefficients
/// `D_ij = B_j - A_ij` used when sweeping from `n + 1` to `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointTableau {
    source: String,
    a: Coefficients,
    b: Vec<f64>,
    d: Coefficients,
}

impl AdjointTableau {
    /// Builds an adjoint tableau from raw coefficients, deriving `D`.
    /// Used for hand-made (possibly non-partner) tableaus.
    pub fn from_coefficients(source: impl Into<String>, a: &[Vec<f64>], b: &[f64]) -> Result<Self> {
        let a = Coefficients::from_rows(a)?;
        if b.len() != a.dim() {
            return Err(Error::DimensionMismatch {
                expected: a.dim(),
                got: b.len(),
            });
        }
        let s = a.dim();
        let mut d = Coefficients::zeros(s);
        for i in 0..s {
            for j in 0..s {
                d.set(i, j, b[j] - a.get(i, j));
            }
        }
        Ok(Self {
            source: source.into(),
            a,
            b: b.to_vec(),
            d,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn stages(&self) -> usize {
        self.b.len()
    }

    pub fn a(&self, i: usize, j: usize) -> f64 {
        self.a.get(i, j)
    }

    pub fn weights(&self) -> &[f64] {
        &self.b
    }

    /// Backward-form coefficient `D_ij = B_j - A_ij`.
    pub fn d(&self, i: usize, j: usize) -> f64 {
        self.d.get(i, j)
    }

    pub fn coefficients(&self) -> &Coefficients {
        &self.a
    }

    pub fn backward_coefficients(&self) -> &Coefficients {
        &self.d
    }
}

/// Derives the symplectic partner `A_ij = b_j - (b_j / b_i) a_ji`, `B = b`.
///
/// `D` is filled from the closed form `(b_j / b_i) a_ji` rather than from
/// `B_j - A_ij`, so that zero entries of `a` give exact zeros in `D`.
pub fn adjoint_partner(t: &ButcherTableau) -> Result<AdjointTableau> {
    let s = t.stages();
    let b = t.weights();
    if let Some(index) = b.iter().position(|&w| w == 0.0) {
        return Err(Error::ZeroWeight { index });
    }
    let mut a = Coefficients::zeros(s);
    let mut d = Coefficients::zeros(s);
    for i in 0..s {
        for j in 0..s {
            let ratio = b[j] / b[i];
            a.set(i, j, b[j] - ratio * t.a(j, i));
            d.set(i, j, ratio * t.a(j, i));
        }
    }
    Ok(AdjointTableau {
        source: t.name().to_string(),
        a,
        b: b.to_vec(),
        d,
    })
}

/// Largest residual of the two partner conditions `B_i = b_i` and
/// `b_i A_ij + B_j a_ji - b_i B_j = 0`.
pub fn partner_residual(t: &ButcherTableau, at: &AdjointTableau) -> f64 {
    let s = t.stages();
    let b = t.weights();
    let big_b = at.weights();
    let mut worst = 0.0_f64;
    for i in 0..s {
        worst = worst.max((b[i] - big_b[i]).abs());
        for j in 0..s {
            let r = b[i] * at.a(i, j) + big_b[j] * t.a(j, i) - b[i] * big_b[j];
            worst = worst.max(r.abs());
        }
    }
    worst
}

pub fn verify_partner(t: &ButcherTableau, at: &AdjointTableau, tol: f64) -> bool {
    t.stages() == at.stages() && partner_residual(t, at) <= tol
}
