//! Uniform periodic grid on the circle, staggered differences and the
//! convexity measure `u'' + u`.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry;
use crate::linalg::CyclicBanded;
use crate::problem::{ProblemSpec, Regime};

/// Default absolute feasibility tolerance on cell masses and the box.
pub const EPS_FEAS: f64 = 1e-9;

/// `N` equispaced nodes `θ_i = i·h` on `[0, 2π)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeriodicGrid {
    n: usize,
    h: f64,
}

/// Builds the grid with `N` nodes; `N` must be even and at least 8.
pub fn make_grid(n: usize) -> Result<PeriodicGrid> {
    PeriodicGrid::new(n)
}

impl PeriodicGrid {
    pub fn new(n: usize) -> Result<Self> {
        if n < 8 || !n.is_multiple_of(2) {
            return Err(Error::InvalidGridSize(n));
        }
        Ok(PeriodicGrid {
            n,
            h: 2.0 * PI / n as f64,
        })
    }

    pub fn n_points(&self) -> usize {
        self.n
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    pub fn node(&self, i: usize) -> f64 {
        i as f64 * self.h
    }

    /// `θ_{i+1/2}`.
    pub fn midpoint(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.h
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.node(i)).collect()
    }

    pub fn midpoints(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.midpoint(i)).collect()
    }

    /// Index of the cell `[θ_i − h/2, θ_i + h/2)` containing `theta`.
    pub fn cell_of(&self, theta: f64) -> usize {
        let t = theta.rem_euclid(2.0 * PI);
        ((t / self.h).round() as usize) % self.n
    }

    /// The convexity operator `A: u ↦ ν` as a symmetric cyclic tridiagonal
    /// matrix.
    pub fn convexity_operator(&self) -> CyclicBanded {
        let mut a = CyclicBanded::zeros(self.n, 1);
        for i in 0..self.n {
            a.add(i, 0, self.h - 2.0 / self.h);
            a.add(i, 1, 1.0 / self.h);
        }
        a
    }
}

/// Samples `u_i > 0` of the reciprocal radius `u = 1/r` at the grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialFunction {
    grid: PeriodicGrid,
    values: Vec<f64>,
}

impl RadialFunction {
    pub fn new(grid: PeriodicGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n {
            return Err(Error::LengthMismatch {
                expected: grid.n,
                got: values.len(),
            });
        }
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v > 0.0) || !v.is_finite())
        {
            return Err(Error::NonPositive { index, value });
        }
        Ok(RadialFunction { grid, values })
    }

    pub fn from_fn(grid: PeriodicGrid, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = grid.nodes().into_iter().map(f).collect();
        Self::new(grid, values)
    }

    pub fn constant(grid: PeriodicGrid, c: f64) -> Result<Self> {
        Self::new(grid, vec![c; grid.n])
    }

    pub fn grid(&self) -> &PeriodicGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Periodic indexing: `at(i + N) == at(i)`, negative indices allowed.
    pub fn at(&self, i: isize) -> f64 {
        self.values[i.rem_euclid(self.grid.n as isize) as usize]
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// CSV text with header `theta,u` and round-trip precision.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("theta,u\n");
        for (i, v) in self.values.iter().enumerate() {
            let _ = writeln!(s, "{:.17e},{:.17e}", self.grid.node(i), v);
        }
        s
    }

    /// Parses CSV produced by [`RadialFunction::to_csv`]; the grid size is
    /// the number of data rows.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, header)) if header.trim() == "theta,u" => {}
            Some((i, header)) => {
                return Err(Error::Csv {
                    line: i + 1,
                    message: format!("expected header `theta,u`, found `{}`", header.trim()),
                })
            }
            None => {
                return Err(Error::Csv {
                    line: 1,
                    message: "empty file".into(),
                })
            }
        }
        let mut values = Vec::new();
        for (i, line) in lines {
            let mut fields = line.split(',');
            let (Some(_theta), Some(u), None) = (fields.next(), fields.next(), fields.next())
            else {
                return Err(Error::Csv {
                    line: i + 1,
                    message: "expected two comma-separated fields".into(),
                });
            };
            let u: f64 = u.trim().parse().map_err(|e| Error::Csv {
                line: i + 1,
                message: format!("bad value `{}`: {e}", u.trim()),
            })?;
            values.push(u);
        }
        let grid = PeriodicGrid::new(values.len())?;
        Self::new(grid, values)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

/// `p_{i+1/2} = (u_{i+1} − u_i)/h` at every midpoint.
pub fn staggered_derivative(u: &RadialFunction) -> Vec<f64> {
    staggered(u.grid.h, &u.values)
}

pub(crate) fn staggered(h: f64, u: &[f64]) -> Vec<f64> {
    let n = u.len();
    (0..n).map(|i| (u[(i + 1) % n] - u[i]) / h).collect()
}

/// Cell masses `ν_i = (u_{i−1} − 2u_i + u_{i+1})/h + h·u_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexityMeasure {
    grid: PeriodicGrid,
    masses: Vec<f64>,
}

impl ConvexityMeasure {
    pub fn grid(&self) -> &PeriodicGrid {
        &self.grid
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn min(&self) -> f64 {
        self.masses.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn total(&self) -> f64 {
        self.masses.iter().sum()
    }
}

pub fn convexity_measure(u: &RadialFunction) -> ConvexityMeasure {
    ConvexityMeasure {
        grid: u.grid,
        masses: cell_masses(u.grid.h, &u.values),
    }
}

/// Applies the convexity operator to raw nodal values (also valid for
/// directions, since the map is linear).
pub fn cell_masses(h: f64, u: &[f64]) -> Vec<f64> {
    let n = u.len();
    (0..n)
        .map(|i| {
            let prev = u[(i + n - 1) % n];
            let next = u[(i + 1) % n];
            (prev - 2.0 * u[i] + next) / h + h * u[i]
        })
        .collect()
}

/// Outcome of [`check_feasibility`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub min_cone_mass: f64,
    pub box_violation: f64,
    pub volume_gap: Option<f64>,
    pub feasible: bool,
}

pub fn check_feasibility(
    u: &RadialFunction,
    problem: &ProblemSpec,
    eps_feas: f64,
) -> FeasibilityReport {
    let min_cone_mass = convexity_measure(u).min();
    let (lo, hi) = problem.regime.bounds();
    let box_violation = u
        .values
        .iter()
        .map(|&v| (lo - v).max(v - hi).max(0.0))
        .fold(0.0, f64::max);
    let volume_gap = match problem.regime {
        Regime::Volume { m0, .. } => Some((geometry::area(u) - m0).abs()),
        Regime::Annulus { .. } => None,
    };
    let feasible = min_cone_mass >= -eps_feas
        && box_violation <= eps_feas
        && volume_gap.is_none_or(|g| g <= eps_feas);
    FeasibilityReport {
        min_cone_mass,
        box_violation,
        volume_gap,
        feasible,
    }
}

/// Outcome of [`lipschitz_bound_check`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzCheck {
    pub max_abs_p: f64,
    pub bound: f64,
    pub holds: bool,
}

/// Checks `max |p| ≤ 2πb + ε` over the midpoints.
pub fn lipschitz_bound_check(u: &RadialFunction, b: f64, eps_feas: f64) -> LipschitzCheck {
    bound_check(u, 2.0 * PI * b, eps_feas)
}

/// Sharper bound `√(2b(b−a))` valid for minimizers whose convexity measure
/// has no support strictly inside the annulus.
pub fn boundary_support_bound(a: f64, b: f64) -> f64 {
    (2.0 * b * (b - a)).sqrt()
}

pub fn boundary_support_bound_check(
    u: &RadialFunction,
    a: f64,
    b: f64,
    eps: f64,
) -> LipschitzCheck {
    bound_check(u, boundary_support_bound(a, b), eps)
}

fn bound_check(u: &RadialFunction, bound: f64, eps: f64) -> LipschitzCheck {
    let max_abs_p = staggered_derivative(u)
        .into_iter()
        .map(f64::abs)
        .fold(0.0, f64::max);
    LipschitzCheck {
        max_abs_p,
        bound,
        holds: max_abs_p <= bound + eps,
    }
}
