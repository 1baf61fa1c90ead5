//! Problem definitions: the integrand, the grid size and the constraint
//! regime.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functional::{apply_cutoff, FunctionalSpec};
use crate::periodic::PeriodicGrid;

/// Constraint set besides convexity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Regime {
    /// `a ≤ u ≤ b`: the boundary stays in the annulus `1/b ≤ r ≤ 1/a`.
    Annulus { a: f64, b: f64 },
    /// `m(u) = m0`, with `u_lo ≤ u ≤ u_hi` as a safeguard.
    Volume { m0: f64, u_lo: f64, u_hi: f64 },
}

impl Regime {
    /// The box `[lo, hi]` enforced on `u` (the annulus itself, or the
    /// volume safeguard box).
    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            Regime::Annulus { a, b } => (a, b),
            Regime::Volume { u_lo, u_hi, .. } => (u_lo, u_hi),
        }
    }

    /// Constant initial guess: the annulus midpoint, or the disk of area `m0`.
    pub fn center(&self) -> f64 {
        match *self {
            Regime::Annulus { a, b } => 0.5 * (a + b),
            Regime::Volume { m0, .. } => (PI / m0).sqrt(),
        }
    }

    pub fn is_volume(&self) -> bool {
        matches!(self, Regime::Volume { .. })
    }

    /// Default safeguard box `[0.05, 20]·√(π/m0)`.
    pub fn volume(m0: f64) -> Regime {
        let c = (PI / m0).sqrt();
        Regime::Volume {
            m0,
            u_lo: 0.05 * c,
            u_hi: 20.0 * c,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Regime::Annulus { a, b } => {
                if !(a.is_finite() && b.is_finite()) {
                    return Err(Error::InvalidProblem(
                        "regime.a and regime.b must be finite".into(),
                    ));
                }
                if a <= 0.0 {
                    return Err(Error::InvalidProblem("regime.a must be > 0".into()));
                }
                if a >= b {
                    return Err(Error::InvalidProblem("regime.a must be < regime.b".into()));
                }
            }
            Regime::Volume { m0, u_lo, u_hi } => {
                if !(m0 > 0.0 && m0.is_finite()) {
                    return Err(Error::InvalidProblem("regime.m0 must be > 0".into()));
                }
                if !(u_lo > 0.0) {
                    return Err(Error::InvalidProblem(
                        "regime.box lower bound must be > 0".into(),
                    ));
                }
                if u_lo >= u_hi {
                    return Err(Error::InvalidProblem(
                        "regime.box must satisfy lo < hi".into(),
                    ));
                }
                let c = (PI / m0).sqrt();
                if !(u_lo < c && c < u_hi) {
                    return Err(Error::Infeasible(format!(
                        "the disk of area {m0} (u = {c}) is not strictly inside the safeguard box [{u_lo}, {u_hi}]"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A complete optimization problem.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub functional: FunctionalSpec,
    pub grid_n: usize,
    pub regime: Regime,
    /// Wrap the integrand in the cutoff window around the annulus.
    pub apply_cutoff: bool,
}

impl ProblemSpec {
    /// Annulus problem; the cutoff is on by default.
    pub fn annulus(functional: FunctionalSpec, a: f64, b: f64, grid_n: usize) -> Result<Self> {
        let p = ProblemSpec {
            functional,
            grid_n,
            regime: Regime::Annulus { a, b },
            apply_cutoff: true,
        };
        p.validate()?;
        Ok(p)
    }

    /// Volume problem with the default safeguard box.
    pub fn volume(functional: FunctionalSpec, m0: f64, grid_n: usize) -> Result<Self> {
        let p = ProblemSpec {
            functional,
            grid_n,
            regime: Regime::volume(m0),
            apply_cutoff: false,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        PeriodicGrid::new(self.grid_n)?;
        self.regime.validate()
    }

    pub fn grid(&self) -> Result<PeriodicGrid> {
        PeriodicGrid::new(self.grid_n)
    }

    pub fn with_grid(&self, grid_n: usize) -> Self {
        ProblemSpec {
            grid_n,
            ..self.clone()
        }
    }

    /// The integrand actually minimized (cut off when requested).
    pub fn effective_functional(&self) -> FunctionalSpec {
        let (lo, hi) = self.regime.bounds();
        if self.apply_cutoff {
            apply_cutoff(&self.functional, lo, hi)
        } else {
            self.functional.clone()
        }
    }
}
