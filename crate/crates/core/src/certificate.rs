//! First- and second-order optimality certificates.
//!
//! Multipliers are recovered from `u` alone by a nonnegative least-squares
//! fit of `∇j_h(u) = Aᵀζ + μ_a − μ_b` (or `Aᵀζ + μ∇m_h(u)`) restricted to the
//! active sets, so certificates do not depend on the solver path. Second-order
//! necessity is probed with directions `v` whose convexity measure `Av` is
//! carried by cells where `u` already has positive mass, so that `u ± t·v`
//! stays feasible.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::functional::{
    assemble, derivative_bounds, form_raw, value_raw, DerivativeBounds, FunctionalSpec,
};
use crate::geometry::{
    analyze_structure, area_gradient_raw, area_hessian_diag_raw, ShapeStructure,
    StructureTolerances,
};
use crate::linalg::{nnls, solve_tridiagonal};
use crate::periodic::{cell_masses, check_feasibility, RadialFunction, EPS_FEAS};
use crate::problem::ProblemSpec;
use crate::solver::{
    multistart, solve, solve_from, start_point, SolveResult, SolverOptions, Status,
};

/// Multipliers of the box or of the volume constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Multipliers {
    Box { mu_a: Vec<f64>, mu_b: Vec<f64> },
    Volume { mu: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    /// Sup norm of the stationarity residual.
    pub stationarity: f64,
    pub comp_zeta: f64,
    pub comp_a: f64,
    pub comp_b: f64,
}

#[derive(Debug, Clone)]
pub struct KKTCertificate {
    /// Dual of `ν ≥ 0`, per cell.
    pub zeta: Vec<f64>,
    pub multipliers: Multipliers,
    pub residuals: Residuals,
    /// `‖∇j_h(u)‖_∞`.
    pub gradient_norm: f64,
    /// Some cell sat between two classes; both classifications were fitted.
    pub indeterminate: bool,
    /// Cells excluded from the support of `ζ` because they carry an atom.
    pub atom_cells: Vec<usize>,
    pub objective: f64,
    gradient: Vec<f64>,
    area_gradient: Option<Vec<f64>>,
    h: f64,
}

impl KKTCertificate {
    /// `max(stationarity / (1 + ‖∇j‖_∞), complementarity / 10)`.
    pub fn kkt_residual(&self) -> f64 {
        let r = &self.residuals;
        (r.stationarity / (1.0 + self.gradient_norm))
            .max(r.comp_zeta.max(r.comp_a).max(r.comp_b) / 10.0)
    }

    pub fn scaled_stationarity(&self) -> f64 {
        self.residuals.stationarity / (1.0 + self.gradient_norm)
    }

    pub fn converged(&self, kkt_tol: f64) -> bool {
        self.kkt_residual() <= kkt_tol
    }

    /// Scalar volume multiplier (convention `∇j − Aᵀζ − μ∇m = 0`).
    pub fn mu(&self) -> Option<f64> {
        match self.multipliers {
            Multipliers::Volume { mu } => Some(mu),
            Multipliers::Box { .. } => None,
        }
    }

    pub fn to_json(&self, probes: &[ProbeOutcome]) -> Value {
        let mut doc = json!({
            "zeta": self.zeta,
            "residuals": self.residuals,
            "gradient_norm": self.gradient_norm,
            "kkt_residual": self.kkt_residual(),
            "indeterminate": self.indeterminate,
            "objective": self.objective,
            "probes": probes,
        });
        match &self.multipliers {
            Multipliers::Box { mu_a, mu_b } => {
                doc["mu_a"] = json!(mu_a);
                doc["mu_b"] = json!(mu_b);
            }
            Multipliers::Volume { mu } => doc["mu"] = json!(mu),
        }
        doc
    }
}

/// Fits the multipliers of the first-order condition at `u`.
pub fn recover_multipliers(u: &RadialFunction, problem: &ProblemSpec) -> Result<KKTCertificate> {
    if u.len() != problem.grid_n {
        return Err(Error::LengthMismatch {
            expected: problem.grid_n,
            got: u.len(),
        });
    }
    let feas = check_feasibility(u, problem, EPS_FEAS);
    if feas.min_cone_mass < -EPS_FEAS || feas.box_violation > EPS_FEAS {
        return Err(Error::Infeasible(format!(
            "certificate needs a feasible u (min ν = {:e}, box violation {:e})",
            feas.min_cone_mass, feas.box_violation
        )));
    }
    let spec = problem.effective_functional();
    let h = u.grid().spacing();
    let v = u.values();
    let n = v.len();
    let grad = assemble(&spec, h, v, false)?.grad;
    let gradient_norm = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let objective = value_raw(&problem.functional, h, v)?;
    let nu = cell_masses(h, v);
    let tols = StructureTolerances::default();
    let mean = u.mean();
    let sure_edge = 10.0 * EPS_FEAS;
    let maybe_edge = tols.edge_threshold(h, mean);
    let atom_thr = tols.atom_threshold(h, mean);
    let atom_cells: Vec<usize> = (0..n).filter(|&i| nu[i] > atom_thr).collect();

    let (lo, hi) = problem.regime.bounds();
    let volume = problem.regime.is_volume();
    let area_gradient = volume.then(|| area_gradient_raw(h, v));
    let eps_box = tols.eps_box(lo, hi);

    let classify = |loose: bool| -> Support {
        let edge_thr = if loose { maybe_edge } else { sure_edge };
        let box_thr = if loose { 100.0 * eps_box } else { eps_box };
        Support {
            zeta: (0..n).filter(|&i| nu[i] <= edge_thr).collect(),
            lo: if volume {
                vec![]
            } else {
                (0..n).filter(|&i| v[i] - lo <= box_thr).collect()
            },
            hi: if volume {
                vec![]
            } else {
                (0..n).filter(|&i| hi - v[i] <= box_thr).collect()
            },
        }
    };
    let strict = classify(false);
    let loose = classify(true);
    let ambiguous = strict != loose;

    let fit = |s: &Support| fit_support(s, &grad, area_gradient.as_deref(), &nu, v, lo, hi, h);
    let mut best = fit(&strict);
    if ambiguous {
        let other = fit(&loose);
        let score = |c: &Fitted| {
            let r = &c.residuals;
            (r.stationarity / (1.0 + gradient_norm))
                .max(r.comp_zeta.max(r.comp_a).max(r.comp_b) / 10.0)
        };
        if score(&other) < score(&best) {
            best = other;
        }
    }
    let multipliers = match best.mu {
        Some(mu) => Multipliers::Volume { mu },
        None => Multipliers::Box {
            mu_a: best.mu_a,
            mu_b: best.mu_b,
        },
    };
    Ok(KKTCertificate {
        zeta: best.zeta,
        multipliers,
        residuals: best.residuals,
        gradient_norm,
        indeterminate: ambiguous,
        atom_cells,
        objective,
        gradient: grad,
        area_gradient,
        h,
    })
}

#[derive(Debug, Clone, PartialEq)]
struct Support {
    zeta: Vec<usize>,
    lo: Vec<usize>,
    hi: Vec<usize>,
}

struct Fitted {
    zeta: Vec<f64>,
    mu_a: Vec<f64>,
    mu_b: Vec<f64>,
    mu: Option<f64>,
    residuals: Residuals,
}

#[allow(clippy::too_many_arguments)]
fn fit_support(
    s: &Support,
    grad: &[f64],
    area_gradient: Option<&[f64]>,
    nu: &[f64],
    v: &[f64],
    lo: f64,
    hi: f64,
    h: f64,
) -> Fitted {
    let n = grad.len();
    let k = s.zeta.len() + s.lo.len() + s.hi.len() + usize::from(area_gradient.is_some());
    let mut m = DMatrix::<f64>::zeros(n, k);
    let mut nonneg = vec![true; k];
    let diag = h - 2.0 / h;
    let off = 1.0 / h;
    let mut col = 0;
    for &i in &s.zeta {
        m[((i + n - 1) % n, col)] = off;
        m[(i, col)] = diag;
        m[((i + 1) % n, col)] = off;
        col += 1;
    }
    for &i in &s.lo {
        m[(i, col)] = 1.0;
        col += 1;
    }
    for &i in &s.hi {
        m[(i, col)] = -1.0;
        col += 1;
    }
    if let Some(gm) = area_gradient {
        for i in 0..n {
            m[(i, col)] = gm[i];
        }
        nonneg[col] = false;
    }
    let sol = nnls(&m, &DVector::from_column_slice(grad), &nonneg);
    let x = sol.x;
    let mut zeta = vec![0.0; n];
    let mut mu_a = vec![0.0; n];
    let mut mu_b = vec![0.0; n];
    let mut col = 0;
    for &i in &s.zeta {
        zeta[i] = x[col];
        col += 1;
    }
    for &i in &s.lo {
        mu_a[i] = x[col];
        col += 1;
    }
    for &i in &s.hi {
        mu_b[i] = x[col];
        col += 1;
    }
    let mu = area_gradient.map(|_| x[col]);

    // Residual recomputed from the sparse structure.
    let az = cell_masses(h, &zeta);
    let mut stationarity: f64 = 0.0;
    for i in 0..n {
        let mut r = grad[i] - az[i] - mu_a[i] + mu_b[i];
        if let (Some(gm), Some(mu)) = (area_gradient, mu) {
            r -= mu * gm[i];
        }
        stationarity = stationarity.max(r.abs());
    }
    let sup = |a: &[f64], s: &dyn Fn(usize) -> f64| {
        (0..n).map(|i| (a[i] * s(i)).abs()).fold(0.0, f64::max)
    };
    Fitted {
        residuals: Residuals {
            stationarity,
            comp_zeta: sup(&zeta, &|i| nu[i]),
            comp_a: sup(&mu_a, &|i| v[i] - lo),
            comp_b: sup(&mu_b, &|i| hi - v[i]),
        },
        zeta,
        mu_a,
        mu_b,
        mu,
    }
}

/// `∇j·v − ζ·(Av) − μ_a·v + μ_b·v` (volume: `− μ ∇m·v`), the stationarity
/// residual paired with `v`.
pub fn stationarity_test(cert: &KKTCertificate, v: &[f64]) -> f64 {
    let av = cell_masses(cert.h, v);
    let mut s: f64 = cert.gradient.iter().zip(v).map(|(g, x)| g * x).sum();
    s -= cert.zeta.iter().zip(&av).map(|(z, a)| z * a).sum::<f64>();
    match &cert.multipliers {
        Multipliers::Box { mu_a, mu_b } => {
            s -= mu_a.iter().zip(v).map(|(m, x)| m * x).sum::<f64>();
            s += mu_b.iter().zip(v).map(|(m, x)| m * x).sum::<f64>();
        }
        Multipliers::Volume { mu } => {
            let gm = cert.area_gradient.as_ref().expect("volume certificate");
            s -= mu * gm.iter().zip(v).map(|(g, x)| g * x).sum::<f64>();
        }
    }
    s
}

// ---------------------------------------------------------------------------
// Second-order probes

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbePattern {
    /// Piecewise sine through three consecutive atoms.
    SineHat,
    /// Combination of measure-restricted solves with vanishing one-sided
    /// differences at the window ends.
    ChiMeasure,
    /// Dirichlet solve with a unit source on one atom.
    SingleAtom,
}

/// Where and how to build a probe. Node indices are read cyclically and
/// must appear in increasing angular order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "pattern", rename_all = "snake_case")]
pub enum ProbeSpec {
    SineHat {
        left: usize,
        center: usize,
        right: usize,
    },
    ChiMeasure {
        left: usize,
        right: usize,
    },
    SingleAtom {
        left: usize,
        atom: usize,
        right: usize,
    },
}

impl ProbeSpec {
    pub fn pattern(&self) -> ProbePattern {
        match self {
            ProbeSpec::SineHat { .. } => ProbePattern::SineHat,
            ProbeSpec::ChiMeasure { .. } => ProbePattern::ChiMeasure,
            ProbeSpec::SingleAtom { .. } => ProbePattern::SingleAtom,
        }
    }

    pub fn window(&self) -> [usize; 2] {
        match *self {
            ProbeSpec::SineHat { left, right, .. }
            | ProbeSpec::ChiMeasure { left, right }
            | ProbeSpec::SingleAtom { left, right, .. } => [left, right],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondOrderProbe {
    /// Inclusive node window `[left, right]`; `direction` vanishes outside.
    pub support_interval: [usize; 2],
    pub direction: Vec<f64>,
    pub construction: ProbePattern,
    /// Whether `u ± t·v` is feasible for some `t > 0`.
    pub admissible: bool,
    /// `1/t` for the largest such `t`.
    pub lambda_used: Option<f64>,
    pub reason: Option<String>,
}

/// Result of one probe in [`second_order_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub window: [usize; 2],
    pub pattern: ProbePattern,
    pub form: Option<f64>,
    pub pass: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

fn cyclic_len(left: usize, right: usize, n: usize) -> usize {
    (right + n - left) % n
}

/// Values at the interior nodes `left+1 .. right-1` of the solution of
/// `(Av)_i = f_i` on the interior cells with `v = 0` at both ends.
fn dirichlet_solve(h: f64, f: &[f64]) -> Result<Vec<f64>> {
    let m = f.len();
    let diag = vec![h - 2.0 / h; m];
    let off = vec![1.0 / h; m.saturating_sub(1)];
    solve_tridiagonal(&diag, &off, f)
        .ok_or_else(|| Error::ProbeRejected("singular Dirichlet system on the window".into()))
}

/// Builds a probe direction on `u` for the given pattern.
pub fn build_probe(
    u: &RadialFunction,
    problem: &ProblemSpec,
    spec: &ProbeSpec,
) -> Result<SecondOrderProbe> {
    let n = u.len();
    let h = u.grid().spacing();
    let [left, right] = spec.window();
    if left >= n || right >= n {
        return Err(Error::ProbeRejected(format!(
            "window [{left}, {right}] outside the grid"
        )));
    }
    let len = cyclic_len(left, right, n);
    if len < 2 {
        return Err(Error::ProbeRejected(
            "window needs at least one interior node".into(),
        ));
    }
    if len as f64 * h >= PI {
        return Err(Error::ProbeRejected(format!(
            "window length {:.6} is not below π",
            len as f64 * h
        )));
    }
    let node = |k: usize| (left + k) % n;
    let nu = cell_masses(h, u.values());
    let tols = StructureTolerances::default();
    let charged_thr = tols.edge_threshold(h, u.mean());
    let mut v = vec![0.0; n];

    match *spec {
        ProbeSpec::SineHat { center, .. } | ProbeSpec::SingleAtom { atom: center, .. } => {
            let kc = cyclic_len(left, center, n);
            if kc == 0 || kc >= len {
                return Err(Error::ProbeRejected(
                    "center must lie strictly inside the window".into(),
                ));
            }
            let is_sine = matches!(spec, ProbeSpec::SineHat { .. });
            if is_sine {
                for (name, i) in [("left", left), ("center", center), ("right", right)] {
                    if nu[i] <= charged_thr {
                        return Err(Error::ProbeRejected(format!(
                            "{name} node {i} carries no atom"
                        )));
                    }
                }
            } else if nu[center] <= charged_thr {
                return Err(Error::ProbeRejected(format!(
                    "node {center} carries no atom"
                )));
            }
            if is_sine {
                let t_l = kc as f64 * h;
                let t_r = (len - kc) as f64 * h;
                let peak = t_l.sin() * t_r.sin();
                // Two Dirichlet pieces meeting at the center value.
                let piece =
                    |m: usize, end_value_left: f64, end_value_right: f64| -> Result<Vec<f64>> {
                        let mut f = vec![0.0; m];
                        if m > 0 {
                            f[0] -= end_value_left / h;
                            f[m - 1] -= end_value_right / h;
                        }
                        dirichlet_solve(h, &f)
                    };
                let a = piece(kc - 1, 0.0, peak)?;
                let b = piece(len - kc - 1, peak, 0.0)?;
                for (k, x) in a.iter().enumerate() {
                    v[node(k + 1)] = *x;
                }
                v[center] = peak;
                for (k, x) in b.iter().enumerate() {
                    v[node(kc + 1 + k)] = *x;
                }
            } else {
                let mut f = vec![0.0; len - 1];
                f[kc - 1] = 1.0;
                let w = dirichlet_solve(h, &f)?;
                let scale = w.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                for (k, x) in w.iter().enumerate() {
                    v[node(k + 1)] = x / scale;
                }
            }
        }
        ProbeSpec::ChiMeasure { .. } => {
            let volume = problem.regime.is_volume();
            let conditions = if volume { 3 } else { 2 };
            let charged: Vec<usize> = (1..len).filter(|&k| nu[node(k)] > charged_thr).collect();
            if charged.len() < conditions + 1 {
                return Err(Error::ProbeRejected(format!(
                    "window holds {} charged cells, {} needed",
                    charged.len(),
                    conditions + 1
                )));
            }
            // One solve per charged cell: (Av) = ν(u) on that cell only.
            let mut basis = DMatrix::<f64>::zeros(n, charged.len());
            for (c, &k) in charged.iter().enumerate() {
                let mut f = vec![0.0; len - 1];
                f[k - 1] = nu[node(k)];
                let w = dirichlet_solve(h, &f)?;
                for (j, x) in w.iter().enumerate() {
                    basis[(node(j + 1), c)] = *x;
                }
            }
            let mut cond = DMatrix::<f64>::zeros(conditions, charged.len());
            for c in 0..charged.len() {
                cond[(0, c)] = basis[(node(1), c)];
                cond[(1, c)] = basis[(node(len - 1), c)];
            }
            if volume {
                let gm = area_gradient_raw(h, u.values());
                for c in 0..charged.len() {
                    cond[(2, c)] = (0..n).map(|i| gm[i] * basis[(i, c)]).sum();
                }
            }
            let null = nullspace(&cond);
            if null.ncols() == 0 {
                return Err(Error::ProbeRejected(
                    "boundary conditions admit no nonzero combination".into(),
                ));
            }
            let dirs = orthonormal_columns(&(&basis * &null));
            if dirs.ncols() == 0 {
                return Err(Error::ProbeRejected("degenerate probe basis".into()));
            }
            // Least curvature direction in the admissible span.
            let hess = lagrangian_hessian(u, problem)?;
            let hd = DMatrix::from_fn(n, dirs.ncols(), |i, c| 0.0 * (i + c) as f64);
            let mut hdirs = hd;
            for c in 0..dirs.ncols() {
                let col: Vec<f64> = dirs.column(c).iter().copied().collect();
                let hv = hess(&col);
                for i in 0..n {
                    hdirs[(i, c)] = hv[i];
                }
            }
            let small = dirs.transpose() * hdirs;
            let sym = (&small + small.transpose()) * 0.5;
            let eig = sym.symmetric_eigen();
            let (imin, _) =
                eig.eigenvalues
                    .iter()
                    .enumerate()
                    .fold(
                        (0, f64::INFINITY),
                        |(bi, bv), (i, &x)| if x < bv { (i, x) } else { (bi, bv) },
                    );
            let w = &dirs * eig.eigenvectors.column(imin);
            let scale = w.amax();
            for i in 0..n {
                v[i] = w[i] / scale;
            }
        }
    }

    let (admissible, lambda_used, reason) = admissibility(u, problem, &v, &nu, charged_thr);
    Ok(SecondOrderProbe {
        support_interval: [left, right],
        direction: v,
        construction: spec.pattern(),
        admissible,
        lambda_used,
        reason,
    })
}

fn nullspace(m: &DMatrix<f64>) -> DMatrix<f64> {
    let k = m.ncols();
    let mut padded = DMatrix::<f64>::zeros(k.max(m.nrows()), k);
    padded.rows_mut(0, m.nrows()).copy_from(m);
    let svd = padded.svd(false, true);
    let vt = svd.v_t.expect("requested");
    let smax = svd.singular_values.amax().max(1e-300);
    let cols: Vec<usize> = (0..k)
        .filter(|&i| svd.singular_values[i] <= 1e-12 * smax)
        .collect();
    DMatrix::from_fn(k, cols.len(), |r, c| vt[(cols[c], r)])
}

fn orthonormal_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, false);
    let uu = svd.u.expect("requested");
    let smax = svd.singular_values.amax().max(1e-300);
    let cols: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > 1e-10 * smax)
        .collect();
    DMatrix::from_fn(m.nrows(), cols.len(), |r, c| uu[(r, cols[c])])
}

/// `v ↦ (j'' − μ m'')·v` with μ from the certificate convention.
fn lagrangian_hessian(
    u: &RadialFunction,
    problem: &ProblemSpec,
) -> Result<impl Fn(&[f64]) -> Vec<f64>> {
    let spec = problem.effective_functional();
    let h = u.grid().spacing();
    let hb = assemble(&spec, h, u.values(), true)?
        .hess
        .expect("requested");
    let extra = if problem.regime.is_volume() {
        let mu = recover_multipliers(u, problem)
            .ok()
            .and_then(|c| c.mu())
            .unwrap_or(0.0);
        Some(
            area_hessian_diag_raw(h, u.values())
                .iter()
                .map(|d| -mu * d)
                .collect::<Vec<f64>>(),
        )
    } else {
        None
    };
    Ok(move |v: &[f64]| {
        let mut out = hb.mul_vec(v);
        if let Some(d) = &extra {
            for i in 0..out.len() {
                out[i] += d[i] * v[i];
            }
        }
        out
    })
}

/// Two-sided feasibility of `u ± t·v`, and the volume tangency condition.
fn admissibility(
    u: &RadialFunction,
    problem: &ProblemSpec,
    v: &[f64],
    nu: &[f64],
    charged_thr: f64,
) -> (bool, Option<f64>, Option<String>) {
    let h = u.grid().spacing();
    let vmax = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let av = cell_masses(h, v);
    let avmax = av.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let tiny = 1e-10 * avmax.max(vmax);
    let (lo, hi) = problem.regime.bounds();
    let eps_box = StructureTolerances::default().eps_box(lo, hi);
    let mut t_max = f64::INFINITY;
    for i in 0..v.len() {
        if av[i].abs() > tiny {
            if nu[i] <= charged_thr {
                return (
                    false,
                    None,
                    Some(format!("Av is nonzero on cell {i} where u has no mass")),
                );
            }
            t_max = t_max.min(nu[i] / av[i].abs());
        }
        if v[i].abs() > 1e-12 * vmax {
            let x = u.values()[i];
            if !problem.regime.is_volume() && (x - lo <= eps_box || hi - x <= eps_box) {
                return (
                    false,
                    None,
                    Some(format!("direction moves node {i}, which touches the box")),
                );
            }
            t_max = t_max.min((x - lo).min(hi - x) / v[i].abs());
        }
    }
    if problem.regime.is_volume() {
        let gm = area_gradient_raw(h, u.values());
        let dm: f64 = gm.iter().zip(v).map(|(g, x)| g * x).sum();
        let scale: f64 = gm.iter().zip(v).map(|(g, x)| (g * x).abs()).sum();
        if dm.abs() > 1e-9 * scale.max(1e-300) {
            return (false, None, Some(format!("m'(u)(v) = {dm:e} is not zero")));
        }
    }
    if !(t_max > 0.0) {
        return (
            false,
            None,
            Some("no feasible step along the direction".into()),
        );
    }
    (true, Some(1.0 / t_max), None)
}

/// `j''(u)(v, v)`, minus `μ·m''(u)(v, v)` in the volume regime.
pub fn probe_form(
    u: &RadialFunction,
    problem: &ProblemSpec,
    mu: Option<f64>,
    v: &[f64],
) -> Result<f64> {
    let spec = problem.effective_functional();
    let h = u.grid().spacing();
    let mut form = form_raw(&spec, h, u.values(), v)?;
    if let Some(mu) = mu {
        let d = area_hessian_diag_raw(h, u.values());
        form -= mu * d.iter().zip(v).map(|(d, x)| d * x * x).sum::<f64>();
    }
    Ok(form)
}

/// `ε_soc = 1e−6·(1 + |j_h(u)|)`.
pub fn soc_tolerance(objective: f64) -> f64 {
    1e-6 * (1.0 + objective.abs())
}

/// Evaluates each probe; inadmissible probes are skipped with a reason.
pub fn second_order_check(
    u: &RadialFunction,
    problem: &ProblemSpec,
    cert: &KKTCertificate,
    probes: &[SecondOrderProbe],
) -> Vec<ProbeOutcome> {
    let eps = soc_tolerance(cert.objective);
    probes
        .par_iter()
        .map(|p| {
            let skip = |reason: String| ProbeOutcome {
                window: p.support_interval,
                pattern: p.construction,
                form: None,
                pass: None,
                reason: Some(reason),
            };
            if !p.admissible {
                return skip(p.reason.clone().unwrap_or_else(|| "inadmissible".into()));
            }
            let pairing = stationarity_test(cert, &p.direction);
            let l1: f64 = p.direction.iter().map(|x| x.abs()).sum();
            let tol = l1
                * cert
                    .residuals
                    .stationarity
                    .max(1e-12 * (1.0 + cert.gradient_norm))
                * (1.0 + 1e-9);
            if pairing.abs() > tol {
                return skip(format!("stationarity pairing {pairing:e} exceeds {tol:e}"));
            }
            match probe_form(u, problem, cert.mu(), &p.direction) {
                Ok(form) => ProbeOutcome {
                    window: p.support_interval,
                    pattern: p.construction,
                    form: Some(form),
                    pass: Some(form >= -eps),
                    reason: None,
                },
                Err(e) => skip(e.to_string()),
            }
        })
        .collect()
}

/// Probe placements of the default suite: sine hats on every triple of
/// consecutive corners whose middle corner lies strictly inside the box,
/// and one chi-measure window per corner, grown over the following corners
/// until it holds enough charged cells and bounded by the middles of the
/// adjacent edges.
pub fn default_probe_specs(
    u: &RadialFunction,
    problem: &ProblemSpec,
    structure: &ShapeStructure,
) -> Vec<ProbeSpec> {
    let n = u.len();
    let h = u.grid().spacing();
    let (lo, hi) = problem.regime.bounds();
    let tols = StructureTolerances::default();
    let eps_box = tols.eps_box(lo, hi);
    let interior = |i: usize| {
        let x = u.values()[i];
        x - lo > eps_box && hi - x > eps_box
    };
    let corners = &structure.corners;
    let k = corners.len();
    let mut specs = Vec::new();
    if k >= 3 {
        for c in 0..k {
            let mid = corners[c].peak;
            if !interior(mid) {
                continue;
            }
            specs.push(ProbeSpec::SineHat {
                left: corners[(c + k - 1) % k].peak,
                center: mid,
                right: corners[(c + 1) % k].peak,
            });
        }
    }
    if structure.edges.is_empty() || k == 0 {
        return specs;
    }
    let nu = cell_masses(h, u.values());
    let charged_thr = tols.edge_threshold(h, u.mean());
    let need = if problem.regime.is_volume() { 4 } else { 3 };
    // Middle node of each edge, in angular order.
    let mut mids: Vec<usize> = structure
        .edges
        .iter()
        .map(|&[a, b]| (a + cyclic_len(a, b, n) / 2) % n)
        .collect();
    mids.sort_unstable();
    mids.dedup();
    let m = mids.len();
    for s in 0..m {
        for e in 1..=m {
            let left = mids[s];
            let right = mids[(s + e) % m];
            let len = if e == m {
                n
            } else {
                cyclic_len(left, right, n)
            };
            if len as f64 * h >= PI {
                break;
            }
            let charged = (1..len)
                .filter(|&j| nu[(left + j) % n] > charged_thr)
                .count();
            if charged >= need {
                specs.push(ProbeSpec::ChiMeasure { left, right });
                break;
            }
        }
    }
    specs.sort_by_key(|s| (s.pattern() as u8, s.window()));
    specs.dedup();
    specs
}

/// Outcome of [`verify`].
#[derive(Debug, Clone)]
pub struct Verification {
    pub certificate: KKTCertificate,
    pub structure: ShapeStructure,
    pub probes: Vec<ProbeOutcome>,
    /// First order at `kkt_tol` and every evaluated probe passed.
    pub all_pass: bool,
}

/// Certificate, structure and default second-order suite for `u`.
pub fn verify(u: &RadialFunction, problem: &ProblemSpec, kkt_tol: f64) -> Result<Verification> {
    let certificate = recover_multipliers(u, problem)?;
    let (lo, hi) = problem.regime.bounds();
    let structure = analyze_structure(u, lo, hi, &StructureTolerances::default())?;
    let specs = default_probe_specs(u, problem, &structure);
    let mut built = Vec::new();
    let mut probes = Vec::new();
    for s in &specs {
        match build_probe(u, problem, s) {
            Ok(p) => built.push(p),
            Err(e) => probes.push(ProbeOutcome {
                window: s.window(),
                pattern: s.pattern(),
                form: None,
                pass: None,
                reason: Some(e.to_string()),
            }),
        }
    }
    probes.extend(second_order_check(u, problem, &certificate, &built));
    let all_pass = certificate.converged(kkt_tol) && probes.iter().all(|p| p.pass != Some(false));
    Ok(Verification {
        certificate,
        structure,
        probes,
        all_pass,
    })
}

/// Solve (with `k` multistart replicas when `k > 1`), then verify; a result
/// that is stationary but fails a probe is re-solved from fresh perturbations
/// up to `restarts` times.
pub fn solve_certified(
    problem: &ProblemSpec,
    options: &SolverOptions,
    k: usize,
    restarts: usize,
) -> Result<(SolveResult, Verification)> {
    let mut result = if k > 1 {
        multistart(problem, options, k)?.best
    } else {
        solve(problem, options)?
    };
    let mut check = verify(&result.u_star, problem, options.kkt_tol)?;
    for attempt in 0..restarts {
        let failed = check.probes.iter().any(|p| p.pass == Some(false));
        if !(result.status == Status::Converged && failed) {
            break;
        }
        log::warn!("stationary but not second-order optimal; restarting from a perturbation");
        let amplitude = options.perturbation.max(0.02);
        let u0 = start_point(
            problem,
            options.seed,
            (k.max(1) + attempt) as u64,
            amplitude,
        )?;
        let retry = solve_from(problem, options, &u0, None, &mut |_| {})?;
        if retry.status == Status::Converged {
            let c = verify(&retry.u_star, problem, options.kkt_tol)?;
            let retry_fails = c.probes.iter().any(|p| p.pass == Some(false));
            if !retry_fails || retry.objective < result.objective {
                result = retry;
                check = c;
            }
        }
    }
    Ok((result, check))
}

// ---------------------------------------------------------------------------
// Corner counting

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CornerCountBound {
    /// Minimal angular separation constant `C(G, a, b)`.
    pub c: f64,
    pub bound: usize,
    pub bounds: DerivativeBounds,
}

/// `C = K_pp / (K_up + √(K_up² + K_uu K_pp))`, bound `2⌊2π/C⌋ + 1`.
pub fn corner_count_from(k_uu: f64, k_up: f64, k_pp: f64) -> Option<(f64, usize)> {
    if !(k_pp > 0.0) {
        return None;
    }
    let c = k_pp / (k_up + (k_up * k_up + k_uu * k_pp).sqrt());
    Some((c, 2 * (2.0 * PI / c).floor() as usize + 1))
}

pub fn corner_count_bound(spec: &FunctionalSpec, a: f64, b: f64) -> Result<CornerCountBound> {
    let samples = if spec.theta_independent() { 257 } else { 64 };
    let bounds = derivative_bounds(spec, a, b, samples)?;
    let (c, bound) = corner_count_from(bounds.k_uu, bounds.k_up, bounds.k_pp).ok_or_else(|| {
        Error::NotStronglyConcave(format!(
            "{}: inf(−G_pp) = {} on the annulus, no corner bound",
            spec.name(),
            bounds.k_pp
        ))
    })?;
    Ok(CornerCountBound { c, bound, bounds })
}

/// Replaces the corner at node `peak` by two corners: the shape is cut by
/// the chord joining the boundary points at angles `θ_peak ± offset·h`,
/// where each boundary point lies on the straight edge through the nodes
/// `margin` and `margin + 1` cells away from the corner.
pub fn split_atom(
    u: &RadialFunction,
    peak: usize,
    offset: f64,
    margin: usize,
) -> Result<RadialFunction> {
    let n = u.len();
    let h = u.grid().spacing();
    if !(offset > 0.0) || (margin as f64) <= offset {
        return Err(Error::InvalidProblem(
            "split_atom needs 0 < offset < margin".into(),
        ));
    }
    let vals = u.values();
    let theta = |k: isize| peak as f64 * h + k as f64 * h;
    let at = |k: isize| vals[((peak as isize + k).rem_euclid(n as isize)) as usize];
    // Line u = x cos θ + y sin θ through two (θ, u) samples.
    let line = |t1: f64, u1: f64, t2: f64, u2: f64| {
        let det = t1.cos() * t2.sin() - t2.cos() * t1.sin();
        (
            (u1 * t2.sin() - u2 * t1.sin()) / det,
            (t1.cos() * u2 - t2.cos() * u1) / det,
        )
    };
    let eval = |(x, y): (f64, f64), t: f64| x * t.cos() + y * t.sin();
    let m = margin as isize;
    let left = line(theta(-m - 1), at(-m - 1), theta(-m), at(-m));
    let right = line(theta(m), at(m), theta(m + 1), at(m + 1));
    let t1 = peak as f64 * h - offset * h;
    let t2 = peak as f64 * h + offset * h;
    let chord = line(t1, eval(left, t1), t2, eval(right, t2));
    let out: Vec<f64> = (0..n)
        .map(|i| {
            let d = ((i as isize - peak as isize + n as isize / 2).rem_euclid(n as isize))
                - n as isize / 2;
            if d.abs() <= m {
                vals[i].max(eval(chord, u.grid().node(i)))
            } else {
                vals[i]
            }
        })
        .collect();
    RadialFunction::new(*u.grid(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functional::{builtin, Params};
    use crate::periodic::make_grid;
    use proptest::prelude::*;

    fn annulus(name: &str, n: usize) -> ProblemSpec {
        ProblemSpec::annulus(builtin(name, &Params::new()).unwrap(), 1.0, 2.0, n).unwrap()
    }

    /// Regular polygon with `k` vertices on `r = 1/a_v`, rotated by `phase`.
    fn polygon(n: usize, k: usize, circum_u: f64, phase: f64) -> RadialFunction {
        let d = (PI / k as f64).cos() / circum_u;
        RadialFunction::from_fn(make_grid(n).unwrap(), |t| {
            (0..k)
                .map(|j| (t - phase - (2 * j + 1) as f64 * PI / k as f64).cos() / d)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .unwrap()
    }

    #[test]
    fn circle_certificates() {
        let p = annulus("quad_circle", 64);
        let u = RadialFunction::constant(make_grid(64).unwrap(), 1.5).unwrap();
        let c = recover_multipliers(&u, &p).unwrap();
        assert!(c.residuals.stationarity <= 1e-10);
        assert!(c.zeta.iter().all(|&z| z == 0.0));
        match &c.multipliers {
            Multipliers::Box { mu_a, mu_b } => assert!(mu_a.iter().chain(mu_b).all(|&m| m == 0.0)),
            _ => panic!(),
        }

        let p = annulus("concave_circle_a", 64);
        let u = RadialFunction::constant(make_grid(64).unwrap(), 1.0).unwrap();
        let c = recover_multipliers(&u, &p).unwrap();
        assert!(c.residuals.stationarity <= 1e-8, "{:?}", c.residuals);
        let Multipliers::Box { mu_a, .. } = &c.multipliers else {
            panic!()
        };
        // G = ½(u² + p²) at p = 0: ∇j_i = h·a, carried by μ_a.
        let h = 2.0 * PI / 64.0;
        for m in mu_a {
            assert!((m - h).abs() < 1e-12, "{m}");
        }
    }

    #[test]
    fn volume_circle_certificate() {
        let f = builtin("quad_circle", &Params::new()).unwrap();
        let p = ProblemSpec::volume(f, PI / 2.25, 64).unwrap();
        let u = RadialFunction::constant(make_grid(64).unwrap(), 1.5).unwrap();
        let c = recover_multipliers(&u, &p).unwrap();
        assert!(c.residuals.stationarity <= 1e-8);
        assert!(c.mu().unwrap().abs() < 1e-10);
    }

    #[test]
    fn stationarity_pairing_is_bounded() {
        let p = annulus("concave_circle_a", 64);
        let g = make_grid(64).unwrap();
        let u = RadialFunction::constant(g, 1.0).unwrap();
        let c = recover_multipliers(&u, &p).unwrap();
        let cosv: Vec<f64> = g.nodes().iter().map(|t| t.cos()).collect();
        assert!(stationarity_test(&c, &cosv).abs() <= 64.0 * 1e-8);
    }

    proptest! {
        #[test]
        fn pairing_obeys_holder(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let p = annulus("crouzeix", 64);
            let u = polygon(64, 3, 1.0, 0.1);
            let c = recover_multipliers(&u, &p).unwrap();
            let v: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
            let l1: f64 = v.iter().map(|x: &f64| x.abs()).sum();
            prop_assert!(stationarity_test(&c, &v).abs() <= l1 * c.residuals.stationarity * (1.0 + 1e-9) + 1e-15);
        }
    }

    #[test]
    fn sine_hat_matches_formula() {
        let n = 256;
        let u = polygon(n, 8, 1.0, 0.05);
        let p = annulus("crouzeix", n);
        let s = analyze_structure(&u, 1.0, 2.0, &StructureTolerances::default()).unwrap();
        let c: Vec<usize> = s.corners.iter().map(|c| c.peak).collect();
        let spec = ProbeSpec::SineHat {
            left: c[0],
            center: c[1],
            right: c[2],
        };
        let probe = build_probe(&u, &p, &spec).unwrap();
        let h = 2.0 * PI / n as f64;
        let t1 = cyclic_len(c[0], c[1], n) as f64 * h;
        let t2 = cyclic_len(c[1], c[2], n) as f64 * h;
        assert!((probe.direction[c[1]] - t1.sin() * t2.sin()).abs() < 1e-14);
        assert!(probe.direction.iter().all(|&x| x >= 0.0));
        assert_eq!(probe.direction[c[0]], 0.0);
        // Av lives on the three atoms only.
        let av = cell_masses(h, &probe.direction);
        for (i, x) in av.iter().enumerate() {
            if !c[..3].contains(&i) {
                assert!(x.abs() < 1e-10, "{i}: {x}");
            }
        }
        // Corners sit on u = a, but v vanishes there, so the probe is admissible.
        assert!(probe.admissible, "{:?}", probe.reason);
    }

    #[test]
    fn chi_measure_has_flat_ends() {
        let n = 256;
        // Two corners between nodes, so each spreads over two cells.
        let g = make_grid(n).unwrap();
        let h = g.spacing();
        let base = polygon(n, 3, 1.0, 0.0);
        let s = analyze_structure(&base, 1.0, 2.0, &StructureTolerances::default()).unwrap();
        let u = split_atom(&base, s.corners[0].peak, 6.4, 12).unwrap();
        let p = annulus("crouzeix", n);
        let peak = s.corners[0].peak;
        let spec = ProbeSpec::ChiMeasure {
            left: (peak + n - 20) % n,
            right: (peak + 20) % n,
        };
        let probe = build_probe(&u, &p, &spec).unwrap();
        let v = &probe.direction;
        assert!((v[(peak + n - 19) % n] - v[(peak + n - 20) % n]).abs() / h < 1e-10);
        assert!((v[(peak + 20) % n] - v[(peak + 19) % n]).abs() / h < 1e-10);
        assert!(probe.admissible, "{:?}", probe.reason);
    }

    #[test]
    fn long_windows_are_rejected() {
        let n = 64;
        let u = polygon(n, 3, 1.0, 0.0);
        let p = annulus("crouzeix", n);
        let spec = ProbeSpec::ChiMeasure {
            left: 0,
            right: n / 2 + 1,
        };
        assert!(matches!(
            build_probe(&u, &p, &spec),
            Err(Error::ProbeRejected(_))
        ));
    }

    #[test]
    fn corner_bound_formula() {
        assert_eq!(corner_count_from(1.0, 0.0, 1.0), Some((1.0, 13)));
        assert_eq!(corner_count_from(1.0, 0.0, -0.5), None);
        let mut last = 0;
        for k_up in [0.0, 0.5, 1.0, 2.0, 8.0] {
            let (_, b) = corner_count_from(1.0, k_up, 1.0).unwrap();
            assert!(b >= last);
            last = b;
        }
        let f = builtin("concave_circle_a", &Params::new()).unwrap();
        let b = corner_count_bound(&f, 1.0, 2.0).unwrap();
        assert_eq!(b.bound, 13);
        let q = builtin("quad_circle", &Params::new()).unwrap();
        assert!(matches!(
            corner_count_bound(&q, 1.0, 2.0),
            Err(Error::NotStronglyConcave(_))
        ));
    }

    #[test]
    fn convex_integrand_probes_are_positive() {
        let n = 256;
        let u = polygon(n, 5, 1.2, 0.3);
        let p = annulus("quad_circle", n);
        let s = analyze_structure(&u, 1.0, 2.0, &StructureTolerances::default()).unwrap();
        let c: Vec<usize> = s.corners.iter().map(|c| c.peak).collect();
        let probe = build_probe(
            &u,
            &p,
            &ProbeSpec::SineHat {
                left: c[0],
                center: c[1],
                right: c[2],
            },
        )
        .unwrap();
        assert!(probe_form(&u, &p, None, &probe.direction).unwrap() > 0.0);
    }
}
