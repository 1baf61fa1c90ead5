//! Minimization of `j_h` over convex shapes: `ν(u) ≥ 0` together with the box
//! `lo ≤ u ≤ hi` (the annulus, or the volume safeguard) and, in the volume
//! regime, `m_h(u) = m0`.
//!
//! The method is a primal-dual log-barrier continuation. Each Newton system
//! `H_j + Aᵀ D_ν A + D_box (+ τI)` is cyclic pentadiagonal and factored in
//! O(N). The volume equality is handled by an outer augmented-Lagrangian
//! loop whose rank-one penalty Hessian enters through Sherman–Morrison.
//! After continuation an active-set polish solves the equality-constrained
//! problem on the detected face exactly.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Dyn, PermutationSequence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::certificate::recover_multipliers;
use crate::error::{Error, Result};
use crate::functional::{assemble, value_raw, FunctionalSpec};
use crate::geometry::{area_gradient_raw, area_hessian_diag_raw, area_raw};
use crate::linalg::CyclicBanded;
use crate::periodic::{cell_masses, check_feasibility, PeriodicGrid, RadialFunction};
use crate::problem::{ProblemSpec, Regime};

/// Largest Hessian shift before a Newton system is declared degenerate.
pub const TAU_MAX: f64 = 1e8;

/// Tuning knobs of [`solve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// Target for the scaled KKT residual of the final point.
    pub kkt_tol: f64,
    /// Maximum number of barrier stages per continuation.
    pub max_outer: usize,
    /// Initial barrier weight; `None` means `1e-2·|j(u0)| + 1e-2`.
    pub barrier_start: Option<f64>,
    pub barrier_shrink: f64,
    /// Smallest barrier weight of the continuation.
    pub barrier_min: f64,
    /// Newton iterations allowed per barrier stage.
    pub max_newton: usize,
    pub polish: bool,
    /// Seed of the smooth start perturbation.
    pub seed: u64,
    /// Relative amplitude of the start perturbation (0 keeps the constant).
    pub perturbation: f64,
    pub eps_feas: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            kkt_tol: 1e-8,
            max_outer: 60,
            barrier_start: None,
            barrier_shrink: 0.2,
            barrier_min: 1e-9,
            max_newton: 200,
            polish: true,
            seed: 0,
            perturbation: 0.02,
            eps_feas: crate::periodic::EPS_FEAS,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.kkt_tol > 0.0) {
            return Err(Error::InvalidProblem("solver.kkt_tol must be > 0".into()));
        }
        if !(self.barrier_shrink > 0.0 && self.barrier_shrink < 1.0) {
            return Err(Error::InvalidProblem(
                "solver.barrier_shrink must lie in (0, 1)".into(),
            ));
        }
        if !(self.barrier_min > 0.0) {
            return Err(Error::InvalidProblem(
                "solver.barrier_min must be > 0".into(),
            ));
        }
        if let Some(s) = self.barrier_start {
            if !(s > 0.0) {
                return Err(Error::InvalidProblem(
                    "solver.barrier_start must be > 0".into(),
                ));
            }
        }
        if !(0.0..=4.0).contains(&self.perturbation) {
            return Err(Error::InvalidProblem(
                "solver.perturbation must lie in [0, 4]".into(),
            ));
        }
        if self.max_outer == 0 || self.max_newton == 0 {
            return Err(Error::InvalidProblem(
                "solver iteration limits must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Converged,
    MaxIterations,
    Infeasible,
    Degenerate,
}

impl std::fmt::Display for Status {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

/// End-of-stage record of the continuation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub sigma: f64,
    pub objective: f64,
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub u_star: RadialFunction,
    /// `j_h(u_star)` of the problem's functional (without cutoff).
    pub objective: f64,
    pub status: Status,
    /// Total Newton iterations.
    pub iterations: usize,
    pub kkt_residual_final: f64,
    pub history: Vec<HistoryEntry>,
    /// Whether the active-set polish replaced the barrier solution.
    pub polished: bool,
    /// Volume regime: nodes touching the safeguard box.
    pub safeguard_contacts: usize,
    pub message: Option<String>,
}

/// Minimizes the problem from the (perturbed) constant start.
pub fn solve(problem: &ProblemSpec, options: &SolverOptions) -> Result<SolveResult> {
    solve_observed(problem, options, &mut |_| {})
}

/// As [`solve`], calling `observer` with every accepted iterate.
pub fn solve_observed(
    problem: &ProblemSpec,
    options: &SolverOptions,
    observer: &mut dyn FnMut(&[f64]),
) -> Result<SolveResult> {
    problem.validate()?;
    options.validate()?;
    let u0 = start_point(problem, options.seed, 0, options.perturbation)?;
    solve_from(problem, options, &u0, None, observer)
}

/// Runs the continuation from `u0`, which is first made strictly feasible.
/// `sigma_start` overrides the initial barrier weight (used for warm starts).
pub fn solve_from(
    problem: &ProblemSpec,
    options: &SolverOptions,
    u0: &RadialFunction,
    sigma_start: Option<f64>,
    observer: &mut dyn FnMut(&[f64]),
) -> Result<SolveResult> {
    problem.validate()?;
    options.validate()?;
    let grid = problem.grid()?;
    if u0.len() != grid.n_points() {
        return Err(Error::LengthMismatch {
            expected: grid.n_points(),
            got: u0.len(),
        });
    }
    let spec = problem.effective_functional();
    let (lo, hi) = problem.regime.bounds();
    let mut u = strictly_interior(problem, u0.values().to_vec(), 1e-3);
    observer(&u);

    let mut ctx = Barrier::new(&spec, grid, lo, hi);
    if let Regime::Volume { m0, .. } = problem.regime {
        let scale = 1.0 + value_raw(&spec, ctx.h, &u)?.abs();
        ctx.volume = Some(VolumeTerms {
            m0,
            lambda: 0.0,
            rho: 10.0 * scale / (m0 * m0),
        });
    }

    let j0 = value_raw(&spec, ctx.h, &u)?;
    let sigma0 =
        sigma_start.unwrap_or_else(|| options.barrier_start.unwrap_or(1e-2 * j0.abs() + 1e-2));
    let mut duals = Duals::central(&ctx, &u, sigma0);
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut status = Status::Converged;
    let mut message = None;

    let mut run = |ctx: &mut Barrier,
                   u: &mut Vec<f64>,
                   duals: &mut Duals,
                   sigma_first: f64,
                   history: &mut Vec<HistoryEntry>,
                   iterations: &mut usize|
     -> Result<Option<(Status, String)>> {
        let mut sigma = sigma_first;
        for stage in 0..options.max_outer {
            duals.recenter(ctx, u, sigma);
            let outcome = ctx.newton_stage(u, duals, sigma, options.max_newton, observer)?;
            *iterations += outcome.iterations;
            let objective = value_raw(ctx.spec, ctx.h, u)?;
            let residual = ctx.kkt_error(u, duals, 0.0)?;
            history.push(HistoryEntry {
                sigma,
                objective,
                residual,
            });
            log::debug!(
                "{}",
                json!({
                    "stage": stage,
                    "sigma": sigma,
                    "objective": objective,
                    "residual": residual,
                    "newton": outcome.iterations,
                    "tau": outcome.tau,
                    "converged": outcome.converged,
                })
            );
            if let Some(err) = outcome.degenerate {
                return Ok(Some((Status::Degenerate, err)));
            }
            if sigma <= options.barrier_min {
                return Ok(None);
            }
            sigma = (options.barrier_shrink * sigma).max(options.barrier_min);
        }
        Ok(Some((
            Status::MaxIterations,
            format!(
                "barrier continuation did not reach σ = {:e} in {} stages",
                options.barrier_min, options.max_outer
            ),
        )))
    };

    if let Some((s, msg)) = run(
        &mut ctx,
        &mut u,
        &mut duals,
        sigma0,
        &mut history,
        &mut iterations,
    )? {
        status = s;
        message = Some(msg);
    }

    if status == Status::Converged && ctx.volume.is_some() {
        let mut prev_gap = f64::INFINITY;
        for outer in 0..40 {
            let vol = ctx.volume.as_mut().expect("volume regime");
            let m = area_raw(ctx.h, &u);
            let gap = m - vol.m0;
            log::debug!(
                "{}",
                json!({"augmented_lagrangian": outer, "gap": gap, "lambda": vol.lambda, "rho": vol.rho})
            );
            if gap.abs() <= 1e-12 * vol.m0 {
                break;
            }
            vol.lambda -= vol.rho * gap;
            if gap.abs() > 0.25 * prev_gap {
                vol.rho *= 10.0;
            }
            prev_gap = gap.abs();
            let warm = (options.barrier_min * 1e3).max(options.barrier_min);
            if let Some((s, msg)) = run(
                &mut ctx,
                &mut u,
                &mut duals,
                warm,
                &mut history,
                &mut iterations,
            )? {
                status = s;
                message = Some(msg);
                break;
            }
        }
    }

    let mut result_u = RadialFunction::new(grid, u.clone())?;
    let mut polished = false;
    let mut known_kkt = None;
    if options.polish && status != Status::Degenerate {
        let mu_hint = ctx.volume.map(|v| v.mu(area_raw(ctx.h, &u)));
        if let Some(p) = polish(problem, &spec, &u, &duals, &ctx, mu_hint, options) {
            let cand = RadialFunction::new(grid, p)?;
            let after = kkt_residual(&cand, problem);
            // The certificate fit on a barrier iterate is the costly one; skip
            // it when the polished point already certifies.
            let before = if after <= options.kkt_tol {
                f64::INFINITY
            } else {
                kkt_residual(&result_u, problem)
            };
            let jb = value_raw(&spec, ctx.h, &u)?;
            let ja = value_raw(&spec, ctx.h, cand.values())?;
            let feasible = check_feasibility(&cand, problem, options.eps_feas).feasible;
            log::debug!(
                "{}",
                json!({"polish": true, "kkt_before": before, "kkt_after": after, "j_before": jb, "j_after": ja, "feasible": feasible})
            );
            if feasible
                && after <= before.max(options.kkt_tol)
                && ja <= jb + 1e-8 * (1.0 + jb.abs())
            {
                observer(cand.values());
                result_u = cand;
                polished = true;
                known_kkt = Some(after);
            }
        }
    }

    finish(
        problem, options, result_u, status, iterations, history, polished, known_kkt, message,
    )
}

#[allow(clippy::too_many_arguments)]
fn finish(
    problem: &ProblemSpec,
    options: &SolverOptions,
    u: RadialFunction,
    mut status: Status,
    iterations: usize,
    history: Vec<HistoryEntry>,
    polished: bool,
    known_kkt: Option<f64>,
    mut message: Option<String>,
) -> Result<SolveResult> {
    let objective = value_raw(&problem.functional, u.grid().spacing(), u.values())?;
    let kkt = known_kkt.unwrap_or_else(|| kkt_residual(&u, problem));
    let feas = check_feasibility(&u, problem, options.eps_feas);
    if status == Status::Converged {
        if !feas.feasible {
            status = Status::MaxIterations;
            message = Some(format!(
                "final point infeasible (min ν = {:e}, box violation {:e}, volume gap {:?})",
                feas.min_cone_mass, feas.box_violation, feas.volume_gap
            ));
        } else if !(kkt <= options.kkt_tol) {
            status = Status::MaxIterations;
            message = Some(format!(
                "KKT residual {kkt:e} above tolerance {:e}",
                options.kkt_tol
            ));
        }
    }
    let safeguard_contacts = match problem.regime {
        Regime::Volume { u_lo, u_hi, .. } => {
            let eps = 1e-6 * (u_hi - u_lo);
            u.values()
                .iter()
                .filter(|&&v| v - u_lo <= eps || u_hi - v <= eps)
                .count()
        }
        Regime::Annulus { .. } => 0,
    };
    if safeguard_contacts > 0 {
        log::warn!("{safeguard_contacts} nodes touch the volume safeguard box; the continuous problem may have no minimizer");
    }
    Ok(SolveResult {
        u_star: u,
        objective,
        status,
        iterations,
        kkt_residual_final: kkt,
        history,
        polished,
        safeguard_contacts,
        message,
    })
}

/// Scaled KKT residual of the recovered certificate (infinite if recovery
/// fails).
fn kkt_residual(u: &RadialFunction, problem: &ProblemSpec) -> f64 {
    recover_multipliers(u, problem)
        .map(|c| c.kkt_residual())
        .unwrap_or(f64::INFINITY)
}

/// `(∇j, ∇ of the inner objective, banded Hessian, rank-one volume term)`.
type InnerDerivatives = (
    Vec<f64>,
    Vec<f64>,
    Option<CyclicBanded>,
    Option<(f64, Vec<f64>)>,
);

#[derive(Debug, Clone, Copy)]
struct VolumeTerms {
    m0: f64,
    lambda: f64,
    rho: f64,
}

impl VolumeTerms {
    /// Multiplier of `m` in the convention `∇j − Aᵀζ − μ∇m = 0`.
    fn mu(&self, m: f64) -> f64 {
        self.lambda - self.rho * (m - self.m0)
    }
}

struct Barrier<'a> {
    spec: &'a FunctionalSpec,
    h: f64,
    n: usize,
    lo: f64,
    hi: f64,
    volume: Option<VolumeTerms>,
    tau_last: f64,
}

/// Dual estimates for `ν ≥ 0`, `u ≥ lo`, `u ≤ hi`.
#[derive(Debug, Clone)]
struct Duals {
    nu: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

struct Slacks {
    nu: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Slacks {
    fn positive(&self) -> bool {
        self.nu
            .iter()
            .chain(&self.lo)
            .chain(&self.hi)
            .all(|&s| s > 0.0)
    }
}

struct StageOutcome {
    iterations: usize,
    converged: bool,
    tau: f64,
    degenerate: Option<String>,
}

const KAPPA_SIGMA: f64 = 1e10;

impl Duals {
    fn central(ctx: &Barrier, u: &[f64], sigma: f64) -> Self {
        let s = ctx.slacks(u);
        Duals {
            nu: s.nu.iter().map(|x| sigma / x).collect(),
            lo: s.lo.iter().map(|x| sigma / x).collect(),
            hi: s.hi.iter().map(|x| sigma / x).collect(),
        }
    }

    /// Keeps `z·s` within `[σ/κ, κσ]`.
    fn recenter(&mut self, ctx: &Barrier, u: &[f64], sigma: f64) {
        let s = ctx.slacks(u);
        for (z, s) in [
            (&mut self.nu, &s.nu),
            (&mut self.lo, &s.lo),
            (&mut self.hi, &s.hi),
        ] {
            for (zi, si) in z.iter_mut().zip(s) {
                *zi = zi.clamp(sigma / (KAPPA_SIGMA * si), KAPPA_SIGMA * sigma / si);
            }
        }
    }
}

impl<'a> Barrier<'a> {
    fn new(spec: &'a FunctionalSpec, grid: PeriodicGrid, lo: f64, hi: f64) -> Self {
        Barrier {
            spec,
            h: grid.spacing(),
            n: grid.n_points(),
            lo,
            hi,
            volume: None,
            tau_last: 0.0,
        }
    }

    fn slacks(&self, u: &[f64]) -> Slacks {
        Slacks {
            nu: cell_masses(self.h, u),
            lo: u.iter().map(|v| v - self.lo).collect(),
            hi: u.iter().map(|v| self.hi - v).collect(),
        }
    }

    /// Objective of the inner problem: `j` plus the augmented-Lagrangian
    /// terms in the volume regime.
    fn objective(&self, u: &[f64]) -> Result<f64> {
        let mut f = value_raw(self.spec, self.h, u)?;
        if let Some(v) = self.volume {
            let c = area_raw(self.h, u) - v.m0;
            f += -v.lambda * c + 0.5 * v.rho * c * c;
        }
        Ok(f)
    }

    fn merit(&self, u: &[f64], sigma: f64) -> Result<Option<f64>> {
        let s = self.slacks(u);
        if !s.positive() {
            return Ok(None);
        }
        let logs: f64 = s.nu.iter().chain(&s.lo).chain(&s.hi).map(|x| x.ln()).sum();
        Ok(Some(self.objective(u)? - sigma * logs))
    }

    /// Gradient of the inner objective and, on request, its Hessian split
    /// into a banded part and a rank-one volume term `ρ∇m∇mᵀ`.
    fn derivatives(&self, u: &[f64], with_hessian: bool) -> Result<InnerDerivatives> {
        let asm = assemble(self.spec, self.h, u, with_hessian)?;
        let grad_j = asm.grad.clone();
        let mut grad = asm.grad;
        let mut hess = asm.hess;
        let mut rank_one = None;
        if let Some(v) = self.volume {
            let m = area_raw(self.h, u);
            let mu = v.mu(m);
            let gm = area_gradient_raw(self.h, u);
            for (g, d) in grad.iter_mut().zip(&gm) {
                *g -= mu * d;
            }
            if let Some(hm) = hess.as_mut() {
                let diag: Vec<f64> = area_hessian_diag_raw(self.h, u)
                    .iter()
                    .map(|d| -mu * d)
                    .collect();
                hm.add_diagonal(&diag);
                rank_one = Some((v.rho, gm));
            }
        }
        Ok((grad, grad_j, hess, rank_one))
    }

    /// Scaled KKT error of the barrier problem with weight `sigma`.
    fn kkt_error(&self, u: &[f64], z: &Duals, sigma: f64) -> Result<f64> {
        let (grad, grad_j, _, _) = self.derivatives(u, false)?;
        let az = cell_masses(self.h, &z.nu);
        let scale = 1.0 + grad_j.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let mut stat: f64 = 0.0;
        for i in 0..self.n {
            stat = stat.max((grad[i] - az[i] - z.lo[i] + z.hi[i]).abs());
        }
        let s = self.slacks(u);
        let mut comp: f64 = 0.0;
        for (zz, ss) in [(&z.nu, &s.nu), (&z.lo, &s.lo), (&z.hi, &s.hi)] {
            for (zi, si) in zz.iter().zip(ss) {
                comp = comp.max((zi * si - sigma).abs());
            }
        }
        Ok((stat / scale).max(comp))
    }

    fn newton_stage(
        &mut self,
        u: &mut Vec<f64>,
        z: &mut Duals,
        sigma: f64,
        max_newton: usize,
        observer: &mut dyn FnMut(&[f64]),
    ) -> Result<StageOutcome> {
        let n = self.n;
        let tol = (10.0 * sigma).max(1e-14);
        let mut iterations = 0;
        let mut tau = 0.0;
        while iterations < max_newton {
            if self.kkt_error(u, z, sigma)? <= tol {
                return Ok(StageOutcome {
                    iterations,
                    converged: true,
                    tau,
                    degenerate: None,
                });
            }
            iterations += 1;
            let s = self.slacks(u);
            let (grad, _, hess, rank_one) = self.derivatives(u, true)?;
            let hess = hess.expect("requested");

            // Barrier gradient and the primal-dual Newton matrix.
            let w_nu: Vec<f64> = s.nu.iter().map(|x| sigma / x).collect();
            let a_w = cell_masses(self.h, &w_nu);
            let mut bgrad = vec![0.0; n];
            for i in 0..n {
                bgrad[i] = grad[i] - a_w[i] - sigma / s.lo[i] + sigma / s.hi[i];
            }
            let mut m = hess.plus(&weighted_gram(
                self.h,
                &z.nu
                    .iter()
                    .zip(&s.nu)
                    .map(|(z, s)| z / s)
                    .collect::<Vec<_>>(),
            ));
            let dbox: Vec<f64> = (0..n)
                .map(|i| z.lo[i] / s.lo[i] + z.hi[i] / s.hi[i])
                .collect();
            m.add_diagonal(&dbox);

            let rhs: Vec<f64> = bgrad.iter().map(|g| -g).collect();
            let max_diag = m
                .diagonal()
                .iter()
                .fold(0.0f64, |a, d| a.max(d.abs()))
                .max(1.0);
            tau = if self.tau_last > 0.0 {
                (self.tau_last / 4.0).max(1e-12 * max_diag)
            } else {
                0.0
            };
            let (du, used_tau) = loop {
                let mut shifted = m.clone();
                if tau > 0.0 {
                    shifted.shift(tau);
                }
                if let Some(chol) = shifted.cholesky() {
                    let du = match &rank_one {
                        Some((rho, v)) => chol.solve_rank_one(*rho, v, &rhs),
                        None => chol.solve(&rhs),
                    };
                    if du.iter().all(|x| x.is_finite()) {
                        break (du, tau);
                    }
                }
                tau = if tau == 0.0 {
                    1e-10 * max_diag
                } else {
                    8.0 * tau
                };
                if tau > TAU_MAX {
                    return Ok(StageOutcome {
                        iterations,
                        converged: false,
                        tau,
                        degenerate: Some(format!(
                            "Newton regularization exceeded τ_max = {TAU_MAX:e}"
                        )),
                    });
                }
            };
            self.tau_last = used_tau;

            // Fraction to the boundary on the primal slacks.
            let ds_nu = cell_masses(self.h, &du);
            let fb = (1.0 - sigma).max(0.99);
            let mut alpha_max: f64 = 1.0;
            for i in 0..n {
                for (si, dsi) in [(s.nu[i], ds_nu[i]), (s.lo[i], du[i]), (s.hi[i], -du[i])] {
                    if dsi < 0.0 {
                        alpha_max = alpha_max.min(-fb * si / dsi);
                    }
                }
            }

            let phi0 = self.merit(u, sigma)?.expect("iterate is interior");
            let slope: f64 = bgrad.iter().zip(&du).map(|(g, d)| g * d).sum();
            let mut alpha = alpha_max;
            let accepted = loop {
                let trial: Vec<f64> = u.iter().zip(&du).map(|(a, d)| a + alpha * d).collect();
                if let Some(phi) = self.merit(&trial, sigma)? {
                    let flat = slope.abs() <= 1e-14 * (1.0 + phi0.abs());
                    if phi <= phi0 + 1e-4 * alpha * slope
                        || (flat && phi <= phi0 + 1e-13 * (1.0 + phi0.abs()))
                    {
                        break Some(trial);
                    }
                }
                alpha *= 0.5;
                if alpha < 1e-14 {
                    break None;
                }
            };
            let Some(trial) = accepted else {
                // No progress along this direction: stiffen the model.
                self.tau_last = (self.tau_last * 100.0).max(1e-6 * max_diag);
                if self.tau_last > TAU_MAX {
                    return Ok(StageOutcome {
                        iterations,
                        converged: false,
                        tau: self.tau_last,
                        degenerate: None,
                    });
                }
                continue;
            };

            // Dual step with its own fraction to the boundary.
            let mut dz = Duals {
                nu: vec![0.0; n],
                lo: vec![0.0; n],
                hi: vec![0.0; n],
            };
            for i in 0..n {
                dz.nu[i] = sigma / s.nu[i] - z.nu[i] - z.nu[i] / s.nu[i] * ds_nu[i];
                dz.lo[i] = sigma / s.lo[i] - z.lo[i] - z.lo[i] / s.lo[i] * du[i];
                dz.hi[i] = sigma / s.hi[i] - z.hi[i] + z.hi[i] / s.hi[i] * du[i];
            }
            let mut alpha_z: f64 = 1.0;
            for (zz, dd) in [(&z.nu, &dz.nu), (&z.lo, &dz.lo), (&z.hi, &dz.hi)] {
                for (zi, di) in zz.iter().zip(dd) {
                    if *di < 0.0 {
                        alpha_z = alpha_z.min(-fb * zi / di);
                    }
                }
            }
            for (zz, dd) in [
                (&mut z.nu, &dz.nu),
                (&mut z.lo, &dz.lo),
                (&mut z.hi, &dz.hi),
            ] {
                for (zi, di) in zz.iter_mut().zip(dd) {
                    *zi += alpha_z * di;
                }
            }
            log::trace!(
                "{}",
                json!({"sigma": sigma, "alpha": alpha, "alpha_max": alpha_max, "alpha_z": alpha_z, "tau": used_tau, "slope": slope})
            );
            *u = trial;
            z.recenter(self, u, sigma);
            observer(u);
        }
        Ok(StageOutcome {
            iterations,
            converged: false,
            tau,
            degenerate: None,
        })
    }
}

/// `Aᵀ diag(d) A` for the convexity operator (symmetric, so `Aᵀ = A`).
fn weighted_gram(h: f64, d: &[f64]) -> CyclicBanded {
    let n = d.len();
    let diag = h - 2.0 / h;
    let off = 1.0 / h;
    let mut m = CyclicBanded::zeros(n, 2);
    // Row k of A has entries off at k−1, k+1 and diag at k.
    for k in 0..n {
        let w = d[k];
        let km = (k + n - 1) % n;
        m.add(km, 0, w * off * off);
        m.add(k, 0, w * diag * diag);
        m.add((k + 1) % n, 0, w * off * off);
        m.add(km, 1, w * off * diag);
        m.add(k, 1, w * diag * off);
        m.add(km, 2, w * off * off);
    }
    m
}

/// Pushes `u` strictly inside the feasible set by mixing with the center
/// constant; `u` is first rescaled below `hi` and lifted above `lo` (both
/// operations preserve `ν ≥ 0`).
fn strictly_interior(problem: &ProblemSpec, mut u: Vec<f64>, min_mix: f64) -> Vec<f64> {
    let (lo, hi) = problem.regime.bounds();
    let c = problem.regime.center();
    let h = 2.0 * PI / u.len() as f64;
    let umax = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if umax > hi {
        let s = hi / umax;
        u.iter_mut().for_each(|v| *v *= s);
    }
    u.iter_mut().for_each(|v| *v = v.max(lo));
    let mut t = min_mix;
    loop {
        let w: Vec<f64> = u.iter().map(|v| (1.0 - t) * v + t * c).collect();
        let nu_ok = cell_masses(h, &w).iter().all(|&m| m > 0.0);
        let box_ok = w.iter().all(|&v| v > lo && v < hi);
        if nu_ok && box_ok || t >= 1.0 {
            return w;
        }
        t = (2.0 * t).min(1.0);
    }
}

/// Smooth perturbation `c·(1 + ε Σ_{k=2..6} (α_k cos kθ + β_k sin kθ)/k²)`
/// of the center constant, reproducible from `(seed, replica)` and
/// independent of the grid size, made feasible by projection.
pub fn start_point(
    problem: &ProblemSpec,
    seed: u64,
    replica: u64,
    amplitude: f64,
) -> Result<RadialFunction> {
    let grid = problem.grid()?;
    let c = problem.regime.center();
    if amplitude == 0.0 {
        return RadialFunction::constant(grid, c);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replica);
    let modes: Vec<(f64, f64, f64)> = (2..=6)
        .map(|k| {
            (
                k as f64,
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
        })
        .collect();
    let vals: Vec<f64> = grid
        .nodes()
        .iter()
        .map(|t| {
            let s: f64 = modes
                .iter()
                .map(|(k, a, b)| (a * (k * t).cos() + b * (k * t).sin()) / (k * k))
                .sum();
            c * (1.0 + amplitude * s)
        })
        .collect();
    let u = RadialFunction::new(grid, vals)?;
    let mut v = project_cone_box(&u, problem.regime.bounds());
    if let Regime::Volume { m0, .. } = problem.regime {
        let s = (area_raw(grid.spacing(), &v) / m0).sqrt();
        v.iter_mut().for_each(|x| *x *= s);
    }
    RadialFunction::new(grid, strictly_interior(problem, v, 1e-3))
}

/// Euclidean projection onto `{ν(v) ≥ 0, a ≤ v ≤ b}` by Hildreth's dual
/// coordinate ascent, finished by a convex combination with the center
/// constant so the result is exactly feasible.
pub fn project_feasible(u: &RadialFunction, problem: &ProblemSpec) -> Result<RadialFunction> {
    let (lo, hi) = problem.regime.bounds();
    let v = project_cone_box(u, (lo, hi));
    RadialFunction::new(*u.grid(), v)
}

fn project_cone_box(u: &RadialFunction, (lo, hi): (f64, f64)) -> Vec<f64> {
    let h = u.grid().spacing();
    let n = u.len();
    let mut v = u.values().to_vec();
    let feasible = |v: &[f64]| {
        cell_masses(h, v).iter().all(|&m| m >= 0.0) && v.iter().all(|&x| x >= lo && x <= hi)
    };
    if feasible(&v) {
        return v;
    }
    let diag = h - 2.0 / h;
    let off = 1.0 / h;
    let row_norm2 = diag * diag + 2.0 * off * off;
    let mut lam_nu = vec![0.0; n];
    let mut lam_lo = vec![0.0; n];
    let mut lam_hi = vec![0.0; n];
    let scale = u
        .values()
        .iter()
        .fold(0.0f64, |m, x| m.max(x.abs()))
        .max(hi);
    for _sweep in 0..20_000 {
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let im = (i + n - 1) % n;
            let ip = (i + 1) % n;
            let r = off * (v[im] + v[ip]) + diag * v[i];
            worst = worst.max(-r * h);
            let new = (lam_nu[i] - r / row_norm2).max(0.0);
            let d = new - lam_nu[i];
            if d != 0.0 {
                lam_nu[i] = new;
                v[im] += d * off;
                v[ip] += d * off;
                v[i] += d * diag;
            }
        }
        for i in 0..n {
            let r = v[i] - lo;
            worst = worst.max(-r);
            let new = (lam_lo[i] - r).max(0.0);
            v[i] += new - lam_lo[i];
            lam_lo[i] = new;
            let r = hi - v[i];
            worst = worst.max(-r);
            let new = (lam_hi[i] - r).max(0.0);
            v[i] -= new - lam_hi[i];
            lam_hi[i] = new;
        }
        if worst <= 1e-13 * scale {
            break;
        }
    }
    // Exact feasibility by mixing with the constant (a + b)/2.
    let c = 0.5 * (lo + hi);
    let mut t: f64 = 0.0;
    loop {
        let w: Vec<f64> = v.iter().map(|x| (1.0 - t) * x + t * c).collect();
        if feasible(&w) {
            return w;
        }
        t = if t == 0.0 { 1e-12 } else { (4.0 * t).min(1.0) };
    }
}

/// Prolongs a solution to a grid twice as fine. New nodes take the value of
/// the straight chord between neighbours, `(u_i + u_{i+1}) / (2 cos(h/2))`,
/// so edges stay straight.
pub fn prolong(u: &RadialFunction) -> Result<RadialFunction> {
    let n = u.len();
    let h = u.grid().spacing();
    let v = u.values();
    let c = (0.5 * h).cos();
    let mut out = Vec::with_capacity(2 * n);
    for i in 0..n {
        out.push(v[i]);
        out.push((v[i] + v[(i + 1) % n]) / (2.0 * c));
    }
    RadialFunction::new(PeriodicGrid::new(2 * n)?, out)
}

/// Re-solves `problem` (on its own grid) warm-started from a coarser
/// solution, prolonged as often as needed.
pub fn refine(
    problem: &ProblemSpec,
    coarse: &RadialFunction,
    options: &SolverOptions,
) -> Result<SolveResult> {
    let mut u = coarse.clone();
    while u.len() < problem.grid_n {
        u = prolong(&u)?;
    }
    if u.len() != problem.grid_n {
        return Err(Error::InvalidProblem(format!(
            "grid {} is not a power-of-two refinement of {}",
            problem.grid_n,
            coarse.len()
        )));
    }
    if options.polish {
        if let Some(r) = refine_on_faces(problem, options, &u)? {
            return Ok(r);
        }
    }
    let sigma = (options.barrier_min * 1e6).min(1e-4);
    solve_from(problem, options, &u, Some(sigma), &mut |_| {})
}

/// Active-set continuation of a prolonged polished solution: the working set
/// is read off the prolonged point (its straight cells), so the
/// face iteration only has to move corners by a cell or two. Returns `None`
/// when the result does not certify, and the caller falls back to the barrier.
fn refine_on_faces(
    problem: &ProblemSpec,
    options: &SolverOptions,
    u: &RadialFunction,
) -> Result<Option<SolveResult>> {
    let spec = problem.effective_functional();
    let h = u.grid().spacing();
    // Prolonging two neighbours on a box circle overshoots it by O(h²).
    let (lo, hi) = problem.regime.bounds();
    let clamped: Vec<f64> = u.values().iter().map(|x| x.clamp(lo, hi)).collect();
    let v = &clamped[..];
    let nu = cell_masses(h, v);
    let straight = 1e-3 * h * u.mean().max(1.0);
    // Box contacts are left to the ratio test: together with the straight
    // cells they can over-determine the face at the finer spacing.
    let active: Vec<Con> = (0..v.len())
        .filter(|&i| nu[i] <= straight)
        .map(Con::Nu)
        .collect();
    let mu_hint = match problem.regime {
        Regime::Volume { .. } => recover_multipliers(u, problem).ok().and_then(|c| c.mu()),
        Regime::Annulus { .. } => None,
    };
    let Some(w) = active_set_solve(problem, &spec, v, active, mu_hint) else {
        log::debug!("{}", json!({"refine": "active-set continuation failed"}));
        return Ok(None);
    };
    let cand = RadialFunction::new(*u.grid(), w)?;
    let res = finish(
        problem,
        options,
        cand,
        Status::Converged,
        0,
        Vec::new(),
        true,
        None,
        None,
    )?;
    if res.status == Status::Converged {
        Ok(Some(res))
    } else {
        log::debug!(
            "{}",
            json!({"refine": "continuation rejected", "reason": res.message})
        );
        Ok(None)
    }
}

/// Outcome of [`multistart`].
#[derive(Debug, Clone)]
pub struct MultistartResult {
    pub best: SolveResult,
    pub best_replica: usize,
    /// Objective of each replica (`None` when it did not converge).
    pub objectives: Vec<Option<f64>>,
    /// `max − min` over converged objectives.
    pub spread: f64,
}

/// Runs `k` solves from independently perturbed starts (replica `r` uses
/// stream `r` of the seed) and keeps the lowest converged objective. The
/// number of worker threads is capped by `CONVEXOPT_THREADS` when set.
pub fn multistart(
    problem: &ProblemSpec,
    options: &SolverOptions,
    k: usize,
) -> Result<MultistartResult> {
    if k == 0 {
        return Err(Error::InvalidProblem("multistart needs k ≥ 1".into()));
    }
    problem.validate()?;
    options.validate()?;
    let amplitude = if options.perturbation > 0.0 {
        options.perturbation
    } else {
        0.02
    };
    let run = || -> Vec<Result<SolveResult>> {
        (0..k)
            .into_par_iter()
            .map(|r| {
                let u0 = start_point(problem, options.seed, r as u64, amplitude)?;
                solve_from(problem, options, &u0, None, &mut |_| {})
            })
            .collect()
    };
    let results = match thread_cap() {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::InvalidProblem(format!("CONVEXOPT_THREADS: {e}")))?
            .install(run),
        None => run(),
    };
    let mut objectives = Vec::with_capacity(k);
    let mut best: Option<(usize, SolveResult)> = None;
    let mut first_err = None;
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(sr) if sr.status == Status::Converged => {
                objectives.push(Some(sr.objective));
                let better = best
                    .as_ref()
                    .is_none_or(|(_, b)| sr.objective < b.objective);
                if better {
                    best = Some((r, sr));
                }
            }
            Ok(sr) => {
                log::info!(
                    "replica {r}: {} ({})",
                    sr.status,
                    sr.message.as_deref().unwrap_or("")
                );
                objectives.push(None);
            }
            Err(e) => {
                log::info!("replica {r}: {e}");
                objectives.push(None);
                first_err.get_or_insert(e);
            }
        }
    }
    let Some((best_replica, best)) = best else {
        return Err(first_err.unwrap_or(Error::AllReplicasFailed(k)));
    };
    let conv: Vec<f64> = objectives.iter().flatten().copied().collect();
    let spread = conv.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - conv.iter().copied().fold(f64::INFINITY, f64::min);
    log::info!(
        "multistart: {} of {k} converged, objective spread {spread:e}",
        conv.len()
    );
    Ok(MultistartResult {
        best,
        best_replica,
        objectives,
        spread,
    })
}

fn thread_cap() -> Option<usize> {
    std::env::var("CONVEXOPT_THREADS")
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&t| t > 0)
}

// ---------------------------------------------------------------------------
// Active-set polish

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Con {
    Nu(usize),
    Lo(usize),
    Hi(usize),
}

fn polish(
    problem: &ProblemSpec,
    spec: &FunctionalSpec,
    u: &[f64],
    z: &Duals,
    ctx: &Barrier,
    mu_hint: Option<f64>,
    options: &SolverOptions,
) -> Option<Vec<f64>> {
    let n = u.len();
    let h = ctx.h;
    let s = ctx.slacks(u);
    let root = options.barrier_min.sqrt();
    let nu_scale = h * (ctx.lo + ctx.hi) * 0.5;
    let box_scale = ctx.hi - ctx.lo;
    let mut active: Vec<Con> = Vec::new();
    for i in 0..n {
        if s.nu[i] <= root * nu_scale
            && z.nu[i] * s.nu[i] <= s.nu[i] * s.nu[i] + z.nu[i] * z.nu[i]
            && (s.nu[i] < z.nu[i] || s.nu[i] <= 1e-3 * root * nu_scale)
        {
            active.push(Con::Nu(i));
        }
        if s.lo[i] <= root * box_scale && s.lo[i] < z.lo[i].max(1e-3 * root * box_scale) {
            active.push(Con::Lo(i));
        }
        if s.hi[i] <= root * box_scale && s.hi[i] < z.hi[i].max(1e-3 * root * box_scale) {
            active.push(Con::Hi(i));
        }
    }
    active_set_solve(problem, spec, u, active, mu_hint)
}

/// Primal active-set iteration from the working set `active`: Newton on the
/// face, release the most wrong-signed multiplier, add blocking constraints.
fn active_set_solve(
    problem: &ProblemSpec,
    spec: &FunctionalSpec,
    u: &[f64],
    mut active: Vec<Con>,
    mu_hint: Option<f64>,
) -> Option<Vec<f64>> {
    let n = u.len();
    let h = 2.0 * PI / n as f64;
    let (lo, hi) = problem.regime.bounds();
    let m0 = match problem.regime {
        Regime::Volume { m0, .. } => Some(m0),
        Regime::Annulus { .. } => None,
    };
    let mut v = u.to_vec();
    let mut mu = mu_hint.unwrap_or(0.0);
    for _round in 0..16 + n / 8 {
        active.sort();
        active.dedup();
        match newton_on_face(spec, h, &v, &active, lo, hi, m0, &mut mu) {
            FaceResult::Done(w, mult) => {
                // Drop the constraint with the most wrong-signed multiplier.
                let gnorm = assemble(spec, h, &w, false)
                    .ok()?
                    .grad
                    .iter()
                    .fold(0.0f64, |m, g| m.max(g.abs()));
                let tol = 1e-10 * (1.0 + gnorm);
                let mut worst: Option<(usize, f64)> = None;
                for (k, c) in active.iter().enumerate() {
                    let signed = match c {
                        Con::Nu(_) | Con::Lo(_) => mult[k],
                        Con::Hi(_) => -mult[k],
                    };
                    if signed < -tol && worst.is_none_or(|(_, w)| signed < w) {
                        worst = Some((k, signed));
                    }
                }
                match worst {
                    Some((k, m)) => {
                        log::debug!(
                            "{}",
                            json!({"polish": "release", "constraint": format!("{:?}", active[k]), "multiplier": m})
                        );
                        active.remove(k);
                        v = w;
                    }
                    None => {
                        // A start off the feasible set can leave inactive
                        // constraints violated; pin them and keep going.
                        let violated = violated_constraints(h, &w, lo, hi, &active);
                        if violated.is_empty() {
                            return Some(w);
                        }
                        log::debug!(
                            "{}",
                            json!({"polish": "pin violated", "count": violated.len()})
                        );
                        active.extend(violated);
                        v = w;
                    }
                }
            }
            FaceResult::Blocked(w, c) => {
                log::debug!(
                    "{}",
                    json!({"polish": "blocked", "constraint": format!("{c:?}")})
                );
                v = w;
                active.push(c);
            }
            FaceResult::Failed => return None,
        }
    }
    log::debug!("{}", json!({"polish": "active-set rounds exhausted"}));
    None
}

fn violated_constraints(h: f64, v: &[f64], lo: f64, hi: f64, active: &[Con]) -> Vec<Con> {
    let scale = v.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    let tol = 1e-12 * scale;
    let nu = cell_masses(h, v);
    let mut out = Vec::new();
    for (i, (&x, &m)) in v.iter().zip(&nu).enumerate() {
        for (c, s) in [
            (Con::Nu(i), m * h),
            (Con::Lo(i), x - lo),
            (Con::Hi(i), hi - x),
        ] {
            if s < -tol && !active.contains(&c) {
                out.push(c);
            }
        }
    }
    out
}

enum FaceResult {
    Done(Vec<f64>, Vec<f64>),
    Blocked(Vec<f64>, Con),
    Failed,
}

/// Nullspace basis of the active constraint rows `Cᵀ` (columns of `ct`).
struct FaceBasis {
    q1: DMatrix<f64>,
    z: DMatrix<f64>,
    r11: DMatrix<f64>,
    perm: PermutationSequence<Dyn>,
    k: usize,
}

impl FaceBasis {
    /// Column-pivoted QR of the padded `Cᵀ = Q R P`, split into range and
    /// nullspace parts.
    fn new(ct: &DMatrix<f64>, k: usize) -> Self {
        let n = ct.nrows();
        let qr = ct.clone().col_piv_qr();
        let r = qr.r();
        let d = n.min(ct.ncols());
        let rmax = (0..d)
            .map(|j| r[(j, j)].abs())
            .fold(0.0, f64::max)
            .max(1e-300);
        let rank = (0..k.min(d))
            .take_while(|&j| r[(j, j)].abs() > 1e-11 * rmax)
            .count();
        let q = qr.q();
        FaceBasis {
            q1: q.columns(0, rank).into_owned(),
            z: q.columns(rank, n - rank).into_owned(),
            r11: r.view((0, 0), (rank, rank)).into_owned(),
            perm: qr.p().clone(),
            k,
        }
    }

    /// `y` in range(Q1) with `C y = rhs` on the pivot rows.
    fn restore(&self, rhs: &[f64]) -> DVector<f64> {
        let rank = self.q1.ncols();
        let mut pr = DVector::zeros(self.perm_len());
        pr.rows_mut(0, rhs.len()).copy_from_slice(rhs);
        self.perm.permute_rows(&mut pr);
        let mut y = pr.rows(0, rank).into_owned();
        if !self.r11.tr_solve_upper_triangular_mut(&mut y) {
            return DVector::zeros(self.q1.nrows());
        }
        &self.q1 * y
    }

    /// Basic least-squares solution of `Cᵀ λ ≈ g`.
    fn multipliers(&self, g: &[f64]) -> Vec<f64> {
        let rank = self.q1.ncols();
        let mut mu = DVector::zeros(self.perm_len());
        let mut top = self.q1.transpose() * DVector::from_column_slice(g);
        if self.r11.solve_upper_triangular_mut(&mut top) {
            mu.rows_mut(0, rank).copy_from(&top);
        }
        self.perm.inv_permute_rows(&mut mu);
        mu.rows(0, self.k).iter().copied().collect()
    }

    fn perm_len(&self) -> usize {
        self.q1.nrows().max(self.k)
    }
}

/// Newton iteration for `min j` on the face where the `active` constraints
/// hold with equality (plus `m = m0` when given), in a nullspace basis.
/// Negative curvature on the face is followed to the next constraint.
#[allow(clippy::too_many_arguments)]
fn newton_on_face(
    spec: &FunctionalSpec,
    h: f64,
    u: &[f64],
    active: &[Con],
    lo: f64,
    hi: f64,
    m0: Option<f64>,
    mu: &mut f64,
) -> FaceResult {
    let n = u.len();
    let k_lin = active.len();
    let k = k_lin + usize::from(m0.is_some());
    let diag = h - 2.0 / h;
    let off = 1.0 / h;
    let mut ct = DMatrix::<f64>::zeros(n, n.max(k));
    let mut target = vec![0.0; k_lin];
    for (col, c) in active.iter().enumerate() {
        match *c {
            Con::Nu(i) => {
                ct[((i + n - 1) % n, col)] += off;
                ct[(i, col)] += diag;
                ct[((i + 1) % n, col)] += off;
            }
            Con::Lo(i) => {
                ct[(i, col)] = 1.0;
                target[col] = lo;
            }
            Con::Hi(i) => {
                ct[(i, col)] = 1.0;
                target[col] = hi;
            }
        }
    }
    let residual = |v: &[f64]| -> Vec<f64> {
        let nu = cell_masses(h, v);
        let mut r: Vec<f64> = active
            .iter()
            .enumerate()
            .map(|(col, c)| match *c {
                Con::Nu(i) => nu[i],
                Con::Lo(i) | Con::Hi(i) => v[i] - target[col],
            })
            .collect();
        if let Some(m0) = m0 {
            r.push(area_raw(h, v) - m0);
        }
        r
    };
    let is_active = |c: Con| active.binary_search(&c).is_ok();
    let scale_u = u.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);

    let mut v = u.to_vec();
    let mut basis: Option<FaceBasis> = None;
    for _it in 0..30 {
        if m0.is_some() {
            let gm = area_gradient_raw(h, &v);
            for (row, g) in gm.iter().enumerate() {
                ct[(row, k_lin)] = *g;
            }
            basis = None;
        }
        let b = basis.get_or_insert_with(|| FaceBasis::new(&ct, k));
        let rank = b.q1.ncols();

        // Restore the face by a minimum-norm correction in range(Cᵀ).
        let viol = residual(&v);
        if rank > 0 && viol.iter().any(|x| *x != 0.0) {
            let corr = b.restore(&viol.iter().map(|x| -x).collect::<Vec<_>>());
            for i in 0..n {
                v[i] += corr[i];
            }
            // Dependent constraints with inconsistent targets: no such face.
            if residual(&v).iter().any(|x| x.abs() > 1e-9 * scale_u) {
                log::debug!(
                    "{}",
                    json!({"polish": "inconsistent face", "k": k, "rank": rank})
                );
                return FaceResult::Failed;
            }
        }

        let Ok(asm) = assemble(spec, h, &v, true) else {
            return FaceResult::Failed;
        };
        let g = asm.grad;
        let gnorm = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if m0.is_some() {
            *mu = b.multipliers(&g)[k_lin];
        }
        let zdim = b.z.ncols();
        let gz = b.z.transpose() * DVector::from_column_slice(&g);
        if zdim == 0 || gz.amax() <= 1e-13 * (1.0 + gnorm) {
            let viol = residual(&v);
            if viol.iter().all(|x| x.abs() <= 1e-12 * scale_u) {
                return FaceResult::Done(v.clone(), b.multipliers(&g));
            }
            continue;
        }

        let mut hd = asm.hess.expect("requested").to_dense();
        if m0.is_some() {
            let hm = area_hessian_diag_raw(h, &v);
            for i in 0..n {
                hd[(i, i)] -= *mu * hm[i];
            }
        }
        let hz = b.z.transpose() * &hd * &b.z;
        let hscale = hz.diagonal().amax().max(1e-300);
        let mut newton = None;
        let mut shift = 0.0;
        while shift <= 1e-10 * hscale {
            let mut m = hz.clone();
            for i in 0..zdim {
                m[(i, i)] += shift;
            }
            if let Some(c) = m.cholesky() {
                newton = Some(c.solve(&(-&gz)));
                break;
            }
            shift = if shift == 0.0 {
                1e-14 * hscale
            } else {
                shift * 10.0
            };
        }
        let (y, is_newton) = match newton {
            Some(y) => (y, true),
            None => {
                let eig = hz.symmetric_eigen();
                let (imin, _) = eig.eigenvalues.iter().enumerate().fold(
                    (0, f64::INFINITY),
                    |(bi, bv), (i, &x)| if x < bv { (i, x) } else { (bi, bv) },
                );
                let mut y = eig.eigenvectors.column(imin).into_owned();
                if y.dot(&gz) > 0.0 {
                    y = -y;
                }
                (y, false)
            }
        };
        let du = &b.z * y;

        // Ratio test against the inactive constraints.
        let nu = cell_masses(h, &v);
        let dnu = cell_masses(h, du.as_slice());
        let mut alpha_block = f64::INFINITY;
        let mut blocking = None;
        // Directions that barely move a constraint mean it depends on the
        // working set; blocking on it would make the face inconsistent.
        let flat = 1e-9 * du.amax();
        for i in 0..n {
            let cands = [
                (Con::Nu(i), nu[i], dnu[i], flat / h),
                (Con::Lo(i), v[i] - lo, du[i], flat),
                (Con::Hi(i), hi - v[i], -du[i], flat),
            ];
            for (c, s, ds, tiny) in cands {
                if ds < -tiny && !is_active(c) {
                    let a = -s.max(0.0) / ds;
                    if a < alpha_block {
                        alpha_block = a;
                        blocking = Some(c);
                    }
                }
            }
        }
        let alpha = if is_newton {
            alpha_block.min(1.0)
        } else {
            alpha_block
        };
        if !alpha.is_finite() {
            log::debug!(
                "{}",
                json!({"polish": "unbounded negative curvature", "dim": zdim})
            );
            return FaceResult::Failed;
        }
        for i in 0..n {
            v[i] += alpha * du[i];
        }
        if let (Some(c), true) = (blocking, alpha == alpha_block) {
            return FaceResult::Blocked(v, c);
        }
        if du.amax() <= 1e-15 * scale_u {
            let g = assemble(spec, h, &v, false).map(|a| a.grad).unwrap_or(g);
            return FaceResult::Done(v, b.multipliers(&g));
        }
    }
    log::debug!("{}", json!({"polish": "face iterations exhausted"}));
    FaceResult::Failed
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functional::{builtin, Params};
    use crate::periodic::make_grid;

    fn annulus(name: &str, params: &[(&str, f64)], n: usize) -> ProblemSpec {
        let p: Params = params.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        ProblemSpec::annulus(builtin(name, &p).unwrap(), 1.0, 2.0, n).unwrap()
    }

    #[test]
    fn weighted_gram_matches_dense() {
        let n = 12;
        let h = 2.0 * PI / n as f64;
        let d: Vec<f64> = (0..n).map(|i| 1.0 + i as f64).collect();
        let a = make_grid(n).unwrap().convexity_operator().to_dense();
        let dense = a.transpose() * DMatrix::from_diagonal(&DVector::from_vec(d.clone())) * &a;
        let band = weighted_gram(h, &d).to_dense();
        assert!((dense - band).amax() < 1e-9);
    }

    #[test]
    fn projection_examples() {
        let prob = annulus("quad_circle", &[], 64);
        let g = make_grid(64).unwrap();
        let feasible = RadialFunction::from_fn(g, |t| 1.5 + 0.01 * (2.0 * t).cos()).unwrap();
        assert_eq!(project_feasible(&feasible, &prob).unwrap(), feasible);

        let high = RadialFunction::constant(g, 3.0).unwrap();
        let p = project_feasible(&high, &prob).unwrap();
        assert!(p.values().iter().all(|&v| (v - 2.0).abs() < 1e-12));

        let flower =
            RadialFunction::from_fn(g, |t| (1.0 / (1.0 + 0.3 * (5.0 * t).cos())).clamp(1.0, 2.0))
                .unwrap();
        let p = project_feasible(&flower, &prob).unwrap();
        let rep = check_feasibility(&p, &prob, 1e-9);
        assert!(rep.feasible, "{rep:?}");
    }

    #[test]
    fn start_points_are_grid_independent_and_interior() {
        let p1 = annulus("crouzeix", &[], 64);
        let p2 = p1.with_grid(128);
        let u1 = start_point(&p1, 5, 2, 0.05).unwrap();
        let u2 = start_point(&p2, 5, 2, 0.05).unwrap();
        for i in 0..64 {
            assert!((u1.values()[i] - u2.values()[2 * i]).abs() < 1e-12);
        }
        let rep = check_feasibility(&u1, &p1, 0.0);
        assert!(rep.feasible && rep.min_cone_mass > 0.0);
        assert_ne!(start_point(&p1, 5, 3, 0.05).unwrap(), u1);
    }

    #[test]
    fn prolong_keeps_lines_straight() {
        let g = make_grid(32).unwrap();
        let line = |t: f64| 2.0 * (t - 0.3).cos();
        let u = RadialFunction::from_fn(g, |t| line(t).max(1.0)).unwrap();
        let fine = prolong(&u).unwrap();
        for i in (1..64).step_by(2) {
            let t = fine.grid().node(i);
            if (t - 0.3).abs() < 0.8 {
                assert!((fine.values()[i] - line(t)).abs() < 1e-14, "{i}");
            }
        }
    }

    #[test]
    fn quad_circle_converges_to_center() {
        let prob = annulus("quad_circle", &[("c", 1.5)], 64);
        let res = solve(&prob, &SolverOptions::default()).unwrap();
        assert_eq!(res.status, Status::Converged, "{:?}", res.message);
        let err = res
            .u_star
            .values()
            .iter()
            .map(|v| (v - 1.5).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
        assert!(res.objective <= 1e-10);
    }

    #[test]
    fn concave_circle_a_converges_to_outer_circle() {
        let prob = annulus("concave_circle_a", &[], 64);
        let res = solve(&prob, &SolverOptions::default()).unwrap();
        assert_eq!(res.status, Status::Converged, "{:?}", res.message);
        assert!((res.objective - PI).abs() < 1e-4 * PI);
    }

    #[test]
    fn rejects_bad_options() {
        let prob = annulus("quad_circle", &[], 64);
        let opts = SolverOptions {
            barrier_shrink: 1.5,
            ..Default::default()
        };
        assert!(solve(&prob, &opts).is_err());
    }

    #[test]
    fn volume_constraint_holds_at_the_solution() {
        let m0 = PI / 2.25;
        let f = builtin("quad_circle", &Params::new()).unwrap();
        let prob = ProblemSpec::volume(f, m0, 64).unwrap();
        let res = solve(&prob, &SolverOptions::default()).unwrap();
        assert_eq!(res.status, Status::Converged, "{:?}", res.message);
        assert!((crate::geometry::area(&res.u_star) - m0).abs() <= 1e-9 * m0);
        assert_eq!(res.safeguard_contacts, 0);
    }

    #[test]
    fn crouzeix_solution_is_certified_and_polished() {
        let prob = annulus("crouzeix", &[], 64);
        let res = solve(&prob, &SolverOptions::default()).unwrap();
        assert_eq!(res.status, Status::Converged, "{:?}", res.message);
        assert!(res.polished);
        assert!(res.kkt_residual_final <= 1e-8);
        assert!(check_feasibility(&res.u_star, &prob, crate::periodic::EPS_FEAS).feasible);
    }

    #[test]
    fn multistart_is_reproducible_and_keeps_the_best() {
        let prob = annulus("area_minus_perimeter", &[], 48);
        let opts = SolverOptions::default();
        let a = multistart(&prob, &opts, 3).unwrap();
        let b = multistart(&prob, &opts, 3).unwrap();
        assert_eq!(a.objectives, b.objectives);
        assert_eq!(a.best.u_star, b.best.u_star);
        let best = a
            .objectives
            .iter()
            .flatten()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        assert_eq!(a.best.objective, best);
        assert!(multistart(&prob, &opts, 0).is_err());
    }

    #[test]
    fn refinement_doubles_the_grid_and_converges() {
        let coarse_prob = annulus("crouzeix", &[], 64);
        let coarse = solve(&coarse_prob, &SolverOptions::default()).unwrap();
        let fine_prob = coarse_prob.with_grid(128);
        let fine = refine(&fine_prob, &coarse.u_star, &SolverOptions::default()).unwrap();
        assert_eq!(fine.u_star.len(), 128);
        assert_eq!(fine.status, Status::Converged, "{:?}", fine.message);
        assert!((fine.objective - coarse.objective).abs() < 0.05 * coarse.objective.abs());
    }
}
