//! Reproduction suites: the classical counterexamples, the polygonal
//! minimizers and the volume-constrained problems, each checked against its
//! expected outcome.

use std::f64::consts::PI;
use std::fmt::Write as _;

use convexopt_core::geometry::area;
use convexopt_core::{
    analyze_structure, builtin, corner_count_bound, corners_agree, recover_multipliers, refine,
    verify, Params, ProblemSpec, RadialFunction, ShapeStructure, SolveResult, SolverOptions,
    Status, StructureTolerances, Verdict,
};

use crate::commands::run_solver;

pub const SUITES: &[&str] = &["s51", "s52", "polygons", "volume"];

/// Radii and grid shared by every suite.
#[derive(Debug, Clone, Copy)]
pub struct SuiteConfig {
    pub a: f64,
    pub b: f64,
    pub grid_n: usize,
    /// Replicas for the polygon cases.
    pub multistart: usize,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            a: 1.0,
            b: 2.0,
            grid_n: 256,
            multistart: 8,
            seed: 0,
        }
    }
}

/// One row of the pass/fail table.
#[derive(Debug, Clone)]
pub struct Check {
    pub case: String,
    pub check: String,
    pub value: String,
    pub pass: bool,
}

struct Rows<'a> {
    case: &'a str,
    rows: Vec<Check>,
}

impl Rows<'_> {
    fn push(&mut self, check: &str, value: String, pass: bool) {
        self.rows.push(Check {
            case: self.case.to_string(),
            check: check.to_string(),
            value,
            pass,
        });
    }
}

fn sup_dist(u: &RadialFunction, c: f64) -> f64 {
    u.values().iter().fold(0.0f64, |m, x| m.max((x - c).abs()))
}

fn rel(x: f64, target: f64) -> f64 {
    (x - target).abs() / target.abs()
}

fn params(pairs: &[(&str, f64)]) -> Params {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn structure(u: &RadialFunction, problem: &ProblemSpec) -> Option<ShapeStructure> {
    let (lo, hi) = problem.regime.bounds();
    analyze_structure(u, lo, hi, &StructureTolerances::default()).ok()
}

/// Convergence, certificate and second-order rows shared by every case.
fn common(rows: &mut Rows, problem: &ProblemSpec, options: &SolverOptions, r: &SolveResult) {
    rows.push(
        "converged",
        r.status.to_string(),
        r.status == Status::Converged,
    );
    match verify(&r.u_star, problem, options.kkt_tol) {
        Ok(v) => {
            let c = &v.certificate;
            let comp = c
                .residuals
                .comp_zeta
                .max(c.residuals.comp_a)
                .max(c.residuals.comp_b);
            rows.push(
                "KKT certificate",
                format!("stat {:.1e}, comp {:.1e}", c.scaled_stationarity(), comp),
                c.scaled_stationarity() <= 1e-8 && comp <= 1e-7 && c.zeta.iter().all(|&z| z >= 0.0),
            );
            let evaluated = v.probes.iter().filter(|p| p.pass.is_some()).count();
            let failed = v.probes.iter().filter(|p| p.pass == Some(false)).count();
            rows.push(
                "second-order probes",
                format!("{evaluated} evaluated, {failed} failed"),
                failed == 0,
            );
        }
        Err(e) => rows.push("KKT certificate", e.to_string(), false),
    }
}

fn solve_case(
    rows: &mut Rows,
    problem: &ProblemSpec,
    options: &SolverOptions,
    k: usize,
) -> anyhow::Result<Option<SolveResult>> {
    log::info!("solving {} (N = {})", rows.case, problem.grid_n);
    let r = run_solver(problem, options, k)?;
    match &r {
        Some(r) => common(rows, problem, options, r),
        None => rows.push("converged", "no replica converged".into(), false),
    }
    Ok(r)
}

fn verdict_row(rows: &mut Rows, st: &Option<ShapeStructure>, want_polygon: bool) {
    let desc = st
        .as_ref()
        .map(|s| s.describe())
        .unwrap_or_else(|| "unavailable".into());
    let is_polygon = st.as_ref().is_some_and(|s| s.verdict == Verdict::Polygon);
    let name = if want_polygon {
        "verdict Polygon"
    } else {
        "verdict not Polygon"
    };
    rows.push(name, desc, is_polygon == want_polygon);
}

fn s51(cfg: &SuiteConfig, options: &SolverOptions) -> anyhow::Result<Vec<Check>> {
    let (a, b) = (cfg.a, cfg.b);
    let mut out = Vec::new();
    let c = 0.5 * (a + b);
    for (name, p) in [
        ("quad_circle", params(&[("c", c)])),
        ("concave_circle_a", Params::new()),
        ("concave_circle_b", Params::new()),
        ("neg_perimeter", Params::new()),
    ] {
        let problem = ProblemSpec::annulus(builtin(name, &p)?, a, b, cfg.grid_n)?;
        let mut rows = Rows {
            case: name,
            rows: Vec::new(),
        };
        if let Some(r) = solve_case(&mut rows, &problem, options, 1)? {
            let u = &r.u_star;
            let j = r.objective;
            match name {
                "quad_circle" => {
                    let d = sup_dist(u, c);
                    rows.push("‖u − c‖∞ ≤ 1e−6", format!("{d:.2e}"), d <= 1e-6);
                    rows.push("j ≤ 1e−10", format!("{j:.2e}"), j <= 1e-10);
                }
                "concave_circle_a" => {
                    let e = rel(j, PI * a * a);
                    rows.push(
                        "j = πa² (rel 1e−4)",
                        format!("{j:.10} (rel {e:.1e})"),
                        e <= 1e-4,
                    );
                    let d = sup_dist(u, a);
                    rows.push("‖u − a‖∞ ≤ 1e−4", format!("{d:.2e}"), d <= 1e-4);
                }
                "concave_circle_b" => {
                    let e = rel(j, -PI * b * b);
                    rows.push(
                        "j = −πb² (rel 1e−3)",
                        format!("{j:.10} (rel {e:.1e})"),
                        e <= 1e-3,
                    );
                    if let Some(st) = structure(u, &problem) {
                        let worst = st
                            .edges
                            .iter()
                            .map(|&[i, k]| {
                                let n = u.len();
                                let len = (k + n - i) % n;
                                let top = (0..=len)
                                    .map(|d| u.values()[(i + d) % n])
                                    .fold(f64::MIN, f64::max);
                                (top - b).abs()
                            })
                            .fold(0.0f64, f64::max);
                        rows.push(
                            "edges tangent to u = b",
                            format!("{} edges, worst {worst:.1e}", st.edges.len()),
                            worst <= 1e-3,
                        );
                    }
                }
                _ => {
                    let d = sup_dist(u, a);
                    rows.push("‖u − a‖∞ ≤ 1e−4", format!("{d:.2e}"), d <= 1e-4);
                    let e = rel(j, -2.0 * PI / a);
                    rows.push(
                        "j = −2π/a (rel 1e−4)",
                        format!("{j:.10} (rel {e:.1e})"),
                        e <= 1e-4,
                    );
                }
            }
        }
        out.extend(rows.rows);
    }
    Ok(out)
}

fn s52(cfg: &SuiteConfig, options: &SolverOptions) -> anyhow::Result<Vec<Check>> {
    let (a, b) = (cfg.a, cfg.b);
    let c = 0.5 * (a + b);
    let mut out = Vec::new();
    for (name, p) in [
        ("degenerate_i", params(&[("a", a), ("c", c)])),
        ("cutoff_ii", params(&[("a", a), ("b", b)])),
        ("cutoff_iii", params(&[("a", a), ("b", b)])),
    ] {
        let problem = ProblemSpec::annulus(builtin(name, &p)?, a, b, cfg.grid_n)?;
        let mut rows = Rows {
            case: name,
            rows: Vec::new(),
        };
        if let Some(r) = solve_case(&mut rows, &problem, options, 1)? {
            let u = &r.u_star;
            let j = r.objective;
            match name {
                "degenerate_i" => {
                    let d = sup_dist(u, c);
                    rows.push("‖u − c‖∞ ≤ 1e−5", format!("{d:.2e}"), d <= 1e-5);
                    rows.push("j ≤ 1e−9", format!("{j:.2e}"), j <= 1e-9);
                }
                "cutoff_ii" => {
                    let d = sup_dist(u, a);
                    rows.push("u ≡ a (1e−4)", format!("{d:.2e}"), d <= 1e-4);
                }
                _ => {
                    let e = rel(j, -PI * b * b);
                    rows.push(
                        "j = −πb² (rel 1e−3)",
                        format!("{j:.10} (rel {e:.1e})"),
                        e <= 1e-3,
                    );
                }
            }
            verdict_row(&mut rows, &structure(u, &problem), false);
        }
        out.extend(rows.rows);
    }
    Ok(out)
}

/// Polygon verdict, corner count, stability under one grid doubling and
/// the corner-count bound.
fn polygon_rows(
    rows: &mut Rows,
    problem: &ProblemSpec,
    options: &SolverOptions,
    k: usize,
    bound_on: Option<(f64, f64)>,
) -> anyhow::Result<()> {
    let Some(r) = solve_case(rows, problem, options, k)? else {
        return Ok(());
    };
    rows.push("objective", format!("{:.10}", r.objective), true);
    let st = structure(&r.u_star, problem);
    verdict_row(rows, &st, true);
    let Some(st) = st else { return Ok(()) };
    rows.push(
        "≥ 3 corners",
        st.corners.len().to_string(),
        st.corners.len() >= 3,
    );
    let fine_problem = problem.with_grid(2 * problem.grid_n);
    log::info!("refining {} to N = {}", rows.case, fine_problem.grid_n);
    let fine = refine(&fine_problem, &r.u_star, options)?;
    let fine_st = structure(&fine.u_star, &fine_problem);
    let h = 2.0 * PI / problem.grid_n as f64;
    let stable = fine.status == Status::Converged
        && fine_st.as_ref().is_some_and(|f| corners_agree(&st, f, h));
    rows.push(
        "corners stable at 2N",
        format!(
            "{} -> {}",
            st.corners.len(),
            fine_st
                .as_ref()
                .map(|f| f.describe())
                .unwrap_or_else(|| fine.status.to_string())
        ),
        stable,
    );
    if let Some((a, b)) = bound_on {
        match corner_count_bound(&problem.functional, a, b) {
            Ok(bound) => rows.push(
                "interior corners ≤ bound",
                format!("{} ≤ {}", st.interior_corners, bound.bound),
                st.interior_corners <= bound.bound,
            ),
            Err(_) => rows.push(
                "interior corners ≤ bound",
                "not strongly concave, no bound".into(),
                true,
            ),
        }
    }
    Ok(())
}

fn polygons(cfg: &SuiteConfig, options: &SolverOptions) -> anyhow::Result<Vec<Check>> {
    let (a, b) = (cfg.a, cfg.b);
    let mut out = Vec::new();
    for (name, p) in [
        ("crouzeix", Params::new()),
        ("newton_like", params(&[("a", a), ("b", b)])),
        ("area_minus_perimeter", params(&[("lambda", 0.5 * (a + b))])),
    ] {
        let problem = ProblemSpec::annulus(builtin(name, &p)?, a, b, cfg.grid_n)?;
        let mut rows = Rows {
            case: name,
            rows: Vec::new(),
        };
        polygon_rows(&mut rows, &problem, options, cfg.multistart, Some((a, b)))?;
        out.extend(rows.rows);
    }
    Ok(out)
}

/// Parameters of the strongly-concave-in-`p` volume case:
/// `G = w(u − c)² − p²`, whose minimizers of prescribed area are triangles.
pub fn volume_polygon_params(c: f64) -> Params {
    params(&[("c", c), ("w", 5.0), ("slope", 0.0), ("offset", 1.0)])
}

fn volume(cfg: &SuiteConfig, options: &SolverOptions) -> anyhow::Result<Vec<Check>> {
    let c = 0.5 * (cfg.a + cfg.b);
    let m0 = PI / (c * c);
    let mut out = Vec::new();

    let problem = ProblemSpec::volume(
        builtin("quad_circle", &params(&[("c", c)]))?,
        m0,
        cfg.grid_n,
    )?;
    let mut rows = Rows {
        case: "quad_circle (volume)",
        rows: Vec::new(),
    };
    if let Some(r) = solve_case(&mut rows, &problem, options, 1)? {
        let gap = (area(&r.u_star) - m0).abs();
        rows.push("|m − m0| ≤ 1e−9·m0", format!("{gap:.1e}"), gap <= 1e-9 * m0);
        match recover_multipliers(&r.u_star, &problem) {
            Ok(cert) => rows.push(
                "scalar-μ residual ≤ 1e−8",
                format!(
                    "{:.1e} (μ = {:.1e})",
                    cert.kkt_residual(),
                    cert.mu().unwrap_or(f64::NAN)
                ),
                cert.kkt_residual() <= 1e-8,
            ),
            Err(e) => rows.push("scalar-μ residual ≤ 1e−8", e.to_string(), false),
        }
        let d = sup_dist(&r.u_star, c);
        rows.push("‖u − c‖∞ ≤ 1e−6", format!("{d:.2e}"), d <= 1e-6);
    }
    out.extend(rows.rows);

    let problem = ProblemSpec::volume(
        builtin("newton_like", &volume_polygon_params(c))?,
        m0,
        cfg.grid_n,
    )?;
    let mut rows = Rows {
        case: "newton_like (volume)",
        rows: Vec::new(),
    };
    polygon_rows(&mut rows, &problem, options, cfg.multistart, None)?;
    out.extend(rows.rows);
    Ok(out)
}

/// Runs a suite by name; `None` for an unknown name.
pub fn run_suite(name: &str, cfg: &SuiteConfig) -> Option<anyhow::Result<Vec<Check>>> {
    let options = SolverOptions {
        seed: cfg.seed,
        ..SolverOptions::default()
    };
    Some(match name {
        "s51" => s51(cfg, &options),
        "s52" => s52(cfg, &options),
        "polygons" => polygons(cfg, &options),
        "volume" => volume(cfg, &options),
        _ => return None,
    })
}

/// Fixed-width pass/fail table.
pub fn format_table(checks: &[Check]) -> String {
    let w_case = checks
        .iter()
        .map(|c| c.case.chars().count())
        .max()
        .unwrap_or(4)
        .max(4);
    let w_check = checks
        .iter()
        .map(|c| c.check.chars().count())
        .max()
        .unwrap_or(5)
        .max(5);
    let pad = |s: &str, w: usize| format!("{s}{}", " ".repeat(w.saturating_sub(s.chars().count())));
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{}  {}  {}  value",
        pad("case", w_case),
        pad("check", w_check),
        pad("result", 6)
    );
    for c in checks {
        let _ = writeln!(
            s,
            "{}  {}  {}  {}",
            pad(&c.case, w_case),
            pad(&c.check, w_check),
            pad(if c.pass { "pass" } else { "FAIL" }, 6),
            c.value
        );
    }
    let passed = checks.iter().filter(|c| c.pass).count();
    let _ = writeln!(s, "{passed}/{} checks passed", checks.len());
    s
}
