//! The `solve`, `verify`, `analyze` and `export` commands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use convexopt_core::geometry::{area, export_svg};
use convexopt_core::{
    analyze_structure, check_feasibility, corner_count_bound, multistart, project_feasible, solve,
    verify, Error, ProblemSpec, RadialFunction, Regime, SolveResult, SolverOptions, Status,
    StructureTolerances, Verification,
};

use crate::config::ProblemFile;

/// Exit code for success.
pub const EXIT_OK: i32 = 0;
/// Exit code for usage or configuration errors.
pub const EXIT_USAGE: i32 = 1;
/// Exit code for numerical non-convergence or failed checks.
pub const EXIT_NUMERICAL: i32 = 2;

/// Overrides shared by the commands that run the solver.
#[derive(Debug, Clone, Default)]
pub struct RunFlags {
    pub out: PathBuf,
    pub multistart: Option<usize>,
    pub seed: Option<u64>,
    pub grid: Option<usize>,
}

impl RunFlags {
    fn apply(&self, file: &mut ProblemFile) {
        if let Some(n) = self.grid {
            file.grid_n = n;
        }
        if let Some(s) = self.seed {
            file.solver.seed = s;
        }
    }
}

fn resolve(out: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        out.join(p)
    }
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Runs the solver with `k` replicas (plain solve for `k ≤ 1`).
pub fn run_solver(
    problem: &ProblemSpec,
    options: &SolverOptions,
    k: usize,
) -> anyhow::Result<Option<SolveResult>> {
    if k > 1 {
        match multistart(problem, options, k) {
            Ok(m) => {
                log::info!(
                    "multistart objectives {:?}, spread {:e}",
                    m.objectives,
                    m.spread
                );
                Ok(Some(m.best))
            }
            Err(Error::AllReplicasFailed(_)) => Ok(None),
            Err(e) => Err(e.into()),
        }
    } else {
        Ok(Some(solve(problem, options)?))
    }
}

/// Plain-text summary of a solve or a verification.
pub fn report(
    file: &ProblemFile,
    problem: &ProblemSpec,
    u: &RadialFunction,
    result: Option<&SolveResult>,
    check: &Verification,
) -> String {
    let mut s = String::new();
    let f = &file.functional;
    let params: Vec<String> = f.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
    let _ = writeln!(s, "functional: {} ({})", f.name, params.join(", "));
    match problem.regime {
        Regime::Annulus { a, b } => {
            let _ = writeln!(s, "regime: annulus a={a} b={b}");
        }
        Regime::Volume { m0, u_lo, u_hi } => {
            let _ = writeln!(
                s,
                "regime: volume m0={m0} box=[{u_lo}, {u_hi}] area={:.12}",
                area(u)
            );
        }
    }
    let _ = writeln!(s, "grid: N={}", problem.grid_n);
    if let Some(r) = result {
        let _ = writeln!(s, "status: {}", r.status);
        if let Some(m) = &r.message {
            let _ = writeln!(s, "message: {m}");
        }
        let _ = writeln!(s, "iterations: {} (polished: {})", r.iterations, r.polished);
        if problem.regime.is_volume() {
            let _ = writeln!(s, "safeguard contacts: {}", r.safeguard_contacts);
        }
    }
    let c = &check.certificate;
    let _ = writeln!(s, "objective: {:.12}", c.objective);
    let st = &check.structure;
    let _ = writeln!(s, "verdict: {}", st.describe());
    let _ = writeln!(
        s,
        "corners: {} ({} interior), edges: {}, arcs at a: {}, arcs at b: {}, unclassified cells: {}",
        st.corners.len(),
        st.interior_corners,
        st.edges.len(),
        st.arcs_a.len(),
        st.arcs_b.len(),
        st.unclassified
    );
    for corner in &st.corners {
        let _ = writeln!(s, "  theta={:.6} mass={:.6}", corner.theta, corner.mass);
    }
    if let Regime::Annulus { a, b } = problem.regime {
        match corner_count_bound(&problem.functional, a, b) {
            Ok(bound) => {
                let _ = writeln!(
                    s,
                    "corner count bound: {} (C = {:.6})",
                    bound.bound, bound.c
                );
            }
            Err(e) => {
                let _ = writeln!(s, "corner count bound: unavailable ({e})");
            }
        }
    }
    let r = &c.residuals;
    let _ = writeln!(
        s,
        "residuals: stationarity={:.3e} (scaled {:.3e}) comp_zeta={:.3e} comp_a={:.3e} comp_b={:.3e}",
        r.stationarity,
        c.scaled_stationarity(),
        r.comp_zeta,
        r.comp_a,
        r.comp_b
    );
    if let Some(mu) = c.mu() {
        let _ = writeln!(s, "volume multiplier: {mu:.12}");
    }
    let evaluated = check.probes.iter().filter(|p| p.pass.is_some()).count();
    let failed = check
        .probes
        .iter()
        .filter(|p| p.pass == Some(false))
        .count();
    let _ = writeln!(
        s,
        "second-order probes: {} built, {evaluated} evaluated, {failed} failed",
        check.probes.len()
    );
    for p in &check.probes {
        match (p.form, &p.reason) {
            (Some(form), _) => {
                let _ = writeln!(s, "  {:?} {:?}: form={form:.6e}", p.pattern, p.window);
            }
            (None, Some(why)) => {
                let _ = writeln!(s, "  {:?} {:?}: skipped ({why})", p.pattern, p.window);
            }
            (None, None) => {}
        }
    }
    let _ = writeln!(
        s,
        "necessary conditions: {}",
        if check.all_pass { "pass" } else { "fail" }
    );
    s
}

/// `convexopt solve`: solves, writes the artifacts and the report.
pub fn cmd_solve(problem_path: &Path, flags: &RunFlags) -> anyhow::Result<i32> {
    let mut file = ProblemFile::load(problem_path)?;
    flags.apply(&mut file);
    let eff = file.materialize()?;
    let (problem, options) = eff.build()?;
    std::fs::create_dir_all(&flags.out)
        .with_context(|| format!("creating {}", flags.out.display()))?;
    write(&flags.out.join("effective.json"), &eff.to_json())?;

    let Some(result) = run_solver(&problem, &options, flags.multistart.unwrap_or(1))? else {
        eprintln!("no replica converged");
        return Ok(EXIT_NUMERICAL);
    };
    let u = &result.u_star;
    let outs = &eff.outputs;
    let csv = resolve(
        &flags.out,
        outs.csv.as_deref().unwrap_or(Path::new("u.csv")),
    );
    u.write_csv(&csv)?;
    let check = match verify(u, &problem, options.kkt_tol) {
        Ok(c) => c,
        Err(e) if result.status != Status::Converged => {
            eprintln!("status {}: {e}", result.status);
            return Ok(EXIT_NUMERICAL);
        }
        Err(e) => return Err(e.into()),
    };
    let (lo, hi) = problem.regime.bounds();
    let svg = resolve(
        &flags.out,
        outs.svg.as_deref().unwrap_or(Path::new("shape.svg")),
    );
    export_svg(u, Some(lo), Some(hi), Some(&check.structure), &svg)?;
    let cert = resolve(
        &flags.out,
        outs.certificate
            .as_deref()
            .unwrap_or(Path::new("certificate.json")),
    );
    let doc = serde_json::to_string_pretty(&check.certificate.to_json(&check.probes))?;
    write(&cert, &doc)?;
    let text = report(&eff, &problem, u, Some(&result), &check);
    write(&flags.out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(if result.status == Status::Converged {
        EXIT_OK
    } else {
        EXIT_NUMERICAL
    })
}

fn load_u(path: &Path) -> anyhow::Result<RadialFunction> {
    RadialFunction::read_csv(path).with_context(|| format!("reading {}", path.display()))
}

/// `convexopt verify`: certificate and probes for an external `u`.
pub fn cmd_verify(
    u_path: &Path,
    problem_path: &Path,
    project: bool,
    out: Option<&Path>,
) -> anyhow::Result<i32> {
    let mut file = ProblemFile::load(problem_path)?;
    let mut u = load_u(u_path)?;
    file.grid_n = u.len();
    let eff = file.materialize()?;
    let (problem, options) = eff.build()?;
    if project {
        u = project_feasible(&u, &problem)?;
    }
    let feas = check_feasibility(&u, &problem, options.eps_feas);
    let feas_line = format!(
        "feasibility: min ν={:.3e} box violation={:.3e}{} -> {}",
        feas.min_cone_mass,
        feas.box_violation,
        feas.volume_gap
            .map(|g| format!(" volume gap={g:.3e}"))
            .unwrap_or_default(),
        if feas.feasible {
            "feasible"
        } else {
            "infeasible"
        }
    );
    if !feas.feasible {
        println!("{feas_line}");
        println!("necessary conditions: fail (u is not feasible; --project projects it first)");
        return Ok(EXIT_NUMERICAL);
    }
    let check = verify(&u, &problem, options.kkt_tol)?;
    let mut text = report(&eff, &problem, &u, None, &check);
    let _ = writeln!(text, "{feas_line}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let doc = serde_json::to_string_pretty(&check.certificate.to_json(&check.probes))?;
        write(&dir.join("certificate.json"), &doc)?;
        if project {
            u.write_csv(dir.join("u_projected.csv"))?;
        }
    }
    print!("{text}");
    Ok(if check.all_pass && feas.feasible {
        EXIT_OK
    } else {
        EXIT_NUMERICAL
    })
}

/// `convexopt analyze`: structure of an external `u` as JSON.
pub fn cmd_analyze(u_path: &Path, problem_path: &Path) -> anyhow::Result<i32> {
    let mut file = ProblemFile::load(problem_path)?;
    let u = load_u(u_path)?;
    file.grid_n = u.len();
    let (problem, _) = file.build()?;
    let (lo, hi) = problem.regime.bounds();
    let st = analyze_structure(&u, lo, hi, &StructureTolerances::default())?;
    println!("{}", st.to_json());
    eprintln!("verdict: {}", st.describe());
    Ok(EXIT_OK)
}

/// `convexopt export`: SVG drawing of an external `u`.
pub fn cmd_export(u_path: &Path, problem_path: &Path, out: &Path) -> anyhow::Result<i32> {
    let mut file = ProblemFile::load(problem_path)?;
    let u = load_u(u_path)?;
    file.grid_n = u.len();
    let (problem, _) = file.build()?;
    let (lo, hi) = problem.regime.bounds();
    let st = analyze_structure(&u, lo, hi, &StructureTolerances::default())?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join("shape.svg");
    export_svg(&u, Some(lo), Some(hi), Some(&st), &path)?;
    println!("{}", path.display());
    Ok(EXIT_OK)
}
