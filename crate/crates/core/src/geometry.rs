//! Reconstruction of the domain `{r < 1/u(θ)}`: area, perimeter, curvature,
//! boundary structure (corners, edges, arcs) and SVG export.

use std::f64::consts::PI;
use std::fmt::{self, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::periodic::{cell_masses, staggered, RadialFunction, EPS_FEAS};

/// Closed polyline `(cos θ_i / u_i, sin θ_i / u_i)`; the first point is
/// repeated at the end.
pub fn boundary_points(u: &RadialFunction) -> Vec<[f64; 2]> {
    let g = u.grid();
    let mut pts: Vec<[f64; 2]> = u
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let t = g.node(i);
            [t.cos() / v, t.sin() / v]
        })
        .collect();
    pts.push(pts[0]);
    pts
}

/// `m_h(u) = (h/2) Σ 1/u_i²`.
pub fn area(u: &RadialFunction) -> f64 {
    area_raw(u.grid().spacing(), u.values())
}

pub(crate) fn area_raw(h: f64, u: &[f64]) -> f64 {
    0.5 * h * u.iter().map(|v| 1.0 / (v * v)).sum::<f64>()
}

/// `∂m_h/∂u_i = −h/u_i³`.
pub fn area_gradient(u: &RadialFunction) -> Vec<f64> {
    area_gradient_raw(u.grid().spacing(), u.values())
}

pub(crate) fn area_gradient_raw(h: f64, u: &[f64]) -> Vec<f64> {
    u.iter().map(|v| -h / (v * v * v)).collect()
}

/// Diagonal of the area Hessian, `3h/u_i⁴`.
pub(crate) fn area_hessian_diag_raw(h: f64, u: &[f64]) -> Vec<f64> {
    u.iter().map(|v| 3.0 * h / (v * v * v * v)).collect()
}

/// `m_h''(u)(v, v) = 3h Σ v_i²/u_i⁴`.
pub fn area_hessian_form(u: &RadialFunction, v: &[f64]) -> f64 {
    area_hessian_diag_raw(u.grid().spacing(), u.values())
        .iter()
        .zip(v)
        .map(|(d, x)| d * x * x)
        .sum()
}

/// `h Σ √(ū² + p²)/ū²` over the midpoints.
pub fn perimeter(u: &RadialFunction) -> f64 {
    let h = u.grid().spacing();
    let v = u.values();
    let n = v.len();
    (0..n)
        .map(|i| {
            let ub = 0.5 * (v[i] + v[(i + 1) % n]);
            let p = (v[(i + 1) % n] - v[i]) / h;
            (ub * ub + p * p).sqrt() / (ub * ub)
        })
        .sum::<f64>()
        * h
}

/// Pointwise curvature `κ = (u'' + u) u³ / (u² + u'²)^{3/2}` with `u'' + u`
/// taken as the cell density `ν_i/h` and `u'` as the mean of the two
/// neighbouring staggered differences. Only meaningful where `u` is
/// resolved; at corners it is a density of order `1/h`.
pub fn curvature(u: &RadialFunction) -> Vec<f64> {
    let h = u.grid().spacing();
    let v = u.values();
    let n = v.len();
    let nu = cell_masses(h, v);
    let p = staggered(h, v);
    (0..n)
        .map(|i| {
            let pbar = 0.5 * (p[i] + p[(i + n - 1) % n]);
            let ui = v[i];
            (nu[i] / h) * ui.powi(3) / (ui * ui + pbar * pbar).powf(1.5)
        })
        .collect()
}

/// Classification of the boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Polygon,
    LocallyPolygonal,
    HasArcs,
    Indeterminate,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Polygon => "Polygon",
            Verdict::LocallyPolygonal => "LocallyPolygonal",
            Verdict::HasArcs => "HasArcs",
            Verdict::Indeterminate => "Indeterminate",
        })
    }
}

/// A merged group of atom cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corner {
    /// Mass-weighted angle in `[0, 2π)`.
    pub theta: f64,
    pub mass: f64,
    /// Node with the largest mass in the group.
    #[serde(skip)]
    pub peak: usize,
    /// Cells merged into this corner, in angular order.
    #[serde(skip)]
    pub cells: Vec<usize>,
}

/// Boundary decomposition. Intervals are inclusive node ranges `[i, j]`,
/// read cyclically (so `j < i` wraps through 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeStructure {
    pub corners: Vec<Corner>,
    pub edges: Vec<[usize; 2]>,
    pub arcs_a: Vec<[usize; 2]>,
    pub arcs_b: Vec<[usize; 2]>,
    pub verdict: Verdict,
    /// Set when `u` is constant to within the box tolerance.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub circle: Option<f64>,
    /// Corners whose peak node lies strictly inside the annulus.
    pub interior_corners: usize,
    /// Cells that are neither corner, edge nor arc.
    pub unclassified: usize,
}

impl ShapeStructure {
    /// One-line summary, e.g. `Polygon (3 corners)`.
    pub fn describe(&self) -> String {
        match (self.verdict, self.circle) {
            (Verdict::HasArcs, Some(c)) => format!("HasArcs (circle u=c, c = {c})"),
            (v, _) => format!("{v} ({} corners)", self.corners.len()),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }
}

/// Thresholds for [`analyze_structure`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructureTolerances {
    /// Cells with `ν_i > k_atom·h·max(1, mean u)` are atoms.
    pub k_atom: f64,
    /// Box contact tolerance relative to `b − a`.
    pub eps_box_rel: f64,
    /// Feasibility tolerance; edges have `ν_i ≤ max(10·eps_feas, h³·max(1, mean u))`,
    /// the second term covering the residual mass of a sampled straight line.
    pub eps_feas: f64,
    /// Atom cells at most this many cells apart form one corner.
    pub merge_gap: usize,
}

impl Default for StructureTolerances {
    fn default() -> Self {
        StructureTolerances {
            k_atom: 5.0,
            eps_box_rel: 1e-6,
            eps_feas: EPS_FEAS,
            merge_gap: 2,
        }
    }
}

impl StructureTolerances {
    pub fn eps_box(&self, a: f64, b: f64) -> f64 {
        self.eps_box_rel * (b - a)
    }

    pub fn edge_threshold(&self, h: f64, mean_u: f64) -> f64 {
        (10.0 * self.eps_feas).max(h.powi(3) * mean_u.max(1.0))
    }

    pub fn atom_threshold(&self, h: f64, mean_u: f64) -> f64 {
        self.k_atom * h * mean_u.max(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Cell {
    Atom,
    Edge,
    Curved,
}

/// Classifies each cell and assembles corners, edges and box arcs.
pub fn analyze_structure(
    u: &RadialFunction,
    a: f64,
    b: f64,
    tols: &StructureTolerances,
) -> Result<ShapeStructure> {
    let h = u.grid().spacing();
    let v = u.values();
    let n = v.len();
    let nu = cell_masses(h, v);
    let eps_box = tols.eps_box(a, b);
    let min_nu = nu.iter().copied().fold(f64::INFINITY, f64::min);
    if min_nu < -tols.eps_feas {
        return Err(Error::Infeasible(format!(
            "convexity measure has a negative cell (min ν = {min_nu:e})"
        )));
    }
    let box_violation = v
        .iter()
        .map(|&x| (a - x).max(x - b))
        .fold(f64::NEG_INFINITY, f64::max);
    if box_violation > tols.eps_feas.max(eps_box) {
        return Err(Error::Infeasible(format!(
            "u leaves [{a}, {b}] by {box_violation:e}"
        )));
    }

    let atom_thr = tols.atom_threshold(h, u.mean());
    let edge_thr = tols.edge_threshold(h, u.mean());
    let mut class: Vec<Cell> = nu
        .iter()
        .map(|&m| {
            if m > atom_thr {
                Cell::Atom
            } else if m <= edge_thr {
                Cell::Edge
            } else {
                Cell::Curved
            }
        })
        .collect();

    let touches_a: Vec<bool> = v.iter().map(|&x| x - a <= eps_box).collect();
    let touches_b: Vec<bool> = v.iter().map(|&x| b - x <= eps_box).collect();
    promote_split_atoms(
        &nu,
        &mut class,
        &touches_b,
        MIN_CORNER_MASS * u.mean().max(1.0),
        tols.merge_gap + 1,
    );
    let corners = merge_corners(&nu, &mut class, u, tols.merge_gap);
    let in_corner = {
        let mut m = vec![false; n];
        for c in &corners {
            for &i in &c.cells {
                m[i] = true;
            }
        }
        m
    };

    let curved_free: Vec<bool> = (0..n)
        .map(|i| class[i] == Cell::Curved && !in_corner[i])
        .collect();
    let arc_a: Vec<bool> = (0..n).map(|i| curved_free[i] && touches_a[i]).collect();
    let arc_b: Vec<bool> = (0..n).map(|i| curved_free[i] && touches_b[i]).collect();
    let edge_mask: Vec<bool> = (0..n)
        .map(|i| class[i] == Cell::Edge && !in_corner[i])
        .collect();
    let unclassified = (0..n)
        .filter(|&i| curved_free[i] && !arc_a[i] && !arc_b[i])
        .count();
    let arc_cells = (0..n).filter(|&i| arc_a[i] || arc_b[i]).count();

    let umax = u.max();
    let umin = u.min();
    let circle = (umax - umin <= eps_box.max(1e-12 * umax)).then(|| u.mean());

    let verdict = if arc_cells == 0 && unclassified == 0 && !corners.is_empty() {
        Verdict::Polygon
    } else if arc_cells + unclassified >= n / 2 {
        Verdict::HasArcs
    } else if unclassified == 0 && !corners.is_empty() {
        Verdict::LocallyPolygonal
    } else {
        Verdict::Indeterminate
    };

    let interior_corners = corners
        .iter()
        .filter(|c| !touches_a[c.peak] && !touches_b[c.peak])
        .count();

    Ok(ShapeStructure {
        edges: runs(&edge_mask),
        arcs_a: runs(&arc_a),
        arcs_b: runs(&arc_b),
        corners,
        verdict,
        circle,
        interior_corners,
        unclassified,
    })
}

/// Turning mass below which an isolated kink is treated as numerical noise.
const MIN_CORNER_MASS: f64 = 1e-3;

/// A corner with a small turning angle, or one whose mass is shared between a
/// few neighbouring cells, can stay below the atom threshold. A run of at most
/// `max_len` curved cells with straight edges on both sides cannot resolve an
/// arc, so it is a corner once its total mass exceeds `min_mass`.
///
/// The exception is a run touching the inner circle `u = b`: a convex corner
/// cannot touch that circle, and the kink an edge picks up where it is tangent
/// to the circle at a node carries only O(h) mass, so such runs are edges.
fn promote_split_atoms(
    nu: &[f64],
    class: &mut [Cell],
    touches_b: &[bool],
    min_mass: f64,
    max_len: usize,
) {
    let n = nu.len();
    let Some(start) = (0..n).find(|&i| class[i] == Cell::Edge) else {
        return;
    };
    let mut off = 1;
    while off < n {
        let i = (start + off) % n;
        if class[i] != Cell::Curved {
            off += 1;
            continue;
        }
        let mut len = 0;
        while len < n && class[(i + len) % n] == Cell::Curved {
            len += 1;
        }
        let before = (i + n - 1) % n;
        let after = (i + len) % n;
        if len <= max_len && class[before] == Cell::Edge && class[after] == Cell::Edge {
            let cells = (0..len).map(|k| (i + k) % n);
            let tangent = cells.clone().any(|c| touches_b[c]);
            let mass: f64 = cells.clone().map(|c| nu[c]).sum();
            let promoted = if tangent {
                Some(Cell::Edge)
            } else if mass > min_mass {
                Some(Cell::Atom)
            } else {
                None
            };
            if let Some(cls) = promoted {
                for c in cells {
                    class[c] = cls;
                }
            }
        }
        off += len;
    }
}

/// Groups atom cells separated by at most `gap` cells, absorbing the
/// non-edge cells around each group (interior-point iterates smear an atom
/// over a few cells).
fn merge_corners(nu: &[f64], class: &mut [Cell], u: &RadialFunction, gap: usize) -> Vec<Corner> {
    let n = nu.len();
    let atoms: Vec<usize> = (0..n).filter(|&i| class[i] == Cell::Atom).collect();
    if atoms.is_empty() {
        return Vec::new();
    }
    // Start scanning just after the largest circular gap between atoms so no
    // group wraps past the starting point.
    let mut start = atoms[0];
    let mut widest = 0;
    for (k, &i) in atoms.iter().enumerate() {
        let next = atoms[(k + 1) % atoms.len()];
        let d = (next + n - i) % n;
        let d = if d == 0 { n } else { d };
        if d > widest {
            widest = d;
            start = next;
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut last: Option<usize> = None;
    for off in 0..n {
        let i = (start + off) % n;
        if class[i] != Cell::Atom {
            continue;
        }
        match last {
            Some(l) if (i + n - l) % n <= gap + 1 => groups.last_mut().unwrap().push(i),
            _ => groups.push(vec![i]),
        }
        last = Some(i);
    }

    let mut owned = vec![false; n];
    for g in &groups {
        for &i in g {
            owned[i] = true;
        }
    }
    let mut corners = Vec::with_capacity(groups.len());
    for g in groups {
        let first = g[0];
        let last = *g.last().unwrap();
        let mut cells = Vec::new();
        for back in (1..=gap).rev() {
            let i = (first + n - back) % n;
            if !owned[i] && class[i] != Cell::Edge {
                cells.push(i);
            }
        }
        let span = (last + n - first) % n;
        for off in 0..=span {
            cells.push((first + off) % n);
        }
        for fwd in 1..=gap {
            let i = (last + fwd) % n;
            if !owned[i] && class[i] != Cell::Edge {
                cells.push(i);
            }
        }
        // Keep only a contiguous block around the atoms.
        for &i in &cells {
            owned[i] = true;
        }
        let mass: f64 = cells.iter().map(|&i| nu[i]).sum();
        let base = u.grid().node(cells[0]);
        let h = u.grid().spacing();
        let mut moment = 0.0;
        let mut peak = cells[0];
        for &i in &cells {
            let off = (i + n - cells[0]) % n;
            moment += nu[i] * (base + off as f64 * h);
            if nu[i] > nu[peak] {
                peak = i;
            }
        }
        let theta = (moment / mass).rem_euclid(2.0 * PI);
        for &i in &cells {
            class[i] = Cell::Atom;
        }
        corners.push(Corner {
            theta,
            mass,
            peak,
            cells,
        });
    }
    corners.sort_by(|x, y| x.theta.total_cmp(&y.theta));
    corners
}

/// Maximal cyclic runs of `true` as inclusive `[start, end]` pairs.
fn runs(mask: &[bool]) -> Vec<[usize; 2]> {
    let n = mask.len();
    if mask.iter().all(|&m| m) {
        return vec![[0, n - 1]];
    }
    let Some(start) = (0..n).find(|&i| !mask[i]) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    let mut open: Option<usize> = None;
    for off in 1..=n {
        let i = (start + off) % n;
        match (mask[i], open) {
            (true, None) => open = Some(i),
            (false, Some(s)) => {
                out.push([s, (i + n - 1) % n]);
                open = None;
            }
            _ => {}
        }
    }
    out.sort();
    out
}

/// Iterates the nodes of an inclusive cyclic interval.
pub fn interval_nodes(interval: [usize; 2], n: usize) -> impl Iterator<Item = usize> {
    let len = (interval[1] + n - interval[0]) % n + 1;
    (0..len).map(move |k| (interval[0] + k) % n)
}

/// SVG drawing of the boundary, the circles `r = 1/a` and `r = 1/b` (when
/// given) and the corners of `structure`. The view box spans `2.2/a`, or
/// `2.2/min u` without an outer circle.
pub fn svg_string(
    u: &RadialFunction,
    a: Option<f64>,
    b: Option<f64>,
    structure: Option<&ShapeStructure>,
) -> String {
    let view_u = a.unwrap_or_else(|| u.min());
    let half = 1.1 / view_u;
    let stroke = 0.004 / view_u;
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" viewBox="{} {} {} {}">"#,
        -half,
        -half,
        2.0 * half,
        2.0 * half
    );
    let _ = writeln!(s, r#"<g transform="scale(1,-1)" fill="none">"#);
    for (r, color) in [(a, "#999999"), (b, "#999999")] {
        if let Some(r) = r {
            let _ = writeln!(
                s,
                r#"<circle cx="0" cy="0" r="{}" stroke="{color}" stroke-width="{stroke}" stroke-dasharray="{} {}"/>"#,
                1.0 / r,
                4.0 * stroke,
                4.0 * stroke
            );
        }
    }
    let pts = boundary_points(u);
    let mut poly = String::new();
    for p in &pts {
        let _ = write!(poly, "{},{} ", p[0], p[1]);
    }
    let _ = writeln!(
        s,
        r##"<polyline points="{}" stroke="#1f4e9c" stroke-width="{}"/>"##,
        poly.trim_end(),
        2.0 * stroke
    );
    if let Some(st) = structure {
        let vals = u.values();
        for c in &st.corners {
            let r = 1.0 / vals[c.peak];
            let t = u.grid().node(c.peak);
            let _ = writeln!(
                s,
                r##"<circle class="corner" cx="{}" cy="{}" r="{}" fill="#c0392b"/>"##,
                r * t.cos(),
                r * t.sin(),
                6.0 * stroke
            );
        }
    }
    s.push_str("</g>\n</svg>\n");
    s
}

pub fn export_svg(
    u: &RadialFunction,
    a: Option<f64>,
    b: Option<f64>,
    structure: Option<&ShapeStructure>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, svg_string(u, a, b, structure)).map_err(|e| Error::io(path, e))
}

pub fn export_csv(u: &RadialFunction, path: impl AsRef<Path>) -> Result<()> {
    u.write_csv(path)
}

/// Whether two structures have the same number of corners and every
/// corner of `a` has a partner in `b` at angular distance at most `tol`.
pub fn corners_agree(a: &ShapeStructure, b: &ShapeStructure, tol: f64) -> bool {
    let dist = |x: f64, y: f64| {
        let d = (x - y).rem_euclid(2.0 * PI);
        d.min(2.0 * PI - d)
    };
    a.corners.len() == b.corners.len()
        && a.corners
            .iter()
            .all(|c| b.corners.iter().any(|d| dist(c.theta, d.theta) <= tol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::periodic::{make_grid, PeriodicGrid};
    use proptest::prelude::*;

    fn square(g: &PeriodicGrid, inradius: f64) -> RadialFunction {
        let s = inradius * 2f64.sqrt();
        RadialFunction::from_fn(*g, |t| (t.cos().abs() + t.sin().abs()) / s).unwrap()
    }

    #[test]
    fn constant_area_is_exact() {
        for n in [8, 10, 64, 256, 1000] {
            let g = make_grid(n).unwrap();
            let c = 1.37;
            let u = RadialFunction::constant(g, c).unwrap();
            assert!((area(&u) / (PI / (c * c)) - 1.0).abs() < 1e-12);
        }
        let g = make_grid(32).unwrap();
        let u = RadialFunction::constant(g, 1.0).unwrap();
        assert!(area_gradient(&u)
            .iter()
            .all(|&x| (x + g.spacing()).abs() < 1e-16));
    }

    #[test]
    fn area_derivatives_match_finite_differences() {
        let g = make_grid(40).unwrap();
        let u = RadialFunction::from_fn(g, |t| 1.3 + 0.2 * (3.0 * t).sin()).unwrap();
        let v: Vec<f64> = (0..40).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
        let shifted = |t: f64| {
            let w: Vec<f64> = u.values().iter().zip(&v).map(|(a, b)| a + t * b).collect();
            area_raw(g.spacing(), &w)
        };
        let grad: f64 = area_gradient(&u).iter().zip(&v).map(|(a, b)| a * b).sum();
        let t = 1e-6;
        let fd = (shifted(t) - shifted(-t)) / (2.0 * t);
        assert!((fd - grad).abs() <= 1e-7 * grad.abs());
        let t = 1e-4;
        let fd2 = (shifted(t) - 2.0 * shifted(0.0) + shifted(-t)) / (t * t);
        let form = area_hessian_form(&u, &v);
        assert!((fd2 - form).abs() <= 1e-7 * form.abs().max(1.0) * 10.0);
    }

    #[test]
    fn perimeter_examples() {
        let g = make_grid(64).unwrap();
        let u = RadialFunction::constant(g, 2.0).unwrap();
        assert!((perimeter(&u) - PI).abs() < 1e-13);

        let g = make_grid(512).unwrap();
        let sq = square(&g, 1.0);
        assert!((perimeter(&sq) - 8.0).abs() < 0.02 * 8.0);
        // The inscribed polyline is never longer.
        let pts = boundary_points(&sq);
        let poly: f64 = pts
            .windows(2)
            .map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt())
            .sum();
        // Chord ≤ arc holds for the exact perimeter; the midpoint rule is
        // within O(h²) of it.
        let h = g.spacing();
        assert!(poly <= perimeter(&sq) * (1.0 + h * h));
    }

    #[test]
    fn curvature_examples() {
        let g = make_grid(128).unwrap();
        let u = RadialFunction::constant(g, 1.7).unwrap();
        assert!(curvature(&u).iter().all(|k| (k - 1.7).abs() < 1e-12));

        // Supporting line x = L on |θ| < 1.
        let line = RadialFunction::from_fn(g, |t| (t.cos() / 0.9).max(0.3)).unwrap();
        let k = curvature(&line);
        for (i, t) in g.nodes().into_iter().enumerate() {
            if !(1.0..=2.0 * PI - 1.0).contains(&t) {
                assert!(k[i].abs() < 1e-3, "{i}: {}", k[i]);
            }
        }
    }

    #[test]
    fn curvature_of_ellipse() {
        let (ax, bx) = (1.0, 0.6);
        let mut prev = f64::INFINITY;
        for n in [128, 256, 512] {
            let g = make_grid(n).unwrap();
            let u = RadialFunction::from_fn(g, |t| {
                ((t.cos() / ax).powi(2) + (t.sin() / bx).powi(2)).sqrt()
            })
            .unwrap();
            let k = curvature(&u);
            let mut err: f64 = 0.0;
            for (i, t) in g.nodes().into_iter().enumerate() {
                let (x, y) = (t.cos() / u.values()[i], t.sin() / u.values()[i]);
                let (ct, st) = (x / ax, y / bx);
                let exact = ax * bx / (ax * ax * st * st + bx * bx * ct * ct).powf(1.5);
                err = err.max((k[i] - exact).abs() / exact);
            }
            let h = g.spacing();
            assert!(err < 2.0 * h * h, "n={n}: {err}");
            assert!(err < prev / 3.0);
            prev = err;
        }
    }

    #[test]
    fn circle_structure() {
        let g = make_grid(128).unwrap();
        let u = RadialFunction::constant(g, 1.0).unwrap();
        let s = analyze_structure(&u, 1.0, 2.0, &Default::default()).unwrap();
        assert_eq!(s.verdict, Verdict::HasArcs);
        assert!(s.corners.is_empty());
        assert_eq!(s.arcs_a, vec![[0, 127]]);
        assert!(s.describe().starts_with("HasArcs (circle u=c"));
    }

    #[test]
    fn interior_circle_has_arcs() {
        let g = make_grid(128).unwrap();
        let u = RadialFunction::constant(g, 1.5).unwrap();
        let s = analyze_structure(&u, 1.0, 2.0, &Default::default()).unwrap();
        assert_eq!(s.verdict, Verdict::HasArcs);
        assert!(s.arcs_a.is_empty() && s.arcs_b.is_empty());
    }

    #[test]
    fn square_is_polygon() {
        for n in [128, 256, 512] {
            let g = make_grid(n).unwrap();
            // Inradius 0.7 lies between 1/b = 0.5 and 1/a = 1; circumradius
            // 0.99 keeps the vertices inside r = 1.
            let u = square(&g, 0.7);
            let s = analyze_structure(&u, 1.0, 2.0, &Default::default()).unwrap();
            assert_eq!(s.verdict, Verdict::Polygon, "n={n}: {s:?}");
            assert_eq!(s.corners.len(), 4);
            for (c, want) in s.corners.iter().zip([0.0, PI / 2.0, PI, 1.5 * PI]) {
                assert!((c.theta - want).abs() < g.spacing());
            }
            assert_eq!(s.interior_corners, 4);
            assert_eq!(s.edges.len(), 4);
            let svg = svg_string(&u, Some(1.0), Some(2.0), Some(&s));
            assert_eq!(svg.matches(r#"class="corner""#).count(), 4);
        }
    }

    #[test]
    fn tangency_kink_is_part_of_an_edge() {
        // Triangle whose edges touch u = b at a node. On the grid each contact
        // carries an O(h) kink: two lines through the contact node, each
        // tangent to the circle less than half a cell away.
        let n = 96;
        let g = make_grid(n).unwrap();
        let d = 0.45 * g.spacing();
        let u = RadialFunction::from_fn(g, |t| {
            (0..3)
                .flat_map(|k| {
                    let phi = 2.0 * PI * k as f64 / 3.0;
                    [phi - d, phi + d]
                })
                .map(|phi| 2.0 * (t - phi).cos() / d.cos())
                .fold(f64::MIN, f64::max)
                .min(2.0)
        })
        .unwrap();
        let nu = cell_masses(g.spacing(), u.values());
        assert!(nu[0] > 0.5 * g.spacing(), "kink mass {}", nu[0]);
        let s = analyze_structure(&u, 1.0, 2.0, &Default::default()).unwrap();
        assert_eq!(s.verdict, Verdict::Polygon, "{s:?}");
        assert_eq!(s.corners.len(), 3);
        assert!(s.arcs_b.is_empty() && s.unclassified == 0);
    }

    #[test]
    fn shallow_corner_counts_at_every_resolution() {
        // Turning angle 0.06 is below the atom threshold 5h at N = 256.
        let phi = PI / 4.0 + 0.06;
        for n in [256, 512] {
            let g = make_grid(n).unwrap();
            let s2 = 0.7 * 2f64.sqrt();
            let u = RadialFunction::from_fn(g, |t| {
                ((t - phi).cos() / 0.7).max((t.cos().abs() + t.sin().abs()) / s2)
            })
            .unwrap();
            let s = analyze_structure(&u, 1.0, 2.0, &Default::default()).unwrap();
            assert_eq!(s.verdict, Verdict::Polygon, "n={n}: {s:?}");
            assert_eq!(s.corners.len(), 5, "n={n}");
        }
    }

    #[test]
    fn structure_rejects_infeasible() {
        let g = make_grid(64).unwrap();
        let dimple = RadialFunction::from_fn(g, |t| 1.5 - 0.3 * t.sin().abs()).unwrap();
        assert!(analyze_structure(&dimple, 1.0, 2.0, &Default::default()).is_err());
        let high = RadialFunction::constant(g, 2.5).unwrap();
        assert!(analyze_structure(&high, 1.0, 2.0, &Default::default()).is_err());
    }

    #[test]
    fn structure_json_fields() {
        let g = make_grid(128).unwrap();
        let s = analyze_structure(&square(&g, 0.7), 1.0, 2.0, &Default::default()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&s.to_json()).unwrap();
        for key in ["corners", "edges", "arcs_a", "arcs_b", "verdict"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert!(v["corners"][0].get("theta").is_some() && v["corners"][0].get("mass").is_some());
        assert_eq!(v["verdict"], "Polygon");
    }

    #[test]
    fn octagon_svg() {
        let g = make_grid(8).unwrap();
        let u = RadialFunction::constant(g, 1.0).unwrap();
        let svg = svg_string(&u, Some(1.0), Some(2.0), None);
        assert!(svg.contains(r#"viewBox="-1.1 -1.1 2.2 2.2""#));
        let pts = svg
            .split("points=\"")
            .nth(1)
            .unwrap()
            .split('"')
            .next()
            .unwrap();
        assert_eq!(pts.split_whitespace().count(), 9);
        assert_eq!(svg.matches("<circle").count(), 2);
    }

    #[test]
    fn runs_wrap() {
        let m = [true, false, true, true, false, true];
        assert_eq!(runs(&m), vec![[2, 3], [5, 0]]);
        assert_eq!(runs(&[false; 4]), Vec::<[usize; 2]>::new());
        assert_eq!(interval_nodes([5, 0], 6).collect::<Vec<_>>(), vec![5, 0]);
    }

    proptest! {
        #[test]
        fn feasible_reconstruction_is_convex(
            amps in prop::collection::vec(-1.0f64..1.0, 4),
            phases in prop::collection::vec(0.0f64..6.3, 4),
            n in (8usize..100).prop_map(|k| 2 * k),
        ) {
            // u = 1 + Σ ε_k cos(kθ + φ_k) with Σ|ε_k|(k² − 1) < 1.
            let budget: f64 = amps.iter().enumerate().map(|(j, a)| a.abs() * ((j + 2).pow(2) - 1) as f64).sum();
            let scale = if budget > 0.9 { 0.9 / budget } else { 1.0 };
            let g = make_grid(n).unwrap();
            let u = RadialFunction::from_fn(g, |t| {
                1.0 + amps.iter().zip(&phases).enumerate()
                    .map(|(j, (a, p))| scale * a * ((j + 2) as f64 * t + p).cos())
                    .sum::<f64>()
            }).unwrap();
            prop_assume!(cell_masses(g.spacing(), u.values()).iter().all(|&m| m >= 0.0));
            let pts = boundary_points(&u);
            let m = pts.len() - 1;
            for i in 0..m {
                let p0 = pts[i];
                let p1 = pts[(i + 1) % m];
                let p2 = pts[(i + 2) % m];
                let cross = (p1[0] - p0[0]) * (p2[1] - p1[1]) - (p1[1] - p0[1]) * (p2[0] - p1[0]);
                // ν ≥ 0 reads u_{i−1} + u_{i+1} ≥ (2 − h²)u_i while a convex
                // chordal polygon needs 2cos(h)·u_i: an O(h⁴) gap.
                let h = g.spacing();
                prop_assert!(cross >= -h.powi(4));
            }
        }
    }
}
