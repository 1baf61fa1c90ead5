//! Integrands `G(θ, u, p)`, the discrete functional
//! `j_h(u) = h Σ G(θ_{i+1/2}, ū_i, p_i)` with its exact gradient and second
//! variation, the builtin catalog and the cutoff wrapper.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::CyclicBanded;
use crate::periodic::RadialFunction;

/// Named real parameters of a functional.
pub type Params = BTreeMap<String, f64>;

/// `G` and its partial derivatives up to order two at one point.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Partials {
    pub g: f64,
    pub gu: f64,
    pub gp: f64,
    pub guu: f64,
    pub gup: f64,
    pub gpp: f64,
}

impl Partials {
    fn is_finite(&self) -> bool {
        [self.g, self.gu, self.gp, self.guu, self.gup, self.gpp]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// An integrand with hand-coded partial derivatives.
pub trait Integrand: Send + Sync {
    fn partials(&self, theta: f64, u: f64, p: f64) -> Partials;

    fn value(&self, theta: f64, u: f64, p: f64) -> f64 {
        self.partials(theta, u, p).g
    }
}

impl<F> Integrand for F
where
    F: Fn(f64, f64, f64) -> Partials + Send + Sync,
{
    fn partials(&self, theta: f64, u: f64, p: f64) -> Partials {
        self(theta, u, p)
    }
}

/// A scalar profile `x ↦ (f(x), f'(x), f''(x))`, used to build families
/// such as `h(p/u)` or `h₁(u) − p² h₂(u)`.
pub trait Profile: Send + Sync {
    fn eval(&self, x: f64) -> (f64, f64, f64);
}

impl<F> Profile for F
where
    F: Fn(f64) -> (f64, f64, f64) + Send + Sync,
{
    fn eval(&self, x: f64) -> (f64, f64, f64) {
        self(x)
    }
}

/// An integrand together with its identity and structural flags.
#[derive(Clone)]
pub struct FunctionalSpec {
    name: String,
    params: Params,
    even_in_p: bool,
    theta_independent: bool,
    integrand: Arc<dyn Integrand>,
}

impl fmt::Debug for FunctionalSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FunctionalSpec")
            .field("name", &self.name)
            .field("params", &self.params)
            .field("even_in_p", &self.even_in_p)
            .field("theta_independent", &self.theta_independent)
            .finish_non_exhaustive()
    }
}

impl FunctionalSpec {
    pub fn new(
        name: impl Into<String>,
        params: Params,
        even_in_p: bool,
        theta_independent: bool,
        integrand: Arc<dyn Integrand>,
    ) -> Self {
        FunctionalSpec {
            name: name.into(),
            params,
            even_in_p,
            theta_independent,
            integrand,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn param(&self, key: &str) -> Option<f64> {
        self.params.get(key).copied()
    }

    pub fn even_in_p(&self) -> bool {
        self.even_in_p
    }

    pub fn theta_independent(&self) -> bool {
        self.theta_independent
    }

    pub fn eval(&self, theta: f64, u: f64, p: f64) -> f64 {
        self.integrand.value(theta, u, p)
    }

    pub fn partials(&self, theta: f64, u: f64, p: f64) -> Partials {
        self.integrand.partials(theta, u, p)
    }

    /// Remarks about parameter choices that are legal but unusual for the
    /// annulus `[a, b]`.
    pub fn warnings(&self, a: f64, b: f64) -> Vec<String> {
        let mut out = Vec::new();
        if self.name == "quad_circle" {
            if let Some(c) = self.param("c") {
                if !(a < c && c < b) {
                    out.push(format!("quad_circle: c = {c} lies outside ({a}, {b})"));
                }
            }
        }
        for key in ["a", "b"] {
            if let Some(v) = self.param(key) {
                let expected = if key == "a" { a } else { b };
                if v != expected {
                    out.push(format!(
                        "{}: parameter {key} = {v} differs from the annulus bound {expected}",
                        self.name
                    ));
                }
            }
        }
        out
    }
}

/// Gradient and (optionally) Hessian of `j_h` at raw nodal values.
pub(crate) struct Assembly {
    pub grad: Vec<f64>,
    pub hess: Option<CyclicBanded>,
}

fn midpoint_partials(
    spec: &FunctionalSpec,
    h: f64,
    u: &[f64],
    i: usize,
) -> Result<(f64, f64, Partials)> {
    let n = u.len();
    let theta = (i as f64 + 0.5) * h;
    let ubar = 0.5 * (u[i] + u[(i + 1) % n]);
    let p = (u[(i + 1) % n] - u[i]) / h;
    let d = spec.partials(theta, ubar, p);
    if !d.is_finite() {
        return Err(Error::NonFinite {
            index: i,
            theta,
            u: ubar,
            p,
        });
    }
    Ok((ubar, p, d))
}

pub(crate) fn assemble(
    spec: &FunctionalSpec,
    h: f64,
    u: &[f64],
    with_hessian: bool,
) -> Result<Assembly> {
    let n = u.len();
    let mut grad = vec![0.0; n];
    let mut hess = with_hessian.then(|| CyclicBanded::zeros(n, 1));
    for i in 0..n {
        let (_, _, d) = midpoint_partials(spec, h, u, i)?;
        let j = (i + 1) % n;
        grad[i] += 0.5 * h * d.gu - d.gp;
        grad[j] += 0.5 * h * d.gu + d.gp;
        if let Some(hm) = hess.as_mut() {
            hm.add(i, 0, h * (0.25 * d.guu - d.gup / h + d.gpp / (h * h)));
            hm.add(j, 0, h * (0.25 * d.guu + d.gup / h + d.gpp / (h * h)));
            hm.add(i, 1, h * (0.25 * d.guu - d.gpp / (h * h)));
        }
    }
    Ok(Assembly { grad, hess })
}

pub(crate) fn value_raw(spec: &FunctionalSpec, h: f64, u: &[f64]) -> Result<f64> {
    let mut value = 0.0;
    for i in 0..u.len() {
        let (_, _, d) = midpoint_partials(spec, h, u, i)?;
        value += h * d.g;
    }
    Ok(value)
}

pub(crate) fn form_raw(spec: &FunctionalSpec, h: f64, u: &[f64], v: &[f64]) -> Result<f64> {
    let n = u.len();
    let mut s = 0.0;
    for i in 0..n {
        let (_, _, d) = midpoint_partials(spec, h, u, i)?;
        let vb = 0.5 * (v[i] + v[(i + 1) % n]);
        let vp = (v[(i + 1) % n] - v[i]) / h;
        s += d.guu * vb * vb + 2.0 * d.gup * vb * vp + d.gpp * vp * vp;
    }
    Ok(h * s)
}

/// `j_h(u)` by the midpoint rule on the staggered grid.
pub fn eval_functional(spec: &FunctionalSpec, u: &RadialFunction) -> Result<f64> {
    value_raw(spec, u.grid().spacing(), u.values())
}

/// Exact gradient of [`eval_functional`] with respect to the nodal values.
pub fn gradient(spec: &FunctionalSpec, u: &RadialFunction) -> Result<Vec<f64>> {
    Ok(assemble(spec, u.grid().spacing(), u.values(), false)?.grad)
}

/// Exact Hessian of `j_h` (symmetric cyclic tridiagonal).
pub fn hessian(spec: &FunctionalSpec, u: &RadialFunction) -> Result<CyclicBanded> {
    Ok(assemble(spec, u.grid().spacing(), u.values(), true)?
        .hess
        .expect("requested"))
}

/// `j_h''(u)(v, v)`.
pub fn second_order_form(spec: &FunctionalSpec, u: &RadialFunction, v: &[f64]) -> Result<f64> {
    if v.len() != u.len() {
        return Err(Error::LengthMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    form_raw(spec, u.grid().spacing(), u.values(), v)
}

/// Names accepted by [`builtin`].
pub const BUILTIN_NAMES: &[&str] = &[
    "quad_circle",
    "concave_circle_a",
    "concave_circle_b",
    "neg_perimeter",
    "area_minus_perimeter",
    "crouzeix",
    "newton_like",
    "degenerate_i",
    "cutoff_ii",
    "cutoff_iii",
];

/// Parameter names of a builtin, in the order they are resolved.
pub fn param_schema(name: &str) -> Option<&'static [&'static str]> {
    Some(match name {
        "quad_circle" => &["c"],
        "concave_circle_a" | "concave_circle_b" | "neg_perimeter" => &[],
        "area_minus_perimeter" => &["lambda"],
        "crouzeix" => &["k"],
        "newton_like" => &["a", "b", "c", "w", "s", "slope", "offset"],
        "degenerate_i" => &["a", "c"],
        "cutoff_ii" | "cutoff_iii" => &["a", "b"],
        _ => return None,
    })
}

fn resolve(name: &str, given: &Params) -> Result<Params> {
    let schema = param_schema(name).ok_or_else(|| Error::UnknownFunctional(name.to_string()))?;
    if let Some(k) = given.keys().find(|k| !schema.contains(&k.as_str())) {
        return Err(Error::InvalidParameter {
            functional: name.into(),
            message: if schema.is_empty() {
                format!("unknown parameter `{k}` (takes no parameters)")
            } else {
                format!(
                    "unknown parameter `{k}` (expected one of {})",
                    schema.join(", ")
                )
            },
        });
    }
    if let Some((k, v)) = given.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::InvalidParameter {
            functional: name.into(),
            message: format!("parameter `{k}` must be finite (got {v})"),
        });
    }
    let get = |k: &str, default: f64| given.get(k).copied().unwrap_or(default);
    let mut p = Params::new();
    for key in schema {
        let v = match *key {
            "a" => get("a", 1.0),
            "b" => get("b", 2.0),
            "c" if name == "quad_circle" => get("c", 1.5),
            "c" => get("c", 0.5 * (p["a"] + p.get("b").copied().unwrap_or(2.0))),
            "lambda" => get("lambda", 1.5),
            "k" | "w" | "slope" => get(key, 1.0),
            "s" => get("s", p["a"]),
            "offset" => get("offset", 0.0),
            _ => unreachable!(),
        };
        p.insert((*key).to_string(), v);
    }
    let invalid = |message: String| Error::InvalidParameter {
        functional: name.into(),
        message,
    };
    if let (Some(&a), Some(&b)) = (p.get("a"), p.get("b")) {
        if !(0.0 < a && a < b) {
            return Err(invalid(format!("need 0 < a < b (got a = {a}, b = {b})")));
        }
    }
    if let Some(&a) = p.get("a") {
        if a <= 0.0 {
            return Err(invalid(format!("need a > 0 (got {a})")));
        }
    }
    if name == "crouzeix" && p["k"] <= 0.0 {
        return Err(invalid(format!(
            "k must be > 0 for strict concavity (got {})",
            p["k"]
        )));
    }
    Ok(p)
}

/// Builds a catalog functional from its name and (possibly partial)
/// parameters; missing parameters take their defaults.
pub fn builtin(name: &str, params: &Params) -> Result<FunctionalSpec> {
    let p = resolve(name, params)?;
    let spec = match name {
        "quad_circle" => {
            let c = p["c"];
            let f = move |_: f64, u: f64, p: f64| Partials {
                g: 0.5 * ((u - c).powi(2) + p * p),
                gu: u - c,
                gp: p,
                guu: 1.0,
                gup: 0.0,
                gpp: 1.0,
            };
            FunctionalSpec::new(name, p, true, true, Arc::new(f))
        }
        "concave_circle_a" => {
            let f = |_: f64, u: f64, p: f64| Partials {
                g: 0.5 * (u * u - p * p),
                gu: u,
                gp: -p,
                guu: 1.0,
                gup: 0.0,
                gpp: -1.0,
            };
            FunctionalSpec::new(name, p, true, true, Arc::new(f))
        }
        "concave_circle_b" => {
            let f = |_: f64, u: f64, p: f64| Partials {
                g: -0.5 * (u * u + p * p),
                gu: -u,
                gp: -p,
                guu: -1.0,
                gup: 0.0,
                gpp: -1.0,
            };
            FunctionalSpec::new(name, p, true, true, Arc::new(f))
        }
        "neg_perimeter" => FunctionalSpec::new(
            name,
            p,
            true,
            true,
            Arc::new(|_: f64, u: f64, p: f64| area_perimeter(0.0, u, p)),
        ),
        "area_minus_perimeter" => {
            let lambda = p["lambda"];
            FunctionalSpec::new(
                name,
                p,
                true,
                true,
                Arc::new(move |_: f64, u: f64, p: f64| area_perimeter(lambda, u, p)),
            )
        }
        "crouzeix" => {
            let k = p["k"];
            let h = Arc::new(move |t: f64| (-k * t * t, -2.0 * k * t, -2.0 * k));
            return Ok(crouzeix_spec(name, p, h));
        }
        "newton_like" => {
            let (c, w, s, slope, offset) = (p["c"], p["w"], p["s"], p["slope"], p["offset"]);
            let h1 = Arc::new(move |u: f64| (w * (u - c).powi(2), 2.0 * w * (u - c), 2.0 * w));
            let h2 = Arc::new(move |u: f64| (slope * (u - s) + offset, slope, 0.0));
            return Ok(newton_like_spec(name, p, h1, h2));
        }
        "degenerate_i" => {
            let (a, c) = (p["a"], p["c"]);
            let f = move |_: f64, u: f64, p: f64| {
                let d = u - a;
                Partials {
                    g: 0.5 * ((u - c).powi(2) + d * d * p * p),
                    gu: (u - c) + d * p * p,
                    gp: d * d * p,
                    guu: 1.0 + p * p,
                    gup: 2.0 * d * p,
                    gpp: d * d,
                }
            };
            FunctionalSpec::new(name, p, true, true, Arc::new(f))
        }
        "cutoff_ii" | "cutoff_iii" => {
            let (a, b) = (p["a"], p["b"]);
            // Both are ±u²/2 − φ(u)p²/2.
            let sign = if name == "cutoff_ii" { 1.0 } else { -1.0 };
            let f = move |_: f64, u: f64, p: f64| {
                let (phi, dphi, ddphi) = step_between(u, a, b);
                Partials {
                    g: 0.5 * (sign * u * u - phi * p * p),
                    gu: sign * u - 0.5 * dphi * p * p,
                    gp: -phi * p,
                    guu: sign - 0.5 * ddphi * p * p,
                    gup: -dphi * p,
                    gpp: -phi,
                }
            };
            FunctionalSpec::new(name, p, true, true, Arc::new(f))
        }
        _ => unreachable!("validated by resolve"),
    };
    Ok(spec)
}

/// `λ/(2u²) − √(u² + p²)/u²`: area weight minus perimeter.
fn area_perimeter(lambda: f64, u: f64, p: f64) -> Partials {
    let s = (u * u + p * p).sqrt();
    let u2 = u * u;
    let u3 = u2 * u;
    let u4 = u2 * u2;
    let s3 = s * s * s;
    Partials {
        g: 0.5 * lambda / u2 - s / u2,
        gu: -lambda / u3 - 1.0 / (u * s) + 2.0 * s / u3,
        gp: -p / (s * u2),
        guu: 3.0 * lambda / u4 + (s * s + u2) / (u2 * s3) + 2.0 / (s * u2) - 6.0 * s / u4,
        gup: p / (u * s3) + 2.0 * p / (s * u3),
        gpp: -1.0 / s3,
    }
}

fn crouzeix_spec(name: &str, params: Params, h: Arc<dyn Profile>) -> FunctionalSpec {
    let f = move |_: f64, u: f64, p: f64| {
        let t = p / u;
        let (v, d1, d2) = h.eval(t);
        let u2 = u * u;
        Partials {
            g: v,
            gu: -d1 * p / u2,
            gp: d1 / u,
            guu: d2 * p * p / (u2 * u2) + 2.0 * d1 * p / (u2 * u),
            gup: -d2 * p / (u2 * u) - d1 / u2,
            gpp: d2 / u2,
        }
    };
    FunctionalSpec::new(name, params, true, true, Arc::new(f))
}

/// `G(u, p) = h(p/u)` for a user-supplied even, strictly concave `h`.
///
/// The profile is sampled on `[-8, 8]` to reject odd or non-concave inputs.
pub fn crouzeix_with(h: Arc<dyn Profile>) -> Result<FunctionalSpec> {
    for k in 0..=160 {
        let t = -8.0 + 0.1 * k as f64;
        let (v, _, d2) = h.eval(t);
        let (w, _, _) = h.eval(-t);
        if (v - w).abs() > 1e-12 * (1.0 + v.abs()) {
            return Err(Error::InvalidParameter {
                functional: "crouzeix".into(),
                message: format!("profile is not even: h({t}) = {v}, h({}) = {w}", -t),
            });
        }
        if !(d2 < 0.0) {
            return Err(Error::InvalidParameter {
                functional: "crouzeix".into(),
                message: format!("profile is not strictly concave: h''({t}) = {d2}"),
            });
        }
    }
    Ok(crouzeix_spec("crouzeix", Params::new(), h))
}

fn newton_like_spec(
    name: &str,
    params: Params,
    h1: Arc<dyn Profile>,
    h2: Arc<dyn Profile>,
) -> FunctionalSpec {
    let f = move |_: f64, u: f64, p: f64| {
        let (a, da, dda) = h1.eval(u);
        let (b, db, ddb) = h2.eval(u);
        Partials {
            g: a - p * p * b,
            gu: da - p * p * db,
            gp: -2.0 * p * b,
            guu: dda - p * p * ddb,
            gup: -2.0 * p * db,
            gpp: -2.0 * b,
        }
    };
    FunctionalSpec::new(name, params, true, true, Arc::new(f))
}

/// `G(u, p) = h₁(u) − p² h₂(u)` for user-supplied profiles.
pub fn newton_like_with(h1: Arc<dyn Profile>, h2: Arc<dyn Profile>) -> FunctionalSpec {
    newton_like_spec("newton_like", Params::new(), h1, h2)
}

/// Quintic smoothstep `S(x) = 10x³ − 15x⁴ + 6x⁵` clamped to `[0, 1]`, with
/// first and second derivatives. `S` is C² on the whole line.
pub fn smoothstep(x: f64) -> (f64, f64, f64) {
    if x <= 0.0 {
        (0.0, 0.0, 0.0)
    } else if x >= 1.0 {
        (1.0, 0.0, 0.0)
    } else {
        let x2 = x * x;
        (
            x2 * x * (10.0 - 15.0 * x + 6.0 * x2),
            30.0 * x2 * (1.0 - x).powi(2),
            60.0 * x * (1.0 - x) * (1.0 - 2.0 * x),
        )
    }
}

/// `φ(u)`: 0 below `a`, 1 above `b`, C² in between.
fn step_between(u: f64, a: f64, b: f64) -> (f64, f64, f64) {
    let w = b - a;
    let (s, ds, dds) = smoothstep((u - a) / w);
    (s, ds / w, dds / (w * w))
}

/// The bound `C(b) = 2πb` on `|u'|` for convex `u ≤ b`.
pub fn lipschitz_constant(b: f64) -> f64 {
    2.0 * PI * b
}

/// Cutoff factor in `u`: 1 on `[a, b]`, 0 outside `[a/2, 2b]`.
fn eta_u(u: f64, a: f64, b: f64) -> (f64, f64, f64) {
    if u < a {
        let w = 0.5 * a;
        let (s, ds, dds) = smoothstep((u - w) / w);
        (s, ds / w, dds / (w * w))
    } else if u > b {
        let w = b;
        let (s, ds, dds) = smoothstep((2.0 * b - u) / w);
        (s, -ds / w, dds / (w * w))
    } else {
        (1.0, 0.0, 0.0)
    }
}

/// Cutoff factor in `p`: 1 on `[−C, C]`, 0 outside `[−2C, 2C]`.
fn eta_p(p: f64, c: f64) -> (f64, f64, f64) {
    let q = p.abs();
    if q <= c {
        return (1.0, 0.0, 0.0);
    }
    let (s, ds, dds) = smoothstep((2.0 * c - q) / c);
    (s, -p.signum() * ds / c, dds / (c * c))
}

/// Multiplies `G` by a C² bump `η(u, p)` equal to 1 on
/// `[a, b] × [−C(b), C(b)]` and vanishing outside `[a/2, 2b] × [−2C(b), 2C(b)]`.
pub fn apply_cutoff(spec: &FunctionalSpec, a: f64, b: f64) -> FunctionalSpec {
    let inner = spec.integrand.clone();
    let c = lipschitz_constant(b);
    let f = move |theta: f64, u: f64, p: f64| {
        let (eu, eu1, eu2) = eta_u(u, a, b);
        let (ep, ep1, ep2) = eta_p(p, c);
        if eu == 0.0 && eu1 == 0.0 && eu2 == 0.0 || ep == 0.0 && ep1 == 0.0 && ep2 == 0.0 {
            return Partials::default();
        }
        let d = inner.partials(theta, u, p);
        if eu == 1.0 && ep == 1.0 && eu1 == 0.0 && ep1 == 0.0 {
            return d;
        }
        let e = eu * ep;
        let e_u = eu1 * ep;
        let e_p = eu * ep1;
        let e_uu = eu2 * ep;
        let e_up = eu1 * ep1;
        let e_pp = eu * ep2;
        Partials {
            g: e * d.g,
            gu: e_u * d.g + e * d.gu,
            gp: e_p * d.g + e * d.gp,
            guu: e_uu * d.g + 2.0 * e_u * d.gu + e * d.guu,
            gup: e_up * d.g + e_u * d.gp + e_p * d.gu + e * d.gup,
            gpp: e_pp * d.g + 2.0 * e_p * d.gp + e * d.gpp,
        }
    };
    FunctionalSpec::new(
        format!("{}+cutoff", spec.name),
        spec.params.clone(),
        spec.even_in_p,
        spec.theta_independent,
        Arc::new(f),
    )
}

/// Extremes of the second partials over `R = 𝕋 × [a, b] × [−C(b), C(b)]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivativeBounds {
    /// `sup |G_uu|`.
    pub k_uu: f64,
    /// `sup |G_up|`.
    pub k_up: f64,
    /// `inf (−G_pp)`; positive exactly when `G` is strongly concave in `p` on `R`.
    pub k_pp: f64,
    pub c_b: f64,
    pub samples: usize,
    pub strongly_concave: bool,
}

/// Estimates [`DerivativeBounds`] by sampling `samples` points per axis
/// (the θ axis is skipped for θ-independent integrands).
pub fn derivative_bounds(
    spec: &FunctionalSpec,
    a: f64,
    b: f64,
    samples: usize,
) -> Result<DerivativeBounds> {
    if samples < 64 {
        return Err(Error::InvalidParameter {
            functional: spec.name.clone(),
            message: format!(
                "derivative_bounds needs at least 64 samples per axis (got {samples})"
            ),
        });
    }
    let c_b = lipschitz_constant(b);
    let n_theta = if spec.theta_independent { 1 } else { samples };
    let mut k_uu: f64 = 0.0;
    let mut k_up: f64 = 0.0;
    let mut k_pp = f64::INFINITY;
    let step = |lo: f64, hi: f64, k: usize| lo + (hi - lo) * k as f64 / (samples - 1) as f64;
    for it in 0..n_theta {
        let theta = 2.0 * PI * it as f64 / n_theta as f64;
        for iu in 0..samples {
            let u = step(a, b, iu);
            for ip in 0..samples {
                let p = step(-c_b, c_b, ip);
                let d = spec.partials(theta, u, p);
                k_uu = k_uu.max(d.guu.abs());
                k_up = k_up.max(d.gup.abs());
                k_pp = k_pp.min(-d.gpp);
            }
        }
    }
    Ok(DerivativeBounds {
        k_uu,
        k_up,
        k_pp,
        c_b,
        samples,
        strongly_concave: k_pp > 0.0,
    })
}

/// `inf (−G_pp)` along the discrete solution path `(θ_{i+1/2}, ū_i, p_i)`.
pub fn k_pp_along(spec: &FunctionalSpec, u: &RadialFunction) -> f64 {
    let h = u.grid().spacing();
    let v = u.values();
    let n = v.len();
    (0..n)
        .map(|i| {
            let ub = 0.5 * (v[i] + v[(i + 1) % n]);
            let p = (v[(i + 1) % n] - v[i]) / h;
            -spec.partials((i as f64 + 0.5) * h, ub, p).gpp
        })
        .fold(f64::INFINITY, f64::min)
}
