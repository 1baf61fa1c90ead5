//! Shape optimization over convex planar domains `{r < 1/u(θ)}` with the
//! linear convexity constraint `u'' + u ≥ 0`.

// `!(x > 0.0)` is used on purpose so that NaN fails the test; index loops
// mirror the stencil formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod certificate;
pub mod error;
pub mod functional;
pub mod geometry;
pub mod linalg;
pub mod periodic;
pub mod problem;
pub mod solver;

pub use certificate::{
    build_probe, corner_count_bound, recover_multipliers, second_order_check, stationarity_test,
    verify, CornerCountBound, KKTCertificate, ProbeOutcome, ProbePattern, ProbeSpec,
    SecondOrderProbe, Verification,
};
pub use error::{Error, Result};
pub use functional::{
    apply_cutoff, builtin, derivative_bounds, eval_functional, gradient, second_order_form,
    DerivativeBounds, FunctionalSpec, Params, Partials,
};
pub use geometry::{
    analyze_structure, corners_agree, ShapeStructure, StructureTolerances, Verdict,
};
pub use periodic::{
    check_feasibility, convexity_measure, lipschitz_bound_check, make_grid, staggered_derivative,
    ConvexityMeasure, FeasibilityReport, PeriodicGrid, RadialFunction, EPS_FEAS,
};
pub use problem::{ProblemSpec, Regime};
pub use solver::{
    multistart, project_feasible, refine, solve, MultistartResult, SolveResult, SolverOptions,
    Status,
};
