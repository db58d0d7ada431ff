//! Built-in benchmark problems with ground truths, and error metrics on
//! uniform evaluation grids.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::loss::{
    scalar_fn, BoundaryCondition, Coefficient, Equation, Field, FieldKind, GaugePin, MetricSpec,
    Parameter, PdeSystem, ScalarFn, Term,
};
use crate::solvers::SolverKind;
use crate::{BoxDomain, PsmError, Result, Surrogate};

pub const BUILTIN_NAMES: [&str; 8] = [
    "poisson2d-hard",
    "poisson4d",
    "poisson2d-inverse",
    "qho21",
    "qho31",
    "qho-inverse",
    "ns-forward",
    "ns-inverse",
];

/// Settings a problem runs with unless overridden.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProblemDefaults {
    pub solver: SolverKind,
    pub n_domain: usize,
    pub n_boundary: usize,
    pub pde_metric: MetricSpec,
    /// Reduced degrees for quick runs.
    pub smoke_n_domain: usize,
    pub smoke_n_boundary: usize,
    /// Uniform evaluation points per axis.
    pub eval_points: usize,
    pub tau: f64,
    pub tau_growth: f64,
}

/// A named PDE problem with its discretisation-independent description.
#[derive(Clone)]
pub struct ProblemSpec {
    pub name: String,
    pub title: String,
    pub domain: BoxDomain,
    pub system: PdeSystem,
    /// Exact solution per field name.
    pub truth: Vec<(String, ScalarFn)>,
    /// Fields whose errors are reported.
    pub error_fields: Vec<String>,
    pub param_truth: BTreeMap<String, f64>,
    /// Field fitted to grid samples of the given function (inverse problems).
    pub inverse_data: Option<(usize, ScalarFn)>,
    pub defaults: ProblemDefaults,
    pub notes: Vec<String>,
}

impl std::fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("domain", &self.domain)
            .field("defaults", &self.defaults)
            .finish_non_exhaustive()
    }
}

impl ProblemSpec {
    pub fn is_inverse(&self) -> bool {
        self.inverse_data.is_some()
    }

    pub fn truth_of(&self, field: &str) -> Option<&ScalarFn> {
        self.truth.iter().find(|(n, _)| n == field).map(|(_, f)| f)
    }
}

/// Look up a built-in problem by name.
pub fn builtin(name: &str) -> Result<ProblemSpec> {
    match name {
        "poisson2d-hard" => Ok(poisson2d_hard()),
        "poisson4d" => Ok(poisson4d()),
        "poisson2d-inverse" => Ok(poisson2d_inverse()),
        "qho21" => qho_forward(21.0, BoxDomain::cube(2, -5.3, 5.3)?),
        "qho31" => qho_forward(31.0, BoxDomain::reference(2)),
        "qho-inverse" => qho_inverse(),
        "ns-forward" => Ok(navier_stokes_forward()),
        "ns-inverse" => Ok(navier_stokes_inverse()),
        _ => Err(PsmError::InvalidArgument(format!(
            "unknown problem '{name}'; valid names: {}",
            BUILTIN_NAMES.join(", ")
        ))),
    }
}

fn unknown(name: &str) -> Field {
    Field {
        name: name.into(),
        kind: FieldKind::Unknown,
    }
}

fn lin(field: usize, beta: Vec<usize>, coeff: Coefficient) -> Term {
    Term::Linear { field, beta, coeff }
}

/// Unit multi-index `k · e_axis` in `m` dimensions.
fn e(m: usize, axis: usize, k: usize) -> Vec<usize> {
    let mut b = vec![0; m];
    b[axis] = k;
    b
}

/// `Σ_i scale · ∂²_i u_field`.
fn laplacian_terms(m: usize, field: usize, scale: f64) -> Vec<Term> {
    (0..m)
        .map(|i| lin(field, e(m, i, 2), Coefficient::Const(scale)))
        .collect()
}

fn defaults(
    solver: SolverKind,
    n_domain: usize,
    n_boundary: usize,
    metric: MetricSpec,
) -> ProblemDefaults {
    ProblemDefaults {
        solver,
        n_domain,
        n_boundary,
        pde_metric: metric,
        smoke_n_domain: n_domain.min(12),
        smoke_n_boundary: n_boundary.min(12),
        eval_points: 100,
        tau: 0.1,
        tau_growth: 1.0,
    }
}

// ------------------------------------------------------------------ Poisson

const HARD_C: f64 = 0.1;
const HARD_A: f64 = 0.1;
const HARD_BETA: f64 = 5.0;
const HARD_OMEGA: f64 = 10.0 * PI;

fn hard_s(t: f64) -> f64 {
    HARD_A * (HARD_OMEGA * t).sin() + (HARD_BETA * t).tanh()
}

fn hard_s2(t: f64) -> f64 {
    let th = (HARD_BETA * t).tanh();
    let sech2 = 1.0 - th * th;
    -HARD_A * HARD_OMEGA * HARD_OMEGA * (HARD_OMEGA * t).sin()
        - 2.0 * HARD_BETA * HARD_BETA * th * sech2
}

/// `u = C s(x) s(y)` with `s(t) = A sin(ωt) + tanh(βt)`.
pub fn poisson2d_hard_solution(x: &[f64]) -> f64 {
    HARD_C * hard_s(x[0]) * hard_s(x[1])
}

/// The stated forcing `C s(y) s''(x) + C s(x) s''(y)`, which equals `Δu`.
pub fn poisson2d_hard_forcing(x: &[f64]) -> f64 {
    HARD_C * (hard_s(x[1]) * hard_s2(x[0]) + hard_s(x[0]) * hard_s2(x[1]))
}

/// 2D Poisson problem with sharp tanh transitions and oscillations,
/// `Δu = f` on `[-1,1]²` with Dirichlet data from the product solution.
pub fn poisson2d_hard() -> ProblemSpec {
    let m = 2;
    let system = PdeSystem {
        dim: m,
        fields: vec![unknown("u")],
        equations: vec![Equation {
            label: "poisson".into(),
            terms: laplacian_terms(m, 0, 1.0),
            rhs: Coefficient::Func(scalar_fn(poisson2d_hard_forcing)),
            metric: None,
        }],
        boundaries: vec![BoundaryCondition {
            field: 0,
            values: Coefficient::Func(scalar_fn(poisson2d_hard_solution)),
        }],
        ..Default::default()
    };
    ProblemSpec {
        name: "poisson2d-hard".into(),
        title: "2D Poisson, hard transitions".into(),
        domain: BoxDomain::reference(m),
        system,
        truth: vec![("u".into(), scalar_fn(poisson2d_hard_solution))],
        error_fields: vec!["u".into()],
        param_truth: BTreeMap::new(),
        inverse_data: None,
        defaults: defaults(SolverKind::Ad, 50, 100, MetricSpec::dual_star()),
        notes: vec![],
    }
}

/// `g = sin(x₁)cos(x₂)sin(x₃)cos(x₄)`.
pub fn poisson4d_solution(x: &[f64]) -> f64 {
    x[0].sin() * x[1].cos() * x[2].sin() * x[3].cos()
}

/// `Δu = −4g` on `[-1,1]⁴` with `u = g` on the boundary.
pub fn poisson4d() -> ProblemSpec {
    let m = 4;
    let system = PdeSystem {
        dim: m,
        fields: vec![unknown("u")],
        equations: vec![Equation {
            label: "poisson".into(),
            terms: laplacian_terms(m, 0, 1.0),
            rhs: Coefficient::Func(scalar_fn(|x| -4.0 * poisson4d_solution(x))),
            metric: None,
        }],
        boundaries: vec![BoundaryCondition {
            field: 0,
            values: Coefficient::Func(scalar_fn(poisson4d_solution)),
        }],
        ..Default::default()
    };
    let mut d = defaults(SolverKind::Ad, 8, 8, MetricSpec::dual_star());
    d.eval_points = 20;
    d.smoke_n_domain = 5;
    d.smoke_n_boundary = 5;
    ProblemSpec {
        name: "poisson4d".into(),
        title: "4D Poisson".into(),
        domain: BoxDomain::reference(m),
        system,
        truth: vec![("u".into(), scalar_fn(poisson4d_solution))],
        error_fields: vec!["u".into()],
        param_truth: BTreeMap::new(),
        inverse_data: None,
        defaults: d,
        notes: vec![],
    }
}

pub const POISSON_INVERSE_MU: f64 = 2.0 * PI * PI;

pub fn poisson_inverse_solution(x: &[f64]) -> f64 {
    (PI * x[0]).cos() * (PI * x[1]).sin()
}

/// Recover `μ` in `−Δu = μ cos(πx) sin(πy)` from samples of `u`.
pub fn poisson2d_inverse() -> ProblemSpec {
    let m = 2;
    let mut terms = laplacian_terms(m, 0, -1.0);
    terms.push(Term::ParamSource {
        param: 0,
        source: Coefficient::Func(scalar_fn(|x| -poisson_inverse_solution(x))),
    });
    let system = PdeSystem {
        dim: m,
        fields: vec![unknown("u")],
        params: vec![Parameter {
            name: "mu".into(),
            initial: 0.0,
        }],
        equations: vec![Equation {
            label: "poisson".into(),
            terms,
            rhs: Coefficient::Const(0.0),
            metric: None,
        }],
        boundaries: vec![BoundaryCondition {
            field: 0,
            values: Coefficient::Func(scalar_fn(poisson_inverse_solution)),
        }],
        ..Default::default()
    };
    let mut d = defaults(SolverKind::GfImplicitEuler, 30, 100, MetricSpec::l2());
    d.tau = 0.1;
    d.tau_growth = 2.0;
    ProblemSpec {
        name: "poisson2d-inverse".into(),
        title: "2D Poisson inverse".into(),
        domain: BoxDomain::reference(m),
        system,
        truth: vec![("u".into(), scalar_fn(poisson_inverse_solution))],
        error_fields: vec!["u".into()],
        param_truth: [("mu".to_string(), POISSON_INVERSE_MU)]
            .into_iter()
            .collect(),
        inverse_data: Some((0, scalar_fn(poisson_inverse_solution))),
        defaults: d,
        notes: vec![],
    }
}

// ------------------------------------------------------------------ QHO

/// Physicists' Hermite polynomial `H_n(x)`.
pub fn hermite(n: usize, x: f64) -> f64 {
    let (mut h0, mut h1) = (1.0, 2.0 * x);
    if n == 0 {
        return h0;
    }
    for k in 1..n {
        let h2 = 2.0 * x * h1 - 2.0 * k as f64 * h0;
        h0 = h1;
        h1 = h2;
    }
    h1
}

/// `e^{−x²/2} H_n(x) / √(2ⁿ n!)`, by the normalised three-term recurrence.
pub fn hermite_function(n: usize, x: f64) -> f64 {
    let w = (-0.5 * x * x).exp();
    let (mut p0, mut p1) = (w, std::f64::consts::SQRT_2 * x * w);
    if n == 0 {
        return p0;
    }
    for k in 1..n {
        let kf = k as f64;
        let p2 = (2.0 / (kf + 1.0)).sqrt() * x * p1 - (kf / (kf + 1.0)).sqrt() * p0;
        p0 = p1;
        p1 = p2;
    }
    p1
}

/// Oscillator eigenfunction `π^{-1/4} e^{−|x|²/2} H_{n₁}(x₁)H_{n₂}(x₂)/√(2^{n₁+n₂} n₁! n₂!)`.
pub fn qho_eigenfunction(n1: usize, n2: usize, x: &[f64]) -> f64 {
    PI.powf(-0.25) * hermite_function(n1, x[0]) * hermite_function(n2, x[1])
}

/// Symmetric index split `μ = n₁ + n₂ + 1` with `n₁ = n₂`.
pub fn qho_indices(mu: f64) -> Result<(usize, usize)> {
    let s = mu - 1.0;
    if mu.fract() != 0.0 || s < 0.0 || s % 2.0 != 0.0 {
        return Err(PsmError::InvalidArgument(format!(
            "eigenvalue {mu} is not n₁ + n₂ + 1 with n₁ = n₂"
        )));
    }
    let n = (s / 2.0) as usize;
    Ok((n, n))
}

/// `−½Δu + ½|x|²u − μu = 0` terms for field 0.
fn qho_terms(mu: Option<f64>) -> Vec<Term> {
    let mut terms = laplacian_terms(2, 0, -0.5);
    let mu_fixed = mu.unwrap_or(0.0);
    terms.push(lin(
        0,
        vec![0, 0],
        Coefficient::Func(scalar_fn(move |x| {
            0.5 * (x[0] * x[0] + x[1] * x[1]) - mu_fixed
        })),
    ));
    if mu.is_none() {
        terms.push(Term::ParamLinear {
            param: 0,
            field: 0,
            beta: vec![0, 0],
            coeff: Coefficient::Const(-1.0),
        });
    }
    terms
}

/// Oscillator eigenproblem at a fixed eigenvalue with Dirichlet data from the
/// eigenfunction.
pub fn qho_forward(mu: f64, domain: BoxDomain) -> Result<ProblemSpec> {
    let (n1, n2) = qho_indices(mu)?;
    if domain.dim() != 2 {
        return Err(PsmError::InvalidArgument(
            "oscillator problems are 2D".into(),
        ));
    }
    let truth = scalar_fn(move |x| qho_eigenfunction(n1, n2, x));
    let system = PdeSystem {
        dim: 2,
        fields: vec![unknown("u")],
        equations: vec![Equation {
            label: "schroedinger".into(),
            terms: qho_terms(Some(mu)),
            rhs: Coefficient::Const(0.0),
            metric: None,
        }],
        boundaries: vec![BoundaryCondition {
            field: 0,
            values: Coefficient::Func(truth.clone()),
        }],
        ..Default::default()
    };
    let (nd, nb) = if domain.interval(0).1 > 1.0 {
        (30, 100)
    } else {
        (50, 200)
    };
    let name = format!("qho{}", mu as i64);
    Ok(ProblemSpec {
        title: format!("QHO forward, mu = {mu}"),
        name,
        domain,
        system,
        truth: vec![("u".into(), truth)],
        error_fields: vec!["u".into()],
        param_truth: BTreeMap::new(),
        inverse_data: None,
        defaults: defaults(SolverKind::Ad, nd, nb, MetricSpec::dual_star()),
        notes: vec![format!("eigenfunction indices n1 = {n1}, n2 = {n2}")],
    })
}

pub const QHO_INVERSE_MU: f64 = 9.0;

/// Recover the eigenvalue `μ = 9` from samples of its eigenfunction on
/// `[-5.3, 5.3]²`.
pub fn qho_inverse() -> Result<ProblemSpec> {
    let (n1, n2) = qho_indices(QHO_INVERSE_MU)?;
    let truth = scalar_fn(move |x| qho_eigenfunction(n1, n2, x));
    let system = PdeSystem {
        dim: 2,
        fields: vec![unknown("u")],
        params: vec![Parameter {
            name: "mu".into(),
            initial: 0.0,
        }],
        equations: vec![Equation {
            label: "schroedinger".into(),
            terms: qho_terms(None),
            rhs: Coefficient::Const(0.0),
            metric: None,
        }],
        boundaries: vec![BoundaryCondition {
            field: 0,
            values: Coefficient::Func(truth.clone()),
        }],
        ..Default::default()
    };
    let mut d = defaults(SolverKind::GfImplicitEuler, 50, 200, MetricSpec::l2());
    d.tau = 0.1;
    d.tau_growth = 2.0;
    Ok(ProblemSpec {
        name: "qho-inverse".into(),
        title: "QHO inverse, mu = 9".into(),
        domain: BoxDomain::cube(2, -5.3, 5.3)?,
        system,
        truth: vec![("u".into(), truth.clone())],
        error_fields: vec!["u".into()],
        param_truth: [("mu".to_string(), QHO_INVERSE_MU)].into_iter().collect(),
        inverse_data: Some((0, truth)),
        defaults: d,
        notes: vec![format!("eigenfunction indices n1 = {n1}, n2 = {n2}")],
    })
}

// ------------------------------------------------------------------ Navier–Stokes

pub const NS_NU: f64 = 0.05;

pub fn ns_u1(x: &[f64]) -> f64 {
    -(PI * x[0]).sin() * (PI * x[1]).cos()
}

pub fn ns_u2(x: &[f64]) -> f64 {
    (PI * x[0]).cos() * (PI * x[1]).sin()
}

pub fn ns_p(x: &[f64]) -> f64 {
    x[0] * (PI * x[1]).exp()
}

/// The stated momentum forcing `(f₁, f₂)`.
pub fn ns_forcing(x: &[f64]) -> [f64; 2] {
    let (u1, u2) = (ns_u1(x), ns_u2(x));
    let cc = PI * (PI * x[0]).cos() * (PI * x[1]).cos();
    let ss = PI * (PI * x[0]).sin() * (PI * x[1]).sin();
    let ey = (PI * x[1]).exp();
    [
        2.0 * NS_NU * PI * PI * u1 - cc * u1 + ss * u2 + ey,
        2.0 * NS_NU * PI * PI * u2 + cc * u2 - ss * u1 + PI * x[0] * ey,
    ]
}

/// Momentum equation for velocity component `comp` (0 or 1).
///
/// Fields: 0 = u₁, 1 = u₂, 2 = p. With `nu_param`, viscosity is parameter 0.
fn momentum(comp: usize, nu_param: bool) -> Equation {
    let mut terms = Vec::new();
    for axis in 0..2 {
        let beta = e(2, axis, 2);
        terms.push(if nu_param {
            Term::ParamLinear {
                param: 0,
                field: comp,
                beta,
                coeff: Coefficient::Const(-1.0),
            }
        } else {
            lin(comp, beta, Coefficient::Const(-NS_NU))
        });
    }
    for axis in 0..2 {
        terms.push(Term::Advection {
            velocity: axis,
            field: comp,
            beta: e(2, axis, 1),
            coeff: Coefficient::Const(1.0),
        });
    }
    terms.push(lin(2, e(2, comp, 1), Coefficient::Const(1.0)));
    Equation {
        label: format!("momentum {}", comp + 1),
        terms,
        rhs: Coefficient::Func(scalar_fn(move |x| ns_forcing(x)[comp])),
        metric: None,
    }
}

fn ns_truth() -> Vec<(String, ScalarFn)> {
    vec![
        ("u1".into(), scalar_fn(ns_u1)),
        ("u2".into(), scalar_fn(ns_u2)),
        ("p".into(), scalar_fn(ns_p)),
    ]
}

/// Steady incompressible Navier–Stokes with `ν = 0.05`, velocity Dirichlet
/// data and the pressure pinned at the first grid node.
pub fn navier_stokes_forward() -> ProblemSpec {
    let system = PdeSystem {
        dim: 2,
        fields: vec![unknown("u1"), unknown("u2"), unknown("p")],
        equations: vec![
            momentum(0, false),
            momentum(1, false),
            Equation {
                label: "divergence".into(),
                terms: vec![
                    lin(0, vec![1, 0], Coefficient::Const(1.0)),
                    lin(1, vec![0, 1], Coefficient::Const(1.0)),
                ],
                rhs: Coefficient::Const(0.0),
                metric: Some(MetricSpec::l2()),
            },
        ],
        boundaries: vec![
            BoundaryCondition {
                field: 0,
                values: Coefficient::Func(scalar_fn(ns_u1)),
            },
            BoundaryCondition {
                field: 1,
                values: Coefficient::Func(scalar_fn(ns_u2)),
            },
        ],
        pins: vec![GaugePin {
            field: 2,
            value: Coefficient::Func(scalar_fn(ns_p)),
        }],
        ..Default::default()
    };
    ProblemSpec {
        name: "ns-forward".into(),
        title: "Navier-Stokes forward".into(),
        domain: BoxDomain::reference(2),
        system,
        truth: ns_truth(),
        error_fields: vec!["u1".into(), "u2".into()],
        param_truth: BTreeMap::new(),
        inverse_data: None,
        defaults: defaults(SolverKind::QuasiNewton, 30, 100, MetricSpec::dual_star()),
        notes: vec![],
    }
}

/// Recover `ν` and the pressure from the exact velocity field.
pub fn navier_stokes_inverse() -> ProblemSpec {
    let system = PdeSystem {
        dim: 2,
        fields: vec![
            Field {
                name: "u1".into(),
                kind: FieldKind::Known(Coefficient::Func(scalar_fn(ns_u1))),
            },
            Field {
                name: "u2".into(),
                kind: FieldKind::Known(Coefficient::Func(scalar_fn(ns_u2))),
            },
            unknown("p"),
        ],
        params: vec![Parameter {
            name: "nu".into(),
            initial: 0.0,
        }],
        equations: vec![momentum(0, true), momentum(1, true)],
        pins: vec![GaugePin {
            field: 2,
            value: Coefficient::Func(scalar_fn(ns_p)),
        }],
        ..Default::default()
    };
    ProblemSpec {
        name: "ns-inverse".into(),
        title: "Navier-Stokes inverse".into(),
        domain: BoxDomain::reference(2),
        system,
        truth: ns_truth(),
        error_fields: vec!["p".into()],
        param_truth: [("nu".to_string(), NS_NU)].into_iter().collect(),
        inverse_data: None,
        defaults: defaults(SolverKind::Newton, 30, 100, MetricSpec::dual_star()),
        notes: vec![],
    }
}

// ------------------------------------------------------------------ errors

/// Mean and maximum absolute error on a uniform tensor grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub eps1: f64,
    pub eps_inf: f64,
    /// Total number of evaluation points.
    pub n: usize,
}

/// `points` equispaced values covering `[a, b]` including both ends.
pub fn linspace(a: f64, b: f64, points: usize) -> Vec<f64> {
    match points {
        0 => vec![],
        1 => vec![0.5 * (a + b)],
        _ => (0..points)
            .map(|i| a + (b - a) * i as f64 / (points - 1) as f64)
            .collect(),
    }
}

/// Compare a surrogate with `truth` on `points^m` uniform points of its box.
pub fn evaluate_errors(
    surrogate: &Surrogate,
    truth: &dyn Fn(&[f64]) -> f64,
    points: usize,
) -> Result<ErrorMetrics> {
    if points == 0 {
        return Err(PsmError::InvalidArgument(
            "need at least one evaluation point".into(),
        ));
    }
    let axes: Vec<Vec<f64>> = surrogate
        .domain
        .intervals()
        .iter()
        .map(|&(a, b)| linspace(a, b, points))
        .collect();
    let approx = surrogate.eval_tensor(&axes);
    let m = axes.len();
    let mut idx = vec![0usize; m];
    let mut x = vec![0.0; m];
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    for v in &approx {
        for i in 0..m {
            x[i] = axes[i][idx[i]];
        }
        let err = (v - truth(&x)).abs();
        sum += err;
        max = max.max(err);
        for k in idx.iter_mut() {
            *k += 1;
            if *k < points {
                break;
            }
            *k = 0;
        }
    }
    Ok(ErrorMetrics {
        eps1: sum / approx.len() as f64,
        eps_inf: max,
        n: approx.len(),
    })
}
