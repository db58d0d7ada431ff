//! End-to-end runs of a problem: assemble, solve, measure errors.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::loss::{assemble, assemble_inverse_loss, AssembledLoss, LossSpec, MetricSpec};
use crate::problems::{evaluate_errors, ErrorMetrics, ProblemSpec};
use crate::solvers::{
    analytic_descent, implicit_euler_flow, newton_minimise, quasi_newton_minimise, FlowOptions,
    LinearOptions, NewtonOptions, QuasiNewtonOptions, SolveReport, SolverKind,
};
use crate::{OperatorCache, PsmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub solver: SolverKind,
    pub n_domain: usize,
    pub n_boundary: usize,
    pub pde_metric: MetricSpec,
    pub boundary_weak: bool,
    pub tau: f64,
    pub tau_growth: f64,
    /// Iteration cap for iterative solvers; `None` keeps each solver's default.
    pub max_iters: Option<usize>,
    /// Convergence tolerance override (gradient tolerance for the flow and
    /// L-BFGS, residual tolerance for Newton).
    pub tol: Option<f64>,
    /// Uniform evaluation points per axis.
    pub eval_points: usize,
    /// Gauss–Newton refresh period for the quasi-Newton solver.
    pub precondition_every: usize,
    pub record_iterates: bool,
}

impl RunSettings {
    pub fn defaults_for(spec: &ProblemSpec) -> Self {
        let d = &spec.defaults;
        Self {
            solver: d.solver,
            n_domain: d.n_domain,
            n_boundary: d.n_boundary,
            pde_metric: d.pde_metric,
            boundary_weak: false,
            tau: d.tau,
            tau_growth: d.tau_growth,
            max_iters: None,
            tol: None,
            eval_points: d.eval_points,
            precondition_every: 25,
            record_iterates: false,
        }
    }

    /// Defaults with the reduced smoke-test degrees.
    pub fn smoke_for(spec: &ProblemSpec) -> Self {
        let mut s = Self::defaults_for(spec);
        s.n_domain = spec.defaults.smoke_n_domain;
        s.n_boundary = spec.defaults.smoke_n_boundary;
        s
    }

    pub fn loss_spec(&self) -> LossSpec {
        LossSpec {
            boundary_weak: self.boundary_weak,
            ..LossSpec::with_pde_metric(self.pde_metric)
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunOutcome {
    pub problem: String,
    pub settings: RunSettings,
    pub report: SolveReport,
    /// Errors for every field with a known exact solution.
    pub field_errors: BTreeMap<String, ErrorMetrics>,
    /// Worst errors over the problem's reported fields.
    pub eps1: f64,
    pub eps_inf: f64,
    /// Absolute parameter errors.
    pub eps_param: BTreeMap<String, f64>,
    /// Assembly, solve and evaluation time.
    pub seconds: f64,
}

impl RunOutcome {
    /// Largest absolute parameter error, if the problem has parameters.
    pub fn max_param_error(&self) -> Option<f64> {
        self.eps_param.values().copied().reduce(f64::max)
    }
}

/// Assemble the loss for `spec` at the degrees in `settings`.
pub fn build_loss(spec: &ProblemSpec, settings: &RunSettings) -> Result<AssembledLoss> {
    let cache = Arc::new(OperatorCache::new(settings.n_domain, &spec.domain)?);
    build_loss_with_cache(spec, settings, cache)
}

pub fn build_loss_with_cache(
    spec: &ProblemSpec,
    settings: &RunSettings,
    cache: Arc<OperatorCache>,
) -> Result<AssembledLoss> {
    if cache.grid().domain() != &spec.domain || cache.grid().degree() != settings.n_domain {
        return Err(PsmError::InvalidArgument(
            "operator cache does not match the problem discretisation".into(),
        ));
    }
    let loss_spec = settings.loss_spec();
    match &spec.inverse_data {
        Some((field, f)) => {
            let data = cache.grid().sample(|x| f(x));
            assemble_inverse_loss(
                &spec.system,
                *field,
                data,
                &loss_spec,
                cache,
                settings.n_boundary,
            )
        }
        None => assemble(&spec.system, &loss_spec, cache, settings.n_boundary),
    }
}

/// Minimise `loss` with the solver in `settings`, starting from its initial state.
pub fn solve(loss: &AssembledLoss, settings: &RunSettings) -> Result<SolveReport> {
    let x0 = loss.initial_state();
    let report = match settings.solver {
        SolverKind::Ad => analytic_descent(loss, &LinearOptions::default())?,
        SolverKind::GfImplicitEuler => {
            let mut o = FlowOptions {
                tau: settings.tau,
                tau_growth: settings.tau_growth,
                record_iterates: settings.record_iterates,
                ..FlowOptions::default()
            };
            if let Some(m) = settings.max_iters {
                o.max_iters = m;
            }
            if let Some(t) = settings.tol {
                o.grad_tol = t;
            }
            implicit_euler_flow(loss, &x0, &o)?
        }
        SolverKind::QuasiNewton => {
            let mut o = QuasiNewtonOptions {
                precondition_every: settings.precondition_every,
                ..QuasiNewtonOptions::default()
            };
            if let Some(m) = settings.max_iters {
                o.max_iters = m;
            }
            if let Some(t) = settings.tol {
                o.grad_tol = t;
            }
            quasi_newton_minimise(loss, &x0, &o)?
        }
        SolverKind::Newton => {
            let mut o = NewtonOptions::default();
            if let Some(m) = settings.max_iters {
                o.max_iters = m;
            }
            if let Some(t) = settings.tol {
                o.tol = t;
            }
            newton_minimise(loss, &x0, &o)?
        }
    };
    report.attach(loss)
}

/// Errors of every solved field against the problem's exact solutions.
pub fn measure(
    spec: &ProblemSpec,
    report: &SolveReport,
    eval_points: usize,
) -> Result<BTreeMap<String, ErrorMetrics>> {
    let mut out = BTreeMap::new();
    for (name, sur) in &report.surrogates {
        if let Some(truth) = spec.truth_of(name) {
            out.insert(
                name.clone(),
                evaluate_errors(sur, truth.as_ref(), eval_points)?,
            );
        }
    }
    Ok(out)
}

pub fn run_problem(spec: &ProblemSpec, settings: &RunSettings) -> Result<RunOutcome> {
    let start = Instant::now();
    let loss = build_loss(spec, settings)?;
    let report = solve(&loss, settings)?;
    let field_errors = measure(spec, &report, settings.eval_points)?;
    let (mut eps1, mut eps_inf) = (0.0f64, 0.0f64);
    for f in &spec.error_fields {
        let e = field_errors
            .get(f)
            .ok_or_else(|| PsmError::Internal(format!("no surrogate for reported field '{f}'")))?;
        eps1 = eps1.max(e.eps1);
        eps_inf = eps_inf.max(e.eps_inf);
    }
    let eps_param = spec
        .param_truth
        .iter()
        .filter_map(|(k, v)| {
            report
                .inferred_params
                .get(k)
                .map(|p| (k.clone(), (p - v).abs()))
        })
        .collect();
    Ok(RunOutcome {
        problem: spec.name.clone(),
        settings: *settings,
        report,
        field_errors,
        eps1,
        eps_inf,
        eps_param,
        seconds: start.elapsed().as_secs_f64(),
    })
}
