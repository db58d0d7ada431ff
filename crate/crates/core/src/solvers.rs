//! Coefficient solvers: closed-form analytic descent for quadratic losses,
//! implicit-Euler gradient flow, L-BFGS, Newton–Raphson, and convergence-rate
//! diagnostics for flow traces.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen, LU};
use serde::{Deserialize, Serialize};

use crate::basis::{interpolate, Surrogate};
use crate::loss::AssembledLoss;
use crate::{PsmError, Result};

/// Solver selection by name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    /// Closed-form minimiser of a quadratic loss.
    Ad,
    /// Implicit-Euler gradient flow.
    GfImplicitEuler,
    /// L-BFGS with optional Gauss-Newton preconditioning.
    QuasiNewton,
    /// Newton-Raphson on the stationarity condition.
    Newton,
}

impl SolverKind {
    pub const ALL: [SolverKind; 4] = [
        SolverKind::Ad,
        SolverKind::GfImplicitEuler,
        SolverKind::QuasiNewton,
        SolverKind::Newton,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SolverKind::Ad => "ad",
            SolverKind::GfImplicitEuler => "gf-implicit-euler",
            SolverKind::QuasiNewton => "quasi-newton",
            SolverKind::Newton => "newton",
        }
    }
}

impl std::fmt::Display for SolverKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SolverKind {
    type Err = PsmError;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        match t.as_str() {
            "ad" | "analytic" | "analytic-descent" => Ok(SolverKind::Ad),
            "gf" | "gf-implicit-euler" | "implicit-euler" | "gradient-flow" => {
                Ok(SolverKind::GfImplicitEuler)
            }
            "quasi-newton" | "lbfgs" | "l-bfgs" => Ok(SolverKind::QuasiNewton),
            "newton" | "newton-raphson" => Ok(SolverKind::Newton),
            _ => Err(PsmError::InvalidArgument(format!(
                "unknown solver '{s}'; valid: ad, gf-implicit-euler, quasi-newton, newton"
            ))),
        }
    }
}

/// A twice-differentiable scalar objective on `R^dim`.
pub trait Objective {
    fn dim(&self) -> usize;

    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.value_and_gradient(x)?.0)
    }

    fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;

    fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>>;

    /// Positive semidefinite Hessian approximation used for preconditioning.
    fn gauss_newton(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.hessian(x)
    }

    /// Quadratic objectives have a constant Hessian.
    fn is_quadratic(&self) -> bool {
        false
    }

    /// Number of leading coordinates whose Hessian block is always positive
    /// semidefinite (0 if unknown).
    fn psd_prefix(&self) -> usize {
        0
    }

    /// `(K, rhs)` with `∇𝓛(x) = K x − 2 rhs`, for quadratic objectives.
    fn normal_equations(&self) -> Result<(DMatrix<f64>, DVector<f64>)> {
        Err(PsmError::Nonlinear("objective is not quadratic".into()))
    }
}

impl Objective for AssembledLoss {
    fn dim(&self) -> usize {
        self.n_state()
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        AssembledLoss::value(self, x)
    }

    fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        AssembledLoss::value_and_gradient(self, x)
    }

    fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        AssembledLoss::hessian(self, x)
    }

    fn gauss_newton(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        AssembledLoss::gauss_newton(self, x)
    }

    fn is_quadratic(&self) -> bool {
        self.is_affine()
    }

    fn psd_prefix(&self) -> usize {
        self.psd_field_prefix()
    }

    fn normal_equations(&self) -> Result<(DMatrix<f64>, DVector<f64>)> {
        AssembledLoss::normal_equations(self)
    }
}

/// A square nonlinear system `F(x) = 0`.
pub trait ResidualSystem {
    fn dim(&self) -> usize;
    fn residual(&self, x: &[f64]) -> Result<Vec<f64>>;
    fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>>;
}

/// The stationarity system `∇𝓛(x) = 0` of an objective.
pub struct Stationarity<'a, O: Objective + ?Sized>(pub &'a O);

impl<O: Objective + ?Sized> ResidualSystem for Stationarity<'_, O> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn residual(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.0.value_and_gradient(x)?.1)
    }

    fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.0.hessian(x)
    }
}

/// Loss history of an iterative solve.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowTrace {
    /// `𝓛[C_0], 𝓛[C_1], …` over accepted steps.
    pub losses: Vec<f64>,
    /// Step size used for each accepted step (`len = losses.len() − 1`).
    pub taus: Vec<f64>,
    /// Initial step size.
    pub tau: f64,
    /// Accepted iterates, when requested.
    #[serde(skip)]
    pub iterates: Vec<Vec<f64>>,
    pub measured_rate: Option<f64>,
    pub lambda_hat: Option<f64>,
}

impl FlowTrace {
    /// `𝓛[C_n] − 𝓛_∞` for every iterate.
    pub fn gaps(&self, loss_inf: f64) -> Vec<f64> {
        self.losses.iter().map(|l| l - loss_inf).collect()
    }

    /// Number of accepted steps that increased the loss.
    pub fn monotonicity_violations(&self) -> usize {
        self.losses.windows(2).filter(|w| w[1] > w[0]).count()
    }
}

/// Outcome of a solve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub solver: String,
    /// Final state (unknown field values followed by parameters).
    pub state: Vec<f64>,
    /// Per-field Lagrange surrogates of the final state.
    pub surrogates: Vec<(String, Surrogate)>,
    pub inferred_params: BTreeMap<String, f64>,
    pub final_loss: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub wall_time_seconds: f64,
    pub converged: bool,
    pub message: String,
    pub trace: Option<FlowTrace>,
    /// Smallest Hessian eigenvalue estimate.
    pub eigen_estimate: Option<f64>,
    pub condition_estimate: Option<f64>,
    /// Set when the Hessian was singular and a pseudo-inverse was used.
    pub non_unique: bool,
}

impl SolveReport {
    fn new(solver: &str, state: Vec<f64>) -> Self {
        Self {
            solver: solver.into(),
            state,
            surrogates: Vec::new(),
            inferred_params: BTreeMap::new(),
            final_loss: f64::NAN,
            gradient_norm: f64::NAN,
            iterations: 0,
            wall_time_seconds: 0.0,
            converged: false,
            message: String::new(),
            trace: None,
            eigen_estimate: None,
            condition_estimate: None,
            non_unique: false,
        }
    }

    /// Fill surrogates and parameter values from the loss's state layout.
    pub fn attach(mut self, loss: &AssembledLoss) -> Result<Self> {
        let grid = loss.cache().grid();
        self.surrogates.clear();
        for (j, name) in loss.field_names().iter().enumerate() {
            if loss.field_offset(j).is_some() {
                let s = interpolate(grid, loss.field(&self.state, j))?;
                self.surrogates.push((name.clone(), s));
            }
        }
        self.inferred_params = loss
            .param_names()
            .iter()
            .cloned()
            .zip(loss.params(&self.state).iter().copied())
            .collect();
        Ok(self)
    }

    pub fn surrogate(&self, name: &str) -> Option<&Surrogate> {
        self.surrogates
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ------------------------------------------------------------------ linear

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearOptions {
    /// Target for `‖K C − 2 rhs‖ / ‖2 rhs‖` after refinement.
    pub residual_tol: f64,
    pub max_refinements: usize,
    /// Iterations of the inverse/forward power methods (0 disables).
    pub spectrum_iters: usize,
    /// Relative eigenvalue cut-off of the pseudo-inverse fallback.
    pub pinv_cutoff: f64,
}

impl Default for LinearOptions {
    fn default() -> Self {
        Self {
            residual_tol: 1e-9,
            max_refinements: 3,
            spectrum_iters: 60,
            pinv_cutoff: 1e-13,
        }
    }
}

/// Solution of `K C = b` for symmetric positive (semi)definite `K`.
#[derive(Debug, Clone)]
pub struct LinearSolution {
    pub x: DVector<f64>,
    pub relative_residual: f64,
    pub min_eigenvalue: Option<f64>,
    pub max_eigenvalue: Option<f64>,
    pub non_unique: bool,
}

/// Smallest eigenvalue of an SPD matrix by inverse iteration on its factor.
pub fn smallest_eigenvalue(chol: &Cholesky<f64, Dyn>, dim: usize, iters: usize) -> f64 {
    let mut v = DVector::from_fn(dim, |i, _| 1.0 + ((i * 7919) % 101) as f64 / 101.0);
    v /= v.norm();
    let mut lambda = f64::NAN;
    for _ in 0..iters.max(1) {
        let w = chol.solve(&v);
        let nw = w.norm();
        if nw == 0.0 || !nw.is_finite() {
            break;
        }
        // Rayleigh quotient vᵀK⁻¹v approximates 1/λ_min.
        lambda = 1.0 / v.dot(&w);
        let next = w / nw;
        let done = (&next - &v).norm() < 1e-10;
        v = next;
        if done {
            break;
        }
    }
    lambda
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
pub fn largest_eigenvalue(k: &DMatrix<f64>, iters: usize) -> f64 {
    let dim = k.nrows();
    let mut v = DVector::from_fn(dim, |i, _| 1.0 + ((i * 104729) % 97) as f64 / 97.0);
    v /= v.norm();
    let mut lambda = 0.0;
    for _ in 0..iters.max(1) {
        let w = k * &v;
        let nw = w.norm();
        if nw == 0.0 {
            return 0.0;
        }
        lambda = v.dot(&w);
        v = w / nw;
    }
    lambda
}

/// Solve `K x = b` by Cholesky with iterative refinement, falling back to a
/// spectral pseudo-inverse when `K` is not numerically positive definite.
pub fn solve_spd(k: &DMatrix<f64>, b: &DVector<f64>, opts: &LinearOptions) -> LinearSolution {
    let bn = b.norm().max(f64::MIN_POSITIVE);
    if let Some(chol) = Cholesky::new(k.clone()) {
        let mut x = chol.solve(b);
        let mut r = b - k * &x;
        for _ in 0..opts.max_refinements {
            if r.norm() <= opts.residual_tol * bn {
                break;
            }
            x += chol.solve(&r);
            r = b - k * &x;
        }
        let (min_eig, max_eig) = if opts.spectrum_iters > 0 {
            (
                Some(smallest_eigenvalue(&chol, k.nrows(), opts.spectrum_iters)),
                Some(largest_eigenvalue(k, opts.spectrum_iters)),
            )
        } else {
            (None, None)
        };
        return LinearSolution {
            relative_residual: r.norm() / bn,
            x,
            min_eigenvalue: min_eig,
            max_eigenvalue: max_eig,
            non_unique: false,
        };
    }
    let eig = SymmetricEigen::new(k.clone());
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let cut = opts.pinv_cutoff * lmax;
    let coef = eig.eigenvectors.transpose() * b;
    let scaled = DVector::from_iterator(
        coef.len(),
        coef.iter()
            .zip(eig.eigenvalues.iter())
            .map(|(c, l)| if *l > cut { c / l } else { 0.0 }),
    );
    let x = &eig.eigenvectors * scaled;
    let r = b - k * &x;
    let min_pos = eig
        .eigenvalues
        .iter()
        .copied()
        .filter(|l| *l > cut)
        .fold(f64::INFINITY, f64::min);
    LinearSolution {
        relative_residual: r.norm() / bn,
        x,
        min_eigenvalue: Some(eig.eigenvalues.min()),
        max_eigenvalue: Some(lmax),
        non_unique: min_pos.is_finite(),
    }
}

/// Closed-form limit of the gradient flow for quadratic objectives:
/// `C_∞ = K⁻¹ (2 rhs)`, started from the zero state.
pub fn analytic_descent<O: Objective + ?Sized>(
    obj: &O,
    opts: &LinearOptions,
) -> Result<SolveReport> {
    let start = Instant::now();
    let (k, rhs) = obj.normal_equations()?;
    let b = rhs * 2.0;
    let sol = solve_spd(&k, &b, opts);
    let x: Vec<f64> = sol.x.iter().copied().collect();
    let (val, g) = obj.value_and_gradient(&x)?;
    let mut rep = SolveReport::new("ad", x);
    rep.final_loss = val;
    rep.gradient_norm = norm(&g);
    rep.iterations = 1;
    rep.eigen_estimate = sol.min_eigenvalue;
    rep.condition_estimate = match (sol.min_eigenvalue, sol.max_eigenvalue) {
        (Some(lo), Some(hi)) if lo > 0.0 => Some(hi / lo),
        _ => None,
    };
    rep.non_unique = sol.non_unique;
    rep.converged = sol.relative_residual.is_finite();
    rep.message = format!("relative residual {:.3e}", sol.relative_residual);
    if sol.non_unique {
        rep.message
            .push_str("; singular normal operator, minimum-norm solution");
    }
    rep.wall_time_seconds = start.elapsed().as_secs_f64();
    Ok(rep)
}

// ------------------------------------------------------------------ flows

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowOptions {
    pub tau: f64,
    /// Multiplier applied to `τ` after every accepted step.
    pub tau_growth: f64,
    pub tau_max: f64,
    pub max_iters: usize,
    /// Absolute step-norm tolerance.
    pub step_tol: f64,
    /// Gradient-norm tolerance relative to `max(1, 𝓛[C_0])`.
    pub grad_tol: f64,
    pub max_halvings: usize,
    pub newton_iters: usize,
    /// Relative loss decrease below which a failed step is read as stagnation.
    pub stagnation_tol: f64,
    pub record_iterates: bool,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self {
            tau: 0.1,
            tau_growth: 1.0,
            tau_max: 1e12,
            max_iters: 10_000,
            step_tol: 1e-12,
            grad_tol: 1e-12,
            max_halvings: 20,
            newton_iters: 25,
            stagnation_tol: 1e-8,
            record_iterates: false,
        }
    }
}

/// Factorisation of `I + τH`.
enum StepFactor {
    Chol(Cholesky<f64, Dyn>),
    Lu(LU<f64, Dyn, Dyn>),
    /// Cholesky of the leading `k × k` block with an LU-factored Schur
    /// complement for the trailing coordinates.
    Schur {
        lead: Cholesky<f64, Dyn>,
        /// `A₁₁⁻¹ A₁₂`.
        lead_inv_cross: DMatrix<f64>,
        /// `A₂₁`.
        cross_t: DMatrix<f64>,
        schur: LU<f64, Dyn, Dyn>,
    },
}

impl StepFactor {
    fn new(h: &DMatrix<f64>, tau: f64, psd_prefix: usize) -> Option<Self> {
        let mut a = h * tau;
        for i in 0..a.nrows() {
            a[(i, i)] += 1.0;
        }
        let n = a.nrows();
        if psd_prefix > 0 && psd_prefix < n {
            if let Some(f) = Self::schur(&a, psd_prefix) {
                return Some(f);
            }
        }
        if let Some(c) = Cholesky::new(a.clone()) {
            return Some(StepFactor::Chol(c));
        }
        let lu = LU::new(a);
        lu.is_invertible().then_some(StepFactor::Lu(lu))
    }

    fn schur(a: &DMatrix<f64>, k: usize) -> Option<Self> {
        let n = a.nrows();
        let p = n - k;
        let lead = Cholesky::new(a.view((0, 0), (k, k)).into_owned())?;
        let cross = a.view((0, k), (k, p)).into_owned();
        let lead_inv_cross = lead.solve(&cross);
        let cross_t = a.view((k, 0), (p, k)).into_owned();
        let s = a.view((k, k), (p, p)).into_owned() - &cross_t * &lead_inv_cross;
        let schur = LU::new(s);
        schur.is_invertible().then_some(StepFactor::Schur {
            lead,
            lead_inv_cross,
            cross_t,
            schur,
        })
    }

    fn solve(&self, b: &DVector<f64>) -> Option<DVector<f64>> {
        match self {
            StepFactor::Chol(c) => Some(c.solve(b)),
            StepFactor::Lu(l) => l.solve(b),
            StepFactor::Schur {
                lead,
                lead_inv_cross,
                cross_t,
                schur,
            } => {
                let k = lead_inv_cross.nrows();
                let b1 = b.rows(0, k).into_owned();
                let b2 = b.rows(k, b.len() - k).into_owned();
                let z = lead.solve(&b1);
                let v = schur.solve(&(b2 - cross_t * &z))?;
                let u = z - lead_inv_cross * &v;
                let mut out = DVector::zeros(b.len());
                out.rows_mut(0, k).copy_from(&u);
                out.rows_mut(k, v.len()).copy_from(&v);
                Some(out)
            }
        }
    }
}

/// One implicit-Euler step `y − x + τ∇𝓛(y) = 0`. Quadratic objectives need a
/// single linear solve. Otherwise the step is found by damped chord-Newton
/// descent on the proximal objective, refreshing the Hessian when
/// contraction stalls.
fn implicit_step<O: Objective + ?Sized>(
    obj: &O,
    x: &[f64],
    gx: &[f64],
    tau: f64,
    opts: &FlowOptions,
    cached: &mut Option<(f64, StepFactor)>,
    hess_const: Option<&DMatrix<f64>>,
) -> Result<Option<Vec<f64>>> {
    let split = obj.psd_prefix();
    if let Some(h) = hess_const {
        if cached.as_ref().map(|(t, _)| *t) != Some(tau) {
            *cached = StepFactor::new(h, tau, split).map(|f| (tau, f));
        }
        let Some((_, f)) = cached.as_ref() else {
            return Ok(None);
        };
        // (I + τH)(y − x) = −τ∇𝓛(x)
        let b = DVector::from_iterator(gx.len(), gx.iter().map(|g| -tau * g));
        let Some(d) = f.solve(&b) else {
            return Ok(None);
        };
        let y: Vec<f64> = x.iter().zip(d.iter()).map(|(a, b)| a + b).collect();
        return Ok(Some(y));
    }
    // The step minimises φ(y) = 𝓛(y) + ‖y − x‖²/(2τ); τ∇φ(y) = y − x + τ∇𝓛(y).
    let phi = |y: &[f64], fy: f64| {
        fy + 0.5 / tau * y.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
    };
    let mut y = x.to_vec();
    let mut g = gx.to_vec();
    let mut phi_y = phi(&y, obj.value(&y)?);
    let scale = 1.0 + norm(x);
    let mut fac: Option<StepFactor> = None;
    let mut prev = f64::INFINITY;
    for _ in 0..opts.newton_iters {
        let f: Vec<f64> = y
            .iter()
            .zip(x)
            .zip(&g)
            .map(|((yi, xi), gi)| yi - xi + tau * gi)
            .collect();
        let fnorm = norm(&f);
        if fnorm <= 1e-14 * scale {
            return Ok(Some(y));
        }
        if fac.is_none() || fnorm > 0.25 * prev {
            fac = StepFactor::new(&obj.hessian(&y)?, tau, split);
        }
        prev = fnorm;
        let fv = DVector::from_vec(f);
        let mut d = match fac.as_ref().and_then(|fac| fac.solve(&fv)) {
            Some(d) => -d,
            None => return Ok(None),
        };
        // Descent test on φ.
        if d.dot(&fv) >= 0.0 {
            // Fall back to the positive semidefinite Gauss–Newton model.
            fac = StepFactor::new(&obj.gauss_newton(&y)?, tau, split);
            d = match fac.as_ref().and_then(|fac| fac.solve(&fv)) {
                Some(d) => -d,
                None => return Ok(None),
            };
            if d.dot(&fv) >= 0.0 {
                return Ok(None);
            }
        }
        let slope = d.dot(&fv) / tau;
        let mut alpha = 1.0;
        let mut next = None;
        for _ in 0..30 {
            let cand: Vec<f64> = y.iter().zip(d.iter()).map(|(a, b)| a + alpha * b).collect();
            if cand.iter().all(|v| v.is_finite()) {
                let (fc, gc) = obj.value_and_gradient(&cand)?;
                let pc = phi(&cand, fc);
                if pc <= phi_y + 1e-4 * alpha * slope + 8.0 * f64::EPSILON * phi_y.abs()
                    || alpha * d.norm() <= 1e-14 * scale
                {
                    next = Some((cand, gc, pc));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((cand, gc, pc)) = next else {
            return Ok(None);
        };
        if alpha < 1.0 {
            // A damped step means the model is poor: refresh next time.
            prev = 0.0;
        }
        y = cand;
        g = gc;
        phi_y = pc;
        if alpha * d.norm() <= 1e-12 * scale {
            return Ok(Some(y));
        }
    }
    Ok(None)
}

/// Implicit-Euler discretisation of the gradient flow `Ċ = −∇𝓛(C)`.
///
/// Steps that fail to solve or increase the loss are retried with `τ/2`.
pub fn implicit_euler_flow<O: Objective + ?Sized>(
    obj: &O,
    x0: &[f64],
    opts: &FlowOptions,
) -> Result<SolveReport> {
    if opts.tau.is_nan() || opts.tau <= 0.0 {
        return Err(PsmError::InvalidArgument(
            "step size must be positive".into(),
        ));
    }
    if x0.len() != obj.dim() {
        return Err(PsmError::DimensionMismatch {
            what: "initial state".into(),
            expected: obj.dim(),
            found: x0.len(),
        });
    }
    let start = Instant::now();
    let hess_const = if obj.is_quadratic() {
        Some(obj.hessian(x0)?)
    } else {
        None
    };
    let mut x = x0.to_vec();
    let (mut fx, mut gx) = obj.value_and_gradient(&x)?;
    let f0 = fx;
    let gscale = f0.max(1.0);
    let mut trace = FlowTrace {
        losses: vec![fx],
        tau: opts.tau,
        ..Default::default()
    };
    if opts.record_iterates {
        trace.iterates.push(x.clone());
    }
    let mut tau = opts.tau;
    let mut cached = None;
    let mut iters = 0;
    let mut converged = false;
    let mut message = String::from("iteration limit reached");
    while iters < opts.max_iters {
        if norm(&gx) <= opts.grad_tol * gscale {
            converged = true;
            message = "gradient tolerance reached".into();
            break;
        }
        let mut accepted = None;
        let mut halvings = 0;
        loop {
            if let Some(y) =
                implicit_step(obj, &x, &gx, tau, opts, &mut cached, hess_const.as_ref())?
            {
                let (fy, gy) = obj.value_and_gradient(&y)?;
                // Round-off slack on the monotonicity test.
                if fy <= fx + 4.0 * f64::EPSILON * fx.abs() {
                    accepted = Some((y, fy, gy));
                    break;
                }
            }
            if halvings == opts.max_halvings {
                break;
            }
            tau *= 0.5;
            halvings += 1;
        }
        let Some((y, fy, gy)) = accepted else {
            // No descent left at any step size: stagnation at round-off counts
            // as convergence.
            let last_drop = match trace.losses.as_slice() {
                [.., a, b] => a - b,
                _ => f64::INFINITY,
            };
            if last_drop <= opts.stagnation_tol * fx.abs().max(f64::MIN_POSITIVE) {
                converged = true;
                message = "loss stagnated at round-off level".into();
            } else {
                message = format!(
                    "implicit step failed after {} halvings of τ",
                    opts.max_halvings
                );
            }
            break;
        };
        let step: f64 = norm(&y.iter().zip(&x).map(|(a, b)| a - b).collect::<Vec<_>>());
        iters += 1;
        trace.taus.push(tau);
        trace.losses.push(fy);
        if opts.record_iterates {
            trace.iterates.push(y.clone());
        }
        x = y;
        fx = fy;
        gx = gy;
        if step <= opts.step_tol {
            converged = true;
            message = "step tolerance reached".into();
            break;
        }
        tau = (tau * opts.tau_growth).min(opts.tau_max);
    }
    let mut rep = SolveReport::new("gf-implicit-euler", x);
    rep.final_loss = fx;
    rep.gradient_norm = norm(&gx);
    rep.iterations = iters;
    rep.converged = converged;
    rep.message = message;
    rep.trace = Some(trace);
    rep.wall_time_seconds = start.elapsed().as_secs_f64();
    if !converged && iters == 0 {
        return Err(PsmError::SolverFailure(rep.message));
    }
    Ok(rep)
}

// ------------------------------------------------------------------ L-BFGS

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuasiNewtonOptions {
    pub memory: usize,
    pub max_iters: usize,
    /// Gradient-norm tolerance relative to `max(1, ‖∇𝓛(x₀)‖)`.
    pub grad_tol: f64,
    pub c1: f64,
    pub c2: f64,
    /// Precondition with the Gauss–Newton Hessian, refreshed every this
    /// many iterations (0 disables preconditioning).
    pub precondition_every: usize,
}

impl Default for QuasiNewtonOptions {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iters: 5000,
            grad_tol: 1e-12,
            c1: 1e-4,
            c2: 0.9,
            precondition_every: 0,
        }
    }
}

struct LineSearchResult {
    alpha: f64,
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
}

/// Strong-Wolfe line search (bracketing + zoom with safeguarded cubic steps).
#[allow(clippy::too_many_arguments)]
fn strong_wolfe<O: Objective + ?Sized>(
    obj: &O,
    x: &[f64],
    f0: f64,
    g0: &[f64],
    p: &[f64],
    alpha0: f64,
    c1: f64,
    c2: f64,
) -> Result<Option<LineSearchResult>> {
    let d0 = dot(g0, p);
    let eval = |a: f64| -> Result<LineSearchResult> {
        let xa: Vec<f64> = x.iter().zip(p).map(|(xi, pi)| xi + a * pi).collect();
        let (f, g) = obj.value_and_gradient(&xa)?;
        Ok(LineSearchResult {
            alpha: a,
            x: xa,
            f,
            g,
        })
    };
    // Round-off slack: near a minimiser the predicted decrease falls below
    // the resolution of `f`, and only the curvature test still discriminates.
    let slack = 8.0 * f64::EPSILON * f0.abs();
    let armijo = |r: &LineSearchResult| r.f <= f0 + c1 * r.alpha * d0 + slack;
    let curvature = |r: &LineSearchResult| dot(&r.g, p).abs() <= -c2 * d0;

    let zoom =
        |mut lo: LineSearchResult, mut hi: LineSearchResult| -> Result<Option<LineSearchResult>> {
            for _ in 0..40 {
                let dlo = dot(&lo.g, p);
                let dhi = dot(&hi.g, p);
                let (a_lo, a_hi) = (lo.alpha, hi.alpha);
                // Cubic interpolant minimiser, safeguarded to the inner 80% of the bracket.
                let d1 = dlo + dhi - 3.0 * (lo.f - hi.f) / (a_lo - a_hi);
                let disc = d1 * d1 - dlo * dhi;
                let mut a = if disc >= 0.0 {
                    let d2 = disc.sqrt() * (a_hi - a_lo).signum();
                    a_hi - (a_hi - a_lo) * (dhi + d2 - d1) / (dhi - dlo + 2.0 * d2)
                } else {
                    f64::NAN
                };
                let (lo_b, hi_b) = (a_lo.min(a_hi), a_lo.max(a_hi));
                let w = hi_b - lo_b;
                if !a.is_finite() || a < lo_b + 0.1 * w || a > hi_b - 0.1 * w {
                    a = 0.5 * (a_lo + a_hi);
                }
                if w <= 1e-16 * a_lo.abs().max(1.0) {
                    return Ok((lo.alpha > 0.0 && armijo(&lo)).then_some(lo));
                }
                let r = eval(a)?;
                if !r.f.is_finite() || !armijo(&r) || r.f >= lo.f {
                    hi = r;
                } else {
                    if curvature(&r) {
                        return Ok(Some(r));
                    }
                    if dot(&r.g, p) * (hi.alpha - lo.alpha) >= 0.0 {
                        hi = lo;
                    }
                    lo = r;
                }
            }
            // Sufficient decrease without curvature is still progress.
            Ok((lo.alpha > 0.0 && armijo(&lo)).then_some(lo))
        };

    let mut prev = LineSearchResult {
        alpha: 0.0,
        x: x.to_vec(),
        f: f0,
        g: g0.to_vec(),
    };
    let mut a = alpha0;
    for i in 0..30 {
        let r = eval(a)?;
        if !r.f.is_finite() || !armijo(&r) || (i > 0 && r.f >= prev.f) {
            return zoom(prev, r);
        }
        if curvature(&r) {
            return Ok(Some(r));
        }
        if dot(&r.g, p) >= 0.0 {
            return zoom(r, prev);
        }
        prev = r;
        a *= 2.0;
    }
    Ok(Some(prev))
}

/// Limited-memory BFGS with strong-Wolfe line search.
pub fn quasi_newton_minimise<O: Objective + ?Sized>(
    obj: &O,
    x0: &[f64],
    opts: &QuasiNewtonOptions,
) -> Result<SolveReport> {
    if x0.len() != obj.dim() {
        return Err(PsmError::DimensionMismatch {
            what: "initial state".into(),
            expected: obj.dim(),
            found: x0.len(),
        });
    }
    let start = Instant::now();
    let mut x = x0.to_vec();
    let (mut f, mut g) = obj.value_and_gradient(&x)?;
    let tol = opts.grad_tol * norm(&g).max(1.0);
    let mut trace = FlowTrace {
        losses: vec![f],
        ..Default::default()
    };
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut precond: Option<Cholesky<f64, Dyn>> = None;
    let mut iters = 0;
    let mut converged = false;
    let mut message = String::from("iteration limit reached");
    while iters < opts.max_iters {
        if norm(&g) <= tol {
            converged = true;
            message = "gradient tolerance reached".into();
            break;
        }
        if opts.precondition_every > 0 && iters % opts.precondition_every == 0 {
            let mut h = obj.gauss_newton(&x)?;
            let shift = 1e-14 * (0..h.nrows()).map(|i| h[(i, i)]).fold(0.0, f64::max);
            for i in 0..h.nrows() {
                h[(i, i)] += shift;
            }
            precond = Cholesky::new(h);
            s_hist.clear();
            y_hist.clear();
        }
        // Two-loop recursion.
        let k = s_hist.len();
        let mut q = g.clone();
        let mut alphas = vec![0.0; k];
        let rhos: Vec<f64> = (0..k).map(|i| 1.0 / dot(&y_hist[i], &s_hist[i])).collect();
        for i in (0..k).rev() {
            alphas[i] = rhos[i] * dot(&s_hist[i], &q);
            for (qj, yj) in q.iter_mut().zip(&y_hist[i]) {
                *qj -= alphas[i] * yj;
            }
        }
        let mut r = match &precond {
            Some(c) => c.solve(&DVector::from_vec(q)).iter().copied().collect(),
            None => {
                let gamma = if k > 0 {
                    dot(&s_hist[k - 1], &y_hist[k - 1]) / dot(&y_hist[k - 1], &y_hist[k - 1])
                } else {
                    1.0 / norm(&g).max(1.0)
                };
                q.iter().map(|v| gamma * v).collect::<Vec<f64>>()
            }
        };
        for i in 0..k {
            let beta = rhos[i] * dot(&y_hist[i], &r);
            for (rj, sj) in r.iter_mut().zip(&s_hist[i]) {
                *rj += (alphas[i] - beta) * sj;
            }
        }
        let mut p: Vec<f64> = r.iter().map(|v| -v).collect();
        if dot(&p, &g) >= 0.0 {
            s_hist.clear();
            y_hist.clear();
            p = g.iter().map(|v| -v / norm(&g).max(1.0)).collect();
        }
        let Some(ls) = strong_wolfe(obj, &x, f, &g, &p, 1.0, opts.c1, opts.c2)? else {
            message = "line search failed; returning best iterate".into();
            break;
        };
        let s: Vec<f64> = ls.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = ls.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > f64::EPSILON * norm(&s) * norm(&y) {
            if s_hist.len() == opts.memory {
                s_hist.remove(0);
                y_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(y);
        }
        x = ls.x;
        f = ls.f;
        g = ls.g;
        iters += 1;
        trace.losses.push(f);
    }
    let mut rep = SolveReport::new("quasi-newton", x);
    rep.final_loss = f;
    rep.gradient_norm = norm(&g);
    rep.iterations = iters;
    rep.converged = converged;
    rep.message = message;
    rep.trace = Some(trace);
    rep.wall_time_seconds = start.elapsed().as_secs_f64();
    Ok(rep)
}

// ------------------------------------------------------------------ Newton

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonOptions {
    /// Absolute residual-norm tolerance.
    pub tol: f64,
    /// Step-norm tolerance relative to `1 + ‖x‖`.
    pub step_tol: f64,
    pub max_iters: usize,
    pub max_halvings: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            step_tol: 1e-15,
            max_iters: 50,
            max_halvings: 30,
        }
    }
}

/// Damped Newton–Raphson for `F(x) = 0` with dense LU solves.
pub fn newton_raphson<S: ResidualSystem + ?Sized>(
    sys: &S,
    x0: &[f64],
    opts: &NewtonOptions,
) -> Result<SolveReport> {
    if x0.len() != sys.dim() {
        return Err(PsmError::DimensionMismatch {
            what: "initial state".into(),
            expected: sys.dim(),
            found: x0.len(),
        });
    }
    let start = Instant::now();
    let mut x = x0.to_vec();
    let mut r = sys.residual(&x)?;
    let mut rn = norm(&r);
    let mut trace = FlowTrace {
        losses: vec![rn],
        ..Default::default()
    };
    let mut iters = 0;
    let mut converged = false;
    let mut message = String::from("iteration limit reached");
    while iters < opts.max_iters {
        if rn <= opts.tol {
            converged = true;
            message = "residual tolerance reached".into();
            break;
        }
        let jac = sys.jacobian(&x)?;
        let lu = LU::new(jac);
        let Some(d) = lu.solve(&DVector::from_vec(r.clone())) else {
            return Err(PsmError::SolverFailure(format!(
                "singular Jacobian at iteration {iters} (residual norm {rn:.3e})"
            )));
        };
        if !d.iter().all(|v| v.is_finite()) {
            return Err(PsmError::SolverFailure(format!(
                "Jacobian solve produced non-finite values at iteration {iters}"
            )));
        }
        let mut lambda = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let xt: Vec<f64> = x
                .iter()
                .zip(d.iter())
                .map(|(a, b)| a - lambda * b)
                .collect();
            let rt = sys.residual(&xt)?;
            let rtn = norm(&rt);
            if rtn.is_finite() && (rtn < rn || rtn <= opts.tol) {
                accepted = Some((xt, rt, rtn));
                break;
            }
            lambda *= 0.5;
        }
        iters += 1;
        let step = lambda * d.norm();
        let Some((xt, rt, rtn)) = accepted else {
            // No decrease possible: the residual is at its round-off floor.
            message = format!("no residual decrease along the Newton direction (‖F‖ = {rn:.3e})");
            converged = step <= 1e-8 * (1.0 + norm(&x));
            break;
        };
        x = xt;
        r = rt;
        rn = rtn;
        trace.losses.push(rn);
        if rn <= opts.tol {
            converged = true;
            message = "residual tolerance reached".into();
            break;
        }
        if step <= opts.step_tol * (1.0 + norm(&x)) {
            converged = true;
            message = "step tolerance reached".into();
            break;
        }
    }
    let mut rep = SolveReport::new("newton", x);
    rep.final_loss = f64::NAN;
    rep.gradient_norm = rn;
    rep.iterations = iters;
    rep.converged = converged;
    rep.message = message;
    rep.trace = Some(trace);
    rep.wall_time_seconds = start.elapsed().as_secs_f64();
    Ok(rep)
}

/// Newton–Raphson on `∇𝓛 = 0`, reporting the final loss.
pub fn newton_minimise<O: Objective + ?Sized>(
    obj: &O,
    x0: &[f64],
    opts: &NewtonOptions,
) -> Result<SolveReport> {
    let mut rep = newton_raphson(&Stationarity(obj), x0, opts)?;
    rep.final_loss = obj.value(&rep.state)?;
    Ok(rep)
}

// ------------------------------------------------------------------ diagnostics

/// Measured versus theoretical exponential decay of a loss gap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    /// `−d log(gap)/dt` from a least-squares fit.
    pub fitted_rate: f64,
    /// Geometric-mean per-step contraction of the gap.
    pub fitted_factor: f64,
    /// `λ̂ = log(1 + λτ)/τ` for the initial step size.
    pub lambda_hat: f64,
    /// `2λ̂`.
    pub theoretical_rate: f64,
    /// Largest per-step ratio `gap_{n+1}/gap_n · (1+λτ_n)²`.
    pub worst_bound_ratio: f64,
    /// Steps whose gap ratio exceeds `(1+λτ_n)⁻²` by more than the slack.
    pub bound_violations: usize,
    /// Steps that increased the gap.
    pub monotonicity_violations: usize,
    pub points_used: usize,
}

/// Fit `log gap_n` against elapsed flow time and compare with the
/// implicit-Euler bound `gap_{n+1} ≤ (1+λτ)⁻² gap_n`.
///
/// Gaps at or below `floor · gap_0` are excluded as round-off.
pub fn convergence_diagnostics(
    gaps: &[f64],
    taus: &[f64],
    lambda: f64,
    slack: f64,
    floor: f64,
) -> Result<RateReport> {
    if gaps.len() < 2 || taus.len() + 1 < gaps.len() {
        return Err(PsmError::InvalidArgument(
            "need at least two gaps and one step size per step".into(),
        ));
    }
    let tau0 = taus[0];
    let lambda_hat = (1.0 + lambda * tau0).ln() / tau0;
    let g0 = gaps[0];
    let cut = floor * g0.abs();
    let mut monotone = 0;
    let mut bound = 0;
    let mut worst: f64 = 0.0;
    let mut ts = Vec::new();
    let mut ls = Vec::new();
    let mut t = 0.0;
    for (i, g) in gaps.iter().enumerate() {
        if *g > cut && *g > 0.0 {
            ts.push(t);
            ls.push(g.ln());
        }
        if i + 1 < gaps.len() {
            let next = gaps[i + 1];
            if next > *g {
                monotone += 1;
            }
            if *g > cut && next > cut {
                let limit = (1.0 + lambda * taus[i]).powi(-2);
                let ratio = next / g;
                worst = worst.max(ratio / limit);
                if ratio > limit * (1.0 + slack) {
                    bound += 1;
                }
            }
            t += taus[i];
        }
    }
    let (rate, factor) = if ts.len() >= 2 {
        let n = ts.len() as f64;
        let mt = ts.iter().sum::<f64>() / n;
        let ml = ls.iter().sum::<f64>() / n;
        let sxx: f64 = ts.iter().map(|t| (t - mt).powi(2)).sum();
        let sxy: f64 = ts.iter().zip(&ls).map(|(t, l)| (t - mt) * (l - ml)).sum();
        let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
        (-slope, (slope * tau0).exp())
    } else {
        (0.0, 1.0)
    };
    Ok(RateReport {
        fitted_rate: rate,
        fitted_factor: factor,
        lambda_hat,
        theoretical_rate: 2.0 * lambda_hat,
        worst_bound_ratio: worst,
        bound_violations: bound,
        monotonicity_violations: monotone,
        points_used: ts.len(),
    })
}

/// Indices `n` where `(λ/2)‖C_n − C_∞‖² > gap_n (1 + slack)`.
pub fn lower_bound_violations(
    iterates: &[Vec<f64>],
    c_inf: &[f64],
    gaps: &[f64],
    lambda: f64,
    slack: f64,
) -> Vec<usize> {
    iterates
        .iter()
        .zip(gaps)
        .enumerate()
        .filter_map(|(i, (c, g))| {
            let d2: f64 = c.iter().zip(c_inf).map(|(a, b)| (a - b).powi(2)).sum();
            (0.5 * lambda * d2 > g * (1.0 + slack) + 1e-300).then_some(i)
        })
        .collect()
}
