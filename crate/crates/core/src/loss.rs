//! Residual-block losses over grid-value coefficients and scalar parameters.
//!
//! A [`PdeSystem`] describes equations symbolically (coefficient functions,
//! derivative multi-indices, boundary and data functions). Assembling it on an
//! [`OperatorCache`] samples everything on the Legendre grids and yields an
//! [`AssembledLoss`]
//!
//! `𝓛(x) = Σ_b c_b · r_b(x)ᵀ M_b r_b(x)`
//!
//! where each block residual `r_b` is affine or bilinear in the state `x` and
//! `M_b` is a Sobolev weight (strong), its square (weak), or a cubature
//! diagonal. The state is the concatenation of all unknown fields' grid values
//! followed by the scalar parameters.

use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::kron::KronOp;
use crate::operators::{OperatorCache, SobolevWeight, Variant};
use crate::{Face, PsmError, Result};

/// A real function on the physical domain.
pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

pub fn scalar_fn<F: Fn(&[f64]) -> f64 + Send + Sync + 'static>(f: F) -> ScalarFn {
    Arc::new(f)
}

#[derive(Clone)]
pub enum Coefficient {
    Const(f64),
    Func(ScalarFn),
}

impl Coefficient {
    fn sample(&self, cache: &OperatorCache) -> Vec<f64> {
        match self {
            Coefficient::Const(c) => vec![*c; cache.len()],
            Coefficient::Func(f) => cache.grid().sample(|x| f(x)),
        }
    }
}

impl fmt::Debug for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coefficient::Const(c) => write!(f, "Const({c})"),
            Coefficient::Func(_) => write!(f, "Func(..)"),
        }
    }
}

/// One summand of an equation's left-hand side.
#[derive(Clone, Debug)]
pub enum Term {
    /// `a(x) · D^β u_field`
    Linear {
        field: usize,
        beta: Vec<usize>,
        coeff: Coefficient,
    },
    /// `μ_param · a(x) · D^β u_field`
    ParamLinear {
        param: usize,
        field: usize,
        beta: Vec<usize>,
        coeff: Coefficient,
    },
    /// `μ_param · s(x)`
    ParamSource { param: usize, source: Coefficient },
    /// `a(x) · u_velocity · D^β u_field`
    Advection {
        velocity: usize,
        field: usize,
        beta: Vec<usize>,
        coeff: Coefficient,
    },
}

/// `Σ terms = rhs` on the domain; `metric` overrides the loss-wide PDE metric.
#[derive(Clone, Debug)]
pub struct Equation {
    pub label: String,
    pub terms: Vec<Term>,
    pub rhs: Coefficient,
    pub metric: Option<MetricSpec>,
}

#[derive(Clone, Debug)]
pub enum FieldKind {
    Unknown,
    /// Prescribed field entering the equations as data.
    Known(Coefficient),
}

#[derive(Clone, Debug)]
pub struct Field {
    pub name: String,
    pub kind: FieldKind,
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub initial: f64,
}

/// Dirichlet data `u_field = g` on every face.
#[derive(Clone, Debug)]
pub struct BoundaryCondition {
    pub field: usize,
    pub values: Coefficient,
}

#[derive(Clone, Debug)]
pub enum DataSource {
    Func(Coefficient),
    /// Values on the domain Legendre grid.
    Samples(Vec<f64>),
}

/// `u_field ≈ data` in the domain `L²` cubature.
#[derive(Clone, Debug)]
pub struct DataFit {
    pub field: usize,
    pub data: DataSource,
}

/// `u_field(p_0) = value(p_0)` at the first grid node.
#[derive(Clone, Debug)]
pub struct GaugePin {
    pub field: usize,
    pub value: Coefficient,
}

/// Symbolic description of a (possibly inverse, possibly nonlinear) PDE problem.
#[derive(Clone, Debug, Default)]
pub struct PdeSystem {
    pub dim: usize,
    pub fields: Vec<Field>,
    pub params: Vec<Parameter>,
    pub equations: Vec<Equation>,
    pub boundaries: Vec<BoundaryCondition>,
    pub data: Vec<DataFit>,
    pub pins: Vec<GaugePin>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Strong,
    Weak,
}

/// Sobolev order, variant and strong/weak mode of a residual metric.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub k: i32,
    pub variant: Variant,
    pub mode: Mode,
}

impl MetricSpec {
    pub const fn new(k: i32, variant: Variant, mode: Mode) -> Self {
        Self { k, variant, mode }
    }

    pub const fn l2() -> Self {
        Self::new(0, Variant::Plain, Mode::Strong)
    }

    /// `H^{-1}_*`, the starred dual metric.
    pub const fn dual_star() -> Self {
        Self::new(-1, Variant::Starred, Mode::Strong)
    }
}

impl Default for MetricSpec {
    fn default() -> Self {
        Self::l2()
    }
}

impl fmt::Display for MetricSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.k == 0 {
            return match self.mode {
                Mode::Strong => write!(f, "l2-strong"),
                Mode::Weak => write!(f, "l2-weak"),
            };
        }
        write!(f, "h{}", self.k)?;
        if self.variant == Variant::Starred {
            write!(f, "-star")?;
        }
        if self.mode == Mode::Weak {
            write!(f, "-weak")?;
        }
        Ok(())
    }
}

impl FromStr for MetricSpec {
    type Err = PsmError;

    /// Accepts `l2`, `l2-strong`, `l2-weak`, and `h<k>[-star][-weak]` with
    /// signed `k`, e.g. `h1`, `h-1-star`, `h2-weak`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || PsmError::InvalidArgument(format!("unrecognised norm '{s}'"));
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "l2" | "l2-strong" => return Ok(Self::l2()),
            "l2-weak" => return Ok(Self::new(0, Variant::Plain, Mode::Weak)),
            _ => {}
        }
        let mut rest = lower.strip_prefix('h').ok_or_else(bad)?;
        let mut mode = Mode::Strong;
        if let Some(r) = rest.strip_suffix("-weak") {
            mode = Mode::Weak;
            rest = r;
        } else if let Some(r) = rest.strip_suffix("-strong") {
            rest = r;
        }
        let mut variant = Variant::Plain;
        if let Some(r) = rest.strip_suffix("-star") {
            variant = Variant::Starred;
            rest = r;
        }
        let k: i32 = rest.parse().map_err(|_| bad())?;
        Ok(Self::new(k, variant, mode))
    }
}

/// Metric choices and term multipliers for assembling a loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub pde_metric: MetricSpec,
    /// Boundary terms use `W_b²` instead of `W_b` when set.
    pub boundary_weak: bool,
    pub pde_weight: f64,
    pub boundary_weight: f64,
    pub data_weight: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            pde_metric: MetricSpec::l2(),
            boundary_weak: false,
            pde_weight: 1.0,
            boundary_weight: 1.0,
            data_weight: 1.0,
        }
    }
}

impl LossSpec {
    pub fn with_pde_metric(metric: MetricSpec) -> Self {
        Self {
            pde_metric: metric,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
enum Metric {
    Diagonal(Vec<f64>),
    Weight(Arc<SobolevWeight>),
    WeightSquared(Arc<SobolevWeight>),
}

impl Metric {
    fn apply(&self, r: &[f64]) -> Vec<f64> {
        match self {
            Metric::Diagonal(d) => r.iter().zip(d).map(|(a, b)| a * b).collect(),
            Metric::Weight(w) => w.apply_slice(r),
            Metric::WeightSquared(w) => w.apply_slice(&w.apply_slice(r)),
        }
    }

    fn apply_columns(&self, j: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Metric::Diagonal(d) => {
                let mut out = j.clone();
                for (r, s) in d.iter().enumerate() {
                    out.row_mut(r).scale_mut(*s);
                }
                out
            }
            Metric::Weight(w) => w.apply_columns(j),
            Metric::WeightSquared(w) => w.apply_columns(&w.apply_columns(j)),
        }
    }
}

#[derive(Debug, Clone)]
enum DTerm {
    Linear {
        field: usize,
        op: KronOp,
        coeff: Vec<f64>,
    },
    ParamLinear {
        param: usize,
        field: usize,
        op: KronOp,
        coeff: Vec<f64>,
    },
    ParamSource {
        param: usize,
        source: Vec<f64>,
    },
    Advection {
        velocity: usize,
        field: usize,
        op: KronOp,
        coeff: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
enum BlockKind {
    Equation {
        terms: Vec<DTerm>,
        rhs: Vec<f64>,
    },
    Trace {
        field: usize,
        op: KronOp,
        target: Vec<f64>,
    },
    Data {
        field: usize,
        target: Vec<f64>,
    },
    Pin {
        field: usize,
        index: usize,
        value: f64,
    },
}

#[derive(Debug, Clone)]
struct Block {
    label: String,
    weight: f64,
    metric: Metric,
    rows: usize,
    kind: BlockKind,
}

/// A loss sampled on concrete grids, with exact gradients and Hessians.
#[derive(Debug, Clone)]
pub struct AssembledLoss {
    cache: Arc<OperatorCache>,
    field_names: Vec<String>,
    param_names: Vec<String>,
    param_initial: Vec<f64>,
    /// State offset of each unknown field.
    offsets: Vec<Option<usize>>,
    /// Grid values of each known field.
    known: Vec<Option<Vec<f64>>>,
    n_unknown_fields: usize,
    blocks: Vec<Block>,
    affine: bool,
    /// Parameter-polynomial pieces of the Gauss–Newton field block, built on
    /// first use for non-affine losses.
    gn_cache: Arc<OnceLock<Option<GnCache>>>,
}

/// Field-field Gauss–Newton matrix as `Σ s_a s_b G_ab` with `s_0 = 1` and
/// `s_{k+1} = p_k`, valid when no block couples two unknown fields bilinearly.
#[derive(Debug)]
struct GnCache {
    terms: Vec<(usize, usize, DMatrix<f64>)>,
}

/// Build the loss for `system` with the given metrics.
pub fn assemble(
    system: &PdeSystem,
    spec: &LossSpec,
    cache: Arc<OperatorCache>,
    n_bnd: usize,
) -> Result<AssembledLoss> {
    AssembledLoss::new(system, spec, cache, n_bnd)
}

/// [`assemble`] with the PDE metric forced to strong mode.
pub fn assemble_strong_loss(
    system: &PdeSystem,
    spec: &LossSpec,
    cache: Arc<OperatorCache>,
    n_bnd: usize,
) -> Result<AssembledLoss> {
    let mut s = *spec;
    s.pde_metric.mode = Mode::Strong;
    assemble(system, &s, cache, n_bnd)
}

/// [`assemble`] with the PDE metric in weak mode: the residual is measured
/// through its pairings with every Lagrange test function.
pub fn assemble_weak_loss(
    system: &PdeSystem,
    spec: &LossSpec,
    cache: Arc<OperatorCache>,
    n_bnd: usize,
) -> Result<AssembledLoss> {
    let mut s = *spec;
    s.pde_metric.mode = Mode::Weak;
    assemble(system, &s, cache, n_bnd)
}

/// Inverse-problem loss: `system` plus a domain data fit of `field` to grid
/// samples `data`. The system must declare at least one parameter.
pub fn assemble_inverse_loss(
    system: &PdeSystem,
    field: usize,
    data: Vec<f64>,
    spec: &LossSpec,
    cache: Arc<OperatorCache>,
    n_bnd: usize,
) -> Result<AssembledLoss> {
    if system.params.is_empty() {
        return Err(PsmError::InvalidArgument(
            "inverse loss needs at least one unknown parameter".into(),
        ));
    }
    if data.is_empty() {
        return Err(PsmError::InvalidArgument("missing data vector".into()));
    }
    let mut sys = system.clone();
    sys.data.push(DataFit {
        field,
        data: DataSource::Samples(data),
    });
    assemble(&sys, spec, cache, n_bnd)
}

fn metric_for(cache: &OperatorCache, spec: MetricSpec) -> Result<Metric> {
    if spec.k == 0 {
        let w = cache.grid().weights();
        return Ok(match spec.mode {
            Mode::Strong => Metric::Diagonal(w.to_vec()),
            Mode::Weak => Metric::Diagonal(w.iter().map(|x| x * x).collect()),
        });
    }
    let w = cache.sobolev_weight(spec.k, spec.variant)?;
    Ok(match spec.mode {
        Mode::Strong => Metric::Weight(w),
        Mode::Weak => Metric::WeightSquared(w),
    })
}

fn mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// `diag(coeff) · op` as a dense matrix.
fn scaled_dense(op: &KronOp, coeff: &[f64]) -> DMatrix<f64> {
    let mut d = op.to_dense();
    for (r, c) in coeff.iter().enumerate() {
        d.row_mut(r).scale_mut(*c);
    }
    d
}

impl AssembledLoss {
    fn new(
        system: &PdeSystem,
        spec: &LossSpec,
        cache: Arc<OperatorCache>,
        n_bnd: usize,
    ) -> Result<Self> {
        let m = cache.dim();
        let n = cache.len();
        if system.dim != m {
            return Err(PsmError::DimensionMismatch {
                what: "problem dimension".into(),
                expected: m,
                found: system.dim,
            });
        }
        let mut offsets = Vec::new();
        let mut known = Vec::new();
        let mut next = 0;
        for f in &system.fields {
            match &f.kind {
                FieldKind::Unknown => {
                    offsets.push(Some(next));
                    known.push(None);
                    next += n;
                }
                FieldKind::Known(c) => {
                    offsets.push(None);
                    known.push(Some(c.sample(&cache)));
                }
            }
        }
        let n_unknown_fields = next / n.max(1);
        let n_fields = system.fields.len();
        let n_params = system.params.len();

        let check_field = |j: usize, what: &str| -> Result<()> {
            if j >= n_fields {
                return Err(PsmError::InvalidArgument(format!(
                    "{what} refers to field {j}, but only {n_fields} fields exist"
                )));
            }
            Ok(())
        };
        let check_unknown = |j: usize, what: &str| -> Result<()> {
            check_field(j, what)?;
            if offsets[j].is_none() {
                return Err(PsmError::InvalidArgument(format!(
                    "{what} constrains the known field '{}'",
                    system.fields[j].name
                )));
            }
            Ok(())
        };
        let check_param = |p: usize, what: &str| -> Result<()> {
            if p >= n_params {
                return Err(PsmError::InvalidArgument(format!(
                    "{what} refers to parameter {p}, but only {n_params} exist"
                )));
            }
            Ok(())
        };
        let op_for = |beta: &[usize], what: &str| -> Result<KronOp> {
            if beta.len() != m {
                return Err(PsmError::DimensionMismatch {
                    what: format!("multi-index in {what}"),
                    expected: m,
                    found: beta.len(),
                });
            }
            Ok(cache.diff_operator(beta))
        };

        let mut blocks = Vec::new();
        let mut affine = true;
        for eq in &system.equations {
            let what = format!("equation '{}'", eq.label);
            let mut terms = Vec::with_capacity(eq.terms.len());
            for t in &eq.terms {
                terms.push(match t {
                    Term::Linear { field, beta, coeff } => {
                        check_field(*field, &what)?;
                        DTerm::Linear {
                            field: *field,
                            op: op_for(beta, &what)?,
                            coeff: coeff.sample(&cache),
                        }
                    }
                    Term::ParamLinear {
                        param,
                        field,
                        beta,
                        coeff,
                    } => {
                        check_field(*field, &what)?;
                        check_param(*param, &what)?;
                        if offsets[*field].is_some() {
                            affine = false;
                        }
                        DTerm::ParamLinear {
                            param: *param,
                            field: *field,
                            op: op_for(beta, &what)?,
                            coeff: coeff.sample(&cache),
                        }
                    }
                    Term::ParamSource { param, source } => {
                        check_param(*param, &what)?;
                        DTerm::ParamSource {
                            param: *param,
                            source: source.sample(&cache),
                        }
                    }
                    Term::Advection {
                        velocity,
                        field,
                        beta,
                        coeff,
                    } => {
                        check_field(*velocity, &what)?;
                        check_field(*field, &what)?;
                        if offsets[*velocity].is_some() && offsets[*field].is_some() {
                            affine = false;
                        }
                        DTerm::Advection {
                            velocity: *velocity,
                            field: *field,
                            op: op_for(beta, &what)?,
                            coeff: coeff.sample(&cache),
                        }
                    }
                });
            }
            let metric_spec = eq.metric.unwrap_or(spec.pde_metric);
            blocks.push(Block {
                label: eq.label.clone(),
                weight: spec.pde_weight,
                metric: metric_for(&cache, metric_spec)?,
                rows: n,
                kind: BlockKind::Equation {
                    terms,
                    rhs: eq.rhs.sample(&cache),
                },
            });
        }

        if !system.boundaries.is_empty() {
            let faces = cache.faces(n_bnd)?;
            for bc in &system.boundaries {
                check_unknown(bc.field, "boundary condition")?;
                for (face, fg) in Face::all(m).into_iter().zip(faces.iter()) {
                    let target: Vec<f64> = (0..fg.len())
                        .map(|i| {
                            let p = fg.embedded_point(i);
                            match &bc.values {
                                Coefficient::Const(c) => *c,
                                Coefficient::Func(f) => f(&p),
                            }
                        })
                        .collect();
                    let w = fg.weights();
                    let diag = if spec.boundary_weak {
                        w.iter().map(|x| x * x).collect()
                    } else {
                        w.to_vec()
                    };
                    let side = match face.side {
                        crate::Side::Lower => '-',
                        crate::Side::Upper => '+',
                    };
                    blocks.push(Block {
                        label: format!(
                            "boundary {} x{}{side}",
                            system.fields[bc.field].name, face.axis
                        ),
                        weight: spec.boundary_weight,
                        metric: Metric::Diagonal(diag),
                        rows: fg.len(),
                        kind: BlockKind::Trace {
                            field: bc.field,
                            op: cache.trace_operator(n_bnd, face),
                            target,
                        },
                    });
                }
            }
        }

        for d in &system.data {
            check_unknown(d.field, "data fit")?;
            let target = match &d.data {
                DataSource::Func(c) => c.sample(&cache),
                DataSource::Samples(v) => {
                    if v.len() != n {
                        return Err(PsmError::DimensionMismatch {
                            what: "data samples".into(),
                            expected: n,
                            found: v.len(),
                        });
                    }
                    v.clone()
                }
            };
            blocks.push(Block {
                label: format!("data {}", system.fields[d.field].name),
                weight: spec.data_weight,
                metric: Metric::Diagonal(cache.grid().weights().to_vec()),
                rows: n,
                kind: BlockKind::Data {
                    field: d.field,
                    target,
                },
            });
        }

        for pin in &system.pins {
            check_unknown(pin.field, "gauge pin")?;
            let p0 = cache.grid().point(0);
            let value = match &pin.value {
                Coefficient::Const(c) => *c,
                Coefficient::Func(f) => f(&p0),
            };
            blocks.push(Block {
                label: format!("gauge {}", system.fields[pin.field].name),
                weight: 1.0,
                metric: Metric::Diagonal(vec![1.0]),
                rows: 1,
                kind: BlockKind::Pin {
                    field: pin.field,
                    index: 0,
                    value,
                },
            });
        }

        Ok(Self {
            cache,
            field_names: system.fields.iter().map(|f| f.name.clone()).collect(),
            param_names: system.params.iter().map(|p| p.name.clone()).collect(),
            param_initial: system.params.iter().map(|p| p.initial).collect(),
            offsets,
            known,
            n_unknown_fields,
            blocks,
            affine,
            gn_cache: Arc::new(OnceLock::new()),
        })
    }

    pub fn cache(&self) -> &Arc<OperatorCache> {
        &self.cache
    }

    /// Grid size of one field.
    pub fn field_len(&self) -> usize {
        self.cache.len()
    }

    pub fn n_state(&self) -> usize {
        self.n_unknown_fields * self.field_len() + self.param_names.len()
    }

    pub fn field_names(&self) -> &[String] {
        &self.field_names
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    /// True when every block residual is affine in the state.
    pub fn is_affine(&self) -> bool {
        self.affine
    }

    /// Length of the leading field part of the state when its Hessian block
    /// equals the Gauss–Newton block (no term couples two unknown fields),
    /// otherwise 0.
    pub fn psd_field_prefix(&self) -> usize {
        let coupled = self.blocks.iter().any(|b| match &b.kind {
            BlockKind::Equation { terms, .. } => terms.iter().any(|t| {
                matches!(t, DTerm::Advection { velocity, field, .. }
                    if self.offsets[*velocity].is_some() && self.offsets[*field].is_some())
            }),
            _ => false,
        });
        if coupled {
            0
        } else {
            self.n_unknown_fields * self.field_len()
        }
    }

    /// Zero fields with the declared parameter guesses.
    pub fn initial_state(&self) -> Vec<f64> {
        let mut x = vec![0.0; self.n_unknown_fields * self.field_len()];
        x.extend_from_slice(&self.param_initial);
        x
    }

    fn param_index(&self, p: usize) -> usize {
        self.n_unknown_fields * self.field_len() + p
    }

    /// Grid values of field `j` in state `x` (known fields return their data).
    pub fn field<'a>(&'a self, x: &'a [f64], j: usize) -> &'a [f64] {
        match (self.offsets[j], &self.known[j]) {
            (Some(o), _) => &x[o..o + self.field_len()],
            (None, Some(v)) => v,
            (None, None) => unreachable!("field is neither known nor unknown"),
        }
    }

    /// State offset of unknown field `j`.
    pub fn field_offset(&self, j: usize) -> Option<usize> {
        self.offsets[j]
    }

    pub fn params<'a>(&self, x: &'a [f64]) -> &'a [f64] {
        &x[self.param_index(0)..]
    }

    fn check_state(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_state() {
            return Err(PsmError::DimensionMismatch {
                what: "state vector".into(),
                expected: self.n_state(),
                found: x.len(),
            });
        }
        Ok(())
    }

    fn block_residual(&self, b: &Block, x: &[f64]) -> Vec<f64> {
        match &b.kind {
            BlockKind::Equation { terms, rhs } => {
                let mut r: Vec<f64> = rhs.iter().map(|v| -v).collect();
                for t in terms {
                    match t {
                        DTerm::Linear { field, op, coeff } => {
                            let d = op.apply_slice(self.field(x, *field));
                            for ((ri, c), di) in r.iter_mut().zip(coeff).zip(&d) {
                                *ri += c * di;
                            }
                        }
                        DTerm::ParamLinear {
                            param,
                            field,
                            op,
                            coeff,
                        } => {
                            let mu = x[self.param_index(*param)];
                            let d = op.apply_slice(self.field(x, *field));
                            for ((ri, c), di) in r.iter_mut().zip(coeff).zip(&d) {
                                *ri += mu * c * di;
                            }
                        }
                        DTerm::ParamSource { param, source } => {
                            axpy(&mut r, x[self.param_index(*param)], source);
                        }
                        DTerm::Advection {
                            velocity,
                            field,
                            op,
                            coeff,
                        } => {
                            let d = op.apply_slice(self.field(x, *field));
                            let u = self.field(x, *velocity);
                            for (((ri, c), ui), di) in r.iter_mut().zip(coeff).zip(u).zip(&d) {
                                *ri += c * ui * di;
                            }
                        }
                    }
                }
                r
            }
            BlockKind::Trace { field, op, target } => {
                let mut r = op.apply_slice(self.field(x, *field));
                axpy(&mut r, -1.0, target);
                r
            }
            BlockKind::Data { field, target } => {
                let u = self.field(x, *field);
                u.iter().zip(target).map(|(a, b)| a - b).collect()
            }
            BlockKind::Pin {
                field,
                index,
                value,
            } => vec![self.field(x, *field)[*index] - value],
        }
    }

    /// Accumulate `scale · J_bᵀ y` into `out`.
    fn block_vjp(&self, b: &Block, x: &[f64], y: &[f64], scale: f64, out: &mut [f64]) {
        let n = self.field_len();
        let add_field = |out: &mut [f64], j: usize, v: &[f64]| {
            if let Some(o) = self.offsets[j] {
                axpy(&mut out[o..o + n], scale, v);
            }
        };
        match &b.kind {
            BlockKind::Equation { terms, .. } => {
                for t in terms {
                    match t {
                        DTerm::Linear { field, op, coeff } => {
                            if self.offsets[*field].is_some() {
                                let v = op.transpose().apply_slice(&mul(coeff, y));
                                add_field(out, *field, &v);
                            }
                        }
                        DTerm::ParamLinear {
                            param,
                            field,
                            op,
                            coeff,
                        } => {
                            let pi = self.param_index(*param);
                            let cy = mul(coeff, y);
                            let d = op.apply_slice(self.field(x, *field));
                            out[pi] += scale * dot(&cy, &d);
                            if self.offsets[*field].is_some() {
                                let mut v = op.transpose().apply_slice(&cy);
                                v.iter_mut().for_each(|e| *e *= x[pi]);
                                add_field(out, *field, &v);
                            }
                        }
                        DTerm::ParamSource { param, source } => {
                            out[self.param_index(*param)] += scale * dot(source, y);
                        }
                        DTerm::Advection {
                            velocity,
                            field,
                            op,
                            coeff,
                        } => {
                            let cy = mul(coeff, y);
                            if self.offsets[*velocity].is_some() {
                                let d = op.apply_slice(self.field(x, *field));
                                add_field(out, *velocity, &mul(&cy, &d));
                            }
                            if self.offsets[*field].is_some() {
                                let u = self.field(x, *velocity);
                                let v = op.transpose().apply_slice(&mul(&cy, u));
                                add_field(out, *field, &v);
                            }
                        }
                    }
                }
            }
            BlockKind::Trace { field, op, .. } => {
                let v = op.transpose().apply_slice(y);
                add_field(out, *field, &v);
            }
            BlockKind::Data { field, .. } => add_field(out, *field, y),
            BlockKind::Pin { field, index, .. } => {
                if let Some(o) = self.offsets[*field] {
                    out[o + index] += scale * y[0];
                }
            }
        }
    }

    /// Dense Jacobian of one block residual (rows × state).
    fn block_jacobian(&self, b: &Block, x: &[f64]) -> DMatrix<f64> {
        let n = self.field_len();
        let mut j = DMatrix::zeros(b.rows, self.n_state());
        let add_field = |j: &mut DMatrix<f64>, f: usize, m: &DMatrix<f64>| {
            if let Some(o) = self.offsets[f] {
                let mut view = j.columns_mut(o, n);
                view += m;
            }
        };
        match &b.kind {
            BlockKind::Equation { terms, .. } => {
                for t in terms {
                    match t {
                        DTerm::Linear { field, op, coeff } => {
                            if self.offsets[*field].is_some() {
                                add_field(&mut j, *field, &scaled_dense(op, coeff));
                            }
                        }
                        DTerm::ParamLinear {
                            param,
                            field,
                            op,
                            coeff,
                        } => {
                            let pi = self.param_index(*param);
                            let d = mul(coeff, &op.apply_slice(self.field(x, *field)));
                            let mut col = j.column_mut(pi);
                            col += DVector::from_vec(d);
                            if self.offsets[*field].is_some() {
                                let mu = x[pi];
                                let s: Vec<f64> = coeff.iter().map(|c| c * mu).collect();
                                add_field(&mut j, *field, &scaled_dense(op, &s));
                            }
                        }
                        DTerm::ParamSource { param, source } => {
                            let mut col = j.column_mut(self.param_index(*param));
                            col += DVector::from_column_slice(source);
                        }
                        DTerm::Advection {
                            velocity,
                            field,
                            op,
                            coeff,
                        } => {
                            if self.offsets[*velocity].is_some() {
                                let d = mul(coeff, &op.apply_slice(self.field(x, *field)));
                                let diag = DMatrix::from_diagonal(&DVector::from_vec(d));
                                add_field(&mut j, *velocity, &diag);
                            }
                            if self.offsets[*field].is_some() {
                                let s = mul(coeff, self.field(x, *velocity));
                                add_field(&mut j, *field, &scaled_dense(op, &s));
                            }
                        }
                    }
                }
            }
            BlockKind::Trace { field, op, .. } => add_field(&mut j, *field, &op.to_dense()),
            BlockKind::Data { field, .. } => {
                add_field(&mut j, *field, &DMatrix::identity(n, n));
            }
            BlockKind::Pin { field, index, .. } => {
                if let Some(o) = self.offsets[*field] {
                    j[(0, o + index)] = 1.0;
                }
            }
        }
        j
    }

    /// Add `Σ_i w_i ∇²r_i` for one block into `h`.
    fn block_second_order(&self, b: &Block, w: &[f64], h: &mut DMatrix<f64>) {
        let n = self.field_len();
        let BlockKind::Equation { terms, .. } = &b.kind else {
            return;
        };
        for t in terms {
            match t {
                DTerm::ParamLinear {
                    param,
                    field,
                    op,
                    coeff,
                } => {
                    if let Some(o) = self.offsets[*field] {
                        let pi = self.param_index(*param);
                        let v = op.transpose().apply_slice(&mul(coeff, w));
                        for (k, vk) in v.iter().enumerate() {
                            h[(pi, o + k)] += vk;
                            h[(o + k, pi)] += vk;
                        }
                    }
                }
                DTerm::Advection {
                    velocity,
                    field,
                    op,
                    coeff,
                } => {
                    if let (Some(ov), Some(of)) = (self.offsets[*velocity], self.offsets[*field]) {
                        let m = scaled_dense(op, &mul(coeff, w));
                        {
                            let mut view = h.view_mut((ov, of), (n, n));
                            view += &m;
                        }
                        let mut view = h.view_mut((of, ov), (n, n));
                        view += m.transpose();
                    }
                }
                _ => {}
            }
        }
    }

    /// `𝓛(x)`.
    pub fn value(&self, x: &[f64]) -> Result<f64> {
        self.check_state(x)?;
        Ok(self
            .blocks
            .iter()
            .map(|b| {
                let r = self.block_residual(b, x);
                b.weight * dot(&r, &b.metric.apply(&r))
            })
            .sum())
    }

    /// `(𝓛(x), ∇𝓛(x))`.
    pub fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_state(x)?;
        let mut g = vec![0.0; self.n_state()];
        let mut val = 0.0;
        for b in &self.blocks {
            let r = self.block_residual(b, x);
            let mr = b.metric.apply(&r);
            val += b.weight * dot(&r, &mr);
            self.block_vjp(b, x, &mr, 2.0 * b.weight, &mut g);
        }
        Ok((val, g))
    }

    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.value_and_gradient(x)?.1)
    }

    /// Field columns of a block Jacobian split by parameter dependence:
    /// index 0 is constant, index `k + 1` multiplies parameter `k`.
    /// `None` if some term is bilinear in two unknown fields.
    fn block_field_pieces(&self, b: &Block) -> Option<Vec<Option<DMatrix<f64>>>> {
        let n = self.field_len();
        let ns = self.n_state();
        let mut pieces: Vec<Option<DMatrix<f64>>> = vec![None; self.param_names.len() + 1];
        let mut add = |slot: usize, f: usize, m: &DMatrix<f64>| {
            if let Some(o) = self.offsets[f] {
                let j = pieces[slot].get_or_insert_with(|| DMatrix::zeros(b.rows, ns));
                let mut view = j.columns_mut(o, n);
                view += m;
            }
        };
        match &b.kind {
            BlockKind::Equation { terms, .. } => {
                for t in terms {
                    match t {
                        DTerm::Linear { field, op, coeff } => {
                            if self.offsets[*field].is_some() {
                                add(0, *field, &scaled_dense(op, coeff));
                            }
                        }
                        DTerm::ParamLinear {
                            param,
                            field,
                            op,
                            coeff,
                        } => {
                            if self.offsets[*field].is_some() {
                                add(param + 1, *field, &scaled_dense(op, coeff));
                            }
                        }
                        DTerm::ParamSource { .. } => {}
                        DTerm::Advection {
                            velocity,
                            field,
                            op,
                            coeff,
                        } => match (self.offsets[*velocity], self.offsets[*field]) {
                            (Some(_), Some(_)) => return None,
                            (Some(_), None) => {
                                let d = mul(coeff, &op.apply_slice(self.field(&[], *field)));
                                add(0, *velocity, &DMatrix::from_diagonal(&DVector::from_vec(d)));
                            }
                            (None, Some(_)) => {
                                let s = mul(coeff, self.field(&[], *velocity));
                                add(0, *field, &scaled_dense(op, &s));
                            }
                            (None, None) => {}
                        },
                    }
                }
            }
            _ => {
                let j = self.block_jacobian(b, &vec![0.0; ns]);
                pieces[0] = Some(j);
            }
        }
        Some(pieces)
    }

    fn build_gn_cache(&self) -> Option<GnCache> {
        let np = self.param_names.len() + 1;
        let mut acc: Vec<Option<DMatrix<f64>>> = vec![None; np * np];
        for b in &self.blocks {
            let pieces = self.block_field_pieces(b)?;
            let metric_pieces: Vec<Option<DMatrix<f64>>> = pieces
                .iter()
                .map(|p| p.as_ref().map(|j| b.metric.apply_columns(j)))
                .collect();
            for a in 0..np {
                let Some(ja) = &pieces[a] else { continue };
                for c in a..np {
                    let Some(mjc) = &metric_pieces[c] else {
                        continue;
                    };
                    let slot = acc[a * np + c]
                        .get_or_insert_with(|| DMatrix::zeros(self.n_state(), self.n_state()));
                    let scale = if a == c { 2.0 } else { 4.0 } * b.weight;
                    slot.gemm_tr(scale, ja, mjc, 1.0);
                }
            }
        }
        let terms = acc
            .into_iter()
            .enumerate()
            .filter_map(|(i, m)| m.map(|m| (i / np, i % np, m)))
            .collect();
        Some(GnCache { terms })
    }

    /// Gauss–Newton matrix from the cached pieces plus the parameter rows
    /// and columns evaluated at `x`.
    fn cached_gauss_newton(&self, cache: &GnCache, x: &[f64]) -> DMatrix<f64> {
        let ns = self.n_state();
        let p0 = self.param_index(0);
        let params = self.params(x);
        let s = |a: usize| if a == 0 { 1.0 } else { params[a - 1] };
        let mut h = DMatrix::zeros(ns, ns);
        for (a, c, m) in &cache.terms {
            h += m * (s(*a) * s(*c));
        }
        // Symmetrise the accumulated upper-triangular products.
        let ht = h.transpose();
        h = (h + ht) * 0.5;
        let np = self.param_names.len();
        for b in &self.blocks {
            let involves_param = matches!(&b.kind, BlockKind::Equation { terms, .. }
                if terms.iter().any(|t| matches!(t, DTerm::ParamLinear { .. } | DTerm::ParamSource { .. })));
            if !involves_param {
                continue;
            }
            let j = self.block_jacobian(b, x);
            let pcols = j.columns(p0, np).into_owned();
            let mp = b.metric.apply_columns(&pcols);
            let cross = (j.transpose() * mp) * (2.0 * b.weight);
            // cross holds Jᵀ M J restricted to parameter columns.
            for k in 0..np {
                for r in 0..ns {
                    let v = cross[(r, k)];
                    if r >= p0 {
                        h[(r, p0 + k)] += v;
                    } else {
                        h[(r, p0 + k)] += v;
                        h[(p0 + k, r)] += v;
                    }
                }
            }
        }
        h
    }

    /// Gauss–Newton part `Σ 2c_b J_bᵀ M_b J_b` of the Hessian.
    pub fn gauss_newton(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_state(x)?;
        if !self.affine && !self.param_names.is_empty() {
            if let Some(cache) = self.gn_cache.get_or_init(|| self.build_gn_cache()) {
                return Ok(self.cached_gauss_newton(cache, x));
            }
        }
        let ns = self.n_state();
        let mut h = DMatrix::zeros(ns, ns);
        for b in &self.blocks {
            let j = self.block_jacobian(b, x);
            let mj = b.metric.apply_columns(&j);
            let jt = j.transpose();
            h.gemm(2.0 * b.weight, &jt, &mj, 1.0);
        }
        let ht = h.transpose();
        Ok((h + ht) * 0.5)
    }

    /// Exact Hessian `∇²𝓛(x)`.
    pub fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let mut h = self.gauss_newton(x)?;
        if !self.affine {
            for b in &self.blocks {
                let r = self.block_residual(b, x);
                let mut w = b.metric.apply(&r);
                w.iter_mut().for_each(|v| *v *= 2.0 * b.weight);
                self.block_second_order(b, &w, &mut h);
            }
        }
        Ok(h)
    }

    /// For affine losses, `(𝕂*𝕂, rhs)` with `∇𝓛(x) = 𝕂*𝕂 x − 2 rhs`.
    pub fn normal_equations(&self) -> Result<(DMatrix<f64>, DVector<f64>)> {
        if !self.affine {
            return Err(PsmError::Nonlinear(
                "normal equations need a loss that is quadratic in the state".into(),
            ));
        }
        let x0 = vec![0.0; self.n_state()];
        let k = self.gauss_newton(&x0)?;
        let g0 = self.gradient(&x0)?;
        let rhs = DVector::from_iterator(g0.len(), g0.iter().map(|v| -0.5 * v));
        Ok((k, rhs))
    }

    /// Per-block contributions `c_b r_bᵀ M_b r_b`, labelled.
    pub fn block_values(&self, x: &[f64]) -> Result<Vec<(String, f64)>> {
        self.check_state(x)?;
        Ok(self
            .blocks
            .iter()
            .map(|b| {
                let r = self.block_residual(b, x);
                (b.label.clone(), b.weight * dot(&r, &b.metric.apply(&r)))
            })
            .collect())
    }

    /// Raw residual of the block with the given label.
    pub fn block_residual_by_label(&self, x: &[f64], label: &str) -> Option<Vec<f64>> {
        self.blocks
            .iter()
            .find(|b| b.label == label)
            .map(|b| self.block_residual(b, x))
    }

    /// State built from per-field grid values and parameter values.
    pub fn pack_state(&self, fields: &[Vec<f64>], params: &[f64]) -> Result<Vec<f64>> {
        if params.len() != self.param_names.len() {
            return Err(PsmError::DimensionMismatch {
                what: "parameter vector".into(),
                expected: self.param_names.len(),
                found: params.len(),
            });
        }
        let mut x = vec![0.0; self.n_state()];
        let mut used = 0;
        for (j, o) in self.offsets.iter().enumerate() {
            if let Some(o) = o {
                let v = fields.get(j).ok_or_else(|| {
                    PsmError::InvalidArgument(format!("missing values for field {j}"))
                })?;
                if v.len() != self.field_len() {
                    return Err(PsmError::DimensionMismatch {
                        what: format!("values of field '{}'", self.field_names[j]),
                        expected: self.field_len(),
                        found: v.len(),
                    });
                }
                x[*o..*o + v.len()].copy_from_slice(v);
                used += 1;
            }
        }
        debug_assert_eq!(used, self.n_unknown_fields);
        let pi = self.param_index(0);
        x[pi..].copy_from_slice(params);
        Ok(x)
    }
}
