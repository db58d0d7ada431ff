//! Lagrange and Chebyshev bases on Legendre grids, the basis transform
//! between them, interpolation and the discrete L²-projection.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::grid::{legendre_rule_1d, BoxDomain, LegendreRule1D, MultiIndexSet, TensorGrid};
use crate::kron::KronOp;
use crate::{PsmError, Result};

/// Which basis a coefficient vector refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Basis {
    /// Lagrange basis on the Legendre grid: coefficients are grid values.
    Lagrange,
    /// Tensor Chebyshev polynomials of the first kind.
    Chebyshev,
}

impl std::fmt::Display for Basis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Basis::Lagrange => f.write_str("lagrange"),
            Basis::Chebyshev => f.write_str("chebyshev"),
        }
    }
}

/// `T_k(t)` for a reference coordinate `t`.
pub fn chebyshev_t(k: usize, t: f64) -> f64 {
    if t.abs() <= 1.0 {
        (k as f64 * t.acos()).cos()
    } else {
        let (mut prev, mut cur) = (1.0, t);
        if k == 0 {
            return 1.0;
        }
        for _ in 1..k {
            let next = 2.0 * t * cur - prev;
            prev = cur;
            cur = next;
        }
        cur
    }
}

/// `T_α(x) = ∏ T_{α_i}(x̂_i)` with `x̂` the reference coordinates of `x` in `domain`.
///
/// Points outside the box are evaluated by the recurrence; accuracy there is
/// not part of any guarantee.
pub fn chebyshev_eval(alpha: &[usize], x: &[f64], domain: &BoxDomain) -> f64 {
    assert_eq!(alpha.len(), x.len());
    alpha
        .iter()
        .zip(x)
        .enumerate()
        .map(|(i, (&k, &xi))| chebyshev_t(k, domain.to_reference(i, xi)))
        .product()
}

/// Barycentric weights of the Gauss–Legendre nodes (up to a common factor).
pub fn barycentric_weights(rule: &LegendreRule1D) -> Vec<f64> {
    rule.nodes
        .iter()
        .zip(&rule.weights)
        .enumerate()
        .map(|(j, (&x, &w))| {
            let s = ((1.0 - x * x) * w).sqrt();
            if j % 2 == 0 {
                s
            } else {
                -s
            }
        })
        .collect()
}

/// Values of all cardinal functions `l_0(t), …, l_n(t)` at a reference coordinate.
pub fn lagrange_values_1d(nodes: &[f64], bary: &[f64], t: f64) -> Vec<f64> {
    if let Some(j) = nodes.iter().position(|&x| x == t) {
        let mut out = vec![0.0; nodes.len()];
        out[j] = 1.0;
        return out;
    }
    let terms: Vec<f64> = nodes.iter().zip(bary).map(|(&x, &l)| l / (t - x)).collect();
    let denom: f64 = terms.iter().sum();
    terms.into_iter().map(|v| v / denom).collect()
}

/// Matrix `E[r, j] = l_j(t_r)` evaluating the cardinal basis of `rule` at
/// reference coordinates `targets`.
pub fn lagrange_eval_matrix(rule: &LegendreRule1D, targets: &[f64]) -> DMatrix<f64> {
    let bary = barycentric_weights(rule);
    let mut e = DMatrix::zeros(targets.len(), rule.len());
    for (r, &t) in targets.iter().enumerate() {
        for (j, v) in lagrange_values_1d(&rule.nodes, &bary, t)
            .into_iter()
            .enumerate()
        {
            e[(r, j)] = v;
        }
    }
    e
}

/// Matrix `T[r, k] = T_k(t_r)` for reference coordinates `targets`.
pub fn chebyshev_eval_matrix(n: usize, targets: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(targets.len(), n + 1, |r, k| chebyshev_t(k, targets[r]))
}

/// `L_α(x)` for the Lagrange basis of `grid`.
pub fn lagrange_eval(alpha: &[usize], grid: &TensorGrid, x: &[f64]) -> f64 {
    assert_eq!(alpha.len(), grid.dim());
    let rule = grid.rule();
    let bary = barycentric_weights(rule);
    alpha
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let t = grid.domain().to_reference(i, x[i]);
            lagrange_values_1d(&rule.nodes, &bary, t)[a]
        })
        .product()
}

/// Change of basis between Lagrange (grid values `C`) and Chebyshev
/// coefficients `Θ`: `C = 𝕋Θ`, `Θ = 𝕋⁻¹C`.
///
/// Both matrices are Kronecker products of one-dimensional factors; the
/// one-dimensional `T` is LU-factorised once to obtain its inverse.
#[derive(Debug, Clone)]
pub struct BasisTransform {
    m: usize,
    n: usize,
    to_lagrange_1d: DMatrix<f64>,
    to_chebyshev_1d: DMatrix<f64>,
}

impl BasisTransform {
    pub fn new(m: usize, n: usize) -> Result<Self> {
        MultiIndexSet::new(m, n)?;
        let rule = legendre_rule_1d(n);
        let t = chebyshev_eval_matrix(n, &rule.nodes);
        let inv =
            t.clone().lu().try_inverse().ok_or_else(|| {
                PsmError::Internal("Chebyshev–Lagrange transform is singular".into())
            })?;
        Ok(Self {
            m,
            n,
            to_lagrange_1d: t,
            to_chebyshev_1d: inv,
        })
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn degree(&self) -> usize {
        self.n
    }

    fn op(&self, f: &DMatrix<f64>) -> KronOp {
        KronOp::new(vec![self.n + 1; self.m], vec![Some(f.clone()); self.m])
    }

    /// `𝕋 = (T_β(p_α))_{α,β}` as an operator.
    pub fn to_lagrange_op(&self) -> KronOp {
        self.op(&self.to_lagrange_1d)
    }

    /// `𝕋⁻¹` as an operator.
    pub fn to_chebyshev_op(&self) -> KronOp {
        self.op(&self.to_chebyshev_1d)
    }

    pub fn to_lagrange(&self, theta: &[f64]) -> Vec<f64> {
        self.to_lagrange_op().apply_slice(theta)
    }

    pub fn to_chebyshev(&self, c: &[f64]) -> Vec<f64> {
        self.to_chebyshev_op().apply_slice(c)
    }

    pub fn to_lagrange_dense(&self) -> DMatrix<f64> {
        self.to_lagrange_op().to_dense()
    }

    pub fn to_chebyshev_dense(&self) -> DMatrix<f64> {
        self.to_chebyshev_op().to_dense()
    }
}

/// A polynomial surrogate `Σ_α c_α φ_α` on a box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Surrogate {
    pub m: usize,
    pub n: usize,
    pub basis: Basis,
    pub domain: BoxDomain,
    pub coeffs: Vec<f64>,
}

impl Surrogate {
    pub fn new(n: usize, basis: Basis, domain: BoxDomain, coeffs: Vec<f64>) -> Result<Self> {
        let m = domain.dim();
        let expected = MultiIndexSet::new(m, n)?.len();
        if coeffs.len() != expected {
            return Err(PsmError::DimensionMismatch {
                what: "surrogate coefficients".into(),
                expected,
                found: coeffs.len(),
            });
        }
        Ok(Self {
            m,
            n,
            basis,
            domain,
            coeffs,
        })
    }

    /// Same polynomial in Chebyshev form.
    pub fn to_chebyshev(&self) -> Result<Surrogate> {
        match self.basis {
            Basis::Chebyshev => Ok(self.clone()),
            Basis::Lagrange => {
                let t = BasisTransform::new(self.m, self.n)?;
                Surrogate::new(
                    self.n,
                    Basis::Chebyshev,
                    self.domain.clone(),
                    t.to_chebyshev(&self.coeffs),
                )
            }
        }
    }

    /// Same polynomial in Lagrange (grid value) form.
    pub fn to_lagrange(&self) -> Result<Surrogate> {
        match self.basis {
            Basis::Lagrange => Ok(self.clone()),
            Basis::Chebyshev => {
                let t = BasisTransform::new(self.m, self.n)?;
                Surrogate::new(
                    self.n,
                    Basis::Lagrange,
                    self.domain.clone(),
                    t.to_lagrange(&self.coeffs),
                )
            }
        }
    }

    pub fn evaluator(&self) -> SurrogateEvaluator<'_> {
        let rule = legendre_rule_1d(self.n);
        let bary = barycentric_weights(&rule);
        SurrogateEvaluator {
            surrogate: self,
            rule,
            bary,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.evaluator().eval(x)
    }

    /// Values on the tensor grid spanned by the per-axis coordinates `axes`
    /// (first axis fastest).
    pub fn eval_tensor(&self, axes: &[Vec<f64>]) -> Vec<f64> {
        assert_eq!(axes.len(), self.m);
        let rule = legendre_rule_1d(self.n);
        let factors = axes
            .iter()
            .enumerate()
            .map(|(i, xs)| {
                let t: Vec<f64> = xs.iter().map(|&x| self.domain.to_reference(i, x)).collect();
                Some(match self.basis {
                    Basis::Lagrange => lagrange_eval_matrix(&rule, &t),
                    Basis::Chebyshev => chebyshev_eval_matrix(self.n, &t),
                })
            })
            .collect();
        KronOp::new(vec![self.n + 1; self.m], factors).apply_slice(&self.coeffs)
    }
}

/// Point evaluator caching the Legendre rule of a surrogate.
pub struct SurrogateEvaluator<'a> {
    surrogate: &'a Surrogate,
    rule: LegendreRule1D,
    bary: Vec<f64>,
}

impl SurrogateEvaluator<'_> {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let s = self.surrogate;
        assert_eq!(x.len(), s.m, "point dimension mismatch");
        let axis_values: Vec<Vec<f64>> = x
            .iter()
            .enumerate()
            .map(|(i, &xi)| {
                let t = s.domain.to_reference(i, xi);
                match s.basis {
                    Basis::Lagrange => lagrange_values_1d(&self.rule.nodes, &self.bary, t),
                    Basis::Chebyshev => (0..=s.n).map(|k| chebyshev_t(k, t)).collect(),
                }
            })
            .collect();
        // Contract the coefficient tensor one axis at a time, first axis first.
        let mut cur = s.coeffs.clone();
        for vals in &axis_values {
            let len = vals.len();
            cur = cur
                .chunks(len)
                .map(|chunk| chunk.iter().zip(vals).map(|(c, v)| c * v).sum())
                .collect();
        }
        cur[0]
    }
}

/// `𝓘(f)`: the Lagrange surrogate with the given grid values.
pub fn interpolate(grid: &TensorGrid, values: &[f64]) -> Result<Surrogate> {
    if values.len() != grid.len() {
        return Err(PsmError::DimensionMismatch {
            what: "interpolation values".into(),
            expected: grid.len(),
            found: values.len(),
        });
    }
    Surrogate::new(
        grid.degree(),
        Basis::Lagrange,
        grid.domain().clone(),
        values.to_vec(),
    )
}

/// Interpolate a function handle on `grid`.
pub fn interpolate_fn<F: Fn(&[f64]) -> f64>(grid: &TensorGrid, f: F) -> Result<Surrogate> {
    interpolate(grid, &grid.sample(f))
}

/// `π(f)`: coefficients `⟨f, L_α⟩ / w_α`, with the inner products evaluated by
/// a Gauss rule of degree `n + 1` (one node more per axis than the grid).
pub fn l2_project<F: Fn(&[f64]) -> f64>(grid: &TensorGrid, f: F) -> Result<Surrogate> {
    let n = grid.degree();
    let fine = TensorGrid::new(n + 1, grid.domain())?;
    let weighted: Vec<f64> = fine
        .sample(&f)
        .iter()
        .zip(fine.weights())
        .map(|(v, w)| v * w)
        .collect();
    let coarse_rule = grid.rule();
    let factors = (0..grid.dim())
        .map(|_| Some(lagrange_eval_matrix(coarse_rule, &fine.rule().nodes).transpose()))
        .collect();
    let pairings = KronOp::new(vec![n + 2; grid.dim()], factors).apply_slice(&weighted);
    let coeffs = pairings
        .iter()
        .zip(grid.weights())
        .map(|(p, w)| p / w)
        .collect();
    Surrogate::new(n, Basis::Lagrange, grid.domain().clone(), coeffs)
}
