//! Truncated differential, adjoint, embedding-adjoint and trace operators on
//! grid-value vectors of a tensor Legendre grid.
//!
//! Every operator here acts on *grid values* (Lagrange coefficients). The
//! one-dimensional differentiation matrix is `D[r, c] = l_c'(p_r)`, so `D·C`
//! are the grid values of the derivative of the interpolant of `C`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::basis::{barycentric_weights, chebyshev_eval_matrix, lagrange_eval_matrix};
use crate::grid::{boundary_grids, BoxDomain, Face, LegendreRule1D, Side, TensorGrid};
use crate::kron::KronOp;
use crate::{PsmError, Result};

/// Differentiation matrix on the nodes of `rule` mapped to `[a, b]`.
pub fn diff_matrix_1d(rule: &LegendreRule1D, interval: (f64, f64)) -> DMatrix<f64> {
    let (a, b) = interval;
    let scale = 2.0 / (b - a);
    let x = &rule.nodes;
    let bary = barycentric_weights(rule);
    let len = x.len();
    let mut d = DMatrix::zeros(len, len);
    for r in 0..len {
        let mut diag = 0.0;
        for c in 0..len {
            if r != c {
                let v = (bary[c] / bary[r]) / (x[r] - x[c]);
                d[(r, c)] = v * scale;
                diag -= v;
            }
        }
        d[(r, r)] = diag * scale;
    }
    d
}

/// Dense `𝔻* = W⁻¹ 𝔻ᵀ W` for a diagonal weight.
pub fn adjoint_dense(op: &DMatrix<f64>, weights: &[f64]) -> DMatrix<f64> {
    let mut t = op.transpose();
    for r in 0..t.nrows() {
        for c in 0..t.ncols() {
            t[(r, c)] *= weights[c] / weights[r];
        }
    }
    t
}

fn diag(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(v))
}

/// `W⁻¹ Aᵀ W` for a one-dimensional factor.
fn adjoint_factor(a: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    adjoint_dense(a, w)
}

/// Whether a Sobolev form uses `Σ 𝔻*𝔻` (plain) or `Σ 𝔻𝔻*` (starred).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Plain,
    Starred,
}

/// All `β ∈ ℕ^m` with `‖β‖₁ ≤ k`, `β = 0` first.
pub fn multi_indices_up_to(m: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(m: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == m {
            out.push(cur.clone());
            return;
        }
        for b in 0..=left {
            cur.push(b);
            rec(m, left - b, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(m, k, &mut Vec::new(), &mut out);
    out.sort_by_key(|b| {
        (
            b.iter().sum::<usize>(),
            b.iter().rev().cloned().collect::<Vec<_>>(),
        )
    });
    out
}

/// A symmetric positive definite Sobolev weight `𝕎_{m,n,k}` or one of its
/// dual/starred variants, kept in whichever representation is cheapest to apply.
#[derive(Debug, Clone)]
pub struct SobolevWeight {
    k: i32,
    variant: Variant,
    repr: WeightRepr,
}

#[derive(Debug, Clone)]
enum WeightRepr {
    Diagonal(Vec<f64>),
    /// Sum of Kronecker products; each term is symmetric.
    KronSum(Vec<KronOp>),
    /// `outer · (⊗V) diag(scale) (⊗V)ᵀ · outer`.
    Spectral {
        basis: KronOp,
        basis_t: KronOp,
        scale: Vec<f64>,
        outer: Option<Vec<f64>>,
    },
    /// `outer · F⁻¹ · outer` with `F` Cholesky-factorised.
    Factored {
        chol: Cholesky<f64, Dyn>,
        outer: Option<Vec<f64>>,
    },
}

impl SobolevWeight {
    pub fn order(&self) -> i32 {
        self.k
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self.repr, WeightRepr::Diagonal(_))
    }

    /// Diagonal entries when the weight is diagonal.
    pub fn diagonal(&self) -> Option<&[f64]> {
        match &self.repr {
            WeightRepr::Diagonal(w) => Some(w),
            _ => None,
        }
    }

    pub fn apply_slice(&self, v: &[f64]) -> Vec<f64> {
        match &self.repr {
            WeightRepr::Diagonal(w) => v.iter().zip(w).map(|(a, b)| a * b).collect(),
            WeightRepr::KronSum(terms) => {
                let mut out = vec![0.0; v.len()];
                for t in terms {
                    for (o, x) in out.iter_mut().zip(t.apply_slice(v)) {
                        *o += x;
                    }
                }
                out
            }
            WeightRepr::Spectral {
                basis,
                basis_t,
                scale,
                outer,
            } => {
                let mut x = scale_by(v, outer.as_deref());
                x = basis_t.apply_slice(&x);
                for (xi, s) in x.iter_mut().zip(scale) {
                    *xi *= s;
                }
                x = basis.apply_slice(&x);
                scale_by(&x, outer.as_deref())
            }
            WeightRepr::Factored { chol, outer } => {
                let x = DVector::from_vec(scale_by(v, outer.as_deref()));
                let y = chol.solve(&x);
                scale_by(y.as_slice(), outer.as_deref())
            }
        }
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(self.apply_slice(v.as_slice()))
    }

    /// Apply to every column of `x`.
    pub fn apply_columns(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        for c in 0..x.ncols() {
            let col = self.apply_slice(x.column(c).as_slice());
            out.column_mut(c).copy_from_slice(&col);
        }
        out
    }

    /// `fᵀ 𝕎 g`.
    pub fn form(&self, f: &[f64], g: &[f64]) -> f64 {
        let wg = self.apply_slice(g);
        f.iter().zip(&wg).map(|(a, b)| a * b).sum()
    }

    /// Dense symmetric matrix `(M + Mᵀ)/2`.
    pub fn to_dense(&self, size: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(size, size);
        let mut e = vec![0.0; size];
        for c in 0..size {
            e[c] = 1.0;
            m.column_mut(c).copy_from_slice(&self.apply_slice(&e));
            e[c] = 0.0;
        }
        let t = m.transpose();
        (m + t) * 0.5
    }
}

fn scale_by(v: &[f64], s: Option<&[f64]>) -> Vec<f64> {
    match s {
        Some(s) => v.iter().zip(s).map(|(a, b)| a * b).collect(),
        None => v.to_vec(),
    }
}

/// Assembled truncated operators for one grid, memoised per Sobolev order
/// and variant and per boundary degree.
#[derive(Debug)]
pub struct OperatorCache {
    grid: TensorGrid,
    d1: Vec<DMatrix<f64>>,
    weights: Mutex<HashMap<(i32, Variant), Arc<SobolevWeight>>>,
    faces: Mutex<HashMap<usize, Arc<Vec<TensorGrid>>>>,
}

impl OperatorCache {
    pub fn new(n: usize, domain: &BoxDomain) -> Result<Self> {
        Ok(Self::from_grid(TensorGrid::new(n, domain)?))
    }

    pub fn from_grid(grid: TensorGrid) -> Self {
        let d1 = (0..grid.dim())
            .map(|i| diff_matrix_1d(grid.rule(), grid.domain().interval(i)))
            .collect();
        Self {
            grid,
            d1,
            weights: Mutex::new(HashMap::new()),
            faces: Mutex::new(HashMap::new()),
        }
    }

    pub fn grid(&self) -> &TensorGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn degree(&self) -> usize {
        self.grid.degree()
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    fn dims(&self) -> Vec<usize> {
        vec![self.degree() + 1; self.dim()]
    }

    /// One-dimensional differentiation matrix along `axis`.
    pub fn d1(&self, axis: usize) -> &DMatrix<f64> {
        &self.d1[axis]
    }

    fn d_power(&self, axis: usize, p: usize) -> DMatrix<f64> {
        let d = &self.d1[axis];
        let mut out = d.clone();
        for _ in 1..p {
            out = &out * d;
        }
        out
    }

    /// `𝔻_β = ∏_i D_i^{β_i}` as a Kronecker operator; `β = 0` is the identity.
    pub fn diff_operator(&self, beta: &[usize]) -> KronOp {
        assert_eq!(beta.len(), self.dim(), "multi-index dimension mismatch");
        let factors = beta
            .iter()
            .enumerate()
            .map(|(i, &b)| (b > 0).then(|| self.d_power(i, b)))
            .collect();
        KronOp::new(self.dims(), factors)
    }

    /// `𝔻* = W⁻¹ 𝔻ᵀ W` for a Kronecker operator on this grid.
    pub fn adjoint(&self, op: &KronOp) -> KronOp {
        assert_eq!(op.in_dims(), self.dims().as_slice());
        let factors = op
            .factors()
            .iter()
            .enumerate()
            .map(|(i, f)| {
                f.as_ref()
                    .map(|f| adjoint_factor(f, self.grid.axis_weights(i)))
            })
            .collect();
        KronOp::new(self.dims(), factors)
    }

    /// The Sobolev weight `𝕎_{m,n,k}` (plain) or `𝕎̲_{m,n,k}` (starred);
    /// negative `k` gives the dual weights. `k = 0` is the cubature diagonal.
    pub fn sobolev_weight(&self, k: i32, variant: Variant) -> Result<Arc<SobolevWeight>> {
        let key = (k, if k == 0 { Variant::Plain } else { variant });
        if let Some(w) = self
            .weights
            .lock()
            .expect("weight cache poisoned")
            .get(&key)
        {
            return Ok(w.clone());
        }
        let built = Arc::new(self.build_weight(k, key.1)?);
        self.weights
            .lock()
            .expect("weight cache poisoned")
            .entry(key)
            .or_insert(built.clone());
        Ok(built)
    }

    /// Per-axis factor of the Kronecker term for derivative power `p`:
    /// plain `(Dᵖ)ᵀ W Dᵖ`, starred `W Dᵖ W⁻¹ (Dᵖ)ᵀ W`.
    fn term_factor(&self, axis: usize, p: usize, variant: Variant) -> DMatrix<f64> {
        let w = self.grid.axis_weights(axis);
        let dp = if p == 0 {
            DMatrix::identity(w.len(), w.len())
        } else {
            self.d_power(axis, p)
        };
        match variant {
            Variant::Plain => dp.transpose() * diag(w) * &dp,
            Variant::Starred => {
                let winv: Vec<f64> = w.iter().map(|x| 1.0 / x).collect();
                diag(w) * &dp * diag(&winv) * dp.transpose() * diag(w)
            }
        }
    }

    /// Per-axis factor of the *inner* sum `Σ𝔻*𝔻 = W⁻¹A` (plain, returns the
    /// `A` factor) or `Σ𝔻𝔻* = B W` (starred, returns the `B` factor).
    fn inner_factor(&self, axis: usize, p: usize, variant: Variant) -> DMatrix<f64> {
        let w = self.grid.axis_weights(axis);
        let winv: Vec<f64> = w.iter().map(|x| 1.0 / x).collect();
        let dp = if p == 0 {
            DMatrix::identity(w.len(), w.len())
        } else {
            self.d_power(axis, p)
        };
        match variant {
            Variant::Plain => dp.transpose() * diag(w) * &dp,
            Variant::Starred => &dp * diag(&winv) * dp.transpose(),
        }
    }

    fn positive_terms(&self, k: usize, variant: Variant) -> Vec<KronOp> {
        multi_indices_up_to(self.dim(), k)
            .into_iter()
            .map(|beta| {
                let factors = beta
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| Some(self.term_factor(i, p, variant)))
                    .collect();
                KronOp::new(self.dims(), factors)
            })
            .collect()
    }

    fn build_weight(&self, k: i32, variant: Variant) -> Result<SobolevWeight> {
        let w = self.grid.weights().to_vec();
        let repr = if k == 0 {
            WeightRepr::Diagonal(w)
        } else if k > 0 {
            WeightRepr::KronSum(self.positive_terms(k as usize, variant))
        } else if k == -1 {
            self.spectral_inverse(variant)
        } else {
            self.factored_inverse((-k) as usize, variant)?
        };
        Ok(SobolevWeight { k, variant, repr })
    }

    /// First-order inner sums are `⊗M₀ + Σ_i (… ⊗ M₁ ⊗ …)`; a generalised
    /// eigendecomposition of `(M₁, M₀)` per axis diagonalises them all at once.
    fn spectral_inverse(&self, variant: Variant) -> WeightRepr {
        let mut vs = Vec::new();
        let mut lambdas = Vec::new();
        for axis in 0..self.dim() {
            let w = self.grid.axis_weights(axis);
            // M₀ is diagonal: W (plain) or W⁻¹ (starred).
            let m0: Vec<f64> = match variant {
                Variant::Plain => w.to_vec(),
                Variant::Starred => w.iter().map(|x| 1.0 / x).collect(),
            };
            let m1 = self.inner_factor(axis, 1, variant);
            let isq: Vec<f64> = m0.iter().map(|x| 1.0 / x.sqrt()).collect();
            let s = diag(&isq) * m1 * diag(&isq);
            let s = (&s + s.transpose()) * 0.5;
            let eig = SymmetricEigen::new(s);
            let v = diag(&isq) * eig.eigenvectors;
            vs.push(v);
            lambdas.push(eig.eigenvalues.iter().copied().collect::<Vec<f64>>());
        }
        // scale_α = 1 / (1 + Σ_i λ_{α_i}).
        let sums = {
            let mut out = vec![0.0];
            for l in &lambdas {
                let mut next = Vec::with_capacity(out.len() * l.len());
                for &li in l {
                    next.extend(out.iter().map(|&a| a + li));
                }
                out = next;
            }
            out
        };
        let scale = sums.into_iter().map(|s| 1.0 / (1.0 + s)).collect();
        let basis = KronOp::new(self.dims(), vs.into_iter().map(Some).collect());
        let basis_t = basis.transpose();
        let outer = match variant {
            Variant::Plain => Some(self.grid.weights().to_vec()),
            Variant::Starred => None,
        };
        WeightRepr::Spectral {
            basis,
            basis_t,
            scale,
            outer,
        }
    }

    fn factored_inverse(&self, k: usize, variant: Variant) -> Result<WeightRepr> {
        let n = self.len();
        let mut inner = DMatrix::zeros(n, n);
        for beta in multi_indices_up_to(self.dim(), k) {
            let factors = beta
                .iter()
                .enumerate()
                .map(|(i, &p)| Some(self.inner_factor(i, p, variant)))
                .collect();
            inner += KronOp::new(self.dims(), factors).to_dense();
        }
        let inner = (&inner + inner.transpose()) * 0.5;
        let chol = Cholesky::new(inner).ok_or_else(|| {
            PsmError::Internal(format!(
                "order-{k} Sobolev operator is not positive definite"
            ))
        })?;
        let outer = match variant {
            Variant::Plain => Some(self.grid.weights().to_vec()),
            Variant::Starred => None,
        };
        Ok(WeightRepr::Factored { chol, outer })
    }

    /// Face grids of degree `n_bnd`, in [`Face::all`] order.
    pub fn faces(&self, n_bnd: usize) -> Result<Arc<Vec<TensorGrid>>> {
        if let Some(f) = self.faces.lock().expect("face cache poisoned").get(&n_bnd) {
            return Ok(f.clone());
        }
        let built = Arc::new(boundary_grids(n_bnd, self.grid.domain())?);
        self.faces
            .lock()
            .expect("face cache poisoned")
            .entry(n_bnd)
            .or_insert(built.clone());
        Ok(built)
    }

    /// Reference coordinate of the pinned axis of `face`.
    fn face_value(&self, face: Face) -> f64 {
        match face.side {
            Side::Lower => -1.0,
            Side::Upper => 1.0,
        }
    }

    /// Trace map for grid values: evaluates the degree-`n` interpolant of `C`
    /// on the degree-`n_bnd` Legendre grid of `face` (this is `𝕊 𝕋⁻¹`).
    pub fn trace_operator(&self, n_bnd: usize, face: Face) -> KronOp {
        let rule = self.grid.rule();
        let bnd_nodes = crate::grid::legendre_rule_1d(n_bnd).nodes;
        let pinned = self.face_value(face);
        let factors = (0..self.dim())
            .map(|i| {
                Some(if i == face.axis {
                    lagrange_eval_matrix(rule, &[pinned])
                } else {
                    lagrange_eval_matrix(rule, &bnd_nodes)
                })
            })
            .collect();
        KronOp::new(self.dims(), factors)
    }

    /// Trace map for Chebyshev coefficients: `𝕊 = (T_α(p_γ))_{γ,α}`.
    pub fn trace_operator_chebyshev(&self, n_bnd: usize, face: Face) -> KronOp {
        let n = self.degree();
        let bnd_nodes = crate::grid::legendre_rule_1d(n_bnd).nodes;
        let pinned = self.face_value(face);
        let factors = (0..self.dim())
            .map(|i| {
                Some(if i == face.axis {
                    chebyshev_eval_matrix(n, &[pinned])
                } else {
                    chebyshev_eval_matrix(n, &bnd_nodes)
                })
            })
            .collect();
        KronOp::new(self.dims(), factors)
    }
}
