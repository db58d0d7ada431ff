//! Matrix-free application of Kronecker-structured operators to tensor
//! vectors stored with the first axis varying fastest.

use nalgebra::{DMatrix, DVector};

/// Apply `a` along `axis` of a tensor with the given per-axis `dims`.
///
/// `a` must have `dims[axis]` columns; the result has `a.nrows()` entries on
/// that axis and the same layout otherwise.
pub fn mode_product(a: &DMatrix<f64>, axis: usize, dims: &[usize], x: &[f64]) -> Vec<f64> {
    let n_in = dims[axis];
    debug_assert_eq!(a.ncols(), n_in);
    let pre: usize = dims[..axis].iter().product();
    let post: usize = dims[axis + 1..].iter().product();
    debug_assert_eq!(x.len(), pre * n_in * post);
    let n_out = a.nrows();
    let mut y = vec![0.0; pre * n_out * post];
    for q in 0..post {
        let xin = &x[q * pre * n_in..(q + 1) * pre * n_in];
        let yout = &mut y[q * pre * n_out..(q + 1) * pre * n_out];
        for b in 0..n_in {
            let xb = &xin[b * pre..(b + 1) * pre];
            for r in 0..n_out {
                let c = a[(r, b)];
                if c == 0.0 {
                    continue;
                }
                let yr = &mut yout[r * pre..(r + 1) * pre];
                for (yv, xv) in yr.iter_mut().zip(xb) {
                    *yv += c * xv;
                }
            }
        }
    }
    y
}

/// Kronecker product operator `A_m ⊗ … ⊗ A_1` acting on first-axis-fastest
/// tensors; `None` factors are identities.
#[derive(Debug, Clone, PartialEq)]
pub struct KronOp {
    in_dims: Vec<usize>,
    factors: Vec<Option<DMatrix<f64>>>,
}

impl KronOp {
    pub fn new(in_dims: Vec<usize>, factors: Vec<Option<DMatrix<f64>>>) -> Self {
        assert_eq!(in_dims.len(), factors.len());
        for (d, f) in in_dims.iter().zip(&factors) {
            if let Some(f) = f {
                assert_eq!(f.ncols(), *d, "factor does not match axis length");
            }
        }
        Self { in_dims, factors }
    }

    pub fn identity(in_dims: Vec<usize>) -> Self {
        let factors = vec![None; in_dims.len()];
        Self { in_dims, factors }
    }

    pub fn in_dims(&self) -> &[usize] {
        &self.in_dims
    }

    pub fn out_dims(&self) -> Vec<usize> {
        self.in_dims
            .iter()
            .zip(&self.factors)
            .map(|(&d, f)| f.as_ref().map_or(d, |f| f.nrows()))
            .collect()
    }

    pub fn factors(&self) -> &[Option<DMatrix<f64>>] {
        &self.factors
    }

    pub fn nrows(&self) -> usize {
        self.out_dims().iter().product()
    }

    pub fn ncols(&self) -> usize {
        self.in_dims.iter().product()
    }

    pub fn is_identity(&self) -> bool {
        self.factors.iter().all(Option::is_none)
    }

    pub fn apply_slice(&self, x: &[f64]) -> Vec<f64> {
        let mut dims = self.in_dims.clone();
        let mut cur = x.to_vec();
        for (axis, f) in self.factors.iter().enumerate() {
            if let Some(f) = f {
                cur = mode_product(f, axis, &dims, &cur);
                dims[axis] = f.nrows();
            }
        }
        cur
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(self.apply_slice(x.as_slice()))
    }

    pub fn transpose(&self) -> KronOp {
        KronOp {
            in_dims: self.out_dims(),
            factors: self
                .factors
                .iter()
                .map(|f| f.as_ref().map(|f| f.transpose()))
                .collect(),
        }
    }

    pub fn apply_transpose(&self, y: &DVector<f64>) -> DVector<f64> {
        self.transpose().apply(y)
    }

    /// Product `self ∘ other` (apply `other` first).
    pub fn compose(&self, other: &KronOp) -> KronOp {
        assert_eq!(other.out_dims(), self.in_dims);
        let factors = self
            .factors
            .iter()
            .zip(&other.factors)
            .map(|(a, b)| match (a, b) {
                (None, None) => None,
                (Some(a), None) => Some(a.clone()),
                (None, Some(b)) => Some(b.clone()),
                (Some(a), Some(b)) => Some(a * b),
            })
            .collect();
        KronOp {
            in_dims: other.in_dims.clone(),
            factors,
        }
    }

    /// Materialise the full matrix; only for small sizes.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::from_element(1, 1, 1.0);
        for (d, f) in self.in_dims.iter().zip(&self.factors) {
            out = match f {
                Some(f) => f.kronecker(&out),
                None => DMatrix::<f64>::identity(*d, *d).kronecker(&out),
            };
        }
        out
    }

    /// Apply to every column of `x`.
    pub fn apply_columns(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.nrows(), x.ncols());
        for c in 0..x.ncols() {
            let col = self.apply_slice(x.column(c).as_slice());
            out.column_mut(c).copy_from_slice(&col);
        }
        out
    }
}
