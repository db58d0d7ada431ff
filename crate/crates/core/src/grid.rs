//! Multi-index sets, one-dimensional Gauss–Legendre rules and tensorised
//! Legendre grids on axis-aligned boxes.
//!
//! Multi-indices are ordered lexicographically starting from the *last*
//! coordinate, so the first coordinate varies fastest. The position of
//! `α` in `A_{m,n}` is therefore `Σ_i α_i (n+1)^i`, which is also the
//! memory layout of every grid-value vector in this crate.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::{PsmError, Result};

/// Resource guards for grid construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridLimits {
    /// Largest admissible one-dimensional degree `n`.
    pub max_degree: usize,
    /// Largest admissible number of multi-indices `(n+1)^m`.
    pub max_points: usize,
}

impl Default for GridLimits {
    fn default() -> Self {
        Self {
            max_degree: 1024,
            max_points: 1 << 22,
        }
    }
}

/// The ordered multi-index set `A_{m,n} = {α ∈ ℕ^m : ‖α‖_∞ ≤ n}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiIndexSet {
    m: usize,
    n: usize,
    len: usize,
}

impl MultiIndexSet {
    pub fn new(m: usize, n: usize) -> Result<Self> {
        Self::with_limits(m, n, &GridLimits::default())
    }

    pub fn with_limits(m: usize, n: usize, limits: &GridLimits) -> Result<Self> {
        if m == 0 {
            return Err(PsmError::InvalidArgument(
                "multi-index dimension must be at least 1".into(),
            ));
        }
        let len = checked_len(m, n, limits.max_points)?;
        Ok(Self { m, n, len })
    }

    /// The empty-dimensional set `A_{0,n} = {()}` used for the faces of a 1D box.
    pub(crate) fn point(n: usize) -> Self {
        Self { m: 0, n, len: 1 }
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn degree(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// The multi-index stored at position `i`.
    pub fn index_at(&self, mut i: usize) -> Vec<usize> {
        assert!(i < self.len, "position {i} out of range {}", self.len);
        let base = self.n + 1;
        let mut alpha = Vec::with_capacity(self.m);
        for _ in 0..self.m {
            alpha.push(i % base);
            i /= base;
        }
        alpha
    }

    /// Position of `alpha` in the ordering, or `None` when it is not a member.
    pub fn position_of(&self, alpha: &[usize]) -> Option<usize> {
        if alpha.len() != self.m || alpha.iter().any(|&a| a > self.n) {
            return None;
        }
        let base = self.n + 1;
        Some(alpha.iter().rev().fold(0, |acc, &a| acc * base + a))
    }

    pub fn iter(&self) -> impl Iterator<Item = Vec<usize>> + '_ {
        (0..self.len).map(move |i| self.index_at(i))
    }
}

/// Compare two multi-indices under the last-coordinate-first lexicographic order.
pub fn lex_cmp(a: &[usize], b: &[usize]) -> std::cmp::Ordering {
    a.iter().rev().cmp(b.iter().rev())
}

fn checked_len(m: usize, n: usize, cap: usize) -> Result<usize> {
    let mut len: usize = 1;
    for _ in 0..m {
        len = len
            .checked_mul(n + 1)
            .filter(|&l| l <= cap)
            .ok_or_else(|| {
                PsmError::ResourceLimit(format!(
                    "(n+1)^m = ({})^{m} exceeds the configured cap of {cap} points",
                    n + 1
                ))
            })?;
    }
    Ok(len)
}

/// Gauss–Legendre rule with `n+1` nodes on `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LegendreRule1D {
    pub n: usize,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl LegendreRule1D {
    pub fn new(n: usize) -> Result<Self> {
        Self::with_limits(n, &GridLimits::default())
    }

    pub fn with_limits(n: usize, limits: &GridLimits) -> Result<Self> {
        if n > limits.max_degree {
            return Err(PsmError::ResourceLimit(format!(
                "Legendre degree {n} exceeds the configured cap {}",
                limits.max_degree
            )));
        }
        Ok(legendre_rule_1d(n))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Legendre polynomial `P_k(x)` and its derivative via the three-term recurrence.
pub(crate) fn legendre_with_derivative(k: usize, x: f64) -> (f64, f64) {
    if k == 0 {
        return (1.0, 0.0);
    }
    let (mut p_prev, mut p) = (1.0, x);
    for j in 2..=k {
        let jf = j as f64;
        let next = ((2.0 * jf - 1.0) * x * p - (jf - 1.0) * p_prev) / jf;
        p_prev = p;
        p = next;
    }
    let kf = k as f64;
    // P_k'(x) = k (x P_k − P_{k−1}) / (x² − 1); nodes never reach ±1.
    let dp = kf * (x * p - p_prev) / (x * x - 1.0);
    (p, dp)
}

/// Nodes and weights of the `(n+1)`-point Gauss–Legendre rule.
///
/// The nodes are eigenvalues of the symmetric tridiagonal Jacobi matrix of the
/// Legendre recurrence, refined by one Newton step on `P_{n+1}`; the weights use
/// the classical `2 / ((1 − x²) P'_{n+1}(x)²)` formula at the polished nodes.
pub fn legendre_rule_1d(n: usize) -> LegendreRule1D {
    let count = n + 1;
    if count == 1 {
        return LegendreRule1D {
            n,
            nodes: vec![0.0],
            weights: vec![2.0],
        };
    }
    let mut jacobi = DMatrix::<f64>::zeros(count, count);
    for k in 1..count {
        let kf = k as f64;
        let b = kf / (4.0 * kf * kf - 1.0).sqrt();
        jacobi[(k, k - 1)] = b;
        jacobi[(k - 1, k)] = b;
    }
    let mut raw: Vec<f64> = SymmetricEigen::new(jacobi)
        .eigenvalues
        .iter()
        .copied()
        .collect();
    raw.sort_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"));

    let mut nodes: Vec<f64> = raw
        .iter()
        .map(|&x| {
            let (p, dp) = legendre_with_derivative(count, x);
            x - p / dp
        })
        .collect();
    // Enforce exact reflection symmetry x_i = −x_{n−i}.
    for i in 0..count / 2 {
        let j = count - 1 - i;
        let s = 0.5 * (nodes[j] - nodes[i]);
        nodes[i] = -s;
        nodes[j] = s;
    }
    if count % 2 == 1 {
        nodes[count / 2] = 0.0;
    }
    let mut weights: Vec<f64> = nodes
        .iter()
        .map(|&x| {
            let (_, dp) = legendre_with_derivative(count, x);
            2.0 / ((1.0 - x * x) * dp * dp)
        })
        .collect();
    for i in 0..count / 2 {
        let j = count - 1 - i;
        let w = 0.5 * (weights[i] + weights[j]);
        weights[i] = w;
        weights[j] = w;
    }
    LegendreRule1D { n, nodes, weights }
}

/// Axis-aligned box `∏ [a_i, b_i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    intervals: Vec<(f64, f64)>,
}

impl BoxDomain {
    pub fn new(intervals: Vec<(f64, f64)>) -> Result<Self> {
        for (i, &(a, b)) in intervals.iter().enumerate() {
            if !(a.is_finite() && b.is_finite()) {
                return Err(PsmError::InvalidArgument(format!(
                    "interval {i} has non-finite end points"
                )));
            }
            if a >= b {
                return Err(PsmError::InvalidArgument(format!(
                    "interval {i} is degenerate or reversed: [{a}, {b}]"
                )));
            }
        }
        Ok(Self { intervals })
    }

    /// The box `[lo, hi]^m`.
    pub fn cube(m: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![(lo, hi); m])
    }

    /// The standard hypercube `[-1, 1]^m`.
    pub fn reference(m: usize) -> Self {
        Self {
            intervals: vec![(-1.0, 1.0); m],
        }
    }

    pub fn dim(&self) -> usize {
        self.intervals.len()
    }

    pub fn intervals(&self) -> &[(f64, f64)] {
        &self.intervals
    }

    pub fn interval(&self, i: usize) -> (f64, f64) {
        self.intervals[i]
    }

    pub fn volume(&self) -> f64 {
        self.intervals.iter().map(|(a, b)| b - a).product()
    }

    /// Map a reference coordinate in `[-1, 1]` on axis `i` into the box.
    pub fn to_box(&self, i: usize, t: f64) -> f64 {
        let (a, b) = self.intervals[i];
        0.5 * (a + b) + 0.5 * (b - a) * t
    }

    /// Inverse of [`BoxDomain::to_box`].
    pub fn to_reference(&self, i: usize, x: f64) -> f64 {
        let (a, b) = self.intervals[i];
        (2.0 * x - a - b) / (b - a)
    }

    /// Half-length `(b − a)/2` of axis `i`, the Jacobian of the affine map.
    pub fn half_width(&self, i: usize) -> f64 {
        let (a, b) = self.intervals[i];
        0.5 * (b - a)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(&self.intervals)
                .all(|(&v, &(a, b))| v >= a && v <= b)
    }

    /// Box with axis `axis` removed.
    pub(crate) fn without_axis(&self, axis: usize) -> BoxDomain {
        let intervals = self
            .intervals
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != axis)
            .map(|(_, &iv)| iv)
            .collect();
        BoxDomain { intervals }
    }
}

/// Which end of an interval a boundary face sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Lower,
    Upper,
}

/// A face `∂Ω_j^±` of the box: coordinate `axis` is pinned to `a_j` or `b_j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Face {
    pub axis: usize,
    pub side: Side,
}

impl Face {
    /// All `2m` faces in the order `(0,−), (0,+), (1,−), …`.
    pub fn all(m: usize) -> Vec<Face> {
        (0..m)
            .flat_map(|axis| {
                [Side::Lower, Side::Upper]
                    .into_iter()
                    .map(move |side| Face { axis, side })
            })
            .collect()
    }
}

/// Tensorised Legendre grid `P_{m,n}` mapped into a box, with cubature weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorGrid {
    indices: MultiIndexSet,
    domain: BoxDomain,
    rule: LegendreRule1D,
    axis_nodes: Vec<Vec<f64>>,
    axis_weights: Vec<Vec<f64>>,
    weights: Vec<f64>,
    face: Option<(Face, f64)>,
}

impl TensorGrid {
    pub fn new(n: usize, domain: &BoxDomain) -> Result<Self> {
        Self::with_limits(n, domain, &GridLimits::default())
    }

    pub fn with_limits(n: usize, domain: &BoxDomain, limits: &GridLimits) -> Result<Self> {
        let indices = MultiIndexSet::with_limits(domain.dim(), n, limits)?;
        let rule = LegendreRule1D::with_limits(n, limits)?;
        Ok(Self::from_parts(indices, domain.clone(), rule, None))
    }

    fn from_parts(
        indices: MultiIndexSet,
        domain: BoxDomain,
        rule: LegendreRule1D,
        face: Option<(Face, f64)>,
    ) -> Self {
        let m = domain.dim();
        let axis_nodes: Vec<Vec<f64>> = (0..m)
            .map(|i| rule.nodes.iter().map(|&t| domain.to_box(i, t)).collect())
            .collect();
        let axis_weights: Vec<Vec<f64>> = (0..m)
            .map(|i| {
                let h = domain.half_width(i);
                rule.weights.iter().map(|&w| w * h).collect()
            })
            .collect();
        let weights = tensor_product(&axis_weights);
        Self {
            indices,
            domain,
            rule,
            axis_nodes,
            axis_weights,
            weights,
            face,
        }
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn degree(&self) -> usize {
        self.rule.n
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &MultiIndexSet {
        &self.indices
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn rule(&self) -> &LegendreRule1D {
        &self.rule
    }

    /// Mapped one-dimensional nodes along `axis`.
    pub fn axis_nodes(&self, axis: usize) -> &[f64] {
        &self.axis_nodes[axis]
    }

    /// One-dimensional weights along `axis`, scaled by the half-width.
    pub fn axis_weights(&self, axis: usize) -> &[f64] {
        &self.axis_weights[axis]
    }

    /// Diagonal of the cubature weight matrix `W_{m,n}` in multi-index order.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Point `p_α` for the multi-index stored at position `i`.
    pub fn point(&self, i: usize) -> Vec<f64> {
        let base = self.rule.len();
        let mut rest = i;
        (0..self.dim())
            .map(|axis| {
                let a = rest % base;
                rest /= base;
                self.axis_nodes[axis][a]
            })
            .collect()
    }

    /// All grid points in multi-index order.
    pub fn points(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }

    /// For a face grid, the face it lives on and the pinned coordinate value.
    pub fn face(&self) -> Option<(Face, f64)> {
        self.face
    }

    /// Point `i` lifted into the ambient `m`-dimensional space (face grids only
    /// differ from [`TensorGrid::point`] by re-inserting the pinned coordinate).
    pub fn embedded_point(&self, i: usize) -> Vec<f64> {
        let mut p = self.point(i);
        if let Some((face, value)) = self.face {
            p.insert(face.axis, value);
        }
        p
    }

    /// Evaluate `f` at every grid point (embedded into the ambient box).
    pub fn sample<F: Fn(&[f64]) -> f64>(&self, f: F) -> Vec<f64> {
        (0..self.len())
            .map(|i| f(&self.embedded_point(i)))
            .collect()
    }

    /// Gauss–Legendre cubature `Σ_α w_α v_α` of grid values.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        assert_eq!(values.len(), self.len());
        values.iter().zip(&self.weights).map(|(v, w)| v * w).sum()
    }
}

/// Flattened tensor product of per-axis factors, first axis fastest.
pub(crate) fn tensor_product(factors: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![1.0];
    for f in factors {
        let mut next = Vec::with_capacity(out.len() * f.len());
        for &b in f {
            next.extend(out.iter().map(|&a| a * b));
        }
        out = next;
    }
    out
}

/// The `2m` face grids `P^±_{m−1,n,j}` in [`Face::all`] order.
///
/// For `m = 1` every face is a single point carrying unit weight.
pub fn boundary_grids(n_bnd: usize, domain: &BoxDomain) -> Result<Vec<TensorGrid>> {
    boundary_grids_with_limits(n_bnd, domain, &GridLimits::default())
}

pub fn boundary_grids_with_limits(
    n_bnd: usize,
    domain: &BoxDomain,
    limits: &GridLimits,
) -> Result<Vec<TensorGrid>> {
    let m = domain.dim();
    if m == 0 {
        return Err(PsmError::InvalidArgument(
            "boundary grids need a box of dimension at least 1".into(),
        ));
    }
    let rule = LegendreRule1D::with_limits(n_bnd, limits)?;
    Face::all(m)
        .into_iter()
        .map(|face| {
            let (a, b) = domain.interval(face.axis);
            let value = match face.side {
                Side::Lower => a,
                Side::Upper => b,
            };
            let sub = domain.without_axis(face.axis);
            let indices = if m == 1 {
                MultiIndexSet::point(n_bnd)
            } else {
                MultiIndexSet::with_limits(m - 1, n_bnd, limits)?
            };
            Ok(TensorGrid::from_parts(
                indices,
                sub,
                rule.clone(),
                Some((face, value)),
            ))
        })
        .collect()
}
