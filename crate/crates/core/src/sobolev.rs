//! Sobolev-cubature inner products and norms on grid-value vectors.

use std::sync::Arc;

use crate::operators::{OperatorCache, SobolevWeight, Variant};
use crate::{PsmError, Result};

/// A truncated `H^k` (k ≥ 0) or dual `H^{-|k|}` inner product, plain or starred.
#[derive(Debug, Clone)]
pub struct SobolevMetric {
    k: i32,
    variant: Variant,
    size: usize,
    weight: Arc<SobolevWeight>,
}

impl SobolevMetric {
    pub fn new(cache: &OperatorCache, k: i32, variant: Variant) -> Result<Self> {
        Ok(Self {
            k,
            variant,
            size: cache.len(),
            weight: cache.sobolev_weight(k, variant)?,
        })
    }

    /// The plain `L²` metric (Gauss–Legendre cubature).
    pub fn l2(cache: &OperatorCache) -> Result<Self> {
        Self::new(cache, 0, Variant::Plain)
    }

    pub fn order(&self) -> i32 {
        self.k
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn weight(&self) -> &SobolevWeight {
        &self.weight
    }

    fn check(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.size {
            return Err(PsmError::DimensionMismatch {
                what: "grid-value vector".into(),
                expected: self.size,
                found: v.len(),
            });
        }
        Ok(())
    }

    /// `⟨f, g⟩ = 𝔣ᵀ 𝕎 𝔤`.
    pub fn inner(&self, f: &[f64], g: &[f64]) -> Result<f64> {
        self.check(f)?;
        self.check(g)?;
        Ok(self.weight.form(f, g))
    }

    /// `‖f‖ = ⟨f, f⟩^{1/2}`.
    pub fn norm(&self, f: &[f64]) -> Result<f64> {
        let q = self.inner(f, f)?;
        if q < -1e-12 {
            return Err(PsmError::Internal(format!(
                "Sobolev form is not positive semidefinite (⟨f,f⟩ = {q:e})"
            )));
        }
        Ok(q.max(0.0).sqrt())
    }
}

/// `Σ_α (1/w_α) ⟨f, D_β L_α⟩²`, computed as `‖𝔻_βᵀ W 𝔣‖²_{W⁻¹}`.
///
/// For `f ∈ Π_{m,n}` this equals `⟨D_β* f, D_β* f⟩_{L²}`.
pub fn dual_testfunction_form(cache: &OperatorCache, f: &[f64], beta: &[usize]) -> Result<f64> {
    if f.len() != cache.len() {
        return Err(PsmError::DimensionMismatch {
            what: "grid-value vector".into(),
            expected: cache.len(),
            found: f.len(),
        });
    }
    let w = cache.grid().weights();
    let wf: Vec<f64> = f.iter().zip(w).map(|(a, b)| a * b).collect();
    let pairings = cache.diff_operator(beta).transpose().apply_slice(&wf);
    Ok(pairings.iter().zip(w).map(|(p, wa)| p * p / wa).sum())
}
