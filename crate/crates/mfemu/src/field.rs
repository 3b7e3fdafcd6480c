//! Differentiable scalar fields and axis-aligned domains.
//!
//! A [`ScalarField`] is a function `R^d → R` with an analytic gradient. The
//! benchmark problems expose their high- and low-fidelity functions this way,
//! which lets exact low-fidelity sources sit inside a differentiable model:
//! the tape's `field_eval` op captures the gradient rows at forward time so
//! adjoints flow back into trainable coordinate encoders.

use crate::{Error, Result};

/// Scalar function of a point with an analytic gradient, evaluated row-wise.
///
/// Implementations must be total on `R^d` (closed-form extensions beyond the
/// advertised sampling domain are fine); domain enforcement happens at the
/// dataset-generation boundary, not here, because trained encoders may probe
/// coordinates slightly outside the sampled box.
pub trait ScalarField: Send + Sync {
    /// Input dimension `d`.
    fn dim(&self) -> usize;

    /// Field value at `x` (`x.len() == dim()`).
    fn value(&self, x: &[f64]) -> f64;

    /// Writes `∇f(x)` into `out` (`out.len() == dim()`).
    fn gradient(&self, x: &[f64], out: &mut [f64]);

    /// Whether finite differences of `value` approximate `gradient`. Fields
    /// with pointwise frozen noise return `false`: their value is keyed on
    /// the exact input bits, so any perturbation redraws the noise and a
    /// difference quotient measures noise, not slope.
    fn fd_checkable(&self) -> bool {
        true
    }
}

/// Axis-aligned box `[lo_1, hi_1] × … × [lo_d, hi_d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Domain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Domain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Domain {
        assert_eq!(lo.len(), hi.len(), "domain bounds must share a dimension");
        assert!(
            lo.iter().zip(&hi).all(|(a, b)| a <= b),
            "domain bounds must satisfy lo <= hi"
        );
        Domain { lo, hi }
    }

    /// The same interval `[lo, hi]` in every one of `dim` coordinates.
    pub fn cube(lo: f64, hi: f64, dim: usize) -> Domain {
        Domain::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// Errs with the offending coordinate when `x` leaves the box.
    pub fn check(&self, what: &str, x: &[f64]) -> Result<()> {
        for (i, v) in x.iter().enumerate() {
            if *v < self.lo[i] || *v > self.hi[i] || !v.is_finite() {
                return Err(Error::OutOfDomain {
                    what: what.to_string(),
                    index: i,
                    value: *v,
                    lo: self.lo[i],
                    hi: self.hi[i],
                });
            }
        }
        Ok(())
    }

    /// Affinely maps a unit-cube point `u ∈ [0,1]^d` into the box.
    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(t, (lo, hi))| lo + t * (hi - lo))
            .collect()
    }

    /// Tight axis-aligned bounding box of a point cloud (row-major, `dim`
    /// coordinates per point). `None` for an empty cloud.
    pub fn bounding_box(points: &[f64], dim: usize) -> Option<Domain> {
        if points.is_empty() || dim == 0 {
            return None;
        }
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for row in points.chunks_exact(dim) {
            for (i, v) in row.iter().enumerate() {
                lo[i] = lo[i].min(*v);
                hi[i] = hi[i].max(*v);
            }
        }
        Some(Domain::new(lo, hi))
    }
}

/// A field defined by closures; convenient for tests and closed forms.
pub struct FnField<V, G> {
    dim: usize,
    value: V,
    gradient: G,
}

impl<V, G> FnField<V, G>
where
    V: Fn(&[f64]) -> f64 + Send + Sync,
    G: Fn(&[f64], &mut [f64]) + Send + Sync,
{
    pub fn new(dim: usize, value: V, gradient: G) -> FnField<V, G> {
        FnField {
            dim,
            value,
            gradient,
        }
    }
}

impl<V, G> ScalarField for FnField<V, G>
where
    V: Fn(&[f64]) -> f64 + Send + Sync,
    G: Fn(&[f64], &mut [f64]) + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        (self.gradient)(x, out)
    }
}
