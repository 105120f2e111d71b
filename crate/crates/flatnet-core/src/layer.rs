//! One flattening layer: the blended projection forward map, the scalar
//! inversion of its blend weight, and the quadratic reconstruction map.

use crate::error::Error;
use crate::linalg::{scalar_root_find, Matrix, Vector};
use crate::local_model::LocalQuadraticModel;
use crate::pou::PartitionOfUnity;
use crate::Result;

/// Tolerances of the blend-weight inversion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvertParams {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for InvertParams {
    fn default() -> Self {
        InvertParams { tol: 1e-12, max_iters: 200 }
    }
}

/// A forward/backward map pair built from one local quadratic model and its
/// partition of unity.
///
/// Forward blends the affine projection onto the model's tangent plane
/// (through the local mean) with the identity, weighted by `psi`. Backward
/// recovers the blend weight from the output alone by solving one scalar
/// equation, then adds back the normal offset and the quadratic correction.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatLayer {
    pub model: LocalQuadraticModel,
    pub psi: PartitionOfUnity,
    pub invert: InvertParams,
}

impl FlatLayer {
    /// Requires `psi.alpha < 1` (keeps `1 - s` bounded away from zero, so the
    /// inversion stays well posed) and `psi` centered at the model base point.
    pub fn new(model: LocalQuadraticModel, psi: PartitionOfUnity) -> Result<Self> {
        if psi.alpha() >= 1.0 {
            return Err(Error::param("psi", format!("layer requires alpha < 1, got {}", psi.alpha())));
        }
        if psi.base_point() != &model.base_point {
            return Err(Error::param("psi", "partition base point must equal the model base point"));
        }
        Ok(FlatLayer { model, psi, invert: InvertParams::default() })
    }

    pub fn ambient_dim(&self) -> usize {
        self.model.base_point.len()
    }

    fn tangent(&self) -> &Matrix {
        &self.model.tangent
    }

    /// Affine projection onto the tangent plane through the local mean.
    fn project(&self, x: &Vector) -> Vector {
        let u = self.tangent();
        let xc = &self.model.local_mean;
        let centered = x - xc;
        u * (u.transpose() * centered) + xc
    }

    /// Forward map with an explicit blend weight `s`:
    /// `s * (UU^T (x - xc) + xc) + (1 - s) * x`.
    pub fn forward_blend(&self, x: &Vector, s: f64) -> Vector {
        self.project(x) * s + x * (1.0 - s)
    }

    /// The global flattening map `f(x)`.
    pub fn forward(&self, x: &Vector) -> Vector {
        self.forward_blend(x, self.psi.eval(x))
    }

    /// Recovers the blend weight from an output point: the unique `s` with
    /// `s = alpha * exp(-lambda ||x(s) - x0||^2)` where
    /// `x(s) = P_T z + P_N xc + P_N (z - xc) / (1 - s)`.
    ///
    /// For `z` in the image of [`Self::forward`] this equals `psi` at the
    /// preimage; elsewhere it is the smooth extension given by the same root.
    pub fn invert_blend(&self, z: &Vector) -> Result<f64> {
        let u = self.tangent();
        let x0 = &self.model.base_point;
        let xc = &self.model.local_mean;
        let alpha = self.psi.alpha();
        let lambda = self.psi.lambda();

        let zd = z - x0;
        let tangential_sq = {
            let coeff = u.transpose() * &zd;
            coeff.norm_squared()
        };
        // Normal parts: c = P_N (xc - x0), e = P_N (z - xc).
        let normal_of = |w: &Vector| -> Vector {
            let coeff = u.transpose() * w;
            w - u * coeff
        };
        let c = normal_of(&(xc - x0));
        let e = normal_of(&(z - xc));

        let weight_at = |s: f64| -> f64 {
            let b = &c + &e / (1.0 - s);
            alpha * (-lambda * (tangential_sq + b.norm_squared())).exp()
        };

        if e.norm_squared() == 0.0 {
            // The preimage does not depend on s; the weight is explicit.
            return Ok(weight_at(0.0));
        }

        let s_hi = alpha.min(1.0 - 1e-9);
        let residual = |s: f64| weight_at(s) - s;
        let res_lo = residual(0.0);
        if res_lo.abs() <= self.invert.tol {
            // Far field: the weight underflows to zero.
            return Ok(weight_at(0.0));
        }

        // The residual is positive at 0 and nonpositive at s_hi, but the
        // equation can cross more than once when the projection folds. Walk
        // down from s_hi to bracket the largest root: the branch continuous
        // with the weight at the base point.
        const WALK_STEPS: usize = 16;
        let mut hi = s_hi;
        let res_hi = residual(hi);
        if res_hi >= 0.0 {
            if res_hi.abs() <= self.invert.tol {
                return Ok(hi);
            }
            return Err(Error::InversionFailed { lo: 0.0, hi: s_hi, res_lo, res_hi });
        }
        let mut lo = 0.0;
        let mut res_at_lo = res_lo;
        for k in (1..WALK_STEPS).rev() {
            let s = s_hi * k as f64 / WALK_STEPS as f64;
            let r = residual(s);
            if r >= 0.0 {
                lo = s;
                res_at_lo = r;
                break;
            }
            hi = s;
        }
        if res_at_lo.abs() <= self.invert.tol {
            return Ok(lo);
        }
        match scalar_root_find(residual, 0.0, (lo, hi), self.invert.tol) {
            Ok(s) => Ok(s),
            Err(Error::NoStraddle { g_lo, g_hi, .. }) => Err(Error::InversionFailed {
                lo,
                hi,
                res_lo: g_lo,
                res_hi: g_hi,
            }),
            Err(e) => Err(e),
        }
    }

    /// The global reconstruction map `g(z)`: adds back the normal offset of
    /// the base point and the quadratic correction, weighted by the recovered
    /// blend weight.
    pub fn backward(&self, z: &Vector) -> Result<Vector> {
        let s = self.invert_blend(z)?;
        let u = self.tangent();
        let x0 = &self.model.base_point;
        let xc = &self.model.local_mean;
        // x0 - P_{T + xc}(x0) = P_N (x0 - xc).
        let offset = {
            let w = x0 - xc;
            let coeff = u.transpose() * &w;
            w - u * coeff
        };
        let coeff = u.transpose() * (z - x0);
        let quad = self.model.curvature.apply_coeffs(coeff.as_slice(), coeff.as_slice());
        Ok(z + (offset + quad) * s)
    }
}
