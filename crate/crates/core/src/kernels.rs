//! Gaussian kernel evaluation, second-argument gradients and Gram matrices.
//!
//! The bandwidth convention used throughout the crate is
//!
//! ```text
//! k(x, y) = exp(-|x - y|^2 / (2 sigma^2))
//! ```
//!
//! so that `grad_z k(x, z) = k(x, z) (x - z) / sigma^2`. Reported losses
//! depend on this choice. The alternatives `exp(-|x - y|^2 / sigma^2)` and
//! `exp(-|x - y|^2 / sigma)` are available through [`BandwidthConvention`];
//! the builtin experiment presets use the last one.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::points::PointCloud;

/// Which denominator multiplies `sigma^2` in the exponent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthConvention {
    /// `exp(-r^2 / (2 sigma^2))`
    #[default]
    TwoSigmaSquared,
    /// `exp(-r^2 / sigma^2)`
    SigmaSquared,
    /// `exp(-r^2 / sigma)`: the bandwidth parameter is a squared length.
    Sigma,
}

/// A Gaussian kernel with a fixed bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    bandwidth: f64,
    #[serde(default)]
    convention: BandwidthConvention,
}

impl KernelSpec {
    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        Self::with_convention(bandwidth, BandwidthConvention::default())
    }

    pub fn with_convention(bandwidth: f64, convention: BandwidthConvention) -> Result<Self> {
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(Error::invalid(format!(
                "bandwidth must be positive and finite, got {bandwidth}"
            )));
        }
        Ok(Self {
            bandwidth,
            convention,
        })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn convention(&self) -> BandwidthConvention {
        self.convention
    }

    fn denominator(&self) -> f64 {
        match self.convention {
            BandwidthConvention::TwoSigmaSquared => 2.0 * self.bandwidth * self.bandwidth,
            BandwidthConvention::SigmaSquared => self.bandwidth * self.bandwidth,
            BandwidthConvention::Sigma => self.bandwidth,
        }
    }

    /// `k(x, y)`.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_dims(x, y)?;
        Ok(self.value(x, y))
    }

    /// `grad_z k(x, z)`, the gradient in the second argument.
    pub fn grad2(&self, x: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        check_dims(x, z)?;
        let k = self.value(x, z);
        let scale = self.grad_scale();
        Ok(x.iter().zip(z).map(|(xi, zi)| k * (xi - zi) * scale).collect())
    }

    /// Gram matrix with entry `(i, j) = k(a_i, b_j)`.
    pub fn gram(&self, a: &PointCloud, b: &PointCloud) -> Result<DMatrix<f64>> {
        if a.is_empty() || b.is_empty() {
            return Err(Error::invalid("gram matrix of an empty point set"));
        }
        if a.dim() != b.dim() {
            return Err(Error::DimensionMismatch {
                expected: a.dim(),
                found: b.dim(),
            });
        }
        Ok(DMatrix::from_fn(a.len(), b.len(), |i, j| {
            self.value(a.point(i), b.point(j))
        }))
    }

    /// Symmetric Gram matrix of one set. Fills the upper triangle and mirrors it.
    pub fn gram_symmetric(&self, a: &PointCloud) -> Result<DMatrix<f64>> {
        if a.is_empty() {
            return Err(Error::invalid("gram matrix of an empty point set"));
        }
        let n = a.len();
        let mut k = DMatrix::from_element(n, n, 1.0);
        for j in 0..n {
            for i in 0..j {
                let v = self.value(a.point(i), a.point(j));
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        Ok(k)
    }

    /// Unchecked kernel value. Callers guarantee equal lengths.
    #[inline]
    pub(crate) fn value(&self, x: &[f64], y: &[f64]) -> f64 {
        let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        (-sq / self.denominator()).exp()
    }

    /// `d/dz` of the exponent contributes `(x - z) * grad_scale`.
    #[inline]
    pub(crate) fn grad_scale(&self) -> f64 {
        2.0 / self.denominator()
    }
}

fn check_dims(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: y.len(),
        });
    }
    Ok(())
}

/// Kernel matrices needed by one MMD weight step.
///
/// `kxx` is over the current locations, `kxy` crosses them with the target
/// atoms, and `kx_old` crosses them with the locations of the previous iterate.
#[derive(Debug, Clone)]
pub struct GramBundle {
    pub kxx: DMatrix<f64>,
    pub kxy: DMatrix<f64>,
    pub kx_old: DMatrix<f64>,
    pub kyy: Option<DMatrix<f64>>,
}

impl GramBundle {
    pub fn assemble(
        kernel: &KernelSpec,
        x: &PointCloud,
        y: &PointCloud,
        x_old: &PointCloud,
        with_kyy: bool,
    ) -> Result<Self> {
        if x.len() != x_old.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                found: x_old.len(),
            });
        }
        let kxx = kernel.gram_symmetric(x)?;
        let kxy = kernel.gram(x, y)?;
        let kx_old = kernel.gram(x, x_old)?;
        let kyy = if with_kyy {
            Some(kernel.gram_symmetric(y)?)
        } else {
            None
        };
        Ok(Self {
            kxx,
            kxy,
            kx_old,
            kyy,
        })
    }

    /// Adds `eps * I` to `kxx`. Only for solvers that need strict definiteness.
    pub fn with_jitter(mut self, eps: f64) -> Self {
        if eps != 0.0 {
            for i in 0..self.kxx.nrows() {
                self.kxx[(i, i)] += eps;
            }
        }
        self
    }
}
